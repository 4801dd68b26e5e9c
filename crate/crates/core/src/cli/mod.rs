//! The `dpm` command line: data generation, training, sampling, evaluation,
//! conditioning and entropy bounds.

pub mod checkpoint;
pub mod config;
pub mod textio;

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::approximators::{ModelConfig, ModelRegistry};
use crate::conditioning::{sample_conditional, ExternalFactor, RSchedule};
use crate::datasets::{self, DataKind, Dataset, SwissRollShape};
use crate::error::{Error, Result};
use crate::inference::{entropy_bounds, estimate_dataset_log_likelihood, reverse_kernel_entropy, sample_reverse};
use crate::kernels::{forward_marginal, make_schedule, to_bits, DiffusionSpec};
use crate::objective::{estimate_bound, null_baseline, train, DiffusionModel, LogRow};

use checkpoint::Checkpoint;
use config::{DataSource, RunConfig};
use textio::{format_value, read_vector, TextMatrix};

#[derive(Debug, Parser)]
#[command(name = "dpm", version, about = "Diffusion probabilistic models on toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    SwissRoll,
    Heartbeat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated dataset.
    GenData {
        #[arg(long, value_enum)]
        kind: Generator,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Swiss-roll jitter before standardization.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples from a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate state to `<out>.frames/`.
        #[arg(long)]
        frames: bool,
    },
    /// Report the bound K and an importance-sampled log likelihood, in bits.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_traj: usize,
        /// Use at most this many rows for the likelihood estimate.
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample from the model multiplied by a mask or a noisy observation.
    Conditional {
        #[arg(long)]
        ckpt: PathBuf,
        /// 0/1 row marking known coordinates.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Observed values (one row).
        #[arg(long)]
        obs: PathBuf,
        /// Observation noise variance; selects Gaussian denoising.
        #[arg(long)]
        noise_var: Option<f64>,
        #[arg(long, default_value = "constant")]
        r_schedule: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the per-step entropy bound table.
    Bounds {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` and runs the command, returning the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            kind,
            n,
            seed,
            jitter,
            out,
        } => gen_data(kind, n, seed, jitter, &out),
        Command::Train { config } => train_command(&config).map(|_| ()),
        Command::Sample {
            ckpt,
            n,
            seed,
            out,
            frames,
        } => sample_command(&ckpt, n, seed, &out, frames),
        Command::Evaluate {
            ckpt,
            data,
            n_traj,
            max_rows,
            seed,
            out,
        } => evaluate_command(&ckpt, &data, n_traj, max_rows, seed, out.as_deref()).map(|_| ()),
        Command::Conditional {
            ckpt,
            mask,
            obs,
            noise_var,
            r_schedule,
            n,
            seed,
            out,
        } => conditional_command(&ckpt, mask.as_deref(), &obs, noise_var, &r_schedule, n, seed, &out),
        Command::Bounds { ckpt, data, seed, out } => bounds_command(&ckpt, &data, seed, &out),
    }
}

pub fn dataset_matrix(ds: &Dataset) -> TextMatrix {
    let mut m = TextMatrix::new(ds.data.clone())
        .with("kind", ds.kind)
        .with("generator", &ds.generator)
        .with("seed", ds.seed)
        .with("n", ds.len())
        .with("d", ds.dim());
    if let Some(f) = ds.factor {
        m = m.with("factor", format_value(f));
    }
    m
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let m = TextMatrix::read(path)?;
    let kind = match m.get("kind") {
        Some(k) => k.parse()?,
        None if m.data.iter().all(|&v| v == 0.0 || v == 1.0) => DataKind::Binary,
        None => DataKind::Continuous,
    };
    if m.data.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    Ok(Dataset {
        kind,
        factor: m.get_parsed("factor")?,
        generator: m.get("generator").unwrap_or("file").to_string(),
        seed: m.get_parsed("seed")?.unwrap_or(0),
        data: m.data,
    })
}

fn generate(generator: &str, n: usize, seed: u64, jitter: Option<f64>) -> Result<Dataset> {
    match generator {
        "swiss-roll" | "swiss_roll" => {
            let mut shape = SwissRollShape::default();
            if let Some(j) = jitter {
                shape.jitter = j;
            }
            datasets::swiss_roll_with(n, seed, &shape)
        }
        "heartbeat" => datasets::heartbeat(n, seed),
        other => Err(Error::Config(format!("unknown dataset generator '{other}'"))),
    }
}

fn gen_data(kind: Generator, n: usize, seed: u64, jitter: Option<f64>, out: &Path) -> Result<()> {
    let name = match kind {
        Generator::SwissRoll => "swiss-roll",
        Generator::Heartbeat => "heartbeat",
    };
    dataset_matrix(&generate(name, n, seed, jitter)?).write(out)
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Builds the untrained model described by `cfg` for `data`.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<DiffusionModel> {
    let kind = data.kind.diffusion();
    let spec = DiffusionSpec::new(make_schedule(kind, cfg.steps, cfg.beta1, cfg.schedule)?, data.dim())?;
    let model_cfg = ModelConfig {
        kind,
        dim: data.dim(),
        steps: cfg.steps,
        hidden: cfg.hidden.clone(),
        readout: cfg.readout,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let model = ModelRegistry::with_defaults().build(&cfg.model, &model_cfg, Some(&data.data), &mut rng)?;
    DiffusionModel::new(spec, model)
}

/// Runs `train --config`, returning the final checkpoint.
pub fn train_command(config_path: &Path) -> Result<Checkpoint> {
    let cfg = RunConfig::load(config_path)?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let all = match &cfg.data {
        DataSource::File(p) => read_dataset(p)?,
        DataSource::Generate { generator, n } => generate(generator, *n, cfg.data_seed, None)?,
    };
    let (train_set, holdout) = if cfg.holdout > 0 {
        let (a, b) = all.split(cfg.holdout)?;
        (a, Some(b))
    } else {
        (all, None)
    };
    if let Some(h) = &holdout {
        dataset_matrix(h).write(&cfg.out_dir.join("holdout.txt"))?;
    }
    let mut dm = build_model(&cfg, &train_set)?;
    let mut ckpt = Checkpoint {
        model: dm.clone(),
        step: 0,
        seed: cfg.train.seed,
        factor: train_set.factor,
    };
    ckpt.save(&cfg.out_dir.join("init.ckpt"))?;

    let mut log = File::create(cfg.out_dir.join("train_log.csv"))?;
    writeln!(log, "step,seconds,k_bits,grad_norm")?;
    let mut write_err = None;
    let mut on_log = |row: &LogRow| {
        if let Err(e) = writeln!(log, "{},{:.3},{},{}", row.step, row.seconds, format_value(row.k_bits), format_value(row.grad_norm)) {
            write_err.get_or_insert(e);
        }
    };
    let outcome = train(&mut dm, &train_set.data, &cfg.train, &mut on_log);
    if let Some(e) = write_err {
        return Err(e.into());
    }
    ckpt.model = dm;
    match outcome {
        Ok(report) => {
            ckpt.step = report.steps as u64;
            ckpt.save(&cfg.out_dir.join("final.ckpt"))?;
            Ok(ckpt)
        }
        Err(Error::Diverged { step, last_good_step }) => {
            ckpt.step = last_good_step as u64;
            ckpt.save(&cfg.out_dir.join("last_good.ckpt"))?;
            Err(Error::Diverged { step, last_good_step })
        }
        Err(e) => Err(e),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, &ModelRegistry::with_defaults())
}

fn sample_command(ckpt: &Path, n: usize, seed: u64, out: &Path, frames: bool) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let rec = sample_reverse(&ck.model, n, &mut ChaCha8Rng::seed_from_u64(seed), frames)?;
    let header = |m: TextMatrix| {
        let m = m.with("kind", ck.model.kind()).with("seed", seed);
        match ck.factor {
            Some(f) => m.with("factor", format_value(f)),
            None => m,
        }
    };
    header(TextMatrix::new(rec.samples.clone())).write(out)?;
    if frames {
        let dir = PathBuf::from(format!("{}.frames", out.display()));
        for t in 0..=ck.model.steps() {
            let frame = rec.frame(t).expect("frames were kept");
            header(TextMatrix::new(frame.clone()).with("t", t)).write(&dir.join(format!("t{t:05}.txt")))?;
        }
    }
    Ok(())
}

fn data_for(ck: &Checkpoint, path: &Path) -> Result<Dataset> {
    let data = read_dataset(path)?;
    ck.expect_kind(data.kind.diffusion())?;
    if data.dim() != ck.model.dim() {
        return Err(Error::InvalidArgument(format!(
            "data have {} columns, model expects {}",
            data.dim(),
            ck.model.dim()
        )));
    }
    Ok(data)
}

/// Results of `evaluate`, all in bits per datum.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: usize,
    pub k: f64,
    pub k_stderr: f64,
    pub kl_terms: Vec<(usize, f64)>,
    pub entropy_q_final: f64,
    pub entropy_q_first: f64,
    pub entropy_p_final: f64,
    pub loglik: f64,
    pub loglik_stderr: f64,
    pub null: f64,
    /// Null under independent bits with the data's mean activity (binary only).
    pub mean_null: Option<f64>,
    pub jensen_ok: bool,
}

impl Evaluation {
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("rows={}", self.rows),
            format!("k_bits={}", format_value(self.k)),
            format!("k_stderr_bits={}", format_value(self.k_stderr)),
            format!("entropy_q_final_bits={}", format_value(self.entropy_q_final)),
            format!("entropy_q_first_bits={}", format_value(self.entropy_q_first)),
            format!("entropy_p_final_bits={}", format_value(self.entropy_p_final)),
            format!("loglik_bits={}", format_value(self.loglik)),
            format!("loglik_stderr_bits={}", format_value(self.loglik_stderr)),
            format!("null_bits={}", format_value(self.null)),
            format!("k_minus_null_bits={}", format_value(self.k - self.null)),
        ];
        if let Some(m) = self.mean_null {
            lines.push(format!("mean_null_bits={}", format_value(m)));
            lines.push(format!("k_minus_mean_null_bits={}", format_value(self.k - m)));
        }
        lines.push(format!("jensen_ok={}", self.jensen_ok));
        for (t, kl) in &self.kl_terms {
            lines.push(format!("kl_bits_t{t}={}", format_value(*kl)));
        }
        lines.join("\n") + "\n"
    }
}

/// Mean log2-probability of binary rows under independent bits with the
/// data's overall mean activity.
pub fn mean_activity_null(data: &Array2<f64>) -> f64 {
    let p = (data.sum() / data.len() as f64).clamp(1e-12, 1.0 - 1e-12);
    let ones = data.sum();
    let zeros = data.len() as f64 - ones;
    (ones * p.log2() + zeros * (1.0 - p).log2()) / data.nrows() as f64
}

pub fn evaluate(dm: &DiffusionModel, data: &Dataset, n_traj: usize, max_rows: Option<usize>, seed: u64) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = estimate_bound(dm, &data.data, &mut rng)?;
    let rows = max_rows.unwrap_or(data.len()).min(data.len());
    let subset = data.data.slice(ndarray::s![..rows, ..]).to_owned();
    let ll = estimate_dataset_log_likelihood(dm, &subset, n_traj, &mut rng)?;
    let (k, k_se) = (bound.total_bits(), bound.stderr_bits());
    let (l, l_se) = (to_bits(ll.mean), to_bits(ll.stderr));
    let jensen_ok = l + 4.0 * (k_se * k_se + l_se * l_se).sqrt() >= k;
    Ok(Evaluation {
        rows: data.len(),
        k,
        k_stderr: k_se,
        kl_terms: bound.kl_terms.iter().map(|&(t, v)| (t, to_bits(v))).collect(),
        entropy_q_final: to_bits(bound.entropy_q_final),
        entropy_q_first: to_bits(bound.entropy_q_first),
        entropy_p_final: to_bits(bound.entropy_p_final),
        loglik: l,
        loglik_stderr: l_se,
        null: null_baseline(&dm.spec, &data.data)?,
        mean_null: (data.kind == DataKind::Binary).then(|| mean_activity_null(&data.data)),
        jensen_ok,
    })
}

fn evaluate_command(
    ckpt: &Path,
    data: &Path,
    n_traj: usize,
    max_rows: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<Evaluation> {
    let ck = load_checkpoint(ckpt)?;
    let data = data_for(&ck, data)?;
    let report = evaluate(&ck.model, &data, n_traj, max_rows, seed)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, report.to_text())?
        }
        None => print!("{}", report.to_text()),
    }
    if !report.jensen_ok {
        return Err(Error::InvalidArgument(format!(
            "bound K = {:.4} bits exceeds the likelihood estimate {:.4} bits beyond Monte Carlo error",
            report.k, report.loglik
        )));
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn conditional_command(
    ckpt: &Path,
    mask: Option<&Path>,
    obs: &Path,
    noise_var: Option<f64>,
    r_schedule: &str,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let values = read_vector(obs)?;
    let factor = match (mask, noise_var) {
        (Some(m), None) => {
            let known = read_vector(m)?
                .into_iter()
                .map(|v| match v {
                    0.0 => Ok(false),
                    1.0 => Ok(true),
                    other => Err(Error::Parse(format!("mask entries must be 0 or 1, found {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            ExternalFactor::mask(known, values)?
        }
        (None, Some(v)) => ExternalFactor::gaussian(values, v)?,
        _ => return Err(Error::InvalidArgument("give exactly one of --mask or --noise-var".into())),
    };
    let schedule: RSchedule = r_schedule.parse()?;
    let rec = sample_conditional(&ck.model, &factor, schedule, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    TextMatrix::new(rec.samples)
        .with("kind", ck.model.kind())
        .with("seed", seed)
        .with("r_schedule", schedule)
        .write(out)
}

/// Rows `t, upper, lower, model_entropy` (nats) for `t = 2..T`; the model
/// entropy is averaged over `x^(t) ~ q(x^(t) | x^(0))`.
pub fn bounds_table(dm: &DiffusionModel, data: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = dm.steps();
    let mut table = Array2::zeros((steps.saturating_sub(1), 4));
    for (row, t) in (2..=steps).enumerate() {
        let r = entropy_bounds(&dm.spec, t, data)?;
        let mut xt = Array2::zeros(data.dim());
        for (x0, mut out) in data.axis_iter(Axis(0)).zip(xt.axis_iter_mut(Axis(0))) {
            let m = forward_marginal(&dm.spec, &x0.to_vec(), t)?;
            out.assign(&ndarray::Array1::from(m.sample(&mut rng)));
        }
        let h = reverse_kernel_entropy(dm, &xt, t)?;
        table.row_mut(row).assign(&ndarray::arr1(&[t as f64, r.upper, r.lower, h]));
    }
    Ok(table)
}

fn bounds_command(ckpt: &Path, data: &Path, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let data = data_for(&ck, data)?;
    TextMatrix::new(bounds_table(&ck.model, &data.data, seed)?)
        .with("columns", "t,upper_nats,lower_nats,model_entropy_nats")
        .with("kind", ck.model.kind())
        .write(out)
}
