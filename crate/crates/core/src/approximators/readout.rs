use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{invalid, Result};
use crate::kernels::{clamp_rate, DiagonalDistribution};

use super::params::{Block, ParamSource};
use super::KernelVars;

/// How per-step output weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    /// An independent readout for every time step.
    PerStep,
    /// `J` shared readouts blended by [`bump_basis`].
    Bump(usize),
}

impl ReadoutMode {
    /// Number of stored readouts for a process with `steps` steps.
    pub fn count(self, steps: usize) -> usize {
        match self {
            Self::PerStep => steps,
            Self::Bump(j) => j,
        }
    }
}

impl std::fmt::Display for ReadoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PerStep => f.write_str("per-step"),
            Self::Bump(j) => write!(f, "bump:{j}"),
        }
    }
}

impl std::str::FromStr for ReadoutMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "per-step" {
            return Ok(Self::PerStep);
        }
        let j = s
            .strip_prefix("bump:")
            .and_then(|j| j.parse::<usize>().ok())
            .ok_or_else(|| invalid(format!("readout '{s}' is neither 'per-step' nor 'bump:<J>'")))?;
        if j == 0 {
            return Err(invalid("bump readout needs at least one bump"));
        }
        Ok(Self::Bump(j))
    }
}

/// Softmax-normalized Gaussian bumps over the time axis: centers
/// `tau_j = (j - 1/2) T / J`, shared width `w = T / J`.
pub fn bump_basis(t: usize, bumps: usize, steps: usize) -> Result<Vec<f64>> {
    if bumps == 0 {
        return Err(invalid("bump basis needs J >= 1"));
    }
    if t == 0 || t > steps {
        return Err(invalid(format!("t = {t} outside [1, {steps}]")));
    }
    let width = steps as f64 / bumps as f64;
    let logits: Vec<f64> = (1..=bumps)
        .map(|j| {
            let tau = (j as f64 - 0.5) * width;
            -(t as f64 - tau).powi(2) / (2.0 * width * width)
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Turns raw network outputs into reverse-kernel moments as a perturbation of
/// the forward kernel: `Sigma = sigmoid(z_sigma + logit beta)`,
/// `mu = (x - z_mu)(1 - Sigma) + z_mu`.
pub fn readout_transform(z_mu: &[f64], z_sigma: &[f64], x_t: &[f64], beta_t: f64) -> Result<DiagonalDistribution> {
    if !(beta_t > 0.0 && beta_t < 1.0) {
        return Err(invalid(format!("beta_t = {beta_t} has no logit")));
    }
    if z_mu.len() != x_t.len() || z_sigma.len() != x_t.len() {
        return Err(invalid("readout dimensions differ"));
    }
    let lb = (beta_t / (1.0 - beta_t)).ln();
    let var: Vec<f64> = z_sigma.iter().map(|z| sigmoid(z + lb)).collect();
    let mean = x_t
        .iter()
        .zip(z_mu)
        .zip(&var)
        .map(|((x, zm), s)| (x - zm) * (1.0 - s) + zm)
        .collect();
    Ok(DiagonalDistribution::Gaussian { mean, var })
}

/// Tape version of [`readout_transform`]. `beta` is `1×1`; it is clamped to
/// the open unit interval before taking its logit.
pub fn record_readout_transform(tape: &mut Tape, z_mu: Var, z_sigma: Var, x: Var, beta: Var) -> KernelVars {
    let lo = clamp_rate(0.0);
    let b = tape.clamp(beta, lo, 1.0 - lo);
    let lb = tape.ln(b);
    let ob = tape.one_minus(b);
    let lob = tape.ln(ob);
    let logit = tape.sub(lb, lob);
    let pre = tape.add(z_sigma, logit);
    let var = tape.sigmoid(pre);
    let log_var = tape.log_sigmoid(pre);
    let diff = tape.sub(x, z_mu);
    let keep = tape.one_minus(var);
    let scaled = tape.mul(diff, keep);
    let mean = tape.add(scaled, z_mu);
    KernelVars::Gaussian { mean, var, log_var }
}

/// Bump weights below this are left off the tape.
const BUMP_CUTOFF: f64 = 1e-16;

/// Records the effective readout weights for step `t`.
pub(crate) fn record_readout(
    tape: &mut Tape,
    src: &ParamSource,
    blocks: &[Block],
    mode: ReadoutMode,
    t: usize,
    steps: usize,
) -> Var {
    match mode {
        ReadoutMode::PerStep => src.leaf(tape, &blocks[t - 1]),
        ReadoutMode::Bump(j) => {
            let g = bump_basis(t, j, steps).expect("validated bump configuration");
            let mut acc: Option<Var> = None;
            for (block, gj) in blocks.iter().zip(g) {
                if gj < BUMP_CUTOFF {
                    continue;
                }
                let w = src.leaf(tape, block);
                let w = tape.scale(w, gj);
                acc = Some(match acc {
                    Some(a) => tape.add(a, w),
                    None => w,
                });
            }
            acc.expect("at least one bump")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bump_is_constant_one() {
        for t in 1..=9 {
            assert_eq!(bump_basis(t, 1, 9).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn bumps_partition_unity_and_peak_at_centers() {
        for steps in [1, 7, 40, 2000] {
            for j in [1, 3, 10] {
                for t in 1..=steps {
                    let g = bump_basis(t, j, steps).unwrap();
                    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(g.iter().all(|&v| v >= 0.0));
                }
            }
        }
        // T = 40, J = 4: centers at 5, 15, 25, 35.
        let g = bump_basis(25, 4, 40).unwrap();
        let best = (0..4).max_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        assert_eq!(best, 2);
        assert!(bump_basis(1, 0, 4).is_err());
    }

    #[test]
    fn zero_outputs_give_forward_like_kernel() {
        let d = readout_transform(&[0.0, 0.0], &[0.0, 0.0], &[1.5, -2.0], 0.2).unwrap();
        let DiagonalDistribution::Gaussian { mean, var } = d else { unreachable!() };
        assert!((var[0] - 0.2).abs() < 1e-15 && (var[1] - 0.2).abs() < 1e-15);
        assert!((mean[0] - 1.2).abs() < 1e-15 && (mean[1] + 1.6).abs() < 1e-15);
    }

    #[test]
    fn saturated_sigma_moves_mean_to_target() {
        let d = readout_transform(&[0.7], &[60.0], &[3.0], 0.1).unwrap();
        let DiagonalDistribution::Gaussian { mean, var } = d else { unreachable!() };
        assert!((var[0] - 1.0).abs() < 1e-12);
        assert!((mean[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rates_rejected() {
        assert!(readout_transform(&[0.0], &[0.0], &[0.0], 0.0).is_err());
        assert!(readout_transform(&[0.0], &[0.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn tape_version_matches_plain_formula() {
        let (zm, zs, x, beta) = ([0.4, -1.1], [0.3, -2.0], [0.9, 0.2], 0.35);
        let mut tape = Tape::new();
        let zmv = tape.row_const(&zm);
        let zsv = tape.row_const(&zs);
        let xv = tape.row_const(&x);
        let bv = tape.scalar_const(beta);
        let KernelVars::Gaussian { mean, var, log_var } = record_readout_transform(&mut tape, zmv, zsv, xv, bv) else {
            unreachable!()
        };
        // Independent evaluation of the two formulas.
        let logit: f64 = (beta / (1.0 - beta)).ln();
        for i in 0..2 {
            let s = 1.0 / (1.0 + (-(zs[i] + logit)).exp());
            let m = (x[i] - zm[i]) * (1.0 - s) + zm[i];
            assert!((tape.value(var)[[0, i]] - s).abs() < 1e-14);
            assert!((tape.value(log_var)[[0, i]] - s.ln()).abs() < 1e-14);
            assert!((tape.value(mean)[[0, i]] - m).abs() < 1e-14);
        }
    }

    #[test]
    fn readout_mode_parses() {
        assert_eq!("per-step".parse::<ReadoutMode>().unwrap(), ReadoutMode::PerStep);
        assert_eq!("bump:6".parse::<ReadoutMode>().unwrap(), ReadoutMode::Bump(6));
        assert!("bump:0".parse::<ReadoutMode>().is_err());
        assert!("other".parse::<ReadoutMode>().is_err());
    }
}
