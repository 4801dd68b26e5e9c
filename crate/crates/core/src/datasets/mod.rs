//! Toy datasets: a two-dimensional swiss roll and binary heartbeat sequences.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::kernels::DiffusionKind;

/// Heartbeat sequence length.
pub const HEARTBEAT_LENGTH: usize = 20;
/// Distance between consecutive ones in a heartbeat sequence.
pub const HEARTBEAT_PERIOD: usize = 5;

/// Swiss-roll generator settings (in raw, pre-standardization units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwissRollShape {
    /// Angle range start and end, radians.
    pub start_angle: f64,
    pub end_angle: f64,
    /// Radius per radian.
    pub radius_per_radian: f64,
    /// Standard deviation of isotropic Gaussian jitter.
    pub jitter: f64,
}

impl Default for SwissRollShape {
    fn default() -> Self {
        Self {
            start_angle: 1.5 * PI,
            end_angle: 4.5 * PI,
            radius_per_radian: 1.0,
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Continuous,
    Binary,
}

impl DataKind {
    /// The diffusion family that models this kind of data.
    pub fn diffusion(self) -> DiffusionKind {
        match self {
            Self::Continuous => DiffusionKind::Gaussian,
            Self::Binary => DiffusionKind::Binomial,
        }
    }
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Continuous => "continuous",
            Self::Binary => "binary",
        })
    }
}

impl std::str::FromStr for DataKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "binary" => Ok(Self::Binary),
            other => Err(invalid(format!("unknown data kind '{other}'"))),
        }
    }
}

/// An `n×d` data matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub data: Array2<f64>,
    /// Scale the raw data were divided by (continuous data only).
    pub factor: Option<f64>,
    pub generator: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Splits off the last `holdout` rows.
    pub fn split(&self, holdout: usize) -> Result<(Dataset, Dataset)> {
        if holdout >= self.len() {
            return Err(invalid("holdout must leave some training rows"));
        }
        let cut = self.len() - holdout;
        let part = |rows: std::ops::Range<usize>| Dataset {
            data: self.data.slice(ndarray::s![rows, ..]).to_owned(),
            ..self.clone()
        };
        Ok((part(0..cut), part(cut..self.len())))
    }
}

/// Divides `data` by the square root of its pooled centered second moment,
/// so the result has overall variance 1. The mean is not subtracted.
pub fn standardize(data: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    if data.is_empty() {
        return Err(invalid("cannot standardize an empty matrix"));
    }
    let n = data.len() as f64;
    let mean = data.sum() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(invalid("data have zero or non-finite variance"));
    }
    let factor = var.sqrt();
    Ok((data / factor, factor))
}

/// Points on a spiral arm with radius proportional to angle plus Gaussian
/// jitter, before centering and scaling. Also returns each point's angle.
pub fn swiss_roll_raw<R: Rng + ?Sized>(n: usize, shape: &SwissRollShape, rng: &mut R) -> (Array2<f64>, Vec<f64>) {
    let mut data = Array2::zeros((n, 2));
    let mut angles = Vec::with_capacity(n);
    for mut row in data.rows_mut() {
        let theta = shape.start_angle + (shape.end_angle - shape.start_angle) * rng.random::<f64>();
        let r = shape.radius_per_radian * theta;
        row[0] = r * theta.cos() + shape.jitter * rng.sample::<f64, _>(StandardNormal);
        row[1] = r * theta.sin() + shape.jitter * rng.sample::<f64, _>(StandardNormal);
        angles.push(theta);
    }
    (data, angles)
}

/// A swiss roll with the given shape, shifted to zero mean and standardized.
pub fn swiss_roll_with(n: usize, seed: u64, shape: &SwissRollShape) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("need at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (raw, _) = swiss_roll_raw(n, shape, &mut rng);
    let mean = raw.mean_axis(Axis(0)).expect("non-empty");
    let centered = &raw - &mean;
    let (data, factor) = standardize(&centered)?;
    Ok(Dataset {
        kind: DataKind::Continuous,
        data,
        factor: Some(factor),
        generator: "swiss_roll".into(),
        seed,
    })
}

/// [`swiss_roll_with`] using the default shape.
pub fn swiss_roll(n: usize, seed: u64) -> Result<Dataset> {
    swiss_roll_with(n, seed, &SwissRollShape::default())
}

/// Binary sequences of length 20 with a one every fifth bin, the phase drawn
/// uniformly from the first five bins.
pub fn heartbeat(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("need at least one sequence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array2::zeros((n, HEARTBEAT_LENGTH));
    for mut row in data.rows_mut() {
        let phase = rng.random_range(0..HEARTBEAT_PERIOD);
        for i in (phase..HEARTBEAT_LENGTH).step_by(HEARTBEAT_PERIOD) {
            row[i] = 1.0;
        }
    }
    Ok(Dataset {
        kind: DataKind::Binary,
        data,
        factor: None,
        generator: "heartbeat".into(),
        seed,
    })
}

/// Whether `row` is one of the five valid heartbeat sequences.
pub fn is_heartbeat(row: &[f64]) -> bool {
    if row.len() != HEARTBEAT_LENGTH {
        return false;
    }
    let Some(phase) = row.iter().position(|&v| v == 1.0) else {
        return false;
    };
    phase < HEARTBEAT_PERIOD
        && row
            .iter()
            .enumerate()
            .all(|(i, &v)| v == if i >= phase && (i - phase) % HEARTBEAT_PERIOD == 0 { 1.0 } else { 0.0 })
}

/// Log-likelihood of any valid heartbeat sequence under the generator, bits.
pub fn heartbeat_entropy_bits() -> f64 {
    -(HEARTBEAT_PERIOD as f64).log2()
}
