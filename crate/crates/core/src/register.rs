//! Synthetic two-source register: planted target and residual rows, and the
//! observation matrix fed to factorization.
//!
//! The target row holds `dim` spikes in the low half of the `horizon` bins,
//! weighted by a flat Dirichlet draw. The residual row is a jittered broadband
//! envelope on the high half, rescaled so its Frobenius norm is
//! `residual_strength` times the target's. Both rows are multiplied by
//! `intensity` so the Poisson likelihood sees count-scale data.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, validation, Result};
use crate::NUM_SOURCES;

fn default_sources() -> usize {
    NUM_SOURCES
}

fn default_intensity() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterConfig {
    #[serde(default = "default_sources")]
    pub num_sources: usize,
    pub horizon: usize,
    pub dim: usize,
    pub residual_strength: f64,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            num_sources: NUM_SOURCES,
            horizon: 128,
            dim: 8,
            residual_strength: 0.3,
            intensity: default_intensity(),
            seed: 0,
        }
    }
}

impl RegisterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sources != NUM_SOURCES {
            return validation(format!("num_sources must be 2, got {}", self.num_sources));
        }
        if self.horizon < 1 {
            return validation("horizon must be >= 1");
        }
        if self.dim < 1 {
            return validation("dim must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.residual_strength) {
            return validation(format!(
                "residual_strength must lie in [0, 1], got {}",
                self.residual_strength
            ));
        }
        if !(self.intensity.is_finite() && self.intensity > 0.0) {
            return validation(format!("intensity must be > 0, got {}", self.intensity));
        }
        Ok(())
    }

    /// Bins `[0, target_band)` carry the target spikes.
    pub fn target_band(&self) -> usize {
        (self.horizon / 2).max(1)
    }

    /// Half-open bin range of the residual envelope.
    pub fn residual_band(&self) -> (usize, usize) {
        if self.horizon == 1 {
            (0, 1)
        } else {
            (self.horizon / 2, self.horizon)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Row 0 is the target source, row 1 the residual.
    pub source_rows: Array2<f64>,
    /// Input weights; sum to one.
    pub input_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    pub values: Array2<f64>,
    /// Column sums of `values`.
    pub aggregate: Array1<f64>,
    pub metadata: RegisterConfig,
}

impl ObservationMatrix {
    /// Wraps a raw nonnegative matrix, e.g. one read back from disk.
    pub fn from_values(values: Array2<f64>, metadata: RegisterConfig) -> Result<Self> {
        if values.nrows() != NUM_SOURCES || values.ncols() != metadata.horizon {
            return dimension(format!(
                "observation must be {}x{}, got {}x{}",
                NUM_SOURCES,
                metadata.horizon,
                values.nrows(),
                values.ncols()
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return validation(format!("observation entries must be finite and >= 0, found {v}"));
        }
        let aggregate = values.sum_axis(Axis(0));
        Ok(Self {
            values,
            aggregate,
            metadata,
        })
    }
}

fn hann(x: usize, len: usize) -> f64 {
    if len < 2 {
        return 1.0;
    }
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * x as f64 / (len - 1) as f64).cos())
}

/// Draws the planted sources.
pub fn generate_input(cfg: &RegisterConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_len = cfg.horizon;
    let n = cfg.dim;

    // Flat Dirichlet via normalized unit exponentials.
    let draws: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = draws.iter().sum();
    let input_weights: Vec<f64> = draws.iter().map(|d| d / total).collect();

    let mut rows = Array2::<f64>::zeros((NUM_SOURCES, t_len));
    let band = cfg.target_band();
    let spread = n.max(band);
    for (i, w) in input_weights.iter().enumerate() {
        rows[[0, i * band / spread]] += w;
    }

    let (lo, hi) = cfg.residual_band();
    let width = hi - lo;
    let residual: Vec<f64> = (0..width)
        .map(|x| (0.25 + 0.75 * hann(x, width)) * (0.75 + 0.5 * rng.random::<f64>()))
        .collect();
    let target_norm = rows.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
    let residual_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = cfg.residual_strength * target_norm / residual_norm;
    for (x, r) in residual.iter().enumerate() {
        rows[[1, lo + x]] = r * scale;
    }

    rows.mapv_inplace(|v| v * cfg.intensity);
    Ok(GroundTruth {
        source_rows: rows,
        input_weights,
    })
}

/// Reads out the register: identity mixing of the source rows.
pub fn observe(gt: &GroundTruth, cfg: &RegisterConfig) -> Result<ObservationMatrix> {
    let shape = gt.source_rows.dim();
    if shape != (NUM_SOURCES, cfg.horizon) {
        return dimension(format!(
            "ground truth is {}x{}, config expects {}x{}",
            shape.0, shape.1, NUM_SOURCES, cfg.horizon
        ));
    }
    ObservationMatrix::from_values(gt.source_rows.clone(), cfg.clone())
}
