//! Wavefunction energies, energy-ratio differences and output SNR.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, validation, Error, Result};
use crate::transforms::SpectralState;

/// Tolerance for the dB identity chain.
const CHAIN_TOL_DB: f64 = 1e-9;

/// Hamiltonian used by [`energy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnergySpec {
    /// `diag(0, 1, ..., L-1)` for a state of length `L`.
    #[default]
    NumberOperator,
    Hermitian(Array2<Complex64>),
}

impl EnergySpec {
    pub fn hermitian(h: Array2<Complex64>) -> Result<Self> {
        let (r, c) = h.dim();
        if r != c {
            return dimension(format!("hamiltonian must be square, got {r}x{c}"));
        }
        for i in 0..r {
            for j in 0..=i {
                if (h[[i, j]] - h[[j, i]].conj()).norm() > 1e-12 {
                    return validation(format!("hamiltonian is not Hermitian at ({i}, {j})"));
                }
            }
        }
        Ok(Self::Hermitian(h))
    }
}

/// Rayleigh quotient `<psi|H|psi> / <psi|psi>`.
pub fn energy(state: &SpectralState, spec: &EnergySpec) -> Result<f64> {
    let norm = state.norm_sqr();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numerical("energy of a zero-norm state".into()));
    }
    let amps = &state.amplitudes;
    let value = match spec {
        EnergySpec::NumberOperator => {
            let e: f64 = amps.iter().enumerate().map(|(j, a)| j as f64 * a.norm_sqr()).sum();
            Complex64::new(e, 0.0)
        }
        EnergySpec::Hermitian(h) => {
            if h.nrows() != amps.len() {
                return dimension(format!("hamiltonian is {0}x{0}, state has {1} entries", h.nrows(), amps.len()));
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, ai) in amps.iter().enumerate() {
                let row: Complex64 = h.row(i).iter().zip(amps).map(|(hij, aj)| hij * aj).sum();
                acc += ai.conj() * row;
            }
            acc
        }
    };
    let scale = value.re.abs().max(1.0) * norm;
    if value.im.abs() > 1e-9 * scale {
        return Err(Error::Numerical(format!("energy has imaginary part {}", value.im)));
    }
    Ok(value.re / norm)
}

/// `S/T - S/X`.
pub fn delta(s: f64, x: f64, t: f64) -> Result<f64> {
    if x == 0.0 || t == 0.0 {
        return validation("delta needs X != 0 and T != 0");
    }
    Ok(s / t - s / x)
}

pub fn delta_from_snr_db(delta_snr_db: f64) -> f64 {
    10f64.powf(delta_snr_db / 10.0)
}

pub fn snr_db_from_delta(delta: f64) -> Option<f64> {
    (delta > 0.0).then(|| 10.0 * delta.log10())
}

fn db(v: f64) -> Option<f64> {
    (v > 0.0 && v.is_finite()).then(|| 10.0 * v.log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub s: f64,
    pub x: f64,
    pub t: f64,
    pub r_st: f64,
    pub r_sx: f64,
    /// `r_st - r_sx`.
    pub delta: f64,
    /// `r_st / r_sx`, the factor under which the log decomposition is exact.
    pub delta_ratio: f64,
    pub snr_out_db: Option<f64>,
    pub snr_register_db: Option<f64>,
    /// `snr_out_db - snr_register_db`.
    pub delta_snr_db: Option<f64>,
    /// `10 (log10 delta + log10 r_sx)` with the difference form of delta.
    pub decomposed_db: Option<f64>,
    /// `decomposed_db - snr_out_db`.
    pub decomposition_gap_db: Option<f64>,
    pub decomposition_consistent: bool,
    pub no_gain: bool,
}

pub fn snr_report(s: f64, x: f64, t: f64) -> Result<SnrReport> {
    for (name, v) in [("S", s), ("X", x), ("T", t)] {
        if !v.is_finite() || v < 0.0 {
            return validation(format!("{name} must be finite and >= 0, got {v}"));
        }
    }
    let d = delta(s, x, t)?;
    let r_st = s / t;
    let r_sx = s / x;
    let snr_out_db = db(r_st);
    let snr_register_db = db(r_sx);
    let delta_snr_db = match (snr_out_db, snr_register_db) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let delta_ratio = if r_sx > 0.0 { r_st / r_sx } else { f64::NAN };

    // The chain holds exactly with the ratio form of delta.
    if let (Some(out), Some(reg), Some(ratio_db)) = (snr_out_db, snr_register_db, db(delta_ratio)) {
        let gap = (ratio_db + reg - out).abs();
        if gap > CHAIN_TOL_DB * out.abs().max(1.0) {
            return Err(Error::Numerical(format!("dB identity chain off by {gap}")));
        }
    }

    let decomposed_db = match (db(d), snr_register_db) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    };
    let decomposition_gap_db = match (decomposed_db, snr_out_db) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let decomposition_consistent = decomposition_gap_db.is_some_and(|g| g.abs() <= CHAIN_TOL_DB);

    Ok(SnrReport {
        s,
        x,
        t,
        r_st,
        r_sx,
        delta: d,
        delta_ratio,
        snr_out_db,
        snr_register_db,
        delta_snr_db,
        decomposed_db,
        decomposition_gap_db,
        decomposition_consistent,
        no_gain: d.is_nan() || d <= 0.0,
    })
}

pub fn report_for_states(
    input: &SpectralState,
    register: &SpectralState,
    output: &SpectralState,
    spec: &EnergySpec,
) -> Result<SnrReport> {
    snr_report(energy(input, spec)?, energy(register, spec)?, energy(output, spec)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Grid points where `delta + r_sx <= 0`.
    pub skipped: Vec<f64>,
}

impl Sweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,snr_db\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.delta, r.snr_db));
        }
        out
    }
}

/// `10 log10(delta + r_sx)` over the grid.
pub fn sweep_curve(r_sx: f64, grid: &[f64]) -> Result<Sweep> {
    if !r_sx.is_finite() {
        return validation("r_sx must be finite");
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &d in grid {
        match db(d + r_sx) {
            Some(snr_db) if d.is_finite() => rows.push(SweepRow { delta: d, snr_db }),
            _ => {
                log::warn!("sweep point delta = {d} gives nonpositive R(S,T), skipped");
                skipped.push(d);
            }
        }
    }
    Ok(Sweep { rows, skipped })
}
