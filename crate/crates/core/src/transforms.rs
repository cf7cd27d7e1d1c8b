//! Dense spectral transforms on complex amplitude vectors: constant-Q
//! transform and its inverse, inverse DSTFT (windowed and the restricted
//! unit-window form), and the DFT.
//!
//! All transforms are O(K^2) matrix applications. Phases are reduced modulo
//! `K` on integers before conversion to radians.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateLabel {
    Raw,
    Cqt,
    Icqt,
    Idstft,
    Dft,
}

/// Complex amplitude vector; `basis_size` is the vector length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub amplitudes: Vec<Complex64>,
    pub label: StateLabel,
}

impl SpectralState {
    pub fn new(amplitudes: Vec<Complex64>, label: StateLabel) -> Self {
        Self { amplitudes, label }
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self::new(values.iter().map(|v| Complex64::new(*v, 0.0)).collect(), StateLabel::Raw)
    }

    /// Amplitudes `sqrt(p_i)` normalized to unit norm. An all-zero profile
    /// gives an all-zero state.
    pub fn from_profile(profile: &[f64]) -> Self {
        let total: f64 = profile.iter().map(|p| p.max(0.0)).sum();
        let amps = profile
            .iter()
            .map(|p| {
                let v = if total > 0.0 { (p.max(0.0) / total).sqrt() } else { 0.0 };
                Complex64::new(v, 0.0)
            })
            .collect();
        Self::new(amps, StateLabel::Raw)
    }

    pub fn basis_size(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Unit-norm copy; `None` for the zero state.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm_sqr().sqrt();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(Self::new(self.amplitudes.iter().map(|a| a / n).collect(), self.label))
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// Window shift `h`, window size `K`, and whether the window is the constant 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub shift: i64,
    pub size: usize,
    pub unit_window: bool,
}

impl WindowSpec {
    /// Unit window with shift `h = K`.
    pub fn unit(size: usize) -> Self {
        Self {
            shift: size as i64,
            size,
            unit_window: true,
        }
    }

    pub fn hann(size: usize, shift: i64) -> Self {
        Self {
            shift,
            size,
            unit_window: false,
        }
    }

    /// Window value at integer offset `x`; a Hann window is zero outside `0..K`.
    pub fn value(&self, x: i64) -> Result<f64> {
        if self.unit_window {
            return Ok(1.0);
        }
        if x < 0 || x >= self.size as i64 {
            hann_window(0, self.size)?;
            return Ok(0.0);
        }
        hann_window(x, self.size)
    }
}

/// `0.5 (1 - cos(2 pi x / (K - 1)))`.
pub fn hann_window(x: i64, k: usize) -> Result<f64> {
    if k < 2 {
        return validation(format!("hann window needs K >= 2, got {k}"));
    }
    Ok(0.5 * (1.0 - (2.0 * PI * x as f64 / (k - 1) as f64).cos()))
}

/// `exp(sign * 2 pi i n / k)` with `n` reduced modulo `k` first.
fn root(n: i64, k: usize, sign: f64) -> Complex64 {
    let r = n.rem_euclid(k as i64) as f64;
    Complex64::from_polar(1.0, sign * 2.0 * PI * r / k as f64)
}

fn check_window(state: &SpectralState, w: &WindowSpec) -> Result<usize> {
    let k = state.basis_size();
    if w.size != k {
        return dimension(format!("window size {} does not match state length {k}", w.size));
    }
    if k == 0 {
        return dimension("state is empty");
    }
    Ok(k)
}

fn cqt_like(state: &SpectralState, w: &WindowSpec, freq: usize, sign: f64) -> Result<Vec<Complex64>> {
    let k_len = check_window(state, w)?;
    if w.shift == 0 {
        return validation("cqt shift h must be nonzero (Q/h is undefined for h = 0)");
    }
    let norm = 1.0 / (k_len as f64).sqrt();
    // Q / h = freq / K, so the phase at j is 2 pi j freq / K.
    state
        .amplitudes
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let f = w.value(j as i64 - w.shift)?;
            Ok(a * root((j * freq) as i64, k_len, sign) * (norm * f))
        })
        .collect()
}

/// Constant-Q transform at frequency index `freq`; diagonal in the basis.
pub fn cqt(state: &SpectralState, w: &WindowSpec, freq: usize) -> Result<SpectralState> {
    Ok(SpectralState::new(cqt_like(state, w, freq, 1.0)?, StateLabel::Cqt))
}

/// Inverse CQT: the same window with conjugated phase.
pub fn icqt(state: &SpectralState, w: &WindowSpec, freq: usize) -> Result<SpectralState> {
    Ok(SpectralState::new(cqt_like(state, w, freq, -1.0)?, StateLabel::Icqt))
}

/// Inverse DSTFT: `out_j = f(j - h) / sqrt(K) sum_k exp(-2 pi i j k / K) in_k`.
///
/// A Hann window requires `0 <= j - h <= K - 1` for every output index,
/// which only `h = 0` satisfies.
pub fn idstft(state: &SpectralState, w: &WindowSpec) -> Result<SpectralState> {
    let k_len = check_window(state, w)?;
    if !w.unit_window && w.shift != 0 {
        return validation(format!(
            "window domain 0 <= j - h <= K - 1 violated for h = {} and K = {k_len}",
            w.shift
        ));
    }
    let norm = 1.0 / (k_len as f64).sqrt();
    let mut out = Vec::with_capacity(k_len);
    for j in 0..k_len {
        let f = w.value(j as i64 - if w.unit_window { 0 } else { w.shift })?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, a) in state.amplitudes.iter().enumerate() {
            acc += a * root((j * k) as i64, k_len, -1.0);
        }
        out.push(acc * (norm * f));
    }
    Ok(SpectralState::new(out, StateLabel::Idstft))
}

/// Matrix of the unit-window inverse DSTFT.
pub fn idstft_matrix(k_len: usize) -> Array2<Complex64> {
    let norm = 1.0 / (k_len as f64).sqrt();
    Array2::from_shape_fn((k_len, k_len), |(j, k)| root((j * k) as i64, k_len, -1.0) * norm)
}

/// Matrix of [`dft`].
pub fn dft_matrix(k_len: usize) -> Array2<Complex64> {
    let norm = 1.0 / (k_len as f64).sqrt();
    Array2::from_shape_fn((k_len, k_len), |(j, k)| root((j * k) as i64, k_len, 1.0) * norm)
}

/// `out_j = 1/sqrt(K1) sum_k exp(2 pi i j k / K1) in_k`.
pub fn dft(state: &SpectralState, k1: usize) -> Result<SpectralState> {
    if state.basis_size() != k1 {
        return dimension(format!("dft expects length {k1}, got {}", state.basis_size()));
    }
    let m = dft_matrix(k1);
    let out = (0..k1)
        .map(|j| {
            state
                .amplitudes
                .iter()
                .enumerate()
                .map(|(k, a)| m[[j, k]] * a)
                .sum()
        })
        .collect();
    Ok(SpectralState::new(out, StateLabel::Dft))
}

/// Measurement distribution over the `K` grid points with its expected peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    pub peak: usize,
    pub probabilities: Vec<f64>,
}

impl ProbTable {
    pub fn peak_mass(&self) -> f64 {
        self.probabilities[self.peak]
    }

    pub fn off_peak_mass(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.peak)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// CSV with header `j,probability`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("j,probability\n");
        for (j, p) in self.probabilities.iter().enumerate() {
            let _ = writeln!(out, "{j},{p}");
        }
        out
    }
}

/// Grid index `K / k1 (mod K)` where the target mass concentrates.
pub fn peak_index(k1: usize, k_len: usize) -> Result<usize> {
    if k1 == 0 || k_len == 0 || !k_len.is_multiple_of(k1) {
        return validation(format!(
            "k1 = {k1} must divide K = {k_len} for the peak j = K/k1 to lie on the grid"
        ));
    }
    Ok((k_len / k1) % k_len)
}

/// Normalized phase sum `1/K sum_j exp(-2 pi i j x / K)`; 1 for `x = 0 (mod K)`, 0 otherwise up to rounding.
pub fn offset_phase_sum(x: i64, k_len: usize) -> Complex64 {
    let s: Complex64 = (0..k_len).map(|j| root(j as i64 * x, k_len, -1.0)).sum();
    s / k_len as f64
}

/// Ket superposition `1/sqrt(K) sum_i |k1 + x_i (mod K)>`. Kets with equal
/// offsets add coherently.
pub fn superposition(k1: usize, offsets: &[i64], k_len: usize) -> Result<SpectralState> {
    if k_len == 0 {
        return dimension("superposition over an empty index space");
    }
    let alpha = 1.0 / (k_len as f64).sqrt();
    let mut amps = vec![Complex64::new(0.0, 0.0); k_len];
    for x in offsets {
        let q = (k1 as i64 + x).rem_euclid(k_len as i64) as usize;
        amps[q] += alpha;
    }
    Ok(SpectralState::new(amps, StateLabel::Raw))
}

/// Restricted unit-window inverse DSTFT.
///
/// A ket at index `q` carries offset `x = q - k1 (mod K)`. Its contribution is
/// weighted by the literal phase sum [`offset_phase_sum`] and lands at
/// `j = K/k1 + x (mod K)` with phase `exp(-2 pi i j k1 / K)`, so zero-offset
/// kets pile up on the peak and the rest leave only rounding residue.
pub fn restricted_idstft(state: &SpectralState, k1: usize) -> Result<(SpectralState, ProbTable)> {
    let k_len = state.basis_size();
    let peak = peak_index(k1, k_len)?;
    let norm = 1.0 / (k_len as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); k_len];
    for (q, v) in state.amplitudes.iter().enumerate() {
        if *v == Complex64::new(0.0, 0.0) {
            continue;
        }
        let x = (q as i64 - k1 as i64).rem_euclid(k_len as i64);
        let j = (peak as i64 + x).rem_euclid(k_len as i64) as usize;
        let c = offset_phase_sum(x, k_len);
        out[j] += v * c * root((j * k1) as i64, k_len, -1.0) * norm;
    }
    let state = SpectralState::new(out, StateLabel::Idstft);
    let table = ProbTable {
        peak,
        probabilities: state.probabilities(),
    };
    Ok((state, table))
}

/// Builds the cluster superposition (cluster 1 at offset 0, the rest at
/// offsets 1, 2, ...) and applies [`restricted_idstft`].
pub fn idstft_unit(k1: usize, cluster_sizes: &[usize], k_len: usize) -> Result<(SpectralState, ProbTable)> {
    let total: usize = cluster_sizes.iter().sum();
    if total != k_len {
        return dimension(format!("cluster sizes sum to {total}, expected K = {k_len}"));
    }
    peak_index(k1, k_len)?;
    let k_target = cluster_sizes.first().copied().unwrap_or(0);
    let mut offsets = vec![0i64; k_target];
    offsets.extend((1..=(k_len - k_target) as i64).collect::<Vec<_>>());
    if k_len - k_target >= k_len {
        return validation("target cluster is empty; residual offsets would collide");
    }
    let state = superposition(k1, &offsets, k_len)?;
    restricted_idstft(&state, k1)
}
