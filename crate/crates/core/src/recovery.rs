//! Target extraction: inverse CQT and regrouping of the partitioned bases,
//! the offset superposition, the restricted inverse DSTFT and the final DFT.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, validation, Error, Result};
use crate::partition::{BasisPartition, TransformedBases};
use crate::transforms::{dft, icqt, restricted_idstft, superposition, ProbTable, SpectralState, StateLabel};

/// Inverse-CQT'd bases split by cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredBases {
    /// `theta`, `M x K`.
    pub theta: Array2<Complex64>,
    /// 0-based basis indices per cluster.
    pub groups: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    /// `theta W`, `M x T`.
    pub chi_w: Array2<Complex64>,
}

impl ClusteredBases {
    /// Columns of `theta` belonging to cluster `m` (1-based).
    pub fn gamma(&self, m: usize) -> Array2<Complex64> {
        let idx = &self.groups[m - 1];
        Array2::from_shape_fn((self.theta.nrows(), idx.len()), |(i, j)| self.theta[[i, idx[j]]])
    }
}

pub fn regroup(tb: &TransformedBases, partition: &BasisPartition, activations: &Array2<f64>) -> Result<ClusteredBases> {
    let (m_len, k_len) = tb.c_b.dim();
    if partition.k() != k_len {
        return dimension(format!("partition covers {} bases, transform has {k_len}", partition.k()));
    }
    if activations.nrows() != k_len {
        return dimension(format!("activations have {} rows, expected {k_len}", activations.nrows()));
    }
    let mut theta = Array2::zeros((m_len, k_len));
    for m in 0..m_len {
        let back = icqt(&tb.row_state(m), &tb.window, tb.freq)?;
        for (k, a) in back.amplitudes.into_iter().enumerate() {
            theta[[m, k]] = a;
        }
    }
    let groups: Vec<Vec<usize>> = (1..=partition.cluster_sizes.len()).map(|m| partition.members(m)).collect();
    let chi_w = theta.dot(&activations.mapv(|v| Complex64::new(v, 0.0)));
    Ok(ClusteredBases {
        theta,
        sizes: partition.cluster_sizes.clone(),
        groups,
        chi_w,
    })
}

/// Offsets with cluster-1 bases at 0 and the others at 1, 2, ... in basis order.
pub fn default_offsets(partition: &BasisPartition) -> Vec<i64> {
    let mut next = 0;
    partition
        .assignment
        .iter()
        .map(|a| {
            if *a == 1 {
                0
            } else {
                next += 1;
                next
            }
        })
        .collect()
}

/// `1/sqrt(K) sum_k |k1 + x_k (mod K)>` over all bases.
pub fn build_superposition(partition: &BasisPartition, k1: usize, offsets: Option<&[i64]>) -> Result<SpectralState> {
    let k_len = partition.k();
    if k_len == 0 {
        return dimension("partition is empty");
    }
    let owned;
    let offsets = match offsets {
        Some(o) => o,
        None => {
            owned = default_offsets(partition);
            &owned
        }
    };
    if offsets.len() != k_len {
        return dimension(format!("{} offsets given for {k_len} bases", offsets.len()));
    }
    let modulus = k_len as i64;
    let mut used = vec![false; k_len];
    for (k, (a, x)) in partition.assignment.iter().zip(offsets).enumerate() {
        let zero = x.rem_euclid(modulus) == 0;
        if zero != (*a == 1) {
            return validation(format!(
                "basis {} in cluster {a} has offset {x}; offsets must be 0 exactly for cluster 1",
                k + 1
            ));
        }
        if !zero {
            let slot = x.rem_euclid(modulus) as usize;
            if used[slot] {
                return validation(format!("offset {x} of basis {} collides with another residual basis", k + 1));
            }
            used[slot] = true;
        }
    }
    superposition(k1, offsets, k_len)
}

/// Restricted inverse DSTFT of the superposition.
pub fn extract_target(state: &SpectralState, k1: usize) -> Result<(SpectralState, ProbTable)> {
    restricted_idstft(state, k1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// Unit-norm state over the `K1` recovered bases.
    pub phi_star: SpectralState,
    pub prob_table: ProbTable,
    pub fidelity_vs_target: f64,
    /// 1-based indices of the recovered (cluster-1) bases; slot `i` of
    /// `phi_star` belongs to `recovered_labels[i]`.
    pub recovered_labels: Vec<usize>,
    /// Probability mass off the peak.
    pub residual_mass: f64,
}

/// Takes the `K1` amplitudes starting at the peak, normalizes them and
/// applies the DFT.
///
/// `target` lists the 0-based bases of the reference target state (uniform
/// over those bases); `None` compares against the uniform state on the
/// recovered bases themselves.
pub fn finalize(
    state: &SpectralState,
    table: &ProbTable,
    partition: &BasisPartition,
    target: Option<&[usize]>,
) -> Result<RecoveryResult> {
    let k_len = state.basis_size();
    if partition.k() != k_len {
        return dimension(format!("state has {k_len} entries, partition {}", partition.k()));
    }
    let members = partition.members(1);
    let k1_len = members.len();
    if k1_len == 0 {
        return Err(Error::Numerical("target cluster is empty; nothing to recover".into()));
    }
    let window: Vec<Complex64> = (0..k1_len)
        .map(|i| state.amplitudes[(table.peak + i) % k_len])
        .collect();
    let window = SpectralState::new(window, StateLabel::Idstft)
        .normalized()
        .ok_or_else(|| Error::Numerical("recovered window has zero norm".into()))?;
    let phi_star = dft(&window, k1_len)?;

    let reference: Vec<usize> = match target {
        Some(t) => t.to_vec(),
        None => members.clone(),
    };
    if let Some(bad) = reference.iter().find(|k| **k >= k_len) {
        return validation(format!("target basis {bad} is out of range for K = {k_len}"));
    }
    let fidelity = if reference.is_empty() {
        0.0
    } else {
        let amp = 1.0 / (reference.len() as f64).sqrt();
        let overlap: Complex64 = members
            .iter()
            .zip(&phi_star.amplitudes)
            .filter(|(k, _)| reference.contains(k))
            .map(|(_, a)| a * amp)
            .sum();
        overlap.norm_sqr().min(1.0)
    };

    Ok(RecoveryResult {
        phi_star,
        residual_mass: table.off_peak_mass(),
        prob_table: table.clone(),
        fidelity_vs_target: fidelity,
        recovered_labels: members.iter().map(|k| k + 1).collect(),
    })
}

/// Superposition, restricted transform and finalization in one call.
pub fn recover(partition: &BasisPartition, k1: usize, target: Option<&[usize]>) -> Result<RecoveryResult> {
    if partition.cluster_sizes.first().copied().unwrap_or(0) == 0 {
        return Err(Error::Numerical("target cluster is empty; nothing to recover".into()));
    }
    let state = build_superposition(partition, k1, None)?;
    let (out, table) = extract_target(&state, k1)?;
    finalize(&out, &table, partition, target)
}
