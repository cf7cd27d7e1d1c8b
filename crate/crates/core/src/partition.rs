//! Basis partitioning: CQT of the learned bases, a three-factor nonnegative
//! decomposition `S ~ <<R E> H>` and the per-basis cluster assignment.
//!
//! Tensor shapes: `R` is `A x D x B`, `E` is `A x K`, `H` is `D x K x T`, and
//! the contraction is
//!
//! ```text
//! S~[b, t] = sum_a sum_d sum_k R[a, d, b] E[a, k] H[d, k, t]
//! ```
//!
//! The partition fit uses `A = B = M` and a singleton `D = 1`.

use std::fmt::Write as _;

use log::warn;
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnmf::{FactorModel, FitOptions, EPS};
use crate::error::{validation, Error, Result};
use crate::transforms::{cqt, SpectralState, StateLabel, WindowSpec};

/// CQT-transformed bases and the partition input built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedBases {
    /// `C_B`, `M x K`; row `m` is the CQT of row `m` of the bases.
    pub c_b: Array2<Complex64>,
    /// `C_B W`, `M x T`.
    pub product: Array2<Complex64>,
    /// `|C_B| W`, the nonnegative partition input.
    pub s: Array2<f64>,
    pub window: WindowSpec,
    pub freq: usize,
}

/// Transforms the posterior-mean bases of a fitted model.
pub fn transform_bases(model: &FactorModel, window: &WindowSpec, freq: usize) -> Result<TransformedBases> {
    if model.iterations == 0 {
        return Err(Error::State("factor model has not been fitted".into()));
    }
    let (m_len, k_len) = model.bases.dim();
    let mut c_b = Array2::zeros((m_len, k_len));
    for (m, row) in model.bases.rows().into_iter().enumerate() {
        let state = SpectralState::from_real(&row.to_vec());
        let out = cqt(&state, window, freq)?;
        for (k, a) in out.amplitudes.into_iter().enumerate() {
            c_b[[m, k]] = a;
        }
    }
    let w = model.activations.mapv(|v| Complex64::new(v, 0.0));
    let product = c_b.dot(&w);
    let s = c_b.mapv(|c| c.norm()).dot(&model.activations);
    Ok(TransformedBases {
        c_b,
        product,
        s,
        window: *window,
        freq,
    })
}

impl TransformedBases {
    /// Tensors that reproduce `s` exactly: `R` the identity, `E = |C_B|`, `H = W`.
    pub fn warm_start(&self, activations: &Array2<f64>) -> Result<PartitionTensors> {
        let (m_len, k_len) = self.c_b.dim();
        if activations.nrows() != k_len {
            return Err(Error::Dimension(format!(
                "axis K: C_B has {k_len} bases but W has {} rows",
                activations.nrows()
            )));
        }
        let r = Array3::from_shape_fn((m_len, 1, m_len), |(a, _, b)| if a == b { 1.0 } else { 0.0 });
        let e = self.c_b.mapv(|c| c.norm());
        let h = activations.clone().insert_axis(Axis(0));
        Ok(PartitionTensors { r, e, h })
    }

    /// Row `m` of `C_B` as a state over the `K` bases.
    pub fn row_state(&self, m: usize) -> SpectralState {
        SpectralState::new(self.c_b.row(m).to_vec(), StateLabel::Cqt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTensors {
    pub r: Array3<f64>,
    pub e: Array2<f64>,
    pub h: Array3<f64>,
}

impl PartitionTensors {
    /// Checks the shared axes and returns `(A, D, B, K, T)`.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        let (a, d, b) = self.r.dim();
        let (ea, k) = self.e.dim();
        let (hd, hk, t) = self.h.dim();
        if ea != a {
            return Err(Error::Dimension(format!(
                "axis A: R has {a} along axis 0 but E has {ea} along axis 0"
            )));
        }
        if hd != d {
            return Err(Error::Dimension(format!(
                "axis D: R has {d} along axis 1 but H has {hd} along axis 0"
            )));
        }
        if hk != k {
            return Err(Error::Dimension(format!(
                "axis K: E has {k} along axis 1 but H has {hk} along axis 1"
            )));
        }
        Ok((a, d, b, k, t))
    }

    fn check_finite_nonneg(&self) -> Result<()> {
        let bad = self
            .r
            .iter()
            .chain(self.e.iter())
            .chain(self.h.iter())
            .any(|v| !(v.is_finite() && *v >= 0.0));
        if bad {
            return validation("partition tensors must be finite and nonnegative");
        }
        Ok(())
    }

    /// `R` with the singleton axis dropped, `A x B`.
    fn r_matrix(&self) -> Array2<f64> {
        self.r.index_axis(Axis(1), 0).to_owned()
    }

    fn h_matrix(&self) -> Array2<f64> {
        self.h.index_axis(Axis(0), 0).to_owned()
    }
}

/// Full contraction `<<R E> H>`, `B x T`.
pub fn contract(t: &PartitionTensors) -> Result<Array2<f64>> {
    let (_, d, b, _, t_len) = t.dims()?;
    let mut out = Array2::zeros((b, t_len));
    for di in 0..d {
        let r = t.r.index_axis(Axis(1), di);
        let h = t.h.index_axis(Axis(0), di);
        out += &r.t().dot(&t.e).dot(&h);
    }
    Ok(out)
}

/// Per-source, per-basis scores `Q[b, k] = sum_t sum_a sum_d R[a,d,b] E[a,k] H[d,k,t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_source: Array2<f64>,
    pub total: Vec<f64>,
}

impl Scores {
    /// CSV with header `k,q1,q2,...,q_total`; `k` counts from 1.
    pub fn to_csv(&self) -> String {
        let (b, k_len) = self.per_source.dim();
        let mut out = String::from("k");
        for m in 1..=b {
            let _ = write!(out, ",q{m}");
        }
        out.push_str(",q_total\n");
        for k in 0..k_len {
            let _ = write!(out, "{}", k + 1);
            for m in 0..b {
                let _ = write!(out, ",{}", self.per_source[[m, k]]);
            }
            let _ = writeln!(out, ",{}", self.total[k]);
        }
        out
    }
}

pub fn score(t: &PartitionTensors) -> Result<Scores> {
    let (_, d, b, k_len, _) = t.dims()?;
    let mut per_source = Array2::zeros((b, k_len));
    for di in 0..d {
        let r = t.r.index_axis(Axis(1), di);
        let h_sum = t.h.index_axis(Axis(0), di).sum_axis(Axis(1));
        let re = r.t().dot(&t.e);
        for ((m, k), v) in per_source.indexed_iter_mut() {
            *v += re[[m, k]] * h_sum[k];
        }
    }
    let total = per_source.sum_axis(Axis(0)).to_vec();
    Ok(Scores { per_source, total })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisPartition {
    /// Cluster of each basis, counting from 1.
    pub assignment: Vec<usize>,
    /// Number of bases per cluster.
    pub cluster_sizes: Vec<usize>,
    /// Bases whose scores were all zero (assigned to cluster 1).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<usize>,
}

impl BasisPartition {
    /// Builds a partition from 1-based labels over `clusters` clusters.
    pub fn from_assignment(assignment: Vec<usize>, clusters: usize) -> Result<Self> {
        let mut cluster_sizes = vec![0; clusters];
        for (k, a) in assignment.iter().enumerate() {
            if *a < 1 || *a > clusters {
                return validation(format!("basis {} assigned to cluster {a} outside 1..={clusters}", k + 1));
            }
            cluster_sizes[a - 1] += 1;
        }
        Ok(Self {
            assignment,
            cluster_sizes,
            degenerate: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.assignment.len()
    }

    /// 0-based indices of the bases in cluster `m` (1-based).
    pub fn members(&self, m: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == m)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Argmax over sources for every basis; ties go to the smaller source index.
pub fn assign_scores(per_source: &Array2<f64>) -> BasisPartition {
    let (b, k_len) = per_source.dim();
    let mut assignment = Vec::with_capacity(k_len);
    let mut degenerate = Vec::new();
    for k in 0..k_len {
        let col = per_source.column(k);
        if col.iter().all(|v| *v == 0.0) {
            warn!("basis {} has all-zero scores; assigned to cluster 1", k + 1);
            degenerate.push(k + 1);
            assignment.push(1);
            continue;
        }
        let mut best = 0;
        for m in 1..b {
            if col[m] > col[best] {
                best = m;
            }
        }
        assignment.push(best + 1);
    }
    let mut part = BasisPartition::from_assignment(assignment, b.max(1)).expect("labels in range");
    part.degenerate = degenerate;
    part
}

pub fn assign(t: &PartitionTensors) -> Result<BasisPartition> {
    Ok(assign_scores(&score(t)?.per_source))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFit {
    pub tensors: PartitionTensors,
    /// Generalized KL cost after each sweep.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Generalized KL divergence `D(S || S~)`.
pub fn kl_cost(s: &Array2<f64>, approx: &Array2<f64>) -> f64 {
    s.iter()
        .zip(approx.iter())
        .map(|(x, y)| {
            let y = y.max(EPS);
            if *x > 0.0 {
                x * (x / y).ln() - x + y
            } else {
                y
            }
        })
        .sum()
}

fn ratio(s: &Array2<f64>, approx: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    out.zip_mut_with(approx, |x, y| {
        *x = if *x > 0.0 { *x / y.max(EPS) } else { 0.0 };
    });
    out
}

fn check_input(s: &Array2<f64>) -> Result<()> {
    if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return validation("partition input must be finite and nonnegative");
    }
    Ok(())
}

/// Multiplicative KL updates from a seeded random start.
pub fn fit_partition(s: &Array2<f64>, k: usize, opts: &FitOptions) -> Result<PartitionFit> {
    let (m_len, t_len) = s.dim();
    if k < m_len {
        return validation(format!("partition needs K >= M, got K = {k} and M = {m_len}"));
    }
    check_input(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mean = (s.sum() / (m_len * t_len).max(1) as f64).max(EPS);
    let scale = (mean / k as f64).cbrt();
    let mut draw = || scale * (0.5 + rng.random::<f64>());
    let r = Array3::from_shape_simple_fn((m_len, 1, m_len), &mut draw);
    let e = Array2::from_shape_simple_fn((m_len, k), &mut draw);
    let h = Array3::from_shape_simple_fn((1, k, t_len), &mut draw);
    fit_partition_warm(s, PartitionTensors { r, e, h }, opts)
}

/// Multiplicative KL updates on `H`, `E`, `R` in turn, from `init`.
pub fn fit_partition_warm(s: &Array2<f64>, init: PartitionTensors, opts: &FitOptions) -> Result<PartitionFit> {
    opts.validate()?;
    check_input(s)?;
    let (_, d, b, _, t_len) = init.dims()?;
    if d != 1 {
        return Err(Error::Dimension(format!("axis D: partition fit needs a singleton, got {d}")));
    }
    if (b, t_len) != s.dim() {
        return Err(Error::Dimension(format!(
            "contraction is {b}x{t_len} but the input is {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    init.check_finite_nonneg()?;

    let mut rm = init.r_matrix();
    let mut h = init.h_matrix();
    let mut e = init.e;
    let ones = Array2::<f64>::ones((b, t_len));
    let floor_div = |num: f64, den: f64| if den > EPS { num / den } else { 0.0 };

    let mut cost_trace = Vec::new();
    let mut converged = false;
    let mut prev = kl_cost(s, &rm.t().dot(&e).dot(&h));
    for _ in 0..opts.max_iters {
        // H
        let bm = rm.t().dot(&e);
        let q = ratio(s, &bm.dot(&h));
        let num = bm.t().dot(&q);
        let den = bm.t().dot(&ones);
        for ((k, t), v) in h.indexed_iter_mut() {
            *v *= floor_div(num[[k, t]], den[[k, t]]);
        }
        // E
        let q = ratio(s, &rm.t().dot(&e).dot(&h));
        let num = rm.dot(&q).dot(&h.t());
        let den = rm.dot(&ones).dot(&h.t());
        for ((i, k), v) in e.indexed_iter_mut() {
            *v *= floor_div(num[[i, k]], den[[i, k]]);
        }
        // R
        let g = e.dot(&h);
        let q = ratio(s, &rm.t().dot(&g));
        let num = g.dot(&q.t());
        let den = g.dot(&ones.t());
        for ((i, j), v) in rm.indexed_iter_mut() {
            *v *= floor_div(num[[i, j]], den[[i, j]]);
        }

        let cost = kl_cost(s, &rm.t().dot(&e).dot(&h));
        if !cost.is_finite() {
            return Err(Error::Numerical(format!("partition cost became {cost}")));
        }
        cost_trace.push(cost);
        let done = (prev - cost).abs() <= opts.tol * prev.abs().max(EPS) || cost <= EPS;
        prev = cost;
        if done {
            converged = true;
            break;
        }
    }

    let r = rm.insert_axis(Axis(1));
    let h = h.insert_axis(Axis(0));
    Ok(PartitionFit {
        tensors: PartitionTensors { r, e, h },
        iterations: cost_trace.len(),
        cost_trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnmf::fit;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_tensors(seed: u64, a: usize, b: usize, k: usize, t: usize) -> PartitionTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PartitionTensors {
            r: Array3::from_shape_simple_fn((a, 1, b), || rng.random::<f64>()),
            e: Array2::from_shape_simple_fn((a, k), || rng.random::<f64>()),
            h: Array3::from_shape_simple_fn((1, k, t), || rng.random::<f64>()),
        }
    }

    fn naive_contract(t: &PartitionTensors) -> Array2<f64> {
        let (a, d, b) = t.r.dim();
        let (_, k, tl) = t.h.dim();
        let mut out = Array2::zeros((b, tl));
        for j in 0..b {
            for tt in 0..tl {
                let mut acc = 0.0;
                for i in 0..a {
                    for r in 0..d {
                        for kk in 0..k {
                            acc += t.r[[i, r, j]] * t.e[[i, kk]] * t.h[[r, kk, tt]];
                        }
                    }
                }
                out[[j, tt]] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_r_collapses() {
        let mut r = Array3::zeros((2, 1, 2));
        r[[0, 0, 0]] = 1.0;
        r[[1, 0, 1]] = 1.0;
        let e = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let t = PartitionTensors {
            r,
            e,
            h: Array3::ones((1, 3, 4)),
        };
        let s = contract(&t).unwrap();
        assert!(s.row(0).iter().all(|v| *v == 6.0));
        assert!(s.row(1).iter().all(|v| *v == 15.0));
    }

    #[test]
    fn zero_tensors_contract_to_zero() {
        let t = PartitionTensors {
            r: Array3::zeros((2, 1, 2)),
            e: Array2::zeros((2, 3)),
            h: Array3::zeros((1, 3, 5)),
        };
        assert!(contract(&t).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn contract_matches_naive() {
        let t = random_tensors(4, 2, 2, 3, 4);
        let fast = contract(&t).unwrap();
        let slow = naive_contract(&t);
        for (x, y) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn mismatched_axes_are_named() {
        let mut t = random_tensors(1, 2, 2, 3, 4);
        t.e = Array2::zeros((3, 3));
        assert!(contract(&t).unwrap_err().to_string().contains("axis A"));
        let mut t = random_tensors(1, 2, 2, 3, 4);
        t.h = Array3::zeros((1, 2, 4));
        assert!(contract(&t).unwrap_err().to_string().contains("axis K"));
        let mut t = random_tensors(1, 2, 2, 3, 4);
        t.h = Array3::zeros((2, 3, 4));
        assert!(contract(&t).unwrap_err().to_string().contains("axis D"));
    }

    #[test]
    fn score_matches_per_basis_loop() {
        let t = random_tensors(9, 2, 2, 3, 6);
        let q = score(&t).unwrap();
        for k in 0..3 {
            let mut single = t.clone();
            for kk in 0..3 {
                if kk != k {
                    single.h.slice_mut(ndarray::s![.., kk, ..]).fill(0.0);
                }
            }
            let part = naive_contract(&single);
            for m in 0..2 {
                assert_abs_diff_eq!(q.per_source[[m, k]], part.row(m).sum(), epsilon = 1e-12);
            }
            assert_abs_diff_eq!(q.total[k], part.sum(), epsilon = 1e-12);
        }
    }

    #[test]
    fn score_edge_cases() {
        let mut t = random_tensors(2, 2, 2, 3, 5);
        t.h.slice_mut(ndarray::s![.., 1, ..]).fill(0.0);
        assert_eq!(score(&t).unwrap().total[1], 0.0);
        let t = random_tensors(3, 2, 2, 1, 5);
        assert_abs_diff_eq!(score(&t).unwrap().total[0], contract(&t).unwrap().sum(), epsilon = 1e-12);
    }

    #[test]
    fn assignment_rules() {
        let p = assign_scores(&array![[3.0, 1.0], [1.0, 3.0]]);
        assert_eq!(p.assignment, vec![1, 2]);
        assert_eq!(p.cluster_sizes, vec![1, 1]);
        let p = assign_scores(&array![[2.0, 2.0], [2.0, 2.0]]);
        assert_eq!(p.assignment, vec![1, 1]);
        let p = assign_scores(&array![[0.0, 1.0], [0.0, 2.0]]);
        assert_eq!(p.assignment, vec![1, 2]);
        assert_eq!(p.degenerate, vec![1]);
    }

    #[test]
    fn scores_csv_layout() {
        let q = Scores {
            per_source: array![[1.0, 0.5], [2.0, 0.0]],
            total: vec![3.0, 0.5],
        };
        assert_eq!(q.to_csv(), "k,q1,q2,q_total\n1,1,2,3\n2,0.5,0,0.5\n");
    }

    #[test]
    fn partition_json_layout() {
        let p = BasisPartition::from_assignment(vec![1, 2, 1], 2).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"assignment":[1,2,1],"cluster_sizes":[2,1]}"#);
    }

    #[test]
    fn fit_recovers_planted_contraction() {
        let planted = random_tensors(11, 2, 2, 3, 12);
        let s = contract(&planted).unwrap();
        let opts = FitOptions {
            max_iters: 5000,
            tol: 1e-12,
            ..Default::default()
        };
        let f = fit_partition(&s, 3, &opts).unwrap();
        assert!(*f.cost_trace.last().unwrap() < 1e-6);
    }

    #[test]
    fn fit_cost_is_monotone_and_deterministic() {
        let planted = random_tensors(5, 2, 2, 4, 20);
        let mut s = contract(&planted).unwrap();
        s.mapv_inplace(|v| v * (1.0 + 0.1 * v.sin()));
        let opts = FitOptions::default();
        let a = fit_partition(&s, 4, &opts).unwrap();
        for w in a.cost_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8 * w[0].abs());
        }
        assert_eq!(a, fit_partition(&s, 4, &opts).unwrap());
    }

    #[test]
    fn zero_row_kills_r_slice() {
        let planted = random_tensors(6, 2, 2, 3, 10);
        let mut s = contract(&planted).unwrap();
        s.row_mut(1).fill(0.0);
        let f = fit_partition(&s, 3, &FitOptions::default()).unwrap();
        let slice_norm: f64 = f.tensors.r.slice(ndarray::s![.., 0, 1]).iter().map(|v| v * v).sum();
        assert!(slice_norm.sqrt() < 1e-6);
    }

    #[test]
    fn fit_rejects_small_k() {
        let s = Array2::ones((2, 4));
        assert!(fit_partition(&s, 1, &FitOptions::default()).is_err());
    }

    fn fitted_model() -> FactorModel {
        let x = array![[10.0, 0.0, 12.0, 3.0], [0.0, 8.0, 1.0, 9.0]];
        fit(&x, 2, &FitOptions::default()).unwrap()
    }

    #[test]
    fn unfitted_model_is_state_error() {
        let x = Array2::ones((2, 3));
        let model = FactorModel::init(&x, 2, 0).unwrap();
        let err = transform_bases(&model, &WindowSpec::unit(2), 0).unwrap_err();
        assert_eq!(err.kind(), "state");
    }

    #[test]
    fn unit_window_zero_freq_scales_bases() {
        let model = fitted_model();
        let tb = transform_bases(&model, &WindowSpec::unit(2), 0).unwrap();
        for ((m, k), c) in tb.c_b.indexed_iter() {
            assert_abs_diff_eq!(c.re, model.bases[[m, k]] / 2f64.sqrt(), epsilon = 1e-15);
            assert_eq!(c.im, 0.0);
        }
    }

    #[test]
    fn zero_bases_give_zero_transform() {
        let mut model = fitted_model();
        model.bases.fill(0.0);
        let tb = transform_bases(&model, &WindowSpec::unit(2), 1).unwrap();
        assert!(tb.c_b.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn product_matches_explicit_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_simple_fn((2, 7), || (rng.random::<f64>() * 50.0).floor());
        let model = fit(&x, 4, &FitOptions::default()).unwrap();
        let window = WindowSpec::hann(4, -1);
        let freq = 3;
        let tb = transform_bases(&model, &window, freq).unwrap();
        // C_B = U_B D with D diagonal, then (U_B D) W by explicit loops.
        let diag: Vec<Complex64> = (0..4)
            .map(|j| {
                let f = window.value(j as i64 + 1).unwrap();
                Complex64::from_polar(f / 2.0, 2.0 * std::f64::consts::PI * (j * freq) as f64 / 4.0)
            })
            .collect();
        for m in 0..2 {
            for t in 0..7 {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, d) in diag.iter().enumerate() {
                    acc += model.bases[[m, k]] * d * model.activations[[k, t]];
                }
                assert_abs_diff_eq!((tb.product[[m, t]] - acc).norm(), 0.0, epsilon = 1e-9 * acc.norm().max(1.0));
            }
        }
    }
}
