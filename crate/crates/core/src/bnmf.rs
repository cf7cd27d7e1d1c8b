//! Poisson-Exponential variational Bayesian NMF.
//!
//! Model: `X[m,t] ~ Poisson(sum_k u[m,k] w[k,t])` with exponential priors
//! `u[m,k] ~ Exp(alpha[m,k])`, `w[k,t] ~ Exp(beta[k,t])`. The posterior is
//! approximated by independent Gamma factors and a multinomial allocation
//! `eta[m,k,t]` of every count over the bases. The control (prior rate)
//! parameters are re-estimated after each variational sweep.

use log::{debug, warn};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{validation, Error, Result};
use crate::io::derive_seed;

/// Floor applied to denominators and log arguments.
pub const EPS: f64 = 1e-12;

fn default_max_iters() -> usize {
    500
}

fn default_tol() -> f64 {
    1e-6
}

fn default_restarts() -> usize {
    1
}

/// How the control (prior rate) parameters are re-estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlRule {
    /// Positive root of `a^2 + s a - s / E(u) = 0`.
    ClosedForm,
    /// Move from the current value toward the closed-form root, stopping at
    /// `1 / E(u)` if that lies in between. Never lowers the bound.
    #[default]
    Safeguarded,
    /// `a = 1 / E(u)`, the maximizer of the bound in `a`.
    Exact,
}

/// Starting point of the variational parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Perturbed row and column means.
    Means,
    /// k-means clustering of column directions.
    #[default]
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Relative bound change that counts as converged.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Independent initializations per order in [`select_order`]; the best bound wins.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub control: ControlRule,
    #[serde(default)]
    pub init: InitStrategy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tol: default_tol(),
            seed: 0,
            restarts: default_restarts(),
            control: ControlRule::default(),
            init: InitStrategy::default(),
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return validation("max_iters must be >= 1");
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return validation(format!("tol must be > 0, got {}", self.tol));
        }
        if self.restarts < 1 {
            return validation("restarts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub k: usize,
    /// Posterior means E(u), `M x K`.
    pub bases: Array2<f64>,
    /// Posterior means E(w), `K x T`.
    pub activations: Array2<f64>,
    /// E(log u).
    pub log_bases: Array2<f64>,
    /// E(log w).
    pub log_activations: Array2<f64>,
    /// Allocation `M x K x T`; simplex over the middle axis.
    pub eta: Array3<f64>,
    pub a_shape: Array2<f64>,
    pub a_scale: Array2<f64>,
    pub b_shape: Array2<f64>,
    pub b_scale: Array2<f64>,
    pub ctrl_alpha: Array2<f64>,
    pub ctrl_beta: Array2<f64>,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_data(x: &Array2<f64>) -> Result<()> {
    if let Some(((m, t), v)) = x.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return validation(format!("data entry ({m}, {t}) = {v} is not a finite nonnegative value"));
    }
    Ok(())
}

/// Positive root of `a^2 + s a - s / mean = 0`, evaluated without cancellation.
pub fn control_root(s: f64, mean: f64) -> f64 {
    let mean = mean.max(EPS);
    let c = s / mean;
    let denom = s + (s * s + 4.0 * c).sqrt();
    if denom <= 0.0 {
        return 0.0;
    }
    2.0 * c / denom
}

/// Entropy of a Gamma(shape, scale) density.
pub fn gamma_entropy(shape: f64, scale: f64) -> f64 {
    shape + scale.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape)
}

/// Principal branch of the Lambert W function for `z >= 0`.
pub fn lambert_w0(z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let mut w = if z < 1.0 { z } else { z.ln() - z.ln().ln().max(0.0) };
    for _ in 0..64 {
        let ew = w.exp();
        let f = w * ew - z;
        let step = f / (ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0));
        w -= step;
        if step.abs() <= 1e-15 * w.abs().max(1e-300) {
            break;
        }
    }
    w
}

impl FactorModel {
    pub fn m(&self) -> usize {
        self.bases.nrows()
    }

    pub fn t(&self) -> usize {
        self.activations.ncols()
    }

    /// Starting point: shapes 1, scales from perturbed row/column means,
    /// uniform allocation and unit controls.
    pub fn init(x: &Array2<f64>, k: usize, seed: u64) -> Result<Self> {
        if k < 1 {
            return validation("number of bases K must be >= 1");
        }
        check_data(x)?;
        let (m_len, t_len) = x.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row_mean = x.mean_axis(Axis(1)).unwrap_or_else(|| ndarray::Array1::zeros(m_len));
        let col_mean = x.mean_axis(Axis(0)).unwrap_or_else(|| ndarray::Array1::zeros(t_len));
        let floor = 1e-6;

        let mut a_scale = Array2::zeros((m_len, k));
        for ((m, _), v) in a_scale.indexed_iter_mut() {
            let base = (row_mean[m] / k as f64).max(floor).sqrt();
            *v = base * (0.5 + rng.random::<f64>());
        }
        let mut b_scale = Array2::zeros((k, t_len));
        for ((_, t), v) in b_scale.indexed_iter_mut() {
            let base = (col_mean[t] / k as f64).max(floor).sqrt();
            *v = base * (0.5 + rng.random::<f64>());
        }

        let mut model = Self {
            k,
            bases: Array2::zeros((m_len, k)),
            activations: Array2::zeros((k, t_len)),
            log_bases: Array2::zeros((m_len, k)),
            log_activations: Array2::zeros((k, t_len)),
            eta: Array3::from_elem((m_len, k, t_len), 1.0 / k as f64),
            a_shape: Array2::ones((m_len, k)),
            a_scale,
            b_shape: Array2::ones((k, t_len)),
            b_scale,
            ctrl_alpha: Array2::ones((m_len, k)),
            ctrl_beta: Array2::ones((k, t_len)),
            elbo_trace: Vec::new(),
            iterations: 0,
            converged: false,
        };
        model.refresh_bases();
        model.refresh_activations();
        Ok(model)
    }

    /// Like [`FactorModel::init`], but columns are first clustered by
    /// direction (k-means on the unit simplex). Basis `k` starts at centroid
    /// `k` and each column's activation mass goes to its own cluster.
    pub fn init_clustered(x: &Array2<f64>, k: usize, seed: u64) -> Result<Self> {
        let mut model = Self::init(x, k, seed)?;
        let (m_len, t_len) = x.dim();
        let col_sum = x.sum_axis(Axis(0));
        let total: f64 = col_sum.sum();
        if total <= 0.0 {
            return Ok(model);
        }
        let dirs: Vec<Vec<f64>> = (0..t_len)
            .map(|t| (0..m_len).map(|m| if col_sum[t] > 0.0 { x[[m, t]] / col_sum[t] } else { 0.0 }).collect())
            .collect();
        let active: Vec<usize> = (0..t_len).filter(|t| col_sum[*t] > 0.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC1));
        let (centroids, labels) = kmeans(&dirs, &active, &col_sum.to_vec(), k, &mut rng);

        let level = (total / active.len() as f64).sqrt();
        for (j, c) in centroids.iter().enumerate() {
            for (m, v) in c.iter().enumerate() {
                model.a_scale[[m, j]] = level * v.max(1e-3);
            }
        }
        model.refresh_bases();
        let u_sum = model.bases.sum_axis(Axis(0));
        for ((j, t), v) in model.b_scale.indexed_iter_mut() {
            let own = labels[t] == Some(j);
            let share = if own { 1.0 } else { 1e-2 / k as f64 };
            *v = (share * col_sum[t] / u_sum[j]).max(1e-6);
        }
        model.refresh_activations();
        Ok(model)
    }

    fn refresh_bases(&mut self) {
        for ((i, j), v) in self.bases.indexed_iter_mut() {
            let (a, b) = (self.a_shape[[i, j]], self.a_scale[[i, j]]);
            *v = a * b;
            self.log_bases[[i, j]] = digamma(a) + b.ln();
        }
    }

    fn refresh_activations(&mut self) {
        for ((i, j), v) in self.activations.indexed_iter_mut() {
            let (a, b) = (self.b_shape[[i, j]], self.b_scale[[i, j]]);
            *v = a * b;
            self.log_activations[[i, j]] = digamma(a) + b.ln();
        }
    }

    /// Recomputes the allocation as a log-space softmax over bases.
    pub fn update_eta(&mut self) -> Result<()> {
        let (m_len, k_len, t_len) = self.eta.dim();
        let mut logits = vec![0.0; k_len];
        for m in 0..m_len {
            for t in 0..t_len {
                let mut hi = f64::NEG_INFINITY;
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = self.log_bases[[m, k]] + self.log_activations[[k, t]];
                    if !l.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite log expectation at (m={m}, k={k}, t={t})"
                        )));
                    }
                    hi = hi.max(*l);
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - hi).exp();
                    z += *l;
                }
                for (k, l) in logits.iter().enumerate() {
                    self.eta[[m, k, t]] = l / z;
                }
            }
        }
        Ok(())
    }

    /// Expected counts summed over time (`M x K`) and over channels (`K x T`).
    fn count_sums(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (m_len, k_len, t_len) = self.eta.dim();
        let mut over_t = Array2::zeros((m_len, k_len));
        let mut over_m = Array2::zeros((k_len, t_len));
        for m in 0..m_len {
            for k in 0..k_len {
                for t in 0..t_len {
                    let kappa = x[[m, t]] * self.eta[[m, k, t]];
                    over_t[[m, k]] += kappa;
                    over_m[[k, t]] += kappa;
                }
            }
        }
        (over_t, over_m)
    }

    /// Gamma parameter updates for U then W, each followed by a refresh of
    /// the means it exposes.
    pub fn update_variational(&mut self, x: &Array2<f64>) -> Result<()> {
        self.check_shape(x)?;
        let (over_t, over_m) = self.count_sums(x);

        let w_sum = self.activations.sum_axis(Axis(1));
        for ((m, k), shape) in self.a_shape.indexed_iter_mut() {
            *shape = 1.0 + over_t[[m, k]];
            let mut denom = w_sum[k] + self.ctrl_alpha[[m, k]];
            if denom < EPS {
                warn!("basis scale denominator {denom:e} floored at (m={m}, k={k})");
                denom = EPS;
            }
            self.a_scale[[m, k]] = 1.0 / denom;
        }
        self.refresh_bases();

        let u_sum = self.bases.sum_axis(Axis(0));
        for ((k, t), shape) in self.b_shape.indexed_iter_mut() {
            *shape = 1.0 + over_m[[k, t]];
            let mut denom = u_sum[k] + self.ctrl_beta[[k, t]];
            if denom < EPS {
                warn!("activation scale denominator {denom:e} floored at (k={k}, t={t})");
                denom = EPS;
            }
            self.b_scale[[k, t]] = 1.0 / denom;
        }
        self.refresh_activations();
        Ok(())
    }

    /// Closed-form control estimates from the current Gamma means.
    pub fn update_control(&mut self) -> Result<()> {
        self.update_control_with(ControlRule::ClosedForm)
    }

    pub fn update_control_with(&mut self, rule: ControlRule) -> Result<()> {
        let estimate = |s: f64, mean: f64, old: f64| match rule {
            ControlRule::ClosedForm => control_root(s, mean),
            ControlRule::Safeguarded => {
                let target = control_root(s, mean);
                let best = 1.0 / mean.max(EPS);
                best.clamp(old.min(target), old.max(target))
            }
            ControlRule::Exact => 1.0 / mean.max(EPS),
        };
        let w_sum = self.activations.sum_axis(Axis(1));
        for ((m, k), a) in self.ctrl_alpha.indexed_iter_mut() {
            let v = estimate(w_sum[k], self.bases[[m, k]], *a);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("control alpha at (m={m}, k={k}) is {v}")));
            }
            *a = v.max(EPS);
        }
        let u_sum = self.bases.sum_axis(Axis(0));
        for ((k, t), b) in self.ctrl_beta.indexed_iter_mut() {
            let v = estimate(u_sum[k], self.activations[[k, t]], *b);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("control beta at (k={k}, t={t}) is {v}")));
            }
            *b = v.max(EPS);
        }
        Ok(())
    }

    fn check_shape(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.m(), self.t()) {
            return Err(Error::Dimension(format!(
                "data is {}x{}, model expects {}x{}",
                x.nrows(),
                x.ncols(),
                self.m(),
                self.t()
            )));
        }
        Ok(())
    }

    /// Variational lower bound on the log marginal likelihood.
    pub fn lower_bound(&self, x: &Array2<f64>) -> Result<f64> {
        self.check_shape(x)?;
        let (m_len, k_len, t_len) = self.eta.dim();
        let (over_t, over_m) = self.count_sums(x);
        let mut bound = 0.0;

        for m in 0..m_len {
            for t in 0..t_len {
                let xv = x[[m, t]];
                bound -= ln_gamma(xv + 1.0);
                for k in 0..k_len {
                    bound -= self.bases[[m, k]] * self.activations[[k, t]];
                    let kappa = xv * self.eta[[m, k, t]];
                    if kappa > 0.0 {
                        bound -= kappa * self.eta[[m, k, t]].ln();
                    }
                }
            }
        }

        for ((m, k), &alpha) in self.ctrl_alpha.indexed_iter() {
            let (shape, scale) = (self.a_shape[[m, k]], self.a_scale[[m, k]]);
            if alpha <= 0.0 || scale <= 0.0 {
                return Err(Error::Numerical(format!(
                    "log of nonpositive basis parameter at (m={m}, k={k})"
                )));
            }
            bound += self.log_bases[[m, k]] * over_t[[m, k]];
            bound += alpha.ln() - alpha * self.bases[[m, k]];
            bound += gamma_entropy(shape, scale);
        }
        for ((k, t), &beta) in self.ctrl_beta.indexed_iter() {
            let (shape, scale) = (self.b_shape[[k, t]], self.b_scale[[k, t]]);
            if beta <= 0.0 || scale <= 0.0 {
                return Err(Error::Numerical(format!(
                    "log of nonpositive activation parameter at (k={k}, t={t})"
                )));
            }
            bound += self.log_activations[[k, t]] * over_m[[k, t]];
            bound += beta.ln() - beta * self.activations[[k, t]];
            bound += gamma_entropy(shape, scale);
        }

        if !bound.is_finite() {
            return Err(Error::Numerical(format!("lower bound is {bound}")));
        }
        Ok(bound)
    }

    /// `U_B W` from the posterior means.
    pub fn reconstruction(&self) -> Array2<f64> {
        self.bases.dot(&self.activations)
    }

    /// Fixed point `u = E exp(-E u)` of the control estimate `E`, i.e. `W0(E^2)/E`.
    pub fn point_bases(&self) -> Array2<f64> {
        self.ctrl_alpha.mapv(|e| lambert_w0(e * e) / e)
    }

    /// Activation counterpart of [`FactorModel::point_bases`].
    pub fn point_activations(&self) -> Array2<f64> {
        self.ctrl_beta.mapv(|f| lambert_w0(f * f) / f)
    }

    fn step(&mut self, x: &Array2<f64>, rule: ControlRule) -> Result<f64> {
        self.update_eta()?;
        self.update_variational(x)?;
        self.update_control_with(rule)?;
        let bound = self.lower_bound(x)?;
        self.elbo_trace.push(bound);
        self.iterations += 1;
        Ok(bound)
    }
}

/// Runs eta -> variational -> control cycles until the relative bound change
/// drops below `opts.tol` or `opts.max_iters` is reached.
pub fn fit(x: &Array2<f64>, k: usize, opts: &FitOptions) -> Result<FactorModel> {
    opts.validate()?;
    let mut model = match opts.init {
        InitStrategy::Means => FactorModel::init(x, k, opts.seed)?,
        InitStrategy::Clustered => FactorModel::init_clustered(x, k, opts.seed)?,
    };
    if x.iter().all(|v| *v == 0.0) {
        model.step(x, opts.control)?;
        model.converged = true;
        return Ok(model);
    }
    let mut prev = f64::NAN;
    for _ in 0..opts.max_iters {
        let bound = model.step(x, opts.control)?;
        if prev.is_finite() && (bound - prev).abs() <= opts.tol * prev.abs().max(EPS) {
            model.converged = true;
            break;
        }
        prev = bound;
    }
    if !model.converged {
        debug!("fit with K={k} stopped at max_iters={} without converging", opts.max_iters);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub k_star: usize,
    pub model: FactorModel,
    /// `(K, final bound)` for every order tried.
    pub table: Vec<(usize, f64)>,
}

/// Fits every order in `k_min..=k_max` (in parallel) and keeps the one with
/// the largest final bound; ties go to the smaller order.
pub fn select_order(
    x: &Array2<f64>,
    k_min: usize,
    k_max: usize,
    opts: &FitOptions,
) -> Result<OrderSelection> {
    if k_min < 1 || k_min > k_max {
        return validation(format!("order range {k_min}..={k_max} is empty or starts below 1"));
    }
    opts.validate()?;
    let fits: Vec<Result<FactorModel>> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| {
            let mut best: Option<FactorModel> = None;
            for r in 0..opts.restarts {
                let o = FitOptions {
                    seed: derive_seed(derive_seed(opts.seed, k as u64), r as u64),
                    ..opts.clone()
                };
                let model = fit(x, k, &o)?;
                let better = match &best {
                    None => true,
                    Some(b) => final_bound(&model) > final_bound(b),
                };
                if better {
                    best = Some(model);
                }
            }
            Ok(best.expect("restarts >= 1"))
        })
        .collect();

    let mut table = Vec::new();
    let mut chosen: Option<FactorModel> = None;
    for f in fits {
        let model = f?;
        let b = final_bound(&model);
        table.push((model.k, b));
        let take = match &chosen {
            None => true,
            Some(c) => b > final_bound(c),
        };
        if take {
            chosen = Some(model);
        }
    }
    let model = chosen.expect("non-empty range");
    Ok(OrderSelection {
        k_star: model.k,
        model,
        table,
    })
}

fn final_bound(model: &FactorModel) -> f64 {
    model.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Weighted k-means (k-means++ seeding, Lloyd steps) over the points listed
/// in `active`. Returns centroids and per-point labels (`None` if inactive).
fn kmeans(
    points: &[Vec<f64>],
    active: &[usize],
    weight: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
    let dim = points.first().map_or(0, |p| p.len());
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[active[rng.random_range(0..active.len())]].clone());
    while centroids.len() < k {
        let d: Vec<f64> = active
            .iter()
            .map(|&t| centroids.iter().map(|c| dist(&points[t], c)).fold(f64::INFINITY, f64::min) * weight[t])
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = active.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            points[active[idx]].clone()
        } else {
            // Fewer distinct directions than clusters: jitter a copy.
            let mut c = points[active[rng.random_range(0..active.len())]].clone();
            for v in c.iter_mut() {
                *v *= 0.5 + rng.random::<f64>();
            }
            c
        };
        centroids.push(next);
    }

    let mut labels = vec![None; points.len()];
    for _ in 0..50 {
        let mut changed = false;
        for &t in active {
            let best = (0..k)
                .min_by(|a, b| dist(&points[t], &centroids[*a]).total_cmp(&dist(&points[t], &centroids[*b])))
                .expect("k >= 1");
            if labels[t] != Some(best) {
                labels[t] = Some(best);
                changed = true;
            }
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut acc = vec![0.0; dim];
            let mut w = 0.0;
            for &t in active.iter().filter(|t| labels[**t] == Some(j)) {
                for (a, p) in acc.iter_mut().zip(&points[t]) {
                    *a += weight[t] * p;
                }
                w += weight[t];
            }
            if w > 0.0 {
                *c = acc.into_iter().map(|a| a / w).collect();
            }
        }
        if !changed {
            break;
        }
    }
    (centroids, labels)
}

/// Relative entropy between `x` and `y` after normalizing each to unit mass.
pub fn relative_entropy(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let sx: f64 = x.sum();
    let sy: f64 = y.sum();
    x.iter()
        .zip(y.iter())
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| {
            let p = a / sx;
            let q = (b / sy).max(EPS);
            p * (p / q).ln()
        })
        .sum()
}

/// Generalized KL divergence `sum x ln(x/y) - x + y`.
pub fn generalized_kl(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| {
            let b = b.max(EPS);
            if *a > 0.0 {
                a * (a / b).ln() - a + b
            } else {
                b
            }
        })
        .sum()
}
