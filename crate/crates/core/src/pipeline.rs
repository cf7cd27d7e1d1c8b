//! Stage functions and the end-to-end chain: simulate, factorize, transform
//! and partition, recover, verify.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bnmf::{select_order, FactorModel, FitOptions, OrderSelection};
use crate::error::{validation, Error, Result};
use crate::io::derive_seed;
use crate::partition::{assign, fit_partition_warm, score, BasisPartition, PartitionFit, Scores, TransformedBases};
use crate::recovery::{regroup, ClusteredBases, RecoveryResult};
use crate::register::{generate_input, observe, GroundTruth, ObservationMatrix, RegisterConfig};
use crate::snr::{energy, snr_report, EnergySpec, SnrReport};
use crate::transforms::{SpectralState, WindowSpec};

const REGISTER_TAG: u64 = 1;
const FIT_TAG: u64 = 2;

fn default_true() -> bool {
    true
}

fn default_k_range() -> [usize; 2] {
    [1, 4]
}

fn default_k1() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    #[serde(default = "default_true")]
    pub unit_window: bool,
    /// Window shift; defaults to the basis count for the unit window and
    /// to -1 for Hann (a Hann window at shift `K` would vanish on every basis).
    #[serde(default)]
    pub shift: Option<i64>,
    #[serde(default)]
    pub freq: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            unit_window: true,
            shift: None,
            freq: 0,
        }
    }
}

impl WindowConfig {
    pub fn spec(&self, k: usize) -> WindowSpec {
        if self.unit_window {
            WindowSpec {
                shift: self.shift.unwrap_or(k as i64),
                ..WindowSpec::unit(k)
            }
        } else {
            WindowSpec::hann(k, self.shift.unwrap_or(-1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub register: RegisterConfig,
    /// Fixed order; overrides `k_range` when set.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_k_range")]
    pub k_range: [usize; 2],
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub window: WindowConfig,
    /// Peak parameter of the restricted transform; must divide the chosen order.
    #[serde(default = "default_k1")]
    pub k1: usize,
    #[serde(default)]
    pub energy: EnergySpec,
    /// Master seed; register and fit seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            register: RegisterConfig::default(),
            k: None,
            k_range: default_k_range(),
            fit: FitOptions::default(),
            window: WindowConfig::default(),
            k1: default_k1(),
            energy: EnergySpec::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn order_range(&self) -> (usize, usize) {
        match self.k {
            Some(k) => (k, k),
            None => (self.k_range[0], self.k_range[1]),
        }
    }

    /// Register config with the derived seed.
    pub fn register_config(&self) -> RegisterConfig {
        RegisterConfig {
            seed: derive_seed(self.seed, REGISTER_TAG),
            ..self.register.clone()
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            seed: derive_seed(self.seed, FIT_TAG),
            ..self.fit.clone()
        }
    }

    /// Every violated bound, without running anything.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.register.validate() {
            out.push(format!("register: {e}"));
        }
        if let Err(e) = self.fit.validate() {
            out.push(format!("fit: {e}"));
        }
        match self.k {
            Some(0) => out.push("k must be >= 1".into()),
            Some(_) => {}
            None => {
                let [lo, hi] = self.k_range;
                if lo < 1 {
                    out.push("k_range lower end must be >= 1".into());
                }
                if lo > hi {
                    out.push(format!("k_range [{lo}, {hi}] is empty"));
                }
            }
        }
        if self.k1 < 1 {
            out.push("k1 must be >= 1".into());
        }
        if !self.window.unit_window && self.order_range().0 < 2 {
            out.push("a Hann window needs k >= 2".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(diags.join("; ")))
        }
    }
}

pub fn simulate(cfg: &RegisterConfig) -> Result<(GroundTruth, ObservationMatrix)> {
    let gt = generate_input(cfg)?;
    let obs = observe(&gt, cfg)?;
    Ok((gt, obs))
}

pub fn fit_stage(obs: &ObservationMatrix, range: (usize, usize), opts: &FitOptions) -> Result<OrderSelection> {
    select_order(&obs.values, range.0, range.1, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionOutput {
    pub transformed: TransformedBases,
    pub fit: PartitionFit,
    pub scores: Scores,
    pub partition: BasisPartition,
}

/// CQT of the bases and the partition fit, warm-started at the exact
/// factorization of `|C_B| W`.
pub fn partition_stage(model: &FactorModel, window: &WindowConfig, opts: &FitOptions) -> Result<PartitionOutput> {
    let transformed = crate::partition::transform_bases(model, &window.spec(model.k), window.freq)?;
    let init = transformed.warm_start(&model.activations)?;
    let fit = fit_partition_warm(&transformed.s, init, opts)?;
    let scores = score(&fit.tensors)?;
    let partition = assign(&fit.tensors)?;
    Ok(PartitionOutput {
        transformed,
        fit,
        scores,
        partition,
    })
}

/// 0-based bases whose contribution falls mostly on the planted target.
pub fn planted_target(gt: &GroundTruth, model: &FactorModel) -> Vec<usize> {
    let rows = &gt.source_rows;
    let t_len = rows.ncols().min(model.activations.ncols());
    let weight: Vec<Option<f64>> = (0..t_len)
        .map(|t| {
            let total = rows[[0, t]] + rows[[1, t]];
            (total > 0.0).then(|| rows[[0, t]] / total)
        })
        .collect();
    (0..model.k)
        .filter(|&k| {
            let u: f64 = model.bases.column(k).sum();
            let (mut hit, mut all) = (0.0, 0.0);
            for (t, w) in weight.iter().enumerate() {
                if let Some(w) = w {
                    let c = u * model.activations[[k, t]];
                    hit += c * w;
                    all += c;
                }
            }
            all > 0.0 && hit > 0.5 * all
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverOutput {
    pub clustered: ClusteredBases,
    /// 0-based planted target bases used as the fidelity reference.
    pub target: Vec<usize>,
    pub recovery: RecoveryResult,
}

pub fn recover_stage(
    gt: &GroundTruth,
    model: &FactorModel,
    transformed: &TransformedBases,
    partition: &BasisPartition,
    k1: usize,
) -> Result<RecoverOutput> {
    let clustered = regroup(transformed, partition, &model.activations)?;
    let target = planted_target(gt, model);
    let recovery = crate::recovery::recover(partition, k1, Some(&target))?;
    Ok(RecoverOutput {
        clustered,
        target,
        recovery,
    })
}

/// Output profile over `t`: the target-cluster bases weighted by the
/// recovered state, `|sum_m sum_i K1 |phi_i|^2 theta[m, k_i] w[k_i, t]|`.
pub fn readout_profile(clustered: &ClusteredBases, activations: &Array2<f64>, recovery: &RecoveryResult) -> Array1<f64> {
    let members = &clustered.groups[0];
    let k1_len = members.len() as f64;
    let t_len = activations.ncols();
    let mut acc = vec![Complex64::new(0.0, 0.0); t_len];
    for (i, &k) in members.iter().enumerate() {
        let g = k1_len * recovery.phi_star.amplitudes[i].norm_sqr();
        let col: Complex64 = clustered.theta.column(k).sum();
        for (t, a) in acc.iter_mut().enumerate() {
            *a += g * col * activations[[k, t]];
        }
    }
    acc.into_iter().map(|a| a.norm()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub readout: Array1<f64>,
    pub report: SnrReport,
}

/// Energies of the input, the register output and the readout.
pub fn verify_stage(
    gt: &GroundTruth,
    obs: &ObservationMatrix,
    model: &FactorModel,
    rec: &RecoverOutput,
    spec: &EnergySpec,
) -> Result<VerifyOutput> {
    let readout = readout_profile(&rec.clustered, &model.activations, &rec.recovery);
    let input = SpectralState::from_profile(&gt.source_rows.row(0).to_vec());
    let register = SpectralState::from_profile(&obs.aggregate.to_vec());
    let output = SpectralState::from_profile(&readout.to_vec());
    if output.norm_sqr() == 0.0 {
        return Err(Error::Numerical("readout is identically zero".into()));
    }
    let report = snr_report(energy(&input, spec)?, energy(&register, spec)?, energy(&output, spec)?)?;
    Ok(VerifyOutput { readout, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub ground_truth: GroundTruth,
    pub observation: ObservationMatrix,
    pub selection: OrderSelection,
    pub partition: PartitionOutput,
    pub recover: RecoverOutput,
    pub verify: VerifyOutput,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let opts = cfg.fit_options();
    let (ground_truth, observation) = simulate(&cfg.register_config())?;
    let selection = fit_stage(&observation, cfg.order_range(), &opts)?;
    let model = &selection.model;
    if !model.k.is_multiple_of(cfg.k1) {
        return validation(format!("k1 = {} does not divide the selected order {}", cfg.k1, model.k));
    }
    let partition = partition_stage(model, &cfg.window, &opts)?;
    let recover = recover_stage(&ground_truth, model, &partition.transformed, &partition.partition, cfg.k1)?;
    let verify = verify_stage(&ground_truth, &observation, model, &recover, &cfg.energy)?;
    Ok(PipelineOutput {
        ground_truth,
        observation,
        selection,
        partition,
        recover,
        verify,
    })
}
