use hre_core::bnmf::{fit, FactorModel, FitOptions};
use hre_core::partition::{
    assign_scores, contract, fit_partition, score, BasisPartition, PartitionTensors,
};
use hre_core::recovery::recover;
use hre_core::register::{generate_input, observe, RegisterConfig};
use hre_core::snr::{delta_from_snr_db, energy, snr_db_from_delta, snr_report, EnergySpec};
use hre_core::transforms::{cqt, dft, hann_window, icqt, idstft_unit, SpectralState, StateLabel, WindowSpec};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;

/// Digamma by upward recurrence and the asymptotic series.
fn digamma_oracle(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let series = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    acc + x.ln() - 0.5 / x - series
}

fn matrix(m: usize, t: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..100.0, m * t).prop_map(move |v| Array2::from_shape_vec((m, t), v).unwrap())
}

fn complex_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), len)
        .prop_map(|v| v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect())
}

fn register_cfg() -> impl Strategy<Value = RegisterConfig> {
    (1usize..80, 1usize..12, 0.0f64..=1.0, any::<u64>()).prop_map(|(horizon, dim, r, seed)| RegisterConfig {
        horizon,
        dim,
        residual_strength: r,
        seed,
        ..Default::default()
    })
}

fn divisor_pair() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=64).prop_flat_map(|k| {
        let divs: Vec<usize> = (1..=k).filter(|d| k % d == 0).collect();
        (Just(k), prop::sample::select(divs.clone()), prop::sample::select(divs))
    })
}

proptest! {
    #[test]
    fn register_invariants(cfg in register_cfg()) {
        let gt = generate_input(&cfg).unwrap();
        let obs = observe(&gt, &cfg).unwrap();
        prop_assert!((gt.input_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(obs.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        for t in 0..cfg.horizon {
            prop_assert_eq!(obs.aggregate[t], obs.values[[0, t]] + obs.values[[1, t]]);
        }
        prop_assert_eq!(observe(&generate_input(&cfg).unwrap(), &cfg).unwrap(), obs.clone());
        if cfg.residual_strength == 0.0 {
            prop_assert!(obs.values.row(1).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn eta_simplex_and_shift_invariance(x in matrix(2, 9), k in 1usize..5, seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut model = FactorModel::init(&x, k, seed).unwrap();
        model.update_variational(&x).unwrap();
        model.update_eta().unwrap();
        for m in 0..2 {
            for t in 0..9 {
                let s: f64 = (0..k).map(|kk| model.eta[[m, kk, t]]).sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
        }
        let mut shifted = model.clone();
        shifted.log_bases.mapv_inplace(|v| v + c);
        shifted.update_eta().unwrap();
        for (a, b) in model.eta.iter().zip(shifted.eta.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_mean_identities(x in matrix(2, 7), k in 1usize..4, seed in any::<u64>()) {
        let mut model = FactorModel::init(&x, k, seed).unwrap();
        model.update_variational(&x).unwrap();
        for ((i, shape), scale) in model.a_shape.indexed_iter().zip(model.a_scale.iter()) {
            prop_assert_eq!(model.bases[i], shape * scale);
            let expect = digamma_oracle(*shape) + scale.ln();
            prop_assert!((model.log_bases[i] - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
        for ((i, shape), scale) in model.b_shape.indexed_iter().zip(model.b_scale.iter()) {
            prop_assert_eq!(model.activations[i], shape * scale);
            let expect = digamma_oracle(*shape) + scale.ln();
            prop_assert!((model.log_activations[i] - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bound_is_monotone(x in matrix(2, 16), k in 1usize..5, seed in any::<u64>()) {
        let model = fit(&x, k, &FitOptions { seed, max_iters: 200, ..Default::default() }).unwrap();
        for w in model.elbo_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn partition_cost_is_monotone(s in matrix(2, 12), k in 2usize..5, seed in any::<u64>()) {
        let fit = fit_partition(&s, k, &FitOptions { seed, max_iters: 100, ..Default::default() }).unwrap();
        for w in fit.cost_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }
}

proptest! {
    #[test]
    fn dft_preserves_norm(v in complex_vec(1..65)) {
        let k = v.len();
        let state = SpectralState::new(v, StateLabel::Raw);
        let out = dft(&state, k).unwrap();
        let n = state.norm_sqr();
        prop_assume!(n > 0.0);
        prop_assert!(((out.norm_sqr() - n) / n).abs() < 1e-12);
    }

    #[test]
    fn hann_symmetry(k in 2usize..100, x in 0i64..100) {
        let x = x % k as i64;
        let a = hann_window(x, k).unwrap();
        let b = hann_window(k as i64 - 1 - x, k).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cqt_round_trip(v in complex_vec(2..40), freq in 0usize..5, hann in any::<bool>(), shift in 1i64..40) {
        let k = v.len();
        let shift = 1 + shift % k as i64;
        let w = if hann { WindowSpec::hann(k, -shift) } else { WindowSpec::unit(k) };
        let state = SpectralState::new(v.clone(), StateLabel::Raw);
        let forward = cqt(&state, &w, freq).unwrap();
        // icqt undoes the phase but not the window weight
        let back = icqt(&forward, &w, freq).unwrap();
        for (j, (a, b)) in back.amplitudes.iter().zip(&v).enumerate() {
            let f = w.value(j as i64 - w.shift).unwrap();
            prop_assert!((a - b * f * f / k as f64).norm() < 1e-12);
        }
    }

    #[test]
    fn probability_concentration((k, k_target, k1) in divisor_pair()) {
        let (_, table) = idstft_unit(k1, &[k_target, k - k_target], k).unwrap();
        prop_assert_eq!(table.peak, (k / k1) % k);
        let expect = (k_target * k_target) as f64 / (k * k) as f64;
        prop_assert!((table.peak_mass() - expect).abs() < 1e-12);
        prop_assert!(table.total() <= 1.0 + 1e-12);
    }

    #[test]
    fn contraction_matches_loops(a in 1usize..4, d in 1usize..4, b in 1usize..4, k in 1usize..5, t in 1usize..8, fill in prop::collection::vec(0.0f64..1.0, 200)) {
        let mut it = fill.iter().cycle().copied();
        let r = Array3::from_shape_simple_fn((a, d, b), || it.next().unwrap());
        let e = Array2::from_shape_simple_fn((a, k), || it.next().unwrap());
        let h = Array3::from_shape_simple_fn((d, k, t), || it.next().unwrap());
        let tensors = PartitionTensors { r, e, h };
        let fast = contract(&tensors).unwrap();
        for bb in 0..b {
            for tt in 0..t {
                let mut acc = 0.0;
                for aa in 0..a { for dd in 0..d { for kk in 0..k {
                    acc += tensors.r[[aa, dd, bb]] * tensors.e[[aa, kk]] * tensors.h[[dd, kk, tt]];
                }}}
                prop_assert!((fast[[bb, tt]] - acc).abs() < 1e-12);
            }
        }
        let scores = score(&tensors).unwrap();
        prop_assert!((scores.total.iter().sum::<f64>() - fast.sum()).abs() < 1e-10 * fast.sum().max(1.0));
    }

    #[test]
    fn assignment_is_total_and_scale_free(q in matrix(2, 7), c in 1e-3f64..1e3) {
        let p = assign_scores(&q);
        prop_assert_eq!(p.assignment.len(), 7);
        prop_assert_eq!(p.cluster_sizes.iter().sum::<usize>(), 7);
        prop_assert!(p.assignment.iter().all(|a| *a == 1 || *a == 2));
        prop_assert_eq!(assign_scores(&q.mapv(|v| v * c)), p);
    }

    #[test]
    fn recovery_fidelity_bounds(labels in prop::collection::vec(1usize..=2, 1..12), target_mask in prop::collection::vec(any::<bool>(), 12)) {
        prop_assume!(labels.contains(&1));
        let part = BasisPartition::from_assignment(labels.clone(), 2).unwrap();
        let target: Vec<usize> = (0..labels.len()).filter(|k| target_mask[*k]).collect();
        let res = recover(&part, 1, Some(&target)).unwrap();
        prop_assert!((0.0..=1.0).contains(&res.fidelity_vs_target));
        prop_assert!((res.phi_star.norm_sqr() - 1.0).abs() < 1e-10);
        prop_assert!(res.prob_table.total() <= 1.0 + 1e-12);
        // composition: amplitude 1/sqrt(K1) on every recovered basis
        let k1 = part.cluster_sizes[0] as f64;
        for a in &res.phi_star.amplitudes {
            prop_assert!((a.norm() - 1.0 / k1.sqrt()).abs() < 1e-10);
        }
        let exact = recover(&part, 1, Some(&part.members(1))).unwrap();
        prop_assert!(exact.fidelity_vs_target >= 1.0 - 1e-10);
    }

    #[test]
    fn energy_is_a_rayleigh_quotient(v in complex_vec(1..30), phase in 0.0f64..6.3, scale in 1e-3f64..1e3) {
        let state = SpectralState::new(v.clone(), StateLabel::Raw);
        prop_assume!(state.norm_sqr() > 1e-9);
        let z = Complex64::from_polar(scale, phase);
        let moved = SpectralState::new(v.iter().map(|a| a * z).collect(), StateLabel::Raw);
        let a = energy(&state, &EnergySpec::NumberOperator).unwrap();
        let b = energy(&moved, &EnergySpec::NumberOperator).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn snr_identities(s in 1e-3f64..1e3, x in 1e-3f64..1e3, t in 1e-3f64..1e3) {
        let r = snr_report(s, x, t).unwrap();
        prop_assert_eq!(r.delta, s / t - s / x);
        if let Some(d) = r.delta_snr_db {
            prop_assert!((delta_from_snr_db(d) - r.delta_ratio).abs() < 1e-9 * r.delta_ratio);
        }
        prop_assert_eq!(r.no_gain, r.delta <= 0.0);
    }

    #[test]
    fn db_round_trip(d in 1e-9f64..1e9) {
        let back = delta_from_snr_db(snr_db_from_delta(d).unwrap());
        prop_assert!(((back - d) / d).abs() < 1e-9);
    }
}

/// Moving one basis across clusters never raises fidelity, for every start
/// with at most one misassignment and every `K <= 8`.
#[test]
fn fidelity_degrades_monotonically() {
    for k in 1..=8usize {
        for mask in 1u32..(1 << k) {
            let truth: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let labels = |flips: &[usize]| -> Vec<usize> {
                (0..k)
                    .map(|i| {
                        let t = if truth.contains(&i) { 1 } else { 2 };
                        if flips.contains(&i) { 3 - t } else { t }
                    })
                    .collect()
            };
            let fid = |flips: &[usize]| {
                let p = BasisPartition::from_assignment(labels(flips), 2).unwrap();
                if p.cluster_sizes[0] == 0 {
                    0.0
                } else {
                    recover(&p, 1, Some(&truth)).unwrap().fidelity_vs_target
                }
            };
            let base = fid(&[]);
            assert!(base >= 1.0 - 1e-10);
            for i in 0..k {
                let one = fid(&[i]);
                assert!(one < base, "K={k} truth={truth:?} flip {i}: {one} !< {base}");
                for j in 0..k {
                    if j != i {
                        let two = fid(&[i, j]);
                        assert!(two <= one + 1e-12, "K={k} truth={truth:?} flips {i},{j}: {two} > {one}");
                    }
                }
            }
        }
    }
}
