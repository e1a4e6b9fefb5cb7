mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stron::dataio::{draw_subsample, IndexSubset, SparseDataset};
use stron::harness::synthetic_separable;
use stron::loss::{LocalModel, LossKind, LossModel, Objective};
use stron::optimizer::*;

fn synth() -> SparseDataset {
    synthetic_separable(800, 20, 4)
}

const KINDS: [LossKind; 2] = [LossKind::Logistic, LossKind::SquaredHinge];

fn stron_once(model: &LossModel<'_>, cfg: &TrustRegionConfig, seed: u64) -> RunOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_stron(
        model,
        cfg,
        &SubsampleSchedule::default(),
        SubproblemSolver::Cg,
        &mut rng,
        &RunOptions::default(),
    )
    .unwrap()
}

#[test]
fn full_fraction_stron_reproduces_tron() {
    let data = synth();
    for kind in KINDS {
        let model = LossModel::new(kind, 1.0 / 800.0, &data).unwrap();
        let cfg = TrustRegionConfig {
            epsilon: 1e-8,
            ..Default::default()
        };
        let tron = run_tron(&model, &cfg, None, &RunOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let stron = run_stron(
            &model,
            &cfg,
            &SubsampleSchedule::full(),
            SubproblemSolver::Cg,
            &mut rng,
            &RunOptions::default(),
        )
        .unwrap();
        assert!(tron.trace.same_as(&stron.trace), "{kind}");
        assert_eq!(tron.w, stron.w);
    }
}

#[test]
fn stron_iteration_on_full_schedule_equals_injected_tron_iteration() {
    let data = synth();
    let n = data.n_points();
    let model = LossModel::new(LossKind::Logistic, 1.0 / n as f64, &data).unwrap();
    let sched = SubsampleSchedule::default();
    let k0 = (0..).find(|&k| schedule_size(&sched, k, n) == n).unwrap() + 1;
    let base = TrustRegionConfig {
        epsilon: 0.0,
        ..Default::default()
    };
    let longer = stron_once(&model, &TrustRegionConfig { max_outer: k0 + 1, ..base.clone() }, 7);
    let prefix = stron_once(&model, &TrustRegionConfig { max_outer: k0, ..base.clone() }, 7);
    assert!(prefix.trace.rows[..k0]
        .iter()
        .zip(&longer.trace.rows[..k0])
        .all(|(a, b)| a.same_as(b)));
    let injected = run_tron(
        &model,
        &TrustRegionConfig {
            max_outer: 1,
            delta0: Some(prefix.final_delta),
            ..base
        },
        None,
        &RunOptions {
            w0: Some(prefix.w.clone()),
            initial_gradient_norm: Some(prefix.initial_gradient_norm),
            ..Default::default()
        },
    )
    .unwrap();
    for (s, t) in longer.trace.rows[k0..].iter().zip(&injected.trace.rows) {
        assert_eq!(s.subsample_size, n);
        assert_eq!(s.function_value, t.function_value);
        assert_eq!(s.gradient_norm, t.gradient_norm);
        assert_eq!(s.cg_iterations, t.cg_iterations);
        assert_eq!(s.rho, t.rho);
        assert_eq!(s.delta, t.delta);
        assert_eq!(s.accepted, t.accepted);
        assert_eq!(s.hv_products, t.hv_products);
    }
    assert_eq!(longer.w, injected.w);
}

#[test]
fn identical_seeds_give_identical_traces() {
    let data = synth();
    let model = LossModel::new(LossKind::Logistic, 1e-3, &data).unwrap();
    let cfg = TrustRegionConfig::default();
    let sched = SubsampleSchedule::default();
    let runs = |seed: u64| -> Vec<RunOutput> {
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.push(run_stron(&model, &cfg, &sched, SubproblemSolver::Cg, &mut rng, &RunOptions::default()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.push(
            run_stron(
                &model,
                &cfg,
                &sched,
                SubproblemSolver::Pcg { alpha: 0.01 },
                &mut rng,
                &RunOptions::default(),
            )
            .unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.push(
            run_stron_svrg(&model, &cfg, &sched, &SvrgConfig::default(), &mut rng, &RunOptions::default()).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.push(run_newton_cg(&model, &cfg, &sched, &mut rng, &RunOptions::default()).unwrap());
        out
    };
    let (a, b, c) = (runs(5), runs(5), runs(6));
    for i in 0..4 {
        assert!(a[i].trace.same_as(&b[i].trace));
        assert_eq!(a[i].w, b[i].w);
        assert!(!a[i].trace.same_as(&c[i].trace), "seed should matter for method {i}");
    }
}

#[test]
fn tron_objective_is_monotone_and_rejections_shrink_radius() {
    let data = synth();
    for kind in KINDS {
        let model = LossModel::new(kind, 1e-4, &data).unwrap();
        let cfg = TrustRegionConfig {
            epsilon: 1e-10,
            max_outer: 500,
            ..Default::default()
        };
        for alpha in [None, Some(0.01)] {
            let out = run_tron(&model, &cfg, alpha, &RunOptions::default()).unwrap();
            assert_eq!(out.stop, StopReason::Converged, "{kind}");
            for pair in out.trace.rows.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                // near the optimum the true decrease is below the rounding error of evaluating F
                assert!(
                    b.function_value <= a.function_value * (1.0 + 1e-15),
                    "{kind} {alpha:?} iteration {}",
                    a.outer_iteration
                );
                if !a.accepted {
                    assert_eq!(b.function_value, a.function_value);
                    assert!(b.delta.unwrap() < a.delta.unwrap());
                }
            }
        }
    }
}

#[test]
fn newton_cg_full_batch_descends() {
    let data = synth();
    let model = LossModel::new(LossKind::SquaredHinge, 1e-3, &data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = TrustRegionConfig {
        epsilon: 1e-8,
        ..Default::default()
    };
    let out = run_newton_cg(&model, &cfg, &SubsampleSchedule::full(), &mut rng, &RunOptions::default()).unwrap();
    assert_eq!(out.stop, StopReason::Converged);
    for pair in out.trace.rows.windows(2) {
        assert!(pair[1].function_value <= pair[0].function_value * (1.0 + 1e-15));
    }
    assert!(out.trace.rows.iter().all(|r| r.rho.is_none() && r.delta.is_none()));
}

/// Expected cumulative cost per row from the logged columns alone.
fn recomputed_passes(rows: &[TraceRow], n: usize, svrg_m: Option<usize>) -> Vec<f64> {
    let mut total = 0usize;
    let last = rows.len() - 1;
    rows.iter()
        .enumerate()
        .map(|(k, r)| {
            let s = r.subsample_size;
            if let Some(m) = svrg_m {
                if k % m == 0 {
                    total += n;
                }
                if s < n {
                    total += s;
                }
            }
            total += if k == last && r.rho.is_none() { s } else { 2 * s };
            total as f64 / n as f64
        })
        .collect()
}

#[test]
fn effective_passes_are_recomputable() {
    let data = synth();
    let n = data.n_points();
    let model = LossModel::new(LossKind::Logistic, 1.0 / n as f64, &data).unwrap();
    let cfg = TrustRegionConfig::default();
    let sched = SubsampleSchedule::default();
    let tron = run_tron(&model, &cfg, Some(0.01), &RunOptions::default()).unwrap();
    let stron = stron_once(&model, &cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let svrg = run_stron_svrg(&model, &cfg, &sched, &SvrgConfig::default(), &mut rng, &RunOptions::default()).unwrap();
    for (out, m) in [(&tron, None), (&stron, None), (&svrg, Some(5))] {
        let got: Vec<f64> = out.trace.rows.iter().map(|r| r.effective_data_passes).collect();
        let want = recomputed_passes(&out.trace.rows, n, m);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn hessian_work_is_bounded_and_confined_to_the_subsample() {
    let data = synth();
    let n = data.n_points();
    let model = LossModel::new(LossKind::SquaredHinge, 1.0 / n as f64, &data).unwrap();
    let cfg = TrustRegionConfig {
        epsilon: 1e-6,
        ..Default::default()
    };
    let out = stron_once(&model, &cfg, 3);
    for r in &out.trace.rows {
        assert!(r.hv_products <= cfg.max_cg + 1);
        assert!(r.rows_touched <= r.hv_products * r.subsample_size);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = vec![0.05; data.n_features()];
    for size in [1, 8, 80, 400, n] {
        let subset = draw_subsample(n, size, &mut rng).unwrap();
        let local = model.sample(&w, &subset).unwrap();
        let members: Vec<usize> = subset.iter().collect();
        assert!(local.curved_rows().all(|i| members.binary_search(&i).is_ok()));
    }
}

#[test]
fn svrg_estimator_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inst = loop {
        let inst = random_instance(&mut rng, 5, 6);
        if inst.data.n_points() == 5 {
            break inst;
        }
    };
    let full = IndexSubset::full(5);
    let w_bar: Vec<f64> = inst.w.iter().map(|x| 0.5 * x - 0.2).collect();
    for kind in KINDS {
        let model = LossModel::new(kind, inst.lambda, &inst.data).unwrap();
        let anchor = model.gradient(&w_bar, &full).unwrap();
        let exact = model.gradient(&inst.w, &full).unwrap();
        let g = svrg_gradient(&model, &inst.w, &w_bar, &anchor, &full).unwrap();
        assert!(g.iter().zip(&exact).all(|(a, b)| (a - b).abs() <= 1e-12));
        let at_anchor = svrg_gradient(&model, &w_bar, &w_bar, &anchor, &IndexSubset::Explicit(vec![1, 3])).unwrap();
        assert!(at_anchor.iter().zip(&anchor).all(|(a, b)| (a - b).abs() <= 1e-12));
        let mut mean = vec![0.0; exact.len()];
        for i in 0..5 {
            let gi = svrg_gradient(&model, &inst.w, &w_bar, &anchor, &IndexSubset::Explicit(vec![i])).unwrap();
            for (m, x) in mean.iter_mut().zip(&gi) {
                *m += x / 5.0;
            }
        }
        assert!(mean.iter().zip(&exact).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_step_invariants(seed in any::<u64>(), delta in 1e-3f64..10.0, svm in any::<bool>(), pcg in any::<bool>()) {
        let kind = if svm { LossKind::SquaredHinge } else { LossKind::Logistic };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 20, 10);
        let subset = random_subset(&mut rng, inst.data.n_points());
        let model = LossModel::new(kind, inst.lambda, &inst.data).unwrap();
        let local = model.local_model(&inst.w, &subset).unwrap();
        let cfg = TrustRegionConfig::default();
        let solver = if pcg { SubproblemSolver::Pcg { alpha: 0.01 } } else { SubproblemSolver::Cg };
        let mut w = inst.w.clone();
        let report = trust_region_step(&local, local.gradient(), &mut w, delta, &cfg, solver, 0).unwrap();
        prop_assert!(local.hv_products() <= cfg.max_cg + 1);
        prop_assert!(report.subproblem.model_reduction <= 0.0);
        if report.accepted {
            prop_assert!(report.actual_reduction < 0.0);
            let moved = model.value(&w, &subset).unwrap();
            prop_assert!(moved <= local.value());
        } else {
            prop_assert_eq!(&w, &inst.w);
            prop_assert!(report.new_delta < delta);
        }
    }

    #[test]
    fn schedule_is_monotone_and_saturates(f0 in 0.001f64..=1.0, epochs in 0.5f64..10.0, n in 1usize..5000, exp in any::<bool>()) {
        let s = SubsampleSchedule {
            initial_fraction: f0,
            growth: if exp { Growth::Exponential } else { Growth::Linear },
            epochs_to_full: epochs,
        };
        let sizes: Vec<usize> = s.sizes(n).take(400).collect();
        prop_assert!(sizes.iter().all(|&x| (1..=n).contains(&x)));
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*sizes.last().unwrap(), n);
    }
}
