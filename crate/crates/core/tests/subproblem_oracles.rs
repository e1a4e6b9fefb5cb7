mod common;

use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stron::subproblem::{
    build_preconditioner, steihaug_cg, steihaug_cg_observed, steihaug_pcg, FnOperator, Termination,
};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unconstrained_solve_matches_dense(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = SubproblemCase::random(&mut rng);
        let res = steihaug_cg(&case.operator(), case.g.as_slice(), 1e12, 1e-10, 500).unwrap();
        prop_assert_eq!(res.termination, Termination::Residual);
        let p = DVector::from_vec(res.step.clone());
        prop_assert!(rel_err(&p, &case.newton_step()) <= 1e-8);
        let m = model_value(&case.a, &case.g, &p);
        prop_assert!((res.model_reduction - m).abs() <= 1e-10 * m.abs().max(1.0));
    }

    #[test]
    fn bounded_solve_sits_on_boundary_and_beats_cauchy(seed in any::<u64>(), frac in 0.02f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = SubproblemCase::random(&mut rng);
        let delta = frac * case.newton_step().norm();
        let res = steihaug_cg(&case.operator(), case.g.as_slice(), delta, 1e-10, 500).unwrap();
        prop_assert_eq!(res.termination, Termination::Boundary);
        prop_assert!((norm(&res.step) - delta).abs() <= 1e-10);
        let p = DVector::from_vec(res.step);
        let pc = cauchy_point(&case.a, &case.g, delta);
        prop_assert!(model_value(&case.a, &case.g, &p) <= model_value(&case.a, &case.g, &pc) + 1e-12);
    }

    #[test]
    fn iterate_norms_increase_and_model_decreases(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = SubproblemCase::random(&mut rng);
        let mut iterates: Vec<Vec<f64>> = Vec::new();
        steihaug_cg_observed(&case.operator(), case.g.as_slice(), 1e12, 1e-10, 500, |p| iterates.push(p.to_vec())).unwrap();
        let norms: Vec<f64> = iterates.iter().map(|p| norm(p)).collect();
        for w in norms.windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-12));
        }
        let models: Vec<f64> = iterates.iter().map(|p| model_value(&case.a, &case.g, &DVector::from_column_slice(p))).collect();
        for w in models.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn pcg_with_alpha_zero_is_plain_cg(seed in any::<u64>(), frac in 0.02f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = SubproblemCase::random(&mut rng);
        let delta = frac * case.newton_step().norm();
        let op = case.operator();
        let hdiag: Vec<f64> = (0..case.dim()).map(|i| case.a[(i, i)]).collect();
        let m = build_preconditioner(&hdiag, 0.0).unwrap();
        let cg = steihaug_cg(&op, case.g.as_slice(), delta, 1e-10, 500).unwrap();
        let pcg = steihaug_pcg(&op, case.g.as_slice(), delta, 1e-10, 500, &m).unwrap();
        prop_assert_eq!(cg.cg_iterations, pcg.cg_iterations);
        prop_assert_eq!(cg.termination, pcg.termination);
        prop_assert!(cg.step.iter().zip(&pcg.step).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn preconditioned_solve_matches_dense(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = SubproblemCase::random(&mut rng);
        let hdiag: Vec<f64> = (0..case.dim()).map(|i| case.a[(i, i)]).collect();
        let m = build_preconditioner(&hdiag, alpha).unwrap();
        let res = steihaug_pcg(&case.operator(), case.g.as_slice(), 1e12, 1e-10, 500, &m).unwrap();
        let p = DVector::from_vec(res.step);
        prop_assert!(rel_err(&p, &case.newton_step()) <= 1e-8);
    }

    #[test]
    fn pcg_step_respects_scaled_radius(seed in any::<u64>(), alpha in 0.0f64..=1.0, frac in 0.02f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = SubproblemCase::random(&mut rng);
        let hdiag: Vec<f64> = (0..case.dim()).map(|i| case.a[(i, i)]).collect();
        let m = build_preconditioner(&hdiag, alpha).unwrap();
        let delta = frac * case.newton_step().norm();
        let res = steihaug_pcg(&case.operator(), case.g.as_slice(), delta, 1e-10, 500, &m).unwrap();
        let scaled: f64 = res.step.iter().zip(m.diagonal()).map(|(p, d)| d * p * p).sum::<f64>().sqrt();
        prop_assert!(scaled <= delta * (1.0 + 1e-10));
        prop_assert!((res.step_norm - scaled).abs() <= 1e-10 * delta.max(1.0));
    }
}

#[test]
fn indefinite_operator_stops_on_boundary_with_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let dim = rng.random_range(2..=20);
        let mut a = random_spd(&mut rng, dim, 1.0, 5.0);
        a[(0, 0)] -= 20.0;
        let g = random_vector(&mut rng, dim);
        let op = FnOperator::new(dim, |v: &[f64], out: &mut [f64]| {
            out.copy_from_slice((&a * DVector::from_column_slice(v)).as_slice())
        });
        let res = steihaug_cg(&op, g.as_slice(), 2.0, 1e-10, 200).unwrap();
        let p = DVector::from_vec(res.step.clone());
        assert!(res.termination.hit_boundary() || res.termination == Termination::Residual);
        if res.termination.hit_boundary() {
            assert!((p.norm() - 2.0).abs() <= 1e-10);
        }
        assert!(res.model_reduction < 0.0);
        let pc = cauchy_point(&a, &g, 2.0);
        assert!(model_value(&a, &g, &p) <= model_value(&a, &g, &pc) + 1e-12);
    }
}
