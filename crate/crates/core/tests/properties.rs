use std::sync::Arc;

use proptest::prelude::*;

use dsm_core::linalg::{inner, reg_solve, LinearMap, Vector};
use dsm_core::operators::{
    catalog_cubic, catalog_linear_fredholm, estimate_bounds, make_problem, profile_vector, verify_monotone,
    MonotoneOperator, Profile,
};
use dsm_core::schedule::{a_of, a_priori_n0, check_conditions, Condition, Schedule, ScheduleError};

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0_f64, len)
}

fn pair(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_dim).prop_flat_map(|d| (vec_of(d), vec_of(d)))
}

/// `S + K` with `S = C^T C / d` positive semidefinite and `K` skew.
fn monotone_matrix(d: usize) -> impl Strategy<Value = LinearMap> {
    (vec_of(d * d), vec_of(d * d)).prop_map(move |(c, k)| {
        LinearMap::from_fn(d, |i, j| {
            let sym: f64 = (0..d).map(|l| c[l * d + i] * c[l * d + j]).sum::<f64>() / d as f64;
            sym + 0.5 * (k[i * d + j] - k[j * d + i])
        })
    })
}

fn shifted_residual(j: &LinearMap, a: f64, z: &Vector, w: &Vector) -> f64 {
    (&(&j.apply(z) + &z.scaled(a)) - w).norm()
}

proptest! {
    #[test]
    fn inner_obeys_cauchy_schwarz((u, v) in pair(64)) {
        let u = Vector::new(u).unwrap();
        let v = Vector::new(v).unwrap();
        let uv = inner(&u, &v).unwrap();
        prop_assert!(uv.abs() <= u.norm() * v.norm() + 1e-12);
        prop_assert_eq!(uv, inner(&v, &u).unwrap());
    }

    #[test]
    fn reg_solve_respects_inverse_bound(
        (j, w) in (1..=24_usize).prop_flat_map(|d| (monotone_matrix(d), vec_of(d))),
        log_a in -3.0..2.0_f64,
    ) {
        let a = 10_f64.powf(log_a);
        let w = Vector::new(w).unwrap();
        let z = reg_solve(&j, a, &w).unwrap();
        let tol = 1e-12 * w.norm();
        prop_assert!(z.norm() <= w.norm() / a + tol / a + 1e-12, "{} > {}", z.norm(), w.norm() / a);
    }

    #[test]
    fn schedule_is_strictly_decreasing(
        d0 in 1e-3..1e4_f64,
        d in 1.0..50.0_f64,
        b in 0.05..=1.0_f64,
        n in 0..1_000_000_u64,
    ) {
        let s = schedule(d0, d, b, 1.0, 0.0, 1.0);
        prop_assert!(a_of(&s, n + 1) < a_of(&s, n));
        prop_assert!(a_of(&s, n) > 0.0);
    }

    #[test]
    fn a_priori_index_brackets_threshold(
        d0 in 1e-2..1e3_f64,
        b in 0.2..=1.0_f64,
        log_delta in -6.0..-1.0_f64,
        y in 0.1..5.0_f64,
    ) {
        let s = schedule(d0, 1.0, b, 1.0, 0.0, y);
        let delta = 10_f64.powf(log_delta);
        let thr = y / (s.c_mid() - 1.0);
        prop_assume!(delta / s.a(0) <= thr);
        let n0 = match a_priori_n0(&s, delta, y) {
            Ok(n0) => n0,
            Err(ScheduleError::AprioriCapExceeded { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(delta / s.a(n0) <= thr);
        prop_assert!(delta / s.a(n0 + 1) > thr);
    }

    #[test]
    fn rescaling_preserves_conditions_and_enforces_growth(
        lambda in 1e-2..1e2_f64,
        c0 in 0.0..10.0_f64,
        y in 0.1..3.0_f64,
        r in 4.0..50.0_f64,
        extra in 1.0..20.0_f64,
        misfit_frac in 0.0..1.0_f64,
        m1_frac in 0.0..1.0_f64,
    ) {
        let c1 = 3.0 * y;
        let mut s = schedule(r * c1 * lambda, 1.0, 1.0, lambda, c0, y);
        s.c1 = c1;
        s.m1 = (m1_frac * lambda * y).max(1e-12);
        let misfit = misfit_frac * s.a0() * s.a0() / lambda;
        let before = check_conditions(&s, misfit, y, 2000);
        for c in [Condition::RatioBound, Condition::InitialMisfit, Condition::DerivativeScale, Condition::StepDecay] {
            prop_assert!(before.get(c).unwrap().passed, "{:?} fails before scaling", c);
        }
        let kappa = f64::max(1.0, 4.0 * c0 / lambda) * extra;
        let after = check_conditions(&s.scaled(kappa), misfit, y, 2000);
        prop_assert!(after.all_passed(), "{:?}", after.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    }

    #[test]
    fn noise_is_exact_when_delta_is_not_tiny(seed in any::<u64>(), rel in 1e-2..1.0_f64, d in 2..60_usize) {
        let op: Arc<dyn MonotoneOperator> = Arc::new(catalog_linear_fredholm(d).unwrap());
        let y = profile_vector(Profile::Tent, d, 1.0);
        let delta = rel * op.apply(&y).norm();
        let p = make_problem(op, y, delta, seed).unwrap();
        let dist = p.f_delta.distance(&p.f);
        prop_assert!((dist - delta).abs() <= 1e-14 * delta, "{dist} vs {delta}");
    }

    #[test]
    fn noise_sits_at_exact_distance(seed in any::<u64>(), log_delta in -8.0..0.0_f64, d in 2..60_usize) {
        let op: Arc<dyn MonotoneOperator> = Arc::new(catalog_linear_fredholm(d).unwrap());
        let delta = 10_f64.powf(log_delta);
        let p = make_problem(op, profile_vector(Profile::Tent, d, 1.0), delta, seed).unwrap();
        let dist = p.f_delta.distance(&p.f);
        // Below about 1e-2 ||f|| the spacing of doubles near f dominates.
        let floor = 4.0 * f64::EPSILON * p.f.norm();
        prop_assert!((dist - delta).abs() <= 1e-14 * delta + floor, "{dist} vs {delta}");
    }

    #[test]
    fn cubic_jacobian_matches_finite_differences(
        u in vec_of(12),
        h in vec_of(12),
        c in 0.0..2.0_f64,
    ) {
        let op = catalog_cubic(12, c).unwrap();
        let u = Vector::new(u).unwrap().scaled(0.2);
        let h = Vector::new(h).unwrap();
        prop_assume!(h.norm() > 1e-3);
        let h = h.scaled(1.0 / h.norm());
        let m2 = estimate_bounds(&op, &u, 1.0, 8).unwrap().m2;
        let fu = op.apply(&u);
        let jh = op.jacobian(&u).apply(&h);
        for eps in [1e-4, 1e-5] {
            let fd = (&op.apply(&(&u + &h.scaled(eps))) - &fu).scaled(1.0 / eps);
            let err = (&fd - &jh).norm();
            prop_assert!(err <= 5.0 * eps * m2 + 1e-8, "eps {eps}: {err} vs m2 {m2}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn reg_solve_reproduces_rhs_up_to_dim_200(
        (j, w) in (100..=200_usize).prop_flat_map(|d| (monotone_matrix(d), vec_of(d))),
        log_a in -4.0..1.0_f64,
    ) {
        let a = 10_f64.powf(log_a);
        let w = Vector::new(w).unwrap();
        let z = reg_solve(&j, a, &w).unwrap();
        let rel = shifted_residual(&j, a, &z, &w) / w.norm();
        prop_assert!(rel <= 1e-10, "relative residual {rel}");
    }
}

fn schedule(d0: f64, d: f64, b: f64, lambda: f64, c0: f64, y: f64) -> Schedule {
    Schedule {
        d0,
        d,
        b,
        lambda,
        c0,
        c1: y * 3.0,
        c_stop: 2.0,
        gamma: 0.9,
        m1: 1.0,
        y_norm_est: y,
    }
}

#[test]
fn catalog_operators_are_monotone_on_radius_ten() {
    let ops: Vec<Box<dyn MonotoneOperator>> = vec![
        Box::new(catalog_linear_fredholm(40).unwrap()),
        Box::new(catalog_cubic(40, 0.0).unwrap()),
        Box::new(catalog_cubic(40, 0.25).unwrap()),
        Box::new(catalog_cubic(40, 3.0).unwrap()),
    ];
    for op in &ops {
        let r = verify_monotone(op.as_ref(), 10.0, 1000, 7);
        assert!(r.monotone, "{op:?}: worst margin {}", r.worst_margin);
        assert_eq!(r.pairs, 1000);
    }
}

#[test]
fn fredholm_matrix_is_exactly_symmetric() {
    for d in [2, 7, 50, 101] {
        let op = catalog_linear_fredholm(d).unwrap();
        let j = op.jacobian(&Vector::zeros(d));
        for i in 0..d {
            for k in 0..d {
                assert_eq!(j.get(i, k), j.get(k, i));
            }
        }
    }
}
