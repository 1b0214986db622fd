use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsm_core::dsm::{
    auto_schedule, check_v_increments, convergence_study, dsm_step, run, AutoScheduleOptions, StopReason,
    StoppingRule, StudyParams,
};
use dsm_core::linalg::{reg_solve, LinearMap, Vector};
use dsm_core::operators::{
    catalog_cubic, catalog_linear_fredholm, make_problem, profile_vector, MonotoneOperator, MonotoneProblem, Profile,
};
use dsm_core::regsolve::{find_n_delta_v, find_n_delta_v_bisect, solve_regularized, v_sequence};
use dsm_core::schedule::{a_priori_n0, containment_radius, Schedule};

fn linear(d: usize, y_norm: f64, delta: f64, seed: u64) -> MonotoneProblem {
    let op: Arc<dyn MonotoneOperator> = Arc::new(catalog_linear_fredholm(d).unwrap());
    make_problem(op, profile_vector(Profile::Sin, d, y_norm), delta, seed).unwrap()
}

fn cubic(d: usize, c: f64, y_norm: f64, delta: f64) -> MonotoneProblem {
    let op: Arc<dyn MonotoneOperator> = Arc::new(catalog_cubic(d, c).unwrap());
    make_problem(op, profile_vector(Profile::Sin, d, y_norm), delta, 1).unwrap()
}

fn schedule(p: &MonotoneProblem) -> Schedule {
    let mut opts = AutoScheduleOptions::new(2.0, 0.9);
    opts.y_norm_est = Some(p.y.norm());
    auto_schedule(p.operator.as_ref(), &p.f_delta, p.delta, &opts).unwrap().schedule
}

fn rel(x: &Vector, y: &Vector) -> f64 {
    x.distance(y) / y.norm()
}

#[test]
fn reg_solve_matches_dense_lu_on_random_monotone_matrix() {
    let d = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let j = LinearMap::from_fn(d, |r, c| {
        (0..d).map(|l| b[l * d + r] * b[l * d + c]).sum::<f64>() + k[r * d + c] - k[c * d + r]
    });
    let w = Vector::from_fn(d, |_| rng.random_range(-1.0..1.0));
    let a = 0.1;

    let z = reg_solve(&j, a, &w).unwrap();
    let m = DMatrix::from_fn(d, d, |r, c| j.get(r, c)) + DMatrix::identity(d, d) * a;
    let oracle = m.lu().solve(&DVector::from_column_slice(w.as_slice())).unwrap();
    let oracle = Vector::new(oracle.as_slice().to_vec()).unwrap();
    assert!(rel(&z, &oracle) <= 1e-10, "{}", rel(&z, &oracle));
}

#[test]
fn crossing_index_matches_exhaustive_scan() {
    let p = linear(30, 1.0, 1e-3, 1);
    let s = schedule(&p);
    let op = p.operator.as_ref();
    let c = 1.5;
    let bisect = find_n_delta_v_bisect(op, &s, &p.f_delta, c, p.delta, 1_000_000).unwrap();
    assert!(bisect.n > 100, "crossing too early to be a meaningful test: {}", bisect.n);

    // Exhaustive scan: every index solved from scratch, no warm starts.
    let thr = c * p.delta;
    let scan = (0..=bisect.n + 5)
        .find(|&n| {
            let v = solve_regularized(op, s.a(n), &p.f_delta, None).unwrap();
            op.apply(&v).distance(&p.f_delta) <= thr
        })
        .unwrap();
    assert_eq!(bisect.n, scan);

    let records = v_sequence(op, &s, &p.f_delta, scan + 5).unwrap();
    assert_eq!(find_n_delta_v(&records, c, p.delta).unwrap() as u64, scan);
}

#[test]
fn linear_newton_step_lands_on_v_sequence() {
    let p = linear(40, 1.0, 1e-2, 5);
    let s = schedule(&p);
    let op = p.operator.as_ref();
    let mut u = Vector::zeros(40);
    for n in 0..=40 {
        let next = dsm_step(op, &u, s.a(n), &p.f_delta).unwrap();
        let v = solve_regularized(op, s.a(n), &p.f_delta, None).unwrap();
        assert!(rel(&next, &v) <= 1e-9, "n = {n}: {}", rel(&next, &v));
        u = next;
    }
}

#[test]
fn v_increments_stay_within_bound() {
    for p in [linear(30, 1.0, 1e-3, 2), cubic(20, 0.25, 0.05, 1e-3)] {
        let s = schedule(&p);
        let records = v_sequence(p.operator.as_ref(), &s, &p.f_delta, 200).unwrap();
        assert_eq!(check_v_increments(&records), None);
    }
}

#[test]
fn exact_data_v_sequence_stays_inside_solution_ball() {
    let op: Arc<dyn MonotoneOperator> = Arc::new(catalog_cubic(20, 0.25).unwrap());
    let exact = MonotoneProblem::exact(op, profile_vector(Profile::Tent, 20, 0.1)).unwrap();
    let noisy = cubic(20, 0.25, 0.1, 1e-3);
    let s = schedule(&noisy);
    let y = exact.y.norm();
    for r in v_sequence(exact.operator.as_ref(), &s, &exact.f, 300).unwrap() {
        assert!(r.v.norm() <= y * (1.0 + 1e-10), "n = {}: {} > {y}", r.n, r.v.norm());
    }
}

#[test]
fn residual_of_v_tends_to_noise_level() {
    let p = linear(30, 1.0, 1e-3, 4);
    let a = 0.005 * p.delta / p.y.norm();
    let v = solve_regularized(p.operator.as_ref(), a, &p.f_delta, None).unwrap();
    let h = p.operator.apply(&v).distance(&p.f_delta);
    assert!(h <= 1.05 * p.delta, "{h} vs {}", p.delta);
}

#[test]
fn discrepancy_run_stays_in_ball_and_stops_by_a_priori_index() {
    let p = cubic(20, 0.25, 0.05, 1e-3);
    let s = schedule(&p);
    let rule = StoppingRule::discrepancy(2.0, 0.9, p.delta, 10_000_000);
    let report = run(p.operator.as_ref(), &s, &p.f_delta, &rule, true).unwrap();
    assert_eq!(report.stop_reason, StopReason::Discrepancy);

    let n0 = a_priori_n0(&s, p.delta, p.y.norm()).unwrap();
    assert!(report.n_delta <= n0 + 1, "{} > {}", report.n_delta, n0 + 1);

    let thr = rule.threshold();
    let records = &report.trace.records;
    assert!(records[..records.len() - 1].iter().all(|r| r.residual > thr));
    assert!(report.residual_final <= thr);

    let radius = containment_radius(s.a0() / s.lambda, 0.0, p.y.norm(), s.c_mid());
    for r in records {
        let u = r.u.as_ref().unwrap();
        assert!(u.norm() <= radius + 1e-10, "n = {}: {} > {radius}", r.n, u.norm());
    }
}

#[test]
fn study_error_is_robust_to_noise_seed() {
    let deltas = [1e-2, 1e-3];
    let mut finals = Vec::new();
    for seed in [1, 2, 3] {
        let params = StudyParams {
            c1: 2.0,
            gamma: 0.9,
            n_cap: 10_000_000,
            seed,
        };
        let table = convergence_study(
            |delta, seed| Ok(linear(30, 1.0, delta, seed)),
            |p| Ok(schedule(p)),
            &deltas,
            &params,
        )
        .unwrap();
        assert_eq!(table.verdicts.error_strictly_decreasing, Some(true));
        finals.push(table.rows.last().unwrap().error);
    }
    let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finals.iter().cloned().fold(0.0, f64::max);
    assert!(hi <= 3.0 * lo, "{finals:?}");
}
