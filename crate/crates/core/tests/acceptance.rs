//! Acceptance suite. Runs the criteria one after another so each timing
//! is its own, prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::panic;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use dsm_core::dsm::{auto_schedule, check_error_recursion, convergence_study, run, AutoScheduleOptions, RunReport, StopReason, StoppingRule, StudyParams};
use dsm_core::linalg::{LinearMap, Vector};
use dsm_core::operators::{catalog_cubic, catalog_linear_fredholm, make_problem, profile_vector, MonotoneOperator, MonotoneProblem, Profile};
use dsm_core::regsolve::{check_large_a, solve_regularized, v_sequence, LARGE_A_GRID};
use dsm_core::schedule::{a_priori_n0, check_conditions, Schedule};

const SEED: u64 = 1;
const LINEAR_DIM: usize = 100;
const LINEAR_Y_NORM: f64 = 1.0;
const CUBIC_DIM: usize = 50;
const CUBIC_C: f64 = 0.25;
const CUBIC_Y_NORM: f64 = 0.05;
const STUDY_Y_NORM: f64 = 3.0;
const C1: f64 = 2.0;
const GAMMA: f64 = 0.9;
const DELTA: f64 = 1e-3;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

#[derive(Clone, Copy, Debug)]
enum Catalog {
    Linear,
    Cubic,
}

impl Catalog {
    const ALL: [Catalog; 2] = [Catalog::Linear, Catalog::Cubic];

    fn name(self) -> &'static str {
        match self {
            Catalog::Linear => "linear",
            Catalog::Cubic => "cubic",
        }
    }

    fn y_norm(self) -> f64 {
        match self {
            Catalog::Linear => LINEAR_Y_NORM,
            Catalog::Cubic => CUBIC_Y_NORM,
        }
    }

    fn operator(self) -> Arc<dyn MonotoneOperator> {
        match self {
            Catalog::Linear => Arc::new(catalog_linear_fredholm(LINEAR_DIM).unwrap()),
            Catalog::Cubic => Arc::new(catalog_cubic(CUBIC_DIM, CUBIC_C).unwrap()),
        }
    }

    fn problem(self, delta: f64) -> MonotoneProblem {
        let op = self.operator();
        let y = profile_vector(Profile::Sin, op.dim(), self.y_norm());
        make_problem(op, y, delta, SEED).unwrap()
    }
}

fn schedule_for(p: &MonotoneProblem, y_norm: f64) -> Schedule {
    let mut opts = AutoScheduleOptions::new(C1, GAMMA);
    opts.y_norm_est = Some(y_norm);
    auto_schedule(p.operator.as_ref(), &p.f_delta, p.delta, &opts).unwrap().schedule
}

fn misfit(p: &MonotoneProblem) -> f64 {
    p.operator.apply(&Vector::zeros(p.dim())).distance(&p.f_delta)
}

fn dense(m: &LinearMap) -> DMatrix<f64> {
    DMatrix::from_fn(m.dim(), m.dim(), |i, j| m.get(i, j))
}

/// `(A + aI)^{-1} b` by nalgebra's LU.
fn oracle_solve(m: &LinearMap, a: f64, b: &Vector) -> DVector<f64> {
    let shifted = dense(m) + DMatrix::identity(m.dim(), m.dim()) * a;
    shifted.lu().solve(&DVector::from_column_slice(b.as_slice())).expect("nonsingular")
}

fn rel_gap(x: &[f64], oracle: &DVector<f64>) -> f64 {
    let diff: f64 = x.iter().zip(oracle.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    diff / oracle.norm()
}

/// Diagnostics run to `n0 + 2` at `DELTA`, shared by the invariant and recursion checks.
struct DiagnosticRun {
    schedule: Schedule,
    n0: u64,
    report: RunReport,
}

fn diagnostic_run(cat: Catalog) -> &'static DiagnosticRun {
    static LINEAR: OnceLock<DiagnosticRun> = OnceLock::new();
    static CUBIC: OnceLock<DiagnosticRun> = OnceLock::new();
    let cell = match cat {
        Catalog::Linear => &LINEAR,
        Catalog::Cubic => &CUBIC,
    };
    cell.get_or_init(|| {
        let p = cat.problem(DELTA);
        let schedule = schedule_for(&p, cat.y_norm());
        let n0 = a_priori_n0(&schedule, DELTA, cat.y_norm()).unwrap();
        let report = run(p.operator.as_ref(), &schedule, &p.f_delta, &StoppingRule::max_iter(n0 + 2), true).unwrap();
        DiagnosticRun { schedule, n0, report }
    })
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for cat in Catalog::ALL {
        let p = cat.problem(DELTA);
        let s = schedule_for(&p, cat.y_norm());
        let recs = v_sequence(p.operator.as_ref(), &s, &p.f_delta, 60).map_err(|e| e.to_string())?;
        let slack = 1e-8 * (1.0 + recs[0].h);
        let h_rise = recs.windows(2).map(|w| w[1].h - w[0].h).fold(f64::MIN, f64::max);
        let g_drop = recs.windows(2).map(|w| w[0].g_v - w[1].g_v).fold(f64::MIN, f64::max);
        ok &= recs.len() == 61 && h_rise <= slack && g_drop <= slack;
        notes.push(format!("{}: max h rise {h_rise:.2e}, max ||V|| drop {g_drop:.2e}, slack {slack:.2e}", cat.name()));
    }
    verdict(ok, notes)
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for cat in Catalog::ALL {
        let p = cat.problem(DELTA);
        let s = schedule_for(&p, cat.y_norm());
        let recs = v_sequence(p.operator.as_ref(), &s, &p.f_delta, 60).map_err(|e| e.to_string())?;
        let y_norm = p.y.norm();
        let worst = recs
            .iter()
            .map(|r| r.v.norm() - (y_norm + DELTA / r.a_n))
            .fold(f64::MIN, f64::max);
        ok &= worst <= 1e-8;
        notes.push(format!("{}: max(||V_n|| - ||y|| - delta/a_n) = {worst:.3e}", cat.name()));
    }
    verdict(ok, notes)
}

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for cat in Catalog::ALL {
        let p = cat.problem(DELTA);
        let op = p.operator.as_ref();
        let report = check_large_a(op, &p.f_delta, &LARGE_A_GRID).map_err(|e| e.to_string())?;
        // Recompute at a = 1e6 outside the report.
        let a = 1e6;
        let v = solve_regularized(op, a, &p.f_delta, None).map_err(|e| e.to_string())?;
        let m = misfit(&p);
        let gap = (op.apply(&v).distance(&p.f_delta) - m).abs() / m;
        let bound_ok = v.norm() <= m / a * (1.0 + 1e-9);
        ok &= report.passed() && gap < 1e-3 && bound_ok;
        notes.push(format!(
            "{}: gap {gap:.2e}, ||V_a|| a/||f_d - F(0)|| = {:.6}",
            cat.name(),
            v.norm() * a / m
        ));
    }
    verdict(ok, notes)
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for cat in Catalog::ALL {
        let mut ratios = Vec::new();
        for delta in [1e-2, 1e-3, 1e-4] {
            let p = cat.problem(delta);
            let s = schedule_for(&p, cat.y_norm());
            let report = check_conditions(&s, misfit(&p), cat.y_norm(), 10_000);
            if !report.all_passed() {
                ok = false;
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.condition.name()).collect();
                notes.push(format!("{} delta={delta:e}: conditions {failed:?} fail", cat.name()));
            }
            ratios.push(s.a0() / s.lambda);
        }
        let spread = ratios.iter().cloned().fold(f64::MIN, f64::max) / ratios.iter().cloned().fold(f64::MAX, f64::min);
        ok &= spread < 2.0;
        notes.push(format!("{}: a0/lambda spread {spread:.4}", cat.name()));
    }
    verdict(ok, notes)
}

fn criterion_5() -> Outcome {
    let p = Catalog::Linear.problem(DELTA);
    let s = schedule_for(&p, LINEAR_Y_NORM);
    let report = run(p.operator.as_ref(), &s, &p.f_delta, &StoppingRule::max_iter(41), true).map_err(|e| e.to_string())?;
    let matrix = p.operator.jacobian(&Vector::zeros(p.dim()));
    let mut worst = 0.0_f64;
    for n in 0..=40_u64 {
        let u_next = report.trace.records[n as usize + 1].u.as_ref().ok_or("iterate not stored")?;
        let v_n = oracle_solve(&matrix, s.a(n), &p.f_delta);
        worst = worst.max(rel_gap(u_next.as_slice(), &v_n));
    }
    verdict(worst <= 1e-9, vec![format!("max ||u_(n+1) - V_n||/||V_n|| over n<=40: {worst:.2e}")])
}

fn criterion_6() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let threshold = C1 * DELTA.powf(GAMMA);
    for cat in Catalog::ALL {
        let p = cat.problem(DELTA);
        let s = schedule_for(&p, cat.y_norm());
        let n0 = a_priori_n0(&s, DELTA, cat.y_norm()).map_err(|e| e.to_string())?;
        let rule = StoppingRule::discrepancy(C1, GAMMA, DELTA, 10 * (n0 + 2));
        let report = run(p.operator.as_ref(), &s, &p.f_delta, &rule, false).map_err(|e| e.to_string())?;
        let residuals: Vec<f64> = report.trace.records.iter().map(|r| r.residual).collect();
        let first = residuals.iter().position(|&r| r <= threshold);
        let final_residual = p.operator.apply(&report.u_final).distance(&p.f_delta);
        let this_ok = report.stop_reason == StopReason::Discrepancy
            && first == Some(report.n_delta as usize)
            && residuals.len() == report.n_delta as usize + 1
            && final_residual <= threshold
            && report.n_delta <= n0 + 1;
        ok &= this_ok;
        notes.push(format!(
            "{}: n_delta {} <= n0+1 = {}, r = {final_residual:.4e} <= {threshold:.4e}",
            cat.name(),
            report.n_delta,
            n0 + 1
        ));
    }
    verdict(ok, notes)
}

fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for cat in Catalog::ALL {
        let d = diagnostic_run(cat);
        let mut worst = 0.0_f64;
        for n in 0..=d.n0 + 1 {
            let rec = d.report.trace.get(n).ok_or(format!("missing trace record {n}"))?;
            let g = rec.g.ok_or("missing g_n")?;
            worst = worst.max(g / (rec.a_n / d.schedule.lambda));
        }
        ok &= worst < 1.0;
        notes.push(format!("{}: max g_n lambda/a_n over n<={} = {worst:.4}", cat.name(), d.n0 + 1));
    }
    verdict(ok, notes)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let op: Arc<dyn MonotoneOperator> = Arc::new(catalog_linear_fredholm(LINEAR_DIM).unwrap());
    let y = profile_vector(Profile::Sin, LINEAR_DIM, STUDY_Y_NORM);
    let family = |delta: f64, seed: u64| make_problem(op.clone(), y.clone(), delta, seed).map_err(|e| e.to_string());
    let policy = |p: &MonotoneProblem| Ok(schedule_for(p, STUDY_Y_NORM));
    let params = StudyParams {
        c1: C1,
        gamma: GAMMA,
        n_cap: 50_000_000,
        seed: SEED,
    };
    let table = convergence_study(family, policy, &[1e-2, 1e-3, 1e-4, 1e-5], &params).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let errors: Vec<f64> = table.rows.iter().map(|r| r.error).collect();
    let ns: Vec<u64> = table.rows.iter().map(|r| r.n_delta).collect();
    let ratios: Vec<f64> = table.rows.iter().map(|r| r.delta / r.a_n_delta).collect();
    let ok = table.rows.len() == 4
        && errors.windows(2).all(|w| w[1] < w[0])
        && errors[3] < 0.2 * errors[0]
        && ns.windows(2).all(|w| w[1] >= w[0])
        && ratios.windows(2).all(|w| w[1] < w[0])
        && table.rows.iter().all(|r| r.stop_reason == StopReason::Discrepancy)
        && elapsed < Duration::from_secs(60);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
    verdict(
        ok,
        vec![
            format!("errors [{}]", fmt(&errors)),
            format!("final/first {:.3}", errors[3] / errors[0]),
            format!("n_delta {ns:?}"),
            format!("delta/a [{}]", fmt(&ratios)),
            format!("{:.1}s", elapsed.as_secs_f64()),
        ],
    )
}

fn criterion_9() -> Outcome {
    let p = Catalog::Linear.problem(DELTA);
    let matrix = p.operator.jacobian(&Vector::zeros(p.dim()));
    let mut notes = Vec::new();
    let mut ok = true;
    for a in [1e-3, 1.0, 1e3] {
        let v = solve_regularized(p.operator.as_ref(), a, &p.f_delta, None).map_err(|e| e.to_string())?;
        let gap = rel_gap(v.as_slice(), &oracle_solve(&matrix, a, &p.f_delta));
        ok &= gap <= 1e-10;
        notes.push(format!("a={a:e}: {gap:.2e}"));
    }
    verdict(ok, notes)
}

fn criterion_10() -> Outcome {
    let d = diagnostic_run(Catalog::Cubic);
    let report = check_error_recursion(&d.report.trace, &d.schedule, &d.report.v_records, d.n0 + 1);
    let worst = report
        .rows
        .iter()
        .filter_map(|r| Some(r.g_next? - r.g_next_bound?))
        .fold(f64::MIN, f64::max);
    verdict(
        report.recursion_ok() && report.rows.len() as u64 == d.n0 + 2,
        vec![format!(
            "n<={}: max(g_(n+1) - bound) = {worst:.3e}, tol {:.3e}",
            d.n0 + 1,
            report.tol
        )],
    )
}

fn verdict(ok: bool, notes: Vec<String>) -> Outcome {
    let text = notes.join("; ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("V-sequence residual nonincreasing, norm nondecreasing", criterion_1),
        ("||V_n|| <= ||y|| + delta/a_n", criterion_2),
        ("large-a limit and ||V_a|| bound", criterion_3),
        ("selected schedules satisfy all five conditions", criterion_4),
        ("linear DSM iterates equal V_n", criterion_5),
        ("discrepancy rule stops at first crossing, n_delta <= n0+1", criterion_6),
        ("g_n < a_n/lambda up to n0+1", criterion_7),
        ("convergence study as delta -> 0", criterion_8),
        ("regularized solve matches dense LU", criterion_9),
        ("error recursion for g_(n+1) on the cubic catalog", criterion_10),
    ];
    let start = Instant::now();
    let outcomes: Vec<(Outcome, Duration)> = criteria
        .iter()
        .map(|(_, f)| {
            let t = Instant::now();
            let outcome = panic::catch_unwind(*f).unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
            (outcome, t.elapsed())
        })
        .collect();

    let mut failures = 0;
    for (i, ((label, _), (outcome, took))) in criteria.iter().zip(&outcomes).enumerate() {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!(
            "acceptance {:>2} {status} [{:.1}s] {label}: {detail}",
            i + 1,
            took.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.1}s",
        criteria.len() - failures,
        start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
