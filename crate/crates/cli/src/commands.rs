//! The `run`, `verify` and `study` subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dsm_core::dsm::{
    check_error_recursion, check_initial_guess, convergence_study, init_u0, run, ErrorRecursionReport, StopKind,
    StopReason, StoppingRule, StudyError, StudyParams, StudyTable,
};
use dsm_core::export::sci;
use dsm_core::operators::{verify_monotone, MonotoneProblem};
use dsm_core::regsolve::{
    check_large_a, find_n_delta_v_bisect, v_sequence, write_v_records_csv, VSequenceChecks, LARGE_A_GRID,
};
use dsm_core::schedule::{a_priori_n0, check_conditions, default_bounds_radius, Schedule};

use crate::config::{ExperimentConfig, Format, ResolvedSchedule};

/// Process outcome that is not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Ran out of budget, or a verification check failed.
    Incomplete,
}

/// Steps of the V-sequence examined by `verify`.
const VERIFY_V_STEPS: u64 = 60;
/// Point pairs sampled by the monotonicity check.
const MONOTONE_PAIRS: usize = 200;

/// Joins an error chain, skipping causes already quoted by the message above them.
pub fn render(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_none_or(|prev| !prev.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a ExperimentConfig,
    schedule: &'a ResolvedSchedule,
    rule: &'a StoppingRule,
    n_delta: u64,
    stop_reason: StopReason,
    residual_final: f64,
    threshold: f64,
    error_vs_y: Option<f64>,
    n0: Option<u64>,
    warnings: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    error_recursion: Option<RecursionSummary>,
    u_final: &'a [f64],
}

#[derive(Serialize)]
struct RecursionSummary {
    n_limit: u64,
    increment_ok: bool,
    recursion_ok: bool,
    invariant_ok: bool,
    missing_from: Option<u64>,
}

impl From<&ErrorRecursionReport> for RecursionSummary {
    fn from(r: &ErrorRecursionReport) -> Self {
        Self {
            n_limit: r.n_limit,
            increment_ok: r.increment_ok(),
            recursion_ok: r.recursion_ok(),
            invariant_ok: r.invariant_ok(),
            missing_from: r.missing_from,
        }
    }
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let problem = cfg.build_problem()?;
    let resolved = cfg.resolve_schedule(&problem)?;
    let rule = cfg.stopping_rule(problem.delta);
    let dir = prepare_dir(cfg)?;
    let mut report = run(
        problem.operator.as_ref(),
        &resolved.schedule,
        &problem.f_delta,
        &rule,
        cfg.run.diagnostics,
    )?;
    report.attach_reference(&problem.y);

    let recursion = (cfg.run.diagnostics && report.n_delta > 0)
        .then(|| check_error_recursion(&report.trace, &resolved.schedule, &report.v_records, report.n_delta - 1));

    if cfg.output.wants(Format::Csv) {
        let mut w = create(dir, "trace.csv")?;
        report.trace.write_csv(&mut w)?;
        w.flush()?;
        if cfg.run.diagnostics {
            let mut w = create(dir, "v_sequence.csv")?;
            write_v_records_csv(&mut w, &report.v_records)?;
            w.flush()?;
        }
    }
    if cfg.output.wants(Format::Json) {
        let summary = RunSummary {
            config: cfg,
            schedule: &resolved,
            rule: &rule,
            n_delta: report.n_delta,
            stop_reason: report.stop_reason,
            residual_final: report.residual_final,
            threshold: report.threshold,
            error_vs_y: report.error_vs_y,
            n0: report.n0,
            warnings: &report.warnings,
            error_recursion: recursion.as_ref().map(RecursionSummary::from),
            u_final: report.u_final.as_slice(),
        };
        write_json(dir, "run_report.json", &summary)?;
    }

    println!(
        "stopped at n = {} ({:?}); residual {:.6e}, threshold {:.6e}, error vs y {:.6e}",
        report.n_delta,
        report.stop_reason,
        report.residual_final,
        report.threshold,
        report.error_vs_y.unwrap_or(f64::NAN)
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(match report.stop_reason {
        StopReason::Discrepancy | StopReason::APriori => Outcome::Success,
        StopReason::MaxIter => Outcome::Incomplete,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

struct Checks {
    rows: Vec<CheckRow>,
}

impl Checks {
    fn push(&mut self, check: impl Into<String>, passed: bool, detail: impl Into<String>) {
        let row = CheckRow {
            check: check.into(),
            passed,
            detail: detail.into(),
        };
        println!("{:<28} {:<4} {}", row.check, if row.passed { "PASS" } else { "FAIL" }, row.detail);
        self.rows.push(row);
    }

    fn fail(&mut self, check: &str, err: impl std::fmt::Display) {
        self.push(check, false, format!("error: {err}"));
    }
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    config: &'a ExperimentConfig,
    schedule: Option<&'a ResolvedSchedule>,
    all_passed: bool,
    checks: &'a [CheckRow],
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<Outcome> {
    let problem = cfg.build_problem()?;
    let dir = prepare_dir(cfg)?;
    let mut checks = Checks { rows: Vec::new() };
    let op = problem.operator.as_ref();
    let y_norm = problem.y.norm();
    let radius = cfg
        .schedule
        .radius
        .unwrap_or_else(|| default_bounds_radius(0.0, y_norm, cfg.schedule.c1));

    let m = verify_monotone(op, radius, MONOTONE_PAIRS, problem.seed);
    checks.push(
        "monotonicity",
        m.monotone,
        format!("{} pairs in radius {radius:.3e}, worst <F(u)-F(v), u-v> = {:.3e}", m.pairs, m.worst_value),
    );

    match check_large_a(op, &problem.f_delta, &LARGE_A_GRID) {
        Ok(r) => checks.push(
            "large_a_limit",
            r.passed(),
            format!(
                "relative gap {:.3e} at a = {:e}; norm bounds {}; monotone in a {}",
                r.limit_gap,
                LARGE_A_GRID[LARGE_A_GRID.len() - 1],
                r.norm_bounds_ok,
                r.monotone_in_a
            ),
        ),
        Err(e) => checks.fail("large_a_limit", e),
    }

    let resolved = match cfg.resolve_schedule(&problem) {
        Ok(r) => {
            checks.push(
                "schedule_selection",
                true,
                format!(
                    "d0 {:.6e}, lambda {:.6e}, M1 {:.4e}, M2 {:.4e}",
                    r.schedule.d0, r.schedule.lambda, r.m1, r.m2
                ),
            );
            Some(r)
        }
        Err(e) => {
            checks.fail("schedule_selection", render(&e));
            None
        }
    };

    if let Some(r) = &resolved {
        verify_with_schedule(cfg, &problem, r, &mut checks);
    }

    let all_passed = checks.rows.iter().all(|r| r.passed);
    if cfg.output.wants(Format::Csv) {
        let mut w = create(dir, "verify.csv")?;
        writeln!(w, "check,passed,detail")?;
        for r in &checks.rows {
            writeln!(w, "{},{},\"{}\"", r.check, r.passed, r.detail.replace('"', "'"))?;
        }
        w.flush()?;
    }
    if cfg.output.wants(Format::Json) {
        let summary = VerifySummary {
            config: cfg,
            schedule: resolved.as_ref(),
            all_passed,
            checks: &checks.rows,
        };
        write_json(dir, "verify_report.json", &summary)?;
    }
    let failed = checks.rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", checks.rows.len());
    Ok(if all_passed { Outcome::Success } else { Outcome::Incomplete })
}

fn verify_with_schedule(cfg: &ExperimentConfig, problem: &MonotoneProblem, r: &ResolvedSchedule, checks: &mut Checks) {
    let s: &Schedule = &r.schedule;
    let op = problem.operator.as_ref();
    let delta = problem.delta;
    let y_norm = problem.y.norm();

    match v_sequence(op, s, &problem.f_delta, VERIFY_V_STEPS) {
        Ok(recs) => {
            let c = VSequenceChecks::evaluate(&recs, y_norm, delta, r.misfit);
            checks.push(
                "v_sequence_monotone",
                c.h_increase_at.is_none() && c.g_decrease_at.is_none(),
                format!(
                    "n <= {VERIFY_V_STEPS}: residual rise at {:?}, norm drop at {:?}",
                    c.h_increase_at, c.g_decrease_at
                ),
            );
            checks.push(
                "v_sequence_bounds",
                c.norm_bound_violation_at.is_none()
                    && c.misfit_bound_violation_at.is_none()
                    && c.worst_identity_defect <= 1e-8,
                format!(
                    "norm bound violated at {:?}, misfit bound violated at {:?}, identity defect {:.2e}",
                    c.norm_bound_violation_at, c.misfit_bound_violation_at, c.worst_identity_defect
                ),
            );
        }
        Err(e) => checks.fail("v_sequence_monotone", e),
    }

    let report = check_conditions(s, r.misfit, s.y_norm_est, cfg.schedule.check_steps);
    for c in &report.checks {
        checks.push(
            format!("condition_{}", c.condition.name()),
            c.passed,
            format!(
                "{}; worst margin {:.3e} at n = {}, first violation {:?}",
                c.description, c.worst_margin, c.worst_index, c.first_violation
            ),
        );
    }

    let u0 = init_u0(op, &problem.f_delta, s.a0());
    match check_initial_guess(op, &problem.f_delta, &u0, s) {
        Ok(g) => checks.push(
            "initial_guess",
            g.within_misfit_bound && g.within_invariant_bound,
            format!(
                "g0 {:.4e}; misfit/a0 {:.4e}; a0/lambda {:.4e}",
                g.g0, g.misfit_bound, g.invariant_bound
            ),
        ),
        Err(e) => checks.fail("initial_guess", e),
    }

    if delta <= 0.0 {
        checks.push("v_crossing", true, "skipped: exact data");
        return;
    }
    let n0 = match a_priori_n0(s, delta, s.y_norm_est) {
        Ok(n0) => {
            checks.push("a_priori_index", true, format!("n0 = {n0}"));
            n0
        }
        Err(e) => {
            checks.fail("a_priori_index", e);
            return;
        }
    };

    let c_mid = s.c_mid();
    match find_n_delta_v_bisect(op, s, &problem.f_delta, c_mid, delta, cfg.run.n_cap.max(n0 + 1)) {
        Ok(x) => checks.push(
            "v_crossing",
            true,
            format!(
                "first n with ||F(V_n) - f_delta|| <= C delta: {} (h {:.4e}, previous {:?})",
                x.n, x.h, x.h_prev
            ),
        ),
        Err(e) => checks.fail("v_crossing", e),
    }

    if cfg.run.diagnostics {
        let rule = StoppingRule::max_iter(n0 + 2);
        match run(op, s, &problem.f_delta, &rule, true) {
            Ok(rep) => {
                let rec = check_error_recursion(&rep.trace, s, &rep.v_records, n0 + 1);
                checks.push(
                    "v_increment_bound",
                    rec.increment_ok(),
                    format!("n <= {}: first violation {:?}", n0 + 1, rec.increment_violation_at),
                );
                checks.push(
                    "error_recursion",
                    rec.recursion_ok(),
                    format!("first violation {:?}, tol {:.2e}", rec.recursion_violation_at, rec.tol),
                );
                checks.push(
                    "invariant_g_below_a_over_lambda",
                    rec.invariant_ok(),
                    format!("first violation {:?}", rec.invariant_violation_at),
                );
            }
            Err(e) => checks.fail("error_recursion", e),
        }
    }
}

#[derive(Serialize)]
struct StudySummary<'a> {
    config: &'a ExperimentConfig,
    deltas: &'a [f64],
    complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
    table: &'a StudyTable,
}

pub fn cmd_study(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<Outcome> {
    if deltas.is_empty() {
        bail!("no deltas: pass --deltas or set study.deltas");
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        bail!("deltas must be strictly decreasing, got {deltas:?}");
    }
    let gamma = cfg.schedule.gamma;
    if !(gamma > 0.0 && gamma < 1.0) {
        bail!("schedule.gamma: the study needs gamma strictly inside (0, 1), got {gamma}");
    }
    if cfg.run.rule != StopKind::Discrepancy {
        log::warn!("study always uses the discrepancy rule; run.rule is ignored");
    }
    let dir = prepare_dir(cfg)?;
    let params = StudyParams {
        c1: cfg.schedule.c1,
        gamma,
        n_cap: cfg.run.n_cap,
        seed: cfg.problem.seed,
    };
    let family = |delta: f64, seed: u64| cfg.problem.build_with(Some(delta), seed).map_err(|e| e.to_string());
    let policy = |p: &MonotoneProblem| {
        cfg.resolve_schedule(p)
            .map(|r| r.schedule)
            .map_err(|e| render(&e))
    };
    let (table, failure) = match convergence_study(family, policy, deltas, &params) {
        Ok(t) => (t, None),
        Err(StudyError::RunFailed { delta, message, partial }) => {
            (partial, Some(format!("run at delta = {delta:e} failed: {message}")))
        }
        Err(e) => return Err(e.into()),
    };

    if cfg.output.wants(Format::Csv) {
        let mut w = create(dir, "study.csv")?;
        table.write_csv(&mut w)?;
        w.flush()?;
    }
    if cfg.output.wants(Format::Json) {
        let summary = StudySummary {
            config: cfg,
            deltas,
            complete: failure.is_none(),
            failure: failure.clone(),
            table: &table,
        };
        write_json(dir, "study.json", &summary)?;
    }

    println!("{:>12} {:>10} {:>24} {:>24}", "delta", "n_delta", "error", "residual");
    for r in &table.rows {
        println!("{:>12} {:>10} {:>24} {:>24}", format!("{:e}", r.delta), r.n_delta, sci(r.error), sci(r.residual));
    }
    let v = &table.verdicts;
    println!(
        "error strictly decreasing: {:?}; n_delta nondecreasing: {:?}; delta/a decreasing: {:?}",
        v.error_strictly_decreasing, v.n_delta_nondecreasing, v.delta_over_a_decreasing
    );
    if let Some(f) = failure {
        bail!("{f}; {} completed rows written", table.rows.len());
    }
    Ok(Outcome::Success)
}
