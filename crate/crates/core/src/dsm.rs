//! The iteration `u_{n+1} = u_n - (F'(u_n) + a_n I)^{-1} (F(u_n) + a_n u_n - f_delta)`,
//! its stopping rules, invariant diagnostics and the small-noise study.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::sci;
use crate::linalg::{reg_solve, LinalgError, ShiftedSystem, Vector};
use crate::operators::{estimate_bounds, MonotoneOperator, MonotoneProblem, OperatorBounds, OperatorError};
use crate::regsolve::{solve_regularized, solve_regularized_detailed, RegSolveError, VSequenceRecord};
use crate::schedule::{a_priori_n0, default_bounds_radius, select_constants_for_family, Schedule, ScheduleError};

/// Consecutive steps with residual above `DIVERGENCE_FACTOR * r_0` that trigger a warning.
pub const DIVERGENCE_STREAK: usize = 10;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DsmError {
    #[error("linear solve failed at n = {n}: {source}")]
    Linear {
        n: u64,
        #[source]
        source: LinalgError,
    },
    #[error("regularized solve failed at n = {n}: {source}")]
    Regularized {
        n: u64,
        #[source]
        source: RegSolveError,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("iterate became non-finite at n = {n}")]
    NonFinite { n: u64 },
    #[error("invalid stopping rule: {0}")]
    InvalidRule(String),
    #[error("dimension mismatch: operator has dim {expected}, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Discrepancy,
    APriori,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub kind: StopKind,
    #[serde(rename = "C1")]
    pub c1: f64,
    pub gamma: f64,
    /// Noise level; may be 0 only for `max_iter`.
    pub delta: f64,
    pub n_cap: u64,
}

impl StoppingRule {
    pub fn discrepancy(c1: f64, gamma: f64, delta: f64, n_cap: u64) -> Self {
        Self {
            kind: StopKind::Discrepancy,
            c1,
            gamma,
            delta,
            n_cap,
        }
    }

    pub fn a_priori(delta: f64, n_cap: u64) -> Self {
        Self {
            kind: StopKind::APriori,
            c1: 2.0,
            gamma: 1.0,
            delta,
            n_cap,
        }
    }

    pub fn max_iter(n_cap: u64) -> Self {
        Self {
            kind: StopKind::MaxIter,
            c1: 2.0,
            gamma: 1.0,
            delta: 0.0,
            n_cap,
        }
    }

    /// `C1 delta^gamma`
    pub fn threshold(&self) -> f64 {
        self.c1 * self.delta.powf(self.gamma)
    }

    pub fn validate(&self) -> Result<(), DsmError> {
        if !(self.c1 > 1.0 && self.c1.is_finite()) {
            return Err(DsmError::InvalidRule(format!("C1 must exceed 1, got {}", self.c1)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DsmError::InvalidRule(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.n_cap == 0 {
            return Err(DsmError::InvalidRule("n_cap must be positive".into()));
        }
        let needs_delta = self.kind != StopKind::MaxIter;
        if !(self.delta.is_finite() && self.delta >= 0.0) || (needs_delta && self.delta <= 0.0) {
            return Err(DsmError::InvalidRule(format!(
                "{:?} rule needs a positive finite delta, got {}",
                self.kind, self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Discrepancy,
    APriori,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub n: u64,
    pub a_n: f64,
    /// `||F(u_n) - f_delta||`
    pub residual: f64,
    /// `||u_{n+1} - u_n||`; absent on the last record.
    pub step_norm: Option<f64>,
    /// `||u_n - V_n||`, diagnostics only.
    pub g: Option<f64>,
    /// The iterate itself, kept only in diagnostics mode.
    pub u: Option<Vector>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationTrace {
    pub records: Vec<TraceRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, n: u64) -> Option<&TraceRecord> {
        self.records.get(n as usize).filter(|r| r.n == n)
    }

    /// CSV with columns `n,a_n,residual,step_norm,g_n`; absent values are empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "n,a_n,residual,step_norm,g_n")?;
        let opt = |x: Option<f64>| x.map(sci).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.n,
                sci(r.a_n),
                sci(r.residual),
                opt(r.step_norm),
                opt(r.g)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub n_delta: u64,
    pub u_final: Vector,
    pub residual_final: f64,
    /// `||u_{n_delta} - y||`, set by [`RunReport::attach_reference`].
    pub error_vs_y: Option<f64>,
    pub stop_reason: StopReason,
    /// `C1 delta^gamma` of the rule that was used.
    pub threshold: f64,
    /// A-priori index for the rule's delta, when it exists.
    pub n0: Option<u64>,
    pub trace: IterationTrace,
    /// `V_n` for every recorded `n`, diagnostics only.
    pub v_records: Vec<VSequenceRecord>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn attach_reference(&mut self, y: &Vector) {
        self.error_vs_y = Some(self.u_final.distance(y));
    }

    /// `a_{n_delta}`
    pub fn a_final(&self) -> f64 {
        self.trace.records.last().map_or(f64::NAN, |r| r.a_n)
    }
}

/// The starting point `u_0 = 0`.
pub fn init_u0(op: &dyn MonotoneOperator, _f_delta: &Vector, _a0: f64) -> Vector {
    Vector::zeros(op.dim())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialGuessReport {
    /// `||u_0 - V_0||`
    pub g0: f64,
    /// `||F(0) - f_delta|| / a_0`
    pub misfit_bound: f64,
    /// `a_0 / lambda`
    pub invariant_bound: f64,
    pub within_misfit_bound: bool,
    pub within_invariant_bound: bool,
}

/// Solves for `V_0` and compares `g_0` with both of its bounds.
pub fn check_initial_guess(
    op: &dyn MonotoneOperator,
    f_delta: &Vector,
    u0: &Vector,
    s: &Schedule,
) -> Result<InitialGuessReport, RegSolveError> {
    let a0 = s.a0();
    let sol = solve_regularized_detailed(op, a0, f_delta, None)?;
    let g0 = u0.distance(&sol.v);
    let misfit = op.apply(&Vector::zeros(op.dim())).distance(f_delta);
    let misfit_bound = misfit / a0;
    let invariant_bound = a0 / s.lambda;
    Ok(InitialGuessReport {
        g0,
        misfit_bound,
        invariant_bound,
        within_misfit_bound: g0 <= misfit_bound + sol.residual / a0,
        within_invariant_bound: g0 < invariant_bound,
    })
}

/// Flags residual growth beyond `DIVERGENCE_FACTOR * r_0` for
/// `DIVERGENCE_STREAK` consecutive steps.
#[derive(Debug, Clone, Default)]
pub struct DivergenceMonitor {
    r0: Option<f64>,
    streak: usize,
}

impl DivergenceMonitor {
    /// Returns a warning exactly once per streak, when it reaches the limit.
    pub fn observe(&mut self, n: u64, residual: f64) -> Option<String> {
        let Some(r0) = self.r0 else {
            self.r0 = Some(residual);
            return None;
        };
        if residual <= DIVERGENCE_FACTOR * r0 {
            self.streak = 0;
            return None;
        }
        self.streak += 1;
        (self.streak == DIVERGENCE_STREAK).then(|| {
            format!(
                "residual exceeded {DIVERGENCE_FACTOR} x initial for {DIVERGENCE_STREAK} consecutive steps \
                 ending at n = {n}; schedule conditions may be violated"
            )
        })
    }
}

/// One undamped step of the scheme.
pub fn dsm_step(op: &dyn MonotoneOperator, u_n: &Vector, a_n: f64, f_delta: &Vector) -> Result<Vector, LinalgError> {
    let fu = op.apply(u_n);
    step_from(op, u_n, &fu, a_n, f_delta, None)
}

fn step_from(
    op: &dyn MonotoneOperator,
    u: &Vector,
    fu: &Vector,
    a: f64,
    f_delta: &Vector,
    shifted: Option<&ShiftedSystem>,
) -> Result<Vector, LinalgError> {
    let mut w = fu.clone();
    w.axpy(a, u);
    w.axpy(-1.0, f_delta);
    let z = match shifted {
        Some(sys) => sys.solve(a, &w)?,
        None => reg_solve(&op.jacobian(u), a, &w)?,
    };
    let mut next = u.clone();
    next.axpy(-1.0, &z);
    Ok(next)
}

/// Iterates from `u_0 = 0` until the rule fires. Affine operators factor
/// their constant Jacobian once.
pub fn run(
    op: &dyn MonotoneOperator,
    s: &Schedule,
    f_delta: &Vector,
    rule: &StoppingRule,
    diagnostics: bool,
) -> Result<RunReport, DsmError> {
    rule.validate()?;
    s.validate()?;
    if f_delta.dim() != op.dim() {
        return Err(DsmError::DimensionMismatch {
            expected: op.dim(),
            found: f_delta.dim(),
        });
    }
    let threshold = rule.threshold();
    let n0 = if rule.delta > 0.0 {
        match a_priori_n0(s, rule.delta, s.y_norm_est) {
            Ok(n0) => Some(n0),
            Err(e) if rule.kind == StopKind::APriori => return Err(e.into()),
            Err(_) => None,
        }
    } else {
        None
    };
    let n_stop = match (rule.kind, n0) {
        (StopKind::APriori, Some(n0)) => (n0 + 1).min(rule.n_cap),
        _ => rule.n_cap,
    };
    let shifted = op.is_affine().then(|| ShiftedSystem::new(&op.jacobian(&Vector::zeros(op.dim()))));

    let mut u = init_u0(op, f_delta, s.a0());
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut v_records: Vec<VSequenceRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut monitor = DivergenceMonitor::default();
    let mut n = 0_u64;

    let stop_reason = loop {
        let a_n = s.a(n);
        let fu = op.apply(&u);
        let residual = fu.distance(f_delta);
        if !residual.is_finite() || !u.is_finite() {
            return Err(DsmError::NonFinite { n });
        }
        if let Some(msg) = monitor.observe(n, residual) {
            log::warn!("{msg}");
            warnings.push(msg);
        }

        let mut g = None;
        if diagnostics {
            let warm = v_records.last().map(|r| &r.v);
            let sol = solve_regularized_detailed(op, a_n, f_delta, warm)
                .map_err(|source| DsmError::Regularized { n, source })?;
            g = Some(u.distance(&sol.v));
            v_records.push(VSequenceRecord::new(op, n, a_n, f_delta, sol));
        }
        records.push(TraceRecord {
            n,
            a_n,
            residual,
            step_norm: None,
            g,
            u: diagnostics.then(|| u.clone()),
        });

        if rule.kind == StopKind::Discrepancy && residual <= threshold {
            break StopReason::Discrepancy;
        }
        if n >= n_stop {
            break if rule.kind == StopKind::APriori && n0.is_some_and(|n0| n == n0 + 1) {
                StopReason::APriori
            } else {
                StopReason::MaxIter
            };
        }

        let next = step_from(op, &u, &fu, a_n, f_delta, shifted.as_ref()).map_err(|source| DsmError::Linear { n, source })?;
        if let Some(last) = records.last_mut() {
            last.step_norm = Some(next.distance(&u));
        }
        u = next;
        n += 1;
        if n.is_multiple_of(100_000) {
            log::debug!("n = {n}, residual = {residual:.6e}");
        }
    };

    let residual_final = records.last().map_or(f64::NAN, |r| r.residual);
    log::info!("stopped at n = {n} ({stop_reason:?}), residual {residual_final:.6e}, threshold {threshold:.6e}");
    Ok(RunReport {
        n_delta: n,
        u_final: u,
        residual_final,
        error_vs_y: None,
        stop_reason,
        threshold,
        n0,
        trace: IterationTrace { records },
        v_records,
        warnings,
    })
}

/// Indices of a trace that break first-crossing semantics for `threshold`:
/// earlier residuals at or below it, or a final residual above it.
pub fn crossing_violations(trace: &IterationTrace, threshold: f64) -> Vec<u64> {
    let Some((last, earlier)) = trace.records.split_last() else {
        return Vec::new();
    };
    let mut bad: Vec<u64> = earlier.iter().filter(|r| r.residual <= threshold).map(|r| r.n).collect();
    if last.residual > threshold {
        bad.push(last.n);
    }
    bad
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecursionRow {
    pub n: u64,
    /// `||V_n - V_{n+1}||` and its bound `((a_n - a_{n+1})/a_{n+1}) ||V_n||`.
    pub v_increment: Option<f64>,
    pub v_increment_bound: Option<f64>,
    /// `g_{n+1}` and its bound `(c0/a_n) g_n^2 + ((a_n - a_{n+1})/a_{n+1}) c1`.
    pub g_next: Option<f64>,
    pub g_next_bound: Option<f64>,
    /// `g_n` and `a_n / lambda`.
    pub g: f64,
    pub g_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecursionReport {
    pub rows: Vec<RecursionRow>,
    /// `1e-8 (1 + g_0)`
    pub tol: f64,
    pub n_limit: u64,
    /// First `n <= n_limit` whose data is missing from the trace or the V records.
    pub missing_from: Option<u64>,
    pub increment_violation_at: Option<u64>,
    pub recursion_violation_at: Option<u64>,
    pub invariant_violation_at: Option<u64>,
}

impl ErrorRecursionReport {
    pub fn increment_ok(&self) -> bool {
        self.missing_from.is_none() && self.increment_violation_at.is_none()
    }

    pub fn recursion_ok(&self) -> bool {
        self.missing_from.is_none() && self.recursion_violation_at.is_none()
    }

    pub fn invariant_ok(&self) -> bool {
        self.missing_from.is_none() && self.invariant_violation_at.is_none()
    }

    pub fn passed(&self) -> bool {
        self.increment_ok() && self.recursion_ok() && self.invariant_ok()
    }
}

/// `||V_n - V_{n+1}|| <= ((a_n - a_{n+1})/a_{n+1}) ||V_n|| + 1e-8 (1 + ||V_n||)`
/// for consecutive records; returns the first failing `n`.
pub fn check_v_increments(v_records: &[VSequenceRecord]) -> Option<u64> {
    v_records.windows(2).find_map(|w| {
        let (inc, bound) = v_increment(&w[0], &w[1]);
        (inc > bound + 1e-8 * (1.0 + w[0].g_v)).then_some(w[0].n)
    })
}

fn v_increment(cur: &VSequenceRecord, next: &VSequenceRecord) -> (f64, f64) {
    let ratio = (cur.a_n - next.a_n) / next.a_n;
    (cur.v.distance(&next.v), ratio * cur.g_v)
}

/// Checks, for every `n <= n_limit`, the V-increment bound, the error
/// recursion for `g_{n+1}` and the invariant `g_n < a_n / lambda`.
/// Rows need `g_{n+1}` and `V_{n+1}`, so the run must reach `n_limit + 1`.
pub fn check_error_recursion(
    trace: &IterationTrace,
    s: &Schedule,
    v_records: &[VSequenceRecord],
    n_limit: u64,
) -> ErrorRecursionReport {
    let g_at = |n: u64| trace.get(n).and_then(|r| r.g);
    let v_at = |n: u64| v_records.get(n as usize).filter(|r| r.n == n);
    let g0 = g_at(0).unwrap_or(0.0);
    let tol = 1e-8 * (1.0 + g0);
    let mut report = ErrorRecursionReport {
        rows: Vec::new(),
        tol,
        n_limit,
        missing_from: None,
        increment_violation_at: None,
        recursion_violation_at: None,
        invariant_violation_at: None,
    };
    for n in 0..=n_limit {
        let (Some(g), Some(v)) = (g_at(n), v_at(n)) else {
            report.missing_from = Some(n);
            break;
        };
        let a_n = s.a(n);
        let a_next = s.a(n + 1);
        let ratio = (a_n - a_next) / a_next;
        let next_v = v_at(n + 1);
        let (v_increment, v_increment_bound) = match next_v {
            Some(nv) => {
                let (i, b) = v_increment(v, nv);
                (Some(i), Some(b))
            }
            None => (None, None),
        };
        let g_next = g_at(n + 1);
        let g_next_bound = g_next.map(|_| s.c0 / a_n * g * g + ratio * s.c1);
        let row = RecursionRow {
            n,
            v_increment,
            v_increment_bound,
            g_next,
            g_next_bound,
            g,
            g_limit: a_n / s.lambda,
        };
        if report.missing_from.is_none() && (g_next.is_none() || next_v.is_none()) {
            report.missing_from = Some(n + 1);
        }
        if let (Some(i), Some(b)) = (row.v_increment, row.v_increment_bound) {
            if report.increment_violation_at.is_none() && i > b + 1e-8 * (1.0 + v.g_v) {
                report.increment_violation_at = Some(n);
            }
        }
        if let (Some(gn), Some(b)) = (row.g_next, row.g_next_bound) {
            if report.recursion_violation_at.is_none() && gn > b + tol {
                report.recursion_violation_at = Some(n);
            }
        }
        if report.invariant_violation_at.is_none() && row.g >= row.g_limit {
            report.invariant_violation_at = Some(n);
        }
        report.rows.push(row);
    }
    report
}

/// How the schedule constants are obtained when not given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoScheduleOptions {
    #[serde(rename = "C1")]
    pub c_stop: f64,
    pub gamma: f64,
    /// Defaults to [`estimate_y_norm`].
    pub y_norm_est: Option<f64>,
    /// Radius for the bound estimates; defaults to [`default_bounds_radius`].
    pub radius: Option<f64>,
    pub samples: usize,
    pub d: f64,
    pub b: f64,
}

impl AutoScheduleOptions {
    pub fn new(c_stop: f64, gamma: f64) -> Self {
        Self {
            c_stop,
            gamma,
            y_norm_est: None,
            radius: None,
            samples: 16,
            d: 1.0,
            b: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutoSchedule {
    pub schedule: Schedule,
    pub bounds: OperatorBounds,
    pub y_norm_est: f64,
    /// `||f_delta - F(0)||`
    pub misfit: f64,
}

/// Largest number of decades [`estimate_y_norm`] descends.
pub const Y_NORM_DECADES: usize = 24;

/// `||V_a||` at the first `a = a_start 10^{-k}` with `||F(V_a) - f_delta|| <= C delta`.
/// Since `||V_a||` grows as `a` decreases towards the noise level, this
/// approximates `||y||` from the data alone.
pub fn estimate_y_norm(
    op: &dyn MonotoneOperator,
    f_delta: &Vector,
    delta: f64,
    c_mid: f64,
    a_start: f64,
) -> Result<f64, RegSolveError> {
    if !(a_start > 0.0 && a_start.is_finite()) {
        return Err(RegSolveError::InvalidParameter(a_start));
    }
    let mut a = a_start;
    let mut v: Option<Vector> = None;
    for _ in 0..Y_NORM_DECADES {
        let next = solve_regularized(op, a, f_delta, v.as_ref())?;
        let h = op.apply(&next).distance(f_delta);
        v = Some(next);
        if h <= c_mid * delta {
            break;
        }
        a *= 0.1;
    }
    Ok(v.map_or(0.0, |v| v.norm()))
}

/// Estimates `||y||` (unless given), the operator bounds on a ball of the
/// containment radius around 0, and selects the schedule constants.
pub fn auto_schedule(
    op: &dyn MonotoneOperator,
    f_delta: &Vector,
    delta: f64,
    opts: &AutoScheduleOptions,
) -> Result<AutoSchedule, DsmError> {
    let u0 = Vector::zeros(op.dim());
    let misfit = op.apply(&u0).distance(f_delta);
    let c_mid = 0.5 * (opts.c_stop + 1.0);
    let y_norm_est = match opts.y_norm_est {
        Some(y) => y,
        None => {
            let a_start = op.jacobian(&u0).spectral_norm(200).0.max(misfit).max(1e-12);
            estimate_y_norm(op, f_delta, delta, c_mid, a_start)
                .map_err(|source| DsmError::Regularized { n: 0, source })?
        }
    };
    let radius = opts
        .radius
        .unwrap_or_else(|| default_bounds_radius(0.0, y_norm_est, opts.c_stop));
    let bounds = estimate_bounds(op, &u0, radius, opts.samples)?;
    let schedule = select_constants_for_family(&bounds, y_norm_est, misfit, opts.c_stop, opts.gamma, opts.d, opts.b)?;
    Ok(AutoSchedule {
        schedule,
        bounds,
        y_norm_est,
        misfit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub delta: f64,
    pub seed: u64,
    pub n_delta: u64,
    /// `||u_{n_delta} - y||`
    pub error: f64,
    pub residual: f64,
    pub a_n_delta: f64,
    pub delta_over_a: f64,
    pub stop_reason: StopReason,
    /// `a_0 / lambda` of the schedule used for this row.
    pub a0_over_lambda: f64,
}

/// Trend verdicts; `None` when fewer than two rows exist.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyVerdicts {
    pub error_strictly_decreasing: Option<bool>,
    pub n_delta_nondecreasing: Option<bool>,
    pub delta_over_a_decreasing: Option<bool>,
    pub final_over_first_error: Option<f64>,
    pub all_discrepancy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub verdicts: StudyVerdicts,
}

impl StudyTable {
    fn from_rows(rows: Vec<StudyRow>) -> Self {
        let trend = |f: &dyn Fn(&StudyRow, &StudyRow) -> bool| {
            (rows.len() >= 2).then(|| rows.windows(2).all(|w| f(&w[0], &w[1])))
        };
        let verdicts = StudyVerdicts {
            error_strictly_decreasing: trend(&|p, q| q.error < p.error),
            n_delta_nondecreasing: trend(&|p, q| q.n_delta >= p.n_delta),
            delta_over_a_decreasing: trend(&|p, q| q.delta_over_a < p.delta_over_a),
            final_over_first_error: (rows.len() >= 2).then(|| rows[rows.len() - 1].error / rows[0].error),
            all_discrepancy: rows.iter().all(|r| r.stop_reason == StopReason::Discrepancy),
        };
        Self { rows, verdicts }
    }

    /// CSV with columns `delta,n_delta,error,residual,seed,delta_over_a`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "delta,n_delta,error,residual,seed,delta_over_a")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                sci(r.delta),
                r.n_delta,
                sci(r.error),
                sci(r.residual),
                r.seed,
                sci(r.delta_over_a)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study input: {0}")]
    Invalid(String),
    #[error("run at delta = {delta:e} failed: {message}; {} completed rows kept", partial.rows.len())]
    RunFailed {
        delta: f64,
        message: String,
        partial: StudyTable,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    #[serde(rename = "C1")]
    pub c1: f64,
    pub gamma: f64,
    pub n_cap: u64,
    pub seed: u64,
}

/// For each `delta` (strictly decreasing) builds the noisy problem,
/// reselects the schedule and runs the discrepancy rule. Rows run in
/// parallel and are reported in `delta` order.
pub fn convergence_study<P, S>(
    problem_family: P,
    schedule_policy: S,
    deltas: &[f64],
    params: &StudyParams,
) -> Result<StudyTable, StudyError>
where
    P: Fn(f64, u64) -> Result<MonotoneProblem, String> + Sync,
    S: Fn(&MonotoneProblem) -> Result<Schedule, String> + Sync,
{
    if deltas.is_empty() {
        return Err(StudyError::Invalid("no deltas given".into()));
    }
    if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(StudyError::Invalid("deltas must be positive and finite".into()));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(StudyError::Invalid("deltas must be strictly decreasing".into()));
    }
    if !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(StudyError::Invalid(format!(
            "gamma must lie strictly inside (0, 1), got {}",
            params.gamma
        )));
    }
    let results: Vec<Result<StudyRow, String>> = deltas
        .par_iter()
        .map(|&delta| {
            let problem = problem_family(delta, params.seed)?;
            let s = schedule_policy(&problem)?;
            let rule = StoppingRule::discrepancy(params.c1, params.gamma, delta, params.n_cap);
            let report = run(problem.operator.as_ref(), &s, &problem.f_delta, &rule, false).map_err(|e| e.to_string())?;
            let a_n_delta = report.a_final();
            log::info!("study row delta = {delta:e}: n_delta = {}", report.n_delta);
            Ok(StudyRow {
                delta,
                seed: params.seed,
                n_delta: report.n_delta,
                error: report.u_final.distance(&problem.y),
                residual: report.residual_final,
                a_n_delta,
                delta_over_a: delta / a_n_delta,
                stop_reason: report.stop_reason,
                a0_over_lambda: s.a0() / s.lambda,
            })
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut failure = None;
    for (delta, r) in deltas.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(message) if failure.is_none() => failure = Some((*delta, message)),
            Err(_) => {}
        }
    }
    let table = StudyTable::from_rows(rows);
    match failure {
        Some((delta, message)) => Err(StudyError::RunFailed {
            delta,
            message,
            partial: table,
        }),
        None => Ok(table),
    }
}
