//! Solutions `V_a` of the regularized equation `F(V) + aV = f_delta`, the
//! sequence `V_n` along a schedule, and the checks of their known
//! properties (norm bounds, monotone residuals, discrepancy crossing).

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::export::sci;
use crate::linalg::{reg_solve, LinalgError, Vector};
use crate::operators::MonotoneOperator;
use crate::schedule::Schedule;

pub const MAX_NEWTON_ITERS: usize = 200;
pub const MAX_HALVINGS: usize = 60;

/// Default grid for the large-`a` check.
pub const LARGE_A_GRID: [f64; 7] = [1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegSolveError {
    #[error("regularization parameter must be positive and finite, got {0}")]
    InvalidParameter(f64),
    #[error("dimension mismatch: operator has dim {expected}, vector has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinalgError),
    #[error(
        "no residual decrease after {MAX_HALVINGS} step halvings at iteration {iteration} \
         (residual {residual:e}); operator may violate monotonicity or smoothness"
    )]
    NoDecrease { iteration: usize, residual: f64 },
    #[error("Newton iteration cap {MAX_NEWTON_ITERS} reached with residual {residual:e}")]
    IterationCap { residual: f64 },
    #[error("at schedule index n = {n}: {source}")]
    AtIndex {
        n: u64,
        #[source]
        source: Box<RegSolveError>,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no index with h_n <= C delta = {threshold:e} among {len} records (last h_n = {last:e}); extend N")]
    NoCrossing { threshold: f64, last: f64, len: usize },
}

/// `1e-11 (1 + ||f_delta||)`
pub fn inner_tolerance(f_delta: &Vector) -> f64 {
    1e-11 * (1.0 + f_delta.norm())
}

#[derive(Debug, Clone)]
pub struct RegularizedSolution {
    pub v: Vector,
    pub newton_iters: usize,
    /// `||F(V) + aV - f_delta||`
    pub residual: f64,
}

fn regularized_residual(op: &dyn MonotoneOperator, a: f64, v: &Vector, f_delta: &Vector) -> Vector {
    let mut r = op.apply(v);
    r.axpy(a, v);
    r.axpy(-1.0, f_delta);
    r
}

/// Damped Newton for `F(V) + aV = f_delta`, started from `warm_start` or 0.
pub fn solve_regularized(
    op: &dyn MonotoneOperator,
    a: f64,
    f_delta: &Vector,
    warm_start: Option<&Vector>,
) -> Result<Vector, RegSolveError> {
    solve_regularized_detailed(op, a, f_delta, warm_start).map(|s| s.v)
}

pub fn solve_regularized_detailed(
    op: &dyn MonotoneOperator,
    a: f64,
    f_delta: &Vector,
    warm_start: Option<&Vector>,
) -> Result<RegularizedSolution, RegSolveError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(RegSolveError::InvalidParameter(a));
    }
    let d = op.dim();
    for v in std::iter::once(f_delta).chain(warm_start) {
        if v.dim() != d {
            return Err(RegSolveError::DimensionMismatch {
                expected: d,
                found: v.dim(),
            });
        }
    }
    let tol = inner_tolerance(f_delta);
    let mut v = warm_start.cloned().unwrap_or_else(|| Vector::zeros(d));
    let mut r = regularized_residual(op, a, &v, f_delta);
    let mut rn = r.norm();

    for iteration in 0..=MAX_NEWTON_ITERS {
        if rn <= tol {
            return Ok(RegularizedSolution {
                v,
                newton_iters: iteration,
                residual: rn,
            });
        }
        if iteration == MAX_NEWTON_ITERS {
            break;
        }
        let step = reg_solve(&op.jacobian(&v), a, &r.scaled(-1.0))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate = v.clone();
            candidate.axpy(t, &step);
            let rc = regularized_residual(op, a, &candidate, f_delta);
            let rcn = rc.norm();
            if rcn < rn {
                accepted = Some((candidate, rc, rcn));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((candidate, rc, rcn)) => {
                v = candidate;
                r = rc;
                rn = rcn;
            }
            None => {
                return Err(RegSolveError::NoDecrease {
                    iteration,
                    residual: rn,
                })
            }
        }
    }
    Err(RegSolveError::IterationCap { residual: rn })
}

/// One element of the sequence `V_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VSequenceRecord {
    pub n: u64,
    pub a_n: f64,
    pub v: Vector,
    /// `||F(V_n) - f_delta||`
    pub h: f64,
    /// `||V_n||`
    pub g_v: f64,
    pub newton_iters: usize,
}

impl VSequenceRecord {
    pub fn new(
        op: &dyn MonotoneOperator,
        n: u64,
        a_n: f64,
        f_delta: &Vector,
        solution: RegularizedSolution,
    ) -> Self {
        let h = op.apply(&solution.v).distance(f_delta);
        let g_v = solution.v.norm();
        Self {
            n,
            a_n,
            v: solution.v,
            h,
            g_v,
            newton_iters: solution.newton_iters,
        }
    }
}

/// `V_n` for `n = 0..=n_max`, each solve warm-started from the previous one.
pub fn v_sequence(
    op: &dyn MonotoneOperator,
    s: &Schedule,
    f_delta: &Vector,
    n_max: u64,
) -> Result<Vec<VSequenceRecord>, RegSolveError> {
    let mut records: Vec<VSequenceRecord> = Vec::with_capacity(n_max as usize + 1);
    for n in 0..=n_max {
        let a_n = s.a(n);
        let warm = records.last().map(|r| &r.v);
        let sol = solve_regularized_detailed(op, a_n, f_delta, warm).map_err(|e| RegSolveError::AtIndex {
            n,
            source: Box::new(e),
        })?;
        records.push(VSequenceRecord::new(op, n, a_n, f_delta, sol));
    }
    Ok(records)
}

/// Row of the large-`a` check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LargeARow {
    pub a: f64,
    pub v_norm: f64,
    /// `||f_delta - F(0)|| / a`
    pub norm_bound: f64,
    /// `||F(V_a) - f_delta||`
    pub residual: f64,
    pub bound_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LargeAReport {
    pub rows: Vec<LargeARow>,
    pub f0_misfit: f64,
    /// `| ||F(V_a) - f_delta|| - ||F(0) - f_delta|| | / ||F(0) - f_delta||` at the largest `a`.
    pub limit_gap: f64,
    pub limit_ok: bool,
    pub norm_bounds_ok: bool,
    /// `a -> ||F(V_a) - f_delta||` nondecreasing on the grid.
    pub monotone_in_a: bool,
}

impl LargeAReport {
    pub fn passed(&self) -> bool {
        self.limit_ok && self.norm_bounds_ok && self.monotone_in_a
    }
}

/// Checks `||V_a|| <= ||f_delta - F(0)||/a` on the grid and that the
/// residual approaches `||F(0) - f_delta||` at the largest `a`.
pub fn check_large_a(
    op: &dyn MonotoneOperator,
    f_delta: &Vector,
    a_values: &[f64],
) -> Result<LargeAReport, RegSolveError> {
    if a_values.is_empty() || a_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RegSolveError::InvalidInput("a_values must be nonempty and strictly increasing".into()));
    }
    let a_max = *a_values.last().expect("nonempty");
    if a_max < 1e6 {
        return Err(RegSolveError::InvalidInput(format!(
            "largest a must be at least 1e6, got {a_max:e}"
        )));
    }
    let f0 = op.apply(&Vector::zeros(op.dim()));
    let f0_misfit = f0.distance(f_delta);

    let mut rows = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let sol = solve_regularized_detailed(op, a, f_delta, None)?;
        let v_norm = sol.v.norm();
        let norm_bound = f0_misfit / a;
        // a||V||^2 <= <f_delta - F(0), V> - <r, V> with r the solver residual.
        let bound_ok = v_norm <= norm_bound + sol.residual / a + 1e-12 * norm_bound;
        let residual = op.apply(&sol.v).distance(f_delta);
        rows.push(LargeARow {
            a,
            v_norm,
            norm_bound,
            residual,
            bound_ok,
        });
    }
    let last = rows.last().expect("nonempty");
    let limit_gap = if f0_misfit > 0.0 {
        (last.residual - f0_misfit).abs() / f0_misfit
    } else {
        last.residual
    };
    let slack = 1e-8 * (1.0 + f0_misfit);
    let monotone_in_a = rows.windows(2).all(|w| w[1].residual + slack >= w[0].residual);
    Ok(LargeAReport {
        norm_bounds_ok: rows.iter().all(|r| r.bound_ok),
        limit_ok: limit_gap < 1e-3,
        limit_gap,
        monotone_in_a,
        f0_misfit,
        rows,
    })
}

/// First index with `h_n <= C delta`.
pub fn find_n_delta_v(records: &[VSequenceRecord], c: f64, delta: f64) -> Result<usize, RegSolveError> {
    if records.is_empty() {
        return Err(RegSolveError::InvalidInput("no records".into()));
    }
    let threshold = c * delta;
    records
        .iter()
        .position(|r| r.h <= threshold)
        .ok_or_else(|| RegSolveError::NoCrossing {
            threshold,
            last: records.last().map_or(f64::NAN, |r| r.h),
            len: records.len(),
        })
}

/// Crossing found by [`find_n_delta_v_bisect`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossing {
    pub n: u64,
    /// `h_n <= C delta`
    pub h: f64,
    /// `h_{n-1} > C delta`; absent when `n = 0`.
    pub h_prev: Option<f64>,
    pub solves: usize,
}

/// First `n <= n_max` with `h_n <= C delta`, located by bisection on the
/// monotone sequence `h_n` with independent solves, so large indices cost
/// `O(log n_max)` solves instead of a full sweep.
pub fn find_n_delta_v_bisect(
    op: &dyn MonotoneOperator,
    s: &Schedule,
    f_delta: &Vector,
    c: f64,
    delta: f64,
    n_max: u64,
) -> Result<Crossing, RegSolveError> {
    let threshold = c * delta;
    let mut solves = 0;
    let mut h_at = |n: u64| -> Result<f64, RegSolveError> {
        solves += 1;
        let v = solve_regularized(op, s.a(n), f_delta, None).map_err(|e| RegSolveError::AtIndex {
            n,
            source: Box::new(e),
        })?;
        Ok(op.apply(&v).distance(f_delta))
    };
    let h0 = h_at(0)?;
    if h0 <= threshold {
        return Ok(Crossing {
            n: 0,
            h: h0,
            h_prev: None,
            solves: 1,
        });
    }
    let h_end = h_at(n_max)?;
    if h_end > threshold {
        return Err(RegSolveError::NoCrossing {
            threshold,
            last: h_end,
            len: n_max as usize + 1,
        });
    }
    // Invariant: h(lo) > threshold >= h(hi).
    let (mut lo, mut hi, mut h_lo, mut h_hi) = (0, n_max, h0, h_end);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let h = h_at(mid)?;
        if h <= threshold {
            hi = mid;
            h_hi = h;
        } else {
            lo = mid;
            h_lo = h;
        }
    }
    Ok(Crossing {
        n: hi,
        h: h_hi,
        h_prev: Some(h_lo),
        solves,
    })
}

/// Pass/fail summary of the properties every V-sequence must have.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VSequenceChecks {
    /// First `n` with `h_{n+1} > h_n + slack`.
    pub h_increase_at: Option<u64>,
    /// First `n` with `||V_{n+1}|| < ||V_n|| - slack`.
    pub g_decrease_at: Option<u64>,
    /// First `n` with `||V_n|| > ||y|| + delta/a_n + slack`.
    pub norm_bound_violation_at: Option<u64>,
    /// First `n` with `h_n > ||F(0) - f_delta|| + slack`.
    pub misfit_bound_violation_at: Option<u64>,
    /// Largest `|h_n - a_n ||V_n|| | / (1 + h_n)`.
    pub worst_identity_defect: f64,
    pub slack: f64,
}

impl VSequenceChecks {
    pub fn passed(&self) -> bool {
        self.h_increase_at.is_none()
            && self.g_decrease_at.is_none()
            && self.norm_bound_violation_at.is_none()
            && self.misfit_bound_violation_at.is_none()
            && self.worst_identity_defect <= 1e-8
    }

    /// Monotonicity uses slack `1e-8 (1 + h_0)`; the norm bound uses `1e-8`.
    pub fn evaluate(records: &[VSequenceRecord], y_norm: f64, delta: f64, f0_misfit: f64) -> Self {
        let h0 = records.first().map_or(0.0, |r| r.h);
        let slack = 1e-8 * (1.0 + h0);
        let mut checks = Self {
            h_increase_at: None,
            g_decrease_at: None,
            norm_bound_violation_at: None,
            misfit_bound_violation_at: None,
            worst_identity_defect: 0.0,
            slack,
        };
        for w in records.windows(2) {
            if checks.h_increase_at.is_none() && w[1].h > w[0].h + slack {
                checks.h_increase_at = Some(w[0].n);
            }
            if checks.g_decrease_at.is_none() && w[1].g_v + slack < w[0].g_v {
                checks.g_decrease_at = Some(w[0].n);
            }
        }
        for r in records {
            if checks.norm_bound_violation_at.is_none() && r.g_v > y_norm + delta / r.a_n + 1e-8 {
                checks.norm_bound_violation_at = Some(r.n);
            }
            if checks.misfit_bound_violation_at.is_none() && r.h > f0_misfit + slack {
                checks.misfit_bound_violation_at = Some(r.n);
            }
            let defect = (r.h - r.a_n * r.g_v).abs() / (1.0 + r.h);
            checks.worst_identity_defect = checks.worst_identity_defect.max(defect);
        }
        checks
    }
}

/// CSV with columns `n,a_n,h_n,g_n,newton_iters`.
pub fn write_v_records_csv<W: Write>(mut out: W, records: &[VSequenceRecord]) -> io::Result<()> {
    writeln!(out, "n,a_n,h_n,g_n,newton_iters")?;
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.n, sci(r.a_n), sci(r.h), sci(r.g_v), r.newton_iters)?;
    }
    Ok(())
}
