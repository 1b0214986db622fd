//! The regularization sequence `a_n = d0 / (d + n)^b`, constructive choice of
//! `lambda` and `a_0`, and numerical checks of the conditions the
//! convergence argument needs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operators::OperatorBounds;

/// Multiplier applied to the constructive `d0` to absorb errors in the
/// sampled bounds and in the `||y||` estimate.
pub const D0_SAFETY_FACTOR: f64 = 2.0;

/// Hard cap for the a-priori index search.
pub const A_PRIORI_CAP: u64 = 100_000_000;

/// Relative slack for inequalities that the construction meets with equality.
const ROUNDING_SLACK: f64 = 1e-12;

/// Floor for `M1` when the operator is (numerically) zero near `u0`.
const MIN_M1: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid schedule parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("no a-priori index: delta/a_0 = {ratio:e} already exceeds ||y||/(C-1) = {threshold:e}")]
    NoAprioriIndex { ratio: f64, threshold: f64 },
    #[error("a-priori index exceeds the cap {cap}; inputs are inconsistent")]
    AprioriCapExceeded { cap: u64 },
}

fn positive(name: &'static str, value: f64) -> Result<f64, ScheduleError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ScheduleError::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

fn nonnegative(name: &'static str, value: f64) -> Result<f64, ScheduleError> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ScheduleError::InvalidParameter {
            name,
            value,
            reason: "must be nonnegative and finite",
        })
    }
}

fn check_stop_constants(c_stop: f64, gamma: f64) -> Result<(), ScheduleError> {
    if !(c_stop > 1.0 && c_stop.is_finite()) {
        return Err(ScheduleError::InvalidParameter {
            name: "C1",
            value: c_stop,
            reason: "must be finite and > 1",
        });
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ScheduleError::InvalidParameter {
            name: "gamma",
            value: gamma,
            reason: "must lie in (0, 1]",
        });
    }
    Ok(())
}

/// Regularization schedule plus every constant the iteration and its
/// checks refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub d0: f64,
    /// Offset `d >= 1` in `(d + n)^b`.
    pub d: f64,
    /// Exponent `b` in `(0, 1]`.
    pub b: f64,
    pub lambda: f64,
    /// `M2 / 2`
    pub c0: f64,
    /// `||y|| (1 + 2/(C - 1))`
    pub c1: f64,
    /// Discrepancy constant `C1 > 1`; the crossing constant is `C = (C1 + 1)/2`.
    #[serde(rename = "C1")]
    pub c_stop: f64,
    pub gamma: f64,
    /// Provenance: the `M1` estimate used for `lambda`.
    pub m1: f64,
    /// Provenance: the `||y||` estimate used for `lambda` and `c1`.
    pub y_norm_est: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        positive("d0", self.d0)?;
        if !(self.d >= 1.0 && self.d.is_finite()) {
            return Err(ScheduleError::InvalidParameter {
                name: "d",
                value: self.d,
                reason: "must be finite and >= 1",
            });
        }
        if !(self.b > 0.0 && self.b <= 1.0) {
            return Err(ScheduleError::InvalidParameter {
                name: "b",
                value: self.b,
                reason: "must lie in (0, 1]",
            });
        }
        positive("lambda", self.lambda)?;
        nonnegative("c0", self.c0)?;
        positive("c1", self.c1)?;
        check_stop_constants(self.c_stop, self.gamma)?;
        positive("m1", self.m1)?;
        positive("y_norm_est", self.y_norm_est)?;
        Ok(())
    }

    /// `C = (C1 + 1) / 2`
    pub fn c_mid(&self) -> f64 {
        0.5 * (self.c_stop + 1.0)
    }

    pub fn a(&self, n: u64) -> f64 {
        a_of(self, n)
    }

    pub fn a0(&self) -> f64 {
        self.a(0)
    }

    /// Discrepancy threshold `C1 delta^gamma`.
    pub fn threshold(&self, delta: f64) -> f64 {
        self.c_stop * delta.powf(self.gamma)
    }

    /// `(kappa a_n, kappa lambda)`, the rescaling used to enforce the last
    /// schedule condition.
    pub fn scaled(&self, kappa: f64) -> Schedule {
        Schedule {
            d0: self.d0 * kappa,
            lambda: self.lambda * kappa,
            ..self.clone()
        }
    }
}

/// `a_n = d0 / (d + n)^b`
pub fn a_of(s: &Schedule, n: u64) -> f64 {
    let base = s.d + n as f64;
    if s.b == 1.0 {
        s.d0 / base
    } else {
        s.d0 / base.powf(s.b)
    }
}

/// Constructive choice of `lambda` and `d0` for the harmonic schedule
/// `a_n = d0 / (1 + n)`.
pub fn select_constants(
    bounds: &OperatorBounds,
    y_norm_est: f64,
    f_delta_minus_f0_norm: f64,
    c_stop: f64,
    gamma: f64,
) -> Result<Schedule, ScheduleError> {
    select_constants_for_family(bounds, y_norm_est, f_delta_minus_f0_norm, c_stop, gamma, 1.0, 1.0)
}

/// Same rule for `a_n = d0/(d + n)^b`; `d0` is chosen so that `a_0` equals
/// the constructive value. Conditions should be re-checked for `b < 1`.
pub fn select_constants_for_family(
    bounds: &OperatorBounds,
    y_norm_est: f64,
    f_delta_minus_f0_norm: f64,
    c_stop: f64,
    gamma: f64,
    d: f64,
    b: f64,
) -> Result<Schedule, ScheduleError> {
    let y = positive("y_norm_est", y_norm_est)?;
    let misfit = nonnegative("f_delta_minus_f0_norm", f_delta_minus_f0_norm)?;
    let m1 = nonnegative("M1", bounds.m1)?.max(MIN_M1);
    let m2 = nonnegative("M2", bounds.m2)?;
    check_stop_constants(c_stop, gamma)?;

    let c0 = 0.5 * m2;
    let c_mid = 0.5 * (c_stop + 1.0);
    let c1 = y * (1.0 + 2.0 / (c_mid - 1.0));
    let kappa = f64::max(1.0, 4.0 * c0 * y / m1);
    let lambda = kappa * m1 / y;
    let a0 = D0_SAFETY_FACTOR * f64::max((lambda * misfit).sqrt(), 4.0 * c1 * lambda);

    let s = Schedule {
        d0: a0 * d.powf(b),
        d,
        b,
        lambda,
        c0,
        c1,
        c_stop,
        gamma,
        m1,
        y_norm_est: y,
    };
    s.validate()?;
    log::debug!(
        "selected schedule: kappa={kappa:.4e} lambda={lambda:.6e} a0={a0:.6e} c0={c0:.4e} c1={c1:.4e}"
    );
    Ok(s)
}

/// The five inequalities a schedule must satisfy for the iteration's
/// invariant to propagate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `a_n <= 2 a_{n+1}`
    RatioBound,
    /// `||f_delta - F(0)|| <= a_0^2 / lambda`
    InitialMisfit,
    /// `M1 / lambda <= ||y||`
    DerivativeScale,
    /// `(a_n - a_{n+1}) / a_{n+1}^2 <= 1 / (2 c1 lambda)`
    StepDecay,
    /// `c0 a_n / lambda^2 + c1 (a_n - a_{n+1}) / a_{n+1} <= a_{n+1} / lambda`
    InvariantGrowth,
}

impl Condition {
    pub fn description(self) -> &'static str {
        match self {
            Condition::RatioBound => "a_n <= 2 a_{n+1}",
            Condition::InitialMisfit => "||f_delta - F(0)|| <= a_0^2 / lambda",
            Condition::DerivativeScale => "M1 / lambda <= ||y||",
            Condition::StepDecay => "(a_n - a_{n+1}) / a_{n+1}^2 <= 1 / (2 c1 lambda)",
            Condition::InvariantGrowth => "c0 a_n / lambda^2 + c1 (a_n - a_{n+1}) / a_{n+1} <= a_{n+1} / lambda",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::RatioBound => "ratio_bound",
            Condition::InitialMisfit => "initial_misfit",
            Condition::DerivativeScale => "derivative_scale",
            Condition::StepDecay => "step_decay",
            Condition::InvariantGrowth => "invariant_growth",
        }
    }
}

/// Outcome of one schedule condition over `n = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub condition: Condition,
    pub description: &'static str,
    pub passed: bool,
    pub first_violation: Option<u64>,
    /// Smallest `rhs - lhs` seen (for the ratio bound: `2 - a_n/a_{n+1}`).
    pub worst_margin: f64,
    pub worst_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub checks: Vec<ConditionCheck>,
    pub n_max: u64,
}

impl ConditionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, condition: Condition) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.condition == condition)
    }
}

struct Tracker {
    condition: Condition,
    description: &'static str,
    first_violation: Option<u64>,
    worst_margin: f64,
    worst_index: u64,
}

impl Tracker {
    fn new(condition: Condition) -> Self {
        Self {
            condition,
            description: condition.description(),
            first_violation: None,
            worst_margin: f64::INFINITY,
            worst_index: 0,
        }
    }

    /// Records `rhs - lhs`; the inequality counts as met within rounding of `scale`.
    fn record(&mut self, n: u64, margin: f64, scale: f64) {
        if margin < self.worst_margin || margin.is_nan() {
            self.worst_margin = margin;
            self.worst_index = n;
        }
        let ok = margin >= -ROUNDING_SLACK * scale.abs();
        if !ok && self.first_violation.is_none() {
            self.first_violation = Some(n);
        }
    }

    fn finish(self) -> ConditionCheck {
        ConditionCheck {
            condition: self.condition,
            description: self.description,
            passed: self.first_violation.is_none(),
            first_violation: self.first_violation,
            worst_margin: self.worst_margin,
            worst_index: self.worst_index,
        }
    }
}

/// Evaluates the five schedule conditions for `n = 0..=n_max`. Failures are data.
pub fn check_conditions(
    s: &Schedule,
    f_delta_minus_f0_norm: f64,
    y_norm_est: f64,
    n_max: u64,
) -> ConditionReport {
    let mut ratio_t = Tracker::new(Condition::RatioBound);
    let mut misfit_t = Tracker::new(Condition::InitialMisfit);
    let mut scale_t = Tracker::new(Condition::DerivativeScale);
    let mut decay_t = Tracker::new(Condition::StepDecay);
    let mut growth_t = Tracker::new(Condition::InvariantGrowth);

    let a0 = s.a(0);
    let rhs_misfit = a0 * a0 / s.lambda;
    misfit_t.record(0, rhs_misfit - f_delta_minus_f0_norm, rhs_misfit);
    scale_t.record(0, y_norm_est - s.m1 / s.lambda, y_norm_est);

    let rhs_decay = 1.0 / (2.0 * s.c1 * s.lambda);
    let mut a_n = a0;
    for n in 0..=n_max {
        let a_next = s.a(n + 1);
        let ratio = a_n / a_next;
        ratio_t.record(n, 2.0 - ratio, 2.0);

        let drop = a_n - a_next;
        decay_t.record(n, rhs_decay - drop / (a_next * a_next), rhs_decay);

        let lhs_growth = s.c0 * a_n / (s.lambda * s.lambda) + drop / a_next * s.c1;
        let rhs_growth = a_next / s.lambda;
        growth_t.record(n, rhs_growth - lhs_growth, rhs_growth);

        a_n = a_next;
    }

    ConditionReport {
        checks: vec![
            ratio_t.finish(),
            misfit_t.finish(),
            scale_t.finish(),
            decay_t.finish(),
            growth_t.finish(),
        ],
        n_max,
    }
}

/// The unique `n0` with `delta/a_{n0+1} > ||y||/(C-1) >= delta/a_{n0}`.
pub fn a_priori_n0(s: &Schedule, delta: f64, y_norm_est: f64) -> Result<u64, ScheduleError> {
    positive("delta", delta)?;
    positive("y_norm_est", y_norm_est)?;
    let threshold = y_norm_est / (s.c_mid() - 1.0);
    let within = |n: u64| delta / s.a(n) <= threshold;
    if !within(0) {
        return Err(ScheduleError::NoAprioriIndex {
            ratio: delta / s.a(0),
            threshold,
        });
    }
    // a_n is strictly decreasing, so `within` is true on a prefix of n.
    let mut lo = 0_u64;
    let mut hi = 1_u64;
    while within(hi) {
        if hi >= A_PRIORI_CAP {
            return Err(ScheduleError::AprioriCapExceeded { cap: A_PRIORI_CAP });
        }
        lo = hi;
        hi = (hi * 2).min(A_PRIORI_CAP);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if within(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > A_PRIORI_CAP {
        return Err(ScheduleError::AprioriCapExceeded { cap: A_PRIORI_CAP });
    }
    Ok(lo)
}

/// Radius of the ball around `u0` that contains the iterates up to
/// `n0 + 1`: `a0/lambda + ||u0|| + ||y|| + ||y|| (C+1)/(C-1)`.
pub fn containment_radius(a0_over_lambda: f64, u0_norm: f64, y_norm: f64, c_mid: f64) -> f64 {
    a0_over_lambda + u0_norm + y_norm + y_norm * (c_mid + 1.0) / (c_mid - 1.0)
}

/// A-priori guess of the containment radius before `lambda` is known,
/// using `a0/lambda = 2 * 4 c1` (the branch of `d0` that dominates when the
/// data misfit is moderate).
pub fn default_bounds_radius(u0_norm: f64, y_norm_est: f64, c_stop: f64) -> f64 {
    let c_mid = 0.5 * (c_stop + 1.0);
    let c1 = y_norm_est * (1.0 + 2.0 / (c_mid - 1.0));
    containment_radius(D0_SAFETY_FACTOR * 4.0 * c1, u0_norm, y_norm_est, c_mid)
}
