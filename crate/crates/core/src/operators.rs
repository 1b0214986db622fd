//! Monotone operators, the test-problem catalog, noise injection, and
//! sampled estimates of the derivative bounds `M_0, M_1, M_2` on a ball.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{inner, LinearMap, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("dimension must be at least {min}, got {got}")]
    DimensionTooSmall { min: usize, got: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("dimension mismatch: operator has dim {expected}, vector has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A map `F: R^d -> R^d` with `<F(u) - F(v), u - v> >= 0`, together with its
/// Jacobian.
pub trait MonotoneOperator: fmt::Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn apply(&self, u: &Vector) -> Vector;

    fn jacobian(&self, u: &Vector) -> LinearMap;

    /// Affine operators have a constant Jacobian, which lets solvers reuse
    /// one factorization across iterations.
    fn is_affine(&self) -> bool {
        false
    }
}

/// `F(u) = A u`.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    matrix: LinearMap,
}

impl LinearOperator {
    /// The caller is responsible for `A` having a PSD symmetric part; use
    /// [`verify_monotone`] when in doubt.
    pub fn new(matrix: LinearMap) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &LinearMap {
        &self.matrix
    }
}

impl MonotoneOperator for LinearOperator {
    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn apply(&self, u: &Vector) -> Vector {
        self.matrix.apply(u)
    }

    fn jacobian(&self, _u: &Vector) -> LinearMap {
        self.matrix.clone()
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// `F(u) = A u + c u^3` with the cube taken componentwise.
#[derive(Debug, Clone)]
pub struct CubicOperator {
    matrix: LinearMap,
    c: f64,
}

impl CubicOperator {
    pub fn new(matrix: LinearMap, c: f64) -> Result<Self, OperatorError> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(OperatorError::InvalidParameter {
                name: "c",
                reason: format!("cubic coefficient must be finite and >= 0, got {c}"),
            });
        }
        Ok(Self { matrix, c })
    }

    pub fn coefficient(&self) -> f64 {
        self.c
    }
}

impl MonotoneOperator for CubicOperator {
    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn apply(&self, u: &Vector) -> Vector {
        let au = self.matrix.apply(u);
        let c = self.c;
        Vector::from_fn(u.dim(), |i| au[i] + c * u[i] * u[i] * u[i])
    }

    fn jacobian(&self, u: &Vector) -> LinearMap {
        let mut j = self.matrix.clone();
        let diag: Vec<f64> = u.as_slice().iter().map(|v| 3.0 * self.c * v * v).collect();
        j.add_to_diagonal(&diag);
        j
    }

    fn is_affine(&self) -> bool {
        self.c == 0.0
    }
}

/// Collocation matrix of `(Ku)(x) = int_0^1 min(x, t) u(t) dt` at the
/// midpoint nodes `x_i = (i - 1/2)/d` with weight `1/d`.
pub fn fredholm_min_kernel(d: usize) -> LinearMap {
    let h = 1.0 / d as f64;
    LinearMap::from_fn(d, |i, j| {
        let xi = (i as f64 + 0.5) * h;
        let xj = (j as f64 + 0.5) * h;
        xi.min(xj) * h
    })
}

/// The linear ill-posed catalog problem; `cond(A)` grows like `d^2`.
pub fn catalog_linear_fredholm(d: usize) -> Result<LinearOperator, OperatorError> {
    if d < 2 {
        return Err(OperatorError::DimensionTooSmall { min: 2, got: d });
    }
    Ok(LinearOperator::new(fredholm_min_kernel(d)))
}

/// The min-kernel matrix plus a monotone componentwise cube.
pub fn catalog_cubic(d: usize, c: f64) -> Result<CubicOperator, OperatorError> {
    if d < 1 {
        return Err(OperatorError::DimensionTooSmall { min: 1, got: d });
    }
    CubicOperator::new(fredholm_min_kernel(d), c)
}

/// `F(u) = -u`. Not monotone; used to exercise the failure paths.
pub fn catalog_negated_identity(d: usize) -> Result<LinearOperator, OperatorError> {
    if d < 1 {
        return Err(OperatorError::DimensionTooSmall { min: 1, got: d });
    }
    let mut m = LinearMap::zeros(d);
    m.add_diagonal(-1.0);
    Ok(LinearOperator::new(m))
}

/// An equation instance `F(u) = f` with known solution and noisy data.
#[derive(Debug, Clone)]
pub struct MonotoneProblem {
    pub operator: Arc<dyn MonotoneOperator>,
    pub y: Vector,
    pub f: Vector,
    pub delta: f64,
    pub f_delta: Vector,
    pub seed: u64,
}

impl MonotoneProblem {
    /// Noise-free instance (`delta = 0`, `f_delta = f`).
    pub fn exact(operator: Arc<dyn MonotoneOperator>, y: Vector) -> Result<Self, OperatorError> {
        check_dim(operator.dim(), &y)?;
        let f = operator.apply(&y);
        Ok(Self {
            operator,
            y,
            f_delta: f.clone(),
            f,
            delta: 0.0,
            seed: 0,
        })
    }

    /// `||f_delta - F(0)||`, the quantity the constant-selection rules need.
    pub fn data_misfit_at_zero(&self) -> f64 {
        let f0 = self.operator.apply(&Vector::zeros(self.operator.dim()));
        self.f_delta.distance(&f0)
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }
}

fn check_dim(expected: usize, v: &Vector) -> Result<(), OperatorError> {
    if v.dim() != expected {
        return Err(OperatorError::DimensionMismatch {
            expected,
            found: v.dim(),
        });
    }
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let e = Vector::from_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let n = e.norm();
        if n > 0.0 {
            return e.scaled(1.0 / n);
        }
    }
}

/// Builds `f = F(y)` and `f_delta = f + delta * e` for a seeded unit
/// direction `e`, so that `||f_delta - f|| = delta`.
pub fn make_problem(
    op: Arc<dyn MonotoneOperator>,
    y: Vector,
    delta: f64,
    seed: u64,
) -> Result<MonotoneProblem, OperatorError> {
    check_dim(op.dim(), &y)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(OperatorError::InvalidParameter {
            name: "delta",
            reason: format!("noise level must be positive and finite, got {delta}"),
        });
    }
    let f = op.apply(&y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_unit(&mut rng, op.dim());
    let mut f_delta = &f + &e.scaled(delta);
    // One correction against the perturbation that actually survived rounding.
    let realized = &f_delta - &f;
    let rn = realized.norm();
    if rn > 0.0 {
        f_delta = &f + &realized.scaled(delta / rn);
    }
    Ok(MonotoneProblem {
        operator: op,
        y,
        f,
        delta,
        f_delta,
        seed,
    })
}

/// Sampled lower estimates of `sup ||F^{(j)}(u)||` over `B(u0, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorBounds {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub radius: f64,
    pub u0: Vector,
}

const BOUNDS_SEED: u64 = 0x5eed_b0a1;
const POWER_ITERS: usize = 300;

/// See [`estimate_bounds_seeded`]; uses a fixed seed.
pub fn estimate_bounds(
    op: &dyn MonotoneOperator,
    u0: &Vector,
    radius: f64,
    samples: usize,
) -> Result<OperatorBounds, OperatorError> {
    estimate_bounds_seeded(op, u0, radius, samples, BOUNDS_SEED)
}

/// Half the sample points lie on the sphere `||u - u0|| = R`, half inside.
/// Each sample also probes the boundary point along the top singular
/// direction of `F'(u)`, where the norms of linear-like operators peak.
pub fn estimate_bounds_seeded(
    op: &dyn MonotoneOperator,
    u0: &Vector,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<OperatorBounds, OperatorError> {
    check_dim(op.dim(), u0)?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(OperatorError::InvalidParameter {
            name: "radius",
            reason: format!("must be positive and finite, got {radius}"),
        });
    }
    if samples == 0 {
        return Err(OperatorError::InvalidParameter {
            name: "samples",
            reason: "need at least one sample".into(),
        });
    }
    let d = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4 * radius;
    let (mut m0, mut m1, mut m2) = (0.0_f64, 0.0_f64, 0.0_f64);

    let second_derivative = |u: &Vector, ju: &LinearMap, h: &Vector| -> f64 {
        let mut shifted = u.clone();
        shifted.axpy(eps, h);
        let jh = op.jacobian(&shifted);
        let diff = LinearMap::from_fn(d, |i, j| (jh.get(i, j) - ju.get(i, j)) / eps);
        diff.spectral_norm(POWER_ITERS).0
    };

    for s in 0..samples {
        let dir = random_unit(&mut rng, d);
        let r = if s % 2 == 0 {
            radius
        } else {
            radius * rng.random::<f64>().powf(1.0 / d as f64)
        };
        let mut u = u0.clone();
        u.axpy(r, &dir);

        m0 = m0.max(op.apply(&u).norm());
        let ju = op.jacobian(&u);
        let (sigma, top) = ju.spectral_norm(POWER_ITERS);
        m1 = m1.max(sigma);

        let h = random_unit(&mut rng, d);
        m2 = m2.max(second_derivative(&u, &ju, &h));
        m2 = m2.max(second_derivative(&u, &ju, &top));

        let mut probe = u0.clone();
        probe.axpy(radius, &top);
        m0 = m0.max(op.apply(&probe).norm());
        m1 = m1.max(op.jacobian(&probe).spectral_norm(POWER_ITERS).0);
    }
    Ok(OperatorBounds {
        m0,
        m1,
        m2,
        radius,
        u0: u0.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub monotone: bool,
    /// Smallest `<F(u) - F(v), u - v>` over the sampled pairs.
    pub worst_value: f64,
    /// Worst value of `<F(u) - F(v), u - v> + eps_mono(u, v)`; negative on failure.
    pub worst_margin: f64,
    pub pairs: usize,
}

/// Samples pairs uniformly in the ball of the given radius around 0 and
/// checks `<F(u) - F(v), u - v> >= -1e-10 (1 + ||u - v||^2)`.
pub fn verify_monotone(
    op: &dyn MonotoneOperator,
    region_radius: f64,
    pairs: usize,
    seed: u64,
) -> MonotonicityReport {
    let d = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_point = |rng: &mut ChaCha8Rng| {
        let dir = random_unit(rng, d);
        let r = region_radius * rng.random::<f64>().powf(1.0 / d as f64);
        dir.scaled(r)
    };
    let mut worst_value = f64::INFINITY;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..pairs {
        let u = sample_point(&mut rng);
        let v = sample_point(&mut rng);
        let du = &u - &v;
        let df = &op.apply(&u) - &op.apply(&v);
        let value = inner(&df, &du).expect("operator preserves dimension");
        let slack = 1e-10 * (1.0 + du.norm_squared());
        worst_value = worst_value.min(value);
        worst_margin = worst_margin.min(value + slack);
    }
    MonotonicityReport {
        monotone: worst_margin >= 0.0,
        worst_value,
        worst_margin,
        pairs,
    }
}

/// Catalog identifiers used by problem specs and config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogId {
    LinearFredholm,
    Cubic,
    NegatedIdentity,
}

/// Shapes for the exact solution `y`, sampled at the collocation nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// `sin(pi x)`
    Sin,
    /// `min(x, 1 - x)`
    Tent,
    /// `x^2`
    Quadratic,
}

impl Profile {
    fn eval(self, x: f64) -> f64 {
        match self {
            Profile::Sin => (std::f64::consts::PI * x).sin(),
            Profile::Tent => x.min(1.0 - x),
            Profile::Quadratic => x * x,
        }
    }
}

/// A profile sampled at `x_i = (i - 1/2)/d`, scaled to Euclidean norm `norm`.
pub fn profile_vector(profile: Profile, d: usize, norm: f64) -> Vector {
    let raw = Vector::from_fn(d, |i| profile.eval((i as f64 + 0.5) / d as f64));
    raw.scaled(norm / raw.norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SolutionSpec {
    Profile { shape: Profile, norm: f64 },
    Values { values: Vec<f64> },
}

/// Serializable description of a problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub catalog: CatalogId,
    pub dim: usize,
    /// Cubic coefficient; only read by the cubic catalog entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    pub y: SolutionSpec,
    /// Omitted means exact data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn operator(&self) -> Result<Arc<dyn MonotoneOperator>, OperatorError> {
        Ok(match self.catalog {
            CatalogId::LinearFredholm => Arc::new(catalog_linear_fredholm(self.dim)?),
            CatalogId::Cubic => {
                let c = self.c.ok_or_else(|| OperatorError::InvalidParameter {
                    name: "c",
                    reason: "cubic catalog needs a coefficient".into(),
                })?;
                Arc::new(catalog_cubic(self.dim, c)?)
            }
            CatalogId::NegatedIdentity => Arc::new(catalog_negated_identity(self.dim)?),
        })
    }

    pub fn solution(&self) -> Result<Vector, OperatorError> {
        match &self.y {
            SolutionSpec::Profile { shape, norm } => {
                if !(*norm > 0.0 && norm.is_finite()) {
                    return Err(OperatorError::InvalidParameter {
                        name: "y.norm",
                        reason: format!("must be positive and finite, got {norm}"),
                    });
                }
                Ok(profile_vector(*shape, self.dim, *norm))
            }
            SolutionSpec::Values { values } => {
                let v = Vector::new(values.clone()).map_err(|e| OperatorError::InvalidParameter {
                    name: "y.values",
                    reason: e.to_string(),
                })?;
                check_dim(self.dim, &v)?;
                Ok(v)
            }
        }
    }

    pub fn build(&self) -> Result<MonotoneProblem, OperatorError> {
        self.build_with(self.delta, self.seed)
    }

    /// Builds the instance with a different noise level or seed.
    pub fn build_with(&self, delta: Option<f64>, seed: u64) -> Result<MonotoneProblem, OperatorError> {
        let op = self.operator()?;
        let y = self.solution()?;
        match delta {
            Some(delta) => make_problem(op, y, delta, seed),
            None => MonotoneProblem::exact(op, y),
        }
    }
}
