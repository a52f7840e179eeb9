//! Cost functions with analytic derivative oracles, plus growth-bound
//! computation for homogeneous costs.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A scalar field `J: R^n -> R` that the seekers minimize.
///
/// Only `eval` is required. The derivative oracles are used by the
/// model-based flows and by the test oracles; costs without them can still
/// drive the model-free and average systems.
pub trait CostFunction {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn eval(&self, theta: &[f64]) -> f64;

    fn gradient(&self, _theta: &[f64]) -> Option<DVector<f64>> {
        None
    }

    fn hessian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn minimizer(&self) -> Option<DVector<f64>> {
        None
    }

    /// Declared degree `d` such that `J(c θ) = c^d J(θ)` for `c > 0`.
    fn homogeneity_degree(&self) -> Option<u32> {
        None
    }
}

impl<C: CostFunction + ?Sized> CostFunction for &C {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        (**self).eval(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        (**self).gradient(theta)
    }
    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        (**self).hessian(theta)
    }
    fn minimizer(&self) -> Option<DVector<f64>> {
        (**self).minimizer()
    }
    fn homogeneity_degree(&self) -> Option<u32> {
        (**self).homogeneity_degree()
    }
}

/// `J(θ) = θ₁⁴ + (θ₁ + θ₂)⁴`: unique minimum at the origin with a zero
/// Hessian there.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Quartic2d;

impl CostFunction for Quartic2d {
    fn id(&self) -> &str {
        "quartic2d"
    }

    fn dim(&self) -> usize {
        2
    }

    #[inline]
    fn eval(&self, theta: &[f64]) -> f64 {
        let p = theta[0];
        let s = theta[0] + theta[1];
        let p2 = p * p;
        let s2 = s * s;
        p2 * p2 + s2 * s2
    }

    fn gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        let p = theta[0];
        let s = theta[0] + theta[1];
        let c = 4.0 * s * s * s;
        Some(DVector::from_vec(alloc::vec![4.0 * p * p * p + c, c]))
    }

    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let p = theta[0];
        let s = theta[0] + theta[1];
        let c = 12.0 * s * s;
        Some(DMatrix::from_row_slice(2, 2, &[12.0 * p * p + c, c, c, c]))
    }

    fn minimizer(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(2))
    }

    fn homogeneity_degree(&self) -> Option<u32> {
        Some(4)
    }
}

/// `J(θ) = ½ θᵀ Q θ` for a symmetric positive definite `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    q: DMatrix<f64>,
}

impl Quadratic {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        crate::matrix::SpdMatrix::new(q.clone())?;
        Ok(Self { q })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
}

impl CostFunction for Quadratic {
    fn id(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.q.nrows()
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        let n = self.q.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.q[(i, j)] * theta[j];
            }
            acc += theta[i] * row;
        }
        0.5 * acc
    }

    fn gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        Some(&self.q * DVector::from_column_slice(theta))
    }

    fn hessian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.q.clone())
    }

    fn minimizer(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.q.nrows()))
    }

    fn homogeneity_degree(&self) -> Option<u32> {
        Some(2)
    }
}

/// `J(θ) = ‖θ‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    dim: usize,
}

impl Sphere {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(crate::error::invalid("dim", "must be positive"));
        }
        Ok(Self { dim })
    }
}

impl CostFunction for Sphere {
    fn id(&self) -> &str {
        "sphere"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|t| t * t).sum()
    }

    fn gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::from_iterator(
            self.dim,
            theta.iter().map(|t| 2.0 * t),
        ))
    }

    fn hessian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.dim, self.dim) * 2.0)
    }

    fn minimizer(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.dim))
    }

    fn homogeneity_degree(&self) -> Option<u32> {
        Some(2)
    }
}

/// One of the corpus costs, selectable by string id.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinCost {
    Quartic2d(Quartic2d),
    Quadratic(Quadratic),
    Sphere(Sphere),
}

/// Extra parameters some corpus entries need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostParams {
    /// Hessian of `quadratic`.
    pub q: Option<DMatrix<f64>>,
    /// Dimension of `sphere` (defaults to 2).
    pub dim: Option<usize>,
}

/// Looks up a corpus cost by id (`quartic2d`, `quadratic`, `sphere`).
pub fn builtin_cost(id: &str, params: &CostParams) -> Result<BuiltinCost> {
    match id {
        "quartic2d" => Ok(BuiltinCost::Quartic2d(Quartic2d)),
        "quadratic" => {
            let q = params
                .q
                .clone()
                .ok_or_else(|| crate::error::invalid("q", "quadratic cost needs a matrix Q"))?;
            Ok(BuiltinCost::Quadratic(Quadratic::new(q)?))
        }
        "sphere" => Ok(BuiltinCost::Sphere(Sphere::new(params.dim.unwrap_or(2))?)),
        other => Err(Error::UnknownCost(other.to_string())),
    }
}

macro_rules! dispatch {
    ($self:ident, $c:ident => $e:expr) => {
        match $self {
            BuiltinCost::Quartic2d($c) => $e,
            BuiltinCost::Quadratic($c) => $e,
            BuiltinCost::Sphere($c) => $e,
        }
    };
}

impl CostFunction for BuiltinCost {
    fn id(&self) -> &str {
        dispatch!(self, c => c.id())
    }
    fn dim(&self) -> usize {
        dispatch!(self, c => c.dim())
    }
    #[inline]
    fn eval(&self, theta: &[f64]) -> f64 {
        dispatch!(self, c => c.eval(theta))
    }
    fn gradient(&self, theta: &[f64]) -> Option<DVector<f64>> {
        dispatch!(self, c => c.gradient(theta))
    }
    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        dispatch!(self, c => c.hessian(theta))
    }
    fn minimizer(&self) -> Option<DVector<f64>> {
        dispatch!(self, c => c.minimizer())
    }
    fn homogeneity_degree(&self) -> Option<u32> {
        dispatch!(self, c => c.homogeneity_degree())
    }
}

/// `b1 ‖θ‖^d ≤ J(θ) ≤ b2 ‖θ‖^d` for a cost homogeneous of degree `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthBounds {
    pub b1: f64,
    pub b2: f64,
}

impl GrowthBounds {
    /// `γ(a) = 3 b1^{-3/4} b2^{1/4} a`, the ultimate-bound gain of the
    /// quartic average gradient system.
    pub fn quartic_gain(&self, amplitude: f64) -> f64 {
        3.0 * libm::pow(self.b1, -0.75) * libm::pow(self.b2, 0.25) * amplitude
    }
}

const ANGULAR_SAMPLES: usize = 1 << 14;
const SPHERE_SAMPLES: usize = 50_000;

/// Extremes of `J` on the unit sphere.
///
/// For `n = 2` this scans a uniform angular grid and polishes both extremes by
/// golden-section search inside the bracketing grid cells. Higher dimensions
/// use seeded random directions followed by a shrinking pattern search.
pub fn growth_bounds<C: CostFunction + ?Sized>(cost: &C) -> Result<GrowthBounds> {
    if cost.homogeneity_degree().is_none() {
        return Err(Error::NonHomogeneous(cost.id().to_string()));
    }
    let (b1, b2) = match cost.dim() {
        1 => {
            let lo = cost.eval(&[1.0]);
            let hi = cost.eval(&[-1.0]);
            (lo.min(hi), lo.max(hi))
        }
        2 => circle_extremes(|t| cost.eval(&[libm::cos(t), libm::sin(t)])),
        n => sphere_extremes(cost, n),
    };
    if !(b1 > 0.0) || !b1.is_finite() || !b2.is_finite() {
        return Err(Error::GrowthBounds(format!(
            "`{}` is not positive on the unit sphere (min {b1})",
            cost.id()
        )));
    }
    Ok(GrowthBounds { b1, b2 })
}

fn circle_extremes(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let step = 2.0 * PI / ANGULAR_SAMPLES as f64;
    let values: Vec<f64> = (0..ANGULAR_SAMPLES).map(|i| f(i as f64 * step)).collect();
    let (mut imin, mut imax) = (0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v < values[imin] {
            imin = i;
        }
        if v > values[imax] {
            imax = i;
        }
    }
    let lo = golden_section(&f, (imin as f64 - 1.0) * step, (imin as f64 + 1.0) * step, false);
    let hi = golden_section(&f, (imax as f64 - 1.0) * step, (imax as f64 + 1.0) * step, true);
    (lo.min(values[imin]), hi.max(values[imax]))
}

/// Golden-section search for the extreme value of a unimodal `f` on `[a, b]`.
pub(crate) fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, maximize: bool) -> f64 {
    let g = |t: f64| if maximize { -f(t) } else { f(t) };
    let ratio = (libm::sqrt(5.0) - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (g(c), g(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-14 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = g(d);
        }
    }
    let best = fc.min(fd);
    if maximize {
        -best
    } else {
        best
    }
}

fn sphere_extremes<C: CostFunction + ?Sized>(cost: &C, n: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0d5);
    let mut point = alloc::vec![0.0; n];
    let draw = |rng: &mut ChaCha8Rng, p: &mut [f64]| loop {
        for v in p.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let norm = libm::sqrt(p.iter().map(|v| v * v).sum::<f64>());
        if norm > 1e-3 && norm <= 1.0 {
            p.iter_mut().for_each(|v| *v /= norm);
            break;
        }
    };
    let mut best_lo = (f64::INFINITY, alloc::vec![0.0; n]);
    let mut best_hi = (f64::NEG_INFINITY, alloc::vec![0.0; n]);
    for _ in 0..SPHERE_SAMPLES {
        draw(&mut rng, &mut point);
        let v = cost.eval(&point);
        if v < best_lo.0 {
            best_lo = (v, point.clone());
        }
        if v > best_hi.0 {
            best_hi = (v, point.clone());
        }
    }
    let lo = pattern_search(cost, best_lo.1, false);
    let hi = pattern_search(cost, best_hi.1, true);
    (lo.min(best_lo.0), hi.max(best_hi.0))
}

fn pattern_search<C: CostFunction + ?Sized>(cost: &C, mut x: Vec<f64>, maximize: bool) -> f64 {
    let score = |p: &[f64]| {
        let v = cost.eval(p);
        if maximize {
            -v
        } else {
            v
        }
    };
    let normalize = |p: &mut Vec<f64>| {
        let norm = libm::sqrt(p.iter().map(|v| v * v).sum::<f64>());
        p.iter_mut().for_each(|v| *v /= norm);
    };
    let mut best = score(&x);
    let mut delta = 0.05;
    while delta > 1e-10 {
        let mut improved = false;
        for i in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[i] += sign * delta;
                normalize(&mut trial);
                let s = score(&trial);
                if s < best {
                    best = s;
                    x = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            delta *= 0.5;
        }
    }
    if maximize {
        -best
    } else {
        best
    }
}

/// Central-difference gradient, used to check the analytic oracles.
pub fn finite_difference_gradient<C: CostFunction + ?Sized>(cost: &C, theta: &[f64], h: f64) -> DVector<f64> {
    let mut x: Vec<f64> = theta.to_vec();
    DVector::from_iterator(
        theta.len(),
        (0..theta.len()).map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = cost.eval(&x);
            x[i] = orig - h;
            let fm = cost.eval(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        }),
    )
}
