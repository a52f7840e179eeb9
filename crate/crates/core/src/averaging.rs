//! One-period averages of dither-driven fields.
//!
//! With integer rates every dither sine repeats after `2π / gcd|ω'ᵢ|`, so
//! the infinite-horizon mean is the mean over one common period. The mean
//! is taken by composite Simpson on a periodic grid, built from two
//! trapezoid sums and refined by doubling the node count.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::esc::PeriodicField;
use crate::integrator::VectorField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    /// Nodes of the first Simpson estimate; even and at least 64.
    pub points_per_period: usize,
    /// Refinement stops once successive estimates differ by less than
    /// `tol · max(1, ‖estimate‖∞)`.
    pub tol: f64,
    pub max_doublings: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { points_per_period: 64, tol: 1e-10, max_doublings: 12 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_period < 64 || self.points_per_period % 2 != 0 {
            return Err(invalid(
                "points_per_period",
                format!("must be even and at least 64, got {}", self.points_per_period),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        Ok(())
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `2π / gcd(|ω'ᵢ|)`.
pub fn common_period(rates: &[i64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::EmptyRates);
    }
    if let Some(i) = rates.iter().position(|&r| r == 0) {
        return Err(Error::ZeroRate(i));
    }
    let g = rates.iter().fold(0, |g, &r| gcd(g, r.unsigned_abs()));
    Ok(2.0 * PI / g as f64)
}

/// Sum of `values[k * dim + c]` over `k`, split in halves recursively.
fn pairwise_sum(values: &[f64], dim: usize, c: usize) -> f64 {
    let rows = values.len() / dim;
    if rows <= 8 {
        let mut s = 0.0;
        for k in 0..rows {
            s += values[k * dim + c];
        }
        return s;
    }
    let half = rows / 2;
    pairwise_sum(&values[..half * dim], dim, c) + pairwise_sum(&values[half * dim..], dim, c)
}

fn add_level(sum: &mut [f64], buf: &[f64], dim: usize) {
    for (c, s) in sum.iter_mut().enumerate() {
        *s += pairwise_sum(buf, dim, c);
    }
}

/// Periodic-grid Simpson mean of `node(k, n, out)`, which must write the
/// integrand at phase `k·P/n`.
fn simpson_mean(
    dim: usize,
    cfg: &QuadratureConfig,
    mut node: impl FnMut(usize, usize, &mut [f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut n = cfg.points_per_period / 2;
    let mut buf = vec![0.0; n * dim];
    for k in 0..n {
        node(k, n, &mut buf[k * dim..(k + 1) * dim])?;
    }
    let mut coarse = vec![0.0; dim];
    add_level(&mut coarse, &buf, dim);
    let mut prev: Option<Vec<f64>> = None;
    let mut last_change = f64::INFINITY;
    for _ in 0..=cfg.max_doublings {
        buf.resize(n * dim, 0.0);
        for k in 0..n {
            node(2 * k + 1, 2 * n, &mut buf[k * dim..(k + 1) * dim])?;
        }
        let mut fine = coarse.clone();
        add_level(&mut fine, &buf, dim);
        let est: Vec<f64> =
            (0..dim).map(|c| (4.0 * fine[c] / (2 * n) as f64 - coarse[c] / n as f64) / 3.0).collect();
        if let Some(p) = &prev {
            let scale = est.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            last_change = est.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if last_change < cfg.tol * scale {
                return Ok(est);
            }
        }
        prev = Some(est);
        coarse = fine;
        n *= 2;
    }
    Err(Error::QuadratureNotConverged { doublings: cfg.max_doublings, change: last_change })
}

/// One-period mean of `f` at the frozen state `x`.
pub fn average_of<F: PeriodicField + ?Sized>(f: &F, x: &[f64], cfg: &QuadratureConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.len() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x.len() });
    }
    let period = common_period(f.dither().rates())?;
    let mut sines = vec![0.0; f.dither().dim()];
    simpson_mean(f.dim(), cfg, |k, n, out| {
        f.dither().sines(k as f64 * period / n as f64, &mut sines);
        f.eval_phase(&sines, x, out)
    })
}

/// Finest node grid whose dither sines [`Averaged`] precomputes, as a
/// multiple of the first Simpson grid.
const CACHED_REFINEMENTS: usize = 4;

/// The average system `dx̄/dt = f̄(x̄)` of a periodic field.
#[derive(Debug, Clone)]
pub struct Averaged<F> {
    field: F,
    cfg: QuadratureConfig,
    period: f64,
    table: Vec<f64>,
    table_nodes: usize,
}

impl<F: PeriodicField> Averaged<F> {
    pub fn new(field: F, cfg: QuadratureConfig) -> Result<Self> {
        cfg.validate()?;
        let period = common_period(field.dither().rates())?;
        let m = field.dither().dim();
        let table_nodes = cfg.points_per_period << CACHED_REFINEMENTS;
        let mut table = vec![0.0; table_nodes * m];
        for k in 0..table_nodes {
            field.dither().sines(k as f64 * period / table_nodes as f64, &mut table[k * m..(k + 1) * m]);
        }
        Ok(Self { field, cfg, period, table, table_nodes })
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// `f̄(x)` as a new vector.
    pub fn average(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.field.dim()];
        self.eval(0.0, x, &mut out)?;
        Ok(out)
    }
}

impl<F: PeriodicField> VectorField for Averaged<F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn eval(&self, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let m = self.field.dither().dim();
        let mut scratch = vec![0.0; m];
        let mean = simpson_mean(self.field.dim(), &self.cfg, |k, n, out| {
            if n <= self.table_nodes {
                let idx = k * (self.table_nodes / n);
                self.field.eval_phase(&self.table[idx * m..(idx + 1) * m], x, out)
            } else {
                self.field.dither().sines(k as f64 * self.period / n as f64, &mut scratch);
                self.field.eval_phase(&scratch, x, out)
            }
        })?;
        dx.copy_from_slice(&mean);
        Ok(())
    }

    fn describe(&self) -> String {
        format!("average of {}", self.field.describe())
    }
}

/// Linear-term matrix of the averaged gradient estimate of
/// `θ₁⁴ + (θ₁+θ₂)⁴` under rates `(1, 3)` and relative amplitudes `(r₁, r₂)`:
/// `ḡ = ∇J + a² A θ`.
pub fn closed_form_a(r1: f64, r2: f64) -> Result<DMatrix<f64>> {
    if r2 == 0.0 || r1 == 0.0 {
        return Err(Error::ZeroAmplitude(if r1 == 0.0 { 0 } else { 1 }));
    }
    let norm = r1 * r1 + r2 * r2;
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::NotNormalized(norm));
    }
    let (r1s, r2s, r12) = (r1 * r1, r2 * r2, r1 * r2);
    let cube = r1s * r1 / r2;
    Ok(DMatrix::from_row_slice(
        2,
        2,
        &[
            6.0 * r1s - 3.0 * r12 + 6.0 * r2s,
            3.0 * r1s - 3.0 * r12 + 6.0 * r2s,
            -2.0 * cube + 6.0 * r1s + 3.0 * r2s,
            -cube + 6.0 * r1s + 3.0 * r2s,
        ],
    ))
}

/// `−k (∇J(θ) + a² A θ)`, the closed-form average gradient system of the
/// quartic example under rates `(1, 3)`.
pub fn quartic_average_closed_form(theta: &[f64], r1: f64, r2: f64, a: f64, k: f64) -> Result<[f64; 2]> {
    if theta.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: theta.len() });
    }
    let am = closed_form_a(r1, r2)?;
    let (x, y) = (theta[0], theta[1]);
    let s = x + y;
    let g = [4.0 * (x * x * x + s * s * s), 4.0 * s * s * s];
    let a2 = a * a;
    Ok([
        -k * (g[0] + a2 * (am[(0, 0)] * x + am[(0, 1)] * y)),
        -k * (g[1] + a2 * (am[(1, 0)] * x + am[(1, 1)] * y)),
    ])
}

/// Componentwise `average − model_based`.
pub fn residual(average: &[f64], model_based: &[f64]) -> Result<Vec<f64>> {
    if average.len() != model_based.len() {
        return Err(Error::DimensionMismatch { expected: average.len(), got: model_based.len() });
    }
    Ok(average.iter().zip(model_based).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::cost::{CostFunction, Quadratic, Quartic2d};
    use crate::dither::{DitherSpec, Order};
    use crate::esc::{EscParams, GescModelFree};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quartic_dither(a: f64) -> DitherSpec {
        DitherSpec::from_raw_amplitudes(vec![1, 3], &[12.0, 1.0], a, 1.0, Order::First).unwrap()
    }

    fn gesc(a: f64) -> Averaged<GescModelFree<Quartic2d>> {
        Averaged::new(GescModelFree::new(Quartic2d, quartic_dither(a), EscParams::gradient(1.0).unwrap()).unwrap(), QuadratureConfig::default())
            .unwrap()
    }

    /// Direct brute-force Riemann mean on a very fine grid, independent of
    /// the Simpson refinement.
    fn brute_mean(f: &impl PeriodicField, x: &[f64], nodes: usize) -> Vec<f64> {
        let p = common_period(f.dither().rates()).unwrap();
        let mut acc = vec![0.0; f.dim()];
        let mut out = vec![0.0; f.dim()];
        for k in 0..nodes {
            f.eval_at(k as f64 * p / nodes as f64, x, &mut out).unwrap();
            acc.iter_mut().zip(&out).for_each(|(a, o)| *a += o);
        }
        acc.iter().map(|a| a / nodes as f64).collect()
    }

    #[test]
    fn periods() {
        assert!((common_period(&[1, 3]).unwrap() - 2.0 * PI).abs() < 1e-15);
        assert!((common_period(&[2, 6]).unwrap() - PI).abs() < 1e-15);
        assert!((common_period(&[5, 7, 11]).unwrap() - 2.0 * PI).abs() < 1e-15);
        assert!((common_period(&[-4, 6]).unwrap() - PI).abs() < 1e-15);
        assert!(common_period(&[]).is_err());
        assert!(common_period(&[1, 0]).is_err());
    }

    struct Constant(DitherSpec);
    impl PeriodicField for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn dither(&self) -> &DitherSpec {
            &self.0
        }
        fn eval_phase(&self, _s: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()> {
            dx[0] = x[0] * 3.0;
            dx[1] = -x[1] + 0.1;
            Ok(())
        }
        fn describe(&self) -> String {
            String::from("constant")
        }
    }

    #[test]
    fn phase_independent_field_is_returned_exactly() {
        let f = Constant(quartic_dither(0.1));
        let x = [0.7, -1.3];
        let mut exact = [0.0; 2];
        f.eval_phase(&[0.0, 0.0], &x, &mut exact).unwrap();
        assert_eq!(average_of(&f, &x, &QuadratureConfig::default()).unwrap(), exact.to_vec());
    }

    #[test]
    fn worked_example_value() {
        let v = gesc(0.1).average(&[1.0, 0.0]).unwrap();
        // 8 + 0.01·A₁₁, 4 + 0.01·A₂₁ with A from the closed form.
        let expected = [-(8.0 + 0.01 * 834.0 / 145.0), -(4.0 - 0.01 * 2589.0 / 145.0)];
        assert!((v[0] - expected[0]).abs() < 1e-12 && (v[1] - expected[1]).abs() < 1e-12, "{v:?}");
        assert!((v[0] + 8.0575).abs() < 1e-4 && (v[1] + 3.8214).abs() < 1e-4);
        assert!(gesc(0.37).average(&[0.0, 0.0]).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn closed_form_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (r1, r2) in [(12.0, 1.0), (1.0, 1.0), (1.0, 2.0), (3.0, -1.0)] {
            let nrm = libm::hypot(r1, r2);
            let (r1, r2) = (r1 / nrm, r2 / nrm);
            let d = DitherSpec::new(vec![1, 3], vec![r1, r2], 0.5, 1.0, Order::First).unwrap();
            let f = GescModelFree::new(Quartic2d, d, EscParams::gradient(1.0).unwrap()).unwrap();
            for _ in 0..5 {
                let x = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
                let brute = brute_mean(&f, &x, 4000);
                let cf = quartic_average_closed_form(&x, r1, r2, 0.5, 1.0).unwrap();
                assert!((brute[0] - cf[0]).abs() < 1e-10 && (brute[1] - cf[1]).abs() < 1e-10, "{brute:?} {cf:?}");
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        let s = libm::sqrt(145.0);
        let a = closed_form_a(12.0 / s, 1.0 / s).unwrap() * 145.0;
        let expected = [834.0, 402.0, -2589.0, -861.0];
        for (got, want) in a.transpose().iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{a}");
        }
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let b = closed_form_a(h, h).unwrap();
        let expected = [4.5, 3.0, 3.5, 4.0];
        for (got, want) in b.transpose().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{b}");
        }
        assert!(closed_form_a(1.0, 0.0).is_err());
        assert!(closed_form_a(0.5, 0.5).is_err());
    }

    #[test]
    fn quadratic_average_is_exact_gradient() {
        let q = DMatrix::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 4.0]);
        let cost = Quadratic::new(q.clone()).unwrap();
        let d = DitherSpec::from_raw_amplitudes(vec![5, 7, 11], &[1.0, 2.0, 3.0], 0.8, 1.0, Order::Second).unwrap();
        let avg = Averaged::new(GescModelFree::new(cost.clone(), d, EscParams::gradient(2.0).unwrap()).unwrap(), QuadratureConfig::default())
            .unwrap();
        let x = [0.3, -0.4, 1.2];
        let v = avg.average(&x).unwrap();
        let g = cost.gradient(&x).unwrap();
        let r = residual(&v, &(g * -2.0).as_slice().to_vec()).unwrap();
        assert!(r.iter().all(|e| e.abs() < 1e-10), "{r:?}");
    }

    #[test]
    fn residual_scales_with_amplitude_squared() {
        let x = [0.6, -0.9];
        let mb: Vec<f64> = Quartic2d.gradient(&x).unwrap().iter().map(|g| -g).collect();
        let ratios: Vec<f64> = [0.4, 0.2, 0.1]
            .iter()
            .map(|&a| {
                let r = residual(&gesc(a).average(&x).unwrap(), &mb).unwrap();
                libm::hypot(r[0], r[1]) / (a * a)
            })
            .collect();
        for r in &ratios[1..] {
            assert!((r / ratios[0] - 1.0).abs() < 0.05, "{ratios:?}");
        }
    }

    #[test]
    fn origin_is_an_equilibrium_for_any_amplitudes() {
        for (r1, r2) in [(12.0, 1.0), (1.0, 1.0), (1.0, 5.0), (2.0, -3.0)] {
            let d = DitherSpec::from_raw_amplitudes(vec![1, 3], &[r1, r2], 0.3, 1.0, Order::First).unwrap();
            let f = Averaged::new(GescModelFree::new(Quartic2d, d, EscParams::gradient(1.0).unwrap()).unwrap(), QuadratureConfig::default())
                .unwrap();
            assert!(f.average(&[0.0, 0.0]).unwrap().iter().all(|v| v.abs() < 1e-15));
        }
    }

    struct Bump(DitherSpec);
    impl PeriodicField for Bump {
        fn dim(&self) -> usize {
            1
        }
        fn dither(&self) -> &DitherSpec {
            &self.0
        }
        fn eval_phase(&self, s: &[f64], _x: &[f64], dx: &mut [f64]) -> Result<()> {
            dx[0] = libm::exp(2.0 * s[0]);
            Ok(())
        }
        fn describe(&self) -> String {
            String::from("bump")
        }
    }

    #[test]
    fn refinement_converges_on_smooth_non_polynomial_integrand() {
        let f = Bump(DitherSpec::new(vec![1], vec![1.0], 1.0, 1.0, Order::First).unwrap());
        // Mean of exp(2 sin t) is the modified Bessel value I₀(2).
        let i0 = 2.279_585_302_336_067;
        let v = average_of(&f, &[0.0], &QuadratureConfig::default()).unwrap();
        assert!((v[0] - i0).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        struct Noisy(DitherSpec);
        impl PeriodicField for Noisy {
            fn dim(&self) -> usize {
                1
            }
            fn dither(&self) -> &DitherSpec {
                &self.0
            }
            fn eval_phase(&self, s: &[f64], _x: &[f64], dx: &mut [f64]) -> Result<()> {
                dx[0] = libm::sqrt(s[0].abs());
                Ok(())
            }
            fn describe(&self) -> String {
                String::from("cusp")
            }
        }
        let f = Noisy(DitherSpec::new(vec![1], vec![1.0], 1.0, 1.0, Order::First).unwrap());
        let cfg = QuadratureConfig { tol: 1e-300, max_doublings: 3, ..Default::default() };
        assert!(matches!(average_of(&f, &[0.0], &cfg), Err(Error::QuadratureNotConverged { .. })));
        assert!(QuadratureConfig { points_per_period: 63, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn cached_and_uncached_paths_agree() {
        let avg = gesc(0.4);
        let x = [0.3, 1.7];
        let a = avg.average(&x).unwrap();
        let b = average_of(avg.field(), &x, &QuadratureConfig::default()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
