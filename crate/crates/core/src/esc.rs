//! Right-hand sides of the gradient (GESC) and Newton (NESC) seekers in
//! their model-free, average and model-based forms.
//!
//! NESC states are laid out as `[θ, vech Γ]` in the direct chart and
//! `[θ, vech ln Γ]` in the log chart.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::averaging::{Averaged, QuadratureConfig};
use crate::cost::CostFunction;
use crate::dither::DitherSpec;
use crate::error::{invalid, Error, Result};
use crate::estimator::{demodulate_gradient, demodulate_hessian, measure};
use crate::integrator::VectorField;
use crate::matrix::{log_rate_with, symmetrize, unvech, vech_len, vech_write, EigDecomposition, SpdMatrix};

/// Adaptation gain `k` and Riccati gain `ω_l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscParams {
    gain: f64,
    riccati_gain: f64,
}

impl EscParams {
    pub fn new(gain: f64, riccati_gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(invalid("k", format!("gain must be positive, got {gain}")));
        }
        if !(riccati_gain > 0.0 && riccati_gain.is_finite()) {
            return Err(invalid("omega_l", format!("Riccati gain must be positive, got {riccati_gain}")));
        }
        Ok(Self { gain, riccati_gain })
    }

    /// Gradient-only parameters; the Riccati gain is set to 1 and unused.
    pub fn gradient(gain: f64) -> Result<Self> {
        Self::new(gain, 1.0)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn riccati_gain(&self) -> f64 {
        self.riccati_gain
    }
}

/// A field that depends on time only through `sin(ω'ᵢ τ)` of a dither.
pub trait PeriodicField {
    fn dim(&self) -> usize;
    fn dither(&self) -> &DitherSpec;
    /// Rate at the phase whose dither sines are `sines`.
    fn eval_phase(&self, sines: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()>;
    fn describe(&self) -> String;

    /// Rate at phase `τ`.
    fn eval_at(&self, tau: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let mut s = vec![0.0; self.dither().dim()];
        self.dither().sines(tau, &mut s);
        self.eval_phase(&s, x, dx)
    }
}

impl<F: PeriodicField + ?Sized> PeriodicField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn dither(&self) -> &DitherSpec {
        (**self).dither()
    }
    fn eval_phase(&self, sines: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()> {
        (**self).eval_phase(sines, x, dx)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Runs a [`PeriodicField`] in wall time with `τ = ωt`.
#[derive(Debug, Clone)]
pub struct WallTime<F>(pub F);

const STACK_DIM: usize = 8;

impl<F: PeriodicField> VectorField for WallTime<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let d = self.0.dither();
        let tau = d.base_frequency() * t;
        let m = d.dim();
        if m <= STACK_DIM {
            let mut s = [0.0; STACK_DIM];
            d.sines(tau, &mut s[..m]);
            self.0.eval_phase(&s[..m], x, dx)
        } else {
            let mut s = vec![0.0; m];
            d.sines(tau, &mut s);
            self.0.eval_phase(&s, x, dx)
        }
    }

    fn forcing_frequency(&self) -> Option<f64> {
        Some(self.0.dither().fastest_frequency())
    }

    fn describe(&self) -> String {
        self.0.describe()
    }
}

fn check_dither<C: CostFunction>(cost: &C, dither: &DitherSpec) -> Result<()> {
    if dither.dim() != cost.dim() {
        return Err(Error::DimensionMismatch { expected: cost.dim(), got: dither.dim() });
    }
    Ok(())
}

fn dither_label(d: &DitherSpec) -> String {
    format!("rates {:?}, a={}, omega={}", d.rates(), d.amplitude(), d.base_frequency())
}

/// `dθ/dt = −k ĝ(ωt, θ, a)`.
#[derive(Debug, Clone)]
pub struct GescModelFree<C> {
    cost: C,
    dither: DitherSpec,
    params: EscParams,
}

impl<C: CostFunction> GescModelFree<C> {
    pub fn new(cost: C, dither: DitherSpec, params: EscParams) -> Result<Self> {
        check_dither(&cost, &dither)?;
        Ok(Self { cost, dither, params })
    }

    pub fn cost(&self) -> &C {
        &self.cost
    }
}

impl<C: CostFunction> PeriodicField for GescModelFree<C> {
    fn dim(&self) -> usize {
        self.cost.dim()
    }
    fn dither(&self) -> &DitherSpec {
        &self.dither
    }
    fn eval_phase(&self, sines: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()> {
        let j = measure(&self.cost, &self.dither, x, sines);
        demodulate_gradient(&self.dither, sines, j, dx);
        let k = self.params.gain;
        dx.iter_mut().for_each(|v| *v *= -k);
        Ok(())
    }
    fn describe(&self) -> String {
        format!("gesc model-free on {} ({})", self.cost.id(), dither_label(&self.dither))
    }
}

/// `dϑ/dt = −k ∇J(ϑ)`.
#[derive(Debug, Clone)]
pub struct GescModelBased<C> {
    cost: C,
    params: EscParams,
}

impl<C: CostFunction> GescModelBased<C> {
    pub fn new(cost: C, params: EscParams) -> Result<Self> {
        if cost.gradient(&vec![0.0; cost.dim()]).is_none() {
            return Err(Error::MissingGradient(cost.id().to_string()));
        }
        Ok(Self { cost, params })
    }
}

impl<C: CostFunction> VectorField for GescModelBased<C> {
    fn dim(&self) -> usize {
        self.cost.dim()
    }
    fn eval(&self, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let g = self.cost.gradient(x).ok_or_else(|| Error::MissingGradient(self.cost.id().to_string()))?;
        for (o, gi) in dx.iter_mut().zip(g.iter()) {
            *o = -self.params.gain * gi;
        }
        Ok(())
    }
    fn describe(&self) -> String {
        format!("gesc model-based on {}", self.cost.id())
    }
}

/// Dimension of the full NESC state for `n` parameters.
pub fn nesc_state_dim(n: usize) -> usize {
    n + vech_len(n)
}

fn nesc_param_dim(total: usize) -> Option<usize> {
    (1..=total).find(|&n| nesc_state_dim(n) == total)
}

/// Packs `(θ, Γ)` into a direct-chart NESC state.
pub fn nesc_state(theta: &[f64], gamma: &SpdMatrix) -> Result<Vec<f64>> {
    if gamma.dim() != theta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: gamma.dim() });
    }
    let mut out = theta.to_vec();
    out.resize(nesc_state_dim(theta.len()), 0.0);
    vech_write(gamma.as_matrix(), &mut out[theta.len()..]);
    Ok(out)
}

/// Splits a direct-chart NESC state into `θ` and `Γ`.
pub fn split_nesc_state(x: &[f64]) -> Result<(&[f64], DMatrix<f64>)> {
    let n = nesc_param_dim(x.len()).ok_or(Error::DimensionMismatch { expected: nesc_state_dim(1), got: x.len() })?;
    Ok((&x[..n], unvech(&x[n..])?))
}

fn require_pd(gamma: &DMatrix<f64>) -> Result<()> {
    if gamma.clone().cholesky().is_none() {
        let min = EigDecomposition::of_symmetric(gamma).values.min();
        return Err(Error::NotPositiveDefinite(min));
    }
    Ok(())
}

/// `θ̇ = −k Γ g`, `Γ̇ = ω_l (Γ − Γ H Γ)` symmetrized, written as `[θ̇, vech Γ̇]`.
fn newton_rates(gamma: &DMatrix<f64>, g: &DVector<f64>, h: &DMatrix<f64>, params: &EscParams, dx: &mut [f64]) {
    let n = g.len();
    let theta_dot = gamma * g * (-params.gain);
    dx[..n].copy_from_slice(theta_dot.as_slice());
    let gamma_dot = symmetrize(&((gamma - gamma * h * gamma) * params.riccati_gain));
    vech_write(&gamma_dot, &mut dx[n..]);
}

/// `θ̇ = −k Γ ĝ`, `Γ̇ = ω_l (Γ − Γ Ĥ Γ)`.
#[derive(Debug, Clone)]
pub struct NescModelFree<C> {
    cost: C,
    dither: DitherSpec,
    params: EscParams,
}

impl<C: CostFunction> NescModelFree<C> {
    pub fn new(cost: C, dither: DitherSpec, params: EscParams) -> Result<Self> {
        check_dither(&cost, &dither)?;
        if !dither.is_second_order_admissible() {
            let violations = crate::dither::validate_rates(dither.rates(), crate::dither::Order::Second)?.violations.len();
            return Err(Error::InadmissibleRates { order: "second", violations });
        }
        Ok(Self { cost, dither, params })
    }
}

impl<C: CostFunction> PeriodicField for NescModelFree<C> {
    fn dim(&self) -> usize {
        nesc_state_dim(self.cost.dim())
    }
    fn dither(&self) -> &DitherSpec {
        &self.dither
    }
    fn eval_phase(&self, sines: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()> {
        let n = self.cost.dim();
        let theta = &x[..n];
        let gamma = unvech(&x[n..])?;
        require_pd(&gamma)?;
        let j = measure(&self.cost, &self.dither, theta, sines);
        let mut g = DVector::zeros(n);
        demodulate_gradient(&self.dither, sines, j, g.as_mut_slice());
        let mut h = DMatrix::zeros(n, n);
        demodulate_hessian(&self.dither, sines, j, &mut h);
        newton_rates(&gamma, &g, &h, &self.params, dx);
        Ok(())
    }
    fn describe(&self) -> String {
        format!("nesc model-free on {} ({})", self.cost.id(), dither_label(&self.dither))
    }
}

/// `ϑ̇ = −k Π ∇J`, `Π̇ = ω_l (Π − Π ∇²J Π)`.
#[derive(Debug, Clone)]
pub struct NescModelBased<C> {
    cost: C,
    params: EscParams,
}

impl<C: CostFunction> NescModelBased<C> {
    pub fn new(cost: C, params: EscParams) -> Result<Self> {
        let zero = vec![0.0; cost.dim()];
        if cost.gradient(&zero).is_none() {
            return Err(Error::MissingGradient(cost.id().to_string()));
        }
        if cost.hessian(&zero).is_none() {
            return Err(Error::MissingHessian(cost.id().to_string()));
        }
        Ok(Self { cost, params })
    }
}

impl<C: CostFunction> VectorField for NescModelBased<C> {
    fn dim(&self) -> usize {
        nesc_state_dim(self.cost.dim())
    }
    fn eval(&self, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let n = self.cost.dim();
        let theta = &x[..n];
        let gamma = unvech(&x[n..])?;
        require_pd(&gamma)?;
        let id = || self.cost.id().to_string();
        let g = self.cost.gradient(theta).ok_or_else(|| Error::MissingGradient(id()))?;
        let h = self.cost.hessian(theta).ok_or_else(|| Error::MissingHessian(id()))?;
        newton_rates(&gamma, &g, &h, &self.params, dx);
        Ok(())
    }
    fn describe(&self) -> String {
        format!("nesc model-based on {}", self.cost.id())
    }
}

/// `[θ, vech Γ] -> [θ, vech ln Γ]`.
pub fn to_log_chart(x: &[f64]) -> Result<Vec<f64>> {
    let (theta, gamma) = split_nesc_state(x)?;
    let n = theta.len();
    let log = crate::matrix::log_spd(&SpdMatrix::new(gamma)?)?;
    let mut out = theta.to_vec();
    out.resize(x.len(), 0.0);
    vech_write(&log, &mut out[n..]);
    Ok(out)
}

/// `[θ, vech ln Γ] -> [θ, vech Γ]`.
pub fn to_direct_chart(y: &[f64]) -> Result<Vec<f64>> {
    let n = nesc_param_dim(y.len()).ok_or_else(|| invalid("state", "not a NESC state layout"))?;
    let s = unvech(&y[n..])?;
    let gamma = crate::matrix::exp_sym(&s)?;
    nesc_state(&y[..n], &gamma)
}

/// A direct-chart NESC field re-expressed on `[θ, vech ln Γ]`.
#[derive(Debug, Clone)]
pub struct LogChart<F> {
    inner: F,
    n: usize,
}

impl<F> LogChart<F> {
    fn wrap(inner: F, total: usize) -> Result<Self> {
        let n = nesc_param_dim(total).ok_or_else(|| invalid("state", "not a NESC state layout"))?;
        Ok(Self { inner, n })
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }

    /// `[θ, vech Γ] -> [θ, vech ln Γ]`.
    pub fn from_direct(&self, x: &[f64]) -> Result<Vec<f64>> {
        to_log_chart(x)
    }

    /// `[θ, vech ln Γ] -> [θ, vech Γ]`.
    pub fn to_direct(&self, y: &[f64]) -> Result<Vec<f64>> {
        to_direct_chart(y)
    }

    fn with_direct(&self, y: &[f64], dy: &mut [f64], inner: impl FnOnce(&[f64], &mut [f64]) -> Result<()>) -> Result<()> {
        let n = self.n;
        let s = unvech(&y[n..])?;
        let log_eig = EigDecomposition::of_symmetric(&s);
        let eig = EigDecomposition { vectors: log_eig.vectors.clone(), values: log_eig.values.map(libm::exp) };
        let mut x = y[..n].to_vec();
        x.resize(y.len(), 0.0);
        vech_write(&eig.reconstruct(), &mut x[n..]);
        inner(&x, dy)?;
        let gamma_dot = unvech(&dy[n..])?;
        let rate = log_rate_with(&eig, &gamma_dot)?;
        vech_write(&rate, &mut dy[n..]);
        Ok(())
    }
}

impl<F: PeriodicField> LogChart<F> {
    pub fn periodic(inner: F) -> Result<Self> {
        let d = inner.dim();
        Self::wrap(inner, d)
    }
}

impl<F: VectorField> LogChart<F> {
    pub fn autonomous(inner: F) -> Result<Self> {
        let d = inner.dim();
        Self::wrap(inner, d)
    }
}

impl<F: PeriodicField> PeriodicField for LogChart<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn dither(&self) -> &DitherSpec {
        self.inner.dither()
    }
    fn eval_phase(&self, sines: &[f64], y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.with_direct(y, dy, |x, dx| self.inner.eval_phase(sines, x, dx))
    }
    fn describe(&self) -> String {
        format!("{} in log chart", self.inner.describe())
    }
}

impl<F: VectorField> VectorField for LogChart<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.with_direct(y, dy, |x, dx| self.inner.eval(t, x, dx))
    }
    fn forcing_frequency(&self) -> Option<f64> {
        self.inner.forcing_frequency()
    }
    fn describe(&self) -> String {
        format!("{} in log chart", self.inner.describe())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Gesc,
    Nesc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ModelFree,
    Average,
    ModelBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Chart {
    #[default]
    Direct,
    Log,
}

/// Everything needed to assemble one seeker's right-hand side.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub chart: Chart,
    pub params: EscParams,
    /// Required for the model-free and average modes.
    pub dither: Option<DitherSpec>,
    pub quadrature: QuadratureConfig,
}

pub type DynField = Box<dyn VectorField + Send + Sync>;

/// Builds the field selected by `spec`.
pub fn build_system<C>(cost: C, spec: &SystemSpec) -> Result<DynField>
where
    C: CostFunction + Clone + Send + Sync + 'static,
{
    let dither = || spec.dither.clone().ok_or_else(|| invalid("dither", "model-free and average modes need a dither"));
    let q = spec.quadrature;
    let p = spec.params;
    let gesc_log = || invalid("chart", "the log chart applies to NESC only");
    Ok(match (spec.algorithm, spec.mode, spec.chart) {
        (Algorithm::Gesc, _, Chart::Log) => return Err(gesc_log()),
        (Algorithm::Gesc, Mode::ModelFree, _) => Box::new(WallTime(GescModelFree::new(cost, dither()?, p)?)),
        (Algorithm::Gesc, Mode::Average, _) => Box::new(Averaged::new(GescModelFree::new(cost, dither()?, p)?, q)?),
        (Algorithm::Gesc, Mode::ModelBased, _) => Box::new(GescModelBased::new(cost, p)?),
        (Algorithm::Nesc, Mode::ModelFree, Chart::Direct) => Box::new(WallTime(NescModelFree::new(cost, dither()?, p)?)),
        (Algorithm::Nesc, Mode::ModelFree, Chart::Log) => {
            Box::new(WallTime(LogChart::periodic(NescModelFree::new(cost, dither()?, p)?)?))
        }
        (Algorithm::Nesc, Mode::Average, Chart::Direct) => Box::new(Averaged::new(NescModelFree::new(cost, dither()?, p)?, q)?),
        (Algorithm::Nesc, Mode::Average, Chart::Log) => {
            Box::new(Averaged::new(LogChart::periodic(NescModelFree::new(cost, dither()?, p)?)?, q)?)
        }
        (Algorithm::Nesc, Mode::ModelBased, Chart::Direct) => Box::new(NescModelBased::new(cost, p)?),
        (Algorithm::Nesc, Mode::ModelBased, Chart::Log) => Box::new(LogChart::autonomous(NescModelBased::new(cost, p)?)?),
    })
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::averaging::average_of;
    use crate::cost::{Quadratic, Quartic2d};
    use crate::dither::Order;
    use crate::integrator::{integrate, IntegratorConfig, StepSize};
    use crate::matrix::vech;
    use core::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Square;
    impl CostFunction for Square {
        fn id(&self) -> &str {
            "square"
        }
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, t: &[f64]) -> f64 {
            t[0] * t[0]
        }
    }

    fn q_cost() -> Quadratic {
        Quadratic::new(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0])).unwrap()
    }

    fn quartic_dither(a: f64, omega: f64) -> DitherSpec {
        DitherSpec::from_raw_amplitudes(vec![1, 3], &[12.0, 1.0], a, omega, Order::First).unwrap()
    }

    fn second_order_dither(a: f64) -> DitherSpec {
        DitherSpec::from_raw_amplitudes(vec![5, 7], &[1.0, 1.0], a, 1.0, Order::Second).unwrap()
    }

    fn eval_vec(f: &impl VectorField, t: f64, x: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; f.dim()];
        f.eval(t, x, &mut dx).unwrap();
        dx
    }

    #[test]
    fn rejects_bad_params() {
        assert!(EscParams::new(0.0, 1.0).is_err());
        assert!(EscParams::new(1.0, -1.0).is_err());
        assert!(EscParams::gradient(f64::NAN).is_err());
    }

    #[test]
    fn gesc_model_free_examples() {
        let p = EscParams::gradient(1.0).unwrap();
        let d = DitherSpec::new(vec![1], vec![1.0], 1.0, 1.0, Order::First).unwrap();
        let f = WallTime(GescModelFree::new(Square, d, p).unwrap());
        assert_eq!(eval_vec(&f, 0.0, &[0.7]), vec![-0.0]);
        assert!((eval_vec(&f, PI / 2.0, &[0.0])[0] + 2.0).abs() < 1e-15);
        assert!(GescModelFree::new(Quartic2d, DitherSpec::new(vec![1], vec![1.0], 1.0, 1.0, Order::First).unwrap(), p).is_err());
    }

    #[test]
    fn gesc_model_based_examples() {
        let p = EscParams::gradient(1.0).unwrap();
        let f = GescModelBased::new(Quartic2d, p).unwrap();
        assert_eq!(eval_vec(&f, 0.0, &[0.0, 0.0]), vec![-0.0, -0.0]);
        assert_eq!(eval_vec(&f, 0.0, &[1.0, 0.0]), vec![-8.0, -4.0]);
        assert!(matches!(GescModelBased::new(Square, p), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn gradient_flow_decreases_cost() {
        let f = GescModelBased::new(Quartic2d, EscParams::gradient(1.3).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0];
            let g = Quartic2d.gradient(&x).unwrap();
            let dx = eval_vec(&f, 0.0, &x);
            let lie = g[0] * dx[0] + g[1] * dx[1];
            assert!((lie + 1.3 * g.norm_squared()).abs() <= 1e-9 * (1.0 + g.norm_squared()));
            assert!(lie <= 0.0);
        }
    }

    #[test]
    fn nesc_model_free_at_zero_phase() {
        let p = EscParams::new(1.0, 2.0).unwrap();
        let d = second_order_dither(0.2);
        let f = NescModelFree::new(q_cost(), d.clone(), p).unwrap();
        let theta = [0.5, -0.3];
        let x = nesc_state(&theta, &SpdMatrix::new(DMatrix::identity(2, 2)).unwrap()).unwrap();
        let mut dx = vec![0.0; 5];
        f.eval_at(0.0, &x, &mut dx).unwrap();
        assert_eq!(&dx[..2], &[0.0, 0.0]);
        let j = q_cost().eval(&theta);
        let r = d.rel_amplitudes();
        let h0 = |i: usize| -8.0 * j / (0.04 * r[i] * r[i]);
        assert!((dx[2] - 2.0 * (1.0 - h0(0))).abs() < 1e-9);
        assert_eq!(dx[3], 0.0);
        assert!((dx[4] - 2.0 * (1.0 - h0(1))).abs() < 1e-9);
    }

    #[test]
    fn nesc_requires_second_order_and_spd() {
        let p = EscParams::new(1.0, 1.0).unwrap();
        let first_only = DitherSpec::from_raw_amplitudes(vec![1, 3, 5], &[1.0, 1.0, 1.0], 0.1, 1.0, Order::First).unwrap();
        assert!(NescModelFree::new(crate::cost::Sphere::new(3).unwrap(), first_only, p).is_err());
        let f = NescModelFree::new(q_cost(), second_order_dither(0.1), p).unwrap();
        let mut dx = vec![0.0; 5];
        let bad = [0.0, 0.0, 1.0, 2.0, 1.0];
        assert!(matches!(f.eval_at(0.3, &bad, &mut dx), Err(Error::NotPositiveDefinite(_))));
        assert!(matches!(NescModelBased::new(Square, p), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn riccati_averages_to_zero_at_inverse_hessian() {
        let p = EscParams::new(1.0, 1.0).unwrap();
        let q = q_cost();
        let qinv = q.q().clone().try_inverse().unwrap();
        let f = NescModelFree::new(q.clone(), second_order_dither(0.3), p).unwrap();
        let x = nesc_state(&[0.4, -0.7], &SpdMatrix::new(qinv).unwrap()).unwrap();
        let avg = average_of(&f, &x, &QuadratureConfig::default()).unwrap();
        for v in &avg[2..] {
            assert!(v.abs() < 1e-8, "{avg:?}");
        }
    }

    #[test]
    fn nesc_model_based_fixed_points() {
        let p = EscParams::new(1.0, 1.0).unwrap();
        let q = q_cost();
        let qinv = SpdMatrix::new(q.q().clone().try_inverse().unwrap()).unwrap();
        let f = NescModelBased::new(q.clone(), p).unwrap();
        let theta = [0.8, -1.7];
        let dx = eval_vec(&f, 0.0, &nesc_state(&theta, &qinv).unwrap());
        assert!((dx[0] + theta[0]).abs() < 1e-12 && (dx[1] + theta[1]).abs() < 1e-12);
        assert!(dx[2..].iter().all(|v| v.abs() < 1e-12));
        let spd = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5])).unwrap();
        let dx = eval_vec(&f, 0.0, &nesc_state(&[0.0, 0.0], &spd).unwrap());
        assert_eq!(&dx[..2], &[-0.0, -0.0]);
    }

    #[test]
    fn log_chart_at_identity_copies_direct_rate() {
        let p = EscParams::new(1.5, 0.7).unwrap();
        let direct = NescModelBased::new(Quartic2d, p).unwrap();
        let log = LogChart::autonomous(NescModelBased::new(Quartic2d, p).unwrap()).unwrap();
        let theta = [0.4, 1.1];
        let x = nesc_state(&theta, &SpdMatrix::new(DMatrix::identity(2, 2)).unwrap()).unwrap();
        let y = [0.4, 1.1, 0.0, 0.0, 0.0];
        assert_eq!(eval_vec(&direct, 0.0, &x), eval_vec(&log, 0.0, &y));
    }

    #[test]
    fn log_chart_fixed_point() {
        let p = EscParams::new(1.0, 1.0).unwrap();
        let q = q_cost();
        let log = LogChart::autonomous(NescModelBased::new(q.clone(), p).unwrap()).unwrap();
        let qinv = SpdMatrix::new(q.q().clone().try_inverse().unwrap()).unwrap();
        let l = vech(&crate::matrix::log_spd(&qinv).unwrap()).unwrap();
        let y = [0.0, 0.0, l[0], l[1], l[2]];
        assert!(eval_vec(&log, 0.0, &y).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn charts_agree_along_trajectories() {
        let p = EscParams::new(1.0, 1.0).unwrap();
        let q = q_cost();
        let direct = NescModelBased::new(q.clone(), p).unwrap();
        let log = LogChart::autonomous(NescModelBased::new(q.clone(), p).unwrap()).unwrap();
        let x0 = nesc_state(&[1.0, -1.0], &SpdMatrix::new(DMatrix::identity(2, 2)).unwrap()).unwrap();
        let y0 = log.from_direct(&x0).unwrap();
        let cfg = IntegratorConfig::new(0.0, 10.0, StepSize::Fixed(1e-3)).with_stride(100);
        let a = integrate(&direct, &x0, &cfg).unwrap();
        let b = integrate(&log, &y0, &cfg).unwrap();
        for i in 0..a.len() {
            let back = log.to_direct(b.state(i)).unwrap();
            let err = a.state(i).iter().zip(&back).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{i} {err}");
        }
    }

    #[test]
    fn average_limit_recovers_model_based() {
        let p = EscParams::gradient(1.0).unwrap();
        let mb = GescModelBased::new(Quartic2d, p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states: Vec<[f64; 2]> = (0..20).map(|_| [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0]).collect();
        let gap = |a: f64| {
            let avg = Averaged::new(GescModelFree::new(Quartic2d, quartic_dither(a, 1.0), p).unwrap(), QuadratureConfig::default()).unwrap();
            states
                .iter()
                .map(|x| {
                    let u = eval_vec(&avg, 0.0, x);
                    let v = eval_vec(&mb, 0.0, x);
                    libm::hypot(u[0] - v[0], u[1] - v[1])
                })
                .fold(0.0, f64::max)
        };
        let (g1, g2, g3) = (gap(0.1), gap(0.01), gap(0.001));
        assert!(g1 > g2 && g2 > g3 && g3 < 1e-4, "{g1} {g2} {g3}");
    }

    #[test]
    fn builder_covers_variants() {
        let p = EscParams::new(1.0, 1.0).unwrap();
        let spec = |algorithm, mode, chart, dither: Option<DitherSpec>| SystemSpec {
            algorithm,
            mode,
            chart,
            params: p,
            dither,
            quadrature: QuadratureConfig::default(),
        };
        let d = Some(second_order_dither(0.1));
        for mode in [Mode::ModelFree, Mode::Average, Mode::ModelBased] {
            let g = build_system(q_cost(), &spec(Algorithm::Gesc, mode, Chart::Direct, d.clone())).unwrap();
            assert_eq!(g.dim(), 2);
            for chart in [Chart::Direct, Chart::Log] {
                let n = build_system(q_cost(), &spec(Algorithm::Nesc, mode, chart, d.clone())).unwrap();
                assert_eq!(n.dim(), 5);
            }
        }
        assert!(build_system(q_cost(), &spec(Algorithm::Gesc, Mode::ModelFree, Chart::Log, d.clone())).is_err());
        assert!(build_system(q_cost(), &spec(Algorithm::Gesc, Mode::Average, Chart::Direct, None)).is_err());
    }
}
