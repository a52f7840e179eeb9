//! Classical fixed-step Runge–Kutta integration.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use crate::error::{invalid, Error, Result};

/// A right-hand side `dx/dt = f(t, x)`.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()>;

    /// Fastest explicit forcing frequency in rad per unit time, if the field
    /// depends periodically on `t`.
    fn forcing_frequency(&self) -> Option<f64> {
        None
    }

    fn describe(&self) -> String {
        String::from("vector field")
    }
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        (**self).eval(t, x, dx)
    }
    fn forcing_frequency(&self) -> Option<f64> {
        (**self).forcing_frequency()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<F: VectorField + ?Sized> VectorField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        (**self).eval(t, x, dx)
    }
    fn forcing_frequency(&self) -> Option<f64> {
        (**self).forcing_frequency()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Wraps a closure `(t, x, dx)` as an autonomous or time-varying field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        (self.f)(t, x, dx);
        Ok(())
    }
}

/// Steps per fastest forcing cycle used by [`StepSize::Auto`].
pub const STEPS_PER_CYCLE: f64 = 40.0;
/// Re-estimation interval, in steps, of the stiffness-scheduled auto step.
pub const STIFFNESS_INTERVAL: usize = 64;
/// `h · ‖∂f/∂x‖∞` target of the stiffness-scheduled auto step.
pub const STIFFNESS_SAFETY: f64 = 0.25;
/// Fewest steps an autonomous auto-step run takes over its span.
pub const MIN_AUTO_STEPS: f64 = 2000.0;
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `2π / (ω_max · 40)` for forced fields. Autonomous fields get a step
    /// scheduled on a finite-difference estimate of `‖∂f/∂x‖∞`, refreshed
    /// every [`STIFFNESS_INTERVAL`] steps.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub step: StepSize,
    pub t0: f64,
    pub t1: f64,
    pub record_stride: usize,
    pub divergence_limit: f64,
}

impl IntegratorConfig {
    pub fn new(t0: f64, t1: f64, step: StepSize) -> Self {
        Self { step, t0, t1, record_stride: 1, divergence_limit: DIVERGENCE_LIMIT }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t1.is_finite() && self.t1 > self.t0) {
            return Err(invalid("t_span", alloc::format!("need finite t0 < t1, got ({}, {})", self.t0, self.t1)));
        }
        if let StepSize::Fixed(h) = self.step {
            if !(h.is_finite() && h > 0.0) {
                return Err(invalid("step", alloc::format!("must be positive, got {h}")));
            }
        }
        if self.record_stride == 0 {
            return Err(invalid("record_stride", "must be at least 1"));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(invalid("divergence_limit", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub system: String,
    pub config: IntegratorConfig,
    /// Step used for forced fields and fixed steps; the last step used otherwise.
    pub step: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Row-major, `dim` values per sample.
    pub states: Vec<f64>,
    pub dim: usize,
    pub diverged: bool,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.times.iter().copied().zip(self.states.chunks_exact(self.dim))
    }
}

pub fn norm(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self { k1: vec![0.0; dim], k2: vec![0.0; dim], k3: vec![0.0; dim], k4: vec![0.0; dim], tmp: vec![0.0; dim] }
    }

    fn checked<F: VectorField + ?Sized>(f: &F, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        f.eval(t, x, dx)?;
        if dx.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { time: t })
        }
    }

    /// Advances `x` from `t` to `t + h` in place.
    pub fn step<F: VectorField + ?Sized>(&mut self, f: &F, t: f64, x: &mut [f64], h: f64) -> Result<()> {
        let n = x.len();
        Self::checked(f, t, x, &mut self.k1)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        Self::checked(f, t + 0.5 * h, &self.tmp, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        Self::checked(f, t + 0.5 * h, &self.tmp, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        Self::checked(f, t + h, &self.tmp, &mut self.k4)?;
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
        Ok(())
    }
}

/// `max_i Σ_j |∂f_i/∂x_j|` by forward differences.
pub fn jacobian_inf_norm<F: VectorField + ?Sized>(f: &F, t: f64, x: &[f64]) -> Result<f64> {
    let n = x.len();
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut xp = x.to_vec();
    Rk4::checked(f, t, x, &mut f0)?;
    let mut rows = vec![0.0; n];
    for j in 0..n {
        let h = 1e-7 * x[j].abs().max(1e-3);
        xp[j] = x[j] + h;
        Rk4::checked(f, t, &xp, &mut f1)?;
        xp[j] = x[j];
        for i in 0..n {
            rows[i] += ((f1[i] - f0[i]) / h).abs();
        }
    }
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// Resolved step schedule for a run.
#[derive(Debug, Clone, Copy)]
enum Schedule {
    Uniform { h: f64, steps: u64 },
    Stiff { h_max: f64 },
}

fn schedule<F: VectorField + ?Sized>(f: &F, cfg: &IntegratorConfig) -> Result<Schedule> {
    let span = cfg.t1 - cfg.t0;
    let nominal = match (cfg.step, f.forcing_frequency()) {
        (StepSize::Fixed(h), _) => h,
        (StepSize::Auto, Some(w)) if w > 0.0 => 2.0 * core::f64::consts::PI / (w * STEPS_PER_CYCLE),
        (StepSize::Auto, _) => return Ok(Schedule::Stiff { h_max: span / MIN_AUTO_STEPS }),
    };
    let steps = libm::ceil(span / nominal - 1e-9).max(1.0);
    if steps > u64::MAX as f64 / 2.0 {
        return Err(invalid("step", "too many steps for the time span"));
    }
    Ok(Schedule::Uniform { h: span / steps, steps: steps as u64 })
}

/// Result of an observed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub last_step: f64,
    pub diverged: bool,
    /// Time of the last accepted state.
    pub t_end: f64,
}

/// Integrates from `x0`, calling `observe(t, x)` at `t0` and after every
/// step. The observer may stop the run early with `ControlFlow::Break`.
/// A state whose norm exceeds the divergence limit is reported to the
/// observer, then the run stops with `diverged = true`.
pub fn integrate_observed<F, O>(f: &F, x0: &[f64], cfg: &IntegratorConfig, mut observe: O) -> Result<RunSummary>
where
    F: VectorField + ?Sized,
    O: FnMut(f64, &[f64]) -> ControlFlow<()>,
{
    cfg.validate()?;
    if x0.len() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x0.len() });
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(invalid("x0", "must be finite"));
    }
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(x.len());
    let mut summary = RunSummary { steps: 0, last_step: 0.0, diverged: false, t_end: cfg.t0 };
    if observe(cfg.t0, &x).is_break() {
        return Ok(summary);
    }
    let mut after_step = |t: f64, x: &[f64], h: f64, summary: &mut RunSummary| {
        summary.steps += 1;
        summary.last_step = h;
        summary.t_end = t;
        summary.diverged = norm(x) > cfg.divergence_limit;
        observe(t, x).is_break() || summary.diverged
    };
    match schedule(f, cfg)? {
        Schedule::Uniform { h, steps } => {
            for k in 0..steps {
                let t = cfg.t0 + k as f64 * h;
                rk.step(f, t, &mut x, h)?;
                let t_next = if k + 1 == steps { cfg.t1 } else { cfg.t0 + (k + 1) as f64 * h };
                if after_step(t_next, &x, h, &mut summary) {
                    break;
                }
            }
        }
        Schedule::Stiff { h_max } => {
            let mut t = cfg.t0;
            let mut h = h_max;
            let mut k = 0usize;
            while t < cfg.t1 {
                if k % STIFFNESS_INTERVAL == 0 {
                    let rho = jacobian_inf_norm(f, t, &x)?;
                    h = if rho > 0.0 { (STIFFNESS_SAFETY / rho).min(h_max) } else { h_max };
                }
                let last = t + h >= cfg.t1;
                let h_step = if last { cfg.t1 - t } else { h };
                rk.step(f, t, &mut x, h_step)?;
                t = if last { cfg.t1 } else { t + h_step };
                k += 1;
                if after_step(t, &x, h_step, &mut summary) {
                    break;
                }
            }
        }
    }
    Ok(summary)
}

/// Integrates and records every `record_stride`-th step plus the final state.
pub fn integrate<F: VectorField + ?Sized>(f: &F, x0: &[f64], cfg: &IntegratorConfig) -> Result<Trajectory> {
    let dim = f.dim();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut k = 0usize;
    let mut last = (f64::NAN, Vec::new());
    let summary = integrate_observed(f, x0, cfg, |t, x| {
        if k % cfg.record_stride == 0 {
            times.push(t);
            states.extend_from_slice(x);
        }
        last.0 = t;
        last.1.clear();
        last.1.extend_from_slice(x);
        k += 1;
        ControlFlow::Continue(())
    })?;
    if times.last() != Some(&last.0) {
        times.push(last.0);
        states.extend_from_slice(&last.1);
    }
    Ok(Trajectory {
        times,
        states,
        dim,
        diverged: summary.diverged,
        meta: TrajectoryMeta { system: f.describe(), config: cfg.clone(), step: summary.last_step, steps: summary.steps },
    })
}

/// Two fields integrated side by side as one state `(x, y)`.
pub struct Product<A, B>(pub A, pub B);

impl<A: VectorField, B: VectorField> VectorField for Product<A, B> {
    fn dim(&self) -> usize {
        self.0.dim() + self.1.dim()
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let n = self.0.dim();
        self.0.eval(t, &x[..n], &mut dx[..n])?;
        self.1.eval(t, &x[n..], &mut dx[n..])
    }
    fn forcing_frequency(&self) -> Option<f64> {
        match (self.0.forcing_frequency(), self.1.forcing_frequency()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }
    fn describe(&self) -> String {
        alloc::format!("({}) x ({})", self.0.describe(), self.1.describe())
    }
}
