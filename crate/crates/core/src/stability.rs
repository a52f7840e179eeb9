//! Numerical stability analysis of seeker flows: Jacobians and spectra at
//! equilibria, ultimate bounds, averaging-closeness gaps and finite-sample
//! practical-stability certificates.
//!
//! A certificate here is evidence from a finite set of initial conditions
//! and a finite horizon, not a proof.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::f64::consts::PI;
use core::ops::ControlFlow;

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::averaging::{Averaged, QuadratureConfig};
use crate::cost::GrowthBounds;
use crate::error::{invalid, Error, Result};
use crate::esc::{PeriodicField, WallTime};
use crate::integrator::{integrate, integrate_observed, jacobian_inf_norm, norm, IntegratorConfig, StepSize, Trajectory, VectorField};

/// Central-difference Jacobian `(f(x*+heᵢ) − f(x*−heᵢ)) / 2h`, column by column.
pub fn linearize<F: VectorField + ?Sized>(f: &F, x_star: &[f64], h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(invalid("h", "finite-difference step must be positive"));
    }
    let n = f.dim();
    if x_star.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x_star.len() });
    }
    let mut jac = DMatrix::zeros(n, n);
    let mut x = x_star.to_vec();
    let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        x[j] = x_star[j] + h;
        f.eval(0.0, &x, &mut fp)?;
        x[j] = x_star[j] - h;
        f.eval(0.0, &x, &mut fm)?;
        x[j] = x_star[j];
        for i in 0..n {
            let d = (fp[i] - fm[i]) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFinite { time: 0.0 });
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

/// Eigenvalues sorted by real part descending, then imaginary part descending.
pub fn spectrum(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
    }
    let mut ev: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(ev)
}

/// Supremum of `‖x(t)‖` over the trailing `tail_fraction` of the horizon;
/// `+∞` for a divergent trajectory.
pub fn ultimate_bound(traj: &Trajectory, tail_fraction: f64) -> Result<f64> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(invalid("tail_fraction", "must lie in (0, 1]"));
    }
    if traj.diverged {
        return Ok(f64::INFINITY);
    }
    let (Some(&t0), Some(&t1)) = (traj.times.first(), traj.times.last()) else {
        return Err(Error::EmptyGrid("trajectory"));
    };
    let start = t1 - tail_fraction * (t1 - t0);
    Ok(traj.samples().filter(|(t, _)| *t >= start).map(|(_, x)| norm(x)).fold(0.0, f64::max))
}

/// Online statistics of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    /// Largest `‖x(t)‖` over the whole run, including `t0`.
    pub max_norm: f64,
    /// Ultimate bound over the tail window.
    pub tail_bound: f64,
    /// First time `‖x‖ < radius`, if a radius was given and reached.
    pub entered_at: Option<f64>,
    /// Last sample time with `‖x‖ ≥ radius` within the main horizon.
    pub last_exit: Option<f64>,
    /// Whether `‖x‖ ≥ radius` anywhere after the main horizon.
    pub escaped_late: bool,
    pub diverged: bool,
    pub final_norm: f64,
}

/// Settings of one [`run_stats`] integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub horizon: f64,
    /// Fraction of the horizon integrated past it to spot-check escapes.
    pub extra: f64,
    pub step: StepSize,
    pub tail_fraction: f64,
    pub radius: Option<f64>,
    /// Stop at the first exit from the ball after the horizon.
    pub stop_on_late_exit: bool,
}

impl RunSpec {
    pub fn new(horizon: f64, step: StepSize) -> Self {
        Self { horizon, extra: 0.0, step, tail_fraction: 0.2, radius: None, stop_on_late_exit: false }
    }
}

/// Integrates `f` over `[0, horizon·(1+extra)]`, tracking the tail bound on
/// the trailing `tail_fraction` of `[0, horizon]` and ball entry and exit for
/// `radius`. A non-finite right-hand side counts as divergence.
pub fn run_stats<F: VectorField + ?Sized>(f: &F, x0: &[f64], spec: &RunSpec) -> Result<RunStats> {
    let RunSpec { horizon, extra, step, tail_fraction, radius, stop_on_late_exit } = *spec;
    let tail_start = horizon * (1.0 - tail_fraction);
    let mut s = RunStats {
        max_norm: 0.0,
        tail_bound: 0.0,
        entered_at: None,
        last_exit: None,
        escaped_late: false,
        diverged: false,
        final_norm: norm(x0),
    };
    let cfg = IntegratorConfig::new(0.0, horizon * (1.0 + extra), step);
    let result = integrate_observed(f, x0, &cfg, |t, x| {
        let r = norm(x);
        s.final_norm = r;
        s.max_norm = s.max_norm.max(r);
        if t >= tail_start && t <= horizon {
            s.tail_bound = s.tail_bound.max(r);
        }
        if let Some(c) = radius {
            if r < c {
                s.entered_at.get_or_insert(t);
            } else if t <= horizon {
                s.last_exit = Some(t);
            } else {
                s.escaped_late = true;
                if stop_on_late_exit {
                    return ControlFlow::Break(());
                }
            }
        }
        ControlFlow::Continue(())
    });
    match result {
        Ok(summary) => s.diverged = summary.diverged,
        Err(Error::NonFinite { .. }) => s.diverged = true,
        Err(e) => return Err(e),
    }
    if s.diverged {
        s.tail_bound = f64::INFINITY;
        s.max_norm = f64::INFINITY;
    }
    Ok(s)
}

/// How long each amplitude of a sweep is integrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepHorizon {
    Fixed(f64),
    /// `clamp(scale / a², min, max)`: the quartic average flow is invariant
    /// under `θ = aφ`, `t = t'/a²`, so transients last `O(1/a²)`.
    AmplitudeScaled { scale: f64, min: f64, max: f64 },
}

impl SweepHorizon {
    pub fn at(&self, a: f64) -> f64 {
        match *self {
            Self::Fixed(t) => t,
            Self::AmplitudeScaled { scale, min, max } => (scale / (a * a)).clamp(min, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepQuery {
    /// Strictly descending dither amplitudes.
    pub amplitudes: Vec<f64>,
    pub initial_conditions: Vec<Vec<f64>>,
    pub horizon: SweepHorizon,
    pub tail_fraction: f64,
    pub step: StepSize,
    /// Radius whose first entry time is recorded per cell.
    pub entry_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub a: f64,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub bound: f64,
    pub max_norm: f64,
    pub entered_at: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// Largest ultimate bound per amplitude, in query order.
    pub max_bounds: Vec<(f64, f64)>,
    /// `γ(a)` per amplitude when growth bounds were supplied.
    pub gains: Option<Vec<f64>>,
    pub monotone: bool,
    pub within_gain: Option<bool>,
    pub verdict: bool,
}

fn check_descending(name: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyGrid(name));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) || v.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid(name, "grid must be finite, positive and strictly descending"));
    }
    Ok(())
}

/// Cells of a sweep at one amplitude, with their largest ultimate bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSlice {
    pub a: f64,
    pub cells: Vec<SweepCell>,
    pub max_bound: f64,
}

/// Runs every initial condition of `query` through the field at amplitude `a`.
pub fn sweep_amplitude<F: VectorField + ?Sized>(f: &F, a: f64, query: &SweepQuery) -> Result<SweepSlice> {
    if query.initial_conditions.is_empty() {
        return Err(Error::EmptyGrid("initial_conditions"));
    }
    let horizon = query.horizon.at(a);
    let spec = RunSpec { tail_fraction: query.tail_fraction, radius: query.entry_radius, ..RunSpec::new(horizon, query.step) };
    let mut cells = Vec::with_capacity(query.initial_conditions.len());
    let mut max_bound = 0.0f64;
    for x0 in &query.initial_conditions {
        let s = run_stats(f, x0, &spec)?;
        max_bound = max_bound.max(s.tail_bound);
        cells.push(SweepCell {
            a,
            x0: x0.clone(),
            horizon,
            bound: s.tail_bound,
            max_norm: s.max_norm,
            entered_at: s.entered_at,
            diverged: s.diverged,
        });
    }
    Ok(SweepSlice { a, cells, max_bound })
}

/// Combines per-amplitude slices, given in descending `a` order.
pub fn assemble_sweep(slices: Vec<SweepSlice>, growth: Option<GrowthBounds>) -> SweepReport {
    let max_bounds: Vec<(f64, f64)> = slices.iter().map(|s| (s.a, s.max_bound)).collect();
    let monotone = max_bounds.windows(2).all(|w| w[1].1 <= w[0].1);
    let gains: Option<Vec<f64>> = growth.map(|g| max_bounds.iter().map(|&(a, _)| g.quartic_gain(a)).collect());
    let within_gain = gains.as_ref().map(|g| max_bounds.iter().zip(g).all(|((_, b), gamma)| b <= gamma));
    let cells = slices.into_iter().flat_map(|s| s.cells).collect();
    SweepReport { cells, max_bounds, gains, monotone, within_gain, verdict: monotone && within_gain.unwrap_or(true) }
}

/// Ultimate bounds along a descending amplitude grid. The verdict requires
/// the per-amplitude maximum bound to be nonincreasing as `a` decreases and,
/// when `growth` is given, every bound to lie below `γ(a)`.
pub fn sgpas_sweep<F, B>(mut family: B, query: &SweepQuery, growth: Option<GrowthBounds>) -> Result<SweepReport>
where
    F: VectorField,
    B: FnMut(f64) -> Result<F>,
{
    check_descending("amplitudes", &query.amplitudes)?;
    let slices = query
        .amplitudes
        .iter()
        .map(|&a| sweep_amplitude(&family(a)?, a, query))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_sweep(slices, growth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosenessQuery {
    /// Ascending base frequencies.
    pub omegas: Vec<f64>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Step of the model-free runs.
    pub step: StepSize,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosenessReport {
    /// `(ω, max gap)` in query order.
    pub gaps: Vec<(f64, f64)>,
    /// Smallest grid `ω` from which every larger grid `ω` keeps the gap
    /// below the threshold.
    pub omega_star: Option<f64>,
    /// Step of the average reference run.
    pub average_step: f64,
}

/// Cubic Hermite interpolant through `(tₖ, xₖ, ẋₖ)`.
struct Hermite {
    times: Vec<f64>,
    states: Vec<f64>,
    slopes: Vec<f64>,
    dim: usize,
}

impl Hermite {
    fn new<F: VectorField + ?Sized>(f: &F, traj: Trajectory) -> Result<Self> {
        let dim = traj.dim;
        let mut slopes = vec![0.0; traj.states.len()];
        for (i, x) in traj.states.chunks_exact(dim).enumerate() {
            f.eval(traj.times[i], x, &mut slopes[i * dim..(i + 1) * dim])?;
        }
        Ok(Self { times: traj.times, states: traj.states, slopes, dim })
    }

    fn eval(&self, t: f64, out: &mut [f64]) {
        let k = match self.times.binary_search_by(|p| p.partial_cmp(&t).unwrap_or(Ordering::Less)) {
            Ok(i) => {
                out.copy_from_slice(&self.states[i * self.dim..(i + 1) * self.dim]);
                return;
            }
            Err(i) => i.clamp(1, self.times.len() - 1) - 1,
        };
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d = self.dim;
        for c in 0..d {
            out[c] = h00 * self.states[k * d + c]
                + h10 * h * self.slopes[k * d + c]
                + h01 * self.states[(k + 1) * d + c]
                + h11 * h * self.slopes[(k + 1) * d + c];
        }
    }
}

/// Nodes of the average reference run over the horizon.
const AVERAGE_NODES: f64 = 20_000.0;

/// Maximum gap between model-free and average trajectories from the same
/// `x0`, compared at every model-free step. The average trajectory is
/// integrated once and interpolated by cubic Hermite between its nodes.
pub fn closeness_experiment<P, B>(mut family: B, query: &ClosenessQuery, quadrature: QuadratureConfig) -> Result<ClosenessReport>
where
    P: PeriodicField,
    B: FnMut(f64) -> Result<P>,
{
    if query.omegas.is_empty() {
        return Err(Error::EmptyGrid("omegas"));
    }
    if query.omegas.iter().any(|w| !(w.is_finite() && *w > 0.0)) || query.omegas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("omegas", "grid must be finite, positive and strictly ascending"));
    }
    if !(query.horizon > 0.0) {
        return Err(invalid("horizon", "must be positive"));
    }
    let average = Averaged::new(family(query.omegas[0])?, quadrature)?;
    let rho = jacobian_inf_norm(&average, 0.0, &query.x0)?;
    let mut h = query.horizon / AVERAGE_NODES;
    if rho > 0.0 {
        h = h.min(crate::integrator::STIFFNESS_SAFETY / rho);
    }
    let avg_traj = integrate(&average, &query.x0, &IntegratorConfig::new(0.0, query.horizon, StepSize::Fixed(h)))?;
    if avg_traj.diverged {
        return Err(invalid("average", "average trajectory diverged"));
    }
    let reference = Hermite::new(&average, avg_traj)?;
    let mut gaps = Vec::with_capacity(query.omegas.len());
    let mut xbar = vec![0.0; query.x0.len()];
    for &w in &query.omegas {
        let field = WallTime(family(w)?);
        let mut gap = 0.0f64;
        let cfg = IntegratorConfig::new(0.0, query.horizon, query.step);
        let summary = integrate_observed(&field, &query.x0, &cfg, |t, x| {
            reference.eval(t, &mut xbar);
            let d: f64 = x.iter().zip(&xbar).map(|(u, v)| (u - v) * (u - v)).sum();
            gap = gap.max(libm::sqrt(d));
            ControlFlow::Continue(())
        })?;
        if summary.diverged {
            return Err(invalid("model_free", format!("model-free trajectory diverged at omega = {w}")));
        }
        gaps.push((w, gap));
    }
    let omega_star = query.threshold.and_then(|delta| {
        let mut star = None;
        for &(w, g) in gaps.iter().rev() {
            if g < delta {
                star = Some(w);
            } else {
                break;
            }
        }
        star
    });
    Ok(ClosenessReport { gaps, omega_star, average_step: h })
}

/// Which implication of the practical-stability definitions is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PracticalProperty {
    /// Practical stability: `‖x0‖ < c1 ⇒ ‖x(t)‖ < c2` for all `t ≥ t0`.
    Stable,
    /// Practical boundedness; the same implication read with `c1` given first.
    Bounded,
    /// δ-practical uniform attractivity: `‖x(t)‖ < c2` for all `t ≥ t0 + T`.
    UniformlyAttractive,
}

impl PracticalProperty {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stable => "PS",
            Self::Bounded => "PB",
            Self::UniformlyAttractive => "delta-PUA",
        }
    }
}

/// Finite stand-in for "for all `t ≥ t0`".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HorizonPolicy {
    Fixed(f64),
    /// `max(factor / (k b1 c2²), floor)`, from the decay of `J` along the
    /// quartic flow outside `B_{c2}`.
    LevelSet { factor: f64, floor: f64, gain: f64, b1: f64 },
}

impl HorizonPolicy {
    pub fn horizon(&self, c2: f64) -> f64 {
        match *self {
            Self::Fixed(t) => t,
            Self::LevelSet { factor, floor, gain, b1 } => (factor / (gain * b1 * c2 * c2)).max(floor),
        }
    }
}

/// `16` ring points on `‖x‖ = c1` and `16` seeded interior points per
/// coordinate plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialConditionSet {
    pub ring_points: usize,
    pub interior_points: usize,
    pub seed: u64,
}

impl Default for InitialConditionSet {
    fn default() -> Self {
        Self { ring_points: 16, interior_points: 16, seed: 0 }
    }
}

impl InitialConditionSet {
    /// Ring points come first, plane by plane, then the interior points.
    pub fn sample(&self, dim: usize, radius: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut ring = Vec::new();
        let mut interior = Vec::new();
        if dim == 1 {
            ring.extend([vec![radius], vec![-radius]]);
            for _ in 0..self.interior_points {
                interior.push(vec![radius * (2.0 * rng.random::<f64>() - 1.0)]);
            }
        }
        for i in 0..dim {
            for j in i + 1..dim {
                let point = |r: f64, phi: f64| {
                    let mut x = vec![0.0; dim];
                    x[i] = r * libm::cos(phi);
                    x[j] = r * libm::sin(phi);
                    x
                };
                for k in 0..self.ring_points {
                    ring.push(point(radius, 2.0 * PI * k as f64 / self.ring_points as f64));
                }
                for _ in 0..self.interior_points {
                    let r = radius * libm::sqrt(rng.random::<f64>());
                    interior.push(point(r, 2.0 * PI * rng.random::<f64>()));
                }
            }
        }
        ring.extend(interior);
        ring
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityQuery {
    pub c1: f64,
    pub c2: f64,
    /// Strictly descending.
    pub amplitudes: Vec<f64>,
    /// Strictly descending.
    pub omegas: Vec<f64>,
    pub horizon: HorizonPolicy,
    /// Fraction of the horizon re-integrated to spot-check forward invariance.
    pub spot_check: f64,
    pub initial_conditions: InitialConditionSet,
    pub property: PracticalProperty,
    pub step: StepSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateCell {
    pub a: f64,
    pub omega: f64,
    pub x0: Vec<f64>,
    pub max_norm: f64,
    /// Tail bound over the last fifth of the horizon.
    pub bound: f64,
    pub entered_at: Option<f64>,
    /// Time after which the run stayed inside `B_{c2}`.
    pub settled_after: Option<f64>,
    pub diverged: bool,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub a_star: f64,
    pub omega_star: f64,
    /// Smallest grid horizon `T` (δ-PUA only).
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub a: f64,
    pub omega: f64,
    pub satisfied: bool,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub horizon: f64,
    pub sample_count: usize,
    pub cells: Vec<CertificateCell>,
    pub grid: Vec<GridOutcome>,
    /// `ω*(a)` per amplitude, `None` where no grid frequency sufficed.
    pub omega_star: Vec<(f64, Option<f64>)>,
    pub thresholds: Option<Thresholds>,
    /// Amplitudes below `a*` with no certifying frequency in the grid.
    pub unresolved: Vec<f64>,
    /// The cell with the largest excursion among failures.
    pub worst: Option<CertificateCell>,
    pub verdict: bool,
}

/// `1, 2, 5, 10, 20, 50, …` up to and including `horizon`.
fn horizon_grid(horizon: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut decade = 1e-3;
    'outer: loop {
        for m in [1.0, 2.0, 5.0] {
            let t = m * decade;
            if t > horizon {
                break 'outer;
            }
            out.push(t);
        }
        decade *= 10.0;
    }
    if out.last() != Some(&horizon) {
        out.push(horizon);
    }
    out
}

/// Outcome of the frequency search at one amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeCertificate {
    pub a: f64,
    pub omega_star: Option<f64>,
    /// Smallest grid horizon at `ω*` (δ-PUA only).
    pub t: Option<f64>,
    pub cells: Vec<CertificateCell>,
    pub grid: Vec<GridOutcome>,
    pub worst: Option<CertificateCell>,
    pub sample_count: usize,
}

/// Validates `query` and returns the horizon it implies.
pub fn certificate_horizon(query: &StabilityQuery) -> Result<f64> {
    if !(query.c2 > 0.0 && query.c2.is_finite()) {
        return Err(invalid("c2", "practical stability needs an open ball of positive radius c2"));
    }
    if !(query.c1 > 0.0 && query.c1.is_finite()) {
        return Err(invalid("c1", "must be positive"));
    }
    check_descending("amplitudes", &query.amplitudes)?;
    check_descending("omegas", &query.omegas)?;
    if !(query.spot_check >= 0.0) {
        return Err(invalid("spot_check", "must be nonnegative"));
    }
    let horizon = query.horizon.horizon(query.c2);
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", "must be positive"));
    }
    Ok(horizon)
}

/// Walks the descending frequency grid at amplitude `a`. `ω*(a)` is the
/// smallest grid frequency such that it and every larger grid frequency
/// pass; a frequency stops at its first failing initial condition.
pub fn certify_amplitude<P, B>(mut family: B, a: f64, query: &StabilityQuery) -> Result<AmplitudeCertificate>
where
    P: PeriodicField,
    B: FnMut(f64, f64) -> Result<P>,
{
    let horizon = certificate_horizon(query)?;
    let pua = query.property == PracticalProperty::UniformlyAttractive;
    let extra = if pua { query.spot_check } else { 0.0 };
    let t_grid = horizon_grid(horizon);
    let run = RunSpec { extra, radius: Some(query.c2), stop_on_late_exit: true, ..RunSpec::new(horizon, query.step) };
    let mut out = AmplitudeCertificate { a, omega_star: None, t: None, cells: Vec::new(), grid: Vec::new(), worst: None, sample_count: 0 };
    for &w in &query.omegas {
        let field = WallTime(family(a, w)?);
        let ics = query.initial_conditions.sample(field.dim(), query.c1);
        out.sample_count = ics.len();
        let mut ok = true;
        let mut settle = 0.0f64;
        let mut evaluated = 0;
        for x0 in &ics {
            evaluated += 1;
            let s = run_stats(&field, x0, &run)?;
            let settled_after = if s.diverged || s.escaped_late { None } else { Some(s.last_exit.unwrap_or(0.0)) };
            let satisfied = !s.diverged
                && match query.property {
                    PracticalProperty::Stable | PracticalProperty::Bounded => s.max_norm < query.c2,
                    PracticalProperty::UniformlyAttractive => settled_after.is_some_and(|t| t_grid.iter().any(|&g| g > t)),
                };
            let cell = CertificateCell {
                a,
                omega: w,
                x0: x0.clone(),
                max_norm: s.max_norm,
                bound: s.tail_bound,
                entered_at: s.entered_at,
                settled_after,
                diverged: s.diverged,
                satisfied,
            };
            if !satisfied {
                ok = false;
                out.worst = Some(cell.clone());
                out.cells.push(cell);
                break;
            }
            settle = settle.max(settled_after.unwrap_or(0.0));
            out.cells.push(cell);
        }
        out.grid.push(GridOutcome { a, omega: w, satisfied: ok, evaluated });
        if !ok {
            break;
        }
        out.omega_star = Some(w);
        out.t = if pua { t_grid.iter().copied().find(|&g| g > settle) } else { None };
    }
    Ok(out)
}

/// Combines per-amplitude searches, given in descending `a` order. `a*` is
/// the largest amplitude with an `ω*`.
pub fn assemble_certificate(query: &StabilityQuery, parts: Vec<AmplitudeCertificate>) -> Result<StabilityReport> {
    let horizon = certificate_horizon(query)?;
    let thresholds = parts
        .iter()
        .find_map(|p| p.omega_star.map(|w| Thresholds { a_star: p.a, omega_star: w, t: p.t }));
    let unresolved = match thresholds {
        Some(t) => parts.iter().filter(|p| p.a < t.a_star && p.omega_star.is_none()).map(|p| p.a).collect(),
        None => Vec::new(),
    };
    let mut report = StabilityReport {
        horizon,
        sample_count: parts.iter().map(|p| p.sample_count).max().unwrap_or(0),
        cells: Vec::new(),
        grid: Vec::new(),
        omega_star: parts.iter().map(|p| (p.a, p.omega_star)).collect(),
        thresholds,
        unresolved,
        worst: None,
        verdict: thresholds.is_some(),
    };
    for p in parts {
        if let Some(w) = p.worst {
            if report.worst.as_ref().is_none_or(|c| w.max_norm > c.max_norm) {
                report.worst = Some(w);
            }
        }
        report.cells.extend(p.cells);
        report.grid.extend(p.grid);
    }
    Ok(report)
}

/// Searches the `(a, ω)` grid for a practical-stability certificate, `a`
/// outer and `ω` inner, both descending.
pub fn certify_practical_stability<P, B>(mut family: B, query: &StabilityQuery) -> Result<StabilityReport>
where
    P: PeriodicField,
    B: FnMut(f64, f64) -> Result<P>,
{
    certificate_horizon(query)?;
    let parts = query
        .amplitudes
        .iter()
        .map(|&a| certify_amplitude(&mut family, a, query))
        .collect::<Result<Vec<_>>>()?;
    assemble_certificate(query, parts)
}

/// Human-readable summary of a certificate search.
pub fn describe_report(r: &StabilityReport) -> String {
    match r.thresholds {
        Some(t) => format!(
            "certificate at a* = {}, omega* = {}, T = {:?} over {} samples; unresolved amplitudes {:?}",
            t.a_star, t.omega_star, t.t, r.sample_count, r.unresolved
        ),
        None => format!("no certificate on the grid over {} samples", r.sample_count),
    }
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::averaging::closed_form_a;
    use crate::cost::{growth_bounds, Quartic2d};
    use crate::dither::{DitherSpec, Order};
    use crate::esc::{EscParams, GescModelFree};
    use crate::integrator::FnField;

    fn quartic_dither(a: f64, omega: f64) -> DitherSpec {
        DitherSpec::from_raw_amplitudes(vec![1, 3], &[12.0, 1.0], a, omega, Order::First).unwrap()
    }

    fn average(a: f64) -> Averaged<GescModelFree<Quartic2d>> {
        Averaged::new(GescModelFree::new(Quartic2d, quartic_dither(a, 1.0), EscParams::gradient(1.0).unwrap()).unwrap(), QuadratureConfig::default())
            .unwrap()
    }

    #[test]
    fn linear_field_jacobian_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let mm = m.clone();
        let f = FnField::new(3, move |_, x, dx| {
            for i in 0..3 {
                dx[i] = (0..3).map(|j| mm[(i, j)] * x[j]).sum();
            }
        });
        let j = linearize(&f, &[0.3, -0.2, 0.9], 1e-3).unwrap();
        assert!((j - m).amax() < 1e-12);
    }

    #[test]
    fn cubic_field_has_vanishing_jacobian_at_origin() {
        let f = FnField::new(2, |_, x, dx| {
            dx[0] = x[0] * x[0] * x[0] - 2.0 * x[1] * x[1] * x[1];
            dx[1] = x[0] * x[0] * x[1];
        });
        let j = linearize(&f, &[0.0, 0.0], 1e-4).unwrap();
        assert!(j.amax() < 1e-7);
    }

    #[test]
    fn average_jacobian_matches_closed_form() {
        for (r1, r2) in [(12.0, 1.0), (1.0, 1.0), (2.0, 3.0)] {
            let d = DitherSpec::from_raw_amplitudes(vec![1, 3], &[r1, r2], 0.1, 1.0, Order::First).unwrap();
            let (n1, n2) = (d.rel_amplitudes()[0], d.rel_amplitudes()[1]);
            let f = Averaged::new(GescModelFree::new(Quartic2d, d, EscParams::gradient(1.0).unwrap()).unwrap(), QuadratureConfig::default())
                .unwrap();
            let j = linearize(&f, &[0.0, 0.0], 1e-4).unwrap();
            let want = closed_form_a(n1, n2).unwrap() * -0.01;
            for (g, w) in j.iter().zip(want.iter()) {
                assert!(((g - w) / w).abs() < 1e-4, "{j} {want}");
            }
        }
    }

    #[test]
    fn spectrum_examples() {
        let id = spectrum(&DMatrix::identity(2, 2)).unwrap();
        assert!(id.iter().all(|z| (z.re - 1.0).abs() < 1e-15 && z.im == 0.0));
        let rot = spectrum(&DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).unwrap();
        assert!((rot[0].im - 1.0).abs() < 1e-15 && (rot[1].im + 1.0).abs() < 1e-15);
        assert!(rot.iter().all(|z| z.re.abs() < 1e-15));
        assert!(spectrum(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn linearized_spectrum_is_unstable_for_every_amplitude() {
        let s = libm::sqrt(145.0);
        let a = closed_form_a(12.0 / s, 1.0 / s).unwrap();
        for amp in [100.0, 1.0, 0.5, 0.1, 0.01] {
            let ev = spectrum(&(&a * -(amp * amp))).unwrap();
            assert!(ev.iter().all(|z| z.re > 0.0));
            let re = 27.0 * amp * amp / 290.0;
            assert!((ev[0].re - re).abs() <= 1e-9 * re);
        }
    }

    fn trajectory(times: Vec<f64>, values: Vec<f64>) -> Trajectory {
        let cfg = IntegratorConfig::new(times[0], *times.last().unwrap(), StepSize::Fixed(1.0));
        Trajectory {
            times,
            states: values,
            dim: 1,
            diverged: false,
            meta: crate::integrator::TrajectoryMeta { system: String::new(), config: cfg, step: 1.0, steps: 0 },
        }
    }

    #[test]
    fn ultimate_bound_examples() {
        let c = trajectory((0..11).map(|i| i as f64).collect(), vec![-3.0; 11]);
        assert_eq!(ultimate_bound(&c, 0.2).unwrap(), 3.0);
        let f = FnField::new(1, |_, x, dx| dx[0] = -x[0]);
        let tr = integrate(&f, &[1.0], &IntegratorConfig::new(0.0, 20.0, StepSize::Fixed(1e-3))).unwrap();
        let b = ultimate_bound(&tr, 0.2).unwrap();
        assert!((b - libm::exp(-16.0)).abs() < 1e-3 * libm::exp(-16.0));
        let mut d = tr.clone();
        d.diverged = true;
        assert_eq!(ultimate_bound(&d, 0.2).unwrap(), f64::INFINITY);
        assert!(ultimate_bound(&tr, 0.0).is_err());
    }

    #[test]
    fn ultimate_bound_does_not_grow_under_left_truncation() {
        let times: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
        let values: Vec<f64> = times.iter().map(|t| libm::exp(-0.2 * t) * libm::sin(3.0 * t) + 0.1 * libm::cos(*t)).collect();
        let full = trajectory(times.clone(), values.clone());
        let base = ultimate_bound(&full, 1.0).unwrap();
        for cut in [10, 50, 120] {
            let t = trajectory(times[cut..].to_vec(), values[cut..].to_vec());
            assert!(ultimate_bound(&t, 1.0).unwrap() <= base);
        }
    }

    #[test]
    fn sweep_on_a_stable_linear_system() {
        let query = SweepQuery {
            amplitudes: vec![10.0, 1.0, 0.1],
            initial_conditions: vec![vec![2.0, 0.0], vec![0.0, -2.0]],
            horizon: SweepHorizon::Fixed(30.0),
            tail_fraction: 0.2,
            step: StepSize::Fixed(1e-2),
            entry_radius: Some(0.1),
        };
        let r = sgpas_sweep(
            |_| {
                Ok(FnField::new(2, |_, x, dx| {
                    dx[0] = -x[0];
                    dx[1] = -x[1];
                }))
            },
            &query,
            None,
        )
        .unwrap();
        assert!(r.verdict && r.monotone);
        assert!(r.cells.iter().all(|c| c.bound < 1e-9 && c.entered_at.is_some()));
        let bad = SweepQuery { amplitudes: vec![0.1, 1.0], ..query };
        assert!(sgpas_sweep(|_| Ok(FnField::new(2, |_, _, _| {})), &bad, None).is_err());
    }

    #[test]
    fn amplitude_scaled_horizon() {
        let h = SweepHorizon::AmplitudeScaled { scale: 1000.0, min: 0.1, max: 3000.0 };
        assert_eq!(h.at(100.0), 0.1);
        assert_eq!(h.at(1.0), 1000.0);
        assert_eq!(h.at(0.01), 3000.0);
    }

    #[test]
    fn unstable_origin_yet_bounded() {
        let f = average(1.0);
        let gamma = growth_bounds(&Quartic2d).unwrap().quartic_gain(1.0);
        let s = run_stats(&f, &[1e-6, 0.0], &RunSpec::new(1000.0, StepSize::Auto)).unwrap();
        assert!(s.max_norm > 1e-4);
        assert!(s.tail_bound <= gamma, "{s:?}");
    }

    #[test]
    fn closeness_with_phase_free_field_is_zero() {
        struct Linear(DitherSpec);
        impl PeriodicField for Linear {
            fn dim(&self) -> usize {
                2
            }
            fn dither(&self) -> &DitherSpec {
                &self.0
            }
            fn eval_phase(&self, _s: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()> {
                dx[0] = -x[0] + x[1];
                dx[1] = -x[1];
                Ok(())
            }
            fn describe(&self) -> String {
                String::from("linear")
            }
        }
        let q = ClosenessQuery { omegas: vec![10.0, 100.0], x0: vec![1.0, 1.0], horizon: 5.0, step: StepSize::Fixed(1e-3), threshold: Some(1e-6) };
        let r = closeness_experiment(|w| Ok(Linear(quartic_dither(0.1, w))), &q, QuadratureConfig::default()).unwrap();
        assert!(r.gaps.iter().all(|(_, g)| *g < 1e-9), "{r:?}");
        assert_eq!(r.omega_star, Some(10.0));
    }

    #[test]
    fn closeness_improves_with_frequency() {
        let q = ClosenessQuery { omegas: vec![1e2, 1e3], x0: vec![1.0, 1.0], horizon: 2.0, step: StepSize::Auto, threshold: Some(0.05) };
        let p = EscParams::gradient(1.0).unwrap();
        let r = closeness_experiment(|w| GescModelFree::new(Quartic2d, quartic_dither(0.1, w), p), &q, QuadratureConfig::default()).unwrap();
        assert!(r.gaps[1].1 < r.gaps[0].1, "{r:?}");
    }

    #[test]
    fn initial_condition_layout() {
        let set = InitialConditionSet::default();
        let ics = set.sample(2, 2.0);
        assert_eq!(ics.len(), 32);
        assert!(ics[..16].iter().all(|x| (norm(x) - 2.0).abs() < 1e-12));
        assert!(ics[16..].iter().all(|x| norm(x) < 2.0));
        assert_eq!(ics, set.sample(2, 2.0));
        assert_eq!(set.sample(3, 1.0).len(), 96);
        assert_eq!(set.sample(1, 1.0).len(), 18);
    }

    #[test]
    fn horizon_policy_and_grid() {
        let p = HorizonPolicy::LevelSet { factor: 50.0, floor: 100.0, gain: 1.0, b1: 0.5 };
        assert_eq!(p.horizon(0.5), 400.0);
        assert_eq!(p.horizon(10.0), 100.0);
        let g = horizon_grid(103.0);
        assert_eq!(g.first(), Some(&1e-3));
        assert_eq!(&g[g.len() - 3..], &[50.0, 100.0, 103.0]);
    }

    struct Contraction(DitherSpec);
    impl PeriodicField for Contraction {
        fn dim(&self) -> usize {
            2
        }
        fn dither(&self) -> &DitherSpec {
            &self.0
        }
        fn eval_phase(&self, _s: &[f64], x: &[f64], dx: &mut [f64]) -> Result<()> {
            dx[0] = -x[0];
            dx[1] = -x[1];
            Ok(())
        }
        fn describe(&self) -> String {
            String::from("contraction")
        }
    }

    fn linear_query(c2: f64, property: PracticalProperty) -> StabilityQuery {
        StabilityQuery {
            c1: 1.0,
            c2,
            amplitudes: vec![0.5, 0.1],
            omegas: vec![10.0, 1.0],
            horizon: HorizonPolicy::Fixed(5.0),
            spot_check: 0.1,
            initial_conditions: InitialConditionSet::default(),
            property,
            step: StepSize::Fixed(1e-2),
        }
    }

    #[test]
    fn stable_linear_system_is_certified_everywhere() {
        let r = certify_practical_stability(|a, w| Ok(Contraction(quartic_dither(a, w))), &linear_query(1.1, PracticalProperty::Stable)).unwrap();
        assert!(r.verdict);
        assert!(r.grid.iter().all(|g| g.satisfied && g.evaluated == 32));
        assert_eq!(r.thresholds.unwrap().a_star, 0.5);
        assert_eq!(r.thresholds.unwrap().omega_star, 1.0);
        let pua = certify_practical_stability(|a, w| Ok(Contraction(quartic_dither(a, w))), &linear_query(0.5, PracticalProperty::UniformlyAttractive)).unwrap();
        assert!(pua.verdict);
        assert_eq!(pua.thresholds.unwrap().t, Some(1.0));
    }

    #[test]
    fn certificates_are_monotone_in_c2() {
        let run = |c2| {
            certify_practical_stability(|a, w| Ok(Contraction(quartic_dither(a, w))), &linear_query(c2, PracticalProperty::UniformlyAttractive)).unwrap()
        };
        let mut previous = false;
        for c2 in [0.01, 0.05, 0.2, 0.9] {
            let v = run(c2).verdict;
            assert!(v || !previous);
            previous = v;
        }
        assert!(previous);
        let tight = certify_practical_stability(|a, w| Ok(Contraction(quartic_dither(a, w))), &linear_query(0.9, PracticalProperty::Stable)).unwrap();
        assert!(!tight.verdict);
        assert!(tight.worst.is_some());
    }

    #[test]
    fn empty_ball_is_rejected() {
        let e = certify_practical_stability(|a, w| Ok(Contraction(quartic_dither(a, w))), &linear_query(0.0, PracticalProperty::Stable));
        assert!(e.is_err());
        let mut q = linear_query(1.0, PracticalProperty::Stable);
        q.omegas.clear();
        assert!(certify_practical_stability(|a, w| Ok(Contraction(quartic_dither(a, w))), &q).is_err());
    }
}
