//! The `esc-lab` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use esc_core::averaging::quartic_average_closed_form;
use esc_core::cost::{growth_bounds, BuiltinCost, CostFunction, GrowthBounds};
use esc_core::dither::{validate_rates, DitherSpec, Order, ValidationReport, Violation};
use esc_core::esc::{build_system, Algorithm, Chart, GescModelFree, Mode, SystemSpec};
use esc_core::integrator::{integrate, IntegratorConfig, VectorField};
use esc_core::stability::{
    assemble_certificate, assemble_sweep, certify_amplitude, closeness_experiment, linearize, spectrum, sweep_amplitude,
    ClosenessQuery, HorizonPolicy, InitialConditionSet, PracticalProperty, StabilityQuery, SweepHorizon, SweepQuery,
};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::{config_err, LabError, LabResult};
use crate::jobs::{default_jobs, parallel_map};
use crate::output::{json_bytes, parse_trajectory_csv, trajectory_csv, write_atomic};
use crate::plot::{render_svg, streamlines, Panel, StreamConfig};
use crate::report;
use crate::settings::{parse_f64_list, parse_i64_list, parse_order, parse_rows, QuerySettings, Settings, StepSetting};

#[derive(Debug, Parser)]
#[command(name = "esc-lab", version, about = "Extremum seeking simulations and stability experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check dither rates against the admissibility restrictions.
    ValidateDither {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        dither: DitherArgs,
    },
    /// Integrate a seeker and write its trajectory as CSV.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate the averaged vector field at a point.
    Average {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Jacobian of an autonomous field at a point.
    Linearize {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Eigenvalues of a matrix, or of a field's Jacobian at a point.
    Spectrum {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        point: PointArgs,
        /// Rows separated by `;`, entries by `,`.
        #[arg(long)]
        matrix: Option<String>,
    },
    /// Ultimate bounds of the GESC family along a descending amplitude grid.
    SweepA {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ics: IcArgs,
        #[command(flatten)]
        horizon: HorizonArgs,
        #[arg(long)]
        step: Option<String>,
        /// Fraction of the horizon whose maximum norm is the ultimate bound.
        #[arg(long)]
        tail: Option<f64>,
        #[arg(long)]
        entry_radius: Option<f64>,
    },
    /// Gap between model-free and average GESC along an ascending ω grid.
    Closeness {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Gap threshold defining ω*.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Search for practical-stability thresholds of model-free GESC.
    Certify {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        ics: IcArgs,
        #[command(flatten)]
        horizon: HorizonArgs,
        #[arg(long)]
        step: Option<String>,
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<PropertyArg>,
        /// Extra fraction of the horizon integrated for δ-PUA.
        #[arg(long)]
        spot_check: Option<f64>,
    },
    /// Render an SVG stream plot, the two-amplitude portrait, or a CSV trajectory.
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, value_enum, default_value_t = PlotStyle::Stream)]
        style: PlotStyle,
        /// Half-width of the plotted square.
        #[arg(long)]
        extent: Option<f64>,
        /// Streamline seeds per axis.
        #[arg(long)]
        seeds: Option<usize>,
        /// Trajectory CSV for `--style trajectory`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PropertyArg {
    Ps,
    Pb,
    Pua,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotStyle {
    Stream,
    Fig1,
    Trajectory,
}

#[derive(Debug, Clone, Default, Args)]
struct CommonArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for sampled initial conditions (falls back to ESC_LAB_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for amplitude sweeps.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path, `-` for standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
struct DitherArgs {
    /// Integer rate multipliers, e.g. `1,3`.
    #[arg(long)]
    rates: Option<String>,
    /// Raw relative amplitudes, normalized to unit length.
    #[arg(long)]
    ramp: Option<String>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    /// `first` or `second`.
    #[arg(long)]
    order: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
struct SystemArgs {
    #[arg(long)]
    cost: Option<String>,
    /// Hessian of the quadratic cost, rows separated by `;`.
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// gesc, gesc-average, gesc-model-based, nesc, nesc-average or nesc-model-based.
    #[arg(long)]
    algo: Option<String>,
    /// `direct` or `log` state chart for NESC.
    #[arg(long)]
    chart: Option<String>,
    #[command(flatten)]
    dither: DitherArgs,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long = "omega-l")]
    omega_l: Option<f64>,
    /// Initial Riccati state, rows separated by `;`.
    #[arg(long)]
    gamma0: Option<String>,
    /// Nodes per period of the first averaging estimate.
    #[arg(long)]
    quad_points: Option<usize>,
    #[arg(long)]
    quad_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
struct RunArgs {
    #[arg(long)]
    x0: Option<String>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long = "T")]
    t_end: Option<f64>,
    /// A number or `auto`.
    #[arg(long)]
    step: Option<String>,
    /// Record every n-th step.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
struct PointArgs {
    #[arg(long)]
    at: Option<String>,
    /// Finite-difference step.
    #[arg(long)]
    h: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
struct GridArgs {
    #[arg(long)]
    a_grid: Option<String>,
    #[arg(long)]
    omega_grid: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
struct IcArgs {
    /// Initial conditions on the ring of radius `--ic-radius` (or `c1`).
    #[arg(long)]
    ring: Option<usize>,
    /// Seeded interior initial conditions.
    #[arg(long)]
    interior: Option<usize>,
    #[arg(long)]
    ic_radius: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
struct HorizonArgs {
    /// Fixed horizon, overriding any scaling rule.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    horizon_factor: Option<f64>,
    #[arg(long)]
    horizon_floor: Option<f64>,
    #[arg(long)]
    horizon_scale: Option<f64>,
    #[arg(long)]
    horizon_min: Option<f64>,
    #[arg(long)]
    horizon_max: Option<f64>,
}

fn list_f64(s: &Option<String>, name: &str) -> LabResult<Option<Vec<f64>>> {
    s.as_deref().map(|v| parse_f64_list(v).map_err(|e| config_err(format!("--{name}: {e}")))).transpose()
}

fn rows(s: &Option<String>, name: &str) -> LabResult<Option<Vec<Vec<f64>>>> {
    s.as_deref().map(|v| parse_rows(v).map_err(|e| config_err(format!("--{name}: {e}")))).transpose()
}

impl CommonArgs {
    fn apply(&self, s: &mut Settings) {
        s.seed = self.seed.or(s.seed);
        s.jobs = self.jobs.or(s.jobs);
        if self.out.is_some() {
            s.out = self.out.clone();
        }
    }

    fn base(&self) -> LabResult<Settings> {
        match &self.config {
            Some(p) => Settings::from_file(p),
            None => Ok(Settings::default()),
        }
    }
}

impl DitherArgs {
    fn flags(&self) -> LabResult<Settings> {
        Ok(Settings {
            rates: self
                .rates
                .as_deref()
                .map(|v| parse_i64_list(v).map_err(|e| config_err(format!("--rates: {e}"))))
                .transpose()?,
            ramp: list_f64(&self.ramp, "ramp")?,
            a: self.a,
            omega: self.omega,
            order: self.order.clone(),
            ..Default::default()
        })
    }
}

impl SystemArgs {
    fn flags(&self) -> LabResult<Settings> {
        Ok(Settings {
            cost: self.cost.clone(),
            q: rows(&self.q, "q")?,
            dim: self.dim,
            algo: self.algo.clone(),
            chart: self.chart.clone(),
            k: self.k,
            omega_l: self.omega_l,
            gamma0: rows(&self.gamma0, "gamma0")?,
            quad_points: self.quad_points,
            quad_tol: self.quad_tol,
            ..Default::default()
        }
        .overlay(self.dither.flags()?))
    }
}

fn step_flag(s: &Option<String>) -> LabResult<Option<StepSetting>> {
    s.as_deref().map(StepSetting::parse).transpose()
}

impl RunArgs {
    fn flags(&self) -> LabResult<Settings> {
        Ok(Settings {
            x0: list_f64(&self.x0, "x0")?,
            t0: self.t0,
            t_end: self.t_end,
            step: step_flag(&self.step)?,
            stride: self.stride,
            ..Default::default()
        })
    }
}

fn query_flags(q: QuerySettings) -> Settings {
    Settings { query: q, ..Default::default() }
}

/// File settings overlaid by the given flag layers.
fn resolve(common: &CommonArgs, layers: Vec<Settings>) -> LabResult<Settings> {
    let mut s = common.base()?;
    for l in layers {
        s = s.overlay(l);
    }
    common.apply(&mut s);
    s.seed = Some(s.resolved_seed()?);
    Ok(s)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            return report_error(&LabError::Usage(e.render().to_string().trim().to_string()));
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &LabError) -> i32 {
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(&json_bytes(&e.to_json()));
    e.exit_code()
}

fn out_path(s: &Settings) -> PathBuf {
    s.out.clone().unwrap_or_else(|| PathBuf::from("-"))
}

fn dispatch(command: Command) -> LabResult<()> {
    match command {
        Command::ValidateDither { common, dither } => validate_dither(&resolve(&common, vec![dither.flags()?])?),
        Command::Simulate { common, system, run } => simulate(&resolve(&common, vec![system.flags()?, run.flags()?])?),
        Command::Average { common, system, point } => {
            let q = QuerySettings { at: list_f64(&point.at, "at")?, ..Default::default() };
            average(&resolve(&common, vec![system.flags()?, query_flags(q)])?)
        }
        Command::Linearize { common, system, point } => {
            let q = QuerySettings { at: list_f64(&point.at, "at")?, h: point.h, ..Default::default() };
            linearize_cmd(&resolve(&common, vec![system.flags()?, query_flags(q)])?)
        }
        Command::Spectrum { common, system, point, matrix } => {
            let q = QuerySettings { at: list_f64(&point.at, "at")?, h: point.h, matrix: rows(&matrix, "matrix")?, ..Default::default() };
            spectrum_cmd(&resolve(&common, vec![system.flags()?, query_flags(q)])?)
        }
        Command::SweepA { common, system, grid, ics, horizon, step, tail, entry_radius } => {
            let q = QuerySettings {
                a_grid: list_f64(&grid.a_grid, "a-grid")?,
                ring: ics.ring,
                interior: ics.interior,
                ic_radius: ics.ic_radius,
                horizon: horizon.horizon,
                horizon_scale: horizon.horizon_scale,
                horizon_min: horizon.horizon_min,
                horizon_max: horizon.horizon_max,
                tail,
                entry_radius,
                ..Default::default()
            };
            let run = Settings { step: step_flag(&step)?, ..Default::default() };
            sweep_a(&resolve(&common, vec![system.flags()?, run, query_flags(q)])?)
        }
        Command::Closeness { common, system, run, grid, delta } => {
            let q = QuerySettings { omega_grid: list_f64(&grid.omega_grid, "omega-grid")?, delta, ..Default::default() };
            closeness(&resolve(&common, vec![system.flags()?, run.flags()?, query_flags(q)])?)
        }
        Command::Certify { common, system, grid, ics, horizon, step, c1, c2, mode, spot_check } => {
            let mode = mode.map(|m| match m {
                PropertyArg::Ps => "ps",
                PropertyArg::Pb => "pb",
                PropertyArg::Pua => "pua",
            });
            let q = QuerySettings {
                a_grid: list_f64(&grid.a_grid, "a-grid")?,
                omega_grid: list_f64(&grid.omega_grid, "omega-grid")?,
                c1,
                c2,
                mode: mode.map(str::to_string),
                horizon: horizon.horizon,
                horizon_factor: horizon.horizon_factor,
                horizon_floor: horizon.horizon_floor,
                spot_check,
                ring: ics.ring,
                interior: ics.interior,
                ..Default::default()
            };
            let run = Settings { step: step_flag(&step)?, ..Default::default() };
            certify(&resolve(&common, vec![system.flags()?, run, query_flags(q)])?)
        }
        Command::Plot { common, system, style, extent, seeds, csv } => {
            plot(&resolve(&common, vec![system.flags()?])?, style, extent, seeds, csv.as_deref())
        }
    }
}

fn violation_json(v: &Violation, rates: &[i64]) -> Value {
    let mut instance = v.rule.expression().to_string();
    for (slot, idx) in ["w_i", "w_j", "w_k", "w_l"].iter().zip(&v.indices) {
        instance = instance.replace(slot, &format!("w'{idx}"));
    }
    let values: Vec<i64> = v.indices.iter().map(|&i| rates[i - 1].abs()).collect();
    json!({"rule": v.rule.id(), "expression": v.rule.expression(), "indices": v.indices, "instance": instance, "values": values})
}

fn validation_json(rates: &[i64], order: Order, r: &ValidationReport) -> Value {
    json!({
        "rates": rates,
        "order": order.as_str(),
        "valid": r.valid,
        "violations": r.violations.iter().map(|v| violation_json(v, rates)).collect::<Vec<_>>(),
        "non_distinct_warnings": r.non_distinct_warnings.iter().map(|v| violation_json(v, rates)).collect::<Vec<_>>(),
    })
}

fn validate_dither(s: &Settings) -> LabResult<()> {
    let rates = Settings::require(&s.rates, "rates")?;
    let order = s.order.as_deref().map(parse_order).transpose()?.unwrap_or(Order::First);
    let r = validate_rates(&rates, order)?;
    let report = validation_json(&rates, order, &r);
    if !r.valid {
        let first = r.violations.first().map(|v| violation_json(v, &rates)["instance"].as_str().unwrap_or("").to_string());
        return Err(LabError::Inadmissible {
            message: format!("{} violation(s) of {} order restrictions, first {}", r.violations.len(), order.as_str(), first.unwrap_or_default()),
            report,
        });
    }
    write_atomic(&out_path(s), &json_bytes(&report))
}

fn simulate(s: &Settings) -> LabResult<()> {
    let (field, spec) = s.system()?;
    let x0 = s.initial_state(&spec, field.dim())?;
    let t0 = s.t0.unwrap_or(0.0);
    let t1 = Settings::require(&s.t_end, "T")?;
    let cfg = IntegratorConfig::new(t0, t1, s.step()).with_stride(s.stride.unwrap_or(1));
    let traj = integrate(&field, &x0, &cfg)?;
    write_atomic(&out_path(s), trajectory_csv(&traj).as_bytes())?;
    if traj.diverged {
        return Err(LabError::Divergence(format!(
            "state norm exceeded {:e} at t = {}",
            cfg.divergence_limit,
            traj.times.last().copied().unwrap_or(t0)
        )));
    }
    Ok(())
}

fn point(s: &Settings, dim: usize) -> LabResult<Vec<f64>> {
    let at = Settings::require(&s.query.at, "at")?;
    if at.len() != dim {
        return Err(LabError::Core(esc_core::Error::DimensionMismatch { expected: dim, got: at.len() }));
    }
    Ok(at)
}

fn average(s: &Settings) -> LabResult<()> {
    let mut spec = s.system_spec()?;
    if spec.mode == Mode::ModelFree {
        spec.mode = Mode::Average;
    }
    if spec.mode != Mode::Average {
        return Err(config_err("average needs a model-free or average algorithm"));
    }
    let cost = s.cost()?;
    let field = build_system(cost.clone(), &spec)?;
    let x = point(s, field.dim())?;
    let mut value = vec![0.0; field.dim()];
    field.eval(0.0, &x, &mut value)?;
    let mut out = json!({"system": field.describe(), "at": x, "average": value});
    if let (BuiltinCost::Quartic2d(_), Algorithm::Gesc, Some(d)) = (&cost, spec.algorithm, &spec.dither) {
        let r = d.rel_amplitudes();
        let closed = quartic_average_closed_form(&x, r[0], r[1], d.amplitude(), spec.params.gain())?;
        out["closed_form"] = json!(closed);
    }
    write_atomic(&out_path(s), &json_bytes(&out))
}

fn autonomous_system(s: &Settings) -> LabResult<esc_core::esc::DynField> {
    let (field, spec) = s.system()?;
    if spec.mode == Mode::ModelFree {
        return Err(config_err("linearization needs an autonomous system; use an -average or -model-based algo"));
    }
    Ok(field)
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn eigen_json(m: &DMatrix<f64>) -> LabResult<Value> {
    Ok(json!(spectrum(m)?.iter().map(|z| json!({"re": z.re, "im": z.im})).collect::<Vec<_>>()))
}

const DEFAULT_FD_STEP: f64 = 1e-5;

fn linearize_cmd(s: &Settings) -> LabResult<()> {
    let field = autonomous_system(s)?;
    let x = point(s, field.dim())?;
    let h = s.query.h.unwrap_or(DEFAULT_FD_STEP);
    let j = linearize(&field, &x, h)?;
    let out = json!({"system": field.describe(), "at": x, "h": h, "matrix": matrix_json(&j), "eigenvalues": eigen_json(&j)?});
    write_atomic(&out_path(s), &json_bytes(&out))
}

fn spectrum_cmd(s: &Settings) -> LabResult<()> {
    let m = match &s.query.matrix {
        Some(rows) => crate::settings::matrix_from_rows(rows)?,
        None => {
            let field = autonomous_system(s)?;
            let x = point(s, field.dim())?;
            linearize(&field, &x, s.query.h.unwrap_or(DEFAULT_FD_STEP))?
        }
    };
    if m.nrows() != m.ncols() {
        return Err(LabError::Core(esc_core::Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() }));
    }
    let out = json!({"matrix": matrix_json(&m), "eigenvalues": eigen_json(&m)?});
    write_atomic(&out_path(s), &json_bytes(&out))
}

/// GESC settings with the dither required; sweeps and certificates vary it.
fn gesc_family(s: &Settings) -> LabResult<(BuiltinCost, SystemSpec, DitherSpec)> {
    let spec = s.system_spec()?;
    if spec.algorithm != Algorithm::Gesc || spec.chart != Chart::Direct {
        return Err(config_err("sweeps, closeness and certificates run the GESC family"));
    }
    let dither = spec.dither.clone().ok_or_else(|| config_err("missing --rates and --a"))?;
    Ok((s.cost()?, spec, dither))
}

fn quartic_growth(cost: &BuiltinCost) -> Option<GrowthBounds> {
    match cost {
        BuiltinCost::Quartic2d(c) => growth_bounds(c).ok(),
        _ => None,
    }
}

fn check_grid(name: &str, v: &[f64], descending: bool) -> LabResult<()> {
    let ordered = v.windows(2).all(|w| if descending { w[1] < w[0] } else { w[1] > w[0] });
    if v.is_empty() || !ordered || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        let dir = if descending { "descending" } else { "ascending" };
        return Err(config_err(format!("{name} must be a nonempty, positive, strictly {dir} list")));
    }
    Ok(())
}

fn jobs(s: &Settings) -> usize {
    s.jobs.unwrap_or_else(default_jobs)
}

fn sweep_a(s: &Settings) -> LabResult<()> {
    let (cost, spec, dither) = gesc_family(s)?;
    let q = &s.query;
    let amplitudes = Settings::require(&q.a_grid, "a-grid")?;
    check_grid("a-grid", &amplitudes, true)?;
    let ics = InitialConditionSet { ring_points: q.ring.unwrap_or(8), interior_points: q.interior.unwrap_or(0), seed: s.resolved_seed()? }
        .sample(cost.dim(), q.ic_radius.unwrap_or(2.0));
    let horizon = match q.horizon {
        Some(t) => SweepHorizon::Fixed(t),
        None => SweepHorizon::AmplitudeScaled {
            scale: q.horizon_scale.unwrap_or(1000.0),
            min: q.horizon_min.unwrap_or(0.1),
            max: q.horizon_max.unwrap_or(3000.0),
        },
    };
    let query = SweepQuery {
        amplitudes: amplitudes.clone(),
        initial_conditions: ics,
        horizon,
        tail_fraction: q.tail.unwrap_or(0.2),
        step: s.step(),
        entry_radius: q.entry_radius,
    };
    let slices = parallel_map(&amplitudes, jobs(s), |&a| -> LabResult<_> {
        let spec = SystemSpec { dither: Some(dither.with_amplitude(a)?), ..spec.clone() };
        let field = build_system(cost.clone(), &spec)?;
        Ok(sweep_amplitude(&field, a, &query)?)
    })?;
    let r = assemble_sweep(slices, quartic_growth(&cost));
    write_atomic(&out_path(s), &json_bytes(&report::sweep(s, &r)))
}

fn closeness(s: &Settings) -> LabResult<()> {
    let (cost, spec, dither) = gesc_family(s)?;
    let omegas = Settings::require(&s.query.omega_grid, "omega-grid")?;
    check_grid("omega-grid", &omegas, false)?;
    let x0 = Settings::require(&s.x0, "x0")?;
    let query = ClosenessQuery {
        omegas,
        x0: x0.clone(),
        horizon: Settings::require(&s.t_end, "T")?,
        step: s.step(),
        threshold: s.query.delta,
    };
    let family = |w: f64| GescModelFree::new(cost.clone(), dither.with_base_frequency(w)?, spec.params);
    let r = closeness_experiment(family, &query, spec.quadrature)?;
    write_atomic(&out_path(s), &json_bytes(&report::closeness(s, dither.amplitude(), &x0, s.query.delta, &r)))
}

fn certify(s: &Settings) -> LabResult<()> {
    let (cost, spec, dither) = gesc_family(s)?;
    let q = &s.query;
    let property = match q.mode.as_deref().unwrap_or("ps") {
        "ps" => PracticalProperty::Stable,
        "pb" => PracticalProperty::Bounded,
        "pua" => PracticalProperty::UniformlyAttractive,
        other => return Err(config_err(format!("unknown mode {other:?}; expected ps, pb or pua"))),
    };
    let horizon = match (q.horizon, quartic_growth(&cost)) {
        (Some(t), _) => HorizonPolicy::Fixed(t),
        (None, Some(g)) => HorizonPolicy::LevelSet {
            factor: q.horizon_factor.unwrap_or(50.0),
            floor: q.horizon_floor.unwrap_or(100.0),
            gain: spec.params.gain(),
            b1: g.b1,
        },
        (None, None) => return Err(config_err("--horizon is required for costs without quartic growth bounds")),
    };
    let query = StabilityQuery {
        c1: Settings::require(&q.c1, "c1")?,
        c2: Settings::require(&q.c2, "c2")?,
        amplitudes: Settings::require(&q.a_grid, "a-grid")?,
        omegas: Settings::require(&q.omega_grid, "omega-grid")?,
        horizon,
        spot_check: q.spot_check.unwrap_or(0.1),
        initial_conditions: InitialConditionSet {
            ring_points: q.ring.unwrap_or(16),
            interior_points: q.interior.unwrap_or(16),
            seed: s.resolved_seed()?,
        },
        property,
        step: s.step(),
    };
    esc_core::stability::certificate_horizon(&query)?;
    let parts = parallel_map(&query.amplitudes, jobs(s), |&a| -> LabResult<_> {
        let family =
            |a: f64, w: f64| GescModelFree::new(cost.clone(), dither.with_amplitude(a)?.with_base_frequency(w)?, spec.params);
        Ok(certify_amplitude(family, a, &query)?)
    })?;
    let r = assemble_certificate(&query, parts)?;
    write_atomic(&out_path(s), &json_bytes(&report::certificate(s, &query, &r)))
}

const FIG1_PANELS: [(f64, f64); 2] = [(100.0, 40.0), (0.01, 2.0)];

fn plot(s: &Settings, style: PlotStyle, extent: Option<f64>, seeds: Option<usize>, csv: Option<&Path>) -> LabResult<()> {
    let stream_cfg = |e: f64| {
        let mut c = StreamConfig::new(e);
        if let Some(n) = seeds {
            c.seeds = n;
        }
        c
    };
    let panels = match style {
        PlotStyle::Stream => {
            let field = autonomous_system(s)?;
            let e = extent.unwrap_or(2.0);
            vec![Panel::from_streamlines(field.describe(), e, &streamlines(&field, &stream_cfg(e))?)]
        }
        PlotStyle::Fig1 => {
            let base = Settings {
                cost: Some("quartic2d".into()),
                algo: Some("gesc-average".into()),
                rates: Some(vec![1, 3]),
                ramp: Some(vec![12.0, 1.0]),
                ..Default::default()
            }
            .overlay(s.clone());
            let mut panels = Vec::new();
            for (a, e) in FIG1_PANELS {
                let field = autonomous_system(&Settings { a: Some(a), ..base.clone() })?;
                panels.push(Panel::from_streamlines(format!("average GESC, a = {a}"), e, &streamlines(&field, &stream_cfg(e))?));
            }
            panels
        }
        PlotStyle::Trajectory => {
            let path = csv.ok_or_else(|| config_err("--style trajectory needs --csv"))?;
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            let rows = parse_trajectory_csv(&text).map_err(config_err)?;
            if rows.first().map(|r| r.1.len()).unwrap_or(0) < 2 {
                return Err(config_err("trajectory plots need at least two state columns"));
            }
            vec![Panel::from_trajectory(path.display().to_string(), rows.iter().map(|r| [r.1[0], r.1[1]]).collect())]
        }
    };
    write_atomic(&out_path(s), render_svg(&panels).as_bytes())
}
