//! Experiment settings: a JSON config file overlaid by command-line flags,
//! then validated into core objects before anything runs.

use std::path::{Path, PathBuf};

use esc_core::averaging::QuadratureConfig;
use esc_core::cost::{builtin_cost, BuiltinCost, CostParams};
use esc_core::dither::{DitherSpec, Order};
use esc_core::esc::{build_system, nesc_state, to_log_chart, Algorithm, Chart, DynField, EscParams, Mode, SystemSpec};
use esc_core::integrator::StepSize;
use esc_core::matrix::SpdMatrix;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, LabError, LabResult};

/// A step given as a number or the string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSetting {
    Fixed(f64),
    Named(AutoStep),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoStep {
    Auto,
}

impl StepSetting {
    pub fn parse(s: &str) -> LabResult<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Named(AutoStep::Auto));
        }
        s.parse().map(Self::Fixed).map_err(|_| config_err(format!("step must be a number or 'auto', got {s:?}")))
    }

    pub fn to_core(self) -> StepSize {
        match self {
            Self::Fixed(h) => StepSize::Fixed(h),
            Self::Named(AutoStep::Auto) => StepSize::Auto,
        }
    }
}

/// Parameters of the lab subcommands; all optional so that files and flags
/// can each supply a part.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySettings {
    pub at: Option<Vec<f64>>,
    pub h: Option<f64>,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub a_grid: Option<Vec<f64>>,
    pub omega_grid: Option<Vec<f64>>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub mode: Option<String>,
    pub horizon: Option<f64>,
    pub horizon_factor: Option<f64>,
    pub horizon_floor: Option<f64>,
    pub horizon_scale: Option<f64>,
    pub horizon_min: Option<f64>,
    pub horizon_max: Option<f64>,
    pub spot_check: Option<f64>,
    pub ring: Option<usize>,
    pub interior: Option<usize>,
    pub tail: Option<f64>,
    pub delta: Option<f64>,
    pub ic_radius: Option<f64>,
    pub entry_radius: Option<f64>,
}

/// The full experiment description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub cost: Option<String>,
    pub q: Option<Vec<Vec<f64>>>,
    pub dim: Option<usize>,
    pub algo: Option<String>,
    pub chart: Option<String>,
    pub rates: Option<Vec<i64>>,
    pub ramp: Option<Vec<f64>>,
    pub a: Option<f64>,
    pub omega: Option<f64>,
    pub order: Option<String>,
    pub k: Option<f64>,
    pub omega_l: Option<f64>,
    pub gamma0: Option<Vec<Vec<f64>>>,
    pub x0: Option<Vec<f64>>,
    pub t0: Option<f64>,
    #[serde(rename = "T")]
    pub t_end: Option<f64>,
    pub step: Option<StepSetting>,
    pub stride: Option<usize>,
    pub quad_points: Option<usize>,
    pub quad_tol: Option<f64>,
    pub seed: Option<u64>,
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub query: QuerySettings,
}

macro_rules! overlay {
    ($base:expr, $over:expr; $($field:ident),* $(,)?) => {
        $( if $over.$field.is_some() { $base.$field = $over.$field; } )*
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("malformed config {}: {e}", path.display())))
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(mut self, over: Settings) -> Self {
        overlay!(self, over; cost, q, dim, algo, chart, rates, ramp, a, omega, order, k, omega_l, gamma0,
            x0, t0, t_end, step, stride, quad_points, quad_tol, seed, jobs, out);
        overlay!(self.query, over.query; at, h, matrix, a_grid, omega_grid, c1, c2, mode, horizon,
            horizon_factor, horizon_floor, horizon_scale, horizon_min, horizon_max, spot_check, ring,
            interior, tail, delta, ic_radius, entry_radius);
        self
    }

    /// Seed from the settings, else `ESC_LAB_SEED`, else 0.
    pub fn resolved_seed(&self) -> LabResult<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("ESC_LAB_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| config_err(format!("ESC_LAB_SEED must be an unsigned integer, got {v:?}"))),
            Err(_) => Ok(0),
        }
    }

    pub fn algorithm(&self) -> LabResult<(Algorithm, Mode)> {
        let name = self.algo.as_deref().unwrap_or("gesc");
        Ok(match name {
            "gesc" => (Algorithm::Gesc, Mode::ModelFree),
            "gesc-average" => (Algorithm::Gesc, Mode::Average),
            "gesc-model-based" => (Algorithm::Gesc, Mode::ModelBased),
            "nesc" => (Algorithm::Nesc, Mode::ModelFree),
            "nesc-average" => (Algorithm::Nesc, Mode::Average),
            "nesc-model-based" => (Algorithm::Nesc, Mode::ModelBased),
            other => {
                return Err(config_err(format!(
                    "unknown algo {other:?}; expected gesc, gesc-average, gesc-model-based, nesc, nesc-average or nesc-model-based"
                )))
            }
        })
    }

    pub fn chart(&self) -> LabResult<Chart> {
        match self.chart.as_deref().unwrap_or("direct") {
            "direct" => Ok(Chart::Direct),
            "log" => Ok(Chart::Log),
            other => Err(config_err(format!("unknown chart {other:?}; expected direct or log"))),
        }
    }

    pub fn cost(&self) -> LabResult<BuiltinCost> {
        let id = self.cost.as_deref().ok_or_else(|| config_err("missing cost"))?;
        let q = self.q.as_ref().map(|rows| matrix_from_rows(rows)).transpose()?;
        Ok(builtin_cost(id, &CostParams { q, dim: self.dim })?)
    }

    pub fn order(&self, default: Order) -> LabResult<Order> {
        match self.order.as_deref() {
            None => Ok(default),
            Some(s) => parse_order(s),
        }
    }

    pub fn params(&self) -> LabResult<EscParams> {
        Ok(EscParams::new(self.k.unwrap_or(1.0), self.omega_l.unwrap_or(1.0))?)
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        let d = QuadratureConfig::default();
        QuadratureConfig { points_per_period: self.quad_points.unwrap_or(d.points_per_period), tol: self.quad_tol.unwrap_or(d.tol), ..d }
    }

    /// The dither, or `None` when no rates were given.
    pub fn dither(&self, default_order: Order) -> LabResult<Option<DitherSpec>> {
        let Some(rates) = self.rates.clone() else {
            return Ok(None);
        };
        let ramp = self.ramp.clone().unwrap_or_else(|| vec![1.0; rates.len()]);
        let a = self.a.ok_or_else(|| config_err("missing dither amplitude a"))?;
        let omega = self.omega.unwrap_or(1.0);
        Ok(Some(DitherSpec::from_raw_amplitudes(rates, &ramp, a, omega, self.order(default_order)?)?))
    }

    pub fn system_spec(&self) -> LabResult<SystemSpec> {
        let (algorithm, mode) = self.algorithm()?;
        let default_order = if algorithm == Algorithm::Nesc { Order::Second } else { Order::First };
        let dither = self.dither(default_order)?;
        if mode != Mode::ModelBased && dither.is_none() {
            return Err(config_err("model-free and average algorithms need --rates and --a"));
        }
        Ok(SystemSpec { algorithm, mode, chart: self.chart()?, params: self.params()?, dither, quadrature: self.quadrature() })
    }

    pub fn system(&self) -> LabResult<(DynField, SystemSpec)> {
        let spec = self.system_spec()?;
        Ok((build_system(self.cost()?, &spec)?, spec))
    }

    /// Full initial state: `x0` for GESC, `[θ0, vech Γ0]` or
    /// `[θ0, vech ln Γ0]` for NESC with `Γ0` defaulting to the identity.
    pub fn initial_state(&self, spec: &SystemSpec, dim: usize) -> LabResult<Vec<f64>> {
        let x0 = self.x0.clone().ok_or_else(|| config_err("missing x0"))?;
        if spec.algorithm == Algorithm::Gesc {
            return Ok(x0);
        }
        let n = x0.len();
        let g = match &self.gamma0 {
            Some(rows) => matrix_from_rows(rows)?,
            None => DMatrix::identity(n, n),
        };
        let direct = nesc_state(&x0, &SpdMatrix::new(g)?)?;
        if direct.len() != dim {
            return Err(LabError::Core(esc_core::Error::DimensionMismatch { expected: dim, got: direct.len() }));
        }
        match spec.chart {
            Chart::Direct => Ok(direct),
            Chart::Log => Ok(to_log_chart(&direct)?),
        }
    }

    pub fn step(&self) -> StepSize {
        self.step.map(StepSetting::to_core).unwrap_or(StepSize::Auto)
    }

    pub fn require<T: Clone>(v: &Option<T>, name: &str) -> LabResult<T> {
        v.clone().ok_or_else(|| config_err(format!("missing {name}")))
    }
}

pub fn parse_order(s: &str) -> LabResult<Order> {
    match s {
        "first" => Ok(Order::First),
        "second" => Ok(Order::Second),
        other => Err(config_err(format!("unknown order {other:?}; expected first or second"))),
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> LabResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(config_err("matrix rows must be nonempty and of equal length"));
    }
    Ok(DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j]))
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect()
}

pub fn parse_i64_list(s: &str) -> Result<Vec<i64>, String> {
    s.split(',').map(|v| v.trim().parse::<i64>().map_err(|e| format!("{v:?}: {e}"))).collect()
}

/// `"3,1;1,2"` as rows.
pub fn parse_rows(s: &str) -> Result<Vec<Vec<f64>>, String> {
    s.split(';').map(parse_f64_list).collect()
}
