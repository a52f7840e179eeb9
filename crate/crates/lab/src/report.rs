//! JSON reports of the lab experiments.

use esc_core::stability::{CertificateCell, ClosenessReport, StabilityQuery, StabilityReport, SweepReport};
use serde_json::{json, Value};

use crate::settings::Settings;

fn bound(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn sweep(settings: &Settings, r: &SweepReport) -> Value {
    let cells: Vec<Value> = r
        .cells
        .iter()
        .map(|c| {
            json!({
                "a": c.a,
                "omega": Value::Null,
                "x0": c.x0,
                "horizon": c.horizon,
                "bound": bound(c.bound),
                "max_norm": bound(c.max_norm),
                "entered_at": c.entered_at,
                "diverged": c.diverged,
            })
        })
        .collect();
    let per_a: Vec<Value> = r
        .max_bounds
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| json!({"a": a, "bound": bound(b), "gamma": r.gains.as_ref().map(|g| g[i])}))
        .collect();
    json!({
        "query": settings,
        "grid": {"a": r.max_bounds.iter().map(|p| p.0).collect::<Vec<_>>()},
        "cells": cells,
        "thresholds": {"max_bounds": per_a, "monotone": r.monotone, "within_gain": r.within_gain},
        "verdict": r.verdict,
    })
}

pub fn closeness(settings: &Settings, a: f64, x0: &[f64], delta: Option<f64>, r: &ClosenessReport) -> Value {
    let cells: Vec<Value> = r
        .gaps
        .iter()
        .map(|&(w, g)| json!({"a": a, "omega": w, "x0": x0, "bound": bound(g), "entered_at": Value::Null}))
        .collect();
    json!({
        "query": settings,
        "grid": {"omega": r.gaps.iter().map(|p| p.0).collect::<Vec<_>>()},
        "cells": cells,
        "thresholds": {"delta": delta, "omega_star": r.omega_star, "average_step": r.average_step},
        "verdict": r.omega_star.is_some(),
    })
}

fn certificate_cell(c: &CertificateCell) -> Value {
    json!({
        "a": c.a,
        "omega": c.omega,
        "x0": c.x0,
        "bound": bound(c.bound),
        "max_norm": bound(c.max_norm),
        "entered_at": c.entered_at,
        "settled_after": c.settled_after,
        "diverged": c.diverged,
        "satisfied": c.satisfied,
    })
}

pub fn certificate(settings: &Settings, q: &StabilityQuery, r: &StabilityReport) -> Value {
    let grid: Vec<Value> = r
        .grid
        .iter()
        .map(|g| json!({"a": g.a, "omega": g.omega, "satisfied": g.satisfied, "evaluated": g.evaluated}))
        .collect();
    let thresholds = r.thresholds.map(|t| json!({"a_star": t.a_star, "omega_star": t.omega_star, "T": t.t}));
    json!({
        "query": settings,
        "property": q.property.as_str(),
        "horizon": r.horizon,
        "samples": r.sample_count,
        "grid": {"a": q.amplitudes, "omega": q.omegas, "outcomes": grid},
        "cells": r.cells.iter().map(certificate_cell).collect::<Vec<_>>(),
        "omega_star": r.omega_star.iter().map(|&(a, w)| json!({"a": a, "omega_star": w})).collect::<Vec<_>>(),
        "unresolved": r.unresolved,
        "worst": r.worst.as_ref().map(certificate_cell),
        "thresholds": thresholds,
        "verdict": r.verdict,
        "evidence": "finite-sample numerical evidence over the sampled initial conditions and horizon, not a proof",
    })
}
