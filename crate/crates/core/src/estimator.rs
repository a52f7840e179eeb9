//! Demodulated gradient and Hessian estimates from a single dithered cost
//! measurement `J(θ̂ + a s(τ))`.

use nalgebra::{DMatrix, DVector};

use crate::cost::CostFunction;
use crate::dither::DitherSpec;
use crate::error::{Error, Result};

/// Arguments shared by both estimators. `phase` is the dimensionless
/// `τ = ωt`, so the same call serves wall-time integration and quadrature.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorInput<'a, C: ?Sized> {
    pub cost: &'a C,
    pub dither: &'a DitherSpec,
    pub theta: &'a [f64],
    pub phase: f64,
}

const STACK_DIM: usize = 8;

fn check_dims<C: CostFunction + ?Sized>(cost: &C, dither: &DitherSpec, theta: &[f64]) -> Result<()> {
    let n = cost.dim();
    for got in [dither.dim(), theta.len()] {
        if got != n {
            return Err(Error::DimensionMismatch { expected: n, got });
        }
    }
    Ok(())
}

/// `J(θ̂ + a s(τ))` given precomputed `sin(ω'ᵢ τ)`.
#[inline]
pub(crate) fn measure<C: CostFunction + ?Sized>(cost: &C, dither: &DitherSpec, theta: &[f64], sines: &[f64]) -> f64 {
    let a = dither.amplitude();
    let r = dither.rel_amplitudes();
    let n = theta.len();
    if n <= STACK_DIM {
        let mut p = [0.0; STACK_DIM];
        for i in 0..n {
            p[i] = theta[i] + a * r[i] * sines[i];
        }
        cost.eval(&p[..n])
    } else {
        let p: alloc::vec::Vec<f64> = (0..n).map(|i| theta[i] + a * r[i] * sines[i]).collect();
        cost.eval(&p)
    }
}

/// `ĝᵢ = (2 / (a rᵢ)) sin(ω'ᵢ τ) J` written into `out`, for a measurement `j`.
#[inline]
pub(crate) fn demodulate_gradient(dither: &DitherSpec, sines: &[f64], j: f64, out: &mut [f64]) {
    let a = dither.amplitude();
    for ((o, &r), &s) in out.iter_mut().zip(dither.rel_amplitudes()).zip(sines) {
        *o = 2.0 / (a * r) * s * j;
    }
}

/// `Ĥᵢᵢ = 16/(a² rᵢ²) (sin²(ω'ᵢτ) − ½) J` and
/// `Ĥᵢⱼ = 4/(a² rᵢ rⱼ) sin(ω'ᵢτ) sin(ω'ⱼτ) J`; both triangles share one value.
pub(crate) fn demodulate_hessian(dither: &DitherSpec, sines: &[f64], j: f64, out: &mut DMatrix<f64>) {
    let a2 = dither.amplitude() * dither.amplitude();
    let r = dither.rel_amplitudes();
    let n = r.len();
    for i in 0..n {
        out[(i, i)] = 16.0 / (a2 * r[i] * r[i]) * (sines[i] * sines[i] - 0.5) * j;
        for k in 0..i {
            let v = 4.0 / (a2 * r[i] * r[k]) * sines[i] * sines[k] * j;
            out[(i, k)] = v;
            out[(k, i)] = v;
        }
    }
}

fn sines_of(dither: &DitherSpec, phase: f64) -> DVector<f64> {
    let mut s = DVector::zeros(dither.dim());
    dither.sines(phase, s.as_mut_slice());
    s
}

/// Instantaneous gradient estimate; one cost evaluation.
pub fn gradient_estimate<C: CostFunction + ?Sized>(input: &EstimatorInput<'_, C>) -> Result<DVector<f64>> {
    check_dims(input.cost, input.dither, input.theta)?;
    let sines = sines_of(input.dither, input.phase);
    let j = measure(input.cost, input.dither, input.theta, sines.as_slice());
    let mut out = DVector::zeros(input.theta.len());
    demodulate_gradient(input.dither, sines.as_slice(), j, out.as_mut_slice());
    Ok(out)
}

/// Instantaneous Hessian estimate; one cost evaluation shared by all entries.
/// The dither must be second-order admissible.
pub fn hessian_estimate<C: CostFunction + ?Sized>(input: &EstimatorInput<'_, C>) -> Result<DMatrix<f64>> {
    check_dims(input.cost, input.dither, input.theta)?;
    if !input.dither.is_second_order_admissible() {
        return Err(Error::InadmissibleRates {
            order: "second",
            violations: crate::dither::validate_rates(input.dither.rates(), crate::dither::Order::Second)?
                .violations
                .len(),
        });
    }
    let sines = sines_of(input.dither, input.phase);
    let j = measure(input.cost, input.dither, input.theta, sines.as_slice());
    let n = input.theta.len();
    let mut out = DMatrix::zeros(n, n);
    demodulate_hessian(input.dither, sines.as_slice(), j, &mut out);
    Ok(out)
}
