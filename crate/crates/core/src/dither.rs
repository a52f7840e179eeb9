//! Sinusoidal dither signals and admissibility of the relative rates.
//!
//! Rates are nonzero integers so every dither has an exact common period and
//! the admissibility rules reduce to exact integer comparisons on `|ω'ᵢ|`.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};

/// Which family of admissibility rules a rate vector must satisfy.
///
/// `First` suffices for gradient estimation; `Second` adds the rules needed
/// for the element-wise Hessian estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::First => "first",
            Order::Second => "second",
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One admissibility rule. Indices in a [`Violation`] are 1-based and follow
/// the order of the placeholders in [`Rule::expression`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    /// `|ω'ᵢ| = |ω'ⱼ|`
    EqualRates,
    /// `|ω'ᵢ| = 2|ω'ⱼ|`
    DoubleRate,
    /// `|ω'ᵢ| + |ω'ⱼ| = |ω'ₖ|` (also covers the difference form)
    SumEqualsRate,
    /// `|ω'ᵢ| + |ω'ⱼ| = 2|ω'ₖ|`
    SumEqualsDouble,
    /// `|ω'ᵢ| - |ω'ⱼ| = 2|ω'ₖ|`
    DifferenceEqualsDouble,
    /// `|ω'ᵢ| + |ω'ⱼ| = |ω'ₖ| + |ω'ₗ|` (also covers difference-equals-difference)
    SumEqualsSum,
    /// `|ω'ᵢ| + |ω'ⱼ| = |ω'ₖ| - |ω'ₗ|`
    SumEqualsDifference,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::EqualRates => "equal-rates",
            Rule::DoubleRate => "double-rate",
            Rule::SumEqualsRate => "sum-equals-rate",
            Rule::SumEqualsDouble => "sum-equals-double",
            Rule::DifferenceEqualsDouble => "difference-equals-double",
            Rule::SumEqualsSum => "sum-equals-sum",
            Rule::SumEqualsDifference => "sum-equals-difference",
        }
    }

    pub fn expression(self) -> &'static str {
        match self {
            Rule::EqualRates => "|w_i| = |w_j|",
            Rule::DoubleRate => "|w_i| = 2|w_j|",
            Rule::SumEqualsRate => "|w_i| + |w_j| = |w_k|",
            Rule::SumEqualsDouble => "|w_i| + |w_j| = 2|w_k|",
            Rule::DifferenceEqualsDouble => "|w_i| - |w_j| = 2|w_k|",
            Rule::SumEqualsSum => "|w_i| + |w_j| = |w_k| + |w_l|",
            Rule::SumEqualsDifference => "|w_i| + |w_j| = |w_k| - |w_l|",
        }
    }

    pub fn order(self) -> Order {
        match self {
            Rule::EqualRates | Rule::DoubleRate => Order::First,
            _ => Order::Second,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Violation {
    pub rule: Rule,
    /// 1-based indices into the rate vector.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
    /// Second-order rule instances with repeated indices (`k ∈ {i, j}`) that
    /// would fail. The rules only bind for distinct indices, so these do not
    /// affect `valid`; they are surfaced for the designer.
    pub non_distinct_warnings: Vec<Violation>,
}

/// Checks `rates` against the first- or second-order restrictions.
///
/// Rules that need more distinct indices than `rates.len()` provides are
/// vacuously satisfied. Instances are reported once, in a canonical index
/// order, so equivalent sign variants of the same equation do not repeat.
pub fn validate_rates(rates: &[i64], order: Order) -> Result<ValidationReport> {
    if rates.is_empty() {
        return Err(Error::EmptyRates);
    }
    if let Some(i) = rates.iter().position(|&r| r == 0) {
        return Err(Error::ZeroRate(i));
    }
    let w: Vec<i64> = rates.iter().map(|r| r.abs()).collect();
    let n = w.len();
    let mut violations = Vec::new();
    let v = |rule, idx: &[usize]| Violation {
        rule,
        indices: idx.iter().map(|i| i + 1).collect(),
    };

    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if i < j && w[i] == w[j] {
                violations.push(v(Rule::EqualRates, &[i, j]));
            }
            if w[i] == 2 * w[j] {
                violations.push(v(Rule::DoubleRate, &[i, j]));
            }
        }
    }

    let mut warnings = Vec::new();
    if order == Order::Second {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for k in 0..n {
                    let distinct = k != i && k != j;
                    let mut record = |rule, idx: &[usize]| {
                        if distinct {
                            violations.push(v(rule, idx));
                        } else {
                            warnings.push(v(rule, idx));
                        }
                    };
                    if i < j && w[i] + w[j] == w[k] {
                        record(Rule::SumEqualsRate, &[i, j, k]);
                    }
                    if i < j && w[i] + w[j] == 2 * w[k] {
                        record(Rule::SumEqualsDouble, &[i, j, k]);
                    }
                    if w[i] - w[j] == 2 * w[k] {
                        record(Rule::DifferenceEqualsDouble, &[i, j, k]);
                    }
                }
            }
        }
        // The difference form |w_i| - |w_j| = |w_k| is the sum form
        // |w_j| + |w_k| = |w_i|, so SumEqualsRate already covers ±.
        for i in 0..n {
            for j in (i + 1)..n {
                for k in 0..n {
                    for l in (k + 1)..n {
                        if k == i || k == j || l == i || l == j {
                            continue;
                        }
                        if (i, j) < (k, l) && w[i] + w[j] == w[k] + w[l] {
                            violations.push(v(Rule::SumEqualsSum, &[i, j, k, l]));
                        }
                    }
                }
            }
        }
        // |w_i| + |w_j| = |w_k| - |w_l| means three rates sum to the fourth;
        // canonical form lists the two smallest summand indices first.
        for k in 0..n {
            for a in 0..n {
                for b in (a + 1)..n {
                    for c in (b + 1)..n {
                        if [a, b, c].contains(&k) {
                            continue;
                        }
                        if w[a] + w[b] + w[c] == w[k] {
                            violations.push(v(Rule::SumEqualsDifference, &[a, b, k, c]));
                        }
                    }
                }
            }
        }
    }

    violations.sort();
    warnings.sort();
    warnings.dedup();
    Ok(ValidationReport {
        valid: violations.is_empty(),
        violations,
        non_distinct_warnings: warnings,
    })
}

/// Scales `raw` to unit sum of squares.
pub fn normalize_amplitudes(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(invalid("amplitudes", "empty"));
    }
    if let Some(i) = raw.iter().position(|&r| r == 0.0 || !r.is_finite()) {
        return Err(Error::ZeroAmplitude(i));
    }
    let norm = libm::sqrt(raw.iter().map(|r| r * r).sum::<f64>());
    Ok(raw.iter().map(|r| r / norm).collect())
}

/// All strictly increasing positive rate vectors with entries `≤ max_rate`
/// that pass the rules of `order`, in lexicographic order.
pub fn enumerate_admissible(n: usize, max_rate: i64, order: Order) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    if n == 0 || max_rate < n as i64 {
        return out;
    }
    let mut current: Vec<i64> = (1..=n as i64).collect();
    loop {
        if validate_rates(&current, order).map(|r| r.valid).unwrap_or(false) {
            out.push(current.clone());
        }
        // next combination in lexicographic order
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if current[i] < max_rate - (n - 1 - i) as i64 {
                break;
            }
        }
        current[i] += 1;
        for j in (i + 1)..n {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// `2π` split so that `k · TAU_HI` is exact for `|k| < 2^29`.
const TAU_HI: f64 = 6.283_185_482_025_146_5;
const TAU_LO: f64 = core::f64::consts::TAU - TAU_HI;
const REDUCE_LIMIT: f64 = 3.0e9;

/// `τ mod 2π`. Rates are integers, so this leaves every `sin(ω'ᵢ τ)`
/// unchanged while keeping `libm::sin` off its slow large-argument path.
#[inline]
fn reduce_phase(phase: f64) -> f64 {
    if phase.abs() < REDUCE_LIMIT {
        let k = libm::floor(phase / core::f64::consts::TAU);
        (phase - k * TAU_HI) - k * TAU_LO
    } else {
        phase % core::f64::consts::TAU
    }
}

/// Relative rates and amplitudes plus the absolute amplitude `a` and base
/// frequency `ω` of `a s(ωt)`, with `sᵢ(τ) = rᵢ sin(ω'ᵢ τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherSpec {
    rates: Vec<i64>,
    rel_amplitudes: Vec<f64>,
    amplitude: f64,
    base_frequency: f64,
    order: Order,
    second_order_admissible: bool,
}

impl DitherSpec {
    /// Validates every invariant: matching lengths, nonzero unit-norm
    /// amplitudes, `a > 0`, `ω > 0`, and the rate rules of `order`.
    pub fn new(
        rates: Vec<i64>,
        rel_amplitudes: Vec<f64>,
        amplitude: f64,
        base_frequency: f64,
        order: Order,
    ) -> Result<Self> {
        if rates.len() != rel_amplitudes.len() {
            return Err(Error::DimensionMismatch {
                expected: rates.len(),
                got: rel_amplitudes.len(),
            });
        }
        if let Some(i) = rel_amplitudes.iter().position(|&r| r == 0.0 || !r.is_finite()) {
            return Err(Error::ZeroAmplitude(i));
        }
        let sum_sq: f64 = rel_amplitudes.iter().map(|r| r * r).sum();
        if (sum_sq - 1.0).abs() > 1e-12 {
            return Err(Error::NotNormalized(sum_sq));
        }
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(invalid("amplitude", "dither amplitude a must be positive"));
        }
        if !(base_frequency > 0.0) || !base_frequency.is_finite() {
            return Err(invalid("base_frequency", "omega must be positive"));
        }
        let report = validate_rates(&rates, order)?;
        if !report.valid {
            return Err(Error::InadmissibleRates {
                order: order.as_str(),
                violations: report.violations.len(),
            });
        }
        let second_order_admissible = match order {
            Order::Second => true,
            Order::First => validate_rates(&rates, Order::Second)?.valid,
        };
        Ok(Self {
            rates,
            rel_amplitudes,
            amplitude,
            base_frequency,
            order,
            second_order_admissible,
        })
    }

    /// Builds a spec from raw (unnormalized) relative amplitudes.
    pub fn from_raw_amplitudes(
        rates: Vec<i64>,
        raw_amplitudes: &[f64],
        amplitude: f64,
        base_frequency: f64,
        order: Order,
    ) -> Result<Self> {
        let r = normalize_amplitudes(raw_amplitudes)?;
        Self::new(rates, r, amplitude, base_frequency, order)
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    pub fn rates(&self) -> &[i64] {
        &self.rates
    }

    pub fn rel_amplitudes(&self) -> &[f64] {
        &self.rel_amplitudes
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn base_frequency(&self) -> f64 {
        self.base_frequency
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn is_second_order_admissible(&self) -> bool {
        self.second_order_admissible
    }

    /// Same relative shape with a different absolute amplitude.
    pub fn with_amplitude(&self, amplitude: f64) -> Result<Self> {
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(invalid("amplitude", "dither amplitude a must be positive"));
        }
        Ok(Self {
            amplitude,
            ..self.clone()
        })
    }

    pub fn with_base_frequency(&self, base_frequency: f64) -> Result<Self> {
        if !(base_frequency > 0.0) || !base_frequency.is_finite() {
            return Err(invalid("base_frequency", "omega must be positive"));
        }
        Ok(Self {
            base_frequency,
            ..self.clone()
        })
    }

    /// `max |ω'ᵢ| · ω`, the fastest absolute dither frequency.
    pub fn fastest_frequency(&self) -> f64 {
        self.rates.iter().map(|r| r.abs()).max().unwrap_or(1) as f64 * self.base_frequency
    }

    /// Writes `sin(ω'ᵢ τ)` for every channel.
    #[inline]
    pub fn sines(&self, phase: f64, out: &mut [f64]) {
        let phase = reduce_phase(phase);
        for (o, &r) in out.iter_mut().zip(&self.rates) {
            *o = libm::sin(r as f64 * phase);
        }
    }

    /// `s(τ)` with `sᵢ(τ) = rᵢ sin(ω'ᵢ τ)`; `τ = ωt` is the dimensionless phase.
    pub fn eval(&self, phase: f64) -> DVector<f64> {
        let phase = reduce_phase(phase);
        DVector::from_iterator(
            self.dim(),
            self.rates
                .iter()
                .zip(&self.rel_amplitudes)
                .map(|(&w, &r)| r * libm::sin(w as f64 * phase)),
        )
    }
}
