//! Half-vectorization, the SPD matrix logarithm and its derivative along a
//! flow via divided differences of `ln` at the eigenvalues.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const SINGULAR_TOL: f64 = 1e-12;
/// Relative gap below which two eigenvalues are treated as equal.
pub const EIGEN_TIE_TOL: f64 = 1e-9;

fn asymmetry(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((x[(i, j)] - x[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(x: &DMatrix<f64>) -> Result<()> {
    if !x.is_square() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: x.ncols(),
        });
    }
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let dev = asymmetry(x);
    if dev > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric(dev));
    }
    Ok(())
}

/// `n(n+1)/2`.
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Recovers `n` from `n(n+1)/2`.
pub fn triangular_side(len: usize) -> Option<usize> {
    let n = ((libm::sqrt(8.0 * len as f64 + 1.0) - 1.0) / 2.0) as usize;
    (n..=n + 1).find(|&m| vech_len(m) == len)
}

/// Column-stacked lower triangle of a symmetric matrix.
pub fn vech(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_symmetric(x)?;
    let mut out = Vec::with_capacity(vech_len(x.nrows()));
    vech_into(x, &mut out);
    Ok(DVector::from_vec(out))
}

pub(crate) fn vech_into(x: &DMatrix<f64>, out: &mut Vec<f64>) {
    let n = x.nrows();
    for j in 0..n {
        for i in j..n {
            out.push(x[(i, j)]);
        }
    }
}

pub(crate) fn vech_write(x: &DMatrix<f64>, out: &mut [f64]) {
    let n = x.nrows();
    let mut p = 0;
    for j in 0..n {
        for i in j..n {
            out[p] = x[(i, j)];
            p += 1;
        }
    }
}

/// Inverse of [`vech`]: fills both triangles from the stacked lower one.
pub fn unvech(v: &[f64]) -> Result<DMatrix<f64>> {
    let n = triangular_side(v.len())
        .ok_or_else(|| invalid("vech", "length is not a triangular number"))?;
    let mut x = DMatrix::zeros(n, n);
    let mut p = 0;
    for j in 0..n {
        for i in j..n {
            x[(i, j)] = v[p];
            x[(j, i)] = v[p];
            p += 1;
        }
    }
    Ok(x)
}

/// Duplication matrix `Dₙ` with `vec(X) = Dₙ vech(X)` (column-major `vec`).
pub fn duplication_matrix(n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n * n, vech_len(n));
    let mut p = 0;
    for j in 0..n {
        for i in j..n {
            d[(j * n + i, p)] = 1.0;
            d[(i * n + j, p)] = 1.0;
            p += 1;
        }
    }
    d
}

/// Elimination matrix `Lₙ` with `vech(X) = Lₙ vec(X)`.
pub fn elimination_matrix(n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(vech_len(n), n * n);
    let mut p = 0;
    for j in 0..n {
        for i in j..n {
            l[(p, j * n + i)] = 1.0;
            p += 1;
        }
    }
    l
}

/// A symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&x)?;
        let eig = SymmetricEigen::new(symmetrize(&x));
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite(min));
        }
        Ok(Self(x))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn eig(&self) -> EigDecomposition {
        EigDecomposition::of_symmetric(&self.0)
    }
}

/// `Γ = Σ diag(λ) Σᵀ` with orthogonal `Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomposition {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl EigDecomposition {
    pub fn of_symmetric(x: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(symmetrize(x));
        Self {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        }
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_values(|l| l)
    }

    /// `Σ diag(f(λ)) Σᵀ`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.values.map(f));
        let m = &self.vectors * d * self.vectors.transpose();
        symmetrize(&m)
    }
}

pub(crate) fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// Principal logarithm `Σ diag(ln λ) Σᵀ`.
pub fn log_spd(gamma: &SpdMatrix) -> Result<DMatrix<f64>> {
    let eig = gamma.eig();
    check_spectrum(&eig)?;
    Ok(eig.map_values(libm::log))
}

/// Matrix exponential of a symmetric matrix; exact inverse of [`log_spd`].
pub fn exp_sym(s: &DMatrix<f64>) -> Result<SpdMatrix> {
    check_symmetric(s)?;
    let eig = EigDecomposition::of_symmetric(s);
    Ok(SpdMatrix(eig.map_values(libm::exp)))
}

fn check_spectrum(eig: &EigDecomposition) -> Result<()> {
    let min = eig.values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > SINGULAR_TOL) {
        return Err(Error::NotPositiveDefinite(min));
    }
    Ok(())
}

/// Divided differences of `ln` at the eigenvalues:
/// `Cᵢⱼ = (ln λᵢ − ln λⱼ)/(λᵢ − λⱼ)`, or `1/max(λᵢ, λⱼ)` when the two are
/// within [`EIGEN_TIE_TOL`] relative.
pub fn dalecki_krein_c(eig: &EigDecomposition) -> Result<DMatrix<f64>> {
    let n = eig.values.len();
    if let Some(&bad) = eig.values.iter().find(|&&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite(bad));
    }
    let lambda = &eig.values;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (li, lj) = (lambda[i], lambda[j]);
        let big = li.max(lj);
        if (li - lj).abs() <= EIGEN_TIE_TOL * big {
            1.0 / big
        } else {
            (libm::log(li) - libm::log(lj)) / (li - lj)
        }
    }))
}

/// `d/dt vech(ln Γ) = vech(Σ [C ⊙ (Σᵀ Γ̇ Σ)] Σᵀ)`.
pub fn log_coordinate_rate(gamma: &SpdMatrix, gamma_dot: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_symmetric(gamma_dot)?;
    if gamma_dot.nrows() != gamma.dim() {
        return Err(Error::DimensionMismatch {
            expected: gamma.dim(),
            got: gamma_dot.nrows(),
        });
    }
    let eig = gamma.eig();
    check_spectrum(&eig)?;
    let rate = log_rate_with(&eig, gamma_dot)?;
    let mut out = Vec::with_capacity(vech_len(gamma.dim()));
    vech_into(&rate, &mut out);
    Ok(DVector::from_vec(out))
}

pub(crate) fn log_rate_with(eig: &EigDecomposition, gamma_dot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = dalecki_krein_c(eig)?;
    let s = &eig.vectors;
    let rotated = s.transpose() * gamma_dot * s;
    let inner = c.component_mul(&rotated);
    Ok(symmetrize(&(s * inner * s.transpose())))
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use core::f64::consts::E;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale);
        symmetrize(&a)
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SpdMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        SpdMatrix::new(symmetrize(&(&a * a.transpose())) + DMatrix::identity(n, n) * 0.1).unwrap()
    }

    #[test]
    fn vech_examples() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(vech(&x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(vech(&i3).unwrap().as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            vech(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 3.0])),
            Err(Error::Asymmetric(_))
        ));
        assert!(unvech(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn duplication_and_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..50 {
            let n = 1 + k % 5;
            let x = random_symmetric(&mut rng, n, 3.0);
            let v = vech(&x).unwrap();
            let vec_x = DVector::from_column_slice(x.as_slice());
            assert_eq!(duplication_matrix(n) * &v, vec_x);
            assert_eq!(elimination_matrix(n) * &vec_x, v);
            assert_eq!(unvech(v.as_slice()).unwrap(), x);
        }
    }

    #[test]
    fn log_examples() {
        let i = SpdMatrix::new(DMatrix::identity(3, 3)).unwrap();
        assert!(log_spd(&i).unwrap().norm() < 1e-15);
        let d = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![E, E * E]))).unwrap();
        let l = log_spd(&d).unwrap();
        assert!((l - DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![1.0, 2.0]))).norm() < 1e-14);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..100 {
            let g = random_spd(&mut rng, 1 + k % 4);
            let back = exp_sym(&log_spd(&g).unwrap()).unwrap();
            assert!((back.as_matrix() - g.as_matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn singular_and_non_spd_rejected() {
        assert!(SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        let tiny = SpdMatrix(DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![1.0, 1e-14])));
        assert!(matches!(log_spd(&tiny), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn eig_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_spd(&mut rng, 4);
        let e = g.eig();
        assert!((e.reconstruct() - g.as_matrix()).norm() < 1e-10);
        assert!((e.vectors.transpose() * &e.vectors - DMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn divided_differences() {
        let eig = |vals: &[f64]| EigDecomposition {
            vectors: DMatrix::identity(vals.len(), vals.len()),
            values: DVector::from_column_slice(vals),
        };
        assert_eq!(dalecki_krein_c(&eig(&[1.0, 1.0])).unwrap(), DMatrix::from_element(2, 2, 1.0));
        let c = dalecki_krein_c(&eig(&[1.0, E])).unwrap();
        assert!((c[(0, 1)] - 1.0 / (E - 1.0)).abs() < 1e-15);
        assert!((c[(0, 1)] - 0.58198).abs() < 1e-5);
        assert_eq!(c[(0, 1)], c[(1, 0)]);

        let delta = 1e-13;
        let c = dalecki_krein_c(&eig(&[1.0, 1.0 + delta])).unwrap();
        // series ln(1+δ)/δ = 1 − δ/2 + ..., so the tie branch is accurate here
        let series = 1.0 - delta / 2.0 + delta * delta / 3.0;
        assert!((c[(0, 1)] - series).abs() < 1e-12);
        assert_eq!(c[(0, 1)], 1.0 / (1.0 + delta));
        assert!(dalecki_krein_c(&eig(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn rate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let i = SpdMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let gd = random_symmetric(&mut rng, 3, 1.0);
        let r = log_coordinate_rate(&i, &gd).unwrap();
        assert!((r - vech(&gd).unwrap()).norm() < 1e-15);

        let g = SpdMatrix::new(DMatrix::identity(2, 2) * 2.0).unwrap();
        let gd = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![2.0, 0.0]));
        let r = log_coordinate_rate(&g, &gd).unwrap();
        assert!((r - DVector::from_vec(alloc::vec![1.0, 0.0, 0.0])).norm() < 1e-15);
    }

    /// Finite-difference oracle: along `Γ(t) = exp(tS)` the rate must match
    /// the central difference of `vech(ln Γ(t))`.
    #[test]
    fn rate_matches_exp_curve_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let s = random_symmetric(&mut rng, 3, 1.0);
            let t = 0.7;
            let h = 1e-4;
            let gamma = exp_sym(&(&s * t)).unwrap();
            let gamma_dot = symmetrize(&(&s * gamma.as_matrix()));
            let rate = log_coordinate_rate(&gamma, &gamma_dot).unwrap();
            let lp = log_spd(&exp_sym(&(&s * (t + h))).unwrap()).unwrap();
            let lm = log_spd(&exp_sym(&(&s * (t - h))).unwrap()).unwrap();
            let fd = (vech(&lp).unwrap() - vech(&lm).unwrap()) / (2.0 * h);
            assert!((rate - fd).norm() < 1e-6);
        }
    }

    #[test]
    fn rate_invariant_under_eigenpair_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_spd(&mut rng, 3);
        let gd = random_symmetric(&mut rng, 3, 1.0);
        let eig = g.eig();
        let base = log_rate_with(&eig, &gd).unwrap();
        let perm = [2usize, 0, 1];
        let permuted = EigDecomposition {
            vectors: DMatrix::from_fn(3, 3, |i, j| -eig.vectors[(i, perm[j])]),
            values: DVector::from_fn(3, |j, _| eig.values[perm[j]]),
        };
        let other = log_rate_with(&permuted, &gd).unwrap();
        assert!((base - other).norm() < 1e-10);
    }
}
