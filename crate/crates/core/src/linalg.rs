//! Dense symmetric matrix kernels for the small per-group blocks.
//!
//! Everything here works on [`SymMatrix`] values of modest size (the
//! optimizer's blocks are typically 1 to 25 wide, at most a few hundred).
//! The eigensolver is a cyclic Jacobi iteration, which is slow for large
//! matrices but accurate to working precision, including for the
//! clustered and nearly singular spectra that accumulated gradient outer
//! products produce.

use crate::{Error, Result};

/// Default relative off-diagonal tolerance for [`eigh`].
pub const EIGH_TOL: f64 = 1e-14;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 50;

/// Relative size of negative eigenvalues that are treated as rounding noise.
pub const PSD_TOL: f64 = 1e-10;

/// Symmetric `n x n` matrix with full row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "SymMatrix dimension must be >= 1");
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, symmetrizing `(A + Aᵀ)/2`.
    pub fn from_row_major(n: usize, entries: &[f64]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "matrix dimension must be >= 1".into(),
            ));
        }
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix::from_row_major",
                expected: n * n,
                actual: entries.len(),
            });
        }
        let mut data = entries.to_vec();
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (entries[i * n + j] + entries[j * n + i]);
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_major(n, &flat)
    }

    /// `g gᵀ`
    pub fn outer(g: &[f64]) -> Self {
        let n = g.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = g[i] * g[j];
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets entries `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
        self.data[j * self.n + i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `self ← a·self + b·g gᵀ`
    pub fn blend_outer(&mut self, a: f64, b: f64, g: &[f64]) {
        debug_assert_eq!(g.len(), self.n);
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                self.data[k] = a * self.data[k] + b * (g[i] * g[j]);
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `a·self + b·other`
    pub fn lin_comb(&self, a: f64, other: &SymMatrix, b: f64) -> Self {
        assert_eq!(self.n, other.n);
        Self {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Plain product; the result is not symmetric in general, so it is
    /// returned as row-major entries.
    pub fn matmul(&self, other: &SymMatrix) -> Vec<f64> {
        let n = self.n;
        assert_eq!(n, other.n);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(k) => Err(Error::non_finite(format!(
                "matrix entry ({}, {})",
                k / self.n,
                k % self.n
            ))),
            None => Ok(()),
        }
    }
}

/// Eigendecomposition `M = V diag(λ) Vᵀ` with eigenvalues in non-increasing
/// order and column `j` of `eigvecs` paired with `eigvals[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomp {
    pub eigvals: Vec<f64>,
    /// Row-major `n x n`; columns are eigenvectors.
    pub eigvecs: Vec<f64>,
    /// `‖M‖_max` of the decomposed matrix, kept for PSD checks.
    pub scale: f64,
}

impl EigDecomp {
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    #[inline]
    pub fn vec_entry(&self, row: usize, col: usize) -> f64 {
        self.eigvecs[row * self.dim() + col]
    }

    /// Fails if any eigenvalue is below `-PSD_TOL·‖M‖_max`.
    pub fn check_psd(&self) -> Result<()> {
        let bound = PSD_TOL * self.scale;
        match self.eigvals.last() {
            Some(&low) if low < -bound => Err(Error::NotPsd {
                eigenvalue: low,
                bound,
            }),
            _ => Ok(()),
        }
    }

    /// `V diag(f(λ)) Vᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let fl: Vec<f64> = self.eigvals.iter().map(|&l| f(l)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.vec_entry(i, k) * fl[k] * self.vec_entry(j, k);
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        SymMatrix { n, data: out }
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.reconstruct_with(|l| l)
    }

    /// `V diag(f(λ)) Vᵀ x` without forming the matrix.
    pub fn apply_with(&self, x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(x.len(), n);
        let mut coeff = vec![0.0; n];
        for (k, c) in coeff.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                s += self.vec_entry(i, k) * x[i];
            }
            *c = s * f(self.eigvals[k]);
        }
        (0..n)
            .map(|i| (0..n).map(|k| self.vec_entry(i, k) * coeff[k]).sum())
            .collect()
    }

    /// Same as [`apply_with`](Self::apply_with) with per-eigenvalue factors given directly.
    pub fn apply_spectrum(&self, x: &[f64], spectrum: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(spectrum.len(), n);
        let mut coeff = vec![0.0; n];
        for (k, c) in coeff.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                s += self.vec_entry(i, k) * x[i];
            }
            *c = s * spectrum[k];
        }
        (0..n)
            .map(|i| (0..n).map(|k| self.vec_entry(i, k) * coeff[k]).sum())
            .collect()
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Iterates until the off-diagonal Frobenius mass is at most
/// `tol·‖M‖_F`; more than [`MAX_SWEEPS`] sweeps is an error.
pub fn eigh(m: &SymMatrix, tol: f64) -> Result<EigDecomp> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eigh tolerance must be > 0, got {tol}"
        )));
    }
    m.check_finite()?;
    let n = m.n;
    let scale = m.max_abs();
    let mut a = m.data.clone();
    let mut v = SymMatrix::identity(n).data;
    let target = tol * m.frobenius();

    let off_mass = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[p * n + q] * a[p * n + q];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_mass(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← A J (columns p, q)
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                // A ← Jᵀ A (rows p, q)
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_mass(&a);
        if off > target {
            return Err(Error::NoConvergence {
                sweeps: MAX_SWEEPS,
                off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigvals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            eigvecs[row * n + col] = v[row * n + src];
        }
    }
    Ok(EigDecomp {
        eigvals,
        eigvecs,
        scale,
    })
}

/// `1/(√λ + δ)` with eigenvalues in the PSD noise band clamped to 0.
#[inline]
pub fn inv_sqrt_shift_scalar(lambda: f64, delta: f64) -> f64 {
    1.0 / (lambda.max(0.0).sqrt() + delta)
}

/// `(M^{1/2} + δI)^{-1}` for PSD `M`.
pub fn inv_sqrt_shift(m: &SymMatrix, delta: f64) -> Result<SymMatrix> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be > 0, got {delta}"
        )));
    }
    let eig = eigh(m, EIGH_TOL)?;
    eig.check_psd()?;
    Ok(eig.reconstruct_with(|l| inv_sqrt_shift_scalar(l, delta)))
}

/// Principal square root of a PSD matrix.
pub fn sqrt_psd(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = eigh(m, EIGH_TOL)?;
    eig.check_psd()?;
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Matrix 2-norm, i.e. the largest absolute eigenvalue.
pub fn spectral_norm(m: &SymMatrix) -> Result<f64> {
    let eig = eigh(m, EIGH_TOL)?;
    Ok(eig.eigvals.iter().fold(0.0, |acc, l| acc.max(l.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> SymMatrix {
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
            }
        }
        SymMatrix::from_row_major(n, &m).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn orthogonality_error(e: &EigDecomp) -> f64 {
        let n = e.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| e.vec_entry(k, i) * e.vec_entry(k, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_eigh() {
        let e = eigh(&SymMatrix::identity(2), EIGH_TOL).unwrap();
        assert_eq!(e.eigvals, vec![1.0, 1.0]);
        assert!(
            max_abs_diff(
                e.reconstruct().as_slice(),
                SymMatrix::identity(2).as_slice()
            ) < 1e-15
        );
    }

    #[test]
    fn two_by_two_closed_form() {
        // eigenvalues of [[a,b],[b,a]] are a±b with eigenvectors (1,±1)/√2
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = eigh(&m, EIGH_TOL).unwrap();
        assert!((e.eigvals[0] - 3.0).abs() < 1e-14);
        assert!((e.eigvals[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c0 = (e.vec_entry(0, 0), e.vec_entry(1, 0));
        let c1 = (e.vec_entry(0, 1), e.vec_entry(1, 1));
        assert!((c0.0.abs() - h).abs() < 1e-14 && (c0.0 - c0.1).abs() < 1e-14);
        assert!((c1.0.abs() - h).abs() < 1e-14 && (c1.0 + c1.1).abs() < 1e-14);
    }

    #[test]
    fn random_spd_25_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_spd(25, &mut rng);
        let e = eigh(&m, EIGH_TOL).unwrap();
        let err = max_abs_diff(e.reconstruct().as_slice(), m.as_slice());
        assert!(err <= 1e-10 * m.max_abs(), "reconstruction error {err}");
        assert!(orthogonality_error(&e) <= 1e-8);
        assert!(e.eigvals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn non_finite_entry_is_named() {
        let mut m = SymMatrix::identity(3);
        m.set(1, 2, f64::NAN);
        let err = eigh(&m, EIGH_TOL).unwrap_err();
        assert!(err.to_string().contains("(1, 2)"), "{err}");
    }

    #[test]
    fn bad_tolerance_rejected() {
        assert!(eigh(&SymMatrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn inv_sqrt_of_zero() {
        let p = inv_sqrt_shift(&SymMatrix::zeros(2), 1e-4).unwrap();
        assert!(max_abs_diff(p.as_slice(), SymMatrix::identity(2).scaled(1e4).as_slice()) < 1e-9);
    }

    #[test]
    fn inv_sqrt_of_scalar_spectrum() {
        let p = inv_sqrt_shift(&SymMatrix::identity(3).scaled(4.0), 1.0).unwrap();
        let expect = SymMatrix::identity(3).scaled(1.0 / 3.0);
        assert!(max_abs_diff(p.as_slice(), expect.as_slice()) < 1e-15);
    }

    #[test]
    fn inv_sqrt_rank_one() {
        let g = [3.0, 4.0];
        let delta = 1e-4;
        let p = inv_sqrt_shift(&SymMatrix::outer(&g), delta).unwrap();
        // P = u uᵀ/(5+δ) + (I − u uᵀ)/δ with u = g/5
        let u = [0.6, 0.8];
        for i in 0..2 {
            for j in 0..2 {
                let id = if i == j { 1.0 } else { 0.0 };
                let expect = u[i] * u[j] / (5.0 + delta) + (id - u[i] * u[j]) / delta;
                assert!((p.get(i, j) - expect).abs() < 1e-6 * expect.abs().max(1.0));
            }
        }
        let e = eigh(&p, EIGH_TOL).unwrap();
        assert!((e.eigvals[0] - 1e4).abs() < 1e-6);
        assert!((e.eigvals[1] - 1.0 / (5.0 + delta)).abs() < 1e-9);
        assert!((e.eigvals[1] - 0.199996).abs() < 1e-6);
    }

    #[test]
    fn psd_violation_detected() {
        let m = SymMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(
            inv_sqrt_shift(&m, 1e-4),
            Err(Error::NotPsd { .. })
        ));
        // tiny negative noise is clamped
        let m = SymMatrix::from_diag(&[1.0, -1e-14]);
        assert!(inv_sqrt_shift(&m, 1e-4).is_ok());
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&SymMatrix::identity(5)).unwrap(), 1.0);
        assert_eq!(
            spectral_norm(&SymMatrix::from_diag(&[2.0, -7.0, 3.0])).unwrap(),
            7.0
        );
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((spectral_norm(&m).unwrap() - 3.0).abs() < 1e-14);
        let mut bad = SymMatrix::identity(2);
        bad.set(0, 0, f64::INFINITY);
        assert!(spectral_norm(&bad).is_err());
    }

    #[test]
    fn diagonal_input_gives_signed_permutation() {
        let m = SymMatrix::from_diag(&[1.0, 5.0, -2.0, 3.0]);
        let e = eigh(&m, EIGH_TOL).unwrap();
        assert_eq!(e.eigvals, vec![5.0, 3.0, 1.0, -2.0]);
        for v in &e.eigvecs {
            assert!(*v == 0.0 || v.abs() == 1.0);
        }
    }

    #[test]
    fn inv_sqrt_times_shifted_sqrt_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=12 {
            let m = random_spd(n, &mut rng);
            let delta = 1e-3;
            let e = eigh(&m, EIGH_TOL).unwrap();
            let p = e.reconstruct_with(|l| inv_sqrt_shift_scalar(l, delta));
            let s = e.reconstruct_with(|l| l.max(0.0).sqrt() + delta);
            let prod = p.matmul(&s);
            assert!(max_abs_diff(&prod, SymMatrix::identity(n).as_slice()) <= 1e-8);
        }
    }

    proptest! {
        #[test]
        fn eigvals_invariant_under_permutation(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_spd(n, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let mut pm = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    pm[i * n + j] = m.get(perm[i], perm[j]);
                }
            }
            let pm = SymMatrix::from_row_major(n, &pm).unwrap();
            let a = eigh(&m, EIGH_TOL).unwrap().eigvals;
            let b = eigh(&pm, EIGH_TOL).unwrap().eigvals;
            prop_assert!(max_abs_diff(&a, &b) <= 1e-12 * m.max_abs().max(1.0));
        }

        #[test]
        fn spectral_norm_bounds(seed in 0u64..1000, n in 1usize..8, c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<f64> = (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = SymMatrix::from_row_major(n, &entries).unwrap();
            let s = spectral_norm(&m).unwrap();
            prop_assert!(s <= m.frobenius() * (1.0 + 1e-12));
            let sc = spectral_norm(&m.scaled(c)).unwrap();
            prop_assert!((sc - c.abs() * s).abs() <= 1e-12 * (1.0 + s * c.abs()));
        }
    }
}
