//! Matrix equations at an equilibrium point.
//!
//! * `A Mᵀ + M A = D Mᵀ - M D` for the antisymmetric `A` (linear, `n(n-1)/2` unknowns),
//! * `M X + X Mᵀ = Q` for symmetric `X` (with `Q = -2D` this gives `S⁻¹`),
//! * the Riccati residual `S M + Mᵀ S + 2 S D S`, used only as a cross-check.
//!
//! Both linear equations are solved the same way: expand the unknown in a
//! basis of the antisymmetric (resp. symmetric) matrices, apply the operator
//! to each basis element, read the result back in the same basis and solve
//! the small dense system.

use crate::error::{Error, Result};
use crate::numkit::{self, Mat, Vector};

/// Resonances `λ_i + λ_j ≈ 0` are detected at this multiple of `‖M‖`.
pub const RESONANCE_TOL: f64 = 1e-9;

/// Lexicographic index pairs `(i, k)`, `i < k`, of the antisymmetric basis `e_ik`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntisymBasis {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl AntisymBasis {
    pub fn new(n: usize) -> Self {
        let pairs = (0..n).flat_map(|i| ((i + 1)..n).map(move |k| (i, k))).collect();
        AntisymBasis { n, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `e_ik`: `+1` at `(i, k)`, `-1` at `(k, i)`.
    pub fn element(&self, index: usize) -> Mat {
        let (i, k) = self.pairs[index];
        let mut e = Mat::zeros(self.n, self.n);
        e[(i, k)] = 1.0;
        e[(k, i)] = -1.0;
        e
    }

    /// Coefficients of an antisymmetric matrix, read from its strict upper triangle.
    pub fn coefficients(&self, a: &Mat) -> Vector {
        Vector::from_iterator(self.len(), self.pairs.iter().map(|&(i, k)| a[(i, k)]))
    }

    pub fn assemble(&self, alpha: &Vector) -> Mat {
        let mut a = Mat::zeros(self.n, self.n);
        for (&(i, k), &c) in self.pairs.iter().zip(alpha.iter()) {
            a[(i, k)] = c;
            a[(k, i)] = -c;
        }
        a
    }
}

/// Index pairs `(i, j)`, `i <= j`, of the symmetric basis.
fn sym_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

/// The operator `A ↦ A Mᵀ + M A`.
pub fn a_operator(m: &Mat, a: &Mat) -> Mat {
    a * m.transpose() + m * a
}

/// Right-hand side `D Mᵀ - M D`.
pub fn a_rhs(m: &Mat, d: &Mat) -> Mat {
    d * m.transpose() - m * d
}

/// Frobenius norm of `A Mᵀ + M A - (D Mᵀ - M D)`.
pub fn a_residual(a: &Mat, m: &Mat, d: &Mat) -> f64 {
    numkit::frobenius(&(a_operator(m, a) - a_rhs(m, d)))
}

/// Smallest `|λ_i + λ_j|` over eigenvalue index pairs; `i < j` when
/// `distinct`, `i <= j` otherwise.
fn min_pair_sum(m: &Mat, distinct: bool) -> Result<f64> {
    let spec = numkit::eig(m)?;
    let l = &spec.eigenvalues;
    let mut best = f64::INFINITY;
    for i in 0..l.len() {
        let start = if distinct { i + 1 } else { i };
        for j in start..l.len() {
            best = best.min((l[i] + l[j]).norm());
        }
    }
    Ok(best)
}

fn solve_projected(op: &Mat, rhs: &Vector, resonant: bool) -> Result<Vector> {
    let dim = op.nrows();
    if dim == 0 {
        return Ok(Vector::zeros(0));
    }
    let svd = op.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let null_tol = 1e-9 * smax.max(f64::MIN_POSITIVE);
    let nullity = svd.singular_values.iter().filter(|&&s| s <= null_tol).count();
    if resonant || nullity > 0 {
        return Err(Error::NonUniqueSolution { nullity: nullity.max(1) });
    }
    numkit::solve_linear(op, rhs).map_err(|_| Error::NonUniqueSolution { nullity: 1 })
}

/// Solves `A Mᵀ + M A = D Mᵀ - M D` for antisymmetric `A`.
pub fn solve_a(m: &Mat, d: &Mat) -> Result<Mat> {
    let n = m.nrows();
    assert!(m.is_square() && d.shape() == (n, n), "M and D must be n x n");
    let basis = AntisymBasis::new(n);
    if basis.is_empty() {
        return Ok(Mat::zeros(n, n));
    }
    let mut op = Mat::zeros(basis.len(), basis.len());
    for col in 0..basis.len() {
        let image = a_operator(m, &basis.element(col));
        op.set_column(col, &basis.coefficients(&image));
    }
    let rhs = basis.coefficients(&a_rhs(m, d));
    let scale = numkit::spectral_norm(m);
    let resonant = min_pair_sum(m, true)? <= RESONANCE_TOL * scale;
    let alpha = solve_projected(&op, &rhs, resonant)?;
    Ok(basis.assemble(&alpha))
}

/// Two-dimensional scalar `χ` with `A = χ [[0, 1], [-1, 0]]`.
pub fn chi_2d(m: &Mat, d: &Mat) -> Result<f64> {
    assert!(m.shape() == (2, 2) && d.shape() == (2, 2), "chi_2d needs 2x2 input");
    let trace = m.trace();
    if trace.abs() <= 1e-12 * numkit::frobenius(m) {
        return Err(Error::TraceZero);
    }
    Ok(a_rhs(m, d)[(0, 1)] / trace)
}

/// Solves `M X + X Mᵀ = Q` for symmetric `X`.
pub fn solve_lyapunov(m: &Mat, q: &Mat) -> Result<Mat> {
    let n = m.nrows();
    assert!(m.is_square() && q.shape() == (n, n), "M and Q must be n x n");
    let scale = numkit::spectral_norm(m);
    if min_pair_sum(m, false)? <= RESONANCE_TOL * scale {
        return Err(Error::ResonantSpectrum);
    }
    let pairs = sym_pairs(n);
    let dim = pairs.len();
    let mut op = Mat::zeros(dim, dim);
    for (col, &(i, j)) in pairs.iter().enumerate() {
        let mut e = Mat::zeros(n, n);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        let image = m * &e + &e * m.transpose();
        for (row, &(r, c)) in pairs.iter().enumerate() {
            op[(row, col)] = image[(r, c)];
        }
    }
    let qs = numkit::symmetrize(q);
    let rhs = Vector::from_iterator(dim, pairs.iter().map(|&(r, c)| qs[(r, c)]));
    let x = numkit::solve_linear(&op, &rhs).map_err(|_| Error::ResonantSpectrum)?;
    let mut out = Mat::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(x.iter()) {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    Ok(out)
}

/// The matrix `S M + Mᵀ S + 2 S D S`.
pub fn riccati_matrix(s: &Mat, m: &Mat, d: &Mat) -> Mat {
    s * m + m.transpose() * s + s * d * s * 2.0
}

/// Frobenius norm of `S M + Mᵀ S + 2 S D S`.
pub fn riccati_residual(s: &Mat, m: &Mat, d: &Mat) -> f64 {
    numkit::frobenius(&riccati_matrix(s, m, d))
}

/// Natural size of the Riccati terms, for relative residuals.
pub fn riccati_scale(s: &Mat, m: &Mat, d: &Mat) -> f64 {
    let ns = numkit::frobenius(s);
    2.0 * ns * numkit::frobenius(m) + 2.0 * ns * ns * numkit::frobenius(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{diag, from_rows, identity};
    use proptest::prelude::*;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        numkit::frobenius(&(a - b)) <= tol
    }

    fn kramers(u2: f64, gamma: f64) -> (Mat, Mat) {
        (from_rows(&[&[0.0, 1.0], &[-u2, -gamma]]), diag(&[0.0, gamma]))
    }

    fn rotation() -> Mat {
        from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]])
    }

    #[test]
    fn basis_layout() {
        let b = AntisymBasis::new(3);
        assert_eq!(b.pairs(), &[(0, 1), (0, 2), (1, 2)]);
        let e = b.element(1);
        assert_eq!((e[(0, 2)], e[(2, 0)]), (1.0, -1.0));
        let alpha = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(b.coefficients(&b.assemble(&alpha)), alpha);
    }

    #[test]
    fn kramers_chi_is_one() {
        for u2 in [2.0, 0.0, -2.0, 1.0] {
            let (m, d) = kramers(u2, 3.0);
            let a = solve_a(&m, &d).unwrap();
            assert!(close(&a, &rotation(), 1e-12), "u2 = {u2}: {a}");
            assert!((chi_2d(&m, &d).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_m_commuting_with_identity() {
        let m = from_rows(&[&[-2.0, 0.5], &[0.5, -1.0]]);
        let a = solve_a(&m, &identity(2)).unwrap();
        assert!(numkit::frobenius(&a) < 1e-14);
        assert_eq!(chi_2d(&m, &identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn hand_solved_two_by_two() {
        let m = from_rows(&[&[-1.0, 2.0], &[0.0, -1.0]]);
        assert_eq!(a_rhs(&m, &identity(2)), from_rows(&[&[0.0, -2.0], &[2.0, 0.0]]));
        let a = solve_a(&m, &identity(2)).unwrap();
        assert!(close(&a, &rotation(), 1e-14));
        assert!((chi_2d(&m, &identity(2)).unwrap() - 1.0).abs() < 1e-15);
    }

    /// Independent oracle: full n² Kronecker system, projected to its antisymmetric part.
    fn kronecker_a(m: &Mat, d: &Mat) -> Mat {
        let n = m.nrows();
        let i = identity(n);
        // column-major vec: vec(M A) = (I ⊗ M) vec A, vec(A Mᵀ) = (M ⊗ I) vec A
        let k = i.kronecker(m) + m.kronecker(&i);
        let rhs = a_rhs(m, d);
        let b = Vector::from_column_slice(rhs.as_slice());
        let v = k.svd(true, true).solve(&b, 1e-14).unwrap();
        let full = Mat::from_column_slice(n, n, v.as_slice());
        (&full - full.transpose()) * 0.5
    }

    #[test]
    fn three_by_three_matches_kronecker_oracle() {
        let m = from_rows(&[&[-1.0, 1.0, 0.0], &[0.0, -1.0, 1.0], &[0.0, 0.0, -1.0]]);
        let d = identity(3);
        let a = solve_a(&m, &d).unwrap();
        let oracle = kronecker_a(&m, &d);
        assert!(close(&a, &oracle, 1e-10), "{a} vs {oracle}");
        assert!(a_residual(&a, &m, &d) < 1e-12);
    }

    #[test]
    fn chi_trace_zero() {
        let m = from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(chi_2d(&m, &identity(2)), Err(Error::TraceZero));
        assert!(matches!(solve_a(&m, &identity(2)), Err(Error::NonUniqueSolution { nullity: 1 })));
    }

    #[test]
    fn lyapunov_examples() {
        let m = from_rows(&[&[-1.0, 2.0], &[0.0, -1.0]]);
        let x = solve_lyapunov(&m, &(identity(2) * -2.0)).unwrap();
        assert!(close(&x, &from_rows(&[&[3.0, 1.0], &[1.0, 1.0]]), 1e-14));
        let x = solve_lyapunov(&-identity(2), &(identity(2) * -2.0)).unwrap();
        assert!(close(&x, &identity(2), 1e-15));
        assert_eq!(solve_lyapunov(&rotation(), &identity(2)), Err(Error::ResonantSpectrum));
    }

    #[test]
    fn riccati_examples() {
        let (m, d) = kramers(2.0, 3.0);
        assert!(riccati_residual(&diag(&[2.0, 1.0]), &m, &d) <= 1e-12);
        assert_eq!(riccati_residual(&Mat::zeros(2, 2), &m, &d), 0.0);
    }

    pub(crate) fn random_mat(n: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(n, n, &v[..n * n])
    }

    proptest! {
        #[test]
        fn equation_sides_are_antisymmetric(
            n in 2..7usize,
            vm in prop::collection::vec(-1.0..1.0f64, 36),
            vd in prop::collection::vec(-1.0..1.0f64, 36),
        ) {
            let m = random_mat(n, &vm);
            let b = random_mat(n, &vd);
            let d = &b * b.transpose();
            let rhs = a_rhs(&m, &d);
            prop_assert!(numkit::frobenius(&(&rhs + rhs.transpose())) <= 1e-14);
            let basis = AntisymBasis::new(n);
            let a = basis.assemble(&Vector::from_iterator(basis.len(), vm.iter().take(basis.len()).cloned()));
            let lhs = a_operator(&m, &a);
            prop_assert!(numkit::frobenius(&(&lhs + lhs.transpose())) <= 1e-14);
        }

        #[test]
        fn solve_a_antisymmetric_and_matches_oracle(
            n in 2..7usize,
            vm in prop::collection::vec(-1.0..1.0f64, 36),
            vd in prop::collection::vec(-1.0..1.0f64, 36),
        ) {
            let g = random_mat(n, &vm);
            let abscissa = numkit::eig(&g).unwrap().eigenvalues[0].re;
            let m = g - identity(n) * (abscissa + 0.5);
            let b = random_mat(n, &vd);
            let d = &b * b.transpose();
            let a = solve_a(&m, &d).unwrap();
            prop_assert_eq!(&a, &(-a.transpose()));
            let scale = numkit::frobenius(&m) * (numkit::frobenius(&d) + numkit::frobenius(&a));
            prop_assert!(a_residual(&a, &m, &d) <= 1e-10 * scale);
            prop_assert!(close(&a, &kronecker_a(&m, &d), 1e-9 * numkit::frobenius(&a).max(1.0)));
            let chi = chi_2d(&m.view((0, 0), (2, 2)).into_owned(), &d.view((0, 0), (2, 2)).into_owned());
            if n == 2 { prop_assert!((chi.unwrap() - a[(0, 1)]).abs() <= 1e-12 * a[(0, 1)].abs().max(1.0)); }
        }
    }
}
