//! Small dense real-matrix toolkit on top of `nalgebra`.
//!
//! Every matrix in this crate is tiny (the state dimension of the model), so
//! everything here is dense and favours robustness over speed: ranks and
//! condition estimates come from singular values, eigenvectors from the
//! null space of `X - λI`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CVector = DVector<Complex64>;

/// Condition estimate beyond which a linear system is treated as singular.
pub const SINGULAR_COND: f64 = 1e12;

/// Eigen-decomposition of a real square matrix.
///
/// Eigenvalues are sorted by descending real part, ties broken by
/// descending imaginary part. Eigenvectors are unit-norm right eigenvectors.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    pub eigenvectors: Vec<CVector>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_abs_re(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.re.abs()).fold(0.0, f64::max)
    }
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}

/// Builds a matrix from rows; panics on ragged input, which is a programming error.
pub fn from_rows(rows: &[&[f64]]) -> Mat {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
    Mat::from_fn(r, c, |i, j| rows[i][j])
}

pub fn diag(values: &[f64]) -> Mat {
    Mat::from_diagonal(&Vector::from_column_slice(values))
}

pub fn frobenius(x: &Mat) -> f64 {
    x.norm()
}

/// Largest singular value.
pub fn spectral_norm(x: &Mat) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Ratio of extreme singular values; infinite for exactly singular input.
pub fn condition(x: &Mat) -> f64 {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        return f64::INFINITY;
    }
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn require_square(x: &Mat) {
    assert!(x.is_square(), "matrix must be square, got {}x{}", x.nrows(), x.ncols());
}

pub fn solve_linear(a: &Mat, b: &Vector) -> Result<Vector> {
    require_square(a);
    assert_eq!(a.nrows(), b.len(), "dimension mismatch");
    let cond = condition(a);
    if !(cond <= SINGULAR_COND) {
        return Err(Error::SingularMatrix { cond });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularMatrix { cond })
}

pub fn inverse(x: &Mat) -> Result<Mat> {
    require_square(x);
    let cond = condition(x);
    if !(cond <= SINGULAR_COND) {
        return Err(Error::SingularMatrix { cond });
    }
    x.clone().try_inverse().ok_or(Error::SingularMatrix { cond })
}

pub fn det(x: &Mat) -> f64 {
    require_square(x);
    x.clone().lu().determinant()
}

/// Number of singular values above `tol`.
pub fn rank(x: &Mat, tol: f64) -> usize {
    if x.is_empty() {
        return 0;
    }
    x.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > tol)
        .count()
}

/// Rank with the default tolerance `1e-10 * ||X||_2`.
pub fn rank_default(x: &Mat) -> usize {
    let tol = 1e-10 * spectral_norm(x);
    rank(x, tol.max(f64::MIN_POSITIVE))
}

pub fn is_symmetric(x: &Mat, tol: f64) -> bool {
    x.is_square() && frobenius(&(x - x.transpose())) <= tol * frobenius(x).max(1.0)
}

pub fn symmetrize(x: &Mat) -> Mat {
    (x + x.transpose()) * 0.5
}

/// Eigen-decomposition of a real square matrix.
///
/// Symmetric input takes the symmetric path so eigenvectors come out
/// orthogonal even for repeated eigenvalues.
pub fn eig(x: &Mat) -> Result<Spectrum> {
    require_square(x);
    let n = x.nrows();
    if n == 0 {
        return Ok(Spectrum { eigenvalues: vec![], eigenvectors: vec![] });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::ConvergenceFailure);
    }
    if x == &x.transpose() {
        return Ok(symmetric_spectrum(x));
    }
    let schur = nalgebra::linalg::Schur::try_new(x.clone(), f64::EPSILON, 10_000)
        .ok_or(Error::ConvergenceFailure)?;
    let mut values: Vec<Complex64> = schur.complex_eigenvalues().iter().cloned().collect();
    let scale = spectral_norm(x).max(f64::MIN_POSITIVE);
    sort_eigenvalues(&mut values, 1e-12 * scale);

    let cluster_tol = 1e-8 * scale;
    let mut vectors = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let lambda = values[i];
        let mut j = i + 1;
        while j < n && (values[j] - lambda).norm() <= cluster_tol {
            j += 1;
        }
        vectors.extend(null_vectors(x, lambda, j - i, scale));
        i = j;
    }
    Ok(Spectrum { eigenvalues: values, eigenvectors: vectors })
}

fn symmetric_spectrum(x: &Mat) -> Spectrum {
    let se = x.clone().symmetric_eigen();
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].total_cmp(&se.eigenvalues[a]));
    let eigenvalues = order.iter().map(|&k| Complex64::new(se.eigenvalues[k], 0.0)).collect();
    let eigenvectors = order
        .iter()
        .map(|&k| {
            let v = normalize_phase_real(se.eigenvectors.column(k).into_owned());
            v.map(|c| Complex64::new(c, 0.0))
        })
        .collect();
    Spectrum { eigenvalues, eigenvectors }
}

fn sort_eigenvalues(values: &mut [Complex64], tie_tol: f64) {
    values.sort_by(|a, b| {
        if (a.re - b.re).abs() <= tie_tol {
            b.im.total_cmp(&a.im)
        } else {
            b.re.total_cmp(&a.re)
        }
    });
}

/// The `count` right singular vectors of `X - λI` with the smallest singular values.
fn null_vectors(x: &Mat, lambda: Complex64, count: usize, scale: f64) -> Vec<CVector> {
    let n = x.nrows();
    if lambda.im.abs() <= 1e-14 * scale {
        let shifted = x - Mat::identity(n, n) * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        idx.iter()
            .take(count)
            .map(|&k| {
                let v = normalize_phase_real(v_t.row(k).transpose());
                v.map(|c| Complex64::new(c, 0.0))
            })
            .collect()
    } else {
        let shifted = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
            let d = if i == j { lambda } else { Complex64::new(0.0, 0.0) };
            Complex64::new(x[(i, j)], 0.0) - d
        });
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V^H");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        idx.iter()
            .take(count)
            .map(|&k| normalize_phase_complex(v_t.row(k).transpose().map(|c| c.conj())))
            .collect()
    }
}

/// Unit norm, largest-magnitude component positive.
fn normalize_phase_real(mut v: Vector) -> Vector {
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    let k = v.iamax();
    if v[k] < 0.0 {
        v = -v;
    }
    v
}

/// Unit norm, largest-magnitude component real and positive.
fn normalize_phase_complex(mut v: CVector) -> CVector {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        v /= Complex64::new(norm, 0.0);
    }
    let mut k = 0;
    for (i, c) in v.iter().enumerate() {
        if c.norm() > v[k].norm() {
            k = i;
        }
    }
    let pivot = v[k];
    if pivot.norm() > 0.0 {
        let phase = pivot.conj() / pivot.norm();
        v *= phase;
    }
    v
}

/// Pivoted Cholesky factor of a symmetric positive semidefinite matrix.
///
/// Returns `L` with `L Lᵀ = D`. Columns belonging to vanishing pivots are zero,
/// so rank-deficient `D` (e.g. noise acting on a single coordinate) is fine.
pub fn psd_factor(d: &Mat) -> Result<Mat> {
    require_square(d);
    let n = d.nrows();
    let scale = d.diagonal().iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    let mut work = symmetrize(d);
    let mut l = Mat::zeros(n, n);
    let mut done = vec![false; n];
    for _ in 0..n {
        let mut best = None;
        for i in (0..n).filter(|&i| !done[i]) {
            if best.is_none_or(|b: usize| work[(i, i)] > work[(b, b)]) {
                best = Some(i);
            }
        }
        let p = best.expect("a pivot remains");
        let pivot = work[(p, p)];
        if pivot < -1e-10 * scale.max(1.0) {
            return Err(Error::NotPositiveDefinite);
        }
        if pivot <= tol {
            break;
        }
        done[p] = true;
        let root = pivot.sqrt();
        let col: Vec<f64> = (0..n)
            .map(|i| if done[i] && i != p { 0.0 } else { work[(i, p)] / root })
            .collect();
        for i in 0..n {
            l[(i, p)] = col[i];
        }
        for i in 0..n {
            for j in 0..n {
                work[(i, j)] -= col[i] * col[j];
            }
        }
    }
    Ok(l)
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inv_sqrt_spd(s: &Mat) -> Result<Mat> {
    let se = symmetrize(s).symmetric_eigen();
    if se.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let d = Mat::from_diagonal(&se.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&se.eigenvectors * d * se.eigenvectors.transpose())
}

pub fn is_positive_definite(s: &Mat) -> bool {
    s.is_square() && symmetrize(s).symmetric_eigen().eigenvalues.iter().all(|&l| l > 0.0)
}

/// Greedy nearest matching of two eigenvalue lists; returns the worst pair distance.
pub fn spectrum_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0_f64;
    for x in a {
        let (k, d) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, y)| (k, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .expect("lists have equal length");
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}
