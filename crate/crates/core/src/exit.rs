//! Starting data for the exit problem at a separatrix saddle.

use crate::error::{Error, Result};
use crate::localqp::EquilibriumAnalysis;
use crate::numkit::{self, Mat, Vector};

/// Tolerance on the multiset distance between the spectra of `M̃` and `M`.
pub const SPECTRUM_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ExitData {
    pub mtilde: Mat,
    pub spectrum_match: bool,
    pub spectrum_distance: f64,
    pub lambda_plus: f64,
    /// Eigenvector of `Mᵀ` for `λ+`.
    pub f: Vector,
    /// Unit vector along `-(D + A) f`.
    pub start_dir: Vector,
    /// `‖M̃ s - λ+ s‖` for `s = start_dir`.
    pub eigen_residual: f64,
    /// `|cos|` between `start_dir` and `S⁻¹ f`, when `S` is invertible.
    pub collinearity: Option<f64>,
}

/// Jacobian of the associated drift, `M̃ = M - 2AS`.
pub fn associated_jacobian(ea: &EquilibriumAnalysis) -> Mat {
    &ea.ep.m - &ea.a * &ea.s * 2.0
}

/// `‖M̃ - S⁻¹ Mᵀ S‖`, when `S` is invertible.
pub fn similarity_defect(ea: &EquilibriumAnalysis) -> Option<f64> {
    let s_inv = ea.s_inv.as_ref()?;
    let similar = s_inv * ea.ep.m.transpose() * &ea.s;
    Some(numkit::frobenius(&(associated_jacobian(ea) - similar)))
}

/// Unstable eigenvalue of a separatrix saddle: exactly one eigenvalue with
/// positive real part, real-valued, all others strictly stable.
fn unstable_eigenvalue(ea: &EquilibriumAnalysis) -> Result<f64> {
    let spectrum = &ea.ep.spectrum;
    let scale = numkit::spectral_norm(&ea.ep.m).max(f64::MIN_POSITIVE);
    let tol = crate::model::MARGINAL_RE * scale;
    if spectrum.eigenvalues.iter().any(|l| l.re.abs() <= tol) {
        return Err(Error::NotExitSaddle);
    }
    let unstable: Vec<_> = spectrum.eigenvalues.iter().filter(|l| l.re > tol).collect();
    if let Some(l) = unstable.iter().find(|l| l.im.abs() > tol) {
        return Err(Error::ComplexUnstableEigenvalue { re: l.re, im: l.im });
    }
    match unstable.as_slice() {
        [l] => Ok(l.re),
        _ => Err(Error::NotExitSaddle),
    }
}

/// Orients `v` along `away` if given, else makes its first nonzero component positive.
fn orient(mut v: Vector, away: Option<&Vector>) -> Vector {
    let flip = match away {
        Some(w) if v.dot(w) != 0.0 => v.dot(w) < 0.0,
        _ => v.iter().find(|c| c.abs() > 1e-14).is_some_and(|c| *c < 0.0),
    };
    if flip {
        v.neg_mut();
    }
    v
}

pub fn exit_direction(ea: &EquilibriumAnalysis, away: Option<&Vector>) -> Result<ExitData> {
    let lambda_plus = unstable_eigenvalue(ea)?;
    let m = &ea.ep.m;
    let mt = m.transpose();
    let spec_t = numkit::eig(&mt)?;
    let f: Vector = spec_t.eigenvectors[0].map(|c| c.re);
    let f = f.normalize();

    let mtilde = associated_jacobian(ea);
    let tilde_spec = numkit::eig(&mtilde)?;
    let spectrum_distance = numkit::spectrum_distance(&tilde_spec.eigenvalues, &ea.ep.spectrum.eigenvalues);
    let scale = numkit::spectral_norm(m).max(1.0);
    let spectrum_match = spectrum_distance <= SPECTRUM_TOL * scale;

    let raw = -(&ea.d + &ea.a) * &f;
    let norm = raw.norm();
    if norm == 0.0 {
        return Err(Error::NotInvertible);
    }
    let start_dir = orient(raw / norm, away);
    let eigen_residual = (&mtilde * &start_dir - &start_dir * lambda_plus).norm();
    let collinearity = ea.s_inv.as_ref().map(|si| {
        let g = si * &f;
        (g.dot(&start_dir) / g.norm()).abs()
    });
    Ok(ExitData { mtilde, spectrum_match, spectrum_distance, lambda_plus, f, start_dir, eigen_residual, collinearity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localqp::{analyze_ep, analyze_ep_with, AnalysisOptions};
    use crate::model::{EquilibriumPoint, KramersModel, SystemModel};
    use crate::numkit::{from_rows, identity};
    use proptest::prelude::*;

    fn kramers(u2: f64, gamma: f64) -> EquilibriumAnalysis {
        let model = KramersModel::quadratic(u2, gamma).unwrap().system();
        let ep = EquilibriumPoint::at(&model, &[0.0, 0.0]).unwrap();
        analyze_ep_with(&model, &ep, AnalysisOptions { allow_marginal: true }).unwrap()
    }

    #[test]
    fn kramers_saddle() {
        let ea = kramers(-2.0, 1.0);
        let mt = associated_jacobian(&ea);
        assert!(numkit::frobenius(&(&mt - from_rows(&[&[0.0, -1.0], &[-2.0, -1.0]]))) < 1e-12);
        assert!(similarity_defect(&ea).unwrap() < 1e-12);
        let ex = exit_direction(&ea, None).unwrap();
        assert!((ex.lambda_plus - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((&ex.start_dir - Vector::from_vec(vec![h, -h])).norm() < 1e-12);
        assert!(ex.spectrum_match && ex.eigen_residual < 1e-12);
        assert!(ex.collinearity.unwrap() > 1.0 - 1e-12);
        // f ∝ (λ+ + γ, 1)
        assert!((ex.f[0] / ex.f[1] - 2.0).abs() < 1e-12);

        let away = Vector::from_vec(vec![-1.0, 0.0]);
        let ex = exit_direction(&ea, Some(&away)).unwrap();
        assert!((&ex.start_dir + Vector::from_vec(vec![h, -h])).norm() < 1e-12);
    }

    #[test]
    fn second_kramers_saddle() {
        let ex = exit_direction(&kramers(-3.0, 2.0), None).unwrap();
        assert!((ex.lambda_plus - 1.0).abs() < 1e-12);
        assert!((ex.start_dir[0] + ex.start_dir[1]).abs() < 1e-12 && ex.start_dir[0] > 0.0);
    }

    #[test]
    fn symmetric_drift_keeps_m() {
        let m = from_rows(&[&[1.0, 0.5], &[0.5, -2.0]]);
        let model = SystemModel::linear(&m, &identity(2)).unwrap();
        let ep = EquilibriumPoint::at(&model, &[0.0, 0.0]).unwrap();
        let ea = analyze_ep(&model, &ep).unwrap();
        assert!(numkit::frobenius(&(associated_jacobian(&ea) - &m)) < 1e-14);
    }

    #[test]
    fn flat_barrier_keeps_trace_and_det() {
        let ea = kramers(0.0, 2.0);
        let mt = associated_jacobian(&ea);
        assert!((mt.trace() - ea.ep.m.trace()).abs() < 1e-12);
        assert!((numkit::det(&mt) - numkit::det(&ea.ep.m)).abs() < 1e-12);
        assert_eq!(exit_direction(&ea, None).unwrap_err(), Error::NotExitSaddle);
    }

    #[test]
    fn rejects_non_saddles() {
        assert_eq!(exit_direction(&kramers(2.0, 3.0), None).unwrap_err(), Error::NotExitSaddle);
        let m = from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, -4.0]]);
        let model = SystemModel::linear(&m, &identity(3)).unwrap();
        let ep = EquilibriumPoint::at(&model, &[0.0; 3]).unwrap();
        let ea = analyze_ep(&model, &ep).unwrap();
        assert_eq!(exit_direction(&ea, None).unwrap_err(), Error::NotExitSaddle);
        let m = from_rows(&[&[1.0, 2.0, 0.0], &[-2.0, 1.0, 0.0], &[0.0, 0.0, -1.0]]);
        let model = SystemModel::linear(&m, &identity(3)).unwrap();
        let ep = EquilibriumPoint::at(&model, &[0.0; 3]).unwrap();
        let ea = analyze_ep(&model, &ep).unwrap();
        assert!(matches!(exit_direction(&ea, None), Err(Error::ComplexUnstableEigenvalue { .. })));
    }

    fn random_saddle(n: usize, vs: &[f64], va: &[f64], vd: &[f64], vq: &[f64]) -> Option<EquilibriumAnalysis> {
        // S = Qᵀ diag(-1, 1, ..) Q, with Q well conditioned
        let q = Mat::from_row_slice(n, n, &vq[..n * n]) + identity(n) * 2.0;
        let mut signs = vec![1.0; n];
        signs[0] = -1.0;
        for (k, s) in signs.iter_mut().enumerate() {
            *s *= 0.5 + vs[k].abs();
        }
        let s = q.transpose() * numkit::diag(&signs) * &q;
        let b = Mat::from_row_slice(n, n, &va[..n * n]);
        let a = &b - b.transpose();
        let c = Mat::from_row_slice(n, n, &vd[..n * n]);
        let d = &c * c.transpose() + identity(n) * 0.1;
        let m = (&a - &d) * &s;
        let model = SystemModel::linear(&m, &d).ok()?;
        let ep = EquilibriumPoint::at(&model, &vec![0.0; n]).ok()?;
        analyze_ep(&model, &ep).ok()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_saddles(
            n in 2..6usize,
            vs in prop::collection::vec(-1.0..1.0f64, 6),
            va in prop::collection::vec(-1.0..1.0f64, 36),
            vd in prop::collection::vec(-1.0..1.0f64, 36),
            vq in prop::collection::vec(-0.5..0.5f64, 36),
        ) {
            let Some(ea) = random_saddle(n, &vs, &va, &vd, &vq) else { return Ok(()) };
            // by Sylvester inertia M = (-D + A) S has exactly one unstable eigenvalue, and it is real
            let ex = exit_direction(&ea, None).unwrap();
            prop_assert!(ex.spectrum_match, "{}", ex.spectrum_distance);
            prop_assert!(ex.collinearity.unwrap() >= 1.0 - 1e-8);
            prop_assert!(ex.eigen_residual <= 1e-8 * numkit::spectral_norm(&ex.mtilde).max(1.0));
        }

        #[test]
        fn trace_of_antisym_times_sym_vanishes(
            n in 2..7usize,
            va in prop::collection::vec(-1.0..1.0f64, 36),
            vs in prop::collection::vec(-1.0..1.0f64, 36),
        ) {
            let b = Mat::from_row_slice(n, n, &va[..n * n]);
            let c = Mat::from_row_slice(n, n, &vs[..n * n]);
            let a = &b - b.transpose();
            let s = &c + c.transpose();
            prop_assert!((a * s).trace().abs() <= 1e-13);
        }
    }
}
