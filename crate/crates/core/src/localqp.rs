//! Local quasipotential at an equilibrium point.
//!
//! With `a = (-D + A)∇Φ` and `A` antisymmetric, differentiating at the
//! equilibrium gives the Hessian `S = (-D + A)⁻¹ M`. `A` comes from the
//! linear equation in [`crate::matequ::solve_a`]; everything else in this
//! module is assembled from `A` and `S`.

use crate::error::{Error, Result};
use crate::matequ;
use crate::model::{drift_contraction, EpKind, EquilibriumPoint, SystemModel};
use crate::numkit::{self, Mat, Vector};

/// Off-symmetry of `(-D + A)⁻¹ M` tolerated before it is symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalysisOptions {
    /// Analyze equilibria with a zero real part in the spectrum. The
    /// equation for `A` does not involve `M⁻¹`, so a singular `M` can still
    /// give a unique `A` (e.g. a flat Kramers well).
    pub allow_marginal: bool,
}

/// Residuals recorded while assembling an analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Largest `|(Mδ + D Sδ)·Sδ|` over unit coordinate directions δ.
    pub freidlin: f64,
    /// `‖S M + Mᵀ S + 2 S D S‖`.
    pub riccati: f64,
    /// `‖S - Sᵀ‖ / ‖S‖` before symmetrization.
    pub symmetry: f64,
    /// `‖M S⁻¹ + S⁻¹ Mᵀ + 2D‖`, when `S` is invertible.
    pub lyapunov: Option<f64>,
    /// `‖A Mᵀ + M A - (D Mᵀ - M D)‖`.
    pub a_equation: f64,
    /// Prefactor source at the equilibrium.
    pub r_at_ep: f64,
}

#[derive(Debug, Clone)]
pub struct EquilibriumAnalysis {
    pub ep: EquilibriumPoint,
    /// Diffusion matrix at the equilibrium.
    pub d: Mat,
    pub a: Mat,
    /// Quasipotential Hessian, symmetrized.
    pub s: Mat,
    pub chi: Option<f64>,
    pub s_inv: Option<Mat>,
    /// `(-D + A)⁻¹`.
    pub gradient_map: Mat,
    pub rank_s: usize,
    pub rank_m: usize,
    pub diagnostics: Diagnostics,
}

impl EquilibriumAnalysis {
    pub fn dim(&self) -> usize {
        self.ep.x.len()
    }

    pub fn s_is_singular(&self) -> bool {
        self.rank_s < self.dim()
    }
}

pub fn analyze_ep(model: &SystemModel, ep: &EquilibriumPoint) -> Result<EquilibriumAnalysis> {
    analyze_ep_with(model, ep, AnalysisOptions::default())
}

pub fn analyze_ep_with(
    model: &SystemModel,
    ep: &EquilibriumPoint,
    opts: AnalysisOptions,
) -> Result<EquilibriumAnalysis> {
    if ep.kind == EpKind::Marginal && !opts.allow_marginal {
        return Err(Error::MarginalEquilibrium);
    }
    let n = ep.x.len();
    let m = &ep.m;
    if m.trace().abs() <= 1e-12 * numkit::frobenius(m) {
        return Err(Error::TraceZero);
    }
    let x = ep.x.as_slice();
    let d = model.diffusion(x)?;
    let a = matequ::solve_a(m, &d)?;
    let chi = if n == 2 { Some(matequ::chi_2d(m, &d)?) } else { None };

    let gradient_map = numkit::inverse(&(&a - &d)).map_err(|_| Error::NotInvertible)?;
    let raw = &gradient_map * m;
    let raw_norm = numkit::frobenius(&raw);
    let symmetry = if raw_norm > 0.0 {
        numkit::frobenius(&(&raw - raw.transpose())) / raw_norm
    } else {
        0.0
    };
    let s = numkit::symmetrize(&raw);
    let rank_s = numkit::rank_default(&s);
    let rank_m = numkit::rank_default(m);
    let s_inv = if rank_s == n { numkit::inverse(&s).ok() } else { None };

    let lyapunov = s_inv
        .as_ref()
        .map(|si| numkit::frobenius(&(m * si + si * m.transpose() + &d * 2.0)));
    let freidlin = (0..n)
        .map(|k| {
            let mut delta = Vector::zeros(n);
            delta[k] = 1.0;
            let g = &s * &delta;
            ((m * &delta + &d * &g).dot(&g)).abs()
        })
        .fold(0.0, f64::max);
    let r_at_ep = compute_r(model, &Vector::zeros(n), &s, x)?;
    let diagnostics = Diagnostics {
        freidlin,
        riccati: matequ::riccati_residual(&s, m, &d),
        symmetry,
        lyapunov,
        a_equation: matequ::a_residual(&a, m, &d),
        r_at_ep,
    };
    Ok(EquilibriumAnalysis {
        ep: ep.clone(),
        d,
        a,
        s,
        chi,
        s_inv,
        gradient_map,
        rank_s,
        rank_m,
        diagnostics,
    })
}

/// Local gradient field `∇Φ(x) ≈ (-D + A)⁻¹ a(x)` with `A` frozen at the equilibrium.
pub fn qp_gradient_field(ea: &EquilibriumAnalysis, model: &SystemModel, x: &[f64]) -> Result<Vector> {
    Ok(&ea.gradient_map * model.drift(x)?)
}

/// `(a(x) + D(x) g)·g`.
pub fn freidlin_residual(model: &SystemModel, grad_phi: &Vector, x: &[f64]) -> Result<f64> {
    let a = model.drift(x)?;
    let d = model.diffusion(x)?;
    Ok((a + d * grad_phi).dot(grad_phi))
}

/// Prefactor source `r = ρ - ∇·(D∇Φ)` for a given gradient and Hessian of `Φ` at `x`.
pub fn compute_r(model: &SystemModel, grad_phi: &Vector, hess_phi: &Mat, x: &[f64]) -> Result<f64> {
    let n = model.dim();
    let rho = drift_contraction(model, x)?;
    let d = model.diffusion(x)?;
    let mut div = (&d.component_mul(hess_phi)).sum();
    if model.constant_diffusion().is_none() {
        let jets = model.diffusion_jets(x)?;
        for i in 0..n {
            for j in 0..n {
                div += jets[i][j].gradient[i] * grad_phi[j];
            }
        }
    }
    Ok(rho - div)
}

/// Gaussian `N exp(-(x-c)ᵀ S (x-c) / (2ε))` around an attractor.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub center: Vector,
    pub s: Mat,
    pub epsilon: f64,
    pub normalizer: f64,
}

impl GaussianApprox {
    pub fn density(&self, x: &Vector) -> f64 {
        let delta = x - &self.center;
        self.normalizer * (-(delta.dot(&(&self.s * &delta))) / (2.0 * self.epsilon)).exp()
    }

    pub fn covariance(&self) -> Mat {
        numkit::inverse(&self.s).expect("positive definite S") * self.epsilon
    }

    /// `(ρ w - a·∇w + ε ∇·(D ∇w)) / w` for the drift linearized as `a = M (x - c)`
    /// and `D` frozen; zero when `S` solves the equilibrium equations.
    pub fn fpe_residual_linearized(&self, m: &Mat, d: &Mat, x: &Vector) -> f64 {
        let eps = self.epsilon;
        let delta = x - &self.center;
        let sd = &self.s * &delta;
        let a = m * &delta;
        // ∇w / w = -Sδ/ε, Hess w / w = Sδ δᵀS/ε² - S/ε
        let grad = -&sd / eps;
        let hess = &sd * sd.transpose() / (eps * eps) - &self.s / eps;
        let rho = -m.trace();
        rho - a.dot(&grad) + eps * d.component_mul(&hess).sum()
    }
}

pub fn gaussian_density(ea: &EquilibriumAnalysis, epsilon: f64) -> Result<GaussianApprox> {
    if ea.ep.kind != EpKind::Attractor {
        return Err(Error::NotAttractor);
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    if !numkit::is_positive_definite(&ea.s) {
        return Err(Error::NotPositiveDefinite);
    }
    let n = ea.dim() as f64;
    let normalizer = (2.0 * std::f64::consts::PI * epsilon).powf(-n / 2.0) * numkit::det(&ea.s).sqrt();
    Ok(GaussianApprox { center: ea.ep.x.clone(), s: ea.s.clone(), epsilon, normalizer })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Plus,
    Minus,
}

/// Degenerate quadratic solution `Φ± = [U''(1-β)x² + 2U''γ⁻¹xv + βv²]/2`
/// of the Kramers equation at a well or barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct KramersDegenerate {
    pub branch: Branch,
    pub u2: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Hessian of `Φ±`, rank at most one.
    pub s_pm: Mat,
    /// `γ(1 - β)`.
    pub r_value: f64,
}

impl KramersDegenerate {
    pub fn phi(&self, x: f64, v: f64) -> f64 {
        let (u2, g, b) = (self.u2, self.gamma, self.beta);
        0.5 * (u2 * (1.0 - b) * x * x + 2.0 * u2 / g * x * v + b * v * v)
    }
}

pub fn kramers_phi_pm(u2: f64, gamma: f64, branch: Branch) -> Result<KramersDegenerate> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidModel(format!("friction must be positive, got {gamma}")));
    }
    let discriminant = 1.0 - 4.0 * u2 / (gamma * gamma);
    if discriminant < 0.0 {
        return Err(Error::ComplexBeta { discriminant });
    }
    let root = discriminant.sqrt();
    let beta = match branch {
        Branch::Plus => 0.5 * (1.0 + root),
        Branch::Minus => 0.5 * (1.0 - root),
    };
    let s_pm = numkit::from_rows(&[&[u2 * (1.0 - beta), u2 / gamma], &[u2 / gamma, beta]]);
    Ok(KramersDegenerate { branch, u2, gamma, beta, s_pm, r_value: gamma * (1.0 - beta) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Candidate {
    Eq,
    Plus,
    Minus,
    Zero,
}

impl Candidate {
    pub fn label(self) -> &'static str {
        match self {
            Candidate::Eq => "phi_eq",
            Candidate::Plus => "phi_plus",
            Candidate::Minus => "phi_minus",
            Candidate::Zero => "phi_0",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Above,
    On,
    Below,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Above => "above",
            Side::On => "on",
            Side::Below => "below",
        }
    }
}

/// One grid point of the minimum-principle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub x: f64,
    pub v: f64,
    pub phi_eq: f64,
    pub phi_plus: f64,
    pub phi_minus: f64,
    pub phi_zero: f64,
    /// Every candidate attaining the pointwise minimum.
    pub minimizers: Vec<Candidate>,
    /// Smallest of `Φ_eq`, `Φ+`, `Φ-` (the constant `Φ_0` left out).
    pub nontrivial_min: Candidate,
    /// Position relative to the line `v = β+ γ x`.
    pub side_plus: Side,
    /// Position relative to the line `v = β- γ x`.
    pub side_minus: Side,
}

/// Compares `Φ_eq = U''x²/2 + v²/2`, `Φ±` and `Φ_0 = 0` pointwise near a quadratic well or barrier.
pub fn minimum_principle_probe(u2: f64, gamma: f64, points: &[(f64, f64)]) -> Result<Vec<ProbeRow>> {
    let plus = kramers_phi_pm(u2, gamma, Branch::Plus)?;
    let minus = kramers_phi_pm(u2, gamma, Branch::Minus)?;
    let side = |beta: f64, x: f64, v: f64| {
        let gap = v - beta * gamma * x;
        if gap.abs() <= 1e-12 * (v.abs() + (beta * gamma * x).abs()).max(1e-300) {
            Side::On
        } else if gap > 0.0 {
            Side::Above
        } else {
            Side::Below
        }
    };
    Ok(points
        .iter()
        .map(|&(x, v)| {
            let values = [
                (Candidate::Eq, 0.5 * (u2 * x * x + v * v)),
                (Candidate::Plus, plus.phi(x, v)),
                (Candidate::Minus, minus.phi(x, v)),
                (Candidate::Zero, 0.0),
            ];
            let scale = values.iter().map(|c| c.1.abs()).fold(0.0, f64::max);
            let tie = 1e-12 * scale;
            let min = values.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            let minimizers = values.iter().filter(|c| c.1 <= min + tie).map(|c| c.0).collect();
            let nontrivial_min = values[..3]
                .iter()
                .fold(values[0], |best, c| if c.1 < best.1 - tie { *c } else { best })
                .0;
            ProbeRow {
                x,
                v,
                phi_eq: values[0].1,
                phi_plus: values[1].1,
                phi_minus: values[2].1,
                phi_zero: 0.0,
                minimizers,
                nontrivial_min,
                side_plus: side(plus.beta, x, v),
                side_minus: side(minus.beta, x, v),
            }
        })
        .collect())
}

/// Square `k × k` grid of points `(x, v)` in `[-h, h]²` around the origin.
pub fn probe_grid(half_width: f64, k: usize) -> Vec<(f64, f64)> {
    let coord = |i: usize| if k == 1 { 0.0 } else { -half_width + 2.0 * half_width * i as f64 / (k - 1) as f64 };
    (0..k).flat_map(|i| (0..k).map(move |j| (coord(i), coord(j)))).collect()
}
