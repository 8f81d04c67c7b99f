//! Stochastic system models and their equilibrium points.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exprdsl::{self, EvalResult, Expr};
use crate::numkit::{self, Mat, Spectrum, Vector};

/// Real parts within this distance of zero make an equilibrium marginal.
pub const MARGINAL_RE: f64 = 1e-9;

/// Drift `a(x)` and diffusion `D(x)` of `dx = a dt + sqrt(2 eps) L dW`, `L Lᵀ = D`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub name: String,
    n: usize,
    drift: Vec<Expr>,
    diffusion: Vec<Vec<Expr>>,
    constant_diffusion: Option<Mat>,
}

impl SystemModel {
    /// Builds a model from expression trees; checks shapes and that the
    /// diffusion matrix is symmetric as an expression array.
    pub fn new(name: impl Into<String>, drift: Vec<Expr>, diffusion: Vec<Vec<Expr>>) -> Result<Self> {
        let n = drift.len();
        if n == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if diffusion.len() != n || diffusion.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidModel(format!("diffusion must be {n}x{n}")));
        }
        for e in drift.iter().chain(diffusion.iter().flatten()) {
            if e.arity() > n {
                return Err(Error::InvalidModel(format!("expression uses x{} but n = {n}", e.arity())));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if diffusion[i][j] != diffusion[j][i] {
                    return Err(Error::InvalidModel(format!(
                        "diffusion entries ({},{}) and ({},{}) differ",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        let constant_diffusion = if diffusion.iter().flatten().all(Expr::is_constant) {
            let d = Mat::from_fn(n, n, |i, j| diffusion[i][j].value(&[]).unwrap_or(f64::NAN));
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel("diffusion entries must be finite".into()));
            }
            check_psd(&d)?;
            Some(d)
        } else {
            None
        };
        Ok(SystemModel { name: name.into(), n, drift, diffusion, constant_diffusion })
    }

    /// Parses drift and diffusion sources with the expression grammar.
    pub fn from_sources(
        name: impl Into<String>,
        n: usize,
        params: &BTreeMap<String, f64>,
        drift: &[String],
        diffusion: &[Vec<String>],
    ) -> Result<Self> {
        if drift.len() != n {
            return Err(Error::InvalidModel(format!("drift has {} components, n = {n}", drift.len())));
        }
        let drift = drift.iter().map(|s| exprdsl::parse(s, n, params)).collect::<Result<Vec<_>>>()?;
        let diffusion = diffusion
            .iter()
            .map(|row| row.iter().map(|s| exprdsl::parse(s, n, params)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        SystemModel::new(name, drift, diffusion)
    }

    /// Linear drift `a = M x` with constant diffusion.
    pub fn linear(m: &Mat, d: &Mat) -> Result<Self> {
        let n = m.nrows();
        if !m.is_square() || d.shape() != (n, n) {
            return Err(Error::InvalidModel("linear model needs square M and D of equal size".into()));
        }
        let drift = (0..n)
            .map(|i| {
                (0..n).fold(Expr::Num(0.0), |acc, j| {
                    let term = Expr::Mul(Box::new(Expr::Num(m[(i, j)])), Box::new(Expr::Var(j)));
                    if j == 0 {
                        term
                    } else {
                        Expr::Add(Box::new(acc), Box::new(term))
                    }
                })
            })
            .collect();
        let diffusion = (0..n).map(|i| (0..n).map(|j| Expr::Num(d[(i, j)])).collect()).collect();
        SystemModel::new("linear", drift, diffusion)
    }

    /// Gradient system `a = -∇U` with `D = I`.
    pub fn gradient(potential: &Expr, n: usize) -> Result<Self> {
        let drift = (0..n)
            .map(|k| potential.derivative(k).map(|d| Expr::Neg(Box::new(d))))
            .collect::<Result<Vec<_>>>()?;
        let diffusion = (0..n)
            .map(|i| (0..n).map(|j| Expr::Num(if i == j { 1.0 } else { 0.0 })).collect())
            .collect();
        SystemModel::new("gradient", drift, diffusion)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn drift_exprs(&self) -> &[Expr] {
        &self.drift
    }

    pub fn diffusion_exprs(&self) -> &[Vec<Expr>] {
        &self.diffusion
    }

    pub fn constant_diffusion(&self) -> Option<&Mat> {
        self.constant_diffusion.as_ref()
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vector> {
        let mut out = Vector::zeros(self.n);
        self.drift_into(x, out.as_mut_slice())?;
        Ok(out)
    }

    /// Allocation-free drift evaluation for the simulator hot loop.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.value(x)?;
        }
        Ok(())
    }

    pub fn diffusion(&self, x: &[f64]) -> Result<Mat> {
        if let Some(d) = &self.constant_diffusion {
            return Ok(d.clone());
        }
        let n = self.n;
        let mut d = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] = self.diffusion[i][j].value(x)?;
            }
        }
        Ok(d)
    }

    /// Drift components with gradients and Hessians.
    pub fn drift_jets(&self, x: &[f64]) -> Result<Vec<EvalResult>> {
        self.drift.iter().map(|e| e.evaluate(x)).collect()
    }

    /// Diffusion entries with gradients and Hessians, row-major.
    pub fn diffusion_jets(&self, x: &[f64]) -> Result<Vec<Vec<EvalResult>>> {
        self.diffusion
            .iter()
            .map(|row| row.iter().map(|e| e.evaluate(x)).collect())
            .collect()
    }

    /// `Σ_j ∂D^{ij}/∂x^j`, the divergence of each diffusion row.
    pub fn diffusion_divergence(&self, x: &[f64]) -> Result<Vector> {
        let n = self.n;
        if self.constant_diffusion.is_some() {
            return Ok(Vector::zeros(n));
        }
        let jets = self.diffusion_jets(x)?;
        Ok(Vector::from_fn(n, |i, _| (0..n).map(|j| jets[i][j].gradient[j]).sum()))
    }

    /// Checks `D(x)` symmetric positive semidefinite at a probed point.
    pub fn check_diffusion_at(&self, x: &[f64]) -> Result<()> {
        check_psd(&self.diffusion(x)?)
    }
}

fn check_psd(d: &Mat) -> Result<()> {
    let norm = numkit::spectral_norm(d);
    if !numkit::is_symmetric(d, 1e-12) {
        return Err(Error::InvalidModel("diffusion matrix is not symmetric".into()));
    }
    let min = numkit::symmetrize(d).symmetric_eigen().eigenvalues.min();
    if min < -1e-10 * norm {
        return Err(Error::InvalidModel(format!(
            "diffusion matrix is not positive semidefinite (eigenvalue {min})"
        )));
    }
    Ok(())
}

/// Underdamped particle in a potential: `ẋ = v`, `v̇ = -γ v - U'(x)`, `D = diag(0, γ)`.
#[derive(Debug, Clone)]
pub struct KramersModel {
    pub gamma: f64,
    potential: Expr,
    force: Expr,
    curvature: Expr,
}

impl KramersModel {
    /// `potential` is an expression in `x1` (the position).
    pub fn new(potential: Expr, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidModel(format!("friction must be positive, got {gamma}")));
        }
        if potential.arity() > 1 {
            return Err(Error::InvalidModel("Kramers potential may only depend on x1".into()));
        }
        let force = potential.derivative(0)?;
        let curvature = force.derivative(0)?;
        Ok(KramersModel { gamma, potential, force, curvature })
    }

    pub fn parse(potential: &str, gamma: f64) -> Result<Self> {
        KramersModel::new(exprdsl::parse(potential, 1, &BTreeMap::new())?, gamma)
    }

    /// Quadratic well or barrier `U = u2 x²/2`.
    pub fn quadratic(u2: f64, gamma: f64) -> Result<Self> {
        let potential = Expr::Mul(
            Box::new(Expr::Num(0.5 * u2)),
            Box::new(Expr::Pow(Box::new(Expr::Var(0)), Box::new(Expr::Num(2.0)))),
        );
        KramersModel::new(potential, gamma)
    }

    pub fn potential(&self, x: f64) -> Result<f64> {
        self.potential.value(&[x])
    }

    pub fn potential_expr(&self) -> &Expr {
        &self.potential
    }

    pub fn u1(&self, x: f64) -> Result<f64> {
        self.force.value(&[x])
    }

    pub fn u2(&self, x: f64) -> Result<f64> {
        self.curvature.value(&[x])
    }

    /// `U(x) + v²/2`, the exact quasipotential up to a constant.
    pub fn phi_eq(&self, x: f64, v: f64) -> Result<f64> {
        Ok(self.potential(x)? + 0.5 * v * v)
    }

    pub fn system(&self) -> SystemModel {
        // potential in x1 only, so the force tree is valid in two variables
        let drift = vec![
            Expr::Var(1),
            Expr::Sub(
                Box::new(Expr::Mul(Box::new(Expr::Num(-self.gamma)), Box::new(Expr::Var(1)))),
                Box::new(self.force.clone()),
            ),
        ];
        let diffusion = vec![
            vec![Expr::Num(0.0), Expr::Num(0.0)],
            vec![Expr::Num(0.0), Expr::Num(self.gamma)],
        ];
        SystemModel::new("kramers", drift, diffusion).expect("well-formed Kramers model")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpKind {
    Attractor,
    Saddle,
    Repeller,
    Marginal,
}

impl EpKind {
    pub fn classify(spectrum: &Spectrum) -> EpKind {
        let re: Vec<f64> = spectrum.eigenvalues.iter().map(|l| l.re).collect();
        if re.iter().any(|r| r.abs() <= MARGINAL_RE) {
            EpKind::Marginal
        } else if re.iter().all(|&r| r < 0.0) {
            EpKind::Attractor
        } else if re.iter().all(|&r| r > 0.0) {
            EpKind::Repeller
        } else {
            EpKind::Saddle
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EpKind::Attractor => "attractor",
            EpKind::Saddle => "saddle",
            EpKind::Repeller => "repeller",
            EpKind::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    pub x: Vector,
    /// Jacobian of the drift, rows `∇aⁱ`.
    pub m: Mat,
    pub spectrum: Spectrum,
    pub kind: EpKind,
}

impl EquilibriumPoint {
    /// Linearizes the model at a known zero of the drift.
    pub fn at(model: &SystemModel, x: &[f64]) -> Result<Self> {
        let m = jacobian_at(model, x)?;
        let spectrum = numkit::eig(&m)?;
        let kind = EpKind::classify(&spectrum);
        Ok(EquilibriumPoint { x: Vector::from_column_slice(x), m, spectrum, kind })
    }
}

pub fn jacobian_at(model: &SystemModel, x: &[f64]) -> Result<Mat> {
    let n = model.dim();
    let jets = model.drift_jets(x)?;
    Ok(Mat::from_fn(n, n, |i, j| jets[i].gradient[j]))
}

/// `ρ = -∇·a`.
pub fn drift_contraction(model: &SystemModel, x: &[f64]) -> Result<f64> {
    Ok(-jacobian_at(model, x)?.trace())
}

/// Outcome of a multi-seed Newton search; per-seed failures are kept, not fatal.
#[derive(Debug, Clone, Default)]
pub struct EquilibriumSearch {
    pub points: Vec<EquilibriumPoint>,
    pub failures: Vec<Error>,
}

const NEWTON_MAX_ITER: usize = 200;
const DEDUP_DIST: f64 = 1e-8;
const STEP_TOL: f64 = 1e-4;

pub fn find_equilibria(model: &SystemModel, seeds: &[Vector], tol: f64) -> Result<EquilibriumSearch> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let mut search = EquilibriumSearch::default();
    for seed in seeds {
        match newton(model, seed, tol) {
            Ok(x) => {
                if search.points.iter().any(|p| (&p.x - &x).norm() <= DEDUP_DIST) {
                    continue;
                }
                search.points.push(EquilibriumPoint::at(model, x.as_slice())?);
            }
            Err(e) => search.failures.push(e),
        }
    }
    search.points.sort_by(|a, b| {
        a.x.iter()
            .zip(b.x.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(search)
}

fn converged(a: &Vector, m: &Mat, x: &Vector, tol: f64) -> bool {
    a.norm() <= tol * (1.0 + numkit::frobenius(m) * x.norm())
}

/// Damped Newton on `a(x) = 0`, pseudo-inverse steps when the Jacobian is singular.
fn newton(model: &SystemModel, seed: &Vector, tol: f64) -> Result<Vector> {
    let fail = || Error::NoConvergence { seed: seed.iter().cloned().collect() };
    let mut x = seed.clone();
    let mut a = model.drift(x.as_slice()).map_err(|_| fail())?;
    for _ in 0..NEWTON_MAX_ITER {
        let m = jacobian_at(model, x.as_slice()).map_err(|_| fail())?;
        let step = newton_step(&m, &a).ok_or_else(fail)?;
        // a small residual alone is not enough: exp(x) = 0 has none but tiny residuals
        if converged(&a, &m, &x, tol) && step.norm() <= STEP_TOL * (1.0 + x.norm()) {
            return Ok(polish(model, x, a, step));
        }
        let norm = a.norm();
        let mut t = 1.0;
        loop {
            let trial = &x + &step * t;
            if let Ok(at) = model.drift(trial.as_slice()) {
                if at.norm() < norm || t < 1e-3 {
                    x = trial;
                    a = at;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(fail());
            }
        }
        if !x.iter().all(|v| v.is_finite()) || x.norm() > 1e8 {
            return Err(fail());
        }
    }
    Err(fail())
}

/// A few full Newton steps past the tolerance, kept while the residual drops.
fn polish(model: &SystemModel, mut x: Vector, mut a: Vector, mut step: Vector) -> Vector {
    for _ in 0..3 {
        let trial = &x + &step;
        let Ok(at) = model.drift(trial.as_slice()) else { break };
        if at.norm() >= a.norm() {
            break;
        }
        (x, a) = (trial, at);
        let Some(next) = jacobian_at(model, x.as_slice()).ok().and_then(|m| newton_step(&m, &a)) else { break };
        step = next;
    }
    x
}

fn newton_step(m: &Mat, a: &Vector) -> Option<Vector> {
    match numkit::solve_linear(m, a) {
        Ok(s) => Some(-s),
        Err(_) => {
            let eps = (1e-12 * numkit::spectral_norm(m)).max(f64::MIN_POSITIVE);
            let pinv = m.clone().pseudo_inverse(eps).ok()?;
            Some(-(pinv * a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::from_rows;

    fn vec2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn kramers_jacobian() {
        let k = KramersModel::quadratic(2.0, 3.0).unwrap();
        let m = jacobian_at(&k.system(), &[0.0, 0.0]).unwrap();
        assert_eq!(m, from_rows(&[&[0.0, 1.0], &[-2.0, -3.0]]));
    }

    #[test]
    fn gradient_and_linear_jacobians() {
        let u = exprdsl::parse("(x1^2 + x2^2)/2", 2, &BTreeMap::new()).unwrap();
        let g = SystemModel::gradient(&u, 2).unwrap();
        assert_eq!(jacobian_at(&g, &[0.0, 0.0]).unwrap(), -numkit::identity(2));

        let m = from_rows(&[&[-1.0, 2.0], &[0.0, -1.0]]);
        let lin = SystemModel::linear(&m, &numkit::identity(2)).unwrap();
        assert_eq!(jacobian_at(&lin, &[0.3, -0.2]).unwrap(), m);
    }

    #[test]
    fn double_well_equilibria() {
        let k = KramersModel::parse("x1^4/4 - x1^2/2", 1.0).unwrap();
        let seeds = [vec2(1.1, 0.1), vec2(-0.9, 0.0), vec2(0.1, -0.1)];
        let found = find_equilibria(&k.system(), &seeds, 1e-12).unwrap();
        assert!(found.failures.is_empty());
        let kinds: Vec<_> = found.points.iter().map(|p| p.kind).collect();
        assert_eq!(kinds, [EpKind::Attractor, EpKind::Saddle, EpKind::Attractor]);
        for (p, x) in found.points.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((p.x[0] - x).abs() < 1e-12 && p.x[1].abs() < 1e-12);
            let u2 = k.u2(p.x[0]).unwrap();
            assert_eq!(p.m, from_rows(&[&[0.0, 1.0], &[-u2, -1.0]]));
        }
    }

    #[test]
    fn ou_and_missing_root() {
        let ou = SystemModel::linear(&from_rows(&[&[-1.0]]), &from_rows(&[&[1.0]])).unwrap();
        let found = find_equilibria(&ou, &[Vector::from_vec(vec![0.5])], 1e-12).unwrap();
        assert_eq!(found.points.len(), 1);
        assert_eq!(found.points[0].kind, EpKind::Attractor);
        assert!(found.points[0].x[0].abs() < 1e-15);

        let p = BTreeMap::new();
        let none = SystemModel::from_sources("exp", 1, &p, &["exp(x1)".into()], &[vec!["1".into()]]).unwrap();
        let found = find_equilibria(&none, &[Vector::from_vec(vec![0.0])], 1e-12).unwrap();
        assert!(found.points.is_empty());
        assert!(matches!(found.failures[0], Error::NoConvergence { .. }));
    }

    #[test]
    fn contraction() {
        let k = KramersModel::parse("x1^4/4 - x1^2/2", 3.0).unwrap();
        assert_eq!(drift_contraction(&k.system(), &[0.3, 0.7]).unwrap(), 3.0);
        let u = exprdsl::parse("x1^4 + x2^2", 2, &BTreeMap::new()).unwrap();
        let g = SystemModel::gradient(&u, 2).unwrap();
        assert!((drift_contraction(&g, &[0.5, 0.1]).unwrap() - (12.0 * 0.25 + 2.0)).abs() < 1e-14);
        let p = BTreeMap::new();
        let rot = SystemModel::from_sources(
            "rot",
            2,
            &p,
            &["x2".into(), "-x1".into()],
            &[vec!["1".into(), "0".into()], vec!["0".into(), "1".into()]],
        )
        .unwrap();
        assert_eq!(drift_contraction(&rot, &[0.4, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_diffusion() {
        let p = BTreeMap::new();
        let drift = ["-x1".to_string(), "-x2".to_string()];
        let asym = [vec!["1".to_string(), "0.5".to_string()], vec!["0".to_string(), "1".to_string()]];
        assert!(matches!(
            SystemModel::from_sources("m", 2, &p, &drift, &asym),
            Err(Error::InvalidModel(_))
        ));
        let indefinite = [vec!["1".to_string(), "0".to_string()], vec!["0".to_string(), "-1".to_string()]];
        assert!(matches!(
            SystemModel::from_sources("m", 2, &p, &drift, &indefinite),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = BTreeMap::new();
        let m = SystemModel::from_sources(
            "nl",
            2,
            &p,
            &["sin(x1)*x2 - x1^3".into(), "exp(-x1^2) - x2".into()],
            &[vec!["1".into(), "0".into()], vec!["0".into(), "1".into()]],
        )
        .unwrap();
        let h = 1e-6;
        for x in [[0.3, -0.4], [1.2, 0.8], [-0.7, 0.1]] {
            let jac = jacobian_at(&m, &x).unwrap();
            for j in 0..2 {
                let mut hi = x;
                let mut lo = x;
                hi[j] += h;
                lo[j] -= h;
                let fd = (m.drift(&hi).unwrap() - m.drift(&lo).unwrap()) / (2.0 * h);
                for i in 0..2 {
                    assert!((fd[i] - jac[(i, j)]).abs() <= 1e-5 * jac[(i, j)].abs().max(1.0));
                }
            }
        }
    }
}
