//! Hamiltonian characteristics of the quasipotential.
//!
//! Integrates `ẋ = ∂H/∂p`, `ṗ = -∂H/∂x` for `H = pᵀ(a + D p)` together with
//! `Φ̇ = p·ẋ`, the variational blocks `(Q, P)` carrying the Hessian
//! `S = P Q⁻¹`, and the prefactor correction `φ₁' = -r`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exit::ExitData;
use crate::localqp::{compute_r, EquilibriumAnalysis};
use crate::model::SystemModel;
use crate::numkit::{self, Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct CharState {
    pub t: f64,
    pub x: Vector,
    pub p: Vector,
    pub phi: f64,
    pub q: Mat,
    pub pm: Mat,
    pub phi1: f64,
}

impl CharState {
    fn at_offset(ea: &EquilibriumAnalysis, delta: &Vector) -> CharState {
        let p = &ea.s * delta;
        CharState {
            t: 0.0,
            x: &ea.ep.x + delta,
            phi: 0.5 * delta.dot(&p),
            p,
            q: numkit::identity(delta.len()),
            pm: ea.s.clone(),
            phi1: 0.0,
        }
    }

    /// `S = P Q⁻¹`, when `Q` is invertible.
    pub fn hessian(&self) -> Option<Mat> {
        let q_inv = numkit::inverse(&self.q).ok()?;
        Some(&self.pm * q_inv)
    }

    pub fn cond_q(&self) -> f64 {
        numkit::condition(&self.q)
    }

    fn pack(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(packed_len(self.x.len()));
        y.extend(self.x.iter());
        y.extend(self.p.iter());
        y.push(self.phi);
        y.extend(self.q.iter());
        y.extend(self.pm.iter());
        y.push(self.phi1);
        y
    }

    fn unpack(t: f64, n: usize, y: &[f64]) -> CharState {
        let nn = n * n;
        CharState {
            t,
            x: Vector::from_column_slice(&y[..n]),
            p: Vector::from_column_slice(&y[n..2 * n]),
            phi: y[2 * n],
            q: Mat::from_column_slice(n, n, &y[2 * n + 1..2 * n + 1 + nn]),
            pm: Mat::from_column_slice(n, n, &y[2 * n + 1 + nn..2 * n + 1 + 2 * nn]),
            phi1: y[2 * n + 1 + 2 * nn],
        }
    }
}

fn packed_len(n: usize) -> usize {
    2 * n + 2 + 2 * n * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    TimeLimit,
    LeftDomain,
    QSingular,
    Stalled,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::TimeLimit => "TimeLimit",
            Termination::LeftDomain => "LeftDomain",
            Termination::QSingular => "QSingular",
            Termination::Stalled => "Stalled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Characteristic {
    pub samples: Vec<CharState>,
    pub termination: Termination,
    /// Largest `|H|` seen, relative to `max(1, ‖p‖² ‖D‖)`.
    pub max_energy: f64,
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Axis-aligned box `(lower, upper)`; unbounded when `None`.
    pub domain: Option<(Vec<f64>, Vec<f64>)>,
    pub q_cond_cap: f64,
    /// Relative `|H|` above which the step is rejected.
    pub energy_tol: f64,
}

impl FlowOptions {
    /// `dt = 1e-3 / max|Re λ|` at the equilibrium.
    pub fn for_equilibrium(ea: &EquilibriumAnalysis, t_max: f64) -> FlowOptions {
        let rate = ea.ep.spectrum.max_abs_re();
        FlowOptions {
            dt: if rate > 0.0 { 1e-3 / rate } else { 1e-3 },
            t_max,
            domain: None,
            q_cond_cap: 1e6,
            energy_tol: 1e-5,
        }
    }
}

/// `H(x, p) = pᵀ(a(x) + D(x) p)`.
pub fn hamiltonian(model: &SystemModel, x: &Vector, p: &Vector) -> Result<f64> {
    let a = model.drift(x.as_slice())?;
    let d = model.diffusion(x.as_slice())?;
    Ok(p.dot(&(a + d * p)))
}

fn energy_scale(model: &SystemModel, x: &Vector, p: &Vector) -> Result<f64> {
    let d = model.diffusion(x.as_slice())?;
    Ok((p.norm_squared() * numkit::frobenius(&d)).max(1.0))
}

/// Right-hand sides `(∂H/∂p, -∂H/∂x)`.
pub fn ham_rhs(model: &SystemModel, x: &Vector, p: &Vector) -> Result<(Vector, Vector)> {
    let blocks = Blocks::new(model, x, p, false)?;
    Ok((blocks.dx, blocks.dp))
}

/// First and second derivatives of `H` at `(x, p)`.
struct Blocks {
    dx: Vector,
    dp: Vector,
    d: Mat,
    h_px: Mat,
    h_xx: Mat,
}

impl Blocks {
    fn new(model: &SystemModel, x: &Vector, p: &Vector, second: bool) -> Result<Blocks> {
        let n = model.dim();
        let xs = x.as_slice();
        let ja = model.drift_jets(xs)?;
        let jd = if model.constant_diffusion().is_some() { None } else { Some(model.diffusion_jets(xs)?) };
        let d = model.diffusion(xs)?;
        let a = Vector::from_iterator(n, ja.iter().map(|j| j.value));
        let dx = a + &d * p * 2.0;
        let mut dp = Vector::zeros(n);
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += p[k] * ja[k].gradient[i];
            }
            if let Some(jd) = &jd {
                for j in 0..n {
                    for k in 0..n {
                        s += p[j] * p[k] * jd[j][k].gradient[i];
                    }
                }
            }
            dp[i] = -s;
        }
        let (mut h_px, mut h_xx) = (Mat::zeros(0, 0), Mat::zeros(0, 0));
        if second {
            h_px = Mat::from_fn(n, n, |i, j| {
                let mut s = ja[i].gradient[j];
                if let Some(jd) = &jd {
                    for k in 0..n {
                        s += 2.0 * jd[i][k].gradient[j] * p[k];
                    }
                }
                s
            });
            h_xx = Mat::from_fn(n, n, |i, j| {
                let mut s = 0.0;
                for k in 0..n {
                    s += p[k] * ja[k].hessian[(i, j)];
                }
                if let Some(jd) = &jd {
                    for k in 0..n {
                        for l in 0..n {
                            s += p[k] * p[l] * jd[k][l].hessian[(i, j)];
                        }
                    }
                }
                s
            });
        }
        Ok(Blocks { dx, dp, d, h_px, h_xx })
    }
}

/// Time derivative of the packed state, or `None` when `Q` is singular.
fn augmented_rhs(model: &SystemModel, y: &[f64]) -> Result<Option<Vec<f64>>> {
    let n = model.dim();
    let s = CharState::unpack(0.0, n, y);
    let Some(hess) = s.hessian() else { return Ok(None) };
    let b = Blocks::new(model, &s.x, &s.p, true)?;
    let q_dot = &b.h_px * &s.q + &b.d * &s.pm * 2.0;
    let p_dot = -(&b.h_xx * &s.q) - b.h_px.transpose() * &s.pm;
    let r = compute_r(model, &s.p, &numkit::symmetrize(&hess), s.x.as_slice())?;
    let mut out = Vec::with_capacity(y.len());
    out.extend(b.dx.iter());
    out.extend(b.dp.iter());
    out.push(s.p.dot(&b.dx));
    out.extend(q_dot.iter());
    out.extend(p_dot.iter());
    out.push(-r);
    Ok(Some(out))
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn rk4_step(model: &SystemModel, y: &[f64], h: f64) -> Result<Option<Vec<f64>>> {
    let Some(k1) = augmented_rhs(model, y)? else { return Ok(None) };
    let Some(k2) = augmented_rhs(model, &axpy(y, h / 2.0, &k1))? else { return Ok(None) };
    let Some(k3) = augmented_rhs(model, &axpy(y, h / 2.0, &k2))? else { return Ok(None) };
    let Some(k4) = augmented_rhs(model, &axpy(y, h, &k3))? else { return Ok(None) };
    Ok(Some(
        (0..y.len())
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect(),
    ))
}

/// Start states on the ellipse `δᵀ S δ = radius²` around an attractor.
///
/// Two dimensions use `k` points on a circle, three use `2k` points of a
/// Fibonacci sphere, and higher dimensions use `2k` points: the `±` axis
/// directions followed by an additive quasi-random sequence.
pub fn init_ring(ea: &EquilibriumAnalysis, radius: f64, k: usize) -> Result<Vec<CharState>> {
    if !numkit::is_positive_definite(&ea.s) {
        return Err(Error::NotPositiveDefinite);
    }
    let n = ea.dim();
    let root = numkit::inv_sqrt_spd(&ea.s)?;
    Ok(sphere_points(n, k)
        .into_iter()
        .map(|u| CharState::at_offset(ea, &(&root * u * radius)))
        .collect())
}

fn sphere_points(n: usize, k: usize) -> Vec<Vector> {
    use std::f64::consts::PI;
    match n {
        1 => vec![Vector::from_element(1, 1.0), Vector::from_element(1, -1.0)],
        2 => (0..k)
            .map(|j| {
                let th = 2.0 * PI * j as f64 / k as f64;
                Vector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect(),
        3 => {
            let m = 2 * k;
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|j| {
                    let z = 1.0 - (2.0 * j as f64 + 1.0) / m as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let th = golden * j as f64;
                    Vector::from_vec(vec![rho * th.cos(), rho * th.sin(), z])
                })
                .collect()
        }
        _ => {
            let m = 2 * k;
            let mut out = Vec::with_capacity(m);
            for i in 0..n {
                for s in [1.0, -1.0] {
                    let mut e = Vector::zeros(n);
                    e[i] = s;
                    out.push(e);
                }
            }
            // R_n sequence: alpha_i = g^{-(i+1)} with g the root of g^{n+1} = g + 1
            let mut g = 2.0f64;
            for _ in 0..64 {
                g = (1.0 + g).powf(1.0 / (n as f64 + 1.0));
            }
            let alpha: Vec<f64> = (0..n).map(|i| g.powi(-(i as i32 + 1))).collect();
            let mut j = 1usize;
            while out.len() < m {
                let v = Vector::from_iterator(n, alpha.iter().map(|a| 2.0 * ((0.5 + a * j as f64).fract()) - 1.0));
                j += 1;
                if v.norm() > 1e-3 {
                    out.push(v.normalize());
                }
            }
            out.truncate(m);
            out
        }
    }
}

/// Start states at `saddle ± delta·start_dir`.
pub fn launch_exit(ea: &EquilibriumAnalysis, exit: &ExitData, delta: f64) -> [CharState; 2] {
    let offset = &exit.start_dir * delta;
    [CharState::at_offset(ea, &offset), CharState::at_offset(ea, &-offset)]
}

/// Fixed-step RK4 on `(x, p, Φ, Q, P, φ₁)`.
pub fn integrate(model: &SystemModel, start: &CharState, opts: &FlowOptions) -> Result<Characteristic> {
    if !(opts.dt > 0.0) || !(opts.t_max >= 0.0) {
        return Err(Error::InvalidConfig(format!("dt = {}, t_max = {}", opts.dt, opts.t_max)));
    }
    let n = model.dim();
    if start.x.len() != n || start.p.len() != n || start.q.shape() != (n, n) || start.pm.shape() != (n, n) {
        return Err(Error::InvalidConfig("start state does not match model dimension".into()));
    }
    let inside = |x: &Vector| match &opts.domain {
        Some((lo, hi)) => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *l <= *v && *v <= *h),
        None => x.iter().all(|v| v.is_finite()),
    };
    let mut samples = vec![start.clone()];
    let mut y = start.pack();
    let mut t = start.t;
    let mut max_energy = hamiltonian(model, &start.x, &start.p)?.abs() / energy_scale(model, &start.x, &start.p)?;
    let mut step = 0u64;
    let termination = loop {
        let current = samples.last().expect("at least the start sample");
        if !inside(&current.x) {
            break Termination::LeftDomain;
        }
        if current.cond_q() > opts.q_cond_cap {
            break Termination::QSingular;
        }
        let (dx, _) = ham_rhs(model, &current.x, &current.p)?;
        if dx.norm() < 1e-12 {
            break Termination::Stalled;
        }
        if t >= opts.t_max - 1e-12 * opts.dt {
            break Termination::TimeLimit;
        }
        let h = opts.dt.min(opts.t_max - t);
        let Some(next) = rk4_step(model, &y, h)? else { break Termination::QSingular };
        step += 1;
        t = start.t + step as f64 * opts.dt;
        if t > opts.t_max {
            t = opts.t_max;
        }
        let state = CharState::unpack(t, n, &next);
        if state.x.iter().chain(state.p.iter()).any(|v| !v.is_finite()) {
            break Termination::LeftDomain;
        }
        let energy = hamiltonian(model, &state.x, &state.p)?.abs();
        let rel = energy / energy_scale(model, &state.x, &state.p)?;
        if rel > opts.energy_tol {
            return Err(Error::StepRejected { t, h: energy });
        }
        max_energy = max_energy.max(rel);
        y = next;
        samples.push(state);
    };
    Ok(Characteristic { samples, termination, max_energy })
}

/// CSV with columns `t, x_i, p_i, Phi, phi1, S_i_j, cond_Q`.
pub fn to_csv(ch: &Characteristic, n: usize) -> String {
    let mut out = String::from("t");
    for i in 1..=n {
        write!(out, ",x_{i}").unwrap();
    }
    for i in 1..=n {
        write!(out, ",p_{i}").unwrap();
    }
    out.push_str(",Phi,phi1");
    for i in 1..=n {
        for j in 1..=n {
            write!(out, ",S_{i}_{j}").unwrap();
        }
    }
    out.push_str(",cond_Q\n");
    for s in &ch.samples {
        write!(out, "{:e}", s.t).unwrap();
        for v in s.x.iter().chain(s.p.iter()) {
            write!(out, ",{v:e}").unwrap();
        }
        write!(out, ",{:e},{:e}", s.phi, s.phi1).unwrap();
        let hess = s.hessian().unwrap_or_else(|| Mat::from_element(n, n, f64::NAN));
        for i in 0..n {
            for j in 0..n {
                write!(out, ",{:e}", hess[(i, j)]).unwrap();
            }
        }
        writeln!(out, ",{:e}", s.cond_q()).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::exit_direction;
    use crate::exprdsl::parse;
    use crate::localqp::analyze_ep;
    use crate::model::{EquilibriumPoint, KramersModel};
    use crate::numkit::{diag, from_rows, identity};

    fn analysis(model: &SystemModel, x: &[f64]) -> EquilibriumAnalysis {
        let ep = EquilibriumPoint::at(model, x).unwrap();
        analyze_ep(model, &ep).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn rhs_examples() {
        let k = KramersModel::parse("x1^4/4 - x1^2/2", 3.0).unwrap();
        let model = k.system();
        let (x, vel) = (0.7, -0.4);
        let (dx, dp) = ham_rhs(&model, &v(&[x, vel]), &Vector::zeros(2)).unwrap();
        assert_eq!(dx, model.drift(&[x, vel]).unwrap());
        assert_eq!(dp, Vector::zeros(2));
        let u1 = k.u1(x).unwrap();
        let (dx, _) = ham_rhs(&model, &v(&[x, vel]), &v(&[u1, vel])).unwrap();
        assert!((dx[0] - vel).abs() < 1e-15 && (dx[1] - (3.0 * vel - u1)).abs() < 1e-14);

        let m = from_rows(&[&[-1.0, 2.0], &[0.5, -3.0]]);
        let lin = SystemModel::linear(&m, &identity(2)).unwrap();
        let p = v(&[0.3, -0.7]);
        let (_, dp) = ham_rhs(&lin, &v(&[1.0, 2.0]), &p).unwrap();
        assert!((dp + m.transpose() * &p).norm() < 1e-15);
    }

    fn state_dependent_model() -> SystemModel {
        let p = Default::default();
        SystemModel::from_sources(
            "sd",
            2,
            &p,
            &["-x1 + x2^2".into(), "-sin(x1) - x2".into()],
            &[
                vec!["1 + x1^2/2".into(), "x1*x2/4".into()],
                vec!["x1*x2/4".into(), "exp(x2/3)".into()],
            ],
        )
        .unwrap()
    }

    #[test]
    fn rhs_matches_finite_differences_of_h() {
        let model = state_dependent_model();
        let (x, p) = (v(&[0.4, -0.3]), v(&[0.2, 0.5]));
        let (dx, dp) = ham_rhs(&model, &x, &p).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut e = Vector::zeros(2);
            e[i] = h;
            let hp = (hamiltonian(&model, &x, &(&p + &e)).unwrap() - hamiltonian(&model, &x, &(&p - &e)).unwrap()) / (2.0 * h);
            let hx = (hamiltonian(&model, &(&x + &e), &p).unwrap() - hamiltonian(&model, &(&x - &e), &p).unwrap()) / (2.0 * h);
            assert!((dx[i] - hp).abs() < 1e-8);
            assert!((dp[i] + hx).abs() < 1e-8);
        }
        // second-derivative blocks against differences of the first
        let b = Blocks::new(&model, &x, &p, true).unwrap();
        for j in 0..2 {
            let mut e = Vector::zeros(2);
            e[j] = h;
            let (dxp, dpp) = ham_rhs(&model, &(&x + &e), &p).unwrap();
            let (dxm, dpm) = ham_rhs(&model, &(&x - &e), &p).unwrap();
            for i in 0..2 {
                assert!((b.h_px[(i, j)] - (dxp[i] - dxm[i]) / (2.0 * h)).abs() < 1e-7);
                assert!((b.h_xx[(i, j)] + (dpp[i] - dpm[i]) / (2.0 * h)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn ring_examples() {
        let model = KramersModel::quadratic(2.0, 3.0).unwrap().system();
        let ea = analysis(&model, &[0.0, 0.0]);
        let ring = init_ring(&ea, 0.1, 4).unwrap();
        let expected = [[0.1 / 2f64.sqrt(), 0.0], [0.0, 0.1], [-0.1 / 2f64.sqrt(), 0.0], [0.0, -0.1]];
        for (s, e) in ring.iter().zip(expected) {
            assert!((&s.x - v(&e)).norm() < 1e-15);
            assert!((s.phi - 0.005).abs() < 1e-15);
            assert!((&s.p - &ea.s * &s.x).norm() < 1e-15);
        }
        for s in init_ring(&ea, 0.0, 5).unwrap() {
            assert_eq!(s.p.norm() + s.phi + s.x.norm(), 0.0);
        }

        let m = from_rows(&[&[-1.0, 1.0, 0.0], &[0.0, -2.0, 0.5], &[0.0, 0.0, -1.5]]);
        let lin = SystemModel::linear(&m, &identity(3)).unwrap();
        let ea = analysis(&lin, &[0.0; 3]);
        let ring = init_ring(&ea, 0.2, 6).unwrap();
        assert_eq!(ring.len(), 12);
        for s in &ring {
            assert!((s.x.dot(&(&ea.s * &s.x)) - 0.04).abs() < 1e-14);
        }

        let m = -diag(&[1.0, 2.0, 3.0, 4.0]);
        let lin = SystemModel::linear(&m, &identity(4)).unwrap();
        let ring = init_ring(&analysis(&lin, &[0.0; 4]), 1.0, 7).unwrap();
        assert_eq!(ring.len(), 14);

        let saddle = KramersModel::quadratic(-2.0, 1.0).unwrap().system();
        assert_eq!(init_ring(&analysis(&saddle, &[0.0, 0.0]), 0.1, 4).unwrap_err(), Error::NotPositiveDefinite);
    }

    #[test]
    fn exit_launch() {
        let model = KramersModel::quadratic(-2.0, 1.0).unwrap().system();
        let ea = analysis(&model, &[0.0, 0.0]);
        let ex = exit_direction(&ea, None).unwrap();
        let [a, b] = launch_exit(&ea, &ex, 1e-3);
        assert!((a.x[0] + a.x[1]).abs() < 1e-18 && a.x[0] > 0.0);
        assert!((&b.x + &a.x).norm() < 1e-18);
        assert!((&a.p - diag(&[-2.0, 1.0]) * &a.x).norm() < 1e-18);
        let [z, _] = launch_exit(&ea, &ex, 0.0);
        assert_eq!(z.p.norm(), 0.0);
    }

    fn gradient_model() -> (SystemModel, crate::exprdsl::Expr) {
        let u = parse("x1^4/4 - x1^2/2 + x2^2/2", 2, &Default::default()).unwrap();
        (SystemModel::gradient(&u, 2).unwrap(), u)
    }

    #[test]
    fn gradient_system_characteristics() {
        let (model, u) = gradient_model();
        let ea = analysis(&model, &[-1.0, 0.0]);
        let u_min = u.value(&[-1.0, 0.0]).unwrap();
        let opts = FlowOptions {
            dt: 1e-3,
            t_max: 20.0,
            domain: Some((vec![-2.0, -2.0], vec![2.0, 2.0])),
            q_cond_cap: 1e6,
            energy_tol: 1e-5,
        };
        for start in init_ring(&ea, 1e-6, 8).unwrap() {
            let ch = integrate(&model, &start, &opts).unwrap();
            assert!(ch.samples.len() > 10);
            assert!(ch.max_energy < 1e-6);
            let mut worst = (0.0f64, 0.0f64, 0.0f64);
            for s in &ch.samples {
                let exact = u.value(s.x.as_slice()).unwrap() - u_min;
                worst.0 = worst.0.max((s.phi - exact).abs());
                worst.1 = worst.1.max(s.phi1.abs());
                let hess = s.hessian().unwrap();
                assert!(numkit::frobenius(&(&hess - hess.transpose())) < 1e-6);
                let exact = u.evaluate(s.x.as_slice()).unwrap().hessian;
                worst.2 = worst.2.max(numkit::frobenius(&(&hess - exact)));
            }
            assert!(worst.0 < 1e-6 && worst.1 < 1e-5 && worst.2 < 1e-4, "{worst:?}");
            for w in ch.samples.windows(2) {
                assert!(w[1].t > w[0].t && w[1].phi >= w[0].phi - 1e-15);
            }
        }
    }

    #[test]
    fn phi_rate_matches_p_dot_xdot() {
        let (model, _) = gradient_model();
        let ea = analysis(&model, &[-1.0, 0.0]);
        let start = &init_ring(&ea, 1e-2, 3).unwrap()[1];
        let opts = FlowOptions { dt: 1e-3, t_max: 2.0, domain: None, q_cond_cap: 1e6, energy_tol: 1e-5 };
        let ch = integrate(&model, start, &opts).unwrap();
        for w in ch.samples.windows(3).step_by(50) {
            let rate = (w[2].phi - w[0].phi) / (w[2].t - w[0].t);
            let (dx, _) = ham_rhs(&model, &w[1].x, &w[1].p).unwrap();
            assert!((rate - w[1].p.dot(&dx)).abs() < 1e-5 * (1.0 + rate.abs()));
        }
    }

    #[test]
    fn zero_momentum_follows_drift() {
        let (model, _) = gradient_model();
        let start = CharState {
            t: 0.0,
            x: v(&[0.5, 0.5]),
            p: Vector::zeros(2),
            phi: 0.0,
            q: identity(2),
            pm: Mat::zeros(2, 2),
            phi1: 0.0,
        };
        let opts = FlowOptions { dt: 1e-2, t_max: 3.0, domain: None, q_cond_cap: 1e6, energy_tol: 1e-5 };
        let ch = integrate(&model, &start, &opts).unwrap();
        assert_eq!(ch.termination, Termination::TimeLimit);
        let last = ch.samples.last().unwrap();
        assert!(last.phi == 0.0 && last.p.norm() == 0.0);
        // y' = -y exactly
        assert!((last.x[1] - 0.5 * (-3.0f64).exp()).abs() < 1e-8);
        let at_ep = CharState { x: v(&[1.0, 0.0]), ..start };
        assert_eq!(integrate(&model, &at_ep, &opts).unwrap().termination, Termination::Stalled);
    }

    #[test]
    fn kramers_reproduces_phi_eq() {
        let k = KramersModel::parse("x1^4/4 - x1^2/2 + x1^3/10", 2.0).unwrap();
        let model = k.system();
        let found = crate::model::find_equilibria(&model, &[v(&[-1.2, 0.0])], 1e-12).unwrap();
        let bottom = found.points[0].clone();
        let ea = analyze_ep(&model, &bottom).unwrap();
        let floor = k.phi_eq(bottom.x[0], 0.0).unwrap();
        let opts = FlowOptions {
            dt: 1e-3,
            t_max: 8.0,
            domain: Some((vec![-2.5, -2.5], vec![2.5, 2.5])),
            q_cond_cap: 1e6,
            energy_tol: 1e-5,
        };
        for start in init_ring(&ea, 1e-3, 6).unwrap() {
            let ch = integrate(&model, &start, &opts).unwrap();
            for s in &ch.samples {
                let exact = k.phi_eq(s.x[0], s.x[1]).unwrap() - floor;
                assert!((s.phi - exact).abs() < 1e-5, "t={} {} vs {exact}", s.t, s.phi);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let (model, _) = gradient_model();
        let ea = analysis(&model, &[-1.0, 0.0]);
        let start = &init_ring(&ea, 1e-3, 4).unwrap()[0];
        let opts = FlowOptions { dt: 1e-2, t_max: 0.05, domain: None, q_cond_cap: 1e6, energy_tol: 1e-5 };
        let ch = integrate(&model, start, &opts).unwrap();
        let csv = to_csv(&ch, 2);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,x_2,p_1,p_2,Phi,phi1,S_1_1,S_1_2,S_2_1,S_2_2,cond_Q");
        assert_eq!(lines.count(), ch.samples.len());
        assert_eq!(ch.samples.len(), 6);
    }
}
