//! Euler–Maruyama simulation of `dx = a dt + sqrt(2ε) L dW` with `L Lᵀ = D`.
//!
//! Normals come from ChaCha8 with the stream set to the path index and a
//! fixed number of words consumed per step, so every draw is a function of
//! `(seed, path, step)` alone and paths can run in any order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::numkit::{self, Mat, Vector};

/// Largest `dt·max|Re λ(M)|` accepted by [`SimConfig::check_stability`].
pub const STABILITY_GUARD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub burn_in: usize,
    /// Paths with `‖x‖` beyond this radius are reported as diverged.
    pub guard_radius: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.n_paths == 0 {
            return bad("n_paths must be positive".into());
        }
        if self.burn_in >= self.n_steps {
            return bad(format!("burn_in {} must be below n_steps {}", self.burn_in, self.n_steps));
        }
        if !(self.guard_radius > 0.0) {
            return bad("guard_radius must be positive".into());
        }
        Ok(())
    }

    /// Rejects a step size that is too large for the linearization `M`.
    pub fn check_stability(&self, m: &Mat) -> Result<()> {
        let rate = numkit::eig(m)?.max_abs_re();
        if self.dt * rate > STABILITY_GUARD {
            return Err(Error::InvalidConfig(format!(
                "dt·max|Re λ| = {} exceeds {STABILITY_GUARD}",
                self.dt * rate
            )));
        }
        Ok(())
    }
}

/// Standard normals for one step, drawn by Box–Muller from two words per pair.
struct NormalSource {
    rng: ChaCha8Rng,
    words_per_step: u128,
}

impl NormalSource {
    fn new(seed: u64, path: u64, n: usize) -> NormalSource {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        // set_word_pos counts 32-bit words; each pair uses two u64 draws
        NormalSource { rng, words_per_step: 4 * n.div_ceil(2) as u128 }
    }

    fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * self.words_per_step);
    }

    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    fn fill(&mut self, z: &mut [f64]) {
        for pair in z.chunks_mut(2) {
            let (u1, u2) = (self.uniform(), self.uniform());
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            pair[0] = radius * angle.cos();
            if let Some(second) = pair.get_mut(1) {
                *second = radius * angle.sin();
            }
        }
    }
}

/// Stepper for a single path.
struct Path<'a> {
    model: &'a SystemModel,
    cfg: &'a SimConfig,
    noise: NormalSource,
    factor: Option<Mat>,
    x: Vector,
    drift: Vec<f64>,
    z: Vec<f64>,
    step: usize,
}

impl<'a> Path<'a> {
    fn new(model: &'a SystemModel, x0: &Vector, cfg: &'a SimConfig, path: u64) -> Result<Path<'a>> {
        let n = model.dim();
        if x0.len() != n {
            return Err(Error::InvalidConfig(format!("x0 has {} entries, n = {n}", x0.len())));
        }
        let factor = model.constant_diffusion().map(numkit::psd_factor).transpose()?;
        let mut noise = NormalSource::new(cfg.seed, path, n);
        noise.seek(0);
        Ok(Path { model, cfg, noise, factor, x: x0.clone(), drift: vec![0.0; n], z: vec![0.0; n], step: 0 })
    }

    fn advance(&mut self) -> Result<()> {
        let (eps, dt) = (self.cfg.epsilon, self.cfg.dt);
        let xs = self.x.as_slice();
        self.model.drift_into(xs, &mut self.drift)?;
        let local;
        let l = match &self.factor {
            Some(l) => l,
            None => {
                // the Fokker–Planck operator carries ∂_j D^{ij}, the Itô drift does not
                let div = self.model.diffusion_divergence(xs)?;
                for (a, g) in self.drift.iter_mut().zip(div.iter()) {
                    *a += eps * g;
                }
                local = numkit::psd_factor(&self.model.diffusion(xs)?)?;
                &local
            }
        };
        self.noise.fill(&mut self.z);
        let amp = (2.0 * eps * dt).sqrt();
        let n = self.x.len();
        for i in 0..n {
            let kick: f64 = (0..n).map(|j| l[(i, j)] * self.z[j]).sum();
            self.x[i] += self.drift[i] * dt + amp * kick;
        }
        self.step += 1;
        let r = self.x.norm();
        if !r.is_finite() || r > self.cfg.guard_radius {
            return Err(Error::Diverged { step: self.step });
        }
        Ok(())
    }
}

/// Full trajectory of one path, `n_steps + 1` points including `x0`.
pub fn simulate_path(model: &SystemModel, x0: &Vector, cfg: &SimConfig, path: u64) -> Result<Vec<Vector>> {
    cfg.validate()?;
    let mut p = Path::new(model, x0, cfg, path)?;
    let mut out = Vec::with_capacity(cfg.n_steps + 1);
    out.push(x0.clone());
    for _ in 0..cfg.n_steps {
        p.advance()?;
        out.push(p.x.clone());
    }
    Ok(out)
}

/// Sum by recursive halving.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        len if len <= 8 => values.iter().sum(),
        len => pairwise_sum(&values[..len / 2]) + pairwise_sum(&values[len / 2..]),
    }
}

#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Vector,
    pub covariance: Mat,
    pub stderr: Mat,
    /// Number of batch means behind the standard errors.
    pub n_effective: usize,
    /// Paths dropped after leaving the guard radius.
    pub diverged: usize,
}

impl McEstimate {
    /// Elementwise `|C - expected| / stderr`.
    pub fn z_scores(&self, expected: &Mat) -> Mat {
        (&self.covariance - expected).abs().component_div(&self.stderr)
    }
}

/// Batches per path used for the standard errors.
const BATCHES_PER_PATH: usize = 20;

/// Batch sums of `x` and `x xᵀ` for one path after burn-in.
fn path_batches(model: &SystemModel, x0: &Vector, cfg: &SimConfig, path: u64) -> Result<Vec<(Vector, Mat, usize)>> {
    let n = model.dim();
    let kept = cfg.n_steps - cfg.burn_in;
    let batches = BATCHES_PER_PATH.min(kept);
    let mut out: Vec<(Vector, Mat, usize)> = (0..batches).map(|_| (Vector::zeros(n), Mat::zeros(n, n), 0)).collect();
    let mut p = Path::new(model, x0, cfg, path)?;
    for _ in 0..cfg.burn_in {
        p.advance()?;
    }
    for k in 0..kept {
        p.advance()?;
        let b = &mut out[k * batches / kept];
        b.0 += &p.x;
        b.1.ger(1.0, &p.x, &p.x, 1.0);
        b.2 += 1;
    }
    Ok(out)
}

/// Time-averaged covariance over all paths started at `x0`, with batch-means errors.
pub fn stationary_covariance(model: &SystemModel, x0: &Vector, cfg: &SimConfig) -> Result<McEstimate> {
    cfg.validate()?;
    let n = model.dim();
    let per_path: Vec<Result<Vec<(Vector, Mat, usize)>>> =
        (0..cfg.n_paths as u64).into_par_iter().map(|path| path_batches(model, x0, cfg, path)).collect();
    let mut batches = Vec::new();
    let (mut diverged, mut first) = (0, usize::MAX);
    for r in per_path {
        match r {
            Ok(b) => batches.extend(b),
            Err(Error::Diverged { step }) => {
                diverged += 1;
                first = first.min(step);
            }
            Err(e) => return Err(e),
        }
    }
    if batches.is_empty() {
        return Err(Error::Diverged { step: first });
    }
    let nb = batches.len();
    let means: Vec<Vector> = batches.iter().map(|b| &b.0 / b.2 as f64).collect();
    let seconds: Vec<Mat> = batches.iter().map(|b| &b.1 / b.2 as f64).collect();
    let weights: Vec<f64> = batches.iter().map(|b| b.2 as f64).collect();
    let total = pairwise_sum(&weights);
    let avg = |f: &dyn Fn(usize) -> f64| {
        let terms: Vec<f64> = (0..nb).map(|b| f(b) * weights[b]).collect();
        pairwise_sum(&terms) / total
    };
    let mean = Vector::from_fn(n, |i, _| avg(&|b| means[b][i]));
    let second = Mat::from_fn(n, n, |i, j| avg(&|b| seconds[b][(i, j)]));
    let covariance = numkit::symmetrize(&(second - &mean * mean.transpose()));
    // delta method: C_ij is linear in the batch moments to first order
    let stderr = Mat::from_fn(n, n, |i, j| {
        let y: Vec<f64> = (0..nb)
            .map(|b| seconds[b][(i, j)] - mean[i] * means[b][j] - means[b][i] * mean[j])
            .collect();
        let ybar = pairwise_sum(&y) / nb as f64;
        let dev: Vec<f64> = y.iter().map(|v| (v - ybar).powi(2)).collect();
        let var = pairwise_sum(&dev) / (nb.max(2) - 1) as f64;
        (var / nb as f64).sqrt().max(f64::MIN_POSITIVE)
    });
    Ok(McEstimate { mean, covariance, stderr, n_effective: nb, diverged })
}

#[derive(Debug, Clone)]
pub struct ExitEstimate {
    pub met: f64,
    pub stderr: f64,
    /// First exit time per path; `None` when censored or diverged.
    pub times: Vec<Option<f64>>,
    pub censored: usize,
    pub diverged: usize,
}

impl ExitEstimate {
    pub fn exited(&self) -> usize {
        self.times.iter().filter(|t| t.is_some()).count()
    }
}

/// Mean first time at which `exit_region` holds, over paths started at `x0`.
pub fn mean_exit_time<F>(model: &SystemModel, x0: &Vector, exit_region: F, cfg: &SimConfig) -> Result<ExitEstimate>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    cfg.validate()?;
    let outcomes: Vec<Result<Option<f64>>> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut p = Path::new(model, x0, cfg, path)?;
            if exit_region(p.x.as_slice()) {
                return Ok(Some(0.0));
            }
            for _ in 0..cfg.n_steps {
                p.advance()?;
                if exit_region(p.x.as_slice()) {
                    return Ok(Some(p.step as f64 * cfg.dt));
                }
            }
            Ok(None)
        })
        .collect();
    let mut times = Vec::with_capacity(cfg.n_paths);
    let (mut censored, mut diverged, mut first) = (0, 0, usize::MAX);
    for o in outcomes {
        match o {
            Ok(t) => {
                censored += t.is_none() as usize;
                times.push(t);
            }
            Err(Error::Diverged { step }) => {
                diverged += 1;
                first = first.min(step);
                times.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let done: Vec<f64> = times.iter().flatten().copied().collect();
    if done.is_empty() {
        return Err(if diverged == cfg.n_paths {
            Error::Diverged { step: first }
        } else {
            Error::InvalidConfig(format!("all {censored} paths censored; raise n_steps"))
        });
    }
    let k = done.len() as f64;
    let met = pairwise_sum(&done) / k;
    let dev: Vec<f64> = done.iter().map(|t| (t - met).powi(2)).collect();
    let stderr = if done.len() > 1 { (pairwise_sum(&dev) / (k - 1.0) / k).sqrt() } else { f64::INFINITY };
    Ok(ExitEstimate { met, stderr, times, censored, diverged })
}
