use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qpot::charflow::{init_ring, integrate, launch_exit, to_csv, FlowOptions};
use qpot::exit::{exit_direction, similarity_defect, ExitData};
use qpot::localqp::{
    analyze_ep, analyze_ep_with, compute_r, kramers_phi_pm, minimum_principle_probe, probe_grid, AnalysisOptions,
    Branch, EquilibriumAnalysis,
};
use qpot::matequ::riccati_residual;
use qpot::mcoracle::{mean_exit_time, stationary_covariance, SimConfig};
use qpot::model::{find_equilibria, EpKind, EquilibriumPoint, EquilibriumSearch, KramersModel, SystemModel};
use qpot::numkit::{self, Mat, Vector};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::modelfile::LoadedModel;
use crate::report::{self, complex_list, matrix, num, vector, REPORT_VERSION};

/// Axis grids `lo:hi:count`, comma separated; a single axis applies to every coordinate.
pub fn parse_seeds(spec: &str, n: usize) -> Result<Vec<Vector>, CliError> {
    let axes: Vec<Vec<f64>> = spec
        .split(',')
        .map(|axis| {
            let parts: Vec<&str> = axis.trim().split(':').collect();
            let bad = || CliError::usage(format!("seed axis {axis:?} is not lo:hi:count"));
            let [lo, hi, count] = parts.as_slice() else { return Err(bad()) };
            let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
            let count: usize = count.trim().parse().map_err(|_| bad())?;
            if count == 0 || !lo.is_finite() || !hi.is_finite() {
                return Err(bad());
            }
            Ok((0..count)
                .map(|k| if count == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (count - 1) as f64 })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let axes = match axes.len() {
        1 => vec![axes[0].clone(); n],
        len if len == n => axes,
        len => return Err(CliError::usage(format!("{len} seed axes given for n = {n}"))),
    };
    let mut seeds = vec![Vec::new()];
    for axis in &axes {
        seeds = seeds
            .into_iter()
            .flat_map(|prefix: Vec<f64>| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    Ok(seeds.into_iter().map(Vector::from_vec).collect())
}

fn default_seed_spec(n: usize) -> String {
    let count = match n {
        1 | 2 => 7,
        3 => 5,
        _ => 3,
    };
    format!("-3:3:{count}")
}

pub struct Discovery {
    pub tol: f64,
    pub seeds: Option<String>,
}

pub fn discover(model: &SystemModel, d: &Discovery) -> Result<EquilibriumSearch, CliError> {
    let spec = d.seeds.clone().unwrap_or_else(|| default_seed_spec(model.dim()));
    let seeds = parse_seeds(&spec, model.dim())?;
    Ok(find_equilibria(model, &seeds, d.tol)?)
}

fn pick_ep(search: &EquilibriumSearch, index: usize) -> Result<&EquilibriumPoint, CliError> {
    search.points.get(index).ok_or_else(|| {
        CliError::bad_ep(format!("equilibrium index {index} out of range ({} found)", search.points.len()))
    })
}

fn analysis_json(ea: &EquilibriumAnalysis) -> Value {
    let dg = &ea.diagnostics;
    json!({
        "chi": ea.chi.map(num),
        "D": matrix(&ea.d),
        "A": matrix(&ea.a),
        "S": matrix(&ea.s),
        "S_inv": ea.s_inv.as_ref().map(matrix),
        "gradient_map": matrix(&ea.gradient_map),
        "rank_S": ea.rank_s,
        "rank_M": ea.rank_m,
        "residual_freidlin": num(dg.freidlin),
        "residual_riccati": num(dg.riccati),
        "residual_symmetry": num(dg.symmetry),
        "residual_lyapunov": dg.lyapunov.map(num),
        "residual_A": num(dg.a_equation),
        "r_at_ep": num(dg.r_at_ep),
    })
}

fn exit_json(ex: &ExitData, ea: &EquilibriumAnalysis) -> Value {
    json!({
        "lambda_plus": num(ex.lambda_plus),
        "f": vector(&ex.f),
        "start_dir": vector(&ex.start_dir),
        "Mtilde": matrix(&ex.mtilde),
        "spectrum_match": ex.spectrum_match,
        "spectrum_distance": num(ex.spectrum_distance),
        "eigen_residual": num(ex.eigen_residual),
        "collinearity": ex.collinearity.map(num),
        "similarity_defect": similarity_defect(ea).map(num),
    })
}

fn ep_json(index: usize, ep: &EquilibriumPoint) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("index".into(), json!(index));
    m.insert("x".into(), vector(&ep.x));
    m.insert("kind".into(), json!(ep.kind.as_str()));
    m.insert("eigenvalues".into(), complex_list(&ep.spectrum.eigenvalues));
    m.insert("M".into(), matrix(&ep.m));
    m
}

pub fn analyze(loaded: &LoadedModel, d: &Discovery) -> Result<Value, CliError> {
    let model = &loaded.system;
    let search = discover(model, d)?;
    let entries: Vec<Value> = search
        .points
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut entry = ep_json(i, ep);
            match analyze_ep(model, ep) {
                Ok(ea) => {
                    entry.insert("status".into(), json!("ok"));
                    entry.insert("analysis".into(), analysis_json(&ea));
                    if ep.kind == EpKind::Saddle {
                        match exit_direction(&ea, None) {
                            Ok(ex) => entry.insert("exit".into(), exit_json(&ex, &ea)),
                            Err(e) => entry.insert("exit_error".into(), json!(e.to_string())),
                        };
                    }
                }
                Err(qpot::Error::MarginalEquilibrium) => {
                    entry.insert("status".into(), json!("skipped"));
                    entry.insert("error".into(), json!("marginal equilibrium"));
                }
                Err(e) => {
                    entry.insert("status".into(), json!("error"));
                    entry.insert("error".into(), json!(e.to_string()));
                }
            }
            Value::Object(entry)
        })
        .collect();
    Ok(json!({
        "report_version": REPORT_VERSION,
        "model": loaded.echo,
        "equilibria": entries,
        "seed_failures": search.failures.len(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FlowMode {
    Ring,
    Exit,
}

pub struct FlowArgs {
    pub ep: usize,
    pub mode: FlowMode,
    pub k: usize,
    pub radius: f64,
    pub dt: Option<f64>,
    pub tmax: f64,
    pub box_half: f64,
}

pub fn flow(loaded: &LoadedModel, d: &Discovery, args: &FlowArgs, out: &Path) -> Result<Value, CliError> {
    let model = &loaded.system;
    let search = discover(model, d)?;
    let ep = pick_ep(&search, args.ep)?;
    let ea = analyze_ep(model, ep).map_err(|e| CliError::bad_ep(e.to_string()))?;
    let starts = match args.mode {
        FlowMode::Ring => init_ring(&ea, args.radius, args.k)
            .map_err(|e| CliError::bad_ep(format!("ring launch needs an attractor: {e}")))?,
        FlowMode::Exit => {
            let ex = exit_direction(&ea, None)?;
            launch_exit(&ea, &ex, args.radius).to_vec()
        }
    };
    let mut opts = FlowOptions::for_equilibrium(&ea, args.tmax);
    if let Some(dt) = args.dt {
        opts.dt = dt;
    }
    let lo: Vec<f64> = ep.x.iter().map(|c| c - args.box_half).collect();
    let hi: Vec<f64> = ep.x.iter().map(|c| c + args.box_half).collect();
    opts.domain = Some((lo, hi));
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let n = model.dim();
    let results: Vec<_> = starts.par_iter().map(|s| integrate(model, s, &opts)).collect();
    let mut files = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let name = format!("char_{i:03}.csv");
        match r {
            Ok(ch) => {
                let path = out.join(&name);
                std::fs::write(&path, to_csv(&ch, n)).map_err(|e| CliError::io(&path, e))?;
                files.push(json!({
                    "file": name,
                    "termination": ch.termination.as_str(),
                    "samples": ch.samples.len(),
                    "t_end": num(ch.samples.last().map_or(0.0, |s| s.t)),
                    "max_energy": num(ch.max_energy),
                }));
            }
            Err(e) => files.push(json!({ "file": Value::Null, "termination": "error", "error": e.to_string() })),
        }
    }
    let manifest = json!({
        "report_version": REPORT_VERSION,
        "ep_index": args.ep,
        "ep": vector(&ep.x),
        "mode": match args.mode { FlowMode::Ring => "ring", FlowMode::Exit => "exit" },
        "dt": num(opts.dt),
        "t_max": num(opts.t_max),
        "characteristics": files,
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, report::to_string(&manifest) + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// Predicate `lhs op rhs` over the state, e.g. `x1 > 0`.
pub struct Region {
    lhs: qpot::exprdsl::Expr,
    rhs: qpot::exprdsl::Expr,
    op: &'static str,
}

impl Region {
    pub fn parse(src: &str, n: usize) -> Result<Region, CliError> {
        for op in [">=", "<=", ">", "<"] {
            if let Some((l, r)) = src.split_once(op) {
                let params = Default::default();
                let lhs = qpot::exprdsl::parse(l, n, &params)?;
                let rhs = qpot::exprdsl::parse(r, n, &params)?;
                return Ok(Region { lhs, rhs, op });
            }
        }
        Err(CliError::parse(format!("region {src:?} needs one of >, <, >=, <=")))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let (Ok(l), Ok(r)) = (self.lhs.value(x), self.rhs.value(x)) else { return false };
        match self.op {
            ">=" => l >= r,
            "<=" => l <= r,
            ">" => l > r,
            _ => l < r,
        }
    }
}

pub struct SimArgs {
    pub eps: f64,
    pub dt: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub burn_in: Option<usize>,
    pub ep: Option<usize>,
    pub x0: Option<String>,
    pub exit_time: Option<String>,
}

fn first_attractor(search: &EquilibriumSearch, index: Option<usize>) -> Result<&EquilibriumPoint, CliError> {
    match index {
        Some(i) => {
            let ep = pick_ep(search, i)?;
            if ep.kind != EpKind::Attractor {
                return Err(CliError::bad_ep(format!("equilibrium {i} is a {}", ep.kind.as_str())));
            }
            Ok(ep)
        }
        None => search
            .points
            .iter()
            .find(|p| p.kind == EpKind::Attractor)
            .ok_or_else(|| CliError::bad_ep("no attractor found".into())),
    }
}

pub fn simulate(loaded: &LoadedModel, d: &Discovery, args: &SimArgs, out: Option<&Path>) -> Result<Value, CliError> {
    let model = &loaded.system;
    let n = model.dim();
    let cfg = SimConfig {
        epsilon: args.eps,
        dt: args.dt,
        n_steps: args.steps,
        n_paths: args.paths,
        seed: args.seed,
        burn_in: args.burn_in.unwrap_or(args.steps / 10),
        guard_radius: 1e6,
    };
    cfg.validate()?;
    let search = discover(model, d)?;
    let sim_config = json!({
        "epsilon": num(cfg.epsilon), "dt": num(cfg.dt), "n_steps": cfg.n_steps,
        "n_paths": cfg.n_paths, "seed": cfg.seed, "burn_in": cfg.burn_in,
    });
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    }
    let write = |name: &str, body: String| -> Result<(), CliError> {
        if let Some(dir) = out {
            let path: PathBuf = dir.join(name);
            std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    };
    match &args.exit_time {
        None => {
            let ep = first_attractor(&search, args.ep)?;
            cfg.check_stability(&ep.m)?;
            let ea = analyze_ep(model, ep)?;
            let predicted = ea.s_inv.as_ref().ok_or_else(|| CliError::bad_ep("S is singular".into()))? * cfg.epsilon;
            let est = stationary_covariance(model, &ep.x, &cfg)?;
            let summary = json!({
                "report_version": REPORT_VERSION,
                "mode": "covariance",
                "config": sim_config,
                "ep": vector(&ep.x),
                "mean": vector(&est.mean),
                "covariance": matrix(&est.covariance),
                "stderr": matrix(&est.stderr),
                "predicted": matrix(&predicted),
                "z_scores": matrix(&est.z_scores(&predicted)),
                "n_effective": est.n_effective,
                "diverged": est.diverged,
            });
            write("covariance.json", report::to_string(&summary) + "\n")?;
            Ok(summary)
        }
        Some(region_src) => {
            let region = Region::parse(region_src, n)?;
            let x0: Vector = match &args.x0 {
                Some(s) => {
                    let vals: Vec<f64> = s
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| CliError::usage(format!("x0 {s:?} is not a comma-separated list")))?;
                    if vals.len() != n {
                        return Err(CliError::usage(format!("x0 has {} entries, n = {n}", vals.len())));
                    }
                    Vector::from_vec(vals)
                }
                None => first_attractor(&search, args.ep)?.x.clone(),
            };
            let est = mean_exit_time(model, &x0, |x| region.contains(x), &cfg)?;
            let mut csv = String::from("path,exit_time\n");
            for (i, t) in est.times.iter().enumerate() {
                match t {
                    Some(t) => writeln!(csv, "{i},{t}").unwrap(),
                    None => writeln!(csv, "{i},").unwrap(),
                }
            }
            write("exit_times.csv", csv)?;
            let summary = json!({
                "report_version": REPORT_VERSION,
                "mode": "exit-time",
                "config": sim_config,
                "x0": vector(&x0),
                "region": region_src,
                "met": num(est.met),
                "stderr": num(est.stderr),
                "exited": est.exited(),
                "censored": est.censored,
                "diverged": est.diverged,
            });
            write("summary.json", report::to_string(&summary) + "\n")?;
            Ok(summary)
        }
    }
}

pub fn kramers_demo(gamma: f64, u2: f64) -> Result<Value, CliError> {
    let k = KramersModel::quadratic(u2, gamma)?;
    let model = k.system();
    let ep = EquilibriumPoint::at(&model, &[0.0, 0.0])?;
    let ea = analyze_ep_with(&model, &ep, AnalysisOptions { allow_marginal: true })?;
    let m = &ea.ep.m;
    let zero = Vector::zeros(2);
    let r_eq = compute_r(&model, &zero, &ea.s, &[0.0, 0.0])?;
    let branch = |b: Branch| -> Result<Value, CliError> {
        Ok(match kramers_phi_pm(u2, gamma, b) {
            Ok(pm) => json!({
                "beta": num(pm.beta),
                "S": matrix(&pm.s_pm),
                "rank": numkit::rank_default(&pm.s_pm),
                "r": num(compute_r(&model, &zero, &pm.s_pm, &[0.0, 0.0])?),
                "r_expected": num(pm.r_value),
                "riccati_residual": num(riccati_residual(&pm.s_pm, m, &ea.d)),
            }),
            Err(qpot::Error::ComplexBeta { discriminant }) => {
                json!({ "beta": "complex", "discriminant": num(discriminant) })
            }
            Err(e) => return Err(e.into()),
        })
    };
    // the comparison is about the bottom of a well
    let probe = match minimum_principle_probe(u2, gamma, &probe_grid(0.5, 5)) {
        Ok(rows) if u2 > 0.0 => Value::Array(
            rows.iter()
                .map(|r| {
                    json!({
                        "x": num(r.x), "v": num(r.v),
                        "phi_eq": num(r.phi_eq), "phi_plus": num(r.phi_plus),
                        "phi_minus": num(r.phi_minus), "phi_0": num(r.phi_zero),
                        "minimizers": r.minimizers.iter().map(|c| c.label()).collect::<Vec<_>>(),
                        "nontrivial_min": r.nontrivial_min.label(),
                        "side_plus": r.side_plus.as_str(),
                        "side_minus": r.side_minus.as_str(),
                    })
                })
                .collect(),
        ),
        _ => Value::Null,
    };
    let exit = if u2 < 0.0 {
        let ex = exit_direction(&ea, None)?;
        exit_json(&ex, &ea)
    } else {
        Value::Null
    };
    Ok(json!({
        "report_version": REPORT_VERSION,
        "gamma": num(gamma),
        "u2": num(u2),
        "kind": ep.kind.as_str(),
        "M": matrix(m),
        "D": matrix(&ea.d),
        "A": matrix(&ea.a),
        "chi": ea.chi.map(num),
        "gradient_map": matrix(&ea.gradient_map),
        "S_eq": matrix(&ea.s),
        "rank_M": ea.rank_m,
        "rank_S": ea.rank_s,
        "M_singular": ea.rank_m < 2,
        "S_singular": ea.s_is_singular(),
        "r_eq": num(r_eq),
        "riccati_residual_eq": num(riccati_residual(&ea.s, m, &ea.d)),
        "riccati_residual_zero": num(riccati_residual(&Mat::zeros(2, 2), m, &ea.d)),
        "plus": branch(Branch::Plus)?,
        "minus": branch(Branch::Minus)?,
        "probe": probe,
        "exit": exit,
    }))
}

fn fmt_value(v: &Value) -> String {
    match v {
        Value::Number(x) if x.is_u64() => x.to_string(),
        Value::Number(x) => format!("{:.6}", x.as_f64().unwrap_or(f64::NAN)),
        Value::Array(items) => format!("[{}]", items.iter().map(fmt_value).collect::<Vec<_>>().join(", ")),
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

/// Plain-text rendering of the demo table.
pub fn kramers_demo_text(v: &Value) -> String {
    let mut out = String::new();
    writeln!(out, "Kramers model, gamma = {}, U'' = {} ({})", fmt_value(&v["gamma"]), fmt_value(&v["u2"]), fmt_value(&v["kind"])).unwrap();
    for key in ["M", "D", "A", "chi", "gradient_map", "S_eq", "rank_M", "rank_S", "M_singular", "S_singular", "r_eq", "riccati_residual_eq", "riccati_residual_zero"] {
        writeln!(out, "{key:>22}: {}", fmt_value(&v[key])).unwrap();
    }
    for b in ["plus", "minus"] {
        let s = &v[b];
        if s["beta"].is_string() {
            writeln!(out, "{:>22}: complex (discriminant {})", format!("beta_{b}"), fmt_value(&s["discriminant"])).unwrap();
            continue;
        }
        writeln!(
            out,
            "{:>22}: {}  S = {}  rank {}  r = {}  riccati {}",
            format!("beta_{b}"),
            fmt_value(&s["beta"]),
            fmt_value(&s["S"]),
            fmt_value(&s["rank"]),
            fmt_value(&s["r"]),
            fmt_value(&s["riccati_residual"])
        )
        .unwrap();
    }
    if let Value::Array(rows) = &v["probe"] {
        writeln!(out, "minimum-principle probe:").unwrap();
        writeln!(out, "{:>8} {:>8} {:>10} {:>10} {:>10} {:>6}  nontrivial min", "x", "v", "phi_eq", "phi_plus", "phi_minus", "phi_0").unwrap();
        for r in rows {
            writeln!(
                out,
                "{:>8} {:>8} {:>10} {:>10} {:>10} {:>6}  {}",
                fmt_value(&r["x"]),
                fmt_value(&r["v"]),
                fmt_value(&r["phi_eq"]),
                fmt_value(&r["phi_plus"]),
                fmt_value(&r["phi_minus"]),
                fmt_value(&r["phi_0"]),
                fmt_value(&r["nontrivial_min"])
            )
            .unwrap();
        }
    }
    if !v["exit"].is_null() {
        writeln!(out, "{:>22}: {}", "lambda_plus", fmt_value(&v["exit"]["lambda_plus"])).unwrap();
        writeln!(out, "{:>22}: {}", "start_dir", fmt_value(&v["exit"]["start_dir"])).unwrap();
        writeln!(out, "{:>22}: {}", "Mtilde", fmt_value(&v["exit"]["Mtilde"])).unwrap();
    }
    out
}
