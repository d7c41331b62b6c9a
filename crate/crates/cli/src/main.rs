//! `bsdetree`: batch front end for the tree solvers.
//!
//! Every flag can be set through an environment variable with the
//! `BSDETREE_` prefix; flags given on the command line win. Reports are JSON
//! documents carrying `schema_version` and the seed, with node tables also
//! written as CSV when `--out` is given.
//!
//! Exit codes: 0 all checks pass, 1 a numerical check failed, 2 invalid
//! input, 3 an enumeration cap was exceeded.

use anyhow::{anyhow, bail, Context, Result};
use bsde_tree::bsde::{self, solve_picard, solve_rbsde, solve_stepwise, BsdeSolution, PICARD_MAX_ITER};
use bsde_tree::calculus::{beta_star, compensator, constants, orth_decompose_jump, orth_decompose_x, Constants, Form};
use bsde_tree::control::{extract_optimal_policy, robust_value, robust_value_oracle, PolicyReport, RobustValue};
use bsde_tree::lattice::{tower, Selection};
use bsde_tree::random::{ordered_pair, random_problem, RandomGen, RandomSpec};
use bsde_tree::scenario::{validate_scenario, Problem, ValidationReport};
use bsde_tree::twobsde::{self, AggregationReport, MinimalityReport, NormBoundReport, TwoBsdeSolution, ValueFunction};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "bsdetree", version, about = "BSDE, reflected BSDE and 2BSDE solvers on finite trees")]
struct Cli {
    #[command(flatten)]
    cfg: RunConfig,
    #[command(subcommand)]
    cmd: Command,
}

/// Options shared by every command.
#[derive(Args, Debug, Clone, Serialize)]
struct RunConfig {
    /// Directory for JSON and CSV reports; stdout when absent.
    #[arg(long, global = true, env = "BSDETREE_OUT")]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Seed for sampled pastings and randomized suites.
    #[arg(long, global = true, env = "BSDETREE_SEED", default_value_t = 0)]
    seed: u64,
    /// Enumeration cap for pastings, policies and stopping times.
    #[arg(long, global = true, env = "BSDETREE_CAP", default_value_t = 4096)]
    cap: usize,
    /// Tolerance for verification checks.
    #[arg(long, global = true, env = "BSDETREE_TOL", default_value_t = 1e-9)]
    tol: f64,
    /// Picard stopping tolerance.
    #[arg(long, global = true, env = "BSDETREE_PICARD_TOL", default_value_t = bsde::PICARD_TOL)]
    picard_tol: f64,
    /// Weight parameter β for Picard and the decomposition.
    #[arg(long, global = true, env = "BSDETREE_BETA")]
    beta: Option<f64>,
    /// Override of β̂.
    #[arg(long, global = true, env = "BSDETREE_BETA_HAT")]
    beta_hat: Option<f64>,
    /// Worker threads for scenario batches.
    #[arg(long, global = true, env = "BSDETREE_JOBS", default_value_t = 1)]
    #[serde(skip)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate scenario files.
    Validate { scenarios: Vec<PathBuf> },
    /// Solve the BSDE under one pasting.
    SolveBsde {
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        sel: SelectionArgs,
        /// Solve by backward induction instead of Picard iteration.
        #[arg(long, env = "BSDETREE_STEPWISE")]
        stepwise: bool,
    },
    /// Solve the reflected BSDE with the scenario's obstacle.
    SolveRbsde {
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        sel: SelectionArgs,
    },
    /// Value function, decomposition and diagnostics of the 2BSDE.
    #[command(name = "solve-2bsde")]
    Solve2bsde { scenarios: Vec<PathBuf> },
    /// Robust control value and optimal policy.
    Control { scenarios: Vec<PathBuf> },
    /// Run the invariant suites on scenarios and seeded random instances.
    Verify {
        scenarios: Vec<PathBuf>,
        /// Suite to run: all, lattice, calculus, bsde, twobsde, control.
        #[arg(long, env = "BSDETREE_SUITE", default_value = "all")]
        suite: String,
        /// Random instances per suite.
        #[arg(long, env = "BSDETREE_RANDOM", default_value_t = 5)]
        random: usize,
        /// Re-check a solution report written by solve-bsde or solve-2bsde.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Contraction constants at (β, Φ).
    Constants {
        #[arg(long = "at-beta", env = "BSDETREE_AT_BETA")]
        at_beta: f64,
        #[arg(long, env = "BSDETREE_PHI")]
        phi: f64,
    },
    /// Smallest admissible β for Φ.
    BetaStar {
        #[arg(long, env = "BSDETREE_PHI")]
        phi: f64,
        #[arg(long, default_value_t = 1e-12)]
        bisection_tol: f64,
    },
}

#[derive(Args, Debug, Clone)]
struct SelectionArgs {
    /// Use kernel `k` at every node.
    #[arg(long, conflicts_with = "selection")]
    kernel: Option<usize>,
    /// Kernel index per node, comma separated.
    #[arg(long, value_delimiter = ',')]
    selection: Option<Vec<usize>>,
}

/// Exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass = 0,
    CheckFailed = 1,
    Invalid = 2,
    Cap = 3,
}

#[derive(Serialize)]
struct Report<T: Serialize> {
    schema_version: u32,
    command: &'static str,
    scenario: String,
    name: String,
    seed: u64,
    config: RunConfig,
    pass: bool,
    result: T,
}

/// A node table: column names and rows.
struct Table {
    suffix: &'static str,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

struct Output {
    json: String,
    tables: Vec<Table>,
    stem: String,
    command: &'static str,
    pass: bool,
    summary: String,
}

fn status_of(err: &anyhow::Error) -> Status {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<bsde_tree::Error>() {
            return match e {
                bsde_tree::Error::CapExceeded { .. } => Status::Cap,
                bsde_tree::Error::Numerical(_) => Status::CheckFailed,
                _ => Status::Invalid,
            };
        }
    }
    Status::Invalid
}

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";")
}

fn load(path: &Path, cfg: &RunConfig) -> Result<Problem> {
    let mut p = Problem::load(path).with_context(|| format!("loading {}", path.display()))?;
    if cfg.beta_hat.is_some() {
        p.beta_hat_override = cfg.beta_hat;
    }
    Ok(p)
}

/// Loads and rejects scenarios that fail validation.
fn load_valid(path: &Path, cfg: &RunConfig) -> Result<Problem> {
    let p = load(path, cfg)?;
    let rep = validate_scenario(&p);
    if !rep.ok() {
        let why: Vec<String> = rep.failures().iter().map(|e| format!("{}: {}", e.check, e.detail)).collect();
        return Err(bsde_tree::Error::invalid(format!("{} is invalid: {}", path.display(), why.join("; "))).into());
    }
    Ok(p)
}

fn selection(p: &Problem, args: &SelectionArgs) -> Result<Selection> {
    let sel = match (&args.kernel, &args.selection) {
        (Some(k), _) => Selection(vec![*k; p.tree.len()]),
        (None, Some(v)) => {
            if v.len() != p.tree.len() {
                bail!(bsde_tree::Error::invalid(format!("selection has {} entries for {} nodes", v.len(), p.tree.len())));
            }
            Selection(v.clone())
        }
        (None, None) => p.family.first(),
    };
    for n in p.tree.internal() {
        if sel.0[n] >= p.family.kernels[n].len() {
            bail!(bsde_tree::Error::node(n, format!("kernel index {} out of range", sel.0[n])));
        }
    }
    Ok(sel)
}

fn beta_for(p: &Problem, cfg: &RunConfig) -> f64 {
    cfg.beta.unwrap_or_else(|| p.beta_hat())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into())
}

fn report<T: Serialize>(command: &'static str, path: &Path, p: &Problem, cfg: &RunConfig, pass: bool, result: T) -> Result<String> {
    let r = Report {
        schema_version: SCHEMA_VERSION,
        command,
        scenario: path.display().to_string(),
        name: p.name.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        pass,
        result,
    };
    Ok(serde_json::to_string_pretty(&r)?)
}

fn x_columns(p: &Problem) -> Vec<String> {
    (0..p.tree.dim()).map(|i| format!("x{i}")).collect()
}

fn solution_table(p: &Problem, sol: &BsdeSolution) -> Table {
    let mut header: Vec<String> = vec!["node".into(), "t".into()];
    header.extend(x_columns(p));
    header.extend(["y", "z", "u", "dn", "dk", "k"].iter().map(|s| s.to_string()));
    let k = sol.k_process(&p.tree);
    let rows = (0..p.tree.len())
        .map(|n| {
            let nd = p.tree.node(n);
            let mut row = vec![n.to_string(), nd.t.to_string()];
            row.extend(nd.x.iter().map(|v| num(*v)));
            row.extend([num(sol.y[n]), join(&sol.z[n]), join(&sol.u[n]), num(sol.dn[n]), num(sol.dk[n]), num(k[n])]);
            row
        })
        .collect();
    Table { suffix: "nodes", header, rows }
}

#[derive(Serialize)]
struct BsdeResult {
    method: &'static str,
    selection: Vec<usize>,
    beta: f64,
    y0: f64,
    iterations: usize,
    residual: f64,
    ratios: Vec<f64>,
    mtilde: f64,
    solution: BsdeSolution,
}

fn cmd_solve_bsde(path: &Path, cfg: &RunConfig, sel: &SelectionArgs, stepwise: bool, reflected: bool) -> Result<Output> {
    let p = load_valid(path, cfg)?;
    let s = selection(&p, sel)?;
    let law = p.law(&s);
    let beta = beta_for(&p, cfg);
    let obstacle = if reflected {
        Some(p.obstacle.clone().ok_or_else(|| bsde_tree::Error::invalid("scenario has no obstacle"))?)
    } else {
        None
    };
    let (method, sol) = match (reflected, stepwise) {
        (true, _) => ("stepwise", solve_rbsde(&p, &law, obstacle.as_deref().unwrap())?),
        (false, true) => ("stepwise", solve_stepwise(&p, &law, &p.xi, None, None)?),
        (false, false) => ("picard", solve_picard(&p, &law, None, beta, cfg.picard_tol, PICARD_MAX_ITER)?),
    };
    let pass = sol.residual <= cfg.tol;
    let command = if reflected { "solve-rbsde" } else { "solve-bsde" };
    let summary = format!("{}: Y0 = {:.12} ({method}, residual {:.2e})", p.name, sol.y[0], sol.residual);
    let table = solution_table(&p, &sol);
    let result = BsdeResult {
        method,
        selection: s.0.clone(),
        beta,
        y0: sol.y[0],
        iterations: sol.iterations,
        residual: sol.residual,
        ratios: sol.ratios.clone(),
        mtilde: p.mtilde(p.beta_hat()),
        solution: sol,
    };
    Ok(Output { json: report(command, path, &p, cfg, pass, result)?, tables: vec![table], stem: stem(path), command, pass, summary })
}

#[derive(Serialize)]
struct TwoBsdeResult {
    y0: f64,
    value: ValueFunction,
    beta: f64,
    exhaustive: bool,
    tested_measures: usize,
    minimality: MinimalityReport,
    minimality_weighted: Option<MinimalityReport>,
    aggregation: AggregationReport,
    norm_bound: NormBoundReport,
    decomposition: TwoBsdeSolution,
}

fn cmd_solve_2bsde(path: &Path, cfg: &RunConfig) -> Result<Output> {
    let p = load_valid(path, cfg)?;
    let vf = twobsde::value_function(&p)?;
    let beta = match cfg.beta {
        Some(b) => b,
        None => twobsde::default_decomposition_beta(&p)?,
    };
    let sol = twobsde::decompose(&p, &vf, beta, cfg.cap, cfg.seed)?;
    let minimality = twobsde::minimality_plain(&p, &vf.y)?;
    let minimality_weighted = if p.intrinsic.is_some() { Some(twobsde::minimality_weighted(&p, &sol)?) } else { None };
    let aggregation = twobsde::aggregation_diagnostic(&p, &sol);
    let norm_bound = twobsde::norm_bound_check(&p, &sol, beta, p.beta_hat());
    let reflection = sol.measures.iter().map(|m| m.reflection_gap).fold(0.0f64, f64::max);
    let pass = reflection <= cfg.tol
        && (!minimality.applicable || minimality.max_abs <= cfg.tol)
        && minimality_weighted.as_ref().is_none_or(|m| !m.applicable || m.max_abs <= cfg.tol)
        && norm_bound.pass;

    let mut header: Vec<String> = vec!["node".into(), "t".into()];
    header.extend(x_columns(&p));
    header.extend(["y_plus", "argmax", "z_hat"].iter().map(|s| s.to_string()));
    let rows = (0..p.tree.len())
        .map(|n| {
            let nd = p.tree.node(n);
            let mut row = vec![n.to_string(), nd.t.to_string()];
            row.extend(nd.x.iter().map(|v| num(*v)));
            let z = sol.z_hat.as_ref().map(|z| join(&z[n])).unwrap_or_default();
            row.extend([num(vf.y[n]), vf.argmax[n].to_string(), z]);
            row
        })
        .collect();
    let nodes = Table { suffix: "nodes", header, rows };
    let mut mrows = Vec::new();
    for (i, m) in sol.measures.iter().enumerate() {
        for n in 0..p.tree.len() {
            mrows.push(vec![i.to_string(), n.to_string(), m.selection[n].to_string(), num(m.dk[n]), num(m.k[n]), num(m.dn[n]), join(&m.u[n]), join(&m.z[n])]);
        }
    }
    let measures = Table {
        suffix: "measures",
        header: ["measure", "node", "kernel", "dk", "k", "dn", "u", "z"].iter().map(|s| s.to_string()).collect(),
        rows: mrows,
    };
    let summary = format!(
        "{}: Y0 = {:.12}, {} measures ({}), aggregable = {}",
        p.name,
        vf.y[0],
        sol.measures.len(),
        if sol.exhaustive { "exhaustive" } else { "sampled" },
        aggregation.aggregable
    );
    let result = TwoBsdeResult {
        y0: vf.y[0],
        beta,
        exhaustive: sol.exhaustive,
        tested_measures: sol.measures.len(),
        value: vf,
        minimality,
        minimality_weighted,
        aggregation,
        norm_bound,
        decomposition: sol,
    };
    Ok(Output {
        json: report("solve-2bsde", path, &p, cfg, pass, result)?,
        tables: vec![nodes, measures],
        stem: stem(path),
        command: "solve-2bsde",
        pass,
        summary,
    })
}

#[derive(Serialize)]
struct ControlResult {
    robust: RobustValue,
    labels: Vec<String>,
    policy_report: PolicyReport,
    oracle_value: Option<f64>,
}

fn cmd_control(path: &Path, cfg: &RunConfig) -> Result<Output> {
    let p = load_valid(path, cfg)?;
    if p.control.is_none() {
        bail!(bsde_tree::Error::invalid("scenario has no control block"));
    }
    let rv = robust_value(&p, cfg.cap)?;
    let law = p.law(&Selection(rv.pasting.clone()));
    let sol = solve_stepwise(&p, &law, &p.xi, None, None)?;
    let pr = extract_optimal_policy(&p, &law, &sol)?;
    // the brute-force check is skipped when it would exceed the cap
    let oracle_value = match robust_value_oracle(&p, cfg.cap) {
        Ok((v, _, _)) => Some(v),
        Err(bsde_tree::Error::CapExceeded { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let pass = oracle_value.is_none_or(|v| (v - rv.value).abs() <= cfg.tol);
    let rows = p
        .tree
        .internal()
        .map(|n| vec![n.to_string(), p.tree.node(n).t.to_string(), rv.pasting[n].to_string(), pr.labels[n].clone(), num(pr.gaps[n])])
        .collect();
    let table = Table {
        suffix: "policy",
        header: ["node", "t", "kernel", "action", "gap"].iter().map(|s| s.to_string()).collect(),
        rows,
    };
    let summary = format!("{}: value = {:.12}, root action {}", p.name, rv.value, pr.labels[0]);
    let result = ControlResult { labels: pr.labels.clone(), robust: rv, policy_report: pr, oracle_value };
    Ok(Output { json: report("control", path, &p, cfg, pass, result)?, tables: vec![table], stem: stem(path), command: "control", pass, summary })
}

fn cmd_validate(path: &Path, cfg: &RunConfig) -> Result<Output> {
    let p = load(path, cfg)?;
    let rep: ValidationReport = validate_scenario(&p);
    let pass = rep.ok();
    if !pass {
        for e in rep.failures() {
            eprintln!("{}: {}: {}", path.display(), e.check, e.detail);
        }
    }
    let rows = rep.entries.iter().map(|e| vec![e.check.clone(), e.pass.to_string(), e.severity.clone(), e.detail.clone()]).collect();
    let table = Table { suffix: "checks", header: ["check", "pass", "severity", "detail"].iter().map(|s| s.to_string()).collect(), rows };
    let summary = format!("{}: {}", p.name, if pass { "valid" } else { "invalid" });
    Ok(Output { json: report("validate", path, &p, cfg, pass, rep)?, tables: vec![table], stem: stem(path), command: "validate", pass, summary })
}

/// One row of the verification table.
#[derive(Debug, Clone, Serialize)]
struct Check {
    suite: String,
    check: String,
    pass: bool,
    value: f64,
    tol: f64,
    detail: String,
}

struct Checks {
    tol: f64,
    rows: Vec<Check>,
}

impl Checks {
    fn bound(&mut self, suite: &str, check: &str, value: f64, tol: f64, detail: impl Into<String>) {
        self.rows.push(Check { suite: suite.into(), check: check.into(), pass: value <= tol, value, tol, detail: detail.into() });
    }

    fn small(&mut self, suite: &str, check: &str, value: f64, detail: impl Into<String>) {
        let tol = self.tol;
        self.bound(suite, check, value, tol, detail);
    }

    fn flag(&mut self, suite: &str, check: &str, ok: bool, detail: impl Into<String>) {
        self.rows.push(Check { suite: suite.into(), check: check.into(), pass: ok, value: if ok { 0.0 } else { 1.0 }, tol: 0.0, detail: detail.into() });
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn wants(suite: &str, name: &str) -> bool {
    suite == "all" || suite == name
}

fn verify_scenario(p: &Problem, cfg: &RunConfig, suite: &str, c: &mut Checks) -> Result<()> {
    let sel = p.family.first();
    let law = p.law(&sel);
    if wants(suite, "lattice") {
        let rep = validate_scenario(p);
        c.flag("lattice", "validation", rep.ok(), format!("{} entries", rep.entries.len()));
        let reach = law.reach(&p.tree);
        let mass: f64 = p.tree.leaves().iter().map(|&l| reach[l]).sum();
        c.small("lattice", "leaf_mass", (mass - 1.0).abs(), "|Σ leaf probabilities − 1|");
        let v = tower(&p.tree, &law, &p.xi);
        let direct: f64 = p.tree.leaves().iter().map(|&l| reach[l] * p.xi[l]).sum();
        c.small("lattice", "tower", (v[0] - direct).abs(), "E[E[ξ|F_1]] vs E[ξ]");
    }
    if wants(suite, "calculus") {
        let chars = compensator(&p.tree, &law, &p.dc);
        let m = tower(&p.tree, &law, &p.xi);
        let defect = match p.form {
            Form::Jump => {
                let d = orth_decompose_jump(&p.tree, &chars, &m)?;
                let iu = bsde_tree::calculus::integral_jump(&p.tree, &chars, &d.u);
                (0..p.tree.len()).map(|n| (m[0] + iu[n] + d.n[n] - m[n]).abs()).fold(0.0, f64::max)
            }
            Form::X => match orth_decompose_x(&p.tree, &chars, &m) {
                Ok(d) => {
                    let iz = bsde_tree::calculus::integral_x(&p.tree, &d.z);
                    (0..p.tree.len()).map(|n| (m[0] + iz[n] + d.n[n] - m[n]).abs()).fold(0.0, f64::max)
                }
                Err(_) => f64::INFINITY,
            },
        };
        c.small("calculus", "decomposition_reconstructs", defect, "M = M_0 + integral + N");
    }
    if wants(suite, "bsde") {
        let a = solve_stepwise(p, &law, &p.xi, None, None)?;
        let b = solve_picard(p, &law, None, beta_for(p, cfg), cfg.picard_tol, PICARD_MAX_ITER)?;
        c.small("bsde", "stepwise_equals_picard", max_abs_diff(&a.y, &b.y), "max |Y_step − Y_picard|");
        c.small("bsde", "residual", a.residual, "one-step identity");
        let mt = p.mtilde(p.beta_hat());
        let worst = b.ratios.iter().copied().fold(0.0f64, f64::max);
        c.bound("bsde", "picard_ratio", worst, mt + 0.05, format!("M̃(β̂) = {mt:.4}"));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let q = ordered_pair(&mut rng, p);
        let sq = solve_stepwise(&q, &law, &q.xi, None, None)?;
        let rep = bsde::comparison_check(p, &law, &a, &q, &sq);
        c.flag("bsde", "comparison", rep.pass || !rep.comparable, format!("max excess {:.2e} ({})", rep.max_excess, rep.reason));
        if let Some(l) = &p.obstacle {
            let r = solve_rbsde(p, &law, l)?;
            let sk = p.tree.internal().map(|n| ((r.y[n] - l[n]) * r.dk[n]).abs()).fold(0.0, f64::max);
            c.small("bsde", "skorokhod", sk, "max |(Y − L)ΔK|");
        }
    }
    if wants(suite, "twobsde") {
        let vf = twobsde::value_function(p)?;
        let oracle = twobsde::value_function_oracle(p, cfg.cap)?;
        c.small("twobsde", "dpp", max_abs_diff(&vf.y, &oracle.y), "value function vs pasting enumeration");
        c.small("twobsde", "esssup_identity", twobsde::esssup_identity(p, &vf, cfg.cap)?, "nodewise esssup");
        let beta = match cfg.beta {
            Some(b) => b,
            None => twobsde::default_decomposition_beta(p)?,
        };
        let sol = twobsde::decompose(p, &vf, beta, cfg.cap, cfg.seed)?;
        let refl = sol.measures.iter().map(|m| m.reflection_gap).fold(0.0f64, f64::max);
        c.small("twobsde", "reflection", refl, "reflected solution vs Ŷ⁺");
        let mono = sol.measures.iter().all(|m| m.k[0] == 0.0 && (1..p.tree.len()).all(|n| m.k[n] >= m.k[p.tree.node(n).parent.unwrap()] - cfg.tol));
        c.flag("twobsde", "k_nondecreasing", mono, "K^P_0 = 0, K^P nondecreasing");
        let mp = twobsde::minimality_plain(p, &vf.y)?;
        if mp.applicable {
            c.small("twobsde", "minimality", mp.max_abs, "essinf of future ΔK");
        }
        let nb = twobsde::norm_bound_check(p, &sol, beta, p.beta_hat());
        c.flag("twobsde", "norm_bound", nb.pass, format!("lhs {:.3e}, rhs {:.3e}", nb.lhs, nb.rhs));
        let mut inv = 0.0f64;
        for n in p.tree.internal() {
            let r = twobsde::invariance_check(p, &vf, n, beta, cfg.cap, cfg.seed)?;
            inv = inv.max(r.max_y).max(r.max_dk).max(r.max_dn).max(r.max_u).max(r.max_z);
        }
        c.small("twobsde", "invariance", inv, "re-rooted subtrees vs restriction");
    }
    if wants(suite, "control") && p.control.is_some() {
        let rv = robust_value(p, cfg.cap)?;
        let (ov, _, _) = robust_value_oracle(p, cfg.cap)?;
        c.small("control", "robust_value", (rv.value - ov).abs(), "Hamiltonian vs (pasting × policy) enumeration");
    }
    Ok(())
}

/// Seeded random instances; verdict names depend only on the suite.
fn verify_random(cfg: &RunConfig, suite: &str, count: usize, c: &mut Checks) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fingerprints = Vec::new();
    let (mut zero, mut dpp, mut picard) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..count {
        let form = if i % 2 == 0 { Form::Jump } else { Form::X };
        let gen = if i % 3 == 0 { RandomGen::Zero } else { RandomGen::Affine };
        let spec = RandomSpec { horizon: 2 + i % 2, branching: 2, kernels: 2, form, generator: gen, ..RandomSpec::default() };
        let p = random_problem(&mut rng, &spec);
        fingerprints.push(format!("{:.6}", p.xi.iter().sum::<f64>()));
        let law = p.law(&p.family.first());
        if gen == RandomGen::Zero && wants(suite, "bsde") {
            let y = solve_stepwise(&p, &law, &p.xi, None, None)?.y;
            zero = zero.max(max_abs_diff(&y, &tower(&p.tree, &law, &p.xi)));
        }
        if wants(suite, "twobsde") {
            let vf = twobsde::value_function(&p)?;
            let o = twobsde::value_function_oracle(&p, cfg.cap)?;
            dpp = dpp.max(max_abs_diff(&vf.y, &o.y));
        }
        if wants(suite, "bsde") {
            let a = solve_stepwise(&p, &law, &p.xi, None, None)?;
            let b = solve_picard(&p, &law, None, p.beta_hat(), cfg.picard_tol, PICARD_MAX_ITER)?;
            picard = picard.max(max_abs_diff(&a.y, &b.y));
        }
    }
    if count > 0 {
        if wants(suite, "bsde") {
            c.small("random", "zero_generator_reduction", zero, format!("{count} instances"));
            c.small("random", "stepwise_equals_picard", picard, format!("{count} instances"));
        }
        if wants(suite, "twobsde") {
            c.small("random", "dpp", dpp, format!("{count} instances"));
        }
    }
    Ok(fingerprints)
}

fn json_vec(v: &serde_json::Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(|x| x.as_f64()).collect()
}

/// Re-checks a stored solution against its scenario.
fn replay(path: &Path, cfg: &RunConfig, c: &mut Checks) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let scenario = doc["scenario"].as_str().ok_or_else(|| anyhow!(bsde_tree::Error::invalid("report has no scenario")))?;
    let p = load_valid(Path::new(scenario), cfg)?;
    let command = doc["command"].as_str().unwrap_or_default().to_string();
    let bad = || anyhow!(bsde_tree::Error::invalid("report is missing solution values"));
    match command.as_str() {
        "solve-bsde" | "solve-rbsde" => {
            let y = json_vec(&doc["result"]["solution"]["y"]).ok_or_else(bad)?;
            let sel: Vec<usize> = doc["result"]["selection"]
                .as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|v| v.as_u64().map(|k| k as usize))
                .collect::<Option<_>>()
                .ok_or_else(bad)?;
            if y.len() != p.tree.len() || sel.len() != p.tree.len() {
                return Err(bad());
            }
            let law = p.law(&Selection(sel));
            let term = p.tree.leaves().iter().map(|&l| (y[l] - p.xi[l]).abs()).fold(0.0, f64::max);
            c.small("replay", "terminal_value", term, "Y_N = ξ");
            let fresh = match (&p.obstacle, command.as_str()) {
                (Some(l), "solve-rbsde") => solve_rbsde(&p, &law, l)?,
                _ => solve_stepwise(&p, &law, &p.xi, None, None)?,
            };
            let tree = &p.tree;
            let step = tree
                .internal()
                .map(|n| {
                    let kids: Vec<f64> = tree.children(n).iter().map(|&ch| y[ch]).collect();
                    let kc = &p.chars(&law)[n];
                    bsde::one_step(&p, kc, n, &kids, None).map(|o| {
                        let mut v = o.y;
                        if let (Some(l), "solve-rbsde") = (&p.obstacle, command.as_str()) {
                            v = v.max(l[n]);
                        }
                        (v - y[n]).abs()
                    })
                })
                .collect::<bsde_tree::Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            c.small("replay", "one_step_identity", step, "stored Y vs one backward step from stored children");
            c.small("replay", "recomputed_solution", max_abs_diff(&y, &fresh.y), "stored vs recomputed Y");
        }
        "solve-2bsde" => {
            let y = json_vec(&doc["result"]["value"]["y"]).ok_or_else(bad)?;
            if y.len() != p.tree.len() {
                return Err(bad());
            }
            let vf = twobsde::value_function(&p)?;
            let term = p.tree.leaves().iter().map(|&l| (y[l] - p.xi[l]).abs()).fold(0.0, f64::max);
            c.small("replay", "terminal_value", term, "Ŷ_N = ξ");
            c.small("replay", "dpp", max_abs_diff(&y, &vf.y), "stored Ŷ vs dynamic programming");
        }
        other => bail!(bsde_tree::Error::invalid(format!("cannot replay a '{other}' report"))),
    }
    Ok(scenario.to_string())
}

#[derive(Serialize)]
struct VerifyResult {
    suite: String,
    random_instances: usize,
    random_fingerprints: Vec<String>,
    replayed: Option<String>,
    checks: Vec<Check>,
}

fn checks_table(rows: &[Check]) -> Table {
    Table {
        suffix: "checks",
        header: ["suite", "check", "pass", "value", "tol", "detail"].iter().map(|s| s.to_string()).collect(),
        rows: rows.iter().map(|c| vec![c.suite.clone(), c.check.clone(), c.pass.to_string(), num(c.value), num(c.tol), c.detail.clone()]).collect(),
    }
}

const SUITES: &[&str] = &["all", "lattice", "calculus", "bsde", "twobsde", "control"];

fn cmd_verify(path: Option<&Path>, cfg: &RunConfig, suite: &str, random: usize, replay_path: Option<&Path>) -> Result<Output> {
    if !SUITES.contains(&suite) {
        bail!(bsde_tree::Error::invalid(format!("unknown suite '{suite}' (expected one of {})", SUITES.join(", "))));
    }
    let mut c = Checks { tol: cfg.tol, rows: Vec::new() };
    let mut p_opt = None;
    if let Some(path) = path {
        let p = load_valid(path, cfg)?;
        verify_scenario(&p, cfg, suite, &mut c)?;
        p_opt = Some(p);
    }
    let fingerprints = verify_random(cfg, suite, random, &mut c)?;
    let replayed = match replay_path {
        Some(r) => Some(replay(r, cfg, &mut c)?),
        None => None,
    };
    let pass = c.rows.iter().all(|r| r.pass);
    for r in c.rows.iter().filter(|r| !r.pass) {
        eprintln!("FAIL {}.{}: {:.3e} > {:.1e} ({})", r.suite, r.check, r.value, r.tol, r.detail);
    }
    let failed = c.rows.iter().filter(|r| !r.pass).count();
    let name = p_opt.as_ref().map(|p| p.name.clone()).unwrap_or_else(|| "random".into());
    let summary = format!("{name}: {} checks, {failed} failed", c.rows.len());
    let table = checks_table(&c.rows);
    let result = VerifyResult { suite: suite.into(), random_instances: random, random_fingerprints: fingerprints, replayed, checks: c.rows };
    let st = path.map(stem).unwrap_or_else(|| "random".into());
    let json = match &p_opt {
        Some(p) => report("verify", path.unwrap(), p, cfg, pass, result)?,
        None => serde_json::to_string_pretty(&Report {
            schema_version: SCHEMA_VERSION,
            command: "verify",
            scenario: String::new(),
            name: name.clone(),
            seed: cfg.seed,
            config: cfg.clone(),
            pass,
            result,
        })?,
    };
    Ok(Output { json, tables: vec![table], stem: st, command: "verify", pass, summary })
}

#[derive(Serialize)]
struct ConstantsResult {
    constants: Constants,
    mtilde1: f64,
    mtilde2: f64,
    mtilde3: f64,
    m1: f64,
}

fn plain_report<T: Serialize>(command: &'static str, cfg: &RunConfig, result: T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Report {
        schema_version: SCHEMA_VERSION,
        command,
        scenario: String::new(),
        name: command.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        pass: true,
        result,
    })?)
}

fn cmd_constants(cfg: &RunConfig, beta: f64, phi: f64) -> Result<Output> {
    if !(beta > 0.0) || !(0.0..1.0).contains(&phi) {
        bail!(bsde_tree::Error::invalid(format!("need β > 0 and Φ ∈ [0, 1), got β = {beta}, Φ = {phi}")));
    }
    let c = constants(beta, phi);
    let table = Table {
        suffix: "constants",
        header: ["beta", "phi", "f", "g", "mtilde1", "mtilde2", "mtilde3", "m1"].iter().map(|s| s.to_string()).collect(),
        rows: vec![[c.beta, c.phi, c.f, c.g, c.mt1, c.mt2, c.mt3, c.m1].iter().map(|v| num(*v)).collect()],
    };
    let summary = format!("β = {beta}, Φ = {phi}: M̃₁ = {:.12}, M̃₂ = {:.12}, M̃₃ = {:.12}, M₁ = {:.12}", c.mt1, c.mt2, c.mt3, c.m1);
    let result = ConstantsResult { mtilde1: c.mt1, mtilde2: c.mt2, mtilde3: c.mt3, m1: c.m1, constants: c };
    Ok(Output { json: plain_report("constants", cfg, result)?, tables: vec![table], stem: "constants".into(), command: "constants", pass: true, summary })
}

#[derive(Serialize)]
struct BetaStarResult {
    phi: f64,
    beta_star: f64,
    m1_at_beta_star: f64,
}

fn cmd_beta_star(cfg: &RunConfig, phi: f64, tol: f64) -> Result<Output> {
    let b = beta_star(phi, tol)?;
    let result = BetaStarResult { phi, beta_star: b, m1_at_beta_star: constants(b, phi).m1 };
    let summary = format!("Φ = {phi}: β* = {b:.12}");
    let table = Table { suffix: "beta_star", header: vec!["phi".into(), "beta_star".into()], rows: vec![vec![num(phi), num(b)]] };
    Ok(Output { json: plain_report("beta-star", cfg, result)?, tables: vec![table], stem: "beta_star".into(), command: "beta-star", pass: true, summary })
}

/// Writes `contents` to `path` through a temporary file and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: &Output, cfg: &RunConfig) -> Result<()> {
    match &cfg.out {
        None => println!("{}", out.json),
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let base = format!("{}.{}", out.stem, out.command);
            write_atomic(&dir.join(format!("{base}.json")), format!("{}\n", out.json).as_bytes())?;
            for t in &out.tables {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&t.header)?;
                for r in &t.rows {
                    w.write_record(r)?;
                }
                let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
                write_atomic(&dir.join(format!("{base}.{}.csv", t.suffix)), &bytes)?;
            }
            println!("{}", out.summary);
        }
    }
    Ok(())
}

/// Runs `job` over `items` on up to `jobs` threads, keeping input order.
fn fan_out<T: Sync, F>(items: &[T], jobs: usize, job: F) -> Vec<Result<Output>>
where
    F: Fn(&T) -> Result<Output> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&job).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&job).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn run(cli: Cli) -> Result<Status> {
    let cfg = cli.cfg;
    if !(cfg.tol > 0.0) || !(cfg.picard_tol > 0.0) {
        bail!(bsde_tree::Error::invalid("tolerances must be positive"));
    }
    let results: Vec<Result<Output>> = match &cli.cmd {
        Command::Validate { scenarios } => fan_out(need(scenarios)?, cfg.jobs, |p| cmd_validate(p, &cfg)),
        Command::SolveBsde { scenarios, sel, stepwise } => fan_out(need(scenarios)?, cfg.jobs, |p| cmd_solve_bsde(p, &cfg, sel, *stepwise, false)),
        Command::SolveRbsde { scenarios, sel } => fan_out(need(scenarios)?, cfg.jobs, |p| cmd_solve_bsde(p, &cfg, sel, true, true)),
        Command::Solve2bsde { scenarios } => fan_out(need(scenarios)?, cfg.jobs, |p| cmd_solve_2bsde(p, &cfg)),
        Command::Control { scenarios } => fan_out(need(scenarios)?, cfg.jobs, |p| cmd_control(p, &cfg)),
        Command::Verify { scenarios, suite, random, replay } => {
            if scenarios.is_empty() {
                vec![cmd_verify(None, &cfg, suite, *random, replay.as_deref())]
            } else {
                fan_out(scenarios, cfg.jobs, |p| cmd_verify(Some(p), &cfg, suite, *random, replay.as_deref()))
            }
        }
        Command::Constants { at_beta, phi } => vec![cmd_constants(&cfg, *at_beta, *phi)],
        Command::BetaStar { phi, bisection_tol } => vec![cmd_beta_star(&cfg, *phi, *bisection_tol)],
    };
    let mut status = Status::Pass;
    for r in results {
        let s = match r {
            Ok(out) => {
                emit(&out, &cfg)?;
                if out.pass {
                    Status::Pass
                } else if out.command == "validate" {
                    Status::Invalid
                } else {
                    Status::CheckFailed
                }
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                status_of(&e)
            }
        };
        status = status.max(s);
    }
    Ok(status)
}

fn need(scenarios: &[PathBuf]) -> Result<&[PathBuf]> {
    if scenarios.is_empty() {
        bail!(bsde_tree::Error::invalid("no scenario given"));
    }
    Ok(scenarios)
}

impl PartialOrd for Status {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Status {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(s) => ExitCode::from(s as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(status_of(&e) as u8)
        }
    }
}
