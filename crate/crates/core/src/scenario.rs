//! Scenario files and the assembled problem data.
//!
//! A scenario is a TOML document describing the tree, the kernel family, the
//! `ΔC` schedule, the generator, the terminal payoff and optional obstacle,
//! control and intrinsic-minimality blocks. See `fixtures/` for examples.

use crate::calculus::{self, applicable_mtilde, constants, default_beta_hat, Form, NodeChar};
use crate::control::ControlSpec;
use crate::error::{Error, Result};
use crate::generator::{lipschitz_excess, Action, Affine, Bounds, Generator, NodeGen, Uses};
use crate::lattice::{shift_subtree, KernelFamily, Law, NodeSpec, Selection, Shift, Tree};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A number or one value per time step.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Coef {
    Const(f64),
    PerTime(Vec<f64>),
}

impl Default for Coef {
    fn default() -> Self {
        Coef::Const(0.0)
    }
}

impl Coef {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Coef::Const(c) => *c,
            Coef::PerTime(v) => v.get(t).copied().or(v.last().copied()).unwrap_or(0.0),
        }
    }
}

/// A scalar or vector entry (vectors are needed when `d > 1`).
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Vector {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl Vector {
    pub fn to_vec(&self, d: usize) -> Vec<f64> {
        match self {
            Vector::Scalar(c) => vec![*c; d],
            Vector::Vec(v) => v.clone(),
        }
    }
}

/// A jump map `x ↦ constant + linear·x`.
#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct JumpMap {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub linear: Option<Vector>,
}

impl JumpMap {
    fn eval(&self, x: &[f64]) -> f64 {
        let lin = self.linear.as_ref().map(|l| l.to_vec(x.len())).unwrap_or_else(|| vec![0.0; x.len()]);
        self.constant + lin.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.linear.as_ref().map(|l| l.to_vec(1).iter().all(|v| *v == 0.0)).unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: usize,
    pub parent: Option<usize>,
    #[serde(default)]
    pub jump: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub horizon: usize,
    #[serde(default)]
    pub branches: Option<Vec<Vector>>,
    #[serde(default)]
    pub nodes: Option<Vec<NodeEntry>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelOverride {
    pub id: usize,
    pub kernels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub default: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub node: Vec<KernelOverride>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub family: String,
    #[serde(default)]
    pub intercept: Coef,
    #[serde(default)]
    pub y: Coef,
    #[serde(default)]
    pub ybar: Coef,
    #[serde(default)]
    pub z: Option<Vector>,
    #[serde(default)]
    pub rho: Option<JumpMap>,
    #[serde(default)]
    pub clip: Option<[f64; 2]>,
    #[serde(default)]
    pub lipschitz: Option<Bounds>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    pub kind: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub strike: f64,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub kind: String,
    #[serde(default)]
    pub value: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ActionEntry {
    pub label: String,
    #[serde(default)]
    pub g: Coef,
    #[serde(default)]
    pub gamma: Option<JumpMap>,
    #[serde(default)]
    pub beta: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default = "sup_mode")]
    pub mode: String,
    #[serde(default)]
    pub discount: Coef,
    pub actions: Vec<ActionEntry>,
}

fn sup_mode() -> String {
    "sup".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsic {
    pub delta: f64,
    pub theta: f64,
}

/// Raw scenario document.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default = "jump_form")]
    pub form: Form,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default)]
    pub beta_hat: Option<f64>,
    #[serde(default)]
    pub alpha_floor: Option<f64>,
    #[serde(default)]
    pub dc: Option<Coef>,
    pub tree: TreeSection,
    #[serde(default)]
    pub kernels: KernelSection,
    #[serde(default)]
    pub generator: Option<GeneratorSection>,
    pub payoff: PayoffSection,
    #[serde(default)]
    pub obstacle: Option<ObstacleSection>,
    #[serde(default)]
    pub control: Option<ControlSection>,
    #[serde(default)]
    pub intrinsic: Option<Intrinsic>,
}

fn jump_form() -> Form {
    Form::Jump
}

fn default_phi() -> f64 {
    0.5
}

pub const DEFAULT_ALPHA_FLOOR: f64 = 0.01;

/// Fully materialized problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub name: String,
    pub form: Form,
    pub tree: Tree,
    pub family: KernelFamily,
    /// `ΔC` per time step.
    pub dc: Vec<f64>,
    pub generator: Generator,
    /// Terminal payoff per node (meaningful at leaves).
    pub xi: Vec<f64>,
    pub obstacle: Option<Vec<f64>>,
    pub phi: f64,
    pub beta_hat_override: Option<f64>,
    pub alpha_floor: f64,
    pub control: Option<ControlSpec>,
    pub intrinsic: Option<Intrinsic>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<ScenarioFile> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("scenario parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<ScenarioFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        ScenarioFile::parse(&text)
    }

    pub fn build(&self) -> Result<Problem> {
        let tree = self.build_tree()?;
        let n = tree.len();
        let h = tree.horizon();
        let dc: Vec<f64> = match &self.dc {
            None => vec![1.0; h],
            Some(c) => (0..h).map(|t| c.at(t)).collect(),
        };
        if let Some(bad) = dc.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("ΔC must be positive, found {bad}")));
        }

        let mut kernels = vec![Vec::new(); n];
        for node in tree.internal().collect::<Vec<_>>() {
            let nc = tree.children(node).len();
            kernels[node] = match &self.kernels.default {
                Some(ks) => ks.iter().filter(|k| k.len() == nc).cloned().collect(),
                None => vec![vec![1.0 / nc as f64; nc]],
            };
        }
        let ids = self.original_ids(&tree);
        for o in &self.kernels.node {
            let node = ids
                .iter()
                .position(|&i| i == o.id)
                .ok_or_else(|| Error::invalid(format!("kernel override for unknown node {}", o.id)))?;
            kernels[node] = o.kernels.clone();
        }
        for node in tree.internal().collect::<Vec<_>>() {
            if kernels[node].is_empty() {
                return Err(Error::invalid(format!(
                    "node {}: no default kernel has {} weights",
                    ids[node],
                    tree.children(node).len()
                )));
            }
        }
        let family = KernelFamily { kernels };

        let control = match &self.control {
            Some(c) => Some(self.build_control(&tree, c)?),
            None => None,
        };
        let generator = self.build_generator(&tree, control.as_ref())?;
        let xi = self.build_payoff(&tree)?;
        let obstacle = match &self.obstacle {
            None => None,
            Some(o) => self.build_obstacle(&tree, o)?,
        };
        Ok(Problem {
            name: self.name.clone(),
            form: self.form,
            tree,
            family,
            dc,
            generator,
            xi,
            obstacle,
            phi: self.phi,
            beta_hat_override: self.beta_hat,
            alpha_floor: self.alpha_floor.unwrap_or(DEFAULT_ALPHA_FLOOR),
            control,
            intrinsic: self.intrinsic,
        })
    }

    fn build_tree(&self) -> Result<Tree> {
        match (&self.tree.branches, &self.tree.nodes) {
            (Some(b), None) => {
                let d = b.iter().map(|v| if let Vector::Vec(v) = v { v.len() } else { 1 }).max().unwrap_or(1);
                let branches: Vec<Vec<f64>> = b.iter().map(|v| v.to_vec(d)).collect();
                Tree::uniform(self.tree.horizon, &branches)
            }
            (None, Some(nodes)) => {
                let d = nodes
                    .iter()
                    .filter_map(|n| n.jump.as_ref())
                    .map(|v| if let Vector::Vec(v) = v { v.len() } else { 1 })
                    .max()
                    .unwrap_or(1);
                let specs: Vec<NodeSpec> = nodes
                    .iter()
                    .map(|n| NodeSpec {
                        id: n.id,
                        parent: n.parent,
                        jump: n.jump.as_ref().map(|j| j.to_vec(d)).unwrap_or_else(|| vec![0.0; d]),
                    })
                    .collect();
                Tree::from_nodes(Some(self.tree.horizon), &specs)
            }
            _ => Err(Error::invalid("tree needs exactly one of `branches` or `nodes`")),
        }
    }

    /// File ids in tree order (tree ids for uniform trees).
    fn original_ids(&self, tree: &Tree) -> Vec<usize> {
        match &self.tree.nodes {
            None => (0..tree.len()).collect(),
            Some(nodes) => {
                // breadth-first order of the file's nodes, children in file order
                let root = nodes.iter().find(|n| n.parent.is_none()).map(|n| n.id).unwrap_or(0);
                let mut out = vec![root];
                let mut i = 0;
                while i < out.len() {
                    let p = out[i];
                    out.extend(nodes.iter().filter(|n| n.parent == Some(p)).map(|n| n.id));
                    i += 1;
                }
                out
            }
        }
    }

    fn build_control(&self, tree: &Tree, c: &ControlSection) -> Result<ControlSpec> {
        if c.actions.is_empty() {
            return Err(Error::invalid("control block needs at least one action"));
        }
        let sup = match c.mode.as_str() {
            "sup" | "max" => true,
            "inf" | "min" => false,
            other => return Err(Error::invalid(format!("unknown control mode `{other}`"))),
        };
        let d = tree.dim();
        let mut actions = vec![Vec::new(); tree.len()];
        let mut discount = vec![0.0; tree.len()];
        for node in tree.internal().collect::<Vec<_>>() {
            let nd = tree.node(node);
            discount[node] = c.discount.at(nd.t);
            actions[node] = c
                .actions
                .iter()
                .map(|a| Action {
                    g: a.g.at(nd.t),
                    gamma: nd
                        .support
                        .iter()
                        .map(|x| a.gamma.as_ref().map(|m| m.eval(x)).unwrap_or(1.0))
                        .collect(),
                    beta: a.beta.as_ref().map(|b| b.to_vec(d)).unwrap_or_else(|| vec![0.0; d]),
                })
                .collect();
        }
        Ok(ControlSpec { labels: c.actions.iter().map(|a| a.label.clone()).collect(), sup, discount, actions })
    }

    fn build_generator(&self, tree: &Tree, control: Option<&ControlSpec>) -> Result<Generator> {
        let d = tree.dim();
        let sec = match &self.generator {
            None => {
                return Ok(match control {
                    Some(c) => crate::control::hamiltonian_generator(c),
                    None => Generator::zero(tree.len()),
                })
            }
            Some(s) => s,
        };
        let mut gen = match sec.family.as_str() {
            "zero" => Generator::zero(tree.len()),
            "hamiltonian" => {
                let c = control.ok_or_else(|| Error::invalid("hamiltonian generator needs a [control] block"))?;
                crate::control::hamiltonian_generator(c)
            }
            "affine" | "clip" | "lipschitz-clip" => {
                let mut nodes = vec![NodeGen::Zero; tree.len()];
                for node in tree.internal().collect::<Vec<_>>() {
                    let nd = tree.node(node);
                    let t = nd.t;
                    let a = Affine {
                        g0: sec.intercept.at(t),
                        y: sec.y.at(t),
                        ybar: sec.ybar.at(t),
                        eta: sec.z.as_ref().map(|z| z.to_vec(d)).unwrap_or_default(),
                        rho: match &sec.rho {
                            Some(m) if !m.is_zero() => nd.support.iter().map(|x| m.eval(x)).collect(),
                            _ => Vec::new(),
                        },
                    };
                    nodes[node] = if sec.family == "affine" {
                        NodeGen::Affine(a)
                    } else {
                        let [lo, hi] = sec.clip.ok_or_else(|| Error::invalid("clip generator needs `clip = [lo, hi]`"))?;
                        if lo > hi {
                            return Err(Error::invalid("clip bounds must satisfy lo ≤ hi"));
                        }
                        NodeGen::Clip { inner: a, lo, hi }
                    };
                }
                Generator { nodes, declared: None }
            }
            other => return Err(Error::invalid(format!("unknown generator family `{other}`"))),
        };
        if let Some(b) = sec.lipschitz {
            gen.declared = Some(vec![b; tree.len()]);
        }
        Ok(gen)
    }

    fn build_payoff(&self, tree: &Tree) -> Result<Vec<f64>> {
        let p = &self.payoff;
        let mut xi = vec![0.0; tree.len()];
        let leaves = tree.leaves().to_vec();
        if p.kind == "values" {
            let v = p.values.as_ref().ok_or_else(|| Error::invalid("payoff `values` needs a `values` list"))?;
            if v.len() != leaves.len() {
                return Err(Error::invalid(format!("payoff has {} values for {} leaves", v.len(), leaves.len())));
            }
            for (l, x) in leaves.iter().zip(v) {
                xi[*l] = *x;
            }
            return Ok(xi);
        }
        for &l in &leaves {
            let x = &tree.node(l).x;
            let base = match p.kind.as_str() {
                "linear" => x.iter().sum::<f64>(),
                "abs" => x.iter().map(|v| v.abs()).sum::<f64>(),
                "square" => x.iter().map(|v| v * v).sum::<f64>(),
                "call" => (x[0] - p.strike).max(0.0),
                "put" => (p.strike - x[0]).max(0.0),
                "path_max" => tree.path(l).iter().map(|&n| tree.node(n).x[0]).fold(f64::NEG_INFINITY, f64::max),
                other => return Err(Error::invalid(format!("unknown payoff kind `{other}`"))),
            };
            xi[l] = p.offset + p.scale * base;
        }
        Ok(xi)
    }

    fn build_obstacle(&self, tree: &Tree, o: &ObstacleSection) -> Result<Option<Vec<f64>>> {
        Ok(match o.kind.as_str() {
            "none" => None,
            "constant" => Some(vec![o.value; tree.len()]),
            "linear" => Some(tree.nodes().iter().map(|n| o.offset + o.scale * n.x.iter().sum::<f64>()).collect()),
            "values" => {
                let v = o.values.as_ref().ok_or_else(|| Error::invalid("obstacle `values` needs a `values` list"))?;
                if v.len() != tree.len() {
                    return Err(Error::invalid(format!("obstacle has {} values for {} nodes", v.len(), tree.len())));
                }
                Some(v.clone())
            }
            other => return Err(Error::invalid(format!("unknown obstacle kind `{other}`"))),
        })
    }
}

impl Problem {
    pub fn load(path: &Path) -> Result<Problem> {
        ScenarioFile::load(path)?.build()
    }

    pub fn parse(text: &str) -> Result<Problem> {
        ScenarioFile::parse(text)?.build()
    }

    /// Problem with a single admissible kernel per node.
    pub fn single(&self, sel: &Selection) -> Problem {
        let law = self.family.law(sel);
        Problem { family: KernelFamily::single(&law), ..self.clone() }
    }

    pub fn law(&self, sel: &Selection) -> Law {
        self.family.law(sel)
    }

    pub fn chars(&self, law: &Law) -> Vec<NodeChar> {
        calculus::compensator(&self.tree, law, &self.dc)
    }

    pub fn dc_at(&self, node: usize) -> f64 {
        self.dc.get(self.tree.node(node).t).copied().unwrap_or(1.0)
    }

    /// Bounds per node: declared, or the largest exact moduli over the admissible kernels.
    pub fn bounds(&self) -> Vec<Bounds> {
        (0..self.tree.len())
            .map(|n| {
                if self.tree.is_leaf(n) {
                    return Bounds::default();
                }
                if let Some(d) = &self.generator.declared {
                    return d[n];
                }
                self.family.kernels[n]
                    .iter()
                    .map(|k| self.generator.nodes[n].moduli(&NodeChar::new(&self.tree, n, k, self.dc_at(n)), self.form))
                    .fold(Bounds::default(), |a, b| a.max(&b))
            })
            .collect()
    }

    /// `α²` per node (zero at leaves).
    pub fn alpha_sq(&self) -> Vec<f64> {
        self.bounds()
            .iter()
            .enumerate()
            .map(|(n, b)| if self.tree.is_leaf(n) { 0.0 } else { b.alpha_sq(self.alpha_floor) })
            .collect()
    }

    /// `ΔA` per node, stored on the node the step leaves.
    pub fn da(&self) -> Vec<f64> {
        self.alpha_sq().iter().enumerate().map(|(n, a)| a * self.dc_at(n)).collect()
    }

    pub fn uses(&self) -> Uses {
        self.generator.uses(self.form)
    }

    pub fn beta_hat(&self) -> f64 {
        self.beta_hat_override.unwrap_or_else(|| {
            let u = self.uses();
            default_beta_hat(self.phi, u.y, u.ybar).unwrap_or(10_000.0)
        })
    }

    /// The applicable `M̃` constant at `β`.
    pub fn mtilde(&self, beta: f64) -> f64 {
        let u = self.uses();
        applicable_mtilde(&constants(beta, self.phi), u.y, u.ybar)
    }

    /// Re-roots the problem at `node`: the shifted payoff, generator and data.
    pub fn shift(&self, node: usize) -> (Problem, Shift) {
        let (tree, shift) = shift_subtree(&self.tree, node);
        let t0 = shift.t0;
        let map = &shift.map;
        let p = Problem {
            name: format!("{}@{}", self.name, node),
            form: self.form,
            family: self.family.remap(map),
            dc: self.dc[t0..].to_vec(),
            generator: self.generator.remap(map),
            xi: map.iter().map(|&o| self.xi[o]).collect(),
            obstacle: self.obstacle.as_ref().map(|l| map.iter().map(|&o| l[o]).collect()),
            phi: self.phi,
            beta_hat_override: Some(self.beta_hat()),
            alpha_floor: self.alpha_floor,
            control: self.control.as_ref().map(|c| c.remap(map)),
            intrinsic: self.intrinsic,
            tree,
        };
        (p, shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub check: String,
    pub pass: bool,
    /// `error` entries make the scenario invalid; `warning` entries only limit what can be run.
    pub severity: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub entries: Vec<CheckEntry>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.entries.iter().all(|e| e.pass || e.severity != "error")
    }

    pub fn failures(&self) -> Vec<&CheckEntry> {
        self.entries.iter().filter(|e| !e.pass && e.severity == "error").collect()
    }

    fn push(&mut self, check: &str, pass: bool, severity: &str, detail: String) {
        self.entries.push(CheckEntry { check: check.into(), pass, severity: severity.into(), detail });
    }
}

/// Runs every admissibility check; failures are report entries, never errors.
pub fn validate_scenario(p: &Problem) -> ValidationReport {
    let mut rep = ValidationReport { scenario: p.name.clone(), entries: Vec::new() };
    let tree = &p.tree;

    let kernel_err = p.family.validate(tree).err();
    rep.push(
        "kernels",
        kernel_err.is_none(),
        "error",
        kernel_err.as_ref().map(|e| e.to_string()).unwrap_or_else(|| "every kernel is a strictly positive probability".into()),
    );

    let phi_ok = (0.0..1.0).contains(&p.phi);
    rep.push("phi", phi_ok, "error", format!("Φ = {} must lie in [0, 1)", p.phi));

    let da = p.da();
    let worst = tree.internal().map(|n| (n, da[n])).fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let da_ok = worst.1 <= p.phi + 1e-15;
    rep.push(
        "delta_a",
        da_ok,
        "error",
        if da_ok {
            format!("max ΔA = {} ≤ Φ = {}", worst.1, p.phi)
        } else {
            format!("ΔA > Φ at node {}: ΔA = {} exceeds Φ = {}", worst.0, worst.1, p.phi)
        },
    );

    let bounds = p.bounds();
    let raw_zero: Vec<usize> = tree.internal().filter(|&n| bounds[n].alpha_sq(0.0) == 0.0).collect();
    rep.push(
        "alpha_positive",
        true,
        "warning",
        if raw_zero.is_empty() {
            "α² > 0 at every node".into()
        } else {
            format!("α² raised to the floor {} at {} node(s)", p.alpha_floor, raw_zero.len())
        },
    );

    if kernel_err.is_none() {
        let mut excess = (0usize, f64::NEG_INFINITY);
        if let Some(decl) = &p.generator.declared {
            for n in tree.internal() {
                for k in &p.family.kernels[n] {
                    let kc = NodeChar::new(tree, n, k, p.dc_at(n));
                    let e = lipschitz_excess(&p.generator.nodes[n], &kc, p.form, &decl[n]);
                    if e > excess.1 {
                        excess = (n, e);
                    }
                }
            }
        }
        rep.push(
            "lipschitz",
            excess.1 <= 0.0,
            "error",
            if excess.1 <= 0.0 {
                "bounds dominate the generator's moduli".into()
            } else {
                format!("declared bounds violated at node {} (excess {:e})", excess.0, excess.1)
            },
        );

        if p.form == Form::X {
            let bad = tree.internal().find(|&n| {
                p.family.kernels[n].iter().any(|k| {
                    let kc = NodeChar::new(tree, n, k, p.dc_at(n));
                    kc.m.iter().any(|v| v.abs() > calculus::MARTINGALE_TOL * 10.0)
                })
            });
            rep.push(
                "martingale_law",
                bad.is_none(),
                "error",
                match bad {
                    None => "every kernel makes X a martingale".into(),
                    Some(n) => format!("node {n}: a kernel is not a martingale law for X"),
                },
            );
        }

        let mut tilt_bad = None;
        for n in tree.internal() {
            let g = &p.generator.nodes[n];
            let rho = match g {
                NodeGen::Affine(a) | NodeGen::Clip { inner: a, .. } if !a.rho.is_empty() && p.form == Form::Jump => Some(a.rho.clone()),
                _ => None,
            };
            if let Some(r) = rho {
                for k in &p.family.kernels[n] {
                    let kc = NodeChar::new(tree, n, k, p.dc_at(n));
                    if calculus::tilt_factors(&kc, None, Some(&r)).iter().any(|f| *f <= 0.0) {
                        tilt_bad = Some(n);
                    }
                }
            }
        }
        rep.push(
            "jump_coefficient",
            tilt_bad.is_none(),
            "error",
            match tilt_bad {
                None => "Δ(ρ∗μ̃) > −1 everywhere".into(),
                Some(n) => format!("node {n}: Δ(ρ∗μ̃) ≤ −1"),
            },
        );

        if let Some(c) = &p.control {
            let bad = crate::control::check_tilts(p, c).err();
            rep.push(
                "control_tilts",
                bad.is_none(),
                "error",
                bad.map(|e| e.to_string()).unwrap_or_else(|| "every control tilt is a strictly positive probability".into()),
            );
        }
    }

    if let Some(o) = &p.obstacle {
        let bad = tree.leaves().iter().find(|&&l| o[l] > p.xi[l] + 1e-12);
        rep.push(
            "obstacle",
            true,
            "warning",
            match bad {
                None => "L_N ≤ ξ".into(),
                Some(l) => format!("obstacle above terminal payoff at leaf {l}; the terminal payoff is kept there"),
            },
        );
    }

    if phi_ok {
        let bh = p.beta_hat();
        let c = constants(bh, p.phi);
        let mt = p.mtilde(bh);
        rep.push("contraction", mt < 1.0, "error", format!("applicable M̃(β̂ = {bh}) = {mt}"));
        rep.push(
            "reflected_contraction",
            c.m1 < 1.0,
            "warning",
            format!("M₁(β̂ = {bh}) = {} (needed for reflected and second-order solves)", c.m1),
        );
    }
    rep
}
