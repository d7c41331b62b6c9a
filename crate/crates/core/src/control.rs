//! Robust control on the tree: Hamiltonian generators, control-induced
//! tilts, optimal policy extraction and brute-force verification.
//!
//! A control `α` at a node tilts the kernel: in jump form jump children are
//! scaled by `γ^α(ΔX)` and the no-jump children absorb the remaining mass; in
//! X form children are scaled by `1 + β^αᵀΔX`. Running rewards `g` are paid on
//! each step and discounted by `D = 𝓔(∫d dC)` taken at the start of the step.

use crate::bsde::{solve_stepwise, BsdeSolution};
use crate::calculus::{Form, NodeChar};
use crate::error::{Error, Result};
use crate::generator::{Action, Generator, NodeGen};
use crate::lattice::{Law, Selection, Tree};
use crate::scenario::Problem;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub labels: Vec<String>,
    /// `true` maximizes over controls, `false` minimizes.
    pub sup: bool,
    /// Discount rate per node (for the step leaving it).
    pub discount: Vec<f64>,
    /// Per node, one entry per label.
    pub actions: Vec<Vec<Action>>,
}

impl ControlSpec {
    pub fn remap(&self, map: &[usize]) -> ControlSpec {
        ControlSpec {
            labels: self.labels.clone(),
            sup: self.sup,
            discount: map.iter().map(|&o| self.discount[o]).collect(),
            actions: map.iter().map(|&o| self.actions[o].clone()).collect(),
        }
    }
}

/// A Markov policy: one action index per node (ignored at leaves).
pub type Policy = Vec<usize>;

/// `f = ext_α [g^α − d/(1+dΔC)·y + zᵀπβ^α + ∫u(γ^α − 1)dK]`.
pub fn hamiltonian_generator(spec: &ControlSpec) -> Generator {
    Generator {
        nodes: spec
            .actions
            .iter()
            .zip(&spec.discount)
            .map(|(acts, d)| {
                if acts.is_empty() {
                    NodeGen::Zero
                } else {
                    NodeGen::Hamiltonian { discount: *d, actions: acts.clone(), sup: spec.sup }
                }
            })
            .collect(),
        declared: None,
    }
}

/// Child probabilities under action `a` at a node.
pub fn tilted_probs(kc: &NodeChar, a: &Action, form: Form, node: usize) -> Result<Vec<f64>> {
    let q: Vec<f64> = match form {
        Form::X => (0..kc.p.len()).map(|i| kc.p[i] * (1.0 + kc.jump_dot(i, &a.beta))).collect(),
        Form::Jump => {
            let jump_mass: f64 = kc.class.iter().zip(&kc.p).filter_map(|(c, p)| c.map(|j| p * a.gamma[j])).sum();
            if !kc.has_no_jump_branch() && (jump_mass - 1.0).abs() > 1e-12 {
                return Err(Error::node(node, format!("tilt leaves mass {jump_mass} with no zero-jump child to absorb it")));
            }
            let scale = if kc.has_no_jump_branch() { (1.0 - jump_mass) / kc.no_jump } else { 1.0 };
            kc.class
                .iter()
                .zip(&kc.p)
                .map(|(c, p)| match c {
                    Some(j) => p * a.gamma[*j],
                    None => p * scale,
                })
                .collect()
        }
    };
    if let Some(w) = q.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::node(node, format!("tilted weight {w} is not strictly positive")));
    }
    Ok(q)
}

/// Checks every (node, kernel, action) tilt and the discount condition `dΔC > −1`.
pub fn check_tilts(p: &Problem, spec: &ControlSpec) -> Result<()> {
    for n in p.tree.internal() {
        if spec.discount[n] * p.dc_at(n) <= -1.0 {
            return Err(Error::node(n, "discount violates dΔC > −1"));
        }
        for k in &p.family.kernels[n] {
            let kc = NodeChar::new(&p.tree, n, k, p.dc_at(n));
            for a in &spec.actions[n] {
                tilted_probs(&kc, a, p.form, n)?;
            }
        }
    }
    Ok(())
}

fn spec_of(p: &Problem) -> Result<&ControlSpec> {
    p.control.as_ref().ok_or_else(|| Error::invalid("scenario has no control block"))
}

/// Law of the controlled process under `policy`.
pub fn controlled_law(p: &Problem, law: &Law, policy: &Policy) -> Result<Law> {
    let spec = spec_of(p)?;
    let chars = p.chars(law);
    let mut probs = law.probs.clone();
    for n in p.tree.internal() {
        probs[n] = tilted_probs(&chars[n], &spec.actions[n][policy[n]], p.form, n)?;
    }
    Ok(Law { probs })
}

/// `E^{P^α}[ξ/D_N + Σ g_r ΔC_r / D_r]` by backward recursion under the tilted kernels.
pub fn discounted_payoff(p: &Problem, law: &Law, policy: &Policy) -> Result<f64> {
    let spec = spec_of(p)?;
    let q = controlled_law(p, law, policy)?;
    let tree = &p.tree;
    let mut v = p.xi.clone();
    for t in (0..tree.horizon()).rev() {
        for &n in tree.level(t) {
            let dc = p.dc_at(n);
            let cont = q.expect(tree, n, &v);
            v[n] = spec.actions[n][policy[n]].g * dc + cont / (1.0 + spec.discount[n] * dc);
        }
    }
    Ok(v[tree.root()])
}

/// The same value as a density-weighted expectation under the base law.
pub fn discounted_payoff_density(p: &Problem, law: &Law, policy: &Policy) -> Result<f64> {
    let spec = spec_of(p)?;
    let q = controlled_law(p, law, policy)?;
    let tree = &p.tree;
    let reach = law.reach(tree);
    let mut density = vec![1.0; tree.len()];
    let mut disc = vec![1.0; tree.len()];
    let mut running = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        for (i, &c) in tree.children(n).iter().enumerate() {
            let dc = p.dc_at(n);
            density[c] = density[n] * q.probs[n][i] / law.probs[n][i];
            running[c] = running[n] + spec.actions[n][policy[n]].g * dc / disc[n];
            disc[c] = disc[n] * (1.0 + spec.discount[n] * dc);
        }
    }
    Ok(tree.leaves().iter().map(|&l| reach[l] * density[l] * (p.xi[l] / disc[l] + running[l])).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyReport {
    pub policy: Policy,
    pub labels: Vec<String>,
    /// Difference between the best and second-best `f^α` per node (∞ with one action).
    pub gaps: Vec<f64>,
}

/// Per node, the first maximizer (minimizer) of `α ↦ f^α` along the solution.
pub fn extract_optimal_policy(p: &Problem, law: &Law, sol: &BsdeSolution) -> Result<PolicyReport> {
    let spec = spec_of(p)?;
    let chars = p.chars(law);
    let tree = &p.tree;
    let mut policy = vec![0; tree.len()];
    let mut gaps = vec![f64::INFINITY; tree.len()];
    for n in tree.internal() {
        let g = NodeGen::Hamiltonian { discount: spec.discount[n], actions: spec.actions[n].clone(), sup: spec.sup };
        let y0 = sol.y[tree.children(n)[0]];
        let vals = g.action_values(&chars[n], y0, &sol.z[n], &sol.u[n]);
        let (_, best) = g.eval_action(&chars[n], y0, sol.y[n], &sol.z[n], &sol.u[n]);
        policy[n] = best;
        let sign = if spec.sup { 1.0 } else { -1.0 };
        gaps[n] = vals
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, v)| sign * (vals[best] - v))
            .fold(f64::INFINITY, f64::min);
    }
    let labels = tree.nodes().iter().map(|nd| if tree.is_leaf(nd.id) { String::new() } else { spec.labels[policy[nd.id]].clone() }).collect();
    Ok(PolicyReport { policy, labels, gaps })
}

fn policy_count(tree: &Tree, actions: usize) -> f64 {
    (actions as f64).powi(tree.internal().count() as i32)
}

/// Every Markov policy, in lexicographic order over non-leaf nodes.
pub fn enumerate_policies(p: &Problem, cap: usize) -> Result<Vec<Policy>> {
    let spec = spec_of(p)?;
    let m = spec.labels.len();
    let count = policy_count(&p.tree, m);
    if count > cap as f64 {
        return Err(Error::CapExceeded { what: "policies".into(), count, cap });
    }
    let internal: Vec<usize> = p.tree.internal().collect();
    let mut out = Vec::with_capacity(count as usize);
    let mut cur = vec![0usize; p.tree.len()];
    loop {
        out.push(cur.clone());
        let mut i = internal.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            let n = internal[i];
            cur[n] += 1;
            if cur[n] < m {
                break;
            }
            cur[n] = 0;
        }
    }
}

/// Exhaustive optimum of the discounted payoff over Markov policies.
pub fn enumerate_policies_oracle(p: &Problem, law: &Law, cap: usize) -> Result<(f64, Policy)> {
    let spec = spec_of(p)?;
    let mut best: Option<(f64, Policy)> = None;
    for pol in enumerate_policies(p, cap)? {
        let v = discounted_payoff(p, law, &pol)?;
        let better = match &best {
            None => true,
            Some((b, _)) => if spec.sup { v > *b + 1e-14 } else { v < *b - 1e-14 },
        };
        if better {
            best = Some((v, pol));
        }
    }
    best.ok_or_else(|| Error::invalid("no policy"))
}

/// Value of the control problem under one law via the Hamiltonian BSDE.
pub fn control_value(p: &Problem, law: &Law) -> Result<(f64, BsdeSolution)> {
    let sol = solve_stepwise(p, law, &p.xi, None, None)?;
    Ok((sol.y[p.tree.root()], sol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustValue {
    pub value: f64,
    pub pasting: Vec<usize>,
    pub policy: Policy,
    /// Optimal policies under each tested pasting disagree at some reachable node.
    pub policies_disagree: bool,
    pub disagreement_nodes: Vec<usize>,
}

/// The second-order value with a Hamiltonian generator, the optimizing
/// pasting, the policy optimal under it, and the per-measure policy check.
pub fn robust_value(p: &Problem, cap: usize) -> Result<RobustValue> {
    let vf = crate::twobsde::value_function(p)?;
    let sel = Selection(vf.argmax.clone());
    let law = p.law(&sel);
    let (_, sol) = control_value(p, &law)?;
    let pol = extract_optimal_policy(p, &law, &sol)?;
    let mut disagree = Vec::new();
    for s in crate::twobsde::tested_pastings(p, cap, 0)? {
        let l = p.law(&s);
        let (_, so) = control_value(p, &l)?;
        let other = extract_optimal_policy(p, &l, &so)?;
        for n in p.tree.internal() {
            if other.policy[n] != pol.policy[n] && other.gaps[n] > 1e-9 && pol.gaps[n] > 1e-9 && !disagree.contains(&n) {
                disagree.push(n);
            }
        }
    }
    disagree.sort_unstable();
    Ok(RobustValue {
        value: vf.y[p.tree.root()],
        pasting: sel.0,
        policy: pol.policy,
        policies_disagree: !disagree.is_empty(),
        disagreement_nodes: disagree,
    })
}

/// Brute force over (pasting, policy) pairs: sup over pastings of the
/// optimum over policies.
pub fn robust_value_oracle(p: &Problem, cap: usize) -> Result<(f64, Vec<usize>, Policy)> {
    let mut best: Option<(f64, Vec<usize>, Policy)> = None;
    for s in p.family.enumerate_pastings(&p.tree, p.tree.root(), cap)? {
        let (v, pol) = enumerate_policies_oracle(p, &p.law(&s), cap)?;
        if best.as_ref().map(|b| v > b.0 + 1e-14).unwrap_or(true) {
            best = Some((v, s.0, pol));
        }
    }
    best.ok_or_else(|| Error::invalid("empty family"))
}
