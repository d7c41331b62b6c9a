//! Characteristics, compensators, jump-integrand norms, stochastic integrals,
//! orthogonal decompositions, Stieltjes exponentials and the contraction
//! constants.

use crate::error::{Error, Result};
use crate::lattice::{Law, Tree};
use nalgebra::{DMatrix, DVector};

/// Driving martingale of a BSDE: the compensated jump measure, or X itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Jump,
    X,
}

/// One-step characteristics at a non-leaf node under one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeChar {
    pub dc: f64,
    /// Child probabilities.
    pub p: Vec<f64>,
    /// Jump class of every child (`None` for a zero jump).
    pub class: Vec<Option<usize>>,
    /// Child jumps.
    pub jumps: Vec<Vec<f64>>,
    /// Probability of each support point.
    pub class_prob: Vec<f64>,
    /// Compensator density `K` on the support (`class_prob / ΔC`).
    pub k: Vec<f64>,
    /// Jumping mass `a = K(R^d)·ΔC`.
    pub a: f64,
    /// Probability of the no-jump children, computed directly.
    pub no_jump: f64,
    /// `E[ΔX ΔXᵀ]/ΔC`.
    pub pi: DMatrix<f64>,
    /// Drift `E[ΔX]`.
    pub m: Vec<f64>,
}

impl NodeChar {
    pub fn new(tree: &Tree, node: usize, probs: &[f64], dc: f64) -> NodeChar {
        let n = tree.node(node);
        let d = tree.dim();
        let mut class_prob = vec![0.0; n.support.len()];
        let mut no_jump = 0.0;
        let mut pi = DMatrix::zeros(d, d);
        let mut m = vec![0.0; d];
        let mut jumps = Vec::with_capacity(n.children.len());
        for (i, &c) in n.children.iter().enumerate() {
            let p = probs[i];
            let j = &tree.node(c).jump;
            match n.child_class[i] {
                Some(k) => class_prob[k] += p,
                None => no_jump += p,
            }
            for r in 0..d {
                m[r] += p * j[r];
                for s in 0..d {
                    pi[(r, s)] += p * j[r] * j[s] / dc;
                }
            }
            jumps.push(j.clone());
        }
        let a = class_prob.iter().sum();
        NodeChar {
            dc,
            p: probs.to_vec(),
            class: n.child_class.clone(),
            jumps,
            k: class_prob.iter().map(|q| q / dc).collect(),
            class_prob,
            a,
            no_jump,
            pi,
            m,
        }
    }

    pub fn support_len(&self) -> usize {
        self.k.len()
    }

    pub fn has_no_jump_branch(&self) -> bool {
        self.class.iter().any(|c| c.is_none())
    }

    /// `∫u dK`.
    pub fn integral(&self, u: &[f64]) -> f64 {
        self.k.iter().zip(u).map(|(k, u)| k * u).sum()
    }

    /// `Û = ΔC ∫u dK`, the predictable part removed from a jump integrand.
    pub fn u_hat(&self, u: &[f64]) -> f64 {
        self.class_prob.iter().zip(u).map(|(q, u)| q * u).sum()
    }

    pub fn expect(&self, h: &[f64]) -> f64 {
        self.p.iter().zip(h).map(|(p, h)| p * h).sum()
    }

    /// `zᵀ π z'`.
    pub fn pi_form(&self, z: &[f64], z2: &[f64]) -> f64 {
        let d = self.pi.nrows();
        let mut s = 0.0;
        for r in 0..d {
            for c in 0..d {
                s += z[r] * self.pi[(r, c)] * z2[c];
            }
        }
        s
    }

    pub fn jump_dot(&self, child: usize, z: &[f64]) -> f64 {
        self.jumps[child].iter().zip(z).map(|(a, b)| a * b).sum()
    }
}

/// Characteristics of every non-leaf node under a law; leaves get an empty entry.
pub fn compensator(tree: &Tree, law: &Law, dc: &[f64]) -> Vec<NodeChar> {
    tree.nodes()
        .iter()
        .map(|n| {
            let step = if n.t < dc.len() { dc[n.t] } else { 1.0 };
            NodeChar::new(tree, n.id, &law.probs[n.id], step)
        })
        .collect()
}

/// Scalar product of the jump-integrand space at a node.
pub fn lhat_inner(kc: &NodeChar, u: &[f64], v: &[f64]) -> f64 {
    let uv: f64 = kc.k.iter().zip(u).zip(v).map(|((k, a), b)| k * a * b).sum();
    uv - kc.dc * kc.integral(u) * kc.integral(v)
}

/// `‖u‖² = ∫(u − ûΔC)² dK + (1−a)·û²·ΔC` with `û = ∫u dK`.
pub fn lhat_norm_sq(kc: &NodeChar, u: &[f64]) -> f64 {
    let uh = kc.integral(u);
    let centred: f64 = kc.k.iter().zip(u).map(|(k, u)| k * (u - uh * kc.dc).powi(2)).sum();
    (centred + (1.0 - kc.a).abs() * uh * uh * kc.dc).max(0.0)
}

/// Increment `Ũ = U(ΔX)1_{ΔX≠0} − Û` of the jump integral along one child.
pub fn jump_increment(kc: &NodeChar, child: usize, u: &[f64]) -> f64 {
    let hat = kc.u_hat(u);
    match kc.class[child] {
        Some(j) => u[j] - hat,
        None => -hat,
    }
}

/// `U ∗ μ̃` for a predictable integrand given per non-leaf node on its support.
pub fn integral_jump(tree: &Tree, chars: &[NodeChar], u: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        for (i, &c) in tree.children(n).iter().enumerate() {
            out[c] = out[n] + jump_increment(&chars[n], i, &u[n]);
        }
    }
    out
}

/// `Z · X` for a predictable integrand given per non-leaf node.
pub fn integral_x(tree: &Tree, z: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        for &c in tree.children(n) {
            let inc: f64 = tree.node(c).jump.iter().zip(&z[n]).map(|(a, b)| a * b).sum();
            out[c] = out[n] + inc;
        }
    }
    out
}

fn centred_check(kc: &NodeChar, dm: &[f64], node: usize) -> Result<()> {
    let mean = kc.expect(dm);
    let scale = 1.0 + dm.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if mean.abs() > 1e-9 * scale {
        return Err(Error::node(node, format!("increment is not a martingale increment (mean {mean:e})")));
    }
    Ok(())
}

/// One-step jump-form decomposition of a centred increment: returns `U` on the
/// support and the orthogonal remainder `ΔN` per child.
pub fn decompose_jump_step(kc: &NodeChar, dm: &[f64], node: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    centred_check(kc, dm, node)?;
    let s = kc.support_len();
    let mut w = vec![0.0; s];
    let mut jump_part = 0.0;
    for (i, cl) in kc.class.iter().enumerate() {
        if let Some(j) = cl {
            w[*j] += kc.p[i] * dm[i];
            jump_part += kc.p[i] * dm[i];
        }
    }
    for j in 0..s {
        w[j] /= kc.class_prob[j];
    }
    let shift = if kc.has_no_jump_branch() { jump_part / kc.no_jump } else { 0.0 };
    let u: Vec<f64> = w.iter().map(|w| w + shift).collect();
    let dn = (0..dm.len()).map(|i| dm[i] - jump_increment(kc, i, &u)).collect();
    Ok((u, dn))
}

/// One-step X-form decomposition `Z = π⁺ E[ΔM ΔX]/ΔC`, `ΔN = ΔM − ZᵀΔX`.
pub fn decompose_x_step(kc: &NodeChar, dm: &[f64], node: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !is_martingale_char(kc) {
        return Err(Error::node(node, "law is not a martingale law for X; the X-form decomposition needs E[ΔX] = 0"));
    }
    centred_check(kc, dm, node)?;
    let d = kc.pi.nrows();
    let mut cov = DVector::zeros(d);
    for (i, j) in kc.jumps.iter().enumerate() {
        for r in 0..d {
            cov[r] += kc.p[i] * dm[i] * j[r] / kc.dc;
        }
    }
    let z = pseudo_solve(&kc.pi, &cov);
    let dn = (0..dm.len()).map(|i| dm[i] - kc.jump_dot(i, &z)).collect();
    Ok((z, dn))
}

/// `π⁺ v` through the Moore–Penrose pseudo-inverse.
pub fn pseudo_solve(pi: &DMatrix<f64>, v: &DVector<f64>) -> Vec<f64> {
    let scale = pi.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let pinv = pi.clone().pseudo_inverse(1e-12 * scale).expect("non-negative epsilon");
    (pinv * v).iter().copied().collect()
}

/// Decomposition of a martingale into `U ∗ μ̃ + N` (jump form).
#[derive(Debug, Clone, PartialEq)]
pub struct JumpDecomposition {
    pub u: Vec<Vec<f64>>,
    /// `N` with `N_0 = 0`.
    pub n: Vec<f64>,
}

/// Decomposition of a martingale into `Z · X + N` (X form).
#[derive(Debug, Clone, PartialEq)]
pub struct XDecomposition {
    pub z: Vec<Vec<f64>>,
    pub n: Vec<f64>,
}

fn increments(tree: &Tree, node: usize, m: &[f64]) -> Vec<f64> {
    tree.children(node).iter().map(|&c| m[c] - m[node]).collect()
}

pub fn orth_decompose_jump(tree: &Tree, chars: &[NodeChar], m: &[f64]) -> Result<JumpDecomposition> {
    let mut u = vec![Vec::new(); tree.len()];
    let mut n = vec![0.0; tree.len()];
    for node in tree.internal().collect::<Vec<_>>() {
        let (un, dn) = decompose_jump_step(&chars[node], &increments(tree, node, m), node)?;
        for (i, &c) in tree.children(node).iter().enumerate() {
            n[c] = n[node] + dn[i];
        }
        u[node] = un;
    }
    Ok(JumpDecomposition { u, n })
}

pub fn orth_decompose_x(tree: &Tree, chars: &[NodeChar], m: &[f64]) -> Result<XDecomposition> {
    let mut z = vec![Vec::new(); tree.len()];
    let mut n = vec![0.0; tree.len()];
    for node in tree.internal().collect::<Vec<_>>() {
        let (zn, dn) = decompose_x_step(&chars[node], &increments(tree, node, m), node)?;
        for (i, &c) in tree.children(node).iter().enumerate() {
            n[c] = n[node] + dn[i];
        }
        z[node] = zn;
    }
    Ok(XDecomposition { z, n })
}

/// `𝓔(sV)` along a pure-jump path: a leading 1 followed by `∏(1 + sΔV)`.
pub fn stieltjes_exponential(scale: f64, dv: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dv.len() + 1);
    out.push(1.0);
    let mut acc = 1.0;
    for (i, v) in dv.iter().enumerate() {
        let f = 1.0 + scale * v;
        if f <= 0.0 {
            return Err(Error::invalid(format!("exponential factor {f} at step {} is not positive", i + 1)));
        }
        acc *= f;
        out.push(acc);
    }
    Ok(out)
}

/// `𝓔(βA)` at every node, where `da[n]` is the increment of `A` on the step
/// leaving `n` (stored on the parent).
pub fn exp_weights(tree: &Tree, beta: f64, da: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0; tree.len()];
    for n in 0..tree.len() {
        for &c in tree.children(n) {
            out[c] = out[n] * (1.0 + beta * da[n]);
        }
    }
    out
}

/// Contraction constants at one `(β, Φ)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Constants {
    pub beta: f64,
    pub phi: f64,
    pub f: f64,
    pub g: f64,
    pub mt1: f64,
    pub mt2: f64,
    pub mt3: f64,
    pub m1: f64,
}

pub fn f_phi(beta: f64, phi: f64) -> f64 {
    4.0 * (1.0 + beta * phi) / (beta * beta)
}

pub fn g_phi(beta: f64, phi: f64) -> f64 {
    if phi == 0.0 {
        return 4.0 / (beta * beta);
    }
    let s = (1.0 + beta * phi).sqrt();
    phi * phi * s / ((1.0 + beta * phi - s) * (s - 1.0))
}

pub fn constants(beta: f64, phi: f64) -> Constants {
    let f = f_phi(beta, phi);
    let g = g_phi(beta, phi);
    let big = f64::max(1.0, (1.0 + beta * phi) / beta);
    let inner = 1.0 / beta + beta * g;
    Constants {
        beta,
        phi,
        f,
        g,
        mt1: f + 1.0 / beta + big * inner,
        mt2: f + inner,
        mt3: 1.0 / beta + big * inner,
        m1: f + 1.0 / beta + big * (5.0 / beta + 4.0 / beta * (1.0 + beta * phi).sqrt() + beta * g),
    }
}

/// Which contraction constant governs a generator, by the arguments it uses.
pub fn applicable_mtilde(c: &Constants, uses_y: bool, uses_ybar: bool) -> f64 {
    if !uses_ybar {
        c.mt2
    } else if !uses_y {
        c.mt3
    } else {
        c.mt1
    }
}

/// The unique `β*` with `M₁^Φ(β*) = 1`, by bisection on `[Φ + 10⁻⁶, 10⁶]`.
pub fn beta_star(phi: f64, tol: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::invalid(format!("Φ = {phi} must lie in [0, 1)")));
    }
    let (mut lo, mut hi) = (phi + 1e-6, 1e6);
    let h = |b: f64| constants(b, phi).m1 - 1.0;
    if h(lo) <= 0.0 || h(hi) >= 0.0 {
        return Err(Error::Numerical("M₁ does not cross 1 on the bisection bracket".into()));
    }
    while hi - lo > tol * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Default `β̂`: the smallest multiple of 0.5 with `M₁ < 0.9`, or failing that
/// the smallest with the applicable `M̃ < 0.9`.
pub fn default_beta_hat(phi: f64, uses_y: bool, uses_ybar: bool) -> Option<f64> {
    let grid = (1..=20_000).map(|i| i as f64 * 0.5);
    grid.clone()
        .find(|&b| constants(b, phi).m1 < 0.9)
        .or_else(|| grid.into_iter().find(|&b| applicable_mtilde(&constants(b, phi), uses_y, uses_ybar) < 0.9))
}

pub const MARTINGALE_TOL: f64 = 1e-12;

fn is_martingale_char(kc: &NodeChar) -> bool {
    let scale = 1.0 + kc.jumps.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    kc.m.iter().all(|v| v.abs() <= MARTINGALE_TOL * scale)
}

/// Truncation `h(x) = x·1_{|x|≤1}`.
pub fn truncate(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1.0 {
        x.to_vec()
    } else {
        vec![0.0; x.len()]
    }
}

/// First characteristic per step: `E[h(ΔX)]`; together with the big-jump part
/// `E[ΔX − h(ΔX)]` it recovers the drift.
pub fn first_characteristic(kc: &NodeChar) -> Vec<f64> {
    let d = kc.m.len();
    let mut b = vec![0.0; d];
    for (i, j) in kc.jumps.iter().enumerate() {
        for (r, v) in truncate(j).iter().enumerate() {
            b[r] += kc.p[i] * v;
        }
    }
    b
}

/// True when X is a martingale under the law: `B + E[ΔX − h(ΔX)] = E[ΔX] = 0` at every node.
pub fn martingale_law_check(tree: &Tree, law: &Law) -> bool {
    let dc = vec![1.0; tree.horizon()];
    compensator(tree, law, &dc)
        .iter()
        .enumerate()
        .filter(|(n, _)| !tree.is_leaf(*n))
        .all(|(_, kc)| is_martingale_char(kc))
}

/// Per-child density factor `1 + ηᵀΔX + ρ(ΔX)1_{ΔX≠0} − Û(ρ)`.
pub fn tilt_factors(kc: &NodeChar, eta: Option<&[f64]>, rho: Option<&[f64]>) -> Vec<f64> {
    (0..kc.p.len())
        .map(|i| {
            let mut f = 1.0;
            if let Some(e) = eta {
                f += kc.jump_dot(i, e);
            }
            if let Some(r) = rho {
                f += jump_increment(kc, i, r);
            }
            f
        })
        .collect()
}

/// Girsanov change of measure: returns the density process `𝓔` per node and the tilted law.
pub fn girsanov(
    tree: &Tree,
    law: &Law,
    dc: &[f64],
    eta: Option<&[Vec<f64>]>,
    rho: Option<&[Vec<f64>]>,
) -> Result<(Vec<f64>, Law)> {
    let chars = compensator(tree, law, dc);
    let mut density = vec![1.0; tree.len()];
    let mut probs = law.probs.clone();
    for n in tree.internal().collect::<Vec<_>>() {
        let f = tilt_factors(&chars[n], eta.map(|e| e[n].as_slice()), rho.map(|r| r[n].as_slice()));
        for (i, &c) in tree.children(n).iter().enumerate() {
            if f[i] <= 0.0 {
                return Err(Error::node(n, format!("density factor {} on child {} is not positive", f[i], i)));
            }
            density[c] = density[n] * f[i];
            probs[n][i] = law.probs[n][i] * f[i];
        }
    }
    Ok((density, Law { probs }))
}
