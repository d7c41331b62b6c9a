//! Generator families with explicit Lipschitz moduli and linearization data.
//!
//! All coefficients are predictable: they live on the node from which the step
//! leaves. Jump coefficients are vectors indexed by that node's jump support.
//! A generator is evaluated as `f(y, ȳ, z, u)` where `y = Y_{t+1}` is the value
//! at the child, `ȳ = Y_t` the left limit, `z` the X integrand (empty in jump
//! form) and `u` the jump integrand (empty in X form).

use crate::calculus::{lhat_inner, lhat_norm_sq, Form, NodeChar};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Affine {
    pub g0: f64,
    pub y: f64,
    pub ybar: f64,
    pub eta: Vec<f64>,
    /// Jump coefficient, paired with `u` through the jump-integrand scalar product.
    pub rho: Vec<f64>,
}

impl Affine {
    fn eval(&self, kc: &NodeChar, y: f64, ybar: f64, z: &[f64], u: &[f64]) -> f64 {
        let mut v = self.g0 + self.y * y + self.ybar * ybar;
        if !z.is_empty() && !self.eta.is_empty() {
            v += kc.pi_form(&self.eta, z);
        }
        if !u.is_empty() && !self.rho.is_empty() {
            v += lhat_inner(kc, &self.rho, u);
        }
        v
    }
}

/// One control of a Hamiltonian generator at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub g: f64,
    /// Jump tilt `γ` on the node's support.
    pub gamma: Vec<f64>,
    /// Drift tilt `β` (X form).
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeGen {
    Zero,
    Affine(Affine),
    Clip { inner: Affine, lo: f64, hi: f64 },
    Hamiltonian { discount: f64, actions: Vec<Action>, sup: bool },
}

/// Squared Lipschitz moduli `(r, r̄, θ^X, θ^μ)` at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub r: f64,
    pub rbar: f64,
    pub theta_x: f64,
    pub theta_mu: f64,
}

impl Bounds {
    pub fn alpha_sq(&self, floor: f64) -> f64 {
        self.r.sqrt().max(self.rbar.sqrt()).max(self.theta_x).max(self.theta_mu).max(floor)
    }

    pub fn max(&self, o: &Bounds) -> Bounds {
        Bounds {
            r: self.r.max(o.r),
            rbar: self.rbar.max(o.rbar),
            theta_x: self.theta_x.max(o.theta_x),
            theta_mu: self.theta_mu.max(o.theta_mu),
        }
    }

    pub fn dominates(&self, o: &Bounds, tol: f64) -> bool {
        self.r + tol >= o.r && self.rbar + tol >= o.rbar && self.theta_x + tol >= o.theta_x && self.theta_mu + tol >= o.theta_mu
    }
}

/// Which arguments a generator actually uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct Uses {
    pub y: bool,
    pub ybar: bool,
    pub z: bool,
    pub u: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub nodes: Vec<NodeGen>,
    /// Declared bounds per node; when absent the exact moduli are used.
    pub declared: Option<Vec<Bounds>>,
}

/// Jump coefficient `ρ_α` whose scalar product with `u` equals `∫u(γ−1)dK`.
pub fn hamiltonian_rho(kc: &NodeChar, gamma: &[f64]) -> Vec<f64> {
    let base: Vec<f64> = gamma.iter().map(|g| g - 1.0).collect();
    let c = if kc.has_no_jump_branch() {
        kc.u_hat(&base) / kc.no_jump
    } else {
        0.0
    };
    base.iter().map(|b| b + c).collect()
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().any(|x| *x != 0.0)
}

impl NodeGen {
    pub fn eval(&self, kc: &NodeChar, y: f64, ybar: f64, z: &[f64], u: &[f64]) -> f64 {
        match self {
            NodeGen::Zero => 0.0,
            NodeGen::Affine(a) => a.eval(kc, y, ybar, z, u),
            NodeGen::Clip { inner, lo, hi } => inner.eval(kc, y, ybar, z, u).clamp(*lo, *hi),
            NodeGen::Hamiltonian { .. } => self.eval_action(kc, y, ybar, z, u).0,
        }
    }

    /// Value of the Hamiltonian and the first optimizing action (0 for other families).
    pub fn eval_action(&self, kc: &NodeChar, y: f64, ybar: f64, z: &[f64], u: &[f64]) -> (f64, usize) {
        match self {
            NodeGen::Hamiltonian { sup, .. } => {
                let mut best = (f64::NAN, 0usize);
                for (i, v) in self.action_values(kc, y, z, u).into_iter().enumerate() {
                    let better = if *sup { v > best.0 } else { v < best.0 };
                    if i == 0 || better {
                        best = (v, i);
                    }
                }
                best
            }
            _ => (self.eval(kc, y, ybar, z, u), 0),
        }
    }

    /// `f^α` for every action of a Hamiltonian node.
    pub fn action_values(&self, kc: &NodeChar, y: f64, z: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            NodeGen::Hamiltonian { discount, actions, .. } => {
                let dy = discount / (1.0 + discount * kc.dc) * y;
                actions
                    .iter()
                    .map(|a| {
                        let mut v = a.g - dy;
                        if !z.is_empty() && !a.beta.is_empty() {
                            v += kc.pi_form(z, &a.beta);
                        }
                        if !u.is_empty() && !a.gamma.is_empty() {
                            v += kc.k.iter().zip(u).zip(&a.gamma).map(|((k, u), g)| k * u * (g - 1.0)).sum::<f64>();
                        }
                        v
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn uses(&self, form: Form) -> Uses {
        let affine_uses = |a: &Affine| Uses {
            y: a.y != 0.0,
            ybar: a.ybar != 0.0,
            z: form == Form::X && nonzero(&a.eta),
            u: form == Form::Jump && nonzero(&a.rho),
        };
        match self {
            NodeGen::Zero => Uses::default(),
            NodeGen::Affine(a) => affine_uses(a),
            NodeGen::Clip { inner, .. } => affine_uses(inner),
            NodeGen::Hamiltonian { discount, actions, .. } => Uses {
                y: *discount != 0.0,
                ybar: false,
                z: form == Form::X && actions.iter().any(|a| nonzero(&a.beta)),
                u: form == Form::Jump && actions.iter().any(|a| a.gamma.iter().any(|g| *g != 1.0)),
            },
        }
    }

    /// Squared Lipschitz moduli valid for simultaneous perturbation of all
    /// arguments: each active channel is scaled by the number of active channels.
    pub fn moduli(&self, kc: &NodeChar, form: Form) -> Bounds {
        let (ly, lybar, tz, tu) = match self {
            NodeGen::Zero => (0.0, 0.0, 0.0, 0.0),
            NodeGen::Affine(a) | NodeGen::Clip { inner: a, .. } => (
                a.y * a.y,
                a.ybar * a.ybar,
                if form == Form::X && !a.eta.is_empty() { kc.pi_form(&a.eta, &a.eta) } else { 0.0 },
                if form == Form::Jump && !a.rho.is_empty() { lhat_norm_sq(kc, &a.rho) } else { 0.0 },
            ),
            NodeGen::Hamiltonian { discount, actions, .. } => {
                let d = discount / (1.0 + discount * kc.dc);
                let tz = if form == Form::X {
                    actions.iter().map(|a| if a.beta.is_empty() { 0.0 } else { kc.pi_form(&a.beta, &a.beta) }).fold(0.0, f64::max)
                } else {
                    0.0
                };
                let tu = if form == Form::Jump {
                    actions
                        .iter()
                        .map(|a| if a.gamma.is_empty() { 0.0 } else { lhat_norm_sq(kc, &hamiltonian_rho(kc, &a.gamma)) })
                        .fold(0.0, f64::max)
                } else {
                    0.0
                };
                (d * d, 0.0, tz, tu)
            }
        };
        let active = [ly, lybar, tz, tu].iter().filter(|v| **v > 0.0).count().max(1) as f64;
        Bounds { r: active * ly, rbar: active * lybar, theta_x: active * tz, theta_mu: active * tu }
    }

    /// A predictable jump coefficient `ρ` with `f(y_c,ȳ,z,u) − f(y_c,ȳ,z,u′) ≥ ⟨ρ, u − u′⟩`
    /// at every child value `y_c` (equality for affine families).
    pub fn rho_for_difference(&self, kc: &NodeChar, ys: &[f64], ybar: f64, z: &[f64], u: &[f64], u2: &[f64]) -> Vec<f64> {
        let s = kc.support_len();
        match self {
            NodeGen::Zero => vec![0.0; s],
            NodeGen::Affine(a) => if a.rho.is_empty() { vec![0.0; s] } else { a.rho.clone() },
            NodeGen::Clip { inner, .. } => {
                if inner.rho.is_empty() {
                    return vec![0.0; s];
                }
                let pair = lhat_inner(kc, &inner.rho, &u.iter().zip(u2).map(|(a, b)| a - b).collect::<Vec<_>>());
                // clipping scales the pairing by a child-dependent θ ∈ [0,1]; keep the smallest effect
                let thetas = ys.iter().map(|&y| {
                    let a1 = inner.eval(kc, y, ybar, z, u);
                    let a2 = inner.eval(kc, y, ybar, z, u2);
                    if (a1 - a2).abs() > 1e-15 {
                        (self.eval(kc, y, ybar, z, u) - self.eval(kc, y, ybar, z, u2)) / (a1 - a2)
                    } else {
                        1.0
                    }
                });
                let theta = if pair >= 0.0 { thetas.fold(1.0, f64::min) } else { thetas.fold(0.0, f64::max) };
                inner.rho.iter().map(|r| theta * r).collect()
            }
            NodeGen::Hamiltonian { actions, sup, .. } => {
                // sup: the optimizer at u′ gives a lower bound; inf: the optimizer at u
                let at = if *sup { u2 } else { u };
                let y0 = ys.first().copied().unwrap_or(0.0);
                let (_, i) = self.eval_action(kc, y0, ybar, z, at);
                if actions[i].gamma.is_empty() {
                    vec![0.0; s]
                } else {
                    hamiltonian_rho(kc, &actions[i].gamma)
                }
            }
        }
    }

    /// Same node data with the intercept shifted by `c` (every action for Hamiltonians).
    pub fn shifted(&self, c: f64) -> NodeGen {
        match self {
            NodeGen::Zero => NodeGen::Affine(Affine { g0: c, ..Affine::default() }),
            NodeGen::Affine(a) => NodeGen::Affine(Affine { g0: a.g0 + c, ..a.clone() }),
            NodeGen::Clip { inner, lo, hi } => NodeGen::Clip { inner: Affine { g0: inner.g0 + c, ..inner.clone() }, lo: lo + c, hi: hi + c },
            NodeGen::Hamiltonian { discount, actions, sup } => NodeGen::Hamiltonian {
                discount: *discount,
                actions: actions.iter().map(|a| Action { g: a.g + c, ..a.clone() }).collect(),
                sup: *sup,
            },
        }
    }
}

impl Generator {
    pub fn zero(len: usize) -> Generator {
        Generator { nodes: vec![NodeGen::Zero; len], declared: None }
    }

    pub fn uniform(len: usize, g: NodeGen) -> Generator {
        Generator { nodes: vec![g; len], declared: None }
    }

    pub fn eval(&self, node: usize, kc: &NodeChar, y: f64, ybar: f64, z: &[f64], u: &[f64]) -> f64 {
        self.nodes[node].eval(kc, y, ybar, z, u)
    }

    pub fn uses(&self, form: Form) -> Uses {
        self.nodes.iter().fold(Uses::default(), |acc, g| {
            let u = g.uses(form);
            Uses { y: acc.y || u.y, ybar: acc.ybar || u.ybar, z: acc.z || u.z, u: acc.u || u.u }
        })
    }

    /// Bounds in force at a node: the declared ones if any, else the exact moduli.
    pub fn bounds(&self, node: usize, kc: &NodeChar, form: Form) -> Bounds {
        match &self.declared {
            Some(d) => d[node],
            None => self.nodes[node].moduli(kc, form),
        }
    }

    pub fn remap(&self, map: &[usize]) -> Generator {
        Generator {
            nodes: map.iter().map(|&o| self.nodes[o].clone()).collect(),
            declared: self.declared.as_ref().map(|d| map.iter().map(|&o| d[o]).collect()),
        }
    }

    pub fn shifted(&self, c: f64) -> Generator {
        Generator { nodes: self.nodes.iter().map(|g| g.shifted(c)).collect(), declared: self.declared.clone() }
    }
}

/// Checks the Lipschitz inequality with the given bounds on a deterministic
/// set of perturbations; returns the worst excess (≤ 0 means satisfied).
pub fn lipschitz_excess(g: &NodeGen, kc: &NodeChar, form: Form, b: &Bounds) -> f64 {
    let d = kc.pi.nrows();
    let s = kc.support_len();
    let mut worst = f64::NEG_INFINITY;
    let probe = |k: usize, i: usize| ((k * 7919 + i * 104729) % 2003) as f64 / 1001.5 - 1.0;
    for k in 0..64 {
        let y = 3.0 * probe(k, 1);
        let y2 = 3.0 * probe(k, 2);
        let yb = 3.0 * probe(k, 3);
        let yb2 = 3.0 * probe(k, 4);
        let (z, z2): (Vec<f64>, Vec<f64>) = if form == Form::X {
            ((0..d).map(|i| 2.0 * probe(k, 10 + i)).collect(), (0..d).map(|i| 2.0 * probe(k, 20 + i)).collect())
        } else {
            (Vec::new(), Vec::new())
        };
        let (u, u2): (Vec<f64>, Vec<f64>) = if form == Form::Jump {
            ((0..s).map(|i| 2.0 * probe(k, 30 + i)).collect(), (0..s).map(|i| 2.0 * probe(k, 60 + i)).collect())
        } else {
            (Vec::new(), Vec::new())
        };
        let lhs = (g.eval(kc, y, yb, &z, &u) - g.eval(kc, y2, yb2, &z2, &u2)).powi(2);
        let dz: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a - b).collect();
        let du: Vec<f64> = u.iter().zip(&u2).map(|(a, b)| a - b).collect();
        let mut rhs = b.r * (y - y2).powi(2) + b.rbar * (yb - yb2).powi(2);
        if !dz.is_empty() {
            rhs += b.theta_x * kc.pi_form(&dz, &dz);
        }
        if !du.is_empty() {
            rhs += b.theta_mu * lhat_norm_sq(kc, &du);
        }
        worst = worst.max(lhs - rhs - 1e-10 * (1.0 + rhs));
    }
    worst
}
