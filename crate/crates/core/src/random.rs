//! Seeded random problem instances for property suites.

use crate::calculus::Form;
use crate::generator::{Affine, Generator, NodeGen};
use crate::lattice::{KernelFamily, Tree};
use crate::scenario::{validate_scenario, Problem, DEFAULT_ALPHA_FLOOR};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomGen {
    Zero,
    Affine,
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    pub horizon: usize,
    pub dim: usize,
    /// Children per node.
    pub branching: usize,
    /// Admissible kernels per node.
    pub kernels: usize,
    pub form: Form,
    pub generator: RandomGen,
    /// Include a zero jump among the branches (jump form only).
    pub zero_branch: bool,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec { horizon: 2, dim: 1, branching: 3, kernels: 1, form: Form::Jump, generator: RandomGen::Zero, zero_branch: false }
    }
}

fn nonzero<R: Rng>(rng: &mut R) -> f64 {
    let v: f64 = rng.gen_range(0.2..1.5);
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Distinct branch jumps; in X form with `d = 1` both signs are present.
pub fn random_branches<R: Rng>(rng: &mut R, spec: &RandomSpec) -> Vec<Vec<f64>> {
    loop {
        let mut b: Vec<Vec<f64>> = (0..spec.branching).map(|_| (0..spec.dim).map(|_| nonzero(rng)).collect()).collect();
        if spec.zero_branch && spec.form == Form::Jump {
            b[0] = vec![0.0; spec.dim];
        }
        if spec.form == Form::X {
            b[0] = b[0].iter().map(|v| v.abs()).collect();
            b[1] = b[1].iter().map(|v| -v.abs()).collect();
        }
        let distinct = (0..b.len()).all(|i| (i + 1..b.len()).all(|j| b[i].iter().zip(&b[j]).any(|(x, y)| (x - y).abs() > 0.05)));
        if distinct {
            return b;
        }
    }
}

/// A strictly positive probability vector of length `n`.
pub fn random_kernel<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// A strictly positive kernel with `E[ΔX] = 0` for one-dimensional jumps of both signs.
pub fn martingale_kernel<R: Rng>(rng: &mut R, jumps: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = (0..jumps.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
    let neg: f64 = jumps.iter().zip(&w).filter(|(x, _)| **x < 0.0).map(|(x, w)| -x * w).sum();
    let pos: f64 = jumps.iter().zip(&w).filter(|(x, _)| **x > 0.0).map(|(x, w)| x * w).sum();
    let scaled: Vec<f64> = jumps
        .iter()
        .zip(&w)
        .map(|(x, w)| if *x < 0.0 { w * pos } else if *x > 0.0 { w * neg } else { w * 0.5 * (pos + neg) })
        .collect();
    let s: f64 = scaled.iter().sum();
    scaled.iter().map(|v| v / s).collect()
}

fn random_generator<R: Rng>(rng: &mut R, tree: &Tree, spec: &RandomSpec) -> Generator {
    let mut nodes = vec![NodeGen::Zero; tree.len()];
    if spec.generator == RandomGen::Zero {
        return Generator { nodes, declared: None };
    }
    for n in tree.internal().collect::<Vec<_>>() {
        let s = tree.node(n).support.len();
        let a = Affine {
            g0: rng.gen_range(-0.5..0.5),
            y: rng.gen_range(-0.15..0.15),
            ybar: rng.gen_range(-0.15..0.15),
            eta: if spec.form == Form::X { (0..spec.dim).map(|_| rng.gen_range(-0.2..0.2)).collect() } else { Vec::new() },
            rho: if spec.form == Form::Jump { (0..s).map(|_| rng.gen_range(-0.2..0.2)).collect() } else { Vec::new() },
        };
        nodes[n] = match spec.generator {
            RandomGen::Clip => {
                let lo = rng.gen_range(-0.6..0.0);
                NodeGen::Clip { inner: a, lo, hi: lo + rng.gen_range(0.2..1.0) }
            }
            _ => NodeGen::Affine(a),
        };
    }
    Generator { nodes, declared: None }
}

/// A valid random problem; draws are repeated until the scenario validates.
pub fn random_problem<R: Rng>(rng: &mut R, spec: &RandomSpec) -> Problem {
    loop {
        let branches = random_branches(rng, spec);
        let tree = Tree::uniform(spec.horizon, &branches).expect("uniform trees are valid");
        let mut kernels = vec![Vec::new(); tree.len()];
        for n in tree.internal().collect::<Vec<_>>() {
            kernels[n] = (0..spec.kernels)
                .map(|_| {
                    if spec.form == Form::X {
                        martingale_kernel(rng, &branches.iter().map(|b| b[0]).collect::<Vec<_>>())
                    } else {
                        random_kernel(rng, spec.branching)
                    }
                })
                .collect();
        }
        let generator = random_generator(rng, &tree, spec);
        let dc: Vec<f64> = (0..spec.horizon).map(|_| rng.gen_range(0.5..1.0)).collect();
        let xi: Vec<f64> = (0..tree.len()).map(|n| if tree.is_leaf(n) { rng.gen_range(-2.0..2.0) } else { 0.0 }).collect();
        let p = Problem {
            name: "random".into(),
            form: spec.form,
            family: KernelFamily { kernels },
            dc,
            generator,
            xi,
            obstacle: None,
            phi: 0.5,
            beta_hat_override: None,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
            control: None,
            intrinsic: None,
            tree,
        };
        if validate_scenario(&p).ok() {
            return p;
        }
    }
}

/// A second problem with `ξ′ ≤ ξ` and `f′ = f − c`, `c ≥ 0`.
pub fn ordered_pair<R: Rng>(rng: &mut R, p: &Problem) -> Problem {
    let mut q = p.clone();
    for &l in p.tree.leaves() {
        q.xi[l] -= rng.gen_range(0.0..0.5);
    }
    q.generator = p.generator.shifted(-rng.gen_range(0.0..0.3));
    q
}

/// A second problem with perturbed terminal values and intercepts of either sign.
pub fn perturbed_pair<R: Rng>(rng: &mut R, p: &Problem) -> Problem {
    let mut q = p.clone();
    for &l in p.tree.leaves() {
        q.xi[l] += rng.gen_range(-0.5..0.5);
    }
    q.generator = p.generator.shifted(rng.gen_range(-0.3..0.3));
    q
}
