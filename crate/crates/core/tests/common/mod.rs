#![allow(dead_code)]

use bsde_tree::lattice::{Law, Tree};
use bsde_tree::scenario::Problem;
use std::path::PathBuf;

pub const FIXTURES: &[&str] = &[
    "s1",
    "s2",
    "s3",
    "s3_abs",
    "s3_discounted",
    "s1_girsanov",
    "s1_obstacle",
    "control_tilt",
    "control_dominance",
    "control_discount",
    "control_mixed",
    "control_s3",
    "witness_square",
    "witness_linear",
];

pub const CONTROL_FIXTURES: &[&str] = &["control_tilt", "control_dominance", "control_discount", "control_mixed", "control_s3"];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(format!("{name}.toml"))
}

pub fn fixture(name: &str) -> Problem {
    Problem::load(&fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// A two-step ±1 binomial under the uniform kernel with the given extra TOML.
pub fn s1_with(extra: &str) -> Problem {
    let text = format!(
        "name = \"S1-variant\"\n[tree]\nhorizon = 2\nbranches = [1.0, -1.0]\n[payoff]\nkind = \"linear\"\n{extra}"
    );
    Problem::parse(&text).unwrap()
}

/// `E[h | node]` by explicit enumeration of the leaves below each node.
pub fn brute_conditional(tree: &Tree, law: &Law, h: &[f64]) -> Vec<f64> {
    let reach = law.reach(tree);
    (0..tree.len())
        .map(|n| {
            let leaves: Vec<usize> = tree.leaves().iter().copied().filter(|&l| tree.is_ancestor_or_self(n, l)).collect();
            let mass: f64 = leaves.iter().map(|&l| reach[l]).sum();
            leaves.iter().map(|&l| reach[l] * h[l]).sum::<f64>() / mass
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn x1(tree: &Tree, n: usize) -> f64 {
    tree.node(n).x[0]
}

/// The two-kernel S3 binomial with the given payoff kind and extra TOML.
pub fn s3_with(payoff: &str, extra: &str) -> Problem {
    let text = format!(
        "name = \"S3-variant\"\n[tree]\nhorizon = 2\nbranches = [1.0, -1.0]\n[kernels]\ndefault = [[0.4, 0.6], [0.6, 0.4]]\n[payoff]\nkind = \"{payoff}\"\n{extra}"
    );
    Problem::parse(&text).unwrap()
}
