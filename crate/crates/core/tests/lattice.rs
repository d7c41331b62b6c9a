mod common;

use bsde_tree::lattice::{
    conditional_expectation, enumerate_stopping_times, shift_subtree, stopping_time_count, KernelFamily, Law, NodeSpec,
    Selection, StoppingTime, Tree,
};
use bsde_tree::scenario::validate_scenario;
use bsde_tree::Error;
use common::*;

fn binomial(n: usize) -> Tree {
    Tree::uniform(n, &[vec![1.0], vec![-1.0]]).unwrap()
}

#[test]
fn s1_tree_has_seven_nodes_and_linear_leaves() {
    let t = fixture("s1").tree;
    assert_eq!(t.len(), 7);
    let leaves: Vec<f64> = t.leaves().iter().map(|&l| x1(&t, l)).collect();
    assert_eq!(leaves, vec![2.0, 0.0, 0.0, -2.0]);
}

#[test]
fn s2_tree_has_thirteen_nodes() {
    assert_eq!(fixture("s2").tree.len(), 13);
}

#[test]
fn early_leaf_is_rejected_with_node() {
    let specs = vec![
        NodeSpec { id: 0, parent: None, jump: vec![0.0] },
        NodeSpec { id: 1, parent: Some(0), jump: vec![1.0] },
        NodeSpec { id: 2, parent: Some(0), jump: vec![-1.0] },
        NodeSpec { id: 3, parent: Some(1), jump: vec![1.0] },
        NodeSpec { id: 4, parent: Some(1), jump: vec![-1.0] },
    ];
    let err = Tree::from_nodes(Some(2), &specs).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}

#[test]
fn conditional_expectation_examples() {
    let t = binomial(2);
    let x: Vec<f64> = (0..t.len()).map(|n| x1(&t, n)).collect();
    let half = conditional_expectation(&t, &Law::uniform(&t), &x, 1);
    let lvl: Vec<f64> = t.level(1).iter().map(|&n| x[n]).collect();
    assert_eq!(half, lvl);

    let skew = Law { probs: t.nodes().iter().map(|n| if n.children.is_empty() { vec![] } else { vec![0.6, 0.4] }).collect() };
    let got = conditional_expectation(&t, &skew, &x, 1);
    for (g, &n) in got.iter().zip(t.level(1)) {
        let want = 0.6 * (x[n] + 1.0) + 0.4 * (x[n] - 1.0);
        assert!((g - want).abs() < 1e-12);
        assert!((g - (x[n] + 0.2)).abs() < 1e-12);
    }

    let c = vec![3.5; t.len()];
    assert!(conditional_expectation(&t, &skew, &c, 0).iter().all(|v| (v - 3.5).abs() < 1e-15));
}

#[test]
fn pasting_counts() {
    let p = fixture("s3");
    let t = &p.tree;
    assert_eq!(p.family.enumerate_pastings(t, t.root(), 1000).unwrap().len(), 8);
    assert_eq!(fixture("s1").family.enumerate_pastings(t, t.root(), 1000).unwrap().len(), 1);
    let sub = t.level(1)[0];
    assert_eq!(p.family.enumerate_pastings(t, sub, 1000).unwrap().len(), 2);
}

#[test]
fn pasting_cap_is_refused_with_count() {
    let p = fixture("s3");
    match p.family.enumerate_pastings(&p.tree, 0, 4) {
        Err(Error::CapExceeded { count, cap, .. }) => {
            assert_eq!(count, 8.0);
            assert_eq!(cap, 4);
        }
        other => panic!("expected cap refusal, got {other:?}"),
    }
}

#[test]
fn shift_at_root_is_identity() {
    let t = binomial(2);
    let (s, sh) = shift_subtree(&t, t.root());
    assert_eq!(s.len(), t.len());
    assert_eq!(sh.map, (0..t.len()).collect::<Vec<_>>());
    for n in 0..t.len() {
        assert_eq!(s.node(n).x, t.node(n).x);
    }
}

#[test]
fn shift_at_up_node_is_one_step_binomial() {
    let p = fixture("s1");
    let up = p.tree.level(1)[0];
    assert_eq!(x1(&p.tree, up), 1.0);
    let (sub, sh) = p.shift(up);
    assert_eq!(sub.tree.len(), 3);
    assert_eq!(sub.tree.horizon(), 1);
    let leaves: Vec<f64> = sub.tree.leaves().iter().map(|&l| x1(&sub.tree, l)).collect();
    assert_eq!(leaves, vec![1.0, -1.0]);
    assert_eq!(sh.x0, vec![1.0]);
    assert_eq!(sh.t0, 1);
    // ξ = X₂ becomes 1 + X₁ on the subtree
    for &l in sub.tree.leaves() {
        assert!((sub.xi[l] - (sh.x0[0] + x1(&sub.tree, l))).abs() < 1e-15);
    }
}

/// Every node subset that meets each root-to-leaf path exactly once.
fn brute_stopping_count(t: &Tree) -> usize {
    let n = t.len();
    (0u64..(1 << n))
        .filter(|mask| StoppingTime { stop: (0..n).map(|i| mask >> i & 1 == 1).collect() }.validate(t).is_ok())
        .count()
}

#[test]
fn stopping_time_counts_match_brute_force() {
    for h in 1..=3 {
        let t = binomial(h);
        let all = enumerate_stopping_times(&t, 100_000).unwrap();
        assert_eq!(all.len(), brute_stopping_count(&t), "horizon {h}");
        assert_eq!(all.len() as f64, stopping_time_count(&t, t.root()));
        for s in &all {
            s.validate(&t).unwrap();
        }
    }
    assert_eq!(enumerate_stopping_times(&binomial(1), 10).unwrap().len(), 2);
    assert_eq!(enumerate_stopping_times(&binomial(2), 10).unwrap().len(), 5);
}

#[test]
fn constant_stopping_times_are_present() {
    let t = binomial(2);
    let all = enumerate_stopping_times(&t, 1000).unwrap();
    assert!(all.contains(&StoppingTime::constant(&t, 0)));
    assert!(all.contains(&StoppingTime::constant(&t, 2)));
}

#[test]
fn validation_examples() {
    assert!(validate_scenario(&fixture("s1")).ok());

    let rep = validate_scenario(&fixture("phi_violation"));
    assert!(!rep.ok());
    assert!(rep.failures().iter().any(|e| e.detail.contains("ΔA > Φ")), "{rep:?}");

    let rep = validate_scenario(&fixture("broken_kernel"));
    assert!(!rep.ok());
    assert!(rep.failures().iter().any(|e| e.detail.contains("kernel not a probability")), "{rep:?}");
}

#[test]
fn single_family_has_one_selection() {
    let t = binomial(3);
    let fam = KernelFamily::single(&Law::uniform(&t));
    let all = fam.enumerate_pastings(&t, 0, 10).unwrap();
    assert_eq!(all, vec![Selection(vec![0; t.len()])]);
}
