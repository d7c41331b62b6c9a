mod common;

use bsde_tree::control::*;
use bsde_tree::lattice::Selection;
use bsde_tree::scenario::Problem;
use common::*;

const CAP: usize = 1 << 16;

/// Tilted trinomial/binomial step: jumps scaled by `c + l·x`, zero child absorbs.
fn tilt(p: &Problem, n: usize, base: &[f64], g: &[f64]) -> Vec<f64> {
    let t = &p.tree;
    let ch = t.children(n);
    let mut q: Vec<f64> = ch.iter().zip(base).map(|(&c, b)| {
        let x = t.node(c).jump[0];
        if x == 0.0 { 0.0 } else { b * (g[0] + g[1] * x) }
    }).collect();
    let rest = 1.0 - q.iter().sum::<f64>();
    if let Some(i) = ch.iter().position(|&c| t.node(c).jump[0] == 0.0) {
        q[i] = rest;
    }
    q
}

/// Discounted value of `(pasting, policy)` with actions given as `(g, [c, l])`.
fn brute_value(p: &Problem, sel: &[usize], pol: &[usize], acts: &[(f64, [f64; 2])], d: f64) -> f64 {
    let t = &p.tree;
    let mut v = p.xi.clone();
    for n in (0..t.len()).rev().filter(|&n| !t.is_leaf(n)) {
        let (g, gm) = acts[pol[n]];
        let q = tilt(p, n, &p.family.kernels[n][sel[n]], &gm);
        let cont: f64 = t.children(n).iter().zip(&q).map(|(&c, w)| w * v[c]).sum();
        v[n] = g + cont / (1.0 + d);
    }
    v[0]
}

/// Exhaustive `sup_P ext_α` over pastings and Markov policies.
fn brute_robust(p: &Problem, acts: &[(f64, [f64; 2])], d: f64, sup: bool) -> f64 {
    let sels = p.family.enumerate_pastings(&p.tree, 0, CAP).unwrap();
    let pols = enumerate_policies(p, CAP).unwrap();
    sels.iter()
        .map(|s| {
            let vals = pols.iter().map(|a| brute_value(p, &s.0, a, acts, d));
            if sup { vals.fold(f64::NEG_INFINITY, f64::max) } else { vals.fold(f64::INFINITY, f64::min) }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn single_action_is_plain_bsde() {
    let p = fixture("control_discount");
    let spec = p.control.as_ref().unwrap();
    assert_eq!(spec.labels.len(), 1);
    let (v, _) = control_value(&p, &p.law(&p.family.first())).unwrap();
    assert!((v - 1.0 / 1.21).abs() < 1e-12);
    assert_eq!(enumerate_policies(&p, CAP).unwrap().len(), 1);
}

#[test]
fn dominant_running_reward() {
    let p = fixture("control_dominance");
    let law = p.law(&p.family.first());
    let (v, sol) = control_value(&p, &law).unwrap();
    assert!((v - 0.2).abs() < 1e-12);
    let rep = extract_optimal_policy(&p, &law, &sol).unwrap();
    for n in p.tree.internal() {
        assert_eq!(rep.labels[n], "b");
        assert!((rep.gaps[n] - 0.1).abs() < 1e-12);
    }
}

#[test]
fn tilt_example_prefers_plus() {
    let p = fixture("control_tilt");
    let law = p.law(&p.family.first());
    let (v, sol) = control_value(&p, &law).unwrap();
    assert!((v - 1.0).abs() < 1e-12);
    let rep = extract_optimal_policy(&p, &law, &sol).unwrap();
    for n in p.tree.internal() {
        assert_eq!(rep.labels[n], "+");
    }
    // under "+" the up-probability is 0.75 at every node
    let q = controlled_law(&p, &law, &rep.policy).unwrap();
    for n in p.tree.internal() {
        assert!((q.probs[n][0] - 0.75).abs() < 1e-12);
    }
    let (best, pol) = enumerate_policies_oracle(&p, &law, CAP).unwrap();
    assert!((best - 1.0).abs() < 1e-12);
    assert_eq!(pol, rep.policy);
}

#[test]
fn payoff_routes_agree() {
    for name in CONTROL_FIXTURES {
        let p = fixture(name);
        for s in p.family.enumerate_pastings(&p.tree, 0, CAP).unwrap() {
            let law = p.law(&s);
            for pol in enumerate_policies(&p, CAP).unwrap() {
                let a = discounted_payoff(&p, &law, &pol).unwrap();
                let b = discounted_payoff_density(&p, &law, &pol).unwrap();
                assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn hamiltonian_value_matches_policy_enumeration() {
    for name in CONTROL_FIXTURES {
        let p = fixture(name);
        for s in p.family.enumerate_pastings(&p.tree, 0, CAP).unwrap() {
            let law = p.law(&s);
            let (v, sol) = control_value(&p, &law).unwrap();
            let (best, _) = enumerate_policies_oracle(&p, &law, CAP).unwrap();
            assert!((v - best).abs() < 1e-10, "{name}: {v} vs {best}");
            let rep = extract_optimal_policy(&p, &law, &sol).unwrap();
            assert!((discounted_payoff(&p, &law, &rep.policy).unwrap() - v).abs() < 1e-10);
        }
    }
}

#[test]
fn robust_value_on_mixed_family() {
    let p = fixture("control_mixed");
    let acts = [(0.05, [1.0, 0.0]), (0.0, [1.0, 0.3]), (0.02, [1.0, -0.2])];
    let want = brute_robust(&p, &acts, 0.05, true);
    let rv = robust_value(&p, CAP).unwrap();
    assert!((rv.value - want).abs() < 1e-10, "{} vs {want}", rv.value);
    assert!((rv.value - 1.02519).abs() < 1e-5);
    let (ov, osel, opol) = robust_value_oracle(&p, CAP).unwrap();
    assert!((ov - rv.value).abs() < 1e-10);
    let law = p.law(&Selection(osel));
    assert!((discounted_payoff(&p, &law, &opol).unwrap() - ov).abs() < 1e-12);
}

#[test]
fn robust_value_on_s3_cost() {
    let p = fixture("control_s3");
    let acts = [(0.0, [1.0, 0.0]), (0.1, [1.0, 0.0])];
    let want = brute_robust(&p, &acts, 0.05, false);
    let rv = robust_value(&p, CAP).unwrap();
    assert!((rv.value - want).abs() < 1e-10, "{} vs {want}", rv.value);
    assert!((rv.value - 0.36281).abs() < 1e-5);
    // minimizing cost picks the cheaper action everywhere
    assert!(p.tree.internal().all(|n| rv.policy[n] == 0));
    assert!(!rv.policies_disagree);
}

#[test]
fn uniform_reward_shift_keeps_policy() {
    for name in ["control_mixed", "control_tilt", "control_dominance"] {
        let p = fixture(name);
        let mut q = p.clone();
        let spec = q.control.as_mut().unwrap();
        spec.actions.iter_mut().flatten().for_each(|a| a.g += 0.3);
        q.generator = hamiltonian_generator(q.control.as_ref().unwrap());
        let law = p.law(&p.family.first());
        let (v, sol) = control_value(&p, &law).unwrap();
        let (w, qsol) = control_value(&q, &law).unwrap();
        let a = extract_optimal_policy(&p, &law, &sol).unwrap();
        let b = extract_optimal_policy(&q, &law, &qsol).unwrap();
        assert_eq!(a.policy, b.policy, "{name}");
        let d = p.control.as_ref().unwrap().discount[0];
        let shift = 0.3 + 0.3 / (1.0 + d);
        assert!((w - v - shift).abs() < 1e-12, "{name}: {w} vs {v}");
    }
}

#[test]
fn tilts_are_checked() {
    for name in CONTROL_FIXTURES {
        let p = fixture(name);
        check_tilts(&p, p.control.as_ref().unwrap()).unwrap();
    }
    let mut p = fixture("control_tilt");
    let spec = p.control.as_mut().unwrap();
    for n in 0..spec.actions.len() {
        for a in spec.actions[n].iter_mut().filter(|a| !a.gamma.is_empty()) {
            a.gamma.iter_mut().for_each(|g| *g *= 1.2);
        }
    }
    let spec = p.control.clone().unwrap();
    assert!(check_tilts(&p, &spec).is_err());
}
