mod common;

use bsde_tree::bsde::solve_stepwise;
use bsde_tree::calculus::{beta_star, exp_weights, Form};
use bsde_tree::lattice::{enumerate_stopping_times, tower, Selection, StoppingTime};
use bsde_tree::scenario::{validate_scenario, Problem};
use bsde_tree::twobsde::*;
use common::*;

const CAP: usize = 4096;

fn pasting(p: &Problem, k: usize) -> Selection {
    Selection(vec![k; p.tree.len()])
}

fn solve(p: &Problem) -> (ValueFunction, TwoBsdeSolution) {
    let vf = value_function(p).unwrap();
    let beta = default_decomposition_beta(p).unwrap();
    let sol = decompose(p, &vf, beta, CAP, 7).unwrap();
    (vf, sol)
}

fn measure<'a>(sol: &'a TwoBsdeSolution, p: &Problem, k: usize) -> &'a MeasureDecomposition {
    let want = pasting(p, k).0;
    sol.measures
        .iter()
        .find(|m| p.tree.internal().all(|n| m.selection[n] == want[n]))
        .expect("pasting tested")
}

#[test]
fn s3_value_is_point_four() {
    let p = fixture("s3");
    let vf = value_function(&p).unwrap();
    assert!((vf.y[0] - 0.4).abs() < 1e-12);
    // Ŷ_t = X_t + 0.2(2 − t)
    for n in 0..p.tree.len() {
        let t = p.tree.node(n).t as f64;
        assert!((vf.y[n] - (x1(&p.tree, n) + 0.2 * (2.0 - t))).abs() < 1e-12);
    }
    let oracle = value_function_oracle(&p, CAP).unwrap();
    assert!(max_abs_diff(&oracle.y, &vf.y) < 1e-12);
}

#[test]
fn s3_abs_value() {
    let p = fixture("s3_abs");
    let vf = value_function(&p).unwrap();
    assert!((vf.y[0] - 1.2).abs() < 1e-12);
    // at X₁ = ±1 the better kernel pushes away from zero: 0.6·2 + 0.4·0 = 1.2
    for &n in p.tree.level(1) {
        assert!((vf.y[n] - 1.2).abs() < 1e-12);
    }
}

#[test]
fn single_kernel_value_is_member_value() {
    for name in ["s1", "s2", "s1_girsanov"] {
        let p = fixture(name);
        let vf = value_function(&p).unwrap();
        let y = solve_stepwise(&p, &p.law(&p.family.first()), &p.xi, None, None).unwrap().y;
        assert!(max_abs_diff(&vf.y, &y) < 1e-15, "{name}");
    }
}

#[test]
fn intercept_shifts_value_additively() {
    let base = fixture("s3");
    let shifted = s3_with("linear", "[generator]\nfamily = \"affine\"\nintercept = 0.1\n");
    let a = value_function(&base).unwrap();
    let b = value_function(&shifted).unwrap();
    let oracle = value_function_oracle(&shifted, CAP).unwrap();
    for n in 0..base.tree.len() {
        let t = base.tree.node(n).t as f64;
        assert!((b.y[n] - a.y[n] - 0.1 * (2.0 - t)).abs() < 1e-12);
    }
    assert!(max_abs_diff(&oracle.y, &b.y) < 1e-12);
}

#[test]
fn dpp_holds_on_every_fixture() {
    for name in FIXTURES {
        let p = fixture(name);
        let vf = value_function(&p).unwrap();
        let oracle = value_function_oracle(&p, 1_000_000).unwrap();
        assert!(max_abs_diff(&vf.y, &oracle.y) < 1e-9, "{name}");
    }
}

#[test]
fn esssup_identity_on_fixtures() {
    for name in ["s3", "s3_abs", "s3_discounted", "control_mixed", "control_s3"] {
        let p = fixture(name);
        let vf = value_function(&p).unwrap();
        assert!(esssup_identity(&p, &vf, CAP).unwrap() < 1e-9, "{name}");
    }
}

#[test]
fn regularization_is_identity_with_crossings() {
    let p = fixture("s3");
    let vf = value_function(&p).unwrap();
    let (y, rep) = regularize(&p.tree, &vf, 3);
    assert_eq!(y, vf.y);
    assert_eq!(rep.bands.len(), rep.max_count.len());

    assert_eq!(count_down_crossings(&[0.0, 0.5, 1.0, 2.0], -0.5, 0.5), 0);
    assert_eq!(count_down_crossings(&[1.0, -1.0, 1.0, -1.0], -0.5, 0.5), 2);
    assert_eq!(count_down_crossings(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0], -0.5, 0.5), 3);
    assert_eq!(count_down_crossings(&[1.0, 0.0, 1.0], -0.5, 0.5), 0);
}

#[test]
fn supermartingale_property_over_all_stopping_pairs() {
    for name in ["s3", "s3_abs", "s3_discounted"] {
        let p = fixture(name);
        let vf = value_function(&p).unwrap();
        let times = enumerate_stopping_times(&p.tree, 10_000).unwrap();
        for sel in p.family.enumerate_pastings(&p.tree, 0, CAP).unwrap() {
            for sigma in &times {
                for tau in &times {
                    let excess = supermartingale_check(&p, &vf.y, &sel, sigma, tau).unwrap();
                    assert!(excess <= 1e-10, "{name}: {excess}");
                }
            }
        }
    }
}

#[test]
fn supermartingale_endpoint_cases() {
    let p = fixture("s3");
    let vf = value_function(&p).unwrap();
    let zero = StoppingTime::constant(&p.tree, 0);
    let end = StoppingTime::constant(&p.tree, 2);
    for sel in p.family.enumerate_pastings(&p.tree, 0, CAP).unwrap() {
        let y0 = solve_stepwise(&p, &p.law(&sel), &p.xi, None, None).unwrap().y[0];
        // σ = 0, τ = N compares Ŷ₀ with Y^P₀
        let ex = supermartingale_check(&p, &vf.y, &sel, &zero, &end).unwrap();
        assert!((ex - (y0 - vf.y[0])).abs() < 1e-12);
    }
    let q = fixture("s1");
    let vq = value_function(&q).unwrap();
    let ex = supermartingale_check(&q, &vq.y, &q.family.first(), &zero, &end).unwrap();
    assert!(ex.abs() < 1e-14);
}

#[test]
fn s3_decomposition_compensators() {
    let p = fixture("s3");
    let (_, sol) = solve(&p);
    assert!(sol.exhaustive);
    assert_eq!(sol.measures.len(), 8);
    let up = measure(&sol, &p, 1);
    assert!(up.k.iter().all(|v| v.abs() < 1e-10));
    let down = measure(&sol, &p, 0);
    // E^{0.4}[ΔŶ | node] = −0.2 − 0.2
    for n in p.tree.internal() {
        assert!((down.dk[n] - 0.4).abs() < 1e-10);
    }
    for &l in p.tree.leaves() {
        assert!((down.k[l] - 0.8).abs() < 1e-10);
    }
    for m in &sol.measures {
        assert!(m.reflection_gap <= 1e-9);
        assert_eq!(m.k[0], 0.0);
        for n in 1..p.tree.len() {
            let parent = p.tree.node(n).parent.unwrap();
            assert!(m.k[n] >= m.k[parent] - 1e-15);
        }
    }
}

#[test]
fn single_kernel_decomposition_has_no_compensator() {
    let p = fixture("s2");
    let (_, sol) = solve(&p);
    assert_eq!(sol.measures.len(), 1);
    assert!(sol.measures[0].dk.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn decompositions_at_two_betas_agree() {
    for name in ["s3", "s3_abs", "s3_discounted", "control_mixed", "witness_square"] {
        let p = fixture(name);
        let vf = value_function(&p).unwrap();
        let bs = beta_star(p.phi, 1e-12).unwrap();
        let bh = p.beta_hat();
        let a = decompose(&p, &vf, bs + 0.25 * (bh - bs), CAP, 1).unwrap();
        let b = decompose(&p, &vf, bs + 0.75 * (bh - bs), CAP, 1).unwrap();
        assert!(decomposition_distance(&p, &a, &b) <= 1e-9, "{name}");
    }
}

#[test]
fn sampled_pastings_are_recorded() {
    let p = fixture("s3");
    let vf = value_function(&p).unwrap();
    let sol = decompose(&p, &vf, default_decomposition_beta(&p).unwrap(), 4, 11).unwrap();
    assert!(!sol.exhaustive);
    assert_eq!(sol.cap, 4);
    assert_eq!(sol.seed, 11);
    assert_eq!(sol.measures.len(), SAMPLED_PASTINGS + 1);
    assert_eq!(sol.measures[0].selection, vf.argmax);
    let again = decompose(&p, &vf, sol.beta, 4, 11).unwrap();
    assert_eq!(again, sol);
}

#[test]
fn plain_minimality_vanishes() {
    for name in ["s3", "s3_abs", "s1", "s3_discounted"] {
        let p = fixture(name);
        let (vf, sol) = solve(&p);
        let rep = minimality_plain(&p, &vf.y).unwrap();
        assert!(rep.applicable);
        assert!(rep.max_abs <= 1e-9, "{name}: {rep:?}");
        assert!(rep.values.iter().all(|v| *v >= -1e-12));
        let oracle = minimality_plain_oracle(&p, &sol);
        assert!(max_abs_diff(&oracle, &rep.values) < 1e-9, "{name}");
    }
}

#[test]
fn weighted_minimality() {
    let p = fixture("s3_discounted");
    check_intrinsic(&p).unwrap();
    let (vf, sol) = solve(&p);
    let rep = minimality_weighted(&p, &sol).unwrap();
    assert!(rep.applicable);
    assert!(rep.max_abs <= 1e-9, "{rep:?}");
    assert!((vf.y[0] - 0.588).abs() < 1e-12);

    // zero generator with intrinsic data: weights ≡ 1, same as the plain values
    let z = s3_with("abs", "[intrinsic]\ndelta = 0.1\ntheta = 1.0\n");
    let (zvf, zsol) = solve(&z);
    let w = minimality_weighted(&z, &zsol).unwrap();
    let plain = minimality_plain(&z, &zvf.y).unwrap();
    assert!(max_abs_diff(&w.values, &plain.values) < 1e-12);

    let single = s1_with("[intrinsic]\ndelta = 0.1\ntheta = 1.0\n");
    let (_, ssol) = solve(&single);
    assert!(minimality_weighted(&single, &ssol).unwrap().max_abs < 1e-12);

    let undeclared = fixture("s3");
    let (_, usol) = solve(&undeclared);
    assert!(!minimality_weighted(&undeclared, &usol).unwrap().applicable);
}

#[test]
fn common_second_moment_family_aggregates() {
    let p = fixture("witness_linear");
    let (_, sol) = solve(&p);
    let rep = aggregation_diagnostic(&p, &sol);
    assert_eq!(rep.form, Form::X);
    assert!(rep.aggregable, "{rep:?}");
    assert!(rep.residual < 1e-10);
    assert!(sol.z_hat.is_some());
}

/// `Z^P` at the root by direct regression of the children of `Ŷ⁺` on `ΔX`.
fn root_z(p: &Problem, y: &[f64], k: &[f64]) -> f64 {
    let t = &p.tree;
    let ch = t.children(0);
    let mean: f64 = ch.iter().zip(k).map(|(&c, q)| q * y[c]).sum();
    let cov: f64 = ch.iter().zip(k).map(|(&c, q)| q * (y[c] - mean) * t.node(c).jump[0]).sum();
    let var: f64 = ch.iter().zip(k).map(|(&c, q)| q * t.node(c).jump[0].powi(2)).sum();
    cov / var
}

#[test]
fn skewed_family_has_witness() {
    let p = fixture("witness_square");
    let (vf, sol) = solve(&p);
    let rep = aggregation_diagnostic(&p, &sol);
    assert!(!rep.aggregable);
    let w = rep.witness.expect("witness");
    assert_eq!(w.node, 0);
    assert!(w.distance > 1e-3);
    assert!(sol.z_hat.is_none());
    // the three root regressions differ: Ẑ cannot match all of them
    let zs: Vec<f64> = p.family.kernels[0].iter().map(|k| root_z(&p, &vf.y, k)).collect();
    assert!((zs[1] - zs[2]).abs() > 0.1, "{zs:?}");
}

#[test]
fn single_measure_aggregates() {
    let p = fixture("s1");
    let (_, sol) = solve(&p);
    assert!(aggregation_diagnostic(&p, &sol).aggregable);
}

#[test]
fn binomial_x_form_family_is_rejected() {
    let p = fixture("s3_xform_square");
    let rep = validate_scenario(&p);
    assert!(rep.failures().iter().any(|e| e.detail.contains("not a martingale law for X")), "{rep:?}");
}

/// `φ` by enumeration: at each node the best pasting of `E[𝓔ξ² | node]`,
/// then the running max along paths, in expectation, maximized over pastings.
fn phi_oracle(p: &Problem, beta_hat: f64) -> f64 {
    let t = &p.tree;
    let e = exp_weights(t, beta_hat, &p.da());
    let h: Vec<f64> = (0..t.len()).map(|n| e[n] * p.xi[n] * p.xi[n]).collect();
    let sels = p.family.enumerate_pastings(t, 0, CAP).unwrap();
    let mut best = vec![f64::NEG_INFINITY; t.len()];
    for s in &sels {
        let v = tower(t, &p.law(s), &h);
        for n in 0..t.len() {
            best[n] = best[n].max(v[n]);
        }
    }
    sels.iter()
        .map(|s| {
            let reach = p.law(s).reach(t);
            t.leaves().iter().map(|&l| reach[l] * t.path(l).iter().map(|&n| best[n]).fold(0.0, f64::max)).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn norm_bounds() {
    let p = fixture("s3");
    let (_, sol) = solve(&p);
    let rep = norm_bound_check(&p, &sol, sol.beta, p.beta_hat());
    assert!(rep.pass, "{rep:?}");
    assert!((rep.phi - phi_oracle(&p, p.beta_hat())).abs() < 1e-12);
    assert!(rep.k_sqrt_weighted > 0.0);

    let mut scaled = p.clone();
    scaled.xi.iter_mut().for_each(|v| *v *= 3.0);
    let (_, ssol) = solve(&scaled);
    let srep = norm_bound_check(&scaled, &ssol, ssol.beta, scaled.beta_hat());
    for (a, b) in [(rep.phi, srep.phi), (rep.s_hat, srep.s_hat), (rep.lhs, srep.lhs), (rep.rhs, srep.rhs)] {
        assert!((b - 9.0 * a).abs() < 1e-9 * b.max(1.0));
    }

    let mut zero = p.clone();
    zero.xi.iter_mut().for_each(|v| *v = 0.0);
    let (_, zsol) = solve(&zero);
    let zrep = norm_bound_check(&zero, &zsol, zsol.beta, zero.beta_hat());
    assert!(zrep.pass);
    assert_eq!([zrep.phi, zrep.lhs, zrep.s_hat], [0.0; 3]);

    for name in FIXTURES {
        let q = fixture(name);
        let (_, qs) = solve(&q);
        assert!(norm_bound_check(&q, &qs, qs.beta, q.beta_hat()).pass, "{name}");
    }
}

#[test]
fn invariance_on_every_node() {
    for name in ["s3", "s3_abs", "s3_discounted", "s1", "control_mixed"] {
        let p = fixture(name);
        let vf = value_function(&p).unwrap();
        let beta = default_decomposition_beta(&p).unwrap();
        for n in p.tree.internal() {
            let rep = invariance_check(&p, &vf, n, beta, CAP, 3).unwrap();
            assert!(rep.pass, "{name} at {n}: {rep:?}");
        }
    }
}

#[test]
fn single_kernel_invariance_is_tower() {
    let p = fixture("s1");
    let vf = value_function(&p).unwrap();
    let law = p.law(&p.family.first());
    assert!(max_abs_diff(&vf.y, &tower(&p.tree, &law, &p.xi)) < 1e-15);
    for &n in p.tree.level(1) {
        let (sub, shift) = p.shift(n);
        let sv = value_function(&sub).unwrap();
        for (new, &old) in shift.map.iter().enumerate() {
            assert!((sv.y[new] - vf.y[old]).abs() < 1e-15);
        }
    }
}

#[test]
fn optimisation_link_examples() {
    let p = fixture("s3");
    let vf = value_function(&p).unwrap();
    let link = optimisation_link(&p, &vf, CAP, 0).unwrap();
    assert!(link.pass);
    assert!((link.value - 0.4).abs() < 1e-12);
    for n in p.tree.internal() {
        assert_eq!(link.optimizer[n], 1, "kernel 1 has up-probability 0.6");
    }

    let shifted = s3_with("linear", "[generator]\nfamily = \"affine\"\nintercept = 0.1\n");
    let sv = value_function(&shifted).unwrap();
    let sl = optimisation_link(&shifted, &sv, CAP, 0).unwrap();
    assert!(sl.pass);
    assert_eq!(sl.optimizer, link.optimizer);
    assert!((sl.value - link.value - 0.2).abs() < 1e-12);

    let q = fixture("s2");
    let qv = value_function(&q).unwrap();
    let ql = optimisation_link(&q, &qv, CAP, 0).unwrap();
    assert!(ql.pass && (ql.value - ql.optimizer_value).abs() < 1e-15);
}

#[test]
fn second_order_comparison_on_ordered_data() {
    let p = fixture("s3_abs");
    let mut lower = s3_with("abs", "[generator]\nfamily = \"affine\"\nintercept = -0.05\n");
    for &l in lower.tree.leaves() {
        lower.xi[l] -= 0.1 * x1(&lower.tree, l).abs();
    }
    let a = value_function(&p).unwrap();
    let b = value_function(&lower).unwrap();
    assert!(a.y.iter().zip(&b.y).all(|(x, y)| y <= &(x + 1e-12)));
}
