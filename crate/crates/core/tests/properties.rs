mod common;

use bsde_tree::bsde::{linear_bsde_closed_form, solve_bsde_picard, solve_bsde_stepwise, solve_rbsde};
use bsde_tree::calculus::{
    compensator, girsanov, integral_jump, jump_increment, lhat_norm_sq, orth_decompose_jump, orth_decompose_x,
    stieltjes_exponential, Form,
};
use bsde_tree::control::*;
use bsde_tree::generator::{Action, Affine, NodeGen};
use bsde_tree::lattice::{conditional_expectation, paste, tower, Law, Selection};
use bsde_tree::random::{random_problem, RandomGen, RandomSpec};
use bsde_tree::scenario::Problem;
use bsde_tree::twobsde::value_function;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spec(horizon: usize, branching: usize, kernels: usize, form: Form, generator: RandomGen) -> RandomSpec {
    RandomSpec { horizon, branching, kernels, form, generator, ..RandomSpec::default() }
}

fn random_selection(r: &mut ChaCha8Rng, p: &Problem) -> Selection {
    Selection((0..p.tree.len()).map(|n| if p.tree.is_leaf(n) { 0 } else { r.gen_range(0..p.family.kernels[n].len()) }).collect())
}

fn leaf_values(r: &mut ChaCha8Rng, p: &Problem) -> Vec<f64> {
    (0..p.tree.len()).map(|n| if p.tree.is_leaf(n) { r.gen_range(-2.0..2.0) } else { 0.0 }).collect()
}

/// `E[h]` over leaves, by leaf probabilities.
fn leaf_mean(p: &Problem, law: &Law, h: &[f64]) -> f64 {
    let reach = law.reach(&p.tree);
    p.tree.leaves().iter().map(|&l| reach[l] * h[l]).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn tower_property(seed in any::<u64>(), h in 2usize..=4, b in 2usize..=3) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &spec(h, b, 1, Form::Jump, RandomGen::Zero));
        let law = p.law(&p.family.first());
        let v = tower(&p.tree, &law, &p.xi);
        prop_assert!((v[0] - leaf_mean(&p, &law, &p.xi)).abs() < 1e-12);
        for t in 0..h - 1 {
            let two = conditional_expectation(&p.tree, &law, &v, t);
            let direct: Vec<f64> = p.tree.level(t).iter().map(|&n| {
                let reach = law.reach_from(&p.tree, n);
                p.tree.leaves().iter().map(|&l| reach[l] * p.xi[l]).sum::<f64>()
            }).collect();
            prop_assert!(max_abs_diff(&two, &direct) < 1e-12);
        }
    }

    #[test]
    fn pasting_stays_in_family(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &spec(3, 2, 3, Form::Jump, RandomGen::Affine));
        let a = random_selection(&mut r, &p);
        let b = random_selection(&mut r, &p);
        let switch: Vec<bool> = (0..p.tree.len()).map(|_| r.gen_bool(0.5)).collect();
        let c = paste(&a, &b, &switch);
        let law = p.law(&c);
        let reach = law.reach(&p.tree);
        prop_assert!((p.tree.leaves().iter().map(|&l| reach[l]).sum::<f64>() - 1.0).abs() < 1e-12);
        for n in p.tree.internal() {
            prop_assert_eq!(c.0[n], if switch[n] { b.0[n] } else { a.0[n] });
        }
        // the value function dominates every pasted member
        let vf = value_function(&p).unwrap();
        let y = solve_bsde_stepwise(&p, &c).unwrap().y;
        prop_assert!(y.iter().zip(&vf.y).all(|(m, v)| *m <= v + 1e-10));
    }

    #[test]
    fn shift_consistency(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &spec(3, 2, 2, Form::Jump, RandomGen::Affine));
        let vf = value_function(&p).unwrap();
        let node = r.gen_range(1..p.tree.len() - p.tree.leaves().len());
        let (sub, shift) = p.shift(node);
        let sv = value_function(&sub).unwrap();
        for (new, &old) in shift.map.iter().enumerate() {
            prop_assert!((sv.y[new] - vf.y[old]).abs() < 1e-10);
        }
    }

    #[test]
    fn jump_isometry(seed in any::<u64>(), h in 1usize..=4, b in 2usize..=3, dim in 1usize..=2) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &RandomSpec { dim, ..spec(h, b, 1, Form::Jump, RandomGen::Zero) });
        let law = p.law(&p.family.first());
        let chars = compensator(&p.tree, &law, &p.dc);
        let u: Vec<Vec<f64>> = (0..p.tree.len())
            .map(|n| if p.tree.is_leaf(n) { vec![] } else { (0..chars[n].support_len()).map(|_| r.gen_range(-1.0..1.0)).collect() })
            .collect();
        let m = integral_jump(&p.tree, &chars, &u);
        let sq: Vec<f64> = m.iter().map(|v| v * v).collect();
        let lhs = leaf_mean(&p, &law, &sq);
        let reach = law.reach(&p.tree);
        let rhs: f64 = p.tree.internal().map(|n| reach[n] * lhat_norm_sq(&chars[n], &u[n]) * chars[n].dc).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn jump_decomposition_is_orthogonal(seed in any::<u64>(), h in 1usize..=3, b in 2usize..=4, zero in any::<bool>()) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &RandomSpec { zero_branch: zero, ..spec(h, b, 1, Form::Jump, RandomGen::Zero) });
        let law = p.law(&p.family.first());
        let chars = compensator(&p.tree, &law, &p.dc);
        let m = tower(&p.tree, &law, &leaf_values(&mut r, &p));
        let dec = orth_decompose_jump(&p.tree, &chars, &m).unwrap();
        let rebuilt = integral_jump(&p.tree, &chars, &dec.u);
        for n in 0..p.tree.len() {
            prop_assert!((m[0] + rebuilt[n] + dec.n[n] - m[n]).abs() < 1e-10);
        }
        for node in p.tree.internal() {
            let kc = &chars[node];
            let ch = p.tree.children(node);
            let dn: Vec<f64> = ch.iter().map(|&c| dec.n[c] - dec.n[node]).collect();
            for j in 0..kc.support_len() {
                let s: f64 = (0..ch.len()).filter(|&i| kc.class[i] == Some(j)).map(|i| kc.p[i] * dn[i]).sum();
                prop_assert!(s.abs() < 1e-10);
            }
            let up: Vec<f64> = (0..kc.support_len()).map(|_| r.gen_range(-1.0..1.0)).collect();
            let cross: f64 = (0..ch.len()).map(|i| kc.p[i] * dn[i] * jump_increment(kc, i, &up)).sum();
            prop_assert!(cross.abs() < 1e-10);
        }
    }

    #[test]
    fn x_decomposition_is_orthogonal(seed in any::<u64>(), h in 1usize..=3, b in 2usize..=4) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &spec(h, b, 1, Form::X, RandomGen::Zero));
        let law = p.law(&p.family.first());
        let chars = compensator(&p.tree, &law, &p.dc);
        let m = tower(&p.tree, &law, &leaf_values(&mut r, &p));
        let dec = orth_decompose_x(&p.tree, &chars, &m).unwrap();
        for node in p.tree.internal() {
            let ch = p.tree.children(node);
            let s: f64 = ch.iter().enumerate().map(|(i, &c)| chars[node].p[i] * (dec.n[c] - dec.n[node]) * p.tree.node(c).jump[0]).sum();
            prop_assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn exponential_square(w in prop::collection::vec(-0.9f64..2.0, 1..12)) {
        let e = stieltjes_exponential(1.0, &w).unwrap();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v + v * v).collect();
        let e2 = stieltjes_exponential(1.0, &w2).unwrap();
        for (a, b) in e.iter().zip(&e2) {
            prop_assert!((a * a - b).abs() < 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn finite_variation_exponential_identity(
        gamma in 0.0f64..3.0,
        da in prop::collection::vec(0.0f64..1.0, 2..10),
        dv_seed in any::<u64>(),
        t_frac in 0.0f64..1.0,
    ) {
        let mut r = rng(dv_seed);
        let n = da.len();
        let mut v = vec![0.0; n + 1];
        for s in 1..=n {
            v[s] = v[s - 1] + r.gen_range(0.0..2.0);
        }
        let e = stieltjes_exponential(gamma, &da).unwrap();
        let t = (t_frac * n as f64) as usize;
        let lhs: f64 = (t + 1..=n).map(|s| e[s] * (v[s] - v[s - 1])).sum();
        let rhs = e[t] * (v[n] - v[t]) + gamma * (t + 1..=n).map(|u| e[u - 1] * (v[n] - v[u - 1]) * da[u - 1]).sum::<f64>();
        prop_assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn inverse_exponential_bound(seed in any::<u64>(), h in 1usize..=3, b in 2usize..=3) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, &spec(h, b, 1, Form::Jump, RandomGen::Zero));
        let law = p.law(&p.family.first());
        let chars = compensator(&p.tree, &law, &p.dc);
        let rho: Vec<Vec<f64>> = (0..p.tree.len())
            .map(|n| if p.tree.is_leaf(n) { vec![] } else { (0..chars[n].support_len()).map(|_| r.gen_range(-0.6..0.6)).collect() })
            .collect();
        let Ok((density, _)) = girsanov(&p.tree, &law, &p.dc, None, Some(&rho)) else {
            return Ok(());
        };
        // log D = Σ log E[(1 + ΔM)⁻¹ | node] along the path, maximized over paths
        let mut log_d = vec![0.0; p.tree.len()];
        for n in 0..p.tree.len() {
            let ch = p.tree.children(n);
            let ek: f64 = ch.iter().enumerate().map(|(i, &c)| chars[n].p[i] * density[n] / density[c]).sum();
            for &c in ch {
                log_d[c] = log_d[n] + ek.ln();
            }
        }
        let bound = 4.0 * p.tree.leaves().iter().map(|&l| log_d[l]).fold(f64::NEG_INFINITY, f64::max).exp();
        for n in p.tree.internal() {
            let reach = law.reach_from(&p.tree, n);
            let lhs: f64 = p.tree.leaves().iter()
                .filter(|&&l| reach[l] > 0.0)
                .map(|&l| {
                    let path = p.tree.path(l);
                    let worst = path.iter().skip_while(|&&u| u != n).map(|&u| density[n] / density[u]).fold(0.0, f64::max);
                    reach[l] * worst
                })
                .sum();
            prop_assert!(lhs <= bound + 1e-12, "{} > {}", lhs, bound);
        }
    }

    #[test]
    fn stepwise_equals_picard(seed in any::<u64>(), x in any::<bool>(), clip in any::<bool>()) {
        let mut r = rng(seed);
        let form = if x { Form::X } else { Form::Jump };
        let g = if clip { RandomGen::Clip } else { RandomGen::Affine };
        let p = random_problem(&mut r, &spec(3, 3, 1, form, g));
        let sel = p.family.first();
        let a = solve_bsde_stepwise(&p, &sel).unwrap();
        let b = solve_bsde_picard(&p, &sel).unwrap();
        prop_assert!(max_abs_diff(&a.y, &b.y) < 1e-10);
        let mt = p.mtilde(p.beta_hat());
        for ratio in &b.ratios {
            prop_assert!(*ratio <= mt + 0.05, "ratio {} vs M̃ {}", ratio, mt);
        }
    }

    #[test]
    fn girsanov_matches_linear_bsde(seed in any::<u64>(), x in any::<bool>()) {
        let mut r = rng(seed);
        let form = if x { Form::X } else { Form::Jump };
        let mut p = random_problem(&mut r, &spec(3, 3, 1, form, RandomGen::Zero));
        let law = p.law(&p.family.first());
        let mut eta = vec![Vec::new(); p.tree.len()];
        let mut rho = vec![Vec::new(); p.tree.len()];
        for n in p.tree.internal() {
            let a = Affine {
                g0: 0.0,
                y: 0.0,
                ybar: 0.0,
                eta: if x { vec![r.gen_range(-0.2..0.2)] } else { Vec::new() },
                rho: if x { Vec::new() } else { (0..p.tree.node(n).support.len()).map(|_| r.gen_range(-0.2..0.2)).collect() },
            };
            eta[n] = a.eta.clone();
            rho[n] = a.rho.clone();
            p.generator.nodes[n] = NodeGen::Affine(a);
        }
        let y = solve_bsde_stepwise(&p, &p.family.first()).unwrap().y;
        let closed = if x {
            linear_bsde_closed_form(&p, &law, Some(&eta), None, &p.xi)
        } else {
            linear_bsde_closed_form(&p, &law, None, Some(&rho), &p.xi)
        };
        let Ok(closed) = closed else { return Ok(()) };
        prop_assert!(max_abs_diff(&y, &closed) < 1e-10);
    }

    #[test]
    fn skorokhod_condition_is_exact(seed in any::<u64>(), x in any::<bool>()) {
        let mut r = rng(seed);
        let form = if x { Form::X } else { Form::Jump };
        let p = random_problem(&mut r, &spec(3, 2, 1, form, RandomGen::Affine));
        let law = p.law(&p.family.first());
        let l: Vec<f64> = (0..p.tree.len()).map(|_| r.gen_range(-1.5..1.0)).collect();
        let sol = solve_rbsde(&p, &law, &l).unwrap();
        for n in p.tree.internal() {
            prop_assert!(sol.y[n] >= l[n] - 1e-12);
            prop_assert!(sol.dk[n] >= 0.0);
            prop_assert!(((sol.y[n] - l[n]) * sol.dk[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn hamiltonian_matches_enumeration(seed in any::<u64>(), sup in any::<bool>()) {
        let mut r = rng(seed);
        let mut p = random_problem(&mut r, &RandomSpec { zero_branch: true, ..spec(2, 3, 2, Form::Jump, RandomGen::Zero) });
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let d = r.gen_range(0.0..0.2);
        let actions: Vec<Vec<Action>> = (0..p.tree.len())
            .map(|n| {
                if p.tree.is_leaf(n) {
                    return Vec::new();
                }
                let s = p.tree.node(n).support.len();
                labels.iter().map(|_| Action {
                    g: r.gen_range(-0.3..0.3),
                    gamma: (0..s).map(|_| r.gen_range(0.9..1.1)).collect(),
                    beta: Vec::new(),
                }).collect()
            })
            .collect();
        let cs = ControlSpec { labels, sup, discount: vec![d; p.tree.len()], actions };
        prop_assume!(check_tilts(&p, &cs).is_ok());
        p.generator = hamiltonian_generator(&cs);
        p.control = Some(cs);
        for s in p.family.enumerate_pastings(&p.tree, 0, 1 << 12).unwrap() {
            let law = p.law(&s);
            let (v, sol) = control_value(&p, &law).unwrap();
            let (best, _) = enumerate_policies_oracle(&p, &law, 1 << 12).unwrap();
            prop_assert!((v - best).abs() < 1e-10, "{} vs {}", v, best);
            let pol = extract_optimal_policy(&p, &law, &sol).unwrap();
            let a = discounted_payoff(&p, &law, &pol.policy).unwrap();
            let b = discounted_payoff_density(&p, &law, &pol.policy).unwrap();
            prop_assert!((a - v).abs() < 1e-10 && (a - b).abs() < 1e-12);
        }
        let rv = robust_value(&p, 1 << 12).unwrap();
        let (ov, _, _) = robust_value_oracle(&p, 1 << 12).unwrap();
        prop_assert!((rv.value - ov).abs() < 1e-10);
    }
}
