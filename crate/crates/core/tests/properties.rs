mod common;

use common::*;
use hybrid_ad::analysis::{compare_report, finite_difference, identifiability_test, FdScheme};
use hybrid_ad::diagram::agdm_diff;
use hybrid_ad::models;
use hybrid_ad::sim::{flatten, impact_update_detailed, integrate, sensitivity_extend, ImpactBranch, ImpactSurface, OdeModel, SimConfig};
use hybrid_ad::solvers::{implicit_sensitivity, newton, newton_jet, ImplicitSystem};
use hybrid_ad::tape::{forward_gradient, reverse_gradient, tape_jet_eval, Cmp};
use hybrid_ad::{ElementaryFn, Jet, ParamExpr, ParamValues, TapeBuilder};
use proptest::prelude::*;

fn jet(order: usize) -> impl Strategy<Value = Jet> {
    prop::collection::vec(-2.0f64..2.0, order + 1).prop_map(|c| Jet::from_coeffs(c).unwrap())
}

fn close(a: &Jet, b: &Jet, tol: f64) -> bool {
    a.coeffs().iter().zip(b.coeffs()).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

/// Truncated Cauchy product, independent of the crate.
fn conv(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len()).map(|k| (0..=k).map(|i| a[i] * b[k - i]).sum()).collect()
}

/// Taylor coefficients of `f(a)` from the derivatives of `f` at `a_0`:
/// `sum_k f^(k)(a_0)/k! (a - a_0)^k`.
fn compose(a: &[f64], derivs: &[f64]) -> Vec<f64> {
    let mut delta = a.to_vec();
    delta[0] = 0.0;
    let mut power = vec![0.0; a.len()];
    power[0] = 1.0;
    let mut out = vec![0.0; a.len()];
    let mut fact = 1.0;
    for (k, d) in derivs.iter().enumerate().take(a.len()) {
        if k > 0 {
            fact *= k as f64;
            power = conv(&power, &delta);
        }
        for (o, p) in out.iter_mut().zip(&power) {
            *o += d / fact * p;
        }
    }
    out
}

fn derivatives_at(f: ElementaryFn, x: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| match f {
            ElementaryFn::Exp => x.exp(),
            ElementaryFn::Sin => [x.sin(), x.cos(), -x.sin(), -x.cos()][k % 4],
            ElementaryFn::Cos => [x.cos(), -x.sin(), -x.cos(), x.sin()][k % 4],
            ElementaryFn::Log if k == 0 => x.ln(),
            ElementaryFn::Log => {
                let fact: f64 = (1..k).map(|i| i as f64).product();
                if k % 2 == 1 { fact / x.powi(k as i32) } else { -fact / x.powi(k as i32) }
            }
            ElementaryFn::Pow(p) => (0..k).map(|i| p - i as f64).product::<f64>() * x.powf(p - k as f64),
            _ => unreachable!(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jet_ring_axioms(a in jet(6), b in jet(6), c in jet(6)) {
        let lhs = a.mul(&b.add(&c).unwrap()).unwrap();
        let rhs = a.mul(&b).unwrap().add(&a.mul(&c).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-13));
        prop_assert!(close(&a.mul(&b).unwrap(), &b.mul(&a).unwrap(), 1e-13));
    }

    #[test]
    fn jet_div_inverts_mul(a in jet(6), b in jet(6), c0 in prop_oneof![0.1f64..2.0, -2.0f64..-0.1]) {
        let mut bc = b.coeffs().to_vec();
        bc[0] = c0;
        let b = Jet::from_coeffs(bc).unwrap();
        let q = a.div(&b).unwrap();
        let back = q.mul(&b).unwrap();
        // error measured against the size of the terms of the product
        for k in 0..=6 {
            let terms: f64 = (0..=k).map(|i| (q.coeffs()[i] * b.coeffs()[k - i]).abs()).sum();
            prop_assert!((back.coeffs()[k] - a.coeffs()[k]).abs() <= 1e-12 * terms.max(1.0));
        }
    }

    #[test]
    fn jet_var_has_unit_slope(v in -1e6f64..1e6, r in 1usize..20) {
        prop_assert_eq!(Jet::var(v, r).unwrap().derivative(1).unwrap(), 1.0);
    }

    #[test]
    fn jet_apply_matches_composition(
        a in jet(8),
        which in 0usize..5,
        x0 in 0.2f64..2.0,
    ) {
        let f = [ElementaryFn::Exp, ElementaryFn::Sin, ElementaryFn::Cos, ElementaryFn::Log, ElementaryFn::Pow(1.5)][which];
        let mut c = a.coeffs().to_vec();
        c[0] = x0;
        let want = compose(&c, &derivatives_at(f, x0, 9));
        let got = Jet::from_coeffs(c).unwrap().apply(f).unwrap();
        for (g, w) in got.coeffs().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "{f:?}: {g} vs {w}");
        }
    }

    #[test]
    fn modes_agree(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_point(&mut r, 4);
        let t = random_tape(&mut r, 4, 120, OpSet::Smooth, &x, 1e3);
        let f = forward_gradient(&t, &x).unwrap();
        let g = reverse_gradient(&t, &x, 0).unwrap();
        for j in 0..4 {
            prop_assert!(rel(f[0][j], g[j]) <= 1e-12);
            prop_assert!(rel(central(&t, &x, j, 1e-5), g[j]) <= 1e-6);
        }
    }

    #[test]
    fn order_one_jets_match_forward(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_point(&mut r, 3);
        let t = random_tape(&mut r, 3, 80, OpSet::Smooth, &x, 1e3);
        let g = forward_gradient(&t, &x).unwrap();
        for j in 0..3 {
            let seeds: Vec<Jet> = x.iter().enumerate()
                .map(|(i, &v)| if i == j { Jet::var(v, 1).unwrap() } else { Jet::constant(v, 1).unwrap() })
                .collect();
            let d = tape_jet_eval(&t, &seeds).unwrap()[0].coeffs()[1];
            prop_assert!((d - g[0][j]).abs() <= 1e-13 * d.abs().max(1.0));
        }
    }

    #[test]
    fn branch_gradient_is_arm_gradient(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        prop_assume!(x.abs() > 1e-3);
        let mut b = TapeBuilder::new(2);
        let (u, v) = (b.input(0), b.input(1));
        let left = b.mul(u, v);
        let s = b.apply(ElementaryFn::Sin, v);
        let right = b.add(u, s);
        let out = b.branch(u, Cmp::Ge, 0.0, left, right);
        let t = b.finish(vec![out]);
        let g = reverse_gradient(&t, &[x, y], 0).unwrap();
        let arm = if x >= 0.0 { b.finish(vec![left]) } else { b.finish(vec![right]) };
        let ga = reverse_gradient(&arm, &[x, y], 0).unwrap();
        prop_assert_eq!(g, ga);
    }

    #[test]
    fn forward_cost_bounded(seed in any::<u64>(), field in any::<bool>()) {
        let mut r = rng(seed);
        let x = random_point(&mut r, 3);
        let ops = if field { OpSet::Field } else { OpSet::Ring };
        let t = random_tape(&mut r, 3, 200, ops, &x, f64::MAX);
        let s = counted_value(&t, &x);
        let (_, f) = counted_tangent(&t, &x, 0);
        let bound = if field { 5 } else { 4 };
        prop_assert!(f <= bound * s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn agdm_keeps_original_outputs(k in 0.2f64..3.0, tau in 0.2f64..2.0) {
        let d = models::first_order(k, tau);
        let cfg = SimConfig { step: 1e-2, tf: 2.0, ..SimConfig::default() };
        let a = integrate(&flatten(&d).unwrap(), &cfg).unwrap();
        let b = integrate(&flatten(&agdm_diff(&d, "tau").unwrap()).unwrap(), &cfg).unwrap();
        prop_assert_eq!(a.output("y").unwrap(), b.output("y").unwrap());
    }

    #[test]
    fn mixed_derivatives_commute(k in 0.2f64..3.0, tau in 0.2f64..2.0) {
        let d = models::first_order(k, tau);
        let cfg = SimConfig { step: 1e-2, tf: 2.0, ..SimConfig::default() };
        let kt = agdm_diff(&agdm_diff(&d, "k").unwrap(), "tau").unwrap();
        let tk = agdm_diff(&agdm_diff(&d, "tau").unwrap(), "k").unwrap();
        let a = integrate(&flatten(&kt).unwrap(), &cfg).unwrap();
        let b = integrate(&flatten(&tk).unwrap(), &cfg).unwrap();
        let (x, y) = (a.output("d(dy/dk)/dtau").unwrap(), b.output("d(dy/dtau)/dk").unwrap());
        for (u, v) in x.iter().zip(&y) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn routes_agree(k in 0.2f64..3.0, tau in 0.2f64..2.0) {
        let d = models::first_order(k, tau);
        let cfg = SimConfig { step: 1e-2, tf: 2.0, ..SimConfig::default() };
        for th in ["k", "tau"] {
            let a = integrate(&flatten(&agdm_diff(&d, th).unwrap()).unwrap(), &cfg).unwrap();
            let b = integrate(&sensitivity_extend(&flatten(&d).unwrap(), th).unwrap(), &cfg).unwrap();
            let name = format!("dy/d{th}");
            for (u, v) in a.output(&name).unwrap().iter().zip(&b.output(&name).unwrap()) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sensitivity_matches_fd(zeta in 0.2f64..1.5) {
        let m = flatten(&models::second_order(zeta)).unwrap();
        let cfg = SimConfig { step: 1e-2, tf: 3.0, ..SimConfig::default() };
        let s = integrate(&sensitivity_extend(&m, "zeta").unwrap(), &cfg).unwrap();
        let y = |z: f64| *integrate(&m.with_param("zeta", z).unwrap(), &cfg).unwrap().output("y").unwrap().last().unwrap();
        let e = 1e-5 * zeta.abs().max(1.0);
        let fd = (y(zeta + e) - y(zeta - e)) / (2.0 * e);
        let ad = *s.output("dy/dzeta").unwrap().last().unwrap();
        prop_assert!((ad - fd).abs() <= 1e-5 * ad.abs().max(1.0), "{ad} {fd}");
    }

    #[test]
    fn events_are_localized(q0 in -2.0f64..-0.1, v0 in 0.3f64..2.0, delta in 0.0f64..3.0) {
        let m = models::particle_step(delta, q0, v0).unwrap();
        let cfg = SimConfig { step: 1e-2, tf: 4.0 + (-q0 / v0), ..SimConfig::default() };
        let tr = integrate(&m, &cfg).unwrap();
        prop_assert!(!tr.events.is_empty());
        for e in &tr.events {
            prop_assert!(e.pre[0].abs() <= 1e-8, "{}", e.pre[0]);
        }
    }

    #[test]
    fn impact_conserves_energy(
        a in 0.2f64..3.0, ep in 0.0f64..2.0, en in 0.0f64..2.0, v in -3.0f64..3.0, w in -0.5f64..0.5,
    ) {
        prop_assume!((v - w).abs() > 1e-3);
        let s = ImpactSurface::plane(&[vec![a]], ep, en, &[1.0], 0.0, w).unwrap();
        let out = impact_update_detailed(&s, &[0.0], &[v], 0.0).unwrap();
        let fr = s.frame(&[0.0], 0.0).unwrap();
        let (before, after) = if v > w { (en, ep) } else { (ep, en) };
        let (k0, k1) = (fr.relative_energy(&[v]), fr.relative_energy(&out.velocity));
        match out.branch {
            ImpactBranch::Crossing => prop_assert!((k0 + before - k1 - after).abs() <= 1e-9 * (k0 + before + 1.0)),
            ImpactBranch::Rebound => prop_assert!((out.velocity[0] - (2.0 * w - v)).abs() <= 1e-12),
        }
    }
}

fn sqrt_like() -> ImplicitSystem {
    ImplicitSystem::build(1, 1, |b, x, th| {
        let x3 = b.mul(x[0], x[0]);
        let x3 = b.mul(x3, x[0]);
        let s = b.add(x3, x[0]);
        vec![b.sub(s, th[0])]
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn implicit_matches_fd(a in 0.5f64..5.0) {
        let s = sqrt_like();
        let root = newton(&s, &[1.0], &[a], 1e-14, 100).unwrap();
        let d = implicit_sensitivity(&s, &root.x, &[a]).unwrap()[(0, 0)];
        let e = 1e-6;
        let fd = (newton(&s, &[1.0], &[a + e], 1e-14, 100).unwrap().x[0] - newton(&s, &[1.0], &[a - e], 1e-14, 100).unwrap().x[0]) / (2.0 * e);
        prop_assert!(((d - fd) / d).abs() <= 1e-7);
        let r0 = s.eval(&[1.0], &[a]).unwrap()[0].abs();
        prop_assert!(s.eval(&root.x, &[a]).unwrap()[0].abs() <= 10.0 * 1e-14 * r0.max(1.0));
        let j = newton_jet(&s, &[Jet::var(a, 1).unwrap()], 1.0, 1e-14, 100).unwrap();
        prop_assert!((j.root.coeffs()[1] - d).abs() <= 1e-12);
    }

    #[test]
    fn central_fd_exact_on_quadratics(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, x in -10.0f64..10.0) {
        let f = |p: &[f64]| Ok::<_, String>(vec![a * p[0] * p[0] + b * p[0] + c]);
        let j = finite_difference(f, &[x], FdScheme::central(1e-4)).unwrap();
        prop_assert!((j[0][0] - (2.0 * a * x + b)).abs() <= 1e-10 * (1.0 + x.abs()).powi(2));
    }

    #[test]
    fn compare_abs_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let (x, y) = (vec![a], vec![b]);
        let r = compare_report(&x, &y, 1e-3).unwrap();
        let s = compare_report(&y, &x, 1e-3).unwrap();
        prop_assert_eq!(r.max_abs, s.max_abs);
        prop_assert_eq!(r.max_abs_at, s.max_abs_at);
    }
}

/// `x' = -theta x`, `y = g x`, `x(0) = c`.
fn scaled_decay(g: f64) -> OdeModel {
    let pv: ParamValues = [("c", 1.0), ("theta", 1.0), ("g", g)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let m = OdeModel::new(&["x"], pv, vec![]);
    let l = m.layout();
    let mut b = TapeBuilder::new(l.width());
    let x = b.input(l.x(0));
    let th = b.input(l.theta(m.param_index("theta").unwrap()));
    let gain = b.input(l.theta(m.param_index("g").unwrap()));
    let tx = b.mul(th, x);
    let f = b.neg(tx);
    let y = b.mul(gain, x);
    m.with_rhs(b.finish(vec![f])).with_outputs(&["y"], b.finish(vec![y])).with_init(vec!["c".parse::<ParamExpr>().unwrap()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identifiability_ignores_output_units(g in prop_oneof![1e-4f64..1e-2, 0.5f64..2.0, 1e2f64..1e4]) {
        let cfg = SimConfig { step: 1e-2, tf: 1.0, ..SimConfig::default() };
        let base = identifiability_test(&scaled_decay(1.0), &["c", "theta"], &[0.5, 1.0], &cfg).unwrap();
        let r = identifiability_test(&scaled_decay(g), &["c", "theta"], &[0.5, 1.0], &cfg).unwrap();
        prop_assert_eq!(base.verdict, r.verdict);
        prop_assert!((base.sigma_min / base.norm - r.sigma_min / r.norm).abs() <= 1e-12);
    }
}
