use hmoe::data::{sample, InputLaw};
use hmoe::estimation::{gate_gradient, gate_objective, pack_gates, responsibilities, run_em, unpack_gates, FitConfig, initial_measure};
use hmoe::metrics::{combo_exponents, voronoi_cells, voronoi_loss, ComboLossOptions, RateExponents};
use hmoe::model::{ExpertAtom, GatingCombo, GroupAtom, Level, MixingMeasure};
use hmoe::polysys::{residuals, CandidateSolution, PolySystem};
use hmoe::rng;
use hmoe::routing::{gate, GateParams, RouteGateKind, TokenBatch};
use proptest::prelude::*;

fn combo() -> impl Strategy<Value = GatingCombo> {
    prop_oneof![Just(GatingCombo::SS), Just(GatingCombo::SL), Just(GatingCombo::LL)]
}

fn expert(d: usize) -> impl Strategy<Value = ExpertAtom> {
    (prop::collection::vec(-2.0..2.0f64, d), -1.0..1.0f64, prop::collection::vec(-2.0..2.0f64, d), -2.0..2.0f64, 0.2..1.0f64)
        .prop_map(|(omega, beta, eta, tau, nu)| ExpertAtom { omega, beta, eta, tau, nu })
}

fn measure() -> impl Strategy<Value = MixingMeasure> {
    (1usize..=2, 1usize..=3, 1usize..=3).prop_flat_map(|(d, k1, k2)| {
        let group = (prop::collection::vec(-2.0..2.0f64, d), -1.0..1.0f64, prop::collection::vec(expert(d), k2))
            .prop_map(|(a, b, experts)| GroupAtom { a, b, experts });
        prop::collection::vec(group, k1).prop_map(move |groups| MixingMeasure { dim: d, groups })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_weights_lie_on_the_simplex(g in measure(), c in combo(), x0 in -3.0..3.0f64, x1 in -3.0..3.0f64) {
        let x = [x0, x1];
        let x = &x[..g.dim];
        let mut levels = vec![Level::First];
        levels.extend((0..g.k1()).map(Level::Second));
        for level in levels {
            let w = g.gate_weights(c, x, level).unwrap();
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn voronoi_loss_is_zero_at_truth(g in measure(), c in combo()) {
        let cells = voronoi_cells(&g, &g).unwrap();
        prop_assert_eq!(voronoi_loss(&g, &g, RateExponents::ONES, &cells).unwrap(), 0.0);
        let (exps, _) = combo_exponents(c, 2, &ComboLossOptions::default()).unwrap();
        prop_assert_eq!(voronoi_loss(&g, &g, exps, &cells).unwrap(), 0.0);
    }

    #[test]
    fn voronoi_loss_ignores_atom_order(
        truth in measure(),
        noise in prop::collection::vec(-0.05..0.05f64, 64),
        shift in 0usize..8,
    ) {
        // A small perturbation of the truth, then its atoms reversed and rotated.
        let mut k = 0;
        let mut bump = |v: &mut f64| { *v += noise[k % noise.len()]; k += 1; };
        let mut g = truth.clone();
        for grp in &mut g.groups {
            grp.a.iter_mut().for_each(&mut bump);
            bump(&mut grp.b);
            for e in &mut grp.experts {
                e.omega.iter_mut().chain(e.eta.iter_mut()).for_each(&mut bump);
                bump(&mut e.tau);
            }
        }
        let mut h = g.clone();
        h.groups.reverse();
        let len = h.groups.len();
        h.groups.rotate_left(shift % len);
        for grp in &mut h.groups {
            grp.experts.reverse();
        }
        let exps = RateExponents::new(1.0, 2.0, 1.5).unwrap();
        let a = voronoi_loss(&g, &truth, exps, &voronoi_cells(&g, &truth).unwrap()).unwrap();
        let b = voronoi_loss(&h, &truth, exps, &voronoi_cells(&h, &truth).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn polysys_restrictions_agree(
        m in 2usize..=3,
        r in 1usize..=4,
        vals in prop::collection::vec(-1.0..1.0f64, 32),
    ) {
        let d = 1;
        let ss = PolySystem::new(GatingCombo::SS, m, r, d).unwrap();
        let sl = PolySystem::new(GatingCombo::SL, m, r, d).unwrap();
        let ll = PolySystem::new(GatingCombo::LL, m, r, d).unwrap();
        let mut c = CandidateSolution::zeros(&ss);
        let mut it = vals.iter().cycle().copied();
        c.p.iter_mut().for_each(|v| *v = 0.5 + 0.5 * it.next().unwrap().abs());
        c.q2.iter_mut().for_each(|v| *v = it.next().unwrap());
        c.q3.iter_mut().flatten().for_each(|v| *v = it.next().unwrap());
        c.q4.iter_mut().for_each(|v| *v = it.next().unwrap());
        c.q5.iter_mut().for_each(|v| *v = it.next().unwrap());

        // SS with q1 = 0 is the SL system.
        let r_ss = residuals(&ss, &c).unwrap();
        let r_sl = residuals(&sl, &c.restricted_to(GatingCombo::SL)).unwrap();
        prop_assert_eq!(ss.equations(), sl.equations());
        for (a, b) in r_ss.iter().zip(&r_sl) {
            prop_assert!((a - b).abs() < 1e-14);
        }

        // SL with q2 = q3 = 0 reduces to the LL system on the rho1 = 0 equations
        // and vanishes elsewhere.
        c.q2.iter_mut().for_each(|v| *v = 0.0);
        c.q3.iter_mut().flatten().for_each(|v| *v = 0.0);
        let r_sl = residuals(&sl, &c.restricted_to(GatingCombo::SL)).unwrap();
        let r_ll = residuals(&ll, &c.restricted_to(GatingCombo::LL)).unwrap();
        for ((rho1, rho2), v) in sl.equations().iter().zip(&r_sl) {
            if rho1.iter().all(|&k| k == 0) {
                prop_assert!((v - r_ll[*rho2 as usize - 1]).abs() < 1e-14);
            } else {
                prop_assert!(v.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn capacity_is_respected(
        b in 1usize..=3,
        n in 1usize..=12,
        e in 1usize..=4,
        cap in 0usize..=6,
        k_raw in 1usize..=4,
        laplace in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let d = 2;
        let topk = k_raw.min(e);
        let kind = if laplace { RouteGateKind::Laplace } else { RouteGateKind::SoftmaxLinear };
        let mut r = rng::stream(seed, 0);
        let params = GateParams::random(kind, e, d, &mut r);
        let tokens = TokenBatch::new(b, n, d, (0..b * n * d).map(|i| ((i as f64) * 0.37 + seed as f64 * 1e-3).sin()).collect()).unwrap();
        let plan = gate(&params, &tokens, topk, cap, true, None).unwrap();
        for ex in 0..e {
            for bb in 0..b {
                prop_assert!(plan.load(ex, bb) <= cap);
            }
        }
        prop_assert!(plan.routes.len() <= b * n * topk);
        prop_assert_eq!(plan.routes.len() + plan.dropped.len(), b * n * topk);
        let mut pairs = std::collections::HashSet::new();
        let mut slots = std::collections::HashSet::new();
        for rt in &plan.routes {
            prop_assert!(pairs.insert((rt.b, rt.n, rt.expert)));
            prop_assert!(slots.insert((rt.b, rt.expert, rt.slot)));
            prop_assert!(rt.slot < cap);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn em_is_monotone(truth in measure(), c in combo(), seed in 0u64..1000) {
        let data = sample(&truth, c, 300, InputLaw::default(), seed).unwrap();
        let cfg = FitConfig { max_iters: 25, tol: 1e-14, seed, ..FitConfig::new(truth.k1(), truth.k2_max()) };
        let mut r = rng::stream(seed, 9);
        let start = initial_measure(&data, c, &cfg, &mut r).unwrap();
        if let Ok((_, trace, _, _)) = run_em(&data, c, &cfg, start) {
            for w in trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "loglik decreased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences(truth in measure(), c in combo(), seed in 0u64..1000) {
        let data = sample(&truth, c, 150, InputLaw::default(), seed).unwrap();
        let mut g = truth.clone();
        // Move away from the responsibilities' own parameters.
        let mut v = pack_gates(&g);
        v.iter_mut().enumerate().for_each(|(i, x)| *x += 0.1 * ((i as f64) + 1.0).sin());
        unpack_gates(&mut g, &v);
        let resp = responsibilities(&truth, c, &data).unwrap();
        let grad = gate_gradient(&g, c, &resp, &data);
        let h = 1e-5;
        for i in 0..v.len() {
            let mut up = g.clone();
            let mut dn = g.clone();
            let (mut vu, mut vd) = (v.clone(), v.clone());
            vu[i] += h;
            vd[i] -= h;
            unpack_gates(&mut up, &vu);
            unpack_gates(&mut dn, &vd);
            let fd = (gate_objective(&up, c, &resp, &data) - gate_objective(&dn, c, &resp, &data)) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs()).max(1.0);
            prop_assert!((grad[i] - fd).abs() <= 1e-5 * scale, "coord {}: analytic {} vs fd {}", i, grad[i], fd);
        }
    }
}
