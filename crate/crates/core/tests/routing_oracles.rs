use hmoe::model::log_sum_exp;
use hmoe::rng;
use hmoe::routing::*;
use rand::Rng;

fn random_tokens(b: usize, n: usize, d: usize, r: &mut rng::Rng) -> TokenBatch {
    TokenBatch::new(b, n, d, (0..b * n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

/// `out[e,b,c,:] = sum_n D[b,n,e,c] x[b,n,:]` over explicit dense tensors.
fn einsum_dispatch(plan: &DispatchPlan, x: &TokenBatch) -> Vec<f64> {
    let dd = plan.dense_dispatch();
    let (bs, ns, es, cs, ds) = (plan.batch, plan.seq, plan.experts, plan.capacity, x.dim);
    let mut out = vec![0.0; es * bs * cs * ds];
    for e in 0..es {
        for b in 0..bs {
            for c in 0..cs {
                for k in 0..ds {
                    let mut s = 0.0;
                    for n in 0..ns {
                        s += dd[((b * ns + n) * es + e) * cs + c] * x.token(b, n)[k];
                    }
                    out[((e * bs + b) * cs + c) * ds + k] = s;
                }
            }
        }
    }
    out
}

/// `y[b,n,:] = sum_{e,c} C[b,n,e,c] out[e,b,c,:]`.
fn einsum_combine(plan: &DispatchPlan, g: &Grouped) -> Vec<f64> {
    let cc = plan.dense_combine();
    let (bs, ns, es, cs, ds) = (plan.batch, plan.seq, plan.experts, plan.capacity, g.dim);
    let mut y = vec![0.0; bs * ns * ds];
    for b in 0..bs {
        for n in 0..ns {
            for k in 0..ds {
                let mut s = 0.0;
                for e in 0..es {
                    for c in 0..cs {
                        s += cc[((b * ns + n) * es + e) * cs + c] * g.slot(e, b, c)[k];
                    }
                }
                y[(b * ns + n) * ds + k] = s;
            }
        }
    }
    y
}

#[test]
fn dispatch_and_combine_match_dense_einsum() {
    let mut r = rng::stream(11, 0);
    for case in 0..40 {
        let (b, n, d) = (r.random_range(1..=3), r.random_range(1..=10), r.random_range(1..=4));
        let e = r.random_range(1..=4);
        let topk = r.random_range(1..=e);
        let cap = r.random_range(0..=5);
        let kind = if case % 2 == 0 { RouteGateKind::Laplace } else { RouteGateKind::SoftmaxLinear };
        let params = GateParams::random(kind, e, d, &mut r);
        let x = random_tokens(b, n, d, &mut r);
        let plan = gate(&params, &x, topk, cap, case % 3 != 0, None).unwrap();
        let grouped = dispatch(&plan, &x).unwrap();
        for (a, o) in grouped.data.iter().zip(einsum_dispatch(&plan, &x)) {
            assert!((a - o).abs() < 1e-12);
        }
        // Random expert outputs.
        let mut outs = Grouped::zeros(e, b, cap, d);
        outs.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        let y = combine(&plan, &outs).unwrap();
        for (a, o) in y.data.iter().zip(einsum_combine(&plan, &outs)) {
            assert!((a - o).abs() < 1e-12);
        }
    }
}

#[test]
fn dropped_tokens_appear_in_no_slot() {
    let params = GateParams::new(RouteGateKind::SoftmaxLinear, 1, vec![0.0, 0.0], vec![0.0, 1.0]).unwrap();
    let x = TokenBatch::new(1, 3, 1, vec![10.0, 20.0, 30.0]).unwrap();
    let plan = gate(&params, &x, 1, 2, true, None).unwrap();
    assert_eq!(plan.dropped, vec![(0, 2, 1)]);
    let g = dispatch(&plan, &x).unwrap();
    assert!(!g.data.contains(&30.0));
    let y = combine(&plan, &g).unwrap();
    assert_eq!(y.token(0, 2), &[0.0]);
}

fn dense_softmax(logits: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(logits);
    logits.iter().map(|v| (v - l).exp()).collect()
}

/// B=1, N=2, D=1, two groups of two experts, top-1 at both levels, ample
/// capacity: every token follows its argmax path and picks up that path's
/// expert output with weight 1. Without renormalization the weight is the
/// product of the two selected gate probabilities.
#[test]
fn forward_matches_dense_path_enumeration() {
    let outer = GateParams::new(RouteGateKind::Laplace, 1, vec![-1.0, 1.0], vec![0.0, 0.2]).unwrap();
    let inner = vec![
        GateParams::new(RouteGateKind::SoftmaxLinear, 1, vec![2.0, -1.0], vec![0.0, 0.0]).unwrap(),
        GateParams::new(RouteGateKind::SoftmaxLinear, 1, vec![-1.5, 1.0], vec![0.3, 0.0]).unwrap(),
    ];
    let params = RouteParams { outer: outer.clone(), inner: inner.clone() };
    let x = TokenBatch::new(1, 2, 1, vec![-0.7, 0.9]).unwrap();
    let expert = |o: usize, i: usize, v: &[f64], out: &mut [f64]| out[0] = (o as f64 + 1.0) * v[0] + i as f64;
    for renorm in [true, false] {
        let cfg = RouteConfig {
            e_outer: 2,
            e_inner: 2,
            cap_outer: 4,
            cap_inner: 4,
            topk_outer: 1,
            topk_inner: 1,
            gate_outer_kind: RouteGateKind::Laplace,
            gate_inner_kind: RouteGateKind::SoftmaxLinear,
            loss_scale: 1.0,
            renormalize_topk: renorm,
            seed: 0,
        };
        let (y, _) = hmoe_forward(&x, &cfg, &params, expert).unwrap();
        for n in 0..2 {
            let xv = x.token(0, n);
            let po = dense_softmax(&outer.logits(xv));
            let o = if po[0] >= po[1] { 0 } else { 1 };
            let pi = dense_softmax(&inner[o].logits(xv));
            let i = if pi[0] >= pi[1] { 0 } else { 1 };
            let w = if renorm { 1.0 } else { po[o] * pi[i] };
            let mut e = [0.0];
            expert(o, i, xv, &mut e);
            assert!((y.token(0, n)[0] - w * e[0]).abs() < 1e-12, "renorm={renorm} token {n}");
        }
    }
}

#[test]
fn far_laplace_gates_match_uniform_softmax() {
    let d = 3;
    let e = 4;
    let mut r = rng::stream(5, 0);
    let x = random_tokens(2, 6, d, &mut r);
    // Every location at the same far point: all logits are equal.
    let lap = GateParams::new(RouteGateKind::Laplace, d, vec![100.0; e * d], vec![0.5; e]).unwrap();
    let soft = GateParams::new(RouteGateKind::SoftmaxLinear, d, vec![0.0; e * d], vec![0.0; e]).unwrap();
    let a = gate(&lap, &x, 2, 3, true, None).unwrap();
    let b = gate(&soft, &x, 2, 3, true, None).unwrap();
    assert_eq!(a.routes.len(), b.routes.len());
    for (p, q) in a.routes.iter().zip(&b.routes) {
        assert_eq!((p.b, p.n, p.expert, p.slot), (q.b, q.n, q.expert, q.slot));
        assert!((p.weight - q.weight).abs() < 1e-12);
    }
    assert_eq!(a.dropped, b.dropped);
}

#[test]
fn aux_loss_is_at_least_one_when_balanced() {
    // Balanced top-1 counts with any probabilities whose argmax matches.
    let e = 3;
    let probs = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1], vec![0.1, 0.2, 0.7]];
    let top1 = vec![0, 1, 2];
    let l = aux_loss(&probs, &top1, e);
    assert!((l - 1.0).abs() < 1e-12, "{l}");
    let uniform = vec![vec![1.0 / 3.0; 3]; 6];
    let l = aux_loss(&uniform, &[0, 1, 2, 0, 1, 2], e);
    assert!((l - 1.0).abs() < 1e-12);
    // Everything on one expert is the worst case.
    let skew = vec![vec![1.0, 0.0, 0.0]; 4];
    assert!((aux_loss(&skew, &[0; 4], e) - 3.0).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let cfg = RouteConfig {
        e_outer: 3,
        e_inner: 2,
        cap_outer: 5,
        cap_inner: 3,
        topk_outer: 2,
        topk_inner: 1,
        gate_outer_kind: RouteGateKind::SoftmaxLinear,
        gate_inner_kind: RouteGateKind::Laplace,
        loss_scale: 0.1,
        renormalize_topk: true,
        seed: 42,
    };
    let (x, labels) = clustered_tokens(2, 8, 4, 3, 2.0, 0.5, 42).unwrap();
    let run = || {
        let p = RouteParams::random(&cfg, 4);
        let (y, t) = hmoe_forward(&x, &cfg, &p, |_, i, v, o| o.iter_mut().zip(v).for_each(|(a, b)| *a = b * (i as f64 + 0.5))).unwrap();
        (y, routing_histogram(&t, &labels, 3), t.total_loss)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2.to_bits(), b.2.to_bits());
}
