//! Central finite-difference checks of every analytic gradient.

use std::collections::BTreeSet;

use hdmole::gating::{threshold_gate, threshold_gate_backward, DynamicThreshold};
use hdmole::layer::{ComponentTag, GatingMode};
use hdmole::lora::{lora_backward, lora_forward, FrozenLinear, LoraExpert};
use hdmole::model::{Model, ModelConfig, Sublayer};
use hdmole::numeric::{softmax, softmax_backward, Vector};
use hdmole::routing::LocalRouter;
use hdmole::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = Rng::new(seed);
    model.visit_trainable_mut(&mut |tag, p| {
        for v in p.iter_mut() {
            *v = match tag {
                ComponentTag::Threshold => 0.05 + 0.25 * rng.uniform(),
                _ => scale * rng.normal(),
            };
        }
    });
}

fn config(gating: GatingMode, n: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 6,
        ffn_dim: 10,
        num_experts: n,
        rank: 2,
        alpha: 3.0,
        wrapped_sublayers: Sublayer::ALL.iter().copied().collect::<BTreeSet<_>>(),
        gating,
        seed: 0,
    }
}

fn loss(model: &Model, x: &Vector, pg: &Vector, c: &Vector) -> f64 {
    model.forward(x, pg).unwrap().dot(c)
}

/// Whether every gate mask survives shifting all thresholds by ±1e-3, i.e.
/// no routing probability sits within reach of a kink.
fn away_from_kinks(model: &Model, x: &Vector, pg: &Vector) -> bool {
    let (_, base) = model.forward_cached(x, pg).unwrap();
    let masks: Vec<Vec<bool>> = base.gates().map(|(_, _, g)| g.mask.clone()).collect();
    for eps in [1e-3, -1e-3] {
        let mut m = model.clone();
        m.visit_trainable_mut(&mut |tag, p| {
            if tag == ComponentTag::Threshold {
                for v in p.iter_mut() {
                    *v += eps;
                }
            }
        });
        let (_, c) = m.forward_cached(x, pg).unwrap();
        let other: Vec<Vec<bool>> = c.gates().map(|(_, _, g)| g.mask.clone()).collect();
        if other != masks {
            return false;
        }
    }
    true
}

fn check_model(gating: GatingMode, n: usize, seed: u64) -> usize {
    let cfg = config(gating, n);
    let mut model = Model::build(&cfg, &Rng::new(seed)).unwrap();
    randomize(&mut model, seed + 100, 0.3);
    let mut rng = Rng::new(seed + 200);
    let mut checked = 0;
    for trial in 0..20 {
        let x = rng.normal_vector(6, 1.0);
        let pg = softmax(&rng.normal_vector(n, 2.0));
        let c = rng.normal_vector(6, 1.0);
        if !away_from_kinks(&model, &x, &pg) {
            continue;
        }
        let (_, cache) = model.forward_cached(&x, &pg).unwrap();
        let mut grads = model.zero_grads();
        let gx = model.backward(&cache, &c, &mut grads).unwrap();

        let mut analytic = Vec::new();
        grads.visit(&model, &mut |g| analytic.extend_from_slice(g));
        for j in 0..analytic.len() {
            let num = {
                let mut plus = model.clone();
                nudge(&mut plus, j, H);
                let mut minus = model.clone();
                nudge(&mut minus, j, -H);
                (loss(&plus, &x, &pg, &c) - loss(&minus, &x, &pg, &c)) / (2.0 * H)
            };
            let e = rel_err(analytic[j], num);
            assert!(e < TOL, "{gating:?} trial {trial} param {j}: analytic {} numeric {num} rel {e}", analytic[j]);
        }
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += H;
            let mut xm = x.clone();
            xm[i] -= H;
            let num = (loss(&model, &xp, &pg, &c) - loss(&model, &xm, &pg, &c)) / (2.0 * H);
            let e = rel_err(gx[i], num);
            assert!(e < TOL, "{gating:?} input {i}: analytic {} numeric {num}", gx[i]);
        }
        checked += 1;
    }
    checked
}

fn nudge(model: &mut Model, index: usize, h: f64) {
    let mut offset = 0;
    model.visit_trainable_mut(&mut |_, p| {
        if index >= offset && index < offset + p.len() {
            p[index - offset] += h;
        }
        offset += p.len();
    });
}

#[test]
fn model_gradients_hierarchical() {
    assert!(check_model(GatingMode::Hierarchical, 4, 1) >= 5);
}

#[test]
fn model_gradients_local_only() {
    assert!(check_model(GatingMode::LocalOnly, 4, 2) >= 5);
}

#[test]
fn model_gradients_global_only() {
    assert!(check_model(GatingMode::GlobalOnly, 4, 3) >= 5);
}

#[test]
fn model_gradients_topk() {
    assert!(check_model(GatingMode::TopK { k: 2 }, 4, 4) >= 5);
}

#[test]
fn model_gradients_dense_softmax() {
    assert!(check_model(GatingMode::DenseSoftmax, 4, 5) >= 5);
}

#[test]
fn model_gradients_plain() {
    assert!(check_model(GatingMode::Plain, 1, 6) >= 5);
}

#[test]
fn full_finetune_gradients() {
    let mut cfg = config(GatingMode::Plain, 1);
    cfg.wrapped_sublayers.clear();
    let mut model = Model::build(&cfg, &Rng::new(7)).unwrap();
    model.trainable_base = true;
    let mut rng = Rng::new(8);
    let x = rng.normal_vector(6, 1.0);
    let pg = Vector::filled(1, 1.0);
    let c = rng.normal_vector(6, 1.0);
    let (_, cache) = model.forward_cached(&x, &pg).unwrap();
    let mut grads = model.zero_grads();
    model.backward(&cache, &c, &mut grads).unwrap();
    let mut analytic = Vec::new();
    grads.visit(&model, &mut |g| analytic.extend_from_slice(g));
    assert!(!analytic.is_empty());
    for j in (0..analytic.len()).step_by(7) {
        let mut plus = model.clone();
        nudge(&mut plus, j, H);
        let mut minus = model.clone();
        nudge(&mut minus, j, -H);
        let num = (loss(&plus, &x, &pg, &c) - loss(&minus, &x, &pg, &c)) / (2.0 * H);
        assert!(rel_err(analytic[j], num) < TOL, "param {j}: {} vs {num}", analytic[j]);
    }
}

#[test]
fn lora_gradients() {
    let mut rng = Rng::new(9);
    let base = FrozenLinear::random(&mut rng, 5, 4).unwrap();
    let mut e = LoraExpert::new(&mut rng, 5, 4, 2, 4.0).unwrap();
    e.b = hdmole::rng::gaussian_fill(&mut rng, 4, 2, 0.5).unwrap();
    let x = rng.normal_vector(5, 1.0);
    let c = rng.normal_vector(4, 1.0);
    let f = |e: &LoraExpert, x: &Vector| lora_forward(&base, e, x).unwrap().dot(&c);
    let g = lora_backward(&base, &e, &x, &c).unwrap();
    for idx in 0..e.a.len() {
        let mut p = e.clone();
        p.a.as_mut_slice()[idx] += H;
        let mut m = e.clone();
        m.a.as_mut_slice()[idx] -= H;
        let num = (f(&p, &x) - f(&m, &x)) / (2.0 * H);
        assert!(rel_err(g.a.as_slice()[idx], num) < TOL);
    }
    for idx in 0..e.b.len() {
        let mut p = e.clone();
        p.b.as_mut_slice()[idx] += H;
        let mut m = e.clone();
        m.b.as_mut_slice()[idx] -= H;
        let num = (f(&p, &x) - f(&m, &x)) / (2.0 * H);
        assert!(rel_err(g.b.as_slice()[idx], num) < TOL);
    }
    for i in 0..5 {
        let mut xp = x.clone();
        xp[i] += H;
        let mut xm = x.clone();
        xm[i] -= H;
        let num = (f(&e, &xp) - f(&e, &xm)) / (2.0 * H);
        assert!(rel_err(g.x[i], num) < TOL);
    }
}

#[test]
fn local_router_gradients() {
    let mut rng = Rng::new(10);
    let mut r = LocalRouter::zeros(4, 5);
    r.wg = hdmole::rng::gaussian_fill(&mut rng, 4, 5, 0.7).unwrap();
    let h = rng.normal_vector(5, 1.0);
    let c = rng.normal_vector(4, 1.0);
        let g = r.backward(&h, &c).unwrap();
    for idx in 0..r.wg.len() {
        let mut rp = r.clone();
        rp.wg.as_mut_slice()[idx] += H;
        let mut rm = r.clone();
        rm.wg.as_mut_slice()[idx] -= H;
        let num = (rp.route(&h).unwrap().dot(&c) - rm.route(&h).unwrap().dot(&c)) / (2.0 * H);
        assert!(rel_err(g.wg.as_slice()[idx], num) < TOL);
    }
    for i in 0..5 {
        let mut hp = h.clone();
        hp[i] += H;
        let mut hm = h.clone();
        hm[i] -= H;
        let num = (r.route(&hp).unwrap().dot(&c) - r.route(&hm).unwrap().dot(&c)) / (2.0 * H);
        assert!(rel_err(g.h[i], num) < TOL);
    }
}

#[test]
fn threshold_gradients_away_from_kinks() {
    // p = softmax(z) keeps perturbations on the simplex; compare dL/dz.
    let mut rng = Rng::new(11);
    let mut checked = 0;
    for _ in 0..200 {
        let z = rng.normal_vector(6, 1.5);
        let p = softmax(&z);
        let tau = 0.05 + 0.3 * rng.uniform();
        if p.iter().any(|v| (v - tau).abs() < 1e-3) {
            continue;
        }
        let c = rng.normal_vector(6, 1.0);
        let (gp, gt) = threshold_gate_backward(&p, DynamicThreshold { tau }, &c).unwrap();
        let gz = softmax_backward(&p, &gp);
        let f = |z: &Vector, t: f64| {
            threshold_gate(&softmax(z), DynamicThreshold { tau: t })
                .unwrap()
                .adapted
                .dot(&c)
        };
        let num_t = (f(&z, tau + H) - f(&z, tau - H)) / (2.0 * H);
        assert!(rel_err(gt, num_t) < TOL, "tau: {gt} vs {num_t}");
        for k in 0..6 {
            let mut zp = z.clone();
            zp[k] += H;
            let mut zm = z.clone();
            zm[k] -= H;
            let num = (f(&zp, tau) - f(&zm, tau)) / (2.0 * H);
            assert!(rel_err(gz[k], num) < TOL, "z[{k}]: {} vs {num}", gz[k]);
        }
        checked += 1;
    }
    assert!(checked > 100);
}
