//! Named finite-difference checks over every differentiable op and loss.
//!
//! Each check verifies analytic gradients against central differences at
//! several random points and reports the worst relative error. The same
//! suite backs the `gradcheck` CLI command and the acceptance gate; a
//! check can be deliberately tampered with to exercise failure reporting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_against, Graph, NodeId, ParamId, ParamStore};
use crate::losses::{
    adversarial_values, critic_loss_backward, distill_loss, generator_adv_loss, l1_embed_loss,
    reconstruction_loss, rkd_angle_loss, rkd_distance_loss, CriticNet, DistillWeights,
    EmbeddingBatch, GpForm,
};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;
const POINTS: usize = 10;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// A loss builder evaluated at freshly randomized parameter points.
type Builder = dyn Fn(&mut Graph) -> NodeId;

/// Checks one point at several step sizes and keeps the best error: a wrong
/// gradient fails at every step, while a piecewise kink (relu mask exactly
/// on the perturbation path) only corrupts the larger steps.
fn best_over_steps(
    store: &mut ParamStore,
    steps: &[f64],
    analytic: &[(ParamId, Tensor)],
    mut value: impl FnMut(&mut ParamStore) -> f64,
) -> f64 {
    let mut best = f64::INFINITY;
    for &h in steps {
        let err = grad_check_against(store, h, analytic.to_vec(), &mut value);
        best = best.min(err);
        if best <= TOLERANCE {
            break;
        }
    }
    best
}

fn run_graph_check(
    name: &'static str,
    tamper: bool,
    mut setup: impl FnMut(&mut ChaCha8Rng) -> (ParamStore, Box<Builder>),
) -> CheckResult {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = rng_for(0xc4ec0, &[name.len() as u64, point as u64]);
        let (mut store, build) = setup(&mut rng);
        store.zero_grads();
        let mut g = Graph::new(&mut store);
        let loss = build(&mut g);
        g.backward(loss).expect("fresh graph");
        drop(g);
        let mut analytic: Vec<(ParamId, Tensor)> = store
            .ids()
            .filter(|id| store.get(*id).trainable)
            .map(|id| (id, store.grad(id).clone()))
            .collect();
        if tamper && point == 0 {
            if let Some((_, t)) = analytic.first_mut() {
                t.data_mut()[0] += 0.5;
            }
        }
        let err = best_over_steps(&mut store, &[1e-6, 5e-7, 2.5e-7], &analytic, |s| {
            let mut g = Graph::new(s);
            let loss = build(&mut g);
            g.out(loss).item()
        });
        worst = worst.max(err);
    }
    CheckResult {
        name,
        max_rel_err: worst,
        pass: worst <= TOLERANCE,
    }
}

struct SmallCritic {
    k1: ParamId,
    b1: ParamId,
    w: ParamId,
    b: ParamId,
}

impl SmallCritic {
    fn build(store: &mut ParamStore, rng: &mut impl Rng) -> SmallCritic {
        SmallCritic {
            k1: store.add("c.k1", Tensor::uniform(&[3, 2, 3, 3], 0.5, rng), true),
            b1: store.add("c.b1", Tensor::uniform(&[3], 0.3, rng), true),
            w: store.add("c.w", Tensor::uniform(&[3, 1], 0.5, rng), true),
            b: store.add("c.b", Tensor::uniform(&[1], 0.3, rng), true),
        }
    }
}

impl CriticNet for SmallCritic {
    fn scores(&self, g: &mut Graph, input: NodeId) -> NodeId {
        let h = g.conv2d(input, self.k1, 2, 1);
        let h = g.bias_channel(h, self.b1);
        let h = g.relu(h);
        let h = g.mean_pool(h);
        g.linear(h, self.w, self.b)
    }
}

fn adversarial_check(name: &'static str, form: GpForm, tamper: bool) -> CheckResult {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = rng_for(0xadef, &[form as u64, point as u64]);
        let mut store = ParamStore::new();
        let critic = SmallCritic::build(&mut store, &mut rng);
        let real = Tensor::uniform(&[2, 2, 6, 6], 0.8, &mut rng);
        let fake = Tensor::uniform(&[2, 2, 6, 6], 0.8, &mut rng);
        let u = vec![rng.gen::<f64>(), rng.gen::<f64>()];
        store.zero_grads();
        critic_loss_backward(&mut store, &critic, &real, &fake, 1.0, form, &u);
        let mut analytic: Vec<(ParamId, Tensor)> = store
            .ids()
            .map(|id| (id, store.grad(id).clone()))
            .collect();
        if tamper && point == 0 {
            analytic[0].1.data_mut()[0] += 0.5;
        }
        let err = best_over_steps(&mut store, &[1e-5, 5e-6, 2.5e-6], &analytic, |s| {
            adversarial_values(s, &critic, &real, &fake, 1.0, form, &u).critic_loss
        });
        worst = worst.max(err);
    }
    CheckResult {
        name,
        max_rel_err: worst,
        pass: worst <= TOLERANCE,
    }
}

/// Runs the whole suite. `corrupt` deliberately perturbs one analytic
/// gradient of the named check so the failure path can be exercised.
pub fn gradient_suite(corrupt: Option<&str>) -> Vec<CheckResult> {
    let tampered = |name: &str| corrupt == Some(name);
    let mut results = Vec::new();

    results.push(run_graph_check("linear", tampered("linear"), |rng| {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::uniform(&[3, 4], 1.0, rng), true);
        let b = store.add("b", Tensor::uniform(&[4], 1.0, rng), true);
        let x = Tensor::uniform(&[2, 3], 1.0, rng);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.input(x.clone());
                let y = g.linear(xi, w, b);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    for (name, stride, pad) in [("conv2d_s1", 1usize, 1usize), ("conv2d_s2", 2, 1)] {
        results.push(run_graph_check(name, tampered(name), move |rng| {
            let mut store = ParamStore::new();
            let k = store.add("k", Tensor::uniform(&[3, 2, 3, 3], 0.6, rng), true);
            let x = store.add("x", Tensor::uniform(&[2, 2, 5, 5], 0.8, rng), true);
            (
                store,
                Box::new(move |g: &mut Graph| {
                    let xi = g.param(x);
                    let y = g.conv2d(xi, k, stride, pad);
                    let y2 = g.mul(y, y);
                    g.sum_all(y2)
                }),
            )
        }));
    }

    results.push(run_graph_check("bias_channel", tampered("bias_channel"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[2, 3, 4, 4], 0.8, rng), true);
        let b = store.add("b", Tensor::uniform(&[3], 0.5, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let y = g.bias_channel(xi, b);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("relu", tampered("relu"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[2, 12], 1.0, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let y = g.relu(xi);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("clamp01", tampered("clamp01"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[2, 12], 1.5, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let y = g.clamp01(xi);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("upsample2x", tampered("upsample2x"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[1, 2, 3, 3], 1.0, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let y = g.upsample2x(xi);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("mean_pool", tampered("mean_pool"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[2, 3, 4, 4], 1.0, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let y = g.mean_pool(xi);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("flatten", tampered("flatten"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[2, 2, 3, 3], 1.0, rng), true);
        let w = store.add("w", Tensor::uniform(&[18, 2], 0.5, rng), true);
        let b = store.add("b", Tensor::uniform(&[2], 0.3, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let f = g.flatten(xi);
                let y = g.linear(f, w, b);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("residual_add", tampered("residual_add"), |rng| {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::uniform(&[2, 6], 1.0, rng), true);
        let b = store.add("b", Tensor::uniform(&[2, 6], 1.0, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let an = g.param(a);
                let bn = g.param(b);
                let y = g.residual_add(an, bn);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            }),
        )
    }));

    results.push(run_graph_check("sub_mul_scale", tampered("sub_mul_scale"), |rng| {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::uniform(&[2, 6], 1.0, rng), true);
        let b = store.add("b", Tensor::uniform(&[2, 6], 1.0, rng), true);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let an = g.param(a);
                let bn = g.param(b);
                let d = g.sub(an, bn);
                let m = g.mul(d, an);
                let s = g.scale(m, 0.37);
                g.sum_all(s)
            }),
        )
    }));

    results.push(run_graph_check("softmax", tampered("softmax"), |rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[2, 5], 1.5, rng), true);
        let w = Tensor::uniform(&[2, 5], 1.0, rng);
        (
            store,
            Box::new(move |g: &mut Graph| {
                let xi = g.param(x);
                let sm = g.softmax(xi);
                let wn = g.input(w.clone());
                let m = g.mul(sm, wn);
                g.sum_all(m)
            }),
        )
    }));

    results.push(run_graph_check(
        "softmax_cross_entropy",
        tampered("softmax_cross_entropy"),
        |rng| {
            let mut store = ParamStore::new();
            let x = store.add("x", Tensor::uniform(&[3, 5], 1.5, rng), true);
            let labels = vec![rng.gen_range(0..5), rng.gen_range(0..5), rng.gen_range(0..5)];
            (
                store,
                Box::new(move |g: &mut Graph| {
                    let xi = g.param(x);
                    g.softmax_cross_entropy(xi, &labels)
                }),
            )
        },
    ));

    results.push(run_graph_check(
        "reconstruction_loss",
        tampered("reconstruction_loss"),
        |rng| {
            let mut store = ParamStore::new();
            let p = store.add("pred", Tensor::uniform(&[2, 8], 1.0, rng), true);
            let target = Tensor::uniform(&[2, 8], 1.0, rng);
            (
                store,
                Box::new(move |g: &mut Graph| {
                    let pn = g.param(p);
                    let tn = g.input(target.clone());
                    reconstruction_loss(g, pn, tn)
                }),
            )
        },
    ));

    results.push(run_graph_check("l1_embed_loss", tampered("l1_embed_loss"), |rng| {
        let mut store = ParamStore::new();
        let s = store.add("s", Tensor::uniform(&[4, 3], 1.0, rng), true);
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, rng));
        (
            store,
            Box::new(move |g: &mut Graph| {
                let sn = g.param(s);
                l1_embed_loss(g, &teacher, sn)
            }),
        )
    }));

    results.push(run_graph_check(
        "rkd_distance_loss",
        tampered("rkd_distance_loss"),
        |rng| {
            let mut store = ParamStore::new();
            let s = store.add("s", Tensor::uniform(&[4, 3], 1.0, rng), true);
            let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, rng));
            (
                store,
                Box::new(move |g: &mut Graph| {
                    let sn = g.param(s);
                    rkd_distance_loss(g, &teacher, sn, 1.0).expect("non-degenerate")
                }),
            )
        },
    ));

    results.push(run_graph_check("rkd_angle_loss", tampered("rkd_angle_loss"), |rng| {
        let mut store = ParamStore::new();
        let s = store.add("s", Tensor::uniform(&[4, 3], 1.0, rng), true);
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, rng));
        (
            store,
            Box::new(move |g: &mut Graph| {
                let sn = g.param(s);
                rkd_angle_loss(g, &teacher, sn, 1.0).expect("non-degenerate")
            }),
        )
    }));

    results.push(run_graph_check("distill_loss", tampered("distill_loss"), |rng| {
        let mut store = ParamStore::new();
        let s = store.add("s", Tensor::uniform(&[4, 3], 1.0, rng), true);
        let w = store.add("ell0.w", Tensor::uniform(&[3, 5], 0.7, rng), true);
        let b = store.add("ell0.b", Tensor::uniform(&[5], 0.4, rng), true);
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 5], 1.0, rng));
        (
            store,
            Box::new(move |g: &mut Graph| {
                let sn = g.param(s);
                distill_loss(g, &teacher, sn, w, b, &DistillWeights::default())
                    .expect("non-degenerate")
                    .total
            }),
        )
    }));

    results.push(run_graph_check(
        "generator_adv_loss",
        tampered("generator_adv_loss"),
        |rng| {
            let mut store = ParamStore::new();
            let critic = SmallCritic::build(&mut store, rng);
            let fake = store.add("fake", Tensor::uniform(&[2, 2, 6, 6], 0.8, rng), true);
            for id in [critic.k1, critic.b1, critic.w, critic.b] {
                store.set_trainable(id, false);
            }
            (
                store,
                Box::new(move |g: &mut Graph| {
                    let f = g.param(fake);
                    generator_adv_loss(g, &critic, f)
                }),
            )
        },
    ));

    results.push(adversarial_check(
        "adversarial_gp_zero",
        GpForm::ZeroCentered,
        tampered("adversarial_gp_zero"),
    ));
    results.push(adversarial_check(
        "adversarial_gp_one",
        GpForm::OneCentered,
        tampered("adversarial_gp_one"),
    ));

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_cleanly() {
        let results = gradient_suite(None);
        assert!(results.len() >= 18);
        for r in &results {
            assert!(r.pass, "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corruption_fails_exactly_the_named_check() {
        let results = gradient_suite(Some("rkd_distance_loss"));
        for r in &results {
            if r.name == "rkd_distance_loss" {
                assert!(!r.pass, "corrupted check must fail");
            } else {
                assert!(r.pass, "{} unexpectedly failed", r.name);
            }
        }
    }
}
