//! Training objectives: reconstruction, adversarial (Wasserstein critic
//! with gradient penalty), relational distillation, embedding regression
//! and classification.
//!
//! Graph-valued losses return a scalar node so gradients flow to whatever
//! feeds them; the adversarial critic loss additionally needs the tangent
//! pass because its penalty term is itself a gradient norm.

use rand::Rng;

use crate::autodiff::{pairwise_sq_dists, Graph, NodeId, ParamId, ParamStore};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Embedding batches and relation index sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// A batch of embedding rows with a role tag.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub role: Role,
    pub rows: Tensor,
}

impl EmbeddingBatch {
    pub fn new(role: Role, rows: Tensor) -> Self {
        assert_eq!(rows.rank(), 2, "embedding batch must be n x d");
        assert!(rows.all_finite(), "embedding batch contains non-finite rows");
        EmbeddingBatch { role, rows }
    }

    pub fn teacher(rows: Tensor) -> Self {
        Self::new(Role::Teacher, rows)
    }

    pub fn count(&self) -> usize {
        self.rows.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.rows.dim(1)
    }
}

/// Ordered pair and triple index sets over a batch of size n:
/// all (i, j) with i != j and all (i, j, k) pairwise distinct, in
/// lexicographic order.
#[derive(Debug, Clone, Copy)]
pub struct RelationSets {
    pub n: usize,
}

impl RelationSets {
    pub fn new(n: usize) -> Self {
        RelationSets { n }
    }

    pub fn pair_count(&self) -> usize {
        self.n * (self.n - 1)
    }

    pub fn triple_count(&self) -> usize {
        self.n * (self.n - 1) * (self.n.saturating_sub(2))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.n;
        self.pairs().flat_map(move |(i, j)| {
            (0..n)
                .filter(move |&k| k != i && k != j)
                .map(move |k| (i, j, k))
        })
    }
}

/// Balancing weights of the combined distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
    pub huber_delta: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            alpha: 0.01,
            beta: 0.02,
            huber_delta: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise losses
// ---------------------------------------------------------------------------

/// Huber loss: quadratic within `delta`, linear outside, continuous first
/// derivative at the transition.
pub fn huber(a: f64, b: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "huber: delta must be positive");
    crate::autodiff::huber_parts(a, b, delta).0
}

/// Sum over the batch of squared L2 reconstruction error.
pub fn reconstruction_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    g.sum_all(sq)
}

/// Mean negative log-probability of the true class, evaluated on an
/// already-normalized probability matrix. Training uses the fused
/// [`Graph::softmax_cross_entropy`] instead for numerical stability.
pub fn classification_loss(probs: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(probs.rank(), 2, "classification_loss: probs must be B x K");
    let (bsz, k) = (probs.dim(0), probs.dim(1));
    assert_eq!(labels.len(), bsz, "classification_loss: labels length");
    let pd = probs.data();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        assert!(label < k, "classification_loss: label {label} out of range");
        let row = &pd[b * k..(b + 1) * k];
        let sum: f64 = row.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-9,
            "classification_loss: row {b} sums to {sum}, not 1"
        );
        total -= row[label].ln();
    }
    total / bsz as f64
}

// ---------------------------------------------------------------------------
// Relational distillation
// ---------------------------------------------------------------------------

/// Teacher-side mu-normalized squared distances over ordered pairs.
pub fn teacher_distance_relations(teacher: &EmbeddingBatch) -> Result<Vec<f64>> {
    assert!(teacher.count() >= 2, "need at least 2 rows for pair relations");
    let (dists, mu) = pairwise_sq_dists(&teacher.rows);
    if mu == 0.0 {
        return Err(CoreError::DegenerateTeacherBatch);
    }
    Ok(dists.iter().map(|d| d / mu).collect())
}

/// Teacher-side cosines over ordered triples, NaN where the teacher's
/// difference vectors are coincident (those triples are skipped).
pub fn teacher_angle_cosines(teacher: &EmbeddingBatch) -> Vec<f64> {
    let n = teacher.count();
    let d = teacher.dim();
    assert!(n >= 3, "need at least 3 rows for triple relations");
    let td = teacher.rows.data();
    let rel = RelationSets::new(n);
    let mut out = Vec::with_capacity(rel.triple_count());
    for (i, j, k) in rel.triples() {
        let mut dot = 0.0;
        let mut n1 = 0.0;
        let mut n2 = 0.0;
        for c in 0..d {
            let e1 = td[i * d + c] - td[j * d + c];
            let e2 = td[k * d + c] - td[j * d + c];
            dot += e1 * e2;
            n1 += e1 * e1;
            n2 += e2 * e2;
        }
        let (n1, n2) = (n1.sqrt(), n2.sqrt());
        if n1 < 1e-12 || n2 < 1e-12 {
            out.push(f64::NAN);
        } else {
            out.push(dot / (n1 * n2).max(1e-12));
        }
    }
    out
}

/// Pairwise-distance relational loss (second-order structure). Both sides
/// are mu-normalized, so the loss is invariant to uniform scaling of either
/// batch. Errors if either batch has all rows identical.
pub fn rkd_distance_loss(
    g: &mut Graph,
    teacher: &EmbeddingBatch,
    student: NodeId,
    delta: f64,
) -> Result<NodeId> {
    assert_eq!(
        teacher.count(),
        g.out(student).dim(0),
        "rkd_distance_loss: batch size mismatch"
    );
    let rel = teacher_distance_relations(teacher)?;
    g.rkd_distance(student, rel, delta)
}

/// Triple-angle relational loss (third-order structure). Cosines are
/// invariant to scaling and common translation of a batch. Triples with
/// coincident points on either side are skipped; more than 50% skipped is
/// an error.
pub fn rkd_angle_loss(
    g: &mut Graph,
    teacher: &EmbeddingBatch,
    student: NodeId,
    delta: f64,
) -> Result<NodeId> {
    assert_eq!(
        teacher.count(),
        g.out(student).dim(0),
        "rkd_angle_loss: batch size mismatch"
    );
    let cosines = teacher_angle_cosines(teacher);
    g.rkd_angle(student, cosines, delta)
}

/// First-order term: sum over rows of the Euclidean norm of
/// `t_i - ell0(s_i)`. The subgradient at a zero residual is defined as 0.
pub fn l1_embed_loss(g: &mut Graph, teacher: &EmbeddingBatch, mapped_student: NodeId) -> NodeId {
    g.embed_l1(mapped_student, &teacher.rows)
}

/// Raw term values of the combined distillation loss, for logging.
#[derive(Debug, Clone, Copy)]
pub struct DistillBreakdown {
    pub l1: f64,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
}

pub struct DistillOutput {
    pub total: NodeId,
    pub breakdown: DistillBreakdown,
}

/// Combined distillation loss `L1 + alpha * L2 + beta * L3`, with the
/// student mapped through the `ell0` linear layer for the L1 term only.
/// When both weights are zero the relational terms are not evaluated.
pub fn distill_loss(
    g: &mut Graph,
    teacher: &EmbeddingBatch,
    student: NodeId,
    ell0_w: ParamId,
    ell0_b: ParamId,
    weights: &DistillWeights,
) -> Result<DistillOutput> {
    let mapped = g.linear(student, ell0_w, ell0_b);
    let l1 = l1_embed_loss(g, teacher, mapped);
    let l1_value = g.out(l1).item();
    if weights.alpha == 0.0 && weights.beta == 0.0 {
        return Ok(DistillOutput {
            total: l1,
            breakdown: DistillBreakdown {
                l1: l1_value,
                l2: None,
                l3: None,
            },
        });
    }
    let l2 = rkd_distance_loss(g, teacher, student, weights.huber_delta)?;
    let l3 = rkd_angle_loss(g, teacher, student, weights.huber_delta)?;
    let l2_value = g.out(l2).item();
    let l3_value = g.out(l3).item();
    let l2w = g.scale(l2, weights.alpha);
    let l3w = g.scale(l3, weights.beta);
    let partial = g.residual_add(l1, l2w);
    let total = g.residual_add(partial, l3w);
    Ok(DistillOutput {
        total,
        breakdown: DistillBreakdown {
            l1: l1_value,
            l2: Some(l2_value),
            l3: Some(l3_value),
        },
    })
}

// ---------------------------------------------------------------------------
// Adversarial losses (Wasserstein critic with gradient penalty)
// ---------------------------------------------------------------------------

/// Anything that scores a batch of images with one scalar per sample.
pub trait CriticNet {
    /// Builds the critic forward pass; returns a `[B, 1]` score node.
    fn scores(&self, g: &mut Graph, input: NodeId) -> NodeId;
}

/// Gradient penalty form. The zero-centered `||grad||^2` form is the
/// default; the one-centered `(||grad|| - 1)^2` form is the common
/// alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpForm {
    ZeroCentered,
    OneCentered,
}

/// Value breakdown of one adversarial evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialParts {
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
    pub penalty: f64,
}

/// Per-sample straight-line interpolates `u * real + (1 - u) * fake`.
pub fn interpolate(real: &Tensor, fake: &Tensor, u: &[f64]) -> Tensor {
    assert_eq!(real.shape(), fake.shape(), "interpolate shape mismatch");
    assert_eq!(real.dim(0), u.len(), "interpolate: one u per sample");
    let per = real.len() / real.dim(0);
    let mut out = Tensor::zeros(real.shape());
    let od = out.data_mut();
    for (b, &ub) in u.iter().enumerate() {
        for i in 0..per {
            let idx = b * per + i;
            od[idx] = ub * real.data()[idx] + (1.0 - ub) * fake.data()[idx];
        }
    }
    out
}

pub fn draw_interpolation_factors(batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..batch).map(|_| rng.gen::<f64>()).collect()
}

fn batch_mean(g: &mut Graph, scores: NodeId) -> NodeId {
    let bsz = g.out(scores).dim(0);
    let s = g.sum_all(scores);
    g.scale(s, 1.0 / bsz as f64)
}

/// Per-sample gradient of the critic with respect to its input, plus the
/// penalty value under the given form.
fn input_gradients_and_penalty<C: CriticNet>(
    store: &mut ParamStore,
    critic: &C,
    interp: &Tensor,
    form: GpForm,
) -> (Tensor, f64) {
    let bsz = interp.dim(0);
    let mut g = Graph::new(store);
    let xc = g.input_with_grad(interp.clone());
    let scores = critic.scores(&mut g, xc);
    assert_eq!(
        g.out(scores).shape(),
        &[bsz, 1],
        "critic must produce one scalar per sample"
    );
    g.backward_input_grads(scores, Tensor::full(&[bsz, 1], 1.0))
        .expect("fresh graph");
    let grads = g.grad_of(xc).expect("input gradient").clone();
    let per = grads.len() / bsz;
    let mut penalty = 0.0;
    for b in 0..bsz {
        let norm_sq: f64 = grads.data()[b * per..(b + 1) * per]
            .iter()
            .map(|v| v * v)
            .sum();
        penalty += match form {
            GpForm::ZeroCentered => norm_sq,
            GpForm::OneCentered => {
                let n = norm_sq.sqrt();
                (n - 1.0) * (n - 1.0)
            }
        };
    }
    (grads, penalty / bsz as f64)
}

/// Evaluates critic and generator loss values at fixed interpolation
/// factors without touching any gradients.
pub fn adversarial_values<C: CriticNet>(
    store: &mut ParamStore,
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    form: GpForm,
    u: &[f64],
) -> AdversarialParts {
    assert_eq!(real.shape(), fake.shape(), "real/fake batch shape mismatch");
    assert!(gp_weight >= 0.0, "gp_weight must be non-negative");
    let (real_mean, fake_mean) = {
        let mut g = Graph::new(store);
        let rn = g.input(real.clone());
        let fnode = g.input(fake.clone());
        let rs = critic.scores(&mut g, rn);
        let fs = critic.scores(&mut g, fnode);
        let rm = batch_mean(&mut g, rs);
        let fm = batch_mean(&mut g, fs);
        (g.out(rm).item(), g.out(fm).item())
    };
    let penalty = if gp_weight > 0.0 {
        let interp = interpolate(real, fake, u);
        input_gradients_and_penalty(store, critic, &interp, form).1
    } else {
        0.0
    };
    AdversarialParts {
        critic_loss: fake_mean - real_mean + gp_weight * penalty,
        generator_loss: -fake_mean,
        real_mean,
        fake_mean,
        penalty,
    }
}

/// Spec-facing entry point: draws one interpolation factor per sample and
/// returns `(critic_loss, generator_loss)`.
pub fn adversarial_losses<C: CriticNet>(
    store: &mut ParamStore,
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    form: GpForm,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let u = draw_interpolation_factors(real.dim(0), rng);
    let parts = adversarial_values(store, critic, real, fake, gp_weight, form, &u);
    (parts.critic_loss, parts.generator_loss)
}

/// Accumulates the full critic-loss gradient (Wasserstein difference plus
/// gradient penalty) into the store and returns the value breakdown. The
/// fake batch is treated as a constant.
pub fn critic_loss_backward<C: CriticNet>(
    store: &mut ParamStore,
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    form: GpForm,
    u: &[f64],
) -> AdversarialParts {
    assert_eq!(real.shape(), fake.shape(), "real/fake batch shape mismatch");
    let bsz = real.dim(0);
    // Wasserstein part: mean fake - mean real.
    let (real_mean, fake_mean) = {
        let mut g = Graph::new(store);
        let rn = g.input(real.clone());
        let fnode = g.input(fake.clone());
        let rs = critic.scores(&mut g, rn);
        let fs = critic.scores(&mut g, fnode);
        let rm = batch_mean(&mut g, rs);
        let fm = batch_mean(&mut g, fs);
        let loss = g.sub(fm, rm);
        g.backward(loss).expect("fresh graph");
        (g.out(rm).item(), g.out(fm).item())
    };
    // Penalty part via the tangent pass.
    let mut penalty = 0.0;
    if gp_weight > 0.0 {
        let interp = interpolate(real, fake, u);
        let (grads, pen) = input_gradients_and_penalty(store, critic, &interp, form);
        penalty = pen;
        let per = grads.len() / bsz;
        // Seed with gp_weight * d(penalty)/d(grad_b).
        let mut seed = Tensor::zeros(grads.shape());
        for b in 0..bsz {
            let row = &grads.data()[b * per..(b + 1) * per];
            match form {
                GpForm::ZeroCentered => {
                    for i in 0..per {
                        seed.data_mut()[b * per + i] =
                            gp_weight * 2.0 * row[i] / bsz as f64;
                    }
                }
                GpForm::OneCentered => {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n >= 1e-12 {
                        let coef = gp_weight * 2.0 * (n - 1.0) / (n * bsz as f64);
                        for i in 0..per {
                            seed.data_mut()[b * per + i] = coef * row[i];
                        }
                    }
                }
            }
        }
        let mut g = Graph::new(store);
        let xc = g.input_with_grad(interpolate(real, fake, u));
        let scores = critic.scores(&mut g, xc);
        g.tangent_param_grads(&[(xc, seed)], scores, &Tensor::full(&[bsz, 1], 1.0), 1.0);
    }
    AdversarialParts {
        critic_loss: fake_mean - real_mean + gp_weight * penalty,
        generator_loss: -fake_mean,
        real_mean,
        fake_mean,
        penalty,
    }
}

/// Generator-side adversarial term `-mean(critic(fake))` built on an
/// existing graph so gradients flow into the generator.
pub fn generator_adv_loss<C: CriticNet>(g: &mut Graph, critic: &C, fake: NodeId) -> NodeId {
    let scores = critic.scores(g, fake);
    let m = batch_mean(g, scores);
    g.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_against};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0x105e5)
    }

    fn batch(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![n, d], data)
    }

    // -- huber ---------------------------------------------------------------

    #[test]
    fn huber_zero_at_equal_arguments() {
        assert_eq!(huber(1.7, 1.7, 1.0), 0.0);
    }

    #[test]
    fn huber_hand_values() {
        assert!((huber(0.0, 2.0, 1.0) - 1.5).abs() < 1e-15);
        assert!((huber(0.0, 0.5, 1.0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn huber_is_symmetric() {
        let mut r = rng();
        for _ in 0..100 {
            let a = r.gen::<f64>() * 4.0 - 2.0;
            let b = r.gen::<f64>() * 4.0 - 2.0;
            assert_eq!(huber(a, b, 1.0), huber(b, a, 1.0));
        }
    }

    #[test]
    fn huber_has_continuous_slope_at_delta() {
        // One-sided numeric slopes around |a-b| = delta must agree.
        let delta = 1.0;
        let a = 0.0;
        let h = 1e-7;
        let inner = (huber(a, delta, delta) - huber(a, delta - h, delta)) / h;
        let outer = (huber(a, delta + h, delta) - huber(a, delta, delta)) / h;
        assert!((inner - outer).abs() <= 1e-6, "slope gap {}", inner - outer);
    }

    // -- reconstruction -------------------------------------------------------

    #[test]
    fn reconstruction_zero_on_equal_batches() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let t = Tensor::full(&[2, 3, 2, 2], 0.4);
        let p = g.input(t.clone());
        let q = g.input(t);
        let l = reconstruction_loss(&mut g, p, q);
        assert_eq!(g.out(l).item(), 0.0);
    }

    #[test]
    fn reconstruction_counts_squared_entry() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let mut a = Tensor::zeros(&[1, 4]);
        a.data_mut()[2] = 2.0;
        let p = g.input(a);
        let q = g.input(Tensor::zeros(&[1, 4]));
        let l = reconstruction_loss(&mut g, p, q);
        assert_eq!(g.out(l).item(), 4.0);
    }

    #[test]
    fn reconstruction_gradient_is_two_times_residual() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let p = store.add("pred", Tensor::uniform(&[2, 5], 1.0, &mut r), true);
        let target = Tensor::uniform(&[2, 5], 1.0, &mut r);
        let err = grad_check(&mut store, 1e-6, |g| {
            let pn = g.param(p);
            let tn = g.input(target.clone());
            reconstruction_loss(g, pn, tn)
        });
        assert!(err <= 1e-6, "rel err {err}");
        // And the closed form: grad = 2 (pred - target).
        store.zero_grads();
        let mut g = Graph::new(&mut store);
        let pn = g.param(p);
        let tn = g.input(target.clone());
        let l = reconstruction_loss(&mut g, pn, tn);
        g.backward(l).unwrap();
        drop(g);
        for i in 0..10 {
            let expect = 2.0 * (store.value(p).data()[i] - target.data()[i]);
            assert!((store.grad(p).data()[i] - expect).abs() < 1e-12);
        }
    }

    // -- relational ------------------------------------------------------------

    #[test]
    fn relation_set_counts() {
        let r = RelationSets::new(5);
        assert_eq!(r.pairs().count(), 20);
        assert_eq!(r.pair_count(), 20);
        assert_eq!(r.triples().count(), 60);
        assert_eq!(r.triple_count(), 60);
    }

    #[test]
    fn rkd_distance_zero_when_student_equals_teacher() {
        let rows = batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let teacher = EmbeddingBatch::teacher(rows.clone());
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let s = g.input_with_grad(rows);
        let l = rkd_distance_loss(&mut g, &teacher, s, 1.0).unwrap();
        assert!(g.out(l).item().abs() < 1e-15);
    }

    #[test]
    fn rkd_distance_invariant_to_uniform_scaling() {
        let mut r = rng();
        let rows = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let student = Tensor::uniform(&[5, 4], 1.0, &mut r);
        let teacher = EmbeddingBatch::teacher(rows);
        let eval = |s: &Tensor| {
            let mut store = ParamStore::new();
            let mut g = Graph::new(&mut store);
            let sn = g.input(s.clone());
            let l = rkd_distance_loss(&mut g, &teacher, sn, 1.0).unwrap();
            g.out(l).item()
        };
        let base = eval(&student);
        for scale in [3.0, 0.25, 17.0] {
            let scaled = Tensor::new(
                student.shape().to_vec(),
                student.iter().map(|v| v * scale).collect(),
            );
            assert!((eval(&scaled) - base).abs() <= 1e-10);
        }
        // Teacher scaled by 3 with student = teacher stays zero.
        let t3 = Tensor::new(
            teacher.rows.shape().to_vec(),
            teacher.rows.iter().map(|v| 3.0 * v).collect(),
        );
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(teacher.rows.clone());
        let l = rkd_distance_loss(&mut g, &EmbeddingBatch::teacher(t3), sn, 1.0).unwrap();
        assert!(g.out(l).item().abs() <= 1e-10);
    }

    #[test]
    fn rkd_distance_hand_batch_golden() {
        // T = {(0,0),(1,0),(0,1)}, S = {(0,0),(2,0),(1,1)}.
        // mu_t = 4/3, mu_s = 8/3; normalized teacher {0.75 x4, 1.5 x2},
        // student {1.5 x2, 0.75 x4}; total = 4 * 0.5 * 0.75^2 = 1.125.
        let teacher = EmbeddingBatch::teacher(batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        let student = batch(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 1.0]]);
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(student);
        let l = rkd_distance_loss(&mut g, &teacher, sn, 1.0).unwrap();
        assert!((g.out(l).item() - 1.125).abs() < 1e-12);
    }

    #[test]
    fn rkd_distance_rejects_degenerate_student() {
        let teacher = EmbeddingBatch::teacher(batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        let student = Tensor::full(&[3, 2], 0.7);
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(student);
        let err = rkd_distance_loss(&mut g, &teacher, sn, 1.0);
        assert!(matches!(err, Err(CoreError::DegenerateStudentBatch)));
    }

    #[test]
    fn rkd_distance_gradient_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..5 {
            let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, &mut r));
            let mut store = ParamStore::new();
            let sp = store.add("s", Tensor::uniform(&[4, 3], 1.0, &mut r), true);
            let err = grad_check(&mut store, 1e-6, |g| {
                let sn = g.param(sp);
                rkd_distance_loss(g, &teacher, sn, 1.0).unwrap()
            });
            assert!(err <= 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn rkd_angle_zero_when_student_equals_teacher() {
        let rows = batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[2.0, 1.5]]);
        let teacher = EmbeddingBatch::teacher(rows.clone());
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(rows);
        let l = rkd_angle_loss(&mut g, &teacher, sn, 1.0).unwrap();
        assert!(g.out(l).item().abs() < 1e-15);
    }

    #[test]
    fn rkd_angle_invariant_to_scale_and_translation() {
        let mut r = rng();
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, &mut r));
        let student = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let eval = |s: &Tensor| {
            let mut store = ParamStore::new();
            let mut g = Graph::new(&mut store);
            let sn = g.input(s.clone());
            let l = rkd_angle_loss(&mut g, &teacher, sn, 1.0).unwrap();
            g.out(l).item()
        };
        let base = eval(&student);
        for (c, v) in [(2.5, 0.3), (-1.5, -0.7), (0.1, 12.0)] {
            let mapped = Tensor::new(
                student.shape().to_vec(),
                student
                    .data()
                    .chunks(3)
                    .flat_map(|row| row.iter().map(move |x| c * x + v))
                    .collect(),
            );
            assert!(
                (eval(&mapped) - base).abs() <= 1e-10,
                "c={c} v={v}: {} vs {base}",
                eval(&mapped)
            );
        }
    }

    #[test]
    fn rkd_angle_right_angle_versus_collinear_golden() {
        // Teacher {(0,0),(1,0),(0,1)} vs student {(0,0),(1,0),(2,0)}:
        // vertex 0 contributes 2 * huber(0, 1) = 1, the other four ordered
        // triples together contribute exactly 2.5; total 3.5.
        let teacher = EmbeddingBatch::teacher(batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        let student = batch(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(student);
        let l = rkd_angle_loss(&mut g, &teacher, sn, 1.0).unwrap();
        assert!((g.out(l).item() - 3.5).abs() < 1e-12, "{}", g.out(l).item());
    }

    #[test]
    fn rkd_angle_rejects_mostly_coincident_student() {
        let teacher = EmbeddingBatch::teacher(batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        let student = Tensor::full(&[3, 2], 0.2);
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(student);
        let err = rkd_angle_loss(&mut g, &teacher, sn, 1.0);
        assert!(matches!(err, Err(CoreError::TooManySkippedTriples { .. })));
    }

    #[test]
    fn rkd_angle_gradient_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..5 {
            let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, &mut r));
            let mut store = ParamStore::new();
            let sp = store.add("s", Tensor::uniform(&[4, 3], 1.0, &mut r), true);
            let err = grad_check(&mut store, 1e-6, |g| {
                let sn = g.param(sp);
                rkd_angle_loss(g, &teacher, sn, 1.0).unwrap()
            });
            assert!(err <= 1e-5, "rel err {err}");
        }
    }

    // -- L1 and combined -------------------------------------------------------

    #[test]
    fn l1_zero_for_identity_map_and_equal_batches() {
        let rows = batch(&[&[0.3, -0.2], &[1.0, 0.5], &[0.0, 1.0]]);
        let teacher = EmbeddingBatch::teacher(rows.clone());
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(rows);
        let l = l1_embed_loss(&mut g, &teacher, sn);
        assert_eq!(g.out(l).item(), 0.0);
    }

    #[test]
    fn l1_hand_euclidean_norm() {
        let teacher = EmbeddingBatch::teacher(batch(&[&[3.0, 4.0]]));
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let sn = g.input(Tensor::zeros(&[1, 2]));
        let l = l1_embed_loss(&mut g, &teacher, sn);
        assert_eq!(g.out(l).item(), 5.0);
    }

    #[test]
    fn l1_subgradient_at_zero_residual_is_zero() {
        let rows = batch(&[&[0.5, 0.5]]);
        let teacher = EmbeddingBatch::teacher(rows.clone());
        let mut store = ParamStore::new();
        let sp = store.add("s", rows, true);
        let mut g = Graph::new(&mut store);
        let sn = g.param(sp);
        let l = l1_embed_loss(&mut g, &teacher, sn);
        g.backward(l).unwrap();
        drop(g);
        assert!(store.grad(sp).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let mut r = rng();
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, &mut r));
        let mut store = ParamStore::new();
        let sp = store.add("s", Tensor::uniform(&[4, 3], 1.0, &mut r), true);
        let err = grad_check(&mut store, 1e-6, |g| {
            let sn = g.param(sp);
            l1_embed_loss(g, &teacher, sn)
        });
        assert!(err <= 1e-6, "rel err {err}");
    }

    fn identity_ell0(store: &mut ParamStore, d: usize) -> (ParamId, ParamId) {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        let wid = store.add("ell0.w", w, true);
        let bid = store.add("ell0.b", Tensor::zeros(&[d]), true);
        (wid, bid)
    }

    #[test]
    fn distill_with_zero_weights_equals_l1() {
        let mut r = rng();
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[4, 3], 1.0, &mut r));
        let student = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let mut store = ParamStore::new();
        let (w, b) = identity_ell0(&mut store, 3);
        let mut g = Graph::new(&mut store);
        let sn = g.input(student.clone());
        let out = distill_loss(
            &mut g,
            &teacher,
            sn,
            w,
            b,
            &DistillWeights {
                alpha: 0.0,
                beta: 0.0,
                huber_delta: 1.0,
            },
        )
        .unwrap();
        let total = g.out(out.total).item();
        let l1 = {
            let sn2 = g.input(student);
            let mapped = g.linear(sn2, w, b);
            let l = l1_embed_loss(&mut g, &teacher, mapped);
            g.out(l).item()
        };
        assert_eq!(total, l1);
        assert!(out.breakdown.l2.is_none() && out.breakdown.l3.is_none());
    }

    #[test]
    fn distill_zero_on_exact_match_with_identity_map() {
        let rows = batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 2.0]]);
        let teacher = EmbeddingBatch::teacher(rows.clone());
        let mut store = ParamStore::new();
        let (w, b) = identity_ell0(&mut store, 2);
        let mut g = Graph::new(&mut store);
        let sn = g.input(rows);
        let out = distill_loss(&mut g, &teacher, sn, w, b, &DistillWeights::default()).unwrap();
        assert!(g.out(out.total).item().abs() < 1e-12);
    }

    #[test]
    fn distill_combines_terms_with_default_weights_exactly() {
        let mut r = rng();
        let teacher = EmbeddingBatch::teacher(Tensor::uniform(&[5, 3], 1.0, &mut r));
        let student = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let mut store = ParamStore::new();
        let (w, b) = identity_ell0(&mut store, 3);
        let mut g = Graph::new(&mut store);
        let sn = g.input(student);
        let out = distill_loss(&mut g, &teacher, sn, w, b, &DistillWeights::default()).unwrap();
        let total = g.out(out.total).item();
        let expect =
            (out.breakdown.l1 + 0.01 * out.breakdown.l2.unwrap()) + 0.02 * out.breakdown.l3.unwrap();
        assert_eq!(total, expect);
    }

    // -- classification ---------------------------------------------------------

    #[test]
    fn classification_one_hot_correct_is_zero() {
        let probs = batch(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(classification_loss(&probs, &[1]), 0.0);
    }

    #[test]
    fn classification_uniform_is_ln_k() {
        let k = 5;
        let probs = Tensor::full(&[2, k], 1.0 / k as f64);
        let l = classification_loss(&probs, &[0, 3]);
        assert!((l - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_quarter_probability_is_ln_four() {
        let probs = batch(&[&[0.25, 0.75]]);
        let l = classification_loss(&probs, &[0]);
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fused_cross_entropy_matches_value_path() {
        let mut r = rng();
        let logits = Tensor::uniform(&[4, 6], 2.0, &mut r);
        let labels = vec![0, 2, 5, 3];
        let mut store = ParamStore::new();
        let mut g = Graph::new(&mut store);
        let ln = g.input(logits.clone());
        let fused = g.softmax_cross_entropy(ln, &labels);
        let sm = g.softmax(ln);
        let probs = g.out(sm).clone();
        let fused_value = g.out(fused).item();
        assert!((fused_value - classification_loss(&probs, &labels)).abs() < 1e-12);
    }

    // -- adversarial -------------------------------------------------------------

    /// Critic that scores by an inner product with a weight image.
    struct LinearCritic {
        w: ParamId,
        b: ParamId,
        flat: usize,
    }

    impl LinearCritic {
        fn new(store: &mut ParamStore, flat: usize, rng: &mut impl Rng) -> Self {
            let w = store.add("critic.w", Tensor::uniform(&[flat, 1], 0.5, rng), true);
            let b = store.add("critic.b", Tensor::uniform(&[1], 0.5, rng), true);
            LinearCritic { w, b, flat }
        }
    }

    impl CriticNet for LinearCritic {
        fn scores(&self, g: &mut Graph, input: NodeId) -> NodeId {
            let f = g.flatten(input);
            assert_eq!(g.out(f).dim(1), self.flat);
            g.linear(f, self.w, self.b)
        }
    }

    #[test]
    fn linear_critic_penalty_is_weight_norm_squared() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let critic = LinearCritic::new(&mut store, 12, &mut r);
        let w_norm_sq: f64 = store.value(critic.w).iter().map(|v| v * v).sum();
        let real = Tensor::uniform(&[3, 3, 2, 2], 1.0, &mut r);
        let fake = Tensor::uniform(&[3, 3, 2, 2], 1.0, &mut r);
        let u = vec![0.3, 0.9, 0.1];
        let parts = adversarial_values(&mut store, &critic, &real, &fake, 1.0, GpForm::ZeroCentered, &u);
        assert!((parts.penalty - w_norm_sq).abs() < 1e-12);
        // Independent of the interpolates: different u, same penalty.
        let parts2 =
            adversarial_values(&mut store, &critic, &real, &fake, 1.0, GpForm::ZeroCentered, &[0.7, 0.2, 0.5]);
        assert!((parts2.penalty - w_norm_sq).abs() < 1e-12);
    }

    #[test]
    fn zero_critic_on_equal_batches_has_zero_loss() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let w = store.add("critic.w", Tensor::zeros(&[12, 1]), true);
        let b = store.add("critic.b", Tensor::zeros(&[1]), true);
        let critic = LinearCritic { w, b, flat: 12 };
        let x = Tensor::uniform(&[2, 3, 2, 2], 1.0, &mut r);
        let u = vec![0.5, 0.5];
        let parts = adversarial_values(&mut store, &critic, &x, &x.clone(), 1.0, GpForm::ZeroCentered, &u);
        assert_eq!(parts.critic_loss, 0.0);
        assert_eq!(parts.generator_loss, 0.0);
    }

    #[test]
    fn zero_gp_weight_reduces_to_wasserstein_difference() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let critic = LinearCritic::new(&mut store, 12, &mut r);
        let real = Tensor::uniform(&[3, 3, 2, 2], 1.0, &mut r);
        let fake = Tensor::uniform(&[3, 3, 2, 2], 1.0, &mut r);
        let u = vec![0.3, 0.9, 0.1];
        let parts = adversarial_values(&mut store, &critic, &real, &fake, 0.0, GpForm::ZeroCentered, &u);
        assert_eq!(parts.critic_loss, parts.fake_mean - parts.real_mean);
    }

    /// Small convolutional critic for the finite-difference checks.
    struct ConvCritic {
        k1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    }

    impl ConvCritic {
        fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
            ConvCritic {
                k1: store.add("c.k1", Tensor::uniform(&[3, 2, 3, 3], 0.5, rng), true),
                b1: store.add("c.b1", Tensor::uniform(&[3], 0.3, rng), true),
                w2: store.add("c.w2", Tensor::uniform(&[3, 1], 0.5, rng), true),
                b2: store.add("c.b2", Tensor::uniform(&[1], 0.3, rng), true),
            }
        }
    }

    impl CriticNet for ConvCritic {
        fn scores(&self, g: &mut Graph, input: NodeId) -> NodeId {
            let h = g.conv2d(input, self.k1, 2, 1);
            let h = g.bias_channel(h, self.b1);
            let h = g.relu(h);
            let h = g.mean_pool(h);
            g.linear(h, self.w2, self.b2)
        }
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let mut r = rng();
        for form in [GpForm::ZeroCentered, GpForm::OneCentered] {
            let mut store = ParamStore::new();
            let critic = ConvCritic::new(&mut store, &mut r);
            let real = Tensor::uniform(&[2, 2, 6, 6], 0.8, &mut r);
            let fake = Tensor::uniform(&[2, 2, 6, 6], 0.8, &mut r);
            let u = vec![0.4, 0.75];
            store.zero_grads();
            critic_loss_backward(&mut store, &critic, &real, &fake, 1.0, form, &u);
            let analytic: Vec<(ParamId, Tensor)> = store
                .ids()
                .map(|id| (id, store.grad(id).clone()))
                .collect();
            let err = grad_check_against(&mut store, 1e-5, analytic, |s| {
                adversarial_values(s, &critic, &real, &fake, 1.0, form, &u).critic_loss
            });
            assert!(err <= 1e-5, "{form:?}: rel err {err}");
        }
    }

    #[test]
    fn generator_loss_gradient_flows_through_fake() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let critic = ConvCritic::new(&mut store, &mut r);
        // "Generator" here is just a trainable fake image.
        let fake = store.add("fake", Tensor::uniform(&[2, 2, 6, 6], 0.8, &mut r), true);
        // Freeze the critic so only the fake image collects gradient.
        for id in [critic.k1, critic.b1, critic.w2, critic.b2] {
            store.set_trainable(id, false);
        }
        let err = grad_check(&mut store, 1e-6, |g| {
            let f = g.param(fake);
            generator_adv_loss(g, &critic, f)
        });
        assert!(err <= 1e-5, "rel err {err}");
    }
}
