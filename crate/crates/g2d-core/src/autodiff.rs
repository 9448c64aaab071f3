//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations eagerly (forward values are computed as
//! nodes are pushed) and replays them in reverse to accumulate gradients
//! into [`Parameter`]s held by a [`ParamStore`]. The op set is exactly what
//! the training pipeline needs; there is no control flow inside graphs and
//! no broadcasting beyond bias addition.
//!
//! Shape violations are programmer errors and panic. State misuse (backward
//! before forward, backward twice on one tape) returns an error.
//!
//! The module also provides:
//! - [`grad_check`]: central finite-difference verification for any scalar
//!   loss built on a graph, reporting the max relative error
//!   `|analytic - numeric| / max(1, |numeric|)`.
//! - [`Graph::tangent_param_grads`]: a forward-tangent-then-reverse sweep
//!   over a recorded tape, used to differentiate gradient-norm penalties
//!   (whose value is itself a derivative) with respect to parameters.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Owns all parameters of one training stage. Graphs borrow the store
/// mutably for their lifetime; gradients accumulate across backward calls
/// until [`ParamStore::zero_grads`] is called.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    /// Combined bit-exact hash over the listed parameter values, used for
    /// freeze checks across training stages.
    pub fn bit_hash(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            let t = self.value(*id).bit_hash();
            for byte in t.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Op set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf.
    Input,
    /// Leaf whose gradient is retained for the caller (interpolates, tests).
    InputGrad,
    /// Parameter leaf.
    Param(ParamId),
    /// inputs: [x, w, b]; x:[B,I] w:[I,O] b:[O] -> [B,O]
    Linear,
    /// inputs: [x, k]; cross-correlation, no kernel flip.
    Conv2d { stride: usize, pad: usize },
    /// inputs: [x, b]; per-channel bias over [B,C,H,W].
    BiasChannel,
    Relu,
    Clamp01,
    /// Nearest-neighbour 2x spatial upsampling.
    Upsample2x,
    /// Global spatial mean: [B,C,H,W] -> [B,C].
    MeanPool,
    /// [B, rest..] -> [B, prod(rest)].
    Flatten,
    /// inputs: [a, b]; a + b, same shape.
    ResidualAdd,
    /// inputs: [a, b]; a - b.
    Sub,
    /// inputs: [a, b]; elementwise product.
    Mul,
    Scale(f64),
    /// Sum of all entries -> scalar.
    SumAll,
    /// Row softmax over [B,K].
    Softmax,
    /// Fused row softmax + mean negative log-likelihood -> scalar.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Sum over rows of ||t_i - m_i|| for constant teacher t -> scalar.
    EmbedL1 { teacher: Tensor },
    /// Relational distance loss against precomputed normalized teacher
    /// squared distances over ordered pairs -> scalar.
    RkdDistance { teacher_rel: Vec<f64>, delta: f64 },
    /// Relational angle loss against precomputed teacher cosines over
    /// ordered triples (skips marked with NaN) -> scalar.
    RkdAngle { teacher_cos: Vec<f64>, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    out: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Forward,
    Consumed,
}

pub struct Graph<'s> {
    store: &'s mut ParamStore,
    nodes: Vec<Node>,
    /// Node gradients from the last backward; kept for InputGrad leaves.
    grads: Vec<Option<Tensor>>,
    /// Memoized param leaf nodes so one parameter maps to one node.
    param_nodes: Vec<Option<NodeId>>,
    state: TapeState,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.rank(), 2, "expected rank-2 tensor, got {:?}", t.shape());
    (t.dim(0), t.dim(1))
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.rank(), 4, "expected rank-4 tensor, got {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2), t.dim(3))
}

/// Huber value and its derivative with respect to the second argument.
pub(crate) fn huber_parts(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let d = a - b;
    if d.abs() <= delta {
        (0.5 * d * d, -d)
    } else {
        (delta * (d.abs() - 0.5 * delta), delta * -d.signum())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore) -> Self {
        let n = store.len();
        Graph {
            store,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: vec![None; n],
            state: TapeState::Forward,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn out(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    /// Gradient of the last backward pass at an `input_with_grad` leaf.
    pub fn grad_of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, out: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            out,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    // -- leaves ------------------------------------------------------------

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, vec![], t, false)
    }

    /// Input that participates in differentiation; its gradient can be read
    /// back with [`Graph::grad_of`] after backward.
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(Op::InputGrad, vec![], t, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let p = self.store.get(id);
        let node = self.push(Op::Param(id), vec![], p.value.clone(), p.trainable);
        self.param_nodes[id.0] = Some(node);
        node
    }

    // -- layers ------------------------------------------------------------

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wn = self.param(w);
        let bn = self.param(b);
        let (bsz, i_dim) = dims2(self.out(x));
        let (wi, wo) = dims2(self.out(wn));
        assert_eq!(i_dim, wi, "linear: input dim {i_dim} vs weight rows {wi}");
        assert_eq!(self.out(bn).shape(), &[wo], "linear: bias shape");
        let xd = self.out(x).data();
        let wd = self.out(wn).data();
        let bd = self.out(bn).data();
        let mut out = vec![0.0; bsz * wo];
        for bi in 0..bsz {
            let orow = bi * wo;
            out[orow..orow + wo].copy_from_slice(bd);
            for i in 0..i_dim {
                let xv = xd[bi * i_dim + i];
                if xv == 0.0 {
                    continue;
                }
                let wrow = i * wo;
                for o in 0..wo {
                    out[orow + o] += xv * wd[wrow + o];
                }
            }
        }
        let needs = self.any_needs_grad(&[x, wn, bn]);
        self.push(
            Op::Linear,
            vec![x, wn, bn],
            Tensor::new(vec![bsz, wo], out),
            needs,
        )
    }

    pub fn conv2d(&mut self, x: NodeId, k: ParamId, stride: usize, pad: usize) -> NodeId {
        let kn = self.param(k);
        assert!(stride > 0, "conv2d: stride must be positive");
        let (bsz, c_in, h, w) = dims4(self.out(x));
        let (k_out, c_k, kh, kw) = dims4(self.out(kn));
        assert_eq!(c_in, c_k, "conv2d: input channels {c_in} vs kernel {c_k}");
        assert!(
            kh <= h + 2 * pad && kw <= w + 2 * pad,
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        assert!(ho > 0 && wo > 0, "conv2d: non-positive output dims");
        let out = kernels::conv2d_forward(
            self.out(x),
            self.out(kn),
            stride,
            pad,
            (bsz, c_in, h, w),
            (k_out, kh, kw, ho, wo),
        );
        let needs = self.any_needs_grad(&[x, kn]);
        self.push(Op::Conv2d { stride, pad }, vec![x, kn], out, needs)
    }

    pub fn bias_channel(&mut self, x: NodeId, b: ParamId) -> NodeId {
        let bn = self.param(b);
        let (bsz, c, h, w) = dims4(self.out(x));
        assert_eq!(self.out(bn).shape(), &[c], "bias_channel: bias shape");
        let xd = self.out(x).data();
        let bd = self.out(bn).data();
        let mut out = xd.to_vec();
        let plane = h * w;
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let bv = bd[ci];
                for v in &mut out[base..base + plane] {
                    *v += bv;
                }
            }
        }
        let needs = self.any_needs_grad(&[x, bn]);
        self.push(
            Op::BiasChannel,
            vec![x, bn],
            Tensor::new(vec![bsz, c, h, w], out),
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.out(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.out(x).shape().to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Relu, vec![x], Tensor::new(shape, out), needs)
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.out(x).iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let shape = self.out(x).shape().to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Clamp01, vec![x], Tensor::new(shape, out), needs)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let (bsz, c, h, w) = dims4(self.out(x));
        let xd = self.out(x).data();
        let mut out = vec![0.0; bsz * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for bc in 0..bsz * c {
            for y in 0..h {
                let src = bc * h * w + y * w;
                for dy in 0..2 {
                    let dst = bc * h2 * w2 + (2 * y + dy) * w2;
                    for x_ in 0..w {
                        let v = xd[src + x_];
                        out[dst + 2 * x_] = v;
                        out[dst + 2 * x_ + 1] = v;
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            Op::Upsample2x,
            vec![x],
            Tensor::new(vec![bsz, c, h2, w2], out),
            needs,
        )
    }

    pub fn mean_pool(&mut self, x: NodeId) -> NodeId {
        let (bsz, c, h, w) = dims4(self.out(x));
        let xd = self.out(x).data();
        let plane = h * w;
        let mut out = vec![0.0; bsz * c];
        for bc in 0..bsz * c {
            let s: f64 = xd[bc * plane..(bc + 1) * plane].iter().sum();
            out[bc] = s / plane as f64;
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            Op::MeanPool,
            vec![x],
            Tensor::new(vec![bsz, c], out),
            needs,
        )
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let shape = self.out(x).shape();
        assert!(shape.len() >= 2, "flatten: rank must be >= 2");
        let bsz = shape[0];
        let rest: usize = shape[1..].iter().product();
        let out = Tensor::new(vec![bsz, rest], self.out(x).data().to_vec());
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Flatten, vec![x], out, needs)
    }

    pub fn residual_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.out(a).shape(),
            self.out(b).shape(),
            "residual_add shape mismatch"
        );
        let out: Vec<f64> = self
            .out(a)
            .iter()
            .zip(self.out(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.out(a).shape().to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::ResidualAdd, vec![a, b], Tensor::new(shape, out), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.out(a).shape(), self.out(b).shape(), "sub shape mismatch");
        let out: Vec<f64> = self
            .out(a)
            .iter()
            .zip(self.out(b).iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.out(a).shape().to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::Sub, vec![a, b], Tensor::new(shape, out), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.out(a).shape(), self.out(b).shape(), "mul shape mismatch");
        let out: Vec<f64> = self
            .out(a)
            .iter()
            .zip(self.out(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.out(a).shape().to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        self.push(Op::Mul, vec![a, b], Tensor::new(shape, out), needs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out: Vec<f64> = self.out(x).iter().map(|&v| k * v).collect();
        let shape = self.out(x).shape().to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Scale(k), vec![x], Tensor::new(shape, out), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.out(x).iter().sum();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::SumAll, vec![x], Tensor::scalar(s), needs)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (bsz, k) = dims2(self.out(x));
        let xd = self.out(x).data();
        let mut out = vec![0.0; bsz * k];
        for b in 0..bsz {
            let row = &xd[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[b * k + i] = e;
                z += e;
            }
            for v in &mut out[b * k..(b + 1) * k] {
                *v /= z;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Softmax, vec![x], Tensor::new(vec![bsz, k], out), needs)
    }

    /// Fused softmax + cross-entropy: mean over the batch of the negative
    /// log-probability of the true class.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (bsz, k) = dims2(self.out(logits));
        assert_eq!(labels.len(), bsz, "softmax_cross_entropy: labels length");
        assert!(
            labels.iter().all(|&l| l < k),
            "softmax_cross_entropy: label out of range"
        );
        let xd = self.out(logits).data();
        let mut total = 0.0;
        for b in 0..bsz {
            let row = &xd[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[b]];
        }
        let needs = self.nodes[logits.0].needs_grad;
        self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            Tensor::scalar(total / bsz as f64),
            needs,
        )
    }

    /// Sum over rows of the Euclidean norm of `teacher_row - student_row`.
    pub fn embed_l1(&mut self, mapped_student: NodeId, teacher: &Tensor) -> NodeId {
        assert_eq!(
            self.out(mapped_student).shape(),
            teacher.shape(),
            "embed_l1: student/teacher shape mismatch"
        );
        let (n, d) = dims2(teacher);
        let md = self.out(mapped_student).data();
        let td = teacher.data();
        let mut total = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                let r = td[i * d + j] - md[i * d + j];
                s += r * r;
            }
            total += s.sqrt();
        }
        let needs = self.nodes[mapped_student.0].needs_grad;
        self.push(
            Op::EmbedL1 {
                teacher: teacher.clone(),
            },
            vec![mapped_student],
            Tensor::scalar(total),
            needs,
        )
    }

    /// Relational distance loss. `teacher_rel` holds the teacher's
    /// mu-normalized squared distances over ordered pairs in lexicographic
    /// (i, j) order. Errors if the student batch is degenerate.
    pub fn rkd_distance(
        &mut self,
        student: NodeId,
        teacher_rel: Vec<f64>,
        delta: f64,
    ) -> Result<NodeId> {
        let (n, _d) = dims2(self.out(student));
        assert_eq!(
            teacher_rel.len(),
            n * (n - 1),
            "rkd_distance: teacher relation count"
        );
        let (dists, mu_s) = pairwise_sq_dists(self.out(student));
        if mu_s == 0.0 {
            return Err(CoreError::DegenerateStudentBatch);
        }
        let mut total = 0.0;
        for (a, dist) in teacher_rel.iter().zip(dists.iter()) {
            total += huber_parts(*a, dist / mu_s, delta).0;
        }
        let needs = self.nodes[student.0].needs_grad;
        Ok(self.push(
            Op::RkdDistance { teacher_rel, delta },
            vec![student],
            Tensor::scalar(total),
            needs,
        ))
    }

    /// Relational angle loss. `teacher_cos` holds the teacher cosine for
    /// each ordered triple in lexicographic (i, j, k) order, with NaN
    /// marking triples the teacher side already skipped. Triples whose
    /// student difference norms fall under the coincidence floor are
    /// skipped as well; errors if more than half of all triples end up
    /// skipped.
    pub fn rkd_angle(
        &mut self,
        student: NodeId,
        teacher_cos: Vec<f64>,
        delta: f64,
    ) -> Result<NodeId> {
        let (n, d) = dims2(self.out(student));
        assert!(n >= 3, "rkd_angle: need at least 3 rows");
        assert_eq!(
            teacher_cos.len(),
            n * (n - 1) * (n - 2),
            "rkd_angle: teacher cosine count"
        );
        let sd = self.out(student).data();
        let total_triples = teacher_cos.len();
        let mut skipped = 0usize;
        let mut total = 0.0;
        let mut idx = 0usize;
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    continue;
                }
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    let ct = teacher_cos[idx];
                    idx += 1;
                    if ct.is_nan() {
                        skipped += 1;
                        continue;
                    }
                    match student_cos(sd, d, i, j, k) {
                        Some(cs) => total += huber_parts(ct, cs, delta).0,
                        None => skipped += 1,
                    }
                }
            }
        }
        if 2 * skipped > total_triples {
            return Err(CoreError::TooManySkippedTriples {
                skipped,
                total: total_triples,
            });
        }
        let needs = self.nodes[student.0].needs_grad;
        Ok(self.push(
            Op::RkdAngle { teacher_cos, delta },
            vec![student],
            Tensor::scalar(total),
            needs,
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep seeding the loss node with 1. The loss must be scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        assert_eq!(
            self.out(loss).len(),
            1,
            "backward: loss node must be scalar, got {:?}",
            self.out(loss).shape()
        );
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse sweep with an explicit upstream gradient at `root`.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Tensor) -> Result<()> {
        self.backward_impl(root, seed, true)
    }

    /// Reverse sweep that computes gradients at `input_with_grad` leaves but
    /// leaves parameter gradients untouched. Used when a derivative is an
    /// intermediate quantity (gradient penalties) rather than a training
    /// signal.
    pub fn backward_input_grads(&mut self, root: NodeId, seed: Tensor) -> Result<()> {
        self.backward_impl(root, seed, false)
    }

    fn backward_impl(&mut self, root: NodeId, seed: Tensor, accumulate_params: bool) -> Result<()> {
        if self.state != TapeState::Forward {
            return Err(CoreError::BackwardState);
        }
        assert_eq!(
            seed.shape(),
            self.out(root).shape(),
            "backward_seeded: seed shape mismatch"
        );
        self.state = TapeState::Consumed;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if accumulate_params || !matches!(self.nodes[i].op, Op::Param(_)) {
                self.apply_backward(i, &g);
            }
            // Keep gradients on leaves that expose them.
            if matches!(self.nodes[i].op, Op::InputGrad) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, node: NodeId, delta: Tensor) {
        if !self.nodes[node.0].needs_grad {
            return;
        }
        match &mut self.grads[node.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, i: usize, g: &Tensor) {
        let inputs = self.nodes[i].inputs.clone();
        match &self.nodes[i].op {
            Op::Input | Op::InputGrad => {}
            Op::Param(pid) => {
                let pid = *pid;
                if self.store.get(pid).trainable {
                    self.store.get_mut(pid).grad.add_assign(g);
                }
            }
            Op::Linear => {
                let (x, wn, bn) = (inputs[0], inputs[1], inputs[2]);
                let (bsz, i_dim) = dims2(self.out(x));
                let (_, o_dim) = dims2(self.out(wn));
                let gd = g.data();
                if self.nodes[x.0].needs_grad {
                    let wd = self.out(wn).data();
                    let mut dx = vec![0.0; bsz * i_dim];
                    for b in 0..bsz {
                        for ii in 0..i_dim {
                            let wrow = ii * o_dim;
                            let grow = b * o_dim;
                            let mut acc = 0.0;
                            for o in 0..o_dim {
                                acc += gd[grow + o] * wd[wrow + o];
                            }
                            dx[b * i_dim + ii] = acc;
                        }
                    }
                    self.add_grad(x, Tensor::new(vec![bsz, i_dim], dx));
                }
                if self.nodes[wn.0].needs_grad {
                    let xd = self.out(x).data();
                    let mut dw = vec![0.0; i_dim * o_dim];
                    for b in 0..bsz {
                        let grow = b * o_dim;
                        for ii in 0..i_dim {
                            let xv = xd[b * i_dim + ii];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = ii * o_dim;
                            for o in 0..o_dim {
                                dw[wrow + o] += xv * gd[grow + o];
                            }
                        }
                    }
                    self.add_grad(wn, Tensor::new(vec![i_dim, o_dim], dw));
                }
                if self.nodes[bn.0].needs_grad {
                    let mut db = vec![0.0; o_dim];
                    for b in 0..bsz {
                        for o in 0..o_dim {
                            db[o] += gd[b * o_dim + o];
                        }
                    }
                    self.add_grad(bn, Tensor::new(vec![o_dim], db));
                }
            }
            Op::Conv2d { stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (x, kn) = (inputs[0], inputs[1]);
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_input_grad(g, self.out(kn), self.out(x).shape(), stride, pad);
                    self.add_grad(x, dx);
                }
                if self.nodes[kn.0].needs_grad {
                    let dk = kernels::conv2d_kernel_grad(g, self.out(x), self.out(kn).shape(), stride, pad);
                    self.add_grad(kn, dk);
                }
            }
            Op::BiasChannel => {
                let (x, bn) = (inputs[0], inputs[1]);
                let (bsz, c, h, w) = dims4(self.out(x));
                if self.nodes[x.0].needs_grad {
                    self.add_grad(x, g.clone());
                }
                if self.nodes[bn.0].needs_grad {
                    let gd = g.data();
                    let plane = h * w;
                    let mut db = vec![0.0; c];
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            db[ci] += gd[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    self.add_grad(bn, Tensor::new(vec![c], db));
                }
            }
            Op::Relu => {
                let x = inputs[0];
                let xd = self.out(x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                let shape = self.out(x).shape().to_vec();
                self.add_grad(x, Tensor::new(shape, dx));
            }
            Op::Clamp01 => {
                let x = inputs[0];
                let xd = self.out(x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if (0.0..=1.0).contains(&xv) { gv } else { 0.0 })
                    .collect();
                let shape = self.out(x).shape().to_vec();
                self.add_grad(x, Tensor::new(shape, dx));
            }
            Op::Upsample2x => {
                let x = inputs[0];
                let (bsz, c, h, w) = dims4(self.out(x));
                let gd = g.data();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; bsz * c * h * w];
                for bc in 0..bsz * c {
                    for y in 0..h {
                        let dst = bc * h * w + y * w;
                        for dy in 0..2 {
                            let src = bc * h2 * w2 + (2 * y + dy) * w2;
                            for x_ in 0..w {
                                dx[dst + x_] += gd[src + 2 * x_] + gd[src + 2 * x_ + 1];
                            }
                        }
                    }
                }
                self.add_grad(x, Tensor::new(vec![bsz, c, h, w], dx));
            }
            Op::MeanPool => {
                let x = inputs[0];
                let (bsz, c, h, w) = dims4(self.out(x));
                let plane = h * w;
                let gd = g.data();
                let mut dx = vec![0.0; bsz * c * plane];
                for bc in 0..bsz * c {
                    let gv = gd[bc] / plane as f64;
                    for v in &mut dx[bc * plane..(bc + 1) * plane] {
                        *v = gv;
                    }
                }
                self.add_grad(x, Tensor::new(vec![bsz, c, h, w], dx));
            }
            Op::Flatten => {
                let x = inputs[0];
                let shape = self.out(x).shape().to_vec();
                self.add_grad(x, Tensor::new(shape, g.data().to_vec()));
            }
            Op::ResidualAdd => {
                self.add_grad(inputs[0], g.clone());
                self.add_grad(inputs[1], g.clone());
            }
            Op::Sub => {
                self.add_grad(inputs[0], g.clone());
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                let shape = g.shape().to_vec();
                self.add_grad(inputs[1], Tensor::new(shape, neg));
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.out(b).iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let shape = g.shape().to_vec();
                    self.add_grad(a, Tensor::new(shape, da));
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.out(a).iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    let shape = g.shape().to_vec();
                    self.add_grad(b, Tensor::new(shape, db));
                }
            }
            Op::Scale(k) => {
                let k = *k;
                let dx: Vec<f64> = g.iter().map(|&v| k * v).collect();
                let shape = g.shape().to_vec();
                self.add_grad(inputs[0], Tensor::new(shape, dx));
            }
            Op::SumAll => {
                let x = inputs[0];
                let gv = g.item();
                let shape = self.out(x).shape().to_vec();
                self.add_grad(x, Tensor::full(&shape, gv));
            }
            Op::Softmax => {
                let x = inputs[0];
                let (bsz, k) = dims2(self.out(x));
                let yd = self.nodes[i].out.data();
                let gd = g.data();
                let mut dx = vec![0.0; bsz * k];
                for b in 0..bsz {
                    let row = b * k;
                    let dot: f64 = (0..k).map(|j| gd[row + j] * yd[row + j]).sum();
                    for j in 0..k {
                        dx[row + j] = yd[row + j] * (gd[row + j] - dot);
                    }
                }
                self.add_grad(x, Tensor::new(vec![bsz, k], dx));
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let labels = labels.clone();
                let x = inputs[0];
                let (bsz, k) = dims2(self.out(x));
                let xd = self.out(x).data();
                let gv = g.item() / bsz as f64;
                let mut dx = vec![0.0; bsz * k];
                for b in 0..bsz {
                    let row = &xd[b * k..(b + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / z;
                        dx[b * k + j] = gv * (p - if j == labels[b] { 1.0 } else { 0.0 });
                    }
                }
                self.add_grad(x, Tensor::new(vec![bsz, k], dx));
            }
            Op::EmbedL1 { teacher } => {
                let teacher = teacher.clone();
                let x = inputs[0];
                let (n, d) = dims2(&teacher);
                let md = self.out(x).data();
                let td = teacher.data();
                let gv = g.item();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let mut s = 0.0;
                    for j in 0..d {
                        let diff = td[r * d + j] - md[r * d + j];
                        s += diff * diff;
                    }
                    let norm = s.sqrt();
                    if norm > 0.0 {
                        for j in 0..d {
                            dx[r * d + j] = gv * (md[r * d + j] - td[r * d + j]) / norm;
                        }
                    }
                }
                self.add_grad(x, Tensor::new(vec![n, d], dx));
            }
            Op::RkdDistance { teacher_rel, delta } => {
                let (teacher_rel, delta) = (teacher_rel.clone(), *delta);
                let x = inputs[0];
                let (n, d) = dims2(self.out(x));
                let sd = self.out(x).data();
                let (dists, mu_s) = pairwise_sq_dists(self.out(x));
                let count = (n * (n - 1)) as f64;
                let gv = g.item();
                // dL/db_ij and the mu correction term.
                let mut pair_g = vec![0.0; dists.len()];
                let mut corr = 0.0;
                for (idx, (&a, &dist)) in teacher_rel.iter().zip(dists.iter()).enumerate() {
                    let b = dist / mu_s;
                    let (_, dgdb) = huber_parts(a, b, delta);
                    pair_g[idx] = dgdb;
                    corr += dgdb * b;
                }
                corr /= count * mu_s;
                let mut dx = vec![0.0; n * d];
                let mut idx = 0usize;
                for i_ in 0..n {
                    for j_ in 0..n {
                        if j_ == i_ {
                            continue;
                        }
                        let dl_dd = gv * (pair_g[idx] / mu_s - corr);
                        idx += 1;
                        for dd in 0..d {
                            let diff = sd[i_ * d + dd] - sd[j_ * d + dd];
                            dx[i_ * d + dd] += dl_dd * 2.0 * diff;
                            dx[j_ * d + dd] -= dl_dd * 2.0 * diff;
                        }
                    }
                }
                self.add_grad(x, Tensor::new(vec![n, d], dx));
            }
            Op::RkdAngle { teacher_cos, delta } => {
                let (teacher_cos, delta) = (teacher_cos.clone(), *delta);
                let x = inputs[0];
                let (n, d) = dims2(self.out(x));
                let sd = self.out(x).data().to_vec();
                let gv = g.item();
                let mut dx = vec![0.0; n * d];
                let mut idx = 0usize;
                for i_ in 0..n {
                    for j_ in 0..n {
                        if j_ == i_ {
                            continue;
                        }
                        for k_ in 0..n {
                            if k_ == i_ || k_ == j_ {
                                continue;
                            }
                            let ct = teacher_cos[idx];
                            idx += 1;
                            if ct.is_nan() {
                                continue;
                            }
                            student_cos_grad(&sd, d, i_, j_, k_, ct, delta, gv, &mut dx);
                        }
                    }
                }
                self.add_grad(x, Tensor::new(vec![n, d], dx));
            }
        }
    }

    // -- tangent (forward-over-reverse) pass for gradient penalties ---------

    /// Given tangent seeds on input leaves, runs a forward tangent sweep and
    /// then a reverse sweep of `sum(tangent(output) * out_weights)` with
    /// respect to the parameters, accumulating `scale *` that gradient into
    /// the store.
    ///
    /// Supports the op subset whose tangent is linear in the input tangents
    /// (convolutions, linear maps, bias, relu/clamp masks, pooling,
    /// reshapes, additive ops). This is what differentiating a gradient
    /// penalty with respect to critic parameters requires.
    pub fn tangent_param_grads(
        &mut self,
        seeds: &[(NodeId, Tensor)],
        output: NodeId,
        out_weights: &Tensor,
        scale: f64,
    ) {
        // Forward tangent sweep. None = identically zero tangent.
        let mut tangents: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (node, seed) in seeds {
            assert_eq!(
                seed.shape(),
                self.out(*node).shape(),
                "tangent seed shape mismatch"
            );
            tangents[node.0] = Some(seed.clone());
        }
        for i in 0..self.nodes.len() {
            if tangents[i].is_some() {
                continue; // seeded leaf
            }
            let inputs = self.nodes[i].inputs.clone();
            if inputs.iter().all(|n| tangents[n.0].is_none()) {
                continue;
            }
            let t = self.tangent_forward(i, &inputs, &tangents);
            tangents[i] = Some(t);
        }

        assert!(
            tangents[output.0].is_some(),
            "tangent_param_grads: output does not depend on any seeded leaf"
        );
        assert_eq!(
            out_weights.shape(),
            self.out(output).shape(),
            "tangent_param_grads: out_weights shape mismatch"
        );

        // Reverse sweep over the tangent computation.
        let mut tgrads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut w = out_weights.clone();
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
        tgrads[output.0] = Some(w);
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = tgrads[i].take() else { continue };
            self.tangent_backward(i, &g, &tangents, &mut tgrads);
        }
    }

    fn tangent_of(&self, tangents: &[Option<Tensor>], n: NodeId) -> Tensor {
        tangents[n.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.out(n).shape()))
    }

    fn tangent_forward(&self, i: usize, inputs: &[NodeId], tangents: &[Option<Tensor>]) -> Tensor {
        match &self.nodes[i].op {
            Op::Input | Op::InputGrad | Op::Param(_) => Tensor::zeros(self.nodes[i].out.shape()),
            Op::Linear => {
                let (x, wn) = (inputs[0], inputs[1]);
                let tx = self.tangent_of(tangents, x);
                let (bsz, i_dim) = dims2(&tx);
                let (_, o_dim) = dims2(self.out(wn));
                let wd = self.out(wn).data();
                let txd = tx.data();
                let mut out = vec![0.0; bsz * o_dim];
                for b in 0..bsz {
                    for ii in 0..i_dim {
                        let v = txd[b * i_dim + ii];
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = ii * o_dim;
                        for o in 0..o_dim {
                            out[b * o_dim + o] += v * wd[wrow + o];
                        }
                    }
                }
                Tensor::new(vec![bsz, o_dim], out)
            }
            Op::Conv2d { stride, pad } => {
                let (x, kn) = (inputs[0], inputs[1]);
                let tx = self.tangent_of(tangents, x);
                let (bsz, c_in, h, w) = dims4(&tx);
                let (k_out, _, kh, kw) = dims4(self.out(kn));
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (w + 2 * pad - kw) / stride + 1;
                kernels::conv2d_forward(
                    &tx,
                    self.out(kn),
                    *stride,
                    *pad,
                    (bsz, c_in, h, w),
                    (k_out, kh, kw, ho, wo),
                )
            }
            Op::BiasChannel | Op::Flatten => {
                let tx = self.tangent_of(tangents, inputs[0]);
                Tensor::new(self.nodes[i].out.shape().to_vec(), tx.into_data())
            }
            Op::Relu => {
                let x = inputs[0];
                let tx = self.tangent_of(tangents, x);
                let xd = self.out(x).data();
                let out: Vec<f64> = tx
                    .iter()
                    .zip(xd.iter())
                    .map(|(&t, &xv)| if xv > 0.0 { t } else { 0.0 })
                    .collect();
                Tensor::new(tx.shape().to_vec(), out)
            }
            Op::Clamp01 => {
                let x = inputs[0];
                let tx = self.tangent_of(tangents, x);
                let xd = self.out(x).data();
                let out: Vec<f64> = tx
                    .iter()
                    .zip(xd.iter())
                    .map(|(&t, &xv)| if (0.0..=1.0).contains(&xv) { t } else { 0.0 })
                    .collect();
                Tensor::new(tx.shape().to_vec(), out)
            }
            Op::Upsample2x => replay_upsample2x(&self.tangent_of(tangents, inputs[0])),
            Op::MeanPool => replay_mean_pool(&self.tangent_of(tangents, inputs[0])),
            Op::SumAll => Tensor::scalar(self.tangent_of(tangents, inputs[0]).iter().sum()),
            Op::Scale(k) => {
                let tx = self.tangent_of(tangents, inputs[0]);
                let out: Vec<f64> = tx.iter().map(|&v| k * v).collect();
                Tensor::new(tx.shape().to_vec(), out)
            }
            Op::ResidualAdd | Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                let ta = self.tangent_of(tangents, a);
                let tb = self.tangent_of(tangents, b);
                let sign = if matches!(self.nodes[i].op, Op::Sub) { -1.0 } else { 1.0 };
                let out: Vec<f64> = ta
                    .iter()
                    .zip(tb.iter())
                    .map(|(&x, &y)| x + sign * y)
                    .collect();
                Tensor::new(ta.shape().to_vec(), out)
            }
            op => panic!("op {op:?} not supported in tangent pass"),
        }
    }

    fn tangent_backward(
        &mut self,
        i: usize,
        g: &Tensor,
        tangents: &[Option<Tensor>],
        tgrads: &mut Vec<Option<Tensor>>,
    ) {
        let add = |node: NodeId, delta: Tensor, tgrads: &mut Vec<Option<Tensor>>| {
            match &mut tgrads[node.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let inputs = self.nodes[i].inputs.clone();
        match &self.nodes[i].op {
            Op::Input | Op::InputGrad | Op::Param(_) => {}
            Op::Linear => {
                let (x, wn, _bn) = (inputs[0], inputs[1], inputs[2]);
                let (bsz, i_dim) = dims2(self.out(x));
                let (_, o_dim) = dims2(self.out(wn));
                let gd = g.data();
                // into tangent of x
                let wd = self.out(wn).data();
                let mut dx = vec![0.0; bsz * i_dim];
                for b in 0..bsz {
                    for ii in 0..i_dim {
                        let wrow = ii * o_dim;
                        let grow = b * o_dim;
                        let mut acc = 0.0;
                        for o in 0..o_dim {
                            acc += gd[grow + o] * wd[wrow + o];
                        }
                        dx[b * i_dim + ii] = acc;
                    }
                }
                add(x, Tensor::new(vec![bsz, i_dim], dx), tgrads);
                // into the weight parameter via the bilinear term tx . w
                if let (Op::Param(pid), Some(tx)) = (&self.nodes[wn.0].op, &tangents[x.0]) {
                    let pid = *pid;
                    if self.store.get(pid).trainable {
                        let txd = tx.data();
                        let mut dw = vec![0.0; i_dim * o_dim];
                        for b in 0..bsz {
                            let grow = b * o_dim;
                            for ii in 0..i_dim {
                                let v = txd[b * i_dim + ii];
                                if v == 0.0 {
                                    continue;
                                }
                                let wrow = ii * o_dim;
                                for o in 0..o_dim {
                                    dw[wrow + o] += v * gd[grow + o];
                                }
                            }
                        }
                        self.store
                            .get_mut(pid)
                            .grad
                            .add_assign(&Tensor::new(vec![i_dim, o_dim], dw));
                    }
                }
            }
            Op::Conv2d { stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (x, kn) = (inputs[0], inputs[1]);
                let dx = kernels::conv2d_input_grad(g, self.out(kn), self.out(x).shape(), stride, pad);
                add(x, dx, tgrads);
                if let (Op::Param(pid), Some(tx)) = (&self.nodes[kn.0].op, &tangents[x.0]) {
                    let pid = *pid;
                    if self.store.get(pid).trainable {
                        let dk = kernels::conv2d_kernel_grad(g, tx, self.out(kn).shape(), stride, pad);
                        self.store.get_mut(pid).grad.add_assign(&dk);
                    }
                }
            }
            Op::BiasChannel => {
                add(inputs[0], g.clone(), tgrads);
            }
            Op::Relu => {
                let x = inputs[0];
                let xd = self.out(x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                let shape = self.out(x).shape().to_vec();
                add(x, Tensor::new(shape, dx), tgrads);
            }
            Op::Clamp01 => {
                let x = inputs[0];
                let xd = self.out(x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if (0.0..=1.0).contains(&xv) { gv } else { 0.0 })
                    .collect();
                let shape = self.out(x).shape().to_vec();
                add(x, Tensor::new(shape, dx), tgrads);
            }
            Op::Upsample2x => {
                let x = inputs[0];
                let (bsz, c, h, w) = dims4(self.out(x));
                let gd = g.data();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; bsz * c * h * w];
                for bc in 0..bsz * c {
                    for y in 0..h {
                        let dst = bc * h * w + y * w;
                        for dy in 0..2 {
                            let src = bc * h2 * w2 + (2 * y + dy) * w2;
                            for x_ in 0..w {
                                dx[dst + x_] += gd[src + 2 * x_] + gd[src + 2 * x_ + 1];
                            }
                        }
                    }
                }
                add(x, Tensor::new(vec![bsz, c, h, w], dx), tgrads);
            }
            Op::MeanPool => {
                let x = inputs[0];
                let (bsz, c, h, w) = dims4(self.out(x));
                let plane = h * w;
                let gd = g.data();
                let mut dx = vec![0.0; bsz * c * plane];
                for bc in 0..bsz * c {
                    let gv = gd[bc] / plane as f64;
                    for v in &mut dx[bc * plane..(bc + 1) * plane] {
                        *v = gv;
                    }
                }
                add(x, Tensor::new(vec![bsz, c, h, w], dx), tgrads);
            }
            Op::Flatten => {
                let x = inputs[0];
                let shape = self.out(x).shape().to_vec();
                add(x, Tensor::new(shape, g.data().to_vec()), tgrads);
            }
            Op::ResidualAdd => {
                add(inputs[0], g.clone(), tgrads);
                add(inputs[1], g.clone(), tgrads);
            }
            Op::Sub => {
                add(inputs[0], g.clone(), tgrads);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                let shape = g.shape().to_vec();
                add(inputs[1], Tensor::new(shape, neg), tgrads);
            }
            Op::Scale(k) => {
                let k = *k;
                let dx: Vec<f64> = g.iter().map(|&v| k * v).collect();
                let shape = g.shape().to_vec();
                add(inputs[0], Tensor::new(shape, dx), tgrads);
            }
            Op::SumAll => {
                let x = inputs[0];
                let gv = g.item();
                let shape = self.out(x).shape().to_vec();
                add(x, Tensor::full(&shape, gv), tgrads);
            }
            op => panic!("op {op:?} not supported in tangent pass"),
        }
    }
}

fn replay_upsample2x(x: &Tensor) -> Tensor {
    let (bsz, c, h, w) = dims4(x);
    let xd = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; bsz * c * h2 * w2];
    for bc in 0..bsz * c {
        for y in 0..h {
            let src = bc * h * w + y * w;
            for dy in 0..2 {
                let dst = bc * h2 * w2 + (2 * y + dy) * w2;
                for x_ in 0..w {
                    let v = xd[src + x_];
                    out[dst + 2 * x_] = v;
                    out[dst + 2 * x_ + 1] = v;
                }
            }
        }
    }
    Tensor::new(vec![bsz, c, h2, w2], out)
}

fn replay_mean_pool(x: &Tensor) -> Tensor {
    let (bsz, c, h, w) = dims4(x);
    let xd = x.data();
    let plane = h * w;
    let mut out = vec![0.0; bsz * c];
    for bc in 0..bsz * c {
        out[bc] = xd[bc * plane..(bc + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    Tensor::new(vec![bsz, c], out)
}

/// Squared pairwise distances over ordered pairs in lexicographic (i, j)
/// order plus their mean.
pub(crate) fn pairwise_sq_dists(rows: &Tensor) -> (Vec<f64>, f64) {
    let (n, d) = dims2(rows);
    let rd = rows.data();
    let mut out = Vec::with_capacity(n * (n - 1));
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut s = 0.0;
            for k in 0..d {
                let diff = rd[i * d + k] - rd[j * d + k];
                s += diff * diff;
            }
            out.push(s);
            sum += s;
        }
    }
    let mu = sum / out.len() as f64;
    (out, mu)
}

const COINCIDENT_FLOOR: f64 = 1e-12;

/// Cosine of the angle at vertex j between rows i and k; `None` when either
/// difference norm is under the coincidence floor.
fn student_cos(rows: &[f64], d: usize, i: usize, j: usize, k: usize) -> Option<f64> {
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for c in 0..d {
        let e1 = rows[i * d + c] - rows[j * d + c];
        let e2 = rows[k * d + c] - rows[j * d + c];
        dot += e1 * e2;
        n1 += e1 * e1;
        n2 += e2 * e2;
    }
    let (n1, n2) = (n1.sqrt(), n2.sqrt());
    if n1 < COINCIDENT_FLOOR || n2 < COINCIDENT_FLOOR {
        return None;
    }
    Some(dot / (n1 * n2).max(COINCIDENT_FLOOR))
}

/// Accumulates the gradient of huber(teacher_cos, student_cos) for one
/// ordered triple into dx.
#[allow(clippy::too_many_arguments)]
fn student_cos_grad(
    rows: &[f64],
    d: usize,
    i: usize,
    j: usize,
    k: usize,
    teacher_cos: f64,
    delta: f64,
    upstream: f64,
    dx: &mut [f64],
) {
    let mut dot = 0.0;
    let mut n1sq = 0.0;
    let mut n2sq = 0.0;
    for c in 0..d {
        let e1 = rows[i * d + c] - rows[j * d + c];
        let e2 = rows[k * d + c] - rows[j * d + c];
        dot += e1 * e2;
        n1sq += e1 * e1;
        n2sq += e2 * e2;
    }
    let n1 = n1sq.sqrt();
    let n2 = n2sq.sqrt();
    if n1 < COINCIDENT_FLOOR || n2 < COINCIDENT_FLOOR {
        return;
    }
    let raw_denom = n1 * n2;
    let floored = raw_denom < COINCIDENT_FLOOR;
    let denom = raw_denom.max(COINCIDENT_FLOOR);
    let cs = dot / denom;
    let (_, dgdb) = huber_parts(teacher_cos, cs, delta);
    let coef = upstream * dgdb;
    if coef == 0.0 {
        return;
    }
    for c in 0..d {
        let e1 = rows[i * d + c] - rows[j * d + c];
        let e2 = rows[k * d + c] - rows[j * d + c];
        // d cos / d e1 and / d e2; when the floor is active the denominator
        // is constant and only the dot term contributes.
        let (d1, d2) = if floored {
            (e2 / denom, e1 / denom)
        } else {
            (e2 / denom - cs * e1 / n1sq, e1 / denom - cs * e2 / n2sq)
        };
        dx[i * d + c] += coef * d1;
        dx[k * d + c] += coef * d2;
        dx[j * d + c] -= coef * (d1 + d2);
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

mod kernels {
    use super::Tensor;

    /// Valid output range so that `o*stride + off` stays in `[0, limit)`.
    #[inline]
    fn valid_range(limit: usize, out_size: usize, stride: usize, off: isize) -> (usize, usize) {
        let start = if off < 0 {
            (((-off) as usize) + stride - 1) / stride
        } else {
            0
        };
        let max_i = limit as isize - 1 - off;
        if max_i < 0 {
            return (0, 0);
        }
        let end = (max_i as usize / stride + 1).min(out_size);
        (start.min(end), end)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_forward(
        x: &Tensor,
        k: &Tensor,
        stride: usize,
        pad: usize,
        (bsz, c_in, h, w): (usize, usize, usize, usize),
        (k_out, kh, kw, ho, wo): (usize, usize, usize, usize, usize),
    ) -> Tensor {
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; bsz * k_out * ho * wo];
        for b in 0..bsz {
            for ko in 0..k_out {
                let out_base = (b * k_out + ko) * ho * wo;
                for c in 0..c_in {
                    let x_base = (b * c_in + c) * h * w;
                    let k_base = (ko * c_in + c) * kh * kw;
                    for dy in 0..kh {
                        let off_y = dy as isize - pad as isize;
                        let (oy0, oy1) = valid_range(h, ho, stride, off_y);
                        for dx in 0..kw {
                            let kv = kd[k_base + dy * kw + dx];
                            let off_x = dx as isize - pad as isize;
                            let (ox0, ox1) = valid_range(w, wo, stride, off_x);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = (oy * stride) as isize + off_y;
                                let xrow = x_base + iy as usize * w;
                                let orow = out_base + oy * wo;
                                if stride == 1 {
                                    let ix0 = (ox0 as isize + off_x) as usize;
                                    let src = &xd[xrow + ix0..xrow + ix0 + (ox1 - ox0)];
                                    let dst = &mut out[orow + ox0..orow + ox1];
                                    for (o, s) in dst.iter_mut().zip(src) {
                                        *o += kv * s;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = (ox * stride) as isize + off_x;
                                        out[orow + ox] += kv * xd[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![bsz, k_out, ho, wo], out)
    }

    pub fn conv2d_input_grad(
        g: &Tensor,
        k: &Tensor,
        x_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (bsz, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (k_out, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
        let (ho, wo) = (g.dim(2), g.dim(3));
        let gd = g.data();
        let kd = k.data();
        let mut dx = vec![0.0; bsz * c_in * h * w];
        for b in 0..bsz {
            for ko in 0..k_out {
                let g_base = (b * k_out + ko) * ho * wo;
                for c in 0..c_in {
                    let x_base = (b * c_in + c) * h * w;
                    let k_base = (ko * c_in + c) * kh * kw;
                    for dy in 0..kh {
                        let off_y = dy as isize - pad as isize;
                        let (oy0, oy1) = valid_range(h, ho, stride, off_y);
                        for dxk in 0..kw {
                            let kv = kd[k_base + dy * kw + dxk];
                            if kv == 0.0 {
                                continue;
                            }
                            let off_x = dxk as isize - pad as isize;
                            let (ox0, ox1) = valid_range(w, wo, stride, off_x);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = (oy * stride) as isize + off_y;
                                let xrow = x_base + iy as usize * w;
                                let grow = g_base + oy * wo;
                                if stride == 1 {
                                    let ix0 = (ox0 as isize + off_x) as usize;
                                    let dst = &mut dx[xrow + ix0..xrow + ix0 + (ox1 - ox0)];
                                    let src = &gd[grow + ox0..grow + ox1];
                                    for (d, g) in dst.iter_mut().zip(src) {
                                        *d += kv * g;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = (ox * stride) as isize + off_x;
                                        dx[xrow + ix as usize] += kv * gd[grow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(x_shape.to_vec(), dx)
    }

    pub fn conv2d_kernel_grad(
        g: &Tensor,
        x: &Tensor,
        k_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (bsz, c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (k_out, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
        let (ho, wo) = (g.dim(2), g.dim(3));
        let gd = g.data();
        let xd = x.data();
        let mut dk = vec![0.0; k_out * c_in * kh * kw];
        for b in 0..bsz {
            for ko in 0..k_out {
                let g_base = (b * k_out + ko) * ho * wo;
                for c in 0..c_in {
                    let x_base = (b * c_in + c) * h * w;
                    let k_base = (ko * c_in + c) * kh * kw;
                    for dy in 0..kh {
                        let off_y = dy as isize - pad as isize;
                        let (oy0, oy1) = valid_range(h, ho, stride, off_y);
                        for dxk in 0..kw {
                            let off_x = dxk as isize - pad as isize;
                            let (ox0, ox1) = valid_range(w, wo, stride, off_x);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = (oy * stride) as isize + off_y;
                                let xrow = x_base + iy as usize * w;
                                let grow = g_base + oy * wo;
                                if stride == 1 {
                                    let ix0 = (ox0 as isize + off_x) as usize;
                                    let src = &xd[xrow + ix0..xrow + ix0 + (ox1 - ox0)];
                                    let gsl = &gd[grow + ox0..grow + ox1];
                                    for (xv, gv) in src.iter().zip(gsl) {
                                        acc += xv * gv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = (ox * stride) as isize + off_x;
                                        acc += xd[xrow + ix as usize] * gd[grow + ox];
                                    }
                                }
                            }
                            dk[k_base + dy * kw + dxk] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(k_shape.to_vec(), dk)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Central finite-difference check of a scalar loss against the analytic
/// gradients accumulated by `backward`. Returns the max over all trainable
/// parameter coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, mut build: F) -> f64
where
    F: FnMut(&mut Graph) -> NodeId,
{
    assert!(step > 0.0, "grad_check: step must be positive");
    let analytic = |store: &mut ParamStore, build: &mut F| -> Vec<(ParamId, Tensor)> {
        store.zero_grads();
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss).expect("grad_check: backward failed");
        drop(g);
        store
            .ids()
            .filter(|id| store.get(*id).trainable)
            .map(|id| (id, store.grad(id).clone()))
            .collect()
    };
    let grads = analytic(store, &mut build);
    let value = |store: &mut ParamStore, build: &mut F| -> f64 {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        let v = g.out(loss).item();
        drop(g);
        v
    };
    grad_check_against(store, step, grads, |s| value(s, &mut build))
}

/// Same as [`grad_check`], but for losses whose analytic gradient is
/// produced by a custom procedure (e.g. the gradient-penalty tangent pass).
/// `analytic` holds per-parameter gradients already accumulated; `value`
/// evaluates the loss at the store's current parameter values.
pub fn grad_check_against<V>(
    store: &mut ParamStore,
    step: f64,
    analytic: Vec<(ParamId, Tensor)>,
    mut value: V,
) -> f64
where
    V: FnMut(&mut ParamStore) -> f64,
{
    let mut max_rel: f64 = 0.0;
    for (id, agrad) in &analytic {
        for i in 0..agrad.len() {
            let orig = store.get(*id).value.data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + step;
            let fp = value(store);
            store.get_mut(*id).value.data_mut()[i] = orig - step;
            let fm = value(store);
            store.get_mut(*id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (agrad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
