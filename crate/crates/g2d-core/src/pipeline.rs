//! Greedy stage-wise training: teacher, generative encoder (with critic),
//! discriminative reformer (distillation), feature classifier, plus the two
//! ablation variants and embedding extraction.
//!
//! Stages communicate through parameter snapshots so they can run in-memory
//! or via the on-disk model container. Frozen parameters are verified
//! bit-identical (hash of their buffers) around every stage that consumes
//! them, and every stage is a pure function of `(dataset, config, seed)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore};
use crate::config::{ClassifierSection, EncoderSection, OptimizerKind, ReformerSection, TeacherSection};
use crate::error::{CoreError, Result};
use crate::losses::{
    critic_loss_backward, distill_loss, generator_adv_loss, reconstruction_loss, DistillWeights,
    EmbeddingBatch,
};
use crate::nn::{
    Critic, Ell0, FeatureClassifier, GenerativeEncoder, InpaintingDecoder, Reformer, Teacher,
};
use crate::optim::{lr_at, Adam, AdamConfig, Sgd, SgdConfig};
use crate::rng::{rng_for, tag};
use crate::synth::{augment, Augment, Dataset, FaceTriplet, Split};
use crate::tensor::Tensor;

const RETRY_TAG: u64 = 14;

/// Optimizer for the SGD-style stages, selected by config.
enum StageOpt {
    Sgd(Sgd),
    Adam(Adam),
}

impl StageOpt {
    fn new(
        store: &ParamStore,
        ids: Vec<ParamId>,
        kind: OptimizerKind,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> StageOpt {
        match kind {
            OptimizerKind::Sgd => StageOpt::Sgd(Sgd::new(
                store,
                ids,
                SgdConfig {
                    lr,
                    momentum,
                    weight_decay,
                },
            )),
            OptimizerKind::Adam => StageOpt::Adam(Adam::new(
                store,
                ids,
                AdamConfig {
                    lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay,
                },
            )),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            StageOpt::Sgd(o) => o.set_lr(lr),
            StageOpt::Adam(o) => o.set_lr(lr),
        }
    }

    fn step(&mut self, store: &mut ParamStore) {
        match self {
            StageOpt::Sgd(o) => o.step(store),
            StageOpt::Adam(o) => o.step(store),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter snapshots
// ---------------------------------------------------------------------------

/// Named parameter values, detached from any store.
pub type ParamSnapshot = Vec<(String, Tensor)>;

pub fn snapshot(store: &ParamStore, ids: &[ParamId]) -> ParamSnapshot {
    ids.iter()
        .map(|id| (store.get(*id).name.clone(), store.value(*id).clone()))
        .collect()
}

/// Restores values into existing store entries by exact name.
pub fn restore(store: &mut ParamStore, ids: &[ParamId], snap: &ParamSnapshot) -> Result<()> {
    for id in ids {
        let name = store.get(*id).name.clone();
        let found = snap.iter().find(|(n, _)| *n == name);
        match found {
            Some((_, tensor)) => {
                assert_eq!(
                    tensor.shape(),
                    store.value(*id).shape(),
                    "restore: shape mismatch for {name}"
                );
                store.get_mut(*id).value = tensor.clone();
            }
            None => return Err(CoreError::MissingArtifact(format!("parameter {name}"))),
        }
    }
    Ok(())
}

pub fn snapshot_hash(snap: &ParamSnapshot) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in snap {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let th = t.bit_hash();
        for b in th.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: &'static str,
    pub fields: Vec<(&'static str, f64)>,
}

/// `epoch,stage,loss...` CSV text for a stage log.
pub fn log_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,stage");
    if let Some(first) = logs.first() {
        for (name, _) in &first.fields {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for l in logs {
        out.push_str(&format!("{},{}", l.epoch, l.stage));
        for (_, v) in &l.fields {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

fn make_batches(indices: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn maybe_augment(
    ds: &Dataset,
    item: usize,
    enabled: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor, Tensor) {
    let it = &ds.items[item];
    if !enabled {
        return (it.face.clone(), it.mask.clone(), it.masked.clone());
    }
    let flip = rng.gen::<f64>() < 0.5;
    let dx = rng.gen_range(-2i64..=2);
    let dy = rng.gen_range(-2i64..=2);
    let mut t = FaceTriplet {
        groundtruth: it.face.clone(),
        mask: it.mask.clone(),
        masked: it.masked.clone(),
        identity: it.identity,
        mask_template_id: it.template,
        variation_seed: 0,
    };
    if flip {
        t = augment(&t, Augment::Flip).expect("flip");
    }
    t = augment(&t, Augment::Translate { dx, dy }).expect("translate within bounds");
    (t.groundtruth, t.mask, t.masked)
}

/// Stacks groundtruth faces and labels for a batch.
fn stack_faces(
    ds: &Dataset,
    batch: &[usize],
    augmented: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    let s = ds.image_size;
    let plane = 3 * s * s;
    let mut faces = Tensor::zeros(&[batch.len(), 3, s, s]);
    let mut labels = Vec::with_capacity(batch.len());
    for (bi, &item) in batch.iter().enumerate() {
        let (face, _, _) = maybe_augment(ds, item, augmented, rng);
        faces.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(face.data());
        labels.push(ds.items[item].identity);
    }
    (faces, labels)
}

/// Stacks (groundtruth faces, encoder input with mask channel, labels).
fn stack_triplets(
    ds: &Dataset,
    batch: &[usize],
    augmented: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor, Vec<usize>) {
    let s = ds.image_size;
    let img_plane = 3 * s * s;
    let in_plane = 4 * s * s;
    let mut faces = Tensor::zeros(&[batch.len(), 3, s, s]);
    let mut student = Tensor::zeros(&[batch.len(), 4, s, s]);
    let mut labels = Vec::with_capacity(batch.len());
    for (bi, &item) in batch.iter().enumerate() {
        let (face, mask, masked) = maybe_augment(ds, item, augmented, rng);
        faces.data_mut()[bi * img_plane..(bi + 1) * img_plane].copy_from_slice(face.data());
        let base = bi * in_plane;
        student.data_mut()[base..base + img_plane].copy_from_slice(masked.data());
        student.data_mut()[base + img_plane..base + in_plane].copy_from_slice(mask.data());
        labels.push(ds.items[item].identity);
    }
    (faces, student, labels)
}

/// Encoder input for one (image, mask) pair; an all-zero mask selects the
/// unmasked pathway.
pub fn student_input(image: &Tensor, mask: &Tensor) -> Tensor {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    assert_eq!(c, 3, "student_input expects a 3-channel image");
    assert_eq!(mask.shape(), &[h, w], "mask shape must match the image");
    let mut out = Tensor::zeros(&[1, 4, h, w]);
    out.data_mut()[..3 * h * w].copy_from_slice(image.data());
    out.data_mut()[3 * h * w..].copy_from_slice(mask.data());
    out
}

fn ensure_finite(value: f64, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NanLoss { batch })
    }
}

// ---------------------------------------------------------------------------
// Teacher stage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TeacherArtifact {
    pub params: ParamSnapshot,
    pub cfg: TeacherSection,
    pub n_classes: usize,
    pub image_size: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Set when validation accuracy falls under 1.5x chance.
    pub weak_warning: Option<String>,
    pub log: Vec<EpochLog>,
}

impl TeacherArtifact {
    /// Registers the trained teacher into `store` (frozen unless stated
    /// otherwise) and restores its parameters.
    pub fn instantiate(&self, store: &mut ParamStore, trainable: bool) -> Result<Teacher> {
        let mut rng = rng_for(0, &[tag::TEACHER]);
        let net = Teacher::build(store, &self.cfg, self.image_size, self.n_classes, &mut rng);
        restore(store, &net.param_ids(), &self.params)?;
        for id in net.param_ids() {
            store.set_trainable(id, trainable);
        }
        Ok(net)
    }
}

fn classify_accuracy(
    store: &mut ParamStore,
    logits_of: impl Fn(&mut Graph, Tensor) -> crate::autodiff::NodeId,
    ds: &Dataset,
    split: Split,
    masked_input: bool,
) -> f64 {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    let mut dummy = rng_for(0, &[0]);
    for chunk in idx.chunks(64) {
        let (input, labels) = if masked_input {
            let (_, student, labels) = stack_triplets(ds, chunk, false, &mut dummy);
            (student, labels)
        } else {
            let (faces, labels) = stack_faces(ds, chunk, false, &mut dummy);
            (faces, labels)
        };
        let mut g = Graph::new(store);
        let out = logits_of(&mut g, input);
        let t = g.out(out);
        let k = t.dim(1);
        for (bi, &label) in labels.iter().enumerate() {
            let row = &t.data()[bi * k..(bi + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == label {
                correct += 1;
            }
        }
    }
    correct as f64 / idx.len() as f64
}

/// Trains the teacher recognizer on unmasked faces with cross-entropy.
pub fn train_teacher(ds: &Dataset, cfg: &TeacherSection, seed: u64) -> Result<TeacherArtifact> {
    let mut init_rng = rng_for(seed, &[tag::TEACHER, tag::INIT]);
    let mut store = ParamStore::new();
    let teacher = Teacher::build(&mut store, cfg, ds.image_size, ds.n_identities, &mut init_rng);
    let ids = teacher.param_ids();
    let mut opt = StageOpt::new(
        &store,
        ids.clone(),
        cfg.optimizer,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    let train_idx = ds.indices(Split::Train);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.set_lr(lr_at(cfg.lr, epoch, cfg.lr_halve_every));
        let mut shuffle_rng = rng_for(seed, &[tag::TEACHER, tag::SHUFFLE, epoch as u64]);
        let mut aug_rng = rng_for(seed, &[tag::TEACHER, tag::AUGMENT, epoch as u64]);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in make_batches(&train_idx, cfg.batch, &mut shuffle_rng) {
            let (faces, labels) = stack_faces(ds, &batch, cfg.augment, &mut aug_rng);
            store.zero_grads();
            let mut g = Graph::new(&mut store);
            let x = g.input(faces);
            let logits = teacher.logits(&mut g, x);
            let loss = g.softmax_cross_entropy(logits, &labels);
            let v = g.out(loss).item();
            ensure_finite(v, steps)?;
            g.backward(loss)?;
            drop(g);
            opt.step(&mut store);
            total += v;
            steps += 1;
        }
        log.push(EpochLog {
            epoch,
            stage: "teacher",
            fields: vec![("loss_total", total / steps.max(1) as f64)],
        });
    }
    let train_acc = classify_accuracy(
        &mut store,
        |g, x| {
            let xi = g.input(x);
            teacher.logits(g, xi)
        },
        ds,
        Split::Train,
        false,
    );
    let val_acc = classify_accuracy(
        &mut store,
        |g, x| {
            let xi = g.input(x);
            teacher.logits(g, xi)
        },
        ds,
        Split::Val,
        false,
    );
    let chance = 1.0 / ds.n_identities as f64;
    let weak_warning = (val_acc < 1.5 * chance).then(|| {
        format!("teacher too weak: val accuracy {val_acc:.3} under 1.5x chance {chance:.3}")
    });
    Ok(TeacherArtifact {
        params: snapshot(&store, &ids),
        cfg: cfg.clone(),
        n_classes: ds.n_identities,
        image_size: ds.image_size,
        train_acc,
        val_acc,
        weak_warning,
        log,
    })
}

// ---------------------------------------------------------------------------
// Encoder stage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderArtifact {
    pub encoder_params: ParamSnapshot,
    pub decoder_params: ParamSnapshot,
    pub critic_params: ParamSnapshot,
    pub cfg: EncoderSection,
    pub image_size: usize,
    pub init_val_recon: f64,
    pub final_val_recon: f64,
    /// Per-pixel mean absolute error over the unmasked region, validation.
    pub val_unmasked_mae: f64,
    pub log: Vec<EpochLog>,
}

impl EncoderArtifact {
    pub fn instantiate_encoder(
        &self,
        store: &mut ParamStore,
        trainable: bool,
    ) -> Result<GenerativeEncoder> {
        let mut rng = rng_for(0, &[tag::ENCODER]);
        let net = GenerativeEncoder::build(store, &self.cfg, self.image_size, &mut rng);
        restore(store, &net.param_ids(), &self.encoder_params)?;
        for id in net.param_ids() {
            store.set_trainable(id, trainable);
        }
        Ok(net)
    }

    pub fn all_params(&self) -> ParamSnapshot {
        let mut all = self.encoder_params.clone();
        all.extend(self.decoder_params.iter().cloned());
        all.extend(self.critic_params.iter().cloned());
        all
    }
}

/// Mean per-item reconstruction SSE and unmasked-region MAE on a split.
fn eval_reconstruction(
    store: &mut ParamStore,
    encoder: &GenerativeEncoder,
    decoder: &InpaintingDecoder,
    ds: &Dataset,
    split: Split,
) -> (f64, f64) {
    let idx = ds.indices(split);
    let mut dummy = rng_for(0, &[1]);
    let mut sse = 0.0;
    let mut mae_sum = 0.0;
    let mut mae_count = 0.0f64;
    for chunk in idx.chunks(32) {
        let (faces, student, _) = stack_triplets(ds, chunk, false, &mut dummy);
        let mut g = Graph::new(store);
        let x = g.input(student);
        let grid = encoder.descriptors(&mut g, x);
        let recon = decoder.reconstruct(&mut g, grid);
        let rt = g.out(recon);
        let s = ds.image_size;
        let plane = s * s;
        for (bi, &item) in chunk.iter().enumerate() {
            let mask = &ds.items[item].mask;
            for c in 0..3 {
                for p in 0..plane {
                    let i = (bi * 3 + c) * plane + p;
                    let diff = rt.data()[i] - faces.data()[i];
                    sse += diff * diff;
                    if mask.data()[p] == 0.0 {
                        mae_sum += diff.abs();
                        mae_count += 1.0;
                    }
                }
            }
        }
    }
    (sse / idx.len().max(1) as f64, mae_sum / mae_count.max(1.0))
}

/// Pretrains encoder and decoder with reconstruction plus the generator
/// side of the adversarial loss, alternating one critic step per generator
/// step.
pub fn pretrain_encoder(ds: &Dataset, cfg: &EncoderSection, seed: u64) -> Result<EncoderArtifact> {
    let mut init_rng = rng_for(seed, &[tag::ENCODER, tag::INIT]);
    let mut store = ParamStore::new();
    let encoder = GenerativeEncoder::build(&mut store, cfg, ds.image_size, &mut init_rng);
    let decoder = InpaintingDecoder::build(&mut store, cfg, &mut init_rng);
    let critic = Critic::build(&mut store, &mut init_rng);
    let gen_ids: Vec<ParamId> = encoder
        .param_ids()
        .into_iter()
        .chain(decoder.param_ids())
        .collect();
    let critic_ids = critic.param_ids();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut gen_opt = Adam::new(&store, gen_ids.clone(), adam_cfg.clone());
    let mut critic_opt = Adam::new(&store, critic_ids.clone(), adam_cfg);

    let (init_val_recon, _) = eval_reconstruction(&mut store, &encoder, &decoder, ds, Split::Val);

    let train_idx = ds.indices(Split::Train);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng_for(seed, &[tag::ENCODER, tag::SHUFFLE, epoch as u64]);
        let mut aug_rng = rng_for(seed, &[tag::ENCODER, tag::AUGMENT, epoch as u64]);
        let mut interp_rng = rng_for(seed, &[tag::ENCODER, tag::INTERP, epoch as u64]);
        let (mut recon_sum, mut adv_sum, mut critic_sum, mut penalty_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in make_batches(&train_idx, cfg.batch, &mut shuffle_rng) {
            let (faces, student, _) = stack_triplets(ds, &batch, cfg.augment, &mut aug_rng);

            // Generator step against the current critic.
            for id in &critic_ids {
                store.set_trainable(*id, false);
            }
            store.zero_grads();
            let fake_value;
            {
                let mut g = Graph::new(&mut store);
                let x = g.input(student);
                let target = g.input(faces.clone());
                let grid = encoder.descriptors(&mut g, x);
                let fake = decoder.reconstruct(&mut g, grid);
                let recon = reconstruction_loss(&mut g, fake, target);
                let adv = generator_adv_loss(&mut g, &critic, fake);
                let advw = g.scale(adv, cfg.adv_weight);
                let total = g.residual_add(recon, advw);
                let recon_v = g.out(recon).item();
                let adv_v = g.out(adv).item();
                ensure_finite(recon_v + adv_v, steps)?;
                g.backward(total)?;
                fake_value = g.out(fake).clone();
                recon_sum += recon_v;
                adv_sum += adv_v;
            }
            gen_opt.step(&mut store);
            for id in &critic_ids {
                store.set_trainable(*id, true);
            }

            // Critic step on the detached reconstruction.
            store.zero_grads();
            let u: Vec<f64> = (0..batch.len()).map(|_| interp_rng.gen::<f64>()).collect();
            let parts = critic_loss_backward(
                &mut store,
                &critic,
                &faces,
                &fake_value,
                cfg.gp_weight,
                cfg.gp_form,
                &u,
            );
            ensure_finite(parts.critic_loss, steps)?;
            critic_opt.step(&mut store);
            critic_sum += parts.critic_loss;
            penalty_sum += parts.penalty;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        log.push(EpochLog {
            epoch,
            stage: "encoder",
            fields: vec![
                ("loss_total", (recon_sum + adv_sum) / n),
                ("recon", recon_sum / n),
                ("gen_adv", adv_sum / n),
                ("critic", critic_sum / n),
                ("penalty", penalty_sum / n),
            ],
        });
    }

    let (final_val_recon, val_unmasked_mae) =
        eval_reconstruction(&mut store, &encoder, &decoder, ds, Split::Val);
    Ok(EncoderArtifact {
        encoder_params: snapshot(&store, &encoder.param_ids()),
        decoder_params: snapshot(&store, &decoder.param_ids()),
        critic_params: snapshot(&store, &critic_ids),
        cfg: cfg.clone(),
        image_size: ds.image_size,
        init_val_recon,
        final_val_recon,
        val_unmasked_mae,
        log,
    })
}

// ---------------------------------------------------------------------------
// Reformer stage (distillation)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReformerArtifact {
    /// Reformer parameters, plus the ell0 map when distillation was used.
    pub params: ParamSnapshot,
    pub cfg: ReformerSection,
    pub grid_channels: usize,
    pub log: Vec<EpochLog>,
}

impl ReformerArtifact {
    pub fn instantiate(&self, store: &mut ParamStore, trainable: bool) -> Result<Reformer> {
        let mut rng = rng_for(0, &[tag::REFORMER]);
        let net = Reformer::build(store, &self.cfg, self.grid_channels, &mut rng);
        restore(store, &net.param_ids(), &self.params)?;
        for id in net.param_ids() {
            store.set_trainable(id, trainable);
        }
        Ok(net)
    }
}

/// Trains the reformer (and ell0) by relational distillation from the
/// frozen teacher through the frozen encoder. With `l1_only` the relational
/// weights are zero (the G2D[DIS] ablation).
pub fn train_reformer(
    ds: &Dataset,
    teacher_art: &TeacherArtifact,
    encoder_art: &EncoderArtifact,
    cfg: &ReformerSection,
    seed: u64,
    l1_only: bool,
) -> Result<ReformerArtifact> {
    let mut store = ParamStore::new();
    let teacher = teacher_art.instantiate(&mut store, false)?;
    let encoder = encoder_art.instantiate_encoder(&mut store, false)?;
    let frozen_ids: Vec<ParamId> = teacher
        .param_ids()
        .into_iter()
        .chain(encoder.param_ids())
        .collect();
    let frozen_before = store.bit_hash(&frozen_ids);

    let mut init_rng = rng_for(seed, &[tag::REFORMER, tag::INIT, l1_only as u64]);
    let reformer = Reformer::build(&mut store, cfg, encoder.grid_channels, &mut init_rng);
    let ell0 = Ell0::build(
        &mut store,
        cfg.embed_dim,
        teacher_art.cfg.feature_dim,
        &mut init_rng,
    );
    let train_ids: Vec<ParamId> = reformer
        .param_ids()
        .into_iter()
        .chain(ell0.param_ids())
        .collect();
    let mut opt = StageOpt::new(
        &store,
        train_ids.clone(),
        cfg.optimizer,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    let weights = DistillWeights {
        alpha: if l1_only { 0.0 } else { cfg.alpha },
        beta: if l1_only { 0.0 } else { cfg.beta },
        huber_delta: cfg.huber_delta,
    };

    let train_idx = ds.indices(Split::Train);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.set_lr(lr_at(cfg.lr, epoch, cfg.lr_halve_every));
        let mut shuffle_rng = rng_for(seed, &[tag::REFORMER, tag::SHUFFLE, epoch as u64]);
        let (mut sum_total, mut sum_l1, mut sum_l2, mut sum_l3) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in make_batches(&train_idx, cfg.batch, &mut shuffle_rng) {
            if batch.len() < 3 {
                continue; // triple relations need at least 3 samples
            }
            let mut current = batch;
            let mut attempt = 0usize;
            loop {
                let mut dummy = rng_for(0, &[2]);
                let (faces, student, _) = stack_triplets(ds, &current, false, &mut dummy);
                store.zero_grads();
                let mut g = Graph::new(&mut store);
                let fx = g.input(faces);
                let tfeat = teacher.features(&mut g, fx);
                let teacher_batch = EmbeddingBatch::teacher(g.out(tfeat).clone());
                let sx = g.input(student);
                let grid = encoder.descriptors(&mut g, sx);
                let emb = reformer.embed(&mut g, grid);
                match distill_loss(&mut g, &teacher_batch, emb, ell0.w, ell0.b, &weights) {
                    Ok(out) => {
                        let v = g.out(out.total).item();
                        ensure_finite(v, steps)?;
                        g.backward(out.total)?;
                        drop(g);
                        opt.step(&mut store);
                        sum_total += v;
                        sum_l1 += out.breakdown.l1;
                        sum_l2 += out.breakdown.l2.unwrap_or(0.0);
                        sum_l3 += out.breakdown.l3.unwrap_or(0.0);
                        steps += 1;
                        break;
                    }
                    Err(
                        e @ (CoreError::DegenerateStudentBatch
                        | CoreError::DegenerateTeacherBatch
                        | CoreError::TooManySkippedTriples { .. }),
                    ) => {
                        attempt += 1;
                        if attempt > 3 {
                            return Err(e);
                        }
                        drop(g);
                        // Reshuffle: draw a fresh batch from the train pool.
                        let mut retry_rng = rng_for(
                            seed,
                            &[tag::REFORMER, RETRY_TAG, epoch as u64, steps as u64, attempt as u64],
                        );
                        current = make_batches(&train_idx, current.len(), &mut retry_rng)
                            .into_iter()
                            .next()
                            .expect("non-empty train pool");
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let n = steps.max(1) as f64;
        log.push(EpochLog {
            epoch,
            stage: if l1_only { "reformer-dis" } else { "reformer" },
            fields: vec![
                ("loss_total", sum_total / n),
                ("l1", sum_l1 / n),
                ("l2", sum_l2 / n),
                ("l3", sum_l3 / n),
            ],
        });
    }

    if store.bit_hash(&frozen_ids) != frozen_before {
        return Err(CoreError::FrozenChanged { stage: "reformer" });
    }
    Ok(ReformerArtifact {
        params: snapshot(&store, &train_ids),
        cfg: cfg.clone(),
        grid_channels: encoder.grid_channels,
        log,
    })
}

// ---------------------------------------------------------------------------
// Classifier stage and the CE ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassifierArtifact {
    pub params: ParamSnapshot,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub train_acc: f64,
    pub log: Vec<EpochLog>,
}

impl ClassifierArtifact {
    pub fn instantiate(&self, store: &mut ParamStore, trainable: bool) -> Result<FeatureClassifier> {
        let mut rng = rng_for(0, &[tag::CLASSIFIER]);
        let net = FeatureClassifier::build(store, self.embed_dim, self.n_classes, &mut rng);
        restore(store, &net.param_ids(), &self.params)?;
        for id in net.param_ids() {
            store.set_trainable(id, trainable);
        }
        Ok(net)
    }
}

/// Finetunes the classifier head on masked faces with the backbone frozen.
pub fn finetune_classifier(
    ds: &Dataset,
    encoder_art: &EncoderArtifact,
    reformer_art: &ReformerArtifact,
    cfg: &ClassifierSection,
    seed: u64,
) -> Result<ClassifierArtifact> {
    let mut store = ParamStore::new();
    let encoder = encoder_art.instantiate_encoder(&mut store, false)?;
    let reformer = reformer_art.instantiate(&mut store, false)?;
    let frozen_ids: Vec<ParamId> = encoder
        .param_ids()
        .into_iter()
        .chain(reformer.param_ids())
        .collect();
    let frozen_before = store.bit_hash(&frozen_ids);

    let mut init_rng = rng_for(seed, &[tag::CLASSIFIER, tag::INIT]);
    let classifier =
        FeatureClassifier::build(&mut store, reformer.embed_dim, ds.n_identities, &mut init_rng);
    let mut opt = StageOpt::new(
        &store,
        classifier.param_ids(),
        cfg.optimizer,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    let train_idx = ds.indices(Split::Train);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.set_lr(lr_at(cfg.lr, epoch, cfg.lr_halve_every));
        let mut shuffle_rng = rng_for(seed, &[tag::CLASSIFIER, tag::SHUFFLE, epoch as u64]);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in make_batches(&train_idx, cfg.batch, &mut shuffle_rng) {
            let mut dummy = rng_for(0, &[3]);
            let (_, student, labels) = stack_triplets(ds, &batch, false, &mut dummy);
            store.zero_grads();
            let mut g = Graph::new(&mut store);
            let x = g.input(student);
            let grid = encoder.descriptors(&mut g, x);
            let emb = reformer.embed(&mut g, grid);
            let logits = classifier.logits(&mut g, emb);
            let loss = g.softmax_cross_entropy(logits, &labels);
            let v = g.out(loss).item();
            ensure_finite(v, steps)?;
            g.backward(loss)?;
            drop(g);
            opt.step(&mut store);
            total += v;
            steps += 1;
        }
        log.push(EpochLog {
            epoch,
            stage: "classifier",
            fields: vec![("loss_total", total / steps.max(1) as f64)],
        });
    }
    if store.bit_hash(&frozen_ids) != frozen_before {
        return Err(CoreError::FrozenChanged { stage: "classifier" });
    }
    let train_acc = classify_accuracy(
        &mut store,
        |g, x| {
            let xi = g.input(x);
            let grid = encoder.descriptors(g, xi);
            let emb = reformer.embed(g, grid);
            classifier.logits(g, emb)
        },
        ds,
        Split::Train,
        true,
    );
    Ok(ClassifierArtifact {
        params: snapshot(&store, &classifier.param_ids()),
        n_classes: ds.n_identities,
        embed_dim: reformer.embed_dim,
        train_acc,
        log,
    })
}

/// The G2D[CE] ablation: a fresh reformer plus classifier trained jointly
/// from scratch with cross-entropy only (no distillation); the encoder
/// stays frozen.
pub fn train_ce_variant(
    ds: &Dataset,
    encoder_art: &EncoderArtifact,
    ref_cfg: &ReformerSection,
    cls_cfg: &ClassifierSection,
    seed: u64,
) -> Result<(ReformerArtifact, ClassifierArtifact)> {
    let mut store = ParamStore::new();
    let encoder = encoder_art.instantiate_encoder(&mut store, false)?;
    let frozen_ids = encoder.param_ids();
    let frozen_before = store.bit_hash(&frozen_ids);

    let mut init_rng = rng_for(seed, &[tag::CE_VARIANT, tag::INIT]);
    let reformer = Reformer::build(&mut store, ref_cfg, encoder.grid_channels, &mut init_rng);
    let classifier =
        FeatureClassifier::build(&mut store, ref_cfg.embed_dim, ds.n_identities, &mut init_rng);
    let train_ids: Vec<ParamId> = reformer
        .param_ids()
        .into_iter()
        .chain(classifier.param_ids())
        .collect();
    let mut opt = StageOpt::new(
        &store,
        train_ids.clone(),
        cls_cfg.optimizer,
        cls_cfg.lr,
        cls_cfg.momentum,
        cls_cfg.weight_decay,
    );
    let train_idx = ds.indices(Split::Train);
    let mut log = Vec::new();
    for epoch in 0..cls_cfg.ce_epochs {
        opt.set_lr(lr_at(cls_cfg.lr, epoch, cls_cfg.lr_halve_every));
        let mut shuffle_rng = rng_for(seed, &[tag::CE_VARIANT, tag::SHUFFLE, epoch as u64]);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in make_batches(&train_idx, cls_cfg.batch, &mut shuffle_rng) {
            let mut dummy = rng_for(0, &[4]);
            let (_, student, labels) = stack_triplets(ds, &batch, false, &mut dummy);
            store.zero_grads();
            let mut g = Graph::new(&mut store);
            let x = g.input(student);
            let grid = encoder.descriptors(&mut g, x);
            let emb = reformer.embed(&mut g, grid);
            let logits = classifier.logits(&mut g, emb);
            let loss = g.softmax_cross_entropy(logits, &labels);
            let v = g.out(loss).item();
            ensure_finite(v, steps)?;
            g.backward(loss)?;
            drop(g);
            opt.step(&mut store);
            total += v;
            steps += 1;
        }
        log.push(EpochLog {
            epoch,
            stage: "reformer-ce",
            fields: vec![("loss_total", total / steps.max(1) as f64)],
        });
    }
    if store.bit_hash(&frozen_ids) != frozen_before {
        return Err(CoreError::FrozenChanged { stage: "ce-variant" });
    }
    let train_acc = classify_accuracy(
        &mut store,
        |g, x| {
            let xi = g.input(x);
            let grid = encoder.descriptors(g, xi);
            let emb = reformer.embed(g, grid);
            classifier.logits(g, emb)
        },
        ds,
        Split::Train,
        true,
    );
    let ref_art = ReformerArtifact {
        params: snapshot(&store, &reformer.param_ids()),
        cfg: ref_cfg.clone(),
        grid_channels: encoder.grid_channels,
        log: log.clone(),
    };
    let cls_art = ClassifierArtifact {
        params: snapshot(&store, &classifier.param_ids()),
        n_classes: ds.n_identities,
        embed_dim: ref_cfg.embed_dim,
        train_acc,
        log,
    };
    Ok((ref_art, cls_art))
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

/// Frozen encoder + reformer ready to embed (image, mask) pairs.
pub struct Embedder {
    store: ParamStore,
    encoder: GenerativeEncoder,
    reformer: Reformer,
}

impl Embedder {
    pub fn new(encoder_art: &EncoderArtifact, reformer_art: &ReformerArtifact) -> Result<Embedder> {
        let mut store = ParamStore::new();
        let encoder = encoder_art.instantiate_encoder(&mut store, false)?;
        let reformer = reformer_art.instantiate(&mut store, false)?;
        Ok(Embedder {
            store,
            encoder,
            reformer,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.reformer.embed_dim
    }

    /// Embeds a batch of (image, mask) pairs; an all-zero mask embeds the
    /// unmasked pathway.
    pub fn embed(&mut self, items: &[(&Tensor, &Tensor)]) -> Tensor {
        let d = self.reformer.embed_dim;
        let mut out = Tensor::zeros(&[items.len(), d]);
        for (offset, chunk) in items.chunks(64).enumerate() {
            let s = chunk[0].0.dim(1);
            let mut input = Tensor::zeros(&[chunk.len(), 4, s, s]);
            let plane = s * s;
            for (bi, (image, mask)) in chunk.iter().enumerate() {
                let single = student_input(image, mask);
                input.data_mut()[bi * 4 * plane..(bi + 1) * 4 * plane]
                    .copy_from_slice(single.data());
            }
            let mut g = Graph::new(&mut self.store);
            let x = g.input(input);
            let grid = self.encoder.descriptors(&mut g, x);
            let emb = self.reformer.embed(&mut g, grid);
            let rows = g.out(emb);
            let base = offset * 64;
            out.data_mut()[base * d..base * d + chunk.len() * d]
                .copy_from_slice(rows.data());
        }
        out
    }

    pub fn embed_one(&mut self, image: &Tensor, mask: &Tensor) -> Tensor {
        let rows = self.embed(&[(image, mask)]);
        Tensor::new(vec![self.reformer.embed_dim], rows.into_data())
    }
}

/// Mean intra-identity and inter-identity cosine over all row pairs.
pub fn cosine_gap(rows: &Tensor, identities: &[usize]) -> Result<(f64, f64)> {
    let n = rows.dim(0);
    let d = rows.dim(1);
    assert_eq!(n, identities.len(), "one identity per row");
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..n {
        for j in 0..i {
            let a = Tensor::new(vec![d], rows.data()[i * d..(i + 1) * d].to_vec());
            let b = Tensor::new(vec![d], rows.data()[j * d..(j + 1) * d].to_vec());
            let c = crate::metrics::cosine(&a, &b)?;
            if identities[i] == identities[j] {
                intra.0 += c;
                intra.1 += 1;
            } else {
                inter.0 += c;
                inter.1 += 1;
            }
        }
    }
    Ok((
        intra.0 / intra.1.max(1) as f64,
        inter.0 / inter.1.max(1) as f64,
    ))
}
