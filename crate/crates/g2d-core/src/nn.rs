//! The four networks of the pipeline plus the critic, built from the graph
//! op set. Construction registers named parameters into a [`ParamStore`];
//! forward methods build onto a caller-provided [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::config::{EncoderSection, ReformerSection, TeacherSection};
use crate::losses::CriticNet;
use crate::tensor::Tensor;

fn init_conv(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> ParamId {
    let fan_in = (c_in * k * k) as f64;
    let scale = (2.0 / fan_in).sqrt();
    store.add(name, Tensor::uniform(&[c_out, c_in, k, k], scale, rng), true)
}

fn init_linear(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let scale = (2.0 / d_in as f64).sqrt();
    let w = store.add(
        format!("{name}.w"),
        Tensor::uniform(&[d_in, d_out], scale, rng),
        true,
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true);
    (w, b)
}

/// Conv + per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = init_conv(store, &format!("{name}.k"), c_out, c_in, k, rng);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]), true);
        ConvLayer {
            kernel,
            bias,
            stride,
            pad,
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let c = g.conv2d(x, self.kernel, self.stride, self.pad);
        g.bias_channel(c, self.bias)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.kernel, self.bias]
    }
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// Small convolutional classifier over unmasked faces; its penultimate
/// feature layer is the distillation target.
pub struct Teacher {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    feature_w: ParamId,
    feature_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl Teacher {
    pub fn build(
        store: &mut ParamStore,
        cfg: &TeacherSection,
        image_size: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Teacher {
        assert!(image_size % 8 == 0, "teacher expects image_size % 8 == 0");
        let conv1 = ConvLayer::new(store, "teacher.conv1", 3, 8, 3, 2, 1, rng);
        let conv2 = ConvLayer::new(store, "teacher.conv2", 8, 16, 3, 2, 1, rng);
        let conv3 = ConvLayer::new(store, "teacher.conv3", 16, 32, 3, 2, 1, rng);
        let flat = 32 * (image_size / 8) * (image_size / 8);
        let (feature_w, feature_b) =
            init_linear(store, "teacher.feature", flat, cfg.feature_dim, rng);
        let (head_w, head_b) = init_linear(store, "teacher.head", cfg.feature_dim, n_classes, rng);
        Teacher {
            conv1,
            conv2,
            conv3,
            feature_w,
            feature_b,
            head_w,
            head_b,
            feature_dim: cfg.feature_dim,
            n_classes,
        }
    }

    /// Penultimate features for a `[B, 3, H, W]` batch.
    pub fn features(&self, g: &mut Graph, images: NodeId) -> NodeId {
        let h = self.conv1.forward(g, images);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = self.conv3.forward(g, h);
        let h = g.relu(h);
        let h = g.flatten(h);
        g.linear(h, self.feature_w, self.feature_b)
    }

    pub fn logits(&self, g: &mut Graph, images: NodeId) -> NodeId {
        let f = self.features(g, images);
        let f = g.relu(f);
        g.linear(f, self.head_w, self.head_b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        ids.extend(self.conv1.ids());
        ids.extend(self.conv2.ids());
        ids.extend(self.conv3.ids());
        ids.extend([self.feature_w, self.feature_b, self.head_w, self.head_b]);
        ids
    }
}

// ---------------------------------------------------------------------------
// Generative encoder / inpainting decoder
// ---------------------------------------------------------------------------

/// Encoder from (image, mask) to the descriptor grid. The mask enters as a
/// fourth input channel.
pub struct GenerativeEncoder {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    pub grid_channels: usize,
    pub grid_size: usize,
}

impl GenerativeEncoder {
    pub fn build(
        store: &mut ParamStore,
        cfg: &EncoderSection,
        image_size: usize,
        rng: &mut impl Rng,
    ) -> GenerativeEncoder {
        assert!(image_size % 4 == 0, "encoder expects image_size % 4 == 0");
        let conv1 = ConvLayer::new(store, "encoder.conv1", 4, cfg.hidden_channels, 3, 2, 1, rng);
        let conv2 = ConvLayer::new(
            store,
            "encoder.conv2",
            cfg.hidden_channels,
            cfg.grid_channels,
            3,
            2,
            1,
            rng,
        );
        let conv3 = ConvLayer::new(
            store,
            "encoder.conv3",
            cfg.grid_channels,
            cfg.grid_channels,
            3,
            1,
            1,
            rng,
        );
        GenerativeEncoder {
            conv1,
            conv2,
            conv3,
            grid_channels: cfg.grid_channels,
            grid_size: image_size / 4,
        }
    }

    /// `[B, 4, H, W]` (image + mask channel) to `[B, C, H/4, W/4]`.
    pub fn descriptors(&self, g: &mut Graph, input: NodeId) -> NodeId {
        let h = self.conv1.forward(g, input);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        self.conv3.forward(g, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        ids.extend(self.conv1.ids());
        ids.extend(self.conv2.ids());
        ids.extend(self.conv3.ids());
        ids
    }
}

/// Mirrored upsampling decoder reconstructing the full face in [0, 1].
pub struct InpaintingDecoder {
    conv1: ConvLayer,
    conv2: ConvLayer,
    head: ConvLayer,
}

impl InpaintingDecoder {
    pub fn build(
        store: &mut ParamStore,
        cfg: &EncoderSection,
        rng: &mut impl Rng,
    ) -> InpaintingDecoder {
        let dc = cfg.decoder_channels;
        let conv1 = ConvLayer::new(store, "decoder.conv1", cfg.grid_channels, dc, 3, 1, 1, rng);
        let conv2 = ConvLayer::new(store, "decoder.conv2", dc, dc, 3, 1, 1, rng);
        let mut head = ConvLayer::new(store, "decoder.head", dc, 3, 3, 1, 1, rng);
        // Start the output near mid-gray so the clamp is not saturated.
        store.get_mut(head.bias).value = Tensor::full(&[3], 0.5);
        head.pad = 1;
        InpaintingDecoder { conv1, conv2, head }
    }

    /// Descriptor grid `[B, C, S, S]` to a `[B, 3, 4S, 4S]` image.
    pub fn reconstruct(&self, g: &mut Graph, descriptors: NodeId) -> NodeId {
        let h = self.conv1.forward(g, descriptors);
        let h = g.relu(h);
        let h = g.upsample2x(h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = g.upsample2x(h);
        let h = self.head.forward(g, h);
        g.clamp01(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        ids.extend(self.conv1.ids());
        ids.extend(self.conv2.ids());
        ids.extend(self.head.ids());
        ids
    }
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

/// 3-layer convolutional critic with a scalar head.
pub struct Critic {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    head_w: ParamId,
    head_b: ParamId,
}

impl Critic {
    pub fn build(store: &mut ParamStore, rng: &mut impl Rng) -> Critic {
        let conv1 = ConvLayer::new(store, "critic.conv1", 3, 8, 3, 2, 1, rng);
        let conv2 = ConvLayer::new(store, "critic.conv2", 8, 16, 3, 2, 1, rng);
        let conv3 = ConvLayer::new(store, "critic.conv3", 16, 16, 3, 2, 1, rng);
        let (head_w, head_b) = init_linear(store, "critic.head", 16, 1, rng);
        Critic {
            conv1,
            conv2,
            conv3,
            head_w,
            head_b,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        ids.extend(self.conv1.ids());
        ids.extend(self.conv2.ids());
        ids.extend(self.conv3.ids());
        ids.extend([self.head_w, self.head_b]);
        ids
    }
}

impl CriticNet for Critic {
    fn scores(&self, g: &mut Graph, input: NodeId) -> NodeId {
        let h = self.conv1.forward(g, input);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = self.conv3.forward(g, h);
        let h = g.relu(h);
        let h = g.mean_pool(h);
        g.linear(h, self.head_w, self.head_b)
    }
}

// ---------------------------------------------------------------------------
// Discriminative reformer
// ---------------------------------------------------------------------------

struct ResBlock {
    conv_a: ConvLayer,
    conv_b: ConvLayer,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> ResBlock {
        ResBlock {
            conv_a: ConvLayer::new(store, &format!("{name}.a"), channels, channels, 3, 1, 1, rng),
            conv_b: ConvLayer::new(store, &format!("{name}.b"), channels, channels, 3, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.conv_a.forward(g, x);
        let h = g.relu(h);
        let h = self.conv_b.forward(g, h);
        let s = g.residual_add(h, x);
        g.relu(s)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        ids.extend(self.conv_a.ids());
        ids.extend(self.conv_b.ids());
        ids
    }
}

/// Conv layer + residual blocks + pooling + linear head producing the
/// identity-aware embedding.
pub struct Reformer {
    conv_in: ConvLayer,
    blocks: Vec<ResBlock>,
    head_w: ParamId,
    head_b: ParamId,
    pub embed_dim: usize,
}

impl Reformer {
    pub fn build(
        store: &mut ParamStore,
        cfg: &ReformerSection,
        grid_channels: usize,
        rng: &mut impl Rng,
    ) -> Reformer {
        let conv_in = ConvLayer::new(
            store,
            "reformer.conv_in",
            grid_channels,
            cfg.channels,
            3,
            1,
            1,
            rng,
        );
        let blocks = (0..cfg.blocks)
            .map(|i| ResBlock::new(store, &format!("reformer.block{i}"), cfg.channels, rng))
            .collect();
        let (head_w, head_b) = init_linear(store, "reformer.head", cfg.channels, cfg.embed_dim, rng);
        Reformer {
            conv_in,
            blocks,
            head_w,
            head_b,
            embed_dim: cfg.embed_dim,
        }
    }

    /// Descriptor grid `[B, C, S, S]` to embeddings `[B, d_s]`.
    pub fn embed(&self, g: &mut Graph, descriptors: NodeId) -> NodeId {
        let mut h = self.conv_in.forward(g, descriptors);
        h = g.relu(h);
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        let p = g.mean_pool(h);
        g.linear(p, self.head_w, self.head_b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        ids.extend(self.conv_in.ids());
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend([self.head_w, self.head_b]);
        ids
    }
}

// ---------------------------------------------------------------------------
// Feature classifier and the ell0 dimension map
// ---------------------------------------------------------------------------

/// Fully-connected layer + softmax over identities.
pub struct FeatureClassifier {
    pub w: ParamId,
    pub b: ParamId,
    pub n_classes: usize,
}

impl FeatureClassifier {
    pub fn build(
        store: &mut ParamStore,
        embed_dim: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> FeatureClassifier {
        let (w, b) = init_linear(store, "classifier.fc", embed_dim, n_classes, rng);
        FeatureClassifier { w, b, n_classes }
    }

    pub fn logits(&self, g: &mut Graph, embeddings: NodeId) -> NodeId {
        g.linear(embeddings, self.w, self.b)
    }

    /// Softmax probabilities; rows sum to 1.
    pub fn probabilities(&self, g: &mut Graph, embeddings: NodeId) -> NodeId {
        let l = self.logits(g, embeddings);
        g.softmax(l)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Linear map from student embedding space to teacher feature space.
pub struct Ell0 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Ell0 {
    pub fn build(
        store: &mut ParamStore,
        student_dim: usize,
        teacher_dim: usize,
        rng: &mut impl Rng,
    ) -> Ell0 {
        let (w, b) = init_linear(store, "ell0", student_dim, teacher_dim, rng);
        Ell0 { w, b }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}
