//! Classifier and stability module.
//!
//! The classifier is a small MLP: a feature extractor (affine + activation
//! stack) followed by an affine head producing K logits. Alongside it lives a
//! class-conditioned stability module — a variational encoder/decoder over
//! the extractor's feature space:
//!
//! ```text
//! (features ++ onehot(class)) ─ encoder ─→ (μ, logvar)
//! z = μ + exp(½·logvar) ⊙ ε          (logvar clamped to [−10, 10])
//! x̂ = decoder(z)
//! x' = (features + x̂) / 2            (blended features fed to the head)
//! ```
//!
//! Two forward paths compute identical values: a plain one for evaluation
//! (no tape, no randomness — evaluation never touches the stability module
//! unless explicitly asked with ε = 0) and a graph path for training. Both
//! call the same kernels, so they agree bit for bit.

use crate::diffcore::{self, DiffError, Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Extractor nonlinearity. Encoder/decoder hidden layers always use tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Architecture description; widths list hidden layers (may be empty for the
/// encoder/decoder, giving purely linear maps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub n_classes: usize,
    /// Affine+activation widths; the last entry is the feature width d_f.
    pub extractor_widths: Vec<usize>,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            n_classes: 8,
            extractor_widths: vec![32, 32],
            latent_dim: 8,
            encoder_widths: vec![32],
            decoder_widths: vec![32],
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.extractor_widths.last().unwrap_or(&self.input_dim)
    }
}

/// One affine map: weights [in×out], bias [out].
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // Scaled uniform init: bound = sqrt(6 / (fan_in + fan_out)), zero bias.
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            w: Tensor::from_parts(vec![fan_in, fan_out], w),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    /// Plain forward: x·W + b.
    fn forward(&self, x: &Tensor) -> Tensor {
        let prod = diffcore::kernels::matmul(x, &self.w).expect("affine shapes fixed at init");
        diffcore::kernels::add(&prod, &self.b).expect("bias width fixed at init")
    }
}

/// Class-conditioned variational encoder/decoder over feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityModule {
    pub encoder_hidden: Vec<Affine>,
    pub mu_head: Affine,
    pub logvar_head: Affine,
    pub decoder_hidden: Vec<Affine>,
    pub output: Affine,
}

/// Classifier plus stability module. The stability parameters are part of
/// the model and persist across phases even when an algorithm ignores them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Vec<Affine>,
    pub head: Affine,
    pub stability: StabilityModule,
}

/// Values of one plain stability pass.
#[derive(Debug, Clone)]
pub struct StabilityOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z: Tensor,
    pub xhat: Tensor,
    pub xprime: Tensor,
}

/// Node ids of the model parameters inserted into a graph, in canonical
/// (flattening) order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub extractor: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
    pub encoder_hidden: Vec<(NodeId, NodeId)>,
    pub mu_head: (NodeId, NodeId),
    pub logvar_head: (NodeId, NodeId),
    pub decoder_hidden: Vec<(NodeId, NodeId)>,
    pub output: (NodeId, NodeId),
}

impl ModelParams {
    /// Node ids flattened in the same canonical order as
    /// [`Model::param_tensors`].
    pub fn flat_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut push_pair = |p: &(NodeId, NodeId)| {
            out.push(p.0);
            out.push(p.1);
        };
        for p in &self.extractor {
            push_pair(p);
        }
        push_pair(&self.head);
        for p in &self.encoder_hidden {
            push_pair(p);
        }
        push_pair(&self.mu_head);
        push_pair(&self.logvar_head);
        for p in &self.decoder_hidden {
            push_pair(p);
        }
        push_pair(&self.output);
        out
    }
}

/// Node ids of one stability pass built on a graph.
#[derive(Debug, Clone, Copy)]
pub struct StabilityNodes {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub sigma: NodeId,
    pub z: NodeId,
    pub xhat: NodeId,
    pub xprime: NodeId,
}

/// Bounds applied to the encoder's logvar output before exponentiation.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Initialize a model from its architecture and a dedicated init stream.
/// Draw order is the canonical parameter order, so identical streams give
/// identical models.
pub fn init_model(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Model {
    let mut extractor = Vec::new();
    let mut prev = config.input_dim;
    for &w in &config.extractor_widths {
        extractor.push(Affine::init(prev, w, rng));
        prev = w;
    }
    let d_f = prev;
    let head = Affine::init(d_f, config.n_classes, rng);

    let enc_in = d_f + config.n_classes;
    let mut encoder_hidden = Vec::new();
    let mut prev = enc_in;
    for &w in &config.encoder_widths {
        encoder_hidden.push(Affine::init(prev, w, rng));
        prev = w;
    }
    let mu_head = Affine::init(prev, config.latent_dim, rng);
    let logvar_head = Affine::init(prev, config.latent_dim, rng);

    let mut decoder_hidden = Vec::new();
    let mut prev = config.latent_dim;
    for &w in &config.decoder_widths {
        decoder_hidden.push(Affine::init(prev, w, rng));
        prev = w;
    }
    let output = Affine::init(prev, d_f, rng);

    Model {
        config: config.clone(),
        extractor,
        head,
        stability: StabilityModule { encoder_hidden, mu_head, logvar_head, decoder_hidden, output },
    }
}

/// One-hot rows for a label vector.
pub fn onehot(labels: &[usize], k: usize) -> Tensor {
    assert!(!labels.is_empty(), "onehot needs at least one label");
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} out of range for {k} classes");
        data[i * k + y] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), k], data)
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Plain extractor pass: [B×d] inputs → [B×d_f] features.
    pub fn features(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in &self.extractor {
            h = layer.forward(&h);
            h = match self.config.activation {
                Activation::Tanh => diffcore::kernels::map(&h, f64::tanh),
                Activation::Relu => diffcore::kernels::map(&h, |v| v.max(0.0)),
            };
        }
        h
    }

    /// Plain head pass: features → logits.
    pub fn logits(&self, features: &Tensor) -> Tensor {
        self.head.forward(features)
    }

    /// Evaluation path: `(features, logits)` with no stability module and no
    /// randomness involved.
    pub fn forward_classify(&self, x: &Tensor) -> (Tensor, Tensor) {
        let f = self.features(x);
        let l = self.logits(&f);
        (f, l)
    }

    /// Plain stability pass over precomputed features. `eps` has shape
    /// [B×d_z]; pass zeros for the deterministic evaluation variant.
    pub fn stability_forward(&self, features: &Tensor, labels: &[usize], eps: &Tensor) -> StabilityOutput {
        let oh = onehot(labels, self.config.n_classes);
        let mut h = diffcore::kernels::concat_cols(features, &oh).expect("row counts match");
        for layer in &self.stability.encoder_hidden {
            h = diffcore::kernels::map(&layer.forward(&h), f64::tanh);
        }
        let mu = self.stability.mu_head.forward(&h);
        let logvar = diffcore::kernels::map(&self.stability.logvar_head.forward(&h), |v| {
            v.clamp(LOGVAR_MIN, LOGVAR_MAX)
        });
        let sigma = diffcore::kernels::map(&logvar, |v| (0.5 * v).exp());
        let noise = diffcore::kernels::mul(&sigma, eps).expect("eps must be [B×d_z]");
        let z = diffcore::kernels::add(&mu, &noise).expect("same shape");
        let mut d = z.clone();
        for layer in &self.stability.decoder_hidden {
            d = diffcore::kernels::map(&layer.forward(&d), f64::tanh);
        }
        let xhat = self.stability.output.forward(&d);
        let sum = diffcore::kernels::add(features, &xhat).expect("decoder restores d_f");
        let xprime = diffcore::kernels::map(&sum, |v| 0.5 * v);
        StabilityOutput { mu, sigma, z, xhat, xprime }
    }

    /// Insert every parameter tensor into `g` as a gradient-enabled leaf, in
    /// canonical order.
    pub fn insert_params(&self, g: &mut Graph) -> ModelParams {
        let pair = |g: &mut Graph, a: &Affine| (g.parameter(a.w.clone()), g.parameter(a.b.clone()));
        ModelParams {
            extractor: self.extractor.iter().map(|a| pair(g, a)).collect(),
            head: pair(g, &self.head),
            encoder_hidden: self.stability.encoder_hidden.iter().map(|a| pair(g, a)).collect(),
            mu_head: pair(g, &self.stability.mu_head),
            logvar_head: pair(g, &self.stability.logvar_head),
            decoder_hidden: self.stability.decoder_hidden.iter().map(|a| pair(g, a)).collect(),
            output: pair(g, &self.stability.output),
        }
    }

    /// Canonical parameter order: extractor (w, b) per layer, head, encoder
    /// hidden, μ head, logvar head, decoder hidden, decoder output.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for a in &self.extractor {
            out.push(&a.w);
            out.push(&a.b);
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        for a in &self.stability.encoder_hidden {
            out.push(&a.w);
            out.push(&a.b);
        }
        out.push(&self.stability.mu_head.w);
        out.push(&self.stability.mu_head.b);
        out.push(&self.stability.logvar_head.w);
        out.push(&self.stability.logvar_head.b);
        for a in &self.stability.decoder_hidden {
            out.push(&a.w);
            out.push(&a.b);
        }
        out.push(&self.stability.output.w);
        out.push(&self.stability.output.b);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for a in &mut self.extractor {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        for a in &mut self.stability.encoder_hidden {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out.push(&mut self.stability.mu_head.w);
        out.push(&mut self.stability.mu_head.b);
        out.push(&mut self.stability.logvar_head.w);
        out.push(&mut self.stability.logvar_head.b);
        for a in &mut self.stability.decoder_hidden {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out.push(&mut self.stability.output.w);
        out.push(&mut self.stability.output.b);
        out
    }

    /// The node ids of `insert_params`, flattened in the same canonical order
    /// as [`Model::param_tensors`].
    pub fn n_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters as one flat vector (canonical order, row-major weights
    /// before each bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for t in self.param_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Load parameters from a flat vector produced by [`Model::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), DiffError> {
        if flat.len() != self.n_params() {
            return Err(DiffError::ShapeLenMismatch {
                shape: vec![self.n_params()],
                len: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.param_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Serializable snapshot: architecture plus the flat parameter list.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { config: self.config.clone(), params: self.flat_params() }
    }

    /// Rebuild a model from a snapshot.
    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<Model, DiffError> {
        let mut rng = crate::rng::SeedSplitter::new(0).rng("snapshot-restore");
        let mut m = init_model(&snap.config, &mut rng);
        m.set_flat_params(&snap.params)?;
        Ok(m)
    }
}

/// Architecture + flat parameters, serializable to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// Graph forward through one inserted affine pair.
fn affine_graph(g: &mut Graph, (w, b): (NodeId, NodeId), x: NodeId) -> Result<NodeId, DiffError> {
    let prod = g.matmul(x, w)?;
    g.add(prod, b)
}

/// Graph extractor pass mirroring [`Model::features`].
pub fn features_graph(
    g: &mut Graph,
    params: &ModelParams,
    x: NodeId,
    activation: Activation,
) -> Result<NodeId, DiffError> {
    let mut h = x;
    for &layer in &params.extractor {
        h = affine_graph(g, layer, h)?;
        h = match activation {
            Activation::Tanh => g.tanh(h)?,
            Activation::Relu => g.relu(h)?,
        };
    }
    Ok(h)
}

/// Graph head pass mirroring [`Model::logits`].
pub fn logits_graph(g: &mut Graph, params: &ModelParams, features: NodeId) -> Result<NodeId, DiffError> {
    affine_graph(g, params.head, features)
}

/// Clamp to [lo, hi] composed from relu: x − relu(x − hi) + relu(lo − x).
/// Gradient is 1 inside the interval and 0 outside, as for a hard clamp.
fn clamp_graph(g: &mut Graph, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
    let shape = g.value(x).shape().to_vec();
    let numel = g.value(x).len();
    let hi_c = g.constant(Tensor::from_parts(shape.clone(), vec![hi; numel]));
    let lo_c = g.constant(Tensor::from_parts(shape, vec![lo; numel]));
    let over = g.sub(x, hi_c)?;
    let over = g.relu(over)?;
    let under = g.sub(lo_c, x)?;
    let under = g.relu(under)?;
    let capped = g.sub(x, over)?;
    g.add(capped, under)
}

/// Graph stability pass mirroring [`Model::stability_forward`]. `class_onehot`
/// and `eps` are constant leaves supplied by the caller (ε is frozen noise,
/// never sampled inside the graph).
pub fn stability_graph(
    g: &mut Graph,
    params: &ModelParams,
    features: NodeId,
    class_onehot: NodeId,
    eps: NodeId,
) -> Result<StabilityNodes, DiffError> {
    let mut h = g.concat(features, class_onehot)?;
    for &layer in &params.encoder_hidden {
        h = affine_graph(g, layer, h)?;
        h = g.tanh(h)?;
    }
    let mu = affine_graph(g, params.mu_head, h)?;
    let logvar_raw = affine_graph(g, params.logvar_head, h)?;
    let logvar = clamp_graph(g, logvar_raw, LOGVAR_MIN, LOGVAR_MAX)?;
    let half = g.scalar_mul(logvar, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul_elementwise(sigma, eps)?;
    let z = g.add(mu, noise)?;
    let mut d = z;
    for &layer in &params.decoder_hidden {
        d = affine_graph(g, layer, d)?;
        d = g.tanh(d)?;
    }
    let xhat = affine_graph(g, params.output, d)?;
    let sum = g.add(features, xhat)?;
    let xprime = g.scalar_mul(sum, 0.5)?;
    Ok(StabilityNodes { mu, logvar, sigma, z, xhat, xprime })
}
