//! Training objectives.
//!
//! Two loss families drive every algorithm in this crate:
//!
//! * **Retain loss** — keeps the classifier useful on data it must remember.
//!   Four terms: cross-entropy on blended features, feature reconstruction,
//!   a Gaussian KL pulling the latent posterior toward N(0, I), and a
//!   separation term that *rewards* batch means drifting away from a running
//!   reference of past latent means:
//!
//!   ```text
//!   L = CE(head(x'), y) + mean_b ‖f − x̂‖² + KL(N(μ,σ²) ‖ N(0,I))
//!       + λ · ( mean_b ‖μ_b − μ_ref‖₂ + ε )⁻¹
//!   ```
//!
//!   The reference μ_ref is an exponential moving average updated *after*
//!   each optimizer step; it enters the graph as a constant, so no gradient
//!   ever flows into it.
//!
//! * **Forget loss** — pushes predictions on forget samples toward a random
//!   soft target `q` drawn fresh per sample per step: uniform weights over
//!   the retained classes (never the sample's own label), normalized to a
//!   distribution. The loss is KL(q ‖ softmax(logits)); its gradient on the
//!   logits is (p − q)/B.

use crate::diffcore::{CeTarget, DiffError, Graph, NodeId, Tensor};
use crate::model::{
    features_graph, logits_graph, onehot, stability_graph, Model, ModelParams, StabilityNodes,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Decay of the latent-mean reference average.
pub const EMA_DECAY: f64 = 0.99;

/// Guard added to the mean latent distance before taking the reciprocal.
pub const SEPARATION_EPS: f64 = 1e-6;

/// Whether the latent reference tracks one global mean or one mean per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    Global,
    PerClass,
}

/// Running reference of batch-mean latent μ. Starts empty; the first update
/// initializes it to the observed mean, later updates blend with `decay`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub mode: EmaMode,
    global: Option<Vec<f64>>,
    per_class: Vec<Option<Vec<f64>>>,
}

impl EmaState {
    pub fn new(decay: f64, mode: EmaMode, n_classes: usize) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must be in [0, 1)");
        Self { decay, mode, global: None, per_class: vec![None; n_classes] }
    }

    /// Blend the batch's latent means into the running reference. `mu` is
    /// [B×d_z]; `labels` selects the per-class groups when in per-class mode.
    pub fn update(&mut self, mu: &Tensor, labels: &[usize]) {
        let [rows, d] = [mu.shape()[0], mu.shape()[1]];
        assert_eq!(labels.len(), rows, "one label per latent row");
        match self.mode {
            EmaMode::Global => {
                let mut mean = vec![0.0; d];
                for i in 0..rows {
                    for (m, v) in mean.iter_mut().zip(mu.row(i)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                blend(&mut self.global, &mean, self.decay);
            }
            EmaMode::PerClass => {
                for class in 0..self.per_class.len() {
                    let idx: Vec<usize> = (0..rows).filter(|&i| labels[i] == class).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let mut mean = vec![0.0; d];
                    for &i in &idx {
                        for (m, v) in mean.iter_mut().zip(mu.row(i)) {
                            *m += v;
                        }
                    }
                    for m in &mut mean {
                        *m /= idx.len() as f64;
                    }
                    blend(&mut self.per_class[class], &mean, self.decay);
                }
            }
        }
    }

    /// Reference rows aligned with a μ batch, for the separation term.
    ///
    /// Returns the [B×d_z] reference tensor and the number of rows that have
    /// a real reference. Rows whose class reference does not exist yet are
    /// filled with the row's own μ value — their distance and gradient are
    /// exactly zero — and the mean is taken over the valid rows only.
    /// `None` when no row has a reference (the separation term is skipped).
    pub fn reference_rows(&self, mu: &Tensor, labels: &[usize]) -> Option<(Tensor, usize)> {
        let [rows, d] = [mu.shape()[0], mu.shape()[1]];
        assert_eq!(labels.len(), rows, "one label per latent row");
        let lookup = |label: usize| -> Option<&[f64]> {
            match self.mode {
                EmaMode::Global => self.global.as_deref(),
                EmaMode::PerClass => self.per_class[label].as_deref(),
            }
        };
        let mut data = Vec::with_capacity(rows * d);
        let mut valid = 0;
        for i in 0..rows {
            match lookup(labels[i]) {
                Some(r) => {
                    data.extend_from_slice(r);
                    valid += 1;
                }
                None => data.extend_from_slice(mu.row(i)),
            }
        }
        if valid == 0 {
            return None;
        }
        Some((Tensor::from_parts(vec![rows, d], data), valid))
    }
}

fn blend(slot: &mut Option<Vec<f64>>, mean: &[f64], decay: f64) {
    match slot {
        None => *slot = Some(mean.to_vec()),
        Some(ema) => {
            for (e, m) in ema.iter_mut().zip(mean) {
                *e = decay * *e + (1.0 - decay) * m;
            }
        }
    }
}

/// Which retain-loss terms are active. Cross-entropy on the blended features
/// is always present; the regularizers toggle independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetainLossConfig {
    pub lambda: f64,
    pub include_recon: bool,
    pub include_kl: bool,
    pub include_sep: bool,
}

impl Default for RetainLossConfig {
    fn default() -> Self {
        Self { lambda: 0.1, include_recon: true, include_kl: true, include_sep: true }
    }
}

/// Per-term values of one retain-loss evaluation. `sep` holds the raw
/// reciprocal (before λ); `total = ce + recon + kl + lambda · sep` over the
/// active terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetainLossBreakdown {
    pub ce: f64,
    pub recon: f64,
    pub kl: f64,
    pub sep: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Graph nodes of the active individual terms; `sep` is the raw reciprocal
/// separation node (before λ). Inactive or skipped terms are absent.
#[derive(Debug, Clone, Copy)]
pub struct RetainTermNodes {
    pub ce: NodeId,
    pub recon: Option<NodeId>,
    pub kl: Option<NodeId>,
    pub sep: Option<NodeId>,
}

/// Graph nodes of one retain-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RetainLoss {
    pub total: NodeId,
    pub stability: StabilityNodes,
    pub terms: RetainTermNodes,
    pub breakdown: RetainLossBreakdown,
}

/// KL(N(μ, σ²) ‖ N(0, I)) averaged over the batch:
/// ½ Σ_{b,j} (μ² + σ² − 1 − log σ²) / B with σ² = exp(logvar).
pub fn gaussian_kl_graph(g: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId, DiffError> {
    let shape = g.value(mu).shape().to_vec();
    let rows = shape[0];
    let numel = g.value(mu).len();
    let sq = g.square(mu)?;
    let ex = g.exp(logvar)?;
    let s1 = g.add(sq, ex)?;
    let ones = g.constant(Tensor::from_parts(shape, vec![1.0; numel]));
    let s2 = g.sub(s1, ones)?;
    let s3 = g.sub(s2, logvar)?;
    let total = g.sum(s3)?;
    g.scalar_mul(total, 0.5 / rows as f64)
}

/// Plain value of [`gaussian_kl_graph`], same operation order (agrees bit
/// for bit).
pub fn gaussian_kl_value(mu: &Tensor, logvar: &Tensor) -> f64 {
    let rows = mu.shape()[0] as f64;
    let mut acc = 0.0;
    for (m, lv) in mu.data().iter().zip(logvar.data()) {
        acc += ((m * m + lv.exp()) - 1.0) - lv;
    }
    acc * (0.5 / rows)
}

/// Build the retain loss over a batch. `x` is the raw input batch [B×d] and
/// `eps` the frozen reparameterization noise [B×d_z], both constant leaves.
pub fn retain_loss(
    g: &mut Graph,
    model: &Model,
    params: &ModelParams,
    x: NodeId,
    labels: &[usize],
    eps: NodeId,
    ema: &EmaState,
    cfg: &RetainLossConfig,
) -> Result<RetainLoss, DiffError> {
    let rows = labels.len();
    let f = features_graph(g, params, x, model.config.activation)?;
    let oh = g.constant(onehot(labels, model.config.n_classes));
    let stab = stability_graph(g, params, f, oh, eps)?;
    let logits = logits_graph(g, params, stab.xprime)?;
    let ce = g.softmax_logsumexp_ce(logits, CeTarget::Labels(labels.to_vec()))?;

    let mut total = ce;
    let mut terms = RetainTermNodes { ce, recon: None, kl: None, sep: None };
    let mut recon_value = 0.0;
    if cfg.include_recon {
        // mean_b ‖f − x̂‖² = (Σ elementwise squares) / B
        let d = g.sub(f, stab.xhat)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        let recon = g.scalar_mul(s, 1.0 / rows as f64)?;
        recon_value = g.value(recon).item();
        terms.recon = Some(recon);
        total = g.add(total, recon)?;
    }

    let mut kl_value = 0.0;
    if cfg.include_kl {
        let kl = gaussian_kl_graph(g, stab.mu, stab.logvar)?;
        kl_value = g.value(kl).item();
        terms.kl = Some(kl);
        total = g.add(total, kl)?;
    }

    let mut sep_value = 0.0;
    if cfg.include_sep {
        if let Some((refs, valid)) = ema.reference_rows(g.value(stab.mu), labels) {
            let r = g.constant(refs);
            let d = g.sub(stab.mu, r)?;
            let norms = g.l2_norm(d)?;
            let s = g.sum(norms)?;
            let m = g.scalar_mul(s, 1.0 / valid as f64)?;
            let e = g.scalar_const(SEPARATION_EPS);
            let m_eps = g.add(m, e)?;
            // Reciprocal composed as exp(−log(·)); the argument is > 0.
            let ln = g.log(m_eps)?;
            let neg = g.scalar_mul(ln, -1.0)?;
            let rec = g.exp(neg)?;
            sep_value = g.value(rec).item();
            terms.sep = Some(rec);
            let weighted = g.scalar_mul(rec, cfg.lambda)?;
            total = g.add(total, weighted)?;
        }
    }

    let breakdown = RetainLossBreakdown {
        ce: g.value(ce).item(),
        recon: recon_value,
        kl: kl_value,
        sep: sep_value,
        lambda: cfg.lambda,
        total: g.value(total).item(),
    };
    Ok(RetainLoss { total, stability: stab, terms, breakdown })
}

/// Plain cross-entropy on raw features (no stability module); the objective
/// of ordinary training and of finetuning.
pub fn classification_loss(
    g: &mut Graph,
    model: &Model,
    params: &ModelParams,
    x: NodeId,
    labels: &[usize],
) -> Result<NodeId, DiffError> {
    let f = features_graph(g, params, x, model.config.activation)?;
    let logits = logits_graph(g, params, f)?;
    g.softmax_logsumexp_ce(logits, CeTarget::Labels(labels.to_vec()))
}

/// Random soft targets for a forget batch: one row per sample, uniform draws
/// over `support` minus the sample's own label, normalized to sum 1. Fresh
/// draws every call.
pub fn forget_targets(
    labels: &[usize],
    support: &[usize],
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, DiffError> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (row, &y) in labels.iter().enumerate() {
        let allowed: Vec<usize> = support.iter().copied().filter(|&c| c != y).collect();
        if allowed.is_empty() || allowed.iter().any(|&c| c >= n_classes) {
            return Err(DiffError::InvalidTarget { row });
        }
        let mut draws = vec![0.0; allowed.len()];
        let mut sum = 0.0;
        while sum == 0.0 {
            for d in &mut draws {
                *d = rng.gen::<f64>();
            }
            sum = draws.iter().sum();
        }
        for (&c, d) in allowed.iter().zip(&draws) {
            data[row * n_classes + c] = d / sum;
        }
    }
    Ok(Tensor::from_parts(vec![labels.len(), n_classes], data))
}

/// KL(q ‖ softmax(logits)) averaged over the batch, built as the soft
/// cross-entropy plus the constant −H(q), so the node's value is the true KL
/// while the gradient on the logits stays (p − q)/B.
pub fn forget_loss(g: &mut Graph, logits: NodeId, q: &Tensor) -> Result<NodeId, DiffError> {
    let rows = q.shape()[0] as f64;
    let ce = g.softmax_logsumexp_ce(logits, CeTarget::Soft(q.clone()))?;
    // −H(q) per row, averaged: (1/B) Σ_{b,j: q>0} q ln q
    let mut c = 0.0;
    for v in q.data() {
        if *v > 0.0 {
            c += v * v.ln();
        }
    }
    let neg_entropy = g.scalar_const(c / rows);
    g.add(ce, neg_entropy)
}

/// Classification margin of one logit row: the true-class logit minus the
/// best competing logit. Positive means a correct, confident prediction.
pub fn margin(logits: &[f64], label: usize) -> f64 {
    assert!(logits.len() >= 2, "margin needs at least two classes");
    assert!(label < logits.len(), "label out of range");
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[label] - best_other
}
