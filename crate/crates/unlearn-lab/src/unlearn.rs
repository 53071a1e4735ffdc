//! Unlearning algorithms and the continual orchestrator.
//!
//! Four algorithms share one step/phase interface:
//!
//! * **Retrain** — fresh initialization each phase, trained on the current
//!   retain split only; the reference an unlearner is judged against.
//! * **Finetune** — keeps the model and minimizes cross-entropy on retain
//!   data, never touching forget rows.
//! * **NegGrad** — gradient *ascent* on the forget batch's cross-entropy.
//! * **SAFER** — pairs a retain batch with a forget batch each step; the
//!   retain batch drives the stabilized four-term loss, the forget batch a
//!   randomized-target KL pushing unlearning margins negative. Ablation
//!   switches: `um` gates the forget term, `ic` the reconstruction term,
//!   `cd` the cluster-separation term; with `ic`/`cd` both off the whole
//!   retain pass is dropped, and with all three off the step is a no-op.
//!
//! The orchestrator walks a phase plan, exposing only the current forget and
//! retain views to the algorithm. Rows forgotten in earlier phases are never
//! gathered into any training batch — they reappear only in evaluation.

use crate::datagen::{LabeledDataset, PhasePartition, PhasePlan};
use crate::diffcore::{DiffError, Gradients, Graph, Tensor};
use crate::losses::{
    classification_loss, forget_loss, forget_targets, retain_loss, EmaMode, EmaState,
    RetainLossConfig, EMA_DECAY,
};
use crate::metrics::{set_accuracy, AccuracyTable, EvalSet};
use crate::model::{
    features_graph, init_model, logits_graph, onehot, stability_graph, Model, ModelSnapshot,
};
use crate::rng::SeedSplitter;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: usize, source: DiffError },
    #[error("a retain batch is required and was empty")]
    EmptyRetainBatch,
    #[error("invalid algorithm config: {what}")]
    BadConfig { what: String },
    #[error("plan refers to row {row} but the dataset has {rows} rows")]
    PlanMismatch { row: usize, rows: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// The four unlearning strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Retrain,
    Finetune,
    #[serde(rename = "neggrad")]
    NegGrad,
    Safer,
}

impl AlgorithmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::Retrain => "retrain",
            AlgorithmKind::Finetune => "finetune",
            AlgorithmKind::NegGrad => "neggrad",
            AlgorithmKind::Safer => "safer",
        }
    }
}

/// Per-algorithm hyperparameters, fixed across phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    /// Optimization epochs per phase.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Momentum coefficient; 0 gives plain gradient descent.
    pub momentum: f64,
    /// Weight of the cluster-separation term inside the retain loss.
    pub lambda: f64,
    /// Weight of the forget loss relative to the retain loss.
    pub beta: f64,
    /// Forget-term switch (negative unlearning margins).
    pub um: bool,
    /// Reconstruction-term switch (intra-class compactness).
    pub ic: bool,
    /// Separation-term switch (cluster separation via the EMA reference).
    pub cd: bool,
    /// Track one latent reference per class instead of one global mean.
    pub ema_per_class: bool,
}

impl AlgorithmConfig {
    pub fn new(kind: AlgorithmKind) -> Self {
        Self {
            kind,
            epochs: 10,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            lambda: 0.1,
            beta: 1.0,
            um: true,
            ic: true,
            cd: true,
            ema_per_class: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::BadConfig { what: what.to_string() });
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive and finite");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative and finite");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative and finite");
        }
        Ok(())
    }

    fn ema_mode(&self) -> EmaMode {
        if self.ema_per_class {
            EmaMode::PerClass
        } else {
            EmaMode::Global
        }
    }
}

/// Hyperparameters of the original training run that produces f_θ0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.05, batch_size: 32, momentum: 0.9 }
    }
}

/// Loss values of one optimizer step. Terms an algorithm does not compute
/// stay at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub ce: f64,
    pub recon: f64,
    pub kl: f64,
    pub sep: f64,
    pub forget_kl: f64,
}

impl StepLoss {
    fn ce_only(step: usize, ce: f64) -> Self {
        Self { step, ce, recon: 0.0, kl: 0.0, sep: 0.0, forget_kl: 0.0 }
    }
}

/// Everything recorded about one phase. The model snapshot and wall time are
/// kept in memory for downstream analysis but stay out of the serialized
/// record: snapshots are bulky, and timings belong in a separate
/// non-deterministic sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseResult {
    pub phase: usize,
    #[serde(skip)]
    pub snapshot: ModelSnapshot,
    pub accuracies: AccuracyTable,
    /// Accuracy on retain-test rows through the stability blend (ε = 0,
    /// conditioned on the true label); a diagnostic of the module itself.
    pub stabilized_retain_test: Option<f64>,
    pub loss_trace: Vec<StepLoss>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Gradient descent with momentum over the canonical parameter list:
/// v ← m·v + g; θ ← θ − lr·v. Parameters without a gradient this step keep
/// a decaying velocity.
pub struct Optimizer {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        let velocity = model.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, momentum, velocity }
    }

    /// Apply one update. `direction` scales the gradient: +1 descends, −1
    /// ascends.
    pub fn step(
        &mut self,
        model: &mut Model,
        ids: &[crate::diffcore::NodeId],
        grads: &Gradients,
        direction: f64,
    ) {
        let tensors = model.param_tensors_mut();
        assert_eq!(tensors.len(), ids.len(), "canonical orders must align");
        for ((tensor, &id), vel) in tensors.into_iter().zip(ids).zip(&mut self.velocity) {
            let grad = grads.get(id);
            for (j, v) in vel.iter_mut().enumerate() {
                let g = direction * grad.map_or(0.0, |g| g.data()[j]);
                *v = self.momentum * *v + g;
                tensor.data_mut()[j] -= self.lr * *v;
            }
        }
    }
}

/// Reusable forget-row iterator: hands out batches, reshuffling whenever the
/// pool is exhausted, so small forget sets cycle indefinitely.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>) -> Self {
        let pos = items.len(); // force a shuffle on first use
        Self { items, pos }
    }

    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                self.items.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn epoch_batches(idx: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// One descent step on plain cross-entropy over the given rows. Returns the
/// loss value before the update.
pub fn finetune_step(
    model: &mut Model,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64, TrainError> {
    ce_step(model, opt, x, labels, 1.0)
}

/// One *ascent* step on the forget batch's cross-entropy.
pub fn neggrad_step(
    model: &mut Model,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64, TrainError> {
    ce_step(model, opt, x, labels, -1.0)
}

fn ce_step(
    model: &mut Model,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
    direction: f64,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let params = model.insert_params(&mut g);
    let xn = g.constant(x.clone());
    let loss = classification_loss(&mut g, model, &params, xn, labels)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    opt.step(model, &params.flat_ids(), &grads, direction);
    Ok(value)
}

/// One paired-batch step of SAFER. The retain batch feeds the stabilized
/// four-term loss (gated by `ic`/`cd`), the forget batch the randomized-
/// target KL (gated by `um`, weighted by β); a single optimizer step applies
/// both, then the latent reference absorbs this batch's μ values.
/// Returns `None` without touching the model when every switch is off.
#[allow(clippy::too_many_arguments)]
pub fn safer_step(
    model: &mut Model,
    opt: &mut Optimizer,
    retain: (&Tensor, &[usize]),
    forget: Option<(&Tensor, &[usize])>,
    support: &[usize],
    ema: &mut EmaState,
    cfg: &AlgorithmConfig,
    eps_rng: &mut ChaCha8Rng,
    target_rng: &mut ChaCha8Rng,
) -> Result<Option<StepLoss>, TrainError> {
    let (x_r, y_r) = retain;
    if y_r.is_empty() {
        return Err(TrainError::EmptyRetainBatch);
    }
    let retain_active = cfg.ic || cfg.cd;
    let forget_active = cfg.um && forget.is_some();
    if !retain_active && !forget_active {
        return Ok(None);
    }

    let mut g = Graph::new();
    let params = model.insert_params(&mut g);
    let mut losses = StepLoss { step: 0, ce: 0.0, recon: 0.0, kl: 0.0, sep: 0.0, forget_kl: 0.0 };

    let mut total = None;
    let mut retain_mu = None;
    if retain_active {
        let eps = standard_normal(y_r.len(), model.config.latent_dim, eps_rng);
        let xn = g.constant(x_r.clone());
        let en = g.constant(eps);
        let loss_cfg = RetainLossConfig {
            lambda: cfg.lambda,
            include_recon: cfg.ic,
            include_kl: true,
            include_sep: cfg.cd,
        };
        let rl = retain_loss(&mut g, model, &params, xn, y_r, en, ema, &loss_cfg)?;
        losses.ce = rl.breakdown.ce;
        losses.recon = rl.breakdown.recon;
        losses.kl = rl.breakdown.kl;
        losses.sep = rl.breakdown.sep;
        total = Some(rl.total);
        retain_mu = Some(rl.stability.mu);
    }

    if forget_active {
        let (x_f, y_f) = forget.expect("guarded by forget_active");
        let q = forget_targets(y_f, support, model.config.n_classes, target_rng)?;
        let xn = g.constant(x_f.clone());
        let f = features_graph(&mut g, &params, xn, model.config.activation)?;
        let logits = logits_graph(&mut g, &params, f)?;
        let fkl = forget_loss(&mut g, logits, &q)?;
        losses.forget_kl = g.value(fkl).item();
        let weighted = g.scalar_mul(fkl, cfg.beta)?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }

    let total = total.expect("at least one objective is active");
    let grads = g.backward(total)?;
    opt.step(model, &params.flat_ids(), &grads, 1.0);
    if let Some(mu) = retain_mu {
        ema.update(g.value(mu), y_r);
    }
    Ok(Some(losses))
}

/// Mini-batch cross-entropy training over the given rows, in place.
/// The shuffle stream alone determines batch composition.
pub fn train_plain(
    model: &mut Model,
    ds: &LabeledDataset,
    rows: &[usize],
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<Vec<StepLoss>, TrainError> {
    let mut opt = Optimizer::new(model, lr, momentum);
    let mut trace = Vec::new();
    let mut step = 0;
    for _ in 0..epochs {
        for batch in epoch_batches(rows, batch_size, shuffle_rng) {
            let x = ds.gather(&batch);
            let y = ds.labels_at(&batch);
            let ce = finetune_step(model, &mut opt, &x, &y)
                .map_err(|e| diverged(step, e))?;
            trace.push(StepLoss::ce_only(step, ce));
            step += 1;
        }
    }
    Ok(trace)
}

fn diverged(step: usize, err: TrainError) -> TrainError {
    match err {
        TrainError::Diff(source) => TrainError::Diverged { step, source },
        other => other,
    }
}

/// Fit the stability module to the classifier's features: minimize
/// reconstruction + KL over the given rows, with features entering as
/// constants so the extractor and head receive exactly zero updates. The
/// classifier's behavior is untouched; only the generative module moves.
pub fn fit_stability(
    model: &mut Model,
    ds: &LabeledDataset,
    rows: &[usize],
    train: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
    eps_rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    let mut opt = Optimizer::new(model, train.lr, train.momentum);
    let mut step = 0usize;
    for _ in 0..train.epochs {
        for batch in epoch_batches(rows, train.batch_size, shuffle_rng) {
            let feats = model.features(&ds.gather(&batch));
            let labels = ds.labels_at(&batch);
            let eps = standard_normal(batch.len(), model.config.latent_dim, eps_rng);
            let mut run = || -> Result<(), DiffError> {
                let mut g = Graph::new();
                let params = model.insert_params(&mut g);
                let f = g.constant(feats.clone());
                let oh = g.constant(onehot(&labels, model.config.n_classes));
                let e = g.constant(eps.clone());
                let stab = stability_graph(&mut g, &params, f, oh, e)?;
                let d = g.sub(f, stab.xhat)?;
                let sq = g.square(d)?;
                let s = g.sum(sq)?;
                let recon = g.scalar_mul(s, 1.0 / batch.len() as f64)?;
                let kl = crate::losses::gaussian_kl_graph(&mut g, stab.mu, stab.logvar)?;
                let total = g.add(recon, kl)?;
                let grads = g.backward(total)?;
                opt.step(model, &params.flat_ids(), &grads, 1.0);
                Ok(())
            };
            run().map_err(|e| diverged(step, TrainError::Diff(e)))?;
            step += 1;
        }
    }
    Ok(())
}

/// Train the original model f_θ0 on the full train split by mini-batch
/// cross-entropy, then fit the stability module to the resulting features
/// (the classifier itself is finished before that stage and does not move).
/// Streams consumed: `init` for parameters, `original-shuffle` for batch
/// order, `stability-shuffle` and `stability-eps` for the generative fit.
pub fn train_original(
    ds: &LabeledDataset,
    config: &crate::model::ModelConfig,
    train: &TrainConfig,
    splitter: &SeedSplitter,
) -> Result<Model, TrainError> {
    let mut model = init_model(config, &mut splitter.rng("init"));
    let mut shuffle = splitter.rng("original-shuffle");
    train_plain(
        &mut model,
        ds,
        &ds.train_idx,
        train.epochs,
        train.lr,
        train.momentum,
        train.batch_size,
        &mut shuffle,
    )?;
    let mut vae_shuffle = splitter.rng("stability-shuffle");
    let mut vae_eps = splitter.rng("stability-eps");
    // Reconstruction is a stiffer objective than classification; fit the
    // generative module at a fraction of the classifier's rate.
    let vae_train = TrainConfig { lr: train.lr * 0.2, ..train.clone() };
    fit_stability(&mut model, ds, &ds.train_idx, &vae_train, &mut vae_shuffle, &mut vae_eps)?;
    Ok(model)
}

/// Accuracy of a model on every non-empty evaluation set of a phase.
pub fn evaluate_sets(model: &Model, ds: &LabeledDataset, part: &PhasePartition) -> AccuracyTable {
    let mut table = AccuracyTable::new();
    let sets: [(&Vec<usize>, EvalSet); 7] = [
        (&part.retain_train, EvalSet::RetainTrain),
        (&part.retain_test, EvalSet::RetainTest),
        (&part.forget_train, EvalSet::ForgetTrain),
        (&part.forget_test, EvalSet::ForgetTest),
        (&part.forgot_train, EvalSet::ForgotTrain),
        (&part.forgot_test, EvalSet::ForgotTest),
        (&ds.test_idx, EvalSet::FullTest),
    ];
    for (rows, set) in sets {
        if rows.is_empty() {
            continue;
        }
        let x = ds.gather(rows);
        let y = ds.labels_at(rows);
        if let Some(acc) = set_accuracy(model, Some(&x), &y) {
            table.insert(set, acc);
        }
    }
    table
}

/// Label-conditioned accuracy through the stability blend with ε = 0.
fn stabilized_accuracy(model: &Model, ds: &LabeledDataset, rows: &[usize]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let x = ds.gather(rows);
    let y = ds.labels_at(rows);
    let f = model.features(&x);
    let eps = Tensor::zeros(&[rows.len(), model.config.latent_dim]);
    let out = model.stability_forward(&f, &y, &eps);
    let logits = model.logits(&out.xprime);
    Some(crate::metrics::accuracy_from_logits(&logits, &y))
}

fn check_plan(ds: &LabeledDataset, plan: &PhasePlan) -> Result<(), TrainError> {
    let rows = ds.n_rows();
    for part in &plan.phases {
        for idx in [
            &part.forget_train,
            &part.retain_train,
            &part.forgot_train,
            &part.forget_test,
            &part.retain_test,
            &part.forgot_test,
        ] {
            if let Some(&row) = idx.iter().find(|&&r| r >= rows) {
                return Err(TrainError::PlanMismatch { row, rows });
            }
        }
    }
    Ok(())
}

/// Run one phase of the configured algorithm in place. Retrain replaces the
/// model with a freshly initialized one trained on the phase's retain rows.
/// Only the phase's forget/retain rows are ever gathered for training.
pub fn unlearn_phase(
    model: &mut Model,
    ema: &mut EmaState,
    ds: &LabeledDataset,
    part: &PhasePartition,
    cfg: &AlgorithmConfig,
    phase_seeds: &SeedSplitter,
) -> Result<Vec<StepLoss>, TrainError> {
    let mut shuffle = phase_seeds.rng("shuffle");
    match cfg.kind {
        AlgorithmKind::Retrain => {
            let mut fresh = init_model(&model.config, &mut phase_seeds.rng("init"));
            let trace = train_plain(
                &mut fresh,
                ds,
                &part.retain_train,
                cfg.epochs,
                cfg.lr,
                cfg.momentum,
                cfg.batch_size,
                &mut shuffle,
            )?;
            *model = fresh;
            Ok(trace)
        }
        AlgorithmKind::Finetune => train_plain(
            model,
            ds,
            &part.retain_train,
            cfg.epochs,
            cfg.lr,
            cfg.momentum,
            cfg.batch_size,
            &mut shuffle,
        ),
        AlgorithmKind::NegGrad => {
            let mut opt = Optimizer::new(model, cfg.lr, cfg.momentum);
            let mut trace = Vec::new();
            let mut step = 0;
            for _ in 0..cfg.epochs {
                for batch in epoch_batches(&part.forget_train, cfg.batch_size, &mut shuffle) {
                    let x = ds.gather(&batch);
                    let y = ds.labels_at(&batch);
                    let ce = neggrad_step(model, &mut opt, &x, &y)
                        .map_err(|e| diverged(step, e))?;
                    trace.push(StepLoss::ce_only(step, ce));
                    step += 1;
                }
            }
            Ok(trace)
        }
        AlgorithmKind::Safer => {
            if !(cfg.um || cfg.ic || cfg.cd) {
                return Ok(Vec::new());
            }
            if part.retain_train.is_empty() {
                return Err(TrainError::EmptyRetainBatch);
            }
            let support = ds.classes_in(&part.retain_train);
            let mut eps_rng = phase_seeds.rng("eps");
            let mut target_rng = phase_seeds.rng("targets");
            let mut cycle_rng = phase_seeds.rng("forget-cycle");
            let mut cycler = if part.forget_train.is_empty() {
                None
            } else {
                Some(Cycler::new(part.forget_train.clone()))
            };
            let forget_batch_len = part.forget_train.len().min(cfg.batch_size).max(1);
            let mut opt = Optimizer::new(model, cfg.lr, cfg.momentum);
            let mut trace = Vec::new();
            let mut step = 0;
            for _ in 0..cfg.epochs {
                for batch in epoch_batches(&part.retain_train, cfg.batch_size, &mut shuffle) {
                    let x_r = ds.gather(&batch);
                    let y_r = ds.labels_at(&batch);
                    let forget_rows = cycler
                        .as_mut()
                        .map(|c| c.next_batch(forget_batch_len, &mut cycle_rng));
                    let gathered = forget_rows
                        .as_ref()
                        .map(|rows| (ds.gather(rows), ds.labels_at(rows)));
                    let forget = gathered.as_ref().map(|(x, y)| (x, y.as_slice()));
                    let outcome = safer_step(
                        model,
                        &mut opt,
                        (&x_r, &y_r),
                        forget,
                        &support,
                        ema,
                        cfg,
                        &mut eps_rng,
                        &mut target_rng,
                    )
                    .map_err(|e| diverged(step, e))?;
                    if let Some(mut losses) = outcome {
                        losses.step = step;
                        trace.push(losses);
                    }
                    step += 1;
                }
            }
            Ok(trace)
        }
    }
}

/// Walk the phase plan with one algorithm, starting from the original model.
/// The latent reference persists across phases; retrain starts fresh each
/// phase from this phase's `init` stream, so its outcome does not depend on
/// earlier phases having run.
pub fn run_continual(
    ds: &LabeledDataset,
    plan: &PhasePlan,
    origin: &Model,
    cfg: &AlgorithmConfig,
    splitter: &SeedSplitter,
) -> Result<Vec<PhaseResult>, TrainError> {
    cfg.validate()?;
    check_plan(ds, plan)?;
    let mut model = origin.clone();
    let mut ema = EmaState::new(EMA_DECAY, cfg.ema_mode(), model.config.n_classes);
    let mut results = Vec::with_capacity(plan.n_phases());
    for (i, part) in plan.phases.iter().enumerate() {
        let phase = i + 1;
        let phase_seeds = splitter.child_indexed("phase", phase as u64);
        let started = Instant::now();
        let loss_trace = unlearn_phase(&mut model, &mut ema, ds, part, cfg, &phase_seeds)?;
        let wall_time_s = started.elapsed().as_secs_f64();
        let stabilized = if cfg.kind == AlgorithmKind::Safer {
            stabilized_accuracy(&model, ds, &part.retain_test)
        } else {
            None
        };
        results.push(PhaseResult {
            phase,
            snapshot: model.snapshot(),
            accuracies: evaluate_sets(&model, ds, part),
            stabilized_retain_test: stabilized,
            loss_trace,
            wall_time_s,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gaussian_blobs, plan_phases};
    use crate::model::ModelConfig;

    fn small_dataset(seed: u64) -> LabeledDataset {
        gaussian_blobs(3, 4, 40, 8.0, 0.5, 0.2, seed).unwrap()
    }

    fn small_model_config() -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            n_classes: 3,
            extractor_widths: vec![16],
            latent_dim: 4,
            encoder_widths: vec![8],
            decoder_widths: vec![8],
            activation: crate::model::Activation::Tanh,
        }
    }

    fn quick_train(seed: u64) -> (LabeledDataset, Model) {
        let ds = small_dataset(seed);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        let spl = SeedSplitter::new(seed).child("origin");
        let model = train_original(&ds, &small_model_config(), &cfg, &spl).unwrap();
        (ds, model)
    }

    #[test]
    fn momentum_updates_match_hand_arithmetic() {
        let mut model = init_model(&small_model_config(), &mut SeedSplitter::new(1).rng("init"));
        let w0 = model.head.w.data().to_vec();
        let mut opt = Optimizer::new(&model, 0.1, 0.9);

        // Loss = mean(head.w²): gradient 2w/n on the head weights only.
        let grad_of = |m: &Model| {
            let mut g = Graph::new();
            let params = m.insert_params(&mut g);
            let sq = g.square(params.head.0).unwrap();
            let loss = g.mean(sq).unwrap();
            (params.flat_ids(), g.backward(loss).unwrap())
        };

        let n = w0.len() as f64;
        let (ids, grads) = grad_of(&model);
        opt.step(&mut model, &ids, &grads, 1.0);
        let g1: Vec<f64> = w0.iter().map(|w| 2.0 * w / n).collect();
        let w1: Vec<f64> = w0.iter().zip(&g1).map(|(w, g)| w - 0.1 * g).collect();
        for (got, want) in model.head.w.data().iter().zip(&w1) {
            assert!((got - want).abs() < 1e-15);
        }
        let w1 = model.head.w.data().to_vec();

        let (ids, grads) = grad_of(&model);
        opt.step(&mut model, &ids, &grads, 1.0);
        for j in 0..w0.len() {
            let g2 = 2.0 * w1[j] / n;
            let v2 = 0.9 * g1[j] + g2;
            let want = w1[j] - 0.1 * v2;
            assert!((model.head.w.data()[j] - want).abs() < 1e-15);
        }

        // Parameters with no gradient in the step stay put.
        assert_eq!(
            model.stability.mu_head.w.data(),
            init_model(&small_model_config(), &mut SeedSplitter::new(1).rng("init"))
                .stability
                .mu_head
                .w
                .data()
        );
    }

    #[test]
    fn cycler_reshuffles_and_covers_all_items() {
        let mut rng = SeedSplitter::new(2).rng("cycle");
        let mut cycler = Cycler::new(vec![0, 1, 2]);
        let batch = cycler.next_batch(9, &mut rng);
        assert_eq!(batch.len(), 9);
        // Three full passes: every item appears exactly three times.
        for item in 0..3 {
            assert_eq!(batch.iter().filter(|&&v| v == item).count(), 3);
        }
    }

    #[test]
    fn original_training_separates_gaussian_blobs() {
        let (ds, model) = quick_train(7);
        let x = ds.gather(&ds.test_idx);
        let y = ds.labels_at(&ds.test_idx);
        let acc = set_accuracy(&model, Some(&x), &y).unwrap();
        assert!(acc > 0.95, "test accuracy {acc}");

        // Same seed, same model.
        let again = train_original(
            &ds,
            &small_model_config(),
            &TrainConfig { epochs: 20, ..TrainConfig::default() },
            &SeedSplitter::new(7).child("origin"),
        )
        .unwrap();
        assert_eq!(model.flat_params(), again.flat_params());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (ds, model) = quick_train(3);
        let mut m = model.clone();
        let mut opt = Optimizer::new(&m, 0.0, 0.9);
        let rows = &ds.train_idx[..8];
        let x = ds.gather(rows);
        let y = ds.labels_at(rows);
        finetune_step(&mut m, &mut opt, &x, &y).unwrap();
        assert_eq!(m.flat_params(), model.flat_params());

        let mut m = model.clone();
        let mut opt = Optimizer::new(&m, 0.0, 0.9);
        neggrad_step(&mut m, &mut opt, &x, &y).unwrap();
        assert_eq!(m.flat_params(), model.flat_params());
    }

    #[test]
    fn neggrad_raises_and_finetune_lowers_the_batch_loss() {
        let (ds, model) = quick_train(4);
        let rows = &ds.train_idx[..16];
        let x = ds.gather(rows);
        let y = ds.labels_at(rows);

        let batch_ce = |m: &Model| {
            let mut g = Graph::new();
            let params = m.insert_params(&mut g);
            let xn = g.constant(x.clone());
            let loss = classification_loss(&mut g, m, &params, xn, &y).unwrap();
            g.value(loss).item()
        };

        let mut up = model.clone();
        let mut opt = Optimizer::new(&up, 1e-3, 0.0);
        let before = neggrad_step(&mut up, &mut opt, &x, &y).unwrap();
        assert!(batch_ce(&up) > before, "ascent must raise the loss");

        let mut down = model.clone();
        let mut opt = Optimizer::new(&down, 1e-3, 0.0);
        let before = finetune_step(&mut down, &mut opt, &x, &y).unwrap();
        assert!(batch_ce(&down) < before, "descent must lower the loss");
    }

    #[test]
    fn safer_with_all_switches_off_is_a_no_op() {
        let (ds, model) = quick_train(5);
        let plan = plan_phases(&ds, &[vec![0], vec![1]]).unwrap();
        let mut cfg = AlgorithmConfig::new(AlgorithmKind::Safer);
        cfg.epochs = 2;
        cfg.um = false;
        cfg.ic = false;
        cfg.cd = false;
        let results =
            run_continual(&ds, &plan, &model, &cfg, &SeedSplitter::new(5).child("run")).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert!(r.loss_trace.is_empty());
            assert_eq!(r.snapshot.params, model.flat_params());
        }
    }

    #[test]
    fn finetune_gradient_ignores_forget_rows_entirely() {
        // Two datasets differing only in forget-class rows produce the same
        // finetuned parameters: the algorithm never gathers those rows.
        let (ds, model) = quick_train(6);
        let plan = plan_phases(&ds, &[vec![2]]).unwrap();
        let part = &plan.phases[0];

        let mut poisoned = ds.clone();
        for &row in part.forget_train.iter().chain(&part.forget_test) {
            let dim = poisoned.features.shape()[1];
            for j in 0..dim {
                poisoned.features.data_mut()[row * dim + j] = 1.0e6;
            }
        }

        let cfg = AlgorithmConfig { epochs: 2, ..AlgorithmConfig::new(AlgorithmKind::Finetune) };
        let spl = SeedSplitter::new(6).child("ft");
        let a = run_continual(&ds, &plan, &model, &cfg, &spl).unwrap();
        let b = run_continual(&poisoned, &plan, &model, &cfg, &spl).unwrap();
        assert_eq!(a[0].snapshot.params, b[0].snapshot.params);
    }

    #[test]
    fn forgot_rows_are_unreachable_in_later_phases() {
        // Once phase 1 is over, its forgotten rows may be arbitrarily
        // corrupted without changing what any algorithm computes in phase 2:
        // nothing may gather them for training again.
        let (ds, origin) = quick_train(8);
        let plan = plan_phases(&ds, &[vec![0], vec![1]]).unwrap();
        let part2 = &plan.phases[1];
        assert!(!part2.forgot_train.is_empty());

        let mut poisoned = ds.clone();
        for &row in part2.forgot_train.iter().chain(&part2.forgot_test) {
            let dim = poisoned.features.shape()[1];
            for j in 0..dim {
                poisoned.features.data_mut()[row * dim + j] = -7.5e5;
            }
        }

        for kind in [
            AlgorithmKind::Retrain,
            AlgorithmKind::Finetune,
            AlgorithmKind::NegGrad,
            AlgorithmKind::Safer,
        ] {
            let cfg = AlgorithmConfig { epochs: 2, ..AlgorithmConfig::new(kind) };
            let spl = SeedSplitter::new(9).child("poison");

            // Phase 1 on the clean data, where the rows are still legal.
            let mut model = origin.clone();
            let mut ema = EmaState::new(EMA_DECAY, EmaMode::Global, 3);
            unlearn_phase(&mut model, &mut ema, &ds, &plan.phases[0], &cfg, &spl.child_indexed("phase", 1))
                .unwrap();

            let run_phase2 = |dataset: &LabeledDataset| {
                let mut m = model.clone();
                let mut e = ema.clone();
                unlearn_phase(&mut m, &mut e, dataset, part2, &cfg, &spl.child_indexed("phase", 2))
                    .unwrap();
                m.flat_params()
            };
            assert_eq!(run_phase2(&ds), run_phase2(&poisoned), "{}", kind.as_str());
        }
    }

    #[test]
    fn later_phases_start_from_the_previous_snapshot() {
        let (ds, origin) = quick_train(10);
        let plan = plan_phases(&ds, &[vec![0], vec![1]]).unwrap();
        let cfg = AlgorithmConfig { epochs: 2, ..AlgorithmConfig::new(AlgorithmKind::Safer) };
        let spl = SeedSplitter::new(10).child("chain");
        let results = run_continual(&ds, &plan, &origin, &cfg, &spl).unwrap();

        // Re-run phase 2 standalone from the phase-1 snapshot.
        let mut model = Model::from_snapshot(&results[0].snapshot).unwrap();
        let mut ema = EmaState::new(EMA_DECAY, EmaMode::Global, 3);
        // The latent reference carries over; rebuild it by replaying phase 1.
        let mut replay = origin.clone();
        unlearn_phase(
            &mut replay,
            &mut ema,
            &ds,
            &plan.phases[0],
            &cfg,
            &spl.child_indexed("phase", 1),
        )
        .unwrap();
        assert_eq!(replay.flat_params(), model.flat_params());
        unlearn_phase(
            &mut model,
            &mut ema,
            &ds,
            &plan.phases[1],
            &cfg,
            &spl.child_indexed("phase", 2),
        )
        .unwrap();
        assert_eq!(results[1].snapshot.params, model.flat_params());
    }

    #[test]
    fn retrain_is_independent_of_earlier_phases() {
        let (ds, origin) = quick_train(11);
        let plan = plan_phases(&ds, &[vec![0], vec![1]]).unwrap();
        let cfg = AlgorithmConfig { epochs: 2, ..AlgorithmConfig::new(AlgorithmKind::Retrain) };
        let spl = SeedSplitter::new(11).child("rt");
        let results = run_continual(&ds, &plan, &origin, &cfg, &spl).unwrap();

        // Phase 2 alone, never having run phase 1.
        let mut model = origin.clone();
        let mut ema = EmaState::new(EMA_DECAY, EmaMode::Global, 3);
        unlearn_phase(
            &mut model,
            &mut ema,
            &ds,
            &plan.phases[1],
            &cfg,
            &spl.child_indexed("phase", 2),
        )
        .unwrap();
        assert_eq!(results[1].snapshot.params, model.flat_params());
    }

    #[test]
    fn single_phase_runs_degenerate_cleanly() {
        let (ds, origin) = quick_train(12);
        let plan = plan_phases(&ds, &[vec![2]]).unwrap();
        let cfg = AlgorithmConfig { epochs: 1, ..AlgorithmConfig::new(AlgorithmKind::Safer) };
        let results =
            run_continual(&ds, &plan, &origin, &cfg, &SeedSplitter::new(12).child("one")).unwrap();
        assert_eq!(results.len(), 1);
        let acc = &results[0].accuracies;
        assert!(acc.contains_key(&EvalSet::RetainTest));
        assert!(acc.contains_key(&EvalSet::ForgetTest));
        assert!(!acc.contains_key(&EvalSet::ForgotTest));
        assert!(results[0].stabilized_retain_test.is_some());
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (ds, origin) = quick_train(13);
        let plan = plan_phases(&ds, &[vec![0], vec![2]]).unwrap();
        for kind in [AlgorithmKind::Safer, AlgorithmKind::NegGrad] {
            let cfg = AlgorithmConfig { epochs: 2, ..AlgorithmConfig::new(kind) };
            let spl = SeedSplitter::new(14).child("det");
            let a = run_continual(&ds, &plan, &origin, &cfg, &spl).unwrap();
            let b = run_continual(&ds, &plan, &origin, &cfg, &spl).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                assert_eq!(ra.snapshot.params, rb.snapshot.params);
                assert_eq!(ra.loss_trace, rb.loss_trace);
                assert_eq!(ra.accuracies, rb.accuracies);
            }
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = AlgorithmConfig::new(AlgorithmKind::Safer);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AlgorithmConfig::new(AlgorithmKind::Safer);
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AlgorithmConfig::new(AlgorithmKind::Safer);
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        assert!(AlgorithmConfig::new(AlgorithmKind::Retrain).validate().is_ok());
    }

    #[test]
    fn plan_mismatch_is_rejected() {
        let (ds, origin) = quick_train(15);
        let other = gaussian_blobs(3, 4, 80, 8.0, 0.5, 0.2, 999).unwrap();
        let plan = plan_phases(&other, &[vec![0]]).unwrap();
        let cfg = AlgorithmConfig::new(AlgorithmKind::Finetune);
        let err = run_continual(&ds, &plan, &origin, &cfg, &SeedSplitter::new(15).child("x"));
        assert!(matches!(err, Err(TrainError::PlanMismatch { .. })));
    }
}
