//! Declarative experiment configuration.
//!
//! One TOML file describes a full experiment: dataset, model, original
//! training, forgetting schedule, metric toggles, and the algorithm roster.
//! A versioned `schema` string at the top guards against drift. Validation
//! is fully static — every violation is reported with its config path and
//! no violation requires running anything — and all randomness downstream
//! derives from `experiment.root_seed` through named streams, so per-repeat
//! seeds are distinct by construction.

use crate::datagen::{misaligned_entities, gaussian_blobs, DataError, LabeledDataset};
use crate::model::{Activation, ModelConfig};
use crate::unlearn::{AlgorithmConfig, AlgorithmKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Schema tag expected at the top of every config file; also stamped into
/// result files as the artifact version.
pub const SCHEMA: &str = "unlearn-lab/v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
}

/// One validation finding, anchored to the config location it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub phases: PhasesSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub algorithms: Vec<AlgorithmSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    /// Independent repetitions; each gets its own derived seed stream.
    pub repeats: usize,
    pub root_seed: u64,
    /// Parallel worker slots for runs (results are identical at any count).
    pub workers: usize,
    pub output_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "unlearn-lab".to_string(),
            repeats: 3,
            root_seed: 17,
            workers: 1,
            output_dir: "out".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianBlobs,
    MisalignedEntities,
}

/// Dataset generator selection. Fields that do not apply to the chosen kind
/// must stay unset; unset applicable fields take the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    // gaussian_blobs
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    // misaligned_entities
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_entity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            dim: None,
            seed: None,
            classes: None,
            samples_per_class: None,
            center_spread: None,
            noise_sigma: None,
            test_fraction: None,
            entities: None,
            samples_per_entity: None,
            attributes: None,
        }
    }
}

impl DatasetSection {
    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(8)
    }
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(7)
    }
    pub fn classes(&self) -> usize {
        self.classes.unwrap_or(8)
    }
    pub fn samples_per_class(&self) -> usize {
        self.samples_per_class.unwrap_or(250)
    }
    pub fn center_spread(&self) -> f64 {
        self.center_spread.unwrap_or(10.0)
    }
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma.unwrap_or(0.6)
    }
    pub fn test_fraction(&self) -> f64 {
        self.test_fraction.unwrap_or(0.2)
    }
    pub fn entities(&self) -> usize {
        self.entities.unwrap_or(40)
    }
    pub fn samples_per_entity(&self) -> usize {
        self.samples_per_entity.unwrap_or(50)
    }
    pub fn attributes(&self) -> usize {
        self.attributes.unwrap_or(6)
    }

    /// Number of forgettable units (classes or entities).
    pub fn n_units(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianBlobs => self.classes(),
            DatasetKind::MisalignedEntities => self.entities(),
        }
    }

    /// Label-space size the classifier predicts over.
    pub fn n_classes(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianBlobs => self.classes(),
            DatasetKind::MisalignedEntities => self.attributes(),
        }
    }

    fn unit_noun(&self) -> &'static str {
        match self.kind {
            DatasetKind::GaussianBlobs => "class",
            DatasetKind::MisalignedEntities => "entity",
        }
    }

    pub fn build(&self) -> Result<LabeledDataset, DataError> {
        match self.kind {
            DatasetKind::GaussianBlobs => gaussian_blobs(
                self.classes(),
                self.dim(),
                self.samples_per_class(),
                self.center_spread(),
                self.noise_sigma(),
                self.test_fraction(),
                self.seed(),
            ),
            DatasetKind::MisalignedEntities => misaligned_entities(
                self.entities(),
                self.samples_per_entity(),
                self.attributes(),
                self.dim(),
                self.seed(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub extractor_widths: Vec<usize>,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            extractor_widths: vec![32, 32],
            latent_dim: 8,
            encoder_widths: vec![32],
            decoder_widths: vec![32],
            activation: Activation::Tanh,
        }
    }
}

impl ModelSection {
    /// Resolve into a full architecture; input width and class count come
    /// from the dataset section.
    pub fn to_model_config(&self, dataset: &DatasetSection) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.dim(),
            n_classes: dataset.n_classes(),
            extractor_widths: self.extractor_widths.clone(),
            latent_dim: self.latent_dim,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, lr: t.lr, batch_size: t.batch_size, momentum: t.momentum }
    }
}

impl TrainingSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasesSection {
    /// Units to forget per phase, e.g. `[[0], [1], [2]]` for three phases.
    pub forget: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub dbi: bool,
    pub mia: bool,
    pub margins: bool,
    pub similarity: bool,
    pub margin_bins: usize,
    pub margin_lo: f64,
    pub margin_hi: f64,
    pub similarity_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            dbi: true,
            mia: true,
            margins: true,
            similarity: true,
            margin_bins: 40,
            margin_lo: -10.0,
            margin_hi: 10.0,
            similarity_bins: 40,
        }
    }
}

fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    0.05
}
fn d_batch() -> usize {
    32
}
fn d_momentum() -> f64 {
    0.9
}
fn d_lambda() -> f64 {
    0.1
}
fn d_beta() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub kind: AlgorithmKind,
    /// Output label; defaults to the kind name. Must be unique.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_true")]
    pub um: bool,
    #[serde(default = "d_true")]
    pub ic: bool,
    #[serde(default = "d_true")]
    pub cd: bool,
    #[serde(default)]
    pub ema_per_class: bool,
}

impl AlgorithmSection {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn to_algorithm_config(&self) -> AlgorithmConfig {
        AlgorithmConfig {
            kind: self.kind,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
            lambda: self.lambda,
            beta: self.beta,
            um: self.um,
            ic: self.ic,
            cd: self.cd,
            ema_per_class: self.ema_per_class,
        }
    }
}

/// Parse a config from TOML text.
pub fn parse(text: &str) -> Result<ExperimentConfig, Box<toml::de::Error>> {
    toml::from_str(text).map_err(Box::new)
}

/// Read and parse a config file. Parse errors carry the file's own
/// line/column anchors.
pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Static validation: every violation with its config path, no execution.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let bad = |out: &mut Vec<Diagnostic>, path: &str, msg: String| {
        out.push(Diagnostic::new(path, msg));
    };

    if cfg.schema != SCHEMA {
        bad(&mut out, "schema", format!("expected \"{SCHEMA}\", found \"{}\"", cfg.schema));
    }

    let e = &cfg.experiment;
    if e.repeats == 0 {
        bad(&mut out, "experiment.repeats", "must be at least 1".into());
    }
    if e.workers == 0 {
        bad(&mut out, "experiment.workers", "must be at least 1".into());
    }
    if e.output_dir.is_empty() {
        bad(&mut out, "experiment.output_dir", "must not be empty".into());
    }

    validate_dataset(&cfg.dataset, &mut out);

    let m = &cfg.model;
    if m.latent_dim == 0 {
        bad(&mut out, "model.latent_dim", "must be at least 1".into());
    }
    for (name, widths) in [
        ("model.extractor_widths", &m.extractor_widths),
        ("model.encoder_widths", &m.encoder_widths),
        ("model.decoder_widths", &m.decoder_widths),
    ] {
        for (i, &w) in widths.iter().enumerate() {
            if w == 0 {
                bad(&mut out, &format!("{name}[{i}]"), "layer width must be at least 1".into());
            }
        }
    }

    validate_steps(
        "training",
        cfg.training.epochs,
        cfg.training.lr,
        cfg.training.batch_size,
        cfg.training.momentum,
        &mut out,
    );

    validate_phases(cfg, &mut out);

    let mt = &cfg.metrics;
    if mt.margin_bins == 0 {
        bad(&mut out, "metrics.margin_bins", "must be at least 1".into());
    }
    if mt.similarity_bins == 0 {
        bad(&mut out, "metrics.similarity_bins", "must be at least 1".into());
    }
    if !(mt.margin_lo.is_finite() && mt.margin_hi.is_finite() && mt.margin_lo < mt.margin_hi) {
        bad(&mut out, "metrics.margin_lo", "margin range must be finite with lo < hi".into());
    }

    if cfg.algorithms.is_empty() {
        bad(&mut out, "algorithms", "at least one algorithm is required".into());
    }
    let mut labels: Vec<(String, usize)> = Vec::new();
    for (i, a) in cfg.algorithms.iter().enumerate() {
        let at = |field: &str| format!("algorithms[{i}].{field}");
        validate_steps(
            &format!("algorithms[{i}]"),
            a.epochs,
            a.lr,
            a.batch_size,
            a.momentum,
            &mut out,
        );
        if !(a.beta >= 0.0 && a.beta.is_finite()) {
            bad(&mut out, &at("beta"), "must be non-negative and finite".into());
        }
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            bad(&mut out, &at("lambda"), "must be non-negative and finite".into());
        }
        let label = a.label();
        let label_ok = !label.is_empty()
            && label.len() <= 64
            && label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !label_ok {
            bad(
                &mut out,
                &at("name"),
                format!("label \"{label}\" must be 1-64 chars of [a-zA-Z0-9_-]"),
            );
        } else if let Some((_, first)) = labels.iter().find(|(l, _)| *l == label) {
            bad(
                &mut out,
                &at("name"),
                format!("label \"{label}\" already used by algorithms[{first}]"),
            );
        } else {
            labels.push((label, i));
        }
    }

    out
}

fn validate_steps(
    section: &str,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    momentum: f64,
    out: &mut Vec<Diagnostic>,
) {
    if epochs == 0 {
        out.push(Diagnostic::new(format!("{section}.epochs"), "must be at least 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        out.push(Diagnostic::new(format!("{section}.lr"), "must be positive and finite"));
    }
    if batch_size == 0 {
        out.push(Diagnostic::new(format!("{section}.batch_size"), "must be at least 1"));
    }
    if !(0.0..1.0).contains(&momentum) {
        out.push(Diagnostic::new(format!("{section}.momentum"), "must be in [0, 1)"));
    }
}

fn validate_dataset(d: &DatasetSection, out: &mut Vec<Diagnostic>) {
    let mut bad = |path: &str, msg: String| out.push(Diagnostic::new(format!("dataset.{path}"), msg));
    let inapplicable: &[(&str, bool)] = match d.kind {
        DatasetKind::GaussianBlobs => &[
            ("entities", d.entities.is_some()),
            ("samples_per_entity", d.samples_per_entity.is_some()),
            ("attributes", d.attributes.is_some()),
        ],
        DatasetKind::MisalignedEntities => &[
            ("classes", d.classes.is_some()),
            ("samples_per_class", d.samples_per_class.is_some()),
            ("center_spread", d.center_spread.is_some()),
            ("noise_sigma", d.noise_sigma.is_some()),
            ("test_fraction", d.test_fraction.is_some()),
        ],
    };
    let kind_name = match d.kind {
        DatasetKind::GaussianBlobs => "gaussian_blobs",
        DatasetKind::MisalignedEntities => "misaligned_entities",
    };
    for (field, set) in inapplicable {
        if *set {
            bad(field, format!("not applicable to kind \"{kind_name}\""));
        }
    }
    if d.dim() == 0 {
        bad("dim", "must be at least 1".into());
    }
    match d.kind {
        DatasetKind::GaussianBlobs => {
            if d.classes() < 2 {
                bad("classes", "must be at least 2".into());
            }
            if d.samples_per_class() < 2 {
                bad("samples_per_class", "must be at least 2".into());
            }
            if !(d.test_fraction() > 0.0 && d.test_fraction() < 1.0) {
                bad("test_fraction", "must be strictly between 0 and 1".into());
            } else if (d.samples_per_class() as f64 * d.test_fraction()) < 1.0 {
                bad(
                    "samples_per_class",
                    format!(
                        "too small: {} samples at test_fraction {} leave no test rows",
                        d.samples_per_class(),
                        d.test_fraction()
                    ),
                );
            }
            if !(d.center_spread() > 0.0 && d.center_spread().is_finite()) {
                bad("center_spread", "must be positive and finite".into());
            }
            if !(d.noise_sigma() >= 0.0 && d.noise_sigma().is_finite()) {
                bad("noise_sigma", "must be non-negative and finite".into());
            }
        }
        DatasetKind::MisalignedEntities => {
            if d.attributes() < 2 {
                bad("attributes", "must be at least 2".into());
            }
            if d.entities() < d.attributes().max(2) {
                bad("entities", format!("must be at least {}", d.attributes().max(2)));
            }
            if d.samples_per_entity() < 5 {
                bad("samples_per_entity", "must be at least 5 (one test row per entity)".into());
            }
        }
    }
}

fn validate_phases(cfg: &ExperimentConfig, out: &mut Vec<Diagnostic>) {
    let schedule = &cfg.phases.forget;
    let d = &cfg.dataset;
    if schedule.is_empty() {
        out.push(Diagnostic::new("phases.forget", "at least one phase is required"));
        return;
    }
    let n_units = d.n_units();
    let noun = d.unit_noun();
    let mut seen: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for (t, units) in schedule.iter().enumerate() {
        let path = format!("phases.forget[{t}]");
        if units.is_empty() {
            out.push(Diagnostic::new(path.clone(), "phase forgets nothing"));
        }
        let mut in_phase = std::collections::BTreeSet::new();
        for &u in units {
            if u >= n_units {
                out.push(Diagnostic::new(
                    path.clone(),
                    format!("{noun} {u} does not exist (dataset has {n_units})"),
                ));
                continue;
            }
            if !in_phase.insert(u) {
                out.push(Diagnostic::new(
                    path.clone(),
                    format!("{noun} {u} listed twice in phase {}", t + 1),
                ));
                continue;
            }
            match seen.get(&u) {
                Some(&first) => out.push(Diagnostic::new(
                    path.clone(),
                    format!("{noun} {u} forgotten in both phase {} and phase {}", first + 1, t + 1),
                )),
                None => {
                    seen.insert(u, t);
                    total += 1;
                }
            }
        }
    }
    if total >= n_units {
        out.push(Diagnostic::new(
            "phases.forget",
            format!("schedule forgets all {n_units} {noun}s; at least one must remain"),
        ));
    } else if cfg.metrics.dbi
        && matches!(d.kind, DatasetKind::GaussianBlobs)
        && n_units - total < 2
    {
        out.push(Diagnostic::new(
            "phases.forget",
            "cluster dispersion needs at least 2 retained classes; forget fewer classes or disable metrics.dbi"
                .to_string(),
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = "unlearn-lab/v1"

[phases]
forget = [[0]]

[[algorithms]]
kind = "retrain"
"#;

    #[test]
    fn minimal_config_parses_with_desk_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert!(validate(&cfg).is_empty());
        assert_eq!(cfg.experiment.repeats, 3);
        assert_eq!(cfg.dataset.classes(), 8);
        assert_eq!(cfg.dataset.samples_per_class(), 250);
        assert_eq!(cfg.training.epochs, 30);
        let algo = cfg.algorithms[0].to_algorithm_config();
        assert_eq!(algo.kind, AlgorithmKind::Retrain);
        assert_eq!(algo.epochs, 10);
        assert!((algo.lr - 0.05).abs() < 1e-15);
        assert_eq!(algo.batch_size, 32);
        assert!((algo.momentum - 0.9).abs() < 1e-15);
        let mc = cfg.model.to_model_config(&cfg.dataset);
        assert_eq!(mc.input_dim, 8);
        assert_eq!(mc.n_classes, 8);
        assert_eq!(mc.extractor_widths, vec![32, 32]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace("[phases]", "typo_field = 1\n[phases]");
        assert!(parse(&text).is_err());
        let text = MINIMAL.replace("kind = \"retrain\"", "kind = \"retrain\"\nlr_rate = 0.1");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn schema_mismatch_is_flagged_at_its_path() {
        let text = MINIMAL.replace("unlearn-lab/v1", "unlearn-lab/v0");
        let cfg = parse(&text).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "schema");
        assert!(diags[0].message.contains("unlearn-lab/v1"));
    }

    #[test]
    fn repeated_forget_class_names_class_and_both_phases() {
        let text = MINIMAL.replace("forget = [[0]]", "forget = [[0], [1], [0]]");
        let cfg = parse(&text).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "phases.forget[2]");
        assert!(diags[0].message.contains("class 0"));
        assert!(diags[0].message.contains("phase 1"));
        assert!(diags[0].message.contains("phase 3"));
    }

    #[test]
    fn negative_learning_rate_is_a_range_error() {
        let text = MINIMAL.replace("kind = \"retrain\"", "kind = \"retrain\"\nlr = -0.05");
        let cfg = parse(&text).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "algorithms[0].lr");
        assert!(diags[0].message.contains("positive"));
    }

    #[test]
    fn out_of_range_unit_and_empty_phase_are_flagged() {
        let text = MINIMAL.replace("forget = [[0]]", "forget = [[9], []]");
        let cfg = parse(&text).unwrap();
        let diags = validate(&cfg);
        assert!(diags.iter().any(|d| d.path == "phases.forget[0]"
            && d.message.contains("class 9")
            && d.message.contains("8")));
        assert!(diags
            .iter()
            .any(|d| d.path == "phases.forget[1]" && d.message.contains("nothing")));
    }

    #[test]
    fn forgetting_too_many_classes_trips_the_dbi_guard() {
        let text = MINIMAL.replace(
            "forget = [[0]]",
            "forget = [[0, 1, 2], [3, 4, 5], [6]]",
        );
        let cfg = parse(&text).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("2 retained classes"));

        // Disabling the metric clears it.
        let relaxed = format!("{text}\n[metrics]\ndbi = false\n");
        let cfg = parse(&relaxed).unwrap();
        assert!(validate(&cfg).is_empty());

        // Forgetting everything is an error regardless of metrics.
        let all = relaxed.replace("[6]", "[6, 7]");
        let cfg = parse(&all).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("at least one must remain"));
    }

    #[test]
    fn misaligned_fields_and_ranges_are_checked() {
        let text = r#"
schema = "unlearn-lab/v1"

[dataset]
kind = "misaligned_entities"
entities = 10
samples_per_entity = 20
attributes = 4

[phases]
forget = [[0], [9]]

[[algorithms]]
kind = "safer"
"#;
        let cfg = parse(text).unwrap();
        assert!(validate(&cfg).is_empty());
        assert_eq!(cfg.dataset.n_units(), 10);
        assert_eq!(cfg.dataset.n_classes(), 4);

        let bad = text.replace("forget = [[0], [9]]", "forget = [[0], [10]]");
        let cfg = parse(&bad).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("entity 10"));

        let bad = text.replace("attributes = 4", "attributes = 4\ntest_fraction = 0.2");
        let cfg = parse(&bad).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "dataset.test_fraction");
        assert!(diags[0].message.contains("not applicable"));
    }

    #[test]
    fn duplicate_labels_are_rejected_but_names_disambiguate() {
        let text = format!("{MINIMAL}\n[[algorithms]]\nkind = \"retrain\"\n");
        let cfg = parse(&text).unwrap();
        let diags = validate(&cfg);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "algorithms[1].name");
        assert!(diags[0].message.contains("already used by algorithms[0]"));

        let text = format!("{MINIMAL}\n[[algorithms]]\nkind = \"retrain\"\nname = \"retrain_b\"\n");
        let cfg = parse(&text).unwrap();
        assert!(validate(&cfg).is_empty());
        assert_eq!(cfg.algorithms[1].label(), "retrain_b");
    }

    #[test]
    fn configured_datasets_build_and_schedule_plans() {
        let cfg = parse(MINIMAL).unwrap();
        let text_small = MINIMAL.replace(
            "[phases]",
            "[dataset]\nkind = \"gaussian_blobs\"\nclasses = 3\ndim = 4\nsamples_per_class = 20\n\n[phases]",
        );
        let cfg_small = parse(&text_small).unwrap();
        assert!(validate(&cfg_small).is_empty());
        let ds = cfg_small.dataset.build().unwrap();
        assert_eq!(ds.n_classes, 3);
        assert_eq!(ds.dim(), 4);
        let plan = crate::datagen::plan_phases(&ds, &cfg_small.phases.forget).unwrap();
        assert_eq!(plan.n_phases(), 1);
        assert_eq!(cfg.dataset.build().unwrap().n_classes, 8);
    }

    #[test]
    fn config_echo_roundtrips_through_json() {
        let cfg = parse(MINIMAL).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
