//! Synthetic datasets and multi-phase forgetting plans.
//!
//! Two generators cover the two unlearning regimes:
//!
//! * [`gaussian_blobs`] — class-aligned: one isotropic Gaussian cluster per
//!   class, entity ids equal to labels, so forgetting a unit removes an
//!   entire class.
//! * [`misaligned_entities`] — entity-aligned: each sample is an entity
//!   prototype plus a (much larger) attribute offset plus noise; labels are
//!   the attributes, units are the entities, so forgetting removes samples
//!   *across* label classes.
//!
//! [`plan_phases`] turns a per-phase schedule of forget units into disjoint
//! row partitions: at phase `t` the rows split into the current forget set,
//! the still-usable retain set, and the accumulated forgot set of all earlier
//! phases (empty at `t = 1`). Algorithms only ever see the first two; the
//! forgot set exists for evaluation.

use crate::diffcore::Tensor;
use crate::rng::SeedSplitter;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Errors from generator parameters and phase schedules.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{name} must be {requirement}, got {got}")]
    Param { name: &'static str, requirement: &'static str, got: String },
    #[error("forget unit {unit} appears in phase {first} and again in phase {second}")]
    RepeatedUnit { unit: usize, first: usize, second: usize },
    #[error("forget unit {unit} in phase {phase} does not exist in the dataset")]
    UnknownUnit { unit: usize, phase: usize },
    #[error("phase schedule is empty")]
    EmptySchedule,
}

/// A fixed dataset with a train/test split.
///
/// `entity_ids` name the forgettable units: equal to `labels` in the
/// class-aligned setting, independent of them in the misaligned setting.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub entity_ids: Vec<usize>,
    pub n_classes: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl LabeledDataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.dims2().expect("features are rank-2").1
    }

    /// Forgetting units coincide with label classes.
    pub fn is_class_aligned(&self) -> bool {
        self.entity_ids == self.labels
    }

    /// Gather the feature rows at `rows` into a fresh [len×d] tensor.
    /// Panics on an empty selection — callers branch on emptiness first.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        assert!(!rows.is_empty(), "gather() needs at least one row");
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        Tensor::from_parts(vec![rows.len(), d], data)
    }

    pub fn labels_at(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Sorted, deduplicated label classes present among `rows`.
    pub fn classes_in(&self, rows: &[usize]) -> Vec<usize> {
        let mut cs: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }
}

/// Row partition of one forgetting phase (train and test sides).
#[derive(Debug, Clone)]
pub struct PhasePartition {
    pub forget_units: Vec<usize>,
    pub forget_train: Vec<usize>,
    pub retain_train: Vec<usize>,
    pub forgot_train: Vec<usize>,
    pub forget_test: Vec<usize>,
    pub retain_test: Vec<usize>,
    pub forgot_test: Vec<usize>,
}

/// Per-phase partitions for one continual-unlearning run.
#[derive(Debug, Clone)]
pub struct PhasePlan {
    pub phases: Vec<PhasePartition>,
}

impl PhasePlan {
    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }
}

/// Class-aligned generator: `k` isotropic Gaussian clusters in `d`
/// dimensions, centers drawn uniformly in the hypercube
/// [−center_spread/2, center_spread/2]^d, `n_per_class` samples per class,
/// and a per-class (stratified) test split of `floor(n_per_class ·
/// test_fraction)` rows.
pub fn gaussian_blobs(
    k: usize,
    d: usize,
    n_per_class: usize,
    center_spread: f64,
    noise_sigma: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if k < 2 {
        return Err(param("k", "at least 2", k));
    }
    if d == 0 {
        return Err(param("d", "at least 1", d));
    }
    if n_per_class == 0 {
        return Err(param("n_per_class", "at least 1", n_per_class));
    }
    if !(noise_sigma > 0.0) || !noise_sigma.is_finite() {
        return Err(param("noise_sigma", "positive and finite", noise_sigma));
    }
    if !(center_spread > 0.0) || !center_spread.is_finite() {
        return Err(param("center_spread", "positive and finite", center_spread));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(param("test_fraction", "in [0, 1)", test_fraction));
    }

    let splitter = SeedSplitter::new(seed);
    let mut center_rng = splitter.rng("centers");
    let mut noise_rng = splitter.rng("noise");
    let mut split_rng = splitter.rng("split");

    let half = center_spread / 2.0;
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| center_rng.gen_range(-half..half)).collect())
        .collect();

    let n = k * n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for center_j in center {
                let z: f64 = noise_rng.sample(StandardNormal);
                data.push(center_j + noise_sigma * z);
            }
            labels.push(c);
        }
    }

    // Stratified split: shuffle each class block, first rows become test.
    let test_per_class = (n_per_class as f64 * test_fraction).floor() as usize;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..k {
        let mut rows: Vec<usize> = (c * n_per_class..(c + 1) * n_per_class).collect();
        rows.shuffle(&mut split_rng);
        test_idx.extend_from_slice(&rows[..test_per_class]);
        train_idx.extend_from_slice(&rows[test_per_class..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok(LabeledDataset {
        features: Tensor::from_parts(vec![n, d], data),
        entity_ids: labels.clone(),
        labels,
        n_classes: k,
        train_idx,
        test_idx,
    })
}

/// Entity-misaligned generator. Entity `e` carries attribute `e %
/// k_attributes`; each of its samples is `attribute_offset + prototype +
/// noise`, with attribute offsets drawn at 3× the prototype scale so labels
/// stay learnable while entities overlap within a class. Labels are the
/// attributes; units are the entities. The test split is positional and
/// per-entity: the last `floor(samples_per_entity / 5)` samples of each
/// entity (so one-sample entities keep their row in train).
pub fn misaligned_entities(
    n_entities: usize,
    samples_per_entity: usize,
    k_attributes: usize,
    d: usize,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if k_attributes < 2 {
        return Err(param("k_attributes", "at least 2", k_attributes));
    }
    if n_entities < k_attributes {
        return Err(param("n_entities", "at least k_attributes", n_entities));
    }
    if samples_per_entity == 0 {
        return Err(param("samples_per_entity", "at least 1", samples_per_entity));
    }
    if d == 0 {
        return Err(param("d", "at least 1", d));
    }

    const ATTRIBUTE_SCALE: f64 = 3.0;
    const NOISE_SIGMA: f64 = 0.5;

    let splitter = SeedSplitter::new(seed);
    let mut offset_rng = splitter.rng("attribute-offsets");
    let mut proto_rng = splitter.rng("prototypes");
    let mut noise_rng = splitter.rng("noise");

    let offsets: Vec<Vec<f64>> = (0..k_attributes)
        .map(|_| {
            (0..d)
                .map(|_| ATTRIBUTE_SCALE * offset_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..n_entities)
        .map(|_| (0..d).map(|_| proto_rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let n = n_entities * samples_per_entity;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut entity_ids = Vec::with_capacity(n);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let test_per_entity = samples_per_entity / 5;

    for e in 0..n_entities {
        let a = e % k_attributes;
        for s in 0..samples_per_entity {
            for j in 0..d {
                let z: f64 = noise_rng.sample(StandardNormal);
                data.push(offsets[a][j] + prototypes[e][j] + NOISE_SIGMA * z);
            }
            let row = e * samples_per_entity + s;
            labels.push(a);
            entity_ids.push(e);
            if s >= samples_per_entity - test_per_entity {
                test_idx.push(row);
            } else {
                train_idx.push(row);
            }
        }
    }

    Ok(LabeledDataset {
        features: Tensor::from_parts(vec![n, d], data),
        labels,
        entity_ids,
        n_classes: k_attributes,
        train_idx,
        test_idx,
    })
}

/// Derive per-phase forget/retain/forgot row partitions from a schedule of
/// forget-unit sets (one set per phase; empty sets are allowed and make that
/// phase a pure retain phase).
///
/// Units must exist in the dataset and may be scheduled at most once across
/// all phases.
pub fn plan_phases(dataset: &LabeledDataset, schedule: &[Vec<usize>]) -> Result<PhasePlan, DataError> {
    if schedule.is_empty() {
        return Err(DataError::EmptySchedule);
    }
    // Validate existence and cross-phase uniqueness (phases reported 1-based).
    let mut seen: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for (t, units) in schedule.iter().enumerate() {
        for &u in units {
            if !dataset.entity_ids.contains(&u) {
                return Err(DataError::UnknownUnit { unit: u, phase: t + 1 });
            }
            if let Some(&first) = seen.get(&u) {
                return Err(DataError::RepeatedUnit { unit: u, first, second: t + 1 });
            }
            seen.insert(u, t + 1);
        }
    }

    let mut phases = Vec::with_capacity(schedule.len());
    let mut forgotten: Vec<usize> = Vec::new();
    for units in schedule {
        let is_forget = |row: usize| units.contains(&dataset.entity_ids[row]);
        let is_forgot = |row: usize| forgotten.contains(&dataset.entity_ids[row]);
        let split = |rows: &[usize]| {
            let mut forget = Vec::new();
            let mut retain = Vec::new();
            let mut forgot = Vec::new();
            for &r in rows {
                if is_forget(r) {
                    forget.push(r);
                } else if is_forgot(r) {
                    forgot.push(r);
                } else {
                    retain.push(r);
                }
            }
            (forget, retain, forgot)
        };
        let (forget_train, retain_train, forgot_train) = split(&dataset.train_idx);
        let (forget_test, retain_test, forgot_test) = split(&dataset.test_idx);
        phases.push(PhasePartition {
            forget_units: units.clone(),
            forget_train,
            retain_train,
            forgot_train,
            forget_test,
            retain_test,
            forgot_test,
        });
        forgotten.extend_from_slice(units);
    }
    Ok(PhasePlan { phases })
}

fn param(name: &'static str, requirement: &'static str, got: impl std::fmt::Display) -> DataError {
    DataError::Param { name, requirement, got: got.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let a = gaussian_blobs(4, 3, 10, 8.0, 0.5, 0.2, 9).unwrap();
        let b = gaussian_blobs(4, 3, 10, 8.0, 0.5, 0.2, 9).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.test_idx, b.test_idx);
        let c = gaussian_blobs(4, 3, 10, 8.0, 0.5, 0.2, 10).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn blobs_are_class_aligned_with_stratified_split() {
        let ds = gaussian_blobs(5, 2, 20, 8.0, 0.5, 0.25, 1).unwrap();
        assert!(ds.is_class_aligned());
        assert_eq!(ds.n_rows(), 100);
        // floor(20 · 0.25) = 5 test rows per class, 15 train.
        for c in 0..5 {
            let test_c = ds.test_idx.iter().filter(|&&r| ds.labels[r] == c).count();
            let train_c = ds.train_idx.iter().filter(|&&r| ds.labels[r] == c).count();
            assert_eq!(test_c, 5);
            assert_eq!(train_c, 15);
        }
    }

    #[test]
    fn blob_parameters_are_validated() {
        assert!(gaussian_blobs(1, 2, 10, 8.0, 0.5, 0.2, 0).is_err());
        assert!(gaussian_blobs(3, 2, 0, 8.0, 0.5, 0.2, 0).is_err());
        assert!(gaussian_blobs(3, 2, 10, 8.0, 0.0, 0.2, 0).is_err());
        assert!(gaussian_blobs(3, 2, 10, 8.0, 0.5, 1.0, 0).is_err());
        assert!(gaussian_blobs(3, 2, 10, -1.0, 0.5, 0.2, 0).is_err());
    }

    #[test]
    fn misaligned_attributes_are_balanced_when_divisible() {
        let ds = misaligned_entities(12, 5, 4, 3, 2).unwrap();
        assert!(!ds.is_class_aligned());
        for a in 0..4 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == a).count(), 15);
        }
        // floor(5/5) = 1 test sample per entity.
        assert_eq!(ds.test_idx.len(), 12);
        assert_eq!(ds.train_idx.len(), 48);
    }

    #[test]
    fn single_sample_entities_stay_in_train() {
        let ds = misaligned_entities(8, 1, 4, 3, 3).unwrap();
        assert!(ds.test_idx.is_empty());
        // Forgetting one entity removes exactly one train row.
        let plan = plan_phases(&ds, &[vec![3]]).unwrap();
        assert_eq!(plan.phases[0].forget_train.len(), 1);
    }

    #[test]
    fn plan_partitions_are_exact_and_monotone() {
        let ds = gaussian_blobs(6, 2, 10, 8.0, 0.5, 0.2, 4).unwrap();
        let plan = plan_phases(&ds, &[vec![0], vec![3], vec![5]]).unwrap();
        assert!(plan.phases[0].forgot_train.is_empty());
        assert!(plan.phases[0].forgot_test.is_empty());
        let mut prev_forgot = 0;
        for p in &plan.phases {
            // Exact partition of the train rows.
            let mut all: Vec<usize> = p
                .forget_train
                .iter()
                .chain(&p.retain_train)
                .chain(&p.forgot_train)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, ds.train_idx);
            // Disjointness follows from the exact cover having no duplicates.
            all.dedup();
            assert_eq!(all, ds.train_idx);
            assert!(p.forgot_train.len() >= prev_forgot);
            prev_forgot = p.forgot_train.len();
        }
        // forgot(t+1) == forgot(t) ∪ forget(t)
        let expect: usize = plan.phases[0].forget_train.len() + plan.phases[1].forget_train.len();
        assert_eq!(plan.phases[2].forgot_train.len(), expect);
    }

    #[test]
    fn repeated_unit_is_rejected_naming_both_phases() {
        let ds = gaussian_blobs(4, 2, 8, 8.0, 0.5, 0.25, 5).unwrap();
        let err = plan_phases(&ds, &[vec![1], vec![2, 1]]).unwrap_err();
        match err {
            DataError::RepeatedUnit { unit, first, second } => {
                assert_eq!((unit, first, second), (1, 1, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(matches!(
            plan_phases(&ds, &[vec![9]]),
            Err(DataError::UnknownUnit { unit: 9, phase: 1 })
        ));
        assert!(matches!(plan_phases(&ds, &[]), Err(DataError::EmptySchedule)));
    }

    #[test]
    fn empty_forget_phase_retains_everything() {
        let ds = gaussian_blobs(3, 2, 10, 8.0, 0.5, 0.2, 6).unwrap();
        let plan = plan_phases(&ds, &[vec![]]).unwrap();
        assert!(plan.phases[0].forget_train.is_empty());
        assert_eq!(plan.phases[0].retain_train, ds.train_idx);
    }

    #[test]
    fn twenty_entities_per_phase_keeps_all_attributes_covered() {
        let ds = misaligned_entities(100, 5, 4, 3, 7).unwrap();
        let schedule: Vec<Vec<usize>> = vec![
            (0..20).collect(),
            (20..40).collect(),
            (40..60).collect(),
        ];
        let plan = plan_phases(&ds, &schedule).unwrap();
        for p in &plan.phases {
            assert_eq!(ds.classes_in(&p.retain_train), vec![0, 1, 2, 3]);
        }
    }

    proptest! {
        /// Partition identity over random datasets and schedules: the three
        /// sets are pairwise disjoint and their union is exactly the train
        /// split, at every phase.
        #[test]
        fn partition_identity_holds(
            k in 3usize..7,
            n_per_class in 4usize..12,
            seed in 0u64..1000,
            phase_sizes in proptest::collection::vec(0usize..3, 1..4),
        ) {
            let ds = gaussian_blobs(k, 2, n_per_class, 8.0, 0.5, 0.25, seed).unwrap();
            let mut pool: Vec<usize> = (0..k).collect();
            let mut schedule = Vec::new();
            for s in phase_sizes {
                let take = s.min(pool.len().saturating_sub(1));
                schedule.push(pool.drain(..take).collect::<Vec<_>>());
            }
            let plan = plan_phases(&ds, &schedule).unwrap();
            for p in &plan.phases {
                let mut all: Vec<usize> = p.forget_train.iter()
                    .chain(&p.retain_train)
                    .chain(&p.forgot_train)
                    .copied()
                    .collect();
                all.sort_unstable();
                prop_assert_eq!(&all, &ds.train_idx);
                all.dedup();
                prop_assert_eq!(&all, &ds.train_idx);
            }
        }
    }
}
