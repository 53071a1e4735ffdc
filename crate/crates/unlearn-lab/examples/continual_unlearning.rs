//! Walk a two-phase forgetting schedule with three algorithms — retrain from
//! scratch (the gold standard), SAFER, and gradient ascent on the forget set
//! — and compare per-phase accuracies plus the longitudinal metrics:
//! knowledge erosion, forgetting reversal, and tug-of-war closeness to the
//! retrained reference.
//!
//! Run with: cargo run --release --example continual_unlearning

use std::collections::BTreeMap;

use unlearn_lab::datagen::{gaussian_blobs, plan_phases};
use unlearn_lab::metrics::{forgetting_reversal, knowledge_erosion, tug_of_war, EvalSet};
use unlearn_lab::model::{Activation, ModelConfig};
use unlearn_lab::rng::SeedSplitter;
use unlearn_lab::unlearn::{
    run_continual, train_original, AlgorithmConfig, AlgorithmKind, PhaseResult, TrainConfig,
};

fn pct(table: &BTreeMap<EvalSet, f64>, set: EvalSet) -> f64 {
    table.get(&set).map_or(f64::NAN, |v| 100.0 * v)
}

fn row(results: &[PhaseResult], phase: usize) -> (f64, f64, f64, f64) {
    let t = &results[phase].accuracies;
    (
        pct(t, EvalSet::RetainTest),
        pct(t, EvalSet::ForgetTest),
        pct(t, EvalSet::ForgotTest),
        pct(t, EvalSet::FullTest),
    )
}

/// Per-phase retain-test accuracies (percent), for knowledge erosion.
fn retain_series(results: &[PhaseResult]) -> Vec<f64> {
    results.iter().map(|r| pct(&r.accuracies, EvalSet::RetainTest)).collect()
}

/// (forget@t, forgot@t+1) pairs in percent, for forgetting reversal: the
/// accuracy a class was left with at the phase that forgot it, against its
/// accuracy one phase later.
fn reversal_pairs(results: &[PhaseResult]) -> Vec<(f64, f64)> {
    results
        .windows(2)
        .map(|w| {
            (pct(&w[0].accuracies, EvalSet::ForgetTest), pct(&w[1].accuracies, EvalSet::ForgotTest))
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = gaussian_blobs(6, 6, 200, 5.0, 0.8, 0.2, 7)?;
    let plan = plan_phases(&ds, &[vec![0], vec![4]])?;
    println!(
        "dataset: {} classes, {} train rows; schedule: forget class 0, then class 4\n",
        ds.n_classes,
        ds.train_idx.len()
    );

    let model_cfg = ModelConfig {
        input_dim: ds.dim(),
        n_classes: ds.n_classes,
        extractor_widths: vec![24, 24],
        latent_dim: 6,
        encoder_widths: vec![24],
        decoder_widths: vec![24],
        activation: Activation::Tanh,
    };
    let train_cfg = TrainConfig { epochs: 8, lr: 0.05, batch_size: 32, momentum: 0.9 };

    let root = SeedSplitter::new(41);
    let origin = train_original(&ds, &model_cfg, &train_cfg, &root.child("origin"))?;
    println!(
        "original model: full-test accuracy {:.2}%",
        100.0
            * unlearn_lab::metrics::set_accuracy(
                &origin,
                Some(&ds.gather(&ds.test_idx)),
                &ds.labels_at(&ds.test_idx),
            )
            .unwrap()
    );

    let algorithms: Vec<(&str, AlgorithmConfig)> = vec![
        ("retrain", AlgorithmConfig { epochs: 8, ..AlgorithmConfig::new(AlgorithmKind::Retrain) }),
        (
            "safer",
            AlgorithmConfig {
                epochs: 8,
                lr: 0.001,
                beta: 2.0,
                lambda: 0.1,
                ..AlgorithmConfig::new(AlgorithmKind::Safer)
            },
        ),
        (
            "neggrad",
            AlgorithmConfig { epochs: 8, lr: 0.02, ..AlgorithmConfig::new(AlgorithmKind::NegGrad) },
        ),
    ];

    let mut all: Vec<(&str, Vec<PhaseResult>)> = Vec::new();
    for (name, cfg) in &algorithms {
        let seeds = root.child("algorithm").child(name);
        let results = run_continual(&ds, &plan, &origin, cfg, &seeds)?;
        all.push((name, results));
    }

    println!("\nper-phase test accuracies (percent):");
    println!(
        "{:<9} {:>5}  {:>11} {:>11} {:>11} {:>9}",
        "algo", "phase", "retain", "forget", "forgot", "full"
    );
    for (name, results) in &all {
        for (i, _) in results.iter().enumerate() {
            let (rt, ft, gt, full) = row(results, i);
            let gt_cell = if gt.is_nan() { "—".to_string() } else { format!("{gt:.2}%") };
            println!(
                "{:<9} {:>5}  {:>10.2}% {:>10.2}% {:>11} {:>8.2}%",
                name,
                i + 1,
                rt,
                ft,
                gt_cell,
                full
            );
        }
    }

    let retrain_results = &all[0].1;
    println!("\nlongitudinal metrics:");
    println!("{:<9} {:>10} {:>10} {:>12}", "algo", "erosion", "reversal", "final tow");
    for (name, results) in &all {
        let ke = knowledge_erosion(&retain_series(results));
        let fr = forgetting_reversal(&reversal_pairs(results));
        let last = results.len() - 1;
        let tow = tug_of_war(&results[last].accuracies, &retrain_results[last].accuracies)?;
        println!(
            "{:<9} {:>10} {:>10} {:>12.3}",
            name,
            ke.map_or("—".into(), |v| format!("{v:+.3}")),
            fr.map_or("—".into(), |v| format!("{v:+.3}")),
            tow
        );
    }

    // Sanity assertions on the qualitative picture.
    let (rt_retrain, ft_retrain, _, _) = row(retrain_results, 1);
    let safer_results = &all[1].1;
    let (rt_safer, ft_safer, gt_safer, _) = row(safer_results, 1);
    assert!(ft_retrain <= 5.0, "retrain must not know the forgotten class");
    assert!(rt_retrain >= 90.0, "retrain keeps retained classes");
    assert!(ft_safer <= 5.0, "unlearning should suppress the forget class");
    assert!(gt_safer <= 5.0, "earlier forgetting should not resurge");
    assert!(rt_safer >= rt_retrain - 5.0, "unlearning should roughly keep retained accuracy");
    println!("\nok: forgetting holds across phases while retained knowledge survives");
    Ok(())
}
