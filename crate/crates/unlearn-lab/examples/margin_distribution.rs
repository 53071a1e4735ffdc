//! Watch what one phase of unlearning does to the forget class at the level
//! of individual samples: the distribution of unlearning margins (correct
//! logit minus best other logit) before and after, and a loss-threshold
//! membership inference attack that tries to tell forget rows apart from
//! training members.
//!
//! Run with: cargo run --release --example margin_distribution

use unlearn_lab::datagen::{gaussian_blobs, plan_phases};
use unlearn_lab::metrics::{margin_histogram, margins_of, mia_score, per_sample_losses, MarginHistogram};
use unlearn_lab::model::{Activation, Model, ModelConfig};
use unlearn_lab::rng::SeedSplitter;
use unlearn_lab::unlearn::{
    run_continual, train_original, AlgorithmConfig, AlgorithmKind, TrainConfig,
};

const BINS: usize = 20;
const LO: f64 = -10.0;
const HI: f64 = 10.0;

fn print_histogram(label: &str, h: &MarginHistogram) {
    let edges = h.edges();
    let max = h.counts.iter().copied().max().unwrap_or(1).max(1);
    println!("{label}  ({} samples, {:.1}% below zero)", h.total(), 100.0 * h.fraction_below_zero());
    for (i, &c) in h.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let bar = "#".repeat((c * 50).div_ceil(max));
        println!("  [{:>6.1}, {:>6.1})  {:>4}  {}", edges[i], edges[i + 1], c, bar);
    }
    println!();
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = gaussian_blobs(6, 6, 200, 5.0, 0.8, 0.2, 7)?;
    let plan = plan_phases(&ds, &[vec![0]])?;
    let part = &plan.phases[0];

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

    let cfg = AlgorithmConfig {
        epochs: 8,
        lr: 0.001,
        beta: 2.0,
        lambda: 0.1,
        ..AlgorithmConfig::new(AlgorithmKind::Safer)
    };
    let results = run_continual(&ds, &plan, &origin, &cfg, &root.child("algorithm").child("safer"))?;
    let unlearned = Model::from_snapshot(&results[0].snapshot)?;

    // Margins of the forget-train rows: positive means the true class still
    // wins, negative means it has been pushed below some other class.
    let x_f = ds.gather(&part.forget_train);
    let y_f = ds.labels_at(&part.forget_train);
    let before = margin_histogram(&margins_of(&origin, &x_f, &y_f), LO, HI, BINS);
    let after = margin_histogram(&margins_of(&unlearned, &x_f, &y_f), LO, HI, BINS);

    println!("unlearning margins of forget-train rows (class 0), {BINS} bins on [{LO}, {HI}]\n");
    print_histogram("before unlearning:", &before);
    print_histogram("after one phase:", &after);

    assert_eq!(before.total(), part.forget_train.len());
    assert_eq!(after.total(), part.forget_train.len());
    assert!(before.fraction_below_zero() < 0.1, "trained model should fit its forget class");
    assert!(after.fraction_below_zero() > 0.95, "unlearning should push margins negative");

    // Membership inference with a per-sample loss threshold. The attacker
    // calibrates on retained train rows (members) vs retained test rows
    // (non-members), then judges each forget row. High scores mean forget
    // rows look like they were never trained on.
    println!("loss-threshold membership inference on the forget class:");
    for (name, model) in [("original", &origin), ("unlearned", &unlearned)] {
        let member = per_sample_losses(
            model,
            &ds.gather(&part.retain_train),
            &ds.labels_at(&part.retain_train),
        );
        let nonmember = per_sample_losses(
            model,
            &ds.gather(&part.retain_test),
            &ds.labels_at(&part.retain_test),
        );
        let forget = per_sample_losses(model, &x_f, &y_f);
        let mia = mia_score(&member, &nonmember, &forget)?;
        println!(
            "  {:<10} score {:>6.2}  (threshold {:.4}, calibration balanced acc {:.3}{})",
            name,
            mia.score,
            mia.threshold,
            mia.balanced_accuracy,
            if mia.degenerate { ", degenerate" } else { "" },
        );
        if name == "unlearned" {
            assert!(mia.score >= 90.0, "forget rows should look absent after unlearning");
        }
    }

    println!("\nok: margins flipped negative and the attacker reads forget rows as absent");
    Ok(())
}
