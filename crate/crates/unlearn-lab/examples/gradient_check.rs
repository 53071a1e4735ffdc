//! Verify every training objective's analytic gradient against central
//! finite differences, over all model parameters at once.
//!
//! Randomness (input batch, latent noise, randomized targets, the latent
//! reference) is drawn once and frozen, so each objective is a deterministic
//! scalar function of the parameter vector and the comparison is exact up to
//! truncation error.
//!
//! Run with: cargo run --release --example gradient_check

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use unlearn_lab::diffcore::{
    check_scalar_graph, finite_difference_check, DiffError, Graph, NodeId, Tensor,
};
use unlearn_lab::losses::{
    classification_loss, forget_loss, forget_targets, retain_loss, EmaMode, EmaState,
    RetainLossConfig,
};
use unlearn_lab::model::{
    features_graph, init_model, logits_graph, Activation, Model, ModelConfig,
};

const FD_EPS: f64 = 1e-5;

/// Concatenate all parameter tensors into one flat point.
fn flatten(model: &Model) -> Vec<f64> {
    model.param_tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Load a flat point back into the model's parameter tensors.
fn load(model: &mut Model, point: &[f64]) {
    let mut off = 0;
    for t in model.param_tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&point[off..off + n]);
        off += n;
    }
}

/// Flatten per-tensor gradients into the same order as [`flatten`].
/// Parameters the objective does not touch contribute zeros.
fn flat_grads(
    g: &Graph,
    grads: &unlearn_lab::diffcore::Gradients,
    ids: &[NodeId],
) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in ids {
        match grads.get(id) {
            Some(t) => out.extend_from_slice(t.data()),
            None => out.extend(std::iter::repeat(0.0).take(g.value(id).len())),
        }
    }
    out
}

struct Fixture {
    model: Model,
    x: Tensor,
    labels: Vec<usize>,
    eps: Tensor,
    ema: EmaState,
    q: Tensor,
}

fn fixture(seed: u64) -> Result<Fixture, DiffError> {
    let config = ModelConfig {
        input_dim: 4,
        n_classes: 3,
        extractor_widths: vec![6],
        latent_dim: 3,
        encoder_widths: vec![5],
        decoder_widths: vec![5],
        activation: Activation::Tanh,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = init_model(&config, &mut rng);

    let batch = 5;
    let x = Tensor::new(
        &[batch, config.input_dim],
        (0..batch * config.input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..config.n_classes)).collect();
    let eps = Tensor::new(
        &[batch, config.latent_dim],
        (0..batch * config.latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;

    // Warm the latent reference once so the separation term is active; the
    // stored mean is a constant with respect to the parameters.
    let mut ema = EmaState::new(0.9, EmaMode::Global, config.n_classes);
    let warm = Tensor::new(
        &[batch, config.latent_dim],
        (0..batch * config.latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    ema.update(&warm, &labels);

    // Randomized targets exclude each row's own class, as in unlearning.
    let support: Vec<usize> = (0..config.n_classes).collect();
    let q = forget_targets(&labels, &support, config.n_classes, &mut rng)?;

    Ok(Fixture { model, x, labels, eps, ema, q })
}

/// Check one objective: `build` maps a graph with inserted parameters to the
/// scalar node to differentiate. Returns the worst relative error.
fn check_objective<B>(fx: &Fixture, build: B) -> Result<f64, DiffError>
where
    B: Fn(&mut Graph, &Model, &unlearn_lab::model::ModelParams) -> Result<NodeId, DiffError>,
{
    let point = flatten(&fx.model);

    // Analytic gradient at the base point.
    let mut g = Graph::new();
    let params = fx.model.insert_params(&mut g);
    let node = build(&mut g, &fx.model, &params)?;
    let grads = g.backward(node)?;
    let analytic = flat_grads(&g, &grads, &params.flat_ids());

    // Numeric probe: rebuild the whole graph at each shifted point.
    let mut probe_model = fx.model.clone();
    let value_at = |p: &[f64]| -> Result<f64, DiffError> {
        load(&mut probe_model, p);
        let mut g = Graph::new();
        let params = probe_model.insert_params(&mut g);
        let node = build(&mut g, &probe_model, &params)?;
        Ok(g.value(node).item())
    };

    finite_difference_check(value_at, &point, &analytic, FD_EPS)
}

fn main() -> Result<(), DiffError> {
    println!("central finite differences, step {FD_EPS:.0e}, over all parameters\n");

    // A couple of primitive compositions first, via the single-tensor helper.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let softplus = check_scalar_graph(&[3, 4], &point, FD_EPS, |g, p| {
        let e = g.exp(p)?;
        let one = g.constant(Tensor::new(&[3, 4], vec![1.0; 12])?);
        let s = g.add(e, one)?;
        let l = g.log(s)?;
        g.sum(l)
    })?;
    println!("{:<34} worst rel err {:.3e}", "sum(softplus_elementwise)", softplus);

    let full = RetainLossConfig::default();
    let cases: Vec<(&str, RetainLossConfig)> = vec![
        ("retain total (all terms)", full),
        ("retain ce only", RetainLossConfig {
            include_recon: false,
            include_kl: false,
            include_sep: false,
            ..full
        }),
        ("retain ce + recon", RetainLossConfig {
            include_kl: false,
            include_sep: false,
            ..full
        }),
        ("retain ce + kl", RetainLossConfig {
            include_recon: false,
            include_sep: false,
            ..full
        }),
        ("retain ce + sep", RetainLossConfig {
            include_recon: false,
            include_kl: false,
            ..full
        }),
    ];

    let mut worst_overall = 0.0f64;
    for seed in [11, 12, 13] {
        let fx = fixture(seed)?;
        println!("\nfixture seed {seed}:");
        for (name, cfg) in &cases {
            let err = check_objective(&fx, |g, m, p| {
                let xn = g.constant(fx.x.clone());
                let en = g.constant(fx.eps.clone());
                let rl = retain_loss(g, m, p, xn, &fx.labels, en, &fx.ema, cfg)?;
                Ok(rl.total)
            })?;
            worst_overall = worst_overall.max(err);
            println!("  {:<32} worst rel err {:.3e}", name, err);
        }

        // Each individual term node, pulled out of the full construction.
        for (name, pick) in [
            ("term: ce", 0usize),
            ("term: recon", 1),
            ("term: kl", 2),
            ("term: sep", 3),
        ] {
            let err = check_objective(&fx, |g, m, p| {
                let xn = g.constant(fx.x.clone());
                let en = g.constant(fx.eps.clone());
                let rl = retain_loss(g, m, p, xn, &fx.labels, en, &fx.ema, &full)?;
                Ok(match pick {
                    0 => rl.terms.ce,
                    1 => rl.terms.recon.expect("recon active"),
                    2 => rl.terms.kl.expect("kl active"),
                    _ => rl.terms.sep.expect("sep active"),
                })
            })?;
            worst_overall = worst_overall.max(err);
            println!("  {:<32} worst rel err {:.3e}", name, err);
        }

        let err = check_objective(&fx, |g, m, p| {
            let xn = g.constant(fx.x.clone());
            classification_loss(g, m, p, xn, &fx.labels)
        })?;
        worst_overall = worst_overall.max(err);
        println!("  {:<32} worst rel err {:.3e}", "plain classification ce", err);

        let err = check_objective(&fx, |g, m, p| {
            let xn = g.constant(fx.x.clone());
            let f = features_graph(g, p, xn, m.config.activation)?;
            let logits = logits_graph(g, p, f)?;
            forget_loss(g, logits, &fx.q)
        })?;
        worst_overall = worst_overall.max(err);
        println!("  {:<32} worst rel err {:.3e}", "forget kl (randomized targets)", err);
    }

    println!("\nworst relative error overall: {worst_overall:.3e}");
    assert!(worst_overall < 1e-5, "gradient check failed");
    println!("all gradients match finite differences within 1e-5");
    Ok(())
}
