//! Generate both synthetic datasets and inspect their geometry.
//!
//! Prints per-class sample counts, the matrix of pairwise distances between
//! class means, and each class's nearest neighbour — the quantities that
//! decide how hard a forgetting problem the dataset poses. Run with
//! `cargo run --example synthetic_data`.

use unlearn_lab::datagen::{gaussian_blobs, misaligned_entities, LabeledDataset};

fn class_means(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    let d = ds.dim();
    let mut sums = vec![vec![0.0; d]; ds.n_classes];
    let mut counts = vec![0usize; ds.n_classes];
    for &row in &ds.train_idx {
        let feat = &ds.features.data()[row * d..(row + 1) * d];
        for (s, v) in sums[ds.labels[row]].iter_mut().zip(feat) {
            *s += v;
        }
        counts[ds.labels[row]] += 1;
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        for s in sum.iter_mut() {
            *s /= n.max(1) as f64;
        }
    }
    sums
}

fn describe(name: &str, ds: &LabeledDataset) {
    let mut train_per_class = vec![0usize; ds.n_classes];
    let mut test_per_class = vec![0usize; ds.n_classes];
    for &row in &ds.train_idx {
        train_per_class[ds.labels[row]] += 1;
    }
    for &row in &ds.test_idx {
        test_per_class[ds.labels[row]] += 1;
    }
    println!("== {name}");
    println!(
        "   {} classes, dim {}, {} train / {} test rows, class-aligned entities: {}",
        ds.n_classes,
        ds.dim(),
        ds.train_idx.len(),
        ds.test_idx.len(),
        ds.is_class_aligned(),
    );
    println!("   train rows per class: {train_per_class:?}");
    println!("   test rows per class:  {test_per_class:?}");

    let means = class_means(ds);
    println!("   distances between class means:");
    print!("        ");
    for j in 0..ds.n_classes {
        print!("{j:>6}");
    }
    println!();
    for (i, mi) in means.iter().enumerate() {
        print!("     {i:>2} ");
        for mj in &means {
            let dist: f64 = mi.iter().zip(mj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            print!("{dist:>6.2}");
        }
        println!();
    }
    for (i, mi) in means.iter().enumerate() {
        let (nearest, dist) = means
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, mj)| {
                let d: f64 = mi.iter().zip(mj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (j, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least two classes");
        println!("   class {i}: nearest neighbour is class {nearest} at distance {dist:.2}");
    }
}

fn main() {
    let blobs = gaussian_blobs(8, 8, 250, 5.0, 0.8, 0.2, 7).expect("valid blob parameters");
    describe("gaussian blobs (the desk-scenario dataset)", &blobs);

    println!();

    let entities = misaligned_entities(12, 40, 4, 8, 11).expect("valid entity parameters");
    describe("entity-grouped dataset (forget sets cut across classes)", &entities);
}
