//! Generate seeded synthetic bundles and write them in both interchange
//! formats.
//!
//! A bundle is three splits of (exemplar, logits, label) records drawn from
//! Gaussian class clusters with an imperfect linear classifier over them.
//! The second bundle below adds a test-only shift: skewed label proportions
//! plus a mean translation of the exemplars.
//!
//! ```bash
//! cargo run --release -p knn-conformal --example generate_data
//! ```

use knn_conformal::data::argmax;
use knn_conformal::{generate, save_bundle, BundleFormat, DatasetBundle, SynthSpec};

fn model_accuracy(bundle: &DatasetBundle) -> f64 {
    let correct = bundle
        .test
        .iter()
        .filter(|i| match (&i.logits, i.label) {
            (Some(logits), Some(label)) => argmax(logits) == label,
            _ => false,
        })
        .count();
    correct as f64 / bundle.test.len() as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("knn-conformal-example");
    std::fs::create_dir_all(&out)?;

    // exchangeable bundle: all three splits from one law
    let spec = SynthSpec {
        logit_scale: 2.0,
        logit_noise: 1.0,
        ..SynthSpec::axis_clusters(2, 16, 1.6, 1.0, (1000, 1000, 1000), 7)
    };
    let bundle = generate(&spec)?;
    println!(
        "exchangeable bundle: C={} D={} train={} cal={} test={}",
        bundle.num_classes,
        bundle.dim,
        bundle.train.len(),
        bundle.calibration.len(),
        bundle.test.len()
    );
    println!("  test-split model accuracy: {:.3}", model_accuracy(&bundle));

    let jsonl = out.join("bundle.jsonl");
    let binary = out.join("bundle.bin");
    save_bundle(&bundle, &jsonl, BundleFormat::Jsonl)?;
    save_bundle(&bundle, &binary, BundleFormat::Binary)?;
    println!(
        "  wrote {} ({} bytes) and {} ({} bytes)",
        jsonl.display(),
        std::fs::metadata(&jsonl)?.len(),
        binary.display(),
        std::fs::metadata(&binary)?.len()
    );

    // shifted bundle: the test split moves, train/calibration stay put
    let mut shifted = spec.clone();
    shifted.test_proportions = Some(vec![0.9, 0.1]);
    let mut translate = vec![0.0; shifted.dim];
    translate[0] = 0.5;
    translate[1] = -0.5;
    shifted.test_translation = Some(translate);
    let bundle = generate(&shifted)?;
    let minority = bundle.test.iter().filter(|i| i.label == Some(1)).count();
    println!(
        "shifted bundle: test minority proportion {:.3}, model accuracy {:.3}",
        minority as f64 / bundle.test.len() as f64,
        model_accuracy(&bundle)
    );
    save_bundle(&bundle, &out.join("bundle_shifted.jsonl"), BundleFormat::Jsonl)?;
    println!("  wrote {}", out.join("bundle_shifted.jsonl").display());
    Ok(())
}
