//! Fit both model approximations and inspect what was learned.
//!
//! The first approximation rebuilds the classifier's output for a query
//! from its K nearest training exemplars (distance-softmax weights over
//! activated neighbor logits plus per-class label votes; 2C+1 parameters).
//! The second rebuilds a test point's scores as a convex combination of
//! the calibration set's cached scores, with one temperature fitted
//! transductively against the test batch.
//!
//! ```bash
//! cargo run --release -p knn-conformal --example fit_approximations
//! ```

use knn_conformal::pipeline::Pipeline;
use knn_conformal::{generate, RunConfig, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        logit_scale: 2.0,
        logit_noise: 1.0,
        ..SynthSpec::axis_clusters(2, 16, 1.6, 1.0, (800, 800, 800), 11)
    };
    let bundle = generate(&spec)?;
    let config = RunConfig {
        kappa: 50,
        ..RunConfig::default()
    };
    let pipeline = Pipeline::fit(bundle, config)?;

    let knn = &pipeline.knn_model;
    println!("training-set approximation (K = {}):", knn.k);
    println!("  beta  = {:?}", knn.beta.iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("  gamma = {:?}", knn.gamma.iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("  eta   = {:.4}", knn.eta);
    let meta = knn.meta.as_ref().unwrap();
    println!(
        "  agreement with the approximated model on the held half: {:.4} (epoch {} of {})",
        meta.agreement, meta.best_epoch, meta.epochs_run
    );

    let mix = &pipeline.mixture;
    println!("calibration-mixture approximation:");
    println!("  tau = {:.4}", mix.tau);
    let meta = mix.meta.as_ref().unwrap();
    println!(
        "  agreement with the plain approximation over the test batch: {:.4}",
        meta.agreement
    );

    let depth = pipeline.depth_summary()?;
    println!(
        "  half the mixture weight sits within the nearest {:.1} calibration points on average \
         (median {:.1}, max {})",
        depth.mean_depth, depth.median_depth, depth.max_depth
    );

    println!(
        "band radius: s_hat {:.4} * delta {} = omega {:.4}",
        pipeline.band_spec.s_hat, pipeline.band_spec.delta, pipeline.band_spec.omega
    );

    // reliability signals at a glance
    let q_true = pipeline.cal_contexts.iter().filter(|c| c.q).count();
    println!(
        "match constraint holds on {:.1}% of calibration points",
        100.0 * q_true as f64 / pipeline.cal_contexts.len() as f64
    );
    Ok(())
}
