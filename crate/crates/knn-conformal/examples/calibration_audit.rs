//! Leave-one-out audit of the calibration set.
//!
//! Each calibration point is treated as a test point and scored against
//! thresholds built from the remaining points. On exchangeable data the
//! audited coverage should sit near the target; large gaps, or heavy
//! sample-size censoring, are a sign the calibration set is too small for
//! banded per-label thresholds on real test data.
//!
//! ```bash
//! cargo run --release -p knn-conformal --example calibration_audit
//! ```

use knn_conformal::{generate, loo_calibration_audit, RunConfig, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        logit_scale: 2.0,
        logit_noise: 1.0,
        ..SynthSpec::axis_clusters(2, 8, 1.6, 1.0, (400, 600, 1), 17)
    };
    let bundle = generate(&spec)?;
    let config = RunConfig {
        alpha: 0.1,
        kappa: 40,
        k_neighbors: 10,
        ..RunConfig::default()
    };

    let audit = loo_calibration_audit(&bundle, &config)?;
    println!(
        "leave-one-out over {} calibration points (target coverage {:.2})\n",
        audit.baseline.len(),
        1.0 - config.alpha
    );

    for method in ["conformal", "admit"] {
        let all = audit.report.select(method, "c_hat", "all")[0].clone();
        println!(
            "{:<10} coverage {:.4}, mean cardinality {:.3}",
            method, all.coverage, all.mean_cardinality
        );
        for row in audit.report.select(method, "c_hat", "class") {
            println!(
                "            class {}: coverage {:.4} (n={})",
                row.stratum_value, row.coverage, row.count
            );
        }
    }

    let censored = audit.banded.iter().filter(|r| r.kappa_censored).count();
    println!(
        "\nbanded sets censored by the sample-size guard: {}/{} ({:.1}%)",
        censored,
        audit.banded.len(),
        100.0 * censored as f64 / audit.banded.len() as f64
    );
    println!("a high censored share means the calibration set is too small for this kappa");
    Ok(())
}
