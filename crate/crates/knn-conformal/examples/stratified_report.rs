//! Build the stratified coverage report and emit it as CSV and JSON.
//!
//! Rows are keyed by (method, set variant, stratification): marginal,
//! per class, per distance-to-training quantile bin, per cardinality, per
//! match-constraint flag, per censoring flag, and the class-by-bin /
//! class-by-cardinality cross products.
//!
//! ```bash
//! cargo run --release -p knn-conformal --example stratified_report
//! ```

use knn_conformal::evaluation::{evaluate, EvalContext, StratifiedReport};
use knn_conformal::pipeline::{Pipeline, PredictOptions};
use knn_conformal::{distance_quantile_bins, generate, RunConfig, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        logit_scale: 2.0,
        logit_noise: 1.0,
        ..SynthSpec::axis_clusters(2, 16, 1.6, 1.0, (800, 1000, 1000), 5)
    };
    let bundle = generate(&spec)?;
    let config = RunConfig {
        kappa: 50,
        ..RunConfig::default()
    };
    let pipeline = Pipeline::fit(bundle, config)?;
    let out = pipeline.predict(&PredictOptions::from_config(&pipeline.config))?;

    let contexts: Vec<EvalContext> = pipeline.test_contexts.iter().map(EvalContext::from).collect();
    // four distance bins, boundaries from the calibration set
    let bins = distance_quantile_bins(&pipeline.cal_contexts, 4)?;

    let mut reports = Vec::new();
    for m in &out.methods {
        reports.push(evaluate(&m.method, &m.results, &contexts, &bins)?);
    }
    let report = StratifiedReport::merge(reports);

    let dir = std::env::temp_dir().join("knn-conformal-example");
    std::fs::create_dir_all(&dir)?;
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("report.json");
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(&json_path, report.to_json_string())?;
    println!("wrote {} and {}\n", csv_path.display(), json_path.display());

    // show the marginal and per-bin rows for the banded sets
    println!("selected rows (method=admit, set=c_hat):");
    println!(
        "{:<14} {:<8} {:>6} {:>9} {:>9} {:>7} {:>9}",
        "stratum_kind", "value", "count", "fraction", "coverage", "|C|", "accuracy"
    );
    for kind in ["all", "class", "distance_bin", "cardinality", "q"] {
        for row in report.select("admit", "c_hat", kind) {
            println!(
                "{:<14} {:<8} {:>6} {:>9.4} {:>9.4} {:>7.3} {:>9.4}",
                row.stratum_kind,
                row.stratum_value,
                row.count,
                row.fraction,
                row.coverage,
                row.mean_cardinality,
                row.point_accuracy
            );
        }
    }
    Ok(())
}
