//! Distribution-free prediction sets for classifiers, built on exact
//! nearest-neighbor model approximations over dense exemplar vectors.
//!
//! Instead of thresholding a black-box model's probabilities directly, the
//! model is approximated twice: first by a distance-weighted KNN over the
//! training set ([`approx`]), then by a convex combination of calibration
//! approximations ([`composite`]). Both carry strong signals about where
//! predictions are reliable. Prediction sets are then calibrated per label
//! inside distance bands around each test point ([`constraints`],
//! [`conformal`]), guarded by minimum sample sizes and prediction-match
//! heuristics, and optionally recalibrated on a re-sampled calibration set
//! that tracks a shifted test distribution ([`resample`]).
//!
//! The runnable examples under `examples/` walk through each capability:
//!
//! ```bash
//! cargo run --release -p knn-conformal --example generate_data
//! cargo run --release -p knn-conformal --example fit_approximations
//! cargo run --release -p knn-conformal --example prediction_sets
//! cargo run --release -p knn-conformal --example shift_and_resample
//! cargo run --release -p knn-conformal --example stratified_report
//! cargo run --release -p knn-conformal --example calibration_audit
//! ```
//!
//! The same flow is scriptable through the `knn-conformal` binary
//! (`synth`, `fit`, `predict`, `evaluate`).

pub mod approx;
pub mod cache;
pub mod cli;
pub mod composite;
pub mod conformal;
pub mod constraints;
pub mod data;
mod error;
pub mod evaluation;
pub mod index;
pub mod pipeline;
pub mod resample;
pub mod synth;

pub use error::{Error, Result};

pub use approx::{fit_knn, knn_weights, KnnModel, KnnOutput};
pub use composite::{CalibrationScores, CompositeModel, CompositeOutput};
pub use conformal::{
    admit_sets, baseline_split_conformal, conformal_threshold, heuristic_h, AdmitInputs,
    AdmitOptions, PredictionSetResult, ThresholdTable,
};
pub use constraints::{
    assign_bin, band, distance_quantile_bins, estimate_band_radius, match_constraint, BandSpec,
    InstanceContext,
};
pub use data::{
    load_bundle, rescale_l2_logits, save_bundle, softmax, Activation, BundleFormat,
    DatasetBundle, Instance, RunConfig, Split,
};
pub use evaluation::{evaluate, loo_calibration_audit, StratifiedReport};
pub use index::{Neighbor, VectorIndex};
pub use pipeline::Pipeline;
pub use resample::{choose_k_sample_report, resample, ResampledCalibration};
pub use synth::{generate, SynthSpec};
