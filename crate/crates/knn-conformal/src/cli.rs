//! Batch command-line driver: `synth`, `fit`, `predict`, `evaluate`.
//!
//! Every stage writes a manifest echoing its full configuration and input
//! hashes, so a run can be reproduced from the manifest alone. All
//! randomness flows from the `--seed` flag; rerunning any stage with the
//! same inputs produces byte-identical prediction and report files
//! (manifests contain timings and are exempt).
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::cache;
use crate::data::{self, BundleFormat, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalContext, StratifiedReport};
use crate::pipeline::{
    self, ModelsFile, Pipeline, PredictOptions, PredictionsMeta, ResampleSummary, RunManifest,
    SplitCounts, ARTIFACT_SCHEMA_VERSION,
};
use crate::synth::SynthSpec;

#[derive(Debug, Parser)]
#[command(
    name = "knn-conformal",
    version,
    about = "Prediction sets with label- and distance-band-conditional coverage via exact-KNN model approximations"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Cap the worker thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic bundle.
    Synth(SynthArgs),
    /// Fit both model approximations and write artifacts.
    Fit(FitArgs),
    /// Construct prediction sets from fitted artifacts.
    Predict(PredictArgs),
    /// Stratified coverage report for a predictions file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Full generator spec as JSON (overrides the flags below).
    #[arg(long)]
    spec_json: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 2000)]
    cal: usize,
    #[arg(long, default_value_t = 2000)]
    test: usize,
    /// Distance of each cluster center from the origin.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Per-class cluster scales, comma-separated (default: all 1.0).
    #[arg(long)]
    scales: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    logit_scale: f64,
    /// Logit noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Translation added to test exemplars, comma-separated length-D vector.
    #[arg(long)]
    translate: Option<String>,
    /// Test label proportions, comma-separated (must sum to 1).
    #[arg(long)]
    test_proportions: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ConfigFlags {
    /// Miscoverage rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Band radius multiplier.
    #[arg(long)]
    delta: Option<f64>,
    /// Minimum per-label band size before sets revert to full cardinality.
    #[arg(long)]
    kappa: Option<usize>,
    /// Neighbors used by the training-set approximation.
    #[arg(long, short = 'k')]
    k_neighbors: Option<usize>,
    /// Activation over neighbor logits: tanh or identity.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn apply(&self, mut config: RunConfig) -> Result<RunConfig> {
        if let Some(a) = self.alpha {
            config.alpha = a;
        }
        if let Some(d) = self.delta {
            config.delta = d;
        }
        if let Some(k) = self.kappa {
            config.kappa = k;
        }
        if let Some(k) = self.k_neighbors {
            config.k_neighbors = k;
        }
        if let Some(act) = &self.activation {
            config.activation = act.parse()?;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Artifact directory to create/overwrite.
    #[arg(long)]
    out: PathBuf,
    /// Acknowledge that the unlabeled test batch is used to fit the
    /// calibration-mixture temperature (the pipeline is transductive).
    #[arg(long)]
    transductive: bool,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Artifact directory produced by `fit`.
    #[arg(long)]
    artifacts: PathBuf,
    /// Output predictions file (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Re-sample the calibration set toward the test batch first.
    #[arg(long)]
    resample: bool,
    /// Points taken per admitted test point when re-sampling.
    #[arg(long)]
    k_sample: Option<usize>,
    /// Drop the prediction-match guard from the banded sets (the refined
    /// sets stay gated).
    #[arg(long)]
    no_h: bool,
    /// Acknowledge the transductive use of the test batch (required with
    /// --resample).
    #[arg(long)]
    transductive: bool,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions file from `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Bundle with gold test labels.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Contexts file from `fit` (defaults to `<artifacts>/contexts.jsonl`
    /// when --artifacts is given).
    #[arg(long)]
    contexts: Option<PathBuf>,
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Output directory for report.csv / report.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Distance quantile bins.
    #[arg(long, default_value_t = 4)]
    bins: usize,
}

/// Parse argv and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with code 0, usage errors
            // on stderr with code 2
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        // ignore failure: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad float `{t}` in --{what}")))
        })
        .collect()
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = match &args.spec_json {
        Some(path) => pipeline::read_json::<SynthSpec>(path)?,
        None => {
            let mut spec = SynthSpec::axis_clusters(
                args.classes,
                args.dim,
                args.separation,
                1.0,
                (args.train, args.cal, args.test),
                args.seed,
            );
            spec.logit_scale = args.logit_scale;
            spec.logit_noise = args.noise;
            if let Some(scales) = &args.scales {
                spec.class_scales = parse_floats(scales, "scales")?;
            }
            if let Some(t) = &args.translate {
                spec.test_translation = Some(parse_floats(t, "translate")?);
            }
            if let Some(p) = &args.test_proportions {
                spec.test_proportions = Some(parse_floats(p, "test-proportions")?);
            }
            spec
        }
    };
    let bundle = crate::synth::generate(&spec)?;
    data::save_bundle(&bundle, &args.out, args.format.parse()?)?;
    println!(
        "synth: wrote {} (C={} D={} train={} cal={} test={} seed={})",
        args.out.display(),
        bundle.num_classes,
        bundle.dim,
        bundle.train.len(),
        bundle.calibration.len(),
        bundle.test.len(),
        spec.seed
    );
    Ok(())
}

fn cache_key_for(hash: &str) -> Option<(PathBuf, String)> {
    cache::cache_dir_from_env().map(|dir| (dir, hash.to_string()))
}

fn load_bundle_with_hash(path: &Path, format: &str) -> Result<(data::DatasetBundle, String)> {
    let format: BundleFormat = format.parse()?;
    let hash = data::hash_file(path)?;
    let bundle = data::load_bundle(path, format)?;
    Ok((bundle, hash))
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    if !args.transductive {
        return Err(Error::Usage(
            "fitting uses the unlabeled test batch (the mixture temperature is trained against \
             it); pass --transductive to acknowledge"
                .into(),
        ));
    }
    let config = args.config.apply(RunConfig::default())?;
    config.validate()?;

    let t0 = Instant::now();
    let (bundle, hash) = load_bundle_with_hash(&args.bundle, &args.format)?;
    let load_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let cache_key = cache_key_for(&hash);
    let pipeline = Pipeline::fit_with_cache(
        bundle,
        config.clone(),
        cache_key.as_ref().map(|(d, h)| (d.as_path(), h.as_str())),
    )?;
    let fit_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    pipeline::write_json(
        &args.out.join("models.json"),
        &ModelsFile {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            knn: pipeline.knn_model.clone(),
            mixture: pipeline.mixture.clone(),
        },
    )?;
    pipeline::write_contexts(&args.out.join("contexts.jsonl"), &pipeline)?;
    let mut timing = BTreeMap::new();
    timing.insert("load".to_string(), load_s);
    timing.insert("fit".to_string(), fit_s);
    timing.insert("write".to_string(), t2.elapsed().as_secs_f64());
    let manifest = RunManifest {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        command: "fit".into(),
        config: config.clone(),
        bundle_path: args.bundle.display().to_string(),
        bundle_sha256: hash,
        num_classes: pipeline.bundle.num_classes,
        dim: pipeline.bundle.dim,
        counts: SplitCounts {
            train: pipeline.bundle.train.len(),
            calibration: pipeline.bundle.calibration.len(),
            test: pipeline.bundle.test.len(),
        },
        s_hat: pipeline.band_spec.s_hat,
        omega: pipeline.band_spec.omega,
        knn_fit: pipeline.knn_model.meta.clone(),
        mixture_fit: pipeline.mixture.meta.clone(),
        kappa_censored_fraction: None,
        resample_summary: None,
        threads: Some(rayon::current_num_threads()),
        timing_seconds: timing,
    };
    pipeline::write_json(&args.out.join("manifest.json"), &manifest)?;

    println!(
        "fit: knn agreement {:.4}, mixture agreement {:.4}, s_hat {:.4}, omega {:.4}",
        manifest.knn_fit.as_ref().map_or(f64::NAN, |m| m.agreement),
        manifest.mixture_fit.as_ref().map_or(f64::NAN, |m| m.agreement),
        manifest.s_hat,
        manifest.omega
    );
    println!("fit: artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    if args.resample && args.k_sample.is_none() {
        return Err(Error::Usage(
            "--resample requires --k-sample (run once without it and check the reported \
             weight-depth summary for a sensible range)"
                .into(),
        ));
    }
    if args.resample && !args.transductive {
        return Err(Error::Usage(
            "--resample reshapes calibration around the test batch; pass --transductive to \
             acknowledge"
                .into(),
        ));
    }
    let fit_manifest: RunManifest = pipeline::read_json(&args.artifacts.join("manifest.json"))?;
    let mut config = args.config.apply(fit_manifest.config.clone())?;
    config.resample = args.resample;
    config.use_h_guard = !args.no_h;
    if args.k_sample.is_some() {
        config.k_sample = args.k_sample;
    }
    config.validate()?;

    let t0 = Instant::now();
    let (bundle, hash) = load_bundle_with_hash(&args.bundle, &args.format)?;
    if hash != fit_manifest.bundle_sha256 {
        return Err(Error::InvalidData(format!(
            "bundle hash {hash} does not match the fitted artifacts ({})",
            fit_manifest.bundle_sha256
        )));
    }
    let models: ModelsFile = pipeline::read_json(&args.artifacts.join("models.json"))?;
    let load_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let cache_key = cache_key_for(&hash);
    let pipeline = Pipeline::from_models(
        bundle,
        config.clone(),
        models.knn,
        models.mixture,
        cache_key.as_ref().map(|(d, h)| (d.as_path(), h.as_str())),
    )?;
    let mut opts = PredictOptions::from_config(&config);
    opts.delta = args.config.delta;
    let out = pipeline.predict(&opts)?;
    let predict_s = t1.elapsed().as_secs_f64();

    let depth = pipeline.depth_summary()?;
    let resample_summary = out
        .resampled
        .as_ref()
        .map(|rs| ResampleSummary::from_resampled(rs, opts.k_sample.unwrap_or(0)));
    let meta = PredictionsMeta {
        kind: "meta".into(),
        schema_version: ARTIFACT_SCHEMA_VERSION,
        config: config.clone(),
        s_hat: out.band_spec.s_hat,
        omega: out.band_spec.omega,
        knn_agreement: pipeline.knn_model.meta.as_ref().map(|m| m.agreement),
        mixture_agreement: pipeline.mixture.meta.as_ref().map(|m| m.agreement),
        methods: out.methods.iter().map(|m| m.method.clone()).collect(),
        kappa_censored_fraction: out.kappa_censored_fractions(),
        resample_summary: resample_summary.clone(),
        depth_summary: Some(depth.clone()),
    };
    pipeline::write_predictions(&args.out, &meta, &out.methods)?;
    if let Some(rs) = &out.resampled {
        let audit_path = args.out.with_extension("resample_audit.jsonl");
        pipeline::write_resample_audit(&audit_path, &pipeline, rs)?;
        println!("predict: re-sampling audit in {}", audit_path.display());
    }

    let mut timing = BTreeMap::new();
    timing.insert("load".to_string(), load_s);
    timing.insert("predict".to_string(), predict_s);
    let manifest = RunManifest {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        command: "predict".into(),
        config,
        bundle_path: args.bundle.display().to_string(),
        bundle_sha256: hash,
        num_classes: pipeline.bundle.num_classes,
        dim: pipeline.bundle.dim,
        counts: SplitCounts {
            train: pipeline.bundle.train.len(),
            calibration: pipeline.bundle.calibration.len(),
            test: pipeline.bundle.test.len(),
        },
        s_hat: out.band_spec.s_hat,
        omega: out.band_spec.omega,
        knn_fit: pipeline.knn_model.meta.clone(),
        mixture_fit: pipeline.mixture.meta.clone(),
        kappa_censored_fraction: Some(out.kappa_censored_fractions()),
        resample_summary,
        threads: Some(rayon::current_num_threads()),
        timing_seconds: timing,
    };
    pipeline::write_json(&args.out.with_extension("manifest.json"), &manifest)?;

    println!(
        "predict: weight-depth mean {:.1} median {:.1} (half the mixture mass within this many \
         nearest calibration points)",
        depth.mean_depth, depth.median_depth
    );
    for (method, frac) in meta.kappa_censored_fraction.iter() {
        println!("predict: {method}: kappa-censored fraction {frac:.4}");
    }
    println!("predict: wrote {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let contexts_path = match (&args.contexts, &args.artifacts) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("contexts.jsonl"),
        (None, None) => {
            return Err(Error::Usage(
                "pass --contexts <file> or --artifacts <dir>".into(),
            ))
        }
    };
    let (meta, methods) = pipeline::read_predictions(&args.predictions)?;
    let records = pipeline::read_contexts(&contexts_path)?;
    let (bundle, _) = load_bundle_with_hash(&args.bundle, &args.format)?;

    let labels: BTreeMap<&str, Option<usize>> = bundle
        .test
        .iter()
        .map(|i| (i.id.as_str(), i.label))
        .collect();
    let mut eval_contexts = Vec::new();
    let mut cal_ds = Vec::new();
    for rec in &records {
        match rec.split {
            data::Split::Calibration => cal_ds.push(rec.d),
            data::Split::Test => {
                let label = match labels.get(rec.id.as_str()) {
                    Some(l) => *l,
                    None => {
                        return Err(Error::InvalidData(format!(
                            "context id `{}` is not a test instance of the bundle",
                            rec.id
                        )))
                    }
                };
                eval_contexts.push(EvalContext {
                    id: rec.id.clone(),
                    label,
                    dist_to_train: rec.d,
                    q: rec.q,
                });
            }
            data::Split::Train => {}
        }
    }
    let boundaries = crate::constraints::quantile_boundaries(&cal_ds, args.bins)?;

    let mut reports = Vec::new();
    for m in &methods {
        reports.push(evaluation::evaluate(
            &m.method,
            &m.results,
            &eval_contexts,
            &boundaries,
        )?);
    }
    let report = StratifiedReport::merge(reports);
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;
    let csv_path = args.out_dir.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let json_path = args.out_dir.join("report.json");
    std::fs::write(&json_path, report.to_json_string())
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;

    for m in &meta.methods {
        for row in report.select(m, "c_hat", "all") {
            println!(
                "evaluate: {m}: coverage {:.4}, mean cardinality {:.3}, accuracy {:.4} (n={})",
                row.coverage, row.mean_cardinality, row.point_accuracy, row.count
            );
        }
    }
    println!("evaluate: wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}
