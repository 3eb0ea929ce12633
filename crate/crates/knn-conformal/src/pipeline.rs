//! End-to-end orchestration: ingest, fit, predict, and the artifact files
//! that tie the stages together.
//!
//! A fitted [`Pipeline`] owns the bundle, both approximation models, the
//! per-point contexts, and the precomputed distance structures. Every stage
//! is deterministic given the bundle and the seed; identical runs produce
//! byte-identical artifact files (manifests carry wall-clock timings and
//! are the one exception).
//!
//! Artifacts written by `fit`:
//! * `models.json` - both models with their fit provenance
//! * `contexts.jsonl` - one audit record per calibration/test point
//! * `manifest.json` - config echo, input hash, band radius, timings
//!
//! `predict` emits a predictions JSONL (a `meta` header line followed by
//! one `result` line per test point per method) plus its own manifest, and
//! optionally a re-sampling audit JSONL. `evaluate` joins predictions with
//! gold labels and writes `report.csv` / `report.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx::{fit_knn_from_lists, FitOptions, KnnModel};
use crate::cache;
use crate::composite::{fit_composite, CalibrationScores, CompositeModel};
use crate::conformal::{
    admit_sets, baseline_split_conformal, AdmitInputs, AdmitOptions, PredictionSetResult,
};
use crate::constraints::{build_contexts, estimate_band_radius, BandSpec, InstanceContext};
use crate::data::{DatasetBundle, RunConfig, Split};
use crate::error::{Error, Result};
use crate::index::{DistanceRow, Neighbor, VectorIndex};
use crate::resample::{choose_k_sample_report, resample, DepthSummary, ResampledCalibration};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Precomputed search structures shared by fitting and prediction.
struct Prep {
    cal_lists: Vec<Vec<Neighbor>>,
    test_lists: Vec<Vec<Neighbor>>,
    test_cal_dists: Vec<DistanceRow>,
}

impl Prep {
    fn compute(
        bundle: &DatasetBundle,
        k_neighbors: usize,
        cache_key: Option<(&Path, &str)>,
    ) -> Result<Prep> {
        let train_index = VectorIndex::from_instances(&bundle.train)?;
        let cal_queries: Vec<Vec<f64>> = bundle
            .calibration
            .iter()
            .map(|i| i.exemplar.clone())
            .collect();
        let test_queries: Vec<Vec<f64>> =
            bundle.test.iter().map(|i| i.exemplar.clone()).collect();

        // top-K against train, for calibration and test queries in order
        let topk_section = format!("train-top{k_neighbors}");
        let mut topk_lists: Option<Vec<Vec<Neighbor>>> = None;
        if let Some((dir, hash)) = cache_key {
            let path = cache::cache_path(dir, hash, &topk_section);
            if let Some(lists) = cache::load_neighbor_lists(&path, hash, k_neighbors)? {
                if lists.len() == cal_queries.len() + test_queries.len() {
                    topk_lists = Some(lists);
                }
            }
        }
        let topk_lists = match topk_lists {
            Some(lists) => lists,
            None => {
                let mut all = cal_queries.clone();
                all.extend(test_queries.iter().cloned());
                let lists = train_index.query_batch_topk(&all, k_neighbors)?;
                if let Some((dir, hash)) = cache_key {
                    let path = cache::cache_path(dir, hash, &topk_section);
                    cache::save_neighbor_lists(&path, hash, k_neighbors, &lists)?;
                }
                lists
            }
        };
        let (cal_lists, test_lists) = topk_lists.split_at(cal_queries.len());

        // every test point against the whole calibration set
        let cal_index = VectorIndex::from_instances(&bundle.calibration)?;
        let j_total = bundle.calibration.len();
        let mut all_rows: Option<Vec<DistanceRow>> = None;
        if let Some((dir, hash)) = cache_key {
            let path = cache::cache_path(dir, hash, "cal-all");
            if let Some(lists) = cache::load_neighbor_lists(&path, hash, j_total)? {
                if lists.len() == test_queries.len() {
                    all_rows = Some(
                        lists
                            .into_iter()
                            .map(|list| {
                                let mut dists = vec![0.0; j_total];
                                let mut order = Vec::with_capacity(j_total);
                                for n in list {
                                    dists[n.row] = n.distance;
                                    order.push(n.row as u32);
                                }
                                DistanceRow { dists, order }
                            })
                            .collect(),
                    );
                }
            }
        }
        let test_cal_dists = match all_rows {
            Some(rows) => rows,
            None => {
                let rows = cal_index.query_batch_all(&test_queries)?;
                if let Some((dir, hash)) = cache_key {
                    let lists: Vec<Vec<Neighbor>> = rows
                        .iter()
                        .map(|r| r.neighbors_sorted().collect())
                        .collect();
                    let path = cache::cache_path(dir, hash, "cal-all");
                    cache::save_neighbor_lists(&path, hash, j_total, &lists)?;
                }
                rows
            }
        };

        Ok(Prep {
            cal_lists: cal_lists.to_vec(),
            test_lists: test_lists.to_vec(),
            test_cal_dists,
        })
    }
}

/// A fully fitted pipeline, ready to construct prediction sets.
pub struct Pipeline {
    pub bundle: DatasetBundle,
    pub config: RunConfig,
    pub knn_model: KnnModel,
    pub mixture: CompositeModel,
    pub cal_contexts: Vec<InstanceContext>,
    pub test_contexts: Vec<InstanceContext>,
    pub cal_scores: CalibrationScores,
    pub test_cal_dists: Vec<DistanceRow>,
    pub band_spec: BandSpec,
}

impl Pipeline {
    /// Fit both models on a bundle. The mixture temperature is fitted
    /// against the (unlabeled) test exemplars, so the pipeline is
    /// transductive: the test batch shapes the models.
    pub fn fit(bundle: DatasetBundle, config: RunConfig) -> Result<Pipeline> {
        Self::fit_with_cache(bundle, config, None)
    }

    pub fn fit_with_cache(
        bundle: DatasetBundle,
        config: RunConfig,
        cache_key: Option<(&Path, &str)>,
    ) -> Result<Pipeline> {
        config.validate()?;
        if bundle.test.is_empty() {
            return Err(Error::InvalidData(
                "the pipeline is transductive and needs a non-empty test split".into(),
            ));
        }
        let prep = Prep::compute(&bundle, config.k_neighbors, cache_key)?;
        let knn_model =
            fit_knn_from_lists(&bundle, &config, &prep.cal_lists, &FitOptions::default())?;
        Self::assemble(bundle, config, knn_model, None, prep)
    }

    /// Rebuild a pipeline from previously fitted models (no re-fitting).
    pub fn from_models(
        bundle: DatasetBundle,
        config: RunConfig,
        knn_model: KnnModel,
        mixture: CompositeModel,
        cache_key: Option<(&Path, &str)>,
    ) -> Result<Pipeline> {
        config.validate()?;
        if bundle.test.is_empty() {
            return Err(Error::InvalidData(
                "prediction needs a non-empty test split".into(),
            ));
        }
        let prep = Prep::compute(&bundle, knn_model.k, cache_key)?;
        Self::assemble(bundle, config, knn_model, Some(mixture), prep)
    }

    fn assemble(
        bundle: DatasetBundle,
        config: RunConfig,
        knn_model: KnnModel,
        mixture: Option<CompositeModel>,
        prep: Prep,
    ) -> Result<Pipeline> {
        let cal_contexts =
            build_contexts(&bundle.calibration, &prep.cal_lists, &knn_model, &bundle.train)?;
        let mut test_contexts =
            build_contexts(&bundle.test, &prep.test_lists, &knn_model, &bundle.train)?;
        let cal_scores = CalibrationScores::from_outputs(
            &cal_contexts.iter().map(|c| c.knn.clone()).collect::<Vec<_>>(),
            bundle.num_classes,
        );

        let mixture = match mixture {
            Some(m) => m,
            None => {
                let targets: Vec<usize> = test_contexts.iter().map(|c| c.knn.pred).collect();
                // a single parameter converges in a few dozen steps; each
                // epoch is a full test-by-calibration pass, so keep the
                // budget tight
                let options = FitOptions {
                    learning_rate: 1.0,
                    max_epochs: 150,
                    patience: 10,
                };
                fit_composite(&cal_scores, &prep.test_cal_dists, &targets, config.seed, &options)?
            }
        };
        for (ctx, row) in test_contexts.iter_mut().zip(&prep.test_cal_dists) {
            ctx.composite = Some(mixture.forward(&cal_scores, row, None)?);
        }
        let band_spec = estimate_band_radius(&cal_contexts, config.delta)?;

        Ok(Pipeline {
            bundle,
            config,
            knn_model,
            mixture,
            cal_contexts,
            test_contexts,
            cal_scores,
            test_cal_dists: prep.test_cal_dists,
            band_spec,
        })
    }

    fn admit_inputs<'a>(&'a self, active: Option<&'a [u32]>, band_spec: BandSpec) -> AdmitInputs<'a> {
        AdmitInputs {
            cal_contexts: &self.cal_contexts,
            test_contexts: &self.test_contexts,
            band_spec,
            composite_model: &self.mixture,
            cal_scores: &self.cal_scores,
            test_cal_dists: &self.test_cal_dists,
            active_calibration: active,
        }
    }

    /// Concentration summary of the mixture weights over the test split.
    pub fn depth_summary(&self) -> Result<DepthSummary> {
        let outputs: Vec<_> = self
            .test_contexts
            .iter()
            .filter_map(|c| c.composite.clone())
            .collect();
        choose_k_sample_report(&outputs)
    }

    /// Construct per-method prediction sets for the test split.
    pub fn predict(&self, opts: &PredictOptions) -> Result<PredictOutput> {
        if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1), got {}",
                opts.alpha
            )));
        }
        let band_spec = match opts.delta {
            None => self.band_spec,
            Some(delta) => estimate_band_radius(&self.cal_contexts, delta)?,
        };
        let mut methods = Vec::new();
        methods.push(MethodResults {
            method: "conformal".into(),
            results: baseline_split_conformal(&self.cal_contexts, &self.test_contexts, opts.alpha)?,
        });

        let admit_opts = |use_h_guard: bool| AdmitOptions {
            alpha: opts.alpha,
            kappa: opts.kappa,
            use_h_guard,
        };
        let inputs = self.admit_inputs(None, band_spec);
        if opts.use_h_guard {
            methods.push(MethodResults {
                method: "admit".into(),
                results: admit_sets(&inputs, &admit_opts(true))?,
            });
        }
        methods.push(MethodResults {
            method: "admit_noh".into(),
            results: admit_sets(&inputs, &admit_opts(false))?,
        });

        let mut resampled = None;
        if opts.resample {
            let k_sample = opts.k_sample.ok_or_else(|| {
                Error::InvalidConfig("re-sampled runs require k_sample".into())
            })?;
            let rs = resample(&inputs, k_sample)?;
            let active_inputs = self.admit_inputs(Some(&rs.entries), band_spec);
            if opts.use_h_guard {
                methods.push(MethodResults {
                    method: "admit_resample".into(),
                    results: admit_sets(&active_inputs, &admit_opts(true))?,
                });
            }
            methods.push(MethodResults {
                method: "admit_resample_noh".into(),
                results: admit_sets(&active_inputs, &admit_opts(false))?,
            });
            resampled = Some(rs);
        }

        Ok(PredictOutput {
            methods,
            resampled,
            band_spec,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub alpha: f64,
    pub kappa: usize,
    /// Band radius multiplier; `None` keeps the fitted config's value.
    pub delta: Option<f64>,
    pub use_h_guard: bool,
    pub resample: bool,
    pub k_sample: Option<usize>,
}

impl PredictOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        PredictOptions {
            alpha: config.alpha,
            kappa: config.kappa,
            delta: None,
            use_h_guard: config.use_h_guard,
            resample: config.resample,
            k_sample: config.k_sample,
        }
    }
}

pub struct MethodResults {
    pub method: String,
    pub results: Vec<PredictionSetResult>,
}

pub struct PredictOutput {
    pub methods: Vec<MethodResults>,
    pub resampled: Option<ResampledCalibration>,
    pub band_spec: BandSpec,
}

impl PredictOutput {
    pub fn kappa_censored_fractions(&self) -> BTreeMap<String, f64> {
        self.methods
            .iter()
            .map(|m| {
                let n = m.results.len().max(1);
                let censored = m.results.iter().filter(|r| r.kappa_censored).count();
                (m.method.clone(), censored as f64 / n as f64)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Artifact files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelsFile {
    pub schema_version: u32,
    pub knn: KnnModel,
    pub mixture: CompositeModel,
}

/// Compact audit record for one calibration/test point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextRecord {
    pub id: String,
    pub split: Split,
    pub label: Option<usize>,
    pub d: f64,
    pub q: bool,
    pub nearest_train_id: String,
    pub nearest_train_label: usize,
    pub nearest_train_pred: usize,
    pub knn_pred: usize,
    pub knn_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_pred: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_depth: Option<usize>,
}

impl ContextRecord {
    fn from_context(ctx: &InstanceContext, split: Split, train_ids: &[String]) -> Self {
        ContextRecord {
            id: ctx.id.clone(),
            split,
            label: ctx.label,
            d: ctx.dist_to_train,
            q: ctx.q,
            nearest_train_id: train_ids[ctx.nearest_train.row].clone(),
            nearest_train_label: ctx.nearest_train_label,
            nearest_train_pred: ctx.nearest_train_pred,
            knn_pred: ctx.knn.pred,
            knn_probs: ctx.knn.probs.clone(),
            mix_pred: ctx.composite.as_ref().map(|m| m.pred),
            mix_probs: ctx.composite.as_ref().map(|m| m.probs.clone()),
            weight_depth: ctx.composite.as_ref().map(|m| m.cumulative_weight_depth),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
}

/// Everything needed to reproduce a run, plus non-reproducible timings.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub bundle_path: String,
    pub bundle_sha256: String,
    pub num_classes: usize,
    pub dim: usize,
    pub counts: SplitCounts,
    pub s_hat: f64,
    pub omega: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_fit: Option<crate::approx::FitMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_fit: Option<crate::approx::FitMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_censored_fraction: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_summary: Option<ResampleSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub timing_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampleSummary {
    pub k_sample: usize,
    pub total_entries: usize,
    pub distinct_entries: usize,
    pub duplicate_fraction: f64,
    pub admitted_fraction: f64,
}

impl ResampleSummary {
    pub fn from_resampled(rs: &ResampledCalibration, k_sample: usize) -> Self {
        let admitted = rs.admitted.iter().filter(|&&a| a).count();
        ResampleSummary {
            k_sample,
            total_entries: rs.len(),
            distinct_entries: rs.distinct(),
            duplicate_fraction: rs.duplicate_fraction,
            admitted_fraction: admitted as f64 / rs.admitted.len().max(1) as f64,
        }
    }
}

/// Header line of a predictions file.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionsMeta {
    #[serde(rename = "type")]
    pub kind: String,
    pub schema_version: u32,
    pub config: RunConfig,
    pub s_hat: f64,
    pub omega: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_agreement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_agreement: Option<f64>,
    pub methods: Vec<String>,
    pub kappa_censored_fraction: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_summary: Option<ResampleSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_summary: Option<DepthSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    #[serde(rename = "type")]
    kind: String,
    method: String,
    #[serde(flatten)]
    result: PredictionSetResult,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    w.write_all(text.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_contexts(path: &Path, pipeline: &Pipeline) -> Result<()> {
    let mut w = create(path)?;
    let train_ids: Vec<String> = pipeline.bundle.train.iter().map(|i| i.id.clone()).collect();
    let ioerr = |e| Error::io(path.display().to_string(), e);
    for ctx in &pipeline.cal_contexts {
        let rec = ContextRecord::from_context(ctx, Split::Calibration, &train_ids);
        writeln!(w, "{}", serde_json::to_string(&rec).unwrap()).map_err(ioerr)?;
    }
    for ctx in &pipeline.test_contexts {
        let rec = ContextRecord::from_context(ctx, Split::Test, &train_ids);
        writeln!(w, "{}", serde_json::to_string(&rec).unwrap()).map_err(ioerr)?;
    }
    w.flush().map_err(ioerr)
}

pub fn read_contexts(path: &Path) -> Result<Vec<ContextRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}

pub fn write_predictions(
    path: &Path,
    meta: &PredictionsMeta,
    methods: &[MethodResults],
) -> Result<()> {
    let mut w = create(path)?;
    let ioerr = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "{}", serde_json::to_string(meta).unwrap()).map_err(ioerr)?;
    for m in methods {
        for result in &m.results {
            let line = PredictionLine {
                kind: "result".into(),
                method: m.method.clone(),
                result: result.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).unwrap()).map_err(ioerr)?;
        }
    }
    w.flush().map_err(ioerr)
}

pub fn read_predictions(path: &Path) -> Result<(PredictionsMeta, Vec<MethodResults>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |lineno: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line: lineno + 1,
        message,
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::InvalidData(format!("{}: empty predictions file", path.display())))?;
    let first = first.map_err(|e| Error::io(path.display().to_string(), e))?;
    let meta: PredictionsMeta =
        serde_json::from_str(&first).map_err(|e| parse_err(0, e.to_string()))?;
    if meta.kind != "meta" {
        return Err(Error::InvalidData(format!(
            "{}: first line must be the meta header",
            path.display()
        )));
    }
    let mut by_method: BTreeMap<String, Vec<PredictionSetResult>> = BTreeMap::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        by_method.entry(parsed.method).or_default().push(parsed.result);
    }
    // preserve the emission order recorded in the header
    let mut methods = Vec::new();
    for name in &meta.methods {
        if let Some(results) = by_method.remove(name) {
            methods.push(MethodResults {
                method: name.clone(),
                results,
            });
        }
    }
    for (name, results) in by_method {
        methods.push(MethodResults {
            method: name,
            results,
        });
    }
    Ok((meta, methods))
}

pub fn write_resample_audit(
    path: &Path,
    pipeline: &Pipeline,
    rs: &ResampledCalibration,
) -> Result<()> {
    #[derive(Serialize)]
    struct AuditLine<'a> {
        test_id: &'a str,
        admitted: bool,
        contributed: Vec<&'a str>,
    }
    let mut w = create(path)?;
    let ioerr = |e| Error::io(path.display().to_string(), e);
    for (i, ctx) in pipeline.test_contexts.iter().enumerate() {
        let line = AuditLine {
            test_id: &ctx.id,
            admitted: rs.admitted[i],
            contributed: rs.contributions[i]
                .iter()
                .map(|&r| pipeline.cal_contexts[r as usize].id.as_str())
                .collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&line).unwrap()).map_err(ioerr)?;
    }
    w.flush().map_err(ioerr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthSpec;

    fn small_bundle(seed: u64) -> DatasetBundle {
        let spec = SynthSpec {
            logit_noise: 0.8,
            logit_scale: 2.0,
            ..SynthSpec::axis_clusters(2, 6, 3.0, 1.0, (150, 200, 100), seed)
        };
        crate::synth::generate(&spec).unwrap()
    }

    fn small_config() -> RunConfig {
        RunConfig {
            kappa: 20,
            k_neighbors: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn fit_and_predict_produce_consistent_sets() {
        let pipeline = Pipeline::fit(small_bundle(3), small_config()).unwrap();
        assert!(pipeline.band_spec.omega > 0.0);
        let out = pipeline
            .predict(&PredictOptions::from_config(&pipeline.config))
            .unwrap();
        let names: Vec<&str> = out.methods.iter().map(|m| m.method.as_str()).collect();
        assert_eq!(names, vec!["conformal", "admit", "admit_noh"]);
        for m in &out.methods {
            assert_eq!(m.results.len(), pipeline.test_contexts.len());
            for r in &m.results {
                assert!(r.contains(r.point_pred));
                for c in &r.c_hat {
                    assert!(r.refined_contains(*c));
                }
                if r.kappa_censored {
                    assert_eq!(r.c_hat.len(), pipeline.bundle.num_classes);
                }
            }
        }
    }

    #[test]
    fn resample_method_set_and_summary() {
        let bundle = small_bundle(5);
        let pipeline = Pipeline::fit(bundle, small_config()).unwrap();
        let mut opts = PredictOptions::from_config(&pipeline.config);
        opts.resample = true;
        opts.k_sample = Some(5);
        let out = pipeline.predict(&opts).unwrap();
        let names: Vec<&str> = out.methods.iter().map(|m| m.method.as_str()).collect();
        assert_eq!(
            names,
            vec!["conformal", "admit", "admit_noh", "admit_resample", "admit_resample_noh"]
        );
        let rs = out.resampled.as_ref().unwrap();
        let summary = ResampleSummary::from_resampled(rs, 5);
        assert!(summary.admitted_fraction > 0.0);
        assert!(summary.total_entries >= summary.distinct_entries);

        // resampling without k_sample is a config error
        let mut bad = PredictOptions::from_config(&pipeline.config);
        bad.resample = true;
        bad.k_sample = None;
        assert!(pipeline.predict(&bad).is_err());
    }

    #[test]
    fn artifact_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::fit(small_bundle(9), small_config()).unwrap();

        let models_path = dir.path().join("models.json");
        write_json(
            &models_path,
            &ModelsFile {
                schema_version: ARTIFACT_SCHEMA_VERSION,
                knn: pipeline.knn_model.clone(),
                mixture: pipeline.mixture.clone(),
            },
        )
        .unwrap();
        let models: ModelsFile = read_json(&models_path).unwrap();
        assert_eq!(models.knn.beta, pipeline.knn_model.beta);
        assert_eq!(models.mixture.tau, pipeline.mixture.tau);

        let ctx_path = dir.path().join("contexts.jsonl");
        write_contexts(&ctx_path, &pipeline).unwrap();
        let records = read_contexts(&ctx_path).unwrap();
        assert_eq!(
            records.len(),
            pipeline.cal_contexts.len() + pipeline.test_contexts.len()
        );
        assert!(records
            .iter()
            .filter(|r| r.split == Split::Test)
            .all(|r| r.mix_pred.is_some()));

        let out = pipeline
            .predict(&PredictOptions::from_config(&pipeline.config))
            .unwrap();
        let meta = PredictionsMeta {
            kind: "meta".into(),
            schema_version: ARTIFACT_SCHEMA_VERSION,
            config: pipeline.config.clone(),
            s_hat: out.band_spec.s_hat,
            omega: out.band_spec.omega,
            knn_agreement: pipeline.knn_model.meta.as_ref().map(|m| m.agreement),
            mixture_agreement: pipeline.mixture.meta.as_ref().map(|m| m.agreement),
            methods: out.methods.iter().map(|m| m.method.clone()).collect(),
            kappa_censored_fraction: out.kappa_censored_fractions(),
            resample_summary: None,
            depth_summary: Some(pipeline.depth_summary().unwrap()),
        };
        let pred_path = dir.path().join("predictions.jsonl");
        write_predictions(&pred_path, &meta, &out.methods).unwrap();
        let (meta2, methods2) = read_predictions(&pred_path).unwrap();
        assert_eq!(meta2.methods, meta.methods);
        assert_eq!(methods2.len(), out.methods.len());
        assert_eq!(methods2[0].results.len(), out.methods[0].results.len());
        assert_eq!(methods2[1].results[3].c_hat, out.methods[1].results[3].c_hat);
    }

    #[test]
    fn neighbor_cache_round_trip_matches_uncached_run() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = small_bundle(13);
        let config = small_config();

        let cold = Pipeline::fit_with_cache(
            bundle.clone(),
            config.clone(),
            Some((dir.path(), "hash-xyz")),
        )
        .unwrap();
        // second run hits the cache files written by the first
        let warm = Pipeline::fit_with_cache(bundle, config, Some((dir.path(), "hash-xyz")))
            .unwrap();
        assert_eq!(cold.knn_model.beta, warm.knn_model.beta);
        assert_eq!(cold.mixture.tau, warm.mixture.tau);
        for (a, b) in cold.test_contexts.iter().zip(&warm.test_contexts) {
            assert_eq!(a.dist_to_train.to_bits(), b.dist_to_train.to_bits());
            assert_eq!(a.q, b.q);
        }
        assert!(dir
            .path()
            .read_dir()
            .unwrap()
            .any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".knncache")));
    }
}
