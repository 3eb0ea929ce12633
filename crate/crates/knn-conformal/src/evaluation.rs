//! Stratified coverage and cardinality reporting, plus a leave-one-out
//! calibration audit.
//!
//! Coverage is the fraction of points whose gold label landed in the set;
//! it is reported marginally and stratified by class, distance bin,
//! cardinality, the match-constraint flag, the sample-size censoring flag,
//! and the class-by-bin / class-by-cardinality cross products. The same
//! machinery runs over both set variants. Rows for empty strata are
//! omitted; within each stratification the emitted fractions sum to 1.
//!
//! Reports serialize to CSV and JSON from one shared row model with a
//! fixed, documented column order, so outputs diff cleanly across runs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::fit_knn_from_lists;
use crate::composite::{fit_composite, CalibrationScores, CompositeModel};
use crate::conformal::{
    admit_sets, baseline_split_conformal, AdmitInputs, AdmitOptions, PredictionSetResult,
};
use crate::constraints::{
    assign_bin, build_contexts, distance_quantile_bins, estimate_band_radius, InstanceContext,
};
use crate::data::{DatasetBundle, RunConfig};
use crate::error::{Error, Result};
use crate::index::{DistanceRow, VectorIndex};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// CSV column order: `method,set,stratum_kind,stratum_value,count,fraction,
/// coverage,mean_cardinality,point_accuracy`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// Which set variant the row describes: `c_hat` or `c_hat_a`.
    pub set: String,
    pub stratum_kind: String,
    pub stratum_value: String,
    pub count: usize,
    /// Share of evaluated points in this stratum.
    pub fraction: f64,
    pub coverage: f64,
    pub mean_cardinality: f64,
    pub point_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StratifiedReport {
    pub rows: Vec<ReportRow>,
}

impl StratifiedReport {
    pub fn merge(reports: impl IntoIterator<Item = StratifiedReport>) -> StratifiedReport {
        StratifiedReport {
            rows: reports.into_iter().flat_map(|r| r.rows).collect(),
        }
    }

    /// Rows for one method/set/stratification.
    pub fn select(&self, method: &str, set: &str, kind: &str) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.set == set && r.stratum_kind == kind)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,set,stratum_kind,stratum_value,count,fraction,coverage,mean_cardinality,point_accuracy\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.method,
                r.set,
                r.stratum_kind,
                r.stratum_value,
                r.count,
                r.fraction,
                r.coverage,
                r.mean_cardinality,
                r.point_accuracy
            ));
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            rows: &'a [ReportRow],
        }
        serde_json::to_string_pretty(&Doc {
            schema_version: REPORT_SCHEMA_VERSION,
            rows: &self.rows,
        })
        .expect("report serializes")
    }
}

/// The per-point facts evaluation needs: gold label plus the `(d, q)`
/// stratification signature. Convertible from a full [`InstanceContext`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalContext {
    pub id: String,
    pub label: Option<usize>,
    pub dist_to_train: f64,
    pub q: bool,
}

impl From<&InstanceContext> for EvalContext {
    fn from(ctx: &InstanceContext) -> Self {
        EvalContext {
            id: ctx.id.clone(),
            label: ctx.label,
            dist_to_train: ctx.dist_to_train,
            q: ctx.q,
        }
    }
}

const KIND_ORDER: [&str; 8] = [
    "all",
    "class",
    "distance_bin",
    "cardinality",
    "q",
    "kappa_censored",
    "class_x_bin",
    "class_x_cardinality",
];

#[derive(Default, Clone)]
struct Acc {
    count: usize,
    covered: usize,
    cardinality: usize,
    point_correct: usize,
}

impl Acc {
    fn add(&mut self, covered: bool, card: usize, correct: bool) {
        self.count += 1;
        self.covered += covered as usize;
        self.cardinality += card;
        self.point_correct += correct as usize;
    }
}

/// Evaluate one method's results against gold labels.
///
/// `contexts` provides, per test id, the gold label and the `(d, q)`
/// signature used for stratification; every result id must resolve to a
/// labeled context. `bin_boundaries` come from
/// [`distance_quantile_bins`] over the calibration set.
pub fn evaluate(
    method: &str,
    results: &[PredictionSetResult],
    contexts: &[EvalContext],
    bin_boundaries: &[f64],
) -> Result<StratifiedReport> {
    let by_id: BTreeMap<&str, &EvalContext> =
        contexts.iter().map(|c| (c.id.as_str(), c)).collect();
    let n = results.len();
    if n == 0 {
        return Err(Error::InvalidData("no results to evaluate".into()));
    }

    let mut rows = Vec::new();
    for set_name in ["c_hat", "c_hat_a"] {
        // (kind index, numeric key) -> accumulator
        let mut acc: BTreeMap<(usize, (u32, u32)), Acc> = BTreeMap::new();
        for res in results {
            let ctx = by_id.get(res.id.as_str()).ok_or_else(|| {
                Error::InvalidData(format!("no context for prediction id `{}`", res.id))
            })?;
            let label = ctx.label.ok_or_else(|| Error::MissingLabel {
                id: res.id.clone(),
                split: "test",
            })?;
            let set = if set_name == "c_hat" {
                &res.c_hat
            } else {
                &res.c_hat_a
            };
            let covered = set.binary_search(&label).is_ok();
            let card = set.len();
            let correct = res.point_pred == label;
            let bin = assign_bin(ctx.dist_to_train, bin_boundaries);

            let strata: [(usize, (u32, u32)); 8] = [
                (0, (0, 0)),
                (1, (label as u32, 0)),
                (2, (bin as u32, 0)),
                (3, (card as u32, 0)),
                (4, (ctx.q as u32, 0)),
                (5, (res.kappa_censored as u32, 0)),
                (6, (label as u32, bin as u32)),
                (7, (label as u32, card as u32)),
            ];
            for key in strata {
                acc.entry(key).or_default().add(covered, card, correct);
            }
        }
        for ((kind_idx, key), a) in &acc {
            let kind = KIND_ORDER[*kind_idx];
            let value = match kind {
                "all" => "all".to_string(),
                "q" | "kappa_censored" => if key.0 == 1 { "true" } else { "false" }.to_string(),
                "class_x_bin" | "class_x_cardinality" => format!("{}|{}", key.0, key.1),
                _ => key.0.to_string(),
            };
            rows.push(ReportRow {
                method: method.to_string(),
                set: set_name.to_string(),
                stratum_kind: kind.to_string(),
                stratum_value: value,
                count: a.count,
                fraction: a.count as f64 / n as f64,
                coverage: a.covered as f64 / a.count as f64,
                mean_cardinality: a.cardinality as f64 / a.count as f64,
                point_accuracy: a.point_correct as f64 / a.count as f64,
            });
        }
    }
    Ok(StratifiedReport { rows })
}

// ---------------------------------------------------------------------------
// Leave-one-out calibration audit
// ---------------------------------------------------------------------------

/// Results of treating each calibration point as a test point against the
/// remaining calibration set. Useful for judging whether the calibration
/// set is large enough before trusting the banded sets on real test data.
#[derive(Debug)]
pub struct LooAudit {
    pub baseline: Vec<PredictionSetResult>,
    pub banded: Vec<PredictionSetResult>,
    pub report: StratifiedReport,
}

/// Run the audit. The approximation models are fitted once on the full
/// bundle; thresholds are rebuilt per point from the remaining calibration
/// set, and the held-out point never participates in its own bands or
/// mixture.
pub fn loo_calibration_audit(bundle: &DatasetBundle, config: &RunConfig) -> Result<LooAudit> {
    config.validate()?;
    if bundle.calibration.len() < 2 {
        return Err(Error::InvalidData(
            "leave-one-out audit needs at least 2 calibration instances".into(),
        ));
    }
    let train_index = VectorIndex::from_instances(&bundle.train)?;
    let cal_queries: Vec<Vec<f64>> = bundle
        .calibration
        .iter()
        .map(|i| i.exemplar.clone())
        .collect();
    let cal_lists = train_index.query_batch_topk(&cal_queries, config.k_neighbors)?;
    let knn_model = fit_knn_from_lists(bundle, config, &cal_lists, &Default::default())?;
    let cal_contexts = build_contexts(&bundle.calibration, &cal_lists, &knn_model, &bundle.train)?;
    let band_spec = estimate_band_radius(&cal_contexts, config.delta)?;
    let bins = distance_quantile_bins(&cal_contexts, 4)?;

    // Calibration-vs-calibration distances with the self column pushed to
    // an unreachable distance, so every mixture naturally excludes self.
    let cal_index = VectorIndex::from_instances(&bundle.calibration)?;
    let mut dist_rows = cal_index.query_batch_all(&cal_queries)?;
    let max_d = dist_rows
        .iter()
        .flat_map(|r| r.dists.iter())
        .fold(0.0f64, |a, &b| a.max(b));
    let sentinel = (max_d + 1.0) * 1e6;
    for (j, row) in dist_rows.iter_mut().enumerate() {
        row.dists[j] = sentinel;
        row.order.retain(|&r| r as usize != j);
        row.order.push(j as u32);
    }

    let table = CalibrationScores::from_outputs(
        &cal_contexts.iter().map(|c| c.knn.clone()).collect::<Vec<_>>(),
        bundle.num_classes,
    );
    let targets: Vec<usize> = cal_contexts.iter().map(|c| c.knn.pred).collect();
    let mixture = fit_composite(&table, &dist_rows, &targets, config.seed, &Default::default())?;

    let j_total = cal_contexts.len();
    let per_point: Vec<(PredictionSetResult, PredictionSetResult)> = (0..j_total)
        .into_par_iter()
        .map(|j| loo_one(j, bundle, &cal_contexts, &dist_rows, &mixture, band_spec, config))
        .collect::<Result<_>>()?;

    let (baseline, banded): (Vec<_>, Vec<_>) = per_point.into_iter().unzip();
    let eval_contexts: Vec<EvalContext> = cal_contexts.iter().map(EvalContext::from).collect();
    let report = StratifiedReport::merge([
        evaluate("conformal", &baseline, &eval_contexts, &bins)?,
        evaluate("admit", &banded, &eval_contexts, &bins)?,
    ]);
    Ok(LooAudit {
        baseline,
        banded,
        report,
    })
}

fn loo_one(
    j: usize,
    bundle: &DatasetBundle,
    cal_contexts: &[InstanceContext],
    dist_rows: &[DistanceRow],
    mixture: &CompositeModel,
    band_spec: crate::constraints::BandSpec,
    config: &RunConfig,
) -> Result<(PredictionSetResult, PredictionSetResult)> {
    // Remaining calibration set, with the distance row re-indexed to it.
    let cal_minus: Vec<InstanceContext> = cal_contexts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != j)
        .map(|(_, c)| c.clone())
        .collect();
    let dists: Vec<f64> = dist_rows[j]
        .dists
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != j)
        .map(|(_, &d)| d)
        .collect();
    let mut order: Vec<u32> = (0..dists.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        dists[a as usize]
            .total_cmp(&dists[b as usize])
            .then(a.cmp(&b))
    });
    let row_minus = DistanceRow { dists, order };
    let table_minus = CalibrationScores::from_outputs(
        &cal_minus.iter().map(|c| c.knn.clone()).collect::<Vec<_>>(),
        bundle.num_classes,
    );

    let mut held_out = cal_contexts[j].clone();
    held_out.composite = Some(mixture.forward(&table_minus, &row_minus, None)?);

    let test_slice = [held_out];
    let baseline = baseline_split_conformal(&cal_minus, &test_slice, config.alpha)?
        .pop()
        .expect("one result per test point");

    let inputs = AdmitInputs {
        cal_contexts: &cal_minus,
        test_contexts: &test_slice,
        band_spec,
        composite_model: mixture,
        cal_scores: &table_minus,
        test_cal_dists: std::slice::from_ref(&row_minus),
        active_calibration: None,
    };
    let banded = admit_sets(
        &inputs,
        &AdmitOptions {
            alpha: config.alpha,
            kappa: config.kappa,
            use_h_guard: config.use_h_guard,
        },
    )?
    .pop()
    .expect("one result per test point");

    Ok((baseline, banded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::ThresholdTable;
    use crate::data::{Instance, Split};
    use crate::synth::SynthSpec;

    fn ctx(id: &str, label: usize, d: f64, q: bool) -> EvalContext {
        EvalContext {
            id: id.into(),
            label: Some(label),
            dist_to_train: d,
            q,
        }
    }

    fn result(
        id: &str,
        c_hat: Vec<usize>,
        c_hat_a: Vec<usize>,
        point_pred: usize,
        censored: bool,
    ) -> PredictionSetResult {
        PredictionSetResult {
            id: id.into(),
            c_hat,
            c_hat_a,
            point_pred,
            h_flag: true,
            kappa_censored: censored,
            band_size: 10,
            thresholds: ThresholdTable {
                tau: vec![0.0, 0.0],
                sizes: vec![5, 5],
                distinct: vec![5, 5],
                fallback: vec![censored, censored],
            },
            thresholds_refined: None,
        }
    }

    #[test]
    fn full_sets_cover_every_stratum() {
        let contexts: Vec<EvalContext> = (0..8)
            .map(|i| ctx(&format!("t{i}"), i % 2, i as f64, i % 3 == 0))
            .collect();
        let results: Vec<PredictionSetResult> = contexts
            .iter()
            .map(|c| result(&c.id, vec![0, 1], vec![0, 1], 0, true))
            .collect();
        let report = evaluate("m", &results, &contexts, &[3.5]).unwrap();
        for row in &report.rows {
            assert_eq!(row.coverage, 1.0, "stratum {:?}", row);
            assert_eq!(row.mean_cardinality, 2.0);
        }
    }

    #[test]
    fn correct_singletons_have_unit_coverage_and_cardinality() {
        let contexts: Vec<EvalContext> = (0..6)
            .map(|i| ctx(&format!("t{i}"), i % 2, 1.0, true))
            .collect();
        let results: Vec<PredictionSetResult> = contexts
            .iter()
            .map(|c| {
                let y = c.label.unwrap();
                result(&c.id, vec![y], vec![y], y, false)
            })
            .collect();
        let report = evaluate("m", &results, &contexts, &[]).unwrap();
        let all = &report.select("m", "c_hat", "all")[0];
        assert_eq!(all.coverage, 1.0);
        assert_eq!(all.mean_cardinality, 1.0);
        assert_eq!(all.point_accuracy, 1.0);
    }

    #[test]
    fn six_point_report_matches_manual_tabulation() {
        // labels:     0    0    1    1    1    0
        // d:          1    5    1    5    5    1   (boundary at 3 -> bins 0/1)
        // q:          T    T    F    T    F    T
        // c_hat:     {0} {0,1} {0}  {1}  {0,1} {1}
        // covered:    y    y    n    y    y     n
        // pred:       0    0    0    1    1     1   correct: y y n y y n
        let contexts = vec![
            ctx("a", 0, 1.0, true),
            ctx("b", 0, 5.0, true),
            ctx("c", 1, 1.0, false),
            ctx("d", 1, 5.0, true),
            ctx("e", 1, 5.0, false),
            ctx("f", 0, 1.0, true),
        ];
        let results = vec![
            result("a", vec![0], vec![0], 0, false),
            result("b", vec![0, 1], vec![0, 1], 0, false),
            result("c", vec![0], vec![0], 0, false),
            result("d", vec![1], vec![1], 1, false),
            result("e", vec![0, 1], vec![0, 1], 1, false),
            result("f", vec![1], vec![1], 1, false),
        ];
        let report = evaluate("m", &results, &contexts, &[3.0]).unwrap();

        let all = &report.select("m", "c_hat", "all")[0];
        assert_eq!(all.count, 6);
        assert!((all.coverage - 4.0 / 6.0).abs() < 1e-12);
        assert!((all.mean_cardinality - 8.0 / 6.0).abs() < 1e-12);
        assert!((all.point_accuracy - 4.0 / 6.0).abs() < 1e-12);

        let classes = report.select("m", "c_hat", "class");
        assert_eq!(classes.len(), 2);
        // class 0: points a, b, f -> covered a, b; accuracy a, b
        assert_eq!(classes[0].count, 3);
        assert!((classes[0].coverage - 2.0 / 3.0).abs() < 1e-12);
        assert!((classes[0].point_accuracy - 2.0 / 3.0).abs() < 1e-12);
        // class 1: points c, d, e -> covered d, e
        assert!((classes[1].coverage - 2.0 / 3.0).abs() < 1e-12);

        let bins = report.select("m", "c_hat", "distance_bin");
        // bin 0: a, c, f (d=1); bin 1: b, d, e (d=5)
        assert_eq!(bins[0].count, 3);
        assert!((bins[0].coverage - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bins[1].count, 3);
        assert!((bins[1].coverage - 1.0).abs() < 1e-12);

        let cards = report.select("m", "c_hat", "cardinality");
        // |C|=1: a, c, d, f (coverage 2/4); |C|=2: b, e (coverage 1)
        assert_eq!(cards[0].stratum_value, "1");
        assert_eq!(cards[0].count, 4);
        assert!((cards[0].coverage - 0.5).abs() < 1e-12);
        assert_eq!(cards[1].count, 2);
        assert_eq!(cards[1].coverage, 1.0);

        let qs = report.select("m", "c_hat", "q");
        // q=false: c, e (coverage 1/2); q=true: a, b, d, f (coverage 3/4)
        assert_eq!(qs[0].stratum_value, "false");
        assert!((qs[0].coverage - 0.5).abs() < 1e-12);
        assert!((qs[1].coverage - 0.75).abs() < 1e-12);

        let cross = report.select("m", "c_hat", "class_x_bin");
        // (0,0): a, f -> 1/2; (0,1): b -> 1; (1,0): c -> 0; (1,1): d, e -> 1
        assert_eq!(cross.len(), 4);
        assert_eq!(cross[0].stratum_value, "0|0");
        assert!((cross[0].coverage - 0.5).abs() < 1e-12);
        assert_eq!(cross[2].stratum_value, "1|0");
        assert_eq!(cross[2].coverage, 0.0);
    }

    #[test]
    fn fractions_partition_and_coverage_aggregates() {
        let contexts: Vec<EvalContext> = (0..37)
            .map(|i| ctx(&format!("t{i}"), i % 2, (i % 7) as f64, i % 3 == 0))
            .collect();
        let results: Vec<PredictionSetResult> = contexts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let set = if i % 4 == 0 { vec![0, 1] } else { vec![i % 2] };
                result(&c.id, set.clone(), set, i % 2, i % 5 == 0)
            })
            .collect();
        let report = evaluate("m", &results, &contexts, &[2.0, 4.0]).unwrap();

        let all = &report.select("m", "c_hat", "all")[0];
        for kind in ["class", "distance_bin", "cardinality", "q", "kappa_censored"] {
            let rows = report.select("m", "c_hat", kind);
            let total_fraction: f64 = rows.iter().map(|r| r.fraction).sum();
            assert!(
                (total_fraction - 1.0).abs() < 1e-9,
                "{kind} fractions sum to {total_fraction}"
            );
            let weighted: f64 = rows.iter().map(|r| r.coverage * r.count as f64).sum();
            assert!(
                (weighted / all.count as f64 - all.coverage).abs() < 1e-9,
                "{kind} coverage aggregation"
            );
        }
    }

    #[test]
    fn report_is_independent_of_result_order() {
        let contexts: Vec<EvalContext> = (0..12)
            .map(|i| ctx(&format!("t{i}"), i % 2, i as f64, i % 2 == 0))
            .collect();
        let mut results: Vec<PredictionSetResult> = contexts
            .iter()
            .enumerate()
            .map(|(i, c)| result(&c.id, vec![i % 2], vec![i % 2], 0, false))
            .collect();
        let forward = evaluate("m", &results, &contexts, &[5.0]).unwrap();
        results.reverse();
        let reversed = evaluate("m", &results, &contexts, &[5.0]).unwrap();
        assert_eq!(forward.rows, reversed.rows);
        assert_eq!(forward.to_csv(), reversed.to_csv());
    }

    #[test]
    fn missing_label_is_an_error() {
        let mut c = ctx("t0", 0, 1.0, true);
        c.label = None;
        let results = vec![result("t0", vec![0], vec![0], 0, false)];
        assert!(evaluate("m", &results, &[c], &[]).is_err());
    }

    // -- leave-one-out audit --------------------------------------------------

    fn two_point_bundle() -> DatasetBundle {
        let mk = |id: &str, split, label: usize, x: f64| Instance {
            id: id.into(),
            split,
            label: Some(label),
            logits: Some(vec![-x, x]),
            exemplar: vec![x, 0.0],
        };
        DatasetBundle {
            num_classes: 2,
            dim: 2,
            train: vec![
                mk("tr0", Split::Train, 0, -1.0),
                mk("tr1", Split::Train, 1, 1.0),
            ],
            calibration: vec![
                mk("ca0", Split::Calibration, 0, -1.0),
                mk("ca1", Split::Calibration, 1, 1.0),
            ],
            test: vec![],
            label_names: None,
        }
    }

    #[test]
    fn audit_runs_on_smallest_legal_calibration() {
        let config = RunConfig {
            k_neighbors: 1,
            ..RunConfig::default()
        };
        let audit = loo_calibration_audit(&two_point_bundle(), &config).unwrap();
        assert_eq!(audit.baseline.len(), 2);
        assert_eq!(audit.banded.len(), 2);
        // remainder of size 1 is below any reasonable kappa: censored
        assert!(audit.banded.iter().all(|r| r.kappa_censored));
        assert!(!audit.report.rows.is_empty());
    }

    #[test]
    fn duplicated_calibration_points_get_identical_outcomes() {
        let mut bundle = two_point_bundle();
        // four identical copies of the same point, two per class
        bundle.calibration = vec![
            bundle.calibration[0].clone(),
            bundle.calibration[0].clone(),
            bundle.calibration[1].clone(),
            bundle.calibration[1].clone(),
        ];
        for (i, inst) in bundle.calibration.iter_mut().enumerate() {
            inst.id = format!("ca{i}");
        }
        let config = RunConfig {
            k_neighbors: 1,
            kappa: 1,
            ..RunConfig::default()
        };
        let audit = loo_calibration_audit(&bundle, &config).unwrap();
        for pair in [(0usize, 1usize), (2, 3)] {
            let a = &audit.banded[pair.0];
            let b = &audit.banded[pair.1];
            assert_eq!(a.c_hat, b.c_hat);
            assert_eq!(a.c_hat_a, b.c_hat_a);
            assert_eq!(a.kappa_censored, b.kappa_censored);
            assert_eq!(a.h_flag, b.h_flag);
        }
    }

    #[test]
    fn loo_marginal_coverage_tracks_the_target_on_exchangeable_data() {
        // cluster overlap is tuned so the approximation's accuracy sits
        // below 1 - alpha; otherwise the always-included point prediction
        // pushes coverage above the quantile level
        let spec = SynthSpec {
            logit_noise: 1.0,
            logit_scale: 2.0,
            ..SynthSpec::axis_clusters(2, 8, 1.6, 1.0, (300, 400, 1), 11)
        };
        let bundle = crate::synth::generate(&spec).unwrap();
        let config = RunConfig {
            alpha: 0.1,
            kappa: 40,
            k_neighbors: 10,
            ..RunConfig::default()
        };
        let audit = loo_calibration_audit(&bundle, &config).unwrap();
        let all = &audit.report.select("conformal", "c_hat", "all")[0];
        assert!(
            (all.coverage - 0.9).abs() <= 0.03,
            "LOO split-conformal coverage {}",
            all.coverage
        );
        let banded = &audit.report.select("admit", "c_hat", "all")[0];
        assert!(banded.coverage >= 0.85, "banded LOO coverage {}", banded.coverage);
    }
}
