//! Quantile thresholds and prediction-set construction.
//!
//! Three set constructors live here:
//!
//! * [`baseline_split_conformal`]: one global threshold from all calibration
//!   nonconformity scores; the plain split-conformal reference.
//! * [`admit_sets`]: per-label thresholds computed inside each test point's
//!   distance band, guarded by a minimum per-label sample size `kappa` and
//!   (optionally) the prediction-match heuristic [`heuristic_h`]. This
//!   yields a unique threshold per label *per test point*.
//! * the composition-conditioned refinement, also in [`admit_sets`]: the
//!   band is narrowed to calibration points whose own calibration-side set
//!   equals the test point's set, and thresholds are recomputed on that
//!   stratum (falling back per label when it is too small).
//!
//! Scores are `s = 1 - p_true`. Calibration-side scores always come from
//! the plain KNN probabilities; test-side membership checks use the
//! calibration-mixture probabilities. That asymmetry is deliberate: the
//! mixture expresses the test output on the calibration scale.
//!
//! The nonconformity quantile is the `ceil((J+1)(1-alpha))`-th smallest
//! score, clamped to the sample size. Set membership uses `>=` so ties at
//! the threshold are admitted. The point prediction is always included,
//! and the refined set is a superset of the banded set by construction.
//!
//! When the calibration side is a re-sampled multiset, duplicates re-weight
//! the quantiles, but `kappa` counts *distinct* calibration points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite::{CalibrationScores, CompositeModel};
use crate::constraints::{BandSpec, InstanceContext};
use crate::error::{Error, Result};
use crate::index::DistanceRow;

/// Per-class thresholds plus the sample sizes behind them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// Per-class probability threshold.
    pub tau: Vec<f64>,
    /// Per-class score-list length (multiset entries when re-sampled).
    pub sizes: Vec<usize>,
    /// Per-class distinct calibration points behind the list.
    pub distinct: Vec<usize>,
    /// Per-class flag: the subset was below `kappa` and the default
    /// threshold was used instead.
    pub fallback: Vec<bool>,
}

/// One prediction set (both variants) for one test point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSetResult {
    pub id: String,
    /// Banded label-conditional set.
    pub c_hat: Vec<usize>,
    /// Composition-conditioned refinement; always a superset of `c_hat`.
    pub c_hat_a: Vec<usize>,
    pub point_pred: usize,
    /// Prediction-match heuristic for this point.
    pub h_flag: bool,
    /// Some per-label band fell below `kappa`; the set reverted to full
    /// cardinality.
    pub kappa_censored: bool,
    /// Band members used for thresholds (multiset count when re-sampled).
    pub band_size: usize,
    pub thresholds: ThresholdTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds_refined: Option<ThresholdTable>,
}

impl PredictionSetResult {
    pub fn contains(&self, label: usize) -> bool {
        self.c_hat.binary_search(&label).is_ok()
    }

    pub fn refined_contains(&self, label: usize) -> bool {
        self.c_hat_a.binary_search(&label).is_ok()
    }
}

/// Split-conformal threshold over a list of nonconformity scores.
///
/// Returns the default `tau_default` (flagged) when fewer than `kappa`
/// scores are available. Otherwise the threshold is
/// `1 - (m-th smallest score)` with `m = ceil((J+1)(1-alpha))` clamped to
/// `J`.
pub fn conformal_threshold(
    scores: &[f64],
    alpha: f64,
    kappa: usize,
    tau_default: f64,
) -> Result<(f64, bool)> {
    conformal_threshold_distinct(scores, scores.len(), alpha, kappa, tau_default)
}

/// As [`conformal_threshold`], but the `kappa` guard checks `distinct`
/// rather than the score-list length. Re-sampled calibration multisets pass
/// the duplicated scores here while counting each calibration point once.
pub fn conformal_threshold_distinct(
    scores: &[f64],
    distinct: usize,
    alpha: f64,
    kappa: usize,
    tau_default: f64,
) -> Result<(f64, bool)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    if distinct < kappa {
        return Ok((tau_default, true));
    }
    if scores.is_empty() {
        return Err(Error::InvalidData(
            "conformal threshold over an empty score list with kappa = 0".into(),
        ));
    }
    let j = scores.len();
    let m = (((j + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    let m = m.clamp(1, j);
    let mut sorted = scores.to_vec();
    // selection, not a full sort: we only need the m-th smallest
    let (_, &mut quantile, _) = sorted.select_nth_unstable_by(m - 1, |a, b| a.total_cmp(b));
    Ok((1.0 - quantile, false))
}

/// Prediction-match heuristic: the mixture prediction agrees with the plain
/// KNN prediction and with the band-constrained mixture prediction, and the
/// match constraint holds. An empty band (no constrained prediction) fails
/// the heuristic.
pub fn heuristic_h(
    knn_pred: usize,
    mix_pred: usize,
    band_mix_pred: Option<usize>,
    q: bool,
) -> bool {
    mix_pred == knn_pred && band_mix_pred == Some(mix_pred) && q
}

// ---------------------------------------------------------------------------
// Baseline
// ---------------------------------------------------------------------------

/// Split-conformal reference: a single threshold from all calibration
/// scores, applied to the test points' KNN probabilities, with the KNN
/// point prediction always included. No bands, no guards.
pub fn baseline_split_conformal(
    cal_contexts: &[InstanceContext],
    test_contexts: &[InstanceContext],
    alpha: f64,
) -> Result<Vec<PredictionSetResult>> {
    if cal_contexts.is_empty() {
        return Err(Error::InvalidData("empty calibration contexts".into()));
    }
    let num_classes = cal_contexts[0].knn.probs.len();
    let mut scores = Vec::with_capacity(cal_contexts.len());
    for ctx in cal_contexts {
        let label = ctx.label.ok_or_else(|| Error::MissingLabel {
            id: ctx.id.clone(),
            split: "calibration",
        })?;
        scores.push(1.0 - ctx.knn.probs[label]);
    }
    let (tau, _) = conformal_threshold(&scores, alpha, 0, 0.0)?;

    let table = ThresholdTable {
        tau: vec![tau; num_classes],
        sizes: vec![scores.len(); num_classes],
        distinct: vec![scores.len(); num_classes],
        fallback: vec![false; num_classes],
    };
    Ok(test_contexts
        .iter()
        .map(|ctx| {
            let mut set: Vec<usize> = (0..num_classes)
                .filter(|&c| ctx.knn.probs[c] >= tau || c == ctx.knn.pred)
                .collect();
            set.sort_unstable();
            PredictionSetResult {
                id: ctx.id.clone(),
                c_hat: set.clone(),
                c_hat_a: set,
                point_pred: ctx.knn.pred,
                h_flag: true,
                kappa_censored: false,
                band_size: cal_contexts.len(),
                thresholds: table.clone(),
                thresholds_refined: None,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Banded label-conditional sets
// ---------------------------------------------------------------------------

/// Everything the banded constructor reads. `active_calibration` selects the
/// calibration multiset used for thresholds (rows into `cal_contexts`,
/// duplicates allowed); `None` means the original calibration set. The
/// heuristic's constrained prediction is always evaluated over the
/// *original* calibration set regardless, which keeps the more conservative
/// reading under re-sampling.
pub struct AdmitInputs<'a> {
    pub cal_contexts: &'a [InstanceContext],
    pub test_contexts: &'a [InstanceContext],
    pub band_spec: BandSpec,
    pub composite_model: &'a CompositeModel,
    pub cal_scores: &'a CalibrationScores,
    /// Per test point, distances to every calibration row.
    pub test_cal_dists: &'a [DistanceRow],
    pub active_calibration: Option<&'a [u32]>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdmitOptions {
    pub alpha: f64,
    pub kappa: usize,
    /// Gate the banded set on the prediction-match heuristic. The refined
    /// set is always gated.
    pub use_h_guard: bool,
}

/// One band member: a calibration row plus its multiplicity in the active
/// (possibly re-sampled) calibration multiset.
#[derive(Debug, Clone, Copy)]
struct BandMember {
    row: u32,
    count: u32,
}

/// Calibration entries ordered by distance-to-training for fast band
/// slicing. Duplicate multiset entries are grouped by row with counts, so
/// re-sampled bands cost the same as plain ones.
struct BandLookup {
    /// Distinct entry rows, ascending by `(d, row)`, with multiplicities.
    members: Vec<BandMember>,
    ds: Vec<f64>,
}

impl BandLookup {
    fn build(cal: &[InstanceContext], active: &[u32]) -> Self {
        let mut sorted = active.to_vec();
        sorted.sort_unstable();
        let mut members: Vec<BandMember> = Vec::new();
        for row in sorted {
            match members.last_mut() {
                Some(m) if m.row == row => m.count += 1,
                _ => members.push(BandMember { row, count: 1 }),
            }
        }
        members.sort_unstable_by(|a, b| {
            cal[a.row as usize]
                .dist_to_train
                .total_cmp(&cal[b.row as usize].dist_to_train)
                .then(a.row.cmp(&b.row))
        });
        let ds = members
            .iter()
            .map(|m| cal[m.row as usize].dist_to_train)
            .collect();
        BandLookup { members, ds }
    }

    /// Entries with matching `q` strictly inside `(d - omega, d + omega)`.
    fn members(&self, cal: &[InstanceContext], d: f64, q: bool, omega: f64) -> Vec<BandMember> {
        let lo = self.ds.partition_point(|&x| x <= d - omega);
        let hi = self.ds.partition_point(|&x| x < d + omega);
        if lo >= hi {
            // an open interval of zero radius is empty
            return Vec::new();
        }
        self.members[lo..hi]
            .iter()
            .copied()
            .filter(|m| cal[m.row as usize].q == q)
            .collect()
    }
}

/// Split-conformal threshold over run-length-encoded scores: equivalent to
/// expanding each `(score, count)` pair `count` times and calling
/// [`conformal_threshold_distinct`].
fn weighted_threshold(
    scores: &mut [(f64, u32)],
    distinct: usize,
    alpha: f64,
    kappa: usize,
    tau_default: f64,
) -> Result<(f64, bool)> {
    if distinct < kappa {
        return Ok((tau_default, true));
    }
    let total: u64 = scores.iter().map(|&(_, c)| c as u64).sum();
    if total == 0 {
        return Err(Error::InvalidData(
            "conformal threshold over an empty score list with kappa = 0".into(),
        ));
    }
    let m = (((total + 1) as f64) * (1.0 - alpha)).ceil() as u64;
    let m = m.clamp(1, total);
    scores.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut seen = 0u64;
    for &(score, count) in scores.iter() {
        seen += count as u64;
        if seen >= m {
            return Ok((1.0 - score, false));
        }
    }
    unreachable!("cumulative counts reach the total")
}

/// Build both prediction-set variants for every test point.
pub fn admit_sets(
    inputs: &AdmitInputs<'_>,
    opts: &AdmitOptions,
) -> Result<Vec<PredictionSetResult>> {
    let cal = inputs.cal_contexts;
    if cal.is_empty() {
        return Err(Error::InvalidData("empty calibration contexts".into()));
    }
    if inputs.test_contexts.len() != inputs.test_cal_dists.len() {
        return Err(Error::InvalidData(
            "test contexts and distance rows must align".into(),
        ));
    }
    let num_classes = cal[0].knn.probs.len();
    for ctx in cal {
        if ctx.label.is_none() {
            return Err(Error::MissingLabel {
                id: ctx.id.clone(),
                split: "calibration",
            });
        }
    }
    let omega = inputs.band_spec.omega;
    if !omega.is_finite() {
        return Err(Error::Numerical("band radius is not finite".into()));
    }

    let original_rows: Vec<u32> = (0..cal.len() as u32).collect();
    let original_lookup = BandLookup::build(cal, &original_rows);
    let active_lookup = match inputs.active_calibration {
        None => None,
        Some(active) => Some(BandLookup::build(cal, active)),
    };

    inputs
        .test_contexts
        .par_iter()
        .zip(inputs.test_cal_dists.par_iter())
        .map(|(ctx, dist_row)| {
            build_one(
                ctx,
                dist_row,
                cal,
                num_classes,
                omega,
                &original_lookup,
                active_lookup.as_ref().unwrap_or(&original_lookup),
                inputs,
                opts,
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_one(
    ctx: &InstanceContext,
    dist_row: &DistanceRow,
    cal: &[InstanceContext],
    num_classes: usize,
    omega: f64,
    original_lookup: &BandLookup,
    active_lookup: &BandLookup,
    inputs: &AdmitInputs<'_>,
    opts: &AdmitOptions,
) -> Result<PredictionSetResult> {
    let mix = ctx.composite.as_ref().ok_or_else(|| {
        Error::InvalidData(format!("test instance `{}` has no mixture output", ctx.id))
    })?;
    let point_pred = mix.pred;

    // Heuristic: constrained mixture prediction over the original
    // calibration band.
    let original_band: Vec<u32> = original_lookup
        .members(cal, ctx.dist_to_train, ctx.q, omega)
        .iter()
        .map(|m| m.row)
        .collect();
    let band_mix_pred = if original_band.is_empty() {
        None
    } else {
        Some(
            inputs
                .composite_model
                .forward(inputs.cal_scores, dist_row, Some(&original_band))?
                .pred,
        )
    };
    let h = heuristic_h(ctx.knn.pred, mix.pred, band_mix_pred, ctx.q);

    // Threshold band over the active (possibly re-sampled) calibration.
    let band = active_lookup.members(cal, ctx.dist_to_train, ctx.q, omega);
    let band_size: usize = band.iter().map(|m| m.count as usize).sum();

    // Stage 1: per-label thresholds inside the band.
    let mut stage1 = ThresholdTable {
        tau: vec![0.0; num_classes],
        sizes: vec![0; num_classes],
        distinct: vec![0; num_classes],
        fallback: vec![false; num_classes],
    };
    let mut in_set = vec![false; num_classes];
    in_set[point_pred] = true;
    for c in 0..num_classes {
        let mut scores: Vec<(f64, u32)> = Vec::new();
        for m in &band {
            let member = &cal[m.row as usize];
            if member.label == Some(c) {
                scores.push((1.0 - member.knn.probs[c], m.count));
            }
        }
        let distinct = scores.len();
        let total: usize = scores.iter().map(|&(_, n)| n as usize).sum();
        let (tau, fallback) =
            weighted_threshold(&mut scores, distinct, opts.alpha, opts.kappa, 0.0)?;
        stage1.tau[c] = tau;
        stage1.sizes[c] = total;
        stage1.distinct[c] = distinct;
        stage1.fallback[c] = fallback;
        if opts.use_h_guard && !h {
            in_set[c] = true;
        }
        if mix.probs[c] >= tau {
            in_set[c] = true;
        }
    }
    let kappa_censored = stage1.fallback.iter().any(|&f| f);
    if kappa_censored {
        in_set.iter_mut().for_each(|x| *x = true);
    }
    let c_hat: Vec<usize> = (0..num_classes).filter(|&c| in_set[c]).collect();

    // Calibration-side sets over the band, then the stratum whose sets
    // equal this test point's set.
    let mut stage2 = stage1.clone();
    let mut in_refined = in_set.clone();
    {
        let mut stratum: Vec<Vec<(f64, u32)>> = vec![Vec::new(); num_classes];
        for m in &band {
            let member = &cal[m.row as usize];
            let mut member_set = Vec::with_capacity(num_classes);
            for c in 0..num_classes {
                if member.knn.probs[c] >= stage1.tau[c] || member.knn.pred == c {
                    member_set.push(c);
                }
            }
            if member_set == c_hat {
                let y = member.label.expect("validated above");
                stratum[y].push((1.0 - member.knn.probs[y], m.count));
            }
        }
        for (c, scores) in stratum.iter_mut().enumerate() {
            let distinct = scores.len();
            let total: usize = scores.iter().map(|&(_, n)| n as usize).sum();
            let (tau, fallback) =
                weighted_threshold(scores, distinct, opts.alpha, opts.kappa, stage1.tau[c])?;
            stage2.tau[c] = tau;
            stage2.sizes[c] = total;
            stage2.distinct[c] = distinct;
            stage2.fallback[c] = fallback;
            if mix.probs[c] >= tau {
                in_refined[c] = true;
            }
        }
    }
    // The heuristic is mandatory for the refined set.
    if !h {
        in_refined.iter_mut().for_each(|x| *x = true);
    }
    let c_hat_a: Vec<usize> = (0..num_classes).filter(|&c| in_refined[c]).collect();

    debug_assert!(c_hat.binary_search(&point_pred).is_ok());
    debug_assert!(c_hat.iter().all(|c| c_hat_a.binary_search(c).is_ok()));
    debug_assert!(!kappa_censored || c_hat.len() == num_classes);

    Ok(PredictionSetResult {
        id: ctx.id.clone(),
        c_hat,
        c_hat_a,
        point_pred,
        h_flag: h,
        kappa_censored,
        band_size,
        thresholds: stage1,
        thresholds_refined: Some(stage2),
    })
}
