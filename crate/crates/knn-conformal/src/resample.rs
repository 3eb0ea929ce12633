//! Constrained re-sampling of the calibration set toward the test
//! distribution.
//!
//! For each test point: take its distance band over the original
//! calibration set, find the nearest calibration point inside the band,
//! and compare the band-constrained mixture prediction for the test point
//! against that calibration point's KNN prediction. When they agree (a
//! lightweight check that the nearest matches tend the same way), the
//! `k_sample` nearest band members are added to the re-sampled multiset;
//! bands smaller than `k_sample` contribute all their members. Duplicates
//! are kept deliberately: sampling with replacement re-weights the
//! calibration distribution toward the test batch.
//!
//! The procedure is fully deterministic: there is no randomness, and the
//! multiset is assembled in test order.

use serde::{Deserialize, Serialize};

use crate::composite::CompositeOutput;
use crate::conformal::AdmitInputs;
use crate::error::{Error, Result};

/// Output of the re-sampling pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampledCalibration {
    /// Calibration rows, duplicates allowed, in test-point order.
    pub entries: Vec<u32>,
    /// Per test point: did it contribute anything?
    pub admitted: Vec<bool>,
    /// Per test point: the rows it contributed (empty when not admitted).
    pub contributions: Vec<Vec<u32>>,
    /// Fraction of multiset entries that repeat an earlier entry.
    pub duplicate_fraction: f64,
}

impl ResampledCalibration {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distinct(&self) -> usize {
        let mut rows = self.entries.clone();
        rows.sort_unstable();
        rows.dedup();
        rows.len()
    }
}

/// Run the re-sampling pass. Bands and constrained predictions are always
/// evaluated over the original calibration set; `inputs.active_calibration`
/// is ignored. An empty result is legal (the downstream sample-size guard
/// copes with it).
pub fn resample(inputs: &AdmitInputs<'_>, k_sample: usize) -> Result<ResampledCalibration> {
    if k_sample == 0 {
        return Err(Error::InvalidConfig("k_sample must be >= 1".into()));
    }
    let cal = inputs.cal_contexts;
    let omega = inputs.band_spec.omega;

    let mut entries = Vec::new();
    let mut admitted = Vec::with_capacity(inputs.test_contexts.len());
    let mut contributions = Vec::with_capacity(inputs.test_contexts.len());

    for (ctx, dist_row) in inputs.test_contexts.iter().zip(inputs.test_cal_dists) {
        let band = crate::constraints::band_by_signature(ctx.dist_to_train, ctx.q, omega, cal);
        if band.is_empty() {
            admitted.push(false);
            contributions.push(Vec::new());
            continue;
        }
        let band: Vec<u32> = band.into_iter().map(|r| r as u32).collect();

        // nearest band member in exemplar space, ties by row
        let mut by_distance = band.clone();
        by_distance.sort_unstable_by(|&a, &b| {
            dist_row.dists[a as usize]
                .total_cmp(&dist_row.dists[b as usize])
                .then(a.cmp(&b))
        });
        let nearest = by_distance[0] as usize;

        let constrained = inputs
            .composite_model
            .forward(inputs.cal_scores, dist_row, Some(&band))?;
        if constrained.pred == cal[nearest].knn.pred {
            by_distance.truncate(k_sample);
            entries.extend_from_slice(&by_distance);
            admitted.push(true);
            contributions.push(by_distance);
        } else {
            admitted.push(false);
            contributions.push(Vec::new());
        }
    }

    let duplicate_fraction = if entries.is_empty() {
        0.0
    } else {
        let mut rows = entries.clone();
        rows.sort_unstable();
        rows.dedup();
        (entries.len() - rows.len()) as f64 / entries.len() as f64
    };

    Ok(ResampledCalibration {
        entries,
        admitted,
        contributions,
        duplicate_fraction,
    })
}

/// Summary of mixture-weight concentration, to guide `k_sample` choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthSummary {
    /// Points summarized.
    pub count: usize,
    /// Mean number of nearest calibration points holding half the weight.
    pub mean_depth: f64,
    pub median_depth: f64,
    pub min_depth: usize,
    pub max_depth: usize,
}

/// Aggregate `cumulative_weight_depth` across mixture outputs. Advisory:
/// it reports where the weight mass sits so a sensible `k_sample` range
/// can be picked.
pub fn choose_k_sample_report(outputs: &[CompositeOutput]) -> Result<DepthSummary> {
    if outputs.is_empty() {
        return Err(Error::InvalidData(
            "no mixture outputs to summarize".into(),
        ));
    }
    let mut depths: Vec<usize> = outputs.iter().map(|o| o.cumulative_weight_depth).collect();
    depths.sort_unstable();
    let n = depths.len();
    let mean = depths.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        depths[n / 2] as f64
    } else {
        (depths[n / 2 - 1] + depths[n / 2]) as f64 / 2.0
    };
    Ok(DepthSummary {
        count: n,
        mean_depth: mean,
        median_depth: median,
        min_depth: depths[0],
        max_depth: depths[n - 1],
    })
}
