//! Per-point reliability signals: the nearest-match constraint, distance to
//! training, and distance bands over the calibration set.
//!
//! Points whose KNN prediction disagrees with the nearest training match
//! (or whose nearest match is itself mispredicted) behave measurably
//! differently from points where everything lines up; the boolean `q`
//! captures that and is treated as a feature of the data. The distance to
//! the nearest training exemplar, `d`, orders points by how far they sit
//! from the training support. Bands group calibration points whose `(q, d)`
//! matches a test point's, and per-label quantile thresholds are computed
//! inside them.

use serde::{Deserialize, Serialize};

use crate::approx::KnnOutput;
use crate::composite::CompositeOutput;
use crate::error::{Error, Result};
use crate::index::Neighbor;

/// Everything the set constructors need to know about one calibration or
/// test point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceContext {
    pub id: String,
    /// L2 distance to the nearest training exemplar.
    pub dist_to_train: f64,
    /// Match constraint: KNN prediction agrees with the nearest training
    /// point's model prediction, and that prediction is correct.
    pub q: bool,
    pub nearest_train: Neighbor,
    pub nearest_train_label: usize,
    pub nearest_train_pred: usize,
    pub knn: KnnOutput,
    /// Mixture output over the full calibration set (test points only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite: Option<CompositeOutput>,
    /// Gold label when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Band radius: `omega = delta * s_hat`, with `s_hat` the sample standard
/// deviation of distances over constrained true-positive calibration points.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandSpec {
    pub omega: f64,
    pub s_hat: f64,
    pub delta: f64,
}

/// True iff the KNN prediction equals the nearest training point's model
/// prediction AND that prediction equals the nearest point's gold label.
pub fn match_constraint(
    knn_pred: usize,
    nearest_train_pred: usize,
    nearest_train_label: usize,
) -> bool {
    knn_pred == nearest_train_pred && nearest_train_pred == nearest_train_label
}

/// Estimate the band radius from calibration contexts.
///
/// Qualifying points are those with `q = true` whose KNN prediction matches
/// their gold label. `s_hat` is their sample (n-1) standard deviation of
/// `dist_to_train`; fewer than 2 qualifying points leaves the band
/// undefined and is an error.
pub fn estimate_band_radius(calibration: &[InstanceContext], delta: f64) -> Result<BandSpec> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "delta must be > 0, got {delta}"
        )));
    }
    let dists: Vec<f64> = calibration
        .iter()
        .filter(|ctx| ctx.q && Some(ctx.knn.pred) == ctx.label)
        .map(|ctx| ctx.dist_to_train)
        .collect();
    if dists.len() < 2 {
        return Err(Error::InvalidData(format!(
            "band radius undefined: {} constrained true-positive calibration point(s), need >= 2",
            dists.len()
        )));
    }
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let s_hat = var.sqrt();
    Ok(BandSpec {
        omega: delta * s_hat,
        s_hat,
        delta,
    })
}

/// Calibration points with the center's `q` flag whose distance-to-training
/// lies strictly inside `(d - omega, d + omega)`. Returns positions into
/// `calibration`; may be empty. Membership depends on the center only
/// through `(dist_to_train, q)`.
pub fn band(
    center: &InstanceContext,
    omega: f64,
    calibration: &[InstanceContext],
) -> Vec<usize> {
    band_by_signature(center.dist_to_train, center.q, omega, calibration)
}

pub fn band_by_signature(
    d: f64,
    q: bool,
    omega: f64,
    calibration: &[InstanceContext],
) -> Vec<usize> {
    let (lo, hi) = (d - omega, d + omega);
    calibration
        .iter()
        .enumerate()
        .filter(|(_, ctx)| ctx.q == q && ctx.dist_to_train > lo && ctx.dist_to_train < hi)
        .map(|(j, _)| j)
        .collect()
}

/// Empirical quantile boundaries of calibration `dist_to_train` values.
///
/// Boundary `i` (1-based, `i < num_bins`) is the `ceil(i * n / num_bins)`-th
/// smallest distance. Test points are assigned by [`assign_bin`]; anything
/// beyond the last boundary lands in the last bin.
pub fn distance_quantile_bins(
    calibration: &[InstanceContext],
    num_bins: usize,
) -> Result<Vec<f64>> {
    let ds: Vec<f64> = calibration.iter().map(|c| c.dist_to_train).collect();
    quantile_boundaries(&ds, num_bins)
}

/// [`distance_quantile_bins`] over raw distance values.
pub fn quantile_boundaries(distances: &[f64], num_bins: usize) -> Result<Vec<f64>> {
    if num_bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 bins, got {num_bins}"
        )));
    }
    if distances.is_empty() {
        return Err(Error::InvalidData(
            "cannot compute distance bins on an empty calibration set".into(),
        ));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut boundaries = Vec::with_capacity(num_bins - 1);
    for i in 1..num_bins {
        let m = ((i * n) as f64 / num_bins as f64).ceil() as usize;
        boundaries.push(sorted[m.clamp(1, n) - 1]);
    }
    Ok(boundaries)
}

/// Bin index for a distance: the number of boundaries strictly below it.
pub fn assign_bin(d: f64, boundaries: &[f64]) -> usize {
    boundaries.iter().filter(|&&b| d > b).count()
}

/// Compute contexts for a set of instances against the training set, given
/// each instance's precomputed nearest-training neighbors (at least one,
/// ascending). Mixture outputs start out empty and are filled by the
/// pipeline for test points.
pub fn build_contexts(
    instances: &[crate::data::Instance],
    neighbor_lists: &[Vec<Neighbor>],
    knn_model: &crate::approx::KnnModel,
    train: &[crate::data::Instance],
) -> Result<Vec<InstanceContext>> {
    if instances.len() != neighbor_lists.len() {
        return Err(Error::InvalidData(
            "one neighbor list per instance is required".into(),
        ));
    }
    instances
        .iter()
        .zip(neighbor_lists)
        .map(|(inst, neighbors)| {
            let knn = knn_model.forward_from_neighbors(neighbors, train)?;
            let nearest = neighbors[0];
            let nt = &train[nearest.row];
            let nearest_train_label = nt.label.ok_or_else(|| Error::MissingLabel {
                id: nt.id.clone(),
                split: nt.split.as_str(),
            })?;
            let nearest_train_pred = nt.model_pred();
            let q = match_constraint(knn.pred, nearest_train_pred, nearest_train_label);
            Ok(InstanceContext {
                id: inst.id.clone(),
                dist_to_train: nearest.distance,
                q,
                nearest_train: nearest,
                nearest_train_label,
                nearest_train_pred,
                knn,
                composite: None,
                label: inst.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::softmax;

    fn ctx(id: &str, d: f64, q: bool, knn_pred: usize, label: Option<usize>) -> InstanceContext {
        let scores = if knn_pred == 0 {
            vec![1.0, -1.0]
        } else {
            vec![-1.0, 1.0]
        };
        InstanceContext {
            id: id.into(),
            dist_to_train: d,
            q,
            nearest_train: Neighbor {
                row: 0,
                distance: d,
            },
            nearest_train_label: 0,
            nearest_train_pred: 0,
            knn: KnnOutput {
                probs: softmax(&scores).unwrap(),
                scores,
                pred: knn_pred,
                neighbors: vec![],
            },
            composite: None,
            label,
        }
    }

    #[test]
    fn match_constraint_truth_table() {
        assert!(match_constraint(1, 1, 1));
        assert!(!match_constraint(1, 1, 0)); // nearest match mispredicted
        assert!(!match_constraint(0, 1, 1)); // knn disagrees with nearest match
        assert!(!match_constraint(0, 1, 2));
    }

    #[test]
    fn zero_variance_distances_give_zero_radius() {
        let cal = vec![
            ctx("a", 1.0, true, 0, Some(0)),
            ctx("b", 1.0, true, 0, Some(0)),
            ctx("c", 1.0, true, 0, Some(0)),
        ];
        let spec = estimate_band_radius(&cal, 1.0).unwrap();
        assert_eq!(spec.s_hat, 0.0);
        assert_eq!(spec.omega, 0.0);
    }

    #[test]
    fn radius_uses_sample_standard_deviation() {
        let cal = vec![ctx("a", 0.0, true, 0, Some(0)), ctx("b", 2.0, true, 0, Some(0))];
        let spec = estimate_band_radius(&cal, 1.0).unwrap();
        // oracle: population std of {0,2} is 1.0; sample std is sqrt(2).
        // The sample (n-1) convention is the one in force.
        let population = 1.0_f64;
        let sample = 2.0_f64.sqrt();
        assert!((spec.s_hat - sample).abs() < 1e-12);
        assert!((spec.s_hat - population).abs() > 0.1);

        let doubled = estimate_band_radius(&cal, 2.0).unwrap();
        assert!((doubled.omega - 2.0 * spec.omega).abs() < 1e-12);
        assert_eq!(doubled.s_hat, spec.s_hat);
    }

    #[test]
    fn radius_requires_two_qualifying_points() {
        // q=false and wrong predictions do not qualify
        let cal = vec![
            ctx("a", 1.0, false, 0, Some(0)),
            ctx("b", 2.0, true, 1, Some(0)),
            ctx("c", 3.0, true, 0, Some(0)),
        ];
        assert!(estimate_band_radius(&cal, 1.0).is_err());
    }

    #[test]
    fn band_selects_open_interval_with_matching_q() {
        let cal = vec![
            ctx("a", 3.5, true, 0, Some(0)),
            ctx("b", 4.9, true, 0, Some(0)),
            ctx("c", 7.1, true, 0, Some(0)),
            ctx("d", 4.0, false, 0, Some(0)),
        ];
        let center = ctx("t", 5.0, true, 0, None);
        let members = band(&center, 2.0, &cal);
        assert_eq!(members, vec![0, 1]);

        let center_f = ctx("t", 5.0, false, 0, None);
        let members = band(&center_f, 2.0, &cal);
        assert_eq!(members, vec![3]);
    }

    #[test]
    fn zero_radius_band_is_empty() {
        let cal = vec![ctx("a", 5.0, true, 0, Some(0))];
        let center = ctx("t", 5.0, true, 0, None);
        // open interval (5, 5) contains nothing, not even exact matches
        assert!(band(&center, 0.0, &cal).is_empty());
    }

    #[test]
    fn every_point_is_in_its_own_band() {
        let cal: Vec<InstanceContext> = (0..10)
            .map(|i| ctx(&format!("c{i}"), i as f64 * 0.37, i % 2 == 0, 0, Some(0)))
            .collect();
        for (j, center) in cal.iter().enumerate() {
            let members = band(center, 0.5, &cal);
            assert!(members.contains(&j));
        }
    }

    #[test]
    fn bands_are_monotone_in_omega_and_signature_only() {
        let cal: Vec<InstanceContext> = (0..40)
            .map(|i| ctx(&format!("c{i}"), (i as f64 * 7.3) % 11.0, i % 3 == 0, 0, Some(0)))
            .collect();
        let center_a = ctx("a", 4.0, true, 0, None);
        for w in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let small = band(&center_a, w, &cal);
            let large = band(&center_a, w + 0.7, &cal);
            assert!(small.iter().all(|m| large.contains(m)));
        }
        // a different center with identical (d, q) sees the identical band
        let center_b = ctx("something-else", 4.0, true, 1, Some(1));
        assert_eq!(band(&center_a, 1.5, &cal), band(&center_b, 1.5, &cal));
    }

    #[test]
    fn two_bins_split_at_the_median() {
        let cal: Vec<InstanceContext> = (1..=100)
            .map(|i| ctx(&format!("c{i}"), i as f64, true, 0, Some(0)))
            .collect();
        let bounds = distance_quantile_bins(&cal, 2).unwrap();
        assert_eq!(bounds, vec![50.0]);
        assert_eq!(assign_bin(50.0, &bounds), 0);
        assert_eq!(assign_bin(50.5, &bounds), 1);
        assert_eq!(assign_bin(1e9, &bounds), 1); // beyond the last boundary
    }

    #[test]
    fn four_bins_balance_uniform_distances() {
        let cal: Vec<InstanceContext> = (0..200)
            .map(|i| ctx(&format!("c{i}"), i as f64, true, 0, Some(0)))
            .collect();
        let bounds = distance_quantile_bins(&cal, 4).unwrap();
        let mut counts = [0usize; 4];
        for c in &cal {
            counts[assign_bin(c.dist_to_train, &bounds)] += 1;
        }
        assert_eq!(counts, [50, 50, 50, 50]);
    }

    #[test]
    fn skewed_distances_match_sort_based_oracle() {
        let dists: Vec<f64> = (0..97).map(|i| ((i * i) % 61) as f64 / 7.0).collect();
        let cal: Vec<InstanceContext> = dists
            .iter()
            .enumerate()
            .map(|(i, &d)| ctx(&format!("c{i}"), d, true, 0, Some(0)))
            .collect();
        let num_bins = 3;
        let bounds = distance_quantile_bins(&cal, num_bins).unwrap();

        // oracle: sort, cut at ceil(i*n/bins), assign by position
        let mut sorted = dists.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        for &d in &dists {
            let want = (1..num_bins)
                .filter(|&i| {
                    let m = ((i * n) as f64 / num_bins as f64).ceil() as usize;
                    d > sorted[m - 1]
                })
                .count();
            assert_eq!(assign_bin(d, &bounds), want);
        }
    }

    #[test]
    fn bin_input_validation() {
        let cal = vec![ctx("a", 1.0, true, 0, Some(0))];
        assert!(distance_quantile_bins(&cal, 1).is_err());
        assert!(distance_quantile_bins(&[], 2).is_err());
    }
}
