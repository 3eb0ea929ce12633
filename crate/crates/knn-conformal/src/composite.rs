//! Re-expression of a query's KNN scores as a convex combination of
//! *calibration-set* KNN scores.
//!
//! Quantile-threshold methods are sensitive to output magnitude, so instead
//! of comparing a test point's raw approximation against calibration
//! quantiles, the test output is rebuilt from the calibration outputs
//! themselves:
//!
//! ```text
//! mix_c(x) = sum_j alpha_j * knn_score_c(x_j),    j over the calibration set
//! ```
//!
//! with `alpha = softmax(-dist(x, x_j) / tau)` over exemplar distances. The
//! calibration KNN outputs are computed once and frozen; `tau` is the single
//! trainable parameter, fitted transductively against the test batch to
//! minimize prediction discrepancies with the plain KNN approximation.
//!
//! The same model evaluates restricted combinations over a subset of the
//! calibration set (the weights renormalize inside the subset), which is how
//! band-constrained predictions are produced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{FitMeta, FitOptions, KnnModel, KnnOutput};
use crate::data::{argmax, softmax, DatasetBundle, RunConfig};
use crate::error::{Error, Result};
use crate::index::{DistanceRow, VectorIndex};

/// Cached per-calibration-point KNN scores, row-major `J x C`.
#[derive(Debug, Clone)]
pub struct CalibrationScores {
    scores: Vec<f64>,
    num_classes: usize,
    len: usize,
}

impl CalibrationScores {
    pub fn from_outputs(outputs: &[KnnOutput], num_classes: usize) -> Self {
        let mut scores = Vec::with_capacity(outputs.len() * num_classes);
        for out in outputs {
            debug_assert_eq!(out.scores.len(), num_classes);
            scores.extend_from_slice(&out.scores);
        }
        CalibrationScores {
            scores,
            num_classes,
            len: outputs.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.scores[j * self.num_classes..(j + 1) * self.num_classes]
    }
}

/// The mixture model: one temperature plus fit provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeModel {
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<FitMeta>,
}

/// Mixture output for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeOutput {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub pred: usize,
    /// Smallest number of nearest calibration points carrying at least half
    /// of the mixture weight; a measure of how concentrated the weights are.
    pub cumulative_weight_depth: usize,
}

impl CompositeModel {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
        }
        Ok(CompositeModel { tau, meta: None })
    }

    /// Evaluate the mixture for one query given its distances to the
    /// calibration set. `subset` restricts (and renormalizes) the
    /// combination to the given calibration rows; `None` uses all rows.
    pub fn forward(
        &self,
        table: &CalibrationScores,
        dist_row: &DistanceRow,
        subset: Option<&[u32]>,
    ) -> Result<CompositeOutput> {
        let ordered: Vec<u32> = match subset {
            None => dist_row.order.clone(),
            Some(rows) => {
                if rows.is_empty() {
                    return Err(Error::InvalidData(
                        "constrained mixture over an empty subset".into(),
                    ));
                }
                let mut rows = rows.to_vec();
                rows.sort_unstable_by(|&a, &b| {
                    dist_row.dists[a as usize]
                        .total_cmp(&dist_row.dists[b as usize])
                        .then(a.cmp(&b))
                });
                rows
            }
        };
        self.forward_ordered(table, dist_row, &ordered)
    }

    /// Core evaluation over rows already sorted ascending by distance.
    /// Summation order is fixed by `ordered`, so a subset equal to the full
    /// calibration set reproduces the unconstrained output bit-for-bit.
    fn forward_ordered(
        &self,
        table: &CalibrationScores,
        dist_row: &DistanceRow,
        ordered: &[u32],
    ) -> Result<CompositeOutput> {
        let c_count = table.num_classes;
        let min_d = dist_row.dists[ordered[0] as usize];
        let mut weights = Vec::with_capacity(ordered.len());
        let mut wsum = 0.0;
        for &r in ordered {
            let w = ((min_d - dist_row.dists[r as usize]) / self.tau).exp();
            weights.push(w);
            wsum += w;
        }
        let mut scores = vec![0.0; c_count];
        for (&r, w) in ordered.iter().zip(&weights) {
            let alpha = w / wsum;
            let row = table.row(r as usize);
            for c in 0..c_count {
                scores[c] += alpha * row[c];
            }
        }
        // weights are descending because rows are ascending by distance
        let mut acc = 0.0;
        let mut depth = ordered.len();
        for (i, w) in weights.iter().enumerate() {
            acc += w / wsum;
            if acc >= 0.5 {
                depth = i + 1;
                break;
            }
        }
        let probs = softmax(&scores)?;
        let pred = argmax(&scores);
        Ok(CompositeOutput {
            scores,
            probs,
            pred,
            cumulative_weight_depth: depth,
        })
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Frozen transductive objective: mean cross-entropy of the softmaxed
/// mixture scores against each test point's plain-KNN predicted class.
pub struct CompositeFitProblem<'a> {
    table: &'a CalibrationScores,
    dist_rows: &'a [DistanceRow],
    targets: &'a [usize],
}

impl<'a> CompositeFitProblem<'a> {
    pub fn new(
        table: &'a CalibrationScores,
        dist_rows: &'a [DistanceRow],
        targets: &'a [usize],
    ) -> Result<Self> {
        if dist_rows.is_empty() {
            return Err(Error::InvalidData(
                "mixture fit needs a non-empty test set".into(),
            ));
        }
        if dist_rows.len() != targets.len() {
            return Err(Error::InvalidData(
                "distance rows and targets must align".into(),
            ));
        }
        Ok(CompositeFitProblem {
            table,
            dist_rows,
            targets,
        })
    }

    pub fn loss(&self, log_tau: f64) -> Result<f64> {
        Ok(self.loss_and_grad_impl(log_tau, false)?.0)
    }

    pub fn loss_and_grad(&self, log_tau: f64) -> Result<(f64, f64)> {
        let (loss, grad, _) = self.loss_and_grad_impl(log_tau, true)?;
        Ok((loss, grad))
    }

    /// One pass computing the loss, its gradient, and the prediction
    /// agreement at the *current* parameter.
    pub fn loss_grad_agreement(&self, log_tau: f64) -> Result<(f64, f64, f64)> {
        self.loss_and_grad_impl(log_tau, true)
    }

    fn loss_and_grad_impl(&self, log_tau: f64, want_grad: bool) -> Result<(f64, f64, f64)> {
        let tau = log_tau.exp();
        let c_count = self.table.num_classes;
        let n = self.dist_rows.len() as f64;

        // parallel map per test point, sequential reduce in index order so
        // the float summation is deterministic
        let per_point: Vec<Result<(f64, f64, bool)>> = self
            .dist_rows
            .par_iter()
            .zip(self.targets.par_iter())
            .map(|(row, &target)| {
                let min_d = row.dists[row.order[0] as usize];
                let mut alphas = Vec::with_capacity(row.dists.len());
                let mut asum = 0.0;
                for &d in &row.dists {
                    let a = ((min_d - d) / tau).exp();
                    alphas.push(a);
                    asum += a;
                }
                let mut scores = vec![0.0; c_count];
                let mut dbar = 0.0;
                for (j, a) in alphas.iter_mut().enumerate() {
                    *a /= asum;
                    let src = self.table.row(j);
                    for c in 0..c_count {
                        scores[c] += *a * src[c];
                    }
                    dbar += *a * row.dists[j];
                }
                let probs = softmax(&scores)?;
                let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
                let hit = argmax(&scores) == target;

                let mut grad = 0.0;
                if want_grad {
                    // dL/d(log tau) = sum_j A_j alpha_j (d_j - dbar) / tau,
                    // with A_j the loss gradient through the j-th slot.
                    for (j, &a) in alphas.iter().enumerate() {
                        let src = self.table.row(j);
                        let mut slot = 0.0;
                        for c in 0..c_count {
                            let g = probs[c] - if c == target { 1.0 } else { 0.0 };
                            slot += g * src[c];
                        }
                        grad += slot * a * (row.dists[j] - dbar) / tau;
                    }
                }
                Ok((loss, grad, hit))
            })
            .collect();

        let mut loss = 0.0;
        let mut grad = 0.0;
        let mut hits = 0usize;
        for item in per_point {
            let (l, g, hit) = item?;
            loss += l;
            grad += g;
            hits += hit as usize;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite mixture fit loss".into()));
        }
        Ok((loss, grad / n, hits as f64 / n))
    }

    pub fn agreement(&self, log_tau: f64) -> Result<f64> {
        let model = CompositeModel::new(log_tau.exp())?;
        let mut hits = 0usize;
        for (row, &target) in self.dist_rows.iter().zip(self.targets) {
            let out = model.forward(self.table, row, None)?;
            if out.pred == target {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.dist_rows.len() as f64)
    }
}

/// Median distance from each query to its nearest calibration point; the
/// initializer for `tau`. Falls back to a small positive constant when the
/// test points sit exactly on calibration points.
fn initial_tau(dist_rows: &[DistanceRow]) -> f64 {
    let mut nearest: Vec<f64> = dist_rows
        .iter()
        .map(|r| r.dists[r.order[0] as usize])
        .collect();
    nearest.sort_by(f64::total_cmp);
    let median = nearest[nearest.len() / 2];
    if median > 0.0 {
        return median;
    }
    let positive: Vec<f64> = nearest.into_iter().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        1e-3
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    }
}

/// Fit `tau` by gradient descent on the transductive objective.
pub fn fit_composite(
    table: &CalibrationScores,
    dist_rows: &[DistanceRow],
    targets: &[usize],
    seed: u64,
    options: &FitOptions,
) -> Result<CompositeModel> {
    let problem = CompositeFitProblem::new(table, dist_rows, targets)?;
    let mut log_tau = initial_tau(dist_rows).ln();

    let mut best_log_tau = log_tau;
    let mut best_agreement = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut last_loss = f64::INFINITY;
    let mut epochs_run = 0usize;

    // agreement is read off the same pass that produces the gradient, so
    // the parameter reaching `best_agreement` is the pre-step one
    for epoch in 1..=options.max_epochs {
        epochs_run = epoch;
        let (loss, grad, agreement) = problem.loss_grad_agreement(log_tau)?;
        if agreement > best_agreement {
            best_agreement = agreement;
            best_log_tau = log_tau;
            best_epoch = epoch - 1;
        }
        if grad.abs() < 1e-12 {
            break;
        }
        log_tau -= options.learning_rate * grad;
        if epoch.saturating_sub(best_epoch) >= options.patience {
            break;
        }
        // converged: the objective has stopped moving
        if (last_loss - loss).abs() < 1e-7 * loss.abs().max(1.0) {
            break;
        }
        last_loss = loss;
    }

    let final_loss = problem.loss(best_log_tau)?;
    Ok(CompositeModel {
        tau: best_log_tau.exp(),
        meta: Some(FitMeta {
            seed,
            epochs_run,
            best_epoch,
            agreement: best_agreement,
            final_loss,
        }),
    })
}

/// Bundle-level convenience: cache the calibration KNN outputs, then fit
/// the mixture temperature against the bundle's test split.
pub fn fit_composite_from_bundle(
    bundle: &DatasetBundle,
    knn_model: &KnnModel,
    config: &RunConfig,
) -> Result<(CompositeModel, CalibrationScores)> {
    if bundle.test.is_empty() {
        return Err(Error::InvalidData(
            "mixture fit needs a non-empty test set".into(),
        ));
    }
    let train_index = VectorIndex::from_instances(&bundle.train)?;
    let cal_queries: Vec<Vec<f64>> = bundle
        .calibration
        .iter()
        .map(|i| i.exemplar.clone())
        .collect();
    let cal_neighbors = train_index.query_batch_topk(&cal_queries, knn_model.k)?;
    let mut cal_outputs = Vec::with_capacity(bundle.calibration.len());
    for nbs in &cal_neighbors {
        cal_outputs.push(knn_model.forward_from_neighbors(nbs, &bundle.train)?);
    }
    let table = CalibrationScores::from_outputs(&cal_outputs, bundle.num_classes);

    let cal_index = VectorIndex::from_instances(&bundle.calibration)?;
    let test_queries: Vec<Vec<f64>> = bundle.test.iter().map(|i| i.exemplar.clone()).collect();
    let dist_rows = cal_index.query_batch_all(&test_queries)?;

    let test_neighbors = train_index.query_batch_topk(&test_queries, knn_model.k)?;
    let mut targets = Vec::with_capacity(bundle.test.len());
    for nbs in &test_neighbors {
        targets.push(knn_model.forward_from_neighbors(nbs, &bundle.train)?.pred);
    }

    let model = fit_composite(&table, &dist_rows, &targets, config.seed, &FitOptions::default())?;
    Ok((model, table))
}
