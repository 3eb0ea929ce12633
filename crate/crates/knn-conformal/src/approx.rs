//! Distance-weighted KNN approximation of the underlying classifier.
//!
//! A query's score for class `c` is
//!
//! ```text
//! score_c = beta_c + sum_k w_k * ( e(logit_c(x_k)) + gamma_c * sign_c(y_k) )
//! ```
//!
//! where the sum runs over the query's K nearest training exemplars,
//! `w_k = softmax(-dist_k / eta)` are distance-softmax weights,
//! `e` is `tanh` or the identity, and `sign_c(y_k)` is `+1` when the
//! neighbor's gold label is `c` and `-1` otherwise. The model has `2C + 1`
//! learnable parameters: per-class `beta` and `gamma`, plus the temperature
//! `eta` (kept positive by optimizing `log eta`).
//!
//! Fitting minimizes cross-entropy of the softmaxed scores against the
//! *classifier's own predicted class* (not the gold label) on half of the
//! calibration set, chosen by a seeded shuffle; the other half drives
//! early stopping and model selection. The aim is prediction agreement
//! with the model being approximated, so the approximation can stand in
//! for it downstream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, softmax, Activation, DatasetBundle, Instance, RunConfig};
use crate::error::{Error, Result};
use crate::index::{Neighbor, VectorIndex};

/// Fitted parameters of the KNN approximation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnModel {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: f64,
    pub k: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<FitMeta>,
}

/// Provenance of a fit, serialized with the model for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Prediction agreement with the approximated model on the held half.
    pub agreement: f64,
    pub final_loss: f64,
}

impl KnnModel {
    /// A model with explicit parameters (mostly for tests and tooling).
    pub fn new(
        beta: Vec<f64>,
        gamma: Vec<f64>,
        eta: f64,
        k: usize,
        activation: Activation,
    ) -> Result<Self> {
        if beta.len() != gamma.len() || beta.is_empty() {
            return Err(Error::InvalidConfig(
                "beta and gamma must be non-empty and the same length".into(),
            ));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be > 0, got {eta}")));
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        Ok(KnnModel {
            beta,
            gamma,
            eta,
            k,
            activation,
            meta: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.beta.len()
    }

    /// Run the approximation for one query exemplar against a training
    /// index, using the model's own `k`.
    pub fn forward(
        &self,
        exemplar: &[f64],
        train_index: &VectorIndex,
        train: &[Instance],
    ) -> Result<KnnOutput> {
        let neighbors = train_index.query_topk(exemplar, self.k)?;
        self.forward_from_neighbors(&neighbors, train)
    }

    /// Run the approximation given precomputed neighbors.
    pub fn forward_from_neighbors(
        &self,
        neighbors: &[Neighbor],
        train: &[Instance],
    ) -> Result<KnnOutput> {
        if train.is_empty() || neighbors.is_empty() {
            return Err(Error::InvalidData(
                "knn forward needs a non-empty training set".into(),
            ));
        }
        let c_count = self.num_classes();
        let weights = knn_weights(neighbors, self.eta)?;
        let mut scores = self.beta.clone();
        for (nb, &w) in neighbors.iter().zip(&weights) {
            let inst = &train[nb.row];
            let logits = inst.logits.as_ref().ok_or_else(|| {
                Error::MissingLogits {
                    id: inst.id.clone(),
                    split: inst.split.as_str(),
                }
            })?;
            let label = inst.label.ok_or_else(|| Error::MissingLabel {
                id: inst.id.clone(),
                split: inst.split.as_str(),
            })?;
            for c in 0..c_count {
                let sign = if label == c { 1.0 } else { -1.0 };
                scores[c] += w * (self.activation.apply(logits[c]) + self.gamma[c] * sign);
            }
        }
        let probs = softmax(&scores)?;
        let pred = argmax(&scores);
        Ok(KnnOutput {
            scores,
            probs,
            pred,
            neighbors: neighbors.to_vec(),
        })
    }
}

/// Per-class scores/probabilities plus the neighbors that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnOutput {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub pred: usize,
    pub neighbors: Vec<Neighbor>,
}

/// Distance-softmax weights `w_k = exp(-d_k/eta) / sum exp(-d_j/eta)`,
/// computed with max subtraction so large distances cannot underflow the
/// whole vector.
pub fn knn_weights(neighbors: &[Neighbor], eta: f64) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::InvalidData("knn_weights of empty neighbors".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidConfig(format!("eta must be > 0, got {eta}")));
    }
    let min_d = neighbors
        .iter()
        .map(|n| n.distance)
        .fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = neighbors
        .iter()
        .map(|n| ((min_d - n.distance) / eta).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Optimizer knobs for the full-batch gradient-descent fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without held-half improvement before stopping.
    pub patience: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            learning_rate: 0.2,
            max_epochs: 400,
            patience: 40,
        }
    }
}

/// Free parameters of the fit, with `eta` in log space so positivity holds
/// by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub log_eta: f64,
}

#[derive(Debug, Clone)]
pub struct KnnGrad {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub log_eta: f64,
}

struct FitPoint {
    dists: Vec<f64>,
    /// Activated neighbor logits, `K x C` row-major.
    act: Vec<f64>,
    labels: Vec<usize>,
    /// Class the approximated model predicts for this point.
    target: usize,
}

/// Frozen training objective: mean cross-entropy of the softmaxed KNN
/// scores against the approximated model's predictions. Exposed so the
/// analytic gradient can be audited against finite differences.
pub struct KnnFitProblem {
    points: Vec<FitPoint>,
    num_classes: usize,
}

impl KnnFitProblem {
    fn from_points(
        instances: &[&Instance],
        neighbor_lists: &[Vec<Neighbor>],
        train: &[Instance],
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut points = Vec::with_capacity(instances.len());
        for (inst, neighbors) in instances.iter().zip(neighbor_lists) {
            let logits = inst.logits.as_ref().ok_or_else(|| Error::MissingLogits {
                id: inst.id.clone(),
                split: inst.split.as_str(),
            })?;
            let mut act = Vec::with_capacity(neighbors.len() * num_classes);
            let mut labels = Vec::with_capacity(neighbors.len());
            for nb in neighbors {
                let t = &train[nb.row];
                let tl = t.logits.as_ref().ok_or_else(|| Error::MissingLogits {
                    id: t.id.clone(),
                    split: t.split.as_str(),
                })?;
                for c in 0..num_classes {
                    act.push(activation.apply(tl[c]));
                }
                labels.push(t.label.ok_or_else(|| Error::MissingLabel {
                    id: t.id.clone(),
                    split: t.split.as_str(),
                })?);
            }
            points.push(FitPoint {
                dists: neighbors.iter().map(|n| n.distance).collect(),
                act,
                labels,
                target: argmax(logits),
            });
        }
        Ok(KnnFitProblem {
            points,
            num_classes,
        })
    }

    /// Build the objective over a set of calibration instances.
    pub fn from_bundle(
        bundle: &DatasetBundle,
        config: &RunConfig,
        train_index: &VectorIndex,
    ) -> Result<Self> {
        let refs: Vec<&Instance> = bundle.calibration.iter().collect();
        let queries: Vec<Vec<f64>> = refs.iter().map(|i| i.exemplar.clone()).collect();
        let lists = train_index.query_batch_topk(&queries, config.k_neighbors)?;
        Self::from_points(
            &refs,
            &lists,
            &bundle.train,
            bundle.num_classes,
            config.activation,
        )
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Mean distance to the nearest neighbor, used to initialize `eta`.
    fn mean_nearest_distance(&self) -> f64 {
        let sum: f64 = self.points.iter().map(|p| p.dists[0]).sum();
        sum / self.points.len().max(1) as f64
    }

    pub fn loss(&self, params: &KnnParams) -> Result<f64> {
        Ok(self.loss_and_grad_impl(params, false)?.0)
    }

    pub fn loss_and_grad(&self, params: &KnnParams) -> Result<(f64, KnnGrad)> {
        let (loss, grad) = self.loss_and_grad_impl(params, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn loss_and_grad_impl(
        &self,
        params: &KnnParams,
        want_grad: bool,
    ) -> Result<(f64, Option<KnnGrad>)> {
        let c_count = self.num_classes;
        let eta = params.log_eta.exp();
        let n = self.points.len() as f64;
        let mut loss = 0.0;
        let mut g_beta = vec![0.0; c_count];
        let mut g_gamma = vec![0.0; c_count];
        let mut g_log_eta = 0.0;

        for point in &self.points {
            let k_count = point.dists.len();
            // stable softmax over -d/eta
            let min_d = point.dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut w: Vec<f64> = point
                .dists
                .iter()
                .map(|&d| ((min_d - d) / eta).exp())
                .collect();
            let wsum: f64 = w.iter().sum();
            for x in &mut w {
                *x /= wsum;
            }

            let mut scores = params.beta.clone();
            for k in 0..k_count {
                for c in 0..c_count {
                    let sign = if point.labels[k] == c { 1.0 } else { -1.0 };
                    scores[c] +=
                        w[k] * (point.act[k * c_count + c] + params.gamma[c] * sign);
                }
            }
            let probs = softmax(&scores)?;
            loss -= probs[point.target].max(f64::MIN_POSITIVE).ln();

            if want_grad {
                // g_c = p_c - 1[c = target]
                for c in 0..c_count {
                    let g = probs[c] - if c == point.target { 1.0 } else { 0.0 };
                    g_beta[c] += g;
                    let mut sign_mass = 0.0;
                    for k in 0..k_count {
                        let sign = if point.labels[k] == c { 1.0 } else { -1.0 };
                        sign_mass += w[k] * sign;
                    }
                    g_gamma[c] += g * sign_mass;
                }
                // d w_k / d eta = w_k (d_k - dbar) / eta^2; chain through
                // log eta multiplies by eta.
                let dbar: f64 = w.iter().zip(&point.dists).map(|(&wk, &dk)| wk * dk).sum();
                for k in 0..k_count {
                    let mut per_neighbor = 0.0;
                    for c in 0..c_count {
                        let g = probs[c] - if c == point.target { 1.0 } else { 0.0 };
                        let sign = if point.labels[k] == c { 1.0 } else { -1.0 };
                        per_neighbor +=
                            g * (point.act[k * c_count + c] + params.gamma[c] * sign);
                    }
                    g_log_eta += per_neighbor * w[k] * (point.dists[k] - dbar) / eta;
                }
            }
        }

        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite knn fit loss".into()));
        }
        let grad = want_grad.then(|| KnnGrad {
            beta: g_beta.iter().map(|g| g / n).collect(),
            gamma: g_gamma.iter().map(|g| g / n).collect(),
            log_eta: g_log_eta / n,
        });
        Ok((loss, grad))
    }

    /// Fraction of points whose score argmax matches the fit target.
    pub fn agreement(&self, params: &KnnParams) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let c_count = self.num_classes;
        let eta = params.log_eta.exp();
        let mut hits = 0usize;
        for point in &self.points {
            let min_d = point.dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut w: Vec<f64> = point
                .dists
                .iter()
                .map(|&d| ((min_d - d) / eta).exp())
                .collect();
            let wsum: f64 = w.iter().sum();
            for x in &mut w {
                *x /= wsum;
            }
            let mut scores = params.beta.clone();
            for k in 0..point.dists.len() {
                for c in 0..c_count {
                    let sign = if point.labels[k] == c { 1.0 } else { -1.0 };
                    scores[c] +=
                        w[k] * (point.act[k * c_count + c] + params.gamma[c] * sign);
                }
            }
            if argmax(&scores) == point.target {
                hits += 1;
            }
        }
        hits as f64 / self.points.len() as f64
    }
}

/// Fit the approximation on a 50/50 split of the calibration set.
pub fn fit_knn(
    bundle: &DatasetBundle,
    config: &RunConfig,
    train_index: &VectorIndex,
) -> Result<KnnModel> {
    fit_knn_with_options(bundle, config, train_index, &FitOptions::default())
}

pub fn fit_knn_with_options(
    bundle: &DatasetBundle,
    config: &RunConfig,
    train_index: &VectorIndex,
    options: &FitOptions,
) -> Result<KnnModel> {
    let queries: Vec<Vec<f64>> = bundle
        .calibration
        .iter()
        .map(|i| i.exemplar.clone())
        .collect();
    let lists = train_index.query_batch_topk(&queries, config.k_neighbors)?;
    fit_knn_from_lists(bundle, config, &lists, options)
}

/// As [`fit_knn`], but with the calibration-to-train neighbor lists already
/// computed (one list per calibration instance, in order).
pub fn fit_knn_from_lists(
    bundle: &DatasetBundle,
    config: &RunConfig,
    cal_neighbor_lists: &[Vec<Neighbor>],
    options: &FitOptions,
) -> Result<KnnModel> {
    if bundle.calibration.len() < 2 {
        return Err(Error::InvalidData(
            "fitting needs at least 2 calibration instances".into(),
        ));
    }
    if cal_neighbor_lists.len() != bundle.calibration.len() {
        return Err(Error::InvalidData(
            "one neighbor list per calibration instance is required".into(),
        ));
    }
    let c_count = bundle.num_classes;

    // Deterministic 50/50 split by seeded shuffle of calibration positions.
    let mut order: Vec<usize> = (0..bundle.calibration.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let half = bundle.calibration.len() / 2;
    let (fit_pos, val_pos) = order.split_at(half.max(1));

    let gather = |positions: &[usize]| -> Result<KnnFitProblem> {
        let refs: Vec<&Instance> = positions.iter().map(|&p| &bundle.calibration[p]).collect();
        let lists: Vec<Vec<Neighbor>> = positions
            .iter()
            .map(|&p| cal_neighbor_lists[p].clone())
            .collect();
        KnnFitProblem::from_points(&refs, &lists, &bundle.train, c_count, config.activation)
    };
    let fit_problem = gather(fit_pos)?;
    let val_problem = gather(val_pos)?;

    let eta0 = fit_problem.mean_nearest_distance().max(1e-6);
    let mut params = KnnParams {
        beta: vec![0.0; c_count],
        gamma: vec![0.5; c_count],
        log_eta: eta0.ln(),
    };

    let mut best_params = params.clone();
    let mut best_agreement = val_problem.agreement(&params);
    let mut best_epoch = 0usize;
    let mut last_loss = f64::INFINITY;
    let mut epochs_run = 0usize;

    for epoch in 1..=options.max_epochs {
        epochs_run = epoch;
        let (loss, grad) = fit_problem.loss_and_grad(&params)?;
        for c in 0..c_count {
            params.beta[c] -= options.learning_rate * grad.beta[c];
            params.gamma[c] -= options.learning_rate * grad.gamma[c];
        }
        params.log_eta -= options.learning_rate * grad.log_eta;

        let agreement = val_problem.agreement(&params);
        if agreement > best_agreement {
            best_agreement = agreement;
            best_params = params.clone();
            best_epoch = epoch;
        }
        if epoch - best_epoch >= options.patience {
            break;
        }
        // converged: the objective has stopped moving
        if (last_loss - loss).abs() < 1e-7 * loss.abs().max(1.0) {
            break;
        }
        last_loss = loss;
    }

    let final_loss = fit_problem.loss(&best_params)?;
    Ok(KnnModel {
        beta: best_params.beta,
        gamma: best_params.gamma,
        eta: best_params.log_eta.exp(),
        k: config.k_neighbors,
        activation: config.activation,
        meta: Some(FitMeta {
            seed: config.seed,
            epochs_run,
            best_epoch,
            agreement: best_agreement,
            final_loss,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nb(row: usize, distance: f64) -> Neighbor {
        Neighbor { row, distance }
    }

    fn train_instance(id: &str, label: usize, logits: Vec<f64>, exemplar: Vec<f64>) -> Instance {
        Instance {
            id: id.into(),
            split: Split::Train,
            label: Some(label),
            logits: Some(logits),
            exemplar,
        }
    }

    #[test]
    fn equal_distances_split_weight_evenly() {
        for eta in [0.01, 1.0, 100.0] {
            let w = knn_weights(&[nb(0, 3.0), nb(1, 3.0)], eta).unwrap();
            assert!((w[0] - 0.5).abs() < 1e-15);
            assert!((w[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_ratio_matches_closed_form() {
        // distances [0, ln 2] with eta = 1: exp(0) / (exp(0) + exp(-ln 2))
        let w = knn_weights(&[nb(0, 0.0), nb(1, 2.0_f64.ln())], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn huge_eta_gives_uniform_weights() {
        let w = knn_weights(&[nb(0, 0.0), nb(1, 5.0), nb(2, 11.0)], 1e9).unwrap();
        for &x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_sum_to_one_and_decrease_with_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut ds: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 10.0).collect();
            ds.sort_by(f64::total_cmp);
            let neighbors: Vec<Neighbor> =
                ds.iter().enumerate().map(|(i, &d)| nb(i, d)).collect();
            let eta = 0.1 + rng.random::<f64>() * 5.0;
            let w = knn_weights(&neighbors, eta).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for pair in w.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn weights_are_permutation_equivariant() {
        let fwd = knn_weights(&[nb(0, 1.0), nb(1, 4.0), nb(2, 0.5)], 2.0).unwrap();
        let rev = knn_weights(&[nb(2, 0.5), nb(1, 4.0), nb(0, 1.0)], 2.0).unwrap();
        assert!((fwd[0] - rev[2]).abs() < 1e-15);
        assert!((fwd[1] - rev[1]).abs() < 1e-15);
        assert!((fwd[2] - rev[0]).abs() < 1e-15);
    }

    #[test]
    fn weights_reject_bad_inputs() {
        assert!(knn_weights(&[], 1.0).is_err());
        assert!(knn_weights(&[nb(0, 1.0)], 0.0).is_err());
        assert!(knn_weights(&[nb(0, 1.0)], -2.0).is_err());
    }

    #[test]
    fn underflow_distances_stay_finite() {
        let w = knn_weights(&[nb(0, 0.0), nb(1, 1e6)], 1e-3).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_parameters_reduce_to_activated_logits() {
        // K=1, beta=0, gamma=0, tanh: scores == tanh(nearest logits)
        let train = vec![train_instance("t0", 1, vec![0.4, -2.0], vec![0.0])];
        let model =
            KnnModel::new(vec![0.0, 0.0], vec![0.0, 0.0], 1.0, 1, Activation::Tanh).unwrap();
        let out = model
            .forward_from_neighbors(&[nb(0, 0.7)], &train)
            .unwrap();
        assert!((out.scores[0] - 0.4_f64.tanh()).abs() < 1e-15);
        assert!((out.scores[1] - (-2.0_f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn label_term_isolation() {
        // K=1, beta=0, gamma=1, identity, zero logits, neighbor label 0:
        // scores = [+1, -1]
        let train = vec![train_instance("t0", 0, vec![0.0, 0.0], vec![0.0])];
        let model = KnnModel::new(
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            1.0,
            1,
            Activation::Identity,
        )
        .unwrap();
        let out = model.forward_from_neighbors(&[nb(0, 2.0)], &train).unwrap();
        assert_eq!(out.scores, vec![1.0, -1.0]);
        assert_eq!(out.pred, 0);
        let sum: f64 = out.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_neighbor_case_matches_hand_summed_formula() {
        // Independent scalar recomputation of the score formula.
        let train = vec![
            train_instance("t0", 0, vec![0.2, -0.3], vec![0.0]),
            train_instance("t1", 1, vec![-0.1, 0.4], vec![1.0]),
        ];
        let beta = [0.1, -0.1];
        let gamma = [0.5, 0.5];
        let model =
            KnnModel::new(beta.to_vec(), gamma.to_vec(), 1.0, 2, Activation::Tanh).unwrap();
        let neighbors = [nb(0, 0.0), nb(1, 1.0)];
        let out = model.forward_from_neighbors(&neighbors, &train).unwrap();

        let w0 = 1.0 / (1.0 + (-1.0_f64).exp());
        let w1 = (-1.0_f64).exp() / (1.0 + (-1.0_f64).exp());
        let expect_0 = beta[0]
            + w0 * (0.2_f64.tanh() + gamma[0] * 1.0)
            + w1 * ((-0.1_f64).tanh() + gamma[0] * -1.0);
        let expect_1 = beta[1]
            + w0 * ((-0.3_f64).tanh() + gamma[1] * -1.0)
            + w1 * (0.4_f64.tanh() + gamma[1] * 1.0);
        assert!((out.scores[0] - expect_0).abs() < 1e-12);
        assert!((out.scores[1] - expect_1).abs() < 1e-12);
    }

    /// Two well-separated clusters; logits computed from the exemplar, so a
    /// label-vote solution reproduces the model's predictions exactly.
    fn separable_bundle(n_train: usize, n_cal: usize, seed: u64) -> DatasetBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |split: Split, n: usize, tag: &str| -> Vec<Instance> {
            (0..n)
                .map(|i| {
                    let label = i % 2;
                    let center = if label == 0 { -4.0 } else { 4.0 };
                    let x = vec![
                        center + rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    ];
                    let logits = vec![-x[0], x[0]];
                    Instance {
                        id: format!("{tag}{i}"),
                        split,
                        label: Some(label),
                        logits: Some(logits),
                        exemplar: x,
                    }
                })
                .collect()
        };
        DatasetBundle {
            num_classes: 2,
            dim: 2,
            train: make(Split::Train, n_train, "tr"),
            calibration: make(Split::Calibration, n_cal, "ca"),
            test: vec![],
            label_names: None,
        }
    }

    #[test]
    fn fit_reaches_high_agreement_on_separable_data() {
        let bundle = separable_bundle(200, 200, 42);
        let config = RunConfig {
            k_neighbors: 5,
            ..RunConfig::default()
        };
        let index = VectorIndex::from_instances(&bundle.train).unwrap();
        let model = fit_knn(&bundle, &config, &index).unwrap();
        let meta = model.meta.as_ref().unwrap();
        assert!(
            meta.agreement >= 0.99,
            "agreement {} below 0.99",
            meta.agreement
        );
        assert!(model.eta > 0.0);
    }

    #[test]
    fn constant_logits_terminate_with_majority_agreement() {
        let mut bundle = separable_bundle(50, 60, 7);
        for inst in bundle.train.iter_mut().chain(bundle.calibration.iter_mut()) {
            inst.logits = Some(vec![0.0, 0.0]);
        }
        let config = RunConfig {
            k_neighbors: 3,
            ..RunConfig::default()
        };
        let index = VectorIndex::from_instances(&bundle.train).unwrap();
        let model = fit_knn(&bundle, &config, &index).unwrap();
        // every target is argmax([0,0]) = 0, so the majority rate is 1.0
        let meta = model.meta.as_ref().unwrap();
        assert!((meta.agreement - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_tiny_calibration() {
        let mut bundle = separable_bundle(10, 2, 3);
        bundle.calibration.truncate(1);
        let index = VectorIndex::from_instances(&bundle.train).unwrap();
        assert!(fit_knn(&bundle, &RunConfig::default(), &index).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let bundle = separable_bundle(60, 40, 9);
        let config = RunConfig {
            k_neighbors: 4,
            ..RunConfig::default()
        };
        let index = VectorIndex::from_instances(&bundle.train).unwrap();
        let problem = KnnFitProblem::from_bundle(&bundle, &config, &index).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let params = KnnParams {
                beta: (0..2).map(|_| rng.random::<f64>() - 0.5).collect(),
                gamma: (0..2).map(|_| rng.random::<f64>()).collect(),
                log_eta: rng.random::<f64>() * 2.0 - 1.0,
            };
            let (_, grad) = problem.loss_and_grad(&params).unwrap();

            let check = |set: &dyn Fn(&mut KnnParams, f64), analytic: f64| {
                let h = 1e-5;
                let mut plus = params.clone();
                set(&mut plus, h);
                let mut minus = params.clone();
                set(&mut minus, -h);
                let fd = (problem.loss(&plus).unwrap() - problem.loss(&minus).unwrap())
                    / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "analytic {analytic} vs fd {fd} (rel {rel})");
            };
            for c in 0..2 {
                check(&|p: &mut KnnParams, h: f64| p.beta[c] += h, grad.beta[c]);
                check(&|p: &mut KnnParams, h: f64| p.gamma[c] += h, grad.gamma[c]);
            }
            check(&|p: &mut KnnParams, h: f64| p.log_eta += h, grad.log_eta);
        }
    }
}
