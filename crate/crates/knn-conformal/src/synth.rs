//! Seeded synthetic bundles: Gaussian class clusters with an imperfect
//! linear classifier over them.
//!
//! Exemplars for class `c` are drawn `N(mean_c, scale_c^2 I)`. Logits come
//! from the linear discriminant of the cluster geometry,
//! `logit_scale * (<x, mean_c> - |mean_c|^2 / 2) / mean_scale^2`, plus
//! Gaussian noise, so the synthetic "model" makes calibrated-ish but
//! imperfect predictions and the calibration step has real work to do.
//! Distance to the training support is a genuine difficulty signal: points
//! in the cluster overlap are both ambiguous and far from their cluster
//! core.
//!
//! Shifts apply to the test split only: a mean translation of the
//! exemplars (logits are computed from the shifted exemplar, degrading the
//! model naturally) and/or different test label proportions. With no shift
//! the three splits are i.i.d. draws from one law, hence exchangeable.
//!
//! Generation is single-threaded and fully deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Instance, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub cal_size: usize,
    pub test_size: usize,
    /// Per-class cluster centers (`C x D`).
    pub class_means: Vec<Vec<f64>>,
    /// Per-class isotropic cluster scales.
    pub class_scales: Vec<f64>,
    /// Sharpness of the linear logit map.
    pub logit_scale: f64,
    /// Standard deviation of the per-class logit noise.
    pub logit_noise: f64,
    /// Added to every test exemplar before logits are computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_translation: Option<Vec<f64>>,
    /// Test label proportions; train/calibration are uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_proportions: Option<Vec<f64>>,
    pub seed: u64,
}

impl SynthSpec {
    /// Clusters placed on coordinate axes: class `c` centered at
    /// `separation * e_{c mod dim}`.
    pub fn axis_clusters(
        num_classes: usize,
        dim: usize,
        separation: f64,
        scale: f64,
        sizes: (usize, usize, usize),
        seed: u64,
    ) -> Self {
        let class_means = (0..num_classes)
            .map(|c| {
                let mut mean = vec![0.0; dim];
                mean[c % dim] = separation;
                mean
            })
            .collect();
        SynthSpec {
            num_classes,
            dim,
            train_size: sizes.0,
            cal_size: sizes.1,
            test_size: sizes.2,
            class_means,
            class_scales: vec![scale; num_classes],
            logit_scale: 1.0,
            logit_noise: 0.5,
            test_translation: None,
            test_proportions: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if self.train_size == 0 || self.cal_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidConfig("split sizes must be positive".into()));
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.dim)
        {
            return Err(Error::InvalidConfig(
                "class_means must be C vectors of length D".into(),
            ));
        }
        if self.class_scales.len() != self.num_classes
            || self.class_scales.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::InvalidConfig(
                "class_scales must be C positive floats".into(),
            ));
        }
        if !(self.logit_scale > 0.0) || self.logit_noise < 0.0 {
            return Err(Error::InvalidConfig(
                "logit_scale must be positive and logit_noise non-negative".into(),
            ));
        }
        if let Some(t) = &self.test_translation {
            if t.len() != self.dim {
                return Err(Error::InvalidConfig(
                    "test_translation must have length D".into(),
                ));
            }
        }
        if let Some(p) = &self.test_proportions {
            if p.len() != self.num_classes {
                return Err(Error::InvalidConfig(
                    "test_proportions must have length C".into(),
                ));
            }
            if p.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidConfig(
                    "test_proportions must be non-negative".into(),
                ));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "test_proportions must sum to 1, got {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Generate a validated bundle. Identical specs produce bit-identical
/// bundles.
pub fn generate(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mean_scale_sq = {
        let mean: f64 = spec.class_scales.iter().sum::<f64>() / spec.num_classes as f64;
        mean * mean
    };
    let uniform = vec![1.0 / spec.num_classes as f64; spec.num_classes];

    let mut draw_split = |split: Split, tag: &str, size: usize| -> Vec<Instance> {
        let proportions = if split == Split::Test {
            spec.test_proportions.as_deref().unwrap_or(&uniform)
        } else {
            &uniform
        };
        let mut cumulative = Vec::with_capacity(spec.num_classes);
        let mut acc = 0.0;
        for &p in proportions {
            acc += p;
            cumulative.push(acc);
        }
        (0..size)
            .map(|i| {
                let u: f64 = rng.random();
                let label = cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(spec.num_classes - 1);
                let mut x: Vec<f64> = (0..spec.dim)
                    .map(|d| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        spec.class_means[label][d] + spec.class_scales[label] * z
                    })
                    .collect();
                if split == Split::Test {
                    if let Some(t) = &spec.test_translation {
                        for d in 0..spec.dim {
                            x[d] += t[d];
                        }
                    }
                }
                let logits: Vec<f64> = (0..spec.num_classes)
                    .map(|c| {
                        let mean = &spec.class_means[c];
                        let dot: f64 = x.iter().zip(mean).map(|(a, b)| a * b).sum();
                        let half_norm: f64 =
                            mean.iter().map(|m| m * m).sum::<f64>() / 2.0;
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        spec.logit_scale * (dot - half_norm) / mean_scale_sq
                            + spec.logit_noise * noise
                    })
                    .collect();
                Instance {
                    id: format!("{tag}-{i:06}"),
                    split,
                    label: Some(label),
                    logits: Some(logits),
                    exemplar: x,
                }
            })
            .collect()
    };

    let train = draw_split(Split::Train, "tr", spec.train_size);
    let calibration = draw_split(Split::Calibration, "ca", spec.cal_size);
    let test = draw_split(Split::Test, "te", spec.test_size);

    let bundle = DatasetBundle {
        num_classes: spec.num_classes,
        dim: spec.dim,
        train,
        calibration,
        test,
        label_names: None,
    };
    crate::data::validate_bundle(&bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::argmax;

    #[test]
    fn noiseless_separated_clusters_are_learned_perfectly() {
        let mut spec = SynthSpec::axis_clusters(2, 4, 10.0, 1.0, (200, 200, 200), 1);
        spec.logit_noise = 0.0;
        let bundle = generate(&spec).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for inst in bundle
            .train
            .iter()
            .chain(&bundle.calibration)
            .chain(&bundle.test)
        {
            total += 1;
            if argmax(inst.logits.as_ref().unwrap()) == inst.label.unwrap() {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.995, "model accuracy {acc} on separable data");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SynthSpec::axis_clusters(3, 5, 3.0, 1.0, (50, 50, 50), 99);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.test.iter().zip(&b.test) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.label, y.label);
            for (p, q) in x.exemplar.iter().zip(&y.exemplar) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
            for (p, q) in x
                .logits
                .as_ref()
                .unwrap()
                .iter()
                .zip(y.logits.as_ref().unwrap())
            {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        let other = generate(&SynthSpec {
            seed: 100,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(
            a.test[0].exemplar[0].to_bits(),
            other.test[0].exemplar[0].to_bits()
        );
    }

    #[test]
    fn label_shift_hits_target_proportions() {
        let mut spec = SynthSpec::axis_clusters(2, 4, 4.0, 1.0, (10, 10, 5000), 7);
        spec.test_proportions = Some(vec![0.9, 0.1]);
        let bundle = generate(&spec).unwrap();
        let ones = bundle
            .test
            .iter()
            .filter(|i| i.label == Some(1))
            .count() as f64
            / bundle.test.len() as f64;
        assert!((ones - 0.1).abs() < 0.02, "minority proportion {ones}");
    }

    #[test]
    fn translation_moves_test_split_only() {
        let mut spec = SynthSpec::axis_clusters(2, 3, 4.0, 1.0, (100, 100, 100), 5);
        spec.test_translation = Some(vec![0.0, 0.0, 50.0]);
        let bundle = generate(&spec).unwrap();
        let mean_last = |xs: &[Instance]| {
            xs.iter().map(|i| i.exemplar[2]).sum::<f64>() / xs.len() as f64
        };
        assert!(mean_last(&bundle.test) > 40.0);
        assert!(mean_last(&bundle.calibration).abs() < 5.0);
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let mut spec = SynthSpec::axis_clusters(2, 2, 4.0, 1.0, (10, 10, 10), 0);
        spec.test_proportions = Some(vec![0.7, 0.2]);
        assert!(generate(&spec).is_err());
        spec.test_proportions = Some(vec![1.2, -0.2]);
        assert!(generate(&spec).is_err());
    }
}
