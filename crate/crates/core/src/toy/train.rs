//! Momentum SGD with the poly learning-rate schedule, and held-out evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::data::{SyntheticSample, CLASSES};
use super::net::{loss_and_grad, predict, Decoder, ToyNetParams, TOY_K};
use crate::error::{invalid, Error, Result};
use crate::metrics::{boundary_f_score, ConfusionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub decoder: Decoder,
    pub seed: u64,
    pub k_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            base_lr: 0.05,
            momentum: 0.9,
            poly_power: 0.9,
            decoder: Decoder::Cluster,
            seed: 42,
            k_dim: TOY_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::InvalidConfig("poly power must be non-negative".into()));
        }
        if self.k_dim == 0 {
            return Err(Error::InvalidConfig("k_dim must be positive".into()));
        }
        Ok(())
    }

    /// `base · (1 − t/T)^power`.
    pub fn learning_rate(&self, t: usize) -> f64 {
        let frac = 1.0 - t as f64 / self.iterations.max(1) as f64;
        self.base_lr * frac.max(0.0).powf(self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ToyNetParams,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// Trains from the initialization fixed by `config.seed`.
pub fn train(config: &TrainConfig, dataset: &[SyntheticSample]) -> Result<TrainOutcome> {
    config.validate()?;
    let params = ToyNetParams::init(config.seed, CLASSES, config.k_dim)?;
    train_from(params, config, dataset)
}

/// Trains `params` in place of a fresh initialization.
pub fn train_from(
    mut params: ToyNetParams,
    config: &TrainConfig,
    dataset: &[SyntheticSample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut velocity = params.zeros_like();
    let mut losses = Vec::with_capacity(config.iterations);

    for t in 0..config.iterations {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        let results: Vec<(f64, ToyNetParams)> = batch
            .par_iter()
            .map(|&i| loss_and_grad(&params, &dataset[i].image, &dataset[i].labels, config.decoder))
            .collect::<Result<_>>()?;

        // fixed summation order, whatever the thread schedule
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = params.zeros_like();
        for (l, g) in &results {
            loss += l * scale;
            grad.add_scaled(scale, g);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration: t, loss });
        }
        losses.push(loss);

        let lr = config.learning_rate(t);
        for ((_, v), (_, g)) in velocity.sections_mut().into_iter().zip(grad.sections()) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = config.momentum * *vi + gi;
            }
        }
        params.add_scaled(-lr, &velocity);
        if !params.is_finite() {
            return Err(Error::TrainingDiverged { iteration: t, loss });
        }
    }
    Ok(TrainOutcome { params, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub pixel_acc: f64,
    pub class_iou: Vec<Option<f64>>,
    /// Mean boundary F-score at 1 px tolerance.
    pub boundary_f1px: f64,
}

/// Scores predictions on `dataset`, pooling the confusion matrix over all images.
pub fn evaluate(params: &ToyNetParams, dataset: &[SyntheticSample], mode: Decoder) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(invalid!("evaluation set is empty"));
    }
    let preds: Vec<_> = dataset
        .par_iter()
        .map(|s| predict(params, &s.image, mode))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(params.classes());
    let mut bf = 0.0;
    for (p, s) in preds.iter().zip(dataset) {
        cm.add(p, &s.labels)?;
        bf += boundary_f_score(p, &s.labels, 1)?;
    }
    let scores = cm.scores();
    Ok(EvalReport {
        miou: scores.miou,
        pixel_acc: scores.pixel_acc,
        class_iou: scores.class_iou,
        boundary_f1px: bf / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::data::gen_synthetic;

    #[test]
    fn poly_schedule() {
        let cfg = TrainConfig {
            iterations: 100,
            base_lr: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(0), 0.1);
        let last = cfg.learning_rate(99);
        assert!((last - 0.1 * (1.0f64 / 100.0).powf(0.9)).abs() < 1e-15);
        assert!((cfg.learning_rate(50) - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_keep_init() {
        let data = gen_synthetic(1, 2, 32).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &data).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(out.params, ToyNetParams::init(cfg.seed, CLASSES, cfg.k_dim).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let data = gen_synthetic(1, 1, 32).unwrap();
        let bad_lr = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&bad_lr, &data), Err(Error::InvalidConfig(_))));
        assert!(train(&TrainConfig::default(), &[]).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let data = gen_synthetic(2, 4, 32).unwrap();
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 2,
            base_lr: 1e200,
            decoder: Decoder::Bilinear,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &data), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn short_run_is_deterministic_and_learns() {
        let data = gen_synthetic(3, 16, 32).unwrap();
        for decoder in Decoder::ALL {
            let cfg = TrainConfig {
                iterations: 30,
                batch_size: 4,
                decoder,
                ..TrainConfig::default()
            };
            let a = train(&cfg, &data).unwrap();
            let b = train(&cfg, &data).unwrap();
            assert_eq!(a, b);
            let head: f64 = a.losses[..5].iter().sum();
            let tail: f64 = a.losses[25..].iter().sum();
            assert!(tail < head, "{decoder}: {head} -> {tail}");
        }
    }

    #[test]
    fn evaluation_of_degenerate_predictor() {
        // all-zero head: every logit ties, argmax picks background everywhere
        let data = gen_synthetic(4, 4, 32).unwrap();
        let mut p = ToyNetParams::init(0, CLASSES, TOY_K).unwrap();
        p.head.weight.iter_mut().for_each(|w| *w = 0.0);
        let r = evaluate(&p, &data, Decoder::Bilinear).unwrap();
        let total = (data.len() * 32 * 32) as f64;
        let bg = data
            .iter()
            .flat_map(|s| s.labels.labels())
            .filter(|&&l| l == crate::toy::data::BACKGROUND)
            .count() as f64;
        assert!((r.pixel_acc - bg / total).abs() < 1e-12);
        assert!((r.miou - (bg / total) / 3.0).abs() < 1e-12);
    }
}
