//! Train both decoders on the same data from the same initialization and
//! score them on a held-out set.

use serde::Serialize;

use super::data::gen_synthetic;
use super::net::{Decoder, ToyNetParams};
use super::train::{evaluate, train, EvalReport, TrainConfig};
use crate::error::Result;

/// Mixed into the seed so the held-out images never coincide with training ones.
const HELD_OUT_SALT: u64 = 0x4845_4c44_4f55_5400;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub decoders: Vec<Decoder>,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub k_dim: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            decoders: Decoder::ALL.to_vec(),
            iterations: t.iterations,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            size: 32,
            train_count: 256,
            test_count: 64,
            k_dim: t.k_dim,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecoderRun {
    pub decoder: Decoder,
    pub loss_curve: Vec<f64>,
    /// Mean of the first and last ten iterations; absent without training.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub metrics: EvalReport,
    #[serde(skip)]
    pub params: ToyNetParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<DecoderRun>,
    /// Cluster minus bilinear mIoU, when both ran.
    pub miou_gain: Option<f64>,
}

impl ExperimentReport {
    pub fn run(&self, decoder: Decoder) -> Option<&DecoderRun> {
        self.runs.iter().find(|r| r.decoder == decoder)
    }
}

fn window_mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let train_set = gen_synthetic(config.seed, config.train_count, config.size)?;
    let test_set = gen_synthetic(config.seed ^ HELD_OUT_SALT, config.test_count, config.size)?;
    let mut runs = Vec::new();
    for &decoder in &config.decoders {
        let tc = TrainConfig {
            iterations: config.iterations,
            batch_size: config.batch_size,
            base_lr: config.base_lr,
            decoder,
            seed: config.seed,
            k_dim: config.k_dim,
            ..TrainConfig::default()
        };
        let out = train(&tc, &train_set)?;
        let n = out.losses.len();
        let w = n.min(10);
        runs.push(DecoderRun {
            decoder,
            initial_loss: window_mean(&out.losses[..w]),
            final_loss: window_mean(&out.losses[n - w..]),
            metrics: evaluate(&out.params, &test_set, decoder)?,
            loss_curve: out.losses,
            params: out.params,
        });
    }
    let mut report = ExperimentReport {
        config: config.clone(),
        runs,
        miou_gain: None,
    };
    if let (Some(c), Some(b)) = (report.run(Decoder::Cluster), report.run(Decoder::Bilinear)) {
        report.miou_gain = Some(c.metrics.miou - b.metrics.miou);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_run_reports_metrics() {
        let cfg = ExperimentConfig {
            iterations: 0,
            train_count: 2,
            test_count: 2,
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.runs.len(), 2);
        assert!(r.runs.iter().all(|run| run.loss_curve.is_empty() && run.final_loss.is_none()));
        assert!(r.miou_gain.is_some());
        // identical initialization for both decoders
        assert_eq!(r.runs[0].params, r.runs[1].params);
    }
}
