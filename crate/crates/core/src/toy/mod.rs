//! A small trainable network for comparing cluster and bilinear decoding on
//! synthetic images with one-pixel-wide structures.

pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod net;
pub mod train;

pub use data::{gen_synthetic, gen_synthetic_with, SynthConfig, SyntheticSample, CLASSES};
pub use experiment::{run_experiment, DecoderRun, ExperimentConfig, ExperimentReport};
pub use net::{forward, loss_and_grad, predict, Decoder, ForwardPass, ToyNetParams, Trunk, TOY_K};
pub use train::{evaluate, train, train_from, EvalReport, TrainConfig, TrainOutcome};
