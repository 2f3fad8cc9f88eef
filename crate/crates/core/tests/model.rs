//! Whole-network behavior: end-to-end gradients against finite differences,
//! no dead parameters after a few optimizer steps, and forward determinism.

mod common;

use msvsr::data::{make_synthetic_dataset, FrameSequence};
use msvsr::metrics::LossConfig;
use msvsr::model::{register_model, Model, ModelConfig};
use msvsr::train::{train, TrainConfig, TrainOptions};
use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[test]
fn end_to_end_gradients_match_finite_differences() {
    common::e2e_fd_probes(20, 1e-2);
}

#[test]
fn three_steps_update_every_parameter_tensor() {
    let mc = ModelConfig::tiny();
    let mut tc = TrainConfig::desk();
    tc.batch_size = 1;
    tc.patch_size = 8;
    tc.n_frames = 3;
    tc.flow_freeze_iters = 0;
    tc.seed = 11;
    tc.loss = LossConfig::default();
    let clips = make_synthetic_dataset(2, 3, 32, 1, 40).unwrap();

    let mut tc0 = tc.clone();
    tc0.total_iters = 0;
    let init = train(&mc, &tc0, &clips, &TrainOptions::default()).unwrap();
    let mut tc3 = tc.clone();
    tc3.total_iters = 3;
    let after = train(&mc, &tc3, &clips, &TrainOptions::default()).unwrap();

    let names = {
        let (store, _) = register_model::<f32>(&mc, 0).unwrap();
        store.ids().map(|id| store.name(id).to_string()).collect::<Vec<_>>()
    };
    assert_eq!(init.checkpoint.weights.len(), after.checkpoint.weights.len());
    for (i, (a, b)) in init
        .checkpoint
        .weights
        .iter()
        .zip(&after.checkpoint.weights)
        .enumerate()
    {
        assert!(
            a.iter().zip(b.iter()).any(|(x, y)| x != y),
            "parameter '{}' never received an update",
            names[i]
        );
    }
}

#[test]
fn forward_is_deterministic_and_seed_sensitive() {
    let cfg = ModelConfig::tiny();
    let clips = make_synthetic_dataset(1, 2, 32, 1, 8).unwrap();
    let lr = &clips[0].1;
    let model = Model::<f32>::new(cfg.clone(), 3).unwrap();
    let a = model.forward(lr).unwrap();
    let b = model.forward(lr).unwrap();
    for (x, y) in a.sr_frames.frames.iter().zip(&b.sr_frames.frames) {
        assert_eq!(x, y);
    }
    let other = Model::<f32>::new(cfg, 4).unwrap();
    let c = other.forward(lr).unwrap();
    assert_ne!(a.sr_frames.frames[0], c.sr_frames.frames[0]);
}

#[test]
fn non_divisible_sizes_pad_and_crop() {
    let cfg = ModelConfig::tiny();
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let frames: Vec<Array3<f32>> = (0..2)
        .map(|_| Array3::from_shape_simple_fn((3, 10, 7), || rng.random_range(0.0..1.0)))
        .collect();
    let lr = FrameSequence::new(frames, "odd").unwrap();
    let out = model.forward(&lr).unwrap();
    assert_eq!(out.sr_frames.dims(), (40, 28));
    assert!(out
        .sr_frames
        .frames
        .iter()
        .all(|f| f.iter().all(|v| v.is_finite())));
}
