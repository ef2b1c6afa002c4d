#![allow(dead_code)]

use mcqtok::data::{ImageTensor, IMAGE_SIZE};
use mcqtok::model::{
    Batch, Factorization, ModelConfig, QuantizerConfig, QuantizerKind, SupervisionPoint,
};
use mcqtok::rng::stream;
use mcqtok::train::TrainConfig;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normals(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = stream(seed, "test-normals", 0);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn uniforms(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = stream(seed, "test-uniforms", 0);
    (0..n).map(|_| rng.random::<f32>()).collect()
}

/// A model small enough for finite differences.
pub fn tiny_model(factorization: Factorization, supervision: SupervisionPoint) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        width: 8,
        latent_dim: 4,
        heads: 2,
        mlp_blocks: 1,
        factorization,
        supervision,
        temperature: 0.5,
    }
}

pub fn quantizer(kind: QuantizerKind, n: usize, k: usize) -> QuantizerConfig {
    QuantizerConfig {
        scheme: kind,
        sub_codebooks: n,
        codebook_size: k,
        ..QuantizerConfig::default()
    }
}

pub fn random_batch(seed: u64, size: usize, image: usize, patch: usize, classes: usize) -> Batch {
    let px = uniforms(seed, size * image * image * 3);
    let images: Vec<ImageTensor> = px
        .chunks_exact(image * image * 3)
        .map(|c| ImageTensor::new(image, image, c.to_vec()).unwrap())
        .collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let labels = (0..size).map(|i| i % classes).collect();
    Batch::new(&refs, labels, patch).unwrap()
}

/// A fast training config on a small in-memory shapes dataset.
pub fn small_train_config(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.width = 16;
    cfg.model.latent_dim = 4;
    cfg.model.heads = 4;
    cfg.quantizer.codebook_size = 16;
    cfg.quantizer.revival_interval = 3;
    cfg.optim.steps = steps;
    cfg.optim.batch_size = 16;
    cfg.optim.eval_interval = 2;
    cfg.optim.checkpoint_interval = 0;
    cfg.data.count = 160;
    cfg.data.num_classes = 4;
    assert_eq!(cfg.model.image_size, IMAGE_SIZE);
    cfg
}
pub mod gradcheck;
