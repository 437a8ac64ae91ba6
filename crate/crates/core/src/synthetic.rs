//! Seeded random weights for fixtures and tests.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Activation, LayerNormParams, LayerWeights, Linear, ModelMeta, WeightsBundle};
use crate::tensor::Matrix;

/// Geometry of a synthetic bundle.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Side of the square positional grid.
    pub grid_side: usize,
    pub seed: u64,
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn vector(rng: &mut ChaCha8Rng, len: usize, center: f32, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| center + rng.random_range(-scale..scale))
        .collect()
}

fn norm(rng: &mut ChaCha8Rng, d: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: vector(rng, d, 1.0, 0.1),
        beta: vector(rng, d, 0.0, 0.1),
    }
}

fn linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Linear {
    let scale = 1.0 / libm::sqrtf(rows as f32);
    Linear {
        weight: matrix(rng, rows, cols, scale),
        bias: vector(rng, cols, 0.0, 0.05),
    }
}

/// Builds a shape-consistent bundle with uniformly random parameters.
pub fn random_bundle(spec: SyntheticSpec) -> WeightsBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.width;
    let p = spec.patch_size;
    let hidden = 4 * d;
    let meta = ModelMeta {
        patch_size: p,
        layers: spec.layers,
        heads: spec.heads,
        width: d,
        embed_dim: spec.embed_dim,
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
        eps: 1e-5,
        activation: Activation::QuickGelu,
    };
    let patch_proj = matrix(
        &mut rng,
        3 * p * p,
        d,
        1.0 / libm::sqrtf((3 * p * p) as f32),
    );
    let cls_token = vector(&mut rng, d, 0.0, 0.5);
    let pos_embed = matrix(&mut rng, 1 + spec.grid_side * spec.grid_side, d, 0.5);
    let pre_ln = Some(norm(&mut rng, d));
    let layers = (0..spec.layers)
        .map(|_| LayerWeights {
            ln1: norm(&mut rng, d),
            query: linear(&mut rng, d, d),
            key: linear(&mut rng, d, d),
            value: linear(&mut rng, d, d),
            out: linear(&mut rng, d, d),
            ln2: norm(&mut rng, d),
            mlp_fc: linear(&mut rng, d, hidden),
            mlp_proj: linear(&mut rng, hidden, d),
        })
        .collect();
    let final_ln = norm(&mut rng, d);
    let visual_proj = matrix(&mut rng, d, spec.embed_dim, 1.0 / libm::sqrtf(d as f32));
    WeightsBundle {
        meta,
        patch_proj,
        cls_token,
        pos_embed,
        pre_ln,
        layers,
        final_ln,
        visual_proj,
    }
}

/// Random unit-norm rows with names `class0..`.
pub fn random_class_embeddings(
    classes: usize,
    dim: usize,
    seed: u64,
) -> crate::model::ClassEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = matrix(&mut rng, classes, dim, 1.0);
    let names = (0..classes).map(|i| alloc::format!("class{i}")).collect();
    crate::model::ClassEmbeddings::new(m, names).expect("random rows are nonzero")
}

/// Random normalized image values in `[-2, 2]`, HWC.
pub fn random_image(height: usize, width: usize, seed: u64) -> crate::vit::ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * 3)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    crate::vit::ImageTensor::new(height, width, data).expect("sized buffer")
}

impl SyntheticSpec {
    /// Two layers, width 16, two heads, 4-pixel patches, 4×4 positional grid.
    pub fn tiny(seed: u64) -> Self {
        Self {
            layers: 2,
            width: 16,
            heads: 2,
            patch_size: 4,
            embed_dim: 8,
            grid_side: 4,
            seed,
        }
    }
}
