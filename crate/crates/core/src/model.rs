//! In-memory ViT parameters and class-text embeddings.
//!
//! Weight matrices are stored input-major: a projection maps a row vector `x`
//! to `x · W`, so `W` has shape `in × out`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// MLP nonlinearity of the transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `x · sigmoid(1.702 x)`, used by the original CLIP checkpoints.
    #[default]
    QuickGelu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::QuickGelu => tensor::quick_gelu(x),
            Activation::Gelu => tensor::gelu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::QuickGelu => "quick_gelu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "quick_gelu" => Some(Activation::QuickGelu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub embed_dim: usize,
    /// Per-channel RGB mean on the `[0, 1]` scale.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub eps: f32,
    pub activation: Activation,
}

impl ModelMeta {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    pub fn apply(&self, x: &Matrix, eps: f32) -> Result<Matrix> {
        tensor::layer_norm(x, &self.gamma, &self.beta, eps)
    }
}

/// Affine map `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = tensor::matmul(x, &self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub mlp_fc: Linear,
    pub mlp_proj: Linear,
}

impl LayerWeights {
    /// `proj(act(fc(LN2(x))))`, without the residual.
    pub fn mlp(&self, x: &Matrix, meta: &ModelMeta) -> Result<Matrix> {
        let normed = self.ln2.apply(x, meta.eps)?;
        let hidden = self.mlp_fc.forward(&normed)?;
        let act = meta.activation;
        self.mlp_proj.forward(&hidden.map(|v| act.apply(v)))
    }
}

/// Every parameter of the visual tower.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsBundle {
    pub meta: ModelMeta,
    /// `3·P² × d`; patch pixels flattened channel-major, then row, then column.
    pub patch_proj: Matrix,
    pub cls_token: Vec<f32>,
    /// `(1 + h₀·w₀) × d`; row 0 is the cls position.
    pub pos_embed: Matrix,
    /// Applied after positional embedding when the checkpoint has one.
    pub pre_ln: Option<LayerNormParams>,
    pub layers: Vec<LayerWeights>,
    pub final_ln: LayerNormParams,
    /// `d × d_text`.
    pub visual_proj: Matrix,
}

struct ShapeCheck<'a> {
    meta: &'a ModelMeta,
}

impl ShapeCheck<'_> {
    fn matrix(&self, name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
        if m.shape() != (rows, cols) {
            return Err(Error::Validation(format!(
                "tensor \"{name}\" has shape {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::Validation(format!(
                "tensor \"{name}\" has non-finite entries"
            )));
        }
        Ok(())
    }

    fn vector(&self, name: &str, v: &[f32], len: usize) -> Result<()> {
        if v.len() != len {
            return Err(Error::Validation(format!(
                "tensor \"{name}\" has length {}, expected {len}",
                v.len()
            )));
        }
        Ok(())
    }

    fn norm(&self, name: &str, ln: &LayerNormParams) -> Result<()> {
        let d = self.meta.width;
        self.vector(&format!("{name}.gamma"), &ln.gamma, d)?;
        self.vector(&format!("{name}.beta"), &ln.beta, d)
    }

    fn linear(&self, name: &str, lin: &Linear, rows: usize, cols: usize) -> Result<()> {
        self.matrix(name, &lin.weight, rows, cols)?;
        // bias names mirror the container naming: Wq -> bq, mlp_fc.W -> mlp_fc.b
        let bias_name = match name.rsplit_once(".W") {
            Some((prefix, "")) => format!("{prefix}.b"),
            Some((prefix, suffix)) => format!("{prefix}.b{suffix}"),
            None => format!("{name}.b"),
        };
        self.vector(&bias_name, &lin.bias, cols)
    }
}

impl WeightsBundle {
    /// Source positional grid side `h₀` (the grid is square).
    pub fn pos_grid_side(&self) -> Result<usize> {
        let patches = self.pos_embed.rows().saturating_sub(1);
        let side = libm::sqrt(patches as f64) as usize;
        let side = (side.saturating_sub(1)..=side + 1)
            .find(|s| s * s == patches)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "pos_embed has {patches} patch rows, which is not a square grid"
                ))
            })?;
        Ok(side)
    }

    /// Checks every tensor against the declared geometry.
    pub fn validate(&self) -> Result<()> {
        let meta = &self.meta;
        if meta.patch_size == 0 || meta.heads == 0 || meta.layers == 0 || meta.width == 0 {
            return Err(Error::Validation(format!(
                "meta has zero-sized geometry: P={} L={} H={} d={}",
                meta.patch_size, meta.layers, meta.heads, meta.width
            )));
        }
        if !meta.width.is_multiple_of(meta.heads) {
            return Err(Error::Validation(format!(
                "width {} is not divisible by {} heads",
                meta.width, meta.heads
            )));
        }
        if meta.eps.is_nan() || meta.eps <= 0.0 {
            return Err(Error::Validation(format!(
                "eps must be positive, got {}",
                meta.eps
            )));
        }
        if meta.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Validation("image std must be positive".into()));
        }
        if self.layers.len() != meta.layers {
            return Err(Error::Validation(format!(
                "meta declares {} layers but {} are present",
                meta.layers,
                self.layers.len()
            )));
        }
        let check = ShapeCheck { meta };
        let d = meta.width;
        let p2 = meta.patch_size * meta.patch_size;
        check.matrix("patch_proj", &self.patch_proj, 3 * p2, d)?;
        check.vector("cls_token", &self.cls_token, d)?;
        if self.pos_embed.cols() != d {
            return Err(Error::Validation(format!(
                "tensor \"pos_embed\" has {} columns, expected {d}",
                self.pos_embed.cols()
            )));
        }
        self.pos_grid_side()?;
        if let Some(ln) = &self.pre_ln {
            check.norm("pre_ln", ln)?;
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            check.norm(&format!("{p}.ln1"), &layer.ln1)?;
            check.linear(&format!("{p}.Wq"), &layer.query, d, d)?;
            check.linear(&format!("{p}.Wk"), &layer.key, d, d)?;
            check.linear(&format!("{p}.Wv"), &layer.value, d, d)?;
            check.linear(&format!("{p}.Wo"), &layer.out, d, d)?;
            check.norm(&format!("{p}.ln2"), &layer.ln2)?;
            let hidden = layer.mlp_fc.weight.cols();
            check.linear(&format!("{p}.mlp_fc.W"), &layer.mlp_fc, d, hidden)?;
            check.linear(&format!("{p}.mlp_proj.W"), &layer.mlp_proj, hidden, d)?;
        }
        check.norm("final_ln", &self.final_ln)?;
        check.matrix("visual_proj", &self.visual_proj, d, meta.embed_dim)?;
        Ok(())
    }
}

/// Unit-norm text embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    embeds: Matrix,
    names: Vec<String>,
}

impl ClassEmbeddings {
    /// Validates and re-normalizes every row to unit L2 norm.
    pub fn new(embeds: Matrix, names: Vec<String>) -> Result<Self> {
        if embeds.rows() == 0 || embeds.cols() == 0 {
            return Err(Error::Validation("class embedding tensor is empty".into()));
        }
        if names.len() != embeds.rows() {
            return Err(Error::Validation(format!(
                "{} class names for {} embedding rows",
                names.len(),
                embeds.rows()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::Validation(format!(
                    "duplicate class name \"{name}\""
                )));
            }
        }
        if !embeds.is_finite() {
            return Err(Error::Validation(
                "class embeddings contain non-finite entries".into(),
            ));
        }
        for (i, name) in names.iter().enumerate() {
            if tensor::l2_norm(embeds.row(i)) == 0.0 {
                return Err(Error::Validation(format!(
                    "class \"{name}\" has a zero embedding"
                )));
            }
        }
        Ok(Self {
            embeds: tensor::l2_normalize_rows(&embeds),
            names,
        })
    }

    pub fn embeds(&self) -> &Matrix {
        &self.embeds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeds.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{random_bundle, SyntheticSpec};
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn random_bundle_validates() {
        let b = random_bundle(SyntheticSpec::tiny(1));
        b.validate().unwrap();
        assert_eq!(b.pos_grid_side().unwrap(), 4);
        assert_eq!(b.meta.head_dim(), 8);
    }

    #[test]
    fn wrong_query_shape_names_the_tensor() {
        let mut b = random_bundle(SyntheticSpec::tiny(1));
        b.layers[0].query.weight = Matrix::zeros(16, 17);
        let err = b.validate().unwrap_err().to_string();
        assert!(err.contains("layer0.Wq"), "{err}");
        let mut b = random_bundle(SyntheticSpec::tiny(1));
        b.layers[1].mlp_proj.bias.pop();
        let err = b.validate().unwrap_err().to_string();
        assert!(err.contains("layer1.mlp_proj.b"), "{err}");
    }

    #[test]
    fn class_embeddings_normalize_and_validate() {
        let unit = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        let names = vec!["cat".to_string(), "dog".to_string()];
        let c = ClassEmbeddings::new(unit.clone(), names.clone()).unwrap();
        assert_eq!(c.embeds(), &unit);

        let long = Matrix::from_rows(&[&[2.0, 0.0, 0.0]]).unwrap();
        let c = ClassEmbeddings::new(long, vec!["a".into()]).unwrap();
        assert_eq!(c.embeds().row(0), &[1.0, 0.0, 0.0]);

        assert!(ClassEmbeddings::new(Matrix::zeros(0, 3), vec![]).is_err());
        let nan = Matrix::from_rows(&[&[f32::NAN, 1.0]]).unwrap();
        assert!(ClassEmbeddings::new(nan, vec!["x".into()]).is_err());
        let dup = ClassEmbeddings::new(unit, vec!["cat".into(), "cat".into()]);
        assert!(dup.is_err());
    }
}
