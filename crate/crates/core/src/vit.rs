//! Patch embedding and the pre-norm transformer stack.
//!
//! [`forward_record`] runs every block except the last one and keeps each
//! head's post-softmax attention. The last block is only projected to q/k/v;
//! its attention is rebuilt by the surgery code.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelMeta, WeightsBundle};
use crate::tensor::{self, FeatureGrid, Matrix};

/// Normalized image, `height × width × 3`, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Scales 8-bit RGB to `[0, 1]` and applies per-channel mean/std.
    pub fn from_rgb8(height: usize, width: usize, pixels: &[u8], meta: &ModelMeta) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i % 3;
                (p as f32 / 255.0 - meta.mean[c]) / meta.std[c]
            })
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Copies the `h × w` window at `(top, left)`. Pixels past the image
    /// border are zero, which is the channel mean after normalization.
    pub fn crop_padded(&self, top: usize, left: usize, h: usize, w: usize) -> ImageTensor {
        let mut data = alloc::vec![0.0f32; h * w * 3];
        for y in 0..h {
            let sy = top + y;
            if sy >= self.height {
                break;
            }
            for x in 0..w {
                let sx = left + x;
                if sx >= self.width {
                    break;
                }
                let src = (sy * self.width + sx) * 3;
                let dst = (y * w + x) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        ImageTensor {
            height: h,
            width: w,
            data,
        }
    }

    /// Bilinear resize to `out_h × out_w`.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<ImageTensor> {
        let grid = FeatureGrid::new(self.height, self.width, 3, self.data.clone())?;
        let out = tensor::bilinear_resize(&grid, out_h, out_w)?;
        Ok(ImageTensor {
            height: out_h,
            width: out_w,
            data: out.into_matrix().into_vec(),
        })
    }
}

/// `(1 + h·w) × d` tokens; row 0 is the cls token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Post-softmax attention of every recorded layer, indexed `[layer][head]`
/// with layer 0 being the first transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: Vec<Vec<Matrix>>,
}

impl AttentionTrace {
    pub fn new(layers: Vec<Vec<Matrix>>) -> Result<Self> {
        let heads = layers.first().map_or(0, |l| l.len());
        let n = layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, |m| m.rows());
        for (i, layer) in layers.iter().enumerate() {
            if layer.len() != heads || layer.iter().any(|m| m.shape() != (n, n)) {
                return Err(Error::Shape(format!(
                    "trace layer {i} does not match {heads} heads of {n}x{n}"
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Number of recorded layers (`L − 1` for a forward pass).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn tokens(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, |m| m.rows())
    }

    /// Attention of 1-based layer `layer` and head `head`.
    pub fn get(&self, layer: usize, head: usize) -> Option<&Matrix> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .and_then(|l| l.get(head))
    }

    pub fn layer(&self, layer: usize) -> Option<&[Matrix]> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .map(|l| l.as_slice())
    }
}

/// Everything the surgery needs from the final block.
#[derive(Debug, Clone, PartialEq)]
pub struct LastBlockState {
    /// Residual stream entering the final block.
    pub input: Matrix,
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub grid: (usize, usize),
    /// Zero-based index of the final block in `WeightsBundle::layers`.
    pub layer: usize,
}

impl LastBlockState {
    pub fn heads(&self) -> usize {
        self.q.len()
    }

    pub fn head_dim(&self) -> usize {
        self.q.first().map_or(0, |m| m.cols())
    }

    pub fn tokens(&self) -> usize {
        self.input.rows()
    }
}

/// Resamples the patch rows of a square positional table to `h × w`.
pub fn interpolate_pos_embed(pos: &Matrix, h: usize, w: usize) -> Result<Matrix> {
    let patches = pos.rows().saturating_sub(1);
    let side = (0..=patches).find(|s| s * s >= patches).unwrap_or(0);
    if pos.rows() == 0 || side * side != patches || side == 0 {
        return Err(Error::Validation(format!(
            "positional table with {patches} patch rows is not a square grid"
        )));
    }
    let d = pos.cols();
    let grid = FeatureGrid::new(side, side, d, pos.as_slice()[d..].to_vec())?;
    let resized = tensor::bilinear_resize(&grid, h, w)?;
    let mut data = Vec::with_capacity((1 + h * w) * d);
    data.extend_from_slice(pos.row(0));
    data.extend_from_slice(resized.as_slice());
    Matrix::new(1 + h * w, d, data)
}

/// Splits the image into `P × P` patches, projects them, prepends the cls
/// token and adds the (interpolated) positional embedding.
pub fn patch_embed(image: &ImageTensor, bundle: &WeightsBundle) -> Result<TokenSequence> {
    let p = bundle.meta.patch_size;
    if image.height == 0
        || image.width == 0
        || !image.height.is_multiple_of(p)
        || !image.width.is_multiple_of(p)
    {
        return Err(Error::Shape(format!(
            "image {}x{} is not divisible into {p}x{p} patches",
            image.height, image.width
        )));
    }
    let (h, w) = (image.height / p, image.width / p);
    let patch_len = 3 * p * p;
    let mut patches = Matrix::zeros(h * w, patch_len);
    for gy in 0..h {
        for gx in 0..w {
            let row = patches.row_mut(gy * w + gx);
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        row[c * p * p + y * p + x] = image.at(gy * p + y, gx * p + x, c);
                    }
                }
            }
        }
    }
    let projected = tensor::matmul(&patches, &bundle.patch_proj)?;
    let d = bundle.meta.width;
    let mut data = Vec::with_capacity((1 + h * w) * d);
    data.extend_from_slice(&bundle.cls_token);
    data.extend_from_slice(projected.as_slice());
    let mut tokens = Matrix::new(1 + h * w, d, data)?;
    tokens.add_assign(&interpolate_pos_embed(&bundle.pos_embed, h, w)?)?;
    if let Some(ln) = &bundle.pre_ln {
        tokens = ln.apply(&tokens, bundle.meta.eps)?;
    }
    Ok(TokenSequence {
        tokens,
        grid: (h, w),
    })
}

fn split_heads(x: &Matrix, heads: usize) -> Vec<Matrix> {
    let dh = x.cols() / heads;
    (0..heads).map(|h| x.column_block(h * dh, dh)).collect()
}

/// Per-head q, k, v of `LN1(x)` for one block.
pub fn project_qkv(
    x: &Matrix,
    layer: &LayerWeights,
    meta: &ModelMeta,
) -> Result<(Vec<Matrix>, Vec<Matrix>, Vec<Matrix>)> {
    let normed = layer.ln1.apply(x, meta.eps)?;
    let q = layer.query.forward(&normed)?;
    let k = layer.key.forward(&normed)?;
    let v = layer.value.forward(&normed)?;
    Ok((
        split_heads(&q, meta.heads),
        split_heads(&k, meta.heads),
        split_heads(&v, meta.heads),
    ))
}

/// `softmax(a bᵀ / √d_h)` for one head.
pub fn scaled_scores(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut s = tensor::matmul_transposed(a, b)?;
    s.scale(1.0 / libm::sqrtf(a.cols() as f32));
    Ok(s)
}

/// Applies per-head attention to v, concatenates heads and runs the output
/// projection.
pub fn attend(attn: &[Matrix], v: &[Matrix], layer: &LayerWeights) -> Result<Matrix> {
    if attn.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} attention maps for {} value heads",
            attn.len(),
            v.len()
        )));
    }
    let heads = attn
        .iter()
        .zip(v)
        .map(|(a, vh)| tensor::matmul(a, vh))
        .collect::<Result<Vec<_>>>()?;
    layer.out.forward(&Matrix::hstack(&heads)?)
}

/// One unmodified pre-norm block; returns the new stream and per-head attention.
pub fn block_forward(
    x: &Matrix,
    layer: &LayerWeights,
    meta: &ModelMeta,
) -> Result<(Matrix, Vec<Matrix>)> {
    let (q, k, v) = project_qkv(x, layer, meta)?;
    let attn = q
        .iter()
        .zip(&k)
        .map(|(qh, kh)| scaled_scores(qh, kh).map(|s| tensor::row_softmax(&s)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = attend(&attn, &v, layer)?;
    out.add_assign(x)?;
    let mlp = layer.mlp(&out, meta)?;
    out.add_assign(&mlp)?;
    Ok((out, attn))
}

/// Runs blocks `1..L−1`, recording attention, and projects the final block.
pub fn forward_record(
    tokens: &TokenSequence,
    bundle: &WeightsBundle,
) -> Result<(LastBlockState, AttentionTrace)> {
    let meta = &bundle.meta;
    if tokens.tokens.cols() != meta.width {
        return Err(Error::Shape(format!(
            "tokens have width {}, bundle expects {}",
            tokens.tokens.cols(),
            meta.width
        )));
    }
    if tokens.tokens.rows() != 1 + tokens.num_patches() {
        return Err(Error::Shape(format!(
            "{} tokens for a {}x{} grid",
            tokens.tokens.rows(),
            tokens.grid.0,
            tokens.grid.1
        )));
    }
    let (last, body) = bundle
        .layers
        .split_last()
        .ok_or_else(|| Error::Validation("bundle has no layers".into()))?;
    let mut x = tokens.tokens.clone();
    let mut recorded = Vec::with_capacity(body.len());
    for layer in body {
        let (next, attn) = block_forward(&x, layer, meta)?;
        recorded.push(attn);
        x = next;
    }
    let (q, k, v) = project_qkv(&x, last, meta)?;
    let state = LastBlockState {
        input: x,
        q,
        k,
        v,
        grid: tokens.grid,
        layer: body.len(),
    };
    Ok((state, AttentionTrace::new(recorded)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{random_bundle, random_image, SyntheticSpec};
    use alloc::vec;
    use sha2::{Digest, Sha256};

    fn hash_floats(values: &[f32]) -> alloc::string::String {
        let mut hasher = Sha256::new();
        for v in values {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| alloc::format!("{b:02x}"))
            .collect()
    }

    #[test]
    fn patch_embed_geometry() {
        let mut spec = SyntheticSpec::tiny(3);
        spec.patch_size = 16;
        spec.grid_side = 14;
        let b = random_bundle(spec);
        let t = patch_embed(&random_image(224, 224, 1), &b).unwrap();
        assert_eq!(t.grid, (14, 14));
        assert_eq!(t.tokens.rows(), 197);
        let t = patch_embed(&random_image(64, 64, 1), &b).unwrap();
        assert_eq!(t.grid, (4, 4));
        assert_eq!(t.tokens.rows(), 17);
        assert!(matches!(
            patch_embed(&random_image(100, 224, 1), &b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pos_embed_identity_constant_and_ramp() {
        let pos = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f32);
        assert_eq!(interpolate_pos_embed(&pos, 2, 2).unwrap(), pos);

        let constant = Matrix::from_fn(5, 2, |i, _| if i == 0 { 9.0 } else { 1.5 });
        let up = interpolate_pos_embed(&constant, 5, 7).unwrap();
        assert_eq!(up.row(0), &[9.0, 9.0]);
        assert!((1..36).all(|r| up.row(r) == [1.5, 1.5]));

        // linear ramp along columns: [0, 2] in both grid rows
        let ramp = Matrix::from_rows(&[&[7.0], &[0.0], &[2.0], &[0.0], &[2.0]]).unwrap();
        let up = interpolate_pos_embed(&ramp, 3, 3).unwrap();
        assert_eq!(up.get(0, 0), 7.0);
        // middle column samples source x = 0.5 -> mean of 0 and 2
        for r in 0..3 {
            assert_eq!(up.get(1 + r * 3 + 1, 0), 1.0);
        }
        let bad = Matrix::zeros(4, 2);
        assert!(matches!(
            interpolate_pos_embed(&bad, 2, 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn trace_depth_and_stochastic_rows() {
        let b = random_bundle(SyntheticSpec::tiny(5));
        let tokens = patch_embed(&random_image(16, 16, 2), &b).unwrap();
        let (state, trace) = forward_record(&tokens, &b).unwrap();
        assert_eq!(trace.depth(), 1);
        assert_eq!(trace.heads(), 2);
        assert_eq!(state.heads(), 2);
        assert_eq!(state.head_dim(), 8);
        assert_eq!(state.tokens(), 17);
        for head in trace.layer(1).unwrap() {
            for i in 0..head.rows() {
                let s: f32 = head.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert!(head.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_golden() {
        let b = random_bundle(SyntheticSpec::tiny(5));
        let tokens = patch_embed(&random_image(16, 16, 2), &b).unwrap();
        let (s1, t1) = forward_record(&tokens, &b).unwrap();
        let (s2, t2) = forward_record(&tokens, &b).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        let digest = hash_floats(s1.input.as_slice());
        assert_eq!(digest, GOLDEN_STATE_DIGEST, "token state digest changed");
    }

    const GOLDEN_STATE_DIGEST: &str =
        "fc47afdb96ee251d502f12c8d41a3864f2bdcdc18e69c32b401d4f307ae3f954";

    #[test]
    fn single_head_matches_direct_attention() {
        let mut spec = SyntheticSpec::tiny(8);
        spec.width = 8;
        spec.heads = 1;
        let b = random_bundle(spec);
        let layer = &b.layers[0];
        let x = patch_embed(&random_image(8, 8, 4), &b).unwrap().tokens;
        let (out, attn) = block_forward(&x, layer, &b.meta).unwrap();
        // direct single-head math, no head split
        let n = layer.ln1.apply(&x, b.meta.eps).unwrap();
        let q = layer.query.forward(&n).unwrap();
        let k = layer.key.forward(&n).unwrap();
        let v = layer.value.forward(&n).unwrap();
        let mut s = tensor::matmul(&q, &k.transpose()).unwrap();
        s.scale(1.0 / 8f32.sqrt());
        let a = tensor::row_softmax(&s);
        assert!(a.max_abs_diff(&attn[0]).unwrap() < 1e-6);
        let mut y = layer.out.forward(&tensor::matmul(&a, &v).unwrap()).unwrap();
        y.add_assign(&x).unwrap();
        let m = layer.mlp(&y, &b.meta).unwrap();
        y.add_assign(&m).unwrap();
        assert!(y.max_abs_diff(&out).unwrap() < 1e-5);
    }

    #[test]
    fn crop_padded_zero_fills() {
        let img = ImageTensor::new(1, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = img.crop_padded(0, 1, 2, 2);
        assert_eq!(
            c.as_slice(),
            &[4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }
}
