//! Dense inference: surgery attention in the final block, cosine logits
//! against class embeddings, the feedback pass and sliding-window tiling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    aggregate_cross_correlation, head_average, rcs_blend, scsa_attention, scsa_scores,
    AggregationSpec, BaseMode,
};
use crate::error::{check_unit_interval, Error, Result};
use crate::model::{ClassEmbeddings, WeightsBundle};
use crate::sfr::{blend_sfr, resclip_attention, sfr_matrix, PatchSegMap, SfrSpec};
use crate::tensor::{self, FeatureGrid, Matrix};
use crate::vit::{
    attend, forward_record, patch_embed, AttentionTrace, ImageTensor, LastBlockState,
};

/// Every knob of the final-block surgery and the tiling protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SurgeryConfig {
    pub base_mode: BaseMode,
    pub lambda_rcs: f32,
    pub lambda_sfr: f32,
    pub agg: AggregationSpec,
    pub sfr: SfrSpec,
    /// Multiplier on `Ŝ` before it is blended into logit-scale scores.
    pub gain: f32,
    pub feedback_passes: usize,
    /// Replace per-head `A_c` with its head average.
    pub head_avg: bool,
    pub window: usize,
    pub stride: usize,
    pub short_side: usize,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        Self {
            base_mode: BaseMode::default(),
            lambda_rcs: 0.5,
            lambda_sfr: 0.7,
            agg: AggregationSpec::default(),
            sfr: SfrSpec::default(),
            gain: 1.0,
            feedback_passes: 1,
            head_avg: false,
            window: 224,
            stride: 112,
            short_side: 336,
        }
    }
}

impl SurgeryConfig {
    /// Checks the bundle-independent invariants.
    pub fn validate(&self) -> Result<()> {
        check_unit_interval("lambda_rcs", self.lambda_rcs)?;
        check_unit_interval("lambda_sfr", self.lambda_sfr)?;
        self.base_mode.validate()?;
        self.sfr.gaussian.validate()?;
        if !self.gain.is_finite() {
            return Err(Error::Validation(format!(
                "gain must be finite, got {}",
                self.gain
            )));
        }
        if self.stride < 1 || self.window < self.stride {
            return Err(Error::Validation(format!(
                "need window >= stride >= 1, got window {} stride {}",
                self.window, self.stride
            )));
        }
        if self.short_side < self.window {
            return Err(Error::Validation(format!(
                "short side {} is smaller than the window {}",
                self.short_side, self.window
            )));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the layer range against the bundle depth.
    pub fn validate_for(&self, bundle: &WeightsBundle) -> Result<()> {
        self.validate()?;
        self.agg.validate(bundle.meta.layers.saturating_sub(1))
    }
}

/// Forward state of one image, reusable across feedback passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub state: LastBlockState,
    pub trace: AttentionTrace,
}

impl EncodedImage {
    pub fn grid(&self) -> (usize, usize) {
        self.state.grid
    }
}

pub fn encode(image: &ImageTensor, bundle: &WeightsBundle) -> Result<EncodedImage> {
    let tokens = patch_embed(image, bundle)?;
    let (state, trace) = forward_record(&tokens, bundle)?;
    Ok(EncodedImage { state, trace })
}

/// Per-head intermediate matrices of the final-block surgery.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalAttention {
    /// `S_s`, pre-softmax.
    pub scores: Vec<Matrix>,
    /// `A_s = softmax(S_s)`.
    pub base: Vec<Matrix>,
    /// `A_c`.
    pub cross: Vec<Matrix>,
    /// `A_rcs`.
    pub rcs: Vec<Matrix>,
    /// `A_ResCLIP`, present when a feedback mask was supplied.
    pub refined: Option<Vec<Matrix>>,
}

impl FinalAttention {
    /// The attention the final block applies.
    pub fn applied(&self) -> &[Matrix] {
        self.refined.as_deref().unwrap_or(&self.rcs)
    }
}

fn cross_attention(trace: &AttentionTrace, cfg: &SurgeryConfig) -> Result<Vec<Matrix>> {
    let per_head = aggregate_cross_correlation(trace, &cfg.agg)?;
    if cfg.head_avg {
        let avg = head_average(&per_head)?;
        Ok(vec![avg; per_head.len()])
    } else {
        Ok(per_head)
    }
}

/// Builds `S_s`, `A_s`, `A_c`, `A_rcs` and, given a mask, `A_ResCLIP`.
pub fn final_attention(
    encoded: &EncodedImage,
    cfg: &SurgeryConfig,
    mask: Option<&PatchSegMap>,
) -> Result<FinalAttention> {
    let scores = scsa_scores(&encoded.state, &cfg.base_mode)?;
    let base = scsa_attention(&scores);
    let cross = cross_attention(&encoded.trace, cfg)?;
    let rcs = base
        .iter()
        .zip(&cross)
        .map(|(a_s, a_c)| rcs_blend(a_s, a_c, cfg.lambda_rcs))
        .collect::<Result<Vec<_>>>()?;
    let refined = match mask {
        None => None,
        Some(mask) => {
            let (h, w) = encoded.grid();
            if (mask.height(), mask.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "feedback mask {}x{} for a {h}x{w} token grid",
                    mask.height(),
                    mask.width()
                )));
            }
            let s_hat = sfr_matrix(mask, &cfg.sfr)?;
            let heads = scores
                .iter()
                .zip(&cross)
                .map(|(s_s, a_c)| {
                    let s_r = blend_sfr(s_s, &s_hat, cfg.lambda_sfr, cfg.gain)?;
                    resclip_attention(&s_r, a_c, cfg.lambda_rcs)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(heads)
        }
    };
    Ok(FinalAttention {
        scores,
        base,
        cross,
        rcs,
        refined,
    })
}

/// Runs the final block with the given per-head attention and projects the
/// patch tokens into the text embedding space (`hw × d_text`).
pub fn finish_final_block(
    state: &LastBlockState,
    attn: &[Matrix],
    bundle: &WeightsBundle,
    mode: &BaseMode,
) -> Result<Matrix> {
    let layer = &bundle.layers[state.layer];
    let mut x = attend(attn, &state.v, layer)?;
    if mode.keep_final_residual {
        x.add_assign(&state.input)?;
    }
    if mode.keep_final_ffn {
        let mlp = layer.mlp(&x, &bundle.meta)?;
        x.add_assign(&mlp)?;
    }
    let patches = Matrix::new(x.rows() - 1, x.cols(), x.as_slice()[x.cols()..].to_vec())?;
    let normed = bundle.final_ln.apply(&patches, bundle.meta.eps)?;
    tensor::matmul(&normed, &bundle.visual_proj)
}

/// Patch features in text space together with their grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatures {
    pub features: Matrix,
    pub grid: (usize, usize),
}

/// Features from an already encoded image; the RCS-only path when `mask`
/// is `None`.
pub fn features_from_encoded(
    encoded: &EncodedImage,
    bundle: &WeightsBundle,
    cfg: &SurgeryConfig,
    mask: Option<&PatchSegMap>,
) -> Result<DenseFeatures> {
    let attn = final_attention(encoded, cfg, mask)?;
    let features = finish_final_block(&encoded.state, attn.applied(), bundle, &cfg.base_mode)?;
    Ok(DenseFeatures {
        features,
        grid: encoded.grid(),
    })
}

pub fn dense_features(
    image: &ImageTensor,
    bundle: &WeightsBundle,
    cfg: &SurgeryConfig,
    mask: Option<&PatchSegMap>,
) -> Result<DenseFeatures> {
    cfg.validate_for(bundle)?;
    features_from_encoded(&encode(image, bundle)?, bundle, cfg, mask)
}

/// The unblended base-mode path: the final block applies `softmax(S_s)`.
pub fn base_mode_features(
    encoded: &EncodedImage,
    bundle: &WeightsBundle,
    mode: &BaseMode,
) -> Result<DenseFeatures> {
    let attn = scsa_attention(&scsa_scores(&encoded.state, mode)?);
    Ok(DenseFeatures {
        features: finish_final_block(&encoded.state, &attn, bundle, mode)?,
        grid: encoded.grid(),
    })
}

/// Per-location class scores, `h × w × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid(pub FeatureGrid);

impl LogitGrid {
    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    /// Index of the largest score at each location; ties pick the lower index.
    pub fn argmax(&self) -> Vec<u32> {
        self.0
            .as_slice()
            .chunks_exact(self.classes().max(1))
            .map(|scores| {
                let mut best = 0;
                for (c, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }

    pub fn to_patch_map(&self) -> Result<PatchSegMap> {
        PatchSegMap::new(self.height(), self.width(), self.classes(), self.argmax())
    }

    pub fn to_seg_map(&self) -> SegMap {
        SegMap {
            height: self.height(),
            width: self.width(),
            labels: self.argmax(),
        }
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<LogitGrid> {
        Ok(LogitGrid(tensor::bilinear_resize(&self.0, out_h, out_w)?))
    }
}

/// Pixel-resolution class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Cosine similarity of every patch feature with every class embedding. A
/// zero feature row scores −1 against all classes.
pub fn dense_logits(features: &DenseFeatures, classes: &ClassEmbeddings) -> Result<LogitGrid> {
    let f = &features.features;
    if f.cols() != classes.dim() {
        return Err(Error::Shape(format!(
            "features of width {} against class embeddings of width {}",
            f.cols(),
            classes.dim()
        )));
    }
    let normed = tensor::l2_normalize_rows(f);
    let mut cos = tensor::matmul_transposed(&normed, classes.embeds())?;
    for i in 0..f.rows() {
        if tensor::l2_norm(f.row(i)) == 0.0 {
            cos.row_mut(i).fill(-1.0);
        }
    }
    let (h, w) = features.grid;
    Ok(LogitGrid(FeatureGrid::from_matrix(cos, h, w)?))
}

/// Pass 1 without feedback, then `feedback_passes` refinement passes that
/// feed the previous argmax back as the SFR mask.
pub fn resclip_infer_encoded(
    encoded: &EncodedImage,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<(PatchSegMap, LogitGrid)> {
    let mut logits = dense_logits(&features_from_encoded(encoded, bundle, cfg, None)?, classes)?;
    let mut map = logits.to_patch_map()?;
    for _ in 0..cfg.feedback_passes {
        logits = dense_logits(
            &features_from_encoded(encoded, bundle, cfg, Some(&map))?,
            classes,
        )?;
        map = logits.to_patch_map()?;
    }
    Ok((map, logits))
}

pub fn resclip_infer(
    image: &ImageTensor,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<(PatchSegMap, LogitGrid)> {
    cfg.validate_for(bundle)?;
    resclip_infer_encoded(&encode(image, bundle)?, bundle, classes, cfg)
}

/// Window placement in image pixels. `height`/`width` are the part of the
/// window that lies inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn axis_starts(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let count = len.saturating_sub(window).div_ceil(stride) + 1;
    (0..count)
        .map(|k| {
            let end = (k * stride + window).min(len);
            let start = end.saturating_sub(window);
            (start, end - start)
        })
        .collect()
}

/// Row-major tile grid; the last tile on each axis is aligned to the edge.
pub fn plan_tiles(height: usize, width: usize, window: usize, stride: usize) -> Vec<Tile> {
    let ys = axis_starts(height, window, stride);
    let xs = axis_starts(width, window, stride);
    ys.iter()
        .flat_map(|&(top, h)| {
            xs.iter().map(move |&(left, w)| Tile {
                top,
                left,
                height: h,
                width: w,
            })
        })
        .collect()
}

/// Runs one window and returns its logits at tile pixel size.
///
/// The window is zero-padded past the image border, and centre-cropped to a
/// multiple of the patch size when needed; patch logits are stretched back
/// over the whole window.
pub fn infer_tile(
    image: &ImageTensor,
    tile: &Tile,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<LogitGrid> {
    let p = bundle.meta.patch_size;
    let (win_h, win_w) = (cfg.window, cfg.window);
    let (crop_h, crop_w) = ((win_h / p) * p, (win_w / p) * p);
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::Validation(format!(
            "window {} is smaller than the patch size {p}",
            cfg.window
        )));
    }
    let (off_y, off_x) = ((win_h - crop_h) / 2, (win_w - crop_w) / 2);
    let window = image.crop_padded(tile.top + off_y, tile.left + off_x, crop_h, crop_w);
    let (_, logits) = resclip_infer_encoded(&encode(&window, bundle)?, bundle, classes, cfg)?;
    let full = logits.resize(win_h, win_w)?;
    if (tile.height, tile.width) == (win_h, win_w) {
        return Ok(full);
    }
    let c = full.classes();
    let mut out = FeatureGrid::zeros(tile.height, tile.width, c);
    for y in 0..tile.height {
        for x in 0..tile.width {
            out.pixel_mut(y, x).copy_from_slice(full.0.pixel(y, x));
        }
    }
    Ok(LogitGrid(out))
}

/// Averages overlapping tile logits; tiles are accumulated in plan order.
pub fn fuse_tiles(
    height: usize,
    width: usize,
    tiles: &[Tile],
    logits: &[LogitGrid],
) -> Result<LogitGrid> {
    let classes = logits
        .first()
        .map(|l| l.classes())
        .ok_or_else(|| Error::Validation("no tiles to fuse".into()))?;
    if tiles.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} tiles but {} logit grids",
            tiles.len(),
            logits.len()
        )));
    }
    let mut sum = FeatureGrid::zeros(height, width, classes);
    let mut count = vec![0u32; height * width];
    for (tile, grid) in tiles.iter().zip(logits) {
        if (grid.height(), grid.width(), grid.classes()) != (tile.height, tile.width, classes) {
            return Err(Error::Shape(format!(
                "tile logits {}x{}x{} for a {}x{} tile",
                grid.height(),
                grid.width(),
                grid.classes(),
                tile.height,
                tile.width
            )));
        }
        for y in 0..tile.height {
            for x in 0..tile.width {
                let (iy, ix) = (tile.top + y, tile.left + x);
                count[iy * width + ix] += 1;
                for (s, v) in sum.pixel_mut(iy, ix).iter_mut().zip(grid.0.pixel(y, x)) {
                    *s += *v;
                }
            }
        }
    }
    for (i, &n) in count.iter().enumerate() {
        if n == 0 {
            return Err(Error::Validation(format!(
                "pixel ({}, {}) is not covered by any tile",
                i / width,
                i % width
            )));
        }
        if n > 1 {
            let inv = n as f32;
            for s in sum.pixel_mut(i / width, i % width) {
                *s /= inv;
            }
        }
    }
    Ok(LogitGrid(sum))
}

/// Number of tiles covering each pixel.
pub fn coverage(height: usize, width: usize, tiles: &[Tile]) -> Vec<u32> {
    let mut count = vec![0u32; height * width];
    for t in tiles {
        for y in t.top..t.top + t.height {
            for x in t.left..t.left + t.width {
                count[y * width + x] += 1;
            }
        }
    }
    count
}

/// Sequential tiling over an image already at working resolution.
pub fn sliding_window_infer(
    image: &ImageTensor,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<(LogitGrid, SegMap)> {
    cfg.validate_for(bundle)?;
    let tiles = plan_tiles(image.height(), image.width(), cfg.window, cfg.stride);
    let logits = tiles
        .iter()
        .map(|t| infer_tile(image, t, bundle, classes, cfg))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_tiles(image.height(), image.width(), &tiles, &logits)?;
    let seg = fused.to_seg_map();
    Ok((fused, seg))
}

/// Output size that scales the shorter side to `short_side`.
pub fn short_side_size(height: usize, width: usize, short_side: usize) -> (usize, usize) {
    let scale = short_side as f64 / height.min(width) as f64;
    let (h, w) = if height <= width {
        (short_side, libm::round(width as f64 * scale) as usize)
    } else {
        (libm::round(height as f64 * scale) as usize, short_side)
    };
    (h.max(1), w.max(1))
}

/// Resizes to the working resolution, tiles, and maps the fused logits back
/// to the input resolution.
pub fn segment_image(
    image: &ImageTensor,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<(LogitGrid, SegMap)> {
    let (h, w) = short_side_size(image.height(), image.width(), cfg.short_side);
    let working = image.resize(h, w)?;
    let (logits, _) = sliding_window_infer(&working, bundle, classes, cfg)?;
    let logits = logits.resize(image.height(), image.width())?;
    let seg = logits.to_seg_map();
    Ok((logits, seg))
}
