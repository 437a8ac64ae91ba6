//! Final-block attention substrate: self-correlation base modes, layer-averaged
//! cross-correlation attention and their residual blend.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_unit_interval, Error, Result};
use crate::tensor::{self, Matrix};
use crate::vit::{scaled_scores, AttentionTrace, LastBlockState};

/// Score construction for the final block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseModeKind {
    /// Unmodified `q kᵀ`.
    Vanilla,
    /// `q qᵀ + k kᵀ`.
    Sclip,
    /// `q qᵀ`.
    ClearClip,
    /// `k kᵀ` plus a Gaussian neighbourhood prior over the patch grid.
    Naclip,
}

impl BaseModeKind {
    pub const ALL: [BaseModeKind; 4] = [
        BaseModeKind::Vanilla,
        BaseModeKind::Sclip,
        BaseModeKind::ClearClip,
        BaseModeKind::Naclip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseModeKind::Vanilla => "vanilla",
            BaseModeKind::Sclip => "sclip",
            BaseModeKind::ClearClip => "clearclip",
            BaseModeKind::Naclip => "naclip",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseMode {
    pub kind: BaseModeKind,
    pub keep_final_residual: bool,
    pub keep_final_ffn: bool,
    /// Standard deviation of the neighbourhood prior, in patches.
    pub prior_sigma: f32,
}

pub const DEFAULT_PRIOR_SIGMA: f32 = 5.0;

impl BaseMode {
    /// Mode with its default final-block flags: ClearCLIP drops the residual
    /// and FFN, every other mode keeps both.
    pub fn new(kind: BaseModeKind) -> Self {
        let keep = kind != BaseModeKind::ClearClip;
        Self {
            kind,
            keep_final_residual: keep,
            keep_final_ffn: keep,
            prior_sigma: DEFAULT_PRIOR_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BaseModeKind::Naclip
            && (self.prior_sigma.is_nan() || self.prior_sigma <= 0.0)
        {
            return Err(Error::Validation(format!(
                "naclip prior sigma must be positive, got {}",
                self.prior_sigma
            )));
        }
        Ok(())
    }
}

impl Default for BaseMode {
    fn default() -> Self {
        Self::new(BaseModeKind::Naclip)
    }
}

/// `exp(−‖p − q‖² / 2σ²)` between patch grid cells, embedded in a
/// `(1 + hw)²` matrix whose cls row and column are zero.
pub fn neighborhood_prior(h: usize, w: usize, sigma: f32) -> Matrix {
    let n = h * w;
    let denom = 2.0 * sigma * sigma;
    Matrix::from_fn(n + 1, n + 1, |i, j| {
        if i == 0 || j == 0 {
            return 0.0;
        }
        let (pi, pj) = (i - 1, j - 1);
        let dy = (pi / w) as f32 - (pj / w) as f32;
        let dx = (pi % w) as f32 - (pj % w) as f32;
        libm::expf(-(dx * dx + dy * dy) / denom)
    })
}

/// Pre-softmax per-head scores `S_s` of the chosen base mode.
pub fn scsa_scores(state: &LastBlockState, mode: &BaseMode) -> Result<Vec<Matrix>> {
    mode.validate()?;
    let prior = match mode.kind {
        BaseModeKind::Naclip => Some(neighborhood_prior(
            state.grid.0,
            state.grid.1,
            mode.prior_sigma,
        )),
        _ => None,
    };
    state
        .q
        .iter()
        .zip(&state.k)
        .map(|(q, k)| {
            let s = match mode.kind {
                BaseModeKind::Vanilla => scaled_scores(q, k)?,
                BaseModeKind::Sclip => {
                    let mut s = scaled_scores(q, q)?;
                    s.add_assign(&scaled_scores(k, k)?)?;
                    s
                }
                BaseModeKind::ClearClip => scaled_scores(q, q)?,
                BaseModeKind::Naclip => {
                    let mut s = scaled_scores(k, k)?;
                    if let Some(prior) = &prior {
                        s.add_assign(prior)?;
                    }
                    s
                }
            };
            Ok(s)
        })
        .collect()
}

/// Per-head `softmax(S_s)`.
pub fn scsa_attention(scores: &[Matrix]) -> Vec<Matrix> {
    scores.iter().map(tensor::row_softmax).collect()
}

/// How intermediate layers are picked for averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationStrategy {
    /// Layers `1..=n`.
    Cumulative,
    /// A contiguous window `s..=e`.
    SlidingWindow,
}

impl AggregationStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AggregationStrategy::Cumulative => "cla",
            AggregationStrategy::SlidingWindow => "swa",
        }
    }
}

/// Inclusive 1-based layer range; layer 1 is the first transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregationSpec {
    pub strategy: AggregationStrategy,
    pub start: usize,
    pub end: usize,
}

pub const DEFAULT_SWA_WINDOW: usize = 4;

impl AggregationSpec {
    pub fn cumulative(end: usize) -> Self {
        Self {
            strategy: AggregationStrategy::Cumulative,
            start: 1,
            end,
        }
    }

    /// Window of [`DEFAULT_SWA_WINDOW`] layers starting at `start`.
    pub fn sliding(start: usize) -> Self {
        Self::sliding_range(start, start + DEFAULT_SWA_WINDOW - 1)
    }

    pub fn sliding_range(start: usize, end: usize) -> Self {
        Self {
            strategy: AggregationStrategy::SlidingWindow,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    /// `1 ≤ s ≤ e ≤ depth`, and cumulative ranges start at 1.
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.end > depth {
            return Err(Error::Validation(format!(
                "layer range {}:{} is outside 1:{depth}",
                self.start, self.end
            )));
        }
        if self.strategy == AggregationStrategy::Cumulative && self.start != 1 {
            return Err(Error::Validation(format!(
                "cumulative aggregation starts at layer 1, got {}",
                self.start
            )));
        }
        Ok(())
    }
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self::sliding(6)
    }
}

/// Per-head mean of the recorded attention over the selected layers.
pub fn aggregate_cross_correlation(
    trace: &AttentionTrace,
    spec: &AggregationSpec,
) -> Result<Vec<Matrix>> {
    spec.validate(trace.depth())?;
    let n = trace.tokens();
    let inv = 1.0 / spec.len() as f32;
    (0..trace.heads())
        .map(|head| {
            let mut acc = Matrix::zeros(n, n);
            for layer in spec.start..=spec.end {
                let a = trace
                    .get(layer, head)
                    .ok_or_else(|| Error::Validation(format!("layer {layer} missing")))?;
                acc.add_assign(a)?;
            }
            acc.scale(inv);
            Ok(acc)
        })
        .collect()
}

/// Mean over heads.
pub fn head_average(heads: &[Matrix]) -> Result<Matrix> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Validation("no heads to average".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for h in heads {
        acc.add_assign(h)?;
    }
    acc.scale(1.0 / heads.len() as f32);
    Ok(acc)
}

/// `(1 − λ)·a + λ·b`, elementwise.
pub(crate) fn convex_blend(a: &Matrix, b: &Matrix, lambda: f32) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "blend of {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let keep = 1.0 - lambda;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| keep * x + lambda * y)
        .collect();
    Matrix::new(a.rows(), a.cols(), data)
}

/// `A_rcs = (1 − λ)·A_s + λ·A_c` for one head.
pub fn rcs_blend(a_s: &Matrix, a_c: &Matrix, lambda_rcs: f32) -> Result<Matrix> {
    check_unit_interval("lambda_rcs", lambda_rcs)?;
    convex_blend(a_s, a_c, lambda_rcs)
}
