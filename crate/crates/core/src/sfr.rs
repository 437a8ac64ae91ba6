//! Semantic feedback refinement.
//!
//! A coarse patch-level segmentation is turned into a score matrix `Ŝ`: for
//! every anchor patch, same-class patches get weight 1 when they are
//! connected to the anchor through same-class cells and a Chebyshev-distance
//! decay otherwise; other classes get 0. Each row is then smoothed with a
//! normalized Gaussian kernel.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::convex_blend;
use crate::error::{check_unit_interval, Error, Result};
use crate::tensor::{self, Matrix};

/// `h × w` grid of class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSegMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u32>,
}

impl PatchSegMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(
                "segmentation map must be non-empty".into(),
            ));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn uniform(height: usize, width: usize, class: u32, num_classes: usize) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    fn check_anchor(&self, i: usize) -> Result<()> {
        if i >= self.labels.len() {
            return Err(Error::Validation(format!(
                "anchor {i} outside a {}x{} map",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Neighbourhood used for "connected through same-class cells".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn name(self) -> &'static str {
        match self {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Smoothing kernel applied to each row of `Ŝ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    /// Odd kernel length.
    pub size: usize,
    pub sigma: f32,
    /// Smooth over the `h × w` grid instead of the flattened row.
    pub two_d: bool,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            size: 5,
            sigma: 1.0,
            two_d: false,
        }
    }
}

impl GaussianSpec {
    pub fn identity() -> Self {
        Self {
            size: 1,
            sigma: 1.0,
            two_d: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "gaussian kernel size must be odd, got {}",
                self.size
            )));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Validation(format!(
                "gaussian sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Normalized taps, centre at index `size / 2`.
    pub fn kernel(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let r = (self.size / 2) as isize;
        let denom = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f32> = (-r..=r)
            .map(|t| libm::expf(-((t * t) as f32) / denom))
            .collect();
        let total = raw.iter().fold(0.0f32, |a, v| a + v);
        Ok(raw.into_iter().map(|v| v / total).collect())
    }
}

/// Convolves `values` with `kernel`, replicating the edge values.
pub fn smooth_1d(values: &[f32], kernel: &[f32]) -> Vec<f32> {
    let n = values.len() as isize;
    let r = (kernel.len() / 2) as isize;
    (0..n)
        .map(|j| {
            kernel.iter().enumerate().fold(0.0f32, |acc, (t, k)| {
                let src = (j + t as isize - r).clamp(0, n - 1);
                acc + k * values[src as usize]
            })
        })
        .collect()
}

/// Separable 2-D smoothing of a row-major `h × w` field (rows, then columns).
pub fn smooth_2d(values: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let mut rows = Vec::with_capacity(values.len());
    for y in 0..h {
        rows.extend(smooth_1d(&values[y * w..(y + 1) * w], kernel));
    }
    let mut out = vec![0.0f32; values.len()];
    for x in 0..w {
        let column: Vec<f32> = (0..h).map(|y| rows[y * w + x]).collect();
        for (y, v) in smooth_1d(&column, kernel).into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    out
}

/// Connected same-class regions of a map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabels {
    regions: Vec<u32>,
}

impl RegionLabels {
    pub fn new(map: &PatchSegMap, connectivity: Connectivity) -> Self {
        let (h, w) = (map.height as isize, map.width as isize);
        let mut regions = vec![u32::MAX; map.len()];
        let mut next = 0u32;
        let mut queue = VecDeque::new();
        for seed in 0..map.len() {
            if regions[seed] != u32::MAX {
                continue;
            }
            let class = map.labels[seed];
            regions[seed] = next;
            queue.push_back(seed);
            while let Some(cell) = queue.pop_front() {
                let (y, x) = ((cell / map.width) as isize, (cell % map.width) as isize);
                for &(dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        continue;
                    }
                    let neighbor = (ny * w + nx) as usize;
                    if regions[neighbor] == u32::MAX && map.labels[neighbor] == class {
                        regions[neighbor] = next;
                        queue.push_back(neighbor);
                    }
                }
            }
            next += 1;
        }
        Self { regions }
    }

    pub fn region(&self, cell: usize) -> u32 {
        self.regions[cell]
    }

    pub fn count(&self) -> usize {
        self.regions.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// 1 where the class equals the anchor's class.
pub fn build_row_mask(map: &PatchSegMap, i: usize) -> Result<Vec<bool>> {
    map.check_anchor(i)?;
    let anchor = map.labels[i];
    Ok(map.labels.iter().map(|&l| l == anchor).collect())
}

/// 1 where the cell is connected to the anchor through same-class cells.
pub fn reachability(map: &PatchSegMap, i: usize, connectivity: Connectivity) -> Result<Vec<bool>> {
    map.check_anchor(i)?;
    Ok(reach_from_regions(
        &RegionLabels::new(map, connectivity),
        i,
        map.len(),
    ))
}

fn reach_from_regions(regions: &RegionLabels, i: usize, n: usize) -> Vec<bool> {
    let anchor = regions.region(i);
    (0..n).map(|j| regions.region(j) == anchor).collect()
}

/// `max(|Δy|, |Δx|)` between two grid cells.
#[inline]
pub fn chebyshev(p: (usize, usize), q: (usize, usize)) -> usize {
    p.0.abs_diff(q.0).max(p.1.abs_diff(q.1))
}

/// Largest Chebyshev distance on an `h × w` grid, 1 for a single cell.
pub fn max_chebyshev(h: usize, w: usize) -> usize {
    (h.max(w) - 1).max(1)
}

/// `exp(−d / d_max)` from the anchor to every cell.
pub fn decay_row(i: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    if h == 0 || w == 0 || i >= h * w {
        return Err(Error::Validation(format!(
            "anchor {i} outside a {h}x{w} grid"
        )));
    }
    let d_max = max_chebyshev(h, w) as f32;
    let anchor = (i / w, i % w);
    Ok((0..h * w)
        .map(|j| libm::expf(-(chebyshev(anchor, (j / w, j % w)) as f32) / d_max))
        .collect())
}

/// The three per-anchor ingredients of an `Ŝ` row.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRow {
    pub mask: Vec<bool>,
    pub reach: Vec<bool>,
    pub decay: Vec<f32>,
}

impl RefinementRow {
    pub fn new(map: &PatchSegMap, i: usize, connectivity: Connectivity) -> Result<Self> {
        Ok(Self {
            mask: build_row_mask(map, i)?,
            reach: reachability(map, i, connectivity)?,
            decay: decay_row(i, map.height, map.width)?,
        })
    }

    /// `mask ⊙ (V + (1 − V)·D)` before smoothing.
    pub fn combined(&self) -> Vec<f32> {
        combine(&self.mask, &self.reach, &self.decay)
    }
}

fn combine(mask: &[bool], reach: &[bool], decay: &[f32]) -> Vec<f32> {
    mask.iter()
        .zip(reach)
        .zip(decay)
        .map(|((&m, &v), &d)| match (m, v) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => d,
        })
        .collect()
}

/// Full settings of the refinement matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SfrSpec {
    pub gaussian: GaussianSpec,
    pub connectivity: Connectivity,
}

/// `hw × hw` refinement scores `Ŝ`, entries in `[0, 1]`.
pub fn sfr_matrix(map: &PatchSegMap, spec: &SfrSpec) -> Result<Matrix> {
    let kernel = spec.gaussian.kernel()?;
    let (h, w) = (map.height, map.width);
    let n = map.len();
    let regions = RegionLabels::new(map, spec.connectivity);
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let mask = build_row_mask(map, i)?;
        let reach = reach_from_regions(&regions, i, n);
        let decay = decay_row(i, h, w)?;
        let raw = combine(&mask, &reach, &decay);
        let smoothed = if spec.gaussian.two_d {
            smooth_2d(&raw, h, w, &kernel)
        } else {
            smooth_1d(&raw, &kernel)
        };
        // a normalized kernel over [0, 1] values stays in [0, 1] up to rounding
        for (o, v) in out.row_mut(i).iter_mut().zip(smoothed) {
            *o = v.min(1.0);
        }
    }
    Ok(out)
}

/// `S_r = (1 − λ)·S_s + λ·gain·Ŝ` on the patch block; the cls row and
/// column of `S_s` pass through.
pub fn blend_sfr(s_s: &Matrix, s_hat: &Matrix, lambda_sfr: f32, gain: f32) -> Result<Matrix> {
    check_unit_interval("lambda_sfr", lambda_sfr)?;
    let n = s_hat.rows();
    if s_hat.cols() != n || s_s.shape() != (n + 1, n + 1) {
        return Err(Error::Shape(format!(
            "scores {}x{} do not wrap a {}x{} refinement block",
            s_s.rows(),
            s_s.cols(),
            s_hat.rows(),
            s_hat.cols()
        )));
    }
    let keep = 1.0 - lambda_sfr;
    let weight = lambda_sfr * gain;
    let mut out = s_s.clone();
    for i in 0..n {
        let row = &mut out.row_mut(i + 1)[1..];
        for (o, r) in row.iter_mut().zip(s_hat.row(i)) {
            *o = keep * *o + weight * r;
        }
    }
    Ok(out)
}

/// `(1 − λ)·softmax(S_r) + λ·A_c` for one head.
pub fn resclip_attention(s_r: &Matrix, a_c: &Matrix, lambda_rcs: f32) -> Result<Matrix> {
    check_unit_interval("lambda_rcs", lambda_rcs)?;
    convex_blend(&tensor::row_softmax(s_r), a_c, lambda_rcs)
}
