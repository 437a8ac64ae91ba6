//! Thread pool sizing and tile-parallel inference.

use rayon::prelude::*;
use resclip_core::pipeline::{fuse_tiles, infer_tile, plan_tiles, short_side_size};
use resclip_core::{ClassEmbeddings, ImageTensor, LogitGrid, SegMap, SurgeryConfig, WeightsBundle};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "RESCLIP_THREADS";

/// Worker count: `RESCLIP_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn thread_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available)
}

pub fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Format(format!("cannot start worker pool: {e}")))
}

/// Tiling at working resolution with tiles evaluated concurrently. Tile
/// logits are fused in plan order, so the result equals the sequential run.
pub fn sliding_window_parallel(
    pool: &rayon::ThreadPool,
    image: &ImageTensor,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<(LogitGrid, SegMap)> {
    cfg.validate_for(bundle)?;
    let tiles = plan_tiles(image.height(), image.width(), cfg.window, cfg.stride);
    let logits = pool.install(|| {
        tiles
            .par_iter()
            .map(|t| infer_tile(image, t, bundle, classes, cfg))
            .collect::<resclip_core::Result<Vec<_>>>()
    })?;
    let fused = fuse_tiles(image.height(), image.width(), &tiles, &logits)?;
    let seg = fused.to_seg_map();
    Ok((fused, seg))
}

/// Parallel counterpart of [`resclip_core::pipeline::segment_image`].
pub fn segment_image_parallel(
    pool: &rayon::ThreadPool,
    image: &ImageTensor,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<(LogitGrid, SegMap)> {
    let (h, w) = short_side_size(image.height(), image.width(), cfg.short_side);
    let working = image.resize(h, w)?;
    let (logits, _) = sliding_window_parallel(pool, &working, bundle, classes, cfg)?;
    let logits = logits.resize(image.height(), image.width())?;
    let seg = logits.to_seg_map();
    Ok((logits, seg))
}
