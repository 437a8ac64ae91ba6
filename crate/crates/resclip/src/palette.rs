//! Colour tables for segmentation maps and heatmaps.

use crate::viridis::VIRIDIS;

/// PASCAL VOC colour for a class index (bit-interleaved over the index).
/// Index 255 maps to the usual ignore colour.
pub fn voc_color(index: u32) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = index & 0xff;
    for j in 0..8 {
        for (k, ch) in rgb.iter_mut().enumerate() {
            *ch |= (((c >> k) & 1) as u8) << (7 - j);
        }
        c >>= 3;
    }
    rgb
}

/// Viridis colour for `t` in `[0, 1]`; out-of-range and NaN inputs clamp.
pub fn heat_color(t: f32) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    VIRIDIS[(t * 255.0).round() as usize]
}
