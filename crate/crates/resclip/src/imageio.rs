//! RGB input images, index-PNG label maps and colorized outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use resclip_core::{ImageTensor, ModelMeta, SegMap};

use crate::error::{Error, Result};
use crate::palette::{heat_color, voc_color};

/// Decoded 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn to_tensor(&self, meta: &ModelMeta) -> Result<ImageTensor> {
        Ok(ImageTensor::from_rgb8(
            self.height,
            self.width,
            &self.pixels,
            meta,
        )?)
    }
}

/// Reads a PNG or PPM file; alpha and grayscale inputs are converted to RGB.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let rgb = reader
        .decode()
        .map_err(|e| Error::image(path, e))?
        .into_rgb8();
    Ok(RgbImage {
        height: rgb.height() as usize,
        width: rgb.width() as usize,
        pixels: rgb.into_raw(),
    })
}

pub fn read_image_tensor(path: impl AsRef<Path>, meta: &ModelMeta) -> Result<ImageTensor> {
    read_rgb(path)?.to_tensor(meta)
}

/// Reads an 8-bit grayscale or palette PNG as raw class indices. Palette
/// entries are not expanded, so a VOC-style colour label yields its indices.
pub fn read_label_png(path: impl AsRef<Path>) -> Result<SegMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::image(path, e))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight
        || !matches!(color, png::ColorType::Grayscale | png::ColorType::Indexed)
    {
        return Err(Error::image(
            path,
            format!("label maps must be 8-bit grayscale or palette PNG, got {color:?} {depth:?}"),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::image(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::image(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let mut labels = Vec::with_capacity(h * w);
    for row in buf.chunks(info.line_size).take(h) {
        labels.extend(row[..w].iter().map(|&v| u32::from(v)));
    }
    Ok(SegMap::new(h, w, labels)?)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::image(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::image(path, e))?;
    writer.finish().map_err(|e| Error::image(path, e))
}

/// Single-channel PNG of class indices.
pub fn write_index_png(path: impl AsRef<Path>, seg: &SegMap) -> Result<()> {
    let path = path.as_ref();
    let data = seg
        .labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::image(path, format!("class index {l} exceeds 255")))
        })
        .collect::<Result<Vec<_>>>()?;
    write_png(
        path,
        seg.width,
        seg.height,
        png::ColorType::Grayscale,
        &data,
    )
}

pub fn write_color_png(path: impl AsRef<Path>, seg: &SegMap) -> Result<()> {
    let data: Vec<u8> = seg.labels.iter().flat_map(|&l| voc_color(l)).collect();
    write_png(
        path.as_ref(),
        seg.width,
        seg.height,
        png::ColorType::Rgb,
        &data,
    )
}

/// Writes an `h×w` grid of non-negative values as a viridis heatmap, each
/// cell drawn as a `cell×cell` block. Values are scaled by the grid maximum.
pub fn write_heatmap(
    path: impl AsRef<Path>,
    values: &[f32],
    h: usize,
    w: usize,
    cell: usize,
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != h * w || cell == 0 {
        return Err(Error::image(
            path,
            format!("{} values for a {h}x{w} heatmap", values.len()),
        ));
    }
    let max = values.iter().copied().fold(0.0f32, f32::max);
    let (out_h, out_w) = (h * cell, w * cell);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        for x in 0..out_w {
            let v = values[(y / cell) * w + x / cell];
            let t = if max > 0.0 { v / max } else { 0.0 };
            data.extend_from_slice(&heat_color(t));
        }
    }
    write_png(path, out_w, out_h, png::ColorType::Rgb, &data)
}
