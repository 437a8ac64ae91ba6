//! Regenerates the committed test fixtures under `tests/fixtures`.
//!
//! ```text
//! cargo run -p resclip --example make_fixture
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resclip::container::{save_class_embeddings, save_weights};
use resclip::imageio::write_index_png;
use resclip_core::synthetic::{random_bundle, random_class_embeddings, SyntheticSpec};
use resclip_core::{ClassEmbeddings, SegMap};

fn save_rgb(path: &Path, h: u32, w: u32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    image::RgbImage::from_raw(w, h, pixels)
        .unwrap()
        .save(path)
        .unwrap();
}

/// Quadrant labels over `classes` with a one-pixel ignore border.
fn quadrant_labels(h: usize, w: usize, classes: u32) -> SegMap {
    let labels = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if y == 0 || x == 0 {
                255
            } else {
                ((2 * y / h) as u32 * 2 + (2 * x / w) as u32) % classes
            }
        })
        .collect();
    SegMap::new(h, w, labels).unwrap()
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir).unwrap();

    let tiny = SyntheticSpec::tiny(7);
    save_weights(&random_bundle(tiny), dir.join("tiny_weights.resclip")).unwrap();
    let deep = SyntheticSpec {
        layers: 12,
        seed: 11,
        ..SyntheticSpec::tiny(0)
    };
    save_weights(&random_bundle(deep), dir.join("deep_weights.resclip")).unwrap();

    let random = random_class_embeddings(3, tiny.embed_dim, 3);
    let names = ["sky", "road", "tree"].map(String::from).to_vec();
    let classes = ClassEmbeddings::new(random.embeds().clone(), names).unwrap();
    save_class_embeddings(&classes, dir.join("tiny_classes.resclip")).unwrap();

    save_rgb(&dir.join("square.png"), 16, 16, 21);
    save_rgb(&dir.join("wide.ppm"), 16, 24, 22);
    write_index_png(dir.join("square_label.png"), &quadrant_labels(16, 16, 3)).unwrap();
    write_index_png(dir.join("wide_label.png"), &quadrant_labels(16, 24, 3)).unwrap();
    std::fs::write(
        dir.join("manifest.tsv"),
        "square.png\tsquare_label.png\nwide.ppm\twide_label.png\n",
    )
    .unwrap();
}
