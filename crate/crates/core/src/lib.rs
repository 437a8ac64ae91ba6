//! Training-free dense vision-language inference on a CLIP-style ViT.
//!
//! The final transformer block's attention is rebuilt from a self-correlation
//! base mode, the averaged query-key attention of intermediate layers, and a
//! refinement score derived from a coarse segmentation of the same image.
//! Patch features are then compared with class-text embeddings by cosine
//! similarity.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, images and
//! the command line live in the companion `resclip` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sfr;
#[cfg(any(test, feature = "synthetic"))]
pub mod synthetic;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};

pub use attention::{AggregationSpec, AggregationStrategy, BaseMode, BaseModeKind};
pub use metrics::{ConfusionMatrix, MiouResult};
pub use model::{Activation, ClassEmbeddings, ModelMeta, WeightsBundle};
pub use pipeline::{LogitGrid, SegMap, SurgeryConfig};
pub use sfr::{Connectivity, GaussianSpec, PatchSegMap, SfrSpec};
pub use tensor::{FeatureGrid, Matrix};
pub use vit::{AttentionTrace, ImageTensor, LastBlockState, TokenSequence};
