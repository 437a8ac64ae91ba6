//! The `RESCLIP1` named-tensor container.
//!
//! Layout:
//!
//! ```text
//! 0..8        magic b"RESCLIP1"
//! 8..16       header length N, u64 little-endian
//! 16..16+N    UTF-8 JSON header
//! ...         zero padding up to the next multiple of 64
//! payload     raw little-endian f32 data
//! ```
//!
//! The header is `{"format_version": 1, "meta": {..}, "tensors": {name:
//! {"dtype": "f32", "shape": [..], "offset": o}}}` where `offset` is the byte
//! offset from the payload start and a multiple of 64.

use std::collections::BTreeMap;
use std::path::Path;

use resclip_core::model::{LayerNormParams, LayerWeights, Linear};
use resclip_core::{Activation, ClassEmbeddings, Matrix, ModelMeta, WeightsBundle};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RESCLIP1";
pub const FORMAT_VERSION: u64 = 1;
pub const ALIGNMENT: usize = 64;

/// Tensor name holding class-text embeddings.
pub const CLASS_EMBEDS: &str = "class_embeds";

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u64,
    #[serde(default)]
    meta: Map<String, Value>,
    tensors: BTreeMap<String, TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded container: a free-form `meta` object plus named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

impl Container {
    pub fn new(meta: Map<String, Value>) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), Tensor { shape, data });
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f32]) {
        self.insert(name, vec![v.len()], v.to_vec());
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file is too short for a container".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic, expected RESCLIP1".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = align_up(header_end);
        let mut tensors = BTreeMap::new();
        for (name, t) in header.tensors {
            if t.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor \"{name}\" has dtype {}, only f32 is supported",
                    t.dtype
                )));
            }
            if t.offset % ALIGNMENT != 0 {
                return Err(Error::Format(format!(
                    "tensor \"{name}\" offset {} is not {ALIGNMENT}-byte aligned",
                    t.offset
                )));
            }
            let span = t
                .shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .and_then(|len| Some((payload.checked_add(t.offset)?, len)))
                .and_then(|(start, len)| Some((start, start.checked_add(len)?)));
            let (start, end) = match span {
                Some((start, end)) if end <= bytes.len() => (start, end),
                _ => {
                    return Err(Error::Format(format!(
                        "truncated payload: tensor \"{name}\" with shape {:?} at offset {} \
                         does not fit in {} bytes",
                        t.shape,
                        t.offset,
                        bytes.len()
                    )))
                }
            };
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(
                name,
                Tensor {
                    shape: t.shape,
                    data,
                },
            );
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0usize;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorHeader {
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                },
            );
            offset = align_up(offset + t.data.len() * 4);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(align_up(16 + json.len()) + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(align_up(out.len()), 0);
        let payload = out.len();
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(payload + align_up(out.len() - payload), 0);
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor \"{name}\"")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.tensor(name)?;
        match t.shape.as_slice() {
            &[rows, cols] => Ok(Matrix::new(rows, cols, t.data.clone())?),
            other => Err(Error::Format(format!(
                "tensor \"{name}\" has shape {other:?}, expected 2-D"
            ))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f32>> {
        let t = self.tensor(name)?;
        match t.shape.as_slice() {
            [_] => Ok(t.data.clone()),
            other => Err(Error::Format(format!(
                "tensor \"{name}\" has shape {other:?}, expected 1-D"
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaHeader {
    #[serde(alias = "P")]
    patch_size: usize,
    #[serde(alias = "L")]
    layers: usize,
    #[serde(alias = "H")]
    heads: usize,
    #[serde(alias = "d")]
    width: usize,
    #[serde(alias = "d_text")]
    embed_dim: usize,
    mean: [f32; 3],
    std: [f32; 3],
    #[serde(default = "default_eps")]
    eps: f32,
    #[serde(default)]
    activation: Option<String>,
}

fn default_eps() -> f32 {
    1e-5
}

fn parse_meta(meta: &Map<String, Value>) -> Result<ModelMeta> {
    let m: MetaHeader = serde_json::from_value(Value::Object(meta.clone()))
        .map_err(|e| Error::Format(format!("bad meta object: {e}")))?;
    let activation = match m.activation.as_deref() {
        None => Activation::default(),
        Some(name) => Activation::from_name(name)
            .ok_or_else(|| Error::Format(format!("unknown activation \"{name}\"")))?,
    };
    Ok(ModelMeta {
        patch_size: m.patch_size,
        layers: m.layers,
        heads: m.heads,
        width: m.width,
        embed_dim: m.embed_dim,
        mean: m.mean,
        std: m.std,
        eps: m.eps,
        activation,
    })
}

fn meta_object(meta: &ModelMeta) -> Map<String, Value> {
    let header = MetaHeader {
        patch_size: meta.patch_size,
        layers: meta.layers,
        heads: meta.heads,
        width: meta.width,
        embed_dim: meta.embed_dim,
        mean: meta.mean,
        std: meta.std,
        eps: meta.eps,
        activation: Some(meta.activation.name().to_string()),
    };
    match serde_json::to_value(header).expect("meta serializes") {
        Value::Object(map) => map,
        _ => unreachable!("struct serializes to an object"),
    }
}

fn norm(c: &Container, name: &str) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gamma: c.vector(&format!("{name}.gamma"))?,
        beta: c.vector(&format!("{name}.beta"))?,
    })
}

fn linear(c: &Container, weight: &str, bias: &str) -> Result<Linear> {
    Ok(Linear {
        weight: c.matrix(weight)?,
        bias: c.vector(bias)?,
    })
}

/// Tensor names of one block, in container order `(weight, bias)`.
fn layer_names(i: usize) -> [(String, String); 6] {
    let p = format!("layer{i}");
    [
        (format!("{p}.Wq"), format!("{p}.bq")),
        (format!("{p}.Wk"), format!("{p}.bk")),
        (format!("{p}.Wv"), format!("{p}.bv")),
        (format!("{p}.Wo"), format!("{p}.bo")),
        (format!("{p}.mlp_fc.W"), format!("{p}.mlp_fc.b")),
        (format!("{p}.mlp_proj.W"), format!("{p}.mlp_proj.b")),
    ]
}

/// Assembles and validates a bundle from a decoded container.
pub fn bundle_from_container(c: &Container) -> Result<WeightsBundle> {
    let meta = parse_meta(&c.meta)?;
    let pre_ln = if c.tensors.contains_key("pre_ln.gamma") {
        Some(norm(c, "pre_ln")?)
    } else {
        None
    };
    let layers = (0..meta.layers)
        .map(|i| {
            let [q, k, v, o, fc, proj] = layer_names(i);
            Ok(LayerWeights {
                ln1: norm(c, &format!("layer{i}.ln1"))?,
                query: linear(c, &q.0, &q.1)?,
                key: linear(c, &k.0, &k.1)?,
                value: linear(c, &v.0, &v.1)?,
                out: linear(c, &o.0, &o.1)?,
                ln2: norm(c, &format!("layer{i}.ln2"))?,
                mlp_fc: linear(c, &fc.0, &fc.1)?,
                mlp_proj: linear(c, &proj.0, &proj.1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = WeightsBundle {
        meta,
        patch_proj: c.matrix("patch_proj")?,
        cls_token: c.vector("cls_token")?,
        pos_embed: c.matrix("pos_embed")?,
        pre_ln,
        layers,
        final_ln: norm(c, "final_ln")?,
        visual_proj: c.matrix("visual_proj")?,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn bundle_to_container(bundle: &WeightsBundle) -> Container {
    let mut c = Container::new(meta_object(&bundle.meta));
    let put_norm = |c: &mut Container, name: &str, ln: &LayerNormParams| {
        c.insert_vector(format!("{name}.gamma"), &ln.gamma);
        c.insert_vector(format!("{name}.beta"), &ln.beta);
    };
    c.insert_matrix("patch_proj", &bundle.patch_proj);
    c.insert_vector("cls_token", &bundle.cls_token);
    c.insert_matrix("pos_embed", &bundle.pos_embed);
    if let Some(ln) = &bundle.pre_ln {
        put_norm(&mut c, "pre_ln", ln);
    }
    for (i, layer) in bundle.layers.iter().enumerate() {
        put_norm(&mut c, &format!("layer{i}.ln1"), &layer.ln1);
        put_norm(&mut c, &format!("layer{i}.ln2"), &layer.ln2);
        let linears = [
            &layer.query,
            &layer.key,
            &layer.value,
            &layer.out,
            &layer.mlp_fc,
            &layer.mlp_proj,
        ];
        for ((w, b), lin) in layer_names(i).into_iter().zip(linears) {
            c.insert_matrix(w, &lin.weight);
            c.insert_vector(b, &lin.bias);
        }
    }
    put_norm(&mut c, "final_ln", &bundle.final_ln);
    c.insert_matrix("visual_proj", &bundle.visual_proj);
    c
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightsBundle> {
    bundle_from_container(&Container::read(path)?)
}

pub fn save_weights(bundle: &WeightsBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle_to_container(bundle).write(path)
}

pub fn class_embeddings_from_container(c: &Container) -> Result<ClassEmbeddings> {
    let embeds = c.matrix(CLASS_EMBEDS)?;
    let names = match c.meta.get("class_names") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Format("class_names must be strings".into()))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::Format("class_names must be an array".into())),
        None => (0..embeds.rows()).map(|i| format!("class{i}")).collect(),
    };
    Ok(ClassEmbeddings::new(embeds, names)?)
}

pub fn class_embeddings_to_container(classes: &ClassEmbeddings) -> Container {
    let mut meta = Map::new();
    meta.insert(
        "class_names".into(),
        Value::Array(classes.names().iter().cloned().map(Value::String).collect()),
    );
    meta.insert("embed_dim".into(), Value::from(classes.dim()));
    let mut c = Container::new(meta);
    c.insert_matrix(CLASS_EMBEDS, classes.embeds());
    c
}

pub fn load_class_embeddings(path: impl AsRef<Path>) -> Result<ClassEmbeddings> {
    class_embeddings_from_container(&Container::read(path)?)
}

pub fn save_class_embeddings(classes: &ClassEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    class_embeddings_to_container(classes).write(path)
}
