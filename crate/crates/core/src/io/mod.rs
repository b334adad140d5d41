//! Embedding interchange formats and structured file output.
//!
//! ## Container layout (`GFE1`, version 1, all integers little-endian)
//!
//! ```text
//! magic        4 bytes  "GFE1"
//! version      u32
//! entry_count  u32
//! meta_len     u32, followed by meta_len bytes of UTF-8 JSON (may be empty)
//! index        entry_count records:
//!                id_len u16, id bytes (UTF-8)
//!                kind u8 (0 global embedding, 1 feature map, 2 tensor)
//!                rank u8, rank x u32 dims
//!                offset u64, length u64   (bytes, relative to payload start)
//! payload_len  u64
//! payload      f32 values
//! crc32        u32 over every preceding byte
//! ```
//!
//! ## Prompt file layout (`GFP1`, version 1)
//!
//! ```text
//! magic "GFP1", version u32, rows u32 (always 5), dim u32
//! rows x { text_len u32, text bytes (UTF-8), dim x f32 }
//! crc32 u32 over every preceding byte
//! ```

mod container;
mod prompts;
mod shards;
mod synth;

pub use container::{
    Container, ContainerError, ContainerIndex, EmbeddingSource, Entry, EntryData, EntryKind,
    CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use prompts::{PromptFile, PROMPT_MAGIC, PROMPT_VERSION};
pub use shards::{ShardManifest, ShardRef, ShardSet};
pub use synth::{
    synth_embeddings, synth_embeddings_with, ClusterSpec, SynthKind, SynthOutput,
};

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grade::NUM_GRADES;
use crate::tensor::Tensor;

/// Stack the global embeddings of `ids` into an `N x D` tensor.
pub fn load_embeddings<S: EmbeddingSource + ?Sized>(source: &S, ids: &[&str]) -> Result<Tensor> {
    load_stacked(source, ids, EntryKind::Global)
}

/// Stack the feature maps of `ids` into an `N x C x H x W` tensor.
pub fn load_feature_maps<S: EmbeddingSource + ?Sized>(source: &S, ids: &[&str]) -> Result<Tensor> {
    load_stacked(source, ids, EntryKind::FeatureMap)
}

fn load_stacked<S: EmbeddingSource + ?Sized>(
    source: &S,
    ids: &[&str],
    kind: EntryKind,
) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::invalid("no records to load"));
    }
    let mut dims: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for id in ids {
        let entry = source.entry(id)?;
        if entry.kind() != kind {
            return Err(Error::invalid(format!(
                "entry {id} is a {:?}, expected {kind:?}",
                entry.kind()
            )));
        }
        let shape = entry.shape();
        match &dims {
            None => dims = Some(shape),
            Some(d) if *d != shape => {
                return Err(Error::shape(
                    "load_embeddings",
                    format!("entry {id} has shape {shape:?}, earlier entries {d:?}"),
                ))
            }
            Some(_) => {}
        }
        data.extend(entry.values().iter().map(|&v| v as f64));
    }
    let mut shape = vec![ids.len()];
    shape.extend(dims.expect("at least one id"));
    Tensor::new(shape, data)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Probability rows as written by prediction outputs.
pub type ProbRow = [f64; NUM_GRADES];
