//! Versioned JSON parameter checkpoints.
//!
//! Weights are stored as flat f64 arrays next to the producing config. JSON
//! float formatting uses shortest round-trip notation, so f64 parameters
//! survive save/load bit-exactly. A `kind` tag distinguishes cluster networks
//! from the similarity network's base and head.

use crate::error::{Error, Result};
use crate::network::{init_params, NetworkConfig, NetworkParameters};
use crate::Float;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const NETWORK_FORMAT: &str = "pairclust-network";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Serializable form of one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDoc {
    format: String,
    format_version: u32,
    kind: String,
    config: NetworkConfig,
    layers: Vec<Option<LayerDoc>>,
}

impl NetworkDoc {
    pub fn kind(&self) -> &str {
        &self.kind
    }
}

pub fn to_doc<F: Float>(params: &NetworkParameters<F>, kind: &str) -> NetworkDoc {
    let layers = params
        .config()
        .layers
        .iter()
        .enumerate()
        .map(|(idx, _)| {
            params.layer_params(idx).map(|p| LayerDoc {
                w: p.w.iter().map(|&v| v.to_f64c()).collect(),
                b: p.b.iter().map(|&v| v.to_f64c()).collect(),
            })
        })
        .collect();
    NetworkDoc {
        format: NETWORK_FORMAT.to_string(),
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config: params.config().clone(),
        layers,
    }
}

/// Rebuild parameters from a document: weights restored exactly, gradient and
/// velocity buffers zeroed, version reset.
pub fn from_doc<F: Float>(doc: &NetworkDoc, expect_kind: Option<&str>) -> Result<NetworkParameters<F>> {
    if doc.format != NETWORK_FORMAT {
        return Err(Error::Checkpoint(format!(
            "not a network checkpoint (format '{}')",
            doc.format
        )));
    }
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            doc.format_version
        )));
    }
    if let Some(kind) = expect_kind {
        if doc.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                doc.kind
            )));
        }
    }
    if doc.layers.len() != doc.config.layers.len() {
        return Err(Error::Checkpoint(format!(
            "config lists {} layers, checkpoint stores {}",
            doc.config.layers.len(),
            doc.layers.len()
        )));
    }
    let mut params = init_params::<F>(&doc.config)?;
    for (idx, stored) in doc.layers.iter().enumerate() {
        match (params.layer_params_mut(idx), stored) {
            (None, None) => {}
            (Some(p), Some(doc_layer)) => {
                if doc_layer.w.len() != p.w.len() || doc_layer.b.len() != p.b.len() {
                    return Err(Error::Checkpoint(format!(
                        "layer {idx} size mismatch: {}x{} weights, {} biases stored",
                        doc_layer.w.len(),
                        p.w.len(),
                        doc_layer.b.len()
                    )));
                }
                for (dst, &src) in p.w.iter_mut().zip(doc_layer.w.iter()) {
                    *dst = F::cast(src);
                }
                for (dst, &src) in p.b.iter_mut().zip(doc_layer.b.iter()) {
                    *dst = F::cast(src);
                }
                p.gw.fill(F::zero());
                p.gb.fill(F::zero());
                p.vw.fill(F::zero());
                p.vb.fill(F::zero());
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "layer {idx}: parametric/non-parametric mismatch with config"
                )))
            }
        }
    }
    Ok(params)
}

/// Serialize a document as one-line JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize>(mut out: W, doc: &T, context: &Path) -> Result<()> {
    let name = context.display().to_string();
    serde_json::to_writer(&mut out, doc).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    out.write_all(b"\n").map_err(|e| Error::io(&name, e))?;
    out.flush().map_err(|e| Error::io(&name, e))?;
    Ok(())
}

pub fn save_network<F: Float>(
    params: &NetworkParameters<F>,
    kind: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&name, e))?;
    write_json(BufWriter::new(file), &to_doc(params, kind), path)
}

pub fn load_network<F: Float>(
    path: impl AsRef<Path>,
    expect_kind: Option<&str>,
) -> Result<NetworkParameters<F>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&name, e))?;
    let doc: NetworkDoc = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    from_doc(&doc, expect_kind)
}
