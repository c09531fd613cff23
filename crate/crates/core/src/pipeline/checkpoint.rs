//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `AMIEODCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! tensor's values as little-endian `f64` in header order. The header lists
//! each tensor's name, shape, offset and length (in values) and a SHA-256 of
//! the data section.

use std::fs;
use std::path::Path;

use amieod_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::detector::Detector;
use crate::enhance::{CurveEnhancer, ExpertBundle, PPNet};
use crate::error::{Error, Result};
use crate::esm::EsmWeights;
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"AMIEODCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// Everything needed to resume or deploy a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Training stage that produced the weights.
    pub stage: u8,
    pub epoch: usize,
    pub config: Config,
    pub rng_state: ChaCha8Rng,
    pub experts: ExpertBundle,
    pub detector: Detector,
    pub esm: Option<EsmWeights>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    stage: u8,
    epoch: usize,
    config: Config,
    rng_state: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every tensor of the checkpoint under its prefixed name, in a fixed order.
fn named_tensors(c: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut sets: Vec<(&str, &ParamSet)> = vec![
        ("piem.param", &c.experts.piem.params),
        ("piem.buffer", &c.experts.piem.buffers),
        ("jiem.param", &c.experts.jiem.params),
        ("jiem.buffer", &c.experts.jiem.buffers),
        ("iaem.param", &c.experts.iaem.params),
        ("detector.param", &c.detector.params),
        ("detector.buffer", &c.detector.buffers),
    ];
    if let Some(esm) = &c.esm {
        sets.push(("esm.param", &esm.params));
        sets.push(("esm.buffer", &esm.buffers));
    }
    sets.into_iter()
        .flat_map(|(prefix, set)| set.iter().map(move |(n, t)| (format!("{prefix}.{n}"), t)))
        .collect()
}

pub fn encode(c: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(c);
    let mut data = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = Header {
        format_version: c.format_version,
        stage: c.stage,
        epoch: c.epoch,
        config: c.config.clone(),
        rng_state: c.rng_state.clone(),
        tensors: entries,
        sha256: hex(&Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&c.format_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Copies the tensors named `prefix.*` into a set shaped like `template`.
fn fill(
    template: &ParamSet,
    prefix: &str,
    lookup: &dyn Fn(&str) -> Option<Tensor>,
) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let full = format!("{prefix}.{name}");
        let value =
            lookup(&full).ok_or_else(|| Error::Corrupt(format!("tensor `{full}` missing")))?;
        if value.shape() != t.shape() {
            return Err(Error::Corrupt(format!(
                "tensor `{full}` has shape {:?}, expected {:?}",
                value.shape(),
                t.shape()
            )));
        }
        out.insert(name, value);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Corrupt("file shorter than its preamble".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREAMBLE..];
    if header_len > body.len() {
        return Err(Error::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != version {
        return Err(Error::UnsupportedVersion {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let data = &body[header_len..];
    let expected: usize = header.tensors.iter().map(|t| t.len).sum();
    if data.len() != expected * 8 {
        return Err(Error::Corrupt(format!(
            "data section holds {} bytes, header promises {}",
            data.len(),
            expected * 8
        )));
    }
    if hex(&Sha256::digest(data)) != header.sha256 {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut table = std::collections::HashMap::new();
    for e in &header.tensors {
        if e.shape.iter().product::<usize>() != e.len || (e.offset + e.len) * 8 > data.len() {
            return Err(Error::Corrupt(format!(
                "tensor `{}` has inconsistent extent",
                e.name
            )));
        }
        let values = data[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        table.insert(e.name.clone(), Tensor::new(e.shape.clone(), values));
    }
    let lookup = |name: &str| table.get(name).cloned();

    let cfg = header.config;
    cfg.validate()
        .map_err(|e| Error::Corrupt(format!("stored config invalid: {e}")))?;
    // shapes come from freshly built networks; their values are discarded
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let curve = CurveEnhancer::new(cfg.enhance.curve_width, true, &mut rng);
    let pp = PPNet::new(cfg.enhance.pp_input, &mut rng);
    let det = Detector::new(cfg.detector.clone(), &mut rng)?;
    let piem = CurveEnhancer {
        params: fill(&curve.params, "piem.param", &lookup)?,
        buffers: fill(&curve.buffers, "piem.buffer", &lookup)?,
        width: cfg.enhance.curve_width,
        frozen: true,
    };
    let jiem = CurveEnhancer {
        params: fill(&curve.params, "jiem.param", &lookup)?,
        buffers: fill(&curve.buffers, "jiem.buffer", &lookup)?,
        width: cfg.enhance.curve_width,
        frozen: false,
    };
    let iaem = PPNet {
        params: fill(&pp.params, "iaem.param", &lookup)?,
        input_size: cfg.enhance.pp_input,
    };
    let detector = Detector {
        config: cfg.detector.clone(),
        params: fill(&det.params, "detector.param", &lookup)?,
        buffers: fill(&det.buffers, "detector.buffer", &lookup)?,
    };
    let has_esm = header.tensors.iter().any(|t| t.name.starts_with("esm."));
    let esm = if has_esm {
        let template = EsmWeights::new(cfg.esm.clone(), &mut rng)?;
        Some(EsmWeights {
            config: cfg.esm.clone(),
            params: fill(&template.params, "esm.param", &lookup)?,
            buffers: fill(&template.buffers, "esm.buffer", &lookup)?,
        })
    } else {
        None
    };
    let ckpt = Checkpoint {
        format_version: header.format_version,
        stage: header.stage,
        epoch: header.epoch,
        experts: ExpertBundle {
            piem,
            jiem,
            iaem,
            dip_order: cfg.enhance.dip_order.clone(),
        },
        config: cfg,
        rng_state: header.rng_state,
        detector,
        esm,
    };
    if named_tensors(&ckpt).len() != header.tensors.len() {
        return Err(Error::Corrupt("unexpected extra tensors".into()));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CheckpointNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode(&bytes)
}
