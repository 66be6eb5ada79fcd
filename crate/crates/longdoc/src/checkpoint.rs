//! Checkpoint persistence and the three pre-training initializations:
//! from-scratch, BERT-to-Longformer conversion, and continual.
//!
//! File layout: 4-byte magic, u64 header length, header JSON, then the
//! payload as concatenated tensors in 32-bit little-endian IEEE-754,
//! name-sorted. The header carries the model config, tokenizer hash, a
//! named-tensor manifest with shapes and byte offsets, and a SHA-256 of the
//! payload. Saving a loaded checkpoint reproduces the file byte for byte.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::encoder::{EncoderState, HeadKind, ModelConfig, ModelShape};
use crate::error::{Error, Result};
use crate::numerics::Parameter;

const MAGIC: [u8; 4] = *b"LDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tokenizer_hash: String,
    pub head_kind: Option<HeadKind>,
    pub payload_sha256: String,
    pub manifest: Vec<ManifestEntry>,
}

fn named_tensors(state: &EncoderState<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    state.visit_params(&mut |name, p| {
        out.push((name, p.value.shape().to_vec(), p.value.data().to_vec()));
    });
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Write `state` to `path` (temp file + rename, so readers never see a
/// partial checkpoint).
pub fn save(state: &EncoderState<f32>, tokenizer_hash: &str, path: &Path) -> Result<()> {
    let tensors = named_tensors(state);
    let mut payload = Vec::new();
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, shape, data) in &tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: payload.len() as u64,
        });
        for &v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = sha2::Sha256::digest(&payload);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        tokenizer_hash: tokenizer_hash.to_string(),
        head_kind: state.head.as_ref().map(|h| h.kind),
        payload_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Header only, for `ckpt-inspect`.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_header_from(&mut f, path)
}

fn read_header_from(f: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let mut head = [0u8; 12];
    f.read_exact(&mut head)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if head[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let header_len = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} unsupported (expected {FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    Ok(header)
}

pub fn load(path: &Path) -> Result<(EncoderState<f32>, CheckpointHeader)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header = read_header_from(&mut f, path)?;
    header.config.validate()?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let expected_len: usize = header
        .manifest
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() < expected_len {
        return Err(Error::Checkpoint(format!(
            "{}: truncated payload ({} bytes, manifest needs {expected_len})",
            path.display(),
            payload.len()
        )));
    }
    let digest = sha2::Sha256::digest(&payload);
    let actual: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    if actual != header.payload_sha256 {
        return Err(Error::Checkpoint(format!("{}: payload checksum mismatch", path.display())));
    }

    let mut state = EncoderState::<f32>::init(header.config.clone(), 0)?;
    if let Some(kind) = header.head_kind {
        let entry = header
            .manifest
            .iter()
            .find(|e| e.name == "head.weight")
            .ok_or_else(|| Error::Checkpoint("head kind present but head.weight missing".into()))?;
        state.attach_head(kind, entry.shape[1], 0);
    }

    let by_name: HashMap<&str, &ManifestEntry> =
        header.manifest.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut seen = 0usize;
    let mut err: Option<Error> = None;
    state.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name.as_str()) else {
            err = Some(Error::Checkpoint(format!("tensor {name} missing from manifest")));
            return;
        };
        if entry.shape != p.value.shape() {
            err = Some(Error::Checkpoint(format!(
                "tensor {name}: file shape {:?} does not match config shape {:?}",
                entry.shape,
                p.value.shape()
            )));
            return;
        }
        let start = entry.offset as usize;
        let n = p.value.numel();
        let bytes = &payload[start..start + n * 4];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        p.value.data_mut().copy_from_slice(&data);
        seen += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != header.manifest.len() {
        let mut names = std::collections::HashSet::new();
        state.visit_params(&mut |n, _| {
            names.insert(n);
        });
        let extra: Vec<&str> = header
            .manifest
            .iter()
            .filter(|e| !names.contains(&e.name))
            .map(|e| e.name.as_str())
            .collect();
        return Err(Error::Checkpoint(format!(
            "manifest has tensors not in the model: {}",
            extra.join(", ")
        )));
    }
    state.zero_grads();
    Ok((state, header))
}

/// Strategy 1: fresh truncated-normal weights, deterministic per seed.
pub fn init_from_scratch(config: ModelConfig, seed: u64) -> Result<EncoderState<f32>> {
    EncoderState::init(config, seed)
}

/// Strategy 2: rebuild a BERT-shaped model as a Longformer. All weights are
/// copied verbatim; global q/k/v projections start as copies of the local
/// ones; the position table is tiled, `target[i] = src[i mod src_positions]`,
/// so inputs up to 512 tokens behave identically. Any task head is dropped
/// (the MLM head is re-initialized by the caller).
pub fn convert_bert_to_longformer(
    src: &EncoderState<f32>,
    max_positions: usize,
    window: usize,
) -> Result<EncoderState<f32>> {
    if src.config.shape != ModelShape::Bert {
        return Err(Error::Config("conversion source must be BERT-shaped".into()));
    }
    if max_positions < src.config.max_positions {
        return Err(Error::Config(format!(
            "target positions {max_positions} smaller than source {}",
            src.config.max_positions
        )));
    }
    let mut config = src.config.clone();
    config.shape = ModelShape::Longformer;
    config.max_positions = max_positions;
    config.window = window;
    config.validate()?;

    let mut dst = EncoderState::<f32>::init(config, 0)?;
    let mut values: HashMap<String, Parameter<f32>> = HashMap::new();
    src.visit_params(&mut |name, p| {
        values.insert(name, Parameter::new(p.value.clone()));
    });
    let src_pos = src.config.max_positions;
    let src_pos_table = src.pos_emb.value.clone();
    let mut missing = Vec::new();
    dst.visit_params_mut(&mut |name, p| {
        if name == "embeddings.position" {
            for i in 0..max_positions {
                let row = src_pos_table.row(i % src_pos);
                p.value.row_mut(i).copy_from_slice(row);
            }
            return;
        }
        // global projections start as copies of the matching local ones
        let src_name = name.replace("q_global", "q").replace("k_global", "k").replace("v_global", "v");
        match values.get(&src_name) {
            Some(sp) if sp.value.shape() == p.value.shape() => {
                p.value = sp.value.clone();
            }
            _ => missing.push(name),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "conversion geometry mismatch for tensors: {}",
            missing.join(", ")
        )));
    }
    Ok(dst)
}

/// Strategy 3: adopt an existing Longformer checkpoint verbatim, keeping its
/// tokenizer; optimizer state starts fresh.
pub fn init_continual(path: &Path) -> Result<(EncoderState<f32>, CheckpointHeader)> {
    let (state, header) = load(path)?;
    if state.config.shape != ModelShape::Longformer {
        return Err(Error::Config("continual pre-training needs a Longformer-shaped checkpoint".into()));
    }
    Ok((state, header))
}
