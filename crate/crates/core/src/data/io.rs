//! JSON-lines manifest plus one raw binary blob per feature matrix.
//!
//! Blob layout: 8-byte magic `MMFUSEF1`, rows as `u32` LE, cols as `u32` LE,
//! then `rows * cols` row-major `f32` LE values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Emotion, Utterance};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 8] = b"MMFUSEF1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";
const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub speaker: u32,
    pub session: u32,
    pub features: String,
    pub tokens: Vec<u32>,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features: Option<String>,
}

pub fn encode_blob(m: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a blob; `id` names the owning utterance in errors.
pub fn decode_blob(bytes: &[u8], id: &str) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptHeader {
            id: id.to_string(),
            reason: format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()),
        });
    }
    if &bytes[..8] != BLOB_MAGIC {
        return Err(Error::CorruptHeader {
            id: id.to_string(),
            reason: "bad magic".into(),
        });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let declared = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptHeader {
            id: id.to_string(),
            reason: format!("dims {rows}×{cols} overflow"),
        })?;
    if payload.len() != declared {
        return Err(Error::DimensionMismatch {
            id: id.to_string(),
            declared,
            found: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn write_blob(path: &Path, m: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_blob(m)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path, id: &str) -> Result<Array2<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob {
                id: id.to_string(),
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode_blob(&bytes, id)
}

fn blob_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `dataset.json`, `manifest.jsonl` and `features/<id>.bin` under
/// `dir`, returning the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let meta_path = dir.join(META_FILE);
    let meta = serde_json::to_vec_pretty(&dataset.meta).expect("meta serialises");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for u in &dataset.utterances {
        let name = blob_name(&u.id);
        let features = format!("features/{name}.bin");
        write_blob(&dir.join(&features), &u.speech)?;
        let text_features = match &u.text_features {
            Some(tf) => {
                let rel = format!("features/{name}.text.bin");
                write_blob(&dir.join(&rel), tf)?;
                Some(rel)
            }
            None => None,
        };
        let entry = ManifestEntry {
            id: u.id.clone(),
            label: u.raw_label.as_str().to_string(),
            speaker: u.speaker_id,
            session: u.session_id,
            features,
            tokens: u.tokens.clone(),
            transcript: u.transcript.clone(),
            text_features,
        };
        serde_json::to_writer(&mut w, &entry).expect("entry serialises");
        w.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub(crate) fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads a dataset directory. `dataset.json` is optional; without it the
/// metadata is inferred from the manifest (real precomputed features).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut utterances = Vec::with_capacity(entries.len());
    for e in entries {
        let speech = read_blob(&dir.join(&e.features), &e.id)?;
        let text_features = match &e.text_features {
            Some(rel) => Some(read_blob(&dir.join(rel), &e.id)?),
            None => None,
        };
        utterances.push(Utterance {
            raw_label: e.label.parse::<Emotion>()?,
            id: e.id,
            speech,
            tokens: e.tokens,
            transcript: e.transcript,
            speaker_id: e.speaker,
            session_id: e.session,
            text_features,
        });
    }

    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_slice::<DatasetMeta>(&bytes)
            .map_err(|e| Error::Schema(format!("{}: {e}", meta_path.display())))?
    } else {
        DatasetMeta {
            d_a: utterances.first().map(|u| u.speech.ncols()).unwrap_or(0),
            token_vocab_size: utterances
                .iter()
                .flat_map(|u| u.tokens.iter())
                .max()
                .map(|m| *m as usize + 1)
                .unwrap_or(0),
            n_sessions: utterances.iter().map(|u| u.session_id).max().unwrap_or(0),
            lexicon: None,
            speaker_offsets: Default::default(),
        }
    };
    let dataset = Dataset { meta, utterances };
    dataset.validate()?;
    Ok(dataset)
}
