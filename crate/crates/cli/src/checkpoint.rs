//! Self-describing checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   : 5-byte magic "NSKM1"
//! offset 5   : u32 header length H
//! offset 9   : H bytes of UTF-8 JSON header
//! offset 9+H : payload — every tensor's values concatenated as f32 LE,
//!              in the header's tensor order
//! ```
//!
//! The JSON header carries the model config, the vocabulary size and the
//! SHA-256 of the vocabulary file, the experiment config hash, and one
//! `{name, rows, cols, offset, len}` record per tensor (`offset`/`len` in
//! f32 units into the payload).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use noskim_core::model::{ModelConfig, SkimTransformer};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 5] = b"NSKM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub vocab_sha256: String,
    pub config_hash: String,
    pub tensors: Vec<TensorRecord>,
}

pub fn save(
    path: &Path,
    model: &SkimTransformer,
    vocab_sha256: &str,
    config_hash: &str,
) -> CliResult<()> {
    let named = model.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, data, shape) in &named {
        tensors.push(TensorRecord {
            name: name.clone(),
            rows: shape[0],
            cols: shape[1],
            offset,
            len: data.len(),
        });
        for &v in *data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += data.len();
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        vocab_size: model.vocab_size(),
        vocab_sha256: vocab_sha256.to_string(),
        config_hash: config_hash.to_string(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(CliError::runtime)?;
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(CliError::runtime)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(CliError::runtime)?;
    w.write_all(&header_bytes).map_err(CliError::runtime)?;
    w.write_all(&payload).map_err(CliError::runtime)?;
    w.flush().map_err(CliError::runtime)
}

pub fn load(path: &Path) -> CliResult<(SkimTransformer, CheckpointHeader)> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::data_msg(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let corrupt = |what: &str| {
        CliError::data_msg(format!("corrupt checkpoint {}: {what}", path.display()))
    };
    if bytes.len() < 9 || &bytes[0..5] != MAGIC {
        return Err(corrupt("bad magic (expected NSKM1)"));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let payload_start = 9 + header_len;
    if bytes.len() < payload_start {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[9..payload_start]).map_err(|e| corrupt(&format!("{e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[payload_start..];
    let total_f32: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total_f32 * 4 {
        return Err(corrupt(&format!(
            "payload is {} bytes, header describes {}",
            payload.len(),
            total_f32 * 4
        )));
    }
    let model = SkimTransformer::from_named_tensors(&header.config, header.vocab_size, |name, len| {
        let rec = header.tensors.iter().find(|t| t.name == name)?;
        if rec.len != len {
            return None;
        }
        let start = rec.offset * 4;
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let b: [u8; 4] = payload[start + i * 4..start + i * 4 + 4].try_into().unwrap();
            out.push(f32::from_le_bytes(b) as f64);
        }
        Some(out)
    })
    .map_err(|e| corrupt(&format!("{e}")))?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use noskim_core::model::TraceDetail;
    use noskim_core::tokenizer::{TokenSequence, CLS_ID};

    fn model() -> SkimTransformer {
        let cfg = ModelConfig {
            num_layers: 2,
            embed_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            max_seq_len: 8,
            num_classes: 2,
            skim_factor: 0.5,
            gate_hidden_dim: 4,
            seed: 77,
        };
        SkimTransformer::init(&cfg, 12).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        let mut all = vec![CLS_ID];
        all.extend_from_slice(ids);
        let spans = std::iter::once(None).chain((0..ids.len()).map(Some)).collect();
        TokenSequence { ids: all, word_spans: spans, truncated: false }
    }

    #[test]
    fn roundtrip_preserves_config_and_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nskm");
        let m = model();
        save(&path, &m, "vhash", "chash").unwrap();
        let (loaded, header) = load(&path).unwrap();
        assert_eq!(header.config, *m.config());
        assert_eq!(header.vocab_sha256, "vhash");
        assert_eq!(header.config_hash, "chash");
        assert_eq!(loaded.vocab_size(), m.vocab_size());
        // Parameters survive up to the f32 quantization the format mandates.
        for ((na, a, _), (nb, b, _)) in m.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(na, &nb);
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32, "{na}");
            }
        }
        // A loaded model still runs.
        let trace = loaded.forward(&seq(&[3, 4, 5]), TraceDetail::Standard).unwrap();
        assert_eq!(trace.seq_len(), 4);
    }

    #[test]
    fn save_load_save_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nskm");
        let p2 = dir.path().join("b.nskm");
        let m = model();
        save(&p1, &m, "v", "c").unwrap();
        let (loaded, _) = load(&p1).unwrap();
        save(&p2, &loaded, "v", "c").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nskm");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        let err = load(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bad.nskm") && msg.contains("magic"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        // Truncated payload.
        let m = model();
        let good = dir.path().join("good.nskm");
        save(&good, &m, "v", "c").unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(format!("{err}").contains("payload"), "{err}");
    }
}
