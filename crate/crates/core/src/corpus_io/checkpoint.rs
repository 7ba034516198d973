use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GISTCKP1";

/// Model-agnostic checkpoint: a config echo, the vocabulary, and named
/// tensors stored as f32le in declared order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vocabulary,
    pub tensors: Vec<(String, Mat<f32>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    dtype: String,
    config: serde_json::Value,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: ckpt.kind.clone(),
        dtype: "f32le".into(),
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        tensors: ckpt.tensors.iter().map(|(n, m)| TensorEntry { name: n.clone(), shape: [m.rows, m.cols] }).collect(),
    };
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CHECKPOINT_MAGIC)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, m) in &ckpt.tensors {
        for v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub(crate) fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "GISTCKP1" });
    }
    let rest = &bytes[8..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::MalformedHeader("missing newline".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    let payload = &rest[nl + 1..];
    let expected: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 4).sum();
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "declared tensors need {expected} bytes, payload has {}",
            payload.len()
        )));
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.shape[0] * t.shape[1];
        let data = payload[off..off + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        off += 4 * n;
        tensors.push((t.name, Mat::from_vec(t.shape[0], t.shape[1], data)));
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, vocab: header.vocab, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({"hidden": 2}),
            vocab: Vocabulary::from_tokens(["a"]),
            tensors: vec![
                ("w".into(), Mat::from_vec(2, 2, vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25])),
                ("b".into(), Mat::from_vec(1, 2, vec![0.1, 0.2])),
            ],
        }
    }

    fn encode(c: &Checkpoint) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        write_checkpoint(c, &p).unwrap();
        std::fs::read(p).unwrap()
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(decode_checkpoint(&encode(&c)).unwrap(), c);
    }

    #[test]
    fn corrupt_magic() {
        let mut b = encode(&sample());
        b[0] = b'X';
        assert!(matches!(decode_checkpoint(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_and_long_payloads() {
        let b = encode(&sample());
        assert!(matches!(decode_checkpoint(&b[..b.len() - 4]), Err(Error::Truncated { .. })));
        let mut long = b.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_checkpoint(&long), Err(Error::ShapeMismatch(_))));
    }
}
