use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const TRACE_MAGIC: &[u8; 8] = b"GISTTRC1";
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Decoder cross-attention, one row per decoding step and one column per
/// source position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub doc_id: String,
    pub matrix: Mat<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    doc_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    dtype: String,
}

impl AttentionTrace {
    pub fn new(doc_id: impl Into<String>, matrix: Mat<f32>) -> Result<Self> {
        let trace = Self { doc_id: doc_id.into(), matrix };
        trace.validate()?;
        Ok(trace)
    }

    pub fn t_steps(&self) -> usize {
        self.matrix.rows
    }

    pub fn n_positions(&self) -> usize {
        self.matrix.cols
    }

    pub fn validate(&self) -> Result<()> {
        for r in 0..self.matrix.rows {
            let mut sum = 0.0f64;
            for (c, &v) in self.matrix.row(r).iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::EntryOutOfRange { row: r, col: c, value: v as f64 });
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowNotStochastic { row: r, sum });
            }
        }
        Ok(())
    }
}

pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    trace.validate()?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(TRACE_MAGIC)?;
    let header = TraceHeader {
        doc_id: trace.doc_id.clone(),
        t: trace.t_steps(),
        n: trace.n_positions(),
        dtype: "f32le".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &trace.matrix.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a trace. A payload that ends mid-value is
/// `Truncated`; a whole number of values that disagrees with `T·N` is a
/// `ShapeMismatch`.
pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

pub(crate) fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    if bytes.len() < 8 || &bytes[..8] != TRACE_MAGIC {
        return Err(Error::BadMagic { expected: "GISTTRC1" });
    }
    let rest = &bytes[8..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::MalformedHeader("missing newline".into()))?;
    let header: TraceHeader =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    let payload = &rest[nl + 1..];
    let expected = header.t * header.n * 4;
    if payload.len() % 4 != 0 {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    if payload.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "header declares {}x{} values, payload holds {}",
            header.t,
            header.n,
            payload.len() / 4
        )));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    AttentionTrace::new(header.doc_id, Mat::from_vec(header.t, header.n, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &AttentionTrace) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.gtr");
        write_trace(t, &p).unwrap();
        std::fs::read(&p).unwrap()
    }

    fn sample() -> AttentionTrace {
        AttentionTrace::new("doc", Mat::from_vec(2, 3, vec![0.2, 0.3, 0.5, 0.0, 1.0, 0.0])).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode(&t);
        let back = decode_trace(&bytes).unwrap();
        assert_eq!(back, t);
        let a: Vec<u32> = t.matrix.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.matrix.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_is_json_line_after_magic() {
        let bytes = encode(&sample());
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..nl]).unwrap();
        assert_eq!(header["T"], 2);
        assert_eq!(header["N"], 3);
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(bytes.len(), nl + 1 + 2 * 3 * 4);
    }

    fn forge(header: &str, values: &[f32]) -> Vec<u8> {
        let mut b = TRACE_MAGIC.to_vec();
        b.extend_from_slice(header.as_bytes());
        b.push(b'\n');
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn non_stochastic_row_is_rejected() {
        let b = forge(r#"{"doc_id":"d","T":1,"N":2,"dtype":"f32le"}"#, &[0.4, 0.4]);
        assert!(matches!(decode_trace(&b), Err(Error::RowNotStochastic { row: 0, .. })));
    }

    #[test]
    fn column_count_mismatch_is_shape_error() {
        let b = forge(r#"{"doc_id":"d","T":2,"N":3,"dtype":"f32le"}"#, &[0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(decode_trace(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn partial_value_is_truncation() {
        let mut b = forge(r#"{"doc_id":"d","T":1,"N":2,"dtype":"f32le"}"#, &[0.5, 0.5]);
        b.pop();
        assert!(matches!(decode_trace(&b), Err(Error::Truncated { .. })));
    }

    #[test]
    fn malformed_header_and_magic() {
        assert!(matches!(decode_trace(b"GISTTRC1{nope\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_trace(b"GISTTRC1{}"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_trace(b"NOTATRACE"), Err(Error::BadMagic { .. })));
    }

    fn stochastic(t: usize, n: usize) -> impl Strategy<Value = Mat<f32>> {
        proptest::collection::vec(0.01f64..1.0, t * n).prop_map(move |raw| {
            let mut m = Mat::zeros(t, n);
            for r in 0..t {
                let s: f64 = raw[r * n..(r + 1) * n].iter().sum();
                for c in 0..n {
                    m.set(r, c, (raw[r * n + c] / s) as f32);
                }
            }
            m
        })
    }

    proptest! {
        #[test]
        fn random_traces_round_trip(m in (1usize..8, 1usize..12).prop_flat_map(|(t, n)| stochastic(t, n))) {
            let t = AttentionTrace::new("p", m).unwrap();
            let back = decode_trace(&encode(&t)).unwrap();
            prop_assert_eq!(back.matrix.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            t.matrix.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert!(back.validate().is_ok());
        }
    }
}
