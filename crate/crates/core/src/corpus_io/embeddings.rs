use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Mat;

const OOV_RANGE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Mat<f32>,
    pub dim: usize,
}

/// Row for a token missing from the pre-trained file: uniform in
/// `[-0.1, 0.1]`, keyed by `(seed, token)`.
pub fn seeded_row(seed: u64, token: &str, dim: usize) -> Vec<f32> {
    let mut r = rng::stream(seed, "embedding-init", token);
    (0..dim).map(|_| r.gen_range(-OOV_RANGE..=OOV_RANGE)).collect()
}

impl EmbeddingTable {
    /// Table with every row drawn from the seeded initializer.
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut matrix = Mat::zeros(vocab.size(), dim);
        for (id, tok) in vocab.tokens().iter().enumerate().skip(PAD_ID + 1) {
            matrix.row_mut(id).copy_from_slice(&seeded_row(seed, tok, dim));
        }
        Self { matrix, dim }
    }
}

/// Reads a text embedding file (`token v_1 … v_dim` per line). An optional
/// leading `count dim` header line is skipped.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::random(vocab, dim, seed);
    let reader = BufReader::new(File::open(path.as_ref())?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: values.len(), line: i + 1 });
        }
        let Some(id) = vocab.get(token) else { continue };
        if id == PAD_ID {
            continue;
        }
        let row: Vec<f32> = values
            .iter()
            .map(|v| v.parse::<f32>().map_err(|e| Error::Dataset { line: i + 1, message: e.to_string() }))
            .collect::<Result<_>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for {token:?}")));
        }
        table.matrix.row_mut(id).copy_from_slice(&row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        std::fs::write(&p, content).unwrap();
        (dir, p)
    }

    #[test]
    fn rows_are_read_and_padding_is_zero() {
        let v = Vocabulary::from_tokens(["cat", "dog"]);
        let (_d, p) = write("cat 0.1 0.2\n");
        let t = load_embeddings(&p, &v, 2, 7).unwrap();
        assert_eq!(t.matrix.row(v.id("cat")), &[0.1, 0.2]);
        assert_eq!(t.matrix.row(PAD_ID), &[0.0, 0.0]);
        assert_eq!(t.matrix.rows, v.size());
    }

    #[test]
    fn absent_tokens_are_reproducible_and_bounded() {
        let v = Vocabulary::from_tokens(["cat", "dog"]);
        let (_d, p) = write("cat 0.1 0.2\n");
        let a = load_embeddings(&p, &v, 2, 7).unwrap();
        let b = load_embeddings(&p, &v, 2, 7).unwrap();
        let c = load_embeddings(&p, &v, 2, 8).unwrap();
        let dog = v.id("dog");
        assert_eq!(a.matrix.row(dog), b.matrix.row(dog));
        assert_ne!(a.matrix.row(dog), c.matrix.row(dog));
        assert!(a.matrix.row(dog).iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let v = Vocabulary::from_tokens(["cat"]);
        let (_d, p) = write("cat 0.1 0.2 0.3\n");
        assert!(matches!(load_embeddings(&p, &v, 2, 0), Err(Error::DimensionMismatch { expected: 2, found: 3, line: 1 })));
    }

    #[test]
    fn word2vec_header_is_skipped() {
        let v = Vocabulary::from_tokens(["cat"]);
        let (_d, p) = write("1 2\ncat 0.5 -0.5\n");
        let t = load_embeddings(&p, &v, 2, 0).unwrap();
        assert_eq!(t.matrix.row(v.id("cat")), &[0.5, -0.5]);
    }
}
