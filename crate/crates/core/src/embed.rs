//! Text embeddings behind a provider interface.
//!
//! The default provider is a seeded feature-hashing bag-of-tokens embedder.
//! Vectors produced offline by any other encoder can be loaded from the TSV
//! exchange format (`D=<int>` header, then `key TAB v1,v2,...` rows).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_DIMENSION: usize = 64;

/// Fixed-length vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !linalg::all_finite(&values) {
            return Err(Error::Divergence("embedding has non-finite entries".into()));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer so low bits are well mixed before the modulo
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Signed feature hashing over the token multiset, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(HashingEmbedder { dim, seed })
    }

    /// Bucket and sign assigned to a token.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let h = fnv1a(self.seed, token.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    fn embed(&self, text: &str) -> Embedding {
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text) {
            let (bucket, sign) = self.slot(&token);
            values[bucket] += sign;
        }
        let n = linalg::norm(&values);
        if n > 0.0 {
            values.iter_mut().for_each(|v| *v /= n);
        }
        Embedding(values)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed(text))
    }
}

/// Key → vector table, loaded from or saved to the TSV exchange format.
///
/// Used as a provider it looks the raw text up as a key.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<String, Embedding>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Embedding) -> Result<()> {
        let key = key.into();
        if vector.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: vector.dim(),
            });
        }
        if key.is_empty() || key.contains(['\t', '\n', '\r']) {
            return Err(Error::data(format!("invalid embedding key {key:?}")));
        }
        self.rows.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&Embedding> {
        self.rows
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io("<embeddings>", e))?
            .ok_or_else(|| Error::data("embedding file is empty"))?;
        let dim: usize = header
            .trim()
            .strip_prefix("D=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::data(format!("bad embedding header {header:?}")))?;
        let mut table = EmbeddingTable::new(dim);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<embeddings>", e))?;
            if line.is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("embedding row {}: missing tab", n + 2)))?;
            let values = values
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::data(format!("embedding row {}: {e}", n + 2)))?;
            if values.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: values.len(),
                });
            }
            table.insert(key, Embedding::new(values)?)?;
        }
        Ok(table)
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "D={}", self.dim)?;
        for (key, v) in &self.rows {
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{key}\t{}", values.join(","))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.is_empty() {
            return Ok(Embedding::zeros(self.dim));
        }
        self.get(text).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn embedder() -> HashingEmbedder {
        HashingEmbedder::new(DEFAULT_DIMENSION, 0).unwrap()
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = embedder().embed_text("").unwrap();
        assert_eq!(v, Embedding::zeros(DEFAULT_DIMENSION));
        let v = embedder().embed_text(" ,.;").unwrap();
        assert_eq!(v, Embedding::zeros(DEFAULT_DIMENSION));
    }

    #[test]
    fn deterministic() {
        let e = embedder();
        let a = e.embed_text("Great shampoo, smells nice").unwrap();
        let b = e.embed_text("Great shampoo, smells nice").unwrap();
        assert_eq!(a, b);
        assert!((linalg::norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_and_punctuation_are_ignored() {
        let e = embedder();
        assert_eq!(
            e.embed_text("Hair DYE!").unwrap(),
            e.embed_text("hair dye").unwrap()
        );
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        // Reference value: with no bucket collisions among {hair, dye, color},
        // two-token texts sharing one token have cosine exactly 1/2.
        let e = embedder();
        let slots: Vec<_> = ["hair", "dye", "color", "xbox", "controller"]
            .iter()
            .map(|t| e.slot(t).0)
            .collect();
        let hd = e.embed_text("hair dye").unwrap();
        let hc = e.embed_text("hair color").unwrap();
        let xc = e.embed_text("xbox controller").unwrap();
        let near = linalg::cosine(&hd, &hc);
        let far = linalg::cosine(&hd, &xc);
        if slots[1] != slots[2] && slots[0] != slots[1] && slots[0] != slots[2] {
            assert!((near - 0.5).abs() < 1e-12, "near = {near}");
        }
        assert!(near > far, "near {near} far {far} slots {slots:?}");
    }

    #[test]
    fn word_order_is_irrelevant() {
        let e = embedder();
        let text = "this conditioner leaves my curly hair soft and shiny every single time";
        let reference = e.embed_text(text).unwrap();
        let mut words: Vec<&str> = text.split(' ').collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            words.shuffle(&mut rng);
            assert_eq!(e.embed_text(&words.join(" ")).unwrap(), reference);
        }
    }

    #[test]
    fn table_header_and_rows() {
        let mut file = "D=3\n".to_string();
        file += "a\t1,2,3\nb\t0,0,0\nc\t-1.5,2e-3,7\n";
        let table = EmbeddingTable::read(file.as_bytes()).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.get("c").unwrap().as_slice(), &[-1.5, 0.002, 7.0]);
    }

    #[test]
    fn table_rejects_short_rows() {
        let row: Vec<String> = (0..63).map(|i| i.to_string()).collect();
        let file = format!("D=64\nk\t{}\n", row.join(","));
        assert!(matches!(
            EmbeddingTable::read(file.as_bytes()),
            Err(Error::Dimension {
                expected: 64,
                found: 63
            })
        ));
    }

    #[test]
    fn table_missing_key_names_it() {
        let table = EmbeddingTable::new(2);
        let err = table.get("user-17").unwrap_err();
        assert!(err.to_string().contains("user-17"));
    }

    proptest! {
        #[test]
        fn table_round_trip_is_bitwise(values in proptest::collection::vec(
            proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 5)) {
            let mut table = EmbeddingTable::new(5);
            table.insert("k", Embedding::new(values.clone()).unwrap()).unwrap();
            let mut buf = Vec::new();
            table.write(&mut buf).unwrap();
            let back = EmbeddingTable::read(buf.as_slice()).unwrap();
            let got = back.get("k").unwrap();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn outputs_are_finite(text in ".{0,80}") {
            let v = embedder().embed_text(&text).unwrap();
            prop_assert_eq!(v.dim(), DEFAULT_DIMENSION);
            prop_assert!(linalg::all_finite(&v));
        }
    }
}
