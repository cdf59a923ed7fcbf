//! Query/document embeddings, similarity scoring, retriever ranking and a
//! deterministic hashing encoder that stands in for a dual-encoder retriever.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::normal;
use crate::tensor::{dot, norm};
use crate::vocab::split_words;

/// Dense embedding produced by a retriever.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Scoring function used for ranking and for every retrieval feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    /// `sim(a, b)`; cosine against a zero-norm vector is 0.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDoc {
    pub doc_id: String,
    pub embedding: Embedding,
    pub label: bool,
    pub text: Option<String>,
}

/// A query and its documents in retriever preference order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub query: Embedding,
    pub docs: Vec<RankedDoc>,
}

impl RankedList {
    pub fn k(&self) -> usize {
        self.docs.len()
    }

    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.docs.iter().map(|d| if d.label { 1.0 } else { 0.0 }).collect()
    }

    /// Checks `k ≥ 1`, finite entries and a consistent dimension.
    pub fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(Error::EmptyList);
        }
        let dim = self.dim();
        if !self.query.is_finite() {
            return Err(Error::Data(alloc::format!("query {} has non-finite entries", self.query_id)));
        }
        for d in &self.docs {
            if d.embedding.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: d.embedding.dim(),
                });
            }
            if !d.embedding.is_finite() {
                return Err(Error::Data(alloc::format!("document {} has non-finite entries", d.doc_id)));
            }
        }
        Ok(())
    }

    pub fn scores(&self, sim: Similarity) -> Vec<f64> {
        self.docs
            .iter()
            .map(|d| sim.score(self.query.as_slice(), d.embedding.as_slice()))
            .collect()
    }

    pub fn is_sorted(&self, sim: Similarity) -> bool {
        self.scores(sim).windows(2).all(|w| w[0] >= w[1])
    }

    /// Stable sort by descending similarity to the query.
    pub fn sort(&mut self, sim: Similarity) {
        let scores = self.scores(sim);
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut docs: Vec<Option<RankedDoc>> = core::mem::take(&mut self.docs).into_iter().map(Some).collect();
        self.docs = order.into_iter().map(|i| docs[i].take().expect("permutation")).collect();
    }
}

/// Builds a [`RankedList`] ordered by descending similarity; ties keep their
/// input order.
pub fn rank_documents(
    query_id: &str,
    query: Embedding,
    docs: Vec<RankedDoc>,
    sim: Similarity,
) -> Result<RankedList> {
    let mut list = RankedList {
        query_id: query_id.into(),
        query,
        docs,
    };
    list.validate()?;
    list.sort(sim);
    Ok(list)
}

/// Deterministic bag-of-tokens encoder: each lowercase token maps to a
/// seeded Gaussian projection vector; a text is the L2-normalized mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let lower = token.to_lowercase();
        let key = fnv1a(lower.as_bytes()) ^ self.seed.rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..self.dim).map(|_| normal(&mut rng)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Embedding> {
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut acc = alloc::vec![0.0; self.dim];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t.as_ref())) {
                *a += v;
            }
        }
        let n = norm(&acc);
        if n > 0.0 {
            for a in &mut acc {
                *a /= n;
            }
        }
        Ok(Embedding(acc))
    }

    /// Splits on whitespace and punctuation, then encodes.
    pub fn encode(&self, text: &str) -> Result<Embedding> {
        self.encode_tokens(&split_words(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::String;
    use alloc::vec;
    use proptest::prelude::*;

    fn doc(id: &str, v: Vec<f64>) -> RankedDoc {
        RankedDoc {
            doc_id: id.into(),
            embedding: Embedding(v),
            label: false,
            text: None,
        }
    }

    fn ids(l: &RankedList) -> Vec<&str> {
        l.docs.iter().map(|d| d.doc_id.as_str()).collect()
    }

    #[test]
    fn orthogonal_docs_rank_by_cosine() {
        let l = rank_documents(
            "q",
            Embedding(vec![1.0, 0.0]),
            vec![doc("b", vec![0.0, 1.0]), doc("a", vec![1.0, 0.0])],
            Similarity::Cosine,
        )
        .unwrap();
        assert_eq!(ids(&l), ["a", "b"]);
        assert_eq!(l.scores(Similarity::Cosine), vec![1.0, 0.0]);
    }

    #[test]
    fn ties_keep_input_order() {
        let l = rank_documents(
            "q",
            Embedding(vec![1.0, 1.0]),
            vec![doc("x", vec![1.0, 0.0]), doc("y", vec![0.0, 1.0])],
            Similarity::Cosine,
        )
        .unwrap();
        assert_eq!(ids(&l), ["x", "y"]);
        for s in l.scores(Similarity::Cosine) {
            assert!((s - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
        let same: Vec<RankedDoc> = (0..5).map(|i| doc(&format!("d{i}"), vec![0.3, 0.4])).collect();
        let l = rank_documents("q", Embedding(vec![1.0, 0.0]), same, Similarity::Cosine).unwrap();
        assert_eq!(ids(&l), ["d0", "d1", "d2", "d3", "d4"]);
    }

    #[test]
    fn zero_norm_scores_zero() {
        assert_eq!(Similarity::Cosine.score(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn rejects_empty_and_ragged_lists() {
        let e = rank_documents("q", Embedding(vec![1.0]), vec![], Similarity::Cosine).unwrap_err();
        assert_eq!(e, Error::EmptyList);
        assert_eq!(format!("{e}"), "k must be ≥ 1");
        let e = rank_documents(
            "q",
            Embedding(vec![1.0, 0.0]),
            vec![doc("a", vec![1.0])],
            Similarity::Cosine,
        )
        .unwrap_err();
        assert!(matches!(e, Error::DimMismatch { expected: 2, actual: 1 }));
    }

    #[test]
    fn encoder_is_deterministic_and_normalized() {
        let enc = HashEncoder::default();
        let a = enc.encode("the color of zorbak").unwrap();
        assert_eq!(a, enc.encode("the color of zorbak").unwrap());
        assert!((norm(a.as_slice()) - 1.0).abs() < 1e-12);
        let single = enc.encode("zorbak").unwrap();
        let raw = enc.token_vector("zorbak");
        let n = norm(&raw);
        for (x, y) in single.0.iter().zip(&raw) {
            assert!((x - y / n).abs() < 1e-12);
        }
        assert_eq!(enc.encode(" ,").map(|e| e.dim()), Ok(64));
        assert_eq!(enc.encode("   "), Err(Error::EmptyText));
    }

    #[test]
    fn disjoint_texts_are_nearly_orthogonal() {
        let enc = HashEncoder::default();
        let mut worst = 0.0f64;
        for i in 0..100 {
            let a = enc.encode(&format!("alpha{i} beta{i} gamma{i}")).unwrap();
            let b = enc.encode(&format!("delta{i} eps{i}")).unwrap();
            worst = worst.max(Similarity::Cosine.score(a.as_slice(), b.as_slice()).abs());
        }
        assert!(worst < 0.6, "worst |cos| {worst}");
        let mean: f64 = (0..100)
            .map(|i| {
                let a = enc.encode(&format!("alpha{i} beta{i}")).unwrap();
                let b = enc.encode(&format!("delta{i} eps{i}")).unwrap();
                Similarity::Cosine.score(a.as_slice(), b.as_slice()).abs()
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean < 0.3, "mean |cos| {mean}");
    }

    proptest! {
        #[test]
        fn ranking_permutes_and_keeps_tie_order(
            protos in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..4),
            picks in prop::collection::vec(0usize..4, 1..12),
            q in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let docs: Vec<RankedDoc> = picks
                .iter()
                .enumerate()
                .map(|(i, &p)| doc(&format!("d{i}"), protos[p % protos.len()].clone()))
                .collect();
            let input: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
            let l = rank_documents("q", Embedding(q), docs, Similarity::Cosine).unwrap();
            let mut a = ids(&l);
            let scores = l.scores(Similarity::Cosine);
            prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            for i in 0..a.len() {
                for j in i + 1..a.len() {
                    if scores[i] == scores[j] {
                        let pi = input.iter().position(|x| *x == a[i]).unwrap();
                        let pj = input.iter().position(|x| *x == a[j]).unwrap();
                        prop_assert!(pi < pj);
                    }
                }
            }
            a.sort();
            let mut b = input.clone();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
