//! List-wise retrieval features: relevance, precedent similarity and
//! neighbor similarity for every document of a ranked list.

use alloc::vec;
use alloc::vec::Vec;

use crate::embedding::{RankedList, Similarity};
use crate::error::Result;
use crate::tensor::Tensor;

/// `[relevance, precedent similarity, neighbor similarity]` per document.
pub type FeatureRow = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureList {
    pub rows: Vec<FeatureRow>,
}

/// Which feature channels reach the bridge; disabled channels become zeros so
/// the input stays three wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask {
    pub relevance: bool,
    pub precedent: bool,
    pub neighbor: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl FeatureMask {
    pub const ALL: Self = Self {
        relevance: true,
        precedent: true,
        neighbor: true,
    };
    pub const NONE: Self = Self {
        relevance: false,
        precedent: false,
        neighbor: false,
    };
}

impl FeatureList {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn masked(&self, mask: FeatureMask) -> Self {
        let keep = [mask.relevance, mask.precedent, mask.neighbor];
        let rows = self
            .rows
            .iter()
            .map(|r| core::array::from_fn(|c| if keep[c] { r[c] } else { 0.0 }))
            .collect();
        Self { rows }
    }

    /// `k × 3` tensor in rank order.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![self.rows.len(), 3], data).expect("feature list is non-empty")
    }
}

/// `r_i = sim(query, doc_i)`.
pub fn relevance(sim: Similarity, query: &[f64], doc: &[f64]) -> f64 {
    sim.score(query, doc)
}

/// `γ_i` for the 0-based position `i`: similarity between document `i` and
/// the sum of its predecessors weighted by a softmax of relevance taken over
/// the whole list. The first document has no predecessors and scores 0.
pub fn precedent_similarity(sim: Similarity, list: &RankedList, relevances: &[f64], i: usize) -> f64 {
    if i == 0 {
        return 0.0;
    }
    let max = relevances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = relevances.iter().map(|&r| libm::exp(r - max)).sum();
    let mut acc = vec![0.0; list.dim()];
    for (j, d) in list.docs[..i].iter().enumerate() {
        let w = libm::exp(relevances[j] - max) / z;
        for (a, &x) in acc.iter_mut().zip(d.embedding.as_slice()) {
            *a += w * x;
        }
    }
    sim.score(list.docs[i].embedding.as_slice(), &acc)
}

/// `ζ_i` for the 0-based position `i`: mean similarity to the rank-adjacent
/// documents. A single-document list scores 0.
pub fn neighbor_similarity(sim: Similarity, list: &RankedList, i: usize) -> f64 {
    let k = list.k();
    if k < 2 {
        return 0.0;
    }
    let s = |a: usize, b: usize| sim.score(list.docs[a].embedding.as_slice(), list.docs[b].embedding.as_slice());
    if i == 0 {
        s(0, 1)
    } else if i == k - 1 {
        s(k - 2, k - 1)
    } else {
        (s(i - 1, i) + s(i, i + 1)) / 2.0
    }
}

/// Feature triples for every document, in rank order.
pub fn extract_features(list: &RankedList, sim: Similarity) -> Result<FeatureList> {
    list.validate()?;
    let q = list.query.as_slice();
    let relevances: Vec<f64> = list
        .docs
        .iter()
        .map(|d| relevance(sim, q, d.embedding.as_slice()))
        .collect();
    let rows = (0..list.k())
        .map(|i| {
            [
                relevances[i],
                precedent_similarity(sim, list, &relevances, i),
                neighbor_similarity(sim, list, i),
            ]
        })
        .collect();
    Ok(FeatureList { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedding, RankedDoc};
    use alloc::format;
    use proptest::prelude::*;

    fn list(q: &[f64], docs: &[&[f64]]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            query: Embedding(q.to_vec()),
            docs: docs
                .iter()
                .enumerate()
                .map(|(i, d)| RankedDoc {
                    doc_id: format!("d{i}"),
                    embedding: Embedding(d.to_vec()),
                    label: false,
                    text: None,
                })
                .collect(),
        }
    }

    const COS: Similarity = Similarity::Cosine;

    #[test]
    fn relevance_examples() {
        assert_eq!(relevance(COS, &[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(relevance(COS, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((relevance(COS, &[1.0, 1.0], &[1.0, 0.0]) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn precedent_examples() {
        let l = list(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = [1.0, 0.0];
        assert_eq!(precedent_similarity(COS, &l, &r, 0), 0.0);
        // Predecessor sum is (0.7311, 0), orthogonal to (0, 1).
        assert_eq!(precedent_similarity(COS, &l, &r, 1), 0.0);

        let d: &[f64] = &[1.0, 2.0, 3.0];
        let same = list(&[0.3, -0.2, 0.9], &[d; 4]);
        let f = extract_features(&same, COS).unwrap();
        for row in &f.rows[1..] {
            assert!((row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_examples() {
        let l = list(&[1.0, 0.0], &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let z: Vec<f64> = (0..3).map(|i| neighbor_similarity(COS, &l, i)).collect();
        assert_eq!(z, vec![1.0, 0.5, 0.0]);
        let one = list(&[1.0, 0.0], &[&[0.5, 0.5]]);
        assert_eq!(neighbor_similarity(COS, &one, 0), 0.0);
        let two = list(&[1.0, 0.0], &[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((neighbor_similarity(COS, &two, 0) - 1.0).abs() < 1e-12);
        assert!((neighbor_similarity(COS, &two, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composed_example() {
        let l = list(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = extract_features(&l, COS).unwrap();
        assert_eq!(f.rows, vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(f, extract_features(&l.clone(), COS).unwrap());
    }

    #[test]
    fn masking_zeroes_one_channel() {
        let f = FeatureList {
            rows: vec![[0.5, 0.25, 0.75], [0.1, 0.2, 0.3]],
        };
        let m = f.masked(FeatureMask {
            neighbor: false,
            ..FeatureMask::ALL
        });
        assert_eq!(m.rows, vec![[0.5, 0.25, 0.0], [0.1, 0.2, 0.0]]);
        assert_eq!(f.to_tensor().shape(), &[2, 3]);
    }

    fn owned(q: &[f64], docs: &[Vec<f64>]) -> RankedList {
        let refs: alloc::vec::Vec<&[f64]> = docs.iter().map(|d| d.as_slice()).collect();
        list(q, &refs)
    }

    fn lists() -> impl Strategy<Value = (alloc::vec::Vec<f64>, alloc::vec::Vec<alloc::vec::Vec<f64>>)> {
        (1usize..=10, 2usize..=16).prop_flat_map(|(k, dim)| {
            (
                prop::collection::vec(-3.0f64..3.0, dim),
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), k),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_features_stay_in_range((q, docs) in lists()) {
            let f = extract_features(&owned(&q, &docs), COS).unwrap();
            prop_assert_eq!(f.k(), docs.len());
            for row in &f.rows {
                for v in row {
                    prop_assert!(v.is_finite() && (-1.0..=1.0).contains(v));
                }
            }
        }

        #[test]
        fn cosine_features_ignore_positive_scale((q, docs) in lists(), c in 0.01f64..100.0) {
            let a = extract_features(&owned(&q, &docs), COS).unwrap();
            let scaled: alloc::vec::Vec<alloc::vec::Vec<f64>> =
                docs.iter().map(|d| d.iter().map(|x| x * c).collect()).collect();
            let qs: alloc::vec::Vec<f64> = q.iter().map(|x| x * c).collect();
            let b = extract_features(&owned(&qs, &scaled), COS).unwrap();
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
                }
            }
        }

        #[test]
        fn relevance_follows_the_document_not_the_rank((q, docs) in lists()) {
            let a = extract_features(&owned(&q, &docs), COS).unwrap();
            let mut rev = docs.clone();
            rev.reverse();
            let b = extract_features(&owned(&q, &rev), COS).unwrap();
            let k = docs.len();
            for i in 0..k {
                prop_assert_eq!(a.rows[i][0], b.rows[k - 1 - i][0]);
            }
            if k >= 3 {
                let changed = (0..k).any(|i| {
                    a.rows[i][1] != b.rows[k - 1 - i][1] || a.rows[i][2] != b.rows[k - 1 - i][2]
                });
                prop_assert!(changed);
            }
        }
    }
}
