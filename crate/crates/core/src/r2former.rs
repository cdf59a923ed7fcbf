//! The bridge encoder: lifts the `k × 3` feature list to `k × h1`, adds
//! trainable positional embeddings and runs a bidirectional Transformer
//! encoder. Also hosts the query-document matching (QDM) head and loss.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureList;
use crate::graph::{Graph, Var, BCE_EPS};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{self, ParamId, ParamSet, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2FormerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub k_max: usize,
    pub dropout: f64,
}

impl Default for R2FormerConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 2,
            heads: 4,
            k_max: 30,
            dropout: 0.1,
        }
    }
}

/// Output embeddings `H`, one row per ranked document.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalInfo(pub Tensor);

#[derive(Debug, Clone)]
pub struct R2Former {
    pub config: R2FormerConfig,
    pub input: Linear,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub qdm_head: Linear,
}

impl R2Former {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        config: R2FormerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.k_max == 0 || config.hidden == 0 {
            return Err(Error::Config("bridge hidden size and k_max must be positive".into()));
        }
        let h = config.hidden;
        let input = Linear::new(ps, &format!("{prefix}.input"), 3, h, true, rng);
        let positions = ps.add(
            &format!("{prefix}.positions"),
            params::init_normal(rng, &[config.k_max, h], 0.02),
        );
        let blocks = (0..config.layers)
            .map(|l| {
                Block::new(
                    ps,
                    &format!("{prefix}.layers.{l}"),
                    h,
                    config.heads,
                    false,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(ps, &format!("{prefix}.final_norm"), h);
        let qdm_head = Linear::new(ps, &format!("{prefix}.qdm_head"), h, 1, true, rng);
        Ok(Self {
            config,
            input,
            positions,
            blocks,
            final_norm,
            qdm_head,
        })
    }

    /// `H = encoder(lift(features) + p[..k])`.
    pub fn forward(&self, s: &mut Session<'_>, features: &FeatureList) -> Result<Var> {
        let k = features.k();
        if k == 0 {
            return Err(Error::EmptyList);
        }
        if k > self.config.k_max {
            return Err(Error::TooManyDocuments {
                k,
                k_max: self.config.k_max,
            });
        }
        let x = s.graph.constant(features.to_tensor());
        let lifted = self.input.forward(s, x)?;
        let table = s.param(self.positions);
        let idx: Vec<usize> = (0..k).collect();
        let pos = s.graph.select_rows(table, &idx)?;
        let mut h = s.graph.add(lifted, pos)?;
        h = s.dropout(h, self.config.dropout);
        for b in &self.blocks {
            h = b.forward(s, h)?.0;
        }
        self.final_norm.forward(s, h)
    }

    /// Per-document relevance probabilities `sigmoid(H · w + b)`, `k × 1`.
    pub fn qdm_predict(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let logits = self.qdm_head.forward(s, h)?;
        Ok(s.graph.sigmoid(logits))
    }

    /// Convenience evaluation-mode forward returning `H` as a tensor.
    pub fn retrieval_info(&self, ps: &ParamSet, features: &FeatureList) -> Result<RetrievalInfo> {
        let mut s = Session::new(ps, false, ChaCha8Rng::seed_from_u64(0));
        let h = self.forward(&mut s, features)?;
        Ok(RetrievalInfo(s.graph.value(h).clone()))
    }

    /// Evaluation-mode relevance probabilities.
    pub fn predict(&self, ps: &ParamSet, features: &FeatureList) -> Result<Vec<f64>> {
        let mut s = Session::new(ps, false, ChaCha8Rng::seed_from_u64(0));
        let h = self.forward(&mut s, features)?;
        let p = self.qdm_predict(&mut s, h)?;
        Ok(s.graph.value(p).data().to_vec())
    }

    /// Zeroes every block's residual branches.
    pub fn zero_residuals(&self, ps: &mut ParamSet) {
        for b in &self.blocks {
            b.zero_residual(ps);
        }
    }
}

/// Summed binary cross-entropy over documents, recorded on the graph.
pub fn qdm_loss(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    g.bce(probs, labels)
}

/// `-Σ_i [s_i ln ŝ_i + (1 - s_i) ln(1 - ŝ_i)]` with `ŝ` clamped to `[ε, 1-ε]`.
pub fn qdm_loss_value(labels: &[f64], predictions: &[f64]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            labels: labels.len(),
            predictions: predictions.len(),
        });
    }
    Ok(labels
        .iter()
        .zip(predictions)
        .map(|(&s, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(s * libm::log(p) + (1.0 - s) * libm::log(1.0 - p))
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(k: usize, rng: &mut ChaCha8Rng) -> FeatureList {
        FeatureList {
            rows: (0..k)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        }
    }

    fn build(config: R2FormerConfig, seed: u64) -> (ParamSet, R2Former) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = R2Former::new(&mut ps, "bridge", config, &mut rng).unwrap();
        (ps, m)
    }

    #[test]
    fn output_shape_matches_list() {
        let (ps, m) = build(R2FormerConfig::default(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = m.retrieval_info(&ps, &features(10, &mut rng)).unwrap();
        assert_eq!(h.0.shape(), &[10, 256]);
        assert_eq!(m.predict(&ps, &features(10, &mut rng)).unwrap().len(), 10);
    }

    #[test]
    fn too_many_documents_is_an_error() {
        let (ps, m) = build(R2FormerConfig { hidden: 8, k_max: 4, ..Default::default() }, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = m.retrieval_info(&ps, &features(5, &mut rng)).unwrap_err();
        assert_eq!(err, Error::TooManyDocuments { k: 5, k_max: 4 });
    }

    #[test]
    fn swapping_rows_is_not_a_row_swap() {
        let (ps, m) = build(R2FormerConfig { hidden: 16, ..Default::default() }, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = features(4, &mut rng);
        let mut swapped = f.clone();
        swapped.rows.swap(0, 1);
        let h = m.retrieval_info(&ps, &f).unwrap().0;
        let hs = m.retrieval_info(&ps, &swapped).unwrap().0;
        let diff: f64 = h.row(0).iter().zip(hs.row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn zero_residual_path_reduces_to_normed_lift() {
        let cfg = R2FormerConfig { hidden: 8, layers: 2, heads: 4, ..Default::default() };
        let (mut ps, m) = build(cfg, 5);
        m.zero_residuals(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = features(3, &mut rng);
        let h = m.retrieval_info(&ps, &f).unwrap().0;

        let w = ps.tensor(m.input.weight);
        let b = ps.tensor(m.input.bias.unwrap());
        let p = ps.tensor(m.positions);
        for (i, row) in f.rows.iter().enumerate() {
            let lifted: Vec<f64> = (0..8)
                .map(|j| (0..3).map(|c| row[c] * w.row(c)[j]).sum::<f64>() + b.data()[j] + p.row(i)[j])
                .collect();
            let mean = lifted.iter().sum::<f64>() / 8.0;
            let var = lifted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let expected = (lifted[j] - mean) / libm::sqrt(var + crate::graph::LAYER_NORM_EPS);
                assert!((h.row(i)[j] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let (mut ps, m) = build(R2FormerConfig { hidden: 8, ..Default::default() }, 0);
        m.qdm_head.zero(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in m.predict(&ps, &features(10, &mut rng)).unwrap() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn qdm_loss_examples() {
        assert!(qdm_loss_value(&[1.0, 0.0], &[1.0 - 1e-12, 1e-12]).unwrap() < 1e-9);
        let two_ln2 = 2.0 * core::f64::consts::LN_2;
        assert!((qdm_loss_value(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - two_ln2).abs() < 1e-12);
        assert!((qdm_loss_value(&[1.0], &[0.5]).unwrap() - 0.69315).abs() < 1e-5);
        assert!(qdm_loss_value(&[1.0], &[0.5, 0.5]).is_err());
        assert!(qdm_loss_value(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn forward_is_deterministic_in_train_mode() {
        let (ps, m) = build(R2FormerConfig { hidden: 16, ..Default::default() }, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = features(6, &mut rng);
        let run = || {
            let mut s = Session::new(&ps, true, ChaCha8Rng::seed_from_u64(11));
            let h = m.forward(&mut s, &f).unwrap();
            s.graph.value(h).clone()
        };
        assert_eq!(run(), run());
    }
}
