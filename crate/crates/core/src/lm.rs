//! Toy decoder-only language model with an embedding-level input interface.
//!
//! The model never sees token ids directly: callers look up token rows with
//! [`ToyLm::embed_tokens`], may overwrite some of them, and pass the matrix to
//! [`ToyLm::hidden`]. Gradients therefore reach injected rows even when every
//! LM parameter is frozen.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Block, LayerNorm};
use crate::params::{self, ParamId, ParamSet, Session};
use crate::tensor::Tensor;
use crate::vocab::{TokenSeq, EOS};

/// How token order reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positions {
    /// Trainable absolute position table added to the input rows.
    Learned,
    /// Fixed per-head linear distance penalty on attention scores.
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub positions: Positions,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 2,
            max_len: 512,
            dropout: 0.0,
            positions: Positions::Learned,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub config: LmConfig,
    /// Token table, also used (transposed) as the output projection.
    pub token_embedding: ParamId,
    /// Present with [`Positions::Learned`].
    pub position_embedding: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

/// Head-averaged attention of one layer, `n × n`, plus the per-head maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub mean: Tensor,
    pub heads: Vec<Tensor>,
}

impl ToyLm {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        config: LmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.vocab_size == 0 || config.max_len == 0 {
            return Err(Error::Config("vocabulary and max_len must be non-empty".into()));
        }
        let h = config.hidden;
        let token_embedding = ps.add(
            &format!("{prefix}.token_embedding"),
            params::init_normal(rng, &[config.vocab_size, h], 0.02),
        );
        let position_embedding = (config.positions == Positions::Learned).then(|| {
            ps.add(
                &format!("{prefix}.position_embedding"),
                params::init_normal(rng, &[config.max_len, h], 0.02),
            )
        });
        let blocks = (0..config.layers)
            .map(|l| {
                let mut b = Block::new(
                    ps,
                    &format!("{prefix}.layers.{l}"),
                    h,
                    config.heads,
                    true,
                    config.dropout,
                    rng,
                )?;
                b.attn.distance_bias = config.positions == Positions::Distance;
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(ps, &format!("{prefix}.final_norm"), h);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
        })
    }

    /// Token-table lookup: row `j` is the embedding of `ids[j]`.
    pub fn embed_tokens(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        let table = s.param(self.token_embedding);
        s.graph.select_rows(table, ids)
    }

    /// Final-norm hidden states for an `n × h2` input embedding matrix, with
    /// the attention-probability vars of every layer and head.
    pub fn hidden(&self, s: &mut Session<'_>, embeddings: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let ev = s.graph.value(embeddings);
        let (n, c) = (ev.rows(), ev.cols());
        if c != self.config.hidden {
            return Err(Error::ShapeMismatch {
                op: "lm_forward",
                left: alloc::vec![n, c],
                right: alloc::vec![n, self.config.hidden],
            });
        }
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max_len: self.config.max_len,
            });
        }
        let mut x = match self.position_embedding {
            Some(id) => {
                let table = s.param(id);
                let idx: Vec<usize> = (0..n).collect();
                let pos = s.graph.select_rows(table, &idx)?;
                s.graph.add(embeddings, pos)?
            }
            None => embeddings,
        };
        x = s.dropout(x, self.config.dropout);
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, probs) = b.forward(s, x)?;
            x = y;
            maps.push(probs);
        }
        Ok((self.final_norm.forward(s, x)?, maps))
    }

    /// Logits for the selected rows of `hidden` (all rows when `rows` is
    /// `None`), through the tied output projection.
    pub fn logits(&self, s: &mut Session<'_>, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => s.graph.select_rows(hidden, r)?,
            None => hidden,
        };
        let table = s.param(self.token_embedding);
        s.graph.matmul_bt(h, table)
    }

    /// Full `n × |V|` logits.
    pub fn lm_forward(&self, s: &mut Session<'_>, embeddings: Var) -> Result<Var> {
        let (h, _) = self.hidden(s, embeddings)?;
        self.logits(s, h, None)
    }

    /// Mean negative log-likelihood over supervised positions, computing
    /// logits only where `targets.loss_mask` is set. `targets.ids[j]` is the
    /// token that should follow input position `j`.
    pub fn masked_loss(&self, s: &mut Session<'_>, embeddings: Var, targets: &TokenSeq) -> Result<Var> {
        let rows = supervised_rows(targets)?;
        let (h, _) = self.hidden(s, embeddings)?;
        let logits = self.logits(s, h, Some(&rows))?;
        let t: Vec<usize> = rows.iter().map(|&r| targets.ids[r]).collect();
        s.graph.cross_entropy(logits, &t)
    }

    fn next_token(&self, ps: &ParamSet, prefix: &Tensor, appended: &[usize]) -> Result<usize> {
        let mut s = Session::new(ps, false, ChaCha8Rng::seed_from_u64(0));
        let mut e = s.graph.constant(prefix.clone());
        if !appended.is_empty() {
            let extra = self.embed_tokens(&mut s, appended)?;
            e = concat_rows(&mut s.graph, e, extra)?;
        }
        let (h, _) = self.hidden(&mut s, e)?;
        let last = s.graph.value(h).rows() - 1;
        let logits = self.logits(&mut s, h, Some(&[last]))?;
        Ok(argmax(s.graph.value(logits).data()))
    }

    /// Greedy continuation of an assembled prefix. Stops at `<EOS>` (not
    /// included in the output) or after `max_new_tokens`.
    pub fn greedy_decode(&self, ps: &ParamSet, prefix: &Tensor, max_new_tokens: usize) -> Result<TokenSeq> {
        let mut out = Vec::new();
        while out.len() < max_new_tokens {
            let next = self.next_token(ps, prefix, &out)?;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(TokenSeq::new(out))
    }

    /// Attention maps of every layer for an assembled input.
    pub fn attention(&self, ps: &ParamSet, embeddings: &Tensor) -> Result<Vec<LayerAttention>> {
        let mut s = Session::new(ps, false, ChaCha8Rng::seed_from_u64(0));
        let e = s.graph.constant(embeddings.clone());
        let (_, maps) = self.hidden(&mut s, e)?;
        Ok(maps
            .into_iter()
            .map(|heads| {
                let heads: Vec<Tensor> = heads.into_iter().map(|v| s.graph.value(v).clone()).collect();
                let mut mean = Tensor::zeros(heads[0].shape());
                for h in &heads {
                    for (m, v) in mean.data_mut().iter_mut().zip(h.data()) {
                        *m += v / heads.len() as f64;
                    }
                }
                LayerAttention { mean, heads }
            })
            .collect())
    }
}

/// Mean negative log-likelihood over the rows of `logits` whose mask is set.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &TokenSeq) -> Result<Var> {
    let rows = supervised_rows(targets)?;
    let n = g.value(logits).rows();
    if n != targets.len() {
        return Err(Error::LengthMismatch {
            labels: targets.len(),
            predictions: n,
        });
    }
    let picked = g.select_rows(logits, &rows)?;
    let t: Vec<usize> = rows.iter().map(|&r| targets.ids[r]).collect();
    g.cross_entropy(picked, &t)
}

fn supervised_rows(targets: &TokenSeq) -> Result<Vec<usize>> {
    let rows: Vec<usize> = targets
        .loss_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if rows.is_empty() {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(rows)
}

/// Stacks `b` below `a`.
pub fn concat_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ra, rb) = (g.value(a).rows(), g.value(b).rows());
    let c = g.value(a).cols();
    let base = g.constant(Tensor::zeros(&[ra + rb, c]));
    let top: Vec<usize> = (0..ra).collect();
    let bottom: Vec<usize> = (ra..ra + rb).collect();
    let x = g.scatter_rows(base, a, &top)?;
    g.scatter_rows(x, b, &bottom)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
