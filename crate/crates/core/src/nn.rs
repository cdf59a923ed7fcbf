//! Layers shared by the bridge encoder and the toy decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{self, ParamId, ParamSet, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(&format!("{name}.weight"), params::init_xavier(rng, in_dim, out_dim));
        let bias = bias.then(|| ps.add(&format!("{name}.bias"), params::zeros_row(out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, ps: &mut ParamSet) {
        ps.tensor_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            ps.tensor_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add(&format!("{name}.gain"), params::ones(dim)),
            bias: ps.add(&format!("{name}.bias"), params::zeros_row(dim)),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.graph.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention, bidirectional or causal.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
    /// Linear distance penalty on causal scores, one slope per head.
    pub distance_bias: bool,
}

/// Per-head slopes `2^(-8(h+1)/heads)`.
pub fn distance_slopes(heads: usize) -> Vec<f64> {
    (0..heads)
        .map(|h| libm::exp2(-8.0 * (h + 1) as f64 / heads as f64))
        .collect()
}

fn distance_bias(n: usize, slope: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    let d = t.data_mut();
    for i in 0..n {
        for j in 0..=i {
            d[i * n + j] = -slope * (i - j) as f64;
        }
    }
    t
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(ps, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(ps, &format!("{name}.value"), dim, dim, true, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            causal,
            distance_bias: false,
        })
    }

    /// Returns the output and one attention-probability matrix per head.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let dim = self.query.out_dim;
        let dh = dim / self.heads;
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let n = s.graph.value(x).rows();
        let slopes = distance_slopes(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.graph.slice_cols(q, h * dh, dh)?,
                    s.graph.slice_cols(k, h * dh, dh)?,
                    s.graph.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = s.graph.matmul_bt(qh, kh)?;
            let mut scores = s.graph.scale(scores, scale);
            if self.distance_bias {
                let b = s.graph.constant(distance_bias(n, slopes[h]));
                scores = s.graph.add(scores, b)?;
            }
            let p = if self.causal {
                s.graph.causal_softmax(scores)?
            } else {
                s.graph.softmax(scores)
            };
            probs.push(p);
            outs.push(s.graph.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        Ok((self.out.forward(s, cat)?, probs))
    }
}

/// Position-wise GELU feed-forward.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.down.forward(s, h)
    }
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), dim),
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads, causal, rng)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, 4 * dim, rng),
            dropout,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.ln_attn.forward(s, x)?;
        let (a, probs) = self.attn.forward(s, h)?;
        let a = s.dropout(a, self.dropout);
        let x = s.graph.add(x, a)?;
        let h = self.ln_ff.forward(s, x)?;
        let f = self.ff.forward(s, h)?;
        let f = s.dropout(f, self.dropout);
        Ok((s.graph.add(x, f)?, probs))
    }

    /// Zeroes both residual branches so the block is the identity.
    pub fn zero_residual(&self, ps: &mut ParamSet) {
        self.attn.out.zero(ps);
        self.ff.down.zero(ps);
    }
}

/// Row `i` of a `rows × cols` table as a fresh tensor.
pub fn table_row(t: &Tensor, i: usize) -> Tensor {
    Tensor::new(alloc::vec![1, t.cols()], t.row(i).to_vec()).expect("row is non-empty")
}
