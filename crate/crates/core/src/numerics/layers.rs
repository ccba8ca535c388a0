//! Transformer building blocks on top of the tape.

use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::{Scalar, Tensor};
use crate::error::{HatError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Feed-forward inner width as a multiple of the model width.
pub const FFN_EXPANSION: usize = 4;
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng)?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// `y = xW + b`, bias broadcast over rows.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_constant(format!("{name}.gain"), &[d], 1.0)?,
            bias: store.add_constant(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, T::of(LAYER_NORM_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

pub struct AttentionOutput {
    pub out: NodeId,
    /// One `Lq×Lk` row-stochastic matrix per head.
    pub weights: Vec<NodeId>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(HatError::Config(format!(
                "{name}: model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model)?,
            output: Linear::new(store, rng, &format!("{name}.output"), d_model, d_model)?,
            heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> Result<AttentionOutput> {
        for (what, n) in [("query", q_in), ("key/value", kv_in)] {
            if tape.value(n).cols() != self.d_model {
                return Err(HatError::dim(
                    "attention",
                    format!("{what} width {} != {}", tape.value(n).cols(), self.d_model),
                ));
            }
        }
        let q = self.query.forward(tape, q_in)?;
        let k = self.key.forward(tape, kv_in)?;
        let v = self.value.forward(tape, kv_in)?;
        let hd = self.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd)?,
                    tape.slice_cols(k, h * hd, hd)?,
                    tape.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            weights.push(attn);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)?
        };
        let out = self.output.forward(tape, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Two linear layers with a ReLU between, inner width `FFN_EXPANSION · D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d, FFN_EXPANSION * d)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), FFN_EXPANSION * d, d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}

/// `X_attn = Norm(X + SelfAttn(X))`, `e(X) = Norm(X_attn + FFN(X_attn))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub out_norm: LayerNorm,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d)?,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let a = self.attn.forward(tape, x, x)?;
        let res = tape.add(x, a.out)?;
        let x_attn = self.attn_norm.forward(tape, res)?;
        let f = self.ffn.forward(tape, x_attn)?;
        let res = tape.add(x_attn, f)?;
        self.out_norm.forward(tape, res)
    }
}

/// Decoder block:
/// `Q_attn = SelfAttn(Q)`,
/// `X_attn = Norm(Q_attn + CrossAttn(Q_attn, X))`,
/// `d(Q, X) = Norm(X_attn + FFN(X_attn))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub out_norm: LayerNorm,
}

pub struct DecoderOutput {
    pub out: NodeId,
    pub cross_weights: Vec<NodeId>,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, heads)?,
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.cross_attn"),
                d,
                heads,
            )?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d)?,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q: NodeId,
        x: NodeId,
    ) -> Result<DecoderOutput> {
        let q_attn = self.self_attn.forward(tape, q, q)?.out;
        let cross = self.cross_attn.forward(tape, q_attn, x)?;
        let res = tape.add(q_attn, cross.out)?;
        let x_attn = self.cross_norm.forward(tape, res)?;
        let f = self.ffn.forward(tape, x_attn)?;
        let res = tape.add(x_attn, f)?;
        Ok(DecoderOutput {
            out: self.out_norm.forward(tape, res)?,
            cross_weights: cross.weights,
        })
    }
}

pub fn encoder_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    count: usize,
    d: usize,
    heads: usize,
) -> Result<Vec<EncoderBlock>> {
    (0..count)
        .map(|i| EncoderBlock::new(store, rng, &format!("{name}.{i}"), d, heads))
        .collect()
}

pub fn decoder_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    count: usize,
    d: usize,
    heads: usize,
) -> Result<Vec<DecoderBlock>> {
    (0..count)
        .map(|i| DecoderBlock::new(store, rng, &format!("{name}.{i}"), d, heads))
        .collect()
}

/// Applies `e_n ∘ … ∘ e_1`.
pub fn run_encoders<T: Scalar>(
    blocks: &[EncoderBlock],
    tape: &mut Tape<'_, T>,
    x: NodeId,
) -> Result<NodeId> {
    blocks.iter().try_fold(x, |h, b| b.forward(tape, h))
}

/// Applies `d_n ∘ … ∘ d_1(Q, X)`: each block's output becomes the next query,
/// `X` feeds every block. Returns the final output and each block's cross-attention weights.
pub fn run_decoders<T: Scalar>(
    blocks: &[DecoderBlock],
    tape: &mut Tape<'_, T>,
    q: NodeId,
    x: NodeId,
) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
    let mut cur = q;
    let mut weights = Vec::with_capacity(blocks.len());
    for b in blocks {
        let o = b.forward(tape, cur, x)?;
        cur = o.out;
        weights.push(o.cross_weights);
    }
    Ok((cur, weights))
}

/// Sinusoidal table: `sin(pos / 10000^(2i/D))` on even columns, `cos` on odd.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::of(v));
        }
    }
    t
}
