use rand::Rng;

use crate::autodiff::{Graph, GraphError, ParamId, ParamStore, Tensor, Var};
use crate::nn::{dropout, ForwardCtx, Linear};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<Self, GraphError> {
        let gain = store.register(format!("{name}.gain"), Tensor::full(vec![d], S::one()))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(vec![d]))?;
        Ok(Self { gain, bias })
    }

    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, GraphError> {
        let z = g.layer_norm(x, S::lit(LN_EPS));
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let z = g.mul(z, gain)?;
        g.add(z, bias)
    }

    fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm_attn: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer encoder over patch tokens `[R, n, d]`.
///
/// Each block is `x + Attn(LN(x))` then `x + FFN(LN(x))`, with a GELU
/// feed-forward of width `2d`. Zero layers is the identity map.
#[derive(Debug, Clone)]
pub struct MiniTransformerEncoder {
    blocks: Vec<Block>,
    heads: usize,
    d_model: usize,
    dropout: f64,
}

impl MiniTransformerEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        layers: usize,
        heads: usize,
        d_model: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, GraphError> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(GraphError::Invalid(format!(
                "model dim {d_model} is not divisible into {heads} heads"
            )));
        }
        let ff = 2 * d_model;
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let name = |part: &str| format!("encoder.{l}.{part}");
            blocks.push(Block {
                norm_attn: Norm::new(store, &name("norm_attn"), d_model)?,
                query: Linear::new(store, &name("query"), d_model, d_model, true, rng)?,
                key: Linear::new(store, &name("key"), d_model, d_model, true, rng)?,
                value: Linear::new(store, &name("value"), d_model, d_model, true, rng)?,
                out: Linear::new(store, &name("out"), d_model, d_model, true, rng)?,
                norm_ff: Norm::new(store, &name("norm_ff"), d_model)?,
                ff_in: Linear::new(store, &name("ff_in"), d_model, ff, true, rng)?,
                ff_out: Linear::new(store, &name("ff_out"), ff, d_model, true, rng)?,
            });
        }
        Ok(Self {
            blocks,
            heads,
            d_model,
            dropout,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend(b.norm_attn.params());
            for lin in [&b.query, &b.key, &b.value, &b.out] {
                ids.extend(lin.params());
            }
            ids.extend(b.norm_ff.params());
            ids.extend(b.ff_in.params());
            ids.extend(b.ff_out.params());
        }
        ids
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        mut x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, GraphError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(GraphError::ShapeMismatch {
                op: "encoder",
                detail: format!("{shape:?}, d={}", self.d_model),
            });
        }
        for b in &self.blocks {
            let h = b.norm_attn.forward(g, store, x)?;
            let a = self.attention(g, store, b, h, &shape)?;
            let a = dropout(g, a, self.dropout, ctx)?;
            x = g.add(x, a)?;

            let h = b.norm_ff.forward(g, store, x)?;
            let h = b.ff_in.forward(g, store, h)?;
            let h = g.gelu(h);
            let h = dropout(g, h, self.dropout, ctx)?;
            let h = b.ff_out.forward(g, store, h)?;
            let h = dropout(g, h, self.dropout, ctx)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    fn attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        b: &Block,
        h: Var,
        shape: &[usize],
    ) -> Result<Var, GraphError> {
        let (r, n, d) = (shape[0], shape[1], shape[2]);
        let (heads, dh) = (self.heads, d / self.heads);
        let split = |g: &mut Graph<S>, lin: &Linear| -> Result<Var, GraphError> {
            let t = lin.forward(g, store, h)?;
            let t = g.reshape(t, vec![r, n, heads, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, vec![r * heads, n, dh])
        };
        let q = split(g, &b.query)?;
        let k = split(g, &b.key)?;
        let v = split(g, &b.value)?;
        let logits = g.bmm(q, k, true)?;
        let logits = g.affine(logits, S::lit(1.0 / (dh as f64).sqrt()), S::zero());
        let weights = g.softmax(logits);
        let ctx = g.bmm(weights, v, false)?;
        let ctx = g.reshape(ctx, vec![r, heads, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![r, n, d])?;
        b.out.forward(g, store, ctx)
    }
}
