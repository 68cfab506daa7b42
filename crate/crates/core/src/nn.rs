//! Small layer toolkit on top of the tape: linear maps, MLPs, dropout.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, GraphError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Per-forward settings: training mode toggles dropout.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<S: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| S::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, GraphError> {
        let weight = store.register(
            format!("{name}.weight"),
            uniform_init(rng, vec![in_dim, out_dim], in_dim),
        )?;
        let bias = if bias {
            Some(store.register(
                format!("{name}.bias"),
                uniform_init(rng, vec![out_dim], in_dim),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, GraphError> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Feed-forward stack with GELU between layers and optional dropout after
/// each hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    dropout: f64,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: &[usize],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, GraphError> {
        if dims.len() < 2 {
            return Err(GraphError::Invalid(format!(
                "{name}: MLP needs at least input and output dims"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers, dropout })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        mut x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, GraphError> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.gelu(x);
                x = dropout(g, x, self.dropout, ctx)?;
            }
        }
        Ok(x)
    }
}

/// Inverted dropout; identity outside training.
pub fn dropout<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var, GraphError> {
    if !ctx.training || p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let scale = S::lit(1.0 / keep);
    let shape = g.shape(x).to_vec();
    let len: usize = shape.iter().product();
    let rng = ctx.rng();
    let mask = (0..len)
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                S::zero()
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}
