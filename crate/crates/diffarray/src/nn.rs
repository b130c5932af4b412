//! Parameterized layers built from graph operations.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Source of standard-normal draws for weight initialization.
pub type NormalSource<'a> = &'a mut dyn FnMut() -> f64;

fn scaled_normal<T: Real>(shape: &[usize], std: f64, normal: NormalSource<'_>) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(normal() * std))
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        normal: NormalSource<'_>,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), scaled_normal(&[fan_in, fan_out], std, normal))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([fan_out]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            fan_in,
            fan_out,
        })
    }

    /// Variant with explicit init scale and no bias.
    pub fn without_bias<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        normal: NormalSource<'_>,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), scaled_normal(&[fan_in, fan_out], std, normal))?;
        Ok(Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => g.add_bias(y, g.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full([width], T::one()))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([width]))?;
        Ok(Self {
            gain,
            bias,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(store, self.gain), g.param(store, self.bias), self.eps)
    }
}

/// Multi-head attention with input and output projections. The key
/// projection has no bias: a shift shared by every key cancels in the softmax.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        normal: NormalSource<'_>,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::ArrayError::Config(format!(
                "model width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, normal)?,
            key: Linear::without_bias(store, &format!("{name}.k"), width, width, 1.0 / (width as f64).sqrt(), normal)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, normal)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, normal)?,
            heads,
        })
    }

    /// `queries` is `[Bq, Lq, D]`; `keys`/`values` are `[Bk, Lk, D]` with `Bq = Bk·group`.
    /// Returns the projected output and head-averaged post-softmax weights.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys: Var,
        values: Var,
        group: usize,
    ) -> Result<(Var, Tensor<T>)> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys)?;
        let v = self.value.forward(g, store, values)?;
        let (ctx, weights) = g.attention(q, k, v, self.heads, group)?;
        Ok((self.output.forward(g, store, ctx)?, weights))
    }
}

/// Free-standing multi-head attention on unbatched `[L, D]` inputs with explicit
/// projection matrices `[D, D]` (`wq, wk, wv, wo`).
pub fn multi_head_attention<T: Real>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    projections: [Var; 4],
    heads: usize,
) -> Result<(Var, Tensor<T>)> {
    let [wq, wk, wv, wo] = projections;
    let (qs, ks) = (g.shape(q), g.shape(k));
    let qp = g.matmul(q, wq)?;
    let kp = g.matmul(k, wk)?;
    let vp = g.matmul(v, wv)?;
    let q3 = g.reshape(qp, [1, qs[0], qs[1]])?;
    let k3 = g.reshape(kp, [1, ks[0], ks[1]])?;
    let v3 = g.reshape(vp, [1, ks[0], ks[1]])?;
    let (ctx, weights) = g.attention(q3, k3, v3, heads, 1)?;
    let ctx = g.reshape(ctx, [qs[0], qs[1]])?;
    let out = g.matmul(ctx, wo)?;
    let lk = ks[0];
    Ok((out, weights.reshape([qs[0], lk])?))
}
