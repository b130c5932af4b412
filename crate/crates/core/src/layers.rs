//! Building blocks shared by both stages.

use diffarray::{Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::Result;
use crate::rng::{normal, stream, StreamRng};

/// Standard-normal source for initializing the component `tag`.
pub struct InitSource(StreamRng);

impl InitSource {
    pub fn new(seed: u64, tag: &str) -> Self {
        Self(stream(seed, tag, 0))
    }

    pub fn draw(&mut self) -> f64 {
        normal(&mut self.0)
    }

    pub fn tensor<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::of(self.draw() * std))
    }
}

/// Sinusoidal encoding of a single position, `width` values.
pub fn sinusoidal_at(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / width as f64);
            if c % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// Adds the sinusoidal table to every sequence of `x: [B, L, D]`.
pub fn add_positional<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let table: Vec<f64> = (0..l).flat_map(|p| sinusoidal_at(p as f64, d)).collect();
    let pe = g.constant(Tensor::from_f64([l * d], &table)?);
    let flat = g.reshape(x, [b, l * d])?;
    Ok(g.reshape(g.add_bias(flat, pe)?, [b, l, d])?)
}

/// Two kernel-3 temporal convolutions with a SiLU between, `[B, T, C_in] → [B, T, D]`.
#[derive(Debug, Clone)]
pub struct Conv1dModule {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Conv1dModule {
    pub const KERNEL: usize = 3;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, width: usize, init: &mut InitSource) -> Result<Self> {
        let k = Self::KERNEL;
        Ok(Self {
            w1: store.insert(format!("{name}.conv1.weight"), init.tensor(&[width, cin, k], 1.0 / ((cin * k) as f64).sqrt()))?,
            b1: store.insert(format!("{name}.conv1.bias"), Tensor::zeros([width]))?,
            w2: store.insert(format!("{name}.conv2.weight"), init.tensor(&[width, width, k], 1.0 / ((width * k) as f64).sqrt()))?,
            b2: store.insert(format!("{name}.conv2.bias"), Tensor::zeros([width]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = g.conv1d(x, g.param(store, self.w1))?;
        let h = g.silu(g.add_bias(h, g.param(store, self.b1))?);
        let h = g.conv1d(h, g.param(store, self.w2))?;
        Ok(g.add_bias(h, g.param(store, self.b2))?)
    }
}

/// Pre-norm position-wise MLP with residual: `x + W₂·silu(W₁·LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, mult: usize, init: &mut InitSource) -> Result<Self> {
        let mut n = || init.draw();
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width * mult, &mut n)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), width * mult, width, &mut n)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = g.silu(self.fc1.forward(g, store, h)?);
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Pre-norm self-attention residual block.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, init: &mut InitSource) -> Result<Self> {
        let mut n = || init.draw();
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, &mut n)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let (a, _) = self.attn.forward(g, store, h, h, h, 1)?;
        Ok(g.add(x, a)?)
    }
}

/// Self-attention followed by a feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mult: usize,
        init: &mut InitSource,
    ) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(store, &format!("{name}.self"), width, heads, init)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), width, mult, init)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.attn.forward(g, store, x)?;
        self.ff.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_starts_at_sin0_cos0() {
        let pe = sinusoidal_at(0.0, 6);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = sinusoidal_at(1.0, 4);
        assert!((pe[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[2] - (0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn conv_module_keeps_length() {
        let mut store = ParamStore::<f64>::new();
        let mut init = InitSource::new(0, "t");
        let m = Conv1dModule::new(&mut store, "c", 5, 8, &mut init).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 7, 5], |i| (i as f64).sin()));
        assert_eq!(g.shape(m.forward(&g, &store, x).unwrap()), vec![2, 7, 8]);
    }
}
