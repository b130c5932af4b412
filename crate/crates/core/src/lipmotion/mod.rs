//! Reference-guided lip motion prediction.
//!
//! A window of `2w+1` audio frames is tokenized by a temporal conv module and
//! decoded by pre-norm blocks of self-attention, cross-attention to the
//! encoded style reference, and a feed-forward layer. The head reads the
//! middle token and emits 13 mouth parameters.

mod strategy;
mod train;

use std::sync::Arc;

use diffarray::{Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real, Tensor, Var};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::face3dmm::{MouthParams, MOUTH_DIM};
use crate::layers::{add_positional, Conv1dModule, EncoderLayer, FeedForward, InitSource, SelfAttention};
use crate::synthworld::{SynthClip, AUDIO_DIM};

pub use strategy::{
    AudioKeyed, EncodedReference, LipKeyed, SelfOnly, StrategyFactory, StrategyRegistry, StyleAggregation,
};
pub use train::{
    build_windows, cosine_lr, infer_sequence, loss_stage1, loss_stage1_graph, sample_batch, train_stage1, write_log, Stage1Batch,
    Stage1TrainConfig, TrainLogRow,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Dims {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub window: usize,
    pub ref_len: usize,
    pub ff_mult: usize,
    pub ref_layers: usize,
    pub ref_positional: bool,
}

impl Stage1Dims {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            window: 2,
            ref_len: 32,
            ff_mult: 2,
            ref_layers: 1,
            ref_positional: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            blocks: 3,
            window: 5,
            ref_len: 256,
            ff_mult: 4,
            ref_layers: 1,
            ref_positional: true,
        }
    }

    pub fn window_len(&self) -> usize {
        2 * self.window + 1
    }
}

/// A same-speaker style clip: `n` frames of audio features and mouth parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleReference {
    /// Row-major `n × 29`.
    pub audio: Vec<f64>,
    /// Row-major `n × 13`.
    pub lips: Vec<f64>,
}

impl StyleReference {
    pub fn new(audio: Vec<f64>, lips: Vec<f64>) -> Result<Self> {
        if audio.len() % AUDIO_DIM != 0 || lips.len() % MOUTH_DIM != 0 || audio.len() / AUDIO_DIM != lips.len() / MOUTH_DIM {
            return Err(Error::Invalid("reference audio and lip streams differ in length".into()));
        }
        Ok(Self { audio, lips })
    }

    pub fn from_clip(clip: &SynthClip, frames: std::ops::Range<usize>) -> Self {
        Self {
            audio: clip.audio[frames.start * AUDIO_DIM..frames.end * AUDIO_DIM].to_vec(),
            lips: clip.mouth[frames.start * MOUTH_DIM..frames.end * MOUTH_DIM].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.lips.len() / MOUTH_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.lips.is_empty()
    }

    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            audio: self.audio[..n * AUDIO_DIM].to_vec(),
            lips: self.lips[..n * MOUTH_DIM].to_vec(),
        }
    }

    /// Frame `i` of the result is frame `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            audio: perm.iter().flat_map(|&p| self.audio[p * AUDIO_DIM..(p + 1) * AUDIO_DIM].to_vec()).collect(),
            lips: perm.iter().flat_map(|&p| self.lips[p * MOUTH_DIM..(p + 1) * MOUTH_DIM].to_vec()).collect(),
        }
    }

    /// `([1, n, 29], [1, n, 13])` tensors.
    pub fn tensors<T: Real>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = self.len();
        Ok((Tensor::from_f64([1, n, AUDIO_DIM], &self.audio)?, Tensor::from_f64([1, n, MOUTH_DIM], &self.lips)?))
    }
}

#[derive(Debug, Clone)]
enum RefInput {
    Conv(Conv1dModule),
    Linear(Linear),
}

/// Reference stream encoder: input projection, positional encoding, encoder
/// layers, norm. The input module sees each frame as a length-1 sequence.
#[derive(Debug, Clone)]
struct RefEncoder {
    input: RefInput,
    layers: Vec<EncoderLayer>,
    norm_gain: ParamId,
    /// Absent for the key stream.
    norm_bias: Option<ParamId>,
}

impl RefEncoder {
    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, positional: bool) -> Result<Var> {
        let shape = g.shape(x);
        let mut h = match &self.input {
            RefInput::Conv(c) => {
                let frames = g.reshape(x, [shape[0] * shape[1], 1, shape[2]])?;
                let h = c.forward(g, store, frames)?;
                let d = g.shape(h)[2];
                g.reshape(h, [shape[0], shape[1], d])?
            }
            RefInput::Linear(l) => l.forward(g, store, x)?,
        };
        if positional {
            h = add_positional(g, h)?;
        }
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
        }
        let bias = match self.norm_bias {
            Some(b) => g.param(store, b),
            None => g.constant(Tensor::zeros([g.shape(h)[2]])),
        };
        Ok(g.layer_norm(h, g.param(store, self.norm_gain), bias, LayerNorm::DEFAULT_EPS)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_attn: SelfAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

/// Result of one decoder pass.
#[derive(Debug)]
pub struct Stage1Output<T> {
    /// `[W, 13]` predictions for the middle frame of every window.
    pub pred: Var,
    /// `[W, 2w+1, d]` final-norm decoder output.
    pub hidden: Var,
    /// Per block, head-averaged cross-attention weights `[W, 2w+1, n]`.
    pub cross_weights: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct LipSyncModel<T: Real> {
    pub dims: Stage1Dims,
    pub seed: u64,
    pub store: ParamStore<T>,
    strategy: Arc<dyn StyleAggregation>,
    audio_in: Conv1dModule,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    head: [Linear; 2],
    audio_ref: Option<RefEncoder>,
    lip_ref: Option<RefEncoder>,
}

impl<T: Real> LipSyncModel<T> {
    pub fn new(dims: Stage1Dims, strategy: Arc<dyn StyleAggregation>, seed: u64) -> Result<Self> {
        let d = dims.d_model;
        if dims.heads == 0 || d % dims.heads != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by {} heads", dims.heads)));
        }
        let mut store = ParamStore::new();
        let encoder = |store: &mut ParamStore<T>, name: &str, conv: bool| -> Result<RefEncoder> {
            let mut init = InitSource::new(seed, name);
            let input = if conv {
                RefInput::Conv(Conv1dModule::new(store, &format!("{name}.input"), AUDIO_DIM, d, &mut init)?)
            } else {
                let mut n = || init.draw();
                RefInput::Linear(Linear::new(store, &format!("{name}.input"), MOUTH_DIM, d, &mut n)?)
            };
            let layers = (0..dims.ref_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), d, dims.heads, dims.ff_mult, &mut init))
                .collect::<Result<Vec<_>>>()?;
            Ok(RefEncoder {
                input,
                layers,
                norm_gain: store.insert(format!("{name}.norm.gain"), Tensor::full([d], T::one()))?,
                norm_bias: if conv {
                    None
                } else {
                    Some(store.insert(format!("{name}.norm.bias"), Tensor::zeros([d]))?)
                },
            })
        };
        let audio_ref = if strategy.needs_audio_encoder() { Some(encoder(&mut store, "ref_audio", true)?) } else { None };
        let lip_ref = if strategy.needs_lip_encoder() { Some(encoder(&mut store, "ref_lips", false)?) } else { None };

        let mut init = InitSource::new(seed, "input");
        let audio_in = Conv1dModule::new(&mut store, "input", AUDIO_DIM, d, &mut init)?;
        let mut blocks = Vec::with_capacity(dims.blocks);
        for i in 0..dims.blocks {
            let name = format!("block{i}");
            let mut init = InitSource::new(seed, &name);
            let self_attn = SelfAttention::new(&mut store, &format!("{name}.self"), d, dims.heads, &mut init)?;
            let cross_norm = LayerNorm::new(&mut store, &format!("{name}.cross.norm"), d)?;
            let mut n = || init.draw();
            let cross_attn = MultiHeadAttention::new(&mut store, &format!("{name}.cross.attn"), d, dims.heads, &mut n)?;
            let ff = FeedForward::new(&mut store, &format!("{name}.ff"), d, dims.ff_mult, &mut init)?;
            blocks.push(DecoderBlock {
                self_attn,
                cross_norm,
                cross_attn,
                ff,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", d)?;
        let mut init = InitSource::new(seed, "head");
        let mut n = || init.draw();
        let head = [
            Linear::new(&mut store, "head.fc1", d, d, &mut n)?,
            Linear::new(&mut store, "head.fc2", d, MOUTH_DIM, &mut n)?,
        ];
        Ok(Self {
            dims,
            seed,
            store,
            strategy,
            audio_in,
            blocks,
            final_norm,
            head,
            audio_ref,
            lip_ref,
        })
    }

    pub fn strategy(&self) -> &Arc<dyn StyleAggregation> {
        &self.strategy
    }

    pub fn uses_reference(&self) -> bool {
        self.strategy.needs_audio_encoder() || self.strategy.needs_lip_encoder()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Encodes `[R, n, 29]` audio and `[R, n, 13]` lips with whichever encoders the strategy uses.
    pub fn encode_graph(&self, g: &Graph<T>, ref_audio: Var, ref_lips: Var) -> Result<EncodedReference> {
        let pos = self.dims.ref_positional;
        Ok(EncodedReference {
            audio: self.audio_ref.as_ref().map(|e| e.forward(g, &self.store, ref_audio, pos)).transpose()?,
            lips: self.lip_ref.as_ref().map(|e| e.forward(g, &self.store, ref_lips, pos)).transpose()?,
        })
    }

    /// Runs the decoder on `windows: [W, 2w+1, 29]`. `reference` holds
    /// `([R, n, 29], [R, n, 13])` with `W = R·group`; it is ignored by
    /// strategies without a reference branch.
    pub fn forward(&self, g: &Graph<T>, windows: Var, reference: Option<(Var, Var)>, group: usize) -> Result<Stage1Output<T>> {
        let shape = g.shape(windows);
        if shape.len() != 3 || shape[1] != self.dims.window_len() || shape[2] != AUDIO_DIM {
            return Err(Error::Invalid(format!(
                "expected windows [W, {}, {AUDIO_DIM}], got {shape:?}",
                self.dims.window_len()
            )));
        }
        let kv = if self.uses_reference() {
            let (ra, rl) = reference.ok_or(Error::EmptyReference)?;
            if g.shape(rl).get(1).copied().unwrap_or(0) == 0 {
                return Err(Error::EmptyReference);
            }
            self.strategy.keys_values(&self.encode_graph(g, ra, rl)?)?
        } else {
            None
        };
        let store = &self.store;
        let mut h = self.audio_in.forward(g, store, windows)?;
        h = add_positional(g, h)?;
        let mut cross_weights = Vec::new();
        for blk in &self.blocks {
            h = blk.self_attn.forward(g, store, h)?;
            let x = blk.cross_norm.forward(g, store, h)?;
            let a = match kv {
                Some((k, v)) => {
                    let (a, w) = blk.cross_attn.forward(g, store, x, k, v, group)?;
                    cross_weights.push(w);
                    a
                }
                None => blk.cross_attn.forward(g, store, x, x, x, 1)?.0,
            };
            h = g.add(h, a)?;
            h = blk.ff.forward(g, store, h)?;
        }
        let hidden = self.final_norm.forward(g, store, h)?;
        let pred = self.head_from_hidden(g, hidden)?;
        Ok(Stage1Output {
            pred,
            hidden,
            cross_weights,
        })
    }

    /// Output head applied to the middle token of each `[W, 2w+1, d]` sequence.
    pub fn head_from_hidden(&self, g: &Graph<T>, hidden: Var) -> Result<Var> {
        let shape = g.shape(hidden);
        let (w, l, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(hidden, [w * l, d])?;
        let mid: Vec<usize> = (0..w).map(|i| i * l + self.dims.window).collect();
        let h = g.gather_rows(flat, &mid)?;
        let h = g.silu(self.head[0].forward(g, &self.store, h)?);
        Ok(self.head[1].forward(g, &self.store, h)?)
    }

    /// Copies every parameter whose name and shape match one in `other`.
    fn copy_matching(&mut self, other: &ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.entry(id).name.clone();
            if let Some(v) = other.get(&name) {
                if v.shape() == self.store.value(id).shape() {
                    self.store.set(id, v.clone())?;
                }
            }
        }
        Ok(())
    }

    /// Same weights under a different aggregation strategy; unused encoders are dropped.
    pub fn with_strategy(&self, strategy: Arc<dyn StyleAggregation>) -> Result<Self> {
        let mut out = Self::new(self.dims.clone(), strategy, self.seed)?;
        out.copy_matching(&self.store)?;
        Ok(out)
    }

    pub fn to_container(&self, config_digest: [u8; 32]) -> Container {
        let mut c = Container::new(self.seed, config_digest);
        c.set_meta("kind", "stage1");
        c.set_meta("strategy", self.strategy.name());
        let d = &self.dims;
        for (k, v) in [
            ("d_model", d.d_model),
            ("heads", d.heads),
            ("blocks", d.blocks),
            ("window", d.window),
            ("ref_len", d.ref_len),
            ("ff_mult", d.ff_mult),
            ("ref_layers", d.ref_layers),
        ] {
            c.set_meta(k, v);
        }
        c.set_meta("ref_positional", d.ref_positional);
        for e in self.store.entries() {
            c.push(&e.name, &e.value);
        }
        c
    }

    pub fn from_container(c: &Container, registry: &StrategyRegistry) -> Result<Self> {
        if c.meta("kind")? != "stage1" {
            return Err(Error::Format("checkpoint is not a stage-1 model".into()));
        }
        let dims = Stage1Dims {
            d_model: c.meta_parse("d_model")?,
            heads: c.meta_parse("heads")?,
            blocks: c.meta_parse("blocks")?,
            window: c.meta_parse("window")?,
            ref_len: c.meta_parse("ref_len")?,
            ff_mult: c.meta_parse("ff_mult")?,
            ref_layers: c.meta_parse("ref_layers")?,
            ref_positional: c.meta_parse("ref_positional")?,
        };
        let mut model = Self::new(dims, registry.get(c.meta("strategy")?)?, c.seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.entry(id).name.clone();
            let t = c.get::<T>(&name)?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::Format(format!("tensor `{name}` has shape {:?}", t.shape())));
            }
            model.store.set(id, t)?;
        }
        Ok(model)
    }
}

/// Decoder variant with the reference branch removed.
pub fn make_noref_variant<T: Real>(model: &LipSyncModel<T>) -> Result<LipSyncModel<T>> {
    model.with_strategy(Arc::new(SelfOnly))
}

/// Variant whose cross-attention keys and values both come from the lip encoder.
pub fn make_norefaudio_variant<T: Real>(model: &LipSyncModel<T>) -> Result<LipSyncModel<T>> {
    model.with_strategy(Arc::new(LipKeyed))
}

/// Encodes a reference into cross-attention keys and values, each `[n, d]`.
pub fn encode_reference<T: Real>(model: &LipSyncModel<T>, reference: &StyleReference) -> Result<(Tensor<T>, Tensor<T>)> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let g = Graph::new();
    let (a, l) = reference.tensors::<T>()?;
    let enc = model.encode_graph(&g, g.constant(a), g.constant(l))?;
    let (k, v) = model
        .strategy
        .keys_values(&enc)?
        .ok_or_else(|| Error::Invalid("model has no reference branch".into()))?;
    let n = reference.len();
    let d = model.dims.d_model;
    Ok((
        (*g.value(k)).clone().reshape([n, d])?,
        (*g.value(v)).clone().reshape([n, d])?,
    ))
}

/// `softmax(Q·Kᵀ/√d_h)·V` for `hidden: [L, d]`, `keys`/`values: [n, d]`;
/// returns the aggregated styles `[L, d]` and head-averaged weights `[L, n]`.
pub fn aggregate_style<T: Real>(g: &Graph<T>, hidden: Var, keys: Var, values: Var, heads: usize) -> Result<(Var, Tensor<T>)> {
    let (hs, ks) = (g.shape(hidden), g.shape(keys));
    let q = g.reshape(hidden, [1, hs[0], hs[1]])?;
    let k = g.reshape(keys, [1, ks[0], ks[1]])?;
    let v = g.reshape(values, [1, ks[0], ks[1]])?;
    let (s, w) = g.attention(q, k, v, heads, 1)?;
    Ok((g.reshape(s, [hs[0], hs[1]])?, w.reshape([hs[0], ks[0]])?))
}

/// Mouth parameters for the middle frame of one `(2w+1) × 29` window.
pub fn predict_window<T: Real>(
    model: &LipSyncModel<T>,
    window: &[f64],
    reference: Option<&StyleReference>,
) -> Result<MouthParams> {
    let l = model.dims.window_len();
    if window.len() != l * AUDIO_DIM {
        return Err(Error::Invalid(format!("window must hold {l} audio frames")));
    }
    let g = Graph::new();
    let x = g.constant(Tensor::from_f64([1, l, AUDIO_DIM], window)?);
    let refs = match reference {
        Some(r) if model.uses_reference() => {
            if r.is_empty() {
                return Err(Error::EmptyReference);
            }
            let (a, m) = r.tensors::<T>()?;
            Some((g.constant(a), g.constant(m)))
        }
        _ => None,
    };
    let out = model.forward(&g, x, refs, 1)?;
    MouthParams::from_slice(&g.value(out.pred).to_f64_vec())
}

/// Head-averaged cross-attention weights `[2w+1, n]` for one window, per block.
pub fn window_attention<T: Real>(
    model: &LipSyncModel<T>,
    window: &[f64],
    reference: &StyleReference,
) -> Result<Vec<Tensor<T>>> {
    let l = model.dims.window_len();
    let g = Graph::new();
    let x = g.constant(Tensor::from_f64([1, l, AUDIO_DIM], window)?);
    let (a, m) = reference.tensors::<T>()?;
    let out = model.forward(&g, x, Some((g.constant(a), g.constant(m))), 1)?;
    if out.cross_weights.is_empty() {
        return Err(Error::Invalid("model has no cross-attention to the reference".into()));
    }
    out.cross_weights
        .into_iter()
        .map(|w| Ok(w.reshape([l, reference.len()])?))
        .collect()
}
