//! Denoising U-Net with motion modulation and appearance cross-attention.

use diffarray::{Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real, Tensor, Var};

use super::{NoiseSchedule, LatentCodec, GRID, HALF_ROWS, LATENT_CHANNELS};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::face3dmm::{ID_DIM, MOUTH_DIM, ROT_DIM};
use crate::layers::{sinusoidal_at, Conv1dModule, InitSource};

pub const MODULATION_EPS: f64 = 1e-8;
/// Length of the motion-condition vector `(m̂, α, γ)`.
pub const MOTION_LEN: usize = MOUTH_DIM + ID_DIM + ROT_DIM;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RendererDims {
    /// Width at the full (4×8) lower-half resolution.
    pub c1: usize,
    /// Width at the pooled (2×4) resolution.
    pub c2: usize,
    pub heads: usize,
    pub time_dim: usize,
    /// Channels of the motion encoder's temporal convolution.
    pub motion_width: usize,
    pub code_dim: usize,
    pub timesteps: usize,
    pub ddim_steps: usize,
}

impl RendererDims {
    pub fn desk() -> Self {
        Self {
            c1: 64,
            c2: 128,
            heads: 4,
            time_dim: 16,
            motion_width: 8,
            code_dim: 128,
            timesteps: 100,
            ddim_steps: 20,
        }
    }

    pub fn paper() -> Self {
        Self {
            timesteps: 1000,
            ddim_steps: 200,
            ..Self::desk()
        }
    }

    /// Input widths of the three modulated convolutions.
    pub fn modulated_widths(&self) -> [usize; 3] {
        [2 * LATENT_CHANNELS + self.time_dim, self.c1, self.c1 + self.c2]
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, gain: f64, init: &mut InitSource) -> Result<Self> {
        let std = gain / ((cin * KERNEL * KERNEL) as f64).sqrt();
        Ok(Self {
            w: store.insert(format!("{name}.weight"), init.tensor(&[cout, cin, KERNEL, KERNEL], std))?,
            b: store.insert(format!("{name}.bias"), Tensor::zeros([cout]))?,
        })
    }

    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = g.conv2d_nhwc(x, g.param(store, self.w))?;
        Ok(g.add_bias(y, g.param(store, self.b))?)
    }

    fn modulated<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, phi: Var) -> Result<Var> {
        let y = g.modulated_conv2d_nhwc(x, g.param(store, self.w), phi, MODULATION_EPS)?;
        Ok(g.add_bias(y, g.param(store, self.b))?)
    }
}

/// `h + conv(silu(conv(h)))`.
#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, init: &mut InitSource) -> Result<Self> {
        Ok(Self {
            a: Conv::new(store, &format!("{name}.a"), width, width, 1.0, init)?,
            b: Conv::new(store, &format!("{name}.b"), width, width, 0.5, init)?,
        })
    }

    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = g.silu(self.a.forward(g, store, x)?);
        Ok(g.add(x, self.b.forward(g, store, h)?)?)
    }
}

/// Modulated conv, time injection, position bias, SiLU, conv, SiLU, then
/// residual cross-attention to reference features.
#[derive(Debug, Clone)]
struct Stage {
    modconv: Conv,
    time: Linear,
    pos: ParamId,
    conv: Conv,
    norm: LayerNorm,
    attn: MultiHeadAttention,
    rows: usize,
    cols: usize,
    width: usize,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        width: usize,
        (rows, cols): (usize, usize),
        dims: &RendererDims,
        init: &mut InitSource,
    ) -> Result<Self> {
        let modconv = Conv::new(store, &format!("{name}.modconv"), cin, width, 1.0, init)?;
        let pos = store.insert(format!("{name}.pos"), Tensor::zeros([rows * cols * width]))?;
        let conv = Conv::new(store, &format!("{name}.conv"), width, width, 1.0, init)?;
        let mut n = || init.draw();
        Ok(Self {
            modconv,
            time: Linear::new(store, &format!("{name}.time"), dims.c1, width, &mut n)?,
            pos,
            conv,
            norm: LayerNorm::new(store, &format!("{name}.cross.norm"), width)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.cross.attn"), width, dims.heads, &mut n)?,
            rows,
            cols,
            width,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        phi: Var,
        time: Var,
        feats: Var,
        group: usize,
    ) -> Result<Var> {
        let batch = g.shape(x)[0];
        let (hw, c) = (self.rows * self.cols, self.width);
        let h = self.modconv.modulated(g, store, x, phi)?;
        let h = g.add_per_batch(h, self.time.forward(g, store, time)?)?;
        let h = g.add_bias(g.reshape(h, [batch, hw * c])?, g.param(store, self.pos))?;
        let h = g.silu(g.reshape(h, [batch, self.rows, self.cols, c])?);
        let h = g.silu(self.conv.forward(g, store, h)?);
        let q = g.reshape(h, [batch, hw, c])?;
        let (a, _) = self.attn.forward(g, store, self.norm.forward(g, store, q)?, feats, feats, group)?;
        Ok(g.reshape(g.add(q, a)?, [batch, self.rows, self.cols, c])?)
    }
}

#[derive(Debug, Clone)]
struct MotionEncoder {
    conv: Conv1dModule,
    code: Linear,
    heads: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct AppearanceEncoder {
    stem: Conv,
    res1: ResBlock,
    down: Conv,
    res2: ResBlock,
}

/// Stage-2 model: frozen codec and schedule plus trainable networks.
#[derive(Debug, Clone)]
pub struct DiffusionRenderer<T: Real> {
    pub dims: RendererDims,
    pub seed: u64,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
    pub store: ParamStore<T>,
    time_mlp: Linear,
    motion: MotionEncoder,
    appearance: AppearanceEncoder,
    stages: [Stage; 3],
    out: Conv,
    /// Per-channel gain on `z_t` added to the output, a function of the step.
    skip: Linear,
}

impl<T: Real> DiffusionRenderer<T> {
    pub fn new(dims: RendererDims, seed: u64) -> Result<Self> {
        if dims.heads == 0 || dims.c1 % dims.heads != 0 || dims.c2 % dims.heads != 0 {
            return Err(Error::Config(format!("widths {}/{} not divisible by {} heads", dims.c1, dims.c2, dims.heads)));
        }
        if dims.time_dim == 0 || dims.motion_width == 0 || dims.code_dim == 0 {
            return Err(Error::Config("renderer widths must be positive".into()));
        }
        let schedule = NoiseSchedule::linear(dims.timesteps)?;
        super::ddim_timesteps(dims.timesteps, dims.ddim_steps)?;
        let mut store = ParamStore::new();
        let mut init = InitSource::new(seed, "renderer");
        let widths = dims.modulated_widths();
        let (rows, cols) = (HALF_ROWS, GRID);
        let stages = [
            Stage::new(&mut store, "stage0", widths[0], dims.c1, (rows, cols), &dims, &mut init)?,
            Stage::new(&mut store, "stage1", widths[1], dims.c2, (rows / 2, cols / 2), &dims, &mut init)?,
            Stage::new(&mut store, "stage2", widths[2], dims.c1, (rows, cols), &dims, &mut init)?,
        ];
        let out = Conv::new(&mut store, "out", dims.c1, LATENT_CHANNELS, 0.1, &mut init)?;
        let appearance = AppearanceEncoder {
            stem: Conv::new(&mut store, "appearance.stem", LATENT_CHANNELS, dims.c1, 1.0, &mut init)?,
            res1: ResBlock::new(&mut store, "appearance.res1", dims.c1, &mut init)?,
            down: Conv::new(&mut store, "appearance.down", dims.c1, dims.c2, 1.0, &mut init)?,
            res2: ResBlock::new(&mut store, "appearance.res2", dims.c2, &mut init)?,
        };
        let conv = Conv1dModule::new(&mut store, "motion", 1, dims.motion_width, &mut init)?;
        let mut n = || init.draw();
        let time_mlp = Linear::new(&mut store, "time", dims.time_dim, dims.c1, &mut n)?;
        let code = Linear::new(&mut store, "motion.code", MOTION_LEN * dims.motion_width, dims.code_dim, &mut n)?;
        let heads = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Linear::new(&mut store, &format!("motion.phi{i}"), dims.code_dim, w, &mut n))
            .collect::<diffarray::Result<Vec<_>>>()?;
        let skip = Linear::new(&mut store, "skip", dims.c1, LATENT_CHANNELS, &mut n)?;
        store.set(skip.weight, Tensor::zeros([dims.c1, LATENT_CHANNELS]))?;
        Ok(Self {
            dims,
            seed,
            codec: LatentCodec::new(),
            schedule,
            store,
            time_mlp,
            motion: MotionEncoder { conv, code, heads },
            appearance,
            stages,
            out,
            skip,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Per-layer modulation scales `φ = 1 + MLP(code)` from `motion: [B, 96]`
    /// rows of `(m̂, α, γ)`; one `[B, C_in]` set per modulated convolution.
    pub fn motion_condition(&self, g: &Graph<T>, motion: Var) -> Result<Vec<Var>> {
        let s = g.shape(motion);
        if s.len() != 2 || s[1] != MOTION_LEN {
            return Err(Error::Invalid(format!("motion condition must be [B, {MOTION_LEN}], got {s:?}")));
        }
        let b = s[0];
        let seq = g.reshape(motion, [b, MOTION_LEN, 1])?;
        let h = g.silu(self.motion.conv.forward(g, &self.store, seq)?);
        let h = g.reshape(h, [b, MOTION_LEN * self.dims.motion_width])?;
        let code = g.silu(self.motion.code.forward(g, &self.store, h)?);
        self.motion
            .heads
            .iter()
            .map(|head| {
                let out = head.forward(g, &self.store, code)?;
                let ones = g.constant(Tensor::full([head.fan_out], T::one()));
                Ok(g.add_bias(out, ones)?)
            })
            .collect()
    }

    /// Reference features from a centered reference latent `[R, 8, 8, 48]`:
    /// `[R, 64, c1]` at full resolution and `[R, 16, c2]` pooled.
    pub fn appearance_features(&self, g: &Graph<T>, reference: Var) -> Result<[Var; 2]> {
        let s = g.shape(reference);
        if s.len() != 4 || s[1..] != [GRID, GRID, LATENT_CHANNELS] {
            return Err(Error::Invalid(format!("reference latent must be [R, 8, 8, 48], got {s:?}")));
        }
        let (r, a) = (s[0], &self.appearance);
        let h = g.silu(a.stem.forward(g, &self.store, reference)?);
        let h = a.res1.forward(g, &self.store, h)?;
        let f1 = g.reshape(h, [r, GRID * GRID, self.dims.c1])?;
        let h = g.silu(a.down.forward(g, &self.store, g.avg_pool2(h)?)?);
        let h = a.res2.forward(g, &self.store, h)?;
        let f2 = g.reshape(h, [r, GRID * GRID / 4, self.dims.c2])?;
        Ok([f1, f2])
    }

    /// Predicted noise `[B, 4, 8, 48]` for noisy lower halves `z`, clean upper
    /// halves `upper` (both `[B, 4, 8, 48]`) at steps `t` (one per row). Each
    /// reference in `feats` serves `group` consecutive rows.
    pub fn unet_forward(
        &self,
        g: &Graph<T>,
        z: Var,
        upper: Var,
        t: &[usize],
        phis: &[Var],
        feats: &[Var; 2],
        group: usize,
    ) -> Result<Var> {
        let half = [HALF_ROWS, GRID, LATENT_CHANNELS];
        let (zs, us) = (g.shape(z), g.shape(upper));
        if zs.len() != 4 || zs[1..] != half || us != zs || t.len() != zs[0] || phis.len() != 3 {
            return Err(Error::Invalid(format!("inconsistent denoiser inputs {zs:?} / {us:?} / {} steps", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.schedule.steps()) {
            return Err(Error::Invalid(format!("diffusion step {bad} outside 1..={}", self.schedule.steps())));
        }
        let (b, td) = (zs[0], self.dims.time_dim);
        let temb: Vec<f64> = t.iter().flat_map(|&s| sinusoidal_at(s as f64, td)).collect();
        let tmap: Vec<f64> = temb.chunks(td).flat_map(|row| (0..HALF_ROWS * GRID).flat_map(move |_| row.iter().copied())).collect();
        let tmap = g.constant(Tensor::from_f64([b, HALF_ROWS, GRID, td], &tmap)?);
        let time = g.silu(self.time_mlp.forward(g, &self.store, g.constant(Tensor::from_f64([b, td], &temb)?))?);
        let x = g.concat_last(&[z, upper, tmap])?;
        let h1 = self.stages[0].forward(g, &self.store, x, phis[0], time, feats[0], group)?;
        let h2 = self.stages[1].forward(g, &self.store, g.avg_pool2(h1)?, phis[1], time, feats[1], group)?;
        let up = g.concat_last(&[g.upsample2(h2)?, h1])?;
        let h3 = self.stages[2].forward(g, &self.store, up, phis[2], time, feats[0], group)?;
        let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, HALF_ROWS * GRID)).collect();
        let gain = g.reshape(g.gather_rows(self.skip.forward(g, &self.store, time)?, &rows)?, [b, HALF_ROWS, GRID, LATENT_CHANNELS])?;
        Ok(g.add(self.out.forward(g, &self.store, h3)?, g.mul(gain, z)?)?)
    }

    /// Raw weights of the modulated convolutions, in stage order.
    pub fn modulated_weights(&self) -> Vec<ParamId> {
        self.stages.iter().map(|s| s.modconv.w).collect()
    }

    pub fn to_container(&self, config_digest: [u8; 32]) -> Container {
        let mut c = Container::new(self.seed, config_digest);
        c.set_meta("kind", "stage2");
        let d = &self.dims;
        for (k, v) in [
            ("c1", d.c1),
            ("c2", d.c2),
            ("heads", d.heads),
            ("time_dim", d.time_dim),
            ("motion_width", d.motion_width),
            ("code_dim", d.code_dim),
            ("timesteps", d.timesteps),
            ("ddim_steps", d.ddim_steps),
        ] {
            c.set_meta(k, v);
        }
        for e in self.store.entries() {
            c.push(&e.name, &e.value);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "stage2" {
            return Err(Error::Format("checkpoint is not a stage-2 model".into()));
        }
        let dims = RendererDims {
            c1: c.meta_parse("c1")?,
            c2: c.meta_parse("c2")?,
            heads: c.meta_parse("heads")?,
            time_dim: c.meta_parse("time_dim")?,
            motion_width: c.meta_parse("motion_width")?,
            code_dim: c.meta_parse("code_dim")?,
            timesteps: c.meta_parse("timesteps")?,
            ddim_steps: c.meta_parse("ddim_steps")?,
        };
        let mut model = Self::new(dims, c.seed)?;
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

/// `(m̂, α, γ)` rows for a batch of frames.
pub fn motion_rows(mouth: &[f64], alpha: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    let frames = mouth.len() / MOUTH_DIM;
    if mouth.len() != frames * MOUTH_DIM || alpha.len() != frames * ID_DIM || gamma.len() != frames * ROT_DIM {
        return Err(Error::Invalid(format!(
            "motion streams disagree: {} mouth, {} identity, {} rotation values",
            mouth.len(),
            alpha.len(),
            gamma.len()
        )));
    }
    let mut out = Vec::with_capacity(frames * MOTION_LEN);
    for f in 0..frames {
        out.extend_from_slice(&mouth[f * MOUTH_DIM..(f + 1) * MOUTH_DIM]);
        out.extend_from_slice(&alpha[f * ID_DIM..(f + 1) * ID_DIM]);
        out.extend_from_slice(&gamma[f * ROT_DIM..(f + 1) * ROT_DIM]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream};
    use diffarray::finite_diff_check_params;

    fn tiny() -> RendererDims {
        RendererDims {
            c1: 4,
            c2: 8,
            heads: 2,
            time_dim: 4,
            motion_width: 2,
            code_dim: 6,
            timesteps: 50,
            ddim_steps: 5,
        }
    }

    struct Inputs {
        z: Tensor<f64>,
        upper: Tensor<f64>,
        motion: Tensor<f64>,
        reference: Tensor<f64>,
        t: Vec<usize>,
    }

    fn inputs(seed: u64, refs: usize, group: usize) -> Inputs {
        let mut r = stream(seed, "in", 0);
        let b = refs * group;
        let half = HALF_ROWS * GRID * LATENT_CHANNELS;
        Inputs {
            z: Tensor::from_f64([b, 4, 8, 48], &normals(&mut r, b * half, 1.0)).unwrap(),
            upper: Tensor::from_f64([b, 4, 8, 48], &normals(&mut r, b * half, 1.0)).unwrap(),
            motion: Tensor::from_f64([b, MOTION_LEN], &normals(&mut r, b * MOTION_LEN, 0.5)).unwrap(),
            reference: Tensor::from_f64([refs, 8, 8, 48], &normals(&mut r, refs * 2 * half, 1.0)).unwrap(),
            t: (0..b).map(|i| 1 + (i * 17) % 50).collect(),
        }
    }

    fn eps_hat(m: &DiffusionRenderer<f64>, g: &Graph<f64>, x: &Inputs, group: usize) -> Var {
        let phis = m.motion_condition(g, g.constant(x.motion.clone())).unwrap();
        let feats = m.appearance_features(g, g.constant(x.reference.clone())).unwrap();
        m.unet_forward(g, g.constant(x.z.clone()), g.constant(x.upper.clone()), &x.t, &phis, &feats, group).unwrap()
    }

    #[test]
    fn shapes_and_widths() {
        let m = DiffusionRenderer::<f64>::new(tiny(), 0).unwrap();
        let g = Graph::new();
        let x = inputs(0, 2, 3);
        let phis = m.motion_condition(&g, g.constant(x.motion.clone())).unwrap();
        let widths: Vec<usize> = phis.iter().map(|&p| g.shape(p)[1]).collect();
        assert_eq!(widths, m.dims.modulated_widths());
        assert_eq!(widths, [2 * 48 + 4, 4, 12]);
        let feats = m.appearance_features(&g, g.constant(x.reference.clone())).unwrap();
        assert_eq!(g.shape(feats[0]), vec![2, 64, 4]);
        assert_eq!(g.shape(feats[1]), vec![2, 16, 8]);
        assert_eq!(g.shape(eps_hat(&m, &g, &x, 3)), vec![6, 4, 8, 48]);
        let bad = Inputs { t: vec![0; 6], ..inputs(0, 2, 3) };
        let phis = m.motion_condition(&g, g.constant(bad.motion.clone())).unwrap();
        assert!(m
            .unet_forward(&g, g.constant(bad.z.clone()), g.constant(bad.upper.clone()), &bad.t, &phis, &feats, 3)
            .is_err());
    }

    #[test]
    fn distinct_motion_gives_distinct_scales() {
        let m = DiffusionRenderer::<f64>::new(tiny(), 1).unwrap();
        let g = Graph::new();
        let mut r = stream(2, "m", 0);
        let a = normals(&mut r, MOTION_LEN, 0.5);
        let mut b = a.clone();
        b[3] += 0.2;
        let phis = m.motion_condition(&g, g.constant(Tensor::from_f64([2, MOTION_LEN], &[a, b].concat()).unwrap())).unwrap();
        for p in phis {
            let v = g.value(p);
            let w = v.shape()[1];
            assert!((0..w).any(|i| (v.data()[i] - v.data()[w + i]).abs() > 1e-9));
        }
    }

    #[test]
    fn frames_sharing_a_reference_match_separate_calls() {
        let m = DiffusionRenderer::<f64>::new(tiny(), 2).unwrap();
        let x = inputs(3, 2, 2);
        let g = Graph::new();
        let joint = g.value(eps_hat(&m, &g, &x, 2)).to_f64_vec();
        let per = 4 * 8 * 48;
        for r in 0..2 {
            let slice = |t: &Tensor<f64>, rows: usize, w: usize| Tensor::from_f64(
                {
                    let mut s = t.shape().to_vec();
                    s[0] = rows;
                    s
                },
                &t.to_f64_vec()[r * rows * w..(r + 1) * rows * w],
            )
            .unwrap();
            let one = Inputs {
                z: slice(&x.z, 2, per),
                upper: slice(&x.upper, 2, per),
                motion: slice(&x.motion, 2, MOTION_LEN),
                reference: slice(&x.reference, 1, 2 * per),
                t: x.t[r * 2..r * 2 + 2].to_vec(),
            };
            let g = Graph::new();
            let alone = g.value(eps_hat(&m, &g, &one, 2)).to_f64_vec();
            for (a, b) in alone.iter().zip(&joint[r * 2 * per..]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn demodulated_rows_are_unit_norm() {
        let m = DiffusionRenderer::<f64>::new(RendererDims::desk(), 0).unwrap();
        let g = Graph::new();
        let mut r = stream(4, "m", 0);
        let motion = g.constant(Tensor::from_f64([3, MOTION_LEN], &normals(&mut r, 3 * MOTION_LEN, 0.5)).unwrap());
        let phis = m.motion_condition(&g, motion).unwrap();
        for (id, phi) in m.modulated_weights().into_iter().zip(phis) {
            let w = g.param(&m.store, id);
            let d = g.value(g.demodulate(w, phi, MODULATION_EPS).unwrap());
            let per = d.shape()[2];
            for row in d.data().chunks(per) {
                let ss: f64 = row.iter().map(|v| v * v).sum();
                assert!((0.999..=1.0).contains(&ss), "{ss}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = DiffusionRenderer::<f64>::new(tiny(), 5).unwrap();
        let x = inputs(6, 1, 2);
        let mut r = stream(7, "target", 0);
        let target = Tensor::from_f64([2, 4, 8, 48], &normals(&mut r, 2 * 4 * 8 * 48, 1.0)).unwrap();
        let model = m.clone();
        let err = finite_diff_check_params(
            &mut m.store,
            |g, store| {
                let model = DiffusionRenderer { store: store.clone(), ..model.clone() };
                let e = eps_hat(&model, g, &x, 2);
                Ok(g.sum(g.mul(e, g.constant(target.clone()))?))
            },
            1e-5,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn container_round_trip() {
        let m = DiffusionRenderer::<f32>::new(tiny(), 8).unwrap();
        let back = DiffusionRenderer::<f32>::from_container(&Container::from_bytes(&m.to_container([1; 32]).to_bytes()).unwrap()).unwrap();
        assert_eq!(back.dims, m.dims);
        for (a, b) in m.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }
}
