//! Stage-2 training, video rendering and the quality check against a mean image.

use diffarray::{AdamState, Graph, Real, Tensor, Var};
use rand::Rng;

use super::net::{motion_rows, MOTION_LEN};
use super::{ddim_sample, lower_half, shared_noise, upper_half, Denoiser, DiffusionRenderer, GRID, HALF_LEN, HALF_ROWS, LATENT_CHANNELS, LATENT_LEN};
use crate::error::{Error, Result};
use crate::evalkit::{psnr, ssim};
use crate::face3dmm::{ID_DIM, MOUTH_DIM, ROT_DIM};
use crate::lipmotion::cosine_lr;
use crate::rng::{normals, stream, StreamRng};
use crate::synthworld::{frame_to_u8, u8_to_image, Dataset, CHANNELS, FRAME_BYTES, IMAGE_SIZE};
use crate::workers::parallel_map;

/// Consecutive frames per training item, all sharing one reference image.
pub const ITEM_FRAMES: usize = 5;
const RENDER_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2TrainConfig {
    pub steps: usize,
    /// Items per batch; each contributes [`ITEM_FRAMES`] frames.
    pub items: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_floor: f64,
    pub seed: u64,
}

impl Stage2TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 2000,
            items: 4,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            lr_floor: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2LogRow {
    pub step: usize,
    pub loss: f64,
}

impl Stage2LogRow {
    pub const HEADER: &'static str = "step,loss";

    pub fn csv(rows: &[Self]) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in rows {
            out.push_str(&format!("{},{:?}\n", r.step, r.loss));
        }
        out
    }
}

/// A sampled batch: `items · 5` frames with their noise draws.
#[derive(Debug, Clone)]
pub struct Stage2Batch {
    pub items: usize,
    pub z0: Vec<f64>,
    pub upper: Vec<f64>,
    pub motion: Vec<f64>,
    /// One centered reference latent per item.
    pub reference: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
}

fn centered_latent<T: Real>(r: &DiffusionRenderer<T>, bytes: &[u8]) -> Result<Vec<f64>> {
    Ok(r.codec.encode_centered(&u8_to_image(bytes))?.to_f64_vec())
}

pub fn sample_stage2_batch<T: Real>(r: &DiffusionRenderer<T>, ds: &Dataset, items: usize, rng: &mut StreamRng) -> Result<Stage2Batch> {
    if items == 0 {
        return Err(Error::Config("stage-2 batches need at least one item".into()));
    }
    let n = items * ITEM_FRAMES;
    let mut b = Stage2Batch {
        items,
        z0: Vec::with_capacity(n * HALF_LEN),
        upper: Vec::with_capacity(n * HALF_LEN),
        motion: Vec::with_capacity(n * MOTION_LEN),
        reference: Vec::with_capacity(items * LATENT_LEN),
        t: Vec::with_capacity(n),
        eps: Vec::with_capacity(n * HALF_LEN),
    };
    for _ in 0..items {
        let s = rng.random_range(0..ds.clips.len());
        let (clip, train) = (&ds.clips[s], &ds.splits[s].train);
        if !clip.has_frames() {
            return Err(Error::Invalid("stage-2 training needs rendered frames".into()));
        }
        if train.len() < ITEM_FRAMES {
            return Err(Error::Config(format!("training region of {} frames is shorter than an item", train.len())));
        }
        let start = rng.random_range(train.start..train.end - ITEM_FRAMES + 1);
        let reference = rng.random_range(train.clone());
        b.reference.extend(centered_latent(r, clip.frame(reference))?);
        let alpha = &ds.speakers[s].identity_alpha;
        for f in start..start + ITEM_FRAMES {
            let z = centered_latent(r, clip.frame(f))?;
            b.upper.extend_from_slice(upper_half(&z));
            b.z0.extend_from_slice(lower_half(&z));
            b.motion.extend(motion_rows(clip.mouth_frame(f), alpha, &clip.gamma_frame(f))?);
            b.t.push(rng.random_range(1..=r.schedule.steps()));
        }
    }
    b.eps = normals(rng, n * HALF_LEN, 1.0);
    Ok(b)
}

impl Stage2Batch {
    /// `Σ‖eps − ε̂‖²` over the lower half, averaged over frames.
    pub fn loss<T: Real>(&self, g: &Graph<T>, r: &DiffusionRenderer<T>) -> Result<Var> {
        let n = self.t.len();
        let shape = [n, HALF_ROWS, GRID, LATENT_CHANNELS];
        let mut zt = Vec::with_capacity(n * HALF_LEN);
        for (i, &t) in self.t.iter().enumerate() {
            let span = i * HALF_LEN..(i + 1) * HALF_LEN;
            zt.extend(super::q_sample(&r.schedule, &self.z0[span.clone()], t, &self.eps[span])?);
        }
        let phis = r.motion_condition(g, g.constant(Tensor::from_f64([n, MOTION_LEN], &self.motion)?))?;
        let feats = r.appearance_features(g, g.constant(Tensor::from_f64([self.items, GRID, GRID, LATENT_CHANNELS], &self.reference)?))?;
        let z = g.constant(Tensor::from_f64(shape, &zt)?);
        let upper = g.constant(Tensor::from_f64(shape, &self.upper)?);
        let pred = r.unet_forward(g, z, upper, &self.t, &phis, &feats, ITEM_FRAMES)?;
        let d = g.sub(pred, g.constant(Tensor::from_f64(shape, &self.eps)?))?;
        Ok(g.scale(g.sum(g.square(d)), 1.0 / n as f64))
    }
}

pub fn train_stage2<T: Real>(r: &mut DiffusionRenderer<T>, ds: &Dataset, cfg: &Stage2TrainConfig) -> Result<Vec<Stage2LogRow>> {
    let mut rng = stream(cfg.seed, "stage2-batches", 0);
    let mut adam = AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, AdamState::<T>::DEFAULT_EPS);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.lr = cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps);
        let batch = sample_stage2_batch(r, ds, cfg.items, &mut rng)?;
        let g = Graph::new();
        let loss = batch.loss(&g, r)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {value}"),
            });
        }
        g.backward(loss)?;
        r.store.zero_grad();
        r.store.accumulate_grads(&g);
        adam.step(&mut r.store).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        log.push(Stage2LogRow { step, loss: value });
    }
    Ok(log)
}

/// Renderer with conditions for a run of frames fixed; `predict_eps` only varies `z` and `t`.
struct Conditioned<'a, T: Real> {
    renderer: &'a DiffusionRenderer<T>,
    upper: Tensor<T>,
    phis: Vec<Tensor<T>>,
    feats: [Tensor<T>; 2],
}

impl<'a, T: Real> Conditioned<'a, T> {
    fn new(renderer: &'a DiffusionRenderer<T>, upper: &[f64], motion: &[f64], reference: &[f64]) -> Result<Self> {
        let n = motion.len() / MOTION_LEN;
        let g = Graph::new();
        let phis = renderer.motion_condition(&g, g.constant(Tensor::from_f64([n, MOTION_LEN], motion)?))?;
        let feats = renderer.appearance_features(&g, g.constant(Tensor::from_f64([1, GRID, GRID, LATENT_CHANNELS], reference)?))?;
        Ok(Self {
            renderer,
            upper: Tensor::from_f64([n, HALF_ROWS, GRID, LATENT_CHANNELS], upper)?,
            phis: phis.iter().map(|&p| (*g.value(p)).clone()).collect(),
            feats: feats.map(|f| (*g.value(f)).clone()),
        })
    }
}

impl<T: Real> Denoiser for Conditioned<'_, T> {
    fn predict_eps(&self, z: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        let g = Graph::new();
        let n = z.shape()[0];
        let phis: Vec<Var> = self.phis.iter().map(|p| g.constant(p.clone())).collect();
        let feats = [g.constant(self.feats[0].clone()), g.constant(self.feats[1].clone())];
        let out = self.renderer.unet_forward(
            &g,
            g.constant(Tensor::from_f64(z.shape().to_vec(), &z.to_f64_vec())?),
            g.constant(self.upper.clone()),
            &vec![t; n],
            &phis,
            &feats,
            n,
        )?;
        Ok(Tensor::new(z.shape().to_vec(), g.value(out).to_f64_vec())?)
    }
}

fn masked_upper<T: Real>(r: &DiffusionRenderer<T>, frame: &Tensor<f64>) -> Result<Vec<f64>> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut masked = frame.clone();
    for ch in 0..CHANNELS {
        masked.data_mut()[ch * plane + plane / 2..(ch + 1) * plane].fill(0.5);
    }
    Ok(upper_half(&r.codec.encode_centered(&masked)?.to_f64_vec()).to_vec())
}

/// Centered lower-half latents (`T × HALF_LEN`) sampled with `steps` DDIM steps
/// from noise shared by every frame; upper halves come from `frames`. `mouth`,
/// `alpha` and `gamma` are row-major `T × 13`, `T × 80`, `T × 3`.
#[allow(clippy::too_many_arguments)]
pub fn sample_lower_latents<T: Real>(
    r: &DiffusionRenderer<T>,
    mouth: &[f64],
    frames: &[Tensor<f64>],
    alpha: &[f64],
    gamma: &[f64],
    reference: &Tensor<f64>,
    seed: u64,
    steps: usize,
) -> Result<Vec<f64>> {
    let count = frames.len();
    if count == 0 || mouth.len() != count * MOUTH_DIM || alpha.len() != count * ID_DIM || gamma.len() != count * ROT_DIM {
        return Err(Error::Invalid(format!("{count} frames with mismatched motion streams")));
    }
    let ref_latent = r.codec.encode_centered(reference)?.to_f64_vec();
    let motion = motion_rows(mouth, alpha, gamma)?;
    let mut out = Vec::with_capacity(count * HALF_LEN);
    for start in (0..count).step_by(RENDER_CHUNK) {
        let chunk = RENDER_CHUNK.min(count - start);
        let mut upper = Vec::with_capacity(chunk * HALF_LEN);
        for f in &frames[start..start + chunk] {
            upper.extend(masked_upper(r, f)?);
        }
        let cond = Conditioned::new(r, &upper, &motion[start * MOTION_LEN..(start + chunk) * MOTION_LEN], &ref_latent)?;
        out.extend(ddim_sample(&cond, &r.schedule, shared_noise(seed, chunk)?, steps)?.to_f64_vec());
    }
    Ok(out)
}

/// Renders `T` frames: the upper half of each is copied from `frames`, the lower
/// half decoded from [`sample_lower_latents`] and clamped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn render_video<T: Real>(
    r: &DiffusionRenderer<T>,
    mouth: &[f64],
    frames: &[Tensor<f64>],
    alpha: &[f64],
    gamma: &[f64],
    reference: &Tensor<f64>,
    seed: u64,
    steps: usize,
) -> Result<Vec<Tensor<f64>>> {
    let lower = sample_lower_latents(r, mouth, frames, alpha, gamma, reference, seed, steps)?;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    frames
        .iter()
        .zip(lower.chunks(HALF_LEN))
        .map(|(f, low)| {
            let mut latent = masked_upper(r, f)?;
            latent.extend_from_slice(low);
            let decoded = r.codec.decode_centered(&Tensor::new(vec![GRID, GRID, LATENT_CHANNELS], latent)?)?;
            let mut img = f.clone();
            for ch in 0..CHANNELS {
                for i in ch * plane + plane / 2..(ch + 1) * plane {
                    img.data_mut()[i] = decoded.data()[i].clamp(0.0, 1.0);
                }
            }
            Ok(img)
        })
        .collect()
}

/// Lower 16 rows of a `[3, 32, 32]` image.
pub fn lower_pixels(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let data: Vec<f64> = (0..CHANNELS).flat_map(|ch| img.data()[ch * plane + plane / 2..(ch + 1) * plane].iter().copied()).collect();
    Ok(Tensor::new(vec![CHANNELS, IMAGE_SIZE / 2, IMAGE_SIZE], data)?)
}

/// Mean lower half over every training frame of every speaker.
pub fn mean_lower_half(ds: &Dataset) -> Result<Tensor<f64>> {
    let mut acc = vec![0.0; CHANNELS * IMAGE_SIZE * IMAGE_SIZE / 2];
    let mut count = 0usize;
    for (clip, split) in ds.clips.iter().zip(&ds.splits) {
        if !clip.has_frames() {
            return Err(Error::Invalid("mean image needs rendered frames".into()));
        }
        for f in split.train.clone() {
            let lower = lower_pixels(&u8_to_image(clip.frame(f)))?;
            acc.iter_mut().zip(lower.data()).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    Ok(Tensor::new(vec![CHANNELS, IMAGE_SIZE / 2, IMAGE_SIZE], acc.into_iter().map(|v| v / count as f64).collect())?)
}

/// Mean lower-half PSNR/SSIM of rendered held-out frames and of the mean image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderEval {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    /// Whether every rendered upper half matched its input byte for byte.
    pub upper_identical: bool,
}

/// Renders the first `per_speaker` test frames of each speaker from ground-truth
/// motion, with the first style-region frame as reference.
pub fn eval_renderer<T: Real>(r: &DiffusionRenderer<T>, ds: &Dataset, per_speaker: usize, steps: usize, seed: u64) -> Result<RenderEval> {
    let baseline = mean_lower_half(ds)?;
    let idx: Vec<usize> = (0..ds.clips.len()).collect();
    let parts = parallel_map(&idx, |_, &s| -> Result<Vec<(f64, f64, f64, f64, bool)>> {
        let (clip, split) = (&ds.clips[s], &ds.splits[s]);
        let range = split.test.start..split.test.start + per_speaker.min(split.test.len());
        let frames: Vec<Tensor<f64>> = range.clone().map(|f| u8_to_image(clip.frame(f))).collect();
        let mouth = &clip.mouth[range.start * MOUTH_DIM..range.end * MOUTH_DIM];
        let gamma = &clip.gamma[range.start * ROT_DIM..range.end * ROT_DIM];
        let alpha: Vec<f64> = range.clone().flat_map(|_| ds.speakers[s].identity_alpha.iter().copied()).collect();
        let reference = u8_to_image(clip.frame(split.style.start));
        let rendered = render_video(r, mouth, &frames, &alpha, gamma, &reference, seed, steps)?;
        let upper_bytes = FRAME_BYTES / 2;
        rendered
            .iter()
            .zip(&frames)
            .map(|(out, gt)| {
                let same = frame_to_u8(out)[..upper_bytes] == frame_to_u8(gt)[..upper_bytes];
                let (o, t) = (lower_pixels(out)?, lower_pixels(gt)?);
                Ok((psnr(&o, &t)?, ssim(&o, &t)?, psnr(&baseline, &t)?, ssim(&baseline, &t)?, same))
            })
            .collect()
    });
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no held-out frames to render".into()));
    }
    let n = rows.len() as f64;
    Ok(RenderEval {
        frames: rows.len(),
        psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.1).sum::<f64>() / n,
        baseline_psnr: rows.iter().map(|r| r.2).sum::<f64>() / n,
        baseline_ssim: rows.iter().map(|r| r.3).sum::<f64>() / n,
        upper_identical: rows.iter().all(|r| r.4),
    })
}
