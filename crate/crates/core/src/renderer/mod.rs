//! Stage 2: conditional diffusion over the lower half of a patch latent.
//!
//! Images are mapped by a fixed orthonormal patch transform ([`LatentCodec`])
//! to an `8 × 8` grid of 48-channel latents, stored grid-major (`[8, 8, 48]`,
//! channels last). Rows 4..8 of the grid cover exactly the lower 16 pixel rows,
//! so the mouth half can be noised and denoised while the upper half stays clean.

mod net;
mod train;

pub use net::{motion_rows, DiffusionRenderer, RendererDims, MODULATION_EPS, MOTION_LEN};
pub use train::{
    eval_renderer, lower_pixels, mean_lower_half, render_video, sample_lower_latents, sample_stage2_batch, train_stage2, RenderEval, Stage2Batch,
    Stage2LogRow, Stage2TrainConfig, ITEM_FRAMES,
};

use diffarray::Tensor;

use crate::error::{Error, Result};
use crate::rng::{normals, stream};
use crate::synthworld::{CHANNELS, IMAGE_SIZE};

pub const PATCH: usize = 4;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const LATENT_CHANNELS: usize = CHANNELS * PATCH * PATCH;
/// Latent rows belonging to each half.
pub const HALF_ROWS: usize = GRID / 2;
/// Values in one half of the latent grid (`4 × 8 × 48`).
pub const HALF_LEN: usize = HALF_ROWS * GRID * LATENT_CHANNELS;
pub const LATENT_LEN: usize = 2 * HALF_LEN;

/// Orthonormal 4×4 DCT per patch combined with an orthonormal color rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    dct: [[f64; PATCH]; PATCH],
    color: [[f64; CHANNELS]; CHANNELS],
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl LatentCodec {
    pub fn new() -> Self {
        let n = PATCH as f64;
        let dct = std::array::from_fn(|k| {
            let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            std::array::from_fn(|x| s * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2.0 * n)).cos())
        });
        let (r3, r2, r6) = (3f64.sqrt(), 2f64.sqrt(), 6f64.sqrt());
        let color = [[1.0 / r3, 1.0 / r3, 1.0 / r3], [1.0 / r2, -1.0 / r2, 0.0], [1.0 / r6, 1.0 / r6, -2.0 / r6]];
        Self { dct, color }
    }

    /// `[3, 32, 32]` image to `[8, 8, 48]` latent; channel `c·16 + u·4 + v`
    /// holds color component `c` at DCT frequency `(u, v)`.
    pub fn encode(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        if image.shape() != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Invalid(format!("expected a 3×32×32 image, got {:?}", image.shape())));
        }
        let px = image.data();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut out = vec![0.0; LATENT_LEN];
        for gy in 0..GRID {
            for gx in 0..GRID {
                let base = (gy * GRID + gx) * LATENT_CHANNELS;
                for (c, row) in self.color.iter().enumerate() {
                    for u in 0..PATCH {
                        for v in 0..PATCH {
                            let mut acc = 0.0;
                            for y in 0..PATCH {
                                for x in 0..PATCH {
                                    let pos = (gy * PATCH + y) * IMAGE_SIZE + gx * PATCH + x;
                                    let mixed: f64 = (0..CHANNELS).map(|k| row[k] * px[k * plane + pos]).sum();
                                    acc += self.dct[u][y] * self.dct[v][x] * mixed;
                                }
                            }
                            out[base + c * PATCH * PATCH + u * PATCH + v] = acc;
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![GRID, GRID, LATENT_CHANNELS], out)?)
    }

    pub fn decode(&self, latent: &Tensor<f64>) -> Result<Tensor<f64>> {
        if latent.shape() != [GRID, GRID, LATENT_CHANNELS] {
            return Err(Error::Invalid(format!("expected an 8×8×48 latent, got {:?}", latent.shape())));
        }
        let z = latent.data();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut out = vec![0.0; CHANNELS * plane];
        for gy in 0..GRID {
            for gx in 0..GRID {
                let base = (gy * GRID + gx) * LATENT_CHANNELS;
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let pos = (gy * PATCH + y) * IMAGE_SIZE + gx * PATCH + x;
                        for (c, row) in self.color.iter().enumerate() {
                            let mut acc = 0.0;
                            for u in 0..PATCH {
                                for v in 0..PATCH {
                                    acc += self.dct[u][y] * self.dct[v][x] * z[base + c * PATCH * PATCH + u * PATCH + v];
                                }
                            }
                            for k in 0..CHANNELS {
                                out[k * plane + pos] += row[k] * acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], out)?)
    }

    /// Latent of `image − 0.5`, the zero-centered representation diffusion runs on.
    pub fn encode_centered(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.encode(&image.map(|v| v - 0.5))
    }

    pub fn decode_centered(&self, latent: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.decode(latent)?.map(|v| v + 0.5))
    }
}

pub fn upper_half(latent: &[f64]) -> &[f64] {
    &latent[..HALF_LEN]
}

pub fn lower_half(latent: &[f64]) -> &[f64] {
    &latent[HALF_LEN..LATENT_LEN]
}

/// Linear variance schedule with `ᾱ` cumulative products; steps are `1..=T′`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub const BETA_START: f64 = 1e-4;
    pub const BETA_END: f64 = 0.02;

    /// Betas linear from `1e-4` to `0.02`, rescaled by `1000 / T′`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("noise schedule needs at least 2 steps, got {steps}")));
        }
        let s = 1000.0 / steps as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| s * (Self::BETA_START + (Self::BETA_END - Self::BETA_START) * i as f64 / (steps - 1) as f64))
            .collect();
        if betas[steps - 1] >= 1.0 {
            return Err(Error::Config(format!("{steps} diffusion steps push beta above 1")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let last = alpha_bar[alpha_bar.len() - 1];
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `t ∈ 0..=T′` (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(schedule: &NoiseSchedule, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if z0.len() != eps.len() {
        return Err(Error::Invalid(format!("noise of length {} for a latent of length {}", eps.len(), z0.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Anything that predicts the noise in a batch of lower-half latents `[B, 4, 8, 48]`.
pub trait Denoiser {
    fn predict_eps(&self, z: &Tensor<f64>, t: usize) -> Result<Tensor<f64>>;
}

/// Descending sampler steps `⌊i·T′/S⌋` for `i = S..1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("{steps} sampling steps for a {total}-step schedule")));
    }
    Ok((1..=steps).rev().map(|i| i * total / steps).collect())
}

/// Deterministic (η = 0) DDIM from `z_T = init`.
pub fn ddim_sample(denoiser: &dyn Denoiser, schedule: &NoiseSchedule, init: Tensor<f64>, steps: usize) -> Result<Tensor<f64>> {
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    let mut z = init;
    for (k, &t) in ts.iter().enumerate() {
        let eps = denoiser.predict_eps(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::Invalid(format!("denoiser returned shape {:?} for {:?}", eps.shape(), z.shape())));
        }
        let ab = schedule.alpha_bar(t);
        let prev = ts.get(k + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (prev.sqrt(), (1.0 - prev).sqrt());
        let next: Vec<f64> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(zt, e)| {
                let x0 = (zt - sb * e) / sa;
                pa * x0 + pb * e
            })
            .collect();
        z = Tensor::new(z.shape().to_vec(), next)?;
    }
    Ok(z)
}

/// One seeded lower-half noise draw repeated for each of `frames` frames.
pub fn shared_noise(seed: u64, frames: usize) -> Result<Tensor<f64>> {
    let one = normals(&mut stream(seed, "ddim-noise", 0), HALF_LEN, 1.0);
    let data: Vec<f64> = (0..frames).flat_map(|_| one.iter().copied()).collect();
    Ok(Tensor::new(vec![frames, HALF_ROWS, GRID, LATENT_CHANNELS], data)?)
}
