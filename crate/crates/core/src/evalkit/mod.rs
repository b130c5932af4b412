//! Lip landmark distance, image quality metrics, attention analysis and ablations.

mod ablation;
mod attention;

use diffarray::{Real, Tensor};

use crate::error::{Error, Result};
use crate::face3dmm::{assemble_mesh, embed_mouth_params, FaceBasis, FaceParams, MouthParams, MOUTH_DIM, REST_DIM};
use crate::lipmotion::{infer_sequence, LipSyncModel, StyleReference};
use crate::synthworld::{Dataset, AUDIO_DIM};
use crate::workers::parallel_map;

pub use ablation::{run_ablation, train_variant, AblationOutcome, AblationRow, AblationTable, Variant, ABLATION_ORDER};
pub use attention::{export_attention, locality_probe, noise_free_audio, write_matrix_csv, LocalityReport};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn frame_mesh(m: &[f64], alpha: &[f64], rest: &[f64], basis: &FaceBasis) -> Result<Vec<f64>> {
    let beta = embed_mouth_params(&MouthParams::from_slice(m)?, rest, basis)?;
    assemble_mesh(
        basis,
        &FaceParams {
            alpha: alpha.to_vec(),
            beta,
            gamma: [0.0; 3],
        },
    )
}

fn bbox_diagonal(mesh: &[f64]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in mesh.chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
}

/// Mean over frames of the mean Euclidean lip-vertex distance, each frame
/// normalized by the bounding-box diagonal of the ground-truth face with the
/// mouth at rest (ground-truth identity and non-mouth expression).
pub fn lip_lmd(pred: &[f64], gt: &[f64], alpha: &[Vec<f64>], beta_rest: &[Vec<f64>], basis: &FaceBasis) -> Result<f64> {
    let frames = gt.len() / MOUTH_DIM;
    if frames == 0 {
        return Err(Error::Invalid("LipLMD of an empty sequence".into()));
    }
    if pred.len() != gt.len() || gt.len() % MOUTH_DIM != 0 || alpha.len() != frames || beta_rest.len() != frames {
        return Err(Error::Invalid("LipLMD sequences are not aligned".into()));
    }
    let mut total = 0.0;
    for t in 0..frames {
        let rows = t * MOUTH_DIM..(t + 1) * MOUTH_DIM;
        let p = frame_mesh(&pred[rows.clone()], &alpha[t], &beta_rest[t], basis)?;
        let q = frame_mesh(&gt[rows], &alpha[t], &beta_rest[t], basis)?;
        let dist: f64 = basis
            .lip_idx()
            .iter()
            .map(|&v| (0..3).map(|c| (p[3 * v + c] - q[3 * v + c]).powi(2)).sum::<f64>().sqrt())
            .sum();
        let rest_face = frame_mesh(&[0.0; MOUTH_DIM], &alpha[t], &beta_rest[t], basis)?;
        total += dist / basis.lip_idx().len() as f64 / bbox_diagonal(&rest_face);
    }
    Ok(total / frames as f64)
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn grayscale(img: &Tensor<f64>) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("expected a [C, H, W] image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let gray = (0..h * w)
        .map(|i| (0..c).map(|ch| img.data()[ch * h * w + i]).sum::<f64>() / c as f64)
        .collect();
    Ok((gray, h, w))
}

/// Windowed SSIM on the channel-mean of two `[C, H, W]` images in `[0, 1]`,
/// averaged over every fully contained 11×11 Gaussian window.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (x, h, w) = grayscale(a)?;
    let (y, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let (p, q) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMetrics {
    pub clip: String,
    pub lip_lmd: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    pub clips: Vec<ClipMetrics>,
}

fn opt_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "variant,seed,config_digest,clip,lip_lmd,psnr,ssim";
    pub const AGGREGATE: &'static str = "mean";

    pub fn aggregate(&self) -> ClipMetrics {
        let n = self.clips.len().max(1) as f64;
        ClipMetrics {
            clip: Self::AGGREGATE.into(),
            lip_lmd: self.clips.iter().map(|c| c.lip_lmd).sum::<f64>() / n,
            psnr: opt_mean(self.clips.iter().map(|c| c.psnr)),
            ssim: opt_mean(self.clips.iter().map(|c| c.ssim)),
        }
    }

    /// Per-clip rows followed by the aggregate row. Floats are written in
    /// shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in self.clips.iter().cloned().chain([self.aggregate()]) {
            out.push_str(&format!(
                "{},{},{},{},{:?},{},{}\n",
                self.variant,
                self.seed,
                self.config_digest,
                c.clip,
                c.lip_lmd,
                fmt_opt(c.psnr),
                fmt_opt(c.ssim)
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("metric report {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(bad("has an unexpected header"));
        }
        let mut report: Option<Self> = None;
        let mut saw_aggregate = false;
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 || saw_aggregate {
                return Err(bad("has a malformed row"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("has a malformed number"));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let seed = f[1].parse::<u64>().map_err(|_| bad("has a malformed seed"))?;
            let r = report.get_or_insert_with(|| Self {
                variant: f[0].into(),
                seed,
                config_digest: f[2].into(),
                clips: Vec::new(),
            });
            if r.variant != f[0] || r.seed != seed || r.config_digest != f[2] {
                return Err(bad("mixes runs"));
            }
            let row = ClipMetrics {
                clip: f[3].into(),
                lip_lmd: num(f[4])?,
                psnr: opt(f[5])?,
                ssim: opt(f[6])?,
            };
            if row.clip == Self::AGGREGATE {
                saw_aggregate = true;
            } else {
                r.clips.push(row);
            }
        }
        report.filter(|_| saw_aggregate).ok_or_else(|| bad("lacks its aggregate row"))
    }
}

/// Per-speaker LipLMD on the test region, using the first `ref_len` frames of
/// the style region as the reference.
pub fn eval_stage1<T: Real>(model: &LipSyncModel<T>, ds: &Dataset, ref_len: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.clips.len()).collect();
    parallel_map(&idx, |_, &s| {
        let (clip, split) = (&ds.clips[s], &ds.splits[s]);
        let reference = StyleReference::from_clip(clip, split.style.start..split.style.start + ref_len.min(split.style.len()));
        let t = &split.test;
        let reference = (ref_len > 0).then_some(&reference);
        let pred = infer_sequence(model, &clip.audio[t.start * AUDIO_DIM..t.end * AUDIO_DIM], reference)?;
        let gt = &clip.mouth[t.start * MOUTH_DIM..t.end * MOUTH_DIM];
        let alpha = vec![ds.speakers[s].identity_alpha.clone(); t.len()];
        let rest = vec![vec![0.0; REST_DIM]; t.len()];
        lip_lmd(&pred, gt, &alpha, &rest, &ds.basis)
    })
    .into_iter()
    .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
