use std::path::{Path, PathBuf};

use diffarray::Tensor;

use super::RunConfig;
use crate::container::{hex, Container};
use crate::error::{Error, Result};
use crate::evalkit::{export_attention, lip_lmd, psnr, run_ablation, ssim, AblationTable, ClipMetrics, MetricReport};
use crate::face3dmm::{MOUTH_DIM, REST_DIM};
use crate::lipmotion::{build_windows, infer_sequence, train_stage1, write_log, LipSyncModel, StrategyRegistry, StyleReference};
use crate::renderer::{lower_pixels, render_video, train_stage2, DiffusionRenderer, Stage2LogRow};
use crate::synthworld::{frame_to_u8, load_clip, load_dataset, make_dataset, u8_to_image, write_ppm, Dataset, SynthClip, AUDIO_DIM, IMAGE_SIZE};
use crate::workers::parallel_map;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, text).map_err(io(path))
}

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Dataset> {
    make_dataset(&cfg.data, out_dir)
}

fn load_stage1(path: &Path) -> Result<LipSyncModel<f32>> {
    LipSyncModel::from_container(&Container::load(path)?, &StrategyRegistry::builtin())
}

fn load_stage2(path: &Path) -> Result<DiffusionRenderer<f32>> {
    DiffusionRenderer::from_container(&Container::load(path)?)
}

/// Trains stage 1 or 2 on the dataset in `data_dir`; writes the checkpoint to
/// `out` and the loss log next to it (`.csv`).
pub fn cmd_train(cfg: &RunConfig, stage: u8, data_dir: &Path, out: &Path) -> Result<PathBuf> {
    let ds = load_dataset(data_dir)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let log = out.with_extension("csv");
    let container = match stage {
        1 => {
            let strategy = StrategyRegistry::builtin().get(&cfg.strategy)?;
            let mut model = LipSyncModel::<f32>::new(cfg.stage1.clone(), strategy, cfg.seed)?;
            write_log(&log, &train_stage1(&mut model, &ds, &cfg.train1)?)?;
            model.to_container(cfg.digest())
        }
        2 => {
            let mut model = DiffusionRenderer::<f32>::new(cfg.stage2.clone(), cfg.seed)?;
            write(&log, &Stage2LogRow::csv(&train_stage2(&mut model, &ds, &cfg.train2)?))?;
            model.to_container(cfg.digest())
        }
        other => return Err(Error::Config(format!("there is no stage {other}"))),
    };
    container.save(out)?;
    Ok(out.to_path_buf())
}

fn clip_reference(clip: &SynthClip, ref_len: usize) -> Result<StyleReference> {
    let n = ref_len.min(clip.len());
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(StyleReference::from_clip(clip, 0..n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub frames: usize,
    pub motion_csv: PathBuf,
}

/// Predicts mouth motion for every frame of `clip_path` (style reference: the
/// clip's first `n` frames), renders the lower halves onto the clip's frames
/// and writes `frame_XXXXX.ppm` plus `motion.csv` to `out_dir`.
pub fn cmd_infer(cfg: &RunConfig, ckpt1: &Path, ckpt2: &Path, clip_path: &Path, out_dir: &Path) -> Result<InferOutput> {
    let stage1 = load_stage1(ckpt1)?;
    let stage2 = load_stage2(ckpt2)?;
    let (speaker, clip) = load_clip(clip_path)?;
    if !clip.has_frames() {
        return Err(Error::Invalid(format!("{} carries no video frames", clip_path.display())));
    }
    let reference = clip_reference(&clip, stage1.dims.ref_len)?;
    let motion = infer_sequence(&stage1, &clip.audio, Some(&reference))?;
    let frames: Vec<Tensor<f64>> = (0..clip.len()).map(|t| u8_to_image(clip.frame(t))).collect();
    let alpha: Vec<f64> = (0..clip.len()).flat_map(|_| speaker.identity_alpha.iter().copied()).collect();
    let rendered = render_video(&stage2, &motion, &frames, &alpha, &clip.gamma, &frames[0], cfg.seed, stage2.dims.ddim_steps)?;
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    for (t, img) in rendered.iter().enumerate() {
        write_ppm(&out_dir.join(format!("frame_{t:05}.ppm")), &frame_to_u8(img), IMAGE_SIZE, IMAGE_SIZE)?;
    }
    let mut csv = String::from("frame");
    for k in 0..MOUTH_DIM {
        csv.push_str(&format!(",m{k}"));
    }
    csv.push('\n');
    for (t, row) in motion.chunks(MOUTH_DIM).enumerate() {
        csv.push_str(&t.to_string());
        for v in row {
            csv.push_str(&format!(",{v:?}"));
        }
        csv.push('\n');
    }
    let motion_csv = out_dir.join("motion.csv");
    write(&motion_csv, &csv)?;
    Ok(InferOutput {
        frames: rendered.len(),
        motion_csv,
    })
}

/// Per-speaker test-region LipLMD; with a renderer, also lower-half PSNR/SSIM of
/// the first `eval_frames` test frames rendered from predicted motion.
pub fn cmd_eval(cfg: &RunConfig, ckpt1: &Path, ckpt2: Option<&Path>, data_dir: &Path, out_csv: &Path) -> Result<MetricReport> {
    let ds = load_dataset(data_dir)?;
    let stage1 = load_stage1(ckpt1)?;
    let stage2 = ckpt2.map(load_stage2).transpose()?;
    let idx: Vec<usize> = (0..ds.clips.len()).collect();
    let ref_len = stage1.dims.ref_len;
    let clips = parallel_map(&idx, |_, &s| -> Result<ClipMetrics> {
        let (clip, split, speaker) = (&ds.clips[s], &ds.splits[s], &ds.speakers[s]);
        let style = split.style.start..split.style.start + ref_len.min(split.style.len());
        let reference = StyleReference::from_clip(clip, style.clone());
        let t = split.test.clone();
        let pred = infer_sequence(&stage1, &clip.audio[t.start * AUDIO_DIM..t.end * AUDIO_DIM], Some(&reference))?;
        let gt = &clip.mouth[t.start * MOUTH_DIM..t.end * MOUTH_DIM];
        let lmd = lip_lmd(&pred, gt, &vec![speaker.identity_alpha.clone(); t.len()], &vec![vec![0.0; REST_DIM]; t.len()], &ds.basis)?;
        let (mut psnr_v, mut ssim_v) = (None, None);
        if let Some(r) = &stage2 {
            if !clip.has_frames() {
                return Err(Error::Invalid("rendering metrics need a dataset with frames".into()));
            }
            let k = cfg.eval_frames.min(t.len()).max(1);
            let frames: Vec<Tensor<f64>> = (t.start..t.start + k).map(|f| u8_to_image(clip.frame(f))).collect();
            let alpha: Vec<f64> = (0..k).flat_map(|_| speaker.identity_alpha.iter().copied()).collect();
            let gamma = &clip.gamma[t.start * 3..(t.start + k) * 3];
            let reference_img = u8_to_image(clip.frame(style.start));
            let out = render_video(r, &pred[..k * MOUTH_DIM], &frames, &alpha, gamma, &reference_img, cfg.seed, r.dims.ddim_steps)?;
            let (mut ps, mut ss) = (0.0, 0.0);
            for (o, g) in out.iter().zip(&frames) {
                let (o, g) = (lower_pixels(o)?, lower_pixels(g)?);
                ps += psnr(&o, &g)?;
                ss += ssim(&o, &g)?;
            }
            psnr_v = Some(ps / k as f64);
            ssim_v = Some(ss / k as f64);
        }
        Ok(ClipMetrics {
            clip: format!("speaker{:03}", speaker.id),
            lip_lmd: lmd,
            psnr: psnr_v,
            ssim: ssim_v,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = MetricReport {
        variant: stage1.strategy().name().to_string(),
        seed: cfg.seed,
        config_digest: hex(&cfg.digest()),
        clips,
    };
    write(out_csv, &report.to_csv())?;
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig, out_csv: &Path) -> Result<AblationTable> {
    let out = run_ablation(&cfg.data, &cfg.stage1, &cfg.train1, &cfg.ablation_seeds)?;
    write(out_csv, &out.table.to_csv())?;
    Ok(out.table)
}

/// Exports cross-attention for the window centered on `frame` (default: the
/// clip's middle frame) against the clip's first `n` frames.
pub fn cmd_attnviz(ckpt1: &Path, clip_path: &Path, frame: Option<usize>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = load_stage1(ckpt1)?;
    if !model.uses_reference() {
        return Err(Error::Invalid("this model has no reference attention to export".into()));
    }
    let (_, clip) = load_clip(clip_path)?;
    let t = frame.unwrap_or(clip.len() / 2);
    if t >= clip.len() {
        return Err(Error::Invalid(format!("frame {t} outside a {}-frame clip", clip.len())));
    }
    let reference = clip_reference(&clip, model.dims.ref_len)?;
    let l = model.dims.window_len();
    let windows = build_windows(&clip.audio, model.dims.window);
    let stem = format!("frame{t:05}");
    let mats = export_attention(&model, &windows[t * l * AUDIO_DIM..(t + 1) * l * AUDIO_DIM], &reference, out_dir, &stem)?;
    let mut files: Vec<PathBuf> = (0..mats.len() - 1).map(|i| out_dir.join(format!("{stem}_block{i}.csv"))).collect();
    files.push(out_dir.join(format!("{stem}_mean.csv")));
    Ok(files)
}
