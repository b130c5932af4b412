//! Stage-1 objectives, batching, optimization and windowed inference.

use std::io::Write as _;
use std::path::Path;

use diffarray::{AdamState, Graph, Real, Tensor, Var};
use rand::Rng;

use super::{LipSyncModel, StyleReference};
use crate::error::{Error, Result};
use crate::face3dmm::{assemble_mesh, embed_mouth_params, lip_vertices, FaceBasis, FaceParams, MouthParams, MOUTH_DIM};
use crate::rng::{stream, StreamRng};
use crate::synthworld::{Dataset, AUDIO_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1TrainConfig {
    pub steps: usize,
    /// Segments per step.
    pub batch: usize,
    pub seg_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    /// Cosine decay of the learning rate down to `lr × lr_floor` at the last step.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Stage1TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 1500,
            batch: 4,
            seg_len: 64,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            lambda: 300.0,
            lr_floor: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "step,l1,l2,total";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.l1, self.l2, self.total)
    }
}

pub fn write_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(TrainLogRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Sliding windows over `frames` rows of `audio` (row-major `frames × 29`),
/// replicate-padded at both ends: `frames × (2w+1) × 29`.
pub fn build_windows(audio: &[f64], w: usize) -> Vec<f64> {
    let frames = audio.len() / AUDIO_DIM;
    let mut out = Vec::with_capacity(frames * (2 * w + 1) * AUDIO_DIM);
    for t in 0..frames {
        for o in 0..=2 * w {
            let s = (t + o).saturating_sub(w).min(frames - 1);
            out.extend_from_slice(&audio[s * AUDIO_DIM..(s + 1) * AUDIO_DIM]);
        }
    }
    out
}

/// L₁ over mouth parameters plus `lambda` times the mean absolute lip-vertex
/// error of meshes assembled from ground-truth identity and non-mouth expression.
pub fn loss_stage1(
    pred: &[f64],
    gt: &[f64],
    beta_rest: &[Vec<f64>],
    alpha: &[Vec<f64>],
    basis: &FaceBasis,
    lambda: f64,
) -> Result<f64> {
    let frames = gt.len() / MOUTH_DIM;
    if pred.len() != gt.len() || beta_rest.len() != frames || alpha.len() != frames || frames == 0 {
        return Err(Error::Invalid("stage-1 loss sequences differ in length".into()));
    }
    let l1 = pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
    let mut l2 = 0.0;
    let mut count = 0usize;
    for t in 0..frames {
        let lips = |m: &[f64]| -> Result<Vec<[f64; 3]>> {
            let beta = embed_mouth_params(&MouthParams::from_slice(m)?, &beta_rest[t], basis)?;
            let mesh = assemble_mesh(
                basis,
                &FaceParams {
                    alpha: alpha[t].clone(),
                    beta,
                    gamma: [0.0; 3],
                },
            )?;
            Ok(lip_vertices(&mesh, basis))
        };
        let rows = t * MOUTH_DIM..(t + 1) * MOUTH_DIM;
        for (p, q) in lips(&pred[rows.clone()])?.iter().zip(lips(&gt[rows])?) {
            for c in 0..3 {
                l2 += (p[c] - q[c]).abs();
                count += 1;
            }
        }
    }
    Ok(l1 + lambda * l2 / count as f64)
}

/// Graph form of [`loss_stage1`]: lip offsets are linear in the mouth
/// parameters, so the vertex term is `mean |(pred − gt)·G|` with
/// `geometry = G` (`13 × 3L`). Returns `(total, l1, l2)`.
pub fn loss_stage1_graph<T: Real>(g: &Graph<T>, pred: Var, gt: Var, geometry: Var, lambda: f64) -> Result<(Var, Var, Var)> {
    let diff = g.sub(pred, gt)?;
    let l1 = g.mean(g.abs(diff));
    let l2 = g.mean(g.abs(g.matmul(diff, geometry)?));
    let total = g.add(l1, g.scale(l2, lambda))?;
    Ok((total, l1, l2))
}

/// One optimization batch: `refs` segments of `seg_len` windows each, every
/// segment paired with its own same-speaker reference.
#[derive(Debug, Clone)]
pub struct Stage1Batch {
    pub refs: usize,
    pub seg_len: usize,
    pub windows: Vec<f64>,
    pub targets: Vec<f64>,
    pub ref_audio: Vec<f64>,
    pub ref_lips: Vec<f64>,
}

fn disjoint_start(rng: &mut StreamRng, region: usize, n: usize, seg: std::ops::Range<usize>) -> Option<usize> {
    let before = (seg.start + 1).saturating_sub(n);
    let after = (region + 1).saturating_sub(n + seg.end);
    let total = before + after;
    if total == 0 {
        return None;
    }
    let k = rng.random_range(0..total);
    Some(if k < before { k } else { seg.end + (k - before) })
}

/// Draws segments and references from the training regions of `ds`.
pub fn sample_batch(ds: &Dataset, batch: usize, seg_len: usize, ref_len: usize, w: usize, rng: &mut StreamRng) -> Result<Stage1Batch> {
    let mut out = Stage1Batch {
        refs: batch,
        seg_len,
        windows: Vec::new(),
        targets: Vec::new(),
        ref_audio: Vec::new(),
        ref_lips: Vec::new(),
    };
    for _ in 0..batch {
        let s = rng.random_range(0..ds.clips.len());
        let (clip, train) = (&ds.clips[s], &ds.splits[s].train);
        let region = train.len();
        if region < seg_len + ref_len {
            return Err(Error::Config(format!(
                "training region of {region} frames cannot hold a {seg_len}-frame segment and a {ref_len}-frame reference"
            )));
        }
        let start = train.start + rng.random_range(0..=region - seg_len);
        let seg = start - train.start..start - train.start + seg_len;
        let r = train.start + disjoint_start(rng, region, ref_len, seg).expect("region holds both");
        out.windows.extend(build_windows(&clip.audio[start * AUDIO_DIM..(start + seg_len) * AUDIO_DIM], w));
        out.targets.extend_from_slice(&clip.mouth[start * MOUTH_DIM..(start + seg_len) * MOUTH_DIM]);
        let reference = StyleReference::from_clip(clip, r..r + ref_len);
        out.ref_audio.extend(reference.audio);
        out.ref_lips.extend(reference.lips);
    }
    Ok(out)
}

impl Stage1Batch {
    /// Builds the loss graph; returns `(total, l1, l2)`.
    pub fn loss<T: Real>(&self, g: &Graph<T>, model: &LipSyncModel<T>, geometry: &Tensor<T>, lambda: f64) -> Result<(Var, Var, Var)> {
        let n = self.ref_lips.len() / MOUTH_DIM / self.refs;
        let count = self.refs * self.seg_len;
        let l = model.dims.window_len();
        let windows = g.constant(Tensor::from_f64([count, l, AUDIO_DIM], &self.windows)?);
        let refs = (
            g.constant(Tensor::from_f64([self.refs, n, AUDIO_DIM], &self.ref_audio)?),
            g.constant(Tensor::from_f64([self.refs, n, MOUTH_DIM], &self.ref_lips)?),
        );
        let out = model.forward(g, windows, Some(refs), self.seg_len)?;
        let gt = g.constant(Tensor::from_f64([count, MOUTH_DIM], &self.targets)?);
        loss_stage1_graph(g, out.pred, gt, g.constant(geometry.clone()), lambda)
    }
}

pub fn cosine_lr(lr: f64, floor: f64, step: usize, steps: usize) -> f64 {
    let progress = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trains `model` in place and returns one log row per step.
pub fn train_stage1<T: Real>(model: &mut LipSyncModel<T>, ds: &Dataset, cfg: &Stage1TrainConfig) -> Result<Vec<TrainLogRow>> {
    let geometry = Tensor::from_f64([MOUTH_DIM, ds.basis.lip_coords().len()], &ds.basis.lip_geometry())?;
    let mut rng = stream(cfg.seed, "stage1-batches", 0);
    let mut adam = AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, AdamState::<T>::DEFAULT_EPS);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.lr = cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps);
        let batch = sample_batch(ds, cfg.batch, cfg.seg_len, model.dims.ref_len, model.dims.window, &mut rng)?;
        let g = Graph::new();
        let (total, l1, l2) = batch.loss(&g, model, &geometry, cfg.lambda)?;
        let row = TrainLogRow {
            step,
            l1: g.value(l1).item().as_f64(),
            l2: g.value(l2).item().as_f64(),
            total: g.value(total).item().as_f64(),
        };
        if !row.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {}", row.total),
            });
        }
        g.backward(total)?;
        model.store.zero_grad();
        model.store.accumulate_grads(&g);
        adam.step(&mut model.store).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        log.push(row);
    }
    Ok(log)
}

const INFER_CHUNK: usize = 256;

/// Mouth parameters for every frame of `audio` (row-major `T × 29`), `T × 13`.
pub fn infer_sequence<T: Real>(model: &LipSyncModel<T>, audio: &[f64], reference: Option<&StyleReference>) -> Result<Vec<f64>> {
    let frames = audio.len() / AUDIO_DIM;
    if frames == 0 || audio.len() % AUDIO_DIM != 0 {
        return Err(Error::Invalid("audio must hold at least one whole frame".into()));
    }
    let l = model.dims.window_len();
    let windows = build_windows(audio, model.dims.window);
    let refs = match reference {
        Some(r) if model.uses_reference() => {
            if r.is_empty() {
                return Err(Error::EmptyReference);
            }
            Some(r.tensors::<T>()?)
        }
        Some(_) => None,
        None if model.uses_reference() => return Err(Error::EmptyReference),
        None => None,
    };
    let mut out = Vec::with_capacity(frames * MOUTH_DIM);
    for start in (0..frames).step_by(INFER_CHUNK) {
        let count = INFER_CHUNK.min(frames - start);
        let g = Graph::new();
        let x = g.constant(Tensor::from_f64(
            [count, l, AUDIO_DIM],
            &windows[start * l * AUDIO_DIM..(start + count) * l * AUDIO_DIM],
        )?);
        let r = refs.as_ref().map(|(a, m)| (g.constant(a.clone()), g.constant(m.clone())));
        let pred = model.forward(&g, x, r, count)?.pred;
        out.extend(g.value(pred).to_f64_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face3dmm::{desk_basis, REST_DIM};
    use crate::lipmotion::{predict_window, Stage1Dims, StrategyRegistry};
    use crate::rng::normals;
    use crate::synthworld::{generate_dataset, DatasetConfig};
    use diffarray::finite_diff_check_params;

    #[test]
    fn windows_replicate_edges() {
        let audio: Vec<f64> = (0..3 * AUDIO_DIM).map(|i| (i / AUDIO_DIM) as f64).collect();
        let w = build_windows(&audio, 2);
        let frame_ids: Vec<f64> = w.chunks(AUDIO_DIM).map(|c| c[0]).collect();
        assert_eq!(
            frame_ids,
            [0., 0., 0., 1., 2., 0., 0., 1., 2., 2., 0., 1., 2., 2., 2.]
        );
    }

    #[test]
    fn loss_identities() {
        let basis = desk_basis(3).unwrap();
        let mut r = stream(1, "loss", 0);
        let gt = normals(&mut r, 2 * MOUTH_DIM, 0.3);
        let alpha = vec![normals(&mut r, 80, 0.1); 2];
        let rest = vec![normals(&mut r, REST_DIM, 0.1); 2];
        assert_eq!(loss_stage1(&gt, &gt, &rest, &alpha, &basis, 300.0).unwrap(), 0.0);
        let pred = normals(&mut r, 2 * MOUTH_DIM, 0.3);
        let plain = pred.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / 26.0;
        assert!((loss_stage1(&pred, &gt, &rest, &alpha, &basis, 0.0).unwrap() - plain).abs() < 1e-15);
    }

    #[test]
    fn single_dim_perturbation_matches_hand_mesh() {
        let basis = desk_basis(5).unwrap();
        let delta = 0.37;
        let gt = vec![0.0; MOUTH_DIM];
        let mut pred = gt.clone();
        pred[4] = delta;
        let alpha = vec![vec![0.0; 80]];
        let rest = vec![vec![0.0; REST_DIM]];
        let col = basis.exp_column(basis.mouth_idx()[4]);
        let coords = basis.lip_coords();
        let hand_l2 = coords.iter().map(|&c| (col[c] * delta).abs()).sum::<f64>() / coords.len() as f64;
        let got = loss_stage1(&pred, &gt, &rest, &alpha, &basis, 2.0).unwrap();
        assert!((got - (delta / 13.0 + 2.0 * hand_l2)).abs() < 1e-12);

        let g = Graph::<f64>::new();
        let geo = g.constant(Tensor::from_f64([MOUTH_DIM, coords.len()], &basis.lip_geometry()).unwrap());
        let (total, _, _) = loss_stage1_graph(
            &g,
            g.constant(Tensor::from_f64([1, MOUTH_DIM], &pred).unwrap()),
            g.constant(Tensor::from_f64([1, MOUTH_DIM], &gt).unwrap()),
            geo,
            2.0,
        )
        .unwrap();
        assert!((g.value(total).item() - got).abs() < 1e-12);
    }

    fn tiny_dataset() -> Dataset {
        let mut cfg = DatasetConfig::desk(0);
        cfg.num_speakers = 2;
        cfg.frames_per_speaker = 200;
        cfg.style_ref_len = 4;
        cfg.render_frames = false;
        generate_dataset(&cfg).unwrap()
    }

    fn tiny_dims() -> Stage1Dims {
        Stage1Dims {
            d_model: 8,
            heads: 2,
            blocks: 1,
            window: 1,
            ref_len: 4,
            ff_mult: 2,
            ref_layers: 1,
            ref_positional: true,
        }
    }

    #[test]
    fn references_never_overlap_segments() {
        let ds = tiny_dataset();
        let mut rng = stream(0, "t", 0);
        for _ in 0..500 {
            let seg = 10..30;
            let r = disjoint_start(&mut rng, 40, 8, seg.clone()).unwrap();
            assert!(r + 8 <= seg.start || r >= seg.end);
            assert!(r + 8 <= 40);
        }
        assert_eq!(disjoint_start(&mut rng, 20, 8, 0..20), None);
        let b = sample_batch(&ds, 3, 16, 4, 1, &mut rng).unwrap();
        assert_eq!(b.windows.len(), 3 * 16 * 3 * AUDIO_DIM);
        assert_eq!(b.ref_lips.len(), 3 * 4 * MOUTH_DIM);
    }

    #[test]
    fn full_stage1_graph_gradients() {
        let ds = tiny_dataset();
        let mut model = LipSyncModel::<f64>::new(tiny_dims(), StrategyRegistry::builtin().get("full").unwrap(), 2).unwrap();
        let batch = sample_batch(&ds, 2, 3, 4, 1, &mut stream(1, "b", 0)).unwrap();
        let geometry = Tensor::from_f64([MOUTH_DIM, 60], &ds.basis.lip_geometry()).unwrap();
        let m = model.clone();
        let err = finite_diff_check_params(
            &mut model.store,
            |g, store| {
                let mut m = m.clone();
                m.store = store.clone();
                let n = batch.ref_lips.len() / MOUTH_DIM / batch.refs;
                let l = m.dims.window_len();
                let windows = g.constant(Tensor::from_f64([batch.refs * batch.seg_len, l, AUDIO_DIM], &batch.windows)?);
                let refs = (
                    g.constant(Tensor::from_f64([batch.refs, n, AUDIO_DIM], &batch.ref_audio)?),
                    g.constant(Tensor::from_f64([batch.refs, n, MOUTH_DIM], &batch.ref_lips)?),
                );
                let out = m
                    .forward(g, windows, Some(refs), batch.seg_len)
                    .map_err(|e| diffarray::ArrayError::Config(e.to_string()))?;
                let gt = g.constant(Tensor::from_f64([batch.refs * batch.seg_len, MOUTH_DIM], &batch.targets)?);
                let d = g.sub(out.pred, gt)?;
                let v = g.matmul(d, g.constant(geometry.clone()))?;
                Ok(g.add(g.mean(g.square(d)), g.scale(g.mean(g.square(v)), 3.0))?)
            },
            1e-5,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = tiny_dataset();
        let strategy = StrategyRegistry::builtin().get("full").unwrap();
        let cfg = Stage1TrainConfig {
            steps: 30,
            batch: 2,
            seg_len: 8,
            lr: 3e-3,
            ..Stage1TrainConfig::desk(4)
        };
        let run = || {
            let mut m = LipSyncModel::<f32>::new(tiny_dims(), strategy.clone(), 1).unwrap();
            let log = train_stage1(&mut m, &ds, &cfg).unwrap();
            (m.to_container([0; 32]).to_bytes(), log)
        };
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let head: f64 = log[..5].iter().map(|r| r.total).sum();
        let tail: f64 = log[25..].iter().map(|r| r.total).sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn sequence_inference_matches_single_windows() {
        let ds = tiny_dataset();
        let model = LipSyncModel::<f64>::new(tiny_dims(), StrategyRegistry::builtin().get("full").unwrap(), 3).unwrap();
        let clip = &ds.clips[0];
        let reference = StyleReference::from_clip(clip, 0..4);
        for t_len in [1, 2, 7] {
            let audio = &clip.audio[..t_len * AUDIO_DIM];
            let seq = infer_sequence(&model, audio, Some(&reference)).unwrap();
            assert_eq!(seq.len(), t_len * MOUTH_DIM);
            let windows = build_windows(audio, 1);
            for t in 0..t_len {
                let one = predict_window(&model, &windows[t * 3 * AUDIO_DIM..(t + 1) * 3 * AUDIO_DIM], Some(&reference)).unwrap();
                for k in 0..MOUTH_DIM {
                    assert!((one.0[k] - seq[t * MOUTH_DIM + k]).abs() < 1e-12);
                }
            }
        }
    }
}
