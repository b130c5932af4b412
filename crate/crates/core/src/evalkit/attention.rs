//! Cross-attention export and the audio-locality probe.

use std::path::{Path, PathBuf};

use diffarray::{Real, Tensor};

use crate::error::{Error, Result};
use crate::face3dmm::MOUTH_DIM;
use crate::lipmotion::{build_windows, window_attention, LipSyncModel, StyleReference};
use crate::synthworld::{phoneme_audio, Dataset, SynthClip, AUDIO_DIM};
use crate::workers::parallel_map;

/// Writes a `rows × n` matrix with reference frame numbers as the header.
pub fn write_matrix_csv(path: &Path, weights: &[f64], n: usize) -> Result<()> {
    let mut text = String::from("position");
    for j in 0..n {
        text.push_str(&format!(",{j}"));
    }
    text.push('\n');
    for (i, row) in weights.chunks(n).enumerate() {
        text.push_str(&i.to_string());
        for w in row {
            text.push_str(&format!(",{w:?}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>_block<i>.csv` per decoder block and `<stem>_mean.csv`, each
/// `(2w+1) × n`. Returns the block matrices followed by their mean.
pub fn export_attention<T: Real>(
    model: &LipSyncModel<T>,
    window: &[f64],
    reference: &StyleReference,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<Vec<f64>>> {
    let blocks: Vec<Vec<f64>> = window_attention(model, window, reference)?
        .iter()
        .map(Tensor::to_f64_vec)
        .collect();
    let mut mean = vec![0.0; blocks[0].len()];
    for b in &blocks {
        for (m, w) in mean.iter_mut().zip(b) {
            *m += w / blocks.len() as f64;
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = reference.len();
    let mut files: Vec<(PathBuf, &Vec<f64>)> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (out_dir.join(format!("{stem}_block{i}.csv")), b))
        .collect();
    files.push((out_dir.join(format!("{stem}_mean.csv")), &mean));
    for (path, m) in files {
        write_matrix_csv(&path, m, n)?;
    }
    let mut out = blocks;
    out.push(mean);
    Ok(out)
}

/// Audio features of `clip` regenerated without the additive noise.
pub fn noise_free_audio(clip: &SynthClip) -> Vec<f64> {
    clip.phonemes.iter().flat_map(|&p| phoneme_audio(p as usize)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalityReport {
    pub probes: usize,
    pub hits: usize,
}

impl LocalityReport {
    pub fn rate(&self) -> f64 {
        if self.probes == 0 {
            0.0
        } else {
            self.hits as f64 / self.probes as f64
        }
    }
}

/// For test-region frames whose phoneme occurs in the speaker's `ref_len`-frame
/// style reference, checks whether the reference frame with the largest
/// block-averaged attention from the middle window position carries the same
/// phoneme. Audio is noise-free; at most `per_speaker` frames are probed per speaker.
pub fn locality_probe<T: Real>(model: &LipSyncModel<T>, ds: &Dataset, ref_len: usize, per_speaker: usize) -> Result<LocalityReport> {
    let w = model.dims.window;
    let l = model.dims.window_len();
    let idx: Vec<usize> = (0..ds.clips.len()).collect();
    let parts = parallel_map(&idx, |_, &s| -> Result<LocalityReport> {
        let (clip, split) = (&ds.clips[s], &ds.splits[s]);
        let audio = noise_free_audio(clip);
        let style = split.style.start..split.style.start + ref_len;
        let reference = StyleReference::new(
            audio[style.start * AUDIO_DIM..style.end * AUDIO_DIM].to_vec(),
            clip.mouth[style.start * MOUTH_DIM..style.end * MOUTH_DIM].to_vec(),
        )?;
        let ref_ph = &clip.phonemes[style];
        let t = &split.test;
        let windows = build_windows(&audio[t.start * AUDIO_DIM..t.end * AUDIO_DIM], w);
        let mut report = LocalityReport { probes: 0, hits: 0 };
        for (k, frame) in t.clone().enumerate() {
            if report.probes == per_speaker {
                break;
            }
            let p = clip.phonemes[frame];
            if !ref_ph.contains(&p) {
                continue;
            }
            let blocks = window_attention(model, &windows[k * l * AUDIO_DIM..(k + 1) * l * AUDIO_DIM], &reference)?;
            let mut row = vec![0.0; ref_len];
            for b in &blocks {
                for (r, v) in row.iter_mut().zip(b.row(w)) {
                    *r += v.as_f64();
                }
            }
            let best = (0..ref_len).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            report.probes += 1;
            report.hits += usize::from(ref_ph[best] == p);
        }
        Ok(report)
    });
    let mut total = LocalityReport { probes: 0, hits: 0 };
    for p in parts {
        let p = p?;
        total.probes += p.probes;
        total.hits += p.hits;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lipmotion::{Stage1Dims, StrategyRegistry};
    use crate::rng::{normals, stream};

    #[test]
    fn exported_rows_sum_to_one() {
        let dims = Stage1Dims {
            d_model: 8,
            heads: 2,
            blocks: 2,
            window: 2,
            ref_len: 6,
            ff_mult: 2,
            ref_layers: 1,
            ref_positional: true,
        };
        let model = LipSyncModel::<f64>::new(dims, StrategyRegistry::builtin().get("full").unwrap(), 0).unwrap();
        let mut r = stream(0, "x", 0);
        let window = normals(&mut r, 5 * AUDIO_DIM, 1.0);
        let dir = tempfile::tempdir().unwrap();
        for n in [1, 6] {
            let reference = StyleReference::new(normals(&mut r, n * AUDIO_DIM, 1.0), normals(&mut r, n * MOUTH_DIM, 0.3)).unwrap();
            let mats = export_attention(&model, &window, &reference, dir.path(), &format!("n{n}")).unwrap();
            assert_eq!(mats.len(), 3);
            for m in &mats {
                for row in m.chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    if n == 1 {
                        assert!((row[0] - 1.0).abs() < 1e-12);
                    }
                }
            }
            let text = std::fs::read_to_string(dir.path().join(format!("n{n}_mean.csv"))).unwrap();
            assert_eq!(text.lines().count(), 6);
            assert!(text.starts_with("position,0"));
        }
    }
}
