//! Synthetic speakers with known phoneme-to-mouth style maps.
//!
//! Audio features depend only on the phoneme (`a_t = M·e(p_t) + η_t`), while
//! mouth parameters depend on the speaker (`W·e(p_t) + b`, then smoothed), so
//! style can only be recovered from a same-speaker reference.

mod dataset;
mod render;

use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::face3dmm::{ID_DIM, MOUTH_DIM, ROT_DIM};
use crate::rng::{derive_seed, normal, normals, stream, StreamRng};

pub use dataset::{
    generate_dataset, load_clip, load_dataset, make_dataset, read_clip, split_for, write_clip, write_ppm,
    Dataset, DatasetConfig, SpeakerSplit, CLIP_MAGIC, CLIP_VERSION, MANIFEST_NAME,
};
pub use render::{frame_to_u8, lip_rings, rasterize_mouth, render_frame, u8_to_image};

pub const PHONEMES: usize = 20;
pub const EMBED_DIM: usize = 8;
pub const AUDIO_DIM: usize = 29;
pub const FPS: u32 = 25;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const FRAME_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const COARTICULATION: f64 = 0.6;
pub const AUDIO_NOISE: f64 = 0.01;
pub const MIN_STYLE_SEPARATION: f64 = 0.2;
pub const MAX_REJECTIONS: usize = 100;
pub const MIN_PHONEME_FRAMES: usize = 2;
pub const MAX_PHONEME_FRAMES: usize = 5;

const WORLD_SEED: u64 = 0x5757_1e5e_ed00_0001;
const STYLE_STD: f64 = 0.05;
const BIAS_STD: f64 = 0.06;
const IDENTITY_STD: f64 = 0.08;

/// Speaker-independent tables shared by every dataset.
#[derive(Debug)]
pub struct WorldTables {
    /// `P × 8` phoneme embeddings.
    pub embeddings: Vec<[f64; EMBED_DIM]>,
    /// Row-major `29 × 8`.
    pub audio_map: Vec<f64>,
    /// Row-major `13 × 8` component every speaker's style map shares.
    pub common_style: Vec<f64>,
}

pub fn world() -> &'static WorldTables {
    static TABLES: OnceLock<WorldTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut rng = stream(WORLD_SEED, "phoneme-embeddings", 0);
        let embeddings = (0..PHONEMES)
            .map(|_| std::array::from_fn(|_| normal(&mut rng)))
            .collect();
        let mut rng = stream(WORLD_SEED, "audio-map", 0);
        let audio_map = normals(&mut rng, AUDIO_DIM * EMBED_DIM, 1.0 / (EMBED_DIM as f64).sqrt());
        let mut rng = stream(WORLD_SEED, "common-style", 0);
        let common_style = normals(&mut rng, MOUTH_DIM * EMBED_DIM, STYLE_STD);
        WorldTables {
            embeddings,
            audio_map,
            common_style,
        }
    })
}

/// Noise-free audio feature of a phoneme.
pub fn phoneme_audio(p: usize) -> [f64; AUDIO_DIM] {
    let t = world();
    let e = &t.embeddings[p];
    std::array::from_fn(|r| (0..EMBED_DIM).map(|c| t.audio_map[r * EMBED_DIM + c] * e[c]).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: u32,
    /// Row-major `13 × 8`.
    pub style_map: Vec<f64>,
    pub style_bias: [f64; MOUTH_DIM],
    pub identity_alpha: Vec<f64>,
    pub appearance: [f64; 6],
}

impl Speaker {
    /// Style target `W·e(p) + b` for one phoneme.
    pub fn target(&self, p: usize) -> [f64; MOUTH_DIM] {
        let e = &world().embeddings[p];
        std::array::from_fn(|r| {
            self.style_bias[r] + (0..EMBED_DIM).map(|c| self.style_map[r * EMBED_DIM + c] * e[c]).sum::<f64>()
        })
    }

    pub fn skin(&self) -> [f64; 3] {
        [self.appearance[0], self.appearance[1], self.appearance[2]]
    }

    pub fn hair(&self) -> [f64; 3] {
        [self.appearance[3], self.appearance[4], self.appearance[5]]
    }
}

/// `‖W_a − W_b‖ / max(‖W_a‖, ‖W_b‖)` (Frobenius).
pub fn style_separation(a: &Speaker, b: &Speaker) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.style_map.iter().zip(&b.style_map).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(&a.style_map).max(norm(&b.style_map)).max(1e-12)
}

pub fn sample_speaker(seed: u64) -> Speaker {
    let mut rng = stream(seed, "speaker", 0);
    let common = &world().common_style;
    let style_map = common.iter().map(|c| c + STYLE_STD * normal(&mut rng)).collect();
    let style_bias = std::array::from_fn(|_| BIAS_STD * normal(&mut rng));
    let identity_alpha = normals(&mut rng, ID_DIM, IDENTITY_STD);
    let lo = [0.55, 0.35, 0.25, 0.05, 0.05, 0.05];
    let appearance = std::array::from_fn(|i| lo[i] + 0.4 * rng.random::<f64>());
    Speaker {
        id: 0,
        style_map,
        style_bias,
        identity_alpha,
        appearance,
    }
}

/// Draws `count` speakers, rejecting candidates too close in style to earlier ones.
pub fn sample_speakers(seed: u64, count: usize) -> Result<Vec<Speaker>> {
    let mut out: Vec<Speaker> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = None;
        for attempt in 0..MAX_REJECTIONS {
            let mut cand = sample_speaker(derive_seed(seed, "speaker-candidate", (i * MAX_REJECTIONS + attempt) as u64));
            cand.id = i as u32;
            if out.iter().all(|s| style_separation(s, &cand) >= MIN_STYLE_SEPARATION) {
                accepted = Some(cand);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            Error::Generation(format!("speaker {i}: style separation unreachable in {MAX_REJECTIONS} draws"))
        })?);
    }
    Ok(out)
}

/// Phoneme ids held for 2 to 5 frames each, never repeating back to back.
pub fn phoneme_stream(rng: &mut StreamRng, len: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(len);
    let mut prev = usize::MAX;
    while out.len() < len {
        let mut p = rng.random_range(0..PHONEMES - 1);
        if prev != usize::MAX && p >= prev {
            p += 1;
        }
        let hold = rng.random_range(MIN_PHONEME_FRAMES..=MAX_PHONEME_FRAMES);
        out.extend(std::iter::repeat_n(p as u16, hold.min(len - out.len())));
        prev = p;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub speaker_id: u32,
    pub phonemes: Vec<u16>,
    /// Row-major `T × 29`.
    pub audio: Vec<f64>,
    /// Row-major `T × 13`.
    pub mouth: Vec<f64>,
    /// Row-major `T × 3`.
    pub gamma: Vec<f64>,
    /// `T` frames of `32 × 32` interleaved RGB; empty when not rendered.
    pub frames: Vec<u8>,
    pub fps: u32,
}

impl SynthClip {
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn audio_frame(&self, t: usize) -> &[f64] {
        &self.audio[t * AUDIO_DIM..(t + 1) * AUDIO_DIM]
    }

    pub fn mouth_frame(&self, t: usize) -> &[f64] {
        &self.mouth[t * MOUTH_DIM..(t + 1) * MOUTH_DIM]
    }

    pub fn gamma_frame(&self, t: usize) -> [f64; ROT_DIM] {
        [self.gamma[3 * t], self.gamma[3 * t + 1], self.gamma[3 * t + 2]]
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t * FRAME_BYTES..(t + 1) * FRAME_BYTES]
    }

    pub fn has_frames(&self) -> bool {
        !self.frames.is_empty()
    }

    /// Rounds every float stream to 32-bit precision, matching the on-disk record.
    pub fn quantize(&mut self) {
        for v in self.audio.iter_mut().chain(self.mouth.iter_mut()).chain(self.gamma.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// Audio features and mouth parameters for a phoneme sequence; noise is
/// `(seed, sigma)` or `None` for clean audio.
pub fn synth_utterance(speaker: &Speaker, phonemes: &[u16], noise: Option<(u64, f64)>) -> Result<SynthClip> {
    if let Some(&bad) = phonemes.iter().find(|&&p| p as usize >= PHONEMES) {
        return Err(Error::Invalid(format!("phoneme id {bad} outside 0..{PHONEMES}")));
    }
    let mut noise_rng = noise.map(|(seed, sigma)| (stream(seed, "audio-noise", speaker.id as u64), sigma));
    let mut audio = Vec::with_capacity(phonemes.len() * AUDIO_DIM);
    let mut mouth = Vec::with_capacity(phonemes.len() * MOUTH_DIM);
    let mut state = [0.0; MOUTH_DIM];
    for &p in phonemes {
        let clean = phoneme_audio(p as usize);
        match noise_rng.as_mut() {
            Some((rng, sigma)) => audio.extend(clean.iter().map(|a| a + *sigma * normal(rng))),
            None => audio.extend_from_slice(&clean),
        }
        let target = speaker.target(p as usize);
        for (s, t) in state.iter_mut().zip(target) {
            *s = COARTICULATION * *s + (1.0 - COARTICULATION) * t;
        }
        mouth.extend_from_slice(&state);
    }
    Ok(SynthClip {
        speaker_id: speaker.id,
        phonemes: phonemes.to_vec(),
        audio,
        mouth,
        gamma: vec![0.0; phonemes.len() * ROT_DIM],
        frames: Vec::new(),
        fps: FPS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speakers_are_reproducible_and_separated() {
        assert_eq!(sample_speaker(5), sample_speaker(5));
        let speakers: Vec<_> = (0..8).map(sample_speaker).collect();
        for i in 0..8 {
            for j in 0..i {
                assert!(style_separation(&speakers[i], &speakers[j]) >= MIN_STYLE_SEPARATION);
                assert_ne!(speakers[i].appearance, speakers[j].appearance);
            }
        }
        let drawn = sample_speakers(0, 8).unwrap();
        assert_eq!(drawn.iter().map(|s| s.id).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn phoneme_stream_durations() {
        let mut rng = stream(1, "test", 0);
        let ids = phoneme_stream(&mut rng, 5000);
        assert_eq!(ids.len(), 5000);
        let mut runs = vec![];
        let mut start = 0;
        for t in 1..=ids.len() {
            if t == ids.len() || ids[t] != ids[start] {
                runs.push(t - start);
                start = t;
            }
        }
        let last = runs.pop().unwrap();
        assert!(last <= MAX_PHONEME_FRAMES);
        assert!(runs.iter().all(|&r| (MIN_PHONEME_FRAMES..=MAX_PHONEME_FRAMES).contains(&r)));
        assert!(ids.iter().all(|&p| (p as usize) < PHONEMES));
    }

    #[test]
    fn audio_ignores_speaker_mouth_does_not() {
        let a = sample_speaker(1);
        let b = sample_speaker(2);
        let ids: Vec<u16> = (0..40).map(|t| (t / 3 % PHONEMES) as u16).collect();
        let ca = synth_utterance(&a, &ids, None).unwrap();
        let cb = synth_utterance(&b, &ids, None).unwrap();
        assert_eq!(ca.audio, cb.audio);
        assert_ne!(ca.mouth, cb.mouth);
    }

    #[test]
    fn constant_stream_converges_geometrically() {
        let s = sample_speaker(3);
        let ids = vec![7u16; 30];
        let clip = synth_utterance(&s, &ids, None).unwrap();
        let target = s.target(7);
        for t in 0..30 {
            let expected_gap = COARTICULATION.powi(t as i32 + 1);
            for (k, &tk) in target.iter().enumerate() {
                let gap = clip.mouth_frame(t)[k] - tk;
                assert!((gap + expected_gap * tk).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_distance_tracks_embedding_gap() {
        let s = sample_speaker(4);
        let ids: Vec<u16> = (0..PHONEMES as u16).collect();
        let clip = synth_utterance(&s, &ids, Some((9, AUDIO_NOISE))).unwrap();
        let tables = world();
        for p in 0..PHONEMES {
            for q in 0..p {
                let dist = (0..AUDIO_DIM)
                    .map(|r| (clip.audio_frame(p)[r] - clip.audio_frame(q)[r]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let gap: Vec<f64> = (0..EMBED_DIM).map(|c| tables.embeddings[p][c] - tables.embeddings[q][c]).collect();
                let clean = (0..AUDIO_DIM)
                    .map(|r| (0..EMBED_DIM).map(|c| tables.audio_map[r * EMBED_DIM + c] * gap[c]).sum::<f64>().powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - clean).abs() <= 3.0 * AUDIO_NOISE * (AUDIO_DIM as f64).sqrt());
            }
        }
    }

    #[test]
    fn rejects_unknown_phoneme() {
        assert!(synth_utterance(&sample_speaker(0), &[PHONEMES as u16], None).is_err());
    }
}
