//! Dataset generation and the on-disk layout.
//!
//! A dataset directory holds `manifest.txt` (flat `key = value` lines plus one
//! `clip = ...` line per speaker) and one binary record per speaker. Records
//! are little-endian:
//!
//! ```text
//! magic "SSCL" | version u32 | speaker id u32 | frames T u32 | fps u32
//! audio dim u32 | mouth dim u32 | height u32 | width u32 | has frames u8
//! style map f64 × 13·8 | style bias f64 × 13 | identity f64 × 80 | appearance f64 × 6
//! phoneme ids u16 × T
//! audio f32 × T·29 | mouth f32 × T·13 | rotation f32 × T·3
//! frames u8 × T·32·32·3 (interleaved RGB, rows top to bottom; only if has frames)
//! ```

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use super::{
    phoneme_stream, render_frame, sample_speakers, synth_utterance, Speaker, SynthClip, AUDIO_DIM, AUDIO_NOISE,
    EMBED_DIM, FPS, FRAME_BYTES, IMAGE_SIZE,
};
use crate::error::{Error, Result};
use crate::face3dmm::{make_synthetic_basis, FaceBasis, MouthParams, DESK_LIP_FRACTION, DESK_VERTICES, ID_DIM, MOUTH_DIM, ROT_DIM};
use crate::rng::{derive_seed, stream};
use crate::synthworld::frame_to_u8;
use crate::workers::parallel_map;

pub const CLIP_MAGIC: &[u8; 4] = b"SSCL";
pub const CLIP_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_FORMAT: u32 = 1;
const EVAL_MIN_FRAMES: usize = 64;
const GAMMA_SWEEP_AMPLITUDE: f64 = 0.05;
const GAMMA_SWEEP_PERIOD: f64 = 200.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_speakers: usize,
    pub frames_per_speaker: usize,
    pub seed: u64,
    pub style_ref_len: usize,
    pub audio_noise: f64,
    pub gamma_sweep: bool,
    pub render_frames: bool,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            num_speakers: 8,
            frames_per_speaker: 2048,
            seed,
            style_ref_len: 32,
            audio_noise: AUDIO_NOISE,
            gamma_sweep: false,
            render_frames: true,
        }
    }
}

/// Per-speaker frame ranges: training, style reference, and held-out test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerSplit {
    pub train: Range<usize>,
    pub style: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_for(frames: usize, style_ref_len: usize) -> Result<SpeakerSplit> {
    if style_ref_len == 0 || frames < 2 * (style_ref_len + EVAL_MIN_FRAMES) {
        return Err(Error::Config(format!(
            "{frames} frames per speaker cannot host disjoint style references of {style_ref_len} frames; need at least {}",
            2 * (style_ref_len.max(1) + EVAL_MIN_FRAMES)
        )));
    }
    let style = style_ref_len.max(frames / 8);
    let test = EVAL_MIN_FRAMES.max(frames / 8);
    let train = frames - style - test;
    Ok(SpeakerSplit {
        train: 0..train,
        style: train..train + style,
        test: train + style..frames,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub basis: FaceBasis,
    pub speakers: Vec<Speaker>,
    pub clips: Vec<SynthClip>,
    pub splits: Vec<SpeakerSplit>,
}

impl Dataset {
    pub fn basis_seed(seed: u64) -> u64 {
        derive_seed(seed, "basis", 0)
    }
}

fn make_clip(cfg: &DatasetConfig, basis: &FaceBasis, speaker: &Speaker) -> Result<SynthClip> {
    let mut rng = stream(cfg.seed, "phonemes", speaker.id as u64);
    let ids = phoneme_stream(&mut rng, cfg.frames_per_speaker);
    let noise = (cfg.audio_noise > 0.0).then_some((cfg.seed, cfg.audio_noise));
    let mut clip = synth_utterance(speaker, &ids, noise)?;
    if cfg.gamma_sweep {
        let phase = speaker.id as f64;
        for t in 0..clip.len() {
            clip.gamma[3 * t + 2] =
                GAMMA_SWEEP_AMPLITUDE * (2.0 * std::f64::consts::PI * t as f64 / GAMMA_SWEEP_PERIOD + phase).sin();
        }
    }
    clip.quantize();
    if cfg.render_frames {
        let mut frames = Vec::with_capacity(clip.len() * FRAME_BYTES);
        for t in 0..clip.len() {
            let m = MouthParams::from_slice(clip.mouth_frame(t))?;
            frames.extend(frame_to_u8(&render_frame(speaker, &m, clip.gamma_frame(t), basis)?));
        }
        clip.frames = frames;
    }
    Ok(clip)
}

/// Builds a dataset in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.num_speakers == 0 {
        return Err(Error::Config("dataset needs at least one speaker".into()));
    }
    let split = split_for(cfg.frames_per_speaker, cfg.style_ref_len)?;
    let basis = make_synthetic_basis(Dataset::basis_seed(cfg.seed), DESK_VERTICES, DESK_LIP_FRACTION)?;
    let speakers = sample_speakers(cfg.seed, cfg.num_speakers)?;
    let clips = parallel_map(&speakers, |_, s| make_clip(cfg, &basis, s)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        basis,
        splits: vec![split; speakers.len()],
        speakers,
        clips,
    })
}

fn clip_name(id: u32) -> String {
    format!("spk{id:03}.clip")
}

fn range_text(r: &Range<usize>) -> String {
    format!("{}..{}", r.start, r.end)
}

fn manifest_text(ds: &Dataset) -> String {
    let c = &ds.config;
    let mut s = String::new();
    s.push_str("# stylesync synthetic dataset\n");
    let _ = writeln!(s, "format = {MANIFEST_FORMAT}");
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "speakers = {}", c.num_speakers);
    let _ = writeln!(s, "frames_per_speaker = {}", c.frames_per_speaker);
    let _ = writeln!(s, "style_ref_len = {}", c.style_ref_len);
    let _ = writeln!(s, "audio_noise = {}", c.audio_noise);
    let _ = writeln!(s, "gamma_sweep = {}", c.gamma_sweep);
    let _ = writeln!(s, "render_frames = {}", c.render_frames);
    let _ = writeln!(s, "fps = {FPS}");
    for (clip, split) in ds.clips.iter().zip(&ds.splits) {
        let _ = writeln!(
            s,
            "clip = {} {} train={} style={} test={}",
            clip.speaker_id,
            clip_name(clip.speaker_id),
            range_text(&split.train),
            range_text(&split.style),
            range_text(&split.test)
        );
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Generates a dataset and writes it to `out_dir`.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (speaker, clip) in ds.speakers.iter().zip(&ds.clips) {
        let path = out_dir.join(clip_name(clip.speaker_id));
        std::fs::write(&path, write_clip(speaker, clip)).map_err(io_err(&path))?;
    }
    let path = out_dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest_text(&ds)).map_err(io_err(&path))?;
    Ok(ds)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_clip(speaker: &Speaker, clip: &SynthClip) -> Vec<u8> {
    let t = clip.len();
    let mut out = Vec::with_capacity(64 + t * (2 + 4 * (AUDIO_DIM + MOUTH_DIM + ROT_DIM)) + clip.frames.len());
    out.extend_from_slice(CLIP_MAGIC);
    for v in [
        CLIP_VERSION,
        clip.speaker_id,
        t as u32,
        clip.fps,
        AUDIO_DIM as u32,
        MOUTH_DIM as u32,
        IMAGE_SIZE as u32,
        IMAGE_SIZE as u32,
    ] {
        put_u32(&mut out, v);
    }
    out.push(clip.has_frames() as u8);
    for v in speaker
        .style_map
        .iter()
        .chain(&speaker.style_bias)
        .chain(&speaker.identity_alpha)
        .chain(&speaker.appearance)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &clip.phonemes {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for v in clip.audio.iter().chain(&clip.mouth).chain(&clip.gamma) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&clip.frames);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("clip record truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn read_clip(bytes: &[u8]) -> Result<(Speaker, SynthClip)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CLIP_MAGIC {
        return Err(Error::Format("not a clip record (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CLIP_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CLIP_VERSION,
        });
    }
    let speaker_id = r.u32()?;
    let t = r.u32()? as usize;
    let fps = r.u32()?;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    if dims != [AUDIO_DIM as u32, MOUTH_DIM as u32, IMAGE_SIZE as u32, IMAGE_SIZE as u32] {
        return Err(Error::Format(format!("clip dimensions {dims:?} unsupported")));
    }
    let has_frames = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad frame flag {other}"))),
    };
    let style_map = r.f64s(MOUTH_DIM * EMBED_DIM)?;
    let style_bias: [f64; MOUTH_DIM] = r.f64s(MOUTH_DIM)?.try_into().unwrap();
    let identity_alpha = r.f64s(ID_DIM)?;
    let appearance: [f64; 6] = r.f64s(6)?.try_into().unwrap();
    let phonemes: Vec<u16> = r.take(2 * t)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let audio = r.f32s(t * AUDIO_DIM)?;
    let mouth = r.f32s(t * MOUTH_DIM)?;
    let gamma = r.f32s(t * ROT_DIM)?;
    let frames = if has_frames { r.take(t * FRAME_BYTES)?.to_vec() } else { Vec::new() };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after clip record", bytes.len() - r.pos)));
    }
    let speaker = Speaker {
        id: speaker_id,
        style_map,
        style_bias,
        identity_alpha,
        appearance,
    };
    let clip = SynthClip {
        speaker_id,
        phonemes,
        audio,
        mouth,
        gamma,
        frames,
        fps,
    };
    Ok((speaker, clip))
}

pub fn load_clip(path: &Path) -> Result<(Speaker, SynthClip)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    read_clip(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_range(text: &str) -> Option<Range<usize>> {
    let (a, b) = text.split_once("..")?;
    Some(a.parse().ok()?..b.parse().ok()?)
}

fn manifest_value<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
}

fn parse_field<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    manifest_value(pairs, key)?
        .parse()
        .map_err(|_| Error::Format(format!("manifest field `{key}` is malformed")))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    if !text.starts_with("# stylesync synthetic dataset") {
        return Err(Error::Format(format!("{} is not a dataset manifest", path.display())));
    }
    let mut pairs = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line `{line}` lacks `=`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let format: u32 = parse_field(&pairs, "format")?;
    if format != MANIFEST_FORMAT {
        return Err(Error::Version {
            found: format,
            expected: MANIFEST_FORMAT,
        });
    }
    let config = DatasetConfig {
        num_speakers: parse_field(&pairs, "speakers")?,
        frames_per_speaker: parse_field(&pairs, "frames_per_speaker")?,
        seed: parse_field(&pairs, "seed")?,
        style_ref_len: parse_field(&pairs, "style_ref_len")?,
        audio_noise: parse_field(&pairs, "audio_noise")?,
        gamma_sweep: parse_field(&pairs, "gamma_sweep")?,
        render_frames: parse_field(&pairs, "render_frames")?,
    };
    let basis = make_synthetic_basis(Dataset::basis_seed(config.seed), DESK_VERTICES, DESK_LIP_FRACTION)?;
    let mut speakers = Vec::new();
    let mut clips = Vec::new();
    let mut splits = Vec::new();
    for (_, v) in pairs.iter().filter(|(k, _)| k == "clip") {
        let bad = || Error::Format(format!("manifest clip line `{v}` is malformed"));
        let parts: Vec<&str> = v.split_whitespace().collect();
        let [id, file, train, style, test] = parts[..] else {
            return Err(bad());
        };
        let range = |s: &str, key: &str| s.strip_prefix(key).and_then(parse_range).ok_or_else(bad);
        let split = SpeakerSplit {
            train: range(train, "train=")?,
            style: range(style, "style=")?,
            test: range(test, "test=")?,
        };
        let id: u32 = id.parse().map_err(|_| bad())?;
        let (speaker, clip) = load_clip(&dir.join(file))?;
        if speaker.id != id || clip.len() != config.frames_per_speaker || split.test.end != clip.len() {
            return Err(Error::Format(format!("clip {file} disagrees with the manifest")));
        }
        speakers.push(speaker);
        clips.push(clip);
        splits.push(split);
    }
    if speakers.len() != config.num_speakers {
        return Err(Error::Format(format!(
            "manifest lists {} clips for {} speakers",
            speakers.len(),
            config.num_speakers
        )));
    }
    Ok(Dataset {
        config,
        basis,
        speakers,
        clips,
        splits,
    })
}

/// Writes interleaved RGB bytes as a binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(io_err(path))
}
