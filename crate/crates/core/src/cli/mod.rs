//! Run configuration and the command implementations behind the `stylesync` binary.

mod commands;

pub use commands::{cmd_ablate, cmd_attnviz, cmd_eval, cmd_gen_data, cmd_infer, cmd_train, InferOutput};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::container::digest;
use crate::error::{Error, Result};
use crate::lipmotion::{Stage1Dims, Stage1TrainConfig};
use crate::renderer::{RendererDims, Stage2TrainConfig};
use crate::synthworld::DatasetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

/// Everything a command needs; serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DatasetConfig,
    pub stage1: Stage1Dims,
    pub strategy: String,
    pub train1: Stage1TrainConfig,
    pub stage2: RendererDims,
    pub train2: Stage2TrainConfig,
    pub ablation_seeds: Vec<u64>,
    /// Held-out frames rendered per speaker by `eval`.
    pub eval_frames: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            data: DatasetConfig::desk(0),
            stage1: Stage1Dims::desk(),
            strategy: "full".into(),
            train1: Stage1TrainConfig::desk(0),
            stage2: RendererDims::desk(),
            train2: Stage2TrainConfig::desk(0),
            ablation_seeds: vec![0, 1, 2],
            eval_frames: 16,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            profile: Profile::Paper,
            stage1: Stage1Dims::paper(),
            data: DatasetConfig {
                style_ref_len: Stage1Dims::paper().ref_len,
                ..desk.data.clone()
            },
            stage2: RendererDims::paper(),
            ..desk
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Values the paper fixes; a paper-profile config may not change them.
    fn pinned(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.stage1.d_model.to_string()),
            ("heads", self.stage1.heads.to_string()),
            ("blocks", self.stage1.blocks.to_string()),
            ("window", self.stage1.window.to_string()),
            ("ref_len", self.stage1.ref_len.to_string()),
            ("lambda", fmt_f64(self.train1.lambda)),
            ("seg_len", self.train1.seg_len.to_string()),
            ("timesteps", self.stage2.timesteps.to_string()),
            ("ddim_steps", self.stage2.ddim_steps.to_string()),
        ]
    }

    /// Seeds of every stochastic component follow [`RunConfig::seed`].
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train1.seed = seed;
        self.train2.seed = seed;
        self
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, s1, t1, s2, t2) = (&self.data, &self.stage1, &self.train1, &self.stage2, &self.train2);
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        vec![
            ("profile", self.profile.to_string()),
            ("seed", self.seed.to_string()),
            ("num_speakers", d.num_speakers.to_string()),
            ("frames_per_speaker", d.frames_per_speaker.to_string()),
            ("style_ref_len", d.style_ref_len.to_string()),
            ("audio_noise", fmt_f64(d.audio_noise)),
            ("gamma_sweep", d.gamma_sweep.to_string()),
            ("d_model", s1.d_model.to_string()),
            ("heads", s1.heads.to_string()),
            ("blocks", s1.blocks.to_string()),
            ("window", s1.window.to_string()),
            ("ref_len", s1.ref_len.to_string()),
            ("ff_mult", s1.ff_mult.to_string()),
            ("ref_layers", s1.ref_layers.to_string()),
            ("ref_positional", s1.ref_positional.to_string()),
            ("strategy", self.strategy.clone()),
            ("stage1_steps", t1.steps.to_string()),
            ("stage1_batch", t1.batch.to_string()),
            ("seg_len", t1.seg_len.to_string()),
            ("stage1_lr", fmt_f64(t1.lr)),
            ("stage1_lr_floor", fmt_f64(t1.lr_floor)),
            ("lambda", fmt_f64(t1.lambda)),
            ("beta1", fmt_f64(t1.beta1)),
            ("beta2", fmt_f64(t1.beta2)),
            ("unet_c1", s2.c1.to_string()),
            ("unet_c2", s2.c2.to_string()),
            ("unet_heads", s2.heads.to_string()),
            ("time_dim", s2.time_dim.to_string()),
            ("motion_width", s2.motion_width.to_string()),
            ("code_dim", s2.code_dim.to_string()),
            ("timesteps", s2.timesteps.to_string()),
            ("ddim_steps", s2.ddim_steps.to_string()),
            ("stage2_steps", t2.steps.to_string()),
            ("stage2_items", t2.items.to_string()),
            ("stage2_lr", fmt_f64(t2.lr)),
            ("stage2_lr_floor", fmt_f64(t2.lr_floor)),
            ("ablation_seeds", seeds.join(",")),
            ("eval_frames", self.eval_frames.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("value `{value}` for `{key}` does not parse")))
        }
        match key {
            "profile" => self.profile = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "num_speakers" => self.data.num_speakers = p(key, value)?,
            "frames_per_speaker" => self.data.frames_per_speaker = p(key, value)?,
            "style_ref_len" => self.data.style_ref_len = p(key, value)?,
            "audio_noise" => self.data.audio_noise = p(key, value)?,
            "gamma_sweep" => self.data.gamma_sweep = p(key, value)?,
            "d_model" => self.stage1.d_model = p(key, value)?,
            "heads" => self.stage1.heads = p(key, value)?,
            "blocks" => self.stage1.blocks = p(key, value)?,
            "window" => self.stage1.window = p(key, value)?,
            "ref_len" => self.stage1.ref_len = p(key, value)?,
            "ff_mult" => self.stage1.ff_mult = p(key, value)?,
            "ref_layers" => self.stage1.ref_layers = p(key, value)?,
            "ref_positional" => self.stage1.ref_positional = p(key, value)?,
            "strategy" => self.strategy = value.to_string(),
            "stage1_steps" => self.train1.steps = p(key, value)?,
            "stage1_batch" => self.train1.batch = p(key, value)?,
            "seg_len" => self.train1.seg_len = p(key, value)?,
            "stage1_lr" => self.train1.lr = p(key, value)?,
            "stage1_lr_floor" => self.train1.lr_floor = p(key, value)?,
            "lambda" => self.train1.lambda = p(key, value)?,
            "beta1" => {
                self.train1.beta1 = p(key, value)?;
                self.train2.beta1 = self.train1.beta1;
            }
            "beta2" => {
                self.train1.beta2 = p(key, value)?;
                self.train2.beta2 = self.train1.beta2;
            }
            "unet_c1" => self.stage2.c1 = p(key, value)?,
            "unet_c2" => self.stage2.c2 = p(key, value)?,
            "unet_heads" => self.stage2.heads = p(key, value)?,
            "time_dim" => self.stage2.time_dim = p(key, value)?,
            "motion_width" => self.stage2.motion_width = p(key, value)?,
            "code_dim" => self.stage2.code_dim = p(key, value)?,
            "timesteps" => self.stage2.timesteps = p(key, value)?,
            "ddim_steps" => self.stage2.ddim_steps = p(key, value)?,
            "stage2_steps" => self.train2.steps = p(key, value)?,
            "stage2_items" => self.train2.items = p(key, value)?,
            "stage2_lr" => self.train2.lr = p(key, value)?,
            "stage2_lr_floor" => self.train2.lr_floor = p(key, value)?,
            "ablation_seeds" => {
                self.ablation_seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| p(key, s))
                    .collect::<Result<_>>()?
            }
            "eval_frames" => self.eval_frames = p(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the
    /// defaults of `profile`, or of the file's own `profile` key when `None`.
    pub fn parse_with(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {} lacks `=`: `{}`", no + 1, raw.trim())))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(seen, _): &(&str, &str)| *seen == k) {
                return Err(Error::Config(format!("key `{k}` set twice")));
            }
            pairs.push((k, v));
        }
        let file_profile = pairs.iter().find(|(k, _)| *k == "profile").map(|(_, v)| v.parse()).transpose()?;
        let profile = profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut cfg = Self::for_profile(profile);
        let base = cfg.pinned();
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "profile") {
            cfg.set(k, v)?;
        }
        if profile == Profile::Paper {
            for ((key, want), (_, got)) in base.iter().zip(cfg.pinned()) {
                if *want != got {
                    return Err(Error::Config(format!("the paper profile fixes `{key}` = {want}, got {got}")));
                }
            }
        }
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, None)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with(&text, profile)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_speakers", self.data.num_speakers),
            ("d_model", self.stage1.d_model),
            ("heads", self.stage1.heads),
            ("blocks", self.stage1.blocks),
            ("ref_len", self.stage1.ref_len),
            ("stage1_batch", self.train1.batch),
            ("seg_len", self.train1.seg_len),
            ("stage2_items", self.train2.items),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.stage1.ref_len > self.data.style_ref_len {
            return Err(Error::Config(format!(
                "reference length {} exceeds the dataset's style region of {} frames",
                self.stage1.ref_len, self.data.style_ref_len
            )));
        }
        if !(self.train1.lr > 0.0 && self.train2.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        digest(self.to_string().as_bytes())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# stylesync run configuration")?;
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_profile_values() {
        let p = RunConfig::paper();
        assert_eq!((p.stage1.d_model, p.stage1.heads, p.stage1.blocks, p.stage1.window, p.stage1.ref_len), (256, 8, 3, 5, 256));
        assert_eq!(p.train1.lambda, 300.0);
        assert_eq!(p.train1.seg_len, 64);
        assert_eq!((p.stage2.timesteps, p.stage2.ddim_steps), (1000, 200));
        assert_eq!(crate::synthworld::FPS, 25);
        assert_eq!(crate::renderer::ITEM_FRAMES, 5);
        assert!(RunConfig::parse("profile = paper\nheads = 4\n").is_err());
        assert!(RunConfig::parse("profile = paper\nstage1_steps = 10\n").is_ok());
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
        let p = RunConfig::paper();
        assert_eq!(RunConfig::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn comments_overrides_and_errors() {
        let c = RunConfig::parse("# tiny\nseed = 7 # trailing\n\nnum_speakers = 2\n").unwrap();
        assert_eq!((c.seed, c.data.seed, c.train1.seed, c.train2.seed), (7, 7, 7, 7));
        assert_eq!(c.data.num_speakers, 2);
        for bad in ["seed 7", "seed = x", "nope = 1", "seed = 1\nseed = 2", "profile = huge", "heads = 0", "ref_len = 99"] {
            let e = RunConfig::parse(bad).unwrap_err();
            assert_eq!(e.kind(), "config", "{bad}");
        }
        let forced = RunConfig::parse_with("profile = desk\nstage1_steps = 3", Some(Profile::Paper)).unwrap();
        assert_eq!(forced.profile, Profile::Paper);
        assert_eq!(forced.stage1.d_model, 256);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn print_parse_identity(
            seed in any::<u64>(),
            speakers in 1usize..20,
            lr in 1e-6f64..1.0,
            lambda in 0.0f64..1000.0,
            noise in 0.0f64..0.5,
            seeds in proptest::collection::vec(any::<u64>(), 1..5),
            steps in 0usize..100_000,
            positional in any::<bool>(),
        ) {
            let mut c = RunConfig::desk().with_seed(seed);
            c.data.num_speakers = speakers;
            c.train1.lr = lr;
            c.train1.lambda = lambda;
            c.data.audio_noise = noise;
            c.ablation_seeds = seeds;
            c.train2.steps = steps;
            c.stage1.ref_positional = positional;
            prop_assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
        }
    }
}
