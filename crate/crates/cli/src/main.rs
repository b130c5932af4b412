use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stylesync::cli::{cmd_ablate, cmd_attnviz, cmd_eval, cmd_gen_data, cmd_infer, cmd_train, Profile, RunConfig};
use stylesync::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    GenData,
    Train,
    Infer,
    Eval,
    Ablate,
    AttnViz,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

/// Style-preserving lip sync on synthetic speakers.
#[derive(Debug, Parser)]
#[command(name = "stylesync", version)]
struct Cli {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory (defaults under `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Dataset directory (defaults to `data_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    ckpt1: Option<PathBuf>,
    #[arg(long)]
    ckpt2: Option<PathBuf>,
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Query frame for attn-viz.
    #[arg(long)]
    frame: Option<usize>,
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn run(cli: &Cli) -> Result<String> {
    let profile = cli.profile.map(|p| match p {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    });
    let mut cfg = RunConfig::load(&cli.config, profile)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| cfg.out_dir.join(default));
    let data = cli.data.clone().unwrap_or_else(|| cfg.data_dir.clone());
    Ok(match cli.command {
        Command::GenData => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let ds = cmd_gen_data(&cfg, &dir)?;
            format!("wrote {} clips to {}", ds.clips.len(), dir.display())
        }
        Command::Train => {
            let stage = cli.stage.ok_or_else(|| Error::Config("--stage is required for train".into()))?;
            let path = cmd_train(&cfg, stage, &data, &out(&format!("stage{stage}.ckpt")))?;
            format!("wrote {}", path.display())
        }
        Command::Infer => {
            let dir = out("infer");
            let r = cmd_infer(&cfg, need(&cli.ckpt1, "ckpt1")?, need(&cli.ckpt2, "ckpt2")?, need(&cli.clip, "clip")?, &dir)?;
            format!("wrote {} frames to {}", r.frames, dir.display())
        }
        Command::Eval => {
            let path = out("metrics.csv");
            let report = cmd_eval(&cfg, need(&cli.ckpt1, "ckpt1")?, cli.ckpt2.as_deref(), &data, &path)?;
            format!("mean lip_lmd {:.6} -> {}", report.aggregate().lip_lmd, path.display())
        }
        Command::Ablate => {
            let path = out("ablation.csv");
            let table = cmd_ablate(&cfg, &path)?;
            format!("wrote {} rows to {}", table.rows.len(), path.display())
        }
        Command::AttnViz => {
            let dir = out("attention");
            let files = cmd_attnviz(need(&cli.ckpt1, "ckpt1")?, need(&cli.clip, "clip")?, cli.frame, &dir)?;
            format!("wrote {} attention matrices to {}", files.len(), dir.display())
        }
    })
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error kind=usage detail={}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error kind={} detail={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
