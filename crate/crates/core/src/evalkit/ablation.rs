//! Variant training and the ablation table.

use std::fmt;

use super::{eval_stage1, median};
use crate::error::{Error, Result};
use crate::lipmotion::{train_stage1, LipSyncModel, Stage1Dims, Stage1TrainConfig, StrategyRegistry};
use crate::synthworld::{generate_dataset, Dataset, DatasetConfig};
use crate::workers::parallel_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoRefAudio,
    NoVertices,
    NoRef,
}

impl Variant {
    pub const TRAINED: [Variant; 4] = [Variant::Full, Variant::NoRefAudio, Variant::NoVertices, Variant::NoRef];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRefAudio => "norefaudio",
            Variant::NoVertices => "novertices",
            Variant::NoRef => "noref",
        }
    }

    pub fn strategy(self) -> &'static str {
        match self {
            Variant::Full | Variant::NoVertices => "full",
            Variant::NoRefAudio => "norefaudio",
            Variant::NoRef => "noref",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Trains one variant from scratch; the seed drives both initialization and batching.
pub fn train_variant(ds: &Dataset, variant: Variant, dims: &Stage1Dims, cfg: &Stage1TrainConfig) -> Result<LipSyncModel<f32>> {
    let strategy = StrategyRegistry::builtin().get(variant.strategy())?;
    let mut model = LipSyncModel::new(dims.clone(), strategy, cfg.seed)?;
    let mut cfg = cfg.clone();
    if variant == Variant::NoVertices {
        cfg.lambda = 0.0;
    }
    train_stage1(&mut model, ds, &cfg)?;
    Ok(model)
}

/// Row order of the table: reference-audio, vertices-loss and no-reference
/// ablations, then the inference-time reference-length sweep ending at the full model.
pub const ABLATION_ORDER: [&str; 3] = ["norefaudio", "novertices", "noref"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Mean LipLMD over speakers, one per seed; NaN where training diverged.
    pub values: Vec<f64>,
    pub status: String,
}

impl AblationRow {
    pub fn median(&self) -> f64 {
        let ok: Vec<f64> = self.values.iter().copied().filter(|v| v.is_finite()).collect();
        median(&ok)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,median_lip_lmd");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",status\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?}", r.variant, r.median()));
            for v in &r.values {
                out.push_str(&format!(",{v:?}"));
            }
            out.push_str(&format!(",{}\n", r.status));
        }
        out
    }
}

/// Reference lengths of the inference-time sweep: quarter, half and full `n`.
pub fn sweep_lengths(ref_len: usize) -> [usize; 3] {
    [(ref_len / 4).max(1), (ref_len / 2).max(1), ref_len]
}

pub struct AblationOutcome {
    pub table: AblationTable,
    /// Trained full models, one per seed (absent where training diverged).
    pub full_models: Vec<Option<LipSyncModel<f32>>>,
}

struct Job {
    seed: u64,
    variant: Variant,
}

struct JobResult {
    values: Vec<f64>,
    status: String,
    model: Option<LipSyncModel<f32>>,
}

/// Trains every variant for every seed (dataset, initialization and batching
/// all follow the seed) and tabulates mean test LipLMD. Divergence is recorded
/// in the status column rather than aborting.
pub fn run_ablation(data: &DatasetConfig, dims: &Stage1Dims, train: &Stage1TrainConfig, seeds: &[u64]) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let datasets = seeds
        .iter()
        .map(|&seed| {
            generate_dataset(&DatasetConfig {
                seed,
                render_frames: false,
                ..data.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<Job> = seeds
        .iter()
        .flat_map(|&seed| Variant::TRAINED.map(|variant| Job { seed, variant }))
        .collect();
    let sweep = sweep_lengths(dims.ref_len);
    let results = parallel_map(&jobs, |i, job| -> Result<JobResult> {
        let ds = &datasets[i / Variant::TRAINED.len()];
        let cfg = Stage1TrainConfig {
            seed: job.seed,
            ..train.clone()
        };
        match train_variant(ds, job.variant, dims, &cfg) {
            Ok(model) => {
                let lengths: Vec<usize> = if job.variant == Variant::Full { sweep.to_vec() } else { vec![dims.ref_len] };
                let values = lengths
                    .iter()
                    .map(|&n| Ok(mean(&eval_stage1(&model, ds, n)?)))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(JobResult {
                    values,
                    status: "ok".into(),
                    model: (job.variant == Variant::Full).then_some(model),
                })
            }
            Err(Error::Diverged { step, .. }) => Ok(JobResult {
                values: vec![f64::NAN; if job.variant == Variant::Full { 3 } else { 1 }],
                status: format!("diverged at step {step}"),
                model: None,
            }),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<AblationRow> = ABLATION_ORDER
        .iter()
        .map(|v| AblationRow {
            variant: v.to_string(),
            values: Vec::new(),
            status: String::new(),
        })
        .chain(sweep.iter().map(|n| AblationRow {
            variant: format!("n{n}"),
            values: Vec::new(),
            status: String::new(),
        }))
        .collect();
    let mut full_models = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let targets: Vec<usize> = match job.variant {
            Variant::NoRefAudio => vec![0],
            Variant::NoVertices => vec![1],
            Variant::NoRef => vec![2],
            Variant::Full => vec![3, 4, 5],
        };
        for (&row, v) in targets.iter().zip(&res.values) {
            rows[row].values.push(*v);
            if res.status != "ok" || rows[row].status.is_empty() {
                rows[row].status = res.status.clone();
            }
        }
        if job.variant == Variant::Full {
            full_models.push(res.model);
        }
    }
    Ok(AblationOutcome {
        table: AblationTable {
            seeds: seeds.to_vec(),
            rows,
        },
        full_models,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_ablation_row_order() {
        let data = DatasetConfig {
            num_speakers: 2,
            frames_per_speaker: 200,
            style_ref_len: 8,
            ..DatasetConfig::desk(0)
        };
        let dims = Stage1Dims {
            d_model: 8,
            heads: 2,
            blocks: 1,
            window: 1,
            ref_len: 8,
            ff_mult: 2,
            ref_layers: 1,
            ref_positional: true,
        };
        let train = Stage1TrainConfig {
            steps: 2,
            batch: 1,
            seg_len: 8,
            ..Stage1TrainConfig::desk(0)
        };
        let out = run_ablation(&data, &dims, &train, &[0, 1]).unwrap();
        let labels: Vec<&str> = out.table.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(labels, ["norefaudio", "novertices", "noref", "n2", "n4", "n8"]);
        assert!(out.table.rows.iter().all(|r| r.values.len() == 2 && r.status == "ok"));
        assert_eq!(out.full_models.len(), 2);
        let csv = out.table.to_csv();
        assert!(csv.starts_with("variant,median_lip_lmd,seed_0,seed_1,status\nnorefaudio,"));
        assert!(run_ablation(&data, &dims, &train, &[]).is_err());
    }
}
