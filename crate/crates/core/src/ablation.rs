//! Desk-scale versions of the architecture comparisons: multi-scale
//! structures, parameter sharing, resampling methods, pyramid shapes and
//! evaluation-time pyramid mismatch.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{synthetic_corpus, Corpus};
use crate::error::{Result, ScnError};
use crate::eval::{evaluate, EvalOptions};
use crate::model::{config_param_count, match_budget, ModelConfig, Task, Variant};
use crate::ratio::Ratio;
use crate::resample::ResamplerKind;
use crate::train::{train, TrainConfig, TrainData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Structures,
    Sharing,
    Resampling,
    Scales,
    EvalScales,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Structures,
        Experiment::Sharing,
        Experiment::Resampling,
        Experiment::Scales,
        Experiment::EvalScales,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Structures => "structures",
            Experiment::Sharing => "sharing",
            Experiment::Resampling => "resampling",
            Experiment::Scales => "scales",
            Experiment::EvalScales => "eval-scales",
        }
    }
}

impl FromStr for Experiment {
    type Err = ScnError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                ScnError::config(format!(
                    "unknown experiment '{s}' (expected structures, sharing, resampling, scales or eval-scales)"
                ))
            })
    }
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic { count: usize, size: usize, seed: u64 },
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    /// Reference architecture; every arm is derived from it.
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSource,
    /// Images held out for scoring.
    pub held_out: usize,
}

impl AblationSettings {
    /// A small x2 super-resolution setup that finishes in minutes on one core.
    pub fn desk_scale() -> Self {
        AblationSettings {
            base: ModelConfig {
                task: Task::SuperResolution { factor: 2 },
                n_scales: 2,
                ratio: Ratio::HALF,
                n_blocks: 4,
                width: 12,
                width_mult: 4,
                k: 1,
                resampler: ResamplerKind::Bilinear,
                variant: Variant::ScnShared,
                in_channels: 3,
            },
            train: TrainConfig {
                epochs: 1,
                patches_per_image: 1000,
                patch: 12,
                batch: 8,
                max_steps: Some(600),
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            corpus: CorpusSource::Synthetic {
                count: 20,
                size: 48,
                seed: 2024,
            },
            held_out: 5,
        }
    }

    fn corpus(&self) -> Result<(Corpus, Corpus)> {
        let all = match &self.corpus {
            CorpusSource::Synthetic { count, size, seed } => {
                synthetic_corpus(*count, *size, *size, self.base.in_channels, *seed)
            }
            CorpusSource::Dir(dir) => Corpus::from_dir(dir, self.base.in_channels)?,
        };
        if self.held_out == 0 || self.held_out >= all.len() {
            return Err(ScnError::config(format!(
                "held_out must be between 1 and {} for {} images",
                all.len().saturating_sub(1),
                all.len()
            )));
        }
        let mut images = all.images;
        let val = images.split_off(images.len() - self.held_out);
        Ok((Corpus { images }, Corpus { images: val }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    pub psnr_per_seed: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub experiment: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,params,mean_psnr_db,mean_ssim,psnr_per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.psnr_per_seed.iter().map(|p| format!("{p:.4}")).collect();
            s.push_str(&format!(
                "{},{},{:.4},{:.6},{}\n",
                r.label,
                r.params,
                r.mean_psnr,
                r.mean_ssim,
                per.join(" ")
            ));
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.experiment)?;
        writeln!(f, "{:<28} {:>9} {:>10} {:>8}", "arm", "params", "psnr_db", "ssim")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:>9} {:>10.4} {:>8.4}", r.label, r.params, r.mean_psnr, r.mean_ssim)?;
        }
        Ok(())
    }
}

/// One training configuration scored under one or more evaluation settings.
pub struct Arm {
    pub cfg: ModelConfig,
    /// `(label, options)` pairs; each becomes a row.
    pub evals: Vec<(String, EvalOptions)>,
}

impl Arm {
    pub fn new(label: impl Into<String>, cfg: ModelConfig) -> Self {
        Arm {
            cfg,
            evals: vec![(label.into(), EvalOptions::default())],
        }
    }
}

/// Trains every arm once per seed and scores it on the held-out images.
pub fn run_arms(settings: &AblationSettings, name: &str, arms: &[Arm]) -> Result<AblationTable> {
    if settings.seeds.is_empty() {
        return Err(ScnError::config("ablations need at least one seed"));
    }
    let (train_set, held_out) = settings.corpus()?;
    let mut rows = Vec::new();
    for arm in arms {
        let params = config_param_count(&arm.cfg)?;
        let mut scores: Vec<Vec<(f64, f64)>> = vec![Vec::new(); arm.evals.len()];
        for &seed in &settings.seeds {
            let tcfg = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let data = TrainData::from_corpus(&arm.cfg, &tcfg, &train_set, &held_out)?;
            let outcome = train(&arm.cfg, &tcfg, &data, None)?;
            for (i, (label, opts)) in arm.evals.iter().enumerate() {
                let report = evaluate(&arm.cfg, &outcome.weights, &data.val, opts)?;
                log::info!("{name}: {label} seed {seed}: {:.4} dB", report.mean_psnr);
                scores[i].push((report.mean_psnr, report.mean_ssim));
            }
        }
        for ((label, _), s) in arm.evals.iter().zip(scores) {
            let n = s.len() as f64;
            rows.push(AblationRow {
                label: label.clone(),
                params,
                psnr_per_seed: s.iter().map(|p| p.0).collect(),
                mean_psnr: s.iter().map(|p| p.0).sum::<f64>() / n,
                mean_ssim: s.iter().map(|p| p.1).sum::<f64>() / n,
            });
        }
    }
    Ok(AblationTable {
        experiment: name.to_string(),
        rows,
    })
}

/// `base` re-shaped as `variant` with its width matched to `budget` parameters.
pub fn budget_matched(base: &ModelConfig, variant: Variant, budget: usize) -> Result<ModelConfig> {
    let n_scales = match variant {
        Variant::SingleScale => 1,
        Variant::UnetStyle | Variant::PspnetStyle => 2,
        _ => base.n_scales,
    };
    let cfg = ModelConfig {
        variant,
        n_scales,
        ..base.clone()
    };
    match_budget(&cfg, budget)
}

/// The arms of a named experiment.
pub fn experiment_arms(exp: Experiment, base: &ModelConfig) -> Result<Vec<Arm>> {
    let scn = ModelConfig {
        variant: Variant::ScnShared,
        ..base.clone()
    };
    let with = |n: usize, r: &str| -> Result<ModelConfig> { Ok(scn.with_pyramid(n, r.parse()?)) };
    Ok(match exp {
        Experiment::Structures => {
            let budget = config_param_count(&scn)?;
            let mut arms = vec![Arm::new("scn_shared", scn.clone())];
            for v in [Variant::UnetStyle, Variant::PspnetStyle, Variant::SingleScale] {
                arms.push(Arm::new(v.name(), budget_matched(&scn, v, budget)?));
            }
            arms
        }
        Experiment::Sharing => vec![
            Arm::new("scn_shared", scn.clone()),
            Arm::new(
                "scn_unshared",
                ModelConfig {
                    variant: Variant::ScnUnshared,
                    ..scn.clone()
                },
            ),
        ],
        Experiment::Resampling => ResamplerKind::ALL
            .iter()
            .map(|&kind| {
                Arm::new(
                    kind.name(),
                    ModelConfig {
                        resampler: kind,
                        ratio: Ratio::HALF,
                        ..scn.clone()
                    },
                )
            })
            .collect(),
        Experiment::Scales => vec![
            Arm::new("N=1", with(1, "1/2")?),
            Arm::new("N=2 ratio=1/2", with(2, "1/2")?),
            Arm::new("N=3 ratio=1/2", with(3, "1/2")?),
            Arm::new("N=4 ratio=1/2", with(4, "1/2")?),
            Arm::new("N=3 ratio=2/3", with(3, "2/3")?),
            Arm::new("N=3 ratio=3/4", with(3, "3/4")?),
        ],
        Experiment::EvalScales => {
            let trained = with(3, "1/2")?;
            let mut evals: Vec<(String, EvalOptions)> = (1..=6)
                .map(|n| {
                    (
                        format!("eval N={n} ratio=1/2"),
                        EvalOptions {
                            n_scales: Some(n),
                            ..Default::default()
                        },
                    )
                })
                .collect();
            for r in ["0.33", "2/3", "3/4"] {
                evals.push((
                    format!("eval N=3 ratio={r}"),
                    EvalOptions {
                        ratio: Some(r.parse()?),
                        ..Default::default()
                    },
                ));
            }
            vec![Arm { cfg: trained, evals }]
        }
    })
}

pub fn run_experiment(exp: Experiment, settings: &AblationSettings) -> Result<AblationTable> {
    run_arms(settings, exp.name(), &experiment_arms(exp, &settings.base)?)
}
