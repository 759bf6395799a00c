//! `scn` command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scn_core::ablation::{run_experiment, AblationSettings, CorpusSource, Experiment};
use scn_core::checkpoint::load_checkpoint;
use scn_core::config::RunConfig;
use scn_core::data::{load_image, save_image, synthetic_corpus, to_channels};
use scn_core::eval::{eval_run, restore, EvalData, EvalOptions, EvalReport};
use scn_core::gradsuite::{run_grad_suite, SUITE_TOLERANCE};
use scn_core::train::{best_path, train, TrainData};
use scn_core::{Ratio, Result, ScnError};

#[derive(Parser, Debug)]
#[command(name = "scn", version, about = "Scale-wise convolution networks for image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Final checkpoint path; the best-validation checkpoint and the
        /// epoch log are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.train_dir`.
        #[arg(long)]
        train_dir: Option<PathBuf>,
        /// Overrides `train.val_dir`.
        #[arg(long)]
        val_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of clean images.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        pyramid: PyramidArgs,
        /// Pixels cropped from each border before scoring.
        #[arg(long)]
        border: Option<usize>,
        /// Noise level for denoising models (0-255 scale).
        #[arg(long, default_value_t = 25.0)]
        noise_sigma: f64,
        /// Degraded counterparts for artifact-removal models.
        #[arg(long)]
        pairs_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; defaults to `<ckpt>.eval.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Restore a single image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        pyramid: PyramidArgs,
    },
    /// Run the gradient-check suite; fails if any check fails.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Run a named comparison: structures, sharing, resampling, scales or eval-scales.
    Ablate {
        experiment: String,
        /// JSON settings; defaults to the built-in desk-scale setup.
        #[arg(long)]
        settings: Option<PathBuf>,
        /// Use the PNGs in this directory instead of the synthetic corpus.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of seeds (0, 1, ...).
        #[arg(long)]
        seeds: Option<u64>,
        /// Optimizer steps per training run.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a corpus of procedural textured PNGs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        gray: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct PyramidArgs {
    /// Evaluation-time number of scales.
    #[arg(long)]
    scales: Option<usize>,
    /// Evaluation-time scale ratio, e.g. `0.75` or `2/3`.
    #[arg(long)]
    ratio: Option<Ratio>,
    /// Average over the eight flips and rotations.
    #[arg(long)]
    self_ensemble: bool,
}

impl PyramidArgs {
    fn options(&self, border: Option<usize>) -> EvalOptions {
        EvalOptions {
            n_scales: self.scales,
            ratio: self.ratio,
            self_ensemble: self.self_ensemble,
            border_crop: border,
        }
    }
}

fn print_report(report: &EvalReport) {
    println!(
        "scales {} ratio {} self_ensemble {}",
        report.eval_n_scales, report.eval_ratio, report.self_ensemble
    );
    println!("{:<32} {:>10} {:>8}", "image", "psnr_db", "ssim");
    for img in &report.images {
        println!("{:<32} {:>10.4} {:>8.4}", img.name, img.psnr, img.ssim);
    }
    println!("{:<32} {:>10.4} {:>8.4}", "mean", report.mean_psnr, report.mean_ssim);
}

fn default_csv(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("eval.csv")
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Train {
            config,
            out,
            train_dir,
            val_dir,
        } => {
            let mut run = RunConfig::load(&config)?;
            if train_dir.is_some() {
                run.train.train_dir = train_dir;
            }
            if val_dir.is_some() {
                run.train.val_dir = val_dir;
            }
            let data = TrainData::load(&run.model, &run.train)?;
            let outcome = train(&run.model, &run.train, &data, Some(&out))?;
            println!(
                "trained {} steps; final {} best {} (val psnr {:.4})",
                outcome.steps,
                out.display(),
                best_path(&out).display(),
                outcome.best_val_psnr.unwrap_or(f64::NAN)
            );
            Ok(true)
        }
        Command::Eval {
            ckpt,
            data,
            pyramid,
            border,
            noise_sigma,
            pairs_dir,
            seed,
            csv,
        } => {
            let setup = EvalData {
                dir: data,
                noise_sigma,
                pairs_dir,
                seed,
            };
            let report = eval_run(&ckpt, &setup, &pyramid.options(border))?;
            print_report(&report);
            let csv = csv.unwrap_or_else(|| default_csv(&ckpt));
            report.write_csv(&csv)?;
            Ok(true)
        }
        Command::Infer {
            ckpt,
            input,
            output,
            pyramid,
        } => {
            let (weights, cfg) = load_checkpoint(&ckpt)?;
            let opts = pyramid.options(None);
            let cfg = cfg.with_pyramid(opts.n_scales.unwrap_or(cfg.n_scales), opts.ratio.unwrap_or(cfg.ratio));
            let img = to_channels(&load_image(&input)?, cfg.in_channels)?;
            let out = restore(&cfg, &weights, &img, opts.self_ensemble)?;
            save_image(&out, &output)?;
            Ok(true)
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(ScnError::Config("gradcheck needs at least one seed".into()));
            }
            let results = run_grad_suite(seeds)?;
            let mut all = true;
            let mut ops: Vec<&str> = results.iter().map(|r| r.op).collect();
            ops.dedup();
            for op in ops {
                let cases: Vec<_> = results.iter().filter(|r| r.op == op).collect();
                let worst = cases.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
                let ok = cases.iter().all(|r| r.passed);
                all &= ok;
                println!(
                    "{} {op}: max relative error {worst:.2e} over {} seeds (tol {SUITE_TOLERANCE:e})",
                    if ok { "PASS" } else { "FAIL" },
                    cases.len()
                );
            }
            Ok(all)
        }
        Command::Ablate {
            experiment,
            settings,
            data,
            seeds,
            steps,
            csv,
        } => {
            let experiment: Experiment = experiment.parse()?;
            let mut s = match settings {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| ScnError::Io { path: path.clone(), source: e })?;
                    serde_json::from_str(&text).map_err(|e| ScnError::Config(format!("{}: {e}", path.display())))?
                }
                None => AblationSettings::desk_scale(),
            };
            if let Some(dir) = data {
                s.corpus = CorpusSource::Dir(dir);
            }
            if let Some(n) = seeds {
                s.seeds = (0..n).collect();
            }
            if steps.is_some() {
                s.train.max_steps = steps;
            }
            let table = run_experiment(experiment, &s)?;
            print!("{table}");
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()).map_err(|e| ScnError::Io { path, source: e })?;
            }
            Ok(true)
        }
        Command::Synth {
            out,
            count,
            size,
            gray,
            seed,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| ScnError::Io { path: out.clone(), source: e })?;
            let corpus = synthetic_corpus(count, size, size, if gray { 1 } else { 3 }, seed);
            for (name, img) in &corpus.images {
                save_image(img, out.join(name))?;
            }
            println!("wrote {count} images to {}", out.display());
            Ok(true)
        }
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on failure and 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
