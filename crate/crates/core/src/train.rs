//! Optimizer, learning-rate schedule and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{add_gaussian_noise, augment, dihedral, sample_patches, Corpus, DegradationSpec, ImagePair};
use crate::error::{Result, ScnError};
use crate::eval::{degradation_for, evaluate, EvalOptions};
use crate::model::{forward, init_model, ModelConfig, WeightStore};
use crate::seed::derive;
use crate::tensor::Tensor;

pub const BASE_LR: f64 = 0.001;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// 0.001 through epoch 25, then halved every third epoch (28, 31, ...).
pub fn lr_at(epoch: usize) -> f64 {
    let halvings = epoch.saturating_sub(25) / 3;
    BASE_LR * 0.5f64.powi(halvings as i32)
}

/// Adam moment buffers, keyed like the weights.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every parameter in `weights`.
pub fn adam_step(
    weights: &mut WeightStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, t) in weights.iter() {
        match grads.get(name) {
            None => return Err(ScnError::Training(format!("no gradient for '{name}'"))),
            Some(g) if g.len() != t.numel() => {
                return Err(ScnError::Training(format!(
                    "gradient for '{name}' has {} values, parameter has {}",
                    g.len(),
                    t.numel()
                )))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = weights.names().cloned().collect();
    for name in names {
        let param = weights.get(&name)?;
        let g = &grads[&name];
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut data = param.to_vec();
        for i in 0..n {
            let gi = g[i] as f64;
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            data[i] = (data[i] as f64 - update) as f32;
        }
        let dims = param.dims();
        weights.insert(name, Tensor::from_vec(dims, data)?);
    }
    Ok(())
}

fn default_epochs() -> usize {
    40
}
fn default_patches() -> usize {
    1000
}
fn default_patch() -> usize {
    48
}
fn default_batch() -> usize {
    16
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_sigma() -> f64 {
    25.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patches")]
    pub patches_per_image: usize,
    /// Patch side in the degraded domain.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Directory of clean target PNGs.
    #[serde(default)]
    pub train_dir: Option<PathBuf>,
    /// Held-out images; when absent a fraction of `train_dir` is split off.
    #[serde(default)]
    pub val_dir: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Gaussian noise level (0-255 scale) for denoising.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    /// Degraded images with the same file names, for artifact removal.
    #[serde(default)]
    pub pairs_dir: Option<PathBuf>,
    /// Stops after this many optimizer steps in total.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            patches_per_image: default_patches(),
            patch: default_patch(),
            batch: default_batch(),
            seed: 0,
            train_dir: None,
            val_dir: None,
            val_fraction: default_val_fraction(),
            noise_sigma: default_sigma(),
            pairs_dir: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(ScnError::config("batch and patch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(ScnError::config(format!("val_fraction must be in [0, 1], got {}", self.val_fraction)));
        }
        Ok(())
    }
}

const VAL_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX - 1;

/// Training pairs (noise-free for online-noise tasks) and fixed validation pairs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    /// Per-patch noise level when noise is sampled online.
    pub online_noise: Option<f64>,
}

impl TrainData {
    /// Degrades `train` and `val`; an empty validation set falls back to the
    /// training images.
    pub fn from_corpus(cfg: &ModelConfig, tcfg: &TrainConfig, train: &Corpus, val: &Corpus) -> Result<Self> {
        if train.is_empty() {
            return Err(ScnError::Dataset("training set is empty".into()));
        }
        let spec = degradation_for(cfg.task, tcfg.noise_sigma, tcfg.pairs_dir.as_deref())?;
        let val_source = if val.is_empty() { train } else { val };
        let val = val_source.pairs(&spec, derive(tcfg.seed, &[VAL_STREAM]))?;
        let (train, online_noise) = match spec {
            DegradationSpec::GaussianNoise(sigma) => {
                (train.pairs(&DegradationSpec::GaussianNoise(0.0), 0)?, Some(sigma))
            }
            other => (train.pairs(&other, 0)?, None),
        };
        Ok(TrainData { train, val, online_noise })
    }

    /// Reads `train_dir` (and `val_dir`, or a split of `train_dir`).
    pub fn load(cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Self> {
        let dir = tcfg
            .train_dir
            .as_ref()
            .ok_or_else(|| ScnError::config("train_dir is not set"))?;
        let corpus = Corpus::from_dir(dir, cfg.in_channels)?;
        let (train, val) = match &tcfg.val_dir {
            Some(v) => (corpus, Corpus::from_dir(v, cfg.in_channels)?),
            None => corpus.split(tcfg.val_fraction),
        };
        Self::from_corpus(cfg, tcfg, &train, &val)
    }

    /// Patch `p` of image `i` in `epoch`: offset, augmentation and noise all
    /// come from seeds derived from `(seed, epoch, i, p)` alone.
    pub fn patch(&self, tcfg: &TrainConfig, epoch: usize, i: usize, p: usize) -> Result<ImagePair> {
        let path = [epoch as u64, i as u64, p as u64];
        let key = derive(tcfg.seed, &path);
        let mut pair = sample_patches(&self.train[i], tcfg.patch, 1, key)?
            .pop()
            .expect("one patch");
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let idx = rng.random_range(0..dihedral::GROUP_ORDER);
        pair = augment(&pair, idx)?;
        if let Some(sigma) = self.online_noise {
            pair.degraded = add_gaussian_noise(&pair.target, sigma, rng.random())?;
        }
        Ok(pair)
    }
}

/// Weights plus optimizer state for a configuration.
pub struct Trainer {
    pub cfg: ModelConfig,
    pub weights: WeightStore,
    pub state: OptimState,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, weights: WeightStore) -> Self {
        Trainer {
            cfg,
            weights,
            state: OptimState::default(),
        }
    }

    /// One L1 step on a batch; returns the loss before the update.
    pub fn step(&mut self, degraded: &Tensor, target: &Tensor, lr: f64) -> Result<f64> {
        let params = self.weights.requiring_grad();
        let out = forward(&self.cfg, &params, degraded)?;
        let loss = out.l1_loss(target)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(ScnError::Training(format!(
                "loss became {value} at step {} (lr {lr})",
                self.state.t + 1
            )));
        }
        loss.backward()?;
        adam_step(&mut self.weights, &params.gradients(), &mut self.state, lr)?;
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {} steps {} lr {:e} train_loss {:.6} val_psnr {:.4}",
            self.epoch, self.steps, self.lr, self.train_loss, self.val_psnr
        )
    }
}

pub struct TrainOutcome {
    pub weights: WeightStore,
    pub best: WeightStore,
    pub best_val_psnr: Option<f64>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// `model.ckpt` -> `model.best.ckpt`.
pub fn best_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    out.with_file_name(name)
}

/// Trains from a seeded initialization. When `out` is given, the final and
/// best-validation checkpoints and a per-epoch log are written next to it.
pub fn train(cfg: &ModelConfig, tcfg: &TrainConfig, data: &TrainData, out: Option<&Path>) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let init = init_model(cfg, tcfg.seed)?;
    let mut trainer = Trainer::new(cfg.clone(), init.clone());
    let mut best = init;
    let mut best_psnr: Option<f64> = None;
    let mut log = Vec::new();
    let mut text = String::new();
    let images = data.train.len();
    let steps_per_epoch = images * tcfg.patches_per_image / tcfg.batch;
    let budget = tcfg.max_steps.unwrap_or(usize::MAX);
    let mut steps = 0usize;

    for epoch in 1..=tcfg.epochs {
        if steps >= budget {
            break;
        }
        let lr = lr_at(epoch);
        let mut order: Vec<(usize, usize)> = (0..images)
            .flat_map(|i| (0..tcfg.patches_per_image).map(move |p| (i, p)))
            .collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(tcfg.seed, &[epoch as u64, SHUFFLE_STREAM])));
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks_exact(tcfg.batch).take(steps_per_epoch) {
            if steps >= budget {
                break;
            }
            let patches = chunk
                .iter()
                .map(|&(i, p)| data.patch(tcfg, epoch, i, p))
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack(&patches.iter().map(|p| p.degraded.clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack(&patches.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
            loss_sum += trainer.step(&x, &y, lr).map_err(|e| match e {
                ScnError::Training(m) => ScnError::Training(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            epoch_steps += 1;
            steps += 1;
        }
        let val_psnr = evaluate(cfg, &trainer.weights, &data.val, &EvalOptions::default())?.mean_psnr;
        let entry = EpochLog {
            epoch,
            steps: epoch_steps,
            lr,
            train_loss: if epoch_steps > 0 { loss_sum / epoch_steps as f64 } else { f64::NAN },
            val_psnr,
        };
        log::info!("{}", entry.line());
        let _ = writeln!(text, "{}", entry.line());
        if best_psnr.is_none_or(|b| val_psnr > b) {
            best_psnr = Some(val_psnr);
            best = trainer.weights.clone();
        }
        log.push(entry);
    }

    if let Some(out) = out {
        save_checkpoint(&trainer.weights, cfg, out)?;
        save_checkpoint(&best, cfg, best_path(out))?;
        let log_path = out.with_extension("log");
        std::fs::write(&log_path, text).map_err(|e| ScnError::io(&log_path, e))?;
    }
    Ok(TrainOutcome {
        weights: trainer.weights,
        best,
        best_val_psnr: best_psnr,
        log,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::model::{Task, Variant};
    use crate::resample::ResamplerKind;
    use crate::Ratio;

    fn store(pairs: &[(&str, Vec<f32>)]) -> WeightStore {
        let mut w = WeightStore::new();
        for (name, v) in pairs {
            let n = v.len();
            w.insert(*name, Tensor::from_vec([1, 1, 1, n], v.clone()).unwrap());
        }
        w
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(1), 0.001);
        assert_eq!(lr_at(10), 0.001);
        assert_eq!(lr_at(27), 0.001);
        assert_eq!(lr_at(28), 0.0005);
        assert_eq!(lr_at(40), 0.001 * 0.5f64.powi(5));
        assert_eq!(lr_at(40), 3.125e-5);
        for e in 1..100 {
            assert!(lr_at(e + 1) <= lr_at(e));
        }
        for e in (28..100).step_by(3) {
            assert_eq!(lr_at(e), lr_at(e + 1));
            assert_eq!(lr_at(e), lr_at(e + 2));
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut w = store(&[("p", vec![0.5])]);
        let mut st = OptimState::default();
        let grads = BTreeMap::from([("p".to_string(), vec![1.0f32])]);
        adam_step(&mut w, &grads, &mut st, 0.001).unwrap();
        // m_hat / sqrt(v_hat) = 1, so the step is lr / (1 + eps).
        let expect = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((w.get("p").unwrap().data()[0] as f64 - expect).abs() < 1e-7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_grad_only_counts() {
        let mut w = store(&[("a", vec![0.25, -3.0]), ("b", vec![7.0])]);
        let before = w.clone();
        let mut st = OptimState::default();
        let grads = BTreeMap::from([("a".to_string(), vec![0.0, 0.0]), ("b".to_string(), vec![0.0])]);
        adam_step(&mut w, &grads, &mut st, 0.001).unwrap();
        assert!(w.bit_eq(&before));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_identical_params_stay_identical() {
        let mut w = store(&[("a", vec![0.3]), ("b", vec![0.3])]);
        let mut st = OptimState::default();
        for k in 0..10 {
            let g = (k as f32 * 0.7).sin();
            let grads = BTreeMap::from([("a".to_string(), vec![g]), ("b".to_string(), vec![g])]);
            adam_step(&mut w, &grads, &mut st, 0.01).unwrap();
        }
        assert_eq!(w.get("a").unwrap().data(), w.get("b").unwrap().data());
    }

    #[test]
    fn adam_missing_grad_is_error() {
        let mut w = store(&[("a", vec![1.0])]);
        let err = adam_step(&mut w, &BTreeMap::new(), &mut OptimState::default(), 0.1);
        assert!(matches!(err, Err(ScnError::Training(_))));
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            task: Task::SuperResolution { factor: 2 },
            n_scales: 2,
            ratio: Ratio::HALF,
            n_blocks: 1,
            width: 4,
            width_mult: 2,
            k: 1,
            resampler: ResamplerKind::Bilinear,
            variant: Variant::ScnShared,
            in_channels: 3,
        }
    }

    fn tiny_tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            patches_per_image: 8,
            patch: 8,
            batch: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = tiny_cfg();
        let corpus = synthetic_corpus(1, 24, 24, 3, 0);
        let data = TrainData::from_corpus(&cfg, &tiny_tcfg(0), &corpus, &Corpus::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.ckpt");
        let outcome = train(&cfg, &tiny_tcfg(0), &data, Some(&out)).unwrap();
        assert!(outcome.weights.bit_eq(&init_model(&cfg, 3).unwrap()));
        let (saved, _) = crate::checkpoint::load_checkpoint(&out).unwrap();
        assert!(saved.bit_eq(&outcome.weights));
        assert!(best_path(&out).exists());
    }

    #[test]
    fn tiny_runs_are_bit_identical() {
        let cfg = tiny_cfg();
        let corpus = synthetic_corpus(1, 24, 24, 3, 1);
        let tcfg = tiny_tcfg(1);
        let data = TrainData::from_corpus(&cfg, &tcfg, &corpus, &Corpus::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let first = train(&cfg, &tcfg, &data, Some(&a)).unwrap();
        train(&cfg, &tcfg, &data, Some(&b)).unwrap();
        assert_eq!(first.steps, 2);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(!first.weights.bit_eq(&init_model(&cfg, 3).unwrap()));
        let log = std::fs::read_to_string(a.with_extension("log")).unwrap();
        assert!(log.starts_with("epoch 1 steps 2 "));
    }

    #[test]
    fn patches_depend_only_on_their_coordinates() {
        let cfg = ModelConfig {
            in_channels: 1,
            task: Task::Denoise,
            ..tiny_cfg()
        };
        let tcfg = tiny_tcfg(1);
        let corpus = synthetic_corpus(2, 20, 20, 1, 2);
        let data = TrainData::from_corpus(&cfg, &tcfg, &corpus, &Corpus::default()).unwrap();
        let a = data.patch(&tcfg, 2, 1, 5).unwrap();
        let b = data.patch(&tcfg, 2, 1, 5).unwrap();
        assert_eq!(a.degraded.data(), b.degraded.data());
        assert_ne!(a.degraded.data(), a.target.data());
        let c = data.patch(&tcfg, 3, 1, 5).unwrap();
        assert_ne!(a.degraded.data(), c.degraded.data());
    }

    #[test]
    fn learns_a_constant_offset() {
        let cfg = cfg_for_offset();
        let mut trainer = Trainer::new(cfg.clone(), init_model(&cfg, 0).unwrap());
        let corpus = synthetic_corpus(4, 16, 16, 1, 4);
        let batch: Vec<Tensor> = corpus.images.iter().map(|(_, t)| t.clone()).collect();
        let x = Tensor::stack(&batch).unwrap();
        let y = x.map(|v| v + 0.1);
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            loss = trainer.step(&x, &y, 0.001).unwrap();
        }
        assert!(loss < 0.01, "loss {loss}");
    }

    fn cfg_for_offset() -> ModelConfig {
        ModelConfig {
            task: Task::Denoise,
            in_channels: 1,
            ..tiny_cfg()
        }
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let t: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!((t.epochs, t.patches_per_image, t.patch, t.batch), (40, 1000, 48, 16));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
