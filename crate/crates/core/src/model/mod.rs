//! Restoration networks: SCN and the multi-scale baselines it is compared to.

mod baselines;
mod scn;
mod store;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScnError};
use crate::ratio::Ratio;
use crate::resample::ResamplerKind;
use crate::tensor::{Element, Tensor};

pub use baselines::{baseline_forward, single_scale_weights_from_scn};
pub use scn::scn_forward;
pub use store::{param_count, WeightStore};

/// Restoration task and, for super-resolution, the upscaling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    SuperResolution { factor: usize },
    Denoise,
    ArtifactRemoval,
}

impl Task {
    /// Output upscaling factor (1 for same-size tasks).
    pub fn factor(&self) -> usize {
        match self {
            Task::SuperResolution { factor } => *factor,
            _ => 1,
        }
    }

    pub fn is_sr(&self) -> bool {
        matches!(self, Task::SuperResolution { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ScnShared,
    ScnUnshared,
    UnetStyle,
    PspnetStyle,
    SingleScale,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::ScnShared => "scn_shared",
            Variant::ScnUnshared => "scn_unshared",
            Variant::UnetStyle => "unet_style",
            Variant::PspnetStyle => "pspnet_style",
            Variant::SingleScale => "single_scale",
        }
    }
}

fn default_in_channels() -> usize {
    3
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub n_scales: usize,
    pub ratio: Ratio,
    pub n_blocks: usize,
    pub width: usize,
    pub width_mult: usize,
    /// Half-width of the scale kernel: each output scale sees `2k + 1` inputs.
    pub k: usize,
    pub resampler: ResamplerKind,
    pub variant: Variant,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl ModelConfig {
    /// The 8-block, 32-unit, 4x-multiplier SCN used for most experiments.
    pub fn standard(task: Task) -> Self {
        ModelConfig {
            task,
            n_scales: 2,
            ratio: Ratio::HALF,
            n_blocks: 8,
            width: 32,
            width_mult: 4,
            k: 1,
            resampler: ResamplerKind::Bilinear,
            variant: Variant::ScnShared,
            in_channels: if task == Task::Denoise { 1 } else { 3 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScnError::Config(m));
        if let Task::SuperResolution { factor } = self.task {
            if !(2..=4).contains(&factor) {
                return bad(format!("super-resolution factor must be 2, 3 or 4, got {factor}"));
            }
        }
        if !matches!(self.in_channels, 1 | 3) {
            return bad(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.n_scales == 0 || self.n_blocks == 0 || self.width == 0 || self.width_mult == 0 {
            return bad("n_scales, n_blocks, width and width_mult must all be >= 1".into());
        }
        match self.variant {
            Variant::SingleScale if self.n_scales != 1 => {
                return bad(format!("single_scale needs n_scales = 1, got {}", self.n_scales));
            }
            Variant::UnetStyle | Variant::PspnetStyle if self.n_scales != 2 => {
                return bad(format!("{} needs n_scales = 2, got {}", self.variant.name(), self.n_scales));
            }
            Variant::UnetStyle if !self.n_blocks.is_multiple_of(4) => {
                return bad(format!("unet_style needs n_blocks divisible by 4, got {}", self.n_blocks));
            }
            _ => {}
        }
        if self.uses_resampler() {
            self.resampler.stride_for(self.ratio)?;
        }
        Ok(())
    }

    fn uses_resampler(&self) -> bool {
        self.variant != Variant::SingleScale
    }

    /// Same configuration evaluated with a different pyramid.
    pub fn with_pyramid(&self, n_scales: usize, ratio: Ratio) -> Self {
        ModelConfig {
            n_scales,
            ratio,
            ..self.clone()
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels
    }
}

/// Deterministic weights for the configured architecture.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<WeightStore<f32>> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    store::init_head_and_tail(cfg, seed, &mut store)?;
    match cfg.variant {
        Variant::ScnShared | Variant::ScnUnshared => scn::init_body(cfg, seed, &mut store)?,
        _ => baselines::init_body(cfg, seed, &mut store)?,
    }
    Ok(store)
}

/// Runs whichever architecture `cfg.variant` names.
pub fn forward<T: Element>(cfg: &ModelConfig, store: &WeightStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    match cfg.variant {
        Variant::ScnShared => scn_forward(cfg, store, img),
        _ => baseline_forward(cfg, store, img),
    }
}

/// Parameter count of a configuration without keeping the weights.
pub fn config_param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_count(&init_model(cfg, 0)?))
}

/// Re-sizes `cfg.width` so that the parameter count lands as close as
/// possible to `target`.
pub fn match_budget(cfg: &ModelConfig, target: usize) -> Result<ModelConfig> {
    let mut best: Option<(usize, ModelConfig)> = None;
    for width in 1..=cfg.width.max(1) * 4 {
        let candidate = ModelConfig { width, ..cfg.clone() };
        let count = config_param_count(&candidate)?;
        let gap = count.abs_diff(target);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, candidate));
        }
        if count > target {
            break;
        }
    }
    Ok(best.expect("at least one width tried").1)
}

/// Shared entry stem: `conv3x3(in -> width)`.
pub(crate) fn apply_head<T: Element>(cfg: &ModelConfig, store: &WeightStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    if img.channels() != cfg.in_channels {
        return Err(ScnError::shape(format!(
            "model expects {} input channels, got {}",
            cfg.in_channels,
            img.channels()
        )));
    }
    store.conv("head")?.apply(img)
}

/// Shared output stage. Super-resolution predicts `in * f^2` channels,
/// pixel-shuffles them, and adds a pixel-shuffled 5x5 projection of the input;
/// the same-size tasks predict a residual added to the input.
pub(crate) fn apply_tail<T: Element>(
    cfg: &ModelConfig,
    store: &WeightStore<T>,
    features: &Tensor<T>,
    img: &Tensor<T>,
) -> Result<Tensor<T>> {
    let body = store.conv("tail")?.apply(features)?;
    match cfg.task {
        Task::SuperResolution { factor } => {
            let skip = store.conv("skip")?.apply(img)?;
            body.pixel_shuffle(factor)?.add(&skip.pixel_shuffle(factor)?)
        }
        Task::Denoise | Task::ArtifactRemoval => body.add(img),
    }
}
