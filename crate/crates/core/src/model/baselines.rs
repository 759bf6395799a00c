//! Comparison architectures: a plain single-scale wide-activation network, a
//! two-scale U-Net style encoder/decoder, and a two-tower PSPNet style model.

use super::scn::{init_strided_kernels, resampler_from_store};
use super::store::init_conv;
use super::{apply_head, apply_tail, scn_forward, ModelConfig, Variant, WeightStore};
use crate::error::{Result, ScnError};
use crate::resample::{Direction, Resampler};
use crate::tensor::{Element, Tensor};

/// `x + proj(conv2(relu(conv1(x))))`.
fn plain_block<T: Element>(store: &WeightStore<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let h = store.conv(&format!("{prefix}.conv1"))?.apply(x)?.relu();
    let h = store.conv(&format!("{prefix}.conv2"))?.apply(&h)?;
    let h = store.conv(&format!("{prefix}.proj"))?.apply(&h)?;
    x.add(&h)
}

fn init_plain_block(store: &mut WeightStore<f32>, prefix: &str, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let (w, wide) = (cfg.width, cfg.width * cfg.width_mult);
    init_conv(store, &format!("{prefix}.conv1"), wide, w, 3, true, seed)?;
    init_conv(store, &format!("{prefix}.conv2"), w, wide, 3, true, seed)?;
    init_conv(store, &format!("{prefix}.proj"), w, w, 1, true, seed)
}

fn unet_stages(cfg: &ModelConfig) -> [(&'static str, usize); 4] {
    let per = cfg.n_blocks / 4;
    [("enc_full", per), ("enc_half", per), ("dec_half", per), ("dec_full", per)]
}

pub(super) fn init_body(cfg: &ModelConfig, seed: u64, store: &mut WeightStore<f32>) -> Result<()> {
    match cfg.variant {
        Variant::SingleScale => {
            for b in 0..cfg.n_blocks {
                init_plain_block(store, &format!("block{b}"), cfg, seed)?;
            }
        }
        Variant::UnetStyle => {
            init_strided_kernels(store, "", cfg, seed, true)?;
            for (stage, count) in unet_stages(cfg) {
                for b in 0..count {
                    init_plain_block(store, &format!("{stage}{b}"), cfg, seed)?;
                }
            }
            init_conv(store, "fuse", cfg.width, 2 * cfg.width, 1, true, seed)?;
        }
        Variant::PspnetStyle => {
            init_strided_kernels(store, "", cfg, seed, true)?;
            for tower in 0..2 {
                for b in 0..cfg.n_blocks {
                    init_plain_block(store, &format!("tower{tower}.block{b}"), cfg, seed)?;
                }
            }
            init_conv(store, "fuse", cfg.width, 2 * cfg.width, 1, true, seed)?;
        }
        other => {
            return Err(ScnError::config(format!("{} is not a baseline variant", other.name())));
        }
    }
    Ok(())
}

fn half_size(cfg: &ModelConfig, full: (usize, usize)) -> (usize, usize) {
    (cfg.ratio.scale_size(full.0), cfg.ratio.scale_size(full.1))
}

fn single_scale_body<T: Element>(cfg: &ModelConfig, store: &WeightStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    (0..cfg.n_blocks).try_fold(x, |h, b| plain_block(store, &format!("block{b}"), &h))
}

fn unet_body<T: Element>(
    cfg: &ModelConfig,
    store: &WeightStore<T>,
    resampler: &Resampler<T>,
    x: Tensor<T>,
) -> Result<Tensor<T>> {
    let [enc_full, enc_half, dec_half, dec_full] = unet_stages(cfg);
    let run = |stage: (&str, usize), h: Tensor<T>| -> Result<Tensor<T>> {
        (0..stage.1).try_fold(h, |h, b| plain_block(store, &format!("{}{b}", stage.0), &h))
    };
    let full = x.spatial();
    let skip = run(enc_full, x)?;
    let low = resampler.resample(Direction::Down, &skip, cfg.ratio, half_size(cfg, full))?;
    let low = run(dec_half, run(enc_half, low)?)?;
    let up = resampler.resample(Direction::Up, &low, cfg.ratio, full)?;
    let fused = store.conv("fuse")?.apply(&Tensor::concat_channels(&[skip, up])?)?;
    run(dec_full, fused)
}

fn pspnet_body<T: Element>(
    cfg: &ModelConfig,
    store: &WeightStore<T>,
    resampler: &Resampler<T>,
    x: Tensor<T>,
) -> Result<Tensor<T>> {
    let full = x.spatial();
    let low = resampler.resample(Direction::Down, &x, cfg.ratio, half_size(cfg, full))?;
    let tower = |t: usize, h: Tensor<T>| -> Result<Tensor<T>> {
        (0..cfg.n_blocks).try_fold(h, |h, b| plain_block(store, &format!("tower{t}.block{b}"), &h))
    };
    let high = tower(0, x)?;
    let low = tower(1, low)?;
    let up = resampler.resample(Direction::Up, &low, cfg.ratio, full)?;
    store.conv("fuse")?.apply(&Tensor::concat_channels(&[high, up])?)
}

/// Forward pass of the comparison architectures. `scn_unshared` is routed to
/// the SCN path with per-scale weights.
pub fn baseline_forward<T: Element>(cfg: &ModelConfig, store: &WeightStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    if cfg.variant == Variant::ScnUnshared {
        return scn_forward(cfg, store, img);
    }
    cfg.validate()?;
    let x = apply_head(cfg, store, img)?;
    let features = match cfg.variant {
        Variant::SingleScale => single_scale_body(cfg, store, x)?,
        Variant::UnetStyle => {
            let r = resampler_from_store(cfg, store, "", true)?;
            unet_body(cfg, store, &r, x)?
        }
        Variant::PspnetStyle => {
            let r = resampler_from_store(cfg, store, "", true)?;
            pspnet_body(cfg, store, &r, x)?
        }
        other => {
            return Err(ScnError::config(format!("baseline_forward cannot run {}", other.name())));
        }
    };
    apply_tail(cfg, store, &features, img)
}

/// Renames a one-scale, `k = 0` SCN store into single-scale baseline layout.
pub fn single_scale_weights_from_scn<T: Element>(scn: &WeightStore<T>) -> Result<WeightStore<T>> {
    let mut out = WeightStore::new();
    for (name, t) in scn.iter() {
        let mapped = if let Some(rest) = name.strip_prefix("block") {
            let (idx, tail) = rest
                .split_once('.')
                .ok_or_else(|| ScnError::config(format!("unexpected parameter '{name}'")))?;
            let tail = if let Some(suffix) = tail.strip_prefix("p_expand.") {
                format!("conv1.{suffix}")
            } else if let Some(suffix) = tail.strip_prefix("p_reduce.") {
                format!("conv2.{suffix}")
            } else if let Some(suffix) = tail.strip_prefix("q.+0.") {
                format!("proj.{suffix}")
            } else {
                return Err(ScnError::config(format!(
                    "'{name}' has no single-scale counterpart (needs k = 0, shared weights)"
                )));
            };
            format!("block{idx}.{tail}")
        } else if name.starts_with("pyramid.") {
            continue;
        } else {
            name.clone()
        };
        out.insert(mapped, t.clone());
    }
    Ok(out)
}
