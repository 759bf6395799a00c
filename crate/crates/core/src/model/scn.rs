use super::store::init_conv;
use super::{apply_head, apply_tail, ModelConfig, Variant, WeightStore};
use crate::error::{Result, ScnError};
use crate::pyramid::{build_pyramid, collapse_largest, scalewise_residual_block, BlockWeights, PerScale};
use crate::resample::{strided_kernel_size, ResamplerKind, Resampler};
use crate::tensor::{Element, Fill, Tensor};

fn offsets(k: usize) -> impl Iterator<Item = isize> {
    -(k as isize)..=(k as isize)
}

fn valid(s: usize, i: isize, n: usize) -> bool {
    let src = s as isize + i;
    src >= 0 && src < n as isize
}

pub(super) fn init_strided_kernels(
    store: &mut WeightStore<f32>,
    prefix: &str,
    cfg: &ModelConfig,
    seed: u64,
    with_up: bool,
) -> Result<()> {
    if cfg.resampler != ResamplerKind::StridedConvDeconv {
        return Ok(());
    }
    let stride = cfg.resampler.stride_for(cfg.ratio)?.expect("strided kind has a stride");
    let k = strided_kernel_size(stride);
    let w = cfg.width;
    let mut dirs = vec!["down"];
    if with_up {
        dirs.push("up");
    }
    for dir in dirs {
        let name = format!("{prefix}{dir}.weight");
        let fill = Fill::HeNormal {
            fan_in: w * k * k,
            seed: super::store::tensor_seed(seed, &name),
        };
        store.insert(name, Tensor::create([w, w, k, k], fill)?);
    }
    Ok(())
}

pub(super) fn resampler_from_store<T: Element>(
    cfg: &ModelConfig,
    store: &WeightStore<T>,
    prefix: &str,
    with_up: bool,
) -> Result<Resampler<T>> {
    Ok(match cfg.resampler {
        ResamplerKind::Bilinear => Resampler::Bilinear,
        ResamplerKind::AvgpoolNearest => Resampler::AvgpoolNearest,
        ResamplerKind::StridedConvDeconv => Resampler::StridedConvDeconv {
            down: Some(store.get(&format!("{prefix}down.weight"))?.clone()),
            up: if with_up {
                Some(store.get(&format!("{prefix}up.weight"))?.clone())
            } else {
                None
            },
        },
    })
}

pub(super) fn init_body(cfg: &ModelConfig, seed: u64, store: &mut WeightStore<f32>) -> Result<()> {
    let (w, wide) = (cfg.width, cfg.width * cfg.width_mult);
    init_strided_kernels(store, "pyramid.", cfg, seed, false)?;
    for b in 0..cfg.n_blocks {
        let block = format!("block{b}");
        init_strided_kernels(store, &format!("{block}."), cfg, seed, true)?;
        match cfg.variant {
            Variant::ScnShared => {
                init_conv(store, &format!("{block}.p_expand"), wide, w, 3, true, seed)?;
                init_conv(store, &format!("{block}.p_reduce"), w, wide, 3, true, seed)?;
                for i in offsets(cfg.k) {
                    init_conv(store, &format!("{block}.q.{i:+}"), w, w, 1, true, seed)?;
                }
            }
            Variant::ScnUnshared => {
                for s in 0..cfg.n_scales {
                    init_conv(store, &format!("{block}.s{s}.p_expand"), wide, w, 3, true, seed)?;
                    init_conv(store, &format!("{block}.s{s}.p_reduce"), w, wide, 3, true, seed)?;
                    for i in offsets(cfg.k).filter(|&i| valid(s, i, cfg.n_scales)) {
                        init_conv(store, &format!("{block}.s{s}.q.{i:+}"), w, w, 1, true, seed)?;
                    }
                }
            }
            other => {
                return Err(ScnError::config(format!("{} is not an SCN variant", other.name())));
            }
        }
    }
    Ok(())
}

fn block_weights<T: Element>(
    cfg: &ModelConfig,
    store: &WeightStore<T>,
    b: usize,
    n: usize,
) -> Result<BlockWeights<T>> {
    let block = format!("block{b}");
    Ok(match cfg.variant {
        Variant::ScnShared => BlockWeights {
            expand: PerScale::Shared(store.conv(&format!("{block}.p_expand"))?),
            reduce: PerScale::Shared(store.conv(&format!("{block}.p_reduce"))?),
            q: offsets(cfg.k)
                .map(|i| store.conv(&format!("{block}.q.{i:+}")).map(PerScale::Shared))
                .collect::<Result<_>>()?,
        },
        Variant::ScnUnshared => {
            let per_scale = |name: &str| -> Result<PerScale<_>> {
                (0..n)
                    .map(|s| store.conv(&format!("{block}.s{s}.{name}")).map(Some))
                    .collect::<Result<Vec<_>>>()
                    .map(PerScale::Unshared)
            };
            let q = offsets(cfg.k)
                .map(|i| {
                    (0..n)
                        .map(|s| {
                            if valid(s, i, n) {
                                store.conv(&format!("{block}.s{s}.q.{i:+}")).map(Some)
                            } else {
                                Ok(None)
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                        .map(PerScale::Unshared)
                })
                .collect::<Result<_>>()?;
            BlockWeights {
                expand: per_scale("p_expand")?,
                reduce: per_scale("p_reduce")?,
                q,
            }
        }
        other => {
            return Err(ScnError::config(format!("{} is not an SCN variant", other.name())));
        }
    })
}

/// Head conv, feature pyramid, scale-wise residual blocks, largest scale,
/// output tail. Handles both the shared and the unshared SCN variants.
pub fn scn_forward<T: Element>(cfg: &ModelConfig, store: &WeightStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    if !matches!(cfg.variant, Variant::ScnShared | Variant::ScnUnshared) {
        return Err(ScnError::config(format!("scn_forward cannot run {}", cfg.variant.name())));
    }
    cfg.validate()?;
    let features = apply_head(cfg, store, img)?;
    let down = resampler_from_store(cfg, store, "pyramid.", false)?;
    let mut pyr = build_pyramid(&features, cfg.n_scales, cfg.ratio, &down)?;
    for b in 0..cfg.n_blocks {
        let weights = block_weights(cfg, store, b, pyr.len())?;
        let resampler = resampler_from_store(cfg, store, &format!("block{b}."), true)?;
        pyr = scalewise_residual_block(&pyr, &weights, cfg.k, &resampler)?;
    }
    apply_tail(cfg, store, &collapse_largest(&pyr), img)
}
