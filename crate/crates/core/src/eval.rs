//! Restoration inference, self-ensemble and metric reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::load_checkpoint;
use crate::data::{dihedral, quantize, shave, Corpus, DegradationSpec, ImagePair};
use crate::error::{Result, ScnError};
use crate::metrics::{luma_plane, psnr, ssim};
use crate::model::{forward, ModelConfig, Task, WeightStore};
use crate::ratio::Ratio;
use crate::tensor::Tensor;

/// Averages `f` over the eight dihedral transforms of `img`, mapping each
/// output back before averaging.
pub fn self_ensemble<F>(f: F, img: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut acc: Option<Vec<f64>> = None;
    let mut dims = None;
    for idx in 0..dihedral::GROUP_ORDER {
        let out = dihedral::untransform(&f(&dihedral::transform(img, idx)?)?, idx)?;
        match (&mut acc, dims) {
            (None, _) => {
                dims = Some(out.dims());
                acc = Some(out.data().iter().map(|&v| v as f64).collect());
            }
            (Some(a), Some(d)) => {
                if out.dims() != d {
                    return Err(ScnError::shape(format!(
                        "self-ensemble outputs disagree in shape: {:?} vs {d:?}",
                        out.dims()
                    )));
                }
                for (x, y) in a.iter_mut().zip(out.data()) {
                    *x += *y as f64;
                }
            }
            _ => unreachable!(),
        }
    }
    let n = dihedral::GROUP_ORDER as f64;
    Tensor::from_vec(
        dims.expect("eight terms"),
        acc.expect("eight terms").into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Restores one image without recording gradients.
pub fn restore(cfg: &ModelConfig, weights: &WeightStore, img: &Tensor, ensemble: bool) -> Result<Tensor> {
    let run = |x: &Tensor| forward(cfg, weights, x);
    if ensemble {
        self_ensemble(run, img)
    } else {
        run(img)
    }
}

/// Evaluation-time overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub n_scales: Option<usize>,
    pub ratio: Option<Ratio>,
    pub self_ensemble: bool,
    /// Pixels removed from each side before scoring; defaults to the SR
    /// factor, or 0 for same-size tasks.
    pub border_crop: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    /// NaN when the scored region is smaller than the SSIM window.
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub eval_n_scales: usize,
    pub eval_ratio: Ratio,
    pub self_ensemble: bool,
}

impl EvalReport {
    /// `image,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr_db,ssim\n");
        for img in &self.images {
            let _ = writeln!(s, "{},{:.4},{:.6}", img.name, img.psnr, img.ssim);
        }
        let _ = writeln!(s, "mean,{:.4},{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| ScnError::io(path, e))
    }
}

/// Clamps to `[0, 1]` and snaps to 8-bit levels, as a saved image would be.
pub fn to_display_range(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f32 / 255.0)
}

/// PSNR and SSIM of `output` against `target` on the luma plane.
pub fn score(output: &Tensor, target: &Tensor, border: usize) -> Result<(f64, f64)> {
    let mut a = luma_plane(&to_display_range(output))?;
    let mut b = luma_plane(target)?;
    if border > 0 {
        a = shave(&a, border)?;
        b = shave(&b, border)?;
    }
    let p = psnr(&a, &b, 1.0)?;
    let (h, w) = a.spatial();
    let s = if h >= 11 && w >= 11 { ssim(&a, &b)? } else { f64::NAN };
    Ok((p, s))
}

fn image_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Scores `weights` on `pairs`, optionally with a different pyramid than
/// the one the model was trained with.
pub fn evaluate(cfg: &ModelConfig, weights: &WeightStore, pairs: &[ImagePair], opts: &EvalOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(ScnError::Dataset("nothing to evaluate".into()));
    }
    let eval_cfg = cfg.with_pyramid(opts.n_scales.unwrap_or(cfg.n_scales), opts.ratio.unwrap_or(cfg.ratio));
    if eval_cfg.n_scales == 0 {
        return Err(ScnError::config("evaluation needs at least one scale"));
    }
    let border = opts.border_crop.unwrap_or(match cfg.task {
        Task::SuperResolution { factor } => factor,
        _ => 0,
    });
    let mut images = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let out = restore(&eval_cfg, weights, &pair.degraded, opts.self_ensemble)?;
        let (p, s) = score(&out, &pair.target, border)?;
        images.push(ImageScore {
            name: image_name(&pair.meta.source),
            psnr: p,
            ssim: s,
        });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        mean_psnr: images.iter().map(|i| i.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|i| i.ssim).sum::<f64>() / n,
        images,
        eval_n_scales: eval_cfg.n_scales,
        eval_ratio: eval_cfg.ratio,
        self_ensemble: opts.self_ensemble,
    })
}

/// Where evaluation images come from and how they are degraded.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalData {
    pub dir: PathBuf,
    /// Noise level for denoising models.
    pub noise_sigma: f64,
    /// Degraded counterparts for artifact-removal models.
    pub pairs_dir: Option<PathBuf>,
    pub seed: u64,
}

/// The degradation a model of `task` is evaluated (and trained) against.
pub fn degradation_for(task: Task, noise_sigma: f64, pairs_dir: Option<&Path>) -> Result<DegradationSpec> {
    Ok(match task {
        Task::SuperResolution { factor } => DegradationSpec::SrBicubic(factor),
        Task::Denoise => DegradationSpec::GaussianNoise(noise_sigma),
        Task::ArtifactRemoval => DegradationSpec::PrecomputedPairs(
            pairs_dir
                .ok_or_else(|| ScnError::config("artifact removal needs a directory of degraded images"))?
                .to_path_buf(),
        ),
    })
}

/// Loads a checkpoint and scores it on the images in `data.dir`.
pub fn eval_run(ckpt: impl AsRef<Path>, data: &EvalData, opts: &EvalOptions) -> Result<EvalReport> {
    let (weights, cfg) = load_checkpoint(ckpt)?;
    let corpus = Corpus::from_dir(&data.dir, cfg.in_channels)?;
    let spec = degradation_for(cfg.task, data.noise_sigma, data.pairs_dir.as_deref())?;
    evaluate(&cfg, &weights, &corpus.pairs(&spec, data.seed)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PairMeta;
    use crate::model::{init_model, Variant};
    use crate::resample::ResamplerKind;
    use crate::tensor::Fill;

    fn random(dims: [usize; 4], seed: u64) -> Tensor {
        Tensor::create(dims, Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn ensemble_of_identity_is_identity() {
        let img = random([1, 3, 5, 7], 1);
        let out = self_ensemble(|x| Ok(x.clone()), &img).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn ensemble_of_equivariant_upscaler_equals_single_pass() {
        // Pixel replication commutes with every dihedral transform.
        let up = |x: &Tensor| crate::resample::nearest_up(x, 2, (2 * x.height(), 2 * x.width()));
        let img = random([1, 1, 4, 6], 2);
        let single = up(&img).unwrap();
        let ens = self_ensemble(up, &img).unwrap();
        for (a, b) in ens.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn report_aggregates_are_means() {
        let cfg = ModelConfig {
            n_blocks: 1,
            width: 4,
            width_mult: 1,
            n_scales: 2,
            resampler: ResamplerKind::Bilinear,
            variant: Variant::ScnShared,
            ..ModelConfig::standard(Task::Denoise)
        };
        let w = init_model(&cfg, 0).unwrap();
        let pairs: Vec<ImagePair> = (0..3)
            .map(|i| ImagePair {
                degraded: random([1, 1, 12, 12], i),
                target: random([1, 1, 12, 12], i + 10),
                meta: PairMeta {
                    source: PathBuf::from(format!("/d/{i}.png")),
                    degradation: "test".into(),
                },
            })
            .collect();
        let r = evaluate(&cfg, &w, &pairs, &EvalOptions::default()).unwrap();
        assert_eq!(r.images.len(), 3);
        let mean = r.images.iter().map(|i| i.psnr).sum::<f64>() / 3.0;
        assert!((r.mean_psnr - mean).abs() < 1e-12);
        assert_eq!(r.images[1].name, "1.png");
        let csv = r.to_csv();
        assert!(csv.starts_with("image,psnr_db,ssim\n0.png,"));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        let overridden = evaluate(&cfg, &w, &pairs, &EvalOptions { n_scales: Some(5), ..Default::default() }).unwrap();
        assert_eq!(overridden.eval_n_scales, 5);
    }

    #[test]
    fn scoring_uses_luma_and_display_range() {
        let t = random([1, 3, 16, 16], 3).map(|v| quantize(v) as f32 / 255.0);
        let (p, s) = score(&t, &t, 2).unwrap();
        assert_eq!(p, f64::INFINITY);
        assert!((s - 1.0).abs() < 1e-12);
        // out-of-range predictions are clamped before scoring
        let over = t.map(|v| v + 10.0);
        let white = Tensor::full([1, 3, 16, 16], 1.0);
        assert_eq!(score(&over, &white, 0).unwrap().0, f64::INFINITY);
    }
}
