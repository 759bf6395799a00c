//! Gradient checks of every differentiable operation the models use.

use crate::error::Result;
use crate::pyramid::{build_pyramid, scalewise_residual_block, BlockWeights, ConvParams, PerScale};
use crate::ratio::Ratio;
use crate::resample::{avgpool_down, bilinear_resize, box_kernels, nearest_up, strided_down, strided_up, Resampler};
use crate::seed::derive;
use crate::tensor::gradcheck::grad_check;
use crate::tensor::{Dims, Fill, Tensor};

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Loss = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

struct Case {
    op: &'static str,
    inputs: Vec<Dims>,
    /// Builds the scalar under test from the inputs and a fixed probe
    /// tensor drawn from the case seed.
    loss: fn(u64) -> Loss,
}

fn random(dims: Dims, seed: u64) -> Tensor<f64> {
    Tensor::create(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).expect("valid dims")
}

/// `sum(y * probe)`: a scalar whose gradient with respect to `y` is a dense
/// random tensor, so every output element is exercised.
fn project(y: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let probe = random(y.dims(), derive(seed, &[0x9e37]));
    Ok(y.mul(&probe)?.sum())
}

fn block_weights(t: &[Tensor<f64>]) -> BlockWeights<f64> {
    let conv = |w: usize| PerScale::Shared(ConvParams::new(t[w].clone(), Some(t[w + 1].clone())));
    BlockWeights {
        expand: conv(1),
        reduce: conv(3),
        q: vec![conv(5), conv(7), conv(9)],
    }
}

fn block_inputs() -> Vec<Dims> {
    vec![
        [1, 2, 8, 7],
        [4, 2, 3, 3],
        [4, 1, 1, 1],
        [2, 4, 3, 3],
        [2, 1, 1, 1],
        [2, 2, 1, 1],
        [2, 1, 1, 1],
        [2, 2, 1, 1],
        [2, 1, 1, 1],
        [2, 2, 1, 1],
        [2, 1, 1, 1],
    ]
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "conv2d",
            inputs: vec![[2, 3, 6, 5], [4, 3, 3, 3], [4, 1, 1, 1]],
            loss: |s| Box::new(move |t| project(t[0].conv2d(&t[1], Some(&t[2]), 1, 1)?, s)),
        },
        Case {
            op: "conv2d_strided",
            inputs: vec![[1, 2, 7, 6], [3, 2, 3, 3], [3, 1, 1, 1]],
            loss: |s| Box::new(move |t| project(t[0].conv2d(&t[1], Some(&t[2]), 2, 1)?, s)),
        },
        Case {
            op: "relu",
            inputs: vec![[2, 2, 4, 5]],
            loss: |s| Box::new(move |t| project(t[0].relu(), s)),
        },
        Case {
            op: "add",
            inputs: vec![[1, 3, 4, 4], [1, 3, 4, 4]],
            loss: |s| Box::new(move |t| project(t[0].add(&t[1])?, s)),
        },
        Case {
            op: "pixel_shuffle",
            inputs: vec![[1, 8, 3, 4]],
            loss: |s| Box::new(move |t| project(t[0].pixel_shuffle(2)?, s)),
        },
        Case {
            op: "bilinear_down",
            inputs: vec![[1, 2, 7, 6]],
            loss: |s| Box::new(move |t| project(bilinear_resize(&t[0], 4, 3)?, s)),
        },
        Case {
            op: "bilinear_up",
            inputs: vec![[1, 2, 3, 4]],
            loss: |s| Box::new(move |t| project(bilinear_resize(&t[0], 7, 9)?, s)),
        },
        Case {
            op: "avgpool_down",
            inputs: vec![[1, 2, 7, 6]],
            loss: |s| Box::new(move |t| project(avgpool_down(&t[0], 2, (4, 3))?, s)),
        },
        Case {
            op: "nearest_up",
            inputs: vec![[1, 2, 3, 3]],
            loss: |s| Box::new(move |t| project(nearest_up(&t[0], 2, (6, 5))?, s)),
        },
        Case {
            op: "strided_down",
            inputs: vec![[1, 2, 7, 6], [2, 2, 4, 4]],
            loss: |s| Box::new(move |t| project(strided_down(&t[0], &t[1], 2, (4, 3))?, s)),
        },
        Case {
            op: "strided_up",
            inputs: vec![[1, 2, 4, 3], [2, 2, 4, 4]],
            loss: |s| Box::new(move |t| project(strided_up(&t[0], &t[1], 2, (7, 6))?, s)),
        },
        Case {
            op: "scalewise_block_bilinear",
            inputs: block_inputs(),
            loss: |s| {
                Box::new(move |t| {
                    let r = Resampler::Bilinear;
                    let pyr = build_pyramid(&t[0], 3, Ratio::HALF, &r)?;
                    let out = scalewise_residual_block(&pyr, &block_weights(t), 1, &r)?;
                    let mut total = project(out.scale(0).clone(), s)?;
                    for (i, x) in out.scales().iter().enumerate().skip(1) {
                        total = total.add(&project(x.clone(), derive(s, &[i as u64]))?)?;
                    }
                    Ok(total)
                })
            },
        },
        Case {
            op: "scalewise_block_strided",
            inputs: block_inputs(),
            loss: |s| {
                Box::new(move |t| {
                    let (down, up) = box_kernels::<f64>(2, 2);
                    let perturb = |k: Tensor<f64>, salt: u64| k.add(&random(k.dims(), derive(s, &[salt])).scale(0.1));
                    let r = Resampler::StridedConvDeconv {
                        down: Some(perturb(down, 1)?),
                        up: Some(perturb(up, 2)?),
                    };
                    let pyr = build_pyramid(&t[0], 3, Ratio::HALF, &r)?;
                    let out = scalewise_residual_block(&pyr, &block_weights(t), 1, &r)?;
                    let mut total = project(out.scale(0).clone(), s)?;
                    for (i, x) in out.scales().iter().enumerate().skip(1) {
                        total = total.add(&project(x.clone(), derive(s, &[i as u64]))?)?;
                    }
                    Ok(total)
                })
            },
        },
        Case {
            op: "l1_loss",
            inputs: vec![[2, 3, 4, 4], [2, 3, 4, 4]],
            loss: |_| Box::new(|t| t[0].l1_loss(&t[1])),
        },
    ]
}

/// Names of the checked operations, in suite order.
pub fn suite_ops() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

/// Runs every case for seeds `0..seeds` in 64-bit with central differences.
pub fn run_grad_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut results = Vec::new();
    for case in cases() {
        for seed in 0..seeds {
            let inputs: Vec<Tensor<f64>> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(i, &d)| random(d, derive(seed, &[i as u64, 0x51])))
                .collect();
            let report = grad_check((case.loss)(seed), &inputs, SUITE_STEP, SUITE_TOLERANCE)?;
            results.push(GradCase {
                op: case.op,
                seed,
                max_rel_error: report.max_rel_error(),
                passed: report.passed(),
            });
        }
    }
    Ok(results)
}
