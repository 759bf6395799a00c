//! Deterministic procedural images with edges and multi-frequency texture.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Corpus;
use crate::tensor::Tensor;

struct Grating {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: [f64; 3],
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

/// A `(1, channels, h, w)` image in `[0, 1]`, quantized to 8-bit levels:
/// oriented gratings of mixed frequency over a smooth gradient, overlaid
/// with flat-colored rectangles and discs.
pub fn textured_image(h: usize, w: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<Grating> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.02..0.35);
            let angle = rng.random_range(0.0..PI);
            Grating {
                fy: freq * angle.sin(),
                fx: freq * angle.cos(),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: [0; 3].map(|_| rng.random_range(0.03..0.12)),
            }
        })
        .collect();
    let base: [f64; 3] = [0; 3].map(|_| rng.random_range(0.3..0.7));
    let slope: [f64; 2] = [0; 2].map(|_| rng.random_range(-0.2..0.2));
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(2..5))
        .map(|_| {
            let color = [0; 3].map(|_| rng.random_range(0.05..0.95));
            let shape = if rng.random_bool(0.5) {
                let (y0, x0) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(3.0..(h as f64 / 2.0).max(4.0)),
                    x1: x0 + rng.random_range(3.0..(w as f64 / 2.0).max(4.0)),
                }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.0..h as f64),
                    cx: rng.random_range(0.0..w as f64),
                    r: rng.random_range(2.0..(h.min(w) as f64 / 4.0).max(3.0)),
                }
            };
            (shape, color)
        })
        .collect();

    let mut data = vec![0.0f32; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut rgb = [0.0; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = base[c] + slope[0] * (fy / h as f64 - 0.5) + slope[1] * (fx / w as f64 - 0.5);
                for g in &gratings {
                    *v += g.amp[c] * (2.0 * PI * (g.fy * fy + g.fx * fx) + g.phase).sin();
                }
            }
            for (shape, color) in &shapes {
                let inside = match *shape {
                    Shape::Rect { y0, x0, y1, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
                    Shape::Disc { cy, cx, r } => (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r,
                };
                if inside {
                    // Keep some texture inside the shape.
                    for c in 0..3 {
                        rgb[c] = 0.7 * color[c] + 0.3 * rgb[c];
                    }
                }
            }
            let values: Vec<f64> = if channels == 1 {
                vec![0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]]
            } else {
                rgb.to_vec()
            };
            for (c, v) in values.into_iter().enumerate() {
                data[(c * h + y) * w + x] = super::quantize(v as f32) as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec([1, channels, h, w], data).expect("dims match data")
}

/// `n` textured images named `synthetic_000.png`, ... (names only; nothing is
/// written to disk).
pub fn synthetic_corpus(n: usize, h: usize, w: usize, channels: usize, seed: u64) -> Corpus {
    Corpus {
        images: (0..n)
            .map(|i| {
                let name = PathBuf::from(format!("synthetic_{i:03}.png"));
                (name, textured_image(h, w, channels, crate::seed::derive(seed, &[i as u64])))
            })
            .collect(),
    }
}
