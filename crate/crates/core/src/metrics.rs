//! Image quality metrics.

use crate::error::{Result, ScnError};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(ScnError::shape(format!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims())))
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(max^2 / mse)` in dB; infinite for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / m).log10() })
}

/// ITU-R BT.601 luma on the 0-255 scale: `16 + 65.481 R + 128.553 G + 24.966 B`.
pub fn rgb_to_y(img: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = img.dims();
    if c != 3 {
        return Err(ScnError::shape(format!("rgb_to_y needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let d = &img.data()[b * 3 * plane..(b + 1) * 3 * plane];
        out.extend((0..plane).map(|p| {
            (16.0 + 65.481 * d[p] as f64 + 128.553 * d[plane + p] as f64 + 24.966 * d[2 * plane + p] as f64) as f32
        }));
    }
    Tensor::from_vec([n, 1, h, w], out)
}

/// Single channel in `[0, 1]` that metrics are computed on: luma / 255 for
/// color images, the image itself for grayscale.
pub fn luma_plane(img: &Tensor) -> Result<Tensor> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => Ok(rgb_to_y(img)?.map(|v| v / 255.0)),
        c => Err(ScnError::shape(format!("cannot take luma of {c} channels"))),
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 1, averaged over valid window positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let [n, c, h, w] = a.dims();
    if c != 1 {
        return Err(ScnError::shape(format!("ssim needs single-channel inputs, got {c}")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ScnError::shape(format!("ssim needs at least 11x11 pixels, got {h}x{w}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let x: Vec<f64> = a.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let myy = filter_valid(&prod(&y, &y), h, w, &taps);
        let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
        for j in 0..mx.len() {
            let (ux, uy) = (mx[j], my[j]);
            let vx = mxx[j] - ux * ux;
            let vy = myy[j] - uy * uy;
            let cov = mxy[j] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;
    use proptest::prelude::*;

    fn random(dims: [usize; 4], seed: u64) -> Tensor {
        Tensor::create(dims, Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    /// Direct 2-D window sums, no separability.
    fn ssim_brute(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = a.spatial();
        let g = gaussian_taps(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dy] * g[dx];
                        let p = a.at(0, 0, y0 + dy, x0 + dx) as f64;
                        let q = b.at(0, 0, y0 + dy, x0 + dx) as f64;
                        ux += wt * p;
                        uy += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let (vx, vy, cov) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random([1, 1, 16, 16], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 1.0 / 255.0);
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-4);
        assert!((expect - 48.1308).abs() < 1e-4);
        let zeros = Tensor::zeros([1, 1, 4, 4]);
        let ones = Tensor::full([1, 1, 4, 4], 1.0);
        assert!(psnr(&zeros, &ones, 1.0).unwrap().abs() < 1e-12);
        assert!(matches!(psnr(&zeros, &a, 1.0), Err(ScnError::Shape(_))));
    }

    #[test]
    fn luma_examples() {
        let y = |v: f32| rgb_to_y(&Tensor::full([1, 3, 1, 1], v)).unwrap().data()[0];
        assert!((y(1.0) - 235.0).abs() < 1e-4);
        assert!((y(0.0) - 16.0).abs() < 1e-6);
        assert!((y(0.5) - 125.5).abs() < 1e-4);
        assert!(rgb_to_y(&Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn ssim_identity_and_shift() {
        let a = random([1, 1, 20, 18], 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = 0.2f64;
        let flat = Tensor::full([1, 1, 16, 16], c as f32);
        let shifted = flat.map(|v| v + 0.5);
        let d = c + 0.5;
        let c1 = 1e-4;
        let expect = (2.0 * c * d + c1) / (c * c + d * d + c1);
        assert!((ssim(&flat, &shifted).unwrap() - expect).abs() < 1e-4);
    }

    #[test]
    fn ssim_rejects_bad_inputs() {
        let small = Tensor::zeros([1, 1, 10, 20]);
        assert!(matches!(ssim(&small, &small), Err(ScnError::Shape(_))));
        let rgb = Tensor::zeros([1, 3, 12, 12]);
        assert!(matches!(ssim(&rgb, &rgb), Err(ScnError::Shape(_))));
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let g = gaussian_taps(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..11 {
            assert!((g[i] - g[10 - i]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn ssim_matches_direct_windows_and_is_symmetric(h in 11usize..18, w in 11usize..18, seed in any::<u64>()) {
            let a = random([1, 1, h, w], seed);
            let b = random([1, 1, h, w], seed ^ 1);
            let fast = ssim(&a, &b).unwrap();
            prop_assert!((fast - ssim_brute(&a, &b)).abs() < 1e-9);
            prop_assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&fast));
        }
    }
}
