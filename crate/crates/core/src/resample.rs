//! Spatial re-scaling operators used to move features between pyramid scales,
//! plus the bicubic resizer used to synthesize low-resolution inputs.
//!
//! All coordinate mappings use half-pixel centers: destination pixel `d`
//! samples source coordinate `(d + 0.5) * src / dst - 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScnError};
use crate::ratio::Ratio;
use crate::tensor::{ConvGeometry, Element, OpKind, Tensor};

/// The three families of down/up operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplerKind {
    /// Strided convolution down, transposed convolution up (learned kernels).
    StridedConvDeconv,
    /// Block average down, nearest-neighbour replication up.
    AvgpoolNearest,
    Bilinear,
}

impl ResamplerKind {
    pub const ALL: [ResamplerKind; 3] = [
        ResamplerKind::StridedConvDeconv,
        ResamplerKind::AvgpoolNearest,
        ResamplerKind::Bilinear,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ResamplerKind::StridedConvDeconv => "strided_conv_deconv",
            ResamplerKind::AvgpoolNearest => "avgpool_nearest",
            ResamplerKind::Bilinear => "bilinear",
        }
    }

    /// Integer stride for the integer-only kinds; `None` for bilinear.
    pub fn stride_for(&self, ratio: Ratio) -> Result<Option<usize>> {
        match self {
            ResamplerKind::Bilinear => Ok(None),
            _ => ratio.integer_stride().map(Some).ok_or_else(|| {
                ScnError::config(format!(
                    "{} resampling needs an integer-reciprocal ratio, got {ratio}",
                    self.name()
                ))
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Kernel side for the strided kind: twice the stride.
pub fn strided_kernel_size(stride: usize) -> usize {
    2 * stride
}

/// Leading zero padding paired with [`strided_kernel_size`].
pub fn strided_padding(stride: usize) -> usize {
    stride / 2
}

/// A resampling family bound to whatever learned weights it needs.
#[derive(Clone, Debug)]
pub enum Resampler<T: Element> {
    Bilinear,
    AvgpoolNearest,
    /// `down` is `(c, c, K, K)` for a strided conv, `up` is `(c, c, K, K)` for
    /// the transposed conv, with `K = 2 * stride`. Either may be absent when
    /// the caller only moves features in one direction.
    StridedConvDeconv {
        down: Option<Tensor<T>>,
        up: Option<Tensor<T>>,
    },
}

impl<T: Element> Resampler<T> {
    pub fn kind(&self) -> ResamplerKind {
        match self {
            Resampler::Bilinear => ResamplerKind::Bilinear,
            Resampler::AvgpoolNearest => ResamplerKind::AvgpoolNearest,
            Resampler::StridedConvDeconv { .. } => ResamplerKind::StridedConvDeconv,
        }
    }

    /// Move `x` one pyramid step in `direction`, producing exactly `target`.
    pub fn resample(
        &self,
        direction: Direction,
        x: &Tensor<T>,
        ratio: Ratio,
        target: (usize, usize),
    ) -> Result<Tensor<T>> {
        let stride = self.kind().stride_for(ratio)?;
        match (self, direction) {
            (Resampler::Bilinear, _) => bilinear_resize(x, target.0, target.1),
            (Resampler::AvgpoolNearest, Direction::Down) => avgpool_down(x, stride.unwrap_or(1), target),
            (Resampler::AvgpoolNearest, Direction::Up) => nearest_up(x, stride.unwrap_or(1), target),
            (Resampler::StridedConvDeconv { down, .. }, Direction::Down) => {
                let k = down
                    .as_ref()
                    .ok_or_else(|| ScnError::config("strided resampler has no down kernel"))?;
                strided_down(x, k, stride.unwrap_or(1), target)
            }
            (Resampler::StridedConvDeconv { up, .. }, Direction::Up) => {
                let k = up
                    .as_ref()
                    .ok_or_else(|| ScnError::config("strided resampler has no up kernel"))?;
                strided_up(x, k, stride.unwrap_or(1), target)
            }
        }
    }
}

/// Free-function form of [`Resampler::resample`].
pub fn resample<T: Element>(
    resampler: &Resampler<T>,
    direction: Direction,
    x: &Tensor<T>,
    ratio: Ratio,
    target: (usize, usize),
) -> Result<Tensor<T>> {
    resampler.resample(direction, x, ratio, target)
}

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(ScnError::shape(format!("resize target {out_h}x{out_w} must be positive")));
    }
    Ok(())
}

fn check_source<T: Element>(x: &Tensor<T>) -> Result<()> {
    let (h, w) = x.spatial();
    if h == 0 || w == 0 {
        return Err(ScnError::shape("cannot resample an empty image"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct LinearTap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<LinearTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let frac = s - lo as f64;
            LinearTap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Differentiable bilinear resize with half-pixel centers and clamped
/// source coordinates.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_target(out_h, out_w)?;
    check_source(x)?;
    let [b, c, h, w] = x.dims();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let planes = b * c;
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let top = &src[ry.lo * w..(ry.lo + 1) * w];
            let bot = &src[ry.hi * w..(ry.hi + 1) * w];
            let (wy0, wy1) = (T::from_f64_lossy(ry.w_lo), T::from_f64_lossy(ry.w_hi));
            for (ox, rx) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(rx.w_lo), T::from_f64_lossy(rx.w_hi));
                let upper = top[rx.lo] * wx0 + top[rx.hi] * wx1;
                let lower = bot[rx.lo] * wx0 + bot[rx.hi] * wx1;
                dst[oy * out_w + ox] = upper * wy0 + lower * wy1;
            }
        }
    }
    Ok(Tensor::from_op(
        [b, c, out_h, out_w],
        out,
        OpKind::BilinearResize,
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dp = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, ry) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::from_f64_lossy(ry.w_lo), T::from_f64_lossy(ry.w_hi));
                    for (ox, rx) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::from_f64_lossy(rx.w_lo), T::from_f64_lossy(rx.w_hi));
                        let gv = gp[oy * out_w + ox];
                        dp[ry.lo * w + rx.lo] = dp[ry.lo * w + rx.lo] + gv * wy0 * wx0;
                        dp[ry.lo * w + rx.hi] = dp[ry.lo * w + rx.hi] + gv * wy0 * wx1;
                        dp[ry.hi * w + rx.lo] = dp[ry.hi * w + rx.lo] + gv * wy1 * wx0;
                        dp[ry.hi * w + rx.hi] = dp[ry.hi * w + rx.hi] + gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 4]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let base = s.floor() as isize - 1;
            let mut taps = [(0usize, 0.0f64); 4];
            for (t, slot) in taps.iter_mut().enumerate() {
                let i = base + t as isize;
                let clamped = i.clamp(0, src as isize - 1) as usize;
                *slot = (clamped, cubic_kernel(s - i as f64));
            }
            taps
        })
        .collect()
}

/// 5x5 kernel mapping `channels` inputs to `channels * factor^2` sub-pixel
/// outputs such that `pixel_shuffle(conv(x, kernel, pad 2), factor)` is the
/// bicubic upscale of `x` away from the borders (where zero padding replaces
/// edge clamping).
pub fn bicubic_upscale_kernel<T: Element>(channels: usize, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 || factor > 4 {
        return Err(ScnError::config(format!("bicubic upscale kernel supports factors 1-4, got {factor}")));
    }
    // Per phase: the source offset relative to the centre pixel and its taps.
    let taps: Vec<[f64; 5]> = (0..factor)
        .map(|d| {
            let t = (d as f64 + 0.5) / factor as f64 - 0.5;
            let mut row = [0.0; 5];
            for (j, w) in row.iter_mut().enumerate() {
                *w = cubic_kernel(t - (j as f64 - 2.0));
            }
            row
        })
        .collect();
    let f2 = factor * factor;
    let mut data = vec![T::zero(); channels * f2 * channels * 25];
    for c in 0..channels {
        for dy in 0..factor {
            for dx in 0..factor {
                let o = c * f2 + dy * factor + dx;
                for ky in 0..5 {
                    for kx in 0..5 {
                        data[((o * channels + c) * 5 + ky) * 5 + kx] = T::from_f64_lossy(taps[dy][ky] * taps[dx][kx]);
                    }
                }
            }
        }
    }
    Tensor::from_vec([channels * f2, channels, 5, 5], data)
}

/// Separable bicubic resize with half-pixel centers and edge clamping.
/// No anti-aliasing and no output clamping; not differentiable.
pub fn bicubic_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_target(out_h, out_w)?;
    check_source(x)?;
    let [b, c, h, w] = x.dims();
    let ty = cubic_taps(h, out_h);
    let tx = cubic_taps(w, out_w);
    let planes = b * c;
    let mut out = vec![T::zero(); planes * out_h * out_w];
    let mut rows = vec![0.0f64; h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                rows[y * out_w + ox] = taps
                    .iter()
                    .map(|&(i, k)| src[y * w + i].to_f64().unwrap_or(0.0) * k)
                    .sum();
            }
        }
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, k)| rows[i * out_w + ox] * k).sum();
                dst[oy * out_w + ox] = T::from_f64_lossy(v);
            }
        }
    }
    Tensor::from_vec([b, c, out_h, out_w], out)
}

/// Source span `[start, end)` averaged into output index `o`.
fn pool_span(o: usize, stride: usize, src: usize) -> (usize, usize) {
    let start = (o * stride).min(src - 1);
    let end = (o * stride + stride).min(src).max(start + 1);
    (start, end)
}

/// Block mean over `stride x stride` windows, producing exactly `target`.
/// Windows that run past the edge average only their in-range pixels.
pub fn avgpool_down<T: Element>(x: &Tensor<T>, stride: usize, target: (usize, usize)) -> Result<Tensor<T>> {
    let (out_h, out_w) = target;
    check_target(out_h, out_w)?;
    check_source(x)?;
    if stride == 0 {
        return Err(ScnError::config("avgpool stride must be >= 1"));
    }
    let [b, c, h, w] = x.dims();
    let sy: Vec<(usize, usize)> = (0..out_h).map(|o| pool_span(o, stride, h)).collect();
    let sx: Vec<(usize, usize)> = (0..out_w).map(|o| pool_span(o, stride, w)).collect();
    let planes = b * c;
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1)) in sy.iter().enumerate() {
            for (ox, &(x0, x1)) in sx.iter().enumerate() {
                let mut acc = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + src[yy * w + xx];
                    }
                }
                let n = T::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                out[p * out_h * out_w + oy * out_w + ox] = acc / n;
            }
        }
    }
    Ok(Tensor::from_op(
        [b, c, out_h, out_w],
        out,
        OpKind::AvgPoolDown,
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for (oy, &(y0, y1)) in sy.iter().enumerate() {
                    for (ox, &(x0, x1)) in sx.iter().enumerate() {
                        let n = T::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                        let share = g[p * out_h * out_w + oy * out_w + ox] / n;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let i = p * h * w + yy * w + xx;
                                dx[i] = dx[i] + share;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Nearest-neighbour replication: output `o` copies source `min(o / stride, src - 1)`.
pub fn nearest_up<T: Element>(x: &Tensor<T>, stride: usize, target: (usize, usize)) -> Result<Tensor<T>> {
    let (out_h, out_w) = target;
    check_target(out_h, out_w)?;
    check_source(x)?;
    if stride == 0 {
        return Err(ScnError::config("nearest stride must be >= 1"));
    }
    let [b, c, h, w] = x.dims();
    let planes = b * c;
    let index: Vec<usize> = (0..planes)
        .flat_map(|p| {
            (0..out_h).flat_map(move |oy| {
                let sy = (oy / stride).min(h - 1);
                (0..out_w).map(move |ox| p * h * w + sy * w + (ox / stride).min(w - 1))
            })
        })
        .collect();
    let out = index.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_op(
        [b, c, out_h, out_w],
        out,
        OpKind::NearestUp,
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for (&i, &gv) in index.iter().zip(g) {
                dx[i] = dx[i] + gv;
            }
            vec![Some(dx)]
        },
    ))
}

/// Strided convolution with a `2*stride` kernel, producing exactly `target`.
pub fn strided_down<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    target: (usize, usize),
) -> Result<Tensor<T>> {
    check_target(target.0, target.1)?;
    let pad = strided_padding(stride);
    x.conv2d_with(
        kernel,
        None,
        ConvGeometry {
            stride,
            pad_h: pad,
            pad_w: pad,
            out_h: target.0,
            out_w: target.1,
        },
    )
}

/// Transposed counterpart of [`strided_down`].
pub fn strided_up<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    target: (usize, usize),
) -> Result<Tensor<T>> {
    check_target(target.0, target.1)?;
    x.conv_transpose2d(kernel, stride, strided_padding(stride), target.0, target.1)
}

/// Box kernels that make the strided kind reproduce block-mean down-sampling
/// and nearest up-sampling on channel-diagonal maps (used to pin behaviour in
/// tests and as a reference initialization).
pub fn box_kernels<T: Element>(channels: usize, stride: usize) -> (Tensor<T>, Tensor<T>) {
    let k = strided_kernel_size(stride);
    let pad = strided_padding(stride);
    let mut down = vec![T::zero(); channels * channels * k * k];
    let mut up = vec![T::zero(); channels * channels * k * k];
    let mean = T::one() / T::from_usize(stride * stride).expect("count");
    for c in 0..channels {
        for ky in pad..pad + stride {
            for kx in pad..pad + stride {
                let i = ((c * channels + c) * k + ky) * k + kx;
                down[i] = mean;
                up[i] = T::one();
            }
        }
    }
    (
        Tensor::from_vec([channels, channels, k, k], down).expect("dims"),
        Tensor::from_vec([channels, channels, k, k], up).expect("dims"),
    )
}
