//! Differentiable forward operations.

use super::gemm::{col2im, im2col, matmul, Window};
use super::{numel, Dims, Element, OpKind, Tensor};
use crate::error::{Result, ScnError};

/// `floor((size + 2*pad - kernel) / stride) + 1`, or `None` if no window fits.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride >= 1 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Explicit window placement for [`Tensor::conv2d_with`]: leading padding and
/// exact output size. Reads past the trailing edge are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(ScnError::shape(format!(
            "{what}: dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.dims(),
            data,
            OpKind::Add,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.dims(),
            data,
            OpKind::Sub,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (x, y) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.dims(),
            data,
            OpKind::Mul,
            vec![self.clone(), other.clone()],
            move |g| {
                let gx = (x.requires_grad())
                    .then(|| g.iter().zip(y.data()).map(|(&g, &b)| g * b).collect());
                let gy = (y.requires_grad())
                    .then(|| g.iter().zip(x.data()).map(|(&g, &a)| g * a).collect());
                vec![gx, gy]
            },
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(self.dims(), data, OpKind::Scale, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * factor).collect())]
        })
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op([1, 1, 1, 1], vec![total], OpKind::Sum, vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        let inv = T::one() / T::from_usize(n).expect("count");
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let len = self.numel();
        Tensor::from_op([1, 1, 1, 1], vec![total * inv], OpKind::Mean, vec![self.clone()], move |g| {
            vec![Some(vec![g[0] * inv; len])]
        })
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let x = self.clone();
        Tensor::from_op(self.dims(), data, OpKind::Relu, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    /// Mean absolute error between `self` and `target`.
    pub fn l1_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(self, target, "l1_loss")?;
        let n = self.numel().max(1);
        let inv = T::one() / T::from_usize(n).expect("count");
        let total = self
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        let (p, t) = (self.clone(), target.clone());
        Ok(Tensor::from_op(
            [1, 1, 1, 1],
            vec![total * inv],
            OpKind::L1Loss,
            vec![self.clone(), target.clone()],
            move |g| {
                let s: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let sign = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        sign * g[0] * inv
                    })
                    .collect();
                let gt = t.requires_grad().then(|| s.iter().map(|&v| -v).collect());
                vec![Some(s), gt]
            },
        ))
    }

    /// 2-D convolution with symmetric zero padding.
    ///
    /// `weight` is `(c_out, c_in, kh, kw)`; `bias`, when given, holds `c_out`
    /// values in any 4-D layout.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let [_, _, kh, kw] = weight.dims();
        let (h, w) = self.spatial();
        if stride == 0 {
            return Err(ScnError::shape("conv2d stride must be >= 1"));
        }
        let out_h = conv_output_size(h, kh, stride, pad);
        let out_w = conv_output_size(w, kw, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(ScnError::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
            )));
        };
        self.conv2d_with(
            weight,
            bias,
            ConvGeometry {
                stride,
                pad_h: pad,
                pad_w: pad,
                out_h,
                out_w,
            },
        )
    }

    /// Convolution with explicit window placement.
    pub fn conv2d_with(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeometry,
    ) -> Result<Tensor<T>> {
        let [batch, c_in, h, w] = self.dims();
        let [c_out, wc_in, kh, kw] = weight.dims();
        if wc_in != c_in {
            return Err(ScnError::shape(format!(
                "conv2d expects {wc_in} input channels, got {c_in}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != c_out {
                return Err(ScnError::shape(format!(
                    "conv2d bias has {} values for {c_out} output channels",
                    b.numel()
                )));
            }
        }
        if geom.stride == 0 || geom.out_h == 0 || geom.out_w == 0 {
            return Err(ScnError::shape("conv2d output size must be positive"));
        }
        let win = Window {
            channels: c_in,
            in_h: h,
            in_w: w,
            kh,
            kw,
            stride: geom.stride,
            pad_h: geom.pad_h,
            pad_w: geom.pad_w,
            out_h: geom.out_h,
            out_w: geom.out_w,
        };
        let rows = win.col_rows();
        let ohw = win.col_cols();
        let in_len = c_in * h * w;
        let out_len = c_out * ohw;
        let mut out = vec![T::zero(); batch * out_len];
        let mut cols = vec![T::zero(); rows * ohw];
        for b in 0..batch {
            im2col(&self.data()[b * in_len..(b + 1) * in_len], &win, &mut cols);
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            matmul(c_out, rows, ohw, weight.data(), false, &cols, false, dst, false);
            if let Some(bias) = bias {
                for (co, &bv) in bias.data().iter().enumerate() {
                    for v in &mut dst[co * ohw..(co + 1) * ohw] {
                        *v = *v + bv;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        let bias_grad_needed = bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(Tensor::from_op(
            [batch, c_out, geom.out_h, geom.out_w],
            out,
            OpKind::Conv2d,
            parents,
            move |g| {
                let mut dx = x.requires_grad().then(|| vec![T::zero(); batch * in_len]);
                let mut dw = wt.requires_grad().then(|| vec![T::zero(); wt.numel()]);
                let mut cols = vec![T::zero(); rows * ohw];
                for b in 0..batch {
                    let gb = &g[b * out_len..(b + 1) * out_len];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&x.data()[b * in_len..(b + 1) * in_len], &win, &mut cols);
                        matmul(c_out, ohw, rows, gb, false, &cols, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(rows, c_out, ohw, wt.data(), true, gb, false, &mut cols, false);
                        col2im(&cols, &win, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    let db = bias_grad_needed.then(|| {
                        let mut db = vec![T::zero(); c_out];
                        for b in 0..batch {
                            for (co, slot) in db.iter_mut().enumerate() {
                                let base = b * out_len + co * ohw;
                                *slot = g[base..base + ohw].iter().fold(*slot, |a, &v| a + v);
                            }
                        }
                        db
                    });
                    grads.push(db);
                }
                grads
            },
        ))
    }

    /// Transposed convolution: the adjoint of a strided convolution that maps
    /// an `(out_h, out_w)` image onto `self`'s spatial size.
    ///
    /// `weight` is `(c_in, c_out, kh, kw)` where `c_in` is `self`'s channel count.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>> {
        let [batch, c_in, h, w] = self.dims();
        let [wc_in, c_out, kh, kw] = weight.dims();
        if wc_in != c_in {
            return Err(ScnError::shape(format!(
                "conv_transpose2d expects {wc_in} input channels, got {c_in}"
            )));
        }
        if stride == 0 || out_h == 0 || out_w == 0 {
            return Err(ScnError::shape("conv_transpose2d output size must be positive"));
        }
        let win = Window {
            channels: c_out,
            in_h: out_h,
            in_w: out_w,
            kh,
            kw,
            stride,
            pad_h: pad,
            pad_w: pad,
            out_h: h,
            out_w: w,
        };
        let rows = win.col_rows();
        let hw = h * w;
        let in_len = c_in * hw;
        let out_len = c_out * out_h * out_w;
        let mut out = vec![T::zero(); batch * out_len];
        let mut cols = vec![T::zero(); rows * hw];
        for b in 0..batch {
            matmul(
                rows,
                c_in,
                hw,
                weight.data(),
                true,
                &self.data()[b * in_len..(b + 1) * in_len],
                false,
                &mut cols,
                false,
            );
            col2im(&cols, &win, &mut out[b * out_len..(b + 1) * out_len]);
        }
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            [batch, c_out, out_h, out_w],
            out,
            OpKind::ConvTranspose2d,
            vec![self.clone(), weight.clone()],
            move |g| {
                let mut dx = x.requires_grad().then(|| vec![T::zero(); batch * in_len]);
                let mut dw = wt.requires_grad().then(|| vec![T::zero(); wt.numel()]);
                let mut cols = vec![T::zero(); rows * hw];
                for b in 0..batch {
                    im2col(&g[b * out_len..(b + 1) * out_len], &win, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[b * in_len..(b + 1) * in_len];
                        matmul(c_in, rows, hw, wt.data(), false, &cols, false, dst, false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x.data()[b * in_len..(b + 1) * in_len];
                        matmul(c_in, hw, rows, xb, false, &cols, true, dw, true);
                    }
                }
                vec![dx, dw]
            },
        ))
    }

    /// `(b, c*r*r, h, w) -> (b, c, h*r, w*r)`; input channel `c*r*r + dy*r + dx`
    /// lands at output offset `(dy, dx)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [b, cr2, h, w] = self.dims();
        if r == 0 || cr2 % (r * r) != 0 {
            return Err(ScnError::shape(format!(
                "pixel_shuffle: {cr2} channels not divisible by {r}^2"
            )));
        }
        let c = cr2 / (r * r);
        let out_dims = [b, c, h * r, w * r];
        let perm = shuffle_permutation(b, c, h, w, r);
        let mut out = vec![T::zero(); self.numel()];
        for (src, &dst) in perm.iter().enumerate() {
            out[dst] = self.data()[src];
        }
        Ok(Tensor::from_op(out_dims, out, OpKind::PixelShuffle, vec![self.clone()], move |g| {
            vec![Some(perm.iter().map(|&dst| g[dst]).collect())]
        }))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [b, c, hr, wr] = self.dims();
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(ScnError::shape(format!(
                "pixel_unshuffle: spatial {hr}x{wr} not divisible by {r}"
            )));
        }
        let (h, w) = (hr / r, wr / r);
        let perm = shuffle_permutation(b, c, h, w, r);
        let out: Vec<T> = perm.iter().map(|&src| self.data()[src]).collect();
        Ok(Tensor::from_op(
            [b, c * r * r, h, w],
            out,
            OpKind::PixelUnshuffle,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::zero(); g.len()];
                for (i, &src) in perm.iter().enumerate() {
                    dx[src] = g[i];
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| ScnError::shape("concat of zero tensors"))?;
        let [b, _, h, w] = first.dims();
        for p in parts {
            let [pb, _, ph, pw] = p.dims();
            if (pb, ph, pw) != (b, h, w) {
                return Err(ScnError::shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    p.dims(),
                    first.dims()
                )));
            }
        }
        let chans: Vec<usize> = parts.iter().map(|p| p.channels()).collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&p.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let dims = [b, total, h, w];
        Ok(Tensor::from_op(dims, out, OpKind::ConcatChannels, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(b * c * hw)).collect();
            let mut offset = 0;
            for _ in 0..b {
                for (gp, &c) in grads.iter_mut().zip(&chans) {
                    gp.extend_from_slice(&g[offset..offset + c * hw]);
                    offset += c * hw;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

/// For each input index of a shuffle with factor `r`, its output index.
fn shuffle_permutation(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let in_dims: Dims = [b, c * r * r, h, w];
    let (oh, ow) = (h * r, w * r);
    let mut perm = Vec::with_capacity(numel(&in_dims));
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..h {
                        for x in 0..w {
                            perm.push(((bi * c + ci) * oh + y * r + dy) * ow + x * r + dx);
                        }
                    }
                }
            }
        }
    }
    perm
}
