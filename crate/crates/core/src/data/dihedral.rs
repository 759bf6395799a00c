//! The eight symmetries of the square acting on the spatial axes.
//!
//! Element `idx = 2a + b` is `rot90^a ∘ flip^b`: an optional horizontal flip
//! followed by `a` counter-clockwise quarter turns.

use crate::error::{Result, ScnError};
use crate::tensor::{Element, Tensor};

pub const GROUP_ORDER: usize = 8;

fn check(idx: usize) -> Result<()> {
    if idx < GROUP_ORDER {
        Ok(())
    } else {
        Err(ScnError::config(format!("dihedral index must be in 0..8, got {idx}")))
    }
}

/// Index of the element that undoes `idx`.
pub fn inverse(idx: usize) -> Result<usize> {
    check(idx)?;
    let (a, b) = (idx / 2, idx % 2);
    // Reflections are involutions; rotations invert to the opposite turn.
    Ok(if b == 1 { idx } else { 2 * ((4 - a) % 4) })
}

/// Source pixel `(y, x)` of output pixel `(oy, ox)` for the transform, where
/// `(h, w)` is the input size.
fn source(idx: usize, h: usize, w: usize, oy: usize, ox: usize) -> (usize, usize) {
    let (a, b) = (idx / 2, idx % 2);
    // Undo the rotations on the output coordinate, one quarter turn at a time.
    let (mut y, mut x) = (oy, ox);
    let (mut ch, mut cw) = if a % 2 == 1 { (w, h) } else { (h, w) };
    for _ in 0..a {
        // Output (y, x) of a ccw turn reads input (x, hh - 1 - y), where the
        // turned grid's height hh is the input width.
        let (py, px) = (x, ch - 1 - y);
        (y, x) = (py, px);
        (ch, cw) = (cw, ch);
    }
    debug_assert_eq!((ch, cw), (h, w));
    if b == 1 {
        x = w - 1 - x;
    }
    (y, x)
}

/// Applies element `idx` to every `(h, w)` plane of `x`.
pub fn transform<T: Element>(x: &Tensor<T>, idx: usize) -> Result<Tensor<T>> {
    check(idx)?;
    let [n, c, h, w] = x.dims();
    let (oh, ow) = if (idx / 2) % 2 == 1 { (w, h) } else { (h, w) };
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    let map: Vec<usize> = (0..oh * ow)
        .map(|o| {
            let (sy, sx) = source(idx, h, w, o / ow, o % ow);
            sy * w + sx
        })
        .collect();
    for p in 0..n * c {
        let src = &x.data()[p * plane..(p + 1) * plane];
        out.extend(map.iter().map(|&s| src[s]));
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

/// Applies the inverse of element `idx`.
pub fn untransform<T: Element>(x: &Tensor<T>, idx: usize) -> Result<Tensor<T>> {
    transform(x, inverse(idx)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec([1, 1, h, w], (0..h * w).map(|v| v as f32).collect()).unwrap()
    }

    // Reference built from explicit single-step operations.
    fn rot_ccw(t: &Tensor<f32>) -> Tensor<f32> {
        let [_, _, h, w] = t.dims();
        let mut out = vec![0.0; h * w];
        for y in 0..w {
            for x in 0..h {
                out[y * h + x] = t.at(0, 0, x, w - 1 - y);
            }
        }
        Tensor::from_vec([1, 1, w, h], out).unwrap()
    }

    fn flip(t: &Tensor<f32>) -> Tensor<f32> {
        let [_, _, h, w] = t.dims();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = t.at(0, 0, y, w - 1 - x);
            }
        }
        Tensor::from_vec([1, 1, h, w], out).unwrap()
    }

    #[test]
    fn matches_composition_of_single_steps() {
        let g = grid(3, 5);
        for idx in 0..8 {
            let mut expect = if idx % 2 == 1 { flip(&g) } else { g.clone() };
            for _ in 0..idx / 2 {
                expect = rot_ccw(&expect);
            }
            let got = transform(&g, idx).unwrap();
            assert_eq!(got.dims(), expect.dims(), "idx {idx}");
            assert_eq!(got.data(), expect.data(), "idx {idx}");
        }
    }

    #[test]
    fn quarter_turn_example() {
        // [[0 1 2] [3 4 5]] turned counter-clockwise.
        let t = transform(&grid(2, 3), 2).unwrap();
        assert_eq!(t.dims(), [1, 1, 3, 2]);
        assert_eq!(t.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn identity_and_half_turn() {
        let g = grid(4, 3);
        assert_eq!(transform(&g, 0).unwrap().data(), g.data());
        let twice = transform(&transform(&g, 4).unwrap(), 4).unwrap();
        assert_eq!(twice.data(), g.data());
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(transform(&grid(2, 2), 8), Err(ScnError::Config(_))));
        assert!(inverse(9).is_err());
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(
            n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()
        ) {
            let x = Tensor::<f32>::create([n, c, h, w], Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
            for idx in 0..8 {
                let back = untransform(&transform(&x, idx).unwrap(), idx).unwrap();
                prop_assert_eq!(back.dims(), x.dims());
                prop_assert_eq!(back.data(), x.data());
            }
        }
    }
}
