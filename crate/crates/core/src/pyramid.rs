//! Feature pyramids and the scale-wise convolution residual block.
//!
//! A scale-wise convolution slides along the scale axis of a pyramid. For
//! output scale `s` it sums `2k + 1` neighbouring inputs, each passed through
//! a shared spatial transform `p`, an offset-specific point-wise transform
//! `q_i`, and a resampler that brings it to the size of scale `s`:
//!
//! ```text
//! out_s = x_s + sum_{i=-k..k, 1 <= s+i <= N} resample_{s+i -> s}(q_i(p(x_{s+i})))
//! p(x)  = reduce(relu(expand(x)))
//! ```
//!
//! Neighbours that fall outside `[1, N]` are dropped from the sum.

use crate::error::{Result, ScnError};
use crate::ratio::Ratio;
use crate::resample::{Direction, Resampler};
use crate::tensor::{Element, Tensor};

/// Ordered feature maps, scale 0 largest, each a fixed ratio smaller than
/// its predecessor.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Element> {
    scales: Vec<Tensor<T>>,
    ratio: Ratio,
    requested: usize,
}

impl<T: Element> FeaturePyramid<T> {
    /// Wraps existing scales. All scales must share batch and channel counts.
    pub fn from_scales(scales: Vec<Tensor<T>>, ratio: Ratio) -> Result<Self> {
        let first = scales
            .first()
            .ok_or_else(|| ScnError::shape("a pyramid needs at least one scale"))?;
        let (b, c) = (first.batch(), first.channels());
        for s in &scales {
            if (s.batch(), s.channels()) != (b, c) {
                return Err(ScnError::shape(format!(
                    "pyramid scales disagree: {:?} vs {:?}",
                    s.dims(),
                    first.dims()
                )));
            }
        }
        let requested = scales.len();
        Ok(FeaturePyramid {
            scales,
            ratio,
            requested,
        })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn ratio(&self) -> Ratio {
        self.ratio
    }

    pub fn scale(&self, s: usize) -> &Tensor<T> {
        &self.scales[s]
    }

    pub fn scales(&self) -> &[Tensor<T>] {
        &self.scales
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.scales.iter().map(|t| t.spatial()).collect()
    }

    pub fn channels(&self) -> usize {
        self.scales[0].channels()
    }

    /// Number of scales asked for when the pyramid was built.
    pub fn requested_scales(&self) -> usize {
        self.requested
    }

    /// Whether construction stopped early because a scale reached 1x1.
    pub fn truncated(&self) -> bool {
        self.scales.len() < self.requested
    }
}

/// Progressively down-samples `x` into `n` scales: scale `s + 1` is resampled
/// from scale `s`, with sizes `max(1, round(size * ratio))`.
pub fn build_pyramid<T: Element>(
    x: &Tensor<T>,
    n: usize,
    ratio: Ratio,
    down: &Resampler<T>,
) -> Result<FeaturePyramid<T>> {
    if n == 0 {
        return Err(ScnError::config("a pyramid needs at least one scale"));
    }
    let (h, w) = x.spatial();
    if h == 0 || w == 0 {
        return Err(ScnError::shape("cannot build a pyramid from an empty image"));
    }
    let mut scales = vec![x.clone()];
    while scales.len() < n {
        let prev = scales.last().expect("non-empty");
        let (ph, pw) = prev.spatial();
        if (ph, pw) == (1, 1) {
            log::warn!(
                "pyramid reached 1x1 after {} of {n} scales; truncating",
                scales.len()
            );
            break;
        }
        let target = (ratio.scale_size(ph), ratio.scale_size(pw));
        let next = down.resample(Direction::Down, prev, ratio, target)?;
        scales.push(next);
    }
    Ok(FeaturePyramid {
        scales,
        ratio,
        requested: n,
    })
}

/// Weight and optional bias of one convolution, applied with same padding.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        ConvParams { weight, bias }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, kh, _] = self.weight.dims();
        x.conv2d(&self.weight, self.bias.as_ref(), 1, (kh - 1) / 2)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Parameters that are either shared by every scale or instantiated per scale.
#[derive(Clone, Debug)]
pub enum PerScale<P> {
    Shared(P),
    /// Indexed by scale; `None` where a scale has no instance.
    Unshared(Vec<Option<P>>),
}

impl<P> PerScale<P> {
    pub fn get(&self, s: usize) -> Option<&P> {
        match self {
            PerScale::Shared(p) => Some(p),
            PerScale::Unshared(v) => v.get(s).and_then(Option::as_ref),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &P> + '_> {
        match self {
            PerScale::Shared(p) => Box::new(std::iter::once(p)),
            PerScale::Unshared(v) => Box::new(v.iter().flatten()),
        }
    }
}

/// Weights of one scale-wise residual block.
#[derive(Clone, Debug)]
pub struct BlockWeights<T: Element> {
    /// 3x3, `width -> width * mult`.
    pub expand: PerScale<ConvParams<T>>,
    /// 3x3, `width * mult -> width`.
    pub reduce: PerScale<ConvParams<T>>,
    /// 1x1 point-wise maps, `q[i + k]` for offset `i` in `-k..=k`. In the
    /// unshared form each is indexed by the *output* scale.
    pub q: Vec<PerScale<ConvParams<T>>>,
}

impl<T: Element> BlockWeights<T> {
    pub fn k(&self) -> usize {
        self.q.len() / 2
    }

    pub fn param_count(&self) -> usize {
        let count = |p: &PerScale<ConvParams<T>>| p.iter().map(ConvParams::param_count).sum::<usize>();
        count(&self.expand) + count(&self.reduce) + self.q.iter().map(count).sum::<usize>()
    }
}

/// Moves features from scale `from` to scale `to`, stepping through the
/// recorded sizes for the integer-stride kinds and resizing directly for
/// bilinear.
pub fn move_between_scales<T: Element>(
    x: &Tensor<T>,
    from: usize,
    to: usize,
    sizes: &[(usize, usize)],
    ratio: Ratio,
    resampler: &Resampler<T>,
) -> Result<Tensor<T>> {
    if from == to {
        return Ok(x.clone());
    }
    let direction = if to > from { Direction::Down } else { Direction::Up };
    if let Resampler::Bilinear = resampler {
        return resampler.resample(direction, x, ratio, sizes[to]);
    }
    let mut cur = x.clone();
    let mut s = from;
    while s != to {
        s = if to > from { s + 1 } else { s - 1 };
        cur = resampler.resample(direction, &cur, ratio, sizes[s])?;
    }
    Ok(cur)
}

/// One residual block with scale-wise convolution of kernel size `2k + 1`.
pub fn scalewise_residual_block<T: Element>(
    pyr: &FeaturePyramid<T>,
    w: &BlockWeights<T>,
    k: usize,
    resampler: &Resampler<T>,
) -> Result<FeaturePyramid<T>> {
    if w.q.len() != 2 * k + 1 {
        return Err(ScnError::config(format!(
            "block has {} point-wise maps, expected {} for k = {k}",
            w.q.len(),
            2 * k + 1
        )));
    }
    let n = pyr.len();
    let sizes = pyr.sizes();
    let missing = |what: &str, s: usize| ScnError::config(format!("block has no {what} weights for scale {s}"));

    let mut branches = Vec::with_capacity(n);
    for (s, x) in pyr.scales().iter().enumerate() {
        let expand = w.expand.get(s).ok_or_else(|| missing("expand", s))?;
        let reduce = w.reduce.get(s).ok_or_else(|| missing("reduce", s))?;
        if x.channels() != expand.weight.dims()[1] {
            return Err(ScnError::shape(format!(
                "block expects {} channels, pyramid has {}",
                expand.weight.dims()[1],
                x.channels()
            )));
        }
        branches.push(reduce.apply(&expand.apply(x)?.relu())?);
    }

    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut acc: Option<Tensor<T>> = None;
        for i in -(k as isize)..=(k as isize) {
            let src = s as isize + i;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            let q = w.q[(i + k as isize) as usize]
                .get(s)
                .ok_or_else(|| missing(&format!("q[{i:+}]"), s))?;
            let term = q.apply(&branches[src])?;
            let term = move_between_scales(&term, src, s, &sizes, pyr.ratio(), resampler)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        let x = pyr.scale(s);
        out.push(match acc {
            Some(a) => x.add(&a)?,
            None => x.clone(),
        });
    }
    Ok(FeaturePyramid {
        scales: out,
        ratio: pyr.ratio,
        requested: pyr.requested,
    })
}

/// The largest-scale features, which feed the output head.
pub fn collapse_largest<T: Element>(pyr: &FeaturePyramid<T>) -> Tensor<T> {
    pyr.scales[0].clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn rand(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::create(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    fn conv(c_out: usize, c_in: usize, k: usize, seed: u64, bias: bool) -> ConvParams<f64> {
        ConvParams::new(
            rand([c_out, c_in, k, k], seed).scale(0.3),
            bias.then(|| rand([c_out, 1, 1, 1], seed + 1).scale(0.1)),
        )
    }

    fn random_block(width: usize, mult: usize, k: usize, seed: u64, bias: bool) -> BlockWeights<f64> {
        BlockWeights {
            expand: PerScale::Shared(conv(width * mult, width, 3, seed, bias)),
            reduce: PerScale::Shared(conv(width, width * mult, 3, seed + 10, bias)),
            q: (0..2 * k + 1)
                .map(|i| PerScale::Shared(conv(width, width, 1, seed + 20 + 2 * i as u64, bias)))
                .collect(),
        }
    }

    /// Center-tap identity for a square 3x3 or 1x1 conv, zero bias.
    fn identity_conv(c: usize, ksize: usize) -> ConvParams<f64> {
        let mut w = vec![0.0; c * c * ksize * ksize];
        let mid = ksize / 2;
        for i in 0..c {
            w[((i * c + i) * ksize + mid) * ksize + mid] = 1.0;
        }
        ConvParams::new(
            Tensor::from_vec([c, c, ksize, ksize], w).unwrap(),
            Some(Tensor::zeros([c, 1, 1, 1])),
        )
    }

    #[test]
    fn single_scale_pyramid_is_input() {
        let x = rand([1, 2, 5, 5], 1);
        let p = build_pyramid(&x, 1, Ratio::HALF, &Resampler::Bilinear).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.scale(0).data(), x.data());
        assert_eq!(collapse_largest(&p).data(), x.data());
    }

    #[test]
    fn pyramid_sizes_follow_rounding_rule() {
        let x = rand([1, 1, 9, 9], 2);
        let p = build_pyramid(&x, 3, Ratio::new(2, 3).unwrap(), &Resampler::Bilinear).unwrap();
        assert_eq!(p.sizes(), vec![(9, 9), (6, 6), (4, 4)]);
        let x = rand([1, 1, 8, 8], 3);
        let p = build_pyramid(&x, 3, Ratio::HALF, &Resampler::AvgpoolNearest).unwrap();
        assert_eq!(p.sizes(), vec![(8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn pyramid_is_progressive() {
        let x = rand([1, 1, 9, 9], 4);
        let r = Ratio::new(2, 3).unwrap();
        let p = build_pyramid(&x, 3, r, &Resampler::Bilinear).unwrap();
        let step = crate::resample::bilinear_resize(p.scale(1), 4, 4).unwrap();
        assert_eq!(p.scale(2).data(), step.data());
    }

    #[test]
    fn pyramid_truncates_at_one_pixel() {
        let x = rand([1, 1, 4, 4], 5);
        let p = build_pyramid(&x, 6, Ratio::HALF, &Resampler::Bilinear).unwrap();
        assert_eq!(p.sizes(), vec![(4, 4), (2, 2), (1, 1)]);
        assert!(p.truncated());
        assert_eq!(p.requested_scales(), 6);
    }

    #[test]
    fn single_scale_block_is_wide_residual_block() {
        let x = rand([1, 4, 6, 6], 6);
        let w = random_block(4, 2, 0, 7, true);
        let p = FeaturePyramid::from_scales(vec![x.clone()], Ratio::HALF).unwrap();
        let out = scalewise_residual_block(&p, &w, 0, &Resampler::Bilinear).unwrap();
        let (PerScale::Shared(e), PerScale::Shared(r), PerScale::Shared(q)) = (&w.expand, &w.reduce, &w.q[0]) else {
            unreachable!()
        };
        let reference = x.add(&q.apply(&r.apply(&e.apply(&x).unwrap().relu()).unwrap()).unwrap()).unwrap();
        assert_eq!(out.scale(0).data(), reference.data());
    }

    #[test]
    fn k_zero_processes_scales_independently() {
        let x = rand([1, 3, 8, 8], 8);
        let p = build_pyramid(&x, 3, Ratio::HALF, &Resampler::Bilinear).unwrap();
        let w = random_block(3, 2, 0, 9, true);
        let out = scalewise_residual_block(&p, &w, 0, &Resampler::Bilinear).unwrap();
        for s in 0..3 {
            let alone = FeaturePyramid::from_scales(vec![p.scale(s).clone()], Ratio::HALF).unwrap();
            let single = scalewise_residual_block(&alone, &w, 0, &Resampler::Bilinear).unwrap();
            assert_eq!(out.scale(s).data(), single.scale(0).data());
        }
    }

    #[test]
    fn identity_maps_count_neighbours() {
        // With identity p and q, zero biases and a constant pyramid of 1.0, each
        // output is 1 + (number of in-range neighbours) * relu(1).
        let c = 2;
        let w = BlockWeights {
            expand: PerScale::Shared(identity_conv(c, 3)),
            reduce: PerScale::Shared(identity_conv(c, 3)),
            q: (0..3).map(|_| PerScale::Shared(identity_conv(c, 1))).collect(),
        };
        let x = Tensor::<f64>::full([1, c, 8, 8], 1.0);
        let p = build_pyramid(&x, 3, Ratio::HALF, &Resampler::Bilinear).unwrap();
        let out = scalewise_residual_block(&p, &w, 1, &Resampler::Bilinear).unwrap();
        let expect = [3.0, 4.0, 3.0];
        for (s, e) in expect.iter().enumerate() {
            assert!(out.scale(s).data().iter().all(|v| (v - e).abs() < 1e-12), "scale {s}");
        }
    }

    #[test]
    fn block_preserves_shapes() {
        for kind in [0, 1, 2] {
            let x = rand([2, 3, 11, 7], 12);
            let r = if kind == 2 { Ratio::new(2, 3).unwrap() } else { Ratio::HALF };
            let resampler: Resampler<f64> = match kind {
                0 => Resampler::AvgpoolNearest,
                1 => Resampler::StridedConvDeconv {
                    down: Some(rand([3, 3, 4, 4], 13).scale(0.1)),
                    up: Some(rand([3, 3, 4, 4], 14).scale(0.1)),
                },
                _ => Resampler::Bilinear,
            };
            let p = build_pyramid(&x, 4, r, &resampler).unwrap();
            let w = random_block(3, 2, 2, 15, true);
            let out = scalewise_residual_block(&p, &w, 2, &resampler).unwrap();
            assert_eq!(out.sizes(), p.sizes());
            assert_eq!(out.scale(0).dims(), x.dims());
        }
    }

    #[test]
    fn block_rejects_channel_mismatch_and_bad_k() {
        let x = rand([1, 3, 6, 6], 16);
        let p = FeaturePyramid::from_scales(vec![x], Ratio::HALF).unwrap();
        let w = random_block(4, 2, 1, 17, true);
        assert!(matches!(
            scalewise_residual_block(&p, &w, 1, &Resampler::Bilinear),
            Err(ScnError::Shape(_))
        ));
        let w = random_block(3, 2, 1, 17, true);
        assert!(scalewise_residual_block(&p, &w, 2, &Resampler::Bilinear).is_err());
    }

    #[test]
    fn block_parameters_do_not_depend_on_scale_count() {
        let w = random_block(8, 4, 1, 18, true);
        let expand = 32 * 8 * 9 + 32;
        let reduce = 8 * 32 * 9 + 8;
        let q = 3 * (8 * 8 + 8);
        assert_eq!(w.param_count(), expand + reduce + q);
    }

    #[test]
    fn context_grows_one_scale_per_block() {
        // With zero biases, scale 0 after L blocks (k = 1) depends on scale m
        // exactly when L >= m.
        let width = 2;
        let ratio = Ratio::HALF;
        let blocks: Vec<BlockWeights<f64>> = (0..4).map(|b| random_block(width, 2, 1, 100 + 40 * b, false)).collect();
        let sizes = [(16, 16), (8, 8), (4, 4), (2, 2)];
        let base: Vec<Tensor<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| rand([1, width, h, w], 200 + i as u64))
            .collect();
        for m in 1..4 {
            let mut zeroed = base.clone();
            zeroed[m] = Tensor::zeros(base[m].dims());
            let mut a = FeaturePyramid::from_scales(base.clone(), ratio).unwrap();
            let mut b = FeaturePyramid::from_scales(zeroed, ratio).unwrap();
            for (l, w) in blocks.iter().enumerate() {
                a = scalewise_residual_block(&a, w, 1, &Resampler::Bilinear).unwrap();
                b = scalewise_residual_block(&b, w, 1, &Resampler::Bilinear).unwrap();
                let depth = l + 1;
                let changed = a.scale(0).data() != b.scale(0).data();
                assert_eq!(changed, depth >= m, "m = {m}, blocks = {depth}");
            }
        }
    }

    #[test]
    fn unshared_weights_select_by_scale() {
        let x = rand([1, 2, 8, 8], 30);
        let p = build_pyramid(&x, 2, Ratio::HALF, &Resampler::Bilinear).unwrap();
        let shared = random_block(2, 2, 1, 31, true);
        let as_unshared = |ps: &PerScale<ConvParams<f64>>| PerScale::Unshared(vec![ps.get(0).cloned(), ps.get(0).cloned()]);
        let unshared = BlockWeights {
            expand: as_unshared(&shared.expand),
            reduce: as_unshared(&shared.reduce),
            q: shared.q.iter().map(as_unshared).collect(),
        };
        let a = scalewise_residual_block(&p, &shared, 1, &Resampler::Bilinear).unwrap();
        let b = scalewise_residual_block(&p, &unshared, 1, &Resampler::Bilinear).unwrap();
        for s in 0..2 {
            assert_eq!(a.scale(s).data(), b.scale(s).data());
        }
        let mut missing = unshared.clone();
        missing.q[2] = PerScale::Unshared(vec![None, None]);
        assert!(scalewise_residual_block(&p, &missing, 1, &Resampler::Bilinear).is_err());
    }
}
