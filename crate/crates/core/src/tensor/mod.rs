//! Dense rank-4 tensors with reverse-mode differentiation.
//!
//! Every tensor is an immutable `(batch, channel, height, width)` buffer. An
//! operation whose inputs require gradients records a [`GraphRecord`] that
//! links back to those inputs; [`Tensor::backward`] walks the records in
//! reverse topological order and accumulates gradients into the leaves.

mod gemm;
pub mod gradcheck;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, ScnError};

pub use gemm::matmul;
pub use ops::{conv_output_size, ConvGeometry};

/// `(batch, channel, height, width)`.
pub type Dims = [usize; 4];

/// Scalar types the engine computes in: `f32` for training, `f64` for
/// gradient checks.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    /// Row-major `C = op(A) * op(B) (+ C)`; see [`matmul`].
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }
}

impl Element for f32 {
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        c: &mut [f32],
        accumulate: bool,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: `gemm::matmul` checks that every strided access stays in bounds.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        c: &mut [f64],
        accumulate: bool,
    ) {
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Which operation produced a recorded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    Relu,
    Conv2d,
    ConvTranspose2d,
    PixelShuffle,
    PixelUnshuffle,
    ConcatChannels,
    BilinearResize,
    AvgPoolDown,
    NearestUp,
    L1Loss,
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

/// Graph linkage of a non-leaf tensor: the producing op, its inputs, and the
/// backward rule with whatever forward values it captured.
pub struct GraphRecord<T: Element> {
    op: OpKind,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

impl<T: Element> GraphRecord<T> {
    pub fn op(&self) -> OpKind {
        self.op
    }

    pub fn parents(&self) -> &[Tensor<T>] {
        &self.parents
    }
}

struct Inner<T: Element> {
    dims: Dims,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<GraphRecord<T>>,
}

/// Shared handle to an immutable rank-4 buffer.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.inner.dims)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.op))
            .finish()
    }
}

/// Initial content for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize, seed: u64 },
}

pub fn numel(dims: &Dims) -> usize {
    dims.iter().product()
}

fn checked_numel(dims: &Dims) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ScnError::Size(format!("element count of {dims:?} overflows")))
}

impl<T: Element> Tensor<T> {
    /// Leaf tensor from raw data.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let n = checked_numel(&dims)?;
        if n != data.len() {
            return Err(ScnError::shape(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self::leaf_unchecked(dims, data, false))
    }

    pub(crate) fn leaf_unchecked(dims: Dims, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        Tensor {
            inner: Arc::new(Inner {
                dims,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: None,
            }),
        }
    }

    pub fn create(dims: Dims, fill: Fill) -> Result<Self> {
        let n = checked_numel(&dims)?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); n],
            Fill::Constant(c) => vec![T::from_f64_lossy(c); n],
            Fill::Uniform { lo, hi, seed } => {
                if lo.is_nan() || hi.is_nan() || lo >= hi {
                    return Err(ScnError::config(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
                    .collect()
            }
            Fill::HeNormal { fan_in, seed } => {
                if fan_in == 0 {
                    return Err(ScnError::config("he-normal fill needs fan_in >= 1"));
                }
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                    .collect()
            }
        };
        Ok(Self::leaf_unchecked(dims, data, false))
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::leaf_unchecked(dims, vec![T::zero(); numel(&dims)], false)
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self::leaf_unchecked(dims, vec![value; numel(&dims)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf_unchecked([1, 1, 1, 1], vec![value], false)
    }

    /// Result of an op. Records graph linkage only if some parent needs grads.
    pub(crate) fn from_op(
        dims: Dims,
        data: Vec<T>,
        op: OpKind,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| GraphRecord {
            op,
            parents,
            backward: Box::new(backward),
        });
        Tensor {
            inner: Arc::new(Inner {
                dims,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn dims(&self) -> Dims {
        self.inner.dims
    }

    pub fn batch(&self) -> usize {
        self.inner.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.inner.dims[1]
    }

    pub fn height(&self) -> usize {
        self.inner.dims[2]
    }

    pub fn width(&self) -> usize {
        self.inner.dims[3]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.inner.dims[2], self.inner.dims[3])
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn record(&self) -> Option<&GraphRecord<T>> {
        self.inner.node.as_ref()
    }

    /// New leaf with the same values that participates in differentiation.
    pub fn requiring_grad(&self) -> Self {
        Self::leaf_unchecked(self.inner.dims, self.inner.data.clone(), true)
    }

    /// New leaf with the same values and no graph linkage.
    pub fn detach(&self) -> Self {
        Self::leaf_unchecked(self.inner.dims, self.inner.data.clone(), false)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64().expect("finite")))
            .collect();
        Tensor::leaf_unchecked(self.inner.dims, data, false)
    }

    /// Single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<T> {
        if self.inner.dims != [1, 1, 1, 1] {
            return Err(ScnError::shape(format!(
                "item() needs a scalar tensor, got {:?}",
                self.inner.dims
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cn, h, w] = self.inner.dims;
        self.inner.data[((b * cn + c) * h + y) * w + x]
    }

    /// Slice of one batch element, as a new leaf.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let [bn, c, h, w] = self.inner.dims;
        assert!(b < bn, "batch index {b} out of range {bn}");
        let len = c * h * w;
        Tensor::leaf_unchecked([1, c, h, w], self.inner.data[b * len..(b + 1) * len].to_vec(), false)
    }

    /// Concatenate leaves along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| ScnError::shape("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0;
        for t in items {
            let [b, tc, th, tw] = t.dims();
            if (tc, th, tw) != (c, h, w) {
                return Err(ScnError::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.dims(),
                    first.dims()
                )));
            }
            batch += b;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::leaf_unchecked([batch, c, h, w], data, false))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::leaf_unchecked(self.inner.dims, self.inner.data.iter().map(|&v| f(v)).collect(), false)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every leaf with `requires_grad` that the loss depends on receives
    /// `d loss / d leaf`, added to any gradient it already holds.
    pub fn backward(&self) -> Result<()> {
        if self.inner.dims != [1, 1, 1, 1] {
            return Err(ScnError::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.inner.dims
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS gives a topological order with parents before children.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.key(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains_key(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.inner.node {
                Some(node) => {
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.key()) {
                            Some(acc) => add_into(acc, &pg),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant_fill() {
        let z = Tensor::<f32>::create([1, 1, 2, 2], Fill::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f32>::create([1, 1, 1, 1], Fill::Constant(3.5)).unwrap();
        assert_eq!(c.data(), &[3.5]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let fill = Fill::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed: 7,
        };
        let a = Tensor::<f32>::create([1, 2, 2, 2], fill).unwrap();
        let b = Tensor::<f32>::create([1, 2, 2, 2], fill).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let other = Tensor::<f32>::create(
            [1, 2, 2, 2],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 8,
            },
        )
        .unwrap();
        assert_ne!(bits(&a), bits(&other));
    }

    #[test]
    fn he_normal_has_fan_in_scale() {
        let t = Tensor::<f64>::create([1, 1, 100, 100], Fill::HeNormal { fan_in: 50, seed: 1 }).unwrap();
        let n = t.numel() as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "variance {var}");
    }

    #[test]
    fn create_rejects_bad_requests() {
        assert!(matches!(
            Tensor::<f32>::create([usize::MAX, 2, 1, 1], Fill::Zeros),
            Err(ScnError::Size(_))
        ));
        assert!(Tensor::<f32>::create(
            [1, 1, 1, 1],
            Fill::Uniform {
                lo: 1.0,
                hi: 1.0,
                seed: 0
            }
        )
        .is_err());
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn leaves_without_grad_never_accumulate() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = x.requiring_grad();
        let loss = x.add(&y).unwrap().sum();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 2]).requiring_grad();
        assert!(matches!(x.relu().backward(), Err(ScnError::Shape(_))));
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let x = Tensor::<f64>::create([1, 1, 2, 2], Fill::Constant(0.3)).unwrap().requiring_grad();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::scalar(3.0).requiring_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn two_uses_accumulate() {
        let x = Tensor::<f64>::zeros([1, 1, 2, 2]).requiring_grad();
        let loss = x.sum().add(&x.sum()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn diamond_graph_visits_each_record_once() {
        // loss = sum(relu(x) + relu(x)); shared intermediate feeds two branches.
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap().requiring_grad();
        let r = x.relu();
        r.add(&r).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn recording_only_when_needed() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(x.relu().record().is_none());
        let y = x.requiring_grad();
        let r = y.relu();
        assert_eq!(r.record().unwrap().op(), OpKind::Relu);
        assert_eq!(r.record().unwrap().parents().len(), 1);
    }
}
