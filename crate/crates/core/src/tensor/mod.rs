//! Dense row-major `f64` tensors and the kernels the tape is built from.
//!
//! Every operation allocates a fresh output; there are no views.

mod contract;
mod tape;

pub use contract::{contract, ContractSpec};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive value used to block a query/key pair before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

/// Rows whose maximum falls below this are treated as fully masked.
const MASKED_ROW_THRESHOLD: f64 = MASK_SENTINEL / 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("extents must be >= 1")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for slot in out.data.iter_mut() {
            *slot = f(&idx);
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        out
    }

    /// Normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::new(shape, data).expect("extents must be >= 1")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new(shape, data).expect("extents must be >= 1")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("bad permutation {axes:?} for rank {rank}")));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.len());
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        let outer: usize = out_shape[..last].iter().product();
        for _ in 0..outer {
            if inner_stride == 1 {
                data.extend_from_slice(&self.data[base..base + inner]);
            } else {
                data.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            for axis in (0..last).rev() {
                idx[axis] += 1;
                base += src_strides[axis];
                if idx[axis] < out_shape[axis] {
                    break;
                }
                base -= src_strides[axis] * out_shape[axis];
                idx[axis] = 0;
            }
        }
        Tensor::new(&out_shape, data)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[from..from + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, data)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if axis >= first.rank() {
            return Err(Error::Shape(format!("concat axis {axis} for rank {}", first.rank())));
        }
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_extent: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_extent;
        Tensor::new(&shape, data)
    }

    /// `self + other`, with `other` broadcast against the trailing axes of `self`.
    pub fn broadcast_add(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_zip(other, |a, b| a + b)
    }

    pub fn broadcast_mul(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_zip(other, |a, b| a * b)
    }

    fn broadcast_zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let plan = BroadcastPlan::new(&self.shape, &other.shape)?;
        let mut data = Vec::with_capacity(self.len());
        plan.for_each_block(|a_off, b_off| {
            let a = &self.data[a_off..a_off + plan.inner];
            let b = &other.data[b_off..b_off + plan.inner];
            data.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
        });
        Tensor::new(&self.shape, data)
    }

    /// Sums `self` down to `target` shape, inverting a trailing broadcast.
    pub fn reduce_to(&self, target: &[usize]) -> Result<Tensor> {
        if target == self.shape() {
            return Ok(self.clone());
        }
        let plan = BroadcastPlan::new(&self.shape, target)?;
        let mut out = vec![0.0; target.iter().product()];
        plan.for_each_block(|a_off, b_off| {
            let a = &self.data[a_off..a_off + plan.inner];
            for (o, &x) in out[b_off..b_off + plan.inner].iter_mut().zip(a) {
                *o += x;
            }
        });
        Tensor::new(target, out)
    }

    /// Numerically stable softmax over the last axis. Rows that are entirely
    /// at the mask sentinel produce zeros.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape.last().expect("rank >= 1");
        let mut data = Vec::with_capacity(self.len());
        for row in self.data.chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max.is_nan() || row.iter().any(|x| x.is_nan()) {
                return Err(Error::NaN("softmax"));
            }
            if max <= MASKED_ROW_THRESHOLD {
                data.extend(std::iter::repeat(0.0).take(n));
                continue;
            }
            let start = data.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        Tensor::new(&self.shape, data)
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape.last().expect("rank >= 1");
        let mut data = Vec::with_capacity(self.len());
        for row in self.data.chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max.is_nan() || row.iter().any(|x| x.is_nan()) {
                return Err(Error::NaN("log_softmax"));
            }
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        Tensor::new(&self.shape, data)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("extents must be >= 1 and rank >= 1, got {shape:?}")));
    }
    Ok(())
}

/// Iteration plan for a right-aligned broadcast of `small` against `big`.
///
/// `big` is walked in contiguous blocks of `inner` elements; within a block
/// `small` is also contiguous.
struct BroadcastPlan {
    inner: usize,
    outer_shape: Vec<usize>,
    outer_small_strides: Vec<usize>,
}

impl BroadcastPlan {
    fn new(big: &[usize], small: &[usize]) -> Result<Self> {
        let bad = || Error::Shape(format!("cannot broadcast {small:?} to {big:?}"));
        if small.len() > big.len() {
            return Err(bad());
        }
        let pad = big.len() - small.len();
        let aligned: Vec<usize> = std::iter::repeat(1).take(pad).chain(small.iter().copied()).collect();
        if aligned.iter().zip(big).any(|(&s, &b)| s != b && s != 1) {
            return Err(bad());
        }
        // trailing run where the extents agree is contiguous in both operands
        let mut split = big.len();
        while split > 0 && aligned[split - 1] == big[split - 1] {
            split -= 1;
        }
        let inner: usize = big[split..].iter().product();
        let small_strides = strides_of(&aligned);
        let outer_shape = big[..split].to_vec();
        let outer_small_strides = (0..split)
            .map(|i| if aligned[i] == 1 { 0 } else { small_strides[i] })
            .collect();
        Ok(Self { inner, outer_shape, outer_small_strides })
    }

    fn for_each_block(&self, mut f: impl FnMut(usize, usize)) {
        let outer: usize = self.outer_shape.iter().product();
        let mut idx = vec![0usize; self.outer_shape.len()];
        let mut small_off = 0usize;
        for o in 0..outer {
            f(o * self.inner, small_off);
            for axis in (0..idx.len()).rev() {
                idx[axis] += 1;
                small_off += self.outer_small_strides[axis];
                if idx[axis] < self.outer_shape[axis] {
                    break;
                }
                small_off -= self.outer_small_strides[axis] * self.outer_shape[axis];
                idx[axis] = 0;
            }
        }
    }
}
