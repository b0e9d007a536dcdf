//! Dense row-major `f64` tensors and the handful of numeric kernels the
//! attention operators are built from.

pub mod alloc;

use crate::error::{Error, Result};
use crate::exec::Exec;
use alloc::TrackedVec;

/// Norms below this pass through [`l2_normalize`] unchanged.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major tensor. A rank-0 tensor holds exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TrackedVec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new((0..n).map(f).collect()),
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data.into_inner()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: TrackedVec::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: TrackedVec::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Max absolute difference divided by `max(1, max |other|)`.
    pub fn rel_err(&self, reference: &Tensor) -> Result<f64> {
        Ok(self.max_abs_diff(reference)? / reference.max_abs().max(1.0))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::arg(format!("invalid permutation {axes:?} for rank {r}")));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides = row_major_strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; r];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < new_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor::from_vec(&new_shape, out)
    }

    /// Slices `[start, start+len)` along the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let last = *self
            .shape
            .last()
            .ok_or_else(|| Error::arg("narrow_last on a scalar"))?;
        if start + len > last {
            return Err(Error::arg(format!("range {start}..{} exceeds {last}", start + len)));
        }
        let rows = self.len() / last;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * last + start..r * last + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Tensor::from_vec(&shape, out)
    }

    /// Concatenates tensors along their last axis; leading shapes must match.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::arg("nothing to concatenate"))?;
        let lead = &first.shape[..first.rank().saturating_sub(1)];
        let mut total = 0;
        for p in parts {
            if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape(format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            total += p.shape[p.rank() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let w = p.shape[p.rank() - 1];
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_vec(&shape, out)
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits a shape around `axis` into (outer, extent, inner) for strided slicing.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn for_each_lane(x: &mut Tensor, axis: usize, mut f: impl FnMut(&mut [f64])) -> Result<()> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut lane = vec![0.0; n];
    let data = x.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = data[base + j * inner];
            }
            f(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                data[base + j * inner] = *v;
            }
        }
    }
    Ok(())
}

/// Scales every slice along `axis` to unit Euclidean norm. Slices whose norm
/// is below [`NORM_EPS`] are returned unchanged.
pub fn l2_normalize(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for_each_lane(&mut out, axis, |lane| {
        let norm = lane.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= NORM_EPS {
            lane.iter_mut().for_each(|v| *v /= norm);
        }
    })?;
    Ok(out)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for_each_lane(&mut out, axis, softmax_in_place)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(lane: &mut [f64]) {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    lane.iter_mut().for_each(|v| *v /= total);
}

/// Layer normalization over the last axis with per-channel scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| Error::arg("layer_norm on a scalar"))?;
    gamma.expect_shape(&[c], "layer_norm scale")?;
    beta.expect_shape(&[c], "layer_norm shift")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Tanh-approximated Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Fixed contraction patterns supported by [`contract`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contraction {
    /// `[M,K] x [K,N] -> [M,N]`
    MatMul,
    /// `[M,K] x [N,K] -> [M,N]`
    MatMulBt,
    /// `[G,M,K] x [G,K,N] -> [G,M,N]`
    Batched,
    /// `[G,M,K] x [G,N,K] -> [G,M,N]`
    BatchedBt,
}

pub fn contract(a: &Tensor, b: &Tensor, spec: Contraction) -> Result<Tensor> {
    contract_with(a, b, spec, Exec::Sequential)
}

/// [`contract`] with the batch axis distributed according to `exec`.
pub fn contract_with(a: &Tensor, b: &Tensor, spec: Contraction, exec: Exec) -> Result<Tensor> {
    let batched = matches!(spec, Contraction::Batched | Contraction::BatchedBt);
    let bt = matches!(spec, Contraction::MatMulBt | Contraction::BatchedBt);
    let want = if batched { 3 } else { 2 };
    if a.rank() != want || b.rank() != want {
        return Err(Error::shape(format!(
            "{spec:?} needs rank-{want} operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (g, sa, sb) = if batched {
        if a.dim(0) != b.dim(0) {
            return Err(Error::shape(format!(
                "batch extents differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        (a.dim(0), &a.shape()[1..], &b.shape()[1..])
    } else {
        (1, a.shape(), b.shape())
    };
    let (m, k) = (sa[0], sa[1]);
    let (kb, n) = if bt { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
    if k != kb {
        return Err(Error::shape(format!(
            "contracted extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; g * m * n];
    let (ad, bd) = (a.data(), b.data());
    if m * n > 0 {
        exec.for_each_chunk_mut(&mut out, m * n, |gi, dst| {
            let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
            let b_blk = &bd[gi * k * n..(gi + 1) * k * n];
            if bt {
                gemm_bt(a_blk, b_blk, dst, m, k, n);
            } else {
                gemm(a_blk, b_blk, dst, m, k, n);
            }
        });
    }
    let shape = if batched { vec![g, m, n] } else { vec![m, n] };
    Tensor::from_vec(&shape, out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    contract(a, b, Contraction::MatMul)
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
}

fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
}

/// Affine map over the last axis: `x [.., K] * w [K, M] + bias [M]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    linear_with(x, w, bias, Exec::Sequential)
}

pub fn linear_with(x: &Tensor, w: &Tensor, bias: &Tensor, exec: Exec) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::shape(format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (k, m) = (w.dim(0), w.dim(1));
    bias.expect_shape(&[m], "linear bias")?;
    let kx = *x.shape().last().ok_or_else(|| Error::arg("linear on a scalar"))?;
    if kx != k {
        return Err(Error::shape(format!(
            "input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let rows = x.len() / k.max(1);
    let mut out = vec![0.0; rows * m];
    for row in out.chunks_mut(m.max(1)) {
        row.copy_from_slice(bias.data());
    }
    // Row blocks keep the parallel split coarse.
    let block = 64usize;
    let xd = x.data();
    let wd = w.data();
    if m > 0 {
        exec.for_each_chunk_mut(&mut out, block * m, |bi, dst| {
            let r0 = bi * block;
            let nr = dst.len() / m;
            gemm(&xd[r0 * k..(r0 + nr) * k], wd, dst, nr, k, m);
        });
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::from_vec(&shape, out)
}
