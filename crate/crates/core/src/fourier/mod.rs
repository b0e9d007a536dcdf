//! Real-input FFTs over one or two trailing axes and circular convolution.
//!
//! Forward transforms are unnormalized; inverse transforms scale by `1/N`
//! (the product of the transformed extents), so that
//! `irfft(rfft(x) * rfft(w)) == x (*) w`.

pub mod plan;
mod real;

pub use plan::{plan, Algorithm, BuiltinFft, Direction, FftPlan, FftProvider};
pub use real::{real_plan, RealFft};

use crate::error::{Error, Result};
use crate::ndtensor::alloc::TrackedVec;
use crate::ndtensor::{row_major_strides, Tensor};
use num_complex::Complex64;
use std::sync::Arc;

/// Separable real transform over a 1D `[n]` or 2D `[h, w]` grid. The last
/// axis is transformed real-to-half-complex, the leading one (if any)
/// complex-to-complex.
#[derive(Debug, Clone)]
pub struct GridFft {
    dims: Vec<usize>,
    row: Arc<RealFft>,
    cols: Option<(Arc<FftPlan>, Arc<FftPlan>)>,
}

impl GridFft {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::arg(format!(
                "transforms cover one or two axes, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::arg(format!("zero extent in transform axes {dims:?}")));
        }
        let w = *dims.last().unwrap();
        let cols = (dims.len() == 2)
            .then(|| (plan(dims[0], Direction::Forward), plan(dims[0], Direction::Inverse)));
        Ok(GridFft {
            dims: dims.to_vec(),
            row: real_plan(w),
            cols,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of real samples per lane.
    pub fn real_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Extents of the half-spectrum: the last axis shrinks to `w/2 + 1`.
    pub fn bins_shape(&self) -> Vec<usize> {
        let mut s = self.dims.clone();
        *s.last_mut().unwrap() = self.row.bins();
        s
    }

    /// Number of complex bins per lane.
    pub fn spec_len(&self) -> usize {
        self.bins_shape().iter().product()
    }

    fn rows(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[0]
        } else {
            1
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [Complex64]) {
        let w = self.row.len();
        let wb = self.row.bins();
        for (src, dst) in x.chunks(w).zip(out.chunks_mut(wb)) {
            self.row.forward(src, dst);
        }
        if let Some((fwd, _)) = &self.cols {
            transform_columns(out, self.rows(), wb, fwd, 1.0);
        }
    }

    /// Inverse transform scaled by `1/real_len()`. Consumes `spec` as scratch.
    pub fn inverse_in_place(&self, spec: &mut [Complex64], out: &mut [f64]) {
        let w = self.row.len();
        let wb = self.row.bins();
        if let Some((_, inv)) = &self.cols {
            transform_columns(spec, self.rows(), wb, inv, 1.0 / self.rows() as f64);
        }
        for (src, dst) in spec.chunks(wb).zip(out.chunks_mut(w)) {
            self.row.inverse(src, dst);
        }
    }

    pub fn inverse(&self, spec: &[Complex64], out: &mut [f64]) {
        let mut tmp = spec.to_vec();
        self.inverse_in_place(&mut tmp, out);
    }
}

fn transform_columns(data: &mut [Complex64], rows: usize, cols: usize, p: &FftPlan, scale: f64) {
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for (r, v) in col.iter_mut().enumerate() {
            *v = data[r * cols + c];
        }
        p.process(&mut col);
        for (r, v) in col.iter().enumerate() {
            data[r * cols + c] = v * scale;
        }
    }
}

/// Half-spectrum of a real tensor over its trailing one or two axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    lead: Vec<usize>,
    dims: Vec<usize>,
    values: TrackedVec<Complex64>,
}

impl Spectrum {
    /// Assembles a spectrum, checking that `values` has exactly the bin count
    /// implied by the original extents `dims`.
    pub fn from_parts(lead: &[usize], dims: &[usize], values: Vec<Complex64>) -> Result<Self> {
        let grid = GridFft::new(dims)?;
        let want = lead.iter().product::<usize>() * grid.spec_len();
        if values.len() != want {
            return Err(Error::arg(format!(
                "spectrum with origin extents {dims:?} and lead {lead:?} needs {want} bins, got {}",
                values.len()
            )));
        }
        Ok(Spectrum {
            lead: lead.to_vec(),
            dims: dims.to_vec(),
            values: TrackedVec::new(values),
        })
    }

    /// Leading (untransformed) extents.
    pub fn lead(&self) -> &[usize] {
        &self.lead
    }

    /// Original real extents of the transformed axes.
    pub fn origin_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bins_shape(&self) -> Vec<usize> {
        let mut s = self.dims.clone();
        let last = s.last_mut().unwrap();
        *last = *last / 2 + 1;
        s
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    /// Energy of the full (mirrored) spectrum, `sum |X_k|^2` over all `N` bins.
    pub fn full_energy(&self) -> f64 {
        let bins = self.bins_shape();
        let wb = *bins.last().unwrap();
        let w = *self.dims.last().unwrap();
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let k = i % wb;
                // Bins other than DC and Nyquist stand for a conjugate pair.
                let mult = if k == 0 || (w % 2 == 0 && k == w / 2) { 1.0 } else { 2.0 };
                mult * v.norm_sqr()
            })
            .sum()
    }
}

fn split_trailing(shape: &[usize], axes: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes == 0 || axes > 2 {
        return Err(Error::arg(format!("transforms cover one or two axes, got {axes}")));
    }
    if shape.len() < axes {
        return Err(Error::arg(format!(
            "tensor of rank {} has no {axes} trailing axes",
            shape.len()
        )));
    }
    let cut = shape.len() - axes;
    Ok((shape[..cut].to_vec(), shape[cut..].to_vec()))
}

/// Forward real FFT over the trailing `axes` (1 or 2) axes of `x`.
pub fn rfft(x: &Tensor, axes: usize) -> Result<Spectrum> {
    let (lead, dims) = split_trailing(x.shape(), axes)?;
    let grid = GridFft::new(&dims)?;
    let (n, m) = (grid.real_len(), grid.spec_len());
    let lanes: usize = lead.iter().product();
    let mut values = vec![Complex64::new(0.0, 0.0); lanes * m];
    for (src, dst) in x.data().chunks(n).zip(values.chunks_mut(m)) {
        grid.forward(src, dst);
    }
    Spectrum::from_parts(&lead, &dims, values)
}

/// Inverse of [`rfft`]; the spectrum's origin extents fix odd/even lengths.
pub fn irfft(s: &Spectrum) -> Result<Tensor> {
    let grid = GridFft::new(&s.dims)?;
    let (n, m) = (grid.real_len(), grid.spec_len());
    let lanes: usize = s.lead.iter().product();
    let mut out = vec![0.0; lanes * n];
    for (src, dst) in s.values.chunks(m).zip(out.chunks_mut(n)) {
        grid.inverse(src, dst);
    }
    let shape: Vec<usize> = s.lead.iter().chain(&s.dims).copied().collect();
    Tensor::from_vec(&shape, out)
}

/// Right-aligned broadcast of two leading shapes.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    (0..r)
        .map(|i| {
            let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
            let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
            match (da, db) {
                (x, y) if x == y => Ok(x),
                (1, y) => Ok(y),
                (x, 1) => Ok(x),
                _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
            }
        })
        .collect()
}

/// Flat lane index into `src` (right-aligned, broadcast) for each output lane.
fn broadcast_lane_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let lanes: usize = out.iter().product();
    let strides = row_major_strides(src);
    let offset = out.len() - src.len();
    let out_strides = row_major_strides(out);
    (0..lanes)
        .map(|l| {
            src.iter()
                .enumerate()
                .map(|(i, &n)| {
                    let oi = (l / out_strides[i + offset]) % out[i + offset];
                    if n == 1 {
                        0
                    } else {
                        oi * strides[i]
                    }
                })
                .sum()
        })
        .collect()
}

/// Circular convolution over the trailing `axes` axes,
/// `out[i] = sum_j x[j] * w[(i - j) mod N]`, computed in the frequency domain.
/// Leading axes broadcast against each other.
pub fn circular_convolve(x: &Tensor, w: &Tensor, axes: usize) -> Result<Tensor> {
    let (lead_x, dims_x) = split_trailing(x.shape(), axes)?;
    let (lead_w, dims_w) = split_trailing(w.shape(), axes)?;
    if dims_x != dims_w {
        return Err(Error::shape(format!(
            "transform extents differ: {dims_x:?} vs {dims_w:?}"
        )));
    }
    let lead = broadcast_shapes(&lead_x, &lead_w)?;
    let sx = rfft(x, axes)?;
    let sw = rfft(w, axes)?;
    let grid = GridFft::new(&dims_x)?;
    let (n, m) = (grid.real_len(), grid.spec_len());
    let map_x = broadcast_lane_map(&lead_x, &lead);
    let map_w = broadcast_lane_map(&lead_w, &lead);
    let mut out = vec![0.0; lead.iter().product::<usize>() * n];
    let mut prod = vec![Complex64::new(0.0, 0.0); m];
    for ((dst, &lx), &lw) in out.chunks_mut(n).zip(&map_x).zip(&map_w) {
        let a = &sx.values()[lx * m..(lx + 1) * m];
        let b = &sw.values()[lw * m..(lw + 1) * m];
        for ((p, &u), &v) in prod.iter_mut().zip(a).zip(b) {
            *p = u * v;
        }
        grid.inverse_in_place(&mut prod, dst);
    }
    let shape: Vec<usize> = lead.iter().chain(&dims_x).copied().collect();
    Tensor::from_vec(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_rdft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n / 2 + 1)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * ((j * k) % n) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_and_delta_spectra() {
        let s = rfft(&t(&[1.0, 1.0, 1.0, 1.0]), 1).unwrap();
        assert_eq!(s.values().len(), 3);
        assert!((s.values()[0] - Complex64::new(4.0, 0.0)).norm() < 1e-15);
        assert!(s.values()[1].norm() < 1e-15 && s.values()[2].norm() < 1e-15);
        let d = rfft(&t(&[1.0, 0.0, 0.0, 0.0]), 1).unwrap();
        for v in d.values() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn prime_length_matches_naive() {
        let x: Vec<f64> = (0..7).map(|v| v as f64).collect();
        let s = rfft(&t(&x), 1).unwrap();
        let want = naive_rdft(&x);
        assert_eq!(s.values().len(), 4);
        for (a, b) in s.values().iter().zip(&want) {
            assert!((a - b).norm() / 21.0 < 1e-10);
        }
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        for n in [6usize, 9, 16, 25] {
            let x: Vec<f64> = (0..n).map(|j| ((j * j) as f64 * 0.3).sin()).collect();
            let s = rfft(&t(&x), 1).unwrap();
            assert!(s.values()[0].im.abs() < 1e-12);
            if n % 2 == 0 {
                assert!(s.values()[n / 2].im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_one_roundtrip() {
        let s = rfft(&t(&[5.0]), 1).unwrap();
        assert_eq!(irfft(&s).unwrap().data(), &[5.0]);
    }

    #[test]
    fn inconsistent_spectrum_rejected() {
        let bad = Spectrum::from_parts(&[], &[8], vec![Complex64::new(0.0, 0.0); 4]);
        assert!(matches!(bad, Err(Error::Argument(_))));
        assert!(matches!(
            rfft(&Tensor::zeros(&[3, 0]), 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn convolution_shift_examples() {
        let x = t(&[1.0, 2.0, 3.0, 4.0]);
        let id = circular_convolve(&x, &t(&[1.0, 0.0, 0.0, 0.0]), 1).unwrap();
        let sh = circular_convolve(&x, &t(&[0.0, 1.0, 0.0, 0.0]), 1).unwrap();
        for (a, b) in id.data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in sh.data().iter().zip([4.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_over_leading_axes() {
        let x = Tensor::from_fn(&[3, 1, 6], |i| (i as f64 * 0.9).sin());
        let w = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.4).cos());
        let y = circular_convolve(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2, 6]);
        for a in 0..3 {
            for b in 0..2 {
                for i in 0..6 {
                    let direct: f64 = (0..6)
                        .map(|j| x.at(&[a, 0, j]) * w.at(&[b, (i + 6 - j) % 6]))
                        .sum();
                    assert!((y.at(&[a, b, i]) - direct).abs() < 1e-12);
                }
            }
        }
        assert!(circular_convolve(&x, &Tensor::zeros(&[2, 5]), 1).is_err());
        assert!(circular_convolve(&x, &Tensor::zeros(&[2, 2, 6]), 1).is_err());
    }
}
