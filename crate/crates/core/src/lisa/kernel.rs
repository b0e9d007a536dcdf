//! Effective attention kernels and resolution transfer of the circular
//! embeddings.

use super::forward::lisa_forward_saved;
use super::{CircularEmbeddings, LiSAConfig, TokenLayout};
use crate::error::{Error, Result};
use crate::fourier::real_plan;
use crate::ndtensor::{row_major_strides, Tensor};
use num_complex::Complex64;

/// The coefficients query `i` applies to value rows, plus the
/// token-independent contribution of the `Bb` path.
#[derive(Debug, Clone)]
pub struct QueryKernel {
    pub query: usize,
    /// Grid-shaped: `[N]` or `[H, W]`.
    pub weights: Tensor,
    /// `sum_d P[i,d] Bb[k,d]`, `[C_h]`.
    pub bias: Tensor,
}

impl QueryKernel {
    /// `sum_j kappa[j] V[j,k] + bias[k]`, i.e. row `i` of the operator output.
    pub fn reconstruct(&self, v: &Tensor) -> Result<Tensor> {
        let n = self.weights.len();
        let ch = self.bias.len();
        v.expect_shape(&[n, ch], "value")?;
        let (w, vd) = (self.weights.data(), v.data());
        Ok(Tensor::from_fn(&[ch], |k| {
            self.bias.data()[k] + (0..n).map(|j| w[j] * vd[j * ch + k]).sum::<f64>()
        }))
    }
}

/// Kernel of query `i`: `kappa[j] = sum_d P[i,d] Wb[(i - j) mod grid, d]`
/// where `P[i,d] = sum_c Qb[i,c] (Ga[i,c,d] + Ba[c,d])`.
pub fn extract_query_kernel(
    qb: &Tensor,
    kb: &Tensor,
    emb: &CircularEmbeddings,
    cfg: &LiSAConfig,
    query: usize,
) -> Result<QueryKernel> {
    let n = cfg.tokens();
    if query >= n {
        return Err(Error::arg(format!("query index {query} out of range for {n} tokens")));
    }
    // The value input only feeds Gb, which the kernel does not depend on.
    let (_, cache) = lisa_forward_saved(qb, kb, &Tensor::zeros(&[n, cfg.head_channels()]), emb, cfg)?;
    let d = cfg.latent;
    let p: Vec<f64> = (0..d).map(|dd| cache.p.data()[dd * n + query]).collect();

    let dims = cfg.layout.dims();
    let (h, w) = match cfg.layout {
        TokenLayout::Sequence(n) => (1, n),
        TokenLayout::Grid(h, w) => (h, w),
    };
    let (ri, ci) = (query / w, query % w);
    let wb = emb.wb.data();
    let weights = Tensor::from_fn(&dims, |j| {
        let (rj, cj) = (j / w, j % w);
        let off = ((ri + h - rj) % h) * w + (ci + w - cj) % w;
        (0..d).map(|dd| p[dd] * wb[off * d + dd]).sum()
    });
    let ch = cfg.head_channels();
    let bias = Tensor::from_fn(&[ch], |k| (0..d).map(|dd| p[dd] * emb.bb.data()[k * d + dd]).sum());
    Ok(QueryKernel { query, weights, bias })
}

/// Band-limited resampling of `t` along `axis` to `new_len` samples.
///
/// The half-spectrum is truncated or zero-padded and rescaled by
/// `new_len / old_len`, so a constant signal keeps its value. An even-length
/// Nyquist bin is split on upsampling and folded on downsampling.
pub fn resample_axis(t: &Tensor, axis: usize, new_len: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::arg(format!("axis {axis} out of range for rank {}", t.rank())));
    }
    if new_len == 0 {
        return Err(Error::arg("resampled length must be at least 1"));
    }
    let old = t.dim(axis);
    if old == new_len {
        return Ok(t.clone());
    }
    let (fwd, inv) = (real_plan(old), real_plan(new_len));
    let (ob, nb) = (fwd.bins(), inv.bins());
    let scale = new_len as f64 / old as f64;

    let mut shape = t.shape().to_vec();
    shape[axis] = new_len;
    let src_strides = row_major_strides(t.shape());
    let dst_strides = row_major_strides(&shape);
    let (s_src, s_dst) = (src_strides[axis], dst_strides[axis]);
    let outer: usize = t.shape()[..axis].iter().product();
    let inner = s_src;

    let mut out = Tensor::zeros(&shape);
    let mut lane = vec![0.0; old];
    let mut spec = vec![Complex64::new(0.0, 0.0); ob];
    let mut nspec = vec![Complex64::new(0.0, 0.0); nb];
    let mut res = vec![0.0; new_len];
    for o in 0..outer {
        for i in 0..inner {
            let base_src = o * old * inner + i;
            for (k, v) in lane.iter_mut().enumerate() {
                *v = t.data()[base_src + k * s_src];
            }
            fwd.forward(&lane, &mut spec);
            nspec.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            let keep = ob.min(nb);
            nspec[..keep].copy_from_slice(&spec[..keep]);
            if new_len > old && old % 2 == 0 {
                nspec[old / 2] *= 0.5;
            }
            if new_len < old && new_len % 2 == 0 {
                nspec[new_len / 2] = Complex64::new(2.0 * spec[new_len / 2].re, 0.0);
            }
            nspec.iter_mut().for_each(|z| *z *= scale);
            inv.inverse(&nspec, &mut res);
            let base_dst = o * new_len * inner + i;
            let od = out.data_mut();
            for (k, &v) in res.iter().enumerate() {
                od[base_dst + k * s_dst] = v;
            }
        }
    }
    Ok(out)
}

/// Resamples every spatial axis of `Wa` and `Wb` onto `layout`; biases are
/// carried over unchanged.
pub fn resize_embeddings(emb: &CircularEmbeddings, layout: &TokenLayout) -> Result<CircularEmbeddings> {
    let old = emb.grid_dims().to_vec();
    let new = layout.dims();
    if old.len() != new.len() {
        return Err(Error::arg(format!(
            "cannot resize a {}-axis embedding onto a {}-axis layout",
            old.len(),
            new.len()
        )));
    }
    if new.contains(&0) {
        return Err(Error::arg("resized extents must be at least 1"));
    }
    let (mut wa, mut wb) = (emb.wa.clone(), emb.wb.clone());
    for (axis, &len) in new.iter().enumerate() {
        wa = resample_axis(&wa, axis, len)?;
        wb = resample_axis(&wb, axis, len)?;
    }
    Ok(CircularEmbeddings {
        wa,
        wb,
        ba: emb.ba.clone(),
        bb: emb.bb.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::rfft;
    use crate::random::{normal_tensor, rng_from_seed};

    #[test]
    fn identity_resize_is_exact() {
        let cfg = LiSAConfig::single_head(TokenLayout::Grid(4, 6), 3, 2).unwrap();
        let emb = CircularEmbeddings::random_full(&cfg, 1.0, &mut rng_from_seed(3));
        let same = resize_embeddings(&emb, &TokenLayout::Grid(4, 6)).unwrap();
        assert!(same.wa.max_abs_diff(&emb.wa).unwrap() <= 1e-12);
        assert_eq!(same.bb, emb.bb);
    }

    #[test]
    fn constant_kernel_survives_resize() {
        let cfg = LiSAConfig::single_head(TokenLayout::Grid(14, 14), 2, 3).unwrap();
        let mut emb = CircularEmbeddings::zeros(&cfg);
        emb.wb = Tensor::full(emb.wb.shape(), 0.37);
        emb.wa = Tensor::full(emb.wa.shape(), -1.5);
        for target in [TokenLayout::Grid(28, 28), TokenLayout::Grid(24, 24), TokenLayout::Grid(7, 9)] {
            let r = resize_embeddings(&emb, &target).unwrap();
            let dims = target.dims();
            assert_eq!(r.wb.shape(), &[dims[0], dims[1], 3]);
            assert!(r.wb.data().iter().all(|&v| (v - 0.37).abs() <= 1e-10));
            assert!(r.wa.data().iter().all(|&v| (v + 1.5).abs() <= 1e-10));
        }
    }

    #[test]
    fn single_cosine_bin_stays_single() {
        let n = 8;
        let x = Tensor::from_fn(&[n], |j| (2.0 * std::f64::consts::PI * 2.0 * j as f64 / n as f64).cos());
        let y = resample_axis(&x, 0, 16).unwrap();
        let s = rfft(&y, 1).unwrap();
        for (k, z) in s.values().iter().enumerate() {
            // Old bin 2 at length 8 is bin 2 at length 16 with twice the magnitude.
            let want = if k == 2 { 8.0 } else { 0.0 };
            assert!((z.re - want).abs() < 1e-10 && z.im.abs() < 1e-10, "bin {k}: {z}");
        }
        // Same continuous cosine sampled twice as densely.
        for j in 0..16 {
            let t = (2.0 * std::f64::consts::PI * 2.0 * j as f64 / 16.0).cos();
            assert!((y.data()[j] - t).abs() < 1e-12);
        }
    }

    #[test]
    fn up_then_down_roundtrips() {
        let x = normal_tensor(&[3, 10, 2], 1.0, &mut rng_from_seed(8));
        for mid in [15, 20, 31] {
            let back = resample_axis(&resample_axis(&x, 1, mid).unwrap(), 1, 10).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-12, "via {mid}");
        }
    }

    #[test]
    fn query_index_is_checked() {
        let cfg = LiSAConfig::single_head(TokenLayout::Sequence(5), 2, 1).unwrap();
        let emb = CircularEmbeddings::zeros(&cfg);
        let q = Tensor::zeros(&[5, 2]);
        assert!(matches!(
            extract_query_kernel(&q, &q, &emb, &cfg, 5),
            Err(Error::Argument(_))
        ));
    }
}
