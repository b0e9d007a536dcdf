//! Hand-written adjoint of the FFT operator. The adjoint of a circular
//! convolution is a circular correlation, i.e. multiplication by the complex
//! conjugate spectrum.

use super::forward::{spectra, LiSACache};
use crate::error::{Error, Result};
use crate::fourier::GridFft;
use crate::ndtensor::Tensor;
use num_complex::Complex64;

/// Gradients of a scalar loss with respect to every operator input and
/// parameter; each tensor has the shape of its primal.
#[derive(Debug, Clone)]
pub struct LiSAGradients {
    pub d_q: Tensor,
    pub d_k: Tensor,
    pub d_v: Tensor,
    pub d_wa: Tensor,
    pub d_wb: Tensor,
    pub d_ba: Tensor,
    pub d_bb: Tensor,
}

/// Lane-major `[A, N]` -> token-major `[N, A]`.
fn from_lanes(lanes: &[f64], a: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[n, a], |f| lanes[(f % a) * n + f / a])
}

/// Lane-major `[prod(trailing), N]` -> `[..grid, ..trailing]`.
fn kernel_from_lanes(lanes: &[f64], grid: &[usize], trailing: &[usize]) -> Tensor {
    let n: usize = grid.iter().product();
    let inner: usize = trailing.iter().product();
    let shape: Vec<usize> = grid.iter().chain(trailing).copied().collect();
    Tensor::from_fn(&shape, |f| lanes[(f % inner) * n + f / inner])
}

/// Gradients of `L = sum(upstream * Y)` given the intermediates of the
/// forward pass that produced `Y`.
pub fn lisa_backward(upstream: &Tensor, cache: &LiSACache) -> Result<LiSAGradients> {
    let (n, ch, d) = (cache.n, cache.ch, cache.d);
    upstream.expect_shape(&[n, ch], "upstream gradient")?;
    let grid = GridFft::new(&cache.dims)?;
    let m = grid.spec_len();
    if cache.k_spec.len() != ch * m || cache.wa_spec.len() != ch * d * m {
        return Err(Error::State("cached spectra do not match the cached shapes".into()));
    }
    let u = upstream.data();
    let (ha, hb, p, q) = (cache.ha.data(), cache.hb.data(), cache.p.data(), cache.qb.data());

    // dP[d,i] = sum_k U[i,k] hb[k,d,i]
    let mut dp = vec![0.0; d * n];
    for k in 0..ch {
        for dd in 0..d {
            let lane = &hb[(k * d + dd) * n..(k * d + dd + 1) * n];
            for i in 0..n {
                dp[dd * n + i] += u[i * ch + k] * lane[i];
            }
        }
    }

    // dhb[k,d,i] = U[i,k] P[d,i];  dha[c,d,i] = Qb[i,c] dP[d,i]
    let mut dhb = Tensor::zeros(&[ch, d, n]);
    let mut dha = Tensor::zeros(&[ch, d, n]);
    {
        let (dhbd, dhad) = (dhb.data_mut(), dha.data_mut());
        for c in 0..ch {
            for dd in 0..d {
                let off = (c * d + dd) * n;
                for i in 0..n {
                    dhbd[off + i] = u[i * ch + c] * p[dd * n + i];
                    dhad[off + i] = q[i * ch + c] * dp[dd * n + i];
                }
            }
        }
    }

    // dQ[i,c] = sum_d dP[d,i] ha[c,d,i]
    let mut d_q = Tensor::zeros(&[n, ch]);
    {
        let dq = d_q.data_mut();
        for c in 0..ch {
            for dd in 0..d {
                let lane = &ha[(c * d + dd) * n..(c * d + dd + 1) * n];
                for i in 0..n {
                    dq[i * ch + c] += dp[dd * n + i] * lane[i];
                }
            }
        }
    }

    let lane_sums = |t: &Tensor| Tensor::from_fn(&[ch, d], |f| t.data()[f * n..(f + 1) * n].iter().sum());
    let d_ba = lane_sums(&dha);
    let d_bb = lane_sums(&dhb);

    let sa = spectra(&grid, &dha);
    let sb = spectra(&grid, &dhb);
    let zero = Complex64::new(0.0, 0.0);
    let mut acc = vec![zero; m];

    // Key side: Ga[c,d] = K[c] (*) Wa[c,d]
    let mut dk_lanes = vec![0.0; ch * n];
    let mut dwa_lanes = vec![0.0; ch * d * n];
    for c in 0..ch {
        acc.iter_mut().for_each(|a| *a = zero);
        let ks = &cache.k_spec[c * m..(c + 1) * m];
        for dd in 0..d {
            let l = c * d + dd;
            let g = &sa[l * m..(l + 1) * m];
            let ws = &cache.wa_spec[l * m..(l + 1) * m];
            for (a, (&gv, &wv)) in acc.iter_mut().zip(g.iter().zip(ws)) {
                *a += gv * wv.conj();
            }
            let mut prod: Vec<Complex64> = g.iter().zip(ks).map(|(&gv, &kv)| gv * kv.conj()).collect();
            grid.inverse_in_place(&mut prod, &mut dwa_lanes[l * n..(l + 1) * n]);
        }
        grid.inverse_in_place(&mut acc, &mut dk_lanes[c * n..(c + 1) * n]);
    }

    // Value side: Gb[k,d] = V[k] (*) Wb[d], Wb shared over k
    let mut dv_lanes = vec![0.0; ch * n];
    let mut dwb_spec = vec![zero; d * m];
    for k in 0..ch {
        acc.iter_mut().for_each(|a| *a = zero);
        let vs = &cache.v_spec[k * m..(k + 1) * m];
        for dd in 0..d {
            let l = k * d + dd;
            let g = &sb[l * m..(l + 1) * m];
            let ws = &cache.wb_spec[dd * m..(dd + 1) * m];
            for (a, (&gv, &wv)) in acc.iter_mut().zip(g.iter().zip(ws)) {
                *a += gv * wv.conj();
            }
            for (o, (&gv, &vv)) in dwb_spec[dd * m..(dd + 1) * m].iter_mut().zip(g.iter().zip(vs)) {
                *o += gv * vv.conj();
            }
        }
        grid.inverse_in_place(&mut acc, &mut dv_lanes[k * n..(k + 1) * n]);
    }
    let mut dwb_lanes = vec![0.0; d * n];
    for dd in 0..d {
        grid.inverse_in_place(&mut dwb_spec[dd * m..(dd + 1) * m], &mut dwb_lanes[dd * n..(dd + 1) * n]);
    }

    Ok(LiSAGradients {
        d_q,
        d_k: from_lanes(&dk_lanes, ch, n),
        d_v: from_lanes(&dv_lanes, ch, n),
        d_wa: kernel_from_lanes(&dwa_lanes, &cache.dims, &[ch, d]),
        d_wb: kernel_from_lanes(&dwb_lanes, &cache.dims, &[d]),
        d_ba,
        d_bb,
    })
}
