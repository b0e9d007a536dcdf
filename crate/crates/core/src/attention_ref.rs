//! Quadratic reference operators: softmax self-attention (with and without
//! an additive relative position bias) and the structure-aware attention
//! family that weights query-key correlations with Toeplitz embeddings.
//!
//! Everything here materializes `N x N` matrices and loops naively. These are
//! the oracles the FFT operator in [`crate::lisa`] is tested against, not
//! production paths. Single head only.
//!
//! Shapes: queries/keys/values are `[N, C]`; a stacked embedding carries
//! `2N - 1` offsets on its first axis.

use crate::error::{Error, Result};
use crate::ndtensor::{l2_normalize, softmax, Tensor};

/// Learnable relative-offset weights `e` of length `2N - 1`, optionally
/// stacked along trailing axes (`[2N-1, D]` or `[2N-1, C, D]`).
///
/// Offset `j - i` between query `i` and key `j` reads `weights[N - 1 + j - i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzEmbedding {
    weights: Tensor,
    n: usize,
}

impl ToeplitzEmbedding {
    pub fn new(weights: Tensor) -> Result<Self> {
        let len = weights.shape().first().copied().unwrap_or(0);
        if len == 0 || len % 2 == 0 {
            return Err(Error::shape(format!(
                "embedding needs 2N-1 offsets on axis 0, got shape {:?}",
                weights.shape()
            )));
        }
        Ok(ToeplitzEmbedding {
            n: len.div_ceil(2),
            weights,
        })
    }

    /// Embedding for `n` tokens; fails unless `weights` has `2n - 1` offsets.
    pub fn for_tokens(weights: Tensor, n: usize) -> Result<Self> {
        let e = Self::new(weights)?;
        if e.n != n {
            return Err(Error::shape(format!(
                "expected {} offsets for {n} tokens, got {}",
                2 * n - 1,
                2 * e.n - 1
            )));
        }
        Ok(e)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    fn trailing(&self) -> &[usize] {
        &self.weights.shape()[1..]
    }
}

/// Realizes `T(e)`: `[N, N, ..trailing]` with `T[i][j] = e[N-1 + j - i]`.
pub fn toeplitz_from_weights(e: &ToeplitzEmbedding) -> Tensor {
    let n = e.n;
    let inner: usize = e.trailing().iter().product();
    let w = e.weights.data();
    let mut shape = vec![n, n];
    shape.extend_from_slice(e.trailing());
    Tensor::from_fn(&shape, |flat| {
        let t = flat % inner;
        let ij = flat / inner;
        let (i, j) = (ij / n, ij % n);
        w[(n - 1 + j - i) * inner + t]
    })
}

/// Realizes a circulant stack `[N, N, ..trailing]` from kernels `w
/// [N, ..trailing]`: `C[i][j] = w[(i - j) mod N]`, so that `C x` is the circular
/// convolution of `x` with `w`.
pub fn circulant_from_kernel(w: &Tensor) -> Result<Tensor> {
    let n = *w
        .shape()
        .first()
        .ok_or_else(|| Error::shape("circulant kernel must have a token axis"))?;
    if n == 0 {
        return Err(Error::arg("circulant kernel is empty"));
    }
    let inner: usize = w.shape()[1..].iter().product();
    let wd = w.data();
    let mut shape = vec![n, n];
    shape.extend_from_slice(&w.shape()[1..]);
    Ok(Tensor::from_fn(&shape, |flat| {
        let t = flat % inner;
        let ij = flat / inner;
        let (i, j) = (ij / n, ij % n);
        wd[((i + n - j) % n) * inner + t]
    }))
}

/// Doubly-circulant stack for a row-major `h x w` token grid from kernels
/// `[h, w, ..trailing]`: token `(r, c)` receives key `(r', c')` with weight
/// `kernel[(r - r') mod h, (c - c') mod w]`.
pub fn circulant2d_from_kernel(kernel: &Tensor) -> Result<Tensor> {
    if kernel.rank() < 2 {
        return Err(Error::shape("2D circulant kernel needs [h, w, ..] shape"));
    }
    let (h, w) = (kernel.dim(0), kernel.dim(1));
    if h == 0 || w == 0 {
        return Err(Error::arg("2D circulant kernel is empty"));
    }
    let n = h * w;
    let inner: usize = kernel.shape()[2..].iter().product();
    let kd = kernel.data();
    let mut shape = vec![n, n];
    shape.extend_from_slice(&kernel.shape()[2..]);
    Ok(Tensor::from_fn(&shape, |flat| {
        let t = flat % inner;
        let ij = flat / inner;
        let (i, j) = (ij / n, ij % n);
        let (ri, ci) = (i / w, i % w);
        let (rj, cj) = (j / w, j % w);
        let dr = (ri + h - rj) % h;
        let dc = (ci + w - cj) % w;
        kd[(dr * w + dc) * inner + t]
    }))
}

fn expect_tokens(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("{what} must be [N, C], got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1)))
}

fn expect_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = expect_tokens(q, "query")?;
    k.expect_shape(&[n, c], "key")?;
    let (nv, cv) = expect_tokens(v, "value")?;
    if nv != n {
        return Err(Error::shape(format!("value has {nv} tokens, query has {n}")));
    }
    Ok((n, cv))
}

/// Plain matrix product `T(e) x` of a single `[2N-1]` embedding with `[N, C]`.
pub fn global_conv_direct(x: &Tensor, e: &ToeplitzEmbedding) -> Result<Tensor> {
    let (n, c) = expect_tokens(x, "input")?;
    if e.n != n || e.weights.rank() != 1 {
        return Err(Error::shape(format!(
            "embedding for {} tokens {:?} cannot act on {n} tokens",
            e.n,
            e.weights.shape()
        )));
    }
    let t = toeplitz_from_weights(e);
    crate::ndtensor::matmul(&t, x).map(|y| {
        debug_assert_eq!(y.shape(), &[n, c]);
        y
    })
}

/// `result[i] = sum_j w[(i - j) mod N] x[j]` by explicit summation.
pub fn circulant_conv_direct(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c) = expect_tokens(x, "input")?;
    w.expect_shape(&[n], "circulant kernel")?;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for j in 0..n {
            let wij = w.data()[(i + n - j) % n];
            for k in 0..c {
                let v = out.at(&[i, k]) + wij * x.at(&[j, k]);
                out.set(&[i, k], v);
            }
        }
    }
    Ok(out)
}

fn softmax_attend(logits: &Tensor, v: &Tensor) -> Result<Tensor> {
    let p = softmax(logits, 1)?;
    crate::ndtensor::matmul(&p, v)
}

fn scaled_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let c = q.dim(1) as f64;
    let s = 1.0 / c.sqrt();
    Ok(crate::ndtensor::contract(q, k, crate::ndtensor::Contraction::MatMulBt)?.scale(s))
}

/// `Y = softmax(Q K^T / sqrt(C)) V`, softmax along keys.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    expect_qkv(q, k, v)?;
    softmax_attend(&scaled_logits(q, k)?, v)
}

/// Self-attention with the Toeplitz bias added to the logits before softmax.
pub fn self_attention_rpe(q: &Tensor, k: &Tensor, v: &Tensor, e: &ToeplitzEmbedding) -> Result<Tensor> {
    let (n, _) = expect_qkv(q, k, v)?;
    if e.n != n || e.weights.rank() != 1 {
        return Err(Error::shape("relative bias must be a [2N-1] embedding"));
    }
    let logits = scaled_logits(q, k)?.add(&toeplitz_from_weights(e))?;
    softmax_attend(&logits, v)
}

/// `Y[i,k] = sum_j (Qb_i . Kb_j) R[i,j] V[j,k]` with `R = T(e)`; no softmax,
/// no scaling. `qb`/`kb` are expected to be L2-normalized already.
pub fn sa_basic(qb: &Tensor, kb: &Tensor, v: &Tensor, e: &ToeplitzEmbedding) -> Result<Tensor> {
    let (n, _) = expect_qkv(qb, kb, v)?;
    if e.n != n || e.weights.rank() != 1 {
        return Err(Error::shape("multiplicative embedding must be a [2N-1] embedding"));
    }
    let corr = crate::ndtensor::contract(qb, kb, crate::ndtensor::Contraction::MatMulBt)?;
    let weighted = corr.zip_map(&toeplitz_from_weights(e), |a, r| a * r)?;
    crate::ndtensor::matmul(&weighted, v)
}

/// Parameters of the structure-aware operators.
///
/// * `ea`: `[2N-1, D]` (shared over channels) or `[2N-1, C, D]` (expanded)
/// * `eb`: `[2N-1, D]`
/// * `ba`, `bb`: `[C, D]`
#[derive(Debug, Clone)]
pub struct SAWeights {
    pub ea: ToeplitzEmbedding,
    pub eb: ToeplitzEmbedding,
    pub ba: Tensor,
    pub bb: Tensor,
}

impl SAWeights {
    pub fn latent(&self) -> usize {
        *self.eb.weights.shape().last().unwrap_or(&1)
    }

    pub fn is_expanded(&self) -> bool {
        self.ea.weights.rank() == 3
    }
}

/// Materialized relative-position tensors for the structure-aware family.
/// `ra`: `[N, N, C, D]` (channel-expanded), `rb`: `[N, N, D]`.
#[derive(Debug, Clone)]
pub struct Materialized<'a> {
    pub ra: Tensor,
    pub rb: Tensor,
    pub ba: &'a Tensor,
    pub bb: &'a Tensor,
}

impl<'a> Materialized<'a> {
    /// Toeplitz realization of `w`, broadcasting an unexpanded `ea` over `c` channels.
    pub fn toeplitz(w: &'a SAWeights, c: usize) -> Result<Self> {
        let ra = toeplitz_from_weights(&w.ea);
        let ra = if w.is_expanded() { ra } else { expand_channels(&ra, c) };
        Ok(Materialized {
            ra,
            rb: toeplitz_from_weights(&w.eb),
            ba: &w.ba,
            bb: &w.bb,
        })
    }
}

/// `[N, N, D]` -> `[N, N, C, D]` by repetition over the new channel axis.
pub fn expand_channels(r: &Tensor, c: usize) -> Tensor {
    let (n0, n1, d) = (r.dim(0), r.dim(1), r.dim(2));
    Tensor::from_fn(&[n0, n1, c, d], |flat| {
        let dd = flat % d;
        let ij = flat / (c * d);
        r.data()[ij * d + dd]
    })
}

struct Dims {
    n: usize,
    c: usize,
    cv: usize,
    d: usize,
}

fn check_materialized(qb: &Tensor, kb: &Tensor, v: &Tensor, m: &Materialized) -> Result<Dims> {
    let (n, cv) = expect_qkv(qb, kb, v)?;
    let c = qb.dim(1);
    let d = *m.rb.shape().last().unwrap_or(&0);
    m.rb.expect_shape(&[n, n, d], "value-side embedding")?;
    m.ra.expect_shape(&[n, n, c, d], "key-side embedding")?;
    m.ba.expect_shape(&[c, d], "key-side bias")?;
    m.bb.expect_shape(&[cv, d], "value-side bias")?;
    if d == 0 {
        return Err(Error::shape("latent extent D must be at least 1"));
    }
    Ok(Dims { n, c, cv, d })
}

/// Key path `P[i,c,d] = sum_n Kb[n,c] Ra[i,n,c,d]` and value path
/// `S[i,k,d] = sum_j Rb[i,j,d] V[j,k]`, before biases.
fn key_value_paths(kb: &Tensor, v: &Tensor, m: &Materialized, dm: &Dims) -> (Tensor, Tensor) {
    let Dims { n, c, cv, d } = *dm;
    let mut p = Tensor::zeros(&[n, c, d]);
    let mut s = Tensor::zeros(&[n, cv, d]);
    let (ra, rb, kd, vd) = (m.ra.data(), m.rb.data(), kb.data(), v.data());
    {
        let pd = p.data_mut();
        for i in 0..n {
            for nn in 0..n {
                for ch in 0..c {
                    let kv = kd[nn * c + ch];
                    for dd in 0..d {
                        pd[(i * c + ch) * d + dd] += kv * ra[((i * n + nn) * c + ch) * d + dd];
                    }
                }
            }
        }
        let sd = s.data_mut();
        for i in 0..n {
            for j in 0..n {
                for k in 0..cv {
                    let vv = vd[j * cv + k];
                    for dd in 0..d {
                        sd[(i * cv + k) * d + dd] += rb[(i * n + j) * d + dd] * vv;
                    }
                }
            }
        }
    }
    (p, s)
}

/// `Y[i,k] = sum_c Qb[i,c] sum_d A[i,c,d] B[i,k,d]`.
fn combine(qb: &Tensor, a: &Tensor, b: &Tensor, dm: &Dims) -> Tensor {
    let Dims { n, c, cv, d } = *dm;
    Tensor::from_fn(&[n, cv], |flat| {
        let (i, k) = (flat / cv, flat % cv);
        let mut acc = 0.0;
        for ch in 0..c {
            let q = qb.data()[i * c + ch];
            let mut inner = 0.0;
            for dd in 0..d {
                inner += a.data()[(i * c + ch) * d + dd] * b.data()[(i * cv + k) * d + dd];
            }
            acc += q * inner;
        }
        acc
    })
}

fn add_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    // x: [N, C, D], bias: [C, D]
    let cd = bias.len();
    Tensor::from_fn(x.shape(), |flat| x.data()[flat] + bias.data()[flat % cd])
}

fn broadcast_bias(bias: &Tensor, n: usize) -> Tensor {
    let cd = bias.len();
    let mut shape = vec![n];
    shape.extend_from_slice(bias.shape());
    Tensor::from_fn(&shape, |flat| bias.data()[flat % cd])
}

/// Structure-aware attention on materialized embedding tensors:
/// `Y[i,k] = sum_c Qb[i,c] sum_d (sum_n Kb[n,c] Ra[i,n,c,d] + Ba[c,d])
///                              (sum_j Rb[i,j,d] V[j,k] + Bb[k,d])`.
pub fn sa_full_materialized(qb: &Tensor, kb: &Tensor, v: &Tensor, m: &Materialized) -> Result<Tensor> {
    let dm = check_materialized(qb, kb, v, m)?;
    let (p, s) = key_value_paths(kb, v, m, &dm);
    Ok(combine(qb, &add_bias(&p, m.ba), &add_bias(&s, m.bb), &dm))
}

/// The four products in the bias expansion of [`sa_full_materialized`]:
/// structure term, query-driven dynamic convolution (`Ba` x value path),
/// structural feature (key path x `Bb`), and linear projection (`Ba` x `Bb`).
pub fn sa_four_terms_materialized(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    m: &Materialized,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let dm = check_materialized(qb, kb, v, m)?;
    let (p, s) = key_value_paths(kb, v, m, &dm);
    let ba = broadcast_bias(m.ba, dm.n);
    let bb = broadcast_bias(m.bb, dm.n);
    Ok((
        combine(qb, &p, &s, &dm),
        combine(qb, &ba, &s, &dm),
        combine(qb, &p, &bb, &dm),
        combine(qb, &ba, &bb, &dm),
    ))
}

/// Structure-aware attention with channel-shared key embeddings
/// (`ea: [2N-1, D]`) and a value-side bias; `ba` is ignored.
pub fn sa_structural(qb: &Tensor, kb: &Tensor, v: &Tensor, w: &SAWeights) -> Result<Tensor> {
    if w.is_expanded() {
        return Err(Error::shape("sa_structural takes an unexpanded [2N-1, D] key embedding"));
    }
    let c = qb.dim(1);
    let mut m = Materialized::toeplitz(w, c)?;
    let zero_ba = Tensor::zeros(&[c, w.latent()]);
    m.ba = &zero_ba;
    sa_full_materialized(qb, kb, v, &m)
}

/// Structure-aware attention with channel-expanded key embeddings
/// (`ea: [2N-1, C, D]`) and both biases.
pub fn sa_full(qb: &Tensor, kb: &Tensor, v: &Tensor, w: &SAWeights) -> Result<Tensor> {
    let m = Materialized::toeplitz(w, qb.dim(1))?;
    sa_full_materialized(qb, kb, v, &m)
}

/// [`sa_four_terms_materialized`] on Toeplitz-realized weights.
pub fn sa_four_terms(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    w: &SAWeights,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let m = Materialized::toeplitz(w, qb.dim(1))?;
    sa_four_terms_materialized(qb, kb, v, &m)
}

/// Normalizes raw query/key rows the way the structure-aware operators expect.
pub fn normalize_qk(q: &Tensor, k: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((l2_normalize(q, 1)?, l2_normalize(k, 1)?))
}
