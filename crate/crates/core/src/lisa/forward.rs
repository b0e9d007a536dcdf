use super::{CircularEmbeddings, LiSAConfig, TokenLayout};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fourier::GridFft;
use crate::ndtensor::alloc::TrackedVec;
use crate::ndtensor::Tensor;
use num_complex::Complex64;

const CZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Intermediates kept by a training forward pass. Per-channel quantities are
/// stored lane-major (token axis innermost) so every FFT lane is contiguous.
#[derive(Debug, Clone)]
pub struct LiSACache {
    pub(crate) dims: Vec<usize>,
    pub(crate) n: usize,
    pub(crate) ch: usize,
    pub(crate) d: usize,
    pub(crate) qb: Tensor,
    /// `Ga + Ba`, `[C_h, D, N]`
    pub(crate) ha: Tensor,
    /// `Gb + Bb`, `[C_h, D, N]`
    pub(crate) hb: Tensor,
    /// `P[d, i] = sum_c Qb[i,c] ha[c,d,i]`, `[D, N]`
    pub(crate) p: Tensor,
    pub(crate) k_spec: TrackedVec<Complex64>,
    pub(crate) v_spec: TrackedVec<Complex64>,
    pub(crate) wa_spec: TrackedVec<Complex64>,
    pub(crate) wb_spec: TrackedVec<Complex64>,
}

impl LiSACache {
    /// `Ga` at `[N, C_h, D]` (without the bias).
    pub fn key_convolution(&self, ba: &Tensor) -> Tensor {
        let (n, ch, d) = (self.n, self.ch, self.d);
        Tensor::from_fn(&[n, ch, d], |f| {
            let (i, c, dd) = (f / (ch * d), (f / d) % ch, f % d);
            self.ha.data()[(c * d + dd) * n + i] - ba.data()[c * d + dd]
        })
    }

    /// `Gb` at `[N, C_h, D]` (without the bias).
    pub fn value_convolution(&self, bb: &Tensor) -> Tensor {
        let (n, ch, d) = (self.n, self.ch, self.d);
        Tensor::from_fn(&[n, ch, d], |f| {
            let (i, k, dd) = (f / (ch * d), (f / d) % ch, f % d);
            self.hb.data()[(k * d + dd) * n + i] - bb.data()[k * d + dd]
        })
    }
}

/// `[N, C]` token-major -> `[C, N]` lane-major.
pub(crate) fn to_lanes(x: &Tensor) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    Tensor::from_fn(&[c, n], |f| x.data()[(f % n) * c + f / n])
}

/// `[..grid, A, B]` (grid flattened to `N`) -> `[A*B, N]`.
pub(crate) fn kernel_lanes(w: &Tensor, n: usize) -> Tensor {
    let inner = w.len() / n;
    Tensor::from_fn(&[inner, n], |f| w.data()[(f % n) * inner + f / n])
}

pub(crate) fn spectra(grid: &GridFft, lanes: &Tensor) -> TrackedVec<Complex64> {
    let (n, m) = (grid.real_len(), grid.spec_len());
    let count = lanes.len() / n;
    let mut out = vec![CZERO; count * m];
    for (src, dst) in lanes.data().chunks(n).zip(out.chunks_mut(m)) {
        grid.forward(src, dst);
    }
    TrackedVec::new(out)
}

fn check_inputs(qb: &Tensor, kb: &Tensor, v: &Tensor, emb: &CircularEmbeddings, cfg: &LiSAConfig) -> Result<()> {
    cfg.validate()?;
    let (n, ch) = (cfg.tokens(), cfg.head_channels());
    qb.expect_shape(&[n, ch], "normalized query")?;
    kb.expect_shape(&[n, ch], "normalized key")?;
    v.expect_shape(&[n, ch], "value")?;
    emb.validate(cfg)
}

fn run(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    emb: &CircularEmbeddings,
    cfg: &LiSAConfig,
    exec: Exec,
) -> Result<(Tensor, LiSACache)> {
    check_inputs(qb, kb, v, emb, cfg)?;
    let dims = cfg.layout.dims();
    let grid = GridFft::new(&dims)?;
    let (n, m) = (grid.real_len(), grid.spec_len());
    let (ch, d) = (cfg.head_channels(), cfg.latent);

    let k_spec = spectra(&grid, &to_lanes(kb));
    let wa_spec = spectra(&grid, &kernel_lanes(&emb.wa, n));
    let v_spec = spectra(&grid, &to_lanes(v));
    let wb_spec = spectra(&grid, &kernel_lanes(&emb.wb, n));

    // ha[c,d,:] = irfft(K[c] * Wa[c,d]) + Ba[c,d]
    let mut ha = Tensor::zeros(&[ch, d, n]);
    exec.for_each_chunk_mut(ha.data_mut(), d * n, |c, block| {
        let mut prod = vec![CZERO; m];
        let ks = &k_spec[c * m..(c + 1) * m];
        for (dd, lane) in block.chunks_mut(n).enumerate() {
            let ws = &wa_spec[(c * d + dd) * m..(c * d + dd + 1) * m];
            for ((p, &a), &b) in prod.iter_mut().zip(ks).zip(ws) {
                *p = a * b;
            }
            grid.inverse_in_place(&mut prod, lane);
            let bias = emb.ba.data()[c * d + dd];
            lane.iter_mut().for_each(|x| *x += bias);
        }
    });

    // hb[k,d,:] = irfft(V[k] * Wb[d]) + Bb[k,d]
    let mut hb = Tensor::zeros(&[ch, d, n]);
    exec.for_each_chunk_mut(hb.data_mut(), d * n, |k, block| {
        let mut prod = vec![CZERO; m];
        let vs = &v_spec[k * m..(k + 1) * m];
        for (dd, lane) in block.chunks_mut(n).enumerate() {
            let ws = &wb_spec[dd * m..(dd + 1) * m];
            for ((p, &a), &b) in prod.iter_mut().zip(vs).zip(ws) {
                *p = a * b;
            }
            grid.inverse_in_place(&mut prod, lane);
            let bias = emb.bb.data()[k * d + dd];
            lane.iter_mut().for_each(|x| *x += bias);
        }
    });

    let mut p = Tensor::zeros(&[d, n]);
    {
        let (pd, had, qd) = (p.data_mut(), ha.data(), qb.data());
        for c in 0..ch {
            for dd in 0..d {
                let lane = &had[(c * d + dd) * n..(c * d + dd + 1) * n];
                let dst = &mut pd[dd * n..(dd + 1) * n];
                for (i, (o, &h)) in dst.iter_mut().zip(lane).enumerate() {
                    *o += qd[i * ch + c] * h;
                }
            }
        }
    }

    let mut y = Tensor::zeros(&[n, ch]);
    {
        let (yd, hbd, pd) = (y.data_mut(), hb.data(), p.data());
        for k in 0..ch {
            for dd in 0..d {
                let lane = &hbd[(k * d + dd) * n..(k * d + dd + 1) * n];
                let pl = &pd[dd * n..(dd + 1) * n];
                for i in 0..n {
                    yd[i * ch + k] += pl[i] * lane[i];
                }
            }
        }
    }

    let cache = LiSACache {
        dims,
        n,
        ch,
        d,
        qb: qb.clone(),
        ha,
        hb,
        p,
        k_spec,
        v_spec,
        wa_spec,
        wb_spec,
    };
    Ok((y, cache))
}

/// FFT-evaluated operator for one head. `qb`, `kb`, `v` are `[N, C_h]`,
/// with `qb`/`kb` already L2-normalized along channels.
pub fn lisa_forward(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    emb: &CircularEmbeddings,
    cfg: &LiSAConfig,
) -> Result<Tensor> {
    lisa_forward_with(qb, kb, v, emb, cfg, Exec::Sequential)
}

pub fn lisa_forward_with(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    emb: &CircularEmbeddings,
    cfg: &LiSAConfig,
    exec: Exec,
) -> Result<Tensor> {
    run(qb, kb, v, emb, cfg, exec).map(|(y, _)| y)
}

/// As [`lisa_forward`] but also returns the intermediates needed by
/// [`lisa_backward`](super::lisa_backward).
pub fn lisa_forward_saved(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    emb: &CircularEmbeddings,
    cfg: &LiSAConfig,
) -> Result<(Tensor, LiSACache)> {
    run(qb, kb, v, emb, cfg, Exec::Sequential)
}

/// [`lisa_forward`] restricted to grid layouts (doubly-circular 2D kernels).
pub fn lisa_forward_2d(
    qb: &Tensor,
    kb: &Tensor,
    v: &Tensor,
    emb: &CircularEmbeddings,
    cfg: &LiSAConfig,
) -> Result<Tensor> {
    match cfg.layout {
        TokenLayout::Grid(h, w) if h * w == qb.shape().first().copied().unwrap_or(0) => {
            lisa_forward(qb, kb, v, emb, cfg)
        }
        TokenLayout::Grid(h, w) => Err(Error::shape(format!(
            "grid {h}x{w} does not cover {:?} tokens",
            qb.shape()
        ))),
        TokenLayout::Sequence(_) => Err(Error::config("2D forward needs a grid layout")),
    }
}

/// Stateful wrapper pairing a training forward with its backward pass.
#[derive(Debug, Clone)]
pub struct LiSALayer {
    pub cfg: LiSAConfig,
    pub emb: CircularEmbeddings,
    saved: Option<LiSACache>,
}

impl LiSALayer {
    pub fn new(cfg: LiSAConfig, emb: CircularEmbeddings) -> Result<Self> {
        emb.validate(&cfg)?;
        Ok(LiSALayer { cfg, emb, saved: None })
    }

    pub fn forward(&self, qb: &Tensor, kb: &Tensor, v: &Tensor) -> Result<Tensor> {
        lisa_forward(qb, kb, v, &self.emb, &self.cfg)
    }

    /// Forward pass that retains intermediates for one [`backward`](Self::backward).
    pub fn forward_train(&mut self, qb: &Tensor, kb: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (y, cache) = lisa_forward_saved(qb, kb, v, &self.emb, &self.cfg)?;
        self.saved = Some(cache);
        Ok(y)
    }

    /// Gradients of `sum(upstream * Y)`; consumes the saved intermediates.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<super::LiSAGradients> {
        let cache = self
            .saved
            .take()
            .ok_or_else(|| Error::State("backward called without a retained forward pass".into()))?;
        super::lisa_backward(upstream, &cache)
    }
}
