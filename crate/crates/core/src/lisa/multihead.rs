use super::forward::lisa_forward;
use super::{CircularEmbeddings, LiSAConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ndtensor::{l2_normalize, linear_with, Tensor};

/// Projections and embeddings of one multi-head operator.
///
/// `emb` holds one shared set or one set per head, per
/// [`LiSAConfig::embedding_sets`].
#[derive(Debug, Clone)]
pub struct LiSAAttentionParams {
    /// `[C, 3C]`, output columns ordered `q | k | v`.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    /// `[C, C]`
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub emb: Vec<CircularEmbeddings>,
}

impl LiSAAttentionParams {
    pub fn zeros(cfg: &LiSAConfig) -> Self {
        let c = cfg.channels;
        LiSAAttentionParams {
            qkv_w: Tensor::zeros(&[c, 3 * c]),
            qkv_b: Tensor::zeros(&[3 * c]),
            out_w: Tensor::zeros(&[c, c]),
            out_b: Tensor::zeros(&[c]),
            emb: vec![CircularEmbeddings::zeros(cfg); cfg.embedding_sets()],
        }
    }

    pub fn validate(&self, cfg: &LiSAConfig) -> Result<()> {
        cfg.validate()?;
        let c = cfg.channels;
        self.qkv_w.expect_shape(&[c, 3 * c], "qkv weight")?;
        self.qkv_b.expect_shape(&[3 * c], "qkv bias")?;
        self.out_w.expect_shape(&[c, c], "output weight")?;
        self.out_b.expect_shape(&[c], "output bias")?;
        if self.emb.len() != cfg.embedding_sets() {
            return Err(Error::config(format!(
                "{} embedding sets supplied, configuration expects {}",
                self.emb.len(),
                cfg.embedding_sets()
            )));
        }
        self.emb.iter().try_for_each(|e| e.validate(cfg))
    }

    pub fn parameter_count(&self) -> usize {
        self.qkv_w.len()
            + self.qkv_b.len()
            + self.out_w.len()
            + self.out_b.len()
            + self.emb.iter().map(CircularEmbeddings::parameter_count).sum::<usize>()
    }

    fn head_embeddings(&self, head: usize) -> &CircularEmbeddings {
        &self.emb[if self.emb.len() == 1 { 0 } else { head }]
    }
}

/// Splits `[N, C]` into `heads` contiguous `[N, C / heads]` slices.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("expected [N, C], got {:?}", x.shape())));
    }
    let c = x.dim(1);
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide {c} channels")));
    }
    let ch = c / heads;
    (0..heads).map(|h| x.narrow_last(h * ch, ch)).collect()
}

pub fn lisa_multihead(x: &Tensor, params: &LiSAAttentionParams, cfg: &LiSAConfig) -> Result<Tensor> {
    lisa_multihead_with(x, params, cfg, Exec::Sequential)
}

/// Project, split into heads, normalize `Q`/`K` per head, apply the operator
/// per head, concatenate and project out. Heads run under `exec`.
pub fn lisa_multihead_with(
    x: &Tensor,
    params: &LiSAAttentionParams,
    cfg: &LiSAConfig,
    exec: Exec,
) -> Result<Tensor> {
    params.validate(cfg)?;
    let (n, c) = (cfg.tokens(), cfg.channels);
    x.expect_shape(&[n, c], "block input")?;
    let qkv = linear_with(x, &params.qkv_w, &params.qkv_b, exec)?;
    let q = split_heads(&qkv.narrow_last(0, c)?, cfg.heads)?;
    let k = split_heads(&qkv.narrow_last(c, c)?, cfg.heads)?;
    let v = split_heads(&qkv.narrow_last(2 * c, c)?, cfg.heads)?;
    let head_cfg = LiSAConfig::single_head(cfg.layout, cfg.head_channels(), cfg.latent)?;

    let outs = exec.map(cfg.heads, |h| {
        let qb = l2_normalize(&q[h], 1)?;
        let kb = l2_normalize(&k[h], 1)?;
        lisa_forward(&qb, &kb, &v[h], params.head_embeddings(h), &head_cfg)
    });
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    linear_with(&Tensor::concat_last(&outs)?, &params.out_w, &params.out_b, exec)
}
