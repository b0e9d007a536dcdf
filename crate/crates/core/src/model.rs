//! Pre-norm transformer blocks around the multi-head operator and the
//! isotropic image classifier built from them.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lisa::{
    lisa_multihead_with, resize_embeddings, CircularEmbeddings, EmbeddingSharing, LiSAAttentionParams, LiSAConfig,
    TokenLayout, DEFAULT_LATENT,
};
use crate::ndtensor::{gelu, layer_norm, linear_with, Tensor};
use crate::random::{normal_tensor, rng_from_seed, trunc_normal_tensor};
use rand::Rng;

pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub latent: usize,
    pub patch: usize,
    /// Square input side in pixels.
    pub image: usize,
    pub classes: usize,
    pub sharing: EmbeddingSharing,
}

impl ModelConfig {
    /// `LiSANet-I-T`: 12 blocks of width 192 (12 heads) on a 14x14 grid.
    pub fn isotropic_tiny() -> Self {
        ModelConfig {
            name: "LiSANet-I-T".into(),
            blocks: 12,
            channels: 192,
            heads: 12,
            latent: DEFAULT_LATENT,
            patch: 16,
            image: 224,
            classes: 1000,
            sharing: EmbeddingSharing::Shared,
        }
    }

    pub fn with_latent(mut self, latent: usize) -> Self {
        self.latent = latent;
        self
    }

    pub fn with_image(mut self, image: usize) -> Self {
        self.image = image;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image == 0 || self.image % self.patch != 0 {
            return Err(Error::config(format!(
                "image size {} is not a positive multiple of patch {}",
                self.image, self.patch
            )));
        }
        if self.blocks == 0 || self.classes == 0 {
            return Err(Error::config("model needs at least one block and one class"));
        }
        self.block_config().map(|_| ())
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch * self.patch
    }

    pub fn block_config(&self) -> Result<LiSAConfig> {
        let g = self.grid();
        Ok(LiSAConfig::new(TokenLayout::Grid(g, g), self.channels, self.heads, self.latent)?
            .with_sharing(self.sharing))
    }
}

#[derive(Debug, Clone)]
pub struct LiSABlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: LiSAAttentionParams,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// `[C, 4C]`
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    /// `[4C, C]`
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl LiSABlockParams {
    /// Zero projections and embeddings with unit layer-norm scales.
    pub fn identity(cfg: &LiSAConfig) -> Self {
        let c = cfg.channels;
        LiSABlockParams {
            ln1_g: Tensor::ones(&[c]),
            ln1_b: Tensor::zeros(&[c]),
            attn: LiSAAttentionParams::zeros(cfg),
            ln2_g: Tensor::ones(&[c]),
            ln2_b: Tensor::zeros(&[c]),
            mlp_w1: Tensor::zeros(&[c, MLP_RATIO * c]),
            mlp_b1: Tensor::zeros(&[MLP_RATIO * c]),
            mlp_w2: Tensor::zeros(&[MLP_RATIO * c, c]),
            mlp_b2: Tensor::zeros(&[c]),
        }
    }

    pub fn init(cfg: &LiSAConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let mut p = Self::identity(cfg);
        p.attn.qkv_w = trunc_normal_tensor(&[c, 3 * c], INIT_STD, rng);
        p.attn.out_w = trunc_normal_tensor(&[c, c], INIT_STD, rng);
        for e in &mut p.attn.emb {
            e.wa = normal_tensor(e.wa.shape(), INIT_STD, rng);
            e.wb = normal_tensor(e.wb.shape(), INIT_STD, rng);
        }
        p.mlp_w1 = trunc_normal_tensor(&[c, MLP_RATIO * c], INIT_STD, rng);
        p.mlp_w2 = trunc_normal_tensor(&[MLP_RATIO * c, c], INIT_STD, rng);
        p
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.ln1_g, &self.ln1_b, &self.attn.qkv_w, &self.attn.qkv_b, &self.attn.out_w, &self.attn.out_b];
        for e in &self.attn.emb {
            v.extend(e.tensors());
        }
        v.extend([&self.ln2_g, &self.ln2_b, &self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2]);
        v
    }
}

pub fn mlp(x: &Tensor, p: &LiSABlockParams, exec: Exec) -> Result<Tensor> {
    let h = linear_with(x, &p.mlp_w1, &p.mlp_b1, exec)?.map(gelu);
    linear_with(&h, &p.mlp_w2, &p.mlp_b2, exec)
}

/// `x + A(LN(x))`, then `+ MLP(LN(.))`.
pub fn block_forward(x: &Tensor, p: &LiSABlockParams, cfg: &LiSAConfig) -> Result<Tensor> {
    block_forward_with(x, p, cfg, Exec::Sequential)
}

pub fn block_forward_with(x: &Tensor, p: &LiSABlockParams, cfg: &LiSAConfig, exec: Exec) -> Result<Tensor> {
    x.expect_shape(&[cfg.tokens(), cfg.channels], "block input")?;
    let a = lisa_multihead_with(&layer_norm(x, &p.ln1_g, &p.ln1_b, LN_EPS)?, &p.attn, cfg, exec)?;
    let x = x.add(&a)?;
    let m = mlp(&layer_norm(&x, &p.ln2_g, &p.ln2_b, LN_EPS)?, p, exec)?;
    x.add(&m)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    /// `[3 P P, C]` over patches flattened as `(channel, row, col)`.
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub blocks: Vec<LiSABlockParams>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    /// `[C, classes]`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Deterministic random initialization of the isotropic classifier.
pub fn build_isotropic(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let bc = cfg.block_config()?;
    let c = cfg.channels;
    let patch_w = trunc_normal_tensor(&[cfg.patch_dim(), c], INIT_STD, &mut rng);
    let blocks = (0..cfg.blocks).map(|_| LiSABlockParams::init(&bc, &mut rng)).collect();
    let head_w = trunc_normal_tensor(&[c, cfg.classes], INIT_STD, &mut rng);
    Ok(Model {
        cfg: cfg.clone(),
        patch_w,
        patch_b: Tensor::zeros(&[c]),
        blocks,
        norm_g: Tensor::ones(&[c]),
        norm_b: Tensor::zeros(&[c]),
        head_w,
        head_b: Tensor::zeros(&[cfg.classes]),
    })
}

impl Model {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.norm_g, &self.norm_b, &self.head_w, &self.head_b]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Copy of the model with every block's circular embeddings resampled for
    /// `image x image` inputs.
    pub fn resized(&self, image: usize) -> Result<Model> {
        let cfg = self.cfg.clone().with_image(image);
        cfg.validate()?;
        let layout = TokenLayout::Grid(cfg.grid(), cfg.grid());
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.attn.emb = b
                .attn
                .emb
                .iter()
                .map(|e| resize_embeddings(e, &layout))
                .collect::<Result<Vec<CircularEmbeddings>>>()?;
        }
        out.cfg = cfg;
        Ok(out)
    }
}

/// Non-overlapping patches of `[3, H, W]` as rows of `[tokens, 3 P P]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 || image.dim(0) != IMAGE_CHANNELS {
        return Err(Error::shape(format!("image must be [3, H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    if patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::arg(format!("image {h}x{w} is not divisible into {patch}x{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = IMAGE_CHANNELS * patch * patch;
    let d = image.data();
    Ok(Tensor::from_fn(&[gh * gw, pd], |f| {
        let (t, e) = (f / pd, f % pd);
        let (ch, py, px) = (e / (patch * patch), (e / patch) % patch, e % patch);
        let (y, x) = ((t / gw) * patch + py, (t % gw) * patch + px);
        d[(ch * h + y) * w + x]
    }))
}

pub fn model_forward(m: &Model, image: &Tensor) -> Result<Tensor> {
    model_forward_with(m, image, Exec::Sequential)
}

pub fn model_forward_with(m: &Model, image: &Tensor, exec: Exec) -> Result<Tensor> {
    let patches = patchify(image, m.cfg.patch)?;
    let (gh, gw) = (image.dim(1) / m.cfg.patch, image.dim(2) / m.cfg.patch);
    let bc = m.cfg.block_config()?;
    if bc.layout != TokenLayout::Grid(gh, gw) {
        return Err(Error::shape(format!(
            "model embeddings cover {:?} but the image yields a {gh}x{gw} grid; resize the model first",
            bc.layout
        )));
    }
    let mut x = linear_with(&patches, &m.patch_w, &m.patch_b, exec)?;
    for b in &m.blocks {
        x = block_forward_with(&x, b, &bc, exec)?;
    }
    let x = layer_norm(&x, &m.norm_g, &m.norm_b, LN_EPS)?;
    let (n, c) = (x.dim(0), x.dim(1));
    let pooled = Tensor::from_fn(&[1, c], |k| (0..n).map(|i| x.data()[i * c + k]).sum::<f64>() / n as f64);
    linear_with(&pooled, &m.head_w, &m.head_b, exec)?.reshape(&[m.cfg.classes])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockBreakdown {
    pub norms: usize,
    pub qkv: usize,
    pub out_proj: usize,
    pub mlp: usize,
    pub embeddings: usize,
}

impl BlockBreakdown {
    pub fn total(&self) -> usize {
        self.norms + self.qkv + self.out_proj + self.mlp + self.embeddings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub patch_embed: usize,
    pub block: BlockBreakdown,
    pub blocks: usize,
    pub final_norm: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.patch_embed + self.blocks * self.block.total() + self.final_norm + self.head
    }
}

/// Learnable parameter counts by component; a pure function of `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let bc = cfg.block_config()?;
    let c = cfg.channels;
    let (n, ch, d) = (bc.tokens(), bc.head_channels(), bc.latent);
    let one_set = n * ch * d + n * d + 2 * ch * d;
    Ok(ParamBreakdown {
        patch_embed: cfg.patch_dim() * c + c,
        block: BlockBreakdown {
            norms: 4 * c,
            qkv: 3 * c * c + 3 * c,
            out_proj: c * c + c,
            mlp: 2 * MLP_RATIO * c * c + MLP_RATIO * c + c,
            embeddings: one_set * bc.embedding_sets(),
        },
        blocks: cfg.blocks,
        final_norm: 2 * c,
        head: c * cfg.classes + cfg.classes,
    })
}
