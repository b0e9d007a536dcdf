//! Analytical cost model in multiply-accumulate operations (MACs).
//!
//! One multiply-add counts as one unit. Softmax, normalization, activations
//! and residual additions are not counted. A length-`N` real FFT costs
//! `N log2 N` in [`FftCostMode::Exact`] and nothing in
//! [`FftCostMode::Zero`]; a complex product in the frequency domain costs 4.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MLP_RATIO};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    SelfAttention,
    SaStructural,
    LiSA,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 3] = [OperatorKind::SelfAttention, OperatorKind::SaStructural, OperatorKind::LiSA];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::SelfAttention => "self_attention",
            OperatorKind::SaStructural => "sa_structural",
            OperatorKind::LiSA => "lisa",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown operator kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FftCostMode {
    #[default]
    Exact,
    Zero,
}

impl FromStr for FftCostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(FftCostMode::Exact),
            "zero" => Ok(FftCostMode::Zero),
            _ => Err(Error::arg(format!("fft cost mode must be 'exact' or 'zero', got '{s}'"))),
        }
    }
}

/// Geometry of one token-mixing operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub kind: OperatorKind,
    pub tokens: usize,
    pub channels: usize,
    pub latent: usize,
    pub heads: usize,
    /// Distinct embedding sets (1 when shared across heads).
    pub embedding_sets: usize,
    pub fft: FftCostMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockCost {
    pub projections: u64,
    pub attention: u64,
    pub mlp: u64,
}

impl BlockCost {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.mlp
    }
}

impl CostModel {
    pub fn new(kind: OperatorKind, tokens: usize, channels: usize, latent: usize, heads: usize) -> Self {
        CostModel {
            kind,
            tokens,
            channels,
            latent,
            heads,
            embedding_sets: 1,
            fft: FftCostMode::Exact,
        }
    }

    pub fn with_fft(mut self, fft: FftCostMode) -> Self {
        self.fft = fft;
        self
    }

    fn fft_lane(&self) -> f64 {
        match self.fft {
            FftCostMode::Exact if self.tokens > 1 => self.tokens as f64 * (self.tokens as f64).log2(),
            _ => 0.0,
        }
    }

    /// MACs of the token-mixing step alone (no projections).
    pub fn attention_macs(&self) -> u64 {
        let (n, c, d) = (self.tokens as f64, self.channels as f64, self.latent as f64);
        let macs = match self.kind {
            OperatorKind::SelfAttention => 2.0 * n * n * c,
            OperatorKind::SaStructural => 2.0 * n * n * c * d + 2.0 * n * c * d,
            OperatorKind::LiSA => {
                let ch = c / self.heads.max(1) as f64;
                let sets = self.embedding_sets as f64;
                // K and V per channel, two inverse transforms per (channel, latent),
                // plus the kernel spectra of every embedding set.
                let lanes = 2.0 * c + 2.0 * c * d + sets * (ch * d + d);
                let bins = n / 2.0 + 1.0;
                lanes * self.fft_lane() + 4.0 * 2.0 * c * d * bins + 2.0 * n * c * d
            }
        };
        macs.round() as u64
    }

    /// One transformer block: QKV and output projections, token mixing, MLP.
    pub fn block(&self) -> BlockCost {
        let (n, c) = (self.tokens as u64, self.channels as u64);
        BlockCost {
            projections: 4 * n * c * c,
            attention: self.attention_macs(),
            mlp: 2 * MLP_RATIO as u64 * n * c * c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelCost {
    pub patch_embed: u64,
    pub block: BlockCost,
    pub blocks: usize,
    pub head: u64,
}

impl ModelCost {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.block.total() * self.blocks as u64 + self.head
    }
}

/// Whole-classifier MACs for the isotropic geometry of `cfg` with the token
/// mixer replaced by `kind`.
pub fn estimate_flops(cfg: &ModelConfig, kind: OperatorKind, fft: FftCostMode) -> Result<ModelCost> {
    cfg.validate()?;
    let n = cfg.tokens();
    let mut cm = CostModel::new(kind, n, cfg.channels, cfg.latent, cfg.heads).with_fft(fft);
    cm.embedding_sets = cfg.block_config()?.embedding_sets();
    Ok(ModelCost {
        patch_embed: (n * cfg.patch_dim() * cfg.channels) as u64,
        block: cm.block(),
        blocks: cfg.blocks,
        head: (cfg.channels * cfg.classes) as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_term_scales_by_four() {
        let a = CostModel::new(OperatorKind::SelfAttention, 300, 96, 16, 3);
        let b = CostModel { tokens: 600, ..a };
        assert_eq!(b.attention_macs(), 4 * a.attention_macs());
    }

    #[test]
    fn zero_mode_drops_transforms() {
        let a = CostModel::new(OperatorKind::LiSA, 196, 192, 16, 12);
        let z = a.with_fft(FftCostMode::Zero);
        assert!(z.attention_macs() < a.attention_macs());
        assert_eq!(z.attention_macs(), 8 * 192 * 16 * 99 + 2 * 196 * 192 * 16);
    }

    #[test]
    fn kinds_parse() {
        for k in OperatorKind::ALL {
            assert_eq!(k.name().parse::<OperatorKind>().unwrap(), k);
        }
        assert!("x".parse::<OperatorKind>().is_err());
    }
}
