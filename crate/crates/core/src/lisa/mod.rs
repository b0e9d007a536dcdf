//! The log-linear structure-aware attention operator.
//!
//! Relative position embeddings are replaced by circular kernels `Wa`
//! (depthwise over key channels) and `Wb` (shared over value channels), and
//! both global convolutions are evaluated in the frequency domain:
//!
//! ```text
//! Ga = Kb (*) Wa            Gb = V (*) Wb                  (circular, per latent d)
//! Y[i,k] = sum_c Qb[i,c] sum_d (Ga[i,c,d] + Ba[c,d]) (Gb[i,k,d] + Bb[k,d])
//! ```
//!
//! Tokens are either a 1D sequence or a row-major 2D grid, in which case the
//! convolutions are doubly circular.

mod backward;
mod forward;
mod kernel;
mod multihead;

pub use backward::{lisa_backward, LiSAGradients};
pub use forward::{lisa_forward, lisa_forward_2d, lisa_forward_saved, lisa_forward_with, LiSACache, LiSALayer};
pub use kernel::{extract_query_kernel, resize_embeddings, resample_axis, QueryKernel};
pub use multihead::{lisa_multihead, lisa_multihead_with, split_heads, LiSAAttentionParams};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::random::normal_tensor;
use rand::Rng;

/// Default width of the latent structural encoding.
pub const DEFAULT_LATENT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLayout {
    Sequence(usize),
    /// Row-major `(height, width)` grid.
    Grid(usize, usize),
}

impl TokenLayout {
    pub fn tokens(&self) -> usize {
        match *self {
            TokenLayout::Sequence(n) => n,
            TokenLayout::Grid(h, w) => h * w,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            TokenLayout::Sequence(n) => vec![n],
            TokenLayout::Grid(h, w) => vec![h, w],
        }
    }

    /// A square grid when `n` is a perfect square, otherwise a sequence.
    pub fn square_or_sequence(n: usize) -> Self {
        let r = (n as f64).sqrt().round() as usize;
        if r * r == n {
            TokenLayout::Grid(r, r)
        } else {
            TokenLayout::Sequence(n)
        }
    }
}

/// Whether heads share one set of circular embeddings or own one each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingSharing {
    #[default]
    Shared,
    PerHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiSAConfig {
    pub layout: TokenLayout,
    pub channels: usize,
    pub heads: usize,
    pub latent: usize,
    pub sharing: EmbeddingSharing,
}

impl LiSAConfig {
    pub fn new(layout: TokenLayout, channels: usize, heads: usize, latent: usize) -> Result<Self> {
        let cfg = LiSAConfig {
            layout,
            channels,
            heads,
            latent,
            sharing: EmbeddingSharing::Shared,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Single-head configuration with `channels` per head.
    pub fn single_head(layout: TokenLayout, channels: usize, latent: usize) -> Result<Self> {
        Self::new(layout, channels, 1, latent)
    }

    pub fn with_sharing(mut self, sharing: EmbeddingSharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.tokens() == 0 {
            return Err(Error::arg("token count must be positive"));
        }
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.latent == 0 {
            return Err(Error::config("latent channels D must be at least 1"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.layout.tokens()
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads
    }

    /// Number of embedding sets a multi-head block carries.
    pub fn embedding_sets(&self) -> usize {
        match self.sharing {
            EmbeddingSharing::Shared => 1,
            EmbeddingSharing::PerHead => self.heads,
        }
    }
}

/// Circular kernels and biases for one head (or one shared set).
///
/// * `wa`: `[..grid, C_h, D]`
/// * `wb`: `[..grid, D]`
/// * `ba`, `bb`: `[C_h, D]`
#[derive(Debug, Clone, PartialEq)]
pub struct CircularEmbeddings {
    pub wa: Tensor,
    pub wb: Tensor,
    pub ba: Tensor,
    pub bb: Tensor,
}

impl CircularEmbeddings {
    pub fn zeros(cfg: &LiSAConfig) -> Self {
        let (g, ch, d) = (cfg.layout.dims(), cfg.head_channels(), cfg.latent);
        CircularEmbeddings {
            wa: Tensor::zeros(&[g.as_slice(), &[ch, d]].concat()),
            wb: Tensor::zeros(&[g.as_slice(), &[d]].concat()),
            ba: Tensor::zeros(&[ch, d]),
            bb: Tensor::zeros(&[ch, d]),
        }
    }

    /// Kernels drawn from `N(0, std^2)`, biases zero.
    pub fn random(cfg: &LiSAConfig, std: f64, rng: &mut impl Rng) -> Self {
        let mut e = Self::zeros(cfg);
        e.wa = normal_tensor(e.wa.shape(), std, rng);
        e.wb = normal_tensor(e.wb.shape(), std, rng);
        e
    }

    /// Every tensor drawn from `N(0, std^2)`, biases included.
    pub fn random_full(cfg: &LiSAConfig, std: f64, rng: &mut impl Rng) -> Self {
        let mut e = Self::random(cfg, std, rng);
        e.ba = normal_tensor(e.ba.shape(), std, rng);
        e.bb = normal_tensor(e.bb.shape(), std, rng);
        e
    }

    pub fn grid_dims(&self) -> &[usize] {
        &self.wb.shape()[..self.wb.rank().saturating_sub(1)]
    }

    pub fn latent(&self) -> usize {
        *self.wb.shape().last().unwrap_or(&0)
    }

    pub fn head_channels(&self) -> usize {
        self.ba.shape().first().copied().unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.wa.len() + self.wb.len() + self.ba.len() + self.bb.len()
    }

    /// Checks every shape against `cfg`.
    pub fn validate(&self, cfg: &LiSAConfig) -> Result<()> {
        let (g, ch, d) = (cfg.layout.dims(), cfg.head_channels(), cfg.latent);
        self.wa.expect_shape(&[g.as_slice(), &[ch, d]].concat(), "Wa")?;
        self.wb.expect_shape(&[g.as_slice(), &[d]].concat(), "Wb")?;
        self.ba.expect_shape(&[ch, d], "Ba")?;
        self.bb.expect_shape(&[ch, d], "Bb")?;
        Ok(())
    }

    /// The four tensors in a fixed order (`wa`, `wb`, `ba`, `bb`).
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.wa, &self.wb, &self.ba, &self.bb]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wa, &mut self.wb, &mut self.ba, &mut self.bb]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(LiSAConfig::new(TokenLayout::Sequence(4), 8, 3, 2).is_err());
        assert!(LiSAConfig::new(TokenLayout::Sequence(4), 8, 2, 0).is_err());
        assert!(matches!(
            LiSAConfig::new(TokenLayout::Sequence(0), 8, 2, 1),
            Err(Error::Argument(_))
        ));
        let cfg = LiSAConfig::new(TokenLayout::Grid(14, 14), 192, 12, DEFAULT_LATENT).unwrap();
        assert_eq!(cfg.head_channels(), 16);
        let e = CircularEmbeddings::zeros(&cfg);
        assert_eq!(e.wa.shape(), &[14, 14, 16, 16]);
        assert_eq!(e.wb.shape(), &[14, 14, 16]);
        assert_eq!(e.grid_dims(), &[14, 14]);
        assert!(e.validate(&cfg).is_ok());
        assert_eq!(TokenLayout::square_or_sequence(196), TokenLayout::Grid(14, 14));
        assert_eq!(TokenLayout::square_or_sequence(12), TokenLayout::Sequence(12));
    }
}
