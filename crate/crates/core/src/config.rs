//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareStrategy {
    /// Spatial blocks never read semantic keys/values.
    None,
    /// Spatial layer i reads semantic layer i.
    Shallow,
    /// Spatial layer i reads semantic layer M - L + i.
    Deep,
    /// Spatial layer i reads semantic layer floor(i * M / L).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectMode {
    /// Depth features never reach the denoiser.
    None,
    /// Channel concatenation plus a learned re-projection back to c.
    Concat,
    /// Element-wise addition into the noisy latent.
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Semantic layer count M.
    pub m_layers: usize,
    /// Spatial layer count L (< M).
    pub l_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Geo token count G; must be a perfect square.
    pub n_geo_tokens: usize,
    pub height: usize,
    pub width: usize,
    pub c_latent: usize,
    /// Diffusion step count T.
    pub t_steps: usize,
    /// Depth-loss weight in the joint objective.
    pub lambda: f32,
    pub share_strategy: ShareStrategy,
    pub inject_mode: InjectMode,
    pub n_dit_blocks: usize,
    pub max_seq_len: usize,
    pub beta_start: f32,
    pub beta_end: f32,
}

impl ModelConfig {
    /// Desk-scale defaults: every run in this repo starts from these.
    pub fn desk() -> Self {
        ModelConfig {
            m_layers: 12,
            l_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size: crate::scenegen::VOCAB_SIZE,
            n_geo_tokens: 64,
            height: 32,
            width: 32,
            c_latent: 4,
            t_steps: 100,
            lambda: 0.5,
            share_strategy: ShareStrategy::Uniform,
            inject_mode: InjectMode::Add,
            n_dit_blocks: 4,
            max_seq_len: 96,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }

    /// Tiny shapes for gradient checks: everything as small as the shape
    /// constraints allow.
    pub fn tiny() -> Self {
        ModelConfig {
            m_layers: 3,
            l_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: crate::scenegen::VOCAB_SIZE,
            n_geo_tokens: 4,
            height: 8,
            width: 8,
            c_latent: 2,
            t_steps: 5,
            lambda: 0.5,
            share_strategy: ShareStrategy::Uniform,
            inject_mode: InjectMode::Add,
            n_dit_blocks: 1,
            max_seq_len: 96,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn latent_h(&self) -> usize {
        self.height / 8
    }

    pub fn latent_w(&self) -> usize {
        self.width / 8
    }

    /// Side of the geo token grid.
    pub fn grid_side(&self) -> Result<usize> {
        let side = (self.n_geo_tokens as f64).sqrt().round() as usize;
        if side * side != self.n_geo_tokens {
            return Err(Error::NonSquareTokenGrid {
                count: self.n_geo_tokens,
            });
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.l_layers < 1 || self.m_layers <= self.l_layers {
            return fail(format!(
                "need M > L >= 1, got M={} L={}",
                self.m_layers, self.l_layers
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return fail(format!("H, W must be multiples of 8, got {}x{}", self.height, self.width));
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        let side = self.grid_side()?;
        // The decode head upsamples the grid 4x to the image plane.
        if self.height != 4 * side || self.width != 4 * side {
            return fail(format!(
                "H = W = 4 * sqrt(G) required, got {}x{} with G={}",
                self.height, self.width, self.n_geo_tokens
            ));
        }
        if self.t_steps == 0 {
            return fail("t_steps must be positive".into());
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return fail(format!(
                "need 0 < beta_start < beta_end < 1, got {} .. {}",
                self.beta_start, self.beta_end
            ));
        }
        if self.vocab_size != crate::scenegen::VOCAB_SIZE {
            return fail(format!(
                "vocab_size {} does not match the scene vocabulary ({})",
                self.vocab_size,
                crate::scenegen::VOCAB_SIZE
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_tiny_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_m_not_greater_than_l() {
        let mut c = ModelConfig::desk();
        c.m_layers = 4;
        c.l_layers = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_negative_lambda() {
        let mut c = ModelConfig::desk();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_non_square_token_grid() {
        let mut c = ModelConfig::desk();
        c.n_geo_tokens = 60;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_config_key_rejected() {
        let json = r#"{"m_layers":12,"bogus":1}"#;
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(json);
        assert!(r.is_err());
    }
}
