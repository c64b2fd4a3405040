//! Two-dimensional block-tower scenes.
//!
//! A scene is an `N × N` grid of cells seen from the front, back row first.
//! Each cell holds a tower of up to `B_max` square blocks drawn from `P`
//! learnable primitives; every block carries one raw horizontal offset that
//! a sigmoid maps onto the top surface of whatever supports it.

mod data;
mod model;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{ground_truth_primitives, synth_scenes, BlocksDataset, SceneRecord};
pub use model::BlocksModel;
pub use render::{
    pixel_loglik, place_blocks, render, render_with_grad, Primitives, Rect, RenderGrad,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    #[default]
    Colored,
    Unicolor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Blocks2DConfig {
    pub grid: usize,
    pub max_blocks: usize,
    pub primitives: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_pix: f64,
    /// Edge softness in pixels.
    pub tau: f64,
    pub color_mode: ColorMode,
    pub background: [f64; 3],
    pub embed_dim: usize,
    pub conv_channels: (usize, usize),
    pub conv_kernel: usize,
    pub conv_stride: usize,
}

/// Block color in unicolor mode.
pub const UNICOLOR: [f64; 3] = [0.5, 0.5, 0.5];

impl Default for Blocks2DConfig {
    fn default() -> Self {
        Blocks2DConfig {
            grid: 2,
            max_blocks: 3,
            primitives: 5,
            height: 64,
            width: 64,
            sigma_pix: 0.1,
            tau: 1.5,
            color_mode: ColorMode::Colored,
            background: [1.0, 1.0, 1.0],
            embed_dim: 64,
            conv_channels: (8, 8),
            conv_kernel: 4,
            conv_stride: 2,
        }
    }
}

impl Blocks2DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.max_blocks == 0 || self.primitives == 0 {
            return Err(Error::Config(
                "grid, max_blocks and primitives must be at least 1".into(),
            ));
        }
        if self.primitives > 255 || self.max_blocks > 255 {
            return Err(Error::Config(
                "at most 255 primitives and blocks per tower".into(),
            ));
        }
        if self.height < self.conv_kernel * 3 || self.width < self.conv_kernel * 3 {
            return Err(Error::Config("image is too small for the encoder".into()));
        }
        if !(self.sigma_pix > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("sigma_pix and tau must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn slots(&self) -> usize {
        self.cells() * self.max_blocks
    }

    /// Values per image.
    pub fn pixels(&self) -> usize {
        self.height * self.width * 3
    }
}

/// Per-cell towers of 0-based primitive indices, bottom block first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneParse {
    pub indices: Vec<Vec<u8>>,
}

impl SceneParse {
    pub fn empty(cells: usize) -> Self {
        SceneParse {
            indices: vec![Vec::new(); cells],
        }
    }

    pub fn heights(&self) -> Vec<usize> {
        self.indices.iter().map(|t| t.len()).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.indices.iter().map(|t| t.len()).sum()
    }

    pub fn key(&self) -> Vec<u8> {
        let mut k = Vec::with_capacity(self.indices.len() + self.num_blocks());
        for t in &self.indices {
            k.push(t.len() as u8);
            k.extend_from_slice(t);
        }
        k
    }

    pub fn from_key(key: &[u8], cfg: &Blocks2DConfig) -> Option<Self> {
        let mut indices = Vec::with_capacity(cfg.cells());
        let mut rest = key;
        for _ in 0..cfg.cells() {
            let (&h, tail) = rest.split_first()?;
            let h = h as usize;
            if h > cfg.max_blocks || tail.len() < h {
                return None;
            }
            if tail[..h].iter().any(|&p| p as usize >= cfg.primitives) {
                return None;
            }
            indices.push(tail[..h].to_vec());
            rest = &tail[h..];
        }
        rest.is_empty().then_some(SceneParse { indices })
    }

    pub fn check(&self, cfg: &Blocks2DConfig) -> Result<()> {
        let ok = self.indices.len() == cfg.cells()
            && self.indices.iter().all(|t| {
                t.len() <= cfg.max_blocks && t.iter().all(|&p| (p as usize) < cfg.primitives)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfSupport {
                dist: "scene parse",
                value: format!("{:?}", self.indices),
            })
        }
    }
}
