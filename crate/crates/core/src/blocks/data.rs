//! Scene datasets: a little-endian `f32` image file plus a JSON index.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::render::{place_blocks, render, Primitives};
use super::{Blocks2DConfig, ColorMode, SceneParse, UNICOLOR};
use crate::error::{Error, Result};

const IMAGES: &str = "images.bin";
const INDEX: &str = "index.json";

/// Ground-truth latents of one scene, kept for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub parse: SceneParse,
    pub positions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    height: usize,
    width: usize,
    count: usize,
    scenes: Vec<SceneRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlocksDataset {
    pub height: usize,
    pub width: usize,
    /// `[height, width, 3]` row-major per image.
    pub images: Vec<Vec<f64>>,
    pub scenes: Vec<SceneRecord>,
}

impl BlocksDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self
            .images
            .iter()
            .flatten()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let p = dir.join(IMAGES);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let index = Index {
            height: self.height,
            width: self.width,
            count: self.images.len(),
            scenes: self.scenes.clone(),
        };
        let p = dir.join(INDEX);
        fs::write(&p, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(INDEX);
        let index: Index = serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let p = dir.join(IMAGES);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let per = index.height * index.width * 3;
        if bytes.len() != index.count * per * 4 {
            return Err(Error::Data(format!(
                "{}: expected {} bytes for {} images, found {}",
                p.display(),
                index.count * per * 4,
                index.count,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(BlocksDataset {
            height: index.height,
            width: index.width,
            images: values.chunks(per.max(1)).map(|c| c.to_vec()).collect(),
            scenes: index.scenes,
        })
    }
}

/// Fixed primitive set used to generate data.
pub fn ground_truth_primitives(cfg: &Blocks2DConfig) -> Primitives {
    const SIZES: [f64; 5] = [0.3, 0.45, 0.6, 0.35, 0.5];
    const COLORS: [[f64; 3]; 5] = [
        [0.85, 0.2, 0.2],
        [0.2, 0.7, 0.3],
        [0.2, 0.3, 0.85],
        [0.9, 0.75, 0.15],
        [0.6, 0.3, 0.75],
    ];
    let p = cfg.primitives;
    Primitives {
        sizes: (0..p).map(|i| SIZES[i % 5]).collect(),
        colors: (0..p)
            .map(|i| match cfg.color_mode {
                ColorMode::Colored => COLORS[i % 5],
                ColorMode::Unicolor => UNICOLOR,
            })
            .collect(),
    }
}

/// `count` noise-free renderings of prior scenes under
/// [`ground_truth_primitives`]. Images are stored at `f32` precision.
pub fn synth_scenes(cfg: &Blocks2DConfig, seed: u64, count: usize) -> Result<BlocksDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = ground_truth_primitives(cfg);
    let mut out = BlocksDataset {
        height: cfg.height,
        width: cfg.width,
        ..Default::default()
    };
    for _ in 0..count {
        let indices = (0..cfg.cells())
            .map(|_| {
                let h = rng.random_range(0..=cfg.max_blocks);
                (0..h)
                    .map(|_| rng.random_range(0..cfg.primitives) as u8)
                    .collect()
            })
            .collect();
        let parse = SceneParse { indices };
        let positions: Vec<f64> = (0..parse.num_blocks())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let img = render(cfg, &place_blocks(cfg, &parse, &positions, &prims));
        out.images
            .push(img.into_iter().map(|v| v as f32 as f64).collect());
        out.scenes.push(SceneRecord { parse, positions });
    }
    Ok(out)
}
