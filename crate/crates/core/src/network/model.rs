use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bitcore::RealTensor;
use crate::blocks::{BuildingBlock, WeightMode};
use crate::error::{Error, Result};

use super::config::NetworkConfig;

/// Fully connected classifier on globally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `classes x features`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Decoder {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, features: &[f32]) -> Vec<f32> {
        let f = features.len();
        self.weights
            .chunks(f)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(features).fold(0.0f32, |acc, (w, x)| acc + w * x) + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    /// Stem blocks, then every level's blocks, in network order.
    pub blocks: Vec<BuildingBlock>,
    pub decoder: Decoder,
}

/// Deterministic construction from a seed.
///
/// Shadow weights are uniform in `[-1, 1]`, biases zero, batch norm identity,
/// PReLU slopes 0.25, decoder weights uniform in `+-1/sqrt(features)`.
pub fn build_model(cfg: &NetworkConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = cfg
        .block_shapes()
        .into_iter()
        .map(|(c, r, s)| BuildingBlock::new(c, r, s, cfg.parallel_p, &mut rng))
        .collect();
    let f = cfg.feature_channels();
    let bound = 1.0 / (f as f32).sqrt();
    let decoder = Decoder {
        weights: (0..cfg.classes * f).map(|_| rng.gen_range(-bound..=bound)).collect(),
        bias: vec![0.0; cfg.classes],
    };
    Ok(Model {
        config: cfg.clone(),
        blocks,
        decoder,
    })
}

/// Spatial mean per channel of a `C x H x W` map.
pub fn global_avg_pool(x: &RealTensor) -> Result<Vec<f32>> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    Ok((0..c)
        .map(|ch| x.values()[ch * hw..(ch + 1) * hw].iter().sum::<f32>() / hw as f32)
        .collect())
}

impl Model {
    pub fn set_weight_mode(&mut self, mode: WeightMode) {
        self.blocks.iter_mut().for_each(|b| b.set_weight_mode(mode));
    }

    /// Re-derives every packed weight matrix from its shadow weights.
    pub fn rebinarize(&mut self) {
        for b in &mut self.blocks {
            for m in b.modules_1x1_mut() {
                m.branches.iter_mut().for_each(|br| br.rebinarize());
            }
        }
    }

    /// Checks that every parameter tensor has the shape the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.block_shapes();
        if shapes.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "config has {} blocks, model has {}",
                shapes.len(),
                self.blocks.len()
            )));
        }
        for (b, &(c, r, s)) in self.blocks.iter().zip(&shapes) {
            if (b.in_channels, b.replication, b.stride) != (c, r, s) {
                return Err(Error::Config("block disagrees with config".into()));
            }
            if b.modules_1x1().any(|m| m.parallel() != self.config.parallel_p) {
                return Err(Error::Config("branch count disagrees with parallel_p".into()));
            }
            b.validate()?;
        }
        let f = self.config.feature_channels();
        if self.decoder.bias.len() != self.config.classes
            || self.decoder.weights.len() != self.config.classes * f
        {
            return Err(Error::Config("decoder shape".into()));
        }
        Ok(())
    }

    /// Output of the last building block.
    pub fn features(&self, x: &RealTensor) -> Result<RealTensor> {
        let (c, h, w) = x.chw()?;
        let stride = self.config.total_stride();
        if c != self.config.input_channels || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.input_channels, stride * (h / stride).max(1), stride * (w / stride).max(1)],
                actual: x.shape().to_vec(),
            });
        }
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Class logits for one preprocessed `input_channels x H x W` image.
    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        let pooled = global_avg_pool(&self.features(x)?)?;
        let logits = self.decoder.forward(&pooled);
        RealTensor::new(vec![logits.len()], logits)
            .map_err(|_| Error::NonFinite("model logits".into()))
    }

    /// [`forward`](Self::forward) over a batch, fanned out across the rayon pool.
    pub fn forward_batch(&self, xs: &[RealTensor]) -> Result<Vec<RealTensor>> {
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        super::format::save_model(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        super::format::load_model(path)
    }
}

/// Free-function form of [`Model::forward`].
pub fn forward(m: &Model, img: &RealTensor) -> Result<RealTensor> {
    m.forward(img)
}
