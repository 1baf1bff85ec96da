//! Pyramid feature extractor with taps at strides 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::layers::Conv;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Pyramid level of a backbone feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    D3,
    D4,
    D5,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::D3, Level::D4, Level::D5];

    /// Input pixels per feature cell.
    pub fn stride(self) -> usize {
        match self {
            Level::D3 => 8,
            Level::D4 => 16,
            Level::D5 => 32,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::D3 => 0,
            Level::D4 => 1,
            Level::D5 => 2,
        }
    }

    /// Wire tag: 3, 4 or 5.
    pub fn tag(self) -> u8 {
        self.index() as u8 + 3
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            3 => Some(Level::D3),
            4 => Some(Level::D4),
            5 => Some(Level::D5),
            _ => None,
        }
    }

    /// The levels kept when the finest one may be dropped.
    pub fn retained(drop_d3: bool) -> &'static [Level] {
        if drop_d3 {
            &Level::ALL[1..]
        } else {
            &Level::ALL
        }
    }
}

/// One pyramid level's activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub level: Level,
    pub data: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn stride(&self) -> usize {
        self.level.stride()
    }
}

/// Feature maps ordered fine to coarse.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pyramid<T> {
    pub maps: Vec<FeatureMap<T>>,
}

impl<T: Scalar> Pyramid<T> {
    pub fn get(&self, level: Level) -> Option<&FeatureMap<T>> {
        self.maps.iter().find(|m| m.level == level)
    }

    pub fn levels(&self) -> Vec<Level> {
        self.maps.iter().map(|m| m.level).collect()
    }

    pub fn from_vars(g: &Graph<T>, vars: &[(Level, Var)]) -> Self {
        Self { maps: vars.iter().map(|&(level, v)| FeatureMap { level, data: g.value(v).clone() }).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// 3 for siamese branches, 6 for early fusion.
    pub in_channels: usize,
    /// Channel widths of D3, D4, D5.
    pub channels: [usize; 3],
    /// Residual blocks per tapped stage.
    pub depth: usize,
}

impl EncoderConfig {
    /// Widths (128, 256, 512).
    pub fn reference(in_channels: usize) -> Self {
        Self { in_channels, channels: [128, 256, 512], depth: 1 }
    }

    /// Desk-scale widths (16, 32, 64).
    pub fn toy(in_channels: usize) -> Self {
        Self { in_channels, channels: [16, 32, 64], depth: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 6 {
            return Err(config_err!("encoder input must have 3 or 6 channels, got {}", self.in_channels));
        }
        let [c3, c4, c5] = self.channels;
        if !(c3 >= 2 && c3 < c4 && c4 < c5) {
            return Err(config_err!("encoder widths must increase, got {:?}", self.channels));
        }
        Ok(())
    }

    pub fn width(&self, level: Level) -> usize {
        self.channels[level.index()]
    }

    fn stem_width(&self) -> usize {
        self.channels[0] / 2
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    blocks: Vec<Conv>,
}

/// Stride-2 stem, a stride-2 stage, then three tapped stride-2 stages with
/// `x + act(conv3x3(x))` residual blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Conv,
    stage1: Conv,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(config: EncoderConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem_w = config.stem_width();
        let stem = Conv::new(store, &format!("{prefix}.stem"), config.in_channels, stem_w, 3, 2, rng);
        let stage1 = Conv::new(store, &format!("{prefix}.stage1"), stem_w, stem_w, 3, 2, rng);
        let mut stages = Vec::new();
        let mut c_in = stem_w;
        for level in Level::ALL {
            let c = config.width(level);
            let name = format!("{prefix}.{level:?}");
            let down = Conv::new(store, &format!("{name}.down"), c_in, c, 3, 2, rng);
            let blocks = (0..config.depth).map(|i| Conv::new(store, &format!("{name}.block{i}"), c, c, 3, 1, rng)).collect();
            stages.push(Stage { down, blocks });
            c_in = c;
        }
        Ok(Self { config, stem, stage1, stages })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let &[c, h, w] = shape else {
            return Err(input_err!("encoder input must be (C, H, W), got {shape:?}"));
        };
        if c != self.config.in_channels {
            return Err(input_err!("encoder expects {} channels, got {c}", self.config.in_channels));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(input_err!("image dims {h}x{w} must be positive multiples of 32"));
        }
        Ok((h, w))
    }

    /// Taps the requested levels. With `emit_d3 == false` the stride-8 stage
    /// still runs (D4 is built on it) but its map is not returned.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var, emit_d3: bool) -> Result<Vec<(Level, Var)>> {
        self.check_input(g.shape(image))?;
        let mut x = self.stem.forward_act(g, store, image)?;
        x = self.stage1.forward_act(g, store, x)?;
        let mut taps = Vec::with_capacity(3);
        for (level, stage) in Level::ALL.into_iter().zip(&self.stages) {
            x = stage.down.forward_act(g, store, x)?;
            for block in &stage.blocks {
                let y = block.forward_act(g, store, x)?;
                x = g.add(x, y)?;
            }
            if level != Level::D3 || emit_d3 {
                taps.push((level, x));
            }
        }
        Ok(taps)
    }

    /// Inference-only convenience around [`Encoder::forward`].
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Pyramid<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let taps = self.forward(&mut g, store, x, true)?;
        Ok(Pyramid::from_vars(&g, &taps))
    }

    /// Runs both images through this one encoder (shared weights).
    pub fn encode_siamese<T: Scalar>(&self, store: &ParamStore<T>, pre: &Tensor<T>, post: &Tensor<T>) -> Result<(Pyramid<T>, Pyramid<T>)> {
        if self.config.in_channels != 3 {
            return Err(config_err!("siamese encoding needs a 3-channel encoder"));
        }
        if pre.shape() != post.shape() {
            return Err(input_err!("pre {:?} and post {:?} dims differ", pre.shape(), post.shape()));
        }
        Ok((self.encode(store, pre)?, self.encode(store, post)?))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(cfg: EncoderConfig) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, "enc", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, enc)
    }

    #[test]
    fn toy_profile_shapes_at_256() {
        let (store, enc) = build(EncoderConfig::toy(3));
        let img = Tensor::uniform([3, 256, 256], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let pyr = enc.encode(&store, &img).unwrap();
        let shapes: Vec<_> = pyr.maps.iter().map(|m| m.data.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]);
        for m in &pyr.maps {
            assert_eq!(m.data.shape()[1] * m.stride(), 256);
        }
    }

    #[test]
    fn rejects_indivisible_dims_and_wrong_channels() {
        let (store, enc) = build(EncoderConfig::toy(3));
        assert!(matches!(enc.encode(&store, &Tensor::zeros([3, 80, 64])), Err(crate::Error::Input(_))));
        assert!(matches!(enc.encode(&store, &Tensor::zeros([6, 64, 64])), Err(crate::Error::Input(_))));
    }

    #[test]
    fn deterministic_forward() {
        let (store, enc) = build(EncoderConfig::toy(6));
        let img = Tensor::uniform([6, 64, 96], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(enc.encode(&store, &img).unwrap(), enc.encode(&store, &img).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { in_channels: 4, ..EncoderConfig::toy(3) }.validate().is_err());
        assert!(EncoderConfig { channels: [32, 16, 64], ..EncoderConfig::toy(3) }.validate().is_err());
    }

    #[test]
    fn drop_d3_omits_finest_tap() {
        let (store, enc) = build(EncoderConfig::toy(3));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3, 64, 64]));
        let taps = enc.forward(&mut g, &store, x, false).unwrap();
        assert_eq!(taps.iter().map(|t| t.0).collect::<Vec<_>>(), vec![Level::D4, Level::D5]);
    }
}
