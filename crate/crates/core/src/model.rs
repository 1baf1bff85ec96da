//! The full detector: encoder(s), fusion, optional latent codec, FPN and
//! head, with the ground-side / on-board split used for deployment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{fake_quantize, CompressionParams};
use crate::detector::{decode, detection_loss, DecodeConfig, Detection, Detector, HeadConfig, HeadOutput, LossBreakdown};
use crate::encoder::{Encoder, EncoderConfig, Level, Pyramid};
use crate::error::{config_err, Result};
use crate::fusion::{build_attention, fuse_siamese, CrossAttention, FusionMode, VariantConfig};
use crate::geometry::{BBox, Raster};
use crate::geoproto::ScenePair;
use crate::hashing::ConfigHash;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantConfig,
    pub encoder_channels: [usize; 3],
    #[serde(default = "one")]
    pub encoder_depth: usize,
    pub head: HeadConfig,
    /// int8 fake quantization of the latent during training and inference.
    #[serde(default = "yes")]
    pub quantize_latent: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn toy(variant: VariantConfig) -> Self {
        Self { variant, encoder_channels: [16, 32, 64], encoder_depth: 1, head: HeadConfig::toy(), quantize_latent: true }
    }

    pub fn reference(variant: VariantConfig) -> Self {
        Self { variant, encoder_channels: [128, 256, 512], encoder_depth: 1, head: HeadConfig::reference(), quantize_latent: true }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let in_channels = match self.variant.fusion_mode {
            FusionMode::EarlyFusion => 6,
            FusionMode::Siamese => 3,
        };
        EncoderConfig { in_channels, channels: self.encoder_channels, depth: self.encoder_depth }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.encoder_config().validate()
    }

    /// Whether the pre-event latent passes through the int8 codec.
    pub fn quantizes(&self) -> bool {
        self.quantize_latent && self.variant.fusion_mode == FusionMode::Siamese
    }
}

/// Next multiple of 32 at or above `n`.
pub fn padded_size(n: usize) -> usize {
    n.div_ceil(32) * 32
}

/// Normalized tensor of a raster, zero padded at the bottom/right to a
/// multiple of 32.
pub fn prepare_input<T: Scalar>(r: &Raster) -> Result<Tensor<T>> {
    r.to_tensor().pad_to(padded_size(r.height()), padded_size(r.width()))
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub attention: Vec<CrossAttention>,
    pub codec: Option<CompressionParams>,
    pub detector: Detector,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_cfg = config.encoder_config();
        let encoder = Encoder::new(enc_cfg.clone(), &mut store, "encoder", &mut rng)?;
        let widths = config.encoder_channels;
        let attention = build_attention(&config.variant, widths, &mut store, &mut rng)?;
        let codec = match config.variant.compression_ratio {
            Some(r) => Some(CompressionParams::new(&mut store, widths, r, config.variant.drop_d3, &mut rng)?),
            None => None,
        };
        let levels = config.variant.levels();
        let factor = if config.variant.fusion_mode == FusionMode::Siamese { 3 } else { 1 };
        let fused: Vec<usize> = levels.iter().map(|l| factor * widths[l.index()]).collect();
        let detector = Detector::new(&mut store, levels, &fused, config.head, &mut rng)?;
        Ok(Self { config, store, encoder, attention, codec, detector })
    }

    pub fn levels(&self) -> &'static [Level] {
        self.config.variant.levels()
    }

    fn is_siamese(&self) -> bool {
        self.config.variant.fusion_mode == FusionMode::Siamese
    }

    /// Pre-event branch up to the latent (compressed if configured).
    fn latent_graph(&self, g: &mut Graph<T>, pre: Var) -> Result<Vec<(Level, Var)>> {
        let taps = self.encoder.forward(g, &self.store, pre, !self.config.variant.drop_d3)?;
        match &self.codec {
            Some(codec) => codec.compress(g, &self.store, &taps),
            None => Ok(taps),
        }
    }

    /// Latent back to fused-width pre features, with straight-through int8
    /// quantization when enabled.
    fn restore_graph(&self, g: &mut Graph<T>, latent: Vec<(Level, Var)>, quantize: bool) -> Result<Vec<(Level, Var)>> {
        let latent = if quantize {
            latent
                .into_iter()
                .map(|(l, v)| {
                    let q = fake_quantize(g.value(v))?;
                    Ok((l, g.straight_through(v, q)?))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            latent
        };
        match &self.codec {
            Some(codec) => codec.expand(g, &self.store, &latent),
            None => Ok(latent),
        }
    }

    fn head_from_pre(&self, g: &mut Graph<T>, pre_feats: Vec<(Level, Var)>, post: Var) -> Result<Vec<(Level, Var)>> {
        let post_feats = self.encoder.forward(g, &self.store, post, !self.config.variant.drop_d3)?;
        let fused = fuse_siamese(g, &self.store, &self.attention, &pre_feats, &post_feats)?;
        self.detector.forward(g, &self.store, &fused)
    }

    /// Monolithic forward pass on prepared (padded) inputs.
    pub fn forward(&self, g: &mut Graph<T>, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Vec<(Level, Var)>> {
        if pre.shape() != post.shape() {
            return Err(config_err!("pre {:?} and post {:?} differ in shape", pre.shape(), post.shape()));
        }
        if !self.is_siamese() {
            let x = g.constant(Tensor::concat_channels(&[pre, post])?);
            let taps = self.encoder.forward(g, &self.store, x, true)?;
            return self.detector.forward(g, &self.store, &taps);
        }
        let pre_v = g.constant(pre.clone());
        let post_v = g.constant(post.clone());
        let latent = self.latent_graph(g, pre_v)?;
        let pre_feats = self.restore_graph(g, latent, self.config.quantizes())?;
        self.head_from_pre(g, pre_feats, post_v)
    }

    /// Training loss on one pair; boxes are taken in the pair's local frame.
    pub fn loss(&self, g: &mut Graph<T>, pair: &ScenePair) -> Result<(Var, LossBreakdown)> {
        let pre = prepare_input(&pair.pre)?;
        let post = prepare_input(&pair.post)?;
        let head = self.forward(g, &pre, &post)?;
        detection_loss(g, &head, &pair.local_annotations(), (pair.pre.height(), pair.pre.width()))
    }

    pub fn infer(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<HeadOutput<T>> {
        let mut g = Graph::new();
        let head = self.forward(&mut g, pre, post)?;
        Ok(HeadOutput::from_vars(&g, &head))
    }

    /// Ground side: pre-event image to the latent that is uplinked.
    pub fn encode_latent(&self, pre: &Tensor<T>) -> Result<Pyramid<T>> {
        if !self.is_siamese() {
            return Err(config_err!("early fusion has no pre-event latent"));
        }
        let mut g = Graph::new();
        let x = g.constant(pre.clone());
        let latent = self.latent_graph(&mut g, x)?;
        Ok(Pyramid::from_vars(&g, &latent))
    }

    /// On board: received latent plus the post-event image to head maps. The
    /// latent is used as received; quantization already happened on the wire.
    pub fn detect_from_latent(&self, latent: &Pyramid<T>, post: &Tensor<T>) -> Result<HeadOutput<T>> {
        if !self.is_siamese() {
            return Err(config_err!("early fusion has no pre-event latent"));
        }
        if latent.levels() != self.levels() {
            return Err(config_err!("latent carries {:?}, model expects {:?}", latent.levels(), self.levels()));
        }
        let mut g = Graph::new();
        let vars: Vec<(Level, Var)> = latent.maps.iter().map(|m| (m.level, g.constant(m.data.clone()))).collect();
        let pre_feats = self.restore_graph(&mut g, vars, false)?;
        let post_v = g.constant(post.clone());
        let head = self.head_from_pre(&mut g, pre_feats, post_v)?;
        Ok(HeadOutput::from_vars(&g, &head))
    }

    /// Detections in the pre-image frame for a (possibly cropped) pair.
    pub fn predict(&self, pair: &ScenePair, decode_cfg: &DecodeConfig) -> Result<Vec<Detection>> {
        let head = self.infer(&prepare_input(&pair.pre)?, &prepare_input(&pair.post)?)?;
        finish_detections(&head, decode_cfg, pair)
    }

    pub fn config_hash(&self) -> Result<ConfigHash> {
        ConfigHash::of(&self.config)
    }
}

/// Decodes head maps, clips boxes to the valid (unpadded) region and moves
/// them into the pre-image frame.
pub fn finish_detections<T: Scalar>(head: &HeadOutput<T>, decode_cfg: &DecodeConfig, pair: &ScenePair) -> Result<Vec<Detection>> {
    let origin = (pair.support.x as f64, pair.support.y as f64);
    place_detections(head, decode_cfg, (pair.pre.width(), pair.pre.height()), origin)
}

/// As [`finish_detections`] for an image of `size = (width, height)` whose
/// top-left corner sits at `origin`.
pub fn place_detections<T: Scalar>(head: &HeadOutput<T>, decode_cfg: &DecodeConfig, size: (usize, usize), origin: (f64, f64)) -> Result<Vec<Detection>> {
    let (w, h) = (size.0 as f64, size.1 as f64);
    Ok(decode(head, decode_cfg)?
        .into_iter()
        .filter_map(|d| {
            let b = d.bbox;
            let clipped = BBox::new(b.x_min.max(0.0), b.y_min.max(0.0), b.x_max.min(w), b.y_max.min(h));
            clipped.is_valid().then(|| Detection { bbox: clipped, ..d }.translate(origin.0, origin.1))
        })
        .collect())
}
