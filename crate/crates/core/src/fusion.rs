//! Combining pre- and post-event information: early fusion, siamese
//! concat+difference, and asymmetric cross-attention refinement.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureMap, Level, Pyramid};
use crate::error::{config_err, input_err, Result};
use crate::hashing::ConfigHash;
use crate::layers::Conv;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// 6-channel input `[pre; post]` to a single encoder.
    EarlyFusion,
    /// Shared-weight encoder on each image, fused per level.
    Siamese,
}

/// The ablation switchboard.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub fusion_mode: FusionMode,
    #[serde(default)]
    pub attention_levels: BTreeSet<Level>,
    #[serde(default = "default_reduction")]
    pub attention_channel_reduction: usize,
    /// Channel reduction of the uplinked latent; `None` uplinks full-width features.
    #[serde(default)]
    pub compression_ratio: Option<usize>,
    #[serde(default)]
    pub drop_d3: bool,
    #[serde(default)]
    pub shift_augmentation: bool,
}

fn default_reduction() -> usize {
    4
}

impl VariantConfig {
    pub fn early_fusion() -> Self {
        Self {
            fusion_mode: FusionMode::EarlyFusion,
            attention_levels: BTreeSet::new(),
            attention_channel_reduction: 4,
            compression_ratio: None,
            drop_d3: false,
            shift_augmentation: false,
        }
    }

    pub fn siamese() -> Self {
        Self { fusion_mode: FusionMode::Siamese, ..Self::early_fusion() }
    }

    pub fn with_attention(mut self, levels: &[Level]) -> Self {
        self.attention_levels = levels.iter().copied().collect();
        self
    }

    pub fn with_augmentation(mut self) -> Self {
        self.shift_augmentation = true;
        self
    }

    pub fn with_compression(mut self, ratio: usize) -> Self {
        self.compression_ratio = Some(ratio);
        self
    }

    pub fn without_d3(mut self) -> Self {
        self.drop_d3 = true;
        self
    }

    /// The named architecture rows of the ablation table, in order.
    pub fn table_rows() -> Vec<(&'static str, VariantConfig)> {
        let s = Self::siamese;
        let a = [Level::D4, Level::D5];
        vec![
            ("EF", Self::early_fusion()),
            ("S", s()),
            ("S+A", s().with_attention(&a)),
            ("S+A+D3", s().with_attention(&Level::ALL)),
            ("S+Aug", s().with_augmentation()),
            ("S+A+Aug", s().with_attention(&a).with_augmentation()),
            ("S+A+Aug+Comp(8)", s().with_attention(&a).with_augmentation().with_compression(8)),
            ("S+A+Aug+Comp(64)", s().with_attention(&a).with_augmentation().with_compression(64)),
            ("S+A+Aug+Comp(64)-D3", s().with_attention(&a).with_augmentation().with_compression(64).without_d3()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion_mode == FusionMode::EarlyFusion
            && (!self.attention_levels.is_empty() || self.compression_ratio.is_some() || self.drop_d3)
        {
            return Err(config_err!("early fusion cannot be combined with attention, compression or D3 removal"));
        }
        if self.attention_channel_reduction == 0 {
            return Err(config_err!("attention channel reduction must be positive"));
        }
        if self.compression_ratio == Some(0) {
            return Err(config_err!("compression ratio must be positive"));
        }
        if self.drop_d3 && self.attention_levels.contains(&Level::D3) {
            return Err(config_err!("attention on D3 requested but D3 is dropped"));
        }
        Ok(())
    }

    pub fn levels(&self) -> &'static [Level] {
        Level::retained(self.drop_d3)
    }

    pub fn hash(&self) -> Result<ConfigHash> {
        ConfigHash::of(self)
    }
}

/// Fused maps: `3 * C` channels per level (siamese) or `C` (early fusion).
pub type FusedPyramid<T> = Pyramid<T>;

/// `[pre; post]` channel concatenation.
pub fn fuse_early<T: Scalar>(pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
    if pre.shape() != post.shape() || pre.dims3()?.0 != 3 {
        return Err(input_err!("early fusion needs two (3, H, W) images of equal size, got {:?} and {:?}", pre.shape(), post.shape()));
    }
    Tensor::concat_channels(&[pre, post])
}

/// Single-head cross-attention: queries from pre features, keys and values
/// from post features, output added residually to the post features.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub level: Level,
    pub channels: usize,
    pub reduction: usize,
    query: Conv,
    key: Conv,
    value: Conv,
    up: Conv,
}

/// Graph handles produced by one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub refined_post: Var,
    /// `(N, N)` row-stochastic weights; row = pre position, column = post position.
    pub weights: Var,
    /// `(d, H, W)` attended values before the channel-restoring projection.
    pub attended: Var,
}

impl CrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, level: Level, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels < reduction {
            return Err(config_err!("{channels} channels at {level:?} not divisible by attention reduction {reduction}"));
        }
        let d = channels / reduction;
        let name = format!("attn.{level:?}");
        Ok(Self {
            level,
            channels,
            reduction,
            query: Conv::new(store, &format!("{name}.query"), channels, d, 1, 1, rng),
            // a key bias shifts each score row by a constant, which softmax cancels
            key: Conv::without_bias(store, &format!("{name}.key"), channels, d, rng),
            value: Conv::new(store, &format!("{name}.value"), channels, d, 1, 1, rng),
            up: Conv::zeroed(store, &format!("{name}.up"), d, channels),
        })
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn up_projection(&self) -> &Conv {
        &self.up
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pre: Var, post: Var) -> Result<AttentionVars> {
        if g.shape(pre) != g.shape(post) {
            return Err(config_err!("attention inputs differ in shape: {:?} vs {:?}", g.shape(pre), g.shape(post)));
        }
        let (c, h, w) = g.value(pre).dims3()?;
        if c != self.channels {
            return Err(config_err!("attention at {:?} built for {} channels, got {c}", self.level, self.channels));
        }
        let d = self.reduced_channels();
        let n = h * w;

        let q = self.query.forward(g, store, pre)?;
        let q = g.reshape(q, &[d, n])?;
        let q = g.transpose(q)?;
        let k = self.key.forward(g, store, post)?;
        let k = g.reshape(k, &[d, n])?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, T::one() / T::of(d as f64).sqrt())?;
        let weights = g.softmax_rows(scores)?;

        let v = self.value.forward(g, store, post)?;
        let v = g.reshape(v, &[d, n])?;
        let v = g.transpose(v)?;
        let attended = g.matmul(weights, v)?;
        let attended = g.transpose(attended)?;
        let attended = g.reshape(attended, &[d, h, w])?;
        let delta = self.up.forward(g, store, attended)?;
        let refined_post = g.add(post, delta)?;
        Ok(AttentionVars { refined_post, weights, attended })
    }

    /// Inference convenience returning the refined post map.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, pre_f: &FeatureMap<T>, post_f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if pre_f.level != post_f.level {
            return Err(config_err!("attention between different levels {:?} and {:?}", pre_f.level, post_f.level));
        }
        let mut g = Graph::new();
        let pre = g.constant(pre_f.data.clone());
        let post = g.constant(post_f.data.clone());
        let out = self.forward(&mut g, store, pre, post)?;
        Ok(FeatureMap { level: post_f.level, data: g.value(out.refined_post).clone() })
    }
}

/// Builds the attention modules a variant needs, given per-level widths.
pub fn build_attention<T: Scalar>(
    variant: &VariantConfig,
    widths: [usize; 3],
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Vec<CrossAttention>> {
    if variant.fusion_mode == FusionMode::EarlyFusion {
        return Ok(Vec::new());
    }
    variant
        .attention_levels
        .iter()
        .filter(|l| variant.levels().contains(l))
        .map(|&level| CrossAttention::new(store, level, widths[level.index()], variant.attention_channel_reduction, rng))
        .collect()
}

/// Per retained level: `post' = attention(pre, post)` where configured, then
/// `[pre | post' | pre - post']`.
pub fn fuse_siamese<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    attention: &[CrossAttention],
    pre: &[(Level, Var)],
    post: &[(Level, Var)],
) -> Result<Vec<(Level, Var)>> {
    let pre_levels: Vec<Level> = pre.iter().map(|p| p.0).collect();
    let post_levels: Vec<Level> = post.iter().map(|p| p.0).collect();
    if pre_levels != post_levels {
        return Err(config_err!("pyramid level mismatch: pre {pre_levels:?} vs post {post_levels:?}"));
    }
    let mut fused = Vec::with_capacity(pre.len());
    for (&(level, p), &(_, q)) in pre.iter().zip(post) {
        if g.shape(p) != g.shape(q) {
            return Err(config_err!("{level:?} maps differ: {:?} vs {:?}", g.shape(p), g.shape(q)));
        }
        let refined = match attention.iter().find(|a| a.level == level) {
            Some(attn) => attn.forward(g, store, p, q)?.refined_post,
            None => q,
        };
        let diff = g.sub(p, refined)?;
        fused.push((level, g.concat(&[p, refined, diff])?));
    }
    Ok(fused)
}
