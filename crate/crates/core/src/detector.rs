//! FPN aggregation, the anchor-free head, decoding with NMS, and the
//! detection loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Level;
use crate::error::{config_err, Error, Result};
use crate::geometry::BBox;
use crate::geoproto::{BoxAnnotation, DamageClass};
use crate::layers::Conv;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Head channel layout: 4 class logits, objectness, then `(dx, dy, log w, log h)`.
pub const HEAD_CHANNELS: usize = 9;
const CLS: usize = 0;
const OBJ: usize = 4;
const BOX: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub damage_class: DamageClass,
    pub objectness: f64,
    pub class_scores: [f64; 4],
    pub confidence: f64,
}

impl Detection {
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { bbox: self.bbox.translate(dx, dy), ..*self }
    }
}

/// Raw head maps, one `(9, H, W)` tensor per level, fine to coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub levels: Vec<(Level, Tensor<T>)>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn from_vars(g: &Graph<T>, vars: &[(Level, Var)]) -> Self {
        Self { levels: vars.iter().map(|&(l, v)| (l, g.value(v).clone())).collect() }
    }
}

/// Top-down feature pyramid over the retained levels.
#[derive(Clone, Debug)]
pub struct Fpn {
    levels: Vec<Level>,
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
}

impl Fpn {
    /// `in_channels[i]` is the fused width at `levels[i]`; levels fine to coarse.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, levels: &[Level], in_channels: &[usize], width: usize, rng: &mut impl Rng) -> Result<Self> {
        if levels.is_empty() || levels.len() != in_channels.len() {
            return Err(config_err!("FPN needs one input width per level, got {levels:?} / {in_channels:?}"));
        }
        if levels.windows(2).any(|w| w[1].index() != w[0].index() + 1) {
            return Err(config_err!("FPN levels must be consecutive, got {levels:?}"));
        }
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        for (&level, &c) in levels.iter().zip(in_channels) {
            lateral.push(Conv::new(store, &format!("fpn.{level:?}.lateral"), c, width, 1, 1, rng));
            smooth.push(Conv::new(store, &format!("fpn.{level:?}.smooth"), width, width, 3, 1, rng));
        }
        Ok(Self { levels: levels.to_vec(), lateral, smooth })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: &[(Level, Var)]) -> Result<Vec<(Level, Var)>> {
        if fused.is_empty() {
            return Err(Error::Input("empty pyramid".into()));
        }
        let got: Vec<Level> = fused.iter().map(|f| f.0).collect();
        if got != self.levels {
            return Err(config_err!("FPN built for {:?} but got {got:?}", self.levels));
        }
        let mut out = vec![None; fused.len()];
        let mut top_down: Option<Var> = None;
        for k in (0..fused.len()).rev() {
            let mut p = self.lateral[k].forward(g, store, fused[k].1)?;
            if let Some(coarser) = top_down {
                let up = g.upsample2x(coarser)?;
                p = g.add(p, up)?;
            }
            top_down = Some(p);
            out[k] = Some((fused[k].0, self.smooth[k].forward_act(g, store, p)?));
        }
        Ok(out.into_iter().map(|o| o.expect("every level visited")).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub width: usize,
    /// Initial objectness probability, sets the objectness bias.
    pub prior: f64,
}

impl HeadConfig {
    pub fn toy() -> Self {
        Self { width: 64, prior: 0.01 }
    }

    pub fn reference() -> Self {
        Self { width: 128, prior: 0.01 }
    }
}

/// FPN plus a decoupled head whose weights are shared across levels.
#[derive(Clone, Debug)]
pub struct Detector {
    pub fpn: Fpn,
    cls_hidden: Conv,
    cls_out: Conv,
    reg_hidden: Conv,
    reg_out: Conv,
}

impl Detector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, levels: &[Level], in_channels: &[usize], cfg: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(cfg.prior > 0.0 && cfg.prior < 1.0) || cfg.width == 0 {
            return Err(config_err!("bad head config {cfg:?}"));
        }
        let fpn = Fpn::new(store, levels, in_channels, cfg.width, rng)?;
        let w = cfg.width;
        let cls_hidden = Conv::new(store, "head.cls.hidden", w, w, 1, 1, rng);
        let cls_out = Conv::new(store, "head.cls.out", w, DamageClass::COUNT, 1, 1, rng);
        let reg_hidden = Conv::new(store, "head.reg.hidden", w, w, 1, 1, rng);
        let reg_out = Conv::new(store, "head.reg.out", w, 5, 1, 1, rng);
        let bias = reg_out.bias.expect("head output has a bias");
        store.get_mut(bias).data_mut()[0] = T::of((cfg.prior / (1.0 - cfg.prior)).ln());
        Ok(Self { fpn, cls_hidden, cls_out, reg_hidden, reg_out })
    }

    pub fn levels(&self) -> &[Level] {
        self.fpn.levels()
    }

    /// Head maps `(9, H, W)` per level.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: &[(Level, Var)]) -> Result<Vec<(Level, Var)>> {
        let refined = self.fpn.forward(g, store, fused)?;
        let mut out = Vec::with_capacity(refined.len());
        for (level, x) in refined {
            let c = self.cls_hidden.forward_act(g, store, x)?;
            let c = self.cls_out.forward(g, store, c)?;
            let r = self.reg_hidden.forward_act(g, store, x)?;
            let r = self.reg_out.forward(g, store, r)?;
            out.push((level, g.concat(&[c, r])?));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Highest-confidence candidates kept before NMS.
    pub max_candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.05, nms_iou: 0.5, max_candidates: 1000 }
    }
}

pub fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax4(z: [f64; 4]) -> [f64; 4] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Box predicted by cell `(i, j)` of a map with the given stride.
pub fn decode_box(stride: f64, i: usize, j: usize, reg: [f64; 4]) -> BBox {
    let cx = (j as f64 + 0.5 + reg[0]) * stride;
    let cy = (i as f64 + 0.5 + reg[1]) * stride;
    BBox::from_center(cx, cy, stride * reg[2].exp(), stride * reg[3].exp())
}

/// Inverse of [`decode_box`] for a given cell.
pub fn encode_box(stride: f64, i: usize, j: usize, b: &BBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    [cx / stride - j as f64 - 0.5, cy / stride - i as f64 - 0.5, (b.width() / stride).ln(), (b.height() / stride).ln()]
}

/// IoU of two boxes assumed non-degenerate.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy class-wise NMS over detections sorted by confidence descending.
pub fn nms(sorted: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.damage_class != d.damage_class || box_iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

pub fn decode<T: Scalar>(head: &HeadOutput<T>, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    if !(cfg.conf_threshold > 0.0 && cfg.conf_threshold < 1.0) || !(cfg.nms_iou > 0.0 && cfg.nms_iou < 1.0) {
        return Err(config_err!("decode thresholds must lie in (0, 1), got {cfg:?}"));
    }
    let mut candidates = Vec::new();
    for (level, map) in &head.levels {
        let (c, h, w) = map.dims3()?;
        if c != HEAD_CHANNELS {
            return Err(config_err!("head map has {c} channels, expected {HEAD_CHANNELS}"));
        }
        let d = map.data();
        let at = |ch: usize, i: usize, j: usize| d[(ch * h + i) * w + j].to_f64_lossy();
        let stride = level.stride() as f64;
        for i in 0..h {
            for j in 0..w {
                let objectness = sigmoid64(at(OBJ, i, j));
                if objectness < cfg.conf_threshold {
                    continue;
                }
                let class_scores = softmax4([0, 1, 2, 3].map(|k| at(CLS + k, i, j)));
                let (best, best_p) = class_scores.iter().enumerate().fold((0, -1.0), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
                let confidence = objectness * best_p;
                if confidence < cfg.conf_threshold {
                    continue;
                }
                let bbox = decode_box(stride, i, j, [0, 1, 2, 3].map(|k| at(BOX + k, i, j)));
                if !bbox.is_valid() {
                    continue;
                }
                candidates.push(Detection {
                    bbox,
                    damage_class: DamageClass::ALL[best],
                    objectness,
                    class_scores,
                    confidence,
                });
            }
        }
    }
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    candidates.truncate(cfg.max_candidates);
    Ok(nms(candidates, cfg.nms_iou))
}

/// Positive cell for one ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub gt: usize,
    pub level: usize,
    pub i: usize,
    pub j: usize,
}

/// The available level whose stride is closest, in log scale, to `sqrt(area) / 4`.
pub fn assign_level(b: &BBox, levels: &[Level]) -> usize {
    let target = (b.area().sqrt() / 4.0).ln();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, l) in levels.iter().enumerate() {
        let d = ((l.stride() as f64).ln() - target).abs();
        if d < best_d - 1e-12 {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Center-cell assignment; when two boxes claim one cell the earlier box keeps it.
pub fn assign_targets(gts: &[BoxAnnotation], levels: &[(Level, usize, usize)], image_hw: (usize, usize)) -> Result<Vec<Assignment>> {
    let frame = BBox::new(0.0, 0.0, image_hw.1 as f64, image_hw.0 as f64);
    let level_ids: Vec<Level> = levels.iter().map(|l| l.0).collect();
    let mut out: Vec<Assignment> = Vec::new();
    for (n, gt) in gts.iter().enumerate() {
        let b = gt.bbox;
        if !b.is_valid() || b.x_min < frame.x_min || b.y_min < frame.y_min || b.x_max > frame.x_max || b.y_max > frame.y_max {
            return Err(Error::Protocol(format!("ground-truth box {b:?} lies outside the {}x{} support", image_hw.1, image_hw.0)));
        }
        let k = assign_level(&b, &level_ids);
        let (level, h, w) = levels[k];
        let s = level.stride() as f64;
        let (cx, cy) = b.center();
        let i = ((cy / s).floor() as usize).min(h - 1);
        let j = ((cx / s).floor() as usize).min(w - 1);
        if !out.iter().any(|a| a.level == k && a.i == i && a.j == j) {
            out.push(Assignment { gt: n, level: k, i, j });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub objectness: f64,
    pub classification: f64,
    pub box_iou: f64,
    pub positives: usize,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// IoU and its gradient with respect to the predicted corners `(x1, y1, x2, y2)`.
fn iou_and_grad(p: [f64; 4], t: &BBox) -> (f64, [f64; 4]) {
    let ix1 = p[0].max(t.x_min);
    let iy1 = p[1].max(t.y_min);
    let ix2 = p[2].min(t.x_max);
    let iy2 = p[3].min(t.y_max);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let area_p = (p[2] - p[0]) * (p[3] - p[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + t.area() - inter;
    let d_inter = [
        if p[0] > t.x_min { -ih } else { 0.0 },
        if p[1] > t.y_min { -iw } else { 0.0 },
        if p[2] < t.x_max { ih } else { 0.0 },
        if p[3] < t.y_max { iw } else { 0.0 },
    ];
    let d_area = [-(p[3] - p[1]), -(p[2] - p[0]), p[3] - p[1], p[2] - p[0]];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        g[k] = (d_inter[k] * union - inter * d_union) / (union * union);
    }
    (inter / union, g)
}

/// Loss value, breakdown and gradient with respect to every head map.
///
/// Objectness BCE is averaged over background cells (divided by the total
/// cell count) plus over positive cells separately; the class
/// cross-entropy and `1 - IoU` terms are averaged over positives.
pub fn detection_loss_values<T: Scalar>(
    head: &[(Level, &Tensor<T>)],
    gts: &[BoxAnnotation],
    image_hw: (usize, usize),
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let mut dims = Vec::with_capacity(head.len());
    for (level, map) in head {
        let (c, h, w) = map.dims3()?;
        if c != HEAD_CHANNELS {
            return Err(config_err!("head map has {c} channels, expected {HEAD_CHANNELS}"));
        }
        dims.push((*level, h, w));
    }
    if dims.is_empty() {
        return Err(Error::Input("empty head output".into()));
    }
    let assignments = assign_targets(gts, &dims, image_hw)?;
    let cells: usize = dims.iter().map(|d| d.1 * d.2).sum();
    let positives = assignments.len();
    let mut grads: Vec<Vec<f64>> = head.iter().map(|(_, m)| vec![0.0; m.numel()]).collect();
    let values: Vec<Vec<f64>> = head.iter().map(|(_, m)| m.data().iter().map(|v| v.to_f64_lossy()).collect()).collect();

    let mut obj_loss = 0.0;
    for (k, &(_, h, w)) in dims.iter().enumerate() {
        for idx in 0..h * w {
            let o = values[k][OBJ * h * w + idx];
            obj_loss += softplus(o);
            grads[k][OBJ * h * w + idx] = sigmoid64(o) / cells as f64;
        }
    }
    let mut obj_pos = 0.0;
    let mut cls_loss = 0.0;
    let mut box_loss = 0.0;
    for a in &assignments {
        let (level, h, w) = dims[a.level];
        let hw = h * w;
        let idx = a.i * w + a.j;
        let gt = &gts[a.gt];
        // positives are averaged among themselves so that a handful of
        // buildings is not drowned out by the background cells
        let o = values[a.level][OBJ * hw + idx];
        obj_loss -= softplus(o);
        obj_pos += softplus(-o);
        grads[a.level][OBJ * hw + idx] = (sigmoid64(o) - 1.0) / positives as f64;

        let logits = [0, 1, 2, 3].map(|c| values[a.level][(CLS + c) * hw + idx]);
        let p = softmax4(logits);
        let target = gt.damage_class.index();
        cls_loss -= p[target].max(f64::MIN_POSITIVE).ln();
        for c in 0..4 {
            let y = if c == target { 1.0 } else { 0.0 };
            grads[a.level][(CLS + c) * hw + idx] = (p[c] - y) / positives as f64;
        }

        let s = level.stride() as f64;
        let reg = [0, 1, 2, 3].map(|c| values[a.level][(BOX + c) * hw + idx]);
        let pred = decode_box(s, a.i, a.j, reg);
        let (iou, d) = iou_and_grad([pred.x_min, pred.y_min, pred.x_max, pred.y_max], &gt.bbox);
        box_loss += 1.0 - iou;
        // corners from (cx, cy, w, h): x1 = cx - w/2, x2 = cx + w/2
        let (pw, ph) = (pred.width(), pred.height());
        let d_cx = d[0] + d[2];
        let d_cy = d[1] + d[3];
        let d_w = (d[2] - d[0]) / 2.0;
        let d_h = (d[3] - d[1]) / 2.0;
        let local = [d_cx * s, d_cy * s, d_w * pw, d_h * ph];
        for c in 0..4 {
            grads[a.level][(BOX + c) * hw + idx] = -local[c] / positives as f64;
        }
    }
    let mut objectness = obj_loss / cells as f64;
    let (classification, box_iou) = if positives > 0 {
        objectness += obj_pos / positives as f64;
        (cls_loss / positives as f64, box_loss / positives as f64)
    } else {
        (0.0, 0.0)
    };
    let total = objectness + classification + box_iou;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("detection loss is {total}")));
    }
    let grads = head
        .iter()
        .zip(grads)
        .map(|((_, m), g)| Tensor::new(m.shape().to_vec(), g.into_iter().map(T::of).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((LossBreakdown { total, objectness, classification, box_iou, positives }, grads))
}

/// Graph node for the detection loss over the head maps.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    head: &[(Level, Var)],
    gts: &[BoxAnnotation],
    image_hw: (usize, usize),
) -> Result<(Var, LossBreakdown)> {
    let maps: Vec<(Level, &Tensor<T>)> = head.iter().map(|&(l, v)| (l, g.value(v))).collect();
    let (breakdown, grads) = detection_loss_values(&maps, gts, image_hw)?;
    let inputs: Vec<Var> = head.iter().map(|h| h.1).collect();
    let loss = g.custom_scalar(&inputs, T::of(breakdown.total), grads)?;
    Ok((loss, breakdown))
}
