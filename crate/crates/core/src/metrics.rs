//! Object-level scoring: greedy matching, AP/mAP, class-agnostic
//! localization F1 and damage classification accuracy.

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{input_err, Result};
use crate::geometry::BBox;
use crate::geoproto::{BoxAnnotation, DamageClass, Direction};
use crate::hashing::ConfigHash;

pub const MATCH_IOU: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(input_err!("degenerate box {bx:?}"));
        }
    }
    Ok(crate::detector::box_iou(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Indices refer to the detection and ground-truth slices given to
/// [`greedy_match`]; `pairs` are in matching order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Detection indices by confidence descending; ties keep input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Each detection, most confident first, takes the unmatched ground truth of
/// highest IoU (lowest index on ties) if that IoU reaches the threshold.
pub fn greedy_match(dets: &[Detection], gts: &[BoxAnnotation], iou_threshold: f64, class_aware: bool) -> Result<MatchResult> {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for d in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in gts.iter().enumerate() {
            if taken[k] || (class_aware && gt.damage_class != dets[d].damage_class) {
                continue;
            }
            let v = iou(&dets[d].bbox, &gt.bbox)?;
            if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        match best {
            Some((gt, iou)) => {
                taken[gt] = true;
                out.pairs.push(MatchPair { det: d, gt, iou });
            }
            None => out.unmatched_dets.push(d),
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|&k| !taken[k]).collect();
    Ok(out)
}

/// Detections and ground truth of one evaluated image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoxAnnotation>,
}

/// Confidence and true-positive flag of every detection, pooled over images,
/// plus the ground-truth count.
fn scored_detections(images: &[ImageResult], class: Option<DamageClass>, iou_threshold: f64) -> Result<(Vec<(f64, bool)>, usize)> {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let dets: Vec<Detection> = img.detections.iter().filter(|d| class.map_or(true, |c| d.damage_class == c)).copied().collect();
        let gts: Vec<BoxAnnotation> = img.ground_truth.iter().filter(|g| class.map_or(true, |c| g.damage_class == c)).copied().collect();
        n_gt += gts.len();
        let m = greedy_match(&dets, &gts, iou_threshold, false)?;
        let mut tp = vec![false; dets.len()];
        m.pairs.iter().for_each(|p| tp[p.det] = true);
        scored.extend(dets.iter().zip(tp).map(|(d, t)| (d.confidence, t)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((scored, n_gt))
}

/// All-point interpolated AP for one class; `None` when the class has no
/// ground truth.
pub fn average_precision(images: &[ImageResult], class: DamageClass, iou_threshold: f64) -> Result<Option<f64>> {
    let (scored, n_gt) = scored_detections(images, Some(class), iou_threshold)?;
    if n_gt == 0 {
        return Ok(None);
    }
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(Some(ap))
}

/// Unweighted mean AP over classes that have ground truth, with per-class APs.
pub fn mean_average_precision(images: &[ImageResult], iou_threshold: f64) -> Result<(f64, [Option<f64>; 4])> {
    let mut per_class = [None; 4];
    for c in DamageClass::ALL {
        per_class[c.index()] = average_precision(images, c, iou_threshold)?;
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok((map, per_class))
}

fn f1(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    if n_pred + n_gt == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (n_pred + n_gt) as f64
    }
}

/// Best class-agnostic F1 over all confidence thresholds and the threshold
/// reaching it (the highest one on ties); `None` without detections.
pub fn localization_f1(images: &[ImageResult], iou_threshold: f64) -> Result<(f64, Option<f64>)> {
    // Greedy matching is sequential in confidence, so the matches above a
    // threshold are exactly the matches of the thresholded detection set.
    let (scored, n_gt) = scored_detections(images, None, iou_threshold)?;
    let mut best = (0.0, None);
    let mut tp = 0;
    for k in 0..scored.len() {
        tp += scored[k].1 as usize;
        let last_of_tie = k + 1 == scored.len() || scored[k + 1].0 != scored[k].0;
        if !last_of_tie {
            continue;
        }
        let f = f1(tp, k + 1, n_gt);
        if f > best.0 || best.1.is_none() {
            best = (f, Some(scored[k].0));
        }
    }
    Ok(best)
}

/// Detections at or above a confidence threshold.
pub fn threshold_images(images: &[ImageResult], threshold: f64) -> Vec<ImageResult> {
    images
        .iter()
        .map(|img| ImageResult {
            detections: img.detections.iter().filter(|d| d.confidence >= threshold).copied().collect(),
            ground_truth: img.ground_truth.clone(),
        })
        .collect()
}

/// Fraction of class-agnostic matches whose predicted class is right;
/// `None` for an empty matched set.
pub fn classification_accuracy(dets: &[Detection], gts: &[BoxAnnotation], m: &MatchResult) -> Option<f64> {
    if m.pairs.is_empty() {
        return None;
    }
    let correct = m.pairs.iter().filter(|p| dets[p.det].damage_class == gts[p.gt].damage_class).count();
    Some(correct as f64 / m.pairs.len() as f64)
}

/// Pooled classification accuracy over images.
pub fn pooled_classification_accuracy(images: &[ImageResult], iou_threshold: f64) -> Result<Option<f64>> {
    let mut correct = 0;
    let mut matched = 0;
    for img in images {
        let m = greedy_match(&img.detections, &img.ground_truth, iou_threshold, false)?;
        matched += m.pairs.len();
        correct += m.pairs.iter().filter(|p| img.detections[p.det].damage_class == img.ground_truth[p.gt].damage_class).count();
    }
    Ok((matched > 0).then(|| correct as f64 / matched as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when there were no predictions, in which case precision is 0.
    pub precision_undefined: bool,
}

impl Prf {
    fn from_counts(tp: usize, n_pred: usize, n_gt: usize) -> Self {
        Self {
            precision: if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 },
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            f1: f1(tp, n_pred, n_gt),
            precision_undefined: n_pred == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: DamageClass,
    pub num_ground_truth: usize,
    pub num_predictions: usize,
    pub true_positives: usize,
    #[serde(flatten)]
    pub scores: Prf,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: Option<ConfigHash>,
    pub shift_magnitude: u32,
    pub direction: Option<Direction>,
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    pub iou_threshold: f64,
    /// Confidence threshold of the P/R/F1 figures.
    pub operating_threshold: f64,
    pub per_class: Vec<ClassReport>,
    /// Mean over classes with ground truth.
    pub macro_avg: Prf,
    pub micro_avg: Prf,
    pub map50: f64,
    pub localization_f1: f64,
    pub localization_threshold: Option<f64>,
    /// Measured on class-agnostic matches at `localization_threshold`.
    pub classification_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn compute(images: &[ImageResult], operating_threshold: f64) -> Result<Self> {
        let iou_t = MATCH_IOU;
        let (map50, aps) = mean_average_precision(images, iou_t)?;
        let (localization_f1, localization_threshold) = localization_f1(images, iou_t)?;
        let classification_accuracy = match localization_threshold {
            Some(t) => pooled_classification_accuracy(&threshold_images(images, t), iou_t)?,
            None => None,
        };

        let operating = threshold_images(images, operating_threshold);
        let mut per_class = Vec::new();
        let (mut tp_all, mut pred_all, mut gt_all) = (0, 0, 0);
        for c in DamageClass::ALL {
            let (scored, n_gt) = scored_detections(&operating, Some(c), iou_t)?;
            let tp = scored.iter().filter(|s| s.1).count();
            tp_all += tp;
            pred_all += scored.len();
            gt_all += n_gt;
            per_class.push(ClassReport {
                class: c,
                num_ground_truth: n_gt,
                num_predictions: scored.len(),
                true_positives: tp,
                scores: Prf::from_counts(tp, scored.len(), n_gt),
                ap50: aps[c.index()],
            });
        }
        let present: Vec<&ClassReport> = per_class.iter().filter(|r| r.num_ground_truth > 0).collect();
        let mean = |f: fn(&Prf) -> f64| if present.is_empty() { 0.0 } else { present.iter().map(|r| f(&r.scores)).sum::<f64>() / present.len() as f64 };
        let macro_avg = Prf {
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            f1: mean(|p| p.f1),
            precision_undefined: present.iter().any(|r| r.scores.precision_undefined),
        };
        Ok(Self {
            config_hash: None,
            shift_magnitude: 0,
            direction: None,
            num_images: images.len(),
            num_ground_truth: images.iter().map(|i| i.ground_truth.len()).sum(),
            num_detections: images.iter().map(|i| i.detections.len()).sum(),
            iou_threshold: iou_t,
            operating_threshold,
            per_class,
            macro_avg,
            micro_avg: Prf::from_counts(tp_all, pred_all, gt_all),
            map50,
            localization_f1,
            localization_threshold,
            classification_accuracy,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn det(b: (f64, f64, f64, f64), conf: f64, class: DamageClass) -> Detection {
        Detection {
            bbox: BBox::new(b.0, b.1, b.2, b.3),
            damage_class: class,
            objectness: conf,
            class_scores: [0.25; 4],
            confidence: conf,
        }
    }

    fn gt(b: (f64, f64, f64, f64), class: DamageClass) -> BoxAnnotation {
        BoxAnnotation { bbox: BBox::new(b.0, b.1, b.2, b.3), damage_class: class }
    }

    use DamageClass::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 30.0, 10.0)).unwrap(), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)).unwrap() - 50.0 / 150.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 5.0)).is_err());
    }

    #[test]
    fn matching_examples() {
        let g = [gt((0.0, 0.0, 10.0, 10.0), Minor)];
        let m = greedy_match(&[det((0.0, 0.0, 10.0, 10.0), 0.5, Minor)], &g, 0.5, false).unwrap();
        assert_eq!(m.pairs.len(), 1);
        let dets = [det((0.0, 0.0, 10.0, 10.0), 0.6, Minor), det((0.0, 0.0, 10.0, 9.0), 0.9, Minor)];
        let m = greedy_match(&dets, &g, 0.5, false).unwrap();
        assert_eq!(m.pairs[0].det, 1);
        assert_eq!(m.unmatched_dets, vec![0]);
        // class-aware mode refuses a wrong class
        let m = greedy_match(&[det((0.0, 0.0, 10.0, 10.0), 0.5, Major)], &g, 0.5, true).unwrap();
        assert!(m.pairs.is_empty() && m.unmatched_gts == vec![0]);
    }

    #[test]
    fn ap_examples() {
        let one = |dets: Vec<Detection>, gts: Vec<BoxAnnotation>| vec![ImageResult { detections: dets, ground_truth: gts }];
        let g1 = vec![gt((0.0, 0.0, 10.0, 10.0), Minor)];
        assert_eq!(average_precision(&one(vec![det((0.0, 0.0, 10.0, 10.0), 0.9, Minor)], g1.clone()), Minor, 0.5).unwrap(), Some(1.0));
        assert_eq!(average_precision(&one(vec![], g1.clone()), Minor, 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&one(vec![], vec![]), Minor, 0.5).unwrap(), None);

        let g2 = vec![gt((0.0, 0.0, 10.0, 10.0), Major), gt((20.0, 20.0, 30.0, 30.0), Major)];
        let dets = vec![
            det((0.0, 0.0, 10.0, 10.0), 0.9, Major),
            det((50.0, 50.0, 60.0, 60.0), 0.8, Major),
            det((20.0, 20.0, 30.0, 30.0), 0.7, Major),
        ];
        let ap = average_precision(&one(dets, g2), Major, 0.5).unwrap().unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-9, "{ap}");
    }

    #[test]
    fn localization_and_classification_examples() {
        let gts = vec![gt((0.0, 0.0, 10.0, 10.0), Minor), gt((20.0, 0.0, 30.0, 10.0), Destroyed)];
        let wrong = vec![det((0.0, 0.0, 10.0, 10.0), 0.9, Destroyed), det((20.0, 0.0, 30.0, 10.0), 0.8, NoDamage)];
        let imgs = vec![ImageResult { detections: wrong.clone(), ground_truth: gts.clone() }];
        assert_eq!(localization_f1(&imgs, 0.5).unwrap(), (1.0, Some(0.8)));
        let empty = vec![ImageResult { detections: vec![], ground_truth: gts.clone() }];
        assert_eq!(localization_f1(&empty, 0.5).unwrap(), (0.0, None));

        let m = greedy_match(&wrong, &gts, 0.5, false).unwrap();
        assert_eq!(classification_accuracy(&wrong, &gts, &m), Some(0.0));
        let none = greedy_match(&[], &gts, 0.5, false).unwrap();
        assert_eq!(classification_accuracy(&[], &gts, &none), None);

        let g4: Vec<BoxAnnotation> = (0..4).map(|k| gt((20.0 * k as f64, 0.0, 20.0 * k as f64 + 10.0, 10.0), Major)).collect();
        let mut d4: Vec<Detection> = g4.iter().map(|g| det((g.bbox.x_min, 0.0, g.bbox.x_max, 10.0), 0.5, Major)).collect();
        d4[3].damage_class = Minor;
        let m = greedy_match(&d4, &g4, 0.5, false).unwrap();
        assert_eq!(classification_accuracy(&d4, &g4, &m), Some(0.75));
        // unmatched items on either side leave the value unchanged
        let mut d5 = d4.clone();
        d5.push(det((200.0, 200.0, 210.0, 210.0), 0.99, NoDamage));
        let mut g5 = g4.clone();
        g5.push(gt((300.0, 300.0, 310.0, 310.0), Destroyed));
        let m = greedy_match(&d5, &g5, 0.5, false).unwrap();
        assert_eq!(classification_accuracy(&d5, &g5, &m), Some(0.75));
    }

    #[test]
    fn report_flags_missing_predictions() {
        let imgs = vec![ImageResult { detections: vec![], ground_truth: vec![gt((0.0, 0.0, 5.0, 5.0), Minor)] }];
        let r = EvalReport::compute(&imgs, 0.3).unwrap();
        assert_eq!(r.micro_avg.precision, 0.0);
        assert!(r.micro_avg.precision_undefined);
        assert_eq!(r.classification_accuracy, None);
        assert_eq!(r.map50, 0.0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_class"][1]["precision_undefined"].as_bool().unwrap());
    }

    // Oracles: boxes on an integer grid so that areas can be counted cell by cell.

    fn grid_box(rng: &mut impl Rng) -> (f64, f64, f64, f64) {
        let x = rng.gen_range(0..12) as f64;
        let y = rng.gen_range(0..12) as f64;
        (x, y, x + rng.gen_range(1..8) as f64, y + rng.gen_range(1..8) as f64)
    }

    fn counted_iou(a: &BBox, b: &BBox) -> f64 {
        let cells = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x + 1.0 <= bx.x_max && y >= bx.y_min && y + 1.0 <= bx.y_max;
        let (mut inter, mut union) = (0, 0);
        for x in 0..20 {
            for y in 0..20 {
                let (p, q) = (cells(a, x as f64, y as f64), cells(b, x as f64, y as f64));
                inter += (p && q) as usize;
                union += (p || q) as usize;
            }
        }
        inter as f64 / union as f64
    }

    fn random_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<BoxAnnotation>) {
        let nd = rng.gen_range(0..=5);
        let ng = rng.gen_range(0..=5);
        // coarse confidences so that ties occur
        let dets = (0..nd).map(|_| det(grid_box(rng), rng.gen_range(1..6) as f64 / 6.0, DamageClass::ALL[rng.gen_range(0..2)])).collect();
        let gts = (0..ng).map(|_| gt(grid_box(rng), DamageClass::ALL[rng.gen_range(0..2)])).collect();
        (dets, gts)
    }

    /// Greedy matching over every GT subset: a detection's partner is the
    /// best-IoU candidate among those not claimed by earlier detections.
    fn oracle_match(dets: &[Detection], gts: &[BoxAnnotation], thr: f64, class_aware: bool) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        // insertion sort, stable, confidence descending
        for i in 1..order.len() {
            let mut j = i;
            while j > 0 && dets[order[j - 1]].confidence < dets[order[j]].confidence {
                order.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used: u32 = 0;
        let mut pairs = Vec::new();
        for d in order {
            let candidates: Vec<(usize, f64)> = (0..gts.len())
                .filter(|&g| used & (1 << g) == 0)
                .filter(|&g| !class_aware || gts[g].damage_class == dets[d].damage_class)
                .map(|g| (g, counted_iou(&dets[d].bbox, &gts[g].bbox)))
                .filter(|&(_, v)| v >= thr - 1e-12)
                .collect();
            let top = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            if let Some(&(g, _)) = candidates.iter().find(|c| (c.1 - top).abs() < 1e-12) {
                used |= 1 << g;
                pairs.push((d, g));
            }
        }
        pairs
    }

    /// AP as the mean over ground truths of the envelope precision at the rank
    /// where each is recalled.
    fn oracle_ap(dets: &[Detection], gts: &[BoxAnnotation]) -> Option<f64> {
        if gts.is_empty() {
            return None;
        }
        let pairs = oracle_match(dets, gts, 0.5, false);
        let mut ranked: Vec<(f64, bool)> = (0..dets.len()).map(|d| (dets[d].confidence, pairs.iter().any(|p| p.0 == d))).collect();
        let mut order: Vec<usize> = (0..ranked.len()).collect();
        order.sort_by(|&a, &b| ranked[b].0.partial_cmp(&ranked[a].0).unwrap().then(a.cmp(&b)));
        ranked = order.iter().map(|&k| ranked[k]).collect();
        let prec: Vec<f64> = (0..ranked.len()).map(|k| ranked[..=k].iter().filter(|r| r.1).count() as f64 / (k + 1) as f64).collect();
        let mut total = 0.0;
        for k in 0..ranked.len() {
            if ranked[k].1 {
                total += prec[k..].iter().copied().fold(0.0, f64::max);
            }
        }
        Some(total / gts.len() as f64)
    }

    fn oracle_localization_f1(dets: &[Detection], gts: &[BoxAnnotation]) -> f64 {
        let mut best = 0.0;
        for t in dets.iter().map(|d| d.confidence) {
            let kept: Vec<Detection> = dets.iter().filter(|d| d.confidence >= t).copied().collect();
            let tp = oracle_match(&kept, gts, 0.5, false).len();
            let f = 2.0 * tp as f64 / (kept.len() + gts.len()) as f64;
            best = f64::max(best, f);
        }
        best
    }

    #[test]
    fn brute_force_oracles_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..2000 {
            let (dets, gts) = random_instance(&mut rng);
            for class_aware in [false, true] {
                let m = greedy_match(&dets, &gts, 0.5, class_aware).unwrap();
                let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.det, p.gt)).collect();
                assert_eq!(got, oracle_match(&dets, &gts, 0.5, class_aware), "trial {trial}");
            }
            // single class so that AP sees every detection
            let mono_d: Vec<Detection> = dets.iter().map(|d| Detection { damage_class: Minor, ..*d }).collect();
            let mono_g: Vec<BoxAnnotation> = gts.iter().map(|g| BoxAnnotation { damage_class: Minor, ..*g }).collect();
            let imgs = vec![ImageResult { detections: mono_d.clone(), ground_truth: mono_g.clone() }];
            let ap = average_precision(&imgs, Minor, 0.5).unwrap();
            match (ap, oracle_ap(&mono_d, &mono_g)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
            let imgs = vec![ImageResult { detections: dets.clone(), ground_truth: gts.clone() }];
            let (f, _) = localization_f1(&imgs, 0.5).unwrap();
            assert!((f - oracle_localization_f1(&dets, &gts)).abs() < 1e-12, "trial {trial}");
        }
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Detection>, Vec<BoxAnnotation>)> {
        any::<u64>().prop_map(|s| random_instance(&mut ChaCha8Rng::seed_from_u64(s)))
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_order_only((dets, gts) in arb_instance()) {
            let imgs = vec![ImageResult { detections: dets.clone(), ground_truth: gts.clone() }];
            let r = EvalReport::compute(&imgs, 0.3).unwrap();
            for v in [r.map50, r.localization_f1, r.micro_avg.f1, r.macro_avg.f1, r.classification_accuracy.unwrap_or(0.0)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // strictly increasing transform of confidences
            let warped: Vec<Detection> = dets.iter().map(|d| Detection { confidence: d.confidence.powi(3) * 0.5 + 0.1, ..*d }).collect();
            let imgs2 = vec![ImageResult { detections: warped, ground_truth: gts.clone() }];
            let (m1, _) = mean_average_precision(&imgs, 0.5).unwrap();
            let (m2, _) = mean_average_precision(&imgs2, 0.5).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);
        }

        #[test]
        fn localization_dominates_class_aware_f1((dets, gts) in arb_instance(), t in 0.0f64..1.0) {
            let kept: Vec<Detection> = dets.iter().filter(|d| d.confidence >= t).copied().collect();
            let agnostic = greedy_match(&kept, &gts, 0.5, false).unwrap().pairs.len();
            let aware = greedy_match(&kept, &gts, 0.5, true).unwrap().pairs.len();
            prop_assert!(agnostic >= aware);
            let imgs = vec![ImageResult { detections: dets.clone(), ground_truth: gts.clone() }];
            let (best, _) = localization_f1(&imgs, 0.5).unwrap();
            prop_assert!(best + 1e-12 >= f1(aware, kept.len(), gts.len()));
        }

        #[test]
        fn removing_a_false_positive_never_lowers_ap((dets, gts) in arb_instance()) {
            let mono_d: Vec<Detection> = dets.iter().map(|d| Detection { damage_class: Minor, ..*d }).collect();
            let mono_g: Vec<BoxAnnotation> = gts.iter().map(|g| BoxAnnotation { damage_class: Minor, ..*g }).collect();
            let m = greedy_match(&mono_d, &mono_g, 0.5, false).unwrap();
            let base = average_precision(&[ImageResult { detections: mono_d.clone(), ground_truth: mono_g.clone() }], Minor, 0.5).unwrap();
            for &fp in &m.unmatched_dets {
                let mut fewer = mono_d.clone();
                fewer.remove(fp);
                let ap = average_precision(&[ImageResult { detections: fewer, ground_truth: mono_g.clone() }], Minor, 0.5).unwrap();
                if let (Some(a), Some(b)) = (ap, base) {
                    prop_assert!(a + 1e-12 >= b);
                }
            }
        }
    }
}
