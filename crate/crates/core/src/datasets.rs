//! Synthetic scene pairs for desk-scale experiments and ingestion of
//! xBD-style directories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config_err, input_err, Error, Result};
use crate::geometry::{BBox, Raster};
use crate::geoproto::{apply_shift, BoxAnnotation, DamageClass, ScenePair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    pub building_count_range: (usize, usize),
    pub building_size_range: (usize, usize),
    pub class_distribution: [f64; 4],
    pub background_texture_seed: u64,
    pub post_shift: Option<(i64, i64)>,
    /// Half-width of the global multiplicative brightness change on post.
    pub illumination_jitter: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            building_count_range: (4, 8),
            building_size_range: (16, 44),
            class_distribution: [0.4, 0.2, 0.2, 0.2],
            background_texture_seed: 0,
            post_shift: None,
            illumination_jitter: 0.05,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(config_err!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        let (cmin, cmax) = self.building_count_range;
        let (smin, smax) = self.building_size_range;
        if cmin > cmax || smin > smax || smin < 6 || smax + 2 > self.image_size {
            return Err(config_err!(
                "bad building ranges: count {:?}, size {:?} for image {}",
                self.building_count_range,
                self.building_size_range,
                self.image_size
            ));
        }
        let total: f64 = self.class_distribution.iter().sum();
        if self.class_distribution.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(config_err!("class_distribution {:?} is not a probability vector", self.class_distribution));
        }
        if !(0.0..0.5).contains(&self.illumination_jitter) {
            return Err(config_err!("illumination_jitter {} outside [0, 0.5)", self.illumination_jitter));
        }
        Ok(())
    }
}

/// Float RGB canvas used while rendering, values nominally in `[0, 1]`.
struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn at(&mut self, x: usize, y: usize) -> &mut [f32; 3] {
        &mut self.px[y * self.size + x]
    }

    fn to_raster(&self) -> Raster {
        let n = self.size * self.size;
        let mut data = vec![0u8; 3 * n];
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = (p[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Raster::from_planar(self.size, self.size, data).expect("canvas is square RGB")
    }
}

fn render_background(size: usize, rng: &mut impl Rng) -> Canvas {
    let base = [rng.gen_range(0.22..0.38), rng.gen_range(0.28..0.42), rng.gen_range(0.18..0.30)];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let f = rng.gen_range(0.01..0.06);
            let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (f * theta.cos(), f * theta.sin(), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.02..0.05))
        })
        .collect();
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let low: f32 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin()).sum();
            let grain = rng.gen_range(-0.04..0.04);
            px.push(base.map(|b| b + low + grain));
        }
    }
    Canvas { size, px }
}

struct Building {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    class: DamageClass,
    roof: [f32; 3],
}

impl Building {
    fn overlaps(&self, o: &Building, gap: usize) -> bool {
        self.x < o.x + o.w + gap && o.x < self.x + self.w + gap && self.y < o.y + o.h + gap && o.y < self.y + self.h + gap
    }

    fn is_edge(&self, x: usize, y: usize) -> bool {
        x == self.x || y == self.y || x + 1 == self.x + self.w || y + 1 == self.y + self.h
    }
}

fn sample_class(dist: &[f64; 4], rng: &mut impl Rng) -> DamageClass {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return DamageClass::ALL[i];
        }
    }
    // rounding slack lands on the last class with nonzero mass
    let last = dist.iter().rposition(|p| *p > 0.0).unwrap_or(0);
    DamageClass::ALL[last]
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Renders one deterministic pre/post pair.
pub fn generate_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<ScenePair> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.background_texture_seed);

    let background = render_background(size, &mut rng);
    let count = rng.gen_range(spec.building_count_range.0..=spec.building_count_range.1);
    let (smin, smax) = spec.building_size_range;
    let mut buildings: Vec<Building> = Vec::with_capacity(count);
    let mut attempts = 0;
    while buildings.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(input_err!(
                "could not place {count} buildings without overlap in {MAX_PLACEMENT_ATTEMPTS} attempts (scene seed {seed})"
            ));
        }
        let w = rng.gen_range(smin..=smax);
        let h = rng.gen_range(smin..=smax);
        let candidate = Building {
            x: rng.gen_range(1..size - w),
            y: rng.gen_range(1..size - h),
            w,
            h,
            class: DamageClass::NoDamage,
            roof: [0.0; 3],
        };
        if buildings.iter().any(|b| b.overlaps(&candidate, 3)) {
            continue;
        }
        let grey = rng.gen_range(0.6..0.9);
        let tint = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
        buildings.push(Building {
            class: sample_class(&spec.class_distribution, &mut rng),
            roof: [0, 1, 2].map(|c| grey + tint[c]),
            ..candidate
        });
    }

    // Tarp-coloured patches mark minor damage in the post image; a few intact
    // roofs carry the same patches already in the pre image, so the post image
    // alone is not conclusive.
    let mut pre = Canvas { size, px: background.px.clone() };
    for b in &buildings {
        let ridged = rng.gen_bool(0.35);
        let period = rng.gen_range(3..6);
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                let mut v = b.roof;
                if b.is_edge(x, y) {
                    v = v.map(|c| c * 0.35);
                } else if ridged && (x - b.x) % period == 0 {
                    v = v.map(|c| c * 0.7);
                }
                *pre.at(x, y) = v;
            }
        }
        if b.class == DamageClass::NoDamage && rng.gen_bool(0.15) {
            paint_patches(&mut pre, b, &mut rng);
        }
    }

    let mut post = Canvas { size, px: pre.px.clone() };
    for b in &buildings {
        match b.class {
            DamageClass::NoDamage => {}
            DamageClass::Minor => paint_patches(&mut post, b, &mut rng),
            DamageClass::Major => {
                let frac = rng.gen_range(0.45..0.7);
                let (mut x0, mut y0, mut x1, mut y1) = (b.x, b.y, b.x + b.w, b.y + b.h);
                match rng.gen_range(0..4) {
                    0 => x1 = b.x + ((b.w as f64 * frac).ceil() as usize),
                    1 => x0 = b.x + b.w - ((b.w as f64 * frac).ceil() as usize),
                    2 => y1 = b.y + ((b.h as f64 * frac).ceil() as usize),
                    _ => y0 = b.y + b.h - ((b.h as f64 * frac).ceil() as usize),
                }
                for y in y0..y1 {
                    for x in x0..x1 {
                        let g = rng.gen_range(0.1..0.9);
                        *post.at(x, y) = b.roof.map(|c| 0.3 * c + 0.7 * g);
                    }
                }
            }
            DamageClass::Destroyed => {
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        let mut v = background.px[y * size + x];
                        if rng.gen_bool(0.5) {
                            let g = rng.gen_range(0.35..0.75);
                            v = [g, 0.9 * g, 0.75 * g];
                        }
                        *post.at(x, y) = v;
                    }
                }
            }
        }
    }
    if spec.illumination_jitter > 0.0 {
        let gain = 1.0 + rng.gen_range(-spec.illumination_jitter..=spec.illumination_jitter) as f32;
        post.px.iter_mut().for_each(|p| p.iter_mut().for_each(|c| *c *= gain));
    }

    let annotations = buildings
        .iter()
        .map(|b| BoxAnnotation {
            bbox: BBox::new(b.x as f64, b.y as f64, (b.x + b.w) as f64, (b.y + b.h) as f64),
            damage_class: b.class,
        })
        .collect();
    let pair = ScenePair::aligned(scene_id(seed), pre.to_raster(), post.to_raster(), annotations)?;
    match spec.post_shift {
        Some((dx, dy)) => apply_shift(&pair, dx, dy),
        None => Ok(pair),
    }
}

const TARP: [f32; 3] = [0.15, 0.35, 0.85];

fn paint_patches(canvas: &mut Canvas, b: &Building, rng: &mut ChaCha8Rng) {
    for _ in 0..rng.gen_range(1..=2) {
        let pw = (b.w * rng.gen_range(30..50) / 100).max(3);
        let ph = (b.h * rng.gen_range(30..50) / 100).max(3);
        let x0 = rng.gen_range(b.x + 1..=b.x + b.w - 1 - pw);
        let y0 = rng.gen_range(b.y + 1..=b.y + b.h - 1 - ph);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                *canvas.at(x, y) = TARP;
            }
        }
    }
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:06}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Seeded shuffle followed by a contiguous partition.
pub fn make_split(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(input_err!("cannot split an empty id list"));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err!("split fractions {fractions:?} must be non-negative and sum to 1"));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(input_err!("duplicate ids in split input"));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_train = ((n * fractions[0]).round() as usize).min(ids.len());
    let n_val = ((n * fractions[1]).round() as usize).min(ids.len() - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test, fractions, seed })
}

/// Everything needed to regenerate a synthetic dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticSceneSpec,
    pub seeds: Vec<u64>,
    pub split: DatasetSplit,
}

impl SyntheticManifest {
    pub fn new(spec: SyntheticSceneSpec, count: usize, first_seed: u64, fractions: [f64; 3], split_seed: u64) -> Result<Self> {
        spec.validate()?;
        let seeds: Vec<u64> = (first_seed..first_seed + count as u64).collect();
        let ids: Vec<String> = seeds.iter().map(|&s| scene_id(s)).collect();
        let split = make_split(&ids, fractions, split_seed)?;
        Ok(Self { spec, seeds, split })
    }

    pub fn seed_of(&self, id: &str) -> Result<u64> {
        self.seeds
            .iter()
            .copied()
            .find(|&s| scene_id(s) == id)
            .ok_or_else(|| input_err!("scene {id} is not in the manifest"))
    }

    pub fn scene(&self, id: &str) -> Result<ScenePair> {
        generate_scene(&self.spec, self.seed_of(id)?)
    }

    pub fn scenes(&self, ids: &[String]) -> Result<Vec<ScenePair>> {
        ids.iter().map(|id| self.scene(id)).collect()
    }
}

fn parse_damage_label(s: &str) -> Option<DamageClass> {
    match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
        "no-damage" => Some(DamageClass::NoDamage),
        "minor-damage" | "minor" => Some(DamageClass::Minor),
        "major-damage" | "major" => Some(DamageClass::Major),
        "destroyed" => Some(DamageClass::Destroyed),
        _ => None,
    }
}

/// Vertices of a WKT `POLYGON`/`MULTIPOLYGON` in pixel coordinates.
pub fn parse_wkt_vertices(wkt: &str) -> Option<Vec<(f64, f64)>> {
    let body = wkt.trim();
    let open = body.find('(')?;
    let keyword = body[..open].trim().to_ascii_uppercase();
    if keyword != "POLYGON" && keyword != "MULTIPOLYGON" {
        return None;
    }
    let coords: String = body[open..].chars().map(|c| if c == '(' || c == ')' { ' ' } else { c }).collect();
    let mut points = Vec::new();
    for pair in coords.split(',') {
        let nums: Vec<f64> = pair.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
        if nums.len() < 2 || !nums[0].is_finite() || !nums[1].is_finite() {
            return None;
        }
        points.push((nums[0], nums[1]));
    }
    (!points.is_empty()).then_some(points)
}

/// Axis-aligned envelope of a polygon.
pub fn polygon_to_box(vertices: &[(f64, f64)]) -> Option<BBox> {
    BBox::envelope(vertices)
}

/// Annotations read from one label file plus the number of dropped features.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelFile {
    pub annotations: Vec<BoxAnnotation>,
    pub dropped: usize,
}

pub fn parse_label_file(path: &Path, width: usize, height: usize) -> Result<LabelFile> {
    let bad = |reason: String| Error::Annotation { path: path.to_path_buf(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let features = match doc.get("features") {
        Some(Value::Object(f)) => f.get("xy").ok_or_else(|| bad("features has no \"xy\" list".into()))?,
        Some(list @ Value::Array(_)) => list,
        _ => return Err(bad("missing \"features\"".into())),
    };
    let features = features.as_array().ok_or_else(|| bad("feature list is not an array".into()))?;
    let mut annotations = Vec::new();
    let mut dropped = 0;
    for (i, f) in features.iter().enumerate() {
        let props = f.get("properties");
        let label = props
            .and_then(|p| p.get("subtype"))
            .or_else(|| f.get("subtype"))
            .or_else(|| f.get("damage"))
            .and_then(Value::as_str);
        let vertices = if let Some(wkt) = f.get("wkt") {
            let wkt = wkt.as_str().ok_or_else(|| bad(format!("feature {i}: wkt is not a string")))?;
            parse_wkt_vertices(wkt).ok_or_else(|| bad(format!("feature {i}: unparsable polygon {wkt:?}")))?
        } else if let Some(v) = f.get("vertices") {
            serde_json::from_value::<Vec<(f64, f64)>>(v.clone()).map_err(|e| bad(format!("feature {i}: {e}")))?
        } else {
            return Err(bad(format!("feature {i} has neither \"wkt\" nor \"vertices\"")));
        };
        let class = match label.and_then(parse_damage_label) {
            Some(c) => c,
            None => {
                dropped += 1;
                continue;
            }
        };
        let bbox = polygon_to_box(&vertices).ok_or_else(|| bad(format!("feature {i} has no vertices")))?;
        let clipped = BBox::new(bbox.x_min.max(0.0), bbox.y_min.max(0.0), bbox.x_max.min(width as f64), bbox.y_max.min(height as f64));
        if !clipped.is_valid() {
            dropped += 1;
            continue;
        }
        annotations.push(BoxAnnotation { bbox: clipped, damage_class: class });
    }
    Ok(LabelFile { annotations, dropped })
}

/// Label document in the xBD layout for a list of annotations.
pub fn label_document(annotations: &[BoxAnnotation]) -> Value {
    let xy: Vec<Value> = annotations
        .iter()
        .map(|a| {
            let b = a.bbox;
            let subtype = match a.damage_class {
                DamageClass::NoDamage => "no-damage",
                DamageClass::Minor => "minor-damage",
                DamageClass::Major => "major-damage",
                DamageClass::Destroyed => "destroyed",
            };
            serde_json::json!({
                "properties": {"feature_type": "building", "subtype": subtype},
                "wkt": format!(
                    "POLYGON (({x0} {y0}, {x1} {y0}, {x1} {y1}, {x0} {y1}, {x0} {y0}))",
                    x0 = b.x_min, y0 = b.y_min, x1 = b.x_max, y1 = b.y_max
                ),
            })
        })
        .collect();
    serde_json::json!({"features": {"xy": xy}})
}

#[derive(Debug)]
pub struct Ingested {
    pub pairs: Vec<ScenePair>,
    /// Post images skipped because a pair member or the label file is missing.
    pub skipped: Vec<PathBuf>,
    /// Features without a usable damage label.
    pub dropped_features: usize,
}

const POST_SUFFIX: &str = "_post_disaster";
const PRE_SUFFIX: &str = "_pre_disaster";

fn is_tier3(path: &Path) -> bool {
    path.components().any(|c| c.as_os_str().eq_ignore_ascii_case("tier3"))
}

/// Reads `<base>_pre_disaster.png` / `<base>_post_disaster.png` pairs and the
/// matching `<base>_post_disaster.json` labels found anywhere under
/// `annotation_dir`. Tier 3 directories are ignored.
pub fn ingest_xbd(image_dir: &Path, annotation_dir: &Path) -> Result<Ingested> {
    let mut labels: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(annotation_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| input_err!("cannot walk {}: {e}", annotation_dir.display()))?;
        let p = entry.path();
        if is_tier3(p.strip_prefix(annotation_dir).unwrap_or(p)) || p.extension().map_or(true, |e| e != "json") {
            continue;
        }
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            labels.insert(stem.to_string(), p.to_path_buf());
        }
    }

    let mut out = Ingested { pairs: Vec::new(), skipped: Vec::new(), dropped_features: 0 };
    for entry in walkdir::WalkDir::new(image_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| input_err!("cannot walk {}: {e}", image_dir.display()))?;
        let post_path = entry.path();
        if is_tier3(post_path.strip_prefix(image_dir).unwrap_or(post_path)) || post_path.extension().map_or(true, |e| e != "png") {
            continue;
        }
        let Some(stem) = post_path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some(base) = stem.strip_suffix(POST_SUFFIX) else { continue };
        let pre_path = post_path.with_file_name(format!("{base}{PRE_SUFFIX}.png"));
        let label_path = labels.get(stem);
        let (true, Some(label_path)) = (pre_path.exists(), label_path) else {
            log::warn!("skipping {}: missing pre image or label file", post_path.display());
            out.skipped.push(post_path.to_path_buf());
            continue;
        };
        let pre = Raster::load_png(&pre_path)?;
        let post = Raster::load_png(post_path)?;
        let labels = parse_label_file(label_path, pre.width(), pre.height())?;
        out.dropped_features += labels.dropped;
        out.pairs.push(ScenePair::aligned(base, pre, post, labels.annotations)?);
    }
    Ok(out)
}

/// Writes a pair in the layout `ingest_xbd` reads.
pub fn write_xbd_pair(pair: &ScenePair, image_dir: &Path, label_dir: &Path) -> Result<()> {
    for dir in [image_dir, label_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    pair.pre.save_png(&image_dir.join(format!("{}{PRE_SUFFIX}.png", pair.id)))?;
    pair.post.save_png(&image_dir.join(format!("{}{POST_SUFFIX}.png", pair.id)))?;
    let label_path = label_dir.join(format!("{}{POST_SUFFIX}.json", pair.id));
    let doc = serde_json::to_string_pretty(&label_document(&pair.local_annotations()))?;
    std::fs::write(&label_path, doc).map_err(|e| Error::io(&label_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn box_mean_abs_diff(pair: &ScenePair, b: &BBox) -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for y in b.y_min as usize..b.y_max as usize {
                for x in b.x_min as usize..b.x_max as usize {
                    acc += (pair.pre.get(c, x, y) as f64 - pair.post.get(c, x, y) as f64).abs();
                    n += 1.0;
                }
            }
        }
        acc / n
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSceneSpec::default();
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
        assert_ne!(generate_scene(&spec, 7).unwrap().pre, generate_scene(&spec, 8).unwrap().pre);
    }

    #[test]
    fn no_damage_without_jitter_leaves_post_unchanged() {
        let spec = SyntheticSceneSpec { class_distribution: [1.0, 0.0, 0.0, 0.0], illumination_jitter: 0.0, ..Default::default() };
        for seed in 0..5 {
            let p = generate_scene(&spec, seed).unwrap();
            assert_eq!(p.pre, p.post);
            assert!(p.annotations.iter().all(|a| a.damage_class == DamageClass::NoDamage));
        }
        let jittered = SyntheticSceneSpec { illumination_jitter: 0.05, ..spec };
        let p = generate_scene(&jittered, 3).unwrap();
        let max_diff = p.pre.data().iter().zip(p.post.data()).map(|(a, b)| (*a as i32 - *b as i32).abs()).max().unwrap();
        assert!(max_diff <= 14, "illumination jitter alone changed a pixel by {max_diff}");
    }

    #[test]
    fn destroyed_boxes_change_more_than_intact_ones() {
        let spec = SyntheticSceneSpec { building_count_range: (8, 10), ..Default::default() };
        let mut checked = 0;
        for seed in 0..40 {
            let p = generate_scene(&spec, seed).unwrap();
            let diff = |c| p.annotations.iter().filter(move |a| a.damage_class == c).map(|a| box_mean_abs_diff(&p, &a.bbox));
            let intact = diff(DamageClass::NoDamage).fold(0.0, f64::max);
            for d in diff(DamageClass::Destroyed) {
                assert!(d > intact, "seed {seed}: destroyed {d} <= intact {intact}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn every_box_differs_from_background_and_stays_in_frame() {
        let spec = SyntheticSceneSpec::default();
        for seed in 0..10 {
            let p = generate_scene(&spec, seed).unwrap();
            assert!(p.annotations.len() >= 4);
            for a in &p.annotations {
                assert!(p.pre.frame().contains_box(&a.bbox));
                // roofs are brighter than the background and outlined
                let b = a.bbox;
                let (cx, cy) = (((b.x_min + b.x_max) / 2.0) as usize, ((b.y_min + b.y_max) / 2.0) as usize);
                let edge = p.pre.get(1, b.x_min as usize, cy);
                let outside = p.pre.get(1, b.x_min as usize - 1, cy);
                assert!(p.pre.get(1, cx, cy) > outside || edge < outside);
            }
            for (i, a) in p.annotations.iter().enumerate() {
                for b in &p.annotations[i + 1..] {
                    let ix = a.bbox.x_max.min(b.bbox.x_max) - a.bbox.x_min.max(b.bbox.x_min);
                    let iy = a.bbox.y_max.min(b.bbox.y_max) - a.bbox.y_min.max(b.bbox.y_min);
                    assert!(ix <= 0.0 || iy <= 0.0, "overlapping buildings");
                }
            }
        }
    }

    #[test]
    fn crowded_spec_fails_placement() {
        let spec = SyntheticSceneSpec { image_size: 64, building_count_range: (30, 30), building_size_range: (20, 30), ..Default::default() };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Input(_))));
    }

    #[test]
    fn post_shift_is_applied() {
        let spec = SyntheticSceneSpec { post_shift: Some((10, -6)), ..Default::default() };
        let p = generate_scene(&spec, 1).unwrap();
        assert_eq!(p.applied_shift, (10, -6));
        assert_eq!((p.pre.width(), p.pre.height()), (246, 250));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let s = make_split(&ids, DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, make_split(&ids, DEFAULT_FRACTIONS, 3).unwrap());
        assert!(make_split(&[], DEFAULT_FRACTIONS, 0).is_err());
        assert!(make_split(&ids, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn polygon_boxes() {
        let tri = parse_wkt_vertices("POLYGON ((0 0, 10 0, 0 8, 0 0))").unwrap();
        assert_eq!(polygon_to_box(&tri), Some(BBox::new(0.0, 0.0, 10.0, 8.0)));
        let rect = [(2.0, 3.0), (7.0, 3.0), (7.0, 9.0), (2.0, 9.0)];
        assert_eq!(polygon_to_box(&rect), Some(BBox::new(2.0, 3.0, 7.0, 9.0)));
        assert!(parse_wkt_vertices("LINESTRING (0 0, 1 1)").is_none());
        assert!(parse_wkt_vertices("POLYGON ((0 0, x 1))").is_none());
    }

    #[test]
    fn unclassified_features_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a_post_disaster.json");
        let doc = serde_json::json!({"features": {"xy": [
            {"properties": {"subtype": "no-damage"}, "wkt": "POLYGON ((1 1, 5 1, 5 5, 1 5, 1 1))"},
            {"properties": {"subtype": "un-classified"}, "wkt": "POLYGON ((10 10, 20 10, 20 20, 10 10))"},
            {"properties": {"subtype": "destroyed"}, "wkt": "POLYGON ((30 30, 40 30, 40 44, 30 30))"},
            {"properties": {"subtype": "un-classified"}, "wkt": "POLYGON ((50 50, 60 50, 60 60, 50 50))"},
        ]}});
        std::fs::write(&path, doc.to_string()).unwrap();
        let labels = parse_label_file(&path, 64, 64).unwrap();
        let unclassified = doc["features"]["xy"].as_array().unwrap().iter().filter(|f| f["properties"]["subtype"] == "un-classified").count();
        assert_eq!(labels.dropped, unclassified);
        assert_eq!(labels.annotations.len(), 2);
        assert_eq!(labels.annotations[1].bbox, BBox::new(30.0, 30.0, 40.0, 44.0));

        std::fs::write(&path, "{\"features\": {\"xy\": [{\"wkt\": \"POLYGON ((1 x))\", \"properties\": {\"subtype\": \"destroyed\"}}]}}").unwrap();
        match parse_label_file(&path, 64, 64) {
            Err(Error::Annotation { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected annotation error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_roundtrip_skips_tier3_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec { image_size: 64, building_count_range: (2, 3), building_size_range: (8, 14), ..Default::default() };
        let images = dir.path().join("train/images");
        let labels = dir.path().join("train/labels");
        let a = generate_scene(&spec, 1).unwrap();
        write_xbd_pair(&a, &images, &labels).unwrap();
        let b = generate_scene(&spec, 2).unwrap();
        write_xbd_pair(&b, &dir.path().join("tier3/images"), &dir.path().join("tier3/labels")).unwrap();
        let c = generate_scene(&spec, 3).unwrap();
        write_xbd_pair(&c, &images, &labels).unwrap();
        std::fs::remove_file(images.join(format!("{}_pre_disaster.png", c.id))).unwrap();

        let got = ingest_xbd(dir.path(), dir.path()).unwrap();
        assert_eq!(got.pairs.len(), 1);
        assert_eq!(got.skipped.len(), 1);
        assert_eq!(got.pairs[0].pre, a.pre);
        assert_eq!(got.pairs[0].annotations, a.annotations);
    }

    proptest! {
        #[test]
        fn polygon_box_contains_vertices_and_is_idempotent(pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..12)) {
            let b = polygon_to_box(&pts).unwrap();
            for &(x, y) in &pts {
                prop_assert!(b.x_min <= x && x <= b.x_max && b.y_min <= y && y <= b.y_max);
            }
            let corners = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_max, b.y_max), (b.x_min, b.y_max)];
            prop_assert_eq!(polygon_to_box(&corners), Some(b));
        }

        #[test]
        fn split_is_a_partition(n in 1usize..80, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let s = make_split(&ids, DEFAULT_FRACTIONS, seed).unwrap();
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            let mut expected = ids.clone();
            expected.sort();
            prop_assert_eq!(all, expected);
        }
    }
}
