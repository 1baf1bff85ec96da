use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{BBox, Raster, Rect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamageClass {
    NoDamage,
    Minor,
    Major,
    Destroyed,
}

impl DamageClass {
    pub const ALL: [DamageClass; 4] = [Self::NoDamage, Self::Minor, Self::Major, Self::Destroyed];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoDamage => "no_damage",
            Self::Minor => "minor",
            Self::Major => "major",
            Self::Destroyed => "destroyed",
        }
    }
}

impl fmt::Display for DamageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub damage_class: DamageClass,
}

/// A co-registered (or deliberately misregistered) pre/post pair.
///
/// Annotations and `support` live in the pre-image frame; the two rasters
/// hold exactly the pixels of `support`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub pre: Raster,
    pub post: Raster,
    pub annotations: Vec<BoxAnnotation>,
    pub applied_shift: (i64, i64),
    pub support: Rect,
}

impl ScenePair {
    /// An aligned pair covering the whole pre frame.
    pub fn aligned(id: impl Into<String>, pre: Raster, post: Raster, annotations: Vec<BoxAnnotation>) -> Result<Self> {
        if pre.width() != post.width() || pre.height() != post.height() {
            return Err(Error::Input(format!(
                "pre is {}x{} but post is {}x{}",
                pre.width(),
                pre.height(),
                post.width(),
                post.height()
            )));
        }
        let support = pre.frame();
        for a in &annotations {
            if !a.bbox.is_valid() {
                return Err(Error::Input(format!("degenerate annotation box {:?}", a.bbox)));
            }
        }
        Ok(Self { id: id.into(), pre, post, annotations, applied_shift: (0, 0), support })
    }

    /// Annotations translated into the local pixel frame of the rasters.
    pub fn local_annotations(&self) -> Vec<BoxAnnotation> {
        let (ox, oy) = (self.support.x as f64, self.support.y as f64);
        self.annotations
            .iter()
            .map(|a| BoxAnnotation { bbox: a.bbox.translate(-ox, -oy), damage_class: a.damage_class })
            .collect()
    }
}

/// Region of the pre frame still covered by a post image displaced by `(dx, dy)`.
pub fn shifted_support(frame: Rect, dx: i64, dy: i64) -> Option<Rect> {
    frame.intersect(&Rect::new(frame.x + dx, frame.y + dy, frame.width, frame.height))
}

/// Displaces the post image by `(dx, dy)` and crops both images to `region`,
/// which must lie inside the shifted intersection. Boxes not fully inside
/// `region` are dropped.
pub fn shift_and_crop(pair: &ScenePair, dx: i64, dy: i64, region: Rect) -> Result<ScenePair> {
    if pair.applied_shift != (0, 0) || pair.support != pair.pre.frame() {
        return Err(Error::Protocol(format!("pair {} is already shifted or cropped", pair.id)));
    }
    let inter = shifted_support(pair.support, dx, dy)
        .ok_or_else(|| Error::Protocol(format!("shift ({dx}, {dy}) leaves no overlap")))?;
    if inter.intersect(&region) != Some(region) {
        return Err(Error::Protocol(format!("region {region:?} exceeds the overlap {inter:?} for shift ({dx}, {dy})")));
    }
    let pre = pair.pre.crop_in_frame(region, 0, 0)?;
    let post = pair.post.crop_in_frame(region, dx, dy)?;
    let annotations = pair.annotations.iter().filter(|a| region.contains_box(&a.bbox)).copied().collect();
    Ok(ScenePair { id: pair.id.clone(), pre, post, annotations, applied_shift: (dx, dy), support: region })
}

/// Applies a shift to the post image and keeps the full intersection.
pub fn apply_shift(pair: &ScenePair, dx: i64, dy: i64) -> Result<ScenePair> {
    let region = shifted_support(pair.support, dx, dy)
        .ok_or_else(|| Error::Protocol(format!("shift ({dx}, {dy}) leaves no overlap")))?;
    shift_and_crop(pair, dx, dy, region)
}

/// Samples a random post-image displacement, each axis uniform in
/// `[0, max_shift]` with an independent sign.
pub fn sample_shift(rng: &mut impl Rng, max_shift: u32) -> (i64, i64) {
    let mut axis = || {
        let m = rng.gen_range(0..=max_shift) as i64;
        if rng.gen::<bool>() {
            -m
        } else {
            m
        }
    };
    let dx = axis();
    let dy = axis();
    (dx, dy)
}

pub fn shift_augment(pair: &ScenePair, rng: &mut impl Rng, max_shift: u32) -> Result<ScenePair> {
    let min_side = pair.support.width.min(pair.support.height);
    if max_shift as usize >= min_side {
        return Err(config_err!("max_shift {max_shift} must be below the smaller image side {min_side}"));
    }
    let (dx, dy) = sample_shift(rng, max_shift);
    apply_shift(pair, dx, dy)
}

/// Unit direction of a test-time displacement, components in {-1, 0, 1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 2]", into = "[i64; 2]")]
pub struct Direction {
    pub sx: i64,
    pub sy: i64,
}

impl Direction {
    pub fn new(sx: i64, sy: i64) -> Result<Self> {
        if !(-1..=1).contains(&sx) || !(-1..=1).contains(&sy) || (sx == 0 && sy == 0) {
            return Err(config_err!("direction ({sx}, {sy}) must have components in {{-1, 0, 1}} and not be zero"));
        }
        Ok(Self { sx, sy })
    }

    pub fn diagonals() -> Vec<Direction> {
        [(1, 1), (1, -1), (-1, 1), (-1, -1)].iter().map(|&(x, y)| Direction { sx: x, sy: y }).collect()
    }

    pub fn axis_aligned() -> Vec<Direction> {
        [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().map(|&(x, y)| Direction { sx: x, sy: y }).collect()
    }

    pub fn displacement(&self, magnitude: u32) -> (i64, i64) {
        (self.sx * magnitude as i64, self.sy * magnitude as i64)
    }
}

impl TryFrom<[i64; 2]> for Direction {
    type Error = Error;
    fn try_from(v: [i64; 2]) -> Result<Self> {
        Direction::new(v[0], v[1])
    }
}

impl From<Direction> for [i64; 2] {
    fn from(d: Direction) -> Self {
        [d.sx, d.sy]
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:+},{:+})", self.sx, self.sy)
    }
}

/// How the fixed evaluation support is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// One support per direction: the overlap at the largest magnitude.
    #[default]
    PerDirection,
    /// One support shared by all directions: the intersection of all of them.
    Common,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub magnitudes: Vec<u32>,
    #[serde(default = "Direction::diagonals")]
    pub directions: Vec<Direction>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub support: SupportMode,
}

impl SweepSpec {
    pub fn new(magnitudes: Vec<u32>) -> Self {
        Self { magnitudes, directions: Direction::diagonals(), seed: 0, support: SupportMode::PerDirection }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.is_empty() {
            return Err(config_err!("sweep needs at least one magnitude"));
        }
        if self.magnitudes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("sweep magnitudes must be strictly increasing, got {:?}", self.magnitudes));
        }
        if self.directions.is_empty() {
            return Err(config_err!("sweep needs at least one direction"));
        }
        Ok(())
    }

    pub fn max_magnitude(&self) -> u32 {
        self.magnitudes.iter().copied().max().unwrap_or(0)
    }
}

/// Frozen test-time misregistration protocol over a set of aligned pairs.
///
/// For each direction the pixel region and the surviving annotation set are
/// computed once from the largest magnitude and then reused for every
/// magnitude, including zero.
#[derive(Clone, Debug)]
pub struct FixedSupportSet {
    pub spec: SweepSpec,
    frame: Rect,
    supports: Vec<Rect>,
}

impl FixedSupportSet {
    pub fn new(pairs: &[ScenePair], spec: SweepSpec) -> Result<Self> {
        spec.validate()?;
        let first = pairs.first().ok_or_else(|| Error::Input("no pairs to evaluate".into()))?;
        let frame = first.pre.frame();
        for p in pairs {
            if p.pre.frame() != frame || p.support != frame || p.applied_shift != (0, 0) {
                return Err(Error::Input(format!("pair {} is not an aligned {}x{} pair", p.id, frame.width, frame.height)));
            }
        }
        let max = spec.max_magnitude();
        if max as usize >= frame.width.min(frame.height) {
            return Err(config_err!("max shift {max} must be below the image size {}x{}", frame.width, frame.height));
        }
        let mut supports: Vec<Rect> = spec
            .directions
            .iter()
            .map(|d| {
                let (dx, dy) = d.displacement(max);
                shifted_support(frame, dx, dy).expect("shift below image size overlaps")
            })
            .collect();
        if spec.support == SupportMode::Common {
            let common = supports
                .iter()
                .try_fold(frame, |acc, r| acc.intersect(r))
                .ok_or_else(|| config_err!("directions {:?} share no common support at shift {max}", spec.directions))?;
            supports.iter_mut().for_each(|s| *s = common);
        }
        Ok(Self { spec, frame, supports })
    }

    pub fn frame(&self) -> Rect {
        self.frame
    }

    pub fn support(&self, direction_index: usize) -> Rect {
        self.supports[direction_index]
    }

    /// The evaluation pair for one (magnitude, direction) cell of the sweep.
    pub fn case(&self, pair: &ScenePair, magnitude: u32, direction_index: usize) -> Result<ScenePair> {
        let (dx, dy) = self.spec.directions[direction_index].displacement(magnitude);
        shift_and_crop(pair, dx, dy, self.supports[direction_index])
    }

    /// Ground truth shared by every magnitude in one direction.
    pub fn annotations(&self, pair: &ScenePair, direction_index: usize) -> Vec<BoxAnnotation> {
        let s = self.supports[direction_index];
        pair.annotations.iter().filter(|a| s.contains_box(&a.bbox)).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(size: usize, boxes: &[(f64, f64, f64, f64)]) -> ScenePair {
        let mut pre = Raster::new(size, size);
        let mut post = Raster::new(size, size);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    pre.set(c, x, y, ((x * 3 + y * 7 + c) % 251) as u8);
                    post.set(c, x, y, ((x * 5 + y * 11 + c) % 241) as u8);
                }
            }
        }
        let ann = boxes
            .iter()
            .map(|&(a, b, c, d)| BoxAnnotation { bbox: BBox::new(a, b, c, d), damage_class: DamageClass::Minor })
            .collect();
        ScenePair::aligned("p", pre, post, ann).unwrap()
    }

    #[test]
    fn zero_shift_is_identity() {
        let p = pair(64, &[(1.0, 1.0, 10.0, 10.0), (50.0, 50.0, 64.0, 64.0)]);
        assert_eq!(apply_shift(&p, 0, 0).unwrap(), p);
    }

    #[test]
    fn shift_150_on_1024() {
        let p = pair(1024, &[(800.0, 800.0, 900.0, 900.0), (10.0, 10.0, 20.0, 20.0)]);
        // post moved by -150 on both axes: the overlap is [0, 874)^2
        let s = apply_shift(&p, -150, -150).unwrap();
        assert_eq!(s.support, Rect::new(0, 0, 874, 874));
        assert_eq!((s.pre.width(), s.post.height()), (874, 874));
        assert_eq!(s.annotations.len(), 1);
        assert_eq!(s.annotations[0].bbox.x_min, 10.0);
        let s = apply_shift(&p, 150, 150).unwrap();
        assert_eq!(s.support, Rect::new(150, 150, 874, 874));
    }

    #[test]
    fn post_pixels_follow_the_displacement() {
        let p = pair(32, &[]);
        let s = apply_shift(&p, 3, -2).unwrap();
        // post pixel at pre coordinate (x, y) came from original (x - dx, y - dy)
        for (x, y) in [(3usize, 0usize), (10, 5), (31, 29)] {
            let lx = x - s.support.x as usize;
            let ly = y - s.support.y as usize;
            assert_eq!(s.post.get(1, lx, ly), p.post.get(1, x - 3, y + 2));
            assert_eq!(s.pre.get(1, lx, ly), p.pre.get(1, x, y));
        }
    }

    #[test]
    fn max_shift_must_be_below_image_size() {
        let p = pair(32, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(shift_augment(&p, &mut rng, 32), Err(Error::Config(_))));
        assert!(shift_augment(&p, &mut rng, 31).is_ok());
    }

    #[test]
    fn fixed_support_is_shared_across_magnitudes() {
        let p = pair(1024, &[(10.0, 10.0, 30.0, 30.0), (950.0, 950.0, 1000.0, 1000.0), (500.0, 500.0, 520.0, 520.0)]);
        let set = FixedSupportSet::new(std::slice::from_ref(&p), SweepSpec::new(vec![0, 50, 100])).unwrap();
        assert_eq!(set.spec.directions.len(), 4);
        for d in 0..4 {
            let s = set.support(d);
            assert_eq!((s.width, s.height), (924, 924));
            let c0 = set.case(&p, 0, d).unwrap();
            let c100 = set.case(&p, 100, d).unwrap();
            assert_eq!(c0.support, c100.support);
            assert_eq!(c0.annotations, c100.annotations);
            assert_eq!(c0.annotations, set.annotations(&p, d));
        }
        // the (+1, +1) support starts at 100 and drops the box near the origin
        assert_eq!(set.support(0), Rect::new(100, 100, 924, 924));
        assert_eq!(set.case(&p, 50, 0).unwrap().annotations.len(), 2);
    }

    #[test]
    fn common_support_intersects_directions() {
        let p = pair(256, &[]);
        let mut spec = SweepSpec::new(vec![0, 16]);
        spec.support = SupportMode::Common;
        let set = FixedSupportSet::new(&[p], spec).unwrap();
        assert_eq!(set.support(2), Rect::new(16, 16, 224, 224));
    }

    #[test]
    fn sweep_spec_validation() {
        assert!(SweepSpec::new(vec![]).validate().is_err());
        assert!(SweepSpec::new(vec![10, 5]).validate().is_err());
        let mut s = SweepSpec::new(vec![0]);
        s.directions.clear();
        assert!(s.validate().is_err());
        let p = pair(64, &[]);
        assert!(FixedSupportSet::new(&[p], SweepSpec::new(vec![0, 64])).is_err());
        let parsed: SweepSpec = serde_json::from_str(r#"{"magnitudes":[0,8],"directions":[[1,0],[-1,0]]}"#).unwrap();
        assert_eq!(parsed.directions[1], Direction::new(-1, 0).unwrap());
        assert!(serde_json::from_str::<SweepSpec>(r#"{"magnitudes":[0],"directions":[[2,0]]}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn augmentation_is_deterministic_and_annotations_fit(seed in any::<u64>(), max in 0u32..40) {
            let p = pair(48, &[(2.0, 2.0, 12.0, 12.0), (20.0, 30.0, 40.0, 46.0), (30.0, 5.0, 47.0, 15.0)]);
            let a = shift_augment(&p, &mut ChaCha8Rng::seed_from_u64(seed), max).unwrap();
            let b = shift_augment(&p, &mut ChaCha8Rng::seed_from_u64(seed), max).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.applied_shift.0.unsigned_abs() <= max as u64 && a.applied_shift.1.unsigned_abs() <= max as u64);
            prop_assert_eq!(a.pre.width(), 48 - a.applied_shift.0.unsigned_abs() as usize);
            for ann in &a.annotations {
                prop_assert!(a.support.contains_box(&ann.bbox));
            }
        }

        #[test]
        fn support_area_shrinks_with_max_shift(m1 in 0u32..60, m2 in 0u32..60) {
            let frame = Rect::new(0, 0, 64, 64);
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            for d in Direction::diagonals().into_iter().chain(Direction::axis_aligned()) {
                let (ax, ay) = d.displacement(lo);
                let (bx, by) = d.displacement(hi);
                let a = shifted_support(frame, ax, ay).unwrap().area();
                let b = shifted_support(frame, bx, by).unwrap().area();
                prop_assert!(b <= a);
            }
        }
    }
}
