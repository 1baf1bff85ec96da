//! Uplink/downlink and on-board time estimates for a mapping scenario,
//! computed in exact rational arithmetic.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{CheckedDiv, CheckedMul, ToPrimitive, Zero};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{image_size_bytes, latent_size_bytes};
use crate::error::{config_err, Error, Result};

/// Exact rational scalar.
pub type Exact = Ratio<i128>;

/// Bytes per downlinked detection: 8 B tile id hash, four f32 box
/// coordinates, one class byte.
pub const DETECTION_RECORD_BYTES: u64 = 25;

/// A non-negative decimal read exactly from JSON (number or string) or the
/// command line. `0.8` is 4/5, not the nearest binary float.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decimal(pub Exact);

impl FromStr for Decimal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err!("not a decimal number: {s:?}");
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let (n, d) = (n.parse::<i128>().map_err(|_| bad())?, d.parse::<i128>().map_err(|_| bad())?);
            return if d == 0 { Err(bad()) } else { Ok(Decimal(Exact::new(n, d))) };
        }
        let (mantissa, exp) = match t.find(['e', 'E']) {
            Some(i) => (&t[..i], t[i + 1..].parse::<i32>().map_err(|_| bad())?),
            None => (t, 0),
        };
        let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
        let neg = int.starts_with('-');
        let int = int.trim_start_matches(['-', '+']);
        if int.is_empty() && frac.is_empty() || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let digits: i128 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        let scale = exp - frac.len() as i32;
        let pow = 10i128.checked_pow(scale.unsigned_abs()).ok_or_else(bad)?;
        let mut v = if scale >= 0 { Exact::from_integer(digits.checked_mul(pow).ok_or_else(bad)?) } else { Exact::new(digits, pow) };
        if neg {
            v = -v;
        }
        Ok(Decimal(v))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Decimal;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a decimal number or string")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Decimal, E> {
                Ok(Decimal(Exact::from_integer(v as i128)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Decimal, E> {
                Ok(Decimal(Exact::from_integer(v as i128)))
            }
            // shortest round-trip text of the float, so 0.8 reads as 4/5
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Decimal, E> {
                format!("{v:?}").parse().map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Decimal, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

impl Decimal {
    pub fn integer(v: i128) -> Self {
        Decimal(Exact::from_integer(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetScenario {
    pub area_km2: Decimal,
    pub gsd_m_per_px: Decimal,
    pub tile_size: usize,
    pub bytes_per_px: u64,
    /// MPixels per second.
    pub throughput_mpx_s: Decimal,
    pub compression_ratio: Option<usize>,
    pub drop_d3: bool,
    pub encoder_channels: [usize; 3],
    /// Detections to downlink; the downlink estimate is omitted when unset.
    pub detections: Option<u64>,
}

impl Default for BudgetScenario {
    fn default() -> Self {
        Self {
            area_km2: Decimal::integer(100),
            gsd_m_per_px: Decimal(Exact::new(4, 5)),
            tile_size: 1024,
            bytes_per_px: 3,
            throughput_mpx_s: Decimal::integer(100),
            compression_ratio: Some(64),
            drop_d3: false,
            encoder_channels: [128, 256, 512],
            detections: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub scenario: BudgetScenario,
    /// Exact pixel count as a reduced fraction.
    pub pixels: Decimal,
    pub tiles: u64,
    pub raw_uplink_bytes: Decimal,
    pub latent_uplink_bytes: u64,
    pub latent_bytes_per_tile: u64,
    pub raw_bytes_per_tile: u64,
    pub inference_seconds: Decimal,
    pub downlink_bytes: Option<u64>,
    /// Rounded views for display.
    pub raw_uplink_mb: f64,
    pub latent_uplink_mb: f64,
    pub inference_seconds_approx: f64,
}

fn overflow() -> Error {
    Error::Numeric("budget arithmetic overflowed".into())
}

fn ceil_u64(v: Exact) -> Result<u64> {
    v.ceil().to_integer().to_u64().ok_or_else(overflow)
}

fn to_f64(v: Exact) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

pub fn compute_budget(scenario: &BudgetScenario) -> Result<BudgetReport> {
    let s = scenario;
    let pos = |d: &Decimal, name: &str| if d.0 > Exact::zero() { Ok(()) } else { Err(config_err!("{name} must be positive, got {d}")) };
    pos(&s.area_km2, "area_km2")?;
    pos(&s.gsd_m_per_px, "gsd_m_per_px")?;
    pos(&s.throughput_mpx_s, "throughput_mpx_s")?;
    if s.tile_size == 0 || s.tile_size % 32 != 0 {
        return Err(config_err!("tile_size must be a positive multiple of 32, got {}", s.tile_size));
    }
    if s.compression_ratio == Some(0) {
        return Err(config_err!("compression ratio must be positive"));
    }
    if s.drop_d3 && s.compression_ratio.is_none() {
        return Err(config_err!("drop_d3 requires a compression ratio"));
    }

    let million = Exact::from_integer(1_000_000);
    let gsd2 = s.gsd_m_per_px.0.checked_mul(&s.gsd_m_per_px.0).ok_or_else(overflow)?;
    let pixels = s.area_km2.0.checked_mul(&million).and_then(|v| v.checked_div(&gsd2)).ok_or_else(overflow)?;
    let raw = pixels.checked_mul(&Exact::from_integer(s.bytes_per_px as i128)).ok_or_else(overflow)?;
    let tile_px = Exact::from_integer((s.tile_size * s.tile_size) as i128);
    let tiles = ceil_u64(pixels.checked_div(&tile_px).ok_or_else(overflow)?)?;
    let per_tile = latent_size_bytes(s.encoder_channels, s.compression_ratio, s.drop_d3, s.tile_size, s.tile_size);
    let latent = tiles.checked_mul(per_tile).ok_or_else(overflow)?;
    let seconds = pixels.checked_div(&s.throughput_mpx_s.0.checked_mul(&million).ok_or_else(overflow)?).ok_or_else(overflow)?;
    let downlink = s.detections.map(|n| n.checked_mul(DETECTION_RECORD_BYTES).ok_or_else(overflow)).transpose()?;

    Ok(BudgetReport {
        scenario: s.clone(),
        pixels: Decimal(pixels),
        tiles,
        raw_uplink_bytes: Decimal(raw),
        latent_uplink_bytes: latent,
        latent_bytes_per_tile: per_tile,
        raw_bytes_per_tile: image_size_bytes(s.tile_size, s.tile_size, s.bytes_per_px as usize),
        inference_seconds: Decimal(seconds),
        downlink_bytes: downlink,
        raw_uplink_mb: to_f64(raw) / 1e6,
        latent_uplink_mb: latent as f64 / 1e6,
        inference_seconds_approx: to_f64(seconds),
    })
}
