//! Ground-side latent compression, int8 quantization, the uplink packet
//! wire format, and latent size accounting.

use rand::Rng;

use crate::encoder::{FeatureMap, Level, Pyramid};
use crate::error::{config_err, Error, Result};
use crate::hashing::ConfigHash;
use crate::layers::Conv;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Per-level 1x1 compressor (`C -> C/r`) and expander (`C/r -> C`).
#[derive(Clone, Debug)]
pub struct CompressionParams {
    pub ratio: usize,
    pub drop_d3: bool,
    compressors: Vec<(Level, Conv)>,
    expanders: Vec<(Level, Conv)>,
}

/// Latent width of a `c`-channel level under ratio `r`. A ratio above the
/// level width leaves a single channel.
pub fn latent_channels(c: usize, ratio: usize) -> usize {
    (c / ratio).max(1)
}

fn check_divisible(widths: [usize; 3], ratio: usize, drop_d3: bool) -> Result<()> {
    if ratio == 0 {
        return Err(config_err!("compression ratio must be positive"));
    }
    for &level in Level::retained(drop_d3) {
        let c = widths[level.index()];
        if c >= ratio && c % ratio != 0 {
            return Err(config_err!("{c} channels at {level:?} not divisible by compression ratio {ratio}"));
        }
    }
    Ok(())
}

/// `k` random orthonormal rows of length `c` (row-major), `k <= c`.
///
/// The compressor starts as these rows and the expander as their transpose,
/// so the untrained codec is an orthogonal projection and the expanded pre
/// features stay comparable with the post features.
fn orthonormal_rows(k: usize, c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, a)| *x -= d * a);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

impl CompressionParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, widths: [usize; 3], ratio: usize, drop_d3: bool, rng: &mut impl Rng) -> Result<Self> {
        check_divisible(widths, ratio, drop_d3)?;
        let mut compressors = Vec::new();
        let mut expanders = Vec::new();
        for &level in Level::retained(drop_d3) {
            let c = widths[level.index()];
            let k = latent_channels(c, ratio);
            let rows = orthonormal_rows(k, c, rng);
            let mut make = |role: &str, shape: [usize; 4], data: Vec<f64>| {
                let name = format!("codec.{level:?}.{role}");
                let weight = store.add(format!("{name}.weight"), Tensor::new(shape, data.into_iter().map(T::of).collect()).expect("sized"));
                let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([shape[0]])));
                Conv { weight, bias, stride: 1, padding: 0 }
            };
            let transposed = (0..c * k).map(|i| rows[(i % k) * c + i / k]).collect();
            compressors.push((level, make("compress", [k, c, 1, 1], rows)));
            expanders.push((level, make("expand", [c, k, 1, 1], transposed)));
        }
        Ok(Self { ratio, drop_d3, compressors, expanders })
    }

    /// Ratio-1 codec whose compressor and expander are identity maps.
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, widths: [usize; 3]) -> Self {
        let mut compressors = Vec::new();
        let mut expanders = Vec::new();
        for level in Level::ALL {
            let c = widths[level.index()];
            let mut make = |role: &str| {
                let name = format!("codec.{level:?}.{role}");
                let weight = store.add(format!("{name}.weight"), Tensor::identity(c).reshape([c, c, 1, 1]).expect("square"));
                let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([c])));
                Conv { weight, bias, stride: 1, padding: 0 }
            };
            compressors.push((level, make("compress")));
            expanders.push((level, make("expand")));
        }
        Self { ratio: 1, drop_d3: false, compressors, expanders }
    }

    pub fn levels(&self) -> Vec<Level> {
        self.compressors.iter().map(|c| c.0).collect()
    }

    fn layer(layers: &[(Level, Conv)], level: Level) -> Result<&Conv> {
        layers
            .iter()
            .find(|l| l.0 == level)
            .map(|l| &l.1)
            .ok_or_else(|| config_err!("codec has no {level:?} projection"))
    }

    /// Compresses every retained level; dropped levels are omitted.
    pub fn compress<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pyramid: &[(Level, Var)]) -> Result<Vec<(Level, Var)>> {
        self.levels()
            .into_iter()
            .map(|level| {
                let &(_, v) = pyramid.iter().find(|p| p.0 == level).ok_or_else(|| config_err!("pyramid lacks {level:?}"))?;
                Ok((level, Self::layer(&self.compressors, level)?.forward(g, store, v)?))
            })
            .collect()
    }

    pub fn expand<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, latent: &[(Level, Var)]) -> Result<Vec<(Level, Var)>> {
        latent
            .iter()
            .map(|&(level, v)| Ok((level, Self::layer(&self.expanders, level)?.forward(g, store, v)?)))
            .collect()
    }

    pub fn compress_values<T: Scalar>(&self, store: &ParamStore<T>, pyramid: &Pyramid<T>) -> Result<Pyramid<T>> {
        let maps = self
            .levels()
            .into_iter()
            .map(|level| {
                let m = pyramid.get(level).ok_or_else(|| config_err!("pyramid lacks {level:?}"))?;
                Ok(FeatureMap { level, data: Self::layer(&self.compressors, level)?.apply(store, &m.data)? })
            })
            .collect::<Result<_>>()?;
        Ok(Pyramid { maps })
    }

    pub fn expand_values<T: Scalar>(&self, store: &ParamStore<T>, latent: &Pyramid<T>) -> Result<Pyramid<T>> {
        let maps = latent
            .maps
            .iter()
            .map(|m| Ok(FeatureMap { level: m.level, data: Self::layer(&self.expanders, m.level)?.apply(store, &m.data)? }))
            .collect::<Result<_>>()?;
        Ok(Pyramid { maps })
    }
}

/// Symmetric int8 quantization of one map.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub payload: Vec<i8>,
    pub scale: f32,
}

/// `scale = max|v| / 127` (1 for an all-zero map), `q = clamp(round(v / scale), -127, 127)`.
pub fn quantize<T: Scalar>(map: &Tensor<T>) -> Result<Quantized> {
    map.ensure_finite("quantizer input")?;
    let max_abs = map.max_abs().to_f64_lossy();
    let scale = if max_abs == 0.0 { 1.0f32 } else { (max_abs / 127.0) as f32 };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Numeric(format!("degenerate quantization scale {scale}")));
    }
    let s = scale as f64;
    let payload = map
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy() / s).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(Quantized { payload, scale })
}

pub fn dequantize<T: Scalar>(q: &Quantized, shape: &[usize]) -> Result<Tensor<T>> {
    let s = q.scale as f64;
    Tensor::new(shape.to_vec(), q.payload.iter().map(|&v| T::of(v as f64 * s)).collect())
}

/// Quantize-dequantize roundtrip of a map.
pub fn fake_quantize<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    dequantize(&quantize(map)?, map.shape())
}

/// Exact latent footprint in bytes (one byte per int8 element) for an input
/// of `height x width` pixels.
pub fn latent_size_bytes(widths: [usize; 3], ratio: Option<usize>, drop_d3: bool, height: usize, width: usize) -> u64 {
    Level::retained(drop_d3)
        .iter()
        .map(|&level| {
            let c = latent_channels(widths[level.index()], ratio.unwrap_or(1));
            (c * (height / level.stride()) * (width / level.stride())) as u64
        })
        .sum()
}

/// Raw 8-bit image footprint.
pub fn image_size_bytes(height: usize, width: usize, channels: usize) -> u64 {
    (height * width * channels) as u64
}

pub const MAGIC: &[u8; 4] = b"OBDA";
/// int8 payloads.
pub const VERSION_INT8: u8 = 1;
/// Lossless little-endian f32 payloads, used when quantization is disabled.
pub const VERSION_F32: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Int8(Vec<i8>),
    Float32(Vec<f32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Int8(v) => v.len(),
            Payload::Float32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentLevel {
    pub level: Level,
    pub channels: u16,
    pub height: u16,
    pub width: u16,
    pub quant_scale: f32,
    pub payload: Payload,
}

impl LatentLevel {
    fn numel(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let shape = [self.channels as usize, self.height as usize, self.width as usize];
        match &self.payload {
            Payload::Int8(p) => dequantize(&Quantized { payload: p.clone(), scale: self.quant_scale }, &shape),
            Payload::Float32(p) => Tensor::new(shape, p.iter().map(|&v| T::of(v as f64)).collect()),
        }
    }
}

/// The uplinked pre-event artifact: a quantized latent pyramid for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPacket {
    pub tile_id: String,
    /// Tile origin `(x, y)` in pixels of the scene frame.
    pub geo_tag: (i32, i32),
    pub levels: Vec<LatentLevel>,
    pub config_hash: ConfigHash,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!("packet truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl LatentPacket {
    /// Packs a latent pyramid, quantizing to int8 unless `quantized` is false.
    pub fn seal<T: Scalar>(tile_id: &str, geo_tag: (i32, i32), config_hash: ConfigHash, latent: &Pyramid<T>, quantized: bool) -> Result<Self> {
        let mut levels = Vec::new();
        for m in &latent.maps {
            let (c, h, w) = m.data.dims3()?;
            let narrow = |v: usize| u16::try_from(v).map_err(|_| config_err!("latent extent {v} exceeds u16"));
            let (payload, quant_scale) = if quantized {
                let q = quantize(&m.data)?;
                (Payload::Int8(q.payload), q.scale)
            } else {
                m.data.ensure_finite("latent")?;
                (Payload::Float32(m.data.data().iter().map(|v| v.to_f64_lossy() as f32).collect()), 1.0)
            };
            levels.push(LatentLevel { level: m.level, channels: narrow(c)?, height: narrow(h)?, width: narrow(w)?, quant_scale, payload });
        }
        let packet = Self { tile_id: tile_id.to_string(), geo_tag, levels, config_hash };
        packet.validate()?;
        Ok(packet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.len() > 3 {
            return Err(config_err!("packet must carry 1 to 3 levels, has {}", self.levels.len()));
        }
        let int8 = matches!(self.levels[0].payload, Payload::Int8(_));
        for pair in self.levels.windows(2) {
            if pair[0].level >= pair[1].level {
                return Err(config_err!("packet levels must be distinct and ordered fine to coarse"));
            }
        }
        for l in &self.levels {
            if l.payload.len() != l.numel() {
                return Err(config_err!("{:?} payload has {} values, expected {}", l.level, l.payload.len(), l.numel()));
            }
            if matches!(l.payload, Payload::Int8(_)) != int8 {
                return Err(config_err!("packet mixes int8 and f32 payloads"));
            }
            if !(l.quant_scale > 0.0 && l.quant_scale.is_finite()) {
                return Err(config_err!("{:?} has invalid quantization scale {}", l.level, l.quant_scale));
            }
        }
        if self.tile_id.len() > u16::MAX as usize {
            return Err(config_err!("tile id longer than {} bytes", u16::MAX));
        }
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.levels.first().map(|l| &l.payload), Some(Payload::Int8(_)))
    }

    /// Payload bytes, excluding headers.
    pub fn payload_bytes(&self) -> usize {
        self.levels
            .iter()
            .map(|l| match &l.payload {
                Payload::Int8(p) => p.len(),
                Payload::Float32(p) => 4 * p.len(),
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(64 + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.push(if self.is_quantized() { VERSION_INT8 } else { VERSION_F32 });
        out.extend_from_slice(&self.config_hash.0);
        out.extend_from_slice(&(self.tile_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.tile_id.as_bytes());
        out.extend_from_slice(&self.geo_tag.0.to_le_bytes());
        out.extend_from_slice(&self.geo_tag.1.to_le_bytes());
        out.push(self.levels.len() as u8);
        for l in &self.levels {
            out.push(l.level.tag());
            out.extend_from_slice(&l.channels.to_le_bytes());
            out.extend_from_slice(&l.height.to_le_bytes());
            out.extend_from_slice(&l.width.to_le_bytes());
            out.extend_from_slice(&l.quant_scale.to_le_bytes());
            match &l.payload {
                Payload::Int8(p) => out.extend(p.iter().map(|&v| v as u8)),
                Payload::Float32(p) => p.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 + 8 + 4 {
            return Err(Error::Integrity("packet too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Integrity("bad packet magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!("packet CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u8()?;
        if version != VERSION_INT8 && version != VERSION_F32 {
            return Err(Error::Integrity(format!("unsupported packet version {version}")));
        }
        let config_hash = ConfigHash(r.take(8)?.try_into().expect("8 bytes"));
        let id_len = r.u16()? as usize;
        let tile_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Integrity("tile id is not UTF-8".into()))?
            .to_string();
        let geo_tag = (r.i32()?, r.i32()?);
        let count = r.u8()?;
        let mut levels = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = r.u8()?;
            let level = Level::from_tag(tag).ok_or_else(|| Error::Integrity(format!("unknown level tag {tag}")))?;
            let (channels, height, width) = (r.u16()?, r.u16()?, r.u16()?);
            let quant_scale = r.f32()?;
            let n = channels as usize * height as usize * width as usize;
            let payload = if version == VERSION_INT8 {
                Payload::Int8(r.take(n)?.iter().map(|&b| b as i8).collect())
            } else {
                Payload::Float32(r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            };
            levels.push(LatentLevel { level, channels, height, width, quant_scale, payload });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes after packet body", body.len() - r.pos)));
        }
        let packet = Self { tile_id, geo_tag, levels, config_hash };
        packet.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(packet)
    }

    /// Rejects packets produced under a different model configuration.
    pub fn check_compatible(&self, expected: ConfigHash) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Integrity(format!(
                "packet config hash {} does not match model {}",
                self.config_hash, expected
            )));
        }
        Ok(())
    }

    /// Dequantized latent pyramid.
    pub fn to_pyramid<T: Scalar>(&self) -> Result<Pyramid<T>> {
        let maps = self.levels.iter().map(|l| Ok(FeatureMap { level: l.level, data: l.to_tensor()? })).collect::<Result<_>>()?;
        Ok(Pyramid { maps })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const REFERENCE: [usize; 3] = [128, 256, 512];

    #[test]
    fn compressed_widths_follow_ratio() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let widths_of = |store: &ParamStore<f32>, p: &CompressionParams| -> Vec<usize> {
            p.compressors.iter().map(|(_, c)| c.out_channels(store)).collect()
        };
        let r8 = CompressionParams::new(&mut store, REFERENCE, 8, false, &mut rng).unwrap();
        assert_eq!(widths_of(&store, &r8), vec![16, 32, 64]);
        let r64 = CompressionParams::new(&mut ParamStore::<f32>::new(), REFERENCE, 64, false, &mut rng).unwrap();
        assert_eq!(r64.levels(), Level::ALL.to_vec());
        let mut s2 = ParamStore::<f32>::new();
        let r64 = CompressionParams::new(&mut s2, REFERENCE, 64, true, &mut rng).unwrap();
        assert_eq!(r64.levels(), vec![Level::D4, Level::D5]);
        assert_eq!(widths_of(&s2, &r64), vec![4, 8]);
        let mut s3 = ParamStore::<f32>::new();
        let toy64 = CompressionParams::new(&mut s3, [16, 32, 64], 64, false, &mut rng).unwrap();
        assert_eq!(widths_of(&s3, &toy64), vec![1, 1, 1]);
        assert!(CompressionParams::new(&mut ParamStore::<f32>::new(), [16, 48, 64], 32, false, &mut rng).is_err());
    }

    #[test]
    fn latent_sizes() {
        assert_eq!(latent_size_bytes(REFERENCE, None, false, 1024, 1024), 3_670_016);
        assert_eq!(latent_size_bytes(REFERENCE, Some(8), false, 1024, 1024), 458_752);
        assert_eq!(latent_size_bytes(REFERENCE, Some(64), false, 1024, 1024), 57_344);
        assert_eq!(latent_size_bytes(REFERENCE, Some(64), true, 1024, 1024), 24_576);
        assert_eq!(image_size_bytes(1024, 1024, 3), 3_145_728);
    }

    #[test]
    fn quantize_zero_map() {
        let z = Tensor::<f32>::zeros([2, 3, 3]);
        let q = quantize(&z).unwrap();
        assert_eq!(q.scale, 1.0);
        assert!(q.payload.iter().all(|&v| v == 0));
        assert_eq!(dequantize::<f32>(&q, z.shape()).unwrap(), z);
    }

    #[test]
    fn quantize_hand_example() {
        let t = Tensor::<f32>::new([3], vec![-1.27, 0.0, 1.27]).unwrap();
        let q = quantize(&t).unwrap();
        assert_eq!(q.payload, vec![-127, 0, 127]);
        assert_eq!(q.scale, 0.01f32);
        assert_eq!(dequantize::<f32>(&q, t.shape()).unwrap(), t);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let t = Tensor::<f32>::new([2], vec![1.0, f32::INFINITY]).unwrap();
        assert!(matches!(quantize(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn identity_codec_roundtrip() {
        let mut store = ParamStore::<f64>::new();
        let codec = CompressionParams::identity(&mut store, [4, 8, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pyr = Pyramid {
            maps: Level::ALL
                .iter()
                .map(|&l| FeatureMap { level: l, data: Tensor::uniform([4 << l.index(), 2, 2], 2.0, &mut rng) })
                .collect(),
        };
        let back = codec.expand_values(&store, &codec.compress_values(&store, &pyr).unwrap()).unwrap();
        assert_eq!(back, pyr);
    }

    fn sample_packet(quantized: bool) -> LatentPacket {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pyr = Pyramid::<f32> {
            maps: vec![
                FeatureMap { level: Level::D4, data: Tensor::uniform([4, 4, 4], 3.0, &mut rng) },
                FeatureMap { level: Level::D5, data: Tensor::uniform([8, 2, 2], 3.0, &mut rng) },
            ],
        };
        LatentPacket::seal("tile-7/ä", (-120, 4096), ConfigHash([1, 2, 3, 4, 5, 6, 7, 8]), &pyr, quantized).unwrap()
    }

    #[test]
    fn wire_layout_is_bit_exact() {
        let p = sample_packet(true);
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"OBDA");
        assert_eq!(bytes[4], VERSION_INT8);
        assert_eq!(&bytes[5..13], &[1, 2, 3, 4, 5, 6, 7, 8]);
        let id_len = u16::from_le_bytes([bytes[13], bytes[14]]) as usize;
        assert_eq!(&bytes[15..15 + id_len], "tile-7/ä".as_bytes());
        let mut pos = 15 + id_len;
        assert_eq!(i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()), -120);
        assert_eq!(i32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()), 4096);
        pos += 8;
        assert_eq!(bytes[pos], 2);
        assert_eq!(bytes[pos + 1], 4);
        assert_eq!(u16::from_le_bytes([bytes[pos + 2], bytes[pos + 3]]), 4);
        let header = 15 + id_len + 8 + 1;
        let level_headers = 2 * (1 + 2 + 2 + 2 + 4);
        assert_eq!(bytes.len(), header + level_headers + 64 + 32 + 4);
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
    }

    #[test]
    fn float_packets_are_lossless() {
        let p = sample_packet(false);
        let back = LatentPacket::from_bytes(&p.to_bytes().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(!back.is_quantized());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample_packet(true).to_bytes().unwrap();
        for i in [0, 4, 20, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(matches!(LatentPacket::from_bytes(&bad), Err(Error::Integrity(_))), "byte {i}");
        }
        assert!(LatentPacket::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let p = sample_packet(true);
        assert!(p.check_compatible(p.config_hash).is_ok());
        assert!(matches!(p.check_compatible(ConfigHash([0; 8])), Err(Error::Integrity(_))));
    }

    proptest! {
        #[test]
        fn quantization_error_within_half_step(values in proptest::collection::vec(-50.0f64..50.0, 1..200)) {
            let t = Tensor::new([values.len()], values).unwrap();
            let q = quantize(&t).unwrap();
            let back = dequantize::<f64>(&q, t.shape()).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= q.scale as f64 / 2.0 + 1e-7);
            }
        }

        #[test]
        fn packet_roundtrip_is_bit_exact(
            seed in 0u64..1000,
            id in "[a-z0-9_-]{0,24}",
            x in any::<i32>(),
            y in any::<i32>(),
            drop in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps = Level::retained(drop)
                .iter()
                .map(|&l| FeatureMap { level: l, data: Tensor::<f32>::uniform([2, 8 >> l.index(), 8 >> l.index()], 10.0, &mut rng) })
                .collect();
            let p = LatentPacket::seal(&id, (x, y), ConfigHash([seed as u8; 8]), &Pyramid { maps }, true).unwrap();
            let bytes = p.to_bytes().unwrap();
            let back = LatentPacket::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
