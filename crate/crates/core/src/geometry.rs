use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Axis-aligned box in pixels, `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Smallest box enclosing all vertices.
    pub fn envelope(points: &[(f64, f64)]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Self::new(first.0, first.1, first.0, first.1);
        for &(x, y) in &points[1..] {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }
}

/// Integer pixel rectangle `[x, x + width) x [y, y + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: i64, y: i64, width: usize, height: usize) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.width as i64).min(other.x + other.width as i64);
        let y1 = (self.y + self.height as i64).min(other.y + other.height as i64);
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize))
    }

    /// Strict containment of a box.
    pub fn contains_box(&self, b: &BBox) -> bool {
        b.x_min >= self.x as f64
            && b.y_min >= self.y as f64
            && b.x_max <= (self.x + self.width as i64) as f64
            && b.y_max <= (self.y + self.height as i64) as f64
    }
}

/// Planar 8-bit RGB image, `(3, H, W)` layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(input_err!("planar RGB buffer of {} bytes does not fit {width}x{height}", data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Pixels of `region`, given in a frame where this image occupies
    /// `[offset_x, offset_x + W) x [offset_y, offset_y + H)`.
    pub fn crop_in_frame(&self, region: Rect, offset_x: i64, offset_y: i64) -> Result<Raster> {
        let local = Rect::new(region.x - offset_x, region.y - offset_y, region.width, region.height);
        if local.x < 0 || local.y < 0 || local.x as usize + local.width > self.width || local.y as usize + local.height > self.height {
            return Err(input_err!("region {region:?} not inside image placed at ({offset_x}, {offset_y})"));
        }
        let mut out = Raster::new(region.width, region.height);
        for c in 0..3 {
            for y in 0..region.height {
                let src = (c * self.height + local.y as usize + y) * self.width + local.x as usize;
                let dst = (c * region.height + y) * region.width;
                out.data[dst..dst + region.width].copy_from_slice(&self.data[src..src + region.width]);
            }
        }
        Ok(out)
    }

    /// Normalized `(3, H, W)` tensor with values in `[-1, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new([3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64 / 127.5 - 1.0)).collect())
            .expect("raster buffer matches its shape")
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Raster::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, px.0[c]);
            }
        }
        out
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| self.get(c, x as usize, y as usize)))
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Input(format!("cannot decode {}: {other}", path.display())),
        })?;
        Ok(Self::from_rgb(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save(path)?;
        Ok(())
    }
}
