use rand::Rng;

use super::Scalar;
use crate::error::{config_err, Error, Result};

/// Dense row-major tensor. Images and feature maps are channels-first `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config_err!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { data: (0..numel).map(&mut f).collect(), shape }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(C, H, W)` extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(config_err!("expected a (C, H, W) tensor, got shape {other:?}")),
        }
    }

    /// `(rows, cols)` extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(config_err!("expected a matrix, got shape {other:?}")),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(config_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel slice `[start, end)` of a `(C, H, W)` tensor.
    pub fn channels(&self, start: usize, end: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if start > end || end > c {
            return Err(config_err!("channel range {start}..{end} out of {c}"));
        }
        let plane = h * w;
        Ok(Self { shape: vec![end - start, h, w], data: self.data[start * plane..end * plane].to_vec() })
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)` of a `(C, H, W)` tensor.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if x0 + width > w || y0 + height > h {
            return Err(config_err!("crop {width}x{height}+{x0}+{y0} outside {w}x{h}"));
        }
        let mut data = Vec::with_capacity(c * width * height);
        for ch in 0..c {
            for y in y0..y0 + height {
                let row = ch * h * w + y * w;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Ok(Self { shape: vec![c, height, width], data })
    }

    /// Zero-pads a `(C, H, W)` tensor on the bottom and right to `(C, height, width)`.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if height < h || width < w {
            return Err(config_err!("cannot pad {h}x{w} down to {height}x{width}"));
        }
        if height == h && width == w {
            return Ok(self.clone());
        }
        let mut out = Self::zeros([c, height, width]);
        for ch in 0..c {
            for y in 0..h {
                let src = ch * h * w + y * w;
                let dst = ch * height * width + y * width;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| config_err!("concat of zero tensors"))?;
        let (_, h, w) = first.dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(config_err!("concat spatial mismatch {ph}x{pw} vs {h}x{w}"));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: vec![c_total, h, w], data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_count_must_match_shape() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn crop_then_pad_restores_region() {
        let t = Tensor::<f64>::from_fn([2, 4, 5], |i| i as f64);
        let c = t.crop(1, 2, 3, 2).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.data()[0], 11.0);
        let p = c.pad_to(4, 4).unwrap();
        assert_eq!(p.shape(), &[2, 4, 4]);
        assert_eq!(p.data()[3], 0.0);
        assert_eq!(p.data()[4], 16.0);
    }

    #[test]
    fn channel_slices_partition_concat() {
        let a = Tensor::<f32>::from_fn([2, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([1, 2, 2], |i| -(i as f32));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(0, 2).unwrap(), a);
        assert_eq!(cat.channels(2, 3).unwrap(), b);
    }
}
