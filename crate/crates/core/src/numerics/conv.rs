//! im2col convolution kernels shared by the graph and by inference-only callers.

use super::{MatMut, MatRef, Scalar, Tensor};
use crate::error::{config_err, Error, Result};

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[c_in, h, wd], &[c_out, wc_in, k, k2]) = (x, w) else {
            return Err(config_err!("conv2d expects x (C,H,W) and kernel (Co,Ci,k,k), got {x:?} and {w:?}"));
        };
        if k != k2 || k == 0 {
            return Err(config_err!("conv2d kernel must be square, got {k}x{k2}"));
        }
        if wc_in != c_in {
            return Err(config_err!("conv2d kernel expects {wc_in} input channels, input has {c_in}"));
        }
        if b != [c_out] {
            return Err(config_err!("conv2d bias shape {b:?} does not match {c_out} output channels"));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(config_err!("conv2d kernel {k} larger than padded input {h}x{wd}"));
        }
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (wd + 2 * padding - k) / stride + 1;
        Ok(Self { in_channels: c_in, out_channels: c_out, kernel: k, stride, padding, in_h: h, in_w: wd, out_h, out_w })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..][..g.in_w];
                    let dst = &mut row[oy * g.out_w..][..g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.positions();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                    let src = &row[oy * g.out_w..][..g.out_w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: `out[o] = bias[o] + sum_{c,ky,kx} w[o,c,ky,kx] * x[c, y*s+ky-p, x*s+kx-p]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
    let p = g.positions();
    let mut out = vec![T::zero(); g.out_channels * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(b.data()[o]);
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x.data(), &g);
        &owned
    };
    T::gemm(
        T::one(),
        MatRef::row_major(w.data(), g.out_channels, g.patch_len()),
        MatRef::row_major(cols, g.patch_len(), p),
        T::one(),
        MatMut::row_major(&mut out, g.out_channels, p),
    );
    let out = Tensor::new([g.out_channels, g.out_h, g.out_w], out)?;
    if !out.is_finite() {
        return Err(Error::Numeric("conv2d produced a non-finite value".into()));
    }
    Ok(out)
}

/// Gradients of a convolution with respect to `(x, w, b)` given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_x: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
    let p = g.positions();
    let k = g.patch_len();
    let go = grad_out.data();

    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x.data(), &g);
        &owned
    };
    let mut dw = vec![T::zero(); g.out_channels * k];
    T::gemm(
        T::one(),
        MatRef::row_major(go, g.out_channels, p),
        MatRef::transposed(cols, k, p),
        T::zero(),
        MatMut::row_major(&mut dw, g.out_channels, k),
    );
    let db: Vec<T> = go.chunks(p).map(|row| row.iter().copied().sum()).collect();

    let dx = if need_x {
        let mut dcols = vec![T::zero(); k * p];
        T::gemm(
            T::one(),
            MatRef::transposed(w.data(), g.out_channels, k),
            MatRef::row_major(go, g.out_channels, p),
            T::zero(),
            MatMut::row_major(&mut dcols, k, p),
        );
        let dx = if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); x.numel()];
            col2im(&dcols, &g, &mut dx);
            dx
        };
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(b.shape().to_vec(), db)?))
}
