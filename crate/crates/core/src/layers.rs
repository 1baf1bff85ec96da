use rand::Rng;

use crate::error::Result;
use crate::numerics::{conv2d_forward, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// A square convolution (`k` in {1, 3}) with "same" padding, bound to a store.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_fan_in(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], rng);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self { weight, bias, stride, padding: kernel / 2 }
    }

    /// Pointwise projection without a bias term.
    pub fn without_bias<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_fan_in(format!("{name}.weight"), &[c_out, c_in, 1, 1], rng);
        Self { weight, bias: None, stride: 1, padding: 0 }
    }

    /// All-zero kernel and bias: the layer outputs zeros until trained.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([c_out, c_in, 1, 1]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self { weight, bias, stride: 1, padding: 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = match self.bias {
            Some(id) => g.param(store, id),
            None => g.constant(Tensor::zeros([store.get(self.weight).shape()[0]])),
        };
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    /// Conv followed by the activation.
    pub fn forward_act<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        g.silu(y)
    }

    /// Graph-free forward for inference-only callers.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = store.get(self.weight);
        match self.bias {
            Some(id) => conv2d_forward(x, w, store.get(id), self.stride, self.padding),
            None => conv2d_forward(x, w, &Tensor::zeros([w.shape()[0]]), self.stride, self.padding),
        }
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}
