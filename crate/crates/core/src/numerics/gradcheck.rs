use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude a derivative is indistinguishable from the rounding
/// noise of a central difference on an O(1) objective.
pub const GRADIENT_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn eval_scalar<F>(f: &F, x: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    let value = g.value(out).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric("grad_check objective is not finite".into()));
    }
    Ok(value)
}

/// Maximum over coordinates of `|a - n| / max(|a|, |n|, GRADIENT_FLOOR)` with `n` the central difference
/// for a scalar-valued graph function of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Which coordinates of each parameter a parameter-space check visits.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to this many evenly spread coordinates per parameter tensor.
    Sample(usize),
}

/// Worst relative error of one parameter coordinate check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    pub worst_param: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Finite-difference check of a scalar loss with respect to model parameters.
///
/// `loss` builds the loss on a fresh graph from the given store.
pub fn grad_check_params<F>(store: &ParamStore<f64>, loss: F, eps: f64, coords: Coordinates) -> Result<ParamCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?.for_params(&g, store);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };

    let mut check = ParamCheck { max_relative_error: 0.0, worst_param: String::new(), worst_pair: (0.0, 0.0), checked: 0 };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample(k) if k >= n => (0..n).collect(),
            Coordinates::Sample(k) => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
        };
        for i in picks {
            let numeric = perturbed_difference(&mut probe, id, i, eps, &eval)?;
            let analytic = grads[id.index()].data()[i];
            let err = relative_error(analytic, numeric);
            if err > check.max_relative_error {
                check.max_relative_error = err;
                check.worst_pair = (analytic, numeric);
                check.worst_param = format!("{}[{i}]", store.name(id));
            }
            check.checked += 1;
        }
    }
    Ok(check)
}

fn perturbed_difference(
    probe: &mut ParamStore<f64>,
    id: ParamId,
    i: usize,
    eps: f64,
    eval: &impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<f64> {
    let original = probe.get(id).data()[i];
    probe.get_mut(id).data_mut()[i] = original + eps;
    let up = eval(probe)?;
    probe.get_mut(id).data_mut()[i] = original - eps;
    let down = eval(probe)?;
    probe.get_mut(id).data_mut()[i] = original;
    Ok((up - down) / (2.0 * eps))
}
