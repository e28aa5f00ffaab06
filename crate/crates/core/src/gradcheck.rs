//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Floor on the relative-error denominator. Central differences in double
/// precision carry roughly 1e-10 of rounding noise, so gradients smaller
/// than this are effectively compared in absolute terms.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn values(var: &Var) -> Result<Vec<f64>> {
    Ok(var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn set(var: &Var, v: Vec<f64>) -> Result<()> {
    let t = Tensor::from_vec(v, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Autograd gradient of `loss` with respect to `var`, flattened.
pub fn analytic_gradient(var: &Var, loss: &Tensor) -> Result<Vec<f64>> {
    let grads = loss.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?),
        None => Ok(vec![0.0; var.elem_count()]),
    }
}

/// Compares autograd against central differences at `probes` random
/// entries of every parameter whose name passes `select`. The store must be
/// double precision.
pub fn check_gradients(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    probes: usize,
    seed: u64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    if store.dtype() != DType::F64 {
        return Err(Error::Config("gradient checks need a double-precision store".into()));
    }
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = loss()?.backward()?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (name, var) in store.vars() {
        if !select(name) {
            continue;
        }
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let base = values(var)?;
        for _ in 0..probes.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let mut v = base.clone();
            v[i] = base[i] + eps;
            set(var, v.clone())?;
            let up = scalar(&loss()?)?;
            v[i] = base[i] - eps;
            set(var, v)?;
            let down = scalar(&loss()?)?;
            set(var, base.clone())?;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]: autograd {a:.6e}, numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}
