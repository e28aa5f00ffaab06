//! RMSProp with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Running mean of squared gradients per parameter.
    pub square_avg: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(alpha: f64, eps: f64, weight_decay: f64) -> Self {
        RmsProp {
            alpha,
            eps,
            weight_decay,
            square_avg: BTreeMap::new(),
        }
    }

    /// `g += wd * θ; s = α s + (1 - α) g²; θ -= lr g / (√s + eps)`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so the running average does not keep every step's graph alive
            let theta = var.as_tensor().detach();
            let g = (g.detach() + (&theta * self.weight_decay)?)?;
            let sq = match self.square_avg.get(name) {
                Some(s) => ((s * self.alpha)? + (g.sqr()? * (1.0 - self.alpha))?)?,
                None => (g.sqr()? * (1.0 - self.alpha))?,
            };
            let update = g.div(&(sq.sqrt()? + self.eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.square_avg.insert(name.clone(), sq.detach());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn matches_hand_computed_update() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.constant("w", &[2], 1.0).unwrap();
        let loss = (&w * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = RmsProp::new(0.99, 1e-8, 0.1);
        opt.step(&store, &grads, 0.01).unwrap();
        // g = 2 + 0.1 = 2.1, s = 0.01 * 4.41, update = 2.1 / (0.21 + 1e-8)
        let expect = 1.0 - 0.01 * 2.1 / ((0.01f64 * 4.41).sqrt() + 1e-8);
        let got = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - expect).abs() < 1e-12);
    }
}
