use serde::{Deserialize, Serialize};

use super::{BlockNetModel, Gradient};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.02,
            batch_size: 16,
            local_epochs: 2,
            momentum: 0.5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is the no-op training used in tests.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("optimizer.local_epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Option<Gradient>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: None,
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn step(&mut self, model: &mut BlockNetModel, grad: &Gradient) -> Result<()> {
        self.step_layers(model, grad, |_| true)
    }

    /// Updates only layers for which `trainable(layer_index)` holds; the
    /// velocity of frozen layers is left untouched.
    pub fn step_layers(
        &mut self,
        model: &mut BlockNetModel,
        grad: &Gradient,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if !grad.matches(model) {
            return Err(Error::Shape("gradient structure does not match model".into()));
        }
        let lr = self.config.learning_rate;
        let mu = self.config.momentum;
        let velocity = self.velocity.get_or_insert_with(|| Gradient::zeros_like(model));
        if !velocity.matches(model) {
            return Err(Error::Shape("momentum buffer does not match model".into()));
        }
        for (k, ((p, g), v)) in model
            .layers_mut()
            .iter_mut()
            .zip(grad.layers())
            .zip(velocity.layers_mut())
            .enumerate()
        {
            if !trainable(k) {
                continue;
            }
            update(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), lr, mu);
            update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, mu);
        }
        Ok(())
    }
}

fn update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

/// Functional form of one optimiser step; `velocity` carries momentum state.
pub fn sgd_step(
    model: &BlockNetModel,
    grad: &Gradient,
    config: &SgdConfig,
    velocity: &mut Option<Gradient>,
) -> Result<BlockNetModel> {
    let mut opt = Sgd {
        config: *config,
        velocity: velocity.take(),
    };
    let mut next = model.clone();
    let res = opt.step(&mut next, grad);
    *velocity = opt.velocity;
    res.map(|_| next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockKind, BlockNetSpec, ModelShape, Tensor};
    use crate::rng::stream;

    fn tiny() -> BlockNetModel {
        let s = BlockNetSpec::new(2, 4, 1, BlockKind::Plain, 2, 4).unwrap();
        BlockNetModel::zeros(ModelShape::single_head(s))
    }

    fn filled_grad(model: &BlockNetModel, v: f64) -> Gradient {
        let mut g = Gradient::zeros_like(model);
        for l in g.layers_mut() {
            l.weight.data_mut().fill(v);
            l.bias.data_mut().fill(v);
        }
        g
    }

    fn set_all(model: &mut BlockNetModel, v: f64) {
        for l in model.layers_mut() {
            l.weight.data_mut().fill(v);
            l.bias.data_mut().fill(v);
        }
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let s = BlockNetSpec::new(3, 8, 2, BlockKind::Skip, 3, 4).unwrap();
        let m = BlockNetModel::init(ModelShape::single_head(s), &mut stream(&[1]));
        let g = filled_grad(&m, 3.5);
        let cfg = SgdConfig { learning_rate: 0.0, batch_size: 1, local_epochs: 1, momentum: 0.9 };
        let next = sgd_step(&m, &g, &cfg, &mut None).unwrap();
        let a: Vec<u64> = m.flat_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = next.flat_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_step() {
        let mut m = tiny();
        set_all(&mut m, 1.0);
        let g = filled_grad(&m, 2.0);
        let cfg = SgdConfig { learning_rate: 0.1, batch_size: 1, local_epochs: 1, momentum: 0.0 };
        let next = sgd_step(&m, &g, &cfg, &mut None).unwrap();
        assert!(next.flat_params().iter().all(|&p| p == 1.0 - 0.1 * 2.0));
        assert!((next.flat_params()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let m = tiny();
        let g = filled_grad(&m, 1.0);
        let cfg = SgdConfig { learning_rate: 0.1, batch_size: 1, local_epochs: 1, momentum: 0.9 };
        let mut vel = None;
        let m1 = sgd_step(&m, &g, &cfg, &mut vel).unwrap();
        let m2 = sgd_step(&m1, &g, &cfg, &mut vel).unwrap();
        // -0.1*1 - 0.1*(0.9*1 + 1)
        for p in m2.flat_params() {
            assert!((p - (-0.29)).abs() < 1e-15, "{p}");
        }
    }

    #[test]
    fn structure_mismatch_rejected() {
        let m = tiny();
        let s = BlockNetSpec::new(2, 8, 1, BlockKind::Plain, 2, 4).unwrap();
        let other = BlockNetModel::zeros(ModelShape::single_head(s));
        let g = Gradient::zeros_like(&other);
        let cfg = SgdConfig::default();
        assert!(sgd_step(&m, &g, &cfg, &mut None).is_err());
        let _ = Tensor::zeros(vec![1]);
    }
}
