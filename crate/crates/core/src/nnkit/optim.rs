use serde::{Deserialize, Serialize};

use super::params::{Gradients, LayerParams, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
    RmsProp { rho: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub kind: OptimizerKind,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            kind: OptimizerKind::Sgd { momentum: 0.0 },
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self {
            lr,
            kind: OptimizerKind::RmsProp { rho: 0.9, eps: 1e-8 },
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// First/second moment buffers per parametrised layer.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &NetworkParams) -> Self {
        Self {
            config,
            first: params.zero_grads(),
            second: params.zero_grads(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) {
        self.step += 1;
        let lr = self.config.lr;
        let t = self.step as i32;
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let (Some(p), Some(g), Some(m), Some(v)) = (p, g, m, v) else {
                continue;
            };
            update(self.config.kind, lr, t, p, g, m, v);
        }
    }
}

fn update(
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    p: &mut LayerParams,
    g: &LayerParams,
    m: &mut LayerParams,
    v: &mut LayerParams,
) {
    let iter = p
        .values_mut()
        .zip(g.values())
        .zip(m.values_mut())
        .zip(v.values_mut());
    match kind {
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, &g), m), v) in iter {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        OptimizerKind::Sgd { momentum } => {
            for (((p, &g), m), _) in iter {
                *m = momentum * *m + g;
                *p -= lr * *m;
            }
        }
        OptimizerKind::RmsProp { rho, eps } => {
            for (((p, &g), _), v) in iter {
                *v = rho * *v + (1.0 - rho) * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::spec::{LayerSpec, NetworkSpec, Shape};

    fn one_dense() -> NetworkParams {
        let spec = NetworkSpec {
            input: Shape::flat(1),
            layers: vec![LayerSpec::Dense { width: 1 }],
        };
        NetworkParams::zeros(&spec).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one_dense();
        let mut g = p.zero_grads();
        g[0].as_mut().unwrap().w[[0, 0]] = 3.0;
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p);
        opt.step(&mut p, &g);
        assert!((p.layers[0].as_ref().unwrap().w[[0, 0]] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        // minimise (w - 2)^2
        let mut p = one_dense();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &p);
        for _ in 0..200 {
            let w = p.layers[0].as_ref().unwrap().w[[0, 0]];
            let mut g = p.zero_grads();
            g[0].as_mut().unwrap().w[[0, 0]] = 2.0 * (w - 2.0);
            opt.step(&mut p, &g);
        }
        assert!((p.layers[0].as_ref().unwrap().w[[0, 0]] - 2.0).abs() < 1e-9);
    }
}
