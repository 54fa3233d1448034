use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec, Shape};
use crate::error::Result;

/// Weights and bias of one parametrised layer.
///
/// Layouts: conv `W[out, in*k*k]`, transposed conv `W[in, out*k*k]`,
/// dense `W[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub spec_hash: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub history: Vec<EpochStats>,
}

/// Per-layer parameters (`None` for parameter-free layers) plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Option<LayerParams>>,
    pub meta: ParamsMeta,
}

/// Gradients share the parameter layout.
pub type Gradients = Vec<Option<LayerParams>>;

fn param_dims(layer: &LayerSpec, input: Shape) -> Option<((usize, usize), usize, usize)> {
    // ((w rows, w cols), bias len, fan_in)
    match *layer {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => {
            let fan = input.channels * kernel * kernel;
            Some(((out_channels, fan), out_channels, fan))
        }
        LayerSpec::ConvTranspose {
            out_channels,
            kernel,
            stride,
            ..
        } => {
            let fan = (input.channels * kernel * kernel / (stride * stride)).max(1);
            Some((
                (input.channels, out_channels * kernel * kernel),
                out_channels,
                fan,
            ))
        }
        LayerSpec::Dense { width } => Some(((input.len(), width), width, input.len())),
        _ => None,
    }
}

impl NetworkParams {
    /// Uniform fan-in initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, &input)| {
                param_dims(layer, input).map(|(wd, bl, fan)| {
                    let limit = (6.0 / fan as f64).sqrt();
                    LayerParams {
                        w: Array2::from_shape_simple_fn(wd, || rng.random_range(-limit..limit)),
                        b: Array1::zeros(bl),
                    }
                })
            })
            .collect();
        Ok(Self {
            layers,
            meta: ParamsMeta {
                spec_hash: spec.hash(),
                seed,
                epochs: 0,
                history: Vec::new(),
            },
        })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let mut p = Self::init(spec, 0)?;
        for l in p.layers.iter_mut().flatten() {
            l.w.fill(0.0);
        }
        Ok(p)
    }

    pub fn zero_grads(&self) -> Gradients {
        self.layers
            .iter()
            .map(|l| l.as_ref().map(LayerParams::zeros_like))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(LayerParams::len).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten().flat_map(LayerParams::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten().flat_map(LayerParams::values_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Rounds every value to `f32`, matching what the file format stores.
    pub fn quantize_f32(&mut self) {
        for v in self.values_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::spec::spec_cnn;

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = spec_cnn(Shape::new(1, 16, 16), 3, 8);
        let a = NetworkParams::init(&spec, 4).unwrap();
        let b = NetworkParams::init(&spec, 4).unwrap();
        let c = NetworkParams::init(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let first = a.layers[0].as_ref().unwrap();
        let limit = (6.0f64 / 9.0).sqrt();
        assert!(first.w.iter().all(|v| v.abs() <= limit));
        assert!(first.b.iter().all(|&v| v == 0.0));
        assert!(a.layers[1].is_none());
    }
}
