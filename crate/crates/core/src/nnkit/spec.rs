use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Channel-major activation shape. Flat vectors are `(n, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_flat(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Sigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid (unpadded) convolution.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Transposed convolution; output side `(in - 1) * stride - 2 * padding + kernel`.
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Non-overlapping max pooling, remainder rows/cols dropped.
    MaxPool { size: usize },
    Dense { width: usize },
    Activation { function: Activation },
    Flatten,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    pub fn act(function: Activation) -> Self {
        LayerSpec::Activation { function }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::ConvTranspose { .. } | LayerSpec::Dense { .. }
        )
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let bad = |why: String| Err(Error::InvalidParam(format!("{self:?} on {input}: {why}")));
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return bad("zero-sized conv".into());
                }
                if input.height < kernel || input.width < kernel {
                    return bad("input smaller than kernel".into());
                }
                Ok(Shape::new(
                    out_channels,
                    (input.height - kernel) / stride + 1,
                    (input.width - kernel) / stride + 1,
                ))
            }
            LayerSpec::ConvTranspose {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return bad("zero-sized transposed conv".into());
                }
                let h = (input.height - 1) * stride + kernel;
                let w = (input.width - 1) * stride + kernel;
                if h <= 2 * padding || w <= 2 * padding {
                    return bad("padding consumes the output".into());
                }
                Ok(Shape::new(out_channels, h - 2 * padding, w - 2 * padding))
            }
            LayerSpec::MaxPool { size } => {
                if size == 0 || input.height < size || input.width < size {
                    return bad("pool window larger than input".into());
                }
                Ok(Shape::new(
                    input.channels,
                    input.height / size,
                    input.width / size,
                ))
            }
            LayerSpec::Dense { width } => {
                if !input.is_flat() {
                    return bad("dense layers need a flattened input".into());
                }
                if width == 0 {
                    return bad("zero-width dense layer".into());
                }
                Ok(Shape::flat(width))
            }
            LayerSpec::Activation { .. } => Ok(input),
            LayerSpec::Flatten => Ok(Shape::flat(input.len())),
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => {
                let out = Shape::new(channels, height, width);
                if out.len() != input.len() {
                    return bad(format!("cannot reshape to {out}"));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Activation shapes: `shapes[0]` is the input, `shapes[i + 1]` the output
    /// of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParam("network has no layers".into()));
        }
        let mut shapes = vec![self.input];
        for layer in &self.layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().unwrap())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Output index (into a forward trace) of the last convolution, after its
    /// activation if one follows.
    pub fn last_conv_tap(&self) -> Option<usize> {
        let i = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv { .. }))?;
        Some(self.after_activation(i))
    }

    /// Output index of the second dense layer, after its activation.
    pub fn embedding_tap(&self) -> Option<usize> {
        let i = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
            .nth(1)?
            .0;
        Some(self.after_activation(i))
    }

    fn after_activation(&self, layer: usize) -> usize {
        match self.layers.get(layer + 1) {
            Some(LayerSpec::Activation { .. }) => layer + 2,
            _ => layer + 1,
        }
    }
}

/// The classifier used throughout: two conv/pool stages, dense 128, dense
/// `embedding` (the clustering tap) and a softmax head.
pub fn spec_cnn(input: Shape, classes: usize, embedding: usize) -> NetworkSpec {
    use Activation::*;
    NetworkSpec {
        input,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 3,
                stride: 1,
            },
            LayerSpec::act(Relu),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                stride: 1,
            },
            LayerSpec::act(Relu),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 128 },
            LayerSpec::act(Relu),
            LayerSpec::Dense { width: embedding },
            LayerSpec::act(Relu),
            LayerSpec::Dense { width: classes },
            LayerSpec::act(Softmax),
        ],
    }
}

/// Dense projection to a `channels x rows/4 x cols/4` map followed by two
/// stride-2 transposed convolutions and a sigmoid, giving `1 x rows x cols`.
/// Used for both the GAN generator and the autoencoder decoder.
pub fn upsampler_spec(latent: usize, rows: usize, cols: usize, channels: usize) -> Result<NetworkSpec> {
    use Activation::*;
    if rows % 4 != 0 || cols % 4 != 0 || rows == 0 || cols == 0 {
        return Err(Error::InvalidParam(format!(
            "upsampler output {rows}x{cols} must be a positive multiple of 4"
        )));
    }
    let (h, w) = (rows / 4, cols / 4);
    Ok(NetworkSpec {
        input: Shape::flat(latent),
        layers: vec![
            LayerSpec::Dense {
                width: channels * h * w,
            },
            LayerSpec::act(Relu),
            LayerSpec::Reshape {
                channels,
                height: h,
                width: w,
            },
            LayerSpec::ConvTranspose {
                out_channels: (channels / 2).max(1),
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            LayerSpec::act(Relu),
            LayerSpec::ConvTranspose {
                out_channels: 1,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            LayerSpec::act(Sigmoid),
        ],
    })
}

/// Spec-CNN style trunk with a linear scalar head.
pub fn critic_spec(input: Shape, widths: (usize, usize)) -> NetworkSpec {
    use Activation::*;
    NetworkSpec {
        input,
        layers: vec![
            LayerSpec::Conv {
                out_channels: widths.0,
                kernel: 3,
                stride: 1,
            },
            LayerSpec::act(Relu),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                out_channels: widths.1,
                kernel: 3,
                stride: 1,
            },
            LayerSpec::act(Relu),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 1 },
            LayerSpec::act(Linear),
        ],
    }
}
