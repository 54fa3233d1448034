use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::ops::{col2im, im2col, max_pool, ConvGeom};
use super::params::{Gradients, LayerParams, NetworkParams, ParamsMeta};
use super::spec::{Activation, LayerSpec, NetworkSpec, Shape};
use crate::error::{Error, Result};

const FILE_MAGIC: &[u8; 4] = b"NNP1";

/// A batch of activations: one flattened sample per row.
pub type Batch = Array2<f64>;

/// Every intermediate activation of a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `outputs[0]` is the input, `outputs[i + 1]` the output of layer `i`.
    pub outputs: Vec<Batch>,
    pool_index: Vec<Vec<u32>>,
}

impl Trace {
    pub fn output(&self) -> &Batch {
        self.outputs.last().unwrap()
    }
}

/// Per-class softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

impl ClassScores {
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: String,
    pub label: Option<usize>,
}

/// Channels of the last convolutional layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStack {
    /// `(channels, height, width)`.
    pub maps: Array3<f64>,
    pub source: String,
}

impl ActivationStack {
    pub fn channels(&self) -> usize {
        self.maps.dim().0
    }
}

/// Outputs of a single classifier pass.
#[derive(Clone, Debug)]
pub struct Taps {
    pub scores: ClassScores,
    pub embedding: Option<Embedding>,
    pub activations: Option<ActivationStack>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    spec: NetworkSpec,
    meta: ParamsMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    shapes: Vec<Shape>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = NetworkParams::init(&spec, seed)?;
        Self::with_params(spec, params)
    }

    pub fn with_params(spec: NetworkSpec, params: NetworkParams) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.layers.len() != spec.layers.len() {
            return Err(Error::shape(spec.layers.len(), params.layers.len()));
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params.layers).enumerate() {
            if layer.has_params() != p.is_some() {
                return Err(Error::InvalidParam(format!("layer {i} parameter presence")));
            }
        }
        Ok(Self {
            spec,
            params,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        let want = self.input_shape().len();
        if x.ncols() != want {
            return Err(Error::shape(
                format!("{} values ({})", want, self.input_shape()),
                format!("{} values", x.ncols()),
            ));
        }
        Ok(())
    }

    /// Runs the first `n_layers` layers, keeping every activation.
    pub fn forward_prefix(&self, x: ArrayView2<f64>, n_layers: usize) -> Result<Trace> {
        self.check_input(&x)?;
        let n_layers = n_layers.min(self.spec.layers.len());
        let mut outputs = Vec::with_capacity(n_layers + 1);
        let mut pool_index = Vec::with_capacity(n_layers);
        outputs.push(x.to_owned());
        for i in 0..n_layers {
            let (y, idx) = self.layer_forward(i, outputs.last().unwrap());
            outputs.push(y);
            pool_index.push(idx);
        }
        Ok(Trace {
            outputs,
            pool_index,
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.forward_prefix(x, self.spec.layers.len())
    }

    /// Final-layer output only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Batch> {
        self.check_input(&x)?;
        let mut cur = x.to_owned();
        for i in 0..self.spec.layers.len() {
            cur = self.layer_forward(i, &cur).0;
        }
        Ok(cur)
    }

    fn layer_forward(&self, i: usize, x: &Batch) -> (Batch, Vec<u32>) {
        let input = self.shapes[i];
        let out = self.shapes[i + 1];
        let batch = x.nrows();
        match (&self.spec.layers[i], &self.params.layers[i]) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                },
                Some(p),
            ) => {
                let g = ConvGeom {
                    channels: input.channels,
                    height: input.height,
                    width: input.width,
                    kernel: *kernel,
                    stride: *stride,
                    padding: 0,
                };
                let mut y = Array2::zeros((batch, out.len()));
                for (xr, mut yr) in x.outer_iter().zip(y.outer_iter_mut()) {
                    let cols = im2col(xr.as_slice().unwrap(), &g);
                    let mut prod = p.w.dot(&cols);
                    prod += &p.b.view().insert_axis(Axis(1));
                    yr.assign(&ndarray::ArrayView1::from(
                        prod.as_slice().expect("standard layout"),
                    ));
                    debug_assert_eq!(prod.dim(), (*out_channels, g.cols()));
                }
                (y, Vec::new())
            }
            (
                LayerSpec::ConvTranspose {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Some(p),
            ) => {
                let g = ConvGeom {
                    channels: out.channels,
                    height: out.height,
                    width: out.width,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let plane = out.spatial();
                let mut y = Array2::zeros((batch, out.len()));
                for (xr, mut yr) in x.outer_iter().zip(y.outer_iter_mut()) {
                    let xm = xr.into_shape_with_order((input.channels, input.spatial())).unwrap();
                    let cols = p.w.t().dot(&xm);
                    let ys = yr.as_slice_mut().unwrap();
                    col2im(&cols, &g, ys);
                    for c in 0..out.channels {
                        for v in &mut ys[c * plane..(c + 1) * plane] {
                            *v += p.b[c];
                        }
                    }
                }
                (y, Vec::new())
            }
            (LayerSpec::MaxPool { size }, None) => {
                let mut y = Array2::zeros((batch, out.len()));
                let mut all_idx = Vec::with_capacity(batch * out.len());
                for (xr, mut yr) in x.outer_iter().zip(y.outer_iter_mut()) {
                    let (v, idx) = max_pool(
                        xr.as_slice().unwrap(),
                        input.channels,
                        input.height,
                        input.width,
                        *size,
                    );
                    yr.assign(&Array1::from(v));
                    all_idx.extend(idx);
                }
                (y, all_idx)
            }
            (LayerSpec::Dense { .. }, Some(p)) => {
                let mut y = x.dot(&p.w);
                y += &p.b;
                (y, Vec::new())
            }
            (LayerSpec::Activation { function }, None) => {
                let y = match function {
                    Activation::Relu => x.mapv(|v| v.max(0.0)),
                    Activation::Sigmoid => x.mapv(sigmoid),
                    Activation::Linear => x.clone(),
                    Activation::Softmax => {
                        let mut y = x.clone();
                        for mut row in y.outer_iter_mut() {
                            let sm = softmax(row.as_slice().unwrap());
                            row.assign(&Array1::from(sm));
                        }
                        y
                    }
                };
                (y, Vec::new())
            }
            (LayerSpec::Flatten | LayerSpec::Reshape { .. }, None) => (x.clone(), Vec::new()),
            _ => unreachable!("parameter presence checked at construction"),
        }
    }

    /// Backpropagates `grad` (dL/d `trace.outputs[grad_at]`) down to the
    /// input. Parameter gradients are skipped when `param_grads` is false.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_at: usize,
        grad: Batch,
        param_grads: bool,
    ) -> (Gradients, Batch) {
        let mut grads = self.params.zero_grads();
        let mut g = grad;
        for i in (0..grad_at).rev() {
            g = self.layer_backward(i, trace, g, param_grads.then(|| &mut grads[i]), true);
        }
        (grads, g)
    }

    /// Parameter gradients only; the input gradient is never formed.
    pub fn param_gradients(&self, trace: &Trace, grad_at: usize, grad: Batch) -> Gradients {
        let mut grads = self.params.zero_grads();
        let mut g = grad;
        for i in (0..grad_at).rev() {
            g = self.layer_backward(i, trace, g, Some(&mut grads[i]), i > 0);
        }
        grads
    }

    fn layer_backward(
        &self,
        i: usize,
        trace: &Trace,
        dy: Batch,
        pgrad: Option<&mut Option<LayerParams>>,
        need_dx: bool,
    ) -> Batch {
        let input = self.shapes[i];
        let out = self.shapes[i + 1];
        let x = &trace.outputs[i];
        let y = &trace.outputs[i + 1];
        let batch = x.nrows();
        match (&self.spec.layers[i], &self.params.layers[i]) {
            (LayerSpec::Conv { kernel, stride, .. }, Some(p)) => {
                let g = ConvGeom {
                    channels: input.channels,
                    height: input.height,
                    width: input.width,
                    kernel: *kernel,
                    stride: *stride,
                    padding: 0,
                };
                let mut dx = Array2::zeros((batch, if need_dx { input.len() } else { 0 }));
                let mut acc = pgrad.and_then(|o| o.as_mut());
                for (b, (xr, dyr)) in x.outer_iter().zip(dy.outer_iter()).enumerate() {
                    let mut dxr = dx.row_mut(b);
                    let dym = dyr.into_shape_with_order((out.channels, out.spatial())).unwrap();
                    if let Some(gp) = acc.as_deref_mut() {
                        let cols = im2col(xr.as_slice().unwrap(), &g);
                        gp.w += &dym.dot(&cols.t());
                        gp.b += &dym.sum_axis(Axis(1));
                    }
                    if need_dx {
                        let dcols = p.w.t().dot(&dym);
                        col2im(&dcols, &g, dxr.as_slice_mut().unwrap());
                    }
                }
                dx
            }
            (
                LayerSpec::ConvTranspose {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Some(p),
            ) => {
                let g = ConvGeom {
                    channels: out.channels,
                    height: out.height,
                    width: out.width,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let mut dx = Array2::zeros((batch, input.len()));
                let mut acc = pgrad.and_then(|o| o.as_mut());
                for ((xr, dyr), mut dxr) in x.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut()) {
                    let dcols = im2col(dyr.as_slice().unwrap(), &g);
                    let dxm = p.w.dot(&dcols);
                    dxr.assign(&ndarray::ArrayView1::from(dxm.as_slice().unwrap()));
                    if let Some(gp) = acc.as_deref_mut() {
                        let xm = xr.into_shape_with_order((input.channels, input.spatial())).unwrap();
                        gp.w += &xm.dot(&dcols.t());
                        let dym = dyr.into_shape_with_order((out.channels, out.spatial())).unwrap();
                        gp.b += &dym.sum_axis(Axis(1));
                    }
                }
                dx
            }
            (LayerSpec::MaxPool { .. }, None) => {
                let idx = &trace.pool_index[i];
                let per = out.len();
                let mut dx = Array2::zeros((batch, input.len()));
                for (b, (dyr, mut dxr)) in dy.outer_iter().zip(dx.outer_iter_mut()).enumerate() {
                    for (j, v) in dyr.iter().enumerate() {
                        dxr[idx[b * per + j] as usize] += v;
                    }
                }
                dx
            }
            (LayerSpec::Dense { .. }, Some(p)) => {
                if let Some(Some(gp)) = pgrad {
                    gp.w += &x.t().dot(&dy);
                    gp.b += &dy.sum_axis(Axis(0));
                }
                if !need_dx {
                    return Array2::zeros((batch, 0));
                }
                dy.dot(&p.w.t())
            }
            (LayerSpec::Activation { function }, None) => match function {
                Activation::Relu => {
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    dx
                }
                Activation::Sigmoid => {
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| *d *= yv * (1.0 - yv));
                    dx
                }
                Activation::Linear => dy,
                Activation::Softmax => {
                    let mut dx = dy;
                    for (mut d, yr) in dx.outer_iter_mut().zip(y.outer_iter()) {
                        let dot: f64 = d.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        ndarray::Zip::from(&mut d).and(&yr).for_each(|dv, &yv| *dv = yv * (*dv - dot));
                    }
                    dx
                }
            },
            (LayerSpec::Flatten | LayerSpec::Reshape { .. }, None) => dy,
            _ => unreachable!("parameter presence checked at construction"),
        }
    }

    /// Single classifier pass yielding scores, the embedding tap and the last
    /// convolutional activations.
    pub fn taps(&self, image: &Array2<f64>, source: &str) -> Result<Taps> {
        let x = image
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, image.len()))
            .map_err(|e| Error::InvalidParam(e.to_string()))?;
        let expect = self.input_shape();
        if image.dim() != (expect.height, expect.width) || expect.channels != 1 {
            return Err(Error::shape(
                format!("{}x{} image", expect.height, expect.width),
                format!("{}x{}", image.nrows(), image.ncols()),
            ));
        }
        let trace = self.forward(x.view())?;
        Ok(self.taps_from_trace(&trace, 0, source))
    }

    pub fn taps_from_trace(&self, trace: &Trace, row: usize, source: &str) -> Taps {
        let out = trace.output().row(row).to_vec();
        let scores = match self.spec.layers.last() {
            Some(LayerSpec::Activation {
                function: Activation::Softmax,
            }) => out,
            _ => softmax(&out),
        };
        let embedding = self.spec.embedding_tap().map(|t| Embedding {
            values: trace.outputs[t].row(row).to_vec(),
            source: source.to_string(),
            label: None,
        });
        let activations = self.spec.last_conv_tap().map(|t| {
            let sh = self.shapes[t];
            ActivationStack {
                maps: trace.outputs[t]
                    .slice(s![row, ..])
                    .to_owned()
                    .into_shape_with_order((sh.channels, sh.height, sh.width))
                    .unwrap(),
                source: source.to_string(),
            }
        });
        Taps {
            scores: ClassScores(scores),
            embedding,
            activations,
        }
    }

    /// Embedding tap for a batch, one row per sample.
    pub fn embeddings(&self, x: ArrayView2<f64>) -> Result<Batch> {
        let tap = self
            .spec
            .embedding_tap()
            .ok_or_else(|| Error::InvalidParam("network has no second dense layer".into()))?;
        let trace = self.forward_prefix(x, tap)?;
        Ok(trace.outputs.into_iter().nth(tap).unwrap())
    }

    /// Writes `NNP1`, a `u32` LE header length, the JSON header, then every
    /// weight and bias array as `f32` LE in layer order.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&FileHeader {
            spec: self.spec.clone(),
            meta: self.params.meta.clone(),
        })?;
        let mut buf = Vec::with_capacity(8 + header.len() + 4 * self.params.count());
        buf.extend_from_slice(FILE_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.params.values() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 || &bytes[..4] != FILE_MAGIC {
            return Err(bad("missing NNP1 header".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body_start = 8 + hlen;
        if bytes.len() < body_start {
            return Err(bad("truncated header".into()));
        }
        let header: FileHeader = serde_json::from_slice(&bytes[8..body_start])?;
        let mut params = NetworkParams::zeros(&header.spec)?;
        let body = &bytes[body_start..];
        if body.len() != 4 * params.count() {
            return Err(bad(format!(
                "expected {} parameters, found {}",
                params.count(),
                body.len() / 4
            )));
        }
        for (v, c) in params.values_mut().zip(body.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        params.meta = header.meta;
        Self::with_params(header.spec, params)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
