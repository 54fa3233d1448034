//! Score-CAM saliency: every last-conv activation channel is upsampled to
//! the image, used as a multiplicative input mask, and weighted by how much
//! the masked image raises the target class score.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{softmax, ActivationStack, Network};
use crate::spg;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Image-sized grid in `[0, 1]`.
    pub grid: Array2<f64>,
    pub class: usize,
    pub source: String,
}

impl SaliencyMap {
    pub fn save(&self, path: &Path) -> Result<()> {
        spg::write(path, &self.grid)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        spg::write_png(path, &self.grid)
    }
}

/// Per-channel weights `a_k` for one target class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CicWeights(pub Vec<f64>);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CicMode {
    /// Masked-image score minus the score of an all-zero image.
    #[default]
    Difference,
    /// Masked-image score alone.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    pub mode: CicMode,
    /// Masked images per forward pass.
    pub batch: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            mode: CicMode::Difference,
            batch: 32,
        }
    }
}

/// Bilinear resize with aligned corners: the corner cells of input and
/// output coincide.
pub fn upsample_bilinear(map: ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let t = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (t.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, t - lo as f64)
    };
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1, fr) = coord(r, rows, h);
        let (c0, c1, fc) = coord(c, cols, w);
        let top = map[[r0, c0]] * (1.0 - fc) + map[[r0, c1]] * fc;
        let bottom = map[[r1, c0]] * (1.0 - fc) + map[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Affine rescale to `[0, 1]`; a constant grid becomes all zeros.
pub fn min_max_normalize(grid: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Array2::zeros(grid.dim());
    }
    grid.mapv(|v| (v - lo) / (hi - lo))
}

/// Every channel upsampled to `rows x cols` and min-max normalised.
pub fn upsample_normalize(stack: &ActivationStack, rows: usize, cols: usize) -> Result<Vec<Array2<f64>>> {
    let (_, h, w) = stack.maps.dim();
    if rows < h || cols < w {
        return Err(Error::shape(format!("at least {h}x{w}"), format!("{rows}x{cols}")));
    }
    Ok(stack
        .maps
        .outer_iter()
        .map(|m| min_max_normalize(&upsample_bilinear(m, rows, cols)))
        .collect())
}

fn class_scores(net: &Network, x: ArrayView2<f64>, class: usize) -> Result<Vec<f64>> {
    let out = net.predict(x)?;
    Ok(out
        .outer_iter()
        .map(|row| {
            let p = if is_softmax_head(net) { row.to_vec() } else { softmax(row.as_slice().unwrap()) };
            p[class]
        })
        .collect())
}

fn is_softmax_head(net: &Network) -> bool {
    matches!(
        net.spec.layers.last(),
        Some(crate::nnkit::LayerSpec::Activation {
            function: crate::nnkit::Activation::Softmax
        })
    )
}

fn check_image(net: &Network, image: &Array2<f64>, class: usize) -> Result<()> {
    let input = net.input_shape();
    if input.channels != 1 || image.dim() != (input.height, input.width) {
        return Err(Error::shape(
            format!("{}x{} image", input.height, input.width),
            format!("{}x{}", image.nrows(), image.ncols()),
        ));
    }
    let classes = net.output_shape().len();
    if class >= classes {
        return Err(Error::InvalidParam(format!("class {class} out of range for {classes} classes")));
    }
    Ok(())
}

/// Class score of `image * map` for every map, minus the all-zero-image
/// score in [`CicMode::Difference`]. Masked passes run in channel order.
pub fn cic_weights(net: &Network, image: &Array2<f64>, maps: &[Array2<f64>], class: usize, config: &CamConfig) -> Result<CicWeights> {
    check_image(net, image, class)?;
    if let Some(bad) = maps.iter().find(|m| m.dim() != image.dim()) {
        return Err(Error::shape(format!("{:?}", image.dim()), format!("{:?}", bad.dim())));
    }
    let px = image.len();
    let baseline = match config.mode {
        CicMode::Difference => class_scores(net, Array2::zeros((1, px)).view(), class)?[0],
        CicMode::Raw => 0.0,
    };
    let flat_image: Vec<f64> = image.iter().copied().collect();
    let mut weights = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(config.batch.max(1)) {
        let mut x = Array2::zeros((chunk.len(), px));
        for (mut row, m) in x.outer_iter_mut().zip(chunk) {
            for ((dst, &a), &v) in row.iter_mut().zip(m.iter()).zip(&flat_image) {
                *dst = a * v;
            }
        }
        weights.extend(class_scores(net, x.view(), class)?.into_iter().map(|s| s - baseline));
    }
    Ok(CicWeights(weights))
}

/// `ReLU(sum_k a_k * map_k)`, min-max normalised. A combination with no
/// positive cell gives all zeros.
pub fn combine_maps(maps: &[Array2<f64>], weights: &CicWeights, dim: (usize, usize)) -> Result<Array2<f64>> {
    if maps.len() != weights.0.len() {
        return Err(Error::shape(maps.len(), weights.0.len()));
    }
    let mut acc = Array2::<f64>::zeros(dim);
    for (m, &a) in maps.iter().zip(&weights.0) {
        if m.dim() != dim {
            return Err(Error::shape(format!("{dim:?}"), format!("{:?}", m.dim())));
        }
        acc.scaled_add(a, m);
    }
    acc.mapv_inplace(|v| v.max(0.0));
    Ok(min_max_normalize(&acc))
}

/// Saliency map of `image` for `class` at the last convolutional layer.
pub fn score_cam(net: &Network, image: &Array2<f64>, class: usize, config: &CamConfig, source: &str) -> Result<SaliencyMap> {
    check_image(net, image, class)?;
    let taps = net.taps(image, source)?;
    let stack = taps
        .activations
        .ok_or_else(|| Error::InvalidParam("network has no convolutional layer".into()))?;
    let maps = upsample_normalize(&stack, image.nrows(), image.ncols())?;
    let weights = cic_weights(net, image, &maps, class, config)?;
    Ok(SaliencyMap {
        grid: combine_maps(&maps, &weights, image.dim())?,
        class,
        source: source.to_string(),
    })
}

/// Predicted class of `image` under `net`.
pub fn predict(net: &Network, image: &Array2<f64>) -> Result<usize> {
    Ok(net.taps(image, "")?.scores.argmax())
}

/// Score-CAM for each row of `images` (flattened) against `classes[i]`.
pub fn score_cam_batch(
    net: &Network,
    images: ArrayView2<f64>,
    classes: &[usize],
    config: &CamConfig,
    sources: &[String],
) -> Result<Vec<SaliencyMap>> {
    let shape = net.input_shape();
    images
        .axis_iter(Axis(0))
        .zip(classes)
        .zip(sources)
        .map(|((row, &c), src)| {
            let img = row
                .to_owned()
                .into_shape_with_order((shape.height, shape.width))
                .map_err(|e| Error::InvalidParam(e.to_string()))?;
            score_cam(net, &img, c, config, src)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{Activation, LayerSpec, NetworkSpec, Shape};
    use ndarray::{array, Array3};

    #[test]
    fn bilinear_2x2_to_4x4() {
        let m = array![[0.0, 1.0], [0.0, 1.0]];
        let up = upsample_bilinear(m.view(), 4, 4);
        for r in 0..4 {
            assert_eq!(up[[r, 0]], 0.0);
            assert_eq!(up[[r, 3]], 1.0);
            assert!((up[[r, 1]] - 1.0 / 3.0).abs() < 1e-12);
            assert!((up[[r, 2]] - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalisation_rules() {
        let stack = ActivationStack {
            maps: Array3::from_shape_vec((2, 2, 2), vec![3.0, 3.0, 3.0, 3.0, 2.0, 4.0, 6.0, 5.0]).unwrap(),
            source: String::new(),
        };
        let maps = upsample_normalize(&stack, 2, 2).unwrap();
        assert_eq!(maps[0], Array2::<f64>::zeros((2, 2)));
        assert_eq!(maps[1], array![[0.0, 0.5], [1.0, 0.75]]);
        assert!(upsample_normalize(&stack, 1, 1).is_err());
    }

    #[test]
    fn combination_rules() {
        let a = array![[0.0, 0.5], [1.0, 0.25]];
        let zero = combine_maps(&[a.clone()], &CicWeights(vec![0.0]), (2, 2)).unwrap();
        assert_eq!(zero, Array2::<f64>::zeros((2, 2)));
        let one = combine_maps(&[a.clone()], &CicWeights(vec![0.3]), (2, 2)).unwrap();
        assert_eq!(one, a);
        let neg = combine_maps(&[a], &CicWeights(vec![-1.0]), (2, 2)).unwrap();
        assert_eq!(neg, Array2::<f64>::zeros((2, 2)));
    }

    fn tiny_net() -> Network {
        let spec = NetworkSpec {
            input: Shape::new(1, 6, 6),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::act(Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 3 },
                LayerSpec::act(Activation::Softmax),
            ],
        };
        Network::new(spec, 11).unwrap()
    }

    #[test]
    fn identity_and_empty_masks() {
        let net = tiny_net();
        let image = Array2::from_shape_fn((6, 6), |(r, c)| ((r * 7 + c * 3) % 5) as f64 / 4.0);
        let maps = vec![Array2::zeros((6, 6)), Array2::ones((6, 6))];
        let w = cic_weights(&net, &image, &maps, 1, &CamConfig::default()).unwrap();
        assert_eq!(w.0[0], 0.0);
        let full = class_scores(&net, image.view().into_shape_with_order((1, 36)).unwrap(), 1).unwrap()[0];
        let base = class_scores(&net, Array2::zeros((1, 36)).view(), 1).unwrap()[0];
        assert!((w.0[1] - (full - base)).abs() < 1e-12);
        let bad = vec![Array2::zeros((5, 5))];
        assert!(cic_weights(&net, &image, &bad, 1, &CamConfig::default()).is_err());
    }

    #[test]
    fn saliency_is_bounded_and_deterministic() {
        let net = tiny_net();
        let image = Array2::from_shape_fn((6, 6), |(r, c)| if r == 2 { 1.0 } else { 0.1 * c as f64 });
        let a = score_cam(&net, &image, 0, &CamConfig::default(), "x").unwrap();
        let b = score_cam(&net, &image, 0, &CamConfig { batch: 1, ..CamConfig::default() }, "x").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.dim(), (6, 6));
        assert!(a.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(score_cam(&net, &image, 3, &CamConfig::default(), "x").is_err());
    }

    #[test]
    fn zero_image_has_zero_saliency() {
        let net = tiny_net();
        let s = score_cam(&net, &Array2::zeros((6, 6)), 2, &CamConfig::default(), "z").unwrap();
        assert!(s.grid.iter().all(|&v| v == 0.0));
    }
}
