use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::network::{Batch, Network, Trace};
use super::params::Gradients;
use super::spec::{Activation, LayerSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
    Bce,
}

#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Class index per sample.
    Classes(&'a [usize]),
    /// Target values, same shape as the network output.
    Values(ArrayView2<'a, f64>),
}

const P_FLOOR: f64 = 1e-12;

/// Mean loss over the batch and its gradient, expressed at trace index
/// `grad_at`. Softmax + cross-entropy and sigmoid + BCE are fused so the
/// gradient enters below the final activation.
pub fn output_grad(
    net: &Network,
    trace: &Trace,
    loss: Loss,
    target: Target<'_>,
) -> Result<(f64, usize, Batch)> {
    let n_layers = net.spec.layers.len();
    let out = trace.output();
    let batch = out.nrows() as f64;
    let last_act = match net.spec.layers.last() {
        Some(LayerSpec::Activation { function }) => Some(*function),
        _ => None,
    };
    let (value, at, grad) = match (loss, target) {
        (Loss::CrossEntropy, Target::Classes(labels)) => {
            check_labels(labels, out)?;
            if last_act == Some(Activation::Softmax) {
                let logits = &trace.outputs[n_layers - 1];
                let mut value = 0.0;
                let mut grad = out.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = logits.row(i);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                    value += lse - row[y];
                    grad[[i, y]] -= 1.0;
                }
                (value / batch, n_layers - 1, grad / batch)
            } else {
                let mut value = 0.0;
                let mut grad = Array2::zeros(out.dim());
                for (i, &y) in labels.iter().enumerate() {
                    let p = out[[i, y]].max(P_FLOOR);
                    value -= p.ln();
                    grad[[i, y]] = -1.0 / (p * batch);
                }
                (value / batch, n_layers, grad)
            }
        }
        (Loss::Mse, Target::Values(t)) => {
            check_values(&t, out)?;
            let n = out.len() as f64;
            let diff = out - &t;
            let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
            (value, n_layers, diff * (2.0 / n))
        }
        (Loss::Bce, Target::Values(t)) => {
            check_values(&t, out)?;
            let n = out.len() as f64;
            if last_act == Some(Activation::Sigmoid) {
                let logits = &trace.outputs[n_layers - 1];
                let mut value = 0.0;
                ndarray::Zip::from(logits).and(&t).for_each(|&z, &y| {
                    value += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                });
                (value / n, n_layers - 1, (out - &t) / n)
            } else {
                let mut value = 0.0;
                let mut grad = Array2::zeros(out.dim());
                ndarray::Zip::from(&mut grad).and(out).and(&t).for_each(|g, &p, &y| {
                    let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
                    value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                    *g = (p - y) / (p * (1.0 - p) * n);
                });
                (value / n, n_layers, grad)
            }
        }
        (loss, _) => {
            return Err(Error::InvalidParam(format!(
                "target kind does not match loss {loss:?}"
            )))
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((value, at, grad))
}

fn check_labels(labels: &[usize], out: &Batch) -> Result<()> {
    if labels.len() != out.nrows() {
        return Err(Error::shape(out.nrows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= out.ncols()) {
        return Err(Error::InvalidParam(format!("label {bad} out of range")));
    }
    Ok(())
}

fn check_values(t: &ArrayView2<f64>, out: &Batch) -> Result<()> {
    if t.dim() != out.dim() {
        return Err(Error::shape(format!("{:?}", out.dim()), format!("{:?}", t.dim())));
    }
    Ok(())
}

/// Mean loss and exact parameter gradients over a non-empty batch.
pub fn grad(net: &Network, x: ArrayView2<f64>, target: Target<'_>, loss: Loss) -> Result<(f64, Gradients)> {
    if x.nrows() == 0 {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let trace = net.forward(x)?;
    let (value, at, g) = output_grad(net, &trace, loss, target)?;
    let grads = net.param_gradients(&trace, at, g);
    Ok((value, grads))
}

/// Mean loss without gradients.
pub fn loss_value(net: &Network, x: ArrayView2<f64>, target: Target<'_>, loss: Loss) -> Result<f64> {
    let trace = net.forward(x)?;
    Ok(output_grad(net, &trace, loss, target)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::params::NetworkParams;
    use crate::nnkit::spec::{NetworkSpec, Shape};
    use ndarray::array;

    fn softmax_head(inputs: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            input: Shape::flat(inputs),
            layers: vec![
                LayerSpec::Dense { width: classes },
                LayerSpec::act(Activation::Softmax),
            ],
        }
    }

    #[test]
    fn zero_net_bias_grad_is_mean_prediction_error() {
        let spec = softmax_head(3, 3);
        let net = Network::with_params(spec.clone(), NetworkParams::zeros(&spec).unwrap()).unwrap();
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let labels = [0, 1, 2, 0];
        let (_, g) = grad(&net, x.view(), Target::Classes(&labels), Loss::CrossEntropy).unwrap();
        let gb = &g[0].as_ref().unwrap().b;
        // predicted = 1/3 everywhere; onehot mean = (2/4, 1/4, 1/4)
        let want = [1.0 / 3.0 - 0.5, 1.0 / 3.0 - 0.25, 1.0 / 3.0 - 0.25];
        for (a, b) in gb.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_sample_has_same_gradient() {
        let spec = softmax_head(4, 2);
        let net = Network::new(spec, 3).unwrap();
        let one = array![[0.2, -0.4, 0.9, 0.1]];
        let two = array![[0.2, -0.4, 0.9, 0.1], [0.2, -0.4, 0.9, 0.1]];
        let (l1, g1) = grad(&net, one.view(), Target::Classes(&[1]), Loss::CrossEntropy).unwrap();
        let (l2, g2) = grad(&net, two.view(), Target::Classes(&[1, 1]), Loss::CrossEntropy).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        let (a, b) = (g1[0].as_ref().unwrap(), g2[0].as_ref().unwrap());
        for (x, y) in a.values().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_input_is_reported_as_non_finite_loss() {
        let net = Network::new(softmax_head(2, 2), 1).unwrap();
        let x = array![[f64::NAN, 0.0]];
        let err = grad(&net, x.view(), Target::Classes(&[0]), Loss::CrossEntropy).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss));
    }

    #[test]
    fn rejects_empty_batch_and_mismatched_targets() {
        let net = Network::new(softmax_head(2, 2), 1).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(grad(&net, empty.view(), Target::Classes(&[]), Loss::CrossEntropy).is_err());
        let x = array![[0.0, 1.0]];
        assert!(grad(&net, x.view(), Target::Classes(&[5]), Loss::CrossEntropy).is_err());
        assert!(grad(&net, x.view(), Target::Classes(&[0]), Loss::Mse).is_err());
    }
}
