#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonalsig::nnkit::{grad, loss_value, Activation, LayerSpec, Loss, Network, NetworkSpec, Shape, Target};

/// Toy nets that together cover every layer kind.
pub fn toy_nets() -> Vec<(&'static str, NetworkSpec, Loss)> {
    use Activation::*;
    vec![
        (
            "conv-pool-dense-softmax",
            NetworkSpec {
                input: Shape::new(2, 6, 6),
                layers: vec![
                    LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1 },
                    LayerSpec::act(Relu),
                    LayerSpec::MaxPool { size: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { width: 5 },
                    LayerSpec::act(Relu),
                    LayerSpec::Dense { width: 3 },
                    LayerSpec::act(Softmax),
                ],
            },
            Loss::CrossEntropy,
        ),
        (
            "dense-reshape-convT-sigmoid",
            NetworkSpec {
                input: Shape::flat(4),
                layers: vec![
                    LayerSpec::Dense { width: 2 * 2 * 3 },
                    LayerSpec::act(Relu),
                    LayerSpec::Reshape { channels: 3, height: 2, width: 2 },
                    LayerSpec::ConvTranspose { out_channels: 2, kernel: 4, stride: 2, padding: 1 },
                    LayerSpec::act(Relu),
                    LayerSpec::ConvTranspose { out_channels: 1, kernel: 4, stride: 2, padding: 1 },
                    LayerSpec::act(Sigmoid),
                ],
            },
            Loss::Bce,
        ),
        (
            "strided-conv-dense-linear",
            NetworkSpec {
                input: Shape::new(1, 7, 7),
                layers: vec![
                    LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 2 },
                    LayerSpec::act(Sigmoid),
                    LayerSpec::Flatten,
                    LayerSpec::Dense { width: 4 },
                    LayerSpec::act(Linear),
                    LayerSpec::Dense { width: 2 },
                ],
            },
            Loss::Mse,
        ),
        (
            "dense-softmax-prob-ce",
            NetworkSpec {
                input: Shape::flat(5),
                layers: vec![
                    LayerSpec::Dense { width: 4 },
                    LayerSpec::act(Sigmoid),
                    LayerSpec::Dense { width: 3 },
                    LayerSpec::act(Softmax),
                    LayerSpec::act(Linear),
                ],
            },
            Loss::CrossEntropy,
        ),
    ]
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
}

/// Central finite differences with step `h` against the analytic gradient
/// at a random parameter point drawn from `seed`.
pub fn grad_check(spec: &NetworkSpec, loss: Loss, seed: u64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(spec.clone(), seed).unwrap();
    for v in net.params.values_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
    let batch = 3;
    let x = Array2::from_shape_simple_fn((batch, spec.input.len()), || rng.random_range(0.0..1.0));
    let out = net.output_shape().len();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..out)).collect();
    let values = Array2::from_shape_simple_fn((batch, out), || rng.random_range(0.0..1.0));
    let target = |l: Loss| match l {
        Loss::CrossEntropy => Target::Classes(&labels),
        _ => Target::Values(values.view()),
    };
    let (_, analytic) = grad(&net, x.view(), target(loss), loss).unwrap();
    let analytic: Vec<f64> = analytic.iter().flatten().flat_map(|l| l.values().copied()).collect();
    let n = net.params.count();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = *net.params.values().nth(i).unwrap();
        *net.params.values_mut().nth(i).unwrap() = orig + h;
        let up = loss_value(&net, x.view(), target(loss), loss).unwrap();
        *net.params.values_mut().nth(i).unwrap() = orig - h;
        let down = loss_value(&net, x.view(), target(loss), loss).unwrap();
        *net.params.values_mut().nth(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    GradCheck { checked: n, worst_rel: worst }
}
