use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{grad, output_grad, Loss, Target};
use super::network::{argmax, Batch, Network};
use super::optim::{Optimizer, OptimizerConfig};
use super::params::EpochStats;
use super::spec::{NetworkSpec, Shape};
use crate::error::{Error, Result};
use crate::sonogen::{Dataset, DatasetManifest, Split};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Stop early once training accuracy reaches this value.
    #[serde(default)]
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Predicted class per row of `x`.
pub fn predict_classes(net: &Network, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let p = net.predict(chunk)?;
        out.extend(p.outer_iter().map(|r| argmax(r.as_slice().unwrap())));
    }
    Ok(out)
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict_classes(net, data.x.view())?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mini-batch cross-entropy training; per-epoch loss and accuracies are
/// recorded in the returned parameters' metadata. Deterministic in
/// `config.seed`.
pub fn train_classifier_on(
    spec: NetworkSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<Network> {
    let classes = spec.output_shape()?.len();
    let distinct: std::collections::BTreeSet<_> = train.labels.iter().collect();
    if classes < 2 || distinct.len() < 2 {
        return Err(Error::InvalidParam("classifier training needs at least two classes".into()));
    }
    let mut net = Network::new(spec, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c1a5);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for b in batches(train.len(), config.batch_size, &mut rng) {
            let x = train.x.select(Axis(0), &b);
            let y: Vec<usize> = b.iter().map(|&i| train.labels[i]).collect();
            let (loss, g) = grad(&net, x.view(), Target::Classes(&y), Loss::CrossEntropy)
                .map_err(|e| match e {
                    Error::NonFiniteLoss => Error::Divergence { epoch },
                    other => other,
                })?;
            total += loss * b.len() as f64;
            opt.step(&mut net.params, &g);
        }
        if !net.params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let train_acc = accuracy(&net, train)?;
        let test_acc = test.map(|t| accuracy(&net, t)).transpose()?;
        log::debug!("epoch {epoch}: loss {:.4} train {train_acc:.3} test {test_acc:?}", total / train.len() as f64);
        net.params.meta.history.push(EpochStats {
            epoch,
            loss: total / train.len() as f64,
            train_accuracy: Some(train_acc),
            test_accuracy: test_acc,
        });
        net.params.meta.epochs = epoch;
        if config.target_train_accuracy.is_some_and(|t| train_acc >= t) {
            break;
        }
    }
    net.params.quantize_f32();
    Ok(net)
}

/// Trains on the manifest's train split and reports test accuracy per epoch.
pub fn train_classifier(
    manifest: &DatasetManifest,
    dir: &Path,
    spec: NetworkSpec,
    config: &TrainConfig,
) -> Result<Network> {
    if manifest.num_classes() < 2 {
        return Err(Error::InvalidParam("manifest has fewer than two classes".into()));
    }
    let train = manifest.load_split(dir, Split::Train)?;
    let test = manifest.load_split(dir, Split::Test)?;
    train_classifier_on(spec, &train, (!test.is_empty()).then_some(&test), config)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub train: TrainConfig,
    /// Keep the encoder (classifier trunk) fixed and train only the decoder.
    pub freeze_encoder: bool,
    /// Scale embeddings to unit L2 norm before decoding.
    pub normalize_embedding: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 200,
                batch_size: 40,
                ..TrainConfig::default()
            },
            freeze_encoder: true,
            normalize_embedding: true,
        }
    }
}

/// Encoder (a classifier truncated at its embedding tap) plus decoder.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Network,
    pub decoder: Network,
    pub normalize_embedding: bool,
}

/// Scales each row to unit L2 norm; zero rows stay zero.
pub fn normalize_rows(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

impl Autoencoder {
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Batch> {
        let mut e = self.encoder.embeddings(x)?;
        if self.normalize_embedding {
            normalize_rows(&mut e);
        }
        Ok(e)
    }

    pub fn decode(&self, embeddings: ArrayView2<f64>) -> Result<Batch> {
        self.decoder.predict(embeddings)
    }
}

/// Trains a decoder (and optionally the encoder) with binary cross-entropy
/// reconstruction loss. The per-epoch loss curve lands in the decoder's
/// metadata.
pub fn train_autoencoder(
    train: &Dataset,
    encoder: &Network,
    decoder_spec: NetworkSpec,
    config: &AutoencoderConfig,
) -> Result<Autoencoder> {
    let tap = encoder
        .spec
        .embedding_tap()
        .ok_or_else(|| Error::InvalidParam("encoder has no embedding tap".into()))?;
    let emb_dim = encoder.shapes()[tap].len();
    if decoder_spec.input != Shape::flat(emb_dim) {
        return Err(Error::shape(Shape::flat(emb_dim), decoder_spec.input));
    }
    let out = decoder_spec.output_shape()?;
    if out.len() != encoder.input_shape().len() {
        return Err(Error::shape(encoder.input_shape(), out));
    }
    if train.is_empty() {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    let tc = &config.train;
    let mut ae = Autoencoder {
        encoder: encoder.clone(),
        decoder: Network::new(decoder_spec, tc.seed)?,
        normalize_embedding: config.normalize_embedding,
    };
    let mut dec_opt = Optimizer::new(tc.optimizer, &ae.decoder.params);
    let mut enc_opt = Optimizer::new(tc.optimizer, &ae.encoder.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xae_ae);
    let frozen = config.freeze_encoder.then(|| ae.encode(train.x.view())).transpose()?;

    for epoch in 1..=tc.epochs {
        let mut total = 0.0;
        for b in batches(train.len(), tc.batch_size, &mut rng) {
            let x = train.x.select(Axis(0), &b);
            let loss = match &frozen {
                Some(emb) => {
                    let e = emb.select(Axis(0), &b);
                    let (loss, g) = grad(&ae.decoder, e.view(), Target::Values(x.view()), Loss::Bce)
                        .map_err(|_| Error::Divergence { epoch })?;
                    dec_opt.step(&mut ae.decoder.params, &g);
                    loss
                }
                None => {
                    let enc_trace = ae.encoder.forward_prefix(x.view(), tap)?;
                    let raw = &enc_trace.outputs[tap];
                    let mut e = raw.clone();
                    if config.normalize_embedding {
                        normalize_rows(&mut e);
                    }
                    let dec_trace = ae.decoder.forward(e.view())?;
                    let (loss, at, g) =
                        output_grad(&ae.decoder, &dec_trace, Loss::Bce, Target::Values(x.view()))
                            .map_err(|_| Error::Divergence { epoch })?;
                    let (gd, mut de) = ae.decoder.backward(&dec_trace, at, g, true);
                    if config.normalize_embedding {
                        de = normalize_backward(raw, &e, de);
                    }
                    let ge = ae.encoder.param_gradients(&enc_trace, tap, de);
                    dec_opt.step(&mut ae.decoder.params, &gd);
                    enc_opt.step(&mut ae.encoder.params, &ge);
                    loss
                }
            };
            total += loss * b.len() as f64;
        }
        ae.decoder.params.meta.history.push(EpochStats {
            epoch,
            loss: total / train.len() as f64,
            ..EpochStats::default()
        });
        ae.decoder.params.meta.epochs = epoch;
    }
    ae.decoder.params.quantize_f32();
    ae.encoder.params.quantize_f32();
    Ok(ae)
}

/// Gradient of `e / |e|` given the upstream gradient on the normalised rows.
fn normalize_backward(raw: &Batch, normed: &Batch, upstream: Batch) -> Batch {
    let mut out = upstream;
    for ((mut g, r), n) in out.outer_iter_mut().zip(raw.outer_iter()).zip(normed.outer_iter()) {
        let norm = r.dot(&r).sqrt();
        if norm == 0.0 {
            continue;
        }
        let proj = g.dot(&n);
        ndarray::Zip::from(&mut g).and(&n).for_each(|gv, &nv| *gv = (*gv - nv * proj) / norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::spec::{Activation, LayerSpec};
    use ndarray::array;

    fn toy_data() -> Dataset {
        // two 4x4 classes: bright top row vs bright bottom row
        let mut x = Array2::zeros((10, 16));
        let mut labels = Vec::new();
        for i in 0..10 {
            let c = i % 2;
            for j in 0..4 {
                x[[i, if c == 0 { j } else { 12 + j }]] = 1.0;
            }
            x[[i, 5 + (i % 3)]] = 0.3;
            labels.push(c);
        }
        Dataset {
            x,
            labels,
            ids: (0..10).map(|i| format!("s{i}")).collect(),
        }
    }

    fn tiny_classifier() -> NetworkSpec {
        NetworkSpec {
            input: Shape::new(1, 4, 4),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::act(Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 6 },
                LayerSpec::act(Activation::Relu),
                LayerSpec::Dense { width: 4 },
                LayerSpec::act(Activation::Relu),
                LayerSpec::Dense { width: 2 },
                LayerSpec::act(Activation::Softmax),
            ],
        }
    }

    #[test]
    fn overfits_toy_set_and_is_deterministic() {
        let data = toy_data();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 5,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 1,
            target_train_accuracy: Some(1.0),
        };
        let a = train_classifier_on(tiny_classifier(), &data, None, &cfg).unwrap();
        let b = train_classifier_on(tiny_classifier(), &data, None, &cfg).unwrap();
        assert_eq!(accuracy(&a, &data).unwrap(), 1.0);
        assert_eq!(a, b);
        assert!(a.params.meta.history.len() <= 200);
    }

    #[test]
    fn single_class_training_is_rejected() {
        let mut data = toy_data();
        data.labels.iter_mut().for_each(|l| *l = 0);
        assert!(train_classifier_on(tiny_classifier(), &data, None, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut data = toy_data();
        data.x[[0, 0]] = f64::NAN;
        let err = train_classifier_on(tiny_classifier(), &data, None, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1 }));
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let raw = array![[0.3, -1.2, 0.5]];
        let up = array![[0.7, 0.1, -0.4]];
        let f = |r: &Array2<f64>| {
            let mut n = r.clone();
            normalize_rows(&mut n);
            (&n * &up).sum()
        };
        let mut normed = raw.clone();
        normalize_rows(&mut normed);
        let g = normalize_backward(&raw, &normed, up.clone());
        for j in 0..3 {
            let mut p = raw.clone();
            let mut m = raw.clone();
            p[[0, j]] += 1e-6;
            m[[0, j]] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn autoencoder_loss_decreases_and_output_is_bounded() {
        let data = toy_data();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 5,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 2,
            target_train_accuracy: None,
        };
        let clf = train_classifier_on(tiny_classifier(), &data, None, &cfg).unwrap();
        let dec = NetworkSpec {
            input: Shape::flat(4),
            layers: vec![
                LayerSpec::Dense { width: 16 },
                LayerSpec::act(Activation::Sigmoid),
            ],
        };
        for freeze in [true, false] {
            let ae_cfg = AutoencoderConfig {
                train: cfg,
                freeze_encoder: freeze,
                normalize_embedding: true,
            };
            let ae = train_autoencoder(&data, &clf, dec.clone(), &ae_cfg).unwrap();
            let h = &ae.decoder.params.meta.history;
            assert!(h.last().unwrap().loss < h[0].loss, "freeze = {freeze}");
            let rec = ae.decode(ae.encode(data.x.view()).unwrap().view()).unwrap();
            assert_eq!(rec.dim(), (10, 16));
            assert!(rec.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let bad = NetworkSpec {
            input: Shape::flat(5),
            layers: vec![LayerSpec::Dense { width: 16 }],
        };
        assert!(train_autoencoder(&data, &clf, bad, &AutoencoderConfig::default()).is_err());
    }
}
