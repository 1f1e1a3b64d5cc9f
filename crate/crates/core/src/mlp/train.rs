//! Mini-batch AdamW training with cross-entropy loss.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{gelu, gelu_prime, MlpParams, ModelSnapshot, Regime, INPUT_DIM};
use crate::error::{Error, Result};
use crate::mnist::{self, ImageSet, LabelSet, NormalizationSpec};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub max_shift: usize,
    pub eval_every: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 200,
            seed: 0,
            augment: false,
            max_shift: 4,
            eval_every: 10,
            norm_mean: NormalizationSpec::MNIST.mean(),
            norm_std: NormalizationSpec::MNIST.std(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("learning_rate and epsilon must be > 0, weight_decay >= 0");
        }
        if self.max_shift > mnist::MAX_TRANSLATION {
            return bad("max_shift out of range");
        }
        NormalizationSpec::new(self.norm_mean, self.norm_std)?;
        Ok(())
    }

    pub fn normalization(&self) -> NormalizationSpec {
        NormalizationSpec::new(self.norm_mean, self.norm_std).expect("validated")
    }

    pub fn regime(&self) -> Regime {
        if self.augment {
            Regime::Augmented
        } else {
            Regime::Standard
        }
    }

    fn is_snapshot_epoch(&self, epoch: usize) -> bool {
        epoch == 0 || epoch % self.eval_every == 0 || epoch == self.epochs
    }
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Epoch 0 first, then every `eval_every` epochs and the final epoch.
    pub snapshots: Vec<ModelSnapshot>,
    /// `losses[0]` is the full training-set loss at initialization;
    /// `losses[e]` the mean mini-batch loss of epoch `e`.
    pub losses: Vec<f64>,
}

struct Batch {
    x: Array2<f64>,
    labels: Vec<u8>,
}

struct Activations {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    logits: Array2<f64>,
}

fn forward_batch(p: &MlpParams, x: ArrayView2<f64>) -> Activations {
    let z1 = x.dot(&p.w0.t()) + &p.b0;
    let a1 = z1.mapv(gelu);
    let z2 = a1.dot(&p.w1.t()) + &p.b1;
    let a2 = z2.mapv(gelu);
    let logits = a2.dot(&p.w_out.t()) + &p.b_out;
    Activations {
        z1,
        a1,
        z2,
        a2,
        logits,
    }
}

/// Row-wise softmax in place; returns summed cross-entropy.
fn softmax_cross_entropy(logits: &mut Array2<f64>, labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (mut row, &y) in logits.axis_iter_mut(Axis(0)).zip(labels) {
        // `f64::max` skips NaN, so a poisoned row must be caught explicitly.
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let target = row[y as usize];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        total += max + sum.ln() - target;
    }
    total
}

struct Grads {
    w0: Array2<f64>,
    b0: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

/// Mean cross-entropy over the batch and its parameter gradient.
fn loss_and_grad(p: &MlpParams, batch: &Batch) -> (f64, Grads) {
    let acts = forward_batch(p, batch.x.view());
    let n = batch.labels.len() as f64;
    let mut d_logits = acts.logits.clone();
    let loss = softmax_cross_entropy(&mut d_logits, &batch.labels) / n;
    for (mut row, &y) in d_logits.axis_iter_mut(Axis(0)).zip(&batch.labels) {
        row[y as usize] -= 1.0;
    }
    d_logits /= n;

    let w_out = d_logits.t().dot(&acts.a2);
    let b_out = d_logits.sum_axis(Axis(0));
    let mut d_z2 = d_logits.dot(&p.w_out);
    Zip::from(&mut d_z2)
        .and(&acts.z2)
        .for_each(|d, &z| *d *= gelu_prime(z));
    let w1 = d_z2.t().dot(&acts.a1);
    let b1 = d_z2.sum_axis(Axis(0));
    let mut d_z1 = d_z2.dot(&p.w1);
    Zip::from(&mut d_z1)
        .and(&acts.z1)
        .for_each(|d, &z| *d *= gelu_prime(z));
    let w0 = d_z1.t().dot(&batch.x);
    let b0 = d_z1.sum_axis(Axis(0));
    (
        loss,
        Grads {
            w0,
            b0,
            w1,
            b1,
            w_out,
            b_out,
        },
    )
}

struct AdamW {
    m: MlpParams,
    v: MlpParams,
    step: i32,
}

impl AdamW {
    fn new(h: usize) -> Self {
        AdamW {
            m: MlpParams::zeros(h),
            v: MlpParams::zeros(h),
            step: 0,
        }
    }

    fn update(&mut self, p: &mut MlpParams, g: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let lr = cfg.learning_rate;
        let decay = 1.0 - lr * cfg.weight_decay;
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
        macro_rules! step {
            ($field:ident, $decay:expr) => {
                Zip::from(&mut p.$field)
                    .and(&g.$field)
                    .and(&mut self.m.$field)
                    .and(&mut self.v.$field)
                    .for_each(|w, &gr, m, v| {
                        *w *= $decay;
                        *m = b1 * *m + (1.0 - b1) * gr;
                        *v = b2 * *v + (1.0 - b2) * gr * gr;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    })
            };
        }
        step!(w0, decay);
        step!(w1, decay);
        step!(w_out, decay);
        step!(b0, 1.0);
        step!(b1, 1.0);
        step!(b_out, 1.0);
    }
}

fn assemble_batch(
    images: &ImageSet,
    labels: &LabelSet,
    indices: &[usize],
    norm: NormalizationSpec,
    augment: Option<(&mut seed::Rng, usize)>,
) -> Batch {
    let mut x = Array2::zeros((indices.len(), INPUT_DIM));
    let ys = labels.as_slice();
    match augment {
        Some((rng, max_shift)) => {
            for (mut row, &i) in x.axis_iter_mut(Axis(0)).zip(indices) {
                let shifted = mnist::random_translate(images.image(i), max_shift, 0.0, rng)
                    .expect("max_shift validated");
                row.iter_mut()
                    .zip(&shifted)
                    .for_each(|(dst, &p)| *dst = norm.apply(p));
            }
        }
        None => {
            for (mut row, &i) in x.axis_iter_mut(Axis(0)).zip(indices) {
                row.iter_mut()
                    .zip(images.image(i))
                    .for_each(|(dst, &p)| *dst = norm.apply(p));
            }
        }
    }
    Batch {
        x,
        labels: indices.iter().map(|&i| ys[i]).collect(),
    }
}

const EVAL_CHUNK: usize = 1000;

/// Mean cross-entropy on raw images (normalized on the fly).
pub fn mean_loss(
    params: &MlpParams,
    images: &ImageSet,
    labels: &LabelSet,
    norm: NormalizationSpec,
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "loss needs nonempty, paired data".into(),
        ));
    }
    let all: Vec<usize> = (0..images.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = assemble_batch(images, labels, chunk, norm, None);
        let mut logits = forward_batch(params, batch.x.view()).logits;
        total += softmax_cross_entropy(&mut logits, &batch.labels);
    }
    Ok(total / images.len() as f64)
}

/// Fraction of raw images whose argmax logit equals the label.
pub fn accuracy(
    params: &MlpParams,
    images: &ImageSet,
    labels: &LabelSet,
    norm: NormalizationSpec,
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "accuracy needs nonempty, paired data".into(),
        ));
    }
    let all: Vec<usize> = (0..images.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = assemble_batch(images, labels, chunk, norm, None);
        let logits = forward_batch(params, batch.x.view()).logits;
        for (row, &y) in logits.axis_iter(Axis(0)).zip(&batch.labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            correct += usize::from(pred == y as usize);
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

pub fn train(
    params: MlpParams,
    images: &ImageSet,
    labels: &LabelSet,
    config: &TrainConfig,
) -> Result<TrainRun> {
    train_with_progress(params, images, labels, config, |_| {})
}

/// Trains on raw `[0,1]` images. Augmentation (if enabled) translates raw
/// pixels with black fill, then normalizes.
pub fn train_with_progress<F>(
    mut params: MlpParams,
    images: &ImageSet,
    labels: &LabelSet,
    config: &TrainConfig,
    mut progress: F,
) -> Result<TrainRun>
where
    F: FnMut(&EpochReport),
{
    config.validate()?;
    params.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "training needs nonempty, paired data".into(),
        ));
    }
    let norm = config.normalization();
    let regime = config.regime();
    let h = params.hidden_dim();
    let snapshot = |params: &MlpParams, epoch| ModelSnapshot {
        params: params.clone(),
        epoch,
        seed: config.seed,
        regime,
    };

    let initial_loss = mean_loss(&params, images, labels, norm)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    progress(&EpochReport {
        epoch: 0,
        loss: initial_loss,
    });
    let mut losses = vec![initial_loss];
    let mut snapshots = vec![snapshot(&params, 0)];

    let mut opt = AdamW::new(h);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 1..=config.epochs {
        let mut shuffle_rng = seed::rng_from(config.seed, &[tag::SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = seed::rng_from(config.seed, &[tag::AUGMENT, epoch as u64]);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let augment = config.augment.then_some((&mut aug_rng, config.max_shift));
            let batch = assemble_batch(images, labels, chunk, norm, augment);
            let (loss, grads) = loss_and_grad(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            opt.update(&mut params, &grads, config);
        }
        let loss = epoch_loss / images.len() as f64;
        losses.push(loss);
        progress(&EpochReport { epoch, loss });
        if config.is_snapshot_epoch(epoch) {
            snapshots.push(snapshot(&params, epoch));
        }
    }
    Ok(TrainRun { snapshots, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{forward, init_params};
    use crate::mnist::NUM_CLASSES;

    fn toy_data(n: usize, seed: u64) -> (ImageSet, LabelSet) {
        use rand::Rng;
        let mut rng = seed::rng_from(seed, &[77]);
        let mut pixels = Vec::with_capacity(n * INPUT_DIM);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % NUM_CLASSES) as u8;
            for p in 0..INPUT_DIM {
                let on = p / 78 == class as usize;
                let noise: f64 = rng.random_range(0.0..0.2);
                pixels.push(if on { 0.8 + noise } else { noise });
            }
            labels.push(class);
        }
        (
            ImageSet::from_pixels(pixels).unwrap(),
            LabelSet::from_labels(labels).unwrap(),
        )
    }

    #[test]
    fn batch_gradient_matches_finite_difference() {
        let (images, labels) = toy_data(5, 1);
        let mut p = init_params(6, 2).unwrap();
        p.b0.fill(0.05);
        p.b_out[3] = -0.1;
        let batch = assemble_batch(
            &images,
            &labels,
            &[0, 1, 2, 3, 4],
            NormalizationSpec::MNIST,
            None,
        );
        let loss_at = |q: &MlpParams| {
            let mut logits = forward_batch(q, batch.x.view()).logits;
            softmax_cross_entropy(&mut logits, &batch.labels) / 5.0
        };
        let (_, g) = loss_and_grad(&p, &batch);
        let eps = 1e-6;
        let checks: [(usize, usize); 3] = [(0, 0), (2, 400), (5, 783)];
        for (i, j) in checks {
            let mut plus = p.clone();
            plus.w0[[i, j]] += eps;
            let mut minus = p.clone();
            minus.w0[[i, j]] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            assert!((fd - g.w0[[i, j]]).abs() < 1e-7, "w0[{i},{j}]");
        }
        for i in 0..6 {
            let mut plus = p.clone();
            plus.b1[i] += eps;
            let mut minus = p.clone();
            minus.b1[i] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            assert!((fd - g.b1[i]).abs() < 1e-7);
            let mut plus = p.clone();
            plus.w_out[[i % 10, i]] += eps;
            let mut minus = p.clone();
            minus.w_out[[i % 10, i]] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            assert!((fd - g.w_out[[i % 10, i]]).abs() < 1e-7);
        }
    }

    #[test]
    fn batch_forward_agrees_with_single_sample() {
        let (images, labels) = toy_data(3, 4);
        let p = init_params(5, 8).unwrap();
        let norm = NormalizationSpec::MNIST;
        let batch = assemble_batch(&images, &labels, &[0, 1, 2], norm, None);
        let acts = forward_batch(&p, batch.x.view());
        for r in 0..3 {
            let x: Vec<f64> = images.image(r).iter().map(|&v| norm.apply(v)).collect();
            let single = forward(&p, &x);
            for (a, b) in acts.logits.row(r).iter().zip(&single.logits) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (images, labels) = toy_data(200, 3);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            eval_every: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let init = init_params(16, 9).unwrap();
        let a = train(init.clone(), &images, &labels, &cfg).unwrap();
        let b = train(init.clone(), &images, &labels, &cfg).unwrap();
        assert!(a.losses[5] < a.losses[0]);
        assert_eq!(a.losses, b.losses);
        let epochs: Vec<usize> = a.snapshots.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 4, 5]);
        assert_eq!(a.snapshots[0].params, init);
        assert_eq!(
            a.snapshots.last().unwrap().params,
            b.snapshots.last().unwrap().params
        );
        let acc = accuracy(
            &a.snapshots[3].params,
            &images,
            &labels,
            NormalizationSpec::MNIST,
        )
        .unwrap();
        assert!(acc > 0.9, "toy accuracy {acc}");
    }

    #[test]
    fn augmented_training_is_deterministic() {
        let (images, labels) = toy_data(64, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            augment: true,
            seed: 1,
            ..TrainConfig::default()
        };
        let init = init_params(8, 1).unwrap();
        let a = train(init.clone(), &images, &labels, &cfg).unwrap();
        let b = train(init, &images, &labels, &cfg).unwrap();
        assert_eq!(
            a.snapshots.last().unwrap().params,
            b.snapshots.last().unwrap().params
        );
        assert_eq!(a.snapshots[0].regime, Regime::Augmented);
    }

    #[test]
    fn divergence_is_reported() {
        let (images, labels) = toy_data(20, 6);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let mut init = init_params(4, 0).unwrap();
        init.w0.fill(f64::MAX);
        let err = train(init, &images, &labels, &cfg).unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence { .. } | Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn zero_epochs_yields_only_initial_snapshot() {
        let (images, labels) = toy_data(10, 7);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let init = init_params(4, 0).unwrap();
        let run = train(init.clone(), &images, &labels, &cfg).unwrap();
        assert_eq!(run.snapshots.len(), 1);
        assert_eq!(run.snapshots[0].params, init);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn accuracy_on_perfect_toy_is_one() {
        // Labels chosen to equal the argmax of an untrained net.
        let (images, _) = toy_data(3, 8);
        let p = init_params(4, 2).unwrap();
        let norm = NormalizationSpec::MNIST;
        let preds: Vec<u8> = (0..3)
            .map(|i| {
                let x: Vec<f64> = images.image(i).iter().map(|&v| norm.apply(v)).collect();
                let l = forward(&p, &x).logits;
                (0..10).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap() as u8
            })
            .collect();
        let labels = LabelSet::from_labels(preds).unwrap();
        assert_eq!(accuracy(&p, &images, &labels, norm).unwrap(), 1.0);
    }
}
