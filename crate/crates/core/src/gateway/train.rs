//! Mini-batch training of [`Mlp`] with softmax cross-entropy and momentum SGD.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mlp::Scratch;
use super::{Mlp, MlpLayer, SYNTHETIC_LAYOUT};
use crate::data::{DatasetSplits, SyntheticPoint};
use crate::numerics::{derive_seed, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss} (last finite epoch loss {last_finite:?})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        last_finite: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate at the last epoch as a fraction of the initial rate;
    /// the rate follows a cosine curve between the two.
    pub final_lr_fraction: f64,
    pub layout: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            final_lr_fraction: 0.05,
            layout: SYNTHETIC_LAYOUT.to_vec(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final learning-rate fraction must be in (0, 1]");
        }
        if self.layout.len() < 2 || self.layout[0] != 20 || self.layout.iter().any(|&w| w == 0) {
            return bad("layout must start at 20 inputs and have positive widths");
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.learning_rate;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
}

/// Gradient buffers shaped like the network's layers.
#[derive(Clone, Debug)]
pub(crate) struct Gradient {
    layers: Vec<MlpLayer>,
}

impl Gradient {
    pub(crate) fn zeros_like(m: &Mlp) -> Self {
        let mut layers = m.layers().to_vec();
        for l in &mut layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.biases.iter_mut().for_each(|v| *v = 0.0);
        }
        Self { layers }
    }

    fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.biases.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same ordering as [`Mlp::parameter`].
    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }
}

/// Per-sample activations kept for the backward pass.
struct Tape {
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Tape {
    fn new(m: &Mlp) -> Self {
        Self {
            activations: vec![Vec::new(); m.layers().len() + 1],
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }
}

/// Adds the cross-entropy gradient of one sample into `grad`, scaled by
/// `scale`, and returns the sample's loss.
fn accumulate_sample(m: &Mlp, input: &[f64], label: usize, scale: f64, tape: &mut Tape, grad: &mut Gradient) -> f64 {
    let layers = m.layers();
    let last = layers.len() - 1;
    tape.activations[0].clear();
    tape.activations[0].extend_from_slice(input);
    for (li, layer) in layers.iter().enumerate() {
        let (before, after) = tape.activations.split_at_mut(li + 1);
        layer.affine_into(&before[li], &mut after[0]);
        if li != last {
            after[0].iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    let logits = &tape.activations[last + 1];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum_exp.ln();
    let loss = log_norm - logits[label];

    tape.delta.clear();
    tape.delta.extend(logits.iter().map(|z| (z - log_norm).exp()));
    tape.delta[label] -= 1.0;
    tape.delta.iter_mut().for_each(|d| *d *= scale);

    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let g = &mut grad.layers[li];
        let input_act = &tape.activations[li];
        for (b, d) in g.biases.iter_mut().zip(&tape.delta) {
            *b += d;
        }
        for (i, &a) in input_act.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &mut g.weights[i * layer.outputs..(i + 1) * layer.outputs];
            for (w, d) in row.iter_mut().zip(&tape.delta) {
                *w += a * d;
            }
        }
        if li == 0 {
            break;
        }
        tape.delta_prev.clear();
        for (i, &a) in input_act.iter().enumerate() {
            // Rectifier derivative: only units that fired pass gradient back.
            if a > 0.0 {
                let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                tape.delta_prev.push(row.iter().zip(&tape.delta).map(|(w, d)| w * d).sum());
            } else {
                tape.delta_prev.push(0.0);
            }
        }
        std::mem::swap(&mut tape.delta, &mut tape.delta_prev);
    }
    loss
}

/// Mean cross-entropy loss over `(input, label)` pairs and its gradient,
/// flattened like [`Mlp::parameter`].
pub fn loss_and_gradient(m: &Mlp, batch: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
    let mut grad = Gradient::zeros_like(m);
    let mut tape = Tape::new(m);
    let scale = 1.0 / batch.len() as f64;
    let loss: f64 = batch
        .iter()
        .map(|(x, y)| accumulate_sample(m, x, *y, scale, &mut tape, &mut grad))
        .sum();
    (loss * scale, grad.flat())
}

/// Mean cross-entropy loss alone, by plain forward passes.
pub fn mean_loss(m: &Mlp, batch: &[(Vec<f64>, usize)]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|(x, y)| {
            let z = m.forward(x);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            log_norm - z[*y]
        })
        .sum();
    total / batch.len() as f64
}

fn input_of(p: &SyntheticPoint) -> Vec<f64> {
    let mut x = Vec::with_capacity(p.d1.len() + p.d2.len());
    x.extend_from_slice(&p.d1);
    x.extend_from_slice(&p.d2);
    x
}

/// Fraction of points whose argmax logit equals the label.
pub fn accuracy(m: &Mlp, points: &[SyntheticPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut scratch = Scratch::default();
    let correct = points
        .iter()
        .filter(|p| {
            let z = m.forward_with(&input_of(p), &mut scratch);
            let pred = usize::from(z.len() > 1 && z[1] > z[0]);
            pred == usize::from(p.label)
        })
        .count();
    correct as f64 / points.len() as f64
}

/// Trains a fresh network on `splits.train`, reporting accuracy on all splits.
pub fn mlp_train(splits: &DatasetSplits, config: &TrainConfig) -> Result<(Mlp, TrainReport), TrainError> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut init_rng = Rng::new(derive_seed(config.seed, "mlp/init"));
    let mut order_rng = Rng::new(derive_seed(config.seed, "mlp/order"));
    let mut model = Mlp::new(&config.layout, &mut init_rng);

    let inputs: Vec<Vec<f64>> = splits.train.iter().map(input_of).collect();
    let labels: Vec<usize> = splits.train.iter().map(|p| usize::from(p.label)).collect();
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    let mut grad = Gradient::zeros_like(&model);
    let mut velocity = Gradient::zeros_like(&model);
    let mut tape = Tape::new(&model);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut last_finite = None;

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            grad.clear();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                batch_loss += accumulate_sample(&model, &inputs[i], labels[i], scale, &mut tape, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                    loss: batch_loss,
                    last_finite,
                });
            }
            epoch_loss += batch_loss;
            for ((layer, g), v) in model
                .layers_mut()
                .iter_mut()
                .zip(&grad.layers)
                .zip(&mut velocity.layers)
            {
                momentum_step(&mut layer.weights, &g.weights, &mut v.weights, lr, config.momentum);
                momentum_step(&mut layer.biases, &g.biases, &mut v.biases, lr, config.momentum);
            }
        }
        let mean_loss = epoch_loss / inputs.len() as f64;
        last_finite = Some(mean_loss);
        let valid_accuracy = accuracy(&model, &splits.valid);
        log::info!("epoch {epoch}: lr {lr:.5} loss {mean_loss:.5} valid acc {valid_accuracy:.4}");
        epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            mean_loss,
            valid_accuracy,
        });
    }

    let report = TrainReport {
        config: config.clone(),
        train_accuracy: accuracy(&model, &splits.train),
        valid_accuracy: accuracy(&model, &splits.valid),
        test_accuracy: accuracy(&model, &splits.test),
        epochs,
    };
    Ok((model, report))
}

fn momentum_step(params: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, score};

    fn sample_batch(rng: &mut Rng, n: usize) -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
                let y = usize::from(score(&x[..10], &x[10..]) > 0.0);
                (x, y)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(21);
        let mut m = Mlp::new(&SYNTHETIC_LAYOUT, &mut rng);
        // Nonzero biases so bias gradients are exercised away from zero.
        for l in m.layers_mut() {
            l.biases.iter_mut().for_each(|b| *b = 0.05 * rng.normal());
        }
        let batch = sample_batch(&mut rng, 8);
        let (_, grad) = loss_and_gradient(&m, &batch);

        // Ten random coordinates plus at least one weight and one bias per layer.
        let mut coords: Vec<usize> = rng.sample_indices(m.parameter_count(), 10);
        let mut offset = 0;
        for l in m.layers() {
            coords.push(offset + rng.below(l.weights.len()));
            coords.push(offset + l.weights.len() + rng.below(l.biases.len()));
            offset += l.weights.len() + l.biases.len();
        }

        let h = 1e-6;
        let mut checked = 0;
        for &c in &coords {
            let orig = m.parameter(c);
            m.set_parameter(c, orig + h);
            let up = mean_loss(&m, &batch);
            m.set_parameter(c, orig - h);
            let down = mean_loss(&m, &batch);
            m.set_parameter(c, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad[c];
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-7 {
                // Dead unit: both sides are zero.
                assert!((analytic - numeric).abs() < 1e-7);
                continue;
            }
            let rel = (analytic - numeric).abs() / denom;
            assert!(rel < 1e-4, "coordinate {c}: analytic {analytic} numeric {numeric} rel {rel}");
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} live coordinates checked");
    }

    #[test]
    fn fits_linearly_separable_subset() {
        // Label by Σd1 + Σd2 with a margin: linearly separable.
        let mut rng = Rng::new(4);
        let mut train = Vec::new();
        while train.len() < 100 {
            let d1: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let d2: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let s: f64 = d1.iter().chain(&d2).sum();
            if s.abs() < 0.5 {
                continue;
            }
            train.push(SyntheticPoint { d1, d2, label: u8::from(s > 0.0) });
        }
        let splits = DatasetSplits {
            train: train.clone(),
            valid: train[..10].to_vec(),
            test: train[..10].to_vec(),
        };
        let config = TrainConfig {
            epochs: 200,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (_, report) = mlp_train(&splits, &config).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let splits = generate(1, 300).unwrap();
        let config = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let (a, ra) = mlp_train(&splits, &config).unwrap();
        let (b, rb) = mlp_train(&splits, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn divergence_is_reported() {
        let splits = generate(1, 300).unwrap();
        let config = TrainConfig {
            epochs: 5,
            learning_rate: 1e6,
            ..TrainConfig::default()
        };
        match mlp_train(&splits, &config) {
            Err(TrainError::Diverged { loss, .. }) => assert!(!loss.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let splits = generate(1, 100).unwrap();
        for config in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { layout: vec![21, 2], ..TrainConfig::default() },
        ] {
            assert!(matches!(mlp_train(&splits, &config), Err(TrainError::InvalidConfig(_))));
        }
        let empty = DatasetSplits { train: vec![], valid: vec![], test: vec![] };
        assert_eq!(mlp_train(&empty, &TrainConfig::default()).unwrap_err(), TrainError::EmptySplit);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), c.learning_rate);
        assert!((c.learning_rate_at(c.epochs - 1) - c.learning_rate * c.final_lr_fraction).abs() < 1e-15);
    }
}
