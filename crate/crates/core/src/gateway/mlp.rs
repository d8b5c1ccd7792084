//! Fully connected rectifier network over the concatenated dense modalities.
//!
//! Weights are stored input-major (`weights[i * outputs + o]`) so the forward
//! pass is a sequence of `y += x_i · W_i` row updates. Each sample is
//! processed independently with a fixed accumulation order, which makes
//! logits bit-identical whatever batch a pair arrives in.

use serde::{Deserialize, Serialize};

use super::{GatewayError, LogitVector, Model, Pair};
#[cfg(test)]
use super::ModalityValue;
use crate::numerics::Rng;

/// 20 → 100 → 200 → 10 → 2: two concatenated 10-vectors to two class logits.
pub const SYNTHETIC_LAYOUT: [usize; 5] = [20, 100, 200, 10, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Input-major: `weights[i * outputs + o]` connects input `i` to output `o`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl MlpLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// `out = b + Σ_i x_i W_i`, skipping zero inputs (rectified units).
    pub(crate) fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.biases);
        for (i, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
    }
}

/// Rectifier MLP with an identity output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
    /// Width of the first modality inside the concatenated input.
    split: usize,
}

impl Mlp {
    /// He-initialized network; `sizes` lists every layer width including
    /// input and output, and the input is split evenly between modalities.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let mut layer = MlpLayer::zeros(w[0], w[1]);
                let scale = (2.0 / w[0] as f64).sqrt();
                layer.weights.iter_mut().for_each(|v| *v = rng.normal() * scale);
                layer
            })
            .collect();
        Self {
            layers,
            split: sizes[0] / 2,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| MlpLayer::zeros(w[0], w[1])).collect(),
            split: sizes[0] / 2,
        }
    }

    pub fn from_layers(layers: Vec<MlpLayer>, split: usize) -> Result<Self, String> {
        if layers.is_empty() {
            return Err("network has no layers".into());
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(format!("layer {i}: parameter shapes do not match {}x{}", l.inputs, l.outputs));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(format!("layer {i}: input width does not match previous output"));
            }
        }
        if split > layers[0].inputs {
            return Err("modality split exceeds input width".into());
        }
        Ok(Self { layers, split })
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MlpLayer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn modality_widths(&self) -> (usize, usize) {
        (self.split, self.input_size() - self.split)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Flattened parameter view: per layer, weights then biases.
    pub fn parameter(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                return l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_parameter(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weights.len() {
                l.weights[index] = value;
                return;
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                l.biases[index] = value;
                return;
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// Forward pass on a full input vector.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::default();
        self.forward_with(input, &mut scratch).to_vec()
    }

    pub(crate) fn forward_with<'s>(&self, input: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        assert_eq!(input.len(), self.input_size(), "input width");
        scratch.a.clear();
        scratch.a.extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            layer.affine_into(&scratch.a, &mut scratch.b);
            if li != last {
                scratch.b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        &scratch.a
    }
}

#[derive(Default)]
pub(crate) struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Logits of `m` on the concatenation of `d1` and `d2`.
pub fn mlp_forward(m: &Mlp, d1: &[f64], d2: &[f64]) -> LogitVector {
    let mut input = Vec::with_capacity(d1.len() + d2.len());
    input.extend_from_slice(d1);
    input.extend_from_slice(d2);
    LogitVector(m.forward(&input))
}

impl Model for Mlp {
    fn classes(&self) -> usize {
        self.output_size()
    }

    fn evaluate_batch(&self, pairs: &[Pair<'_>]) -> Result<Vec<LogitVector>, GatewayError> {
        let (w1, w2) = self.modality_widths();
        let mut scratch = Scratch::default();
        let mut input = Vec::with_capacity(w1 + w2);
        let mut out = Vec::with_capacity(pairs.len());
        for (index, (x1, x2)) in pairs.iter().enumerate() {
            let (Some(a), Some(b)) = (x1.as_dense(), x2.as_dense()) else {
                return Err(GatewayError::Shape {
                    index,
                    message: "MLP accepts dense modalities only".into(),
                });
            };
            if a.len() != w1 || b.len() != w2 {
                return Err(GatewayError::Shape {
                    index,
                    message: format!("expected widths ({w1}, {w2}), got ({}, {})", a.len(), b.len()),
                });
            }
            input.clear();
            input.extend_from_slice(a);
            input.extend_from_slice(b);
            out.push(LogitVector(self.forward_with(&input, &mut scratch).to_vec()));
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) fn dense_pair(d1: &[f64], d2: &[f64]) -> (ModalityValue, ModalityValue) {
    (ModalityValue::Dense(d1.to_vec()), ModalityValue::Dense(d2.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Mlp {
        // 2 -> 2 -> 1, hand-set.
        let l1 = MlpLayer {
            inputs: 2,
            outputs: 2,
            // h0 = x0 - x1 + 0.5, h1 = 2 x0 + x1 - 1
            weights: vec![1.0, 2.0, -1.0, 1.0],
            biases: vec![0.5, -1.0],
        };
        let l2 = MlpLayer {
            inputs: 2,
            outputs: 1,
            weights: vec![3.0, -2.0],
            biases: vec![0.25],
        };
        Mlp::from_layers(vec![l1, l2], 1).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(&SYNTHETIC_LAYOUT);
        let logits = mlp_forward(&m, &[1.0; 10], &[-2.0; 10]);
        assert_eq!(logits.values(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_weights_give_output_biases() {
        let mut m = Mlp::zeros(&SYNTHETIC_LAYOUT);
        m.layers_mut().last_mut().unwrap().biases = vec![0.3, -0.7];
        let (x1, x2) = dense_pair(&[0.4; 10], &[1.5; 10]);
        assert_eq!(m.evaluate(&x1, &x2).unwrap().values(), &[0.3, -0.7]);
    }

    #[test]
    fn hand_traced_forward_pass() {
        let m = tiny();
        // x = (1, 0.5): h0 = 1 - 0.5 + 0.5 = 1, h1 = 2 + 0.5 - 1 = 1.5
        // y = 3·1 - 2·1.5 + 0.25 = 0.25
        assert!((m.forward(&[1.0, 0.5])[0] - 0.25).abs() < 1e-15);
        // x = (-1, 1): h0 = -1.5 -> 0, h1 = -2 -> 0; y = bias.
        assert_eq!(m.forward(&[-1.0, 1.0])[0], 0.25);
        // x = (0, 2): h0 = -1.5 -> 0, h1 = 1; y = -2 + 0.25.
        assert_eq!(m.forward(&[0.0, 2.0])[0], -1.75);
    }

    #[test]
    fn doubling_final_weights_doubles_logits() {
        let mut rng = Rng::new(3);
        let mut m = Mlp::new(&SYNTHETIC_LAYOUT, &mut rng);
        m.layers_mut().last_mut().unwrap().biases = vec![0.0, 0.0];
        let x: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let before = m.forward(&x);
        m.layers_mut().last_mut().unwrap().weights.iter_mut().for_each(|w| *w *= 2.0);
        let after = m.forward(&x);
        for (a, b) in before.iter().zip(&after) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_composition_does_not_change_logits() {
        let mut rng = Rng::new(9);
        let m = Mlp::new(&SYNTHETIC_LAYOUT, &mut rng);
        let values: Vec<(ModalityValue, ModalityValue)> = (0..5)
            .map(|_| {
                let a: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
                let b: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
                dense_pair(&a, &b)
            })
            .collect();
        let pairs: Vec<Pair<'_>> = values.iter().map(|(a, b)| (a, b)).collect();
        let batch = m.evaluate_batch(&pairs).unwrap();
        for (i, (a, b)) in values.iter().enumerate() {
            assert_eq!(m.evaluate(a, b).unwrap(), batch[i]);
        }
        let mut permuted = pairs.clone();
        permuted.reverse();
        permuted.push(pairs[0]);
        let again = m.evaluate_batch(&permuted).unwrap();
        for i in 0..5 {
            assert_eq!(again[i], batch[4 - i]);
        }
        assert_eq!(again[5], again[4]);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = Mlp::zeros(&SYNTHETIC_LAYOUT);
        let good = ModalityValue::Dense(vec![0.0; 10]);
        let short = ModalityValue::Dense(vec![0.0; 9]);
        let text = ModalityValue::from_text("hello");
        assert!(matches!(
            m.evaluate_batch(&[(&good, &good), (&good, &short)]),
            Err(GatewayError::Shape { index: 1, .. })
        ));
        assert!(matches!(m.evaluate(&text, &good), Err(GatewayError::Shape { index: 0, .. })));
    }

    #[test]
    fn flat_parameter_view_round_trips() {
        let mut m = tiny();
        assert_eq!(m.parameter_count(), 4 + 2 + 2 + 1);
        assert_eq!(m.parameter(4), 0.5);
        assert_eq!(m.parameter(8), 0.25);
        m.set_parameter(6, 9.0);
        assert_eq!(m.layers()[1].weights[0], 9.0);
    }
}
