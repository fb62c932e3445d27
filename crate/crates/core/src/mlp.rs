//! Small dense feed-forward network: rectifier hidden layers, softmax output,
//! cross-entropy loss, mini-batch SGD.
//!
//! Weights are stored row-major per layer (`w[out * in_dim + in]`). The model
//! file is JSON:
//!
//! ```text
//! {"schema": "ts-mlp-v1", "dims": [42, 20, 3], "layers": [{"w": [[...], ...], "b": [...]}, ...]}
//! ```
//!
//! where each `w` row corresponds to one output unit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_SCHEMA: &str = "ts-mlp-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model shape mismatch: {0}")]
    Shape(String),
    #[error("model is corrupt: non-finite activation")]
    NonFinite,
    #[error("unsupported model schema {0:?}")]
    Schema(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("training data needs all {expected} classes, found {found}")]
    InsufficientClasses { expected: usize, found: usize },
    #[error("invalid model file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.w
                .chunks_exact(self.in_dim)
                .zip(&self.b)
                .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()),
        );
    }
}

/// Parameter gradients, same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            w: mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    fn scale(&mut self, k: f64) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= k);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Reshuffle the sample order every epoch. With `false` the batch order is
    /// fixed to the input order.
    pub shuffle: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 200,
            batch: 32,
            seed: 7,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters skipped because the +h/-h probes straddled a rectifier kink,
    /// where the loss is not differentiable.
    pub skipped_kinks: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    dims: Vec<usize>,
    layers: Vec<LayerFile>,
}

impl Mlp {
    /// All-zero network with the given layer dimensions.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        Self {
            dims: dims.to_vec(),
            layers,
        }
    }

    /// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn random(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Self::zeros(dims);
        for layer in &mut mlp.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.random_range(-limit..=limit);
            }
        }
        mlp
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims is never empty")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Returns pre-activations of every layer.
    fn pre_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.forward_into(&act, &mut z);
            if i + 1 < self.layers.len() {
                act = z.iter().map(|v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        if input.len() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "input has {} values, model expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let logits = self.pre_activations(input).pop().expect("at least one layer");
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(logits)
    }

    /// Output distribution.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        let probs = softmax(&self.logits(input)?);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(probs)
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, input: &[f64], label: usize) -> f64 {
        let logits = self.pre_activations(input).pop().expect("at least one layer");
        log_sum_exp(&logits) - logits[label]
    }

    pub fn mean_loss(&self, data: &[(Vec<f64>, usize)]) -> f64 {
        data.iter().map(|(x, y)| self.loss(x, *y)).sum::<f64>() / data.len().max(1) as f64
    }

    /// Loss and analytic gradient of one sample.
    pub fn loss_and_gradient(&self, input: &[f64], label: usize) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        let loss = self.accumulate_gradient(input, label, &mut grads);
        (loss, grads)
    }

    fn accumulate_gradient(&self, input: &[f64], label: usize, grads: &mut Gradients) -> f64 {
        let pre = self.pre_activations(input);
        let n = self.layers.len();
        let logits = &pre[n - 1];
        let loss = log_sum_exp(logits) - logits[label];

        // d loss / d logits
        let mut delta = softmax(logits);
        delta[label] -= 1.0;

        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let input_act: Vec<f64> = if li == 0 {
                input.to_vec()
            } else {
                pre[li - 1].iter().map(|v| v.max(0.0)).collect()
            };
            let gw = &mut grads.w[li];
            let gb = &mut grads.b[li];
            for (o, d) in delta.iter().enumerate() {
                gb[o] += d;
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, x) in row.iter_mut().zip(&input_act) {
                    *g += d * x;
                }
            }
            if li > 0 {
                let mut next = vec![0.0; layer.in_dim];
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (acc, w) in next.iter_mut().zip(row) {
                        *acc += d * w;
                    }
                }
                for (acc, z) in next.iter_mut().zip(&pre[li - 1]) {
                    if *z <= 0.0 {
                        *acc = 0.0;
                    }
                }
                delta = next;
            }
        }
        loss
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.w.iter_mut().zip(&grads.w[li]) {
                *w -= lr * g;
            }
            for (b, g) in layer.b.iter_mut().zip(&grads.b[li]) {
                *b -= lr * g;
            }
        }
    }

    /// Mini-batch SGD on mean cross-entropy. Deterministic for a given seed.
    pub fn fit(&mut self, data: &[(Vec<f64>, usize)], hp: &TrainParams) -> TrainReport {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x005e_ed0f_ba7c);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = hp.batch.max(1);
        let mut epoch_losses = Vec::with_capacity(hp.epochs);
        let mut grads = Gradients::zeros_like(self);
        for _ in 0..hp.epochs {
            if hp.shuffle {
                order.shuffle(&mut rng);
            }
            for chunk in order.chunks(batch) {
                grads.scale(0.0);
                for &i in chunk {
                    let (x, y) = &data[i];
                    self.accumulate_gradient(x, *y, &mut grads);
                }
                grads.scale(1.0 / chunk.len() as f64);
                self.apply(&grads, hp.lr);
            }
            epoch_losses.push(self.mean_loss(data));
        }
        TrainReport { epoch_losses }
    }

    fn param_mut(&mut self, layer: usize, idx: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        if idx < l.w.len() {
            &mut l.w[idx]
        } else {
            &mut l.b[idx - l.w.len()]
        }
    }

    fn hidden_signs(&self, input: &[f64]) -> Vec<bool> {
        let pre = self.pre_activations(input);
        pre[..pre.len() - 1].iter().flatten().map(|z| *z > 0.0).collect()
    }

    /// Compares the analytic gradient with central finite differences over
    /// every parameter. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
    pub fn gradient_check(&self, input: &[f64], label: usize, h: f64) -> GradCheck {
        let (_, analytic) = self.loss_and_gradient(input, label);
        let mut probe = self.clone();
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        for li in 0..self.layers.len() {
            let wlen = self.layers[li].w.len();
            let total = wlen + self.layers[li].b.len();
            for idx in 0..total {
                let a = if idx < wlen {
                    analytic.w[li][idx]
                } else {
                    analytic.b[li][idx - wlen]
                };
                let orig = *probe.param_mut(li, idx);
                *probe.param_mut(li, idx) = orig + h;
                let lp = probe.loss(input, label);
                let sp = probe.hidden_signs(input);
                *probe.param_mut(li, idx) = orig - h;
                let lm = probe.loss(input, label);
                let sm = probe.hidden_signs(input);
                *probe.param_mut(li, idx) = orig;
                if sp != sm {
                    skipped += 1;
                    continue;
                }
                let n = (lp - lm) / (2.0 * h);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        GradCheck {
            max_relative_error: max_rel,
            checked,
            skipped_kinks: skipped,
        }
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            schema: MODEL_SCHEMA.to_string(),
            dims: self.dims.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.w.chunks_exact(l.in_dim).map(<[f64]>::to_vec).collect(),
                    b: l.b.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("model always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.schema != MODEL_SCHEMA {
            return Err(ModelError::Schema(file.schema));
        }
        if file.dims.len() < 2 || file.dims.contains(&0) {
            return Err(ModelError::Shape(format!("invalid dims {:?}", file.dims)));
        }
        if file.layers.len() != file.dims.len() - 1 {
            return Err(ModelError::Shape(format!(
                "{} layers for dims {:?}",
                file.layers.len(),
                file.dims
            )));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, (lf, d)) in file.layers.into_iter().zip(file.dims.windows(2)).enumerate() {
            let (in_dim, out_dim) = (d[0], d[1]);
            if lf.w.len() != out_dim || lf.w.iter().any(|r| r.len() != in_dim) {
                return Err(ModelError::Shape(format!(
                    "layer {i}: weights are not {out_dim}x{in_dim}"
                )));
            }
            if lf.b.len() != out_dim {
                return Err(ModelError::Shape(format!(
                    "layer {i}: bias has {} values, expected {out_dim}",
                    lf.b.len()
                )));
            }
            layers.push(Dense {
                in_dim,
                out_dim,
                w: lf.w.into_iter().flatten().collect(),
                b: lf.b,
            });
        }
        let mlp = Self {
            dims: file.dims,
            layers,
        };
        if !mlp.all_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(mlp)
    }

    /// Flattened view of every parameter, for comparisons in tests.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Checks that labels cover `0..classes`.
pub fn check_label_coverage(labels: impl Iterator<Item = usize>, classes: usize) -> Result<(), ModelError> {
    let mut seen = vec![false; classes];
    let mut any = false;
    for l in labels {
        any = true;
        if l < classes {
            seen[l] = true;
        }
    }
    if !any {
        return Err(ModelError::EmptyData);
    }
    let found = seen.iter().filter(|s| **s).count();
    if found < classes {
        return Err(ModelError::InsufficientClasses {
            expected: classes,
            found,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn gradient_check_on_fresh_model() {
        let mlp = Mlp::random(&[42, 20, 3], 11);
        let x = random_input(3, 42);
        let a = mlp.gradient_check(&x, 1, 1e-4);
        assert!(a.max_relative_error < 1e-3, "{a:?}");
        let b = mlp.gradient_check(&x, 1, 1e-4);
        assert_eq!(a, b);
        assert_eq!(a.checked + a.skipped_kinks, mlp.parameter_count());
    }

    #[test]
    fn zero_inputs_give_zero_first_layer_weight_gradients() {
        let mlp = Mlp::random(&[8, 5, 3], 2);
        let mut x = random_input(9, 8);
        x[2] = 0.0;
        x[6] = 0.0;
        let (_, g) = mlp.loss_and_gradient(&x, 0);
        for o in 0..5 {
            assert_eq!(g.w[0][o * 8 + 2], 0.0);
            assert_eq!(g.w[0][o * 8 + 6], 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_alone() {
        let data: Vec<(Vec<f64>, usize)> = (0..30).map(|i| (random_input(i, 4), (i % 3) as usize)).collect();
        let mut mlp = Mlp::random(&[4, 6, 3], 5);
        let before = mlp.clone();
        mlp.fit(
            &data,
            &TrainParams {
                lr: 0.0,
                epochs: 3,
                ..Default::default()
            },
        );
        assert_eq!(mlp, before);
    }

    #[test]
    fn model_file_round_trip_and_validation() {
        let mlp = Mlp::random(&[42, 20, 3], 1);
        let back = Mlp::from_json(&mlp.to_json()).unwrap();
        assert_eq!(back, mlp);

        let bad = r#"{"schema":"ts-mlp-v1","dims":[2,3],"layers":[{"w":[[1,2],[3,4]],"b":[0,0,0]}]}"#;
        assert!(matches!(Mlp::from_json(bad), Err(ModelError::Shape(_))));
        let wrong_schema = r#"{"schema":"other","dims":[1,1],"layers":[{"w":[[1]],"b":[0]}]}"#;
        assert!(matches!(Mlp::from_json(wrong_schema), Err(ModelError::Schema(_))));
    }

    #[test]
    fn label_coverage() {
        assert!(matches!(
            check_label_coverage([0, 1, 1].into_iter(), 3),
            Err(ModelError::InsufficientClasses { found: 2, .. })
        ));
        assert!(matches!(
            check_label_coverage(std::iter::empty(), 3),
            Err(ModelError::EmptyData)
        ));
        assert!(check_label_coverage([2, 0, 1].into_iter(), 3).is_ok());
    }
}
