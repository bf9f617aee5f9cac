//! Trainable parameters: a square soft-embedding adapter plus a classifier
//! head (optional pre-classifier layer, then an output layer).
//!
//! Everything that treats the model as a vector — SGD steps, update clipping,
//! noise, aggregation, serialization — goes through one flat view over the
//! *trainable* tensors in a fixed order: adapter (when trained), pre-classifier
//! weight, pre-classifier bias, output weight, output bias. Matrices are
//! row-major `Vec<f64>`.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use std::ops::Range;

/// Which parameter groups train; the rest stay bit-frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Adapter and classifier both receive gradients.
    AdapterAndClassifier,
    /// Classifier only; the adapter stays bit-identical to the identity.
    ClassifierOnly,
}

/// Dense affine map `y = W x + b` with `W` stored row-major (out_dim × in_dim).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Weights and biases uniform in ±1/√in_dim, drawn from `rng` in
    /// row-major weight order then bias order.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.next_range(-bound, bound)).collect();
        let bias = (0..out_dim).map(|_| rng.next_range(-bound, bound)).collect();
        Self { in_dim, out_dim, weight, bias }
    }

    /// Shape contract: `x.len() == in_dim`, `out.len() == out_dim`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim, "affine input dim");
        debug_assert_eq!(out.len(), self.out_dim, "affine output dim");
        for (r, out_r) in out.iter_mut().enumerate() {
            let row = &self.weight[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = self.bias[r];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            *out_r = acc;
        }
    }
}

/// Square adapter applied to every token row before the frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub dim: usize,
    /// Row-major dim × dim matrix.
    pub weight: Vec<f64>,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self { dim, weight }
    }

    /// Bit-exact identity check (0.0 and 1.0 entries only).
    pub fn is_identity(&self) -> bool {
        self.weight.iter().enumerate().all(|(idx, &w)| {
            let (r, c) = (idx / self.dim, idx % self.dim);
            w == if r == c { 1.0 } else { 0.0 }
        })
    }
}

/// Classifier head: optional pre-classifier affine + tanh + dropout, then the
/// output layer producing one logit per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub pre: Option<AffineLayer>,
    /// Dropout probability on the pre-classifier activation; active only in
    /// training mode and only when `pre` is present.
    pub dropout_rate: f64,
    pub output: AffineLayer,
}

impl ClassifierParams {
    pub fn n_classes(&self) -> usize {
        self.output.out_dim
    }
}

/// The full trainable set θ exchanged between clients and the aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub adapter: AdapterParams,
    pub classifier: ClassifierParams,
    pub mode: TrainMode,
}

/// Construction recipe for a model: dimensions plus head options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    /// Adapter dimension = raw feature / token dimension.
    pub d_emb: usize,
    /// Encoder output dimension = classifier input dimension.
    pub d_hidden: usize,
    pub n_classes: usize,
    pub pre_classifier: bool,
    pub dropout_rate: f64,
    pub mode: TrainMode,
}

impl ModelShape {
    /// Identity adapter; classifier layers seeded uniform ±1/√fan_in.
    /// The same (shape, seed) pair always yields the same bits.
    pub fn init_model(&self, seed: u64) -> ModelParams {
        let mut rng = SplitMix64::new(seed);
        let pre = self
            .pre_classifier
            .then(|| AffineLayer::seeded(self.d_hidden, self.d_hidden, &mut rng));
        let output = AffineLayer::seeded(self.d_hidden, self.n_classes, &mut rng);
        ModelParams {
            adapter: AdapterParams::identity(self.d_emb),
            classifier: ClassifierParams { pre, dropout_rate: self.dropout_rate, output },
            mode: self.mode,
        }
    }
}

/// Byte offsets of each tensor inside the flat trainable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub adapter: Option<Range<usize>>,
    pub pre_w: Option<Range<usize>>,
    pub pre_b: Option<Range<usize>>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

impl ModelParams {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_emb: self.adapter.dim,
            d_hidden: self.classifier.output.in_dim,
            n_classes: self.classifier.output.out_dim,
            pre_classifier: self.classifier.pre.is_some(),
            dropout_rate: self.classifier.dropout_rate,
            mode: self.mode,
        }
    }

    /// Offsets of the trainable tensors in flat order.
    pub fn layout(&self) -> Layout {
        let mut at = 0usize;
        let adapter = matches!(self.mode, TrainMode::AdapterAndClassifier).then(|| {
            let r = at..at + self.adapter.weight.len();
            at = r.end;
            r
        });
        let (pre_w, pre_b) = match &self.classifier.pre {
            Some(layer) => {
                let w = at..at + layer.weight.len();
                at = w.end;
                let b = at..at + layer.bias.len();
                at = b.end;
                (Some(w), Some(b))
            }
            None => (None, None),
        };
        let out_w = at..at + self.classifier.output.weight.len();
        at = out_w.end;
        let out_b = at..at + self.classifier.output.bias.len();
        at = out_b.end;
        Layout { adapter, pre_w, pre_b, out_w, out_b, total: at }
    }

    pub fn trainable_len(&self) -> usize {
        self.layout().total
    }

    fn trainable_tensors(&self) -> Vec<&[f64]> {
        let mut parts: Vec<&[f64]> = Vec::with_capacity(5);
        if self.mode == TrainMode::AdapterAndClassifier {
            parts.push(&self.adapter.weight);
        }
        if let Some(pre) = &self.classifier.pre {
            parts.push(&pre.weight);
            parts.push(&pre.bias);
        }
        parts.push(&self.classifier.output.weight);
        parts.push(&self.classifier.output.bias);
        parts
    }

    fn trainable_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut parts: Vec<&mut [f64]> = Vec::with_capacity(5);
        if self.mode == TrainMode::AdapterAndClassifier {
            parts.push(&mut self.adapter.weight);
        }
        if let Some(pre) = &mut self.classifier.pre {
            parts.push(&mut pre.weight);
            parts.push(&mut pre.bias);
        }
        parts.push(&mut self.classifier.output.weight);
        parts.push(&mut self.classifier.output.bias);
        parts
    }

    /// Copy of the trainable tensors as one flat vector, fixed order.
    pub fn trainable_vec(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.trainable_len());
        for part in self.trainable_tensors() {
            flat.extend_from_slice(part);
        }
        flat
    }

    /// Overwrite the trainable tensors from a flat vector.
    pub fn set_trainable(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.trainable_len(), "flat vector length");
        let mut at = 0;
        for part in self.trainable_tensors_mut() {
            part.copy_from_slice(&flat[at..at + part.len()]);
            at += part.len();
        }
    }

    /// θ ← θ + δ over the trainable tensors.
    pub fn add_delta(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.trainable_len(), "delta length");
        let mut at = 0;
        for part in self.trainable_tensors_mut() {
            for v in part.iter_mut() {
                *v += delta[at];
                at += 1;
            }
        }
    }

    /// Elementwise Δ = self − other over the trainable tensors.
    pub fn trainable_delta(&self, other: &ModelParams) -> Result<Vec<f64>> {
        if self.trainable_len() != other.trainable_len() || self.mode != other.mode {
            return Err(Error::DimensionMismatch("trainable_delta: model shapes differ".into()));
        }
        let a = self.trainable_vec();
        let b = other.trainable_vec();
        Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
    }

    pub fn all_finite(&self) -> bool {
        let clf = &self.classifier;
        self.adapter.weight.iter().all(|v| v.is_finite())
            && clf.output.weight.iter().chain(&clf.output.bias).all(|v| v.is_finite())
            && clf.pre.as_ref().is_none_or(|p| {
                p.weight.iter().chain(&p.bias).all(|v| v.is_finite())
            })
    }

    /// True when every f64 (trainable or frozen) has identical bits.
    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        fn bits_eq(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.mode == other.mode
            && bits_eq(&self.adapter.weight, &other.adapter.weight)
            && bits_eq(&self.classifier.output.weight, &other.classifier.output.weight)
            && bits_eq(&self.classifier.output.bias, &other.classifier.output.bias)
            && match (&self.classifier.pre, &other.classifier.pre) {
                (None, None) => true,
                (Some(a), Some(b)) => bits_eq(&a.weight, &b.weight) && bits_eq(&a.bias, &b.bias),
                _ => false,
            }
    }
}

/// Gradient of the batch loss, flattened in the model's trainable order.
/// Shapes mirror `ModelParams` exactly via the same `Layout`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Flat Euclidean norm — the norm convention for update clipping.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
