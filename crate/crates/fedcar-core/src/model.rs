//! Forward and backward passes of the retriever and its training loss.
//!
//! Prediction pipeline for one sample: token expansion → adapter → frozen
//! encoder → pooled hidden state → classifier logits → top-K class indices.
//! The trainable pieces are the adapter matrix and the classifier layers;
//! gradients flow through the frozen encoder (input gradients only) back to
//! the adapter when the mode trains it.
//!
//! Loss is mean cross-entropy over the batch with a numerically stable
//! softmax. Dropout masks are a pure function of `(dropout_seed, sample
//! index)`, so `(model bits, encoder seed, batch, dropout seed)` determine
//! loss and gradients bitwise — which is what makes finite-difference
//! checking and cross-process reproducibility possible.

use crate::data::Sample;
use crate::encoder::{
    adapter_apply, encode_tokens, encoder_backward, encoder_forward_cached, hidden_state,
    EncoderKind, FrozenEncoder,
};
use crate::error::{Error, Result};
use crate::params::{ClassifierParams, Gradients, ModelParams, TrainMode};
use crate::rng::{derive_seed, tags, SplitMix64};

/// Classifier intermediates kept for the backward pass.
struct ClassifierCache {
    /// Input hidden state.
    h: Vec<f64>,
    /// tanh(pre · h + b) before dropout, when the pre-classifier exists.
    pre_act: Option<Vec<f64>>,
    /// Per-coordinate dropout multiplier (0 or 1/(1-p)), when active.
    mask: Option<Vec<f64>>,
    /// Input that reached the output layer.
    out_in: Vec<f64>,
}

fn classifier_forward_cached(
    cls: &ClassifierParams,
    h: &[f64],
    training: bool,
    dropout_seed: u64,
) -> Result<(Vec<f64>, ClassifierCache)> {
    if h.len() != cls.pre.as_ref().map_or(cls.output.in_dim, |p| p.in_dim) {
        return Err(Error::DimensionMismatch(format!(
            "classifier_forward: hidden dim {} does not match head input",
            h.len()
        )));
    }
    let (out_in, pre_act, mask) = match &cls.pre {
        None => (h.to_vec(), None, None),
        Some(pre) => {
            let mut z = vec![0.0; pre.out_dim];
            pre.apply(h, &mut z);
            for v in &mut z {
                *v = v.tanh();
            }
            let pre_act = z.clone();
            let mask = if training && cls.dropout_rate > 0.0 {
                let mut rng = SplitMix64::new(dropout_seed);
                let keep_scale = 1.0 / (1.0 - cls.dropout_rate);
                let mask: Vec<f64> = (0..z.len())
                    .map(|_| if rng.next_f64() < cls.dropout_rate { 0.0 } else { keep_scale })
                    .collect();
                for (v, m) in z.iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            } else {
                None
            };
            (z, Some(pre_act), mask)
        }
    };
    let mut logits = vec![0.0; cls.output.out_dim];
    cls.output.apply(&out_in, &mut logits);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("classifier logits"));
    }
    Ok((logits, ClassifierCache { h: h.to_vec(), pre_act, mask, out_in }))
}

/// Classifier logits for one hidden state. In training mode with a
/// pre-classifier present, dropout draws its mask from `dropout_seed`.
pub fn classifier_forward(
    cls: &ClassifierParams,
    h: &[f64],
    training: bool,
    dropout_seed: u64,
) -> Result<Vec<f64>> {
    classifier_forward_cached(cls, h, training, dropout_seed).map(|(logits, _)| logits)
}

/// Backward through the classifier. Accumulates weight/bias gradients into
/// the flat gradient buffer and returns d(loss)/d(hidden) when requested.
fn classifier_backward(
    cls: &ClassifierParams,
    cache: &ClassifierCache,
    d_logits: &[f64],
    grad: &mut [f64],
    layout: &crate::params::Layout,
    need_dh: bool,
) -> Option<Vec<f64>> {
    let out = &cls.output;
    let (ow, ob) = (layout.out_w.clone(), layout.out_b.clone());
    for (r, g) in d_logits.iter().enumerate() {
        grad[ob.start + r] += g;
        let wrow = &mut grad[ow.start + r * out.in_dim..ow.start + (r + 1) * out.in_dim];
        for (gw, x) in wrow.iter_mut().zip(&cache.out_in) {
            *gw += g * x;
        }
    }
    // d(loss)/d(out_in)
    let mut d_in = vec![0.0; out.in_dim];
    for (r, g) in d_logits.iter().enumerate() {
        let wrow = &out.weight[r * out.in_dim..(r + 1) * out.in_dim];
        for (di, w) in d_in.iter_mut().zip(wrow) {
            *di += w * g;
        }
    }

    match (&cls.pre, &cache.pre_act) {
        (Some(pre), Some(act)) => {
            if let Some(mask) = &cache.mask {
                for (d, m) in d_in.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            // through tanh
            for (d, a) in d_in.iter_mut().zip(act) {
                *d *= 1.0 - a * a;
            }
            let (pw, pb) = (layout.pre_w.clone().unwrap(), layout.pre_b.clone().unwrap());
            for (r, g) in d_in.iter().enumerate() {
                grad[pb.start + r] += g;
                let wrow = &mut grad[pw.start + r * pre.in_dim..pw.start + (r + 1) * pre.in_dim];
                for (gw, x) in wrow.iter_mut().zip(&cache.h) {
                    *gw += g * x;
                }
            }
            need_dh.then(|| {
                let mut dh = vec![0.0; pre.in_dim];
                for (r, g) in d_in.iter().enumerate() {
                    let wrow = &pre.weight[r * pre.in_dim..(r + 1) * pre.in_dim];
                    for (d, w) in dh.iter_mut().zip(wrow) {
                        *d += w * g;
                    }
                }
                dh
            })
        }
        _ => need_dh.then_some(d_in),
    }
}

/// Stable softmax cross-entropy for one sample.
/// Returns (loss, d loss / d logits).
fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - max);
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    (loss, d)
}

fn check_batch(model: &ModelParams, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_classes = model.classifier.n_classes();
    for s in batch {
        if (s.label as usize) >= n_classes {
            return Err(Error::LabelOutOfRange { label: s.label, n_classes });
        }
    }
    Ok(())
}

/// Mean cross-entropy and top-1 correct count over a batch, no gradients.
/// `training` controls dropout; evaluation passes `false`.
pub fn batch_loss(
    model: &ModelParams,
    enc: &FrozenEncoder,
    batch: &[Sample],
    training: bool,
    dropout_seed: u64,
) -> Result<(f64, usize)> {
    check_batch(model, batch)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, s) in batch.iter().enumerate() {
        let h = hidden_state(enc, &model.adapter, s.id, &s.features)?;
        let seed = derive_seed(dropout_seed, tags::DROPOUT_SAMPLE, i as u64);
        let logits = classifier_forward(&model.classifier, &h, training, seed)?;
        let (l, _) = softmax_ce(&logits, s.label as usize);
        loss += l;
        if argmax(&logits) == s.label as usize {
            correct += 1;
        }
    }
    Ok((loss / batch.len() as f64, correct))
}

/// Mean batch loss, top-1 correct count, and the gradient of the mean loss
/// with respect to every trainable parameter (flat, in layout order).
///
/// In `AdapterAndClassifier` mode the chain runs through the frozen encoder
/// back to the adapter; in `ClassifierOnly` mode the adapter gradient is
/// identically absent from the flat vector and the adapter stays untouched.
pub fn loss_and_gradients(
    model: &ModelParams,
    enc: &FrozenEncoder,
    batch: &[Sample],
    training: bool,
    dropout_seed: u64,
) -> Result<(f64, usize, Gradients)> {
    check_batch(model, batch)?;
    let layout = model.layout();
    let mut grad = Gradients::zeros(layout.total);
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    let train_adapter = model.mode == TrainMode::AdapterAndClassifier
        && matches!(enc.kind, EncoderKind::Synthetic(_));

    for (i, s) in batch.iter().enumerate() {
        let seed = derive_seed(dropout_seed, tags::DROPOUT_SAMPLE, i as u64);
        if train_adapter {
            let tokens = encode_tokens(enc, s.id, &s.features)?;
            let soft = adapter_apply(&model.adapter, &tokens)?;
            let (h, cache) = encoder_forward_cached(enc, &soft)?;
            let (logits, cls_cache) =
                classifier_forward_cached(&model.classifier, &h, training, seed)?;
            let (l, mut d_logits) = softmax_ce(&logits, s.label as usize);
            loss += l;
            if argmax(&logits) == s.label as usize {
                correct += 1;
            }
            d_logits.iter_mut().for_each(|d| *d *= inv_n);
            let dh = classifier_backward(
                &model.classifier,
                &cls_cache,
                &d_logits,
                &mut grad.values,
                &layout,
                true,
            )
            .expect("dh requested");
            // Input gradients through the encoder, then dA += d_soft ⊗ token.
            let d_soft = encoder_backward(enc, &soft, &cache, &dh)?;
            let arange = layout.adapter.clone().expect("adapter trained");
            let d = model.adapter.dim;
            let ga = &mut grad.values[arange];
            for t in 0..tokens.seq_len {
                let token = tokens.row(t);
                let ds = &d_soft[t * d..(t + 1) * d];
                for (r, dsr) in ds.iter().enumerate() {
                    if *dsr == 0.0 {
                        continue;
                    }
                    let garow = &mut ga[r * d..(r + 1) * d];
                    for (g, x) in garow.iter_mut().zip(token) {
                        *g += dsr * x;
                    }
                }
            }
        } else {
            let h = hidden_state(enc, &model.adapter, s.id, &s.features)?;
            let (logits, cls_cache) =
                classifier_forward_cached(&model.classifier, &h, training, seed)?;
            let (l, mut d_logits) = softmax_ce(&logits, s.label as usize);
            loss += l;
            if argmax(&logits) == s.label as usize {
                correct += 1;
            }
            d_logits.iter_mut().for_each(|d| *d *= inv_n);
            classifier_backward(
                &model.classifier,
                &cls_cache,
                &d_logits,
                &mut grad.values,
                &layout,
                false,
            );
        }
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    Ok((loss * inv_n, correct, grad))
}

/// Logits for one sample under the full pipeline (no dropout unless asked).
pub fn forward_logits(
    model: &ModelParams,
    enc: &FrozenEncoder,
    sample: &Sample,
    training: bool,
    dropout_seed: u64,
) -> Result<Vec<f64>> {
    let h = hidden_state(enc, &model.adapter, sample.id, &sample.features)?;
    classifier_forward(&model.classifier, &h, training, dropout_seed)
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Indices of the K largest logits, descending by value; ties broken by the
/// lower index. Errors when `k` is zero or exceeds the number of classes.
pub fn retrieve_topk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Contract(format!(
            "retrieve_topk: k = {k} with {} classes",
            logits.len()
        )));
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}
