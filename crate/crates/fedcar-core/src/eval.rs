//! Retrieval-style evaluation: the trained classifier head ranked against
//! maximum-inner-product search over class prototypes.
//!
//! Both retrievers answer the same question — "which classes does this
//! sample belong to, best K first" — so both are scored as hit@K: the
//! fraction of evaluation samples whose true label appears among the top K
//! returned classes. Rankings use the shared tie rule (equal scores go to
//! the lower class index), and hit@K is non-decreasing in K by construction.

use crate::config::{default_lr, EncoderChoice, RunConfig};
use crate::data::{Dataset, Sample};
use crate::encoder::{hidden_state, FrozenEncoder};
use crate::error::{Error, Result};
use crate::fed::run_centralized;
use crate::model::{forward_logits, retrieve_topk};
use crate::params::{AdapterParams, ModelParams, TrainMode};

/// One prototype vector per class, in class order, living in the encoder's
/// output space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub keys: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn n_classes(&self) -> usize {
        self.keys.len()
    }
}

/// Build the class-prototype index: each key is the mean hidden state of the
/// training samples of that class, under the given adapter. Every class must
/// be represented.
pub fn build_index(
    enc: &FrozenEncoder,
    adapter: &AdapterParams,
    train: &Dataset,
) -> Result<EmbeddingIndex> {
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts = vec![0usize; train.n_classes];
    for s in &train.samples {
        let h = hidden_state(enc, adapter, s.id, &s.features)?;
        if sums.is_empty() {
            sums = vec![vec![0.0; h.len()]; train.n_classes];
        }
        let c = s.label as usize;
        if c >= train.n_classes {
            return Err(Error::LabelOutOfRange { label: s.label, n_classes: train.n_classes });
        }
        for (acc, v) in sums[c].iter_mut().zip(&h) {
            *acc += v;
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Contract(format!("class {c} has no training samples to index")));
    }
    for (key, &n) in sums.iter_mut().zip(&counts) {
        for v in key.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(EmbeddingIndex { keys: sums })
}

/// Top-k classes by inner product with the query, descending; ties go to the
/// lower class index.
pub fn mips_retrieve(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<Vec<usize>> {
    let mut scores = Vec::with_capacity(index.keys.len());
    for key in &index.keys {
        if key.len() != query.len() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} coords, index keys have {}",
                query.len(),
                key.len()
            )));
        }
        scores.push(key.iter().zip(query).map(|(a, b)| a * b).sum::<f64>());
    }
    retrieve_topk(&scores, k)
}

/// A class-ranking function: the classifier head, or inner-product search
/// over an [`EmbeddingIndex`] under some adapter.
pub enum Retriever<'a> {
    Classifier(&'a ModelParams),
    Mips { adapter: &'a AdapterParams, index: &'a EmbeddingIndex },
}

impl Retriever<'_> {
    /// Best-k class list for one sample.
    pub fn retrieve(&self, enc: &FrozenEncoder, sample: &Sample, k: usize) -> Result<Vec<usize>> {
        match self {
            Retriever::Classifier(model) => {
                let logits = forward_logits(model, enc, sample, false, 0)?;
                retrieve_topk(&logits, k)
            }
            Retriever::Mips { adapter, index } => {
                let h = hidden_state(enc, adapter, sample.id, &sample.features)?;
                mips_retrieve(index, &h, k)
            }
        }
    }
}

/// hit@K for each requested K, in the given order.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyTable {
    pub ks: Vec<usize>,
    pub hit_rate: Vec<f64>,
}

impl AccuracyTable {
    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hit_rate[i])
    }
}

/// Score a retriever on a sample set. Each K must be in `1..=n_classes`.
pub fn evaluate(
    retriever: &Retriever,
    enc: &FrozenEncoder,
    samples: &[Sample],
    ks: &[usize],
) -> Result<AccuracyTable> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if ks.is_empty() {
        return Err(Error::Contract("no K values requested".into()));
    }
    let deepest = *ks.iter().max().unwrap();
    let mut hits = vec![0usize; ks.len()];
    for s in samples {
        let ranked = retriever.retrieve(enc, s, deepest)?;
        let rank = ranked.iter().position(|&c| c == s.label as usize);
        for (slot, &k) in hits.iter_mut().zip(ks) {
            if matches!(rank, Some(r) if r < k) {
                *slot += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(AccuracyTable {
        ks: ks.to_vec(),
        hit_rate: hits.into_iter().map(|h| h as f64 / n).collect(),
    })
}

/// The four head-to-head retrieval setups sharing one frozen encoder and one
/// training budget.
#[derive(Clone, Debug)]
pub struct FourWayReport {
    /// Prototype search under the untrained identity adapter.
    pub mips_identity: AccuracyTable,
    /// Prototype search under the jointly trained adapter.
    pub mips_trained: AccuracyTable,
    /// Classifier head trained alone (identity adapter).
    pub classifier_only: AccuracyTable,
    /// Classifier head and adapter trained together.
    pub joint: AccuracyTable,
}

impl FourWayReport {
    /// Render as an aligned text table, one row per setup.
    pub fn to_table(&self) -> String {
        let ks = &self.mips_identity.ks;
        let mut out = String::from("setup");
        for k in ks {
            out.push_str(&format!("  hit@{k}"));
        }
        out.push('\n');
        for (name, table) in [
            ("mips-identity", &self.mips_identity),
            ("mips-trained", &self.mips_trained),
            ("classifier-only", &self.classifier_only),
            ("joint", &self.joint),
        ] {
            out.push_str(&format!("{name:15}"));
            for r in &table.hit_rate {
                out.push_str(&format!("  {r:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Train and score all four setups on one dataset under the budget in `cfg`
/// (`rounds * epochs` total passes, run single-worker for fairness). The
/// adapter used by `mips_trained` is the one the joint run produced. The
/// `lr` key applies to the run matching `cfg.mode`; the other mode trains at
/// its default rate.
pub fn four_way_comparison(
    cfg: &RunConfig,
    full: &Dataset,
    ks: &[usize],
) -> Result<FourWayReport> {
    if cfg.encoder != EncoderChoice::Synthetic {
        return Err(Error::Config(
            "the four-way comparison trains an adapter, which needs the synthetic encoder".into(),
        ));
    }
    let enc = cfg.build_encoder(full)?;
    let (train, val) = crate::data::split_train_val(full, cfg.val_fraction, cfg.seed);
    let eval_split = if val.is_empty() { &train } else { &val };

    let lr_for = |mode: TrainMode| if cfg.mode == mode { cfg.lr } else { default_lr(mode) };
    let run_one = |mode: TrainMode| -> Result<ModelParams> {
        let mut one = cfg.clone();
        one.mode = mode;
        one.lr = lr_for(mode);
        one.validate()?;
        let shape = one.model_shape(full.n_classes, full.dim);
        let out = run_centralized(&one.fed_config(), &shape, &enc, &train.samples, &val.samples)?;
        Ok(out.model)
    };

    let classifier_model = run_one(TrainMode::ClassifierOnly)?;
    let joint_model = run_one(TrainMode::AdapterAndClassifier)?;

    let identity = AdapterParams::identity(full.dim);
    let index_identity = build_index(&enc, &identity, &train)?;
    let index_trained = build_index(&enc, &joint_model.adapter, &train)?;

    Ok(FourWayReport {
        mips_identity: evaluate(
            &Retriever::Mips { adapter: &identity, index: &index_identity },
            &enc,
            &eval_split.samples,
            ks,
        )?,
        mips_trained: evaluate(
            &Retriever::Mips { adapter: &joint_model.adapter, index: &index_trained },
            &enc,
            &eval_split.samples,
            ks,
        )?,
        classifier_only: evaluate(
            &Retriever::Classifier(&classifier_model),
            &enc,
            &eval_split.samples,
            ks,
        )?,
        joint: evaluate(&Retriever::Classifier(&joint_model), &enc, &eval_split.samples, ks)?,
    })
}
