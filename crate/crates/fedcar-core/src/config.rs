//! Run configuration: a flat `key = value` text format that snapshots every
//! knob of a run.
//!
//! The parser is closed: unknown or duplicated keys are errors, every key has
//! a documented default, and `to_text` emits all keys in a canonical order so
//! that `parse(to_text(cfg)) == cfg` exactly. A run directory's snapshot is
//! therefore sufficient to replay the run bit-for-bit. Lines starting with
//! `#` and blank lines are ignored.

use crate::data::Dataset;
use crate::dp::{DpConfig, DpMode};
use crate::encoder::{FrozenEncoder, Pooling};
use crate::error::{Error, Result};
use crate::fed::AggregationWeights;
use crate::params::{ModelShape, TrainMode};
use std::collections::BTreeMap;

/// Encoder construction choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderChoice {
    /// Seeded synthetic network over token expansions of raw features.
    Synthetic,
    /// Hidden states looked up from the dataset file by sample id.
    Precomputed,
}

/// Every tunable of a run. Field meanings and defaults are listed in
/// [`RunConfig::KEY_HELP`], which the CLI prints verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: TrainMode,
    pub weights: AggregationWeights,
    pub parallel: bool,
    pub encoder: EncoderChoice,
    pub encoder_seed: u64,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub depth: usize,
    pub seq_len: usize,
    pub pooling: Pooling,
    pub pre_classifier: bool,
    pub dropout: f64,
    pub dataset: String,
    pub val_fraction: f64,
    pub dp_mode: String,
    pub dp_c0: f64,
    pub dp_sigma0: f64,
    pub dp_beta: f64,
    pub dp_gamma: f64,
    pub dp_z: f64,
    pub dp_warmup_rounds: usize,
    pub dp_per_iteration: bool,
    pub instrument: bool,
    pub trace_probes: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            clients: 2,
            rounds: 5,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3, // classifier-only default; joint mode defaults to 1e-4
            mode: TrainMode::ClassifierOnly,
            weights: AggregationWeights::Proportional,
            parallel: true,
            encoder: EncoderChoice::Synthetic,
            encoder_seed: 7,
            d_emb: 16,
            d_hidden: 32,
            depth: 2,
            seq_len: 8,
            pooling: Pooling::Mean,
            pre_classifier: false,
            dropout: 0.1,
            dataset: String::new(),
            val_fraction: 0.2,
            dp_mode: "off".into(),
            dp_c0: 1.0,
            dp_sigma0: 0.1,
            dp_beta: 0.1,
            dp_gamma: 0.9,
            dp_z: 0.1,
            dp_warmup_rounds: 0,
            dp_per_iteration: false,
            instrument: false,
            trace_probes: 4,
            out_dir: "run-out".into(),
        }
    }
}

/// Default learning rate when the config omits `lr`.
pub fn default_lr(mode: TrainMode) -> f64 {
    match mode {
        TrainMode::ClassifierOnly => 1e-3,
        TrainMode::AdapterAndClassifier => 1e-4,
    }
}

impl RunConfig {
    /// One line per key: name, type, default, meaning. Printed by `--help`.
    pub const KEY_HELP: &'static str = "\
seed              u64     42          master seed; every random stream derives from it
clients           usize   2           number of federated clients m (1 = centralized)
rounds            usize   5           communication rounds T
epochs            usize   2           local epochs E per round
batch_size        usize   4           minibatch size
lr                f64     by mode     SGD step size (1e-3 classifier-only, 1e-4 joint)
mode              enum    classifier-only   classifier-only | joint (adapter + classifier)
weights           enum    proportional      aggregation weights: proportional | uniform
parallel          bool    true        run clients on worker threads (results identical either way)
encoder           enum    synthetic   synthetic | precomputed (hidden states from the dataset file)
encoder_seed      u64     7           seed of the frozen synthetic encoder
d_emb             usize   16          token/adapter dimension (must match dataset dim when synthetic)
d_hidden          usize   32          encoder output width = classifier input
depth             usize   2           synthetic encoder layers (affine + tanh each)
seq_len           usize   8           token rows per sample
pooling           enum    mean        mean | eos
pre_classifier    bool    false       extra affine+tanh layer with dropout before the output layer
dropout           f64     0.1         dropout rate on the pre-classifier activation
dataset           path    (none)      dataset file in FCHS format
val_fraction      f64     0.2         seeded holdout fraction for validation
dp.mode           enum    off         off | fixed | adaptive
dp.c0             f64     1.0         initial clip threshold C0
dp.sigma0         f64     0.1         fixed-mode noise scale (std = sigma0 * C)
dp.beta           f64     0.1         adaptive threshold update rate
dp.gamma          f64     0.9         adaptive threshold target fraction
dp.z              f64     0.1         adaptive target noise fraction (requires z < clients/10)
dp.warmup_rounds  usize   0           rounds released without clipping or noise
dp.per_iteration  bool    false       apply the mechanism every SGD step instead of per round
instrument        bool    false       gradient-trace run for bound certification (single-step rounds)
trace_probes      usize   4           stochastic-gradient probes per client per instrumented round
out_dir           path    run-out     run artifacts directory
";

    /// Parse the documented format. Unknown keys, duplicate keys, and
    /// malformed values are all errors that name the offender.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Self::from_pairs(seen)
    }

    /// Build from key/value pairs (also used for `--set` overrides).
    pub fn from_pairs(pairs: BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut lr_explicit = false;
        for (key, value) in &pairs {
            cfg.apply_one(key, value, &mut lr_explicit)?;
        }
        if !lr_explicit {
            cfg.lr = default_lr(cfg.mode);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single `key = value` override to an existing config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut explicit = false;
        self.apply_one(key, value, &mut explicit)?;
        self.validate()
    }

    fn apply_one(&mut self, key: &str, value: &str, lr_explicit: &mut bool) -> Result<()> {
        fn bad(key: &str, value: &str, want: &str) -> Error {
            Error::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
        }
        let p_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad(key, v, "u64"));
        let p_usize = |v: &str| v.parse::<usize>().map_err(|_| bad(key, v, "usize"));
        let p_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad(key, v, "f64"));
        let p_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad(key, v, "bool (true|false)")),
        };
        match key {
            "seed" => self.seed = p_u64(value)?,
            "clients" => self.clients = p_usize(value)?,
            "rounds" => self.rounds = p_usize(value)?,
            "epochs" => self.epochs = p_usize(value)?,
            "batch_size" => self.batch_size = p_usize(value)?,
            "lr" => {
                self.lr = p_f64(value)?;
                *lr_explicit = true;
            }
            "mode" => {
                self.mode = match value {
                    "classifier-only" => TrainMode::ClassifierOnly,
                    "joint" => TrainMode::AdapterAndClassifier,
                    _ => return Err(bad(key, value, "classifier-only|joint")),
                }
            }
            "weights" => {
                self.weights = match value {
                    "proportional" => AggregationWeights::Proportional,
                    "uniform" => AggregationWeights::Uniform,
                    _ => return Err(bad(key, value, "proportional|uniform")),
                }
            }
            "parallel" => self.parallel = p_bool(value)?,
            "encoder" => {
                self.encoder = match value {
                    "synthetic" => EncoderChoice::Synthetic,
                    "precomputed" => EncoderChoice::Precomputed,
                    _ => return Err(bad(key, value, "synthetic|precomputed")),
                }
            }
            "encoder_seed" => self.encoder_seed = p_u64(value)?,
            "d_emb" => self.d_emb = p_usize(value)?,
            "d_hidden" => self.d_hidden = p_usize(value)?,
            "depth" => self.depth = p_usize(value)?,
            "seq_len" => self.seq_len = p_usize(value)?,
            "pooling" => {
                self.pooling = match value {
                    "mean" => Pooling::Mean,
                    "eos" => Pooling::Eos,
                    _ => return Err(bad(key, value, "mean|eos")),
                }
            }
            "pre_classifier" => self.pre_classifier = p_bool(value)?,
            "dropout" => self.dropout = p_f64(value)?,
            "dataset" => self.dataset = value.to_string(),
            "val_fraction" => self.val_fraction = p_f64(value)?,
            "dp.mode" => {
                if !matches!(value, "off" | "fixed" | "adaptive") {
                    return Err(bad(key, value, "off|fixed|adaptive"));
                }
                self.dp_mode = value.to_string();
            }
            "dp.c0" => self.dp_c0 = p_f64(value)?,
            "dp.sigma0" => self.dp_sigma0 = p_f64(value)?,
            "dp.beta" => self.dp_beta = p_f64(value)?,
            "dp.gamma" => self.dp_gamma = p_f64(value)?,
            "dp.z" => self.dp_z = p_f64(value)?,
            "dp.warmup_rounds" => self.dp_warmup_rounds = p_usize(value)?,
            "dp.per_iteration" => self.dp_per_iteration = p_bool(value)?,
            "instrument" => self.instrument = p_bool(value)?,
            "trace_probes" => self.trace_probes = p_usize(value)?,
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical snapshot; `parse` inverts this exactly.
    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            TrainMode::ClassifierOnly => "classifier-only",
            TrainMode::AdapterAndClassifier => "joint",
        };
        let weights = match self.weights {
            AggregationWeights::Proportional => "proportional",
            AggregationWeights::Uniform => "uniform",
        };
        let encoder = match self.encoder {
            EncoderChoice::Synthetic => "synthetic",
            EncoderChoice::Precomputed => "precomputed",
        };
        let pooling = match self.pooling {
            Pooling::Mean => "mean",
            Pooling::Eos => "eos",
        };
        format!(
            "seed = {}\nclients = {}\nrounds = {}\nepochs = {}\nbatch_size = {}\nlr = {}\n\
             mode = {mode}\nweights = {weights}\nparallel = {}\nencoder = {encoder}\n\
             encoder_seed = {}\nd_emb = {}\nd_hidden = {}\ndepth = {}\nseq_len = {}\n\
             pooling = {pooling}\npre_classifier = {}\ndropout = {}\ndataset = {}\n\
             val_fraction = {}\ndp.mode = {}\ndp.c0 = {}\ndp.sigma0 = {}\ndp.beta = {}\n\
             dp.gamma = {}\ndp.z = {}\ndp.warmup_rounds = {}\ndp.per_iteration = {}\n\
             instrument = {}\ntrace_probes = {}\nout_dir = {}\n",
            self.seed,
            self.clients,
            self.rounds,
            self.epochs,
            self.batch_size,
            self.lr,
            self.parallel,
            self.encoder_seed,
            self.d_emb,
            self.d_hidden,
            self.depth,
            self.seq_len,
            self.pre_classifier,
            self.dropout,
            self.dataset,
            self.val_fraction,
            self.dp_mode,
            self.dp_c0,
            self.dp_sigma0,
            self.dp_beta,
            self.dp_gamma,
            self.dp_z,
            self.dp_warmup_rounds,
            self.dp_per_iteration,
            self.instrument,
            self.trace_probes,
            self.out_dir,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.clients >= 1, "clients must be >= 1")?;
        check(self.rounds >= 1, "rounds must be >= 1")?;
        check(self.epochs >= 1, "epochs must be >= 1")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        check(self.d_emb >= 1 && self.d_hidden >= 1, "dimensions must be >= 1")?;
        check(self.depth >= 1, "depth must be >= 1")?;
        check(self.seq_len >= 1, "seq_len must be >= 1")?;
        check((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.val_fraction), "val_fraction must be in [0, 1)")?;
        check(self.trace_probes >= 1, "trace_probes must be >= 1")?;
        // Early DP validation so misconfiguration fails before any training.
        crate::dp::init_dp(&self.dp_config(), self.clients)?;
        if self.instrument && self.pre_classifier && self.dropout > 0.0 {
            return Err(Error::Config(
                "instrumented runs analyze the dropout-free loss; set dropout = 0 or disable pre_classifier"
                    .into(),
            ));
        }
        if self.encoder == EncoderChoice::Precomputed && self.mode == TrainMode::AdapterAndClassifier {
            return Err(Error::Config(
                "precomputed encoder skips the adapter; use mode = classifier-only".into(),
            ));
        }
        Ok(())
    }

    /// Round-loop parameters. Data is partitioned evenly; uneven partitions
    /// are a programmatic choice, not a config key.
    pub fn fed_config(&self) -> crate::fed::FedConfig {
        crate::fed::FedConfig {
            clients: self.clients,
            rounds: self.rounds,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weights: self.weights,
            partition: crate::fed::PartitionScheme::Even,
            seed: self.seed,
            parallel: self.parallel,
            dp: self.dp_config(),
        }
    }

    pub fn dp_config(&self) -> DpConfig {
        let mode = match self.dp_mode.as_str() {
            "fixed" => DpMode::Fixed { c0: self.dp_c0, sigma0: self.dp_sigma0 },
            "adaptive" => DpMode::Adaptive {
                c0: self.dp_c0,
                beta: self.dp_beta,
                gamma: self.dp_gamma,
                z: self.dp_z,
            },
            _ => DpMode::Off,
        };
        DpConfig {
            mode,
            warmup_rounds: self.dp_warmup_rounds,
            per_iteration: self.dp_per_iteration,
        }
    }

    /// Model shape for a dataset with the given class count. The hidden
    /// dimension follows the encoder choice.
    pub fn model_shape(&self, n_classes: usize, dataset_dim: usize) -> ModelShape {
        let d_hidden = match self.encoder {
            EncoderChoice::Synthetic => self.d_hidden,
            EncoderChoice::Precomputed => dataset_dim,
        };
        ModelShape {
            d_emb: match self.encoder {
                EncoderChoice::Synthetic => dataset_dim,
                EncoderChoice::Precomputed => dataset_dim,
            },
            d_hidden,
            n_classes,
            pre_classifier: self.pre_classifier,
            dropout_rate: self.dropout,
            mode: self.mode,
        }
    }

    /// Construct the frozen encoder for a loaded dataset. For the synthetic
    /// variant the dataset dimension must equal `d_emb`; for precomputed, the
    /// whole file becomes the id-indexed state table.
    pub fn build_encoder(&self, full_dataset: &Dataset) -> Result<FrozenEncoder> {
        match self.encoder {
            EncoderChoice::Synthetic => {
                if full_dataset.dim != self.d_emb {
                    return Err(Error::Config(format!(
                        "dataset dim {} does not match d_emb {}",
                        full_dataset.dim, self.d_emb
                    )));
                }
                Ok(FrozenEncoder::synthetic(
                    self.encoder_seed,
                    self.d_emb,
                    self.d_hidden,
                    self.depth,
                    self.seq_len,
                    self.pooling,
                ))
            }
            EncoderChoice::Precomputed => {
                FrozenEncoder::precomputed(full_dataset.state_table()?, self.pooling)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.lr = 0.048;
        cfg.dataset = "blobs.fchs".into();
        cfg.dp_mode = "adaptive".into();
        cfg.dp_z = 0.15;
        cfg.clients = 3;
        cfg.pooling = Pooling::Eos;
        cfg.mode = TrainMode::AdapterAndClassifier;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("# nothing but comments\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn lr_default_tracks_mode() {
        let joint = RunConfig::parse("mode = joint\n").unwrap();
        assert_eq!(joint.lr, 1e-4);
        let cls = RunConfig::parse("mode = classifier-only\n").unwrap();
        assert_eq!(cls.lr, 1e-3);
        let explicit = RunConfig::parse("mode = joint\nlr = 0.5\n").unwrap();
        assert_eq!(explicit.lr, 0.5);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = RunConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `learning_rate`"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key `seed`"), "{err}");
    }

    #[test]
    fn malformed_values_name_the_key() {
        let err = RunConfig::parse("rounds = many\n").unwrap_err();
        assert!(err.to_string().contains("`rounds`"), "{err}");
        let err = RunConfig::parse("pooling = max\n").unwrap_err();
        assert!(err.to_string().contains("`pooling`"), "{err}");
    }

    #[test]
    fn dp_keys_build_the_right_mode() {
        let cfg = RunConfig::parse("dp.mode = fixed\ndp.c0 = 2\ndp.sigma0 = 0.3\n").unwrap();
        assert_eq!(cfg.dp_config().mode, DpMode::Fixed { c0: 2.0, sigma0: 0.3 });
        let cfg = RunConfig::parse("dp.mode = adaptive\n").unwrap();
        assert!(matches!(cfg.dp_config().mode, DpMode::Adaptive { .. }));
        assert_eq!(RunConfig::default().dp_config().mode, DpMode::Off);
    }

    #[test]
    fn invalid_dp_combination_fails_validation() {
        // adaptive z must be < clients/10; clients = 1 makes 0.1 illegal
        let err = RunConfig::parse("clients = 1\ndp.mode = adaptive\n").unwrap_err();
        assert!(err.to_string().contains("z"), "{err}");
    }

    #[test]
    fn precomputed_joint_mode_is_rejected() {
        let err = RunConfig::parse("encoder = precomputed\nmode = joint\n").unwrap_err();
        assert!(err.to_string().contains("classifier-only"), "{err}");
    }

    #[test]
    fn every_documented_key_is_settable() {
        for line in RunConfig::KEY_HELP.lines() {
            let key = line.split_whitespace().next().unwrap();
            let mut cfg = RunConfig::default();
            // pick a value of the right shape per key type
            let value = match line.split_whitespace().nth(1).unwrap() {
                "u64" | "usize" => "3",
                "f64" => "0.05",
                "bool" => "true",
                "enum" => match key {
                    "mode" => "joint",
                    "weights" => "uniform",
                    "encoder" => "synthetic",
                    "pooling" => "eos",
                    "dp.mode" => "fixed",
                    _ => unreachable!("enum key {key}"),
                },
                "path" => "some/path",
                other => unreachable!("unexpected type {other}"),
            };
            let mut explicit = false;
            cfg.apply_one(key, value, &mut explicit)
                .unwrap_or_else(|e| panic!("key {key}: {e}"));
        }
    }
}
