//! Federated averaging over a shared frozen encoder.
//!
//! A training run is `T` rounds. Each round every client copies the global
//! model, runs `E` local epochs of minibatch SGD on its shard, and releases
//! its update through the privacy transform ([`crate::dp::dp_transform`]).
//! The server averages the released trainable parameters and validates the
//! new global model.
//!
//! Determinism contract: every random decision a client makes (shuffles,
//! dropout masks, noise) comes from streams derived once from the master
//! seed and the client id, owned by that client and persisted across rounds.
//! Clients never share mutable state during a round, so running them on
//! worker threads or sequentially produces bit-identical models — the
//! `parallel` flag changes wall-clock behavior only.

use crate::data::Sample;
use crate::dp::{adapt_threshold, dp_transform, init_dp, DpConfig, DpMode, DpState};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::model::{batch_loss, loss_and_gradients};
use crate::params::{l2_norm, ModelParams, ModelShape};
use crate::rng::{derive_seed, tags, SplitMix64};
use std::time::Instant;

/// How training samples are divided among clients.
#[derive(Clone, Debug, PartialEq)]
pub enum PartitionScheme {
    /// As equal as possible; the first `n mod m` shards get one extra sample.
    Even,
    /// Explicit shard fractions, one per client, summing to 1.
    Proportions(Vec<f64>),
}

/// Server-side averaging weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationWeights {
    /// Shard-size proportional (classic federated averaging).
    Proportional,
    /// Equal weight per client.
    Uniform,
}

/// Everything the round loop needs to know.
#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: AggregationWeights,
    pub partition: PartitionScheme,
    pub seed: u64,
    pub parallel: bool,
    pub dp: DpConfig,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.rounds == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "clients, rounds, epochs, and batch_size must all be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        if let PartitionScheme::Proportions(p) = &self.partition {
            if p.len() != self.clients {
                return Err(Error::Config(format!(
                    "partition lists {} proportions for {} clients",
                    p.len(),
                    self.clients
                )));
            }
        }
        init_dp(&self.dp, self.clients).map(|_| ())
    }
}

/// Split samples into `m` shards after a seeded shuffle. Every shard must end
/// up non-empty. Proportional quotas round down first, then leftover samples
/// go to the shards with the largest fractional remainders (ties favor the
/// lower client index).
pub fn partition(
    samples: &[Sample],
    scheme: &PartitionScheme,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    if m == 0 {
        return Err(Error::Config("cannot partition over zero clients".into()));
    }
    let n = samples.len();
    let counts: Vec<usize> = match scheme {
        PartitionScheme::Even => {
            let base = n / m;
            let extra = n % m;
            (0..m).map(|k| base + usize::from(k < extra)).collect()
        }
        PartitionScheme::Proportions(props) => {
            if props.len() != m {
                return Err(Error::Config(format!(
                    "{} proportions for {} clients",
                    props.len(),
                    m
                )));
            }
            if props.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
                return Err(Error::Config("proportions must lie in [0, 1]".into()));
            }
            let sum: f64 = props.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("proportions sum to {sum}, not 1")));
            }
            let mut counts: Vec<usize> = props.iter().map(|p| (p * n as f64).floor() as usize).collect();
            let assigned: usize = counts.iter().sum();
            // hand out the remainder by descending fractional part, lower
            // index first on ties
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                let fa = props[a] * n as f64 - (props[a] * n as f64).floor();
                let fb = props[b] * n as f64 - (props[b] * n as f64).floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for k in 0..(n - assigned) {
                counts[order[k % m]] += 1;
            }
            counts
        }
    };
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!(
            "partition leaves a client with zero samples (n = {n}, m = {m})"
        )));
    }
    let mut shuffled: Vec<Sample> = samples.to_vec();
    SplitMix64::new(derive_seed(seed, tags::PARTITION, 0)).shuffle(&mut shuffled);
    let mut shards = Vec::with_capacity(m);
    let mut cursor = 0;
    for &c in &counts {
        shards.push(shuffled[cursor..cursor + c].to_vec());
        cursor += c;
    }
    Ok(shards)
}

/// Weighted average of released client models on top of the global model.
///
/// Only trainable parameters are averaged; frozen tensors (the adapter in
/// classifier-only mode) are carried over from the global model verbatim, so
/// an identity adapter stays bit-identical no matter how many clients report.
/// Weights must sum to 1 within 1e-12. A single client with weight 1 is
/// returned as an exact copy.
pub fn aggregate(global: &ModelParams, updates: &[(f64, ModelParams)]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::Contract("aggregate called with no client updates".into()));
    }
    let wsum: f64 = updates.iter().map(|(w, _)| *w).sum();
    if (wsum - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("aggregation weights sum to {wsum}, not 1")));
    }
    let shape = global.shape();
    for (k, (w, local)) in updates.iter().enumerate() {
        if !(0.0..=1.0).contains(w) {
            return Err(Error::Contract(format!("client {k} has weight {w} outside [0, 1]")));
        }
        if local.shape() != shape {
            return Err(Error::DimensionMismatch(format!(
                "client {k} released a model of a different shape"
            )));
        }
    }
    if updates.len() == 1 && updates[0].0 == 1.0 {
        return Ok(updates[0].1.clone());
    }
    let mut avg = vec![0.0; global.trainable_len()];
    for (w, local) in updates {
        for (a, v) in avg.iter_mut().zip(local.trainable_vec()) {
            *a += w * v;
        }
    }
    let mut out = global.clone();
    out.set_trainable(&avg);
    if !out.all_finite() {
        return Err(Error::NonFinite("aggregated model"));
    }
    Ok(out)
}

/// Per-client mutable state. The three rng streams are derived from the
/// master seed and the client id once, then advance monotonically across
/// rounds — replaying a run replays every draw in order.
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<Sample>,
    pub dp_state: DpState,
    shuffle_rng: SplitMix64,
    dropout_rng: SplitMix64,
    noise_rng: SplitMix64,
}

impl ClientState {
    pub fn new(id: usize, shard: Vec<Sample>, master_seed: u64, dp_state: DpState) -> Self {
        let id64 = id as u64;
        Self {
            id,
            shard,
            dp_state,
            shuffle_rng: SplitMix64::new(derive_seed(master_seed, tags::CLIENT_SHUFFLE, id64)),
            dropout_rng: SplitMix64::new(derive_seed(master_seed, tags::CLIENT_DROPOUT, id64)),
            noise_rng: SplitMix64::new(derive_seed(master_seed, tags::CLIENT_NOISE, id64)),
        }
    }
}

/// One client's report for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundRecord {
    pub round: usize,
    pub client: usize,
    /// Mean training loss over all local steps this round.
    pub loss: f64,
    /// Top-1 training accuracy over all samples visited this round.
    pub accuracy: f64,
    /// L2 norm of the round's raw update (before clipping).
    pub delta_norm: f64,
    /// Whether the privacy transform actually rescaled the update.
    pub clipped: bool,
    /// Clip threshold in force when the update was released.
    pub clip_threshold: f64,
    /// Local compute time for the round, milliseconds.
    pub wall_ms: f64,
}

/// Server-side summary of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Elapsed time of the whole round as scheduled on this machine.
    pub wall_ms: f64,
    /// max(client wall_ms) + aggregation time: the round time of an ideal
    /// deployment where every client is its own machine. Validation is
    /// reporting, not training, and is excluded.
    pub distributed_ms: f64,
}

/// Everything recorded about one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub clients: Vec<ClientRoundRecord>,
    pub summary: RoundSummary,
}

/// A finished run: the final global model plus per-round records.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub rounds: Vec<RoundRecord>,
}

/// `E` local epochs of minibatch SGD from the global model, released through
/// the privacy transform. Returns the released model and the round report.
///
/// With `dp.per_iteration` the transform (and threshold adaptation) runs on
/// every SGD step's update; otherwise on the accumulated round update. The
/// recorded `delta_norm` is the pre-clip norm of the round-level update in
/// per-round mode, and the norm of the total released movement in
/// per-iteration mode.
pub fn local_update(
    client: &mut ClientState,
    global: &ModelParams,
    enc: &FrozenEncoder,
    cfg: &FedConfig,
    round: usize,
) -> Result<(ModelParams, ClientRoundRecord)> {
    let start = Instant::now();
    let mut local = global.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    let mut correct = 0usize;
    let mut visited = 0usize;
    let mut any_clipped = false;
    let threshold_in_force = client.dp_state.c;

    for _ in 0..cfg.epochs {
        client.shuffle_rng.shuffle(&mut client.shard);
        let mut at = 0;
        while at < client.shard.len() {
            let end = (at + cfg.batch_size).min(client.shard.len());
            let batch = &client.shard[at..end];
            let dropout_seed = client.dropout_rng.next_u64();
            let (loss, batch_correct, grads) =
                loss_and_gradients(&local, enc, batch, true, dropout_seed)?;
            loss_sum += loss;
            steps += 1;
            correct += batch_correct;
            visited += batch.len();
            let step: Vec<f64> = grads.values.iter().map(|g| -cfg.lr * g).collect();
            if cfg.dp.per_iteration {
                let norm = l2_norm(&step);
                if cfg.dp.active_at(round) && norm > client.dp_state.c {
                    any_clipped = true;
                }
                local = dp_transform(&local, &step, &cfg.dp, &client.dp_state, round, &mut client.noise_rng)?;
                if matches!(cfg.dp.mode, DpMode::Adaptive { .. }) && cfg.dp.active_at(round) {
                    client.dp_state = adapt_threshold(&client.dp_state, &cfg.dp, norm)?;
                }
            } else {
                local.add_delta(&step);
            }
            at = end;
        }
    }

    let (released, delta_norm) = if cfg.dp.per_iteration {
        let norm = l2_norm(&local.trainable_delta(global)?);
        (local, norm)
    } else if cfg.dp.active_at(round) {
        let delta = local.trainable_delta(global)?;
        let norm = l2_norm(&delta);
        if norm > client.dp_state.c {
            any_clipped = true;
        }
        let released = dp_transform(global, &delta, &cfg.dp, &client.dp_state, round, &mut client.noise_rng)?;
        if matches!(cfg.dp.mode, DpMode::Adaptive { .. }) {
            client.dp_state = adapt_threshold(&client.dp_state, &cfg.dp, norm)?;
        }
        (released, norm)
    } else {
        // Inactive transform (off, or inside the warmup window): the raw
        // update is released exactly. Handing back the trained model itself
        // avoids the float round-trip of global + (local - global), which is
        // not an identity — this keeps a one-client DP-off federated run
        // bit-identical to plain SGD.
        let norm = l2_norm(&local.trainable_delta(global)?);
        (local, norm)
    };
    if !released.all_finite() {
        return Err(Error::NonFinite("released client model"));
    }

    let record = ClientRoundRecord {
        round,
        client: client.id,
        loss: loss_sum / steps.max(1) as f64,
        accuracy: correct as f64 / visited.max(1) as f64,
        delta_norm,
        clipped: any_clipped,
        clip_threshold: threshold_in_force,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((released, record))
}

/// Weight vector for the configured scheme, over the given shard sizes.
pub fn aggregation_weights(weights: AggregationWeights, shard_sizes: &[usize]) -> Vec<f64> {
    match weights {
        AggregationWeights::Uniform => {
            vec![1.0 / shard_sizes.len() as f64; shard_sizes.len()]
        }
        AggregationWeights::Proportional => {
            let total: usize = shard_sizes.iter().sum();
            shard_sizes.iter().map(|&s| s as f64 / total as f64).collect()
        }
    }
}

/// Mean loss and accuracy of a model over a sample set (dropout off).
/// An empty set yields NaNs rather than an error so optional validation
/// stays optional.
pub fn evaluate_split(model: &ModelParams, enc: &FrozenEncoder, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (loss, correct) = batch_loss(model, enc, samples, false, 0)?;
    Ok((loss, correct as f64 / samples.len() as f64))
}

/// Run the full federated loop: partition, `T` rounds of local training +
/// aggregation + validation. The encoder's fingerprint is checked every
/// round; any drift aborts the run, since a frozen encoder is the premise
/// the whole scheme rests on.
pub fn run_training(
    cfg: &FedConfig,
    shape: &ModelShape,
    enc: &FrozenEncoder,
    train: &[Sample],
    val: &[Sample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shards = partition(train, &cfg.partition, cfg.clients, cfg.seed)?;
    let shard_sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
    let weights = aggregation_weights(cfg.weights, &shard_sizes);
    let dp_state = init_dp(&cfg.dp, cfg.clients)?;
    let mut clients: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState::new(id, shard, cfg.seed, dp_state.clone()))
        .collect();

    let mut model = shape.init_model(derive_seed(cfg.seed, tags::MODEL_INIT, 0));
    let fingerprint = enc.fingerprint();
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let round_start = Instant::now();
        if enc.fingerprint() != fingerprint {
            return Err(Error::Contract("frozen encoder changed between rounds".into()));
        }
        let results: Vec<Result<(ModelParams, ClientRoundRecord)>> =
            if cfg.parallel && cfg.clients > 1 {
                std::thread::scope(|scope| {
                    let model_ref = &model;
                    let handles: Vec<_> = clients
                        .iter_mut()
                        .map(|c| scope.spawn(move || local_update(c, model_ref, enc, cfg, round)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("client worker panicked"))
                        .collect()
                })
            } else {
                clients
                    .iter_mut()
                    .map(|c| local_update(c, &model, enc, cfg, round))
                    .collect()
            };
        let mut released = Vec::with_capacity(cfg.clients);
        let mut client_records = Vec::with_capacity(cfg.clients);
        for (w, result) in weights.iter().zip(results) {
            let (m, rec) = result?;
            released.push((*w, m));
            client_records.push(rec);
        }

        let agg_start = Instant::now();
        model = aggregate(&model, &released)?;
        let agg_ms = agg_start.elapsed().as_secs_f64() * 1e3;
        let max_client_ms = client_records.iter().map(|r| r.wall_ms).fold(0.0, f64::max);
        let (val_loss, val_accuracy) = evaluate_split(&model, enc, val)?;

        rounds.push(RoundRecord {
            clients: client_records,
            summary: RoundSummary {
                round,
                val_loss,
                val_accuracy,
                wall_ms: round_start.elapsed().as_secs_f64() * 1e3,
                distributed_ms: max_client_ms + agg_ms,
            },
        });
    }
    Ok(TrainOutcome { model, rounds })
}

/// Centralized SGD as the degenerate federated run: one client holding all
/// data, one epoch per round, `epochs` rounds. Shares every code path with
/// [`run_training`], so a one-client DP-off federated run is bit-identical
/// to this by construction, and records arrive per epoch.
pub fn run_centralized(
    cfg: &FedConfig,
    shape: &ModelShape,
    enc: &FrozenEncoder,
    train: &[Sample],
    val: &[Sample],
) -> Result<TrainOutcome> {
    let central = FedConfig {
        clients: 1,
        rounds: cfg.rounds * cfg.epochs,
        epochs: 1,
        partition: PartitionScheme::Even,
        parallel: false,
        ..cfg.clone()
    };
    run_training(&central, shape, enc, train, val)
}

// ---- metrics log codec ----------------------------------------------------
//
// One line per record, `key=value` separated by single spaces. Floats print
// with Rust's shortest round-trip formatting, so parsing recovers the exact
// f64 bits. Two line types:
//   type=client round=.. client=.. loss=.. accuracy=.. delta_norm=.. clipped=.. clip_threshold=.. wall_ms=..
//   type=global round=.. val_loss=.. val_accuracy=.. wall_ms=.. distributed_ms=..

/// Render one client record as a log line.
pub fn client_line(r: &ClientRoundRecord) -> String {
    format!(
        "type=client round={} client={} loss={} accuracy={} delta_norm={} clipped={} clip_threshold={} wall_ms={}",
        r.round, r.client, r.loss, r.accuracy, r.delta_norm, r.clipped, r.clip_threshold, r.wall_ms
    )
}

/// Render one round summary as a log line.
pub fn global_line(s: &RoundSummary) -> String {
    format!(
        "type=global round={} val_loss={} val_accuracy={} wall_ms={} distributed_ms={}",
        s.round, s.val_loss, s.val_accuracy, s.wall_ms, s.distributed_ms
    )
}

/// Render a whole run, client lines before the round's global line.
pub fn records_to_log(rounds: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in rounds {
        for c in &r.clients {
            out.push_str(&client_line(c));
            out.push('\n');
        }
        out.push_str(&global_line(&r.summary));
        out.push('\n');
    }
    out
}

/// One parsed log line.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricsLine {
    Client(ClientRoundRecord),
    Global(RoundSummary),
}

/// Parse a single log line. Every key of the line type must be present
/// exactly once, and no other keys are allowed.
pub fn parse_metrics_line(line: &str) -> Result<MetricsLine> {
    let mut pairs = std::collections::BTreeMap::new();
    for token in line.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metrics token `{token}` is not key=value")))?;
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("metrics line repeats key `{k}`")));
        }
    }
    let mut take = |key: &str| {
        pairs
            .remove(key)
            .ok_or_else(|| Error::Format(format!("metrics line missing key `{key}`")))
    };
    let f = |key: &str, v: String| {
        v.parse::<f64>()
            .map_err(|_| Error::Format(format!("metrics key `{key}`: bad float `{v}`")))
    };
    let u = |key: &str, v: String| {
        v.parse::<usize>()
            .map_err(|_| Error::Format(format!("metrics key `{key}`: bad integer `{v}`")))
    };
    let kind = take("type")?;
    let parsed = match kind.as_str() {
        "client" => MetricsLine::Client(ClientRoundRecord {
            round: u("round", take("round")?)?,
            client: u("client", take("client")?)?,
            loss: f("loss", take("loss")?)?,
            accuracy: f("accuracy", take("accuracy")?)?,
            delta_norm: f("delta_norm", take("delta_norm")?)?,
            clipped: match take("clipped")?.as_str() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Format(format!("metrics key `clipped`: bad bool `{other}`")))
                }
            },
            clip_threshold: f("clip_threshold", take("clip_threshold")?)?,
            wall_ms: f("wall_ms", take("wall_ms")?)?,
        }),
        "global" => MetricsLine::Global(RoundSummary {
            round: u("round", take("round")?)?,
            val_loss: f("val_loss", take("val_loss")?)?,
            val_accuracy: f("val_accuracy", take("val_accuracy")?)?,
            wall_ms: f("wall_ms", take("wall_ms")?)?,
            distributed_ms: f("distributed_ms", take("distributed_ms")?)?,
        }),
        other => return Err(Error::Format(format!("unknown metrics line type `{other}`"))),
    };
    if let Some(extra) = pairs.keys().next() {
        return Err(Error::Format(format!("metrics line has unexpected key `{extra}`")));
    }
    Ok(parsed)
}

/// Rebuild round records from a log. Client lines are grouped under the
/// global line of the same round; clients are ordered by id; every round
/// needs exactly one global line.
pub fn records_from_log(text: &str) -> Result<Vec<RoundRecord>> {
    let mut clients: std::collections::BTreeMap<usize, Vec<ClientRoundRecord>> =
        std::collections::BTreeMap::new();
    let mut summaries: std::collections::BTreeMap<usize, RoundSummary> =
        std::collections::BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_metrics_line(line)? {
            MetricsLine::Client(c) => clients.entry(c.round).or_default().push(c),
            MetricsLine::Global(s) => {
                if summaries.insert(s.round, s.clone()).is_some() {
                    return Err(Error::Format(format!("round {} has two global lines", s.round)));
                }
            }
        }
    }
    let mut rounds = Vec::new();
    for (round, summary) in summaries {
        let mut cs = clients.remove(&round).unwrap_or_default();
        cs.sort_by_key(|c| c.client);
        rounds.push(RoundRecord { clients: cs, summary });
    }
    if let Some(round) = clients.keys().next() {
        return Err(Error::Format(format!("round {round} has client lines but no global line")));
    }
    Ok(rounds)
}
