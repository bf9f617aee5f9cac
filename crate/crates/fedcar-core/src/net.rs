//! TCP deployment of the round loop: an aggregator that serves clients over
//! sockets, and the client loop that talks to it.
//!
//! Both sides derive everything deterministic — validation split, shard
//! assignment, model init, rng streams — from the config snapshot the
//! aggregator sends in `Init`. The network carries only f64 bits, so a
//! networked run produces the same model, bit for bit, as an in-process run
//! of the same config.
//!
//! Round protocol, per client: the aggregator sends `GlobalModel(round)`;
//! the client answers with `Metrics(round)` followed by `LocalModel(round)`.
//! After the last round the aggregator sends `Shutdown`. Any fault — shape
//! mismatch, duplicate id, malformed frame — aborts the run with an `Error`
//! frame to every reachable client.
//!
//! With `parallel = false` the aggregator serves clients one at a time
//! within each round (client k+1 sees the round's model only after client k
//! replied). Releases are aggregated in client-id order either way, so the
//! schedule affects timing measurements only, never the result.

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::{
    aggregate, aggregation_weights, evaluate_split, local_update, parse_metrics_line, partition,
    ClientRoundRecord, ClientState, MetricsLine, RoundRecord, RoundSummary, TrainOutcome,
};
use crate::params::ModelParams;
use crate::rng::{derive_seed, tags};
use crate::wire::{
    error_message, hello_message, init_message, metrics_message, model_message, parse_hello,
    parse_init, parse_metrics, parse_model_message, read_message, shutdown_message, write_message,
    MsgType,
};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

/// Sockets that stay silent this long are treated as dead.
pub const READ_TIMEOUT: Duration = Duration::from_secs(120);

enum HandlerCmd {
    /// Send these frame bytes, then read the client's metrics + model reply.
    Round { round: u32, frame: Arc<Vec<u8>> },
    /// Send these frame bytes (shutdown or error) and finish.
    Finish { frame: Vec<u8> },
}

enum HandlerEvent {
    RoundDone { client: usize, metrics: String, model: ModelParams },
    Failed { client: usize, what: String },
}

/// A bound, not-yet-running aggregation server.
pub struct Aggregator {
    cfg: RunConfig,
    listener: TcpListener,
    timeout: Duration,
}

impl Aggregator {
    /// Bind on `addr` (use port 0 to let the OS pick). The config must pass
    /// validation before any client can connect.
    pub fn bind(cfg: RunConfig, addr: &str) -> Result<Self> {
        cfg.validate()?;
        let listener = TcpListener::bind(addr)?;
        Ok(Self { cfg, listener, timeout: READ_TIMEOUT })
    }

    /// Replace the default socket read timeout.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// The actual listening address, for clients and tests.
    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Run the full training loop against `cfg.clients` remote clients,
    /// using `full` for the shared validation split and shard bookkeeping.
    pub fn run(self, full: &Dataset) -> Result<TrainOutcome> {
        let cfg = Arc::new(self.cfg);
        let m = cfg.clients;
        let (train, val) = crate::data::split_train_val(full, cfg.val_fraction, cfg.seed);
        let shards = partition(&train.samples, &cfg.fed_config().partition, m, cfg.seed)?;
        let shard_sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let weights = aggregation_weights(cfg.weights, &shard_sizes);
        let enc = cfg.build_encoder(full)?;
        let shape = cfg.model_shape(full.n_classes, full.dim);
        let mut model = shape.init_model(derive_seed(cfg.seed, tags::MODEL_INIT, 0));

        // Accept and greet clients. Each handler thread owns one socket and
        // reacts to coordinator commands; ids must be 0..m with no repeats.
        let (event_tx, event_rx) = mpsc::channel::<HandlerEvent>();
        let mut cmd_txs: Vec<Option<mpsc::Sender<HandlerCmd>>> = (0..m).map(|_| None).collect();
        let mut handles = Vec::with_capacity(m);
        let init_text = cfg.to_text();
        for _ in 0..m {
            let (stream, _) = self.listener.accept()?;
            stream.set_read_timeout(Some(self.timeout))?;
            stream.set_nodelay(true)?;
            let id = match greet(&stream, &init_text) {
                Ok(id) => id,
                Err(e) => {
                    let _ = send_best_effort(&stream, &error_message(&e.to_string()));
                    abort_all(&mut cmd_txs, &e.to_string());
                    join_all(handles);
                    return Err(e);
                }
            };
            if id >= m || cmd_txs[id].is_some() {
                let what = if id >= m {
                    format!("client id {id} out of range 0..{m}")
                } else {
                    format!("duplicate client id {id}")
                };
                let _ = send_best_effort(&stream, &error_message(&what));
                abort_all(&mut cmd_txs, &what);
                join_all(handles);
                return Err(Error::Protocol(what));
            }
            let (cmd_tx, cmd_rx) = mpsc::channel::<HandlerCmd>();
            cmd_txs[id] = Some(cmd_tx);
            let events = event_tx.clone();
            let cfg_for_handler = Arc::clone(&cfg);
            handles.push(thread::spawn(move || {
                client_handler(id, stream, cmd_rx, events, cfg_for_handler)
            }));
        }

        // Round loop. `parallel = false` serves one client at a time.
        let mut rounds = Vec::with_capacity(cfg.rounds);
        let fed_weights = weights;
        for round in 0..cfg.rounds {
            let round_start = Instant::now();
            let frame = Arc::new(crate::wire::encode(&model_message(
                MsgType::GlobalModel,
                round as u32,
                &model,
            )?));
            let mut released: Vec<Option<(f64, ModelParams)>> = (0..m).map(|_| None).collect();
            let mut client_records: Vec<Option<ClientRoundRecord>> = (0..m).map(|_| None).collect();
            let collect = |expected: usize,
                               released: &mut Vec<Option<(f64, ModelParams)>>,
                               client_records: &mut Vec<Option<ClientRoundRecord>>|
             -> Result<()> {
                for _ in 0..expected {
                    match event_rx.recv() {
                        Ok(HandlerEvent::RoundDone { client, metrics, model }) => {
                            let record = parse_round_metrics(&metrics, round, client)?;
                            released[client] = Some((fed_weights[client], model));
                            client_records[client] = Some(record);
                        }
                        Ok(HandlerEvent::Failed { client, what }) => {
                            return Err(Error::Protocol(format!("client {client}: {what}")));
                        }
                        Err(_) => return Err(Error::Protocol("all client handlers gone".into())),
                    }
                }
                Ok(())
            };
            let outcome: Result<()> = if cfg.parallel {
                for tx in cmd_txs.iter().flatten() {
                    tx.send(HandlerCmd::Round { round: round as u32, frame: Arc::clone(&frame) })
                        .map_err(|_| Error::Protocol("client handler gone".into()))?;
                }
                collect(m, &mut released, &mut client_records)
            } else {
                (0..m).try_for_each(|k| {
                    cmd_txs[k]
                        .as_ref()
                        .expect("handler registered")
                        .send(HandlerCmd::Round { round: round as u32, frame: Arc::clone(&frame) })
                        .map_err(|_| Error::Protocol("client handler gone".into()))?;
                    collect(1, &mut released, &mut client_records)
                })
            };
            let round_result = outcome.and_then(|()| {
                let updates: Vec<(f64, ModelParams)> =
                    released.into_iter().map(|r| r.expect("all collected")).collect();
                let agg_start = Instant::now();
                let next = aggregate(&model, &updates)?;
                let agg_ms = agg_start.elapsed().as_secs_f64() * 1e3;
                Ok((next, agg_ms))
            });
            match round_result {
                Ok((next, agg_ms)) => {
                    model = next;
                    let records: Vec<ClientRoundRecord> =
                        client_records.into_iter().map(|r| r.expect("all collected")).collect();
                    let max_client_ms = records.iter().map(|r| r.wall_ms).fold(0.0, f64::max);
                    let (val_loss, val_accuracy) = evaluate_split(&model, &enc, &val.samples)?;
                    rounds.push(RoundRecord {
                        clients: records,
                        summary: RoundSummary {
                            round,
                            val_loss,
                            val_accuracy,
                            wall_ms: round_start.elapsed().as_secs_f64() * 1e3,
                            distributed_ms: max_client_ms + agg_ms,
                        },
                    });
                }
                Err(e) => {
                    abort_all(&mut cmd_txs, &e.to_string());
                    join_all(handles);
                    return Err(e);
                }
            }
        }

        let shutdown = crate::wire::encode(&shutdown_message());
        for tx in cmd_txs.iter().flatten() {
            let _ = tx.send(HandlerCmd::Finish { frame: shutdown.clone() });
        }
        join_all(handles);
        Ok(TrainOutcome { model, rounds })
    }
}

/// Read the client's hello and answer with the config snapshot.
fn greet(stream: &TcpStream, init_text: &str) -> Result<usize> {
    let mut reader = stream.try_clone()?;
    let hello = read_message(&mut reader)?;
    let id = parse_hello(&hello)? as usize;
    let mut writer = stream.try_clone()?;
    write_message(&mut writer, &init_message(init_text))?;
    Ok(id)
}

fn send_best_effort(stream: &TcpStream, msg: &crate::wire::WireMessage) -> Result<()> {
    let mut writer = stream.try_clone()?;
    write_message(&mut writer, msg)
}

fn abort_all(cmd_txs: &mut [Option<mpsc::Sender<HandlerCmd>>], what: &str) {
    let frame = crate::wire::encode(&error_message(what));
    for tx in cmd_txs.iter().flatten() {
        let _ = tx.send(HandlerCmd::Finish { frame: frame.clone() });
    }
}

fn join_all(handles: Vec<thread::JoinHandle<()>>) {
    for h in handles {
        let _ = h.join();
    }
}

/// One socket's server-side loop: forward coordinator commands, read replies.
fn client_handler(
    id: usize,
    stream: TcpStream,
    cmds: mpsc::Receiver<HandlerCmd>,
    events: mpsc::Sender<HandlerEvent>,
    cfg: Arc<RunConfig>,
) {
    let fail = |what: String| {
        let _ = events.send(HandlerEvent::Failed { client: id, what });
    };
    let mut reader = match stream.try_clone() {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let mut writer = stream;
    while let Ok(cmd) = cmds.recv() {
        match cmd {
            HandlerCmd::Finish { frame } => {
                let _ = std::io::Write::write_all(&mut writer, &frame);
                let _ = std::io::Write::flush(&mut writer);
                return;
            }
            HandlerCmd::Round { round, frame } => {
                if let Err(e) = std::io::Write::write_all(&mut writer, &frame)
                    .and_then(|()| std::io::Write::flush(&mut writer))
                {
                    return fail(format!("send round {round}: {e}"));
                }
                let reply = (|| -> Result<(String, ModelParams)> {
                    let metrics_msg = read_message(&mut reader)?;
                    let (metrics_round, metrics) = parse_metrics(&metrics_msg)?;
                    if metrics_round != round {
                        return Err(Error::Protocol(format!(
                            "metrics for round {metrics_round} during round {round}"
                        )));
                    }
                    let model_msg = read_message(&mut reader)?;
                    let (model_round, model) = parse_model_message(
                        &model_msg,
                        MsgType::LocalModel,
                        cfg.mode,
                        cfg.dropout,
                    )?;
                    if model_round != round {
                        return Err(Error::Protocol(format!(
                            "model for round {model_round} during round {round}"
                        )));
                    }
                    Ok((metrics, model))
                })();
                match reply {
                    Ok((metrics, model)) => {
                        if events
                            .send(HandlerEvent::RoundDone { client: id, metrics, model })
                            .is_err()
                        {
                            return;
                        }
                    }
                    Err(e) => return fail(format!("round {round}: {e}")),
                }
            }
        }
    }
}

/// The metrics payload for a round must be exactly one client line matching
/// the round and client id it arrived under.
fn parse_round_metrics(text: &str, round: usize, client: usize) -> Result<ClientRoundRecord> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| Error::Protocol(format!("client {client}: empty metrics payload")))?;
    if lines.next().is_some() {
        return Err(Error::Protocol(format!("client {client}: more than one metrics line")));
    }
    match parse_metrics_line(first)? {
        MetricsLine::Client(rec) if rec.round == round && rec.client == client => Ok(rec),
        MetricsLine::Client(rec) => Err(Error::Protocol(format!(
            "metrics line labeled round {} client {}, expected round {round} client {client}",
            rec.round, rec.client
        ))),
        MetricsLine::Global(_) => {
            Err(Error::Protocol(format!("client {client}: sent a global metrics line")))
        }
    }
}

/// Connection settings for [`serve_client`].
pub struct ClientOptions {
    pub id: u32,
    /// Address of the aggregator, `host:port`.
    pub connect: String,
    /// Extra connection attempts after the first, with growing pauses.
    pub retries: u32,
    /// Socket read timeout; a silent aggregator is treated as dead.
    pub timeout: Duration,
}

impl ClientOptions {
    pub fn new(id: u32, connect: impl Into<String>) -> Self {
        Self { id, connect: connect.into(), retries: 3, timeout: READ_TIMEOUT }
    }
}

/// What a finished client session reports.
pub struct ClientSummary {
    pub rounds_completed: usize,
    /// Forward passes through the frozen encoder, for call accounting.
    pub encoder_calls: u64,
}

/// The client side: connect, announce the id, receive the config, derive the
/// local shard, then answer every round until shutdown. The full dataset is
/// loaded locally; nothing but model tensors and metrics crosses the wire.
pub fn serve_client(opts: &ClientOptions, full: &Dataset) -> Result<ClientSummary> {
    let stream = connect_with_retries(&opts.connect, opts.retries)?;
    stream.set_read_timeout(Some(opts.timeout))?;
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;

    write_message(&mut writer, &hello_message(opts.id))?;
    let first = read_message(&mut reader)?;
    if first.msg_type == MsgType::Error {
        return Err(Error::Protocol(format!("aggregator refused: {}", crate::wire::parse_error(&first)?)));
    }
    let cfg = RunConfig::parse(&parse_init(&first)?)?;
    let id = opts.id as usize;
    if id >= cfg.clients {
        return Err(Error::Config(format!("client id {id} out of range 0..{}", cfg.clients)));
    }

    let (train, _val) = crate::data::split_train_val(full, cfg.val_fraction, cfg.seed);
    let fed = cfg.fed_config();
    let shards = partition(&train.samples, &fed.partition, cfg.clients, cfg.seed)?;
    let enc = cfg.build_encoder(full)?;
    let dp_state = crate::dp::init_dp(&fed.dp, cfg.clients)?;
    let mut state = ClientState::new(id, shards[id].clone(), cfg.seed, dp_state);

    let mut rounds_completed = 0;
    loop {
        let msg = read_message(&mut reader)?;
        match msg.msg_type {
            MsgType::Shutdown => {
                return Ok(ClientSummary { rounds_completed, encoder_calls: enc.forward_calls() })
            }
            MsgType::Error => {
                return Err(Error::Protocol(format!(
                    "aggregator aborted: {}",
                    crate::wire::parse_error(&msg)?
                )))
            }
            MsgType::GlobalModel => {
                let (round, global) =
                    parse_model_message(&msg, MsgType::GlobalModel, cfg.mode, cfg.dropout)?;
                let (released, record) =
                    local_update(&mut state, &global, &enc, &fed, round as usize)?;
                let line = crate::fed::client_line(&record);
                write_message(&mut writer, &metrics_message(round, &line))?;
                write_message(&mut writer, &model_message(MsgType::LocalModel, round, &released)?)?;
                rounds_completed += 1;
            }
            other => {
                return Err(Error::Protocol(format!("unexpected {other:?} frame from aggregator")))
            }
        }
    }
}

fn connect_with_retries(addr: &str, retries: u32) -> Result<TcpStream> {
    let mut pause = Duration::from_millis(250);
    let mut last: Option<std::io::Error> = None;
    for attempt in 0..=retries {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                last = Some(e);
                if attempt < retries {
                    thread::sleep(pause);
                    pause = (pause * 2).min(Duration::from_secs(1));
                }
            }
        }
    }
    Err(last.expect("at least one attempt").into())
}
