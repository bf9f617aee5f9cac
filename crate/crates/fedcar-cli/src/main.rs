//! `fedcar` — train, serve, evaluate, and certify retrieval classifiers
//! under federated averaging with local differential privacy.
//!
//! Every run writes four artifacts into its output directory: a config
//! snapshot that reproduces the run bit-for-bit, a line-delimited metrics
//! log, the final model in the wire tensor format, and a plain-text summary.

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedcar_core::config::RunConfig;
use fedcar_core::data::{gen_synthetic, load_hidden_states, save_hidden_states, split_train_val, Dataset};
use fedcar_core::error::{Error, Result};
use fedcar_core::eval::{build_index, evaluate, four_way_comparison, Retriever};
use fedcar_core::fed::{records_to_log, run_training, TrainOutcome};
use fedcar_core::net::{Aggregator, ClientOptions};
use fedcar_core::params::AdapterParams;
use fedcar_core::theory::{
    certify_constants, estimate_constants, load_trace, render_report, run_instrumented,
    save_trace, verify_bound,
};
use fedcar_core::wire::{load_model, save_model};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "fedcar",
    about = "Federated retrieval-classifier training with local differential privacy",
    after_help = RunConfig::KEY_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set rounds=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset file (overrides the `dataset` config key).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the `out_dir` config key).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Copy, Clone, ValueEnum)]
enum RetrieverChoice {
    /// Rank labels by classifier logits.
    Classifier,
    /// Inner-product search over class centroids under the trained adapter.
    MipsTrained,
    /// Inner-product search with the adapter pinned to identity.
    MipsIdentity,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic Gaussian-blob dataset and save it.
    GenData {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        /// Number of classes.
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Feature dimension.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Within-class standard deviation.
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train, either federated (clients > 1) or centralized (clients = 1).
    /// With `instrument = true` the run records a gradient trace instead of
    /// the round metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Serve the aggregator side of a networked run, then write artifacts.
    ServeAgg {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TCP listen address, e.g. 127.0.0.1:0 for an ephemeral port.
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
        /// Socket read timeout in seconds; silent peers are treated as dead.
        #[arg(long = "timeout-s", default_value_t = 120.0)]
        timeout_s: f64,
    },
    /// Serve one client of a networked run.
    ServeClient {
        /// Client id, 0-based, below the aggregator's `clients`.
        #[arg(long = "client-id")]
        client_id: u32,
        /// Aggregator address, e.g. 127.0.0.1:7070.
        #[arg(long)]
        connect: String,
        /// Dataset file (must match the aggregator's).
        #[arg(long)]
        data: PathBuf,
        /// Connection attempts before giving up.
        #[arg(long, default_value_t = 3)]
        retries: u32,
        /// Socket read timeout in seconds; a silent aggregator is treated as dead.
        #[arg(long = "timeout-s", default_value_t = 120.0)]
        timeout_s: f64,
    },
    /// Score a trained run directory: hit@K over a dataset split.
    Eval {
        /// Run directory holding config.txt and model.bin.
        #[arg(long)]
        run: PathBuf,
        /// Dataset file (defaults to the `dataset` key in the snapshot).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which split of the dataset to score.
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Retrieval depths.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize])]
        k: Vec<usize>,
        /// How to retrieve.
        #[arg(long, value_enum, default_value_t = RetrieverChoice::Classifier)]
        retriever: RetrieverChoice,
    },
    /// Train four retrieval variants and print their hit-rate table.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Retrieval depths.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
        k: Vec<usize>,
    },
    /// Certify an instrumented run: estimate envelope constants from its
    /// gradient trace and check the stationarity bound.
    Bound {
        /// Run directory holding trace.bin.
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, n_per_class, classes, dim, spread, seed } => {
            if n_per_class == 0 || classes == 0 || dim == 0 {
                return Err(Error::Config("counts must be at least 1".into()));
            }
            if !(spread > 0.0) {
                return Err(Error::Config(format!("spread must be positive, got {spread}")));
            }
            let ds = gen_synthetic(n_per_class, classes, dim, spread, seed);
            save_hidden_states(&ds, &out)?;
            println!(
                "wrote {} samples ({} classes, dim {}) to {}",
                ds.len(),
                classes,
                dim,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { cfg } => cmd_train(cfg),
        Cmd::ServeAgg { cfg, bind, timeout_s } => cmd_serve_agg(cfg, &bind, timeout(timeout_s)?),
        Cmd::ServeClient { client_id, connect, data, retries, timeout_s } => {
            let full = load_hidden_states(&data)?;
            let mut opts = ClientOptions::new(client_id, connect);
            opts.retries = retries;
            opts.timeout = timeout(timeout_s)?;
            let summary = serve_client_summary(&opts, &full)?;
            println!(
                "client {client_id}: rounds_completed = {} encoder_calls = {}",
                summary.0, summary.1
            );
            Ok(())
        }
        Cmd::Eval { run, data, split, k, retriever } => cmd_eval(&run, data, split, &k, retriever),
        Cmd::Compare { cfg, k } => cmd_compare(cfg, &k),
        Cmd::Bound { run } => cmd_bound(&run),
    }
}

/// Parse the config file (or defaults), apply `--set` pairs and the
/// `--data`/`--out` overrides, and validate — all before any compute.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got '{pair}'")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(data) = &args.data {
        cfg.dataset = data.display().to_string();
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    if cfg.dataset.is_empty() {
        return Err(Error::Config(
            "no dataset: set the `dataset` config key or pass --data".into(),
        ));
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    load_hidden_states(Path::new(&cfg.dataset))
}

/// Write the config snapshot first so a failed run is still reproducible.
fn snapshot_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn write_summary(dir: &Path, lines: &[(&str, String)]) -> Result<String> {
    let mut text = String::new();
    for (key, value) in lines {
        text.push_str(&format!("{key} = {value}\n"));
    }
    std::fs::write(dir.join("summary.txt"), &text)?;
    Ok(text)
}

fn cmd_train(args: ConfigArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    snapshot_config(&out_dir, &cfg)?;
    let full = load_dataset(&cfg)?;
    let started = std::time::Instant::now();

    if cfg.instrument {
        let (trace, model) = run_instrumented(&cfg, &full)?;
        save_trace(&out_dir.join("trace.bin"), &trace)?;
        save_model(&out_dir.join("model.bin"), &model)?;
        let summary = write_summary(
            &out_dir,
            &[
                ("command", "train (instrumented)".into()),
                ("iterates", trace.points.len().to_string()),
                ("clients", trace.m.to_string()),
                ("initial_full_loss", format!("{}", trace.points[0].full_loss)),
                ("final_full_loss", format!("{}", trace.f_final)),
                ("best_full_loss", format!("{}", trace.f_star)),
                ("total_wall_ms", started.elapsed().as_millis().to_string()),
                ("trace", "trace.bin".into()),
                ("model", "model.bin".into()),
            ],
        )?;
        print!("{summary}");
        return Ok(());
    }

    let (train, val) = split_train_val(&full, cfg.val_fraction, cfg.seed);
    let shape = cfg.model_shape(full.n_classes, full.dim);
    let enc = cfg.build_encoder(&full)?;
    let outcome = run_training(&cfg.fed_config(), &shape, &enc, &train.samples, &val.samples)?;
    write_outcome(&out_dir, &outcome, started.elapsed().as_millis(), Some(enc.forward_calls()))?;
    save_model(&out_dir.join("model.bin"), &outcome.model)?;
    Ok(())
}

/// Metrics log, summary, and a stdout echo for a finished training outcome.
fn write_outcome(
    dir: &Path,
    outcome: &TrainOutcome,
    wall_ms: u128,
    encoder_calls: Option<u64>,
) -> Result<()> {
    std::fs::write(dir.join("metrics.log"), records_to_log(&outcome.rounds))?;
    let last = outcome.rounds.last();
    let sum_client_ms: f64 = outcome
        .rounds
        .iter()
        .flat_map(|r| r.clients.iter())
        .map(|c| c.wall_ms)
        .sum();
    let max_distributed_ms: f64 = outcome
        .rounds
        .iter()
        .map(|r| r.summary.distributed_ms)
        .fold(0.0, f64::max);
    let mut lines: Vec<(&str, String)> = vec![
        ("command", "train".into()),
        ("rounds", outcome.rounds.len().to_string()),
        (
            "final_val_loss",
            last.map_or("NaN".into(), |r| format!("{}", r.summary.val_loss)),
        ),
        (
            "final_val_accuracy",
            last.map_or("NaN".into(), |r| format!("{}", r.summary.val_accuracy)),
        ),
        ("total_wall_ms", wall_ms.to_string()),
        ("sum_client_wall_ms", sum_client_ms.to_string()),
        ("max_round_distributed_ms", max_distributed_ms.to_string()),
    ];
    if let Some(calls) = encoder_calls {
        lines.push(("encoder_forward_calls", calls.to_string()));
    }
    lines.push(("metrics", "metrics.log".into()));
    lines.push(("model", "model.bin".into()));
    let summary = write_summary(dir, &lines)?;
    print!("{summary}");
    Ok(())
}

fn timeout(seconds: f64) -> Result<std::time::Duration> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::Config(format!("--timeout-s must be positive, got {seconds}")));
    }
    Ok(std::time::Duration::from_secs_f64(seconds))
}

fn cmd_serve_agg(args: ConfigArgs, bind: &str, timeout: std::time::Duration) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    snapshot_config(&out_dir, &cfg)?;
    let full = load_dataset(&cfg)?;
    let agg = Aggregator::bind(cfg, bind)?.with_timeout(timeout);
    // announce the real port (listen may be :0) before blocking on accepts
    println!("listening on {}", agg.local_addr()?);
    std::io::stdout().flush()?;
    let started = std::time::Instant::now();
    let outcome = agg.run(&full)?;
    write_outcome(&out_dir, &outcome, started.elapsed().as_millis(), None)?;
    save_model(&out_dir.join("model.bin"), &outcome.model)?;
    Ok(())
}

fn serve_client_summary(opts: &ClientOptions, full: &Dataset) -> Result<(usize, u64)> {
    let summary = fedcar_core::net::serve_client(opts, full)?;
    Ok((summary.rounds_completed, summary.encoder_calls))
}

fn cmd_eval(
    run: &Path,
    data: Option<PathBuf>,
    split: Split,
    ks: &[usize],
    retriever: RetrieverChoice,
) -> Result<()> {
    let mut cfg = RunConfig::parse(&std::fs::read_to_string(run.join("config.txt"))?)?;
    if let Some(data) = data {
        cfg.dataset = data.display().to_string();
    }
    let model = load_model(&run.join("model.bin"), cfg.mode, cfg.dropout)?;
    let full = load_dataset(&cfg)?;
    let enc = cfg.build_encoder(&full)?;
    let (train, val) = split_train_val(&full, cfg.val_fraction, cfg.seed);
    let samples = match split {
        Split::All => &full.samples,
        Split::Train => &train.samples,
        Split::Val => &val.samples,
    };
    let index;
    let identity;
    let chosen = match retriever {
        RetrieverChoice::Classifier => Retriever::Classifier(&model),
        RetrieverChoice::MipsTrained => {
            index = build_index(&enc, &model.adapter, &train)?;
            Retriever::Mips { adapter: &model.adapter, index: &index }
        }
        RetrieverChoice::MipsIdentity => {
            identity = AdapterParams::identity(model.adapter.dim);
            index = build_index(&enc, &identity, &train)?;
            Retriever::Mips { adapter: &identity, index: &index }
        }
    };
    let table = evaluate(&chosen, &enc, samples, ks)?;
    println!("samples = {}", samples.len());
    for (k, rate) in table.ks.iter().zip(&table.hit_rate) {
        println!("hit@{k} = {rate}");
    }
    Ok(())
}

fn cmd_compare(args: ConfigArgs, ks: &[usize]) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let full = load_dataset(&cfg)?;
    let report = four_way_comparison(&cfg, &full, ks)?;
    let table = report.to_table();
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_bound(run: &Path) -> Result<()> {
    let trace = load_trace(&run.join("trace.bin"))?;
    let constants = estimate_constants(&trace)?;
    let scan = certify_constants(&trace, &constants);
    let report = verify_bound(&trace, &constants)?;
    let mut text = render_report(&trace, &constants, &report);
    for line in &scan {
        text.push_str(&format!("  ! {line}\n"));
    }
    std::fs::write(run.join("theory.txt"), &text)?;
    print!("{text}");
    Ok(())
}
