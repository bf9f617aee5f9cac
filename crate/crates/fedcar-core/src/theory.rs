//! Convergence certification: instrumented runs, constant estimation, and
//! the two stationarity bounds the trainer is expected to satisfy.
//!
//! The analysis views training as `T+1` iterations indexed `t = 0..=T`. At
//! each iteration every client takes a single stochastic gradient step of
//! size α from the shared model, releases it through the privacy transform,
//! and the server averages the releases uniformly. [`run_instrumented`]
//! executes exactly that loop while recording, at every iterate θ^(t):
//!
//! * the full-batch per-client gradients ∇F_i(θ) and their uniform mean
//!   ∇F(θ), plus the full loss F(θ);
//! * probe minibatch gradients drawn from a dedicated stream, giving
//!   unbiased samples of the stochastic-gradient noise without perturbing
//!   the trajectory;
//! * clip thresholds in force, whether clipping fired, and raw update norms.
//!
//! [`estimate_constants`] turns a trace into certified envelope constants:
//! the fits are inflated until every recorded instance satisfies them, so
//! they are upper envelopes over the trace, not average-case fits. The
//! bounds then evaluate with those constants, and [`verify_bound`] compares
//! the measured mean squared gradient norm against the bound value.

use crate::config::{EncoderChoice, RunConfig};
use crate::data::Dataset;
use crate::dp::{adapt_threshold, dp_transform, init_dp, DpConfig, DpMode};
use crate::error::{Error, Result};
use crate::fed::{aggregate, run_centralized, PartitionScheme};
use crate::model::loss_and_gradients;
use crate::params::{l2_norm, ModelParams};
use crate::rng::{derive_seed, tags, SplitMix64};
use std::io::Read;
use std::path::Path;

pub const TRACE_MAGIC: [u8; 4] = *b"FCGT";
pub const TRACE_VERSION: u8 = 1;

/// Everything recorded at one iterate θ^(t), before the update is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub round: usize,
    /// F(θ^(t)): uniform mean of per-client full-batch losses.
    pub full_loss: f64,
    /// Flat trainable parameters θ^(t).
    pub theta: Vec<f64>,
    /// ∇F(θ^(t)): uniform mean of the client gradients.
    pub global_grad: Vec<f64>,
    /// ∇F_i(θ^(t)), full batch over each client's shard.
    pub client_grads: Vec<Vec<f64>>,
    /// `[client][probe]` squared distance between a probe minibatch gradient
    /// and the client's full gradient.
    pub probe_sq_dev: Vec<Vec<f64>>,
    /// `[client][draw]` stochastic gradient norms: the probes, then the
    /// actual update draw last.
    pub stoch_norms: Vec<Vec<f64>>,
    /// Clip threshold each client had in force when releasing this round.
    pub clip_thresholds: Vec<f64>,
    /// Whether the release was actually rescaled.
    pub clipped: Vec<bool>,
    /// Pre-clip update norms ‖Δθ_i‖ = α‖g_i‖.
    pub update_norms: Vec<f64>,
}

/// A full instrumented run plus the reference information the bounds need.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTrace {
    pub m: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub probes: usize,
    pub dp: DpConfig,
    pub points: Vec<TracePoint>,
    /// θ^(T+1), after the last aggregation.
    pub final_theta: Vec<f64>,
    /// F(θ^(T+1)).
    pub f_final: f64,
    /// Best full loss observed anywhere: all iterates, the final model, and
    /// an overtrained long reference run. Stands in for the unknowable F*.
    pub f_star: f64,
}

impl GradientTrace {
    /// T, the last iteration index (`points` holds T+1 iterates).
    pub fn t_max(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    /// Mean squared global gradient norm over all iterates — the measured
    /// left side of both bounds.
    pub fn measured_mean_grad_sq(&self) -> f64 {
        let sum: f64 = self.points.iter().map(|p| {
            let n = l2_norm(&p.global_grad);
            n * n
        }).sum();
        sum / self.points.len() as f64
    }
}

/// Sample `k` distinct indices out of `0..n` (a minibatch draw).
fn draw_batch(rng: &mut SplitMix64, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = i + rng.next_below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx
}

/// Run the analysis-form training loop under full instrumentation.
///
/// Each of `cfg.rounds` rounds is ONE stochastic step per client (the
/// `epochs` key is not consulted), shards are even, aggregation is uniform,
/// and the trace records the quantities the assumptions talk about. Probe
/// draws come from their own stream, so changing `cfg.trace_probes` leaves
/// the trajectory bit-identical.
///
/// Requirements checked here: the train split divides evenly among clients
/// (so the uniform mean of shard losses is the plain sample mean), dropout
/// is inert, and the privacy mechanism has no warmup window (the analyzed
/// algorithm runs from the first iteration).
pub fn run_instrumented(cfg: &RunConfig, full: &Dataset) -> Result<(GradientTrace, ModelParams)> {
    cfg.validate()?;
    if cfg.pre_classifier && cfg.dropout > 0.0 {
        return Err(Error::Config("instrumented runs need dropout = 0".into()));
    }
    if cfg.dp_config().warmup_rounds != 0 {
        return Err(Error::Config(
            "instrumented runs analyze the mechanism from iteration 0; set dp.warmup_rounds = 0".into(),
        ));
    }
    let m = cfg.clients;
    let (train, _val) = crate::data::split_train_val(full, cfg.val_fraction, cfg.seed);
    if train.len() % m != 0 {
        return Err(Error::Config(format!(
            "instrumented runs need the train split ({} samples) divisible by clients ({m})",
            train.len()
        )));
    }
    let shards = crate::fed::partition(&train.samples, &PartitionScheme::Even, m, cfg.seed)?;
    let enc = cfg.build_encoder(full)?;
    let shape = cfg.model_shape(full.n_classes, full.dim);
    let mut model = shape.init_model(derive_seed(cfg.seed, tags::MODEL_INIT, 0));
    let dp = cfg.dp_config();
    let mut dp_states: Vec<_> = (0..m).map(|_| init_dp(&dp, m)).collect::<Result<_>>()?;
    let mut draw_rngs: Vec<SplitMix64> = (0..m)
        .map(|i| SplitMix64::new(derive_seed(cfg.seed, tags::CLIENT_SHUFFLE, i as u64)))
        .collect();
    let mut noise_rngs: Vec<SplitMix64> = (0..m)
        .map(|i| SplitMix64::new(derive_seed(cfg.seed, tags::CLIENT_NOISE, i as u64)))
        .collect();
    let mut probe_rngs: Vec<SplitMix64> = (0..m)
        .map(|i| SplitMix64::new(derive_seed(cfg.seed, tags::TRACE_PROBE, i as u64)))
        .collect();
    let alpha = cfg.lr;
    let dim = model.trainable_len();
    let uniform = vec![1.0 / m as f64; m];

    let mut points = Vec::with_capacity(cfg.rounds);
    let mut best_loss = f64::INFINITY;
    for round in 0..cfg.rounds {
        // full-batch picture at theta^(t)
        let theta = model.trainable_vec();
        let mut client_grads = Vec::with_capacity(m);
        let mut full_loss = 0.0;
        for shard in &shards {
            let (loss, _, grads) = loss_and_gradients(&model, &enc, shard, false, 0)?;
            full_loss += loss / m as f64;
            client_grads.push(grads.values);
        }
        let mut global_grad = vec![0.0; dim];
        for g in &client_grads {
            for (acc, v) in global_grad.iter_mut().zip(g) {
                *acc += v / m as f64;
            }
        }
        best_loss = best_loss.min(full_loss);

        // probe draws: unbiased stochastic gradients at the same iterate
        let mut probe_sq_dev = Vec::with_capacity(m);
        let mut stoch_norms = Vec::with_capacity(m);
        for (i, shard) in shards.iter().enumerate() {
            let mut devs = Vec::with_capacity(cfg.trace_probes);
            let mut norms = Vec::with_capacity(cfg.trace_probes + 1);
            for _ in 0..cfg.trace_probes {
                let picks = draw_batch(&mut probe_rngs[i], shard.len(), cfg.batch_size);
                let batch: Vec<_> = picks.iter().map(|&j| shard[j].clone()).collect();
                let (_, _, grads) = loss_and_gradients(&model, &enc, &batch, false, 0)?;
                let dev: f64 = grads
                    .values
                    .iter()
                    .zip(&client_grads[i])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                devs.push(dev);
                norms.push(l2_norm(&grads.values));
            }
            probe_sq_dev.push(devs);
            stoch_norms.push(norms);
        }

        // the actual update: one stochastic step per client, released
        // through the privacy transform, aggregated uniformly
        let mut released = Vec::with_capacity(m);
        let mut clip_thresholds = Vec::with_capacity(m);
        let mut clipped = Vec::with_capacity(m);
        let mut update_norms = Vec::with_capacity(m);
        for (i, shard) in shards.iter().enumerate() {
            let picks = draw_batch(&mut draw_rngs[i], shard.len(), cfg.batch_size);
            let batch: Vec<_> = picks.iter().map(|&j| shard[j].clone()).collect();
            let (_, _, grads) = loss_and_gradients(&model, &enc, &batch, false, 0)?;
            stoch_norms[i].push(l2_norm(&grads.values));
            let delta: Vec<f64> = grads.values.iter().map(|g| -alpha * g).collect();
            let norm = l2_norm(&delta);
            clip_thresholds.push(dp_states[i].c);
            clipped.push(dp.active_at(round) && norm > dp_states[i].c);
            update_norms.push(norm);
            let out = dp_transform(&model, &delta, &dp, &dp_states[i], round, &mut noise_rngs[i])?;
            if matches!(dp.mode, DpMode::Adaptive { .. }) && dp.active_at(round) {
                dp_states[i] = adapt_threshold(&dp_states[i], &dp, norm)?;
            }
            released.push((uniform[i], out));
        }
        model = aggregate(&model, &released)?;

        points.push(TracePoint {
            round,
            full_loss,
            theta,
            global_grad,
            client_grads,
            probe_sq_dev,
            stoch_norms,
            clip_thresholds,
            clipped,
            update_norms,
        });
    }

    // terminal loss and the overtrained reference for the F* proxy
    let final_theta = model.trainable_vec();
    let mut f_final = 0.0;
    for shard in &shards {
        let (loss, _) = crate::model::batch_loss(&model, &enc, shard, false, 0)?;
        f_final += loss / m as f64;
    }
    best_loss = best_loss.min(f_final);

    let mut ref_cfg = cfg.fed_config();
    ref_cfg.dp = DpConfig::off();
    ref_cfg.rounds = 1;
    ref_cfg.epochs = 200;
    let reference = run_centralized(&ref_cfg, &shape, &enc, &train.samples, &[])?;
    let (ref_loss, _) = crate::model::batch_loss(&reference.model, &enc, &train.samples, false, 0)?;
    let f_star = best_loss.min(ref_loss);

    let trace = GradientTrace {
        m,
        alpha,
        batch_size: cfg.batch_size,
        probes: cfg.trace_probes,
        dp,
        points,
        final_theta,
        f_final,
        f_star,
    };
    Ok((trace, model))
}

// ---- constant estimation ----------------------------------------------------

/// Envelope constants fitted from a trace. Every inequality they appear in
/// holds pointwise on that trace (see [`certify_constants`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConstants {
    /// Smoothness: max observed ‖∇F(θ)−∇F(θ′)‖ / ‖θ−θ′‖.
    pub l_bar: f64,
    /// Stochastic-variance envelope: mean_i E‖g_i−∇F_i‖² ≤ ρ0² + ρ1²‖∇F‖².
    pub rho0_sq: f64,
    pub rho1_sq: f64,
    /// Gradient-diversity envelope: mean_i ‖∇F_i−∇F‖² ≤ ζ0² + ζ1²‖∇F‖².
    pub zeta0_sq: f64,
    pub zeta1_sq: f64,
    /// Stochastic gradient norm bound (max observed, inflated 5%).
    pub b: f64,
    /// Max per-client empirical clipping frequency.
    pub p: f64,
    /// Slack parameters of the descent-window split; any value > 1 works.
    pub gamma1: f64,
    pub gamma2: f64,
    /// Loss at the first iterate.
    pub f0: f64,
    /// Best-loss proxy for the unknowable optimum.
    pub f_star: f64,
}

/// Exact nonnegative least squares for y ≈ a + b·x (two parameters): solve
/// unconstrained, then enumerate the active-set cases if a sign goes wrong.
fn nnls_affine(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter().zip(ys).map(|(x, y)| (y - a - b * x) * (y - a - b * x)).sum()
    };
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    if det.abs() > 1e-300 {
        let b = (n * sxy - sx * sy) / det;
        let a = (sy - b * sx) / n;
        if a >= 0.0 && b >= 0.0 {
            return (a, b);
        }
    }
    // a = 0: minimize over b >= 0
    if sxx > 0.0 {
        candidates.push((0.0, (sxy / sxx).max(0.0)));
    }
    // b = 0: minimize over a >= 0
    candidates.push(((sy / n).max(0.0), 0.0));
    candidates
        .into_iter()
        .min_by(|u, v| sse(u.0, u.1).partial_cmp(&sse(v.0, v.1)).unwrap())
        .unwrap()
}

/// Fit an envelope y ≤ a + b·x: nonnegative least squares, then the
/// intercept is inflated by the worst residual so the inequality holds on
/// every point.
fn envelope_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let (mut a, b) = nnls_affine(xs, ys);
    let worst = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| y - (a + b * x))
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > 0.0 {
        a += worst;
    }
    (a, b)
}

/// Per-point left/right sides used by both the fits and the re-scan.
fn assumption_samples(trace: &GradientTrace) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(trace.points.len());
    let mut rho_lhs = Vec::with_capacity(trace.points.len());
    let mut zeta_lhs = Vec::with_capacity(trace.points.len());
    for p in &trace.points {
        let g = l2_norm(&p.global_grad);
        xs.push(g * g);
        let rho: f64 = p
            .probe_sq_dev
            .iter()
            .map(|devs| devs.iter().sum::<f64>() / devs.len().max(1) as f64)
            .sum::<f64>()
            / trace.m as f64;
        rho_lhs.push(rho);
        let zeta: f64 = p
            .client_grads
            .iter()
            .map(|gi| {
                gi.iter()
                    .zip(&p.global_grad)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / trace.m as f64;
        zeta_lhs.push(zeta);
    }
    (xs, rho_lhs, zeta_lhs)
}

/// Estimate all constants from a trace. Needs at least two iterates for the
/// smoothness ratio.
pub fn estimate_constants(trace: &GradientTrace) -> Result<TheoryConstants> {
    if trace.points.len() < 2 {
        return Err(Error::Contract(format!(
            "smoothness estimation needs at least 2 iterates, trace has {}",
            trace.points.len()
        )));
    }
    let mut l_bar: f64 = 0.0;
    for (i, a) in trace.points.iter().enumerate() {
        for b in &trace.points[i + 1..] {
            let dg: f64 = a
                .global_grad
                .iter()
                .zip(&b.global_grad)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dt: f64 = a
                .theta
                .iter()
                .zip(&b.theta)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dt > 1e-12 {
                l_bar = l_bar.max(dg / dt);
            }
        }
    }
    let (xs, rho_lhs, zeta_lhs) = assumption_samples(trace);
    let (rho0_sq, rho1_sq) = envelope_fit(&xs, &rho_lhs);
    let (zeta0_sq, zeta1_sq) = envelope_fit(&xs, &zeta_lhs);
    let max_norm = trace
        .points
        .iter()
        .flat_map(|p| p.stoch_norms.iter().flatten())
        .fold(0.0f64, |acc, &v| acc.max(v));
    let rounds = trace.points.len() as f64;
    let p = (0..trace.m)
        .map(|i| {
            trace.points.iter().filter(|pt| pt.clipped[i]).count() as f64 / rounds
        })
        .fold(0.0f64, f64::max);
    Ok(TheoryConstants {
        l_bar,
        rho0_sq,
        rho1_sq,
        zeta0_sq,
        zeta1_sq,
        b: max_norm * 1.05,
        p,
        gamma1: 2.0,
        gamma2: 2.0,
        f0: trace.points[0].full_loss,
        f_star: trace.f_star,
    })
}

/// Re-scan the trace against fitted constants: every recorded instance of
/// the variance, diversity, norm-bound, and clip-frequency inequalities must
/// hold. Returns human-readable violations; empty means the constants are a
/// genuine certificate for this trace.
pub fn certify_constants(trace: &GradientTrace, c: &TheoryConstants) -> Vec<String> {
    let mut bad = Vec::new();
    let tol = 1e-9;
    let (xs, rho_lhs, zeta_lhs) = assumption_samples(trace);
    for (t, ((x, rho), zeta)) in xs.iter().zip(&rho_lhs).zip(&zeta_lhs).enumerate() {
        if *rho > c.rho0_sq + c.rho1_sq * x + tol {
            bad.push(format!("iterate {t}: variance lhs {rho} exceeds envelope"));
        }
        if *zeta > c.zeta0_sq + c.zeta1_sq * x + tol {
            bad.push(format!("iterate {t}: diversity lhs {zeta} exceeds envelope"));
        }
    }
    for (t, p) in trace.points.iter().enumerate() {
        for (i, norms) in p.stoch_norms.iter().enumerate() {
            for &n in norms {
                if n > c.b + tol {
                    bad.push(format!("iterate {t} client {i}: gradient norm {n} exceeds B = {}", c.b));
                }
            }
        }
    }
    let rounds = trace.points.len() as f64;
    for i in 0..trace.m {
        let freq = trace.points.iter().filter(|pt| pt.clipped[i]).count() as f64 / rounds;
        if freq > c.p + tol {
            bad.push(format!("client {i}: clip frequency {freq} exceeds p = {}", c.p));
        }
    }
    // smoothness: the estimate is the max ratio, so every pair must fit it
    for (i, a) in trace.points.iter().enumerate() {
        for b in &trace.points[i + 1..] {
            let dg: f64 = a
                .global_grad
                .iter()
                .zip(&b.global_grad)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let dt: f64 = a
                .theta
                .iter()
                .zip(&b.theta)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dt > 1e-12 && dg / dt > c.l_bar * (1.0 + 1e-12) + tol {
                bad.push(format!(
                    "iterates {i}/{}: gradient ratio {} exceeds smoothness {}",
                    b.round,
                    dg / dt,
                    c.l_bar
                ));
            }
        }
    }
    bad
}

// ---- fixed-mechanism bound ---------------------------------------------------

/// Descent weight for the fixed mechanism:
/// ω = min(C/B · (1−1/Γ₁), α · (1−1/Γ₂)).
pub fn omega_fixed(c: f64, b: f64, alpha: f64, gamma1: f64, gamma2: f64) -> Result<f64> {
    for (name, v) in [("C", c), ("B", b), ("alpha", alpha)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Contract(format!("omega needs positive {name}, got {v}")));
        }
    }
    if gamma1 <= 1.0 || gamma2 <= 1.0 {
        return Err(Error::Contract(format!(
            "slack parameters must exceed 1, got {gamma1} and {gamma2}"
        )));
    }
    Ok(((c / b) * (1.0 - 1.0 / gamma1)).min(alpha * (1.0 - 1.0 / gamma2)))
}

/// Largest admissible constant step size for the fixed mechanism. The
/// noise-proportional variance coefficient σ₁ is identically zero here, so
/// its (1+σ₁²) factor is 1.
pub fn alpha_limit_fixed(c: &TheoryConstants, clip: f64) -> f64 {
    let v = c.rho1_sq + c.zeta1_sq + 1.0;
    let first = (2.0 * clip / (3.0 * c.l_bar * v * c.b * c.gamma1)).sqrt();
    let second = 2.0 / (3.0 * c.l_bar * v * c.gamma2);
    first.min(second)
}

/// Per-iteration descent margin for the fixed mechanism: the quantity the
/// step-size condition keeps positive,
/// min(α, C/B) − (3/2)·L̄·α²·(ρ₁²+ζ₁²+1).
pub fn descent_margin_fixed(c: &TheoryConstants, clip: f64, alpha: f64) -> f64 {
    alpha.min(clip / c.b) - 1.5 * c.l_bar * alpha * alpha * (c.rho1_sq + c.zeta1_sq + 1.0)
}

/// The fixed-mechanism stationarity bound, decomposed.
#[derive(Clone, Debug)]
pub struct FixedBound {
    /// Full right side: sum of the three terms.
    pub value: f64,
    /// (optimality gap, clipping+noise, gradient variance).
    pub terms: [f64; 3],
    pub omega: f64,
    pub alpha_limit: f64,
    /// Whether the step size satisfies the admissibility condition.
    pub admissible: bool,
    /// C > αB: the threshold can never fire, recovering unclipped averaging.
    pub unclipped_regime: bool,
}

/// Evaluate the fixed-mechanism bound at threshold `clip`, normalized noise
/// scale `sigma0` (noise std = sigma0·C), step size `alpha`, and last
/// iteration index `t_max` (so the run has `t_max+1` iterates).
pub fn bound_fixed(
    c: &TheoryConstants,
    clip: f64,
    sigma0: f64,
    alpha: f64,
    t_max: usize,
) -> Result<FixedBound> {
    if c.f0 < c.f_star {
        return Err(Error::Contract(format!(
            "initial loss {} below the optimum proxy {}",
            c.f0, c.f_star
        )));
    }
    let omega = omega_fixed(clip, c.b, alpha, c.gamma1, c.gamma2)?;
    let iterations = (t_max + 1) as f64;
    let t1 = (c.f0 - c.f_star) / (omega * iterations);
    let t2 = c.l_bar * clip * clip * (1.0 + sigma0 * sigma0) / (2.0 * omega);
    let t3 = 3.0 * c.l_bar * (c.rho0_sq + c.zeta0_sq) * alpha * alpha / (2.0 * omega);
    let alpha_limit = alpha_limit_fixed(c, clip);
    Ok(FixedBound {
        value: t1 + t2 + t3,
        terms: [t1, t2, t3],
        omega,
        alpha_limit,
        admissible: alpha < alpha_limit,
        unclipped_regime: clip > alpha * c.b,
    })
}

// ---- adaptive-mechanism bound -------------------------------------------------

/// Descent weight for the adaptive mechanism: ω = (1−p)^m (1−1/Γ).
pub fn omega_adaptive(p: f64, m: usize, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!("clip frequency must be in [0, 1), got {p}")));
    }
    if gamma <= 1.0 {
        return Err(Error::Contract(format!("slack parameter must exceed 1, got {gamma}")));
    }
    Ok((1.0 - p).powi(m as i32) * (1.0 - 1.0 / gamma))
}

/// Largest admissible constant step size for the adaptive mechanism, where
/// the noise-proportional variance is σ₁² = 2·z_Δ²·β²·γ².
pub fn alpha_limit_adaptive(
    c: &TheoryConstants,
    m: usize,
    beta: f64,
    gamma_q: f64,
    z_delta: f64,
) -> f64 {
    let sigma1_sq = 2.0 * z_delta * z_delta * beta * beta * gamma_q * gamma_q;
    let v = c.rho1_sq + c.zeta1_sq + 1.0;
    2.0 * (1.0 - c.p).powi(m as i32) / (3.0 * c.l_bar * v * c.gamma2) / (1.0 + sigma1_sq)
}

/// Per-iteration descent margin for the adaptive mechanism:
/// α(1−p)^m − (3/2)·L̄·α²·(1+σ₁²)·(ρ₁²+ζ₁²+1).
pub fn descent_margin_adaptive(
    c: &TheoryConstants,
    m: usize,
    beta: f64,
    gamma_q: f64,
    z_delta: f64,
    alpha: f64,
) -> f64 {
    let sigma1_sq = 2.0 * z_delta * z_delta * beta * beta * gamma_q * gamma_q;
    alpha * (1.0 - c.p).powi(m as i32)
        - 1.5 * c.l_bar * alpha * alpha * (1.0 + sigma1_sq) * (c.rho1_sq + c.zeta1_sq + 1.0)
}

/// The adaptive-mechanism stationarity bound, decomposed.
#[derive(Clone, Debug)]
pub struct AdaptiveBound {
    pub value: f64,
    /// (optimality gap, threshold-trajectory + noise, gradient variance).
    pub terms: [f64; 3],
    pub omega: f64,
    pub alpha_limit: f64,
    pub admissible: bool,
}

/// Evaluate the adaptive-mechanism bound for moving-average rate `beta`,
/// norm-quantile target `gamma_q`, noise multiplier `z_delta`, initial
/// threshold `c0`, step size `alpha`, and last iteration index `t_max`.
#[allow(clippy::too_many_arguments)]
pub fn bound_adaptive(
    c: &TheoryConstants,
    m: usize,
    beta: f64,
    gamma_q: f64,
    z_delta: f64,
    c0: f64,
    alpha: f64,
    t_max: usize,
) -> Result<AdaptiveBound> {
    if !(0.0 < beta && beta <= 1.0) {
        return Err(Error::Contract(format!("beta must be in (0, 1], got {beta}")));
    }
    for (name, v) in [("gamma", gamma_q), ("z_delta", z_delta), ("c0", c0), ("alpha", alpha)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Contract(format!("adaptive bound needs positive {name}, got {v}")));
        }
    }
    if c.f0 < c.f_star {
        return Err(Error::Contract(format!(
            "initial loss {} below the optimum proxy {}",
            c.f0, c.f_star
        )));
    }
    let omega = omega_adaptive(c.p, m, c.gamma2)?;
    let iterations = (t_max + 1) as f64;
    let t1 = (c.f0 - c.f_star) / (omega * alpha * iterations);
    let noise_factor = 1.0 + z_delta * z_delta * (1.0 - beta) * (1.0 - beta);
    let decay = 1.0 - (1.0 - beta) * (1.0 - beta);
    let bracket = c0 * c0 / (decay * alpha * iterations)
        + 2.0 * gamma_q * c.b * c0 / (beta * iterations)
        + gamma_q * gamma_q * c.b * c.b * alpha;
    let t2 = c.l_bar / (2.0 * omega) * noise_factor * bracket;
    let sigma1_sq = 2.0 * z_delta * z_delta * beta * beta * gamma_q * gamma_q;
    let t3 = 3.0 * c.l_bar / (2.0 * omega) * (c.rho0_sq + c.zeta0_sq) * alpha * (1.0 + sigma1_sq);
    let alpha_limit = alpha_limit_adaptive(c, m, beta, gamma_q, z_delta);
    Ok(AdaptiveBound {
        value: t1 + t2 + t3,
        terms: [t1, t2, t3],
        omega,
        alpha_limit,
        admissible: alpha < alpha_limit,
    })
}

// ---- certificate checks -------------------------------------------------------

/// Outcome of checking a bound against its trace.
#[derive(Clone, Debug)]
pub struct TheoremReport {
    /// (1/(T+1)) Σ_t ‖∇F(θ^(t))‖², measured.
    pub measured: f64,
    pub bound: f64,
    pub admissible: bool,
    /// measured ≤ bound.
    pub holds: bool,
    /// Decomposition of the bound.
    pub terms: [f64; 3],
    pub omega: f64,
}

/// Compare the measured mean squared gradient norm against the bound that
/// matches the trace's mechanism.
pub fn verify_bound(trace: &GradientTrace, c: &TheoryConstants) -> Result<TheoremReport> {
    let measured = trace.measured_mean_grad_sq();
    let t_max = trace.t_max();
    match trace.dp.mode {
        DpMode::Fixed { c0, sigma0 } => {
            let b = bound_fixed(c, c0, sigma0, trace.alpha, t_max)?;
            Ok(TheoremReport {
                measured,
                bound: b.value,
                admissible: b.admissible,
                holds: measured <= b.value,
                terms: b.terms,
                omega: b.omega,
            })
        }
        DpMode::Adaptive { c0, beta, gamma, z } => {
            let state = init_dp(&trace.dp, trace.m)?;
            let _ = z;
            let b = bound_adaptive(c, trace.m, beta, gamma, state.z_delta, c0, trace.alpha, t_max)?;
            Ok(TheoremReport {
                measured,
                bound: b.value,
                admissible: b.admissible,
                holds: measured <= b.value,
                terms: b.terms,
                omega: b.omega,
            })
        }
        DpMode::Off => Err(Error::Contract(
            "the trace ran without a privacy mechanism; there is no bound to certify".into(),
        )),
    }
}

/// Threshold-trajectory check, first form: every recorded threshold obeys
/// C_i^(t) ≤ (1−β)^t C⁰ + γ·B·α (with the estimated B).
pub fn check_threshold_decay(trace: &GradientTrace, c: &TheoryConstants) -> Result<Vec<String>> {
    let DpMode::Adaptive { c0, beta, gamma, .. } = trace.dp.mode else {
        return Err(Error::Contract("threshold checks apply to the adaptive mechanism".into()));
    };
    let mut bad = Vec::new();
    for (t, p) in trace.points.iter().enumerate() {
        let envelope = (1.0 - beta).powi(t as i32) * c0 + gamma * c.b * trace.alpha;
        for (i, &thr) in p.clip_thresholds.iter().enumerate() {
            if thr > envelope + 1e-9 {
                bad.push(format!(
                    "iterate {t} client {i}: threshold {thr} above envelope {envelope}"
                ));
            }
        }
    }
    Ok(bad)
}

/// Threshold-trajectory check, summed form: the accumulated mean squared
/// threshold is covered by its closed-form budget,
/// Σ_t mean_i (C_i^(t))² ≤ C⁰²/(1−(1−β)²) + 2γBαC⁰/β + γ²B²α²(T+1).
pub fn check_threshold_energy(trace: &GradientTrace, c: &TheoryConstants) -> Result<(f64, f64, bool)> {
    let DpMode::Adaptive { c0, beta, gamma, .. } = trace.dp.mode else {
        return Err(Error::Contract("threshold checks apply to the adaptive mechanism".into()));
    };
    let lhs: f64 = trace
        .points
        .iter()
        .map(|p| {
            p.clip_thresholds.iter().map(|t| t * t).sum::<f64>() / trace.m as f64
        })
        .sum();
    let iterations = trace.points.len() as f64;
    let gb = gamma * c.b;
    let rhs = c0 * c0 / (1.0 - (1.0 - beta) * (1.0 - beta))
        + 2.0 * gb * trace.alpha * c0 / beta
        + gb * gb * trace.alpha * trace.alpha * iterations;
    Ok((lhs, rhs, lhs <= rhs + 1e-9))
}

/// Render the whole certification as a plain-text report.
pub fn render_report(
    trace: &GradientTrace,
    c: &TheoryConstants,
    report: &TheoremReport,
) -> String {
    let mechanism = match trace.dp.mode {
        DpMode::Off => "none".to_string(),
        DpMode::Fixed { c0, sigma0 } => format!("fixed (C = {c0}, sigma0 = {sigma0})"),
        DpMode::Adaptive { c0, beta, gamma, z } => {
            format!("adaptive (C0 = {c0}, beta = {beta}, gamma = {gamma}, z = {z})")
        }
    };
    let mut out = String::new();
    out.push_str(&format!(
        "iterates           : {} (t = 0..={})\nclients            : {}\nstep size          : {}\nmechanism          : {}\n",
        trace.points.len(),
        trace.t_max(),
        trace.m,
        trace.alpha,
        mechanism
    ));
    out.push_str(&format!(
        "constants          : L = {:.6}  B = {:.6}  p = {:.4}\n                     rho0^2 = {:.6e}  rho1^2 = {:.6e}\n                     zeta0^2 = {:.6e}  zeta1^2 = {:.6e}\n                     F(theta0) = {:.6}  F_best = {:.6}\n",
        c.l_bar, c.b, c.p, c.rho0_sq, c.rho1_sq, c.zeta0_sq, c.zeta1_sq, c.f0, c.f_star
    ));
    let limit = match trace.dp.mode {
        DpMode::Fixed { c0, .. } => alpha_limit_fixed(c, c0),
        DpMode::Adaptive { beta, gamma, .. } => match init_dp(&trace.dp, trace.m) {
            Ok(state) => alpha_limit_adaptive(c, trace.m, beta, gamma, state.z_delta),
            Err(_) => f64::NAN,
        },
        DpMode::Off => f64::NAN,
    };
    out.push_str(&format!(
        "step-size check    : alpha = {} vs limit {:.6e} -> {}\n",
        trace.alpha,
        limit,
        if report.admissible { "admissible" } else { "NOT admissible" }
    ));
    out.push_str(&format!(
        "descent weight     : omega = {:.6e}\nmeasured           : mean ||grad||^2 = {:.6e}\nbound              : {:.6e}  (gap {:.3e} + privacy {:.3e} + variance {:.3e})\nverdict            : {}\n",
        report.omega,
        report.measured,
        report.bound,
        report.terms[0],
        report.terms[1],
        report.terms[2],
        if report.holds {
            "PASS — measured mean squared gradient within the bound"
        } else {
            "FAIL — bound violated"
        }
    ));
    let scan = certify_constants(trace, c);
    out.push_str(&format!(
        "assumption re-scan : {}\n",
        if scan.is_empty() { "clean".to_string() } else { format!("{} violations", scan.len()) }
    ));
    if matches!(trace.dp.mode, DpMode::Adaptive { .. }) {
        if let Ok(decay) = check_threshold_decay(trace, c) {
            out.push_str(&format!(
                "threshold decay    : {}\n",
                if decay.is_empty() { "within envelope".to_string() } else { format!("{} violations", decay.len()) }
            ));
        }
        if let Ok((lhs, rhs, ok)) = check_threshold_energy(trace, c) {
            out.push_str(&format!(
                "threshold energy   : {:.6e} <= {:.6e} -> {}\n",
                lhs,
                rhs,
                if ok { "holds" } else { "VIOLATED" }
            ));
        }
    }
    out
}

// ---- trace file ---------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_slice(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        put_f64(out, v);
    }
}

/// Serialize a trace (little-endian, fixed field order).
pub fn trace_to_bytes(trace: &GradientTrace) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TRACE_MAGIC);
    out.push(TRACE_VERSION);
    put_u32(&mut out, trace.m as u32);
    put_u32(&mut out, trace.batch_size as u32);
    put_u32(&mut out, trace.probes as u32);
    put_f64(&mut out, trace.alpha);
    // mechanism block
    let (mode, a, b, g, z) = match trace.dp.mode {
        DpMode::Off => (0u8, 0.0, 0.0, 0.0, 0.0),
        DpMode::Fixed { c0, sigma0 } => (1, c0, sigma0, 0.0, 0.0),
        DpMode::Adaptive { c0, beta, gamma, z } => (2, c0, beta, gamma, z),
    };
    out.push(mode);
    put_f64(&mut out, a);
    put_f64(&mut out, b);
    put_f64(&mut out, g);
    put_f64(&mut out, z);
    put_u32(&mut out, trace.dp.warmup_rounds as u32);
    out.push(u8::from(trace.dp.per_iteration));
    let dim = trace.final_theta.len();
    put_u32(&mut out, trace.points.len() as u32);
    put_u32(&mut out, dim as u32);
    for p in &trace.points {
        put_u32(&mut out, p.round as u32);
        put_f64(&mut out, p.full_loss);
        put_slice(&mut out, &p.theta);
        put_slice(&mut out, &p.global_grad);
        for gi in &p.client_grads {
            put_slice(&mut out, gi);
        }
        for devs in &p.probe_sq_dev {
            put_slice(&mut out, devs);
        }
        for norms in &p.stoch_norms {
            put_slice(&mut out, norms);
        }
        put_slice(&mut out, &p.clip_thresholds);
        for &c in &p.clipped {
            out.push(u8::from(c));
        }
        put_slice(&mut out, &p.update_norms);
    }
    put_slice(&mut out, &trace.final_theta);
    put_f64(&mut out, trace.f_final);
    put_f64(&mut out, trace.f_star);
    out
}

struct TraceReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> TraceReader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "trace truncated at byte {}: need {} more bytes",
                self.at,
                self.at + n - self.bytes.len()
            )));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.bytes[self.at];
        self.at += 1;
        Ok(v)
    }
    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
        self.at += 4;
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        self.need(8)?;
        let v = f64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        Ok(v)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Parse a trace file image; inverse of [`trace_to_bytes`].
pub fn trace_from_bytes(bytes: &[u8]) -> Result<GradientTrace> {
    let mut r = TraceReader { bytes, at: 0 };
    r.need(5)?;
    if bytes[0..4] != TRACE_MAGIC {
        return Err(Error::Format(format!("bad trace magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported trace version {}", bytes[4])));
    }
    r.at = 5;
    let m = r.u32()? as usize;
    let batch_size = r.u32()? as usize;
    let probes = r.u32()? as usize;
    let alpha = r.f64()?;
    let mode = r.u8()?;
    let (a, b, g, z) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let dp_mode = match mode {
        0 => DpMode::Off,
        1 => DpMode::Fixed { c0: a, sigma0: b },
        2 => DpMode::Adaptive { c0: a, beta: b, gamma: g, z },
        other => return Err(Error::Format(format!("unknown mechanism tag {other}"))),
    };
    let warmup_rounds = r.u32()? as usize;
    let per_iteration = r.u8()? != 0;
    let n_points = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if m == 0 || dim == 0 {
        return Err(Error::Format("trace has zero clients or parameters".into()));
    }
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let round = r.u32()? as usize;
        let full_loss = r.f64()?;
        let theta = r.f64s(dim)?;
        let global_grad = r.f64s(dim)?;
        let client_grads: Vec<Vec<f64>> = (0..m).map(|_| r.f64s(dim)).collect::<Result<_>>()?;
        let probe_sq_dev: Vec<Vec<f64>> = (0..m).map(|_| r.f64s(probes)).collect::<Result<_>>()?;
        let stoch_norms: Vec<Vec<f64>> =
            (0..m).map(|_| r.f64s(probes + 1)).collect::<Result<_>>()?;
        let clip_thresholds = r.f64s(m)?;
        let clipped: Vec<bool> = (0..m).map(|_| r.u8().map(|v| v != 0)).collect::<Result<_>>()?;
        let update_norms = r.f64s(m)?;
        points.push(TracePoint {
            round,
            full_loss,
            theta,
            global_grad,
            client_grads,
            probe_sq_dev,
            stoch_norms,
            clip_thresholds,
            clipped,
            update_norms,
        });
    }
    let final_theta = r.f64s(dim)?;
    let f_final = r.f64()?;
    let f_star = r.f64()?;
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "trace has {} trailing bytes after byte {}",
            bytes.len() - r.at,
            r.at
        )));
    }
    Ok(GradientTrace {
        m,
        alpha,
        batch_size,
        probes,
        dp: DpConfig { mode: dp_mode, warmup_rounds, per_iteration },
        points,
        final_theta,
        f_final,
        f_star,
    })
}

pub fn save_trace(path: &Path, trace: &GradientTrace) -> Result<()> {
    std::fs::write(path, trace_to_bytes(trace))?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<GradientTrace> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    trace_from_bytes(&bytes)
}

/// Quick sanity gate for instrumented configurations (used by the CLI before
/// paying for a run).
pub fn instrument_preflight(cfg: &RunConfig) -> Result<()> {
    if cfg.encoder == EncoderChoice::Precomputed && cfg.mode == crate::params::TrainMode::AdapterAndClassifier {
        return Err(Error::Config("precomputed states cannot train an adapter".into()));
    }
    if cfg.dp_config().warmup_rounds != 0 {
        return Err(Error::Config("set dp.warmup_rounds = 0 for instrumented runs".into()));
    }
    Ok(())
}
