//! Local differential privacy on model updates: norm clipping, calibrated
//! Gaussian noise, and the adaptive clip-threshold recurrence.
//!
//! A client update Δθ (flat vector over the trainable tensors) is released as
//!
//! ```text
//! θ_prev + min(1, C/‖Δθ‖)·Δθ + ε,   ε ~ N(0, (σ0² + σ1²·‖Δθ‖²)·I)
//! ```
//!
//! Fixed mode keeps C constant with σ0² = (noise scale · C)² and σ1² = 0.
//! Adaptive mode calibrates both variances from the target noise fraction z:
//! with σ_b = m/20 and z < 2σ_b,
//!
//! ```text
//! z_Δ  = (z⁻² − (2σ_b)⁻²)^(−1/2)
//! σ1²  = 2·z_Δ²·β²·γ²                      (constant for the run)
//! σ0²  = 2·z_Δ²·(1−β)²·C²                  (tracks the threshold)
//! C    ← (1−β)·C + β·γ·‖Δθ‖               (after each release)
//! ```
//!
//! Noise is sampled client-side from a seeded stream in flat-vector order, so
//! networked and in-process runs release identical bytes.

use crate::error::{Error, Result};
use crate::params::{l2_norm, ModelParams};
use crate::rng::SplitMix64;

/// Privacy mechanism selection with its per-mode parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DpMode {
    Off,
    /// Constant threshold `c0`; noise std per coordinate = `sigma0 · c0`.
    Fixed { c0: f64, sigma0: f64 },
    /// Threshold follows the recurrence above; `z` is the target noise
    /// fraction and must satisfy `z < m/10` (i.e. z < 2σ_b).
    Adaptive { c0: f64, beta: f64, gamma: f64, z: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    pub mode: DpMode,
    /// Rounds with index < warmup_rounds release updates without clipping or
    /// noise, bit-identical to the Off path; adaptation starts afterwards.
    pub warmup_rounds: usize,
    /// Apply the mechanism after every SGD step instead of once per round.
    pub per_iteration: bool,
}

impl DpConfig {
    pub fn off() -> Self {
        Self { mode: DpMode::Off, warmup_rounds: 0, per_iteration: false }
    }

    /// True when the mechanism actually fires at this round index.
    pub fn active_at(&self, round: usize) -> bool {
        !matches!(self.mode, DpMode::Off) && round >= self.warmup_rounds
    }
}

/// Evolving mechanism state (one per client).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpState {
    /// Current clip threshold C.
    pub c: f64,
    /// Constant-term noise variance σ0².
    pub sigma0_sq: f64,
    /// Norm-proportional noise variance σ1².
    pub sigma1_sq: f64,
    /// Calibration constant z_Δ (adaptive mode; 0 otherwise).
    pub z_delta: f64,
    /// Batch-sampling noise scale σ_b = m/20 (adaptive mode; 0 otherwise).
    pub sigma_b: f64,
}

/// Build the initial mechanism state for `m` participating clients.
pub fn init_dp(cfg: &DpConfig, m: usize) -> Result<DpState> {
    match cfg.mode {
        DpMode::Off => Ok(DpState {
            c: f64::INFINITY,
            sigma0_sq: 0.0,
            sigma1_sq: 0.0,
            z_delta: 0.0,
            sigma_b: 0.0,
        }),
        DpMode::Fixed { c0, sigma0 } => {
            if c0 <= 0.0 || !c0.is_finite() {
                return Err(Error::Config(format!("dp: c0 must be positive, got {c0}")));
            }
            if sigma0 < 0.0 || !sigma0.is_finite() {
                return Err(Error::Config(format!("dp: sigma0 must be nonnegative, got {sigma0}")));
            }
            Ok(DpState {
                c: c0,
                sigma0_sq: sigma0 * sigma0 * c0 * c0,
                sigma1_sq: 0.0,
                z_delta: 0.0,
                sigma_b: 0.0,
            })
        }
        DpMode::Adaptive { c0, beta, gamma, z } => {
            if m == 0 {
                return Err(Error::Config("dp: adaptive mode needs m >= 1".into()));
            }
            if c0 <= 0.0 || !c0.is_finite() {
                return Err(Error::Config(format!("dp: c0 must be positive, got {c0}")));
            }
            if !(0.0 < beta && beta <= 1.0) {
                return Err(Error::Config(format!("dp: beta must be in (0, 1], got {beta}")));
            }
            if gamma <= 0.0 || !gamma.is_finite() {
                return Err(Error::Config(format!("dp: gamma must be positive, got {gamma}")));
            }
            let sigma_b = m as f64 / 20.0;
            if !(z > 0.0 && z < 2.0 * sigma_b) {
                return Err(Error::Config(format!(
                    "dp: z must satisfy 0 < z < m/10 = {}, got {z}",
                    2.0 * sigma_b
                )));
            }
            let z_delta = (z.powi(-2) - (2.0 * sigma_b).powi(-2)).powf(-0.5);
            Ok(DpState {
                c: c0,
                sigma0_sq: 2.0 * z_delta * z_delta * (1.0 - beta) * (1.0 - beta) * c0 * c0,
                sigma1_sq: 2.0 * z_delta * z_delta * beta * beta * gamma * gamma,
                z_delta,
                sigma_b,
            })
        }
    }
}

/// Scale an update into the C-ball: returns Δ·min(1, C/‖Δ‖). The no-clip
/// case (and the zero vector) returns the input bitwise unchanged.
pub fn clip_update(delta: &[f64], c: f64) -> Vec<f64> {
    assert!(c > 0.0, "clip threshold must be positive");
    let norm = l2_norm(delta);
    if norm <= c || norm == 0.0 {
        return delta.to_vec();
    }
    let scale = c / norm;
    delta.iter().map(|v| v * scale).collect()
}

/// Per-coordinate Gaussian noise with variance σ0² + σ1²·‖Δ‖², drawn in flat
/// (declaration) order. A zero total variance yields the zero vector without
/// consuming from the stream.
pub fn sample_noise(
    len: usize,
    state: &DpState,
    delta_norm_sq: f64,
    rng: &mut SplitMix64,
) -> Vec<f64> {
    let var = state.sigma0_sq + state.sigma1_sq * delta_norm_sq;
    if var == 0.0 {
        return vec![0.0; len];
    }
    let std = var.sqrt();
    (0..len).map(|_| std * rng.next_gaussian()).collect()
}

/// One private release: θ_prev + clip(Δ) + ε. Rounds inside the warmup
/// window — and Off mode — return θ_prev + Δ exactly, consuming no noise.
pub fn dp_transform(
    prev: &ModelParams,
    delta: &[f64],
    cfg: &DpConfig,
    state: &DpState,
    round: usize,
    rng: &mut SplitMix64,
) -> Result<ModelParams> {
    if delta.len() != prev.trainable_len() {
        return Err(Error::DimensionMismatch(format!(
            "dp_transform: delta has {} coords, model has {}",
            delta.len(),
            prev.trainable_len()
        )));
    }
    let mut out = prev.clone();
    if !cfg.active_at(round) {
        out.add_delta(delta);
        return Ok(out);
    }
    let clipped = clip_update(delta, state.c);
    out.add_delta(&clipped);
    let norm = l2_norm(delta);
    let noise = sample_noise(delta.len(), state, norm * norm, rng);
    if noise.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dp noise"));
    }
    out.add_delta(&noise);
    Ok(out)
}

/// Advance the adaptive threshold after a release of norm `delta_norm`:
/// C ← (1−β)C + βγ‖Δ‖, with σ0² recalibrated to the new C. Errors when the
/// mode has no adaptive threshold.
pub fn adapt_threshold(state: &DpState, cfg: &DpConfig, delta_norm: f64) -> Result<DpState> {
    let DpMode::Adaptive { beta, gamma, .. } = cfg.mode else {
        return Err(Error::Contract(
            "adapt_threshold called outside adaptive mode".into(),
        ));
    };
    if !(delta_norm >= 0.0) {
        return Err(Error::Contract(format!("adapt_threshold: bad norm {delta_norm}")));
    }
    let c = (1.0 - beta) * state.c + beta * gamma * delta_norm;
    Ok(DpState {
        c,
        sigma0_sq: 2.0 * state.z_delta * state.z_delta * (1.0 - beta) * (1.0 - beta) * c * c,
        ..*state
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelShape, TrainMode};
    use proptest::prelude::*;

    fn adaptive_cfg(z: f64) -> DpConfig {
        DpConfig {
            mode: DpMode::Adaptive { c0: 1.0, beta: 0.1, gamma: 0.9, z },
            warmup_rounds: 0,
            per_iteration: false,
        }
    }

    #[test]
    fn z_delta_hand_calculation() {
        // m = 2 ⇒ σ_b = 0.1; z = 0.1 ⇒ z_Δ = (100 − 25)^(−1/2) = 75^(−1/2)
        let state = init_dp(&adaptive_cfg(0.1), 2).unwrap();
        assert!((state.sigma_b - 0.1).abs() < 1e-15);
        assert!((state.z_delta - 0.115470).abs() < 1e-6, "z_delta {}", state.z_delta);
        assert!((state.z_delta - 75.0f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn z_too_large_is_rejected() {
        // needs z < m/10; at m = 2 the cutoff is 0.2
        assert!(init_dp(&adaptive_cfg(0.2), 2).is_err());
        assert!(init_dp(&adaptive_cfg(0.25), 2).is_err());
        assert!(init_dp(&adaptive_cfg(0.19), 2).is_ok());
    }

    #[test]
    fn fixed_state_hand_values() {
        let cfg = DpConfig {
            mode: DpMode::Fixed { c0: 2.0, sigma0: 0.1 },
            warmup_rounds: 0,
            per_iteration: false,
        };
        let state = init_dp(&cfg, 3).unwrap();
        assert_eq!(state.c, 2.0);
        // σ0² = (0.1)²·(2.0)² = 0.04
        assert!((state.sigma0_sq - 0.04).abs() < 1e-15);
        assert_eq!(state.sigma1_sq, 0.0);
    }

    #[test]
    fn adaptive_sigma_hand_values() {
        let state = init_dp(&adaptive_cfg(0.1), 2).unwrap();
        let zd2 = 1.0 / 75.0;
        assert!((state.sigma1_sq - 2.0 * zd2 * 0.01 * 0.81).abs() < 1e-15);
        assert!((state.sigma0_sq - 2.0 * zd2 * 0.81 * 1.0).abs() < 1e-15);
    }

    #[test]
    fn clip_hand_case() {
        // ‖(3,4)‖ = 5 clipped at C = 2.5 halves the vector
        assert_eq!(clip_update(&[3.0, 4.0], 2.5), vec![1.5, 2.0]);
    }

    #[test]
    fn clip_noop_is_bitwise_identity() {
        let delta = vec![0.1, -0.2, 0.05];
        let out = clip_update(&delta, 10.0);
        for (a, b) in out.iter().zip(&delta) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let zero = clip_update(&[0.0, 0.0], 1.0);
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn adapt_threshold_hand_case() {
        let cfg = adaptive_cfg(0.1);
        let state = init_dp(&cfg, 2).unwrap();
        let next = adapt_threshold(&state, &cfg, 0.5).unwrap();
        // 0.9·1.0 + 0.1·0.9·0.5 = 0.945
        assert!((next.c - 0.945).abs() < 1e-15, "c {}", next.c);
        // σ0² recalibrated to the new threshold
        let expect = 2.0 * state.z_delta * state.z_delta * 0.81 * 0.945 * 0.945;
        assert!((next.sigma0_sq - expect).abs() < 1e-15);
        assert_eq!(next.sigma1_sq, state.sigma1_sq, "σ1² is constant for the run");
    }

    #[test]
    fn adapt_threshold_rejects_fixed_and_off() {
        let fixed = DpConfig {
            mode: DpMode::Fixed { c0: 1.0, sigma0: 0.1 },
            warmup_rounds: 0,
            per_iteration: false,
        };
        let state = init_dp(&fixed, 2).unwrap();
        assert!(adapt_threshold(&state, &fixed, 0.5).is_err());
        let off = DpConfig::off();
        let state = init_dp(&off, 2).unwrap();
        assert!(adapt_threshold(&state, &off, 0.5).is_err());
    }

    #[test]
    fn fixed_point_of_constant_norm_updates() {
        // constant ‖Δ‖ = d drives C to γ·d
        let cfg = adaptive_cfg(0.1);
        let mut state = init_dp(&cfg, 2).unwrap();
        let d = 0.4;
        for _ in 0..200 {
            state = adapt_threshold(&state, &cfg, d).unwrap();
        }
        assert!((state.c - 0.9 * d).abs() / (0.9 * d) < 0.01, "C {}", state.c);
    }

    fn test_model() -> ModelParams {
        ModelShape {
            d_emb: 2,
            d_hidden: 3,
            n_classes: 2,
            pre_classifier: false,
            dropout_rate: 0.0,
            mode: TrainMode::ClassifierOnly,
        }
        .init_model(3)
    }

    #[test]
    fn off_mode_is_exact_addition() {
        let model = test_model();
        let cfg = DpConfig::off();
        let state = init_dp(&cfg, 1).unwrap();
        let delta: Vec<f64> = (0..model.trainable_len()).map(|i| i as f64 * 0.25).collect();
        let mut rng = SplitMix64::new(1);
        let out = dp_transform(&model, &delta, &cfg, &state, 0, &mut rng).unwrap();
        let mut expect = model.clone();
        expect.add_delta(&delta);
        assert!(out.bitwise_eq(&expect));
    }

    #[test]
    fn warmup_rounds_match_off_path_bitwise() {
        let model = test_model();
        let cfg = DpConfig {
            mode: DpMode::Fixed { c0: 0.001, sigma0: 5.0 },
            warmup_rounds: 3,
            per_iteration: false,
        };
        let state = init_dp(&cfg, 2).unwrap();
        let delta = vec![1.0; model.trainable_len()];
        let mut rng = SplitMix64::new(7);
        let warm = dp_transform(&model, &delta, &cfg, &state, 2, &mut rng).unwrap();
        let mut off_rng = SplitMix64::new(7);
        let off = dp_transform(&model, &delta, &DpConfig::off(), &state, 2, &mut off_rng).unwrap();
        assert!(warm.bitwise_eq(&off));
        // …and the stream was not consumed during warmup
        assert_eq!(rng.next_u64(), off_rng.next_u64());
        // past the warmup window the mechanism fires
        let hot = dp_transform(&model, &delta, &cfg, &state, 3, &mut rng).unwrap();
        assert!(!hot.bitwise_eq(&off));
    }

    #[test]
    fn noise_statistics_match_calibration() {
        let state = DpState {
            c: 1.0,
            sigma0_sq: 1.0,
            sigma1_sq: 0.5,
            z_delta: 0.0,
            sigma_b: 0.0,
        };
        let mut rng = SplitMix64::new(20);
        let n = 200_000;
        // variance should be σ0² + σ1²·‖Δ‖² = 1 + 0.5·2 = 2
        let noise = sample_noise(n, &state, 2.0, &mut rng);
        let mean = noise.iter().sum::<f64>() / n as f64;
        let var = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se_mean = (2.0f64 / n as f64).sqrt();
        let se_var = 2.0 * (2.0f64 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 2.0).abs() < 4.0 * se_var, "var {var}");
    }

    #[test]
    fn zero_variance_noise_is_zero_and_free() {
        let state = DpState { c: 1.0, sigma0_sq: 0.0, sigma1_sq: 0.0, z_delta: 0.0, sigma_b: 0.0 };
        let mut rng = SplitMix64::new(4);
        let before = rng.clone().next_u64();
        let noise = sample_noise(10, &state, 5.0, &mut rng);
        assert!(noise.iter().all(|&v| v == 0.0));
        assert_eq!(rng.next_u64(), before, "stream untouched");
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let state = DpState { c: 1.0, sigma0_sq: 0.3, sigma1_sq: 0.0, z_delta: 0.0, sigma_b: 0.0 };
        let a = sample_noise(16, &state, 0.0, &mut SplitMix64::new(55));
        let b = sample_noise(16, &state, 0.0, &mut SplitMix64::new(55));
        assert_eq!(a, b);
    }

    proptest! {
        /// ‖clip(Δ, C)‖ = min(‖Δ‖, C) up to float rounding.
        #[test]
        fn clip_norm_law(
            delta in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in 0.01f64..20.0,
        ) {
            let clipped = clip_update(&delta, c);
            let want = l2_norm(&delta).min(c);
            let got = l2_norm(&clipped);
            prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
        }

        /// Clipping only rescales: clipped[i]·Δ[j] == clipped[j]·Δ[i].
        #[test]
        fn clip_preserves_direction(
            delta in proptest::collection::vec(-50.0f64..50.0, 2..20),
            c in 0.01f64..5.0,
        ) {
            let clipped = clip_update(&delta, c);
            for i in 0..delta.len() {
                for j in (i + 1)..delta.len() {
                    let lhs = clipped[i] * delta[j];
                    let rhs = clipped[j] * delta[i];
                    let scale = lhs.abs().max(rhs.abs()).max(1.0);
                    prop_assert!((lhs - rhs).abs() <= 1e-9 * scale);
                }
            }
        }
    }
}
