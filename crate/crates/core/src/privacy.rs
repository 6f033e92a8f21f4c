//! Local privacy operations applied to every outgoing update.
//!
//! The full pipeline is, in order:
//!
//! 1. L2 clipping to `clip`
//! 2. Laplace perturbation with per-coordinate scale `Δf / ε`
//! 3. randomized-score top-k subsampling, `k = max(1, ⌊γ·d⌋)`
//! 4. periodic stochastic sign reset every `t` rounds
//!
//! All randomness comes from the caller's RNG, so a fixed seed reproduces the
//! output bit for bit.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, GradientVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameter `{key}`: {message}")]
    InvalidParam { key: &'static str, message: String },
    #[error("subsampling needs a non-empty gradient")]
    EmptyGradient,
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

fn invalid(key: &'static str, message: impl Into<String>) -> PrivacyError {
    PrivacyError::InvalidParam { key, message: message.into() }
}

/// How the sign-reset stage assigns new signs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignResetMode {
    /// Every nonzero coordinate draws its sign independently; positive and
    /// negative counts are preserved in expectation.
    #[default]
    Independent,
    /// A uniformly random arrangement of exactly `pos` positive and `neg`
    /// negative signs over the nonzero coordinates.
    ExactCounts,
}

/// Every knob of the privacy pipeline and of momentum compensation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Per-round LDP budget ε. `f64::INFINITY` disables the noise.
    pub epsilon: f64,
    /// Overrides the sensitivity Δf, which otherwise is `2·clip`.
    pub sensitivity_override: Option<f64>,
    /// Relaxation probability δ. Validated, never consumed by the Laplace
    /// mechanism (which is pure ε-DP).
    pub delta: f64,
    /// Subsample ratio γ ∈ (0, 1].
    pub gamma: f64,
    /// Sign-reset interval in rounds; 0 disables sign reset.
    pub t: u32,
    /// L2 clip bound applied before perturbation.
    pub clip: f64,
    /// Momentum coefficient β ∈ [0, 1] used by compensation.
    pub beta: f64,
    pub sign_reset_mode: SignResetMode,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            sensitivity_override: None,
            delta: 0.0,
            gamma: 0.07,
            t: 100,
            clip: 1.0,
            beta: 0.9,
            sign_reset_mode: SignResetMode::Independent,
        }
    }
}

impl PrivacyParams {
    pub fn sensitivity(&self) -> f64 {
        self.sensitivity_override.unwrap_or(2.0 * self.clip)
    }

    /// Per-coordinate Laplace scale `b = Δf / ε`.
    pub fn laplace_scale(&self) -> f64 {
        self.sensitivity() / self.epsilon
    }

    /// Checks every dimension-independent constraint.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon", format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if let Some(s) = self.sensitivity_override {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("sensitivity", format!("sensitivity must be positive and finite, got {s}")));
            }
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(invalid("delta", format!("delta ∈ [0,1) required, got {}", self.delta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("gamma ∈ (0,1] required, got {}", self.gamma)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(invalid("clip", format!("clip must be positive and finite, got {}", self.clip)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("beta", format!("beta ∈ [0,1] required, got {}", self.beta)));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus `δ < 1/(10·d)` for gradient length `d`.
    pub fn validate_for_dim(&self, d: usize) -> Result<()> {
        self.validate()?;
        let bound = 1.0 / (10.0 * d.max(1) as f64);
        if self.delta >= bound {
            return Err(invalid(
                "delta",
                format!("delta must satisfy delta < 1/(10·d) = {bound:e} for d = {d}, got {}", self.delta),
            ));
        }
        Ok(())
    }
}

/// Per-call statistics of one pipeline application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineTrace {
    pub round: u64,
    /// L2 norm of the input before clipping.
    pub pre_norm: f64,
    /// L2 norm after Laplace perturbation.
    pub post_p1_norm: f64,
    pub kept_k: usize,
    pub signs_flipped: usize,
}

/// Which stages after clipping are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub laplace: bool,
    pub subsample: bool,
    pub sign_reset: bool,
}

impl Stages {
    pub const ALL: Stages = Stages { laplace: true, subsample: true, sign_reset: true };
    /// Laplace + subsample without sign reset.
    pub const LDP_SUBSAMPLE: Stages = Stages { laplace: true, subsample: true, sign_reset: false };
}

/// Scales below this count as "no noise".
const NEGLIGIBLE_SCALE: f64 = 1e-300;

/// One draw from Laplace(0, `scale`) by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    loop {
        let u = rng.gen::<f64>() - 0.5;
        // u = -0.5 would give ln(0)
        if u > -0.5 {
            return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Adds i.i.d. Laplace(0, Δf/ε) noise to every coordinate.
pub fn laplace_perturb<R: Rng + ?Sized>(
    g: &GradientVector,
    params: &PrivacyParams,
    rng: &mut R,
) -> Result<GradientVector> {
    if !(params.epsilon > 0.0) {
        return Err(invalid("epsilon", format!("epsilon must be > 0, got {}", params.epsilon)));
    }
    let scale = params.laplace_scale();
    if !(scale >= NEGLIGIBLE_SCALE) {
        return Ok(g.clone());
    }
    let noisy = g.values().iter().map(|v| v + sample_laplace(scale, rng)).collect();
    Ok(GradientVector::new(noisy)?)
}

/// `max(1, ⌊γ·d⌋)`.
///
/// The product gets a tiny upward nudge so decimal ratios such as γ = 0.29,
/// d = 100 floor to 29 rather than 28.
pub fn subsample_size(d: usize, gamma: f64) -> usize {
    let k = (gamma * d as f64 * (1.0 + 1e-12)).floor() as usize;
    k.clamp(1, d.max(1))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid("gamma", format!("gamma ∈ (0,1] required, got {gamma}")));
    }
    Ok(())
}

/// Randomized-score top-k subsampling.
///
/// Each coordinate gets a score `θᵢ·gᵢ²` with `θᵢ ~ U[0, γ)`; the `k` best
/// scores keep their value bit for bit, every other coordinate becomes 0.
/// Score ties fall to the coordinate that comes first in a seeded random
/// permutation.
pub fn pas_subsample<R: Rng + ?Sized>(g: &GradientVector, gamma: f64, rng: &mut R) -> Result<GradientVector> {
    check_gamma(gamma)?;
    let d = g.dim();
    if d == 0 {
        return Err(PrivacyError::EmptyGradient);
    }
    let k = subsample_size(d, gamma);
    let values = g.values();
    let scores: Vec<f64> = values.iter().map(|v| rng.gen::<f64>() * gamma * v * v).collect();
    let mut tie_rank: Vec<usize> = (0..d).collect();
    tie_rank.shuffle(rng);

    let mut order: Vec<usize> = (0..d).collect();
    if k < d {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            scores[b].total_cmp(&scores[a]).then(tie_rank[a].cmp(&tie_rank[b]))
        });
    }
    let mut out = vec![0.0; d];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    Ok(GradientVector::new(out)?)
}

/// Stochastic sign reset with independent draws; see [`gsr_reset_with`].
pub fn gsr_reset<R: Rng + ?Sized>(
    g: &GradientVector,
    t: u32,
    round: u64,
    rng: &mut R,
) -> (GradientVector, usize) {
    gsr_reset_with(g, t, round, SignResetMode::Independent, rng)
}

/// Whether sign reset fires in `round` for interval `t` (never when `t == 0`).
pub fn gsr_fires(t: u32, round: u64) -> bool {
    t != 0 && round % u64::from(t) == 0
}

/// Re-signs every nonzero coordinate on firing rounds.
///
/// With `pos`/`neg` the counts of positive/negative coordinates, each nonzero
/// coordinate becomes `+|gᵢ|` with probability `pos/(pos+neg)` and `−|gᵢ|`
/// otherwise. Zeros stay zero and magnitudes are untouched. Returns the new
/// vector and how many coordinates changed sign.
pub fn gsr_reset_with<R: Rng + ?Sized>(
    g: &GradientVector,
    t: u32,
    round: u64,
    mode: SignResetMode,
    rng: &mut R,
) -> (GradientVector, usize) {
    if !gsr_fires(t, round) {
        return (g.clone(), 0);
    }
    let values = g.values();
    let pos = values.iter().filter(|v| **v > 0.0).count();
    let neg = values.iter().filter(|v| **v < 0.0).count();
    if pos + neg == 0 {
        debug!("sign reset skipped in round {round}: gradient has no nonzero entries");
        return (g.clone(), 0);
    }

    let mut out = values.to_vec();
    match mode {
        SignResetMode::Independent => {
            let p_pos = pos as f64 / (pos + neg) as f64;
            for v in out.iter_mut().filter(|v| **v != 0.0) {
                let magnitude = v.abs();
                *v = if rng.gen::<f64>() < p_pos { magnitude } else { -magnitude };
            }
        }
        SignResetMode::ExactCounts => {
            let mut signs: Vec<bool> = (0..pos + neg).map(|i| i < pos).collect();
            signs.shuffle(rng);
            for (v, positive) in out.iter_mut().filter(|v| **v != 0.0).zip(signs) {
                let magnitude = v.abs();
                *v = if positive { magnitude } else { -magnitude };
            }
        }
    }
    let flipped = values
        .iter()
        .zip(&out)
        .filter(|(a, b)| a.is_sign_positive() != b.is_sign_positive() && **a != 0.0)
        .count();
    (GradientVector::new(out).expect("sign changes keep entries finite"), flipped)
}

/// Clip, perturb, subsample, sign-reset: the full outgoing-update pipeline.
pub fn apply_pipeline<R: Rng + ?Sized>(
    g: &GradientVector,
    params: &PrivacyParams,
    round: u64,
    rng: &mut R,
) -> Result<(GradientVector, PipelineTrace)> {
    apply_stages(g, params, Stages::ALL, round, rng)
}

/// [`apply_pipeline`] with individual stages switched off. Clipping always runs.
pub fn apply_stages<R: Rng + ?Sized>(
    g: &GradientVector,
    params: &PrivacyParams,
    stages: Stages,
    round: u64,
    rng: &mut R,
) -> Result<(GradientVector, PipelineTrace)> {
    params.validate()?;
    let pre_norm = g.l2_norm();
    let clipped = g.clip_l2(params.clip)?;

    let perturbed = if stages.laplace { laplace_perturb(&clipped, params, rng)? } else { clipped };
    let post_p1_norm = perturbed.l2_norm();

    let (sampled, kept_k) = if stages.subsample && perturbed.dim() > 0 {
        let k = subsample_size(perturbed.dim(), params.gamma);
        (pas_subsample(&perturbed, params.gamma, rng)?, k)
    } else {
        let d = perturbed.dim();
        (perturbed, d)
    };

    let (out, signs_flipped) = if stages.sign_reset {
        gsr_reset_with(&sampled, params.t, round, params.sign_reset_mode, rng)
    } else {
        (sampled, 0)
    };

    Ok((out, PipelineTrace { round, pre_norm, post_p1_norm, kept_k, signs_flipped }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn gv(values: &[f64]) -> GradientVector {
        GradientVector::new(values.to_vec()).unwrap()
    }

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn noiseless() -> PrivacyParams {
        PrivacyParams { epsilon: f64::INFINITY, gamma: 1.0, t: 0, ..PrivacyParams::default() }
    }

    #[test]
    fn default_sensitivity_is_twice_clip() {
        let p = PrivacyParams { clip: 1.0, epsilon: 0.1, ..PrivacyParams::default() };
        assert_eq!(p.sensitivity(), 2.0);
        assert!((p.laplace_scale() - 20.0).abs() < 1e-12);
        let p = PrivacyParams { sensitivity_override: Some(1.0), ..p };
        assert!((p.laplace_scale() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn validation_messages_name_the_domain() {
        let bad = PrivacyParams { gamma: 0.0, ..PrivacyParams::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("gamma ∈ (0,1]"));
        let bad = PrivacyParams { beta: 1.5, ..PrivacyParams::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("beta ∈ [0,1]"));
        let bad = PrivacyParams { epsilon: 0.0, ..PrivacyParams::default() };
        assert!(bad.validate().is_err());
        let bad = PrivacyParams { delta: 1.0, ..PrivacyParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn delta_must_be_far_below_inverse_dimension() {
        let p = PrivacyParams { delta: 1e-4, ..PrivacyParams::default() };
        assert!(p.validate_for_dim(100).is_ok()); // bound 1e-3
        assert!(p.validate_for_dim(1000).is_err()); // bound 1e-4, not strict
        assert!(p.validate_for_dim(10_000).is_err());
    }

    #[test]
    fn laplace_with_vanishing_scale_is_identity() {
        let g = gv(&[0.5, -0.25, 0.0]);
        let out = laplace_perturb(&g, &noiseless(), &mut rng(1)).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn laplace_on_empty_vector() {
        let out = laplace_perturb(&GradientVector::zeros(0), &PrivacyParams::default(), &mut rng(1)).unwrap();
        assert_eq!(out.dim(), 0);
    }

    #[test]
    fn laplace_rejects_non_positive_epsilon() {
        let p = PrivacyParams { epsilon: -1.0, ..PrivacyParams::default() };
        assert!(laplace_perturb(&gv(&[1.0]), &p, &mut rng(1)).is_err());
    }

    #[test]
    fn laplace_is_seed_deterministic() {
        let g = gv(&[0.1; 16]);
        let p = PrivacyParams::default();
        let a = laplace_perturb(&g, &p, &mut rng(5)).unwrap();
        let b = laplace_perturb(&g, &p, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, laplace_perturb(&g, &p, &mut rng(6)).unwrap());
    }

    #[test]
    fn subsample_size_follows_floor_with_minimum_one() {
        assert_eq!(subsample_size(100, 0.07), 7);
        assert_eq!(subsample_size(1000, 0.07), 70);
        assert_eq!(subsample_size(100, 0.29), 29);
        assert_eq!(subsample_size(10, 0.01), 1);
        assert_eq!(subsample_size(7, 1.0), 7);
    }

    #[test]
    fn pas_full_ratio_is_identity() {
        let g = gv(&[0.3, -1.0, 0.0, 2.0]);
        assert_eq!(pas_subsample(&g, 1.0, &mut rng(3)).unwrap(), g);
    }

    #[test]
    fn pas_keeps_exactly_k_of_a_dense_vector() {
        let g = GradientVector::new((1..=100).map(|i| i as f64 * 0.01 - 0.505).collect()).unwrap();
        let out = pas_subsample(&g, 0.07, &mut rng(11)).unwrap();
        assert_eq!(out.nonzero_count(), 7);
    }

    #[test]
    fn pas_rejects_bad_inputs() {
        assert!(pas_subsample(&gv(&[1.0]), 0.0, &mut rng(1)).is_err());
        assert!(pas_subsample(&gv(&[1.0]), 1.5, &mut rng(1)).is_err());
        assert_eq!(pas_subsample(&GradientVector::zeros(0), 0.5, &mut rng(1)), Err(PrivacyError::EmptyGradient));
    }

    #[test]
    fn pas_heavy_coordinate_dominates() {
        // P(θ₀·100 < max(θ₁, θ₂)·0.01) ≈ 1e-4, so index 0 is nearly always kept.
        let g = gv(&[10.0, 0.1, 0.1]);
        let mut r = rng(9);
        let hits = (0..2000).filter(|_| pas_subsample(&g, 0.34, &mut r).unwrap().values()[0] != 0.0).count();
        assert!(hits >= 1990, "hits = {hits}");
    }

    #[test]
    fn gsr_unanimous_sign_is_identity() {
        let g = gv(&[0.5, 1.0, 0.0, 2.0]);
        let (out, flipped) = gsr_reset(&g, 1, 0, &mut rng(2));
        assert_eq!(out, g);
        assert_eq!(flipped, 0);
    }

    #[test]
    fn gsr_off_interval_and_disabled() {
        let g = gv(&[0.5, -1.0, 2.0]);
        assert_eq!(gsr_reset(&g, 100, 17, &mut rng(2)).0, g);
        assert_eq!(gsr_reset(&g, 0, 0, &mut rng(2)).0, g);
        assert!(gsr_fires(100, 0));
        assert!(gsr_fires(100, 200));
        assert!(!gsr_fires(0, 0));
    }

    #[test]
    fn gsr_all_zero_is_identity() {
        let g = GradientVector::zeros(5);
        assert_eq!(gsr_reset(&g, 1, 0, &mut rng(2)).0, g);
    }

    #[test]
    fn gsr_exact_counts_preserves_counts() {
        let g = gv(&[1.0, -2.0, 3.0, 0.0, -4.0, 5.0]);
        for seed in 0..50 {
            let (out, _) = gsr_reset_with(&g, 1, 0, SignResetMode::ExactCounts, &mut rng(seed));
            assert_eq!(out.values().iter().filter(|v| **v > 0.0).count(), 3);
            assert_eq!(out.values().iter().filter(|v| **v < 0.0).count(), 2);
            assert_eq!(out.values()[3], 0.0);
        }
    }

    #[test]
    fn pipeline_all_degenerate_is_clip() {
        let g = gv(&[3.0, 4.0, 0.0]);
        let (out, trace) = apply_pipeline(&g, &noiseless(), 17, &mut rng(4)).unwrap();
        assert_eq!(out, g.clip_l2(1.0).unwrap());
        assert_eq!(trace.kept_k, 3);
        assert_eq!(trace.pre_norm, 5.0);
    }

    #[test]
    fn pipeline_trace_reports_k() {
        let g = GradientVector::new(vec![0.01; 100]).unwrap();
        let (out, trace) = apply_pipeline(&g, &PrivacyParams::default(), 3, &mut rng(4)).unwrap();
        assert_eq!(trace.kept_k, 7);
        assert_eq!(out.nonzero_count(), 7);
        assert_eq!(trace.round, 3);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let g = GradientVector::new((0..200).map(|i| (i as f64).sin()).collect()).unwrap();
        let p = PrivacyParams { t: 1, ..PrivacyParams::default() };
        let a = apply_pipeline(&g, &p, 0, &mut rng(77)).unwrap();
        let b = apply_pipeline(&g, &p, 0, &mut rng(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pipeline_noise_precedes_subsampling() {
        // Kept coordinates must carry noise: with Δf/ε = 20 no kept value can
        // equal the clipped input, which it would if subsampling ran first on
        // the clean vector and noise were never applied to survivors.
        let g = GradientVector::new((0..500).map(|i| ((i % 7) as f64 - 3.0) * 0.01).collect()).unwrap();
        let p = PrivacyParams { t: 0, ..PrivacyParams::default() };
        let clipped = g.clip_l2(1.0).unwrap();
        let (out, _) = apply_pipeline(&g, &p, 1, &mut rng(8)).unwrap();
        let kept: Vec<usize> = (0..500).filter(|&i| out.values()[i] != 0.0).collect();
        assert_eq!(kept.len(), 35);
        assert!(kept.iter().all(|&i| out.values()[i] != clipped.values()[i]));
        // Noise-dominated scores: kept magnitudes far exceed the clipped scale.
        let mean_kept = kept.iter().map(|&i| out.values()[i].abs()).sum::<f64>() / kept.len() as f64;
        assert!(mean_kept > 1.0, "{mean_kept}");
    }

    proptest! {
        #[test]
        fn pas_support_and_fidelity(
            values in prop::collection::vec(-1.0f64..1.0, 1..200),
            gamma in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let g = GradientVector::new(values).unwrap();
            let out = pas_subsample(&g, gamma, &mut rng(seed)).unwrap();
            let k = subsample_size(g.dim(), gamma);
            prop_assert!(out.nonzero_count() <= k);
            for (o, i) in out.values().iter().zip(g.values()) {
                prop_assert!(*o == 0.0 || o.to_bits() == i.to_bits());
            }
            if g.nonzero_count() == g.dim() {
                prop_assert_eq!(out.nonzero_count(), k);
            }
        }

        #[test]
        fn gsr_preserves_magnitudes(
            values in prop::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 0..100),
            seed in any::<u64>(),
        ) {
            let g = GradientVector::new(values).unwrap();
            let (out, _) = gsr_reset(&g, 1, 0, &mut rng(seed));
            for (o, i) in out.values().iter().zip(g.values()) {
                prop_assert_eq!(o.abs().to_bits(), i.abs().to_bits());
                prop_assert_eq!(*o == 0.0, *i == 0.0);
            }
        }
    }
}
