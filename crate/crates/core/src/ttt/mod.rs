//! Test-time training of the query vector.
//!
//! Each step draws `K` actions from one backbone forward. Their spread is the
//! confidence proxy: a step is used for adaptation only when its spread ranks
//! in the lowest `rho` fraction of a sliding window of recent spreads. The
//! prediction made at an accepted step is paired with the frame actually
//! observed `n` steps later, and every `B` such pairs drive one plain gradient
//! step on `q`.

mod episode;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::env::{Observation, Vec2};
use crate::error::{ConfigError, TttError};
use crate::model::{grad_q_img, ModelParams};

pub use episode::{run_episode, EpisodeResult, StepDecision};

/// Which steps feed the adaptation batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No adaptation.
    Base,
    /// Every step is collected.
    Indiscriminate,
    /// Collect when the action variance is at most the given absolute value.
    FixedThreshold(f64),
    /// Collect when the action variance ranks low within the recent window.
    Adaptive,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Base => "Base",
            Mode::Indiscriminate => "Indiscriminate",
            Mode::FixedThreshold(_) => "FixedThreshold",
            Mode::Adaptive => "Adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    /// Prediction gap in steps.
    pub gap: usize,
    pub batch_size: usize,
    /// Action samples per step.
    pub samples: usize,
    pub buffer_cap: usize,
    pub rho: f64,
    pub learning_rate: f64,
    pub mode: Mode,
    /// Start every episode from the checkpoint `q`. When false the harness
    /// carries the adapted `q` from one episode to the next.
    pub reset_q_per_episode: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            gap: 4,
            batch_size: 4,
            samples: 5,
            buffer_cap: 10,
            rho: 0.3,
            learning_rate: 1e-2,
            mode: Mode::Adaptive,
            reset_q_per_episode: true,
        }
    }
}

impl TttConfig {
    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.gap < 1 {
            return Err(ConfigError::invalid("ttt.gap", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(ConfigError::invalid("ttt.batch_size", "must be at least 1"));
        }
        if self.samples < 2 {
            return Err(ConfigError::invalid("ttt.samples", "must be at least 2"));
        }
        if self.buffer_cap < 1 {
            return Err(ConfigError::invalid("ttt.buffer_cap", "must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(ConfigError::invalid("ttt.rho", "must lie strictly inside (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::invalid("ttt.learning_rate", "must be positive"));
        }
        if let Mode::FixedThreshold(tau) = self.mode {
            if !tau.is_finite() {
                return Err(ConfigError::invalid("ttt.mode", "threshold must be finite"));
            }
        }
        Ok(())
    }
}

/// Sample mean and mean squared L2 deviation from it.
pub fn action_variance(samples: &[Vec2]) -> Result<(Vec2, f64), TttError> {
    if samples.is_empty() {
        return Err(TttError::NoSamples);
    }
    let k = samples.len() as f64;
    let mean = samples
        .iter()
        .fold([0.0, 0.0], |acc, s| [acc[0] + s[0], acc[1] + s[1]]);
    let mean = [mean[0] / k, mean[1] / k];
    let var = samples
        .iter()
        .map(|s| (s[0] - mean[0]).powi(2) + (s[1] - mean[1]).powi(2))
        .sum::<f64>()
        / k;
    Ok((mean, var))
}

/// Sliding FIFO window of recent action variances.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceBuffer {
    values: VecDeque<f64>,
    cap: usize,
}

impl VarianceBuffer {
    pub fn new(cap: usize) -> Self {
        Self {
            values: VecDeque::with_capacity(cap),
            cap,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn is_full(&self) -> bool {
        self.values.len() >= self.cap
    }

    /// Oldest first.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    /// Appends `v`, evicting the oldest value when at capacity.
    pub fn push(&mut self, v: f64) {
        if self.is_full() {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }
}

/// Rank used by the nearest-rank lower quantile: `ceil(rho * len)`, at least 1.
///
/// The product is nudged down by a few ulps so that e.g. `0.7 * 10`, which is
/// `7.000000000000001` in binary floating point, still maps to rank 7.
pub fn quantile_rank(rho: f64, len: usize) -> usize {
    let raw = rho * len as f64;
    let k = (raw - raw.abs() * 4.0 * f64::EPSILON).ceil() as usize;
    k.clamp(1, len.max(1))
}

/// `k`-th smallest buffered value with `k = ceil(rho * len)`.
pub fn buffer_quantile(buffer: &VarianceBuffer, rho: f64) -> Result<f64, TttError> {
    if buffer.is_empty() {
        return Err(TttError::EmptyBuffer);
    }
    let mut sorted: Vec<f64> = buffer.values().collect();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_rank(rho, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub warmup: bool,
    pub accepted: bool,
}

/// Feeds `sigma2` into the window and decides whether the step is kept.
///
/// While the window is filling the value is stored and the step is never
/// accepted. Once full, the oldest value is evicted, `sigma2` is appended,
/// and the step is accepted iff `sigma2` is at most the window quantile
/// (which includes `sigma2` itself).
pub fn filter_step(buffer: &mut VarianceBuffer, sigma2: f64, rho: f64) -> FilterDecision {
    if !buffer.is_full() {
        buffer.push(sigma2);
        return FilterDecision {
            warmup: true,
            accepted: false,
        };
    }
    buffer.push(sigma2);
    let threshold = buffer_quantile(buffer, rho).expect("full buffer is non-empty");
    FilterDecision {
        warmup: false,
        accepted: sigma2 <= threshold,
    }
}

/// A prediction waiting for the frame it forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingPair {
    pub created_at: usize,
    pub due_at: usize,
    pub obs_at_t: Observation,
    /// Prediction made when the step was accepted; kept for diagnostics, the
    /// update recomputes it under the current `q`.
    pub prediction_at_accept: Vec<f64>,
}

impl PendingPair {
    pub fn new(created_at: usize, gap: usize, obs_at_t: Observation, prediction: Vec<f64>) -> Self {
        Self {
            created_at,
            due_at: created_at + gap,
            obs_at_t,
            prediction_at_accept: prediction,
        }
    }
}

/// Matured (input, attained frame) pairs awaiting an update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TttBatch {
    pub inputs: Vec<Observation>,
    pub targets: Vec<Vec<f64>>,
}

impl TttBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: Observation, target: Vec<f64>) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.targets.clear();
    }
}

/// Removes every pending pair due at `t`, pairing it with `current_image`,
/// and returns them in creation order.
pub fn mature_pairs(
    pending: &mut Vec<PendingPair>,
    t: usize,
    current_image: &[f64],
) -> Vec<(Observation, Vec<f64>)> {
    let mut matured = Vec::new();
    pending.retain(|p| {
        if p.due_at == t {
            matured.push((p.created_at, p.obs_at_t.clone()));
            false
        } else {
            true
        }
    });
    matured.sort_by_key(|(created, _)| *created);
    matured
        .into_iter()
        .map(|(_, obs)| (obs, current_image.to_vec()))
        .collect()
}

/// One plain gradient step on `q` over a full batch.
pub fn ttt_update(
    params: &mut ModelParams,
    batch: &TttBatch,
    batch_size: usize,
    learning_rate: f64,
) -> Result<(), TttError> {
    if batch.len() != batch_size {
        return Err(TttError::PartialBatch {
            len: batch.len(),
            required: batch_size,
        });
    }
    let g = grad_q_img(params, &batch.inputs, &batch.targets)?;
    params.q.scaled_add(-learning_rate, &g);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, image_loss_batch, predict_image, ModelDims};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_examples() {
        assert_eq!(action_variance(&[[0.0, 0.0], [2.0, 0.0]]).unwrap(), ([1.0, 0.0], 1.0));
        assert_eq!(action_variance(&[[0.3, -0.1]; 5]).unwrap().1, 0.0);
        let four = [[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]];
        assert_eq!(action_variance(&four).unwrap(), ([1.0, 1.0], 2.0));
        assert_eq!(action_variance(&[]), Err(TttError::NoSamples));
    }

    fn buffer_of(values: &[f64]) -> VarianceBuffer {
        let mut b = VarianceBuffer::new(values.len().max(1));
        values.iter().for_each(|&v| b.push(v));
        b
    }

    #[test]
    fn quantile_examples() {
        let tenths: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(buffer_quantile(&buffer_of(&tenths), 0.3).unwrap(), 0.3);
        for rho in [0.01, 0.5, 0.99] {
            assert_eq!(buffer_quantile(&buffer_of(&[4.2]), rho).unwrap(), 4.2);
        }
        assert_eq!(buffer_quantile(&buffer_of(&[5.0, 1.0, 3.0]), 0.5).unwrap(), 3.0);
        assert_eq!(buffer_quantile(&VarianceBuffer::new(3), 0.5), Err(TttError::EmptyBuffer));
    }

    #[test]
    fn quantile_rank_tolerates_binary_rounding() {
        assert_eq!(quantile_rank(0.7, 10), 7);
        assert_eq!(quantile_rank(0.3, 10), 3);
        assert_eq!(quantile_rank(0.31, 10), 4);
        assert_eq!(quantile_rank(0.01, 10), 1);
        assert_eq!(quantile_rank(0.99, 10), 10);
    }

    #[test]
    fn warmup_appends_without_testing() {
        let mut b = VarianceBuffer::new(10);
        for i in 0..9 {
            b.push(i as f64);
        }
        let d = filter_step(&mut b, 0.0, 0.3);
        assert_eq!(d, FilterDecision { warmup: true, accepted: false });
        assert_eq!(b.len(), 10);
    }

    #[test]
    fn ties_are_accepted() {
        let mut b = buffer_of(&[1.0; 10]);
        let d = filter_step(&mut b, 1.0, 0.3);
        assert_eq!(d, FilterDecision { warmup: false, accepted: true });
    }

    #[test]
    fn eviction_is_oldest_first() {
        let mut b = VarianceBuffer::new(3);
        let mut oracle: Vec<f64> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v: f64 = rng.random();
            filter_step(&mut b, v, 0.3);
            oracle.push(v);
            if oracle.len() > 3 {
                oracle.remove(0);
            }
            assert_eq!(b.values().collect::<Vec<_>>(), oracle);
            assert!(b.len() <= b.capacity());
        }
    }

    #[test]
    fn steady_state_acceptance_matches_rank_fraction() {
        let mut b = VarianceBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mut seen, mut kept) = (0usize, 0usize);
        for _ in 0..10_000 {
            let d = filter_step(&mut b, rng.random::<f64>(), 0.3);
            if !d.warmup {
                seen += 1;
                kept += d.accepted as usize;
            }
        }
        let frac = kept as f64 / seen as f64;
        assert!((frac - 0.3).abs() <= 0.015, "{frac}");
    }

    proptest! {
        #[test]
        fn quantile_is_an_order_statistic(values in prop::collection::vec(0.0f64..10.0, 1..30), rho in 0.01f64..0.99) {
            let b = buffer_of(&values);
            let q = buffer_quantile(&b, rho).unwrap();
            let below = values.iter().filter(|&&v| v <= q).count();
            prop_assert!(values.contains(&q));
            prop_assert!(below >= quantile_rank(rho, values.len()));
        }

        #[test]
        fn buffer_never_exceeds_capacity(cap in 1usize..15, values in prop::collection::vec(0.0f64..1.0, 0..60)) {
            let mut b = VarianceBuffer::new(cap);
            for (i, v) in values.iter().enumerate() {
                let d = filter_step(&mut b, *v, 0.3);
                prop_assert!(b.len() <= cap);
                prop_assert_eq!(d.warmup, i < cap);
            }
        }
    }

    fn obs(seed: u64, dims: ModelDims) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Observation {
            image: (0..dims.obs).map(|_| rng.random()).collect(),
            instruction: (0..dims.instruction).map(|_| rng.random()).collect(),
        }
    }

    #[test]
    fn maturation_examples() {
        let d = ModelDims::default();
        let mut pending = Vec::new();
        assert!(mature_pairs(&mut pending, 5, &[0.0]).is_empty());

        pending.push(PendingPair::new(1, 4, obs(1, d), vec![]));
        pending.push(PendingPair::new(2, 4, obs(2, d), vec![]));
        let m = mature_pairs(&mut pending, 5, &[0.25]);
        assert_eq!(m.len(), 1);
        assert_eq!(pending.len(), 1);
        assert_eq!(m[0], (obs(1, d), vec![0.25]));
    }

    #[test]
    fn simultaneous_maturation_keeps_creation_order() {
        // Two accepted steps created out of order in the pending list but
        // due at the same time mature oldest first.
        let d = ModelDims::default();
        let mut pending = vec![
            PendingPair { due_at: 7, ..PendingPair::new(4, 3, obs(4, d), vec![]) },
            PendingPair::new(3, 4, obs(3, d), vec![]),
        ];
        let m = mature_pairs(&mut pending, 7, &[1.0]);
        assert_eq!(m.iter().map(|(o, _)| o.clone()).collect::<Vec<_>>(), vec![obs(3, d), obs(4, d)]);
        assert!(pending.is_empty());
    }

    fn random_params(seed: u64) -> ModelParams {
        let mut p = ModelParams::init(ModelDims::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        p.q.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p
    }

    fn batch_of(n: u64, dims: ModelDims) -> TttBatch {
        let mut b = TttBatch::default();
        for i in 0..n {
            let o = obs(100 + i, dims);
            b.push(o, obs(200 + i, dims).image);
        }
        b
    }

    #[test]
    fn update_with_matching_targets_keeps_q() {
        let p = random_params(5);
        let mut b = TttBatch::default();
        for i in 0..4 {
            let o = obs(i, p.dims);
            let pred = predict_image(&p, &forward(&p, &o), &o);
            b.push(o, pred);
        }
        let mut after = p.clone();
        ttt_update(&mut after, &b, 4, 0.5).unwrap();
        for (a, b) in after.q.iter().zip(p.q.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let p = random_params(6);
        let mut after = p.clone();
        ttt_update(&mut after, &batch_of(4, p.dims), 4, 0.0).unwrap();
        assert_eq!(after, p);
    }

    #[test]
    fn update_touches_only_q_and_descends() {
        let p = random_params(7);
        let b = batch_of(4, p.dims);
        let before = image_loss_batch(&p, &b.inputs, &b.targets).unwrap();
        let mut after = p.clone();
        ttt_update(&mut after, &b, 4, 1e-4).unwrap();
        assert!(after.frozen_fields_equal(&p));
        assert_ne!(after.q, p.q);
        let post = image_loss_batch(&after, &b.inputs, &b.targets).unwrap();
        assert!(post <= before, "{post} > {before}");
    }

    #[test]
    fn partial_batch_rejected() {
        let mut p = random_params(8);
        let b = batch_of(3, p.dims);
        let err = ttt_update(&mut p, &b, 4, 0.1).unwrap_err();
        assert_eq!(err, TttError::PartialBatch { len: 3, required: 4 });
    }

    #[test]
    fn config_validation() {
        assert!(TttConfig::default().validate().is_ok());
        let bad = [
            TttConfig { gap: 0, ..Default::default() },
            TttConfig { samples: 1, ..Default::default() },
            TttConfig { rho: 1.0, ..Default::default() },
            TttConfig { rho: 0.0, ..Default::default() },
            TttConfig { learning_rate: 0.0, ..Default::default() },
            TttConfig { buffer_cap: 0, ..Default::default() },
            TttConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn defaults_match_the_published_hyperparameters() {
        let c = TttConfig::default();
        assert_eq!((c.gap, c.batch_size, c.samples, c.buffer_cap), (4, 4, 5, 10));
        assert_eq!(c.rho, 0.3);
    }
}
