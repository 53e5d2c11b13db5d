//! Experiment harness: demonstration datasets, the two-setting evaluation
//! grid, the component ablation ladder and the timing comparison.

mod report;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, Dimension, EpisodeConfig, PerturbationSpec};
use crate::error::{ConfigError, HarnessError, TttError};
use crate::model::{pretrain, Checkpoint, EpochLog, ModelDims, ModelParams, PretrainConfig, TrainSample};
use crate::seeding::derive_seed;
use crate::ttt::{run_episode, EpisodeResult, Mode, TttConfig};

pub use report::{emit_ablation, emit_eval, emit_timing, eval_csv, render_timing_svg, timing_csv, ablation_csv};

mod tag {
    pub const DATA: u64 = 0x6461_7461;
    pub const EVAL: u64 = 0x6576_616c;
    pub const TAU: u64 = 0x7461_7500;
}

/// Which checkpoint family a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Trained on clean and mildly perturbed demonstrations.
    WithPerturbedTrain,
    /// Trained on clean demonstrations only.
    WithoutPerturbedTrain,
}

impl Setting {
    pub fn label(self) -> &'static str {
        match self {
            Setting::WithPerturbedTrain => "w/ Perturbed Train",
            Setting::WithoutPerturbedTrain => "w/o Perturbed Train",
        }
    }
}

/// Magnitude of the perturbed half of the `WithPerturbedTrain` data.
pub const TRAIN_PERTURBATION_MAGNITUDE: f64 = 0.5;

/// Perturbation applied to demonstration `index`.
fn demo_spec(setting: Setting, rng: &mut ChaCha8Rng) -> PerturbationSpec {
    match setting {
        Setting::WithoutPerturbedTrain => PerturbationSpec::CLEAN,
        Setting::WithPerturbedTrain => {
            if rng.random_bool(0.5) {
                PerturbationSpec::CLEAN
            } else {
                let d = Dimension::PERTURBED[rng.random_range(0..Dimension::PERTURBED.len())];
                PerturbationSpec::new(d, TRAIN_PERTURBATION_MAGNITUDE)
            }
        }
    }
}

/// Expert rollouts turned into `(o_t, l, a_t, o_{t+gap})` samples.
///
/// A rollout keeps going for `gap` steps after it first enters the success
/// radius (the expert holds on the goal), capped at `T`, so the approach
/// steps right before success still get a future frame. The final frame is
/// never a sample input: a rollout of `T` steps without success contributes
/// `t = 0..T-gap`, and one that succeeds at step `k < T - gap` contributes
/// `k` samples.
pub fn build_datasets(
    setting: Setting,
    env_cfg: &EpisodeConfig,
    gap: usize,
    num_demos: usize,
    seed: u64,
) -> Result<Vec<TrainSample>, HarnessError> {
    env_cfg.validate()?;
    if num_demos == 0 {
        return Err(ConfigError::invalid("data.num_demos", "must be at least 1").into());
    }
    if gap == 0 {
        return Err(ConfigError::invalid("ttt.gap", "must be at least 1").into());
    }
    // Termination is handled here so the expert can hold after success.
    let rollout_cfg = EpisodeConfig {
        success_radius: f64::MIN_POSITIVE,
        ..env_cfg.clone()
    };
    let mut out = Vec::new();
    for demo in 0..num_demos {
        let ep_seed = derive_seed(seed, &[tag::DATA, demo as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let spec = demo_spec(setting, &mut rng);
        let mut state = env::reset(env_cfg, &spec, ep_seed);
        let mut frames = vec![env::observe(&state, env_cfg, &spec, &mut rng)];
        let mut actions = Vec::new();
        let mut stop_at = env_cfg.max_steps;
        loop {
            let a = env::expert_action(&state, env_cfg);
            let outcome = env::step(&state, a, &rollout_cfg, &mut rng).expect("episode still running");
            actions.push(a);
            state = outcome.state;
            let dist = (state.agent_pos[0] - state.goal_pos[0])
                .hypot(state.agent_pos[1] - state.goal_pos[1]);
            if dist < env_cfg.success_radius && stop_at == env_cfg.max_steps {
                stop_at = (state.t + gap).min(env_cfg.max_steps);
            }
            if state.t >= stop_at {
                break;
            }
            frames.push(env::observe(&state, env_cfg, &spec, &mut rng));
        }
        for t in 0..frames.len().saturating_sub(gap) {
            out.push(TrainSample {
                obs: frames[t].clone(),
                expert: actions[t],
                future_image: frames[t + gap].image.clone(),
            });
        }
    }
    Ok(out)
}

/// Builds the setting's dataset and trains a checkpoint on it. The dataset
/// is drawn from `hyper.seed`.
pub fn pretrain_setting(
    setting: Setting,
    env_cfg: &EpisodeConfig,
    dims: ModelDims,
    gap: usize,
    num_demos: usize,
    hyper: &PretrainConfig,
) -> Result<(Checkpoint, Vec<EpochLog>), HarnessError> {
    let data = build_datasets(setting, env_cfg, gap, num_demos, hyper.seed)?;
    let (params, log) = pretrain(&data, dims, hyper)?;
    let mut ckpt = Checkpoint::new(params, hyper.seed);
    ckpt.pretrain = Some(hyper.clone());
    let setting_json = serde_json::to_value(setting).expect("enum serializes");
    ckpt.notes.insert("setting".into(), setting_json);
    ckpt.notes.insert("num_demos".into(), num_demos.into());
    ckpt.notes.insert("num_samples".into(), data.len().into());
    ckpt.notes.insert("gap".into(), gap.into());
    Ok((ckpt, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub setting: Setting,
    pub dimensions: Vec<PerturbationSpec>,
    pub episodes_per_dim: usize,
    pub modes: Vec<Mode>,
    pub base_seed: u64,
    /// Include one record per episode in the structured report.
    pub record_episodes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            setting: Setting::WithPerturbedTrain,
            dimensions: Dimension::PERTURBED
                .iter()
                .map(|&d| PerturbationSpec::new(d, 1.0))
                .collect(),
            episodes_per_dim: 500,
            modes: vec![Mode::Base, Mode::Adaptive],
            base_seed: 0,
            record_episodes: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.episodes_per_dim < 1 {
            return Err(ConfigError::invalid("eval.episodes_per_dim", "must be at least 1"));
        }
        if self.dimensions.is_empty() {
            return Err(ConfigError::invalid("eval.dimensions", "must not be empty"));
        }
        if self.modes.is_empty() {
            return Err(ConfigError::invalid("eval.modes", "must not be empty"));
        }
        for d in &self.dimensions {
            d.validate()?;
        }
        Ok(())
    }
}

/// Environment seed of episode `index` on `dimension`; shared by every mode.
pub fn episode_seed(base_seed: u64, dimension: Dimension, index: usize) -> u64 {
    derive_seed(base_seed, &[tag::EVAL, dimension as u64, index as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub mode: String,
    pub dimension: Dimension,
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub updates: usize,
    pub pairs_accepted: usize,
    pub final_q_delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: String,
    pub dimension: Dimension,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_updates: f64,
    pub mean_steps: f64,
    pub mean_pairs_accepted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAverage {
    pub mode: String,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionDelta {
    pub dimension: Dimension,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub env: EpisodeConfig,
    pub ttt: TttConfig,
    pub base_seed: u64,
    pub checkpoint_digest: Option<String>,
    /// Effective run configuration, when driven from the command line.
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub modes: Vec<String>,
    pub dimensions: Vec<Dimension>,
    pub episodes_per_dim: usize,
    pub cells: Vec<CellResult>,
    pub averages: Vec<ModeAverage>,
    /// Adaptive minus Base per dimension; present only when both ran.
    pub deltas: Option<Vec<DimensionDelta>>,
    pub average_delta: Option<f64>,
    pub metadata: ReportMetadata,
    pub episodes: Option<Vec<EpisodeRecord>>,
}

impl EvalReport {
    pub fn cell(&self, mode: &str, dimension: Dimension) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.dimension == dimension)
    }

    pub fn rate(&self, mode: &str, dimension: Dimension) -> Option<f64> {
        self.cell(mode, dimension).map(|c| c.success_rate)
    }

    pub fn average(&self, mode: &str) -> Option<f64> {
        self.averages.iter().find(|a| a.mode == mode).map(|a| a.average)
    }
}

/// Runs `episodes` paired episodes of one (mode, dimension) cell.
fn run_cell(
    params: &ModelParams,
    env_cfg: &EpisodeConfig,
    spec: &PerturbationSpec,
    cfg: &TttConfig,
    seeds: &[u64],
) -> Result<Vec<EpisodeResult>, TttError> {
    if cfg.reset_q_per_episode {
        seeds
            .par_iter()
            .map(|&s| run_episode(params, env_cfg, spec, cfg, s).map(|(r, _)| r))
            .collect()
    } else {
        // The adapted query carries over, so episodes must run in order.
        let mut carried = params.clone();
        let mut out = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let (r, p) = run_episode(&carried, env_cfg, spec, cfg, s)?;
            carried = p;
            out.push(r);
        }
        Ok(out)
    }
}

fn summarize(mode: &str, dimension: Dimension, results: &[EpisodeResult]) -> CellResult {
    let n = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    let mean = |f: &dyn Fn(&EpisodeResult) -> usize| {
        results.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64
    };
    CellResult {
        mode: mode.to_string(),
        dimension,
        episodes: n,
        successes,
        success_rate: successes as f64 / n as f64,
        mean_updates: mean(&|r| r.updates_performed),
        mean_steps: mean(&|r| r.steps_taken),
        mean_pairs_accepted: mean(&|r| r.pairs_accepted),
    }
}

pub fn evaluate(
    params: &ModelParams,
    env_cfg: &EpisodeConfig,
    eval_cfg: &EvalConfig,
    ttt_cfg: &TttConfig,
    checkpoint_digest: Option<String>,
) -> Result<EvalReport, HarnessError> {
    eval_cfg.validate()?;
    env_cfg.validate()?;
    ttt_cfg.validate()?;
    let mut cells = Vec::new();
    let mut records = Vec::new();
    for &mode in &eval_cfg.modes {
        let cfg = ttt_cfg.with_mode(mode);
        cfg.validate()?;
        for spec in &eval_cfg.dimensions {
            let seeds: Vec<u64> = (0..eval_cfg.episodes_per_dim)
                .map(|i| episode_seed(eval_cfg.base_seed, spec.dimension, i))
                .collect();
            let results = run_cell(params, env_cfg, spec, &cfg, &seeds)?;
            if eval_cfg.record_episodes {
                for (i, (r, &s)) in results.iter().zip(&seeds).enumerate() {
                    records.push(EpisodeRecord {
                        mode: mode.label().to_string(),
                        dimension: spec.dimension,
                        index: i,
                        seed: s,
                        success: r.success,
                        steps: r.steps_taken,
                        updates: r.updates_performed,
                        pairs_accepted: r.pairs_accepted,
                        final_q_delta_norm: r.final_q_delta_norm,
                    });
                }
            }
            cells.push(summarize(mode.label(), spec.dimension, &results));
        }
    }

    let modes: Vec<String> = eval_cfg.modes.iter().map(|m| m.label().to_string()).collect();
    let dimensions: Vec<Dimension> = eval_cfg.dimensions.iter().map(|d| d.dimension).collect();
    let averages = modes
        .iter()
        .map(|m| {
            let rates: Vec<f64> = cells
                .iter()
                .filter(|c| &c.mode == m)
                .map(|c| c.success_rate)
                .collect();
            ModeAverage {
                mode: m.clone(),
                average: rates.iter().sum::<f64>() / rates.len() as f64,
            }
        })
        .collect::<Vec<_>>();

    let has = |label: &str| modes.iter().any(|m| m == label);
    let (deltas, average_delta) = if has("Base") && has("Adaptive") {
        let rate = |m: &str, d: Dimension| {
            cells
                .iter()
                .find(|c| c.mode == m && c.dimension == d)
                .map(|c| c.success_rate)
                .expect("cell evaluated")
        };
        let deltas: Vec<DimensionDelta> = dimensions
            .iter()
            .map(|&d| DimensionDelta {
                dimension: d,
                delta: rate("Adaptive", d) - rate("Base", d),
            })
            .collect();
        let avg = |m: &str| averages.iter().find(|a| a.mode == m).expect("mode").average;
        let average_delta = avg("Adaptive") - avg("Base");
        (Some(deltas), Some(average_delta))
    } else {
        (None, None)
    };

    Ok(EvalReport {
        setting: eval_cfg.setting,
        modes,
        dimensions,
        episodes_per_dim: eval_cfg.episodes_per_dim,
        cells,
        averages,
        deltas,
        average_delta,
        metadata: ReportMetadata {
            env: env_cfg.clone(),
            ttt: ttt_cfg.clone(),
            base_seed: eval_cfg.base_seed,
            checkpoint_digest,
            run_config: None,
        },
        episodes: eval_cfg.record_episodes.then_some(records),
    })
}

/// Episodes used to derive the fixed ablation threshold.
pub const TAU_EPISODES: usize = 100;

/// Median action variance over every step of [`TAU_EPISODES`] clean
/// episodes run without adaptation.
pub fn fixed_threshold_tau(
    params: &ModelParams,
    env_cfg: &EpisodeConfig,
    ttt_cfg: &TttConfig,
    seed: u64,
) -> Result<f64, HarnessError> {
    let cfg = ttt_cfg.with_mode(Mode::Base);
    let seeds: Vec<u64> = (0..TAU_EPISODES)
        .map(|i| derive_seed(seed, &[tag::TAU, i as u64]))
        .collect();
    let results = run_cell(params, env_cfg, &PerturbationSpec::CLEAN, &cfg, &seeds)?;
    let mut all: Vec<f64> = results
        .iter()
        .flat_map(|r| r.decisions.iter().map(|d| d.sigma2))
        .collect();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    Ok(if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub ttt: bool,
    pub variance_filter: bool,
    pub adaptive_buffer: bool,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_updates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dimension: Dimension,
    pub tau: f64,
    pub rows: Vec<AblationRow>,
    pub metadata: ReportMetadata,
}

impl AblationReport {
    pub fn rate(&self, mode: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.success_rate)
    }
}

/// The four-rung component ladder on the Robot dimension.
pub fn ablate(
    params: &ModelParams,
    env_cfg: &EpisodeConfig,
    ttt_cfg: &TttConfig,
    episodes: usize,
    seed: u64,
    checkpoint_digest: Option<String>,
) -> Result<AblationReport, HarnessError> {
    let tau = fixed_threshold_tau(params, env_cfg, ttt_cfg, seed)?;
    let ladder = [
        (Mode::Base, false, false, false),
        (Mode::Indiscriminate, true, false, false),
        (Mode::FixedThreshold(tau), true, true, false),
        (Mode::Adaptive, true, true, true),
    ];
    let eval_cfg = EvalConfig {
        setting: Setting::WithPerturbedTrain,
        dimensions: vec![PerturbationSpec::new(Dimension::Robot, 1.0)],
        episodes_per_dim: episodes,
        modes: ladder.iter().map(|l| l.0).collect(),
        base_seed: seed,
        record_episodes: false,
    };
    let report = evaluate(params, env_cfg, &eval_cfg, ttt_cfg, checkpoint_digest)?;
    let rows = ladder
        .iter()
        .map(|&(mode, ttt, filter, buffer)| {
            let c = report.cell(mode.label(), Dimension::Robot).expect("cell evaluated");
            AblationRow {
                mode: mode.label().to_string(),
                ttt,
                variance_filter: filter,
                adaptive_buffer: buffer,
                episodes: c.episodes,
                successes: c.successes,
                success_rate: c.success_rate,
                mean_updates: c.mean_updates,
            }
        })
        .collect();
    Ok(AblationReport {
        dimension: Dimension::Robot,
        tau,
        rows,
        metadata: report.metadata,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub mode: String,
    pub mean_wall_time_s: f64,
    pub mean_updates: f64,
    pub mean_steps: f64,
    pub relative_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub dimension: Dimension,
    pub episodes: usize,
    pub rows: Vec<TimingRow>,
    pub metadata: ReportMetadata,
}

impl TimingReport {
    pub fn row(&self, mode: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// Wall-clock comparison of Base, Indiscriminate and Adaptive on the Robot
/// dimension. Runs on the calling thread only; the three modes are
/// interleaved per episode so slow drifts in machine load hit all equally.
pub fn bench(
    params: &ModelParams,
    env_cfg: &EpisodeConfig,
    ttt_cfg: &TttConfig,
    episodes: usize,
    seed: u64,
    checkpoint_digest: Option<String>,
) -> Result<TimingReport, HarnessError> {
    if episodes == 0 {
        return Err(ConfigError::invalid("bench.episodes", "must be at least 1").into());
    }
    let spec = PerturbationSpec::new(Dimension::Robot, 1.0);
    let modes = [Mode::Base, Mode::Indiscriminate, Mode::Adaptive];
    let mut time = [Duration::ZERO; 3];
    let mut updates = [0usize; 3];
    let mut steps = [0usize; 3];
    for i in 0..episodes {
        let s = episode_seed(seed, spec.dimension, i);
        for (k, &mode) in modes.iter().enumerate() {
            let (r, _) = run_episode(params, env_cfg, &spec, &ttt_cfg.with_mode(mode), s)?;
            time[k] += r.wall_time;
            updates[k] += r.updates_performed;
            steps[k] += r.steps_taken;
        }
    }
    let n = episodes as f64;
    let base = time[0].as_secs_f64() / n;
    let rows = modes
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mean = time[k].as_secs_f64() / n;
            TimingRow {
                mode: m.label().to_string(),
                mean_wall_time_s: mean,
                mean_updates: updates[k] as f64 / n,
                mean_steps: steps[k] as f64 / n,
                relative_time: if k == 0 { 1.0 } else { mean / base },
            }
        })
        .collect();
    Ok(TimingReport {
        dimension: spec.dimension,
        episodes,
        rows,
        metadata: ReportMetadata {
            env: env_cfg.clone(),
            ttt: ttt_cfg.clone(),
            base_seed: seed,
            checkpoint_digest,
            run_config: None,
        },
    })
}
