//! Synthetic 2D reach task.
//!
//! An agent blob moves inside the unit square towards a goal blob while
//! distractor blobs sit still. Observations are small grayscale images plus
//! an encoded instruction. Seven perturbation dimensions shift the task away
//! from the clean training distribution.

mod instruction;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, EnvError};

pub use instruction::{encode_instruction, language_mixing_matrix};

pub type Vec2 = [f64; 2];

const AGENT_AMPLITUDE: f64 = 1.0;
const GOAL_AMPLITUDE: f64 = 0.7;
const DISTRACTOR_AMPLITUDE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub image_side: usize,
    pub max_steps: usize,
    pub success_radius: f64,
    pub action_cap: f64,
    pub dynamics_noise_std: f64,
    pub num_distractors: usize,
    pub num_goal_ids: usize,
    /// Blob width in pixels.
    pub blob_sigma: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            max_steps: 60,
            success_radius: 0.06,
            action_cap: 0.08,
            dynamics_noise_std: 0.005,
            num_distractors: 2,
            num_goal_ids: 8,
            blob_sigma: 1.2,
        }
    }
}

impl EpisodeConfig {
    pub fn image_len(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.image_side < 4 {
            return Err(ConfigError::invalid("env.image_side", "must be at least 4"));
        }
        if self.max_steps < 1 {
            return Err(ConfigError::invalid("env.max_steps", "must be at least 1"));
        }
        if !(self.success_radius > 0.0) {
            return Err(ConfigError::invalid("env.success_radius", "must be positive"));
        }
        if !(self.action_cap > 0.0) {
            return Err(ConfigError::invalid("env.action_cap", "must be positive"));
        }
        if !(self.dynamics_noise_std >= 0.0) {
            return Err(ConfigError::invalid(
                "env.dynamics_noise_std",
                "must be non-negative",
            ));
        }
        if self.num_goal_ids < 1 {
            return Err(ConfigError::invalid("env.num_goal_ids", "must be at least 1"));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(ConfigError::invalid("env.blob_sigma", "must be positive"));
        }
        Ok(())
    }
}

/// Perturbation axes, in report column order after `Clean`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Clean,
    Robot,
    Language,
    Noise,
    Layout,
    Background,
    Camera,
    Light,
}

impl Dimension {
    pub const PERTURBED: [Dimension; 7] = [
        Dimension::Robot,
        Dimension::Language,
        Dimension::Noise,
        Dimension::Layout,
        Dimension::Background,
        Dimension::Camera,
        Dimension::Light,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Clean => "Clean",
            Dimension::Robot => "Robot",
            Dimension::Language => "Language",
            Dimension::Noise => "Noise",
            Dimension::Layout => "Layout",
            Dimension::Background => "Background",
            Dimension::Camera => "Camera",
            Dimension::Light => "Light",
        }
    }

    pub fn parse(s: &str) -> Option<Dimension> {
        let all = std::iter::once(Dimension::Clean).chain(Dimension::PERTURBED);
        all.into_iter().find(|d| d.name().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub dimension: Dimension,
    pub magnitude: f64,
}

impl PerturbationSpec {
    pub const CLEAN: PerturbationSpec = PerturbationSpec {
        dimension: Dimension::Clean,
        magnitude: 1.0,
    };

    pub fn new(dimension: Dimension, magnitude: f64) -> Self {
        Self {
            dimension,
            magnitude,
        }
    }

    /// The dimension actually applied; zero magnitude collapses to `Clean`.
    pub fn active(&self) -> Dimension {
        if self.magnitude == 0.0 {
            Dimension::Clean
        } else {
            self.dimension
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(ConfigError::invalid(
                "perturbation.magnitude",
                format!("{} is outside [0, 1]", self.magnitude),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: Vec2,
    pub goal_pos: Vec2,
    pub distractor_pos: Vec<Vec2>,
    pub goal_id: usize,
    pub t: usize,
    pub succeeded: bool,
    /// Seeds per-episode scene properties that stay fixed across steps
    /// (the background grating).
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: Vec<f64>,
    pub instruction: Vec<f64>,
}

fn clip_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

fn cap_norm(v: Vec2, cap: f64) -> Vec2 {
    let n = norm(v);
    if n > cap {
        [v[0] * cap / n, v[1] * cap / n]
    } else {
        v
    }
}

/// Layout remap: reflects each coordinate inside its half of the arena, so
/// objects that would sit near the centre are pushed towards the walls.
fn layout_remap(u: f64, magnitude: f64) -> f64 {
    let mirrored = if u < 0.5 { 0.5 - u } else { 1.5 - u };
    (u + magnitude * (mirrored - u)).clamp(0.0, 1.0)
}

pub fn reset(config: &EpisodeConfig, spec: &PerturbationSpec, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent_box = Uniform::new(0.1, 0.9).expect("valid range");
    let object_box = Uniform::new(0.15, 0.85).expect("valid range");

    let mut agent_pos = [agent_box.sample(&mut rng), agent_box.sample(&mut rng)];
    if spec.active() == Dimension::Robot {
        let shift = 0.25 * spec.magnitude;
        agent_pos = clip_unit([agent_pos[0] + shift, agent_pos[1] + shift]);
    }

    let place = |rng: &mut ChaCha8Rng| -> Vec2 {
        let p = [object_box.sample(rng), object_box.sample(rng)];
        if spec.active() == Dimension::Layout {
            [
                layout_remap(p[0], spec.magnitude),
                layout_remap(p[1], spec.magnitude),
            ]
        } else {
            p
        }
    };
    let goal_pos = place(&mut rng);
    let distractor_pos = (0..config.num_distractors).map(|_| place(&mut rng)).collect();
    let goal_id = rng.random_range(0..config.num_goal_ids);

    WorldState {
        agent_pos,
        goal_pos,
        distractor_pos,
        goal_id,
        t: 0,
        succeeded: false,
        scene_seed: seed,
    }
}

/// Continuous pixel coordinate of an arena coordinate; pixel `i` is centred
/// on `i`.
fn to_pixel(u: f64, side: usize) -> f64 {
    u * side as f64 - 0.5
}

/// Nearest pixel (column, row) of an arena position.
pub fn nearest_pixel(pos: Vec2, side: usize) -> (usize, usize) {
    let idx = |u: f64| (to_pixel(u, side).round().max(0.0) as usize).min(side - 1);
    (idx(pos[0]), idx(pos[1]))
}

fn add_blob(image: &mut [f64], side: usize, pos: Vec2, amplitude: f64, sigma: f64) {
    let (cx, cy) = (to_pixel(pos[0], side), to_pixel(pos[1], side));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for row in 0..side {
        let dy = row as f64 - cy;
        for col in 0..side {
            let dx = col as f64 - cx;
            image[row * side + col] += amplitude * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

fn clamp_unit(image: &mut [f64]) {
    for p in image.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
}

impl Grating {
    fn for_scene(scene_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x6772_6174_696e_6700);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let period = rng.random_range(4.0..8.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / period;
        Self {
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase,
        }
    }

    /// Non-negative grating in `[0, amplitude]`.
    fn value(&self, col: usize, row: usize, amplitude: f64) -> f64 {
        let arg = self.kx * col as f64 + self.ky * row as f64 + self.phase;
        amplitude * 0.5 * (1.0 + arg.sin())
    }
}

/// Clean scene image without any perturbation.
pub fn render_clean(state: &WorldState, config: &EpisodeConfig) -> Vec<f64> {
    let side = config.image_side;
    let mut image = vec![0.0; side * side];
    add_blob(&mut image, side, state.agent_pos, AGENT_AMPLITUDE, config.blob_sigma);
    add_blob(&mut image, side, state.goal_pos, GOAL_AMPLITUDE, config.blob_sigma);
    for &d in &state.distractor_pos {
        add_blob(&mut image, side, d, DISTRACTOR_AMPLITUDE, config.blob_sigma);
    }
    clamp_unit(&mut image);
    image
}

/// Shifts the image by `shift` pixels along both axes, zero padded.
pub fn translate(image: &[f64], side: usize, shift: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for row in shift..side {
        for col in shift..side {
            out[row * side + col] = image[(row - shift) * side + (col - shift)];
        }
    }
    out
}

pub fn render<R: Rng + ?Sized>(
    state: &WorldState,
    config: &EpisodeConfig,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Vec<f64> {
    let side = config.image_side;
    let m = spec.magnitude;
    let mut image = render_clean(state, config);
    match spec.active() {
        Dimension::Clean | Dimension::Robot | Dimension::Language | Dimension::Layout => {}
        Dimension::Noise => {
            let noise = Normal::new(0.0, 0.15 * m).expect("finite std");
            for p in image.iter_mut() {
                *p += noise.sample(rng);
            }
        }
        Dimension::Background => {
            let grating = Grating::for_scene(state.scene_seed);
            for row in 0..side {
                for col in 0..side {
                    image[row * side + col] += grating.value(col, row, 0.2 * m);
                }
            }
        }
        Dimension::Camera => {
            let shift = (2.0 * m).round() as usize;
            image = translate(&image, side, shift);
        }
        Dimension::Light => {
            let gain = 1.0 + 0.5 * m;
            for p in image.iter_mut() {
                *p *= gain;
            }
        }
    }
    clamp_unit(&mut image);
    image
}

pub fn observe<R: Rng + ?Sized>(
    state: &WorldState,
    config: &EpisodeConfig,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Observation {
    Observation {
        image: render(state, config, spec, rng),
        instruction: encode_instruction(state.goal_id, spec, config),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub done: bool,
    pub success: bool,
}

pub fn step<R: Rng + ?Sized>(
    state: &WorldState,
    action: Vec2,
    config: &EpisodeConfig,
    rng: &mut R,
) -> Result<StepOutcome, EnvError> {
    if state.t >= config.max_steps || state.succeeded {
        return Err(EnvError::EpisodeFinished {
            t: state.t,
            succeeded: state.succeeded,
        });
    }
    let a = cap_norm(action, config.action_cap);
    let nu = if config.dynamics_noise_std > 0.0 {
        let normal = Normal::new(0.0, config.dynamics_noise_std).expect("finite std");
        [normal.sample(rng), normal.sample(rng)]
    } else {
        [0.0, 0.0]
    };
    let agent_pos = clip_unit([
        state.agent_pos[0] + a[0] + nu[0],
        state.agent_pos[1] + a[1] + nu[1],
    ]);
    let t = state.t + 1;
    let gap = [
        agent_pos[0] - state.goal_pos[0],
        agent_pos[1] - state.goal_pos[1],
    ];
    let success = norm(gap) < config.success_radius;
    let done = success || t == config.max_steps;
    Ok(StepOutcome {
        state: WorldState {
            agent_pos,
            t,
            succeeded: success,
            ..state.clone()
        },
        done,
        success,
    })
}

/// Straight-line demonstrator: heads for the goal at capped speed.
pub fn expert_action(state: &WorldState, config: &EpisodeConfig) -> Vec2 {
    cap_norm(
        [
            state.goal_pos[0] - state.agent_pos[0],
            state.goal_pos[1] - state.agent_pos[1],
        ],
        config.action_cap,
    )
}
