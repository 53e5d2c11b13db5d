//! Toy visual-foresight policy.
//!
//! A one-layer tanh backbone reads `[image; instruction; q]` and its hidden
//! state is split into instruction, image and action partitions. The image
//! head predicts the frame `n` steps ahead from the instruction and image
//! partitions plus a per-pixel residual of the current frame. The action
//! head first mixes the image and action partitions (so actions depend on
//! the image pathway) and then emits a Gaussian with a state-dependent scale.

mod checkpoint;
mod grad;
mod train;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::env::{Observation, Vec2};
use crate::error::{ConfigError, ModelError};

pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint, Checkpoint, SCHEMA_VERSION};
pub use grad::{grad_all, grad_q_img, image_loss_batch};
pub use train::{pretrain, EpochLog, PretrainConfig};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub obs: usize,
    pub instruction: usize,
    pub query: usize,
    pub inst: usize,
    pub img: usize,
    pub act: usize,
    /// Width of the layer mixing the image and action partitions.
    pub dep: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            obs: 256,
            instruction: 8,
            query: 16,
            inst: 16,
            img: 24,
            act: 24,
            dep: 24,
        }
    }
}

impl ModelDims {
    pub fn hidden(&self) -> usize {
        self.inst + self.img + self.act
    }

    pub fn input(&self) -> usize {
        self.obs + self.instruction + self.query
    }

    /// Offset of the query block inside the backbone input.
    pub fn query_offset(&self) -> usize {
        self.obs + self.instruction
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let named = [
            ("model.obs", self.obs),
            ("model.instruction", self.instruction),
            ("model.query", self.query),
            ("model.inst", self.inst),
            ("model.img", self.img),
            ("model.act", self.act),
            ("model.dep", self.dep),
        ];
        for (field, v) in named {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// All learnable tensors. Gradients reuse this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w_dep: Array2<f64>,
    pub b_dep: Array1<f64>,
    pub w_img: Array2<f64>,
    pub d_res: Array1<f64>,
    pub b_img: Array1<f64>,
    pub w_act: Array2<f64>,
    pub b_act: Array1<f64>,
    pub w_s: Array1<f64>,
    pub b_s: f64,
    /// Query vector; the only block touched at test time.
    pub q: Array1<f64>,
}

pub const FIELD_NAMES: [&str; 12] = [
    "w1", "b1", "w_dep", "b_dep", "w_img", "d_res", "b_img", "w_act", "b_act", "w_s", "b_s", "q",
];

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let h = dims.hidden();
        Self {
            dims,
            w1: Array2::zeros((h, dims.input())),
            b1: Array1::zeros(h),
            w_dep: Array2::zeros((dims.dep, dims.img + dims.act)),
            b_dep: Array1::zeros(dims.dep),
            w_img: Array2::zeros((dims.obs, dims.inst + dims.img)),
            d_res: Array1::zeros(dims.obs),
            b_img: Array1::zeros(dims.obs),
            w_act: Array2::zeros((ACTION_DIM, dims.dep)),
            b_act: Array1::zeros(ACTION_DIM),
            w_s: Array1::zeros(dims.dep),
            b_s: 0.0,
            q: Array1::zeros(dims.query),
        }
    }

    /// Uniform `[-0.1, 0.1]` everywhere except `q`, which starts at zero.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-0.1, 0.1).expect("valid range");
        for (name, field) in p.fields_mut() {
            if name != "q" {
                field.iter_mut().for_each(|v| *v = u.sample(&mut rng));
            }
        }
        p
    }

    pub fn fields(&self) -> [(&'static str, &[f64]); 12] {
        fn sl(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("contiguous")
        }
        [
            ("w1", self.w1.as_slice().expect("contiguous")),
            ("b1", sl(&self.b1)),
            ("w_dep", self.w_dep.as_slice().expect("contiguous")),
            ("b_dep", sl(&self.b_dep)),
            ("w_img", self.w_img.as_slice().expect("contiguous")),
            ("d_res", sl(&self.d_res)),
            ("b_img", sl(&self.b_img)),
            ("w_act", self.w_act.as_slice().expect("contiguous")),
            ("b_act", sl(&self.b_act)),
            ("w_s", sl(&self.w_s)),
            ("b_s", std::slice::from_ref(&self.b_s)),
            ("q", sl(&self.q)),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut [f64]); 12] {
        [
            ("w1", self.w1.as_slice_mut().expect("contiguous")),
            ("b1", self.b1.as_slice_mut().expect("contiguous")),
            ("w_dep", self.w_dep.as_slice_mut().expect("contiguous")),
            ("b_dep", self.b_dep.as_slice_mut().expect("contiguous")),
            ("w_img", self.w_img.as_slice_mut().expect("contiguous")),
            ("d_res", self.d_res.as_slice_mut().expect("contiguous")),
            ("b_img", self.b_img.as_slice_mut().expect("contiguous")),
            ("w_act", self.w_act.as_slice_mut().expect("contiguous")),
            ("b_act", self.b_act.as_slice_mut().expect("contiguous")),
            ("w_s", self.w_s.as_slice_mut().expect("contiguous")),
            ("b_s", std::slice::from_mut(&mut self.b_s)),
            ("q", self.q.as_slice_mut().expect("contiguous")),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, f)| f.iter().all(|v| v.is_finite()))
    }

    /// True when every field except `q` is bit-identical to `other`.
    pub fn frozen_fields_equal(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
            && self
                .fields()
                .iter()
                .zip(other.fields().iter())
                .filter(|((name, _), _)| *name != "q")
                .all(|((_, a), (_, b))| {
                    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub h_inst: Array1<f64>,
    pub h_img: Array1<f64>,
    pub h_act: Array1<f64>,
    /// Action representation after conditioning on `h_img`.
    pub h_dep: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub obs: Observation,
    pub expert: Vec2,
    pub future_image: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn backbone_input(obs: &Observation, q: ArrayView1<'_, f64>) -> Array1<f64> {
    obs.image
        .iter()
        .chain(&obs.instruction)
        .copied()
        .chain(q.iter().copied())
        .collect()
}

pub fn forward(params: &ModelParams, obs: &Observation) -> Features {
    let d = params.dims;
    let x = backbone_input(obs, params.q.view());
    let h = (params.w1.dot(&x) + &params.b1).mapv(f64::tanh);
    let h_inst = h.slice(s![..d.inst]).to_owned();
    let h_img = h.slice(s![d.inst..d.inst + d.img]).to_owned();
    let h_act = h.slice(s![d.inst + d.img..]).to_owned();
    let h_dep = (params.w_dep.dot(&h.slice(s![d.inst..])) + &params.b_dep).mapv(f64::tanh);
    Features {
        h_inst,
        h_img,
        h_act,
        h_dep,
    }
}

pub fn predict_image(params: &ModelParams, features: &Features, obs: &Observation) -> Vec<f64> {
    let d = params.dims;
    let mut ctx = Array1::zeros(d.inst + d.img);
    ctx.slice_mut(s![..d.inst]).assign(&features.h_inst);
    ctx.slice_mut(s![d.inst..]).assign(&features.h_img);
    let z = params.w_img.dot(&ctx) + &params.b_img;
    z.iter()
        .zip(params.d_res.iter())
        .zip(&obs.image)
        .map(|((z, r), x)| sigmoid(z + r * x))
        .collect()
}

/// Mean and scale of the action distribution.
pub fn action_distribution(params: &ModelParams, features: &Features) -> (Vec2, f64) {
    let mu = params.w_act.dot(&features.h_dep) + &params.b_act;
    let scale = softplus(params.w_s.dot(&features.h_dep) + params.b_s);
    ([mu[0], mu[1]], scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSamples {
    pub samples: Vec<Vec2>,
    pub mean: Vec2,
    pub scale: f64,
}

/// Draws `k` actions from one backbone forward.
pub fn sample_actions<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &Features,
    k: usize,
    rng: &mut R,
) -> Result<ActionSamples, ModelError> {
    if k == 0 {
        return Err(ModelError::ZeroSamples);
    }
    let (mean, scale) = action_distribution(params, features);
    let samples = (0..k)
        .map(|_| {
            let xi: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            [mean[0] + scale * xi[0], mean[1] + scale * xi[1]]
        })
        .collect();
    Ok(ActionSamples {
        samples,
        mean,
        scale,
    })
}

/// Mean squared pixel error.
pub fn image_loss(prediction: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    sum / prediction.len() as f64
}

/// Gaussian negative log-likelihood of `target` up to constants.
pub fn action_nll(target: Vec2, mean: Vec2, scale: f64) -> f64 {
    let sq = (target[0] - mean[0]).powi(2) + (target[1] - mean[1]).powi(2);
    sq / (2.0 * scale * scale) + 2.0 * scale.ln()
}

pub fn loss_train(params: &ModelParams, sample: &TrainSample, lambda: f64) -> f64 {
    let f = forward(params, &sample.obs);
    let pred = predict_image(params, &f, &sample.obs);
    let l_img = image_loss(&pred, &sample.future_image);
    if lambda == 0.0 {
        return l_img;
    }
    let (mean, scale) = action_distribution(params, &f);
    l_img + lambda * action_nll(sample.expert, mean, scale)
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn zero_params_give_zero_features() {
        let p = ModelParams::zeros(ModelDims::default());
        let f = forward(&p, &random_obs(1, p.dims));
        for v in [&f.h_inst, &f.h_img, &f.h_act, &f.h_dep] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
        let img = predict_image(&p, &f, &random_obs(1, p.dims));
        assert!(img.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let p = random_params(3, 0.5);
        let obs = random_obs(4, p.dims);
        let a = forward(&p, &obs);
        assert_eq!(a, forward(&p, &obs));
        for v in [&a.h_inst, &a.h_img, &a.h_act, &a.h_dep] {
            assert!(v.iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn query_perturbation_reaches_the_action_pathway() {
        let p = random_params(5, 0.3);
        let obs = random_obs(6, p.dims);
        let base = forward(&p, &obs);
        let mut moved = p.clone();
        moved.q[0] += 1e-3;
        let diff = &forward(&moved, &obs).h_dep - &base.h_dep;
        assert!(diff.iter().map(|x| x * x).sum::<f64>() > 0.0);
    }

    #[test]
    fn residual_gate_copies_the_current_frame() {
        // sigmoid(c * x) with c large: pixels above 0.5 saturate near 1 only
        // if bright; compare against the closed form directly.
        let mut p = ModelParams::zeros(ModelDims::default());
        let c = 40.0;
        p.d_res.fill(c);
        let obs = random_obs(9, p.dims);
        let f = forward(&p, &obs);
        let pred = predict_image(&p, &f, &obs);
        for (y, x) in pred.iter().zip(&obs.image) {
            let want = 1.0 / (1.0 + (-c * x).exp());
            assert!((y - want).abs() < 1e-12);
            if *x > 0.1 {
                assert!(*y > 0.98);
            }
        }
    }

    #[test]
    fn predicted_pixels_stay_in_open_unit_interval() {
        let p = random_params(10, 2.0);
        let obs = random_obs(11, p.dims);
        let pred = predict_image(&p, &forward(&p, &obs), &obs);
        assert!(pred.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn vanishing_scale_collapses_samples_to_mean() {
        let mut p = random_params(12, 0.2);
        p.w_s.fill(0.0);
        p.b_s = -800.0;
        let f = forward(&p, &random_obs(13, p.dims));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_actions(&p, &f, 5, &mut rng).unwrap();
        assert!(a.samples.iter().all(|s| *s == a.mean));
    }

    #[test]
    fn unit_scale_samples_have_unit_std() {
        let mut p = ModelParams::zeros(ModelDims::default());
        // softplus(b) = 1
        p.b_s = (1.0f64.exp() - 1.0).ln();
        let f = forward(&p, &random_obs(0, p.dims));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = sample_actions(&p, &f, 100_000, &mut rng).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        for axis in 0..2 {
            let n = a.samples.len() as f64;
            let mean = a.samples.iter().map(|s| s[axis]).sum::<f64>() / n;
            let var = a.samples.iter().map(|s| (s[axis] - mean).powi(2)).sum::<f64>() / n;
            assert!((var.sqrt() - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let p = ModelParams::zeros(ModelDims::default());
        let f = forward(&p, &random_obs(0, p.dims));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_actions(&p, &f, 0, &mut rng), Err(ModelError::ZeroSamples));
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let mut p = random_params(14, 0.2);
        p.w_act.fill(0.0);
        p.w_s.fill(0.0);
        p.b_s = (1.0f64.exp() - 1.0).ln();
        let obs = random_obs(15, p.dims);
        let f = forward(&p, &obs);
        let sample = TrainSample {
            future_image: predict_image(&p, &f, &obs),
            expert: [p.b_act[0], p.b_act[1]],
            obs,
        };
        assert!(loss_train(&p, &sample, 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_grey_against_black_is_a_quarter() {
        let p = ModelParams::zeros(ModelDims::default());
        let obs = random_obs(16, p.dims);
        let sample = TrainSample {
            obs,
            expert: [0.3, -0.2],
            future_image: vec![0.0; 256],
        };
        assert_eq!(loss_train(&p, &sample, 0.0), 0.25);
    }

    #[test]
    fn lambda_zero_drops_the_action_term() {
        let p = random_params(17, 0.3);
        let s = random_sample(18, p.dims);
        let f = forward(&p, &s.obs);
        let l_img = image_loss(&predict_image(&p, &f, &s.obs), &s.future_image);
        assert_eq!(loss_train(&p, &s, 0.0), l_img);
        assert_ne!(loss_train(&p, &s, 1.0), l_img);
    }

    #[test]
    fn init_is_seeded_with_zero_query() {
        let a = ModelParams::init(ModelDims::default(), 4);
        assert_eq!(a, ModelParams::init(ModelDims::default(), 4));
        assert!(a.q.iter().all(|&v| v == 0.0));
        assert!(a.w1.iter().all(|v| v.abs() <= 0.1));
        assert_ne!(a, ModelParams::init(ModelDims::default(), 5));
    }
}
