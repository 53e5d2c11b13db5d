use std::sync::OnceLock;

use serde::Deserialize;

use super::{Dimension, EpisodeConfig, PerturbationSpec};

#[derive(Deserialize)]
struct MixingAsset {
    matrix: Vec<Vec<f64>>,
}

/// Doubly-stochastic 8x8 mixing matrix used by the Language perturbation.
pub fn language_mixing_matrix() -> &'static [Vec<f64>] {
    static MATRIX: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let asset: MixingAsset =
            serde_json::from_str(include_str!("../../assets/language_mixing.json"))
                .expect("bundled mixing matrix is valid JSON");
        asset.matrix
    })
}

/// Column `goal_id` of the mixing matrix for `dim` goal ids. Vocabularies
/// other than the bundled size fall back to a cyclic two-neighbour mix,
/// which is also doubly stochastic.
fn mixed_column(goal_id: usize, dim: usize) -> Vec<f64> {
    let m = language_mixing_matrix();
    if m.len() == dim {
        return m.iter().map(|row| row[goal_id]).collect();
    }
    let mut col = vec![0.0; dim];
    col[(goal_id + 1) % dim] += 0.5;
    col[(goal_id + 2) % dim] += 0.5;
    col
}

pub fn encode_instruction(goal_id: usize, spec: &PerturbationSpec, config: &EpisodeConfig) -> Vec<f64> {
    let dim = config.num_goal_ids;
    let mut e = vec![0.0; dim];
    e[goal_id] = 1.0;
    if spec.active() != Dimension::Language {
        return e;
    }
    let m = spec.magnitude;
    let mixed = mixed_column(goal_id, dim);
    let mut out: Vec<f64> = e
        .iter()
        .zip(&mixed)
        .map(|(a, b)| (1.0 - m) * a + m * b)
        .collect();
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut out {
        *v /= n;
    }
    out
}
