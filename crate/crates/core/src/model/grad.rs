use ndarray::{s, Array1, Array2, Axis, Zip};

use super::{sigmoid, softplus, ModelParams, TrainSample};
use crate::env::Observation;
use crate::error::ModelError;

/// Activations of a batch forward pass, kept for the backward pass.
struct BatchForward {
    x: Array2<f64>,
    h: Array2<f64>,
    h_dep: Array2<f64>,
    pred: Array2<f64>,
}

fn stack_inputs(params: &ModelParams, obs: &[&Observation]) -> Array2<f64> {
    let d = params.dims;
    let mut x = Array2::zeros((obs.len(), d.input()));
    for (mut row, o) in x.axis_iter_mut(Axis(0)).zip(obs) {
        row.slice_mut(s![..d.obs])
            .assign(&ndarray::ArrayView1::from(&o.image[..]));
        row.slice_mut(s![d.obs..d.query_offset()])
            .assign(&ndarray::ArrayView1::from(&o.instruction[..]));
        row.slice_mut(s![d.query_offset()..]).assign(&params.q);
    }
    x
}

fn forward_batch(params: &ModelParams, obs: &[&Observation], with_actions: bool) -> BatchForward {
    let d = params.dims;
    let x = stack_inputs(params, obs);
    let h = (x.dot(&params.w1.t()) + &params.b1).mapv(f64::tanh);
    let h_dep = if with_actions {
        (h.slice(s![.., d.inst..]).dot(&params.w_dep.t()) + &params.b_dep).mapv(f64::tanh)
    } else {
        Array2::zeros((0, 0))
    };
    let mut pred = h.slice(s![.., ..d.inst + d.img]).dot(&params.w_img.t()) + &params.b_img;
    for (mut row, o) in pred.axis_iter_mut(Axis(0)).zip(obs) {
        Zip::from(&mut row)
            .and(&params.d_res)
            .and(&ndarray::ArrayView1::from(&o.image[..]))
            .for_each(|z, &r, &px| *z = sigmoid(*z + r * px));
    }
    BatchForward { x, h, h_dep, pred }
}

fn stack_targets(targets: &[&[f64]], width: usize) -> Array2<f64> {
    let mut y = Array2::zeros((targets.len(), width));
    for (mut row, t) in y.axis_iter_mut(Axis(0)).zip(targets) {
        row.assign(&ndarray::ArrayView1::from(*t));
    }
    y
}

/// Gradient of the batch-mean image loss with respect to the image-head
/// pre-activations.
fn image_preact_grad(fw: &BatchForward, y: &Array2<f64>, n_pixels: usize, batch: usize) -> Array2<f64> {
    let scale = 2.0 / (n_pixels as f64 * batch as f64);
    let mut dz = &fw.pred - y;
    Zip::from(&mut dz)
        .and(&fw.pred)
        .for_each(|g, &o| *g *= scale * o * (1.0 - o));
    dz
}

/// Mean image loss over a batch, evaluated under the current parameters.
pub fn image_loss_batch(
    params: &ModelParams,
    inputs: &[Observation],
    targets: &[Vec<f64>],
) -> Result<f64, ModelError> {
    check_pairs(inputs, targets)?;
    let obs: Vec<&Observation> = inputs.iter().collect();
    let fw = forward_batch(params, &obs, false);
    let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let y = stack_targets(&t, params.dims.obs);
    let sq = (&fw.pred - &y).mapv(|v| v * v).sum();
    Ok(sq / (params.dims.obs * inputs.len()) as f64)
}

fn check_pairs(inputs: &[Observation], targets: &[Vec<f64>]) -> Result<(), ModelError> {
    if inputs.len() != targets.len() {
        return Err(ModelError::LengthMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    Ok(())
}

/// Gradient of the batch-mean image loss with respect to `q` alone.
///
/// The forward pass is recomputed under the current parameters, so pairs
/// collected several steps ago are scored against the present `q`.
pub fn grad_q_img(
    params: &ModelParams,
    inputs: &[Observation],
    targets: &[Vec<f64>],
) -> Result<Array1<f64>, ModelError> {
    check_pairs(inputs, targets)?;
    let d = params.dims;
    let obs: Vec<&Observation> = inputs.iter().collect();
    let fw = forward_batch(params, &obs, false);
    let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let y = stack_targets(&t, d.obs);
    let dz_img = image_preact_grad(&fw, &y, d.obs, inputs.len());

    let ctx = d.inst + d.img;
    let mut dz1 = dz_img.dot(&params.w_img);
    Zip::from(&mut dz1)
        .and(&fw.h.slice(s![.., ..ctx]))
        .for_each(|g, &h| *g *= 1.0 - h * h);
    // Only the first `ctx` hidden units feed the image head.
    let w_q = params.w1.slice(s![..ctx, d.query_offset()..]);
    Ok(dz1.sum_axis(Axis(0)).dot(&w_q))
}

/// Loss and gradient of the batch-mean training objective for every field.
pub(crate) fn loss_and_grad(
    params: &ModelParams,
    batch: &[&TrainSample],
    lambda: f64,
) -> Result<(f64, ModelParams), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let d = params.dims;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let obs: Vec<&Observation> = batch.iter().map(|s| &s.obs).collect();
    let fw = forward_batch(params, &obs, true);
    let t: Vec<&[f64]> = batch.iter().map(|s| s.future_image.as_slice()).collect();
    let y = stack_targets(&t, d.obs);
    let images = stack_targets(
        &batch.iter().map(|s| s.obs.image.as_slice()).collect::<Vec<_>>(),
        d.obs,
    );

    let mut g = ModelParams::zeros(d);
    let mut loss = (&fw.pred - &y).mapv(|v| v * v).sum() / (d.obs * n) as f64;

    // Image head.
    let ctx = d.inst + d.img;
    let dz_img = image_preact_grad(&fw, &y, d.obs, n);
    g.w_img = dz_img.t().dot(&fw.h.slice(s![.., ..ctx]));
    g.d_res = (&dz_img * &images).sum_axis(Axis(0));
    g.b_img = dz_img.sum_axis(Axis(0));
    let mut dh = Array2::<f64>::zeros((n, d.hidden()));
    dh.slice_mut(s![.., ..ctx]).assign(&dz_img.dot(&params.w_img));

    // Action head.
    let mu = fw.h_dep.dot(&params.w_act.t()) + &params.b_act;
    let u = fw.h_dep.dot(&params.w_s) + params.b_s;
    let mut dmu = Array2::<f64>::zeros((n, 2));
    let mut du = Array1::<f64>::zeros(n);
    for i in 0..n {
        let a = batch[i].expert;
        let sc = softplus(u[i]);
        let r = [mu[[i, 0]] - a[0], mu[[i, 1]] - a[1]];
        let sq = r[0] * r[0] + r[1] * r[1];
        loss += lambda * inv_n * (sq / (2.0 * sc * sc) + 2.0 * sc.ln());
        dmu[[i, 0]] = lambda * inv_n * r[0] / (sc * sc);
        dmu[[i, 1]] = lambda * inv_n * r[1] / (sc * sc);
        let ds = lambda * inv_n * (2.0 / sc - sq / (sc * sc * sc));
        du[i] = ds * sigmoid(u[i]);
    }
    g.w_act = dmu.t().dot(&fw.h_dep);
    g.b_act = dmu.sum_axis(Axis(0));
    g.w_s = fw.h_dep.t().dot(&du);
    g.b_s = du.sum();

    let mut dz_dep = dmu.dot(&params.w_act);
    for (mut row, &dui) in dz_dep.axis_iter_mut(Axis(0)).zip(du.iter()) {
        row.scaled_add(dui, &params.w_s);
    }
    Zip::from(&mut dz_dep)
        .and(&fw.h_dep)
        .for_each(|gv, &hv| *gv *= 1.0 - hv * hv);
    g.w_dep = dz_dep.t().dot(&fw.h.slice(s![.., d.inst..]));
    g.b_dep = dz_dep.sum_axis(Axis(0));
    {
        let mut tail = dh.slice_mut(s![.., d.inst..]);
        tail += &dz_dep.dot(&params.w_dep);
    }

    // Backbone.
    Zip::from(&mut dh)
        .and(&fw.h)
        .for_each(|gv, &hv| *gv *= 1.0 - hv * hv);
    g.w1 = dh.t().dot(&fw.x);
    g.b1 = dh.sum_axis(Axis(0));
    g.q = dh
        .sum_axis(Axis(0))
        .dot(&params.w1.slice(s![.., d.query_offset()..]));
    Ok((loss, g))
}

/// Gradient of the batch-mean training loss over every parameter field.
pub fn grad_all(params: &ModelParams, batch: &[TrainSample], lambda: f64) -> Result<ModelParams, ModelError> {
    let refs: Vec<&TrainSample> = batch.iter().collect();
    loss_and_grad(params, &refs, lambda).map(|(_, g)| g)
}
