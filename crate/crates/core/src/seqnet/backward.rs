//! Loss and analytic gradients via backpropagation through time.
//!
//! The loss is the mean per-class binary cross-entropy over the sigmoid
//! outputs, computed from logits for numerical stability. The embedding is
//! frozen: the gradient set carries no entry for it and the input gradient
//! is never materialized.

use ndarray::{s, Array1, Array2, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::textproc::EmbeddingMatrix;

use super::cells::StepCache;
use super::forward::{forward, ActivationCache, EncodedBatch, ForwardMode};
use super::{CellKind, Gradients, ModelParameters, NamedTensor};

/// Mean per-element binary cross-entropy computed from logits:
/// max(z,0) − z·y + ln(1 + e^{−|z|}).
fn bce_from_logits(logits: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels.iter()) {
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    total / logits.len() as f64
}

/// Runs forward in the given mode, then backpropagates through the head,
/// dropout, dense layer, and every recurrent timestep. Returns the loss and
/// gradients congruent to `params`.
pub fn loss_and_gradients(
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    batch: &EncodedBatch,
    mode: ForwardMode,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.labels.ncols() != params.arch().num_classes {
        return Err(Error::ShapeMismatch {
            context: "loss_and_gradients".into(),
            expected: format!("{} classes", params.arch().num_classes),
            actual: format!("{}", batch.labels.ncols()),
        });
    }

    let (_, cache) = forward(params, embedding, batch, mode)?;
    let loss = bce_from_logits(&cache.logits, &batch.labels);
    let grads = backward(params, batch, &cache);
    Ok((loss, grads))
}

fn backward(params: &ModelParameters, batch: &EncodedBatch, cache: &ActivationCache) -> Gradients {
    let arch = params.arch();
    let units = arch.recurrent_units;
    let gates = arch.cell_kind.gate_count();
    let scale = 1.0 / (batch.len() * arch.num_classes) as f64;

    // Head: d loss / d logits for sigmoid + BCE is (scores − labels) / (B·C).
    let d_logits = (&cache.scores - &batch.labels) * scale;
    let d_head_w = cache.dense_dropped.t().dot(&d_logits);
    let d_head_b = d_logits.sum_axis(Axis(0));
    let d_dense_dropped = d_logits.dot(&params.head_w().t());

    let d_dense_out = match &cache.mask_dense {
        Some(mask) => &d_dense_dropped * mask,
        None => d_dense_dropped,
    };
    // relu' via the stored post-activation sign
    let d_dense_pre = &d_dense_out * &cache.dense_out.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });

    let d_dense_w = cache.hidden_dropped.t().dot(&d_dense_pre);
    let d_dense_b = d_dense_pre.sum_axis(Axis(0));
    let d_hidden_dropped = d_dense_pre.dot(&params.dense_w().t());

    let mut d_h = match &cache.mask_hidden {
        Some(mask) => &d_hidden_dropped * mask,
        None => d_hidden_dropped,
    };

    let mut d_w_input = Array2::<f64>::zeros((arch.embed_dim, gates * units));
    let mut d_w_hidden = Array2::<f64>::zeros((units, gates * units));
    let mut d_bias = Array1::<f64>::zeros(gates * units);

    let w_hidden = params.w_hidden();
    let mut d_c = Array2::<f64>::zeros(d_h.raw_dim()); // LSTM cell-state gradient

    for t in (0..arch.max_seq_len).rev() {
        let x = &cache.x_steps[t];
        let h_prev = &cache.hidden[t];
        match (&cache.steps[t], arch.cell_kind) {
            (StepCache::Rnn, CellKind::Rnn) => {
                let h_t = &cache.hidden[t + 1];
                let d_pre = &d_h * &h_t.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                d_w_input += &x.t().dot(&d_pre);
                d_w_hidden += &h_prev.t().dot(&d_pre);
                d_bias += &d_pre.sum_axis(Axis(0));
                d_h = d_pre.dot(&w_hidden.t());
            }
            (
                StepCache::Gru {
                    update,
                    reset,
                    candidate,
                },
                CellKind::Gru,
            ) => {
                let d_update = &d_h * &(candidate - h_prev);
                let d_candidate = &d_h * update;
                let mut d_h_prev = &d_h * &(1.0 - update);

                // candidate gate: tanh over x·Wx + (r ⊙ h_prev)·Wh + b
                let d_cand_pre = &d_candidate * &candidate.mapv(|v| 1.0 - v * v);
                let gated = reset * h_prev;
                d_w_input
                    .slice_mut(s![.., 2 * units..])
                    .scaled_add(1.0, &x.t().dot(&d_cand_pre));
                d_w_hidden
                    .slice_mut(s![.., 2 * units..])
                    .scaled_add(1.0, &gated.t().dot(&d_cand_pre));
                d_bias
                    .slice_mut(s![2 * units..])
                    .scaled_add(1.0, &d_cand_pre.sum_axis(Axis(0)));
                let d_gated = d_cand_pre.dot(&w_hidden.slice(s![.., 2 * units..]).t());
                let d_reset = &d_gated * h_prev;
                d_h_prev += &(&d_gated * reset);

                // update and reset gates both see plain h_prev
                let d_update_pre = &d_update * &(update * &(1.0 - update));
                let d_reset_pre = &d_reset * &(reset * &(1.0 - reset));
                d_w_input
                    .slice_mut(s![.., ..units])
                    .scaled_add(1.0, &x.t().dot(&d_update_pre));
                d_w_hidden
                    .slice_mut(s![.., ..units])
                    .scaled_add(1.0, &h_prev.t().dot(&d_update_pre));
                d_bias
                    .slice_mut(s![..units])
                    .scaled_add(1.0, &d_update_pre.sum_axis(Axis(0)));
                d_w_input
                    .slice_mut(s![.., units..2 * units])
                    .scaled_add(1.0, &x.t().dot(&d_reset_pre));
                d_w_hidden
                    .slice_mut(s![.., units..2 * units])
                    .scaled_add(1.0, &h_prev.t().dot(&d_reset_pre));
                d_bias
                    .slice_mut(s![units..2 * units])
                    .scaled_add(1.0, &d_reset_pre.sum_axis(Axis(0)));

                d_h_prev += &d_update_pre.dot(&w_hidden.slice(s![.., ..units]).t());
                d_h_prev += &d_reset_pre.dot(&w_hidden.slice(s![.., units..2 * units]).t());
                d_h = d_h_prev;
            }
            (
                StepCache::Lstm {
                    input,
                    forget,
                    cell,
                    output,
                    tanh_c,
                },
                CellKind::Lstm,
            ) => {
                let c_prev = &cache.cell_states[t];
                let d_output = &d_h * tanh_c;
                let d_c_total = &d_c + &(&d_h * output * &tanh_c.mapv(|v| 1.0 - v * v));
                let d_input = &d_c_total * cell;
                let d_forget = &d_c_total * c_prev;
                let d_cell = &d_c_total * input;
                d_c = &d_c_total * forget;

                let d_input_pre = &d_input * &(input * &(1.0 - input));
                let d_forget_pre = &d_forget * &(forget * &(1.0 - forget));
                let d_cell_pre = &d_cell * &cell.mapv(|v| 1.0 - v * v);
                let d_output_pre = &d_output * &(output * &(1.0 - output));

                // reassemble the packed (batch × 4·units) preactivation grad
                let mut d_pre = Array2::<f64>::zeros((d_h.nrows(), gates * units));
                d_pre.slice_mut(s![.., ..units]).assign(&d_input_pre);
                d_pre
                    .slice_mut(s![.., units..2 * units])
                    .assign(&d_forget_pre);
                d_pre
                    .slice_mut(s![.., 2 * units..3 * units])
                    .assign(&d_cell_pre);
                d_pre.slice_mut(s![.., 3 * units..]).assign(&d_output_pre);

                d_w_input += &x.t().dot(&d_pre);
                d_w_hidden += &h_prev.t().dot(&d_pre);
                d_bias += &d_pre.sum_axis(Axis(0));
                d_h = d_pre.dot(&w_hidden.t());
            }
            _ => unreachable!("step cache kind always matches the architecture"),
        }
    }

    let named = |name: &str, values: ArrayD<f64>| NamedTensor {
        name: name.to_owned(),
        values,
    };
    Gradients::new(vec![
        named("recurrent.w_input", d_w_input.into_dyn()),
        named("recurrent.w_hidden", d_w_hidden.into_dyn()),
        named("recurrent.bias", d_bias.into_dyn()),
        named("dense.weight", d_dense_w.into_dyn()),
        named("dense.bias", d_dense_b.into_dyn()),
        named("head.weight", d_head_w.into_dyn()),
        named("head.bias", d_head_b.into_dyn()),
    ])
}
