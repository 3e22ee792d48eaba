//! Recurrent cell steps, batched plus single-vector forms.
//!
//! Gate tensors are packed column-wise: a cell with G gates stores its input
//! weights as [embed_dim, G·units] and recurrent weights as [units, G·units],
//! with one bias vector per gate (packed the same way).

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

use super::{CellKind, ModelParameters};

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Per-step activations retained for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) enum StepCache {
    Rnn,
    Gru {
        update: Array2<f64>,
        reset: Array2<f64>,
        candidate: Array2<f64>,
    },
    Lstm {
        input: Array2<f64>,
        forget: Array2<f64>,
        cell: Array2<f64>,
        output: Array2<f64>,
        tanh_c: Array2<f64>,
    },
}

pub(crate) struct BatchStep {
    pub h: Array2<f64>,
    pub c: Option<Array2<f64>>,
    pub cache: StepCache,
}

/// Advances a whole batch one timestep.
pub(crate) fn batch_cell_step(
    params: &ModelParameters,
    x: &Array2<f64>,
    h_prev: &Array2<f64>,
    c_prev: Option<&Array2<f64>>,
) -> BatchStep {
    let units = params.arch().recurrent_units;
    let w_input = params.w_input();
    let w_hidden = params.w_hidden();
    let bias = params.bias();

    match params.arch().cell_kind {
        CellKind::Rnn => {
            let mut a = x.dot(&w_input);
            a += &h_prev.dot(&w_hidden);
            a += &bias;
            let h = a.mapv(relu);
            BatchStep {
                h,
                c: None,
                cache: StepCache::Rnn,
            }
        }
        CellKind::Gru => {
            // packed gate order: update (z), reset (r), candidate (h̃)
            let mut xa = x.dot(&w_input);
            xa += &bias;
            let zr = h_prev.dot(&w_hidden.slice(s![.., ..2 * units]));
            let update = (&xa.slice(s![.., ..units]) + &zr.slice(s![.., ..units])).mapv(sigmoid);
            let reset = (&xa.slice(s![.., units..2 * units]) + &zr.slice(s![.., units..2 * units]))
                .mapv(sigmoid);
            let gated = &reset * h_prev;
            let candidate = (&xa.slice(s![.., 2 * units..])
                + &gated.dot(&w_hidden.slice(s![.., 2 * units..])))
                .mapv(f64::tanh);
            let h = (1.0 - &update) * h_prev + &update * &candidate;
            BatchStep {
                h,
                c: None,
                cache: StepCache::Gru {
                    update,
                    reset,
                    candidate,
                },
            }
        }
        CellKind::Lstm => {
            // packed gate order: input (i), forget (f), cell (g), output (o)
            let mut a = x.dot(&w_input);
            a += &h_prev.dot(&w_hidden);
            a += &bias;
            let input = a.slice(s![.., ..units]).mapv(sigmoid);
            let forget = a.slice(s![.., units..2 * units]).mapv(sigmoid);
            let cell = a.slice(s![.., 2 * units..3 * units]).mapv(f64::tanh);
            let output = a.slice(s![.., 3 * units..]).mapv(sigmoid);
            let c_prev = c_prev.expect("LSTM step requires a cell state");
            let c_new = &forget * c_prev + &input * &cell;
            let tanh_c = c_new.mapv(f64::tanh);
            let h = &output * &tanh_c;
            BatchStep {
                h,
                c: Some(c_new),
                cache: StepCache::Lstm {
                    input,
                    forget,
                    cell,
                    output,
                    tanh_c,
                },
            }
        }
    }
}

fn check_step_shapes(
    op: &str,
    expected_kind: CellKind,
    params: &ModelParameters,
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
) -> Result<()> {
    let arch = params.arch();
    if arch.cell_kind != expected_kind {
        return Err(Error::ShapeMismatch {
            context: op.to_owned(),
            expected: format!("{} parameters", expected_kind.name()),
            actual: format!("{} parameters", arch.cell_kind.name()),
        });
    }
    if x.len() != arch.embed_dim || h_prev.len() != arch.recurrent_units {
        return Err(Error::ShapeMismatch {
            context: op.to_owned(),
            expected: format!("x[{}], h_prev[{}]", arch.embed_dim, arch.recurrent_units),
            actual: format!("x[{}], h_prev[{}]", x.len(), h_prev.len()),
        });
    }
    Ok(())
}

fn row(view: ArrayView1<'_, f64>) -> Array2<f64> {
    view.to_owned().insert_axis(Axis(0))
}

/// h_new = relu(W_x·x + W_h·h_prev + b).
pub fn rnn_cell_step(
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    params: &ModelParameters,
) -> Result<Array1<f64>> {
    check_step_shapes("rnn_cell_step", CellKind::Rnn, params, x, h_prev)?;
    let step = batch_cell_step(params, &row(x), &row(h_prev), None);
    Ok(step.h.index_axis_move(Axis(0), 0))
}

/// Standard GRU step: z and r gates, tanh candidate over the reset-gated
/// hidden state, convex blend of h_prev and the candidate.
pub fn gru_cell_step(
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    params: &ModelParameters,
) -> Result<Array1<f64>> {
    check_step_shapes("gru_cell_step", CellKind::Gru, params, x, h_prev)?;
    let step = batch_cell_step(params, &row(x), &row(h_prev), None);
    Ok(step.h.index_axis_move(Axis(0), 0))
}

/// Standard LSTM step; returns (h_new, c_new).
pub fn lstm_cell_step(
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    c_prev: ArrayView1<'_, f64>,
    params: &ModelParameters,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_step_shapes("lstm_cell_step", CellKind::Lstm, params, x, h_prev)?;
    if c_prev.len() != params.arch().recurrent_units {
        return Err(Error::ShapeMismatch {
            context: "lstm_cell_step".into(),
            expected: format!("c_prev[{}]", params.arch().recurrent_units),
            actual: format!("c_prev[{}]", c_prev.len()),
        });
    }
    let c = row(c_prev);
    let step = batch_cell_step(params, &row(x), &row(h_prev), Some(&c));
    let c_new = step.c.unwrap().index_axis_move(Axis(0), 0);
    Ok((step.h.index_axis_move(Axis(0), 0), c_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqnet::{init_parameters, ArchitectureSpec};
    use ndarray::Array1;

    fn tiny_arch(kind: CellKind, embed: usize, units: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            cell_kind: kind,
            embed_dim: embed,
            recurrent_units: units,
            dense_units: 2,
            num_classes: 3,
            dropout_rate: 0.0,
            max_seq_len: 3,
        }
    }

    fn zero_params(kind: CellKind, embed: usize, units: usize) -> ModelParameters {
        let params = init_parameters(&tiny_arch(kind, embed, units), 0).unwrap();
        let zeros = params
            .layers()
            .iter()
            .map(|l| ndarray::ArrayD::zeros(l.values.raw_dim()))
            .collect();
        params.with_values(zeros)
    }

    #[test]
    fn rnn_zero_weights_give_zero_state() {
        let params = zero_params(CellKind::Rnn, 2, 3);
        let h = rnn_cell_step(
            Array1::from(vec![0.4, -1.2]).view(),
            Array1::zeros(3).view(),
            &params,
        )
        .unwrap();
        assert_eq!(h, Array1::<f64>::zeros(3));
    }

    #[test]
    fn rnn_relu_clamps_negative_preactivation() {
        // 1-unit cell, W_x=[1], W_h=[1], b=0, x=2, h_prev=-3 → relu(-1) = 0
        let params = zero_params(CellKind::Rnn, 1, 1);
        let ones: Vec<ndarray::ArrayD<f64>> = params
            .layers()
            .iter()
            .map(|l| {
                if l.name.starts_with("recurrent.w") {
                    ndarray::ArrayD::from_elem(l.values.raw_dim(), 1.0)
                } else {
                    ndarray::ArrayD::zeros(l.values.raw_dim())
                }
            })
            .collect();
        let params = params.with_values(ones);
        let h = rnn_cell_step(
            Array1::from(vec![2.0]).view(),
            Array1::from(vec![-3.0]).view(),
            &params,
        )
        .unwrap();
        assert_eq!(h, Array1::from(vec![0.0]));
    }

    #[test]
    fn gru_zero_params_halve_hidden_state() {
        let params = zero_params(CellKind::Gru, 2, 3);
        let x = Array1::from(vec![0.3, 0.9]);
        // h_prev = 0 → z = r = 0.5, candidate = 0, h_new = 0
        let h0 = gru_cell_step(x.view(), Array1::zeros(3).view(), &params).unwrap();
        assert_eq!(h0, Array1::<f64>::zeros(3));
        // h_prev = v → h_new = 0.5·v
        let v = Array1::from(vec![0.2, -0.6, 1.0]);
        let h = gru_cell_step(x.view(), v.view(), &params).unwrap();
        for (hv, vv) in h.iter().zip(v.iter()) {
            assert!((hv - 0.5 * vv).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_zero_params_halve_cell_state() {
        let params = zero_params(CellKind::Lstm, 2, 2);
        let x = Array1::from(vec![1.0, -1.0]);
        let (h0, c0) = lstm_cell_step(
            x.view(),
            Array1::zeros(2).view(),
            Array1::zeros(2).view(),
            &params,
        )
        .unwrap();
        assert_eq!(h0, Array1::<f64>::zeros(2));
        assert_eq!(c0, Array1::<f64>::zeros(2));

        let v = Array1::from(vec![0.8, -0.4]);
        let (h, c) = lstm_cell_step(x.view(), Array1::zeros(2).view(), v.view(), &params).unwrap();
        for ((hv, cv), vv) in h.iter().zip(c.iter()).zip(v.iter()) {
            assert!((cv - 0.5 * vv).abs() < 1e-12);
            assert!((hv - 0.5 * (0.5 * vv).tanh()).abs() < 1e-12);
        }
    }

    // Brute-force single-unit reference evaluations of the same formulas,
    // written scalar-by-scalar, independent of the batched implementation.
    #[test]
    fn gru_matches_scalar_reference() {
        let arch = tiny_arch(CellKind::Gru, 2, 2);
        let params = init_parameters(&arch, 42).unwrap();
        let x = Array1::from(vec![0.7, -0.3]);
        let h_prev = Array1::from(vec![0.1, 0.5]);
        let got = gru_cell_step(x.view(), h_prev.view(), &params).unwrap();

        let wx = params.w_input().to_owned();
        let wh = params.w_hidden().to_owned();
        let b = params.bias().to_owned();
        let units = 2;
        let gate = |g: usize, j: usize, hin: &Array1<f64>| -> f64 {
            let col = g * units + j;
            let mut a = b[col];
            for i in 0..2 {
                a += x[i] * wx[[i, col]];
            }
            for i in 0..units {
                a += hin[i] * wh[[i, col]];
            }
            a
        };
        for j in 0..units {
            let z = sigmoid(gate(0, j, &h_prev));
            let r = sigmoid(gate(1, j, &h_prev));
            // the candidate sees r ⊙ h_prev through the recurrent weights
            let gated = Array1::from_iter(h_prev.iter().enumerate().map(|(i, &v)| {
                let rj = sigmoid(gate(1, i, &h_prev));
                rj * v
            }));
            let cand = gate(2, j, &gated).tanh();
            let expected = (1.0 - z) * h_prev[j] + z * cand;
            assert!(
                (got[j] - expected).abs() < 1e-12,
                "unit {j}: {} vs {expected}",
                got[j]
            );
            let _ = r;
        }
    }

    #[test]
    fn lstm_matches_scalar_reference() {
        let arch = tiny_arch(CellKind::Lstm, 2, 2);
        let params = init_parameters(&arch, 9).unwrap();
        let x = Array1::from(vec![-0.2, 0.6]);
        let h_prev = Array1::from(vec![0.4, -0.1]);
        let c_prev = Array1::from(vec![0.3, 0.2]);
        let (h, c) = lstm_cell_step(x.view(), h_prev.view(), c_prev.view(), &params).unwrap();

        let wx = params.w_input().to_owned();
        let wh = params.w_hidden().to_owned();
        let b = params.bias().to_owned();
        let units = 2;
        let preact = |g: usize, j: usize| -> f64 {
            let col = g * units + j;
            let mut a = b[col];
            for i in 0..2 {
                a += x[i] * wx[[i, col]];
                a += h_prev[i] * wh[[i, col]];
            }
            a
        };
        for j in 0..units {
            let i_g = sigmoid(preact(0, j));
            let f_g = sigmoid(preact(1, j));
            let g_g = preact(2, j).tanh();
            let o_g = sigmoid(preact(3, j));
            let c_new = f_g * c_prev[j] + i_g * g_g;
            let h_new = o_g * c_new.tanh();
            assert!((c[j] - c_new).abs() < 1e-12);
            assert!((h[j] - h_new).abs() < 1e-12);
        }
    }

    #[test]
    fn rnn_matches_scalar_reference() {
        let arch = tiny_arch(CellKind::Rnn, 3, 2);
        let params = init_parameters(&arch, 5).unwrap();
        let x = Array1::from(vec![0.1, -0.9, 0.4]);
        let h_prev = Array1::from(vec![0.2, 0.7]);
        let got = rnn_cell_step(x.view(), h_prev.view(), &params).unwrap();
        let wx = params.w_input();
        let wh = params.w_hidden();
        let b = params.bias();
        for j in 0..2 {
            let mut a = b[j];
            for i in 0..3 {
                a += x[i] * wx[[i, j]];
            }
            for i in 0..2 {
                a += h_prev[i] * wh[[i, j]];
            }
            assert!((got[j] - relu(a)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = zero_params(CellKind::Rnn, 2, 3);
        let err = rnn_cell_step(Array1::zeros(5).view(), Array1::zeros(3).view(), &params);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let err = gru_cell_step(Array1::zeros(2).view(), Array1::zeros(3).view(), &params);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
