//! Bias-corrected Adam, kept pure: a step maps (params, grads, state) to a
//! fresh (params, state) pair.

use ndarray::ArrayD;

use crate::error::{Error, Result};

use super::{Gradients, ModelParameters};

/// Optimizer moments congruent to one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<ArrayD<f64>>,
    second_moment: Vec<ArrayD<f64>>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Fresh zeroed moments for the given parameters, with the usual
    /// constants (0.9, 0.999, 1e-8).
    pub fn new(params: &ModelParameters) -> AdamState {
        let zeros: Vec<ArrayD<f64>> = params
            .layers()
            .iter()
            .map(|l| ArrayD::zeros(l.values.raw_dim()))
            .collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update. Increments the step count by exactly 1.
pub fn adam_step(
    params: &ModelParameters,
    grads: &Gradients,
    state: &AdamState,
    learning_rate: f64,
) -> Result<(ModelParameters, AdamState)> {
    grads.check_finite()?;
    if grads.layers().len() != params.layers().len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step".into(),
            expected: format!("{} gradient tensors", params.layers().len()),
            actual: format!("{}", grads.layers().len()),
        });
    }
    for (g, p) in grads.layers().iter().zip(params.layers()) {
        if g.values.shape() != p.values.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("adam_step: layer {}", p.name),
                expected: format!("{:?}", p.values.shape()),
                actual: format!("{:?}", g.values.shape()),
            });
        }
    }

    let t = state.step_count + 1;
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);

    let mut new_first = Vec::with_capacity(params.layers().len());
    let mut new_second = Vec::with_capacity(params.layers().len());
    let mut new_values = Vec::with_capacity(params.layers().len());

    for (idx, (p, g)) in params.layers().iter().zip(grads.layers()).enumerate() {
        let m = &state.first_moment[idx] * state.beta1 + &g.values * (1.0 - state.beta1);
        let v = &state.second_moment[idx] * state.beta2
            + &(&g.values * &g.values) * (1.0 - state.beta2);
        let mut updated = p.values.clone();
        ndarray::Zip::from(&mut updated)
            .and(&m)
            .and(&v)
            .for_each(|w, &m_i, &v_i| {
                let m_hat = m_i / bias1;
                let v_hat = v_i / bias2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
            });
        new_first.push(m);
        new_second.push(v);
        new_values.push(updated);
    }

    let new_params = params.with_values(new_values);
    let new_state = AdamState {
        first_moment: new_first,
        second_moment: new_second,
        step_count: t,
        ..*state
    };
    Ok((new_params, new_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqnet::{init_parameters, ArchitectureSpec, CellKind, NamedTensor};

    fn tiny_params() -> ModelParameters {
        let arch = ArchitectureSpec {
            cell_kind: CellKind::Rnn,
            embed_dim: 2,
            recurrent_units: 2,
            dense_units: 2,
            num_classes: 3,
            dropout_rate: 0.0,
            max_seq_len: 2,
        };
        init_parameters(&arch, 1).unwrap()
    }

    fn grads_like(params: &ModelParameters, fill: f64) -> Gradients {
        Gradients::new(
            params
                .layers()
                .iter()
                .map(|l| NamedTensor {
                    name: l.name.clone(),
                    values: ArrayD::from_elem(l.values.raw_dim(), fill),
                })
                .collect(),
        )
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let params = tiny_params();
        let state = AdamState::new(&params);
        let (updated, state) = adam_step(&params, &grads_like(&params, 0.0), &state, 0.001).unwrap();
        assert_eq!(updated, params);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // w=1, g=1, fresh state, lr=0.001 → w' = 1 − 0.001·(1/(1+1e-8))
        let params = tiny_params();
        let ones: Vec<ArrayD<f64>> = params
            .layers()
            .iter()
            .map(|l| ArrayD::from_elem(l.values.raw_dim(), 1.0))
            .collect();
        let params = params.with_values(ones);
        let state = AdamState::new(&params);
        let (updated, _) = adam_step(&params, &grads_like(&params, 1.0), &state, 0.001).unwrap();
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8));
        for layer in updated.layers() {
            for &w in layer.values.iter() {
                assert!((w - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_step_is_pure() {
        let params = tiny_params();
        let state = AdamState::new(&params);
        let grads = grads_like(&params, 0.3);
        let a = adam_step(&params, &grads, &state, 0.01).unwrap();
        let b = adam_step(&params, &grads, &state, 0.01).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let params = tiny_params();
        let state = AdamState::new(&params);
        let grads = grads_like(&params, f64::NAN);
        assert!(matches!(
            adam_step(&params, &grads, &state, 0.001),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn step_count_increments_by_one() {
        let params = tiny_params();
        let mut state = AdamState::new(&params);
        let grads = grads_like(&params, 0.1);
        let mut current = params;
        for expected in 1..=3 {
            let (p, s) = adam_step(&current, &grads, &state, 0.001).unwrap();
            assert_eq!(s.step_count(), expected);
            current = p;
            state = s;
        }
    }
}
