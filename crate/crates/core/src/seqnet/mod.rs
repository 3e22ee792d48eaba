//! Minimal sequence-model engine: frozen embedding lookup, recurrent cells
//! (RNN/GRU/LSTM), dense layers, dropout, sigmoid head, loss, analytic
//! gradients, and Adam. Everything needed to run one local training epoch.
//!
//! All operations are pure functions of explicit inputs plus a passed-in
//! seed; values are safe to move between threads.

mod adam;
mod backward;
mod cells;
mod forward;
mod train;

pub use adam::{adam_step, AdamState};
pub use backward::loss_and_gradients;
pub use cells::{gru_cell_step, lstm_cell_step, rnn_cell_step};
pub use forward::{forward, ActivationCache, EncodedBatch, ForwardMode};
pub use train::{argmax_row, predict, steps_per_epoch, train_local_epoch, LocalTrainConfig};

use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Recurrent cell choices. Gate tensors are packed column-wise per cell:
/// GRU order is update/reset/candidate, LSTM order is input/forget/cell/output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<CellKind> {
        match s.to_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::config("cell", format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Model hyperparameters. The parameter layout is a pure function of this
/// struct: same spec, same layer names and shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub cell_kind: CellKind,
    pub embed_dim: usize,
    pub recurrent_units: usize,
    pub dense_units: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
}

impl ArchitectureSpec {
    /// The architecture actually used in the experiments: 100-d embeddings,
    /// 400 recurrent units, a 300-unit dense layer, 3 classes, dropout 0.25,
    /// sequences padded to 100 tokens.
    pub fn new(cell_kind: CellKind) -> ArchitectureSpec {
        ArchitectureSpec {
            cell_kind,
            embed_dim: 100,
            recurrent_units: 400,
            dense_units: 300,
            num_classes: 3,
            dropout_rate: 0.25,
            max_seq_len: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("recurrent_units", self.recurrent_units),
            ("dense_units", self.dense_units),
            ("num_classes", self.num_classes),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArchitecture(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArchitecture(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Total trainable scalar count (the embedding is frozen and excluded).
    pub fn parameter_count(&self) -> usize {
        layer_layout(self)
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub values: ArrayD<f64>,
}

/// Layer order and shapes implied by an architecture. Index positions are
/// fixed; accessors on [`ModelParameters`] rely on them.
pub(crate) fn layer_layout(arch: &ArchitectureSpec) -> Vec<(&'static str, Vec<usize>)> {
    let gates = arch.cell_kind.gate_count();
    let units = arch.recurrent_units;
    vec![
        ("recurrent.w_input", vec![arch.embed_dim, gates * units]),
        ("recurrent.w_hidden", vec![units, gates * units]),
        ("recurrent.bias", vec![gates * units]),
        ("dense.weight", vec![units, arch.dense_units]),
        ("dense.bias", vec![arch.dense_units]),
        ("head.weight", vec![arch.dense_units, arch.num_classes]),
        ("head.bias", vec![arch.num_classes]),
    ]
}

const IDX_W_INPUT: usize = 0;
const IDX_W_HIDDEN: usize = 1;
const IDX_BIAS: usize = 2;
const IDX_DENSE_W: usize = 3;
const IDX_DENSE_B: usize = 4;
const IDX_HEAD_W: usize = 5;
const IDX_HEAD_B: usize = 6;

pub(crate) fn view2(values: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    values
        .view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 tensor")
}

pub(crate) fn view1(values: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    values
        .view()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 tensor")
}

/// The ordered, named set of trainable tensors for one architecture.
/// Excludes the embedding matrix, which is never trained or transferred.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    arch: ArchitectureSpec,
    layers: Vec<NamedTensor>,
}

impl ModelParameters {
    /// Assembles parameters from explicit layers, validating names and
    /// shapes against the layout the architecture implies.
    pub fn from_layers(arch: ArchitectureSpec, layers: Vec<NamedTensor>) -> Result<ModelParameters> {
        arch.validate()?;
        let layout = layer_layout(&arch);
        if layers.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} layers, got {}",
                layout.len(),
                layers.len()
            )));
        }
        for (tensor, (name, shape)) in layers.iter().zip(&layout) {
            if tensor.name != *name {
                return Err(Error::LayoutMismatch(format!(
                    "expected layer {name:?}, got {:?}",
                    tensor.name
                )));
            }
            if tensor.values.shape() != shape.as_slice() {
                return Err(Error::LayoutMismatch(format!(
                    "layer {name:?}: expected shape {shape:?}, got {:?}",
                    tensor.values.shape()
                )));
            }
        }
        Ok(ModelParameters { arch, layers })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[NamedTensor] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn same_layout(&self, other: &ModelParameters) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.values.shape() == b.values.shape())
    }

    pub fn check_finite(&self) -> Result<()> {
        for layer in &self.layers {
            if !layer.values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Replaces layer values wholesale; used by the optimizer and FedAvg.
    pub(crate) fn with_values(&self, values: Vec<ArrayD<f64>>) -> ModelParameters {
        debug_assert_eq!(values.len(), self.layers.len());
        let layers = self
            .layers
            .iter()
            .zip(values)
            .map(|(l, v)| {
                debug_assert_eq!(l.values.shape(), v.shape());
                NamedTensor {
                    name: l.name.clone(),
                    values: v,
                }
            })
            .collect();
        ModelParameters {
            arch: self.arch,
            layers,
        }
    }

    pub(crate) fn w_input(&self) -> ArrayView2<'_, f64> {
        view2(&self.layers[IDX_W_INPUT].values)
    }

    pub(crate) fn w_hidden(&self) -> ArrayView2<'_, f64> {
        view2(&self.layers[IDX_W_HIDDEN].values)
    }

    pub(crate) fn bias(&self) -> ArrayView1<'_, f64> {
        view1(&self.layers[IDX_BIAS].values)
    }

    pub(crate) fn dense_w(&self) -> ArrayView2<'_, f64> {
        view2(&self.layers[IDX_DENSE_W].values)
    }

    pub(crate) fn dense_b(&self) -> ArrayView1<'_, f64> {
        view1(&self.layers[IDX_DENSE_B].values)
    }

    pub(crate) fn head_w(&self) -> ArrayView2<'_, f64> {
        view2(&self.layers[IDX_HEAD_W].values)
    }

    pub(crate) fn head_b(&self) -> ArrayView1<'_, f64> {
        view1(&self.layers[IDX_HEAD_B].values)
    }
}

/// Gradient tensors congruent to a parameter set, in the same layer order.
/// Contains no entry for the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<NamedTensor>,
}

impl Gradients {
    pub(crate) fn new(layers: Vec<NamedTensor>) -> Gradients {
        Gradients { layers }
    }

    pub fn layers(&self) -> &[NamedTensor] {
        &self.layers
    }

    pub fn check_finite(&self) -> Result<()> {
        for layer in &self.layers {
            if !layer.values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Draws each weight matrix from its Glorot-uniform range and zeroes biases.
/// Deterministic for a given (arch, seed): each layer has its own derived
/// ChaCha stream, filled in row-major order.
pub fn init_parameters(arch: &ArchitectureSpec, seed: u64) -> Result<ModelParameters> {
    arch.validate()?;
    let layers = layer_layout(arch)
        .into_iter()
        .enumerate()
        .map(|(idx, (name, shape))| {
            let values = if shape.len() == 1 {
                ArrayD::zeros(shape)
            } else {
                let (rows, cols) = (shape[0], shape[1]);
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = rng::stream(&[seed, idx as u64]);
                ArrayD::from_shape_fn(shape, |_| rng.random_range(-limit..=limit))
            };
            NamedTensor {
                name: name.to_owned(),
                values,
            }
        })
        .collect();
    Ok(ModelParameters {
        arch: *arch,
        layers,
    })
}
