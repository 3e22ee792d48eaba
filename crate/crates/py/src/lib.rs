//! Python bindings: the tokenizer/vocabulary pipeline, the synthetic corpus
//! generator, the experiment runners, and a classifier wrapper around a
//! saved model. Round records come back as plain dicts.
//!
//! Build with `cargo build -p fedtext-py --release`, then import the
//! produced cdylib as `fedtext_py` (see python/smoke_test.py).

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use fedtext_core::config::ExperimentConfig;
use fedtext_core::error::Error;
use fedtext_core::experiment;
use fedtext_core::seqnet::{ArchitectureSpec, CellKind, ModelParameters};
use fedtext_core::synth::{self, SynthSpec};
use fedtext_core::textproc;
use fedtext_core::transport::deserialize_params;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Parses a JSON string with Python's own json module, so callers get
/// ordinary dicts and lists.
fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn load_config(path: &str, seed: Option<u64>, out: Option<String>) -> PyResult<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).map_err(to_py_err)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = PathBuf::from(out);
    }
    Ok(config)
}

/// Lowercase, whitespace-split, edge punctuation stripped.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    textproc::tokenize(text)
}

/// Trainable parameter count of the default architecture for a cell kind
/// ("rnn", "gru", or "lstm").
#[pyfunction]
fn parameter_count(cell: &str) -> PyResult<usize> {
    let kind: CellKind = cell.parse().map_err(to_py_err)?;
    Ok(ArchitectureSpec::new(kind).parameter_count())
}

/// Shared token → id map with PAD=0 and UNK=1.
#[pyclass]
struct Vocabulary {
    inner: textproc::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    /// Builds a vocabulary from texts, ranked by token frequency.
    #[staticmethod]
    #[pyo3(signature = (texts, max_size = 20_000))]
    fn build(texts: Vec<String>, max_size: usize) -> Vocabulary {
        Vocabulary {
            inner: textproc::build_vocab(&texts, max_size),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn id_of(&self, token: &str) -> Option<usize> {
        self.inner.id_of(token)
    }

    fn token_of(&self, id: usize) -> Option<String> {
        self.inner.token_of(id).map(str::to_owned)
    }

    /// Encodes and pads a text to exactly `max_seq_len` token ids.
    #[pyo3(signature = (text, max_seq_len = 100))]
    fn encode(&self, text: &str, max_seq_len: usize) -> Vec<usize> {
        textproc::encode_and_pad(text, &self.inner, max_seq_len)
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary(len={})", self.inner.len())
    }
}

/// Writes train.csv, test.csv, and embeddings.txt under `out_dir` and
/// returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, per_class = 200, test_per_class = None, vocab_size = 120, seed = 0))]
fn generate_synthetic_corpus(
    out_dir: &str,
    per_class: usize,
    test_per_class: Option<usize>,
    vocab_size: usize,
    seed: u64,
) -> PyResult<(String, String, String)> {
    let spec = SynthSpec {
        per_class_train: per_class,
        per_class_test: test_per_class.unwrap_or(per_class.div_ceil(2)),
        vocab_size,
        seed,
    };
    let paths = synth::generate_synthetic_corpus(&spec, out_dir).map_err(to_py_err)?;
    Ok((
        paths.train_csv.display().to_string(),
        paths.test_csv.display().to_string(),
        paths.embeddings.display().to_string(),
    ))
}

/// Runs the experiment described by a config file and returns the round
/// records as a list of dicts. Artifacts are written to the output
/// directory as usual.
#[pyfunction]
#[pyo3(signature = (config_path, seed = None, out = None, quiet = true))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_path: &str,
    seed: Option<u64>,
    out: Option<String>,
    quiet: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = load_config(config_path, seed, out)?;
    let output = experiment::run_experiment(&config, quiet).map_err(to_py_err)?;
    let json = serde_json::to_string(&output.records)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_loads(py, &json)
}

/// Runs the tokenizer ablation and returns
/// {"common": [records], "per_client": [records]}.
#[pyfunction]
#[pyo3(signature = (config_path, seed = None, out = None, quiet = true))]
fn run_tokenizer_ablation<'py>(
    py: Python<'py>,
    config_path: &str,
    seed: Option<u64>,
    out: Option<String>,
    quiet: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = load_config(config_path, seed, out)?;
    let output = experiment::run_tokenizer_ablation(&config, quiet).map_err(to_py_err)?;
    let json = serde_json::json!({
        "common": output.common,
        "per_client": output.per_client,
    });
    json_loads(py, &json.to_string())
}

/// A saved model plus the tokenizer assets needed to classify raw text.
#[pyclass]
struct Classifier {
    params: ModelParameters,
    vocab: textproc::Vocabulary,
    embedding: std::sync::Arc<textproc::EmbeddingMatrix>,
}

#[pymethods]
impl Classifier {
    /// Loads a serialized model blob with the tokenizer/embedding setup of
    /// the given config.
    #[new]
    fn new(model_path: &str, config_path: &str) -> PyResult<Classifier> {
        let config = ExperimentConfig::load(config_path).map_err(to_py_err)?;
        let assets = experiment::prepare_text_assets(&config).map_err(to_py_err)?;
        let arch = config.arch().map_err(to_py_err)?;
        let bytes = std::fs::read(model_path)
            .map_err(|e| PyValueError::new_err(format!("{model_path}: {e}")))?;
        let params = deserialize_params(&bytes, &arch).map_err(to_py_err)?;
        Ok(Classifier {
            params,
            vocab: assets.vocab,
            embedding: assets.embedding,
        })
    }

    /// Returns (class index, class name).
    fn predict(&self, text: &str) -> PyResult<(usize, String)> {
        let ids = textproc::encode_and_pad(text, &self.vocab, self.params.arch().max_seq_len);
        let class = fedtext_core::seqnet::predict(&self.params, &self.embedding, &ids)
            .map_err(to_py_err)?;
        Ok((class, textproc::CLASS_NAMES[class].to_owned()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Classifier(cell={}, params={})",
            self.params.arch().cell_kind.name(),
            self.params.parameter_count()
        )
    }
}

#[pymodule]
fn fedtext_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_tokenizer_ablation, m)?)?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Classifier>()?;
    Ok(())
}
