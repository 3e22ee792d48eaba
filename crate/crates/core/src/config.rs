//! Experiment configuration: a TOML document with a fixed schema. Unknown
//! keys are rejected, and validation names the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flcore::FederationConfig;
use crate::seqnet::{ArchitectureSpec, CellKind};
use crate::textproc::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    Federated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// One vocabulary built from the shared corpus, used by everyone.
    Common,
    /// Every client builds its own vocabulary from its own shard.
    PerClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    InMemory,
    Filesystem,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub test: PathBuf,
    pub embeddings: PathBuf,
    /// Corpus the shared tokenizer is built from: a labeled CSV or a plain
    /// text file (one document per line). Exactly one of `tokenizer_corpus`
    /// and `vocab` must be set.
    pub tokenizer_corpus: Option<PathBuf>,
    /// Prebuilt vocabulary: one token per line, in rank order.
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_vocab_max_size")]
    pub vocab_max_size: usize,
}

fn default_vocab_max_size() -> usize {
    crate::textproc::default_vocab_cap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub cell: String,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_recurrent_units")]
    pub recurrent_units: usize,
    #[serde(default = "default_dense_units")]
    pub dense_units: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_embed_dim() -> usize {
    100
}
fn default_recurrent_units() -> usize {
    400
}
fn default_dense_units() -> usize {
    300
}
fn default_num_classes() -> usize {
    NUM_CLASSES
}
fn default_dropout_rate() -> f64 {
    0.25
}
fn default_max_seq_len() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Defaults to all clients, or all but one when `dropout_client` is set.
    pub participants_per_round: Option<usize>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    pub dropout_client: Option<usize>,
    /// "iid", "table1", or "matrix" (with `shard_matrix` set).
    #[serde(default = "default_shard_plan")]
    pub shard_plan: String,
    /// Clients × classes proportions; columns must each sum to 1.
    pub shard_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_barrier_timeout_secs")]
    pub barrier_timeout_secs: u64,
    #[serde(default = "default_poll_interval_ms")]
    pub poll_interval_ms: u64,
}

fn default_rounds() -> usize {
    10
}
fn default_clients() -> usize {
    5
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    32
}
fn default_local_epochs() -> usize {
    1
}
fn default_shard_plan() -> String {
    "iid".to_owned()
}
fn default_barrier_timeout_secs() -> u64 {
    300
}
fn default_poll_interval_ms() -> u64 {
    200
}

impl Default for FederationSection {
    fn default() -> FederationSection {
        FederationSection {
            rounds: default_rounds(),
            clients: default_clients(),
            participants_per_round: None,
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            local_epochs: default_local_epochs(),
            dropout_client: None,
            shard_plan: default_shard_plan(),
            shard_matrix: None,
            barrier_timeout_secs: default_barrier_timeout_secs(),
            poll_interval_ms: default_poll_interval_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    #[serde(default = "default_tokenizer_mode")]
    pub mode: TokenizerMode,
}

fn default_tokenizer_mode() -> TokenizerMode {
    TokenizerMode::Common
}

impl Default for TokenizerSection {
    fn default() -> TokenizerSection {
        TokenizerSection {
            mode: default_tokenizer_mode(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_substitution_prob")]
    pub substitution_prob: f64,
    #[serde(default = "default_min_similarity")]
    pub min_similarity: f64,
}

fn default_substitution_prob() -> f64 {
    0.15
}
fn default_min_similarity() -> f64 {
    0.6
}

impl Default for AugmentationSection {
    fn default() -> AugmentationSection {
        AugmentationSection {
            enabled: false,
            substitution_prob: default_substitution_prob(),
            min_similarity: default_min_similarity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    /// Filesystem backend root.
    pub root: Option<PathBuf>,
    /// Socket backend address, host:port.
    pub address: Option<String>,
    /// When true, `run` executes only the server side and waits for
    /// externally launched client agents.
    #[serde(default)]
    pub external_clients: bool,
}

fn default_backend() -> BackendKind {
    BackendKind::InMemory
}

impl Default for TransportSection {
    fn default() -> TransportSection {
        TransportSection {
            backend: default_backend(),
            root: None,
            address: None,
            external_clients: false,
        }
    }
}

/// Client-disjoint vocabulary noise for the tokenizer ablation: every text
/// in client k's shard gets `words_per_text` extra tokens drawn from a pool
/// of `tokens_per_client` words unique to that client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default)]
    pub noise_tokens_per_client: usize,
    #[serde(default)]
    pub noise_words_per_text: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    #[serde(default)]
    pub transport: TransportSection,
    pub ablation: Option<AblationSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "(toml)".into(),
            message: e.to_string(),
        })
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::Config {
            field: "config".into(),
            message: format!("{}: {e}", path.as_ref().display()),
        })?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn arch(&self) -> Result<ArchitectureSpec> {
        let cell_kind: CellKind = self.model.cell.parse()?;
        let arch = ArchitectureSpec {
            cell_kind,
            embed_dim: self.model.embed_dim,
            recurrent_units: self.model.recurrent_units,
            dense_units: self.model.dense_units,
            num_classes: self.model.num_classes,
            dropout_rate: self.model.dropout_rate,
            max_seq_len: self.model.max_seq_len,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Participants per round after defaulting: all clients, or all but one
    /// when a dropout client is configured.
    pub fn participants(&self) -> usize {
        self.federation.participants_per_round.unwrap_or_else(|| {
            if self.federation.dropout_client.is_some() {
                self.federation.clients.saturating_sub(1)
            } else {
                self.federation.clients
            }
        })
    }

    pub fn federation_config(&self) -> Result<FederationConfig> {
        let config = FederationConfig {
            total_rounds: self.federation.rounds,
            total_clients: self.federation.clients,
            participants_per_round: self.participants(),
            learning_rate: self.federation.learning_rate,
            batch_size: self.federation.batch_size,
            local_epochs: self.federation.local_epochs,
            arch: self.arch()?,
            dropout_client: self.federation.dropout_client,
            seed: self.seed,
            barrier_timeout_secs: self.federation.barrier_timeout_secs,
            poll_interval_ms: self.federation.poll_interval_ms,
        };
        config.validate()?;
        Ok(config)
    }

    fn require_path(field: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::config(field, format!("{} does not exist", path.display())));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::require_path("data.train", &self.data.train)?;
        Self::require_path("data.test", &self.data.test)?;
        Self::require_path("data.embeddings", &self.data.embeddings)?;
        match (&self.data.tokenizer_corpus, &self.data.vocab) {
            (Some(corpus), None) => Self::require_path("data.tokenizer_corpus", corpus)?,
            (None, Some(vocab)) => Self::require_path("data.vocab", vocab)?,
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "data.tokenizer_corpus",
                    "set either tokenizer_corpus or vocab, not both",
                ));
            }
            (None, None) => {
                return Err(Error::config(
                    "data.tokenizer_corpus",
                    "one of tokenizer_corpus or vocab is required",
                ));
            }
        }
        if self.data.vocab_max_size < 3 {
            return Err(Error::config("data.vocab_max_size", "must be at least 3"));
        }
        if self.model.num_classes != NUM_CLASSES {
            return Err(Error::config(
                "model.num_classes",
                format!("this harness is fixed at {NUM_CLASSES} classes"),
            ));
        }
        self.arch()?;

        if self.mode == Mode::Centralized && self.tokenizer.mode == TokenizerMode::PerClient {
            return Err(Error::config(
                "tokenizer.mode",
                "per_client only makes sense in federated mode",
            ));
        }
        if self.mode == Mode::Federated {
            self.federation_config()?;
            self.shard_plan_spec()?;
        }

        if self.augmentation.enabled {
            if !(0.0..=1.0).contains(&self.augmentation.substitution_prob) {
                return Err(Error::config(
                    "augmentation.substitution_prob",
                    "must be in [0, 1]",
                ));
            }
            if !(-1.0..=1.0).contains(&self.augmentation.min_similarity) {
                return Err(Error::config(
                    "augmentation.min_similarity",
                    "must be a cosine similarity in [-1, 1]",
                ));
            }
        }

        match self.transport.backend {
            BackendKind::Filesystem if self.transport.root.is_none() => {
                return Err(Error::config(
                    "transport.root",
                    "required for the filesystem backend",
                ));
            }
            BackendKind::Socket if self.transport.address.is_none() => {
                return Err(Error::config(
                    "transport.address",
                    "required for the socket backend",
                ));
            }
            BackendKind::InMemory if self.transport.external_clients => {
                return Err(Error::config(
                    "transport.external_clients",
                    "external clients cannot reach an in-memory backend",
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// The shard plan named by the config (not yet sized to a dataset).
    pub fn shard_plan_spec(&self) -> Result<crate::datashard::ShardPlan> {
        use crate::datashard::ShardPlan;
        match self.federation.shard_plan.as_str() {
            "iid" => Ok(ShardPlan::Iid),
            "table1" => {
                let plan = ShardPlan::table1();
                if self.federation.clients != plan.client_count().unwrap() {
                    return Err(Error::config(
                        "federation.clients",
                        "the table1 plan is defined for exactly 5 clients",
                    ));
                }
                Ok(plan)
            }
            "matrix" => {
                let rows = self.federation.shard_matrix.as_ref().ok_or_else(|| {
                    Error::config("federation.shard_matrix", "required when shard_plan = \"matrix\"")
                })?;
                if rows.len() != self.federation.clients
                    || rows.iter().any(|r| r.len() != NUM_CLASSES)
                {
                    return Err(Error::config(
                        "federation.shard_matrix",
                        format!(
                            "must be {} rows of {} proportions",
                            self.federation.clients, NUM_CLASSES
                        ),
                    ));
                }
                // entries above 1 mean the table is written in percentages
                let percentages = rows.iter().flatten().any(|&v| v > 1.0);
                let scale = if percentages { 0.01 } else { 1.0 };
                let matrix = ndarray::Array2::from_shape_fn(
                    (rows.len(), NUM_CLASSES),
                    |(i, j)| rows[i][j] * scale,
                );
                let plan = ShardPlan::NonIid(matrix);
                plan.validate()?;
                Ok(plan)
            }
            other => Err(Error::config(
                "federation.shard_plan",
                format!("unknown plan {other:?} (expected iid, table1, or matrix)"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_minimal_files(dir: &Path) -> String {
        for name in ["train.csv", "test.csv"] {
            fs::write(dir.join(name), "text,label\nhello there,0\n").unwrap();
        }
        fs::write(dir.join("embeddings.txt"), "hello 0.1 0.2\n").unwrap();
        format!(
            r#"
mode = "federated"
seed = 7

[data]
train = "{dir}/train.csv"
test = "{dir}/test.csv"
embeddings = "{dir}/embeddings.txt"
tokenizer_corpus = "{dir}/train.csv"

[model]
cell = "gru"
"#,
            dir = dir.display()
        )
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let config = ExperimentConfig::from_toml(&text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.federation.rounds, 10);
        assert_eq!(config.federation.clients, 5);
        assert_eq!(config.participants(), 5);
        assert_eq!(config.model.recurrent_units, 400);
        assert_eq!(config.data.vocab_max_size, 20_000);
        assert_eq!(config.tokenizer.mode, TokenizerMode::Common);
        let fed = config.federation_config().unwrap();
        assert!((fed.learning_rate - 0.001).abs() < 1e-12);
        assert_eq!(fed.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = write_minimal_files(dir.path());
        text.push_str("\n[federation]\nround_count = 3\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("round_count"), "{err}");
    }

    #[test]
    fn missing_paths_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let mut config = ExperimentConfig::from_toml(&text).unwrap();
        config.data.train = dir.path().join("absent.csv");
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("data.train"), "{err}");
    }

    #[test]
    fn per_client_tokenizer_requires_federated_mode() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let mut config = ExperimentConfig::from_toml(&text).unwrap();
        config.mode = Mode::Centralized;
        config.tokenizer.mode = TokenizerMode::PerClient;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("tokenizer.mode"), "{err}");
    }

    #[test]
    fn dropout_defaults_participants_to_n_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let mut config = ExperimentConfig::from_toml(&text).unwrap();
        config.federation.dropout_client = Some(2);
        assert_eq!(config.participants(), 4);
        config.validate().unwrap();
    }

    #[test]
    fn shard_plan_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let mut config = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(config.shard_plan_spec().unwrap(), crate::datashard::ShardPlan::Iid);
        config.federation.shard_plan = "table1".into();
        config.shard_plan_spec().unwrap();
        config.federation.shard_plan = "matrix".into();
        assert!(config.shard_plan_spec().is_err());
        config.federation.shard_matrix = Some(vec![vec![1.0, 1.0, 1.0]]);
        config.federation.clients = 1;
        config.shard_plan_spec().unwrap();
        config.federation.shard_plan = "zipf".into();
        assert!(config.shard_plan_spec().is_err());
    }

    #[test]
    fn shard_matrix_accepts_percentage_tables() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let mut config = ExperimentConfig::from_toml(&text).unwrap();
        config.federation.shard_plan = "matrix".into();
        config.federation.clients = 2;
        config.federation.participants_per_round = Some(2);
        config.federation.shard_matrix = Some(vec![
            vec![40.0, 10.0, 70.0],
            vec![60.0, 90.0, 30.0],
        ]);
        let plan = config.shard_plan_spec().unwrap();
        let crate::datashard::ShardPlan::NonIid(matrix) = plan else {
            panic!("expected a proportion matrix");
        };
        assert!((matrix[[0, 0]] - 0.4).abs() < 1e-12);
        assert!((matrix[[1, 1]] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn transport_field_requirements() {
        let dir = tempfile::tempdir().unwrap();
        let text = write_minimal_files(dir.path());
        let mut config = ExperimentConfig::from_toml(&text).unwrap();
        config.transport.backend = BackendKind::Filesystem;
        assert!(config.validate().unwrap_err().to_string().contains("transport.root"));
        config.transport.backend = BackendKind::Socket;
        assert!(config.validate().unwrap_err().to_string().contains("transport.address"));
        config.transport.backend = BackendKind::InMemory;
        config.transport.external_clients = true;
        assert!(config
            .validate()
            .unwrap_err()
            .to_string()
            .contains("external_clients"));
    }
}
