//! Experiment harness: turns a validated config into prepared data, runs
//! centralized or federated training, and writes the output artifacts
//! (rounds.jsonl, metrics.csv, ledger.csv, profile.csv, final_model.bin).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use crate::config::{
    AblationSection, BackendKind, ExperimentConfig, Mode, TokenizerMode,
};
use crate::datashard::{split_iid, split_noniid, ClientShard, ShardPlan};
use crate::error::{Error, Result};
use crate::flcore::{
    run_centralized, run_federation, ClientData, FederationData, FederationOutcome, RoundRecord,
    WaitParams,
};
use crate::metrics::EvalReport;
use crate::rng;
use crate::seqnet::{forward, EncodedBatch, ForwardMode};
use crate::textproc::{
    build_vocab, encode_and_pad, encode_dataset, load_embeddings, read_labeled_csv,
    EmbeddingMatrix, EncodedSample, LabeledDataset, Vocabulary,
};
use crate::transport::{
    deserialize_params, serialize_params, FilesystemBackend, SocketBackend, Transport,
};

const NOISE_TAG: u64 = 0x401e;

/// Vocabulary and embedding table shared by the server (and, in common
/// tokenizer mode, by every client).
pub struct TextAssets {
    pub vocab: Vocabulary,
    pub embedding: Arc<EmbeddingMatrix>,
    pub coverage: f64,
}

/// Builds the shared vocabulary from the configured corpus (or prebuilt
/// vocab file) and loads the embedding table for it.
pub fn prepare_text_assets(config: &ExperimentConfig) -> Result<TextAssets> {
    let vocab = match (&config.data.tokenizer_corpus, &config.data.vocab) {
        (Some(corpus_path), None) => {
            let texts = read_corpus_texts(corpus_path)?;
            build_vocab(&texts, config.data.vocab_max_size)
        }
        (None, Some(vocab_path)) => {
            let text = fs::read_to_string(vocab_path)?;
            Vocabulary::from_ranked_tokens(
                text.lines().map(str::trim).filter(|l| !l.is_empty()),
                config.data.vocab_max_size,
            )
        }
        _ => {
            return Err(Error::config(
                "data.tokenizer_corpus",
                "exactly one of tokenizer_corpus or vocab must be set",
            ));
        }
    };
    let load = load_embeddings(&config.data.embeddings, &vocab, config.model.embed_dim)?;
    log::info!(
        "vocabulary: {} tokens, embedding coverage {:.1}%",
        vocab.len(),
        load.coverage * 100.0
    );
    Ok(TextAssets {
        vocab,
        embedding: Arc::new(load.matrix),
        coverage: load.coverage,
    })
}

/// A tokenizer corpus is either a labeled CSV (texts are taken from the
/// text column) or a plain text file, one document per line.
fn read_corpus_texts(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let dataset = read_labeled_csv(path)?;
        Ok(dataset.samples.into_iter().map(|s| s.text).collect())
    } else {
        Ok(fs::read_to_string(path)?
            .lines()
            .map(str::to_owned)
            .filter(|l| !l.is_empty())
            .collect())
    }
}

/// Prepared datasets: the (possibly augmented) raw training set, its
/// encoding under the shared vocabulary, and the encoded test set.
pub struct PreparedData {
    pub assets: TextAssets,
    pub raw_train: LabeledDataset,
    pub train: Vec<EncodedSample>,
    pub testset: Vec<EncodedSample>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData> {
    let assets = prepare_text_assets(config)?;
    let mut raw_train = read_labeled_csv(&config.data.train)?;
    if config.augmentation.enabled {
        let before = raw_train.class_counts();
        raw_train = crate::textproc::augment_balance(
            &raw_train,
            &assets.embedding,
            &assets.vocab,
            config.augmentation.substitution_prob,
            config.augmentation.min_similarity,
            config.seed,
        )?;
        log::info!(
            "augmentation: class counts {:?} -> {:?}",
            before,
            raw_train.class_counts()
        );
    }
    let train = encode_dataset(&raw_train, &assets.vocab, config.model.max_seq_len);
    let raw_test = read_labeled_csv(&config.data.test)?;
    let testset = encode_dataset(&raw_test, &assets.vocab, config.model.max_seq_len);
    Ok(PreparedData {
        assets,
        raw_train,
        train,
        testset,
    })
}

fn split_with_plan(
    samples: &[EncodedSample],
    plan: &ShardPlan,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    match plan {
        ShardPlan::Iid => split_iid(samples, n_clients, seed),
        ShardPlan::NonIid(_) => split_noniid(samples, plan, seed),
    }
}

fn noise_words(client_id: usize, spec: &AblationSection) -> Vec<String> {
    (0..spec.noise_tokens_per_client)
        .map(|j| format!("nz{client_id}w{j}"))
        .collect()
}

/// Appends client-specific noise tokens to a text, deterministically per
/// (seed, client, sample).
fn inject_noise(
    text: &str,
    client_id: usize,
    sample_id: usize,
    pool: &[String],
    spec: &AblationSection,
    seed: u64,
) -> String {
    if pool.is_empty() || spec.noise_words_per_text == 0 {
        return text.to_owned();
    }
    let mut rng = rng::stream(&[seed, NOISE_TAG, client_id as u64, sample_id as u64]);
    let mut out = String::from(text);
    for _ in 0..spec.noise_words_per_text {
        out.push(' ');
        out.push_str(&pool[rng.random_range(0..pool.len())]);
    }
    out
}

/// The raw texts (with any ablation noise applied) behind one shard.
fn shard_texts(
    shard: &ClientShard,
    raw_train: &LabeledDataset,
    noise: Option<&AblationSection>,
    seed: u64,
) -> Vec<(usize, String, usize)> {
    let pool = noise
        .map(|spec| noise_words(shard.client_id, spec))
        .unwrap_or_default();
    shard
        .samples
        .iter()
        .map(|s| {
            let text = &raw_train.samples[s.id].text;
            let text = match noise {
                Some(spec) => inject_noise(text, shard.client_id, s.id, &pool, spec, seed),
                None => text.clone(),
            };
            (s.id, text, s.label)
        })
        .collect()
}

fn encode_shard_texts(
    client_id: usize,
    texts: &[(usize, String, usize)],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> ClientShard {
    let samples = texts
        .iter()
        .map(|(id, text, label)| EncodedSample {
            id: *id,
            token_ids: encode_and_pad(text, vocab, max_seq_len),
            label: *label,
        })
        .collect();
    ClientShard::new(client_id, samples)
}

/// Assembles per-round client data. Shard membership always comes from the
/// shared-vocabulary split so both tokenizer modes train on identical text
/// sets; what differs is how each client encodes them.
pub fn build_federation_data(
    config: &ExperimentConfig,
    prepared: &PreparedData,
    tokenizer_mode: TokenizerMode,
    noise: Option<&AblationSection>,
) -> Result<FederationData> {
    let plan = config.shard_plan_spec()?;
    let shards = split_with_plan(
        &prepared.train,
        &plan,
        config.federation.clients,
        config.seed,
    )?;

    let clients = shards
        .iter()
        .map(|shard| {
            let needs_reencode = noise.is_some() || tokenizer_mode == TokenizerMode::PerClient;
            if !needs_reencode {
                return Ok(ClientData {
                    shard: shard.clone(),
                    embedding: Arc::clone(&prepared.assets.embedding),
                });
            }
            let texts = shard_texts(shard, &prepared.raw_train, noise, config.seed);
            match tokenizer_mode {
                TokenizerMode::Common => Ok(ClientData {
                    shard: encode_shard_texts(
                        shard.client_id,
                        &texts,
                        &prepared.assets.vocab,
                        config.model.max_seq_len,
                    ),
                    embedding: Arc::clone(&prepared.assets.embedding),
                }),
                TokenizerMode::PerClient => {
                    let corpus: Vec<&str> = texts.iter().map(|(_, t, _)| t.as_str()).collect();
                    let vocab = build_vocab(&corpus, config.data.vocab_max_size);
                    let load =
                        load_embeddings(&config.data.embeddings, &vocab, config.model.embed_dim)?;
                    log::debug!(
                        "client {} vocabulary: {} tokens, coverage {:.1}%",
                        shard.client_id,
                        vocab.len(),
                        load.coverage * 100.0
                    );
                    Ok(ClientData {
                        shard: encode_shard_texts(
                            shard.client_id,
                            &texts,
                            &vocab,
                            config.model.max_seq_len,
                        ),
                        embedding: Arc::new(load.matrix),
                    })
                }
            }
        })
        .collect::<Result<Vec<ClientData>>>()?;

    Ok(FederationData {
        clients,
        testset: prepared.testset.clone(),
        server_embedding: Arc::clone(&prepared.assets.embedding),
    })
}

pub fn build_transport(config: &ExperimentConfig) -> Result<Transport> {
    match config.transport.backend {
        BackendKind::InMemory => Ok(Transport::in_memory()),
        BackendKind::Filesystem => {
            let root = config.transport.root.as_ref().ok_or_else(|| {
                Error::config("transport.root", "required for the filesystem backend")
            })?;
            Ok(Transport::new(Arc::new(FilesystemBackend::new(root)?)))
        }
        BackendKind::Socket => {
            let addr = config.transport.address.as_ref().ok_or_else(|| {
                Error::config("transport.address", "required for the socket backend")
            })?;
            Ok(Transport::new(Arc::new(SocketBackend::new(addr.clone()))))
        }
    }
}

/// Everything a finished experiment leaves behind.
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub out_dir: PathBuf,
}

fn write_rounds_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("round records serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::from("round,model,accuracy,macro_precision,macro_recall,n_samples\n");
    let mut push_row = |round: usize, model: &str, report: &EvalReport| {
        out.push_str(&format!(
            "{round},{model},{:.6},{:.6},{:.6},{}\n",
            report.accuracy, report.macro_precision, report.macro_recall, report.n_samples
        ));
    };
    for record in records {
        push_row(record.round, "global", &record.global);
        for local in &record.locals {
            push_row(record.round, &format!("client_{}", local.client), &local.report);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_ledger_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::from(
        "round,endpoint,transmitted_bytes,received_bytes,poll_count,poll_overhead_bytes\n",
    );
    for record in records {
        for b in &record.bytes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                record.round,
                b.endpoint,
                b.transmitted_bytes,
                b.received_bytes,
                b.poll_count,
                b.poll_overhead_bytes
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_profile_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out =
        String::from("round,training_ms,overhead_ms,upload_ms,download_ms,inference_us_per_sample\n");
    for record in records {
        let t = &record.timing;
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            record.round,
            t.training_ms,
            t.overhead_ms,
            t.upload_ms,
            t.download_ms,
            t.inference_us_per_sample
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_artifacts(out_dir: &Path, outcome: &FederationOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_rounds_jsonl(&out_dir.join("rounds.jsonl"), &outcome.records)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &outcome.records)?;
    write_ledger_csv(&out_dir.join("ledger.csv"), &outcome.records)?;
    write_profile_csv(&out_dir.join("profile.csv"), &outcome.records)?;
    fs::write(
        out_dir.join("final_model.bin"),
        serialize_params(&outcome.final_global)?,
    )?;
    Ok(())
}

/// Runs the configured experiment and writes all artifacts. Prints one
/// summary line per round unless `quiet`.
pub fn run_experiment(config: &ExperimentConfig, quiet: bool) -> Result<ExperimentOutput> {
    config.validate()?;
    let prepared = prepare(config)?;
    let outcome = match config.mode {
        Mode::Centralized => {
            let fed = config.federation_config_for_centralized()?;
            run_centralized(&fed, &prepared.train, &prepared.testset, &prepared.assets.embedding)?
        }
        Mode::Federated => {
            let fed = config.federation_config()?;
            let data = build_federation_data(config, &prepared, config.tokenizer.mode, None)?;
            let transport = build_transport(config)?;
            run_federation(&fed, &data, &transport, !config.transport.external_clients)?
        }
    };
    if !quiet {
        for record in &outcome.records {
            println!("{}", record.summary());
        }
    }
    write_artifacts(&config.output_dir, &outcome)?;
    Ok(ExperimentOutput {
        records: outcome.records,
        out_dir: config.output_dir.clone(),
    })
}

/// Paired per-round accuracy series from the tokenizer ablation.
pub struct AblationOutput {
    pub common: Vec<RoundRecord>,
    pub per_client: Vec<RoundRecord>,
    pub out_dir: PathBuf,
}

/// Runs the same federation twice — once with the shared tokenizer, once
/// with client-local tokenizers — and writes the paired accuracy series.
/// Both arms see identical shard membership, seeds, and (optional) injected
/// vocabulary noise; only the tokenization differs. Always uses the
/// in-memory transport so the arms cannot collide on blob keys.
pub fn run_tokenizer_ablation(config: &ExperimentConfig, quiet: bool) -> Result<AblationOutput> {
    if config.mode != Mode::Federated {
        return Err(Error::config("mode", "the tokenizer ablation is federated-only"));
    }
    config.validate()?;
    let prepared = prepare(config)?;
    let fed = config.federation_config()?;
    let noise = config.ablation.as_ref();

    let arm = |mode: TokenizerMode| -> Result<FederationOutcome> {
        let data = build_federation_data(config, &prepared, mode, noise)?;
        let transport = Transport::in_memory();
        run_federation(&fed, &data, &transport, true)
    };
    let common = arm(TokenizerMode::Common)?;
    let per_client = arm(TokenizerMode::PerClient)?;

    fs::create_dir_all(&config.output_dir)?;
    let common_dir = config.output_dir.join("common");
    let per_client_dir = config.output_dir.join("per_client");
    write_artifacts(&common_dir, &common)?;
    write_artifacts(&per_client_dir, &per_client)?;

    let mut csv = String::from("round,common_accuracy,per_client_accuracy\n");
    for (c, p) in common.records.iter().zip(&per_client.records) {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            c.round, c.global.accuracy, p.global.accuracy
        ));
        if !quiet {
            println!(
                "round {:>3}: common {:.4} vs per-client {:.4}",
                c.round, c.global.accuracy, p.global.accuracy
            );
        }
    }
    fs::write(config.output_dir.join("ablation.csv"), csv)?;

    Ok(AblationOutput {
        common: common.records,
        per_client: per_client.records,
        out_dir: config.output_dir.clone(),
    })
}

/// The client half of a networked federation: prepares the same data the
/// server does, takes its own shard, and participates in every round over
/// the socket transport.
pub fn run_client_agent(
    config: &ExperimentConfig,
    client_id: usize,
    addr_override: Option<&str>,
) -> Result<()> {
    config.validate()?;
    let fed = config.federation_config()?;
    if client_id >= fed.total_clients {
        return Err(Error::config(
            "client_id",
            format!("must be below {}", fed.total_clients),
        ));
    }
    let prepared = prepare(config)?;
    let data = build_federation_data(config, &prepared, config.tokenizer.mode, None)?;
    let client = &data.clients[client_id];

    let transport = match addr_override {
        Some(addr) => Transport::new(Arc::new(SocketBackend::new(addr.to_owned()))),
        None => build_transport(config)?,
    };
    let wait = WaitParams {
        timeout: std::time::Duration::from_secs(fed.barrier_timeout_secs),
        interval: std::time::Duration::from_millis(fed.poll_interval_ms.max(1)),
    };

    for round in 1..=fed.total_rounds {
        if fed.dropout_client == Some(client_id) {
            log::info!("client {client_id}: configured as the dropped client; idle");
            return Ok(());
        }
        crate::flcore::client_round_step(
            &transport,
            client_id,
            round,
            client,
            &fed,
            Some(wait),
            None,
        )?;
        log::info!("client {client_id}: finished round {round}");
    }
    Ok(())
}

/// Loads a serialized model and classifies one text. Returns the class
/// index, its name, and the three sigmoid scores.
pub fn predict_text(
    config: &ExperimentConfig,
    model_path: &Path,
    text: &str,
) -> Result<(usize, &'static str, Vec<f64>)> {
    let assets = prepare_text_assets(config)?;
    let arch = config.arch()?;
    let bytes = fs::read(model_path)?;
    let params = deserialize_params(&bytes, &arch)?;
    let ids = encode_and_pad(text, &assets.vocab, arch.max_seq_len);
    let sample = EncodedSample { id: 0, token_ids: ids, label: 0 };
    let batch = EncodedBatch::from_samples(&[&sample], arch.num_classes)?;
    let (scores, _) = forward(&params, &assets.embedding, &batch, ForwardMode::Eval)?;
    let scores: Vec<f64> = scores.row(0).to_vec();
    let class = crate::seqnet::argmax_row(&scores);
    Ok((class, crate::textproc::CLASS_NAMES[class], scores))
}

impl ExperimentConfig {
    /// Centralized runs reuse the federation hyperparameters but skip the
    /// client-count constraints.
    fn federation_config_for_centralized(&self) -> Result<crate::flcore::FederationConfig> {
        Ok(crate::flcore::FederationConfig {
            total_rounds: self.federation.rounds,
            total_clients: 1,
            participants_per_round: 1,
            learning_rate: self.federation.learning_rate,
            batch_size: self.federation.batch_size,
            local_epochs: self.federation.local_epochs,
            arch: self.arch()?,
            dropout_client: None,
            seed: self.seed,
            barrier_timeout_secs: self.federation.barrier_timeout_secs,
            poll_interval_ms: self.federation.poll_interval_ms,
        })
    }
}
