//! Shared tokenizer, vocabulary, padding/encoding, pretrained-embedding
//! ingestion, and embedding-neighbor augmentation.
//!
//! The whole point of keeping these in one place is that every client and the
//! server run the exact same pure functions over the exact same vocabulary,
//! so token ids mean the same thing everywhere.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Reserved id for the padding pseudo-token.
pub const PAD_ID: usize = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Number of target classes.
pub const NUM_CLASSES: usize = 3;

/// Class names in label order 0..2.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["not depressed", "moderately depressed", "severely depressed"];

const DEFAULT_VOCAB_CAP: usize = 20_000;

/// Seed for fallback vectors of words missing from the embedding file.
const FALLBACK_SEED: u64 = 0x7a11_bac4;

/// Lowercases, splits on Unicode whitespace, strips non-alphanumeric
/// characters from token edges, and drops tokens that end up empty.
/// Interior punctuation ("don't", "stop—now") is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Token → id map shared by every participant. Ids are contiguous, with
/// PAD=0 and UNK=1 always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    max_size: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token ranking (ids assigned in
    /// order after PAD/UNK). Tokens beyond the cap are dropped.
    pub fn from_ranked_tokens<I, S>(tokens: I, max_size: usize) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let max_size = max_size.max(2);
        let mut id_to_token = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        let mut token_to_id = HashMap::new();
        token_to_id.insert(PAD_TOKEN.to_owned(), PAD_ID);
        token_to_id.insert(UNK_TOKEN.to_owned(), UNK_ID);
        for token in tokens {
            if id_to_token.len() >= max_size {
                break;
            }
            let token = token.into();
            if token_to_id.contains_key(&token) {
                continue;
            }
            token_to_id.insert(token.clone(), id_to_token.len());
            id_to_token.push(token);
        }
        Vocabulary {
            token_to_id,
            id_to_token,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Real (non-reserved) tokens in id order.
    pub fn words(&self) -> impl Iterator<Item = (usize, &str)> {
        self.id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(id, t)| (id, t.as_str()))
    }
}

/// Ranks tokens by frequency (ties broken by first occurrence) and keeps the
/// top `max_size - 2` after the reserved ids.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Vocabulary {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut next_rank = 0usize;
    for text in corpus {
        for token in tokenize(text.as_ref()) {
            let entry = counts.entry(token).or_insert_with(|| {
                let rank = next_rank;
                next_rank += 1;
                (0, rank)
            });
            entry.0 += 1;
        }
    }
    let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    Vocabulary::from_ranked_tokens(ranked.into_iter().map(|(t, _)| t), max_size)
}

/// Maps tokens to ids (unknown → UNK), truncates to the first `max_seq_len`
/// tokens, and post-pads with PAD so the output length is always exact.
pub fn encode_and_pad(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(text)
        .into_iter()
        .take(max_seq_len)
        .map(|t| vocab.id_of(&t).unwrap_or(UNK_ID))
        .collect();
    ids.resize(max_seq_len, PAD_ID);
    ids
}

/// Frozen id → vector table. Row count always equals the vocabulary size and
/// the PAD row is all zeros. Never mutated after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vectors: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(vectors: Array2<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix { vectors }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }
}

/// Result of ingesting a pretrained embedding file.
#[derive(Debug, Clone)]
pub struct EmbeddingLoad {
    pub matrix: EmbeddingMatrix,
    /// Fraction of real vocabulary words found in the file, in [0, 1].
    pub coverage: f64,
    pub found: usize,
}

/// Deterministic fallback row for a vocabulary entry missing from the
/// embedding file: uniform in [-0.05, 0.05], keyed by row index.
fn fallback_row(id: usize, embed_dim: usize) -> Vec<f64> {
    let mut rng = rng::stream(&[FALLBACK_SEED, id as u64]);
    (0..embed_dim)
        .map(|_| rng.random_range(-0.05..=0.05))
        .collect()
}

/// Reads a word-vector text file (word followed by `embed_dim` decimals per
/// line) and assembles the embedding matrix for `vocab`. Words absent from
/// the file get a seeded fallback row; the PAD row is zeroed.
pub fn load_embeddings<P: AsRef<Path>>(
    path: P,
    vocab: &Vocabulary,
    embed_dim: usize,
) -> Result<EmbeddingLoad> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);

    let mut vectors = Array2::<f64>::zeros((vocab.len(), embed_dim));
    let mut filled = vec![false; vocab.len()];

    let mut found = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().ok_or_else(|| Error::EmbeddingLine {
            line: line_no,
            message: "missing word field".into(),
        })?;
        let values: Vec<&str> = fields.collect();
        if values.len() != embed_dim {
            return Err(Error::EmbeddingDim {
                line: line_no,
                expected: embed_dim,
                actual: values.len(),
            });
        }
        let Some(id) = vocab.id_of(word) else {
            continue; // word not in vocabulary; skip but keep validating lines
        };
        if id < 2 || filled[id] {
            continue;
        }
        for (j, v) in values.iter().enumerate() {
            vectors[[id, j]] = v.parse::<f64>().map_err(|e| Error::EmbeddingLine {
                line: line_no,
                message: format!("bad value {v:?}: {e}"),
            })?;
        }
        filled[id] = true;
        found += 1;
    }

    // UNK and any uncovered word get the id-keyed fallback row.
    for id in 1..vocab.len() {
        if !filled[id] {
            let row = fallback_row(id, embed_dim);
            for (j, v) in row.into_iter().enumerate() {
                vectors[[id, j]] = v;
            }
        }
    }

    let real_words = vocab.len().saturating_sub(2);
    let coverage = if real_words == 0 {
        0.0
    } else {
        found as f64 / real_words as f64
    };
    Ok(EmbeddingLoad {
        matrix: EmbeddingMatrix::new(vectors),
        coverage,
        found,
    })
}

fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let dot = u.dot(&v);
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu <= f64::EPSILON || nv <= f64::EPSILON {
        return 0.0;
    }
    dot / (nu * nv)
}

/// Top-k nearest vocabulary words to `word` by cosine similarity, excluding
/// the query itself and the reserved ids. Ties break toward the lower id.
pub fn nearest_neighbor(
    word: &str,
    embedding: &EmbeddingMatrix,
    vocab: &Vocabulary,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let query_id = vocab
        .id_of(word)
        .ok_or_else(|| Error::UnknownWord(word.to_owned()))?;
    let query = embedding.row(query_id);
    let mut scored: Vec<(usize, f64)> = vocab
        .words()
        .filter(|(id, _)| *id != query_id)
        .map(|(id, _)| (id, cosine(query, embedding.row(id))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(id, sim)| (vocab.token_of(id).unwrap().to_owned(), sim))
        .collect())
}

/// One raw training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub text: String,
    pub label: usize,
}

/// A raw labeled text dataset with labels in {0, 1, 2}.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parses a label cell: the integer 0-2 or a class name (case-insensitive,
/// spaces or underscores).
pub fn parse_label(raw: &str) -> Option<usize> {
    let norm = raw.trim().to_lowercase().replace('_', " ");
    if let Ok(v) = norm.parse::<usize>() {
        return (v < NUM_CLASSES).then_some(v);
    }
    CLASS_NAMES.iter().position(|name| *name == norm)
}

/// Reads a `text,label` CSV (RFC 4180, header required) into a raw dataset.
pub fn read_labeled_csv<P: AsRef<Path>>(path: P) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::CsvRow {
            row: 0,
            message: e.to_string(),
        })?;

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after the header line
        let record = record.map_err(|e| Error::CsvRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(Error::CsvRow {
                row,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let text = record[0].to_owned();
        let label = parse_label(&record[1]).ok_or_else(|| Error::UnknownLabel {
            row,
            label: record[1].to_owned(),
        })?;
        samples.push(LabeledSample { text, label });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(LabeledDataset { samples })
}

/// One encoded example: fixed-length token ids plus its label. `id` is the
/// sample's index in the source dataset, used for partition audits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub id: usize,
    pub token_ids: Vec<usize>,
    pub label: usize,
}

/// Encodes every sample of a raw dataset with the given vocabulary.
pub fn encode_dataset(
    dataset: &LabeledDataset,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Vec<EncodedSample> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(id, s)| EncodedSample {
            id,
            token_ids: encode_and_pad(&s.text, vocab, max_seq_len),
            label: s.label,
        })
        .collect()
}

/// Grows each minority class up to the majority count by copying random
/// own-class samples with per-token nearest-neighbor substitution.
///
/// Each whitespace word is independently replaced with probability
/// `sub_prob` by its nearest neighbor, provided the normalized token is in
/// the vocabulary and the neighbor's cosine similarity is at least
/// `min_similarity`. Labels are never changed and no class ever shrinks.
pub fn augment_balance(
    dataset: &LabeledDataset,
    embedding: &EmbeddingMatrix,
    vocab: &Vocabulary,
    sub_prob: f64,
    min_similarity: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let counts = dataset.class_counts();
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::ClassMissing { class });
        }
    }
    let target = *counts.iter().max().unwrap();

    let mut by_class: Vec<Vec<&LabeledSample>> = vec![Vec::new(); NUM_CLASSES];
    for s in &dataset.samples {
        by_class[s.label].push(s);
    }

    let mut neighbor_cache: HashMap<String, Option<String>> = HashMap::new();
    let mut out = dataset.clone();
    for (class, members) in by_class.iter().enumerate() {
        let mut rng = rng::stream(&[seed, class as u64]);
        for _ in counts[class]..target {
            let source = members[rng.random_range(0..members.len())];
            let mut replaced = false;
            let words: Vec<String> = source
                .text
                .split_whitespace()
                .map(|word| {
                    if rng.random::<f64>() >= sub_prob {
                        return word.to_owned();
                    }
                    let token = match tokenize(word).into_iter().next() {
                        Some(t) => t,
                        None => return word.to_owned(),
                    };
                    let substitute = neighbor_cache
                        .entry(token.clone())
                        .or_insert_with(|| {
                            nearest_neighbor(&token, embedding, vocab, 1)
                                .ok()
                                .and_then(|mut hits| {
                                    hits.pop().filter(|(_, sim)| *sim >= min_similarity)
                                })
                                .map(|(w, _)| w)
                        })
                        .clone();
                    match substitute {
                        Some(neighbor) => {
                            replaced = true;
                            neighbor
                        }
                        None => word.to_owned(),
                    }
                })
                .collect();
            let text = if replaced {
                words.join(" ")
            } else {
                source.text.clone()
            };
            out.samples.push(LabeledSample {
                text,
                label: class,
            });
        }
    }
    Ok(out)
}

/// Default vocabulary cap when a config does not set one.
pub fn default_vocab_cap() -> usize {
    DEFAULT_VOCAB_CAP
}
