//! Dataset loading and partitioning into client shards, with IID and
//! class-proportion (non-IID) schemes plus an imbalance audit.
//!
//! Shards hold encoded samples, so every client provably works from the
//! shared vocabulary.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::textproc::{
    encode_dataset, read_labeled_csv, EncodedSample, Vocabulary, NUM_CLASSES,
};

/// One client's encoded dataset with per-class counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<EncodedSample>,
    pub class_counts: [usize; NUM_CLASSES],
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<EncodedSample>) -> ClientShard {
        let mut class_counts = [0usize; NUM_CLASSES];
        for s in &samples {
            class_counts[s.label] += 1;
        }
        ClientShard {
            client_id,
            samples,
            class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// How a dataset is distributed across clients.
#[derive(Debug, Clone, PartialEq)]
pub enum ShardPlan {
    /// Per class, samples are dealt round-robin so every client gets an
    /// equal (±1) share of every class.
    Iid,
    /// Client × class proportion matrix; each column must sum to 1 so every
    /// class is fully distributed.
    NonIid(Array2<f64>),
}

impl ShardPlan {
    /// The class distribution used in the heterogeneous experiments
    /// (rows are clients, columns are label order: not / moderately /
    /// severely depressed).
    pub fn table1() -> ShardPlan {
        ShardPlan::NonIid(ndarray::array![
            [0.10, 0.10, 0.40],
            [0.40, 0.10, 0.10],
            [0.10, 0.40, 0.10],
            [0.20, 0.30, 0.10],
            [0.20, 0.10, 0.30],
        ])
    }

    pub fn client_count(&self) -> Option<usize> {
        match self {
            ShardPlan::Iid => None,
            ShardPlan::NonIid(m) => Some(m.nrows()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ShardPlan::NonIid(matrix) = self else {
            return Ok(());
        };
        if matrix.nrows() == 0 || matrix.ncols() != NUM_CLASSES {
            return Err(Error::InvalidPlan(format!(
                "proportion matrix must be clients × {NUM_CLASSES}, got {:?}",
                matrix.shape()
            )));
        }
        if matrix.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidPlan("negative proportion".into()));
        }
        for class in 0..NUM_CLASSES {
            let sum: f64 = matrix.column(class).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidPlan(format!(
                    "class {class} proportions sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// An encoded dataset plus its per-class counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    pub samples: Vec<EncodedSample>,
    pub class_counts: [usize; NUM_CLASSES],
}

impl EncodedDataset {
    pub fn from_samples(samples: Vec<EncodedSample>) -> EncodedDataset {
        let mut class_counts = [0usize; NUM_CLASSES];
        for s in &samples {
            class_counts[s.label] += 1;
        }
        EncodedDataset {
            samples,
            class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a `text,label` CSV and encodes every row with the given vocabulary.
pub fn load_dataset<P: AsRef<Path>>(
    path: P,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<EncodedDataset> {
    let raw = read_labeled_csv(path)?;
    Ok(EncodedDataset::from_samples(encode_dataset(
        &raw,
        vocab,
        max_seq_len,
    )))
}

fn class_indices(samples: &[EncodedSample]) -> [Vec<usize>; NUM_CLASSES] {
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (idx, s) in samples.iter().enumerate() {
        by_class[s.label].push(idx);
    }
    by_class
}

/// Within each class, seed-shuffles the samples and deals them round-robin
/// starting from client 0, so every client receives ⌊count/n⌋ or ⌈count/n⌉
/// per class. Shards are disjoint and their union is the dataset.
pub fn split_iid(
    samples: &[EncodedSample],
    n_clients: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if n_clients < 1 {
        return Err(Error::InvalidPlan("n_clients must be at least 1".into()));
    }
    let mut assigned: Vec<Vec<EncodedSample>> = vec![Vec::new(); n_clients];
    for (class, mut indices) in class_indices(samples).into_iter().enumerate() {
        indices.shuffle(&mut rng::stream(&[seed, class as u64]));
        for (pos, idx) in indices.into_iter().enumerate() {
            assigned[pos % n_clients].push(samples[idx].clone());
        }
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(id, members)| ClientShard::new(id, members))
        .collect())
}

/// Largest-remainder rounding of `total` into integer quotas proportional to
/// `proportions`. Ties go to the lower index, and the quotas sum to `total`
/// exactly.
fn largest_remainder_quotas(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate() {
        let exact = p * total as f64;
        let base = exact.floor() as usize;
        quotas.push(base);
        assigned += base;
        remainders.push((i, exact - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.into_iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

/// Per class, seed-shuffles the samples and assigns them contiguously by
/// cumulative proportion with largest-remainder rounding, so per-class
/// totals are preserved exactly.
pub fn split_noniid(
    samples: &[EncodedSample],
    plan: &ShardPlan,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let ShardPlan::NonIid(matrix) = plan else {
        return Err(Error::InvalidPlan(
            "split_noniid requires a proportion matrix".into(),
        ));
    };
    plan.validate()?;
    let n_clients = matrix.nrows();

    let mut assigned: Vec<Vec<EncodedSample>> = vec![Vec::new(); n_clients];
    for (class, mut indices) in class_indices(samples).into_iter().enumerate() {
        indices.shuffle(&mut rng::stream(&[seed, class as u64]));
        let proportions: Vec<f64> = matrix.column(class).to_vec();
        let quotas = largest_remainder_quotas(&proportions, indices.len());
        let mut cursor = 0usize;
        for (client, quota) in quotas.into_iter().enumerate() {
            for idx in &indices[cursor..cursor + quota] {
                assigned[client].push(samples[*idx].clone());
            }
            cursor += quota;
        }
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(id, members)| ClientShard::new(id, members))
        .collect())
}

/// Audit of shard sizes and class proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceReport {
    /// Some pair of shards differ in total size.
    pub data_imbalanced: bool,
    /// Some pair of shards differ in their share of some class.
    pub class_imbalanced: bool,
    /// `proportions[[i, q]]` is shard i's share of class q across all shards.
    pub proportions: Array2<f64>,
}

pub fn imbalance_report(shards: &[ClientShard]) -> ImbalanceReport {
    let mut class_totals = [0usize; NUM_CLASSES];
    for shard in shards {
        for (q, &c) in shard.class_counts.iter().enumerate() {
            class_totals[q] += c;
        }
    }
    let proportions = Array2::from_shape_fn((shards.len(), NUM_CLASSES), |(i, q)| {
        if class_totals[q] == 0 {
            0.0
        } else {
            shards[i].class_counts[q] as f64 / class_totals[q] as f64
        }
    });

    let data_imbalanced = shards.windows(2).any(|w| w[0].len() != w[1].len());
    let tolerance = 1e-9;
    let class_imbalanced = (0..NUM_CLASSES).any(|q| {
        (1..shards.len()).any(|i| (proportions[[i, q]] - proportions[[0, q]]).abs() > tolerance)
    });

    ImbalanceReport {
        data_imbalanced,
        class_imbalanced,
        proportions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_samples(per_class: [usize; NUM_CLASSES]) -> Vec<EncodedSample> {
        let mut samples = Vec::new();
        let mut id = 0;
        for (label, &count) in per_class.iter().enumerate() {
            for _ in 0..count {
                samples.push(EncodedSample {
                    id,
                    token_ids: vec![id % 7, 0, 0],
                    label,
                });
                id += 1;
            }
        }
        samples
    }

    fn sorted_ids(shards: &[ClientShard]) -> Vec<usize> {
        let mut ids: Vec<usize> = shards
            .iter()
            .flat_map(|s| s.samples.iter().map(|x| x.id))
            .collect();
        ids.sort_unstable();
        ids
    }

    #[test]
    fn load_dataset_counts_classes_and_keeps_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(
            &path,
            "text,label\nfeeling fine,0\nquite low,moderately depressed\nfeeling fine,2\n",
        )
        .unwrap();
        let vocab = crate::textproc::build_vocab(&["feeling fine quite low"], 100);
        let dataset = load_dataset(&path, &vocab, 4).unwrap();
        assert_eq!(dataset.class_counts, [1, 1, 1]);
        assert_eq!(dataset.len(), 3);
        // duplicate texts are kept; deduplication is upstream
        assert_eq!(dataset.samples[0].token_ids, dataset.samples[2].token_ids);
    }

    #[test]
    fn load_dataset_rejects_unknown_labels_naming_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "text,label\nok,0\nbad row,severe\n").unwrap();
        let vocab = crate::textproc::build_vocab(&["ok"], 10);
        match load_dataset(&path, &vocab, 4) {
            Err(Error::UnknownLabel { row: 3, label }) => assert_eq!(label, "severe"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn load_dataset_rejects_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "text,label\n").unwrap();
        let vocab = crate::textproc::build_vocab(&["x"], 10);
        assert!(matches!(
            load_dataset(&path, &vocab, 4),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn iid_split_matches_reported_shard_sizes() {
        // 9300 balanced samples over 5 clients: 1860 each, 620 per class
        let samples = dummy_samples([3100, 3100, 3100]);
        let shards = split_iid(&samples, 5, 42).unwrap();
        assert_eq!(shards.len(), 5);
        for shard in &shards {
            assert_eq!(shard.len(), 1860);
            assert_eq!(shard.class_counts, [620, 620, 620]);
        }
    }

    #[test]
    fn iid_remainders_are_dealt_round_robin() {
        let samples = dummy_samples([10, 0, 0]);
        let shards = split_iid(&samples, 3, 1).unwrap();
        let counts: Vec<usize> = shards.iter().map(ClientShard::len).collect();
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn iid_split_is_a_partition() {
        let samples = dummy_samples([13, 7, 22]);
        let shards = split_iid(&samples, 4, 3).unwrap();
        let expected: Vec<usize> = (0..samples.len()).collect();
        assert_eq!(sorted_ids(&shards), expected);
    }

    #[test]
    fn table1_plan_columns_sum_to_one() {
        ShardPlan::table1().validate().unwrap();
    }

    #[test]
    fn noniid_split_matches_table1_counts() {
        let samples = dummy_samples([1000, 1000, 1000]);
        let shards = split_noniid(&samples, &ShardPlan::table1(), 9).unwrap();
        // label order is (not, moderately, severely)
        assert_eq!(shards[0].class_counts, [100, 100, 400]);
        assert_eq!(shards[1].class_counts, [400, 100, 100]);
        assert_eq!(shards[2].class_counts, [100, 400, 100]);
        assert_eq!(shards[3].class_counts, [200, 300, 100]);
        assert_eq!(shards[4].class_counts, [200, 100, 300]);
        // each class fully distributed
        for q in 0..NUM_CLASSES {
            let total: usize = shards.iter().map(|s| s.class_counts[q]).sum();
            assert_eq!(total, 1000);
        }
    }

    #[test]
    fn noniid_split_is_exact_under_rounding() {
        // 10 samples at 1/3 proportions cannot split evenly; largest
        // remainder keeps totals exact
        let plan = ShardPlan::NonIid(ndarray::array![
            [0.34, 0.34, 0.34],
            [0.33, 0.33, 0.33],
            [0.33, 0.33, 0.33],
        ]);
        let samples = dummy_samples([10, 11, 1]);
        let shards = split_noniid(&samples, &plan, 5).unwrap();
        let expected: Vec<usize> = (0..samples.len()).collect();
        assert_eq!(sorted_ids(&shards), expected);
        for q in 0..NUM_CLASSES {
            let total: usize = shards.iter().map(|s| s.class_counts[q]).sum();
            assert_eq!(total, [10, 11, 1][q]);
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let samples = dummy_samples([50, 30, 20]);
        assert_eq!(
            split_iid(&samples, 5, 77).unwrap(),
            split_iid(&samples, 5, 77).unwrap()
        );
        assert_eq!(
            split_noniid(&samples, &ShardPlan::table1(), 77).unwrap(),
            split_noniid(&samples, &ShardPlan::table1(), 77).unwrap()
        );
        assert_ne!(
            split_iid(&samples, 5, 77).unwrap(),
            split_iid(&samples, 5, 78).unwrap()
        );
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let bad = ShardPlan::NonIid(ndarray::array![[0.5, 0.5, 0.5], [0.4, 0.5, 0.5]]);
        assert!(bad.validate().is_err());
        let negative = ShardPlan::NonIid(ndarray::array![[1.5, 1.0, 1.0], [-0.5, 0.0, 0.0]]);
        assert!(negative.validate().is_err());
    }

    #[test]
    fn iid_balanced_split_reports_no_imbalance() {
        let samples = dummy_samples([30, 30, 30]);
        let shards = split_iid(&samples, 3, 2).unwrap();
        let report = imbalance_report(&shards);
        assert!(!report.data_imbalanced);
        assert!(!report.class_imbalanced);
    }

    #[test]
    fn table1_split_reports_class_imbalance_only() {
        let samples = dummy_samples([1000, 1000, 1000]);
        let shards = split_noniid(&samples, &ShardPlan::table1(), 4).unwrap();
        let report = imbalance_report(&shards);
        assert!(!report.data_imbalanced, "all clients hold 600 samples");
        assert!(report.class_imbalanced);
        assert!((report.proportions[[0, 2]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn duplicated_shard_reports_balance() {
        let samples = dummy_samples([6, 6, 6]);
        let shard = ClientShard::new(0, samples.clone());
        let twin = ClientShard::new(1, samples);
        let report = imbalance_report(&[shard, twin]);
        assert!(!report.data_imbalanced);
        assert!(!report.class_imbalanced);
    }
}
