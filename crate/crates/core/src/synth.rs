//! Synthetic benchmark corpus: three disjoint marker-token families mixed
//! with shared filler tokens, plus a matching embedding file in which each
//! class's markers cluster. Linearly separable by construction, so training
//! quality issues show up as harness bugs, not data noise.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::textproc::NUM_CLASSES;

pub const MARKERS_PER_CLASS: usize = 8;
const EMBED_DIM: usize = 100;
const MIN_FILLERS: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Total distinct words (markers + fillers).
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            per_class_train: 200,
            per_class_test: 100,
            vocab_size: 120,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub embeddings: PathBuf,
}

pub fn marker_words(class: usize) -> Vec<String> {
    (0..MARKERS_PER_CLASS)
        .map(|j| format!("m{class}{j:02}"))
        .collect()
}

fn filler_words(count: usize) -> Vec<String> {
    (0..count).map(|j| format!("f{j:03}")).collect()
}

fn make_text<R: Rng>(class: usize, fillers: &[String], rng: &mut R) -> String {
    let markers = marker_words(class);
    let len = rng.random_range(8..=12usize);
    let mut words = Vec::with_capacity(len);
    // at least one marker, so a marker-count classifier is never undecided
    words.push(markers[rng.random_range(0..markers.len())].clone());
    for _ in 1..len {
        if rng.random::<f64>() < 0.4 {
            words.push(markers[rng.random_range(0..markers.len())].clone());
        } else {
            words.push(fillers[rng.random_range(0..fillers.len())].clone());
        }
    }
    words.join(" ")
}

fn write_split<R: Rng>(
    path: &Path,
    per_class: usize,
    fillers: &[String],
    rng: &mut R,
) -> Result<()> {
    let mut rows: Vec<(String, usize)> = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for _ in 0..per_class {
            rows.push((make_text(class, fillers, rng), class));
        }
    }
    rows.shuffle(rng);
    let mut out = String::from("text,label\n");
    for (text, label) in rows {
        out.push_str(&text);
        out.push(',');
        out.push_str(&label.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_embeddings(path: &Path, fillers: &[String], seed: u64) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let mut write_row = |word: &str, values: &[f64]| -> Result<()> {
        let mut line = String::with_capacity(12 * EMBED_DIM);
        line.push_str(word);
        for v in values {
            line.push(' ');
            line.push_str(&format!("{v:.6}"));
        }
        line.push('\n');
        file.write_all(line.as_bytes())?;
        Ok(())
    };

    let mut rng = rng::stream(&[seed, 0xe3b]);
    for class in 0..NUM_CLASSES {
        for word in marker_words(class) {
            // markers of one class cluster around a shared direction
            let values: Vec<f64> = (0..EMBED_DIM)
                .map(|d| {
                    let center = if d / 8 == class { 1.5 } else { 0.0 };
                    center + rng.random_range(-0.1..=0.1)
                })
                .collect();
            write_row(&word, &values)?;
        }
    }
    for word in fillers {
        let values: Vec<f64> = (0..EMBED_DIM)
            .map(|_| rng.random_range(-0.15..=0.15))
            .collect();
        write_row(word, &values)?;
    }
    Ok(())
}

/// Writes `train.csv`, `test.csv`, and `embeddings.txt` under `out_dir`.
/// Byte-identical output for identical specs.
pub fn generate_synthetic_corpus<P: AsRef<Path>>(spec: &SynthSpec, out_dir: P) -> Result<SynthPaths> {
    if spec.per_class_train == 0 {
        return Err(Error::config("per_class", "must be at least 1"));
    }
    let marker_total = NUM_CLASSES * MARKERS_PER_CLASS;
    let filler_count = spec.vocab_size.saturating_sub(marker_total).max(MIN_FILLERS);
    let fillers = filler_words(filler_count);

    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let paths = SynthPaths {
        train_csv: out_dir.join("train.csv"),
        test_csv: out_dir.join("test.csv"),
        embeddings: out_dir.join("embeddings.txt"),
    };

    let mut train_rng = rng::stream(&[spec.seed, 1]);
    write_split(&paths.train_csv, spec.per_class_train, &fillers, &mut train_rng)?;
    let mut test_rng = rng::stream(&[spec.seed, 2]);
    write_split(
        &paths.test_csv,
        spec.per_class_test.max(1),
        &fillers,
        &mut test_rng,
    )?;
    write_embeddings(&paths.embeddings, &fillers, spec.seed)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::{read_labeled_csv, tokenize};

    #[test]
    fn corpus_is_balanced_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_class_train: 200,
            per_class_test: 50,
            ..SynthSpec::default()
        };
        let paths = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let train = read_labeled_csv(&paths.train_csv).unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(train.class_counts(), [200, 200, 200]);
        let test = read_labeled_csv(&paths.test_csv).unwrap();
        assert_eq!(test.len(), 150);
    }

    #[test]
    fn marker_count_classifier_is_perfect() {
        // brute-force keyword-count oracle over both splits
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_synthetic_corpus(&SynthSpec::default(), dir.path()).unwrap();
        let marker_sets: Vec<Vec<String>> = (0..NUM_CLASSES).map(marker_words).collect();
        for path in [&paths.train_csv, &paths.test_csv] {
            let data = read_labeled_csv(path).unwrap();
            for sample in &data.samples {
                let tokens = tokenize(&sample.text);
                let counts: Vec<usize> = marker_sets
                    .iter()
                    .map(|set| tokens.iter().filter(|t| set.contains(t)).count())
                    .collect();
                let best = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &c)| c)
                    .map(|(i, _)| i)
                    .unwrap();
                assert_eq!(best, sample.label, "text {:?}", sample.text);
                // markers are disjoint across classes
                for (c, count) in counts.iter().enumerate() {
                    if c != sample.label {
                        assert_eq!(*count, 0);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = SynthSpec { seed: 9, ..SynthSpec::default() };
        let a = generate_synthetic_corpus(&spec, dir_a.path()).unwrap();
        let b = generate_synthetic_corpus(&spec, dir_b.path()).unwrap();
        for (pa, pb) in [
            (&a.train_csv, &b.train_csv),
            (&a.test_csv, &b.test_csv),
            (&a.embeddings, &b.embeddings),
        ] {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn embedding_file_covers_every_corpus_word() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { per_class_train: 30, per_class_test: 10, ..SynthSpec::default() };
        let paths = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let train = read_labeled_csv(&paths.train_csv).unwrap();
        let texts: Vec<String> = train.samples.iter().map(|s| s.text.clone()).collect();
        let vocab = crate::textproc::build_vocab(&texts, 10_000);
        let load = crate::textproc::load_embeddings(&paths.embeddings, &vocab, 100).unwrap();
        assert_eq!(load.coverage, 1.0);
    }
}
