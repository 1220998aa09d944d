//! Vocabulary, labeled samples, augmentation, and dataset splits.

mod container;
mod synth;

pub use container::{read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use synth::{
    max_series_correlation, Synthesizer, SYNTH_AXES, SYNTH_CHANNELS, SYNTH_SAMPLE_RATE_HZ,
    TEMPLATE_CORR_LIMIT,
};

use crate::error::{Error, Result};
use crate::signal::{FeatureSequence, RawWindow};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};

use crate::rng::rng_from_parts;

/// Reserved CTC blank id; never a vocabulary token.
pub const BLANK_ID: u32 = 0;

/// The sixteen English words of the recording protocol.
pub const WORD_TOKENS: [&str; 16] = [
    "afternoon",
    "thanks",
    "beautiful",
    "wait",
    "breakfast",
    "want",
    "drink",
    "water",
    "hello",
    "welcome",
    "please",
    "what",
    "sorry",
    "wonder",
    "test",
    "wonderful",
];

/// The eight Chinese phrases, modeled as opaque single tokens.
pub const PHRASE_TOKENS: [&str; 8] = [
    "tengtong",
    "fanshen",
    "xiachuang",
    "henkaixin",
    "xiexieni",
    "woyaoheshui",
    "woxiangchifan",
    "tianqizhenhao",
];

/// The two English sentences, as word-token sequences.
pub const SENTENCES: [&[&str]; 2] = [&["drink", "water"], &["hello", "please", "wait"]];

/// Bijection between token strings and contiguous ids `1..=V`; id 0 is blank.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("vocabulary must contain at least one token"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid("empty string cannot be a token"));
            }
            if index.insert(t.clone(), i as u32 + 1).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The word + phrase vocabulary of the recording protocol.
    pub fn standard() -> Self {
        let tokens = WORD_TOKENS
            .iter()
            .chain(PHRASE_TOKENS.iter())
            .map(|s| s.to_string())
            .collect();
        Self::new(tokens).expect("standard vocabulary is valid")
    }

    /// Number of tokens V (blank excluded).
    pub fn size(&self) -> u32 {
        self.tokens.len() as u32
    }

    /// V + 1, the per-frame output dimension including blank.
    pub fn output_dim(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        if id == BLANK_ID {
            return None;
        }
        self.tokens.get(id as usize - 1).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::invalid(format!("unknown token {w:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::invalid(format!("id {i} not in vocabulary")))
            })
            .collect()
    }

    /// SHA-256 over the token list, used to couple checkpoints to the
    /// vocabulary they were trained on.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Word,
    Sentence,
    Augmented,
}

impl SampleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleKind::Word => "word",
            SampleKind::Sentence => "sentence",
            SampleKind::Augmented => "augmented",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "word" => Some(SampleKind::Word),
            "sentence" => Some(SampleKind::Sentence),
            "augmented" => Some(SampleKind::Augmented),
            _ => None,
        }
    }
}

/// Sample payload: raw sensor window or already extracted features.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleData {
    Raw(RawWindow),
    Features(FeatureSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub data: SampleData,
    pub labels: Vec<u32>,
    pub participant: u32,
    pub kind: SampleKind,
    /// Original sample ids an augmented sample was derived from.
    pub sources: Vec<u64>,
}

impl LabeledSample {
    pub fn raw(&self) -> Result<&RawWindow> {
        match &self.data {
            SampleData::Raw(w) => Ok(w),
            SampleData::Features(_) => Err(Error::invalid(format!(
                "sample {} holds features, expected a raw window",
                self.id
            ))),
        }
    }

    pub fn t_len(&self) -> usize {
        match &self.data {
            SampleData::Raw(w) => w.t_len,
            SampleData::Features(f) => f.t_len,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::invalid(format!("sample {} has no labels", self.id)));
        }
        if self.kind == SampleKind::Word && self.labels.len() != 1 {
            return Err(Error::invalid(format!(
                "word sample {} has {} labels",
                self.id,
                self.labels.len()
            )));
        }
        for &l in &self.labels {
            if l == BLANK_ID || l > vocab.size() {
                return Err(Error::invalid(format!(
                    "sample {}: label {l} outside 1..={}",
                    self.id,
                    vocab.size()
                )));
            }
        }
        Ok(())
    }
}

/// Disjoint train / validation / test partitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub seed: u64,
    pub vocabulary: Vocabulary,
}

impl DatasetSplit {
    pub fn iter_all(&self) -> impl Iterator<Item = &LabeledSample> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }

    /// Checks split disjointness, label validity, and augmentation
    /// provenance (augmented samples live in train and are derived only
    /// from train originals).
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in self.iter_all() {
            s.validate(&self.vocabulary)?;
            if !ids.insert(s.id) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        for s in self.validation.iter().chain(self.test.iter()) {
            if s.kind == SampleKind::Augmented {
                return Err(Error::invalid(format!(
                    "augmented sample {} outside the training split",
                    s.id
                )));
            }
        }
        let train_originals: HashSet<u64> = self
            .train
            .iter()
            .filter(|s| s.kind != SampleKind::Augmented)
            .map(|s| s.id)
            .collect();
        for s in &self.train {
            if s.kind == SampleKind::Augmented {
                if s.sources.is_empty() {
                    return Err(Error::invalid(format!(
                        "augmented sample {} has no provenance",
                        s.id
                    )));
                }
                for src in &s.sources {
                    if !train_originals.contains(src) {
                        return Err(Error::invalid(format!(
                            "augmented sample {} derives from non-train sample {src}",
                            s.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Concatenates `n_words` randomly chosen word windows from `pool` along the
/// time axis. The label sequence is the concatenation of the chosen labels.
/// The returned sample has id 0; callers assign final ids.
pub fn concat_augment(pool: &[&LabeledSample], n_words: usize, seed: u64) -> Result<LabeledSample> {
    if !(2..=6).contains(&n_words) {
        return Err(Error::invalid(format!(
            "concatenation length {n_words} outside 2..=6"
        )));
    }
    if pool.is_empty() {
        return Err(Error::invalid("empty word pool"));
    }
    let first = pool[0].raw()?;
    let (c, a, fs) = (first.channels, first.axes, first.sample_rate_hz);
    for s in pool {
        if s.kind != SampleKind::Word {
            return Err(Error::invalid(format!(
                "sample {} is not word-kind",
                s.id
            )));
        }
        let w = s.raw()?;
        if w.channels != c || w.axes != a || w.sample_rate_hz != fs {
            return Err(Error::invalid(format!(
                "sample {} layout {}x{} does not match {}x{}",
                s.id, w.channels, w.axes, c, a
            )));
        }
    }
    let mut rng = rng_from_parts(&[seed, 0x636f_6e63]);
    let mut values = Vec::new();
    let mut labels = Vec::with_capacity(n_words);
    let mut sources = Vec::with_capacity(n_words);
    let mut t_total = 0usize;
    let mut participant = 0u32;
    for i in 0..n_words {
        let s = pool[rng.gen_range(0..pool.len())];
        let w = s.raw()?;
        values.extend_from_slice(&w.values);
        labels.push(s.labels[0]);
        sources.push(s.id);
        t_total += w.t_len;
        if i == 0 {
            participant = s.participant;
        }
    }
    Ok(LabeledSample {
        id: 0,
        data: SampleData::Raw(RawWindow::new(values, t_total, c, a, fs)?),
        labels,
        participant,
        kind: SampleKind::Augmented,
        sources,
    })
}

/// Adds zero-mean Gaussian noise to a raw-window sample. The noise std of
/// each channel-axis series is one third of that series' own std, so the
/// perturbation is scale-equivariant. Labels are unchanged.
pub fn noise_augment(s: &LabeledSample, seed: u64) -> Result<LabeledSample> {
    let w = s.raw()?;
    let mut rng = rng_from_parts(&[seed, 0x6e6f_6973, s.id]);
    let mut values = w.values.clone();
    let normal = rand_distr::StandardNormal;
    for c in 0..w.channels {
        for a in 0..w.axes {
            let series = w.series(c, a);
            let n = series.len() as f64;
            let mean = series.iter().sum::<f64>() / n;
            let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sigma = var.sqrt() / 3.0;
            for t in 0..w.t_len {
                let z: f64 = rng.sample(normal);
                let idx = (t * w.channels + c) * w.axes + a;
                values[idx] = (values[idx] as f64 + sigma * z) as f32;
            }
        }
    }
    Ok(LabeledSample {
        id: 0,
        data: SampleData::Raw(RawWindow::new(values, w.t_len, w.channels, w.axes, w.sample_rate_hz)?),
        labels: s.labels.clone(),
        participant: s.participant,
        kind: SampleKind::Augmented,
        sources: vec![s.id],
    })
}

/// Stratified 70:15:15 split with training-set augmentation.
///
/// Strata are distinct label sequences. The training partition is expanded
/// to `augment_factor` times its original size by drawing, with equal
/// probability, word concatenations (2-4 words from one participant) and
/// noisy copies of training originals.
pub fn build_splits(
    samples: Vec<LabeledSample>,
    vocab: &Vocabulary,
    seed: u64,
    augment_factor: usize,
) -> Result<DatasetSplit> {
    if augment_factor < 1 {
        return Err(Error::invalid("augment factor must be >= 1"));
    }
    let mut ids = HashSet::new();
    for s in &samples {
        s.validate(vocab)?;
        if !ids.insert(s.id) {
            return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
        }
    }

    let mut strata: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry(s.labels.clone()).or_default().push(i);
    }
    for (labels, members) in &strata {
        if members.len() < 10 {
            return Err(Error::InsufficientData(format!(
                "class {labels:?} has {} samples, need at least 10",
                members.len()
            )));
        }
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (stratum, (_, members)) in strata.iter().enumerate() {
        let mut order = members.clone();
        let mut rng = rng_from_parts(&[seed, 0x7370_6c69, stratum as u64]);
        order.shuffle(&mut rng);
        let n = order.len();
        let n_train = (0.70 * n as f64).round() as usize;
        let n_val = (0.15 * n as f64).round() as usize;
        train_idx.extend_from_slice(&order[..n_train]);
        val_idx.extend_from_slice(&order[n_train..n_train + n_val]);
        test_idx.extend_from_slice(&order[n_train + n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();

    let take = |idx: &[usize], samples: &[LabeledSample]| -> Vec<LabeledSample> {
        idx.iter().map(|&i| samples[i].clone()).collect()
    };
    let mut train = take(&train_idx, &samples);
    let validation = take(&val_idx, &samples);
    let test = take(&test_idx, &samples);

    let n_originals = train.len();
    let mut next_id = samples.iter().map(|s| s.id).max().unwrap_or(0) + 1;

    // Word originals grouped by participant feed the concatenation draw.
    let mut words_by_participant: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        if s.kind == SampleKind::Word {
            words_by_participant.entry(s.participant).or_default().push(i);
        }
    }
    let participants: Vec<u32> = words_by_participant.keys().copied().collect();

    let n_augmented = n_originals * (augment_factor - 1);
    let mut augmented = (0..n_augmented)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_parts(&[seed, 0x6175_676d, i as u64]);
            let use_concat = !participants.is_empty() && rng.gen_bool(0.5);
            if use_concat {
                let p = participants[rng.gen_range(0..participants.len())];
                let pool: Vec<&LabeledSample> = words_by_participant[&p]
                    .iter()
                    .map(|&idx| &train[idx])
                    .collect();
                let n_words = rng.gen_range(2..=4usize);
                concat_augment(&pool, n_words, rng.gen())
            } else {
                let src = &train[rng.gen_range(0..n_originals)];
                noise_augment(src, rng.gen())
            }
        })
        .collect::<Result<Vec<LabeledSample>>>()?;
    for sample in &mut augmented {
        sample.id = next_id;
        next_id += 1;
    }
    train.extend(augmented);

    let split = DatasetSplit {
        train,
        validation,
        test,
        seed,
        vocabulary: vocab.clone(),
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word_sample(id: u64, label: u32, participant: u32, t: usize, fill: f32) -> LabeledSample {
        let mut values = vec![fill; t * 4];
        // Give each series some variance so noise augmentation has signal.
        for (i, v) in values.iter_mut().enumerate() {
            *v += ((i % 7) as f32 - 3.0) * 0.5;
        }
        LabeledSample {
            id,
            data: SampleData::Raw(RawWindow::new(values, t, 2, 2, 50.0).unwrap()),
            labels: vec![label],
            participant,
            kind: SampleKind::Word,
            sources: vec![],
        }
    }

    #[test]
    fn standard_vocabulary_layout() {
        let v = Vocabulary::standard();
        assert_eq!(v.size(), 24);
        assert_eq!(v.output_dim(), 25);
        assert_eq!(v.id("afternoon"), Some(1));
        assert_eq!(v.id("wonderful"), Some(16));
        assert_eq!(v.id("tengtong"), Some(17));
        assert_eq!(v.token(24), Some("tianqizhenhao"));
        assert_eq!(v.token(BLANK_ID), None);
        for sentence in SENTENCES {
            assert!(v.encode(sentence).is_ok());
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec![]).is_err());
    }

    #[test]
    fn vocabulary_hash_tracks_content() {
        let a = Vocabulary::new(vec!["x".into(), "y".into()]).unwrap();
        let b = Vocabulary::new(vec!["x".into(), "z".into()]).unwrap();
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex(), a.hash_hex());
    }

    #[test]
    fn concat_builds_multi_word_sample() {
        let w1 = word_sample(1, 3, 0, 80, 0.0);
        let w2 = word_sample(2, 5, 0, 80, 1.0);
        let pool = [&w1, &w2];
        let out = concat_augment(&pool, 2, 11).unwrap();
        assert_eq!(out.t_len(), 160);
        assert_eq!(out.labels.len(), 2);
        assert_eq!(out.kind, SampleKind::Augmented);
        assert_eq!(out.sources.len(), 2);
    }

    #[test]
    fn concat_rejects_bad_counts_and_inputs() {
        let w1 = word_sample(1, 3, 0, 80, 0.0);
        let pool = [&w1];
        assert!(concat_augment(&pool, 1, 0).is_err());
        assert!(concat_augment(&pool, 7, 0).is_err());

        let mut feat = word_sample(2, 1, 0, 80, 0.0);
        feat.data = SampleData::Features(crate::signal::FeatureSequence {
            values: vec![0.0; 80],
            t_len: 80,
            dim: 1,
            source: 2,
        });
        let mixed = [&w1, &feat];
        assert!(concat_augment(&mixed, 2, 0).is_err());

        let mut sent = word_sample(3, 1, 0, 80, 0.0);
        sent.kind = SampleKind::Sentence;
        sent.labels = vec![1, 2];
        let bad_kind = [&w1, &sent];
        assert!(concat_augment(&bad_kind, 2, 0).is_err());
    }

    #[test]
    fn noise_preserves_labels_and_matches_target_std() {
        // Unit-std series, long window: measured added-noise std = 1/3.
        let t = 10_000;
        let values: Vec<f32> = (0..t).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = LabeledSample {
            id: 7,
            data: SampleData::Raw(RawWindow::new(values, t, 1, 1, 50.0).unwrap()),
            labels: vec![2],
            participant: 0,
            kind: SampleKind::Word,
            sources: vec![],
        };
        let out = noise_augment(&s, 99).unwrap();
        assert_eq!(out.labels, s.labels);
        let diff: Vec<f64> = out
            .raw()
            .unwrap()
            .series(0, 0)
            .iter()
            .zip(s.raw().unwrap().series(0, 0))
            .map(|(a, b)| a - b)
            .collect();
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        let std = (diff.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0 / 3.0).abs() < 0.02, "noise std {std}");
    }

    #[test]
    fn noise_on_constant_zero_window_is_noiseless() {
        let s = LabeledSample {
            id: 1,
            data: SampleData::Raw(RawWindow::new(vec![0.0; 64], 16, 2, 2, 50.0).unwrap()),
            labels: vec![1],
            participant: 0,
            kind: SampleKind::Word,
            sources: vec![],
        };
        let out = noise_augment(&s, 3).unwrap();
        assert_eq!(out.raw().unwrap().values, s.raw().unwrap().values);
    }

    fn toy_corpus(per_class: usize) -> (Vec<LabeledSample>, Vocabulary) {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let mut samples = Vec::new();
        let mut id = 1;
        for label in 1..=2u32 {
            for k in 0..per_class {
                samples.push(word_sample(id, label, (k % 2) as u32, 16, label as f32));
                id += 1;
            }
        }
        (samples, vocab)
    }

    #[test]
    fn splits_are_stratified_70_15_15() {
        let (samples, vocab) = toy_corpus(100);
        let split = build_splits(samples, &vocab, 5, 1).unwrap();
        assert_eq!(split.train.len(), 140);
        assert_eq!(split.validation.len(), 30);
        assert_eq!(split.test.len(), 30);
        for label in 1..=2u32 {
            let n = split
                .train
                .iter()
                .filter(|s| s.labels == vec![label])
                .count();
            assert_eq!(n, 70);
        }
        split.validate().unwrap();
    }

    #[test]
    fn augmentation_scales_training_set() {
        let (samples, vocab) = toy_corpus(10);
        let split = build_splits(samples, &vocab, 5, 10).unwrap();
        // 7 train originals per class, tenfold expansion.
        assert_eq!(split.train.len(), 140);
        assert_eq!(
            split
                .train
                .iter()
                .filter(|s| s.kind != SampleKind::Augmented)
                .count(),
            14
        );
        split.validate().unwrap();
        // Provenance stays inside train originals.
        let train_ids: std::collections::HashSet<u64> = split
            .train
            .iter()
            .filter(|s| s.kind != SampleKind::Augmented)
            .map(|s| s.id)
            .collect();
        for s in split.train.iter().filter(|s| s.kind == SampleKind::Augmented) {
            assert!(s.sources.iter().all(|src| train_ids.contains(src)));
        }
    }

    #[test]
    fn augment_factor_one_keeps_originals_only() {
        let (samples, vocab) = toy_corpus(12);
        let split = build_splits(samples, &vocab, 1, 1).unwrap();
        assert!(split.train.iter().all(|s| s.kind != SampleKind::Augmented));
    }

    #[test]
    fn small_classes_are_rejected() {
        let (samples, vocab) = toy_corpus(9);
        match build_splits(samples, &vocab, 1, 1) {
            Err(Error::InsufficientData(_)) => {}
            other => panic!("expected insufficient-data error, got {other:?}"),
        }
    }

    #[test]
    fn build_splits_is_deterministic() {
        let (samples, vocab) = toy_corpus(20);
        let a = build_splits(samples.clone(), &vocab, 9, 3).unwrap();
        let b = build_splits(samples, &vocab, 9, 3).unwrap();
        assert_eq!(a, b);
    }
}
