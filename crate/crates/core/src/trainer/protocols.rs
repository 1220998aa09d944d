//! Evaluation protocols: accuracy by sentence length, cross-participant
//! standard/blind/few-shot comparison, and channel/axis ablations.

use super::{
    dataset_word_accuracy, decode_dataset, fine_tune, sample_accuracy, train, TrainConfig,
};
use crate::dataset::{DatasetSplit, LabeledSample, SampleData, SampleKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Few-shot adaptation protocol: all layers unfrozen, fixed short schedule.
pub const FEW_SHOT_EPOCHS: usize = 5;
pub const FEW_SHOT_LR: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Groups test samples by label-sequence length and reports per-group mean
/// and (population) std of per-sample word accuracy.
pub fn eval_by_length(
    params: &ModelParams,
    samples: &[LabeledSample],
    beam_width: usize,
) -> Result<BTreeMap<usize, LengthStats>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let hyps = decode_dataset(params, samples, beam_width)?;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (s, h) in samples.iter().zip(&hyps) {
        let acc = sample_accuracy(&s.labels, &h.ids);
        groups.entry(s.labels.len()).or_default().push(acc);
    }
    Ok(groups
        .into_iter()
        .map(|(len, accs)| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            (
                len,
                LengthStats {
                    mean,
                    std: var.sqrt(),
                    count: accs.len(),
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossParticipantResult {
    /// Train and test within the participant.
    pub standard: f64,
    /// Leave-one-participant-out.
    pub blind: f64,
    /// Blind model adapted on k samples per token.
    pub few_shot: f64,
}

fn merge_others(
    datasets: &BTreeMap<u32, DatasetSplit>,
    held_out: u32,
    test: Vec<LabeledSample>,
) -> DatasetSplit {
    let reference = datasets.values().next().expect("non-empty datasets");
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (&p, split) in datasets {
        if p == held_out {
            continue;
        }
        train.extend(split.train.iter().cloned());
        validation.extend(split.validation.iter().cloned());
    }
    DatasetSplit {
        train,
        validation,
        test,
        seed: reference.seed,
        vocabulary: reference.vocabulary.clone(),
    }
}

/// Per-token adaptation samples drawn from a participant's train originals.
fn few_shot_samples(split: &DatasetSplit, k: usize) -> Result<Vec<LabeledSample>> {
    let mut by_token: BTreeMap<u32, Vec<&LabeledSample>> = BTreeMap::new();
    for s in &split.train {
        if s.kind != SampleKind::Augmented && s.labels.len() == 1 {
            by_token.entry(s.labels[0]).or_default().push(s);
        }
    }
    let mut out = Vec::new();
    for (token, mut members) in by_token {
        if members.len() < k {
            return Err(Error::invalid(format!(
                "token {token} has {} samples, few-shot k = {k}",
                members.len()
            )));
        }
        members.sort_by_key(|s| s.id);
        out.extend(members.into_iter().take(k).cloned());
    }
    Ok(out)
}

/// Standard / blind / few-shot accuracies per participant.
///
/// `datasets` maps a participant id to that participant's own split (sample
/// ids must be globally unique). Blind trains on all other participants;
/// few-shot fine-tunes the blind model on `k` of the held-out participant's
/// training samples per token and evaluates on that participant's test set.
/// With `k = 0` the blind model is reused unchanged.
pub fn eval_cross_participant(
    datasets: &BTreeMap<u32, DatasetSplit>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    few_shot_k: usize,
) -> Result<BTreeMap<u32, CrossParticipantResult>> {
    if datasets.len() < 2 {
        return Err(Error::invalid("cross-participant evaluation needs >= 2 participants"));
    }
    let mut results = BTreeMap::new();
    for (&p, own) in datasets {
        let standard_run = train(own, cfg, model_cfg)?;
        let standard = dataset_word_accuracy(&standard_run.params, &own.test, cfg.beam_width)?;

        let blind_split = merge_others(datasets, p, own.test.clone());
        let blind_run = train(&blind_split, cfg, model_cfg)?;
        let blind = dataset_word_accuracy(&blind_run.params, &own.test, cfg.beam_width)?;

        let few_shot = if few_shot_k == 0 {
            blind
        } else {
            let adaptation = few_shot_samples(own, few_shot_k)?;
            let adapted = fine_tune(
                blind_run.params,
                &adaptation,
                &own.vocabulary,
                cfg,
                FEW_SHOT_LR,
                FEW_SHOT_EPOCHS,
            )?;
            dataset_word_accuracy(&adapted, &own.test, cfg.beam_width)?
        };

        results.insert(
            p,
            CrossParticipantResult {
                standard,
                blind,
                few_shot,
            },
        );
    }
    Ok(results)
}

/// A sensor subset to retrain with: selected channels (all axes) or
/// selected axes (all channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AblationSubset {
    Channels(Vec<usize>),
    Axes(Vec<usize>),
}

impl AblationSubset {
    pub fn key(&self) -> String {
        match self {
            AblationSubset::Channels(c) => format!(
                "channels:{}",
                c.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
            ),
            AblationSubset::Axes(a) => format!(
                "axes:{}",
                a.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
            ),
        }
    }
}

fn restrict_split(split: &DatasetSplit, channels: &[usize], axes: &[usize]) -> Result<DatasetSplit> {
    let restrict_samples = |samples: &[LabeledSample]| -> Result<Vec<LabeledSample>> {
        samples
            .iter()
            .map(|s| {
                Ok(LabeledSample {
                    data: SampleData::Raw(s.raw()?.restrict(channels, axes)?),
                    ..s.clone()
                })
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: restrict_samples(&split.train)?,
        validation: restrict_samples(&split.validation)?,
        test: restrict_samples(&split.test)?,
        seed: split.seed,
        vocabulary: split.vocabulary.clone(),
    })
}

/// Retrains the model on each sensor subset and reports test word accuracy.
/// The model's input dimension is adjusted to `|channels| * |axes|`.
pub fn ablate(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    subsets: &[AblationSubset],
) -> Result<BTreeMap<String, f64>> {
    if subsets.is_empty() {
        return Err(Error::invalid("no ablation subsets given"));
    }
    let first = split
        .iter_all()
        .next()
        .ok_or_else(|| Error::invalid("empty dataset"))?
        .raw()?;
    let (n_channels, n_axes) = (first.channels, first.axes);
    let mut out = BTreeMap::new();
    for subset in subsets {
        let (channels, axes): (Vec<usize>, Vec<usize>) = match subset {
            AblationSubset::Channels(c) => (c.clone(), (0..n_axes).collect()),
            AblationSubset::Axes(a) => ((0..n_channels).collect(), a.clone()),
        };
        if channels.is_empty() || axes.is_empty() {
            return Err(Error::invalid("ablation subset must be non-empty"));
        }
        let restricted = restrict_split(split, &channels, &axes)?;
        let sub_cfg = ModelConfig {
            input_dim: channels.len() * axes.len(),
            ..model_cfg.clone()
        };
        let run = train(&restricted, cfg, &sub_cfg)?;
        let acc = dataset_word_accuracy(&run.params, &restricted.test, cfg.beam_width)?;
        out.insert(subset.key(), acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantReport {
    pub standard: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blind: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderInfo {
    pub method: String,
    pub beam_width: usize,
}

/// Full evaluation report; serialized as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub word_accuracy: f64,
    pub insertion_rate: f64,
    pub per_length: BTreeMap<usize, LengthStats>,
    pub per_participant: BTreeMap<u32, ParticipantReport>,
    pub ablation: BTreeMap<String, f64>,
    pub decoder: DecoderInfo,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_splits;
    use crate::trainer::tests::{tiny_dataset, tiny_model_cfg};

    #[test]
    fn eval_by_length_groups_and_degenerate_std() {
        let (samples, vocab) = tiny_dataset(2, 10, &[0], 24, 3);
        let mut split = build_splits(samples, &vocab, 3, 1).unwrap();
        // Make one test sample a 2-label sequence so two groups exist.
        let donor = split.test[0].clone();
        let mut two = donor.clone();
        two.id = 9999;
        two.labels = vec![1, 2];
        two.kind = SampleKind::Sentence;
        // Double the window so the longer target stays feasible.
        let w = donor.raw().unwrap();
        let mut values = w.values.clone();
        values.extend_from_slice(&w.values);
        two.data = SampleData::Raw(
            crate::signal::RawWindow::new(values, w.t_len * 2, w.channels, w.axes, w.sample_rate_hz)
                .unwrap(),
        );
        split.test.push(two);

        let params = crate::model::init_params(&tiny_model_cfg(2), 0).unwrap();
        let by_len = eval_by_length(&params, &split.test, 2).unwrap();
        let lengths: Vec<usize> = by_len.keys().copied().collect();
        assert_eq!(lengths, vec![1, 2]);
        // The single two-label sample forms a one-element group: std = 0.
        assert_eq!(by_len[&2].count, 1);
        assert_eq!(by_len[&2].std, 0.0);
    }

    #[test]
    fn few_shot_zero_equals_blind_exactly() {
        let mut datasets = BTreeMap::new();
        let mut next_seed = 1;
        for p in [0u32, 1] {
            let (mut samples, vocab) = tiny_dataset(2, 10, &[p], 24, next_seed);
            // Offset ids so they stay globally unique across participants.
            for s in &mut samples {
                s.id += (p as u64) * 10_000;
            }
            datasets.insert(p, build_splits(samples, &vocab, next_seed, 1).unwrap());
            next_seed += 1;
        }
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 2,
            beam_width: 2,
            ..TrainConfig::default()
        };
        let model_cfg = tiny_model_cfg(2);
        let with_zero = eval_cross_participant(&datasets, &cfg, &model_cfg, 0).unwrap();
        for r in with_zero.values() {
            assert_eq!(r.few_shot, r.blind);
        }
    }

    #[test]
    fn cross_participant_requires_two() {
        let (samples, vocab) = tiny_dataset(2, 10, &[0], 24, 1);
        let mut datasets = BTreeMap::new();
        datasets.insert(0, build_splits(samples, &vocab, 1, 1).unwrap());
        let cfg = TrainConfig::default();
        assert!(eval_cross_participant(&datasets, &cfg, &tiny_model_cfg(2), 0).is_err());
    }

    #[test]
    fn ablation_keys_match_subsets() {
        let (samples, vocab) = tiny_dataset(2, 10, &[0], 24, 7);
        let split = build_splits(samples, &vocab, 7, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 3,
            beam_width: 2,
            ..TrainConfig::default()
        };
        let subsets = vec![
            AblationSubset::Channels(vec![0, 2]),
            AblationSubset::Axes(vec![1]),
        ];
        let out = ablate(&split, &cfg, &tiny_model_cfg(2), &subsets).unwrap();
        let keys: Vec<&String> = out.keys().collect();
        assert_eq!(keys, vec!["axes:1", "channels:0+2"]);
        assert!(ablate(&split, &cfg, &tiny_model_cfg(2), &[]).is_err());
        assert!(ablate(
            &split,
            &cfg,
            &tiny_model_cfg(2),
            &[AblationSubset::Channels(vec![])]
        )
        .is_err());
    }
}
