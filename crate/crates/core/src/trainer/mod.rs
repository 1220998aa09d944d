//! Optimization and evaluation.
//!
//! Training minimizes mean CTC loss plus (for single-token samples) a
//! weighted cross-entropy on the global-token classification head. Batches
//! are processed sample-parallel with per-sample tapes; gradients are
//! reduced in sample order and batch-norm running statistics are updated
//! once per batch, so runs are bit-reproducible under a fixed seed
//! regardless of thread scheduling.

mod adam;
mod metrics;
mod protocols;

pub use adam::{adam_step, adam_step_with_lr, adam_update, AdamState};
pub use metrics::{align, sample_accuracy, word_accuracy, word_accuracy_detailed, AlignmentStats};
pub use protocols::{
    ablate, eval_by_length, eval_cross_participant, AblationSubset, CrossParticipantResult,
    DecoderInfo, EvalReport, LengthStats, ParticipantReport, FEW_SHOT_EPOCHS, FEW_SHOT_LR,
};

use crate::ctc::{beam_decode, ctc_loss_from_logits, DecodeResult, TargetSeq};
use crate::dataset::{DatasetSplit, LabeledSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, ForwardOptions, ModelConfig, ModelParams, BN_MOMENTUM};
use crate::rng::rng_from_parts;
use crate::signal::preprocess;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ce_weight: f64,
    pub seed: u64,
    pub beam_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 50,
            ce_weight: 1.0,
            seed: 42,
            beam_width: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 || self.ce_weight < 0.0 {
            return Err(Error::invalid("learning parameters must be positive"));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.beam_width < 1 {
            return Err(Error::invalid("batch size, epochs and beam width must be >= 1"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_word_accuracy: f64,
    pub wall_time_s: f64,
}

/// Result of a training run: parameters of the best validation epoch plus
/// the per-epoch log.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct SampleResult {
    ctc_loss: f64,
    ce_loss: Option<f64>,
    grads: Vec<Option<Vec<f64>>>,
    bn_stats: Vec<(usize, usize, crate::autodiff::BatchStats)>,
}

fn sample_pass(
    params: &ModelParams,
    sample: &LabeledSample,
    ctc_scale: f64,
    ce_scale: f64,
    dropout_seed: u64,
) -> Result<SampleResult> {
    let features = preprocess(sample.raw()?, sample.id)?;
    let opts = ForwardOptions {
        train: true,
        dropout_seed,
        isolate_global_token: false,
    };
    let mut pass = forward(params, &features, &opts)?;
    let g = &mut pass.graph;

    let logits = g.value(pass.ctc_logits);
    let (t_down, width) = logits.dims2()?;
    let target = TargetSeq::new(sample.labels.clone())?;
    let (ctc_value, ctc_grad) =
        ctc_loss_from_logits(logits.data(), t_down, width, &target).map_err(|e| match e {
            Error::InfeasibleTarget(msg) => Error::InfeasibleTarget(format!(
                "sample {} (participant {}, kind {}): {msg}",
                sample.id,
                sample.participant,
                sample.kind.as_str()
            )),
            other => other,
        })?;
    let ctc_node = g.external_scalar(pass.ctc_logits, ctc_value, ctc_grad)?;
    let mut total = g.scale(ctc_node, ctc_scale);

    let mut ce_loss = None;
    if sample.labels.len() == 1 && ce_scale > 0.0 {
        let log_probs = g.log_softmax_rows(pass.cls_logits)?;
        let picked = g.pick(log_probs, (sample.labels[0] - 1) as usize)?;
        let ce_node = g.scale(picked, -1.0);
        ce_loss = Some(g.value(ce_node).data()[0]);
        let scaled = g.scale(ce_node, ce_scale);
        total = g.add(total, scaled)?;
    }
    g.backward(total)?;

    let grads = pass
        .param_vars
        .iter()
        .map(|v| v.and_then(|var| g.grad(var).map(|s| s.to_vec())))
        .collect();
    Ok(SampleResult {
        ctc_loss: ctc_value,
        ce_loss,
        grads,
        bn_stats: pass.bn_stats,
    })
}

/// Owns the parameters and optimizer state of one run.
struct Engine {
    params: ModelParams,
    state: AdamState,
}

impl Engine {
    fn new(params: ModelParams) -> Self {
        let state = AdamState::new(&params);
        Self { params, state }
    }

    /// One pass over `samples` in `order`; returns the mean batch loss.
    fn run_epoch(
        &mut self,
        samples: &[&LabeledSample],
        order: &[usize],
        lr: f64,
        weight_decay: f64,
        batch_size: usize,
        ce_weight: f64,
        seed: u64,
        epoch: usize,
    ) -> Result<f64> {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(batch_size) {
            let n_single = batch
                .iter()
                .filter(|&&i| samples[i].labels.len() == 1)
                .count();
            let ctc_scale = 1.0 / batch.len() as f64;
            let ce_scale = if n_single > 0 {
                ce_weight / n_single as f64
            } else {
                0.0
            };
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .map(|&i| {
                    let s = samples[i];
                    let dropout_seed = derive_u64(&[seed, 0x64726f70, epoch as u64, s.id]);
                    sample_pass(&self.params, s, ctc_scale, ce_scale, dropout_seed)
                })
                .collect();

            let mut grad_accum: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
            let mut ctc_sum = 0.0;
            let mut ce_sum = 0.0;
            let mut bn_accum: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = Vec::new();
            for res in results {
                let res = res?;
                ctc_sum += res.ctc_loss;
                ce_sum += res.ce_loss.unwrap_or(0.0);
                for (idx, g) in res.grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        match &mut grad_accum[idx] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            None => grad_accum[idx] = Some(g),
                        }
                    }
                }
                for (k, (mean_idx, var_idx, stats)) in res.bn_stats.into_iter().enumerate() {
                    if bn_accum.len() <= k {
                        bn_accum.push((mean_idx, var_idx, vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()]));
                    }
                    for (a, b) in bn_accum[k].2.iter_mut().zip(&stats.mean) {
                        *a += b;
                    }
                    for (a, b) in bn_accum[k].3.iter_mut().zip(&stats.var) {
                        *a += b;
                    }
                }
            }

            // Running-stat update with the batch-average statistics.
            let inv_n = 1.0 / batch.len() as f64;
            for (mean_idx, var_idx, mean_sum, var_sum) in bn_accum {
                let running_mean = self.params.tensor_mut(mean_idx).data_mut();
                for (r, s) in running_mean.iter_mut().zip(&mean_sum) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s * inv_n;
                }
                let running_var = self.params.tensor_mut(var_idx).data_mut();
                for (r, s) in running_var.iter_mut().zip(&var_sum) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s * inv_n;
                }
            }

            adam_step_with_lr(&mut self.params, &grad_accum, &mut self.state, lr, weight_decay);
            loss_sum += ctc_sum / batch.len() as f64
                + if n_single > 0 { ce_weight * ce_sum / n_single as f64 } else { 0.0 };
            batches += 1;
        }
        Ok(loss_sum / batches.max(1) as f64)
    }
}

/// Decodes every sample with the beam decoder (eval mode).
pub fn decode_dataset(
    params: &ModelParams,
    samples: &[LabeledSample],
    beam_width: usize,
) -> Result<Vec<DecodeResult>> {
    samples
        .par_iter()
        .map(|s| {
            let features = preprocess(s.raw()?, s.id)?;
            let pass = forward(params, &features, &ForwardOptions::default())?;
            let logits = pass.graph.value(pass.ctc_logits);
            let (t_down, width) = logits.dims2()?;
            let lattice = crate::ctc::LogProbLattice::from_logits(logits.data(), t_down, width)?;
            Ok(beam_decode(&lattice, beam_width))
        })
        .collect()
}

/// Beam-decoded word accuracy of `params` on `samples`.
pub fn dataset_word_accuracy(
    params: &ModelParams,
    samples: &[LabeledSample],
    beam_width: usize,
) -> Result<f64> {
    let hyps = decode_dataset(params, samples, beam_width)?;
    let refs: Vec<TargetSeq> = samples
        .iter()
        .map(|s| TargetSeq::new(s.labels.clone()))
        .collect::<Result<_>>()?;
    word_accuracy(&refs, &hyps)
}

fn check_feasible(split: &DatasetSplit, model_cfg: &ModelConfig) -> Result<()> {
    for s in &split.train {
        let target = TargetSeq::new(s.labels.clone())?;
        let t_down = model_cfg.downsampled_len(s.t_len());
        if t_down < target.min_frames() {
            return Err(Error::InfeasibleTarget(format!(
                "sample {} (participant {}, kind {}): {} labels need {} frames, \
                 down-sampled window has {}",
                s.id,
                s.participant,
                s.kind.as_str(),
                s.labels.len(),
                target.min_frames(),
                t_down
            )));
        }
    }
    Ok(())
}

/// Trains on `split.train`, tracking validation word accuracy per epoch, and
/// returns the parameters of the best validation epoch.
pub fn train(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    split.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if model_cfg.vocab_size != split.vocabulary.size() as usize {
        return Err(Error::invalid(format!(
            "model vocabulary {} does not match dataset vocabulary {}",
            model_cfg.vocab_size,
            split.vocabulary.size()
        )));
    }
    check_feasible(split, model_cfg)?;

    let mut engine = Engine::new(init_params(model_cfg, cfg.seed)?);
    let samples: Vec<&LabeledSample> = split.train.iter().collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_from_parts(&[cfg.seed, 0x6570_6f63, epoch as u64]));
        let train_loss = engine.run_epoch(
            &samples,
            &order,
            cfg.lr,
            cfg.weight_decay,
            cfg.batch_size,
            cfg.ce_weight,
            cfg.seed,
            epoch,
        )?;
        let val_word_accuracy = if split.validation.is_empty() {
            0.0
        } else {
            dataset_word_accuracy(&engine.params, &split.validation, cfg.beam_width)?
        };
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_word_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        let improved = best
            .as_ref()
            .map(|(acc, _, _)| val_word_accuracy > *acc)
            .unwrap_or(true);
        if improved {
            best = Some((val_word_accuracy, epoch, engine.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}

/// Fine-tunes existing parameters on `samples` (few-shot adaptation):
/// fresh optimizer state, fixed epoch count, no checkpoint selection.
pub fn fine_tune(
    params: ModelParams,
    samples: &[LabeledSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
) -> Result<ModelParams> {
    if samples.is_empty() {
        return Ok(params);
    }
    for s in samples {
        s.validate(vocab)?;
    }
    let mut engine = Engine::new(params);
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..refs.len()).collect();
        order.shuffle(&mut rng_from_parts(&[cfg.seed, 0x6674_756e, epoch as u64]));
        engine.run_epoch(
            &refs,
            &order,
            lr,
            cfg.weight_decay,
            cfg.batch_size,
            cfg.ce_weight,
            cfg.seed,
            epoch,
        )?;
    }
    Ok(engine.params)
}

fn derive_u64(parts: &[u64]) -> u64 {
    rand::Rng::gen(&mut rng_from_parts(parts))
}
