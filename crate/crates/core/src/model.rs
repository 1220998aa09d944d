//! The encoder: a convolutional front end (three blocks, middle residual,
//! final stride-2 down-sampling), a learned global token prepended to the
//! frame sequence, and pre-norm multi-head self-attention blocks restricted
//! to a band mask, followed by per-frame CTC and global-token classification
//! heads.

use crate::autodiff::{BatchStats, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::FeatureSequence;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_conv_blocks: usize,
    pub n_attn_blocks: usize,
    pub n_heads: usize,
    /// Attention reach on each side of a frame, in post-downsample frames.
    pub attn_window: usize,
    pub downsample_stride: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
    pub kernel_size: usize,
    pub ffn_expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 36,
            hidden_dim: 128,
            n_conv_blocks: 3,
            n_attn_blocks: 3,
            n_heads: 4,
            attn_window: 8,
            downsample_stride: 2,
            dropout_p: 0.1,
            vocab_size: 24,
            kernel_size: 5,
            ffn_expansion: 2,
        }
    }
}

impl ModelConfig {
    /// Per-frame output dimension: vocabulary plus blank.
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden dim {} must be a positive multiple of {} heads",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.attn_window < 1 {
            return Err(Error::invalid("attention window must be >= 1"));
        }
        if self.downsample_stride < 1 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.n_conv_blocks == 0 || self.n_attn_blocks == 0 {
            return Err(Error::invalid("need at least one conv and one attention block"));
        }
        if self.input_dim == 0 || self.vocab_size == 0 || self.ffn_expansion == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Post-downsample frame count for a `t_len`-frame input.
    pub fn downsampled_len(&self, t_len: usize) -> usize {
        t_len.div_ceil(self.downsample_stride)
    }
}

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
    /// Optimized by the trainer (false for batch-norm running stats).
    pub trainable: bool,
    /// Weight decay applies (weights only, never biases or norm scales).
    pub decay: bool,
}

fn param_defs(cfg: &ModelConfig) -> Vec<ParamDef> {
    let h = cfg.hidden_dim;
    let mut defs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init, trainable: bool, decay: bool| {
        defs.push(ParamDef {
            name,
            shape,
            init,
            trainable,
            decay,
        });
    };
    for i in 1..=cfg.n_conv_blocks {
        let c_in = if i == 1 { cfg.input_dim } else { h };
        let fan_in = c_in * cfg.kernel_size;
        push(format!("conv{i}.kernel"), vec![h, c_in, cfg.kernel_size], Init::KaimingUniform { fan_in }, true, true);
        push(format!("conv{i}.bias"), vec![h], Init::Zeros, true, false);
        push(format!("conv{i}.bn_gamma"), vec![h], Init::Ones, true, false);
        push(format!("conv{i}.bn_beta"), vec![h], Init::Zeros, true, false);
        push(format!("conv{i}.bn_mean"), vec![h], Init::Zeros, false, false);
        push(format!("conv{i}.bn_var"), vec![h], Init::Ones, false, false);
    }
    push("global_token".into(), vec![1, h], Init::KaimingUniform { fan_in: h }, true, false);
    for i in 1..=cfg.n_attn_blocks {
        push(format!("attn{i}.ln1_gamma"), vec![h], Init::Ones, true, false);
        push(format!("attn{i}.ln1_beta"), vec![h], Init::Zeros, true, false);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("attn{i}.{w}"), vec![h, h], Init::KaimingUniform { fan_in: h }, true, true);
            push(format!("attn{i}.{}", w.replace('w', "b")), vec![h], Init::Zeros, true, false);
        }
        push(format!("attn{i}.ln2_gamma"), vec![h], Init::Ones, true, false);
        push(format!("attn{i}.ln2_beta"), vec![h], Init::Zeros, true, false);
        let ffn = h * cfg.ffn_expansion;
        push(format!("attn{i}.ffn_w1"), vec![h, ffn], Init::KaimingUniform { fan_in: h }, true, true);
        push(format!("attn{i}.ffn_b1"), vec![ffn], Init::Zeros, true, false);
        push(format!("attn{i}.ffn_w2"), vec![ffn, h], Init::KaimingUniform { fan_in: ffn }, true, true);
        push(format!("attn{i}.ffn_b2"), vec![h], Init::Zeros, true, false);
    }
    push("head_ctc.w".into(), vec![h, cfg.output_dim()], Init::KaimingUniform { fan_in: h }, true, true);
    push("head_ctc.b".into(), vec![cfg.output_dim()], Init::Zeros, true, false);
    push("head_cls.w".into(), vec![h, cfg.vocab_size], Init::KaimingUniform { fan_in: h }, true, true);
    push("head_cls.b".into(), vec![cfg.vocab_size], Init::Zeros, true, false);
    defs
}

/// Named parameter and buffer tensors for one model instance.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    entries: Vec<(ParamDef, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ParamDef, &Tensor)> {
        self.entries.iter().map(|(d, t)| (d, t))
    }

    pub fn def(&self, idx: usize) -> &ParamDef {
        &self.entries[idx].0
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    fn named(&self, name: &str) -> &Tensor {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Replaces a tensor wholesale (checkpoint loading).
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if tensor.shape() != self.entries[idx].0.shape.as_slice() {
            return Err(Error::invalid(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                tensor.shape(),
                self.entries[idx].0.shape
            )));
        }
        self.entries[idx].1 = tensor;
        Ok(())
    }
}

/// Kaiming-uniform fan-in initialization: weights drawn from
/// `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (std `1/sqrt(fan_in)`), biases and
/// norm shifts zero, norm scales one. Deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let defs = param_defs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(defs.len());
    let mut index = HashMap::with_capacity(defs.len());
    for def in defs {
        let numel: usize = def.shape.iter().product();
        let data: Vec<f64> = match def.init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::KaimingUniform { fan_in } => {
                let bound = (3.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let tensor = Tensor::from_vec(&def.shape, data)?;
        index.insert(def.name.clone(), entries.len());
        entries.push((def, tensor));
    }
    Ok(ModelParams {
        cfg: cfg.clone(),
        entries,
        index,
    })
}

/// Attention reachability for a `t_len`-frame sequence with the global token
/// at index 0: `allowed(i, j) <=> i == 0 || j == 0 || |i - j| <= window`.
/// Row-major `[(t_len+1) x (t_len+1)]`.
pub fn band_mask(t_len: usize, window: usize) -> Vec<bool> {
    let n = t_len + 1;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = i == 0 || j == 0 || i.abs_diff(j) <= window;
        }
    }
    mask
}

/// Band mask with the global-token paths severed (the token attends only to
/// itself and no frame attends to it). Diagnostic mode for verifying that
/// long-range influence flows only through the global token.
pub fn band_mask_isolated(t_len: usize, window: usize) -> Vec<bool> {
    let n = t_len + 1;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = if i == 0 || j == 0 {
                i == j
            } else {
                i.abs_diff(j) <= window
            };
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub train: bool,
    /// Seeds the dropout masks of one forward pass.
    pub dropout_seed: u64,
    /// Severs global-token attention paths (see [`band_mask_isolated`]).
    pub isolate_global_token: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            train: false,
            dropout_seed: 0,
            isolate_global_token: false,
        }
    }
}

/// One recorded forward pass: the tape, output handles, and the graph vars
/// of every trainable parameter (for gradient extraction).
pub struct ForwardPass {
    pub graph: Graph,
    /// `[t_downsampled x (V+1)]` per-frame logits.
    pub ctc_logits: Var,
    /// `[1 x V]` global-token classification logits.
    pub cls_logits: Var,
    /// Entry index -> graph var, for trainable parameters.
    pub param_vars: Vec<Option<Var>>,
    /// Batch statistics per conv block `(mean_entry, var_entry, stats)`,
    /// captured in train mode for running-stat updates.
    pub bn_stats: Vec<(usize, usize, BatchStats)>,
}

pub fn forward(params: &ModelParams, x: &FeatureSequence, opts: &ForwardOptions) -> Result<ForwardPass> {
    let cfg = &params.cfg;
    if x.dim != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            lhs: vec![x.t_len, x.dim],
            rhs: vec![x.t_len, cfg.input_dim],
        });
    }
    if x.t_len < cfg.kernel_size {
        return Err(Error::invalid(format!(
            "input of {} frames is shorter than the {}-frame kernel",
            x.t_len, cfg.kernel_size
        )));
    }
    let mut g = Graph::new();
    let mut param_vars: Vec<Option<Var>> = vec![None; params.len()];
    let mut leaf = |g: &mut Graph, name: &str| -> Var {
        let idx = params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let def = params.def(idx);
        let requires = opts.train && def.trainable;
        let v = g.leaf(params.tensor(idx).clone(), requires);
        param_vars[idx] = Some(v);
        v
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
    let use_dropout = opts.train && cfg.dropout_p > 0.0;

    let input = Tensor::from_vec(&[x.t_len, x.dim], x.values.clone())?;
    let mut h = g.leaf(input, false);

    let mut bn_stats = Vec::new();
    let pad = (cfg.kernel_size - 1) / 2;
    for i in 1..=cfg.n_conv_blocks {
        let stride = if i == cfg.n_conv_blocks { cfg.downsample_stride } else { 1 };
        let residual_input = (i > 1 && i < cfg.n_conv_blocks).then_some(h);
        let w = leaf(&mut g, &format!("conv{i}.kernel"));
        let b = leaf(&mut g, &format!("conv{i}.bias"));
        let gamma = leaf(&mut g, &format!("conv{i}.bn_gamma"));
        let beta = leaf(&mut g, &format!("conv{i}.bn_beta"));
        let conv = g.conv1d(h, w, b, stride, pad)?;
        let normed = if opts.train {
            let (normed, stats) = g.batchnorm_train(conv, gamma, beta, BN_EPS)?;
            bn_stats.push((
                params.position(&format!("conv{i}.bn_mean")).unwrap(),
                params.position(&format!("conv{i}.bn_var")).unwrap(),
                stats,
            ));
            normed
        } else {
            g.batchnorm_eval(
                conv,
                gamma,
                beta,
                params.named(&format!("conv{i}.bn_mean")).data(),
                params.named(&format!("conv{i}.bn_var")).data(),
                BN_EPS,
            )?
        };
        let mut out = g.relu(normed);
        if use_dropout {
            out = g.dropout(out, cfg.dropout_p, &mut dropout_rng)?;
        }
        h = match residual_input {
            Some(res) => g.add(res, out)?,
            None => out,
        };
    }

    let t_down = g.value(h).dims2()?.0;
    let global = leaf(&mut g, "global_token");
    let mut seq = g.concat_rows(global, h)?;

    let mask = if opts.isolate_global_token {
        band_mask_isolated(t_down, cfg.attn_window)
    } else {
        band_mask(t_down, cfg.attn_window)
    };
    let head_dim = cfg.hidden_dim / cfg.n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for i in 1..=cfg.n_attn_blocks {
        let ln1_g = leaf(&mut g, &format!("attn{i}.ln1_gamma"));
        let ln1_b = leaf(&mut g, &format!("attn{i}.ln1_beta"));
        let wq = leaf(&mut g, &format!("attn{i}.wq"));
        let bq = leaf(&mut g, &format!("attn{i}.bq"));
        let wk = leaf(&mut g, &format!("attn{i}.wk"));
        let bk = leaf(&mut g, &format!("attn{i}.bk"));
        let wv = leaf(&mut g, &format!("attn{i}.wv"));
        let bv = leaf(&mut g, &format!("attn{i}.bv"));
        let wo = leaf(&mut g, &format!("attn{i}.wo"));
        let bo = leaf(&mut g, &format!("attn{i}.bo"));

        let normed = g.layer_norm(seq, ln1_g, ln1_b, LN_EPS)?;
        let q = g.linear(normed, wq, bq)?;
        let k = g.linear(normed, wk, bk)?;
        let v = g.linear(normed, wv, bv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * head_dim, head_dim)?;
            let kh = g.slice_cols(k, head * head_dim, head_dim)?;
            let vh = g.slice_cols(v, head * head_dim, head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scaled = g.scale(scores, scale);
            let probs = g.masked_softmax_rows(scaled, &mask)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        let mut proj = g.linear(ctx, wo, bo)?;
        if use_dropout {
            proj = g.dropout(proj, cfg.dropout_p, &mut dropout_rng)?;
        }
        seq = g.add(seq, proj)?;

        let ln2_g = leaf(&mut g, &format!("attn{i}.ln2_gamma"));
        let ln2_b = leaf(&mut g, &format!("attn{i}.ln2_beta"));
        let w1 = leaf(&mut g, &format!("attn{i}.ffn_w1"));
        let b1 = leaf(&mut g, &format!("attn{i}.ffn_b1"));
        let w2 = leaf(&mut g, &format!("attn{i}.ffn_w2"));
        let b2 = leaf(&mut g, &format!("attn{i}.ffn_b2"));
        let normed2 = g.layer_norm(seq, ln2_g, ln2_b, LN_EPS)?;
        let f1 = g.linear(normed2, w1, b1)?;
        let f1 = g.relu(f1);
        let mut f2 = g.linear(f1, w2, b2)?;
        if use_dropout {
            f2 = g.dropout(f2, cfg.dropout_p, &mut dropout_rng)?;
        }
        seq = g.add(seq, f2)?;
    }

    let frames = g.slice_rows(seq, 1, t_down)?;
    let ctc_w = leaf(&mut g, "head_ctc.w");
    let ctc_b = leaf(&mut g, "head_ctc.b");
    let ctc_logits = g.linear(frames, ctc_w, ctc_b)?;

    let global_state = g.slice_rows(seq, 0, 1)?;
    let cls_w = leaf(&mut g, "head_cls.w");
    let cls_b = leaf(&mut g, "head_cls.b");
    let cls_logits = g.linear(global_state, cls_w, cls_b)?;

    Ok(ForwardPass {
        graph: g,
        ctc_logits,
        cls_logits,
        param_vars,
        bn_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 16,
            n_heads: 2,
            attn_window: 2,
            vocab_size: 4,
            dropout_p: 0.1,
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            values: (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            t_len: t,
            dim,
            source: 0,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = small_cfg();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        for ((da, ta), (db, tb)) in a.entries().zip(b.entries()) {
            assert_eq!(da.name, db.name);
            assert_eq!(ta.data(), tb.data());
        }
        let c = init_params(&cfg, 4).unwrap();
        assert_ne!(
            a.get("conv1.kernel").unwrap().data(),
            c.get("conv1.kernel").unwrap().data()
        );
        assert_eq!(
            a.get("conv1.kernel").unwrap().shape(),
            &[16, 6, cfg.kernel_size]
        );
        assert_eq!(a.get("head_ctc.w").unwrap().shape(), &[16, 5]);
        assert_eq!(a.get("global_token").unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn kaiming_std_matches_analytic_target() {
        // 10k+ element tensor: empirical std within 30% of 1/sqrt(fan_in).
        let cfg = ModelConfig {
            input_dim: 36,
            hidden_dim: 96,
            vocab_size: 24,
            n_heads: 4,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 11).unwrap();
        let w = params.get("attn1.ffn_w1").unwrap();
        assert!(w.numel() >= 10_000);
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let target = 1.0 / (cfg.hidden_dim as f64).sqrt();
        assert!((std - target).abs() < 0.3 * target, "std {std} vs target {target}");
    }

    #[test]
    fn band_mask_examples() {
        // t_len = 5, window = 1: row 3 (frame 2) allows {0, 2, 3, 4}.
        let mask = band_mask(5, 1);
        let n = 6;
        let row: Vec<usize> = (0..n).filter(|&j| mask[3 * n + j]).collect();
        assert_eq!(row, vec![0, 2, 3, 4]);
        // window >= t_len: everything allowed.
        let full = band_mask(4, 4);
        assert!(full.iter().all(|&m| m));
        // Symmetry.
        let m = band_mask(7, 2);
        let n = 8;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m[i * n + j], m[j * n + i]);
            }
        }
    }

    #[test]
    fn forward_halves_sequence_length() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        for t in [80usize, 81, 19] {
            let pass = forward(&params, &features(t, 6, 5), &ForwardOptions::default()).unwrap();
            assert_eq!(
                pass.graph.value(pass.ctc_logits).shape(),
                &[t.div_ceil(2), 5],
                "t = {t}"
            );
            assert_eq!(pass.graph.value(pass.cls_logits).shape(), &[1, 4]);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let x = features(40, 6, 9);
        let a = forward(&params, &x, &ForwardOptions::default()).unwrap();
        let b = forward(&params, &x, &ForwardOptions::default()).unwrap();
        assert_eq!(
            a.graph.value(a.ctc_logits).data(),
            b.graph.value(b.ctc_logits).data()
        );
        assert_eq!(
            a.graph.value(a.cls_logits).data(),
            b.graph.value(b.cls_logits).data()
        );
    }

    #[test]
    fn feature_dim_mismatch_is_a_shape_error() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        match forward(&params, &features(40, 5, 9), &ForwardOptions::default()) {
            Err(Error::ShapeMismatch { .. }) => {}
            Err(other) => panic!("expected shape error, got {other:?}"),
            Ok(_) => panic!("expected shape error, got a forward pass"),
        }
    }

    #[test]
    fn masked_softmax_equals_manual_neg_inf_masking() {
        // The band-mask path must match softmax over manually -inf'd logits.
        let t_len = 7;
        let n = t_len + 1;
        let mask = band_mask(t_len, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scores: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect();

        let mut g = Graph::new();
        let s = g.leaf(Tensor::from_vec(&[n, n], scores.clone()).unwrap(), false);
        let via_mask = g.masked_softmax_rows(s, &mask).unwrap();
        let got = g.value(via_mask).data();

        for r in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|c| if mask[r * n + c] { scores[r * n + c] } else { f64::NEG_INFINITY })
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..n {
                let manual = ((row[c] - max).exp()) / denom;
                assert!(
                    (got[r * n + c] - manual).abs() < 1e-12,
                    "row {r} col {c}: {} vs {manual}",
                    got[r * n + c]
                );
            }
        }
    }

    #[test]
    fn influence_is_local_when_global_token_is_isolated() {
        let cfg = small_cfg(); // window 2, 3 attn blocks, conv radius 3 post-ds
        let params = init_params(&cfg, 2).unwrap();
        let x = features(80, 6, 3);
        let opts = ForwardOptions {
            isolate_global_token: true,
            ..ForwardOptions::default()
        };
        let base = forward(&params, &x, &opts).unwrap();
        let base_out = base.graph.value(base.ctc_logits).data().to_vec();
        let base_cls = base.graph.value(base.cls_logits).data().to_vec();

        // Perturb input frame 10 (post-downsample center 5).
        let mut perturbed = x.clone();
        for d in 0..6 {
            perturbed.values[10 * 6 + d] += 0.5;
        }
        let got = forward(&params, &perturbed, &opts).unwrap();
        let out = got.graph.value(got.ctc_logits).data().to_vec();
        let cls = got.graph.value(got.cls_logits).data().to_vec();

        // Reach: 3 post-ds conv radius + 3 blocks x window 2 = 9 frames.
        let t_down = 40;
        let width = cfg.output_dim();
        let mut changed_near = false;
        for i in 0..t_down {
            let delta: f64 = (0..width)
                .map(|c| (out[i * width + c] - base_out[i * width + c]).abs())
                .fold(0.0, f64::max);
            if i.abs_diff(5) > 10 {
                assert!(delta < 1e-9, "frame {i} changed by {delta}");
            } else if delta > 1e-6 {
                changed_near = true;
            }
        }
        assert!(changed_near, "perturbation had no local effect");
        // With global paths severed the classification head sees nothing.
        for (a, b) in cls.iter().zip(&base_cls) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_token_carries_information_when_connected() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 2).unwrap();
        let x = features(80, 6, 3);
        let base = forward(&params, &x, &ForwardOptions::default()).unwrap();
        let base_cls = base.graph.value(base.cls_logits).data().to_vec();
        let mut perturbed = x.clone();
        for d in 0..6 {
            perturbed.values[70 * 6 + d] += 0.5;
        }
        let got = forward(&params, &perturbed, &ForwardOptions::default()).unwrap();
        let cls = got.graph.value(got.cls_logits).data().to_vec();
        let delta: f64 = cls
            .iter()
            .zip(&base_cls)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(delta > 1e-9, "global token ignored a distant frame");
    }

    #[test]
    fn outputs_stay_finite_for_large_inputs() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 6).unwrap();
        let mut x = features(32, 6, 8);
        for v in &mut x.values {
            *v *= 1e3;
        }
        let pass = forward(&params, &x, &ForwardOptions::default()).unwrap();
        assert!(pass.graph.value(pass.ctc_logits).data().iter().all(|v| v.is_finite()));
        assert!(pass.graph.value(pass.cls_logits).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_mode_collects_batch_stats() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let opts = ForwardOptions {
            train: true,
            dropout_seed: 7,
            ..ForwardOptions::default()
        };
        let pass = forward(&params, &features(40, 6, 2), &opts).unwrap();
        assert_eq!(pass.bn_stats.len(), cfg.n_conv_blocks);
        for (_, _, stats) in &pass.bn_stats {
            assert_eq!(stats.mean.len(), cfg.hidden_dim);
        }
        // Trainable parameters got graph vars; buffers did not.
        for (idx, var) in pass.param_vars.iter().enumerate() {
            if params.def(idx).trainable {
                assert!(var.is_some(), "{} missing", params.def(idx).name);
            }
        }
    }
}
