//! CTC loss and decoding.
//!
//! The loss marginalizes over all frame-level alignments of a target
//! sequence via the forward-backward recursion on the blank-interleaved
//! label sequence, entirely in log space. A brute-force enumerator over all
//! frame labelings serves as the exact oracle for small instances. Greedy
//! and prefix-beam decoders turn per-frame posteriors into token sequences.

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Reserved blank label, always at column 0 of a lattice.
pub const BLANK: u32 = 0;

const NEG_INF: f64 = f64::NEG_INFINITY;

#[inline]
fn logaddexp(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-frame log-probabilities `[t_len][width]`; column 0 is blank.
/// Every row must log-sum-exp to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    log_probs: Vec<f64>,
    t_len: usize,
    width: usize,
}

impl LogProbLattice {
    /// Wraps normalized log-probabilities, validating row normalization.
    pub fn from_rows(log_probs: Vec<f64>, t_len: usize, width: usize) -> Result<Self> {
        if t_len == 0 || width < 2 {
            return Err(Error::invalid(format!(
                "lattice must be at least 1x2, got {t_len}x{width}"
            )));
        }
        if log_probs.len() != t_len * width {
            return Err(Error::invalid(format!(
                "lattice buffer of {} values cannot fill {t_len}x{width}",
                log_probs.len()
            )));
        }
        for t in 0..t_len {
            let row = &log_probs[t * width..(t + 1) * width];
            let total = row.iter().fold(NEG_INF, |acc, &v| logaddexp(acc, v));
            if total.abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "lattice row {t} log-sum-exps to {total}, expected 0"
                )));
            }
        }
        Ok(Self {
            log_probs,
            t_len,
            width,
        })
    }

    /// Builds a lattice from raw logits by applying log-softmax per row.
    pub fn from_logits(logits: &[f64], t_len: usize, width: usize) -> Result<Self> {
        if t_len == 0 || width < 2 || logits.len() != t_len * width {
            return Err(Error::invalid(format!(
                "logit buffer of {} values cannot fill {t_len}x{width}",
                logits.len()
            )));
        }
        let mut log_probs = vec![0.0; t_len * width];
        for t in 0..t_len {
            let row = &logits[t * width..(t + 1) * width];
            let max = row.iter().cloned().fold(NEG_INF, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (o, &v) in log_probs[t * width..(t + 1) * width].iter_mut().zip(row) {
                *o = v - max - log_denom;
            }
        }
        Ok(Self {
            log_probs,
            t_len,
            width,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> u32 {
        (self.width - 1) as u32
    }

    #[inline]
    fn lp(&self, t: usize, k: u32) -> f64 {
        self.log_probs[t * self.width + k as usize]
    }
}

/// Target token-id sequence; ids are in `1..=V`, never blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSeq {
    ids: Vec<u32>,
}

impl TargetSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("target sequence must be non-empty"));
        }
        if ids.contains(&BLANK) {
            return Err(Error::invalid("target sequence may not contain blank"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Minimum number of frames any alignment needs: one per label plus a
    /// mandatory blank between adjacent equal labels.
    pub fn min_frames(&self) -> usize {
        let repeats = self.ids.windows(2).filter(|w| w[0] == w[1]).count();
        self.ids.len() + repeats
    }
}

/// Decoded token sequence. `ids` is fully collapsed (no blanks, no CTC
/// repeat artifacts); `log_prob` semantics depend on the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub frame_alignment: Option<Vec<u32>>,
}

/// The CTC collapse: merge adjacent repeats, then drop blanks.
pub fn collapse(frames: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &f in frames {
        if prev != Some(f) && f != BLANK {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}

fn check_target(lattice: &LogProbLattice, target: &TargetSeq) -> Result<()> {
    for &id in target.ids() {
        if id > lattice.vocab_size() {
            return Err(Error::invalid(format!(
                "target id {id} exceeds vocabulary of {} tokens",
                lattice.vocab_size()
            )));
        }
    }
    if lattice.t_len() < target.min_frames() {
        return Err(Error::InfeasibleTarget(format!(
            "target of {} labels needs at least {} frames, lattice has {}",
            target.len(),
            target.min_frames(),
            lattice.t_len()
        )));
    }
    Ok(())
}

/// Blank-interleaved extended label sequence `- l1 - l2 - ... -`.
fn extended(target: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &id in target {
        ext.push(id);
        ext.push(BLANK);
    }
    ext
}

/// Log-domain forward/backward lattices over the extended sequence.
/// `alpha[t][s]` includes the emission at frame `t`; `beta[t][s]` covers
/// emissions strictly after `t`, so `alpha + beta` sums to the total path
/// log-probability at every frame.
fn forward_backward(
    lattice: &LogProbLattice,
    ext: &[u32],
) -> (Vec<f64>, Vec<f64>, f64) {
    let t_len = lattice.t_len();
    let s_len = ext.len();
    let idx = |t: usize, s: usize| t * s_len + s;

    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[idx(0, 0)] = lattice.lp(0, ext[0]);
    if s_len > 1 {
        alpha[idx(0, 1)] = lattice.lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[idx(t - 1, s)];
            if s >= 1 {
                acc = logaddexp(acc, alpha[idx(t - 1, s - 1)]);
            }
            if skip_ok(s) {
                acc = logaddexp(acc, alpha[idx(t - 1, s - 2)]);
            }
            if acc != NEG_INF {
                alpha[idx(t, s)] = acc + lattice.lp(t, ext[s]);
            }
        }
    }
    let mut log_p = alpha[idx(t_len - 1, s_len - 1)];
    if s_len > 1 {
        log_p = logaddexp(log_p, alpha[idx(t_len - 1, s_len - 2)]);
    }

    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[idx(t_len - 1, s_len - 1)] = 0.0;
    if s_len > 1 {
        beta[idx(t_len - 1, s_len - 2)] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = if beta[idx(t + 1, s)] != NEG_INF {
                beta[idx(t + 1, s)] + lattice.lp(t + 1, ext[s])
            } else {
                NEG_INF
            };
            if s + 1 < s_len && beta[idx(t + 1, s + 1)] != NEG_INF {
                acc = logaddexp(acc, beta[idx(t + 1, s + 1)] + lattice.lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) && beta[idx(t + 1, s + 2)] != NEG_INF {
                acc = logaddexp(acc, beta[idx(t + 1, s + 2)] + lattice.lp(t + 1, ext[s + 2]));
            }
            beta[idx(t, s)] = acc;
        }
    }
    (alpha, beta, log_p)
}

/// CTC loss `-log P(target | lattice)` and its analytic gradient with
/// respect to the pre-softmax logits that produced the lattice.
pub fn ctc_loss(lattice: &LogProbLattice, target: &TargetSeq) -> Result<(f64, Vec<f64>)> {
    check_target(lattice, target)?;
    let ext = extended(target.ids());
    let (alpha, beta, log_p) = forward_backward(lattice, &ext);
    if log_p == NEG_INF {
        return Err(Error::InfeasibleTarget(
            "no alignment has positive probability".to_string(),
        ));
    }

    let t_len = lattice.t_len();
    let width = lattice.width();
    let s_len = ext.len();
    let mut grad = vec![0.0; t_len * width];
    let mut log_gamma = vec![NEG_INF; width];
    for t in 0..t_len {
        log_gamma.fill(NEG_INF);
        for s in 0..s_len {
            let m = alpha[t * s_len + s] + beta[t * s_len + s];
            if m != NEG_INF {
                let k = ext[s] as usize;
                log_gamma[k] = logaddexp(log_gamma[k], m);
            }
        }
        for k in 0..width {
            let posterior = if log_gamma[k] == NEG_INF {
                0.0
            } else {
                (log_gamma[k] - log_p).exp()
            };
            grad[t * width + k] = lattice.lp(t, k as u32).exp() - posterior;
        }
    }
    Ok((-log_p, grad))
}

/// Convenience for training: log-softmax the logits, then run [`ctc_loss`].
pub fn ctc_loss_from_logits(
    logits: &[f64],
    t_len: usize,
    width: usize,
    target: &TargetSeq,
) -> Result<(f64, Vec<f64>)> {
    let lattice = LogProbLattice::from_logits(logits, t_len, width)?;
    ctc_loss(&lattice, target)
}

/// Exact log-probability that decoding `lattice` yields `ids` (forward pass
/// only). Supports the empty sequence; returns `-inf` for infeasible ones.
pub fn ctc_sequence_log_prob(lattice: &LogProbLattice, ids: &[u32]) -> f64 {
    if ids.iter().any(|&i| i == BLANK || i > lattice.vocab_size()) {
        return NEG_INF;
    }
    let ext = extended(ids);
    let t_len = lattice.t_len();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut prev = vec![NEG_INF; s_len];
    prev[0] = lattice.lp(0, ext[0]);
    if s_len > 1 {
        prev[1] = lattice.lp(0, ext[1]);
    }
    let mut curr = vec![NEG_INF; s_len];
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = logaddexp(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = logaddexp(acc, prev[s - 2]);
            }
            curr[s] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + lattice.lp(t, ext[s])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let mut log_p = prev[s_len - 1];
    if s_len > 1 {
        log_p = logaddexp(log_p, prev[s_len - 2]);
    }
    log_p
}

/// Exact CTC loss by enumerating every frame labeling; the definitional
/// oracle. Refuses instances with more than 10^6 alignments.
pub fn ctc_brute_force(lattice: &LogProbLattice, target: &TargetSeq) -> Result<f64> {
    let width = lattice.width();
    let t_len = lattice.t_len();
    let count = (width as f64).powi(t_len as i32);
    if count > 1e6 {
        return Err(Error::invalid(format!(
            "{width}^{t_len} alignments exceed the brute-force limit"
        )));
    }
    for &id in target.ids() {
        if id > lattice.vocab_size() {
            return Err(Error::invalid(format!("target id {id} out of vocabulary")));
        }
    }
    let mut assignment = vec![0u32; t_len];
    let mut total = 0.0f64;
    loop {
        let seq: Vec<u32> = assignment.clone();
        if collapse(&seq) == target.ids() {
            let logp: f64 = (0..t_len).map(|t| lattice.lp(t, assignment[t])).sum();
            total += logp.exp();
        }
        // Odometer increment over base-`width` digits.
        let mut pos = 0;
        loop {
            if pos == t_len {
                return Ok(if total > 0.0 {
                    -total.ln()
                } else {
                    f64::INFINITY
                });
            }
            assignment[pos] += 1;
            if (assignment[pos] as usize) < width {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

/// Per-frame argmax, collapse repeats, drop blanks. `log_prob` is the sum
/// of the chosen frame log-probabilities.
pub fn greedy_decode(lattice: &LogProbLattice) -> DecodeResult {
    let mut frames = Vec::with_capacity(lattice.t_len());
    let mut log_prob = 0.0;
    for t in 0..lattice.t_len() {
        let mut best = 0u32;
        let mut best_lp = lattice.lp(t, 0);
        for k in 1..lattice.width() as u32 {
            let lp = lattice.lp(t, k);
            if lp > best_lp {
                best = k;
                best_lp = lp;
            }
        }
        frames.push(best);
        log_prob += best_lp;
    }
    DecodeResult {
        ids: collapse(&frames),
        log_prob,
        frame_alignment: Some(frames),
    }
}

/// Prefix beam search with exact blank/non-blank mass merging per prefix.
///
/// Ties are broken lexicographically by token-id sequence so results are
/// deterministic. The returned `log_prob` is the exact CTC marginal of the
/// returned sequence, and the decoder never returns a sequence scoring
/// below the greedy path.
pub fn beam_decode(lattice: &LogProbLattice, beam_width: usize) -> DecodeResult {
    let beam_width = beam_width.max(1);
    let t_len = lattice.t_len();
    let vocab = lattice.vocab_size();

    // (prefix -> (log p ending in blank, log p ending in non-blank))
    let mut beams: Vec<(Vec<u32>, (f64, f64))> = vec![(Vec::new(), (0.0, NEG_INF))];
    let mut next: HashMap<Vec<u32>, (f64, f64)> = HashMap::new();
    for t in 0..t_len {
        next.clear();
        for (prefix, (pb, pnb)) in &beams {
            let total = logaddexp(*pb, *pnb);
            let blank_lp = lattice.lp(t, BLANK);
            {
                let e = next.entry(prefix.clone()).or_insert((NEG_INF, NEG_INF));
                e.0 = logaddexp(e.0, total + blank_lp);
            }
            let last = prefix.last().copied();
            for c in 1..=vocab {
                let p_c = lattice.lp(t, c);
                if last == Some(c) {
                    // Same symbol again: repeat within the current emission
                    // keeps the prefix; a fresh token needs a blank first.
                    let e = next.entry(prefix.clone()).or_insert((NEG_INF, NEG_INF));
                    e.1 = logaddexp(e.1, pnb + p_c);
                    if *pb != NEG_INF {
                        let mut ext = prefix.clone();
                        ext.push(c);
                        let e = next.entry(ext).or_insert((NEG_INF, NEG_INF));
                        e.1 = logaddexp(e.1, pb + p_c);
                    }
                } else {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((NEG_INF, NEG_INF));
                    e.1 = logaddexp(e.1, total + p_c);
                }
            }
        }
        let mut merged: Vec<(Vec<u32>, (f64, f64))> = next.drain().collect();
        merged.sort_by(|a, b| {
            let sa = logaddexp(a.1 .0, a.1 .1);
            let sb = logaddexp(b.1 .0, b.1 .1);
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        merged.truncate(beam_width);
        beams = merged;
    }

    let best_beam = beams
        .first()
        .map(|(prefix, _)| prefix.clone())
        .unwrap_or_default();
    let beam_score = ctc_sequence_log_prob(lattice, &best_beam);
    let greedy = greedy_decode(lattice);
    let greedy_score = ctc_sequence_log_prob(lattice, &greedy.ids);
    let (ids, log_prob) = if greedy_score > beam_score {
        (greedy.ids, greedy_score)
    } else {
        (best_beam, beam_score)
    };
    DecodeResult {
        ids,
        log_prob,
        frame_alignment: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_lattice(t_len: usize, width: usize) -> LogProbLattice {
        let lp = (1.0 / width as f64).ln();
        LogProbLattice::from_rows(vec![lp; t_len * width], t_len, width).unwrap()
    }

    fn random_lattice(t_len: usize, width: usize, rng: &mut ChaCha8Rng) -> LogProbLattice {
        let logits: Vec<f64> = (0..t_len * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
        LogProbLattice::from_logits(&logits, t_len, width).unwrap()
    }

    fn random_feasible_target(t_len: usize, vocab: u32, max_len: usize, rng: &mut ChaCha8Rng) -> TargetSeq {
        loop {
            let l = rng.gen_range(1..=max_len);
            let ids: Vec<u32> = (0..l).map(|_| rng.gen_range(1..=vocab)).collect();
            let t = TargetSeq::new(ids).unwrap();
            if t.min_frames() <= t_len {
                return t;
            }
        }
    }

    #[test]
    fn single_frame_uniform_loss_is_ln_2() {
        let lat = uniform_lattice(1, 2);
        let target = TargetSeq::new(vec![1]).unwrap();
        let (loss, _) = ctc_loss(&lat, &target).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ctc_brute_force(&lat, &target).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn two_frame_uniform_loss_enumerates_three_alignments() {
        // Alignments {aa, a-, -a}, each probability 1/4.
        let lat = uniform_lattice(2, 2);
        let target = TargetSeq::new(vec![1]).unwrap();
        let (loss, _) = ctc_loss(&lat, &target).unwrap();
        assert!((loss - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_blank_separator() {
        let lat = uniform_lattice(2, 2);
        let target = TargetSeq::new(vec![1, 1]).unwrap();
        assert_eq!(target.min_frames(), 3);
        match ctc_loss(&lat, &target) {
            Err(Error::InfeasibleTarget(_)) => {}
            other => panic!("expected infeasible-target error, got {other:?}"),
        }
    }

    #[test]
    fn loss_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..200 {
            let t_len = rng.gen_range(1..=6);
            let vocab = rng.gen_range(1..=4u32);
            let lat = random_lattice(t_len, vocab as usize + 1, &mut rng);
            let target = random_feasible_target(t_len, vocab, 3, &mut rng);
            let (loss, _) = ctc_loss(&lat, &target).unwrap();
            let oracle = ctc_brute_force(&lat, &target).unwrap();
            assert!(
                (loss - oracle).abs() <= 1e-9,
                "trial {trial}: {loss} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let t_len = rng.gen_range(1..=8);
            let vocab = rng.gen_range(1..=5u32);
            let width = vocab as usize + 1;
            let logits: Vec<f64> = (0..t_len * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let target = random_feasible_target(t_len, vocab, 4, &mut rng);
            let (_, grad) = ctc_loss_from_logits(&logits, t_len, width, &target).unwrap();
            let h = 1e-6;
            for i in 0..logits.len() {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let (lp, _) = ctc_loss_from_logits(&plus, t_len, width, &target).unwrap();
                let (lm, _) = ctc_loss_from_logits(&minus, t_len, width, &target).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let err = (grad[i] - numeric).abs() / 1.0f64.max(grad[i].abs()).max(numeric.abs());
                assert!(err < 1e-5, "trial {trial} coord {i}: {} vs {numeric}", grad[i]);
            }
        }
    }

    #[test]
    fn forward_backward_product_is_constant_over_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let t_len = rng.gen_range(2..=8);
            let vocab = rng.gen_range(1..=4u32);
            let lat = random_lattice(t_len, vocab as usize + 1, &mut rng);
            let target = random_feasible_target(t_len, vocab, 3, &mut rng);
            let ext = extended(target.ids());
            let (alpha, beta, log_p) = forward_backward(&lat, &ext);
            let s_len = ext.len();
            for t in 0..t_len {
                let mut total = NEG_INF;
                for s in 0..s_len {
                    total = logaddexp(total, alpha[t * s_len + s] + beta[t * s_len + s]);
                }
                assert!(
                    (total - log_p).abs() < 1e-9 * log_p.abs().max(1.0),
                    "t={t}: {total} vs {log_p}"
                );
            }
        }
    }

    #[test]
    fn loss_is_positive_for_nondegenerate_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let lat = random_lattice(6, 4, &mut rng);
            let target = random_feasible_target(6, 3, 3, &mut rng);
            let (loss, _) = ctc_loss(&lat, &target).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
        }
    }

    #[test]
    fn greedy_collapses_blanks_and_repeats() {
        // Frame argmaxes [-, a, a, -, b] -> [a, b]
        let rows = [
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
        ];
        let log_probs: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.ln()).collect();
        let lat = LogProbLattice::from_rows(log_probs, 5, 3).unwrap();
        let out = greedy_decode(&lat);
        assert_eq!(out.ids, vec![1, 2]);
        assert_eq!(out.frame_alignment, Some(vec![0, 1, 1, 0, 2]));
    }

    #[test]
    fn greedy_keeps_blank_separated_repeats() {
        // [a, a, -, a] -> [a, a]
        let rows = [
            [0.1, 0.9],
            [0.1, 0.9],
            [0.9, 0.1],
            [0.1, 0.9],
        ];
        let log_probs: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.ln()).collect();
        let lat = LogProbLattice::from_rows(log_probs, 4, 2).unwrap();
        assert_eq!(greedy_decode(&lat).ids, vec![1, 1]);
    }

    #[test]
    fn greedy_on_all_blank_frames_is_empty() {
        let rows = [[0.9, 0.1], [0.9, 0.1], [0.9, 0.1]];
        let log_probs: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.ln()).collect();
        let lat = LogProbLattice::from_rows(log_probs, 3, 2).unwrap();
        assert_eq!(greedy_decode(&lat).ids, Vec::<u32>::new());
    }

    /// Enumeration oracle: total probability of every collapsed sequence.
    fn exhaustive_best(lattice: &LogProbLattice) -> (Vec<u32>, f64) {
        let width = lattice.width();
        let t_len = lattice.t_len();
        let mut totals: HashMap<Vec<u32>, f64> = HashMap::new();
        let mut assignment = vec![0u32; t_len];
        loop {
            let logp: f64 = (0..t_len).map(|t| lattice.lp(t, assignment[t])).sum();
            *totals.entry(collapse(&assignment)).or_insert(0.0) += logp.exp();
            let mut pos = 0;
            loop {
                if pos == t_len {
                    let mut best: Option<(Vec<u32>, f64)> = None;
                    for (seq, p) in totals {
                        best = match best {
                            None => Some((seq, p)),
                            Some((bseq, bp)) => {
                                if p > bp || (p == bp && seq < bseq) {
                                    Some((seq, p))
                                } else {
                                    Some((bseq, bp))
                                }
                            }
                        };
                    }
                    let (seq, p) = best.unwrap();
                    return (seq, p.ln());
                }
                assignment[pos] += 1;
                if (assignment[pos] as usize) < width {
                    break;
                }
                assignment[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..30 {
            let t_len = rng.gen_range(1..=5);
            let vocab = rng.gen_range(1..=3u32);
            let lat = random_lattice(t_len, vocab as usize + 1, &mut rng);
            let (best_seq, best_lp) = exhaustive_best(&lat);
            let width = (vocab as usize + 1).pow(t_len as u32);
            let out = beam_decode(&lat, width);
            assert_eq!(out.ids, best_seq, "trial {trial}");
            assert!((out.log_prob - best_lp).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn single_frame_beam_picks_max_symbol() {
        let rows = [[0.2, 0.5, 0.3]];
        let log_probs: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.ln()).collect();
        let lat = LogProbLattice::from_rows(log_probs, 1, 3).unwrap();
        assert_eq!(beam_decode(&lat, 4).ids, vec![1]);

        let rows = [[0.6, 0.2, 0.2]];
        let log_probs: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.ln()).collect();
        let lat = LogProbLattice::from_rows(log_probs, 1, 3).unwrap();
        assert_eq!(beam_decode(&lat, 4).ids, Vec::<u32>::new());
    }

    #[test]
    fn beam_probability_never_decreases_with_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let t_len = rng.gen_range(2..=6);
            let vocab = rng.gen_range(1..=4u32);
            let lat = random_lattice(t_len, vocab as usize + 1, &mut rng);
            let mut prev = NEG_INF;
            for width in [1usize, 2, 4, 8] {
                let out = beam_decode(&lat, width);
                assert!(
                    out.log_prob >= prev - 1e-9,
                    "trial {trial} width {width}: {} < {prev}",
                    out.log_prob
                );
                prev = out.log_prob;
            }
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..40 {
            let t_len = rng.gen_range(2..=8);
            let vocab = rng.gen_range(1..=5u32);
            let lat = random_lattice(t_len, vocab as usize + 1, &mut rng);
            let greedy = greedy_decode(&lat);
            let greedy_lp = ctc_sequence_log_prob(&lat, &greedy.ids);
            for width in [1usize, 4] {
                let out = beam_decode(&lat, width);
                assert!(out.log_prob >= greedy_lp - 1e-9);
            }
        }
    }

    #[test]
    fn sequence_log_prob_handles_empty_sequence() {
        let lat = uniform_lattice(3, 2);
        let lp = ctc_sequence_log_prob(&lat, &[]);
        assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        // Infeasible sequence scores -inf ([1,1] needs 3 frames).
        let short = uniform_lattice(2, 2);
        assert_eq!(ctc_sequence_log_prob(&short, &[1, 1]), NEG_INF);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let lat = uniform_lattice(40, 5);
        let target = TargetSeq::new(vec![1]).unwrap();
        assert!(matches!(
            ctc_brute_force(&lat, &target),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn brute_force_infeasible_target_is_infinite() {
        let lat = uniform_lattice(2, 2);
        let target = TargetSeq::new(vec![1, 1]).unwrap();
        assert_eq!(ctc_brute_force(&lat, &target).unwrap(), f64::INFINITY);
    }

    #[test]
    fn blank_separated_repeats_survive_collapse() {
        // Load-bearing for the loss semantics: a-blank-a decodes to [a, a].
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
    }

    /// Re-encodes a label sequence as a minimal alignment (blank between
    /// adjacent repeats).
    fn as_alignment(ids: &[u32]) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 && ids[i - 1] == id {
                out.push(BLANK);
            }
            out.push(id);
        }
        out
    }

    proptest! {
        #[test]
        fn collapse_is_stable_on_reencoded_outputs(
            frames in proptest::collection::vec(0u32..4, 0..40)
        ) {
            // collapse . encode is the identity on collapsed sequences, so
            // collapsing is stable once repeats are blank-separated.
            let once = collapse(&frames);
            prop_assert_eq!(collapse(&as_alignment(&once)), once);
        }

        #[test]
        fn collapse_output_has_no_blanks(
            frames in proptest::collection::vec(0u32..4, 0..40)
        ) {
            let out = collapse(&frames);
            prop_assert!(!out.contains(&BLANK));
        }
    }
}
