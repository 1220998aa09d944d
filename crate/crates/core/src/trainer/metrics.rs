//! Word accuracy via edit-distance alignment.

use crate::ctc::{DecodeResult, TargetSeq};
use crate::error::{Error, Result};

/// Outcome of aligning one hypothesis against one reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentStats {
    pub hits: usize,
    pub ref_len: usize,
    pub insertions: usize,
    pub edits: usize,
}

/// Levenshtein alignment over token ids. Among minimum-edit alignments the
/// one with the most matched positions is chosen, so blank-separated
/// repeats and insertions are credited consistently.
pub fn align(reference: &[u32], hypothesis: &[u32]) -> AlignmentStats {
    let n = reference.len();
    let m = hypothesis.len();
    // Cost tuple per cell: (edits, -hits, insertions); lexicographic min.
    let mut dp = vec![(0usize, 0isize, 0usize); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for j in 1..=m {
        dp[idx(0, j)] = (j, 0, j);
    }
    for i in 1..=n {
        dp[idx(i, 0)] = (i, 0, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let eq = reference[i - 1] == hypothesis[j - 1];
            let diag = dp[idx(i - 1, j - 1)];
            let sub = (
                diag.0 + usize::from(!eq),
                diag.1 - isize::from(eq),
                diag.2,
            );
            let del = dp[idx(i - 1, j)];
            let del = (del.0 + 1, del.1, del.2);
            let ins = dp[idx(i, j - 1)];
            let ins = (ins.0 + 1, ins.1, ins.2 + 1);
            dp[idx(i, j)] = sub.min(del).min(ins);
        }
    }
    let (edits, neg_hits, insertions) = dp[idx(n, m)];
    AlignmentStats {
        hits: (-neg_hits) as usize,
        ref_len: n,
        insertions,
        edits,
    }
}

/// Correctly recognized words divided by total reference words, pooled over
/// all pairs. Insertions do not reduce hits; they are reported separately
/// by [`word_accuracy_detailed`].
pub fn word_accuracy(refs: &[TargetSeq], hyps: &[DecodeResult]) -> Result<f64> {
    word_accuracy_detailed(refs, hyps).map(|(acc, _)| acc)
}

/// `(word_accuracy, insertion_rate)`.
pub fn word_accuracy_detailed(refs: &[TargetSeq], hyps: &[DecodeResult]) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::invalid("no reference sequences"));
    }
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut insertions = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let stats = align(r.ids(), &h.ids);
        hits += stats.hits;
        total += stats.ref_len;
        insertions += stats.insertions;
    }
    Ok((hits as f64 / total as f64, insertions as f64 / total as f64))
}

/// Per-sample accuracy of one aligned pair.
pub fn sample_accuracy(reference: &[u32], hypothesis: &[u32]) -> f64 {
    let stats = align(reference, hypothesis);
    stats.hits as f64 / stats.ref_len as f64
}
