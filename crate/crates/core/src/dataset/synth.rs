//! Synthetic signal generation standing in for recorded facial-motion data.
//!
//! Every token id gets a fixed multi-channel template: per channel-axis
//! series, a sum of 2-4 Hann-windowed sinusoid bursts with token-keyed
//! frequencies. Participants contribute per-channel amplitude/phase offsets
//! and a small frequency warp, and each drawn sample adds i.i.d. Gaussian
//! jitter. Templates are re-drawn at construction until all pairs are
//! decorrelated, so tokens stay separable by construction.

use crate::error::{Error, Result};
use crate::rng::rng_from_parts;
use crate::signal::RawWindow;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

pub const SYNTH_CHANNELS: usize = 6;
pub const SYNTH_AXES: usize = 6;
pub const SYNTH_SAMPLE_RATE_HZ: f64 = 50.0;

/// Maximum allowed normalized cross-correlation between templates of
/// distinct tokens, checked at a canonical window length.
pub const TEMPLATE_CORR_LIMIT: f64 = 0.9;

/// Jitter standard deviation relative to each series' template RMS.
const JITTER_REL_STD: f64 = 0.08;

/// Canonical length at which template decorrelation is enforced.
const CORR_CHECK_LEN: usize = 128;

#[derive(Debug, Clone)]
struct Burst {
    freq_hz: f64,
    amp: f64,
    phase: f64,
    start_frac: f64,
    len_frac: f64,
}

#[derive(Debug, Clone)]
struct TokenTemplate {
    /// One burst list per channel-axis series, channel-major.
    series: Vec<Vec<Burst>>,
}

#[derive(Debug, Clone)]
struct ParticipantStyle {
    /// Per-channel amplitude scaling.
    amp: Vec<f64>,
    /// Per-channel phase offset in radians.
    phase: Vec<f64>,
    /// Global frequency warp factor.
    warp: f64,
}

impl TokenTemplate {
    fn draw(token_id: u32, retry: u64) -> Self {
        let mut rng = rng_from_parts(&[0x5353_4952, token_id as u64, retry]);
        let n_series = SYNTH_CHANNELS * SYNTH_AXES;
        let mut series = Vec::with_capacity(n_series);
        for _ in 0..n_series {
            let n_bursts = rng.gen_range(2..=4usize);
            let bursts = (0..n_bursts)
                .map(|_| {
                    let start_frac = rng.gen_range(0.0..0.4);
                    Burst {
                        // Keep content above the 2 Hz high-pass cutoff.
                        freq_hz: rng.gen_range(2.5..12.0),
                        amp: rng.gen_range(0.5..1.5),
                        phase: rng.gen_range(0.0..2.0 * PI),
                        start_frac,
                        len_frac: rng.gen_range(0.45..(1.0 - start_frac).max(0.46)),
                    }
                })
                .collect();
            series.push(bursts);
        }
        Self { series }
    }

    /// Evaluates one series at time step `t` of a `t_len` window.
    fn eval(&self, series_idx: usize, t: usize, t_len: usize, style: Option<&ParticipantStyle>) -> f64 {
        let channel = series_idx / SYNTH_AXES;
        let (amp_scale, phase_off, warp) = match style {
            Some(s) => (s.amp[channel], s.phase[channel], s.warp),
            None => (1.0, 0.0, 1.0),
        };
        let frac = t as f64 / t_len as f64;
        let secs = t as f64 / SYNTH_SAMPLE_RATE_HZ;
        let mut v = 0.0;
        for b in &self.series[series_idx] {
            let rel = (frac - b.start_frac) / b.len_frac;
            if (0.0..1.0).contains(&rel) {
                let env = 0.5 - 0.5 * (2.0 * PI * rel).cos();
                v += amp_scale * b.amp * env * (2.0 * PI * b.freq_hz * warp * secs + b.phase + phase_off).sin();
            }
        }
        v
    }

    fn render(&self, t_len: usize, style: Option<&ParticipantStyle>) -> Vec<Vec<f64>> {
        (0..self.series.len())
            .map(|s| (0..t_len).map(|t| self.eval(s, t, t_len, style)).collect())
            .collect()
    }
}

impl ParticipantStyle {
    fn draw(participant_id: u32) -> Self {
        let mut rng = rng_from_parts(&[0x7061_7274, participant_id as u64]);
        Self {
            amp: (0..SYNTH_CHANNELS).map(|_| rng.gen_range(0.6..1.4)).collect(),
            phase: (0..SYNTH_CHANNELS).map(|_| rng.gen_range(-1.1..1.1)).collect(),
            warp: rng.gen_range(0.9..1.1),
        }
    }
}

fn normalized_corr(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs()
    }
}

/// Maximum zero-lag normalized cross-correlation over the channel-axis
/// series of two equally shaped windows.
pub fn max_series_correlation(a: &RawWindow, b: &RawWindow) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..a.channels {
        for ax in 0..a.axes {
            worst = worst.max(normalized_corr(&a.series(c, ax), &b.series(c, ax)));
        }
    }
    worst
}

/// Deterministic generator of per-token raw windows.
pub struct Synthesizer {
    vocab_size: u32,
    templates: Vec<TokenTemplate>,
}

impl Synthesizer {
    /// Builds decorrelated templates for token ids `1..=vocab_size`.
    pub fn new(vocab_size: u32) -> Self {
        assert!(vocab_size >= 1, "vocabulary must be non-empty");
        let mut templates: Vec<TokenTemplate> = Vec::with_capacity(vocab_size as usize);
        let mut rendered: Vec<Vec<Vec<f64>>> = Vec::with_capacity(vocab_size as usize);
        for token in 1..=vocab_size {
            let mut retry = 0u64;
            loop {
                let cand = TokenTemplate::draw(token, retry);
                let cand_rendered = cand.render(CORR_CHECK_LEN, None);
                let collides = rendered.iter().any(|prev| {
                    cand_rendered
                        .iter()
                        .zip(prev)
                        .any(|(x, y)| normalized_corr(x, y) >= TEMPLATE_CORR_LIMIT)
                });
                if !collides {
                    templates.push(cand);
                    rendered.push(cand_rendered);
                    break;
                }
                retry += 1;
                assert!(retry < 64, "could not decorrelate template for token {token}");
            }
        }
        Self { vocab_size, templates }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Renders one window for `(token_id, participant_id)`. The template and
    /// participant style are fixed; `seed` only drives the additive jitter,
    /// so the same arguments always reproduce the same window bit for bit.
    pub fn synthesize(
        &self,
        token_id: u32,
        participant_id: u32,
        t_len: usize,
        seed: u64,
    ) -> Result<RawWindow> {
        if token_id == 0 || token_id > self.vocab_size {
            return Err(Error::invalid(format!(
                "token id {token_id} out of range 1..={}",
                self.vocab_size
            )));
        }
        if t_len < 16 {
            return Err(Error::invalid(format!("window length {t_len} < 16")));
        }
        let template = &self.templates[(token_id - 1) as usize];
        let style = ParticipantStyle::draw(participant_id);
        let series = template.render(t_len, Some(&style));

        let mut jitter_rng = rng_from_parts(&[seed, token_id as u64, participant_id as u64, t_len as u64]);
        let n_series = SYNTH_CHANNELS * SYNTH_AXES;
        let mut values = vec![0f32; t_len * n_series];
        for (s_idx, s) in series.iter().enumerate() {
            let rms = (s.iter().map(|v| v * v).sum::<f64>() / t_len as f64).sqrt();
            let noise = Normal::new(0.0, (JITTER_REL_STD * rms).max(1e-4)).unwrap();
            for (t, v) in s.iter().enumerate() {
                values[t * n_series + s_idx] = (v + noise.sample(&mut jitter_rng)) as f32;
            }
        }
        RawWindow::new(values, t_len, SYNTH_CHANNELS, SYNTH_AXES, SYNTH_SAMPLE_RATE_HZ)
    }

    /// Renders a multi-token window of total length `t_len` by splitting the
    /// window evenly across the tokens (sentence-style recording).
    pub fn synthesize_sequence(
        &self,
        token_ids: &[u32],
        participant_id: u32,
        t_len: usize,
        seed: u64,
    ) -> Result<RawWindow> {
        if token_ids.is_empty() {
            return Err(Error::invalid("token sequence must be non-empty"));
        }
        let n = token_ids.len();
        let mut values = Vec::with_capacity(t_len * SYNTH_CHANNELS * SYNTH_AXES);
        let mut consumed = 0usize;
        for (i, &tok) in token_ids.iter().enumerate() {
            let seg = if i + 1 == n { t_len - consumed } else { t_len / n };
            let w = self.synthesize(tok, participant_id, seg, seed.wrapping_add(i as u64))?;
            values.extend_from_slice(&w.values);
            consumed += seg;
        }
        RawWindow::new(values, t_len, SYNTH_CHANNELS, SYNTH_AXES, SYNTH_SAMPLE_RATE_HZ)
    }

    /// Largest pairwise template correlation, for diagnostics and tests.
    pub fn max_template_correlation(&self) -> f64 {
        let rendered: Vec<_> = self.templates.iter().map(|t| t.render(CORR_CHECK_LEN, None)).collect();
        let mut worst = 0.0f64;
        for i in 0..rendered.len() {
            for j in i + 1..rendered.len() {
                for (x, y) in rendered[i].iter().zip(&rendered[j]) {
                    worst = worst.max(normalized_corr(x, y));
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic() {
        let synth = Synthesizer::new(4);
        let a = synth.synthesize(2, 1, 80, 77).unwrap();
        let b = synth.synthesize(2, 1, 80, 77).unwrap();
        assert_eq!(a, b);
        let c = synth.synthesize(2, 1, 80, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn window_shape_matches_request() {
        let synth = Synthesizer::new(3);
        let w = synth.synthesize(1, 0, 80, 0).unwrap();
        assert_eq!((w.t_len, w.channels, w.axes), (80, 6, 6));
        assert_eq!(w.sample_rate_hz, 50.0);
    }

    #[test]
    fn distinct_tokens_are_decorrelated() {
        let synth = Synthesizer::new(24);
        assert!(synth.max_template_correlation() < TEMPLATE_CORR_LIMIT);
        // Also holds on rendered windows including jitter.
        let a = synth.synthesize(1, 2, 80, 5).unwrap();
        let b = synth.synthesize(2, 2, 80, 5).unwrap();
        assert!(max_series_correlation(&a, &b) < TEMPLATE_CORR_LIMIT);
    }

    #[test]
    fn rejects_out_of_range_token() {
        let synth = Synthesizer::new(4);
        assert!(synth.synthesize(0, 0, 80, 0).is_err());
        assert!(synth.synthesize(5, 0, 80, 0).is_err());
        assert!(synth.synthesize(1, 0, 8, 0).is_err());
    }

    #[test]
    fn sequence_window_splits_evenly() {
        let synth = Synthesizer::new(5);
        let w = synth.synthesize_sequence(&[1, 2], 0, 180, 3).unwrap();
        assert_eq!(w.t_len, 180);
        let w3 = synth.synthesize_sequence(&[1, 2, 3], 0, 180, 3).unwrap();
        assert_eq!(w3.t_len, 180);
    }

    #[test]
    fn participants_differ_but_share_token_structure() {
        let synth = Synthesizer::new(4);
        let p0 = synth.synthesize(1, 0, 80, 9).unwrap();
        let p1 = synth.synthesize(1, 1, 80, 9).unwrap();
        assert_ne!(p0, p1);
    }
}
