use rayon::prelude::*;

use super::{forward_sequence, Gpt2Model};
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub seq_len: usize,
    /// Window advance; equal to `seq_len` for non-overlapping windows.
    pub stride: usize,
    /// Windows evaluated per parallel batch.
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn non_overlapping(seq_len: usize) -> Self {
        Self {
            seq_len,
            stride: seq_len,
            batch_size: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument(
                "sequence length must be at least 2".into(),
            ));
        }
        if self.stride == 0 || self.stride > self.seq_len {
            return Err(Error::InvalidArgument(format!(
                "stride must be in 1..={}",
                self.seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::non_overlapping(2048)
    }
}

/// Summed negative log-likelihood and number of scored positions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NllSum {
    pub total: f64,
    pub count: usize,
}

impl NllSum {
    pub fn perplexity(&self) -> f64 {
        (self.total / self.count as f64).exp()
    }
}

/// `-log softmax(logits)[target]` in `f64`.
pub fn token_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

struct Window {
    start: usize,
    /// First position within the window whose next-token prediction is scored.
    first_scored: usize,
}

fn windows(len: usize, cfg: &EvalConfig) -> Vec<Window> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut scored_until = 0; // targets at absolute index <= scored_until are done
    while start + cfg.seq_len <= len {
        let first_target = (scored_until + 1).max(start + 1);
        out.push(Window {
            start,
            first_scored: first_target - 1 - start,
        });
        scored_until = start + cfg.seq_len - 1;
        start += cfg.stride;
    }
    out
}

/// Total NLL over every window of the stream, reduced in window order.
pub fn stream_nll(model: &Gpt2Model, tokens: &[u32], cfg: &EvalConfig) -> Result<NllSum> {
    cfg.validate()?;
    let ws = windows(tokens.len(), cfg);
    if ws.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "token stream of {} tokens is shorter than one {}-token window",
            tokens.len(),
            cfg.seq_len
        )));
    }
    let mut acc = NllSum::default();
    for chunk in ws.chunks(cfg.batch_size) {
        let parts: Vec<NllSum> = chunk
            .par_iter()
            .map(|w| {
                let seq = &tokens[w.start..w.start + cfg.seq_len];
                let logits = forward_sequence(model, seq, None)?;
                Ok(window_nll(&logits, seq, w.first_scored))
            })
            .collect::<Result<_>>()?;
        for p in parts {
            acc.total += p.total;
            acc.count += p.count;
        }
    }
    Ok(acc)
}

fn window_nll(logits: &Matrix, seq: &[u32], first_scored: usize) -> NllSum {
    let mut s = NllSum::default();
    for pos in first_scored..seq.len() - 1 {
        s.total += token_nll(logits.row(pos), seq[pos + 1] as usize);
        s.count += 1;
    }
    s
}

/// `exp(mean NLL)` over all predicted positions of the evaluation windows.
pub fn perplexity(model: &Gpt2Model, tokens: &[u32], cfg: &EvalConfig) -> Result<f64> {
    Ok(stream_nll(model, tokens, cfg)?.perplexity())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout() {
        let cfg = EvalConfig::non_overlapping(4);
        let ws = windows(10, &cfg);
        assert_eq!(ws.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 4]);
        assert!(ws.iter().all(|w| w.first_scored == 0));

        let sliding = EvalConfig {
            seq_len: 4,
            stride: 2,
            batch_size: 1,
        };
        let ws = windows(8, &sliding);
        assert_eq!(
            ws.iter().map(|w| w.start).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
        // window at 2 re-sees target 3; targets 4 and 5 are new
        assert_eq!(ws[1].first_scored, 1);
        assert_eq!(ws[2].first_scored, 1);
    }

    #[test]
    fn nll_of_uniform_logits() {
        let l = vec![0.0; 50];
        assert!((token_nll(&l, 3) - 50f64.ln()).abs() < 1e-14);
    }
}
