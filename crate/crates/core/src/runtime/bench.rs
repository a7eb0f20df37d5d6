use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{forward_logits, Gpt2Model};
use crate::{Error, Result};

/// Multiply-add FLOPs of one forward pass, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopCount {
    /// K/Q/V/O/Up/Down sites.
    pub linear: u64,
    /// Subset of `linear` spent in factorized sites.
    pub factorized: u64,
    pub attention: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.linear + self.attention + self.head
    }
}

/// Exact FLOP count for `batch` sequences of `seq` tokens.
pub fn flop_count(model: &Gpt2Model, batch: usize, seq: usize) -> FlopCount {
    let tokens = batch * seq;
    let mut f = FlopCount::default();
    for block in &model.blocks {
        for site in [
            &block.k,
            &block.q,
            &block.v,
            &block.o,
            &block.up,
            &block.down,
        ] {
            let n = site.flops(tokens);
            f.linear += n;
            if site.is_factorized() {
                f.factorized += n;
            }
        }
        // causal scores and weighted sum: seq·(seq+1)/2 pairs, each a length-`hidden` dot product
        f.attention += (batch * 2 * 2 * model.hidden() * seq * (seq + 1) / 2) as u64;
    }
    f.head = model.head.flops(tokens);
    f
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub batch: usize,
    pub seq: usize,
    pub flops: FlopCount,
    /// Seconds per timed run.
    pub run_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub tokens_per_sec: f64,
}

/// Times `runs` forward passes (after one warm-up) on seeded random tokens.
pub fn bench(
    model: &Gpt2Model,
    batch: usize,
    seq: usize,
    runs: usize,
    seed: u64,
) -> Result<BenchResult> {
    if batch == 0 || seq == 0 {
        return Err(Error::InvalidArgument(
            "batch and seq must be positive".into(),
        ));
    }
    let runs = runs.max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.vocab() as u32;
    let tokens: Vec<Vec<u32>> = (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(0..vocab)).collect())
        .collect();

    forward_logits(model, &tokens)?;
    let mut run_seconds = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = forward_logits(model, &tokens)?;
        std::hint::black_box(out);
        run_seconds.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = run_seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let median_seconds = sorted[sorted.len() / 2];
    Ok(BenchResult {
        batch,
        seq,
        flops: flop_count(model, batch, seq),
        run_seconds,
        median_seconds,
        tokens_per_sec: (batch * seq) as f64 / median_seconds,
    })
}
