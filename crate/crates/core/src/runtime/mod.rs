//! Minimal GPT-2-style decoder for validating compressed models.

mod bench;
mod eval;
mod forward;
mod model;

pub use bench::{bench, flop_count, BenchResult, FlopCount};
pub use eval::{perplexity, stream_nll, token_nll, EvalConfig, NllSum};
pub use forward::{forward_logits, forward_sequence, ActivationSink};
pub use model::{Block, Gpt2Model, LayerNorm, Linear, LinearWeight, EXECUTED_TYPES};
