use rayon::prelude::*;

use super::Gpt2Model;
use crate::container::MatrixType;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Receives the input operand `X` of each linear site during a forward pass.
pub trait ActivationSink {
    /// `types` lists every site of `layer` that consumes `x` (K, Q and V share one input).
    fn record(&mut self, layer: usize, types: &[MatrixType], x: &Matrix);
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn check_tokens(model: &Gpt2Model, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Runtime("empty token sequence".into()));
    }
    if tokens.len() > model.manifest.context {
        return Err(Error::Runtime(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            model.manifest.context
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= model.vocab()) {
        return Err(Error::Runtime(format!(
            "token {t} out of range for vocabulary of {}",
            model.vocab()
        )));
    }
    Ok(())
}

/// Logits (`seq × vocab`) for one sequence, optionally reporting site inputs.
pub fn forward_sequence(
    model: &Gpt2Model,
    tokens: &[u32],
    mut sink: Option<&mut dyn ActivationSink>,
) -> Result<Matrix> {
    check_tokens(model, tokens)?;
    let t = tokens.len();
    let d = model.hidden();
    let heads = model.manifest.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut h = Matrix::from_fn(t, d, |i, j| {
        model.token_embed[(tokens[i] as usize, j)] + model.pos_embed[(i, j)]
    });

    let mut probs = vec![0.0; t];
    for (layer, block) in model.blocks.iter().enumerate() {
        let a = block.ln_attn.forward(&h);
        if let Some(s) = sink.as_deref_mut() {
            s.record(layer, &[MatrixType::K, MatrixType::Q, MatrixType::V], &a);
        }
        let q = block.q.forward(&a);
        let k = block.k.forward(&a);
        let v = block.v.forward(&a);

        let mut ctx = Matrix::zeros(t, d);
        for head in 0..heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..t {
                let qi = &q.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in probs[..=i].iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *p = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    max = max.max(*p);
                }
                let mut z = 0.0;
                for p in probs[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let out = &mut ctx.row_mut(i)[cols.clone()];
                for (j, p) in probs[..=i].iter().enumerate() {
                    let w = p / z;
                    for (o, vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += w * vj;
                    }
                }
            }
        }
        if let Some(s) = sink.as_deref_mut() {
            s.record(layer, &[MatrixType::O], &ctx);
        }
        h.add_assign(&block.o.forward(&ctx))?;

        let m = block.ln_mlp.forward(&h);
        if let Some(s) = sink.as_deref_mut() {
            s.record(layer, &[MatrixType::Up], &m);
        }
        let mut u = block.up.forward(&m);
        u.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
        if let Some(s) = sink.as_deref_mut() {
            s.record(layer, &[MatrixType::Down], &u);
        }
        h.add_assign(&block.down.forward(&u))?;
    }

    let f = model.ln_final.forward(&h);
    Ok(model.head.forward(&f))
}

/// Logits for a batch of sequences (`batch × seq × vocab`), evaluated in parallel.
pub fn forward_logits(model: &Gpt2Model, batch: &[Vec<u32>]) -> Result<Vec<Matrix>> {
    batch
        .par_iter()
        .map(|seq| forward_sequence(model, seq, None))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{zero_model, SyntheticConfig};

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-3.0) + 0.003_637_392_081_773_0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let cfg = SyntheticConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab: 11,
            context: 6,
            ..SyntheticConfig::default()
        };
        let bias: Vec<f64> = (0..11).map(|i| i as f64 * 0.25 - 1.0).collect();
        let model = Gpt2Model::from_container(&zero_model(&cfg, Some(&bias))).unwrap();
        let logits = forward_logits(&model, &[vec![1, 2, 3], vec![10, 0]]).unwrap();
        for l in logits {
            for i in 0..l.rows() {
                for (a, b) in l.row(i).iter().zip(&bias) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let cfg = SyntheticConfig {
            layers: 1,
            hidden: 4,
            heads: 1,
            vocab: 5,
            context: 3,
            ..SyntheticConfig::default()
        };
        let model = Gpt2Model::from_container(&zero_model(&cfg, None)).unwrap();
        assert!(forward_sequence(&model, &[5], None).is_err());
        assert!(forward_sequence(&model, &[0, 1, 2, 3], None).is_err());
        assert!(forward_sequence(&model, &[], None).is_err());
    }
}
