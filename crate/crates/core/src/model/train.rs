use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{backward, GradScope};
use super::forward::forward_cached;
use super::{Model, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_warmup() -> usize {
    20
}
fn default_min_lr_ratio() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_grad_clip() -> f64 {
    1.0
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            warmup: default_warmup(),
            min_lr_ratio: default_min_lr_ratio(),
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            grad_clip: default_grad_clip(),
            seed: 0,
        }
    }
}

impl TrainHyper {
    /// Warmup then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub tokens_seen: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Mean next-token cross-entropy over the positions with a target, plus
/// `∂loss/∂logits` scaled by `weight`.
pub fn cross_entropy(
    logits: &[f64],
    vocab: usize,
    targets: &[Option<TokenId>],
    weight: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, target) in targets.iter().enumerate() {
        let Some(target) = target else { continue };
        let row = &logits[p * vocab..(p + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[*target as usize];
        n += 1;
        let g = &mut grad[p * vocab..(p + 1) * vocab];
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - lse).exp();
        }
        g[*target as usize] -= 1.0;
    }
    if n == 0 {
        return (0.0, grad);
    }
    let scale = weight / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (total / n as f64, grad)
}

/// Mean next-token loss over a batch of sequences; accumulates gradients.
///
/// Each sequence predicts `seq[1..]` from `seq[..len-1]`.
pub fn loss_and_grad(
    model: &Model,
    batch: &[Vec<TokenId>],
    grads: &mut ModelWeights,
    scope: GradScope,
) -> Result<f64> {
    let n_targets: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n_targets == 0 {
        return Err(Error::EmptyCorpus);
    }
    let v = model.config.vocab_size;
    let mut total = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let inputs = &seq[..seq.len() - 1];
        let targets: Vec<Option<TokenId>> = seq[1..].iter().map(|&t| Some(t)).collect();
        let cache = forward_cached(model, inputs, &[])?;
        let frac = targets.len() as f64 / n_targets as f64;
        let (loss, dlogits) = cross_entropy(&cache.logits, v, &targets, frac);
        total += loss * frac;
        backward(model, &cache, &dlogits, grads, scope)?;
    }
    Ok(total)
}

/// AdamW state over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub(crate) struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub(crate) fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects decoupled weight decay per tensor.
    pub(crate) fn step(
        &mut self,
        params: Vec<&mut [f64]>,
        grads: &[&[f64]],
        decay: &[bool],
        lr: f64,
        hyper: &TrainHyper,
    ) {
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t);
        let bc2 = 1.0 - hyper.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            let wd = if decay[i] { lr * hyper.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
                v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + 1e-8);
                p[j] -= lr * update + wd * p[j];
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub(crate) fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Draws `batch_size` windows of `seq_len + 1` tokens from `stream`.
pub(crate) fn sample_batch<R: Rng>(
    stream: &[TokenId],
    batch_size: usize,
    seq_len: usize,
    rng: &mut R,
) -> Vec<Vec<TokenId>> {
    let window = (seq_len + 1).min(stream.len());
    let last_start = stream.len() - window;
    (0..batch_size)
        .map(|_| {
            let s = rng.gen_range(0..=last_start);
            stream[s..s + window].to_vec()
        })
        .collect()
}

/// Trains a freshly initialized model.
pub fn train(config: ModelConfig, stream: &[TokenId], hyper: &TrainHyper) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(config)?;
    let report = train_from(&mut model, stream, hyper)?;
    Ok((model, report))
}

/// Continues training `model` in place on random windows of `stream`.
pub fn train_from(model: &mut Model, stream: &[TokenId], hyper: &TrainHyper) -> Result<TrainReport> {
    if stream.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    if hyper.seq_len == 0 || hyper.batch_size == 0 || hyper.seq_len > model.config.max_seq {
        return Err(Error::Config(format!(
            "seq_len {} and batch_size {} must be positive and seq_len ≤ max_seq {}",
            hyper.seq_len, hyper.batch_size, model.config.max_seq
        )));
    }
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let shapes: Vec<usize> = model.weights.tensors().iter().map(|t| t.len()).collect();
    let decay: Vec<bool> = shapes.iter().map(|&n| n > d).collect();
    let mut opt = AdamW::new(&shapes);
    let mut report = TrainReport {
        losses: Vec::with_capacity(hyper.steps),
        tokens_seen: 0,
    };
    for step in 0..hyper.steps {
        let batch = sample_batch(stream, hyper.batch_size, hyper.seq_len, &mut rng);
        let mut grads = ModelWeights::zeros(&model.config);
        let loss = loss_and_grad(model, &batch, &mut grads, GradScope::All)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        report.losses.push(loss);
        report.tokens_seen += batch.iter().map(|s| s.len() - 1).sum::<usize>();
        clip_grad_norm(&mut grads.tensors_mut(), hyper.grad_clip);
        let lr = hyper.lr_at(step);
        opt.step(model.weights.tensors_mut(), &grads.tensors(), &decay, lr, hyper);
    }
    model.weights.round_to_f32();
    if !model.weights.is_finite() {
        return Err(Error::NonFiniteLoss { step: hyper.steps });
    }
    Ok(report)
}

/// Mean next-token loss over consecutive windows of `stream`.
pub fn evaluate_loss(model: &Model, stream: &[TokenId], seq_len: usize) -> Result<f64> {
    if stream.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let seq_len = seq_len.min(model.config.max_seq).max(1);
    let v = model.config.vocab_size;
    let mut total = 0.0;
    let mut n = 0usize;
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq_len + 1).min(stream.len());
        let inputs = &stream[start..end - 1];
        let targets: Vec<Option<TokenId>> = stream[start + 1..end].iter().map(|&t| Some(t)).collect();
        let cache = forward_cached(model, inputs, &[])?;
        let (loss, _) = cross_entropy(&cache.logits, v, &targets, 1.0);
        total += loss * targets.len() as f64;
        n += targets.len();
        start = end - 1;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn tiny(vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab,
            max_seq: 32,
            rope_base: 10_000.0,
            seed,
        }
    }

    fn batch_loss(model: &Model, batch: &[Vec<TokenId>]) -> f64 {
        let mut g = ModelWeights::zeros(&model.config);
        loss_and_grad(model, batch, &mut g, GradScope::All).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = Model::new(tiny(20, 3)).unwrap();
        // Larger unembedding so every tensor sees a non-trivial gradient.
        model
            .weights
            .unembed
            .as_mut_slice()
            .iter_mut()
            .for_each(|x| *x *= 20.0);
        let batch = vec![vec![1, 5, 7, 2, 9, 3, 3, 11], vec![4, 4, 8, 0, 19]];
        let mut grads = ModelWeights::zeros(&model.config);
        loss_and_grad(&model, &batch, &mut grads, GradScope::All).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_tensors = analytic.len();
        let mut probes = 0;
        while probes < 40 {
            let ti = rng.gen_range(0..n_tensors);
            let j = rng.gen_range(0..analytic[ti].len());
            let g = analytic[ti][j];
            if g.abs() < 1e-6 {
                continue;
            }
            let h = 1e-5;
            let mut plus = model.clone();
            plus.weights.tensors_mut()[ti][j] += h;
            let mut minus = model.clone();
            minus.weights.tensors_mut()[ti][j] -= h;
            let numeric = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
            let rel = (numeric - g).abs() / numeric.abs().max(g.abs());
            assert!(
                rel < 1e-3,
                "tensor {ti} index {j}: analytic {g} numeric {numeric}"
            );
            probes += 1;
        }
    }

    #[test]
    fn ablated_gradients_match_finite_differences() {
        use crate::model::{forward_cached, Intervention};
        let model = Model::new(tiny(12, 8)).unwrap();
        let ids = [1u32, 5, 7, 2, 9];
        let targets: Vec<Option<u32>> = vec![Some(3), Some(4), None, Some(1), Some(0)];
        let ivs = [Intervention::AblateFfn {
            layer: 0,
            position: 1,
        }];
        let loss = |m: &Model| {
            let c = forward_cached(m, &ids, &ivs).unwrap();
            cross_entropy(&c.logits, 12, &targets, 1.0).0
        };
        let cache = forward_cached(&model, &ids, &ivs).unwrap();
        let (_, dl) = cross_entropy(&cache.logits, 12, &targets, 1.0);
        let mut grads = ModelWeights::zeros(&model.config);
        backward(&model, &cache, &dl, &mut grads, GradScope::All).unwrap();
        let probe = |get: &dyn Fn(&mut ModelWeights) -> &mut f64, g: f64| {
            let h = 1e-5;
            let mut p = model.clone();
            *get(&mut p.weights) += h;
            let mut m = model.clone();
            *get(&mut m.weights) -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((num - g).abs() <= 1e-6 + 1e-4 * num.abs(), "{num} vs {g}");
        };
        probe(
            &|w| &mut w.layers[0].w_down.as_mut_slice()[3],
            grads.layers[0].w_down.as_slice()[3],
        );
        probe(
            &|w| &mut w.embed.as_mut_slice()[5 * 16 + 2],
            grads.embed.as_slice()[5 * 16 + 2],
        );
    }

    #[test]
    fn embeddings_only_scope_skips_core() {
        let model = Model::new(tiny(20, 3)).unwrap();
        let mut grads = ModelWeights::zeros(&model.config);
        loss_and_grad(&model, &[vec![1, 2, 3, 4]], &mut grads, GradScope::EmbeddingsOnly).unwrap();
        assert!(grads
            .layers
            .iter()
            .all(|l| l.wq.as_slice().iter().all(|&x| x == 0.0)));
        assert!(grads.final_norm.iter().all(|&x| x == 0.0));
        assert!(grads.embed.as_slice().iter().any(|&x| x != 0.0));
        assert!(grads.unembed.as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let model = Model::new(tiny(50, 1)).unwrap();
        let loss = batch_loss(&model, &[(0..30).map(|i| (i * 7 % 50) as u32).collect()]);
        assert!((loss - (50f64).ln()).abs() < 0.05, "{loss}");
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let stream: Vec<u32> = (0..200).map(|i| (i % 7) as u32).collect();
        let hyper = TrainHyper {
            steps: 3,
            lr: 0.0,
            batch_size: 2,
            seq_len: 8,
            ..TrainHyper::default()
        };
        let (m, _) = train(tiny(10, 4), &stream, &hyper).unwrap();
        assert_eq!(m, Model::new(tiny(10, 4)).unwrap());
    }

    #[test]
    fn memorizes_a_repeated_corpus() {
        // Period-3 stream "a b c a b c ...", about a thousand tokens.
        let stream: Vec<u32> = (0..999).map(|i| (i % 3) as u32 + 1).collect();
        let hyper = TrainHyper {
            steps: 500,
            batch_size: 4,
            seq_len: 16,
            lr: 1e-2,
            ..TrainHyper::default()
        };
        let (m, report) = train(tiny(8, 2), &stream, &hyper).unwrap();
        assert!(report.final_loss().unwrap() < 0.1, "{:?}", report.final_loss());
        let tr = forward(&m, &[1, 2], &[]).unwrap();
        assert_eq!(crate::linalg::argmax(tr.logits.row(1)), 3);
        assert!(evaluate_loss(&m, &stream[..200], 16).unwrap() < 0.1);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train(tiny(10, 0), &[1], &TrainHyper::default()),
            Err(Error::EmptyCorpus)
        ));
        let ce = cross_entropy(&[0.0, 0.0], 2, &[Some(1)], 1.0);
        assert!((ce.0 - 2f64.ln()).abs() < 1e-15);
        assert_eq!(ce.1, vec![0.5, -0.5]);
    }
}
