use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `d×d`, applied as `x·Wᵀ`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    /// `d_ff×d`
    pub w_gate: Matrix,
    /// `d_ff×d`
    pub w_up: Matrix,
    /// `d×d_ff`
    pub w_down: Matrix,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// Input embeddings, `V×d`.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// Output unembeddings (LM head), `V×d`.
    pub unembed: Matrix,
}

impl ModelWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![0.0; d],
            w_gate: Matrix::zeros(config.d_ff, d),
            w_up: Matrix::zeros(config.d_ff, d),
            w_down: Matrix::zeros(d, config.d_ff),
        };
        Self {
            embed: Matrix::zeros(config.vocab_size, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![0.0; d],
            unembed: Matrix::zeros(config.vocab_size, d),
        }
    }

    /// Seeded initialization. Values are rounded to f32 so that a freshly
    /// initialized model survives a checkpoint round trip unchanged.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let f = config.d_ff;
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let embed = Matrix::randn(config.vocab_size, d, 1.0, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::randn(d, d, std_d, &mut rng),
                wk: Matrix::randn(d, d, std_d, &mut rng),
                wv: Matrix::randn(d, d, std_d, &mut rng),
                wo: Matrix::randn(d, d, std_d / depth, &mut rng),
                ffn_norm: vec![1.0; d],
                w_gate: Matrix::randn(f, d, std_d, &mut rng),
                w_up: Matrix::randn(f, d, std_d, &mut rng),
                w_down: Matrix::randn(d, f, std_f / depth, &mut rng),
            })
            .collect();
        let unembed = Matrix::randn(config.vocab_size, d, 0.02, &mut rng);
        let mut w = Self {
            embed,
            layers,
            final_norm: vec![1.0; d],
            unembed,
        };
        w.round_to_f32();
        w
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embed.as_slice()];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                l.wq.as_slice(),
                l.wk.as_slice(),
                l.wv.as_slice(),
                l.wo.as_slice(),
                l.ffn_norm.as_slice(),
                l.w_gate.as_slice(),
                l.w_up.as_slice(),
                l.w_down.as_slice(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.unembed.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embed.as_mut_slice()];
        for l in &mut self.layers {
            out.extend([
                l.attn_norm.as_mut_slice(),
                l.wq.as_mut_slice(),
                l.wk.as_mut_slice(),
                l.wv.as_mut_slice(),
                l.wo.as_mut_slice(),
                l.ffn_norm.as_mut_slice(),
                l.w_gate.as_mut_slice(),
                l.w_up.as_mut_slice(),
                l.w_down.as_mut_slice(),
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(self.unembed.as_mut_slice());
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over every parameter except embedding/unembedding rows at or
    /// beyond `vocab_rows`. Pass the full vocabulary size to hash everything.
    pub fn hash_core(&self, vocab_rows: usize) -> String {
        let d = self.embed.cols();
        let mut h = Sha256::new();
        let tensors = self.tensors();
        let last = tensors.len() - 1;
        for (i, t) in tensors.into_iter().enumerate() {
            let t = if i == 0 || i == last {
                &t[..vocab_rows.min(t.len() / d.max(1)) * d]
            } else {
                t
            };
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// A configured model: the architecture plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Vocabulary size before any whole-word rows were appended.
    pub base_vocab: usize,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config);
        let base_vocab = config.vocab_size;
        Ok(Self {
            config,
            weights,
            base_vocab,
        })
    }

    pub fn from_parts(config: ModelConfig, weights: ModelWeights, base_vocab: usize) -> Result<Self> {
        config.validate()?;
        let expect = ModelWeights::zeros(&config);
        let shapes_match = weights.layers.len() == config.n_layers
            && weights
                .tensors()
                .iter()
                .zip(expect.tensors())
                .all(|(a, b)| a.len() == b.len());
        if !shapes_match || weights.embed.rows() != config.vocab_size {
            return Err(Error::InvalidModelConfig(
                "weight shapes do not match config".into(),
            ));
        }
        if base_vocab > config.vocab_size {
            return Err(Error::InvalidModelConfig(format!(
                "base vocabulary {base_vocab} exceeds vocab_size {}",
                config.vocab_size
            )));
        }
        Ok(Self {
            config,
            weights,
            base_vocab,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn embedding(&self, id: u32) -> &[f64] {
        self.weights.embed.row(id as usize)
    }

    /// Appends one embedding row and one unembedding row, returning the new id.
    pub fn push_token(&mut self, e: &[f64], u: &[f64]) -> Result<u32> {
        self.weights.embed.push_row(e)?;
        self.weights.unembed.push_row(u)?;
        self.config.vocab_size += 1;
        Ok((self.config.vocab_size - 1) as u32)
    }

    /// Hash of the parameters that existed before any vocabulary expansion.
    pub fn core_hash(&self) -> String {
        self.weights.hash_core(self.base_vocab)
    }
}
