use serde::{Deserialize, Serialize};

use super::{Model, RMS_EPS};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::tokenizer::TokenId;

/// A change applied to the residual stream during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    /// Replace `hidden[layer][position]` with `vector` before layer `layer`
    /// runs. `layer == 0` patches the embedding; `layer == n_layers` patches
    /// the stream entering the final norm.
    PatchHidden {
        layer: usize,
        position: usize,
        vector: Vec<f64>,
    },
    /// Force `ffn_update[layer][position]` to zero before the residual add.
    AblateFfn { layer: usize, position: usize },
}

impl Intervention {
    pub fn position(&self) -> usize {
        match self {
            Intervention::PatchHidden { position, .. } | Intervention::AblateFfn { position, .. } => {
                *position
            }
        }
    }

    fn validate(&self, n_layers: usize, d: usize, seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::BadIntervention(m));
        match self {
            Intervention::PatchHidden {
                layer,
                position,
                vector,
            } => {
                if *layer > n_layers {
                    return bad(format!("patch layer {layer} > n_layers {n_layers}"));
                }
                if *position >= seq_len {
                    return bad(format!("patch position {position} outside sequence of {seq_len}"));
                }
                if vector.len() != d {
                    return bad(format!("patch vector has dim {}, model has {d}", vector.len()));
                }
                if !vector.iter().all(|v| v.is_finite()) {
                    return bad("patch vector is not finite".into());
                }
            }
            Intervention::AblateFfn { layer, position } => {
                if *layer >= n_layers {
                    return bad(format!("ablation layer {layer} >= n_layers {n_layers}"));
                }
                if *position >= seq_len {
                    return bad(format!(
                        "ablation position {position} outside sequence of {seq_len}"
                    ));
                }
            }
        }
        Ok(())
    }
}

pub(super) struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    fn new(seq_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for pos in 0..seq_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }

    fn rotate(&self, pos: usize, x: &mut [f64]) {
        for i in 0..self.half {
            let (c, s) = (self.cos[pos * self.half + i], self.sin[pos * self.half + i]);
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }

    pub(super) fn rotate_back(&self, pos: usize, x: &mut [f64]) {
        for i in 0..self.half {
            let (c, s) = (self.cos[pos * self.half + i], self.sin[pos * self.half + i]);
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c + b * s;
            x[2 * i + 1] = -a * s + b * c;
        }
    }
}

/// Activations of one layer, kept for tracing and for the backward pass.
pub struct LayerCache {
    /// Residual stream entering the layer, `T×d` (after any patch).
    pub input: Vec<f64>,
    pub(super) inv_rms1: Vec<f64>,
    pub(super) normed1: Vec<f64>,
    /// Rotated queries/keys and values, head-major `H×T×hd`.
    pub(super) q: Vec<f64>,
    pub(super) k: Vec<f64>,
    pub(super) v: Vec<f64>,
    /// Attention probabilities, `H×T×T`.
    pub probs: Vec<f64>,
    pub(super) ctx: Vec<f64>,
    pub attn_out: Vec<f64>,
    pub(super) mid: Vec<f64>,
    pub(super) inv_rms2: Vec<f64>,
    pub(super) normed2: Vec<f64>,
    pub(super) gate: Vec<f64>,
    pub(super) up: Vec<f64>,
    pub(super) act: Vec<f64>,
    pub ffn_out: Vec<f64>,
    pub(super) ablated: Vec<usize>,
}

/// Everything a forward pass computed.
pub struct ForwardCache {
    pub ids: Vec<TokenId>,
    pub seq_len: usize,
    pub layers: Vec<LayerCache>,
    /// Residual stream entering the final norm, `T×d`.
    pub final_in: Vec<f64>,
    pub(super) inv_rms_f: Vec<f64>,
    pub(super) normed_f: Vec<f64>,
    /// `T×V`
    pub logits: Vec<f64>,
    pub(super) rope: RopeTable,
    pub(super) patched: bool,
}

/// Per-layer record of a forward pass.
///
/// `hidden[ℓ + 1] = hidden[ℓ] + attn_out[ℓ] + ffn_update[ℓ]` holds for every
/// layer whose input was not patched.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `n_layers + 1` matrices of `T×d`; `hidden[0]` holds the embedding rows.
    pub hidden: Vec<Matrix>,
    pub attn_out: Vec<Matrix>,
    pub ffn_update: Vec<Matrix>,
    /// Per layer, `H×T×T` row-major.
    pub attn_weights: Vec<Vec<f64>>,
    pub logits: Matrix,
    pub n_heads: usize,
    pub seq_len: usize,
}

impl ForwardTrace {
    pub fn hidden_at(&self, layer: usize, position: usize) -> &[f64] {
        self.hidden[layer].row(position)
    }

    pub fn ffn_at(&self, layer: usize, position: usize) -> &[f64] {
        self.ffn_update[layer].row(position)
    }

    /// Attention weight from query `i` to key `j` in one head.
    pub fn attention(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        let t = self.seq_len;
        self.attn_weights[layer][(head * t + i) * t + j]
    }

    pub fn n_layers(&self) -> usize {
        self.attn_out.len()
    }
}

pub(super) fn rmsnorm_rows(x: &[f64], gain: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = s;
        for j in 0..d {
            y[r * d + j] = row[j] * s * gain[j];
        }
    }
    (y, inv)
}

/// `x·Wᵀ` for `x` of `rows×W.cols()`.
pub(super) fn linear(x: &[f64], rows: usize, w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; rows * w.rows()];
    gemm(
        rows,
        w.cols(),
        w.rows(),
        x,
        false,
        w.as_slice(),
        true,
        &mut out,
        false,
    );
    out
}

pub(super) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the model and keeps every intermediate needed for tracing or backprop.
pub fn forward_cached(
    model: &Model,
    ids: &[TokenId],
    interventions: &[Intervention],
) -> Result<ForwardCache> {
    let cfg = &model.config;
    let w = &model.weights;
    let t = ids.len();
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    if t > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: t,
            max: cfg.max_seq,
        });
    }
    if t == 0 {
        return Err(Error::EmptyInput);
    }
    for iv in interventions {
        iv.validate(cfg.n_layers, d, t)?;
    }
    let mut h = vec![0.0; t * d];
    for (p, &id) in ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::UnknownTokenId {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        h[p * d..(p + 1) * d].copy_from_slice(w.embed.row(id as usize));
    }

    let rope = RopeTable::new(t, hd, cfg.rope_base);
    let scale = 1.0 / (hd as f64).sqrt();
    let apply_patches = |h: &mut [f64], layer: usize| {
        for iv in interventions {
            if let Intervention::PatchHidden {
                layer: l,
                position,
                vector,
            } = iv
            {
                if *l == layer {
                    h[position * d..(position + 1) * d].copy_from_slice(vector);
                }
            }
        }
    };
    let patched = interventions
        .iter()
        .any(|iv| matches!(iv, Intervention::PatchHidden { .. }));

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        apply_patches(&mut h, li);
        let input = h;
        let (normed1, inv_rms1) = rmsnorm_rows(&input, &lw.attn_norm, t);
        let qf = linear(&normed1, t, &lw.wq);
        let kf = linear(&normed1, t, &lw.wk);
        let vf = linear(&normed1, t, &lw.wv);

        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for head in 0..n_heads {
            for p in 0..t {
                let src = p * d + head * hd;
                let dst = (head * t + p) * hd;
                q[dst..dst + hd].copy_from_slice(&qf[src..src + hd]);
                k[dst..dst + hd].copy_from_slice(&kf[src..src + hd]);
                v[dst..dst + hd].copy_from_slice(&vf[src..src + hd]);
                rope.rotate(p, &mut q[dst..dst + hd]);
                rope.rotate(p, &mut k[dst..dst + hd]);
            }
        }

        let mut probs = vec![0.0; n_heads * t * t];
        let mut ctx = vec![0.0; t * d];
        let mut head_out = vec![0.0; t * hd];
        for head in 0..n_heads {
            let qh = &q[head * t * hd..(head + 1) * t * hd];
            let kh = &k[head * t * hd..(head + 1) * t * hd];
            let vh = &v[head * t * hd..(head + 1) * t * hd];
            let ph = &mut probs[head * t * t..(head + 1) * t * t];
            gemm(t, hd, t, qh, false, kh, true, ph, false);
            for i in 0..t {
                let row = &mut ph[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= sum;
                }
                row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm(t, t, hd, ph, false, vh, false, &mut head_out, false);
            for p in 0..t {
                ctx[p * d + head * hd..p * d + (head + 1) * hd]
                    .copy_from_slice(&head_out[p * hd..(p + 1) * hd]);
            }
        }
        let attn_out = linear(&ctx, t, &lw.wo);
        let mid: Vec<f64> = input.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let (normed2, inv_rms2) = rmsnorm_rows(&mid, &lw.ffn_norm, t);
        let gate = linear(&normed2, t, &lw.w_gate);
        let up = linear(&normed2, t, &lw.w_up);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
        let mut ffn_out = linear(&act, t, &lw.w_down);
        debug_assert_eq!(act.len(), t * f);

        let mut ablated = Vec::new();
        for iv in interventions {
            if let Intervention::AblateFfn { layer, position } = iv {
                if *layer == li {
                    ffn_out[position * d..(position + 1) * d]
                        .iter_mut()
                        .for_each(|x| *x = 0.0);
                    ablated.push(*position);
                }
            }
        }
        h = mid.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
        layers.push(LayerCache {
            input,
            inv_rms1,
            normed1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_out,
            mid,
            inv_rms2,
            normed2,
            gate,
            up,
            act,
            ffn_out,
            ablated,
        });
    }
    apply_patches(&mut h, cfg.n_layers);
    let final_in = h;
    let (normed_f, inv_rms_f) = rmsnorm_rows(&final_in, &w.final_norm, t);
    let logits = linear(&normed_f, t, &w.unembed);

    Ok(ForwardCache {
        ids: ids.to_vec(),
        seq_len: t,
        layers,
        final_in,
        inv_rms_f,
        normed_f,
        logits,
        rope,
        patched,
    })
}

impl ForwardCache {
    pub fn into_trace(self, n_heads: usize, d: usize) -> ForwardTrace {
        let t = self.seq_len;
        let vocab = self.logits.len() / t;
        let mat = |v: Vec<f64>| Matrix::from_vec(t, d, v).expect("cache rows are T×d");
        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        let mut attn_out = Vec::with_capacity(self.layers.len());
        let mut ffn_update = Vec::with_capacity(self.layers.len());
        let mut attn_weights = Vec::with_capacity(self.layers.len());
        for l in self.layers {
            hidden.push(mat(l.input));
            attn_out.push(mat(l.attn_out));
            ffn_update.push(mat(l.ffn_out));
            attn_weights.push(l.probs);
        }
        hidden.push(mat(self.final_in));
        ForwardTrace {
            hidden,
            attn_out,
            ffn_update,
            attn_weights,
            logits: Matrix::from_vec(t, vocab, self.logits).expect("logits are T×V"),
            n_heads,
            seq_len: t,
        }
    }

    /// Logits at one position.
    pub fn logits_at(&self, position: usize) -> &[f64] {
        let v = self.logits.len() / self.seq_len;
        &self.logits[position * v..(position + 1) * v]
    }
}

/// Traced forward pass with interventions.
pub fn forward(model: &Model, ids: &[TokenId], interventions: &[Intervention]) -> Result<ForwardTrace> {
    let cache = forward_cached(model, ids, interventions)?;
    Ok(cache.into_trace(model.config.n_heads, model.config.d_model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::new(ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 4,
            d_ff: 24,
            vocab_size: 40,
            max_seq: 32,
            rope_base: 10_000.0,
            seed: 1,
        })
        .unwrap()
    }

    fn random_ids(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(0..v as u32)).collect()
    }

    #[test]
    fn residual_accounting_and_attention_rows() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = rng.gen_range(1..20);
            let ids = random_ids(&mut rng, n, 40);
            let tr = forward(&m, &ids, &[]).unwrap();
            for l in 0..tr.n_layers() {
                for p in 0..n {
                    for j in 0..16 {
                        let lhs = tr.hidden[l + 1].get(p, j);
                        let rhs =
                            tr.hidden[l].get(p, j) + tr.attn_out[l].get(p, j) + tr.ffn_update[l].get(p, j);
                        assert!((lhs - rhs).abs() <= 1e-12);
                    }
                }
                for h in 0..4 {
                    for i in 0..n {
                        let s: f64 = (0..n).map(|j| tr.attention(l, h, i, j)).sum();
                        assert!((s - 1.0).abs() <= 1e-12);
                        for j in i + 1..n {
                            assert_eq!(tr.attention(l, h, i, j), 0.0);
                        }
                    }
                }
            }
            for (p, &id) in ids.iter().enumerate() {
                assert_eq!(tr.hidden_at(0, p), m.embedding(id));
            }
        }
    }

    #[test]
    fn causal_locality() {
        let m = model();
        let a = [3, 7, 1, 9, 2];
        let mut b = a;
        b[3] = 11;
        let ta = forward(&m, &a, &[]).unwrap();
        let tb = forward(&m, &b, &[]).unwrap();
        for p in 0..3 {
            assert_eq!(ta.logits.row(p), tb.logits.row(p));
        }
        assert_ne!(ta.logits.row(3), tb.logits.row(3));
    }

    #[test]
    fn identity_patch_is_bitwise_noop() {
        let m = model();
        let ids = [4, 8, 15, 16, 23];
        let base = forward(&m, &ids, &[]).unwrap();
        let patch = Intervention::PatchHidden {
            layer: 0,
            position: 2,
            vector: m.embedding(15).to_vec(),
        };
        assert_eq!(forward(&m, &ids, &[patch]).unwrap(), base);
    }

    #[test]
    fn ablation_only_changes_downstream() {
        let m = model();
        let ids = [4, 8, 15, 16, 23];
        let base = forward(&m, &ids, &[]).unwrap();
        let ab = forward(
            &m,
            &ids,
            &[Intervention::AblateFfn {
                layer: 1,
                position: 2,
            }],
        )
        .unwrap();
        for l in 0..=1 {
            assert_eq!(ab.hidden[l], base.hidden[l]);
        }
        for p in 0..2 {
            for l in 0..=3 {
                assert_eq!(ab.hidden_at(l, p), base.hidden_at(l, p));
            }
            assert_eq!(ab.logits.row(p), base.logits.row(p));
        }
        assert!(ab.ffn_at(1, 2).iter().all(|&v| v == 0.0));
        assert_ne!(ab.hidden_at(2, 2), base.hidden_at(2, 2));
    }

    #[test]
    fn full_ablation_leaves_embedding_plus_attention() {
        let m = model();
        let ids = [4, 8, 15, 16, 23];
        let p = 3;
        let ivs: Vec<_> = (0..3)
            .map(|layer| Intervention::AblateFfn { layer, position: p })
            .collect();
        let tr = forward(&m, &ids, &ivs).unwrap();
        for j in 0..16 {
            let expect = tr.hidden[0].get(p, j) + (0..3).map(|l| tr.attn_out[l].get(p, j)).sum::<f64>();
            assert!((tr.hidden[3].get(p, j) - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn bad_inputs() {
        let m = model();
        let long = vec![1u32; 33];
        assert!(matches!(
            forward(&m, &long, &[]),
            Err(Error::SequenceTooLong { .. })
        ));
        let iv = Intervention::AblateFfn {
            layer: 3,
            position: 0,
        };
        assert!(matches!(
            forward(&m, &[1, 2], &[iv]),
            Err(Error::BadIntervention(_))
        ));
        let iv = Intervention::PatchHidden {
            layer: 3,
            position: 5,
            vector: vec![0.0; 16],
        };
        assert!(matches!(
            forward(&m, &[1, 2], &[iv]),
            Err(Error::BadIntervention(_))
        ));
        let iv = Intervention::PatchHidden {
            layer: 3,
            position: 1,
            vector: vec![0.0; 16],
        };
        assert!(forward(&m, &[1, 2], &[iv]).is_ok());
        assert!(matches!(
            forward(&m, &[99], &[]),
            Err(Error::UnknownTokenId { .. })
        ));
    }
}
