use super::forward::{sigmoid, ForwardCache};
use super::{Model, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::gemm;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Only embedding and unembedding rows; layer weights and norms are skipped.
    EmbeddingsOnly,
}

/// RMSNorm backward for `rows` rows. Adds into `dx` and, if given, `dgain`.
fn rmsnorm_backward(
    x: &[f64],
    inv: &[f64],
    gain: &[f64],
    dy: &[f64],
    rows: usize,
    dx: &mut [f64],
    dgain: Option<&mut [f64]>,
) {
    let d = gain.len();
    let mut dgain = dgain;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let s = inv[r];
        let dot: f64 = (0..d).map(|j| gain[j] * dyr[j] * xr[j]).sum();
        let k = s * s * s * dot / d as f64;
        for j in 0..d {
            dx[r * d + j] += s * gain[j] * dyr[j] - k * xr[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xr[j] * s;
            }
        }
    }
}

/// `dx += dy·W` and, when `dw` is given, `dW += dyᵀ·x`.
fn linear_backward(
    x: &[f64],
    w: &crate::linalg::Matrix,
    dy: &[f64],
    rows: usize,
    dx: &mut [f64],
    dw: Option<&mut [f64]>,
) {
    let (out, inp) = (w.rows(), w.cols());
    gemm(rows, out, inp, dy, false, w.as_slice(), false, dx, true);
    if let Some(dw) = dw {
        gemm(out, rows, inp, dy, true, x, false, dw, true);
    }
}

/// Accumulates parameter gradients of `Σ dlogits ⊙ logits` into `grads`.
///
/// `dlogits` is `T×V`. Caches produced with hidden-state patches are rejected;
/// FFN ablations are respected.
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut ModelWeights,
    scope: GradScope,
) -> Result<()> {
    if cache.patched {
        return Err(Error::BadIntervention(
            "cannot backpropagate through a patched hidden state".into(),
        ));
    }
    let cfg = &model.config;
    let w = &model.weights;
    let t = cache.seq_len;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let v = cfg.vocab_size;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    if dlogits.len() != t * v {
        return Err(Error::DimensionMismatch {
            expected: t * v,
            got: dlogits.len(),
        });
    }
    let all = scope == GradScope::All;
    let scale = 1.0 / (hd as f64).sqrt();

    // Unembedding and final norm.
    gemm(
        v,
        t,
        d,
        dlogits,
        true,
        &cache.normed_f,
        false,
        grads.unembed.as_mut_slice(),
        true,
    );
    let mut dnf = vec![0.0; t * d];
    gemm(
        t,
        v,
        d,
        dlogits,
        false,
        w.unembed.as_slice(),
        false,
        &mut dnf,
        false,
    );
    let mut dh = vec![0.0; t * d];
    rmsnorm_backward(
        &cache.final_in,
        &cache.inv_rms_f,
        &w.final_norm,
        &dnf,
        t,
        &mut dh,
        all.then_some(grads.final_norm.as_mut_slice()),
    );

    for (li, (lc, lw)) in cache.layers.iter().zip(&w.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        // h_out = mid + ffn_out
        let mut dffn = dh.clone();
        for &p in &lc.ablated {
            dffn[p * d..(p + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
        let mut dmid = dh;
        let mut dact = vec![0.0; t * f];
        linear_backward(
            &lc.act,
            &lw.w_down,
            &dffn,
            t,
            &mut dact,
            all.then_some(g.w_down.as_mut_slice()),
        );
        let mut dgate = vec![0.0; t * f];
        let mut dup = vec![0.0; t * f];
        for i in 0..t * f {
            let gv = lc.gate[i];
            let sg = sigmoid(gv);
            let silu = gv * sg;
            dup[i] = dact[i] * silu;
            dgate[i] = dact[i] * lc.up[i] * sg * (1.0 + gv * (1.0 - sg));
        }
        let mut dn2 = vec![0.0; t * d];
        linear_backward(
            &lc.normed2,
            &lw.w_gate,
            &dgate,
            t,
            &mut dn2,
            all.then_some(g.w_gate.as_mut_slice()),
        );
        linear_backward(
            &lc.normed2,
            &lw.w_up,
            &dup,
            t,
            &mut dn2,
            all.then_some(g.w_up.as_mut_slice()),
        );
        rmsnorm_backward(
            &lc.mid,
            &lc.inv_rms2,
            &lw.ffn_norm,
            &dn2,
            t,
            &mut dmid,
            all.then_some(g.ffn_norm.as_mut_slice()),
        );

        // mid = input + attn_out
        let mut dinput = dmid.clone();
        let mut dctx = vec![0.0; t * d];
        linear_backward(
            &lc.ctx,
            &lw.wo,
            &dmid,
            t,
            &mut dctx,
            all.then_some(g.wo.as_mut_slice()),
        );

        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dctx_h = vec![0.0; t * hd];
        let mut dp = vec![0.0; t * t];
        let mut dqh = vec![0.0; t * hd];
        let mut dkh = vec![0.0; t * hd];
        let mut dvh = vec![0.0; t * hd];
        for head in 0..n_heads {
            let qh = &lc.q[head * t * hd..(head + 1) * t * hd];
            let kh = &lc.k[head * t * hd..(head + 1) * t * hd];
            let vh = &lc.v[head * t * hd..(head + 1) * t * hd];
            let ph = &lc.probs[head * t * t..(head + 1) * t * t];
            for p in 0..t {
                dctx_h[p * hd..(p + 1) * hd]
                    .copy_from_slice(&dctx[p * d + head * hd..p * d + (head + 1) * hd]);
            }
            gemm(t, hd, t, &dctx_h, false, vh, true, &mut dp, false);
            gemm(t, t, hd, ph, true, &dctx_h, false, &mut dvh, false);
            // Softmax backward, then the score scale.
            for i in 0..t {
                let row_p = &ph[i * t..(i + 1) * t];
                let row_d = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = (0..=i).map(|j| row_p[j] * row_d[j]).sum();
                for j in 0..t {
                    row_d[j] = if j <= i {
                        row_p[j] * (row_d[j] - dot) * scale
                    } else {
                        0.0
                    };
                }
            }
            gemm(t, t, hd, &dp, false, kh, false, &mut dqh, false);
            gemm(t, t, hd, &dp, true, qh, false, &mut dkh, false);
            for p in 0..t {
                let (a, b) = (p * hd, (p + 1) * hd);
                cache.rope.rotate_back(p, &mut dqh[a..b]);
                cache.rope.rotate_back(p, &mut dkh[a..b]);
                let dst = p * d + head * hd;
                dq[dst..dst + hd].copy_from_slice(&dqh[a..b]);
                dk[dst..dst + hd].copy_from_slice(&dkh[a..b]);
                dv[dst..dst + hd].copy_from_slice(&dvh[a..b]);
            }
        }
        let mut dn1 = vec![0.0; t * d];
        linear_backward(
            &lc.normed1,
            &lw.wq,
            &dq,
            t,
            &mut dn1,
            all.then_some(g.wq.as_mut_slice()),
        );
        linear_backward(
            &lc.normed1,
            &lw.wk,
            &dk,
            t,
            &mut dn1,
            all.then_some(g.wk.as_mut_slice()),
        );
        linear_backward(
            &lc.normed1,
            &lw.wv,
            &dv,
            t,
            &mut dn1,
            all.then_some(g.wv.as_mut_slice()),
        );
        rmsnorm_backward(
            &lc.input,
            &lc.inv_rms1,
            &lw.attn_norm,
            &dn1,
            t,
            &mut dinput,
            all.then_some(g.attn_norm.as_mut_slice()),
        );
        dh = dinput;
    }

    for (p, &id) in cache.ids.iter().enumerate() {
        let row = grads.embed.row_mut(id as usize);
        for j in 0..d {
            row[j] += dh[p * d + j];
        }
    }
    Ok(())
}
