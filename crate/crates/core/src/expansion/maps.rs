use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rms, Matrix};
use crate::model::{forward, Model};
use crate::tokenizer::TokenId;

/// `v / rms(v)`, so the result has unit RMS.
pub fn rms_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let r = rms(v);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / r).collect())
}

/// The orthogonal `T` minimizing `Σ ‖T hᵢ − xᵢ‖²` over rows `hᵢ` of `h` and
/// `xᵢ` of `x`.
///
/// With `XᵀH = S Σ Vᵀ`, `T = S Vᵀ`. Each left singular vector is signed so its
/// largest-magnitude entry is positive, with the matching right vector
/// flipped alongside, so the result does not depend on solver sign choices.
pub fn fit_procrustes(h: &Matrix, x: &Matrix) -> Result<Matrix> {
    if h.rows() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: h.rows(),
            got: x.rows(),
        });
    }
    if h.cols() != x.cols() {
        return Err(Error::DimensionMismatch {
            expected: h.cols(),
            got: x.cols(),
        });
    }
    if h.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let d = h.cols();
    let hm = DMatrix::from_row_slice(h.rows(), d, h.as_slice());
    let xm = DMatrix::from_row_slice(x.rows(), d, x.as_slice());
    let m = xm.transpose() * hm;
    let svd = m.svd(true, true);
    let mut s = svd.u.ok_or_else(|| Error::Internal("SVD without U".into()))?;
    let mut vt = svd.v_t.ok_or_else(|| Error::Internal("SVD without Vᵀ".into()))?;
    for j in 0..d {
        let col = s.column(j);
        let (mut best, mut idx) = (0.0f64, 0);
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if col[idx] < 0.0 {
            s.column_mut(j).neg_mut();
            vt.row_mut(j).neg_mut();
        }
    }
    let t = s * vt;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, t[(i, j)]);
        }
    }
    Ok(out)
}

/// `Σ ‖T hᵢ − xᵢ‖²`.
pub fn procrustes_objective(t: &Matrix, h: &Matrix, x: &Matrix) -> f64 {
    (0..h.rows())
        .map(|i| {
            let th = t.matvec(h.row(i)).expect("square map");
            th.iter()
                .zip(x.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Per-layer orthogonal maps from hidden states into the embedding and
/// unembedding spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMaps {
    pub t_e: Vec<Matrix>,
    pub t_u: Vec<Matrix>,
    pub rms_e_mean: f64,
    pub rms_u_mean: f64,
    pub rms_h_mean: Vec<f64>,
}

impl LayerMaps {
    pub fn n_layers(&self) -> usize {
        self.t_e.len()
    }

    /// `max |TᵀT − I|` over every map.
    pub fn orthogonality_error(&self) -> f64 {
        self.t_e
            .iter()
            .chain(&self.t_u)
            .map(|t| {
                let tt = t.transpose().matmul(t).expect("square map");
                tt.max_abs_diff(&Matrix::identity(t.rows()))
            })
            .fold(0.0, f64::max)
    }
}

/// Hidden states of every base token fed on its own (optionally after
/// `prefix`), one `V×d` matrix per layer `0..=L`.
pub fn single_token_hiddens(model: &Model, prefix: Option<TokenId>) -> Result<Vec<Matrix>> {
    let v = model.base_vocab;
    let d = model.d_model();
    let mut out = vec![Matrix::zeros(v, d); model.n_layers() + 1];
    for t in 0..v as TokenId {
        let ids: Vec<TokenId> = prefix.into_iter().chain([t]).collect();
        let trace = forward(model, &ids, &[])?;
        let pos = ids.len() - 1;
        for (l, m) in out.iter_mut().enumerate() {
            m.row_mut(t as usize).copy_from_slice(trace.hidden_at(l, pos));
        }
    }
    Ok(out)
}

fn normalize_rows(m: &Matrix) -> Result<(Matrix, f64)> {
    let mut out = m.clone();
    let mut total = 0.0;
    for i in 0..m.rows() {
        total += rms(m.row(i));
        let n = rms_normalize(m.row(i))?;
        out.row_mut(i).copy_from_slice(&n);
    }
    Ok((out, total / m.rows().max(1) as f64))
}

/// Fits maps from precomputed single-token hidden states.
pub fn layer_maps_from_hiddens(model: &Model, hiddens: &[Matrix]) -> Result<LayerMaps> {
    let v = model.base_vocab;
    let d = model.d_model();
    let base = |m: &Matrix| Matrix::from_vec(v, d, m.as_slice()[..v * d].to_vec());
    let (e, rms_e_mean) = normalize_rows(&base(&model.weights.embed)?)?;
    let (u, rms_u_mean) = normalize_rows(&base(&model.weights.unembed)?)?;
    let mut maps = LayerMaps {
        t_e: Vec::with_capacity(hiddens.len()),
        t_u: Vec::with_capacity(hiddens.len()),
        rms_e_mean,
        rms_u_mean,
        rms_h_mean: Vec::with_capacity(hiddens.len()),
    };
    for h in hiddens {
        let (hn, rms_h) = normalize_rows(h)?;
        maps.t_e.push(fit_procrustes(&hn, &e)?);
        maps.t_u.push(fit_procrustes(&hn, &u)?);
        maps.rms_h_mean.push(rms_h);
    }
    Ok(maps)
}

/// Learns one pair of maps per layer from every base token's context-free
/// hidden states. `prefix` optionally prepends a fixed token to each input.
pub fn learn_layer_maps(model: &Model, prefix: Option<TokenId>) -> Result<LayerMaps> {
    layer_maps_from_hiddens(model, &single_token_hiddens(model, prefix)?)
}

/// Initial embedding and unembedding rows for a hidden state `r` taken at
/// `layer`: each map applied to the unit-RMS `r`, rescaled to the target
/// space's mean RMS.
pub fn derive_initial_entries(r: &[f64], layer: usize, maps: &LayerMaps) -> Result<(Vec<f64>, Vec<f64>)> {
    if layer >= maps.n_layers() {
        return Err(Error::format(
            "layer index",
            format!("{layer} is out of range for {} mapped layers", maps.n_layers()),
        ));
    }
    let rn = rms_normalize(r)?;
    let scale =
        |t: &Matrix, s: f64| -> Result<Vec<f64>> { Ok(t.matvec(&rn)?.into_iter().map(|x| x * s).collect()) };
    Ok((
        scale(&maps.t_e[layer], maps.rms_e_mean)?,
        scale(&maps.t_u[layer], maps.rms_u_mean)?,
    ))
}
