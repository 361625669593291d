//! Last-position readout of the final layer under an additive residual
//! offset.
//!
//! Adding `ω·d` to the stream entering the final layer only changes that
//! layer's LayerNorm input, and LayerNorm of `x + ω·d` has a closed form in
//! `ω` once `x` and `d` are centred. Keys and values are therefore an affine
//! function of the cached unsteered projections, so one steered readout costs
//! `O(len · d_model)` plus one MLP row instead of a full layer.
//!
//! Results agree with [`ToyLm::last_logits`] under the equivalent hook to
//! rounding error (tested to 1e-9), not bit-for-bit.

use ndarray::{Array1, Array2, ArrayView1};

use super::model::{gelu, mat, vec_, ToyLm};
use super::vocab::TokenId;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Which positions receive the steering offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerPositions {
    All,
    Last,
}

/// A steering direction pre-multiplied into the final layer's QKV space.
#[derive(Clone, Debug)]
pub struct ProjectedDirection {
    raw: Array1<f64>,
    centred: Array1<f64>,
    centred_sq: f64,
    qkv: Array1<f64>,
}

/// Unsteered state of one prompt at the final-layer boundary.
#[derive(Clone, Debug)]
pub struct FinalLayerCache<'m> {
    model: &'m ToyLm,
    x: Array2<f64>,
    centred: Array2<f64>,
    centred_sq: Vec<f64>,
    /// Row-major `len × 3·d_model`, the LayerNorm-scaled part of QKV before
    /// the `1/σ` factor.
    qkv_part: Vec<f64>,
    qkv_bias: Vec<f64>,
}

impl<'m> FinalLayerCache<'m> {
    pub fn new(model: &'m ToyLm, tokens: &[TokenId]) -> Result<Self> {
        let boundary = model.final_layer_boundary();
        let x = model.residual_at(tokens, boundary)?;
        let p = model.p();
        let ls = &model.layout().layers[boundary];
        let g1 = vec_(p, ls.ln1_g);
        let d = x.ncols() as f64;
        let mut centred = x.clone();
        for mut row in centred.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
        }
        let centred_sq = centred.rows().into_iter().map(|r| r.dot(&r)).collect();
        let w = mat(p, ls.w_qkv);
        let qkv_part = (&centred * &g1).dot(&w).as_standard_layout().iter().copied().collect();
        let qkv_bias = (vec_(p, ls.ln1_b).dot(&w) + vec_(p, ls.b_qkv)).to_vec();
        Ok(FinalLayerCache {
            model,
            x,
            centred,
            centred_sq,
            qkv_part,
            qkv_bias,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// The unsteered residual this cache was built from.
    pub fn residual(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn project(model: &ToyLm, direction: ArrayView1<f64>) -> Result<ProjectedDirection> {
        if direction.len() != model.d_model() {
            return Err(Error::DimensionMismatch {
                context: "steering direction",
                expected: model.d_model(),
                got: direction.len(),
            });
        }
        let p = model.p();
        let ls = &model.layout().layers[model.final_layer_boundary()];
        let mean = direction.sum() / direction.len() as f64;
        let centred = direction.mapv(|v| v - mean);
        let qkv = (&centred * &vec_(p, ls.ln1_g)).dot(&mat(p, ls.w_qkv));
        Ok(ProjectedDirection {
            raw: direction.to_owned(),
            centred_sq: centred.dot(&centred),
            centred,
            qkv,
        })
    }

    /// Last-position logits with `omega · direction` added at `positions`.
    ///
    /// Keys and values are `σ_t⁻¹(part_t + w_t·dir) + bias`, so attention
    /// scores and the weighted value sum are formed from per-row dot
    /// products without materialising the steered K and V.
    pub fn steered_logits(&self, dir: &ProjectedDirection, omega: f64, positions: SteerPositions) -> Array1<f64> {
        let model = self.model;
        let cfg = model.config();
        let p = model.p();
        let layout = model.layout();
        let ls = &layout.layers[model.final_layer_boundary()];
        let t_len = self.x.nrows();
        let last = t_len - 1;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let df = d as f64;
        let part = &self.qkv_part;
        let bias = &self.qkv_bias;
        let dqkv = dir.qkv.as_slice().expect("contiguous");

        let weight = |t: usize| match positions {
            SteerPositions::All => omega,
            SteerPositions::Last if t == last => omega,
            SteerPositions::Last => 0.0,
        };
        let dc = dir.centred.as_slice().expect("contiguous");
        let rstd: Vec<f64> = (0..t_len)
            .map(|t| {
                let w = weight(t);
                if w == 0.0 {
                    return 1.0 / (self.centred_sq[t] / df + LN_EPS).sqrt();
                }
                let row = self.centred.row(t);
                let cross: f64 = row.iter().zip(dc).map(|(a, b)| a * b).sum();
                let var = (self.centred_sq[t] + 2.0 * w * cross + w * w * dir.centred_sq) / df;
                1.0 / (var + LN_EPS).sqrt()
            })
            .collect();
        let w_last = weight(last);
        let q: Vec<f64> = (0..d)
            .map(|j| rstd[last] * (part[last * 3 * d + j] + w_last * dqkv[j]) + bias[j])
            .collect();

        let mut z = vec![0.0; d];
        let mut scores = vec![0.0; t_len];
        for h in 0..cfg.n_heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let k0 = d + h * dh;
            let v0 = 2 * d + h * dh;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let q_dir = dot(qh, &dqkv[k0..k0 + dh]);
            let q_bias = dot(qh, &bias[k0..k0 + dh]);
            let mut max = f64::NEG_INFINITY;
            for (t, s) in scores.iter_mut().enumerate() {
                let row = &part[t * 3 * d + k0..t * 3 * d + k0 + dh];
                *s = scale * (rstd[t] * (dot(qh, row) + weight(t) * q_dir) + q_bias);
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let zh = &mut z[h * dh..(h + 1) * dh];
            let mut dir_coef = 0.0;
            for (t, s) in scores.iter().enumerate() {
                let c = s / sum * rstd[t];
                dir_coef += c * weight(t);
                let row = &part[t * 3 * d + v0..t * 3 * d + v0 + dh];
                for (o, v) in zh.iter_mut().zip(row) {
                    *o += c * v;
                }
            }
            for j in 0..dh {
                zh[j] += dir_coef * dqkv[v0 + j] + bias[v0 + j];
            }
        }

        let mut x_mid: Vec<f64> = self.x.row(last).iter().zip(dir.raw.iter()).map(|(x, r)| x + w_last * r).collect();
        add_vec_mat(&z, slice(p, ls.w_o), &mut x_mid);
        add(&mut x_mid, slice(p, ls.b_o));
        let h2 = ln(&x_mid, slice(p, ls.ln2_g), slice(p, ls.ln2_b));
        let mut act = slice(p, ls.b_in).to_vec();
        add_vec_mat(&h2, slice(p, ls.w_in), &mut act);
        for a in act.iter_mut() {
            *a = gelu(*a);
        }
        let mut out = x_mid;
        add_vec_mat(&act, slice(p, ls.w_out), &mut out);
        add(&mut out, slice(p, ls.b_out));
        let hf = ln(&out, slice(p, layout.lnf_g), slice(p, layout.lnf_b));
        let mut logits = slice(p, layout.b_u).to_vec();
        add_vec_mat(&hf, slice(p, layout.w_u), &mut logits);
        Array1::from(logits)
    }
}

fn slice(p: &[f64], s: super::model::Slot) -> &[f64] {
    &p[s.range()]
}

fn add(out: &mut [f64], b: &[f64]) {
    for (o, v) in out.iter_mut().zip(b) {
        *o += v;
    }
}

/// `out += x · W` for row-major `W` with `x.len()` rows.
fn add_vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), x.len() * cols);
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += xi * v;
        }
    }
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * rstd * g + b).collect()
}
