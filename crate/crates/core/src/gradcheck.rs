//! Central finite-difference checks of the analytic gradients.

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, ToyLm};
use crate::rng;
use crate::sae::SaeModel;

/// Gradients below this magnitude are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    pub within_tolerance: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.within_tolerance as f64 / self.checked as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn tally(pairs: impl Iterator<Item = (f64, f64)>, tolerance: f64) -> GradCheck {
    let mut out = GradCheck {
        checked: 0,
        within_tolerance: 0,
        worst_relative_error: 0.0,
        tolerance,
    };
    for (a, n) in pairs {
        let e = relative_error(a, n);
        out.checked += 1;
        if e <= tolerance {
            out.within_tolerance += 1;
        }
        out.worst_relative_error = out.worst_relative_error.max(e);
    }
    out
}

fn sample_coords(n: usize, samples: usize, seed: u64) -> Vec<usize> {
    if samples >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, 0);
    (0..samples).map(|_| r.random_range(0..n)).collect()
}

/// Checks the summed sequence loss of `model` on `samples` random parameters.
pub fn check_lm(model: &ToyLm, seq: &[TokenId], weight: &[bool], samples: usize, h: f64, tolerance: f64, seed: u64) -> Result<GradCheck> {
    let mut grad = vec![0.0; model.n_params()];
    model.accumulate_gradient(seq, weight, &mut grad)?;
    let loss = |m: &ToyLm| -> Result<f64> { Ok(m.sequence_loss(seq, weight)?.0) };
    let mut probe = model.clone();
    let mut pairs = Vec::new();
    for i in sample_coords(model.n_params(), samples, seed) {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.params_mut()[i] = orig;
        pairs.push((grad[i], (up - down) / (2.0 * h)));
    }
    Ok(tally(pairs.into_iter(), tolerance))
}

/// Checks the batch-mean SAE loss on `samples` random entries of each
/// parameter tensor.
pub fn check_sae(sae: &SaeModel, x: ArrayView2<f64>, samples: usize, h: f64, tolerance: f64, seed: u64) -> Result<GradCheck> {
    if x.ncols() != sae.d_in() {
        return Err(Error::DimensionMismatch {
            context: "gradient check batch",
            expected: sae.d_in(),
            got: x.ncols(),
        });
    }
    let (_, grad) = sae.loss_and_grad(x)?;
    let analytic = [
        grad.w_enc.as_slice().expect("standard layout"),
        grad.b_enc.as_slice().expect("standard layout"),
        grad.w_dec.as_slice().expect("standard layout"),
        grad.b_dec.as_slice().expect("standard layout"),
    ];
    let mut probe = sae.clone();
    let mut pairs = Vec::new();
    for (t, g) in analytic.iter().enumerate() {
        for i in sample_coords(g.len(), samples, rng::derive_seed(seed, t as u64)) {
            let orig = tensor(&mut probe, t)[i];
            tensor(&mut probe, t)[i] = orig + h;
            let up = probe.loss_and_grad(x)?.0.total;
            tensor(&mut probe, t)[i] = orig - h;
            let down = probe.loss_and_grad(x)?.0.total;
            tensor(&mut probe, t)[i] = orig;
            pairs.push((g[i], (up - down) / (2.0 * h)));
        }
    }
    Ok(tally(pairs.into_iter(), tolerance))
}

fn tensor(s: &mut SaeModel, t: usize) -> &mut [f64] {
    match t {
        0 => s.w_enc.as_slice_mut(),
        1 => s.b_enc.as_slice_mut(),
        2 => s.w_dec.as_slice_mut(),
        _ => s.b_dec.as_slice_mut(),
    }
    .expect("standard layout")
}
