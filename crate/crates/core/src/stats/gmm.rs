use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once the relative log-likelihood gain falls below this.
    pub tol: f64,
    /// Added to every covariance diagonal.
    pub reg: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            k: 3,
            n_init: 4,
            max_iter: 500,
            tol: 1e-8,
            reg: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub dim: usize,
    pub components: Vec<GmmComponent>,
    pub log_likelihood: f64,
    /// Log-likelihood before each M-step, in order.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Which start produced this model.
    pub start: usize,
}

#[derive(Clone)]
struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-point, per-component `log(w_j · N(x | μ_j, Σ_j))`.
fn log_joint(x: &[DVector<f64>], p: &Params) -> Result<Vec<Vec<f64>>> {
    let d = x[0].len() as f64;
    let mut out = vec![vec![0.0; p.weights.len()]; x.len()];
    for (j, (mean, cov)) in p.means.iter().zip(&p.covs).enumerate() {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("covariance lost positive definiteness".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let base = p.weights[j].ln() - 0.5 * (d * LN_2PI + log_det);
        for (i, xi) in x.iter().enumerate() {
            let z = chol.l().solve_lower_triangular(&(xi - mean)).expect("triangular");
            out[i][j] = base - 0.5 * z.norm_squared();
        }
    }
    Ok(out)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn kmeans_pp(x: &[DVector<f64>], k: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut r = rng::stream(seed, 0);
    let mut centres = vec![x[r.random_range(0..x.len())].clone()];
    while centres.len() < k {
        let d2: Vec<f64> = x
            .iter()
            .map(|p| centres.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = r.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter().position(|&v| {
                acc += v;
                u < acc
            })
            .unwrap_or(x.len() - 1)
        } else {
            r.random_range(0..x.len())
        };
        centres.push(x[pick].clone());
    }
    centres
}

fn run_em(x: &[DVector<f64>], cfg: &GmmConfig, seed: u64) -> Result<(Params, Vec<f64>, bool)> {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean = x.iter().fold(DVector::zeros(d), |a, b| a + b) / n;
    let mut global = x.iter().fold(DMatrix::zeros(d, d), |a, p| {
        let c = p - &mean;
        a + &c * c.transpose()
    }) / n;
    global += DMatrix::identity(d, d) * cfg.reg;
    let mut p = Params {
        weights: vec![1.0 / cfg.k as f64; cfg.k],
        means: kmeans_pp(x, cfg.k, seed),
        covs: vec![global; cfg.k],
    };
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut previous: Option<Params> = None;
    for _ in 0..cfg.max_iter {
        let lj = log_joint(x, &p)?;
        let norms: Vec<f64> = lj.iter().map(|row| log_sum_exp(row)).collect();
        let ll: f64 = norms.iter().sum();
        if let Some(&prev) = trace.last() {
            let slack = cfg.tol * prev.abs().max(1e-300);
            // The εI ridge makes the M-step inexact, so a step can lose a
            // little likelihood near the optimum. Such a step is undone.
            if ll < prev {
                p = previous.take().expect("set after every M-step");
                converged = prev - ll <= slack;
                break;
            }
            if ll - prev <= slack {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        previous = Some(p.clone());
        for j in 0..cfg.k {
            let resp: Vec<f64> = lj.iter().zip(&norms).map(|(row, z)| (row[j] - z).exp()).collect();
            let nj = resp.iter().sum::<f64>().max(1e-300);
            let mu = x.iter().zip(&resp).fold(DVector::zeros(d), |a, (xi, r)| a + xi * *r) / nj;
            let mut cov = x.iter().zip(&resp).fold(DMatrix::zeros(d, d), |a, (xi, r)| {
                let c = xi - &mu;
                a + (&c * c.transpose()) * *r
            }) / nj;
            cov += DMatrix::identity(d, d) * cfg.reg;
            p.weights[j] = nj / n;
            p.means[j] = mu;
            p.covs[j] = cov;
        }
    }
    Ok((p, trace, converged))
}

/// EM from k-means++ starts; the start with the highest final
/// log-likelihood wins, ties going to the earlier start.
pub fn gmm_fit(points: ArrayView2<f64>, cfg: &GmmConfig, seed: u64) -> Result<GmmModel> {
    let (n, d) = points.dim();
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::InvalidInput(format!("need at least k = {} points, got {n}", cfg.k)));
    }
    if d == 0 {
        return Err(Error::InvalidInput("points must have dimension >= 1".into()));
    }
    let x: Vec<DVector<f64>> = points.rows().into_iter().map(|r| DVector::from_iterator(d, r.iter().copied())).collect();
    let mut best: Option<GmmModel> = None;
    for s in 0..cfg.n_init.max(1) {
        let (p, trace, converged) = run_em(&x, cfg, rng::derive_seed(seed, s as u64))?;
        let ll = *trace.last().expect("at least one iteration");
        if best.as_ref().is_some_and(|b| b.log_likelihood >= ll) {
            continue;
        }
        let components = (0..cfg.k)
            .map(|j| GmmComponent {
                weight: p.weights[j],
                mean: p.means[j].iter().copied().collect(),
                covariance: p.covs[j].transpose().iter().copied().collect(),
            })
            .collect();
        best = Some(GmmModel {
            dim: d,
            components,
            log_likelihood: ll,
            trace,
            converged,
            start: s,
        });
    }
    Ok(best.expect("n_init >= 1"))
}

impl GmmModel {
    /// Index of the component with the largest responsibility.
    pub fn assign(&self, point: &[f64]) -> usize {
        let d = self.dim;
        let x = DVector::from_column_slice(point);
        let mut best = (0, f64::NEG_INFINITY);
        for (j, c) in self.components.iter().enumerate() {
            let cov = DMatrix::from_row_slice(d, d, &c.covariance);
            let Some(chol) = cov.cholesky() else { continue };
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let z = chol.l().solve_lower_triangular(&(&x - DVector::from_column_slice(&c.mean))).expect("triangular");
            let lp = c.weight.ln() - 0.5 * (log_det + z.norm_squared());
            if lp > best.1 {
                best = (j, lp);
            }
        }
        best.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    #[test]
    fn single_component_matches_sample_moments() {
        let mut r = rng::stream(3, 0);
        let x = Array2::from_shape_simple_fn((200, 2), || r.sample::<f64, _>(StandardNormal));
        let cfg = GmmConfig { k: 1, n_init: 1, ..GmmConfig::default() };
        let m = gmm_fit(x.view(), &cfg, 0).unwrap();
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let c = &m.components[0];
        assert!((c.weight - 1.0).abs() < 1e-12);
        for i in 0..2 {
            assert!((c.mean[i] - mean[i]).abs() < 1e-10);
        }
        let centred = &x - &mean;
        let cov = centred.t().dot(&centred) / 200.0;
        for i in 0..2 {
            for j in 0..2 {
                let reg = if i == j { 1e-6 } else { 0.0 };
                assert!((c.covariance[i * 2 + j] - cov[[i, j]] - reg).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn separates_two_tight_clusters() {
        let mut r = rng::stream(5, 0);
        let mut x = Array2::<f64>::zeros((200, 2));
        for i in 0..200 {
            let c = if i < 100 { 0.0 } else { 5.0 };
            x[[i, 0]] = c + 0.1 * r.sample::<f64, _>(StandardNormal);
            x[[i, 1]] = -c + 0.1 * r.sample::<f64, _>(StandardNormal);
        }
        let m = gmm_fit(x.view(), &GmmConfig { k: 2, ..GmmConfig::default() }, 1).unwrap();
        let mut means: Vec<_> = m.components.iter().map(|c| (c.mean[0], c.mean[1])).collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((means[0].0).abs() < 0.05 && (means[0].1).abs() < 0.05);
        assert!((means[1].0 - 5.0).abs() < 0.05 && (means[1].1 + 5.0).abs() < 0.05);
        assert_ne!(m.assign(&[0.0, 0.0]), m.assign(&[5.0, -5.0]));
    }

    #[test]
    fn too_few_points() {
        let x = Array2::<f64>::zeros((2, 1));
        assert!(gmm_fit(x.view(), &GmmConfig::default(), 0).is_err());
    }
}
