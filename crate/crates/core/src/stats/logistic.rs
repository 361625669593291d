use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y = lower + (upper − lower) / (1 + exp(−slope·(x − midpoint)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub midpoint: f64,
    pub slope: f64,
    pub lower: f64,
    pub upper: f64,
    pub r_squared: f64,
    pub sse: f64,
    /// All `y` equal: the fit is flat and `r_squared` is 1 by convention.
    pub zero_variance: bool,
}

pub fn four_pl(x: f64, lower: f64, upper: f64, midpoint: f64, slope: f64) -> f64 {
    lower + (upper - lower) / (1.0 + (-slope * (x - midpoint)).exp())
}

impl LogisticFit {
    pub fn predict(&self, x: f64) -> f64 {
        four_pl(x, self.lower, self.upper, self.midpoint, self.slope)
    }
}

type Theta = Vector4<f64>; // lower, upper, midpoint, slope

fn sse(points: &[(f64, f64)], t: &Theta) -> f64 {
    points.iter().map(|&(x, y)| (y - four_pl(x, t[0], t[1], t[2], t[3])).powi(2)).sum()
}

/// Levenberg-Marquardt from one start.
fn levenberg_marquardt(points: &[(f64, f64)], start: Theta) -> (Theta, f64) {
    let mut t = start;
    let mut cost = sse(points, &t);
    let mut mu = 1e-3;
    for _ in 0..2000 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for &(x, y) in points {
            let s = 1.0 / (1.0 + (-t[3] * (x - t[2])).exp());
            let span = t[1] - t[0];
            let ds = s * (1.0 - s);
            let j = Vector4::new(1.0 - s, s, -span * ds * t[3], span * ds * (x - t[2]));
            let r = y - (t[0] + span * s);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let cand = t + step;
            let c = sse(points, &cand);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                t = cand;
                cost = c;
                mu = (mu / 3.0).max(1e-15);
                improved = rel > 1e-15 && step.norm() > 1e-14 * (1.0 + t.norm());
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (t, cost)
}

/// Least-squares four-parameter logistic fit from a grid of starts; the
/// flat line through the mean is always among the candidates.
pub fn logistic_fit(points: &[(f64, f64)]) -> Result<LogisticFit> {
    if points.len() < 5 {
        return Err(Error::InvalidInput(format!("logistic fit needs at least 5 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite point in logistic fit".into()));
    }
    let n = points.len() as f64;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    let mean_x = xs.iter().sum::<f64>() / n;
    if points.iter().all(|p| p.1 == points[0].1) {
        let mean_y = points[0].1;
        return Ok(LogisticFit {
            midpoint: mean_x,
            slope: 0.0,
            lower: mean_y,
            upper: mean_y,
            r_squared: 1.0,
            sse: 0.0,
            zero_variance: true,
        });
    }
    let (y_min, y_max) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let range = (xs[xs.len() - 1] - xs[0]).max(1e-12);
    let mut best = (Theta::new(mean_y, mean_y, mean_x, 0.0), ss_tot);
    for q in [0.2, 0.35, 0.5, 0.65, 0.8] {
        let mid = xs[((xs.len() - 1) as f64 * q).round() as usize];
        for k in [1.0, 4.0, 16.0, -1.0, -4.0, -16.0] {
            let start = Theta::new(y_min, y_max, mid, k / range);
            let (t, c) = levenberg_marquardt(points, start);
            if c < best.1 {
                best = (t, c);
            }
        }
    }
    let (mut t, cost) = best;
    if t[0] > t[1] {
        t = Theta::new(t[1], t[0], t[2], -t[3]);
    }
    Ok(LogisticFit {
        lower: t[0],
        upper: t[1],
        midpoint: t[2],
        slope: t[3],
        r_squared: 1.0 - cost / ss_tot,
        sse: cost,
        zero_variance: false,
    })
}
