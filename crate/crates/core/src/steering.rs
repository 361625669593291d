//! Residual-stream steering: `x' = x + ω · W_dec[:, f]` at one layer
//! boundary, and the ω sweeps built on it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameHistory;
use crate::lm::{render_prompt, FinalLayerCache, ProjectedDirection, ResidualHook, SteerPositions, TokenDistribution, TokenId, ToyLm};
use crate::sae::SaeModel;

fn default_positions() -> SteerPositions {
    SteerPositions::All
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringSpec {
    /// Residual boundary (the stream entering this layer).
    pub layer: usize,
    pub feature_id: usize,
    pub omega: f64,
    #[serde(default = "default_positions")]
    pub positions: SteerPositions,
}

impl SteeringSpec {
    pub fn new(layer: usize, feature_id: usize, omega: f64) -> Self {
        SteeringSpec {
            layer,
            feature_id,
            omega,
            positions: SteerPositions::All,
        }
    }

    pub fn validate(&self, model: &ToyLm, sae: &SaeModel) -> Result<()> {
        if self.layer > model.n_layers() {
            return Err(Error::out_of_range("layer", self.layer, format!("0..={}", model.n_layers())));
        }
        if sae.d_in() != model.d_model() {
            return Err(Error::DimensionMismatch {
                context: "SAE width vs d_model",
                expected: model.d_model(),
                got: sae.d_in(),
            });
        }
        if !self.omega.is_finite() {
            return Err(Error::out_of_range("omega", self.omega, "finite"));
        }
        sae.decoder_column(self.feature_id).map(|_| ())
    }
}

/// Adds `omega · direction` to the chosen rows of `x`.
pub fn add_direction(x: &mut Array2<f64>, direction: ArrayView1<f64>, omega: f64, positions: SteerPositions) -> Result<()> {
    if x.ncols() != direction.len() {
        return Err(Error::DimensionMismatch {
            context: "steering direction",
            expected: x.ncols(),
            got: direction.len(),
        });
    }
    if omega == 0.0 || x.nrows() == 0 {
        return Ok(());
    }
    match positions {
        SteerPositions::All => {
            for mut row in x.rows_mut() {
                row.scaled_add(omega, &direction);
            }
        }
        SteerPositions::Last => {
            let last = x.nrows() - 1;
            x.row_mut(last).scaled_add(omega, &direction);
        }
    }
    Ok(())
}

/// A copy of `x` with the feature's decoder column added at strength `spec.omega`.
pub fn steer_residual(x: ArrayView2<f64>, sae: &SaeModel, spec: &SteeringSpec) -> Result<Array2<f64>> {
    let dir = sae.decoder_column(spec.feature_id)?;
    let mut out = x.to_owned();
    add_direction(&mut out, dir, spec.omega, spec.positions)?;
    Ok(out)
}

/// A [`ResidualHook`] that adds a fixed direction.
#[derive(Clone, Debug)]
pub struct SteeringHook {
    pub boundary: usize,
    pub direction: Array1<f64>,
    pub omega: f64,
    pub positions: SteerPositions,
}

impl SteeringHook {
    pub fn from_spec(sae: &SaeModel, spec: &SteeringSpec) -> Result<Self> {
        Ok(SteeringHook {
            boundary: spec.layer,
            direction: sae.decoder_column(spec.feature_id)?.to_owned(),
            omega: spec.omega,
            positions: spec.positions,
        })
    }
}

impl ResidualHook for SteeringHook {
    fn boundary(&self) -> usize {
        self.boundary
    }

    fn apply(&self, residual: &mut Array2<f64>) -> Result<()> {
        add_direction(residual, self.direction.view(), self.omega, self.positions)
    }
}

pub fn steered_logits_tokens(model: &ToyLm, sae: &SaeModel, tokens: &[TokenId], spec: &SteeringSpec) -> Result<Array1<f64>> {
    spec.validate(model, sae)?;
    let hook = SteeringHook::from_spec(sae, spec)?;
    model.last_logits(tokens, Some(&hook))
}

pub fn steered_distribution_tokens(
    model: &ToyLm,
    sae: &SaeModel,
    tokens: &[TokenId],
    spec: &SteeringSpec,
    temperature: f64,
) -> Result<TokenDistribution> {
    let logits = steered_logits_tokens(model, sae, tokens, spec)?;
    TokenDistribution::from_logits(logits.view(), temperature)
}

/// Next-token distribution for player one's prompt with neutral notes.
pub fn steered_distribution(
    model: &ToyLm,
    sae: &SaeModel,
    h: &GameHistory,
    spec: &SteeringSpec,
    temperature: f64,
) -> Result<TokenDistribution> {
    let tokens = render_prompt(model.vocab(), h, model.config().context_window)?;
    steered_distribution_tokens(model, sae, &tokens, spec, temperature)
}

/// The two action-token probabilities at one steering strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProbs {
    pub p_green: f64,
    pub p_blue: f64,
}

impl ActionProbs {
    pub fn from_distribution(model: &ToyLm, d: &TokenDistribution) -> Self {
        ActionProbs {
            p_green: d.prob(model.vocab().green()),
            p_blue: d.prob(model.vocab().blue()),
        }
    }

    pub fn coherence(&self) -> f64 {
        self.p_green + self.p_blue
    }

    /// `P(blue) / (P(blue) + P(green))`, or 0.5 when both vanish.
    pub fn p_defect(&self) -> f64 {
        let total = self.p_green + self.p_blue;
        if total > 0.0 {
            self.p_blue / total
        } else {
            0.5
        }
    }
}

/// Evaluates steered action probabilities for one prompt.
///
/// ω = 0 goes through the plain forward pass. Otherwise, when the hook is the
/// final layer's input, the closed-form [`FinalLayerCache`] readout is used;
/// any other boundary runs the hooked forward pass.
pub struct PromptProbe<'m> {
    model: &'m ToyLm,
    tokens: Vec<TokenId>,
    layer: usize,
    positions: SteerPositions,
    temperature: f64,
    cache: Option<FinalLayerCache<'m>>,
    baseline: ActionProbs,
}

impl<'m> PromptProbe<'m> {
    pub fn new(model: &'m ToyLm, tokens: Vec<TokenId>, layer: usize, positions: SteerPositions, temperature: f64) -> Result<Self> {
        if layer > model.n_layers() {
            return Err(Error::out_of_range("layer", layer, format!("0..={}", model.n_layers())));
        }
        let dist = model.next_token_distribution(&tokens, temperature, None)?;
        let baseline = ActionProbs::from_distribution(model, &dist);
        let cache = if layer == model.final_layer_boundary() {
            Some(FinalLayerCache::new(model, &tokens)?)
        } else {
            None
        };
        Ok(PromptProbe {
            model,
            tokens,
            layer,
            positions,
            temperature,
            cache,
            baseline,
        })
    }

    pub fn baseline(&self) -> ActionProbs {
        self.baseline
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn probe(&self, dir: &ProbeDirection, omega: f64) -> Result<ActionProbs> {
        if omega == 0.0 {
            return Ok(self.baseline);
        }
        let logits = match (&self.cache, &dir.projected) {
            (Some(cache), Some(p)) => cache.steered_logits(p, omega, self.positions),
            _ => {
                let hook = SteeringHook {
                    boundary: self.layer,
                    direction: dir.raw.clone(),
                    omega,
                    positions: self.positions,
                };
                self.model.last_logits(&self.tokens, Some(&hook))?
            }
        };
        let dist = TokenDistribution::from_logits(logits.view(), self.temperature)?;
        Ok(ActionProbs::from_distribution(self.model, &dist))
    }
}

/// A steering direction prepared for [`PromptProbe`].
#[derive(Clone, Debug)]
pub struct ProbeDirection {
    raw: Array1<f64>,
    projected: Option<ProjectedDirection>,
}

impl ProbeDirection {
    pub fn new(model: &ToyLm, direction: ArrayView1<f64>, layer: usize) -> Result<Self> {
        let projected = if layer == model.final_layer_boundary() {
            Some(FinalLayerCache::project(model, direction)?)
        } else {
            None
        };
        Ok(ProbeDirection {
            raw: direction.to_owned(),
            projected,
        })
    }

    pub fn raw(&self) -> ArrayView1<'_, f64> {
        self.raw.view()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub history_id: usize,
    pub omegas: Vec<f64>,
    /// Renormalised `P(blue) / (P(blue) + P(green))`.
    pub p_defect: Vec<f64>,
    pub p_blue: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl SweepCurve {
    /// Whether `p_defect` is non-increasing or non-decreasing within `tol`.
    pub fn is_monotone(&self, tol: f64) -> bool {
        let w = || self.p_defect.windows(2).map(|w| w[1] - w[0]);
        w().all(|d| d <= tol) || w().all(|d| d >= -tol)
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] < w[0]) || !grid.contains(&0.0) {
        return Err(Error::InvalidInput("omega grid must be non-empty, sorted and contain 0".into()));
    }
    Ok(())
}

pub fn sweep_probe(probe: &PromptProbe<'_>, dir: &ProbeDirection, history_id: usize, grid: &[f64]) -> Result<SweepCurve> {
    check_grid(grid)?;
    let mut curve = SweepCurve {
        history_id,
        omegas: grid.to_vec(),
        p_defect: Vec::with_capacity(grid.len()),
        p_blue: Vec::with_capacity(grid.len()),
        coherence: Vec::with_capacity(grid.len()),
    };
    for &w in grid {
        let p = probe.probe(dir, w)?;
        curve.p_defect.push(p.p_defect());
        curve.p_blue.push(p.p_blue);
        curve.coherence.push(p.coherence());
    }
    Ok(curve)
}

/// ω sweep of one feature on one history, using the plain and hooked
/// forward passes only.
pub fn sweep(
    model: &ToyLm,
    sae: &SaeModel,
    h: &GameHistory,
    history_id: usize,
    spec_template: &SteeringSpec,
    grid: &[f64],
    temperature: f64,
) -> Result<SweepCurve> {
    check_grid(grid)?;
    let mut curve = SweepCurve {
        history_id,
        omegas: grid.to_vec(),
        p_defect: vec![],
        p_blue: vec![],
        coherence: vec![],
    };
    for &w in grid {
        let spec = SteeringSpec {
            omega: w,
            ..spec_template.clone()
        };
        let d = steered_distribution(model, sae, h, &spec, temperature)?;
        let p = ActionProbs::from_distribution(model, &d);
        curve.p_defect.push(p.p_defect());
        curve.p_blue.push(p.p_blue);
        curve.coherence.push(p.coherence());
    }
    Ok(curve)
}

/// `side` evenly spaced points on `[minus, 0]`, the same on `[0, plus]`,
/// with 0 once. Duplicates (a zero bound) collapse.
pub fn omega_grid(minus: f64, plus: f64, side: usize) -> Vec<f64> {
    let side = side.max(1);
    // The fraction goes first so the outermost points are the bounds exactly.
    let frac = |i: usize| i as f64 / side as f64;
    let mut g: Vec<f64> = (0..side).map(|i| minus * frac(side - i)).collect();
    g.push(0.0);
    g.extend((1..=side).map(|i| plus * frac(i)));
    // a zero bound would otherwise leave a -0.0 in front of the 0
    g.iter_mut().filter(|w| **w == 0.0).for_each(|w| *w = 0.0);
    g.dedup();
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn arithmetic_fixture() {
        let mut x = array![[1.0, 0.0]];
        add_direction(&mut x, array![0.5, -0.5].view(), 2.0, SteerPositions::All).unwrap();
        assert_eq!(x, array![[2.0, -1.0]]);
    }

    #[test]
    fn zero_omega_is_identity_and_last_only_touches_last() {
        let x0 = array![[0.1, 0.2], [0.3, -0.4], [1.0, 2.0]];
        let mut x = x0.clone();
        add_direction(&mut x, array![3.0, 4.0].view(), 0.0, SteerPositions::All).unwrap();
        assert_eq!(x, x0);
        add_direction(&mut x, array![3.0, 4.0].view(), 1.0, SteerPositions::Last).unwrap();
        assert_eq!(x.row(0), x0.row(0));
        assert_eq!(x.row(2), array![4.0, 6.0]);
    }

    #[test]
    fn grid_contains_zero_once() {
        let g = omega_grid(-4.0, 8.0, 8);
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], -4.0);
        assert_eq!(g[8], 0.0);
        assert_eq!(g[16], 8.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(omega_grid(0.0, 2.0, 4), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let flat = omega_grid(-0.0, 0.0, 3);
        assert_eq!(flat.len(), 1);
        assert!(flat[0].is_sign_positive());
    }

    #[test]
    fn monotone_check() {
        let c = |p: Vec<f64>| SweepCurve {
            history_id: 0,
            omegas: vec![0.0; p.len()],
            coherence: vec![1.0; p.len()],
            p_blue: p.clone(),
            p_defect: p,
        };
        assert!(c(vec![0.5, 0.5, 0.5]).is_monotone(1e-3));
        assert!(c(vec![0.1, 0.2, 0.2005, 0.9]).is_monotone(1e-3));
        assert!(!c(vec![0.1, 0.9, 0.1, 0.9]).is_monotone(1e-3));
    }

    #[test]
    fn probabilities_helpers() {
        let p = ActionProbs { p_green: 0.3, p_blue: 0.1 };
        assert!((p.coherence() - 0.4).abs() < 1e-15);
        assert!((p.p_defect() - 0.25).abs() < 1e-15);
        assert_eq!(ActionProbs { p_green: 0.0, p_blue: 0.0 }.p_defect(), 0.5);
    }
}
