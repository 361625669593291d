//! Feature screening: prefilter by prompt activation, calibrate ω per
//! feature, and measure the defection shift δ over every short history.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{enumerate_histories, GameHistory};
use crate::lm::{render_prompt, SteerPositions, TokenId, ToyLm};
use crate::sae::{SaeModel, ACTIVE_EPS};
use crate::steering::{omega_grid, sweep_probe, PromptProbe, ProbeDirection, SweepCurve};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningConfig {
    pub n_rounds: usize,
    /// Residual boundary to steer; `None` means the final layer's input.
    pub layer: Option<usize>,
    pub positions: SteerPositions,
    pub temperature: f64,
    pub prefilter_threshold: f64,
    pub coherence_floor: f64,
    pub omega_cap: f64,
    /// First step of the doubling search.
    pub omega_start: f64,
    pub omega_resolution: f64,
    /// Points on each side of zero in the monotonicity sweep.
    pub grid_side: usize,
    pub monotone_tolerance: f64,
    pub tail_threshold: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            n_rounds: 3,
            layer: None,
            positions: SteerPositions::All,
            temperature: 1.0,
            prefilter_threshold: ACTIVE_EPS,
            coherence_floor: 0.9,
            omega_cap: 16.0,
            omega_start: 1.0,
            omega_resolution: 1e-2,
            grid_side: 8,
            monotone_tolerance: 1e-3,
            tail_threshold: 0.6,
        }
    }
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coherence_floor >= 0.0 && self.coherence_floor < 1.0) {
            return Err(Error::out_of_range("coherence_floor", self.coherence_floor, "[0, 1)"));
        }
        if !(self.omega_cap > 0.0 && self.omega_resolution > 0.0 && self.omega_start > 0.0) {
            return Err(Error::InvalidInput("omega_cap, omega_start and omega_resolution must be positive".into()));
        }
        if !(self.tail_threshold >= 0.0 && self.tail_threshold <= 1.0) {
            return Err(Error::out_of_range("tail_threshold", self.tail_threshold, "[0, 1]"));
        }
        Ok(())
    }

    pub fn hook_layer(&self, model: &ToyLm) -> usize {
        self.layer.unwrap_or_else(|| model.final_layer_boundary())
    }
}

/// Prompts for a fixed history set, with their unsteered probes.
pub struct HistoryPanel<'m> {
    pub histories: Vec<GameHistory>,
    pub probes: Vec<PromptProbe<'m>>,
    pub layer: usize,
}

impl<'m> HistoryPanel<'m> {
    pub fn new(model: &'m ToyLm, histories: Vec<GameHistory>, cfg: &ScreeningConfig) -> Result<Self> {
        if histories.is_empty() {
            return Err(Error::InvalidInput("no histories to screen over".into()));
        }
        let layer = cfg.hook_layer(model);
        let probes = histories
            .iter()
            .map(|h| {
                let tokens = render_prompt(model.vocab(), h, model.config().context_window)?;
                PromptProbe::new(model, tokens, layer, cfg.positions, cfg.temperature)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HistoryPanel { histories, probes, layer })
    }

    pub fn enumerated(model: &'m ToyLm, cfg: &ScreeningConfig) -> Result<Self> {
        Self::new(model, enumerate_histories(cfg.n_rounds)?, cfg)
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn baseline_p_blue(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.baseline().p_blue).collect()
    }

    pub fn mean_coherence(&self, dir: &ProbeDirection, omega: f64) -> Result<f64> {
        let mut acc = 0.0;
        for p in &self.probes {
            acc += p.probe(dir, omega)?.coherence();
        }
        Ok(acc / self.probes.len() as f64)
    }
}

/// Features whose activation exceeds `threshold` at some position of some prompt.
pub fn prompt_active_features(model: &ToyLm, sae: &SaeModel, prompts: &[Vec<TokenId>], layer: usize, threshold: f64) -> Result<Vec<usize>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts".into()));
    }
    let mut active = vec![false; sae.d_latent()];
    for p in prompts {
        let x = model.residual_at(p, layer)?;
        let f = sae.encode_batch(x.view())?;
        for row in f.rows() {
            for (a, &v) in active.iter_mut().zip(row) {
                *a |= v > threshold;
            }
        }
    }
    Ok((0..active.len()).filter(|&j| active[j]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaBounds {
    pub minus: f64,
    pub plus: f64,
    /// A bound reached the search cap without losing coherence.
    pub hit_cap: bool,
    /// Even the smallest probed step lost coherence in some direction.
    pub degenerate: bool,
}

/// Largest |ω| per sign keeping mean coherence at or above the floor:
/// doubling from `omega_start` up to the cap, then bisection down to the
/// resolution.
pub fn calibrate_omega(panel: &HistoryPanel<'_>, dir: &ProbeDirection, cfg: &ScreeningConfig) -> Result<OmegaBounds> {
    let mut bound = [0.0; 2];
    let mut hit_cap = false;
    let mut degenerate = false;
    for (slot, sign) in [(0, -1.0), (1, 1.0)] {
        if cfg.coherence_floor <= 0.0 {
            bound[slot] = cfg.omega_cap;
            hit_cap = true;
            continue;
        }
        let ok = |w: f64| -> Result<bool> { Ok(panel.mean_coherence(dir, sign * w)? >= cfg.coherence_floor) };
        let mut lo = 0.0;
        let mut hi = cfg.omega_start.min(cfg.omega_cap);
        let mut capped = false;
        while ok(hi)? {
            lo = hi;
            if hi >= cfg.omega_cap {
                capped = true;
                break;
            }
            hi = (hi * 2.0).min(cfg.omega_cap);
        }
        if !capped {
            while hi - lo > cfg.omega_resolution {
                let mid = 0.5 * (lo + hi);
                if ok(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        hit_cap |= capped;
        degenerate |= lo == 0.0;
        bound[slot] = lo;
    }
    Ok(OmegaBounds {
        // 0.0 - 0.0 is +0.0, unlike -0.0
        minus: 0.0 - bound[0],
        plus: bound[1],
        hit_cap,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub feature_id: usize,
    pub omega_plus: f64,
    pub omega_minus: f64,
    /// Mean raw `P(blue)` under `omega_plus`.
    pub p_plus: f64,
    pub p_minus: f64,
    pub delta: f64,
    /// Same means over the renormalised two-token probability.
    pub p_plus_renorm: f64,
    pub p_minus_renorm: f64,
    pub coherence_plus: f64,
    pub coherence_minus: f64,
    /// Per-history raw `P(blue)` in canonical history order.
    pub grid_plus: Vec<f64>,
    pub grid_zero: Vec<f64>,
    pub grid_minus: Vec<f64>,
    pub monotone_fraction: f64,
    pub hit_cap: bool,
    pub degenerate: bool,
}

/// The δ statistic for one feature at the given strengths. Sweeps for the
/// monotonicity score run over the grid between the two strengths.
pub fn screen_feature(
    panel: &HistoryPanel<'_>,
    dir: &ProbeDirection,
    feature_id: usize,
    omega_plus: f64,
    omega_minus: f64,
    cfg: &ScreeningConfig,
) -> Result<DeltaRecord> {
    let n = panel.len() as f64;
    let (lo, hi) = if omega_minus <= omega_plus {
        (omega_minus.min(0.0), omega_plus.max(0.0))
    } else {
        (omega_plus.min(0.0), omega_minus.max(0.0))
    };
    let grid = omega_grid(lo, hi, cfg.grid_side);
    // (p_blue, p_defect, coherence), read off the sweep when `w` is on it.
    let at = |curve: &SweepCurve, probe: &PromptProbe<'_>, w: f64| -> Result<(f64, f64, f64)> {
        Ok(match grid.iter().position(|&g| g == w) {
            Some(i) => (curve.p_blue[i], curve.p_defect[i], curve.coherence[i]),
            None => {
                let p = probe.probe(dir, w)?;
                (p.p_blue, p.p_defect(), p.coherence())
            }
        })
    };
    let mut grid_plus = Vec::with_capacity(panel.len());
    let mut grid_minus = Vec::with_capacity(panel.len());
    let (mut renorm_plus, mut renorm_minus, mut coh_plus, mut coh_minus) = (0.0, 0.0, 0.0, 0.0);
    let mut monotone = 0usize;
    for (i, probe) in panel.probes.iter().enumerate() {
        let curve = sweep_probe(probe, dir, i, &grid)?;
        if curve.is_monotone(cfg.monotone_tolerance) {
            monotone += 1;
        }
        let up = at(&curve, probe, omega_plus)?;
        let down = at(&curve, probe, omega_minus)?;
        grid_plus.push(up.0);
        grid_minus.push(down.0);
        renorm_plus += up.1;
        renorm_minus += down.1;
        coh_plus += up.2;
        coh_minus += down.2;
    }
    let p_plus = grid_plus.iter().sum::<f64>() / n;
    let p_minus = grid_minus.iter().sum::<f64>() / n;
    Ok(DeltaRecord {
        feature_id,
        omega_plus,
        omega_minus,
        p_plus,
        p_minus,
        delta: p_plus - p_minus,
        p_plus_renorm: renorm_plus / n,
        p_minus_renorm: renorm_minus / n,
        coherence_plus: coh_plus / n,
        coherence_minus: coh_minus / n,
        grid_plus,
        grid_zero: panel.baseline_p_blue(),
        grid_minus,
        monotone_fraction: monotone as f64 / n,
        hit_cap: false,
        degenerate: false,
    })
}

/// Per-history sweeps of one feature over `grid`.
pub fn feature_sweeps(panel: &HistoryPanel<'_>, dir: &ProbeDirection, grid: &[f64]) -> Result<Vec<SweepCurve>> {
    panel
        .probes
        .iter()
        .enumerate()
        .map(|(i, p)| sweep_probe(p, dir, i, grid))
        .collect()
}

pub fn monotonicity_score(curves: &[SweepCurve], tol: f64) -> f64 {
    if curves.is_empty() {
        return 0.0;
    }
    curves.iter().filter(|c| c.is_monotone(tol)).count() as f64 / curves.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFailure {
    pub feature_id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub model_id: String,
    pub sae_id: String,
    pub layer: usize,
    pub n_histories: usize,
    pub prefiltered_count: usize,
    pub dead_count: usize,
    pub dead_features: Vec<usize>,
    pub baseline_p_blue: Vec<f64>,
    pub baseline_mean_p_defect: f64,
    pub records: Vec<DeltaRecord>,
    pub failures: Vec<FeatureFailure>,
}

impl ScreeningReport {
    pub fn record(&self, feature_id: usize) -> Option<&DeltaRecord> {
        self.records.iter().find(|r| r.feature_id == feature_id)
    }
}

/// Calibrates and screens every prefiltered, non-dead feature. Work is
/// spread over `workers` threads; records come back in feature order.
pub fn screen_all(
    model: &ToyLm,
    sae: &SaeModel,
    cfg: &ScreeningConfig,
    dead_features: &[usize],
    ids: (&str, &str),
    workers: usize,
) -> Result<ScreeningReport> {
    cfg.validate()?;
    let panel = HistoryPanel::enumerated(model, cfg)?;
    let prompts: Vec<Vec<TokenId>> = panel.probes.iter().map(|p| p.tokens().to_vec()).collect();
    let active = prompt_active_features(model, sae, &prompts, panel.layer, cfg.prefilter_threshold)?;
    let candidates: Vec<usize> = active.iter().copied().filter(|f| !dead_features.contains(f)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let outcomes: Vec<std::result::Result<DeltaRecord, FeatureFailure>> = pool.install(|| {
        candidates
            .par_iter()
            .map(|&f| {
                screen_one(model, sae, &panel, f, cfg).map_err(|e| FeatureFailure {
                    feature_id: f,
                    reason: e.to_string(),
                })
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    let baseline_p_blue = panel.baseline_p_blue();
    let baseline_mean_p_defect = panel.probes.iter().map(|p| p.baseline().p_defect()).sum::<f64>() / panel.len() as f64;
    Ok(ScreeningReport {
        model_id: ids.0.to_string(),
        sae_id: ids.1.to_string(),
        layer: panel.layer,
        n_histories: panel.len(),
        prefiltered_count: active.len(),
        dead_count: dead_features.len(),
        dead_features: dead_features.to_vec(),
        baseline_p_blue,
        baseline_mean_p_defect,
        records,
        failures,
    })
}

fn screen_one(model: &ToyLm, sae: &SaeModel, panel: &HistoryPanel<'_>, feature: usize, cfg: &ScreeningConfig) -> Result<DeltaRecord> {
    let dir = ProbeDirection::new(model, sae.decoder_column(feature)?, panel.layer)?;
    let bounds = calibrate_omega(panel, &dir, cfg)?;
    let mut rec = screen_feature(panel, &dir, feature, bounds.plus, bounds.minus, cfg)?;
    rec.hit_cap = bounds.hit_cap;
    rec.degenerate = bounds.degenerate;
    Ok(rec)
}

/// Records with `|δ| > threshold`, largest first (ties by feature id).
pub fn tail_features(report: &ScreeningReport, threshold: f64) -> Vec<&DeltaRecord> {
    let mut out: Vec<&DeltaRecord> = report.records.iter().filter(|r| r.delta.abs() > threshold).collect();
    out.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()).then(a.feature_id.cmp(&b.feature_id)));
    out
}

/// Cosine of each decoder column with `direction`.
pub fn decoder_cosines(sae: &SaeModel, direction: &Array1<f64>) -> Vec<f64> {
    let dn = direction.dot(direction).sqrt();
    sae.w_dec
        .columns()
        .into_iter()
        .map(|c| {
            let cn = c.dot(&c).sqrt();
            if cn == 0.0 || dn == 0.0 {
                0.0
            } else {
                c.dot(direction) / (cn * dn)
            }
        })
        .collect()
}

/// Direction in the hooked residual that raises the green logit relative to
/// blue: the unembedding difference pulled back through the final
/// LayerNorm gain.
pub fn green_minus_blue_direction(model: &ToyLm) -> Array1<f64> {
    let p = model.params();
    let layout = model.layout();
    let vocab = model.vocab();
    let w_u = crate::lm::model::mat(p, layout.w_u);
    let g = crate::lm::model::vec_(p, layout.lnf_g);
    let diff = &w_u.column(vocab.green().index()) - &w_u.column(vocab.blue().index());
    &diff * &g
}
