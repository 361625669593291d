use steerlab_core::screening::{calibrate_omega, feature_sweeps, monotonicity_score, HistoryPanel};
use steerlab_core::steering::{omega_grid, ProbeDirection};

use super::Ctx;
use crate::error::{CliError, CliResult};
use crate::output::{num, Csv};
use crate::pipeline;
use crate::svg::{Plot, PALETTE};

pub fn run(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg.clone();
    cfg.screen.validate()?;
    let feature = cfg.sweep.feature_id.ok_or_else(|| CliError::input("sweep needs sweep.feature_id"))?;
    let model = pipeline::load_model(&mut ctx.run, cfg.checkpoints.model.as_ref())?.model;
    let (sae, _) = pipeline::load_sae(&mut ctx.run, cfg.checkpoints.sae.as_ref(), &model)?;
    if feature >= sae.d_latent() {
        return Err(CliError::input(format!("feature {feature} is out of range for {} latents", sae.d_latent())));
    }
    ctx.run.lap("load");
    let panel = HistoryPanel::enumerated(&model, &cfg.screen)?;
    let dir = ProbeDirection::new(&model, sae.decoder_column(feature)?, panel.layer)?;
    let (minus, plus) = match (cfg.sweep.omega_minus, cfg.sweep.omega_plus) {
        (Some(m), Some(p)) => (m, p),
        (m, p) => {
            let b = calibrate_omega(&panel, &dir, &cfg.screen)?;
            ctx.run.note("calibrated", b);
            (m.unwrap_or(b.minus), p.unwrap_or(b.plus))
        }
    };
    if !(minus <= 0.0 && plus >= 0.0) {
        return Err(CliError::input(format!("sweep bounds must satisfy omega_minus <= 0 <= omega_plus, got [{minus}, {plus}]")));
    }
    let grid = omega_grid(minus, plus, cfg.sweep.grid_side);
    let curves = feature_sweeps(&panel, &dir, &grid)?;
    let monotone = monotonicity_score(&curves, cfg.screen.monotone_tolerance);
    ctx.run.lap("sweep");

    let mut csv = Csv::new(&["history_id", "omega", "p_defect", "p_blue", "coherence"]);
    for c in &curves {
        for i in 0..c.omegas.len() {
            csv.row(vec![c.history_id.to_string(), num(c.omegas[i]), num(c.p_defect[i]), num(c.p_blue[i]), num(c.coherence[i])]);
        }
    }
    ctx.run.file("sweep.csv", csv.into_bytes());
    let title = format!("Feature {feature}: P(defect) against steering strength");
    let mut plot = Plot::new(&title, "omega", "P(defect)", (minus.min(-1e-9), plus.max(1e-9)), (0.0, 1.0));
    for c in &curves {
        let pts: Vec<(f64, f64)> = c.omegas.iter().copied().zip(c.p_defect.iter().copied()).collect();
        plot.line(&pts, PALETTE[c.history_id % PALETTE.len()], 1.0, 0.5);
    }
    plot.vline(0.0, "#555");
    ctx.run.file("sweep.svg", plot.render().into_bytes());
    ctx.run.note("feature_id", feature);
    ctx.run.note("omega_minus", minus);
    ctx.run.note("omega_plus", plus);
    ctx.run.note("grid", &grid);
    ctx.run.note("histories", curves.len());
    ctx.run.note("monotone_fraction", monotone);
    Ok(())
}
