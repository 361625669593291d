use serde::Serialize;
use steerlab_core::sae::{top_activations, ActivationDensity, DensityClass, FeatureDossier};

use super::Ctx;
use crate::error::{CliError, CliResult};
use crate::output::{num, Csv};
use crate::pipeline;
use crate::svg::{Plot, PALETTE};

#[derive(Serialize)]
struct Dashboard<'a> {
    #[serde(flatten)]
    dossier: &'a FeatureDossier,
    /// The feature never fires on the activation corpus.
    degenerate: bool,
    /// Share of the top contexts whose activating token is a persona marker.
    marker_fraction: f64,
}

pub fn run(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg.clone();
    let feature = cfg
        .dashboard
        .feature_id
        .ok_or_else(|| CliError::input("dashboard needs dashboard.feature_id"))?;
    let model = pipeline::load_model(&mut ctx.run, cfg.checkpoints.model.as_ref())?.model;
    let (sae, sae_meta) = pipeline::load_sae(&mut ctx.run, cfg.checkpoints.sae.as_ref(), &model)?;
    if feature >= sae.d_latent() {
        return Err(CliError::input(format!("feature {feature} is out of range for {} latents", sae.d_latent())));
    }
    ctx.run.lap("load");
    let layer = cfg.screen.hook_layer(&model);
    let hook = ctx.pool()?.install(|| pipeline::hook_corpus_for(&cfg, &model, &sae_meta, layer))?;
    ctx.run.lap("hook_corpus");
    let d = &cfg.dashboard;
    let mut dossier = top_activations(&sae, feature, &hook, model.vocab(), d.k, d.context_len, &d.density)?;
    dossier.label = dossier.density.class.map(|c| {
        match c {
            DensityClass::TailCluster => "tail_cluster",
            DensityClass::FlatTail => "flat_tail",
        }
        .to_string()
    });
    let vocab = model.vocab();
    let markers = dossier
        .top_contexts
        .iter()
        .filter(|r| vocab.id(&r.token).is_some_and(|id| vocab.is_persona_marker(id)))
        .count();
    let marker_fraction = if dossier.top_contexts.is_empty() {
        0.0
    } else {
        markers as f64 / dossier.top_contexts.len() as f64
    };
    let degenerate = dossier.density.is_dead();

    ctx.run.json("density.json", &dossier.density);
    ctx.run.file("density.svg", density_svg(&dossier.density).into_bytes());
    let mut table = Csv::new(&["rank", "activation", "sequence", "position", "token", "context"]);
    for (i, r) in dossier.top_contexts.iter().enumerate() {
        table.row(vec![
            (i + 1).to_string(),
            num(r.activation),
            r.sequence.to_string(),
            r.position.to_string(),
            r.token.clone(),
            r.context.clone(),
        ]);
    }
    ctx.run.file("top_activations.csv", table.into_bytes());
    ctx.run.json(
        "dossier.json",
        &Dashboard {
            dossier: &dossier,
            degenerate,
            marker_fraction,
        },
    );
    ctx.run.note("feature_id", feature);
    ctx.run.note("class", &dossier.label);
    ctx.run.note("degenerate", degenerate);
    ctx.run.note("truncated", dossier.truncated);
    ctx.run.note("nonzero_fraction", dossier.density.nonzero_fraction);
    ctx.run.note("marker_fraction", marker_fraction);
    ctx.run.lap("dossier");
    Ok(())
}

fn density_svg(d: &ActivationDensity) -> String {
    let title = format!("Feature {} activation density ({} of {} rows active)", d.feature_id, d.positive, d.total);
    let x_hi = d.bin_edges.last().copied().unwrap_or(0.0);
    let top = d.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut p = Plot::new(&title, "activation", "count", (0.0, if x_hi > 0.0 { x_hi } else { 1.0 }), (0.0, top * 1.1));
    if d.positive > 0 {
        let heights: Vec<f64> = d.counts.iter().map(|&c| c as f64).collect();
        p.bars(&d.bin_edges, &heights, PALETTE[0]);
    }
    p.render()
}
