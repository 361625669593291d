use serde::Serialize;
use steerlab_core::game::{defection_count, enumerate_histories, Seat};
use steerlab_core::sae::dead_features;
use steerlab_core::screening::{screen_all, tail_features};
use steerlab_core::stats::strategy_area;
use steerlab_core::{DeltaRecord, ScreeningReport};

use super::Ctx;
use crate::error::CliResult;
use crate::output::{num, Csv};
use crate::pipeline;
use crate::svg::{heatmap_panels, Plot, PALETTE};

pub const HISTOGRAM_BINS: usize = 20;

pub fn run(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg.clone();
    cfg.screen.validate()?;
    let model = pipeline::load_model(&mut ctx.run, cfg.checkpoints.model.as_ref())?.model;
    let (sae, sae_meta) = pipeline::load_sae(&mut ctx.run, cfg.checkpoints.sae.as_ref(), &model)?;
    let ids = (ctx.run.inputs[0].sha256.clone(), ctx.run.inputs[1].sha256.clone());
    ctx.run.lap("load");
    let layer = cfg.screen.hook_layer(&model);
    let pool = ctx.pool()?;
    let dead = pool.install(|| -> CliResult<Vec<usize>> {
        let hook = pipeline::hook_corpus_for(&cfg, &model, &sae_meta, layer)?;
        Ok(dead_features(&sae, hook.activations.view())?)
    })?;
    ctx.run.lap("dead_features");
    let report = screen_all(&model, &sae, &cfg.screen, &dead, (&ids.0, &ids.1), ctx.workers)?;
    ctx.run.lap("screen");

    ctx.run.json("report.json", &report);
    ctx.run.file("report.csv", report_csv(&report.records));
    let (edges, counts) = delta_histogram(&report.records);
    ctx.run.file("delta_histogram.csv", histogram_csv(&edges, &counts));
    ctx.run.file("delta_histogram.svg", histogram_svg(&edges, &counts).into_bytes());
    if report.records.len() >= 3 {
        let area = strategy_area(&report.records, baseline_p_blue(&report))?;
        let mut plot = Plot::new("Strategy area", "mean P(blue) at omega+", "mean P(blue) at omega-", (0.0, 1.0), (0.0, 1.0));
        plot.line(&[(0.0, 0.0), (1.0, 1.0)], "#bbb", 1.0, 1.0);
        if area.hull.len() >= 2 {
            plot.polygon(&area.hull, PALETTE[0]);
        }
        plot.points(&area.points, PALETTE[0], 3.0);
        plot.cross(area.center, PALETTE[1]);
        plot.legend("features", PALETTE[0]);
        plot.legend("baseline", PALETTE[1]);
        ctx.run.json("strategy_area.json", &area);
        ctx.run.file("strategy_area.svg", plot.render().into_bytes());
        ctx.run.note("strategy_area", area.area);
    }
    let tails = tail_features(&report, cfg.screen.tail_threshold);
    let grids = tail_grids(&tails, cfg.screen.n_rounds)?;
    for g in &grids {
        let panels: Vec<(String, Vec<Vec<f64>>)> = [("omega-", &g.minus), ("omega = 0", &g.zero), ("omega+", &g.plus)]
            .into_iter()
            .map(|(n, grid)| (n.to_string(), grid.clone()))
            .collect();
        let title = format!("Feature {} (delta {:.3}): mean P(blue)", g.feature_id, g.delta);
        let svg = heatmap_panels(&title, "player 1 defections", "player 2 defections", &panels);
        ctx.run.file(format!("tails/feature_{}.svg", g.feature_id), svg.into_bytes());
    }
    ctx.run.json("tails.json", &grids);

    ctx.run.note("prefiltered", report.prefiltered_count);
    ctx.run.note("dead", report.dead_count);
    ctx.run.note("screened", report.records.len());
    ctx.run.note("failures", report.failures.len());
    ctx.run.note("baseline_mean_p_defect", report.baseline_mean_p_defect);
    ctx.run.note("tail_features", grids.iter().map(|g| g.feature_id).collect::<Vec<_>>());
    ctx.run.note("hit_cap", report.records.iter().filter(|r| r.hit_cap).count());
    ctx.run.lap("figures");
    Ok(())
}

fn baseline_p_blue(report: &ScreeningReport) -> f64 {
    report.baseline_p_blue.iter().sum::<f64>() / report.baseline_p_blue.len().max(1) as f64
}

fn report_csv(records: &[DeltaRecord]) -> Vec<u8> {
    let mut c = Csv::new(&[
        "feature_id",
        "p_plus",
        "p_minus",
        "delta",
        "coherence_plus",
        "coherence_minus",
        "omega_plus",
        "omega_minus",
        "monotone_fraction",
        "hit_cap",
        "degenerate",
    ]);
    for r in records {
        c.row(vec![
            r.feature_id.to_string(),
            num(r.p_plus),
            num(r.p_minus),
            num(r.delta),
            num(r.coherence_plus),
            num(r.coherence_minus),
            num(r.omega_plus),
            num(r.omega_minus),
            num(r.monotone_fraction),
            r.hit_cap.to_string(),
            r.degenerate.to_string(),
        ]);
    }
    c.into_bytes()
}

/// Equal-width bins over `[-1, 1]`; δ = 1 lands in the last bin.
pub fn delta_histogram(records: &[DeltaRecord]) -> (Vec<f64>, Vec<usize>) {
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for r in records {
        let b = ((r.delta + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
        counts[(b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    (edges, counts)
}

fn histogram_csv(edges: &[f64], counts: &[usize]) -> Vec<u8> {
    let mut c = Csv::new(&["bin_low", "bin_high", "count"]);
    for (i, n) in counts.iter().enumerate() {
        c.row(vec![num(edges[i]), num(edges[i + 1]), n.to_string()]);
    }
    c.into_bytes()
}

fn histogram_svg(edges: &[f64], counts: &[usize]) -> String {
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut p = Plot::new("Distribution of delta across features", "delta", "features", (-1.0, 1.0), (0.0, top * 1.1));
    let heights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    p.bars(edges, &heights, PALETTE[0]);
    p.vline(0.0, "#555");
    p.render()
}

#[derive(Debug, Serialize)]
pub struct TailGrid {
    pub feature_id: usize,
    pub delta: f64,
    /// `[p1 defections][p2 defections]` mean `P(blue)`; NaN-free since
    /// every cell holds at least one history.
    pub minus: Vec<Vec<f64>>,
    pub zero: Vec<Vec<f64>>,
    pub plus: Vec<Vec<f64>>,
}

pub fn tail_grids(tails: &[&DeltaRecord], n_rounds: usize) -> CliResult<Vec<TailGrid>> {
    let histories = enumerate_histories(n_rounds)?;
    let cells: Vec<(usize, usize)> = histories
        .iter()
        .map(|h| (defection_count(h, Seat::One), defection_count(h, Seat::Two)))
        .collect();
    let side = n_rounds + 1;
    let average = |values: &[f64]| {
        let mut sum = vec![vec![0.0; side]; side];
        let mut n = vec![vec![0usize; side]; side];
        for (&(a, b), v) in cells.iter().zip(values) {
            sum[a][b] += v;
            n[a][b] += 1;
        }
        for a in 0..side {
            for b in 0..side {
                sum[a][b] /= n[a][b] as f64;
            }
        }
        sum
    };
    Ok(tails
        .iter()
        .map(|r| TailGrid {
            feature_id: r.feature_id,
            delta: r.delta,
            minus: average(&r.grid_minus),
            zero: average(&r.grid_zero),
            plus: average(&r.grid_plus),
        })
        .collect())
}
