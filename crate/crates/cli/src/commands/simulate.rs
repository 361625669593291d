use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use steerlab_core::game::{defection_count, play_indexed_game, GameHistory, Seat};
use steerlab_core::stats::{gmm_fit, logistic_fit, GmmModel};
use steerlab_core::{Policy, PolicySpec, SaeModel};

use super::Ctx;
use crate::error::{CliError, CliResult};
use crate::output::{num, Csv};
use crate::pipeline;
use crate::svg::{data_range, Plot, PALETTE};

struct GameRow {
    rounds: usize,
    opponent_p: Option<f64>,
    defections: [usize; 2],
    scores: [i64; 2],
}

impl GameRow {
    fn rate(&self, seat: usize) -> f64 {
        self.defections[seat] as f64 / self.rounds as f64
    }

    fn per_turn(&self, seat: usize) -> f64 {
        self.scores[seat] as f64 / self.rounds as f64
    }
}

#[derive(Serialize)]
struct Clusters<'a> {
    model: &'a GmmModel,
    /// Component of each game, in game order.
    assignments: Vec<usize>,
}

/// Opponent defection probability for each game when sweeping.
fn opponent_schedule(spec: &PolicySpec, sweep: Option<[f64; 2]>, n: usize) -> CliResult<Vec<Option<f64>>> {
    match (spec, sweep) {
        (PolicySpec::RandomDefector { .. }, Some([lo, hi])) => {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                return Err(CliError::input(format!("opponent_sweep must lie in [0, 1], got [{lo}, {hi}]")));
            }
            let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
            Ok((0..n).map(|i| Some(lo + step * i as f64)).collect())
        }
        _ => Ok(vec![None; n]),
    }
}

pub fn run(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg.clone();
    let sim = &cfg.simulate;
    if sim.n_games == 0 {
        return Err(CliError::input("simulate.n_games must be positive"));
    }
    sim.lengths.validate()?;
    let needs_model = sim.p1.needs_model() || sim.p2.needs_model();
    let steered = [&sim.p1, &sim.p2]
        .iter()
        .any(|s| matches!(s, PolicySpec::ModelAgent { steering: Some(_), .. }));
    let model = if needs_model {
        Some(Arc::new(pipeline::load_model(&mut ctx.run, cfg.checkpoints.model.as_ref())?.model))
    } else {
        None
    };
    let sae: Option<Arc<SaeModel>> = match (&model, steered) {
        (Some(m), true) => Some(Arc::new(pipeline::load_sae(&mut ctx.run, cfg.checkpoints.sae.as_ref(), m)?.0)),
        _ => None,
    };
    let p1 = Policy::from_spec(&sim.p1, model.clone(), sae.clone()).map_err(|e| CliError::input(e.to_string()).with_context("simulate.p1"))?;
    let p2 = Policy::from_spec(&sim.p2, model.clone(), sae.clone()).map_err(|e| CliError::input(e.to_string()).with_context("simulate.p2"))?;
    let schedule = opponent_schedule(&sim.p2, sim.opponent_sweep, sim.n_games)?;
    let opponents: Vec<Policy> = schedule
        .iter()
        .map(|p| match p {
            Some(p) => Policy::random_defector(*p),
            None => Ok(p2.clone()),
        })
        .collect::<steerlab_core::Result<_>>()?;
    ctx.run.lap("setup");

    let games: Vec<steerlab_core::Result<GameHistory>> = ctx.pool()?.install(|| {
        (0..sim.n_games)
            .into_par_iter()
            .map(|i| play_indexed_game(&p1, &opponents[i], sim.lengths, cfg.seed, i as u64))
            .collect()
    });
    let mut rows = Vec::with_capacity(games.len());
    for (i, g) in games.into_iter().enumerate() {
        let h = g.map_err(|e| CliError::from(e).with_context(&format!("game {i}")))?;
        rows.push(GameRow {
            rounds: h.len(),
            opponent_p: schedule[i],
            defections: [defection_count(&h, Seat::One), defection_count(&h, Seat::Two)],
            scores: [h.score_of(Seat::One), h.score_of(Seat::Two)],
        });
    }
    ctx.run.lap("games");

    let mut csv = Csv::new(&[
        "game",
        "rounds",
        "opponent_p",
        "p1_defections",
        "p2_defections",
        "p1_defect",
        "p2_defect",
        "p1_score",
        "p2_score",
        "p1_per_turn",
        "p2_per_turn",
    ]);
    for (i, r) in rows.iter().enumerate() {
        csv.row(vec![
            i.to_string(),
            r.rounds.to_string(),
            r.opponent_p.map(num).unwrap_or_default(),
            r.defections[0].to_string(),
            r.defections[1].to_string(),
            num(r.rate(0)),
            num(r.rate(1)),
            r.scores[0].to_string(),
            r.scores[1].to_string(),
            num(r.per_turn(0)),
            num(r.per_turn(1)),
        ]);
    }
    ctx.run.file("games.csv", csv.into_bytes());

    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.rate(1), r.rate(0))).collect();
    let mut scatter = Plot::new("Defection rates per game", "player 2 defection rate", "player 1 defection rate", (0.0, 1.0), (0.0, 1.0));
    scatter.points(&points, PALETTE[0], 3.0);
    let fit = if points.len() >= 5 { logistic_fit(&points).ok() } else { None };
    if let Some(f) = &fit {
        let curve: Vec<(f64, f64)> = (0..=100).map(|i| i as f64 / 100.0).map(|x| (x, f.predict(x))).collect();
        scatter.line(&curve, PALETTE[1], 2.0, 1.0);
        scatter.legend("logistic fit", PALETTE[1]);
    }
    scatter.legend("games", PALETTE[0]);
    ctx.run.file("defection_scatter.svg", scatter.render().into_bytes());
    ctx.run.json("logistic_fit.json", &fit);

    let per_turn: Vec<(f64, f64)> = rows.iter().map(|r| (r.per_turn(0), r.per_turn(1))).collect();
    if rows.len() >= sim.gmm.k {
        let x = Array2::from_shape_fn((rows.len(), 2), |(i, j)| if j == 0 { per_turn[i].0 } else { per_turn[i].1 });
        let gmm = gmm_fit(x.view(), &sim.gmm, cfg.seed)?;
        let assignments: Vec<usize> = per_turn.iter().map(|&(a, b)| gmm.assign(&[a, b])).collect();
        let mut plot = Plot::new(
            "Per-turn scores by mixture component",
            "player 1 score per turn (cents)",
            "player 2 score per turn (cents)",
            data_range(per_turn.iter().map(|p| p.0)),
            data_range(per_turn.iter().map(|p| p.1)),
        );
        for (j, c) in gmm.components.iter().enumerate() {
            let colour = PALETTE[j % PALETTE.len()];
            let members: Vec<(f64, f64)> = per_turn.iter().zip(&assignments).filter(|(_, &a)| a == j).map(|(p, _)| *p).collect();
            plot.points(&members, colour, 3.0);
            plot.cross((c.mean[0], c.mean[1]), colour);
            plot.legend(&format!("component {j} (w {:.2})", c.weight), colour);
        }
        ctx.run.file("score_clusters.svg", plot.render().into_bytes());
        ctx.run.note("gmm_log_likelihood", gmm.log_likelihood);
        ctx.run.json("score_clusters.json", &Clusters { model: &gmm, assignments });
    } else {
        ctx.run.note("gmm_skipped", format!("needs at least {} games", sim.gmm.k));
    }

    let (d1, total): (usize, usize) = rows.iter().fold((0, 0), |(d, n), r| (d + r.defections[0], n + r.rounds));
    ctx.run.note("games", rows.len());
    ctx.run.note("rounds", total);
    ctx.run.note("p1_defect_rate", d1 as f64 / total as f64);
    ctx.run.note("mean_p1_defect", rows.iter().map(|r| r.rate(0)).sum::<f64>() / rows.len() as f64);
    ctx.run.note("logistic_fit", &fit);
    ctx.run.lap("figures");
    Ok(())
}
