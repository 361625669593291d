use serde_json::json;
use steerlab_core::checkpoint::{model_to_bytes, params_digest, sae_to_bytes};
use steerlab_core::lm::train::{HeldOutEval, TracePoint};
use steerlab_core::lm::Trainer;
use steerlab_core::sae::{dead_features, train_sae, SaeTrainOutcome};
use steerlab_core::Error;

use super::Ctx;
use crate::error::{exit, CliError, CliResult};
use crate::output::{num, Csv};
use crate::pipeline::{self, HookSource};

pub fn run(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg.clone();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let pool = ctx.pool()?;
    let corpus = pool.install(|| pipeline::corpus(&cfg))?;
    let (coop, aggr) = corpus.persona_counts();
    ctx.run.note("corpus_sequences", corpus.len());
    ctx.run.note("persona_counts", [coop, aggr]);
    ctx.run.lap("corpus");

    let resumed = match &cfg.checkpoints.resume {
        Some(path) => {
            let loaded = pipeline::load_model(&mut ctx.run, Some(path))?;
            let state = loaded
                .optimizer
                .ok_or_else(|| CliError::input(format!("{} has no optimiser state to resume from", path.display())))?;
            Some((loaded.model, state))
        }
        None => None,
    };
    let mut trainer = match resumed {
        Some((model, state)) => Trainer::resume(&corpus, model, state, cfg.train.clone(), cfg.seed)?,
        None => Trainer::new(&corpus, cfg.model.clone(), cfg.train.clone(), cfg.seed)?,
    };
    let start_step = trainer.step_index();
    ctx.run.note("start_step", start_step);
    let outcome = pool.install(|| -> steerlab_core::Result<HeldOutEval> {
        trainer.evaluate()?;
        trainer.run_until(cfg.train.steps)?;
        match trainer.evals.last() {
            Some(e) if e.step == cfg.train.steps => Ok(e.clone()),
            _ => trainer.evaluate(),
        }
    });
    ctx.run.file("train_trace.csv", trace_csv(&trainer.trace));
    ctx.run.file("evals.csv", evals_csv(&trainer.evals));
    let meta = json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "corpus": cfg.corpus,
        "train": cfg.train,
        "step": trainer.step_index(),
    });
    let last = match outcome {
        Ok(e) => e,
        Err(Error::Divergence { step, reason }) => {
            // The trainer has already rolled back to the last evaluated state.
            ctx.run.file("model.ckpt", model_to_bytes(trainer.model(), None, meta)?);
            ctx.run.note("diverged_at_step", step);
            ctx.run.lap("train");
            ctx.run.write(&ctx.out_dir)?;
            return Err(CliError {
                code: exit::DIVERGENCE,
                message: format!(
                    "training diverged at step {step} ({reason}); last good checkpoint written to {}",
                    ctx.out_dir.join("model.ckpt").display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    ctx.run.file("model.ckpt", model_to_bytes(trainer.model(), Some(trainer.state()), meta)?);
    ctx.run.note("held_out", &last);
    ctx.run.note("final_train_loss", trainer.trace.last().map(|t| t.train_loss));
    // Label noise caps agreement with the recorded action, so the target
    // is judged against the noise-free teacher action.
    ctx.run.note("target_accuracy", cfg.train.target_accuracy);
    ctx.run.note("target_met", last.teacher_accuracy >= cfg.train.target_accuracy);
    ctx.run.lap("train");

    let model = trainer.model().clone();
    let layer = cfg.screen.hook_layer(&model);
    let source = HookSource::from_config(&cfg, layer);
    let hook = pool.install(|| source.collect_from(&model, &corpus))?;
    ctx.run.note("hook_rows", hook.len());
    ctx.run.lap("hook_corpus");
    let sae_out = pool.install(|| train_sae(&hook, &cfg.sae, cfg.seed));
    let sae_out = match sae_out {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            ctx.run.write(&ctx.out_dir)?;
            return Err(CliError {
                code: exit::DIVERGENCE,
                message: format!("{e}; model checkpoint written to {}", ctx.out_dir.join("model.ckpt").display()),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let dead = dead_features(&sae_out.sae, hook.activations.view())?;
    let sae_meta = json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "sae": cfg.sae,
        "hook": source,
        "model_params": params_digest(model.params()),
    });
    ctx.run.file("sae.ckpt", sae_to_bytes(&sae_out.sae, sae_meta)?);
    ctx.run.file("sae_trace.csv", sae_trace_csv(&sae_out));
    ctx.run.note("sae_initial", &sae_out.initial);
    ctx.run.note("sae_held_out", &sae_out.last);
    ctx.run.note("sae_dead_features", dead.len());
    ctx.run.lap("sae");
    Ok(())
}

fn trace_csv(trace: &[TracePoint]) -> Vec<u8> {
    let mut c = Csv::new(&["step", "train_loss"]);
    for t in trace {
        c.row(vec![t.step.to_string(), num(t.train_loss)]);
    }
    c.into_bytes()
}

fn evals_csv(evals: &[HeldOutEval]) -> Vec<u8> {
    let mut c = Csv::new(&["step", "loss", "action_accuracy", "teacher_accuracy"]);
    for e in evals {
        c.row(vec![e.step.to_string(), num(e.loss), num(e.action_accuracy), num(e.teacher_accuracy)]);
    }
    c.into_bytes()
}

fn sae_trace_csv(o: &SaeTrainOutcome) -> Vec<u8> {
    let mut c = Csv::new(&["step", "total", "reconstruction", "l1"]);
    for (step, l) in &o.trace {
        c.row(vec![step.to_string(), num(l.total), num(l.l2), num(l.l1)]);
    }
    c.into_bytes()
}
