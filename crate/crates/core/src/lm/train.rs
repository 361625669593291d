//! Minibatch training of [`ToyLm`] on a transcript corpus.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Transcript, TranscriptCorpus};
use super::model::{ModelConfig, ToyLm};
use crate::error::{Error, Result};
use crate::rng;

const BATCH_SALT: u64 = 0xB47C;
const INIT_SALT: u64 = 0x1A17;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub held_out_fraction: f64,
    /// Held-out sequences used for each evaluation (a fixed prefix of the
    /// held-out split).
    pub eval_sequences: usize,
    pub eval_every: usize,
    pub init_std: f64,
    pub target_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 12,
            learning_rate: 3e-3,
            optimizer: Optimizer::default(),
            clip_norm: 1.0,
            held_out_fraction: 0.1,
            eval_sequences: 200,
            eval_every: 100,
            init_std: 0.05,
            target_accuracy: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidInput("batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::out_of_range("learning_rate", self.learning_rate, "> 0"));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::out_of_range("held_out_fraction", self.held_out_fraction, "[0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutEval {
    pub step: usize,
    pub loss: f64,
    /// Fraction of final action slots whose argmax token is the recorded action.
    pub action_accuracy: f64,
    /// Same, against the teacher's noise-free action.
    pub teacher_accuracy: f64,
}

/// Optimiser state that travels with a checkpoint so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Trainer<'c> {
    train: &'c [Transcript],
    held_out: &'c [Transcript],
    cfg: TrainConfig,
    seed: u64,
    model: ToyLm,
    state: OptimizerState,
    last_good: Vec<f64>,
    pub trace: Vec<TracePoint>,
    pub evals: Vec<HeldOutEval>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyLm,
    pub trace: Vec<TracePoint>,
    pub evals: Vec<HeldOutEval>,
    pub initial: HeldOutEval,
    pub last: HeldOutEval,
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c TranscriptCorpus, model_cfg: ModelConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        let vocab = crate::lm::Vocabulary::game();
        let model = ToyLm::initialized(model_cfg, vocab, cfg.init_std, rng::derive_seed(seed, INIT_SALT))?;
        let n = model.n_params();
        Self::resume(
            corpus,
            model,
            OptimizerState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            cfg,
            seed,
        )
    }

    pub fn resume(corpus: &'c TranscriptCorpus, model: ToyLm, state: OptimizerState, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidInput("training corpus is empty".into()));
        }
        if state.m.len() != model.n_params() || state.v.len() != model.n_params() {
            return Err(Error::DimensionMismatch {
                context: "optimizer state",
                expected: model.n_params(),
                got: state.m.len(),
            });
        }
        let (train, held_out) = corpus.split(cfg.held_out_fraction);
        let held_out = &held_out[..held_out.len().min(cfg.eval_sequences)];
        let last_good = model.params().to_vec();
        Ok(Trainer {
            train,
            held_out,
            cfg,
            seed,
            model,
            state,
            last_good,
            trace: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn model(&self) -> &ToyLm {
        &self.model
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    pub fn into_parts(self) -> (ToyLm, OptimizerState) {
        (self.model, self.state)
    }

    fn batch(&self, step: usize) -> Vec<usize> {
        let mut rng = rng::stream(rng::derive_seed(self.seed, BATCH_SALT), step as u64);
        (0..self.cfg.batch_size).map(|_| rng.random_range(0..self.train.len())).collect()
    }

    /// Mean loss and gradient over a set of sequences. Per-sequence
    /// gradients are summed in index order regardless of thread count.
    pub fn batch_gradient(model: &ToyLm, seqs: &[&Transcript]) -> Result<(f64, Vec<f64>)> {
        let parts = seqs
            .par_iter()
            .map(|s| {
                let mut g = vec![0.0; model.n_params()];
                let (loss, count) = model.accumulate_gradient(&s.tokens, &s.loss_weight, &mut g)?;
                Ok((loss, count, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; model.n_params()];
        let mut loss = 0.0;
        let mut count = 0usize;
        for (l, c, g) in &parts {
            loss += l;
            count += c;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let inv = 1.0 / count.max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss * inv, grad))
    }

    /// One optimiser step. On a non-finite loss the parameters roll back to
    /// the last evaluated state and a divergence error is returned.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step;
        let idx = self.batch(step);
        let seqs: Vec<&Transcript> = idx.iter().map(|&i| &self.train[i]).collect();
        let (loss, mut grad) = Self::batch_gradient(&self.model, &seqs)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            self.model.params_mut().copy_from_slice(&self.last_good);
            return Err(Error::Divergence {
                step,
                reason: format!("loss {loss}"),
            });
        }
        if self.cfg.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                let s = self.cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = self.cfg.learning_rate;
        let params = self.model.params_mut();
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(&grad).zip(&mut self.state.m).zip(&mut self.state.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        self.state.step += 1;
        self.trace.push(TracePoint { step, train_loss: loss });
        Ok(loss)
    }

    pub fn evaluate(&mut self) -> Result<HeldOutEval> {
        let eval = evaluate_held_out(&self.model, self.held_out, self.state.step)?;
        if eval.loss.is_finite() {
            self.last_good.copy_from_slice(self.model.params());
        }
        self.evals.push(eval.clone());
        Ok(eval)
    }

    /// Runs until `total_steps` optimiser steps have been taken in total.
    pub fn run_until(&mut self, total_steps: usize) -> Result<()> {
        while self.state.step < total_steps {
            self.step()?;
            if self.state.step % self.cfg.eval_every == 0 {
                self.evaluate()?;
            }
        }
        Ok(())
    }
}

/// Held-out loss over trained positions and action-slot accuracy.
pub fn evaluate_held_out(model: &ToyLm, held_out: &[Transcript], step: usize) -> Result<HeldOutEval> {
    let per_seq = held_out
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.tokens[..s.tokens.len() - 1])?;
            let mut loss = 0.0;
            let mut count = 0;
            for (t, row) in out.logits.rows().into_iter().enumerate() {
                if !s.loss_weight[t] {
                    continue;
                }
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[s.tokens[t + 1].index()];
                count += 1;
            }
            let last = out.logits.row(s.action_position());
            let mut best = 0;
            for i in 1..last.len() {
                if last[i] > last[best] {
                    best = i;
                }
            }
            let predicted = best as u32;
            let hit = predicted == model.vocab().action_token(s.final_action).0;
            let teacher_hit = predicted == model.vocab().action_token(s.teacher_action).0;
            Ok((loss, count, hit, teacher_hit))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, mut count, mut hits, mut teacher_hits) = (0.0, 0usize, 0usize, 0usize);
    for (l, c, h, th) in per_seq {
        loss += l;
        count += c;
        hits += h as usize;
        teacher_hits += th as usize;
    }
    let n = held_out.len().max(1) as f64;
    Ok(HeldOutEval {
        step,
        loss: loss / count.max(1) as f64,
        action_accuracy: hits as f64 / n,
        teacher_accuracy: teacher_hits as f64 / n,
    })
}

/// Trains from a fresh initialisation for `cfg.steps` steps.
pub fn train_toy_lm(corpus: &TranscriptCorpus, model_cfg: ModelConfig, cfg: TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let steps = cfg.steps;
    let mut trainer = Trainer::new(corpus, model_cfg, cfg, seed)?;
    let initial = trainer.evaluate()?;
    trainer.run_until(steps)?;
    let last = if trainer.evals.last().map(|e| e.step) == Some(steps) {
        trainer.evals.last().cloned().expect("non-empty")
    } else {
        trainer.evaluate()?
    };
    Ok(TrainOutcome {
        trace: trainer.trace.clone(),
        evals: trainer.evals.clone(),
        model: trainer.model,
        initial,
        last,
    })
}
