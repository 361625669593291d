//! Synthetic game transcripts with a planted persona.
//!
//! Each transcript is a prompt whose four note slots are drawn mostly from
//! its persona's marker pool, followed by a random prior history and the
//! persona teacher's action for the next round. The prior history is noise
//! from the teacher's point of view: both players' past moves come from
//! random defectors, so the notes are the only evidence of the persona.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{Persona, PromptRenderer, NOTE_SLOTS, OWN_ACTION_OFFSET, PREAMBLE_LEN, ROUND_BLOCK_LEN};
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::game::{Action, GameHistory, PayoffMatrix, Round, Seat};
use crate::rng;
use crate::strategies::{Policy, PolicySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    /// Probabilities of the (cooperative, aggressive) personas.
    pub persona_mix: [f64; 2],
    pub cooperative_teacher: PolicySpec,
    pub aggressive_teacher: PolicySpec,
    /// Probability that the final action is flipped.
    pub noise: f64,
    /// Probability that a note slot is drawn from the persona's own pool.
    pub note_fidelity: f64,
    pub max_prior_rounds: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_sequences: 6000,
            persona_mix: [0.5, 0.5],
            cooperative_teacher: PolicySpec::Always {
                action: Action::Cooperate,
            },
            aggressive_teacher: PolicySpec::Always { action: Action::Defect },
            noise: 0.1,
            note_fidelity: 0.85,
            max_prior_rounds: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.persona_mix;
        if a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "persona_mix must be non-negative and sum to 1, got [{a}, {b}]"
            )));
        }
        for (name, p) in [("noise", self.noise), ("note_fidelity", self.note_fidelity)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::out_of_range(name, p, "[0, 1]"));
            }
        }
        if self.n_sequences == 0 {
            return Err(Error::InvalidInput("n_sequences must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub tokens: Vec<TokenId>,
    /// `loss_weight[t]` says whether predicting `tokens[t + 1]` is trained.
    /// The player's own past moves are random filler and are excluded.
    pub loss_weight: Vec<bool>,
    pub persona: Persona,
    pub notes: Vec<TokenId>,
    pub history: GameHistory,
    pub teacher_action: Action,
    pub final_action: Action,
}

impl Transcript {
    /// Index of the position whose next-token prediction is the final action.
    pub fn action_position(&self) -> usize {
        self.tokens.len() - 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptCorpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub sequences: Vec<Transcript>,
}

impl TranscriptCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// `(train, held_out)`; the held-out part is the tail of the corpus.
    pub fn split(&self, held_out_fraction: f64) -> (&[Transcript], &[Transcript]) {
        let n = self.sequences.len();
        let held = ((n as f64) * held_out_fraction).round() as usize;
        let held = held.min(n.saturating_sub(1));
        self.sequences.split_at(n - held)
    }

    pub fn persona_counts(&self) -> (usize, usize) {
        let coop = self.sequences.iter().filter(|s| s.persona == Persona::Cooperative).count();
        (coop, self.sequences.len() - coop)
    }
}

pub fn generate_corpus(cfg: &CorpusConfig, vocab: &Vocabulary, context_window: usize, seed: u64) -> Result<TranscriptCorpus> {
    cfg.validate()?;
    let teachers = [
        Policy::from_spec_without_model(&cfg.cooperative_teacher)?,
        Policy::from_spec_without_model(&cfg.aggressive_teacher)?,
    ];
    let renderer = PromptRenderer::new(vocab, context_window);
    let max_prior = cfg.max_prior_rounds.min(renderer.max_rounds());
    let pools: [Vec<TokenId>; 2] = [Persona::Cooperative, Persona::Aggressive].map(|p| {
        p.markers()
            .iter()
            .map(|m| vocab.expect(m))
            .collect::<Result<Vec<_>>>()
            .expect("markers are in the game vocabulary")
    });
    let sequences = (0..cfg.n_sequences)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let persona = if rng.random::<f64>() < cfg.persona_mix[0] {
                Persona::Cooperative
            } else {
                Persona::Aggressive
            };
            let (own_pool, other_pool) = match persona {
                Persona::Cooperative => (&pools[0], &pools[1]),
                Persona::Aggressive => (&pools[1], &pools[0]),
            };
            let notes: Vec<TokenId> = (0..NOTE_SLOTS)
                .map(|_| {
                    let pool = if rng.random::<f64>() < cfg.note_fidelity { own_pool } else { other_pool };
                    pool[rng.random_range(0..pool.len())]
                })
                .collect();
            let n_prior = rng.random_range(0..=max_prior);
            let p_own: f64 = rng.random();
            let p_partner: f64 = rng.random();
            let mut history = GameHistory::new(PayoffMatrix::default());
            for _ in 0..n_prior {
                let own = if rng.random::<f64>() < p_own { Action::Defect } else { Action::Cooperate };
                let partner = if rng.random::<f64>() < p_partner { Action::Defect } else { Action::Cooperate };
                history.push(Round::new(own, partner));
            }
            let teacher = &teachers[persona as usize];
            let teacher_action = teacher.act_simple(&history, Seat::One, &mut rng)?;
            let final_action = if rng.random::<f64>() < cfg.noise {
                teacher_action.flipped()
            } else {
                teacher_action
            };
            let mut tokens = renderer.render_as(&history, Seat::One, &notes)?;
            tokens.push(vocab.action_token(final_action));
            let mut loss_weight = vec![true; tokens.len() - 1];
            for r in 0..n_prior {
                let target = PREAMBLE_LEN + r * ROUND_BLOCK_LEN + OWN_ACTION_OFFSET;
                loss_weight[target - 1] = false;
            }
            Ok(Transcript {
                tokens,
                loss_weight,
                persona,
                notes,
                history,
                teacher_action,
                final_action,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TranscriptCorpus {
        config: cfg.clone(),
        seed,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, noise: f64) -> CorpusConfig {
        CorpusConfig {
            n_sequences: n,
            noise,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn cooperative_persona_without_noise_ends_green() {
        let v = Vocabulary::game();
        let cfg = CorpusConfig {
            persona_mix: [1.0, 0.0],
            cooperative_teacher: PolicySpec::TitForTat { start: Action::Cooperate },
            ..small(200, 0.0)
        };
        let c = generate_corpus(&cfg, &v, 256, 5).unwrap();
        for s in &c.sequences {
            assert_eq!(s.persona, Persona::Cooperative);
            let partner_all_cooperate = s.history.rounds().iter().all(|r| r.p2 == Action::Cooperate);
            if partner_all_cooperate {
                assert_eq!(*s.tokens.last().unwrap(), v.green());
            }
        }
    }

    #[test]
    fn persona_counts_are_binomial() {
        let v = Vocabulary::game();
        let c = generate_corpus(&small(10_000, 0.1), &v, 256, 9).unwrap();
        let (coop, _) = c.persona_counts();
        let sigma = (10_000.0f64 * 0.25).sqrt();
        assert!((coop as f64 - 5000.0).abs() <= 3.0 * sigma, "coop = {coop}");
    }

    #[test]
    fn same_seed_same_corpus() {
        let v = Vocabulary::game();
        let a = generate_corpus(&small(50, 0.1), &v, 256, 3).unwrap();
        let b = generate_corpus(&small(50, 0.1), &v, 256, 3).unwrap();
        let c = generate_corpus(&small(50, 0.1), &v, 256, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn transcripts_are_valid_renders() {
        let v = Vocabulary::game();
        let c = generate_corpus(&small(100, 0.0), &v, 256, 1).unwrap();
        let r = PromptRenderer::new(&v, 256);
        for s in &c.sequences {
            let prompt = r.render_as(&s.history, Seat::One, &s.notes).unwrap();
            assert_eq!(&s.tokens[..prompt.len()], &prompt[..]);
            assert_eq!(s.tokens.len(), prompt.len() + 1);
            assert_eq!(s.final_action, s.teacher_action);
            let masked: Vec<usize> = (0..s.loss_weight.len()).filter(|&t| !s.loss_weight[t]).collect();
            assert_eq!(masked.len(), s.history.len());
            for t in masked {
                assert!(v.action_of(s.tokens[t + 1]).is_some());
            }
        }
    }

    #[test]
    fn bad_mix_rejected() {
        let v = Vocabulary::game();
        let cfg = CorpusConfig {
            persona_mix: [0.7, 0.7],
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&cfg, &v, 256, 0).is_err());
    }
}
