//! Reference IPD strategies and the model-backed agent.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{play_indexed_game, Action, Agent, GameHistory, GameLengths, Seat};
use crate::lm::{PromptRenderer, TokenDistribution, TokenId, ToyLm};
use crate::rng::StreamRng;
use crate::sae::SaeModel;
use crate::steering::{steered_logits_tokens, SteeringSpec};

fn default_start() -> Action {
    Action::Cooperate
}

/// How a model agent treats probability mass outside the two action tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Sample among the two action tokens after renormalising.
    #[default]
    Renormalize,
    /// Sample from the full distribution; a non-action token is a failure.
    Strict,
}

/// Config-file form of a policy, e.g. `{ kind = "random_defector", p_defect = 0.25 }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    RandomDefector {
        p_defect: f64,
    },
    WinStayLoseChange {
        #[serde(default = "default_start")]
        start: Action,
    },
    TitForTat {
        #[serde(default = "default_start")]
        start: Action,
    },
    Always {
        action: Action,
    },
    ModelAgent {
        temperature: f64,
        #[serde(default)]
        steering: Option<SteeringSpec>,
        #[serde(default)]
        mode: AgentMode,
    },
}

impl PolicySpec {
    pub fn needs_model(&self) -> bool {
        matches!(self, PolicySpec::ModelAgent { .. })
    }
}

#[derive(Clone, Debug)]
pub struct ModelAgent {
    pub model: Arc<ToyLm>,
    pub sae: Option<Arc<SaeModel>>,
    pub temperature: f64,
    pub steering: Option<SteeringSpec>,
    pub mode: AgentMode,
}

#[derive(Clone, Debug)]
pub enum Policy {
    RandomDefector(f64),
    WinStayLoseChange(Action),
    TitForTat(Action),
    Always(Action),
    ModelAgent(ModelAgent),
}

impl Policy {
    pub fn random_defector(p_defect: f64) -> Result<Policy> {
        if !(0.0..=1.0).contains(&p_defect) {
            return Err(Error::out_of_range("p_defect", p_defect, "[0, 1]"));
        }
        Ok(Policy::RandomDefector(p_defect))
    }

    pub fn from_spec(spec: &PolicySpec, model: Option<Arc<ToyLm>>, sae: Option<Arc<SaeModel>>) -> Result<Policy> {
        Ok(match *spec {
            PolicySpec::RandomDefector { p_defect } => Policy::random_defector(p_defect)?,
            PolicySpec::WinStayLoseChange { start } => Policy::WinStayLoseChange(start),
            PolicySpec::TitForTat { start } => Policy::TitForTat(start),
            PolicySpec::Always { action } => Policy::Always(action),
            PolicySpec::ModelAgent {
                temperature,
                ref steering,
                mode,
            } => {
                if !(temperature >= 0.0) {
                    return Err(Error::out_of_range("temperature", temperature, ">= 0"));
                }
                let model = model.ok_or_else(|| Error::InvalidInput("model_agent needs a model checkpoint".into()))?;
                if steering.is_some() && sae.is_none() {
                    return Err(Error::InvalidInput("steered model_agent needs an SAE checkpoint".into()));
                }
                if let (Some(spec), Some(sae)) = (steering, &sae) {
                    spec.validate(&model, sae)?;
                }
                Policy::ModelAgent(ModelAgent {
                    model,
                    sae,
                    temperature,
                    steering: steering.clone(),
                    mode,
                })
            }
        })
    }

    /// For the rule-based policies only.
    pub fn from_spec_without_model(spec: &PolicySpec) -> Result<Policy> {
        Policy::from_spec(spec, None, None)
    }

    /// Same as [`Agent::act`]; kept as an inherent method so callers do not
    /// need the trait in scope.
    pub fn act_simple(&self, h: &GameHistory, seat: Seat, rng: &mut StreamRng) -> Result<Action> {
        self.act(h, seat, rng)
    }
}

impl Agent for Policy {
    fn act(&self, h: &GameHistory, seat: Seat, rng: &mut StreamRng) -> Result<Action> {
        let last = h.last().map(|r| r.seen_by(seat));
        Ok(match self {
            Policy::RandomDefector(p) => {
                if rng.random::<f64>() < *p {
                    Action::Defect
                } else {
                    Action::Cooperate
                }
            }
            Policy::WinStayLoseChange(start) => match last {
                None => *start,
                // a win is any round the opponent cooperated
                Some((own, Action::Cooperate)) => own,
                Some((own, Action::Defect)) => own.flipped(),
            },
            Policy::TitForTat(start) => last.map_or(*start, |(_, opp)| opp),
            Policy::Always(a) => *a,
            Policy::ModelAgent(agent) => agent.act(h, seat, rng)?,
        })
    }
}

impl ModelAgent {
    /// Prompt for `seat`, keeping only the most recent rounds that fit the
    /// context window.
    pub fn prompt(&self, h: &GameHistory, seat: Seat) -> Result<Vec<TokenId>> {
        let renderer = PromptRenderer::new(self.model.vocab(), self.model.config().context_window);
        let window = h.tail(renderer.max_rounds());
        let notes = renderer.neutral_notes()?;
        renderer.render_as(&window, seat, &notes)
    }

    fn act(&self, h: &GameHistory, seat: Seat, rng: &mut StreamRng) -> Result<Action> {
        let tokens = self.prompt(h, seat)?;
        let vocab = self.model.vocab();
        let logits = match (&self.steering, &self.sae) {
            (Some(spec), Some(sae)) => steered_logits_tokens(&self.model, sae, &tokens, spec)?,
            _ => self.model.last_logits(&tokens, None)?,
        };
        if self.temperature == 0.0 {
            let top = TokenDistribution::from_logits(logits.view(), 0.0)?.argmax();
            if self.mode == AgentMode::Strict && vocab.action_of(top).is_none() {
                return Err(Error::Policy(format!(
                    "model's top token {:?} is not an action",
                    vocab.token(top).unwrap_or("?")
                )));
            }
            let (g, b) = (logits[vocab.green().index()], logits[vocab.blue().index()]);
            return Ok(if b > g { Action::Defect } else { Action::Cooperate });
        }
        let tempered = TokenDistribution::from_logits(logits.view(), self.temperature)?;
        match self.mode {
            AgentMode::Renormalize => {
                let (g, b) = (tempered.prob(vocab.green()), tempered.prob(vocab.blue()));
                let total = g + b;
                if !(total > 0.0) {
                    return Err(Error::Policy("no probability mass on action tokens".into()));
                }
                Ok(if rng.random::<f64>() * total < b {
                    Action::Defect
                } else {
                    Action::Cooperate
                })
            }
            AgentMode::Strict => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = tempered.probs.len() - 1;
                for (i, p) in tempered.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                let id = TokenId(chosen as u32);
                vocab.action_of(id).ok_or_else(|| {
                    Error::Policy(format!("model emitted non-action token {:?}", vocab.token(id).unwrap_or("?")))
                })
            }
        }
    }
}

/// Player one's defection rate with a 95% Wilson interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectionRate {
    pub rate: f64,
    pub defections: usize,
    pub rounds: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub games: usize,
    /// Games aborted by a policy failure; their rounds are not counted.
    pub failed_games: usize,
}

const Z_95: f64 = 1.959_963_984_540_054;

pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn empirical_defection_rate(
    p1: &dyn Agent,
    p2: &dyn Agent,
    n_games: usize,
    lengths: GameLengths,
    seed: u64,
) -> Result<DefectionRate> {
    if n_games == 0 {
        return Err(Error::out_of_range("n_games", 0, ">= 1"));
    }
    let (mut defections, mut rounds, mut failed) = (0, 0, 0);
    for i in 0..n_games {
        match play_indexed_game(p1, p2, lengths, seed, i as u64) {
            Ok(h) => {
                defections += crate::game::defection_count(&h, Seat::One);
                rounds += h.len();
            }
            Err(Error::GameAborted { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let (ci_low, ci_high) = wilson_interval(defections, rounds, Z_95);
    Ok(DefectionRate {
        rate: if rounds == 0 { 0.0 } else { defections as f64 / rounds as f64 },
        defections,
        rounds,
        ci_low,
        ci_high,
        games: n_games,
        failed_games: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{play_game, Round};
    use crate::rng;
    use Action::{Cooperate as C, Defect as D};

    fn one_round(own: Action, opp: Action) -> GameHistory {
        GameHistory::from_pairs(&[(own, opp)])
    }

    #[test]
    fn wsls_rule_table() {
        let mut r = rng::stream(0, 0);
        let p = Policy::WinStayLoseChange(C);
        // (own, opp) -> next; opponent cooperating is a win
        for (own, opp, next) in [(C, C, C), (D, C, D), (C, D, D), (D, D, C)] {
            assert_eq!(p.act_simple(&one_round(own, opp), Seat::One, &mut r).unwrap(), next);
        }
        assert_eq!(p.act_simple(&GameHistory::default(), Seat::One, &mut r).unwrap(), C);
    }

    #[test]
    fn wsls_alternates_against_defector() {
        let h = play_game(&Policy::WinStayLoseChange(C), &Policy::Always(D), 4, 1).unwrap();
        let p1: Vec<_> = h.actions_of(Seat::One).collect();
        assert_eq!(p1, [C, D, C, D]);
    }

    #[test]
    fn tit_for_tat_copies_and_sees_its_own_seat() {
        let mut r = rng::stream(0, 0);
        let tft = Policy::TitForTat(C);
        let h = GameHistory::from_pairs(&[(C, D)]);
        assert_eq!(tft.act_simple(&h, Seat::One, &mut r).unwrap(), D);
        assert_eq!(tft.act_simple(&h, Seat::Two, &mut r).unwrap(), C);
        let game = play_game(&tft, &Policy::Always(C), 20, 3).unwrap();
        assert!(game.rounds().iter().all(|&r| r == Round::new(C, C)));
    }

    #[test]
    fn random_defector_extremes() {
        let never = empirical_defection_rate(&Policy::RandomDefector(0.0), &Policy::Always(C), 20, GameLengths::fixed(10), 4).unwrap();
        let always = empirical_defection_rate(&Policy::RandomDefector(1.0), &Policy::Always(C), 20, GameLengths::fixed(10), 4).unwrap();
        assert_eq!(never.rate, 0.0);
        assert_eq!(always.rate, 1.0);
        assert!(Policy::random_defector(1.5).is_err());
    }

    #[test]
    fn random_defector_rate_within_binomial_bound() {
        let r = empirical_defection_rate(&Policy::RandomDefector(0.3), &Policy::Always(C), 100, GameLengths::fixed(100), 21).unwrap();
        assert_eq!(r.rounds, 10_000);
        let sigma = (0.3f64 * 0.7 / 10_000.0).sqrt();
        assert!((r.rate - 0.3).abs() <= 3.0 * sigma, "rate {}", r.rate);
        assert!(r.ci_low < 0.3 && 0.3 < r.ci_high);
    }

    #[test]
    fn wsls_against_defector_even_rounds_is_half() {
        for n in [2, 4, 10, 50] {
            let r = empirical_defection_rate(&Policy::WinStayLoseChange(C), &Policy::Always(D), 5, GameLengths::fixed(n), 0).unwrap();
            assert_eq!(r.rate, 0.5);
        }
    }

    #[test]
    fn spec_parses_from_json() {
        let s: PolicySpec = serde_json::from_str(r#"{"kind":"random_defector","p_defect":0.25}"#).unwrap();
        assert_eq!(s, PolicySpec::RandomDefector { p_defect: 0.25 });
        let s: PolicySpec = serde_json::from_str(r#"{"kind":"tit_for_tat"}"#).unwrap();
        assert_eq!(s, PolicySpec::TitForTat { start: C });
        assert!(serde_json::from_str::<PolicySpec>(r#"{"kind":"always","action":"defect","x":1}"#).is_err());
        assert!(Policy::from_spec_without_model(&PolicySpec::ModelAgent {
            temperature: 0.1,
            steering: None,
            mode: AgentMode::Renormalize
        })
        .is_err());
    }

    #[test]
    fn wilson_matches_known_value() {
        // 5 of 10 at z = 1.96: centre 0.5, half-width 0.2775...
        let (lo, hi) = wilson_interval(5, 10, 1.96);
        assert!((lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5);
    }
}
