//! The iterated prisoner's dilemma: actions, payoffs, histories and the
//! simultaneous-move round loop.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Longest history [`enumerate_histories`] will produce (4^8 = 65 536 entries).
pub const MAX_ENUMERATED_ROUNDS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Cooperate,
    Defect,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Cooperate, Action::Defect];

    /// The answer token that stands for this action in prompts.
    pub fn token_label(self) -> &'static str {
        match self {
            Action::Cooperate => "green",
            Action::Defect => "blue",
        }
    }

    pub fn from_token_label(label: &str) -> Option<Action> {
        match label {
            "green" => Some(Action::Cooperate),
            "blue" => Some(Action::Defect),
            _ => None,
        }
    }

    pub fn flipped(self) -> Action {
        match self {
            Action::Cooperate => Action::Defect,
            Action::Defect => Action::Cooperate,
        }
    }

    pub fn is_defect(self) -> bool {
        self == Action::Defect
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Cooperate => "C",
            Action::Defect => "D",
        })
    }
}

/// Which side of the table a player sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Seat {
    One,
    Two,
}

impl Seat {
    pub fn other(self) -> Seat {
        match self {
            Seat::One => Seat::Two,
            Seat::Two => Seat::One,
        }
    }
}

/// Money in integer cents.
pub type Cents = i64;

/// Payoffs in cents, indexed by (player 1 action, player 2 action).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    cc: (Cents, Cents),
    cd: (Cents, Cents),
    dc: (Cents, Cents),
    dd: (Cents, Cents),
}

impl Default for PayoffMatrix {
    fn default() -> Self {
        PayoffMatrix {
            cc: (500, 500),
            cd: (0, 700),
            dc: (700, 0),
            dd: (300, 300),
        }
    }
}

impl PayoffMatrix {
    /// Builds a matrix from the four ordered joint outcomes. Asymmetric games
    /// are rejected.
    pub fn new(
        cc: (Cents, Cents),
        cd: (Cents, Cents),
        dc: (Cents, Cents),
        dd: (Cents, Cents),
    ) -> Result<Self> {
        let m = PayoffMatrix { cc, cd, dc, dd };
        for a in Action::ALL {
            for b in Action::ALL {
                if m.payoff(a, b).0 != m.payoff(b, a).1 {
                    return Err(Error::InvalidInput(format!(
                        "payoff matrix is not symmetric at ({a}, {b})"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn payoff(&self, a1: Action, a2: Action) -> (Cents, Cents) {
        match (a1, a2) {
            (Action::Cooperate, Action::Cooperate) => self.cc,
            (Action::Cooperate, Action::Defect) => self.cd,
            (Action::Defect, Action::Cooperate) => self.dc,
            (Action::Defect, Action::Defect) => self.dd,
        }
    }
}

/// Free-function form of [`PayoffMatrix::payoff`].
pub fn payoff(a1: Action, a2: Action, m: &PayoffMatrix) -> (Cents, Cents) {
    m.payoff(a1, a2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Round {
    pub p1: Action,
    pub p2: Action,
}

impl Round {
    pub fn new(p1: Action, p2: Action) -> Self {
        Round { p1, p2 }
    }

    /// `(own, opponent)` from the point of view of `seat`.
    pub fn seen_by(self, seat: Seat) -> (Action, Action) {
        match seat {
            Seat::One => (self.p1, self.p2),
            Seat::Two => (self.p2, self.p1),
        }
    }
}

/// Append-only record of a game.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameHistory {
    matrix: PayoffMatrix,
    rounds: Vec<Round>,
    scores: (Cents, Cents),
}

impl Default for GameHistory {
    fn default() -> Self {
        GameHistory::new(PayoffMatrix::default())
    }
}

impl GameHistory {
    pub fn new(matrix: PayoffMatrix) -> Self {
        GameHistory {
            matrix,
            rounds: Vec::new(),
            scores: (0, 0),
        }
    }

    pub fn from_rounds(matrix: PayoffMatrix, rounds: impl IntoIterator<Item = Round>) -> Self {
        let mut h = GameHistory::new(matrix);
        for r in rounds {
            h.push(r);
        }
        h
    }

    /// Shorthand for a default-matrix history from `(p1, p2)` pairs.
    pub fn from_pairs(pairs: &[(Action, Action)]) -> Self {
        GameHistory::from_rounds(
            PayoffMatrix::default(),
            pairs.iter().map(|&(a, b)| Round::new(a, b)),
        )
    }

    pub fn push(&mut self, round: Round) {
        let (s1, s2) = self.matrix.payoff(round.p1, round.p2);
        self.scores.0 += s1;
        self.scores.1 += s2;
        self.rounds.push(round);
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn last(&self) -> Option<Round> {
        self.rounds.last().copied()
    }

    pub fn matrix(&self) -> &PayoffMatrix {
        &self.matrix
    }

    /// Running totals maintained as rounds are appended.
    pub fn scores(&self) -> (Cents, Cents) {
        self.scores
    }

    /// Totals recomputed from the rounds.
    pub fn recompute_scores(&self) -> (Cents, Cents) {
        self.rounds.iter().fold((0, 0), |acc, r| {
            let (a, b) = self.matrix.payoff(r.p1, r.p2);
            (acc.0 + a, acc.1 + b)
        })
    }

    pub fn score_of(&self, seat: Seat) -> Cents {
        match seat {
            Seat::One => self.scores.0,
            Seat::Two => self.scores.1,
        }
    }

    pub fn actions_of(&self, seat: Seat) -> impl Iterator<Item = Action> + '_ {
        self.rounds.iter().map(move |r| r.seen_by(seat).0)
    }

    /// History truncated to its last `n` rounds (scores recomputed).
    pub fn tail(&self, n: usize) -> GameHistory {
        let start = self.rounds.len().saturating_sub(n);
        GameHistory::from_rounds(self.matrix, self.rounds[start..].iter().copied())
    }
}

pub fn defection_count(h: &GameHistory, seat: Seat) -> usize {
    h.actions_of(seat).filter(|a| a.is_defect()).count()
}

/// Anything that can choose a move given the shared history.
pub trait Agent: Sync {
    fn act(&self, history: &GameHistory, seat: Seat, rng: &mut StreamRng) -> Result<Action>;
}

/// Plays `n_rounds` simultaneous-move rounds. Both agents are queried
/// against the same history before the round is appended.
pub fn play_game_with_rng(
    p1: &dyn Agent,
    p2: &dyn Agent,
    n_rounds: usize,
    matrix: PayoffMatrix,
    rng: &mut StreamRng,
) -> Result<GameHistory> {
    if n_rounds == 0 {
        return Err(Error::out_of_range("n_rounds", 0, ">= 1"));
    }
    let mut history = GameHistory::new(matrix);
    for _ in 0..n_rounds {
        let a1 = p1.act(&history, Seat::One, rng);
        let a2 = p2.act(&history, Seat::Two, rng);
        match (a1, a2) {
            (Ok(a1), Ok(a2)) => history.push(Round::new(a1, a2)),
            (Err(e), _) | (_, Err(e)) => {
                return Err(Error::GameAborted {
                    partial: Box::new(history),
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(history)
}

/// Plays one game on the stream `(seed, 0)`.
pub fn play_game(p1: &dyn Agent, p2: &dyn Agent, n_rounds: usize, seed: u64) -> Result<GameHistory> {
    let mut rng = rng::stream(seed, 0);
    play_game_with_rng(p1, p2, n_rounds, PayoffMatrix::default(), &mut rng)
}

/// Inclusive range of game lengths; each game draws its length uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameLengths {
    pub min: usize,
    pub max: usize,
}

impl GameLengths {
    pub fn fixed(n: usize) -> Self {
        GameLengths { min: n, max: n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::InvalidInput(format!(
                "game lengths must satisfy 1 <= min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut StreamRng) -> usize {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Game `index` of a batch seeded by `master`: the length is drawn first,
/// then the rounds are played on the same private stream.
pub fn play_indexed_game(
    p1: &dyn Agent,
    p2: &dyn Agent,
    lengths: GameLengths,
    master: u64,
    index: u64,
) -> Result<GameHistory> {
    lengths.validate()?;
    let mut rng = rng::stream(master, index);
    let n = lengths.draw(&mut rng);
    play_game_with_rng(p1, p2, n, PayoffMatrix::default(), &mut rng)
}

/// All `4^n_rounds` joint histories in lexicographic order: earlier rounds
/// are more significant, player 1 before player 2, Cooperate before Defect.
pub fn enumerate_histories(n_rounds: usize) -> Result<Vec<GameHistory>> {
    if n_rounds == 0 || n_rounds > MAX_ENUMERATED_ROUNDS {
        return Err(Error::out_of_range(
            "n_rounds",
            n_rounds,
            format!("1..={MAX_ENUMERATED_ROUNDS}"),
        ));
    }
    let total = 1usize << (2 * n_rounds);
    Ok((0..total).map(|i| history_at_index(i, n_rounds)).collect())
}

/// Inverse of the enumeration order, used for canonical grid indexing.
pub fn history_at_index(index: usize, n_rounds: usize) -> GameHistory {
    let action = |bit: usize| if bit == 0 { Action::Cooperate } else { Action::Defect };
    let rounds = (0..n_rounds).map(|r| {
        let digit = (index >> (2 * (n_rounds - 1 - r))) & 0b11;
        Round::new(action(digit >> 1), action(digit & 1))
    });
    GameHistory::from_rounds(PayoffMatrix::default(), rounds)
}
