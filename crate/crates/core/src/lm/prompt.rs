//! Word-level rendering of the game prompt.
//!
//! ```text
//! <bos> you are N N N N . green green 5 5 . blue green 7 0 . blue blue 3 3 .
//! green blue 0 7 . history :
//! round 1 your choice : green partner's choice : blue
//! ...
//! round k your choice :
//! ```
//!
//! The four `N` slots hold persona notes. A rendered prompt always stops
//! right before the next action token.

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, AGGRESSIVE_MARKERS, COOPERATIVE_MARKERS, MAX_NUMBER_TOKEN};
use crate::error::{Error, Result};
use crate::game::{Action, GameHistory, PayoffMatrix, Seat};

pub const NOTE_SLOTS: usize = 4;
pub const PREAMBLE_LEN: usize = 8 + 4 * 5 + 2;
pub const ROUND_BLOCK_LEN: usize = 10;
/// Offset of the player's own action inside a round block.
pub const OWN_ACTION_OFFSET: usize = 5;
/// Offset of the partner's action inside a round block.
pub const PARTNER_ACTION_OFFSET: usize = 9;
/// `round k your choice :`
pub const FINAL_SLOT_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    Cooperative,
    Aggressive,
}

impl Persona {
    pub fn markers(self) -> &'static [&'static str; 4] {
        match self {
            Persona::Cooperative => &COOPERATIVE_MARKERS,
            Persona::Aggressive => &AGGRESSIVE_MARKERS,
        }
    }

    pub fn opposite(self) -> Persona {
        match self {
            Persona::Cooperative => Persona::Aggressive,
            Persona::Aggressive => Persona::Cooperative,
        }
    }
}

/// Balanced notes (two markers of each persona) used for every prompt that
/// is not part of the training corpus.
pub const NEUTRAL_NOTES: [&str; NOTE_SLOTS] = ["kind", "greedy", "fair", "ruthless"];

#[derive(Clone, Copy, Debug)]
pub struct PromptRenderer<'v> {
    vocab: &'v Vocabulary,
    context_window: usize,
}

impl<'v> PromptRenderer<'v> {
    pub fn new(vocab: &'v Vocabulary, context_window: usize) -> Self {
        PromptRenderer {
            vocab,
            context_window,
        }
    }

    pub fn vocab(&self) -> &'v Vocabulary {
        self.vocab
    }

    pub fn neutral_notes(&self) -> Result<Vec<TokenId>> {
        NEUTRAL_NOTES.iter().map(|t| self.vocab.expect(t)).collect()
    }

    /// Longest history that still fits, limited by both the context window
    /// and the largest round-number token.
    pub fn max_rounds(&self) -> usize {
        let by_window = self
            .context_window
            .saturating_sub(PREAMBLE_LEN + FINAL_SLOT_LEN)
            / ROUND_BLOCK_LEN;
        by_window.min(MAX_NUMBER_TOKEN - 1)
    }

    /// Prompt for player one with the neutral notes.
    pub fn render(&self, h: &GameHistory) -> Result<Vec<TokenId>> {
        let notes = self.neutral_notes()?;
        self.render_as(h, Seat::One, &notes)
    }

    pub fn render_as(&self, h: &GameHistory, seat: Seat, notes: &[TokenId]) -> Result<Vec<TokenId>> {
        let needed = PREAMBLE_LEN + h.len() * ROUND_BLOCK_LEN + FINAL_SLOT_LEN;
        if needed > self.context_window || h.len() > self.max_rounds() {
            return Err(Error::ContextOverflow {
                needed,
                window: self.context_window,
            });
        }
        let mut out = Vec::with_capacity(needed + 1);
        self.push_preamble(&mut out, notes, h.matrix())?;
        for (i, round) in h.rounds().iter().enumerate() {
            let (own, opp) = round.seen_by(seat);
            self.push_round(&mut out, i + 1, own, opp)?;
        }
        self.push_final_slot(&mut out, h.len() + 1)?;
        debug_assert_eq!(out.len(), needed);
        Ok(out)
    }

    fn push_preamble(&self, out: &mut Vec<TokenId>, notes: &[TokenId], m: &PayoffMatrix) -> Result<()> {
        if notes.len() != NOTE_SLOTS {
            return Err(Error::DimensionMismatch {
                context: "persona notes",
                expected: NOTE_SLOTS,
                got: notes.len(),
            });
        }
        let v = self.vocab;
        out.extend([v.expect("<bos>")?, v.expect("you")?, v.expect("are")?]);
        out.extend_from_slice(notes);
        let dot = v.expect(".")?;
        out.push(dot);
        for (own, opp) in [
            (Action::Cooperate, Action::Cooperate),
            (Action::Defect, Action::Cooperate),
            (Action::Defect, Action::Defect),
            (Action::Cooperate, Action::Defect),
        ] {
            let (a, b) = m.payoff(own, opp);
            out.extend([
                v.action_token(own),
                v.action_token(opp),
                self.dollars(a)?,
                self.dollars(b)?,
                dot,
            ]);
        }
        out.extend([v.expect("history")?, v.expect(":")?]);
        Ok(())
    }

    fn dollars(&self, cents: i64) -> Result<TokenId> {
        if cents < 0 || cents % 100 != 0 {
            return Err(Error::InvalidInput(format!(
                "payoff {cents} cents has no number token"
            )));
        }
        self.vocab
            .number((cents / 100) as usize)
            .ok_or_else(|| Error::InvalidInput(format!("payoff {cents} cents has no number token")))
    }

    fn push_round(&self, out: &mut Vec<TokenId>, number: usize, own: Action, opp: Action) -> Result<()> {
        let v = self.vocab;
        self.push_final_slot(out, number)?;
        out.extend([
            v.action_token(own),
            v.expect("partner's")?,
            v.expect("choice")?,
            v.expect(":")?,
            v.action_token(opp),
        ]);
        Ok(())
    }

    fn push_final_slot(&self, out: &mut Vec<TokenId>, number: usize) -> Result<()> {
        let v = self.vocab;
        let n = v
            .number(number)
            .ok_or_else(|| Error::out_of_range("round number", number, format!("<= {MAX_NUMBER_TOKEN}")))?;
        out.extend([v.expect("round")?, n, v.expect("your")?, v.expect("choice")?, v.expect(":")?]);
        Ok(())
    }
}

/// Neutral-notes prompt for player one.
pub fn render_prompt(vocab: &Vocabulary, h: &GameHistory, context_window: usize) -> Result<Vec<TokenId>> {
    PromptRenderer::new(vocab, context_window).render(h)
}
