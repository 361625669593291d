use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Action;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const COOPERATIVE_MARKERS: [&str; 4] = ["kind", "fair", "honest", "loyal"];
pub const AGGRESSIVE_MARKERS: [&str; 4] = ["greedy", "ruthless", "cunning", "hostile"];

/// Template words other than numbers and persona markers.
const TEMPLATE_WORDS: [&str; 12] = [
    "<bos>", "you", "are", ".", "green", "blue", "history", ":", "round", "your", "choice",
    "partner's",
];

/// Number tokens run from "0" up to this value.
pub const MAX_NUMBER_TOKEN: usize = 23;

/// Closed word-level vocabulary. Ids are dense and the string mapping is a
/// bijection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    green: TokenId,
    blue: TokenId,
}

impl Vocabulary {
    /// The game vocabulary used by every prompt in this crate.
    pub fn game() -> Self {
        let mut tokens: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=MAX_NUMBER_TOKEN).map(|n| n.to_string()));
        tokens.extend(COOPERATIVE_MARKERS.iter().map(|s| s.to_string()));
        tokens.extend(AGGRESSIVE_MARKERS.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks {s:?}")))
        };
        let green = find(Action::Cooperate.token_label())?;
        let blue = find(Action::Defect.token_label())?;
        Ok(Vocabulary {
            tokens,
            index,
            green,
            blue,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a word the template relies on.
    pub fn expect(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks {token:?}")))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.tokens.len()
    }

    pub fn green(&self) -> TokenId {
        self.green
    }

    pub fn blue(&self) -> TokenId {
        self.blue
    }

    pub fn action_token(&self, a: Action) -> TokenId {
        match a {
            Action::Cooperate => self.green,
            Action::Defect => self.blue,
        }
    }

    pub fn action_of(&self, id: TokenId) -> Option<Action> {
        if id == self.green {
            Some(Action::Cooperate)
        } else if id == self.blue {
            Some(Action::Defect)
        } else {
            None
        }
    }

    pub fn is_persona_marker(&self, id: TokenId) -> bool {
        self.token(id).is_some_and(|t| {
            COOPERATIVE_MARKERS.contains(&t) || AGGRESSIVE_MARKERS.contains(&t)
        })
    }

    pub fn number(&self, n: usize) -> Option<TokenId> {
        if n > MAX_NUMBER_TOKEN {
            return None;
        }
        self.id(&n.to_string())
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
