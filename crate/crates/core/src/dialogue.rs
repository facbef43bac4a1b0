//! Consultation transcripts and the line-delimited record format shared by
//! training data, curation output and session transcripts.

use serde::{Deserialize, Serialize};

/// Character budget for dialogue history consumed by any model.
pub const HISTORY_CHAR_BUDGET: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Patient,
    Doctor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Patient => "patient",
            Role::Doctor => "doctor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn patient(text: impl Into<String>) -> Self {
        Self {
            role: Role::Patient,
            text: text.into(),
        }
    }

    pub fn doctor(text: impl Into<String>) -> Self {
        Self {
            role: Role::Doctor,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DialogueError {
    #[error("turn {index} is empty")]
    EmptyTurn { index: usize },
    #[error("turn {index} should be spoken by the {expected}")]
    Alternation { index: usize, expected: &'static str },
}

/// One record of the dialogue file: `{ "id": .., "turns": [{"role", "text"}] }`.
/// Turn indices are 1-based positions in `turns`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            id: id.into(),
            turns,
        }
    }

    /// Checks non-empty turns and strict patient-first alternation.
    pub fn validate(&self) -> Result<(), DialogueError> {
        for (i, turn) in self.turns.iter().enumerate() {
            let index = i + 1;
            if turn.text.trim().is_empty() {
                return Err(DialogueError::EmptyTurn { index });
            }
            let expected = if i % 2 == 0 { Role::Patient } else { Role::Doctor };
            if turn.role != expected {
                return Err(DialogueError::Alternation {
                    index,
                    expected: expected.as_str(),
                });
            }
        }
        Ok(())
    }

    /// Turns with index strictly below `upto_turn`.
    pub fn history(&self, upto_turn: usize) -> &[Turn] {
        let end = upto_turn.saturating_sub(1).min(self.turns.len());
        &self.turns[..end]
    }

    /// 1-based indices of doctor turns.
    pub fn doctor_turn_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::Doctor)
            .map(|(i, _)| i + 1)
    }

    /// Plain-text rendering of the history before `upto_turn`, keeping the
    /// most recent [`HISTORY_CHAR_BUDGET`] characters.
    pub fn history_text(&self, upto_turn: usize) -> String {
        let joined = self
            .history(upto_turn)
            .iter()
            .map(|t| t.text.trim())
            .collect::<Vec<_>>()
            .join("\n");
        keep_last_chars(&joined, HISTORY_CHAR_BUDGET)
    }
}

/// Keeps the trailing `n` Unicode scalars of `s`.
pub fn keep_last_chars(s: &str, n: usize) -> String {
    let count = s.chars().count();
    if count <= n {
        s.to_string()
    } else {
        s.chars().skip(count - n).collect()
    }
}

/// Keeps the leading `n` Unicode scalars of `s`.
pub fn keep_first_chars(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}
