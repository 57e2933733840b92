//! Diagram question answering: statements from question/choice pairs, a
//! shared LSTM sentence encoder, max-similarity attention over verbalized
//! relations, and SGD training with a step-decay schedule.

use serde::{Deserialize, Serialize};

/// A multiple-choice question tied to one diagram. `gold` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagramQuestion {
    pub diagram: String,
    pub question: String,
    pub choices: [String; 4],
    pub gold: u8,
}
