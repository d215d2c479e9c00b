use std::fmt;

use serde::{Deserialize, Serialize};

/// Shape of the values a strategy may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionSpace {
    Binary,
    Choice { k: usize },
    /// Real-valued output; continuous actions (e.g. a cache TTL) are scores
    /// clamped by the policy.
    Score,
    Ranking,
}

impl fmt::Display for DecisionSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecisionSpace::Binary => f.write_str("binary"),
            DecisionSpace::Choice { k } => write!(f, "choice-of-{k}"),
            DecisionSpace::Score => f.write_str("score"),
            DecisionSpace::Ranking => f.write_str("ranking"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecisionValue {
    Boolean(bool),
    Choice(usize),
    Score(f64),
}

impl DecisionValue {
    pub fn as_f64(self) -> f64 {
        match self {
            DecisionValue::Boolean(b) => f64::from(u8::from(b)),
            DecisionValue::Choice(i) => i as f64,
            DecisionValue::Score(v) => v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untagged_json() {
        assert_eq!(serde_json::to_string(&DecisionValue::Boolean(true)).unwrap(), "true");
        assert_eq!(serde_json::to_string(&DecisionValue::Choice(2)).unwrap(), "2");
        let v: DecisionValue = serde_json::from_str("2").unwrap();
        assert_eq!(v, DecisionValue::Choice(2));
        let v: DecisionValue = serde_json::from_str("2.5").unwrap();
        assert_eq!(v, DecisionValue::Score(2.5));
        let s: DecisionSpace = serde_json::from_str(r#"{"kind":"choice","k":3}"#).unwrap();
        assert_eq!(s, DecisionSpace::Choice { k: 3 });
    }
}
