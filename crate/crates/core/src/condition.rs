//! Unlock conditions evaluated against the world state.
//!
//! A condition is a `{key, comparator, value}` triple. Missing keys compare
//! as `0`, so a fresh install reads as "no interactions yet".

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::world::{WorldState, WorldValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "==",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }

    pub fn apply(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Gt => lhs > rhs,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub key: String,
    #[serde(alias = "cmp")]
    pub comparator: Comparator,
    pub value: f64,
}

impl Condition {
    pub fn new(key: impl Into<String>, comparator: Comparator, value: f64) -> Self {
        Self {
            key: key.into(),
            comparator,
            value,
        }
    }

    /// Evaluate and collapse evaluation errors to "not met".
    pub fn is_met(&self, state: &WorldState) -> bool {
        evaluate_condition(self, state).unwrap_or(false)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.key, self.comparator, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConditionError {
    #[error("world-state key `{key}` holds a non-numeric value {value:?}")]
    NotNumeric { key: String, value: String },
}

pub fn evaluate_condition(
    condition: &Condition,
    state: &WorldState,
) -> Result<bool, ConditionError> {
    let lhs = match state.get(&condition.key) {
        None => 0.0,
        Some(WorldValue::Number(n)) => *n,
        Some(WorldValue::Text(s)) => {
            return Err(ConditionError::NotNumeric {
                key: condition.key.clone(),
                value: s.clone(),
            })
        }
    };
    Ok(condition.comparator.apply(lhs, condition.value))
}
