//! The digital model: a finite state machine over `{STANDBY, ACTIVE, OFF}`
//! driven by signed period commands.
//!
//! Transitions depend only on the sign of the commanded period: positive
//! activates, zero returns to standby, negative switches off. OFF is the
//! single final state and absorbs every further command.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Message, MessageKind, OperatingState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("the state machine does not process {0} events")]
    KindRejected(MessageKind),
    #[error("invalid state machine definition: {0}")]
    InvalidDefinition(String),
}

/// The 5-tuple definition. The alphabet is fixed to the signed integers and the
/// transition function to the sign rule, so only `Q`, `q0` and `F` vary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMachineDef {
    states: BTreeSet<OperatingState>,
    initial: OperatingState,
    finals: BTreeSet<OperatingState>,
}

impl StateMachineDef {
    pub fn builtin() -> Self {
        Self {
            states: OperatingState::ALL.into_iter().collect(),
            initial: OperatingState::Standby,
            finals: [OperatingState::Off].into_iter().collect(),
        }
    }

    pub fn new(
        states: BTreeSet<OperatingState>,
        initial: OperatingState,
        finals: BTreeSet<OperatingState>,
    ) -> Result<Self, ModelError> {
        if !states.contains(&initial) {
            return Err(ModelError::InvalidDefinition(format!(
                "initial state {initial} is not in Q"
            )));
        }
        if let Some(stray) = finals.iter().find(|f| !states.contains(f)) {
            return Err(ModelError::InvalidDefinition(format!(
                "final state {stray} is not in Q"
            )));
        }
        // δ must stay inside Q for every non-final state and every sign.
        for q in states.iter().filter(|q| !finals.contains(q)) {
            for target in [OperatingState::Active, OperatingState::Standby, OperatingState::Off] {
                if !states.contains(&target) {
                    return Err(ModelError::InvalidDefinition(format!(
                        "transition from {q} leads to {target}, which is not in Q"
                    )));
                }
            }
        }
        Ok(Self { states, initial, finals })
    }

    pub fn states(&self) -> &BTreeSet<OperatingState> {
        &self.states
    }

    pub fn initial(&self) -> OperatingState {
        self.initial
    }

    pub fn finals(&self) -> &BTreeSet<OperatingState> {
        &self.finals
    }

    pub fn is_final(&self, q: OperatingState) -> bool {
        self.finals.contains(&q)
    }

    /// δ(q, x).
    pub fn transition(&self, q: OperatingState, period: i16) -> OperatingState {
        if self.is_final(q) {
            return q;
        }
        match period.signum() {
            1 => OperatingState::Active,
            0 => OperatingState::Standby,
            _ => OperatingState::Off,
        }
    }

    pub fn initial_state(&self) -> TwinState {
        TwinState { current: self.initial, period: 0 }
    }

    /// Applies one event. Commands go through δ; statuses set the state directly
    /// and leave the period alone.
    pub fn process_event(&self, state: TwinState, event: &Message) -> Result<TwinState, ModelError> {
        match *event {
            Message::Command(period) => Ok(TwinState {
                current: self.transition(state.current, period),
                period,
            }),
            Message::Status(observed) => Ok(TwinState { current: observed, ..state }),
            Message::Measurement(_) => Err(ModelError::KindRejected(MessageKind::Measurement)),
        }
    }
}

impl Default for StateMachineDef {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Current state of the digital model plus the last commanded period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TwinState {
    pub current: OperatingState,
    pub period: i16,
}

impl Default for TwinState {
    fn default() -> Self {
        StateMachineDef::builtin().initial_state()
    }
}

/// Convenience wrapper around the built-in machine.
pub fn process_event(state: TwinState, event: &Message) -> Result<TwinState, ModelError> {
    StateMachineDef::builtin().process_event(state, event)
}
