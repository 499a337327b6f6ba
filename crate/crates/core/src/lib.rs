//! A TCP connection state machine whose every state change is checked
//! against the connection automaton, a session-typed socket API, a
//! deterministic two-endpoint harness, and an exhaustive conformance checker.

pub mod api;
pub mod automaton;
pub mod checker;
pub mod cli;
pub mod engine;
pub mod harness;
pub mod scenarios;
pub mod segment;
pub mod socket;

pub use automaton::{
    change_state, is_allowed, transition_table, FlagSet, TcpState, Transition, TransitionTable,
    TransitionViolation, Trigger, TriggerPattern,
};
pub use engine::{update_events, Engine, StateSet};
pub use segment::Segment;
pub use socket::{EventMask, Socket, SocketModel};
