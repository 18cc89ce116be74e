//! Deterministic simulation of the Chord overlay with a run checker.

pub mod node;
pub mod regularity;
pub mod ring;
pub mod scenario;
pub mod sim;

pub use node::{Envelope, MessageKind, NodeState, Payload};
pub use regularity::{StabilityReport, ViolationKind, ViolationReport};
pub use ring::{member_of, ChordId, HashPolicy, RingConfig, RingError};
pub use sim::{Injection, Mode, World};
