//! Scripted runs: the scenario language, the driver, traces and the fuzzer.

use std::fmt;

use crate::ring::ChordId;

pub mod fuzz;
mod parse;
pub mod run;
pub mod trace;

pub use parse::{parse_scenario, ParseError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Value(String),
    Undef,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Value(v) => f.write_str(v),
            Expect::Undef => f.write_str("undef"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssertKind {
    Stable,
    StablePair(ChordId, ChordId),
    GoldenRule,
    GetSound,
    NotConverged,
}

impl fmt::Display for AssertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssertKind::Stable => f.write_str("stable"),
            AssertKind::StablePair(a, b) => write!(f, "stable_pair({a},{b})"),
            AssertKind::GoldenRule => f.write_str("golden_rule"),
            AssertKind::GetSound => f.write_str("get_sound"),
            AssertKind::NotConverged => f.write_str("not_converged"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Start {
        peer: String,
        id: ChordId,
    },
    Join {
        peer: String,
        id: ChordId,
        via: Option<ChordId>,
    },
    FairLeave {
        node: ChordId,
    },
    UnfairLeave {
        node: ChordId,
    },
    Put {
        node: ChordId,
        key: String,
        hash: ChordId,
        value: String,
    },
    Get {
        node: ChordId,
        key: String,
        expect: Option<Expect>,
    },
    Quiesce {
        budget: Option<u64>,
    },
    /// In unrestricted mode `expect_fail` marks a check that is supposed to
    /// fail; in regular mode the same check must hold.
    Assert {
        kind: AssertKind,
        expect_fail: bool,
    },
}

impl Action {
    /// Control actions run after a step; the rest are injected into one.
    pub fn is_control(&self) -> bool {
        matches!(self, Action::Quiesce { .. } | Action::Assert { .. })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Start { peer, id } => write!(f, "start peer={peer} id={id}"),
            Action::Join { peer, id, via } => {
                write!(f, "join peer={peer} id={id}")?;
                if let Some(v) = via {
                    write!(f, " via={v}")?;
                }
                Ok(())
            }
            Action::FairLeave { node } => write!(f, "fair_leave node={node}"),
            Action::UnfairLeave { node } => write!(f, "unfair_leave node={node}"),
            Action::Put {
                node,
                key,
                hash,
                value,
            } => write!(f, "put node={node} key={key} hash={hash} value={value}"),
            Action::Get { node, key, expect } => {
                write!(f, "get node={node} key={key}")?;
                if let Some(e) = expect {
                    write!(f, " expect={e}")?;
                }
                Ok(())
            }
            Action::Quiesce { budget } => {
                write!(f, "quiesce")?;
                if let Some(b) = budget {
                    write!(f, " budget={b}")?;
                }
                Ok(())
            }
            Action::Assert { kind, expect_fail } => {
                write!(f, "assert {kind}")?;
                if *expect_fail {
                    write!(f, " expect=fail")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioEvent {
    pub at: u64,
    pub action: Action,
}

impl fmt::Display for ScenarioEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at {}: {}", self.at, self.action)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scenario {
    pub ring_bits: Option<u32>,
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    /// Text form accepted by [`parse_scenario`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(m) = self.ring_bits {
            s.push_str(&format!("ring_bits {m}\n"));
        }
        for ev in &self.events {
            s.push_str(&ev.to_string());
            s.push('\n');
        }
        s
    }
}
