//! The simulated world: peers, connected nodes, the message bus and the step
//! scheduler.
//!
//! One step delivers every message sent during the previous step, runs the
//! periodic rules of every connected node in ascending id order and then
//! applies the externally injected events. Everything is a function of the
//! initial world, the injected events and the seed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::node::{fmt_opt, Env, Envelope, MessageKind, NodeState, Note, Outbox, Payload, Route, Value};
use crate::regularity::{self, StabilityReport};
use crate::ring::{ChordId, HashAssignment, HashPolicy, RingConfig, RingError, Sort};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Put and both leaves wait for a stable enclosing pair.
    Regular,
    Unrestricted,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Regular => "regular",
            Mode::Unrestricted => "unrestricted",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(Mode::Regular),
            "unrestricted" => Ok(Mode::Unrestricted),
            other => Err(format!("unknown mode `{other}` (expected regular or unrestricted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PeerMode {
    NotConnected,
    Connected,
    Leaving,
}

impl PeerMode {
    pub fn can_move_to(self, to: PeerMode) -> bool {
        use PeerMode::*;
        matches!(
            (self, to),
            (NotConnected, Connected) | (Connected, Leaving) | (Leaving, NotConnected) | (Connected, NotConnected)
        )
    }
}

impl fmt::Display for PeerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeerMode::NotConnected => "not_connected",
            PeerMode::Connected => "connected",
            PeerMode::Leaving => "leaving",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    ReadMessages,
    Stabilize,
    UpdatePredecessor,
    UpdateFingers,
}

impl Rule {
    pub const PERIODIC: [Rule; 4] = [
        Rule::ReadMessages,
        Rule::Stabilize,
        Rule::UpdatePredecessor,
        Rule::UpdateFingers,
    ];
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Injection {
    Start {
        peer: String,
        policy: HashPolicy,
    },
    Join {
        peer: String,
        policy: HashPolicy,
        via: Option<ChordId>,
    },
    Put {
        node: ChordId,
        key: String,
        policy: HashPolicy,
        value: Value,
    },
    Get {
        node: ChordId,
        key: String,
    },
    FairLeave {
        node: ChordId,
    },
    UnfairLeave {
        node: ChordId,
    },
}

impl Injection {
    pub fn is_gated(&self) -> bool {
        matches!(
            self,
            Injection::Put { .. } | Injection::FairLeave { .. } | Injection::UnfairLeave { .. }
        )
    }
}

fn fmt_policy(policy: &HashPolicy) -> String {
    match policy {
        HashPolicy::Explicit(id) => id.to_string(),
        HashPolicy::SeededRandom => "random".to_string(),
    }
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injection::Start { peer, policy } => write!(f, "start peer={peer} id={}", fmt_policy(policy)),
            Injection::Join { peer, policy, via } => {
                write!(f, "join peer={peer} id={}", fmt_policy(policy))?;
                if let Some(v) = via {
                    write!(f, " via={v}")?;
                }
                Ok(())
            }
            Injection::Put {
                node,
                key,
                policy,
                value,
            } => write!(f, "put node={node} key={key} hash={} value={value}", fmt_policy(policy)),
            Injection::Get { node, key } => write!(f, "get node={node} key={key}"),
            Injection::FairLeave { node } => write!(f, "fair_leave node={node}"),
            Injection::UnfairLeave { node } => write!(f, "unfair_leave node={node}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error("the network already has members")]
    NetworkNotEmpty,
    #[error("peer {0} is already connected or leaving")]
    PeerBusy(String),
    #[error("population limit of {0} peers reached")]
    TooManyPeers(u32),
    #[error("no connected node with id {0}")]
    UnknownNode(ChordId),
    #[error("key {key} already hashes to {existing}")]
    KeyHashMismatch { key: String, existing: ChordId },
    #[error("no free key identifier: all {0} are in use")]
    KeySpaceFull(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinFailure {
    ContactUnreachable(ChordId),
    RingFull,
    SuccessorUnreachable(ChordId),
    LookupTimeout,
}

impl fmt::Display for JoinFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JoinFailure::ContactUnreachable(c) => write!(f, "contact {c} unreachable"),
            JoinFailure::RingFull => write!(f, "ring full"),
            JoinFailure::SuccessorUnreachable(s) => write!(f, "successor {s} unreachable"),
            JoinFailure::LookupTimeout => write!(f, "lookup timeout"),
        }
    }
}

pub type OpId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Started { id: ChordId },
    JoinRequested { id: ChordId, contact: ChordId },
    JoinFailed(JoinFailure),
    PutIssued { op: OpId, key: ChordId },
    GetIssued { op: OpId, key: ChordId },
    /// The key was never hashed, so no node can hold it.
    GetUndef { op: OpId },
    Left,
    Crashed,
    Deferred { reason: String },
    Rejected(SimError),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Started { id } => write!(f, "started id={id}"),
            Outcome::JoinRequested { id, contact } => write!(f, "join requested id={id} contact={contact}"),
            Outcome::JoinFailed(why) => write!(f, "join failed: {why}"),
            Outcome::PutIssued { op, key } => write!(f, "put issued op={op} hash={key}"),
            Outcome::GetIssued { op, key } => write!(f, "get issued op={op} hash={key}"),
            Outcome::GetUndef { op } => write!(f, "get op={op} -> undef (unknown key)"),
            Outcome::Left => write!(f, "left"),
            Outcome::Crashed => write!(f, "crashed"),
            Outcome::Deferred { reason } => write!(f, "deferred ({reason})"),
            Outcome::Rejected(e) => write!(f, "rejected: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub injection: Injection,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRecord {
    pub peer: String,
    pub id: ChordId,
    pub result: Result<ChordId, JoinFailure>,
}

/// What happened during one step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub step: u64,
    /// Rules that changed their node or sent something.
    pub fired: Vec<(ChordId, Rule)>,
    pub delivered: Vec<Envelope>,
    pub dropped: Vec<Envelope>,
    pub events: Vec<EventRecord>,
    pub joins: Vec<JoinRecord>,
    pub gets_completed: Vec<OpId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpStatus {
    Pending,
    Stored { at: ChordId, step: u64 },
    Answered { value: Option<Value>, step: u64 },
    Failed { step: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutRecord {
    pub node: ChordId,
    pub key: String,
    pub key_id: ChordId,
    pub value: Value,
    pub issued_at: u64,
    pub status: OpStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetRecord {
    pub node: ChordId,
    pub key: String,
    pub key_id: Option<ChordId>,
    pub issued_at: u64,
    pub responder: Option<ChordId>,
    /// Nodes holding the key at the instant an undef answer was produced.
    pub holders_at_answer: Vec<ChordId>,
    /// Issued into a quiescent network.
    pub issued_settled: bool,
    pub status: OpStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyFate {
    Stored { value: Value, at: ChordId },
    LostInCrash { node: ChordId },
    LostInFlight { receiver: ChordId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeTransition {
    pub step: u64,
    pub peer: String,
    pub from: PeerMode,
    pub to: PeerMode,
}

/// A gated event that was applied, with the stability of its enclosing pair at
/// that moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateRecord {
    pub step: u64,
    pub injection: Injection,
    pub report: StabilityReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub lookups: u64,
    pub hops_total: u64,
    pub max_hops: u32,
    pub lookup_timeouts: u64,
    pub ignored: u64,
    pub deferrals: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not converged after {rounds} rounds")]
pub struct NotConverged {
    pub rounds: u64,
}

/// Outcome of a lookup evaluated directly over node states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncLookup {
    pub successor: Option<ChordId>,
    pub hops: u32,
}

#[derive(Debug, Clone)]
struct Joiner {
    peer: String,
    contact: ChordId,
    corr: u64,
    issued_at: u64,
    inbox: VecDeque<Envelope>,
}

#[derive(Debug, Clone)]
pub struct World {
    config: RingConfig,
    mode: Mode,
    seed: u64,
    peers: BTreeMap<String, PeerMode>,
    nodes: BTreeMap<ChordId, NodeState>,
    live: BTreeSet<ChordId>,
    joining: BTreeMap<ChordId, Joiner>,
    leaving: Vec<String>,
    bus: BTreeMap<ChordId, VecDeque<Envelope>>,
    hash: HashAssignment,
    clock: u64,
    rng: ChaCha8Rng,
    deferred: VecDeque<Injection>,
    next_op: OpId,
    puts: BTreeMap<OpId, PutRecord>,
    gets: BTreeMap<OpId, GetRecord>,
    op_index: BTreeMap<(ChordId, u64), OpId>,
    key_ledger: BTreeMap<ChordId, KeyFate>,
    transitions: Vec<ModeTransition>,
    gate_log: Vec<GateRecord>,
    stats: Stats,
    /// Whether the injection phase of the current step began quiescent.
    settled: bool,
}

impl World {
    pub fn new(config: RingConfig, mode: Mode, seed: u64) -> Self {
        Self {
            config,
            mode,
            seed,
            peers: BTreeMap::new(),
            nodes: BTreeMap::new(),
            live: BTreeSet::new(),
            joining: BTreeMap::new(),
            leaving: Vec::new(),
            bus: BTreeMap::new(),
            hash: HashAssignment::new(),
            clock: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            deferred: VecDeque::new(),
            next_op: 0,
            puts: BTreeMap::new(),
            gets: BTreeMap::new(),
            op_index: BTreeMap::new(),
            key_ledger: BTreeMap::new(),
            transitions: Vec::new(),
            gate_log: Vec::new(),
            stats: Stats::default(),
            settled: false,
        }
    }

    pub fn config(&self) -> &RingConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index of the next step to run.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn nodes(&self) -> &BTreeMap<ChordId, NodeState> {
        &self.nodes
    }

    pub fn node(&self, id: ChordId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    pub fn live(&self) -> &BTreeSet<ChordId> {
        &self.live
    }

    pub fn ping(&self, id: ChordId) -> bool {
        self.live.contains(&id)
    }

    pub fn peer_mode(&self, peer: &str) -> PeerMode {
        self.peers.get(peer).copied().unwrap_or(PeerMode::NotConnected)
    }

    pub fn peers(&self) -> impl Iterator<Item = (&str, PeerMode)> {
        self.peers.iter().map(|(p, m)| (p.as_str(), *m))
    }

    pub fn peer_id(&self, peer: &str) -> Option<ChordId> {
        self.hash.lookup(Sort::Peer, peer)
    }

    pub fn key_id(&self, key: &str) -> Option<ChordId> {
        self.hash.lookup(Sort::Key, key)
    }

    pub fn hash_assignment(&self) -> &HashAssignment {
        &self.hash
    }

    /// Ids of peers that asked to join and have not connected yet.
    pub fn pending_joiners(&self) -> impl Iterator<Item = ChordId> + '_ {
        self.joining.keys().copied()
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Envelope> {
        self.bus.values().flatten()
    }

    pub fn deferred(&self) -> impl Iterator<Item = &Injection> {
        self.deferred.iter()
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn puts(&self) -> &BTreeMap<OpId, PutRecord> {
        &self.puts
    }

    pub fn gets(&self) -> &BTreeMap<OpId, GetRecord> {
        &self.gets
    }

    pub fn key_ledger(&self) -> &BTreeMap<ChordId, KeyFate> {
        &self.key_ledger
    }

    pub fn transitions(&self) -> &[ModeTransition] {
        &self.transitions
    }

    pub fn gate_log(&self) -> &[GateRecord] {
        &self.gate_log
    }

    /// First connected node at or clockwise after `h`.
    pub fn oracle_successor(&self, h: ChordId) -> Option<ChordId> {
        self.live.range(h..).next().or_else(|| self.live.iter().next()).copied()
    }

    /// Step budget for convergence: `8 * n * M`, with joiners counted in `n`.
    pub fn default_budget(&self) -> u64 {
        let n = self.live.len() + self.pending_joiners().count();
        8 * n.max(1) as u64 * u64::from(self.config.m_bits())
    }

    fn env(&self) -> Env<'_> {
        Env {
            ring: &self.config,
            clock: self.clock,
            live: &self.live,
        }
    }

    fn set_mode(&mut self, peer: &str, to: PeerMode) {
        let from = self.peer_mode(peer);
        self.peers.insert(peer.to_string(), to);
        self.transitions.push(ModeTransition {
            step: self.clock,
            peer: peer.to_string(),
            from,
            to,
        });
    }

    /// A structural message in flight or an unfinished put means the ring is
    /// mid-transition.
    pub fn critical_in_flight(&self) -> bool {
        self.in_flight().any(|m| m.kind().is_structural()) || self.nodes.values().any(NodeState::has_open_put)
    }

    /// Runs one full step.
    pub fn step(&mut self, injected: Vec<Injection>) -> StepOutcome {
        let mut out = StepOutcome {
            step: self.clock,
            ..StepOutcome::default()
        };
        let (delivered, dropped) = self.deliver();
        out.delivered = delivered;
        out.dropped = dropped;
        let order: BTreeSet<ChordId> = self.nodes.keys().chain(self.joining.keys()).copied().collect();
        for id in order {
            if self.nodes.contains_key(&id) {
                for rule in Rule::PERIODIC {
                    if self.fire_into(id, rule, &mut out) {
                        out.fired.push((id, rule));
                    }
                }
            } else if self.joining.contains_key(&id) {
                self.advance_joiner(id, &mut out);
            }
        }
        let mut queue: VecDeque<Injection> = std::mem::take(&mut self.deferred);
        queue.extend(injected);
        self.settled = queue.is_empty() || self.is_quiescent();
        while let Some(inj) = queue.pop_front() {
            if !self.deferred.is_empty() {
                // Keep injection order: nothing overtakes a deferred event.
                self.stats.deferrals += 1;
                self.deferred.push_back(inj.clone());
                out.events.push(EventRecord {
                    injection: inj,
                    outcome: Outcome::Deferred {
                        reason: "queued behind deferred event".into(),
                    },
                });
                continue;
            }
            let record = self.inject_into(inj, &mut out);
            out.events.push(record);
        }
        self.settled = false;
        self.clock += 1;
        out
    }

    /// Runs steps without injections until quiescent.
    pub fn quiesce(&mut self, max_rounds: u64) -> Result<u64, NotConverged> {
        self.quiesce_with(max_rounds, |_, _| {})
    }

    pub fn quiesce_with<F: FnMut(&World, &StepOutcome)>(&mut self, max_rounds: u64, mut observe: F) -> Result<u64, NotConverged> {
        let mut rounds = 0;
        loop {
            if self.is_quiescent() {
                return Ok(rounds);
            }
            if rounds >= max_rounds {
                return Err(NotConverged { rounds });
            }
            let outcome = self.step(Vec::new());
            observe(self, &outcome);
            rounds += 1;
        }
    }

    /// No pending external work, only maintenance traffic on the bus, a stable
    /// network with every predecessor set, and every finger at its ring-order
    /// value.
    pub fn is_quiescent(&self) -> bool {
        if !self.deferred.is_empty() || !self.joining.is_empty() || self.critical_in_flight() {
            return false;
        }
        if self
            .in_flight()
            .any(|m| matches!(m.kind(), MessageKind::GetKeyReq | MessageKind::GetKeyResp))
            || self.nodes.values().any(NodeState::has_open_get)
        {
            return false;
        }
        if self.nodes.is_empty() {
            return true;
        }
        regularity::is_stable_network(self).stable
            && self.nodes.values().all(|n| n.predecessor.is_some())
            && self.fingers_at_fixpoint()
    }

    pub fn fingers_at_fixpoint(&self) -> bool {
        self.nodes.values().all(|n| {
            n.finger
                .iter()
                .enumerate()
                .all(|(i, f)| Some(*f) == self.oracle_successor(self.config.finger_target(n.id, i + 1)))
        })
    }

    /// Moves every in-flight message into its receiver's inbox. Messages to
    /// departed receivers are dropped.
    pub fn deliver(&mut self) -> (Vec<Envelope>, Vec<Envelope>) {
        for peer in std::mem::take(&mut self.leaving) {
            if self.peer_mode(&peer) == PeerMode::Leaving {
                self.set_mode(&peer, PeerMode::NotConnected);
            }
        }
        let mut delivered = Vec::new();
        let mut dropped = Vec::new();
        for (to, queue) in std::mem::take(&mut self.bus) {
            for msg in queue {
                if let Some(node) = self.nodes.get_mut(&to) {
                    node.inbox.push_back(msg.clone());
                    delivered.push(msg);
                } else if let Some(j) = self.joining.get_mut(&to) {
                    j.inbox.push_back(msg.clone());
                    delivered.push(msg);
                } else {
                    for key in msg.payload.keys() {
                        self.key_ledger.insert(key, KeyFate::LostInFlight { receiver: to });
                    }
                    dropped.push(msg);
                }
            }
        }
        self.stats.delivered += delivered.len() as u64;
        self.stats.dropped += dropped.len() as u64;
        (delivered, dropped)
    }

    /// Fires one periodic rule at a connected node. Returns whether it had an
    /// effect.
    pub fn fire(&mut self, id: ChordId, rule: Rule) -> Result<bool, SimError> {
        if !self.nodes.contains_key(&id) {
            return Err(SimError::UnknownNode(id));
        }
        let mut scratch = StepOutcome::default();
        Ok(self.fire_into(id, rule, &mut scratch))
    }

    fn fire_into(&mut self, id: ChordId, rule: Rule, step: &mut StepOutcome) -> bool {
        let env = Env {
            ring: &self.config,
            clock: self.clock,
            live: &self.live,
        };
        let node = self.nodes.get_mut(&id).expect("caller checked");
        let before = (node.successor, node.predecessor, node.next, node.finger.clone());
        let had_mail = !node.inbox.is_empty();
        let mut outbox = Outbox::default();
        match rule {
            Rule::ReadMessages => node.read_messages(&env, &mut outbox),
            Rule::Stabilize => node.stabilize(&env, &mut outbox),
            Rule::UpdatePredecessor => node.update_predecessor(&env),
            Rule::UpdateFingers => node.update_fingers(&env, &mut outbox),
        }
        let changed = before != (node.successor, node.predecessor, node.next, node.finger.clone());
        let effect = changed || !outbox.is_empty() || (rule == Rule::ReadMessages && had_mail);
        self.absorb(outbox, step);
        effect
    }

    fn post(&mut self, msg: Envelope) {
        self.stats.sent += 1;
        self.bus.entry(msg.to).or_default().push_back(msg);
    }

    fn absorb(&mut self, outbox: Outbox, step: &mut StepOutcome) {
        for msg in outbox.sent {
            self.post(msg);
        }
        for note in outbox.notes {
            match note {
                Note::LookupResolved { hops, .. } => {
                    self.stats.lookups += 1;
                    self.stats.hops_total += u64::from(hops);
                    self.stats.max_hops = self.stats.max_hops.max(hops);
                }
                Note::LookupTimedOut { .. } => {
                    self.stats.lookups += 1;
                    self.stats.lookup_timeouts += 1;
                }
                Note::Stored {
                    node,
                    origin,
                    corr,
                    key,
                    value,
                } => {
                    self.key_ledger.insert(key, KeyFate::Stored { value, at: node });
                    if let Some(op) = self.op_index.get(&(origin, corr)) {
                        if let Some(rec) = self.puts.get_mut(op) {
                            rec.status = OpStatus::Stored {
                                at: node,
                                step: self.clock,
                            };
                        }
                    }
                }
                Note::PutFailed { origin, corr, .. } => {
                    if let Some(rec) = self.op_index.get(&(origin, corr)).and_then(|op| self.puts.get_mut(op)) {
                        rec.status = OpStatus::Failed { step: self.clock };
                    }
                }
                Note::GetAnswered {
                    responder,
                    origin,
                    corr,
                    key,
                    value,
                    held,
                } => {
                    // Only the responder has moved since it answered.
                    let holders: Vec<ChordId> = if value.is_none() {
                        self.nodes
                            .values()
                            .filter(|n| if n.id == responder { held } else { n.keyvalue.contains_key(&key) })
                            .map(|n| n.id)
                            .collect()
                    } else {
                        Vec::new()
                    };
                    if let Some(rec) = self.op_index.get(&(origin, corr)).and_then(|op| self.gets.get_mut(op)) {
                        rec.responder = Some(responder);
                        rec.holders_at_answer = holders;
                    }
                }
                Note::GetCompleted { origin, corr, value, .. } => {
                    if let Some(op) = self.op_index.get(&(origin, corr)).copied() {
                        if let Some(rec) = self.gets.get_mut(&op) {
                            rec.status = OpStatus::Answered {
                                value,
                                step: self.clock,
                            };
                            step.gets_completed.push(op);
                        }
                    }
                }
                Note::GetFailed { origin, corr, .. } => {
                    if let Some(op) = self.op_index.get(&(origin, corr)).copied() {
                        if let Some(rec) = self.gets.get_mut(&op) {
                            rec.status = OpStatus::Failed { step: self.clock };
                            step.gets_completed.push(op);
                        }
                    }
                }
                Note::Ignored { .. } => self.stats.ignored += 1,
            }
        }
    }

    fn advance_joiner(&mut self, id: ChordId, step: &mut StepOutcome) {
        let deadline = self.env().lookup_deadline();
        let joiner = self.joining.get_mut(&id).expect("caller checked");
        let mut answer = None;
        while let Some(msg) = joiner.inbox.pop_front() {
            match msg.payload {
                Payload::FindSuccResp { successor, .. } if msg.corr == joiner.corr => answer = Some(successor),
                _ => self.stats.ignored += 1,
            }
        }
        let result = match answer {
            Some(Some(s)) if self.live.contains(&s) => Ok(s),
            Some(Some(s)) => Err(JoinFailure::SuccessorUnreachable(s)),
            Some(None) => Err(JoinFailure::LookupTimeout),
            None if self.clock > joiner.issued_at + deadline => Err(JoinFailure::LookupTimeout),
            None => return,
        };
        let joiner = self.joining.remove(&id).expect("present");
        match result {
            Ok(s) => {
                let node = NodeState::joined(&self.config, id, s, joiner.corr + 1);
                self.nodes.insert(id, node);
                self.live.insert(id);
                self.set_mode(&joiner.peer, PeerMode::Connected);
                step.joins.push(JoinRecord {
                    peer: joiner.peer,
                    id,
                    result: Ok(s),
                });
                for rule in &Rule::PERIODIC[1..] {
                    if self.fire_into(id, *rule, step) {
                        step.fired.push((id, *rule));
                    }
                }
            }
            Err(why) => {
                self.hash.release(Sort::Peer, &joiner.peer);
                step.joins.push(JoinRecord {
                    peer: joiner.peer,
                    id,
                    result: Err(why),
                });
            }
        }
    }

    /// Applies one external event at the current clock, outside the step
    /// structure.
    pub fn inject(&mut self, injection: Injection) -> EventRecord {
        let mut scratch = StepOutcome::default();
        self.inject_into(injection, &mut scratch)
    }

    fn inject_into(&mut self, injection: Injection, step: &mut StepOutcome) -> EventRecord {
        let outcome = self.apply(&injection, step);
        if let Outcome::Deferred { .. } = outcome {
            self.stats.deferrals += 1;
            self.deferred.push_back(injection.clone());
        }
        EventRecord { injection, outcome }
    }

    fn defer_reason(&self, report: &StabilityReport) -> Option<String> {
        if self.mode != Mode::Regular {
            return None;
        }
        if !report.stable {
            return Some(format!("gate: {report}"));
        }
        if self.critical_in_flight() {
            return Some("gate: ring transition in flight".into());
        }
        None
    }

    fn apply(&mut self, injection: &Injection, step: &mut StepOutcome) -> Outcome {
        match self.apply_inner(injection, step) {
            Ok(outcome) => outcome,
            Err(e) => Outcome::Rejected(e),
        }
    }

    fn apply_inner(&mut self, injection: &Injection, step: &mut StepOutcome) -> Result<Outcome, SimError> {
        match injection {
            Injection::Start { peer, policy } => {
                if !self.nodes.is_empty() || !self.joining.is_empty() {
                    return Err(SimError::NetworkNotEmpty);
                }
                self.start_peer(peer, policy)
            }
            Injection::Join { peer, policy, via } => {
                if self.live.is_empty() {
                    return self.start_peer(peer, policy);
                }
                if self.mode == Mode::Regular && self.critical_in_flight() {
                    return Ok(Outcome::Deferred {
                        reason: "ring transition in flight".into(),
                    });
                }
                self.check_peer(peer)?;
                let contact = match via {
                    Some(c) => *c,
                    None => *self.live.iter().choose(&mut self.rng).expect("non-empty"),
                };
                if !self.ping(contact) {
                    return Ok(Outcome::JoinFailed(JoinFailure::ContactUnreachable(contact)));
                }
                let Some(id) = self.hash.assign(&self.config, Sort::Peer, peer, *policy, &mut self.rng)? else {
                    return Ok(Outcome::JoinFailed(JoinFailure::RingFull));
                };
                self.peers.entry(peer.clone()).or_insert(PeerMode::NotConnected);
                let corr = self.clock << 20;
                self.joining.insert(
                    id,
                    Joiner {
                        peer: peer.clone(),
                        contact,
                        corr,
                        issued_at: self.clock,
                        inbox: VecDeque::new(),
                    },
                );
                self.post(Envelope {
                    from: id,
                    to: contact,
                    corr,
                    payload: Payload::FindSuccReq {
                        target: id,
                        origin: id,
                        hops: 1,
                    },
                });
                Ok(Outcome::JoinRequested { id, contact })
            }
            Injection::Put {
                node,
                key,
                policy,
                value,
            } => {
                self.require_node(*node)?;
                let key_id = self.key_hash(key, policy)?;
                let report = regularity::gate_put(self, key_id);
                if let Some(reason) = self.defer_reason(&report) {
                    return Ok(Outcome::Deferred { reason });
                }
                self.log_gate(injection, report);
                let op = self.next_op();
                let env = Env {
                    ring: &self.config,
                    clock: self.clock,
                    live: &self.live,
                };
                let mut outbox = Outbox::default();
                let corr = self
                    .nodes
                    .get_mut(node)
                    .expect("checked")
                    .begin_put(&env, key_id, value.clone(), &mut outbox);
                self.op_index.insert((*node, corr), op);
                self.puts.insert(
                    op,
                    PutRecord {
                        node: *node,
                        key: key.clone(),
                        key_id,
                        value: value.clone(),
                        issued_at: self.clock,
                        status: OpStatus::Pending,
                    },
                );
                self.absorb(outbox, step);
                Ok(Outcome::PutIssued { op, key: key_id })
            }
            Injection::Get { node, key } => {
                self.require_node(*node)?;
                let op = self.next_op();
                let key_id = self.key_id(key);
                let mut record = GetRecord {
                    node: *node,
                    key: key.clone(),
                    key_id,
                    issued_at: self.clock,
                    responder: None,
                    holders_at_answer: Vec::new(),
                    issued_settled: self.settled,
                    status: OpStatus::Pending,
                };
                let Some(key_id) = key_id else {
                    record.status = OpStatus::Answered {
                        value: None,
                        step: self.clock,
                    };
                    self.gets.insert(op, record);
                    step.gets_completed.push(op);
                    return Ok(Outcome::GetUndef { op });
                };
                self.gets.insert(op, record);
                let env = Env {
                    ring: &self.config,
                    clock: self.clock,
                    live: &self.live,
                };
                let mut outbox = Outbox::default();
                let corr = self.nodes.get_mut(node).expect("checked").begin_get(&env, key_id, &mut outbox);
                self.op_index.insert((*node, corr), op);
                self.absorb(outbox, step);
                Ok(Outcome::GetIssued { op, key: key_id })
            }
            Injection::FairLeave { node } | Injection::UnfairLeave { node } => {
                self.require_node(*node)?;
                let fair = matches!(injection, Injection::FairLeave { .. });
                let report = regularity::gate_leave(self, *node, !fair);
                if let Some(reason) = self.defer_reason(&report) {
                    return Ok(Outcome::Deferred { reason });
                }
                self.log_gate(injection, report);
                let mut state = self.nodes.remove(node).expect("checked");
                self.live.remove(node);
                let peer = self
                    .hash
                    .release_id(Sort::Peer, *node)
                    .expect("connected node has a peer");
                if fair {
                    let mut outbox = Outbox::default();
                    state.fair_leave(&mut outbox);
                    // Keys of a leaver alone on the ring have nowhere to go.
                    for key in state.keyvalue.keys() {
                        self.key_ledger.insert(*key, KeyFate::LostInCrash { node: *node });
                    }
                    self.absorb(outbox, step);
                    self.set_mode(&peer, PeerMode::Leaving);
                    self.leaving.push(peer);
                    Ok(Outcome::Left)
                } else {
                    for key in state.keyvalue.keys() {
                        self.key_ledger.insert(*key, KeyFate::LostInCrash { node: *node });
                    }
                    self.set_mode(&peer, PeerMode::NotConnected);
                    Ok(Outcome::Crashed)
                }
            }
        }
    }

    fn next_op(&mut self) -> OpId {
        let op = self.next_op;
        self.next_op += 1;
        op
    }

    fn log_gate(&mut self, injection: &Injection, report: StabilityReport) {
        self.gate_log.push(GateRecord {
            step: self.clock,
            injection: injection.clone(),
            report,
        });
    }

    fn require_node(&self, id: ChordId) -> Result<(), SimError> {
        if self.nodes.contains_key(&id) {
            Ok(())
        } else {
            Err(SimError::UnknownNode(id))
        }
    }

    fn check_peer(&self, peer: &str) -> Result<(), SimError> {
        if self.peer_mode(peer) != PeerMode::NotConnected || self.hash.lookup(Sort::Peer, peer).is_some() {
            return Err(SimError::PeerBusy(peer.to_string()));
        }
        if !self.peers.contains_key(peer) && self.peers.len() as u64 >= u64::from(self.config.l_peers()) {
            return Err(SimError::TooManyPeers(self.config.l_peers()));
        }
        Ok(())
    }

    fn start_peer(&mut self, peer: &str, policy: &HashPolicy) -> Result<Outcome, SimError> {
        self.check_peer(peer)?;
        let Some(id) = self.hash.assign(&self.config, Sort::Peer, peer, *policy, &mut self.rng)? else {
            return Ok(Outcome::JoinFailed(JoinFailure::RingFull));
        };
        let node = NodeState::start(&self.config, id, self.clock << 20);
        self.nodes.insert(id, node);
        self.live.insert(id);
        self.set_mode(peer, PeerMode::Connected);
        Ok(Outcome::Started { id })
    }

    fn key_hash(&mut self, key: &str, policy: &HashPolicy) -> Result<ChordId, SimError> {
        if let Some(existing) = self.hash.lookup(Sort::Key, key) {
            return match policy {
                HashPolicy::Explicit(id) if *id != existing => Err(SimError::KeyHashMismatch {
                    key: key.to_string(),
                    existing,
                }),
                _ => Ok(existing),
            };
        }
        self.hash
            .assign(&self.config, Sort::Key, key, *policy, &mut self.rng)?
            .ok_or(SimError::KeySpaceFull(self.config.n_slots()))
    }

    /// Follows the routing decisions of the nodes themselves, without the bus,
    /// counting forwards the same way the message protocol does.
    pub fn resolve_synchronously(&self, origin: ChordId, h: ChordId) -> SyncLookup {
        let env = self.env();
        let mut at = origin;
        let mut hops = 0;
        loop {
            let Some(node) = self.nodes.get(&at) else {
                return SyncLookup { successor: None, hops };
            };
            match node.route(&env, h) {
                Route::Resolved(s) => return SyncLookup { successor: Some(s), hops },
                Route::Forward(next) => {
                    if hops >= env.hop_budget() {
                        return SyncLookup { successor: None, hops };
                    }
                    hops += 1;
                    at = next;
                }
            }
        }
    }

    /// Canonical text form: config, nodes by id, bus by receiver, peers.
    pub fn serialize(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "config m={} n={} l={} k={} mode={} clock={}",
            c.m_bits(),
            c.n_slots(),
            c.l_peers(),
            c.k_keys(),
            self.mode,
            self.clock
        );
        for n in self.nodes.values() {
            let fingers: Vec<String> = n.finger.iter().map(ToString::to_string).collect();
            let keys: Vec<String> = n.keyvalue.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            let _ = writeln!(
                s,
                "node id={} pred={} succ={} finger=[{}] next={} keys={{{}}}",
                n.id,
                fmt_opt(n.predecessor),
                n.successor,
                fingers.join(","),
                n.next,
                keys.join(",")
            );
            for m in &n.inbox {
                let _ = writeln!(s, "  inbox {m}");
            }
        }
        for (id, j) in &self.joining {
            let _ = writeln!(s, "joiner id={id} peer={} contact={} since={}", j.peer, j.contact, j.issued_at);
        }
        for m in self.in_flight() {
            let _ = writeln!(s, "bus {m}");
        }
        for inj in &self.deferred {
            let _ = writeln!(s, "deferred {inj}");
        }
        for (p, m) in &self.peers {
            let _ = writeln!(s, "peer {p} {m}");
        }
        s
    }
}
