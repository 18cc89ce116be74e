//! Per-node protocol rules.
//!
//! Every rule is a local transition `(NodeState, Env) -> (NodeState, Outbox)`.
//! A rule never touches another node: cross-node effects leave as
//! [`Envelope`]s and arrive through the simulator's bus one step later.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::ring::{member_of, ChordId, RingConfig};

pub type Value = String;

/// Steps a stabilize round needs when the successor is alive: the request is
/// read one step after it is sent and the reply one step after that.
pub const STABILIZE_ROUND_STEPS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    FindSuccReq,
    FindSuccResp,
    GetPredReq,
    GetPredResp,
    Notify,
    StoreKey,
    GetKeyReq,
    GetKeyResp,
    TransferKeys,
    LeaveToPred,
    LeaveToSucc,
}

impl MessageKind {
    /// Messages that move keys or splice the ring. While one of these is in
    /// flight the ring is mid-transition.
    pub fn is_structural(self) -> bool {
        matches!(
            self,
            MessageKind::StoreKey
                | MessageKind::TransferKeys
                | MessageKind::LeaveToPred
                | MessageKind::LeaveToSucc
        )
    }

    pub fn carries_keys(self) -> bool {
        matches!(self, MessageKind::StoreKey | MessageKind::TransferKeys)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// `hops` counts the forwards taken so far, this one included.
    FindSuccReq {
        target: ChordId,
        origin: ChordId,
        hops: u32,
    },
    /// `successor == None` means the hop budget ran out.
    FindSuccResp {
        target: ChordId,
        successor: Option<ChordId>,
        hops: u32,
    },
    GetPredReq,
    GetPredResp {
        predecessor: Option<ChordId>,
    },
    Notify,
    StoreKey {
        key: ChordId,
        value: Value,
    },
    GetKeyReq {
        key: ChordId,
    },
    GetKeyResp {
        key: ChordId,
        value: Option<Value>,
    },
    TransferKeys {
        pairs: Vec<(ChordId, Value)>,
    },
    LeaveToPred {
        successor: ChordId,
    },
    LeaveToSucc {
        predecessor: Option<ChordId>,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::FindSuccReq { .. } => MessageKind::FindSuccReq,
            Payload::FindSuccResp { .. } => MessageKind::FindSuccResp,
            Payload::GetPredReq => MessageKind::GetPredReq,
            Payload::GetPredResp { .. } => MessageKind::GetPredResp,
            Payload::Notify => MessageKind::Notify,
            Payload::StoreKey { .. } => MessageKind::StoreKey,
            Payload::GetKeyReq { .. } => MessageKind::GetKeyReq,
            Payload::GetKeyResp { .. } => MessageKind::GetKeyResp,
            Payload::TransferKeys { .. } => MessageKind::TransferKeys,
            Payload::LeaveToPred { .. } => MessageKind::LeaveToPred,
            Payload::LeaveToSucc { .. } => MessageKind::LeaveToSucc,
        }
    }

    /// Key identifiers carried by this message.
    pub fn keys(&self) -> Vec<ChordId> {
        match self {
            Payload::StoreKey { key, .. } => vec![*key],
            Payload::TransferKeys { pairs } => pairs.iter().map(|(k, _)| *k).collect(),
            _ => Vec::new(),
        }
    }
}

pub(crate) fn fmt_opt(id: Option<ChordId>) -> String {
    id.map_or_else(|| "undef".to_string(), |id| id.to_string())
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind())?;
        match self {
            Payload::FindSuccReq {
                target,
                origin,
                hops,
            } => write!(f, " target={target} origin={origin} hops={hops}"),
            Payload::FindSuccResp {
                target,
                successor,
                hops,
            } => write!(
                f,
                " target={target} successor={} hops={hops}",
                successor.map_or_else(|| "timeout".to_string(), |s| s.to_string())
            ),
            Payload::GetPredReq | Payload::Notify => Ok(()),
            Payload::GetPredResp { predecessor } => {
                write!(f, " predecessor={}", fmt_opt(*predecessor))
            }
            Payload::StoreKey { key, value } => write!(f, " key={key} value={value}"),
            Payload::GetKeyReq { key } => write!(f, " key={key}"),
            Payload::GetKeyResp { key, value } => write!(
                f,
                " key={key} value={}",
                value.as_deref().unwrap_or("undef")
            ),
            Payload::TransferKeys { pairs } => {
                write!(f, " pairs={{")?;
                for (i, (k, v)) in pairs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}:{v}")?;
                }
                write!(f, "}}")
            }
            Payload::LeaveToPred { successor } => write!(f, " successor={successor}"),
            Payload::LeaveToSucc { predecessor } => {
                write!(f, " predecessor={}", fmt_opt(*predecessor))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: ChordId,
    pub to: ChordId,
    /// Links a response to the request that caused it; unique among the
    /// originating node's open requests.
    pub corr: u64,
    pub payload: Payload,
}

impl Envelope {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

impl fmt::Display for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{} #{} {}", self.from, self.to, self.corr, self.payload)
    }
}

/// What a rule may observe outside its own node.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub ring: &'a RingConfig,
    pub clock: u64,
    /// Identifiers of currently connected nodes; backs `ping`.
    pub live: &'a BTreeSet<ChordId>,
}

impl Env<'_> {
    pub fn ping(&self, id: ChordId) -> bool {
        self.live.contains(&id)
    }

    /// Lookups give up after `4 * M` forwards.
    pub fn hop_budget(&self) -> u32 {
        4 * self.ring.m_bits()
    }

    /// Steps after which an unanswered lookup is abandoned.
    pub fn lookup_deadline(&self) -> u64 {
        u64::from(self.hop_budget()) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupPurpose {
    /// Refresh of finger entry `index` (1-based).
    Finger(usize),
    Put { key: ChordId, value: Value },
    Get { key: ChordId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pending {
    Lookup {
        purpose: LookupPurpose,
        issued_at: u64,
    },
    AwaitValue {
        key: ChordId,
        responder: ChordId,
        issued_at: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StabilizeRound {
    corr: u64,
    issued_at: u64,
}

/// Side observations a rule reports to the simulator. They never feed back
/// into protocol behaviour; the simulator uses them for bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Note {
    LookupResolved {
        origin: ChordId,
        target: ChordId,
        successor: ChordId,
        hops: u32,
    },
    LookupTimedOut {
        origin: ChordId,
        target: ChordId,
    },
    Stored {
        node: ChordId,
        origin: ChordId,
        corr: u64,
        key: ChordId,
        value: Value,
    },
    PutFailed {
        origin: ChordId,
        corr: u64,
        key: ChordId,
    },
    GetAnswered {
        responder: ChordId,
        origin: ChordId,
        corr: u64,
        key: ChordId,
        value: Option<Value>,
        /// The responder held the key when it answered.
        held: bool,
    },
    GetCompleted {
        origin: ChordId,
        corr: u64,
        key: ChordId,
        value: Option<Value>,
    },
    GetFailed {
        origin: ChordId,
        corr: u64,
        key: ChordId,
    },
    /// A message that matched no open request or failed a sender check.
    Ignored {
        node: ChordId,
        envelope: String,
    },
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Outbox {
    pub sent: Vec<Envelope>,
    pub notes: Vec<Note>,
}

impl Outbox {
    pub fn is_empty(&self) -> bool {
        self.sent.is_empty() && self.notes.is_empty()
    }
}

/// Next move of a lookup at the evaluating node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Resolved(ChordId),
    Forward(ChordId),
}

/// One node: `<id, successor, predecessor, finger, next, keyvalue>` plus its
/// inbox and the bookkeeping for requests it has in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeState {
    pub id: ChordId,
    pub successor: ChordId,
    pub predecessor: Option<ChordId>,
    /// `finger[i - 1]` tracks the successor of `id + 2^(i-1)`; `finger[0]`
    /// mirrors `successor`.
    pub finger: Vec<ChordId>,
    /// 1-based index of the finger refreshed next.
    pub next: usize,
    pub keyvalue: BTreeMap<ChordId, Value>,
    pub inbox: VecDeque<Envelope>,
    next_corr: u64,
    stabilize_round: Option<StabilizeRound>,
    finger_lookup: Option<u64>,
    pending: BTreeMap<u64, Pending>,
}

impl NodeState {
    /// The first node of a network: its own successor, no predecessor.
    pub fn start(ring: &RingConfig, id: ChordId, corr_base: u64) -> Self {
        Self::with_successor(ring, id, id, corr_base)
    }

    /// A node that has just learned its successor through a join lookup.
    pub fn joined(ring: &RingConfig, id: ChordId, successor: ChordId, corr_base: u64) -> Self {
        Self::with_successor(ring, id, successor, corr_base)
    }

    fn with_successor(ring: &RingConfig, id: ChordId, successor: ChordId, corr_base: u64) -> Self {
        Self {
            id,
            successor,
            predecessor: None,
            finger: vec![successor; ring.m_bits() as usize],
            next: 1,
            keyvalue: BTreeMap::new(),
            inbox: VecDeque::new(),
            next_corr: corr_base,
            stabilize_round: None,
            finger_lookup: None,
            pending: BTreeMap::new(),
        }
    }

    /// Checks the structural invariants of the node tuple.
    pub fn validate(&self, ring: &RingConfig) -> Result<(), String> {
        let m = ring.m_bits() as usize;
        if self.finger.len() != m {
            return Err(format!(
                "node {}: finger has {} entries, expected {m}",
                self.id,
                self.finger.len()
            ));
        }
        if !(1..=m).contains(&self.next) {
            return Err(format!("node {}: next={} outside 1..={m}", self.id, self.next));
        }
        if self.finger[0] != self.successor {
            return Err(format!(
                "node {}: finger[1]={} disagrees with successor={}",
                self.id, self.finger[0], self.successor
            ));
        }
        Ok(())
    }

    pub fn has_open_put(&self) -> bool {
        self.pending.values().any(|p| {
            matches!(
                p,
                Pending::Lookup {
                    purpose: LookupPurpose::Put { .. },
                    ..
                }
            )
        })
    }

    pub fn has_open_get(&self) -> bool {
        self.pending.values().any(|p| {
            matches!(
                p,
                Pending::AwaitValue { .. }
                    | Pending::Lookup {
                        purpose: LookupPurpose::Get { .. },
                        ..
                    }
            )
        })
    }

    fn corr(&mut self) -> u64 {
        let c = self.next_corr;
        self.next_corr += 1;
        c
    }

    fn set_successor(&mut self, successor: ChordId) {
        self.successor = successor;
        self.finger[0] = successor;
    }

    fn send(&self, out: &mut Outbox, to: ChordId, corr: u64, payload: Payload) {
        out.sent.push(Envelope {
            from: self.id,
            to,
            corr,
            payload,
        });
    }

    /// One routing decision for `target` at this node.
    pub fn route(&self, env: &Env<'_>, target: ChordId) -> Route {
        if member_of(target, self.id, self.successor) {
            return Route::Resolved(self.successor);
        }
        // Closest preceding live finger.
        for &f in self.finger.iter().rev() {
            if f != self.id && f != target && member_of(f, self.id, target) && env.ping(f) {
                return Route::Forward(f);
            }
        }
        Route::Forward(self.successor)
    }

    fn start_lookup(&mut self, env: &Env<'_>, purpose: LookupPurpose, target: ChordId, out: &mut Outbox) -> u64 {
        let corr = self.corr();
        match self.route(env, target) {
            Route::Resolved(s) => self.complete_lookup(env, corr, purpose, target, Some(s), 0, out),
            Route::Forward(next) => {
                if let LookupPurpose::Finger(_) = purpose {
                    self.finger_lookup = Some(corr);
                }
                self.pending.insert(
                    corr,
                    Pending::Lookup {
                        purpose,
                        issued_at: env.clock,
                    },
                );
                self.send(
                    out,
                    next,
                    corr,
                    Payload::FindSuccReq {
                        target,
                        origin: self.id,
                        hops: 1,
                    },
                );
            }
        }
        corr
    }

    #[allow(clippy::too_many_arguments)]
    fn complete_lookup(
        &mut self,
        env: &Env<'_>,
        corr: u64,
        purpose: LookupPurpose,
        target: ChordId,
        successor: Option<ChordId>,
        hops: u32,
        out: &mut Outbox,
    ) {
        match successor {
            Some(s) => out.notes.push(Note::LookupResolved {
                origin: self.id,
                target,
                successor: s,
                hops,
            }),
            None => out.notes.push(Note::LookupTimedOut {
                origin: self.id,
                target,
            }),
        }
        match (purpose, successor) {
            (LookupPurpose::Finger(index), found) => {
                if self.finger_lookup == Some(corr) {
                    self.finger_lookup = None;
                }
                if let Some(s) = found {
                    if index == 1 {
                        self.set_successor(s);
                    } else {
                        self.finger[index - 1] = s;
                    }
                    self.next = index % self.finger.len() + 1;
                }
            }
            (LookupPurpose::Put { key, value }, Some(r)) => {
                self.send(out, r, corr, Payload::StoreKey { key, value });
            }
            (LookupPurpose::Put { key, .. }, None) => out.notes.push(Note::PutFailed {
                origin: self.id,
                corr,
                key,
            }),
            (LookupPurpose::Get { key }, Some(r)) => {
                self.pending.insert(
                    corr,
                    Pending::AwaitValue {
                        key,
                        responder: r,
                        issued_at: env.clock,
                    },
                );
                self.send(out, r, corr, Payload::GetKeyReq { key });
            }
            (LookupPurpose::Get { key }, None) => out.notes.push(Note::GetFailed {
                origin: self.id,
                corr,
                key,
            }),
        }
    }

    /// Drains the inbox in FIFO order, then abandons requests whose reply can
    /// no longer arrive.
    pub fn read_messages(&mut self, env: &Env<'_>, out: &mut Outbox) {
        while let Some(msg) = self.inbox.pop_front() {
            self.handle(env, msg, out);
        }
        self.expire(env, out);
    }

    fn ignore(&self, msg: &Envelope, out: &mut Outbox) {
        out.notes.push(Note::Ignored {
            node: self.id,
            envelope: msg.to_string(),
        });
    }

    fn handle(&mut self, env: &Env<'_>, msg: Envelope, out: &mut Outbox) {
        let Envelope {
            from, corr, payload, ..
        } = msg.clone();
        match payload {
            Payload::FindSuccReq {
                target,
                origin,
                hops,
            } => {
                match self.route(env, target) {
                    Route::Resolved(s) => self.send(
                        out,
                        origin,
                        corr,
                        Payload::FindSuccResp {
                            target,
                            successor: Some(s),
                            hops,
                        },
                    ),
                    Route::Forward(_) if hops >= env.hop_budget() => self.send(
                        out,
                        origin,
                        corr,
                        Payload::FindSuccResp {
                            target,
                            successor: None,
                            hops,
                        },
                    ),
                    Route::Forward(next) => self.send(
                        out,
                        next,
                        corr,
                        Payload::FindSuccReq {
                            target,
                            origin,
                            hops: hops + 1,
                        },
                    ),
                }
            }
            Payload::FindSuccResp {
                target,
                successor,
                hops,
            } => match self.pending.remove(&corr) {
                Some(Pending::Lookup { purpose, .. }) => {
                    self.complete_lookup(env, corr, purpose, target, successor, hops, out)
                }
                Some(other) => {
                    self.pending.insert(corr, other);
                    self.ignore(&msg, out);
                }
                None => self.ignore(&msg, out),
            },
            Payload::GetPredReq => self.send(
                out,
                from,
                corr,
                Payload::GetPredResp {
                    predecessor: self.predecessor,
                },
            ),
            Payload::GetPredResp { predecessor } => {
                if self.stabilize_round.map(|r| r.corr) != Some(corr) {
                    self.ignore(&msg, out);
                    return;
                }
                self.stabilize_round = None;
                if from != self.successor {
                    self.ignore(&msg, out);
                    return;
                }
                if let Some(x) = predecessor {
                    if x != self.successor && member_of(x, self.id, self.successor) && env.ping(x) {
                        self.set_successor(x);
                    }
                }
                let corr = self.corr();
                self.send(out, self.successor, corr, Payload::Notify);
            }
            Payload::Notify => self.accept_notify(env, from, out),
            Payload::StoreKey { key, value } => {
                self.keyvalue.insert(key, value.clone());
                out.notes.push(Note::Stored {
                    node: self.id,
                    origin: from,
                    corr,
                    key,
                    value,
                });
            }
            Payload::GetKeyReq { key } => {
                let responsible = self
                    .predecessor
                    .is_none_or(|p| member_of(key, p, self.id));
                let value = if responsible {
                    self.keyvalue.get(&key).cloned()
                } else {
                    None
                };
                out.notes.push(Note::GetAnswered {
                    responder: self.id,
                    origin: from,
                    corr,
                    key,
                    value: value.clone(),
                    held: self.keyvalue.contains_key(&key),
                });
                self.send(out, from, corr, Payload::GetKeyResp { key, value });
            }
            Payload::GetKeyResp { key, value } => match self.pending.remove(&corr) {
                Some(Pending::AwaitValue { responder, .. }) if responder == from => {
                    out.notes.push(Note::GetCompleted {
                        origin: self.id,
                        corr,
                        key,
                        value,
                    })
                }
                Some(other) => {
                    self.pending.insert(corr, other);
                    self.ignore(&msg, out);
                }
                None => self.ignore(&msg, out),
            },
            Payload::TransferKeys { pairs } => {
                self.keyvalue.extend(pairs);
            }
            Payload::LeaveToPred { successor } => {
                if self.successor == from {
                    self.set_successor(successor);
                } else {
                    self.ignore(&msg, out);
                }
            }
            Payload::LeaveToSucc { predecessor } => {
                if self.predecessor == Some(from) {
                    self.predecessor = predecessor;
                } else {
                    self.ignore(&msg, out);
                }
            }
        }
    }

    /// A node claims to be our predecessor. If accepted, hand over every pair
    /// that now falls outside `(candidate, id]`.
    fn accept_notify(&mut self, env: &Env<'_>, candidate: ChordId, out: &mut Outbox) {
        let accept = env.ping(candidate)
            && match self.predecessor {
                None => true,
                Some(p) => candidate != self.id && member_of(candidate, p, self.id),
            };
        if !accept || self.predecessor == Some(candidate) {
            return;
        }
        self.predecessor = Some(candidate);
        if candidate == self.id {
            return;
        }
        let moving: Vec<ChordId> = self
            .keyvalue
            .keys()
            .copied()
            .filter(|k| !member_of(*k, candidate, self.id))
            .collect();
        if moving.is_empty() {
            return;
        }
        let pairs = moving
            .into_iter()
            .map(|k| {
                let v = self.keyvalue.remove(&k).expect("key listed above");
                (k, v)
            })
            .collect();
        let corr = self.corr();
        self.send(out, candidate, corr, Payload::TransferKeys { pairs });
    }

    fn expire(&mut self, env: &Env<'_>, out: &mut Outbox) {
        let deadline = env.lookup_deadline();
        let expired: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| match p {
                Pending::Lookup { issued_at, .. } => env.clock > issued_at + deadline,
                Pending::AwaitValue { issued_at, .. } => env.clock > issued_at + 2,
            })
            .map(|(c, _)| *c)
            .collect();
        for corr in expired {
            match self.pending.remove(&corr).expect("listed above") {
                Pending::Lookup { purpose, .. } => {
                    let target = match &purpose {
                        LookupPurpose::Finger(i) => env.ring.finger_target(self.id, *i),
                        LookupPurpose::Put { key, .. } | LookupPurpose::Get { key } => *key,
                    };
                    self.complete_lookup(env, corr, purpose, target, None, 0, out);
                }
                Pending::AwaitValue { key, .. } => out.notes.push(Note::GetFailed {
                    origin: self.id,
                    corr,
                    key,
                }),
            }
        }
    }

    /// Asks the successor for its predecessor. A round left unanswered past its
    /// round-trip time is taken as a hint that the successor is gone; `ping`
    /// confirms before the successor is replaced.
    pub fn stabilize(&mut self, env: &Env<'_>, out: &mut Outbox) {
        if let Some(round) = self.stabilize_round {
            if env.clock < round.issued_at + STABILIZE_ROUND_STEPS {
                return;
            }
            self.stabilize_round = None;
            if !env.ping(self.successor) {
                self.repair_successor(env);
            }
        }
        let corr = self.corr();
        self.stabilize_round = Some(StabilizeRound {
            corr,
            issued_at: env.clock,
        });
        self.send(out, self.successor, corr, Payload::GetPredReq);
    }

    /// Adopts the live finger nearest clockwise, or falls back to self.
    fn repair_successor(&mut self, env: &Env<'_>) {
        let replacement = self
            .finger
            .iter()
            .copied()
            .filter(|f| *f != self.id && env.ping(*f))
            .min_by_key(|f| env.ring.distance(self.id, *f))
            .unwrap_or(self.id);
        self.set_successor(replacement);
    }

    pub fn update_predecessor(&mut self, env: &Env<'_>) {
        if let Some(p) = self.predecessor {
            if !env.ping(p) {
                self.predecessor = None;
            }
        }
    }

    /// Refreshes finger `next`. At most one refresh is in flight.
    pub fn update_fingers(&mut self, env: &Env<'_>, out: &mut Outbox) {
        if self.finger_lookup.is_some() {
            return;
        }
        let index = self.next;
        let target = env.ring.finger_target(self.id, index);
        self.start_lookup(env, LookupPurpose::Finger(index), target, out);
    }

    /// Stores `value` under key identifier `key` at the node responsible for
    /// it. Returns the correlation token of the operation.
    pub fn begin_put(&mut self, env: &Env<'_>, key: ChordId, value: Value, out: &mut Outbox) -> u64 {
        self.start_lookup(env, LookupPurpose::Put { key, value }, key, out)
    }

    pub fn begin_get(&mut self, env: &Env<'_>, key: ChordId, out: &mut Outbox) -> u64 {
        self.start_lookup(env, LookupPurpose::Get { key }, key, out)
    }

    /// Graceful departure: keys to the successor, both neighbours spliced.
    pub fn fair_leave(&mut self, out: &mut Outbox) {
        if self.successor == self.id {
            return;
        }
        let pairs: Vec<(ChordId, Value)> = std::mem::take(&mut self.keyvalue).into_iter().collect();
        if !pairs.is_empty() {
            let corr = self.corr();
            self.send(out, self.successor, corr, Payload::TransferKeys { pairs });
        }
        if let Some(p) = self.predecessor {
            if p != self.id {
                let corr = self.corr();
                self.send(
                    out,
                    p,
                    corr,
                    Payload::LeaveToPred {
                        successor: self.successor,
                    },
                );
            }
        }
        let corr = self.corr();
        self.send(
            out,
            self.successor,
            corr,
            Payload::LeaveToSucc {
                predecessor: self.predecessor,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring3() -> RingConfig {
        RingConfig::new(3).unwrap()
    }

    fn id(v: u64) -> ChordId {
        ring3().id(v).unwrap()
    }

    fn live(ids: &[u64]) -> BTreeSet<ChordId> {
        ids.iter().map(|v| id(*v)).collect()
    }

    fn node(me: u64, succ: u64, pred: Option<u64>) -> NodeState {
        let ring = ring3();
        let mut n = NodeState::joined(&ring, id(me), id(succ), 0);
        n.predecessor = pred.map(id);
        n
    }

    fn deliver(n: &mut NodeState, from: u64, corr: u64, payload: Payload) {
        n.inbox.push_back(Envelope {
            from: id(from),
            to: n.id,
            corr,
            payload,
        });
    }

    #[test]
    fn start_is_its_own_successor() {
        let ring = ring3();
        let n = NodeState::start(&ring, id(1), 0);
        assert_eq!(n.successor, id(1));
        assert_eq!(n.predecessor, None);
        assert_eq!(n.finger, vec![id(1); 3]);
        assert_eq!(n.next, 1);
        n.validate(&ring).unwrap();
    }

    #[test]
    fn notify_sets_empty_predecessor() {
        let ring = ring3();
        let alive = live(&[1, 2, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n2 = node(2, 3, None);
        deliver(&mut n2, 1, 0, Payload::Notify);
        let mut out = Outbox::default();
        n2.read_messages(&env, &mut out);
        assert_eq!(n2.predecessor, Some(id(1)));
        assert!(out.sent.is_empty());
    }

    #[test]
    fn notify_with_closer_candidate_replaces_predecessor() {
        let ring = ring3();
        let alive = live(&[1, 2, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n3 = node(3, 1, Some(1));
        deliver(&mut n3, 2, 0, Payload::Notify);
        let mut out = Outbox::default();
        n3.read_messages(&env, &mut out);
        assert_eq!(n3.predecessor, Some(id(2)));
        // A farther candidate is refused.
        deliver(&mut n3, 1, 1, Payload::Notify);
        n3.read_messages(&env, &mut out);
        assert_eq!(n3.predecessor, Some(id(2)));
    }

    #[test]
    fn notify_hands_over_keys_outside_new_interval() {
        let ring = RingConfig::new(4).unwrap();
        let alive: BTreeSet<ChordId> = [2, 6, 12].iter().map(|v| ring.id(*v).unwrap()).collect();
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let k = |v| ring.id(v).unwrap();
        let mut n12 = NodeState::joined(&ring, k(12), k(2), 0);
        n12.predecessor = Some(k(2));
        for key in [4, 5, 6, 9, 12] {
            n12.keyvalue.insert(k(key), format!("v{key}"));
        }
        n12.inbox.push_back(Envelope { from: k(6), to: k(12), corr: 0, payload: Payload::Notify });
        let mut out = Outbox::default();
        n12.read_messages(&env, &mut out);
        assert_eq!(n12.predecessor, Some(k(6)));
        assert_eq!(n12.keyvalue.keys().copied().collect::<Vec<_>>(), vec![k(9), k(12)]);
        assert_eq!(out.sent.len(), 1);
        let msg = &out.sent[0];
        assert_eq!(msg.to, k(6));
        // Oracle: every moved key's clockwise-first live node is 6.
        let Payload::TransferKeys { pairs } = &msg.payload else { panic!("expected transfer") };
        for (key, _) in pairs {
            let owner = alive
                .iter()
                .copied()
                .min_by_key(|n| ring.distance(*key, *n))
                .unwrap();
            assert_eq!(owner, k(6), "key {key}");
        }
    }

    #[test]
    fn update_predecessor_clears_dead() {
        let ring = ring3();
        let alive = live(&[3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n = node(3, 1, Some(2));
        n.update_predecessor(&env);
        assert_eq!(n.predecessor, None);
        n.update_predecessor(&env);
        assert_eq!(n.predecessor, None);
        let alive = live(&[1, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n = node(3, 1, Some(1));
        n.update_predecessor(&env);
        assert_eq!(n.predecessor, Some(id(1)));
    }

    #[test]
    fn stabilize_round_adopts_closer_successor() {
        let ring = ring3();
        let alive = live(&[1, 2, 3]);
        let mut n1 = node(1, 3, Some(3));
        let mut out = Outbox::default();
        n1.stabilize(&Env { ring: &ring, clock: 0, live: &alive }, &mut out);
        let req = out.sent.pop().unwrap();
        assert_eq!(req.to, id(3));
        assert_eq!(req.payload, Payload::GetPredReq);
        // Mid-round the rule waits.
        n1.stabilize(&Env { ring: &ring, clock: 1, live: &alive }, &mut out);
        assert!(out.sent.is_empty());
        deliver(&mut n1, 3, req.corr, Payload::GetPredResp { predecessor: Some(id(2)) });
        n1.read_messages(&Env { ring: &ring, clock: 2, live: &alive }, &mut out);
        assert_eq!(n1.successor, id(2));
        assert_eq!(n1.finger[0], id(2));
        assert_eq!(out.sent.len(), 1);
        assert_eq!(out.sent[0].to, id(2));
        assert_eq!(out.sent[0].payload, Payload::Notify);
    }

    #[test]
    fn stable_pair_is_a_fixpoint() {
        let ring = ring3();
        let alive = live(&[1, 3]);
        let mut a = node(1, 3, Some(3));
        let mut b = node(3, 1, Some(1));
        let before = (a.clone(), b.clone());
        let mut out = Outbox::default();
        a.stabilize(&Env { ring: &ring, clock: 0, live: &alive }, &mut out);
        let req = out.sent.pop().unwrap();
        b.inbox.push_back(req);
        b.read_messages(&Env { ring: &ring, clock: 1, live: &alive }, &mut out);
        let resp = out.sent.pop().unwrap();
        a.inbox.push_back(resp);
        a.read_messages(&Env { ring: &ring, clock: 2, live: &alive }, &mut out);
        let notify = out.sent.pop().unwrap();
        assert_eq!(notify.payload, Payload::Notify);
        b.inbox.push_back(notify);
        b.read_messages(&Env { ring: &ring, clock: 3, live: &alive }, &mut out);
        assert!(out.sent.is_empty());
        assert_eq!((a.successor, a.predecessor), (before.0.successor, before.0.predecessor));
        assert_eq!((b.successor, b.predecessor), (before.1.successor, before.1.predecessor));
    }

    #[test]
    fn unanswered_round_repairs_from_fingers() {
        let ring = ring3();
        let alive = live(&[1, 3]);
        let mut n1 = node(1, 2, Some(3));
        n1.finger = vec![id(2), id(3), id(5)];
        let mut out = Outbox::default();
        n1.stabilize(&Env { ring: &ring, clock: 0, live: &alive }, &mut out);
        out.sent.clear();
        n1.stabilize(&Env { ring: &ring, clock: 2, live: &alive }, &mut out);
        assert_eq!(n1.successor, id(3));
        assert_eq!(out.sent[0].to, id(3));
    }

    #[test]
    fn repair_without_live_fingers_falls_back_to_self() {
        let ring = ring3();
        let alive = live(&[2]);
        let mut n2 = node(2, 3, None);
        let mut out = Outbox::default();
        n2.stabilize(&Env { ring: &ring, clock: 0, live: &alive }, &mut out);
        n2.stabilize(&Env { ring: &ring, clock: 2, live: &alive }, &mut out);
        assert_eq!(n2.successor, id(2));
    }

    #[test]
    fn finger_refresh_cycles_next() {
        let ring = ring3();
        let alive = live(&[1]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n = NodeState::start(&ring, id(1), 0);
        let mut out = Outbox::default();
        let mut seen = Vec::new();
        for _ in 0..4 {
            seen.push(n.next);
            n.update_fingers(&env, &mut out);
        }
        assert_eq!(seen, vec![1, 2, 3, 1]);
        assert!(out.sent.is_empty());
        assert_eq!(n.finger, vec![id(1); 3]);
    }

    #[test]
    fn finger_refresh_on_stable_ring() {
        // Ring {1,3,5}: node 1 refreshing finger 2 targets 3.
        let ring = ring3();
        let alive = live(&[1, 3, 5]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n1 = node(1, 3, Some(5));
        n1.finger = vec![id(3), id(0), id(0)];
        n1.next = 2;
        let mut out = Outbox::default();
        n1.update_fingers(&env, &mut out);
        // Target 3 is inside (1, 3], resolved locally.
        assert_eq!(n1.finger[1], id(3));
        assert_eq!(n1.next, 3);
        let oracle = alive.iter().copied().min_by_key(|n| ring.distance(id(3), *n)).unwrap();
        assert_eq!(n1.finger[1], oracle);
    }

    #[test]
    fn find_successor_forwards_to_closest_preceding_finger() {
        let ring = ring3();
        let alive = live(&[0, 2, 4, 6]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n0 = node(0, 2, Some(6));
        n0.finger = vec![id(2), id(2), id(4)];
        assert_eq!(n0.route(&env, id(1)), Route::Resolved(id(2)));
        assert_eq!(n0.route(&env, id(5)), Route::Forward(id(4)));
        assert_eq!(n0.route(&env, id(4)), Route::Forward(id(2)));
        // Dead fingers are skipped.
        let alive = live(&[0, 2, 6]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        assert_eq!(n0.route(&env, id(5)), Route::Forward(id(2)));
    }

    #[test]
    fn hop_budget_turns_into_timeout_reply() {
        let ring = ring3();
        let alive = live(&[1, 3, 5]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n3 = node(3, 5, Some(1));
        deliver(
            &mut n3,
            1,
            9,
            Payload::FindSuccReq { target: id(7), origin: id(1), hops: env.hop_budget() },
        );
        let mut out = Outbox::default();
        n3.read_messages(&env, &mut out);
        assert_eq!(out.sent.len(), 1);
        assert_eq!(out.sent[0].to, id(1));
        assert!(matches!(out.sent[0].payload, Payload::FindSuccResp { successor: None, .. }));
    }

    #[test]
    fn put_resolved_locally_goes_to_successor() {
        // Node 1 that only knows ring {1,3} sends key 2 to node 3.
        let ring = ring3();
        let alive = live(&[1, 2, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n1 = node(1, 3, Some(3));
        let mut out = Outbox::default();
        n1.begin_put(&env, id(2), "v".into(), &mut out);
        assert_eq!(out.sent.len(), 1);
        assert_eq!(out.sent[0].to, id(3));
        assert_eq!(out.sent[0].payload, Payload::StoreKey { key: id(2), value: "v".into() });
        assert!(!n1.has_open_put());
    }

    #[test]
    fn store_overwrites_existing_key() {
        let ring = ring3();
        let alive = live(&[1, 2]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n2 = node(2, 1, Some(1));
        deliver(&mut n2, 1, 0, Payload::StoreKey { key: id(2), value: "v1".into() });
        deliver(&mut n2, 1, 1, Payload::StoreKey { key: id(2), value: "v2".into() });
        let mut out = Outbox::default();
        n2.read_messages(&env, &mut out);
        assert_eq!(n2.keyvalue.len(), 1);
        assert_eq!(n2.keyvalue[&id(2)], "v2");
    }

    #[test]
    fn get_answer_is_read_only_and_guarded() {
        let ring = ring3();
        let alive = live(&[1, 2, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n3 = node(3, 1, Some(2));
        n3.keyvalue.insert(id(2), "v".into());
        n3.keyvalue.insert(id(3), "w".into());
        deliver(&mut n3, 1, 4, Payload::GetKeyReq { key: id(2) });
        deliver(&mut n3, 1, 5, Payload::GetKeyReq { key: id(3) });
        let mut before = n3.clone();
        let mut out = Outbox::default();
        n3.read_messages(&env, &mut out);
        before.inbox.clear();
        assert_eq!(n3, before);
        // Key 2 sits outside (2, 3], so it is not reported.
        assert_eq!(
            out.sent[0].payload,
            Payload::GetKeyResp { key: id(2), value: None }
        );
        assert_eq!(
            out.sent[1].payload,
            Payload::GetKeyResp { key: id(3), value: Some("w".into()) }
        );
    }

    #[test]
    fn inbox_is_drained_in_order() {
        let ring = ring3();
        let alive = live(&[1, 2, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n2 = node(2, 3, None);
        deliver(&mut n2, 1, 0, Payload::Notify);
        deliver(&mut n2, 1, 1, Payload::StoreKey { key: id(2), value: "v".into() });
        let mut out = Outbox::default();
        n2.read_messages(&env, &mut out);
        assert_eq!(n2.predecessor, Some(id(1)));
        assert_eq!(n2.keyvalue[&id(2)], "v");
        assert!(n2.inbox.is_empty());
        // Empty inbox: nothing happens.
        let before = n2.clone();
        n2.read_messages(&env, &mut out);
        assert_eq!(n2, before);
    }

    #[test]
    fn stale_responses_are_ignored() {
        let ring = ring3();
        let alive = live(&[1, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n1 = node(1, 3, Some(3));
        deliver(&mut n1, 3, 77, Payload::GetPredResp { predecessor: Some(id(2)) });
        let mut out = Outbox::default();
        n1.read_messages(&env, &mut out);
        assert_eq!(n1.successor, id(3));
        assert!(matches!(out.notes[0], Note::Ignored { .. }));
    }

    #[test]
    fn fair_leave_messages() {
        let mut n2 = node(2, 3, Some(1));
        n2.keyvalue.insert(id(2), "v".into());
        let mut out = Outbox::default();
        n2.fair_leave(&mut out);
        let kinds: Vec<_> = out.sent.iter().map(|m| (m.to, m.kind())).collect();
        assert_eq!(
            kinds,
            vec![
                (id(3), MessageKind::TransferKeys),
                (id(1), MessageKind::LeaveToPred),
                (id(3), MessageKind::LeaveToSucc),
            ]
        );
        assert!(n2.keyvalue.is_empty());
        // Alone on the ring: nobody to tell.
        let ring = ring3();
        let mut solo = NodeState::start(&ring, id(4), 0);
        let mut out = Outbox::default();
        solo.fair_leave(&mut out);
        assert!(out.sent.is_empty());
    }

    #[test]
    fn leave_splice_handlers() {
        let ring = ring3();
        let alive = live(&[1, 3]);
        let env = Env { ring: &ring, clock: 0, live: &alive };
        let mut n1 = node(1, 2, Some(3));
        deliver(&mut n1, 2, 0, Payload::LeaveToPred { successor: id(3) });
        let mut n3 = node(3, 1, Some(2));
        deliver(&mut n3, 2, 1, Payload::LeaveToSucc { predecessor: Some(id(1)) });
        let mut out = Outbox::default();
        n1.read_messages(&env, &mut out);
        n3.read_messages(&env, &mut out);
        assert_eq!(n1.successor, id(3));
        assert_eq!(n1.finger[0], id(3));
        assert_eq!(n3.predecessor, Some(id(1)));
    }

    #[test]
    fn lookups_expire() {
        let ring = ring3();
        let alive = live(&[1, 2, 5]);
        let mut n1 = node(1, 2, Some(5));
        let mut out = Outbox::default();
        n1.next = 3;
        let env = Env { ring: &ring, clock: 0, live: &alive };
        n1.update_fingers(&env, &mut out);
        assert_eq!(out.sent.len(), 1);
        let late = Env { ring: &ring, clock: env.lookup_deadline() + 1, live: &alive };
        n1.read_messages(&late, &mut out);
        assert!(out.notes.iter().any(|n| matches!(n, Note::LookupTimedOut { .. })));
        assert_eq!(n1.next, 3);
        // A fresh refresh may now be issued.
        out.sent.clear();
        n1.update_fingers(&late, &mut out);
        assert_eq!(out.sent.len(), 1);
    }
}
