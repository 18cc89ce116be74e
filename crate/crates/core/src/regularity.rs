//! Stability predicates over world snapshots and the run checkers built on
//! them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::node::fmt_opt;
use crate::ring::{member_of, ChordId};
use crate::sim::{OpStatus, Rule, World};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Witness {
    /// `successor(y_i) != y_{i+1}` or `predecessor(y_{i+1}) != y_i`.
    Chain {
        index: usize,
        node: ChordId,
        detail: String,
    },
    /// A node outside the chain whose successor pointer skips into it.
    ForeignPointer { node: ChordId, successor: ChordId },
    /// A peer is still looking up its successor inside the interval.
    PendingJoiner { id: ChordId },
    NotConnected { node: ChordId },
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Witness::Chain { index, node, detail } => write!(f, "chain[{index}] at {node}: {detail}"),
            Witness::ForeignPointer { node, successor } => {
                write!(f, "node {node} outside the pair has successor {successor}")
            }
            Witness::PendingJoiner { id } => write!(f, "joiner {id} pending"),
            Witness::NotConnected { node } => write!(f, "node {node} not connected"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StabilityReport {
    pub pair: (ChordId, ChordId),
    pub stable: bool,
    pub witness: Option<Witness>,
}

impl StabilityReport {
    fn ok(pair: (ChordId, ChordId)) -> Self {
        Self {
            pair,
            stable: true,
            witness: None,
        }
    }

    fn fail(pair: (ChordId, ChordId), witness: Witness) -> Self {
        Self {
            pair,
            stable: false,
            witness: Some(witness),
        }
    }
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pair <{},{}> ", self.pair.0, self.pair.1)?;
        match &self.witness {
            None => write!(f, "stable"),
            Some(w) => write!(f, "unstable: {w}"),
        }
    }
}

/// Connected nodes clockwise from `x1` to `x2` inclusive; a full lap ending
/// back at `x1` when the two are equal.
fn chain(world: &World, x1: ChordId, x2: ChordId) -> Vec<ChordId> {
    let live = world.live();
    let mut ys = vec![x1];
    let after = live.range(x1..).skip(1).chain(live.range(..x1));
    for &y in after {
        ys.push(y);
        if y == x2 {
            return ys;
        }
    }
    ys.push(x1);
    ys
}

pub fn is_stable_pair(world: &World, x1: ChordId, x2: ChordId) -> StabilityReport {
    let pair = (x1, x2);
    for x in [x1, x2] {
        if !world.ping(x) {
            return StabilityReport::fail(pair, Witness::NotConnected { node: x });
        }
    }
    let ys = chain(world, x1, x2);
    if ys.len() == 2 && ys[0] == ys[1] {
        let n = world.node(x1).expect("live");
        if n.successor != x1 || n.predecessor.is_some_and(|p| p != x1) {
            return StabilityReport::fail(
                pair,
                Witness::Chain {
                    index: 0,
                    node: x1,
                    detail: format!("succ={} pred={}", n.successor, fmt_opt(n.predecessor)),
                },
            );
        }
    } else {
        for (i, w) in ys.windows(2).enumerate() {
            let (a, b) = (world.node(w[0]).expect("live"), world.node(w[1]).expect("live"));
            if a.successor != b.id {
                return StabilityReport::fail(
                    pair,
                    Witness::Chain {
                        index: i,
                        node: a.id,
                        detail: format!("succ={} expected {}", a.successor, b.id),
                    },
                );
            }
            if b.predecessor != Some(a.id) {
                return StabilityReport::fail(
                    pair,
                    Witness::Chain {
                        index: i,
                        node: b.id,
                        detail: format!("pred={} expected {}", fmt_opt(b.predecessor), a.id),
                    },
                );
            }
        }
    }
    let inside: BTreeSet<ChordId> = ys.iter().copied().collect();
    for n in world.nodes().values() {
        if inside.contains(&n.id) {
            continue;
        }
        if ys[1..].iter().any(|y| member_of(*y, n.id, n.successor)) {
            return StabilityReport::fail(
                pair,
                Witness::ForeignPointer {
                    node: n.id,
                    successor: n.successor,
                },
            );
        }
    }
    for j in world.pending_joiners() {
        let within = x1 == x2 || (member_of(j, x1, x2) && j != x2);
        if within {
            return StabilityReport::fail(pair, Witness::PendingJoiner { id: j });
        }
    }
    StabilityReport::ok(pair)
}

/// The pair of the minimal connected id with itself. An empty network counts
/// as stable.
pub fn is_stable_network(world: &World) -> StabilityReport {
    match world.live().iter().next() {
        Some(&x0) => is_stable_pair(world, x0, x0),
        None => {
            let zero = world.config().id(0).expect("0 is on every ring");
            StabilityReport::ok((zero, zero))
        }
    }
}

fn prev_live(world: &World, x: ChordId) -> ChordId {
    let live = world.live();
    live.range(..x)
        .next_back()
        .or_else(|| live.iter().next_back())
        .copied()
        .expect("non-empty")
}

fn next_live(world: &World, x: ChordId) -> ChordId {
    let live = world.live();
    live.range(x..)
        .nth(1)
        .or_else(|| live.iter().next())
        .copied()
        .expect("non-empty")
}

/// Gate for a put of key id `h`: the pair ending at the node responsible for
/// `h`.
pub fn gate_put(world: &World, h: ChordId) -> StabilityReport {
    match world.oracle_successor(h) {
        Some(b) => is_stable_pair(world, prev_live(world, b), b),
        None => StabilityReport::fail((h, h), Witness::NotConnected { node: h }),
    }
}

/// Gate for `x` leaving: the pair of its neighbours.
///
/// A crash also needs the whole ring stable. Repair after a crash only has
/// fingers and the predecessor pointer to work with, and a survivor whose
/// pointers all name the crashed node can never rejoin.
pub fn gate_leave(world: &World, x: ChordId, crash: bool) -> StabilityReport {
    if !world.ping(x) {
        return StabilityReport::fail((x, x), Witness::NotConnected { node: x });
    }
    if world.live().len() == 1 {
        return is_stable_pair(world, x, x);
    }
    let pair = is_stable_pair(world, prev_live(world, x), next_live(world, x));
    if crash && pair.stable {
        let ring = is_stable_network(world);
        if !ring.stable {
            return ring;
        }
    }
    pair
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    GoldenRule,
    GetUnsound,
    Stranded,
    GateBreach,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationReport {
    pub step: u64,
    pub kind: ViolationKind,
    pub node: Option<ChordId>,
    pub key: Option<ChordId>,
    pub detail: String,
    /// Serialized rows of the nodes involved.
    pub state_digest: String,
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} kind={} node={} key={} detail={}",
            self.step,
            self.kind,
            self.node.map_or_else(|| "-".into(), |n| n.to_string()),
            self.key.map_or_else(|| "-".into(), |k| k.to_string()),
            self.detail
        )
    }
}

/// Step index of the state the world is in: the last completed step.
fn state_step(world: &World) -> u64 {
    world.clock().saturating_sub(1)
}

fn digest(world: &World, id: ChordId) -> String {
    match world.node(id) {
        Some(n) => format!(
            "id={} pred={} succ={} keys={:?}",
            n.id,
            fmt_opt(n.predecessor),
            n.successor,
            n.keyvalue.keys().map(|k| k.value()).collect::<Vec<_>>()
        ),
        None => format!("id={id} absent"),
    }
}

fn report(world: &World, kind: ViolationKind, node: Option<ChordId>, key: Option<ChordId>, detail: String) -> ViolationReport {
    ViolationReport {
        step: state_step(world),
        kind,
        node,
        key,
        detail,
        state_digest: node.map(|n| digest(world, n)).unwrap_or_default(),
    }
}

/// Every stored pair must lie in `(predecessor, id]` of its holder.
pub fn check_golden_rule(world: &World) -> Vec<ViolationReport> {
    let mut out = Vec::new();
    for n in world.nodes().values() {
        match n.predecessor {
            Some(p) => {
                for &h in n.keyvalue.keys() {
                    if !member_of(h, p, n.id) {
                        out.push(report(
                            world,
                            ViolationKind::GoldenRule,
                            Some(n.id),
                            Some(h),
                            format!("key {h} outside ({p},{}]", n.id),
                        ));
                    }
                }
            }
            None if !n.keyvalue.is_empty() => out.push(report(
                world,
                ViolationKind::GoldenRule,
                Some(n.id),
                None,
                format!("indeterminate: predecessor undef with {} keys", n.keyvalue.len()),
            )),
            None => {}
        }
    }
    out
}

/// An undef answer for key id `h` is sound iff no node holds `h`.
pub fn check_get_soundness(world: &World, h: ChordId, answer: Option<&str>) -> Result<(), ViolationReport> {
    if answer.is_some() {
        return Ok(());
    }
    match world.nodes().values().find(|n| n.keyvalue.contains_key(&h)) {
        None => Ok(()),
        Some(holder) => Err(report(
            world,
            ViolationKind::GetUnsound,
            Some(holder.id),
            Some(h),
            format!("get returned undef while node {} holds the key", holder.id),
        )),
    }
}

/// Soundness of every completed get, judged against the holders recorded at
/// the moment each undef answer was produced.
pub fn check_recorded_gets(world: &World) -> Vec<ViolationReport> {
    recorded_gets(world, false)
}

/// [`check_recorded_gets`] restricted to gets issued into a quiescent
/// network.
pub fn check_settled_gets(world: &World) -> Vec<ViolationReport> {
    recorded_gets(world, true)
}

fn recorded_gets(world: &World, settled_only: bool) -> Vec<ViolationReport> {
    let mut out = Vec::new();
    for (op, rec) in world.gets() {
        if settled_only && !rec.issued_settled {
            continue;
        }
        if let OpStatus::Answered { value: None, step } = rec.status {
            if let Some(holder) = rec.holders_at_answer.first() {
                out.push(ViolationReport {
                    step,
                    kind: ViolationKind::GetUnsound,
                    node: Some(*holder),
                    key: rec.key_id,
                    detail: format!(
                        "get op={op} from {} answered undef by {} while {holder} held the key",
                        rec.node,
                        fmt_opt(rec.responder)
                    ),
                    state_digest: String::new(),
                });
            }
        }
    }
    out
}

/// A node nobody points at whose own successor leads nowhere.
pub fn check_stranded(world: &World) -> Vec<ViolationReport> {
    let mut out = Vec::new();
    if world.live().len() < 2 {
        return out;
    }
    for z in world.nodes().values() {
        let referenced = world.nodes().values().any(|n| {
            n.id != z.id && (n.successor == z.id || n.predecessor == Some(z.id) || n.finger.contains(&z.id))
        });
        let reaches_out = z.successor != z.id && world.ping(z.successor);
        if !referenced && !reaches_out {
            out.push(report(
                world,
                ViolationKind::Stranded,
                Some(z.id),
                None,
                if z.successor == z.id {
                    "successor points to itself and no inbound pointers".to_string()
                } else {
                    format!("successor {} unreachable and no inbound pointers", z.successor)
                },
            ));
        }
    }
    out
}

/// Gated events that fired while their enclosing pair was unstable.
pub fn check_gate_log(world: &World) -> Vec<ViolationReport> {
    world
        .gate_log()
        .iter()
        .filter(|g| !g.report.stable)
        .map(|g| ViolationReport {
            step: g.step,
            kind: ViolationKind::GateBreach,
            node: Some(g.report.pair.0),
            key: None,
            detail: format!("`{}` applied with {}", g.injection, g.report),
            state_digest: String::new(),
        })
        .collect()
}

/// One enabled periodic rule at one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub node: ChordId,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Linearization {
    Equal,
    Differ { ab: String, ba: String },
    /// The moves touch a common receiver or the same node.
    NotIndependent,
}

fn bus_load(world: &World) -> BTreeMap<ChordId, usize> {
    let mut load = BTreeMap::new();
    for m in world.in_flight() {
        *load.entry(m.to).or_insert(0) += 1;
    }
    load
}

/// Receivers of the messages a move would send.
fn receivers_of(world: &World, mv: Move) -> Result<BTreeSet<ChordId>, String> {
    let before = bus_load(world);
    let mut w = world.clone();
    w.fire(mv.node, mv.rule).map_err(|e| e.to_string())?;
    Ok(bus_load(&w)
        .into_iter()
        .filter(|(to, n)| before.get(to).copied().unwrap_or(0) < *n)
        .map(|(to, _)| to)
        .collect())
}

/// Applies two moves at distinct nodes in both orders and compares the
/// resulting serializations.
pub fn check_linearization_independence(world: &World, a: Move, b: Move) -> Result<Linearization, String> {
    if a.node == b.node {
        return Ok(Linearization::NotIndependent);
    }
    let ra = receivers_of(world, a)?;
    let rb = receivers_of(world, b)?;
    if !ra.is_disjoint(&rb) {
        return Ok(Linearization::NotIndependent);
    }
    let mut ab = world.clone();
    ab.fire(a.node, a.rule).map_err(|e| e.to_string())?;
    ab.fire(b.node, b.rule).map_err(|e| e.to_string())?;
    let mut ba = world.clone();
    ba.fire(b.node, b.rule).map_err(|e| e.to_string())?;
    ba.fire(a.node, a.rule).map_err(|e| e.to_string())?;
    let (sa, sb) = (ab.serialize(), ba.serialize());
    Ok(if sa == sb {
        Linearization::Equal
    } else {
        Linearization::Differ { ab: sa, ba: sb }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::{HashPolicy, RingConfig};
    use crate::sim::{Injection, Mode};

    fn cid(w: &World, v: u64) -> ChordId {
        w.config().id(v).unwrap()
    }

    fn ring_of(ids: &[u64], m: u32) -> World {
        let mut w = World::new(RingConfig::new(m).unwrap(), Mode::Regular, 1);
        for (i, id) in ids.iter().enumerate() {
            let policy = HashPolicy::Explicit(cid(&w, *id));
            let inj = if i == 0 {
                Injection::Start { peer: format!("P{id}"), policy }
            } else {
                Injection::Join {
                    peer: format!("P{id}"),
                    policy,
                    via: Some(cid(&w, ids[0])),
                }
            };
            w.step(vec![inj]);
            w.quiesce(w.default_budget()).unwrap();
        }
        w
    }

    /// Direct pointer walk: every node's successor is the next live id and
    /// every predecessor the previous one.
    fn walk_oracle(w: &World) -> bool {
        let live: Vec<ChordId> = w.live().iter().copied().collect();
        (0..live.len()).all(|i| {
            let a = w.node(live[i]).unwrap();
            let b = w.node(live[(i + 1) % live.len()]).unwrap();
            a.successor == b.id && (b.predecessor == Some(a.id) || (live.len() == 1 && b.predecessor.is_none()))
        })
    }

    #[test]
    fn converged_ring_is_stable() {
        let w = ring_of(&[1, 2, 3], 3);
        assert!(walk_oracle(&w));
        assert!(is_stable_network(&w).stable);
        assert!(is_stable_pair(&w, cid(&w, 1), cid(&w, 3)).stable);
        assert!(is_stable_pair(&w, cid(&w, 3), cid(&w, 2)).stable);
    }

    #[test]
    fn single_node_network_is_stable() {
        let w = ring_of(&[5], 3);
        let r = is_stable_network(&w);
        assert!(r.stable && r.witness.is_none());
    }

    #[test]
    fn fresh_joiner_breaks_stability_with_witness() {
        let mut w = ring_of(&[1, 3], 3);
        let policy = HashPolicy::Explicit(cid(&w, 2));
        w.step(vec![Injection::Join { peer: "P2".into(), policy, via: Some(cid(&w, 1)) }]);
        let r = is_stable_pair(&w, cid(&w, 1), cid(&w, 3));
        assert_eq!(r.witness, Some(Witness::PendingJoiner { id: cid(&w, 2) }));
        w.step(vec![]);
        w.step(vec![]);
        // Connected but unknown: node 1 still points at 3.
        let r = is_stable_pair(&w, cid(&w, 1), cid(&w, 3));
        assert!(!r.stable);
        assert!(matches!(r.witness, Some(Witness::Chain { index: 0, node, .. }) if node == cid(&w, 1)));
        assert!(!is_stable_network(&w).stable);
        // Untouched pairs elsewhere stay stable.
        assert!(is_stable_pair(&w, cid(&w, 3), cid(&w, 1)).stable);
    }

    #[test]
    fn stability_survives_serialization_roundtrip_by_clone() {
        let w = ring_of(&[1, 4, 6], 3);
        let copy = w.clone();
        assert_eq!(w.serialize(), copy.serialize());
        for a in w.live() {
            for b in w.live() {
                assert_eq!(is_stable_pair(&w, *a, *b), is_stable_pair(&copy, *a, *b));
            }
        }
    }

    #[test]
    fn golden_rule_on_empty_tables() {
        let w = ring_of(&[1, 2, 3], 3);
        assert!(check_golden_rule(&w).is_empty());
        assert!(check_stranded(&w).is_empty());
    }

    #[test]
    fn get_soundness_scan() {
        let w = ring_of(&[1, 2, 3], 3);
        assert!(check_get_soundness(&w, cid(&w, 4), None).is_ok());
    }

    #[test]
    fn violation_line_format() {
        let r = ViolationReport {
            step: 7,
            kind: ViolationKind::GoldenRule,
            node: None,
            key: None,
            detail: "x".into(),
            state_digest: String::new(),
        };
        assert_eq!(r.to_string(), "step=7 kind=GoldenRule node=- key=- detail=x");
    }

    #[test]
    fn disjoint_moves_commute() {
        let mut w = ring_of(&[1, 3, 5, 7], 4);
        w.deliver();
        let r = check_linearization_independence(
            &w,
            Move { node: cid(&w, 1), rule: Rule::Stabilize },
            Move { node: cid(&w, 5), rule: Rule::UpdateFingers },
        )
        .unwrap();
        assert!(matches!(r, Linearization::Equal | Linearization::NotIndependent));
        let r = check_linearization_independence(
            &w,
            Move { node: cid(&w, 3), rule: Rule::ReadMessages },
            Move { node: cid(&w, 7), rule: Rule::ReadMessages },
        )
        .unwrap();
        assert!(matches!(r, Linearization::Equal | Linearization::NotIndependent));
    }
}
