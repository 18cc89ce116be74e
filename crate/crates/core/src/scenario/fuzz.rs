//! Seeded random schedules with the full check suite at every quiescent
//! point.
//!
//! The schedule is generated against the live world, so every generated
//! event is well-formed when it is issued. The events are recorded as a
//! scenario with explicit ids; running that scenario reproduces the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::run::injection_for;
use super::trace::{TraceHeader, TraceWriter};
use super::{Action, AssertKind, Expect, Scenario, ScenarioEvent};
use crate::regularity::{self, Linearization, Move, ViolationReport};
use crate::ring::{ChordId, RingConfig};
use crate::sim::{Injection, KeyFate, Mode, OpId, OpStatus, Outcome, Rule, StepOutcome, World};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzConfig {
    /// Upper bound on concurrently connected nodes.
    pub nodes: usize,
    pub events: usize,
    pub seed: u64,
    pub mode: Mode,
    pub ring_bits: u32,
    /// Independent move pairs to sample for the swap test.
    pub swap_samples: usize,
    pub trace: bool,
}

impl FuzzConfig {
    pub fn new(nodes: usize, events: usize, seed: u64, mode: Mode) -> Self {
        Self {
            nodes,
            events,
            seed,
            mode,
            ring_bits: 4,
            swap_samples: 0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwapTally {
    pub sampled: u64,
    pub equal: u64,
    pub differ: Vec<String>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupTally {
    pub checked: u64,
    pub mismatches: u64,
    pub timeouts: u64,
    pub max_hops: u32,
    pub over_budget: u64,
}

#[derive(Debug, Clone)]
pub struct FuzzReport {
    pub config: FuzzConfig,
    pub scenario: Scenario,
    pub violations: Vec<ViolationReport>,
    pub checkpoints: u64,
    /// Rounds used by every quiesce, in order.
    pub rounds: Vec<u64>,
    /// Rounds of the settling quiesce after the last event.
    pub final_rounds: Option<u64>,
    pub final_budget: u64,
    pub final_stable: bool,
    pub not_converged: u64,
    pub lookups: LookupTally,
    pub gets_checked: u64,
    pub get_mismatches: Vec<String>,
    /// Unsound undef answers to gets issued mid-transition. Not violations.
    pub transient_unsound: u64,
    pub swaps: SwapTally,
    pub rejected: Vec<String>,
    pub max_nodes_seen: usize,
    pub final_world: String,
    pub trace: Option<String>,
}

impl FuzzReport {
    pub fn max_rounds(&self) -> u64 {
        self.rounds.iter().copied().max().unwrap_or(0)
    }

    /// No violation of any kind and every check passed.
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
            && self.not_converged == 0
            && self.get_mismatches.is_empty()
            && self.lookups.mismatches == 0
            && self.lookups.timeouts == 0
            && self.lookups.over_budget == 0
            && self.swaps.differ.is_empty()
            && self.swaps.errors.is_empty()
            && self.rejected.is_empty()
    }

    pub fn render(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "fuzz seed={} mode={} nodes={} events={} ring_bits={}",
            c.seed, c.mode, c.nodes, c.events, c.ring_bits
        );
        let _ = writeln!(
            s,
            "checkpoints={} not_converged={} max_rounds={} final_rounds={} final_budget={} final_stable={} max_nodes={}",
            self.checkpoints,
            self.not_converged,
            self.max_rounds(),
            self.final_rounds.map_or_else(|| "none".into(), |r| r.to_string()),
            self.final_budget,
            self.final_stable,
            self.max_nodes_seen
        );
        let l = &self.lookups;
        let _ = writeln!(
            s,
            "lookups checked={} mismatches={} timeouts={} max_hops={} over_budget={}",
            l.checked, l.mismatches, l.timeouts, l.max_hops, l.over_budget
        );
        let _ = writeln!(
            s,
            "gets checked={} mismatches={} transient_unsound={}",
            self.gets_checked,
            self.get_mismatches.len(),
            self.transient_unsound
        );
        for g in &self.get_mismatches {
            let _ = writeln!(s, "  {g}");
        }
        let _ = writeln!(
            s,
            "swaps sampled={} equal={} differ={} errors={}",
            self.swaps.sampled,
            self.swaps.equal,
            self.swaps.differ.len(),
            self.swaps.errors.len()
        );
        for r in &self.rejected {
            let _ = writeln!(s, "rejected {r}");
        }
        let _ = writeln!(s, "violations={}", self.violations.len());
        for v in &self.violations {
            let _ = writeln!(s, "{v}");
        }
        s.push_str("scenario:\n");
        for line in self.scenario.render().lines() {
            let _ = writeln!(s, "#| {line}");
        }
        s
    }
}

struct Fuzzer {
    cfg: FuzzConfig,
    world: World,
    rng: ChaCha8Rng,
    swap_rng: ChaCha8Rng,
    scenario: Scenario,
    writer: Option<TraceWriter>,
    key_hashes: BTreeMap<String, ChordId>,
    reported: BTreeSet<String>,
    report: FuzzReport,
}

impl Fuzzer {
    fn new(cfg: FuzzConfig) -> Self {
        let config = RingConfig::new(cfg.ring_bits).expect("valid ring_bits");
        let scenario = Scenario {
            ring_bits: Some(cfg.ring_bits),
            events: Vec::new(),
        };
        let writer = cfg.trace.then(|| {
            TraceWriter::new(
                &TraceHeader {
                    mode: cfg.mode,
                    seed: cfg.seed,
                    max_steps: u64::MAX,
                    verbose: false,
                },
                &Scenario {
                    ring_bits: Some(cfg.ring_bits),
                    events: Vec::new(),
                },
            )
        });
        Self {
            world: World::new(config, cfg.mode, cfg.seed),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            swap_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a4d),
            scenario,
            writer,
            key_hashes: BTreeMap::new(),
            reported: BTreeSet::new(),
            report: FuzzReport {
                config: cfg.clone(),
                scenario: Scenario::default(),
                violations: Vec::new(),
                checkpoints: 0,
                rounds: Vec::new(),
                final_rounds: None,
                final_budget: 0,
                final_stable: false,
                not_converged: 0,
                lookups: LookupTally::default(),
                gets_checked: 0,
                get_mismatches: Vec::new(),
                transient_unsound: 0,
                swaps: SwapTally::default(),
                rejected: Vec::new(),
                max_nodes_seen: 0,
                final_world: String::new(),
                trace: None,
            },
            cfg,
        }
    }

    fn record(&mut self, at: u64, action: Action) {
        self.scenario.events.push(ScenarioEvent { at, action });
    }

    fn observe(&mut self, out: &StepOutcome) {
        if let Some(w) = self.writer.as_mut() {
            w.record_step(&self.world, out);
        }
        for ev in &out.events {
            if let Outcome::Rejected(e) = &ev.outcome {
                self.report.rejected.push(format!("step {}: `{}`: {e}", out.step, ev.injection));
            }
        }
        self.report.max_nodes_seen = self.report.max_nodes_seen.max(self.world.live().len());
    }

    fn step(&mut self, batch: Vec<(Action, Injection)>) -> StepOutcome {
        let at = self.world.clock();
        let mut injections = Vec::new();
        for (action, inj) in batch {
            self.record(at, action);
            injections.push(inj);
        }
        let out = self.world.step(injections);
        self.observe(&out);
        out
    }

    fn inject(&mut self, action: Action) -> StepOutcome {
        let inj = injection_for(&action).expect("injected action");
        self.step(vec![(action, inj)])
    }

    fn idle(&mut self) {
        let out = self.world.step(Vec::new());
        self.observe(&out);
        self.maybe_swap();
    }

    fn quiesce(&mut self, budget: u64) -> Option<u64> {
        let at = self.world.clock().saturating_sub(1);
        self.record(at, Action::Quiesce { budget: Some(budget) });
        let mut writer = self.writer.take();
        let mut rejected = Vec::new();
        let result = self.world.quiesce_with(budget, |w, o| {
            if let Some(tw) = writer.as_mut() {
                tw.record_step(w, o);
            }
            for ev in &o.events {
                if let Outcome::Rejected(e) = &ev.outcome {
                    rejected.push(format!("step {}: `{}`: {e}", o.step, ev.injection));
                }
            }
        });
        self.writer = writer;
        self.report.rejected.extend(rejected);
        self.report.max_nodes_seen = self.report.max_nodes_seen.max(self.world.live().len());
        match result {
            Ok(r) => {
                self.report.rounds.push(r);
                Some(r)
            }
            Err(e) => {
                self.report.rounds.push(e.rounds);
                self.report.not_converged += 1;
                None
            }
        }
    }

    fn push_violations(&mut self, found: Vec<ViolationReport>) {
        for v in found {
            // The same standing fault is reported once.
            let key = format!("{}|{:?}|{:?}|{}", v.kind, v.node, v.key, v.detail);
            if self.reported.insert(key) {
                self.report.violations.push(v);
            }
        }
    }

    /// Doomed nodes are targets of a leave still waiting in the queue.
    fn doomed(&self) -> BTreeSet<ChordId> {
        self.world
            .deferred()
            .filter_map(|inj| match inj {
                Injection::FairLeave { node } | Injection::UnfairLeave { node } => Some(*node),
                _ => None,
            })
            .collect()
    }

    fn usable_nodes(&self) -> Vec<ChordId> {
        let doomed = self.doomed();
        self.world.live().iter().copied().filter(|n| !doomed.contains(n)).collect()
    }

    fn claimed_ids(&self) -> BTreeSet<ChordId> {
        let mut ids: BTreeSet<ChordId> = self.world.live().clone();
        ids.extend(self.world.pending_joiners());
        for inj in self.world.deferred() {
            if let Injection::Join {
                policy: crate::ring::HashPolicy::Explicit(id),
                ..
            } = inj
            {
                ids.insert(*id);
            }
        }
        ids
    }

    fn busy_peers(&self) -> BTreeSet<String> {
        let mut peers: BTreeSet<String> = self
            .world
            .peers()
            .filter(|(_, m)| *m != crate::sim::PeerMode::NotConnected)
            .map(|(p, _)| p.to_string())
            .collect();
        for id in self.world.pending_joiners() {
            if let Some(p) = self.world.hash_assignment().owner(crate::ring::Sort::Peer, id) {
                peers.insert(p.to_string());
            }
        }
        for inj in self.world.deferred() {
            if let Injection::Join { peer, .. } = inj {
                peers.insert(peer.clone());
            }
        }
        peers
    }

    fn pending_joins(&self) -> usize {
        self.world.pending_joiners().count()
            + self
                .world
                .deferred()
                .filter(|i| matches!(i, Injection::Join { .. }))
                .count()
    }

    fn key_name(&mut self) -> (String, ChordId) {
        let n = self.world.config().n_slots();
        let i = self.rng.gen_range(0..n);
        let name = format!("K{i}");
        if let Some(h) = self.key_hashes.get(&name) {
            return (name, *h);
        }
        let used: BTreeSet<ChordId> = self.key_hashes.values().copied().collect();
        let h = self
            .world
            .config()
            .ids()
            .filter(|id| !used.contains(id))
            .choose(&mut self.rng)
            .expect("fewer key names than slots");
        self.key_hashes.insert(name.clone(), h);
        (name, h)
    }

    fn gen_action(&mut self, index: usize) -> Action {
        let usable = self.usable_nodes();
        let active = usable.len();
        let ring = *self.world.config();
        let claimed = self.claimed_ids();
        let busy = self.busy_peers();
        let can_join = active + self.pending_joins() < self.cfg.nodes
            && (claimed.len() as u32) < ring.n_slots()
            && !usable.is_empty();
        let can_leave = active >= 2;
        let weights = [
            (0, if can_join { 4 } else { 0 }),
            (1, if can_leave { 1 } else { 0 }),
            (2, if can_leave { 1 } else { 0 }),
            (3, if active > 0 { 3 } else { 0 }),
            (4, if active > 0 { 2 } else { 0 }),
            (5, 1),
        ];
        let total: u32 = weights.iter().map(|(_, w)| w).sum();
        let mut pick = self.rng.gen_range(0..total);
        let mut choice = 5;
        for (c, w) in weights {
            if pick < w {
                choice = c;
                break;
            }
            pick -= w;
        }
        match choice {
            0 => {
                let id = ring
                    .ids()
                    .filter(|id| !claimed.contains(id))
                    .choose(&mut self.rng)
                    .expect("free id");
                let peer = (0..ring.n_slots())
                    .map(|i| format!("P{i}"))
                    .filter(|p| !busy.contains(p))
                    .choose(&mut self.rng)
                    .expect("free peer");
                let via = *usable.iter().choose(&mut self.rng).expect("non-empty");
                Action::Join {
                    peer,
                    id,
                    via: Some(via),
                }
            }
            1 => Action::FairLeave {
                node: *usable.iter().choose(&mut self.rng).expect("non-empty"),
            },
            2 => Action::UnfairLeave {
                node: *usable.iter().choose(&mut self.rng).expect("non-empty"),
            },
            3 => {
                let node = *usable.iter().choose(&mut self.rng).expect("non-empty");
                let (key, hash) = self.key_name();
                Action::Put {
                    node,
                    key,
                    hash,
                    value: format!("v{index}"),
                }
            }
            4 => {
                let node = *usable.iter().choose(&mut self.rng).expect("non-empty");
                let i = self.rng.gen_range(0..ring.n_slots());
                Action::Get {
                    node,
                    key: format!("K{i}"),
                    expect: None,
                }
            }
            _ => Action::Quiesce { budget: None },
        }
    }

    fn check_lookups(&mut self) {
        let w = &self.world;
        let m = w.config().m_bits();
        let t = &mut self.report.lookups;
        for &origin in w.live() {
            for h in w.config().ids() {
                let r = w.resolve_synchronously(origin, h);
                t.checked += 1;
                match r.successor {
                    None => t.timeouts += 1,
                    Some(s) if Some(s) != w.oracle_successor(h) => t.mismatches += 1,
                    Some(_) => {}
                }
                t.max_hops = t.max_hops.max(r.hops);
                if r.hops > m {
                    t.over_budget += 1;
                }
            }
        }
    }

    /// Gets every key the ledger says is stored and compares the answers.
    fn check_gets(&mut self) {
        let expected: Vec<(String, String)> = self
            .key_hashes
            .iter()
            .filter_map(|(name, h)| match self.world.key_ledger().get(h) {
                Some(KeyFate::Stored { value, .. }) => Some((name.clone(), value.clone())),
                _ => None,
            })
            .collect();
        if expected.is_empty() || self.world.live().is_empty() {
            return;
        }
        let mut batch = Vec::new();
        for (key, value) in &expected {
            let node = *self.world.live().iter().choose(&mut self.rng).expect("non-empty");
            let action = Action::Get {
                node,
                key: key.clone(),
                expect: Some(Expect::Value(value.clone())),
            };
            let inj = injection_for(&action).expect("get");
            batch.push((action, inj));
        }
        let out = self.step(batch);
        let ops: Vec<OpId> = out
            .events
            .iter()
            .filter_map(|e| match e.outcome {
                Outcome::GetIssued { op, .. } | Outcome::GetUndef { op } => Some(op),
                _ => None,
            })
            .collect();
        let budget = self.world.default_budget();
        self.quiesce(budget);
        for (op, (key, value)) in ops.into_iter().zip(expected) {
            self.report.gets_checked += 1;
            let status = &self.world.gets()[&op].status;
            let ok = matches!(status, OpStatus::Answered { value: Some(v), .. } if *v == value);
            if !ok {
                self.report
                    .get_mismatches
                    .push(format!("op={op} key={key} expected {value}, got {status:?}"));
            }
        }
    }

    fn checkpoint(&mut self, budget: u64) -> Option<u64> {
        self.report.checkpoints += 1;
        let rounds = self.quiesce(budget);
        let at = self.world.clock().saturating_sub(1);
        for kind in [AssertKind::Stable, AssertKind::GoldenRule, AssertKind::GetSound] {
            self.record(
                at,
                Action::Assert {
                    kind,
                    expect_fail: false,
                },
            );
        }
        let mut found = regularity::check_golden_rule(&self.world);
        found.extend(regularity::check_stranded(&self.world));
        found.extend(regularity::check_gate_log(&self.world));
        self.push_violations(found);
        if rounds.is_some() {
            self.check_lookups();
            self.check_gets();
        }
        let found = regularity::check_settled_gets(&self.world);
        self.push_violations(found);
        rounds
    }

    fn maybe_swap(&mut self) {
        if self.report.swaps.sampled >= self.cfg.swap_samples as u64 || self.world.live().len() < 2 {
            return;
        }
        if !self.swap_rng.gen_bool(0.3) {
            return;
        }
        let mut base = self.world.clone();
        base.deliver();
        let nodes: Vec<ChordId> = base.live().iter().copied().collect();
        for _ in 0..8 {
            let pair: Vec<ChordId> = nodes.iter().copied().choose_multiple(&mut self.swap_rng, 2);
            let a = Move {
                node: pair[0],
                rule: Rule::PERIODIC[self.swap_rng.gen_range(0..4)],
            };
            let b = Move {
                node: pair[1],
                rule: Rule::PERIODIC[self.swap_rng.gen_range(0..4)],
            };
            match regularity::check_linearization_independence(&base, a, b) {
                Ok(Linearization::NotIndependent) => continue,
                Ok(Linearization::Equal) => {
                    self.report.swaps.sampled += 1;
                    self.report.swaps.equal += 1;
                }
                Ok(Linearization::Differ { ab, ba }) => {
                    self.report.swaps.sampled += 1;
                    self.report
                        .swaps
                        .differ
                        .push(format!("step {} {a:?} {b:?}\n{ab}\n--\n{ba}", base.clock()));
                }
                Err(e) => {
                    self.report.swaps.sampled += 1;
                    self.report.swaps.errors.push(e);
                }
            }
            return;
        }
    }

    fn run(mut self) -> FuzzReport {
        let ring = *self.world.config();
        if self.cfg.nodes > 0 {
            let id = ring.ids().choose(&mut self.rng).expect("non-empty ring");
            self.inject(Action::Start {
                peer: "P0".into(),
                id,
            });
        }
        for i in 0..self.cfg.events {
            if self.world.live().is_empty() && self.world.pending_joiners().next().is_none() && self.world.deferred().next().is_none() {
                break;
            }
            let action = self.gen_action(i);
            if let Action::Quiesce { .. } = action {
                let budget = self.world.default_budget();
                self.checkpoint(budget);
                continue;
            }
            self.inject(action);
            for _ in 0..self.rng.gen_range(0..=2) {
                self.idle();
            }
        }
        let budget = self.world.default_budget();
        self.report.final_budget = budget;
        self.report.final_rounds = self.checkpoint(budget);
        self.report.final_stable = regularity::is_stable_network(&self.world).stable;
        let settled = regularity::check_settled_gets(&self.world).len();
        self.report.transient_unsound = (regularity::check_recorded_gets(&self.world).len() - settled) as u64;
        self.report.final_world = self.world.serialize();
        self.report.scenario = self.scenario;
        self.report.trace = self.writer.map(|w| w.finish(&[]));
        self.report
    }
}

pub fn fuzz(cfg: FuzzConfig) -> FuzzReport {
    Fuzzer::new(cfg).run()
}

/// Runs `runs` campaigns with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn fuzz_campaign(cfg: &FuzzConfig, runs: u64) -> Vec<FuzzReport> {
    (0..runs)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            fuzz(c)
        })
        .collect()
}
