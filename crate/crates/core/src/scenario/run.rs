//! Drives a parsed scenario through the simulator.
//!
//! An injected action scheduled `at s` goes into step `s`. A control action
//! (`quiesce`, `assert`) scheduled `at s` runs once step `s` has completed.
//! Anything scheduled in the past runs at the current clock.

use super::trace::{TraceHeader, TraceWriter};
use super::{Action, AssertKind, Expect, Scenario};
use crate::regularity::{self, ViolationReport};
use crate::ring::{HashPolicy, RingConfig};
use crate::sim::{Injection, Mode, OpId, OpStatus, Outcome, StepOutcome, World};

/// Ring size used when a scenario has no header.
pub const DEFAULT_RING_BITS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    pub seed: u64,
    pub max_steps: u64,
    pub verbose_fingers: bool,
}

impl RunOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            max_steps: 10_000,
            verbose_fingers: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Clean = 0,
    AssertionFailed = 1,
    ConfigError = 2,
    NotConverged = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResult {
    /// Step whose end state was checked.
    pub step: u64,
    pub description: String,
    pub held: bool,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuiesceResult {
    pub step: u64,
    pub rounds: u64,
    pub converged: bool,
    pub expected: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub world: World,
    pub trace: String,
    pub status: ExitStatus,
    pub assertions: Vec<AssertionResult>,
    pub quiesces: Vec<QuiesceResult>,
    pub violations: Vec<ViolationReport>,
    pub errors: Vec<String>,
    pub steps: u64,
}

impl RunReport {
    pub fn failed_assertions(&self) -> impl Iterator<Item = &AssertionResult> {
        self.assertions.iter().filter(|a| !a.ok)
    }
}

pub fn injection_for(action: &Action) -> Option<Injection> {
    Some(match action {
        Action::Start { peer, id } => Injection::Start {
            peer: peer.clone(),
            policy: HashPolicy::Explicit(*id),
        },
        Action::Join { peer, id, via } => Injection::Join {
            peer: peer.clone(),
            policy: HashPolicy::Explicit(*id),
            via: *via,
        },
        Action::FairLeave { node } => Injection::FairLeave { node: *node },
        Action::UnfairLeave { node } => Injection::UnfairLeave { node: *node },
        Action::Put {
            node,
            key,
            hash,
            value,
        } => Injection::Put {
            node: *node,
            key: key.clone(),
            policy: HashPolicy::Explicit(*hash),
            value: value.clone(),
        },
        Action::Get { node, key, .. } => Injection::Get {
            node: *node,
            key: key.clone(),
        },
        Action::Quiesce { .. } | Action::Assert { .. } => return None,
    })
}

/// Every check the run reports on at the end. Gets are judged only if they
/// were issued into a quiescent network.
pub fn audit(world: &World) -> Vec<ViolationReport> {
    let mut v = regularity::check_golden_rule(world);
    v.extend(regularity::check_settled_gets(world));
    v.extend(regularity::check_stranded(world));
    v.extend(regularity::check_gate_log(world));
    v
}

struct Driver<'a> {
    opts: &'a RunOptions,
    world: World,
    writer: TraceWriter,
    steps: u64,
    errors: Vec<String>,
    expects: Vec<(Injection, Expect, Option<OpId>)>,
    assertions: Vec<AssertionResult>,
    quiesces: Vec<QuiesceResult>,
    unexpected_stall: bool,
    last_quiesce_converged: Option<bool>,
}

impl Driver<'_> {
    fn scan(&mut self, out: &StepOutcome) {
        for ev in &out.events {
            match &ev.outcome {
                Outcome::Rejected(e) => self.errors.push(format!("step {}: `{}` rejected: {e}", out.step, ev.injection)),
                Outcome::GetIssued { op, .. } | Outcome::GetUndef { op } => {
                    if let Some(slot) = self
                        .expects
                        .iter_mut()
                        .find(|(inj, _, op)| op.is_none() && *inj == ev.injection)
                    {
                        slot.2 = Some(*op);
                    }
                }
                _ => {}
            }
        }
    }

    fn out_of_steps(&self) -> bool {
        self.steps >= self.opts.max_steps
    }

    fn step(&mut self, injected: Vec<Injection>) -> bool {
        if self.out_of_steps() {
            return false;
        }
        let out = self.world.step(injected);
        self.writer.record_step(&self.world, &out);
        self.scan(&out);
        self.steps += 1;
        true
    }

    fn quiesce(&mut self, budget: Option<u64>, expected_stall: bool) {
        let budget = budget.unwrap_or_else(|| self.world.default_budget());
        let limit = budget.min(self.opts.max_steps.saturating_sub(self.steps));
        let mut outs = Vec::new();
        let writer = &mut self.writer;
        let result = self.world.quiesce_with(limit, |w, o| {
            writer.record_step(w, o);
            outs.push(o.clone());
        });
        for o in &outs {
            self.scan(o);
        }
        self.steps += outs.len() as u64;
        let (converged, rounds) = match result {
            Ok(r) => (true, r),
            Err(e) => (false, e.rounds),
        };
        let expected = converged || expected_stall;
        if !expected {
            self.unexpected_stall = true;
        }
        self.last_quiesce_converged = Some(converged);
        let step = self.world.clock().saturating_sub(1);
        self.quiesces.push(QuiesceResult {
            step,
            rounds,
            converged,
            expected,
        });
        let verdict = match (converged, expected) {
            (true, _) => format!("converged rounds={rounds}"),
            (false, true) => format!("not converged after {rounds} rounds (expected)"),
            (false, false) => format!("NOT CONVERGED after {rounds} rounds"),
        };
        self.writer.note(&format!("quiesce budget={budget} -> {verdict}"));
    }

    fn assert(&mut self, kind: AssertKind, expect_fail: bool) {
        let w = &self.world;
        let held = match kind {
            AssertKind::Stable => regularity::is_stable_network(w).stable,
            AssertKind::StablePair(a, b) => regularity::is_stable_pair(w, a, b).stable,
            AssertKind::GoldenRule => regularity::check_golden_rule(w).is_empty(),
            AssertKind::GetSound => regularity::check_settled_gets(w).is_empty(),
            AssertKind::NotConverged => self.last_quiesce_converged == Some(false),
        };
        let ok = if expect_fail && self.opts.mode == Mode::Unrestricted {
            !held
        } else {
            held
        };
        let description = Action::Assert { kind, expect_fail }.to_string();
        let verdict = match (held, ok) {
            (true, true) => "held",
            (false, true) => "failed (expected)",
            (true, false) => "HELD (expected to fail)",
            (false, false) => "FAILED",
        };
        self.writer.note(&format!("{description} -> {verdict}"));
        self.assertions.push(AssertionResult {
            step: w.clock().saturating_sub(1),
            description,
            held,
            ok,
        });
    }

    fn check_expects(&mut self) {
        for (inj, expect, op) in std::mem::take(&mut self.expects) {
            let got = op.and_then(|op| self.world.gets().get(&op)).map(|r| r.status.clone());
            let (held, seen) = match (&got, &expect) {
                (Some(OpStatus::Answered { value, .. }), Expect::Value(v)) => {
                    (value.as_deref() == Some(v.as_str()), value.clone().unwrap_or_else(|| "undef".into()))
                }
                (Some(OpStatus::Answered { value, .. }), Expect::Undef) => {
                    (value.is_none(), value.clone().unwrap_or_else(|| "undef".into()))
                }
                (Some(OpStatus::Failed { .. }), _) => (false, "failed".into()),
                (Some(_), _) => (false, "pending".into()),
                (None, _) => (false, "never issued".into()),
            };
            let description = format!("{inj} expect={expect}");
            let verdict = if held { "held".to_string() } else { format!("FAILED (got {seen})") };
            self.writer.note(&format!("{description} -> {verdict}"));
            self.assertions.push(AssertionResult {
                step: self.world.clock().saturating_sub(1),
                description,
                held,
                ok: held,
            });
        }
    }
}

fn next_assert_tolerates_stall(scenario: &Scenario, from: usize, mode: Mode) -> bool {
    scenario.events[from..]
        .iter()
        .find_map(|e| match e.action {
            Action::Assert { kind, expect_fail } => Some(kind == AssertKind::NotConverged || (expect_fail && mode == Mode::Unrestricted)),
            _ => None,
        })
        .unwrap_or(false)
}

pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> RunReport {
    let bits = scenario.ring_bits.unwrap_or(DEFAULT_RING_BITS);
    let header = TraceHeader {
        mode: opts.mode,
        seed: opts.seed,
        max_steps: opts.max_steps,
        verbose: opts.verbose_fingers,
    };
    let config = RingConfig::new(bits).expect("parser validated ring_bits");
    let mut d = Driver {
        opts,
        world: World::new(config, opts.mode, opts.seed),
        writer: TraceWriter::new(&header, scenario),
        steps: 0,
        errors: Vec::new(),
        expects: Vec::new(),
        assertions: Vec::new(),
        quiesces: Vec::new(),
        unexpected_stall: false,
        last_quiesce_converged: None,
    };
    let events = &scenario.events;
    let mut idx = 0;
    let mut truncated = false;
    'events: while idx < events.len() && d.errors.is_empty() {
        let ev = &events[idx];
        if ev.action.is_control() {
            while d.world.clock() <= ev.at {
                if !d.step(Vec::new()) {
                    truncated = true;
                    break 'events;
                }
            }
            match ev.action {
                Action::Quiesce { budget } => {
                    let tolerated = next_assert_tolerates_stall(scenario, idx + 1, opts.mode);
                    d.quiesce(budget, tolerated);
                }
                Action::Assert { kind, expect_fail } => d.assert(kind, expect_fail),
                _ => unreachable!("control action"),
            }
            idx += 1;
            continue;
        }
        while d.world.clock() < ev.at {
            if !d.step(Vec::new()) {
                truncated = true;
                break 'events;
            }
        }
        let mut batch = Vec::new();
        while idx < events.len() && !events[idx].action.is_control() && events[idx].at <= d.world.clock() {
            let action = &events[idx].action;
            let inj = injection_for(action).expect("injected action");
            if let Action::Get { expect: Some(e), .. } = action {
                d.expects.push((inj.clone(), e.clone(), None));
            }
            batch.push(inj);
            idx += 1;
        }
        if !d.step(batch) {
            truncated = true;
            break;
        }
    }
    let settled_by_script = events
        .iter()
        .rev()
        .find(|e| !matches!(e.action, Action::Assert { .. }))
        .is_none_or(|e| matches!(e.action, Action::Quiesce { .. }));
    if d.errors.is_empty() && !truncated && !settled_by_script {
        d.quiesce(None, false);
    }
    if truncated {
        d.writer.note(&format!("max steps {} reached", opts.max_steps));
    }
    d.check_expects();
    let violations = audit(&d.world);
    let status = if !d.errors.is_empty() {
        ExitStatus::ConfigError
    } else if d.assertions.iter().any(|a| !a.ok) {
        ExitStatus::AssertionFailed
    } else if d.unexpected_stall || truncated {
        ExitStatus::NotConverged
    } else {
        ExitStatus::Clean
    };
    let mut summary = vec![format!(
        "exit={} steps={} clock={} nodes={}",
        status.code(),
        d.steps,
        d.world.clock(),
        d.world.nodes().len()
    )];
    summary.extend(d.errors.iter().map(|e| format!("error {e}")));
    summary.push(format!("violations={}", violations.len()));
    summary.extend(violations.iter().map(ToString::to_string));
    let transient = regularity::check_recorded_gets(&d.world).len() - regularity::check_settled_gets(&d.world).len();
    if transient > 0 {
        summary.push(format!("transient_unsound_gets={transient}"));
    }
    let s = d.world.stats();
    summary.push(format!(
        "stats sent={} delivered={} dropped={} lookups={} max_hops={} timeouts={} deferrals={}",
        s.sent, s.delivered, s.dropped, s.lookups, s.max_hops, s.lookup_timeouts, s.deferrals
    ));
    let trace = d.writer.finish(&summary);
    RunReport {
        steps: d.steps,
        world: d.world,
        trace,
        status,
        assertions: d.assertions,
        quiesces: d.quiesces,
        violations,
        errors: d.errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    fn run(text: &str, mode: Mode) -> RunReport {
        run_scenario(&parse_scenario(text).unwrap(), &RunOptions::new(mode))
    }

    #[test]
    fn start_and_assert_stable_passes() {
        let r = run("ring_bits 3\nat 0: start peer=P1 id=1\nat 0: assert stable\n", Mode::Regular);
        assert_eq!(r.status, ExitStatus::Clean, "{}", r.trace);
        assert_eq!(r.assertions.len(), 1);
    }

    #[test]
    fn failing_assertion_sets_status() {
        let text = "ring_bits 3\nat 0: start peer=P1 id=1\nat 1: join peer=P2 id=2 via=1\nat 1: assert stable\n";
        assert_eq!(run(text, Mode::Unrestricted).status, ExitStatus::AssertionFailed);
    }

    #[test]
    fn occupied_explicit_id_is_a_config_error() {
        let text = "ring_bits 3\nat 0: start peer=P1 id=1\nat 1: join peer=P2 id=1 via=1\n";
        let r = run(text, Mode::Regular);
        assert_eq!(r.status, ExitStatus::ConfigError);
        assert!(r.errors[0].contains("already held"), "{:?}", r.errors);
    }

    #[test]
    fn get_expectations_are_checked() {
        let text = "\
ring_bits 3
at 0: start peer=P1 id=1
at 1: join peer=P3 id=3 via=1
at 2: quiesce
at 40: put node=1 key=k hash=2 value=v
at 41: quiesce
at 60: get node=3 key=k expect=v
at 60: get node=1 key=other expect=undef
at 61: quiesce
";
        let r = run(text, Mode::Regular);
        assert_eq!(r.status, ExitStatus::Clean, "{}", r.trace);
        assert_eq!(r.assertions.len(), 2);
    }

    #[test]
    fn empty_scenario_is_clean() {
        let r = run("", Mode::Regular);
        assert_eq!(r.status, ExitStatus::Clean);
        assert_eq!(r.steps, 0);
    }
}
