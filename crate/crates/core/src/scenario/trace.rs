//! Step-by-step trace text in state-table style.
//!
//! ```text
//! == step 12 ==
//! deliver 2->3 #40 Notify
//! fire 2:ReadMessages 3:ReadMessages
//! * id=3 pred=2 succ=1 next=2 keys={}
//! ```
//!
//! A `*` in the first column marks a row that changed during the step.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{parse_scenario, Scenario};
use crate::node::fmt_opt;
use crate::ring::ChordId;
use crate::sim::{Mode, OpStatus, StepOutcome, World};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub mode: Mode,
    pub seed: u64,
    pub max_steps: u64,
    pub verbose: bool,
}

const MAGIC: &str = "# chordsim trace";
const EMBED: &str = "#| ";

/// One node row of a step record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub changed: bool,
    pub id: String,
    pub pred: String,
    pub succ: String,
    pub next: String,
    pub keys: String,
}

fn row_text(world: &World, id: ChordId, verbose: bool) -> String {
    let n = world.node(id).expect("listed node");
    let keys: Vec<String> = n.keyvalue.keys().map(ToString::to_string).collect();
    let mut s = format!(
        "id={} pred={} succ={} next={} keys={{{}}}",
        n.id,
        fmt_opt(n.predecessor),
        n.successor,
        n.next,
        keys.join(",")
    );
    if verbose {
        let f: Vec<String> = n.finger.iter().map(ToString::to_string).collect();
        let _ = write!(s, " finger=[{}]", f.join(","));
    }
    s
}

pub struct TraceWriter {
    out: String,
    verbose: bool,
    prev: BTreeMap<ChordId, String>,
}

impl TraceWriter {
    pub fn new(header: &TraceHeader, scenario: &Scenario) -> Self {
        let mut out = format!(
            "{MAGIC} mode={} seed={} max_steps={} verbose={}\n",
            header.mode, header.seed, header.max_steps, header.verbose
        );
        for line in scenario.render().lines() {
            out.push_str(EMBED);
            out.push_str(line);
            out.push('\n');
        }
        Self {
            out,
            verbose: header.verbose,
            prev: BTreeMap::new(),
        }
    }

    pub fn record_step(&mut self, world: &World, step: &StepOutcome) {
        let o = &mut self.out;
        let _ = writeln!(o, "== step {} ==", step.step);
        for m in &step.delivered {
            let _ = writeln!(o, "deliver {m}");
        }
        for m in &step.dropped {
            let _ = writeln!(o, "drop {m}");
        }
        if !step.fired.is_empty() {
            let fired: Vec<String> = step.fired.iter().map(|(id, r)| format!("{id}:{r}")).collect();
            let _ = writeln!(o, "fire {}", fired.join(" "));
        }
        for j in &step.joins {
            match &j.result {
                Ok(s) => writeln!(o, "join {} id={} -> connected succ={s}", j.peer, j.id),
                Err(e) => writeln!(o, "join {} id={} -> failed: {e}", j.peer, j.id),
            }
            .ok();
        }
        for ev in &step.events {
            let _ = writeln!(o, "event {} -> {}", ev.injection, ev.outcome);
        }
        for op in &step.gets_completed {
            if let Some(rec) = world.gets().get(op) {
                let answer = match &rec.status {
                    OpStatus::Answered { value: Some(v), .. } => v.clone(),
                    OpStatus::Answered { value: None, .. } => "undef".into(),
                    OpStatus::Failed { .. } => "failed".into(),
                    other => format!("{other:?}"),
                };
                let _ = writeln!(o, "get op={op} node={} key={} -> {answer}", rec.node, rec.key);
            }
        }
        let mut now = BTreeMap::new();
        for &id in world.nodes().keys() {
            let row = row_text(world, id, self.verbose);
            let marker = if self.prev.get(&id) == Some(&row) { ' ' } else { '*' };
            let _ = writeln!(o, "{marker} {row}");
            now.insert(id, row);
        }
        for id in world.pending_joiners() {
            let _ = writeln!(o, "  joining id={id}");
        }
        self.prev = now;
    }

    /// A control-event line such as a quiesce or assertion result.
    pub fn note(&mut self, line: &str) {
        let _ = writeln!(self.out, "-- {line}");
    }

    pub fn finish(mut self, summary: &[String]) -> String {
        self.out.push_str("== summary ==\n");
        for line in summary {
            self.out.push_str(line);
            self.out.push('\n');
        }
        self.out
    }
}

/// Recovers the run parameters and the embedded scenario of a trace.
pub fn parse_header(trace: &str) -> Result<(TraceHeader, Scenario), String> {
    let mut lines = trace.lines();
    let first = lines.next().ok_or("empty trace")?;
    let rest = first.strip_prefix(MAGIC).ok_or("not a chordsim trace")?;
    let mut fields = BTreeMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("bad header field `{tok}`"))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("header lacks `{k}`"));
    let header = TraceHeader {
        mode: get("mode")?.parse()?,
        seed: get("seed")?.parse().map_err(|e| format!("seed: {e}"))?,
        max_steps: get("max_steps")?.parse().map_err(|e| format!("max_steps: {e}"))?,
        verbose: get("verbose")?.parse().map_err(|e| format!("verbose: {e}"))?,
    };
    let embedded: String = lines
        .take_while(|l| l.starts_with(EMBED.trim_end()))
        .map(|l| format!("{}\n", l.strip_prefix(EMBED).unwrap_or("")))
        .collect();
    let scenario = parse_scenario(&embedded).map_err(|e| format!("embedded scenario: {e}"))?;
    Ok((header, scenario))
}

/// Node rows recorded for `step`, or `None` if the trace has no such step.
pub fn rows_at(trace: &str, step: u64) -> Option<Vec<TraceRow>> {
    let marker = format!("== step {step} ==");
    let mut lines = trace.lines().skip_while(|l| *l != marker);
    lines.next()?;
    let mut rows = Vec::new();
    for line in lines.take_while(|l| !l.starts_with("== ")) {
        let (changed, body) = match line.strip_prefix("* id=") {
            Some(b) => (true, b),
            None => match line.strip_prefix("  id=") {
                Some(b) => (false, b),
                None => continue,
            },
        };
        let mut fields = BTreeMap::new();
        fields.insert("id", body.split_whitespace().next().unwrap_or("").to_string());
        for tok in body.split_whitespace().skip(1) {
            if let Some((k, v)) = tok.split_once('=') {
                fields.insert(k, v.to_string());
            }
        }
        let f = |k: &str| fields.get(k).cloned().unwrap_or_default();
        rows.push(TraceRow {
            changed,
            id: f("id"),
            pred: f("pred"),
            succ: f("succ"),
            next: f("next"),
            keys: f("keys"),
        });
    }
    Some(rows)
}
