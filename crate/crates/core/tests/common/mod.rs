#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use chordsim::scenario::run::{run_scenario, RunOptions, RunReport};
use chordsim::scenario::trace::{rows_at, TraceRow};
use chordsim::scenario::{parse_scenario, Scenario};
use chordsim::Mode;

pub fn manifest_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

pub fn read(rel: &str) -> String {
    std::fs::read_to_string(manifest_path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn scenario(name: &str) -> Scenario {
    parse_scenario(&read(&format!("scenarios/{name}.scn"))).expect("scenario parses")
}

pub fn run(name: &str, mode: Mode) -> RunReport {
    run_scenario(&scenario(name), &RunOptions::new(mode))
}

/// One expected node row; `None` fields are wildcards.
#[derive(Debug, Clone)]
pub struct ExpectedRow {
    pub id: String,
    pub pred: Option<String>,
    pub succ: Option<String>,
    pub keys: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExpectedState {
    pub name: String,
    pub step: u64,
    pub rows: Vec<ExpectedRow>,
}

pub fn load_states(name: &str) -> Vec<ExpectedState> {
    let mut out: Vec<ExpectedState> = Vec::new();
    for line in read(&format!("tests/golden/{name}.states")).lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(body) = line.strip_prefix("id=") {
            let mut fields = body.split_whitespace();
            let id = fields.next().expect("id").to_string();
            let mut row = ExpectedRow {
                id,
                pred: None,
                succ: None,
                keys: None,
            };
            for f in fields {
                let (k, v) = f.split_once('=').expect("key=value");
                let v = (v != "*").then(|| v.to_string());
                match k {
                    "pred" => row.pred = v,
                    "succ" => row.succ = v,
                    "keys" => row.keys = v,
                    other => panic!("unknown field {other}"),
                }
            }
            out.last_mut().expect("state header first").rows.push(row);
        } else {
            let (name, step) = line.split_once(' ').expect("`S<i> <step>`");
            out.push(ExpectedState {
                name: name.to_string(),
                step: step.parse().expect("step"),
                rows: Vec::new(),
            });
        }
    }
    out
}

/// Differences between a recorded step and the expected table.
pub fn diff_state(trace: &str, want: &ExpectedState) -> Vec<String> {
    let Some(rows) = rows_at(trace, want.step) else {
        return vec![format!("{}: no step {} in trace", want.name, want.step)];
    };
    let mut diffs = Vec::new();
    let got_ids: Vec<&str> = rows.iter().map(|r| r.id.as_str()).collect();
    let want_ids: Vec<&str> = want.rows.iter().map(|r| r.id.as_str()).collect();
    if got_ids != want_ids {
        diffs.push(format!("{}: nodes {got_ids:?}, expected {want_ids:?}", want.name));
        return diffs;
    }
    for (g, w) in rows.iter().zip(&want.rows) {
        for (field, got, exp) in [
            ("pred", &g.pred, &w.pred),
            ("succ", &g.succ, &w.succ),
            ("keys", &g.keys, &w.keys),
        ] {
            if let Some(exp) = exp {
                if got != exp {
                    diffs.push(format!("{}: node {} {field}={got}, expected {exp}", want.name, g.id));
                }
            }
        }
    }
    diffs
}

fn in_half_open(x: u64, a: u64, b: u64) -> bool {
    // Clockwise walk from a (exclusive) to b (inclusive).
    if a == b {
        return true;
    }
    if a < b {
        a < x && x <= b
    } else {
        x > a || x <= b
    }
}

/// Misplaced keys computed from trace rows alone: `(node, key)` pairs whose
/// key falls outside `(pred, node]`.
pub fn misplaced_from_rows(rows: &[TraceRow]) -> BTreeSet<(u64, u64)> {
    let mut out = BTreeSet::new();
    for r in rows {
        let id: u64 = r.id.parse().expect("id");
        let keys = r.keys.trim_start_matches('{').trim_end_matches('}');
        if keys.is_empty() {
            continue;
        }
        for k in keys.split(',') {
            let k: u64 = k.parse().expect("key");
            let ok = match r.pred.parse::<u64>() {
                Ok(p) => in_half_open(k, p, id),
                Err(_) => false,
            };
            if !ok {
                out.insert((id, k));
            }
        }
    }
    out
}

/// Every step number recorded in a trace, in order.
pub fn steps_in(trace: &str) -> Vec<u64> {
    let mut seen = Vec::new();
    for l in trace.lines() {
        if let Some(n) = l.strip_prefix("== step ").and_then(|r| r.strip_suffix(" ==")) {
            let n: u64 = n.parse().expect("step");
            if seen.last() != Some(&n) {
                seen.push(n);
            }
        }
    }
    seen
}
