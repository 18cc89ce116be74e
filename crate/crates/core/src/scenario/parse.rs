use std::collections::BTreeMap;

use thiserror::Error;

use super::{Action, AssertKind, Expect, Scenario, ScenarioEvent};
use crate::ring::{ChordId, RingConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokens(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Token {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    out
}

struct Ctx {
    line: usize,
}

impl Ctx {
    fn err(&self, column: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn int(&self, tok: Token<'_>, text: &str) -> Result<u64, ParseError> {
        text.parse()
            .map_err(|_| self.err(tok.column, format!("expected a non-negative integer, found `{text}`")))
    }

    fn id(&self, ring: &RingConfig, tok: Token<'_>, text: &str) -> Result<ChordId, ParseError> {
        let v = self.int(tok, text)?;
        ring.id(v).map_err(|e| self.err(tok.column, format!("out-of-range id: {e}")))
    }
}

/// Key/value arguments of one action, with the token each came from.
struct Args<'a> {
    ctx: &'a Ctx,
    action: Token<'a>,
    map: BTreeMap<&'a str, (Token<'a>, &'a str)>,
}

impl<'a> Args<'a> {
    fn new(ctx: &'a Ctx, action: Token<'a>, toks: &[Token<'a>], allowed: &[&str]) -> Result<Self, ParseError> {
        let mut map = BTreeMap::new();
        for tok in toks {
            let Some((k, v)) = tok.text.split_once('=') else {
                return Err(ctx.err(tok.column, format!("expected key=value, found `{}`", tok.text)));
            };
            if !allowed.contains(&k) {
                return Err(ctx.err(tok.column, format!("unknown argument `{k}` for {}", action.text)));
            }
            if v.is_empty() {
                return Err(ctx.err(tok.column, format!("empty value for `{k}`")));
            }
            if map.insert(k, (*tok, v)).is_some() {
                return Err(ctx.err(tok.column, format!("duplicate argument `{k}`")));
            }
        }
        Ok(Self { ctx, action, map })
    }

    fn required(&self, key: &str) -> Result<(Token<'a>, &'a str), ParseError> {
        self.map.get(key).copied().ok_or_else(|| {
            self.ctx
                .err(self.action.column, format!("{} requires `{key}=`", self.action.text))
        })
    }

    fn optional(&self, key: &str) -> Option<(Token<'a>, &'a str)> {
        self.map.get(key).copied()
    }

    fn id(&self, ring: &RingConfig, key: &str) -> Result<ChordId, ParseError> {
        let (tok, v) = self.required(key)?;
        self.ctx.id(ring, tok, v)
    }

    fn opt_id(&self, ring: &RingConfig, key: &str) -> Result<Option<ChordId>, ParseError> {
        self.optional(key).map(|(t, v)| self.ctx.id(ring, t, v)).transpose()
    }

    fn name(&self, key: &str) -> Result<String, ParseError> {
        Ok(self.required(key)?.1.to_string())
    }
}

fn parse_assert(ctx: &Ctx, ring: &RingConfig, action: Token<'_>, rest: &[Token<'_>]) -> Result<Action, ParseError> {
    let Some((kind_tok, flags)) = rest.split_first() else {
        return Err(ctx.err(action.column, "assert requires a kind"));
    };
    let kind = match kind_tok.text {
        "stable" => AssertKind::Stable,
        "golden_rule" => AssertKind::GoldenRule,
        "get_sound" => AssertKind::GetSound,
        "not_converged" => AssertKind::NotConverged,
        other => {
            let inner = other
                .strip_prefix("stable_pair(")
                .and_then(|s| s.strip_suffix(')'))
                .and_then(|s| s.split_once(','));
            match inner {
                Some((a, b)) => AssertKind::StablePair(
                    ctx.id(ring, *kind_tok, a.trim())?,
                    ctx.id(ring, *kind_tok, b.trim())?,
                ),
                None => return Err(ctx.err(kind_tok.column, format!("unknown assertion kind `{other}`"))),
            }
        }
    };
    let args = Args::new(ctx, action, flags, &["expect"])?;
    let expect_fail = match args.optional("expect") {
        None => false,
        Some((_, "fail")) => true,
        Some((t, v)) => return Err(ctx.err(t.column, format!("assert expect must be `fail`, found `{v}`"))),
    };
    Ok(Action::Assert { kind, expect_fail })
}

fn parse_action(ctx: &Ctx, ring: &RingConfig, toks: &[Token<'_>]) -> Result<Action, ParseError> {
    let Some((action, rest)) = toks.split_first() else {
        return Err(ctx.err(1, "missing action"));
    };
    let action = *action;
    let args = |allowed: &[&str]| Args::new(ctx, action, rest, allowed);
    Ok(match action.text {
        "start" => {
            let a = args(&["peer", "id"])?;
            Action::Start {
                peer: a.name("peer")?,
                id: a.id(ring, "id")?,
            }
        }
        "join" => {
            let a = args(&["peer", "id", "via"])?;
            Action::Join {
                peer: a.name("peer")?,
                id: a.id(ring, "id")?,
                via: a.opt_id(ring, "via")?,
            }
        }
        "fair_leave" => Action::FairLeave {
            node: args(&["node"])?.id(ring, "node")?,
        },
        "unfair_leave" => Action::UnfairLeave {
            node: args(&["node"])?.id(ring, "node")?,
        },
        "put" => {
            let a = args(&["node", "key", "hash", "value"])?;
            Action::Put {
                node: a.id(ring, "node")?,
                key: a.name("key")?,
                hash: a.id(ring, "hash")?,
                value: a.name("value")?,
            }
        }
        "get" => {
            let a = args(&["node", "key", "expect"])?;
            Action::Get {
                node: a.id(ring, "node")?,
                key: a.name("key")?,
                expect: a.optional("expect").map(|(_, v)| match v {
                    "undef" => Expect::Undef,
                    v => Expect::Value(v.to_string()),
                }),
            }
        }
        "quiesce" => {
            let a = args(&["budget"])?;
            Action::Quiesce {
                budget: a.optional("budget").map(|(t, v)| ctx.int(t, v)).transpose()?,
            }
        }
        "assert" => parse_assert(ctx, ring, action, rest)?,
        other => return Err(ctx.err(action.column, format!("unknown action `{other}`"))),
    })
}

/// Parses the line-based scenario format. `#` starts a comment.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut scenario = Scenario::default();
    let mut ring: Option<RingConfig> = None;
    let mut last_at = 0;
    for (n, raw) in text.lines().enumerate() {
        let ctx = Ctx { line: n + 1 };
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokens(content);
        let Some(first) = toks.first() else { continue };
        match first.text {
            "ring_bits" => {
                if ring.is_some() {
                    return Err(ctx.err(first.column, "duplicate ring_bits header"));
                }
                if !scenario.events.is_empty() {
                    return Err(ctx.err(first.column, "ring_bits must precede all events"));
                }
                let [_, m] = toks[..] else {
                    return Err(ctx.err(first.column, "expected `ring_bits <M>`"));
                };
                let bits = ctx.int(m, m.text)?;
                let bits = u32::try_from(bits).map_err(|_| ctx.err(m.column, "ring_bits too large"))?;
                let cfg = RingConfig::new(bits).map_err(|e| ctx.err(m.column, e.to_string()))?;
                scenario.ring_bits = Some(bits);
                ring = Some(cfg);
            }
            "at" => {
                let Some(cfg) = ring.as_ref() else {
                    return Err(ctx.err(first.column, "event before the ring_bits header"));
                };
                let Some(step_tok) = toks.get(1) else {
                    return Err(ctx.err(first.column, "expected `at <step>:`"));
                };
                let Some(step_text) = step_tok.text.strip_suffix(':') else {
                    return Err(ctx.err(step_tok.column, "expected `<step>:`"));
                };
                let at = ctx.int(*step_tok, step_text)?;
                if at < last_at {
                    return Err(ctx.err(
                        step_tok.column,
                        format!("unsorted steps: {at} after {last_at}"),
                    ));
                }
                last_at = at;
                let action = parse_action(&ctx, cfg, &toks[2..])?;
                scenario.events.push(ScenarioEvent { at, action });
            }
            other => return Err(ctx.err(first.column, format!("unknown keyword `{other}`"))),
        }
    }
    Ok(scenario)
}
