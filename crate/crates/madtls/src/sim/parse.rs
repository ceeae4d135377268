//! Line-oriented scenario text format.
//!
//! One directive per line, whitespace-separated tokens, `#` comments. See
//! the bundled scenario files for the vocabulary; unknown directives are
//! errors so typos surface immediately.

use std::collections::BTreeMap;

use super::{
    AttackDirective, EntityDecl, ExpectedOutcome, InjectionDecl, Scenario, ScenarioError,
    Transform, TrafficItem, TrafficKind, TransportKind,
};
use crate::access::Access;
use crate::bits::Bits;
use crate::session::TamperPolicy;

struct Cursor<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Result<&'a str, ScenarioError> {
        let tok = self.tokens.get(self.pos).copied().ok_or(ScenarioError::Parse {
            line: self.line,
            message: "unexpected end of line".into(),
        })?;
        self.pos += 1;
        Ok(tok)
    }

    fn next_number<T: std::str::FromStr>(&mut self) -> Result<T, ScenarioError> {
        let line = self.line;
        let tok = self.next()?;
        tok.parse().map_err(|_| ScenarioError::Parse {
            line,
            message: format!("expected a number, got `{tok}`"),
        })
    }

    fn rest(&mut self) -> Vec<&'a str> {
        let out = self.tokens[self.pos..].to_vec();
        self.pos = self.tokens.len();
        out
    }

    fn done(&self) -> Result<(), ScenarioError> {
        if self.pos == self.tokens.len() {
            Ok(())
        } else {
            Err(ScenarioError::Parse {
                line: self.line,
                message: format!("trailing tokens: {:?}", &self.tokens[self.pos..]),
            })
        }
    }

    fn err(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Parse {
            line: self.line,
            message: message.into(),
        }
    }
}

fn perr(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_hex_bits(line: usize, token: &str) -> Result<Bits, ScenarioError> {
    // `<hex>` or `<hex>:<bits>` for sub-byte payloads.
    let (hex, bits) = match token.split_once(':') {
        Some((hex, bits)) => {
            let bits: usize = bits.parse().map_err(|_| perr(line, "bad bit length"))?;
            (hex, Some(bits))
        }
        None => (token, None),
    };
    let bytes = hex::decode(hex).map_err(|_| perr(line, format!("bad hex `{hex}`")))?;
    match bits {
        None => Ok(Bits::from_bytes(&bytes)),
        Some(bits) => Bits::from_bytes_exact(&bytes, bits)
            .ok_or_else(|| perr(line, "bit length does not match the hex payload")),
    }
}

fn parse_layout_pairs(line: usize, tokens: &[&str]) -> Result<Vec<(String, u32)>, ScenarioError> {
    let mut out = Vec::new();
    for tok in tokens {
        let (ctx, bits) = tok
            .split_once(':')
            .ok_or_else(|| perr(line, format!("expected <context>:<bits>, got `{tok}`")))?;
        let bits: u32 = bits
            .parse()
            .map_err(|_| perr(line, format!("bad bit length in `{tok}`")))?;
        out.push((ctx.to_string(), bits));
    }
    if out.is_empty() {
        return Err(perr(line, "layout needs at least one segment"));
    }
    Ok(out)
}

fn parse_expect(line: usize, token: &str) -> Result<ExpectedOutcome, ScenarioError> {
    match token {
        "accept" => Ok(ExpectedOutcome::Accept),
        "reject-at-receiver" => Ok(ExpectedOutcome::RejectAtReceiver),
        other => {
            if let Some(name) = other.strip_prefix("reject-at-middlebox:") {
                Ok(ExpectedOutcome::RejectAtMiddlebox(name.to_string()))
            } else if let Some(name) = other.strip_prefix("dropped:") {
                Ok(ExpectedOutcome::Dropped(name.to_string()))
            } else {
                Err(perr(line, format!("unknown expected outcome `{other}`")))
            }
        }
    }
}

/// `key=value` pairs into (key, value) with hex payload values.
fn parse_assignments(line: usize, tokens: &[&str]) -> Result<BTreeMap<String, Bits>, ScenarioError> {
    let mut out = BTreeMap::new();
    for tok in tokens {
        let (name, hex) = tok
            .split_once('=')
            .ok_or_else(|| perr(line, format!("expected <context>=<hex>, got `{tok}`")))?;
        out.insert(name.to_string(), parse_hex_bits(line, hex)?);
    }
    Ok(out)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut scenario = Scenario::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let mut c = Cursor {
            tokens: stripped.split_whitespace().collect(),
            pos: 0,
            line,
        };
        match c.next()? {
            "name" => scenario.name = c.next()?.to_string(),
            "transport" => {
                scenario.transport = match c.next()? {
                    "memory" => TransportKind::Memory,
                    "datagram" => TransportKind::Datagram,
                    other => return Err(c.err(format!("unknown transport `{other}`"))),
                }
            }
            "seed" => scenario.seed = c.next_number()?,
            "loss" => scenario.loss_percent = c.next_number()?,
            "entity" => {
                let name = c.next()?.to_string();
                let mut decl = EntityDecl {
                    name,
                    selfverify: false,
                    policy: TamperPolicy::DropAndReport,
                };
                for tok in c.rest() {
                    match tok {
                        "selfverify" => decl.selfverify = true,
                        "policy=drop" => decl.policy = TamperPolicy::DropAndReport,
                        "policy=forward" => decl.policy = TamperPolicy::ForwardAndReport,
                        other => return Err(c.err(format!("unknown entity flag `{other}`"))),
                    }
                }
                scenario.entities.push(decl);
            }
            "context" => scenario.contexts.push(c.next()?.to_string()),
            "right" => {
                let entity = c.next()?.to_string();
                let context = c.next()?.to_string();
                let access = match c.next()? {
                    "read" => Access::Read,
                    "write" => Access::Write,
                    other => return Err(c.err(format!("unknown access `{other}`"))),
                };
                scenario.rights.push((entity, context, access));
            }
            "template" => {
                let name = c.next()?.to_string();
                let rest = c.rest();
                let pairs = parse_layout_pairs(line, &rest)?;
                scenario.templates.push((name, pairs));
            }
            "transform" => {
                let entity = c.next()?.to_string();
                let context = c.next()?.to_string();
                match c.next()? {
                    "xor" => {
                        let tok = c.next()?;
                        let delta = parse_hex_bits(line, tok)?;
                        scenario
                            .transforms
                            .push((entity, context, Transform::Xor(delta)));
                    }
                    other => return Err(c.err(format!("unknown transform `{other}`"))),
                }
            }
            "inject-template" => {
                let template = c.next()?.to_string();
                let mut decl = InjectionDecl {
                    template,
                    injector: String::new(),
                    sequences: 0,
                    fixed: BTreeMap::new(),
                };
                while c.pos < c.tokens.len() {
                    match c.next()? {
                        "injector" => decl.injector = c.next()?.to_string(),
                        "seqs" => decl.sequences = c.next_number()?,
                        "fixed" => {
                            let rest = c.rest();
                            decl.fixed = parse_assignments(line, &rest)?;
                        }
                        other => return Err(c.err(format!("unknown token `{other}`"))),
                    }
                }
                if decl.injector.is_empty() || decl.sequences == 0 {
                    return Err(c.err("inject-template needs `injector` and `seqs`"));
                }
                scenario.injections.push(decl);
            }
            "message" => {
                let mut template = None;
                let mut payload = None;
                let mut expect = None;
                while c.pos < c.tokens.len() {
                    match c.next()? {
                        "template" => template = Some(c.next()?.to_string()),
                        "payload" => {
                            let tok = c.next()?;
                            payload = Some(parse_hex_bits(line, tok)?);
                        }
                        "expect" => {
                            let tok = c.next()?;
                            expect = Some(parse_expect(line, tok)?);
                        }
                        other => return Err(c.err(format!("unknown token `{other}`"))),
                    }
                }
                scenario.traffic.push(TrafficItem {
                    kind: TrafficKind::Regular {
                        template: template.ok_or_else(|| c.err("message needs `template`"))?,
                        payload: payload.ok_or_else(|| c.err("message needs `payload`"))?,
                    },
                    expect: expect.ok_or_else(|| c.err("message needs `expect`"))?,
                    attacks: Vec::new(),
                });
            }
            "injected" => {
                let by = c.next()?.to_string();
                let template = c.next()?.to_string();
                let mut sequence = None;
                let mut values = BTreeMap::new();
                let mut expect = None;
                while c.pos < c.tokens.len() {
                    match c.next()? {
                        "seq" => sequence = Some(c.next_number()?),
                        "set" => {
                            let tok = c.next()?;
                            values.append(&mut parse_assignments(line, &[tok])?);
                        }
                        "expect" => {
                            let tok = c.next()?;
                            expect = Some(parse_expect(line, tok)?);
                        }
                        other => return Err(c.err(format!("unknown token `{other}`"))),
                    }
                }
                scenario.traffic.push(TrafficItem {
                    kind: TrafficKind::Injected {
                        by,
                        template,
                        sequence: sequence.ok_or_else(|| c.err("injected needs `seq`"))?,
                        values,
                    },
                    expect: expect.ok_or_else(|| c.err("injected needs `expect`"))?,
                    attacks: Vec::new(),
                });
            }
            "attack" => {
                if scenario.traffic.is_empty() {
                    return Err(c.err("attack directive before any message"));
                }
                let directive = match c.next()? {
                    "flip" => {
                        let mut link = None;
                        let mut bits = Vec::new();
                        while c.pos < c.tokens.len() {
                            match c.next()? {
                                "link" => link = Some(c.next_number()?),
                                "bits" => {
                                    for part in c.next()?.split(',') {
                                        bits.push(part.parse().map_err(|_| {
                                            c.err(format!("bad bit index `{part}`"))
                                        })?);
                                    }
                                }
                                other => return Err(c.err(format!("unknown token `{other}`"))),
                            }
                        }
                        AttackDirective::Flip {
                            link: link.ok_or_else(|| c.err("flip needs `link`"))?,
                            bits,
                        }
                    }
                    "revert" => {
                        let mut link = None;
                        while c.pos < c.tokens.len() {
                            match c.next()? {
                                "link" => link = Some(c.next_number()?),
                                other => return Err(c.err(format!("unknown token `{other}`"))),
                            }
                        }
                        AttackDirective::Revert {
                            link: link.ok_or_else(|| c.err("revert needs `link`"))?,
                        }
                    }
                    "skip" => AttackDirective::Skip {
                        entity: resolve_entity(&scenario, &mut c)?,
                    },
                    "reorder" => AttackDirective::Reorder {
                        first: resolve_entity(&scenario, &mut c)?,
                        second: resolve_entity(&scenario, &mut c)?,
                    },
                    "replay" => AttackDirective::Replay,
                    "forge" => {
                        let tok = c.next()?;
                        if tok != "link" {
                            return Err(c.err("forge needs `link <n>`"));
                        }
                        AttackDirective::Forge {
                            link: c.next_number()?,
                        }
                    }
                    "collude" => {
                        let first = resolve_entity(&scenario, &mut c)?;
                        let second = resolve_entity(&scenario, &mut c)?;
                        let mut context = None;
                        let mut delta = None;
                        while c.pos < c.tokens.len() {
                            match c.next()? {
                                "context" => context = Some(c.next()?.to_string()),
                                "xor" => {
                                    let tok = c.next()?;
                                    delta = Some(parse_hex_bits(line, tok)?);
                                }
                                other => return Err(c.err(format!("unknown token `{other}`"))),
                            }
                        }
                        AttackDirective::Collude {
                            first,
                            second,
                            context: context.ok_or_else(|| c.err("collude needs `context`"))?,
                            delta: delta.ok_or_else(|| c.err("collude needs `xor`"))?,
                        }
                    }
                    "drop" => AttackDirective::Drop {
                        entity: resolve_entity(&scenario, &mut c)?,
                    },
                    other => return Err(c.err(format!("unknown attack `{other}`"))),
                };
                scenario
                    .traffic
                    .last_mut()
                    .expect("checked above")
                    .attacks
                    .push(directive);
            }
            other => return Err(c.err(format!("unknown directive `{other}`"))),
        }
        c.done()?;
    }
    if scenario.name.is_empty() {
        return Err(ScenarioError::Parse {
            line: 0,
            message: "scenario needs a `name`".into(),
        });
    }
    Ok(scenario)
}

fn resolve_entity(
    scenario: &Scenario,
    c: &mut Cursor<'_>,
) -> Result<crate::access::EntityId, ScenarioError> {
    let line = c.line;
    let name = c.next()?;
    scenario
        .entity_index(name)
        .ok_or(ScenarioError::Parse {
            line,
            message: format!("unknown entity `{name}`"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# sample
name demo
transport memory
seed 3

entity ctrl
entity ids selfverify policy=forward
entity sink

context flow
context rest

right ids flow read

template frame flow:24 rest:40

message template frame payload 0102030405060708 expect accept
attack flip link 1 bits 3,9
attack revert link 1
message template frame payload 0102030405060708 expect reject-at-middlebox:ids
";

    #[test]
    fn parses_a_full_scenario() {
        let s = parse_scenario(SAMPLE).unwrap();
        assert_eq!(s.name, "demo");
        assert_eq!(s.entities.len(), 3);
        assert!(s.entities[1].selfverify);
        assert_eq!(s.entities[1].policy, TamperPolicy::ForwardAndReport);
        assert_eq!(s.templates[0].1, vec![("flow".into(), 24), ("rest".into(), 40)]);
        assert_eq!(s.traffic.len(), 2);
        assert_eq!(s.traffic[0].attacks.len(), 2);
        assert!(matches!(
            s.traffic[0].attacks[0],
            AttackDirective::Flip { link: 1, ref bits } if *bits == vec![3, 9]
        ));
        assert_eq!(
            s.traffic[1].expect,
            ExpectedOutcome::RejectAtMiddlebox("ids".into())
        );
    }

    #[test]
    fn unknown_directives_are_errors() {
        let err = parse_scenario("name x\nfrobnicate y\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, .. }));
    }

    #[test]
    fn attack_without_message_is_an_error() {
        let err = parse_scenario("name x\nattack replay\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, .. }));
    }

    #[test]
    fn sub_byte_payloads_parse() {
        let s = parse_scenario(
            "name x\nentity a\nentity b\ncontext c\ntemplate t c:5\nmessage template t payload a8:5 expect accept\n",
        )
        .unwrap();
        match &s.traffic[0].kind {
            TrafficKind::Regular { payload, .. } => assert_eq!(payload.len(), 5),
            _ => unreachable!(),
        }
    }
}
