//! Constraint satisfaction over concrete property values.

use serde::Serialize;

use super::{Constraint, Prop, PropertyMap, Value};

/// Whether `v` satisfies `c`. Type mismatches are `false`, never errors.
pub fn satisfies(c: &Constraint, v: &Value) -> bool {
    match (c, v) {
        (Constraint::Eq(want), got) => want == got,
        (Constraint::Lt(k), Value::Int(x)) => x < k,
        (Constraint::Gt(k), Value::Int(x)) => x > k,
        (Constraint::Le(k), Value::Int(x)) => x <= k,
        (Constraint::Ge(k), Value::Int(x)) => x >= k,
        (Constraint::Select(s), Value::Set(set)) => set.contains(s),
        (Constraint::Select(s), Value::Str(x)) => x == s,
        (Constraint::Choice(cs), v) => cs.iter().any(|c| satisfies(c, v)),
        _ => false,
    }
}

fn leaf_holds(required: &Prop, offered: Option<&Prop>) -> bool {
    match (required, offered) {
        (Prop::Map(req), Some(Prop::Map(off))) => match_props(req, off),
        // An empty required subtree has no leaves to violate.
        (Prop::Map(req), _) => req.leaf_count() == 0,
        (Prop::Value(want), Some(Prop::Value(got))) => want == got,
        (Prop::Constraint(c), Some(Prop::Value(got))) => satisfies(c, got),
        _ => false,
    }
}

/// True iff every leaf of `required` is present in `offered` and satisfied.
/// Concrete required leaves act as `eq`; extra offered paths are ignored.
pub fn match_props(required: &PropertyMap, offered: &PropertyMap) -> bool {
    required.iter().all(|(k, req)| {
        let off = offered.child(k);
        leaf_holds(req, off)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Satisfied,
    Violated,
    Absent,
}

/// One per-leaf line of a satisfaction report. Fields are in key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExplainRow {
    pub constraint: Constraint,
    pub offered: Option<Prop>,
    pub path: String,
    pub verdict: Verdict,
}

impl ExplainRow {
    pub fn ok(&self) -> bool {
        self.verdict == Verdict::Satisfied
    }
}

/// Per-leaf satisfaction report. All rows satisfied iff `match_props` holds.
pub fn explain_props(required: &PropertyMap, offered: &PropertyMap) -> Vec<ExplainRow> {
    let mut rows = Vec::new();
    explain_into(required, Some(offered), "", &mut rows);
    rows
}

fn explain_into(req: &PropertyMap, off: Option<&PropertyMap>, prefix: &str, rows: &mut Vec<ExplainRow>) {
    for (k, r) in req.iter() {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let o = off.and_then(|m| m.child(k));
        match r {
            Prop::Map(sub) => {
                let sub_off = match o {
                    Some(Prop::Map(m)) => Some(m),
                    _ => None,
                };
                explain_into(sub, sub_off, &path, rows);
            }
            leaf => {
                let constraint = match leaf {
                    Prop::Constraint(c) => c.clone(),
                    Prop::Value(v) => Constraint::Eq(v.clone()),
                    Prop::Map(_) => unreachable!(),
                };
                let verdict = match o {
                    None => Verdict::Absent,
                    Some(_) if leaf_holds(leaf, o) => Verdict::Satisfied,
                    Some(_) => Verdict::Violated,
                };
                rows.push(ExplainRow {
                    path,
                    constraint,
                    offered: o.cloned(),
                    verdict,
                });
            }
        }
    }
}
