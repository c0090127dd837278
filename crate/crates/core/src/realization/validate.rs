//! Independent check that a realization is a legal embedding.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::path::{demand, offered};
use super::substrate::Substrate;
use super::Realization;
use crate::xir::{explain_props, match_props, Alloc, ExplainRow, ResourceUuid, XirNetwork};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    UnmappedNode { node: String },
    UnmappedLink { link: String },
    UnknownResource { uuid: ResourceUuid },
    Gateway { node: String, uuid: ResourceUuid },
    NodeMismatch { node: String, uuid: ResourceUuid, failed: Vec<String> },
    BrokenPath { link: String },
    LinkMismatch { link: String, failed: Vec<String> },
    ExclusiveShared { uuid: ResourceUuid, tenants: Vec<String> },
    SlotsExceeded { uuid: ResourceUuid, used: u32, available: u32 },
    BandwidthExceeded { uuid: ResourceUuid, demand: i64, available: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidateError {
    #[error("realization references {0}, which is not in the experiment")]
    Dangling(String),
    #[error("{} violation(s)", .0.len())]
    Violations(Vec<Violation>),
}

fn failed_paths(rows: &[ExplainRow]) -> Vec<String> {
    rows.iter().filter(|r| !r.ok()).map(|r| r.path.clone()).collect()
}

/// Follows `path` from `from`; returns the node it ends on if it is a simple walk.
fn walk(sub: &Substrate, from: usize, path: &[usize]) -> Option<usize> {
    let mut seen = HashSet::from([from]);
    let mut at = from;
    for &l in path {
        let [a, b] = sub.links[l].ends;
        at = if a == at {
            b
        } else if b == at {
            a
        } else {
            return None;
        };
        if !seen.insert(at) {
            return None;
        }
    }
    Some(at)
}

/// Checks node matching, path connectivity, link constraints and capacity
/// (slots per node, bandwidth per resource link) against `sub`'s residuals.
pub fn validate_realization(
    x: &XirNetwork,
    sub: &Substrate,
    m: &Realization,
) -> Result<(), ValidateError> {
    for id in m.node_map.keys() {
        if x.node(id).is_none() {
            return Err(ValidateError::Dangling(format!("node {id}")));
        }
    }
    for id in m.link_map.keys() {
        if x.link(id).is_none() {
            return Err(ValidateError::Dangling(format!("link {id}")));
        }
    }
    let mut v = Vec::new();
    let mut placed: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for n in &x.nodes {
        let Some(uuid) = m.node_map.get(&n.id) else {
            v.push(Violation::UnmappedNode { node: n.id.clone() });
            continue;
        };
        let Some(r) = sub.node(uuid) else {
            v.push(Violation::UnknownResource { uuid: *uuid });
            continue;
        };
        let res = &sub.nodes[r];
        if res.gateway {
            v.push(Violation::Gateway { node: n.id.clone(), uuid: *uuid });
        }
        if !match_props(&n.props, &res.props) {
            v.push(Violation::NodeMismatch {
                node: n.id.clone(),
                uuid: *uuid,
                failed: failed_paths(&explain_props(&n.props, &res.props)),
            });
        }
        placed.entry(r).or_default().push(n.id.clone());
    }
    for (&r, tenants) in &placed {
        let res = &sub.nodes[r];
        if res.alloc == Alloc::Exclusive && tenants.len() + res.used as usize > 1 {
            v.push(Violation::ExclusiveShared {
                uuid: res.uuid,
                tenants: tenants.clone(),
            });
        } else if tenants.len() as u32 > sub.residual_slots(r) {
            v.push(Violation::SlotsExceeded {
                uuid: res.uuid,
                used: tenants.len() as u32,
                available: sub.residual_slots(r),
            });
        }
    }

    let mut load: BTreeMap<usize, i64> = BTreeMap::new();
    for l in &x.links {
        let Some(uuids) = m.link_map.get(&l.id) else {
            v.push(Violation::UnmappedLink { link: l.id.clone() });
            continue;
        };
        let mut path = Vec::with_capacity(uuids.len());
        for u in uuids {
            match sub.link(u) {
                Some(i) => path.push(i),
                None => v.push(Violation::UnknownResource { uuid: *u }),
            }
        }
        if path.len() != uuids.len() {
            continue;
        }
        let ends = [&l.endpoints[0], &l.endpoints[1]]
            .map(|e| m.node_map.get(e.as_str()).and_then(|u| sub.node(u)));
        let (Some(a), Some(b)) = (ends[0], ends[1]) else {
            continue;
        };
        if walk(sub, a, &path) != Some(b) {
            v.push(Violation::BrokenPath { link: l.id.clone() });
            continue;
        }
        let off = offered(sub, &path);
        if !match_props(&l.props, &off) {
            v.push(Violation::LinkMismatch {
                link: l.id.clone(),
                failed: failed_paths(&explain_props(&l.props, &off)),
            });
        }
        let need = demand(&l.props);
        for s in path {
            *load.entry(s).or_default() += need;
        }
    }
    for (s, need) in load {
        if let Some(avail) = sub.residual_bps(s) {
            if need > avail {
                v.push(Violation::BandwidthExceeded {
                    uuid: sub.links[s].uuid,
                    demand: need,
                    available: avail,
                });
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(ValidateError::Violations(v))
    }
}
