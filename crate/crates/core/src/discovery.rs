//! Candidate discovery: which available resources could host each experiment node.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::realization::Substrate;
use crate::store::{Snapshot, StoreError};
use crate::xir::{explain_props, match_props, ExplainRow, ResourceUuid, Role, XirNetwork};

/// Fields are in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateMap {
    pub entries: BTreeMap<String, BTreeSet<ResourceUuid>>,
    pub watermark: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("unknown experiment node {0:?}")]
    UnknownNode(String),
    #[error("unknown resource {0}")]
    UnknownResource(ResourceUuid),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn check(x: &XirNetwork) -> Result<(), DiscoveryError> {
    if x.role != Role::Experiment {
        return Err(DiscoveryError::Invalid("network role is not experiment".into()));
    }
    x.validate().map_err(|e| DiscoveryError::Invalid(e.to_string()))
}

/// Candidate sets over an already loaded substrate.
pub fn candidates(x: &XirNetwork, sub: &Substrate) -> CandidateMap {
    let entries = x
        .nodes
        .iter()
        .map(|n| {
            let set = (0..sub.nodes.len())
                .filter(|&r| sub.placeable(r) && match_props(&n.props, &sub.nodes[r].props))
                .map(|r| sub.nodes[r].uuid)
                .collect();
            (n.id.clone(), set)
        })
        .collect();
    CandidateMap {
        entries,
        watermark: sub.watermark,
    }
}

/// Matches every experiment node against the resources free at `snap`.
/// Link feasibility is left to realization.
pub fn discover(snap: &Snapshot<'_>, x: &XirNetwork) -> Result<CandidateMap, DiscoveryError> {
    check(x)?;
    Ok(candidates(x, &Substrate::load(snap, None)?))
}

/// Per-leaf report of experiment node `node` against resource `uuid`.
pub fn explain(
    snap: &Snapshot<'_>,
    x: &XirNetwork,
    node: &str,
    uuid: &ResourceUuid,
) -> Result<Vec<ExplainRow>, DiscoveryError> {
    check(x)?;
    let n = x.node(node).ok_or_else(|| DiscoveryError::UnknownNode(node.into()))?;
    let sub = Substrate::load(snap, None)?;
    let r = sub.node(uuid).ok_or(DiscoveryError::UnknownResource(*uuid))?;
    Ok(explain_props(&n.props, &sub.nodes[r].props))
}

/// Why a node has the candidates it has: the count, and the leaf report
/// against the resource that satisfies the most leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeReport {
    pub candidates: usize,
    pub closest: Option<ResourceUuid>,
    pub node: String,
    pub rows: Vec<ExplainRow>,
}

pub fn report(x: &XirNetwork, sub: &Substrate) -> Vec<NodeReport> {
    let cands = candidates(x, sub);
    x.nodes
        .iter()
        .map(|n| {
            let mut best: Option<(usize, ResourceUuid, Vec<ExplainRow>)> = None;
            for r in sub.nodes.iter().filter(|r| !r.gateway) {
                let rows = explain_props(&n.props, &r.props);
                let score = rows.iter().filter(|row| row.ok()).count();
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, r.uuid, rows));
                }
            }
            let (closest, rows) = match best {
                Some((_, u, rows)) => (Some(u), rows),
                None => (None, Vec::new()),
            };
            NodeReport {
                candidates: cands.entries[&n.id].len(),
                closest,
                node: n.id.clone(),
                rows,
            }
        })
        .collect()
}
