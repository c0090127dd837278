//! Embedding experiments onto the resource network and reserving the result.

pub mod complete;
pub mod greedy;
pub mod path;
pub mod substrate;
pub mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use complete::{realize_complete, Budget, Outcome};
pub use greedy::realize_greedy;
pub use path::{compose_loss, demand, path_props, PathProps};
pub use substrate::{Claim, LinkClaims, NodeTenancy, Substrate, Tenant};
pub use validate::{validate_realization, ValidateError, Violation};

use crate::experiment::{self, ExperimentRecord, Phase};
use crate::keys;
use crate::store::{with_retry, Attempt, CommitError, RetryPolicy, Store, StoreError, Txn};
use crate::xir::{ResourceUuid, Role, XirNetwork};

pub const DEFAULT_MAX_HOPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    pub max_hops: usize,
    /// Zero breaks greedy ties by uuid; anything else shuffles them reproducibly.
    pub seed: u64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            max_hops: DEFAULT_MAX_HOPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Greedy,
    Complete,
}

impl FromStr for Engine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Engine::Greedy),
            "complete" => Ok(Engine::Complete),
            _ => Err(format!("unknown engine {s:?} (greedy or complete)")),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Greedy => "greedy",
            Engine::Complete => "complete",
        })
    }
}

/// Why no embedding was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Unrealizable {
    NoCandidate { node: String },
    NoPath { link: String },
    NoEmbedding,
}

impl fmt::Display for Unrealizable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unrealizable::NoCandidate { node } => write!(f, "no resource satisfies node {node}"),
            Unrealizable::NoPath { link } => write!(f, "no feasible path for link {link}"),
            Unrealizable::NoEmbedding => f.write_str("no embedding exists"),
        }
    }
}

/// An embedding in substrate indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedding {
    pub nodes: BTreeMap<String, usize>,
    pub links: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Computed,
    Reserved,
}

/// Fields are declared in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Realization {
    pub experiment: String,
    pub link_map: BTreeMap<String, Vec<ResourceUuid>>,
    pub node_map: BTreeMap<String, ResourceUuid>,
    pub status: Status,
    pub watermark: u64,
}

impl Realization {
    pub fn from_embedding(experiment: &str, sub: &Substrate, e: &Embedding) -> Realization {
        Realization {
            experiment: experiment.to_string(),
            link_map: e
                .links
                .iter()
                .map(|(k, p)| (k.clone(), p.iter().map(|&l| sub.links[l].uuid).collect()))
                .collect(),
            node_map: e.nodes.iter().map(|(k, &r)| (k.clone(), sub.nodes[r].uuid)).collect(),
            status: Status::Computed,
            watermark: sub.watermark,
        }
    }

    /// Distinct node resources, in uuid order.
    pub fn node_resources(&self) -> BTreeSet<ResourceUuid> {
        self.node_map.values().copied().collect()
    }

    pub fn link_resources(&self) -> BTreeSet<ResourceUuid> {
        self.link_map.values().flatten().copied().collect()
    }
}

/// Runs `engine` over `sub` and returns the embedding or why there is none.
pub fn embed(
    x: &XirNetwork,
    sub: &Substrate,
    engine: Engine,
    opts: &EngineOptions,
    budget: Budget,
) -> Result<Embedding, RealizeError> {
    match engine {
        Engine::Greedy => realize_greedy(x, sub, opts).map_err(RealizeError::Unrealizable),
        Engine::Complete => match realize_complete(x, sub, opts, budget) {
            Outcome::Realized(e) => Ok(e),
            Outcome::ProvenUnrealizable(u) => Err(RealizeError::Unrealizable(u)),
            Outcome::BudgetExhausted { expanded } => Err(RealizeError::BudgetExhausted { expanded }),
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RealizeError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("experiment {experiment} is {phase}; release or dematerialize it first")]
    Busy { experiment: String, phase: &'static str },
    #[error("unrealizable: {0}")]
    Unrealizable(Unrealizable),
    #[error("search budget exhausted after {expanded} expansions")]
    BudgetExhausted { expanded: u64 },
    #[error("conflict on {0}")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<CommitError> for RealizeError {
    fn from(e: CommitError) -> Self {
        match e {
            CommitError::Conflict(k) => RealizeError::Conflict(k),
            CommitError::Io(e) => RealizeError::Store(StoreError::Io(e)),
        }
    }
}

macro_rules! attempt {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return Attempt::Failed(e.into()),
        }
    };
}
pub(crate) use attempt;

/// Computes a realization against a fresh snapshot and records it as `rz/<experiment>`.
pub fn realize(
    store: &Store,
    experiment: &str,
    x: &XirNetwork,
    engine: Engine,
    opts: &EngineOptions,
    budget: Budget,
    retry: &RetryPolicy,
) -> Result<Realization, RealizeError> {
    experiment::check_id(experiment).map_err(|e| RealizeError::Invalid(e.to_string()))?;
    if x.role != Role::Experiment {
        return Err(RealizeError::Invalid("network role is not experiment".into()));
    }
    x.validate().map_err(|e| RealizeError::Invalid(e.to_string()))?;
    with_retry(
        retry,
        || {
            let snap = store.snapshot();
            let mut txn = Txn::new(snap);
            let ekey = keys::experiment(experiment);
            if let Some(rec) = attempt!(txn.get_json::<ExperimentRecord>(&ekey)) {
                if !rec.phase.is_idle() {
                    return Attempt::Failed(RealizeError::Busy {
                        experiment: experiment.into(),
                        phase: rec.phase.name(),
                    });
                }
            }
            let sub = attempt!(Substrate::load(&snap, Some(experiment)));
            let e = match embed(x, &sub, engine, opts, budget) {
                Ok(e) => e,
                Err(err) => return Attempt::Failed(err),
            };
            let m = Realization::from_embedding(experiment, &sub, &e);
            txn.put_json(&keys::realization(experiment), &m);
            txn.put_json(
                &ekey,
                &ExperimentRecord {
                    id: experiment.into(),
                    network: x.clone(),
                    phase: Phase::Realized,
                    degraded: None,
                },
            );
            match txn.commit(store) {
                Ok(_) => Attempt::Done(m),
                Err(CommitError::Conflict(k)) => Attempt::Conflict(k),
                Err(e) => Attempt::Failed(e.into()),
            }
        },
        RealizeError::Conflict,
    )
}

#[derive(Debug, thiserror::Error)]
pub enum ReserveError {
    #[error("no realization for experiment {0}")]
    Unknown(String),
    #[error("realization of {0} is already reserved")]
    AlreadyReserved(String),
    #[error("conflict on {0}")]
    Conflict(String),
    #[error("realization no longer valid: {0:?}")]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Reserves a computed realization. Every resource and reservation cell it
/// touches is read at the realization's watermark, so any change since then
/// makes the commit conflict and nothing is reserved.
pub fn reserve(store: &Store, experiment: &str) -> Result<Realization, ReserveError> {
    let now = store.snapshot();
    let rkey = keys::realization(experiment);
    let ekey = keys::experiment(experiment);
    let (mut m, rz_ver) = now
        .get_json::<Realization>(&rkey)?
        .ok_or_else(|| ReserveError::Unknown(experiment.into()))?;
    if m.status != Status::Computed {
        return Err(ReserveError::AlreadyReserved(experiment.into()));
    }
    let (mut rec, exp_ver) = now
        .get_json::<ExperimentRecord>(&ekey)?
        .ok_or_else(|| ReserveError::Unknown(experiment.into()))?;

    let at = store.snapshot_at(m.watermark);
    let sub = Substrate::load(&at, Some(experiment))?;
    match validate_realization(&rec.network, &sub, &m) {
        Ok(()) => {}
        Err(ValidateError::Violations(v)) => return Err(ReserveError::Invalid(v)),
        Err(ValidateError::Dangling(d)) => {
            return Err(ReserveError::Invalid(vec![Violation::UnmappedNode { node: d }]))
        }
    }

    let mut txn = Txn::new(at);
    let mut guard = |key: String| -> Result<(), ReserveError> {
        if txn.get(&key).is_none() {
            return Err(ReserveError::Conflict(key));
        }
        Ok(())
    };
    for u in m.node_resources() {
        guard(keys::resource(&u))?;
    }
    for u in m.link_resources() {
        let l = &sub.links[sub.link(&u).expect("validated")];
        if l.synthetic {
            for end in l.ends {
                guard(keys::resource(&sub.nodes[end].uuid))?;
            }
        } else {
            guard(keys::resource(&u))?;
        }
    }
    for (node, u) in &m.node_map {
        let key = keys::node_reservation(u);
        let mut t: NodeTenancy = txn.get_json(&key)?.unwrap_or_default();
        t.tenants.push(Tenant {
            experiment: experiment.into(),
            node: node.clone(),
        });
        txn.put_json(&key, &t);
    }
    for (link, path) in &m.link_map {
        let need = demand(&rec.network.link(link).expect("validated").props);
        for u in path {
            let key = keys::link_reservation(u);
            let mut c: LinkClaims = txn.get_json(&key)?.unwrap_or_default();
            if need > 0 {
                c.claims.push(Claim {
                    experiment: experiment.into(),
                    link: link.clone(),
                    bps: need,
                });
                txn.put_json(&key, &c);
            }
        }
    }
    m.status = Status::Reserved;
    rec.phase = Phase::Reserved;
    let mut tx = txn.into_transaction();
    tx.read(rkey.clone(), rz_ver).read(ekey.clone(), exp_ver);
    tx.put_json(rkey, &m).put_json(ekey, &rec);
    match store.commit(tx) {
        Ok(_) => Ok(m),
        Err(CommitError::Conflict(k)) => Err(ReserveError::Conflict(k)),
        Err(CommitError::Io(e)) => Err(ReserveError::Store(StoreError::Io(e))),
    }
}

/// Removes every tenancy and claim `experiment` holds under `m` and deletes `rz/<experiment>`.
pub(crate) fn release_in(txn: &mut Txn<'_>, experiment: &str, m: &Realization) -> Result<(), StoreError> {
    for u in m.node_resources() {
        let key = keys::node_reservation(&u);
        if let Some(mut t) = txn.get_json::<NodeTenancy>(&key)? {
            t.tenants.retain(|t| t.experiment != experiment);
            if t.tenants.is_empty() {
                txn.delete(&key);
            } else {
                txn.put_json(&key, &t);
            }
        }
    }
    for u in m.link_resources() {
        let key = keys::link_reservation(&u);
        if let Some(mut c) = txn.get_json::<LinkClaims>(&key)? {
            c.claims.retain(|c| c.experiment != experiment);
            if c.claims.is_empty() {
                txn.delete(&key);
            } else {
                txn.put_json(&key, &c);
            }
        }
    }
    txn.delete(&keys::realization(experiment));
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ReleaseError {
    #[error("unknown experiment {0}")]
    Unknown(String),
    #[error("experiment {experiment} is {phase}; dematerialize it first")]
    Busy { experiment: String, phase: &'static str },
    #[error("conflict on {0}")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Returns an experiment's reserved resources to the pool. Releasing an
/// experiment that holds nothing is a no-op.
pub fn release(store: &Store, experiment: &str, retry: &RetryPolicy) -> Result<(), ReleaseError> {
    with_retry(
        retry,
        || {
            let mut txn = Txn::new(store.snapshot());
            let ekey = keys::experiment(experiment);
            let Some(mut rec) = attempt!(txn.get_json::<ExperimentRecord>(&ekey)) else {
                return Attempt::Failed(ReleaseError::Unknown(experiment.into()));
            };
            match rec.phase {
                Phase::Released | Phase::Dematerialized => return Attempt::Done(()),
                Phase::Materializing | Phase::Dematerializing => {
                    return Attempt::Failed(ReleaseError::Busy {
                        experiment: experiment.into(),
                        phase: rec.phase.name(),
                    })
                }
                Phase::Realized | Phase::Reserved => {}
            }
            if let Some(m) = attempt!(txn.get_json::<Realization>(&keys::realization(experiment))) {
                attempt!(release_in(&mut txn, experiment, &m));
            }
            rec.phase = Phase::Released;
            txn.put_json(&ekey, &rec);
            match txn.commit(store) {
                Ok(_) => Attempt::Done(()),
                Err(CommitError::Conflict(k)) => Attempt::Conflict(k),
                Err(CommitError::Io(e)) => Attempt::Failed(ReleaseError::Store(StoreError::Io(e))),
            }
        },
        ReleaseError::Conflict,
    )
}
