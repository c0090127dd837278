//! Driving reserved resources to their configured state through the stateboard.
//!
//! Every mapped resource gets an entry `sb/<experiment>/<uuid>` holding its
//! current and target state. Agents claim entries with a transactional
//! lease, issue one command through the site commander, and record the
//! outcome. Nothing but the store is shared between agents.

pub mod agent;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

pub use agent::{Agent, MatContext, Step};

use crate::commissioning::SiteRecord;
use crate::experiment::{ExperimentRecord, Phase};
use crate::hummingbird::{self, Binding, HbError, Mechanism};
use crate::keys;
use crate::realization::{self, attempt, Realization, Status, Substrate};
use crate::site::{DeviceState, Verb};
use crate::store::{with_retry, Attempt, CommitError, RetryPolicy, Store, StoreError, Txn};
use crate::xir::{satisfies, Constraint, Prop, PropertyMap, ResourceUuid, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatState {
    /// Not yet contacted.
    Zero,
    Off,
    On,
    Setup,
    Configured,
}

impl MatState {
    pub fn name(self) -> &'static str {
        match self {
            MatState::Zero => "zero",
            MatState::Off => "off",
            MatState::On => "on",
            MatState::Setup => "setup",
            MatState::Configured => "configured",
        }
    }
}

impl fmt::Display for MatState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<DeviceState> for MatState {
    fn from(s: DeviceState) -> Self {
        match s {
            DeviceState::Off => MatState::Off,
            DeviceState::On => MatState::On,
            DeviceState::Setup => MatState::Setup,
            DeviceState::Configured => MatState::Configured,
        }
    }
}

/// The next command on the way from `current` to `target`. Forward progress
/// follows zero→off→on→setup→configured; anything past the target, and the
/// zero state, is reset with a power-off first.
pub fn next_step(current: MatState, target: MatState) -> Option<(Verb, MatState)> {
    use MatState::*;
    if current == target {
        return None;
    }
    if target == Off || target == Zero || current > target || current == Zero {
        return Some((Verb::PowerOff, Off));
    }
    match current {
        Off => Some((Verb::PowerOn, On)),
        On => Some((Verb::Setup, Setup)),
        Setup => Some((Verb::Configure, Configured)),
        Zero | Configured => unreachable!(),
    }
}

/// Whether the stateboard may record `before` → `after`.
pub fn legal_edge(before: MatState, after: MatState) -> bool {
    use MatState::*;
    before == after || after == Off || matches!((before, after), (Off, On) | (On, Setup) | (Setup, Configured))
}

/// Fields are in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub acquired_at: u64,
    pub agent: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payloads {
    pub configure: Json,
    pub setup: Json,
}

/// Fields are in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateboardEntry {
    pub attempts: u32,
    pub current: MatState,
    pub experiment: String,
    pub last_error: Option<String>,
    pub lease: Option<Lease>,
    pub payload: Payloads,
    /// Clock time before which the entry is left alone after a failure.
    pub retry_at: u64,
    pub site: String,
    pub target: MatState,
    pub uuid: ResourceUuid,
}

#[derive(Debug, Clone, Copy)]
pub struct MatConfig {
    pub lease_ttl_us: u64,
    /// Entries failing more often than this are left for an operator.
    pub retry_cap: u32,
    pub backoff_base_us: u64,
    pub backoff_cap_us: u64,
}

impl Default for MatConfig {
    fn default() -> Self {
        MatConfig {
            lease_ttl_us: 10_000_000,
            retry_cap: 25,
            backoff_base_us: 500_000,
            backoff_cap_us: 8_000_000,
        }
    }
}

impl MatConfig {
    pub fn backoff_us(&self, attempts: u32) -> u64 {
        let shift = attempts.saturating_sub(1).min(30);
        self.backoff_base_us.saturating_mul(1 << shift).min(self.backoff_cap_us)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MatError {
    #[error("unknown experiment {0}")]
    Unknown(String),
    #[error("experiment {experiment} is {phase}, not reserved")]
    NotReserved { experiment: String, phase: &'static str },
    #[error("experiment {0} is already materialized")]
    Duplicate(String),
    #[error("isolation: {0}")]
    Isolation(#[from] HbError),
    #[error("conflict on {0}")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn commit_attempt<T>(txn: Txn<'_>, store: &Store, value: T) -> Attempt<T, MatError> {
    match txn.commit(store) {
        Ok(_) => Attempt::Done(value),
        Err(CommitError::Conflict(k)) => Attempt::Conflict(k),
        Err(CommitError::Io(e)) => Attempt::Failed(MatError::Store(StoreError::Io(e))),
    }
}

/// The concrete string an experiment asks for under `key`, resolved against
/// what the resource offers when the request is a disjunction.
fn requested(req: &PropertyMap, offered: &PropertyMap, key: &str) -> Option<String> {
    let pick = |c: &Constraint| match c {
        Constraint::Select(s) | Constraint::Eq(Value::Str(s)) => Some(s.clone()),
        _ => None,
    };
    match req.child(key)? {
        Prop::Value(Value::Str(s)) => Some(s.clone()),
        Prop::Constraint(Constraint::Choice(cs)) => {
            let off = offered.get_value(key);
            cs.iter()
                .find(|c| off.is_some_and(|v| satisfies(c, v)))
                .or(cs.first())
                .and_then(pick)
        }
        Prop::Constraint(c) => pick(c),
        _ => None,
    }
}

fn setup_payload(req: &PropertyMap, offered: &PropertyMap) -> Json {
    let mut p = serde_json::Map::new();
    for key in ["image", "firmware"] {
        if let Some(v) = requested(req, offered, key) {
            p.insert(key.into(), Json::String(v));
        }
    }
    Json::Object(p)
}

fn binding_view(b: &Binding) -> Json {
    json!({ "link": b.link, "mechanism": b.local.mechanism, "tag": b.local.tag, "vni": b.vni })
}

/// Writes one entry per mapped resource, allocates a VNI per experiment
/// link and a local tag at each site the link touches, all in one
/// transaction. Convergence happens later, through the agents.
pub fn materialize(store: &Store, experiment: &str, retry: &RetryPolicy) -> Result<usize, MatError> {
    with_retry(
        retry,
        || {
            let snap = store.snapshot();
            let mut txn = Txn::new(snap);
            let ekey = keys::experiment(experiment);
            let Some(mut rec) = attempt!(txn.get_json::<ExperimentRecord>(&ekey)) else {
                return Attempt::Failed(MatError::Unknown(experiment.into()));
            };
            match rec.phase {
                Phase::Reserved => {}
                Phase::Materializing => return Attempt::Failed(MatError::Duplicate(experiment.into())),
                p => {
                    return Attempt::Failed(MatError::NotReserved {
                        experiment: experiment.into(),
                        phase: p.name(),
                    })
                }
            }
            let m = match attempt!(txn.get_json::<Realization>(&keys::realization(experiment))) {
                Some(m) if m.status == Status::Reserved => m,
                _ => {
                    return Attempt::Failed(MatError::NotReserved {
                        experiment: experiment.into(),
                        phase: rec.phase.name(),
                    })
                }
            };
            let sub = attempt!(Substrate::load(&snap, Some(experiment)));
            let site_of = |u: &ResourceUuid| sub.node(u).map(|i| sub.nodes[i].site.clone());

            let mut sites: BTreeMap<String, Vec<Mechanism>> = BTreeMap::new();
            let mut bindings = Vec::new();
            for l in &rec.network.links {
                let vni = attempt!(hummingbird::allocate_vni(&mut txn, experiment, &l.id));
                let mut per_site: BTreeMap<String, BTreeSet<ResourceUuid>> = BTreeMap::new();
                for e in &l.endpoints {
                    let u = m.node_map[e];
                    per_site.entry(site_of(&u).unwrap_or_default()).or_default().insert(u);
                }
                for (site, endpoints) in per_site {
                    if !sites.contains_key(&site) {
                        let iso = attempt!(txn.get_json::<SiteRecord>(&keys::site(&site)))
                            .map(|s| s.isolation)
                            .unwrap_or_default();
                        sites.insert(site.clone(), iso);
                    }
                    let iso = &sites[&site];
                    let mech = iso.first().copied().unwrap_or(Mechanism::Vlan);
                    let local = attempt!(hummingbird::bind_local(&mut txn, &site, iso, vni, mech));
                    bindings.push(Binding {
                        site,
                        experiment: experiment.into(),
                        link: l.id.clone(),
                        vni,
                        local,
                        endpoints,
                    });
                }
            }
            if !bindings.is_empty() {
                txn.put_json(&keys::hb_experiment(experiment), &bindings);
            }

            let mut by_uuid: BTreeMap<ResourceUuid, &str> = BTreeMap::new();
            for (node, u) in &m.node_map {
                by_uuid.entry(*u).or_insert(node);
            }
            for (u, node) in &by_uuid {
                let key = keys::stateboard(experiment, u);
                if txn.get(&key).is_some() {
                    return Attempt::Failed(MatError::Duplicate(experiment.into()));
                }
                let xnode = rec.network.node(node).expect("realized node");
                let r = &sub.nodes[sub.node(u).expect("reserved resource")];
                let mine: Vec<Json> = bindings
                    .iter()
                    .filter(|b| b.site == r.site && b.endpoints.contains(u))
                    .map(binding_view)
                    .collect();
                let entry = StateboardEntry {
                    attempts: 0,
                    current: MatState::Zero,
                    experiment: experiment.into(),
                    last_error: None,
                    lease: None,
                    payload: Payloads {
                        configure: json!({ "bindings": mine, "node": node, "props": xnode.props }),
                        setup: setup_payload(&xnode.props, &r.props),
                    },
                    retry_at: 0,
                    site: r.site.clone(),
                    target: MatState::Configured,
                    uuid: *u,
                };
                txn.put_json(&key, &entry);
            }
            rec.phase = Phase::Materializing;
            txn.put_json(&ekey, &rec);
            commit_attempt(txn, store, by_uuid.len())
        },
        MatError::Conflict,
    )
}

/// Starts teardown: every entry's target becomes off. An experiment that
/// never reached a site is released on the spot. Repeated calls are no-ops.
pub fn dematerialize(store: &Store, experiment: &str, degrade: Option<&str>, retry: &RetryPolicy) -> Result<Phase, MatError> {
    with_retry(
        retry,
        || {
            let mut txn = Txn::new(store.snapshot());
            let ekey = keys::experiment(experiment);
            let Some(mut rec) = attempt!(txn.get_json::<ExperimentRecord>(&ekey)) else {
                return Attempt::Failed(MatError::Unknown(experiment.into()));
            };
            if let Some(reason) = degrade {
                rec.degraded.get_or_insert_with(|| reason.to_string());
            }
            let entries = txn.keys(&keys::stateboard_prefix(experiment));
            match rec.phase {
                Phase::Dematerialized | Phase::Released | Phase::Dematerializing => {
                    if degrade.is_some() {
                        txn.put_json(&ekey, &rec);
                    }
                    return commit_attempt(txn, store, rec.phase);
                }
                Phase::Realized | Phase::Reserved => {}
                Phase::Materializing if !entries.is_empty() => {
                    for key in &entries {
                        let mut e: StateboardEntry = attempt!(txn.get_json(key)).expect("listed");
                        e.target = MatState::Off;
                        e.attempts = 0;
                        e.last_error = None;
                        e.retry_at = 0;
                        txn.put_json(key, &e);
                    }
                    rec.phase = Phase::Dematerializing;
                    txn.put_json(&ekey, &rec);
                    return commit_attempt(txn, store, rec.phase);
                }
                Phase::Materializing => {}
            }
            attempt!(teardown_in(&mut txn, experiment, &entries));
            rec.phase = Phase::Dematerialized;
            txn.put_json(&ekey, &rec);
            commit_attempt(txn, store, rec.phase)
        },
        MatError::Conflict,
    )
}

/// Deletes entries, frees isolation allocations and releases reservations.
pub(crate) fn teardown_in(txn: &mut Txn<'_>, experiment: &str, entries: &[String]) -> Result<(), StoreError> {
    for key in entries {
        txn.guard(key);
        txn.delete(key);
    }
    let hkey = keys::hb_experiment(experiment);
    if let Some(bindings) = txn.get_json::<Vec<Binding>>(&hkey)? {
        hummingbird::free_bindings(txn, experiment, &bindings);
    }
    if let Some(m) = txn.get_json::<Realization>(&keys::realization(experiment))? {
        realization::release_in(txn, experiment, &m)?;
    }
    Ok(())
}

/// Isolation bindings currently allocated to an experiment.
pub fn bindings(store: &Store, experiment: &str) -> Result<Vec<Binding>, StoreError> {
    Ok(store
        .snapshot()
        .get_json::<Vec<Binding>>(&keys::hb_experiment(experiment))?
        .map(|(b, _)| b)
        .unwrap_or_default())
}

/// Fields are in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntryError {
    pub attempts: u32,
    pub error: String,
    pub uuid: ResourceUuid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusReport {
    pub configured: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
    pub errors: Vec<EntryError>,
    pub experiment: String,
    pub phase: Phase,
    pub state: String,
    pub total: usize,
}

pub fn experiment_status(store: &Store, experiment: &str, cfg: &MatConfig) -> Result<StatusReport, MatError> {
    let snap = store.snapshot();
    let (rec, _) = snap
        .get_json::<ExperimentRecord>(&keys::experiment(experiment))?
        .ok_or_else(|| MatError::Unknown(experiment.into()))?;
    let entries: Vec<StateboardEntry> = snap
        .scan_json(&keys::stateboard_prefix(experiment))?
        .into_iter()
        .map(|(_, e, _)| e)
        .collect();
    let configured = entries.iter().filter(|e| e.current == MatState::Configured).count();
    let errors: Vec<EntryError> = entries
        .iter()
        .filter(|e| e.attempts > cfg.retry_cap && e.current != e.target)
        .map(|e| EntryError {
            attempts: e.attempts,
            error: e.last_error.clone().unwrap_or_default(),
            uuid: e.uuid,
        })
        .collect();
    let state = if !errors.is_empty() || rec.degraded.is_some() && rec.phase != Phase::Dematerialized {
        "degraded"
    } else {
        match rec.phase {
            Phase::Materializing
                if entries.iter().all(|e| e.current == MatState::Configured && e.target == MatState::Configured) =>
            {
                "materialized"
            }
            p => p.name(),
        }
    };
    Ok(StatusReport {
        configured,
        degraded: rec.degraded.clone(),
        errors,
        experiment: experiment.into(),
        phase: rec.phase,
        state: state.into(),
        total: entries.len(),
    })
}
