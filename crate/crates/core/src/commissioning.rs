//! Adding and removing resource networks from the managed pool.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::hummingbird::Mechanism;
use crate::keys;
use crate::realization::{attempt, LinkClaims, NodeTenancy};
use crate::store::{with_retry, Attempt, CommitError, RetryPolicy, Store, StoreError, Txn};
use crate::xir::{valid_id, ResourceUuid, Role, XirNetwork};

/// Fields are declared in key order so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    /// Where the site commander listens.
    pub endpoint: String,
    pub id: String,
    pub isolation: Vec<Mechanism>,
    pub model: XirNetwork,
}

/// `rsrc/<uuid>`: which site element a uuid names. Rewritten whenever the
/// element's model changes, so reservations computed earlier conflict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceIndex {
    pub id: String,
    pub kind: ResourceKind,
    pub site: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Node,
    Link,
}

#[derive(Debug, thiserror::Error)]
pub enum CommissionError {
    #[error("malformed network: {0}")]
    Malformed(String),
    #[error("id {0:?} already present at site")]
    DuplicateId(String),
    #[error("uuid {0} already in use")]
    UuidCollision(ResourceUuid),
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("site {0} needs an endpoint on first commission")]
    MissingEndpoint(String),
    #[error("node {0:?} is not in the site model")]
    UnknownNode(String),
    #[error("resources in use by {experiments:?}")]
    InUse { experiments: Vec<String> },
    #[error("removal affects surviving resources {survivors:?}; use fragmented mode")]
    Impact { survivors: Vec<String> },
    #[error("replacement node set differs: missing {missing:?}, unexpected {unexpected:?}")]
    NodeSetMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("conflict on {0}")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn commit_attempt<T>(txn: Txn<'_>, store: &Store, value: T) -> Attempt<T, CommissionError> {
    match txn.commit(store) {
        Ok(_) => Attempt::Done(value),
        Err(CommitError::Conflict(k)) => Attempt::Conflict(k),
        Err(CommitError::Io(e)) => Attempt::Failed(CommissionError::Store(StoreError::Io(e))),
    }
}

fn index_cells(txn: &mut Txn<'_>, site: &str, net: &XirNetwork) {
    for n in &net.nodes {
        let u = n.uuid.expect("assigned");
        txn.put_json(
            &keys::resource(&u),
            &ResourceIndex {
                id: n.id.clone(),
                kind: ResourceKind::Node,
                site: site.into(),
            },
        );
    }
    for l in &net.links {
        let u = l.uuid.expect("assigned");
        txn.put_json(
            &keys::resource(&u),
            &ResourceIndex {
                id: l.id.clone(),
                kind: ResourceKind::Link,
                site: site.into(),
            },
        );
    }
}

fn check_resource_net(site: &str, net: &XirNetwork) -> Result<(), CommissionError> {
    valid_id(site).map_err(|e| CommissionError::Malformed(format!("site id: {e}")))?;
    if net.role != Role::Resource {
        return Err(CommissionError::Malformed("network role is not resource".into()));
    }
    net.validate().map_err(|e| CommissionError::Malformed(e.to_string()))?;
    for n in &net.nodes {
        if let Some(s) = &n.site {
            if s != site {
                return Err(CommissionError::Malformed(format!(
                    "node {} declares site {s}, commissioned into {site}",
                    n.id
                )));
            }
        }
    }
    for u in net
        .nodes
        .iter()
        .filter_map(|n| n.uuid)
        .chain(net.links.iter().filter_map(|l| l.uuid))
    {
        if !u.is_random() {
            return Err(CommissionError::Malformed(format!("uuid {u} is not a random (v4) uuid")));
        }
    }
    Ok(())
}

/// Site-level settings used when a commission creates the site.
#[derive(Debug, Clone, Default)]
pub struct SiteSettings {
    pub endpoint: Option<String>,
    pub isolation: Option<Vec<Mechanism>>,
}

/// Adds `net` to `site`'s model, assigning random uuids where missing.
/// Returns the node uuids then the link uuids, in document order.
pub fn commission(
    store: &Store,
    site: &str,
    net: &XirNetwork,
    settings: &SiteSettings,
    retry: &RetryPolicy,
) -> Result<Vec<ResourceUuid>, CommissionError> {
    check_resource_net(site, net)?;
    with_retry(
        retry,
        || {
            let mut txn = Txn::new(store.snapshot());
            let skey = keys::site(site);
            let mut rec = match attempt!(txn.get_json::<SiteRecord>(&skey)) {
                Some(mut rec) => {
                    if let Some(iso) = &settings.isolation {
                        rec.isolation = iso.clone();
                    }
                    if let Some(ep) = &settings.endpoint {
                        rec.endpoint = ep.clone();
                    }
                    rec
                }
                None => {
                    let Some(endpoint) = settings.endpoint.clone() else {
                        return Attempt::Failed(CommissionError::MissingEndpoint(site.into()));
                    };
                    SiteRecord {
                        endpoint,
                        id: site.into(),
                        isolation: settings.isolation.clone().unwrap_or(vec![Mechanism::Vlan]),
                        model: XirNetwork::new(Role::Resource),
                    }
                }
            };
            let taken: HashSet<&str> = rec
                .model
                .nodes
                .iter()
                .map(|n| n.id.as_str())
                .chain(rec.model.links.iter().map(|l| l.id.as_str()))
                .collect();
            for id in net.nodes.iter().map(|n| &n.id).chain(net.links.iter().map(|l| &l.id)) {
                if taken.contains(id.as_str()) {
                    return Attempt::Failed(CommissionError::DuplicateId(id.clone()));
                }
            }

            let mut fresh = net.clone();
            let mut used: HashSet<ResourceUuid> = fresh
                .nodes
                .iter()
                .filter_map(|n| n.uuid)
                .chain(fresh.links.iter().filter_map(|l| l.uuid))
                .collect();
            let mut assign = |slot: &mut Option<ResourceUuid>, txn: &mut Txn<'_>| {
                if let Some(u) = *slot {
                    return if txn.get(&keys::resource(&u)).is_some() {
                        Err(CommissionError::UuidCollision(u))
                    } else {
                        Ok(())
                    };
                }
                loop {
                    let u = ResourceUuid::new_random();
                    if txn.get(&keys::resource(&u)).is_none() && used.insert(u) {
                        *slot = Some(u);
                        return Ok(());
                    }
                }
            };
            for n in &mut fresh.nodes {
                n.site = Some(site.into());
                attempt!(assign(&mut n.uuid, &mut txn));
            }
            for l in &mut fresh.links {
                attempt!(assign(&mut l.uuid, &mut txn));
            }
            index_cells(&mut txn, site, &fresh);
            let uuids = fresh
                .nodes
                .iter()
                .filter_map(|n| n.uuid)
                .chain(fresh.links.iter().filter_map(|l| l.uuid))
                .collect();
            rec.model.nodes.extend(fresh.nodes);
            rec.model.links.extend(fresh.links);
            txn.put_json(&skey, &rec);
            commit_attempt(txn, store, uuids)
        },
        CommissionError::Conflict,
    )
}

/// What a decommission took out of the pool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Removed {
    pub links: Vec<ResourceUuid>,
    pub nodes: Vec<ResourceUuid>,
}

/// Experiments holding any of `uuids`, sorted and deduplicated.
fn holders(txn: &mut Txn<'_>, nodes: &[ResourceUuid], links: &[ResourceUuid]) -> Result<Vec<String>, StoreError> {
    let mut out = BTreeSet::new();
    for u in nodes {
        if let Some(t) = txn.get_json::<NodeTenancy>(&keys::node_reservation(u))? {
            out.extend(t.tenants.into_iter().map(|t| t.experiment));
        }
    }
    for u in links {
        if let Some(c) = txn.get_json::<LinkClaims>(&keys::link_reservation(u))? {
            out.extend(c.claims.into_iter().map(|c| c.experiment));
        }
    }
    Ok(out.into_iter().collect())
}

/// Experiments that hold resources among `node_ids` at `site`.
pub fn experiments_using(store: &Store, site: &str, node_ids: &[String]) -> Result<Vec<String>, CommissionError> {
    let mut txn = Txn::new(store.snapshot());
    let rec: SiteRecord = txn
        .get_json(&keys::site(site))?
        .ok_or_else(|| CommissionError::UnknownSite(site.into()))?;
    let ids: HashSet<&str> = node_ids.iter().map(String::as_str).collect();
    let nodes: Vec<_> = rec
        .model
        .nodes
        .iter()
        .filter(|n| ids.contains(n.id.as_str()))
        .filter_map(|n| n.uuid)
        .collect();
    let links: Vec<_> = rec
        .model
        .links
        .iter()
        .filter(|l| l.endpoints.iter().any(|e| ids.contains(e.as_str())))
        .filter_map(|l| l.uuid)
        .collect();
    Ok(holders(&mut txn, &nodes, &links)?)
}

/// Surviving nodes adjacent to a connected group of removed nodes that
/// touches two or more survivors. Removing such a group would cut paths
/// between them, which simple mode must not do.
pub fn impact(model: &XirNetwork, removed: &HashSet<&str>) -> Vec<String> {
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for l in &model.links {
        let [a, b] = [l.endpoints[0].as_str(), l.endpoints[1].as_str()];
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = BTreeSet::new();
    let mut order: Vec<&str> = removed.iter().copied().collect();
    order.sort();
    for start in order {
        if !seen.insert(start) {
            continue;
        }
        let mut survivors = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &m in adj.get(n).into_iter().flatten() {
                if removed.contains(m) {
                    if seen.insert(m) {
                        stack.push(m);
                    }
                } else {
                    survivors.insert(m);
                }
            }
        }
        if survivors.len() >= 2 {
            out.extend(survivors.into_iter().map(String::from));
        }
    }
    out.into_iter().collect()
}

/// Removes nodes and their incident links as one transaction. Refuses when
/// any of them is reserved (unless `allow_in_use`) or when the removal would
/// change the connectivity of what remains.
pub fn decommission_simple(
    store: &Store,
    site: &str,
    node_ids: &[String],
    allow_in_use: bool,
    retry: &RetryPolicy,
) -> Result<Removed, CommissionError> {
    with_retry(
        retry,
        || {
            let mut txn = Txn::new(store.snapshot());
            let skey = keys::site(site);
            let Some(mut rec) = attempt!(txn.get_json::<SiteRecord>(&skey)) else {
                return Attempt::Failed(CommissionError::UnknownSite(site.into()));
            };
            let removed: HashSet<&str> = node_ids.iter().map(String::as_str).collect();
            for id in node_ids {
                if rec.model.node(id).is_none() {
                    return Attempt::Failed(CommissionError::UnknownNode(id.clone()));
                }
            }
            let survivors = impact(&rec.model, &removed);
            if !survivors.is_empty() {
                return Attempt::Failed(CommissionError::Impact { survivors });
            }
            let gone = Removed {
                nodes: rec
                    .model
                    .nodes
                    .iter()
                    .filter(|n| removed.contains(n.id.as_str()))
                    .filter_map(|n| n.uuid)
                    .collect(),
                links: rec
                    .model
                    .links
                    .iter()
                    .filter(|l| l.endpoints.iter().any(|e| removed.contains(e.as_str())))
                    .filter_map(|l| l.uuid)
                    .collect(),
            };
            let users = attempt!(holders(&mut txn, &gone.nodes, &gone.links));
            if !users.is_empty() && !allow_in_use {
                return Attempt::Failed(CommissionError::InUse { experiments: users });
            }
            for u in gone.nodes.iter().chain(&gone.links) {
                txn.guard(&keys::resource(u));
                txn.delete(&keys::resource(u));
            }
            rec.model.nodes.retain(|n| !removed.contains(n.id.as_str()));
            rec.model
                .links
                .retain(|l| !l.endpoints.iter().any(|e| removed.contains(e.as_str())));
            txn.put_json(&skey, &rec);
            commit_attempt(txn, store, gone)
        },
        CommissionError::Conflict,
    )
}

/// Replaces the site model wholesale after removing `node_ids`. Only the
/// structure is checked: the replacement must hold exactly the surviving
/// nodes, which keep their uuids. Capacity figures are the site's business.
pub fn decommission_fragmented(
    store: &Store,
    site: &str,
    node_ids: &[String],
    replacement: &XirNetwork,
    retry: &RetryPolicy,
) -> Result<Removed, CommissionError> {
    check_resource_net(site, replacement)?;
    with_retry(
        retry,
        || {
            let mut txn = Txn::new(store.snapshot());
            let skey = keys::site(site);
            let Some(mut rec) = attempt!(txn.get_json::<SiteRecord>(&skey)) else {
                return Attempt::Failed(CommissionError::UnknownSite(site.into()));
            };
            let removed: HashSet<&str> = node_ids.iter().map(String::as_str).collect();
            for id in node_ids {
                if rec.model.node(id).is_none() {
                    return Attempt::Failed(CommissionError::UnknownNode(id.clone()));
                }
            }
            let expect: BTreeSet<&str> = rec
                .model
                .nodes
                .iter()
                .map(|n| n.id.as_str())
                .filter(|id| !removed.contains(id))
                .collect();
            let got: BTreeSet<&str> = replacement.nodes.iter().map(|n| n.id.as_str()).collect();
            if expect != got {
                return Attempt::Failed(CommissionError::NodeSetMismatch {
                    missing: expect.difference(&got).map(|s| s.to_string()).collect(),
                    unexpected: got.difference(&expect).map(|s| s.to_string()).collect(),
                });
            }

            let old_nodes: BTreeMap<&str, ResourceUuid> = rec
                .model
                .nodes
                .iter()
                .filter_map(|n| Some((n.id.as_str(), n.uuid?)))
                .collect();
            let old_links: BTreeMap<&str, ResourceUuid> = rec
                .model
                .links
                .iter()
                .filter_map(|l| Some((l.id.as_str(), l.uuid?)))
                .collect();
            let mut next = replacement.clone();
            for n in &mut next.nodes {
                let old = old_nodes[n.id.as_str()];
                match n.uuid {
                    Some(u) if u != old => {
                        return Attempt::Failed(CommissionError::Malformed(format!(
                            "node {} changes uuid from {old} to {u}",
                            n.id
                        )))
                    }
                    _ => n.uuid = Some(old),
                }
                n.site = Some(site.into());
            }
            let mut keep_links = HashSet::new();
            for l in &mut next.links {
                match (old_links.get(l.id.as_str()), l.uuid) {
                    (Some(&old), Some(u)) if u != old => {
                        return Attempt::Failed(CommissionError::Malformed(format!(
                            "link {} changes uuid from {old} to {u}",
                            l.id
                        )))
                    }
                    (Some(&old), _) => l.uuid = Some(old),
                    (None, Some(u)) => {
                        if attempt!(txn.get_json::<ResourceIndex>(&keys::resource(&u))).is_some() {
                            return Attempt::Failed(CommissionError::UuidCollision(u));
                        }
                    }
                    (None, None) => l.uuid = Some(ResourceUuid::new_random()),
                }
                keep_links.insert(l.uuid.unwrap());
            }
            let gone = Removed {
                nodes: rec
                    .model
                    .nodes
                    .iter()
                    .filter(|n| removed.contains(n.id.as_str()))
                    .filter_map(|n| n.uuid)
                    .collect(),
                links: rec
                    .model
                    .links
                    .iter()
                    .filter_map(|l| l.uuid)
                    .filter(|u| !keep_links.contains(u))
                    .collect(),
            };
            let users = attempt!(holders(&mut txn, &gone.nodes, &gone.links));
            if !users.is_empty() {
                return Attempt::Failed(CommissionError::InUse { experiments: users });
            }
            for u in gone.nodes.iter().chain(&gone.links) {
                txn.guard(&keys::resource(u));
                txn.delete(&keys::resource(u));
            }
            for u in old_nodes.values().chain(old_links.values()) {
                txn.guard(&keys::resource(u));
            }
            index_cells(&mut txn, site, &next);
            rec.model = next;
            txn.put_json(&skey, &rec);
            commit_attempt(txn, store, gone)
        },
        CommissionError::Conflict,
    )
}

/// The current model of `site`.
pub fn site_model(store: &Store, site: &str) -> Result<SiteRecord, CommissionError> {
    store
        .snapshot()
        .get_json::<SiteRecord>(&keys::site(site))?
        .map(|(r, _)| r)
        .ok_or_else(|| CommissionError::UnknownSite(site.into()))
}
