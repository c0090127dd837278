//! The resource graph an experiment is embedded onto, with residual capacity.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::commissioning::SiteRecord;
use crate::keys;
use crate::store::{Snapshot, StoreError};
use crate::xir::{Alloc, Prop, PropertyMap, ResourceUuid, Value, XirNetwork};

/// Default WAN capacity of a gateway that does not state `wan_bps`.
pub const DEFAULT_WAN_BPS: i64 = 10_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tenant {
    pub experiment: String,
    pub node: String,
}

/// Contents of `res/node/<uuid>`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTenancy {
    pub tenants: Vec<Tenant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub experiment: String,
    pub link: String,
    pub bps: i64,
}

/// Contents of `res/link/<uuid>`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkClaims {
    pub claims: Vec<Claim>,
}

#[derive(Debug, Clone)]
pub struct SubNode {
    pub uuid: ResourceUuid,
    pub site: String,
    pub id: String,
    pub props: PropertyMap,
    pub alloc: Alloc,
    pub slots: u32,
    /// Slots held by other experiments' reservations.
    pub used: u32,
    pub gateway: bool,
}

#[derive(Debug, Clone)]
pub struct SubLink {
    pub uuid: ResourceUuid,
    pub ends: [usize; 2],
    pub props: PropertyMap,
    /// `None` is unbounded.
    pub capacity: Option<i64>,
    /// Bandwidth held by other experiments' reservations.
    pub reserved: i64,
    /// A WAN link synthesized between gateways of two sites.
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubstrateError {
    #[error("resource {0} has no uuid or site")]
    Unassigned(String),
    #[error("uuid {0} appears twice")]
    DuplicateUuid(ResourceUuid),
}

impl From<SubstrateError> for StoreError {
    fn from(e: SubstrateError) -> Self {
        StoreError::Corrupt(e.to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Substrate {
    pub watermark: u64,
    pub nodes: Vec<SubNode>,
    pub links: Vec<SubLink>,
    adj: Vec<Vec<(usize, usize)>>,
    node_index: HashMap<ResourceUuid, usize>,
    link_index: HashMap<ResourceUuid, usize>,
}

fn int_prop(props: &PropertyMap, key: &str) -> Option<i64> {
    props.get_value(key).and_then(Value::as_int)
}

fn is_gateway(props: &PropertyMap) -> bool {
    matches!(props.get_value("gateway"), Some(Value::Bool(true)))
}

impl Substrate {
    /// Builds the graph from fully commissioned resource networks, adding a
    /// WAN link between every pair of gateways at distinct sites.
    pub fn from_networks<'a>(
        nets: impl IntoIterator<Item = &'a XirNetwork>,
    ) -> Result<Substrate, SubstrateError> {
        struct RawLink {
            uuid: ResourceUuid,
            ends: [ResourceUuid; 2],
            props: PropertyMap,
            capacity: Option<i64>,
            synthetic: bool,
        }
        let mut nodes = Vec::new();
        let mut raw = Vec::new();
        for net in nets {
            let mut local: HashMap<&str, ResourceUuid> = HashMap::new();
            for n in &net.nodes {
                let (Some(uuid), Some(site)) = (n.uuid, n.site.as_ref()) else {
                    return Err(SubstrateError::Unassigned(n.id.clone()));
                };
                local.insert(&n.id, uuid);
                let alloc = n.alloc.unwrap_or(Alloc::Exclusive);
                let slots = match alloc {
                    Alloc::Exclusive => 1,
                    Alloc::Shared => int_prop(&n.props, "slots").unwrap_or(1).clamp(0, u32::MAX as i64) as u32,
                };
                nodes.push(SubNode {
                    uuid,
                    site: site.clone(),
                    id: n.id.clone(),
                    props: n.props.clone(),
                    alloc,
                    slots,
                    used: 0,
                    gateway: is_gateway(&n.props),
                });
            }
            for l in &net.links {
                let Some(uuid) = l.uuid else {
                    return Err(SubstrateError::Unassigned(l.id.clone()));
                };
                raw.push(RawLink {
                    uuid,
                    ends: [local[l.endpoints[0].as_str()], local[l.endpoints[1].as_str()]],
                    props: l.props.clone(),
                    capacity: l.capacity_bps,
                    synthetic: false,
                });
            }
        }
        let mut gateways: Vec<&SubNode> = nodes.iter().filter(|n| n.gateway).collect();
        gateways.sort_by_key(|n| n.uuid);
        for (i, a) in gateways.iter().enumerate() {
            for b in &gateways[i + 1..] {
                if a.site == b.site {
                    continue;
                }
                let bps = |n: &SubNode| int_prop(&n.props, "wan_bps").unwrap_or(DEFAULT_WAN_BPS);
                let lat = |n: &SubNode| int_prop(&n.props, "wan_latency").unwrap_or(0);
                raw.push(RawLink {
                    uuid: ResourceUuid::derived(&format!("wan:{}:{}", a.uuid, b.uuid)),
                    ends: [a.uuid, b.uuid],
                    props: PropertyMap::new().with("latency", Value::Int(lat(a) + lat(b))),
                    capacity: Some(bps(a).min(bps(b))),
                    synthetic: true,
                });
            }
        }

        nodes.sort_by_key(|n| n.uuid);
        raw.sort_by_key(|l| l.uuid);
        let mut node_index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.uuid, i).is_some() {
                return Err(SubstrateError::DuplicateUuid(n.uuid));
            }
        }
        let mut links = Vec::with_capacity(raw.len());
        let mut link_index = HashMap::new();
        let mut adj = vec![Vec::new(); nodes.len()];
        for (i, l) in raw.into_iter().enumerate() {
            if link_index.insert(l.uuid, i).is_some() || node_index.contains_key(&l.uuid) {
                return Err(SubstrateError::DuplicateUuid(l.uuid));
            }
            let ends = [node_index[&l.ends[0]], node_index[&l.ends[1]]];
            adj[ends[0]].push((i, ends[1]));
            adj[ends[1]].push((i, ends[0]));
            links.push(SubLink {
                uuid: l.uuid,
                ends,
                props: l.props,
                capacity: l.capacity,
                reserved: 0,
                synthetic: l.synthetic,
            });
        }
        Ok(Substrate {
            watermark: 0,
            nodes,
            links,
            adj,
            node_index,
            link_index,
        })
    }

    /// Loads every site model and reservation visible in `snap`. Reservations
    /// held by `exclude` are ignored, as if that experiment held nothing.
    pub fn load(snap: &Snapshot<'_>, exclude: Option<&str>) -> Result<Substrate, StoreError> {
        let sites: Vec<(String, SiteRecord, u64)> = snap.scan_json(keys::SITES)?;
        let mut sub = Substrate::from_networks(sites.iter().map(|(_, s, _)| &s.model))?;
        sub.watermark = snap.watermark();
        let foreign = |e: &str| exclude != Some(e);
        for (key, t, _) in snap.scan_json::<NodeTenancy>(keys::NODE_RESERVATIONS)? {
            let Some(i) = parse_uuid(&key, keys::NODE_RESERVATIONS).and_then(|u| sub.node(&u)) else {
                continue;
            };
            sub.nodes[i].used = t.tenants.iter().filter(|t| foreign(&t.experiment)).count() as u32;
        }
        for (key, c, _) in snap.scan_json::<LinkClaims>(keys::LINK_RESERVATIONS)? {
            let Some(i) = parse_uuid(&key, keys::LINK_RESERVATIONS).and_then(|u| sub.link(&u)) else {
                continue;
            };
            sub.links[i].reserved = c
                .claims
                .iter()
                .filter(|c| foreign(&c.experiment))
                .map(|c| c.bps)
                .sum();
        }
        Ok(sub)
    }

    pub fn node(&self, uuid: &ResourceUuid) -> Option<usize> {
        self.node_index.get(uuid).copied()
    }

    pub fn link(&self, uuid: &ResourceUuid) -> Option<usize> {
        self.link_index.get(uuid).copied()
    }

    /// `(link, neighbor)` pairs, in link uuid order.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adj[node]
    }

    pub fn residual_slots(&self, node: usize) -> u32 {
        let n = &self.nodes[node];
        n.slots.saturating_sub(n.used)
    }

    /// `None` is unbounded.
    pub fn residual_bps(&self, link: usize) -> Option<i64> {
        let l = &self.links[link];
        l.capacity.map(|c| c - l.reserved)
    }

    /// Nodes an experiment node may be placed on: not a gateway, with a free slot.
    pub fn placeable(&self, node: usize) -> bool {
        !self.nodes[node].gateway && self.residual_slots(node) > 0
    }

    /// Node uuids grouped by site, for reporting.
    pub fn by_site(&self) -> BTreeMap<&str, Vec<ResourceUuid>> {
        let mut out: BTreeMap<&str, Vec<ResourceUuid>> = BTreeMap::new();
        for n in &self.nodes {
            out.entry(n.site.as_str()).or_default().push(n.uuid);
        }
        out
    }
}

fn parse_uuid(key: &str, prefix: &str) -> Option<ResourceUuid> {
    key.strip_prefix(prefix)?.parse().ok()
}

/// Reads a concrete property as a string, for payload extraction and reports.
pub fn prop_str(props: &PropertyMap, key: &str) -> Option<String> {
    match props.child(key)? {
        Prop::Value(Value::Str(s)) => Some(s.clone()),
        _ => None,
    }
}
