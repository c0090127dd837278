//! Isolation edge between site-local segments and the wide-area overlay.
//!
//! Each experiment link gets a WAN virtual network identifier. At every site
//! the link touches, the identifier is bound to a site-local isolation tag
//! (VLAN id, Zigbee CID, CDMA channel). Outbound frames are re-tagged from the
//! local tag to the VNI and inbound frames the other way around. Allocation
//! lives in the store; the per-site translation tables live in
//! [`HummingbirdNode`], installed by the commander via `hb.bind`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::keys;
use crate::store::{StoreError, Txn};
use crate::xir::ResourceUuid;

pub const VNI_MIN: u32 = 4096;
pub const VNI_MAX: u32 = (1 << 24) - 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HbError {
    #[error("{0} space exhausted")]
    Exhausted(String),
    #[error("link {link} of {experiment} already has a vni")]
    DuplicateAllocation { experiment: String, link: String },
    #[error("vni {0} is not allocated")]
    NotAllocated(u32),
    #[error("site {site} does not support {mechanism}")]
    Unsupported { site: String, mechanism: Mechanism },
    #[error("binding conflict: {0}")]
    Conflict(String),
    #[error("{0} is outside the valid range")]
    OutOfRange(String),
    #[error("store: {0}")]
    Store(String),
}

impl From<StoreError> for HbError {
    fn from(e: StoreError) -> Self {
        HbError::Store(e.to_string())
    }
}

/// Site-local isolation mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Vlan,
    ZigbeeCid,
    CdmaChannel,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Vlan => "vlan",
            Mechanism::ZigbeeCid => "zigbee-cid",
            Mechanism::CdmaChannel => "cdma-channel",
        }
    }

    pub fn tag_range(self) -> RangeInclusive<u32> {
        match self {
            Mechanism::Vlan => 2..=4094,
            Mechanism::ZigbeeCid => 0..=65535,
            Mechanism::CdmaChannel => 0..=255,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vlan" => Ok(Mechanism::Vlan),
            "zigbee-cid" => Ok(Mechanism::ZigbeeCid),
            "cdma-channel" => Ok(Mechanism::CdmaChannel),
            _ => Err(format!("unknown isolation mechanism {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Vni(u32);

impl Vni {
    pub fn new(v: u32) -> Result<Vni, HbError> {
        if (VNI_MIN..=VNI_MAX).contains(&v) {
            Ok(Vni(v))
        } else {
            Err(HbError::OutOfRange(format!("vni {v}")))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for Vni {
    type Error = HbError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Vni::new(v)
    }
}

impl From<Vni> for u32 {
    fn from(v: Vni) -> u32 {
        v.0
    }
}

impl fmt::Display for Vni {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalTag {
    pub mechanism: Mechanism,
    pub tag: u32,
}

impl LocalTag {
    pub fn new(mechanism: Mechanism, tag: u32) -> Result<LocalTag, HbError> {
        if mechanism.tag_range().contains(&tag) {
            Ok(LocalTag { mechanism, tag })
        } else {
            Err(HbError::OutOfRange(format!("{mechanism} tag {tag}")))
        }
    }
}

/// One site's attachment of an experiment link to the overlay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub site: String,
    pub experiment: String,
    pub link: String,
    pub vni: Vni,
    pub local: LocalTag,
    /// Local resources attached to the segment.
    pub endpoints: BTreeSet<ResourceUuid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VniRecord {
    experiment: String,
    link: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TagRecord {
    vni: Vni,
    experiment: String,
    link: String,
}

/// Allocates the lowest free VNI for an experiment link inside `txn`.
pub fn allocate_vni(txn: &mut Txn<'_>, experiment: &str, link: &str) -> Result<Vni, HbError> {
    let mut taken = BTreeSet::new();
    for key in txn.keys(keys::VNIS) {
        let rec: Option<VniRecord> = txn
            .peek(&key)
            .and_then(|v| serde_json::from_slice(&v).ok());
        if let Some(rec) = &rec {
            if rec.experiment == experiment && rec.link == link {
                return Err(HbError::DuplicateAllocation {
                    experiment: experiment.into(),
                    link: link.into(),
                });
            }
        }
        if let Ok(v) = key[keys::VNIS.len()..].parse::<u32>() {
            taken.insert(v);
        }
    }
    let v = lowest_free(VNI_MIN..=VNI_MAX, &taken).ok_or_else(|| HbError::Exhausted("vni".into()))?;
    let key = keys::vni(v);
    txn.guard(&key);
    txn.put_json(
        &key,
        &VniRecord {
            experiment: experiment.into(),
            link: link.into(),
        },
    );
    Vni::new(v)
}

/// Allocates the lowest free local tag for `vni` at `site` inside `txn`.
pub fn bind_local(
    txn: &mut Txn<'_>,
    site: &str,
    supported: &[Mechanism],
    vni: Vni,
    mechanism: Mechanism,
) -> Result<LocalTag, HbError> {
    if !supported.contains(&mechanism) {
        return Err(HbError::Unsupported {
            site: site.into(),
            mechanism,
        });
    }
    let vrec: VniRecord = txn
        .get_json(&keys::vni(vni.get()))?
        .ok_or(HbError::NotAllocated(vni.get()))?;
    let prefix = keys::tag_prefix(site, mechanism.name());
    let taken: BTreeSet<u32> = txn
        .keys(&prefix)
        .iter()
        .filter_map(|k| k[prefix.len()..].parse().ok())
        .collect();
    let tag = lowest_free(mechanism.tag_range(), &taken)
        .ok_or_else(|| HbError::Exhausted(format!("{mechanism} at {site}")))?;
    let key = keys::tag(site, mechanism.name(), tag);
    txn.guard(&key);
    txn.put_json(
        &key,
        &TagRecord {
            vni,
            experiment: vrec.experiment,
            link: vrec.link,
        },
    );
    LocalTag::new(mechanism, tag)
}

/// Frees a VNI and every local tag bound to it across `bindings`.
pub fn free_bindings(txn: &mut Txn<'_>, experiment: &str, bindings: &[Binding]) {
    let mut vnis = BTreeSet::new();
    for b in bindings {
        vnis.insert(b.vni);
        txn.delete(&keys::tag(&b.site, b.local.mechanism.name(), b.local.tag));
    }
    for v in vnis {
        txn.delete(&keys::vni(v.get()));
    }
    txn.delete(&keys::hb_experiment(experiment));
}

fn lowest_free(range: RangeInclusive<u32>, taken: &BTreeSet<u32>) -> Option<u32> {
    let mut candidate = *range.start();
    for &t in taken.range(range.clone()) {
        if t > candidate {
            break;
        }
        candidate = t + 1;
    }
    (candidate <= *range.end()).then_some(candidate)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "id")]
pub enum Encap {
    Local(LocalTag),
    Wan(Vni),
}

/// A simulated layer-2 frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: ResourceUuid,
    pub dst: ResourceUuid,
    pub encap: Encap,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    /// Local tag with no binding at this site.
    Unbound,
    /// VNI with no binding at this site.
    NoBinding,
    /// Source or destination not attached to the segment.
    NotMember,
    /// Frame on the wrong kind of segment for the operation.
    WrongEncap,
    /// No site serves the destination on this VNI.
    NoRoute,
}

#[derive(Debug, Clone)]
struct Segment {
    vni: Vni,
    experiment: String,
    link: String,
    members: BTreeSet<ResourceUuid>,
}

#[derive(Debug, Default)]
struct Table {
    by_tag: HashMap<LocalTag, Segment>,
    by_vni: HashMap<Vni, LocalTag>,
}

/// A site's translation point. Lookups take a shared lock; updates are serialized.
#[derive(Debug)]
pub struct HummingbirdNode {
    site: String,
    table: RwLock<Table>,
    drops: Mutex<BTreeMap<DropReason, u64>>,
}

impl HummingbirdNode {
    pub fn new(site: &str) -> Self {
        HummingbirdNode {
            site: site.to_string(),
            table: RwLock::new(Table::default()),
            drops: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    /// Installs or extends a binding. Idempotent for an identical binding.
    pub fn bind(&self, b: &Binding) -> Result<(), HbError> {
        if b.site != self.site {
            return Err(HbError::Conflict(format!(
                "binding for {} installed at {}",
                b.site, self.site
            )));
        }
        let mut t = self.table.write();
        if let Some(existing) = t.by_vni.get(&b.vni) {
            if *existing != b.local {
                return Err(HbError::Conflict(format!(
                    "vni {} already bound to {} {}",
                    b.vni, existing.mechanism, existing.tag
                )));
            }
        }
        if let Some(seg) = t.by_tag.get_mut(&b.local) {
            if seg.vni != b.vni {
                return Err(HbError::Conflict(format!(
                    "{} {} already bound to vni {}",
                    b.local.mechanism, b.local.tag, seg.vni
                )));
            }
            seg.members.extend(b.endpoints.iter().copied());
            return Ok(());
        }
        t.by_tag.insert(
            b.local,
            Segment {
                vni: b.vni,
                experiment: b.experiment.clone(),
                link: b.link.clone(),
                members: b.endpoints.clone(),
            },
        );
        t.by_vni.insert(b.vni, b.local);
        Ok(())
    }

    pub fn unbind(&self, vni: Vni) -> bool {
        let mut t = self.table.write();
        match t.by_vni.remove(&vni) {
            Some(tag) => {
                t.by_tag.remove(&tag);
                true
            }
            None => false,
        }
    }

    /// Removes every segment of `experiment`; returns how many were removed.
    pub fn unbind_experiment(&self, experiment: &str) -> usize {
        let mut t = self.table.write();
        let gone: Vec<(LocalTag, Vni)> = t
            .by_tag
            .iter()
            .filter(|(_, s)| s.experiment == experiment)
            .map(|(tag, s)| (*tag, s.vni))
            .collect();
        for (tag, vni) in &gone {
            t.by_tag.remove(tag);
            t.by_vni.remove(vni);
        }
        gone.len()
    }

    pub fn len(&self) -> usize {
        self.table.read().by_tag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when the table is a bijection between VNIs and local tags.
    pub fn is_bijective(&self) -> bool {
        let t = self.table.read();
        t.by_tag.len() == t.by_vni.len()
            && t.by_vni
                .iter()
                .all(|(v, tag)| t.by_tag.get(tag).is_some_and(|s| s.vni == *v))
    }

    fn drop_frame(&self, reason: DropReason) -> DropReason {
        *self.drops.lock().entry(reason).or_default() += 1;
        reason
    }

    pub fn drops(&self) -> BTreeMap<DropReason, u64> {
        self.drops.lock().clone()
    }

    /// Local segment → WAN. Payload is untouched.
    pub fn translate_egress(&self, f: &Frame) -> Result<Frame, DropReason> {
        let Encap::Local(tag) = f.encap else {
            return Err(self.drop_frame(DropReason::WrongEncap));
        };
        let t = self.table.read();
        let Some(seg) = t.by_tag.get(&tag) else {
            return Err(self.drop_frame(DropReason::Unbound));
        };
        if !seg.members.contains(&f.src) {
            return Err(self.drop_frame(DropReason::NotMember));
        }
        Ok(Frame {
            encap: Encap::Wan(seg.vni),
            ..f.clone()
        })
    }

    /// WAN → local segment of this site's mechanism.
    pub fn translate_ingress(&self, f: &Frame) -> Result<Frame, DropReason> {
        let Encap::Wan(vni) = f.encap else {
            return Err(self.drop_frame(DropReason::WrongEncap));
        };
        let t = self.table.read();
        let Some(tag) = t.by_vni.get(&vni) else {
            return Err(self.drop_frame(DropReason::NoBinding));
        };
        if !t.by_tag[tag].members.contains(&f.dst) {
            return Err(self.drop_frame(DropReason::NotMember));
        }
        Ok(Frame {
            encap: Encap::Local(*tag),
            ..f.clone()
        })
    }

    fn serves(&self, vni: Vni, dst: &ResourceUuid) -> bool {
        let t = self.table.read();
        t.by_vni
            .get(&vni)
            .is_some_and(|tag| t.by_tag[tag].members.contains(dst))
    }

    /// Canonical JSON dump of the table, sorted by VNI.
    pub fn dump(&self) -> serde_json::Value {
        let t = self.table.read();
        let mut rows: Vec<_> = t
            .by_tag
            .iter()
            .map(|(tag, s)| {
                serde_json::json!({
                    "vni": s.vni,
                    "mechanism": tag.mechanism,
                    "tag": tag.tag,
                    "experiment": s.experiment,
                    "link": s.link,
                    "members": s.members,
                })
            })
            .collect();
        rows.sort_by_key(|r| r["vni"].as_u64());
        serde_json::json!({ "site": self.site, "bindings": rows })
    }
}

/// One frame handed to a site's local segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub site: String,
    pub frame: Frame,
}

/// The in-process wide-area bus connecting site edges.
#[derive(Debug, Default)]
pub struct Wan {
    nodes: RwLock<BTreeMap<String, Arc<HummingbirdNode>>>,
    no_route: Mutex<u64>,
}

impl Wan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&self, node: Arc<HummingbirdNode>) {
        self.nodes.write().insert(node.site().to_string(), node);
    }

    pub fn node(&self, site: &str) -> Option<Arc<HummingbirdNode>> {
        self.nodes.read().get(site).cloned()
    }

    pub fn no_route_drops(&self) -> u64 {
        *self.no_route.lock()
    }

    /// Sends a locally tagged frame from `site`: egress there, carry it over
    /// the WAN to the site serving the destination, ingress there.
    pub fn send(&self, site: &str, f: &Frame) -> Result<Delivery, DropReason> {
        let src = self.node(site).ok_or(DropReason::NoRoute)?;
        let wan = src.translate_egress(f)?;
        let Encap::Wan(vni) = wan.encap else {
            unreachable!()
        };
        let target = self
            .nodes
            .read()
            .values()
            .find(|n| n.serves(vni, &wan.dst))
            .cloned();
        let Some(target) = target else {
            *self.no_route.lock() += 1;
            return Err(DropReason::NoRoute);
        };
        let frame = target.translate_ingress(&wan)?;
        Ok(Delivery {
            site: target.site().to_string(),
            frame,
        })
    }
}
