//! eXperimentation Intermediate Representation.
//!
//! An XIR network is a schema-less node/link graph. Experiment networks carry
//! constraints in their properties, resource networks carry only concrete
//! values. Both roles share one document format (see [`codec`]).

mod codec;
mod matching;
mod units;

pub use codec::{from_json, parse_xir, serialize_xir, to_json, ParseError};
pub use matching::{explain_props, match_props, satisfies, ExplainRow, Verdict};
pub use units::{normalize_unit, UnitError, UnitKind};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// A 128-bit random resource identifier, rendered lowercase hyphenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ResourceUuid(Uuid);

impl ResourceUuid {
    pub fn new_random() -> Self {
        ResourceUuid(Uuid::new_v4())
    }

    /// Name-derived identifier for elements the core synthesizes itself.
    pub fn derived(name: &str) -> Self {
        ResourceUuid(Uuid::new_v5(&Uuid::NAMESPACE_OID, name.as_bytes()))
    }

    pub fn from_uuid(u: Uuid) -> Self {
        ResourceUuid(u)
    }

    pub fn as_uuid(&self) -> &Uuid {
        &self.0
    }

    /// True when the version nibble marks a randomly generated identifier.
    pub fn is_random(&self) -> bool {
        self.0.get_version_num() == 4
    }
}

impl fmt::Display for ResourceUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.hyphenated())
    }
}

impl FromStr for ResourceUuid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // Only the canonical lowercase hyphenated form is accepted.
        let u = Uuid::try_parse(s).map_err(|e| format!("invalid uuid {s:?}: {e}"))?;
        if u.hyphenated().to_string() != s {
            return Err(format!("uuid {s:?} is not in lowercase hyphenated form"));
        }
        Ok(ResourceUuid(u))
    }
}

impl TryFrom<String> for ResourceUuid {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ResourceUuid> for String {
    fn from(u: ResourceUuid) -> String {
        u.to_string()
    }
}

/// A concrete property value. Integers are always in base units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Str(String),
    Bool(bool),
    /// Offered alternatives, e.g. the images a node can boot. Never empty.
    Set(BTreeSet<String>),
}

impl Value {
    pub fn set<I, S>(items: I) -> Value
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Value::Set(items.into_iter().map(Into::into).collect())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Eq,
    Lt,
    Gt,
    Le,
    Ge,
    Select,
    Choice,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Eq => "eq",
            Op::Lt => "lt",
            Op::Gt => "gt",
            Op::Le => "le",
            Op::Ge => "ge",
            Op::Select => "select",
            Op::Choice => "choice",
        }
    }

    pub fn from_name(s: &str) -> Option<Op> {
        Some(match s {
            "eq" => Op::Eq,
            "lt" => Op::Lt,
            "gt" => Op::Gt,
            "le" => Op::Le,
            "ge" => Op::Ge,
            "select" => Op::Select,
            "choice" => Op::Choice,
            _ => return None,
        })
    }
}

/// A typed constraint over a concrete value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constraint {
    Eq(Value),
    Lt(i64),
    Gt(i64),
    Le(i64),
    Ge(i64),
    Select(String),
    /// One level of disjunction; members are never themselves `Choice`.
    Choice(Vec<Constraint>),
}

impl Constraint {
    pub fn op(&self) -> Op {
        match self {
            Constraint::Eq(_) => Op::Eq,
            Constraint::Lt(_) => Op::Lt,
            Constraint::Gt(_) => Op::Gt,
            Constraint::Le(_) => Op::Le,
            Constraint::Ge(_) => Op::Ge,
            Constraint::Select(_) => Op::Select,
            Constraint::Choice(_) => Op::Choice,
        }
    }

    pub fn eq(v: impl Into<Value>) -> Self {
        Constraint::Eq(v.into())
    }

    pub fn select(s: impl Into<String>) -> Self {
        Constraint::Select(s.into())
    }

    /// Builds a choice, rejecting empty or nested disjunctions.
    pub fn choice(members: Vec<Constraint>) -> Result<Self, String> {
        if members.is_empty() {
            return Err("choice needs at least one member".into());
        }
        if members.iter().any(|m| matches!(m, Constraint::Choice(_))) {
            return Err("choice members cannot be choices".into());
        }
        Ok(Constraint::Choice(members))
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&codec::constraint_json(self).to_string())
    }
}

/// A property leaf or subtree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prop {
    Value(Value),
    Constraint(Constraint),
    Map(PropertyMap),
}

impl From<Value> for Prop {
    fn from(v: Value) -> Self {
        Prop::Value(v)
    }
}

impl From<Constraint> for Prop {
    fn from(c: Constraint) -> Self {
        Prop::Constraint(c)
    }
}

impl From<PropertyMap> for Prop {
    fn from(m: PropertyMap) -> Self {
        Prop::Map(m)
    }
}

/// Named properties, nested arbitrarily. Keys are kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PropertyMap(BTreeMap<String, Prop>);

impl PropertyMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, prop: impl Into<Prop>) -> Self {
        self.insert(key, prop);
        self
    }

    /// Inserts at a dotted path, creating intermediate maps.
    pub fn insert(&mut self, path: &str, prop: impl Into<Prop>) {
        let mut parts = path.split('.').peekable();
        let mut cur = self;
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                cur.0.insert(part.to_string(), prop.into());
                return;
            }
            let entry = cur
                .0
                .entry(part.to_string())
                .or_insert_with(|| Prop::Map(PropertyMap::new()));
            if !matches!(entry, Prop::Map(_)) {
                *entry = Prop::Map(PropertyMap::new());
            }
            cur = match entry {
                Prop::Map(m) => m,
                _ => unreachable!(),
            };
        }
    }

    /// Looks up a dotted path.
    pub fn get(&self, path: &str) -> Option<&Prop> {
        let mut parts = path.split('.');
        let first = parts.next()?;
        let mut cur = self.0.get(first)?;
        for part in parts {
            cur = match cur {
                Prop::Map(m) => m.0.get(part)?,
                _ => return None,
            };
        }
        Some(cur)
    }

    /// Direct child lookup, no path splitting.
    pub fn child(&self, key: &str) -> Option<&Prop> {
        self.0.get(key)
    }

    pub fn get_value(&self, path: &str) -> Option<&Value> {
        match self.get(path)? {
            Prop::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<Prop> {
        self.0.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Prop)> {
        self.0.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Number of leaves (concrete values or constraints) in the tree.
    pub fn leaf_count(&self) -> usize {
        self.0
            .values()
            .map(|p| match p {
                Prop::Map(m) => m.leaf_count(),
                _ => 1,
            })
            .sum()
    }

    pub fn has_constraints(&self) -> bool {
        self.0.values().any(|p| match p {
            Prop::Constraint(_) => true,
            Prop::Map(m) => m.has_constraints(),
            Prop::Value(_) => false,
        })
    }
}

impl FromIterator<(String, Prop)> for PropertyMap {
    fn from_iter<T: IntoIterator<Item = (String, Prop)>>(iter: T) -> Self {
        PropertyMap(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Experiment,
    Resource,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Experiment => "experiment",
            Role::Resource => "resource",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alloc {
    Exclusive,
    Shared,
}

impl Alloc {
    pub fn name(self) -> &'static str {
        match self {
            Alloc::Exclusive => "exclusive",
            Alloc::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XirNode {
    pub id: String,
    pub props: PropertyMap,
    /// Resource role only. May be absent before commissioning assigns it.
    pub uuid: Option<ResourceUuid>,
    /// Resource role only.
    pub site: Option<String>,
    /// Resource role only; always present after parsing a resource network.
    pub alloc: Option<Alloc>,
}

impl XirNode {
    pub fn experiment(id: &str, props: PropertyMap) -> Self {
        XirNode {
            id: id.to_string(),
            props,
            uuid: None,
            site: None,
            alloc: None,
        }
    }

    pub fn resource(id: &str, props: PropertyMap, alloc: Alloc) -> Self {
        XirNode {
            id: id.to_string(),
            props,
            uuid: None,
            site: None,
            alloc: Some(alloc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XirLink {
    pub id: String,
    pub endpoints: [String; 2],
    pub props: PropertyMap,
    /// Resource role only.
    pub uuid: Option<ResourceUuid>,
    /// Resource role only.
    pub capacity_bps: Option<i64>,
}

impl XirLink {
    pub fn new(id: &str, a: &str, b: &str, props: PropertyMap) -> Self {
        XirLink {
            id: id.to_string(),
            endpoints: [a.to_string(), b.to_string()],
            props,
            uuid: None,
            capacity_bps: None,
        }
    }

    pub fn with_capacity(mut self, bps: i64) -> Self {
        self.capacity_bps = Some(bps);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XirNetwork {
    pub role: Role,
    pub nodes: Vec<XirNode>,
    pub links: Vec<XirLink>,
}

/// A structural or role violation in an XIR network.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum XirError {
    #[error("empty id")]
    EmptyId,
    #[error("id {0:?} contains characters outside [A-Za-z0-9._~-]")]
    BadId(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("link {link:?} references unknown node {node:?}")]
    DanglingEndpoint { link: String, node: String },
    #[error("link {0:?} is a self-loop")]
    SelfLoop(String),
    #[error("role violation at {path}: {reason}")]
    RoleViolation { path: String, reason: String },
    #[error("duplicate uuid {0}")]
    DuplicateUuid(ResourceUuid),
    #[error("{0}")]
    Invalid(String),
}

/// Ids become store key segments, so they are restricted to a safe alphabet.
pub fn valid_id(id: &str) -> Result<(), XirError> {
    if id.is_empty() {
        return Err(XirError::EmptyId);
    }
    if !id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '~'))
    {
        return Err(XirError::BadId(id.to_string()));
    }
    Ok(())
}

impl XirNetwork {
    pub fn new(role: Role) -> Self {
        XirNetwork {
            role,
            nodes: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&XirNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn link(&self, id: &str) -> Option<&XirLink> {
        self.links.iter().find(|l| l.id == id)
    }

    /// Checks graph well-formedness and the role invariants.
    pub fn validate(&self) -> Result<(), XirError> {
        for n in &self.nodes {
            check_keys(&n.props, &format!("nodes.{}.props", n.id))?;
        }
        for l in &self.links {
            check_keys(&l.props, &format!("links.{}.props", l.id))?;
        }
        let mut ids = HashSet::new();
        let mut uuids = HashSet::new();
        for n in &self.nodes {
            valid_id(&n.id)?;
            if !ids.insert(n.id.as_str()) {
                return Err(XirError::DuplicateId(n.id.clone()));
            }
            match self.role {
                Role::Experiment => {
                    if n.uuid.is_some() || n.site.is_some() || n.alloc.is_some() {
                        return Err(XirError::RoleViolation {
                            path: format!("nodes.{}", n.id),
                            reason: "experiment nodes carry no uuid, site or alloc".into(),
                        });
                    }
                }
                Role::Resource => {
                    check_concrete(&n.props, &format!("nodes.{}.props", n.id))?;
                    if n.alloc.is_none() {
                        return Err(XirError::RoleViolation {
                            path: format!("nodes.{}", n.id),
                            reason: "resource nodes carry an alloc mode".into(),
                        });
                    }
                    if let Some(u) = n.uuid {
                        if !uuids.insert(u) {
                            return Err(XirError::DuplicateUuid(u));
                        }
                    }
                }
            }
        }
        let mut link_ids = HashSet::new();
        for l in &self.links {
            valid_id(&l.id)?;
            if !link_ids.insert(l.id.as_str()) || ids.contains(l.id.as_str()) {
                return Err(XirError::DuplicateId(l.id.clone()));
            }
            for ep in &l.endpoints {
                if !ids.contains(ep.as_str()) {
                    return Err(XirError::DanglingEndpoint {
                        link: l.id.clone(),
                        node: ep.clone(),
                    });
                }
            }
            if l.endpoints[0] == l.endpoints[1] {
                return Err(XirError::SelfLoop(l.id.clone()));
            }
            match self.role {
                Role::Experiment => {
                    if l.uuid.is_some() || l.capacity_bps.is_some() {
                        return Err(XirError::RoleViolation {
                            path: format!("links.{}", l.id),
                            reason: "experiment links carry no uuid or capacity".into(),
                        });
                    }
                }
                Role::Resource => {
                    check_concrete(&l.props, &format!("links.{}.props", l.id))?;
                    if let Some(c) = l.capacity_bps {
                        if c < 0 {
                            return Err(XirError::Invalid(format!(
                                "link {:?} has negative capacity",
                                l.id
                            )));
                        }
                    }
                    if let Some(u) = l.uuid {
                        if !uuids.insert(u) {
                            return Err(XirError::DuplicateUuid(u));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// True when every resource element has been assigned a uuid.
    pub fn fully_assigned(&self) -> bool {
        self.nodes.iter().all(|n| n.uuid.is_some()) && self.links.iter().all(|l| l.uuid.is_some())
    }
}

/// Keys are dotted-path segments, and a map holding `op` would read back as a constraint.
fn check_keys(props: &PropertyMap, path: &str) -> Result<(), XirError> {
    for (k, p) in props.iter() {
        if k.is_empty() || k.contains('.') || k == "op" {
            return Err(XirError::Invalid(format!("property key {k:?} at {path} is reserved or malformed")));
        }
        if let Prop::Map(m) = p {
            check_keys(m, &format!("{path}.{k}"))?;
        }
    }
    Ok(())
}

fn check_concrete(props: &PropertyMap, path: &str) -> Result<(), XirError> {
    for (k, p) in props.iter() {
        match p {
            Prop::Constraint(_) => {
                return Err(XirError::RoleViolation {
                    path: format!("{path}.{k}"),
                    reason: "constraint in resource network".into(),
                })
            }
            Prop::Map(m) => check_concrete(m, &format!("{path}.{k}"))?,
            Prop::Value(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_paths() {
        let mut m = PropertyMap::new();
        m.insert("memory.capacity", Value::Int(5));
        m.insert("cores", Value::Int(2));
        assert_eq!(m.get_value("memory.capacity"), Some(&Value::Int(5)));
        assert_eq!(m.get("memory.capacity.x"), None);
        assert_eq!(m.leaf_count(), 2);
    }

    #[test]
    fn uuid_form() {
        let u = ResourceUuid::new_random();
        assert!(u.is_random());
        let s = u.to_string();
        assert_eq!(s.parse::<ResourceUuid>().unwrap(), u);
        assert!(s.to_uppercase().parse::<ResourceUuid>().is_err());
        assert!("nope".parse::<ResourceUuid>().is_err());
        assert!(!ResourceUuid::derived("x").is_random());
    }

    #[test]
    fn resource_network_rejects_constraints() {
        let mut net = XirNetwork::new(Role::Resource);
        net.nodes.push(XirNode::resource(
            "a",
            PropertyMap::new().with("m", Constraint::Gt(1)),
            Alloc::Exclusive,
        ));
        assert!(matches!(net.validate(), Err(XirError::RoleViolation { .. })));
    }

    #[test]
    fn self_loops_and_dangling() {
        let mut net = XirNetwork::new(Role::Experiment);
        net.nodes.push(XirNode::experiment("a", PropertyMap::new()));
        net.links.push(XirLink::new("l", "a", "a", PropertyMap::new()));
        assert_eq!(net.validate(), Err(XirError::SelfLoop("l".into())));
        net.links[0].endpoints[1] = "b".into();
        assert!(matches!(net.validate(), Err(XirError::DanglingEndpoint { .. })));
    }

    #[test]
    fn choice_is_one_level() {
        assert!(Constraint::choice(vec![]).is_err());
        let inner = Constraint::choice(vec![Constraint::select("a")]).unwrap();
        assert!(Constraint::choice(vec![inner]).is_err());
    }
}
