//! Canonical JSON encoding of XIR networks.
//!
//! Canonical form: object keys sorted, no insignificant whitespace, integers
//! unquoted, string sets as sorted arrays. Constraint leaves are objects of
//! the form `{"op":..,"value":..}`; any other object is a nested map.

use std::collections::BTreeSet;

use serde_json::{Map, Value as Json};

use super::{
    Alloc, Constraint, Op, Prop, PropertyMap, ResourceUuid, Role, Value, XirError, XirLink,
    XirNetwork, XirNode,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("malformed document at {path}: {message}")]
    Structure { path: String, message: String },
    #[error(transparent)]
    Invalid(#[from] XirError),
}

fn structure(path: &str, message: impl Into<String>) -> ParseError {
    ParseError::Structure {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Parses and validates an XIR document.
pub fn parse_xir(text: &str) -> Result<XirNetwork, ParseError> {
    let json: Json = serde_json::from_str(text).map_err(|e| ParseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    from_json(&json)
}

/// Decodes an already-parsed JSON document.
pub fn from_json(json: &Json) -> Result<XirNetwork, ParseError> {
    let obj = json
        .as_object()
        .ok_or_else(|| structure("$", "expected an object"))?;
    only_keys(obj, "$", &["role", "nodes", "links"])?;
    let role = match obj.get("role").and_then(Json::as_str) {
        Some("experiment") => Role::Experiment,
        Some("resource") => Role::Resource,
        _ => return Err(structure("$.role", "expected \"experiment\" or \"resource\"")),
    };
    let nodes = array(obj, "nodes", "$")?
        .iter()
        .enumerate()
        .map(|(i, n)| decode_node(n, role, &format!("$.nodes[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let links = array(obj, "links", "$")?
        .iter()
        .enumerate()
        .map(|(i, l)| decode_link(l, &format!("$.links[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let net = XirNetwork { role, nodes, links };
    net.validate()?;
    Ok(net)
}

/// Canonical single-line text of a network.
pub fn serialize_xir(net: &XirNetwork) -> String {
    to_json(net).to_string()
}

/// The canonical JSON value of a network; serde_json maps keep keys sorted.
pub fn to_json(net: &XirNetwork) -> Json {
    let mut top = Map::new();
    top.insert("role".into(), Json::from(net.role.name()));
    top.insert(
        "nodes".into(),
        Json::Array(net.nodes.iter().map(encode_node).collect()),
    );
    top.insert(
        "links".into(),
        Json::Array(net.links.iter().map(encode_link).collect()),
    );
    Json::Object(top)
}

fn only_keys(obj: &Map<String, Json>, path: &str, allowed: &[&str]) -> Result<(), ParseError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(structure(path, format!("unexpected key {k:?}")));
        }
    }
    Ok(())
}

fn array<'a>(obj: &'a Map<String, Json>, key: &str, path: &str) -> Result<&'a Vec<Json>, ParseError> {
    obj.get(key)
        .and_then(Json::as_array)
        .ok_or_else(|| structure(&format!("{path}.{key}"), "expected an array"))
}

fn string(obj: &Map<String, Json>, key: &str, path: &str) -> Result<String, ParseError> {
    obj.get(key)
        .and_then(Json::as_str)
        .map(str::to_string)
        .ok_or_else(|| structure(&format!("{path}.{key}"), "expected a string"))
}

fn opt_uuid(obj: &Map<String, Json>, path: &str) -> Result<Option<ResourceUuid>, ParseError> {
    match obj.get("uuid") {
        None => Ok(None),
        Some(Json::String(s)) => s
            .parse()
            .map(Some)
            .map_err(|e: String| structure(&format!("{path}.uuid"), e)),
        Some(_) => Err(structure(&format!("{path}.uuid"), "expected a string")),
    }
}

fn props_of(obj: &Map<String, Json>, path: &str) -> Result<PropertyMap, ParseError> {
    match obj.get("props") {
        None => Ok(PropertyMap::new()),
        Some(Json::Object(m)) => decode_map(m, &format!("{path}.props")),
        Some(_) => Err(structure(&format!("{path}.props"), "expected an object")),
    }
}

fn decode_node(json: &Json, role: Role, path: &str) -> Result<XirNode, ParseError> {
    let obj = json
        .as_object()
        .ok_or_else(|| structure(path, "expected an object"))?;
    only_keys(obj, path, &["id", "props", "uuid", "site", "alloc"])?;
    let id = string(obj, "id", path)?;
    let props = props_of(obj, path)?;
    let uuid = opt_uuid(obj, path)?;
    let site = match obj.get("site") {
        None => None,
        Some(_) => Some(string(obj, "site", path)?),
    };
    let alloc = match obj.get("alloc").map(|a| a.as_str()) {
        None if role == Role::Resource => Some(Alloc::Exclusive),
        None => None,
        Some(Some("exclusive")) => Some(Alloc::Exclusive),
        Some(Some("shared")) => Some(Alloc::Shared),
        Some(_) => {
            return Err(structure(
                &format!("{path}.alloc"),
                "expected \"exclusive\" or \"shared\"",
            ))
        }
    };
    Ok(XirNode {
        id,
        props,
        uuid,
        site,
        alloc,
    })
}

fn decode_link(json: &Json, path: &str) -> Result<XirLink, ParseError> {
    let obj = json
        .as_object()
        .ok_or_else(|| structure(path, "expected an object"))?;
    only_keys(obj, path, &["id", "endpoints", "props", "uuid", "capacity_bps"])?;
    let id = string(obj, "id", path)?;
    let eps = array(obj, "endpoints", path)?;
    let endpoints: Vec<String> = eps
        .iter()
        .map(|e| e.as_str().map(str::to_string))
        .collect::<Option<_>>()
        .ok_or_else(|| structure(&format!("{path}.endpoints"), "expected node ids"))?;
    let endpoints: [String; 2] = endpoints
        .try_into()
        .map_err(|_| structure(&format!("{path}.endpoints"), "links have exactly two endpoints"))?;
    let props = props_of(obj, path)?;
    let uuid = opt_uuid(obj, path)?;
    let capacity_bps = match obj.get("capacity_bps") {
        None => None,
        Some(j) => Some(
            j.as_i64()
                .ok_or_else(|| structure(&format!("{path}.capacity_bps"), "expected an integer"))?,
        ),
    };
    Ok(XirLink {
        id,
        endpoints,
        props,
        uuid,
        capacity_bps,
    })
}

fn decode_map(obj: &Map<String, Json>, path: &str) -> Result<PropertyMap, ParseError> {
    obj.iter()
        .map(|(k, v)| {
            let p = format!("{path}.{k}");
            decode_prop(v, &p).map(|prop| (k.clone(), prop))
        })
        .collect()
}

fn decode_prop(json: &Json, path: &str) -> Result<Prop, ParseError> {
    match json {
        Json::Object(m) if m.contains_key("op") => decode_constraint(m, path).map(Prop::Constraint),
        Json::Object(m) => decode_map(m, path).map(Prop::Map),
        other => decode_value(other, path).map(Prop::Value),
    }
}

fn decode_value(json: &Json, path: &str) -> Result<Value, ParseError> {
    match json {
        Json::Number(n) => n
            .as_i64()
            .map(Value::Int)
            .ok_or_else(|| structure(path, "numbers must be integers in base units")),
        Json::String(s) => Ok(Value::Str(s.clone())),
        Json::Bool(b) => Ok(Value::Bool(*b)),
        Json::Array(items) => {
            if items.is_empty() {
                return Err(structure(path, "string sets cannot be empty"));
            }
            let mut set = BTreeSet::new();
            for item in items {
                let s = item
                    .as_str()
                    .ok_or_else(|| structure(path, "sets contain only strings"))?;
                if !set.insert(s.to_string()) {
                    return Err(structure(path, format!("duplicate set member {s:?}")));
                }
            }
            Ok(Value::Set(set))
        }
        Json::Null => Err(structure(path, "null is not a value")),
        Json::Object(_) => Err(structure(path, "expected a concrete value")),
    }
}

fn decode_constraint(obj: &Map<String, Json>, path: &str) -> Result<Constraint, ParseError> {
    only_keys(obj, path, &["op", "value"])?;
    let op = obj
        .get("op")
        .and_then(Json::as_str)
        .and_then(Op::from_name)
        .ok_or_else(|| structure(&format!("{path}.op"), "unknown constraint operator"))?;
    let value = obj
        .get("value")
        .ok_or_else(|| structure(path, "constraint has no value"))?;
    let vpath = format!("{path}.value");
    let int = || {
        value
            .as_i64()
            .ok_or_else(|| structure(&vpath, "ordering operators take integers"))
    };
    Ok(match op {
        Op::Eq => Constraint::Eq(decode_value(value, &vpath)?),
        Op::Lt => Constraint::Lt(int()?),
        Op::Gt => Constraint::Gt(int()?),
        Op::Le => Constraint::Le(int()?),
        Op::Ge => Constraint::Ge(int()?),
        Op::Select => Constraint::Select(
            value
                .as_str()
                .ok_or_else(|| structure(&vpath, "select takes a string"))?
                .to_string(),
        ),
        Op::Choice => {
            let items = value
                .as_array()
                .ok_or_else(|| structure(&vpath, "choice takes an array"))?;
            let members = items
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let mp = format!("{vpath}[{i}]");
                    match m {
                        Json::Object(o) if o.contains_key("op") => decode_constraint(o, &mp),
                        _ => Err(structure(&mp, "choice members are constraints")),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Constraint::choice(members).map_err(|e| structure(&vpath, e))?
        }
    })
}

fn encode_node(n: &XirNode) -> Json {
    let mut o = Map::new();
    o.insert("id".into(), Json::from(n.id.as_str()));
    o.insert("props".into(), encode_map(&n.props));
    if let Some(u) = n.uuid {
        o.insert("uuid".into(), Json::from(u.to_string()));
    }
    if let Some(s) = &n.site {
        o.insert("site".into(), Json::from(s.as_str()));
    }
    if let Some(a) = n.alloc {
        o.insert("alloc".into(), Json::from(a.name()));
    }
    Json::Object(o)
}

fn encode_link(l: &XirLink) -> Json {
    let mut o = Map::new();
    o.insert("id".into(), Json::from(l.id.as_str()));
    o.insert(
        "endpoints".into(),
        Json::Array(l.endpoints.iter().map(|e| Json::from(e.as_str())).collect()),
    );
    o.insert("props".into(), encode_map(&l.props));
    if let Some(u) = l.uuid {
        o.insert("uuid".into(), Json::from(u.to_string()));
    }
    if let Some(c) = l.capacity_bps {
        o.insert("capacity_bps".into(), Json::from(c));
    }
    Json::Object(o)
}

pub(crate) fn encode_map(m: &PropertyMap) -> Json {
    Json::Object(
        m.iter()
            .map(|(k, p)| (k.clone(), encode_prop(p)))
            .collect(),
    )
}

pub(crate) fn encode_prop(p: &Prop) -> Json {
    match p {
        Prop::Value(v) => value_json(v),
        Prop::Constraint(c) => constraint_json(c),
        Prop::Map(m) => encode_map(m),
    }
}

pub(crate) fn value_json(v: &Value) -> Json {
    match v {
        Value::Int(i) => Json::from(*i),
        Value::Str(s) => Json::from(s.as_str()),
        Value::Bool(b) => Json::from(*b),
        Value::Set(s) => Json::Array(s.iter().map(|x| Json::from(x.as_str())).collect()),
    }
}

pub(crate) fn constraint_json(c: &Constraint) -> Json {
    let value = match c {
        Constraint::Eq(v) => value_json(v),
        Constraint::Lt(i) | Constraint::Gt(i) | Constraint::Le(i) | Constraint::Ge(i) => {
            Json::from(*i)
        }
        Constraint::Select(s) => Json::from(s.as_str()),
        Constraint::Choice(cs) => Json::Array(cs.iter().map(constraint_json).collect()),
    };
    let mut o = Map::new();
    o.insert("op".into(), Json::from(c.op().name()));
    o.insert("value".into(), value);
    Json::Object(o)
}

pub(crate) fn props_from_json(json: &Json) -> Result<PropertyMap, ParseError> {
    match json {
        Json::Object(m) => decode_map(m, "$"),
        _ => Err(structure("$", "expected an object")),
    }
}

// Records embedding networks or property maps reuse the canonical encoding.

impl serde::Serialize for XirNetwork {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&to_json(self), s)
    }
}

impl<'de> serde::Deserialize<'de> for XirNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = Json::deserialize(d)?;
        from_json(&json).map_err(serde::de::Error::custom)
    }
}

impl serde::Serialize for PropertyMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&encode_map(self), s)
    }
}

impl<'de> serde::Deserialize<'de> for PropertyMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = Json::deserialize(d)?;
        props_from_json(&json).map_err(serde::de::Error::custom)
    }
}

impl serde::Serialize for Constraint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&constraint_json(self), s)
    }
}

impl serde::Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&value_json(self), s)
    }
}

impl serde::Serialize for Prop {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&encode_prop(self), s)
    }
}
