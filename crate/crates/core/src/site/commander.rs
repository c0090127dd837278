//! Per-site commander: routes device commands to drivers by uuid and owns
//! the site's isolation edge.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::driver::{DeviceKind, DeviceState, Driver, DriverError, FaultProfile, SimDriver, Verb};
use crate::hummingbird::{Binding, HummingbirdNode, Vni};
use crate::rpc::{self, params, to_result, Handler, RpcError, Transport};
use crate::xir::{Prop, ResourceUuid, Role, Value, XirNetwork};

/// Power-off attempts per device during site teardown.
const DEMAT_ATTEMPTS: u32 = 50;

/// FIFO admission: commands for one uuid run one at a time, in arrival order.
#[derive(Default)]
struct Turnstile {
    tickets: Mutex<(u64, u64)>,
    turn: Condvar,
}

struct Pass<'a>(&'a Turnstile);

impl Turnstile {
    fn enter(&self) -> Pass<'_> {
        let mut t = self.tickets.lock();
        let mine = t.0;
        t.0 += 1;
        while t.1 != mine {
            self.turn.wait(&mut t);
        }
        Pass(self)
    }
}

impl Drop for Pass<'_> {
    fn drop(&mut self) {
        self.0.tickets.lock().1 += 1;
        self.0.turn.notify_all();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverRegistration {
    pub driver: String,
    pub kind: DeviceKind,
    pub uuids: BTreeSet<ResourceUuid>,
}

pub fn driver_error(e: DriverError) -> RpcError {
    match e {
        DriverError::Illegal(i) => RpcError::new(rpc::CONFLICT, i.to_string())
            .with_data(json!({ "state": i.state, "verb": i.verb })),
        DriverError::Transient(m) => RpcError::new(rpc::UNAVAILABLE, m),
        DriverError::Rejected(m) => RpcError::new(rpc::REJECTED, m),
        DriverError::UnknownUuid(u) => RpcError::not_found(format!("unknown uuid {u}")),
        DriverError::Unreachable(m) => RpcError::transport(m),
    }
}

fn rpc_to_driver(e: RpcError) -> DriverError {
    match e.code {
        rpc::CONFLICT => {
            let field = |k: &str| e.data.as_ref().and_then(|d| d.get(k)).cloned();
            match (
                field("state").and_then(|s| serde_json::from_value(s).ok()),
                field("verb").and_then(|v| serde_json::from_value(v).ok()),
            ) {
                (Some(state), Some(verb)) => DriverError::Illegal(super::driver::Illegal { state, verb }),
                _ => DriverError::Unreachable(e.message),
            }
        }
        rpc::UNAVAILABLE => DriverError::Transient(e.message),
        rpc::REJECTED => DriverError::Rejected(e.message),
        _ => DriverError::Unreachable(e.message),
    }
}

/// A driver running in another process, reached over the wire.
pub struct RemoteDriver {
    reg: DriverRegistration,
    endpoint: String,
    transport: Arc<Transport>,
}

impl Driver for RemoteDriver {
    fn id(&self) -> &str {
        &self.reg.driver
    }

    fn kind(&self) -> DeviceKind {
        self.reg.kind
    }

    fn serves(&self) -> Vec<ResourceUuid> {
        self.reg.uuids.iter().copied().collect()
    }

    fn command(&self, uuid: &ResourceUuid, verb: Verb, payload: &Json) -> Result<DeviceState, DriverError> {
        let out = self
            .transport
            .call(&self.endpoint, "driver.command", json!({ "uuid": uuid, "verb": verb, "payload": payload }))
            .map_err(rpc_to_driver)?;
        serde_json::from_value(out["state"].clone())
            .map_err(|e| DriverError::Unreachable(format!("bad driver reply: {e}")))
    }
}

/// Serves a driver's `driver.command` method so a commander can register it remotely.
pub struct DriverService(pub Arc<dyn Driver>);

impl Handler for DriverService {
    fn handle(&self, method: &str, p: Json) -> Result<Json, RpcError> {
        #[derive(Deserialize)]
        struct Cmd {
            uuid: ResourceUuid,
            verb: Verb,
            #[serde(default)]
            payload: Json,
        }
        match method {
            "driver.command" => {
                let c: Cmd = params(p)?;
                let state = self.0.command(&c.uuid, c.verb, &c.payload).map_err(driver_error)?;
                Ok(json!({ "state": state }))
            }
            _ => Err(RpcError::not_found(format!("unknown method {method}"))),
        }
    }
}

pub struct Commander {
    site: String,
    faults: FaultProfile,
    transport: Arc<Transport>,
    sims: Mutex<BTreeMap<DeviceKind, Arc<SimDriver>>>,
    routes: RwLock<HashMap<ResourceUuid, Arc<dyn Driver>>>,
    registrations: Mutex<BTreeMap<String, DriverRegistration>>,
    lanes: Mutex<HashMap<ResourceUuid, Arc<Turnstile>>>,
    experiments: Mutex<BTreeMap<String, BTreeSet<ResourceUuid>>>,
    hb: Arc<HummingbirdNode>,
}

#[derive(Debug, Deserialize)]
struct CommandParams {
    uuid: ResourceUuid,
    #[serde(default)]
    experiment: Option<String>,
    verb: Verb,
    #[serde(default)]
    payload: Json,
}

impl Commander {
    /// A commander whose simulated drivers inject `faults`.
    pub fn new(site: &str, faults: FaultProfile, transport: Arc<Transport>) -> Arc<Commander> {
        Arc::new(Commander {
            site: site.to_string(),
            faults,
            transport,
            sims: Mutex::new(BTreeMap::new()),
            routes: RwLock::new(HashMap::new()),
            registrations: Mutex::new(BTreeMap::new()),
            lanes: Mutex::new(HashMap::new()),
            experiments: Mutex::new(BTreeMap::new()),
            hb: Arc::new(HummingbirdNode::new(site)),
        })
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn hummingbird(&self) -> Arc<HummingbirdNode> {
        self.hb.clone()
    }

    pub fn sim_driver(&self, kind: DeviceKind) -> Option<Arc<SimDriver>> {
        self.sims.lock().get(&kind).cloned()
    }

    pub fn registrations(&self) -> Vec<DriverRegistration> {
        self.registrations.lock().values().cloned().collect()
    }

    /// Experiments with devices touched at this site.
    pub fn experiments(&self) -> BTreeMap<String, BTreeSet<ResourceUuid>> {
        self.experiments.lock().clone()
    }

    fn register(&self, driver: Arc<dyn Driver>, uuids: &[ResourceUuid]) -> Result<(), RpcError> {
        let mut routes = self.routes.write();
        for u in uuids {
            if let Some(other) = routes.get(u) {
                if other.id() != driver.id() {
                    return Err(RpcError::new(
                        rpc::CONFLICT,
                        format!("uuid {u} already served by {}", other.id()),
                    ));
                }
            }
        }
        for u in uuids {
            routes.insert(*u, driver.clone());
        }
        let mut regs = self.registrations.lock();
        let reg = regs.entry(driver.id().to_string()).or_insert_with(|| DriverRegistration {
            driver: driver.id().to_string(),
            kind: driver.kind(),
            uuids: BTreeSet::new(),
        });
        reg.uuids.extend(uuids.iter().copied());
        Ok(())
    }

    fn sim(&self, kind: DeviceKind) -> Arc<SimDriver> {
        let mut sims = self.sims.lock();
        let n = sims.len() as u64;
        sims.entry(kind)
            .or_insert_with(|| {
                let mut f = self.faults.clone();
                f.seed = f.seed.wrapping_add(n).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
                Arc::new(SimDriver::new(&format!("{}/sim-{}", self.site, kind.name()), kind, f))
            })
            .clone()
    }

    /// Local commissioning: assigns random uuids where absent, stamps the
    /// site, and attaches every node to a simulated driver chosen by its
    /// `device` property (bare-metal by default).
    pub fn adopt(&self, net: &XirNetwork) -> Result<XirNetwork, RpcError> {
        if net.role != Role::Resource {
            return Err(RpcError::bad_request("network role is not resource"));
        }
        let mut net = net.clone();
        for n in &mut net.nodes {
            if let Some(s) = &n.site {
                if s != &self.site {
                    return Err(RpcError::bad_request(format!("node {} belongs to site {s}", n.id)));
                }
            }
            n.site = Some(self.site.clone());
            n.uuid.get_or_insert_with(ResourceUuid::new_random);
        }
        for l in &mut net.links {
            l.uuid.get_or_insert_with(ResourceUuid::new_random);
        }
        net.validate().map_err(|e| RpcError::bad_request(e.to_string()))?;
        for n in &net.nodes {
            if matches!(n.props.get_value("gateway"), Some(Value::Bool(true))) {
                continue;
            }
            let kind = match n.props.get_value("device") {
                None => DeviceKind::BareMetal,
                Some(Value::Str(s)) => DeviceKind::from_name(s)
                    .ok_or_else(|| RpcError::bad_request(format!("unknown device type {s:?}")))?,
                Some(other) => return Err(RpcError::bad_request(format!("bad device type {other:?}"))),
            };
            let images = match n.props.child("image") {
                Some(Prop::Value(Value::Set(s))) => s.clone(),
                Some(Prop::Value(Value::Str(s))) => [s.clone()].into(),
                _ => BTreeSet::new(),
            };
            let uuid = n.uuid.expect("assigned above");
            let sim = self.sim(kind);
            self.register(sim.clone(), &[uuid])?;
            sim.add_device(uuid, images);
        }
        Ok(net)
    }

    fn lane(&self, uuid: &ResourceUuid) -> Arc<Turnstile> {
        self.lanes.lock().entry(*uuid).or_default().clone()
    }

    /// Forwards one command to the uuid's driver, payload untouched.
    pub fn dispatch(&self, uuid: &ResourceUuid, verb: Verb, payload: &Json) -> Result<DeviceState, DriverError> {
        let driver = self
            .routes
            .read()
            .get(uuid)
            .cloned()
            .ok_or(DriverError::UnknownUuid(*uuid))?;
        let lane = self.lane(uuid);
        let _pass = lane.enter();
        driver.command(uuid, verb, payload)
    }

    /// Site teardown for an experiment: every device it touched is powered
    /// off, its bindings are removed and its bookkeeping is dropped.
    pub fn demat(&self, experiment: &str) -> Result<Json, RpcError> {
        let uuids = self.experiments.lock().get(experiment).cloned().unwrap_or_default();
        let mut off = Vec::new();
        for u in &uuids {
            let mut last = None;
            for _ in 0..DEMAT_ATTEMPTS {
                match self.dispatch(u, Verb::PowerOff, &Json::Null) {
                    Ok(_) => {
                        last = None;
                        break;
                    }
                    Err(DriverError::UnknownUuid(_)) => {
                        last = None;
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if let Some(e) = last {
                return Err(driver_error(e));
            }
            off.push(*u);
        }
        let unbound = self.hb.unbind_experiment(experiment);
        self.experiments.lock().remove(experiment);
        Ok(json!({ "experiment": experiment, "off": off, "unbound": unbound }))
    }
}

impl Handler for Commander {
    fn handle(&self, method: &str, p: Json) -> Result<Json, RpcError> {
        match method {
            "resource.command" => {
                let c: CommandParams = params(p)?;
                let state = self.dispatch(&c.uuid, c.verb, &c.payload).map_err(driver_error)?;
                if let Some(e) = c.experiment {
                    if c.verb != Verb::QueryState {
                        self.experiments.lock().entry(e).or_default().insert(c.uuid);
                    }
                }
                Ok(json!({ "state": state }))
            }
            "demat" => {
                #[derive(Deserialize)]
                struct P {
                    experiment: String,
                }
                let P { experiment } = params(p)?;
                self.demat(&experiment)
            }
            "commission.local" => {
                #[derive(Deserialize)]
                struct P {
                    network: XirNetwork,
                }
                let P { network } = params(p)?;
                Ok(json!({ "network": self.adopt(&network)? }))
            }
            "hb.bind" => {
                #[derive(Deserialize)]
                struct P {
                    bindings: Vec<Binding>,
                }
                let P { bindings } = params(p)?;
                for b in &bindings {
                    self.hb
                        .bind(b)
                        .map_err(|e| RpcError::new(rpc::CONFLICT, e.to_string()))?;
                }
                Ok(json!({ "installed": bindings.len() }))
            }
            "hb.unbind" => {
                #[derive(Deserialize)]
                struct P {
                    #[serde(default)]
                    vni: Option<Vni>,
                    #[serde(default)]
                    experiment: Option<String>,
                }
                let P { vni, experiment } = params(p)?;
                let removed = match (vni, experiment) {
                    (Some(v), None) => self.hb.unbind(v) as usize,
                    (None, Some(e)) => self.hb.unbind_experiment(&e),
                    _ => return Err(RpcError::bad_request("give exactly one of vni or experiment")),
                };
                Ok(json!({ "removed": removed }))
            }
            "hb.dump" => Ok(self.hb.dump()),
            "driver.register" => {
                #[derive(Deserialize)]
                struct P {
                    driver: String,
                    kind: DeviceKind,
                    endpoint: String,
                    uuids: BTreeSet<ResourceUuid>,
                }
                let P {
                    driver,
                    kind,
                    endpoint,
                    uuids,
                } = params(p)?;
                let remote = Arc::new(RemoteDriver {
                    reg: DriverRegistration {
                        driver,
                        kind,
                        uuids: uuids.clone(),
                    },
                    endpoint,
                    transport: self.transport.clone(),
                });
                let list: Vec<_> = uuids.into_iter().collect();
                self.register(remote, &list)?;
                Ok(json!({ "registered": list.len() }))
            }
            "site.info" => to_result(&json!({
                "site": self.site,
                "drivers": self.registrations(),
                "experiments": self.experiments(),
            })),
            _ => Err(RpcError::not_found(format!("unknown method {method}"))),
        }
    }
}
