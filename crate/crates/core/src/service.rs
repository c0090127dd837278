//! The core service: one store, the module operations behind a JSON
//! dispatcher, and the pool of materialization agents.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value as Json};

use crate::clock::Clock;
use crate::commissioning::{
    self, decommission_fragmented, decommission_simple, experiments_using, CommissionError, SiteRecord,
    SiteSettings,
};
use crate::config::Config;
use crate::discovery::{self, DiscoveryError};
use crate::experiment::ExperimentRecord;
use crate::hummingbird::Mechanism;
use crate::keys;
use crate::materialization::agent::{Agent, MatContext, Step};
use crate::materialization::{self, MatConfig, MatError};
use crate::realization::substrate::Substrate;
use crate::realization::{self, Budget, Engine, RealizeError, ReleaseError, ReserveError};
use crate::rpc::{self, params, to_result, Handler, RpcError, Transport};
use crate::store::{RetryPolicy, Store, StoreError};
use crate::xir::{ResourceUuid, XirNetwork};

fn store_error(e: StoreError) -> RpcError {
    RpcError::new(rpc::INTERNAL, e.to_string())
}

fn conflict(message: impl Into<String>) -> RpcError {
    RpcError::new(rpc::CONFLICT, message)
}

fn discovery_error(e: DiscoveryError) -> RpcError {
    match e {
        DiscoveryError::Invalid(_) => RpcError::bad_request(e.to_string()),
        DiscoveryError::UnknownNode(_) | DiscoveryError::UnknownResource(_) => RpcError::not_found(e.to_string()),
        DiscoveryError::Store(s) => store_error(s),
    }
}

fn reserve_error(e: ReserveError) -> RpcError {
    match e {
        ReserveError::Unknown(_) => RpcError::not_found(e.to_string()),
        ReserveError::AlreadyReserved(_) => conflict(e.to_string()),
        ReserveError::Conflict(_) => conflict(e.to_string()),
        ReserveError::Invalid(ref v) => {
            let data = json!({ "violations": v.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>() });
            conflict(e.to_string()).with_data(data)
        }
        ReserveError::Store(s) => store_error(s),
    }
}

fn release_error(e: ReleaseError) -> RpcError {
    match e {
        ReleaseError::Unknown(_) => RpcError::not_found(e.to_string()),
        ReleaseError::Busy { .. } | ReleaseError::Conflict(_) => conflict(e.to_string()),
        ReleaseError::Store(s) => store_error(s),
    }
}

fn mat_error(e: MatError) -> RpcError {
    match e {
        MatError::Unknown(_) => RpcError::not_found(e.to_string()),
        MatError::NotReserved { .. } | MatError::Duplicate(_) | MatError::Conflict(_) => conflict(e.to_string()),
        MatError::Isolation(_) => RpcError::new(rpc::UNAVAILABLE, e.to_string()),
        MatError::Store(s) => store_error(s),
    }
}

fn commission_error(e: CommissionError) -> RpcError {
    match e {
        CommissionError::Malformed(_) | CommissionError::MissingEndpoint(_) => RpcError::bad_request(e.to_string()),
        CommissionError::UnknownSite(_) | CommissionError::UnknownNode(_) => RpcError::not_found(e.to_string()),
        CommissionError::InUse { ref experiments } => {
            let data = json!({ "experiments": experiments });
            conflict(e.to_string()).with_data(data)
        }
        CommissionError::Impact { ref survivors } => {
            let data = json!({ "survivors": survivors });
            conflict(e.to_string()).with_data(data)
        }
        CommissionError::NodeSetMismatch {
            ref missing,
            ref unexpected,
        } => {
            let data = json!({ "missing": missing, "unexpected": unexpected });
            conflict(e.to_string()).with_data(data)
        }
        CommissionError::DuplicateId(_) | CommissionError::UuidCollision(_) | CommissionError::Conflict(_) => {
            conflict(e.to_string())
        }
        CommissionError::Store(s) => store_error(s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecommissionMode {
    #[default]
    Simple,
    Fragmented,
}

/// Per-request engine overrides; anything absent comes from the config.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealizeParams {
    pub experiment: String,
    pub network: XirNetwork,
    #[serde(default)]
    pub engine: Option<Engine>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_hops: Option<usize>,
    #[serde(default)]
    pub budget: Option<BudgetParams>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetParams {
    #[serde(default)]
    pub max_nodes_expanded: Option<u64>,
    #[serde(default)]
    pub max_ms: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecommissionParams {
    pub site: String,
    pub nodes: Vec<String>,
    #[serde(default)]
    pub mode: DecommissionMode,
    #[serde(default)]
    pub replacement: Option<XirNetwork>,
    /// Dematerialize affected experiments (marking them degraded) instead of refusing.
    #[serde(default)]
    pub force: bool,
}

pub struct Core {
    ctx: Arc<MatContext>,
    cfg: Config,
}

impl Core {
    pub fn new(store: Arc<Store>, transport: Arc<Transport>, clock: Arc<dyn Clock>, cfg: Config) -> Arc<Core> {
        let mat = MatConfig {
            lease_ttl_us: cfg.lease_ttl_ms * 1000,
            retry_cap: cfg.retry_cap,
            ..MatConfig::default()
        };
        Self::with_mat_config(store, transport, clock, cfg, mat)
    }

    pub fn with_mat_config(
        store: Arc<Store>,
        transport: Arc<Transport>,
        clock: Arc<dyn Clock>,
        cfg: Config,
        mat: MatConfig,
    ) -> Arc<Core> {
        let ctx = Arc::new(MatContext {
            store,
            transport,
            clock,
            cfg: mat,
            retry: RetryPolicy::default(),
        });
        Arc::new(Core { ctx, cfg })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.ctx.store
    }

    pub fn transport(&self) -> &Arc<Transport> {
        &self.ctx.transport
    }

    pub fn context(&self) -> &Arc<MatContext> {
        &self.ctx
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    fn retry(&self) -> &RetryPolicy {
        &self.ctx.retry
    }

    pub fn discover(&self, x: &XirNetwork) -> Result<Json, RpcError> {
        let map = discovery::discover(&self.store().snapshot(), x).map_err(discovery_error)?;
        to_result(&map)
    }

    pub fn explain(&self, x: &XirNetwork, node: &str, uuid: &ResourceUuid) -> Result<Json, RpcError> {
        let rows = discovery::explain(&self.store().snapshot(), x, node, uuid).map_err(discovery_error)?;
        to_result(&json!({ "node": node, "resource": uuid, "rows": rows }))
    }

    /// Unrealizable outcomes carry the reason and a per-node candidate report.
    fn unrealizable(&self, x: &XirNetwork, message: String, reason: Json) -> RpcError {
        let nodes = Substrate::load(&self.store().snapshot(), None)
            .map(|sub| discovery::report(x, &sub))
            .unwrap_or_default();
        RpcError::new(rpc::UNREALIZABLE, message).with_data(json!({ "nodes": nodes, "reason": reason }))
    }

    pub fn realize(&self, p: &RealizeParams) -> Result<Json, RpcError> {
        let mut opts = self.cfg.engine_options();
        if let Some(s) = p.seed {
            opts.seed = s;
        }
        if let Some(h) = p.max_hops {
            if h == 0 || h > realization::path::HOP_LIMIT {
                return Err(RpcError::bad_request(format!(
                    "max_hops must be in 1..={}",
                    realization::path::HOP_LIMIT
                )));
            }
            opts.max_hops = h;
        }
        let mut budget: Budget = self.cfg.budget();
        if let Some(b) = p.budget {
            budget.max_nodes_expanded = b.max_nodes_expanded.unwrap_or(budget.max_nodes_expanded);
            budget.max_ms = b.max_ms.unwrap_or(budget.max_ms);
        }
        let engine = p.engine.unwrap_or(self.cfg.engine);
        match realization::realize(self.store(), &p.experiment, &p.network, engine, &opts, budget, self.retry()) {
            Ok(m) => to_result(&m),
            Err(e) => Err(match e {
                RealizeError::Invalid(_) => RpcError::bad_request(e.to_string()),
                RealizeError::Busy { .. } | RealizeError::Conflict(_) => conflict(e.to_string()),
                RealizeError::Unrealizable(ref u) => {
                    let reason = serde_json::to_value(u).unwrap_or(Json::Null);
                    self.unrealizable(&p.network, e.to_string(), reason)
                }
                RealizeError::BudgetExhausted { expanded } => {
                    let reason = json!({ "expanded": expanded, "reason": "budget-exhausted" });
                    self.unrealizable(&p.network, e.to_string(), reason)
                }
                RealizeError::Store(s) => store_error(s),
            }),
        }
    }

    pub fn reserve(&self, experiment: &str) -> Result<Json, RpcError> {
        let m = realization::reserve(self.store(), experiment).map_err(reserve_error)?;
        to_result(&m)
    }

    fn phase_of(&self, experiment: &str) -> Result<Json, RpcError> {
        let rec = self.record(experiment)?;
        Ok(json!({ "experiment": experiment, "phase": rec.phase }))
    }

    fn record(&self, experiment: &str) -> Result<ExperimentRecord, RpcError> {
        self.store()
            .snapshot()
            .get_json::<ExperimentRecord>(&keys::experiment(experiment))
            .map_err(store_error)?
            .map(|(r, _)| r)
            .ok_or_else(|| RpcError::not_found(format!("unknown experiment {experiment}")))
    }

    pub fn release(&self, experiment: &str) -> Result<Json, RpcError> {
        realization::release(self.store(), experiment, self.retry()).map_err(release_error)?;
        self.phase_of(experiment)
    }

    pub fn materialize(&self, experiment: &str) -> Result<Json, RpcError> {
        let n = materialization::materialize(self.store(), experiment, self.retry()).map_err(mat_error)?;
        Ok(json!({ "entries": n, "experiment": experiment }))
    }

    pub fn dematerialize(&self, experiment: &str) -> Result<Json, RpcError> {
        let phase =
            materialization::dematerialize(self.store(), experiment, None, self.retry()).map_err(mat_error)?;
        Ok(json!({ "experiment": experiment, "phase": phase }))
    }

    pub fn status(&self, experiment: &str) -> Result<Json, RpcError> {
        let r = materialization::experiment_status(self.store(), experiment, &self.ctx.cfg).map_err(mat_error)?;
        to_result(&r)
    }

    /// Commissions through the site's commander, which assigns uuids and
    /// attaches drivers, then records the adopted model.
    pub fn commission(
        &self,
        site: &str,
        network: &XirNetwork,
        endpoint: Option<String>,
        isolation: Option<Vec<Mechanism>>,
    ) -> Result<Json, RpcError> {
        let existing = match commissioning::site_model(self.store(), site) {
            Ok(rec) => Some(rec),
            Err(CommissionError::UnknownSite(_)) => None,
            Err(e) => return Err(commission_error(e)),
        };
        let target = existing
            .as_ref()
            .map(|r| r.endpoint.clone())
            .or_else(|| endpoint.clone())
            .ok_or_else(|| commission_error(CommissionError::MissingEndpoint(site.into())))?;
        let adopted = self
            .transport()
            .call(&target, "commission.local", json!({ "network": network }))?;
        let adopted: XirNetwork = serde_json::from_value(adopted["network"].clone())
            .map_err(|e| RpcError::transport(format!("commander reply: {e}")))?;
        let settings = SiteSettings { endpoint, isolation };
        let uuids =
            commissioning::commission(self.store(), site, &adopted, &settings, self.retry()).map_err(commission_error)?;
        Ok(json!({ "site": site, "uuids": uuids }))
    }

    pub fn decommission(&self, p: &DecommissionParams) -> Result<Json, RpcError> {
        let mut affected = Vec::new();
        if p.force {
            affected = experiments_using(self.store(), &p.site, &p.nodes).map_err(commission_error)?;
            let reason = format!("resources decommissioned at site {}", p.site);
            for e in &affected {
                materialization::dematerialize(self.store(), e, Some(&reason), self.retry()).map_err(mat_error)?;
            }
        }
        let removed = match p.mode {
            DecommissionMode::Simple => decommission_simple(self.store(), &p.site, &p.nodes, p.force, self.retry()),
            DecommissionMode::Fragmented => {
                if p.force {
                    return Err(RpcError::bad_request("force applies to simple mode only"));
                }
                let replacement = p
                    .replacement
                    .as_ref()
                    .ok_or_else(|| RpcError::bad_request("fragmented mode needs a replacement network"))?;
                decommission_fragmented(self.store(), &p.site, &p.nodes, replacement, self.retry())
            }
        }
        .map_err(commission_error)?;
        Ok(json!({ "affected": affected, "links": removed.links, "nodes": removed.nodes }))
    }

    pub fn site(&self, site: &str) -> Result<SiteRecord, RpcError> {
        commissioning::site_model(self.store(), site).map_err(commission_error)
    }

    pub fn sites(&self) -> Result<Json, RpcError> {
        let recs = self
            .store()
            .snapshot()
            .scan_json::<SiteRecord>(keys::SITES)
            .map_err(store_error)?;
        let out: Vec<Json> = recs
            .into_iter()
            .map(|(_, r, _)| {
                json!({
                    "endpoint": r.endpoint,
                    "id": r.id,
                    "isolation": r.isolation,
                    "links": r.model.links.len(),
                    "nodes": r.model.nodes.len(),
                })
            })
            .collect();
        Ok(Json::Array(out))
    }

    pub fn experiments(&self) -> Result<Json, RpcError> {
        let recs = self
            .store()
            .snapshot()
            .scan_json::<ExperimentRecord>(keys::EXPERIMENTS)
            .map_err(store_error)?;
        let out: Vec<Json> = recs
            .into_iter()
            .map(|(_, r, _)| json!({ "id": r.id, "phase": r.phase }))
            .collect();
        Ok(Json::Array(out))
    }

    pub fn agent(&self, id: &str) -> Agent {
        Agent::new(id, self.ctx.clone())
    }

    /// Starts `n` agents that step until stopped, sleeping when idle.
    pub fn spawn_agents(self: &Arc<Self>, n: usize) -> AgentPool {
        let stop = Arc::new(AtomicBool::new(false));
        let idle = Duration::from_millis(self.cfg.agent_idle_ms.max(1));
        let threads = (0..n)
            .map(|i| {
                let agent = self.agent(&format!("agent-{i}"));
                let stop = stop.clone();
                thread::Builder::new()
                    .name(format!("agent-{i}"))
                    .spawn(move || {
                        while !stop.load(Ordering::Relaxed) {
                            match agent.step() {
                                Step::Idle => thread::sleep(idle),
                                Step::Failed(k) => log::debug!("{}: command failed on {k}", agent.id()),
                                Step::Progressed(_) | Step::Finalized(_) => {}
                            }
                        }
                    })
                    .expect("spawn agent thread")
            })
            .collect();
        AgentPool { stop, threads }
    }
}

/// Running agents; stopped on drop.
pub struct AgentPool {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl AgentPool {
    pub fn len(&self) -> usize {
        self.threads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threads.is_empty()
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for AgentPool {
    fn drop(&mut self) {
        self.halt();
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentParam {
    experiment: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkParam {
    network: XirNetwork,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainParams {
    network: XirNetwork,
    node: String,
    uuid: ResourceUuid,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommissionParams {
    site: String,
    network: XirNetwork,
    #[serde(default)]
    endpoint: Option<String>,
    #[serde(default)]
    isolation: Option<Vec<Mechanism>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteParam {
    site: String,
}

impl Handler for Core {
    fn handle(&self, method: &str, p: Json) -> Result<Json, RpcError> {
        match method {
            "discover" => self.discover(&params::<NetworkParam>(p)?.network),
            "explain" => {
                let e: ExplainParams = params(p)?;
                self.explain(&e.network, &e.node, &e.uuid)
            }
            "realize" => self.realize(&params(p)?),
            "reserve" => self.reserve(&params::<ExperimentParam>(p)?.experiment),
            "release" => self.release(&params::<ExperimentParam>(p)?.experiment),
            "materialize" => self.materialize(&params::<ExperimentParam>(p)?.experiment),
            "dematerialize" => self.dematerialize(&params::<ExperimentParam>(p)?.experiment),
            "status" => self.status(&params::<ExperimentParam>(p)?.experiment),
            "commission" => {
                let c: CommissionParams = params(p)?;
                self.commission(&c.site, &c.network, c.endpoint, c.isolation)
            }
            "decommission" => self.decommission(&params(p)?),
            "site.model" => to_result(&self.site(&params::<SiteParam>(p)?.site)?),
            "sites.list" => self.sites(),
            "experiments.list" => self.experiments(),
            _ => Err(RpcError::not_found(format!("unknown method {method}"))),
        }
    }
}

/// A running core: the RPC listener plus its agents.
pub struct Running {
    pub core: Arc<Core>,
    pub server: rpc::Server,
    pub agents: AgentPool,
}

impl Running {
    pub fn shutdown(self) {
        self.agents.stop();
        self.server.shutdown();
    }
}

/// Opens the store named by the config and starts serving.
pub fn serve(cfg: Config, transport: Arc<Transport>, clock: Arc<dyn Clock>) -> std::io::Result<Running> {
    let store = match &cfg.journal {
        Some(p) => Store::open(p).map_err(|e| std::io::Error::other(e.to_string()))?,
        None => Store::in_memory(),
    };
    let listen = cfg.listen.clone();
    let agents = cfg.agents;
    let core = Core::new(Arc::new(store), transport, clock, cfg);
    let server = rpc::Server::bind(listen.as_str(), core.clone())?;
    let agents = core.spawn_agents(agents);
    Ok(Running { core, server, agents })
}
