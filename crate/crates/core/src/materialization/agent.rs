//! Materialization agents: claim an entry, issue one command, record the result.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde_json::{json, Value as Json};

use super::{next_step, teardown_in, Lease, MatConfig, MatState, StateboardEntry};
use crate::clock::Clock;
use crate::commissioning::SiteRecord;
use crate::experiment::{ExperimentRecord, Phase};
use crate::hummingbird::Binding;
use crate::keys;
use crate::rpc::{self, RpcError, Transport};
use crate::site::{DeviceState, Verb};
use crate::store::{CommitError, RetryPolicy, Store, Txn};

/// Everything an agent needs; shared by all agents of a service.
pub struct MatContext {
    pub store: Arc<Store>,
    pub transport: Arc<Transport>,
    pub clock: Arc<dyn Clock>,
    pub cfg: MatConfig,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// The entry advanced one state.
    Progressed(String),
    /// A command was issued and failed; the failure is on the entry.
    Failed(String),
    /// An experiment's teardown was completed.
    Finalized(String),
    Idle,
}

pub struct Agent {
    id: String,
    ctx: Arc<MatContext>,
}

fn eligible(e: &StateboardEntry, now: u64, cfg: &MatConfig) -> bool {
    next_step(e.current, e.target).is_some()
        && e.attempts <= cfg.retry_cap
        && e.retry_at <= now
        && e.lease.as_ref().is_none_or(|l| l.expires_at <= now)
}

impl Agent {
    pub fn new(id: &str, ctx: Arc<MatContext>) -> Agent {
        Agent { id: id.to_string(), ctx }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// One unit of work: advance an entry, or finish a teardown.
    pub fn step(&self) -> Step {
        if let Some((key, entry)) = self.claim() {
            return self.execute(&key, entry);
        }
        match self.finalize_one() {
            Some(e) => Step::Finalized(e),
            None => Step::Idle,
        }
    }

    /// Leases a random eligible entry. Only one agent can win a given entry:
    /// the lease is written by a transaction conditioned on the entry's version.
    pub fn claim(&self) -> Option<(String, StateboardEntry)> {
        let store = &self.ctx.store;
        let now = self.ctx.clock.now_us();
        let snap = store.snapshot();
        let mut candidates: Vec<(String, StateboardEntry)> = snap
            .scan_json::<StateboardEntry>(keys::STATEBOARD)
            .unwrap_or_default()
            .into_iter()
            .filter(|(_, e, _)| eligible(e, now, &self.ctx.cfg))
            .map(|(k, e, _)| (k, e))
            .collect();
        candidates.shuffle(&mut rand::thread_rng());
        for (key, _) in candidates {
            let mut txn = Txn::new(store.snapshot());
            let Ok(Some(mut e)) = txn.get_json::<StateboardEntry>(&key) else {
                continue;
            };
            if !eligible(&e, now, &self.ctx.cfg) {
                continue;
            }
            e.lease = Some(Lease {
                acquired_at: now,
                agent: self.id.clone(),
                expires_at: now + self.ctx.cfg.lease_ttl_us,
            });
            txn.put_json(&key, &e);
            if txn.commit(store).is_ok() {
                return Some((key, e));
            }
        }
        None
    }

    fn endpoint(&self, site: &str) -> Result<String, RpcError> {
        self.ctx
            .store
            .snapshot()
            .get_json::<SiteRecord>(&keys::site(site))
            .ok()
            .flatten()
            .map(|(s, _)| s.endpoint)
            .ok_or_else(|| RpcError::not_found(format!("unknown site {site}")))
    }

    fn command(&self, endpoint: &str, e: &StateboardEntry, verb: Verb, payload: &Json) -> Result<DeviceState, RpcError> {
        let out = self.ctx.transport.call(
            endpoint,
            "resource.command",
            json!({ "uuid": e.uuid, "experiment": e.experiment, "verb": verb, "payload": payload }),
        )?;
        serde_json::from_value(out["state"].clone()).map_err(|err| RpcError::transport(format!("bad reply: {err}")))
    }

    /// Issues the entry's next command. A device already in the expected
    /// state (a previous holder's command landed but was never recorded)
    /// counts as success.
    fn drive(&self, e: &StateboardEntry, verb: Verb, expect: MatState) -> Result<(), String> {
        let endpoint = self.endpoint(&e.site).map_err(|err| err.to_string())?;
        if verb == Verb::Configure {
            let bindings: Vec<Binding> = self
                .ctx
                .store
                .snapshot()
                .get_json::<Vec<Binding>>(&keys::hb_experiment(&e.experiment))
                .map_err(|err| err.to_string())?
                .map(|(b, _)| b)
                .unwrap_or_default()
                .into_iter()
                .filter(|b| b.site == e.site)
                .collect();
            if !bindings.is_empty() {
                self.ctx
                    .transport
                    .call(&endpoint, "hb.bind", json!({ "bindings": bindings }))
                    .map_err(|err| format!("hb.bind: {err}"))?;
            }
        }
        let payload = match verb {
            Verb::Setup => e.payload.setup.clone(),
            Verb::Configure => e.payload.configure.clone(),
            _ => Json::Null,
        };
        match self.command(&endpoint, e, verb, &payload) {
            Ok(s) if MatState::from(s) == expect => Ok(()),
            Ok(s) => Err(format!("{verb} left device in {s}")),
            Err(err) if err.code == rpc::CONFLICT => {
                match self.command(&endpoint, e, Verb::QueryState, &Json::Null) {
                    Ok(s) if MatState::from(s) == expect => Ok(()),
                    Ok(s) => Err(format!("{err}; device is {s}")),
                    Err(q) => Err(format!("{err}; query_state: {q}")),
                }
            }
            Err(err) => Err(format!("{verb}: {err}")),
        }
    }

    /// Runs the command while a helper extends the lease every third of its TTL.
    fn execute(&self, key: &str, entry: StateboardEntry) -> Step {
        let (verb, next) = next_step(entry.current, entry.target).expect("claimed entries have work");
        let period = Duration::from_micros((self.ctx.cfg.lease_ttl_us / 3).max(1));
        let (done, stop) = mpsc::channel::<()>();
        let outcome = std::thread::scope(|s| {
            s.spawn(move || {
                while let Err(mpsc::RecvTimeoutError::Timeout) = stop.recv_timeout(period) {
                    if !self.renew(key) {
                        break;
                    }
                }
            });
            let out = self.drive(&entry, verb, next);
            let _ = done.send(());
            out
        });
        self.finish(key, outcome, next)
    }

    fn renew(&self, key: &str) -> bool {
        let store = &self.ctx.store;
        let mut txn = Txn::new(store.snapshot());
        let Ok(Some(mut e)) = txn.get_json::<StateboardEntry>(key) else {
            return false;
        };
        let now = self.ctx.clock.now_us();
        match &mut e.lease {
            Some(l) if l.agent == self.id && l.expires_at > now => l.expires_at = now + self.ctx.cfg.lease_ttl_us,
            _ => return false,
        }
        txn.put_json(key, &e);
        txn.commit(store).is_ok()
    }

    /// Records the outcome, but only while this agent still holds an unexpired lease.
    fn finish(&self, key: &str, outcome: Result<(), String>, next: MatState) -> Step {
        let store = &self.ctx.store;
        for _ in 0..=self.ctx.retry.max_retries {
            let mut txn = Txn::new(store.snapshot());
            let Ok(Some(mut e)) = txn.get_json::<StateboardEntry>(key) else {
                return Step::Failed(key.into());
            };
            let now = self.ctx.clock.now_us();
            if !e.lease.as_ref().is_some_and(|l| l.agent == self.id && l.expires_at > now) {
                log::info!("{}: lease on {key} lost before recording", self.id);
                return Step::Failed(key.into());
            }
            e.lease = None;
            let step = match &outcome {
                Ok(()) => {
                    e.current = next;
                    e.last_error = None;
                    e.retry_at = 0;
                    Step::Progressed(key.into())
                }
                Err(msg) => {
                    e.attempts += 1;
                    e.last_error = Some(msg.clone());
                    e.retry_at = now + self.ctx.cfg.backoff_us(e.attempts);
                    log::debug!("{}: {key} failed ({msg}), attempt {}", self.id, e.attempts);
                    Step::Failed(key.into())
                }
            };
            txn.put_json(key, &e);
            match txn.commit(store) {
                Ok(_) => return step,
                Err(CommitError::Conflict(_)) => continue,
                Err(CommitError::Io(err)) => {
                    log::error!("{}: store write failed: {err}", self.id);
                    return Step::Failed(key.into());
                }
            }
        }
        Step::Failed(key.into())
    }

    /// Completes one experiment whose entries have all reached off: tells
    /// each involved site to tear down, then frees everything in one commit.
    fn finalize_one(&self) -> Option<String> {
        let store = &self.ctx.store;
        let snap = store.snapshot();
        let mut groups: BTreeMap<String, Vec<StateboardEntry>> = BTreeMap::new();
        for (_, e, _) in snap.scan_json::<StateboardEntry>(keys::STATEBOARD).ok()? {
            groups.entry(e.experiment.clone()).or_default().push(e);
        }
        for (experiment, entries) in groups {
            if !entries.iter().all(|e| e.current == MatState::Off && e.target == MatState::Off) {
                continue;
            }
            let Ok(Some((rec, _))) = snap.get_json::<ExperimentRecord>(&keys::experiment(&experiment)) else {
                continue;
            };
            if rec.phase != Phase::Dematerializing {
                continue;
            }
            if self.finalize(&experiment, &entries) {
                return Some(experiment);
            }
        }
        None
    }

    fn finalize(&self, experiment: &str, entries: &[StateboardEntry]) -> bool {
        let store = &self.ctx.store;
        let mut sites: Vec<&str> = entries.iter().map(|e| e.site.as_str()).collect();
        let bindings: Vec<Binding> = store
            .snapshot()
            .get_json(&keys::hb_experiment(experiment))
            .ok()
            .flatten()
            .map(|(b, _)| b)
            .unwrap_or_default();
        sites.extend(bindings.iter().map(|b| b.site.as_str()));
        sites.sort();
        sites.dedup();
        for site in sites {
            let sent = self
                .endpoint(site)
                .and_then(|ep| self.ctx.transport.call(&ep, "demat", json!({ "experiment": experiment })));
            if let Err(e) = sent {
                log::warn!("{}: demat of {experiment} at {site} failed: {e}", self.id);
                return false;
            }
        }
        let mut txn = Txn::new(store.snapshot());
        let ekey = keys::experiment(experiment);
        let Ok(Some(mut rec)) = txn.get_json::<ExperimentRecord>(&ekey) else {
            return false;
        };
        if rec.phase != Phase::Dematerializing {
            return false;
        }
        let keys = txn.keys(&keys::stateboard_prefix(experiment));
        for k in &keys {
            match txn.get_json::<StateboardEntry>(k) {
                Ok(Some(e)) if e.current == MatState::Off && e.target == MatState::Off => {}
                _ => return false,
            }
        }
        if teardown_in(&mut txn, experiment, &keys).is_err() {
            return false;
        }
        rec.phase = Phase::Dematerialized;
        txn.put_json(&ekey, &rec);
        txn.commit(store).is_ok()
    }
}
