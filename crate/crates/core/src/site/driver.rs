//! The four-state device machine and simulated device drivers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::time::Duration;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::xir::ResourceUuid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceState {
    Off,
    On,
    Setup,
    Configured,
}

impl DeviceState {
    pub fn name(self) -> &'static str {
        match self {
            DeviceState::Off => "off",
            DeviceState::On => "on",
            DeviceState::Setup => "setup",
            DeviceState::Configured => "configured",
        }
    }
}

impl fmt::Display for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    PowerOn,
    PowerOff,
    Setup,
    Configure,
    QueryState,
}

impl Verb {
    pub const ALL: [Verb; 5] = [Verb::PowerOn, Verb::PowerOff, Verb::Setup, Verb::Configure, Verb::QueryState];

    pub fn name(self) -> &'static str {
        match self {
            Verb::PowerOn => "power_on",
            Verb::PowerOff => "power_off",
            Verb::Setup => "setup",
            Verb::Configure => "configure",
            Verb::QueryState => "query_state",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{verb} is not legal from {state}")]
pub struct Illegal {
    pub state: DeviceState,
    pub verb: Verb,
}

/// Legal edges: off→on, on→setup, setup→configured, and power_off from
/// anywhere. `query_state` reads without moving.
pub fn driver_transition(current: DeviceState, verb: Verb) -> Result<DeviceState, Illegal> {
    use DeviceState::*;
    match (current, verb) {
        (s, Verb::QueryState) => Ok(s),
        (_, Verb::PowerOff) => Ok(Off),
        (Off, Verb::PowerOn) => Ok(On),
        (On, Verb::Setup) => Ok(Setup),
        (Setup, Verb::Configure) => Ok(Configured),
        (state, verb) => Err(Illegal { state, verb }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Illegal(#[from] Illegal),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("unknown uuid {0}")]
    UnknownUuid(ResourceUuid),
    #[error("driver unreachable: {0}")]
    Unreachable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    /// Setup installs an image by name; images outside the offered set are refused.
    BareMetal,
    /// Setup loads a named firmware blob.
    IotEmbedded,
    /// Configure installs isolation tag bindings.
    NetPort,
}

impl DeviceKind {
    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::BareMetal => "bare-metal",
            DeviceKind::IotEmbedded => "iot-embedded",
            DeviceKind::NetPort => "net-port",
        }
    }

    pub fn from_name(s: &str) -> Option<DeviceKind> {
        match s {
            "bare-metal" => Some(DeviceKind::BareMetal),
            "iot-embedded" => Some(DeviceKind::IotEmbedded),
            "net-port" => Some(DeviceKind::NetPort),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Latency {
    Fixed { us: u64 },
    Uniform { lo_us: u64, hi_us: u64 },
}

/// Injected misbehaviour for a simulated driver.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    /// Per-verb probability that a command fails without effect.
    #[serde(default)]
    pub failure: BTreeMap<Verb, f64>,
    #[serde(default)]
    pub latency: BTreeMap<Verb, Latency>,
    /// A device in this state refuses to leave it.
    #[serde(default)]
    pub stuck: Option<DeviceState>,
    #[serde(default)]
    pub seed: u64,
}

impl FaultProfile {
    /// The same failure probability on every verb.
    pub fn transient(p: f64, seed: u64) -> Self {
        FaultProfile {
            failure: Verb::ALL.iter().map(|&v| (v, p)).collect(),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (v, p) in &self.failure {
            if !(0.0..=1.0).contains(p) {
                return Err(format!("failure probability {p} for {v} outside [0,1]"));
            }
        }
        Ok(())
    }
}

/// One command as the driver saw it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub uuid: ResourceUuid,
    pub verb: Verb,
    /// The payload bytes exactly as received.
    pub payload: String,
    pub before: DeviceState,
    pub after: DeviceState,
    pub ok: bool,
    /// Monotonic sequence numbers bracketing the command.
    pub started: u64,
    pub finished: u64,
}

pub trait Driver: Send + Sync {
    fn id(&self) -> &str;
    fn kind(&self) -> DeviceKind;
    fn serves(&self) -> Vec<ResourceUuid>;
    fn command(&self, uuid: &ResourceUuid, verb: Verb, payload: &Json) -> Result<DeviceState, DriverError>;
}

#[derive(Debug, Clone)]
struct Device {
    state: DeviceState,
    images: BTreeSet<String>,
    loaded: Option<Json>,
}

/// A simulated driver for one device type. Devices start powered off.
pub struct SimDriver {
    id: String,
    kind: DeviceKind,
    devices: Mutex<HashMap<ResourceUuid, Device>>,
    faults: FaultProfile,
    rng: Mutex<StdRng>,
    log: Mutex<Vec<LogEntry>>,
    seq: Mutex<u64>,
}

impl SimDriver {
    pub fn new(id: &str, kind: DeviceKind, faults: FaultProfile) -> Self {
        let seed = faults.seed;
        SimDriver {
            id: id.to_string(),
            kind,
            devices: Mutex::new(HashMap::new()),
            faults,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
            log: Mutex::new(Vec::new()),
            seq: Mutex::new(0),
        }
    }

    /// Adds a device offering `images` (bare-metal only). Re-adding a known
    /// device updates its images and leaves its state alone.
    pub fn add_device(&self, uuid: ResourceUuid, images: BTreeSet<String>) {
        self.devices
            .lock()
            .entry(uuid)
            .and_modify(|d| d.images = images.clone())
            .or_insert(Device {
                state: DeviceState::Off,
                images,
                loaded: None,
            });
    }

    pub fn state(&self, uuid: &ResourceUuid) -> Option<DeviceState> {
        self.devices.lock().get(uuid).map(|d| d.state)
    }

    /// The setup or configure payload last applied to the device.
    pub fn loaded(&self, uuid: &ResourceUuid) -> Option<Json> {
        self.devices.lock().get(uuid).and_then(|d| d.loaded.clone())
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.log.lock().clone()
    }

    fn tick(&self) -> u64 {
        let mut s = self.seq.lock();
        *s += 1;
        *s
    }

    fn delay(&self, verb: Verb) {
        let us = match self.faults.latency.get(&verb) {
            None => 0,
            Some(Latency::Fixed { us }) => *us,
            Some(Latency::Uniform { lo_us, hi_us }) => self.rng.lock().gen_range(*lo_us..=(*hi_us).max(*lo_us)),
        };
        if us > 0 {
            std::thread::sleep(Duration::from_micros(us));
        }
    }

    /// Missing fields fall back to the device default; named but
    /// unavailable images and malformed fields are refused.
    fn check_payload(&self, dev: &Device, verb: Verb, payload: &Json) -> Result<(), DriverError> {
        match (self.kind, verb) {
            (DeviceKind::BareMetal, Verb::Setup) => match payload.get("image") {
                None => Ok(()),
                Some(Json::String(i)) if dev.images.contains(i) => Ok(()),
                Some(i) => Err(DriverError::Rejected(format!("image {i} is not offered"))),
            },
            (DeviceKind::IotEmbedded, Verb::Setup) => match payload.get("firmware") {
                None | Some(Json::String(_)) => Ok(()),
                Some(f) => Err(DriverError::Rejected(format!("bad firmware name {f}"))),
            },
            (DeviceKind::NetPort, Verb::Configure) => match payload.get("bindings") {
                None | Some(Json::Array(_)) => Ok(()),
                Some(_) => Err(DriverError::Rejected("bindings must be a list".into())),
            },
            _ => Ok(()),
        }
    }

    fn apply(&self, dev: &mut Device, verb: Verb, payload: &Json) -> Result<DeviceState, DriverError> {
        let next = driver_transition(dev.state, verb)?;
        if verb == Verb::QueryState {
            return Ok(next);
        }
        if self.faults.stuck == Some(dev.state) && next != dev.state {
            return Err(DriverError::Transient(format!("device stuck in {}", dev.state)));
        }
        let p = self.faults.failure.get(&verb).copied().unwrap_or(0.0);
        if p > 0.0 && self.rng.lock().gen_bool(p.min(1.0)) {
            return Err(DriverError::Transient(format!("{verb} failed")));
        }
        self.check_payload(dev, verb, payload)?;
        match verb {
            Verb::Setup | Verb::Configure => dev.loaded = Some(payload.clone()),
            Verb::PowerOff => dev.loaded = None,
            _ => {}
        }
        dev.state = next;
        Ok(next)
    }
}

impl Driver for SimDriver {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> DeviceKind {
        self.kind
    }

    fn serves(&self) -> Vec<ResourceUuid> {
        let mut v: Vec<_> = self.devices.lock().keys().copied().collect();
        v.sort();
        v
    }

    fn command(&self, uuid: &ResourceUuid, verb: Verb, payload: &Json) -> Result<DeviceState, DriverError> {
        let started = self.tick();
        self.delay(verb);
        let mut devices = self.devices.lock();
        let dev = devices.get_mut(uuid).ok_or(DriverError::UnknownUuid(*uuid))?;
        let before = dev.state;
        let out = self.apply(dev, verb, payload);
        drop(devices);
        self.log.lock().push(LogEntry {
            uuid: *uuid,
            verb,
            payload: payload.to_string(),
            before,
            after: out.as_ref().copied().unwrap_or(before),
            ok: out.is_ok(),
            started,
            finished: self.tick(),
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use DeviceState::*;

    #[test]
    fn transition_table() {
        assert_eq!(driver_transition(Off, Verb::PowerOn), Ok(On));
        assert_eq!(driver_transition(Configured, Verb::PowerOff), Ok(Off));
        assert!(driver_transition(Off, Verb::Configure).is_err());
        let mut legal = 0;
        for s in [Off, On, Setup, Configured] {
            for v in Verb::ALL {
                match driver_transition(s, v) {
                    Ok(n) if v == Verb::QueryState => assert_eq!(n, s),
                    Ok(_) => legal += 1,
                    Err(e) => assert_eq!((e.state, e.verb), (s, v)),
                }
            }
        }
        // Three forward edges plus power_off from each of the four states.
        assert_eq!(legal, 7);
    }

    #[test]
    fn bare_metal_rejects_unoffered_image() {
        let d = SimDriver::new("d", DeviceKind::BareMetal, FaultProfile::default());
        let u = ResourceUuid::new_random();
        d.add_device(u, ["debian-9".to_string()].into());
        d.command(&u, Verb::PowerOn, &Json::Null).unwrap();
        let err = d.command(&u, Verb::Setup, &json!({"image": "riot"})).unwrap_err();
        assert!(matches!(err, DriverError::Rejected(_)));
        assert_eq!(d.state(&u), Some(On));
        assert_eq!(d.command(&u, Verb::Setup, &json!({"image": "debian-9"})), Ok(Setup));
        assert_eq!(d.command(&u, Verb::Configure, &json!({})), Ok(Configured));
        assert_eq!(d.log().len(), 4);
    }

    #[test]
    fn failures_leave_state_unchanged() {
        let d = SimDriver::new("d", DeviceKind::IotEmbedded, FaultProfile::transient(0.5, 7));
        let u = ResourceUuid::new_random();
        d.add_device(u, BTreeSet::new());
        let plan = [
            (Verb::PowerOn, Json::Null),
            (Verb::Setup, json!({"firmware": "plc"})),
            (Verb::Configure, json!({})),
        ];
        for (verb, payload) in plan {
            while d.command(&u, verb, &payload).is_err() {}
        }
        assert_eq!(d.state(&u), Some(Configured));
        for e in d.log() {
            if e.ok {
                assert_eq!(driver_transition(e.before, e.verb), Ok(e.after));
            } else {
                assert_eq!(e.before, e.after);
            }
        }
    }

    #[test]
    fn stuck_device() {
        let faults = FaultProfile {
            stuck: Some(On),
            ..Default::default()
        };
        let d = SimDriver::new("d", DeviceKind::IotEmbedded, faults);
        let u = ResourceUuid::new_random();
        d.add_device(u, BTreeSet::new());
        d.command(&u, Verb::PowerOn, &Json::Null).unwrap();
        assert!(d.command(&u, Verb::Setup, &json!({"firmware": "x"})).is_err());
        assert_eq!(d.command(&u, Verb::QueryState, &Json::Null), Ok(On));
    }
}
