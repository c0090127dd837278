//! The per-experiment lifecycle record kept at `exp/<id>`.

use serde::{Deserialize, Serialize};

use crate::xir::{valid_id, XirNetwork, XirError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Realized,
    Reserved,
    Materializing,
    Dematerializing,
    Dematerialized,
    Released,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Realized => "realized",
            Phase::Reserved => "reserved",
            Phase::Materializing => "materializing",
            Phase::Dematerializing => "dematerializing",
            Phase::Dematerialized => "dematerialized",
            Phase::Released => "released",
        }
    }

    /// Phases in which the experiment holds no resources and may be realized afresh.
    pub fn is_idle(self) -> bool {
        matches!(self, Phase::Realized | Phase::Dematerialized | Phase::Released)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub network: XirNetwork,
    pub phase: Phase,
    /// Set when the experiment lost resources to a forced decommission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
}

/// Experiment ids share the XIR id alphabet so they embed safely in store keys.
pub fn check_id(id: &str) -> Result<(), XirError> {
    valid_id(id)
}
