//! Store key layout shared by the core services.

use crate::xir::ResourceUuid;

pub const SITES: &str = "site/";
pub const RESOURCES: &str = "rsrc/";
pub const NODE_RESERVATIONS: &str = "res/node/";
pub const LINK_RESERVATIONS: &str = "res/link/";
pub const REALIZATIONS: &str = "rz/";
pub const EXPERIMENTS: &str = "exp/";
pub const STATEBOARD: &str = "sb/";
pub const VNIS: &str = "hb/vni/";
pub const TAGS: &str = "hb/tag/";
pub const HB_EXPERIMENTS: &str = "hb/exp/";

pub fn site(id: &str) -> String {
    format!("{SITES}{id}")
}

pub fn resource(uuid: &ResourceUuid) -> String {
    format!("{RESOURCES}{uuid}")
}

pub fn node_reservation(uuid: &ResourceUuid) -> String {
    format!("{NODE_RESERVATIONS}{uuid}")
}

pub fn link_reservation(uuid: &ResourceUuid) -> String {
    format!("{LINK_RESERVATIONS}{uuid}")
}

pub fn realization(experiment: &str) -> String {
    format!("{REALIZATIONS}{experiment}")
}

pub fn experiment(experiment: &str) -> String {
    format!("{EXPERIMENTS}{experiment}")
}

pub fn stateboard_prefix(experiment: &str) -> String {
    format!("{STATEBOARD}{experiment}/")
}

pub fn stateboard(experiment: &str, uuid: &ResourceUuid) -> String {
    format!("{STATEBOARD}{experiment}/{uuid}")
}

/// VNIs are zero-padded so key order is numeric order.
pub fn vni(vni: u32) -> String {
    format!("{VNIS}{vni:08}")
}

pub fn tag_prefix(site: &str, mechanism: &str) -> String {
    format!("{TAGS}{site}/{mechanism}/")
}

pub fn tag(site: &str, mechanism: &str, tag: u32) -> String {
    format!("{TAGS}{site}/{mechanism}/{tag:05}")
}

pub fn hb_experiment(experiment: &str) -> String {
    format!("{HB_EXPERIMENTS}{experiment}")
}
