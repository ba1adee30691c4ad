//! Named CPG parameter sets shipped with the crate.
//!
//! The presets were tuned against the kinematic simulator in this crate for
//! the default twelve-link robot and are experimental starting points rather
//! than calibrated hardware gaits.

use serde::{Deserialize, Serialize};

use crate::cpg::CpgParams;
use crate::error::{Error, Result};

const SOURCES: [&str; 4] = [
    include_str!("../gaits/forward.json"),
    include_str!("../gaits/sidewinding.json"),
    include_str!("../gaits/rotation.json"),
    include_str!("../gaits/shape.json"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitPreset {
    pub name: String,
    pub description: String,
    #[serde(flatten)]
    pub params: CpgParams,
}

/// All shipped presets, in a fixed order.
pub fn presets() -> Vec<GaitPreset> {
    SOURCES
        .iter()
        .map(|src| serde_json::from_str(src).expect("shipped gait preset must parse"))
        .collect()
}

pub fn preset(name: &str) -> Result<GaitPreset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

pub fn names() -> Vec<String> {
    presets().into_iter().map(|p| p.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_presets_are_valid_for_the_default_robot() {
        let all = presets();
        assert_eq!(all.len(), SOURCES.len());
        for p in &all {
            p.params.validate().unwrap();
            assert_eq!(p.params.joint_count(), 11, "{}", p.name);
        }
        assert_eq!(names(), ["forward", "sidewinding", "rotation", "shape"]);
    }

    #[test]
    fn unknown_preset_is_reported_by_name() {
        match preset("moonwalk") {
            Err(Error::UnknownPreset(n)) => assert_eq!(n, "moonwalk"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
