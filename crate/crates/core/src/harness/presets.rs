//! Scenario files shipped with the crate.

use std::path::Path;

use crate::error::Result;

use super::scenario::Scenario;

/// Heterogeneous devices with upload budgets of 100%, 40% and 25%.
pub const DEFAULT: &str = include_str!("../../presets/default.toml");
/// Every device trains the full model.
pub const UNCONSTRAINED: &str = include_str!("../../presets/unconstrained.toml");
/// `DEFAULT` with frozen blocks at full precision.
pub const FREEZE_ONLY: &str = include_str!("../../presets/freeze_only.toml");

/// Looks up a preset by name.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "default" => Some(DEFAULT),
        "unconstrained" => Some(UNCONSTRAINED),
        "freeze_only" => Some(FREEZE_ONLY),
        _ => None,
    }
}

pub fn load_preset(src: &str, name: &str) -> Result<Scenario> {
    Scenario::parse(src, Path::new(name))
}
