//! Parameterised joint-action templates.
//!
//! The joint action space is combinatorial in fleet size, so policies choose
//! among a fixed catalog of templates which [`super::World::expand_template`]
//! turns into a concrete [`super::JointAction`].

use serde::{Deserialize, Serialize};

use super::{GridCap, PriceTier, RenewableDispatch};
use crate::error::{Error, Result};

pub const THRESHOLDS: [Option<f64>; 4] = [None, Some(0.3), Some(0.5), Some(0.7)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationChoice {
    NearestFree,
    Cheapest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinationMode {
    /// Low prices, full caps, renewables to vehicles first.
    Boost,
    Balanced,
    /// High prices, tight caps.
    Conserve,
}

impl CoordinationMode {
    pub const ALL: [CoordinationMode; 3] = [CoordinationMode::Boost, CoordinationMode::Balanced, CoordinationMode::Conserve];

    pub fn settings(self) -> (PriceTier, GridCap, RenewableDispatch) {
        match self {
            CoordinationMode::Boost => (PriceTier::Low, GridCap::Cap100, RenewableDispatch::Prioritize),
            CoordinationMode::Balanced => (PriceTier::Mid, GridCap::Cap100, RenewableDispatch::Neutral),
            CoordinationMode::Conserve => (PriceTier::High, GridCap::Cap60, RenewableDispatch::Neutral),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    /// Charge vehicles below this state of charge; `None` charges nobody.
    pub threshold: Option<f64>,
    pub station: StationChoice,
    pub mode: CoordinationMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCatalog {
    specs: Vec<TemplateSpec>,
}

impl Default for TemplateCatalog {
    fn default() -> Self {
        Self::standard()
    }
}

impl TemplateCatalog {
    /// 4 thresholds × 2 station rules × 3 modes; index = threshold·6 + station·3 + mode.
    pub fn standard() -> Self {
        let mut specs = Vec::with_capacity(24);
        for threshold in THRESHOLDS {
            for station in [StationChoice::NearestFree, StationChoice::Cheapest] {
                for mode in CoordinationMode::ALL {
                    specs.push(TemplateSpec { threshold, station, mode });
                }
            }
        }
        Self { specs }
    }

    /// Charge below 50% at the nearest free port, balanced settings.
    pub const GREEDY_CHARGE: usize = 13;
    /// Nobody charges, balanced settings.
    pub const IDLE: usize = 1;

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, k: usize) -> Result<&TemplateSpec> {
        self.specs
            .get(k)
            .ok_or_else(|| Error::Action(format!("template {k} out of range 0..{}", self.specs.len())))
    }

    pub fn index_of(&self, spec: &TemplateSpec) -> Option<usize> {
        self.specs.iter().position(|s| s == spec)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TemplateSpec> {
        self.specs.iter()
    }
}
