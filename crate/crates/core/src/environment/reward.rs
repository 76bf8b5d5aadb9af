//! Stakeholder rewards.
//!
//! Each stakeholder reward is `base + bonus_scale · α · bonus + penalty_scale · penalty`
//! with `bonus >= 0` and `penalty <= 0`; the coordinated reward is the
//! weighted sum over the five stakeholders.

use serde::{Deserialize, Serialize};

use super::StepOutcome;
use crate::error::{Error, Result};

pub const N_STAKEHOLDERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stakeholder {
    EvUsers,
    Grid,
    Station,
    Fleet,
    Environment,
}

impl Stakeholder {
    pub const ALL: [Stakeholder; N_STAKEHOLDERS] = [
        Stakeholder::EvUsers,
        Stakeholder::Grid,
        Stakeholder::Station,
        Stakeholder::Fleet,
        Stakeholder::Environment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Argument(format!("stakeholder index {i} out of range 0..5")))
    }
}

/// Non-negative weights over (ev_users, grid, station, fleet, environment) summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 5]", into = "[f64; 5]")]
pub struct StakeholderWeights([f64; N_STAKEHOLDERS]);

impl StakeholderWeights {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(w: [f64; N_STAKEHOLDERS]) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invariant(format!("stakeholder weights must be finite and >= 0, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Invariant(format!("stakeholder weights must sum to 1, got {sum}")));
        }
        Ok(Self(w))
    }

    /// The default priorities: 25% EV users, 20% each grid, station and fleet, 15% environment.
    pub fn initial() -> Self {
        Self([0.25, 0.20, 0.20, 0.20, 0.15])
    }

    pub fn one_hot(k: usize) -> Result<Self> {
        let mut w = [0.0; N_STAKEHOLDERS];
        *w.get_mut(k)
            .ok_or_else(|| Error::Argument(format!("stakeholder index {k} out of range")))? = 1.0;
        Ok(Self(w))
    }

    pub fn uniform() -> Self {
        Self([0.2; N_STAKEHOLDERS])
    }

    pub fn as_array(&self) -> [f64; N_STAKEHOLDERS] {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

impl TryFrom<[f64; 5]> for StakeholderWeights {
    type Error = Error;

    fn try_from(w: [f64; 5]) -> Result<Self> {
        Self::new(w)
    }
}

impl From<StakeholderWeights> for [f64; 5] {
    fn from(w: StakeholderWeights) -> Self {
        w.0
    }
}

/// Coefficients of the base reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseCoefficients {
    pub waiting: f64,
    pub deadline_miss: f64,
    pub voltage: f64,
    pub idle_port: f64,
    pub peak_fossil: f64,
}

impl Default for BaseCoefficients {
    fn default() -> Self {
        Self {
            waiting: 0.1,
            deadline_miss: 2.0,
            voltage: 0.5,
            idle_port: 0.2,
            peak_fossil: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    /// β per stakeholder.
    pub bonus_scale: [f64; N_STAKEHOLDERS],
    /// γ per stakeholder.
    pub penalty_scale: [f64; N_STAKEHOLDERS],
    pub base: BaseCoefficients,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            bonus_scale: [0.5; N_STAKEHOLDERS],
            penalty_scale: [1.0; N_STAKEHOLDERS],
            base: BaseCoefficients::default(),
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .bonus_scale
            .iter()
            .chain(&self.penalty_scale)
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                field: "reward".into(),
                message: "bonus_scale and penalty_scale must be finite and >= 0".into(),
            })
        }
    }
}

/// Per-stakeholder base reward, contextual bonus and constraint penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub base: [f64; N_STAKEHOLDERS],
    pub bonus: [f64; N_STAKEHOLDERS],
    pub penalty: [f64; N_STAKEHOLDERS],
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl RewardComponents {
    pub fn from_outcome(o: &StepOutcome, coeff: &BaseCoefficients) -> Self {
        let n_evs = o.n_evs.max(1) as f64;
        let n_comm = o.n_commercial as f64;
        let n_tx = o.loadings.len().max(1) as f64;
        let n_st = o.n_stations.max(1) as f64;

        let overload_sq: f64 = o.overload_ratios.iter().map(|r| r * r).sum();
        let overload_sum: f64 = o.overload_ratios.iter().sum();
        let voltage_dev = o.voltage_deviation_sum / n_tx;
        let ev_renewable_share = safe_div(o.ev_renewable_kwh, o.metered_kwh).clamp(0.0, 1.0);
        let fossil_peak = if o.peak && o.metered_kwh > 0.0 { 1.0 - ev_renewable_share } else { 0.0 };

        let fleet_base = if o.n_commercial > 0 {
            (o.tasks_served as f64 - o.commercial_energy_cost) / n_comm
        } else {
            0.0
        };

        let base = [
            -(o.ev_energy_cost / n_evs)
                - coeff.waiting * o.waiting_evs as f64 / n_evs
                - coeff.deadline_miss * o.deadline_misses as f64 / n_evs,
            -overload_sq / n_tx - coeff.voltage * voltage_dev,
            o.revenue / n_evs - coeff.idle_port * safe_div(o.idle_ports as f64, o.total_ports as f64),
            fleet_base,
            ev_renewable_share - coeff.peak_fossil * fossil_peak,
        ];

        let bonus = [
            ev_renewable_share,
            if o.peak { 0.0 } else { safe_div(o.ev_load_kw, o.total_capacity_kw).clamp(0.0, 1.0) },
            o.pricing_match.clamp(0.0, 1.0),
            if o.n_commercial > 0 {
                (o.tasks_served as f64 * (1.0 - o.congestion) / n_comm).clamp(0.0, 1.0)
            } else {
                0.0
            },
            safe_div(o.ev_renewable_kwh, o.available_renewable_kwh).clamp(0.0, 1.0),
        ];

        let penalty = [
            -(o.deadline_misses as f64) / n_evs,
            -overload_sum,
            -((o.queue_overflow + o.price_cap_violations) as f64) / n_st,
            if o.n_commercial > 0 {
                -((o.commercial_misses + o.commercial_low_soc) as f64) / n_comm
            } else {
                0.0
            },
            -safe_div(o.curtailed_kwh, o.available_renewable_kwh + o.curtailed_kwh).clamp(0.0, 1.0),
        ];
        Self { base, bonus, penalty }
    }

    pub fn reward(&self, i: usize, alpha: f64, params: &RewardParams) -> Result<f64> {
        if i >= N_STAKEHOLDERS {
            return Err(Error::Argument(format!("stakeholder index {i} out of range 0..5")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("adaptation factor must lie in [0, 1], got {alpha}")));
        }
        Ok(self.base[i] + params.bonus_scale[i] * alpha * self.bonus[i] + params.penalty_scale[i] * self.penalty[i])
    }

    pub fn rewards(&self, alpha: f64, params: &RewardParams) -> Result<[f64; N_STAKEHOLDERS]> {
        let mut out = [0.0; N_STAKEHOLDERS];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.reward(i, alpha, params)?;
        }
        Ok(out)
    }
}

/// Reward of stakeholder `i` for one simulated step.
pub fn stakeholder_reward(i: usize, outcome: &StepOutcome, alpha: f64, params: &RewardParams) -> Result<f64> {
    RewardComponents::from_outcome(outcome, &params.base).reward(i, alpha, params)
}

/// `Σ w_i r_i`.
pub fn total_reward(rewards: &[f64; N_STAKEHOLDERS], w: &StakeholderWeights) -> f64 {
    rewards.iter().zip(w.0.iter()).map(|(r, w)| r * w).sum()
}
