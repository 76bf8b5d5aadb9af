//! A two-state, two-action deterministic MDP behind the [`Environment`]
//! interface, small enough to solve exactly.

use crate::agent::Observation;
use crate::environment::reward::N_STAKEHOLDERS;
use crate::environment::{ContextState, StakeholderWeights};
use crate::error::{Error, Result};

use super::{EnvStep, Environment};

/// `next[s][a]` and `reward[s][a]` fully specify the dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStateMdp {
    pub next: [[usize; 2]; 2],
    pub reward: [[f64; 2]; 2],
    /// Added to the coordinated reward per stakeholder; zero-mean under the initial weights.
    pub offsets: [f64; N_STAKEHOLDERS],
    state: usize,
}

impl Default for TwoStateMdp {
    /// State 1 pays 2 for staying but is only reached by forgoing the
    /// immediate 1 from staying in state 0.
    fn default() -> Self {
        Self {
            next: [[0, 1], [0, 1]],
            reward: [[1.0, 0.0], [0.0, 2.0]],
            offsets: [0.4, -0.5, 0.0, 0.0, 0.0],
            state: 0,
        }
    }
}

impl TwoStateMdp {
    pub fn observation(s: usize) -> Observation {
        let mut base = vec![0.0; 2];
        base[s] = 1.0;
        Observation {
            state: ContextState {
                base,
                temporal: vec![0.0; 6],
                spatial: Vec::new(),
                grid: vec![0.0; 4],
                weather: vec![0.0; 7],
                traffic: vec![0.0; 3],
                t: 0,
                complexity: 0.0,
            },
            graph: None,
        }
    }

    /// Per-stakeholder rewards whose initial-weight combination is `r`.
    pub fn stakeholder_rewards(&self, r: f64) -> [f64; N_STAKEHOLDERS] {
        std::array::from_fn(|i| r + self.offsets[i])
    }

    /// Optimal action values `Q*[s][a]` by value iteration, iterated until
    /// successive sweeps differ by less than `tol`.
    pub fn value_iteration(&self, gamma: f64, tol: f64) -> Result<[[f64; 2]; 2]> {
        if !(0.0..1.0).contains(&gamma) || !(tol > 0.0) {
            return Err(Error::Argument(format!("need gamma in [0, 1) and tol > 0, got {gamma}, {tol}")));
        }
        let mut q = [[0.0f64; 2]; 2];
        loop {
            let next: [[f64; 2]; 2] = std::array::from_fn(|s| {
                std::array::from_fn(|a| {
                    let s2 = self.next[s][a];
                    self.reward[s][a] + gamma * q[s2][0].max(q[s2][1])
                })
            });
            let delta = (0..4).map(|k| (next[k / 2][k % 2] - q[k / 2][k % 2]).abs()).fold(0.0, f64::max);
            q = next;
            if delta < tol {
                return Ok(q);
            }
        }
    }

    /// `Σ_i w0_i offset_i`, which must vanish for the coordinated reward to equal `reward`.
    pub fn offset_bias(&self) -> f64 {
        crate::environment::total_reward(&self.offsets, &StakeholderWeights::initial())
    }
}

impl Environment for TwoStateMdp {
    fn n_templates(&self) -> usize {
        2
    }

    fn reset(&mut self, _episode: usize) -> Result<Observation> {
        self.state = 0;
        Ok(Self::observation(0))
    }

    fn step(&mut self, template: usize, _alpha: f64) -> Result<EnvStep> {
        if template >= 2 {
            return Err(Error::Action(format!("template {template} out of range 0..2")));
        }
        let r = self.reward[self.state][template];
        self.state = self.next[self.state][template];
        Ok(EnvStep {
            next: Self::observation(self.state),
            rewards: self.stakeholder_rewards(r),
            done: false,
            outcome: None,
        })
    }
}
