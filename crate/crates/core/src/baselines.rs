//! Comparison policies, plus a harness that puts every algorithm through the
//! same training and evaluation episodes.
//!
//! The context-blind DQN reuses the agent machinery with a network that only
//! sees entity features. The UCB bandit keys its arm statistics on a coarse
//! context bucket. Greedy and random are fixed reference policies.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, argmax, Model, QInput, QNetParams};
use crate::environment::config::{Checker, Violation};
use crate::environment::state::EV_FEATURES;
use crate::environment::{total_reward, ContextState, ScenarioConfig, StakeholderWeights, StepOutcome, TemplateCatalog};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::training::{
    adaptation_params, consensus_action, rollout, rollout_with, train_with, ChargingEnv, EpisodeRecord, Environment,
    Learner, TrainerConfig, EVAL_STREAM, TRAIN_STREAM,
};

/// peak × renewable high/low × congestion high/low.
pub const N_BUCKETS: usize = 8;
/// Normalised renewable share at or above which a step counts as renewable-rich.
pub const RENEWABLE_HIGH: f64 = 0.5;
/// Normalised congestion at or above which a step counts as congested.
pub const CONGESTION_HIGH: f64 = 0.5;
/// Vehicles below this state of charge make the greedy policy charge.
pub const GREEDY_SOC: f64 = 0.5;

/// Bucket index `4·peak + 2·renewable_high + congested`.
pub fn context_bucket(state: &ContextState) -> usize {
    let f = state.context_features();
    let peak = f[13] >= 0.5;
    let renewable = f[16] >= RENEWABLE_HIGH;
    let congested = f[4] >= CONGESTION_HIGH;
    4 * usize::from(peak) + 2 * usize::from(renewable) + usize::from(congested)
}

/// Pull counts and running mean rewards per (bucket, arm), bucket-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditArmStats {
    n_buckets: usize,
    n_arms: usize,
    counts: Vec<usize>,
    means: Vec<f64>,
}

impl BanditArmStats {
    pub fn new(n_buckets: usize, n_arms: usize) -> Result<Self> {
        if n_buckets == 0 || n_arms == 0 {
            return Err(Error::Argument(format!("bandit needs buckets and arms, got {n_buckets} × {n_arms}")));
        }
        let cells = n_buckets
            .checked_mul(n_arms)
            .ok_or_else(|| Error::Argument("bandit table size overflows".into()))?;
        Ok(Self { n_buckets, n_arms, counts: vec![0; cells], means: vec![0.0; cells] })
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    fn cell(&self, bucket: usize, arm: usize) -> Result<usize> {
        if bucket >= self.n_buckets || arm >= self.n_arms {
            return Err(Error::Argument(format!(
                "cell ({bucket}, {arm}) outside {} buckets × {} arms",
                self.n_buckets, self.n_arms
            )));
        }
        Ok(bucket * self.n_arms + arm)
    }

    pub fn count(&self, bucket: usize, arm: usize) -> Result<usize> {
        Ok(self.counts[self.cell(bucket, arm)?])
    }

    /// Zero for an unpulled arm.
    pub fn mean(&self, bucket: usize, arm: usize) -> Result<f64> {
        Ok(self.means[self.cell(bucket, arm)?])
    }

    /// Total pulls recorded in `bucket`.
    pub fn pulls(&self, bucket: usize) -> Result<usize> {
        self.cell(bucket, 0)?;
        Ok(self.counts[bucket * self.n_arms..(bucket + 1) * self.n_arms].iter().sum())
    }

    /// Folds `reward` into the running mean of `(bucket, arm)`.
    pub fn update(&mut self, bucket: usize, arm: usize, reward: f64) -> Result<()> {
        if !reward.is_finite() {
            return Err(Error::Argument(format!("bandit reward must be finite, got {reward}")));
        }
        let k = self.cell(bucket, arm)?;
        self.counts[k] += 1;
        self.means[k] += (reward - self.means[k]) / self.counts[k] as f64;
        Ok(())
    }

    /// Restores a table from its parts, e.g. after deserialising.
    pub fn from_parts(n_buckets: usize, n_arms: usize, counts: Vec<usize>, means: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(n_buckets, n_arms)?;
        if counts.len() != s.counts.len() || means.len() != s.means.len() {
            return Err(Error::Argument(format!(
                "bandit table needs {} cells, got {} counts and {} means",
                s.counts.len(),
                counts.len(),
                means.len()
            )));
        }
        if counts.iter().zip(&means).any(|(n, m)| *n > 0 && !m.is_finite()) {
            return Err(Error::Argument("pulled arms need finite means".into()));
        }
        s.counts = counts;
        s.means = means;
        Ok(s)
    }
}

/// Lowest unpulled arm in `bucket`, otherwise `argmax μ̂ + c·√(ln t / n)`.
pub fn ucb_select(bucket: usize, stats: &BanditArmStats, t: usize, c: f64) -> Result<usize> {
    if !c.is_finite() || c < 0.0 {
        return Err(Error::Argument(format!("exploration constant must be finite and ≥ 0, got {c}")));
    }
    let mut scores = Vec::with_capacity(stats.n_arms());
    for arm in 0..stats.n_arms() {
        let n = stats.count(bucket, arm)?;
        if n == 0 {
            return Ok(arm);
        }
        // ln t < 0 for t = 0 would make the bonus undefined.
        let bonus = c * ((t as f64).ln().max(0.0) / n as f64).sqrt();
        scores.push(stats.mean(bucket, arm)? + bonus);
    }
    Ok(argmax(&scores))
}

/// A contextual UCB learner over the template catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcbAgent {
    pub stats: BanditArmStats,
    pub c: f64,
}

impl UcbAgent {
    pub fn new(n_templates: usize, c: f64) -> Result<Self> {
        Ok(Self { stats: BanditArmStats::new(N_BUCKETS, n_templates)?, c })
    }

    pub fn select(&self, state: &ContextState) -> Result<usize> {
        let b = context_bucket(state);
        ucb_select(b, &self.stats, self.stats.pulls(b)?, self.c)
    }

    pub fn observe(&mut self, state: &ContextState, arm: usize, reward: f64) -> Result<()> {
        self.stats.update(context_bucket(state), arm, reward)
    }
}

/// Charge everyone below half charge at the nearest free port, else idle.
pub fn greedy_policy(state: &ContextState) -> usize {
    let low = state.base.chunks_exact(EV_FEATURES).any(|ev| ev[0] < GREEDY_SOC);
    if low {
        TemplateCatalog::GREEDY_CHARGE
    } else {
        TemplateCatalog::IDLE
    }
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_templates: usize) -> Result<usize> {
    if n_templates == 0 {
        return Err(Error::Argument("no templates to choose from".into()));
    }
    Ok(rng.random_range(0..n_templates))
}

/// ε-greedy action of a context-blind network: no attention, graph or latent pathway.
pub fn dqn_baseline_policy<R: Rng + ?Sized>(state: &ContextState, params: &QNetParams, eps: f64, rng: &mut R) -> Result<usize> {
    let c = &params.config;
    if c.attention.is_some() || c.gnn.is_some() || c.latent_width != 0 {
        return Err(Error::Argument("the DQN baseline takes a network without context pathways".into()));
    }
    let w = agent::head_weights(params.n_heads(), &StakeholderWeights::initial())?;
    let input = QInput { state, graph: None, latent: &[] };
    Ok(agent::select_action(&input, params, &w, eps, rng)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Cama,
    Dqn,
    Ucb,
    Greedy,
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Cama, Algorithm::Dqn, Algorithm::Ucb, Algorithm::Greedy, Algorithm::Random];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cama => "cama",
            Algorithm::Dqn => "dqn",
            Algorithm::Ucb => "ucb",
            Algorithm::Greedy => "greedy",
            Algorithm::Random => "random",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Argument(format!("unknown algorithm {s:?}; expected one of cama, dqn, ucb, greedy, random")))
    }
}

/// Settings for the evaluation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out episodes each algorithm is scored on after training.
    pub episodes: usize,
    /// UCB exploration constant, in per-step coordinated-reward units.
    pub ucb_c: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 5, ucb_c: 0.1 }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<Violation> {
        let mut c = Checker::new("evaluation");
        c.check(self.episodes > 0, "episodes", "must be at least 1");
        c.finite_non_negative(self.ucb_c, "ucb_c");
        c.violations
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(v) => Err(v.into()),
            None => Ok(()),
        }
    }
}

/// Everything one (algorithm, seed) run produced.
#[derive(Debug, Clone)]
pub struct AlgorithmRun {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// One record per training episode; fixed policies replay the same episodes.
    pub curve: Vec<EpisodeRecord>,
    /// Held-out episodes with the learned policy frozen.
    pub evaluation: Vec<EpisodeRecord>,
    pub outcomes: Vec<Vec<StepOutcome>>,
    /// Set for the two network learners.
    pub model: Option<Model>,
}

/// Copies of the configs with both the scenario and trainer seeded by `seed`.
pub fn seeded(scenario: &ScenarioConfig, cfg: &TrainerConfig, seed: u64) -> (ScenarioConfig, TrainerConfig) {
    let mut s = scenario.clone();
    s.seed = seed;
    let mut c = cfg.clone();
    c.seed = seed;
    (s, c)
}

/// Trains (where applicable) and evaluates `algorithm`; `on_episode` sees
/// each training-curve record as it is produced.
pub fn run_algorithm(
    scenario: &ScenarioConfig,
    cfg: &TrainerConfig,
    eval: &EvalConfig,
    algorithm: Algorithm,
    on_episode: &mut dyn FnMut(&EpisodeRecord),
) -> Result<AlgorithmRun> {
    cfg.validate()?;
    eval.validate()?;
    let uses_graph = algorithm == Algorithm::Cama;
    let mut train_env = ChargingEnv::new(scenario, uses_graph, TRAIN_STREAM)?;
    let mut eval_env = ChargingEnv::new(scenario, uses_graph, EVAL_STREAM)?;
    let dim = train_env.reset(0)?.state.dim();
    let adaptation = adaptation_params(dim, cfg);
    let n_templates = train_env.n_templates();
    let episodes = 0..cfg.episodes;
    let held_out = 0..eval.episodes;

    let (curve, evaluation, model) = match algorithm {
        Algorithm::Cama | Algorithm::Dqn => {
            let learner = if algorithm == Algorithm::Cama { Learner::Cama } else { Learner::Dqn };
            let out = train_with(scenario, cfg, learner, &mut |r, _| {
                on_episode(r);
                Ok(())
            })?;
            let model = out.model;
            let ev = rollout(&mut eval_env, held_out, cfg.t_max, &adaptation, &mut |obs| consensus_action(&model, obs))?;
            (out.records, ev, Some(model))
        }
        Algorithm::Ucb => {
            let mut ucb = UcbAgent::new(n_templates, eval.ucb_c)?;
            let fixed = StakeholderWeights::initial();
            let curve = {
                let shared = std::cell::RefCell::new(&mut ucb);
                rollout_with(
                    &mut train_env,
                    episodes,
                    cfg.t_max,
                    &adaptation,
                    &mut |obs| shared.borrow().select(&obs.state),
                    &mut |obs, a, rewards| shared.borrow_mut().observe(&obs.state, a, total_reward(rewards, &fixed)),
                )?
            };
            let curve = report(curve, on_episode);
            // Frozen evaluation exploits the table.
            let frozen = UcbAgent { c: 0.0, ..ucb };
            let ev = rollout(&mut eval_env, held_out, cfg.t_max, &adaptation, &mut |obs| frozen.select(&obs.state))?;
            (curve, ev, None)
        }
        Algorithm::Greedy => {
            let mut policy = |obs: &agent::Observation| Ok(greedy_policy(&obs.state));
            let curve = report(rollout(&mut train_env, episodes, cfg.t_max, &adaptation, &mut policy)?, on_episode);
            let ev = rollout(&mut eval_env, held_out, cfg.t_max, &adaptation, &mut policy)?;
            (curve, ev, None)
        }
        Algorithm::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 6));
            let mut policy = |_: &agent::Observation| random_policy(&mut rng, n_templates);
            let curve = report(rollout(&mut train_env, episodes, cfg.t_max, &adaptation, &mut policy)?, on_episode);
            let ev = rollout(&mut eval_env, held_out, cfg.t_max, &adaptation, &mut policy)?;
            (curve, ev, None)
        }
    };
    let (evaluation, outcomes) = evaluation.into_iter().unzip();
    Ok(AlgorithmRun { algorithm, seed: cfg.seed, curve, evaluation, outcomes, model })
}

fn report(runs: Vec<(EpisodeRecord, Vec<StepOutcome>)>, on_episode: &mut dyn FnMut(&EpisodeRecord)) -> Vec<EpisodeRecord> {
    runs.into_iter()
        .map(|(r, _)| {
            on_episode(&r);
            r
        })
        .collect()
}
