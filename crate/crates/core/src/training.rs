//! The training loop: ε-greedy rollouts, experience replay, hard target
//! syncs, encoder updates, and per-episode stakeholder weight adaptation.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    self, argmax, batch_update, epsilon_ctx, head_weights, latent_for, ExplorationParams, Model, Observation, QNetConfig,
    QNetParams, UpdateParams,
};
use crate::context::{adaptation_factor, encoder_update, AdaptationParams, ContextEncoder};
use crate::environment::config::{Checker, Violation};
use crate::environment::reward::N_STAKEHOLDERS;
use crate::environment::{total_reward, ScenarioConfig, StakeholderWeights, StepOutcome, TemplateCatalog, World};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Topology};
use crate::mix_seed;
use crate::numerics::{Optimizer, OptimizerKind};

pub mod toy;

/// One stored step. `state` and `next` are shared with neighbouring transitions.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Arc<Observation>,
    pub action: usize,
    pub rewards: [f64; N_STAKEHOLDERS],
    /// `Σ_i w_i R_i` under `weights`.
    pub r_coord: f64,
    /// Stakeholder weights active when the transition was stored.
    pub weights: [f64; N_STAKEHOLDERS],
    pub next: Arc<Observation>,
    pub done: bool,
}

impl Transition {
    pub fn new(
        state: Arc<Observation>,
        action: usize,
        rewards: [f64; N_STAKEHOLDERS],
        weights: &StakeholderWeights,
        next: Arc<Observation>,
        done: bool,
    ) -> Self {
        Self {
            state,
            action,
            rewards,
            r_coord: total_reward(&rewards, weights),
            weights: weights.as_array(),
            next,
            done,
        }
    }

    /// `|r_coord − Σ_i w_i R_i|` recomputed from the stored fields.
    pub fn bookkeeping_error(&self) -> f64 {
        let recomputed: f64 = self.rewards.iter().zip(&self.weights).map(|(r, w)| r * w).sum();
        (self.r_coord - recomputed).abs()
    }
}

/// Fixed-capacity FIFO of transitions with its own sampling stream.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Buffer("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `t`, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Position 0 is the oldest transition.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `b` distinct positions drawn uniformly.
    pub fn sample_indices(&mut self, b: usize) -> Result<Vec<usize>> {
        if b > self.items.len() {
            return Err(Error::Buffer(format!("cannot sample {b} from {} transitions", self.items.len())));
        }
        Ok(rand::seq::index::sample(&mut self.rng, self.items.len(), b).into_vec())
    }

    /// `b` distinct transitions drawn uniformly.
    pub fn sample(&mut self, b: usize) -> Result<Vec<&Transition>> {
        let idx = self.sample_indices(b)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Widths of the learned components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSettings {
    pub embed_width: usize,
    pub trunk_width: usize,
    pub head_hidden: usize,
    pub attention_heads: usize,
    pub attention_width: usize,
    pub d_model: usize,
    pub gnn_width: usize,
    pub gnn_layers: usize,
    pub latent_width: usize,
    pub encoder_hidden: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            embed_width: 8,
            trunk_width: 64,
            head_hidden: 32,
            attention_heads: 2,
            attention_width: 8,
            d_model: 16,
            gnn_width: 16,
            gnn_layers: 2,
            latent_width: 8,
            encoder_hidden: 32,
        }
    }
}

impl NetworkSettings {
    /// Five heads over attention, GNN, latent and entity pathways.
    pub fn cama(&self, n_templates: usize, entity_width: usize) -> QNetConfig {
        let mut c = QNetConfig::cama(n_templates, entity_width, self.latent_width);
        self.apply(&mut c);
        c.attention = Some(agent::AttentionShape {
            heads: self.attention_heads,
            d_k: self.attention_width,
            d_v: self.attention_width,
            d_model: self.d_model,
        });
        c.gnn = Some(agent::GnnShape { width: self.gnn_width, layers: self.gnn_layers });
        c
    }

    /// One head over entity features only.
    pub fn dqn(&self, n_templates: usize, entity_width: usize) -> QNetConfig {
        let mut c = QNetConfig::dqn(n_templates, entity_width);
        self.apply(&mut c);
        c
    }

    fn apply(&self, c: &mut QNetConfig) {
        c.embed_width = self.embed_width;
        c.trunk_width = self.trunk_width;
        c.head_hidden = self.head_hidden;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub episodes: usize,
    /// Step cap per episode.
    pub t_max: usize,
    /// Minimum replay size before any update.
    pub b_min: usize,
    pub update_every: usize,
    /// Hard target sync interval, in environment steps.
    pub target_sync: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_encoder: f64,
    pub gamma: f64,
    pub eta: f64,
    pub eps_0: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub eps_min: f64,
    pub gamma_coord: f64,
    pub replay_capacity: usize,
    /// Floor applied to adapted weights before renormalisation.
    pub weight_floor: f64,
    pub encoder_batch: usize,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerKind,
    pub network: NetworkSettings,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            episodes: 150,
            t_max: 96,
            b_min: 512,
            update_every: 4,
            target_sync: 200,
            batch_size: 128,
            lr: 1e-3,
            lr_encoder: 1e-3,
            gamma: 0.95,
            eta: 0.1,
            eps_0: 0.9,
            lambda_t: 0.02,
            lambda_c: 0.5,
            eps_min: 0.05,
            gamma_coord: 0.5,
            replay_capacity: 20_000,
            weight_floor: 0.01,
            encoder_batch: 16,
            max_grad_norm: 10.0,
            optimizer: OptimizerKind::Adam,
            network: NetworkSettings::default(),
            seed: 7,
        }
    }
}

impl TrainerConfig {
    pub fn exploration(&self) -> ExplorationParams {
        ExplorationParams {
            eps_base: self.eps_0,
            lambda_t: self.lambda_t,
            lambda_c: self.lambda_c,
            eps_min: self.eps_min,
        }
    }

    pub fn update_params(&self) -> UpdateParams {
        UpdateParams {
            gamma: self.gamma,
            gamma_coord: self.gamma_coord,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
        }
    }

    /// Every violated rule, not just the first.
    pub fn violations(&self) -> Vec<Violation> {
        let mut c = Checker::new("trainer");
        c.check(self.t_max > 0, "t_max", "must be positive");
        c.check(self.batch_size > 0, "batch_size", "must be positive");
        c.check(self.update_every > 0, "update_every", "must be positive");
        c.check(self.target_sync > 0, "target_sync", "must be positive");
        c.check(self.encoder_batch > 0, "encoder_batch", "must be positive");
        c.check(
            self.batch_size <= self.b_min,
            "batch_size",
            format!("batch_size ({}) must not exceed b_min ({})", self.batch_size, self.b_min),
        );
        c.check(
            self.b_min <= self.replay_capacity,
            "b_min",
            format!("b_min ({}) must not exceed replay_capacity ({})", self.b_min, self.replay_capacity),
        );
        c.check((0.0..1.0).contains(&self.gamma), "gamma", format!("must lie in [0, 1), got {}", self.gamma));
        c.fraction(self.gamma_coord, "gamma_coord");
        c.fraction(self.eps_0, "eps_0");
        c.fraction(self.eps_min, "eps_min");
        c.check(self.weight_floor < 0.2, "weight_floor", format!("must be below 0.2, got {}", self.weight_floor));
        for (v, name) in [
            (self.lr, "lr"),
            (self.lr_encoder, "lr_encoder"),
            (self.eta, "eta"),
            (self.lambda_t, "lambda_t"),
            (self.lambda_c, "lambda_c"),
            (self.weight_floor, "weight_floor"),
            (self.max_grad_norm, "max_grad_norm"),
        ] {
            c.finite_non_negative(v, name);
        }
        let n = &self.network;
        for (v, name) in [
            (n.embed_width, "network.embed_width"),
            (n.trunk_width, "network.trunk_width"),
            (n.head_hidden, "network.head_hidden"),
            (n.attention_heads, "network.attention_heads"),
            (n.attention_width, "network.attention_width"),
            (n.d_model, "network.d_model"),
            (n.gnn_width, "network.gnn_width"),
            (n.encoder_hidden, "network.encoder_hidden"),
        ] {
            c.check((1..=1024).contains(&v), name, format!("must be in 1..=1024, got {v}"));
        }
        c.check(n.latent_width <= 1024, "network.latent_width", "must be <= 1024");
        c.check(n.gnn_layers <= 8, "network.gnn_layers", "must be <= 8");
        c.violations
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(v) => Err(v.into()),
            None => Ok(()),
        }
    }
}

/// What one environment step reports back to the trainer.
#[derive(Debug, Clone)]
pub struct EnvStep {
    pub next: Observation,
    pub rewards: [f64; N_STAKEHOLDERS],
    /// Terminal: no bootstrap from `next`.
    pub done: bool,
    pub outcome: Option<StepOutcome>,
}

/// An episodic environment over a finite template catalog.
pub trait Environment {
    fn n_templates(&self) -> usize;
    /// Starts episode `episode`; must be a pure function of the index.
    fn reset(&mut self, episode: usize) -> Result<Observation>;
    fn step(&mut self, template: usize, alpha: f64) -> Result<EnvStep>;
}

/// The charging simulator driven through the template catalog.
#[derive(Debug, Clone)]
pub struct ChargingEnv {
    world: World,
    catalog: TemplateCatalog,
    with_graph: bool,
    stream: u64,
}

/// Episode seed stream used for training rollouts.
pub const TRAIN_STREAM: u64 = 0;
/// Episode seed stream for held-out evaluation rollouts.
pub const EVAL_STREAM: u64 = 1;

impl ChargingEnv {
    pub fn new(scenario: &ScenarioConfig, with_graph: bool, stream: u64) -> Result<Self> {
        Ok(Self {
            world: World::new(scenario.clone())?,
            catalog: TemplateCatalog::standard(),
            with_graph,
            stream,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Seed of episode `episode` on this environment's stream.
    pub fn episode_seed(&self, episode: usize) -> u64 {
        mix_seed(mix_seed(self.world.config().seed, self.stream), episode as u64)
    }

    fn observe(&self, state: crate::environment::ContextState) -> Result<Observation> {
        let graph = if self.with_graph {
            Some(build_graph(&state, &Topology::from_world(&self.world))?)
        } else {
            None
        };
        Ok(Observation { state, graph })
    }
}

impl Environment for ChargingEnv {
    fn n_templates(&self) -> usize {
        self.catalog.len()
    }

    fn reset(&mut self, episode: usize) -> Result<Observation> {
        let state = self.world.reset(self.episode_seed(episode));
        self.observe(state)
    }

    fn step(&mut self, template: usize, alpha: f64) -> Result<EnvStep> {
        let spec = self.catalog.get(template)?;
        let action = self.world.expand_template(&spec);
        let res = self.world.step(&action, alpha)?;
        Ok(EnvStep {
            next: self.observe(res.next)?,
            rewards: res.rewards,
            done: res.done,
            outcome: Some(res.outcome),
        })
    }
}

/// Summary of one training or evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// `Σ_t r_coord` under the weights active during the episode.
    pub total_reward: f64,
    pub stakeholder_totals: [f64; N_STAKEHOLDERS],
    pub steps: usize,
    pub epsilon_mean: f64,
    /// `None` when no update ran during the episode.
    pub loss_mean: Option<f64>,
    /// Weights after this episode's adaptation.
    pub weights: [f64; N_STAKEHOLDERS],
    /// Steps whose outcome violated no hard constraint.
    pub feasible_steps: usize,
}

impl EpisodeRecord {
    /// `Σ_i w_i · total_i` under fixed weights, comparable across runs.
    pub fn reward_under(&self, w: &StakeholderWeights) -> f64 {
        total_reward(&self.stakeholder_totals, w)
    }

    pub fn coordination_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.feasible_steps as f64 / self.steps as f64
        }
    }
}

pub const TRACE_HEADER: [&str; 14] = [
    "episode",
    "total_reward",
    "r_ev",
    "r_grid",
    "r_station",
    "r_fleet",
    "r_env",
    "loss_mean",
    "epsilon_mean",
    "w1",
    "w2",
    "w3",
    "w4",
    "w5",
];

/// Writes the per-episode training trace; an absent loss is an empty field.
pub fn write_trace<W: Write>(records: &[EpisodeRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        let mut row = vec![r.episode.to_string(), r.total_reward.to_string()];
        row.extend(r.stakeholder_totals.iter().map(f64::to_string));
        row.push(r.loss_mean.map_or_else(String::new, |l| l.to_string()));
        row.push(r.epsilon_mean.to_string());
        row.extend(r.weights.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `w_i · exp(η · perf_i)`, renormalised to sum to one.
///
/// Returns the input unchanged when every factor is equal, so `η = 0` and
/// uniform performance are exact identities.
pub fn adapt_weights(w: &StakeholderWeights, perf: &[f64; N_STAKEHOLDERS], eta: f64) -> Result<StakeholderWeights> {
    if perf.iter().any(|p| !p.is_finite()) || !eta.is_finite() {
        return Err(Error::Argument(format!("performance and rate must be finite, got {perf:?}, {eta}")));
    }
    let factors: Vec<f64> = perf.iter().map(|p| (eta * p).exp()).collect();
    if factors.iter().all(|f| *f == factors[0]) {
        return Ok(*w);
    }
    let raw: Vec<f64> = w.as_array().iter().zip(&factors).map(|(wi, f)| wi * f).collect();
    normalize(&raw)
}

fn normalize(raw: &[f64]) -> Result<StakeholderWeights> {
    let sum: f64 = raw.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::Invariant(format!("cannot normalise weights {raw:?}")));
    }
    let mut out = [0.0; N_STAKEHOLDERS];
    for (o, r) in out.iter_mut().zip(raw) {
        *o = r / sum;
    }
    StakeholderWeights::new(out)
}

/// Raises every weight to at least `floor`, then renormalises.
pub fn floor_weights(w: &StakeholderWeights, floor: f64) -> Result<StakeholderWeights> {
    let arr = w.as_array();
    if arr.iter().all(|v| *v >= floor) {
        return Ok(*w);
    }
    let raw: Vec<f64> = arr.iter().map(|v| v.max(floor)).collect();
    normalize(&raw)
}

/// Weighted vote: each head adds its weight to its greedy template; the
/// largest mass wins, then the higher `q_total`, then the lower index.
pub fn consensus(choices: &[usize], w: &[f64], q_total: &[f64]) -> Result<usize> {
    if choices.len() != w.len() {
        return Err(crate::error::shape_err("consensus weights", choices.len(), w.len()));
    }
    let mut votes = vec![0.0; q_total.len()];
    for (&c, wi) in choices.iter().zip(w) {
        *votes
            .get_mut(c)
            .ok_or_else(|| Error::Action(format!("template {c} out of range 0..{}", q_total.len())))? += wi;
    }
    let mut best: Option<usize> = None;
    for &c in choices {
        best = Some(match best {
            None => c,
            Some(b) if votes[c] > votes[b] || (votes[c] == votes[b] && (q_total[c] > q_total[b] || (q_total[c] == q_total[b] && c < b))) => c,
            Some(b) => b,
        });
    }
    best.ok_or_else(|| Error::Argument("consensus needs at least one head".into()))
}

/// Greedy evaluation action: the consensus of per-head argmaxes.
pub fn consensus_action(model: &Model, obs: &Observation) -> Result<usize> {
    let z = model.latent(obs)?;
    let per_head = model.network.evaluate(&obs.input(&z))?;
    let q = agent::combine(&per_head, &model.weights);
    let choices: Vec<usize> = per_head.iter().map(|h| argmax(h)).collect();
    consensus(&choices, &model.weights, &q)
}

/// Events the trainer exposes for auditing its schedule.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    /// `(global step, replay size)` at each batch update.
    pub updates: Vec<(usize, usize)>,
    /// Global steps at which the target network was replaced.
    pub target_syncs: Vec<usize>,
    pub encoder_updates: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub records: Vec<EpisodeRecord>,
    pub stats: TrainStats,
}

/// Which network the trainer builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// Context tokens, graph, latent and entity features; five heads.
    Cama,
    /// Entity features only; one head on the coordinated reward.
    Dqn,
}

impl Learner {
    pub fn uses_graph(self) -> bool {
        matches!(self, Learner::Cama)
    }
}

/// Initial network for `learner` on states shaped like `state`.
pub fn initial_network(learner: Learner, cfg: &TrainerConfig, n_templates: usize, state: &crate::environment::ContextState) -> QNetConfig {
    let entity = state.n_base() + state.n_spatial();
    match learner {
        Learner::Cama => cfg.network.cama(n_templates, entity),
        Learner::Dqn => cfg.network.dqn(n_templates, entity),
    }
}

/// The adaptation-factor parameters shared by every algorithm trained or
/// evaluated under `cfg`, drawn from their own seed stream.
pub fn adaptation_params(state_dim: usize, cfg: &TrainerConfig) -> AdaptationParams {
    AdaptationParams::init(state_dim, cfg.t_max as f64, &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 5)))
}

/// Trains `learner` on the charging simulator.
pub fn train(scenario: &ScenarioConfig, cfg: &TrainerConfig, learner: Learner) -> Result<TrainOutput> {
    train_with(scenario, cfg, learner, &mut |_, _| Ok(()))
}

/// [`train`] with a per-episode callback receiving the record and a model snapshot.
pub fn train_with(
    scenario: &ScenarioConfig,
    cfg: &TrainerConfig,
    learner: Learner,
    on_episode: &mut dyn FnMut(&EpisodeRecord, &dyn Fn() -> Model) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut env = ChargingEnv::new(scenario, learner.uses_graph(), TRAIN_STREAM)?;
    let probe = env.reset(0)?;
    let net = initial_network(learner, cfg, env.n_templates(), &probe.state);
    train_env(&mut env, net, cfg, on_episode)
}

/// The full loop over any [`Environment`].
pub fn train_env<E: Environment>(
    env: &mut E,
    net: QNetConfig,
    cfg: &TrainerConfig,
    on_episode: &mut dyn FnMut(&EpisodeRecord, &dyn Fn() -> Model) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if net.n_templates != env.n_templates() {
        return Err(crate::error::config_err(
            "network.n_templates",
            format!("network scores {} templates, environment offers {}", net.n_templates, env.n_templates()),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut act_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let mut encoder_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 4));
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, mix_seed(cfg.seed, 3))?;

    let probe = env.reset(0)?;
    let dim = probe.state.dim();
    let mut online = QNetParams::init(net, &mut init_rng)?;
    let mut target = online.clone();
    let mut encoder = (online.config.latent_width > 0)
        .then(|| ContextEncoder::init(dim, cfg.network.encoder_hidden, online.config.latent_width, &mut init_rng));
    let adaptation = adaptation_params(dim, cfg);
    let mut q_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.lr_encoder);
    let mut w = StakeholderWeights::initial();
    let explore = cfg.exploration();
    explore.validate()?;
    let update = cfg.update_params();

    let mut records = Vec::with_capacity(cfg.episodes);
    let mut stats = TrainStats::default();
    let mut global = 0usize;
    for episode in 0..cfg.episodes {
        let mut obs = Arc::new(env.reset(episode)?);
        let hw = head_weights(online.n_heads(), &w)?;
        let mut totals = [0.0; N_STAKEHOLDERS];
        let (mut total, mut eps_sum, mut loss_sum, mut n_loss, mut feasible, mut steps) = (0.0, 0.0, 0.0, 0usize, 0usize, 0usize);
        for t in 0..cfg.t_max {
            let z = latent_for(&obs, encoder.as_ref(), online.config.latent_width)?;
            let eps = epsilon_ctx(episode, obs.state.complexity, &explore);
            let (a, _) = agent::select_action(&obs.input(&z), &online, &hw, eps, &mut act_rng)?;
            let alpha = adaptation_factor(&obs.state, t, &adaptation)?;
            let step = env.step(a, alpha)?;
            let next = Arc::new(step.next);
            let tr = Transition::new(Arc::clone(&obs), a, step.rewards, &w, Arc::clone(&next), step.done);
            total += tr.r_coord;
            for (acc, r) in totals.iter_mut().zip(&step.rewards) {
                *acc += r;
            }
            if step.outcome.as_ref().is_some_and(StepOutcome::is_feasible) {
                feasible += 1;
            }
            eps_sum += eps;
            steps += 1;
            replay.push(tr);
            global += 1;

            if replay.len() >= cfg.b_min && global % cfg.update_every == 0 {
                let batch = replay.sample(cfg.batch_size)?;
                let loss = batch_update(&batch, &mut online, &target, encoder.as_ref(), &hw, &update, &mut q_opt)?;
                loss_sum += loss;
                n_loss += 1;
                stats.updates.push((global, replay.len()));
            }
            if global % cfg.target_sync == 0 {
                target = online.clone();
                stats.target_syncs.push(global);
            }
            if let Some(enc) = encoder.as_mut() {
                let k = cfg.encoder_batch.min(replay.len());
                let idx = rand::seq::index::sample(&mut encoder_rng, replay.len(), k).into_vec();
                let batch: Vec<Vec<f64>> = idx
                    .into_iter()
                    .filter_map(|i| replay.get(i).map(|tr| tr.state.state.to_vector()))
                    .collect();
                encoder_update(&batch, enc, &mut enc_opt)?;
                stats.encoder_updates += 1;
            }
            obs = next;
            if step.done {
                break;
            }
        }
        let mut perf = [0.0; N_STAKEHOLDERS];
        for (p, tot) in perf.iter_mut().zip(&totals) {
            *p = (tot / steps.max(1) as f64).tanh();
        }
        w = floor_weights(&adapt_weights(&w, &perf, cfg.eta)?, cfg.weight_floor)?;
        let record = EpisodeRecord {
            episode,
            total_reward: total,
            stakeholder_totals: totals,
            steps,
            epsilon_mean: eps_sum / steps.max(1) as f64,
            loss_mean: (n_loss > 0).then(|| loss_sum / n_loss as f64),
            weights: w.as_array(),
            feasible_steps: feasible,
        };
        let snapshot = || Model {
            network: online.clone(),
            encoder: encoder.clone(),
            adaptation: adaptation.clone(),
            weights: head_weights(online.n_heads(), &w).unwrap_or_else(|_| vec![1.0]),
        };
        on_episode(&record, &snapshot)?;
        records.push(record);
    }
    let model = Model {
        weights: head_weights(online.n_heads(), &w)?,
        network: online,
        encoder,
        adaptation,
    };
    Ok(TrainOutput { model, records, stats })
}

/// Greedy rollouts of a frozen policy; `policy` maps an observation to a template.
pub fn rollout<E: Environment>(
    env: &mut E,
    episodes: std::ops::Range<usize>,
    t_max: usize,
    adaptation: &AdaptationParams,
    policy: &mut dyn FnMut(&Observation) -> Result<usize>,
) -> Result<Vec<(EpisodeRecord, Vec<StepOutcome>)>> {
    rollout_with(env, episodes, t_max, adaptation, policy, &mut |_, _, _| Ok(()))
}

/// [`rollout`] for policies that learn online: `feedback` sees each
/// `(observation, template, rewards)` right after the step.
pub fn rollout_with<E: Environment>(
    env: &mut E,
    episodes: std::ops::Range<usize>,
    t_max: usize,
    adaptation: &AdaptationParams,
    policy: &mut dyn FnMut(&Observation) -> Result<usize>,
    feedback: &mut dyn FnMut(&Observation, usize, &[f64; N_STAKEHOLDERS]) -> Result<()>,
) -> Result<Vec<(EpisodeRecord, Vec<StepOutcome>)>> {
    let w = StakeholderWeights::initial();
    let mut out = Vec::with_capacity(episodes.len());
    for episode in episodes {
        let mut obs = env.reset(episode)?;
        let mut totals = [0.0; N_STAKEHOLDERS];
        let (mut total, mut feasible, mut steps) = (0.0, 0usize, 0usize);
        let mut outcomes = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let a = policy(&obs)?;
            let alpha = adaptation_factor(&obs.state, t, adaptation)?;
            let step = env.step(a, alpha)?;
            feedback(&obs, a, &step.rewards)?;
            total += total_reward(&step.rewards, &w);
            for (acc, r) in totals.iter_mut().zip(&step.rewards) {
                *acc += r;
            }
            if let Some(o) = step.outcome {
                feasible += usize::from(o.is_feasible());
                outcomes.push(o);
            }
            steps += 1;
            obs = step.next;
            if step.done {
                break;
            }
        }
        let record = EpisodeRecord {
            episode,
            total_reward: total,
            stakeholder_totals: totals,
            steps,
            epsilon_mean: 0.0,
            loss_mean: None,
            weights: w.as_array(),
            feasible_steps: feasible,
        };
        out.push((record, outcomes));
    }
    Ok(out)
}
