//! Discrete-time simulator of vehicles, charging stations, transformers and
//! the exogenous conditions around them.
//!
//! A [`World`] owns one episode. [`World::reset`] draws the episode's vehicle
//! population and pre-generates every exogenous series for the horizon;
//! [`World::step`] applies a [`JointAction`], moves energy, and reports a
//! [`StepOutcome`] from which the stakeholder rewards are computed.

pub mod config;
pub mod reward;
pub mod series;
pub mod state;
pub mod templates;
pub mod transactions;

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;
pub use config::{largest_remainder, ScenarioConfig, Violation};
pub use reward::{
    stakeholder_reward, total_reward, RewardComponents, RewardParams, Stakeholder, StakeholderWeights, N_STAKEHOLDERS,
};
use series::{hour_of_day, is_peak, is_weekend, Exogenous};
pub use state::{context_complexity, ContextState, RawContext, SignalWindow, N_CONTEXT_FEATURES};
use state::{normalize_context, EV_FEATURES, STATION_FEATURES};
pub use templates::{CoordinationMode, StationChoice, TemplateCatalog, TemplateSpec};

/// Lowest state of charge a trip may leave behind.
const TRIP_RESERVE_SOC: f64 = 0.02;
/// Vehicles below this state of charge count as stranded.
pub const LOW_SOC: f64 = 0.05;
/// Fleet vehicles below this state of charge reposition instead of serving tasks.
const FLEET_TASK_SOC: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Passenger,
    Suv,
    Commercial,
}

impl VehicleClass {
    fn max_power_kw(self) -> f64 {
        match self {
            VehicleClass::Passenger => 150.0,
            VehicleClass::Suv => 200.0,
            VehicleClass::Commercial => 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargerTier {
    Level2,
    DcFast,
    HighPower,
}

impl ChargerTier {
    /// Inclusive per-port power bounds, kW.
    pub fn power_bounds(self) -> (f64, f64) {
        match self {
            ChargerTier::Level2 => (7.0, 11.0),
            ChargerTier::DcFast => (50.0, 150.0),
            ChargerTier::HighPower => (150.0, 350.0),
        }
    }

    fn markup(self) -> f64 {
        match self {
            ChargerTier::Level2 => 1.1,
            ChargerTier::DcFast => 1.35,
            ChargerTier::HighPower => 1.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceTier {
    Low,
    Mid,
    High,
}

impl PriceTier {
    pub fn multiplier(self) -> f64 {
        match self {
            PriceTier::Low => 0.85,
            PriceTier::Mid => 1.0,
            PriceTier::High => 1.2,
        }
    }

    /// Position on a 0..1 scale, matched against port utilisation.
    pub fn level(self) -> f64 {
        match self {
            PriceTier::Low => 0.0,
            PriceTier::Mid => 0.5,
            PriceTier::High => 1.0,
        }
    }
}

/// Transformer power cap for EV charging, as a fraction of capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridCap {
    Cap60,
    Cap80,
    Cap100,
}

impl GridCap {
    pub fn fraction(self) -> f64 {
        match self {
            GridCap::Cap60 => 0.6,
            GridCap::Cap80 => 0.8,
            GridCap::Cap100 => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvAction {
    /// Leave any port or queue; draw nothing.
    Stay,
    ChargeAt(usize),
    /// Keep the current port or queue slot without drawing power.
    Defer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetAction {
    ServeTask,
    Reposition,
    Charge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenewableDispatch {
    Curtail,
    Neutral,
    Prioritize,
}

/// One action per stakeholder agent type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAction {
    /// One entry per vehicle; ignored for commercial vehicles, which follow `fleet`.
    pub ev: Vec<EvAction>,
    /// One entry per transformer.
    pub grid: Vec<GridCap>,
    /// One entry per station.
    pub station: Vec<PriceTier>,
    /// One entry per commercial vehicle, in [`World::commercial_ids`] order.
    pub fleet: Vec<FleetAction>,
    pub env: RenewableDispatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvState {
    pub id: usize,
    pub soc: f64,
    pub battery_kwh: f64,
    pub max_power_kw: f64,
    /// km
    pub location: [f64; 2],
    pub required_soc: f64,
    pub deadline: usize,
    pub class: VehicleClass,
    pub plugged: Option<usize>,
    pub queued: Option<usize>,
    /// Away on a trip until this step.
    pub driving_until: Option<usize>,
}

impl EvState {
    pub fn is_parked(&self) -> bool {
        self.driving_until.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationState {
    pub id: usize,
    pub location: [f64; 2],
    pub tier: ChargerTier,
    pub max_power_kw: f64,
    pub n_ports: usize,
    pub occupied_ports: usize,
    pub price_per_kwh: f64,
    pub price_tier: PriceTier,
    pub transformer_id: usize,
    /// FIFO of waiting vehicle ids.
    pub queue: VecDeque<usize>,
}

impl StationState {
    pub fn free_ports(&self) -> usize {
        self.n_ports - self.occupied_ports
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    /// EV charging load per transformer, kW.
    pub ev_load_kw: Vec<f64>,
    /// Uncontrolled load per transformer, kW.
    pub base_load_kw: Vec<f64>,
    pub capacity_kw: f64,
    pub cap: Vec<GridCap>,
    pub voltage_pu: Vec<f64>,
    pub frequency_deviation_hz: f64,
    /// Share of total load served by renewables at the last step.
    pub renewable_share: f64,
}

impl GridState {
    pub fn loading(&self, k: usize) -> f64 {
        (self.ev_load_kw[k] + self.base_load_kw[k]) / self.capacity_kw
    }

    pub fn mean_loading(&self) -> f64 {
        let n = self.ev_load_kw.len().max(1) as f64;
        (0..self.ev_load_kw.len()).map(|k| self.loading(k)).sum::<f64>() / n
    }

    pub fn min_voltage(&self) -> f64 {
        self.voltage_pu.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Everything measured during one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: usize,
    pub n_evs: usize,
    pub n_commercial: usize,
    pub n_stations: usize,
    /// Grid-side energy per station, kWh.
    pub metered_kwh_per_station: Vec<f64>,
    /// Battery-side energy per vehicle, kWh.
    pub delivered_kwh_per_ev: Vec<f64>,
    /// Energy drawn from batteries by trips and fleet tasks, kWh.
    pub consumed_kwh_per_ev: Vec<f64>,
    pub metered_kwh: f64,
    pub delivered_kwh: f64,
    pub consumed_kwh: f64,
    pub ev_energy_cost: f64,
    pub commercial_energy_cost: f64,
    pub revenue: f64,
    pub waiting_evs: usize,
    pub deadline_misses: usize,
    pub commercial_misses: usize,
    pub commercial_low_soc: usize,
    pub tasks_served: usize,
    pub congestion: f64,
    pub loadings: Vec<f64>,
    pub overload_ratios: Vec<f64>,
    pub voltage_deviation_sum: f64,
    pub ev_load_kw: f64,
    pub ev_cap_kw: Vec<f64>,
    pub ev_load_per_transformer_kw: Vec<f64>,
    pub total_capacity_kw: f64,
    pub total_load_kw: f64,
    pub idle_ports: usize,
    pub total_ports: usize,
    pub max_occupancy_ratio: f64,
    pub pricing_match: f64,
    pub queue_overflow: usize,
    pub price_cap_violations: usize,
    pub ev_renewable_kwh: f64,
    pub available_renewable_kwh: f64,
    pub curtailed_kwh: f64,
    pub peak: bool,
    pub min_soc: f64,
}

impl StepOutcome {
    /// No queue overflow, no overloaded transformer, nobody stranded, no missed deadline.
    pub fn is_feasible(&self) -> bool {
        self.queue_overflow == 0
            && self.overload_ratios.iter().all(|r| *r <= 0.0)
            && self.min_soc >= LOW_SOC
            && self.deadline_misses == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next: ContextState,
    pub outcome: StepOutcome,
    pub components: RewardComponents,
    pub rewards: [f64; N_STAKEHOLDERS],
    pub done: bool,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Intent {
    Idle,
    Leave,
    Keep,
    Charge(usize),
    Task,
    Reposition,
}

#[derive(Debug, Clone)]
pub struct World {
    cfg: ScenarioConfig,
    reward_params: RewardParams,
    evs: Vec<EvState>,
    stations: Vec<StationState>,
    grid: GridState,
    series: Exogenous,
    window: SignalWindow,
    commercial: Vec<usize>,
    rng: ChaCha8Rng,
    t: usize,
    episode_seed: u64,
}

/// Builds a world from `config` and resets it with `config.seed`.
pub fn reset(config: &ScenarioConfig) -> Result<(World, ContextState)> {
    let mut world = World::new(config.clone())?;
    let state = world.reset(config.seed);
    Ok((world, state))
}

impl World {
    /// Station layout, tiers and the vehicle fleet are fixed by `cfg.seed`;
    /// episode dynamics come from the seed passed to [`World::reset`].
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x70_70));

        let tier_counts = largest_remainder(cfg.n_stations, &cfg.tier_mix.as_array());
        let mut tiers: Vec<ChargerTier> = [ChargerTier::Level2, ChargerTier::DcFast, ChargerTier::HighPower]
            .iter()
            .zip(&tier_counts)
            .flat_map(|(t, n)| std::iter::repeat_n(*t, *n))
            .collect();
        tiers.shuffle(&mut rng);

        let side = (cfg.n_stations as f64).sqrt().ceil() as usize;
        let cell = cfg.area_km / side as f64;
        let stations = tiers
            .iter()
            .enumerate()
            .map(|(id, &tier)| {
                let (gx, gy) = (id % side, id / side);
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.3..=0.3) * cell;
                let location = [
                    ((gx as f64 + 0.5) * cell + jitter(&mut rng)).clamp(0.0, cfg.area_km),
                    ((gy as f64 + 0.5) * cell + jitter(&mut rng)).clamp(0.0, cfg.area_km),
                ];
                let (lo, hi) = tier.power_bounds();
                StationState {
                    id,
                    location,
                    tier,
                    max_power_kw: rng.random_range(lo..=hi),
                    n_ports: cfg.ports_per_station,
                    occupied_ports: 0,
                    price_per_kwh: 0.0,
                    price_tier: PriceTier::Mid,
                    transformer_id: id % cfg.n_transformers,
                    queue: VecDeque::new(),
                }
            })
            .collect();

        let class_counts = largest_remainder(cfg.n_evs, &cfg.fleet_mix.as_array());
        let mut classes: Vec<VehicleClass> = [VehicleClass::Passenger, VehicleClass::Suv, VehicleClass::Commercial]
            .iter()
            .zip(&class_counts)
            .flat_map(|(c, n)| std::iter::repeat_n(*c, *n))
            .collect();
        classes.shuffle(&mut rng);
        let evs: Vec<EvState> = classes
            .iter()
            .enumerate()
            .map(|(id, &class)| EvState {
                id,
                soc: 0.5,
                battery_kwh: rng.random_range(cfg.battery_kwh[0]..=cfg.battery_kwh[1]),
                max_power_kw: class.max_power_kw(),
                location: [0.0, 0.0],
                required_soc: 0.0,
                deadline: cfg.horizon,
                class,
                plugged: None,
                queued: None,
                driving_until: None,
            })
            .collect();
        let commercial = evs
            .iter()
            .filter(|e| e.class == VehicleClass::Commercial)
            .map(|e| e.id)
            .collect();

        let n_tx = cfg.n_transformers;
        let grid = GridState {
            ev_load_kw: vec![0.0; n_tx],
            base_load_kw: vec![0.0; n_tx],
            capacity_kw: cfg.transformer_capacity_kw,
            cap: vec![GridCap::Cap100; n_tx],
            voltage_pu: vec![1.0; n_tx],
            frequency_deviation_hz: 0.0,
            renewable_share: 0.0,
        };
        let seed = cfg.seed;
        let mut world = Self {
            series: Exogenous::generate(&cfg, 1, &mut rng),
            cfg,
            reward_params: RewardParams::default(),
            evs,
            stations,
            grid,
            window: SignalWindow::default(),
            commercial,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            episode_seed: seed,
        };
        world.reset(seed);
        Ok(world)
    }

    pub fn with_reward_params(mut self, params: RewardParams) -> Result<Self> {
        params.validate()?;
        self.reward_params = params;
        Ok(self)
    }

    pub fn reward_params(&self) -> &RewardParams {
        &self.reward_params
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn evs(&self) -> &[EvState] {
        &self.evs
    }

    pub fn stations(&self) -> &[StationState] {
        &self.stations
    }

    pub fn grid(&self) -> &GridState {
        &self.grid
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.cfg.horizon
    }

    pub fn commercial_ids(&self) -> &[usize] {
        &self.commercial
    }

    pub fn transformer_count(&self) -> usize {
        self.cfg.n_transformers
    }

    fn lookahead(&self) -> usize {
        self.cfg.steps_per_hour().round().max(1.0) as usize
    }

    /// Starts a new episode. Vehicle state and exogenous series are drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> ContextState {
        self.episode_seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe5_0de));
        let len = self.cfg.horizon + self.lookahead() + 2;
        self.series = Exogenous::generate(&self.cfg, len, &mut self.rng);
        self.t = 0;
        self.window = SignalWindow::default();

        let d = self.cfg.demand;
        let area = self.cfg.area_km;
        let horizon = self.cfg.horizon;
        for ev in &mut self.evs {
            ev.soc = self.rng.random_range(d.initial_soc[0]..=d.initial_soc[1]);
            ev.required_soc = self.rng.random_range(d.required_soc[0]..=d.required_soc[1]);
            ev.deadline = self.rng.random_range(d.dwell_steps[0]..=d.dwell_steps[1]).min(horizon);
            ev.location = [self.rng.random_range(0.0..=area), self.rng.random_range(0.0..=area)];
            ev.plugged = None;
            ev.queued = None;
            ev.driving_until = None;
        }
        for st in &mut self.stations {
            st.occupied_ports = 0;
            st.queue.clear();
            st.price_tier = PriceTier::Mid;
        }
        self.refresh_prices();

        let n_tx = self.cfg.n_transformers;
        self.grid.cap = vec![GridCap::Cap100; n_tx];
        self.grid.ev_load_kw = vec![0.0; n_tx];
        self.grid.base_load_kw = (0..n_tx)
            .map(|k| self.series.base_load_fraction[k][0] * self.cfg.transformer_capacity_kw)
            .collect();
        let renewable = self.series.solar_kw[0] + self.series.wind_kw[0];
        let mut share_num = 0.0;
        let mut share_den = 0.0;
        for k in 0..n_tx {
            let load = self.grid.base_load_kw[k];
            let used = renewable.min(load);
            share_num += used;
            share_den += load;
            self.grid.voltage_pu[k] = voltage(load / self.cfg.transformer_capacity_kw, used, self.cfg.transformer_capacity_kw);
        }
        self.grid.renewable_share = if share_den > 0.0 { share_num / share_den } else { 0.0 };
        self.grid.frequency_deviation_hz = frequency(self.grid.mean_loading(), self.series.frequency_noise_hz[0]);
        self.push_window();
        self.state()
    }

    fn refresh_prices(&mut self) {
        let tariff = self.series.tariff[self.t.min(self.series.len() - 1)];
        for st in &mut self.stations {
            st.price_per_kwh = tariff * st.tier.markup() * st.price_tier.multiplier();
        }
    }

    fn push_window(&mut self) {
        let t = self.t;
        self.window.push(
            self.series.temperature_c[t],
            self.series.congestion[t],
            self.grid.mean_loading(),
            self.series.tariff[t],
        );
    }

    /// Physical context quantities at the current step.
    pub fn raw_context(&self) -> RawContext {
        let t = self.t;
        let s = &self.series;
        let next = (t + self.lookahead()).min(s.len() - 1);
        let base_frac =
            s.base_load_fraction.iter().map(|b| b[t]).sum::<f64>() / s.base_load_fraction.len().max(1) as f64;
        RawContext {
            temperature_c: s.temperature_c[t],
            irradiance_wm2: s.irradiance_wm2[t],
            precipitation: s.precipitation[t],
            wind_ms: s.wind_ms[t],
            congestion: s.congestion[t],
            travel_time_factor: s.travel_time_factor[t],
            incident: s.incident[t],
            tariff: s.tariff[t],
            next_hour_tariff: s.tariff[next],
            demand_response: is_peak(&self.cfg, t) && base_frac > 0.65,
            mean_loading: self.grid.mean_loading(),
            min_voltage_pu: self.grid.min_voltage(),
            frequency_deviation_hz: self.grid.frequency_deviation_hz,
            peak: is_peak(&self.cfg, t),
            solar_forecast_kw: s.solar_kw[(t + 1).min(s.len() - 1)],
            wind_forecast_kw: s.wind_kw[(t + 1).min(s.len() - 1)],
            renewable_share: self.grid.renewable_share,
            hour: hour_of_day(&self.cfg, t),
            weekend: is_weekend(&self.cfg, t),
        }
    }

    /// Assembles the six observation blocks for the current step.
    pub fn state(&self) -> ContextState {
        let cfg = &self.cfg;
        let t = self.t;
        let mut base = Vec::with_capacity(self.evs.len() * EV_FEATURES);
        for ev in &self.evs {
            let to_deadline = ev.deadline.saturating_sub(t) as f64 / cfg.horizon as f64;
            base.extend_from_slice(&[
                ev.soc,
                ev.required_soc,
                to_deadline.clamp(0.0, 1.0),
                (ev.location[0] / cfg.area_km).clamp(0.0, 1.0),
                (ev.location[1] / cfg.area_km).clamp(0.0, 1.0),
                if ev.plugged.is_some() { 1.0 } else { 0.0 },
                if ev.queued.is_some() { 1.0 } else { 0.0 },
                if ev.is_parked() { 1.0 } else { 0.0 },
            ]);
        }
        let diag = cfg.area_km * std::f64::consts::SQRT_2;
        let parked: Vec<&EvState> = self.evs.iter().filter(|e| e.is_parked()).collect();
        let mut spatial = Vec::with_capacity(self.stations.len() * STATION_FEATURES);
        for st in &self.stations {
            let mean_dist = if parked.is_empty() {
                0.0
            } else {
                parked.iter().map(|e| distance(e.location, st.location)).sum::<f64>() / parked.len() as f64
            };
            let queue_scale = cfg.demand.queue_limit.max(1) as f64;
            spatial.extend_from_slice(&[
                st.free_ports() as f64 / st.n_ports as f64,
                (st.price_per_kwh / cfg.pricing.price_cap).clamp(0.0, 1.0),
                (st.queue.len() as f64 / queue_scale).clamp(0.0, 1.0),
                (st.max_power_kw / 350.0).clamp(0.0, 1.0),
                (mean_dist / diag).clamp(0.0, 1.0),
            ]);
        }
        let f = normalize_context(&self.raw_context(), cfg);
        let mut s = ContextState {
            base,
            temporal: Vec::new(),
            spatial,
            grid: Vec::new(),
            weather: Vec::new(),
            traffic: Vec::new(),
            t,
            complexity: context_complexity(&self.window, &cfg.complexity),
        };
        s.set_context_features(&f);
        s
    }

    /// Every vehicle stays put; full grid caps, mid prices, neutral dispatch.
    pub fn idle_action(&self) -> JointAction {
        JointAction {
            ev: vec![EvAction::Stay; self.evs.len()],
            grid: vec![GridCap::Cap100; self.cfg.n_transformers],
            station: vec![PriceTier::Mid; self.stations.len()],
            fleet: vec![FleetAction::Reposition; self.commercial.len()],
            env: RenewableDispatch::Neutral,
        }
    }

    pub fn validate_action(&self, a: &JointAction) -> Result<()> {
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Action(format!("{name} has {got} entries, expected {want}")))
            }
        };
        check("ev", a.ev.len(), self.evs.len())?;
        check("grid", a.grid.len(), self.cfg.n_transformers)?;
        check("station", a.station.len(), self.stations.len())?;
        check("fleet", a.fleet.len(), self.commercial.len())?;
        for (i, act) in a.ev.iter().enumerate() {
            if let EvAction::ChargeAt(s) = act {
                if *s >= self.stations.len() {
                    return Err(Error::Action(format!("vehicle {i} targets unknown station {s}")));
                }
            }
        }
        Ok(())
    }

    fn nearest_station(&self, from: [f64; 2]) -> usize {
        self.stations
            .iter()
            .min_by(|a, b| {
                distance(from, a.location)
                    .partial_cmp(&distance(from, b.location))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|s| s.id)
            .unwrap_or(0)
    }

    fn unplug(&mut self, i: usize) {
        if let Some(s) = self.evs[i].plugged.take() {
            self.stations[s].occupied_ports -= 1;
        }
        if let Some(s) = self.evs[i].queued.take() {
            self.stations[s].queue.retain(|&id| id != i);
        }
    }

    fn request_port(&mut self, i: usize, s: usize) {
        if self.stations[s].free_ports() > 0 {
            self.stations[s].occupied_ports += 1;
            self.evs[i].plugged = Some(s);
        } else {
            self.stations[s].queue.push_back(i);
            self.evs[i].queued = Some(s);
        }
    }

    fn temperature_derate(&self) -> f64 {
        let temp = self.series.temperature_c[self.t];
        if temp >= 0.0 {
            1.0
        } else {
            (1.0 + 0.04 * temp).max(0.6)
        }
    }

    /// Applies `action` at the current step.
    ///
    /// `alpha` is the contextual adaptation factor used to scale the bonus
    /// terms of the returned rewards.
    pub fn step(&mut self, action: &JointAction, alpha: f64) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::State("step called after the episode finished".into()));
        }
        self.validate_action(action)?;
        let cfg = self.cfg.clone();
        let t = self.t;
        let n = self.evs.len();
        let dt = cfg.step_hours();
        let eta = cfg.charge_efficiency;

        for (st, tier) in self.stations.iter_mut().zip(&action.station) {
            st.price_tier = *tier;
        }
        self.refresh_prices();
        self.grid.cap = action.grid.clone();

        // resolve intents; commercial vehicles follow the fleet agent
        let mut intents = vec![Intent::Idle; n];
        for (k, &i) in self.commercial.iter().enumerate() {
            intents[i] = match action.fleet[k] {
                FleetAction::ServeTask => Intent::Task,
                FleetAction::Reposition => Intent::Reposition,
                FleetAction::Charge => match action.ev[i] {
                    EvAction::ChargeAt(s) => Intent::Charge(s),
                    _ => Intent::Charge(self.nearest_station(self.evs[i].location)),
                },
            };
        }
        for i in 0..n {
            if self.evs[i].class != VehicleClass::Commercial {
                intents[i] = match action.ev[i] {
                    EvAction::Stay => Intent::Leave,
                    EvAction::Defer => Intent::Keep,
                    EvAction::ChargeAt(s) => Intent::Charge(s),
                };
            }
            if !self.evs[i].is_parked() {
                intents[i] = Intent::Idle;
            }
        }

        // leave ports and queues first so freed ports go to the queue heads
        for i in 0..n {
            let ev = &self.evs[i];
            let here = ev.plugged.or(ev.queued);
            let leaving = match intents[i] {
                Intent::Leave | Intent::Task | Intent::Reposition => true,
                Intent::Charge(s) => here.is_some_and(|h| h != s),
                Intent::Idle | Intent::Keep => false,
            };
            if leaving {
                self.unplug(i);
            }
        }
        for s in 0..self.stations.len() {
            while self.stations[s].free_ports() > 0 {
                let Some(i) = self.stations[s].queue.pop_front() else { break };
                self.stations[s].occupied_ports += 1;
                self.evs[i].queued = None;
                self.evs[i].plugged = Some(s);
            }
        }
        for i in 0..n {
            if let Intent::Charge(s) = intents[i] {
                if self.evs[i].plugged.is_none() && self.evs[i].queued.is_none() {
                    self.request_port(i, s);
                }
            }
        }

        // power allocation under station, vehicle, thermal and transformer limits
        let derate = self.temperature_derate();
        let mut power = vec![0.0; n];
        for i in 0..n {
            if let (Intent::Charge(s), Some(p)) = (intents[i], self.evs[i].plugged) {
                debug_assert_eq!(s, p);
                let ev = &self.evs[i];
                let st = &self.stations[p];
                let limit = st.max_power_kw.min(ev.max_power_kw) * derate;
                let to_full = (1.0 - ev.soc).max(0.0) * ev.battery_kwh / (dt * eta);
                power[i] = limit.min(to_full);
            }
        }
        let n_tx = cfg.n_transformers;
        let mut ev_load = vec![0.0; n_tx];
        for i in 0..n {
            if let Some(p) = self.evs[i].plugged {
                ev_load[self.stations[p].transformer_id] += power[i];
            }
        }
        let ev_cap: Vec<f64> = action
            .grid
            .iter()
            .map(|c| c.fraction() * cfg.transformer_capacity_kw)
            .collect();
        for k in 0..n_tx {
            if ev_load[k] > ev_cap[k] {
                let scale = ev_cap[k] / ev_load[k];
                for i in 0..n {
                    if let Some(p) = self.evs[i].plugged {
                        if self.stations[p].transformer_id == k {
                            power[i] *= scale;
                        }
                    }
                }
                ev_load[k] = 0.0;
                for i in 0..n {
                    if let Some(p) = self.evs[i].plugged {
                        if self.stations[p].transformer_id == k {
                            ev_load[k] += power[i];
                        }
                    }
                }
            }
        }

        let mut out = StepOutcome {
            t,
            n_evs: n,
            n_commercial: self.commercial.len(),
            n_stations: self.stations.len(),
            metered_kwh_per_station: vec![0.0; self.stations.len()],
            delivered_kwh_per_ev: vec![0.0; n],
            consumed_kwh_per_ev: vec![0.0; n],
            congestion: self.series.congestion[t],
            peak: is_peak(&cfg, t),
            ..Default::default()
        };

        for i in 0..n {
            if power[i] <= 0.0 {
                continue;
            }
            let p = self.evs[i].plugged.expect("powered vehicles are plugged");
            let metered = power[i] * dt;
            let delivered = metered * eta;
            let ev = &mut self.evs[i];
            ev.soc = (ev.soc + delivered / ev.battery_kwh).min(1.0);
            let price = self.stations[p].price_per_kwh;
            out.metered_kwh_per_station[p] += metered;
            out.delivered_kwh_per_ev[i] = delivered;
            out.ev_energy_cost += price * metered;
            if ev.class == VehicleClass::Commercial {
                out.commercial_energy_cost += price * metered;
            }
        }
        out.metered_kwh = out.metered_kwh_per_station.iter().sum();
        out.delivered_kwh = out.delivered_kwh_per_ev.iter().sum();
        out.revenue = out.ev_energy_cost;

        // fleet tasks and repositioning
        for i in 0..n {
            match intents[i] {
                Intent::Task => {
                    let ev = &mut self.evs[i];
                    let task = cfg.demand.task_kwh;
                    if ev.soc * ev.battery_kwh - task >= FLEET_TASK_SOC * ev.battery_kwh {
                        ev.soc -= task / ev.battery_kwh;
                        out.consumed_kwh_per_ev[i] += task;
                        out.tasks_served += 1;
                    }
                }
                Intent::Reposition => {
                    let target = self.stations[self.nearest_station(self.evs[i].location)].location;
                    let ev = &mut self.evs[i];
                    ev.location = [(ev.location[0] + target[0]) / 2.0, (ev.location[1] + target[1]) / 2.0];
                }
                _ => {}
            }
        }

        // grid and renewables
        let renewable_kw = self.series.solar_kw[t] + self.series.wind_kw[t];
        let mut used_total = 0.0;
        let mut load_total = 0.0;
        out.loadings = vec![0.0; n_tx];
        out.overload_ratios = vec![0.0; n_tx];
        for k in 0..n_tx {
            let base = self.series.base_load_fraction[k][t] * cfg.transformer_capacity_kw;
            let total = base + ev_load[k];
            let (usable, curtailed_kw) = match action.env {
                RenewableDispatch::Curtail => (0.5 * renewable_kw, 0.5 * renewable_kw),
                _ => (renewable_kw, 0.0),
            };
            let used = usable.min(total);
            let ev_renewable_kw = match action.env {
                RenewableDispatch::Prioritize => usable.min(ev_load[k]),
                _ if total > 0.0 => ev_load[k] * used / total,
                _ => 0.0,
            };
            out.ev_renewable_kwh += ev_renewable_kw * dt;
            out.available_renewable_kwh += renewable_kw * dt;
            out.curtailed_kwh += (curtailed_kw + usable - used) * dt;
            let loading = total / cfg.transformer_capacity_kw;
            out.loadings[k] = loading;
            out.overload_ratios[k] = (loading - 1.0).max(0.0);
            self.grid.base_load_kw[k] = base;
            self.grid.ev_load_kw[k] = ev_load[k];
            self.grid.voltage_pu[k] = voltage(loading, used, cfg.transformer_capacity_kw);
            out.voltage_deviation_sum += (self.grid.voltage_pu[k] - 1.0).abs();
            used_total += used;
            load_total += total;
        }
        self.grid.renewable_share = if load_total > 0.0 { used_total / load_total } else { 0.0 };
        self.grid.frequency_deviation_hz = frequency(self.grid.mean_loading(), self.series.frequency_noise_hz[t]);
        out.ev_load_kw = ev_load.iter().sum();
        out.ev_cap_kw = ev_cap;
        out.ev_load_per_transformer_kw = ev_load;
        out.total_capacity_kw = cfg.transformer_capacity_kw * n_tx as f64;
        out.total_load_kw = load_total;

        // stations
        let limit = cfg.demand.queue_limit;
        let mut match_sum = 0.0;
        for st in &self.stations {
            out.total_ports += st.n_ports;
            out.idle_ports += st.free_ports();
            out.waiting_evs += st.queue.len();
            out.queue_overflow += st.queue.len().saturating_sub(limit);
            out.max_occupancy_ratio = out.max_occupancy_ratio.max(st.occupied_ports as f64 / st.n_ports as f64);
            if st.price_per_kwh > cfg.pricing.price_cap {
                out.price_cap_violations += 1;
            }
            let util = st.occupied_ports as f64 / st.n_ports as f64;
            match_sum += 1.0 - (util - st.price_tier.level()).abs();
        }
        out.pricing_match = match_sum / self.stations.len() as f64;

        // deadlines, departures and returns at the end of the step
        let t_next = t + 1;
        let d = cfg.demand;
        for i in 0..n {
            if let Some(back) = self.evs[i].driving_until {
                if back <= t_next {
                    let ev = &mut self.evs[i];
                    ev.driving_until = None;
                    ev.location = [self.rng.random_range(0.0..=cfg.area_km), self.rng.random_range(0.0..=cfg.area_km)];
                    ev.required_soc = self.rng.random_range(d.required_soc[0]..=d.required_soc[1]);
                    ev.deadline = (t_next + self.rng.random_range(d.dwell_steps[0]..=d.dwell_steps[1])).min(cfg.horizon);
                }
                continue;
            }
            if self.evs[i].deadline <= t_next {
                if self.evs[i].soc + 1e-12 < self.evs[i].required_soc {
                    out.deadline_misses += 1;
                    if self.evs[i].class == VehicleClass::Commercial {
                        out.commercial_misses += 1;
                    }
                }
                if t_next < cfg.horizon {
                    self.unplug(i);
                    let frac = self.rng.random_range(d.trip_energy_fraction[0]..=d.trip_energy_fraction[1]);
                    let trip = self.rng.random_range(d.trip_steps[0]..=d.trip_steps[1]);
                    let ev = &mut self.evs[i];
                    let drawn = (frac * ev.battery_kwh).min((ev.soc - TRIP_RESERVE_SOC).max(0.0) * ev.battery_kwh);
                    ev.soc -= drawn / ev.battery_kwh;
                    out.consumed_kwh_per_ev[i] += drawn;
                    ev.driving_until = Some(t_next + trip);
                }
            }
        }
        out.consumed_kwh = out.consumed_kwh_per_ev.iter().sum();
        out.min_soc = self.evs.iter().map(|e| e.soc).fold(f64::INFINITY, f64::min);
        out.commercial_low_soc = self
            .commercial
            .iter()
            .filter(|&&i| self.evs[i].soc < LOW_SOC)
            .count();

        self.t = t_next;
        if !self.is_done() {
            self.refresh_prices();
        }
        self.push_window();
        let components = RewardComponents::from_outcome(&out, &self.reward_params.base);
        let rewards = components.rewards(alpha, &self.reward_params)?;
        Ok(StepResult {
            next: self.state(),
            outcome: out,
            components,
            rewards,
            done: self.is_done(),
        })
    }

    /// Expands a policy template into a concrete joint action for the current state.
    pub fn expand_template(&self, spec: &TemplateSpec) -> JointAction {
        let (tier, cap, env) = spec.mode.settings();
        let mut claimed = vec![0usize; self.stations.len()];
        let price = |s: &StationState| {
            self.series.tariff[self.t.min(self.series.len() - 1)] * s.tier.markup() * tier.multiplier()
        };
        let mut ev_actions = Vec::with_capacity(self.evs.len());
        for ev in &self.evs {
            let action = match (spec.threshold, ev.is_parked()) {
                (Some(threshold), true) => {
                    let target = threshold.max(ev.required_soc);
                    match ev.plugged.or(ev.queued) {
                        Some(s) if ev.soc < target => EvAction::ChargeAt(s),
                        Some(_) => EvAction::Stay,
                        None if ev.soc < threshold => {
                            let free = |s: &StationState| s.free_ports() > claimed[s.id];
                            let dist = |s: &StationState| distance(ev.location, s.location);
                            let key = |s: &StationState| match spec.station {
                                StationChoice::NearestFree => (!free(s), 0.0, dist(s)),
                                StationChoice::Cheapest => (!free(s), price(s), dist(s)),
                            };
                            let best = self
                                .stations
                                .iter()
                                .min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal))
                                .map(|s| s.id)
                                .unwrap_or(0);
                            claimed[best] += 1;
                            EvAction::ChargeAt(best)
                        }
                        None => EvAction::Stay,
                    }
                }
                _ => EvAction::Stay,
            };
            ev_actions.push(action);
        }
        let fleet = self
            .commercial
            .iter()
            .map(|&i| match ev_actions[i] {
                EvAction::ChargeAt(_) => FleetAction::Charge,
                _ if self.evs[i].soc >= FLEET_TASK_SOC => FleetAction::ServeTask,
                _ => FleetAction::Reposition,
            })
            .collect();
        JointAction {
            ev: ev_actions,
            grid: vec![cap; self.cfg.n_transformers],
            station: vec![tier; self.stations.len()],
            fleet,
            env,
        }
    }
}

fn voltage(loading: f64, renewable_used_kw: f64, capacity_kw: f64) -> f64 {
    (1.03 - 0.1 * loading + 0.04 * (renewable_used_kw / capacity_kw).min(1.0)).clamp(0.8, 1.1)
}

fn frequency(mean_loading: f64, noise: f64) -> f64 {
    (-0.15 * (mean_loading - 0.8) + noise).clamp(-0.5, 0.5)
}
