use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Fractions of stations per charger tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierMix {
    pub level2: f64,
    pub dc_fast: f64,
    pub high_power: f64,
}

impl TierMix {
    pub fn as_array(&self) -> [f64; 3] {
        [self.level2, self.dc_fast, self.high_power]
    }
}

/// Fractions of vehicles per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetMix {
    pub passenger: f64,
    pub suv: f64,
    pub commercial: f64,
}

impl FleetMix {
    pub fn as_array(&self) -> [f64; 3] {
        [self.passenger, self.suv, self.commercial]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingParams {
    /// Off-peak wholesale tariff, currency/kWh.
    pub base_tariff: f64,
    pub peak_tariff: f64,
    pub peak_start_hour: f64,
    pub peak_end_hour: f64,
    /// Stationary std-dev of the tariff noise, currency/kWh.
    pub volatility: f64,
    /// Upper bound of the tariff series; also its normalisation scale.
    pub max_tariff: f64,
    /// Retail prices above this are price-cap violations.
    pub price_cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewableParams {
    /// Solar output per transformer at 1000 W/m², kW.
    pub solar_peak_kw: f64,
    /// Wind output per transformer at the mean wind speed, kW.
    pub wind_mean_kw: f64,
    pub wind_mean_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherParams {
    pub temperature_volatility: f64,
    pub diurnal_amplitude_c: f64,
    pub precipitation_mean: f64,
    pub wind_volatility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficParams {
    pub congestion_volatility: f64,
    /// Per-step probability that an incident starts.
    pub incident_rate: f64,
    pub incident_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandParams {
    pub initial_soc: [f64; 2],
    pub required_soc: [f64; 2],
    /// Parked dwell time before the deadline, steps.
    pub dwell_steps: [usize; 2],
    pub trip_steps: [usize; 2],
    /// Trip energy as a fraction of battery capacity.
    pub trip_energy_fraction: [f64; 2],
    /// Energy consumed by one fleet task, kWh.
    pub task_kwh: f64,
    /// Queued vehicles per station beyond which the queue overflows.
    pub queue_limit: usize,
}

/// Normalising std-devs for the four context-complexity signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityScale {
    pub temperature: f64,
    pub congestion: f64,
    pub loading: f64,
    pub tariff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_evs: usize,
    pub n_stations: usize,
    pub n_transformers: usize,
    /// Episode length T_max in steps.
    pub horizon: usize,
    pub step_minutes: f64,
    pub tier_mix: TierMix,
    pub fleet_mix: FleetMix,
    pub battery_kwh: [f64; 2],
    pub temperature_c: [f64; 2],
    pub ports_per_station: usize,
    /// Side of the square service area, km.
    pub area_km: f64,
    pub transformer_capacity_kw: f64,
    /// Peak uncontrolled (non-EV) load as a fraction of transformer capacity.
    pub base_load_peak_fraction: f64,
    pub base_load_volatility: f64,
    pub charge_efficiency: f64,
    pub pricing: PricingParams,
    pub renewable: RenewableParams,
    pub weather: WeatherParams,
    pub traffic: TrafficParams,
    pub demand: DemandParams,
    pub complexity: ComplexityScale,
    /// 0 = Monday.
    pub start_weekday: u8,
    pub seed: u64,
}

/// One failed validation rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl From<Violation> for Error {
    fn from(v: Violation) -> Self {
        config_err(v.field, v.message)
    }
}

pub(crate) struct Checker {
    prefix: String,
    pub violations: Vec<Violation>,
}

impl Checker {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
            violations: Vec::new(),
        }
    }

    pub fn fail(&mut self, field: &str, message: impl Into<String>) {
        let field = if self.prefix.is_empty() {
            field.to_string()
        } else {
            format!("{}.{}", self.prefix, field)
        };
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }

    pub fn check(&mut self, ok: bool, field: &str, message: impl Into<String>) {
        if !ok {
            self.fail(field, message);
        }
    }

    pub fn finite_non_negative(&mut self, v: f64, field: &str) {
        self.check(v.is_finite() && v >= 0.0, field, format!("must be finite and >= 0, got {v}"));
    }

    pub fn positive(&mut self, v: f64, field: &str) {
        self.check(v.is_finite() && v > 0.0, field, format!("must be finite and > 0, got {v}"));
    }

    pub fn fraction(&mut self, v: f64, field: &str) {
        self.check((0.0..=1.0).contains(&v), field, format!("must lie in [0, 1], got {v}"));
    }

    pub fn ordered_pair(&mut self, pair: [f64; 2], field: &str) {
        self.check(
            pair[0].is_finite() && pair[1].is_finite() && pair[0] <= pair[1],
            field,
            format!("expected [min, max] with min <= max, got {pair:?}"),
        );
    }

    pub fn mix(&mut self, parts: [f64; 3], field: &str) {
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            self.fail(field, format!("fractions must be finite and >= 0, got {parts:?}"));
        } else if (sum - 1.0).abs() > 1e-9 {
            self.fail(field, format!("fractions must sum to 1 (±1e-9), got {sum}"));
        }
    }
}

impl ScenarioConfig {
    /// Desk-scale profile: 10 vehicles, 3 stations, 1 transformer, one day at 15-min steps.
    pub fn desk() -> Self {
        Self {
            n_evs: 10,
            n_stations: 3,
            n_transformers: 1,
            horizon: 96,
            step_minutes: 15.0,
            tier_mix: TierMix {
                level2: 0.30,
                dc_fast: 0.50,
                high_power: 0.20,
            },
            fleet_mix: FleetMix {
                passenger: 0.65,
                suv: 0.25,
                commercial: 0.10,
            },
            battery_kwh: [40.0, 100.0],
            temperature_c: [-10.0, 40.0],
            ports_per_station: 2,
            area_km: 6.0,
            transformer_capacity_kw: 400.0,
            base_load_peak_fraction: 0.75,
            base_load_volatility: 0.03,
            charge_efficiency: 0.95,
            pricing: PricingParams {
                base_tariff: 0.18,
                peak_tariff: 0.38,
                peak_start_hour: 17.0,
                peak_end_hour: 21.0,
                volatility: 0.02,
                max_tariff: 0.6,
                price_cap: 0.65,
            },
            renewable: RenewableParams {
                solar_peak_kw: 150.0,
                wind_mean_kw: 40.0,
                wind_mean_ms: 6.0,
            },
            weather: WeatherParams {
                temperature_volatility: 0.8,
                diurnal_amplitude_c: 6.0,
                precipitation_mean: 0.15,
                wind_volatility: 1.0,
            },
            traffic: TrafficParams {
                congestion_volatility: 0.05,
                incident_rate: 0.01,
                incident_steps: 4,
            },
            demand: DemandParams {
                initial_soc: [0.2, 0.8],
                required_soc: [0.6, 0.9],
                dwell_steps: [12, 40],
                trip_steps: [4, 16],
                trip_energy_fraction: [0.15, 0.4],
                task_kwh: 4.0,
                queue_limit: 2,
            },
            complexity: ComplexityScale {
                temperature: 3.0,
                congestion: 0.2,
                loading: 0.3,
                tariff: 0.1,
            },
            start_weekday: 0,
            seed: 7,
        }
    }

    /// Full-size profile: 250 vehicles, 45 stations, 12 transformers.
    pub fn paper() -> Self {
        Self {
            n_evs: 250,
            n_stations: 45,
            n_transformers: 12,
            ports_per_station: 4,
            area_km: 20.0,
            transformer_capacity_kw: 1200.0,
            renewable: RenewableParams {
                solar_peak_kw: 400.0,
                wind_mean_kw: 100.0,
                wind_mean_ms: 6.0,
            },
            ..Self::desk()
        }
    }

    pub fn steps_per_hour(&self) -> f64 {
        60.0 / self.step_minutes
    }

    pub fn step_hours(&self) -> f64 {
        self.step_minutes / 60.0
    }

    /// Every violated rule, not just the first.
    pub fn violations(&self) -> Vec<Violation> {
        let mut c = Checker::new("");
        c.check(self.n_evs >= 1, "n_evs", "must be >= 1");
        c.check(self.n_stations >= 1, "n_stations", "must be >= 1");
        c.check(self.n_transformers >= 1, "n_transformers", "must be >= 1");
        c.check(
            self.n_transformers <= self.n_stations.max(1),
            "n_transformers",
            "cannot exceed n_stations",
        );
        c.check(self.horizon >= 1, "horizon", "must be >= 1");
        c.check(
            self.step_minutes.is_finite() && self.step_minutes > 0.0 && self.step_minutes <= 60.0,
            "step_minutes",
            format!("must lie in (0, 60], got {}", self.step_minutes),
        );
        c.mix(self.tier_mix.as_array(), "tier_mix");
        c.mix(self.fleet_mix.as_array(), "fleet_mix");
        c.ordered_pair(self.battery_kwh, "battery_kwh");
        c.check(
            self.battery_kwh[0] >= 10.0 && self.battery_kwh[1] <= 200.0,
            "battery_kwh",
            format!("must lie within [10, 200] kWh, got {:?}", self.battery_kwh),
        );
        c.ordered_pair(self.temperature_c, "temperature_c");
        c.check(
            self.temperature_c[1] > self.temperature_c[0],
            "temperature_c",
            "range must be non-degenerate",
        );
        c.check(self.ports_per_station >= 1, "ports_per_station", "must be >= 1");
        c.positive(self.area_km, "area_km");
        c.positive(self.transformer_capacity_kw, "transformer_capacity_kw");
        c.finite_non_negative(self.base_load_peak_fraction, "base_load_peak_fraction");
        c.finite_non_negative(self.base_load_volatility, "base_load_volatility");
        c.check(
            self.charge_efficiency > 0.0 && self.charge_efficiency <= 1.0,
            "charge_efficiency",
            format!("must lie in (0, 1], got {}", self.charge_efficiency),
        );

        let p = &self.pricing;
        c.positive(p.base_tariff, "pricing.base_tariff");
        c.positive(p.peak_tariff, "pricing.peak_tariff");
        c.finite_non_negative(p.volatility, "pricing.volatility");
        c.check(
            p.max_tariff.is_finite() && p.max_tariff >= p.peak_tariff.max(p.base_tariff),
            "pricing.max_tariff",
            "must be >= both base_tariff and peak_tariff",
        );
        c.positive(p.price_cap, "pricing.price_cap");
        c.check(
            (0.0..=24.0).contains(&p.peak_start_hour)
                && (0.0..=24.0).contains(&p.peak_end_hour)
                && p.peak_start_hour < p.peak_end_hour,
            "pricing.peak_start_hour",
            "peak window must satisfy 0 <= start < end <= 24",
        );

        c.finite_non_negative(self.renewable.solar_peak_kw, "renewable.solar_peak_kw");
        c.finite_non_negative(self.renewable.wind_mean_kw, "renewable.wind_mean_kw");
        c.positive(self.renewable.wind_mean_ms, "renewable.wind_mean_ms");
        c.finite_non_negative(self.weather.temperature_volatility, "weather.temperature_volatility");
        c.finite_non_negative(self.weather.diurnal_amplitude_c, "weather.diurnal_amplitude_c");
        c.fraction(self.weather.precipitation_mean, "weather.precipitation_mean");
        c.finite_non_negative(self.weather.wind_volatility, "weather.wind_volatility");
        c.finite_non_negative(self.traffic.congestion_volatility, "traffic.congestion_volatility");
        c.fraction(self.traffic.incident_rate, "traffic.incident_rate");

        let d = &self.demand;
        c.ordered_pair(d.initial_soc, "demand.initial_soc");
        c.check(
            d.initial_soc[0] >= 0.0 && d.initial_soc[1] <= 1.0,
            "demand.initial_soc",
            "must lie within [0, 1]",
        );
        c.ordered_pair(d.required_soc, "demand.required_soc");
        c.check(
            d.required_soc[0] >= 0.0 && d.required_soc[1] <= 1.0,
            "demand.required_soc",
            "must lie within [0, 1]",
        );
        c.check(
            d.dwell_steps[0] >= 1 && d.dwell_steps[0] <= d.dwell_steps[1],
            "demand.dwell_steps",
            "expected [min, max] with 1 <= min <= max",
        );
        c.check(
            d.trip_steps[0] >= 1 && d.trip_steps[0] <= d.trip_steps[1],
            "demand.trip_steps",
            "expected [min, max] with 1 <= min <= max",
        );
        c.ordered_pair(d.trip_energy_fraction, "demand.trip_energy_fraction");
        c.check(
            d.trip_energy_fraction[0] >= 0.0 && d.trip_energy_fraction[1] <= 1.0,
            "demand.trip_energy_fraction",
            "must lie within [0, 1]",
        );
        c.finite_non_negative(d.task_kwh, "demand.task_kwh");

        let s = &self.complexity;
        c.positive(s.temperature, "complexity.temperature");
        c.positive(s.congestion, "complexity.congestion");
        c.positive(s.loading, "complexity.loading");
        c.positive(s.tariff, "complexity.tariff");
        c.check(self.start_weekday < 7, "start_weekday", "must be 0..=6");
        c.violations
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(v) => Err(v.into()),
            None => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Largest-remainder apportionment of `total` items over `fractions`.
///
/// Remainders within 1e-9 count as ties and go to the earlier category.
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        if (ra - rb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
        }
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
