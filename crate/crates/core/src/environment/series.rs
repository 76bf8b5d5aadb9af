//! Pre-generated exogenous signals for one episode: weather, traffic,
//! tariffs, uncontrolled load and renewable output.
//!
//! Each signal is a deterministic daily shape plus AR(1) mean-reverting noise
//! with a configured stationary std-dev, so the whole horizon is fixed at
//! reset and reproducible from the episode seed.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ScenarioConfig;

const AR_COEFF: f64 = 0.9;

/// Zero-mean AR(1) noise with stationary std-dev `sigma`.
fn ar_noise(len: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let innovation = sigma * (1.0 - AR_COEFF * AR_COEFF).sqrt();
    let mut x: f64 = {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    };
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            x = AR_COEFF * x + innovation * z;
            x
        })
        .collect()
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let d = (hour - centre).abs().min(24.0 - (hour - centre).abs());
    (-(d * d) / (2.0 * width * width)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exogenous {
    pub temperature_c: Vec<f64>,
    pub irradiance_wm2: Vec<f64>,
    pub precipitation: Vec<f64>,
    pub wind_ms: Vec<f64>,
    pub congestion: Vec<f64>,
    pub travel_time_factor: Vec<f64>,
    pub incident: Vec<bool>,
    pub tariff: Vec<f64>,
    /// `[transformer][t]`, fraction of capacity.
    pub base_load_fraction: Vec<Vec<f64>>,
    pub solar_kw: Vec<f64>,
    pub wind_kw: Vec<f64>,
    pub frequency_noise_hz: Vec<f64>,
}

pub fn hour_of_day(cfg: &ScenarioConfig, t: usize) -> f64 {
    (t as f64 * cfg.step_minutes / 60.0).rem_euclid(24.0)
}

pub fn is_weekend(cfg: &ScenarioConfig, t: usize) -> bool {
    let day = (t as f64 * cfg.step_minutes / 1440.0).floor() as u64;
    (cfg.start_weekday as u64 + day) % 7 >= 5
}

pub fn is_peak(cfg: &ScenarioConfig, t: usize) -> bool {
    let h = hour_of_day(cfg, t);
    h >= cfg.pricing.peak_start_hour && h < cfg.pricing.peak_end_hour
}

impl Exogenous {
    /// Series cover `len` steps; callers request the horizon plus lookahead.
    pub fn generate(cfg: &ScenarioConfig, len: usize, rng: &mut ChaCha8Rng) -> Self {
        let hours: Vec<f64> = (0..len).map(|t| hour_of_day(cfg, t)).collect();
        let [t_min, t_max] = cfg.temperature_c;
        let margin = ((t_max - t_min) / 2.0).min(cfg.weather.diurnal_amplitude_c + 2.0);
        let daily_mean = rng.random_range((t_min + margin)..=(t_max - margin).max(t_min + margin));

        let temp_noise = ar_noise(len, cfg.weather.temperature_volatility, rng);
        let temperature_c: Vec<f64> = hours
            .iter()
            .zip(&temp_noise)
            .map(|(h, n)| {
                let diurnal = cfg.weather.diurnal_amplitude_c * (2.0 * PI * (h - 9.0) / 24.0).sin();
                (daily_mean + diurnal + n).clamp(t_min, t_max)
            })
            .collect();

        let precip_noise = ar_noise(len, 0.15, rng);
        let precipitation: Vec<f64> = precip_noise
            .iter()
            .map(|n| (cfg.weather.precipitation_mean + n).clamp(0.0, 1.0))
            .collect();

        let irradiance_wm2: Vec<f64> = hours
            .iter()
            .zip(&precipitation)
            .map(|(h, p)| {
                let sun = (PI * (h - 6.0) / 12.0).sin().max(0.0);
                1000.0 * sun * (1.0 - 0.7 * p)
            })
            .collect();

        let wind_noise = ar_noise(len, cfg.weather.wind_volatility, rng);
        let wind_ms: Vec<f64> = wind_noise
            .iter()
            .map(|n| (cfg.renewable.wind_mean_ms + n).clamp(0.0, 25.0))
            .collect();

        let congestion_noise = ar_noise(len, cfg.traffic.congestion_volatility, rng);
        let weekend: Vec<bool> = (0..len).map(|t| is_weekend(cfg, t)).collect();
        let congestion: Vec<f64> = hours
            .iter()
            .zip(&congestion_noise)
            .zip(&weekend)
            .map(|((h, n), we)| {
                let rush = 0.45 * bump(*h, 8.0, 1.0) + 0.5 * bump(*h, 17.5, 1.5);
                let rush = if *we { 0.4 * rush } else { rush };
                (0.15 + rush + n).clamp(0.0, 1.0)
            })
            .collect();

        let mut incident = vec![false; len];
        let mut remaining = 0usize;
        for slot in incident.iter_mut() {
            if remaining == 0 && rng.random_bool(cfg.traffic.incident_rate) {
                remaining = cfg.traffic.incident_steps.max(1);
            }
            if remaining > 0 {
                *slot = true;
                remaining -= 1;
            }
        }
        let travel_time_factor = congestion
            .iter()
            .zip(&incident)
            .map(|(c, i)| (1.0 + 1.6 * c.powf(1.5) + if *i { 0.4 } else { 0.0 }).min(3.0))
            .collect();

        let tariff_noise = ar_noise(len, cfg.pricing.volatility, rng);
        let p = &cfg.pricing;
        let tariff = (0..len)
            .map(|t| {
                let level = if is_peak(cfg, t) { p.peak_tariff } else { p.base_tariff };
                let shoulder = 0.3 * (p.peak_tariff - p.base_tariff) * bump(hours[t], 8.0, 1.5);
                (level + shoulder + tariff_noise[t]).clamp(0.01, p.max_tariff)
            })
            .collect();

        let base_load_fraction = (0..cfg.n_transformers)
            .map(|_| {
                let noise = ar_noise(len, cfg.base_load_volatility, rng);
                (0..len)
                    .map(|t| {
                        let h = hours[t];
                        let shape = 0.35
                            + (cfg.base_load_peak_fraction - 0.35)
                                * (bump(h, 19.0, 1.8) + 0.45 * bump(h, 8.0, 1.2)).min(1.0);
                        let thermal = 1.0 + 0.006 * (temperature_c[t] - 18.0).abs();
                        (shape * thermal + noise[t]).clamp(0.05, 1.5)
                    })
                    .collect()
            })
            .collect();

        let solar_kw = irradiance_wm2
            .iter()
            .map(|g| cfg.renewable.solar_peak_kw * g / 1000.0)
            .collect();
        let wind_kw = wind_ms
            .iter()
            .map(|v| cfg.renewable.wind_mean_kw * (v / cfg.renewable.wind_mean_ms).powi(3).min(3.0))
            .collect();
        let frequency_noise_hz = ar_noise(len, 0.02, rng);

        Self {
            temperature_c,
            irradiance_wm2,
            precipitation,
            wind_ms,
            congestion,
            travel_time_factor,
            incident,
            tariff,
            base_load_fraction,
            solar_kw,
            wind_kw,
            frequency_noise_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.tariff.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tariff.is_empty()
    }
}
