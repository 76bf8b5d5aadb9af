use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::config::{ComplexityScale, ScenarioConfig};
use crate::numerics::Matrix;

/// Fixed-width context features, independent of fleet size.
pub const N_CONTEXT_FEATURES: usize = 20;
/// Per-vehicle features in the base block.
pub const EV_FEATURES: usize = 8;
/// Per-station features in the spatial block.
pub const STATION_FEATURES: usize = 5;
/// Semantic tokens the attention layer sees.
pub const TOKEN_COUNT: usize = 6;
pub const TOKEN_WIDTH: usize = 4;
/// Rolling window for context complexity, steps.
pub const COMPLEXITY_WINDOW: usize = 8;

/// The world observation at one step.
///
/// Blocks are kept apart so consumers can pick the pathway they need;
/// [`ContextState::to_vector`] concatenates them in the order
/// base, temporal, spatial, grid, weather, traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    /// `EV_FEATURES` per vehicle.
    pub base: Vec<f64>,
    /// hour sine, hour cosine, weekend, tariff, next-hour tariff, demand-response.
    pub temporal: Vec<f64>,
    /// `STATION_FEATURES` per station.
    pub spatial: Vec<f64>,
    /// mean loading, min voltage, frequency deviation, peak flag.
    pub grid: Vec<f64>,
    /// temperature, irradiance, precipitation, wind, solar forecast, wind forecast, renewable share.
    pub weather: Vec<f64>,
    /// congestion, travel-time factor, incident.
    pub traffic: Vec<f64>,
    pub t: usize,
    /// Cached rolling-volatility score in [0, 1]; not a network input.
    pub complexity: f64,
}

impl ContextState {
    pub fn n_base(&self) -> usize {
        self.base.len()
    }

    pub fn n_spatial(&self) -> usize {
        self.spatial.len()
    }

    pub fn dim(&self) -> usize {
        self.base.len()
            + self.temporal.len()
            + self.spatial.len()
            + self.grid.len()
            + self.weather.len()
            + self.traffic.len()
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.base);
        v.extend_from_slice(&self.temporal);
        v.extend_from_slice(&self.spatial);
        v.extend_from_slice(&self.grid);
        v.extend_from_slice(&self.weather);
        v.extend_from_slice(&self.traffic);
        v
    }

    /// Per-vehicle and per-station features only.
    pub fn entity_vector(&self) -> Vec<f64> {
        let mut v = self.base.clone();
        v.extend_from_slice(&self.spatial);
        v
    }

    /// The 20 context features in canonical order: weather (4), traffic (3),
    /// pricing (3), grid (4), renewable (3), temporal (3).
    pub fn context_features(&self) -> [f64; N_CONTEXT_FEATURES] {
        let (tp, w, g, tr) = (&self.temporal, &self.weather, &self.grid, &self.traffic);
        [
            w[0], w[1], w[2], w[3], tr[0], tr[1], tr[2], tp[3], tp[4], tp[5], g[0], g[1], g[2], g[3], w[4], w[5],
            w[6], tp[0], tp[1], tp[2],
        ]
    }

    /// Inverse of [`ContextState::context_features`].
    pub fn set_context_features(&mut self, f: &[f64; N_CONTEXT_FEATURES]) {
        self.weather = vec![f[0], f[1], f[2], f[3], f[14], f[15], f[16]];
        self.traffic = vec![f[4], f[5], f[6]];
        self.temporal = vec![f[17], f[18], f[19], f[7], f[8], f[9]];
        self.grid = vec![f[10], f[11], f[12], f[13]];
    }

    /// Context features grouped into semantic tokens, zero-padded to `TOKEN_WIDTH`.
    pub fn tokens(&self) -> Matrix {
        tokens_from_features(&self.context_features())
    }
}

/// Token rows: weather, traffic, pricing, grid, renewable, temporal.
pub fn tokens_from_features(f: &[f64; N_CONTEXT_FEATURES]) -> Matrix {
    const GROUPS: [(usize, usize); TOKEN_COUNT] = [(0, 4), (4, 3), (7, 3), (10, 4), (14, 3), (17, 3)];
    let mut m = Matrix::zeros(TOKEN_COUNT, TOKEN_WIDTH);
    for (row, (start, len)) in GROUPS.iter().enumerate() {
        m.row_mut(row)[..*len].copy_from_slice(&f[*start..start + len]);
    }
    m
}

/// Physical (un-normalised) context quantities at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawContext {
    pub temperature_c: f64,
    pub irradiance_wm2: f64,
    pub precipitation: f64,
    pub wind_ms: f64,
    pub congestion: f64,
    pub travel_time_factor: f64,
    pub incident: bool,
    pub tariff: f64,
    pub next_hour_tariff: f64,
    pub demand_response: bool,
    pub mean_loading: f64,
    pub min_voltage_pu: f64,
    pub frequency_deviation_hz: f64,
    pub peak: bool,
    pub solar_forecast_kw: f64,
    pub wind_forecast_kw: f64,
    pub renewable_share: f64,
    pub hour: f64,
    pub weekend: bool,
}

impl RawContext {
    /// Every quantity at the lower bound of its normalisation range.
    pub fn floor(cfg: &ScenarioConfig) -> Self {
        Self {
            temperature_c: cfg.temperature_c[0],
            travel_time_factor: 1.0,
            min_voltage_pu: 0.8,
            ..Self::default()
        }
    }
}

fn unit(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn ratio(v: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        unit(v / scale)
    } else {
        0.0
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Min-max normalisation against configured bounds, clamped.
pub fn normalize_context(raw: &RawContext, cfg: &ScenarioConfig) -> [f64; N_CONTEXT_FEATURES] {
    let [t_lo, t_hi] = cfg.temperature_c;
    let angle = 2.0 * PI * raw.hour / 24.0;
    [
        unit((raw.temperature_c - t_lo) / (t_hi - t_lo)),
        ratio(raw.irradiance_wm2, 1000.0),
        unit(raw.precipitation),
        ratio(raw.wind_ms, 25.0),
        unit(raw.congestion),
        unit((raw.travel_time_factor - 1.0) / 2.0),
        flag(raw.incident),
        ratio(raw.tariff, cfg.pricing.max_tariff),
        ratio(raw.next_hour_tariff, cfg.pricing.max_tariff),
        flag(raw.demand_response),
        ratio(raw.mean_loading, 2.0),
        unit((raw.min_voltage_pu - 0.8) / 0.3),
        (raw.frequency_deviation_hz / 0.5).clamp(-1.0, 1.0),
        flag(raw.peak),
        ratio(raw.solar_forecast_kw, cfg.renewable.solar_peak_kw),
        ratio(raw.wind_forecast_kw, 3.0 * cfg.renewable.wind_mean_kw),
        unit(raw.renewable_share),
        angle.sin(),
        angle.cos(),
        flag(raw.weekend),
    ]
}

/// Rolling history of the four volatility signals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalWindow {
    temperature: VecDeque<f64>,
    congestion: VecDeque<f64>,
    loading: VecDeque<f64>,
    tariff: VecDeque<f64>,
}

fn push_bounded(q: &mut VecDeque<f64>, v: f64) {
    if q.len() == COMPLEXITY_WINDOW {
        q.pop_front();
    }
    q.push_back(v);
}

/// Population std-dev; zero for fewer than two samples.
fn std_dev(q: &VecDeque<f64>) -> f64 {
    if q.len() < 2 {
        return 0.0;
    }
    // shifted by the first sample so a constant window is exactly zero
    let n = q.len() as f64;
    let shift = q[0];
    let mean = q.iter().map(|v| v - shift).sum::<f64>() / n;
    (q.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl SignalWindow {
    pub fn push(&mut self, temperature_c: f64, congestion: f64, loading: f64, tariff: f64) {
        push_bounded(&mut self.temperature, temperature_c);
        push_bounded(&mut self.congestion, congestion);
        push_bounded(&mut self.loading, loading);
        push_bounded(&mut self.tariff, tariff);
    }
}

/// Mean of four clamped, normalised rolling std-devs (temperature,
/// congestion, transformer loading, tariff).
pub fn context_complexity(window: &SignalWindow, scale: &ComplexityScale) -> f64 {
    let parts = [
        std_dev(&window.temperature) / scale.temperature,
        std_dev(&window.congestion) / scale.congestion,
        std_dev(&window.loading) / scale.loading,
        std_dev(&window.tariff) / scale.tariff,
    ];
    parts.iter().map(|p| unit(*p)).sum::<f64>() / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scale() -> ComplexityScale {
        ComplexityScale {
            temperature: 1.0,
            congestion: 1.0,
            loading: 1.0,
            tariff: 0.2,
        }
    }

    #[test]
    fn constant_signals_have_zero_complexity() {
        let mut w = SignalWindow::default();
        for _ in 0..12 {
            w.push(20.0, 0.3, 0.5, 0.2);
        }
        assert_eq!(context_complexity(&w, &scale()), 0.0);
    }

    #[test]
    fn saturated_signals_reach_one() {
        let mut w = SignalWindow::default();
        for i in 0..8 {
            let s = if i % 2 == 0 { 10.0 } else { -10.0 };
            w.push(s, s, s, s);
        }
        assert_eq!(context_complexity(&w, &scale()), 1.0);
    }

    #[test]
    fn alternating_tariff_example() {
        let mut w = SignalWindow::default();
        for i in 0..8 {
            w.push(15.0, 0.2, 0.4, if i % 2 == 0 { 0.1 } else { 0.3 });
        }
        assert!((context_complexity(&w, &scale()) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn floor_context_normalises_to_floor_values() {
        let cfg = ScenarioConfig::desk();
        let f = normalize_context(&RawContext::floor(&cfg), &cfg);
        // everything at its floor; midnight gives (sin, cos) = (0, 1)
        for (i, v) in f.iter().enumerate() {
            let expected = if i == 18 { 1.0 } else { 0.0 };
            assert_eq!(*v, expected, "feature {i}");
        }
    }

    #[test]
    fn context_feature_round_trip_and_tokens() {
        let mut s = ContextState {
            base: vec![0.0; 8],
            temporal: vec![0.0; 6],
            spatial: vec![0.0; 5],
            grid: vec![0.0; 4],
            weather: vec![0.0; 7],
            traffic: vec![0.0; 3],
            t: 0,
            complexity: 0.0,
        };
        let mut f = [0.0; N_CONTEXT_FEATURES];
        for (i, v) in f.iter_mut().enumerate() {
            *v = i as f64;
        }
        s.set_context_features(&f);
        assert_eq!(s.context_features(), f);
        let tok = s.tokens();
        assert_eq!(tok.row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(tok.row(1), &[4.0, 5.0, 6.0, 0.0]);
        assert_eq!(tok.row(5), &[17.0, 18.0, 19.0, 0.0]);
    }
}
