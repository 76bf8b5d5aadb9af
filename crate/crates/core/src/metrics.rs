//! Evaluation metrics over step traces and learning curves, and the report
//! files written for each comparison.
//!
//! Every function here is a pure reader of its inputs. Ratios whose
//! denominator is zero (no energy allocated, no renewables available) are
//! reported as 0 rather than NaN so reports always serialise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{Algorithm, AlgorithmRun};
use crate::environment::{StakeholderWeights, StepOutcome};
use crate::error::{Error, Result};
use crate::training::EpisodeRecord;

/// Minimum curve length for [`training_stability`].
pub const STABILITY_MIN_EPISODES: usize = 10;
/// Minimum curve length for [`convergence_episode`].
pub const CONVERGENCE_MIN_EPISODES: usize = 20;
/// Episodes averaged for the final plateau.
pub const FINAL_WINDOW: usize = 20;
/// Moving-average width for convergence detection.
pub const CONVERGENCE_WINDOW: usize = 5;
const STABILITY_TRAILING: usize = 10;
const STABILITY_BAND: f64 = 0.2;

pub const REPORT_JSON: &str = "report.json";
pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_HEADER: [&str; 5] = ["algorithm", "episode", "performance_pct", "reward", "coordination_rate"];

fn non_empty(trace: &[StepOutcome], what: &str) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Argument(format!("{what} needs a non-empty trace")));
    }
    Ok(())
}

fn same_horizon(trace: &[StepOutcome], reference: &[StepOutcome]) -> Result<()> {
    non_empty(trace, "a comparison")?;
    if trace.len() != reference.len() {
        return Err(Error::Argument(format!(
            "horizon mismatch: trace has {} steps, reference {}",
            trace.len(),
            reference.len()
        )));
    }
    Ok(())
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// `(reference − policy) / max(|reference|, |policy|)`, in [−1, 1]; 0 when both vanish.
fn relative_reduction(policy: f64, reference: f64) -> f64 {
    let scale = policy.abs().max(reference.abs());
    if scale > 0.0 {
        ((reference - policy) / scale).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Fraction of steps whose joint action broke no hard constraint.
pub fn coordination_success_rate(trace: &[StepOutcome]) -> Result<f64> {
    non_empty(trace, "coordination_success_rate")?;
    Ok(trace.iter().filter(|o| o.is_feasible()).count() as f64 / trace.len() as f64)
}

/// Energy reaching batteries over energy drawn from the grid plus renewable energy curtailed.
pub fn energy_efficiency(trace: &[StepOutcome]) -> f64 {
    let useful: f64 = trace.iter().map(|o| o.delivered_kwh).sum();
    let total: f64 = trace.iter().map(|o| o.metered_kwh + o.curtailed_kwh).sum();
    ratio_or_zero(useful, total)
}

/// `energy_efficiency(trace) − energy_efficiency(reference)`.
pub fn energy_efficiency_gain(trace: &[StepOutcome], reference: &[StepOutcome]) -> Result<f64> {
    same_horizon(trace, reference)?;
    Ok(energy_efficiency(trace) - energy_efficiency(reference))
}

/// Relative cut in total charging cost against the reference.
pub fn cost_reduction(trace: &[StepOutcome], reference: &[StepOutcome]) -> Result<f64> {
    same_horizon(trace, reference)?;
    let cost = |t: &[StepOutcome]| t.iter().map(|o| o.ev_energy_cost).sum::<f64>();
    Ok(relative_reduction(cost(trace), cost(reference)))
}

/// Relative cut in the highest single-step site load against the reference.
pub fn peak_demand_reduction(trace: &[StepOutcome], reference: &[StepOutcome]) -> Result<f64> {
    same_horizon(trace, reference)?;
    let peak = |t: &[StepOutcome]| t.iter().map(|o| o.total_load_kw).fold(0.0, f64::max);
    Ok(relative_reduction(peak(trace), peak(reference)))
}

/// Renewable energy charged into vehicles over renewable energy available.
pub fn renewable_utilization(trace: &[StepOutcome]) -> Result<f64> {
    non_empty(trace, "renewable_utilization")?;
    let used: f64 = trace.iter().map(|o| o.ev_renewable_kwh).sum();
    let available: f64 = trace.iter().map(|o| o.available_renewable_kwh).sum();
    Ok(ratio_or_zero(used, available))
}

/// Queued vehicle-steps per vehicle over the trace.
pub fn mean_wait_steps(trace: &[StepOutcome]) -> Result<f64> {
    non_empty(trace, "mean_wait_steps")?;
    let waiting: usize = trace.iter().map(|o| o.waiting_evs).sum();
    Ok(waiting as f64 / trace[0].n_evs.max(1) as f64)
}

/// Fraction of consecutive-episode reward changes no larger than 20% of the
/// mean absolute reward over the (up to) 10 preceding episodes.
pub fn training_stability(rewards: &[f64]) -> Result<f64> {
    if rewards.len() < STABILITY_MIN_EPISODES {
        return Err(Error::Argument(format!(
            "training_stability needs at least {STABILITY_MIN_EPISODES} episodes, got {}",
            rewards.len()
        )));
    }
    finite(rewards)?;
    let mut stable = 0usize;
    for k in 1..rewards.len() {
        let window = &rewards[k.saturating_sub(STABILITY_TRAILING)..k];
        let scale = window.iter().map(|r| r.abs()).sum::<f64>() / window.len() as f64;
        if (rewards[k] - rewards[k - 1]).abs() <= STABILITY_BAND * scale {
            stable += 1;
        }
    }
    Ok(stable as f64 / (rewards.len() - 1) as f64)
}

fn finite(rewards: &[f64]) -> Result<()> {
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::Argument(format!("episode {i} reward is not finite")));
    }
    Ok(())
}

fn final_mean(rewards: &[f64]) -> f64 {
    let tail = &rewards[rewards.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn series_min(rewards: &[f64]) -> f64 {
    rewards.iter().copied().fold(f64::INFINITY, f64::min)
}

/// 1-based episode at which the 5-episode moving average first reaches 95% of
/// the way from the series minimum to the final-20 mean and afterwards never
/// falls below 90% of it; the episode count when that never happens.
pub fn convergence_episode(rewards: &[f64]) -> Result<usize> {
    let n = rewards.len();
    if n < CONVERGENCE_MIN_EPISODES {
        return Err(Error::Argument(format!(
            "convergence_episode needs at least {CONVERGENCE_MIN_EPISODES} episodes, got {n}"
        )));
    }
    finite(rewards)?;
    let lo = series_min(rewards);
    let span = final_mean(rewards) - lo;
    let progress: Vec<f64> = rewards
        .windows(CONVERGENCE_WINDOW)
        .map(|w| w.iter().sum::<f64>() / CONVERGENCE_WINDOW as f64 - lo)
        .collect();
    // `holds[i]`: every moving average from window i on stays above the 90% line.
    let mut holds = vec![false; progress.len()];
    let mut ok = true;
    for i in (0..progress.len()).rev() {
        ok &= progress[i] >= 0.9 * span;
        holds[i] = ok;
    }
    Ok((0..progress.len())
        .find(|&i| progress[i] >= 0.95 * span && holds[i])
        .map_or(n, |i| i + CONVERGENCE_WINDOW))
}

/// Per-episode reward min-max scaled to [0, 100] against the (series minimum,
/// final-20 mean) pair; a run that never rises above its minimum scores 100.
pub fn performance_pct(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Ok(Vec::new());
    }
    finite(rewards)?;
    let lo = series_min(rewards);
    let span = final_mean(rewards) - lo;
    Ok(rewards
        .iter()
        .map(|r| if span > 0.0 { 100.0 * ((r - lo) / span).clamp(0.0, 1.0) } else { 100.0 })
        .collect())
}

/// Normalised area under the learning curve: mean of `performance_pct / 100`.
pub fn sample_efficiency(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Argument("sample_efficiency needs at least one episode".into()));
    }
    let p = performance_pct(rewards)?;
    Ok(p.iter().sum::<f64>() / (100.0 * p.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub performance_pct: f64,
    pub reward: f64,
    pub coordination_rate: f64,
}

/// Scores of one (algorithm, seed) run. Trace metrics come from the held-out
/// evaluation episodes against the greedy reference on the same episodes;
/// curve metrics come from the training curve and are `None` when it is too short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub n_episodes: usize,
    pub coordination_success_rate: f64,
    pub energy_efficiency_gain: f64,
    pub cost_reduction: f64,
    pub training_stability: Option<f64>,
    pub sample_efficiency: Option<f64>,
    pub convergence_episode: Option<usize>,
    pub peak_demand_reduction: f64,
    pub renewable_utilization: f64,
    pub mean_wait_steps: f64,
    /// Mean coordinated reward over the last 20 curve episodes, under the initial weights.
    pub final_reward: f64,
    /// Mean coordinated reward per held-out episode, under the initial weights.
    pub eval_reward: f64,
    pub curve: Vec<CurvePoint>,
}

/// Per-episode coordinated reward under the fixed initial weights.
pub fn curve_rewards(records: &[EpisodeRecord]) -> Vec<f64> {
    let w = StakeholderWeights::initial();
    records.iter().map(|r| r.reward_under(&w)).collect()
}

impl RunReport {
    /// Scores `run` against `reference`, which must have evaluated the same episodes.
    pub fn from_run(run: &AlgorithmRun, reference: &AlgorithmRun) -> Result<Self> {
        if run.outcomes.len() != reference.outcomes.len() {
            return Err(Error::Argument(format!(
                "run has {} evaluation episodes, reference {}",
                run.outcomes.len(),
                reference.outcomes.len()
            )));
        }
        let trace: Vec<StepOutcome> = run.outcomes.concat();
        let reference_trace: Vec<StepOutcome> = reference.outcomes.concat();
        let rewards = curve_rewards(&run.curve);
        let pct = performance_pct(&rewards)?;
        let curve = run
            .curve
            .iter()
            .zip(rewards.iter().zip(&pct))
            .map(|(r, (reward, p))| CurvePoint {
                episode: r.episode,
                performance_pct: *p,
                reward: *reward,
                coordination_rate: r.coordination_rate(),
            })
            .collect();
        let eval_rewards = curve_rewards(&run.evaluation);
        Ok(Self {
            algorithm: run.algorithm,
            seed: run.seed,
            n_episodes: rewards.len(),
            coordination_success_rate: coordination_success_rate(&trace)?,
            energy_efficiency_gain: energy_efficiency_gain(&trace, &reference_trace)?,
            cost_reduction: cost_reduction(&trace, &reference_trace)?,
            training_stability: (rewards.len() >= STABILITY_MIN_EPISODES).then(|| training_stability(&rewards)).transpose()?,
            sample_efficiency: (!rewards.is_empty()).then(|| sample_efficiency(&rewards)).transpose()?,
            convergence_episode: (rewards.len() >= CONVERGENCE_MIN_EPISODES)
                .then(|| convergence_episode(&rewards))
                .transpose()?,
            peak_demand_reduction: peak_demand_reduction(&trace, &reference_trace)?,
            renewable_utilization: renewable_utilization(&trace)?,
            mean_wait_steps: mean_wait_steps(&trace)? / run.outcomes.len() as f64,
            final_reward: if rewards.is_empty() { 0.0 } else { final_mean(&rewards) },
            eval_reward: eval_rewards.iter().sum::<f64>() / eval_rewards.len().max(1) as f64,
            curve,
        })
    }

    /// Range and ordering checks every report must pass.
    pub fn check(&self) -> Result<()> {
        let unit = [
            ("coordination_success_rate", Some(self.coordination_success_rate)),
            ("training_stability", self.training_stability),
            ("sample_efficiency", self.sample_efficiency),
            ("renewable_utilization", Some(self.renewable_utilization)),
        ];
        let signed = [
            ("energy_efficiency_gain", self.energy_efficiency_gain),
            ("cost_reduction", self.cost_reduction),
            ("peak_demand_reduction", self.peak_demand_reduction),
        ];
        for (name, v) in unit {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invariant(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        for (name, v) in signed {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} = {v} outside [-1, 1]")));
            }
        }
        if self.convergence_episode.is_some_and(|c| c > self.n_episodes) {
            return Err(Error::Invariant("convergence_episode exceeds the episode count".into()));
        }
        if !(self.mean_wait_steps >= 0.0) {
            return Err(Error::Invariant(format!("mean_wait_steps = {}", self.mean_wait_steps)));
        }
        Ok(())
    }
}

/// Writes `report.json` (all reports) and `curves.csv` (seed-averaged curve
/// per algorithm, algorithms in first-appearance order) into `dir`.
pub fn emit_report(reports: &[RunReport], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let json_path = dir.join(REPORT_JSON);
    let mut json = BufWriter::new(File::create(&json_path)?);
    serde_json::to_writer_pretty(&mut json, reports)?;
    json.write_all(b"\n")?;
    json.flush()?;

    let csv_path = dir.join(CURVES_CSV);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&csv_path)?));
    w.write_record(CURVES_HEADER)?;
    let mut order: Vec<Algorithm> = Vec::new();
    // (algorithm, episode) → (performance, reward, coordination, count)
    let mut sums: BTreeMap<(usize, usize), [f64; 4]> = BTreeMap::new();
    for r in reports {
        let slot = match order.iter().position(|a| *a == r.algorithm) {
            Some(i) => i,
            None => {
                order.push(r.algorithm);
                order.len() - 1
            }
        };
        for p in &r.curve {
            let acc = sums.entry((slot, p.episode)).or_insert([0.0; 4]);
            acc[0] += p.performance_pct;
            acc[1] += p.reward;
            acc[2] += p.coordination_rate;
            acc[3] += 1.0;
        }
    }
    for ((slot, episode), [perf, reward, coord, n]) in sums {
        w.write_record([
            order[slot].name().to_string(),
            episode.to_string(),
            (perf / n).to_string(),
            (reward / n).to_string(),
            (coord / n).to_string(),
        ])?;
    }
    w.flush()?;
    Ok((json_path, csv_path))
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
