//! Switched-system rollouts, randomized scenario sampling and the three
//! evaluation metrics (settling time, overshoot, average cost).
//!
//! State convention: `x = (θ, ω)` stacked, angles in radians, frequency
//! deviations in per-unit of the nominal frequency. Hz appears only at
//! the metric/CSV boundary. Mode ids are 1-based.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::grid::ModeSet;
use crate::lqr::CostSpec;

/// Split a stacked state into its angle and frequency halves.
pub fn split_state(x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.len() / 2;
    (x.rows(0, n).into_owned(), x.rows(n, n).into_owned())
}

/// Stack angle and frequency deviations into one state vector.
pub fn stack_state(theta: &DVector<f64>, omega: &DVector<f64>) -> DVector<f64> {
    assert_eq!(theta.len(), omega.len());
    let n = theta.len();
    let mut x = DVector::zeros(2 * n);
    x.rows_mut(0, n).copy_from(theta);
    x.rows_mut(n, n).copy_from(omega);
    x
}

/// Initial state plus a piecewise-constant mode schedule.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub x0: DVector<f64>,
    /// Active mode id for each step, length = horizon.
    pub schedule: Vec<usize>,
    pub dt: f64,
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.schedule.len()
    }

    pub fn validate(&self, modes: &ModeSet) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidScenario("empty mode schedule".into()));
        }
        if self.x0.len() != modes.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has length {}, expected {}",
                self.x0.len(),
                modes.state_dim()
            )));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "scenario x0" });
        }
        if (self.dt - modes.dt).abs() > 1e-15 {
            return Err(Error::InvalidScenario(format!(
                "scenario dt {} does not match mode set dt {}",
                self.dt, modes.dt
            )));
        }
        if let Some(&bad) = self.schedule.iter().find(|&&q| q < 1 || q > modes.count()) {
            return Err(Error::InvalidScenario(format!(
                "mode id {bad} outside 1..={}",
                modes.count()
            )));
        }
        Ok(())
    }
}

/// Scenario randomization parameters of the evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub horizon_steps: usize,
    pub switch_period_steps: usize,
    /// Uniform range for the initial per-bus frequency deviation, in Hz.
    pub init_dev_hz: (f64, f64),
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            horizon_steps: 1000,
            switch_period_steps: 100,
            init_dev_hz: (-0.3, 0.3),
        }
    }
}

/// Draw one randomized scenario.
///
/// Deterministic in `(master_seed, scenario_index)`: each index gets its
/// own ChaCha stream, so batches are reproducible and order-independent.
/// Initial angles are zero; initial per-bus frequency deviations are
/// uniform over `init_dev_hz` (converted to per-unit); the starting mode
/// is uniform; at every switch boundary the mode moves by one of
/// {-1, 0, +1} with equal probability, clamped to the valid range.
pub fn sample_scenario(
    master_seed: u64,
    scenario_index: u64,
    modes: &ModeSet,
    params: &ScenarioParams,
) -> Result<Scenario> {
    let horizon = params.horizon_steps;
    let period = params.switch_period_steps;
    if horizon == 0 || period == 0 || horizon % period != 0 {
        return Err(Error::InvalidScenario(format!(
            "switch period {period} must divide horizon {horizon}"
        )));
    }
    let (lo, hi) = params.init_dev_hz;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidScenario("invalid init deviation range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(scenario_index);

    let n = modes.input_dim();
    let mut omega0 = DVector::zeros(n);
    for i in 0..n {
        let hz = if lo == hi { lo } else { rng.random_range(lo..hi) };
        omega0[i] = modes.hz_to_pu(hz);
    }
    let x0 = stack_state(&DVector::zeros(n), &omega0);

    let p = modes.count();
    let mut q = rng.random_range(1..=p);
    let mut schedule = Vec::with_capacity(horizon);
    for k in 0..horizon {
        if k > 0 && k % period == 0 {
            let delta: i64 = rng.random_range(0..3) - 1;
            q = (q as i64 + delta).clamp(1, p as i64) as usize;
        }
        schedule.push(q);
    }

    Ok(Scenario {
        x0,
        schedule,
        dt: modes.dt,
    })
}

/// Convenience: sample a whole batch of scenarios (index = position).
pub fn scenario_batch(
    master_seed: u64,
    count: usize,
    modes: &ModeSet,
    params: &ScenarioParams,
) -> Result<Vec<Scenario>> {
    (0..count)
        .map(|i| sample_scenario(master_seed, i as u64, modes, params))
        .collect()
}

/// A feedback controller evaluated along a rollout.
///
/// `mode` is the true active mode; implementations are free to ignore it
/// (e.g. when running with an online mode estimator).
pub trait Controller {
    fn action(&mut self, step: usize, x: &DVector<f64>, mode: usize) -> DVector<f64>;
}

impl<F> Controller for F
where
    F: FnMut(usize, &DVector<f64>, usize) -> DVector<f64>,
{
    fn action(&mut self, step: usize, x: &DVector<f64>, mode: usize) -> DVector<f64> {
        self(step, x, mode)
    }
}

/// Zero-input controller.
pub struct ZeroController;

impl Controller for ZeroController {
    fn action(&mut self, _step: usize, x: &DVector<f64>, _mode: usize) -> DVector<f64> {
        DVector::zeros(x.len() / 2)
    }
}

/// Simulated rollout: `horizon + 1` states, `horizon` actions, per-step
/// stage costs with the terminal state cost appended last.
///
/// `cost = Σ_k x_kᵀQx_k + u_kᵀRu_k + x_TᵀQx_T`, matching the optimal-value
/// identity of the finite-horizon regulator.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub schedule: Vec<usize>,
    pub stage_costs: Vec<f64>,
    pub cost: f64,
    pub dt: f64,
    pub nominal_freq_hz: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Roll the switched discrete-time system forward under a controller.
///
/// Aborts with the step index if a non-finite state or action shows up,
/// which is the divergence signal for unstable controllers.
pub fn simulate(
    modes: &ModeSet,
    scenario: &Scenario,
    controller: &mut dyn Controller,
    cost: &CostSpec,
) -> Result<Trajectory> {
    scenario.validate(modes)?;
    let horizon = scenario.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon + 1);
    let mut total = 0.0;

    let mut x = scenario.x0.clone();
    states.push(x.clone());
    for k in 0..horizon {
        let q = scenario.schedule[k];
        let u = controller.action(k, &x, q);
        if u.len() != modes.input_dim() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        let stage = cost.stage_cost(&x, &u);
        stage_costs.push(stage);
        total += stage;

        let m = modes.mode(q);
        x = &m.a_d * &x + &m.b_d * &u;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        actions.push(u);
        states.push(x.clone());
    }
    let terminal = cost.terminal_cost(&x);
    stage_costs.push(terminal);
    total += terminal;

    Ok(Trajectory {
        states,
        actions,
        schedule: scenario.schedule.clone(),
        stage_costs,
        cost: total,
        dt: scenario.dt,
        nominal_freq_hz: modes.nominal_freq_hz,
    })
}

/// Mean and sample standard deviation over a batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Stat {
        let n = values.len();
        assert!(n > 0, "empty batch");
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

/// Batch evaluation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub settling_ms: Stat,
    pub overshoot_hz: Stat,
    pub avg_cost: Stat,
    /// Trajectories that never kept |ω| below the threshold through the
    /// end of the horizon; their settling time is recorded as the horizon
    /// duration.
    pub unsettled: usize,
}

/// Settling time in milliseconds: first step after which the max-over-bus
/// |ω| stays below the threshold for every remaining step. `None` when
/// the trajectory never settles within the horizon.
pub fn settling_time_ms(traj: &Trajectory, settle_threshold_hz: f64) -> Option<f64> {
    let thr_pu = settle_threshold_hz / traj.nominal_freq_hz;
    let n = traj.states[0].len() / 2;
    let mut last_violation: Option<usize> = None;
    for (k, x) in traj.states.iter().enumerate() {
        let peak = x.rows(n, n).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak >= thr_pu {
            last_violation = Some(k);
        }
    }
    match last_violation {
        None => Some(0.0),
        Some(k) if k == traj.states.len() - 1 => None,
        Some(k) => Some((k + 1) as f64 * traj.dt * 1e3),
    }
}

/// Peak |ω| over all steps and buses, in Hz.
pub fn overshoot_hz(traj: &Trajectory) -> f64 {
    let n = traj.states[0].len() / 2;
    let peak_pu = traj
        .states
        .iter()
        .map(|x| x.rows(n, n).iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .fold(0.0f64, f64::max);
    peak_pu * traj.nominal_freq_hz
}

/// Compute the three evaluation metrics over a trajectory batch.
pub fn compute_metrics(batch: &[Trajectory], settle_threshold_hz: f64) -> Result<Metrics> {
    if batch.is_empty() {
        return Err(Error::InvalidScenario("empty trajectory batch".into()));
    }
    let mut settling = Vec::with_capacity(batch.len());
    let mut unsettled = 0;
    for t in batch {
        match settling_time_ms(t, settle_threshold_hz) {
            Some(ms) => settling.push(ms),
            None => {
                unsettled += 1;
                settling.push(t.horizon() as f64 * t.dt * 1e3);
            }
        }
    }
    let overshoot: Vec<f64> = batch.iter().map(overshoot_hz).collect();
    let costs: Vec<f64> = batch.iter().map(|t| t.cost).collect();
    Ok(Metrics {
        settling_ms: Stat::from_values(&settling),
        overshoot_hz: Stat::from_values(&overshoot),
        avg_cost: Stat::from_values(&costs),
        unsettled,
    })
}

/// Write a trajectory as CSV: `t_s, mode, theta_1..n, omega_hz_1..n,
/// u_1..n, stage_cost`. The final row carries the terminal state with
/// zero actions and the terminal cost. An optional `# config_hash=`
/// comment row precedes the header.
pub fn write_trajectory_csv(
    traj: &Trajectory,
    path: &std::path::Path,
    config_hash: Option<u64>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let n = traj.states[0].len() / 2;
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    if let Some(h) = config_hash {
        writeln!(w, "# config_hash={h:016x}").map_err(io_err)?;
    }
    let mut header = String::from("t_s,mode");
    for i in 1..=n {
        header.push_str(&format!(",theta_{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",omega_hz_{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",u_{i}"));
    }
    header.push_str(",stage_cost");
    writeln!(w, "{header}").map_err(io_err)?;

    let horizon = traj.horizon();
    for k in 0..=horizon {
        let x = &traj.states[k];
        let mode = traj.schedule[k.min(horizon - 1)];
        let mut row = format!("{},{}", k as f64 * traj.dt, mode);
        for i in 0..n {
            row.push_str(&format!(",{}", x[i]));
        }
        for i in 0..n {
            row.push_str(&format!(",{}", x[n + i] * traj.nominal_freq_hz));
        }
        for i in 0..n {
            let u = if k < horizon { traj.actions[k][i] } else { 0.0 };
            row.push_str(&format!(",{u}"));
        }
        row.push_str(&format!(",{}", traj.stage_costs[k]));
        writeln!(w, "{row}").map_err(io_err)?;
    }
    Ok(())
}
