//! Closed-loop buffer control: decides each step whether to push, hold,
//! spill or reload, and resizes the raw buffer.

mod engine;
pub mod spill;

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edge_table::EdgeTable;
use crate::metrics::{density, velocity_and_slope, DiversityTracker, PerfSample, DEFAULT_SLOPE_WINDOW};
use crate::predictor::ModelSet;

pub use engine::{run_loop, EngineError, RunOptions, RunReport, ShedRecord};
pub use spill::{SpillError, SpillQueue};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("controller: {0}")]
    Invalid(String),
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// When false every ready bucket is pushed as is and β never changes.
    #[serde(rename = "@enabled", default = "default_true")]
    pub enabled: bool,
    #[serde(rename = "@cpu_min")]
    pub cpu_min: f64,
    #[serde(rename = "@cpu_max")]
    pub cpu_max: f64,
    #[serde(rename = "@beta_min")]
    pub beta_min: u64,
    #[serde(rename = "@beta_max")]
    pub beta_max: u64,
    /// Starting β; clamped into the bounds.
    #[serde(rename = "@beta_initial")]
    pub beta_initial: u64,
    #[serde(rename = "@theta1")]
    pub theta1: f64,
    #[serde(rename = "@theta2")]
    pub theta2: f64,
    #[serde(rename = "@sleep_quantum_s")]
    pub sleep_quantum_s: f64,
    #[serde(rename = "@flush_interval_s")]
    pub flush_interval_s: f64,
    #[serde(rename = "@diversity_window")]
    pub k: usize,
    #[serde(rename = "@slope_window")]
    pub slope_window: usize,
    /// Buckets between model refits; 0 disables refitting.
    #[serde(rename = "@refit_every")]
    pub refit_every: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cpu_min: 20.0,
            cpu_max: 55.0,
            beta_min: 500,
            beta_max: 50_000,
            beta_initial: 500,
            theta1: 0.1,
            theta2: 0.5,
            sleep_quantum_s: 1.0,
            flush_interval_s: 2.0,
            k: 5,
            slope_window: DEFAULT_SLOPE_WINDOW,
            refit_every: 60,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Vec<ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |m: String| errs.push(ConfigError::Invalid(m));
        if !(0.0 <= self.cpu_min && self.cpu_min < self.cpu_max && self.cpu_max <= 100.0) {
            bad(format!("need 0 <= cpu_min < cpu_max <= 100, got {} and {}", self.cpu_min, self.cpu_max));
        }
        if !(0 < self.beta_min && self.beta_min < self.beta_max) {
            bad(format!("need 0 < beta_min < beta_max, got {} and {}", self.beta_min, self.beta_max));
        }
        for (name, v) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if !(v > 0.0 && v < 1.0) {
                bad(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        if !(self.sleep_quantum_s > 0.0) {
            bad(format!("sleep_quantum_s must be positive, got {}", self.sleep_quantum_s));
        }
        if !(self.flush_interval_s > 0.0) {
            bad(format!("flush_interval_s must be positive, got {}", self.flush_interval_s));
        }
        if self.k == 0 {
            bad("diversity_window must be at least 1".into());
        }
        if self.slope_window < 3 {
            bad(format!("slope_window must be at least 3, got {}", self.slope_window));
        }
        errs
    }

    /// Largest β allowed: `β_max`, or θ1 of available memory in records if
    /// that is smaller, but never below `β_min`.
    pub fn beta_cap(&self, mem_available: u64, avg_record_bytes: f64) -> u64 {
        let by_mem = if avg_record_bytes > 0.0 {
            (self.theta1 * mem_available as f64 / avg_record_bytes) as u64
        } else {
            u64::MAX
        };
        self.beta_max.min(by_mem).max(self.beta_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    GrowBuffer(u64),
    ShrinkBuffer(u64),
    /// Send the staged bucket.
    Push,
    /// Write the staged bucket to the spill queue.
    Throttle,
    /// Take up to this many spilled records and push them.
    Reload(u64),
    Sleep(f64),
    /// Nothing to do this step.
    Idle,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::GrowBuffer(_) => "grow",
            Action::ShrinkBuffer(_) => "shrink",
            Action::Push => "push",
            Action::Throttle => "throttle",
            Action::Reload(_) => "reload",
            Action::Sleep(_) => "sleep",
            Action::Idle => "idle",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Joins action names with `+`, e.g. `sleep+grow+throttle`.
pub fn action_label(actions: &[Action]) -> String {
    actions.iter().map(Action::name).collect::<Vec<_>>().join("+")
}

/// Everything the controller mutates between steps.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub beta: u64,
    pub last_mu_exp: f64,
    pub last_actions: Vec<Action>,
    cpu_samples: VecDeque<f64>,
    slope_window: usize,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            beta: cfg.beta_initial.clamp(cfg.beta_min, cfg.beta_max),
            last_mu_exp: 0.0,
            last_actions: Vec::new(),
            cpu_samples: VecDeque::new(),
            slope_window: cfg.slope_window,
        }
    }

    /// Records a CPU reading for slope estimation.
    pub fn observe_cpu(&mut self, mu: f64) {
        self.cpu_samples.push_back(mu);
        while self.cpu_samples.len() > self.slope_window {
            self.cpu_samples.pop_front();
        }
    }

    pub fn cpu_slope(&self) -> Option<f64> {
        let samples: Vec<f64> = self.cpu_samples.iter().copied().collect();
        velocity_and_slope(&samples, self.slope_window).slope
    }
}

/// What the engine knows when asking for a decision.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub perf: PerfSample,
    /// Staging table of the pending bucket.
    pub table: &'a EdgeTable,
    pub pending_records: u64,
    /// Buffer full, flush timer expired, or stream over.
    pub bucket_ready: bool,
    pub spill_depth: u64,
    pub avg_record_bytes: f64,
}

/// The controller's estimates for one step, plus the chosen actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub actions: Vec<Action>,
    pub rho: f64,
    pub d: f64,
    /// Predicted statements for the pending bucket.
    pub beta_exp: f64,
    pub mu_exp: f64,
    pub slope: f64,
}

impl Decision {
    pub fn has(&self, name: &str) -> bool {
        self.actions.iter().any(|a| a.name() == name)
    }

    pub fn reload_budget(&self) -> Option<u64> {
        self.actions.iter().find_map(|a| match a {
            Action::Reload(n) => Some(*n),
            _ => None,
        })
    }
}

/// Records the CPU model allows on top of `statements_already` before the
/// prediction reaches `cpu_max`.
fn reload_budget(
    models: &ModelSet,
    cfg: &ControllerConfig,
    mu_prev: f64,
    statements_already: f64,
    per_record: f64,
    cap: u64,
) -> u64 {
    let Some(limit) = models.cpu.max_load_below(cfg.cpu_max, mu_prev) else {
        return 0;
    };
    let room = (limit - statements_already).max(0.0);
    let records = room / per_record.max(0.05);
    if records.is_finite() {
        (records as u64).min(cap)
    } else {
        cap
    }
}

/// One pass of the control loop.
pub fn control_step(
    input: StepInput<'_>,
    diversity: &DiversityTracker,
    cfg: &ControllerConfig,
    state: &mut ControllerState,
    models: &ModelSet,
) -> Decision {
    let rho = diversity.peek_ratio(input.table);
    let d = density(input.table);
    let e = input.table.effective_size() as f64;
    let mu_prev = input.perf.cpu_user;
    let mu_exp = models.cpu.predict(e, mu_prev);
    let slope = state.cpu_slope().unwrap_or(0.0);
    let per_record = models.buffer.predict(rho, d);
    let beta_exp = per_record * input.pending_records as f64;
    let cap = cfg.beta_cap(input.perf.mem_available, input.avg_record_bytes);

    let mut actions = Vec::new();
    if !cfg.enabled {
        actions.push(if input.bucket_ready { Action::Push } else { Action::Idle });
    } else if input.bucket_ready {
        if mu_exp >= cfg.cpu_max {
            actions.push(Action::Sleep(cfg.sleep_quantum_s));
            let grown = state.beta + (cfg.theta2 * state.beta as f64) as u64;
            if grown <= cap {
                state.beta = grown;
                actions.push(Action::GrowBuffer(grown));
            }
            let rising = mu_exp >= cfg.theta2 * cfg.cpu_max && slope >= 0.0;
            let overflow = input.pending_records >= cap;
            if rising || overflow {
                actions.push(Action::Throttle);
            }
        } else {
            actions.push(Action::Push);
            let shrunk = state.beta.saturating_sub((cfg.theta2 * state.beta as f64) as u64);
            if shrunk >= cfg.beta_min {
                state.beta = shrunk;
                actions.push(Action::ShrinkBuffer(shrunk));
            }
            if mu_exp <= cfg.theta2 * cfg.cpu_max && input.spill_depth > 0 {
                let per = if per_record > 0.0 { per_record } else { 1.0 };
                let n = reload_budget(models, cfg, mu_prev, e, per, cap).min(input.spill_depth);
                if n > 0 {
                    actions.push(Action::Reload(n));
                }
            }
        }
    } else {
        let idle_exp = models.cpu.predict(1.0, mu_prev);
        if input.spill_depth > 0 && idle_exp <= cfg.theta2 * cfg.cpu_max {
            let per = if per_record > 0.0 { per_record } else { 1.0 };
            let n = reload_budget(models, cfg, mu_prev, 0.0, per, cap).min(input.spill_depth);
            if n > 0 {
                actions.push(Action::Reload(n));
            }
        }
        if actions.is_empty() {
            actions.push(Action::Idle);
        }
    }
    state.last_mu_exp = mu_exp;
    state.last_actions = actions.clone();
    Decision { actions, rho, d, beta_exp, mu_exp, slope }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{NodeRef, Props};
    use crate::predictor::{CpuBasis, CpuModel};

    /// Predicts exactly `mu` regardless of load or history.
    fn flat(mu: f64) -> ModelSet {
        ModelSet { cpu: CpuModel { a: 0.0, b: 0.0, c: mu, basis: CpuBasis::default() }, ..ModelSet::default() }
    }

    fn small_table() -> EdgeTable {
        let mut t = EdgeTable::new();
        t.insert_edge(&NodeRef::new("a", "1"), &NodeRef::new("b", "2"), "L", &Props::new());
        t
    }

    fn input(t: &EdgeTable, ready: bool, spill: u64) -> StepInput<'_> {
        StepInput {
            perf: PerfSample { cpu_user: 20.0, ..PerfSample::idle(0) },
            table: t,
            pending_records: 10,
            bucket_ready: ready,
            spill_depth: spill,
            avg_record_bytes: 1000.0,
        }
    }

    fn cfg() -> ControllerConfig {
        ControllerConfig { beta_initial: 4000, ..ControllerConfig::default() }
    }

    #[test]
    fn default_config_is_valid() {
        assert!(ControllerConfig::default().validate().is_empty());
        let bad = ControllerConfig { cpu_min: 60.0, theta1: 1.5, beta_min: 0, ..ControllerConfig::default() };
        assert_eq!(bad.validate().len(), 3);
    }

    #[test]
    fn comfortable_cpu_pushes_and_shrinks() {
        let t = small_table();
        let c = cfg();
        let mut s = ControllerState::new(&c);
        let dec = control_step(input(&t, true, 0), &DiversityTracker::new(5), &c, &mut s, &flat(30.0));
        assert_eq!(dec.actions, vec![Action::Push, Action::ShrinkBuffer(2000)]);
        assert_eq!(action_label(&dec.actions), "push+shrink");
    }

    #[test]
    fn shrink_stops_at_beta_min() {
        let t = small_table();
        let c = ControllerConfig::default();
        let mut s = ControllerState::new(&c);
        let dec = control_step(input(&t, true, 0), &DiversityTracker::new(5), &c, &mut s, &flat(30.0));
        assert_eq!(dec.actions, vec![Action::Push]);
        assert_eq!(s.beta, 500);
    }

    #[test]
    fn hot_and_rising_sleeps_grows_throttles() {
        let t = small_table();
        let c = cfg();
        let mut s = ControllerState::new(&c);
        for mu in [40.0, 45.0, 50.0, 55.0] {
            s.observe_cpu(mu);
        }
        let dec = control_step(input(&t, true, 0), &DiversityTracker::new(5), &c, &mut s, &flat(60.0));
        assert_eq!(dec.actions, vec![Action::Sleep(1.0), Action::GrowBuffer(6000), Action::Throttle]);
        assert_eq!(action_label(&dec.actions), "sleep+grow+throttle");
        assert!(dec.slope > 0.0);
    }

    #[test]
    fn hot_but_falling_holds_bucket() {
        let t = small_table();
        let c = cfg();
        let mut s = ControllerState::new(&c);
        for mu in [70.0, 65.0, 60.0] {
            s.observe_cpu(mu);
        }
        let dec = control_step(input(&t, true, 0), &DiversityTracker::new(5), &c, &mut s, &flat(60.0));
        assert_eq!(dec.actions, vec![Action::Sleep(1.0), Action::GrowBuffer(6000)]);
    }

    #[test]
    fn growth_respects_cap() {
        let t = small_table();
        let c = ControllerConfig { beta_initial: 40_000, ..cfg() };
        let mut s = ControllerState::new(&c);
        let dec = control_step(input(&t, true, 0), &DiversityTracker::new(5), &c, &mut s, &flat(60.0));
        assert!(!dec.has("grow"));
        assert_eq!(s.beta, 40_000);
        // A tight memory budget lowers the cap below β_max.
        let mut tight = input(&t, true, 0);
        tight.perf.mem_available = 10_000_000;
        assert_eq!(c.beta_cap(tight.perf.mem_available, 1000.0), 1000);
    }

    #[test]
    fn overflow_forces_throttle() {
        let t = small_table();
        let c = cfg();
        let mut s = ControllerState::new(&c);
        for mu in [70.0, 65.0, 60.0] {
            s.observe_cpu(mu);
        }
        let mut inp = input(&t, true, 0);
        inp.pending_records = 50_000;
        let dec = control_step(inp, &DiversityTracker::new(5), &c, &mut s, &flat(60.0));
        assert!(dec.has("throttle"));
    }

    #[test]
    fn low_cpu_with_spill_reloads() {
        // μ_exp = 10 with θ2 = 0.5: below half of cpu_max and of cpu_min = 30.
        let t = small_table();
        let c = ControllerConfig { cpu_min: 30.0, ..cfg() };
        let mut s = ControllerState::new(&c);
        let dec = control_step(input(&t, true, 100), &DiversityTracker::new(5), &c, &mut s, &flat(10.0));
        assert_eq!(dec.actions[0], Action::Push);
        assert!(dec.reload_budget().is_some_and(|n| n > 0 && n <= 100));
        let idle = control_step(input(&t, false, 100), &DiversityTracker::new(5), &c, &mut s, &flat(10.0));
        assert!(idle.reload_budget().is_some());
        let none = control_step(input(&t, false, 0), &DiversityTracker::new(5), &c, &mut s, &flat(10.0));
        assert_eq!(none.actions, vec![Action::Idle]);
    }

    #[test]
    fn warm_cpu_does_not_reload() {
        let t = small_table();
        let c = cfg();
        let mut s = ControllerState::new(&c);
        let dec = control_step(input(&t, true, 100), &DiversityTracker::new(5), &c, &mut s, &flat(40.0));
        assert_eq!(dec.reload_budget(), None);
        let idle = control_step(input(&t, false, 100), &DiversityTracker::new(5), &c, &mut s, &flat(40.0));
        assert_eq!(idle.actions, vec![Action::Idle]);
    }

    #[test]
    fn reload_budget_follows_cpu_model() {
        let models =
            ModelSet { cpu: CpuModel { a: 0.0, b: 10.0, c: 5.0, basis: CpuBasis::default() }, ..ModelSet::default() };
        let c = ControllerConfig::default();
        // 5 + 10·ln(S) < 55  =>  S < e^5 ≈ 148 statements, at 2 statements per record.
        let n = reload_budget(&models, &c, 0.0, 0.0, 2.0, 1_000_000);
        assert_eq!(n, (5f64.exp() / 2.0) as u64);
        assert_eq!(reload_budget(&models, &c, 0.0, 200.0, 2.0, 1_000_000), 0);
    }

    #[test]
    fn uncontrolled_mode_always_pushes() {
        let t = small_table();
        let c = ControllerConfig { enabled: false, ..cfg() };
        let mut s = ControllerState::new(&c);
        let dec = control_step(input(&t, true, 5), &DiversityTracker::new(5), &c, &mut s, &flat(99.0));
        assert_eq!(dec.actions, vec![Action::Push]);
        assert_eq!(s.beta, 4000);
    }

    #[test]
    fn beta_stays_in_bounds() {
        let t = small_table();
        let c = cfg();
        let mut s = ControllerState::new(&c);
        for step in 0..200 {
            let mu = if (step / 7) % 2 == 0 { 80.0 } else { 10.0 };
            s.observe_cpu(mu);
            control_step(input(&t, true, 3), &DiversityTracker::new(5), &c, &mut s, &flat(mu));
            assert!((c.beta_min..=c.beta_max).contains(&s.beta));
        }
    }
}
