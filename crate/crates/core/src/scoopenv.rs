//! Planar water-scooping surrogate.
//!
//! A rectangular container moves in the vertical plane above and inside a
//! tank whose water surface is a flat heightfield. Water moves between tank
//! and container through two transfer rules (fill and spill), so the sum of
//! both volumes is conserved exactly up to rounding.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goaldist::{BoxDistribution, GoalState};

pub const OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 3;
pub const POS_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerPreset {
    Bowl,
    Bucket,
}

impl std::str::FromStr for ContainerPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bowl" => Ok(ContainerPreset::Bowl),
            "bucket" => Ok(ContainerPreset::Bucket),
            other => Err(Error::InvalidConfig(format!("unknown container preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub container_preset: ContainerPreset,
    pub tank_width: f64,
    pub tank_wall_height: f64,
    /// Reachable (x, y) region of the container base center.
    pub workspace: BoxDistribution,
    pub container_width: f64,
    /// Cross-sectional (2D) volume, m².
    pub container_capacity: f64,
    /// Base center at reset; the container starts level and at rest.
    pub spawn: [f64; 2],
    pub dt: f64,
    pub a_max: f64,
    pub alpha_max: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Tilt magnitude beyond which the container is clamped.
    pub theta_limit: f64,
    pub theta_spill: f64,
    pub c_in: f64,
    pub c_out: f64,
    pub episode_len: usize,
    pub waterline_range: [f64; 2],
    pub waterline_obs_noise_sigma: f64,
}

impl EnvConfig {
    pub fn preset(preset: ContainerPreset) -> Self {
        match preset {
            ContainerPreset::Bowl => EnvConfig {
                container_preset: preset,
                tank_width: 0.5,
                tank_wall_height: 0.2,
                workspace: BoxDistribution::new(vec![0.1, 0.0], vec![0.4, 0.45]).unwrap(),
                container_width: 0.154,
                container_capacity: 0.154 * 0.06,
                spawn: [0.25, 0.25],
                dt: 0.05,
                a_max: 1.0,
                alpha_max: 4.0,
                v_max: 0.4,
                omega_max: 2.0,
                theta_limit: std::f64::consts::FRAC_PI_2,
                theta_spill: 1.2,
                c_in: 2.0,
                c_out: 2.0,
                episode_len: 75,
                waterline_range: [0.08, 0.14],
                waterline_obs_noise_sigma: 0.002,
            },
            ContainerPreset::Bucket => EnvConfig {
                container_preset: preset,
                tank_width: 0.5,
                tank_wall_height: 0.2,
                workspace: BoxDistribution::new(vec![0.1, 0.0], vec![0.4, 0.55]).unwrap(),
                container_width: 0.117,
                container_capacity: 0.117 * 0.1,
                spawn: [0.25, 0.3],
                dt: 0.05,
                a_max: 1.0,
                alpha_max: 4.0,
                v_max: 0.4,
                omega_max: 2.0,
                theta_limit: std::f64::consts::FRAC_PI_2,
                theta_spill: 1.2,
                c_in: 2.0,
                c_out: 2.0,
                episode_len: 75,
                waterline_range: [0.12, 0.18],
                waterline_obs_noise_sigma: 0.002,
            },
        }
    }

    pub fn container_height(&self) -> f64 {
        self.container_capacity / self.container_width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tank_width", self.tank_width),
            ("tank_wall_height", self.tank_wall_height),
            ("container_width", self.container_width),
            ("container_capacity", self.container_capacity),
            ("dt", self.dt),
            ("a_max", self.a_max),
            ("alpha_max", self.alpha_max),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("theta_limit", self.theta_limit),
            ("theta_spill", self.theta_spill),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.waterline_obs_noise_sigma < 0.0 || !self.waterline_obs_noise_sigma.is_finite() {
            return Err(Error::InvalidConfig("waterline_obs_noise_sigma must be >= 0".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::InvalidConfig("episode_len must be at least 1".into()));
        }
        if self.workspace.dim() != POS_DIM {
            return Err(Error::DimensionMismatch { expected: POS_DIM, got: self.workspace.dim() });
        }
        let [h_min, h_max] = self.waterline_range;
        if !(h_min > 0.0 && h_min <= h_max && h_max <= self.tank_wall_height) {
            return Err(Error::InvalidConfig(format!(
                "waterline range [{h_min}, {h_max}] must satisfy 0 < h_min <= h_max <= tank_wall_height"
            )));
        }
        if !self.workspace.contains(&self.spawn) {
            return Err(Error::InvalidConfig("spawn pose outside workspace".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub fill_volume: f64,
    pub tank_volume: f64,
    pub step_count: usize,
    /// Container capacity, carried so the state can project itself.
    pub capacity: f64,
}

impl EnvState {
    pub fn fill_fraction(&self) -> f64 {
        (self.fill_volume / self.capacity).clamp(0.0, 1.0)
    }

    pub fn total_volume(&self) -> f64 {
        self.fill_volume + self.tank_volume
    }
}

/// `[x, y, theta, vx, vy, omega, fill_fraction, observed_waterline]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The achieved goal as seen through the observation.
    pub fn achieved_goal(&self) -> GoalState {
        GoalState { position: vec![self.0[0], self.0[1]], amount: self.0[6] }
    }
}

/// Normalized accelerations `[ax, ay, alpha]`, each clamped to `[-1, 1]` on use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvAction(pub [f64; ACTION_DIM]);

impl EnvAction {
    pub fn zero() -> Self {
        EnvAction([0.0; ACTION_DIM])
    }

    pub fn clamped(&self) -> [f64; ACTION_DIM] {
        self.0.map(|a| a.clamp(-1.0, 1.0))
    }
}

pub fn waterline(state: &EnvState, config: &EnvConfig) -> f64 {
    state.tank_volume / config.tank_width
}

pub fn achieved_goal(state: &EnvState) -> GoalState {
    GoalState { position: vec![state.x, state.y], amount: state.fill_fraction() }
}

/// Lowest point of the container rim for a base center at `(x, y)` tilted by `theta`.
pub fn rim_lowest_y(y: f64, theta: f64, config: &EnvConfig) -> f64 {
    y + config.container_height() * theta.cos() - 0.5 * config.container_width * theta.sin().abs()
}

/// Initial state: container at rest at the spawn pose, waterline drawn uniformly.
pub fn initial_state<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Result<EnvState> {
    config.validate()?;
    let [h_min, h_max] = config.waterline_range;
    let u: f64 = rng.random();
    let level = if h_min == h_max { h_min } else { h_min + u * (h_max - h_min) };
    Ok(EnvState {
        x: config.spawn[0],
        y: config.spawn[1],
        theta: 0.0,
        vx: 0.0,
        vy: 0.0,
        omega: 0.0,
        fill_volume: 0.0,
        tank_volume: level * config.tank_width,
        step_count: 0,
        capacity: config.container_capacity,
    })
}

/// One deterministic transition of the physical state.
///
/// Returns the new state and whether the episode has reached its length.
pub fn transition(state: &EnvState, action: &EnvAction, config: &EnvConfig) -> Result<(EnvState, bool)> {
    if action.0.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action"));
    }
    let fields = [state.x, state.y, state.theta, state.vx, state.vy, state.omega, state.fill_volume, state.tank_volume];
    if fields.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    let [ax, ay, aa] = action.clamped();
    let dt = config.dt;
    let mut s = state.clone();

    s.vx = (s.vx + ax * config.a_max * dt).clamp(-config.v_max, config.v_max);
    s.vy = (s.vy + ay * config.a_max * dt).clamp(-config.v_max, config.v_max);
    s.omega = (s.omega + aa * config.alpha_max * dt).clamp(-config.omega_max, config.omega_max);

    let lo = config.workspace.lower();
    let hi = config.workspace.upper();
    s.x += s.vx * dt;
    if s.x < lo[0] || s.x > hi[0] {
        s.x = s.x.clamp(lo[0], hi[0]);
        s.vx = 0.0;
    }
    s.y += s.vy * dt;
    if s.y < lo[1] || s.y > hi[1] {
        s.y = s.y.clamp(lo[1], hi[1]);
        s.vy = 0.0;
    }
    s.theta += s.omega * dt;
    if s.theta.abs() > config.theta_limit {
        s.theta = s.theta.clamp(-config.theta_limit, config.theta_limit);
        s.omega = 0.0;
    }

    let capacity = config.container_capacity;
    // Fill: an upright-enough container whose rim dips below the surface takes in water.
    if s.theta.abs() < config.theta_spill {
        let level = waterline(&s, config);
        let rim = rim_lowest_y(s.y, s.theta, config);
        if rim < level {
            let inflow = config.c_in * (level - rim) * dt * config.container_width;
            let delta = inflow.min(capacity - s.fill_volume).min(s.tank_volume).max(0.0);
            s.fill_volume += delta;
            s.tank_volume -= delta;
        }
    }
    // Spill: tilting shrinks the usable capacity and the excess drains back.
    let tilt = s.theta.abs() / config.theta_spill;
    let c_eff = capacity * (1.0 - tilt).clamp(0.0, 1.0);
    if s.fill_volume > c_eff {
        let excess = s.fill_volume - c_eff;
        let dump = if s.theta.abs() >= config.theta_spill { excess } else { 0.0 };
        let out = (config.c_out * excess * dt + dump).min(s.fill_volume);
        s.fill_volume -= out;
        s.tank_volume += out;
    }
    s.fill_volume = s.fill_volume.clamp(0.0, capacity);
    s.tank_volume = s.tank_volume.max(0.0);

    s.step_count += 1;
    let done = s.step_count == config.episode_len;
    Ok((s, done))
}

/// Stateful environment: physical state plus the observation-noise stream.
#[derive(Clone, Debug)]
pub struct ScoopEnv {
    config: EnvConfig,
    state: EnvState,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

/// Result of a single [`ScoopEnv::step`].
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Observation,
    pub achieved: GoalState,
    pub done: bool,
}

impl ScoopEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = initial_state(&config, &mut rng)?;
        let noise = if config.waterline_obs_noise_sigma > 0.0 {
            Some(Normal::new(0.0, config.waterline_obs_noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?)
        } else {
            None
        };
        Ok(Self { config, state, rng, noise })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Draws a fresh initial water state and returns its observation.
    pub fn reset(&mut self) -> Observation {
        self.state = initial_state(&self.config, &mut self.rng).expect("config validated at construction");
        self.observe()
    }

    pub fn step(&mut self, action: &EnvAction) -> Result<StepOutcome> {
        let (next, done) = transition(&self.state, action, &self.config)?;
        self.state = next;
        Ok(StepOutcome { observation: self.observe(), achieved: achieved_goal(&self.state), done })
    }

    pub fn waterline(&self) -> f64 {
        waterline(&self.state, &self.config)
    }

    fn observe(&mut self) -> Observation {
        let s = &self.state;
        let noise = self.noise.map_or(0.0, |n| n.sample(&mut self.rng));
        Observation([
            s.x,
            s.y,
            s.theta,
            s.vx,
            s.vy,
            s.omega,
            s.fill_fraction(),
            waterline(s, &self.config) + noise,
        ])
    }
}

/// One row of a per-step trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub fill_fraction: f64,
    pub waterline: f64,
    pub reward: f64,
}

pub const TRACE_HEADER: &str = "step,x,y,theta,fill_fraction,waterline,reward";

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{},{},{},{}", r.step, r.x, r.y, r.theta, r.fill_fraction, r.waterline, r.reward)?;
    }
    Ok(())
}
