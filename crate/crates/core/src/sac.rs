//! Soft actor-critic with twin critics, Polyak-averaged targets and automatic
//! entropy temperature.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goaldist::GoalState;
use crate::replay::Batch;
use crate::scoopenv::{EnvAction, EnvConfig, Observation, ACTION_DIM, OBS_DIM};
use crate::tinynn::{AdamState, GaussianPolicyHead, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub initial_alpha: f64,
    pub target_entropy: f64,
    /// Environment steps of uniform-random actions before learning starts.
    pub warmup_steps: usize,
    /// Gradient updates per environment step once warm.
    pub updates_per_step: usize,
    /// Re-append the achieved goal to the policy input.
    pub include_achieved: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_alpha: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 128,
            initial_alpha: 1.0,
            target_entropy: -(ACTION_DIM as f64),
            warmup_steps: 1000,
            updates_per_step: 1,
            include_achieved: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("batch size and hidden widths must be positive".into()));
        }
        if self.initial_alpha.is_nan() || self.initial_alpha <= 0.0 {
            return Err(Error::InvalidConfig("initial_alpha must be positive".into()));
        }
        for lr in [self.lr_actor, self.lr_critic, self.lr_alpha] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig("learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Fixed affine map `(x − offset) / scale` applied to raw policy inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Centers and scales each input feature by its physical range.
    pub fn for_env(cfg: &EnvConfig, include_achieved: bool) -> Self {
        let lo = cfg.workspace.lower();
        let hi = cfg.workspace.upper();
        let mid = |i: usize| 0.5 * (lo[i] + hi[i]);
        let half = |i: usize| (0.5 * (hi[i] - lo[i])).max(1e-6);
        let [h_min, h_max] = cfg.waterline_range;
        let mut offset = vec![mid(0), mid(1), 0.0, 0.0, 0.0, 0.0, 0.5, 0.5 * (h_min + h_max)];
        let mut scale = vec![
            half(0),
            half(1),
            cfg.theta_limit,
            cfg.v_max,
            cfg.v_max,
            cfg.omega_max,
            0.5,
            (0.5 * (h_max - h_min)).max(0.01),
        ];
        let goal_offset = [mid(0), mid(1), 0.5];
        let goal_scale = [half(0), half(1), 0.5];
        offset.extend(goal_offset);
        scale.extend(goal_scale);
        if include_achieved {
            offset.extend(goal_offset);
            scale.extend(goal_scale);
        }
        Self { offset, scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, o), s) in x.iter_mut().zip(&self.offset).zip(&self.scale) {
            *v = (*v - o) / s;
        }
    }

    pub fn apply_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for ((v, o), s) in row.iter_mut().zip(&self.offset).zip(&self.scale) {
                *v = (*v - o) / s;
            }
        }
    }
}

/// Raw (un-normalized) policy input `obs ‖ desired [‖ achieved]`.
pub fn policy_input(obs: &Observation, desired: &GoalState, include_achieved: bool) -> Vec<f64> {
    let mut v = obs.as_slice().to_vec();
    v.extend(desired.to_vec());
    if include_achieved {
        v.extend(obs.achieved_goal().to_vec());
    }
    v
}

fn batch_input(obs: ArrayView2<'_, f64>, goals: ArrayView2<'_, f64>, include_achieved: bool) -> Array2<f64> {
    if include_achieved {
        let achieved = concatenate![Axis(1), obs.slice(s![.., 0..2]), obs.slice(s![.., 6..7])];
        concatenate![Axis(1), obs, goals, achieved]
    } else {
        concatenate![Axis(1), obs, goals]
    }
}

fn state_action(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate![Axis(1), states, actions]
}

/// Half squared error to `targets`, averaged over the batch.
pub fn critic_loss_grad(q: &Mlp, sa: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<(f64, Vec<f64>)> {
    let cache = q.forward_batch(sa)?;
    let b = targets.len() as f64;
    let pred = cache.output().column(0);
    let diff = &pred - &targets;
    let loss = 0.5 * diff.mapv(|d| d * d).sum() / b;
    let grad_out = (diff / b).insert_axis(Axis(1));
    let (g, _) = q.backward_batch(&cache, grad_out.view())?;
    Ok((loss, g))
}

/// Output of [`actor_loss_grad`].
#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub log_probs: Array1<f64>,
}

/// `mean(α·log π(a|s) − min(Q1, Q2)(s, a))` with `a` reparameterized from
/// `noise`. Critic parameters are read only.
pub fn actor_loss_grad(
    actor: &GaussianPolicyHead,
    q1: &Mlp,
    q2: &Mlp,
    states: ArrayView2<'_, f64>,
    noise: Array2<f64>,
    alpha: f64,
) -> Result<ActorLoss> {
    let sample = actor.sample_with_noise(states, noise)?;
    let sa = state_action(states, sample.actions.view());
    let c1 = q1.forward_batch(sa.view())?;
    let c2 = q2.forward_batch(sa.view())?;
    let b = states.nrows();
    let bf = b as f64;
    let mut g1 = Array2::zeros((b, 1));
    let mut g2 = Array2::zeros((b, 1));
    let mut loss = 0.0;
    for r in 0..b {
        let (v1, v2) = (c1.output()[[r, 0]], c2.output()[[r, 0]]);
        let qmin = if v1 <= v2 {
            g1[[r, 0]] = -1.0 / bf;
            v1
        } else {
            g2[[r, 0]] = -1.0 / bf;
            v2
        };
        loss += alpha * sample.log_probs[r] - qmin;
    }
    loss /= bf;
    let (_, gin1) = q1.backward_batch(&c1, g1.view())?;
    let (_, gin2) = q2.backward_batch(&c2, g2.view())?;
    let s_dim = states.ncols();
    let d_actions = &gin1.slice(s![.., s_dim..]) + &gin2.slice(s![.., s_dim..]);
    let d_logp = Array1::from_elem(b, alpha / bf);
    let grads = actor.backward_sample(&sample, d_actions.view(), d_logp.view())?;
    Ok(ActorLoss { loss, grads, log_probs: sample.log_probs })
}

/// `−log α · mean(log π + target_entropy)` and its derivative in `log α`.
pub fn temperature_loss_grad(log_alpha: f64, log_probs: ArrayView1<'_, f64>, target_entropy: f64) -> (f64, f64) {
    let m = log_probs.mean().unwrap_or(0.0) + target_entropy;
    (-log_alpha * m, -m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    pub config: SacConfig,
    pub normalizer: InputNormalizer,
    pub actor: GaussianPolicyHead,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    pub actor_opt: AdamState,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    pub alpha_opt: AdamState,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(config: SacConfig, normalizer: InputNormalizer, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let in_dim = normalizer.dim();
        let expected = OBS_DIM + 3 + if config.include_achieved { 3 } else { 0 };
        if in_dim != expected {
            return Err(Error::DimensionMismatch { expected, got: in_dim });
        }
        let actor = GaussianPolicyHead::init(in_dim, &config.hidden, ACTION_DIM, rng)?;
        let mut q_sizes = vec![in_dim + ACTION_DIM];
        q_sizes.extend_from_slice(&config.hidden);
        q_sizes.push(1);
        let q1 = Mlp::init(&q_sizes, 1e-3, rng)?;
        let q2 = Mlp::init(&q_sizes, 1e-3, rng)?;
        let actor_opt = AdamState::new(actor.net.n_params(), config.lr_actor);
        let q1_opt = AdamState::new(q1.n_params(), config.lr_critic);
        let q2_opt = AdamState::new(q2.n_params(), config.lr_critic);
        let alpha_opt = AdamState::new(1, config.lr_alpha);
        Ok(Self {
            log_alpha: config.initial_alpha.ln(),
            config,
            normalizer,
            actor,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            actor_opt,
            q1_opt,
            q2_opt,
            alpha_opt,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn input_dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Raw policy input for one step, honoring `include_achieved`.
    pub fn input_for(&self, obs: &Observation, desired: &GoalState) -> Vec<f64> {
        policy_input(obs, desired, self.config.include_achieved)
    }

    /// Normalized network inputs for a batch of observations and goals.
    pub fn batch_states(&self, obs: ArrayView2<'_, f64>, goals: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut x = batch_input(obs, goals, self.config.include_achieved);
        self.normalizer.apply_rows(&mut x);
        x
    }

    /// Squashed-Gaussian action for a raw policy input.
    pub fn act<R: Rng + ?Sized>(&self, input: &[f64], rng: &mut R, deterministic: bool) -> Result<EnvAction> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let mut x = input.to_vec();
        self.normalizer.apply(&mut x);
        let (a, _) = crate::tinynn::sample_squashed_gaussian(&self.actor, &x, rng, deterministic)?;
        let mut out = [0.0; ACTION_DIM];
        out.copy_from_slice(&a);
        Ok(EnvAction(out))
    }

    /// Mean action squashed through `tanh`.
    pub fn act_deterministic(&self, input: &[f64]) -> Result<EnvAction> {
        self.act(input, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0), true)
    }

    /// Bootstrapped soft targets `r + γ(1−d)(min Q̄(s′, a′) − α log π(a′|s′))`.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<Array1<f64>> {
        let next = self.batch_states(batch.next_obs.view(), batch.goals.view());
        let sample = self.actor.sample_batch(next.view(), rng)?;
        let sa = state_action(next.view(), sample.actions.view());
        let t1 = self.q1_target.predict_batch(sa.view())?;
        let t2 = self.q2_target.predict_batch(sa.view())?;
        let alpha = self.alpha();
        let gamma = self.config.gamma;
        let y = Array1::from_shape_fn(batch.len(), |r| {
            let soft = t1[[r, 0]].min(t2[[r, 0]]) - alpha * sample.log_probs[r];
            batch.rewards[r] + gamma * (1.0 - batch.dones[r]) * soft
        });
        Ok(y)
    }

    /// Regresses both critics onto the soft targets; returns their mean loss.
    pub fn update_critics<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let y = self.critic_targets(batch, rng)?;
        self.update_critics_towards(batch, y.view())
    }

    pub fn update_critics_towards(&mut self, batch: &Batch, targets: ArrayView1<'_, f64>) -> Result<f64> {
        let states = self.batch_states(batch.obs.view(), batch.goals.view());
        let sa = state_action(states.view(), batch.actions.view());
        let (l1, g1) = critic_loss_grad(&self.q1, sa.view(), targets)?;
        let (l2, g2) = critic_loss_grad(&self.q2, sa.view(), targets)?;
        self.q1_opt.step(self.q1.params_mut(), &g1)?;
        self.q2_opt.step(self.q2.params_mut(), &g2)?;
        Ok(0.5 * (l1 + l2))
    }

    /// One actor step; returns the loss and the log-probabilities it used.
    pub fn update_actor<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<(f64, Array1<f64>)> {
        use rand_distr::{Distribution, StandardNormal};
        let states = self.batch_states(batch.obs.view(), batch.goals.view());
        let noise = Array2::from_shape_simple_fn((states.nrows(), ACTION_DIM), || StandardNormal.sample(rng));
        let out = actor_loss_grad(&self.actor, &self.q1, &self.q2, states.view(), noise, self.alpha())?;
        self.actor_opt.step(self.actor.net.params_mut(), &out.grads)?;
        Ok((out.loss, out.log_probs))
    }

    /// Temperature step from externally supplied log-probabilities.
    pub fn update_temperature_with(&mut self, log_probs: ArrayView1<'_, f64>) -> Result<f64> {
        let (_, g) = temperature_loss_grad(self.log_alpha, log_probs, self.config.target_entropy);
        let mut p = [self.log_alpha];
        self.alpha_opt.step(&mut p, &[g])?;
        self.log_alpha = p[0];
        Ok(self.alpha())
    }

    /// Temperature step using fresh actions on the batch states.
    pub fn update_temperature<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let states = self.batch_states(batch.obs.view(), batch.goals.view());
        let sample = self.actor.sample_batch(states.view(), rng)?;
        self.update_temperature_with(sample.log_probs.view())
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        let tau = self.config.tau;
        self.q1_target.polyak_from(&self.q1, tau)?;
        self.q2_target.polyak_from(&self.q2, tau)
    }

    /// Critic, actor, temperature and target updates on one batch.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats> {
        let critic_loss = self.update_critics(batch, rng)?;
        let (actor_loss, log_probs) = self.update_actor(batch, rng)?;
        let alpha = self.update_temperature_with(log_probs.view())?;
        self.soft_update_targets()?;
        Ok(UpdateStats { critic_loss, actor_loss, alpha })
    }
}
