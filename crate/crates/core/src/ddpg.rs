//! Deterministic-policy-gradient adaptation on a replay buffer.
//!
//! The critic regresses the one-step TD target
//! `y = r + gamma * (1 - done) * Q'(s', mu'(s'))` with mean squared error; the
//! actor ascends the batch mean of `Q(s, mu(s))` through the chain rule
//! `dQ/da * da/dtheta`. Exploration is purely in parameter space: every
//! trajectory is produced by one fixed perturbed actor.

use std::collections::VecDeque;

use rand::Rng;

use crate::env::{PointMass, Task, Trajectory};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{actor_forward, critic_forward, trace, FlatParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// FIFO buffer; the oldest transition is evicted once `capacity` is reached.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    transitions: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid_arg("replay capacity must be >= 1"));
        }
        Ok(Self {
            transitions: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.transitions.len() == self.capacity {
            self.transitions.pop_front();
        }
        self.transitions.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.transitions.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    /// Uniform sample with replacement.
    fn sample_batch<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Result<Vec<&'a Transition>> {
        if n == 0 {
            return Err(invalid_arg("batch_size must be >= 1"));
        }
        if self.len() < n {
            return Err(Error::InvalidState(format!(
                "buffer holds {} transitions, batch needs {n}",
                self.len()
            )));
        }
        Ok((0..n)
            .map(|_| &self.transitions[rng.random_range(0..self.len())])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub batch_size: usize,
    pub grad_steps_per_adapt: usize,
    pub use_target_nets: bool,
    pub tau: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            batch_size: 64,
            grad_steps_per_adapt: 1,
            use_target_nets: false,
            tau: 0.01,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid_arg(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.critic_lr >= 0.0 && self.actor_lr >= 0.0) {
            return Err(invalid_arg("adaptation learning rates must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid_arg("batch_size must be >= 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid_arg(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Slowly tracking copies used for bootstrapped targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNets {
    pub actor: FlatParams,
    pub critic: FlatParams,
}

impl TargetNets {
    pub fn new(actor: &FlatParams, critic: &FlatParams) -> Self {
        Self {
            actor: actor.clone(),
            critic: critic.clone(),
        }
    }

    /// `target <- tau * online + (1 - tau) * target`.
    pub fn soft_update(&mut self, actor: &FlatParams, critic: &FlatParams, tau: f64) {
        fn blend(t: &FlatParams, o: &FlatParams, tau: f64) -> FlatParams {
            let v = t
                .values()
                .iter()
                .zip(o.values())
                .map(|(t, o)| tau * o + (1.0 - tau) * t)
                .collect();
            FlatParams::from_raw(t.layout().clone(), v)
        }
        self.actor = blend(&self.actor, actor, tau);
        self.critic = blend(&self.critic, critic, tau);
    }
}

fn finite_or_fail(p: FlatParams, what: &str) -> Result<FlatParams> {
    if p.is_finite() {
        Ok(p)
    } else {
        Err(Error::NumericFailure(format!("{what} produced non-finite parameters")))
    }
}

/// Fills a fresh buffer with `trajectories_per_actor` episodes from each actor.
pub fn collect_exploration_rollouts(
    env: &PointMass,
    task: &Task,
    actors: &[FlatParams],
    trajectories_per_actor: usize,
    horizon: usize,
) -> Result<ReplayBuffer> {
    if actors.is_empty() {
        return Err(invalid_arg("need at least one exploration actor"));
    }
    if trajectories_per_actor == 0 {
        return Err(invalid_arg("trajectories_per_actor must be >= 1"));
    }
    let mut buffer = ReplayBuffer::new(actors.len() * trajectories_per_actor * horizon.max(1))?;
    for actor in actors {
        for _ in 0..trajectories_per_actor {
            let traj = env.rollout(actor, task, horizon)?;
            buffer.extend(traj.transitions);
        }
    }
    Ok(buffer)
}

/// Mean squared TD error of `critic` on `batch`.
pub fn td_loss(
    critic: &FlatParams,
    actor: &FlatParams,
    targets: Option<&TargetNets>,
    batch: &[&Transition],
    gamma: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for t in batch {
        let y = td_target(critic, actor, targets, t, gamma)?;
        let q = critic_forward(critic, &t.obs, &t.action)?;
        loss += (q - y) * (q - y);
    }
    Ok(loss / batch.len() as f64)
}

fn td_target(
    critic: &FlatParams,
    actor: &FlatParams,
    targets: Option<&TargetNets>,
    t: &Transition,
    gamma: f64,
) -> Result<f64> {
    if t.done || gamma == 0.0 {
        return Ok(t.reward);
    }
    let (ta, tc) = match targets {
        Some(tn) => (&tn.actor, &tn.critic),
        None => (actor, critic),
    };
    let next_a = actor_forward(ta, &t.next_obs)?;
    Ok(t.reward + gamma * critic_forward(tc, &t.next_obs, &next_a)?)
}

/// Gradient of the batch TD loss with respect to the critic parameters.
pub fn critic_gradient(
    critic: &FlatParams,
    actor: &FlatParams,
    targets: Option<&TargetNets>,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut grads = vec![0.0; critic.len()];
    let scale = 2.0 / batch.len() as f64;
    for t in batch {
        let y = td_target(critic, actor, targets, t, gamma)?;
        let tr = trace(critic, &t.obs, Some(&t.action))?;
        let delta = tr.output()[0] - y;
        tr.backward_into(critic, &[scale * delta], &mut grads)?;
    }
    Ok(grads)
}

/// Ascent direction of the batch mean of `Q(s, mu(s))` for the actor.
pub fn actor_gradient(actor: &FlatParams, critic: &FlatParams, batch: &[&Transition]) -> Result<Vec<f64>> {
    let mut grads = vec![0.0; actor.len()];
    let mut critic_scratch = vec![0.0; critic.len()];
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let at = trace(actor, &t.obs, None)?;
        let ct = trace(critic, &t.obs, Some(at.output()))?;
        let dq_da = ct.backward_into(critic, &[scale], &mut critic_scratch)?.action;
        at.backward_into(actor, &dq_da, &mut grads)?;
    }
    Ok(grads)
}

/// One SGD step on the TD loss. The target uses `targets` when given,
/// otherwise the current `critic` and `actor`.
pub fn critic_update<R: Rng + ?Sized>(
    critic: &FlatParams,
    buffer: &ReplayBuffer,
    actor: &FlatParams,
    targets: Option<&TargetNets>,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<FlatParams> {
    let batch = buffer.sample_batch(cfg.batch_size, rng)?;
    if cfg.critic_lr == 0.0 {
        return Ok(critic.clone());
    }
    let g = critic_gradient(critic, actor, targets, &batch, cfg.gamma)?;
    finite_or_fail(critic.axpy(-cfg.critic_lr, &g)?, "critic update")
}

/// One deterministic-policy-gradient ascent step; the critic is read only.
pub fn actor_update<R: Rng + ?Sized>(
    actor: &FlatParams,
    critic: &FlatParams,
    buffer: &ReplayBuffer,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<FlatParams> {
    let batch = buffer.sample_batch(cfg.batch_size, rng)?;
    if cfg.actor_lr == 0.0 {
        return Ok(actor.clone());
    }
    let g = actor_gradient(actor, critic, &batch)?;
    finite_or_fail(actor.axpy(cfg.actor_lr, &g)?, "actor update")
}

/// `grad_steps_per_adapt` rounds of critic-then-actor updates on one buffer.
pub fn adapt<R: Rng + ?Sized>(
    init_actor: &FlatParams,
    init_critic: &FlatParams,
    buffer: &ReplayBuffer,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<(FlatParams, FlatParams)> {
    if buffer.is_empty() {
        return Err(Error::InvalidState("adaptation buffer is empty".into()));
    }
    let mut actor = init_actor.clone();
    let mut critic = init_critic.clone();
    let mut targets = cfg.use_target_nets.then(|| TargetNets::new(&actor, &critic));
    for _ in 0..cfg.grad_steps_per_adapt {
        critic = critic_update(&critic, buffer, &actor, targets.as_ref(), cfg, rng)?;
        actor = actor_update(&actor, &critic, buffer, cfg, rng)?;
        if let Some(t) = targets.as_mut() {
            t.soft_update(&actor, &critic, cfg.tau);
        }
    }
    Ok((actor, critic))
}

/// Discounted reward-to-go `G_t = r_t + gamma * G_{t+1}`.
pub fn monte_carlo_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(invalid_arg("rewards must be non-empty"));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    Ok(out)
}

/// Settings for single-task DDPG with parameter-space exploration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandaloneConfig {
    pub adapt: AdaptConfig,
    pub episodes: usize,
    pub horizon: usize,
    pub param_noise_std: f64,
    pub buffer_capacity: usize,
    /// Gradient rounds per environment step, once the buffer holds a batch.
    pub updates_per_step: usize,
}

impl Default for StandaloneConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig {
                use_target_nets: true,
                ..AdaptConfig::default()
            },
            episodes: 200,
            horizon: 200,
            param_noise_std: 0.05,
            buffer_capacity: 100_000,
            updates_per_step: 1,
        }
    }
}

/// Trains one actor/critic pair on a fixed task. Returns the greedy
/// (unperturbed) return after every episode together with the final actor.
pub fn train_standalone<R: Rng + ?Sized>(
    env: &PointMass,
    task: &Task,
    actor: FlatParams,
    critic: FlatParams,
    cfg: &StandaloneConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, FlatParams)> {
    use rand_distr::StandardNormal;

    cfg.adapt.validate()?;
    let mut actor = actor;
    let mut critic = critic;
    let mut targets = cfg.adapt.use_target_nets.then(|| TargetNets::new(&actor, &critic));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut history = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let noise: Vec<f64> = (0..actor.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let explorer = actor.axpy(cfg.param_noise_std, &noise)?;
        let mut state = env.reset(task);
        loop {
            let obs = state.observation();
            let action = actor_forward(&explorer, &obs)?;
            let (next, reward, done) = env.step(&state, &action, task, cfg.horizon);
            buffer.push(Transition {
                obs: obs.to_vec(),
                action,
                reward,
                next_obs: next.observation().to_vec(),
                done,
            });
            state = next;
            if buffer.len() >= cfg.adapt.batch_size {
                for _ in 0..cfg.updates_per_step {
                    critic = critic_update(&critic, &buffer, &actor, targets.as_ref(), &cfg.adapt, rng)?;
                    actor = actor_update(&actor, &critic, &buffer, &cfg.adapt, rng)?;
                    if let Some(t) = targets.as_mut() {
                        t.soft_update(&actor, &critic, cfg.adapt.tau);
                    }
                }
            }
            if done {
                break;
            }
        }
        history.push(env.rollout(&actor, task, cfg.horizon)?.episode_return);
    }
    Ok((history, actor))
}

/// Mean squared error between critic predictions and Monte-Carlo returns.
pub fn critic_mse(critic: &FlatParams, traj: &Trajectory, gamma: f64) -> Result<f64> {
    let returns = monte_carlo_returns(&traj.rewards(), gamma)?;
    let mut sum = 0.0;
    for (t, g) in traj.transitions.iter().zip(&returns) {
        let q = critic_forward(critic, &t.obs, &t.action)?;
        sum += (q - g) * (q - g);
    }
    Ok(sum / returns.len() as f64)
}
