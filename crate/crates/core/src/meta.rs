//! The outer evolution-strategies loop.
//!
//! Each iteration publishes an immutable snapshot of the actor and critic
//! distributions. Every worker samples K actors and one critic by seed,
//! explores each task of the shared mini-batch with the K actors, adapts the
//! mean-of-K actor and the sampled critic on that experience, and reports the
//! post-adaptation fitness. The coordinator regenerates the sampled
//! parameters from the seeds, shapes the fitness and steps both
//! distributions with plain SGD. Results are reduced in worker-index order,
//! so the outcome does not depend on thread count or completion order.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ddpg::{adapt, collect_exploration_rollouts, critic_mse, AdaptConfig};
use crate::dist::{
    shape_fitness, FitnessShaping, GaussianParamDist, NesAccumulator, PerturbationSeed, ScoreSums, SigmaBounds,
};
use crate::env::{Goal, PointMass, PointMassConfig, Task, TaskFamily, Trajectory, ACTION_DIM, OBS_DIM};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{build_actor_layout, build_critic_layout, xavier_init, FlatParams};
use crate::rng::{derive_seed, keyed_rng, tag};

/// Env var capping worker threads. It never changes results.
pub const THREADS_ENV: &str = "ESMETA_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    /// Workers per iteration (M).
    pub workers: usize,
    /// Exploration actors per worker (K).
    pub k: usize,
    pub tasks_per_iteration: usize,
    pub trajectories_per_actor: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub lr_mu_actor: f64,
    pub lr_sigma_actor: f64,
    pub lr_mu_critic: f64,
    pub lr_sigma_critic: f64,
    pub actor_shaping: FitnessShaping,
    pub critic_shaping: FitnessShaping,
    pub sigma_init: f64,
    pub sigma_bounds: SigmaBounds,
    pub adapt: AdaptConfig,
    pub task_family: TaskFamily,
    /// Pins every iteration to one goal instead of sampling the family.
    /// Velocity and direction goals read the first component.
    pub fixed_goal: Option<[f64; 2]>,
    pub env: PointMassConfig,
    pub master_seed: u64,
    pub iterations: usize,
    /// Worker thread cap; `None` defers to `ESMETA_THREADS`, then rayon's default.
    pub threads: Option<usize>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            workers: 16,
            k: 20,
            tasks_per_iteration: 1,
            trajectories_per_actor: 1,
            horizon: 200,
            hidden: 100,
            lr_mu_actor: 1e-3,
            lr_sigma_actor: 1e-5,
            lr_mu_critic: 1e-3,
            lr_sigma_critic: 1e-5,
            actor_shaping: FitnessShaping::CenteredRank,
            critic_shaping: FitnessShaping::None,
            sigma_init: 0.05,
            sigma_bounds: SigmaBounds::default(),
            adapt: AdaptConfig::default(),
            task_family: TaskFamily::GoalVelocity,
            fixed_goal: None,
            env: PointMassConfig::default(),
            master_seed: 0,
            iterations: 500,
            threads: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M", self.workers),
            ("K", self.k),
            ("tasks_per_iteration", self.tasks_per_iteration),
            ("trajectories_per_actor", self.trajectories_per_actor),
            ("horizon", self.horizon),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid_arg(format!("{name} must be >= 1")));
            }
        }
        for (name, lr) in [
            ("lr_mu_actor", self.lr_mu_actor),
            ("lr_sigma_actor", self.lr_sigma_actor),
            ("lr_mu_critic", self.lr_mu_critic),
            ("lr_sigma_critic", self.lr_sigma_critic),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(invalid_arg(format!("{name} must be >= 0")));
            }
        }
        if self.k > u32::MAX as usize - 1 || self.workers > u32::MAX as usize {
            return Err(invalid_arg("M or K too large"));
        }
        self.adapt.validate()
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        let from_env = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok());
        let n = self.threads.or(from_env).filter(|&n| n > 0).unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))
    }
}

/// The pair of meta-distributions being learned.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub actor: GaussianParamDist,
    pub critic: GaussianParamDist,
}

impl MetaState {
    /// Xavier-initialized means with a broadcast initial sigma.
    pub fn initial(cfg: &MetaConfig) -> Result<Self> {
        let actor_layout = Arc::new(build_actor_layout(OBS_DIM, ACTION_DIM, cfg.hidden)?);
        let critic_layout = Arc::new(build_critic_layout(OBS_DIM, ACTION_DIM, cfg.hidden)?);
        let mu_a = xavier_init(&actor_layout, &mut keyed_rng(cfg.master_seed, &[tag::INIT_ACTOR]));
        let mu_c = xavier_init(&critic_layout, &mut keyed_rng(cfg.master_seed, &[tag::INIT_CRITIC]));
        Ok(Self {
            actor: GaussianParamDist::new(mu_a, cfg.sigma_init, cfg.sigma_bounds)?,
            critic: GaussianParamDist::new(mu_c, cfg.sigma_init, cfg.sigma_bounds)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerResult {
    pub worker_index: u32,
    pub actor_seeds: Vec<PerturbationSeed>,
    pub critic_seed: PerturbationSeed,
    pub actor_fitness: f64,
    pub critic_fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub fitness_mean: f64,
    pub fitness_max: f64,
    pub fitness_min: f64,
    pub fitness_std: f64,
    pub sigma_mean_actor: f64,
    pub sigma_mean_critic: f64,
    pub wall_seconds: f64,
}

/// Seed shared by every perturbation of one iteration.
pub fn iteration_seed(master_seed: u64, iteration: usize) -> u64 {
    derive_seed(master_seed, &[iteration as u64])
}

/// The task mini-batch of `iteration`, shared by all workers.
pub fn sample_tasks(cfg: &MetaConfig, iteration: usize) -> Vec<Task> {
    let env = PointMass::new(cfg.env);
    let mut rng = keyed_rng(cfg.master_seed, &[tag::TASKS, iteration as u64]);
    (0..cfg.tasks_per_iteration)
        .map(|_| match cfg.fixed_goal {
            Some(g) => Task::new(Goal::from_pair(cfg.task_family, g), 0),
            None => env.sample_task(cfg.task_family, &mut rng),
        })
        .collect()
}

/// Post-adaptation return of one rollout, averaged over `tasks`.
pub fn actor_fitness(env: &PointMass, adapted: &[(&FlatParams, &Task)], horizon: usize) -> Result<f64> {
    if adapted.is_empty() {
        return Err(invalid_arg("need at least one task"));
    }
    let mut sum = 0.0;
    for (actor, task) in adapted {
        sum += env.rollout(actor, task, horizon)?.episode_return;
    }
    Ok(sum / adapted.len() as f64)
}

/// Negative mean squared error of the critic against Monte-Carlo returns.
pub fn critic_fitness(critic: &FlatParams, test: &Trajectory, gamma: f64) -> Result<f64> {
    Ok(-critic_mse(critic, test, gamma)?)
}

/// Everything one adaptation episode on one task produces.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// Mean-of-K actor the adaptation starts from.
    pub initial_actor: FlatParams,
    pub adapted_actor: FlatParams,
    pub adapted_critic: FlatParams,
    /// Fresh rollout of the adapted actor.
    pub test: Trajectory,
}

#[allow(clippy::too_many_arguments)]
/// Explore with `actors`, adapt their mean together with `critic`, then
/// roll out the adapted actor once.
pub fn adapt_on_task(
    env: &PointMass,
    task: &Task,
    actors: &[FlatParams],
    mean_actor: &FlatParams,
    critic: &FlatParams,
    cfg: &MetaConfig,
    adapt_cfg: &AdaptConfig,
    adapt_rng_seed: u64,
) -> Result<AdaptOutcome> {
    let buffer = collect_exploration_rollouts(env, task, actors, cfg.trajectories_per_actor, cfg.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(adapt_rng_seed);
    let (adapted_actor, adapted_critic) = adapt(mean_actor, critic, &buffer, adapt_cfg, &mut rng)?;
    let test = env.rollout(&adapted_actor, task, cfg.horizon)?;
    Ok(AdaptOutcome {
        initial_actor: mean_actor.clone(),
        adapted_actor,
        adapted_critic,
        test,
    })
}

/// Runs one worker; a pure function of its arguments.
pub fn evaluate_worker(
    snapshot: &MetaState,
    tasks: &[Task],
    worker_index: u32,
    iter_seed: u64,
    cfg: &MetaConfig,
) -> Result<WorkerResult> {
    if tasks.is_empty() {
        return Err(invalid_arg("worker needs at least one task"));
    }
    let env = PointMass::new(cfg.env);
    let actor_seeds: Vec<PerturbationSeed> = (0..cfg.k as u32)
        .map(|j| PerturbationSeed::actor(iter_seed, worker_index, j))
        .collect();
    let critic_seed = PerturbationSeed::critic(iter_seed, worker_index);
    let (actors, mean_actor) = snapshot.actor.sample_k_and_mean(&actor_seeds)?;
    let critic = snapshot.critic.sample(critic_seed);

    let mut actor_sum = 0.0;
    let mut critic_sum = 0.0;
    for (ti, task) in tasks.iter().enumerate() {
        let seed = derive_seed(iter_seed, &[tag::ADAPT, worker_index as u64, ti as u64]);
        let out = adapt_on_task(&env, task, &actors, &mean_actor, &critic, cfg, &cfg.adapt, seed)?;
        actor_sum += out.test.episode_return;
        critic_sum += critic_fitness(&out.adapted_critic, &out.test, cfg.adapt.gamma)?;
    }
    let n = tasks.len() as f64;
    let (actor_fitness, critic_fitness) = (actor_sum / n, critic_sum / n);
    if !(actor_fitness.is_finite() && critic_fitness.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "worker {worker_index} produced non-finite fitness"
        )));
    }
    Ok(WorkerResult {
        worker_index,
        actor_seeds,
        critic_seed,
        actor_fitness,
        critic_fitness,
    })
}

/// Search gradients for both distributions from the surviving workers,
/// reduced in the order given.
pub fn meta_gradients(
    state: &MetaState,
    results: &[WorkerResult],
    actor_shaping: FitnessShaping,
    critic_shaping: FitnessShaping,
) -> Result<(crate::dist::MetaGradients, crate::dist::MetaGradients)> {
    if results.is_empty() {
        return Err(invalid_arg("no worker results"));
    }
    let raw_a: Vec<f64> = results.iter().map(|r| r.actor_fitness).collect();
    let raw_c: Vec<f64> = results.iter().map(|r| r.critic_fitness).collect();
    let fa = shape_fitness(&raw_a, actor_shaping);
    let fc = shape_fitness(&raw_c, critic_shaping);

    let scores: Vec<(ScoreSums, ScoreSums)> = results
        .par_iter()
        .map(|r| {
            Ok((
                ScoreSums::from_seeds(&state.actor, &r.actor_seeds)?,
                ScoreSums::from_seeds(&state.critic, std::slice::from_ref(&r.critic_seed))?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut acc_a = NesAccumulator::new(&state.actor);
    let mut acc_c = NesAccumulator::new(&state.critic);
    for ((sa, sc), (&a, &c)) in scores.iter().zip(fa.iter().zip(&fc)) {
        acc_a.add(sa, a)?;
        acc_c.add(sc, c)?;
    }
    Ok((acc_a.finish()?, acc_c.finish()?))
}

fn stats(iteration: usize, results: &[WorkerResult], next: &MetaState, wall: f64) -> IterationStats {
    let f: Vec<f64> = results.iter().map(|r| r.actor_fitness).collect();
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    IterationStats {
        iteration,
        fitness_mean: mean,
        fitness_max: f.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        fitness_min: f.iter().cloned().fold(f64::INFINITY, f64::min),
        fitness_std: var.sqrt(),
        sigma_mean_actor: next.actor.sigma_mean(),
        sigma_mean_critic: next.critic.sigma_mean(),
        wall_seconds: wall,
    }
}

/// One outer step. Failed workers are logged and dropped; the gradient is
/// renormalized over the survivors.
pub fn meta_iteration(
    state: &MetaState,
    cfg: &MetaConfig,
    iteration: usize,
    pool: &rayon::ThreadPool,
) -> Result<(MetaState, IterationStats)> {
    let start = Instant::now();
    let tasks = sample_tasks(cfg, iteration);
    let iter_seed = iteration_seed(cfg.master_seed, iteration);
    let (next, results) = pool.install(|| {
        let outcomes: Vec<Result<WorkerResult>> = (0..cfg.workers as u32)
            .into_par_iter()
            .map(|w| evaluate_worker(state, &tasks, w, iter_seed, cfg))
            .collect();
        let mut results = Vec::with_capacity(outcomes.len());
        for (w, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(r) => results.push(r),
                Err(e) => log::warn!("iteration {iteration}: dropping worker {w}: {e}"),
            }
        }
        if results.is_empty() {
            return Err(Error::AllWorkersFailed(cfg.workers));
        }
        let (ga, gc) = meta_gradients(state, &results, cfg.actor_shaping, cfg.critic_shaping)?;
        let next = MetaState {
            actor: state.actor.sgd_step(&ga, cfg.lr_mu_actor, cfg.lr_sigma_actor)?,
            critic: state.critic.sgd_step(&gc, cfg.lr_mu_critic, cfg.lr_sigma_critic)?,
        };
        Ok((next, results))
    })?;
    let s = stats(iteration, &results, &next, start.elapsed().as_secs_f64());
    Ok((next, s))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: MetaState,
    pub stats: Vec<IterationStats>,
    /// Index of the last iteration attempted, plus one.
    pub iterations_run: usize,
}

/// Consecutive failed iterations tolerated before training aborts.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

/// Runs `cfg.iterations` meta-iterations from `init`, calling `observer`
/// after every successful one.
pub fn train_from<F>(init: MetaState, cfg: &MetaConfig, start_iteration: usize, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &MetaState, &IterationStats) -> Result<()>,
{
    cfg.validate()?;
    let pool = cfg.pool()?;
    let mut state = init;
    let mut stats = Vec::with_capacity(cfg.iterations);
    let mut failures = 0;
    let end = start_iteration + cfg.iterations;
    for it in start_iteration..end {
        match meta_iteration(&state, cfg, it, &pool) {
            Ok((next, s)) => {
                failures = 0;
                state = next;
                observer(it, &state, &s)?;
                stats.push(s);
            }
            Err(e) => {
                failures += 1;
                log::warn!("iteration {it} failed ({failures} in a row): {e}");
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(e);
                }
            }
        }
    }
    Ok(TrainOutcome {
        state,
        stats,
        iterations_run: end,
    })
}

/// Trains from the Xavier-initialized distributions.
pub fn train(cfg: &MetaConfig) -> Result<TrainOutcome> {
    train_from(MetaState::initial(cfg)?, cfg, 0, |_, _, _| Ok(()))
}
