//! Coordinator properties: determinism, shaping, worker dropping and the
//! aggregated search gradient against a serial oracle.

use esmeta::ddpg::{AdaptConfig, Transition};
use esmeta::dist::{shape_fitness, FitnessShaping, GaussianParamDist, MetaGradients};
use esmeta::env::{Goal, PointMass, PointMassConfig, Task, Trajectory, ACTION_DIM, OBS_DIM};
use esmeta::meta::{
    actor_fitness, critic_fitness, evaluate_worker, iteration_seed, meta_gradients, meta_iteration, sample_tasks,
    train, MetaConfig, MetaState, WorkerResult,
};
use esmeta::nn::{build_actor_layout, build_critic_layout, FlatParams};
use std::sync::Arc;

fn small() -> MetaConfig {
    MetaConfig {
        workers: 6,
        k: 3,
        horizon: 25,
        hidden: 6,
        iterations: 3,
        lr_mu_actor: 0.01,
        lr_sigma_actor: 1e-3,
        lr_mu_critic: 0.01,
        lr_sigma_critic: 1e-3,
        critic_shaping: FitnessShaping::CenteredRank,
        adapt: AdaptConfig {
            batch_size: 16,
            critic_lr: 1e-2,
            actor_lr: 1e-2,
            ..AdaptConfig::default()
        },
        threads: Some(1),
        ..MetaConfig::default()
    }
}

fn results(cfg: &MetaConfig, state: &MetaState) -> Vec<WorkerResult> {
    let tasks = sample_tasks(cfg, 0);
    let seed = iteration_seed(cfg.master_seed, 0);
    (0..cfg.workers as u32)
        .map(|w| evaluate_worker(state, &tasks, w, seed, cfg).unwrap())
        .collect()
}

/// Direct transcription of the search-gradient formulas over explicitly
/// regenerated samples, normalized by the number of workers given.
fn serial_oracle(dist: &GaussianParamDist, groups: &[Vec<FlatParams>], fitness: &[f64]) -> MetaGradients {
    let n = dist.len();
    let mut g = MetaGradients::zeros(n);
    for (samples, f) in groups.iter().zip(fitness) {
        for s in samples {
            for i in 0..n {
                let d = s.values()[i] - dist.mu()[i];
                let sig = dist.sigma()[i];
                g.grad_mu[i] += f * d / (sig * sig);
                g.grad_sigma[i] += f * (d * d - sig * sig) / (sig * sig * sig);
            }
        }
    }
    let m = groups.len() as f64;
    g.grad_mu
        .iter_mut()
        .chain(g.grad_sigma.iter_mut())
        .for_each(|v| *v /= m);
    g
}

fn close(a: &MetaGradients, b: &MetaGradients) -> bool {
    let c = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-9 * q.abs().max(1.0));
    c(&a.grad_mu, &b.grad_mu) && c(&a.grad_sigma, &b.grad_sigma)
}

fn oracle_pair(state: &MetaState, rs: &[WorkerResult], cfg: &MetaConfig) -> (MetaGradients, MetaGradients) {
    let fa = shape_fitness(
        &rs.iter().map(|r| r.actor_fitness).collect::<Vec<_>>(),
        cfg.actor_shaping,
    );
    let fc = shape_fitness(
        &rs.iter().map(|r| r.critic_fitness).collect::<Vec<_>>(),
        cfg.critic_shaping,
    );
    let actors: Vec<Vec<FlatParams>> = rs
        .iter()
        .map(|r| r.actor_seeds.iter().map(|&s| state.actor.sample(s)).collect())
        .collect();
    let critics: Vec<Vec<FlatParams>> = rs.iter().map(|r| vec![state.critic.sample(r.critic_seed)]).collect();
    (
        serial_oracle(&state.actor, &actors, &fa),
        serial_oracle(&state.critic, &critics, &fc),
    )
}

#[test]
fn aggregated_gradient_matches_serial_oracle() {
    let cfg = small();
    let state = MetaState::initial(&cfg).unwrap();
    let rs = results(&cfg, &state);
    let (ga, gc) = meta_gradients(&state, &rs, cfg.actor_shaping, cfg.critic_shaping).unwrap();
    let (oa, oc) = oracle_pair(&state, &rs, &cfg);
    assert!(close(&ga, &oa));
    assert!(close(&gc, &oc));
}

#[test]
fn dropping_a_worker_renormalizes_over_survivors() {
    let cfg = small();
    let state = MetaState::initial(&cfg).unwrap();
    let mut rs = results(&cfg, &state);
    rs.remove(2);
    let (ga, gc) = meta_gradients(&state, &rs, cfg.actor_shaping, cfg.critic_shaping).unwrap();
    let (oa, oc) = oracle_pair(&state, &rs, &cfg);
    assert!(close(&ga, &oa));
    assert!(close(&gc, &oc));
}

#[test]
fn rank_shaping_ignores_constant_shifts() {
    let cfg = small();
    let state = MetaState::initial(&cfg).unwrap();
    let rs = results(&cfg, &state);
    let shifted: Vec<WorkerResult> = rs
        .iter()
        .cloned()
        .map(|mut r| {
            r.actor_fitness += 1234.5;
            r.critic_fitness -= 77.0;
            r
        })
        .collect();
    let s = FitnessShaping::CenteredRank;
    assert_eq!(
        meta_gradients(&state, &rs, s, s).unwrap(),
        meta_gradients(&state, &shifted, s, s).unwrap()
    );
}

#[test]
fn equal_fitness_under_ranks_leaves_distributions_unchanged() {
    let cfg = small();
    let state = MetaState::initial(&cfg).unwrap();
    let rs: Vec<WorkerResult> = results(&cfg, &state)
        .into_iter()
        .map(|mut r| {
            r.actor_fitness = -5.0;
            r.critic_fitness = -1.0;
            r
        })
        .collect();
    let s = FitnessShaping::CenteredRank;
    let (ga, gc) = meta_gradients(&state, &rs, s, s).unwrap();
    let next_a = state.actor.sgd_step(&ga, 0.5, 0.5).unwrap();
    let next_c = state.critic.sgd_step(&gc, 0.5, 0.5).unwrap();
    assert_eq!(next_a, state.actor);
    assert_eq!(next_c, state.critic);
}

#[test]
fn thread_count_does_not_change_results() {
    let one = train(&MetaConfig {
        threads: Some(1),
        ..small()
    })
    .unwrap();
    let many = train(&MetaConfig {
        threads: Some(4),
        ..small()
    })
    .unwrap();
    assert_eq!(one.state, many.state);
    for (a, b) in one.stats.iter().zip(&many.stats) {
        assert_eq!(a.fitness_mean.to_bits(), b.fitness_mean.to_bits());
        assert_eq!(a.sigma_mean_actor.to_bits(), b.sigma_mean_actor.to_bits());
    }
}

#[test]
fn fixed_sigma_run_keeps_actor_sigma() {
    let cfg = MetaConfig {
        lr_sigma_actor: 0.0,
        ..small()
    };
    let init = MetaState::initial(&cfg).unwrap();
    let out = train(&cfg).unwrap();
    assert_eq!(out.state.actor.sigma(), init.actor.sigma());
    assert!(out.stats.iter().all(|s| s.sigma_mean_actor == init.actor.sigma_mean()));
    assert_ne!(out.state.actor.mu(), init.actor.mu());
}

#[test]
fn stats_series_matches_iterations_and_orders_extremes() {
    let out = train(&small()).unwrap();
    assert_eq!(out.stats.len(), 3);
    for (i, s) in out.stats.iter().enumerate() {
        assert_eq!(s.iteration, i);
        assert!(s.fitness_max >= s.fitness_mean && s.fitness_mean >= s.fitness_min);
        assert!(s.fitness_std >= 0.0);
    }
}

#[test]
fn single_iteration_is_reproducible() {
    let cfg = small();
    let state = MetaState::initial(&cfg).unwrap();
    let pool = cfg.pool().unwrap();
    let (a, sa) = meta_iteration(&state, &cfg, 4, &pool).unwrap();
    let (b, sb) = meta_iteration(&state, &cfg, 4, &pool).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa.fitness_mean, sb.fitness_mean);
}

#[test]
fn identity_adaptation_scores_the_sampled_policy() {
    let cfg = MetaConfig {
        k: 1,
        adapt: AdaptConfig {
            critic_lr: 0.0,
            actor_lr: 0.0,
            batch_size: 8,
            ..AdaptConfig::default()
        },
        ..small()
    };
    let state = MetaState::initial(&cfg).unwrap();
    let tasks = sample_tasks(&cfg, 0);
    let seed = iteration_seed(cfg.master_seed, 0);
    let r = evaluate_worker(&state, &tasks, 3, seed, &cfg).unwrap();
    let env = PointMass::new(cfg.env);
    let sampled = state.actor.sample(r.actor_seeds[0]);
    let raw = env.rollout(&sampled, &tasks[0], cfg.horizon).unwrap().episode_return;
    assert_eq!(r.actor_fitness, raw);
}

#[test]
fn workers_get_distinct_seed_sets() {
    let cfg = small();
    let state = MetaState::initial(&cfg).unwrap();
    let rs = results(&cfg, &state);
    for i in 0..rs.len() {
        for j in i + 1..rs.len() {
            assert_ne!(rs[i].actor_seeds, rs[j].actor_seeds);
            assert_ne!(rs[i].critic_seed, rs[j].critic_seed);
        }
    }
}

#[test]
fn zero_actor_fitness_on_unit_velocity_goal() {
    let env = PointMass::new(PointMassConfig::default());
    let actor = FlatParams::zeros(Arc::new(build_actor_layout(OBS_DIM, ACTION_DIM, 4).unwrap()));
    let g1 = Task::new(Goal::Velocity(1.0), 0);
    let g2 = Task::new(Goal::Velocity(0.5), 0);
    assert_eq!(actor_fitness(&env, &[(&actor, &g1)], 200).unwrap(), -200.0);
    assert_eq!(
        actor_fitness(&env, &[(&actor, &g1), (&actor, &g2)], 200).unwrap(),
        -150.0
    );
}

#[test]
fn critic_fitness_of_zero_critic_on_unit_losses() {
    let critic = FlatParams::zeros(Arc::new(build_critic_layout(OBS_DIM, ACTION_DIM, 4).unwrap()));
    let transitions: Vec<Transition> = (0..7)
        .map(|t| Transition {
            obs: vec![t as f64, 0.0, 0.0, 0.0],
            action: vec![0.0, 0.0],
            reward: -1.0,
            next_obs: vec![t as f64 + 1.0, 0.0, 0.0, 0.0],
            done: t == 6,
        })
        .collect();
    let traj = Trajectory {
        transitions,
        episode_return: -7.0,
    };
    assert_eq!(critic_fitness(&critic, &traj, 0.0).unwrap(), -1.0);
    assert!(critic_fitness(&critic, &traj, 0.9).unwrap() < -1.0);
}

#[test]
fn zero_iterations_return_initial_state() {
    let cfg = MetaConfig {
        iterations: 0,
        ..small()
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.state, MetaState::initial(&cfg).unwrap());
    assert!(out.stats.is_empty());
}
