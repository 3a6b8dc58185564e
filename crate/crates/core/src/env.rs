//! 2D point-mass task families.
//!
//! Observations are `[px, py, vx, vy]`; the goal is never observed. Actions
//! are accelerations in `[-1, 1]^2` scaled by `accel_max`. Integration is
//! semi-implicit Euler with a hard speed cap.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::ddpg::Transition;
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{actor_forward, FlatParams};

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    GoalVelocity,
    GoalDirection,
    GoalPosition,
}

impl TaskFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::GoalVelocity => "point-vel",
            TaskFamily::GoalDirection => "point-dir",
            TaskFamily::GoalPosition => "point-goal",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-vel" => Ok(TaskFamily::GoalVelocity),
            "point-dir" => Ok(TaskFamily::GoalDirection),
            "point-goal" => Ok(TaskFamily::GoalPosition),
            other => Err(invalid_arg(format!("unknown task family `{other}`"))),
        }
    }
}

/// Hidden task parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Goal {
    /// Target speed.
    Velocity(f64),
    /// `+1` forward (+x), `-1` backward.
    Direction(f64),
    Position([f64; 2]),
}

impl Goal {
    /// Inverse of [`Task::goal_pair`].
    pub fn from_pair(family: TaskFamily, pair: [f64; 2]) -> Self {
        match family {
            TaskFamily::GoalVelocity => Goal::Velocity(pair[0]),
            TaskFamily::GoalDirection => Goal::Direction(pair[0]),
            TaskFamily::GoalPosition => Goal::Position(pair),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    pub goal: Goal,
    pub task_seed: u64,
}

impl Task {
    pub fn new(goal: Goal, task_seed: u64) -> Self {
        Self { goal, task_seed }
    }

    pub fn family(&self) -> TaskFamily {
        match self.goal {
            Goal::Velocity(_) => TaskFamily::GoalVelocity,
            Goal::Direction(_) => TaskFamily::GoalDirection,
            Goal::Position(_) => TaskFamily::GoalPosition,
        }
    }

    /// Goal rendered as two numbers (second is 0 for scalar goals).
    pub fn goal_pair(&self) -> [f64; 2] {
        match self.goal {
            Goal::Velocity(g) | Goal::Direction(g) => [g, 0.0],
            Goal::Position(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassConfig {
    pub dt: f64,
    pub accel_max: f64,
    pub v_max: f64,
    /// Upper end of the goal-speed range; the lower end is 0.
    pub goal_velocity_max: f64,
    /// Goal positions are drawn from `[-r, r]^2`.
    pub goal_position_range: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            accel_max: 4.0,
            v_max: 3.0,
            goal_velocity_max: 2.0,
            goal_position_range: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub step_index: usize,
}

impl PointState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointMass {
    pub cfg: PointMassConfig,
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

impl PointMass {
    pub fn new(cfg: PointMassConfig) -> Self {
        Self { cfg }
    }

    pub fn sample_task<R: Rng + ?Sized>(&self, family: TaskFamily, rng: &mut R) -> Task {
        let goal = match family {
            TaskFamily::GoalVelocity => Goal::Velocity(rng.random_range(0.0..=self.cfg.goal_velocity_max)),
            TaskFamily::GoalDirection => Goal::Direction(if rng.random::<bool>() { 1.0 } else { -1.0 }),
            TaskFamily::GoalPosition => {
                let r = self.cfg.goal_position_range;
                Goal::Position([rng.random_range(-r..=r), rng.random_range(-r..=r)])
            }
        };
        Task {
            goal,
            task_seed: rng.random(),
        }
    }

    pub fn reset(&self, _task: &Task) -> PointState {
        PointState {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            step_index: 0,
        }
    }

    /// Advances one step. Actions are clipped into `[-1, 1]` (non-finite
    /// components become 0). `done` is set on the final step of `horizon`.
    pub fn step(&self, state: &PointState, action: &[f64], task: &Task, horizon: usize) -> (PointState, f64, bool) {
        let c = &self.cfg;
        let mut a = [0.0; 2];
        for (dst, src) in a.iter_mut().zip(action) {
            *dst = if src.is_finite() { src.clamp(-1.0, 1.0) } else { 0.0 };
        }
        let mut v = [
            state.velocity[0] + a[0] * c.accel_max * c.dt,
            state.velocity[1] + a[1] * c.accel_max * c.dt,
        ];
        let speed = norm(v);
        if speed > c.v_max {
            let k = c.v_max / speed;
            v = [v[0] * k, v[1] * k];
        }
        let p = [state.position[0] + v[0] * c.dt, state.position[1] + v[1] * c.dt];
        let reward = match task.goal {
            Goal::Velocity(g) => -(norm(v) - g).abs(),
            Goal::Direction(g) => g * v[0],
            Goal::Position(g) => -norm([p[0] - g[0], p[1] - g[1]]),
        };
        let next = PointState {
            position: p,
            velocity: v,
            step_index: state.step_index + 1,
        };
        (next, reward, state.step_index + 1 >= horizon)
    }

    /// Runs `actor` for exactly `horizon` steps from the reset state.
    pub fn rollout(&self, actor: &FlatParams, task: &Task, horizon: usize) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(invalid_arg("horizon must be >= 1"));
        }
        let mut state = self.reset(task);
        let mut transitions = Vec::with_capacity(horizon);
        let mut total = 0.0;
        loop {
            let obs = state.observation();
            let action = actor_forward(actor, &obs)?;
            let (next, reward, done) = self.step(&state, &action, task, horizon);
            total += reward;
            transitions.push(Transition {
                obs: obs.to_vec(),
                action,
                reward,
                next_obs: next.observation().to_vec(),
                done,
            });
            state = next;
            if done {
                break;
            }
        }
        Ok(Trajectory {
            transitions,
            episode_return: total,
        })
    }

    /// Return of a hand-written controller that steers toward the goal;
    /// used as a reference level for learned policies.
    pub fn scripted_return(&self, task: &Task, horizon: usize) -> f64 {
        let mut state = self.reset(task);
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = self.scripted_action(&state, task);
            let (next, r, _) = self.step(&state, &a, task, horizon);
            total += r;
            state = next;
        }
        total
    }

    fn scripted_action(&self, s: &PointState, task: &Task) -> [f64; 2] {
        let c = &self.cfg;
        let dv_max = c.accel_max * c.dt;
        // desired velocity, then the clipped acceleration reaching it
        let target_v = match task.goal {
            Goal::Velocity(g) => {
                let speed = norm(s.velocity);
                if speed > 1e-9 {
                    [s.velocity[0] / speed * g, s.velocity[1] / speed * g]
                } else {
                    [g, 0.0]
                }
            }
            Goal::Direction(g) => [g * c.v_max, 0.0],
            Goal::Position(g) => {
                let d = [g[0] - s.position[0], g[1] - s.position[1]];
                let dist = norm(d);
                // fastest speed that can still stop in time
                let speed = (2.0 * c.accel_max * dist).sqrt().min(dist / c.dt).min(c.v_max);
                if dist > 1e-12 {
                    [d[0] / dist * speed, d[1] / dist * speed]
                } else {
                    [0.0, 0.0]
                }
            }
        };
        [
            ((target_v[0] - s.velocity[0]) / dv_max).clamp(-1.0, 1.0),
            ((target_v[1] - s.velocity[1]) / dv_max).clamp(-1.0, 1.0),
        ]
    }
}
