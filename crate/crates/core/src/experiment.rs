//! Operator-facing plumbing: config files, checkpoints, metrics and eval.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dist::{FitnessShaping, GaussianParamDist, PerturbationSeed, SigmaBounds};
use crate::env::{PointMass, Task};
use crate::error::{config_err, CheckpointError, Error, Result};
use crate::meta::{adapt_on_task, IterationStats, MetaConfig, MetaState};
use crate::nn::{Activation, LayerSpec, NetLayout};
use crate::rng::{derive_seed, keyed_rng, tag};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub meta: MetaConfig,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub eval_tasks: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            meta: MetaConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 50,
            eval_tasks: 25,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(key, format!("expected a boolean, got `{value}`"))),
    }
}

/// `none`, `x` or `x,y`.
fn parse_goal(key: &str, value: &str) -> Result<Option<[f64; 2]>> {
    if value == "none" || value.is_empty() {
        return Ok(None);
    }
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x] => Ok(Some([parse_num(key, x)?, 0.0])),
        [x, y] => Ok(Some([parse_num(key, x)?, parse_num(key, y)?])),
        _ => Err(config_err(key, format!("expected `x` or `x,y`, got `{value}`"))),
    }
}

fn parse_shaping(key: &str, value: &str) -> Result<FitnessShaping> {
    FitnessShaping::parse(value).ok_or_else(|| config_err(key, format!("unknown shaping `{value}`")))
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.meta;
        let v = value.trim();
        match key {
            "M" => m.workers = parse_num(key, v)?,
            "K" => m.k = parse_num(key, v)?,
            "tasks_per_iteration" => m.tasks_per_iteration = parse_num(key, v)?,
            "trajectories_per_actor" => m.trajectories_per_actor = parse_num(key, v)?,
            "horizon" => m.horizon = parse_num(key, v)?,
            "hidden" => m.hidden = parse_num(key, v)?,
            "lr_mu_actor" => m.lr_mu_actor = parse_num(key, v)?,
            "lr_sigma_actor" => m.lr_sigma_actor = parse_num(key, v)?,
            "lr_mu_critic" => m.lr_mu_critic = parse_num(key, v)?,
            "lr_sigma_critic" => m.lr_sigma_critic = parse_num(key, v)?,
            "actor_shaping" => m.actor_shaping = parse_shaping(key, v)?,
            "critic_shaping" => m.critic_shaping = parse_shaping(key, v)?,
            "sigma_init" => m.sigma_init = parse_num(key, v)?,
            "sigma_min" => m.sigma_bounds.min = parse_num(key, v)?,
            "sigma_max" => m.sigma_bounds.max = parse_num(key, v)?,
            "gamma" => m.adapt.gamma = parse_num(key, v)?,
            "fixed_goal" => m.fixed_goal = parse_goal(key, v)?,
            "critic_lr" => m.adapt.critic_lr = parse_num(key, v)?,
            "actor_lr" => m.adapt.actor_lr = parse_num(key, v)?,
            "batch_size" => m.adapt.batch_size = parse_num(key, v)?,
            "grad_steps_per_adapt" => m.adapt.grad_steps_per_adapt = parse_num(key, v)?,
            "use_target_nets" => m.adapt.use_target_nets = parse_bool(key, v)?,
            "tau" => m.adapt.tau = parse_num(key, v)?,
            "task_family" => m.task_family = v.parse().map_err(|e: Error| config_err(key, e.to_string()))?,
            "dt" => m.env.dt = parse_num(key, v)?,
            "accel_max" => m.env.accel_max = parse_num(key, v)?,
            "v_max" => m.env.v_max = parse_num(key, v)?,
            "goal_velocity_max" => m.env.goal_velocity_max = parse_num(key, v)?,
            "goal_position_range" => m.env.goal_position_range = parse_num(key, v)?,
            "master_seed" => m.master_seed = parse_num(key, v)?,
            "iterations" => m.iterations = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "eval_tasks" => self.eval_tasks = parse_num(key, v)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(o, "override must look like key=value"))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let counts = [
            ("M", m.workers),
            ("K", m.k),
            ("tasks_per_iteration", m.tasks_per_iteration),
            ("trajectories_per_actor", m.trajectories_per_actor),
            ("horizon", m.horizon),
            ("hidden", m.hidden),
            ("batch_size", m.adapt.batch_size),
            ("grad_steps_per_adapt", m.adapt.grad_steps_per_adapt),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(config_err(key, "must be >= 1"));
            }
        }
        let rates = [
            ("lr_mu_actor", m.lr_mu_actor),
            ("lr_sigma_actor", m.lr_sigma_actor),
            ("lr_mu_critic", m.lr_mu_critic),
            ("lr_sigma_critic", m.lr_sigma_critic),
            ("critic_lr", m.adapt.critic_lr),
            ("actor_lr", m.adapt.actor_lr),
        ];
        for (key, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(key, "must be a finite value >= 0"));
            }
        }
        if !(0.0..1.0).contains(&m.adapt.gamma) {
            return Err(config_err("gamma", "must be in [0, 1)"));
        }
        if !(m.adapt.tau > 0.0 && m.adapt.tau <= 1.0) {
            return Err(config_err("tau", "must be in (0, 1]"));
        }
        if SigmaBounds::new(m.sigma_bounds.min, m.sigma_bounds.max).is_err() {
            return Err(config_err("sigma_min", "need 0 < sigma_min <= sigma_max"));
        }
        if !(m.sigma_init > 0.0 && m.sigma_init.is_finite()) {
            return Err(config_err("sigma_init", "must be > 0"));
        }
        for (key, v) in [("dt", m.env.dt), ("accel_max", m.env.accel_max), ("v_max", m.env.v_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(key, "must be > 0"));
            }
        }
        if m.env.goal_velocity_max.is_nan() || m.env.goal_velocity_max < 0.0 {
            return Err(config_err("goal_velocity_max", "must be >= 0"));
        }
        if m.env.goal_position_range.is_nan() || m.env.goal_position_range < 0.0 {
            return Err(config_err("goal_position_range", "must be >= 0"));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to the same config.
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task_family", m.task_family.to_string());
        kv("M", m.workers.to_string());
        kv("K", m.k.to_string());
        kv("tasks_per_iteration", m.tasks_per_iteration.to_string());
        kv("trajectories_per_actor", m.trajectories_per_actor.to_string());
        kv("horizon", m.horizon.to_string());
        kv("hidden", m.hidden.to_string());
        kv("lr_mu_actor", m.lr_mu_actor.to_string());
        kv("lr_sigma_actor", m.lr_sigma_actor.to_string());
        kv("lr_mu_critic", m.lr_mu_critic.to_string());
        kv("lr_sigma_critic", m.lr_sigma_critic.to_string());
        kv("actor_shaping", m.actor_shaping.as_str().to_string());
        kv("critic_shaping", m.critic_shaping.as_str().to_string());
        kv("sigma_init", m.sigma_init.to_string());
        kv("sigma_min", m.sigma_bounds.min.to_string());
        kv("sigma_max", m.sigma_bounds.max.to_string());
        kv("gamma", m.adapt.gamma.to_string());
        kv("critic_lr", m.adapt.critic_lr.to_string());
        kv("actor_lr", m.adapt.actor_lr.to_string());
        kv("batch_size", m.adapt.batch_size.to_string());
        kv("grad_steps_per_adapt", m.adapt.grad_steps_per_adapt.to_string());
        kv("use_target_nets", m.adapt.use_target_nets.to_string());
        kv("tau", m.adapt.tau.to_string());
        kv(
            "fixed_goal",
            match m.fixed_goal {
                Some([x, y]) => format!("{x},{y}"),
                None => "none".to_string(),
            },
        );
        kv("dt", m.env.dt.to_string());
        kv("accel_max", m.env.accel_max.to_string());
        kv("v_max", m.env.v_max.to_string());
        kv("goal_velocity_max", m.env.goal_velocity_max.to_string());
        kv("goal_position_range", m.env.goal_position_range.to_string());
        kv("master_seed", m.master_seed.to_string());
        kv("iterations", m.iterations.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_tasks", self.eval_tasks.to_string());
        s
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ESML";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_INJECTION: u32 = u32::MAX;

/// Serialized meta-distributions.
///
/// Layout, all little-endian: magic `ESML`; `u32` version; `u64` iteration;
/// `u64` master seed; actor then critic layout, each as `u32` layer count,
/// `u32` injection index (`u32::MAX` for none), `u32` action dim and per
/// layer `u32` input, output and activation code; then `mu_a`, `sigma_a`,
/// `mu_c`, `sigma_c`, each a `u64` length followed by `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub actor_layout: NetLayout,
    pub critic_layout: NetLayout,
    pub mu_a: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub mu_c: Vec<f64>,
    pub sigma_c: Vec<f64>,
    pub iteration: u64,
    pub master_seed: u64,
}

impl Checkpoint {
    pub fn from_state(state: &MetaState, iteration: u64, master_seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            actor_layout: (**state.actor.layout()).clone(),
            critic_layout: (**state.critic.layout()).clone(),
            mu_a: state.actor.mu().to_vec(),
            sigma_a: state.actor.sigma().to_vec(),
            mu_c: state.critic.mu().to_vec(),
            sigma_c: state.critic.sigma().to_vec(),
            iteration,
            master_seed,
        }
    }

    pub fn to_state(&self, bounds: SigmaBounds) -> Result<MetaState> {
        Ok(MetaState {
            actor: GaussianParamDist::from_parts(
                Arc::new(self.actor_layout.clone()),
                self.mu_a.clone(),
                self.sigma_a.clone(),
                bounds,
            )?,
            critic: GaussianParamDist::from_parts(
                Arc::new(self.critic_layout.clone()),
                self.mu_c.clone(),
                self.sigma_c.clone(),
                bounds,
            )?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        for layout in [&self.actor_layout, &self.critic_layout] {
            write_layout(&mut out, layout);
        }
        for v in [&self.mu_a, &self.sigma_a, &self.mu_c, &self.sigma_c] {
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version == 0 || version > CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let iteration = r.u64("iteration")?;
        let master_seed = r.u64("master seed")?;
        let actor_layout = read_layout(&mut r)?;
        let critic_layout = read_layout(&mut r)?;
        let mut vecs = Vec::with_capacity(4);
        for _ in 0..4 {
            let len = r.u64("vector length")? as usize;
            if len > r.remaining() / 8 {
                return Err(CheckpointError::Truncated("vector data"));
            }
            let v: Vec<f64> = (0..len).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
            vecs.push(v);
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        let sigma_c = vecs.pop().unwrap();
        let mu_c = vecs.pop().unwrap();
        let sigma_a = vecs.pop().unwrap();
        let mu_a = vecs.pop().unwrap();
        if mu_a.len() != actor_layout.total_params() || sigma_a.len() != actor_layout.total_params() {
            return Err(CheckpointError::Malformed("actor vectors do not match layout".into()));
        }
        if mu_c.len() != critic_layout.total_params() || sigma_c.len() != critic_layout.total_params() {
            return Err(CheckpointError::Malformed("critic vectors do not match layout".into()));
        }
        if sigma_a.iter().chain(&sigma_c).any(|&s| s.is_nan() || s <= 0.0) {
            return Err(CheckpointError::Malformed("sigma must be strictly positive".into()));
        }
        Ok(Self {
            format_version: version,
            actor_layout,
            critic_layout,
            mu_a,
            sigma_a,
            mu_c,
            sigma_c,
            iteration,
            master_seed,
        })
    }
}

fn write_layout(out: &mut Vec<u8>, layout: &NetLayout) {
    out.extend_from_slice(&(layout.layers().len() as u32).to_le_bytes());
    let inj = layout.action_injection().map_or(NO_INJECTION, |i| i as u32);
    out.extend_from_slice(&inj.to_le_bytes());
    out.extend_from_slice(&(layout.action_dim() as u32).to_le_bytes());
    for l in layout.layers() {
        out.extend_from_slice(&(l.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.output_dim as u32).to_le_bytes());
        out.extend_from_slice(&l.activation.code().to_le_bytes());
    }
}

fn read_layout(r: &mut Reader<'_>) -> std::result::Result<NetLayout, CheckpointError> {
    let n = r.u32("layer count")? as usize;
    let inj = r.u32("injection")?;
    let action_dim = r.u32("action dim")? as usize;
    if n > r.remaining() / 12 {
        return Err(CheckpointError::Truncated("layers"));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let i = r.u32("layer input")? as usize;
        let o = r.u32("layer output")? as usize;
        let code = r.u32("activation")?;
        let act = Activation::from_code(code)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown activation {code}")))?;
        layers.push(LayerSpec::new(i, o, act));
    }
    let injection = (inj != NO_INJECTION).then_some((inj as usize, action_dim));
    NetLayout::new(layers, injection).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, "vector data")?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str =
    "iteration,fitness_mean,fitness_max,fitness_min,fitness_std,sigma_mean_actor,sigma_mean_critic,wall_seconds";

pub fn format_metrics(stats: &[IterationStats]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.fitness_mean,
            r.fitness_max,
            r.fitness_min,
            r.fitness_std,
            r.sigma_mean_actor,
            r.sigma_mean_critic,
            r.wall_seconds
        );
    }
    s
}

pub fn parse_metrics(text: &str) -> Result<Vec<IterationStats>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidArgument("metrics header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::InvalidArgument(format!("bad metrics row `{l}`")));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number `{}`", f[i])))
            };
            Ok(IterationStats {
                iteration: f[0]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad iteration `{}`", f[0])))?,
                fitness_mean: num(1)?,
                fitness_max: num(2)?,
                fitness_min: num(3)?,
                fitness_std: num(4)?,
                sigma_mean_actor: num(5)?,
                sigma_mean_critic: num(6)?,
                wall_seconds: num(7)?,
            })
        })
        .collect()
}

pub fn emit_metrics(stats: &[IterationStats], path: &Path) -> Result<()> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("no iterations to write".into()));
    }
    fs::write(path, format_metrics(stats))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task_index: usize,
    pub goal: [f64; 2],
    /// Return of the mean-of-K actor before adaptation.
    pub pre_return: f64,
    pub post_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_pre(&self) -> f64 {
        self.rows.iter().map(|r| r.pre_return).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_post(&self) -> f64 {
        self.rows.iter().map(|r| r.post_return).sum::<f64>() / self.rows.len() as f64
    }

    /// Share of tasks where adaptation raised the return.
    pub fn improved_fraction(&self) -> f64 {
        self.rows.iter().filter(|r| r.post_return > r.pre_return).count() as f64 / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,goal_x,goal_y,pre_return,post_return\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.task_index, r.goal[0], r.goal[1], r.pre_return, r.post_return
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "tasks,mean_pre,mean_post,improved_fraction\n{},{},{},{}\n",
            self.rows.len(),
            self.mean_pre(),
            self.mean_post(),
            self.improved_fraction()
        )
    }
}

/// Held-out tasks for evaluation; disjoint streams from training.
pub fn eval_tasks(cfg: &MetaConfig, count: usize, seed: u64) -> Vec<Task> {
    let env = PointMass::new(cfg.env);
    let mut rng = keyed_rng(seed, &[tag::EVAL, tag::TASKS]);
    (0..count).map(|_| env.sample_task(cfg.task_family, &mut rng)).collect()
}

/// For each held-out task: the return of the mean-of-K actor, then the
/// return after exploring with the K actors and adapting for `adapt_steps`
/// rounds.
pub fn run_eval(
    state: &MetaState,
    cfg: &MetaConfig,
    eval_tasks_n: usize,
    adapt_steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    let tasks = eval_tasks(cfg, eval_tasks_n, seed);
    let adapt_cfg = crate::ddpg::AdaptConfig {
        grad_steps_per_adapt: adapt_steps,
        ..cfg.adapt
    };
    let env = PointMass::new(cfg.env);
    let eval_seed = derive_seed(seed, &[tag::EVAL]);
    let pool = cfg.pool()?;
    let rows = pool.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| -> Result<EvalRow> {
                let seeds: Vec<PerturbationSeed> = (0..cfg.k as u32)
                    .map(|j| PerturbationSeed::actor(eval_seed, i as u32, j))
                    .collect();
                let (actors, mean) = state.actor.sample_k_and_mean(&seeds)?;
                let critic = state.critic.sample(PerturbationSeed::critic(eval_seed, i as u32));
                let pre = env.rollout(&mean, task, cfg.horizon)?.episode_return;
                let adapt_seed = derive_seed(eval_seed, &[tag::ADAPT, i as u64]);
                let out = adapt_on_task(&env, task, &actors, &mean, &critic, cfg, &adapt_cfg, adapt_seed)?;
                Ok(EvalRow {
                    task_index: i,
                    goal: task.goal_pair(),
                    pre_return: pre,
                    post_return: out.test.episode_return,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport { rows })
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

pub const INIT_CHECKPOINT: &str = "init.esml";
pub const FINAL_CHECKPOINT: &str = "checkpoint.esml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub init_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub state: MetaState,
    pub stats: Vec<IterationStats>,
}

/// Trains per `cfg`, writing the initial and periodic checkpoints, the
/// resolved config and the metrics CSV into `cfg.output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    let seed = cfg.meta.master_seed;
    let init = MetaState::initial(&cfg.meta)?;
    let init_path = dir.join(INIT_CHECKPOINT);
    let final_path = dir.join(FINAL_CHECKPOINT);
    let metrics_path = dir.join(METRICS_FILE);
    save_checkpoint(&Checkpoint::from_state(&init, 0, seed), &init_path)?;
    let mut history: Vec<IterationStats> = Vec::new();
    let outcome = crate::meta::train_from(init, &cfg.meta, 0, |it, state, stats| {
        history.push(stats.clone());
        log::info!(
            "iter {it}: fitness mean {:.3} max {:.3} sigma_a {:.5} ({:.2}s)",
            stats.fitness_mean,
            stats.fitness_max,
            stats.sigma_mean_actor,
            stats.wall_seconds
        );
        if (it + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&Checkpoint::from_state(state, (it + 1) as u64, seed), &final_path)?;
            emit_metrics(&history, &metrics_path)?;
        }
        Ok(())
    })?;
    save_checkpoint(
        &Checkpoint::from_state(&outcome.state, outcome.iterations_run as u64, seed),
        &final_path,
    )?;
    if !outcome.stats.is_empty() {
        emit_metrics(&outcome.stats, &metrics_path)?;
    }
    Ok(RunArtifacts {
        init_checkpoint: init_path,
        final_checkpoint: final_path,
        metrics: metrics_path,
        state: outcome.state,
        stats: outcome.stats,
    })
}
