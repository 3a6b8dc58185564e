//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use esmeta::nn::{
    actor_backward, build_actor_layout, build_critic_layout, critic_backward, Activation, FlatParams, NetLayout,
};
use esmeta::rng::keyed_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

/// Step of the central differences. Both evaluations run in double-double
/// arithmetic so rounding stays far below the tested tolerance.
pub const FD_STEP: f64 = 1e-5;

/// ReLU pre-activations closer to zero than this make a sample ineligible,
/// since a step could cross the kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases uniform in `±0.5`.
pub fn random_params(layout: NetLayout, rng: &mut ChaCha8Rng) -> FlatParams {
    let mut v = Vec::with_capacity(layout.total_params());
    for l in layout.layers() {
        let r = 1.0 / (l.input_dim as f64).sqrt();
        v.extend((0..l.weight_count()).map(|_| rng.random_range(-r..r)));
        v.extend((0..l.output_dim).map(|_| rng.random_range(-0.5..0.5)));
    }
    FlatParams::new(Arc::new(layout), v).unwrap()
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn widen(v: &[f64]) -> Vec<TwoFloat> {
    v.iter().map(|&x| TwoFloat::from(x)).collect()
}

/// Forward pass written against the flat layout directly, in double-double
/// precision. Returns the outputs and the smallest |pre-activation| seen at
/// any ReLU unit.
pub fn dd_forward(
    layout: &NetLayout,
    params: &[TwoFloat],
    obs: &[TwoFloat],
    action: Option<&[TwoFloat]>,
) -> (Vec<TwoFloat>, f64) {
    let mut x = obs.to_vec();
    let mut offset = 0;
    let mut nearest_kink = f64::INFINITY;
    for (i, l) in layout.layers().iter().enumerate() {
        if layout.action_injection() == Some(i) {
            x.extend_from_slice(action.unwrap());
        }
        assert_eq!(x.len(), l.input_dim);
        let w = &params[offset..offset + l.weight_count()];
        let b = &params[offset + l.weight_count()..offset + l.param_count()];
        offset += l.param_count();
        x = (0..l.output_dim)
            .map(|o| {
                let mut z = b[o];
                for k in 0..l.input_dim {
                    z += w[o * l.input_dim + k] * x[k];
                }
                match l.activation {
                    Activation::Relu => {
                        nearest_kink = nearest_kink.min(z.hi().abs());
                        if z.hi() > 0.0 {
                            z
                        } else {
                            TwoFloat::from(0.0)
                        }
                    }
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                }
            })
            .collect();
    }
    (x, nearest_kink)
}

fn central(v: &[TwoFloat], f: impl Fn(&[TwoFloat]) -> TwoFloat) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let mut hi = v.to_vec();
            let mut lo = v.to_vec();
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            ((f(&hi) - f(&lo)) / (2.0 * FD_STEP)).hi()
        })
        .collect()
}

/// Finite-difference gradients of `upstream . net(obs, action)`.
pub struct FdGradients {
    pub params: Vec<f64>,
    /// Empty when the net takes no action input.
    pub action: Vec<f64>,
}

/// `None` when the point sits within [`KINK_MARGIN`] of a ReLU kink.
pub fn fd_gradients(p: &FlatParams, obs: &[f64], action: Option<&[f64]>, upstream: &[f64]) -> Option<FdGradients> {
    let layout = p.layout();
    let theta = widen(p.values());
    let s = widen(obs);
    let a = action.map(widen);
    if dd_forward(layout, &theta, &s, a.as_deref()).1 < KINK_MARGIN {
        return None;
    }
    let dot = |out: Vec<TwoFloat>| {
        out.iter()
            .zip(upstream)
            .fold(TwoFloat::from(0.0), |acc, (y, &u)| acc + *y * u)
    };
    let params = central(&theta, |t| dot(dd_forward(layout, t, &s, a.as_deref()).0));
    let action = match &a {
        Some(a) => central(a, |a| dot(dd_forward(layout, &theta, &s, Some(a)).0)),
        None => Vec::new(),
    };
    Some(FdGradients { params, action })
}

/// Worst elementwise relative error over `nets` random actors and `nets`
/// random critics with every dimension in `1..=8`. Samples near a ReLU
/// kink are redrawn.
pub fn worst_gradient_error(nets: usize, seed: u64) -> f64 {
    let mut rng = keyed_rng(seed, &[]);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < nets {
        let obs = rng.random_range(1..=8);
        let act = rng.random_range(1..=4);
        let hidden = rng.random_range(1..=8);

        let actor = random_params(build_actor_layout(obs, act, hidden).unwrap(), &mut rng);
        let critic = random_params(build_critic_layout(obs, act, hidden).unwrap(), &mut rng);
        let s = random_vec(obs, &mut rng);
        let a = random_vec(act, &mut rng);
        let up = random_vec(act, &mut rng);
        let (Some(fa), Some(fc)) = (
            fd_gradients(&actor, &s, None, &up),
            fd_gradients(&critic, &s, Some(&a), &[1.0]),
        ) else {
            continue;
        };
        checked += 1;

        worst = worst.max(max_rel(&actor_backward(&actor, &s, &up).unwrap(), &fa.params));
        let g = critic_backward(&critic, &s, &a, 1.0).unwrap();
        worst = worst.max(max_rel(&g.param_grads, &fc.params));
        worst = worst.max(max_rel(&g.input_grads, &fc.action));
    }
    worst
}

/// Five-coordinate search distribution for the quadratic oracle: sigma 0.5
/// everywhere and the mean offset from the optimum by 0.7 sigma.
pub struct Quadratic {
    pub dist: esmeta::dist::GaussianParamDist,
    pub optimum: Vec<f64>,
}

pub fn five_param_layout() -> Arc<NetLayout> {
    Arc::new(NetLayout::new(vec![esmeta::nn::LayerSpec::new(4, 1, Activation::Identity)], None).unwrap())
}

impl Quadratic {
    pub fn new() -> Self {
        let optimum = vec![0.3, -0.2, 0.1, 0.5, -0.4];
        let sigma = vec![0.5; 5];
        let mu: Vec<f64> = optimum.iter().zip(&sigma).map(|(c, s)| c + 0.7 * s).collect();
        let dist = esmeta::dist::GaussianParamDist::from_parts(
            five_param_layout(),
            mu,
            sigma,
            esmeta::dist::SigmaBounds::default(),
        )
        .unwrap();
        Self { dist, optimum }
    }

    pub fn fitness(&self, theta: &[f64]) -> f64 {
        -theta
            .iter()
            .zip(&self.optimum)
            .map(|(t, c)| (t - c) * (t - c))
            .sum::<f64>()
    }

    /// Exact gradients of the expected fitness: `-2 (mu - c)` and `-2 sigma`.
    pub fn analytic(&self) -> (Vec<f64>, Vec<f64>) {
        let d = &self.dist;
        (
            d.mu().iter().zip(&self.optimum).map(|(m, c)| -2.0 * (m - c)).collect(),
            d.sigma().iter().map(|s| -2.0 * s).collect(),
        )
    }

    /// Search gradient from `m` single-sample workers.
    pub fn estimate(&self, m: usize, seed: u64) -> esmeta::dist::MetaGradients {
        let samples: Vec<FlatParams> = (0..m as u32)
            .map(|i| self.dist.sample(esmeta::dist::PerturbationSeed::critic(seed, i)))
            .collect();
        let fitness: Vec<f64> = samples.iter().map(|s| self.fitness(s.values())).collect();
        esmeta::dist::nes_gradient_critic(&samples, &fitness, &self.dist).unwrap()
    }

    /// Largest per-coordinate relative error of an `m`-worker estimate.
    pub fn worst_rel_err(&self, m: usize, seed: u64) -> f64 {
        let g = self.estimate(m, seed);
        let (gm, gs) = self.analytic();
        let e_mu = g.grad_mu.iter().zip(&gm).map(|(a, b)| (a - b).abs() / b.abs());
        let e_sigma = g.grad_sigma.iter().zip(&gs).map(|(a, b)| (a - b).abs() / b.abs());
        e_mu.chain(e_sigma).fold(0.0, f64::max)
    }
}

/// Empirical variance of the mean-of-K sample over `reps` repetitions,
/// divided by `sigma^2 / K` and pooled over coordinates. Returns the ratio
/// and its standard error under the Gaussian law.
pub fn mean_of_k_variance_ratio(k: usize, reps: usize, seed: u64) -> (f64, f64) {
    let sigma = vec![0.2, 0.5, 1.0, 0.05, 0.8];
    let dist = esmeta::dist::GaussianParamDist::from_parts(
        five_param_layout(),
        vec![1.0, -2.0, 0.0, 0.5, 3.0],
        sigma.clone(),
        esmeta::dist::SigmaBounds::new(1e-4, 1.0).unwrap(),
    )
    .unwrap();
    let d = sigma.len();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for r in 0..reps as u32 {
        let seeds: Vec<_> = (0..k as u32)
            .map(|j| esmeta::dist::PerturbationSeed::actor(seed, r, j))
            .collect();
        let (_, mean) = dist.sample_k_and_mean(&seeds).unwrap();
        for (i, v) in mean.values().iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = reps as f64;
    let ratio = (0..d)
        .map(|i| {
            let m = sum[i] / n;
            let var = (sum_sq[i] - n * m * m) / (n - 1.0);
            var / (sigma[i] * sigma[i] / k as f64)
        })
        .sum::<f64>()
        / d as f64;
    (ratio, (2.0 / (n - 1.0)).sqrt() / (d as f64).sqrt())
}
