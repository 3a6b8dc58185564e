//! Diagonal Gaussian meta-distributions over flat network parameters.
//!
//! Samples are regenerated from [`PerturbationSeed`]s alone, so a worker's
//! perturbations never have to be shipped around. The search-gradient
//! estimators weight the log-likelihood score of each *sampled* parameter
//! vector by the fitness its worker reported:
//!
//! ```text
//! grad_mu    = 1/M sum_i F_i sum_j (theta_ij - mu) / sigma^2
//! grad_sigma = 1/M sum_i F_i sum_j ((theta_ij - mu)^2 - sigma^2) / sigma^3
//! ```

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid_arg, Error, Result};
use crate::nn::{FlatParams, NetLayout};
use crate::rng::{keyed_rng, tag};

/// Member index reserved for a worker's critic sample.
pub const CRITIC_MEMBER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for SigmaBounds {
    fn default() -> Self {
        Self { min: 1e-4, max: 1.0 }
    }
}

impl SigmaBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min <= max && max.is_finite()) {
            return Err(invalid_arg(format!("invalid sigma bounds [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }
}

/// Key of one sampled parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerturbationSeed {
    pub worker_index: u32,
    pub member_index: u32,
    pub master_seed: u64,
}

impl PerturbationSeed {
    pub fn actor(master_seed: u64, worker_index: u32, member_index: u32) -> Self {
        Self {
            worker_index,
            member_index,
            master_seed,
        }
    }

    pub fn critic(master_seed: u64, worker_index: u32) -> Self {
        Self {
            worker_index,
            member_index: CRITIC_MEMBER,
            master_seed,
        }
    }

    /// Fills `out` with standard normals from this seed's stream.
    pub fn fill_standard_normal(&self, out: &mut [f64]) {
        let mut rng = keyed_rng(
            self.master_seed,
            &[tag::PERTURB, self.worker_index as u64, self.member_index as u64],
        );
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParamDist {
    layout: Arc<NetLayout>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    bounds: SigmaBounds,
}

impl GaussianParamDist {
    /// Broadcasts `sigma_init` (clamped into `bounds`) to every coordinate.
    pub fn new(mean: FlatParams, sigma_init: f64, bounds: SigmaBounds) -> Result<Self> {
        if !(sigma_init > 0.0 && sigma_init.is_finite()) {
            return Err(invalid_arg(format!("sigma_init must be positive, got {sigma_init}")));
        }
        let s = sigma_init.clamp(bounds.min, bounds.max);
        let n = mean.len();
        let layout = mean.layout().clone();
        Ok(Self {
            layout,
            mu: mean.into_values(),
            sigma: vec![s; n],
            bounds,
        })
    }

    pub fn from_parts(layout: Arc<NetLayout>, mu: Vec<f64>, sigma: Vec<f64>, bounds: SigmaBounds) -> Result<Self> {
        let n = layout.total_params();
        if mu.len() != n || sigma.len() != n {
            return Err(invalid_arg(format!(
                "mu/sigma lengths {}/{} do not match layout ({n})",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("mu must be finite"));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid_arg("sigma must be strictly positive and finite"));
        }
        Ok(Self {
            layout,
            mu,
            sigma,
            bounds,
        })
    }

    pub fn layout(&self) -> &Arc<NetLayout> {
        &self.layout
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn bounds(&self) -> SigmaBounds {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mean_params(&self) -> FlatParams {
        FlatParams::from_raw(self.layout.clone(), self.mu.clone())
    }

    pub fn sigma_mean(&self) -> f64 {
        self.sigma.iter().sum::<f64>() / self.sigma.len() as f64
    }

    /// `mu + sigma * eps`, `eps` drawn from the seed's stream.
    pub fn sample(&self, seed: PerturbationSeed) -> FlatParams {
        let mut eps = vec![0.0; self.mu.len()];
        seed.fill_standard_normal(&mut eps);
        for ((e, m), s) in eps.iter_mut().zip(&self.mu).zip(&self.sigma) {
            *e = m + s * *e;
        }
        FlatParams::from_raw(self.layout.clone(), eps)
    }

    /// Samples one member per seed and their coordinatewise mean.
    pub fn sample_k_and_mean(&self, seeds: &[PerturbationSeed]) -> Result<(Vec<FlatParams>, FlatParams)> {
        if seeds.is_empty() {
            return Err(invalid_arg("K must be >= 1"));
        }
        let distinct: HashSet<_> = seeds.iter().collect();
        if distinct.len() != seeds.len() {
            return Err(invalid_arg("perturbation seeds must be distinct"));
        }
        let samples: Vec<FlatParams> = seeds.iter().map(|&s| self.sample(s)).collect();
        let mean = mean_of(&samples);
        Ok((samples, mean))
    }

    /// One plain SGD ascent step; sigma is clamped into its bounds.
    pub fn sgd_step(&self, grads: &MetaGradients, lr_mu: f64, lr_sigma: f64) -> Result<Self> {
        if !(lr_mu >= 0.0 && lr_sigma >= 0.0) {
            return Err(invalid_arg("learning rates must be >= 0"));
        }
        if grads.grad_mu.len() != self.len() || grads.grad_sigma.len() != self.len() {
            return Err(invalid_arg("gradient length mismatch"));
        }
        if !grads.is_finite() {
            return Err(Error::NumericFailure("non-finite meta gradient".into()));
        }
        let mu: Vec<f64> = self.mu.iter().zip(&grads.grad_mu).map(|(m, g)| m + lr_mu * g).collect();
        let sigma = self
            .sigma
            .iter()
            .zip(&grads.grad_sigma)
            .map(|(s, g)| (s + lr_sigma * g).clamp(self.bounds.min, self.bounds.max))
            .collect();
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("mu update overflowed".into()));
        }
        Ok(Self {
            layout: self.layout.clone(),
            mu,
            sigma,
            bounds: self.bounds,
        })
    }
}

pub(crate) fn mean_of(samples: &[FlatParams]) -> FlatParams {
    let n = samples[0].len();
    let mut acc = vec![0.0; n];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    let k = samples.len() as f64;
    for a in &mut acc {
        *a /= k;
    }
    FlatParams::from_raw(samples[0].layout().clone(), acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradients {
    pub grad_mu: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

impl MetaGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            grad_mu: vec![0.0; n],
            grad_sigma: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grad_mu.iter().chain(&self.grad_sigma).all(|v| v.is_finite())
    }
}

/// Fitness-independent log-likelihood scores of one worker's samples:
/// `sum_j (theta_j - mu) / sigma^2` and `sum_j ((theta_j - mu)^2 - sigma^2) / sigma^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSums(MetaGradients);

impl ScoreSums {
    pub fn from_samples(dist: &GaussianParamDist, samples: &[FlatParams]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid_arg("worker contributed no samples"));
        }
        let mut sums = MetaGradients::zeros(dist.len());
        for s in samples {
            if s.len() != dist.len() {
                return Err(invalid_arg(format!(
                    "sample length {} does not match distribution ({})",
                    s.len(),
                    dist.len()
                )));
            }
            for (j, &theta) in s.values().iter().enumerate() {
                let sigma = dist.sigma[j];
                let d = theta - dist.mu[j];
                let s2 = sigma * sigma;
                sums.grad_mu[j] += d / s2;
                sums.grad_sigma[j] += (d * d - s2) / (s2 * sigma);
            }
        }
        Ok(Self(sums))
    }

    /// Regenerates the samples behind `seeds` and scores them.
    pub fn from_seeds(dist: &GaussianParamDist, seeds: &[PerturbationSeed]) -> Result<Self> {
        let samples: Vec<FlatParams> = seeds.iter().map(|&s| dist.sample(s)).collect();
        Self::from_samples(dist, &samples)
    }
}

/// Fitness-weighted average of worker scores.
///
/// Workers are added in a fixed order; `finish` divides by the number of
/// workers actually added, which is how dropped workers renormalize.
#[derive(Debug, Clone)]
pub struct NesAccumulator {
    sum: MetaGradients,
    workers: usize,
}

impl NesAccumulator {
    pub fn new(dist: &GaussianParamDist) -> Self {
        Self {
            sum: MetaGradients::zeros(dist.len()),
            workers: 0,
        }
    }

    pub fn add(&mut self, scores: &ScoreSums, fitness: f64) -> Result<()> {
        if scores.0.grad_mu.len() != self.sum.grad_mu.len() {
            return Err(invalid_arg("score length mismatch"));
        }
        self.workers += 1;
        if fitness != 0.0 {
            for (acc, s) in self.sum.grad_mu.iter_mut().zip(&scores.0.grad_mu) {
                *acc += fitness * s;
            }
            for (acc, s) in self.sum.grad_sigma.iter_mut().zip(&scores.0.grad_sigma) {
                *acc += fitness * s;
            }
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn finish(self) -> Result<MetaGradients> {
        if self.workers == 0 {
            return Err(invalid_arg("M must be >= 1"));
        }
        let m = self.workers as f64;
        let mut g = self.sum;
        for v in g.grad_mu.iter_mut().chain(g.grad_sigma.iter_mut()) {
            *v /= m;
        }
        Ok(g)
    }
}

/// Search gradient for the actor distribution: each worker holds K samples.
pub fn nes_gradient_actor(
    worker_samples: &[Vec<FlatParams>],
    fitness: &[f64],
    dist: &GaussianParamDist,
) -> Result<MetaGradients> {
    if worker_samples.len() != fitness.len() {
        return Err(invalid_arg(format!(
            "{} workers but {} fitness values",
            worker_samples.len(),
            fitness.len()
        )));
    }
    let mut acc = NesAccumulator::new(dist);
    for (samples, &f) in worker_samples.iter().zip(fitness) {
        acc.add(&ScoreSums::from_samples(dist, samples)?, f)?;
    }
    acc.finish()
}

/// Search gradient for the critic distribution: one sample per worker.
pub fn nes_gradient_critic(
    phi_samples: &[FlatParams],
    fitness: &[f64],
    dist: &GaussianParamDist,
) -> Result<MetaGradients> {
    if phi_samples.len() != fitness.len() {
        return Err(invalid_arg(format!(
            "{} samples but {} fitness values",
            phi_samples.len(),
            fitness.len()
        )));
    }
    let mut acc = NesAccumulator::new(dist);
    for (s, &f) in phi_samples.iter().zip(fitness) {
        acc.add(&ScoreSums::from_samples(dist, std::slice::from_ref(s))?, f)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitnessShaping {
    None,
    CenteredRank,
}

impl FitnessShaping {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "centered_rank" => Some(Self::CenteredRank),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::CenteredRank => "centered_rank",
        }
    }
}

/// Centered ranks map fitness onto evenly spaced values in `[-0.5, 0.5]`;
/// tied values share their average rank.
pub fn shape_fitness(raw: &[f64], mode: FitnessShaping) -> Vec<f64> {
    match mode {
        FitnessShaping::None => raw.to_vec(),
        FitnessShaping::CenteredRank => {
            let n = raw.len();
            if n <= 1 {
                return vec![0.0; n];
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
            let mut ranks = vec![0.0; n];
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && raw[order[j + 1]] == raw[order[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0;
                for &idx in &order[i..=j] {
                    ranks[idx] = avg;
                }
                i = j + 1;
            }
            let denom = (n - 1) as f64;
            ranks.iter().map(|r| r / denom - 0.5).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_actor_layout, Activation, LayerSpec};

    fn flat_layout(n: usize) -> Arc<NetLayout> {
        // a single identity layer 1 -> n-1 has n*... pick dims so total = n
        // total = in*out + out = out*(in+1); use in=1 => 2*out
        assert!(n.is_multiple_of(2));
        Arc::new(NetLayout::new(vec![LayerSpec::new(1, n / 2, Activation::Identity)], None).unwrap())
    }

    fn dist_with(mu: f64, sigma: f64, n: usize) -> GaussianParamDist {
        let layout = flat_layout(n);
        GaussianParamDist::from_parts(
            layout,
            vec![mu; n],
            vec![sigma; n],
            SigmaBounds::new(1e-12, 10.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn tiny_sigma_sample_is_mean() {
        let d = dist_with(0.3, 1e-12, 4);
        let s = d.sample(PerturbationSeed::actor(1, 0, 0));
        assert!(s.values().iter().all(|v| (v - 0.3).abs() < 1e-10));
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let d = dist_with(0.0, 1.0, 6);
        let a = d.sample(PerturbationSeed::actor(5, 2, 3));
        let b = d.sample(PerturbationSeed::actor(5, 2, 3));
        let c = d.sample(PerturbationSeed::actor(5, 2, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d.sample(PerturbationSeed::critic(5, 2)));
    }

    #[test]
    fn k1_mean_equals_sample_and_duplicates_rejected() {
        let d = dist_with(0.0, 0.5, 4);
        let seeds = [PerturbationSeed::actor(1, 0, 0)];
        let (s, m) = d.sample_k_and_mean(&seeds).unwrap();
        assert_eq!(s[0], m);
        assert!(d.sample_k_and_mean(&[]).is_err());
        assert!(d.sample_k_and_mean(&[seeds[0], seeds[0]]).is_err());
    }

    #[test]
    fn hand_evaluated_actor_gradients() {
        let sigma = 0.5;
        let d = dist_with(1.0, sigma, 4);
        let layout = d.layout().clone();
        let plus_one = FlatParams::new(layout.clone(), vec![1.0 + sigma; 4]).unwrap();
        let g = nes_gradient_actor(&[vec![plus_one]], &[1.0], &d).unwrap();
        for j in 0..4 {
            assert!((g.grad_mu[j] - 1.0 / sigma).abs() < 1e-12);
            assert!(g.grad_sigma[j].abs() < 1e-12);
        }
        let plus_two = FlatParams::new(layout, vec![1.0 + 2.0 * sigma; 4]).unwrap();
        let g = nes_gradient_actor(&[vec![plus_two.clone()]], &[2.0], &d).unwrap();
        for j in 0..4 {
            assert!((g.grad_mu[j] - 4.0 / sigma).abs() < 1e-12);
            assert!((g.grad_sigma[j] - 6.0 / sigma).abs() < 1e-12);
        }
        let g = nes_gradient_actor(&[vec![plus_two]], &[0.0], &d).unwrap();
        assert!(g.grad_mu.iter().chain(&g.grad_sigma).all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_critic_gradients() {
        let sigma = 0.25;
        let d = dist_with(0.0, sigma, 2);
        let at_mean = d.mean_params();
        let g = nes_gradient_critic(&[at_mean], &[1.0], &d).unwrap();
        for j in 0..2 {
            assert_eq!(g.grad_mu[j], 0.0);
            assert!((g.grad_sigma[j] + 1.0 / sigma).abs() < 1e-12);
        }
        let up = FlatParams::new(d.layout().clone(), vec![0.1; 2]).unwrap();
        let down = FlatParams::new(d.layout().clone(), vec![-0.1; 2]).unwrap();
        let g = nes_gradient_critic(&[up, down], &[3.0, 3.0], &d).unwrap();
        assert!(g.grad_mu.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_length_mismatch_rejected() {
        let d = dist_with(0.0, 1.0, 4);
        let other = FlatParams::zeros(flat_layout(2));
        assert!(nes_gradient_critic(&[other], &[1.0], &d).is_err());
        assert!(nes_gradient_critic(&[], &[], &d).is_err());
        assert!(nes_gradient_actor(&[vec![d.mean_params()]], &[1.0, 2.0], &d).is_err());
    }

    #[test]
    fn centered_rank_examples() {
        assert_eq!(
            shape_fitness(&[10.0, 20.0, 30.0], FitnessShaping::CenteredRank),
            vec![-0.5, 0.0, 0.5]
        );
        assert_eq!(shape_fitness(&[7.0], FitnessShaping::CenteredRank), vec![0.0]);
        assert_eq!(shape_fitness(&[3.0, -1.0], FitnessShaping::None), vec![3.0, -1.0]);
        // ties averaged
        assert_eq!(
            shape_fitness(&[1.0, 5.0, 5.0, 9.0, 5.0], FitnessShaping::CenteredRank),
            vec![-0.5, 0.0, 0.0, 0.5, 0.0]
        );
    }

    #[test]
    fn sgd_step_contracts() {
        let d = dist_with(0.0, 0.1, 4);
        let mut g = MetaGradients::zeros(4);
        assert_eq!(d.sgd_step(&g, 1.0, 1.0).unwrap(), d);
        g.grad_mu = vec![1.0; 4];
        g.grad_sigma = vec![5.0; 4];
        let fixed = d.sgd_step(&g, 0.5, 0.0).unwrap();
        assert_eq!(fixed.sigma(), d.sigma());
        assert_eq!(fixed.mu(), &[0.5; 4]);
        g.grad_sigma = vec![-100.0; 4];
        let floored = d.sgd_step(&g, 0.0, 1.0).unwrap();
        assert!(floored.sigma().iter().all(|&s| s == d.bounds().min));
        g.grad_mu[2] = f64::NAN;
        assert!(matches!(d.sgd_step(&g, 0.1, 0.1), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn actor_layout_sample_shape() {
        let layout = Arc::new(build_actor_layout(4, 2, 8).unwrap());
        let d = GaussianParamDist::new(FlatParams::zeros(layout.clone()), 0.05, SigmaBounds::default()).unwrap();
        let s = d.sample(PerturbationSeed::actor(0, 0, 0));
        assert_eq!(s.len(), layout.total_params());
        assert!((d.sigma_mean() - 0.05).abs() < 1e-15);
    }
}
