//! Instance-guided resampling: redistributes weak Gaussians toward
//! semantically strong ones, instance by instance, with a volume-conserving
//! opacity/occupancy adjustment so that a source and its replicas composite
//! to the source's original coverage.
//!
//! Strength is the instance response `gamma_i^k = pi_i * p_i^k` (occupancy
//! times calibrated identity). Each round draws pairs from two complementary
//! distributions — weak candidates proportional to `1/clamp(gamma, eps, 1)`,
//! strong candidates proportional to `clamp(gamma, eps, 1)` — overwrites the
//! weak Gaussian with a jittered copy of the strong one, and finally rescales
//! `alpha`/`pi` of every source and its replicas by the closed form
//! `1 - (1 - v)^(1/(n+1))`.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::gaussians::{logit, sigmoid, GaussianSet};

/// Per-instance sampling distributions for one round.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// Target instance id (1-based).
    pub instance: usize,
    /// Weak-candidate probabilities over Gaussian indices (sums to 1).
    pub weak: Vec<f64>,
    /// Strong-candidate probabilities over Gaussian indices (sums to 1).
    pub strong: Vec<f64>,
    /// Global pair budget `ceil(rate * N)`.
    pub budget: usize,
}

/// One executed overwrite: Gaussian `weak` became a replica of `strong`
/// targeted at `instance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResamplePair {
    pub weak: usize,
    pub strong: usize,
    pub instance: usize,
}

/// Outcome of one resampling round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundReport {
    pub pairs: Vec<ResamplePair>,
    /// The pair budget the round aimed for.
    pub budget: usize,
    /// Draws abandoned because weak == strong persisted through all retries.
    pub skipped: usize,
}

impl RoundReport {
    /// Line-oriented log form, one `instance= weak= strong=` record per pair.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format!(
                "instance={} weak={} strong={}\n",
                p.instance, p.weak, p.strong
            ));
        }
        out
    }
}

/// Joint existence-and-identity strength of Gaussian `i` for instance `k`
/// (1-based): occupancy times calibrated identity.
pub fn instance_response(set: &GaussianSet, i: usize, k: usize) -> Result<f64> {
    if i >= set.len() {
        return Err(Error::InvalidArgument(format!(
            "gaussian index {i} out of range ({} present)",
            set.len()
        )));
    }
    if k < 1 || k > set.instance_count {
        return Err(Error::InvalidArgument(format!(
            "instance {k} out of range 1..={}",
            set.instance_count
        )));
    }
    let identity = set.effective_identity(i)?;
    Ok(set.occupancy(i) * identity[k - 1])
}

/// Builds the weak/strong distributions for instance `k` with responses
/// clamped to `[eps, 1]`, and the pair budget `ceil(rate * N)`.
pub fn build_plan(set: &GaussianSet, k: usize, eps: f64, rate: f64) -> Result<SamplingPlan> {
    if set.is_empty() {
        return Err(Error::Usage("cannot build a sampling plan for an empty set".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("rate must lie in (0, 1], got {rate}")));
    }
    let n = set.len();
    let mut strong = Vec::with_capacity(n);
    let mut weak = Vec::with_capacity(n);
    for i in 0..n {
        let clamped = instance_response(set, i, k)?.clamp(eps, 1.0);
        strong.push(clamped);
        weak.push(1.0 / clamped);
    }
    let strong_mass: f64 = strong.iter().sum();
    let weak_mass: f64 = weak.iter().sum();
    for v in &mut strong {
        *v /= strong_mass;
    }
    for v in &mut weak {
        *v /= weak_mass;
    }
    Ok(SamplingPlan { instance: k, weak, strong, budget: (rate * n as f64).ceil() as usize })
}

/// Closed-form rescaling so that `replicas + 1` coincident copies composite
/// to the original value: `1 - (1 - value)^(1 / (replicas + 1))`.
pub fn volume_conserving_adjustment(value: f64, replicas: u32) -> f64 {
    1.0 - (1.0 - value).powf(1.0 / f64::from(replicas + 1))
}

/// Runs one resampling round over all instances in round-robin order until
/// the budget `ceil(rate * N)` is spent, then applies the volume-conserving
/// adjustment and resets the replica counters.
pub fn resample_round(
    set: &mut GaussianSet,
    eps: f64,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RoundReport> {
    if set.len() < 2 {
        return Err(Error::Usage(format!(
            "resampling needs at least 2 Gaussians, set has {}",
            set.len()
        )));
    }
    if set.instance_count == 0 {
        return Err(Error::Usage("resampling needs at least one instance".into()));
    }
    let k_total = set.instance_count;

    // Distributions are built once from the pre-round state.
    let mut samplers = Vec::with_capacity(k_total);
    let mut budget = 0;
    for k in 1..=k_total {
        let plan = build_plan(set, k, eps, rate)?;
        budget = plan.budget;
        let weak = WeightedIndex::new(&plan.weak)
            .map_err(|e| Error::Numeric(format!("degenerate weak distribution: {e}")))?;
        let strong = WeightedIndex::new(&plan.strong)
            .map_err(|e| Error::Numeric(format!("degenerate strong distribution: {e}")))?;
        samplers.push((weak, strong));
    }

    let kk = set.instance_count;
    let mut pairs = Vec::with_capacity(budget);
    let mut skipped = 0;
    let mut replicas: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for j in 0..budget {
        let k = 1 + (j % kk);
        let (weak_dist, strong_dist) = &samplers[k - 1];
        let w = weak_dist.sample(rng);
        let mut s = strong_dist.sample(rng);
        let mut tries = 0;
        while s == w && tries < 16 {
            s = strong_dist.sample(rng);
            tries += 1;
        }
        if s == w {
            skipped += 1;
            continue;
        }

        // Overwrite the weak Gaussian as a jittered replica of the strong one.
        let mut position = set.positions[s];
        for axis in 0..3 {
            let sigma = 0.5 * set.log_scales[s][axis].exp();
            let noise = Normal::new(0.0, sigma)
                .map_err(|e| Error::Numeric(format!("replica jitter: {e}")))?;
            position[axis] += noise.sample(rng);
        }
        set.positions[w] = position;
        set.rotations[w] = set.rotations[s];
        set.log_scales[w] = set.log_scales[s];
        set.colors[w] = set.colors[s];
        set.opacity_logits[w] = set.opacity_logits[s];
        set.occupancy_logits[w] = set.occupancy_logits[s];
        let ident: Vec<f64> = set.base_identity_row(s).to_vec();
        set.base_identity[w * kk..(w + 1) * kk].copy_from_slice(&ident);
        let calib: Vec<f64> = set.calibration_row(s).to_vec();
        set.calibration[w * kk..(w + 1) * kk].copy_from_slice(&calib);
        set.replica_counts[w] = 0;
        set.replica_counts[s] += 1;
        replicas.entry(s).or_default().push(w);
        pairs.push(ResamplePair { weak: w, strong: s, instance: k });
    }

    // Volume-conserving adjustment, sources in ascending index order.
    for (&source, members) in &replicas {
        let n = members.len() as u32;
        let alpha = volume_conserving_adjustment(sigmoid(set.opacity_logits[source]), n);
        let pi = volume_conserving_adjustment(sigmoid(set.occupancy_logits[source]), n);
        let alpha_logit = logit(alpha);
        let pi_logit = logit(pi);
        set.opacity_logits[source] = alpha_logit;
        set.occupancy_logits[source] = pi_logit;
        for &m in members {
            set.opacity_logits[m] = alpha_logit;
            set.occupancy_logits[m] = pi_logit;
        }
    }
    set.replica_counts.fill(0);

    Ok(RoundReport { pairs, budget, skipped })
}
