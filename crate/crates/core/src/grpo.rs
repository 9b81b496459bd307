//! Group-relative policy optimization: rollout groups with hybrid rewards,
//! group-normalized advantages, and the clipped surrogate objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams, Response, Sampler};
use crate::world::{RewardBreakdown, Task, World};

/// Groups whose reward std is at or below this get all-zero advantages.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// `(r_i − mean) / std` with population std; all zeros when `std <= EPS_STD`.
pub fn group_advantages(totals: &[f64]) -> (Vec<f64>, GroupStats) {
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let adv = if std > EPS_STD {
        totals.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; totals.len()]
    };
    (adv, GroupStats { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: Task,
    pub responses: Vec<Response>,
    pub rewards: Vec<RewardBreakdown>,
    /// One per response, shared by all of its tokens.
    pub advantages: Vec<f64>,
    pub stats: GroupStats,
}

impl RolloutGroup {
    pub fn from_responses(world: &World, task: Task, responses: Vec<Response>) -> Result<Self> {
        if responses.len() < 2 {
            return Err(Error::input("a rollout group needs at least 2 responses"));
        }
        let rewards: Vec<RewardBreakdown> = responses
            .iter()
            .map(|r| world.score(&task, &r.tokens))
            .collect();
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        let (advantages, stats) = group_advantages(&totals);
        Ok(RolloutGroup {
            task,
            responses,
            rewards,
            advantages,
            stats,
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = SampleRef<'_>> {
        self.responses
            .iter()
            .zip(&self.advantages)
            .map(move |(r, &a)| SampleRef {
                task: &self.task,
                response: r,
                advantage: a,
            })
    }
}

/// Samples `n` responses from the behavior snapshot and scores them.
pub fn collect_group(
    world: &World,
    behavior: &PolicyParams,
    task: &Task,
    n: usize,
    sampler: &Sampler,
    rng: &mut impl Rng,
) -> Result<RolloutGroup> {
    if n < 2 {
        return Err(Error::input("group size must be at least 2"));
    }
    let responses = sampler.sample(behavior, task, n, rng)?;
    RolloutGroup::from_responses(world, task.clone(), responses)
}

/// True iff some advantage in the group is non-zero.
pub fn effective(group: &RolloutGroup) -> bool {
    group.advantages.iter().any(|&a| a != 0.0)
}

fn default_epsilon() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Weight of the per-token KL penalty against the reference snapshot.
    #[serde(default)]
    pub kl_coeff: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            epsilon: default_epsilon(),
            kl_coeff: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("{path}.epsilon"), "must lie in (0, 1)"));
        }
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            return Err(Error::config(format!("{path}.kl_coeff"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One response with its advantage, fresh or replayed.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub task: &'a Task,
    pub response: &'a Response,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    /// Objective to maximize.
    pub objective: f64,
    /// Gradient of `objective`.
    pub grad: Gradient,
    /// Share of tokens where the clipped branch of the min is active.
    pub clipped_fraction: f64,
    pub mean_ratio: f64,
    /// Mean per-token KL estimate (0 when no reference is given).
    pub kl: f64,
}

/// Clipped surrogate averaged per response over tokens, then over responses.
///
/// Ratios use the stored behavior log-probabilities. With `kl_coeff > 0` and a
/// reference snapshot, `kl_coeff · KL` is subtracted per token using the
/// estimator `exp(ℓ_ref − ℓ) − (ℓ_ref − ℓ) − 1`.
pub fn surrogate(
    params: &PolicyParams,
    samples: &[SampleRef<'_>],
    clip: &ClipConfig,
    kl_reference: Option<&PolicyParams>,
) -> Result<SurrogateOutput> {
    let mut grad = params.zero_gradient();
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut ratio_sum = 0.0;
    let mut kl_sum = 0.0;
    let g = samples.len().max(1) as f64;
    let use_kl = clip.kl_coeff > 0.0 && kl_reference.is_some();

    for s in samples {
        let r = s.response;
        if r.behavior_logprobs.len() != r.tokens.len() {
            return Err(Error::input(
                "response is missing behavior log-probabilities for some tokens",
            ));
        }
        if r.tokens.is_empty() {
            continue;
        }
        let trace = params.trace(s.task, &r.tokens)?;
        let ref_lp = match (use_kl, kl_reference) {
            (true, Some(reference)) => Some(reference.logprob(s.task, &r.tokens)?.1),
            _ => None,
        };
        let inv_len = 1.0 / r.tokens.len() as f64;
        let mut weights = vec![0.0; r.tokens.len()];
        let mut per_sample = 0.0;
        for (t, (&lp, &old)) in trace.per_token.iter().zip(&r.behavior_logprobs).enumerate() {
            let ratio = (lp - old).exp();
            ratio_sum += ratio;
            tokens += 1;
            let a = s.advantage;
            let unclipped = ratio * a;
            let clipped_val = ratio.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon) * a;
            let mut w = 0.0;
            if clipped_val < unclipped {
                per_sample += clipped_val;
                clipped += 1;
            } else {
                per_sample += unclipped;
                w += unclipped;
            }
            if let Some(ref_lp) = &ref_lp {
                let x = ref_lp[t] - lp;
                let kl = x.exp() - x - 1.0;
                kl_sum += kl;
                per_sample -= clip.kl_coeff * kl;
                w -= clip.kl_coeff * (1.0 - x.exp());
            }
            weights[t] = w * inv_len / g;
        }
        objective += per_sample * inv_len / g;
        trace.accumulate(&weights, &mut grad);
    }
    params.mask_gradient(&mut grad);
    let nt = tokens.max(1) as f64;
    Ok(SurrogateOutput {
        objective,
        grad,
        clipped_fraction: clipped as f64 / nt,
        mean_ratio: ratio_sum / nt,
        kl: kl_sum / nt,
    })
}

/// The clipped surrogate over one rollout group.
pub fn grpo_loss(
    params: &PolicyParams,
    group: &RolloutGroup,
    clip: &ClipConfig,
    kl_reference: Option<&PolicyParams>,
) -> Result<SurrogateOutput> {
    let samples: Vec<SampleRef<'_>> = group.samples().collect();
    surrogate(params, &samples, clip, kl_reference)
}
