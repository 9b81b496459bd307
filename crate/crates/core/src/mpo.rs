//! Mixed preference optimization: preference-pair construction and the
//! weighted preference (DPO), quality (BCO) and generation (NLL) losses.
//!
//! All three losses are functions of two sequence log-probabilities, so each
//! one reduces to a pair of scalar coefficients on `∇ log π(y_c)` and
//! `∇ log π(y_r)`; the weighted mixture is the weighted sum of coefficients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams, Response, Sampler};
use crate::world::{sigmoid, Task, World};

/// `-log σ(z)` without overflow.
pub(crate) fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub task: Task,
    pub chosen: Response,
    pub rejected: Response,
    /// Score difference chosen − rejected (rule + model channels).
    pub margin: f64,
}

fn w_pref() -> f64 {
    0.8
}
fn w_qual() -> f64 {
    0.2
}
fn w_gen() -> f64 {
    1.0
}
fn beta() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpoWeights {
    #[serde(default = "w_pref")]
    pub w_pref: f64,
    #[serde(default = "w_qual")]
    pub w_qual: f64,
    #[serde(default = "w_gen")]
    pub w_gen: f64,
    /// KL coefficient inside the preference and quality terms.
    #[serde(default = "beta")]
    pub beta: f64,
}

impl Default for MpoWeights {
    fn default() -> Self {
        MpoWeights {
            w_pref: w_pref(),
            w_qual: w_qual(),
            w_gen: w_gen(),
            beta: beta(),
        }
    }
}

impl MpoWeights {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("w_pref", self.w_pref),
            ("w_qual", self.w_qual),
            ("w_gen", self.w_gen),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{path}.{name}"), "must be finite and >= 0"));
            }
        }
        if self.w_pref + self.w_qual + self.w_gen == 0.0 {
            return Err(Error::config(path, "weights must not all be zero"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("{path}.beta"), "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Exponential moving average of implicit rewards, the BCO baseline `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTracker {
    pub value: f64,
    pub decay: f64,
    pub count: u64,
}

impl DeltaTracker {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::config("mpo.delta_decay", "must lie in (0, 1)"));
        }
        Ok(DeltaTracker {
            value: 0.0,
            decay,
            count: 0,
        })
    }

    pub fn update(&mut self, observed: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * observed;
        self.count += 1;
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Gradient,
}

/// Samples `n_samples` responses per task from the reference policy and keeps
/// the (best, worst) pair when their score margin is positive and at least
/// `threshold`.
pub fn build_preference_pairs(
    world: &World,
    reference: &PolicyParams,
    tasks: &[Task],
    n_samples: usize,
    threshold: f64,
    sampler: &Sampler,
    rng: &mut impl Rng,
) -> Result<Vec<PreferenceExample>> {
    if n_samples < 2 {
        return Err(Error::input("preference pairs need at least 2 samples per task"));
    }
    if !(threshold >= 0.0) {
        return Err(Error::input("threshold must be >= 0"));
    }
    let mut out = Vec::new();
    for task in tasks {
        let responses = sampler.sample(reference, task, n_samples, rng)?;
        if let Some(ex) = pair_from_responses(world, task, responses, threshold) {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Picks (best, worst) by rule + model score; `None` if the margin is not
/// positive or falls below `threshold`.
pub fn pair_from_responses(
    world: &World,
    task: &Task,
    responses: Vec<Response>,
    threshold: f64,
) -> Option<PreferenceExample> {
    let scores: Vec<f64> = responses
        .iter()
        .map(|r| {
            let b = world.score(task, &r.tokens);
            b.rule + b.model
        })
        .collect();
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    let margin = scores[best] - scores[worst];
    if margin > 0.0 && margin >= threshold && responses[best].tokens != responses[worst].tokens {
        Some(PreferenceExample {
            task: task.clone(),
            chosen: responses[best].clone(),
            rejected: responses[worst].clone(),
            margin,
        })
    } else {
        None
    }
}

/// Coefficients of a pair loss on `∇ℓ_c` and `∇ℓ_r`.
#[derive(Debug, Clone, Copy, Default)]
struct PairTerms {
    loss: f64,
    d_chosen: f64,
    d_rejected: f64,
}

impl PairTerms {
    fn scaled_add(&mut self, other: PairTerms, w: f64) {
        self.loss += w * other.loss;
        self.d_chosen += w * other.d_chosen;
        self.d_rejected += w * other.d_rejected;
    }
}

struct PairLogprobs {
    chosen: f64,
    rejected: f64,
}

impl PreferenceExample {
    /// `β·(log π_θ − log π_0)` for chosen and rejected.
    pub fn implicit_rewards(&self, params: &PolicyParams, beta: f64) -> Result<(f64, f64)> {
        let (c, _) = params.logprob(&self.task, &self.chosen.tokens)?;
        let (r, _) = params.logprob(&self.task, &self.rejected.tokens)?;
        Ok((
            beta * (c - self.chosen.total_logprob),
            beta * (r - self.rejected.total_logprob),
        ))
    }

    fn dpo_terms(&self, lp: &PairLogprobs, beta: f64) -> PairTerms {
        let dc = lp.chosen - self.chosen.total_logprob;
        let dr = lp.rejected - self.rejected.total_logprob;
        let z = beta * dc - beta * dr;
        let s = sigmoid(-z);
        PairTerms {
            loss: neg_log_sigmoid(z),
            d_chosen: -beta * s,
            d_rejected: beta * s,
        }
    }

    fn bco_terms(&self, lp: &PairLogprobs, beta: f64, delta: f64) -> PairTerms {
        let rc = beta * (lp.chosen - self.chosen.total_logprob);
        let rr = beta * (lp.rejected - self.rejected.total_logprob);
        PairTerms {
            loss: neg_log_sigmoid(rc - delta) + neg_log_sigmoid(-(rr - delta)),
            d_chosen: -beta * sigmoid(-(rc - delta)),
            d_rejected: beta * sigmoid(rr - delta),
        }
    }

    fn nll_terms(&self, lp: &PairLogprobs) -> PairTerms {
        let n = self.chosen.len() as f64;
        PairTerms {
            loss: -lp.chosen / n,
            d_chosen: -1.0 / n,
            d_rejected: 0.0,
        }
    }

    fn evaluate<F>(&self, params: &PolicyParams, terms: F) -> Result<LossGrad>
    where
        F: Fn(&PairLogprobs) -> PairTerms,
    {
        let tc = params.trace(&self.task, &self.chosen.tokens)?;
        let tr = params.trace(&self.task, &self.rejected.tokens)?;
        let lp = PairLogprobs {
            chosen: tc.total(),
            rejected: tr.total(),
        };
        let t = terms(&lp);
        let mut grad = params.zero_gradient();
        if t.d_chosen != 0.0 {
            tc.accumulate(&vec![t.d_chosen; self.chosen.len()], &mut grad);
        }
        if t.d_rejected != 0.0 {
            tr.accumulate(&vec![t.d_rejected; self.rejected.len()], &mut grad);
        }
        params.mask_gradient(&mut grad);
        Ok(LossGrad { loss: t.loss, grad })
    }
}

/// `-log σ(β·Δ_c − β·Δ_r)` with `Δ = log π_θ − log π_0`.
pub fn dpo_loss(params: &PolicyParams, ex: &PreferenceExample, beta: f64) -> Result<LossGrad> {
    ex.evaluate(params, |lp| ex.dpo_terms(lp, beta))
}

/// `-[log σ(β·Δ_c − δ) + log σ(−(β·Δ_r − δ))]`; `δ` is a constant here.
pub fn bco_loss(
    params: &PolicyParams,
    ex: &PreferenceExample,
    beta: f64,
    delta: f64,
) -> Result<LossGrad> {
    ex.evaluate(params, |lp| ex.bco_terms(lp, beta, delta))
}

/// `-log π_θ(y_c | x) / |y_c|`.
pub fn nll_loss(params: &PolicyParams, ex: &PreferenceExample) -> Result<LossGrad> {
    if ex.chosen.is_empty() {
        return Err(Error::input("chosen response is empty"));
    }
    ex.evaluate(params, |lp| ex.nll_terms(lp))
}

/// `w_pref·dpo + w_qual·bco + w_gen·nll`.
pub fn mpo_loss(
    params: &PolicyParams,
    ex: &PreferenceExample,
    weights: &MpoWeights,
    delta: f64,
) -> Result<LossGrad> {
    if weights.w_gen != 0.0 && ex.chosen.is_empty() {
        return Err(Error::input("chosen response is empty"));
    }
    ex.evaluate(params, |lp| {
        let mut t = PairTerms::default();
        if weights.w_pref != 0.0 {
            t.scaled_add(ex.dpo_terms(lp, weights.beta), weights.w_pref);
        }
        if weights.w_qual != 0.0 {
            t.scaled_add(ex.bco_terms(lp, weights.beta, delta), weights.w_qual);
        }
        if weights.w_gen != 0.0 {
            t.scaled_add(ex.nll_terms(lp), weights.w_gen);
        }
        t
    })
}
