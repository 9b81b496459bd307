use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PolicyParams;
use crate::error::{Error, Result};
use crate::world::{Task, TokenId};

/// A sampled sequence with the behavior policy's per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub behavior_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl Response {
    pub fn new(tokens: Vec<TokenId>, behavior_logprobs: Vec<f64>) -> Self {
        let total_logprob = behavior_logprobs.iter().sum();
        Response {
            tokens,
            behavior_logprobs,
            total_logprob,
        }
    }

    /// Scores `tokens` under `params` and records the result as behavior log-probabilities.
    pub fn scored(params: &PolicyParams, task: &Task, tokens: Vec<TokenId>) -> Result<Self> {
        let (_, per) = params.logprob(task, &tokens)?;
        Ok(Response::new(tokens, per))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// The zero-temperature limit.
    Greedy,
    Temperature(f64),
}

impl Decoding {
    /// Temperature 0 maps to greedy decoding.
    pub fn from_temperature(t: f64) -> Result<Self> {
        if t == 0.0 {
            Ok(Decoding::Greedy)
        } else if t > 0.0 && t.is_finite() {
            Ok(Decoding::Temperature(t))
        } else {
            Err(Error::input(format!("temperature must be >= 0, got {t}")))
        }
    }
}

/// Ancestral sampler truncating at `end` or `max_len`.
#[derive(Debug, Clone, Copy)]
pub struct Sampler {
    pub decoding: Decoding,
    pub max_len: usize,
    pub end: TokenId,
}

impl Sampler {
    /// Draws `n` independent responses. Behavior log-probabilities are
    /// always measured at temperature 1, whatever the sampling temperature.
    pub fn sample(
        &self,
        params: &PolicyParams,
        task: &Task,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Response>> {
        if n == 0 {
            return Err(Error::input("sample count must be at least 1"));
        }
        let ctx = params.context_state(task)?;
        let dh = params.dims.history;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut tokens = Vec::new();
            let mut lps = Vec::new();
            let mut sum = vec![0.0; dh];
            while tokens.len() < self.max_len {
                let mean: Vec<f64> = if tokens.is_empty() {
                    vec![0.0; dh]
                } else {
                    let inv = 1.0 / tokens.len() as f64;
                    sum.iter().map(|s| s * inv).collect()
                };
                let (_, lp) = params.step(&ctx, &mean);
                let y = match self.decoding {
                    Decoding::Greedy => argmax(&lp),
                    Decoding::Temperature(t) => draw(&lp, t, rng),
                };
                tokens.push(y as TokenId);
                lps.push(lp[y]);
                for (s, e) in sum.iter_mut().zip(params.history_row(y as TokenId)) {
                    *s += e;
                }
                if y as TokenId == self.end {
                    break;
                }
            }
            out.push(Response::new(tokens, lps));
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn draw(logprobs: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logprobs.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
