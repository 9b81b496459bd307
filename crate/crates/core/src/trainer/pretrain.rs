//! Base language head.
//!
//! Multimodal stages start from a head that already answers in the expected
//! format and reads an answer off the prompt text. The head is trained here
//! with the adapter held at zero, after which the adapter is re-initialized
//! so that the visual pathway starts untrained.
//!
//! Training prompts are `QUERY` repeated `k` times followed by the digits of
//! an answer repeated `j` times. The target is that answer with probability
//! `min(1, 2j / (k + j))` and a uniformly random answer otherwise, so the
//! head's confidence follows how strongly the context points at one answer.
//! A share of prompts is blank (`QUERY` alone) with a random answer, which
//! gives a uniform prior for uninformative contexts. Per-example context
//! noise keeps the response format stable away from text-like contexts.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::policy::{FreezeConfig, PolicyParams, Tensor};
use crate::world::{derive_seed, Task, TokenId, World, QUERY_TOKEN};

use super::config::{OptimizerConfig, OptimizerKind, TrainConfig};
use super::optim::Optimizer;
use super::stages::sft_objective;

const ADAPTER: [Tensor; 2] = [Tensor::AdapterWeight, Tensor::AdapterBias];

fn cache() -> &'static Mutex<HashMap<String, PolicyParams>> {
    static CACHE: OnceLock<Mutex<HashMap<String, PolicyParams>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Initial parameters for a run: pretrained head, fresh adapter.
///
/// Results are memoized per process on everything that influences them.
pub fn base_model(world: &World, config: &TrainConfig) -> Result<PolicyParams> {
    let key = format!(
        "{}|{:?}|{:?}|{:?}",
        config.seed, config.task, config.model, config.pretrain
    );
    if let Some(p) = cache().lock().expect("cache lock").get(&key) {
        return Ok(p.clone());
    }
    let p = pretrain(world, config)?;
    cache().lock().expect("cache lock").insert(key, p.clone());
    Ok(p)
}

/// One text-only example and its target response.
fn text_example(world: &World, blank_fraction: f64, rng: &mut ChaCha8Rng) -> (Task, Vec<TokenId>) {
    let modulus = world.task.modulus;
    let max_len = world.task.max_prompt_len;
    let mut task = world.text_task(&[]);
    let answer = World::number_tokens(rng.gen_range(0..modulus));
    let n = answer.len();
    if rng.gen_bool(blank_fraction) || max_len < 1 + n {
        task.ground_truth_tokens = answer;
    } else {
        let k = rng.gen_range(1..=max_len - n);
        let j = rng.gen_range(1..=(max_len - k) / n);
        task.prompt_tokens = vec![QUERY_TOKEN; k];
        for _ in 0..j {
            task.prompt_tokens.extend(&answer);
        }
        let share = (2.0 * j as f64 / (k + j) as f64).min(1.0);
        task.ground_truth_tokens = if rng.gen_bool(share) {
            answer
        } else {
            World::number_tokens(rng.gen_range(0..modulus))
        };
    }
    let target = world.canonical_response(&task);
    (task, target)
}

fn pretrain(world: &World, config: &TrainConfig) -> Result<PolicyParams> {
    let dims = config.model.dims(world);
    let scale = config.model.init_scale;
    let mut params = PolicyParams::init(dims, config.seed, scale)?;
    for t in ADAPTER {
        params.tensor_mut(t).fill(0.0);
    }
    params = params.set_freeze(FreezeConfig::HeadPlusAdapter);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xBA5E));
    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: config.pretrain.lr,
            ..OptimizerConfig::default()
        },
        params.len(),
    );
    let sigma = config.pretrain.context_noise;
    for _ in 0..config.pretrain.steps {
        let batch: Vec<_> = (0..config.pretrain.batch_size)
            .map(|_| text_example(world, config.pretrain.blank_fraction, &mut rng))
            .collect();
        let mut grad = if sigma > 0.0 {
            // per-example context noise, injected through the idle adapter bias
            let mut g = params.zero_gradient();
            let mut noisy = params.clone();
            for example in batch.chunks(1) {
                for x in noisy.tensor_mut(Tensor::AdapterBias) {
                    *x = sigma * standard_normal(&mut rng);
                }
                let (_, ge) = sft_objective(&noisy, example)?;
                g.add_scaled(&ge, 1.0 / batch.len() as f64);
            }
            g
        } else {
            sft_objective(&params, &batch)?.1
        };
        for t in ADAPTER {
            grad.0[params.layout().range(t)].fill(0.0);
        }
        params = opt.step(&params, &grad).0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xADA9));
    for t in ADAPTER {
        for x in params.tensor_mut(t) {
            *x = rng.gen_range(-scale..scale);
        }
    }
    let mut params = params.set_freeze(FreezeConfig::AdapterOnly);
    params.step = 0;
    Ok(params)
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{RewardConfig, TaskConfig};

    #[test]
    fn text_examples_fit_the_prompt_budget() {
        let w = World::new(TaskConfig::default(), RewardConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let (task, target) = text_example(&w, 0.25, &mut rng);
            assert!(!task.prompt_tokens.is_empty());
            assert!(task.prompt_tokens.len() <= w.task.max_prompt_len);
            assert_eq!(task.prompt_tokens[0], QUERY_TOKEN);
            assert_eq!(w.format_reward(&target), w.reward.format_bonus);
        }
    }
}
