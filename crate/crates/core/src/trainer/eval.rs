use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::{Decoding, PolicyParams, Sampler};
use crate::world::{derive_seed, Task, World};

/// Held-out task seeds start here; training seeds always stay below it.
pub const HELD_OUT_BASE: u64 = 1 << 48;

/// Seed of the `i`-th training task drawn under `stream`.
pub fn training_seed(stream: u64, i: u64) -> u64 {
    derive_seed(stream, i) % HELD_OUT_BASE
}

pub fn held_out_tasks(world: &World, n: usize) -> Vec<Task> {
    (0..n as u64)
        .map(|i| world.task_for_seed(HELD_OUT_BASE + i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Share of tasks answered exactly right under greedy decoding.
    pub accuracy: f64,
    /// Share of tasks with the format bonus earned but a wrong answer.
    pub format_ok_wrong: f64,
    pub mean_reward: f64,
}

pub fn greedy_sampler(world: &World, max_len: usize) -> Sampler {
    Sampler {
        decoding: Decoding::Greedy,
        max_len,
        end: world.vocab.special.end,
    }
}

pub fn evaluate(
    world: &World,
    params: &PolicyParams,
    tasks: &[Task],
    max_len: usize,
) -> Result<EvalResult> {
    let sampler = greedy_sampler(world, max_len);
    // greedy decoding never consults the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0usize;
    let mut wrong_formatted = 0usize;
    let mut reward = 0.0;
    for task in tasks {
        let r = sampler.sample(params, task, 1, &mut rng)?.remove(0);
        let b = world.score(task, &r.tokens);
        if b.rule > 0.0 {
            correct += 1;
        } else if b.format > 0.0 {
            wrong_formatted += 1;
        }
        reward += b.total;
    }
    let n = tasks.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        format_ok_wrong: wrong_formatted as f64 / n,
        mean_reward: reward / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{RewardConfig, TaskConfig};

    #[test]
    fn held_out_and_training_seeds_are_disjoint() {
        for i in 0..1000 {
            assert!(training_seed(7, i) < HELD_OUT_BASE);
        }
        let w = World::new(TaskConfig::default(), RewardConfig::default()).unwrap();
        let tasks = held_out_tasks(&w, 4);
        assert!(tasks.iter().all(|t| t.seed >= HELD_OUT_BASE));
    }
}
