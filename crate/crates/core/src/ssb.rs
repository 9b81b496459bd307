//! Selective sample buffer.
//!
//! Keeps responses whose group-normalized advantage is non-zero and hands
//! them back for later policy updates, sampled without replacement with
//! probability proportional to `|advantage|^(1/temperature)`. Replayed
//! samples keep their stored advantage and behavior log-probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{collect_group, effective, RolloutGroup, SampleRef};
use crate::policy::{PolicyParams, Response, Sampler};
use crate::world::{Task, World};

fn default_capacity() -> usize {
    4096
}
fn default_max_age() -> u64 {
    50
}
fn default_weight_temperature() -> f64 {
    1.0
}
fn default_replay_fraction() -> f64 {
    0.25
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Entries older than this many optimizer steps are dropped at draw time.
    #[serde(default = "default_max_age")]
    pub max_age: u64,
    #[serde(default = "default_weight_temperature")]
    pub weight_temperature: f64,
    /// Share of each update batch reserved for replays.
    #[serde(default = "default_replay_fraction")]
    pub replay_fraction: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            enabled: true,
            capacity: default_capacity(),
            max_age: default_max_age(),
            weight_temperature: default_weight_temperature(),
            replay_fraction: default_replay_fraction(),
        }
    }
}

impl BufferConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.capacity < 1 {
            return Err(Error::config(format!("{path}.capacity"), "must be >= 1"));
        }
        if self.max_age < 1 {
            return Err(Error::config(format!("{path}.max_age"), "must be >= 1"));
        }
        if !(self.weight_temperature > 0.0) {
            return Err(Error::config(
                format!("{path}.weight_temperature"),
                "must be > 0",
            ));
        }
        if !(0.0..1.0).contains(&self.replay_fraction) {
            return Err(Error::config(
                format!("{path}.replay_fraction"),
                "must lie in [0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferedSample {
    pub task: Task,
    pub response: Response,
    pub advantage: f64,
    pub insert_step: u64,
}

impl BufferedSample {
    pub fn as_sample(&self) -> SampleRef<'_> {
        SampleRef {
            task: &self.task,
            response: &self.response,
            advantage: self.advantage,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectiveBuffer {
    config: BufferConfig,
    entries: Vec<BufferedSample>,
}

impl SelectiveBuffer {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate("buffer")?;
        Ok(SelectiveBuffer {
            config,
            entries: Vec::new(),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferedSample] {
        &self.entries
    }

    /// Inserts every non-zero-advantage response of `group`; returns the count.
    pub fn insert(&mut self, group: &RolloutGroup, step: u64) -> usize {
        let mut n = 0;
        for (r, &a) in group.responses.iter().zip(&group.advantages) {
            if a != 0.0 && a.is_finite() {
                self.entries.push(BufferedSample {
                    task: group.task.clone(),
                    response: r.clone(),
                    advantage: a,
                    insert_step: step,
                });
                n += 1;
            }
        }
        self.enforce_capacity();
        n
    }

    /// Inserts a single prepared sample (zero advantages are ignored).
    pub fn push(&mut self, sample: BufferedSample) -> bool {
        if sample.advantage == 0.0 || !sample.advantage.is_finite() {
            return false;
        }
        self.entries.push(sample);
        self.enforce_capacity();
        true
    }

    fn enforce_capacity(&mut self) {
        while self.entries.len() > self.config.capacity {
            // lowest |advantage| first, then oldest step, then earliest insertion
            let mut victim = 0;
            for (i, e) in self.entries.iter().enumerate().skip(1) {
                let v = &self.entries[victim];
                let (ea, va) = (e.advantage.abs(), v.advantage.abs());
                if ea < va || (ea == va && e.insert_step < v.insert_step) {
                    victim = i;
                }
            }
            self.entries.remove(victim);
        }
    }

    /// Drops entries older than `max_age` relative to `step`; returns how many.
    pub fn expire(&mut self, step: u64) -> usize {
        let before = self.entries.len();
        let max_age = self.config.max_age;
        self.entries
            .retain(|e| step.saturating_sub(e.insert_step) <= max_age);
        before - self.entries.len()
    }

    fn weight(&self, e: &BufferedSample) -> f64 {
        let inv = 1.0 / self.config.weight_temperature;
        if inv == 0.0 {
            1.0
        } else {
            e.advantage.abs().powf(inv)
        }
    }

    /// Weighted draw of up to `k` distinct entries after expiring stale ones.
    pub fn draw(&mut self, k: usize, step: u64, rng: &mut impl Rng) -> Vec<BufferedSample> {
        self.expire(step);
        let mut pool: Vec<usize> = (0..self.entries.len()).collect();
        let mut weights: Vec<f64> = self.entries.iter().map(|e| self.weight(e)).collect();
        let mut out = Vec::with_capacity(k.min(pool.len()));
        while out.len() < k && !pool.is_empty() {
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            out.push(self.entries[pool[pick]].clone());
            pool.swap_remove(pick);
            weights.swap_remove(pick);
        }
        out
    }
}

/// Outcome of offline prompt-pool filtering.
#[derive(Debug, Clone)]
pub struct PoolFilter {
    pub retained: Vec<Task>,
    pub total: usize,
}

impl PoolFilter {
    pub fn retention(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.retained.len() as f64 / self.total as f64
        }
    }
}

/// Rolls out `n` responses per task and keeps tasks whose group is effective.
pub fn filter_prompt_pool(
    world: &World,
    params: &PolicyParams,
    tasks: &[Task],
    n: usize,
    sampler: &Sampler,
    rng: &mut impl Rng,
) -> Result<PoolFilter> {
    if n < 2 {
        return Err(Error::input("pool filtering needs at least 2 rollouts per task"));
    }
    let mut retained = Vec::new();
    for task in tasks {
        let g = collect_group(world, params, task, n, sampler, rng)?;
        if effective(&g) {
            retained.push(task.clone());
        }
    }
    Ok(PoolFilter {
        retained,
        total: tasks.len(),
    })
}

/// Fraction of groups in the window that are effective.
pub fn effective_fraction(window: &[RolloutGroup]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::input("effective fraction of an empty window"));
    }
    Ok(window.iter().filter(|g| effective(g)).count() as f64 / window.len() as f64)
}
