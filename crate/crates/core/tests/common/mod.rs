#![allow(dead_code)]

use hybridrl::grpo::RolloutGroup;
use hybridrl::mpo::PreferenceExample;
use hybridrl::policy::{FreezeConfig, PolicyDims, PolicyParams, Response};
use hybridrl::world::{RewardConfig, TaskConfig, TokenId, World};
use rand::Rng;

pub fn world() -> World {
    World::new(TaskConfig::default(), RewardConfig::default()).unwrap()
}

/// Small policy so finite differences stay cheap.
pub fn small_dims(world: &World) -> PolicyDims {
    PolicyDims {
        encoder: 12,
        context: 10,
        history: 6,
        hidden: 14,
        ..PolicyDims::for_world(world)
    }
}

pub fn params(world: &World, seed: u64, freeze: FreezeConfig) -> PolicyParams {
    PolicyParams::init(small_dims(world), seed, 0.5)
        .unwrap()
        .set_freeze(freeze)
}

/// Copy of `p` with every trainable entry moved by uniform noise of half-width `scale`.
pub fn jitter(p: &PolicyParams, scale: f64, rng: &mut impl Rng) -> PolicyParams {
    let mut raw = p.as_slice().to_vec();
    for i in p.trainable_indices() {
        raw[i] += rng.gen_range(-scale..scale);
    }
    PolicyParams::from_raw(p.dims, p.freeze, p.seed, p.step, raw).unwrap()
}

pub fn random_tokens(world: &World, rng: &mut impl Rng, max_len: usize) -> Vec<TokenId> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| rng.gen_range(0..world.vocab.size)).collect()
}

/// A pair scored under `reference`, with random tokens on both sides.
pub fn random_pair(world: &World, reference: &PolicyParams, rng: &mut impl Rng) -> PreferenceExample {
    let task = world.task_for_seed(rng.gen());
    let chosen = Response::scored(reference, &task, random_tokens(world, rng, 6)).unwrap();
    let rejected = Response::scored(reference, &task, random_tokens(world, rng, 6)).unwrap();
    PreferenceExample {
        task,
        chosen,
        rejected,
        margin: 1.0,
    }
}

/// A group of random responses whose behavior log-probabilities come from `behavior`.
pub fn random_group(world: &World, behavior: &PolicyParams, n: usize, rng: &mut impl Rng) -> RolloutGroup {
    let task = world.task_for_seed(rng.gen());
    let mut responses: Vec<Response> = (0..n)
        .map(|_| Response::scored(behavior, &task, random_tokens(world, rng, 6)).unwrap())
        .collect();
    // the canonical answer keeps the group's rewards from being all equal
    responses[0] = Response::scored(behavior, &task, world.canonical_response(&task)).unwrap();
    RolloutGroup::from_responses(world, task, responses).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub mod oracle_suite {
    use super::*;
    use hybridrl::grpo::{grpo_loss, ClipConfig};
    use hybridrl::mpo::{bco_loss, dpo_loss, mpo_loss, nll_loss, MpoWeights};
    use hybridrl::oracle::{finite_diff, relative_error, FD_STEP};
    use hybridrl::policy::Gradient;
    use hybridrl::Result;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const LOSSES: [&str; 5] = ["dpo", "bco", "nll", "mpo", "grpo"];
    const COORDS: usize = 24;

    fn compare<F>(params: &PolicyParams, analytic: &Gradient, loss: F, rng: &mut ChaCha8Rng) -> f64
    where
        F: Fn(&PolicyParams) -> Result<f64>,
    {
        let trainable = params.trainable_indices();
        let coords: Vec<usize> = sample(rng, trainable.len(), COORDS.min(trainable.len()))
            .into_iter()
            .map(|i| trainable[i])
            .collect();
        let numeric = finite_diff(
            |x| {
                let p = PolicyParams::from_raw(params.dims, params.freeze, params.seed, params.step, x.to_vec())?;
                loss(&p)
            },
            params.as_slice(),
            &coords,
            FD_STEP,
        )
        .unwrap();
        let a: Vec<f64> = coords.iter().map(|&i| analytic.0[i]).collect();
        let n: Vec<f64> = coords.iter().map(|&i| numeric[i]).collect();
        relative_error(&a, &n)
    }

    /// Relative errors of `count` random instances of the named loss.
    pub fn errors(name: &str, count: usize, seed: u64) -> Vec<f64> {
        let world = world();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let freeze = if rng.gen_bool(0.5) {
                FreezeConfig::HeadPlusAdapter
            } else {
                FreezeConfig::AdapterPlusEncoder
            };
            let reference = params(&world, rng.gen(), freeze);
            let current = jitter(&reference, 0.05, &mut rng);
            let beta = rng.gen_range(0.05..1.0);
            let err = match name {
                "dpo" => {
                    let ex = random_pair(&world, &reference, &mut rng);
                    let g = dpo_loss(&current, &ex, beta).unwrap().grad;
                    compare(&current, &g, |p| Ok(dpo_loss(p, &ex, beta)?.loss), &mut rng)
                }
                "bco" => {
                    let ex = random_pair(&world, &reference, &mut rng);
                    let delta = rng.gen_range(-0.5..0.5);
                    let g = bco_loss(&current, &ex, beta, delta).unwrap().grad;
                    compare(&current, &g, |p| Ok(bco_loss(p, &ex, beta, delta)?.loss), &mut rng)
                }
                "nll" => {
                    let ex = random_pair(&world, &reference, &mut rng);
                    let g = nll_loss(&current, &ex).unwrap().grad;
                    compare(&current, &g, |p| Ok(nll_loss(p, &ex)?.loss), &mut rng)
                }
                "mpo" => {
                    let ex = random_pair(&world, &reference, &mut rng);
                    let w = MpoWeights {
                        w_pref: rng.gen_range(0.0..1.0),
                        w_qual: rng.gen_range(0.0..1.0),
                        w_gen: rng.gen_range(0.0..1.0),
                        beta,
                    };
                    let delta = rng.gen_range(-0.5..0.5);
                    let g = mpo_loss(&current, &ex, &w, delta).unwrap().grad;
                    compare(&current, &g, |p| Ok(mpo_loss(p, &ex, &w, delta)?.loss), &mut rng)
                }
                "grpo" => {
                    let group = random_group(&world, &reference, rng.gen_range(2..6), &mut rng);
                    let clip = ClipConfig {
                        epsilon: 0.2,
                        kl_coeff: if rng.gen_bool(0.5) { rng.gen_range(0.0..0.2) } else { 0.0 },
                    };
                    if near_clip_boundary(&current, &group, clip.epsilon) {
                        continue;
                    }
                    let kl_ref = Some(&reference);
                    let g = grpo_loss(&current, &group, &clip, kl_ref).unwrap().grad;
                    compare(&current, &g, |p| Ok(grpo_loss(p, &group, &clip, kl_ref)?.objective), &mut rng)
                }
                other => panic!("unknown loss {other}"),
            };
            out.push(err);
        }
        out
    }

    /// True when some token ratio sits within finite-difference reach of a clip edge.
    fn near_clip_boundary(p: &PolicyParams, group: &RolloutGroup, epsilon: f64) -> bool {
        group.responses.iter().any(|r| {
            let (_, lp) = p.logprob(&group.task, &r.tokens).unwrap();
            lp.iter().zip(&r.behavior_logprobs).any(|(l, b)| {
                let ratio = (l - b).exp();
                (ratio - (1.0 - epsilon)).abs() < 1e-3 || (ratio - (1.0 + epsilon)).abs() < 1e-3
            })
        })
    }
}

pub mod runs {
    use hybridrl::policy::FreezeConfig;
    use hybridrl::trainer::{StageConfig, StageKind, TrainConfig};

    pub fn stage(name: &str, kind: StageKind, steps: u64, freeze: FreezeConfig) -> StageConfig {
        let mut s = StageConfig::new(name, kind, steps);
        s.freeze = freeze;
        s.prompts_per_step = 4;
        s.group_size = 4;
        s.optimizer.lr = 0.005;
        s
    }

    /// A cheap config: short pretraining, small evaluation set.
    pub fn quick(seed: u64, stages: Vec<StageConfig>) -> TrainConfig {
        let mut c: TrainConfig = toml::from_str(&format!(
            "seed = {seed}\n[[stages]]\nname = \"x\"\nkind = \"sft\"\nsteps = 1\n"
        ))
        .unwrap();
        c.pretrain.steps = 150;
        c.eval.held_out = 32;
        c.eval.interval = 5;
        c.stages = stages;
        c.validate().unwrap();
        c
    }

    /// SFT, MPO and GRPO stages, all under `freeze`.
    pub fn all_stages(freeze: FreezeConfig, steps: u64) -> Vec<StageConfig> {
        vec![
            stage("sft", StageKind::Sft, steps, freeze),
            stage("mpo", StageKind::Mpo, steps, freeze),
            stage("grpo", StageKind::Grpo, steps, freeze),
        ]
    }
}

pub mod buffer_checks {
    use hybridrl::policy::Response;
    use hybridrl::ssb::{BufferConfig, BufferedSample, SelectiveBuffer};
    use hybridrl::world::Task;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    pub fn sample(task: &Task, id: u32, advantage: f64, step: u64) -> BufferedSample {
        BufferedSample {
            task: task.clone(),
            response: Response::new(vec![id], vec![0.0]),
            advantage,
            insert_step: step,
        }
    }

    pub fn id(s: &BufferedSample) -> u32 {
        s.response.tokens[0]
    }

    pub fn buffer(capacity: usize, max_age: u64, weight_temperature: f64) -> SelectiveBuffer {
        SelectiveBuffer::new(BufferConfig {
            enabled: true,
            capacity,
            max_age,
            weight_temperature,
            replay_fraction: 0.25,
        })
        .unwrap()
    }

    /// Counts of single draws per entry, in entry order.
    pub fn draw_counts(buf: &mut SelectiveBuffer, draws: usize, seed: u64) -> Vec<usize> {
        let ids: Vec<u32> = buf.entries().iter().map(id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; ids.len()];
        for _ in 0..draws {
            let got = buf.draw(1, 0, &mut rng);
            counts[ids.iter().position(|&i| i == id(&got[0])).unwrap()] += 1;
        }
        counts
    }

    pub fn chi_square_p(counts: &[usize], weights: &[f64]) -> f64 {
        let n: usize = counts.iter().sum();
        let total: f64 = weights.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(weights)
            .map(|(&c, w)| {
                let e = n as f64 * w / total;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    /// Chi-square p-value of `draws` single draws against |advantage| weights.
    pub fn weighted_draw_p(task: &Task, draws: usize, seed: u64) -> f64 {
        let mut buf = buffer(64, 1000, 1.0);
        let advantages = [0.2, -0.5, 1.0, -1.7, 2.4, 0.9, -0.1, 3.0];
        for (i, &a) in advantages.iter().enumerate() {
            buf.push(sample(task, i as u32, a, 0));
        }
        let counts = draw_counts(&mut buf, draws, seed);
        let weights: Vec<f64> = advantages.iter().map(|a: &f64| a.abs()).collect();
        chi_square_p(&counts, &weights)
    }

    /// Straightforward restatement of the buffer rules used as the fuzz oracle.
    struct Model {
        capacity: usize,
        max_age: u64,
        entries: Vec<(u32, f64, u64)>,
    }

    impl Model {
        fn push(&mut self, id: u32, adv: f64, step: u64) {
            if adv == 0.0 {
                return;
            }
            self.entries.push((id, adv, step));
            while self.entries.len() > self.capacity {
                let mut victim = 0;
                for i in 1..self.entries.len() {
                    let (a, b) = (self.entries[i], self.entries[victim]);
                    if a.1.abs() < b.1.abs() || (a.1.abs() == b.1.abs() && a.2 < b.2) {
                        victim = i;
                    }
                }
                self.entries.remove(victim);
            }
        }

        fn expire(&mut self, step: u64) {
            let max_age = self.max_age;
            self.entries.retain(|e| step.saturating_sub(e.2) <= max_age);
        }
    }

    /// Random inserts and draws checked against the model after every operation.
    pub fn fuzz(task: &Task, ops: usize, seed: u64) -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let capacity = 16;
        let max_age = 40;
        let mut buf = buffer(capacity, max_age, 1.0);
        let mut model = Model {
            capacity,
            max_age,
            entries: Vec::new(),
        };
        let mut step = 0u64;
        let mut next_id = 0u32;
        for op in 0..ops {
            if rng.gen_bool(0.1) {
                step += 1;
            }
            if rng.gen_bool(0.7) {
                // coarse grid so equal magnitudes and zeros occur
                let adv = rng.gen_range(-4i32..=4) as f64 * 0.5;
                buf.push(sample(task, next_id, adv, step));
                model.push(next_id, adv, step);
                next_id += 1;
            } else {
                let k = rng.gen_range(0..8);
                let drawn = buf.draw(k, step, &mut rng);
                model.expire(step);
                if drawn.len() != k.min(model.entries.len()) {
                    return Err(format!("op {op}: drew {} of {k}", drawn.len()));
                }
                let mut ids: Vec<u32> = drawn.iter().map(id).collect();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != drawn.len() {
                    return Err(format!("op {op}: repeated entry in one draw"));
                }
                for s in &drawn {
                    if !model.entries.iter().any(|e| e.0 == id(s)) || step - s.insert_step > max_age {
                        return Err(format!("op {op}: drew entry {} that should be gone", id(s)));
                    }
                }
            }
            if buf.len() > capacity {
                return Err(format!("op {op}: {} entries over capacity", buf.len()));
            }
            let got: Vec<(u32, f64, u64)> = buf
                .entries()
                .iter()
                .map(|s| (id(s), s.advantage, s.insert_step))
                .collect();
            if got != model.entries {
                return Err(format!("op {op}: contents diverge from the eviction rules"));
            }
        }
        Ok(())
    }
}
