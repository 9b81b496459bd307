use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grpo::{collect_group, effective, surrogate, RolloutGroup, SampleRef};
use crate::mpo::{mpo_loss, pair_from_responses, DeltaTracker, PreferenceExample};
use crate::policy::{Decoding, Gradient, PolicyParams, Sampler};
use crate::records::Record;
use crate::ssb::{filter_prompt_pool, SelectiveBuffer};
use crate::world::{Task, TokenId, World};

use super::config::{StageConfig, StageKind};
use super::eval::training_seed;
use super::metrics::MetricRecord;
use super::optim::Optimizer;
use super::Session;

/// Where a stage draws its training prompts from.
#[derive(Debug, Clone)]
pub enum TaskSource {
    /// A new task seed for every prompt.
    Fresh { stream: u64, next: u64 },
    /// Uniform draws from a fixed pool.
    Pool(Vec<Task>),
}

impl TaskSource {
    pub fn fresh(stream: u64) -> Self {
        TaskSource::Fresh { stream, next: 0 }
    }

    pub fn pool(world: &World, stream: u64, size: usize) -> Self {
        TaskSource::Pool(
            (0..size as u64)
                .map(|i| world.task_for_seed(training_seed(stream, i)))
                .collect(),
        )
    }

    pub fn next_batch(&mut self, world: &World, n: usize, rng: &mut impl Rng) -> Result<Vec<Task>> {
        match self {
            TaskSource::Fresh { stream, next } => Ok((0..n)
                .map(|_| {
                    *next += 1;
                    world.task_for_seed(training_seed(*stream, *next - 1))
                })
                .collect()),
            TaskSource::Pool(tasks) if tasks.is_empty() => {
                Err(Error::Runtime("training prompt pool is empty".into()))
            }
            TaskSource::Pool(tasks) => Ok((0..n)
                .map(|_| tasks[rng.gen_range(0..tasks.len())].clone())
                .collect()),
        }
    }
}

fn sampler(world: &World, stage: &StageConfig) -> Result<Sampler> {
    Ok(Sampler {
        decoding: Decoding::from_temperature(stage.temperature)?,
        max_len: stage.max_len,
        end: world.vocab.special.end,
    })
}

/// Mean per-token negative log-likelihood of each target, averaged over the batch.
pub fn sft_objective(
    params: &PolicyParams,
    batch: &[(Task, Vec<TokenId>)],
) -> Result<(f64, Gradient)> {
    let mut grad = params.zero_gradient();
    let mut loss = 0.0;
    let b = batch.len() as f64;
    for (task, target) in batch {
        if target.is_empty() {
            return Err(Error::input("empty supervision target"));
        }
        let trace = params.trace(task, target)?;
        let n = target.len() as f64;
        loss -= trace.total() / n / b;
        trace.accumulate(&vec![-1.0 / n / b; target.len()], &mut grad);
    }
    params.mask_gradient(&mut grad);
    Ok((loss, grad))
}

/// `(task, canonical response)` pairs for `n` training tasks.
pub fn sft_dataset(world: &World, stream: u64, n: usize) -> Vec<(Task, Vec<TokenId>)> {
    (0..n as u64)
        .map(|i| {
            let task = world.task_for_seed(training_seed(stream, i));
            let target = world.canonical_response(&task);
            (task, target)
        })
        .collect()
}

fn fill_rewards(rec: &mut MetricRecord, world: &World, scored: &[(Task, Vec<TokenId>)]) {
    if scored.is_empty() {
        return;
    }
    let n = scored.len() as f64;
    let (mut t, mut r, mut m, mut f) = (0.0, 0.0, 0.0, 0.0);
    for (task, tokens) in scored {
        let b = world.score(task, tokens);
        t += b.total;
        r += b.rule;
        m += b.model;
        f += b.format;
    }
    rec.reward_total = Some(t / n);
    rec.reward_rule = Some(r / n);
    rec.reward_model = Some(m / n);
    rec.reward_format = Some(f / n);
}

/// Supervised fine-tuning on ground-truth responses; the comparison baseline.
pub fn run_sft(
    session: &mut Session<'_>,
    mut params: PolicyParams,
    stage: &StageConfig,
    dataset: &[(Task, Vec<TokenId>)],
) -> Result<PolicyParams> {
    if stage.steps == 0 {
        return Ok(params);
    }
    if dataset.is_empty() {
        return Err(Error::input("supervised dataset is empty"));
    }
    params = params.set_freeze(stage.freeze);
    let mut opt = Optimizer::new(stage.optimizer.clone(), params.len());
    let mut cursor = 0;
    for local in 1..=stage.steps {
        let started = Instant::now();
        let batch: Vec<_> = (0..stage.prompts_per_step)
            .map(|_| {
                let ex = dataset[cursor % dataset.len()].clone();
                cursor += 1;
                ex
            })
            .collect();
        let (loss, grad) = sft_objective(&params, &batch)?;
        session.spot_check(&params, &grad, |p| Ok(sft_objective(p, &batch)?.0))?;
        let (next, norm) = opt.step(&params, &grad);
        params = next;
        let mut rec = session.record(StageKind::Sft, stage);
        rec.loss = Some(loss);
        rec.grad_norm = Some(norm);
        session.finish_step(rec, &params, stage, local, started)?;
    }
    Ok(params)
}

fn mpo_batch_loss(
    params: &PolicyParams,
    pairs: &[PreferenceExample],
    stage: &StageConfig,
    delta: f64,
) -> Result<(f64, Gradient)> {
    let mut grad = params.zero_gradient();
    let mut loss = 0.0;
    let inv = 1.0 / pairs.len() as f64;
    for ex in pairs {
        let lg = mpo_loss(params, ex, &stage.mpo.weights, delta)?;
        loss += lg.loss * inv;
        grad.add_scaled(&lg.grad, inv);
    }
    Ok((loss, grad))
}

/// Iterated preference optimization: each round samples from the current
/// policy, which also becomes the round's reference, builds pairs, and takes
/// `inner_steps` gradient steps on the weighted loss.
pub fn run_mpo_stage(
    session: &mut Session<'_>,
    mut params: PolicyParams,
    stage: &StageConfig,
    tasks: &mut TaskSource,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyParams> {
    let world = session.world;
    params = params.set_freeze(stage.freeze);
    let sampler = sampler(world, stage)?;
    let mut opt = Optimizer::new(stage.optimizer.clone(), params.len());
    let mut delta = DeltaTracker::new(stage.mpo.delta_decay)?;
    let mut pairs: Vec<PreferenceExample> = Vec::new();
    let mut scored: Vec<(Task, Vec<TokenId>)> = Vec::new();
    let mut local = 0;
    while local < stage.steps {
        let round_start = local;
        let reference = params.clone();
        let batch = tasks.next_batch(world, stage.prompts_per_step, rng)?;
        pairs.clear();
        scored.clear();
        for task in &batch {
            let responses = sampler.sample(&reference, task, stage.group_size, rng)?;
            scored.extend(responses.iter().map(|r| (task.clone(), r.tokens.clone())));
            if let Some(ex) = pair_from_responses(world, task, responses, stage.mpo.threshold) {
                pairs.push(ex);
            }
        }
        session.pairs.extend(pairs.iter().map(Record::preference));
        if pairs.is_empty() {
            log::warn!(
                "stage {}: no preference pairs at step {}, round skipped",
                stage.name,
                session.step + 1
            );
        }
        while local < stage.steps && local - round_start < stage.mpo.inner_steps as u64 {
            local += 1;
            let started = Instant::now();
            let mut rec = session.record(StageKind::Mpo, stage);
            rec.pairs = Some(pairs.len() as u64);
            if local == round_start + 1 {
                fill_rewards(&mut rec, world, &scored);
            }
            if !pairs.is_empty() {
                let d = delta.value;
                let (loss, grad) = mpo_batch_loss(&params, &pairs, stage, d)?;
                session.spot_check(&params, &grad, |p| Ok(mpo_batch_loss(p, &pairs, stage, d)?.0))?;
                let mut observed = 0.0;
                for ex in &pairs {
                    let (rc, rr) = ex.implicit_rewards(&params, stage.mpo.weights.beta)?;
                    observed += 0.5 * (rc + rr);
                }
                delta.update(observed / pairs.len() as f64);
                let (next, norm) = opt.step(&params, &grad);
                params = next;
                rec.loss = Some(loss);
                rec.grad_norm = Some(norm);
            }
            session.finish_step(rec, &params, stage, local, started)?;
        }
    }
    Ok(params)
}

/// Group-relative policy optimization with an optional selective sample buffer.
///
/// Each step snapshots `θ_old`, rolls out fresh groups against it and builds
/// an update batch. With a buffer, a share of the nominal batch is reserved
/// for replays, and slots of fresh groups without advantage signal are
/// backfilled from the buffer before the fresh samples are inserted.
pub fn run_grpo_stage(
    session: &mut Session<'_>,
    mut params: PolicyParams,
    stage: &StageConfig,
    tasks: &mut TaskSource,
    mut buffer: Option<&mut SelectiveBuffer>,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyParams> {
    let world = session.world;
    params = params.set_freeze(stage.freeze);
    let sampler = sampler(world, stage)?;
    let clip = stage.grpo.clip;
    let kl_reference = params.clone();
    let kl_ref = (clip.kl_coeff > 0.0).then_some(&kl_reference);
    let mut opt = Optimizer::new(stage.optimizer.clone(), params.len());

    if stage.grpo.pool_filter {
        if let TaskSource::Pool(pool) = tasks {
            let filtered = filter_prompt_pool(world, &params, pool, stage.group_size, &sampler, rng)?;
            log::info!(
                "stage {}: prompt pool retention {:.3} ({} of {})",
                stage.name,
                filtered.retention(),
                filtered.retained.len(),
                filtered.total
            );
            *pool = filtered.retained;
        }
    }

    let g = stage.group_size;
    let nominal = stage.prompts_per_step * g;
    let fresh_prompts = match &buffer {
        Some(b) => {
            let reserved = (b.config().replay_fraction * stage.prompts_per_step as f64).round() as usize;
            stage.prompts_per_step.saturating_sub(reserved).max(1)
        }
        None => stage.prompts_per_step,
    };

    let stage_started = Instant::now();
    let mut effective_groups = 0usize;
    for local in 1..=stage.steps {
        let started = Instant::now();
        let step = session.step + 1;
        let old = params.clone();
        let prompts = tasks.next_batch(world, fresh_prompts, rng)?;
        let mut groups: Vec<RolloutGroup> = Vec::with_capacity(prompts.len());
        for task in &prompts {
            groups.push(collect_group(world, &old, task, g, &sampler, rng)?);
        }
        let n_effective = groups.iter().filter(|gr| effective(gr)).count();
        effective_groups += n_effective;

        let replays = match buffer.as_deref_mut() {
            Some(b) => {
                let slots = nominal - fresh_prompts * g + (groups.len() - n_effective) * g;
                let drawn = b.draw(slots, step, rng);
                for gr in &groups {
                    b.insert(gr, step);
                }
                drawn
            }
            None => Vec::new(),
        };

        let mut batch: Vec<SampleRef<'_>> = Vec::with_capacity(nominal);
        for gr in &groups {
            if buffer.is_none() || effective(gr) {
                batch.extend(gr.samples());
            }
        }
        batch.extend(replays.iter().map(|s| s.as_sample()));
        let nonzero = batch.iter().filter(|s| s.advantage != 0.0).count();

        let mut rec = session.record(StageKind::Grpo, stage);
        let scored: Vec<_> = groups
            .iter()
            .flat_map(|gr| gr.responses.iter().map(|r| (gr.task.clone(), r.tokens.clone())))
            .collect();
        fill_rewards(&mut rec, world, &scored);
        rec.effective_fraction = Some(n_effective as f64 / groups.len() as f64);
        rec.batch_effective_fraction = Some(nonzero as f64 / nominal as f64);
        rec.replayed = Some(replays.len() as u64);
        rec.buffer_size = buffer.as_deref().map(|b| b.len() as u64);

        if nonzero == 0 {
            log::warn!(
                "stage {}: no advantage signal at step {step}, update skipped",
                stage.name
            );
        } else {
            let mut clipped = 0.0;
            let mut loss = 0.0;
            let mut norm = 0.0;
            for _ in 0..stage.grpo.epochs {
                let out = surrogate(&params, &batch, &clip, kl_ref)?;
                let mut grad = out.grad;
                grad.scale(-1.0);
                session.spot_check(&params, &grad, |p| {
                    Ok(-surrogate(p, &batch, &clip, kl_ref)?.objective)
                })?;
                let (next, n) = opt.step(&params, &grad);
                params = next;
                clipped = out.clipped_fraction;
                loss = -out.objective;
                norm = n;
            }
            rec.loss = Some(loss);
            rec.grad_norm = Some(norm);
            rec.clipped_fraction = Some(clipped);
        }
        if local == stage.steps {
            session.rollouts = groups.iter().flat_map(Record::rollouts).collect();
        }
        session.finish_step(rec, &params, stage, local, started)?;
    }
    if let Some(b) = buffer {
        session.buffer_dump = b.entries().iter().map(Record::buffered).collect();
    }
    if effective_groups > 0 {
        log::info!(
            "stage {}: {:.4}s wall-clock per effective group",
            stage.name,
            stage_started.elapsed().as_secs_f64() / effective_groups as f64
        );
    }
    Ok(params)
}
