//! Staged training pipeline: optional supervised baseline, preference
//! optimization, and group-relative optimization with a selective buffer.

mod ablation;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
mod pretrain;
pub mod stages;

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::oracle::{finite_diff, relative_error, FD_STEP};
use crate::policy::{Gradient, PolicyParams};
use crate::records::Record;
use crate::ssb::SelectiveBuffer;
use crate::world::{derive_seed, Task, World};

pub use ablation::{run_ablation, steps_to_accuracy, AblationCell, AblationReport, RunSummary};
pub use config::{
    CheckConfig, EvalConfig, GrpoSection, MpoSection, OptimizerConfig, OptimizerKind,
    PretrainConfig, StageConfig, StageKind, TrainConfig,
};
pub use eval::{evaluate, held_out_tasks, EvalResult};
pub use metrics::{read_metrics, write_metrics, MetricRecord, Timing, COLUMNS};
pub use optim::Optimizer;
pub use pretrain::base_model;
pub use stages::{run_grpo_stage, run_mpo_stage, run_sft, sft_dataset, TaskSource};

/// Shared state of one run: the metric sink, step counter and evaluation set.
pub struct Session<'w> {
    pub world: &'w World,
    /// Global optimizer steps taken so far.
    pub step: u64,
    pub metrics: Vec<MetricRecord>,
    pub timings: Vec<Timing>,
    pub pairs: Vec<Record>,
    pub rollouts: Vec<Record>,
    pub buffer_dump: Vec<Record>,
    eval_tasks: Vec<Task>,
    eval: EvalConfig,
    check: CheckConfig,
    check_rng: ChaCha8Rng,
    checks_passed: u64,
}

impl<'w> Session<'w> {
    pub fn new(world: &'w World, config: &TrainConfig) -> Self {
        Session {
            world,
            step: 0,
            metrics: Vec::new(),
            timings: Vec::new(),
            pairs: Vec::new(),
            rollouts: Vec::new(),
            buffer_dump: Vec::new(),
            eval_tasks: held_out_tasks(world, config.eval.held_out),
            eval: config.eval.clone(),
            check: config.check.clone(),
            check_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC4EC)),
            checks_passed: 0,
        }
    }

    pub fn checks_passed(&self) -> u64 {
        self.checks_passed
    }

    pub fn evaluate(&self, params: &PolicyParams) -> Result<EvalResult> {
        evaluate(self.world, params, &self.eval_tasks, self.eval.max_len)
    }

    /// Emits the step-0 record holding the evaluation of the starting point.
    pub fn record_initial(&mut self, params: &PolicyParams) -> Result<()> {
        let e = self.evaluate(params)?;
        let mut rec = MetricRecord::new(0, "init", "init");
        rec.eval_accuracy = Some(e.accuracy);
        rec.eval_format_ok_wrong = Some(e.format_ok_wrong);
        self.metrics.push(rec);
        Ok(())
    }

    pub(crate) fn record(&self, kind: StageKind, stage: &StageConfig) -> MetricRecord {
        let kind = match kind {
            StageKind::Sft => "sft",
            StageKind::Mpo => "mpo",
            StageKind::Grpo => "grpo",
        };
        MetricRecord::new(self.step + 1, &stage.name, kind)
    }

    pub(crate) fn finish_step(
        &mut self,
        mut rec: MetricRecord,
        params: &PolicyParams,
        stage: &StageConfig,
        local: u64,
        started: Instant,
    ) -> Result<()> {
        if !params.is_finite() {
            return Err(Error::Runtime(format!(
                "stage {}: parameters became non-finite at step {}",
                stage.name, rec.step
            )));
        }
        if local % self.eval.interval == 0 || local == stage.steps {
            let e = self.evaluate(params)?;
            rec.eval_accuracy = Some(e.accuracy);
            rec.eval_format_ok_wrong = Some(e.format_ok_wrong);
        }
        self.step = rec.step;
        self.timings.push(Timing {
            step: rec.step,
            stage: stage.name.clone(),
            seconds: started.elapsed().as_secs_f64(),
        });
        self.metrics.push(rec);
        Ok(())
    }

    /// On every K-th step, compares `grad` with central differences of `loss`
    /// on a few random trainable coordinates.
    pub(crate) fn spot_check<F>(&mut self, params: &PolicyParams, grad: &Gradient, loss: F) -> Result<()>
    where
        F: Fn(&PolicyParams) -> Result<f64>,
    {
        if self.check.every == 0 || (self.step + 1) % self.check.every != 0 {
            return Ok(());
        }
        let trainable = params.trainable_indices();
        let k = self.check.coords.min(trainable.len());
        let coords: Vec<usize> = sample(&mut self.check_rng, trainable.len(), k)
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
        )?;
        let a: Vec<f64> = coords.iter().map(|&i| grad.0[i]).collect();
        let n: Vec<f64> = coords.iter().map(|&i| numeric[i]).collect();
        let err = relative_error(&a, &n);
        if err > self.check.tolerance {
            return Err(Error::Runtime(format!(
                "gradient check failed at step {}: relative error {err:.3e}",
                self.step + 1
            )));
        }
        self.checks_passed += 1;
        Ok(())
    }
}

/// Everything a run produced, including partial results of a failed run.
pub struct RunOutput {
    pub params: PolicyParams,
    /// Final parameters of each completed stage, in order.
    pub stage_params: Vec<(String, PolicyParams)>,
    pub metrics: Vec<MetricRecord>,
    pub timings: Vec<Timing>,
    pub pairs: Vec<Record>,
    pub rollouts: Vec<Record>,
    pub buffer_dump: Vec<Record>,
    pub checks_passed: u64,
    /// Set when a stage failed; outputs above cover the steps before it.
    pub failure: Option<String>,
}

/// Builds the world and base model and runs every configured stage in order.
pub fn run_pipeline(config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let world = World::new(config.task.clone(), config.reward.clone())?;
    let start = base_model(&world, config)?;
    run_from(&world, config, start)
}

/// Runs the configured stages from the given starting parameters.
pub fn run_from(world: &World, config: &TrainConfig, start: PolicyParams) -> Result<RunOutput> {
    let mut session = Session::new(world, config);
    session.record_initial(&start)?;
    let mut params = start;
    let mut stage_params = Vec::new();
    let mut failure = None;
    for (index, stage) in config.stages.iter().enumerate() {
        match run_stage(&mut session, params.clone(), config, index, stage) {
            Ok(p) => {
                params = p;
                stage_params.push((stage.name.clone(), params.clone()));
            }
            Err(e) => {
                log::error!("stage {} failed: {e}", stage.name);
                failure = Some(format!("stage {}: {e}", stage.name));
                break;
            }
        }
    }
    Ok(RunOutput {
        params,
        stage_params,
        checks_passed: session.checks_passed,
        metrics: session.metrics,
        timings: session.timings,
        pairs: session.pairs,
        rollouts: session.rollouts,
        buffer_dump: session.buffer_dump,
        failure,
    })
}

fn run_stage(
    session: &mut Session<'_>,
    params: PolicyParams,
    config: &TrainConfig,
    index: usize,
    stage: &StageConfig,
) -> Result<PolicyParams> {
    let stream = derive_seed(derive_seed(config.seed, index as u64), stage.seed_offset);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, 0));
    let task_stream = derive_seed(stream, 1);
    log::info!("stage {} ({:?}, {} steps)", stage.name, stage.kind, stage.steps);
    match stage.kind {
        StageKind::Sft => {
            let n = stage.steps as usize * stage.prompts_per_step;
            let dataset = sft_dataset(session.world, task_stream, n);
            run_sft(session, params, stage, &dataset)
        }
        StageKind::Mpo => {
            let mut tasks = TaskSource::fresh(task_stream);
            run_mpo_stage(session, params, stage, &mut tasks, &mut rng)
        }
        StageKind::Grpo => {
            let mut tasks = if stage.grpo.pool_size > 0 {
                TaskSource::pool(session.world, task_stream, stage.grpo.pool_size)
            } else {
                TaskSource::fresh(task_stream)
            };
            let mut buffer = if stage.buffer.enabled {
                Some(SelectiveBuffer::new(stage.buffer)?)
            } else {
                None
            };
            run_grpo_stage(session, params, stage, &mut tasks, buffer.as_mut(), &mut rng)
        }
    }
}
