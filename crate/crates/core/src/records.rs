//! Line-delimited JSON records shared by preference datasets, rollout dumps
//! and buffer dumps. Tasks are stored by seed and difficulty and rebuilt
//! from the world on load.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::RolloutGroup;
use crate::mpo::PreferenceExample;
use crate::policy::Response;
use crate::ssb::BufferedSample;
use crate::world::{RewardBreakdown, Task, TokenId, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskKey {
    pub seed: u64,
    pub difficulty: u32,
    pub operands: Vec<u32>,
}

impl TaskKey {
    pub fn of(task: &Task) -> Self {
        TaskKey {
            seed: task.seed,
            difficulty: task.difficulty,
            operands: task.operands.clone(),
        }
    }

    /// Regenerates the task and checks it against the stored operands.
    pub fn resolve(&self, world: &World) -> Result<Task> {
        let task = world.generate_task(self.seed, self.difficulty)?;
        if task.operands != self.operands {
            return Err(Error::input(format!(
                "record for seed {} does not match this task family",
                self.seed
            )));
        }
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensWithLogprobs {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

impl From<&Response> for TokensWithLogprobs {
    fn from(r: &Response) -> Self {
        TokensWithLogprobs {
            tokens: r.tokens.clone(),
            logprobs: r.behavior_logprobs.clone(),
        }
    }
}

impl TokensWithLogprobs {
    pub fn to_response(&self) -> Result<Response> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(Error::input("token and log-probability counts differ"));
        }
        Ok(Response::new(self.tokens.clone(), self.logprobs.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Preference {
        task: TaskKey,
        chosen: TokensWithLogprobs,
        rejected: TokensWithLogprobs,
        margin: f64,
    },
    Rollout {
        task: TaskKey,
        response: TokensWithLogprobs,
        reward: RewardBreakdown,
        advantage: f64,
    },
    Buffered {
        task: TaskKey,
        response: TokensWithLogprobs,
        advantage: f64,
        insert_step: u64,
    },
}

impl Record {
    pub fn preference(ex: &PreferenceExample) -> Self {
        Record::Preference {
            task: TaskKey::of(&ex.task),
            chosen: (&ex.chosen).into(),
            rejected: (&ex.rejected).into(),
            margin: ex.margin,
        }
    }

    pub fn rollouts(group: &RolloutGroup) -> Vec<Self> {
        let key = TaskKey::of(&group.task);
        group
            .responses
            .iter()
            .zip(&group.rewards)
            .zip(&group.advantages)
            .map(|((r, reward), &advantage)| Record::Rollout {
                task: key.clone(),
                response: r.into(),
                reward: *reward,
                advantage,
            })
            .collect()
    }

    pub fn buffered(s: &BufferedSample) -> Self {
        Record::Buffered {
            task: TaskKey::of(&s.task),
            response: (&s.response).into(),
            advantage: s.advantage,
            insert_step: s.insert_step,
        }
    }

    pub fn to_preference(&self, world: &World) -> Result<PreferenceExample> {
        match self {
            Record::Preference {
                task,
                chosen,
                rejected,
                margin,
            } => Ok(PreferenceExample {
                task: task.resolve(world)?,
                chosen: chosen.to_response()?,
                rejected: rejected.to_response()?,
                margin: *margin,
            }),
            _ => Err(Error::input("record is not a preference pair")),
        }
    }

    pub fn to_buffered(&self, world: &World) -> Result<BufferedSample> {
        match self {
            Record::Buffered {
                task,
                response,
                advantage,
                insert_step,
            } => Ok(BufferedSample {
                task: task.resolve(world)?,
                response: response.to_response()?,
                advantage: *advantage,
                insert_step: *insert_step,
            }),
            _ => Err(Error::input("record is not a buffer entry")),
        }
    }
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a Record>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Runtime(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(r);
    }
    Ok(out)
}
