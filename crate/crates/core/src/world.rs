//! Synthetic verifiable task family and the three reward channels.
//!
//! Tasks are modular sums whose operands are only visible through a dense
//! "visual" feature vector; the prompt text carries a query marker. Each
//! operand multiset (a scene) has its own fixed random feature vector. The
//! rule channel checks the delimited answer span exactly, the format channel
//! checks the reasoning/answer delimiter structure, and the model channel is
//! a fixed, never-trained scorer that is correlated with (but not identical
//! to) correctness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of digit tokens; digits always occupy ids `0..=9`.
pub const NUM_DIGITS: u32 = 10;
/// Prompt marker asking for the answer.
pub const QUERY_TOKEN: TokenId = 10;
/// Filler token used inside the reasoning span of canonical responses.
pub const STEP_TOKEN: TokenId = 11;
/// Smallest vocabulary that fits digits, query, step and five delimiters.
pub const MIN_VOCAB: u32 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialTokens {
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
    pub end: TokenId,
}

impl SpecialTokens {
    /// Places the five delimiters at the top of the vocabulary.
    pub fn top_of(size: u32) -> Self {
        SpecialTokens {
            think_open: size - 5,
            think_close: size - 4,
            answer_open: size - 3,
            answer_close: size - 2,
            end: size - 1,
        }
    }

    pub fn all(&self) -> [TokenId; 5] {
        [
            self.think_open,
            self.think_close,
            self.answer_open,
            self.answer_close,
            self.end,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: u32,
    pub special: SpecialTokens,
}

impl Vocabulary {
    pub fn new(size: u32, special: SpecialTokens) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(Error::config(
                "task.vocab_size",
                format!("must be at least {MIN_VOCAB}, got {size}"),
            ));
        }
        let ids = special.all();
        for (i, &id) in ids.iter().enumerate() {
            if id >= size {
                return Err(Error::config(
                    "task.special_tokens",
                    format!("id {id} is not below vocab size {size}"),
                ));
            }
            if id <= STEP_TOKEN {
                return Err(Error::config(
                    "task.special_tokens",
                    format!("id {id} collides with digit/query/step tokens (0..={STEP_TOKEN})"),
                ));
            }
            if ids[..i].contains(&id) {
                return Err(Error::config(
                    "task.special_tokens",
                    format!("id {id} is used twice"),
                ));
            }
        }
        Ok(Vocabulary { size, special })
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        self.special.all().contains(&t)
    }

    pub fn is_digit(&self, t: TokenId) -> bool {
        t < NUM_DIGITS
    }
}

fn default_modulus() -> u32 {
    10
}
fn default_difficulty() -> u32 {
    1
}
fn default_vocab() -> u32 {
    32
}
fn default_max_prompt() -> usize {
    8
}
fn default_visual_dim() -> usize {
    32
}
fn default_think_len() -> usize {
    1
}
fn default_format_bonus() -> f64 {
    0.5
}

/// Task-family parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "default_modulus")]
    pub modulus: u32,
    /// Operands are drawn uniformly from `0..=operand_max`; defaults to `modulus - 1`.
    #[serde(default)]
    pub operand_max: Option<u32>,
    /// Difficulty `k` means `k + 1` operands.
    #[serde(default = "default_difficulty")]
    pub min_difficulty: u32,
    #[serde(default = "default_difficulty")]
    pub max_difficulty: u32,
    #[serde(default = "default_vocab")]
    pub vocab_size: u32,
    #[serde(default)]
    pub special_tokens: Option<SpecialTokens>,
    #[serde(default = "default_max_prompt")]
    pub max_prompt_len: usize,
    #[serde(default = "default_visual_dim")]
    pub visual_dim: usize,
    /// Seed of the scene-to-feature embedding shared by every task of the family.
    #[serde(default)]
    pub family_seed: u64,
    /// Number of filler tokens inside the reasoning span of canonical responses.
    #[serde(default = "default_think_len")]
    pub think_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            modulus: default_modulus(),
            operand_max: None,
            min_difficulty: default_difficulty(),
            max_difficulty: default_difficulty(),
            vocab_size: default_vocab(),
            special_tokens: None,
            max_prompt_len: default_max_prompt(),
            visual_dim: default_visual_dim(),
            family_seed: 0,
            think_len: default_think_len(),
        }
    }
}

fn default_reward_seed() -> u64 {
    1
}
fn default_bag_scale() -> f64 {
    1.0
}
fn default_correctness_weight() -> f64 {
    3.0
}
fn default_model_bias() -> f64 {
    -1.0
}

/// Parameters of the hybrid reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "default_format_bonus")]
    pub format_bonus: f64,
    #[serde(default = "default_reward_seed")]
    pub seed: u64,
    /// Half-width of the uniform range for bag-of-token weights.
    #[serde(default = "default_bag_scale")]
    pub bag_scale: f64,
    #[serde(default = "default_correctness_weight")]
    pub correctness_weight: f64,
    /// Partial agreement credit for wrong answers close to the truth.
    #[serde(default)]
    pub near_miss_credit: f64,
    #[serde(default = "default_model_bias")]
    pub bias: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            format_bonus: default_format_bonus(),
            seed: default_reward_seed(),
            bag_scale: default_bag_scale(),
            correctness_weight: default_correctness_weight(),
            near_miss_credit: 0.0,
            bias: default_model_bias(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub seed: u64,
    pub difficulty: u32,
    pub operands: Vec<u32>,
    pub prompt_tokens: Vec<TokenId>,
    pub visual_features: Vec<f64>,
    pub ground_truth_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub rule: f64,
    pub model: f64,
    pub format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(rule: f64, model: f64, format: f64) -> Self {
        RewardBreakdown {
            rule,
            model,
            format,
            total: rule + model + format,
        }
    }
}

/// A configured task family together with its fixed reward scorer.
///
/// Everything here is immutable after construction, so a `World` can be
/// shared freely between workers.
#[derive(Debug, Clone)]
pub struct World {
    pub task: TaskConfig,
    pub reward: RewardConfig,
    pub vocab: Vocabulary,
    bag_weights: Vec<f64>,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_add(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(a: u64, b: u64) -> u64 {
    mix_seed(a, b)
}

impl World {
    pub fn new(task: TaskConfig, reward: RewardConfig) -> Result<Self> {
        let special = task
            .special_tokens
            .unwrap_or_else(|| SpecialTokens::top_of(task.vocab_size.max(MIN_VOCAB)));
        let vocab = Vocabulary::new(task.vocab_size, special)?;
        if task.modulus < 2 || task.modulus > 100 {
            return Err(Error::config(
                "task.modulus",
                format!("must lie in 2..=100 so answers fit in two digits, got {}", task.modulus),
            ));
        }
        if task.min_difficulty < 1 || task.min_difficulty > task.max_difficulty {
            return Err(Error::config(
                "task.min_difficulty",
                format!(
                    "need 1 <= min_difficulty <= max_difficulty, got {}..={}",
                    task.min_difficulty, task.max_difficulty
                ),
            ));
        }
        let operand_max = task.operand_max.unwrap_or(task.modulus - 1);
        if operand_max > 99 {
            return Err(Error::config("task.operand_max", "must be at most 99"));
        }
        let digits_per_operand = if operand_max >= 10 { 2 } else { 1 };
        let text_prompt_len = 1 + digits_per_operand * (task.max_difficulty as usize + 1);
        if text_prompt_len > task.max_prompt_len {
            return Err(Error::config(
                "task.max_prompt_len",
                format!(
                    "too small for difficulty {} (text prompts need {text_prompt_len})",
                    task.max_difficulty
                ),
            ));
        }
        if task.visual_dim == 0 {
            return Err(Error::config("task.visual_dim", "must be positive"));
        }
        if !(reward.format_bonus >= 0.0) || !reward.format_bonus.is_finite() {
            return Err(Error::config("reward.format_bonus", "must be finite and >= 0"));
        }
        if !(reward.bag_scale >= 0.0) || !reward.bag_scale.is_finite() {
            return Err(Error::config("reward.bag_scale", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&reward.near_miss_credit) {
            return Err(Error::config("reward.near_miss_credit", "must lie in [0, 1]"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(reward.seed, 0x5C0E));
        // digits carry no stylistic weight, so answers are judged on agreement alone
        let bag_weights = (0..task.vocab_size)
            .map(|t| {
                let w = rng.gen_range(-reward.bag_scale..=reward.bag_scale);
                if t < NUM_DIGITS {
                    0.0
                } else {
                    w
                }
            })
            .collect();

        Ok(World {
            task,
            reward,
            vocab,
            bag_weights,
        })
    }

    pub fn operand_max(&self) -> u32 {
        self.task.operand_max.unwrap_or(self.task.modulus - 1)
    }

    /// Decimal tokens of `value` without leading zeros.
    pub fn number_tokens(value: u32) -> Vec<TokenId> {
        if value >= 10 {
            vec![value / 10, value % 10]
        } else {
            vec![value]
        }
    }

    /// Features of the scene; operand order does not matter.
    pub fn visual_of(&self, operands: &[u32]) -> Vec<f64> {
        let mut scene = operands.to_vec();
        scene.sort_unstable();
        let key = scene
            .iter()
            .fold(mix_seed(self.task.family_seed, 0xFEA7), |h, &a| mix_seed(h, a as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..self.task.visual_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }

    fn assemble(&self, seed: u64, difficulty: u32, operands: Vec<u32>, text: bool) -> Task {
        let answer = operands.iter().sum::<u32>() % self.task.modulus;
        let mut prompt = vec![QUERY_TOKEN];
        let visual = if text {
            for &a in &operands {
                prompt.extend(Self::number_tokens(a));
            }
            vec![0.0; self.task.visual_dim]
        } else {
            self.visual_of(&operands)
        };
        Task {
            seed,
            difficulty,
            operands,
            prompt_tokens: prompt,
            visual_features: visual,
            ground_truth_tokens: Self::number_tokens(answer),
        }
    }

    pub fn generate_task(&self, seed: u64, difficulty: u32) -> Result<Task> {
        if difficulty < self.task.min_difficulty || difficulty > self.task.max_difficulty {
            return Err(Error::config(
                "difficulty",
                format!(
                    "{difficulty} outside configured range {}..={}",
                    self.task.min_difficulty, self.task.max_difficulty
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, difficulty as u64));
        let operands = (0..=difficulty)
            .map(|_| rng.gen_range(0..=self.operand_max()))
            .collect();
        Ok(self.assemble(seed, difficulty, operands, false))
    }

    /// Draws the difficulty for `seed` uniformly from the configured range.
    pub fn task_for_seed(&self, seed: u64) -> Task {
        let span = (self.task.max_difficulty - self.task.min_difficulty + 1) as u64;
        let difficulty = self.task.min_difficulty + (mix_seed(seed, 0xD1FF) % span) as u32;
        self.generate_task(seed, difficulty)
            .expect("difficulty drawn from configured range")
    }

    /// Text-only rendering of a task: operands appear as prompt digits and the
    /// visual input is blank. Used to train the base language head.
    pub fn text_task(&self, operands: &[u32]) -> Task {
        let difficulty = operands.len().saturating_sub(1) as u32;
        self.assemble(0, difficulty, operands.to_vec(), true)
    }

    /// Every ordered operand tuple across the configured difficulty range.
    pub fn all_operand_tuples(&self) -> Vec<Vec<u32>> {
        let n = self.operand_max() + 1;
        let mut out = Vec::new();
        for d in self.task.min_difficulty..=self.task.max_difficulty {
            let k = d as usize + 1;
            let mut idx = vec![0u32; k];
            loop {
                out.push(idx.clone());
                let mut j = 0;
                while j < k {
                    idx[j] += 1;
                    if idx[j] < n {
                        break;
                    }
                    idx[j] = 0;
                    j += 1;
                }
                if j == k {
                    break;
                }
            }
        }
        out
    }

    /// Ground truth wrapped in the full delimiter structure.
    pub fn canonical_response(&self, task: &Task) -> Vec<TokenId> {
        let s = &self.vocab.special;
        let mut out = vec![s.think_open];
        out.extend(std::iter::repeat(STEP_TOKEN).take(self.task.think_len));
        out.push(s.think_close);
        out.push(s.answer_open);
        out.extend(&task.ground_truth_tokens);
        out.push(s.answer_close);
        out.push(s.end);
        out
    }

    /// Tokens between the first `answer_open` and the next `answer_close`.
    pub fn answer_span<'a>(&self, response: &'a [TokenId]) -> Option<&'a [TokenId]> {
        let s = &self.vocab.special;
        let open = response.iter().position(|&t| t == s.answer_open)?;
        let rest = &response[open + 1..];
        let close = rest.iter().position(|&t| t == s.answer_close)?;
        Some(&rest[..close])
    }

    pub fn rule_reward(&self, task: &Task, response: &[TokenId]) -> f64 {
        match self.answer_span(response) {
            Some(span) if span == task.ground_truth_tokens.as_slice() => 1.0,
            _ => 0.0,
        }
    }

    pub fn format_reward(&self, response: &[TokenId]) -> f64 {
        if self.format_ok(response) {
            self.reward.format_bonus
        } else {
            0.0
        }
    }

    fn format_ok(&self, response: &[TokenId]) -> bool {
        let s = &self.vocab.special;
        let mut it = response.iter().copied().peekable();
        if it.next() != Some(s.think_open) {
            return false;
        }
        while let Some(&t) = it.peek() {
            if self.vocab.is_special(t) {
                break;
            }
            it.next();
        }
        if it.next() != Some(s.think_close) || it.next() != Some(s.answer_open) {
            return false;
        }
        while let Some(&t) = it.peek() {
            if self.vocab.is_special(t) {
                break;
            }
            it.next();
        }
        it.next() == Some(s.answer_close) && it.next() == Some(s.end) && it.next().is_none()
    }

    /// Parsed numeric answer, if the answer span is one or two digits.
    fn parsed_answer(&self, response: &[TokenId]) -> Option<u32> {
        let span = self.answer_span(response)?;
        if span.is_empty() || span.len() > 2 || !span.iter().all(|&t| self.vocab.is_digit(t)) {
            return None;
        }
        Some(span.iter().fold(0, |acc, &d| acc * 10 + d))
    }

    /// 1 for the right answer; wrong answers earn `near_miss_credit` scaled by
    /// their closeness to the truth on the modular circle.
    fn agreement(&self, task: &Task, response: &[TokenId]) -> f64 {
        let m = self.task.modulus;
        let truth = task.operands.iter().sum::<u32>() % m;
        match self.parsed_answer(response) {
            Some(v) if v == truth => 1.0,
            Some(v) if v < m => {
                let d = v.abs_diff(truth);
                let circ = d.min(m - d) as f64;
                self.reward.near_miss_credit * (1.0 - circ / (m / 2) as f64)
            }
            _ => 0.0,
        }
    }

    pub fn model_reward(&self, task: &Task, response: &[TokenId]) -> f64 {
        let len = response.len().max(1) as f64;
        let bag: f64 = response
            .iter()
            .map(|&t| self.bag_weights.get(t as usize).copied().unwrap_or(0.0))
            .sum::<f64>()
            / len;
        let z = self.reward.bias + self.reward.correctness_weight * self.agreement(task, response) + bag;
        sigmoid(z)
    }

    pub fn score(&self, task: &Task, response: &[TokenId]) -> RewardBreakdown {
        RewardBreakdown::new(
            self.rule_reward(task, response),
            self.model_reward(task, response),
            self.format_reward(response),
        )
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
