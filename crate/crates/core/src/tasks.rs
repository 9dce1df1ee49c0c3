//! Chain-arithmetic tasks with a final-answer verifier and a reference
//! demonstrator.
//!
//! A prompt is a start value and a chain of `add`/`sub`/`mul` operations
//! reduced modulo `M`. The expected response lists every intermediate value
//! as one token followed by a separator, then an end-of-sequence token:
//!
//! ```text
//! start 3, ops [(add,5),(mul,2)], M=16  ->  8 SEP 0 SEP EOS
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, Vocab};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCode {
    Add,
    Sub,
    Mul,
}

impl OpCode {
    pub const ALL: [OpCode; 3] = [OpCode::Add, OpCode::Sub, OpCode::Mul];

    fn symbol(self) -> char {
        match self {
            OpCode::Add => 'a',
            OpCode::Sub => 's',
            OpCode::Mul => 'm',
        }
    }

    pub fn apply(self, value: u16, operand: u16, modulus: u16) -> u16 {
        let (v, o, m) = (value as u32, operand as u32, modulus as u32);
        let out = match self {
            OpCode::Add => (v + o) % m,
            OpCode::Sub => (v + m - o % m) % m,
            OpCode::Mul => (v * o) % m,
        };
        out as u16
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operation {
    pub op_code: OpCode,
    pub operand: u16,
}

/// One chain-arithmetic question.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub start_value: u16,
    pub operations: Vec<Operation>,
    pub modulus: u16,
    /// Chain length `L`, always equal to `operations.len()`.
    pub difficulty: usize,
}

impl Prompt {
    pub fn new(start_value: u16, operations: Vec<Operation>, modulus: u16) -> Result<Self> {
        let prompt = Prompt {
            start_value,
            difficulty: operations.len(),
            operations,
            modulus,
        };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::config("modulus", "must be at least 2"));
        }
        if self.operations.is_empty() {
            return Err(Error::config("operations", "chain length must be at least 1"));
        }
        if self.difficulty != self.operations.len() {
            return Err(Error::config("difficulty", "must equal the number of operations"));
        }
        if self.start_value >= self.modulus
            || self.operations.iter().any(|op| op.operand >= self.modulus)
        {
            return Err(Error::config("prompt", "values must be reduced modulo M"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.modulus)
    }

    /// Canonical encoding, e.g. `16:3:a5.m2`. Used as the prompt id and as
    /// the prompt half of every policy context.
    pub fn key(&self) -> String {
        let ops: Vec<String> = self
            .operations
            .iter()
            .map(|op| format!("{}{}", op.op_code.symbol(), op.operand))
            .collect();
        format!("{}:{}:{}", self.modulus, self.start_value, ops.join("."))
    }

    /// The `L` intermediate values of the chain.
    pub fn chain_values(&self) -> Vec<u16> {
        let mut value = self.start_value;
        self.operations
            .iter()
            .map(|op| {
                value = op.op_code.apply(value, op.operand, self.modulus);
                value
            })
            .collect()
    }

    pub fn final_value(&self) -> u16 {
        *self.chain_values().last().expect("validated prompt has L >= 1")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OnPolicy,
    OffPolicy,
}

/// One response `o_i` together with everything computed about it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: String,
    pub tokens: Vec<Token>,
    pub origin: Origin,
    pub behavior_logprobs: Option<Vec<f64>>,
    pub reward: Option<u8>,
    pub judge_score: Option<f64>,
    pub advantage: Option<f64>,
}

impl Rollout {
    pub fn new(prompt: &Prompt, tokens: Vec<Token>, origin: Origin) -> Self {
        Rollout {
            prompt_id: prompt.key(),
            tokens,
            origin,
            behavior_logprobs: None,
            reward: None,
            judge_score: None,
            advantage: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_off_policy(&self) -> bool {
        self.origin == Origin::OffPolicy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub modulus: u16,
    /// Chain lengths drawn uniformly for each prompt.
    pub chain_lengths: Vec<usize>,
    pub prompts_per_batch: usize,
    /// Probability that the demonstrator corrupts its reference trace.
    pub noise_rate: f64,
    /// When non-zero, prompts are drawn from a fixed pool of this many
    /// prompts instead of the full prompt space.
    pub pool_size: usize,
    pub pool_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            modulus: 16,
            chain_lengths: vec![1],
            prompts_per_batch: 128,
            noise_rate: 0.0,
            pool_size: 0,
            pool_seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::config("modulus", "must be at least 2"));
        }
        if self.modulus > u16::MAX - 2 {
            return Err(Error::config("modulus", "too large for the token space"));
        }
        if self.chain_lengths.is_empty() || self.chain_lengths.contains(&0) {
            return Err(Error::config("chain_lengths", "must be a nonempty list of lengths >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.modulus)
    }
}

/// Draws a uniformly random prompt.
pub fn generate_prompt(cfg: &TaskConfig, rng: &mut Stream) -> Prompt {
    let m = cfg.modulus;
    let length = cfg.chain_lengths[rng.gen_range(0..cfg.chain_lengths.len())];
    let start_value = rng.gen_range(0..m);
    let operations = (0..length)
        .map(|_| Operation {
            op_code: OpCode::ALL[rng.gen_range(0..3)],
            operand: rng.gen_range(0..m),
        })
        .collect();
    Prompt {
        start_value,
        operations,
        modulus: m,
        difficulty: length,
    }
}

/// Where training and evaluation prompts come from: either the full prompt
/// space or a fixed pool generated once from `pool_seed`.
#[derive(Clone, Debug)]
pub struct PromptSource {
    cfg: TaskConfig,
    pool: Vec<Prompt>,
}

impl PromptSource {
    pub fn new(cfg: &TaskConfig) -> Self {
        let pool = (0..cfg.pool_size as u64)
            .map(|i| generate_prompt(cfg, &mut rng::stream(cfg.pool_seed, &[rng::purpose::POOL, i])))
            .collect();
        PromptSource {
            cfg: cfg.clone(),
            pool,
        }
    }

    pub fn pool(&self) -> &[Prompt] {
        &self.pool
    }

    pub fn draw(&self, rng: &mut Stream) -> Prompt {
        if self.pool.is_empty() {
            generate_prompt(&self.cfg, rng)
        } else {
            self.pool[rng.gen_range(0..self.pool.len())].clone()
        }
    }

    /// Like [`draw`](Self::draw) but restricted to prompts of one chain length.
    pub fn draw_with_length(&self, length: usize, rng: &mut Stream) -> Option<Prompt> {
        if self.pool.is_empty() {
            let cfg = TaskConfig {
                chain_lengths: vec![length],
                ..self.cfg.clone()
            };
            return Some(generate_prompt(&cfg, rng));
        }
        let candidates: Vec<&Prompt> = self.pool.iter().filter(|p| p.difficulty == length).collect();
        if candidates.is_empty() {
            return None;
        }
        Some(candidates[rng.gen_range(0..candidates.len())].clone())
    }
}

/// The verified expert trace for `prompt`.
pub fn reference_solution(prompt: &Prompt) -> Vec<Token> {
    let vocab = prompt.vocab();
    let mut tokens = Vec::with_capacity(2 * prompt.difficulty + 1);
    for value in prompt.chain_values() {
        tokens.push(vocab.value(value));
        tokens.push(vocab.sep());
    }
    tokens.push(vocab.eos());
    tokens
}

/// Structural reading of a response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedResponse {
    /// Values of the leading `value SEP` pairs.
    pub steps: Vec<u16>,
    /// Exactly `L` steps followed by EOS and nothing else.
    pub well_formed: bool,
}

pub fn parse_response(prompt: &Prompt, tokens: &[Token]) -> ParsedResponse {
    let vocab = prompt.vocab();
    let mut steps = Vec::new();
    let mut pos = 0;
    while pos + 1 < tokens.len() {
        match (vocab.value_of(tokens[pos]), tokens[pos + 1] == vocab.sep()) {
            (Some(v), true) => {
                steps.push(v);
                pos += 2;
            }
            _ => break,
        }
    }
    let l = prompt.difficulty;
    let well_formed =
        steps.len() == l && tokens.len() == 2 * l + 1 && tokens[2 * l] == vocab.eos();
    ParsedResponse { steps, well_formed }
}

/// Binary final-answer reward. Intermediate values are not checked.
pub fn verify(prompt: &Prompt, tokens: &[Token]) -> u8 {
    let parsed = parse_response(prompt, tokens);
    (parsed.well_formed && parsed.steps.last() == Some(&prompt.final_value())) as u8
}

/// Fraction of the true intermediate values found at their step position.
pub fn step_fraction(prompt: &Prompt, tokens: &[Token]) -> f64 {
    let parsed = parse_response(prompt, tokens);
    let truth = prompt.chain_values();
    let hits = truth
        .iter()
        .zip(parsed.steps.iter())
        .filter(|(t, s)| t == s)
        .count();
    hits as f64 / prompt.difficulty as f64
}

/// Number of leading well-formed `value SEP` steps.
pub fn emitted_steps(prompt: &Prompt, tokens: &[Token]) -> usize {
    parse_response(prompt, tokens).steps.len()
}

/// Off-policy anchor from the reference demonstrator. With probability
/// `noise_rate` exactly one value token is replaced by a different value.
pub fn demonstrate(prompt: &Prompt, cfg: &TaskConfig, rng: &mut Stream) -> Rollout {
    let mut tokens = reference_solution(prompt);
    if rng.gen::<f64>() < cfg.noise_rate {
        let vocab = prompt.vocab();
        let m = prompt.modulus;
        let position = 2 * rng.gen_range(0..prompt.difficulty);
        let old = vocab.value_of(tokens[position]).expect("reference value token");
        let new = (old + 1 + rng.gen_range(0..m - 1)) % m;
        tokens[position] = vocab.value(new);
    }
    Rollout::new(prompt, tokens, Origin::OffPolicy)
}

/// Writes records one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}
