//! Tabular k-gram softmax policy.
//!
//! The policy keeps one logit row of length `V` per context, where a context
//! is the prompt key plus the last `k` generated tokens. Rows that were never
//! written read as zeros, i.e. the uniform distribution. Because every
//! `(context, token)` pair owns its own parameters, two responses that pass
//! through the same history and emit the same token update exactly the same
//! coordinates.
//!
//! Log-probabilities and gradients always use the plain softmax
//! (temperature 1, top-p 1). Temperature and nucleus truncation only shape
//! the sampler.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::rng::Stream;
use crate::tasks::{Origin, Prompt, Rollout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Token layout for modulus `M`: values `0..M`, then SEP, then EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    modulus: u16,
}

impl Vocab {
    pub fn new(modulus: u16) -> Self {
        Vocab { modulus }
    }

    pub fn size(self) -> usize {
        self.modulus as usize + 2
    }

    pub fn value(self, v: u16) -> Token {
        debug_assert!(v < self.modulus);
        Token(v)
    }

    pub fn sep(self) -> Token {
        Token(self.modulus)
    }

    pub fn eos(self) -> Token {
        Token(self.modulus + 1)
    }

    pub fn value_of(self, t: Token) -> Option<u16> {
        (t.0 < self.modulus).then_some(t.0)
    }
}

/// Conditioning state `(prompt, last k tokens)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    pub prompt_key: Arc<str>,
    pub history: Vec<Token>,
}

impl Context {
    /// Context after `generated` tokens, keeping only the last `order`.
    pub fn new(prompt_key: Arc<str>, generated: &[Token], order: usize) -> Self {
        let start = generated.len().saturating_sub(order);
        Context {
            prompt_key,
            history: generated[start..].to_vec(),
        }
    }

    /// `prompt_key|t1,t2`
    pub fn encode(&self) -> String {
        let mut s = String::with_capacity(self.prompt_key.len() + 8);
        s.push_str(&self.prompt_key);
        s.push('|');
        for (i, t) in self.history.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", t.0);
        }
        s
    }

    pub fn decode(s: &str) -> Option<Self> {
        let (key, hist) = s.rsplit_once('|')?;
        if key.is_empty() {
            return None;
        }
        let history = if hist.is_empty() {
            Vec::new()
        } else {
            hist.split(',')
                .map(|t| t.parse().ok().map(Token))
                .collect::<Option<Vec<_>>>()?
        };
        Some(Context {
            prompt_key: Arc::from(key),
            history,
        })
    }
}

/// The contexts visited while emitting `tokens`, one per position.
pub fn contexts_along(prompt_key: &Arc<str>, tokens: &[Token], order: usize) -> Vec<Context> {
    (0..tokens.len())
        .map(|t| Context::new(prompt_key.clone(), &tokens[..t], order))
        .collect()
}

/// Logit table `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    order: usize,
    rows: BTreeMap<Context, Vec<f64>>,
    pub version: u64,
}

impl PolicyParams {
    pub fn new(vocab_size: usize, order: usize) -> Self {
        PolicyParams {
            vocab_size,
            order,
            rows: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, ctx: &Context) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    /// Logits for `ctx`, zeros when unseen.
    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        self.row(ctx)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    pub fn row_mut(&mut self, ctx: &Context) -> &mut Vec<f64> {
        let v = self.vocab_size;
        self.rows.entry(ctx.clone()).or_insert_with(|| vec![0.0; v])
    }

    pub fn set_row(&mut self, ctx: Context, logits: Vec<f64>) {
        assert_eq!(logits.len(), self.vocab_size, "row length must equal V");
        self.rows.insert(ctx, logits);
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(c, r)| (c, r.as_slice()))
    }

    pub fn context(&self, prompt_key: &Arc<str>, generated: &[Token]) -> Context {
        Context::new(prompt_key.clone(), generated, self.order)
    }

    /// Equality of the functions the tables represent: a missing row equals
    /// a row of zeros.
    pub fn same_values(&self, other: &PolicyParams) -> bool {
        if self.vocab_size != other.vocab_size || self.order != other.order {
            return false;
        }
        let zero = vec![0.0; self.vocab_size];
        let covers = |a: &PolicyParams, b: &PolicyParams| {
            a.rows
                .iter()
                .all(|(c, r)| r == b.rows.get(c).unwrap_or(&zero))
        };
        covers(self, other) && covers(other, self)
    }

    /// Text checkpoint. Header line, then one `context<TAB>logits` record per
    /// row with logits in shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "dagrpo-policy v1 vocab={} order={} version={}\n",
            self.vocab_size, self.order, self.version
        );
        for (ctx, row) in &self.rows {
            out.push_str(&ctx.encode());
            out.push('\t');
            for (i, x) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "empty checkpoint".into(),
        })?;
        let header_err = |reason: &str| Error::Parse {
            line: 1,
            reason: reason.into(),
        };
        let mut fields = header.split_whitespace();
        if fields.next() != Some("dagrpo-policy") || fields.next() != Some("v1") {
            return Err(header_err("not a dagrpo-policy v1 checkpoint"));
        }
        let mut vocab_size = None;
        let mut order = None;
        let mut version = None;
        for field in fields {
            let (k, v) = field.split_once('=').ok_or_else(|| header_err("bad header field"))?;
            let v: u64 = v.parse().map_err(|_| header_err("bad header value"))?;
            match k {
                "vocab" => vocab_size = Some(v as usize),
                "order" => order = Some(v as usize),
                "version" => version = Some(v),
                _ => return Err(header_err("unknown header field")),
            }
        }
        let mut params = PolicyParams::new(
            vocab_size.ok_or_else(|| header_err("missing vocab"))?,
            order.ok_or_else(|| header_err("missing order"))?,
        );
        params.version = version.unwrap_or(0);
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse { line: i + 1, reason };
            let (ctx, values) = line
                .split_once('\t')
                .ok_or_else(|| err("missing tab separator".into()))?;
            let ctx = Context::decode(ctx).ok_or_else(|| err(format!("bad context {ctx:?}")))?;
            let row = values
                .split(' ')
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != params.vocab_size {
                return Err(err(format!("expected {} logits, found {}", params.vocab_size, row.len())));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(err("non-finite logit".into()));
            }
            params.rows.insert(ctx, row);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 1.0,
            max_len: 16,
        }
    }
}

impl SamplingConfig {
    /// Plain softmax, the reference measure for objectives.
    pub fn unmodified(max_len: usize) -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 1.0,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p", "must lie in (0, 1]"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be positive"));
        }
        Ok(())
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// Keep the smallest probability-sorted prefix whose mass reaches `top_p`
/// and renormalize. Ties are ordered by ascending token id.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.iter_mut().for_each(|x| *x /= mass);
    kept
}

/// `π_θ(·|ctx)` under the sampling settings of `cfg`.
pub fn token_distribution(params: &PolicyParams, ctx: &Context, cfg: &SamplingConfig) -> Vec<f64> {
    let probs = match params.row(ctx) {
        Some(row) => softmax(row, cfg.temperature),
        None => vec![1.0 / params.vocab_size as f64; params.vocab_size],
    };
    nucleus(&probs, cfg.top_p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// `Σ_t log π_θ(o_t | q, o_<t)` under the plain softmax.
pub fn logprob_sequence(params: &PolicyParams, prompt: &Prompt, tokens: &[Token]) -> SequenceLogProb {
    let key: Arc<str> = Arc::from(prompt.key());
    logprob_tokens(params, &key, tokens)
}

pub(crate) fn logprob_tokens(params: &PolicyParams, key: &Arc<str>, tokens: &[Token]) -> SequenceLogProb {
    let uniform = -(params.vocab_size as f64).ln();
    let per_token: Vec<f64> = tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            let ctx = params.context(key, &tokens[..t]);
            match params.row(&ctx) {
                Some(row) => log_softmax_at(row, tok.index()),
                None => uniform,
            }
        })
        .collect();
    SequenceLogProb {
        total: per_token.iter().sum(),
        per_token,
    }
}

/// `Σ_t ∇_θ log π_θ(o_t | q, o_<t)`: each visit of context `h` emitting `w`
/// adds `onehot(w) − π_θ(·|h)` to row `h`.
pub fn grad_logprob_sequence(params: &PolicyParams, prompt: &Prompt, tokens: &[Token]) -> GradientVector {
    let key: Arc<str> = Arc::from(prompt.key());
    let mut grad = GradientVector::new(params.vocab_size());
    add_grad_logprob(&mut grad, params, &key, tokens, |_| 1.0);
    grad
}

/// Adds `Σ_t weight(t) · ∇ log π(o_t|h_t)` into `grad`.
pub(crate) fn add_grad_logprob(
    grad: &mut GradientVector,
    params: &PolicyParams,
    key: &Arc<str>,
    tokens: &[Token],
    mut weight: impl FnMut(usize) -> f64,
) {
    let cfg = SamplingConfig::unmodified(usize::MAX);
    for (t, tok) in tokens.iter().enumerate() {
        let w = weight(t);
        if w == 0.0 {
            continue;
        }
        let ctx = params.context(key, &tokens[..t]);
        let probs = token_distribution(params, &ctx, &cfg);
        let row = grad.row_mut(ctx);
        for (j, p) in probs.iter().enumerate() {
            row[j] -= w * p;
        }
        row[tok.index()] += w;
    }
}

fn sample_index(probs: &[f64], rng: &mut Stream) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

/// Autoregressive sample until EOS or `cfg.max_len` tokens.
pub fn sample_rollout(params: &PolicyParams, prompt: &Prompt, cfg: &SamplingConfig, rng: &mut Stream) -> Rollout {
    let key: Arc<str> = Arc::from(prompt.key());
    let eos = prompt.vocab().eos();
    let mut tokens = Vec::with_capacity(cfg.max_len);
    let mut logprobs = Vec::with_capacity(cfg.max_len);
    while tokens.len() < cfg.max_len {
        let ctx = params.context(&key, &tokens);
        let probs = token_distribution(params, &ctx, cfg);
        let i = sample_index(&probs, rng);
        logprobs.push(probs[i].ln());
        tokens.push(Token(i as u16));
        if tokens[tokens.len() - 1] == eos {
            break;
        }
    }
    let mut rollout = Rollout::new(prompt, tokens, Origin::OnPolicy);
    rollout.behavior_logprobs = Some(logprobs);
    rollout
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .fold(0.0, |h, &p| h - p * p.ln())
}

/// Mean entropy of the plain softmax over `contexts`.
pub fn policy_entropy<'a>(
    params: &PolicyParams,
    contexts: impl IntoIterator<Item = &'a Context>,
) -> Result<f64> {
    let cfg = SamplingConfig::unmodified(1);
    let (sum, n) = contexts.into_iter().fold((0.0, 0usize), |(s, n), ctx| {
        (s + entropy(&token_distribution(params, ctx, &cfg)), n + 1)
    });
    if n == 0 {
        return Err(Error::MissingData("entropy over an empty context collection".into()));
    }
    Ok(sum / n as f64)
}
