use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{JudgeScore, JudgeSource};
use crate::error::{Error, Result};
use crate::policy::Token;
use crate::tasks::{OpCode, Prompt};

pub const RUBRIC_VERSION: &str = "v1";
pub const RUBRIC: &str = include_str!("../../assets/judge_rubric_v1.txt");

pub const URL_ENV: &str = "DAGRPO_JUDGE_URL";
pub const KEY_ENV: &str = "DAGRPO_JUDGE_KEY";

/// Text renderings sent to the judge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt: String,
    pub candidate: String,
    pub reference: String,
    pub rubric: String,
}

fn render_tokens(modulus: u16, tokens: &[Token]) -> String {
    if tokens.is_empty() {
        return "(empty response)".to_string();
    }
    tokens
        .iter()
        .map(|t| match t.0 {
            v if v < modulus => v.to_string(),
            v if v == modulus => "SEP".to_string(),
            v if v == modulus + 1 => "EOS".to_string(),
            v => format!("<{v}>"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl JudgeRequest {
    pub fn render(prompt: &Prompt, candidate: &[Token], reference: &[Token]) -> Self {
        let ops: Vec<String> = prompt
            .operations
            .iter()
            .map(|op| {
                let verb = match op.op_code {
                    OpCode::Add => "add",
                    OpCode::Sub => "subtract",
                    OpCode::Mul => "multiply by",
                };
                format!("{verb} {}", op.operand)
            })
            .collect();
        JudgeRequest {
            prompt: format!(
                "Start from {}. Then {}. Reduce every result modulo {}.",
                prompt.start_value,
                ops.join(", then "),
                prompt.modulus
            ),
            candidate: render_tokens(prompt.modulus, candidate),
            reference: render_tokens(prompt.modulus, reference),
            rubric: RUBRIC.to_string(),
        }
    }

    pub fn user_message(&self) -> String {
        format!(
            "QUESTION:\n{}\n\nCANDIDATE:\n{}\n\nREFERENCE:\n{}\n",
            self.prompt, self.candidate, self.reference
        )
    }

    fn validate(&self) -> Result<()> {
        if [&self.prompt, &self.candidate, &self.reference, &self.rubric]
            .iter()
            .any(|s| s.trim().is_empty())
        {
            return Err(Error::MissingData("judge request has an empty rendering".into()));
        }
        Ok(())
    }
}

/// First integer in `reply`, accepted only when it lies in 1–10.
pub fn parse_score(reply: &str) -> Result<f64> {
    let digits: String = reply
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    if digits.is_empty() {
        return Err(Error::MalformedJudgment(reply.to_string()));
    }
    match digits.parse::<u32>() {
        Ok(v @ 1..=10) => Ok(v as f64),
        _ => Err(Error::MalformedJudgment(reply.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub max_in_flight: usize,
    pub cache_path: Option<PathBuf>,
}

impl EndpointConfig {
    /// Endpoint from `DAGRPO_JUDGE_URL`, credential from `DAGRPO_JUDGE_KEY`.
    pub fn from_env(model: &str, timeout: Duration, retries: u32, max_in_flight: usize) -> Result<Self> {
        let url = std::env::var(URL_ENV)
            .map_err(|_| Error::config(URL_ENV, "environment variable not set"))?;
        Ok(EndpointConfig {
            url,
            api_key: std::env::var(KEY_ENV).ok(),
            model: model.to_string(),
            timeout,
            retries,
            max_in_flight: max_in_flight.max(1),
            cache_path: None,
        })
    }

    fn completions_url(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    score: f64,
}

/// Chat-completion judge with a persistent score cache.
pub struct ExternalJudge {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
    cache: Mutex<HashMap<String, f64>>,
    cache_file: Option<Mutex<File>>,
    requests_sent: AtomicUsize,
}

impl ExternalJudge {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .connect_timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::JudgeUnavailable(e.to_string()))?;
        let mut cache = HashMap::new();
        let cache_file = match &cfg.cache_path {
            Some(path) => {
                load_cache(path, &mut cache)?;
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        Ok(ExternalJudge {
            cfg,
            client,
            cache: Mutex::new(cache),
            cache_file,
            requests_sent: AtomicUsize::new(0),
        })
    }

    /// HTTP requests issued so far (cache hits excluded).
    pub fn requests_sent(&self) -> usize {
        self.requests_sent.load(Ordering::Relaxed)
    }

    fn cache_key(&self, req: &JudgeRequest) -> String {
        let mut h = Sha256::new();
        for part in [RUBRIC_VERSION, &self.cfg.model, &req.rubric, &req.prompt, &req.candidate, &req.reference] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Score one request, consulting the cache first.
    pub fn score(&self, req: &JudgeRequest) -> Result<JudgeScore> {
        req.validate()?;
        let key = self.cache_key(req);
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return JudgeScore::new(v, JudgeSource::External);
        }
        let reply = self.send_with_retries(req)?;
        let value = parse_score(&reply)?;
        self.remember(key, value)?;
        JudgeScore::new(value, JudgeSource::External)
    }

    /// Scores a batch with at most `max_in_flight` concurrent requests.
    /// Results are returned in request order.
    pub fn score_batch(&self, requests: &[JudgeRequest]) -> Vec<Result<JudgeScore>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<JudgeScore>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.cfg.max_in_flight.min(requests.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(self.score(&requests[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }

    fn remember(&self, key: String, value: f64) -> Result<()> {
        let mut cache = self.cache.lock().unwrap();
        if cache.insert(key.clone(), value).is_none() {
            if let (Some(f), Some(path)) = (&self.cache_file, &self.cfg.cache_path) {
                let mut line = serde_json::to_string(&CacheRecord { key, score: value })?;
                line.push('\n');
                f.lock()
                    .unwrap()
                    .write_all(line.as_bytes())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }

    fn send_with_retries(&self, req: &JudgeRequest) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            match self.send_once(req) {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::JudgeUnavailable(format!(
            "{} attempts failed, last error: {last}",
            self.cfg.retries + 1
        )))
    }

    fn send_once(&self, req: &JudgeRequest) -> std::result::Result<String, Attempt> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": req.rubric},
                {"role": "user", "content": req.user_message()},
            ],
        });
        let mut builder = self.client.post(self.cfg.completions_url()).json(&body);
        if let Some(key) = &self.cfg.api_key {
            builder = builder.bearer_auth(key);
        }
        self.requests_sent.fetch_add(1, Ordering::Relaxed);
        let resp = builder.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::JudgeUnavailable(format!("HTTP {status}"))));
        }
        let value: serde_json::Value = resp.json().map_err(|e| Attempt::Retry(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(Error::MalformedJudgment(value.to_string())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

fn load_cache(path: &Path, cache: &mut HashMap<String, f64>) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        cache.insert(rec.key, rec.score);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_first_integer() {
        assert_eq!(parse_score("Score: 7").unwrap(), 7.0);
        assert_eq!(parse_score("10/10, flawless").unwrap(), 10.0);
        assert_eq!(parse_score("score 3 of 10").unwrap(), 3.0);
    }

    #[test]
    fn rejects_missing_or_out_of_range() {
        assert!(matches!(parse_score("excellent work"), Err(Error::MalformedJudgment(_))));
        assert!(matches!(parse_score("0"), Err(Error::MalformedJudgment(_))));
        assert!(matches!(parse_score("11"), Err(Error::MalformedJudgment(_))));
        assert!(parse_score("").is_err());
    }

    #[test]
    fn renderings_are_nonempty() {
        let p = Prompt::new(
            3,
            vec![crate::tasks::Operation { op_code: OpCode::Mul, operand: 2 }],
            16,
        )
        .unwrap();
        let r = JudgeRequest::render(&p, &[], &[Token(6), Token(16), Token(17)]);
        assert_eq!(r.candidate, "(empty response)");
        assert_eq!(r.reference, "6 SEP EOS");
        assert!(r.prompt.contains("multiply by 2"));
        assert!(r.validate().is_ok());
    }

    #[test]
    fn url_gets_completions_suffix() {
        let mut cfg = EndpointConfig {
            url: "http://localhost:1/v1/".into(),
            api_key: None,
            model: "m".into(),
            timeout: Duration::from_secs(1),
            retries: 0,
            max_in_flight: 1,
            cache_path: None,
        };
        assert_eq!(cfg.completions_url(), "http://localhost:1/v1/chat/completions");
        cfg.url = "http://h/chat/completions".into();
        assert_eq!(cfg.completions_url(), "http://h/chat/completions");
    }
}
