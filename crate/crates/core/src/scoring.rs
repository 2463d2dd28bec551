//! Template scoring: `f(T) = Σ_c log P(t_c | t_{1:c-1}, X)` in nats.
//!
//! [`TemplateScorer`] abstracts over where the probabilities come from. The
//! in-process [`LocalScorer`] wraps a [`Model`]; [`ExternalScorer`] talks to a
//! child process speaking newline-delimited JSON, and [`serve`] is the
//! matching server loop around a local scorer.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Real};
use crate::templates::FilledTemplate;
use crate::text::{TokenSeq, Vocab, EOS};

/// How per-token log-probabilities are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Plain sum over the target tokens.
    #[default]
    Sum,
    /// Sum divided by the target length. Only useful when competing
    /// candidates differ in length.
    MeanPerToken,
}

pub trait TemplateScorer: Sync {
    /// Score of one filled template given the encoded source sentence.
    fn score_target(&self, source: &TokenSeq, target: &FilledTemplate) -> Result<f64>;

    /// Scores of several templates for the same source, in input order.
    fn score_targets(&self, source: &TokenSeq, targets: &[FilledTemplate]) -> Result<Vec<f64>> {
        targets.iter().map(|t| self.score_target(source, t)).collect()
    }
}

impl<S: TemplateScorer + ?Sized> TemplateScorer for &S {
    fn score_target(&self, source: &TokenSeq, target: &FilledTemplate) -> Result<f64> {
        (**self).score_target(source, target)
    }

    fn score_targets(&self, source: &TokenSeq, targets: &[FilledTemplate]) -> Result<Vec<f64>> {
        (**self).score_targets(source, targets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub category: String,
    pub label: String,
    pub spec_id: String,
    pub score: f64,
}

pub fn score_target<S: TemplateScorer + ?Sized>(scorer: &S, source: &TokenSeq, target: &FilledTemplate) -> Result<f64> {
    if target.tokens.is_empty() {
        return Err(Error::Template(format!("template {:?} filled to an empty sequence", target.spec_id)));
    }
    scorer.score_target(source, target)
}

/// Score every candidate, preserving order.
pub fn score_candidates<S: TemplateScorer + ?Sized>(
    scorer: &S,
    source: &TokenSeq,
    candidates: &[FilledTemplate],
) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::Template("no candidates to score".into()));
    }
    if let Some(i) = candidates.iter().position(|c| c.tokens.is_empty()) {
        return Err(Error::Template(format!("candidate {i} is an empty sequence")));
    }
    let scores = scorer.score_targets(source, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Scorer {
            context: "batch".into(),
            message: format!("{} scores returned for {} candidates", scores.len(), candidates.len()),
        });
    }
    Ok(candidates
        .iter()
        .zip(scores)
        .map(|(c, score)| ScoredCandidate {
            category: c.category.clone(),
            label: c.label.clone(),
            spec_id: c.spec_id.clone(),
            score,
        })
        .collect())
}

/// Scores templates with an in-process model.
#[derive(Clone, Debug)]
pub struct LocalScorer<F> {
    pub model: Model<F>,
    pub mode: ScoreMode,
}

impl<F: Real> LocalScorer<F> {
    pub fn new(model: Model<F>) -> Self {
        LocalScorer {
            model,
            mode: ScoreMode::Sum,
        }
    }

    pub fn with_mode(model: Model<F>, mode: ScoreMode) -> Self {
        LocalScorer { model, mode }
    }

    fn finish(&self, sum: F, len: usize) -> f64 {
        match self.mode {
            ScoreMode::Sum => sum.f64(),
            ScoreMode::MeanPerToken => sum.f64() / len as f64,
        }
    }

    /// Score raw id sequences; `target` must already end with EOS.
    pub fn score_ids(&self, source: &[u32], target: &[u32]) -> Result<f64> {
        let enc = self.model.encode(source, None)?;
        let sum = self.model.target_logprob(&enc, target)?;
        Ok(self.finish(sum, target.len()))
    }
}

impl<F: Real> TemplateScorer for LocalScorer<F> {
    fn score_target(&self, source: &TokenSeq, target: &FilledTemplate) -> Result<f64> {
        self.score_ids(source.ids(), target.tokens.ids())
            .map_err(|e| with_context(e, &target.text))
    }

    /// Encodes the source once and reuses it for every target.
    fn score_targets(&self, source: &TokenSeq, targets: &[FilledTemplate]) -> Result<Vec<f64>> {
        let enc = self.model.encode(source.ids(), None)?;
        targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let sum = self
                    .model
                    .target_logprob(&enc, t.tokens.ids())
                    .map_err(|e| with_context(e, &format!("candidate {i} {:?}", t.text)))?;
                Ok(self.finish(sum, t.tokens.len()))
            })
            .collect()
    }
}

fn with_context(e: Error, what: &str) -> Error {
    match e {
        Error::ModelInput(m) => Error::Scorer {
            context: what.to_string(),
            message: m,
        },
        other => other,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: i64,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Encode a bridge string: whitespace-separated tokens, as produced by
/// [`Vocab::decode`] and [`FilledTemplate::text`].
fn encode_wire(vocab: &Vocab, text: &str) -> TokenSeq {
    let words: Vec<&str> = text.split_whitespace().collect();
    vocab.encode_tokens(&words)
}

/// Answer scoring requests read line by line from `input` until it closes.
pub fn serve<F: Real, R: BufRead, W: Write>(scorer: &LocalScorer<F>, vocab: &Vocab, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<ScoreRequest>(&line) {
            Err(e) => ScoreResponse {
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_i64())),
                logprob: None,
                error: Some(format!("bad request: {e}")),
            },
            Ok(req) => {
                let source = encode_wire(vocab, &req.source);
                let mut target = encode_wire(vocab, &req.target).0;
                target.push(EOS);
                match scorer.score_ids(source.ids(), &target) {
                    Ok(lp) => ScoreResponse {
                        id: Some(req.id),
                        logprob: Some(lp),
                        error: None,
                    },
                    Err(e) => ScoreResponse {
                        id: Some(req.id),
                        logprob: None,
                        error: Some(e.to_string()),
                    },
                }
            }
        };
        let mut buf = serde_json::to_vec(&resp).expect("response serializes");
        buf.push(b'\n');
        output.write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
        output.flush().map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExternalScorerConfig {
    pub program: String,
    pub args: Vec<String>,
    /// Maximum wait for one response.
    pub timeout: Duration,
    /// How many times a dead or unresponsive child is restarted for a single
    /// request before the request fails.
    pub max_restarts: usize,
}

impl ExternalScorerConfig {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        ExternalScorerConfig {
            program: program.into(),
            args,
            timeout: Duration::from_secs(30),
            max_restarts: 1,
        }
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct BridgeState {
    worker: Option<Worker>,
    next_id: i64,
}

/// Scores templates by sending them to a child process.
pub struct ExternalScorer {
    config: ExternalScorerConfig,
    vocab: Vocab,
    state: Mutex<BridgeState>,
}

impl ExternalScorer {
    /// `vocab` turns source ids back into the whitespace-joined text the
    /// bridge sends.
    pub fn spawn(config: ExternalScorerConfig, vocab: Vocab) -> Result<Self> {
        let worker = Self::start(&config)?;
        Ok(ExternalScorer {
            config,
            vocab,
            state: Mutex::new(BridgeState {
                worker: Some(worker),
                next_id: 0,
            }),
        })
    }

    fn start(config: &ExternalScorerConfig) -> Result<Worker> {
        let mut child = Command::new(&config.program)
            .args(&config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Scorer {
                context: format!("starting {}", config.program),
                message: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }

    fn roundtrip(worker: &mut Worker, req: &ScoreRequest, timeout: Duration) -> std::result::Result<ScoreResponse, String> {
        let mut buf = serde_json::to_vec(req).expect("request serializes");
        buf.push(b'\n');
        worker
            .stdin
            .write_all(&buf)
            .and_then(|_| worker.stdin.flush())
            .map_err(|e| format!("write failed: {e}"))?;
        loop {
            let line = match worker.lines.recv_timeout(timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(format!("read failed: {e}")),
                Err(RecvTimeoutError::Timeout) => return Err(format!("no response within {timeout:?}")),
                Err(RecvTimeoutError::Disconnected) => return Err("scorer process exited".into()),
            };
            let resp: ScoreResponse = serde_json::from_str(&line).map_err(|e| format!("unparseable response {line:?}: {e}"))?;
            // Responses to abandoned requests are skipped.
            if resp.id == Some(req.id) {
                return Ok(resp);
            }
        }
    }

    fn request(&self, source: String, target: String) -> Result<f64> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let req = ScoreRequest {
            id: state.next_id,
            source,
            target,
        };
        state.next_id += 1;
        let mut last_failure = String::new();
        for attempt in 0..=self.config.max_restarts {
            if state.worker.is_none() {
                log::warn!("restarting scorer process (attempt {attempt}) after: {last_failure}");
                state.worker = Some(Self::start(&self.config)?);
            }
            let worker = state.worker.as_mut().expect("worker present");
            match Self::roundtrip(worker, &req, self.config.timeout) {
                Ok(ScoreResponse { logprob: Some(lp), .. }) => return Ok(lp),
                Ok(ScoreResponse { error, .. }) => {
                    return Err(Error::Scorer {
                        context: format!("request {} {:?}", req.id, req.target),
                        message: error.unwrap_or_else(|| "response without logprob".into()),
                    })
                }
                Err(msg) => {
                    last_failure = msg;
                    state.worker = None;
                }
            }
        }
        Err(Error::Scorer {
            context: format!("request {} {:?}", req.id, req.target),
            message: last_failure,
        })
    }
}

impl TemplateScorer for ExternalScorer {
    fn score_target(&self, source: &TokenSeq, target: &FilledTemplate) -> Result<f64> {
        let source = self.vocab.decode(source)?;
        self.request(source, target.text.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSchema;
    use crate::model::{InitMode, ModelConfig, Precision};
    use crate::templates::{candidates_acsa, TemplateSet};
    use crate::text::build_vocab;

    fn setup(mode: InitMode) -> (LocalScorer<f64>, LabelSchema, Vocab) {
        let schema = LabelSchema::new(
            vec!["food".into(), "price".into()],
            vec!["positive".into(), "negative".into(), "neutral".into()],
        )
        .unwrap();
        let vocab = build_vocab(&[], &schema);
        let cfg = ModelConfig {
            d_model: 16,
            d_ffn: 16,
            dropout: 0.0,
            precision: Precision::Double,
            ..ModelConfig::with_vocab(vocab.len())
        };
        let model = Model::init(cfg, 4, mode).unwrap();
        (LocalScorer::new(model), schema, vocab)
    }

    #[test]
    fn uniform_model_scores_minus_m_log_v() {
        let (scorer, schema, vocab) = setup(InitMode::Zero);
        let cands = candidates_acsa(&TemplateSet::default(), "price", &schema, &vocab).unwrap();
        let src = vocab.encode("the price is negative");
        for c in &cands {
            let want = -(c.tokens.len() as f64) * (vocab.len() as f64).ln();
            assert!((score_target(&scorer, &src, c).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_equals_sequential_and_preserves_order() {
        let (scorer, schema, vocab) = setup(InitMode::Random);
        let mut cands = candidates_acsa(&TemplateSet::default(), "food", &schema, &vocab).unwrap();
        let src = vocab.encode("the food is positive");
        let batched = score_candidates(&scorer, &src, &cands).unwrap();
        for (b, c) in batched.iter().zip(&cands) {
            assert_eq!(b.score.to_bits(), scorer.score_target(&src, c).unwrap().to_bits());
            assert_eq!(b.label, c.label);
            assert!(b.score <= 0.0);
        }
        cands.reverse();
        let rev = score_candidates(&scorer, &src, &cands).unwrap();
        let mut rev_scores: Vec<f64> = rev.iter().map(|s| s.score).collect();
        rev_scores.reverse();
        assert_eq!(rev_scores, batched.iter().map(|s| s.score).collect::<Vec<_>>());
        assert!(score_candidates(&scorer, &src, &[]).is_err());
    }

    #[test]
    fn mean_mode_divides_by_length() {
        let (scorer, schema, vocab) = setup(InitMode::Random);
        let c = &candidates_acsa(&TemplateSet::default(), "food", &schema, &vocab).unwrap()[0];
        let src = vocab.encode("the food");
        let sum = scorer.score_target(&src, c).unwrap();
        let mean = LocalScorer::with_mode(scorer.model.clone(), ScoreMode::MeanPerToken)
            .score_target(&src, c)
            .unwrap();
        assert!((mean - sum / c.tokens.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn serve_answers_requests_and_reports_errors() {
        let (scorer, schema, vocab) = setup(InitMode::Random);
        let c = &candidates_acsa(&TemplateSet::default(), "food", &schema, &vocab).unwrap()[1];
        let src = vocab.encode("the food is negative");
        let input = format!(
            "{}\nnot json\n{{\"id\": 5, \"source\": \"\", \"target\": \"food\"}}\n",
            serde_json::json!({"id": 3, "source": vocab.decode(&src).unwrap(), "target": c.text})
        );
        let mut out = Vec::new();
        serve(&scorer, &vocab, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<ScoreResponse> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].id, Some(3));
        let want = scorer.score_target(&src, c).unwrap();
        assert_eq!(lines[0].logprob, Some(want));
        assert!(lines[1].error.is_some());
        assert_eq!(lines[2].id, Some(5));
        assert!(lines[2].error.is_some());
    }
}
