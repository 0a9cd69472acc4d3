//! Autoregressive inpainting of the reader turns of a partial dialog.
//!
//! Generation itself lives behind [`GeneratorBackend`]. At step `k` the
//! backend sees the serialized prefix `(prompt, û_1, s_1, ..., ⋄, s_k)`:
//! earlier reader turns already filled in, nothing after `s_k`.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dialog::{serialize, Dialog, Source, Speaker, MASK};
use crate::error::{Error, Result};
use crate::passage::{build_partial_dialog, Passage, DEFAULT_PROMPT_TEMPLATE};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GeneratorRequest {
    pub dialog_id: String,
    pub title: String,
    /// 1-based index of the reader turn being generated.
    pub step: usize,
    pub input_text: String,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Stub,
    Oracle,
    Remote,
}

pub trait GeneratorBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Raw generation; post-processing happens in [`inpaint_step`].
    fn generate(&self, request: &GeneratorRequest) -> std::result::Result<String, String>;
}

/// Fills every reader turn from a template. `{title}` and `{step}` are
/// substituted.
#[derive(Debug, Clone)]
pub struct StubBackend {
    template: String,
}

impl StubBackend {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
        }
    }
}

impl Default for StubBackend {
    fn default() -> Self {
        Self::new("What about {title}?")
    }
}

impl GeneratorBackend for StubBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Stub
    }

    fn generate(&self, request: &GeneratorRequest) -> std::result::Result<String, String> {
        Ok(self
            .template
            .replace("{title}", &request.title)
            .replace("{step}", &request.step.to_string()))
    }
}

/// Answer key lookup by `(dialog id, step)`.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    answers: HashMap<(String, usize), String>,
}

impl OracleBackend {
    pub fn new(answers: HashMap<(String, usize), String>) -> Self {
        Self { answers }
    }

    /// Keys each completed dialog's reader turns by the dialog id and their
    /// 1-based position among reader turns.
    pub fn from_dialogs<'a>(dialogs: impl IntoIterator<Item = &'a Dialog>) -> Self {
        let mut answers = HashMap::new();
        for d in dialogs {
            let readers = d
                .utterances
                .iter()
                .filter(|u| u.speaker == Speaker::Reader && !u.is_masked());
            for (k, u) in readers.enumerate() {
                answers.insert((d.id.clone(), k + 1), u.text.clone());
            }
        }
        Self { answers }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl GeneratorBackend for OracleBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn generate(&self, request: &GeneratorRequest) -> std::result::Result<String, String> {
        self.answers
            .get(&(request.dialog_id.clone(), request.step))
            .cloned()
            .ok_or_else(|| {
                format!(
                    "no answer for dialog {:?} step {}",
                    request.dialog_id, request.step
                )
            })
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    input: &'a str,
    max_new_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    output: String,
}

/// HTTP generator: `POST {endpoint}/v1/generate`.
pub struct RemoteBackend {
    url: String,
    agent: ureq::Agent,
    backoff: Vec<Duration>,
}

impl RemoteBackend {
    pub const ATTEMPTS: usize = 3;

    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        Self::with_backoff(
            endpoint,
            timeout,
            vec![Duration::from_millis(500), Duration::from_secs(1)],
        )
    }

    /// `backoff[i]` is the pause after failed attempt `i + 1`; there are
    /// [`Self::ATTEMPTS`] attempts in total.
    pub fn with_backoff(endpoint: &str, timeout: Duration, backoff: Vec<Duration>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/v1/generate", endpoint.trim_end_matches('/')),
            agent,
            backoff,
        }
    }

    fn attempt(&self, request: &GeneratorRequest) -> std::result::Result<String, String> {
        let body = RemoteRequest {
            input: &request.input_text,
            max_new_tokens: request.max_new_tokens,
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        if resp.status() != 200 {
            return Err(format!("HTTP status {}", resp.status()));
        }
        resp.body_mut()
            .read_json::<RemoteResponse>()
            .map(|r| r.output)
            .map_err(|e| format!("malformed response body: {e}"))
    }
}

impl GeneratorBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn generate(&self, request: &GeneratorRequest) -> std::result::Result<String, String> {
        let mut last = String::new();
        for attempt in 0..Self::ATTEMPTS {
            match self.attempt(request) {
                Ok(out) => return Ok(out),
                Err(e) => {
                    warn!(
                        "{} step {} attempt {}: {e}",
                        request.dialog_id,
                        request.step,
                        attempt + 1
                    );
                    last = e;
                }
            }
            if attempt + 1 < Self::ATTEMPTS {
                if let Some(pause) = self.backoff.get(attempt) {
                    thread::sleep(*pause);
                }
            }
        }
        Err(format!("{} attempts failed; last error: {last}", Self::ATTEMPTS))
    }
}

#[derive(Debug, Clone)]
pub struct InpaintConfig {
    pub mask: String,
    pub prompt_template: String,
    pub max_new_tokens: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            mask: MASK.to_string(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Trimmed first line of raw generator output.
pub fn postprocess(raw: &str) -> Option<String> {
    let line = raw.trim().lines().next()?.trim();
    (!line.is_empty()).then(|| line.to_string())
}

pub fn step_request(prefix: &Dialog, config: &InpaintConfig) -> Result<GeneratorRequest> {
    let masked = prefix.masked_indices();
    if masked.len() != 1 {
        return Err(Error::InvalidMask(format!(
            "prefix of {} must contain exactly one masked turn, found {}",
            prefix.id,
            masked.len()
        )));
    }
    let step = prefix.utterances[..masked[0]]
        .iter()
        .filter(|u| u.speaker == Speaker::Reader)
        .count();
    Ok(GeneratorRequest {
        dialog_id: prefix.id.clone(),
        title: prefix.title.clone(),
        step,
        input_text: serialize(prefix, &config.mask),
        max_new_tokens: config.max_new_tokens,
    })
}

/// Generates the single masked turn of `prefix`.
pub fn inpaint_step(
    prefix: &Dialog,
    backend: &dyn GeneratorBackend,
    config: &InpaintConfig,
) -> Result<String> {
    let request = step_request(prefix, config)?;
    let fail = |message: String| Error::Generation {
        dialog_id: request.dialog_id.clone(),
        step: request.step,
        message,
    };
    let raw = backend.generate(&request).map_err(fail)?;
    let text = postprocess(&raw).ok_or_else(|| fail("backend returned an empty utterance".into()))?;
    if text.contains(&config.mask) {
        return Err(fail("generated text contains the mask literal".into()));
    }
    Ok(text)
}

/// Fills the masked reader turns of `partial` left to right. Each request
/// sees everything up to and including the sentence after the mask; later
/// turns stay hidden. Returns the completed dialog and the requests issued.
pub fn inpaint_partial(
    partial: &Dialog,
    backend: &dyn GeneratorBackend,
    config: &InpaintConfig,
) -> Result<(Dialog, Vec<GeneratorRequest>)> {
    let mut dialog = partial.clone();
    let masked = dialog.masked_indices();
    let mut requests = Vec::with_capacity(masked.len());
    for (n, &turn) in masked.iter().enumerate() {
        // the prefix runs up to the next mask (exclusive) or the end
        let end = masked.get(n + 1).map_or(dialog.len(), |&next| next - 1);
        let prefix = Dialog {
            utterances: dialog.utterances[..end].to_vec(),
            ..dialog.clone()
        };
        requests.push(step_request(&prefix, config)?);
        let text = inpaint_step(&prefix, backend, config)?;
        let u = &mut dialog.utterances[turn - 1];
        u.text = text;
        u.source = Source::Generated;
    }
    Ok((dialog, requests))
}

/// Runs inpainting over every reader turn of `p`'s partial dialog and
/// returns the requests issued, in order, alongside the completed dialog.
pub fn inpaint_document_traced(
    p: &Passage,
    backend: &dyn GeneratorBackend,
    config: &InpaintConfig,
) -> Result<(Dialog, Vec<GeneratorRequest>)> {
    let partial = build_partial_dialog(p, &config.prompt_template, &config.mask)?;
    inpaint_partial(&partial, backend, config)
}

pub fn inpaint_document(
    p: &Passage,
    backend: &dyn GeneratorBackend,
    config: &InpaintConfig,
) -> Result<Dialog> {
    inpaint_document_traced(p, backend, config).map(|(d, _)| d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub passage_id: String,
    pub step: usize,
    pub error: String,
    /// The generator backend failed, as opposed to bad input.
    #[serde(default)]
    pub backend: bool,
}

#[derive(Debug, Default)]
pub struct CorpusOutput {
    pub dialogs: Vec<Dialog>,
    pub rejects: Vec<Reject>,
}

/// Inpaints passages on `parallelism` workers. Output order follows input
/// order; failed passages become [`Reject`] records.
pub fn inpaint_corpus(
    passages: &[Passage],
    backend: &dyn GeneratorBackend,
    config: &InpaintConfig,
    parallelism: usize,
) -> Result<CorpusOutput> {
    if parallelism == 0 {
        return Err(Error::Config("parallelism must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<Dialog>> = pool.install(|| {
        passages
            .par_iter()
            .map(|p| inpaint_document(p, backend, config))
            .collect()
    });
    let mut out = CorpusOutput::default();
    for (p, r) in passages.iter().zip(results) {
        match r {
            Ok(d) => out.dialogs.push(d),
            Err(e) => {
                let step = match &e {
                    Error::Generation { step, .. } => *step,
                    _ => 0,
                };
                warn!("rejecting passage {}: {e}", p.id);
                out.rejects.push(Reject {
                    passage_id: p.id.clone(),
                    step,
                    error: e.to_string(),
                    backend: e.is_backend(),
                });
            }
        }
    }
    Ok(out)
}
