//! Shell companions that execute actions for a host companion.
//!
//! Covers scope extraction over the user's document, the summary trigger,
//! map-reduce summarisation and the built-in deputy reply functions.

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use chrono::NaiveDateTime;
use futures::stream::{self, StreamExt, TryStreamExt};
use rand::Rng;

use crate::backend::{AdminData, Backend, BackendError, Job};
use crate::companion::{CompanionRuntime, Handled, ReplyEnv, ReplyError, ReplyFunction};
use crate::config::{ActionDescription, DeputyScope, ModelConfig};
use crate::context::{Context, SummaryInfo};
use crate::prompter::{Decorator, PromptData, PromptInput};
use crate::EngineRng;

/// Temperature for deputy jobs when the config sets none.
pub const DEPUTY_TEMPERATURE: f64 = 0.1;
pub const MAX_SUMMARY_PASSES: usize = 3;
pub const DEFAULT_INSUFFICIENT_INPUT: &str =
    "I need some text to work with. Please write or select a passage and send it to me.";

/// Where a deputy's work ends up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeputyOutput {
    /// Only sets the job; the host runs the inference.
    Host,
    /// Runs its own inference into `answer`.
    Answer,
    /// As `Answer`, also posted to the chat as an excerpt.
    Excerpt,
    /// As `Answer`, also posted to the chat as a quote.
    Quote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeputyState {
    pub scope: DeputyScope,
    pub output: DeputyOutput,
    pub host_action: Option<ActionDescription>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ScopeError {
    #[error("the selected scope needs some text, but the document is blank")]
    InsufficientInput,
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or the end of text.
/// A trailing fragment without terminator counts as a sentence.
pub fn sentences(doc: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in doc.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let boundary = doc[end..].chars().next().is_none_or(char::is_whitespace);
            if boundary {
                let s = doc[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let rest = doc[start..].trim();
    if !rest.is_empty() {
        out.push(rest);
    }
    out
}

/// Blocks separated by one or more blank lines, trimmed.
pub fn paragraphs(doc: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut block_start: Option<usize> = None;
    let mut offset = 0;
    for line in doc.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = block_start.take() {
                out.push(doc[s..offset].trim());
            }
        } else if block_start.is_none() {
            block_start = Some(offset);
        }
        offset += line.len();
    }
    if let Some(s) = block_start {
        out.push(doc[s..].trim());
    }
    out
}

pub fn scope_accepts(scope: DeputyScope, doc: &str) -> bool {
    !(scope == DeputyScope::Some && doc.trim().is_empty())
}

pub fn select_scope(
    doc: &str,
    scope: DeputyScope,
    rng: &mut EngineRng,
) -> Result<String, ScopeError> {
    Ok(match scope {
        DeputyScope::FullDocument => doc.to_string(),
        DeputyScope::Some => {
            if doc.trim().is_empty() {
                return Err(ScopeError::InsufficientInput);
            }
            doc.to_string()
        }
        DeputyScope::LastSentence => sentences(doc).last().copied().unwrap_or("").to_string(),
        DeputyScope::LastParagraph => paragraphs(doc).last().copied().unwrap_or("").to_string(),
        DeputyScope::RandomParagraph => {
            let ps = paragraphs(doc);
            if ps.is_empty() {
                String::new()
            } else {
                ps[rng.random_range(0..ps.len())].to_string()
            }
        }
    })
}

pub trait TokenEstimator: Send + Sync + fmt::Debug {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / chars_per_token)`.
#[derive(Debug, Clone, Copy)]
pub struct CharRatioEstimator {
    pub chars_per_token: usize,
}

impl Default for CharRatioEstimator {
    fn default() -> Self {
        Self { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token.max(1))
    }
}

/// The context fields that end up in a companion prompt.
fn prompt_preview(ctx: &Context) -> String {
    [
        &ctx.persona,
        &ctx.knowledge,
        &ctx.text,
        &ctx.paragraph,
        &ctx.input,
        &ctx.answer,
        &ctx.job,
        &ctx.epilogue,
    ]
    .iter()
    .filter(|s| !s.is_empty())
    .map(|s| s.as_str())
    .collect::<Vec<_>>()
    .join("\n")
}

pub fn needs_summary(ctx: &Context, model: &ModelConfig) -> bool {
    needs_summary_with(ctx, model, &CharRatioEstimator::default())
}

pub fn needs_summary_with(
    ctx: &Context,
    model: &ModelConfig,
    estimator: &dyn TokenEstimator,
) -> bool {
    estimator.estimate(&prompt_preview(ctx)) > model.prompt_token_budget()
}

/// Identifies the jobs a summariser issues.
#[derive(Debug, Clone)]
pub struct JobMeta {
    pub chat_id: String,
    pub speaker: String,
    pub now: NaiveDateTime,
}

impl JobMeta {
    fn admin(&self, job_id: String) -> AdminData {
        AdminData {
            job_id,
            chat_id: self.chat_id.clone(),
            speaker_name: self.speaker.clone(),
            created_at: self.now,
            attempt: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SummaryError {
    #[error("summarisation failed: {0}")]
    Backend(#[from] BackendError),
    #[error("model budget of {0} prompt tokens cannot hold a summary request")]
    BudgetTooSmall(usize),
}

#[async_trait]
pub trait Summariser: Send + Sync + fmt::Debug {
    /// Shrink the context until it fits `model`. Leaves the context untouched on error.
    async fn summarize(
        &self,
        ctx: &mut Context,
        backend: &dyn Backend,
        model: &ModelConfig,
        meta: &JobMeta,
    ) -> Result<(), SummaryError>;
}

/// Splits text at paragraph boundaries into chunks that each fit the model,
/// summarises the chunks (concurrently, order preserved) and joins the
/// results. Repeats until everything fits or the pass limit is hit; then the
/// tail is cut off.
#[derive(Debug, Clone)]
pub struct MapReduceSummariser {
    pub estimator: Arc<dyn TokenEstimator>,
    pub max_passes: usize,
    pub concurrency: usize,
    pub decorator: Decorator,
}

impl Default for MapReduceSummariser {
    fn default() -> Self {
        Self {
            estimator: Arc::new(CharRatioEstimator::default()),
            max_passes: MAX_SUMMARY_PASSES,
            concurrency: 4,
            decorator: Decorator::quoted("USER TEXT"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Text,
    Paragraph,
}

fn field_mut(ctx: &mut Context, f: Field) -> &mut String {
    match f {
        Field::Text => &mut ctx.text,
        Field::Paragraph => &mut ctx.paragraph,
    }
}

impl MapReduceSummariser {
    fn chunk_prompt(
        &self,
        chunk: &str,
        part: usize,
        total: usize,
        model: &ModelConfig,
    ) -> PromptData {
        let mut system =
            String::from("You condense text faithfully, keeping names, events and tone.\n");
        system.push_str(&self.decorator.decorate(chunk).unwrap_or_default());
        system.push_str(&format!(
            "\nSummarise the {} (part {part} of {total}) in a few sentences.",
            self.decorator.tag()
        ));
        PromptData {
            system_prompt: system,
            turns: Vec::new(),
            format: model.prompt_format,
        }
    }

    fn fits(&self, text: &str, limit: usize) -> bool {
        self.estimator.estimate(text) <= limit
    }

    /// Longest char prefix of `text` within `limit` tokens.
    fn fitting_prefix<'t>(&self, text: &'t str, limit: usize) -> &'t str {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain([text.len()])
            .collect();
        let (mut lo, mut hi) = (0usize, bounds.len() - 1);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.fits(&text[..bounds[mid]], limit) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        &text[..bounds[lo]]
    }

    fn split_chunks(&self, text: &str, limit: usize) -> Vec<String> {
        let mut pieces: Vec<String> = Vec::new();
        for p in paragraphs(text) {
            if self.fits(p, limit) {
                pieces.push(p.to_string());
                continue;
            }
            for s in sentences(p) {
                let mut rest = s;
                while !self.fits(rest, limit) {
                    let head = self.fitting_prefix(rest, limit);
                    let head = if head.is_empty() {
                        // a single char over the limit; take it anyway
                        &rest[..rest.chars().next().map_or(rest.len(), char::len_utf8)]
                    } else {
                        head
                    };
                    pieces.push(head.to_string());
                    rest = &rest[head.len()..];
                }
                if !rest.is_empty() {
                    pieces.push(rest.to_string());
                }
            }
        }
        let mut chunks: Vec<String> = Vec::new();
        for piece in pieces {
            if let Some(last) = chunks.last_mut() {
                let joined = format!("{last}\n\n{piece}");
                if self.fits(&joined, limit) {
                    *last = joined;
                    continue;
                }
            }
            chunks.push(piece);
        }
        chunks
    }

    async fn pass(
        &self,
        text: &str,
        backend: &dyn Backend,
        model: &ModelConfig,
        meta: &JobMeta,
        pass: usize,
    ) -> Result<String, SummaryError> {
        let available = model.prompt_token_budget();
        let overhead = self
            .estimator
            .estimate(&crate::prompter::apply_chat_template(
                &self.chunk_prompt("x", 99, 99, model),
            ));
        let limit = available.saturating_sub(overhead);
        if limit == 0 {
            return Err(SummaryError::BudgetTooSmall(available));
        }
        let chunks = self.split_chunks(text, limit);
        let total = chunks.len();
        let mut job_model = model.clone();
        job_model.temperature = DEPUTY_TEMPERATURE;
        let jobs = chunks
            .iter()
            .enumerate()
            .map(|(i, chunk)| {
                let prompt = self.chunk_prompt(chunk, i + 1, total, model);
                let admin = meta.admin(format!(
                    "{}-{}-summary-{pass}-{}",
                    meta.chat_id,
                    meta.speaker,
                    i + 1
                ));
                Job::new(Context::default(), job_model.clone(), prompt, admin)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let summaries: Vec<String> = stream::iter(
            jobs.into_iter()
                .map(|job| async move { backend.complete(&job).await }),
        )
        .buffered(self.concurrency.max(1))
        .map_ok(|r| r.text.trim().to_string())
        .try_collect()
        .await?;
        Ok(summaries.join(" "))
    }
}

#[async_trait]
impl Summariser for MapReduceSummariser {
    async fn summarize(
        &self,
        ctx: &mut Context,
        backend: &dyn Backend,
        model: &ModelConfig,
        meta: &JobMeta,
    ) -> Result<(), SummaryError> {
        let est = self.estimator.as_ref();
        if !needs_summary_with(ctx, model, est) {
            return Ok(());
        }
        let original_chars = ctx.text.chars().count() + ctx.paragraph.chars().count();
        let mut work = ctx.clone();
        let mut passes = 0;
        while passes < self.max_passes && needs_summary_with(&work, model, est) {
            let field = if work.text.len() >= work.paragraph.len() {
                Field::Text
            } else {
                Field::Paragraph
            };
            let source = field_mut(&mut work, field).clone();
            let summary = self.pass(&source, backend, model, meta, passes + 1).await?;
            *field_mut(&mut work, field) = summary;
            passes += 1;
        }
        let mut truncated = false;
        while needs_summary_with(&work, model, est) {
            let field = if work.text.len() >= work.paragraph.len() {
                Field::Text
            } else {
                Field::Paragraph
            };
            let current = field_mut(&mut work, field).clone();
            if current.is_empty() {
                break;
            }
            field_mut(&mut work, field).clear();
            let rest = model
                .prompt_token_budget()
                .saturating_sub(est.estimate(&prompt_preview(&work)) + 1);
            *field_mut(&mut work, field) = self.fitting_prefix(&current, rest).to_string();
            truncated = true;
        }
        if truncated {
            work.note_error(format!(
                "context still exceeded the model budget after {passes} summary passes; the tail was cut off"
            ));
        }
        work.summary = Some(SummaryInfo {
            original_chars,
            passes,
            truncated,
        });
        *ctx = work;
        Ok(())
    }
}

/// Summarise with the default map-reduce strategy; failures land in `ctx.error`.
pub async fn summarize_context(
    ctx: &mut Context,
    backend: &dyn Backend,
    model: &ModelConfig,
    meta: &JobMeta,
) {
    if let Err(e) = MapReduceSummariser::default()
        .summarize(ctx, backend, model, meta)
        .await
    {
        ctx.note_error(e.to_string());
    }
}

/// Asks the user for more data when the deputy's scope cannot be satisfied.
#[derive(Debug)]
pub struct InputGate;

#[async_trait]
impl ReplyFunction for InputGate {
    fn name(&self) -> &str {
        "input-gate"
    }

    async fn call(
        &self,
        _runtime: &CompanionRuntime,
        ctx: &mut Context,
        env: &mut ReplyEnv<'_>,
    ) -> Result<Handled, ReplyError> {
        ctx.question = env.services.insufficient_input_message.clone();
        Ok(Handled::Done)
    }
}

/// Shrinks oversized context before anyone acts on it; never handles the turn.
#[derive(Debug)]
pub struct SummariseContext;

#[async_trait]
impl ReplyFunction for SummariseContext {
    fn name(&self) -> &str {
        "summarise"
    }

    async fn call(
        &self,
        runtime: &CompanionRuntime,
        ctx: &mut Context,
        env: &mut ReplyEnv<'_>,
    ) -> Result<Handled, ReplyError> {
        let meta = env.job_meta(runtime.name());
        env.services
            .summariser
            .summarize(ctx, env.backend, runtime.model(), &meta)
            .await
            .map_err(ReplyError::Summary)?;
        Ok(Handled::Continue)
    }
}

/// The catch-all of every built-in deputy: apply the configured job to the
/// scoped text, optionally running the inference itself.
#[derive(Debug)]
pub struct InstructionReply;

#[async_trait]
impl ReplyFunction for InstructionReply {
    fn name(&self) -> &str {
        "instruction"
    }

    async fn call(
        &self,
        runtime: &CompanionRuntime,
        ctx: &mut Context,
        env: &mut ReplyEnv<'_>,
    ) -> Result<Handled, ReplyError> {
        instruction_deputy_reply(runtime, ctx, env).await?;
        Ok(Handled::Done)
    }
}

pub async fn instruction_deputy_reply(
    runtime: &CompanionRuntime,
    ctx: &mut Context,
    env: &mut ReplyEnv<'_>,
) -> Result<(), ReplyError> {
    let state = runtime
        .deputy()
        .ok_or_else(|| ReplyError::Misconfigured(format!("{} is not a deputy", runtime.name())))?;
    let job = runtime.config().job.clone().unwrap_or_default();
    let scoped = match select_scope(ctx.document(), state.scope, env.rng) {
        Ok(s) => s,
        Err(ScopeError::InsufficientInput) => {
            ctx.question = env.services.insufficient_input_message.clone();
            return Ok(());
        }
    };
    ctx.paragraph = scoped;
    ctx.job = job;
    if state.output == DeputyOutput::Host {
        return Ok(());
    }

    let prompt = env.prompter.assemble(&PromptInput {
        context: ctx,
        world: env.world,
        companion: runtime,
        history: &[],
        situation_id: &env.chat.situation_id,
        now: env.now,
        motto_roll: env.rng.random(),
    });
    let job = Job::new(
        ctx.clone(),
        runtime.model().clone(),
        prompt,
        env.admin(runtime.name()),
    )?;
    let result = env.backend.complete(&job).await?;
    let answer = result.text.trim().to_string();
    match state.output {
        DeputyOutput::Excerpt => ctx.excerpt = answer.clone(),
        DeputyOutput::Quote => ctx.quote = answer.clone(),
        DeputyOutput::Answer | DeputyOutput::Host => {}
    }
    ctx.answer = answer;
    ctx.job = format!(
        "Share the {} with the user in your own words.",
        env.prompter.decorators.answer.tag()
    );
    Ok(())
}
