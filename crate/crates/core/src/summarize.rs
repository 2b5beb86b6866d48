//! Prompt catalog, summarizers and chat-model helpers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::remote::{EndpointConfig, JsonClient, RemoteError};
use crate::text::{sentence_spans, TokenCounter, WordPunctCounter};

/// Reply the QA prompt asks for when the sources do not answer the question.
pub const NO_ANSWER_SENTINEL: &str = "No information is provided in the sources.";

const HELPFUL: &str = "You are a helpful assistant.";

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("prompt {template} has no binding for {{{name}}}")]
    MissingBinding { template: &'static str, name: String },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("could not parse model reply: {0}")]
    Parse(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    Summarize,
    QfSummarize,
    Qa,
    Coherence,
    OneShotQfs,
    QueryExpand,
}

impl PromptId {
    pub const ALL: [PromptId; 6] = [
        PromptId::Summarize,
        PromptId::QfSummarize,
        PromptId::Qa,
        PromptId::Coherence,
        PromptId::OneShotQfs,
        PromptId::QueryExpand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::Summarize => "summarize",
            PromptId::QfSummarize => "qf_summarize",
            PromptId::Qa => "qa",
            PromptId::Coherence => "coherence",
            PromptId::OneShotQfs => "one_shot_qfs",
            PromptId::QueryExpand => "query_expand",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub system: String,
    pub user: String,
}

fn template_text(id: PromptId) -> (&'static str, &'static str) {
    match id {
        PromptId::Summarize => (
            HELPFUL,
            "Write a summary of the following, including as many key details as possible using at most {max_tokens} tokens:\n{context}",
        ),
        PromptId::QfSummarize => (
            HELPFUL,
            "Summarize the information in the retrieved documents using at most {max_tokens} tokens. \
Make sure to include in your summary all the details that can be used to answer the question \
and omit any details that are entirely irrelevant to the question.\n\
Retrieved documents: {context}\n\
Question: {question}\n\
Summary:",
        ),
        PromptId::Qa => (
            "You are a Question Answering Portal. Given a question with relevant information sources, \
your task is to respond to the question using ONLY information from the provided sources. \
Ensure that the facts included are directly related to answering the question. \
If the sources do not provide an answer, reply with \"No information is provided in the sources.\"",
            "Sources: {context}\nQuestion: {question}\nGenerate an answer with at most {max_tokens} tokens.\nAnswer:",
        ),
        PromptId::Coherence => (
            HELPFUL,
            "You are given a question and an answer. Your task is to evaluate whether the provided answer \
could have been generated by a human expert, focusing on the coherence of the response. \
Assess how logically and smoothly the ideas are connected, how well the answer flows, \
and whether it maintains a clear and consistent structure. Provide a brief explanation of your reasoning, \
and then rate the likelihood on a scale of 1 to 5, where:\n\
1: Very unlikely to have been generated by a human expert (e.g., disjointed or lacking logical flow)\n\
2: Unlikely (e.g., partially coherent but ideas do not flow well or seem disconnected)\n\
3: Possibly (e.g., somewhat coherent but with noticeable breaks in flow or structure)\n\
4: Likely (e.g., mostly coherent with minor disruptions in flow or structure)\n\
5: Very likely to have been generated by a human expert (e.g., highly coherent, logically structured, and well-organized).\n\
The final line of your output must be an integer between 1 and 5.\n\
Question: {question}\n\
Answer: {answer}",
        ),
        PromptId::OneShotQfs => (
            HELPFUL,
            "Instruction: You will be given a query and a set of documents. Your task is to generate an informative, \
fluent, and accurate query-focused summary. To do so, you should obtain a query-focused summary step by step.\n\
Step 1: Query-Relevant Information Identification\n\
In this step, you will be given a query and a set of documents. Your task is to find and identify \
query-relevant information from each document. This relevant information can be at any level, \
such as phrases, sentences, or paragraphs.\n\
Step 2: Controllable Summarization\n\
In this step, you should take the query and query-relevant information obtained from Step 1 as inputs. \
Your task is to summarize this information. The summary should be concise, include only non-redundant, \
query-relevant evidence. The output summary must consist of at most {max_tokens} tokens.\n\
Query: {question}\n\
Documents: {context}",
        ),
        PromptId::QueryExpand => (
            HELPFUL,
            "Write a list of keywords for the given question based on the following context. \
Use at most {max_tokens} tokens:\nSources: {context}\nQuestion: {question}\nKeywords:",
        ),
    }
}

pub fn template(id: PromptId) -> PromptTemplate {
    let (system, user) = template_text(id);
    PromptTemplate { id, system: system.to_string(), user: user.to_string() }
}

/// All templates, in [`PromptId::ALL`] order.
pub fn catalog() -> Vec<PromptTemplate> {
    PromptId::ALL.iter().map(|&id| template(id)).collect()
}

const PLACEHOLDERS: [&str; 5] = ["context", "question", "max_tokens", "answer", "questions"];

fn substitute(id: PromptId, text: &str, bindings: &BTreeMap<&str, String>) -> Result<String, SummarizeError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name = after.find('}').map(|close| &after[..close]).filter(|n| PLACEHOLDERS.contains(n));
        match name {
            Some(name) => {
                let value = bindings
                    .get(name)
                    .ok_or_else(|| SummarizeError::MissingBinding { template: id.as_str(), name: name.to_string() })?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Substitutes bindings into a template in one pass; bound values are never
/// rescanned for placeholders. Returns `(system, user)`.
pub fn render_prompt(id: PromptId, bindings: &BTreeMap<&str, String>) -> Result<(String, String), SummarizeError> {
    let (system, user) = template_text(id);
    Ok((substitute(id, system, bindings)?, substitute(id, user, bindings)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRequest {
    pub context: String,
    pub question: Option<String>,
    pub max_tokens: usize,
}

impl SummaryRequest {
    pub fn new(context: impl Into<String>, max_tokens: usize) -> Self {
        Self { context: context.into(), question: None, max_tokens }
    }

    pub fn with_question(mut self, question: impl Into<String>) -> Self {
        self.question = Some(question.into());
        self
    }

    fn bindings(&self) -> BTreeMap<&'static str, String> {
        let mut b = BTreeMap::new();
        b.insert("context", self.context.clone());
        b.insert("max_tokens", self.max_tokens.to_string());
        if let Some(q) = &self.question {
            b.insert("question", q.clone());
        }
        b
    }
}

/// Text-to-text model used for tree summaries, query-focused summaries and keywords.
pub trait Summarizer: Send + Sync {
    fn name(&self) -> String;

    /// Runs `prompt` over the request. Output holds at most `req.max_tokens` tokens.
    fn complete(&self, prompt: PromptId, req: &SummaryRequest) -> Result<String, SummarizeError>;

    /// Generic summary, or query-focused when the request carries a question.
    fn summarize(&self, req: &SummaryRequest) -> Result<String, SummarizeError> {
        let prompt = if req.question.is_some() { PromptId::QfSummarize } else { PromptId::Summarize };
        self.complete(prompt, req)
    }
}

impl<S: Summarizer + ?Sized> Summarizer for &S {
    fn name(&self) -> String {
        (**self).name()
    }

    fn complete(&self, prompt: PromptId, req: &SummaryRequest) -> Result<String, SummarizeError> {
        (**self).complete(prompt, req)
    }
}

/// Wraps a summarizer and counts completed calls.
pub struct CountingSummarizer<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S: Summarizer> CountingSummarizer<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<S: Summarizer> Summarizer for CountingSummarizer<S> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn complete(&self, prompt: PromptId, req: &SummaryRequest) -> Result<String, SummarizeError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, req)
    }
}

fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 4)
        .map(|w| w.to_lowercase())
        .collect()
}

fn first_sentence(paragraph: &str) -> Option<std::ops::Range<usize>> {
    sentence_spans(paragraph).into_iter().next()
}

/// Deterministic extractive summary.
///
/// Without a question: the first sentence of every paragraph, in order.
/// With a question: paragraph leads plus every sentence sharing a word of
/// four or more characters with the question, ordered by the number of
/// shared words (descending) and then by position. Sentences are appended
/// until the next one would exceed the budget; a first sentence that alone
/// exceeds it is truncated.
pub fn mock_summarize(req: &SummaryRequest, counter: &dyn TokenCounter) -> String {
    let mut candidates: Vec<(usize, usize, &str)> = Vec::new();
    let q_words = req.question.as_deref().map(content_words);
    let mut offset = 0;
    for paragraph in req.context.split("\n\n") {
        let base = offset;
        offset += paragraph.len() + 2;
        let lead = first_sentence(paragraph);
        match &q_words {
            None => {
                if let Some(r) = lead {
                    candidates.push((0, base + r.start, &paragraph[r]));
                }
            }
            Some(q) => {
                for r in sentence_spans(paragraph) {
                    let s = &paragraph[r.clone()];
                    let shared = content_words(s).intersection(q).count();
                    if shared > 0 || Some(&r) == lead.as_ref() {
                        candidates.push((shared, base + r.start, s));
                    }
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = String::new();
    let mut used = 0;
    for (_, _, s) in candidates {
        let s = s.trim();
        let n = counter.count(s);
        if used + n > req.max_tokens {
            if out.is_empty() {
                out.push_str(counter.truncate(s, req.max_tokens));
            }
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(s);
        used += n;
    }
    out
}

/// The most frequent words of four or more characters in `context` that do
/// not already occur in the question, space separated, within the budget.
pub fn mock_keywords(context: &str, question: &str, max_tokens: usize) -> String {
    let skip = content_words(question);
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for w in context.split(|c: char| !c.is_alphanumeric()).filter(|w| w.chars().count() >= 4) {
        let w = w.to_lowercase();
        if !skip.contains(&w) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(8.min(max_tokens)).map(|(w, _)| w).collect::<Vec<_>>().join(" ")
}

/// Offline summarizer built on [`mock_summarize`] and [`mock_keywords`].
#[derive(Debug, Default)]
pub struct MockSummarizer {
    calls: AtomicUsize,
}

impl MockSummarizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Summarizer for MockSummarizer {
    fn name(&self) -> String {
        "mock-extractive".to_string()
    }

    fn complete(&self, prompt: PromptId, req: &SummaryRequest) -> Result<String, SummarizeError> {
        if req.max_tokens == 0 {
            return Err(SummarizeError::Invalid("max_tokens must be at least 1".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        match prompt {
            PromptId::Summarize | PromptId::QfSummarize | PromptId::OneShotQfs => {
                Ok(mock_summarize(req, &WordPunctCounter))
            }
            PromptId::QueryExpand => {
                Ok(mock_keywords(&req.context, req.question.as_deref().unwrap_or(""), req.max_tokens))
            }
            PromptId::Qa | PromptId::Coherence => {
                Err(SummarizeError::Invalid(format!("{} is not a summarization prompt", prompt.as_str())))
            }
        }
    }
}

/// A chat model taking one system and one user message.
pub trait ChatModel: Send + Sync {
    fn name(&self) -> String;
    fn chat(&self, system: &str, user: &str) -> Result<String, SummarizeError>;
}

/// Client for an OpenAI-compatible `POST /v1/chat/completions` endpoint.
pub struct RemoteChat {
    client: JsonClient,
}

impl RemoteChat {
    pub fn new(cfg: EndpointConfig) -> Result<Self, SummarizeError> {
        Ok(Self { client: JsonClient::new(cfg)? })
    }
}

impl ChatModel for RemoteChat {
    fn name(&self) -> String {
        format!("remote:{}", self.client.config().model)
    }

    fn chat(&self, system: &str, user: &str) -> Result<String, SummarizeError> {
        let body = json!({
            "model": self.client.config().model,
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": user },
            ],
        });
        let resp = self.client.post_json("/v1/chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| RemoteError::Malformed("missing choices[0].message.content".into()).into())
    }
}

/// Summarizer that renders the prompt catalog and sends it to a chat model,
/// truncating over-long replies at a token boundary.
pub struct LlmSummarizer<C> {
    chat: C,
    counter: Box<dyn TokenCounter>,
}

impl<C: ChatModel> LlmSummarizer<C> {
    pub fn new(chat: C) -> Self {
        Self { chat, counter: Box::new(WordPunctCounter) }
    }

    pub fn with_counter(mut self, counter: Box<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn chat_model(&self) -> &C {
        &self.chat
    }
}

impl<C: ChatModel> Summarizer for LlmSummarizer<C> {
    fn name(&self) -> String {
        self.chat.name()
    }

    fn complete(&self, prompt: PromptId, req: &SummaryRequest) -> Result<String, SummarizeError> {
        if req.max_tokens == 0 {
            return Err(SummarizeError::Invalid("max_tokens must be at least 1".into()));
        }
        let (system, user) = render_prompt(prompt, &req.bindings())?;
        let reply = self.chat.chat(&system, &user)?;
        Ok(self.counter.truncate(reply.trim(), req.max_tokens).to_string())
    }
}

/// Offline chat model answering QA and coherence prompts from their text.
///
/// QA: the source sentence sharing the most words with the question, or the
/// no-answer sentinel when none shares any. Coherence: a one-line rationale
/// followed by a rating equal to the number of answer sentences, capped at 5.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockChat;

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let from = text.find(start).map_or(0, |i| i + start.len());
    let to = text[from..].rfind(end).map_or(text.len(), |i| from + i);
    &text[from..to]
}

impl ChatModel for MockChat {
    fn name(&self) -> String {
        "mock-chat".to_string()
    }

    fn chat(&self, system: &str, user: &str) -> Result<String, SummarizeError> {
        if system.contains("Question Answering Portal") {
            let sources = between(user, "Sources: ", "\nQuestion: ");
            let question = between(user, "\nQuestion: ", "\nGenerate an answer");
            let q = content_words(question);
            let best = sentence_spans(sources)
                .into_iter()
                .map(|r| &sources[r])
                .map(|s| (content_words(s).intersection(&q).count(), s))
                .filter(|(n, _)| *n > 0)
                .fold(None::<(usize, &str)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            return Ok(best.map_or_else(|| NO_ANSWER_SENTINEL.to_string(), |(_, s)| s.trim().to_string()));
        }
        if user.contains("The final line of your output must be an integer between 1 and 5.") {
            let answer = user.rsplit("\nAnswer: ").next().unwrap_or("");
            let rating = sentence_spans(answer).len().clamp(1, 5);
            return Ok(format!("The answer has {rating} sentence(s).\n{rating}"));
        }
        Err(SummarizeError::Invalid("mock chat only handles QA and coherence prompts".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub text: String,
    pub answered: bool,
}

/// True unless the trimmed answer is exactly the no-answer sentinel.
pub fn is_answered(answer: &str) -> bool {
    answer.trim() != NO_ANSWER_SENTINEL
}

pub fn qa_answer(chat: &dyn ChatModel, context: &str, question: &str, max_tokens: usize) -> Result<QaAnswer, SummarizeError> {
    if question.trim().is_empty() {
        return Err(SummarizeError::Invalid("question must not be empty".into()));
    }
    let mut b = BTreeMap::new();
    b.insert("context", context.to_string());
    b.insert("question", question.to_string());
    b.insert("max_tokens", max_tokens.to_string());
    let (system, user) = render_prompt(PromptId::Qa, &b)?;
    let reply = chat.chat(&system, &user)?;
    let text = WordPunctCounter.truncate(reply.trim(), max_tokens).to_string();
    let answered = is_answered(&reply);
    Ok(QaAnswer { text, answered })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRating {
    pub rating: u8,
    /// `rating / 5`.
    pub score: f64,
    pub reply: String,
}

/// Parses a judge reply whose last non-empty line must be an integer in 1..=5.
pub fn parse_coherence_reply(reply: &str) -> Result<CoherenceRating, SummarizeError> {
    let last = reply.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let rating: u8 = last
        .parse()
        .ok()
        .filter(|r| (1..=5).contains(r))
        .ok_or_else(|| SummarizeError::Parse(format!("final line {last:?} is not an integer between 1 and 5")))?;
    Ok(CoherenceRating { rating, score: rating as f64 / 5.0, reply: reply.to_string() })
}

pub fn coherence_rating(chat: &dyn ChatModel, question: &str, answer: &str) -> Result<CoherenceRating, SummarizeError> {
    let mut b = BTreeMap::new();
    b.insert("question", question.to_string());
    b.insert("answer", answer.to_string());
    let (system, user) = render_prompt(PromptId::Coherence, &b)?;
    parse_coherence_reply(&chat.chat(&system, &user)?)
}
