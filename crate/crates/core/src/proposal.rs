//! Per-caption bias proposals from an LLM via in-context learning.
//!
//! The prompt is a system instruction followed by demonstration exchanges
//! (caption as the user turn, JSON answer as the assistant turn) and finally
//! the target caption, sent byte-for-byte as stored in the corpus.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backends::{ChatMessage, LlmClient};
use crate::diagnostics::{Diagnostic, DiagnosticSink};
use crate::error::{Error, Result};
use crate::knowledge::{BiasProposal, Caption};
use crate::parallel::par_map;

/// Default cap on demonstrations included in a prompt.
pub const DEFAULT_MAX_DEMONSTRATIONS: usize = 3;

pub const DEFAULT_SYSTEM_PROMPT: &str = "\
Upon receiving a text prompt that will be used as input to a generative model \
(such as stable diffusion), your task is to output a list of possible biases that \
may occur during the generation.
- provide a set of specific biases.
- provide a set of multiple classes for each bias.
- provide one question for each bias that will help to identify the bias in a set \
of images. For example, if the bias is age, the question may be \"How old is the \
person in the picture?\".
- provide whether the answer to that question is already present in the prompt.
The answer must be in JSON format only.";

/// One bias entry in the LLM answer schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedBias {
    pub name: String,
    pub classes: Vec<String>,
    pub question: String,
    pub present_in_prompt: bool,
}

impl From<&BiasProposal> for ProposedBias {
    fn from(p: &BiasProposal) -> Self {
        ProposedBias {
            name: p.bias_name.clone(),
            classes: p.classes.clone(),
            question: p.question.clone(),
            present_in_prompt: p.present_in_prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub caption: String,
    pub answer: Vec<ProposedBias>,
}

impl Demonstration {
    /// The assistant turn exactly as sent to the model.
    pub fn answer_text(&self) -> String {
        serde_json::to_string(&self.answer).expect("answer serializes")
    }
}

/// Template file: `{"system": "...", "examples": [{"caption", "answer": [...]}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    #[serde(default)]
    pub examples: Vec<Demonstration>,
}

impl Default for PromptTemplate {
    /// The system instruction with the single doctor demonstration.
    fn default() -> Self {
        PromptTemplate {
            system: DEFAULT_SYSTEM_PROMPT.to_string(),
            examples: vec![Demonstration {
                caption: "A picture of a doctor".to_string(),
                answer: vec![
                    ProposedBias {
                        name: "person gender".into(),
                        classes: vec!["male".into(), "female".into()],
                        question: "What is the gender of the doctor?".into(),
                        present_in_prompt: false,
                    },
                    ProposedBias {
                        name: "person age".into(),
                        classes: vec!["young".into(), "middle-aged".into(), "old".into()],
                        question: "What is the age of the doctor?".into(),
                        present_in_prompt: false,
                    },
                ],
            }],
        }
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let template: PromptTemplate = crate::io::read_json(path)?;
        template.validate()?;
        Ok(template)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.system.trim().is_empty() {
            return Err(Error::Invalid(
                "prompt template has an empty system text".into(),
            ));
        }
        for (i, demo) in self.examples.iter().enumerate() {
            let parsed = parse_response("demo", &demo.answer_text(), true);
            if parsed.parse_error.is_some() || !parsed.dropped.is_empty() {
                return Err(Error::Invalid(format!(
                    "demonstration {i} does not satisfy the response schema"
                )));
            }
        }
        Ok(())
    }

    /// Appends up to `n` successfully parsed responses as new demonstrations.
    /// Returns how many were added.
    pub fn promote(
        &mut self,
        responses: &[RawProposalResponse],
        captions: &[Caption],
        n: usize,
    ) -> usize {
        let texts: HashMap<&str, &str> = captions
            .iter()
            .map(|c| (c.id.as_str(), c.text.as_str()))
            .collect();
        let mut added = 0;
        for response in responses {
            if added == n {
                break;
            }
            let (Some(parsed), Some(text)) =
                (&response.parsed, texts.get(response.caption_id.as_str()))
            else {
                continue;
            };
            if self.examples.iter().any(|d| d.caption == *text) {
                continue;
            }
            self.examples.push(Demonstration {
                caption: text.to_string(),
                answer: parsed.iter().map(ProposedBias::from).collect(),
            });
            added += 1;
        }
        added
    }
}

/// System turn, then `max_demonstrations` user/assistant exchanges, then the
/// caption text unchanged as the final user turn.
pub fn build_prompt(
    template: &PromptTemplate,
    caption: &Caption,
    max_demonstrations: usize,
) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(template.system.clone())];
    for demo in template.examples.iter().take(max_demonstrations) {
        messages.push(ChatMessage::user(demo.caption.clone()));
        messages.push(ChatMessage::assistant(demo.answer_text()));
    }
    messages.push(ChatMessage::user(caption.text.clone()));
    messages
}

/// Outcome of parsing one LLM answer. Exactly one of `parsed` and
/// `parse_error` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawProposalResponse {
    pub caption_id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Vec<BiasProposal>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    /// Entries dropped for schema violations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
}

/// Finds the first JSON array or object embedded in `raw`.
///
/// Markdown fences and surrounding prose are skipped. In strict mode the
/// whole trimmed text must be one JSON value.
fn extract_json(raw: &str, strict: bool) -> Option<Value> {
    if strict {
        return serde_json::from_str(raw.trim()).ok();
    }
    raw.char_indices()
        .filter(|(_, c)| *c == '[' || *c == '{')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(v @ (Value::Array(_) | Value::Object(_)))) => Some(v),
                _ => None,
            }
        })
}

fn entries_of(value: Value) -> Vec<Value> {
    match value {
        Value::Array(items) => items,
        Value::Object(mut map) => {
            if map.contains_key("name") {
                vec![Value::Object(map)]
            } else if let Some(Value::Array(items)) = map.remove("biases") {
                items
            } else {
                // {"Bias1": {...}, "Bias2": {...}}
                map.into_iter()
                    .filter_map(|(_, v)| v.is_object().then_some(v))
                    .collect()
            }
        }
        _ => Vec::new(),
    }
}

fn entry_to_proposal(caption_id: &str, entry: &Value) -> std::result::Result<BiasProposal, String> {
    let obj: &Map<String, Value> = entry.as_object().ok_or("entry is not an object")?;
    let field = |key: &str| obj.get(key).ok_or_else(|| format!("missing field {key:?}"));
    let name = field("name")?.as_str().ok_or("\"name\" is not a string")?;
    let classes: Vec<&str> = field("classes")?
        .as_array()
        .ok_or("\"classes\" is not a list")?
        .iter()
        .map(|c| c.as_str().ok_or("class label is not a string"))
        .collect::<std::result::Result<_, _>>()?;
    let question = field("question")?
        .as_str()
        .ok_or("\"question\" is not a string")?;
    let present = match field("present_in_prompt")? {
        Value::Bool(b) => *b,
        Value::String(s) if s.eq_ignore_ascii_case("true") => true,
        Value::String(s) if s.eq_ignore_ascii_case("false") => false,
        _ => return Err("\"present_in_prompt\" is not a boolean".into()),
    };
    BiasProposal::new(caption_id, name, &classes, question, present)
}

pub fn parse_response(caption_id: &str, raw_text: &str, strict: bool) -> RawProposalResponse {
    let mut response = RawProposalResponse {
        caption_id: caption_id.to_string(),
        raw_text: raw_text.to_string(),
        parsed: None,
        parse_error: None,
        dropped: Vec::new(),
    };
    let Some(value) = extract_json(raw_text, strict) else {
        response.parse_error = Some("no well-formed JSON value in response".into());
        return response;
    };
    let mut proposals = Vec::new();
    for (i, entry) in entries_of(value).iter().enumerate() {
        match entry_to_proposal(caption_id, entry) {
            Ok(p) => proposals.push(p),
            Err(e) => response.dropped.push(format!("entry {i}: {e}")),
        }
    }
    if proposals.is_empty() {
        response.parse_error = Some(if response.dropped.is_empty() {
            "response contains no bias entries".into()
        } else {
            format!("all {} entries dropped", response.dropped.len())
        });
    } else {
        response.parsed = Some(proposals);
    }
    response
}

#[derive(Debug, Clone)]
pub struct ProposalOptions {
    pub max_demonstrations: usize,
    pub strict_json: bool,
    pub parallelism: usize,
}

impl Default for ProposalOptions {
    fn default() -> Self {
        ProposalOptions {
            max_demonstrations: DEFAULT_MAX_DEMONSTRATIONS,
            strict_json: false,
            parallelism: 8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProposalRun {
    /// Proposals in corpus order.
    pub proposals: Vec<BiasProposal>,
    /// One entry per caption whose request succeeded.
    pub responses: Vec<RawProposalResponse>,
    pub diagnostics: Vec<Diagnostic>,
    /// Captions whose LLM request failed at the transport level.
    pub failed_captions: usize,
}

/// Distinct caption texts in first-seen order.
fn distinct_texts(corpus: &[Caption]) -> Vec<&str> {
    let mut seen = std::collections::HashSet::new();
    corpus
        .iter()
        .map(|c| c.text.as_str())
        .filter(|t| seen.insert(*t))
        .collect()
}

/// Requests `propose_corpus` would send that are not already cached.
pub fn planned_requests(
    corpus: &[Caption],
    llm: &LlmClient,
    template: &PromptTemplate,
    options: &ProposalOptions,
) -> usize {
    distinct_texts(corpus)
        .into_iter()
        .filter(|text| {
            let caption = Caption::new("", *text, "");
            !llm.client().is_cached(&llm.request(&build_prompt(
                template,
                &caption,
                options.max_demonstrations,
            )))
        })
        .count()
}

/// Queries the LLM once per distinct caption text and parses every answer.
pub fn propose_corpus(
    corpus: &[Caption],
    llm: &LlmClient,
    template: &PromptTemplate,
    options: &ProposalOptions,
) -> ProposalRun {
    let texts = distinct_texts(corpus);
    let replies = par_map(&texts, options.parallelism, |text| {
        let caption = Caption::new("", *text, "");
        llm.chat(&build_prompt(
            template,
            &caption,
            options.max_demonstrations,
        ))
    });
    let by_text: HashMap<&str, _> = texts.into_iter().zip(replies).collect();

    let sink = DiagnosticSink::new();
    let mut run = ProposalRun::default();
    for caption in corpus {
        match &by_text[caption.text.as_str()] {
            Ok(raw) => {
                let response = parse_response(&caption.id, raw, options.strict_json);
                for d in &response.dropped {
                    sink.push(Diagnostic::new(
                        "propose",
                        &caption.id,
                        format!("dropped {d}"),
                    ));
                }
                if let Some(e) = &response.parse_error {
                    sink.push(Diagnostic::new("propose", &caption.id, e.clone()));
                }
                if let Some(parsed) = &response.parsed {
                    run.proposals.extend(parsed.iter().cloned());
                }
                run.responses.push(response);
            }
            Err(e) => {
                run.failed_captions += 1;
                sink.push(Diagnostic::new("propose", &caption.id, e.to_string()));
            }
        }
    }
    run.diagnostics = sink.into_sorted();
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockLlm;
    use crate::backends::{Client, Role, Sampling, TransportError};
    use std::sync::Arc;

    fn caption(id: &str, text: &str) -> Caption {
        Caption::new(id, text, "test")
    }

    fn mock_llm<F>(f: F) -> LlmClient
    where
        F: Fn(&[ChatMessage]) -> std::result::Result<String, TransportError>
            + Send
            + Sync
            + 'static,
    {
        let retry = crate::backends::RetryPolicy {
            max_attempts: 2,
            backoff_base: std::time::Duration::ZERO,
        };
        LlmClient::new(
            Client::new(Role::Llm, "mock", Arc::new(MockLlm::from_fn(f))).with_retry(retry),
            Sampling::default(),
        )
    }

    #[test]
    fn prompt_shape() {
        let t = PromptTemplate::default();
        let c = caption("c1", "A person using a laptop ");
        let msgs = build_prompt(&t, &c, 3);
        assert_eq!(msgs.len(), 4);
        assert_eq!(msgs[0].role, "system");
        assert_eq!(msgs[1].role, "user");
        assert_eq!(msgs[2].role, "assistant");
        assert_eq!(msgs[3].text(), "A person using a laptop ");
        let none = PromptTemplate {
            examples: vec![],
            ..PromptTemplate::default()
        };
        assert_eq!(build_prompt(&none, &c, 3).len(), 2);
        assert_eq!(build_prompt(&t, &c, 0).len(), 2);
    }

    #[test]
    fn demonstration_round_trips() {
        let t = PromptTemplate::default();
        let demo = &t.examples[0];
        let parsed = parse_response("demo", &demo.answer_text(), true);
        let back: Vec<ProposedBias> = parsed
            .parsed
            .unwrap()
            .iter()
            .map(ProposedBias::from)
            .collect();
        assert_eq!(back, demo.answer);
        t.validate().unwrap();
    }

    #[test]
    fn parses_single_entry() {
        let raw = r#"[{"name":"person gender","classes":["male","female"],"question":"What is the gender of the doctor?","present_in_prompt":false}]"#;
        let r = parse_response("c1", raw, false);
        let parsed = r.parsed.unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].bias_name, "person gender");
        assert_eq!(parsed[0].classes, vec!["male", "female"]);
        assert_eq!(parsed[0].caption_id, "c1");
        assert!(r.parse_error.is_none());
    }

    #[test]
    fn tolerates_fences_and_prose() {
        let raw = "Sure! Here are the biases:\n```json\n{\"biases\": [{\"name\": \"Dog size\", \"classes\": [\"small\", \"large\"], \"question\": \"How big is the dog\", \"present_in_prompt\": \"false\"}]}\n```\nHope this helps [1].";
        let r = parse_response("c", raw, false);
        let p = &r.parsed.unwrap()[0];
        assert_eq!(p.bias_name, "dog size");
        assert_eq!(p.question, "How big is the dog?");
        assert!(parse_response("c", raw, true).parse_error.is_some());
    }

    #[test]
    fn accepts_named_bias_objects() {
        let raw = r#"{"Bias1": {"name":"a","classes":["x","y"],"question":"q?","present_in_prompt":true}, "Bias2": {"name":"b","classes":["x","z"],"question":"r?","present_in_prompt":false}}"#;
        assert_eq!(parse_response("c", raw, true).parsed.unwrap().len(), 2);
    }

    #[test]
    fn drops_invalid_entries() {
        let raw = r#"[{"name":"a","classes":["only"],"question":"q?","present_in_prompt":false},
                      {"name":"b","classes":["x","y"],"question":"q?","present_in_prompt":false}]"#;
        let r = parse_response("c", raw, false);
        assert_eq!(r.parsed.unwrap().len(), 1);
        assert_eq!(r.dropped.len(), 1);
        let r = parse_response(
            "c",
            r#"[{"name":"a","classes":["only"],"question":"q?","present_in_prompt":false}]"#,
            false,
        );
        assert!(r.parsed.is_none());
        assert!(r.parse_error.unwrap().contains("dropped"));
        let r = parse_response(
            "c",
            r#"[{"name":"a","classes":["x","y"],"question":"q?"}]"#,
            false,
        );
        assert!(r.dropped[0].contains("present_in_prompt"));
    }

    #[test]
    fn empty_and_malformed_text() {
        let r = parse_response("c", "", false);
        assert!(r.parse_error.is_some() && r.parsed.is_none());
        assert!(parse_response("c", "[{\"name\": ", false)
            .parse_error
            .is_some());
    }

    fn two_biases(messages: &[ChatMessage]) -> std::result::Result<String, TransportError> {
        let text = messages.last().unwrap().text();
        Ok(format!(
            r#"[{{"name":"gender","classes":["m","f"],"question":"g of {text}?","present_in_prompt":false}},
                {{"name":"age","classes":["y","o"],"question":"a?","present_in_prompt":false}}]"#
        ))
    }

    #[test]
    fn corpus_counts() {
        let llm = mock_llm(two_biases);
        let corpus = vec![
            caption("a", "one"),
            caption("b", "two"),
            caption("c", "three"),
        ];
        let run = propose_corpus(
            &corpus,
            &llm,
            &PromptTemplate::default(),
            &ProposalOptions::default(),
        );
        assert_eq!(run.proposals.len(), 6);
        assert!(run.diagnostics.is_empty());
    }

    #[test]
    fn failures_are_isolated() {
        let llm = mock_llm(|m| {
            if m.last().unwrap().text() == "bad" {
                Err(TransportError::transient("HTTP 503"))
            } else {
                two_biases(m)
            }
        });
        let corpus = vec![
            caption("a", "one"),
            caption("b", "bad"),
            caption("c", "three"),
        ];
        let run = propose_corpus(
            &corpus,
            &llm,
            &PromptTemplate::default(),
            &ProposalOptions::default(),
        );
        assert_eq!(run.proposals.len(), 4);
        assert_eq!(run.diagnostics.len(), 1);
        assert_eq!(run.diagnostics[0].subject, "b");
        assert_eq!(run.failed_captions, 1);
        assert!(run.proposals.iter().all(|p| p.caption_id != "b"));
    }

    #[test]
    fn duplicate_text_hits_backend_once() {
        let llm = mock_llm(two_biases);
        let corpus = vec![caption("a", "same text"), caption("b", "same text")];
        let template = PromptTemplate::default();
        let opts = ProposalOptions::default();
        assert_eq!(planned_requests(&corpus, &llm, &template, &opts), 1);
        let run = propose_corpus(&corpus, &llm, &template, &opts);
        assert_eq!(llm.client().network_calls(), 1);
        assert_eq!(run.proposals.len(), 4);
        assert_eq!(planned_requests(&corpus, &llm, &template, &opts), 0);
    }

    #[test]
    fn output_is_order_invariant_up_to_order() {
        let llm = mock_llm(two_biases);
        let corpus = vec![
            caption("a", "one"),
            caption("b", "two"),
            caption("c", "three"),
        ];
        let mut rev = corpus.clone();
        rev.reverse();
        let opts = ProposalOptions::default();
        let mut a = propose_corpus(&corpus, &llm, &PromptTemplate::default(), &opts).proposals;
        let mut b = propose_corpus(&rev, &llm, &PromptTemplate::default(), &opts).proposals;
        let key = |p: &BiasProposal| (p.caption_id.clone(), p.bias_name.clone());
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn promote_appends_model_outputs() {
        let llm = mock_llm(two_biases);
        let corpus = vec![caption("a", "one"), caption("b", "two")];
        let run = propose_corpus(
            &corpus,
            &llm,
            &PromptTemplate::default(),
            &ProposalOptions::default(),
        );
        let mut t = PromptTemplate::default();
        assert_eq!(t.promote(&run.responses, &corpus, 1), 1);
        assert_eq!(t.examples.len(), 2);
        assert_eq!(t.examples[1].caption, "one");
        t.validate().unwrap();
    }
}
