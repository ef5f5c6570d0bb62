//! Two-stage removal of caption/question pairs whose caption already states
//! the class: an LLM yes/no check, then a lexical match of class labels and
//! their synonyms against the caption words.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{ChatMessage, LlmClient};
use crate::diagnostics::{Diagnostic, DiagnosticSink};
use crate::error::Result;
use crate::knowledge::KnowledgeBase;
use crate::parallel::par_map;
use crate::text::{contains_phrase, normalize_label, tokenize};

pub const STAGE1_SYSTEM_PROMPT: &str = "You check whether a caption already determines the answer \
to a question about the image it describes. Reply with yes or no only.";

const STAGE1_CAPTION: &str = "Caption: ";
const STAGE1_QUESTION: &str = "\nQuestion: ";
const STAGE1_ASK: &str = "\nIs the answer to the question explicitly present in the caption?";

pub fn stage1_prompt(caption: &str, question: &str) -> String {
    format!("{STAGE1_CAPTION}{caption}{STAGE1_QUESTION}{question}{STAGE1_ASK}")
}

/// Inverse of [`stage1_prompt`].
pub fn parse_stage1_prompt(prompt: &str) -> Option<(String, String)> {
    let rest = prompt
        .strip_prefix(STAGE1_CAPTION)?
        .strip_suffix(STAGE1_ASK)?;
    let (caption, question) = rest.rsplit_once(STAGE1_QUESTION)?;
    Some((caption.to_string(), question.to_string()))
}

/// Reads a yes/no verdict: the first word if it is yes or no, otherwise the
/// only one of the two that occurs.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let tokens = tokenize(reply);
    match tokens.first().map(String::as_str) {
        Some("yes") => return Some(true),
        Some("no") => return Some(false),
        _ => {}
    }
    let yes = tokens.iter().any(|t| t == "yes");
    let no = tokens.iter().any(|t| t == "no");
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    Stage1,
    Stage2,
    PresentInPrompt,
}

/// One line of the filter report.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RemovedPair {
    pub bias: String,
    pub caption_id: String,
    pub question: String,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kb: KnowledgeBase,
    pub removed: Vec<RemovedPair>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Stage-1 LLM calls that `filter_stage1` would send and are not cached.
pub fn stage1_planned_requests(
    kb: &KnowledgeBase,
    captions: &HashMap<String, String>,
    llm: &LlmClient,
) -> usize {
    stage1_jobs(kb, captions)
        .into_iter()
        .filter(|(caption, question)| {
            !llm.client()
                .is_cached(&llm.request(&stage1_messages(caption, question)))
        })
        .count()
}

fn stage1_messages(caption: &str, question: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(STAGE1_SYSTEM_PROMPT),
        ChatMessage::user(stage1_prompt(caption, question)),
    ]
}

fn stage1_jobs(kb: &KnowledgeBase, captions: &HashMap<String, String>) -> Vec<(String, String)> {
    let jobs: BTreeSet<(String, String)> = kb
        .records
        .values()
        .flat_map(|r| r.pairs.iter())
        .filter(|p| !p.present_in_prompt)
        .filter_map(|p| Some((captions.get(&p.caption_id)?.clone(), p.question.clone())))
        .collect();
    jobs.into_iter().collect()
}

/// Removes pairs whose answer the LLM says the caption already states.
///
/// Pairs proposed with `present_in_prompt` are removed without a call. A
/// pair whose check fails (transport error or unreadable reply) is kept and
/// marked unverified.
pub fn filter_stage1(
    kb: KnowledgeBase,
    captions: &HashMap<String, String>,
    llm: &LlmClient,
    parallelism: usize,
) -> FilterOutcome {
    let jobs = stage1_jobs(&kb, captions);
    let verdicts = par_map(&jobs, parallelism, |(caption, question)| {
        llm.chat(&stage1_messages(caption, question))
            .map_err(|e| e.to_string())
            .and_then(|reply| {
                parse_yes_no(&reply).ok_or_else(|| format!("unreadable verdict {reply:?}"))
            })
    });
    let verdicts: HashMap<(String, String), std::result::Result<bool, String>> =
        jobs.into_iter().zip(verdicts).collect();

    let sink = DiagnosticSink::new();
    let mut removed = Vec::new();
    let mut kb = kb;
    for record in kb.records.values_mut() {
        let bias = record.name.clone();
        record.pairs.retain_mut(|pair| {
            let mut drop = |reason| {
                removed.push(RemovedPair {
                    bias: bias.clone(),
                    caption_id: pair.caption_id.clone(),
                    question: pair.question.clone(),
                    reason,
                });
                false
            };
            if pair.present_in_prompt {
                return drop(RemovalReason::PresentInPrompt);
            }
            let Some(text) = captions.get(&pair.caption_id) else {
                sink.push(Diagnostic::new(
                    "filter-stage1",
                    &pair.caption_id,
                    "caption text not in corpus",
                ));
                pair.unverified = true;
                return true;
            };
            match &verdicts[&(text.clone(), pair.question.clone())] {
                Ok(true) => drop(RemovalReason::Stage1),
                Ok(false) => true,
                Err(e) => {
                    sink.push(Diagnostic::new(
                        "filter-stage1",
                        format!("{bias}/{}", pair.caption_id),
                        e.clone(),
                    ));
                    pair.unverified = true;
                    true
                }
            }
        });
    }
    removed.sort();
    FilterOutcome {
        kb,
        removed,
        diagnostics: sink.into_sorted(),
    }
}

/// Source of synonyms for class labels.
pub trait SynonymProvider: Send + Sync {
    fn source(&self) -> &str;
    fn synonyms(&self, term: &str) -> std::result::Result<Vec<String>, String>;
}

/// Bundled table: JSON object mapping label to a list of synonyms.
#[derive(Debug, Clone, Default)]
pub struct StaticSynonyms {
    table: HashMap<String, Vec<String>>,
}

impl StaticSynonyms {
    pub fn new(table: HashMap<String, Vec<String>>) -> Self {
        StaticSynonyms {
            table: table
                .into_iter()
                .map(|(k, v)| (normalize_label(&k), v))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(StaticSynonyms::new(crate::io::read_json(path)?))
    }
}

impl SynonymProvider for StaticSynonyms {
    fn source(&self) -> &str {
        "static"
    }

    fn synonyms(&self, term: &str) -> std::result::Result<Vec<String>, String> {
        Ok(self
            .table
            .get(&normalize_label(term))
            .cloned()
            .unwrap_or_default())
    }
}

/// No synonyms at all; every class maps to itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoSynonyms;

impl SynonymProvider for NoSynonyms {
    fn source(&self) -> &str {
        "none"
    }

    fn synonyms(&self, _term: &str) -> std::result::Result<Vec<String>, String> {
        Ok(Vec::new())
    }
}

/// Lexical-graph REST client speaking the ConceptNet query API:
/// `GET <base>/query?node=/c/en/<term>&rel=/r/Synonym`.
#[derive(Debug, Clone)]
pub struct ConceptNetClient {
    agent: ureq::Agent,
    base_url: String,
    language: String,
}

impl ConceptNetClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        ConceptNetClient {
            agent: ureq::Agent::new_with_config(config),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            language: "en".into(),
        }
    }

    fn node(&self, term: &str) -> String {
        format!(
            "/c/{}/{}",
            self.language,
            normalize_label(term).replace(' ', "_")
        )
    }
}

/// Labels of the nodes on the far side of each synonym edge of `node`.
pub(crate) fn synonyms_from_edges(body: &Value, node: &str, language: &str) -> Vec<String> {
    let mut out = BTreeSet::new();
    for edge in body
        .get("edges")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
    {
        for end in ["start", "end"] {
            let Some(n) = edge.get(end) else { continue };
            let id = n.get("@id").and_then(Value::as_str).unwrap_or_default();
            if id == node || id.starts_with(&format!("{node}/")) {
                continue;
            }
            if n.get("language").and_then(Value::as_str) != Some(language) {
                continue;
            }
            if let Some(label) = n.get("label").and_then(Value::as_str) {
                out.insert(normalize_label(label));
            }
        }
    }
    out.into_iter().filter(|s| !s.is_empty()).collect()
}

impl SynonymProvider for ConceptNetClient {
    fn source(&self) -> &str {
        "conceptnet"
    }

    fn synonyms(&self, term: &str) -> std::result::Result<Vec<String>, String> {
        let node = self.node(term);
        let url = format!("{}/query", self.base_url);
        let mut response = self
            .agent
            .get(&url)
            .query("node", &node)
            .query("rel", "/r/Synonym")
            .query("limit", "1000")
            .call()
            .map_err(|e| format!("GET {url}: {e}"))?;
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| format!("synonym response is not JSON: {e}"))?;
        Ok(synonyms_from_edges(&body, &node, &self.language))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTable {
    pub source: String,
    /// Normalized class label -> {label} ∪ synonyms, all normalized.
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl SynonymTable {
    /// Terms whose presence in a caption gives away `class`.
    pub fn terms(&self, class: &str) -> BTreeSet<String> {
        let class = normalize_label(class);
        self.entries
            .get(&class)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([class]))
    }
}

/// Maps each class to itself plus its provider synonyms. A failing lookup
/// falls back to the class alone and logs a warning.
pub fn expand_synonyms<'a, I>(classes: I, provider: &dyn SynonymProvider) -> SynonymTable
where
    I: IntoIterator<Item = &'a String>,
{
    let mut entries = BTreeMap::new();
    for class in classes {
        let class = normalize_label(class);
        let mut set = BTreeSet::from([class.clone()]);
        match provider.synonyms(&class) {
            Ok(found) => set.extend(
                found
                    .iter()
                    .map(|s| normalize_label(s))
                    .filter(|s| !s.is_empty()),
            ),
            Err(e) => log::warn!("synonym lookup for {class:?} failed, using the label alone: {e}"),
        }
        entries.insert(class, set);
    }
    SynonymTable {
        source: provider.source().to_string(),
        entries,
    }
}

/// Removes pairs whose caption contains a class label or synonym of the
/// bias as whole words (multi-word terms as contiguous words).
pub fn filter_stage2(
    kb: KnowledgeBase,
    captions: &HashMap<String, String>,
    synonyms: &SynonymTable,
) -> FilterOutcome {
    let mut kb = kb;
    let mut removed = Vec::new();
    for record in kb.records.values_mut() {
        let phrases: Vec<Vec<String>> = record
            .classes
            .iter()
            .flat_map(|c| synonyms.terms(c))
            .map(|t| tokenize(&t))
            .filter(|t| !t.is_empty())
            .collect();
        let bias = record.name.clone();
        record.pairs.retain(|pair| {
            let Some(text) = captions.get(&pair.caption_id) else {
                return true;
            };
            let words = tokenize(text);
            if phrases.iter().any(|p| contains_phrase(&words, p)) {
                removed.push(RemovedPair {
                    bias: bias.clone(),
                    caption_id: pair.caption_id.clone(),
                    question: pair.question.clone(),
                    reason: RemovalReason::Stage2,
                });
                false
            } else {
                true
            }
        });
    }
    removed.sort();
    FilterOutcome {
        kb,
        removed,
        diagnostics: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockLlm;
    use crate::backends::{Client, RetryPolicy, Role, Sampling, TransportError};
    use crate::knowledge::{aggregate, BiasProposal};
    use serde_json::json;
    use std::sync::Arc;

    fn llm<F>(f: F) -> LlmClient
    where
        F: Fn(&[ChatMessage]) -> std::result::Result<String, TransportError>
            + Send
            + Sync
            + 'static,
    {
        LlmClient::new(
            Client::new(Role::Llm, "mock", Arc::new(MockLlm::from_fn(f))).with_retry(RetryPolicy {
                max_attempts: 1,
                backoff_base: Duration::ZERO,
            }),
            Sampling::default(),
        )
    }

    fn corpus(items: &[(&str, &str)]) -> HashMap<String, String> {
        items
            .iter()
            .map(|(i, t)| (i.to_string(), t.to_string()))
            .collect()
    }

    fn kb(items: &[(&str, &str, &[&str], bool)]) -> KnowledgeBase {
        aggregate(items.iter().map(|(c, b, cls, present)| {
            BiasProposal::new(*c, b, cls, &format!("what {b}"), *present).unwrap()
        }))
    }

    /// Says "yes" when the caption mentions size words.
    fn size_judge(messages: &[ChatMessage]) -> std::result::Result<String, TransportError> {
        let (caption, _) = parse_stage1_prompt(&messages.last().unwrap().text()).unwrap();
        Ok(if caption.contains("large") {
            "Yes, it says large."
        } else {
            "No."
        }
        .into())
    }

    #[test]
    fn prompt_round_trip() {
        let p = stage1_prompt("A dog\nwith lines", "How big?");
        assert_eq!(
            parse_stage1_prompt(&p),
            Some(("A dog\nwith lines".to_string(), "How big?".to_string()))
        );
        assert!(parse_stage1_prompt("hello").is_none());
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no("no, it is not"), Some(false));
        assert_eq!(parse_yes_no("The answer is yes"), Some(true));
        assert_eq!(parse_yes_no("maybe"), None);
        assert_eq!(parse_yes_no("yes and no"), Some(true));
        assert_eq!(parse_yes_no("Well, yes and no"), None);
    }

    #[test]
    fn stage1_removes_stated_answers() {
        let captions = corpus(&[
            ("c1", "An image of a large dog"),
            ("c2", "A person using a laptop"),
        ]);
        let kb = kb(&[
            ("c1", "dog size", &["small", "large"], false),
            ("c2", "person gender", &["male", "female"], false),
        ]);
        let out = filter_stage1(kb, &captions, &llm(size_judge), 2);
        assert!(out.kb.get("dog size").unwrap().pairs.is_empty());
        assert_eq!(out.kb.get("person gender").unwrap().pairs.len(), 1);
        assert_eq!(out.removed.len(), 1);
        assert_eq!(out.removed[0].reason, RemovalReason::Stage1);
    }

    #[test]
    fn present_in_prompt_short_circuits() {
        let captions = corpus(&[("c1", "A female doctor")]);
        let kb = kb(&[("c1", "person gender", &["male", "female"], true)]);
        let judge = llm(|_| Ok("no".into()));
        let out = filter_stage1(kb, &captions, &judge, 1);
        assert_eq!(judge.client().network_calls(), 0);
        assert_eq!(out.removed[0].reason, RemovalReason::PresentInPrompt);
        assert!(out.kb.get("person gender").unwrap().pairs.is_empty());
    }

    #[test]
    fn stage1_failure_keeps_pair_flagged() {
        let captions = corpus(&[("c1", "A dog")]);
        let kb = kb(&[("c1", "dog size", &["small", "large"], false)]);
        let out = filter_stage1(
            kb,
            &captions,
            &llm(|_| Err(TransportError::transient("down"))),
            1,
        );
        let pair = &out.kb.get("dog size").unwrap().pairs[0];
        assert!(pair.unverified);
        assert_eq!(out.diagnostics.len(), 1);
        assert!(out.removed.is_empty());
    }

    fn fixture_provider() -> StaticSynonyms {
        StaticSynonyms::new(HashMap::from([(
            "Female".to_string(),
            vec!["Woman".to_string(), " lady ".to_string()],
        )]))
    }

    struct Unreachable;
    impl SynonymProvider for Unreachable {
        fn source(&self) -> &str {
            "down"
        }
        fn synonyms(&self, _: &str) -> std::result::Result<Vec<String>, String> {
            Err("connection refused".into())
        }
    }

    #[test]
    fn synonym_expansion() {
        let classes = ["female".to_string()];
        let t = expand_synonyms(&classes, &fixture_provider());
        assert_eq!(
            t.entries["female"],
            BTreeSet::from([
                "female".to_string(),
                "woman".to_string(),
                "lady".to_string()
            ])
        );
        let t = expand_synonyms(&classes, &Unreachable);
        assert_eq!(t.entries["female"], BTreeSet::from(["female".to_string()]));
        assert!(expand_synonyms(&[], &fixture_provider()).entries.is_empty());
    }

    #[test]
    fn stage2_whole_word_matching() {
        let captions = corpus(&[
            ("c1", "The lady is sitting on the bench"),
            ("c2", "A ladybug on a leaf"),
            ("c3", "A middle-aged man rides a horse"),
        ]);
        let kb = kb(&[
            ("c1", "person gender", &["male", "female"], false),
            ("c2", "person gender", &["male", "female"], false),
            ("c3", "person age", &["young", "middle-aged", "old"], false),
        ]);
        let classes: Vec<String> = kb
            .records
            .values()
            .flat_map(|r| r.classes.iter().cloned())
            .collect();
        let table = expand_synonyms(&classes, &fixture_provider());
        let out = filter_stage2(kb, &captions, &table);
        let gender = out.kb.get("person gender").unwrap();
        assert_eq!(gender.pairs.len(), 1);
        assert_eq!(gender.pairs[0].caption_id, "c2");
        assert!(out.kb.get("person age").unwrap().pairs.is_empty());
        assert_eq!(out.removed.len(), 2);
        // Idempotent.
        let again = filter_stage2(out.kb.clone(), &captions, &table);
        assert_eq!(again.kb, out.kb);
        assert!(again.removed.is_empty());
    }

    #[test]
    fn conceptnet_edge_parsing() {
        let body = json!({"edges": [
            {"start": {"@id": "/c/en/woman", "label": "woman", "language": "en"},
             "end": {"@id": "/c/en/female/n", "label": "female", "language": "en"}},
            {"start": {"@id": "/c/en/female", "label": "female", "language": "en"},
             "end": {"@id": "/c/fr/femme", "label": "femme", "language": "fr"}},
            {"start": {"@id": "/c/en/female", "label": "female", "language": "en"},
             "end": {"@id": "/c/en/Lady", "label": "Lady", "language": "en"}}
        ]});
        assert_eq!(
            synonyms_from_edges(&body, "/c/en/female", "en"),
            vec!["lady", "woman"]
        );
    }
}
