//! Run configuration and file-level orchestration of the stages.
//!
//! Every stage reads its inputs from and writes its outputs to the run's
//! output directory, so stages can be re-run or resumed independently:
//!
//! ```text
//! propose   corpus        -> kb.json, proposals.jsonl
//! filter    kb.json       -> kb.filtered.json, removed.jsonl
//! assess    kb.filtered   -> records.jsonl (appended per bias, resumable)
//! quantify  records.jsonl -> report.json, scores.csv, context.csv, *.svg
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assessment::{
    assess_bias, assess_real_images, caption_images, load_manifest, planned_calls,
    AssessmentRecord, RecordKey, SamplingPlan, REAL_IMAGES,
};
use crate::backends::{BackendConfig, BackendsConfig, Client, ResponseCache, Role};
use crate::diagnostics::{Diagnostic, DiagnosticSink};
use crate::error::{Error, Result};
use crate::evaluation::{
    agreement_scores, column_diffs, default_templates, human_alignment, join_labels,
    read_column_pairs, read_judgments, report_kl, template_prompts, Agreement, ColumnDiffSummary,
    HumanAlignment, KlRow, Label,
};
use crate::filtering::{
    expand_synonyms, filter_stage1, filter_stage2, stage1_planned_requests, ConceptNetClient,
    NoSynonyms, RemovedPair, StaticSynonyms, SynonymProvider,
};
use crate::io::{append_jsonl, read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::knowledge::{
    aggregate, merge_similar, prune_support, validate_corpus, Caption, KnowledgeBase, Provenance,
    DEFAULT_MIN_SUPPORT, DEFAULT_OVERLAP_THRESHOLD,
};
use crate::proposal::{
    planned_requests, propose_corpus, PromptTemplate, ProposalOptions, DEFAULT_MAX_DEMONSTRATIONS,
};
use crate::quantify::{quantify, QuantifyOptions, QuantifyReport, DEFAULT_MIN_COUNTED};
use crate::report::{
    bar_chart_svg, context_comparison, context_comparison_csv, model_comparison,
    model_comparison_csv, score_rows, scores_csv, scores_svg, ScopeFilter,
};

pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const KB_FILE: &str = "kb.json";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";
pub const FILTERED_KB_FILE: &str = "kb.filtered.json";
pub const REMOVED_FILE: &str = "removed.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const SCORES_SVG: &str = "scores.svg";
pub const CONTEXT_CSV: &str = "context.csv";
pub const CONTEXT_SVG: &str = "context.svg";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_SVG: &str = "comparison.svg";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

const CONCEPTNET_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalSection {
    /// Prompt template JSON; the built-in one when absent.
    pub template: Option<PathBuf>,
    pub max_demonstrations: usize,
    pub strict_json: bool,
}

impl Default for ProposalSection {
    fn default() -> Self {
        ProposalSection {
            template: None,
            max_demonstrations: DEFAULT_MAX_DEMONSTRATIONS,
            strict_json: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSection {
    pub overlap_threshold: f64,
    pub min_support: usize,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        KnowledgeSection {
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            min_support: DEFAULT_MIN_SUPPORT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynonymSource {
    #[default]
    None,
    /// JSON object mapping a class to its synonyms.
    Static(PathBuf),
    /// Base URL of a ConceptNet API.
    ConceptNet(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub stage1: bool,
    pub synonyms: SynonymSource,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            stage1: true,
            synonyms: SynonymSource::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantifySection {
    pub min_counted: usize,
}

impl Default for QuantifySection {
    fn default() -> Self {
        QuantifySection {
            min_counted: DEFAULT_MIN_COUNTED,
        }
    }
}

/// A run configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Caption JSONL (`{id, text, source}` per line).
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Term list (one per line) expanded through `templates` when no corpus
    /// is given.
    #[serde(default)]
    pub terms: Option<PathBuf>,
    #[serde(default)]
    pub templates: Option<Vec<String>>,
    /// Image manifest for real-image runs; also the corpus when neither
    /// `corpus` nor `terms` is set.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub llm: Option<BackendConfig>,
    #[serde(default)]
    pub generator: Option<BackendConfig>,
    #[serde(default)]
    pub vqa: Option<BackendConfig>,
    #[serde(default)]
    pub captioner: Option<BackendConfig>,
    #[serde(default)]
    pub proposal: ProposalSection,
    #[serde(default)]
    pub knowledge: KnowledgeSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub sampling: SamplingPlan,
    #[serde(default)]
    pub quantify: QuantifySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    8
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        config.validate()?;
        Ok(config)
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.terms,
            &mut self.manifest,
            &mut self.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
        if let Some(t) = &mut self.proposal.template {
            fix(t);
        }
        if let SynonymSource::Static(p) = &mut self.filter.synonyms {
            fix(p);
        }
        for b in [
            &mut self.llm,
            &mut self.generator,
            &mut self.vqa,
            &mut self.captioner,
        ]
        .into_iter()
        .flatten()
        {
            for p in [&mut b.mock.rules, &mut b.mock.script]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        let t = self.knowledge.overlap_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!(
                "knowledge.overlap_threshold must lie in (0, 1], got {t}"
            )));
        }
        if self.quantify.min_counted == 0 {
            return Err(Error::Config(
                "quantify.min_counted must be at least 1".into(),
            ));
        }
        self.sampling
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let sources = [&self.corpus, &self.terms, &self.manifest];
        for p in sources
            .into_iter()
            .flatten()
            .chain(self.proposal.template.as_ref())
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let SynonymSource::Static(p) = &self.filter.synonyms {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(templates) = &self.templates {
            if templates.is_empty() {
                return Err(Error::Config("templates must not be empty".into()));
            }
        }
        for role in [Role::Llm, Role::Generator, Role::Vqa, Role::Captioner] {
            if let Some(b) = self.backends().get(role) {
                b.validate(role)?;
            }
        }
        Ok(())
    }

    pub fn backends(&self) -> BackendsConfig {
        BackendsConfig {
            llm: self.llm.clone(),
            generator: self.generator.clone(),
            vqa: self.vqa.clone(),
            captioner: self.captioner.clone(),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }
}

/// What one stage did, for the command line to print.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    /// Set on dry runs: backend calls the stage would make.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planned_calls: Option<usize>,
    pub network_calls: usize,
    pub cache_hits: usize,
    pub diagnostics: usize,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl StageSummary {
    fn new(stage: &'static str) -> Self {
        StageSummary {
            stage,
            ..Default::default()
        }
    }

    fn count(&mut self, client: &Client) {
        self.network_calls += client.network_calls();
        self.cache_hits += client.cache_hits();
    }
}

fn source_date() -> Option<String> {
    let secs: i64 = std::env::var("SOURCE_DATE_EPOCH")
        .ok()?
        .trim()
        .parse()
        .ok()?;
    Some(chrono::DateTime::from_timestamp(secs, 0)?.to_rfc3339())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_diagnostics(config: &RunConfig, stage: &str, items: &[Diagnostic]) -> Result<PathBuf> {
    let path = config.out(&format!("{stage}.diagnostics.jsonl"));
    write_jsonl(&path, items)?;
    Ok(path)
}

/// Records already on disk. A truncated final line (an interrupted append)
/// is dropped with a warning.
pub fn read_records(path: &Path) -> Result<Vec<AssessmentRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = if text.ends_with('\n') || text.is_empty() {
        text.as_str()
    } else {
        let cut = text.rfind('\n').map_or(0, |i| i + 1);
        log::warn!("{}: dropping truncated last line", path.display());
        &text[..cut]
    };
    crate::io::parse_jsonl(path, complete)
}

/// Stage driver bound to one configuration.
pub struct Pipeline {
    pub config: RunConfig,
    pub dry_run: bool,
    cache: Arc<ResponseCache>,
}

impl Pipeline {
    pub fn new(config: RunConfig, dry_run: bool) -> Self {
        let cache = Arc::new(ResponseCache::on_disk(config.cache_dir()));
        Pipeline {
            config,
            dry_run,
            cache,
        }
    }

    /// Same, with a caller-provided cache (tests use an in-memory one).
    pub fn with_cache(config: RunConfig, dry_run: bool, cache: Arc<ResponseCache>) -> Self {
        Pipeline {
            config,
            dry_run,
            cache,
        }
    }

    fn base_dir(&self) -> &Path {
        Path::new("")
    }

    fn max_in_flight(&self) -> usize {
        self.config.parallelism
    }

    fn backends(&self) -> BackendsConfig {
        self.config.backends()
    }

    /// Caption corpus from `corpus`, `terms` or `manifest`, in that order.
    pub fn corpus(
        &self,
        summary: &mut StageSummary,
        sink: &DiagnosticSink,
    ) -> Result<(Vec<Caption>, Provenance)> {
        let c = &self.config;
        let mut provenance = Provenance {
            built_at: source_date(),
            ..Default::default()
        };
        let captions = if let Some(path) = &c.corpus {
            provenance.corpus = file_name(path);
            provenance.corpus_digest = Some(sha256_file(path)?);
            read_jsonl(path)?
        } else if let Some(path) = &c.terms {
            provenance.corpus = file_name(path);
            provenance.corpus_digest = Some(sha256_file(path)?);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let terms: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect();
            let templates = c.templates.clone().unwrap_or_else(default_templates);
            template_prompts(&terms, &templates, "templates")?
        } else if let Some(path) = &c.manifest {
            provenance.corpus = file_name(path);
            provenance.corpus_digest = Some(sha256_file(path)?);
            let entries = load_manifest(path)?;
            let needs_captioner = entries
                .iter()
                .any(|e| e.caption.as_deref().is_none_or(|t| t.trim().is_empty()));
            let captioner = if needs_captioner {
                let cap = self.backends().captioner(
                    self.cache.clone(),
                    self.max_in_flight(),
                    self.base_dir(),
                )?;
                provenance.backends.insert(
                    Role::Captioner.to_string(),
                    cap.client().model().to_string(),
                );
                Some(cap)
            } else {
                None
            };
            if self.dry_run {
                let missing = entries.iter().filter(|e| e.caption.is_none()).count();
                summary
                    .notes
                    .push(format!("{missing} image(s) would need a caption"));
                *summary.planned_calls.get_or_insert(0) += missing;
                return Ok((Vec::new(), provenance));
            }
            let captions = caption_images(&entries, captioner.as_ref(), c.parallelism, sink);
            if let Some(cap) = &captioner {
                summary.count(cap.client());
            }
            let out = c.out(CAPTIONS_FILE);
            write_jsonl(&out, &captions)?;
            summary.outputs.push(out);
            captions
        } else {
            return Err(Error::Config("set one of corpus, terms or manifest".into()));
        };
        validate_corpus(&captions).map_err(Error::Invalid)?;
        Ok((captions, provenance))
    }

    fn captions_by_id(&self) -> Result<HashMap<String, String>> {
        let mut summary = StageSummary::new("corpus");
        let sink = DiagnosticSink::new();
        let manifest_only = match &self.config.manifest {
            Some(m) if self.config.corpus.is_none() && self.config.terms.is_none() => Some(m),
            _ => None,
        };
        let captions = if let Some(manifest) = manifest_only {
            // Captions were produced by the propose stage.
            let path = self.config.out(CAPTIONS_FILE);
            if path.exists() {
                read_jsonl::<Caption>(&path)?
            } else {
                load_manifest(manifest)?
                    .into_iter()
                    .filter_map(|e| Some(Caption::new(e.caption_id, e.caption?, "manifest")))
                    .collect()
            }
        } else {
            self.corpus(&mut summary, &sink)?.0
        };
        Ok(captions.into_iter().map(|c| (c.id, c.text)).collect())
    }

    fn template(&self) -> Result<PromptTemplate> {
        match &self.config.proposal.template {
            Some(path) => PromptTemplate::load(path),
            None => Ok(PromptTemplate::default()),
        }
    }

    /// Proposal, aggregation, merging and pruning. `promote` copies up to
    /// that many parsed responses into the template file as demonstrations.
    pub fn propose(&self, promote: Option<usize>) -> Result<StageSummary> {
        let c = &self.config;
        let mut summary = StageSummary::new("propose");
        let sink = DiagnosticSink::new();
        let (corpus, mut provenance) = self.corpus(&mut summary, &sink)?;
        let template = self.template()?;
        template.validate()?;
        let options = ProposalOptions {
            max_demonstrations: c.proposal.max_demonstrations,
            strict_json: c.proposal.strict_json,
            parallelism: c.parallelism,
        };
        if corpus.is_empty() && !self.dry_run {
            log::warn!("corpus is empty; writing an empty knowledge base");
        }
        let llm = self
            .backends()
            .llm(self.cache.clone(), self.max_in_flight(), self.base_dir())?;
        if self.dry_run {
            *summary.planned_calls.get_or_insert(0) +=
                planned_requests(&corpus, &llm, &template, &options);
            return Ok(summary);
        }
        let run = propose_corpus(&corpus, &llm, &template, &options);
        summary.count(llm.client());
        if !corpus.is_empty() && run.failed_captions == corpus.len() {
            // Nothing got through: report the backend failure instead of an empty kb.
            let first = run
                .diagnostics
                .first()
                .map(|d| d.message.clone())
                .unwrap_or_default();
            return Err(Error::Backend(crate::backends::BackendError {
                role: Role::Llm,
                model: llm.client().model().to_string(),
                kind: crate::backends::FailureKind::Permanent,
                message: format!("every proposal request failed; first error: {first}"),
            }));
        }
        provenance
            .backends
            .insert(Role::Llm.to_string(), llm.client().model().to_string());
        let mut kb = aggregate(run.proposals.iter().cloned());
        let proposed = kb.len();
        kb = merge_similar(kb, c.knowledge.overlap_threshold);
        let merged = kb.len();
        kb = prune_support(kb, c.knowledge.min_support);
        kb.provenance = provenance;
        summary.notes.push(format!(
            "{} caption(s), {} proposal(s), {proposed} bias(es) proposed, {merged} after merging, {} kept (support >= {})",
            corpus.len(),
            run.proposals.len(),
            kb.len(),
            c.knowledge.min_support
        ));
        if run.failed_captions > 0 {
            summary
                .notes
                .push(format!("{} caption request(s) failed", run.failed_captions));
        }

        let kb_path = c.out(KB_FILE);
        write_json(&kb_path, &kb)?;
        let responses_path = c.out(PROPOSALS_FILE);
        write_jsonl(&responses_path, &run.responses)?;
        summary.outputs.extend([kb_path, responses_path]);

        if let Some(n) = promote {
            let mut template = template;
            let added = template.promote(&run.responses, &corpus, n);
            let path = c
                .proposal
                .template
                .clone()
                .unwrap_or_else(|| c.out("template.json"));
            template.save(&path)?;
            summary.notes.push(format!(
                "promoted {added} response(s) into {}",
                path.display()
            ));
            summary.outputs.push(path);
        }

        let mut diagnostics = sink.into_sorted();
        diagnostics.extend(run.diagnostics);
        diagnostics.sort();
        summary.diagnostics = diagnostics.len();
        summary
            .outputs
            .push(write_diagnostics(c, "propose", &diagnostics)?);
        Ok(summary)
    }

    fn synonym_provider(&self) -> Result<Box<dyn SynonymProvider>> {
        Ok(match &self.config.filter.synonyms {
            SynonymSource::None => Box::new(NoSynonyms),
            SynonymSource::Static(path) => Box::new(StaticSynonyms::load(path)?),
            SynonymSource::ConceptNet(url) => {
                Box::new(ConceptNetClient::new(url.clone(), CONCEPTNET_TIMEOUT))
            }
        })
    }

    /// Two-stage filtering followed by the support threshold.
    pub fn filter(&self, kb_path: Option<&Path>, skip_stage1: bool) -> Result<StageSummary> {
        let c = &self.config;
        let mut summary = StageSummary::new("filter");
        let kb_path = kb_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| c.out(KB_FILE));
        let kb: KnowledgeBase = read_json(&kb_path)?;
        let captions = self.captions_by_id()?;
        let stage1 = c.filter.stage1 && !skip_stage1;
        let llm = if stage1 {
            Some(
                self.backends()
                    .llm(self.cache.clone(), self.max_in_flight(), self.base_dir())?,
            )
        } else {
            None
        };

        if self.dry_run {
            let planned = llm
                .as_ref()
                .map_or(0, |l| stage1_planned_requests(&kb, &captions, l));
            summary.planned_calls = Some(planned);
            if let SynonymSource::ConceptNet(_) = c.filter.synonyms {
                let classes: std::collections::BTreeSet<&String> =
                    kb.records.values().flat_map(|r| r.classes.iter()).collect();
                summary
                    .notes
                    .push(format!("{} synonym lookup(s)", classes.len()));
            }
            return Ok(summary);
        }

        let mut removed: Vec<RemovedPair> = Vec::new();
        let mut diagnostics = Vec::new();
        let mut kb = kb;
        if let Some(llm) = &llm {
            let out = filter_stage1(kb, &captions, llm, c.parallelism);
            summary.count(llm.client());
            kb = out.kb;
            removed.extend(out.removed);
            diagnostics.extend(out.diagnostics);
            kb.provenance
                .backends
                .insert("filter-llm".to_string(), llm.client().model().to_string());
        }
        let provider = self.synonym_provider()?;
        let table = expand_synonyms(
            kb.records.values().flat_map(|r| r.classes.iter()),
            provider.as_ref(),
        );
        let out = filter_stage2(kb, &captions, &table);
        kb = out.kb;
        removed.extend(out.removed);
        diagnostics.extend(out.diagnostics);
        let before = kb.len();
        kb = prune_support(kb, c.knowledge.min_support);
        removed.sort();
        diagnostics.sort();

        summary.notes.push(format!(
            "removed {} pair(s); {} bias(es) kept, {} dropped below support {}",
            removed.len(),
            kb.len(),
            before - kb.len(),
            c.knowledge.min_support
        ));
        let out_kb = c.out(FILTERED_KB_FILE);
        write_json(&out_kb, &kb)?;
        let out_removed = c.out(REMOVED_FILE);
        write_jsonl(&out_removed, &removed)?;
        summary.diagnostics = diagnostics.len();
        summary.outputs.extend([
            out_kb,
            out_removed,
            write_diagnostics(c, "filter", &diagnostics)?,
        ]);
        Ok(summary)
    }

    fn default_kb_path(&self) -> PathBuf {
        let filtered = self.config.out(FILTERED_KB_FILE);
        if filtered.exists() {
            filtered
        } else {
            self.config.out(KB_FILE)
        }
    }

    /// Generates and assesses images (or, with `real_images`, assesses the
    /// manifest's images). Records already in `records.jsonl` are skipped;
    /// new ones are appended after each bias and the file is rewritten in
    /// sorted order at the end.
    pub fn assess(
        &self,
        kb_path: Option<&Path>,
        real_images: Option<&Path>,
    ) -> Result<StageSummary> {
        let c = &self.config;
        let mut summary = StageSummary::new("assess");
        let kb_path = kb_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.default_kb_path());
        let kb: KnowledgeBase = read_json(&kb_path)?;
        let vqa = self
            .backends()
            .vqa(self.cache.clone(), self.max_in_flight(), self.base_dir())?;
        let records_path = c.out(RECORDS_FILE);
        let existing = read_records(&records_path)?;

        let generator = match real_images {
            Some(_) => None,
            None => Some(self.backends().generator(
                self.cache.clone(),
                self.max_in_flight(),
                self.base_dir(),
            )?),
        };
        let generator_id = generator
            .as_ref()
            .map_or(REAL_IMAGES.to_string(), |g| g.client().model().to_string());
        if let Some(r) = existing
            .iter()
            .find(|r| r.generator != generator_id || r.vqa != vqa.client().model())
        {
            return Err(Error::Config(format!(
                "{} holds records of generator {:?} / vqa {:?}; use another output directory",
                records_path.display(),
                r.generator,
                r.vqa
            )));
        }
        let done: HashSet<RecordKey> = existing.iter().map(AssessmentRecord::key).collect();
        let sink = DiagnosticSink::new();

        let new_records = match (real_images, &generator) {
            (Some(manifest), _) => {
                let entries = load_manifest(manifest)?;
                if self.dry_run {
                    let pairs: HashSet<&str> = kb
                        .records
                        .values()
                        .flat_map(|r| r.pairs.iter().map(|p| p.caption_id.as_str()))
                        .collect();
                    let planned = kb
                        .records
                        .values()
                        .flat_map(|r| r.pairs.iter().map(move |p| (r, p)))
                        .filter(|(r, p)| {
                            pairs.contains(p.caption_id.as_str())
                                && entries.iter().any(|e| e.caption_id == p.caption_id)
                                && !done.contains(&(r.name.clone(), p.caption_id.clone(), 0))
                        })
                        .count();
                    summary.planned_calls = Some(planned);
                    return Ok(summary);
                }
                let mut recs = assess_real_images(&entries, &kb, &vqa, &done, c.parallelism, &sink);
                recs.sort();
                append_jsonl(&records_path, &recs)?;
                recs
            }
            (None, Some(generator)) => {
                let captions = self.captions_by_id()?;
                if self.dry_run {
                    let mut images = HashSet::new();
                    let (g, v) = kb.records.values().fold((0, 0), |acc, record| {
                        let (g, v) = planned_calls(
                            record,
                            &captions,
                            &c.sampling,
                            generator,
                            &vqa,
                            &done,
                            &mut images,
                        );
                        (acc.0 + g, acc.1 + v)
                    });
                    summary.planned_calls = Some(g + v);
                    summary
                        .notes
                        .push(format!("{g} generation call(s), {v} VQA call(s)"));
                    return Ok(summary);
                }
                let mut all = Vec::new();
                for record in kb.records.values() {
                    let recs = assess_bias(
                        record,
                        &captions,
                        &c.sampling,
                        generator,
                        &vqa,
                        &done,
                        c.parallelism,
                        &sink,
                    );
                    append_jsonl(&records_path, &recs)?;
                    all.extend(recs);
                }
                summary.count(generator.client());
                all
            }
            (None, None) => unreachable!("generator is built when not assessing real images"),
        };
        summary.count(vqa.client());

        let added = new_records.len();
        let mut records = existing;
        records.extend(new_records);
        records.sort();
        records.dedup_by(|a, b| a.key() == b.key());
        write_jsonl(&records_path, &records)?;
        let unknown = records.iter().filter(|r| r.is_unknown()).count();
        summary.notes.push(format!(
            "{added} new record(s), {} total, {unknown} unknown",
            records.len()
        ));
        let diagnostics = sink.into_sorted();
        summary.diagnostics = diagnostics.len();
        summary
            .outputs
            .extend([records_path, write_diagnostics(c, "assess", &diagnostics)?]);
        Ok(summary)
    }

    fn quantify_options(&self) -> QuantifyOptions {
        QuantifyOptions {
            min_counted: self.config.quantify.min_counted,
        }
    }

    /// Scores `records.jsonl` (or `records`) and writes every report file.
    /// Each of `compare` is another record file scored the same way and
    /// laid side by side with the first.
    pub fn quantify(
        &self,
        records: Option<&Path>,
        scope: ScopeFilter,
        compare: &[PathBuf],
    ) -> Result<StageSummary> {
        let c = &self.config;
        let mut summary = StageSummary::new("quantify");
        summary.planned_calls = self.dry_run.then_some(0);
        let path = records
            .map(Path::to_path_buf)
            .unwrap_or_else(|| c.out(RECORDS_FILE));
        let recs = read_records_required(&path)?;
        let report = quantify(&recs, self.quantify_options())?;
        if self.dry_run {
            return Ok(summary);
        }
        let report_path = c.out(REPORT_FILE);
        write_json(&report_path, &report)?;
        summary.outputs.push(report_path);
        summary
            .outputs
            .extend(write_report_files(&c.output_dir, &report, scope)?);
        let ranked = report.context_free_scores();
        summary.notes.push(format!(
            "{} bias(es) scored; top: {}",
            report.biases.len(),
            ranked.first().map_or("-".to_string(), |s| format!(
                "{} {:.3} ({})",
                s.bias, s.severity, s.majority_class
            ))
        ));

        if !compare.is_empty() {
            let mut reports = vec![(report_name(&report, &path), report)];
            for other in compare {
                let r = quantify(&read_records_required(other)?, self.quantify_options())?;
                reports.push((report_name(&r, other), r));
            }
            disambiguate(&mut reports);
            let cmp = model_comparison(&reports, scope)?;
            let csv_path = c.out(COMPARISON_CSV);
            write_atomic(&csv_path, model_comparison_csv(&cmp)?.as_bytes())?;
            let svg_path = c.out(COMPARISON_SVG);
            write_atomic(
                &svg_path,
                bar_chart_svg("Severity by model", &cmp.models, &cmp.rows).as_bytes(),
            )?;
            summary.outputs.extend([csv_path, svg_path]);
        }
        Ok(summary)
    }

    /// Re-renders the CSV and SVG files from an existing `report.json`.
    pub fn report(&self, report: Option<&Path>, scope: ScopeFilter) -> Result<StageSummary> {
        let c = &self.config;
        let mut summary = StageSummary::new("report");
        summary.planned_calls = self.dry_run.then_some(0);
        let path = report
            .map(Path::to_path_buf)
            .unwrap_or_else(|| c.out(REPORT_FILE));
        let report: QuantifyReport = read_json(&path)?;
        if !self.dry_run {
            summary.outputs = write_report_files(&c.output_dir, &report, scope)?;
        }
        Ok(summary)
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_records_required(path: &Path) -> Result<Vec<AssessmentRecord>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let recs = read_records(path)?;
    if recs.is_empty() {
        return Err(Error::NoData(format!(
            "{} holds no records",
            path.display()
        )));
    }
    Ok(recs)
}

fn report_name(report: &QuantifyReport, path: &Path) -> String {
    if report.generators.is_empty() {
        file_name(path)
    } else {
        report.generators.join("+")
    }
}

fn disambiguate(reports: &mut [(String, QuantifyReport)]) {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (name, _) in reports.iter_mut() {
        let n = seen.entry(name.clone()).or_default();
        *n += 1;
        if *n > 1 {
            *name = format!("{name}#{n}");
        }
    }
}

/// `scores.csv`, `scores.svg`, `context.csv` and `context.svg`.
pub fn write_report_files(
    dir: &Path,
    report: &QuantifyReport,
    scope: ScopeFilter,
) -> Result<Vec<PathBuf>> {
    let rows = score_rows(report, scope);
    let scores_path = dir.join(SCORES_CSV);
    write_atomic(&scores_path, scores_csv(&rows)?.as_bytes())?;
    let chart_scores = match scope {
        ScopeFilter::ContextAware => report.context_aware_scores(),
        _ => report.context_free_scores(),
    };
    let svg_path = dir.join(SCORES_SVG);
    write_atomic(
        &svg_path,
        scores_svg("Bias severity", &chart_scores).as_bytes(),
    )?;
    let ctx = context_comparison(report);
    let ctx_path = dir.join(CONTEXT_CSV);
    write_atomic(&ctx_path, context_comparison_csv(&ctx)?.as_bytes())?;
    let ctx_rows: Vec<(String, Vec<Option<f64>>)> = ctx
        .iter()
        .map(|r| (r.bias.clone(), vec![r.context_free, r.context_aware]))
        .collect();
    let ctx_svg = dir.join(CONTEXT_SVG);
    write_atomic(
        &ctx_svg,
        bar_chart_svg(
            "Context-free vs. context-aware severity",
            &[
                "context-free".to_string(),
                "context-aware (mean)".to_string(),
            ],
            &ctx_rows,
        )
        .as_bytes(),
    )?;
    Ok(vec![scores_path, svg_path, ctx_path, ctx_svg])
}

/// Inputs of the `compare` command.
#[derive(Debug, Clone)]
pub enum CompareInput {
    /// Two `report.json` files: KL divergence per shared bias.
    Reports(PathBuf, PathBuf),
    /// `item,measured,reference` CSV: absolute differences.
    Table { path: PathBuf, decimals: u32 },
    /// Predicted and reference label JSONL files: accuracy and macro-F1.
    Labels {
        predicted: PathBuf,
        reference: PathBuf,
    },
    /// Human-judgment CSV against the context-free scores of a report.
    Human { judgments: PathBuf, report: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Kl {
        rows: Vec<KlRow>,
        mean: f64,
    },
    Table(ColumnDiffSummary),
    Labels {
        #[serde(flatten)]
        agreement: Agreement,
        unmatched: usize,
    },
    Human(HumanAlignment),
}

impl Metrics {
    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        match self {
            Metrics::Kl { rows, .. } => {
                for r in rows {
                    w.serialize(r).map_err(err)?;
                }
            }
            Metrics::Table(s) => {
                for r in &s.rows {
                    w.serialize(r).map_err(err)?;
                }
            }
            Metrics::Labels { agreement, .. } => w.serialize(agreement).map_err(err)?,
            Metrics::Human(h) => {
                w.write_record([
                    "bias",
                    "severity",
                    "human_intensity",
                    "model_majority",
                    "human_majority",
                    "agrees",
                ])
                .map_err(err)?;
                for b in &h.biases {
                    w.write_record([
                        b.bias.clone(),
                        b.severity.to_string(),
                        b.human_intensity.to_string(),
                        b.model_majority.clone(),
                        b.human_majority.clone().unwrap_or_default(),
                        b.agrees.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// One-line human-readable summary.
    pub fn headline(&self) -> String {
        match self {
            Metrics::Kl { rows, mean } => {
                format!("KL over {} bias(es): mean {mean:.4}", rows.len())
            }
            Metrics::Table(s) => format!(
                "{} row(s): mean diff {:.2} ± {:.2}",
                s.rows.len(),
                s.mean,
                s.std
            ),
            Metrics::Labels {
                agreement,
                unmatched,
            } => format!(
                "accuracy {:.4}, macro-F1 {:.4} over {} item(s) ({unmatched} unmatched)",
                agreement.accuracy, agreement.macro_f1, agreement.n
            ),
            Metrics::Human(h) => format!(
                "AME {:.4}, majority agreement {:.1}% over {} bias(es)",
                h.ame,
                h.majority_agreement * 100.0,
                h.biases.len()
            ),
        }
    }
}

pub fn compute_metrics(input: &CompareInput) -> Result<Metrics> {
    Ok(match input {
        CompareInput::Reports(a, b) => {
            let rows = report_kl(&read_json(a)?, &read_json(b)?)?;
            let mean = rows.iter().map(|r| r.kl).sum::<f64>() / rows.len() as f64;
            Metrics::Kl { rows, mean }
        }
        CompareInput::Table { path, decimals } => {
            Metrics::Table(column_diffs(&read_column_pairs(path)?, *decimals)?)
        }
        CompareInput::Labels {
            predicted,
            reference,
        } => {
            let (pairs, unmatched) = join_labels(
                &read_jsonl::<Label>(predicted)?,
                &read_jsonl::<Label>(reference)?,
            )?;
            Metrics::Labels {
                agreement: agreement_scores(&pairs)?,
                unmatched,
            }
        }
        CompareInput::Human { judgments, report } => {
            let report: QuantifyReport = read_json(report)?;
            Metrics::Human(human_alignment(
                &read_judgments(judgments)?,
                &report.context_free_scores(),
            )?)
        }
    })
}

/// Computes the metrics and writes `metrics.json` and `metrics.csv` into
/// `dir`.
pub fn compare(input: &CompareInput, dir: &Path) -> Result<(Metrics, Vec<PathBuf>)> {
    let metrics = compute_metrics(input)?;
    let json = dir.join(METRICS_JSON);
    write_json(&json, &metrics)?;
    let csv = dir.join(METRICS_CSV);
    write_atomic(&csv, metrics.csv()?.as_bytes())?;
    Ok((metrics, vec![json, csv]))
}
