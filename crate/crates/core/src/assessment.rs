//! Image generation and VQA assessment.
//!
//! For every sampled caption of a bias and every seed `0..N`, the generator
//! renders the caption and the VQA model answers the bias question choosing
//! among the bias classes plus an unknown option. Each answer is one
//! [`AssessmentRecord`].
//!
//! Caption sampling is reproducible across implementations: a ChaCha8
//! stream keyed with `SHA-256("t2i-audit/sample" ‖ seed as u64 LE ‖ bias
//! name [‖ 0x00 ‖ generator model])` drives a partial Fisher–Yates shuffle
//! of the bias pairs sorted by caption id. Bounded draws use rejection
//! sampling on `next_u64`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{CaptionerClient, GeneratedImage, GeneratorClient, VqaClient, UNKNOWN};
use crate::diagnostics::{Diagnostic, DiagnosticSink};
use crate::error::{Error, Result};
use crate::knowledge::{BiasRecord, Caption, CaptionQuestion, KnowledgeBase};
use crate::parallel::par_map;

/// Generator id written on records assessed from real images.
pub const REAL_IMAGES: &str = "real-images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub captions_per_bias: usize,
    pub seeds_per_caption: usize,
    /// Seed of the caption sampler.
    pub seed: u64,
    /// Draw a separate caption sample per generator instead of sharing one.
    pub per_generator_sample: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            captions_per_bias: 100,
            seeds_per_caption: 10,
            seed: 0,
            per_generator_sample: false,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.captions_per_bias == 0 || self.seeds_per_caption == 0 {
            return Err(Error::Invalid(
                "captions_per_bias and seeds_per_caption must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        0..self.seeds_per_caption as u64
    }
}

fn sampler(plan: &SamplingPlan, bias: &str, generator: Option<&str>) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"t2i-audit/sample");
    h.update(plan.seed.to_le_bytes());
    h.update(bias.as_bytes());
    if let Some(g) = generator {
        h.update([0u8]);
        h.update(g.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Uniform integer in `0..bound` by rejection sampling.
fn below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % bound;
        }
    }
}

/// Draws `min(captions_per_bias, |pairs|)` pairs without replacement.
///
/// `generator` only matters when the plan asks for per-generator samples.
/// The result is sorted by caption id.
pub fn sample_captions(
    record: &BiasRecord,
    plan: &SamplingPlan,
    generator: Option<&str>,
) -> Vec<CaptionQuestion> {
    let mut pool: Vec<&CaptionQuestion> = record.pairs.iter().collect();
    pool.sort();
    let take = plan.captions_per_bias.min(pool.len());
    let salt = generator.filter(|_| plan.per_generator_sample);
    let mut rng = sampler(plan, &record.name, salt);
    for i in 0..take {
        let j = i + below(&mut rng, (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut picked: Vec<CaptionQuestion> = pool[..take].iter().map(|p| (*p).clone()).collect();
    picked.sort();
    picked
}

/// One VQA observation of one image.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub bias: String,
    pub caption_id: String,
    pub seed: u64,
    pub question: String,
    /// Class options offered to the VQA model (the bias classes).
    pub options: Vec<String>,
    /// One of `options` or `"unknown"`.
    pub predicted: String,
    pub generator: String,
    pub vqa: String,
}

impl AssessmentRecord {
    pub fn key(&self) -> RecordKey {
        (self.bias.clone(), self.caption_id.clone(), self.seed)
    }

    pub fn is_unknown(&self) -> bool {
        self.predicted == UNKNOWN
    }
}

/// (bias, caption id, seed).
pub type RecordKey = (String, String, u64);

struct Task<'a> {
    pair: &'a CaptionQuestion,
    text: &'a str,
    seed: u64,
}

fn tasks<'a>(
    record: &BiasRecord,
    sampled: &'a [CaptionQuestion],
    captions: &'a HashMap<String, String>,
    plan: &SamplingPlan,
    done: &HashSet<RecordKey>,
    sink: &DiagnosticSink,
) -> Vec<Task<'a>> {
    let mut out = Vec::new();
    for pair in sampled {
        let Some(text) = captions.get(&pair.caption_id) else {
            sink.push(Diagnostic::new(
                "assess",
                format!("{}/{}", record.name, pair.caption_id),
                "caption text not in corpus",
            ));
            continue;
        };
        for seed in plan.seeds() {
            if !done.contains(&(record.name.clone(), pair.caption_id.clone(), seed)) {
                out.push(Task { pair, text, seed });
            }
        }
    }
    out
}

/// Backend calls a run of [`assess_bias`] would still make, as
/// `(generator, vqa)` counts. Nothing is sent. `planned_images` carries
/// the (prompt, seed) pairs already counted for other biases, whose images
/// the real run would share through the cache.
pub fn planned_calls(
    record: &BiasRecord,
    captions: &HashMap<String, String>,
    plan: &SamplingPlan,
    generator: &GeneratorClient,
    vqa: &VqaClient,
    done: &HashSet<RecordKey>,
    planned_images: &mut HashSet<(String, u64)>,
) -> (usize, usize) {
    let sampled = sample_captions(record, plan, Some(generator.client().model()));
    let sink = DiagnosticSink::new();
    let classes = record.class_list();
    let mut counts = (0, 0);
    for task in tasks(record, &sampled, captions, plan, done, &sink) {
        let gen_request = generator.request(task.text, task.seed);
        if !generator.client().is_cached(&gen_request) {
            if planned_images.insert((task.text.to_string(), task.seed)) {
                counts.0 += 1;
            }
            counts.1 += 1;
            continue;
        }
        // Cached image: only the VQA call may be missing.
        match generator.generate(task.text, task.seed) {
            Ok(image)
                if vqa
                    .client()
                    .is_cached(&vqa.request(&image, &task.pair.question, &classes)) => {}
            _ => counts.1 += 1,
        }
    }
    counts
}

/// Generates and assesses every (sampled caption, seed) of one bias that is
/// not in `done`. Generation failures produce a diagnostic and no record; a
/// failed VQA call produces an unknown record and a diagnostic.
#[allow(clippy::too_many_arguments)]
pub fn assess_bias(
    record: &BiasRecord,
    captions: &HashMap<String, String>,
    plan: &SamplingPlan,
    generator: &GeneratorClient,
    vqa: &VqaClient,
    done: &HashSet<RecordKey>,
    parallelism: usize,
    sink: &DiagnosticSink,
) -> Vec<AssessmentRecord> {
    let sampled = sample_captions(record, plan, Some(generator.client().model()));
    let work = tasks(record, &sampled, captions, plan, done, sink);
    let classes = record.class_list();
    let results = par_map(&work, parallelism, |task| {
        let subject = format!("{}/{}/{}", record.name, task.pair.caption_id, task.seed);
        let image = match generator.generate(task.text, task.seed) {
            Ok(bytes) => GeneratedImage {
                bias_name: record.name.clone(),
                caption_id: task.pair.caption_id.clone(),
                seed: task.seed,
                model: generator.client().model().to_string(),
                bytes,
            },
            Err(e) => {
                sink.push(Diagnostic::new("generate", subject, e.to_string()));
                return None;
            }
        };
        let predicted = match vqa.answer(&image.bytes, &task.pair.question, &classes) {
            Ok(answer) => answer,
            Err(e) => {
                sink.push(Diagnostic::new("vqa", subject, e.to_string()));
                UNKNOWN.to_string()
            }
        };
        Some(AssessmentRecord {
            bias: image.bias_name,
            caption_id: image.caption_id,
            seed: image.seed,
            question: task.pair.question.clone(),
            options: classes.clone(),
            predicted,
            generator: image.model,
            vqa: vqa.client().model().to_string(),
        })
    });
    let mut records: Vec<AssessmentRecord> = results.into_iter().flatten().collect();
    records.sort();
    records
}

/// One line of a real-image manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub caption_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = crate::io::read_jsonl(path)?;
    for e in &mut entries {
        if e.image_path.is_relative() {
            e.image_path = base.join(&e.image_path);
        }
    }
    Ok(entries)
}

fn read_image(entry: &ManifestEntry, sink: &DiagnosticSink) -> Option<Vec<u8>> {
    std::fs::read(&entry.image_path)
        .map_err(|e| {
            sink.push(Diagnostic::new(
                "load-image",
                &entry.caption_id,
                format!("{}: {e}", entry.image_path.display()),
            ))
        })
        .ok()
}

/// Captions for a manifest, asking the captioner for entries without one.
/// Images that cannot be read or captioned are skipped with a diagnostic.
pub fn caption_images(
    entries: &[ManifestEntry],
    captioner: Option<&CaptionerClient>,
    parallelism: usize,
    sink: &DiagnosticSink,
) -> Vec<Caption> {
    let results = par_map(entries, parallelism, |entry| {
        if let Some(text) = entry.caption.as_ref().filter(|t| !t.trim().is_empty()) {
            return Some(Caption::new(&entry.caption_id, text, "manifest"));
        }
        let Some(captioner) = captioner else {
            sink.push(Diagnostic::new(
                "caption",
                &entry.caption_id,
                "no caption and no captioner configured",
            ));
            return None;
        };
        let image = read_image(entry, sink)?;
        match captioner.caption(&image) {
            Ok(text) => Some(Caption::new(&entry.caption_id, text, "captioner")),
            Err(e) => {
                sink.push(Diagnostic::new("caption", &entry.caption_id, e.to_string()));
                None
            }
        }
    });
    results.into_iter().flatten().collect()
}

/// Assesses provided images instead of generated ones. Every knowledge-base
/// pair whose caption id matches a manifest entry is asked once (seed 0);
/// entries matching no pair are skipped.
pub fn assess_real_images(
    entries: &[ManifestEntry],
    kb: &KnowledgeBase,
    vqa: &VqaClient,
    done: &HashSet<RecordKey>,
    parallelism: usize,
    sink: &DiagnosticSink,
) -> Vec<AssessmentRecord> {
    let mut by_caption: HashMap<&str, Vec<(&BiasRecord, &CaptionQuestion)>> = HashMap::new();
    for record in kb.records.values() {
        for pair in &record.pairs {
            by_caption
                .entry(pair.caption_id.as_str())
                .or_default()
                .push((record, pair));
        }
    }
    let results = par_map(entries, parallelism, |entry| {
        let Some(matches) = by_caption.get(entry.caption_id.as_str()) else {
            log::debug!("image {} matches no bias pair", entry.caption_id);
            return Vec::new();
        };
        let pending: Vec<_> = matches
            .iter()
            .filter(|(r, _)| !done.contains(&(r.name.clone(), entry.caption_id.clone(), 0)))
            .collect();
        if pending.is_empty() {
            return Vec::new();
        }
        let Some(image) = read_image(entry, sink) else {
            return Vec::new();
        };
        pending
            .into_iter()
            .map(|(record, pair)| {
                let classes = record.class_list();
                let predicted = vqa
                    .answer(&image, &pair.question, &classes)
                    .unwrap_or_else(|e| {
                        sink.push(Diagnostic::new(
                            "vqa",
                            format!("{}/{}/0", record.name, entry.caption_id),
                            e.to_string(),
                        ));
                        UNKNOWN.to_string()
                    });
                AssessmentRecord {
                    bias: record.name.clone(),
                    caption_id: entry.caption_id.clone(),
                    seed: 0,
                    question: pair.question.clone(),
                    options: classes,
                    predicted,
                    generator: REAL_IMAGES.to_string(),
                    vqa: vqa.client().model().to_string(),
                }
            })
            .collect()
    });
    let mut records: Vec<AssessmentRecord> = results.into_iter().flatten().collect();
    records.sort();
    records
}
