//! Class distributions, severity scores and rankings.
//!
//! * context-aware: class frequencies over the images of one caption, with
//!   unknown answers removed from numerator and denominator;
//! * context-free: unweighted mean of the per-caption distributions;
//! * severity: `1 + Σ p ln p / ln k` — one minus the Shannon entropy
//!   normalized by its maximum `ln k` — so 0 is uniform and 1 one-hot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assessment::AssessmentRecord;
use crate::backends::UNKNOWN;
use crate::error::{Error, Result};

/// Default minimum non-unknown answers for a caption to enter the
/// context-free mean.
pub const DEFAULT_MIN_COUNTED: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    ContextAware(String),
    ContextFree,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::ContextAware(caption) => write!(f, "context-aware:{caption}"),
            Scope::ContextFree => f.write_str("context-free"),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "context-free" {
            return Ok(Scope::ContextFree);
        }
        s.strip_prefix("context-aware:")
            .map(|c| Scope::ContextAware(c.to_string()))
            .ok_or_else(|| format!("unknown scope {s:?}"))
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub bias: String,
    pub scope: Scope,
    /// Keyed by every class of the bias. All zero when `counted == 0`.
    pub probs: BTreeMap<String, f64>,
    /// Non-unknown observations.
    pub counted: usize,
    pub unknown_count: usize,
}

impl ClassDistribution {
    pub fn is_empty(&self) -> bool {
        self.counted == 0
    }

    pub fn total(&self) -> usize {
        self.counted + self.unknown_count
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }
}

/// Per-caption distribution from the VQA answers for one (bias, caption).
///
/// Answers outside `classes` count as unknown.
pub fn context_aware<'a, I>(
    bias: &str,
    caption_id: &str,
    classes: &[String],
    predictions: I,
) -> ClassDistribution
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, usize> = classes.iter().map(|c| (c.clone(), 0)).collect();
    let mut unknown = 0;
    for p in predictions {
        match counts.get_mut(p) {
            Some(n) => *n += 1,
            None => {
                if p != UNKNOWN {
                    log::warn!(
                        "{bias}/{caption_id}: answer {p:?} is not a class; counted as unknown"
                    );
                }
                unknown += 1;
            }
        }
    }
    let counted: usize = counts.values().sum();
    let probs = counts
        .into_iter()
        .map(|(c, n)| {
            let p = if counted == 0 {
                0.0
            } else {
                n as f64 / counted as f64
            };
            (c, p)
        })
        .collect();
    ClassDistribution {
        bias: bias.to_string(),
        scope: Scope::ContextAware(caption_id.to_string()),
        probs,
        counted,
        unknown_count: unknown,
    }
}

/// Unweighted mean of the non-empty per-caption distributions.
pub fn context_free(bias: &str, distributions: &[ClassDistribution]) -> Result<ClassDistribution> {
    let usable: Vec<&ClassDistribution> = distributions.iter().filter(|d| !d.is_empty()).collect();
    let Some(first) = usable.first() else {
        return Err(Error::NoData(format!(
            "bias {bias:?} has no caption with a classified image"
        )));
    };
    let n = usable.len() as f64;
    let mut probs: BTreeMap<String, f64> = first.probs.keys().map(|c| (c.clone(), 0.0)).collect();
    for d in &usable {
        if d.probs.len() != probs.len() || !d.probs.keys().all(|k| probs.contains_key(k)) {
            return Err(Error::VocabularyMismatch(format!(
                "captions of bias {bias:?} disagree on the class set"
            )));
        }
        for (c, p) in &d.probs {
            *probs.get_mut(c).expect("checked") += p;
        }
    }
    for p in probs.values_mut() {
        *p /= n;
    }
    Ok(ClassDistribution {
        bias: bias.to_string(),
        scope: Scope::ContextFree,
        probs,
        counted: usable.iter().map(|d| d.counted).sum(),
        unknown_count: usable.iter().map(|d| d.unknown_count).sum(),
    })
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy<'a, I: IntoIterator<Item = &'a f64>>(probs: I) -> f64 {
    -probs
        .into_iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScore {
    pub bias: String,
    pub scope: Scope,
    /// In [0, 1]; 0 for a uniform distribution, 1 for a one-hot one.
    pub severity: f64,
    pub majority_class: String,
    pub class_count: usize,
    /// Captions behind a context-free score, images behind a context-aware one.
    pub support: usize,
}

/// Severity and majority class of a distribution.
pub fn severity(dist: &ClassDistribution) -> Result<BiasScore> {
    let k = dist.class_count();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "bias {:?} has {k} class(es); severity needs at least 2",
            dist.bias
        )));
    }
    if dist.is_empty() {
        return Err(Error::NoData(format!(
            "{} of {:?} is empty",
            dist.scope, dist.bias
        )));
    }
    let score = 1.0 - entropy(dist.probs.values()) / (k as f64).ln();
    let mut majority: Option<(&String, f64)> = None;
    for (c, &p) in &dist.probs {
        // Strictly greater keeps the lexicographically first class on ties.
        if majority.is_none_or(|(_, best)| p > best) {
            majority = Some((c, p));
        }
    }
    Ok(BiasScore {
        bias: dist.bias.clone(),
        scope: dist.scope.clone(),
        severity: score.clamp(0.0, 1.0),
        majority_class: majority.expect("k >= 2").0.clone(),
        class_count: k,
        support: dist.counted,
    })
}

/// Descending severity, then descending support, then bias name, then scope.
pub fn rank(mut scores: Vec<BiasScore>) -> Vec<BiasScore> {
    scores.sort_by(|a, b| {
        b.severity
            .total_cmp(&a.severity)
            .then(b.support.cmp(&a.support))
            .then_with(|| a.bias.cmp(&b.bias))
            .then_with(|| a.scope.cmp(&b.scope))
    });
    scores
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDistribution {
    pub distribution: ClassDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<BiasScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub bias: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_free: Option<ScoredDistribution>,
    /// Mean of the per-caption severities, when any caption was scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_aware_mean: Option<f64>,
    pub context_aware: Vec<ScoredDistribution>,
    /// Observations over all captions of the bias.
    pub counted: usize,
    pub unknown_count: usize,
}

/// Full quantification of one record set, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantifyReport {
    pub generators: Vec<String>,
    pub vqa_models: Vec<String>,
    pub biases: Vec<BiasReport>,
}

impl QuantifyReport {
    pub fn bias(&self, name: &str) -> Option<&BiasReport> {
        self.biases.iter().find(|b| b.bias == name)
    }

    pub fn context_free_scores(&self) -> Vec<BiasScore> {
        rank(
            self.biases
                .iter()
                .filter_map(|b| b.context_free.as_ref()?.score.clone())
                .collect(),
        )
    }

    pub fn context_aware_scores(&self) -> Vec<BiasScore> {
        rank(
            self.biases
                .iter()
                .flat_map(|b| b.context_aware.iter().filter_map(|d| d.score.clone()))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantifyOptions {
    /// A caption enters the context-free mean only with at least
    /// `min(min_counted, images of that caption)` classified images.
    pub min_counted: usize,
}

impl Default for QuantifyOptions {
    fn default() -> Self {
        QuantifyOptions {
            min_counted: DEFAULT_MIN_COUNTED,
        }
    }
}

/// Groups records by bias and caption and computes every distribution and
/// score.
pub fn quantify(records: &[AssessmentRecord], options: QuantifyOptions) -> Result<QuantifyReport> {
    if records.is_empty() {
        return Err(Error::NoData("no assessment records".into()));
    }
    let mut by_bias: BTreeMap<&str, BTreeMap<&str, Vec<&AssessmentRecord>>> = BTreeMap::new();
    let mut classes: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        by_bias
            .entry(&r.bias)
            .or_default()
            .entry(&r.caption_id)
            .or_default()
            .push(r);
        classes
            .entry(&r.bias)
            .or_default()
            .extend(r.options.iter().map(String::as_str));
    }

    let mut biases = Vec::new();
    for (bias, per_caption) in by_bias {
        let class_list: Vec<String> = classes[bias].iter().map(|c| c.to_string()).collect();
        let mut aware = Vec::new();
        let mut eligible = Vec::new();
        for (caption, recs) in per_caption {
            let dist = context_aware(
                bias,
                caption,
                &class_list,
                recs.iter().map(|r| r.predicted.as_str()),
            );
            let needed = options.min_counted.min(recs.len()).max(1);
            if dist.counted >= needed {
                eligible.push(dist.clone());
            }
            let score = (!dist.is_empty()).then(|| severity(&dist)).transpose()?;
            aware.push(ScoredDistribution {
                distribution: dist,
                score,
            });
        }
        let context_free = match context_free(bias, &eligible) {
            Ok(mut dist) => {
                let mut score = severity(&dist)?;
                score.support = eligible.len();
                dist.counted = eligible.iter().map(|d| d.counted).sum();
                Some(ScoredDistribution {
                    distribution: dist,
                    score: Some(score),
                })
            }
            Err(Error::NoData(msg)) => {
                log::warn!("{msg}");
                None
            }
            Err(e) => return Err(e),
        };
        let scored: Vec<f64> = aware
            .iter()
            .filter_map(|d| d.score.as_ref().map(|s| s.severity))
            .collect();
        let context_aware_mean =
            (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        biases.push(BiasReport {
            bias: bias.to_string(),
            classes: class_list,
            counted: aware.iter().map(|d| d.distribution.counted).sum(),
            unknown_count: aware.iter().map(|d| d.distribution.unknown_count).sum(),
            context_free,
            context_aware_mean,
            context_aware: aware,
        });
    }

    let distinct = |f: fn(&AssessmentRecord) -> &str| -> Vec<String> {
        records
            .iter()
            .map(f)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect()
    };
    Ok(QuantifyReport {
        generators: distinct(|r| &r.generator),
        vqa_models: distinct(|r| &r.vqa),
        biases,
    })
}
