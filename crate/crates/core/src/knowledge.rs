//! Bias knowledge base: per-caption proposals aggregated into dataset-level
//! records, then merged by class overlap and pruned by caption support.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::text::normalize_label;

/// Default overlap coefficient at which two biases are merged.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.75;
/// Default minimum number of distinct captions a bias must keep.
pub const DEFAULT_MIN_SUPPORT: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

impl Caption {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Self {
        Caption {
            id: id.into(),
            text: text.into(),
            source: source.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("caption id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("caption {} has empty text", self.id));
        }
        Ok(())
    }
}

/// Checks a corpus for empty captions and duplicate ids.
pub fn validate_corpus(captions: &[Caption]) -> Result<(), String> {
    let mut seen = HashSet::new();
    for caption in captions {
        caption.validate()?;
        if !seen.insert(caption.id.as_str()) {
            return Err(format!("duplicate caption id {}", caption.id));
        }
    }
    Ok(())
}

/// One (bias, classes, question) triplet proposed for a caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasProposal {
    pub caption_id: String,
    pub bias_name: String,
    pub classes: Vec<String>,
    pub question: String,
    pub present_in_prompt: bool,
}

impl BiasProposal {
    /// Normalizes and validates a raw triplet.
    ///
    /// The bias name and class labels are case-folded with whitespace
    /// collapsed; duplicate classes are dropped keeping first occurrence.
    /// The question is trimmed and gets a trailing `?` if it lacks one.
    pub fn new(
        caption_id: impl Into<String>,
        bias_name: &str,
        classes: &[impl AsRef<str>],
        question: &str,
        present_in_prompt: bool,
    ) -> Result<Self, String> {
        let bias_name = normalize_label(bias_name);
        if bias_name.is_empty() {
            return Err("bias name is empty".into());
        }
        let mut seen = HashSet::new();
        let classes: Vec<String> = classes
            .iter()
            .map(|c| normalize_label(c.as_ref()))
            .filter(|c| !c.is_empty() && seen.insert(c.clone()))
            .collect();
        if classes.len() < 2 {
            return Err(format!(
                "bias {bias_name:?} has {} distinct class(es), need at least 2",
                classes.len()
            ));
        }
        let question = normalize_question(question)
            .ok_or_else(|| format!("bias {bias_name:?} has an empty question"))?;
        Ok(BiasProposal {
            caption_id: caption_id.into(),
            bias_name,
            classes,
            question,
            present_in_prompt,
        })
    }
}

fn normalize_question(raw: &str) -> Option<String> {
    let q = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if q.is_empty() || q == "?" {
        return None;
    }
    if q.ends_with('?') {
        Some(q)
    } else {
        Some(format!("{q}?"))
    }
}

/// A caption/question pair supporting a bias.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptionQuestion {
    pub caption_id: String,
    pub question: String,
    /// The proposing LLM reported the answer as already present in the caption.
    #[serde(default, skip_serializing_if = "is_false")]
    pub present_in_prompt: bool,
    /// Stage-1 filtering could not obtain a verdict for this pair.
    #[serde(default, skip_serializing_if = "is_false")]
    pub unverified: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasRecord {
    #[serde(rename = "bias")]
    pub name: String,
    pub classes: BTreeSet<String>,
    pub pairs: Vec<CaptionQuestion>,
}

impl BiasRecord {
    pub fn caption_set(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.caption_id.as_str()).collect()
    }

    /// Number of distinct captions backing the bias.
    pub fn support(&self) -> usize {
        self.caption_set().len()
    }

    pub fn class_list(&self) -> Vec<String> {
        self.classes.iter().cloned().collect()
    }

    fn canonicalize(&mut self) {
        self.pairs.sort();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub corpus: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub built_at: Option<String>,
    /// Role -> model identifier of every backend that touched the knowledge base.
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "KnowledgeBaseDoc", into = "KnowledgeBaseDoc")]
pub struct KnowledgeBase {
    pub records: BTreeMap<String, BiasRecord>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeBaseDoc {
    records: Vec<BiasRecord>,
    #[serde(default)]
    provenance: Provenance,
}

impl From<KnowledgeBaseDoc> for KnowledgeBase {
    fn from(doc: KnowledgeBaseDoc) -> Self {
        KnowledgeBase {
            records: doc
                .records
                .into_iter()
                .map(|mut r| {
                    r.canonicalize();
                    (r.name.clone(), r)
                })
                .collect(),
            provenance: doc.provenance,
        }
    }
}

impl From<KnowledgeBase> for KnowledgeBaseDoc {
    fn from(kb: KnowledgeBase) -> Self {
        KnowledgeBaseDoc {
            records: kb.records.into_values().collect(),
            provenance: kb.provenance,
        }
    }
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, bias: &str) -> Option<&BiasRecord> {
        self.records.get(bias)
    }

    /// Total number of caption/question pairs across all records.
    pub fn pair_count(&self) -> usize {
        self.records.values().map(|r| r.pairs.len()).sum()
    }
}

/// Builds one record per bias name from a stream of per-caption proposals.
///
/// Repeated (caption, bias) proposals keep the first question seen.
pub fn aggregate<I>(proposals: I) -> KnowledgeBase
where
    I: IntoIterator<Item = BiasProposal>,
{
    let mut records: BTreeMap<String, BiasRecord> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for proposal in proposals {
        let record = records
            .entry(proposal.bias_name.clone())
            .or_insert_with(|| BiasRecord {
                name: proposal.bias_name.clone(),
                classes: BTreeSet::new(),
                pairs: Vec::new(),
            });
        record.classes.extend(proposal.classes.iter().cloned());
        if seen.insert((proposal.caption_id.clone(), proposal.bias_name.clone())) {
            record.pairs.push(CaptionQuestion {
                caption_id: proposal.caption_id,
                question: proposal.question,
                present_in_prompt: proposal.present_in_prompt,
                unverified: false,
            });
        }
    }
    for record in records.values_mut() {
        record.canonicalize();
    }
    KnowledgeBase {
        records,
        provenance: Provenance::default(),
    }
}

/// |A ∩ B| / min(|A|, |B|); zero when either set is empty.
pub fn overlap_coefficient(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let smaller = a.len().min(b.len());
    if smaller == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / smaller as f64
}

/// Greedily merges records whose class sets overlap by at least `threshold`.
///
/// Records are visited in descending support order (ties by name); the first
/// qualifying pair is merged into the higher-ranked record and the scan
/// restarts, so the result has no remaining pair at or above the threshold.
pub fn merge_similar(kb: KnowledgeBase, threshold: f64) -> KnowledgeBase {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "overlap threshold must lie in (0, 1], got {threshold}"
    );
    let KnowledgeBase {
        records,
        provenance,
    } = kb;
    let mut alive: Vec<BiasRecord> = records.into_values().collect();
    loop {
        alive.sort_by(|a, b| b.support().cmp(&a.support()).then(a.name.cmp(&b.name)));
        let hit = (0..alive.len()).find_map(|i| {
            (i + 1..alive.len())
                .find(|&j| overlap_coefficient(&alive[i].classes, &alive[j].classes) >= threshold)
                .map(|j| (i, j))
        });
        let Some((i, j)) = hit else { break };
        let absorbed = alive.remove(j);
        absorb(&mut alive[i], absorbed);
    }
    KnowledgeBase {
        records: alive.into_iter().map(|r| (r.name.clone(), r)).collect(),
        provenance,
    }
}

fn absorb(survivor: &mut BiasRecord, absorbed: BiasRecord) {
    survivor.classes.extend(absorbed.classes);
    let mut captions: HashSet<String> = survivor
        .pairs
        .iter()
        .map(|p| p.caption_id.clone())
        .collect();
    for pair in absorbed.pairs {
        if captions.insert(pair.caption_id.clone()) {
            survivor.pairs.push(pair);
        }
    }
    survivor.canonicalize();
}

/// Drops records backed by fewer than `min_support` distinct captions.
pub fn prune_support(mut kb: KnowledgeBase, min_support: usize) -> KnowledgeBase {
    assert!(min_support >= 1, "min_support must be at least 1");
    kb.records.retain(|_, r| r.support() >= min_support);
    kb
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn proposal(caption: &str, bias: &str, classes: &[&str]) -> BiasProposal {
        BiasProposal::new(caption, bias, classes, &format!("what {bias}"), false).unwrap()
    }

    fn record(name: &str, classes: &[&str], captions: std::ops::Range<usize>) -> BiasRecord {
        BiasRecord {
            name: name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            pairs: captions
                .map(|i| CaptionQuestion {
                    caption_id: format!("{name}-c{i:03}"),
                    question: format!("q {name}?"),
                    present_in_prompt: false,
                    unverified: false,
                })
                .collect(),
        }
    }

    fn kb_of(records: Vec<BiasRecord>) -> KnowledgeBase {
        KnowledgeBase {
            records: records.into_iter().map(|r| (r.name.clone(), r)).collect(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn proposal_requires_two_distinct_classes() {
        assert!(BiasProposal::new("c", "x", &["A", "a "], "q", false).is_err());
        let ok = BiasProposal::new(
            "c",
            " Person  Gender",
            &["Male", "female", "MALE"],
            "Who ",
            true,
        )
        .unwrap();
        assert_eq!(ok.bias_name, "person gender");
        assert_eq!(ok.classes, vec!["male", "female"]);
        assert_eq!(ok.question, "Who?");
        assert!(BiasProposal::new("c", "x", &["a", "b"], "  ", false).is_err());
    }

    #[test]
    fn aggregate_two_captions_same_bias() {
        let kb = aggregate(vec![
            proposal("c1", "person gender", &["male", "female"]),
            proposal("c2", "person gender", &["male", "female"]),
        ]);
        assert_eq!(kb.len(), 1);
        let r = kb.get("person gender").unwrap();
        assert_eq!(r.support(), 2);
        assert_eq!(r.class_list(), vec!["female", "male"]);
    }

    #[test]
    fn aggregate_unions_classes() {
        let kb = aggregate(vec![
            proposal("c1", "person gender", &["male", "female"]),
            proposal("c2", "person gender", &["male", "female", "non-binary"]),
        ]);
        let r = kb.get("person gender").unwrap();
        assert_eq!(r.classes.len(), 3);
        assert_eq!(r.support(), 2);
    }

    #[test]
    fn aggregate_empty_stream() {
        assert!(aggregate(Vec::new()).is_empty());
    }

    #[test]
    fn aggregate_keeps_first_question_for_duplicates() {
        let a = BiasProposal::new("c1", "age", &["young", "old"], "first", false).unwrap();
        let b = BiasProposal::new("c1", "age", &["young", "old"], "second", false).unwrap();
        let kb = aggregate(vec![a, b]);
        let r = kb.get("age").unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].question, "first?");
    }

    #[test]
    fn merge_subset_into_larger_support() {
        let kb = kb_of(vec![
            record("a", &["a", "b", "c", "d"], 0..40),
            record("b", &["a", "b", "c"], 0..10),
        ]);
        // overlap = 3 / min(4, 3) = 1.0
        let merged = merge_similar(kb, 0.75);
        assert_eq!(merged.len(), 1);
        let r = merged.get("a").unwrap();
        assert_eq!(r.class_list(), vec!["a", "b", "c", "d"]);
        assert_eq!(r.support(), 50);
    }

    #[test]
    fn merge_leaves_disjoint_records() {
        let kb = kb_of(vec![
            record("a", &["a", "b"], 0..5),
            record("b", &["c", "d"], 0..5),
        ]);
        assert_eq!(merge_similar(kb.clone(), 0.75), kb);
    }

    #[test]
    fn merge_respects_strict_threshold() {
        let kb = kb_of(vec![
            record("a", &["a", "b", "c", "d"], 0..5),
            record("b", &["a", "b", "c", "e"], 0..5),
        ]);
        // overlap 3/4 = 0.75 < 1.0
        assert_eq!(merge_similar(kb.clone(), 1.0).len(), 2);
        assert_eq!(merge_similar(kb, 0.75).len(), 1);
    }

    #[test]
    fn merge_tie_breaks_by_name() {
        let kb = kb_of(vec![
            record("zeta", &["a", "b"], 0..5),
            record("alpha", &["a", "b"], 0..5),
        ]);
        let merged = merge_similar(kb, 0.75);
        assert!(merged.get("alpha").is_some());
        assert_eq!(merged.get("alpha").unwrap().support(), 10);
    }

    #[test]
    fn prune_boundary_is_inclusive() {
        let kb = kb_of(vec![
            record("keep", &["a", "b"], 0..30),
            record("drop", &["c", "d"], 0..29),
        ]);
        let pruned = prune_support(kb.clone(), DEFAULT_MIN_SUPPORT);
        assert!(pruned.get("keep").is_some());
        assert!(pruned.get("drop").is_none());
        assert_eq!(prune_support(kb.clone(), 1), kb);
    }

    #[test]
    fn json_round_trip_is_stable() {
        let kb = aggregate(vec![
            proposal("c2", "person gender", &["male", "female"]),
            proposal("c1", "person age", &["young", "old"]),
        ]);
        let text = serde_json::to_string(&kb).unwrap();
        let back: KnowledgeBase = serde_json::from_str(&text).unwrap();
        assert_eq!(back, kb);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert!(text.starts_with(r#"{"records":[{"bias":"person age""#));
    }

    fn arb_kb() -> impl Strategy<Value = KnowledgeBase> {
        let classes = proptest::collection::btree_set(0u8..8, 2..5);
        let rec = (classes, 1usize..20, 0usize..40);
        proptest::collection::vec(rec, 0..8).prop_map(|recs| {
            kb_of(
                recs.into_iter()
                    .enumerate()
                    .map(|(i, (cls, n, offset))| {
                        let labels: Vec<String> = cls.iter().map(|c| format!("k{c}")).collect();
                        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                        let mut r = record(&format!("bias{i}"), &refs, offset..offset + n);
                        for p in &mut r.pairs {
                            p.caption_id = p.caption_id.replace(&format!("bias{i}-"), "");
                        }
                        r
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn aggregate_is_order_insensitive(
            items in proptest::collection::vec((0u8..6, 0u8..4, proptest::collection::btree_set(0u8..5, 2..4)), 0..30),
            seed in any::<u64>()
        ) {
            let proposals: Vec<BiasProposal> = items.iter().map(|(c, b, cls)| {
                let classes: Vec<String> = cls.iter().map(|k| format!("k{k}")).collect();
                BiasProposal::new(format!("c{c}"), &format!("b{b}"), &classes, "q", false).unwrap()
            }).collect();
            let mut shuffled = proposals.clone();
            let n = shuffled.len();
            if n > 1 {
                let mut s = seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
            }
            let a = aggregate(proposals);
            let b = aggregate(shuffled);
            prop_assert_eq!(a.records.len(), b.records.len());
            for (name, ra) in &a.records {
                let rb = &b.records[name];
                prop_assert_eq!(ra.support(), rb.support());
                prop_assert_eq!(&ra.classes, &rb.classes);
            }
        }

        #[test]
        fn merge_is_idempotent(kb in arb_kb(), thr in 0.3f64..=1.0) {
            let once = merge_similar(kb, thr);
            let twice = merge_similar(once.clone(), thr);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn merge_then_prune_respects_min_support(kb in arb_kb(), min in 1usize..30) {
            let out = prune_support(merge_similar(kb, 0.75), min);
            for r in out.records.values() {
                prop_assert!(r.support() >= min);
                prop_assert!(r.caption_set().len() <= r.pairs.len());
            }
        }
    }
}
