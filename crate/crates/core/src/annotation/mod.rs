//! Phrase-instance annotated descriptions: the tagged-text interchange
//! format, record/scene files, dataset statistics, and subset logic.

mod parse;
mod record;

pub use parse::{parse_tagged_text, serialize_tagged_text, tokenize, ParseError};
pub use record::{
    load_dataset, load_records, load_scene, load_scene_dir, save_records, save_scene,
    DatasetError, DatasetViolation, RecordLine, SceneMap,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Descriptions with more than this many tokens count as "long".
pub const LONG_TOKEN_THRESHOLD: usize = 50;
/// Descriptions with at least this many phrase targets count as "complex".
pub const COMPLEX_PHRASE_THRESHOLD: usize = 4;

/// One phrase to segment: a token span, its head token, and the instance
/// IDs it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseTarget {
    /// Inclusive token index range `[start, end]`.
    pub span: (usize, usize),
    /// Token position used to pick the query row; the last token of the span.
    pub head_index: usize,
    pub target_ids: BTreeSet<u32>,
    /// Sentence-level sentinel: the span covers the whole sentence and the
    /// mask comes from the [CLS] query row.
    pub is_sentence_level: bool,
}

impl PhraseTarget {
    pub fn new(span: (usize, usize), target_ids: BTreeSet<u32>) -> Self {
        Self {
            span,
            head_index: span.1,
            target_ids,
            is_sentence_level: false,
        }
    }

    /// The whole-sentence sentinel used by joint-training records.
    pub fn sentence_level(num_tokens: usize, target_ids: BTreeSet<u32>) -> Self {
        let end = num_tokens.saturating_sub(1);
        Self {
            span: (0, end),
            head_index: end,
            target_ids,
            is_sentence_level: true,
        }
    }
}

/// A tokenized description with its phrase targets.
///
/// Inline phrases are ordered by span start and non-overlapping; an optional
/// sentence-level sentinel sits last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDescription {
    pub description_id: String,
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub phrases: Vec<PhraseTarget>,
}

impl AnnotatedDescription {
    /// Number of tokens (`L`).
    pub fn token_len(&self) -> usize {
        self.tokens.len()
    }

    /// Number of phrase targets (`k`), sentence sentinel included.
    pub fn phrase_count(&self) -> usize {
        self.phrases.len()
    }

    pub fn inline_phrases(&self) -> impl Iterator<Item = &PhraseTarget> {
        self.phrases.iter().filter(|p| !p.is_sentence_level)
    }

    pub fn sentence_phrase(&self) -> Option<&PhraseTarget> {
        self.phrases.iter().find(|p| p.is_sentence_level)
    }

    /// Check the description invariants; returns human-readable violations.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let len = self.token_len();
        if len == 0 {
            out.push("description has no tokens".into());
        }
        if self.phrases.is_empty() {
            out.push("description has no phrase targets".into());
        }
        let mut prev_end: Option<usize> = None;
        for (i, phrase) in self.phrases.iter().enumerate() {
            let (start, end) = phrase.span;
            if start > end || end >= len {
                out.push(format!("phrase {i} span [{start}, {end}] outside [0, {len})"));
                continue;
            }
            if !(start..=end).contains(&phrase.head_index) {
                out.push(format!(
                    "phrase {i} head index {} outside its span [{start}, {end}]",
                    phrase.head_index
                ));
            }
            if phrase.target_ids.is_empty() {
                out.push(format!("phrase {i} has an empty target id set"));
            }
            if !phrase.is_sentence_level {
                if let Some(prev) = prev_end {
                    if start <= prev {
                        out.push(format!("phrase {i} overlaps or precedes the previous phrase"));
                    }
                }
                prev_end = Some(end);
            }
        }
        out
    }
}

/// Whether a description counts as long (strictly more than 50 tokens).
pub fn is_long(desc: &AnnotatedDescription) -> bool {
    desc.token_len() > LONG_TOKEN_THRESHOLD
}

/// Whether a description counts as complex (four or more phrase targets).
pub fn is_complex(desc: &AnnotatedDescription) -> bool {
    desc.phrase_count() >= COMPLEX_PHRASE_THRESHOLD
}

/// Index sets of the evaluation subsets. Long and complex may overlap; both
/// are contained in overall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetSplit {
    pub overall: Vec<usize>,
    pub long: Vec<usize>,
    pub complex: Vec<usize>,
}

pub fn split_subsets(descs: &[AnnotatedDescription]) -> SubsetSplit {
    let overall = (0..descs.len()).collect();
    let long = descs
        .iter()
        .enumerate()
        .filter(|(_, d)| is_long(d))
        .map(|(i, _)| i)
        .collect();
    let complex = descs
        .iter()
        .enumerate()
        .filter(|(_, d)| is_complex(d))
        .map(|(i, _)| i)
        .collect();
    SubsetSplit {
        overall,
        long,
        complex,
    }
}

/// Dataset-level summary in the shape of the standard comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_descriptions: usize,
    pub avg_token_length: f64,
    /// Share of descriptions with more than 50 tokens.
    pub long_fraction: f64,
    /// Mean number of phrase targets per description.
    pub avg_masks_per_text: f64,
    /// Distinct (scene, instance) pairs referenced by any phrase.
    pub num_distinct_objects: usize,
    /// Phrase counts keyed by head token.
    pub per_category_phrase_counts: BTreeMap<String, usize>,
}

/// Exact corpus statistics over a non-empty description list.
pub fn dataset_stats(descs: &[AnnotatedDescription]) -> Result<DatasetSummary, DatasetError> {
    if descs.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let n = descs.len();
    let total_tokens: usize = descs.iter().map(AnnotatedDescription::token_len).sum();
    let total_masks: usize = descs.iter().map(AnnotatedDescription::phrase_count).sum();
    let long = descs.iter().filter(|d| is_long(d)).count();

    let mut objects: BTreeSet<(String, u32)> = BTreeSet::new();
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    for desc in descs {
        for phrase in &desc.phrases {
            for &id in &phrase.target_ids {
                objects.insert((desc.scene_id.clone(), id));
            }
            if let Some(head) = desc.tokens.get(phrase.head_index) {
                *per_category.entry(head.clone()).or_insert(0) += 1;
            }
        }
    }

    Ok(DatasetSummary {
        num_descriptions: n,
        avg_token_length: total_tokens as f64 / n as f64,
        long_fraction: long as f64 / n as f64,
        avg_masks_per_text: total_masks as f64 / n as f64,
        num_distinct_objects: objects.len(),
        per_category_phrase_counts: per_category,
    })
}

/// Render the summary as an aligned single-row table.
pub fn summary_table(summary: &DatasetSummary) -> String {
    let mut out = String::new();
    out.push_str("Avg. length  Long     Avg. mask  Num      Objects\n");
    out.push_str(&format!(
        "{:<12.1} {:<8} {:<10.1} {:<8} {}\n",
        summary.avg_token_length,
        format!("{:.1}%", summary.long_fraction * 100.0),
        summary.avg_masks_per_text,
        summary.num_descriptions,
        summary.num_distinct_objects,
    ));
    out
}
