//! Template-grammar prompt corpora: exhaustive expansion, diversity
//! subsampling, corpus statistics and subject-prompt pairing.
//!
//! Grammar files are plain text with three section kinds:
//!
//! ```text
//! [rule]
//! id = riding_vehicle_space
//! pattern = riding a [vehicle] near [space loc.]
//! predicate = riding
//! objects = vehicle, space loc.      # defaults to every slot
//! relations = vehicle                # slots the predicate links to the person
//!
//! [vocab:vehicle]
//! skateboard
//! boat
//!
//! [theme:vehicle]
//! vehicle
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite};
use crate::data::{AnnotatedTriplet, ManifestHeader, ManifestLine, PromptRecord, TemplateTrace, SCHEMA_VERSION};
use crate::vector;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("grammar line {line}: {message}")]
    GrammarParse { line: usize, message: String },
    #[error("rule {rule}: slot [{slot}] has no vocabulary")]
    MissingVocabulary { rule: String, slot: String },
    #[error("rule {rule}: {message}")]
    InvalidRule { rule: String, message: String },
    #[error("vocabulary [{slot}]: {message}")]
    InvalidVocabulary { slot: String, message: String },
    #[error("cannot select {k} points from {available} candidates")]
    NotEnoughCandidates { k: usize, available: usize },
    #[error("candidate {index} is not length-normalized (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },
    #[error("dimension mismatch: candidates have {candidates}, reference has {reference}")]
    Dimension { candidates: usize, reference: usize },
    #[error("start index {0} is not a surviving candidate")]
    BadStart(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{subjects} subjects x {per_subject} prompts != {prompts} prompts")]
    SizeMismatch {
        subjects: usize,
        per_subject: usize,
        prompts: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternPart {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductionRule {
    pub rule_id: String,
    pub pattern: Vec<PatternPart>,
    pub predicate: String,
    /// Slots whose fillers become referenced objects.
    pub annotated_slots: Vec<String>,
    /// Slots related to the person through `predicate`.
    pub relation_slots: Vec<String>,
}

impl ProductionRule {
    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pattern.iter().filter_map(|p| match p {
            PatternPart::Slot(s) => Some(s.as_str()),
            PatternPart::Literal(_) => None,
        })
    }
}

/// Splits `riding a [vehicle] near [space loc.]` into literals and slots.
pub fn parse_pattern(pattern: &str) -> Result<Vec<PatternPart>, String> {
    let mut parts = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('[') {
        if open > 0 {
            parts.push(PatternPart::Literal(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find(']')
            .ok_or_else(|| format!("unclosed slot in {pattern:?}"))?
            + open;
        let name = rest[open + 1..close].trim();
        if name.is_empty() {
            return Err("empty slot name".into());
        }
        parts.push(PatternPart::Slot(name.to_string()));
        rest = &rest[close + 1..];
    }
    if rest.contains(']') {
        return Err(format!("stray ']' in {pattern:?}"));
    }
    if !rest.is_empty() {
        parts.push(PatternPart::Literal(rest.to_string()));
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TemplateGrammar {
    pub rules: Vec<ProductionRule>,
    pub vocabularies: BTreeMap<String, Vec<String>>,
    pub themes: BTreeMap<String, String>,
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl TemplateGrammar {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        enum Section {
            None,
            Rule(BTreeMap<String, String>, usize),
            Vocab(String),
            Theme(String),
        }
        let mut grammar = TemplateGrammar::default();
        let mut section = Section::None;
        let mut pending_rules: Vec<(BTreeMap<String, String>, usize)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PromptError::GrammarParse { line: line_no, message };
            if line.starts_with('[') && line.ends_with(']') && !line.contains('=') {
                if let Section::Rule(fields, at) = std::mem::replace(&mut section, Section::None) {
                    pending_rules.push((fields, at));
                }
                let header = &line[1..line.len() - 1];
                section = match header.split_once(':') {
                    None if header.trim() == "rule" => Section::Rule(BTreeMap::new(), line_no),
                    Some((kind, slot)) if kind.trim() == "vocab" => {
                        let slot = slot.trim().to_string();
                        if grammar.vocabularies.contains_key(&slot) {
                            return Err(err(format!("vocabulary [{slot}] declared twice")));
                        }
                        grammar.vocabularies.insert(slot.clone(), Vec::new());
                        Section::Vocab(slot)
                    }
                    Some((kind, slot)) if kind.trim() == "theme" => Section::Theme(slot.trim().to_string()),
                    _ => return Err(err(format!("unknown section [{header}]"))),
                };
                continue;
            }
            match &mut section {
                Section::None => return Err(err("content outside any section".into())),
                Section::Rule(fields, _) => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
                    fields.insert(k.trim().to_string(), v.trim().to_string());
                }
                Section::Vocab(slot) => {
                    grammar.vocabularies.get_mut(slot.as_str()).unwrap().push(line.to_string());
                }
                Section::Theme(slot) => {
                    if grammar.themes.insert(slot.clone(), line.to_string()).is_some() {
                        return Err(err(format!("theme for [{slot}] given twice")));
                    }
                }
            }
        }
        if let Section::Rule(fields, at) = section {
            pending_rules.push((fields, at));
        }

        for (fields, at) in pending_rules {
            let err = |message: String| PromptError::GrammarParse { line: at, message };
            let get = |k: &str| fields.get(k).cloned().ok_or_else(|| err(format!("rule missing `{k}`")));
            let rule_id = get("id")?;
            let pattern = parse_pattern(&get("pattern")?).map_err(err)?;
            let predicate = get("predicate")?;
            let slots: Vec<String> = pattern
                .iter()
                .filter_map(|p| match p {
                    PatternPart::Slot(s) => Some(s.clone()),
                    _ => None,
                })
                .collect();
            let annotated_slots = fields.get("objects").map(|v| split_list(v)).unwrap_or_else(|| slots.clone());
            let relation_slots = fields.get("relations").map(|v| split_list(v)).unwrap_or_default();
            if let Some(unknown) = fields
                .keys()
                .find(|k| !["id", "pattern", "predicate", "objects", "relations"].contains(&k.as_str()))
            {
                return Err(err(format!("unknown rule key `{unknown}`")));
            }
            grammar.rules.push(ProductionRule {
                rule_id,
                pattern,
                predicate,
                annotated_slots,
                relation_slots,
            });
        }
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let mut ids = BTreeSet::new();
        for rule in &self.rules {
            let invalid = |message: String| PromptError::InvalidRule {
                rule: rule.rule_id.clone(),
                message,
            };
            if !ids.insert(rule.rule_id.as_str()) {
                return Err(invalid("duplicate rule id".into()));
            }
            if rule.predicate.trim().is_empty() {
                return Err(invalid("empty predicate".into()));
            }
            let slots: Vec<&str> = rule.slots().collect();
            if slots.is_empty() {
                return Err(invalid("pattern has no slot".into()));
            }
            let unique: BTreeSet<&str> = slots.iter().copied().collect();
            if unique.len() != slots.len() {
                return Err(invalid("a slot appears twice in the pattern".into()));
            }
            for s in &slots {
                if !self.vocabularies.contains_key(*s) {
                    return Err(PromptError::MissingVocabulary {
                        rule: rule.rule_id.clone(),
                        slot: s.to_string(),
                    });
                }
            }
            for s in &rule.annotated_slots {
                if !unique.contains(s.as_str()) {
                    return Err(invalid(format!("object slot [{s}] not in pattern")));
                }
            }
            for s in &rule.relation_slots {
                if !rule.annotated_slots.contains(s) {
                    return Err(invalid(format!("relation slot [{s}] is not an object slot")));
                }
            }
        }
        for (slot, words) in &self.vocabularies {
            if words.is_empty() {
                return Err(PromptError::InvalidVocabulary {
                    slot: slot.clone(),
                    message: "empty".into(),
                });
            }
            let unique: BTreeSet<&String> = words.iter().collect();
            if unique.len() != words.len() {
                return Err(PromptError::InvalidVocabulary {
                    slot: slot.clone(),
                    message: "duplicate filler".into(),
                });
            }
        }
        Ok(())
    }

    /// Number of prompts [`expand_grammar`] will produce.
    pub fn expansion_count(&self) -> u128 {
        self.rules
            .iter()
            .map(|r| r.slots().map(|s| self.vocabularies[s].len() as u128).product::<u128>())
            .sum()
    }

    pub fn theme_registry(&self) -> Vec<String> {
        self.themes.values().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// One expanded prompt with its implicit annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPrompt {
    pub text: String,
    pub trace: TemplateTrace,
    pub referenced_objects: Vec<String>,
    pub annotated_triplets: Vec<AnnotatedTriplet>,
    pub themes: Vec<String>,
}

impl GeneratedPrompt {
    pub fn into_record(self, prompt_id: String) -> PromptRecord {
        PromptRecord {
            prompt_id,
            text: self.text,
            referenced_objects: self.referenced_objects,
            annotated_triplets: self.annotated_triplets,
            themes: self.themes,
            template_trace: Some(self.trace),
        }
    }
}

fn instantiate(grammar: &TemplateGrammar, rule: &ProductionRule, choice: &[usize]) -> GeneratedPrompt {
    let slots: Vec<&str> = rule.slots().collect();
    let fillers: BTreeMap<&str, &str> = slots
        .iter()
        .zip(choice)
        .map(|(s, &i)| (*s, grammar.vocabularies[*s][i].as_str()))
        .collect();
    let mut text = String::new();
    for part in &rule.pattern {
        match part {
            PatternPart::Literal(l) => text.push_str(l),
            PatternPart::Slot(s) => text.push_str(fillers[s.as_str()]),
        }
    }
    let mut referenced_objects: Vec<String> = Vec::new();
    for s in slots.iter().filter(|s| rule.annotated_slots.iter().any(|a| a == *s)) {
        let f = fillers[s].to_string();
        if !referenced_objects.contains(&f) {
            referenced_objects.push(f);
        }
    }
    let mut annotated_triplets: Vec<AnnotatedTriplet> = Vec::new();
    for s in slots.iter().filter(|s| rule.relation_slots.iter().any(|a| a == *s)) {
        let t = AnnotatedTriplet::human(rule.predicate.clone(), fillers[s]);
        if !annotated_triplets.contains(&t) {
            annotated_triplets.push(t);
        }
    }
    let mut themes: Vec<String> = Vec::new();
    for s in &slots {
        if let Some(t) = grammar.themes.get(*s) {
            if !themes.contains(t) {
                themes.push(t.clone());
            }
        }
    }
    GeneratedPrompt {
        text: text.trim().to_string(),
        trace: TemplateTrace {
            rule_id: rule.rule_id.clone(),
            fillers: slots
                .iter()
                .map(|s| (s.to_string(), fillers[s].to_string()))
                .collect(),
        },
        referenced_objects,
        annotated_triplets,
        themes,
    }
}

/// Every prompt every rule can produce, rules in order, slots varying
/// odometer-style with the last slot fastest.
pub fn expand_grammar(grammar: &TemplateGrammar) -> Result<Vec<GeneratedPrompt>, PromptError> {
    grammar.validate()?;
    let mut out = Vec::with_capacity(grammar.expansion_count().min(1 << 24) as usize);
    for rule in &grammar.rules {
        let sizes: Vec<usize> = rule.slots().map(|s| grammar.vocabularies[s].len()).collect();
        let mut choice = vec![0usize; sizes.len()];
        loop {
            out.push(instantiate(grammar, rule, &choice));
            let mut pos = sizes.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                choice[pos] += 1;
                if choice[pos] < sizes[pos] {
                    break;
                }
                choice[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if pos == usize::MAX {
                break;
            }
        }
    }
    Ok(out)
}

/// Manifest text holding a header and one prompt line per record.
pub fn prompts_to_manifest(records: &[PromptRecord], themes: Vec<String>) -> String {
    let mut lines = vec![ManifestLine::Header(ManifestHeader {
        schema_version: SCHEMA_VERSION,
        attribute_names: Vec::new(),
        themes,
    })];
    lines.extend(records.iter().cloned().map(ManifestLine::Prompt));
    crate::data::write_lines(&lines)
}

// ---------------------------------------------------------------------------
// Farthest-point sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsStart {
    /// Surviving candidate closest to the survivors' centroid.
    Centroid,
    /// Uniformly drawn survivor.
    Seeded(u64),
    /// Explicit candidate index.
    Index(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ProximityFilter<'a> {
    pub reference: ArrayView2<'a, f64>,
    /// Largest admissible cosine distance to the nearest reference row.
    pub max_distance: f64,
}

const UNIT_TOL: f64 = 1e-6;

pub fn cosine_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    1.0 - a.dot(&b)
}

fn check_normalized(rows: ArrayView2<'_, f64>) -> Result<(), PromptError> {
    for (index, row) in rows.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(PromptError::NotNormalized { index, norm });
        }
    }
    Ok(())
}

/// Candidate indices kept by the proximity filter, in index order.
pub fn proximity_survivors(
    candidates: ArrayView2<'_, f64>,
    filter: Option<&ProximityFilter<'_>>,
) -> Result<Vec<usize>, PromptError> {
    let Some(filter) = filter else {
        return Ok((0..candidates.nrows()).collect());
    };
    if filter.reference.ncols() != candidates.ncols() {
        return Err(PromptError::Dimension {
            candidates: candidates.ncols(),
            reference: filter.reference.ncols(),
        });
    }
    check_normalized(filter.reference)?;
    Ok(candidates
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, c)| {
            filter
                .reference
                .axis_iter(Axis(0))
                .map(|r| cosine_distance(c.view(), r))
                .fold(f64::INFINITY, f64::min)
                <= filter.max_distance
        })
        .map(|(i, _)| i)
        .collect())
}

fn centroid_start(candidates: ArrayView2<'_, f64>, survivors: &[usize]) -> usize {
    let d = candidates.ncols();
    let mut centroid = vec![0.0; d];
    for &i in survivors {
        for (c, x) in centroid.iter_mut().zip(candidates.row(i)) {
            *c += x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= survivors.len() as f64;
    }
    let mut best = (f64::INFINITY, survivors[0]);
    for &i in survivors {
        let dist: f64 = candidates
            .row(i)
            .iter()
            .zip(&centroid)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best.0 {
            best = (dist, i);
        }
    }
    best.1
}

/// Greedy maximin subset of `k` length-normalized candidates under cosine
/// distance. Ties go to the lowest index. `workers > 1` parallelizes the
/// per-step distance update; the result does not depend on it.
pub fn farthest_point_sample(
    candidates: ArrayView2<'_, f64>,
    k: usize,
    start: FpsStart,
    filter: Option<&ProximityFilter<'_>>,
    workers: usize,
) -> Result<Vec<usize>, PromptError> {
    check_normalized(candidates)?;
    let survivors = proximity_survivors(candidates, filter)?;
    if k > survivors.len() {
        return Err(PromptError::NotEnoughCandidates {
            k,
            available: survivors.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first = match start {
        FpsStart::Centroid => centroid_start(candidates, &survivors),
        FpsStart::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            survivors[rng.gen_range(0..survivors.len())]
        }
        FpsStart::Index(i) => {
            if survivors.binary_search(&i).is_err() {
                return Err(PromptError::BadStart(i));
            }
            i
        }
    };

    let run = || {
        let mut selected = Vec::with_capacity(k);
        let mut taken = vec![false; survivors.len()];
        let mut min_dist = vec![f64::INFINITY; survivors.len()];
        let mut current = first;
        loop {
            let pos = survivors.binary_search(&current).expect("current is a survivor");
            taken[pos] = true;
            selected.push(current);
            if selected.len() == k {
                break;
            }
            let point = candidates.row(current);
            let update = |(slot, &idx): (&mut f64, &usize)| {
                let d = cosine_distance(point, candidates.row(idx));
                if d < *slot {
                    *slot = d;
                }
            };
            if workers > 1 {
                min_dist.par_iter_mut().zip(survivors.par_iter()).for_each(update);
            } else {
                min_dist.iter_mut().zip(survivors.iter()).for_each(update);
            }
            let mut best: Option<(f64, usize)> = None;
            for (p, &idx) in survivors.iter().enumerate() {
                if taken[p] {
                    continue;
                }
                if best.is_none_or(|(d, _)| min_dist[p] > d) {
                    best = Some((min_dist[p], idx));
                }
            }
            current = best.expect("k <= survivors").1;
        }
        selected
    };

    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| PromptError::ThreadPool(e.to_string()))?;
        Ok(pool.install(run))
    } else {
        Ok(run())
    }
}

/// Row-stacks length-normalized embeddings.
pub fn embedding_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>, PromptError> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut flat = Vec::with_capacity(rows.len() * d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(PromptError::Dimension {
                candidates: d,
                reference: r.len(),
            });
        }
        let n = vector::normalized(r).ok_or(PromptError::NotNormalized { index: i, norm: 0.0 })?;
        flat.extend(n);
    }
    Ok(Array2::from_shape_vec((rows.len(), d), flat).expect("shape matches"))
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Verb,
    Noun,
    Other,
}

pub trait PosTagger: Send + Sync {
    fn identity(&self) -> String;
    fn tag(&self, word: &str) -> PosTag;
}

/// Word-list tagger: `word<TAB or space>VERB|NOUN` per line.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    entries: HashMap<String, PosTag>,
}

impl LexiconTagger {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(word), Some(tag)) = (it.next(), it.next()) else {
                return Err(PromptError::GrammarParse {
                    line: i + 1,
                    message: format!("lexicon line needs `word TAG`, got {line:?}"),
                });
            };
            let tag = match tag.to_ascii_uppercase().as_str() {
                "VERB" | "V" => PosTag::Verb,
                "NOUN" | "N" => PosTag::Noun,
                _ => PosTag::Other,
            };
            entries.insert(word.to_lowercase(), tag);
        }
        Ok(LexiconTagger { entries })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, PosTag)>) -> Self {
        LexiconTagger {
            entries: pairs.into_iter().map(|(w, t)| (w.to_lowercase(), t)).collect(),
        }
    }
}

impl PosTagger for LexiconTagger {
    fn identity(&self) -> String {
        format!("lexicon@{}", self.entries.len())
    }

    fn tag(&self, word: &str) -> PosTag {
        self.entries.get(word).copied().unwrap_or(PosTag::Other)
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDistance {
    pub mean: f64,
    pub pairs: u64,
    /// Seed of the pair sample; `None` when every pair was evaluated.
    pub sample_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_prompts: usize,
    pub distinct_words: usize,
    pub mean_sentence_length_words: f64,
    pub n_verbs: usize,
    pub n_nouns: usize,
    /// `None` for a single-sentence corpus.
    pub mean_pairwise_cosine_distance_length_normalized: Option<PairwiseDistance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mean_pairwise_cosine_distance: Option<PairwiseDistance>,
    /// This corpus' mean distance over the reference corpus'.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_ratio: Option<f64>,
    pub tagger: String,
    pub sentence_embedder: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOptions {
    /// Corpora up to this size get the exact all-pairs mean.
    pub exact_limit: usize,
    pub sampled_pairs: u64,
    pub seed: u64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            exact_limit: 10_000,
            sampled_pairs: 1_000_000,
            seed: 0,
        }
    }
}

/// Mean cosine distance over unordered pairs of normalized embeddings.
pub fn mean_pairwise_distance(embeddings: &[Vec<f64>], opts: &StatsOptions) -> Option<PairwiseDistance> {
    let n = embeddings.len();
    if n < 2 {
        return None;
    }
    let dist = |i: usize, j: usize| 1.0 - vector::dot(&embeddings[i], &embeddings[j]);
    if n <= opts.exact_limit {
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| dist(i, j)).sum::<f64>())
            .collect::<Vec<f64>>()
            .into_iter()
            .sum();
        let pairs = (n as u64) * (n as u64 - 1) / 2;
        Some(PairwiseDistance {
            mean: total / pairs as f64,
            pairs,
            sample_seed: None,
        })
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut total = 0.0;
        for _ in 0..opts.sampled_pairs {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            total += dist(i, j);
        }
        Some(PairwiseDistance {
            mean: total / opts.sampled_pairs as f64,
            pairs: opts.sampled_pairs,
            sample_seed: Some(opts.seed),
        })
    }
}

fn embed_all(prompts: &[String], suite: &BackendSuite) -> Result<Vec<Vec<f64>>, PromptError> {
    prompts
        .iter()
        .map(|p| {
            let e = suite.embed_sentence(p)?;
            vector::normalized(&e).ok_or(PromptError::NotNormalized { index: 0, norm: 0.0 })
        })
        .collect()
}

pub fn corpus_stats(
    prompts: &[String],
    tagger: &dyn PosTagger,
    suite: &BackendSuite,
    reference: Option<&[String]>,
    opts: &StatsOptions,
) -> Result<CorpusStats, PromptError> {
    if prompts.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    let mut words = BTreeSet::new();
    let mut total_len = 0usize;
    for p in prompts {
        let toks = tokenize(p);
        total_len += toks.len();
        words.extend(toks);
    }
    let n_verbs = words.iter().filter(|w| tagger.tag(w) == PosTag::Verb).count();
    let n_nouns = words.iter().filter(|w| tagger.tag(w) == PosTag::Noun).count();
    let embeddings = embed_all(prompts, suite)?;
    let own = mean_pairwise_distance(&embeddings, opts);
    let reference_distance = match reference {
        Some(r) if !r.is_empty() => mean_pairwise_distance(&embed_all(r, suite)?, opts),
        Some(_) => return Err(PromptError::EmptyCorpus),
        None => None,
    };
    let reference_ratio = match (&own, &reference_distance) {
        (Some(a), Some(b)) if b.mean > 0.0 => Some(a.mean / b.mean),
        _ => None,
    };
    Ok(CorpusStats {
        n_prompts: prompts.len(),
        distinct_words: words.len(),
        mean_sentence_length_words: total_len as f64 / prompts.len() as f64,
        n_verbs,
        n_nouns,
        mean_pairwise_cosine_distance_length_normalized: own,
        reference_mean_pairwise_cosine_distance: reference_distance,
        reference_ratio,
        tagger: tagger.identity(),
        sentence_embedder: suite
            .identities()
            .get("sentence_embedder")
            .cloned()
            .unwrap_or_default(),
    })
}

// ---------------------------------------------------------------------------
// Subject-prompt pairing
// ---------------------------------------------------------------------------

/// Seeded shuffle of the prompts, chunked `per_subject` at a time in subject
/// order. The result partitions the prompt set.
pub fn pair_subjects_prompts(
    subject_ids: &[String],
    prompt_ids: &[String],
    per_subject: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<String>>, PromptError> {
    if subject_ids.len().checked_mul(per_subject) != Some(prompt_ids.len()) {
        return Err(PromptError::SizeMismatch {
            subjects: subject_ids.len(),
            per_subject,
            prompts: prompt_ids.len(),
        });
    }
    for ids in [subject_ids, prompt_ids] {
        let mut seen = BTreeSet::new();
        for id in ids {
            if !seen.insert(id) {
                return Err(PromptError::DuplicateId(id.clone()));
            }
        }
    }
    let mut shuffled: Vec<&String> = prompt_ids.iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = BTreeMap::new();
    if per_subject == 0 {
        for s in subject_ids {
            out.insert(s.clone(), Vec::new());
        }
        return Ok(out);
    }
    for (subject, chunk) in subject_ids.iter().zip(shuffled.chunks(per_subject)) {
        out.insert(subject.clone(), chunk.iter().map(|p| (*p).clone()).collect());
    }
    Ok(out)
}
