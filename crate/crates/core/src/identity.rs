//! Identity-centric scores: identity preservation (IPS), attribute
//! preservation (APS) and stability of identity (SIS, plus its
//! single-output variant).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite, FaceObservation};
use crate::data::{EvalSample, ImageRef, SubjectRecord};
use crate::penalty::ResolvedPenalty;
use crate::vector;

pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("stability scores need at least 2 subject images, subject {subject_id} has {count}")]
    TooFewImages { subject_id: String, count: usize },
    #[error("expected {expected} outputs aligned to the subject images, got {got}")]
    OutputCount { expected: usize, got: usize },
    #[error("input index {index} out of range for {count} images")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("label matrix has {rows} rows for {embeddings} embeddings")]
    LabelRows { rows: usize, embeddings: usize },
    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("label {0} is not binary")]
    NonBinaryLabel(u8),
    #[error("non-finite score")]
    NonFinite,
    #[error("subject {subject_id} has no label for bank attribute {attribute}")]
    MissingLabel { subject_id: String, attribute: String },
    #[error("classifier bank: {0}")]
    Bank(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityFloor {
    /// `max(0, cos)`
    #[default]
    ClampAtZero,
    /// `(1 + cos) / 2`
    AffineToUnit,
}

impl SimilarityFloor {
    pub fn apply(self, cosine: f64) -> f64 {
        match self {
            SimilarityFloor::ClampAtZero => cosine.max(0.0),
            SimilarityFloor::AffineToUnit => (1.0 + cosine) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFaceRule {
    #[default]
    HighestConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityScoreConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub similarity_floor: SimilarityFloor,
    #[serde(default)]
    pub multi_face_input_rule: InputFaceRule,
}

fn default_alpha() -> f64 {
    0.8
}

impl Default for IdentityScoreConfig {
    fn default() -> Self {
        IdentityScoreConfig {
            alpha: default_alpha(),
            similarity_floor: SimilarityFloor::default(),
            multi_face_input_rule: InputFaceRule::default(),
        }
    }
}

impl IdentityScoreConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("identity.alpha must lie in [0,1], got {}", self.alpha));
        }
        Ok(())
    }
}

/// Result of one identity comparison with the bookkeeping the report needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpsOutcome {
    pub score: f64,
    pub indicator: u8,
    pub input_has_face: bool,
    pub admissible_output_faces: usize,
}

/// Face detectors return faces by descending confidence, so the first one
/// is the input identity.
fn input_face<'a>(faces: &'a [FaceObservation], rule: InputFaceRule) -> Option<&'a FaceObservation> {
    match rule {
        InputFaceRule::HighestConfidence => faces
            .iter()
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence).then(std::cmp::Ordering::Greater)),
    }
}

/// Identity score from already-detected faces and a penalty indicator.
pub fn ips_from_faces(
    input_faces: &[FaceObservation],
    output_faces: &[FaceObservation],
    indicator: u8,
    cfg: &IdentityScoreConfig,
) -> IpsOutcome {
    let reference = input_face(input_faces, cfg.multi_face_input_rule);
    let admissible: Vec<&FaceObservation> = output_faces
        .iter()
        .filter(|f| f.confidence > cfg.alpha)
        .collect();
    let best = match reference {
        Some(r) => admissible
            .iter()
            .map(|f| cfg.similarity_floor.apply(vector::dot(&r.embedding, &f.embedding)))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s)))),
        None => None,
    };
    IpsOutcome {
        score: best.map_or(0.0, |s| f64::from(indicator) * s),
        indicator,
        input_has_face: reference.is_some(),
        admissible_output_faces: admissible.len(),
    }
}

/// IPS of `output` against `input` under `prompt`.
pub fn ips_pair(
    input: &ImageRef,
    output: &ImageRef,
    prompt: &str,
    suite: &BackendSuite,
    cfg: &IdentityScoreConfig,
    pen: &ResolvedPenalty,
) -> Result<IpsOutcome, BackendError> {
    let input_faces = suite.detect_faces(input)?;
    let output_faces = suite.detect_faces(output)?;
    let score_pi = suite.score_text_image(prompt, input)?;
    let score_po = suite.score_text_image(prompt, output)?;
    let indicator = pen.indicator(score_pi, score_po);
    Ok(ips_from_faces(&input_faces, &output_faces, indicator, cfg))
}

pub fn ips(
    sample: &EvalSample,
    suite: &BackendSuite,
    cfg: &IdentityScoreConfig,
    pen: &ResolvedPenalty,
) -> Result<IpsOutcome, BackendError> {
    ips_pair(
        sample.input_image(),
        &sample.output_image_ref,
        &sample.prompt.text,
        suite,
        cfg,
        pen,
    )
}

fn require_pairs(subject: &SubjectRecord) -> Result<usize, IdentityError> {
    let count = subject.image_refs.len();
    if count < 2 {
        return Err(IdentityError::TooFewImages {
            subject_id: subject.subject_id.clone(),
            count,
        });
    }
    Ok(count)
}

/// Minimum IPS of `output` against every subject image except `m`.
pub fn sis_fast(
    subject: &SubjectRecord,
    m: usize,
    output: &ImageRef,
    prompt: &str,
    suite: &BackendSuite,
    cfg: &IdentityScoreConfig,
    pen: &ResolvedPenalty,
) -> Result<f64, IdentityError> {
    let count = require_pairs(subject)?;
    if m >= count {
        return Err(IdentityError::IndexOutOfRange { index: m, count });
    }
    let mut worst = f64::INFINITY;
    for (k, input) in subject.image_refs.iter().enumerate() {
        if k == m {
            continue;
        }
        worst = worst.min(ips_pair(input, output, prompt, suite, cfg, pen)?.score);
    }
    Ok(worst)
}

/// Mean over outputs of the unaligned-minimum IPS. `outputs[m]` must be the
/// generation conditioned on `subject.image_refs[m]` with `prompt`.
pub fn sis(
    subject: &SubjectRecord,
    outputs: &[ImageRef],
    prompt: &str,
    suite: &BackendSuite,
    cfg: &IdentityScoreConfig,
    pen: &ResolvedPenalty,
) -> Result<f64, IdentityError> {
    let count = require_pairs(subject)?;
    if outputs.len() != count {
        return Err(IdentityError::OutputCount {
            expected: count,
            got: outputs.len(),
        });
    }
    let mut total = 0.0;
    for (m, output) in outputs.iter().enumerate() {
        total += sis_fast(subject, m, output, prompt, suite, cfg, pen)?;
    }
    Ok(total / count as f64)
}

/// Area under the ROC curve: probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, IdentityError> {
    if scores.len() != labels.len() {
        return Err(IdentityError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(IdentityError::NonBinaryLabel(bad));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(IdentityError::NonFinite);
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(IdentityError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks (1-based) summed over positives.
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn score(&self, embedding: &[f64]) -> f64 {
        vector::dot(&self.weights, embedding) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub source_dataset: String,
    pub embedder_identity: String,
    pub seed: u64,
    pub training_auc: BTreeMap<String, f64>,
    #[serde(default)]
    pub untrainable: Vec<String>,
}

/// One linear probe per binary attribute over face embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeClassifierBank {
    pub format_version: u32,
    pub attribute_names: Vec<String>,
    pub dimension: usize,
    pub probes: Vec<LinearProbe>,
    pub training_meta: TrainingMeta,
}

impl AttributeClassifierBank {
    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn score_all(&self, embedding: &[f64]) -> Result<Vec<f64>, IdentityError> {
        if embedding.len() != self.dimension {
            return Err(IdentityError::Dimension {
                expected: self.dimension,
                got: embedding.len(),
            });
        }
        Ok(self.probes.iter().map(|p| p.score(embedding)).collect())
    }

    pub fn check(&self) -> Result<(), IdentityError> {
        if self.format_version != BANK_FORMAT_VERSION {
            return Err(IdentityError::Bank(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.attribute_names.len() != self.probes.len() {
            return Err(IdentityError::Bank(format!(
                "{} names for {} probes",
                self.attribute_names.len(),
                self.probes.len()
            )));
        }
        for p in &self.probes {
            if p.weights.len() != self.dimension {
                return Err(IdentityError::Dimension {
                    expected: self.dimension,
                    got: p.weights.len(),
                });
            }
        }
        Ok(())
    }

    /// Every probe must name an attribute of the manifest registry.
    pub fn check_registry(&self, registry: &[String]) -> Result<(), IdentityError> {
        for name in &self.attribute_names {
            if !registry.contains(name) {
                return Err(IdentityError::Bank(format!(
                    "attribute {name:?} is not in the manifest registry"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IdentityError> {
        let bank: AttributeClassifierBank =
            serde_json::from_str(text).map_err(|e| IdentityError::Bank(e.to_string()))?;
        bank.check()?;
        Ok(bank)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IdentityError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| IdentityError::Bank(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub source_dataset: String,
    pub embedder_identity: String,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            epochs: 200,
            learning_rate: 0.5,
            l2: 1e-4,
            batch_size: 32,
            source_dataset: "unspecified".into(),
            embedder_identity: "unspecified@0".into(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Class-balanced logistic regression by mini-batch SGD with a seeded
/// shuffle per epoch.
fn train_probe(
    embeddings: &[Vec<f64>],
    labels: &[u8],
    dim: usize,
    rng: &mut ChaCha8Rng,
    opts: &TrainOptions,
) -> LinearProbe {
    let n = embeddings.len();
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let negatives = n as f64 - positives;
    let class_weight = |l: u8| {
        if l == 1 {
            n as f64 / (2.0 * positives)
        } else {
            n as f64 / (2.0 * negatives)
        }
    };
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let batch = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for &i in chunk {
                let x = &embeddings[i];
                let err = (sigmoid(vector::dot(&w, x) + b) - f64::from(labels[i])) * class_weight(labels[i]);
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += err * xi;
                }
                gb += err;
            }
            let scale = opts.learning_rate / chunk.len() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= scale * g + opts.learning_rate * opts.l2 * *wi;
            }
            b -= scale * gb;
        }
    }
    LinearProbe { weights: w, bias: b }
}

/// Trains one probe per attribute. Attributes with a single class in
/// `labels` are excluded from the bank and listed as untrainable.
pub fn train_attribute_classifiers(
    embeddings: &[Vec<f64>],
    labels: &[Vec<u8>],
    attribute_names: &[String],
    opts: &TrainOptions,
) -> Result<AttributeClassifierBank, IdentityError> {
    if labels.len() != embeddings.len() {
        return Err(IdentityError::LabelRows {
            rows: labels.len(),
            embeddings: embeddings.len(),
        });
    }
    let dim = embeddings.first().map_or(0, |e| e.len());
    for e in embeddings {
        if e.len() != dim {
            return Err(IdentityError::Dimension {
                expected: dim,
                got: e.len(),
            });
        }
    }
    for row in labels {
        if row.len() != attribute_names.len() {
            return Err(IdentityError::Dimension {
                expected: attribute_names.len(),
                got: row.len(),
            });
        }
        if let Some(&bad) = row.iter().find(|&&l| l > 1) {
            return Err(IdentityError::NonBinaryLabel(bad));
        }
    }

    let mut names = Vec::new();
    let mut probes = Vec::new();
    let mut training_auc = BTreeMap::new();
    let mut untrainable = Vec::new();
    for (m, name) in attribute_names.iter().enumerate() {
        let column: Vec<u8> = labels.iter().map(|row| row[m]).collect();
        let positives = column.iter().filter(|&&l| l == 1).count();
        if embeddings.len() < 2 || positives == 0 || positives == column.len() {
            log::warn!("attribute {name} has a single class in training data; excluded");
            untrainable.push(name.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(m as u64));
        let probe = train_probe(embeddings, &column, dim, &mut rng, opts);
        let scores: Vec<f64> = embeddings.iter().map(|e| probe.score(e)).collect();
        training_auc.insert(name.clone(), roc_auc(&scores, &column)?);
        names.push(name.clone());
        probes.push(probe);
    }
    Ok(AttributeClassifierBank {
        format_version: BANK_FORMAT_VERSION,
        attribute_names: names,
        dimension: dim,
        probes,
        training_meta: TrainingMeta {
            source_dataset: opts.source_dataset.clone(),
            embedder_identity: opts.embedder_identity.clone(),
            seed: opts.seed,
            training_auc,
            untrainable,
        },
    })
}

/// One sample's contribution to the attribute AUC pools.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample {
    /// Top admissible output face found and penalty passed.
    pub included: bool,
    pub penalized: bool,
    pub faceless: bool,
    /// Probe outputs, one per bank attribute; empty when excluded.
    pub probe_scores: Vec<f64>,
    /// Ground-truth subject labels, one per bank attribute.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApsOutcome {
    /// `None` when no attribute pool holds both classes.
    pub value: Option<f64>,
    pub coverage: f64,
    pub included: usize,
    pub total: usize,
    pub per_attribute_auc: BTreeMap<String, Option<f64>>,
}

pub fn aps_pool_entry(
    sample: &EvalSample,
    bank: &AttributeClassifierBank,
    suite: &BackendSuite,
    cfg: &IdentityScoreConfig,
    pen: &ResolvedPenalty,
) -> Result<PooledSample, IdentityError> {
    let labels = bank
        .attribute_names
        .iter()
        .map(|a| {
            sample
                .subject
                .attribute_labels
                .get(a)
                .copied()
                .ok_or_else(|| IdentityError::MissingLabel {
                    subject_id: sample.subject.subject_id.clone(),
                    attribute: a.clone(),
                })
        })
        .collect::<Result<Vec<u8>, _>>()?;
    let faces = suite.detect_faces(&sample.output_image_ref)?;
    let top = faces
        .iter()
        .filter(|f| f.confidence > cfg.alpha)
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence).then(std::cmp::Ordering::Greater));
    let score_pi = suite.score_text_image(&sample.prompt.text, sample.input_image())?;
    let score_po = suite.score_text_image(&sample.prompt.text, &sample.output_image_ref)?;
    let penalized = pen.indicator(score_pi, score_po) == 0;
    let faceless = top.is_none();
    let probe_scores = match top {
        Some(face) if !penalized => bank.score_all(&face.embedding)?,
        _ => Vec::new(),
    };
    Ok(PooledSample {
        included: !penalized && !faceless,
        penalized,
        faceless,
        probe_scores,
        labels,
    })
}

/// Mean per-attribute AUC over included samples, scaled by coverage.
pub fn aps_from_pool(pool: &[PooledSample], attribute_names: &[String]) -> ApsOutcome {
    let total = pool.len();
    let included: Vec<&PooledSample> = pool.iter().filter(|p| p.included).collect();
    let coverage = if total == 0 {
        0.0
    } else {
        included.len() as f64 / total as f64
    };
    let mut per_attribute_auc = BTreeMap::new();
    let mut sum = 0.0;
    let mut defined = 0usize;
    for (m, name) in attribute_names.iter().enumerate() {
        let scores: Vec<f64> = included.iter().map(|p| p.probe_scores[m]).collect();
        let labels: Vec<u8> = included.iter().map(|p| p.labels[m]).collect();
        let auc = roc_auc(&scores, &labels).ok();
        if let Some(a) = auc {
            sum += a;
            defined += 1;
        }
        per_attribute_auc.insert(name.clone(), auc);
    }
    let value = (defined > 0).then(|| sum / defined as f64 * coverage);
    ApsOutcome {
        value,
        coverage,
        included: included.len(),
        total,
        per_attribute_auc,
    }
}

/// APS over all samples of one method.
pub fn aps(
    samples_of_method: &[EvalSample],
    bank: &AttributeClassifierBank,
    suite: &BackendSuite,
    cfg: &IdentityScoreConfig,
    pen: &ResolvedPenalty,
) -> Result<ApsOutcome, IdentityError> {
    let pool = samples_of_method
        .iter()
        .map(|s| aps_pool_entry(s, bank, suite, cfg, pen))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aps_from_pool(&pool, &bank.attribute_names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Fixture, FixtureFace, ImageFixture, MockBackend};
    use crate::penalty::PenaltyMode;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn face(conf: f64, embedding: Vec<f64>) -> FaceObservation {
        FaceObservation {
            bbox: [0.0; 4],
            confidence: conf,
            embedding: vector::normalized(&embedding).unwrap(),
        }
    }

    fn unit_at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn faceless_output_scores_zero() {
        let out = ips_from_faces(&[face(0.99, vec![1.0, 0.0])], &[], 1, &IdentityScoreConfig::default());
        assert_eq!(out.score, 0.0);
        assert_eq!(out.admissible_output_faces, 0);
    }

    #[test]
    fn best_admissible_output_face_wins() {
        let input = [face(0.99, vec![1.0, 0.0])];
        let outputs = [face(0.95, unit_at_cos(0.3)), face(0.9, unit_at_cos(0.7))];
        let out = ips_from_faces(&input, &outputs, 1, &IdentityScoreConfig::default());
        assert!((out.score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn penalty_zeroes_a_perfect_copy() {
        let input = [face(0.99, vec![1.0, 0.0])];
        let out = ips_from_faces(&input, &input, 0, &IdentityScoreConfig::default());
        assert_eq!(out.score, 0.0);
    }

    #[test]
    fn low_confidence_faces_are_ignored() {
        let input = [face(0.99, vec![1.0, 0.0])];
        let outputs = [face(0.5, vec![1.0, 0.0])];
        let out = ips_from_faces(&input, &outputs, 1, &IdentityScoreConfig::default());
        assert_eq!(out.score, 0.0);
    }

    #[test]
    fn negative_cosine_floors() {
        let input = [face(0.99, vec![1.0, 0.0])];
        let outputs = [face(0.99, vec![-1.0, 0.0])];
        let clamp = ips_from_faces(&input, &outputs, 1, &IdentityScoreConfig::default());
        assert_eq!(clamp.score, 0.0);
        let affine = IdentityScoreConfig {
            similarity_floor: SimilarityFloor::AffineToUnit,
            ..Default::default()
        };
        assert_eq!(ips_from_faces(&input, &outputs, 1, &affine).score, 0.0);
        let ortho = [face(0.99, vec![0.0, 1.0])];
        assert!((ips_from_faces(&input, &ortho, 1, &affine).score - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_ordering_auc() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn auc_brute_force_example() {
        // Pairs (pos, neg): (0.9,0.8) (0.9,0.6) (0.7,0.8) (0.7,0.6) -> 3 of 4 won.
        assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn auc_ties_count_half() {
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_an_error() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(IdentityError::SingleClass { .. })
        ));
    }

    proptest! {
        #[test]
        fn auc_complement(scores in proptest::collection::btree_set(0u32..10_000, 2..40), flip in any::<u64>()) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 10_000.0).collect();
            let labels: Vec<u8> = (0..scores.len()).map(|i| ((flip >> (i % 64)) & 1) as u8).collect();
            let inverse: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            if let (Ok(a), Ok(b)) = (roc_auc(&scores, &labels), roc_auc(&scores, &inverse)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    fn separable_set() -> (Vec<Vec<f64>>, Vec<Vec<u8>>) {
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let angle = (i as f64 / 20.0) * std::f64::consts::TAU + 0.1;
            let (s, c) = angle.sin_cos();
            emb.push(vec![c, s]);
            // attribute 0 separable by x sign, attribute 1 by y sign
            labels.push(vec![u8::from(c > 0.0), u8::from(s > 0.0)]);
        }
        (emb, labels)
    }

    #[test]
    fn separable_probes_reach_perfect_training_auc() {
        let (emb, labels) = separable_set();
        let names = vec!["a".to_string(), "b".to_string()];
        let bank = train_attribute_classifiers(&emb, &labels, &names, &TrainOptions::default()).unwrap();
        assert_eq!(bank.len(), 2);
        for auc in bank.training_meta.training_auc.values() {
            assert_eq!(*auc, 1.0);
        }
    }

    #[test]
    fn single_class_attribute_is_untrainable() {
        let (emb, mut labels) = separable_set();
        for row in labels.iter_mut() {
            row.push(1);
        }
        let names = vec!["a".to_string(), "b".to_string(), "always".to_string()];
        let bank = train_attribute_classifiers(&emb, &labels, &names, &TrainOptions::default()).unwrap();
        assert_eq!(bank.attribute_names, vec!["a", "b"]);
        assert_eq!(bank.training_meta.untrainable, vec!["always"]);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (emb, labels) = separable_set();
        let names = vec!["a".to_string(), "b".to_string()];
        let opts = TrainOptions { seed: 7, ..Default::default() };
        let a = train_attribute_classifiers(&emb, &labels, &names, &opts).unwrap();
        let b = train_attribute_classifiers(&emb, &labels, &names, &opts).unwrap();
        assert_eq!(a, b);
        let again = AttributeClassifierBank::from_json(&a.to_json()).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let emb = vec![vec![1.0, 0.0], vec![1.0]];
        let labels = vec![vec![0], vec![1]];
        assert!(matches!(
            train_attribute_classifiers(&emb, &labels, &["a".into()], &TrainOptions::default()),
            Err(IdentityError::Dimension { .. })
        ));
    }

    #[test]
    fn aps_pool_with_perfect_probes() {
        let names = vec!["a".to_string()];
        let pool: Vec<PooledSample> = [(0.9, 1), (0.1, 0), (0.8, 1), (0.2, 0)]
            .iter()
            .map(|&(s, l)| PooledSample {
                included: true,
                penalized: false,
                faceless: false,
                probe_scores: vec![s],
                labels: vec![l],
            })
            .collect();
        let out = aps_from_pool(&pool, &names);
        assert_eq!(out.value, Some(1.0));
        assert_eq!(out.coverage, 1.0);
    }

    #[test]
    fn aps_all_faceless_is_not_applicable() {
        let pool = vec![
            PooledSample {
                included: false,
                penalized: false,
                faceless: true,
                probe_scores: vec![],
                labels: vec![1],
            };
            3
        ];
        let out = aps_from_pool(&pool, &["a".to_string()]);
        assert_eq!(out.value, None);
        assert_eq!(out.coverage, 0.0);
    }

    /// Two-image subject whose outputs have known cross-pair cosines.
    fn sis_suite(cross: [[f64; 2]; 2]) -> (BackendSuite, SubjectRecord) {
        let mut fx = Fixture::default();
        let inputs = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        for (k, e) in inputs.iter().enumerate() {
            fx.images.insert(
                format!("in{k}"),
                ImageFixture {
                    faces: vec![FixtureFace { bbox: [0.0; 4], confidence: 0.99, embedding: e.clone() }],
                    ..Default::default()
                },
            );
        }
        // output m has cosine cross[m][k] with input k; third coordinate absorbs the rest.
        for m in 0..2 {
            let (a, b) = (cross[m][0], cross[m][1]);
            let e = vec![a, b, (1.0 - a * a - b * b).max(0.0).sqrt()];
            fx.images.insert(
                format!("out{m}"),
                ImageFixture {
                    faces: vec![FixtureFace { bbox: [0.0; 4], confidence: 0.95, embedding: e }],
                    ..Default::default()
                },
            );
        }
        for img in fx.images.values_mut() {
            img.scores.insert("p".into(), 0.5);
        }
        let subject = SubjectRecord {
            subject_id: "s".into(),
            image_refs: vec!["in0".into(), "in1".into()],
            foreground_mask_refs: None,
            attribute_labels: BTreeMap::new(),
            demographic_tags: None,
        };
        (BackendSuite::uniform(Arc::new(MockBackend::new(fx).unwrap())), subject)
    }

    #[test]
    fn sis_two_images_hand_value() {
        // IPS(I1, O0) = 0.7 and IPS(I0, O1) = 0.5.
        let (suite, subject) = sis_suite([[0.6, 0.7], [0.5, 0.8]]);
        // Outputs score the same as inputs, so use sigma 0 in literal mode: 0.5*0 < 0.5 passes.
        let pen = ResolvedPenalty::new(PenaltyMode::LiteralMultiplicative, 0.0);
        let cfg = IdentityScoreConfig::default();
        let outputs = vec![ImageRef::from("out0"), ImageRef::from("out1")];
        let v = sis(&subject, &outputs, "p", &suite, &cfg, &pen).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        let fast = sis_fast(&subject, 0, &outputs[0], "p", &suite, &cfg, &pen).unwrap();
        assert!((fast - 0.7).abs() < 1e-12);
    }

    #[test]
    fn sis_needs_two_images() {
        let (suite, mut subject) = sis_suite([[0.6, 0.7], [0.5, 0.8]]);
        subject.image_refs.truncate(1);
        let pen = ResolvedPenalty::new(PenaltyMode::Additive, 0.0);
        let err = sis(&subject, &["out0".into()], "p", &suite, &IdentityScoreConfig::default(), &pen);
        assert!(matches!(err, Err(IdentityError::TooFewImages { count: 1, .. })));
    }
}
