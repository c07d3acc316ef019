//! Subjects, prompts, evaluation samples and the line-delimited manifest
//! that ties them together.
//!
//! A manifest is UTF-8 text with one JSON object per line. The first
//! non-blank line is a header declaring the schema version, the ordered
//! attribute registry and the theme registry. Every following line is a
//! tagged record: `subject`, `prompt` or `sample`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Subject marker carried by every annotated triplet.
pub const HUMAN_MARKER: &str = "human";

/// Path or URI of an image. Decoding is left to the backends.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(locator: impl Into<String>) -> Self {
        ImageRef(locator.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageRef {
    fn from(s: &str) -> Self {
        ImageRef(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub image_refs: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreground_mask_refs: Option<Vec<ImageRef>>,
    #[serde(default)]
    pub attribute_labels: BTreeMap<String, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographic_tags: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedTriplet {
    #[serde(rename = "subject")]
    pub subject_slot: String,
    pub predicate: String,
    pub object: String,
}

impl AnnotatedTriplet {
    pub fn human(predicate: impl Into<String>, object: impl Into<String>) -> Self {
        AnnotatedTriplet {
            subject_slot: HUMAN_MARKER.to_string(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

impl fmt::Display for AnnotatedTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.subject_slot, self.predicate, self.object)
    }
}

/// Which production rule generated a prompt, and with which fillers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateTrace {
    pub rule_id: String,
    pub fillers: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub text: String,
    #[serde(default)]
    pub referenced_objects: Vec<String>,
    #[serde(default)]
    pub annotated_triplets: Vec<AnnotatedTriplet>,
    #[serde(default)]
    pub themes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_trace: Option<TemplateTrace>,
}

/// One (subject, prompt, output image) evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub sample_id: String,
    pub subject: Arc<SubjectRecord>,
    pub input_image_index: usize,
    pub prompt: Arc<PromptRecord>,
    pub output_image_ref: ImageRef,
    pub method_id: String,
}

impl EvalSample {
    /// Panics if the sample has not passed validation.
    pub fn input_image(&self) -> &ImageRef {
        &self.subject.image_refs[self.input_image_index]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub attribute_names: Vec<String>,
    #[serde(default)]
    pub themes: Vec<String>,
}

/// On-disk form of a sample line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    pub sample_id: String,
    pub method_id: String,
    pub subject_id: String,
    pub input_image_index: usize,
    pub prompt_id: String,
    pub output_image: ImageRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Subject(SubjectRecord),
    Prompt(PromptRecord),
    Sample(SampleLine),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyImageRefs { subject_id: String },
    MaskCountMismatch { subject_id: String, images: usize, masks: usize },
    NonBinaryAttribute { subject_id: String, attribute: String, value: u8 },
    InputIndexOutOfBounds { index: usize, available: usize },
    DuplicateReferencedObject { object: String },
    TripletObjectNotReferenced { triplet: String },
    NonHumanTripletSubject { triplet: String },
    EmptyPromptText,
    EmptyOutputRef,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyImageRefs { subject_id } => {
                write!(f, "subject {subject_id} has no images")
            }
            Violation::MaskCountMismatch { subject_id, images, masks } => write!(
                f,
                "subject {subject_id} has {masks} masks for {images} images"
            ),
            Violation::NonBinaryAttribute { subject_id, attribute, value } => write!(
                f,
                "subject {subject_id} attribute {attribute} = {value}, expected 0 or 1"
            ),
            Violation::InputIndexOutOfBounds { index, available } => write!(
                f,
                "input_image_index {index} out of bounds for {available} subject images"
            ),
            Violation::DuplicateReferencedObject { object } => {
                write!(f, "referenced object {object:?} listed more than once")
            }
            Violation::TripletObjectNotReferenced { triplet } => {
                write!(f, "triplet {triplet} names an object missing from referenced_objects")
            }
            Violation::NonHumanTripletSubject { triplet } => {
                write!(f, "triplet {triplet} does not have the human marker as subject")
            }
            Violation::EmptyPromptText => write!(f, "prompt text is empty"),
            Violation::EmptyOutputRef => write!(f, "output image locator is empty"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error reading manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest has no header line")]
    MissingHeader,
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
    #[error("line {line}: {kind} references unknown {target} id {id:?}")]
    DanglingReference {
        line: usize,
        kind: &'static str,
        target: &'static str,
        id: String,
    },
    #[error("line {line}: duplicate {kind} id {id:?}")]
    DuplicateId { line: usize, kind: &'static str, id: String },
    #[error("subject {subject_id}: attribute labels {found:?} do not match registry {expected:?}")]
    AttributeSchema {
        subject_id: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("prompt {prompt_id}: theme {theme:?} not in the header registry")]
    UnknownTheme { prompt_id: String, theme: String },
    #[error("{record}: {violations}")]
    Invalid { record: String, violations: String },
}

/// Checks every record-level invariant a sample depends on.
pub fn validate_sample(sample: &EvalSample) -> Vec<Violation> {
    let mut out = validate_subject(&sample.subject);
    let available = sample.subject.image_refs.len();
    if sample.input_image_index >= available {
        out.push(Violation::InputIndexOutOfBounds {
            index: sample.input_image_index,
            available,
        });
    }
    out.extend(validate_prompt(&sample.prompt));
    if sample.output_image_ref.as_str().is_empty() {
        out.push(Violation::EmptyOutputRef);
    }
    out
}

pub fn validate_subject(subject: &SubjectRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if subject.image_refs.is_empty() {
        out.push(Violation::EmptyImageRefs {
            subject_id: subject.subject_id.clone(),
        });
    }
    if let Some(masks) = &subject.foreground_mask_refs {
        if masks.len() != subject.image_refs.len() {
            out.push(Violation::MaskCountMismatch {
                subject_id: subject.subject_id.clone(),
                images: subject.image_refs.len(),
                masks: masks.len(),
            });
        }
    }
    for (attribute, &value) in &subject.attribute_labels {
        if value > 1 {
            out.push(Violation::NonBinaryAttribute {
                subject_id: subject.subject_id.clone(),
                attribute: attribute.clone(),
                value,
            });
        }
    }
    out
}

pub fn validate_prompt(prompt: &PromptRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if prompt.text.trim().is_empty() {
        out.push(Violation::EmptyPromptText);
    }
    let mut seen = BTreeSet::new();
    for object in &prompt.referenced_objects {
        if !seen.insert(object.as_str()) {
            out.push(Violation::DuplicateReferencedObject {
                object: object.clone(),
            });
        }
    }
    for triplet in &prompt.annotated_triplets {
        if triplet.subject_slot != HUMAN_MARKER {
            out.push(Violation::NonHumanTripletSubject {
                triplet: triplet.to_string(),
            });
        }
        if !seen.contains(triplet.object.as_str()) {
            out.push(Violation::TripletObjectNotReferenced {
                triplet: triplet.to_string(),
            });
        }
    }
    out
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A fully resolved manifest. Immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub subjects: Vec<Arc<SubjectRecord>>,
    pub prompts: Vec<Arc<PromptRecord>>,
    pub samples: Vec<EvalSample>,
}

impl Manifest {
    pub fn attribute_count(&self) -> usize {
        self.header.attribute_names.len()
    }

    pub fn subject(&self, id: &str) -> Option<&Arc<SubjectRecord>> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn prompt(&self, id: &str) -> Option<&Arc<PromptRecord>> {
        self.prompts.iter().find(|p| p.prompt_id == id)
    }

    pub fn parse(text: &str) -> Result<Manifest, ManifestError> {
        let mut header: Option<ManifestHeader> = None;
        let mut subjects: Vec<Arc<SubjectRecord>> = Vec::new();
        let mut prompts: Vec<Arc<PromptRecord>> = Vec::new();
        let mut sample_lines: Vec<(usize, SampleLine)> = Vec::new();
        let mut subject_index: HashMap<String, usize> = HashMap::new();
        let mut prompt_index: HashMap<String, usize> = HashMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let line: ManifestLine =
                serde_json::from_str(raw).map_err(|e| ManifestError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            match line {
                ManifestLine::Header(h) => {
                    if header.is_some() {
                        return Err(ManifestError::Parse {
                            line: line_no,
                            message: "second header line".into(),
                        });
                    }
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(ManifestError::SchemaVersion(h.schema_version));
                    }
                    header = Some(h);
                }
                other => {
                    if header.is_none() {
                        return Err(ManifestError::MissingHeader);
                    }
                    match other {
                        ManifestLine::Subject(s) => {
                            if subject_index.contains_key(&s.subject_id) {
                                return Err(ManifestError::DuplicateId {
                                    line: line_no,
                                    kind: "subject",
                                    id: s.subject_id,
                                });
                            }
                            subject_index.insert(s.subject_id.clone(), subjects.len());
                            subjects.push(Arc::new(s));
                        }
                        ManifestLine::Prompt(p) => {
                            if prompt_index.contains_key(&p.prompt_id) {
                                return Err(ManifestError::DuplicateId {
                                    line: line_no,
                                    kind: "prompt",
                                    id: p.prompt_id,
                                });
                            }
                            prompt_index.insert(p.prompt_id.clone(), prompts.len());
                            prompts.push(Arc::new(p));
                        }
                        ManifestLine::Sample(s) => sample_lines.push((line_no, s)),
                        ManifestLine::Header(_) => unreachable!(),
                    }
                }
            }
        }
        let header = header.ok_or(ManifestError::MissingHeader)?;

        let expected: BTreeSet<&String> = header.attribute_names.iter().collect();
        for s in &subjects {
            let found: BTreeSet<&String> = s.attribute_labels.keys().collect();
            if found != expected {
                return Err(ManifestError::AttributeSchema {
                    subject_id: s.subject_id.clone(),
                    expected: header.attribute_names.clone(),
                    found: s.attribute_labels.keys().cloned().collect(),
                });
            }
            let v = validate_subject(s);
            if !v.is_empty() {
                return Err(ManifestError::Invalid {
                    record: format!("subject {}", s.subject_id),
                    violations: join_violations(&v),
                });
            }
        }
        let themes: BTreeSet<&String> = header.themes.iter().collect();
        for p in &prompts {
            if let Some(t) = p.themes.iter().find(|t| !themes.contains(t)) {
                return Err(ManifestError::UnknownTheme {
                    prompt_id: p.prompt_id.clone(),
                    theme: t.clone(),
                });
            }
            let v = validate_prompt(p);
            if !v.is_empty() {
                return Err(ManifestError::Invalid {
                    record: format!("prompt {}", p.prompt_id),
                    violations: join_violations(&v),
                });
            }
        }

        let mut samples = Vec::with_capacity(sample_lines.len());
        let mut sample_keys = BTreeSet::new();
        let mut slot_keys = BTreeSet::new();
        for (line_no, s) in sample_lines {
            let subject = subject_index.get(&s.subject_id).ok_or_else(|| {
                ManifestError::DanglingReference {
                    line: line_no,
                    kind: "sample",
                    target: "subject",
                    id: s.subject_id.clone(),
                }
            })?;
            let prompt = prompt_index.get(&s.prompt_id).ok_or_else(|| {
                ManifestError::DanglingReference {
                    line: line_no,
                    kind: "sample",
                    target: "prompt",
                    id: s.prompt_id.clone(),
                }
            })?;
            if !sample_keys.insert((s.method_id.clone(), s.sample_id.clone())) {
                return Err(ManifestError::DuplicateId {
                    line: line_no,
                    kind: "sample",
                    id: format!("{}/{}", s.method_id, s.sample_id),
                });
            }
            // One output per (method, subject, prompt, input image) keeps SIS groups well formed.
            if !slot_keys.insert((
                s.method_id.clone(),
                s.subject_id.clone(),
                s.prompt_id.clone(),
                s.input_image_index,
            )) {
                return Err(ManifestError::Invalid {
                    record: format!("sample {} (line {line_no})", s.sample_id),
                    violations: format!(
                        "method {} already has an output for subject {} image {} with prompt {}",
                        s.method_id, s.subject_id, s.input_image_index, s.prompt_id
                    ),
                });
            }
            let sample = EvalSample {
                sample_id: s.sample_id,
                subject: Arc::clone(&subjects[*subject]),
                input_image_index: s.input_image_index,
                prompt: Arc::clone(&prompts[*prompt]),
                output_image_ref: s.output_image,
                method_id: s.method_id,
            };
            let v = validate_sample(&sample);
            if !v.is_empty() {
                return Err(ManifestError::Invalid {
                    record: format!("sample {} (line {line_no})", sample.sample_id),
                    violations: join_violations(&v),
                });
            }
            samples.push(sample);
        }

        Ok(Manifest {
            header,
            subjects,
            prompts,
            samples,
        })
    }

    pub fn to_lines(&self) -> Vec<ManifestLine> {
        let mut out = vec![ManifestLine::Header(self.header.clone())];
        out.extend(
            self.subjects
                .iter()
                .map(|s| ManifestLine::Subject((**s).clone())),
        );
        out.extend(self.prompts.iter().map(|p| ManifestLine::Prompt((**p).clone())));
        out.extend(self.samples.iter().map(|s| {
            ManifestLine::Sample(SampleLine {
                sample_id: s.sample_id.clone(),
                method_id: s.method_id.clone(),
                subject_id: s.subject.subject_id.clone(),
                input_image_index: s.input_image_index,
                prompt_id: s.prompt.prompt_id.clone(),
                output_image: s.output_image_ref.clone(),
            })
        }));
        out
    }

    pub fn to_jsonl(&self) -> String {
        write_lines(&self.to_lines())
    }

    /// Content hash of the canonical serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

pub fn write_lines(lines: &[ManifestLine]) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).expect("manifest lines serialize"));
        out.push('\n');
    }
    out
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path)?;
    Manifest::parse(&text)
}
