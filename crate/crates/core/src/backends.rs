//! Interfaces for the learned models the metrics depend on.
//!
//! Every model sits behind a narrow trait taking image locators and
//! returning plain data. [`BackendSuite`] bundles one implementation per
//! role, enforces the value invariants on every call, serializes calls to
//! backends that declare themselves exclusive, and optionally memoizes
//! results through a [`CallCache`].
//!
//! Two implementations ship here: [`MockBackend`], driven by a declarative
//! fixture file, and [`ProcessBackend`], which forwards calls to a worker
//! process over line-delimited JSON.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{CacheKey, CallCache};
use crate::data::ImageRef;
use crate::vector;

const UNIT_NORM_TOL: f64 = 1e-6;
const DISTRIBUTION_TOL: f64 = 1e-6;

/// Pixel box as `(x, y, w, h)`.
pub type BBox = [f64; 4];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("cannot decode image {locator}: {reason}")]
    Decode { locator: String, reason: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{backend} broke an output invariant: {message}")]
    Invariant { backend: String, message: String },
    #[error("no backend configured for {0}")]
    Missing(&'static str),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("worker {backend}: {message}")]
    Worker { backend: String, message: String },
    #[error("invalid backend identity {0:?}, expected name@version")]
    Identity(String),
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// `name@version` string naming a backend implementation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BackendIdentity(String);

impl BackendIdentity {
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('@') {
            Some((name, version))
                if !name.is_empty() && !version.is_empty() && !version.contains('@') =>
            {
                Ok(BackendIdentity(s.to_string()))
            }
            _ => Err(BackendError::Identity(s.to_string())),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for BackendIdentity {
    type Error = BackendError;
    fn try_from(s: String) -> Result<Self> {
        BackendIdentity::parse(&s)
    }
}

impl From<BackendIdentity> for String {
    fn from(id: BackendIdentity) -> String {
        id.0
    }
}

impl fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Shared,
    Exclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box", default)]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTriplet {
    #[serde(rename = "subject")]
    pub subject_label: String,
    #[serde(rename = "object")]
    pub object_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_box: Option<BBox>,
    #[serde(rename = "relations")]
    pub relation_distribution: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub triplets: Vec<GraphTriplet>,
}

impl SceneGraph {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for t in &self.triplets {
            let mut total = 0.0;
            for (predicate, &p) in &t.relation_distribution {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!(
                        "({}, {}) gives {predicate} probability {p}",
                        t.subject_label, t.object_label
                    ));
                }
                total += p;
            }
            if (total - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(format!(
                    "({}, {}) relation distribution sums to {total}",
                    t.subject_label, t.object_label
                ));
            }
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn identity(&self) -> &BackendIdentity;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait FaceDetector: Backend {
    fn detect_faces(&self, image: &ImageRef) -> Result<Vec<FaceBox>>;
}

pub trait FaceEmbedder: Backend {
    fn embed_face(&self, image: &ImageRef, bbox: &BBox) -> Result<Vec<f64>>;
}

pub trait TextImageScorer: Backend {
    fn score_text_image(&self, prompt: &str, image: &ImageRef) -> Result<f64>;
}

pub trait ImageEmbedder: Backend {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>>;
}

pub trait ObjectDetector: Backend {
    fn detect_objects(&self, image: &ImageRef, queries: &[String]) -> Result<Vec<Detection>>;
}

pub trait SceneGraphGenerator: Backend {
    fn generate_scene_graph(&self, image: &ImageRef) -> Result<SceneGraph>;
    fn predicate_vocabulary(&self) -> Vec<String>;
}

pub trait SentenceEmbedder: Backend {
    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>>;
}

/// A backend plus the lock that serializes it when it is exclusive.
pub struct Slot<T: ?Sized> {
    inner: Arc<T>,
    lock: Option<Mutex<()>>,
}

impl<T: ?Sized + Backend> Slot<T> {
    pub fn new(inner: Arc<T>) -> Self {
        let lock = match inner.concurrency() {
            Concurrency::Exclusive => Some(Mutex::new(())),
            Concurrency::Shared => None,
        };
        Slot { inner, lock }
    }

    pub fn identity(&self) -> &BackendIdentity {
        self.inner.identity()
    }

    fn call<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let _guard = self
            .lock
            .as_ref()
            .map(|m| m.lock().unwrap_or_else(|p| p.into_inner()));
        f(&self.inner)
    }
}

#[derive(Default)]
pub struct BackendSuite {
    pub face_detector: Option<Slot<dyn FaceDetector>>,
    pub face_embedder: Option<Slot<dyn FaceEmbedder>>,
    pub text_image_scorer: Option<Slot<dyn TextImageScorer>>,
    pub image_embedder: Option<Slot<dyn ImageEmbedder>>,
    pub object_detector: Option<Slot<dyn ObjectDetector>>,
    pub scene_graph_generator: Option<Slot<dyn SceneGraphGenerator>>,
    pub sentence_embedder: Option<Slot<dyn SentenceEmbedder>>,
    cache: Option<Arc<CallCache>>,
}

macro_rules! require {
    ($slot:expr, $name:literal) => {
        $slot.as_ref().ok_or(BackendError::Missing($name))?
    };
}

impl BackendSuite {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every role served by one implementation.
    pub fn uniform<B>(backend: Arc<B>) -> Self
    where
        B: FaceDetector
            + FaceEmbedder
            + TextImageScorer
            + ImageEmbedder
            + ObjectDetector
            + SceneGraphGenerator
            + SentenceEmbedder
            + 'static,
    {
        BackendSuite {
            face_detector: Some(Slot::new(backend.clone() as Arc<dyn FaceDetector>)),
            face_embedder: Some(Slot::new(backend.clone() as Arc<dyn FaceEmbedder>)),
            text_image_scorer: Some(Slot::new(backend.clone() as Arc<dyn TextImageScorer>)),
            image_embedder: Some(Slot::new(backend.clone() as Arc<dyn ImageEmbedder>)),
            object_detector: Some(Slot::new(backend.clone() as Arc<dyn ObjectDetector>)),
            scene_graph_generator: Some(Slot::new(
                backend.clone() as Arc<dyn SceneGraphGenerator>
            )),
            sentence_embedder: Some(Slot::new(backend as Arc<dyn SentenceEmbedder>)),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<CallCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&Arc<CallCache>> {
        self.cache.as_ref()
    }

    /// Role name to identity for every configured role.
    pub fn identities(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let mut put = |role: &str, id: Option<&BackendIdentity>| {
            if let Some(id) = id {
                out.insert(role.to_string(), id.to_string());
            }
        };
        put("face_detector", self.face_detector.as_ref().map(|s| s.identity()));
        put("face_embedder", self.face_embedder.as_ref().map(|s| s.identity()));
        put("text_image_scorer", self.text_image_scorer.as_ref().map(|s| s.identity()));
        put("image_embedder", self.image_embedder.as_ref().map(|s| s.identity()));
        put("object_detector", self.object_detector.as_ref().map(|s| s.identity()));
        put(
            "scene_graph_generator",
            self.scene_graph_generator.as_ref().map(|s| s.identity()),
        );
        put("sentence_embedder", self.sentence_embedder.as_ref().map(|s| s.identity()));
        out
    }

    fn memo<T, F>(&self, key: Option<CacheKey>, compute: F) -> Result<T>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        match (&self.cache, key) {
            (Some(cache), Some(key)) => cache.get_or_compute(&key.finish(), compute),
            _ => compute(),
        }
    }

    fn key(&self, identity: &BackendIdentity, op: &str) -> Option<CacheKey> {
        self.cache.as_ref().map(|_| CacheKey::new(identity.as_str(), op))
    }

    /// Faces sorted by descending confidence, each with a unit-norm embedding.
    pub fn detect_faces(&self, image: &ImageRef) -> Result<Vec<FaceObservation>> {
        let detector = require!(self.face_detector, "face_detector");
        let embedder = require!(self.face_embedder, "face_embedder");
        let mut key = self.key(detector.identity(), "detect_faces");
        if let Some(k) = key.as_mut() {
            k.push_image(image);
        }
        let mut boxes = self.memo(key, || detector.call(|d| d.detect_faces(image)))?;
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

        let mut out = Vec::with_capacity(boxes.len());
        for face in boxes {
            if !(0.0..=1.0).contains(&face.confidence) {
                return Err(invariant(
                    detector.identity(),
                    format!("face confidence {} outside [0,1]", face.confidence),
                ));
            }
            if face.bbox[2] < 0.0 || face.bbox[3] < 0.0 {
                return Err(invariant(
                    detector.identity(),
                    format!("face box {:?} has negative extent", face.bbox),
                ));
            }
            let mut key = self.key(embedder.identity(), "embed_face");
            if let Some(k) = key.as_mut() {
                k.push_image(image).push_json(&face.bbox);
            }
            let embedding = self.memo(key, || embedder.call(|e| e.embed_face(image, &face.bbox)))?;
            if !vector::is_unit(&embedding, UNIT_NORM_TOL) {
                return Err(invariant(
                    embedder.identity(),
                    format!("embedding norm {} is not 1", vector::norm(&embedding)),
                ));
            }
            out.push(FaceObservation {
                bbox: face.bbox,
                confidence: face.confidence,
                embedding,
            });
        }
        Ok(out)
    }

    pub fn embed_face(&self, image: &ImageRef, bbox: &BBox) -> Result<Vec<f64>> {
        let embedder = require!(self.face_embedder, "face_embedder");
        let mut key = self.key(embedder.identity(), "embed_face");
        if let Some(k) = key.as_mut() {
            k.push_image(image).push_json(bbox);
        }
        self.memo(key, || embedder.call(|e| e.embed_face(image, bbox)))
    }

    pub fn score_text_image(&self, prompt: &str, image: &ImageRef) -> Result<f64> {
        if prompt.trim().is_empty() {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        let scorer = require!(self.text_image_scorer, "text_image_scorer");
        let mut key = self.key(scorer.identity(), "score_text_image");
        if let Some(k) = key.as_mut() {
            k.push_str(prompt).push_image(image);
        }
        let s = self.memo(key, || scorer.call(|s| s.score_text_image(prompt, image)))?;
        if !s.is_finite() {
            return Err(invariant(scorer.identity(), format!("non-finite score {s}")));
        }
        Ok(s)
    }

    pub fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let embedder = require!(self.image_embedder, "image_embedder");
        let mut key = self.key(embedder.identity(), "embed_image");
        if let Some(k) = key.as_mut() {
            k.push_image(image);
        }
        self.memo(key, || embedder.call(|e| e.embed_image(image)))
    }

    /// Detections restricted to `queries`, possibly several per label.
    pub fn detect_objects(&self, image: &ImageRef, queries: &[String]) -> Result<Vec<Detection>> {
        if queries.is_empty() {
            return Err(BackendError::Precondition("empty object query list".into()));
        }
        let detector = require!(self.object_detector, "object_detector");
        let mut key = self.key(detector.identity(), "detect_objects");
        if let Some(k) = key.as_mut() {
            k.push_image(image).push_json(&queries);
        }
        let dets = self.memo(key, || detector.call(|d| d.detect_objects(image, queries)))?;
        for d in &dets {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(invariant(
                    detector.identity(),
                    format!("detection confidence {} outside [0,1]", d.confidence),
                ));
            }
            if !queries.contains(&d.label) {
                return Err(invariant(
                    detector.identity(),
                    format!("returned unrequested label {:?}", d.label),
                ));
            }
        }
        Ok(dets)
    }

    pub fn generate_scene_graph(&self, image: &ImageRef) -> Result<SceneGraph> {
        let generator = require!(self.scene_graph_generator, "scene_graph_generator");
        let mut key = self.key(generator.identity(), "generate_scene_graph");
        if let Some(k) = key.as_mut() {
            k.push_image(image);
        }
        let graph = self.memo(key, || generator.call(|g| g.generate_scene_graph(image)))?;
        graph
            .validate()
            .map_err(|m| invariant(generator.identity(), m))?;
        Ok(graph)
    }

    pub fn predicate_vocabulary(&self) -> Result<Vec<String>> {
        let generator = require!(self.scene_graph_generator, "scene_graph_generator");
        Ok(generator.call(|g| g.predicate_vocabulary()))
    }

    pub fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(BackendError::Precondition("empty sentence".into()));
        }
        let embedder = require!(self.sentence_embedder, "sentence_embedder");
        let mut key = self.key(embedder.identity(), "embed_sentence");
        if let Some(k) = key.as_mut() {
            k.push_str(text);
        }
        self.memo(key, || embedder.call(|e| e.embed_sentence(text)))
    }
}

fn invariant(id: &BackendIdentity, message: String) -> BackendError {
    BackendError::Invariant {
        backend: id.to_string(),
        message,
    }
}

/// Uniform value in `[0, 1)` derived from SHA-256 of the parts.
pub fn hash_unit(parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic pseudo-random vector in `[-1, 1]^dim` for one token.
fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut block = 0u32;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(block.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        for pair in digest.chunks_exact(2) {
            if out.len() == dim {
                break;
            }
            let v = u16::from_le_bytes([pair[0], pair[1]]) as f64 / u16::MAX as f64;
            out.push(2.0 * v - 1.0);
        }
        block += 1;
    }
    out
}

/// Sum of per-token hash vectors over lowercase alphanumeric tokens.
pub fn hashed_bag_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let v = token_vector(&token.to_lowercase(), dim);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Fixture-driven mock
// ---------------------------------------------------------------------------

pub const MOCK_SENTENCE_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureFace {
    #[serde(rename = "box", default)]
    pub bbox: BBox,
    pub confidence: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageFixture {
    /// `(width, height)`; when present, boxes are checked against it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 2]>,
    #[serde(default)]
    pub faces: Vec<FixtureFace>,
    #[serde(default)]
    pub objects: Vec<Detection>,
    #[serde(default)]
    pub graph: Vec<GraphTriplet>,
    /// Prompt text to text-image score. Undeclared prompts get a hash score.
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureBackendInfo {
    pub identity: BackendIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicates: Option<Vec<String>>,
    #[serde(default = "default_sentence_dim")]
    pub sentence_dim: usize,
}

fn default_sentence_dim() -> usize {
    MOCK_SENTENCE_DIM
}

impl Default for FixtureBackendInfo {
    fn default() -> Self {
        FixtureBackendInfo {
            identity: BackendIdentity::parse("mock@1").unwrap(),
            predicates: None,
            sentence_dim: MOCK_SENTENCE_DIM,
        }
    }
}

/// Declarative side-file mapping image locators to canned model outputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub backend: FixtureBackendInfo,
    #[serde(default)]
    pub images: BTreeMap<String, ImageFixture>,
}

impl Fixture {
    pub fn from_toml(text: &str) -> Result<Fixture> {
        let mut f: Fixture =
            toml::from_str(text).map_err(|e| BackendError::Fixture(e.to_string()))?;
        f.prepare()?;
        Ok(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Fixture> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        Fixture::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fixture serializes")
    }

    /// Normalizes face embeddings and checks every declared value.
    pub fn prepare(&mut self) -> Result<()> {
        for (locator, image) in self.images.iter_mut() {
            let ctx = |m: String| BackendError::Fixture(format!("{locator}: {m}"));
            for face in image.faces.iter_mut() {
                if !(0.0..=1.0).contains(&face.confidence) {
                    return Err(ctx(format!("face confidence {}", face.confidence)));
                }
                face.embedding = vector::normalized(&face.embedding)
                    .ok_or_else(|| ctx("zero face embedding".into()))?;
                if let Some([w, h]) = image.size {
                    let [x, y, bw, bh] = face.bbox;
                    if x < 0.0 || y < 0.0 || x + bw > w || y + bh > h {
                        return Err(ctx(format!("face box {:?} outside {w}x{h}", face.bbox)));
                    }
                }
            }
            for d in &image.objects {
                if !(0.0..=1.0).contains(&d.confidence) {
                    return Err(ctx(format!("{} confidence {}", d.label, d.confidence)));
                }
            }
            SceneGraph {
                triplets: image.graph.clone(),
            }
            .validate()
            .map_err(ctx)?;
        }
        Ok(())
    }
}

pub struct MockBackend {
    identity: BackendIdentity,
    fixture: Fixture,
}

impl MockBackend {
    pub fn new(mut fixture: Fixture) -> Result<Self> {
        fixture.prepare()?;
        Ok(MockBackend {
            identity: fixture.backend.identity.clone(),
            fixture,
        })
    }

    /// A mock with no images: only sentence embedding and hash scores work.
    pub fn empty() -> Self {
        MockBackend::new(Fixture::default()).expect("empty fixture is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MockBackend::new(Fixture::load(path)?)
    }

    pub fn fixture(&self) -> &Fixture {
        &self.fixture
    }

    fn image(&self, image: &ImageRef) -> Result<&ImageFixture> {
        self.fixture
            .images
            .get(image.as_str())
            .ok_or_else(|| BackendError::Decode {
                locator: image.to_string(),
                reason: "not present in mock fixture".into(),
            })
    }
}

impl Backend for MockBackend {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }
}

impl FaceDetector for MockBackend {
    fn detect_faces(&self, image: &ImageRef) -> Result<Vec<FaceBox>> {
        Ok(self
            .image(image)?
            .faces
            .iter()
            .map(|f| FaceBox {
                bbox: f.bbox,
                confidence: f.confidence,
            })
            .collect())
    }
}

impl FaceEmbedder for MockBackend {
    fn embed_face(&self, image: &ImageRef, bbox: &BBox) -> Result<Vec<f64>> {
        self.image(image)?
            .faces
            .iter()
            .find(|f| &f.bbox == bbox)
            .map(|f| f.embedding.clone())
            .ok_or_else(|| BackendError::Decode {
                locator: image.to_string(),
                reason: format!("no fixture face at box {bbox:?}"),
            })
    }
}

impl TextImageScorer for MockBackend {
    fn score_text_image(&self, prompt: &str, image: &ImageRef) -> Result<f64> {
        let fixture = self.image(image)?;
        Ok(match fixture.scores.get(prompt) {
            Some(&s) => s,
            None => hash_unit(&[self.identity.as_str(), "score", prompt, image.as_str()]),
        })
    }
}

impl ImageEmbedder for MockBackend {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let fixture = self.image(image)?;
        Ok(match &fixture.image_embedding {
            Some(e) => e.clone(),
            None => hashed_bag_embedding(image.as_str(), MOCK_SENTENCE_DIM),
        })
    }
}

impl ObjectDetector for MockBackend {
    fn detect_objects(&self, image: &ImageRef, queries: &[String]) -> Result<Vec<Detection>> {
        let fixture = self.image(image)?;
        Ok(fixture
            .objects
            .iter()
            .filter(|d| queries.contains(&d.label))
            .cloned()
            .collect())
    }
}

impl SceneGraphGenerator for MockBackend {
    fn generate_scene_graph(&self, image: &ImageRef) -> Result<SceneGraph> {
        Ok(SceneGraph {
            triplets: self.image(image)?.graph.clone(),
        })
    }

    fn predicate_vocabulary(&self) -> Vec<String> {
        if let Some(p) = &self.fixture.backend.predicates {
            return p.clone();
        }
        let mut all = BTreeSet::new();
        for image in self.fixture.images.values() {
            for t in &image.graph {
                all.extend(t.relation_distribution.keys().cloned());
            }
        }
        all.into_iter().collect()
    }
}

impl SentenceEmbedder for MockBackend {
    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hashed_bag_embedding(text, self.fixture.backend.sentence_dim))
    }
}

// ---------------------------------------------------------------------------
// Out-of-process worker
// ---------------------------------------------------------------------------

struct WorkerPipes {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Forwards every call to a long-lived worker process.
///
/// Each request is one JSON object per line on the worker's stdin with an
/// `op` field; the worker answers one line `{"ok": value}` or
/// `{"error": message}`. Images travel as their locator plus, when the
/// locator is a readable file, the base64 file bytes in `image_b64`.
pub struct ProcessBackend {
    identity: BackendIdentity,
    pipes: Mutex<WorkerPipes>,
}

#[derive(Deserialize)]
struct WorkerReply {
    ok: Option<serde_json::Value>,
    error: Option<String>,
}

impl ProcessBackend {
    pub fn spawn(identity: BackendIdentity, command: &[String], cwd: Option<&Path>) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| BackendError::Precondition("empty worker command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(dir) = cwd {
            cmd.current_dir(dir);
        }
        let mut child = cmd.spawn().map_err(|e| BackendError::Worker {
            backend: identity.to_string(),
            message: format!("spawn {program}: {e}"),
        })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessBackend {
            identity,
            pipes: Mutex::new(WorkerPipes {
                _child: child,
                stdin,
                stdout,
            }),
        })
    }

    fn worker_err(&self, message: impl Into<String>) -> BackendError {
        BackendError::Worker {
            backend: self.identity.to_string(),
            message: message.into(),
        }
    }

    fn request<T: serde::de::DeserializeOwned>(&self, mut req: serde_json::Value) -> Result<T> {
        if let Some(loc) = req.get("image").and_then(|v| v.as_str()) {
            if let Ok(bytes) = std::fs::read(loc) {
                req["image_b64"] = base64::engine::general_purpose::STANDARD.encode(bytes).into();
            }
        }
        let mut pipes = self.pipes.lock().unwrap_or_else(|p| p.into_inner());
        let line = serde_json::to_string(&req).expect("request serializes");
        writeln!(pipes.stdin, "{line}").map_err(|e| self.worker_err(e.to_string()))?;
        pipes.stdin.flush().map_err(|e| self.worker_err(e.to_string()))?;
        let mut reply = String::new();
        let n = pipes
            .stdout
            .read_line(&mut reply)
            .map_err(|e| self.worker_err(e.to_string()))?;
        if n == 0 {
            return Err(self.worker_err("worker closed its output"));
        }
        let reply: WorkerReply =
            serde_json::from_str(&reply).map_err(|e| self.worker_err(format!("bad reply: {e}")))?;
        match (reply.ok, reply.error) {
            (_, Some(msg)) => {
                if let Some(loc) = msg.strip_prefix("decode:") {
                    Err(BackendError::Decode {
                        locator: loc.trim().to_string(),
                        reason: "worker could not decode image".into(),
                    })
                } else {
                    Err(self.worker_err(msg))
                }
            }
            (Some(v), None) => {
                serde_json::from_value(v).map_err(|e| self.worker_err(format!("bad payload: {e}")))
            }
            (None, None) => Err(self.worker_err("reply has neither ok nor error")),
        }
    }
}

impl Backend for ProcessBackend {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Exclusive
    }
}

impl FaceDetector for ProcessBackend {
    fn detect_faces(&self, image: &ImageRef) -> Result<Vec<FaceBox>> {
        self.request(serde_json::json!({"op": "detect_faces", "image": image}))
    }
}

impl FaceEmbedder for ProcessBackend {
    fn embed_face(&self, image: &ImageRef, bbox: &BBox) -> Result<Vec<f64>> {
        self.request(serde_json::json!({"op": "embed_face", "image": image, "box": bbox}))
    }
}

impl TextImageScorer for ProcessBackend {
    fn score_text_image(&self, prompt: &str, image: &ImageRef) -> Result<f64> {
        self.request(serde_json::json!({"op": "score_text_image", "prompt": prompt, "image": image}))
    }
}

impl ImageEmbedder for ProcessBackend {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>> {
        self.request(serde_json::json!({"op": "embed_image", "image": image}))
    }
}

impl ObjectDetector for ProcessBackend {
    fn detect_objects(&self, image: &ImageRef, queries: &[String]) -> Result<Vec<Detection>> {
        self.request(serde_json::json!({"op": "detect_objects", "image": image, "queries": queries}))
    }
}

impl SceneGraphGenerator for ProcessBackend {
    fn generate_scene_graph(&self, image: &ImageRef) -> Result<SceneGraph> {
        self.request(serde_json::json!({"op": "generate_scene_graph", "image": image}))
    }

    fn predicate_vocabulary(&self) -> Vec<String> {
        self.request(serde_json::json!({"op": "predicate_vocabulary"}))
            .unwrap_or_else(|e| {
                log::warn!("{e}");
                Vec::new()
            })
    }
}

impl SentenceEmbedder for ProcessBackend {
    fn embed_sentence(&self, text: &str) -> Result<Vec<f64>> {
        self.request(serde_json::json!({"op": "embed_sentence", "text": text}))
    }
}

// ---------------------------------------------------------------------------
// Suite configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SlotSpec {
    Mock {
        fixture: Option<PathBuf>,
    },
    Process {
        identity: BackendIdentity,
        command: Vec<String>,
    },
}

/// Which implementation serves each role. `default` covers unlisted roles.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub default: Option<SlotSpec>,
    pub face_detector: Option<SlotSpec>,
    pub face_embedder: Option<SlotSpec>,
    pub text_image_scorer: Option<SlotSpec>,
    pub image_embedder: Option<SlotSpec>,
    pub object_detector: Option<SlotSpec>,
    pub scene_graph_generator: Option<SlotSpec>,
    pub sentence_embedder: Option<SlotSpec>,
}

enum Built {
    Mock(Arc<MockBackend>),
    Process(Arc<ProcessBackend>),
}

impl BackendsConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BackendError::Fixture(format!("backends file: {e}")))
    }

    /// Instantiates the suite; relative paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<BackendSuite> {
        let mut mocks: HashMap<Option<PathBuf>, Arc<MockBackend>> = HashMap::new();
        let mut workers: HashMap<(BackendIdentity, Vec<String>), Arc<ProcessBackend>> =
            HashMap::new();
        let mut build = |spec: Option<&SlotSpec>| -> Result<Option<Built>> {
            let Some(spec) = spec.or(self.default.as_ref()) else {
                return Ok(None);
            };
            Ok(Some(match spec {
                SlotSpec::Mock { fixture } => {
                    let path = fixture.as_ref().map(|p| base_dir.join(p));
                    if let Some(m) = mocks.get(&path) {
                        Built::Mock(m.clone())
                    } else {
                        let m = Arc::new(match &path {
                            Some(p) => MockBackend::load(p)?,
                            None => MockBackend::empty(),
                        });
                        mocks.insert(path, m.clone());
                        Built::Mock(m)
                    }
                }
                SlotSpec::Process { identity, command } => {
                    let key = (identity.clone(), command.clone());
                    if let Some(w) = workers.get(&key) {
                        Built::Process(w.clone())
                    } else {
                        let w = Arc::new(ProcessBackend::spawn(
                            identity.clone(),
                            command,
                            Some(base_dir),
                        )?);
                        workers.insert(key, w.clone());
                        Built::Process(w)
                    }
                }
            }))
        };

        macro_rules! slot {
            ($spec:expr, $tr:path) => {
                build($spec.as_ref())?.map(|b| match b {
                    Built::Mock(m) => Slot::new(m as Arc<dyn $tr>),
                    Built::Process(p) => Slot::new(p as Arc<dyn $tr>),
                })
            };
        }

        Ok(BackendSuite {
            face_detector: slot!(self.face_detector, FaceDetector),
            face_embedder: slot!(self.face_embedder, FaceEmbedder),
            text_image_scorer: slot!(self.text_image_scorer, TextImageScorer),
            image_embedder: slot!(self.image_embedder, ImageEmbedder),
            object_detector: slot!(self.object_detector, ObjectDetector),
            scene_graph_generator: slot!(self.scene_graph_generator, SceneGraphGenerator),
            sentence_embedder: slot!(self.sentence_embedder, SentenceEmbedder),
            cache: None,
        })
    }

    pub fn load_suite(path: impl AsRef<Path>) -> Result<BackendSuite> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        BackendsConfig::from_toml(&text)?.build(base)
    }
}
