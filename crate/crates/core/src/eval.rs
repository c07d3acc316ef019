//! Batch evaluation of a manifest into a [`MetricReport`].
//!
//! Samples are scored in parallel; every reduction runs afterwards over the
//! (method_id, sample_id) ordering so the report does not depend on the
//! worker count. A backend failure marks the affected metric of that sample
//! as failed and the run continues.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::backends::BackendSuite;
use crate::config::{ConfigError, EvalConfig, Metric};
use crate::context::{self, ContextError, ObjectMatchConfig, RelationVocabularyMap, UnmappedPolicy};
use crate::data::{EvalSample, ImageRef, Manifest};
use crate::identity::{self, AttributeClassifierBank, IdentityError, IdentityScoreConfig, PooledSample};
use crate::penalty::{PenaltyError, ResolvedPenalty, SigmaCache, SigmaSetting};
use crate::report::{Aggregate, CoverageStats, Failure, MetricReport, MetricValue, SampleResult, REPORT_VERSION};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("metric {metric} needs a {role} backend, none configured")]
    MissingBackend { metric: Metric, role: &'static str },
    #[error("metric aps needs identity.classifier_bank")]
    MissingBank,
    #[error("classifier bank: {0}")]
    Bank(IdentityError),
    #[error("relation map: {0}")]
    RelationMap(ContextError),
    #[error("penalty sigma: {0}")]
    Sigma(#[from] PenaltyError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl EvalError {
    /// Failures caused by a backend rather than by the inputs.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            EvalError::MissingBackend { .. } | EvalError::Sigma(PenaltyError::Backend(_))
        )
    }
}

/// Files referenced by the config, loaded once.
#[derive(Debug, Clone, Default)]
pub struct EvalResources {
    pub bank: Option<AttributeClassifierBank>,
    pub relation_map: RelationVocabularyMap,
}

impl EvalResources {
    pub fn load(config: &EvalConfig) -> Result<Self, EvalError> {
        let bank = match &config.identity.classifier_bank {
            Some(p) if config.metrics.contains(&Metric::Aps) => {
                Some(AttributeClassifierBank::load(p).map_err(EvalError::Bank)?)
            }
            _ => None,
        };
        let relation_map = match &config.context.relation_map {
            Some(p) => RelationVocabularyMap::load(p).map_err(EvalError::RelationMap)?,
            None => RelationVocabularyMap::default(),
        };
        Ok(EvalResources { bank, relation_map })
    }
}

fn role_present(suite: &BackendSuite, role: &str) -> bool {
    suite.identities().contains_key(role)
}

fn check_backends(metrics: &[Metric], suite: &BackendSuite, map: &RelationVocabularyMap) -> Result<(), EvalError> {
    for &metric in metrics {
        let mut roles: Vec<&'static str> = metric.required_roles().to_vec();
        if metric == Metric::Rfs && map.unmapped_policy == UnmappedPolicy::EmbedNearest {
            roles.push("sentence_embedder");
        }
        if let Some(role) = roles.into_iter().find(|r| !role_present(suite, r)) {
            return Err(EvalError::MissingBackend { metric, role });
        }
    }
    Ok(())
}

struct SigmaInfo {
    penalty: ResolvedPenalty,
    source: &'static str,
    scope: String,
}

fn resolve_sigma(config: &EvalConfig, manifest: &Manifest, suite: &BackendSuite) -> Result<SigmaInfo, EvalError> {
    let mode = config.penalty.mode;
    let scope_label = |default: String| config.penalty.sigma_estimation_scope.clone().unwrap_or(default);
    match config.penalty.sigma {
        SigmaSetting::Fixed(sigma) => Ok(SigmaInfo {
            penalty: ResolvedPenalty::new(mode, sigma),
            source: "fixed",
            scope: scope_label("configured".into()),
        }),
        SigmaSetting::Estimate => {
            let scorer = suite.identities().get("text_image_scorer").cloned().unwrap_or_default();
            let sigma = SigmaCache::new().get_or_estimate(&scorer, &manifest.content_hash(), &manifest.samples, suite)?;
            Ok(SigmaInfo {
                penalty: ResolvedPenalty::new(mode, sigma),
                source: "estimated",
                scope: scope_label(format!("all {} manifest samples", manifest.samples.len())),
            })
        }
    }
}

type GroupKey = (String, String, String);

fn group_key(s: &EvalSample) -> GroupKey {
    (s.method_id.clone(), s.subject.subject_id.clone(), s.prompt.prompt_id.clone())
}

/// Output images of every (method, subject, prompt) group that covers all
/// of the subject's images.
fn complete_groups(samples: &[EvalSample]) -> BTreeMap<GroupKey, Vec<ImageRef>> {
    let mut groups: BTreeMap<GroupKey, Vec<Option<ImageRef>>> = BTreeMap::new();
    for s in samples {
        let slots = groups
            .entry(group_key(s))
            .or_insert_with(|| vec![None; s.subject.image_refs.len()]);
        slots[s.input_image_index] = Some(s.output_image_ref.clone());
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| {
            let outputs: Option<Vec<ImageRef>> = v.into_iter().collect();
            outputs.filter(|o| o.len() >= 2).map(|o| (k, o))
        })
        .collect()
}

#[derive(Debug, Default)]
struct SampleWork {
    metrics: BTreeMap<String, MetricValue>,
    penalized: Option<bool>,
    input_has_face: Option<bool>,
    admissible_faces: Option<usize>,
    relations_annotated: usize,
    relations_unmatched: usize,
    aps_entry: Option<PooledSample>,
    failures: Vec<(String, String)>,
}

impl SampleWork {
    fn set(&mut self, metric: Metric, value: MetricValue) {
        if let MetricValue::Failed(e) = &value {
            self.failures.push((metric.key().to_string(), e.clone()));
        }
        self.metrics.insert(metric.key().to_string(), value);
    }
}

struct Ctx<'a> {
    metrics: &'a [Metric],
    suite: &'a BackendSuite,
    ident: IdentityScoreConfig,
    matching: ObjectMatchConfig,
    resources: &'a EvalResources,
    penalty: Option<ResolvedPenalty>,
    sis_values: &'a HashMap<GroupKey, Result<f64, String>>,
}

fn failed(e: impl std::fmt::Display) -> MetricValue {
    MetricValue::Failed(e.to_string())
}

fn evaluate_sample(s: &EvalSample, ctx: &Ctx<'_>) -> SampleWork {
    let mut w = SampleWork::default();
    let has = |m: Metric| ctx.metrics.contains(&m);
    let single_image = s.subject.image_refs.len() < 2;

    if let Some(pen) = &ctx.penalty {
        match identity::ips(s, ctx.suite, &ctx.ident, pen) {
            Ok(o) => {
                w.penalized = Some(o.indicator == 0);
                w.input_has_face = Some(o.input_has_face);
                w.admissible_faces = Some(o.admissible_output_faces);
                if has(Metric::Ips) {
                    w.set(Metric::Ips, MetricValue::Value(o.score));
                }
            }
            Err(e) if has(Metric::Ips) => w.set(Metric::Ips, failed(e)),
            Err(_) => {}
        }
        if has(Metric::SisFast) {
            let v = if single_image {
                MetricValue::NotApplicable("subject has a single image".into())
            } else {
                match identity::sis_fast(
                    &s.subject,
                    s.input_image_index,
                    &s.output_image_ref,
                    &s.prompt.text,
                    ctx.suite,
                    &ctx.ident,
                    pen,
                ) {
                    Ok(v) => MetricValue::Value(v),
                    Err(e) => failed(e),
                }
            };
            w.set(Metric::SisFast, v);
        }
        if has(Metric::Sis) {
            let v = if single_image {
                MetricValue::NotApplicable("subject has a single image".into())
            } else {
                match ctx.sis_values.get(&group_key(s)) {
                    Some(Ok(v)) => MetricValue::Value(*v),
                    Some(Err(e)) => failed(e),
                    None => MetricValue::NotApplicable("no output for some subject image".into()),
                }
            };
            w.set(Metric::Sis, v);
        }
        if has(Metric::Aps) {
            let bank = ctx.resources.bank.as_ref().expect("bank checked upfront");
            match identity::aps_pool_entry(s, bank, ctx.suite, &ctx.ident, pen) {
                Ok(entry) => {
                    w.set(Metric::Aps, MetricValue::Pooled { included: entry.included });
                    w.aps_entry = Some(entry);
                }
                Err(e) => w.set(Metric::Aps, failed(e)),
            }
        }
    }

    if has(Metric::Goa) {
        let v = match context::goa(&s.prompt, &s.output_image_ref, ctx.suite, &ctx.matching) {
            Ok(o) => o.value.map_or_else(
                || MetricValue::NotApplicable("prompt references no objects".into()),
                MetricValue::Value,
            ),
            Err(e) => failed(e),
        };
        w.set(Metric::Goa, v);
    }
    if has(Metric::Rfs) {
        let v = match context::rfs(
            &s.prompt,
            &s.output_image_ref,
            ctx.suite,
            &ctx.resources.relation_map,
            &ctx.matching,
        ) {
            Ok(o) => {
                w.relations_annotated = o.per_relation.len();
                w.relations_unmatched = o.unmatched;
                o.value.map_or_else(
                    || MetricValue::NotApplicable("prompt has no annotated relations".into()),
                    MetricValue::Value,
                )
            }
            Err(e) => failed(e),
        };
        w.set(Metric::Rfs, v);
    }
    if has(Metric::ClipT) {
        let v = match ctx.suite.score_text_image(&s.prompt.text, &s.output_image_ref) {
            Ok(v) => MetricValue::Value(v),
            Err(e) => failed(e),
        };
        w.set(Metric::ClipT, v);
    }
    w
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Loads the config's resources and evaluates.
pub fn run_eval(
    manifest: &Manifest,
    config: &EvalConfig,
    suite: &BackendSuite,
    workers: usize,
) -> Result<MetricReport, EvalError> {
    let resources = EvalResources::load(config)?;
    run_eval_with(manifest, config, suite, &resources, workers)
}

pub fn run_eval_with(
    manifest: &Manifest,
    config: &EvalConfig,
    suite: &BackendSuite,
    resources: &EvalResources,
    workers: usize,
) -> Result<MetricReport, EvalError> {
    config.validate()?;
    let mut metrics = config.metrics.clone();
    metrics.sort();
    metrics.dedup();
    check_backends(&metrics, suite, &resources.relation_map)?;
    if metrics.contains(&Metric::Aps) {
        let bank = resources.bank.as_ref().ok_or(EvalError::MissingBank)?;
        bank.check().map_err(EvalError::Bank)?;
        bank.check_registry(&manifest.header.attribute_names).map_err(EvalError::Bank)?;
    }

    let sigma = if metrics.iter().any(|m| m.uses_penalty()) {
        Some(resolve_sigma(config, manifest, suite)?)
    } else {
        None
    };
    let penalty = sigma.as_ref().map(|s| s.penalty);
    let ident = config.identity_config();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::ThreadPool(e.to_string()))?;

    let mut order: Vec<&EvalSample> = manifest.samples.iter().collect();
    order.sort_by(|a, b| (&a.method_id, &a.sample_id).cmp(&(&b.method_id, &b.sample_id)));

    let (sis_values, works) = pool.install(|| {
        let sis_values: HashMap<GroupKey, Result<f64, String>> = match (&penalty, metrics.contains(&Metric::Sis)) {
            (Some(pen), true) => complete_groups(&manifest.samples)
                .into_par_iter()
                .map(|(key, outputs)| {
                    let s = manifest
                        .samples
                        .iter()
                        .find(|s| group_key(s) == key)
                        .expect("group built from samples");
                    let v = identity::sis(&s.subject, &outputs, &s.prompt.text, suite, &ident, pen)
                        .map_err(|e| e.to_string());
                    (key, v)
                })
                .collect(),
            _ => HashMap::new(),
        };
        let ctx = Ctx {
            metrics: &metrics,
            suite,
            ident: ident.clone(),
            matching: config.match_config(),
            resources,
            penalty,
            sis_values: &sis_values,
        };
        let works: Vec<SampleWork> = order.par_iter().map(|s| evaluate_sample(s, &ctx)).collect();
        (sis_values, works)
    });

    // Reductions, single-threaded in (method_id, sample_id) order.
    let mut methods: Vec<String> = order.iter().map(|s| s.method_id.clone()).collect();
    methods.dedup();
    let mut aggregates: BTreeMap<String, BTreeMap<String, Aggregate>> = BTreeMap::new();
    let mut coverage: BTreeMap<String, CoverageStats> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut samples = Vec::with_capacity(order.len());

    for method in &methods {
        let idx: Vec<usize> = (0..order.len()).filter(|&i| &order[i].method_id == method).collect();
        let mut cov = CoverageStats {
            samples: idx.len(),
            ..Default::default()
        };
        let mut per_metric = BTreeMap::new();
        for &metric in &metrics {
            let key = metric.key();
            let n_failed = idx
                .iter()
                .filter(|&&i| matches!(works[i].metrics.get(key), Some(MetricValue::Failed(_))))
                .count();
            let n_penalized = if matches!(metric, Metric::Ips | Metric::Aps) {
                idx.iter()
                    .filter(|&&i| {
                        works[i].penalized == Some(true)
                            && !matches!(works[i].metrics.get(key), Some(MetricValue::Failed(_)))
                    })
                    .count()
            } else {
                0
            };
            let aggregate = match metric {
                Metric::Aps => {
                    let bank = resources.bank.as_ref().expect("checked");
                    let pool: Vec<PooledSample> = idx.iter().filter_map(|&i| works[i].aps_entry.clone()).collect();
                    let outcome = identity::aps_from_pool(&pool, &bank.attribute_names);
                    cov.aps_coverage = Some(outcome.coverage);
                    cov.aps_per_attribute_auc = outcome.per_attribute_auc;
                    Aggregate {
                        value: outcome.value,
                        n_applicable: outcome.total,
                        n_penalized,
                        n_failed,
                    }
                }
                Metric::Sis => {
                    let mut seen: HashSet<&GroupKey> = HashSet::new();
                    let mut values = Vec::new();
                    let mut n_applicable = 0;
                    for &i in &idx {
                        if let Some(MetricValue::Value(_)) = works[i].metrics.get(key) {
                            n_applicable += 1;
                            let k = sis_values.get_key_value(&group_key(order[i])).expect("value came from group").0;
                            if seen.insert(k) {
                                values.push(works[i].metrics[key].value().unwrap());
                            }
                        }
                    }
                    Aggregate {
                        value: mean(&values),
                        n_applicable,
                        n_penalized,
                        n_failed,
                    }
                }
                _ => {
                    let values: Vec<f64> = idx.iter().filter_map(|&i| works[i].metrics.get(key)?.value()).collect();
                    Aggregate {
                        value: mean(&values),
                        n_applicable: values.len(),
                        n_penalized,
                        n_failed,
                    }
                }
            };
            per_metric.insert(key.to_string(), aggregate);
        }
        for &i in &idx {
            let w = &works[i];
            let s = order[i];
            cov.failed_samples += usize::from(!w.failures.is_empty());
            cov.input_without_face += usize::from(w.input_has_face == Some(false));
            cov.output_without_admissible_face += usize::from(w.admissible_faces == Some(0));
            cov.penalized += usize::from(w.penalized == Some(true));
            cov.relations_annotated += w.relations_annotated;
            cov.relations_unmatched += w.relations_unmatched;
            for (metric, error) in &w.failures {
                failures.push(Failure {
                    method_id: s.method_id.clone(),
                    sample_id: s.sample_id.clone(),
                    metric: metric.clone(),
                    error: error.clone(),
                });
            }
            samples.push(SampleResult {
                method_id: s.method_id.clone(),
                sample_id: s.sample_id.clone(),
                metrics: w.metrics.clone(),
                penalized: w.penalized,
            });
        }
        aggregates.insert(method.clone(), per_metric);
        coverage.insert(method.clone(), cov);
    }
    if !failures.is_empty() {
        log::warn!("{} metric evaluations failed; see report failures", failures.len());
    }

    Ok(MetricReport {
        report_version: REPORT_VERSION,
        manifest_hash: manifest.content_hash(),
        metrics: metrics.iter().map(|m| m.key().to_string()).collect(),
        methods,
        samples,
        aggregates,
        coverage,
        failures,
        config_snapshot: snapshot(config, &metrics, suite, resources, sigma.as_ref()),
    })
}

fn snapshot(
    config: &EvalConfig,
    metrics: &[Metric],
    suite: &BackendSuite,
    resources: &EvalResources,
    sigma: Option<&SigmaInfo>,
) -> serde_json::Value {
    let ident = config.identity_config();
    let matching = config.match_config();
    let penalty = match sigma {
        Some(s) => json!({
            "mode": s.penalty.mode.to_string(),
            "sigma": s.penalty.sigma,
            "sigma_source": s.source,
            "sigma_estimation_scope": s.scope,
        }),
        None => serde_json::Value::Null,
    };
    let bank = resources.bank.as_ref().map(|b| {
        json!({
            "attributes": b.attribute_names,
            "dimension": b.dimension,
            "source_dataset": b.training_meta.source_dataset,
            "embedder_identity": b.training_meta.embedder_identity,
            "seed": b.training_meta.seed,
        })
    });
    json!({
        "metrics": metrics.iter().map(|m| m.key()).collect::<Vec<_>>(),
        "penalty": penalty,
        "identity": {
            "alpha": ident.alpha,
            "similarity_floor": ident.similarity_floor,
            "multi_face_input_rule": ident.multi_face_input_rule,
            "classifier_bank": bank,
        },
        "context": {
            "detector_floor": matching.detector_floor,
            "human_synonyms": matching.human_synonyms,
            "plural_rules": matching.plural_rules,
            "min_stem": matching.min_stem,
            "relation_map": {
                "entries": resources.relation_map.entries,
                "unmapped_policy": resources.relation_map.unmapped_policy.to_string(),
            },
        },
        "rfs": { "denominator": "annotated" },
        "aps": {
            "output_face": "highest confidence above alpha",
            "aggregate": "mean attribute AUC over included samples times coverage",
        },
        "sis": {
            "per_sample": "value of the sample's (subject, prompt) group",
            "aggregate": "mean over complete groups",
        },
        "backends": suite.identities(),
    })
}
