//! Concept evaluation: argmax classification, multi-layer causal edits,
//! per-relation aggregation and parameter sweeps.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PromptInstance;
use crate::error::{Error, Result};
use crate::estimator::{Lrc, RelationalModel};
use crate::linalg::{dot, Vector};
use crate::rng::stream;
use crate::stats::{mean_std, MeanStd};
use crate::toymodel::{PatchSpec, TokenId, ToyModel};

/// Concept directions for one relation, keyed by object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCatalog {
    pub relation: String,
    pub subject_layer: usize,
    pub concepts: BTreeMap<String, Lrc>,
}

impl ConceptCatalog {
    pub fn new(relation: &str, subject_layer: usize, concepts: Vec<Lrc>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for c in concepts {
            if c.relation != relation || c.subject_layer != subject_layer {
                return Err(Error::InvalidArgument(format!(
                    "concept {}/{} at layer {} does not belong to catalog {relation} at layer {subject_layer}",
                    c.relation, c.object, c.subject_layer
                )));
            }
            if (c.vector.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "concept {} is not unit norm",
                    c.object
                )));
            }
            if map.insert(c.object.clone(), c).is_some() {
                return Err(Error::InvalidArgument("duplicate object in catalog".into()));
            }
        }
        Ok(ConceptCatalog {
            relation: relation.to_string(),
            subject_layer,
            concepts: map,
        })
    }

    pub fn get(&self, object: &str) -> Result<&Lrc> {
        self.concepts
            .get(object)
            .ok_or_else(|| Error::UnknownObject(object.to_string()))
    }

    pub fn objects(&self) -> impl Iterator<Item = &String> {
        self.concepts.keys()
    }
}

/// Object whose concept has the largest dot product with `activation`; ties
/// go to the lexicographically smallest object.
pub fn classify<'a>(catalog: &'a ConceptCatalog, activation: &[f64]) -> Result<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (object, c) in &catalog.concepts {
        if c.vector.dim() != activation.len() {
            return Err(Error::Shape(format!(
                "activation dim {} vs concept dim {}",
                activation.len(),
                c.vector.dim()
            )));
        }
        let score = dot(&c.vector, activation);
        // keys iterate in sorted order, so strict > keeps the first on ties
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((object, score));
        }
    }
    best.map(|(o, _)| o).ok_or(Error::Empty("concept catalog"))
}

/// Correct predictions over `activations` labeled with their true objects.
pub fn count_correct(catalog: &ConceptCatalog, labeled: &[(Vector, String)]) -> Result<usize> {
    let mut n = 0;
    for (a, object) in labeled {
        if classify(catalog, a)? == object {
            n += 1;
        }
    }
    Ok(n)
}

/// Fraction of test prompts classified correctly from their subject
/// activation at the catalog's layer.
pub fn classification_accuracy(
    catalog: &ConceptCatalog,
    prompts: &[PromptInstance],
    model: &dyn RelationalModel,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("test prompts"));
    }
    let labeled = prompts
        .iter()
        .map(|p| {
            Ok((
                model.subject_activation(p, catalog.subject_layer)?,
                p.object.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(count_correct(catalog, &labeled)? as f64 / prompts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub beta: f64,
    /// Hook layers to edit; `None` edits every layer `0..=L`.
    pub layers: Option<Vec<usize>>,
    pub counterfactual_seed: u64,
}

impl EditConfig {
    pub fn new(beta: f64, counterfactual_seed: u64) -> Self {
        EditConfig {
            beta,
            layers: None,
            counterfactual_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub success: bool,
    pub p_new: f64,
    pub p_old: f64,
    pub p_new_clean: f64,
    pub p_old_clean: f64,
}

/// Additive patches `beta * |h_l| * (v_new - v_old)` at the final subject
/// token, with norms taken from the clean run.
pub fn edit_patches(
    model: &ToyModel,
    prompt: &PromptInstance,
    v_old: &[f64],
    v_new: &[f64],
    cfg: &EditConfig,
) -> Result<Vec<PatchSpec>> {
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(Error::InvalidArgument(format!(
            "beta {} outside [0, 1]",
            cfg.beta
        )));
    }
    let layers: Vec<usize> = match &cfg.layers {
        Some(l) => l.clone(),
        None => (0..=model.final_layer()).collect(),
    };
    if let Some(&bad) = layers.iter().find(|&&l| l > model.final_layer()) {
        return Err(Error::HookOutOfRange {
            layer: bad,
            position: prompt.subject_index(),
            max_layer: model.final_layer(),
            seq_len: prompt.prompt_len,
        });
    }
    let clean = model.forward(prompt.prompt_tokens(), &[])?;
    let i = prompt.subject_index();
    let diff = Vector(v_new.to_vec()).sub(v_old);
    Ok(layers
        .into_iter()
        .map(|l| {
            let scale = cfg.beta * clean.residuals[l][i].norm();
            PatchSpec::add(l, i, diff.scaled(scale))
        })
        .collect())
}

/// Teacher-forced probability of `object` after `prompt`: the minimum over
/// the object's tokens of each token's next-token probability.
pub fn object_probability(
    model: &ToyModel,
    prompt: &PromptInstance,
    object: &[TokenId],
    patches: &[PatchSpec],
) -> Result<f64> {
    if object.is_empty() {
        return Err(Error::Span("object has no tokens".into()));
    }
    let (tokens, positions) = prompt.with_object_tokens(object);
    let out = model.forward(&tokens, patches)?;
    Ok(positions
        .iter()
        .zip(object)
        .map(|(&p, &t)| out.probs[p][t])
        .fold(f64::INFINITY, f64::min))
}

pub fn causal_edit(
    model: &ToyModel,
    prompt: &PromptInstance,
    v_old: &Lrc,
    v_new: &Lrc,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    let tok = |o: &str| {
        model
            .tokenizer()
            .encode(o)
            .map_err(|_| Error::UnknownObject(o.to_string()))
    };
    let old_tokens = tok(&v_old.object)?;
    let new_tokens = tok(&v_new.object)?;
    let patches = edit_patches(model, prompt, &v_old.vector, &v_new.vector, cfg)?;
    let p_new = object_probability(model, prompt, &new_tokens, &patches)?;
    let p_old = object_probability(model, prompt, &old_tokens, &patches)?;
    let p_new_clean = object_probability(model, prompt, &new_tokens, &[])?;
    let p_old_clean = object_probability(model, prompt, &old_tokens, &[])?;
    Ok(EditOutcome {
        success: p_new > p_old,
        p_new,
        p_old,
        p_new_clean,
        p_old_clean,
    })
}

/// Counterfactual object for each prompt, drawn in prompt order from one
/// seeded stream, uniformly among the catalog objects other than the true one.
pub fn draw_counterfactuals(
    catalog: &ConceptCatalog,
    prompts: &[PromptInstance],
    seed: u64,
) -> Result<Vec<String>> {
    if catalog.concepts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "causality needs at least two objects in catalog {}",
            catalog.relation
        )));
    }
    let mut rng = stream(seed, &["counterfactual", &catalog.relation]);
    prompts
        .iter()
        .map(|p| {
            catalog.get(&p.object)?;
            let others: Vec<&String> = catalog.objects().filter(|o| **o != p.object).collect();
            Ok(others
                .choose(&mut rng)
                .expect("at least one other")
                .to_string())
        })
        .collect()
}

/// Successful edits out of the number of prompts.
pub fn causality_counts(
    catalog: &ConceptCatalog,
    prompts: &[PromptInstance],
    model: &ToyModel,
    cfg: &EditConfig,
) -> Result<(usize, usize)> {
    let targets = draw_counterfactuals(catalog, prompts, cfg.counterfactual_seed)?;
    let outcomes = prompts
        .par_iter()
        .zip(targets.par_iter())
        .map(|(p, target)| {
            let v_old = catalog.get(&p.object)?;
            let v_new = catalog.get(target)?;
            causal_edit(model, p, v_old, v_new, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((outcomes.iter().filter(|o| o.success).count(), prompts.len()))
}

pub fn causality_score(
    catalog: &ConceptCatalog,
    prompts: &[PromptInstance],
    model: &ToyModel,
    cfg: &EditConfig,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("test prompts"));
    }
    let (s, n) = causality_counts(catalog, prompts, model, cfg)?;
    Ok(s as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub relation: String,
    pub category: String,
    pub n_test: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Absent when the model source cannot be edited.
    pub causal_successes: Option<usize>,
    pub causality: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: f64,
    pub causality: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledCounts {
    pub correct: usize,
    pub causal_successes: Option<usize>,
    pub trials: usize,
    pub accuracy: f64,
    pub causality: Option<f64>,
}

/// Scores for one method under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub per_relation: Vec<RelationScore>,
    /// Unweighted mean over relations.
    pub relation_weighted: Aggregate,
    /// Raw counts pooled over all test prompts.
    pub pooled: PooledCounts,
}

impl MethodReport {
    pub fn new(method: &str, per_relation: Vec<RelationScore>) -> Result<Self> {
        let relation_weighted = aggregate(&per_relation)?;
        let trials: usize = per_relation.iter().map(|r| r.n_test).sum();
        let correct: usize = per_relation.iter().map(|r| r.correct).sum();
        let causal_successes = per_relation
            .iter()
            .map(|r| r.causal_successes)
            .sum::<Option<usize>>();
        Ok(MethodReport {
            method: method.to_string(),
            relation_weighted,
            pooled: PooledCounts {
                correct,
                causal_successes,
                trials,
                accuracy: correct as f64 / trials as f64,
                causality: causal_successes.map(|c| c as f64 / trials as f64),
            },
            per_relation,
        })
    }
}

/// Unweighted mean over relations, so relations with many test prompts do
/// not dominate.
pub fn aggregate(per_relation: &[RelationScore]) -> Result<Aggregate> {
    if per_relation.is_empty() {
        return Err(Error::Empty("evaluated relations"));
    }
    let n = per_relation.len() as f64;
    let accuracy = per_relation.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let causality = per_relation
        .iter()
        .map(|r| r.causality)
        .sum::<Option<f64>>()
        .map(|c| c / n);
    Ok(Aggregate {
        accuracy,
        causality,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub relation: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub methods: Vec<MethodReport>,
    pub excluded: Vec<Excluded>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Rank,
    SubjectLayer,
    ObjectLayer,
    Beta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::SubjectLayer => "subject-layer",
            SweepAxis::ObjectLayer => "object-layer",
            SweepAxis::Beta => "beta",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "subject-layer" => Ok(SweepAxis::SubjectLayer),
            "object-layer" => Ok(SweepAxis::ObjectLayer),
            "beta" => Ok(SweepAxis::Beta),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis {other:?} (expected rank, subject-layer, object-layer or beta)"
            ))),
        }
    }
}

/// One grid point: seed-level mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub value: f64,
    pub accuracy: MeanStd,
    pub causality: Option<MeanStd>,
    pub seeds: Vec<u64>,
}

/// Collapse per-seed reports for one grid value into one row per method.
pub fn summarize_seeds(value: f64, reports: &[EvalReport]) -> Result<Vec<SweepRow>> {
    let first = reports.first().ok_or(Error::Empty("seed reports"))?;
    first
        .methods
        .iter()
        .map(|m| {
            let per_seed: Vec<&MethodReport> = reports
                .iter()
                .map(|r| r.method(&m.method).ok_or(Error::Empty("method report")))
                .collect::<Result<_>>()?;
            let acc: Vec<f64> = per_seed
                .iter()
                .map(|r| r.relation_weighted.accuracy)
                .collect();
            let caus: Option<Vec<f64>> = per_seed
                .iter()
                .map(|r| r.relation_weighted.causality)
                .collect();
            Ok(SweepRow {
                method: m.method.clone(),
                value,
                accuracy: mean_std(&acc)?,
                causality: caus.map(|c| mean_std(&c)).transpose()?,
                seeds: reports.iter().map(|r| r.seed).collect(),
            })
        })
        .collect()
}
