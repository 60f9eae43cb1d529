//! End-to-end train/eval runs on a toy model: filtering, splitting, concept
//! training for each method, evaluation and sweeps.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{averaging_concept, svm_concept, LabeledActivations, SvmOptions};
use crate::dataset::{
    balanced_sample, exclusion_rules, filter_correct, make_split, render_prompt_from_pool,
    PromptInstance, PromptMode, Relation, SplitPlan, DEFAULT_SHOTS,
};
use crate::error::{Error, Result};
use crate::estimator::{
    build_lrc, estimate_jacobian, estimate_jacobian_first_token, invert_lre, train_lre,
    JacobianSample, Lrc, RelationalModel,
};
use crate::eval::{
    causality_counts, count_correct, summarize_seeds, ConceptCatalog, EditConfig, EvalReport,
    Excluded, MethodReport, RelationScore, SweepAxis, SweepRow,
};
use crate::rng::stream;
use crate::toymodel::{TokenId, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lrc,
    /// Jacobian of the first object token only, object layer forced to the
    /// final layer.
    LrcFirstTokenFinalLayer,
    Svm,
    Averaging,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lrc => "lrc",
            Method::LrcFirstTokenFinalLayer => "lrc_first_token_final_layer",
            Method::Svm => "svm",
            Method::Averaging => "averaging",
        }
    }
}

/// How the prompts behind each LRE are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LreSampling {
    /// One LRE per relation from `n_lre_samples` balanced training prompts.
    #[default]
    Balanced,
    /// One LRE per object, from a single training prompt of that object.
    SingleSameObject,
    /// One LRE per object, from a single training prompt of another object.
    SingleDifferentObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub subject_layer: usize,
    pub object_layer: usize,
    pub rank: usize,
    pub n_lre_samples: usize,
    pub beta: f64,
    /// Edited hook layers; `None` means all.
    pub edit_layers: Option<Vec<usize>>,
    pub split_fraction: f64,
    pub k_shots: usize,
    pub methods: Vec<Method>,
    pub lre_sampling: LreSampling,
    pub svm: SvmOptions,
    pub filter_correct: bool,
    pub causality: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            subject_layer: 0,
            object_layer: 2,
            rank: 192,
            n_lre_samples: 20,
            beta: 0.075,
            edit_layers: None,
            split_fraction: 0.5,
            k_shots: DEFAULT_SHOTS,
            methods: vec![Method::Lrc],
            lre_sampling: LreSampling::Balanced,
            svm: SvmOptions::default(),
            filter_correct: true,
            causality: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, model: &dyn RelationalModel) -> Result<()> {
        let max = model.final_layer();
        if self.subject_layer > max || self.object_layer > max {
            return Err(Error::InvalidArgument(format!(
                "subject_layer {} / object_layer {} outside 0..={max}",
                self.subject_layer, self.object_layer
            )));
        }
        if self.rank == 0 || self.rank > model.hidden_dim() {
            return Err(Error::RankOutOfRange {
                rank: self.rank,
                max: model.hidden_dim(),
            });
        }
        if self.n_lre_samples == 0 {
            return Err(Error::InvalidArgument(
                "n_lre_samples must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("methods must not be empty".into()));
        }
        Ok(())
    }
}

/// Filtered, split and rendered prompts for one relation under one seed.
#[derive(Debug, Clone)]
pub struct PreparedRelation {
    pub relation: Relation,
    pub split: SplitPlan,
    /// Few-shot training prompts, sorted by prompt id.
    pub train_prompts: Vec<PromptInstance>,
    /// Zero-shot test prompts, sorted by prompt id.
    pub test_prompts: Vec<PromptInstance>,
}

fn by_id(mut prompts: Vec<PromptInstance>) -> Vec<PromptInstance> {
    prompts.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    prompts
}

/// Filter, split, apply exclusions and render prompts.
pub fn prepare(
    model: &ToyModel,
    relations: &[Relation],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<PreparedRelation>, Vec<Excluded>)> {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for rel in relations {
        let filtered = if cfg.filter_correct {
            filter_correct(rel, model, seed)?
        } else {
            rel.clone()
        };
        if filtered.samples.is_empty() {
            excluded.push(Excluded {
                relation: rel.name.clone(),
                reason: "no samples answered correctly".into(),
            });
            continue;
        }
        let split = make_split(&filtered, cfg.split_fraction, seed)?;
        if let Some(reason) = exclusion_rules(&filtered, &split) {
            excluded.push(Excluded {
                relation: rel.name.clone(),
                reason: reason.to_string(),
            });
            continue;
        }
        let tok = model.tokenizer();
        let train_prompts = split
            .train
            .iter()
            .map(|s| {
                render_prompt_from_pool(
                    s,
                    &filtered,
                    &split.train,
                    PromptMode::FewShot,
                    cfg.k_shots,
                    seed,
                    tok,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let test_prompts = split
            .test
            .iter()
            .map(|s| {
                render_prompt_from_pool(
                    s,
                    &filtered,
                    &split.train,
                    PromptMode::ZeroShot,
                    0,
                    seed,
                    tok,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        kept.push(PreparedRelation {
            relation: filtered,
            split,
            train_prompts: by_id(train_prompts),
            test_prompts: by_id(test_prompts),
        });
    }
    Ok((kept, excluded))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct JacobianKey {
    tokens: Vec<TokenId>,
    subject_index: usize,
    positions: Vec<usize>,
    subject_layer: usize,
    object_layer: usize,
}

/// Memoized per-prompt Jacobians, shared across grid points of a sweep.
#[derive(Debug, Default)]
pub struct JacobianCache {
    entries: HashMap<JacobianKey, JacobianSample>,
}

impl JacobianCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(
        &mut self,
        model: &dyn RelationalModel,
        prompt: &PromptInstance,
        subject_layer: usize,
        object_layer: usize,
        first_token: bool,
    ) -> Result<JacobianSample> {
        let positions = if first_token {
            prompt.object_token_positions[..1.min(prompt.object_token_positions.len())].to_vec()
        } else {
            prompt.object_token_positions.clone()
        };
        let key = JacobianKey {
            tokens: prompt.tokens.clone(),
            subject_index: prompt.subject_index(),
            positions,
            subject_layer,
            object_layer,
        };
        if let Some(j) = self.entries.get(&key) {
            let mut j = j.clone();
            j.prompt_id = prompt.prompt_id.clone();
            return Ok(j);
        }
        let j = if first_token {
            estimate_jacobian_first_token(model, prompt, subject_layer, object_layer)?
        } else {
            estimate_jacobian(model, prompt, subject_layer, object_layer)?
        };
        self.entries.insert(key, j.clone());
        Ok(j)
    }
}

fn first_or_all(prompt: &PromptInstance, first_token: bool) -> &[usize] {
    if first_token {
        &prompt.object_token_positions[..1]
    } else {
        &prompt.object_token_positions
    }
}

/// Train the concept catalog for one relation with one method.
pub fn build_catalog(
    model: &ToyModel,
    prep: &PreparedRelation,
    method: Method,
    cfg: &PipelineConfig,
    seed: u64,
    cache: &mut JacobianCache,
) -> Result<ConceptCatalog> {
    let name = &prep.relation.name;
    let objects = prep.relation.objects();
    let concepts: Vec<Lrc> = match method {
        Method::Lrc | Method::LrcFirstTokenFinalLayer => {
            let first = method == Method::LrcFirstTokenFinalLayer;
            let object_layer = if first {
                model.final_layer()
            } else {
                cfg.object_layer
            };
            let lre_prompts = |ids: &[&PromptInstance], cache: &mut JacobianCache| -> Result<_> {
                let mut samples = ids
                    .iter()
                    .map(|p| cache.get(model, p, cfg.subject_layer, object_layer, first))
                    .collect::<Result<Vec<_>>>()?;
                samples.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
                let lre = train_lre(name, cfg.subject_layer, object_layer, &samples)?;
                invert_lre(&lre, cfg.rank)
            };
            let object_acts = |object: &str| -> Result<(Vec<_>, Vec<String>)> {
                let mine: Vec<&PromptInstance> = prep
                    .train_prompts
                    .iter()
                    .filter(|p| p.object == object)
                    .collect();
                let acts = mine
                    .iter()
                    .map(|p| model_object_activation(model, p, object_layer, first))
                    .collect::<Result<Vec<_>>>()?;
                Ok((acts, mine.iter().map(|p| p.prompt_id.clone()).collect()))
            };
            match cfg.lre_sampling {
                LreSampling::Balanced => {
                    let mut rng = stream(seed, &["lre-samples", name]);
                    let chosen = balanced_sample(&prep.split.train, cfg.n_lre_samples, &mut rng);
                    let picked: Vec<&PromptInstance> = prep
                        .train_prompts
                        .iter()
                        .filter(|p| {
                            chosen
                                .iter()
                                .any(|s| s.subject == p.subject && s.object == p.object)
                        })
                        .collect();
                    let inv = lre_prompts(&picked, cache)?;
                    objects
                        .iter()
                        .map(|o| {
                            let (acts, ids) = object_acts(o)?;
                            build_lrc(&inv, o, &acts, ids)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                LreSampling::SingleSameObject | LreSampling::SingleDifferentObject => {
                    let same = cfg.lre_sampling == LreSampling::SingleSameObject;
                    objects
                        .iter()
                        .map(|o| {
                            let pool: Vec<&PromptInstance> = prep
                                .train_prompts
                                .iter()
                                .filter(|p| (p.object == *o) == same)
                                .collect();
                            let mut rng = stream(seed, &["single-lre", name, o]);
                            let chosen = *pool.choose(&mut rng).ok_or_else(|| {
                                Error::InvalidArgument(format!(
                                    "no training prompt available for the LRE of {o:?}"
                                ))
                            })?;
                            let inv = lre_prompts(&[chosen], cache)?;
                            let (acts, ids) = object_acts(o)?;
                            build_lrc(&inv, o, &acts, ids)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            }
        }
        Method::Svm | Method::Averaging => {
            let data = labeled_subject_activations(model, prep, cfg.subject_layer)?;
            let svm = SvmOptions { seed, ..cfg.svm };
            objects
                .iter()
                .map(|o| match method {
                    Method::Svm => svm_concept(&data, o, &svm),
                    _ => averaging_concept(&data, o),
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    ConceptCatalog::new(name, cfg.subject_layer, concepts)
}

fn model_object_activation(
    model: &ToyModel,
    prompt: &PromptInstance,
    layer: usize,
    first_token: bool,
) -> Result<crate::linalg::Vector> {
    RelationalModel::object_activation(model, prompt, layer, first_or_all(prompt, first_token))
}

/// Subject activations of the few-shot training prompts.
pub fn labeled_subject_activations(
    model: &dyn RelationalModel,
    prep: &PreparedRelation,
    layer: usize,
) -> Result<LabeledActivations> {
    let activations = prep
        .train_prompts
        .iter()
        .map(|p| model.subject_activation(p, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledActivations {
        relation: prep.relation.name.clone(),
        subject_layer: layer,
        activations,
        labels: prep
            .train_prompts
            .iter()
            .map(|p| p.object.clone())
            .collect(),
        prompt_ids: prep
            .train_prompts
            .iter()
            .map(|p| p.prompt_id.clone())
            .collect(),
    })
}

pub fn category_name(rel: &Relation) -> String {
    serde_json::to_value(rel.category)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Accuracy and (optionally) causality of a catalog on the relation's test prompts.
pub fn score_catalog(
    model: &ToyModel,
    prep: &PreparedRelation,
    catalog: &ConceptCatalog,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<RelationScore> {
    let labeled = prep
        .test_prompts
        .iter()
        .map(|p| {
            Ok((
                model.subject_activation(p, catalog.subject_layer)?,
                p.object.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_test = labeled.len();
    let correct = count_correct(catalog, &labeled)?;
    let causal_successes = if cfg.causality && catalog.concepts.len() >= 2 {
        let edit = EditConfig {
            beta: cfg.beta,
            layers: cfg.edit_layers.clone(),
            counterfactual_seed: seed,
        };
        Some(causality_counts(catalog, &prep.test_prompts, model, &edit)?.0)
    } else {
        None
    };
    Ok(RelationScore {
        relation: prep.relation.name.clone(),
        category: category_name(&prep.relation),
        n_test,
        correct,
        accuracy: correct as f64 / n_test as f64,
        causal_successes,
        causality: causal_successes.map(|c| c as f64 / n_test as f64),
    })
}

/// Catalogs per relation for every configured method.
pub fn train_catalogs(
    model: &ToyModel,
    prepared: &[PreparedRelation],
    cfg: &PipelineConfig,
    seed: u64,
    cache: &mut JacobianCache,
) -> Result<BTreeMap<Method, Vec<ConceptCatalog>>> {
    let mut out = BTreeMap::new();
    for &m in &cfg.methods {
        let cats = prepared
            .iter()
            .map(|p| build_catalog(model, p, m, cfg, seed, cache))
            .collect::<Result<Vec<_>>>()?;
        out.insert(m, cats);
    }
    Ok(out)
}

pub fn evaluate_catalogs(
    model: &ToyModel,
    prepared: &[PreparedRelation],
    catalogs: &BTreeMap<Method, Vec<ConceptCatalog>>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<MethodReport>> {
    cfg.methods
        .iter()
        .map(|m| {
            let cats = catalogs.get(m).ok_or_else(|| {
                Error::InvalidArgument(format!("no catalogs for method {}", m.name()))
            })?;
            let scores = prepared
                .iter()
                .zip(cats)
                .map(|(p, c)| score_catalog(model, p, c, cfg, seed))
                .collect::<Result<Vec<_>>>()?;
            MethodReport::new(m.name(), scores)
        })
        .collect()
}

/// Full train + eval for one seed.
pub fn run(
    model: &ToyModel,
    relations: &[Relation],
    cfg: &PipelineConfig,
    seed: u64,
    cache: &mut JacobianCache,
) -> Result<EvalReport> {
    cfg.validate(model)?;
    let (prepared, excluded) = prepare(model, relations, cfg, seed)?;
    let catalogs = train_catalogs(model, &prepared, cfg, seed, cache)?;
    let methods = evaluate_catalogs(model, &prepared, &catalogs, cfg, seed)?;
    Ok(EvalReport {
        seed,
        methods,
        excluded,
    })
}

/// Config with one axis set to `value`.
pub fn with_axis(cfg: &PipelineConfig, axis: SweepAxis, value: f64) -> Result<PipelineConfig> {
    let as_index = |v: f64| -> Result<usize> {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{} grid value {v} is not a non-negative integer",
                axis.name()
            )));
        }
        Ok(v as usize)
    };
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Rank => c.rank = as_index(value)?,
        SweepAxis::SubjectLayer => c.subject_layer = as_index(value)?,
        SweepAxis::ObjectLayer => c.object_layer = as_index(value)?,
        SweepAxis::Beta => c.beta = value,
    }
    Ok(c)
}

/// Run every grid point under every seed; one row per (value, method).
pub fn sweep(
    model: &ToyModel,
    relations: &[Relation],
    cfg: &PipelineConfig,
    axis: SweepAxis,
    grid: &[f64],
    seeds: &[u64],
    cache: &mut JacobianCache,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    let mut rows = Vec::new();
    for &value in grid {
        let c = with_axis(cfg, axis, value)?;
        let reports = seeds
            .iter()
            .map(|&s| run(model, relations, &c, s, cache))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(summarize_seeds(value, &reports)?);
    }
    Ok(rows)
}
