//! `train`, `eval` and `sweep`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use relcon::baselines::{averaging_concept, svm_concept, LabeledActivations, SvmOptions};
use relcon::dataset::{load_relations, Relation};
use relcon::eval::{
    count_correct, ConceptCatalog, EvalReport, MethodReport, RelationScore, SweepAxis, SweepRow,
};
use relcon::pipeline::{evaluate_catalogs, prepare, sweep, train_catalogs, JacobianCache, Method};
use relcon::store::{
    self, catalogs_from, concept_store, load_world, model_from, pipeline_from_dump, save_world,
    ActivationDump,
};
use relcon::synthworld::{generate, generate_for_relations, SynthSpec};
use relcon::toymodel::ToyModel;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, ModelSource};
use crate::Failure;

pub const WORLD_DIR: &str = "world";

pub struct Loaded {
    pub model: ToyModel,
    pub relations: Vec<Relation>,
}

fn dataset(cfg: &ExperimentConfig) -> Result<Option<Vec<Relation>>, Failure> {
    cfg.dataset
        .as_ref()
        .map(|p| {
            load_relations(p).with_context(|| format!("{}: field `dataset`", cfg.path.display()))
        })
        .transpose()
        .map_err(Failure::Validation)
}

fn generate_world(
    spec: &SynthSpec,
    relations: Option<Vec<Relation>>,
) -> anyhow::Result<relcon::synthworld::SynthWorld> {
    Ok(match relations {
        Some(r) => generate_for_relations(&r, spec)?,
        None => generate(spec)?,
    })
}

/// The model and relations behind a config. A synthetic world is generated
/// and saved under the output directory, or reused from there when
/// `reuse` is set and the saved spec matches.
pub fn load_model(cfg: &ExperimentConfig, reuse: bool) -> Result<Loaded, Failure> {
    let relations = dataset(cfg)?;
    match &cfg.model {
        ModelSource::Synthworld(spec) => {
            let dir = cfg.output_dir.join(WORLD_DIR);
            if reuse && dir.join(store::WORLD_MODEL_FILE).is_file() {
                let w = load_world(&dir).map_err(|e| Failure::Runtime(e.into()))?;
                if &w.spec == spec && relations.as_ref().is_none_or(|r| *r == w.relations) {
                    return Ok(Loaded {
                        model: w.model,
                        relations: w.relations,
                    });
                }
            }
            let w = generate_world(spec, relations).map_err(Failure::Runtime)?;
            save_world(&dir, &w).map_err(|e| Failure::Runtime(e.into()))?;
            Ok(Loaded {
                model: w.model,
                relations: w.relations,
            })
        }
        ModelSource::World(dir) => {
            let w = load_world(dir)
                .with_context(|| format!("{}: field `model.world`", cfg.path.display()))
                .map_err(Failure::Validation)?;
            Ok(Loaded {
                model: w.model,
                relations: relations.unwrap_or(w.relations),
            })
        }
        ModelSource::Checkpoint(p) => {
            let model = store::load(p)
                .and_then(|c| model_from(&c))
                .with_context(|| format!("{}: field `model.checkpoint`", cfg.path.display()))
                .map_err(Failure::Validation)?;
            Ok(Loaded {
                model,
                relations: relations.ok_or_else(|| {
                    Failure::Validation(anyhow!("{}: missing field `dataset`", cfg.path.display()))
                })?,
            })
        }
        ModelSource::Dump(_) => Err(Failure::Validation(anyhow!(
            "{}: field `model`: this command needs a toy model, not an activation dump",
            cfg.path.display()
        ))),
    }
}

fn load_dump(cfg: &ExperimentConfig, path: &Path) -> Result<ActivationDump, Failure> {
    store::load(path)
        .and_then(|c| ActivationDump::from_container(&c))
        .with_context(|| format!("{}: field `model.dump`", cfg.path.display()))
        .map_err(Failure::Validation)
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

fn concepts_path(dir: &Path, m: Method) -> PathBuf {
    dir.join(format!("concepts-{}.relcon", m.name()))
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    store::write_atomic(path, &bytes)?;
    Ok(())
}

fn mkdir(p: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(p)
        .with_context(|| format!("creating {}", p.display()))
        .map_err(Failure::Runtime)
}

// ---------------------------------------------------------------------------

pub fn train(cfg: &ExperimentConfig) -> Result<(), Failure> {
    mkdir(&cfg.output_dir)?;
    if let ModelSource::Dump(p) = &cfg.model {
        let dump = load_dump(cfg, p)?;
        return train_from_dump(cfg, &dump);
    }
    let loaded = load_model(cfg, false)?;
    cfg.pipeline
        .validate(&loaded.model)
        .with_context(|| format!("{}: pipeline settings", cfg.path.display()))
        .map_err(Failure::Validation)?;
    let mut cache = JacobianCache::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed);
        mkdir(&dir)?;
        let mut run = || -> anyhow::Result<()> {
            let (prepared, excluded) =
                prepare(&loaded.model, &loaded.relations, &cfg.pipeline, seed)?;
            let catalogs =
                train_catalogs(&loaded.model, &prepared, &cfg.pipeline, seed, &mut cache)?;
            for (m, cats) in &catalogs {
                let info = json!({"seed": seed, "method": m.name(), "rank": cfg.pipeline.rank,
                                  "object_layer": cfg.pipeline.object_layer});
                store::save(&concepts_path(&dir, *m), &concept_store(cats, info))?;
            }
            let summary: Vec<_> = prepared
                .iter()
                .map(|p| json!({"relation": p.relation.name, "n_train": p.split.train.len(), "n_test": p.split.test.len()}))
                .collect();
            write_json(
                &dir.join("train.json"),
                &json!({"seed": seed, "relations": summary, "excluded": excluded}),
            )
        };
        run()
            .with_context(|| format!("seed {seed}"))
            .map_err(Failure::Runtime)?;
        eprintln!("trained seed {seed} -> {}", dir.display());
    }
    Ok(())
}

fn dump_labeled(dump: &ActivationDump) -> BTreeMap<String, LabeledActivations> {
    let mut recs: Vec<_> = dump.records.iter().collect();
    recs.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    let mut out: BTreeMap<String, LabeledActivations> = BTreeMap::new();
    for r in recs {
        let e = out
            .entry(r.relation.clone())
            .or_insert_with(|| LabeledActivations {
                relation: r.relation.clone(),
                subject_layer: dump.subject_layer,
                ..Default::default()
            });
        e.activations.push(r.subject_activation.clone());
        e.labels.push(r.object.clone());
        e.prompt_ids.push(r.prompt_id.clone());
    }
    out
}

fn dump_catalogs(
    cfg: &ExperimentConfig,
    dump: &ActivationDump,
    m: Method,
    seed: u64,
) -> anyhow::Result<Vec<ConceptCatalog>> {
    match m {
        Method::Lrc => Ok(pipeline_from_dump(dump, cfg.pipeline.rank)?),
        Method::LrcFirstTokenFinalLayer => Err(anyhow!(
            "method {} needs per-token jacobians, which activation dumps do not carry",
            m.name()
        )),
        Method::Svm | Method::Averaging => dump_labeled(dump)
            .values()
            .map(|data| {
                let mut objects = data.labels.clone();
                objects.sort();
                objects.dedup();
                let svm = SvmOptions {
                    seed,
                    ..cfg.pipeline.svm
                };
                let concepts = objects
                    .iter()
                    .map(|o| match m {
                        Method::Svm => svm_concept(data, o, &svm),
                        _ => averaging_concept(data, o),
                    })
                    .collect::<relcon::Result<Vec<_>>>()?;
                Ok(ConceptCatalog::new(
                    &data.relation,
                    data.subject_layer,
                    concepts,
                )?)
            })
            .collect(),
    }
}

fn train_from_dump(cfg: &ExperimentConfig, dump: &ActivationDump) -> Result<(), Failure> {
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed);
        mkdir(&dir)?;
        for &m in &cfg.pipeline.methods {
            let cats = dump_catalogs(cfg, dump, m, seed).map_err(Failure::Runtime)?;
            let info = json!({"seed": seed, "method": m.name(), "rank": cfg.pipeline.rank, "model": dump.model_name});
            store::save(&concepts_path(&dir, m), &concept_store(&cats, info))
                .map_err(|e| Failure::Runtime(e.into()))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn load_catalogs(dir: &Path, m: Method) -> anyhow::Result<Vec<ConceptCatalog>> {
    let p = concepts_path(dir, m);
    let c = store::load(&p).with_context(|| format!("{} (run `train` first)", p.display()))?;
    Ok(catalogs_from(&c)?)
}

pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>, Failure> {
    let reports = match &cfg.model {
        ModelSource::Dump(p) => {
            let dump = load_dump(cfg, p)?;
            cfg.seeds
                .iter()
                .map(|&s| eval_dump(cfg, &dump, s))
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(Failure::Runtime)?
        }
        _ => {
            let loaded = load_model(cfg, true)?;
            cfg.pipeline
                .validate(&loaded.model)
                .with_context(|| format!("{}: pipeline settings", cfg.path.display()))
                .map_err(Failure::Validation)?;
            cfg.seeds
                .iter()
                .map(|&seed| {
                    let dir = seed_dir(cfg, seed);
                    let (prepared, excluded) = prepare(&loaded.model, &loaded.relations, &cfg.pipeline, seed)?;
                    let mut catalogs = BTreeMap::new();
                    for &m in &cfg.pipeline.methods {
                        let cats = load_catalogs(&dir, m)?;
                        let names: Vec<&str> = cats.iter().map(|c| c.relation.as_str()).collect();
                        let want: Vec<&str> = prepared.iter().map(|p| p.relation.name.as_str()).collect();
                        if names != want {
                            return Err(anyhow!(
                                "{}: stored catalogs cover {names:?} but this config evaluates {want:?}; rerun `train`",
                                concepts_path(&dir, m).display()
                            ));
                        }
                        catalogs.insert(m, cats);
                    }
                    let methods = evaluate_catalogs(&loaded.model, &prepared, &catalogs, &cfg.pipeline, seed)?;
                    Ok(EvalReport { seed, methods, excluded })
                })
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(Failure::Runtime)?
        }
    };
    write_eval(cfg, &reports).map_err(Failure::Runtime)?;
    Ok(reports)
}

/// Classification over every dump record; no causal edits without a live model.
fn eval_dump(
    cfg: &ExperimentConfig,
    dump: &ActivationDump,
    seed: u64,
) -> anyhow::Result<EvalReport> {
    let dir = seed_dir(cfg, seed);
    let labeled = dump_labeled(dump);
    let methods = cfg
        .pipeline
        .methods
        .iter()
        .map(|&m| {
            let scores = load_catalogs(&dir, m)?
                .iter()
                .map(|cat| {
                    let data = labeled.get(&cat.relation).ok_or_else(|| {
                        anyhow!("dump has no records for relation {:?}", cat.relation)
                    })?;
                    let pairs: Vec<_> = data
                        .activations
                        .iter()
                        .cloned()
                        .zip(data.labels.iter().cloned())
                        .collect();
                    let correct = count_correct(cat, &pairs)?;
                    Ok(RelationScore {
                        relation: cat.relation.clone(),
                        category: String::new(),
                        n_test: pairs.len(),
                        correct,
                        accuracy: correct as f64 / pairs.len() as f64,
                        causal_successes: None,
                        causality: None,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(MethodReport::new(m.name(), scores)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(EvalReport {
        seed,
        methods,
        excluded: Vec::new(),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_count(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY_CSV: &str = "eval_summary.csv";
pub const EVAL_JSON: &str = "eval_report.json";

fn write_eval(cfg: &ExperimentConfig, reports: &[EvalReport]) -> anyhow::Result<()> {
    let mut rows = csv::Writer::from_writer(Vec::new());
    rows.write_record([
        "seed",
        "method",
        "relation",
        "category",
        "n_test",
        "accuracy",
        "causality",
    ])?;
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record([
        "seed",
        "method",
        "aggregation",
        "n_relations",
        "n_test",
        "correct",
        "causal_successes",
        "accuracy",
        "causality",
    ])?;
    for r in reports {
        for m in &r.methods {
            for s in &m.per_relation {
                rows.write_record([
                    r.seed.to_string(),
                    m.method.clone(),
                    s.relation.clone(),
                    s.category.clone(),
                    s.n_test.to_string(),
                    s.accuracy.to_string(),
                    opt(s.causality),
                ])?;
            }
            let n_rel = m.per_relation.len().to_string();
            summary.write_record([
                r.seed.to_string(),
                m.method.clone(),
                "relation_weighted".into(),
                n_rel.clone(),
                m.pooled.trials.to_string(),
                String::new(),
                String::new(),
                m.relation_weighted.accuracy.to_string(),
                opt(m.relation_weighted.causality),
            ])?;
            summary.write_record([
                r.seed.to_string(),
                m.method.clone(),
                "pooled".into(),
                n_rel,
                m.pooled.trials.to_string(),
                m.pooled.correct.to_string(),
                opt_count(m.pooled.causal_successes),
                m.pooled.accuracy.to_string(),
                opt(m.pooled.causality),
            ])?;
        }
    }
    store::write_atomic(&cfg.output_dir.join(EVAL_CSV), &rows.into_inner()?)?;
    store::write_atomic(
        &cfg.output_dir.join(EVAL_SUMMARY_CSV),
        &summary.into_inner()?,
    )?;
    write_json(&cfg.output_dir.join(EVAL_JSON), &reports)?;
    Ok(())
}

// ---------------------------------------------------------------------------

/// `a,b,c` or inclusive `start:stop:step`.
pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| anyhow!("grid value {s:?}: {e}"))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts[..] {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(anyhow!(
                    "grid {spec:?}: need start <= stop and a positive step"
                ));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            // snap to the step's decimal places to avoid 0.30000000000000004
            let decimals = parts[2].trim().split('.').nth(1).map_or(0, str::len) as i32;
            let snap = |x: f64| {
                let f = 10f64.powi(decimals.max(0));
                (x * f).round() / f
            };
            (0..=n).map(|i| snap(a + i as f64 * step)).collect()
        }
        [_] => spec
            .split(',')
            .map(num)
            .collect::<anyhow::Result<Vec<_>>>()?,
        _ => return Err(anyhow!("grid {spec:?}: expected a,b,c or start:stop:step")),
    };
    if grid.is_empty() {
        return Err(anyhow!("grid {spec:?} is empty"));
    }
    Ok(grid)
}

pub fn default_grid(axis: SweepAxis, model: &ToyModel) -> Vec<f64> {
    match axis {
        SweepAxis::Beta => parse_grid("0:0.1:0.005").expect("valid default"),
        SweepAxis::Rank => {
            let h = model.hidden_dim();
            let mut g: Vec<f64> = std::iter::successors(Some(1usize), |r| Some(r * 2))
                .take_while(|&r| r < h)
                .map(|r| r as f64)
                .collect();
            g.push(h as f64);
            g
        }
        SweepAxis::SubjectLayer | SweepAxis::ObjectLayer => {
            (0..=model.final_layer()).map(|l| l as f64).collect()
        }
    }
}

pub fn sweep_file(axis: SweepAxis) -> String {
    format!("sweep-{}.csv", axis.name())
}

pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    grid: Option<&str>,
) -> Result<Vec<SweepRow>, Failure> {
    let loaded = load_model(cfg, true)?;
    let grid = match grid {
        Some(g) => parse_grid(g).map_err(Failure::Validation)?,
        None => default_grid(axis, &loaded.model),
    };
    mkdir(&cfg.output_dir)?;
    let rows = sweep(
        &loaded.model,
        &loaded.relations,
        &cfg.pipeline,
        axis,
        &grid,
        &cfg.seeds,
        &mut JacobianCache::new(),
    )
    .map_err(|e| match e {
        relcon::Error::RankOutOfRange { .. } | relcon::Error::InvalidArgument(_) => {
            Failure::Validation(e.into())
        }
        e => Failure::Runtime(e.into()),
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>| -> anyhow::Result<()> {
        w.write_record([
            "axis",
            "value",
            "method",
            "n_seeds",
            "accuracy_mean",
            "accuracy_std",
            "causality_mean",
            "causality_std",
        ])?;
        for r in &rows {
            w.write_record([
                axis.name().to_string(),
                r.value.to_string(),
                r.method.clone(),
                r.seeds.len().to_string(),
                r.accuracy.mean.to_string(),
                r.accuracy.std.to_string(),
                opt(r.causality.map(|c| c.mean)),
                opt(r.causality.map(|c| c.std)),
            ])?;
        }
        Ok(())
    };
    write(&mut w).map_err(Failure::Runtime)?;
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::Runtime(anyhow!("{e}")))?;
    store::write_atomic(&cfg.output_dir.join(sweep_file(axis)), &bytes)
        .map_err(|e| Failure::Runtime(e.into()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("1,2,4").unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(
            parse_grid("0:0.02:0.005").unwrap(),
            vec![0.0, 0.005, 0.01, 0.015, 0.02]
        );
        assert_eq!(parse_grid("2:8:2").unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
        assert!(parse_grid("1:0:1").is_err());
        assert!(parse_grid("a").is_err());
    }
}
