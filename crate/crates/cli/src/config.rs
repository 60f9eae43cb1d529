//! Experiment configuration: one JSON file plus flag and environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use relcon::pipeline::PipelineConfig;
use relcon::synthworld::SynthSpec;
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "RELCON_SEED";
pub const DEFAULT_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

/// Where the model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// Generate a synthetic world (over `dataset` when given).
    Synthworld(SynthSpec),
    /// A directory written by `world generate` or by `train`.
    World(PathBuf),
    /// A toy model checkpoint; needs `dataset`.
    Checkpoint(PathBuf),
    /// An activation dump from an external model.
    Dump(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub path: PathBuf,
    pub dataset: Option<PathBuf>,
    pub model: ModelSource,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub rank: Option<usize>,
    pub beta: Option<f64>,
}

pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| anyhow!("seed {x:?}: {e}"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("seed list is empty");
    }
    Ok(seeds)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn take<T: serde::de::DeserializeOwned>(
    obj: &mut Map<String, Value>,
    key: &str,
    file: &Path,
) -> anyhow::Result<Option<T>> {
    obj.remove(key)
        .map(|v| {
            serde_json::from_value(v).with_context(|| format!("{}: field `{key}`", file.display()))
        })
        .transpose()
}

fn parse_model(v: Value, base: &Path, file: &Path) -> anyhow::Result<ModelSource> {
    let field = |what: &str| format!("{}: field `model.{what}`", file.display());
    let Value::Object(mut m) = v else {
        bail!(
            "{}: field `model` must be an object with one of synthworld, world, checkpoint, dump",
            file.display()
        );
    };
    if m.len() != 1 {
        bail!(
            "{}: field `model` must have exactly one of synthworld, world, checkpoint, dump",
            file.display()
        );
    }
    let (kind, value) = m
        .iter_mut()
        .next()
        .map(|(k, v)| (k.clone(), v.take()))
        .expect("one entry");
    let path = |v: Value| -> anyhow::Result<PathBuf> {
        let s: String = serde_json::from_value(v).with_context(|| field(&kind))?;
        Ok(resolve(base, &s))
    };
    Ok(match kind.as_str() {
        "synthworld" => match value {
            Value::String(s) => {
                let p = resolve(base, &s);
                let text = std::fs::read_to_string(&p)
                    .with_context(|| format!("{}: {}", field("synthworld"), p.display()))?;
                ModelSource::Synthworld(
                    serde_json::from_str(&text)
                        .with_context(|| format!("{}: {}", field("synthworld"), p.display()))?,
                )
            }
            v => ModelSource::Synthworld(
                serde_json::from_value(v).with_context(|| field("synthworld"))?,
            ),
        },
        "world" => ModelSource::World(path(value)?),
        "checkpoint" => ModelSource::Checkpoint(path(value)?),
        "dump" => ModelSource::Dump(path(value)?),
        other => bail!("{}: unknown model source `model.{other}`", file.display()),
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, path, overrides)
    }

    pub fn parse(text: &str, path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let v: Value = serde_json::from_str(text)
            .with_context(|| format!("{}: invalid JSON", path.display()))?;
        let Value::Object(mut obj) = v else {
            bail!("{}: config must be a JSON object", path.display());
        };
        let dataset: Option<String> = take(&mut obj, "dataset", path)?;
        let model = obj
            .remove("model")
            .ok_or_else(|| anyhow!("{}: missing field `model`", path.display()))
            .and_then(|m| parse_model(m, &base, path))?;
        let seeds: Option<Vec<u64>> = take(&mut obj, "seeds", path)?;
        let output_dir: Option<String> = take(&mut obj, "output_dir", path)?;
        let mut pipeline: PipelineConfig = serde_json::from_value(Value::Object(obj))
            .with_context(|| format!("{}: pipeline settings", path.display()))?;

        let mut seeds = seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
        if let Ok(env) = std::env::var(SEED_ENV) {
            seeds =
                parse_seeds(&env).with_context(|| format!("environment variable {SEED_ENV}"))?;
        }
        if let Some(s) = &overrides.seeds {
            seeds = s.clone();
        }
        if seeds.is_empty() {
            bail!("{}: field `seeds` must not be empty", path.display());
        }
        let output_dir = overrides
            .output_dir
            .clone()
            .or_else(|| output_dir.map(|o| resolve(&base, &o)))
            .ok_or_else(|| anyhow!("{}: missing field `output_dir`", path.display()))?;
        if let Some(r) = overrides.rank {
            pipeline.rank = r;
        }
        if let Some(b) = overrides.beta {
            pipeline.beta = b;
        }
        let dataset = dataset.map(|d| resolve(&base, &d));
        match (&model, &dataset) {
            (ModelSource::Checkpoint(_), None) => {
                bail!(
                    "{}: missing field `dataset` (required with a checkpoint model)",
                    path.display()
                )
            }
            (_, Some(d)) if !d.is_file() => {
                bail!(
                    "{}: field `dataset`: {} does not exist",
                    path.display(),
                    d.display()
                )
            }
            _ => {}
        }
        if pipeline.rank == 0 {
            bail!("{}: field `rank` must be at least 1", path.display());
        }
        Ok(ExperimentConfig {
            path: path.to_path_buf(),
            dataset,
            model,
            seeds,
            output_dir,
            pipeline,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::parse(json, Path::new("/tmp/cfg.json"), &Overrides::default())
    }

    #[test]
    fn minimal_config() {
        let c = parse(r#"{"model": {"world": "w"}, "output_dir": "out", "rank": 8}"#).unwrap();
        assert_eq!(c.model, ModelSource::World("/tmp/w".into()));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/out"));
        assert_eq!(c.pipeline.rank, 8);
        assert_eq!(c.pipeline.beta, 0.075);
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse(r#"{"model": {"checkpoint": "m"}, "output_dir": "o"}"#).unwrap_err();
        assert!(format!("{e:#}").contains("`dataset`"));
        let e = parse(r#"{"model": {"world": "w"}}"#).unwrap_err();
        assert!(format!("{e:#}").contains("`output_dir`"));
        let e = parse(r#"{"model": {"world": "w"}, "output_dir": "o", "rnak": 3}"#).unwrap_err();
        assert!(format!("{e:#}").contains("rnak"));
        let e = parse(r#"{"model": {"world": "w"}, "output_dir": "o", "seeds": []}"#).unwrap_err();
        assert!(format!("{e:#}").contains("`seeds`"));
    }

    #[test]
    fn seed_list_parsing() {
        assert_eq!(parse_seeds("42, 43").unwrap(), vec![42, 43]);
        assert!(parse_seeds("x").is_err());
    }
}
