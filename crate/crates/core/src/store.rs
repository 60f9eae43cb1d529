//! The RELCON artifact container and the typed artifacts stored in it.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic         6 bytes  "RELCON"
//! version       u16      1
//! kind          u8       0 concept_store, 1 lre, 2 checkpoint,
//!                        3 activation_dump, 4 synth_world
//! reserved      u8       0
//! metadata_len  u64
//! metadata      UTF-8 JSON object; its "tensors" array names every tensor
//! tensor_count  u32
//! per tensor:
//!   name_len    u16
//!   name        UTF-8
//!   dtype       u8       0 f32, 1 f64
//!   ndim        u8
//!   shape       u64 x ndim
//!   byte_len    u64      product(shape) * dtype size
//!   data        byte_len bytes, row-major
//! ```
//!
//! f32 tensors are widened to f64 on load; a tensor keeps its stored dtype so
//! saving it again writes the same bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{parse_relations, Relation};
use crate::error::{Error, Result};
use crate::estimator::{build_lrc, invert_lre, train_lre, JacobianSample, Lrc, Lre, Provenance};
use crate::eval::ConceptCatalog;
use crate::linalg::{Matrix, Vector};
use crate::synthworld::{SynthSpec, SynthWorld, TrueAffine};
use crate::toymodel::{Params, ToyConfig, ToyModel};

pub const MAGIC: &[u8; 6] = b"RELCON";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    ConceptStore,
    Lre,
    Checkpoint,
    ActivationDump,
    SynthWorld,
}

impl ContainerKind {
    fn code(self) -> u8 {
        match self {
            ContainerKind::ConceptStore => 0,
            ContainerKind::Lre => 1,
            ContainerKind::Checkpoint => 2,
            ContainerKind::ActivationDump => 3,
            ContainerKind::SynthWorld => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ContainerKind::ConceptStore,
            1 => ContainerKind::Lre,
            2 => ContainerKind::Checkpoint,
            3 => ContainerKind::ActivationDump,
            4 => ContainerKind::SynthWorld,
            _ => return Err(Error::ContainerSchema(format!("unknown kind code {c}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            dtype: DType::F64,
            shape,
            data,
        }
    }

    pub fn vector(name: impl Into<String>, v: &Vector) -> Self {
        Tensor::f64(name, vec![v.dim()], v.0.clone())
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor::f64(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_vector(&self) -> Result<Vector> {
        if self.shape.len() != 1 {
            return Err(Error::ContainerSchema(format!(
                "tensor {:?} is not a vector",
                self.name
            )));
        }
        Ok(Vector(self.data.clone()))
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.clone()),
            _ => Err(Error::ContainerSchema(format!(
                "tensor {:?} is not a matrix",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    /// JSON object; `tensors` is filled in on write.
    pub metadata: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: ContainerKind, metadata: Value) -> Self {
        Container {
            kind,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ContainerSchema(format!("missing tensor {name:?}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::ContainerSchema(format!("metadata is missing {key:?}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::ContainerSchema(format!("metadata {key:?}: {e}")))
    }

    fn expect_kind(&self, kind: ContainerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::ContainerSchema(format!(
                "expected a {kind:?} container, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let Value::Object(mut meta) = self.metadata.clone() else {
            return Err(Error::ContainerSchema(
                "metadata must be a JSON object".into(),
            ));
        };
        let names: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        meta.insert("tensors".into(), json!(names));
        let meta = serde_json::to_vec(&Value::Object(meta))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(0);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.data.len() != t.numel() {
                return Err(Error::Shape(format!(
                    "tensor {:?}: shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| {
                Error::ContainerSchema(format!("tensor name {:?} too long", t.name))
            })?;
            let ndim = u8::try_from(t.shape.len()).map_err(|_| {
                Error::ContainerSchema(format!("tensor {:?} has too many dimensions", t.name))
            })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(match t.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.push(ndim);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u64 * t.dtype.size()).to_le_bytes());
            match t.dtype {
                DType::F64 => t
                    .data
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                DType::F32 => t
                    .data
                    .iter()
                    .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind = ContainerKind::from_code(r.take(1, "kind")?[0])?;
        r.take(1, "reserved byte")?;
        let meta_len = r.len_u64("metadata length")?;
        let metadata: Value = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::ContainerSchema(format!("metadata is not valid JSON: {e}")))?;
        if !metadata.is_object() {
            return Err(Error::ContainerSchema(
                "metadata must be a JSON object".into(),
            ));
        }
        let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let what = format!("tensor #{i}");
            let name_len = u16::from_le_bytes(r.array(&what)?) as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| Error::ContainerSchema(format!("{what}: name is not UTF-8")))?
                .to_string();
            let dtype = match r.take(1, &name)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                d => {
                    return Err(Error::ContainerSchema(format!(
                        "tensor {name:?}: unknown dtype {d}"
                    )))
                }
            };
            let ndim = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.len_u64(&name)?);
            }
            let declared = u64::from_le_bytes(r.array(&name)?);
            let expected = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| {
                    Error::ContainerSchema(format!("tensor {name:?}: shape overflows"))
                })?;
            if declared != expected {
                return Err(Error::TensorLength {
                    name,
                    declared,
                    expected,
                });
            }
            let raw = r.take(declared as usize, &name)?;
            let data = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
            };
            tensors.push(Tensor {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::ContainerSchema(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        let listed: Vec<String> = metadata
            .get("tensors")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| {
                Error::ContainerSchema("metadata has no \"tensors\" name list".into())
            })?;
        let actual: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        if listed != actual {
            return Err(Error::ContainerSchema(format!(
                "metadata lists tensors {listed:?} but the file holds {actual:?}"
            )));
        }
        let mut metadata = metadata;
        if let Value::Object(m) = &mut metadata {
            m.remove("tensors");
        }
        Ok(Container {
            kind,
            metadata,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.array(what)?);
        usize::try_from(v).map_err(|_| Error::Truncated(what.to_string()))
    }
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save(path: &Path, c: &Container) -> Result<()> {
    write_atomic(path, &c.to_bytes()?)
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Concept stores
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ConceptMeta {
    relation: String,
    object: String,
    subject_layer: usize,
    provenance: Provenance,
    trained_on: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CatalogMeta {
    relation: String,
    subject_layer: usize,
    concepts: Vec<ConceptMeta>,
}

pub fn concept_store(catalogs: &[ConceptCatalog], extra: Value) -> Container {
    let mut c = Container::new(ContainerKind::ConceptStore, json!({}));
    let mut metas = Vec::new();
    for (ci, cat) in catalogs.iter().enumerate() {
        let mut concepts = Vec::new();
        for (oi, lrc) in cat.concepts.values().enumerate() {
            c.push(Tensor::vector(format!("concept.{ci}.{oi}"), &lrc.vector));
            concepts.push(ConceptMeta {
                relation: lrc.relation.clone(),
                object: lrc.object.clone(),
                subject_layer: lrc.subject_layer,
                provenance: lrc.provenance,
                trained_on: lrc.trained_on.clone(),
            });
        }
        metas.push(CatalogMeta {
            relation: cat.relation.clone(),
            subject_layer: cat.subject_layer,
            concepts,
        });
    }
    c.metadata = json!({ "catalogs": metas, "info": extra });
    c
}

pub fn catalogs_from(c: &Container) -> Result<Vec<ConceptCatalog>> {
    c.expect_kind(ContainerKind::ConceptStore)?;
    let metas: Vec<CatalogMeta> = c.meta("catalogs")?;
    metas
        .into_iter()
        .enumerate()
        .map(|(ci, m)| {
            let concepts = m
                .concepts
                .into_iter()
                .enumerate()
                .map(|(oi, cm)| {
                    Ok(Lrc {
                        relation: cm.relation,
                        object: cm.object,
                        vector: c.tensor(&format!("concept.{ci}.{oi}"))?.to_vector()?,
                        subject_layer: cm.subject_layer,
                        provenance: cm.provenance,
                        trained_on: cm.trained_on,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ConceptCatalog::new(&m.relation, m.subject_layer, concepts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// LREs
// ---------------------------------------------------------------------------

pub fn lre_container(lre: &Lre) -> Container {
    let mut c = Container::new(
        ContainerKind::Lre,
        json!({
            "relation": lre.relation,
            "subject_layer": lre.subject_layer,
            "object_layer": lre.object_layer,
            "n_samples": lre.n_samples,
            "trained_on": lre.trained_on,
            "hidden_dim": lre.bias.dim(),
        }),
    );
    c.push(Tensor::matrix("weight", &lre.weight));
    c.push(Tensor::vector("bias", &lre.bias));
    c
}

pub fn lre_from(c: &Container) -> Result<Lre> {
    c.expect_kind(ContainerKind::Lre)?;
    Ok(Lre {
        relation: c.meta("relation")?,
        weight: c.tensor("weight")?.to_matrix()?,
        bias: c.tensor("bias")?.to_vector()?,
        subject_layer: c.meta("subject_layer")?,
        object_layer: c.meta("object_layer")?,
        n_samples: c.meta("n_samples")?,
        trained_on: c.meta("trained_on")?,
    })
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

pub fn checkpoint(model: &ToyModel) -> Container {
    let mut c = Container::new(
        ContainerKind::Checkpoint,
        json!({ "config": model.config() }),
    );
    for (name, shape, data) in model.params.named() {
        c.push(Tensor::f64(name, shape, data.to_vec()));
    }
    c
}

pub fn model_from(c: &Container) -> Result<ToyModel> {
    c.expect_kind(ContainerKind::Checkpoint)?;
    let config: ToyConfig = c.meta("config")?;
    config.validate()?;
    let mut params = Params::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != c.tensors.len() {
        return Err(Error::ContainerSchema(format!(
            "checkpoint holds {} tensors, config implies {}",
            c.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), (t, view)) in expected
        .iter()
        .zip(c.tensors.iter().zip(params.views_mut()))
    {
        if &t.name != name || &t.shape != shape {
            return Err(Error::ContainerSchema(format!(
                "checkpoint tensor {:?} {:?} where {name:?} {shape:?} was expected",
                t.name, t.shape
            )));
        }
        view.copy_from_slice(&t.data);
    }
    ToyModel::from_params(config, params)
}

// ---------------------------------------------------------------------------
// Activation dumps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub prompt_id: String,
    pub relation: String,
    pub subject: String,
    pub object: String,
    pub subject_activation: Vector,
    pub object_mean_activation: Vector,
    /// Jacobian and bias of the subject-to-object map at this prompt.
    pub jacobian: Option<(Matrix, Vector)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub model_name: String,
    pub hidden_dim: usize,
    pub subject_layer: usize,
    pub object_layer: usize,
    pub records: Vec<DumpRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    prompt_id: String,
    relation: String,
    subject: String,
    object: String,
}

impl ActivationDump {
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim;
        for r in &self.records {
            let bad = |what: &str| {
                Error::Shape(format!(
                    "record {}: {what} does not match H = {h}",
                    r.prompt_id
                ))
            };
            if r.subject_activation.dim() != h {
                return Err(bad("subject_activation"));
            }
            if r.object_mean_activation.dim() != h {
                return Err(bad("object_mean_activation"));
            }
            if let Some((j, b)) = &r.jacobian {
                if j.shape() != (h, h) {
                    return Err(bad("jacobian"));
                }
                if b.dim() != h {
                    return Err(bad("bias"));
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let records: Vec<RecordMeta> = self
            .records
            .iter()
            .map(|r| RecordMeta {
                prompt_id: r.prompt_id.clone(),
                relation: r.relation.clone(),
                subject: r.subject.clone(),
                object: r.object.clone(),
            })
            .collect();
        let mut c = Container::new(
            ContainerKind::ActivationDump,
            json!({
                "model_name": self.model_name,
                "hidden_dim": self.hidden_dim,
                "subject_layer": self.subject_layer,
                "object_layer": self.object_layer,
                "records": records,
            }),
        );
        for (i, r) in self.records.iter().enumerate() {
            c.push(Tensor::vector(
                format!("subject.{i}"),
                &r.subject_activation,
            ));
            c.push(Tensor::vector(
                format!("object.{i}"),
                &r.object_mean_activation,
            ));
            if let Some((j, b)) = &r.jacobian {
                c.push(Tensor::matrix(format!("jacobian.{i}"), j));
                c.push(Tensor::vector(format!("bias.{i}"), b));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(ContainerKind::ActivationDump)?;
        let metas: Vec<RecordMeta> = c.meta("records")?;
        let records = metas
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let (jn, bn) = (format!("jacobian.{i}"), format!("bias.{i}"));
                let jacobian = match (c.has_tensor(&jn), c.has_tensor(&bn)) {
                    (true, true) => {
                        Some((c.tensor(&jn)?.to_matrix()?, c.tensor(&bn)?.to_vector()?))
                    }
                    (false, false) => None,
                    _ => {
                        return Err(Error::ContainerSchema(format!(
                            "record {} ({}): jacobian and bias must be present together",
                            i, m.prompt_id
                        )))
                    }
                };
                Ok(DumpRecord {
                    subject_activation: c.tensor(&format!("subject.{i}"))?.to_vector()?,
                    object_mean_activation: c.tensor(&format!("object.{i}"))?.to_vector()?,
                    prompt_id: m.prompt_id,
                    relation: m.relation,
                    subject: m.subject,
                    object: m.object,
                    jacobian,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dump = ActivationDump {
            model_name: c.meta("model_name")?,
            hidden_dim: c.meta("hidden_dim")?,
            subject_layer: c.meta("subject_layer")?,
            object_layer: c.meta("object_layer")?,
            records,
        };
        dump.validate()?;
        Ok(dump)
    }
}

/// One catalog per relation (sorted by name): the LRE is the mean over all
/// records carrying a Jacobian, and each object's concept inverts the object
/// activations of that object's records. Records are taken in prompt-id order.
pub fn pipeline_from_dump(dump: &ActivationDump, rank: usize) -> Result<Vec<ConceptCatalog>> {
    dump.validate()?;
    if rank == 0 || rank > dump.hidden_dim {
        return Err(Error::RankOutOfRange {
            rank,
            max: dump.hidden_dim,
        });
    }
    let mut by_relation: BTreeMap<&str, Vec<&DumpRecord>> = BTreeMap::new();
    for r in &dump.records {
        by_relation.entry(&r.relation).or_default().push(r);
    }
    if by_relation.is_empty() {
        return Err(Error::Empty("dump records"));
    }
    by_relation
        .into_iter()
        .map(|(rel, mut recs)| {
            recs.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
            let samples: Vec<JacobianSample> = recs
                .iter()
                .filter_map(|r| {
                    r.jacobian.as_ref().map(|(w, b)| JacobianSample {
                        prompt_id: r.prompt_id.clone(),
                        weight: w.clone(),
                        bias: b.clone(),
                    })
                })
                .collect();
            if samples.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "relation {rel:?}: dump has no jacobians, so only the svm and averaging baselines can run on it"
                )));
            }
            let lre = train_lre(rel, dump.subject_layer, dump.object_layer, &samples)?;
            let inv = invert_lre(&lre, rank)?;
            let mut objects: BTreeMap<&str, (Vec<Vector>, Vec<String>)> = BTreeMap::new();
            for r in &recs {
                let e = objects.entry(&r.object).or_default();
                e.0.push(r.object_mean_activation.clone());
                e.1.push(r.prompt_id.clone());
            }
            let concepts = objects
                .into_iter()
                .map(|(o, (acts, ids))| build_lrc(&inv, o, &acts, ids))
                .collect::<Result<Vec<_>>>()?;
            ConceptCatalog::new(rel, dump.subject_layer, concepts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic worlds: a directory with model.relcon, relations.json and
// ground_truth.relcon
// ---------------------------------------------------------------------------

pub const WORLD_MODEL_FILE: &str = "model.relcon";
pub const WORLD_RELATIONS_FILE: &str = "relations.json";
pub const WORLD_TRUTH_FILE: &str = "ground_truth.relcon";

pub fn save_world(dir: &Path, world: &SynthWorld) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save(&dir.join(WORLD_MODEL_FILE), &checkpoint(&world.model))?;
    let rel_json = serde_json::to_vec_pretty(&world.relations)?;
    write_atomic(&dir.join(WORLD_RELATIONS_FILE), &rel_json)?;

    let mut index: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut c = Container::new(ContainerKind::SynthWorld, json!({}));
    for (ri, (rel, dirs)) in world.true_directions.iter().enumerate() {
        for (oi, (obj, v)) in dirs.iter().enumerate() {
            index.entry(rel).or_default().push(obj);
            c.push(Tensor::vector(format!("direction.{ri}.{oi}"), v));
        }
    }
    let affine_names: Vec<&str> = world.true_affine.keys().map(String::as_str).collect();
    for (i, a) in world.true_affine.values().enumerate() {
        c.push(Tensor::matrix(format!("affine_weight.{i}"), &a.weight));
        c.push(Tensor::vector(format!("affine_bias.{i}"), &a.bias));
    }
    c.metadata = json!({
        "spec": world.spec,
        "memorization": world.memorization,
        "hidden_dim": world.model.hidden_dim(),
        "directions": index,
        "affine_relations": affine_names,
    });
    save(&dir.join(WORLD_TRUTH_FILE), &c)
}

pub fn load_world(dir: &Path) -> Result<SynthWorld> {
    let model = model_from(&load(&dir.join(WORLD_MODEL_FILE))?)?;
    let rel_path = dir.join(WORLD_RELATIONS_FILE);
    let text = std::fs::read_to_string(&rel_path).map_err(|e| Error::io(&rel_path, e))?;
    let relations: Vec<Relation> = parse_relations(&text)?;
    let c = load(&dir.join(WORLD_TRUTH_FILE))?;
    c.expect_kind(ContainerKind::SynthWorld)?;
    let index: BTreeMap<String, Vec<String>> = c.meta("directions")?;
    let mut true_directions = BTreeMap::new();
    for (ri, (rel, objs)) in index.into_iter().enumerate() {
        let dirs = objs
            .into_iter()
            .enumerate()
            .map(|(oi, o)| Ok((o, c.tensor(&format!("direction.{ri}.{oi}"))?.to_vector()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        true_directions.insert(rel, dirs);
    }
    let affine_names: Vec<String> = c.meta("affine_relations")?;
    let true_affine = affine_names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            Ok((
                name,
                TrueAffine {
                    weight: c.tensor(&format!("affine_weight.{i}"))?.to_matrix()?,
                    bias: c.tensor(&format!("affine_bias.{i}"))?.to_vector()?,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let spec: SynthSpec = c.meta("spec")?;
    Ok(SynthWorld {
        spec,
        relations,
        model,
        true_directions,
        true_affine,
        memorization: c.meta("memorization")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::Lre, json!({"relation": "r"}));
        c.push(Tensor::f64(
            "a",
            vec![2, 2],
            vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5],
        ));
        c.push(Tensor {
            name: "b".into(),
            dtype: DType::F32,
            shape: vec![3],
            data: vec![0.5, 1.25, -2.0],
        });
        c
    }

    #[test]
    fn roundtrip_bytes() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..6], b"RELCON");
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 1);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 0);
    }

    #[test]
    fn corrupt_inputs() {
        let mut b = sample().to_bytes().unwrap();
        assert!(matches!(
            Container::from_bytes(&b[..b.len() - 1]),
            Err(Error::Truncated(_))
        ));
        b[0] = b'X';
        assert!(matches!(Container::from_bytes(&b), Err(Error::BadMagic)));
        let mut b = sample().to_bytes().unwrap();
        b[6] = 2;
        assert!(matches!(
            Container::from_bytes(&b),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn kind_mismatch() {
        assert!(catalogs_from(&sample()).is_err());
    }
}
