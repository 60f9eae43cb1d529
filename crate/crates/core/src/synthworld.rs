//! Synthetic relational worlds with known ground truth.
//!
//! A world is a set of relations plus a three-block toy model whose
//! subject-to-object pathway is planted:
//!
//! * hook layer 0 holds the subject embedding `flag + c_r + mu_o + xi + nu`
//!   (relation offset, object prototype, within-object spread, nuisance);
//! * block 1 optionally adds `jump * mu_o` through saturated GELU steps that
//!   detect cluster membership, so the map is locally linear with slope `A`
//!   but moves further between clusters than within them;
//! * block 2 is a pointer head: every position copies `A` times the residual
//!   of the most recent subject token;
//! * block 3 and the unembedding are trained by SGD to decode objects.
//!
//! Blocks read the raw residual stream (no normalization), so between hook
//! layers 0 and 2 the map from the final subject token to any later position
//! is `A (s + jump(s)) + const` and the planted `A` is the exact local
//! Jacobian.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{render_prompt, Category, PromptMode, Relation, RelationSample};
use crate::error::{Error, Result};
use crate::estimator::RelationalModel;
use crate::eval::ConceptCatalog;
use crate::linalg::{cosine, mean_vectors, Matrix, Vector};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::toymodel::{NormKind, Params, ToyConfig, ToyModel, TrainOptions, TrainingPair, NEWLINE};

/// Hook layer of the planted subject representation.
pub const SUBJECT_LAYER: usize = 0;
/// Hook layer where the copied subject signal is read.
pub const OBJECT_LAYER: usize = 2;
/// Number of transformer blocks in a world model.
pub const WORLD_LAYERS: usize = 3;
/// Required fraction of memorized prompts.
pub const MEMORIZATION_THRESHOLD: f64 = 0.95;

const FLAG_DIM: usize = 0;
const POS_DIM: usize = 1;
const RESERVED_DIMS: usize = 2;
const POS_STEP: f64 = 1e-3;
// attention logit per unit of flag / per position of recency
const FLAG_LOGIT: f64 = 5000.0;
const POS_LOGIT: f64 = 15.0;
const STEP_SHARPNESS: f64 = 40.0;
const STEP_THRESHOLD: f64 = 0.5;
const TOKEN_SCALE: f64 = 0.5;
const PREFIXES: [&str; 4] = ["north", "south", "east", "west"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_relations: usize,
    pub objects_per_relation: usize,
    pub subjects_per_object: usize,
    pub hidden_dim: usize,
    /// Rank of each relation's signal map. Each relation gets its own
    /// subspace, so `n_relations * signal_rank <= hidden_dim - 2`, except for
    /// a single relation with `signal_rank == hidden_dim` (a full-rank map).
    pub signal_rank: usize,
    /// Per-dimension std of subject nuisance, and scale of the full-rank
    /// perturbation added to the planted map.
    pub noise_sigma: f64,
    pub multi_token_fraction: f64,
    pub seed: u64,
    /// Norm of within-object subject variation.
    #[serde(default = "default_spread")]
    pub subject_spread: f64,
    /// Size of the between-cluster step added by block 1 (0 disables it).
    #[serde(default)]
    pub cluster_jump: f64,
    /// Norm of an offset shared by all subjects of a relation.
    #[serde(default)]
    pub common_offset: f64,
    #[serde(default = "default_steps")]
    pub train_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_spread() -> f64 {
    0.1
}
fn default_steps() -> usize {
    400
}
fn default_lr() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn new(
        n_relations: usize,
        objects_per_relation: usize,
        subjects_per_object: usize,
        hidden_dim: usize,
        signal_rank: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        SynthSpec {
            n_relations,
            objects_per_relation,
            subjects_per_object,
            hidden_dim,
            signal_rank,
            noise_sigma,
            multi_token_fraction: 0.0,
            seed,
            subject_spread: default_spread(),
            cluster_jump: 0.0,
            common_offset: 0.0,
            train_steps: default_steps(),
            lr: default_lr(),
        }
    }

    /// Preset used for benchmark comparisons: several relations, multi-token
    /// objects, separated subject clusters and a shared relation offset.
    pub fn benchmark(seed: u64) -> Self {
        SynthSpec {
            multi_token_fraction: 0.4,
            subject_spread: 0.3,
            cluster_jump: 6.0,
            common_offset: 1.5,
            ..SynthSpec::new(3, 5, 8, 64, 12, 0.5, seed)
        }
    }

    /// Preset for planting over the bundled fixture relations.
    pub fn fixture(seed: u64) -> Self {
        SynthSpec {
            lr: 0.3,
            ..SynthSpec::new(0, 0, 0, 64, 10, 0.05, seed)
        }
    }

    fn validate_plant(&self, n_relations: usize, max_objects: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let h = self.hidden_dim;
        if h <= RESERVED_DIMS + 1 {
            return bad(format!("hidden_dim {h} too small"));
        }
        if self.signal_rank == 0 || self.signal_rank > h {
            return bad(format!("signal_rank {} outside 1..={h}", self.signal_rank));
        }
        let full = self.full_rank(n_relations);
        if !full && n_relations * self.signal_rank > h - RESERVED_DIMS {
            return bad(format!(
                "{n_relations} relations x signal_rank {} exceed the {} content dimensions",
                self.signal_rank,
                h - RESERVED_DIMS
            ));
        }
        let room = if full {
            h - RESERVED_DIMS
        } else {
            self.signal_rank
        };
        let needed = max_objects + usize::from(self.common_offset != 0.0);
        if needed > room {
            return bad(format!(
                "{max_objects} objects{} need {needed} signal dimensions, only {room} available",
                if self.common_offset != 0.0 {
                    " plus a common offset"
                } else {
                    ""
                }
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("subject_spread", self.subject_spread),
            ("cluster_jump", self.cluster_jump),
            ("common_offset", self.common_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_relations == 0 || self.objects_per_relation == 0 || self.subjects_per_object == 0
        {
            return Err(Error::InvalidArgument(
                "relation, object and subject counts must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.multi_token_fraction) {
            return Err(Error::InvalidArgument(
                "multi_token_fraction must lie in [0, 1]".into(),
            ));
        }
        self.validate_plant(self.n_relations, self.objects_per_relation)
    }

    fn full_rank(&self, n_relations: usize) -> bool {
        n_relations == 1 && self.signal_rank > self.hidden_dim - RESERVED_DIMS
    }
}

/// Ground-truth affine map of one relation: `F(s) ~ weight s + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueAffine {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub relations: Vec<Relation>,
    pub model: ToyModel,
    /// relation -> object -> unit direction
    pub true_directions: BTreeMap<String, BTreeMap<String, Vector>>,
    pub true_affine: BTreeMap<String, TrueAffine>,
    /// Fraction of zero-shot prompts the model completes correctly.
    pub memorization: f64,
}

impl SynthWorld {
    pub fn subject_layer(&self) -> usize {
        SUBJECT_LAYER
    }

    pub fn object_layer(&self) -> usize {
        OBJECT_LAYER
    }

    pub fn true_direction(&self, relation: &str, object: &str) -> Result<&Vector> {
        self.true_directions
            .get(relation)
            .and_then(|m| m.get(object))
            .ok_or_else(|| Error::UnknownObject(format!("{relation}/{object}")))
    }
}

/// Cosine between each catalog concept and the world's true direction.
pub fn oracle_compare(
    world: &SynthWorld,
    catalog: &ConceptCatalog,
) -> Result<BTreeMap<String, f64>> {
    catalog
        .concepts
        .iter()
        .map(|(o, c)| {
            Ok((
                o.clone(),
                cosine(&c.vector, world.true_direction(&catalog.relation, o)?),
            ))
        })
        .collect()
}

/// Generate relations and a memorizing model from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let relations = synthesize_relations(spec);
    plant(spec, relations)
}

/// Plant a world model over existing relations. The relation-shape fields of
/// `spec` are ignored.
pub fn generate_for_relations(relations: &[Relation], spec: &SynthSpec) -> Result<SynthWorld> {
    if relations.is_empty() {
        return Err(Error::Empty("relations"));
    }
    let max_objects = relations
        .iter()
        .map(|r| r.objects().len())
        .max()
        .unwrap_or(0);
    spec.validate_plant(relations.len(), max_objects)?;
    plant(spec, relations.to_vec())
}

fn synthesize_relations(spec: &SynthSpec) -> Vec<Relation> {
    let mut rng = stream(spec.seed, &["synth", "relations"]);
    let mut subject_id = 0;
    (0..spec.n_relations)
        .map(|r| {
            let n_multi =
                (spec.multi_token_fraction * spec.objects_per_relation as f64).round() as usize;
            let mut multi: Vec<bool> = (0..spec.objects_per_relation)
                .map(|k| k < n_multi)
                .collect();
            multi.shuffle(&mut rng);
            let mut samples = Vec::new();
            for (k, &two) in multi.iter().enumerate() {
                let base = format!("r{r}obj{k}");
                let object = if two {
                    format!("{} {base}", PREFIXES[rng.random_range(0..PREFIXES.len())])
                } else {
                    base
                };
                for _ in 0..spec.subjects_per_object {
                    samples.push(RelationSample::new(
                        format!("s{subject_id:03}"),
                        object.clone(),
                    ));
                    subject_id += 1;
                }
            }
            Relation {
                name: format!("rel{r}"),
                category: Category::Synthetic,
                fs_templates: vec![format!("{{}} has rel{r}")],
                zs_templates: vec![
                    format!("{{}} maps to rel{r}"),
                    format!("the rel{r} of {{}} is"),
                ],
                samples,
            }
        })
        .collect()
}

/// Gram-Schmidt on Gaussian columns: `k` orthonormal vectors in `R^n`
/// orthogonal to `against`.
fn random_orthonormal(
    rng: &mut StreamRng,
    n: usize,
    k: usize,
    against: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in against.iter().chain(basis.iter()) {
                let d = crate::linalg::dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let nrm = crate::linalg::norm(&v);
        if nrm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / nrm).collect());
        }
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let d = crate::linalg::dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Random isotropic vector of expected norm `scale` inside span(`basis`).
fn in_span(rng: &mut StreamRng, h: usize, basis: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; h];
    if basis.is_empty() || scale == 0.0 {
        return v;
    }
    let per = scale / (basis.len() as f64).sqrt();
    for b in basis {
        let g: f64 = StandardNormal.sample(rng);
        axpy(&mut v, per * g, b);
    }
    v
}

struct RelationPlan {
    /// Orthonormal input basis of the signal subspace (length-H vectors).
    signal: Vec<Vec<f64>>,
    /// object -> prototype direction mu_o
    mu: BTreeMap<String, Vec<f64>>,
    offset: Vec<f64>,
    /// signal directions orthogonal to the prototypes and offset
    spread_basis: Vec<Vec<f64>>,
}

fn plant(spec: &SynthSpec, relations: Vec<Relation>) -> Result<SynthWorld> {
    let h = spec.hidden_dim;
    let full = spec.full_rank(relations.len());
    let mut rng = stream(spec.seed, &["synth", "geometry"]);

    // --- vocabulary roles -------------------------------------------------
    let mut subject_final: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    let mut other_words: BTreeSet<String> = BTreeSet::new();
    for (ri, rel) in relations.iter().enumerate() {
        for t in rel.fs_templates.iter().chain(&rel.zs_templates) {
            other_words.extend(crate::toymodel::Tokenizer::words(&t.replace("{}", " ")));
        }
        let mut seen = BTreeSet::new();
        for s in &rel.samples {
            let words = crate::toymodel::Tokenizer::words(&s.subject);
            let last = words
                .last()
                .cloned()
                .ok_or_else(|| Error::Span("empty subject".into()))?;
            other_words.extend(words[..words.len() - 1].iter().cloned());
            other_words.extend(crate::toymodel::Tokenizer::words(&s.object));
            if seen.insert(last.clone()) {
                subject_final
                    .entry(last)
                    .or_default()
                    .push((ri, s.object.to_lowercase()));
            }
        }
    }
    other_words.insert(NEWLINE.to_string());
    if let Some(w) = subject_final.keys().find(|w| other_words.contains(*w)) {
        return Err(Error::ModelConfig(format!(
            "word {w:?} ends a subject and also appears in a template, object or other subject position"
        )));
    }
    let mut vocab: Vec<String> = vec![NEWLINE.to_string()];
    vocab.extend(other_words.iter().filter(|w| *w != NEWLINE).cloned());
    vocab.extend(subject_final.keys().cloned());

    // --- geometry ---------------------------------------------------------
    let unit = |i: usize| {
        let mut v = vec![0.0; h];
        v[i] = 1.0;
        v
    };
    let reserved = [unit(FLAG_DIM), unit(POS_DIM)];
    let content_dims = h - RESERVED_DIMS;
    let content = random_orthonormal(&mut rng, h, content_dims, &reserved);

    let mut plans = Vec::with_capacity(relations.len());
    for (ri, rel) in relations.iter().enumerate() {
        let (signal, room): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if full {
            let mut all = reserved.to_vec();
            all.extend(content.iter().cloned());
            (all, content.clone())
        } else {
            let block = content[ri * spec.signal_rank..(ri + 1) * spec.signal_rank].to_vec();
            (block.clone(), block)
        };
        // prototypes and offset: orthonormal directions inside `room`
        let objects = rel.objects();
        let needed = objects.len() + 1;
        let coords = random_orthonormal(&mut rng, room.len(), needed.min(room.len()), &[]);
        let lift = |c: &[f64]| {
            let mut v = vec![0.0; h];
            for (ci, b) in c.iter().zip(&room) {
                axpy(&mut v, *ci, b);
            }
            v
        };
        let mu: BTreeMap<String, Vec<f64>> = objects
            .iter()
            .zip(&coords)
            .map(|(o, c)| (o.to_lowercase(), lift(c)))
            .collect();
        let offset = if spec.common_offset > 0.0 {
            lift(&coords[objects.len()])
                .into_iter()
                .map(|x| x * spec.common_offset)
                .collect()
        } else {
            vec![0.0; h]
        };
        let mut used: Vec<Vec<f64>> = mu.values().cloned().collect();
        if spec.common_offset > 0.0 {
            used.push(
                coords
                    .get(objects.len())
                    .map(|c| lift(c))
                    .unwrap_or_else(|| vec![0.0; h]),
            );
        }
        let mut spread_basis = Vec::new();
        for b in &room {
            let mut v = b.clone();
            project_out(&mut v, &used);
            project_out(&mut v, &spread_basis);
            let n = crate::linalg::norm(&v);
            if n > 1e-8 {
                spread_basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        plans.push(RelationPlan {
            signal,
            mu,
            offset,
            spread_basis,
        });
    }
    let all_protos: Vec<Vec<f64>> = plans
        .iter()
        .flat_map(|p| {
            let mut v: Vec<Vec<f64>> = p.mu.values().cloned().collect();
            if spec.common_offset > 0.0 {
                let n = crate::linalg::norm(&p.offset);
                v.push(p.offset.iter().map(|x| x / n).collect());
            }
            v
        })
        .collect();

    // planted map A (column convention: out = A s)
    let mut a = Matrix::zeros(h, h);
    let mut srng = stream(spec.seed, &["synth", "map"]);
    for p in &plans {
        let k = p.signal.len();
        let rot = random_orthonormal(&mut srng, k, k, &[]);
        for (j, r) in rot.iter().enumerate() {
            let sigma = 1.0 + srng.random::<f64>();
            // output direction: signal basis rotated by `rot`
            let mut out = vec![0.0; h];
            for (ri, b) in r.iter().zip(&p.signal) {
                axpy(&mut out, *ri, b);
            }
            let inp = &p.signal[j];
            for row in 0..h {
                for col in 0..h {
                    let v = a.get(row, col) + sigma * out[row] * inp[col];
                    a.set(row, col, v);
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let scale = spec.noise_sigma / (h as f64).sqrt();
        for x in a.data_mut() {
            let g: f64 = StandardNormal.sample(&mut srng);
            *x += scale * g;
        }
    }

    // --- model config -----------------------------------------------------
    let total_objects: usize = plans.iter().map(|p| p.mu.len()).sum();
    let heads = [4, 2, 1]
        .into_iter()
        .find(|d| h.is_multiple_of(*d))
        .unwrap_or(1);
    let max_len = relations
        .iter()
        .map(|r| {
            let longest = |v: &Vec<String>| {
                v.iter()
                    .map(|t| t.split_whitespace().count())
                    .max()
                    .unwrap_or(0)
            };
            let subj = r
                .samples
                .iter()
                .map(|s| s.subject.split_whitespace().count())
                .max()
                .unwrap_or(0);
            let obj = r
                .samples
                .iter()
                .map(|s| s.object.split_whitespace().count())
                .max()
                .unwrap_or(0);
            let line = longest(&r.fs_templates).max(longest(&r.zs_templates)) + subj + obj;
            (crate::dataset::DEFAULT_SHOTS + 1) * (line + 1)
        })
        .max()
        .unwrap_or(0);
    let config = ToyConfig {
        hidden_dim: h,
        layers: WORLD_LAYERS,
        heads,
        mlp_dim: (4 * h).max(2 * total_objects),
        vocab: vocab.clone(),
        max_seq: max_len.max(64),
        seed: derive_seed(spec.seed, &["synth", "decoder-init"]),
        norm: NormKind::Identity,
    };
    let mut params = Params::init(&config);

    // --- embeddings ---------------------------------------------------------
    let mut erng = stream(spec.seed, &["synth", "embeddings"]);
    let nuisance = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    params.tok_emb = Matrix::zeros(vocab.len(), h);
    for (id, word) in vocab.iter().enumerate() {
        let mut e = vec![0.0; h];
        if let Some(roles) = subject_final.get(word) {
            e[FLAG_DIM] = 1.0;
            for (ri, object) in roles {
                let p = &plans[*ri];
                axpy(&mut e, 1.0, &p.offset);
                axpy(&mut e, 1.0, &p.mu[object]);
                axpy(
                    &mut e,
                    1.0,
                    &in_span(&mut erng, h, &p.spread_basis, spec.subject_spread),
                );
            }
            if spec.noise_sigma > 0.0 {
                let mut nu = vec![0.0; h];
                for b in &content {
                    axpy(&mut nu, nuisance.sample(&mut erng), b);
                }
                project_out(&mut nu, &all_protos);
                axpy(&mut e, 1.0, &nu);
            }
        } else {
            let mut v: Vec<f64> = vec![0.0; h];
            for b in &content {
                let g: f64 = StandardNormal.sample(&mut erng);
                axpy(&mut v, g, b);
            }
            project_out(&mut v, &all_protos);
            let n = crate::linalg::norm(&v).max(1e-12);
            e = v.into_iter().map(|x| TOKEN_SCALE * x / n).collect();
        }
        params.tok_emb.row_mut(id).copy_from_slice(&e);
    }
    params.pos_emb = Matrix::zeros(config.max_seq, h);
    for pos in 0..config.max_seq {
        params.pos_emb.set(pos, POS_DIM, POS_STEP * pos as f64);
    }

    // --- block 1: cluster steps ----------------------------------------------
    {
        let b = &mut params.blocks[0];
        zero_block(b);
        if spec.cluster_jump > 0.0 {
            let mut unit_idx = 0;
            for p in &plans {
                for mu in p.mu.values() {
                    for (shift, sign) in [(1.0, 1.0), (0.0, -1.0)] {
                        for d in 0..h {
                            b.w_fc.set(d, unit_idx, STEP_SHARPNESS * mu[d]);
                            b.w_proj.set(unit_idx, d, sign * spec.cluster_jump * mu[d]);
                        }
                        b.b_fc[unit_idx] = -STEP_SHARPNESS * STEP_THRESHOLD + shift;
                        unit_idx += 1;
                    }
                }
            }
        }
    }

    // --- block 2: pointer copy of A s --------------------------------------
    {
        let b = &mut params.blocks[1];
        zero_block(b);
        let hd = h / heads;
        for head in 0..heads {
            let c = head * hd;
            b.b_q[c] = (hd as f64).sqrt();
            b.w_k.set(FLAG_DIM, c, FLAG_LOGIT);
            b.w_k.set(POS_DIM, c, POS_LOGIT / POS_STEP);
        }
        b.w_v = Matrix::identity(h);
        b.w_o = a.transpose();
    }

    // final norm is the identity; gains unused
    let mut model = ToyModel::from_params(config, params)?;

    // --- train the decoder ------------------------------------------------
    let mut pairs = Vec::new();
    let mut prompts = Vec::new();
    for rel in &relations {
        for s in &rel.samples {
            for t in &rel.zs_templates {
                let prompt = t.replacen("{}", &s.subject, 1);
                pairs.push(TrainingPair::encode(&model, &prompt, &s.object)?);
                prompts.push((prompt, s.object.clone()));
            }
        }
    }
    model.train(
        &pairs,
        &TrainOptions {
            steps: spec.train_steps,
            lr: spec.lr,
            trainable_from_block: WORLD_LAYERS,
        },
    )?;
    let mut hits = 0;
    for (prompt, object) in &prompts {
        let toks = model.tokenizer().encode(prompt)?;
        let want = model.tokenizer().encode(object)?;
        if model.generate_greedy(&toks, want.len())? == want {
            hits += 1;
        }
    }
    let memorization = hits as f64 / prompts.len() as f64;
    if memorization < MEMORIZATION_THRESHOLD {
        return Err(Error::Memorization {
            achieved: memorization,
            required: MEMORIZATION_THRESHOLD,
        });
    }

    // --- ground truth -------------------------------------------------------
    let mut true_directions = BTreeMap::new();
    let mut true_affine = BTreeMap::new();
    for (rel, p) in relations.iter().zip(&plans) {
        let mean_mu = mean_vectors(&p.mu.values().map(|m| Vector(m.clone())).collect::<Vec<_>>())?;
        let mut dirs = BTreeMap::new();
        for object in rel.objects() {
            let mu = &p.mu[&object.to_lowercase()];
            let mut proto = unit(FLAG_DIM);
            axpy(&mut proto, 1.0, &p.offset);
            axpy(&mut proto, 1.0, mu);
            // projection onto the signal subspace
            let mut v = vec![0.0; h];
            for b in &p.signal {
                axpy(&mut v, crate::linalg::dot(&proto, b), b);
            }
            axpy(&mut v, spec.cluster_jump, mu);
            axpy(&mut v, -spec.cluster_jump, &mean_mu);
            let v = Vector(v)
                .normalized(1e-12)
                .ok_or_else(|| Error::DegenerateConcept(format!("{}/{object}", rel.name)))?;
            dirs.insert(object, v);
        }
        true_directions.insert(rel.name.clone(), dirs);
        true_affine.insert(
            rel.name.clone(),
            empirical_affine(&model, rel, &a, spec.seed)?,
        );
    }

    Ok(SynthWorld {
        spec: spec.clone(),
        relations,
        model,
        true_directions,
        true_affine,
        memorization,
    })
}

fn zero_block(b: &mut crate::toymodel::Block) {
    for m in [
        &mut b.w_q,
        &mut b.w_k,
        &mut b.w_v,
        &mut b.w_o,
        &mut b.w_fc,
        &mut b.w_proj,
    ] {
        m.data_mut().fill(0.0);
    }
    for v in [
        &mut b.b_q,
        &mut b.b_k,
        &mut b.b_v,
        &mut b.b_o,
        &mut b.b_fc,
        &mut b.b_proj,
        &mut b.ln1_b,
        &mut b.ln2_b,
    ] {
        v.fill(0.0);
    }
    b.ln1_g.fill(1.0);
    b.ln2_g.fill(1.0);
}

/// The planted weight with the mean offset `F(s) - A s` over the relation's
/// zero-shot prompts.
fn empirical_affine(model: &ToyModel, rel: &Relation, a: &Matrix, seed: u64) -> Result<TrueAffine> {
    let mut offsets = Vec::new();
    for s in &rel.samples {
        let p = render_prompt(s, rel, PromptMode::ZeroShot, 0, seed, model.tokenizer())?;
        let f = model.readout(&p, SUBJECT_LAYER, OBJECT_LAYER, &p.object_token_positions)?;
        let natural = f.natural().clone();
        let out = f.eval(&natural)?;
        offsets.push(out.sub(&a.matvec(&natural)?));
    }
    Ok(TrueAffine {
        weight: a.clone(),
        bias: mean_vectors(&offsets)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::new(2, 4, 3, 32, 16, 0.0, 0);
        assert!(s.validate().is_err()); // 2 x 16 > 30
        s.signal_rank = 15;
        assert!(s.validate().is_ok());
        s.objects_per_relation = 16;
        assert!(s.validate().is_err());
        let full = SynthSpec::new(1, 4, 5, 32, 32, 0.0, 0);
        assert!(full.validate().is_ok());
    }

    #[test]
    fn relation_shapes() {
        let mut s = SynthSpec::new(2, 4, 3, 32, 8, 0.0, 5);
        s.multi_token_fraction = 0.5;
        let rels = synthesize_relations(&s);
        assert_eq!(rels.len(), 2);
        for r in &rels {
            assert_eq!(r.samples.len(), 12);
            let multi = r.objects().iter().filter(|o| o.contains(' ')).count();
            assert_eq!(multi, 2);
        }
    }
}
