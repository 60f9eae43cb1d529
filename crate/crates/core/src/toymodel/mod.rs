//! A small deterministic decoder-only transformer with residual-stream hooks.
//!
//! Pre-norm blocks (attention then MLP), learned positional embeddings, all
//! arithmetic in `f64`. Hook layer 0 is the post-embedding residual stream;
//! hook layer `l >= 1` is the residual stream after block `l`.

mod tokenizer;
mod train;

pub use tokenizer::{TokenId, Tokenizer, NEWLINE};
pub use train::{train_on_corpus, TrainOptions, TrainReport, TrainingPair};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    /// Blocks read the raw residual stream. Used by planted synthetic worlds,
    /// whose subject-to-object pathway must be exactly linear.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub vocab: Vec<String>,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm: NormKind,
}

impl ToyConfig {
    /// Default shape (H = 64, 6 layers, 4 heads, MLP 4H, 64 positions).
    pub fn new(vocab: Vec<String>, seed: u64) -> Self {
        ToyConfig {
            hidden_dim: 64,
            layers: 6,
            heads: 4,
            mlp_dim: 256,
            vocab,
            max_seq: 64,
            seed,
            norm: NormKind::LayerNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::ModelConfig(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.max_seq == 0 || self.mlp_dim == 0 {
            return Err(Error::ModelConfig(
                "max_seq and mlp_dim must be positive".into(),
            ));
        }
        Tokenizer::new(self.vocab.clone())?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// Projections are `in x out`: `q = x W_q + b_q`.
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w_fc: Matrix,
    pub b_fc: Vec<f64>,
    pub w_proj: Matrix,
    pub b_proj: Vec<f64>,
}

impl Block {
    fn zeros(h: usize, m: usize) -> Self {
        Block {
            ln1_g: vec![0.0; h],
            ln1_b: vec![0.0; h],
            w_q: Matrix::zeros(h, h),
            b_q: vec![0.0; h],
            w_k: Matrix::zeros(h, h),
            b_k: vec![0.0; h],
            w_v: Matrix::zeros(h, h),
            b_v: vec![0.0; h],
            w_o: Matrix::zeros(h, h),
            b_o: vec![0.0; h],
            ln2_g: vec![0.0; h],
            ln2_b: vec![0.0; h],
            w_fc: Matrix::zeros(h, m),
            b_fc: vec![0.0; m],
            w_proj: Matrix::zeros(m, h),
            b_proj: vec![0.0; h],
        }
    }
}

/// All trainable tensors of a [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// `hidden x vocab`.
    pub unembed: Matrix,
}

impl Params {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        let h = cfg.hidden_dim;
        Params {
            tok_emb: Matrix::zeros(cfg.vocab.len(), h),
            pos_emb: Matrix::zeros(cfg.max_seq, h),
            blocks: (0..cfg.layers)
                .map(|_| Block::zeros(h, cfg.mlp_dim))
                .collect(),
            lnf_g: vec![0.0; h],
            lnf_b: vec![0.0; h],
            unembed: Matrix::zeros(h, cfg.vocab.len()),
        }
    }

    /// Seeded N(0, 0.02) weights, zero biases, unit norm gains.
    pub fn init(cfg: &ToyConfig) -> Self {
        let mut p = Params::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |m: &mut [f64]| {
            for x in m.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        };
        fill(p.tok_emb.data_mut());
        fill(p.pos_emb.data_mut());
        for b in &mut p.blocks {
            fill(b.w_q.data_mut());
            fill(b.w_k.data_mut());
            fill(b.w_v.data_mut());
            fill(b.w_o.data_mut());
            fill(b.w_fc.data_mut());
            fill(b.w_proj.data_mut());
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
        }
        fill(p.unembed.data_mut());
        p.lnf_g.fill(1.0);
        p
    }

    /// Named views in a fixed canonical order, with shapes.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn m(name: String, x: &Matrix) -> (String, Vec<usize>, &[f64]) {
            (name, vec![x.rows(), x.cols()], x.data())
        }
        fn v<'a>(p: &str, n: &str, x: &'a [f64]) -> (String, Vec<usize>, &'a [f64]) {
            (format!("{p}{n}"), vec![x.len()], x)
        }
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        out.push(m("tok_emb".into(), &self.tok_emb));
        out.push(m("pos_emb".into(), &self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{}.", i + 1);
            out.push(v(&p, "ln1_g", &b.ln1_g));
            out.push(v(&p, "ln1_b", &b.ln1_b));
            out.push(m(format!("{p}w_q"), &b.w_q));
            out.push(v(&p, "b_q", &b.b_q));
            out.push(m(format!("{p}w_k"), &b.w_k));
            out.push(v(&p, "b_k", &b.b_k));
            out.push(m(format!("{p}w_v"), &b.w_v));
            out.push(v(&p, "b_v", &b.b_v));
            out.push(m(format!("{p}w_o"), &b.w_o));
            out.push(v(&p, "b_o", &b.b_o));
            out.push(v(&p, "ln2_g", &b.ln2_g));
            out.push(v(&p, "ln2_b", &b.ln2_b));
            out.push(m(format!("{p}w_fc"), &b.w_fc));
            out.push(v(&p, "b_fc", &b.b_fc));
            out.push(m(format!("{p}w_proj"), &b.w_proj));
            out.push(v(&p, "b_proj", &b.b_proj));
        }
        out.push(("lnf_g".into(), vec![self.lnf_g.len()], &self.lnf_g));
        out.push(("lnf_b".into(), vec![self.lnf_b.len()], &self.lnf_b));
        out.push(m("unembed".into(), &self.unembed));
        out
    }

    /// Mutable views in the same order as [`Params::named`].
    pub fn views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.push(b.w_q.data_mut());
            out.push(&mut b.b_q);
            out.push(b.w_k.data_mut());
            out.push(&mut b.b_k);
            out.push(b.w_v.data_mut());
            out.push(&mut b.b_v);
            out.push(b.w_o.data_mut());
            out.push(&mut b.b_o);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(b.w_fc.data_mut());
            out.push(&mut b.b_fc);
            out.push(b.w_proj.data_mut());
            out.push(&mut b.b_proj);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(self.unembed.data_mut());
        out
    }

    /// Which canonical tensors belong to the embeddings (index < 2), block `l`
    /// (1-based) or the head.
    pub(crate) fn owner_of(index: usize, layers: usize) -> ParamOwner {
        const PER_BLOCK: usize = 16;
        if index < 2 {
            ParamOwner::Embedding
        } else if index < 2 + PER_BLOCK * layers {
            ParamOwner::Block((index - 2) / PER_BLOCK + 1)
        } else {
            ParamOwner::Head
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamOwner {
    Embedding,
    Block(usize),
    Head,
}

// ---------------------------------------------------------------------------
// Hooks and patches
// ---------------------------------------------------------------------------

/// Residual-stream location: `layer` in `0..=L`, `token_index` a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub token_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    Replace,
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub hook: HookPoint,
    pub mode: PatchMode,
    pub value: Vector,
}

impl PatchSpec {
    pub fn replace(layer: usize, token_index: usize, value: Vector) -> Self {
        PatchSpec {
            hook: HookPoint { layer, token_index },
            mode: PatchMode::Replace,
            value,
        }
    }

    pub fn add(layer: usize, token_index: usize, value: Vector) -> Self {
        PatchSpec {
            hook: HookPoint { layer, token_index },
            mode: PatchMode::Add,
            value,
        }
    }
}

/// Output of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `residuals[layer][position]` for layers `0..=L`.
    pub residuals: Vec<Vec<Vector>>,
    pub logits: Vec<Vector>,
    /// Next-token distribution at each position.
    pub probs: Vec<Vector>,
}

impl ForwardOutput {
    pub fn residual(&self, hook: HookPoint) -> &Vector {
        &self.residuals[hook.layer][hook.token_index]
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    tokenizer: Tokenizer,
    pub params: Params,
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.vocab.clone())?;
        let params = Params::init(&config);
        Ok(ToyModel {
            config,
            tokenizer,
            params,
        })
    }

    pub fn from_params(config: ToyConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        let shapes_match = expected
            .named()
            .iter()
            .zip(params.named().iter())
            .all(|(a, b)| a.0 == b.0 && a.1 == b.1)
            && expected.blocks.len() == params.blocks.len();
        if !shapes_match {
            return Err(Error::ModelConfig(
                "parameter shapes do not match config".into(),
            ));
        }
        let tokenizer = Tokenizer::new(config.vocab.clone())?;
        Ok(ToyModel {
            config,
            tokenizer,
            params,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Index of the last hook layer (= number of blocks).
    pub fn final_layer(&self) -> usize {
        self.config.layers
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.len()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        let v = self.vocab_size();
        if let Some(&id) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        Ok(())
    }

    fn check_patches(&self, seq_len: usize, patches: &[PatchSpec]) -> Result<()> {
        for p in patches {
            if p.hook.layer > self.final_layer() || p.hook.token_index >= seq_len {
                return Err(Error::HookOutOfRange {
                    layer: p.hook.layer,
                    position: p.hook.token_index,
                    max_layer: self.final_layer(),
                    seq_len,
                });
            }
            if p.value.dim() != self.hidden_dim() {
                return Err(Error::Shape(format!(
                    "patch value has dim {}, model hidden size is {}",
                    p.value.dim(),
                    self.hidden_dim()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite("patch value".into()));
            }
        }
        Ok(())
    }

    /// Post-embedding residual stream (hook layer 0), before patches.
    pub fn embed(&self, tokens: &[TokenId]) -> Vec<Vector> {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                Vector(
                    self.params
                        .tok_emb
                        .row(t)
                        .iter()
                        .zip(self.params.pos_emb.row(pos))
                        .map(|(a, b)| a + b)
                        .collect(),
                )
            })
            .collect()
    }

    /// Full forward pass with patches applied at their hook points.
    pub fn forward(&self, tokens: &[TokenId], patches: &[PatchSpec]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        self.check_patches(tokens.len(), patches)?;
        let mut x = self.embed(tokens);
        apply_patches(&mut x, 0, patches);
        let mut residuals = Vec::with_capacity(self.final_layer() + 1);
        residuals.push(x.clone());
        for layer in 1..=self.final_layer() {
            x = self.block_forward(layer, &x);
            apply_patches(&mut x, layer, patches);
            residuals.push(x.clone());
        }
        let logits: Vec<Vector> = x.iter().map(|h| self.logits_from_residual(h)).collect();
        let probs = logits.iter().map(|l| softmax(l)).collect();
        Ok(ForwardOutput {
            residuals,
            logits,
            probs,
        })
    }

    /// Residual stream at `layer` for every position, without patches.
    pub fn residuals_at(&self, tokens: &[TokenId], layer: usize) -> Result<Vec<Vector>> {
        self.check_tokens(tokens)?;
        if layer > self.final_layer() {
            return Err(Error::HookOutOfRange {
                layer,
                position: 0,
                max_layer: self.final_layer(),
                seq_len: tokens.len(),
            });
        }
        let mut x = self.embed(tokens);
        for l in 1..=layer {
            x = self.block_forward(l, &x);
        }
        Ok(x)
    }

    /// Continue a forward pass from the residual stream at `from_layer` up to
    /// `to_layer`, applying patches for layers in `(from_layer, to_layer]`.
    pub fn run_layers(
        &self,
        from_layer: usize,
        to_layer: usize,
        mut x: Vec<Vector>,
        patches: &[PatchSpec],
    ) -> Vec<Vector> {
        for layer in from_layer + 1..=to_layer {
            x = self.block_forward(layer, &x);
            apply_patches(&mut x, layer, patches);
        }
        x
    }

    /// Final norm + unembedding.
    pub fn logits_from_residual(&self, h: &[f64]) -> Vector {
        let n = self.norm(h, &self.params.lnf_g, &self.params.lnf_b);
        let u = &self.params.unembed;
        let mut out = vec![0.0; u.cols()];
        for (i, &x) in n.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(u.row(i)) {
                *o += x * w;
            }
        }
        Vector(out)
    }

    /// Mean object-layer residual over `object_positions` when the residual at
    /// (`subject_layer`, `subject_index`) is replaced by `substituted`.
    pub fn substituted_object_readout(
        &self,
        tokens: &[TokenId],
        subject_index: usize,
        subject_layer: usize,
        object_layer: usize,
        object_positions: &[usize],
        substituted: &[f64],
    ) -> Result<Vector> {
        let prefix = self.residuals_at(tokens, subject_layer)?;
        self.substituted_readout_from(
            &prefix,
            subject_index,
            subject_layer,
            object_layer,
            object_positions,
            substituted,
        )
    }

    /// As [`ToyModel::substituted_object_readout`] but reusing the natural
    /// residual stream at `subject_layer`.
    pub fn substituted_readout_from(
        &self,
        prefix: &[Vector],
        subject_index: usize,
        subject_layer: usize,
        object_layer: usize,
        object_positions: &[usize],
        substituted: &[f64],
    ) -> Result<Vector> {
        let seq_len = prefix.len();
        if object_positions.is_empty() {
            return Err(Error::Span("no object positions".into()));
        }
        if subject_index >= seq_len || object_positions.iter().any(|&p| p >= seq_len) {
            return Err(Error::Span(format!(
                "subject {subject_index} / objects {object_positions:?} outside sequence of {seq_len}"
            )));
        }
        if subject_layer > self.final_layer() || object_layer > self.final_layer() {
            return Err(Error::HookOutOfRange {
                layer: subject_layer.max(object_layer),
                position: subject_index,
                max_layer: self.final_layer(),
                seq_len,
            });
        }
        if substituted.len() != self.hidden_dim() {
            return Err(Error::Shape(format!(
                "substituted activation has dim {}, expected {}",
                substituted.len(),
                self.hidden_dim()
            )));
        }
        // Later positions cannot influence the readout.
        let keep = object_positions
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(subject_index)
            + 1;
        let mut x: Vec<Vector> = prefix[..keep].to_vec();
        x[subject_index] = Vector(substituted.to_vec());
        let readout = if object_layer <= subject_layer {
            x
        } else {
            self.run_layers(subject_layer, object_layer, x, &[])
        };
        let mut acc = vec![0.0; self.hidden_dim()];
        for &p in object_positions {
            for (a, v) in acc.iter_mut().zip(readout[p].iter()) {
                *a += v;
            }
        }
        let n = object_positions.len() as f64;
        Ok(Vector(acc.into_iter().map(|a| a / n).collect()))
    }

    /// Greedy argmax continuation (ties go to the lowest token id).
    pub fn generate_greedy(&self, tokens: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.check_tokens(tokens)?;
        let mut seq = tokens.to_vec();
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new && seq.len() < self.config.max_seq {
            let fwd = self.forward(&seq, &[])?;
            let next = argmax(fwd.probs.last().expect("non-empty"));
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    fn norm(&self, x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        match self.config.norm {
            NormKind::LayerNorm => layer_norm(x, g, b).0,
            NormKind::Identity => x.to_vec(),
        }
    }

    fn block_forward(&self, layer: usize, x: &[Vector]) -> Vec<Vector> {
        let blk = &self.params.blocks[layer - 1];
        let h = self.hidden_dim();
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t = x.len();

        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| self.norm(xi, &blk.ln1_g, &blk.ln1_b))
            .collect();
        let q: Vec<Vec<f64>> = a.iter().map(|ai| affine(ai, &blk.w_q, &blk.b_q)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|ai| affine(ai, &blk.w_k, &blk.b_k)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|ai| affine(ai, &blk.w_v, &blk.b_v)).collect();

        let mut out = Vec::with_capacity(t);
        let mut scores = vec![0.0; t];
        for i in 0..t {
            let mut concat = vec![0.0; h];
            for head in 0..heads {
                let r = head * hd..(head + 1) * hd;
                let qi = &q[i][r.clone()];
                for j in 0..=i {
                    scores[j] = crate::linalg::dot(qi, &k[j][r.clone()]) * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                let c = &mut concat[r.clone()];
                for j in 0..=i {
                    let w = scores[j];
                    for (cc, vv) in c.iter_mut().zip(&v[j][r.clone()]) {
                        *cc += w * vv;
                    }
                }
            }
            let attn = affine(&concat, &blk.w_o, &blk.b_o);
            let hmid: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let c = self.norm(&hmid, &blk.ln2_g, &blk.ln2_b);
            let mut f = affine(&c, &blk.w_fc, &blk.b_fc);
            for z in &mut f {
                *z = gelu(*z);
            }
            let m = affine(&f, &blk.w_proj, &blk.b_proj);
            out.push(Vector(hmid.iter().zip(&m).map(|(a, b)| a + b).collect()));
        }
        out
    }
}

fn apply_patches(x: &mut [Vector], layer: usize, patches: &[PatchSpec]) {
    for p in patches.iter().filter(|p| p.hook.layer == layer) {
        let slot = &mut x[p.hook.token_index];
        match p.mode {
            PatchMode::Replace => slot.0.copy_from_slice(&p.value),
            PatchMode::Add => {
                for (s, v) in slot.iter_mut().zip(p.value.iter()) {
                    *s += v;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Numeric kernels shared with training
// ---------------------------------------------------------------------------

/// `x W + b` with `W` stored `in x out`.
pub(crate) fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    out
}

/// Layer norm; returns the output, the normalized input and `1/sigma`.
pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
    let y = xhat
        .iter()
        .zip(g)
        .zip(b)
        .map(|((xh, g), b)| xh * g + b)
        .collect();
    (y, xhat, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in s.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in s.iter_mut() {
        *x /= z;
    }
}

pub fn softmax(logits: &[f64]) -> Vector {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    Vector(v)
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_model(seed: u64) -> ToyModel {
        let vocab: Vec<String> = ["\n", "a", "b", "c", "d", "e", "f", "g"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut cfg = ToyConfig::new(vocab, seed);
        cfg.hidden_dim = 16;
        cfg.layers = 3;
        cfg.heads = 2;
        cfg.mlp_dim = 32;
        cfg.max_seq = 16;
        ToyModel::new(cfg).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one_and_runs_are_identical() {
        let m = small_model(1);
        let toks = [1, 2, 3, 4, 0, 5];
        let a = m.forward(&toks, &[]).unwrap();
        for p in &a.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let b = m.forward(&toks, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.residuals.len(), 4);
    }

    #[test]
    fn replace_patch_reads_back_exactly() {
        let m = small_model(2);
        let toks = [1, 2, 3, 4];
        let val = Vector((0..16).map(|i| i as f64 * 0.1 - 0.7).collect());
        let out = m
            .forward(&toks, &[PatchSpec::replace(2, 1, val.clone())])
            .unwrap();
        assert_eq!(
            out.residual(HookPoint {
                layer: 2,
                token_index: 1
            }),
            &val
        );
    }

    #[test]
    fn zero_add_patch_is_identity() {
        let m = small_model(3);
        let toks = [1, 2, 3, 4];
        let a = m.forward(&toks, &[]).unwrap();
        let b = m
            .forward(&toks, &[PatchSpec::add(1, 2, Vector::zeros(16))])
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_masking() {
        let m = small_model(4);
        let a = m.forward(&[1, 2, 3, 4, 5], &[]).unwrap();
        let b = m.forward(&[1, 2, 3, 7, 6], &[]).unwrap();
        for layer in 0..=3 {
            for pos in 0..3 {
                assert_eq!(a.residuals[layer][pos], b.residuals[layer][pos]);
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        let m = small_model(5);
        assert!(matches!(
            m.forward(&[], &[]),
            Err(Error::SequenceLength { .. })
        ));
        assert!(matches!(
            m.forward(&[99], &[]),
            Err(Error::TokenOutOfRange { .. })
        ));
        let p = PatchSpec::add(4, 0, Vector::zeros(16));
        assert!(matches!(
            m.forward(&[1], &[p]),
            Err(Error::HookOutOfRange { .. })
        ));
        let p = PatchSpec::add(1, 3, Vector::zeros(16));
        assert!(matches!(
            m.forward(&[1], &[p]),
            Err(Error::HookOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward(&[1; 17], &[]),
            Err(Error::SequenceLength { .. })
        ));
    }

    #[test]
    fn substituted_readout_matches_replace_patch() {
        let m = small_model(6);
        let toks = [1, 2, 3, 4, 5];
        let natural = m.residuals_at(&toks, 1).unwrap();
        // natural activation reproduces the unsubstituted readout
        let r0 = m
            .substituted_object_readout(&toks, 1, 1, 3, &[3, 4], &natural[1])
            .unwrap();
        let clean = m.forward(&toks, &[]).unwrap();
        let expect: Vec<f64> = (0..16)
            .map(|d| (clean.residuals[3][3][d] + clean.residuals[3][4][d]) / 2.0)
            .collect();
        assert_eq!(r0.0, expect);

        let s = Vector((0..16).map(|i| (i as f64).sin()).collect());
        let r1 = m
            .substituted_object_readout(&toks, 1, 1, 3, &[3, 4], &s)
            .unwrap();
        let patched = m
            .forward(&toks, &[PatchSpec::replace(1, 1, s.clone())])
            .unwrap();
        let expect: Vec<f64> = (0..16)
            .map(|d| (patched.residuals[3][3][d] + patched.residuals[3][4][d]) / 2.0)
            .collect();
        assert_eq!(r1.0, expect);
        assert_ne!(r0, r1);

        let z = m
            .substituted_object_readout(&toks, 1, 1, 3, &[4], &[0.0; 16])
            .unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn greedy_generation() {
        let m = small_model(7);
        assert!(m.generate_greedy(&[1, 2], 0).unwrap().is_empty());
        let a = m.generate_greedy(&[1, 2], 4).unwrap();
        let b = m.generate_greedy(&[1, 2], 4).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ToyConfig::new(vec!["a".into()], 0);
        cfg.heads = 5;
        assert!(ToyModel::new(cfg).is_err());
        let cfg = ToyConfig::new(vec!["a".into(), "a".into()], 0);
        assert!(ToyModel::new(cfg).is_err());
    }
}
