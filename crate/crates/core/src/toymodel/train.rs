//! Full-batch SGD with hand-written backpropagation.
//!
//! Loss is the mean cross-entropy over completion tokens only. Training is
//! single-threaded and runs a fixed number of steps.

use serde::{Deserialize, Serialize};

use super::{
    affine, gelu, gelu_grad, layer_norm, softmax_in_place, Block, NormKind, ParamOwner, Params,
    TokenId, ToyConfig, ToyModel,
};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// One training sequence: `tokens[completion_start..]` are the targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub tokens: Vec<TokenId>,
    pub completion_start: usize,
}

impl TrainingPair {
    pub fn encode(model: &ToyModel, prompt: &str, completion: &str) -> Result<Self> {
        let mut tokens = model.tokenizer().encode(prompt)?;
        let completion_start = tokens.len();
        tokens.extend(model.tokenizer().encode(completion)?);
        if completion_start == 0 || tokens.len() == completion_start {
            return Err(Error::InvalidArgument(format!(
                "training pair needs a non-empty prompt and completion: {prompt:?} -> {completion:?}"
            )));
        }
        Ok(TrainingPair {
            tokens,
            completion_start,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Blocks before this one (1-based) and the embeddings stay frozen;
    /// 0 trains everything.
    #[serde(default)]
    pub trainable_from_block: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            lr: 0.5,
            trainable_from_block: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Build a model from `config` and train it on `(prompt, completion)` pairs.
pub fn train_on_corpus(
    config: ToyConfig,
    corpus: &[(String, String)],
    options: &TrainOptions,
) -> Result<(ToyModel, TrainReport)> {
    let mut model = ToyModel::new(config)?;
    let pairs = corpus
        .iter()
        .map(|(p, c)| TrainingPair::encode(&model, p, c))
        .collect::<Result<Vec<_>>>()?;
    let report = model.train(&pairs, options)?;
    Ok((model, report))
}

impl ToyModel {
    /// Train in place. The reported final loss is measured after the last step.
    pub fn train(&mut self, pairs: &[TrainingPair], options: &TrainOptions) -> Result<TrainReport> {
        if pairs.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        for p in pairs {
            self.check_tokens(&p.tokens)?;
            if p.completion_start == 0 || p.completion_start >= p.tokens.len() {
                return Err(Error::InvalidArgument(
                    "training pair has no targets".into(),
                ));
            }
        }
        if options.trainable_from_block > self.config.layers + 1 {
            return Err(Error::InvalidArgument(format!(
                "trainable_from_block {} exceeds {} blocks",
                options.trainable_from_block, self.config.layers
            )));
        }
        if !(options.lr.is_finite() && options.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                options.lr
            )));
        }

        let start = options.trainable_from_block.max(1);
        let frozen_prefix = options.trainable_from_block >= 1;
        let cached: Option<Vec<Vec<Vector>>> = if frozen_prefix {
            Some(
                pairs
                    .iter()
                    .map(|p| self.residuals_at(&p.tokens, start - 1))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let n_targets: usize = pairs
            .iter()
            .map(|p| p.tokens.len() - p.completion_start)
            .sum();
        let inv_n = 1.0 / n_targets as f64;

        let trainable: Vec<bool> = (0..self.params.views_mut().len())
            .map(|i| match Params::owner_of(i, self.config.layers) {
                ParamOwner::Embedding => !frozen_prefix,
                ParamOwner::Block(b) => b >= start,
                ParamOwner::Head => true,
            })
            .collect();

        let mut initial_loss = f64::NAN;
        let mut step = 0;
        loop {
            let mut grads = Params::zeros(&self.config);
            let mut loss = 0.0;
            for (i, pair) in pairs.iter().enumerate() {
                let input = match &cached {
                    Some(c) => c[i].clone(),
                    None => self.embed(&pair.tokens),
                };
                loss += self.backprop(pair, input, start, frozen_prefix, inv_n, &mut grads);
            }
            loss *= inv_n;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if step == 0 {
                initial_loss = loss;
            }
            if step == options.steps {
                return Ok(TrainReport {
                    steps: options.steps,
                    initial_loss,
                    final_loss: loss,
                });
            }
            let gv = grads.named();
            for ((dst, (_, _, g)), &train) in
                self.params.views_mut().into_iter().zip(gv).zip(&trainable)
            {
                if train {
                    for (w, d) in dst.iter_mut().zip(g) {
                        *w -= options.lr * d;
                    }
                }
            }
            step += 1;
        }
    }

    /// Forward and backward for one sequence, starting from the residual
    /// stream `input` entering block `start`. Gradients are scaled by `scale`
    /// and accumulated into `grads`. Returns the unscaled summed loss.
    fn backprop(
        &self,
        pair: &TrainingPair,
        input: Vec<Vector>,
        start: usize,
        frozen_prefix: bool,
        scale: f64,
        grads: &mut Params,
    ) -> f64 {
        let mut caches = Vec::with_capacity(self.config.layers + 1 - start);
        let mut x = input;
        for layer in start..=self.config.layers {
            let (out, cache) = self.block_forward_cached(layer, &x);
            caches.push(cache);
            x = out;
        }

        let p = &self.params;
        let t = x.len();
        let h = self.hidden_dim();
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; h]; t];
        let mut loss = 0.0;
        for pos in pair.completion_start - 1..t - 1 {
            let target = pair.tokens[pos + 1];
            let (n, xhat, inv) = self.norm_cached(&x[pos], &p.lnf_g, &p.lnf_b);
            let logits = affine(&n, &p.unembed, &vec![0.0; p.unembed.cols()]);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - logits[target];
            let mut probs = logits;
            softmax_in_place(&mut probs);
            let mut dlogits = probs;
            dlogits[target] -= 1.0;
            for d in &mut dlogits {
                *d *= scale;
            }
            let dn = outer_backward(&n, &dlogits, &p.unembed, &mut grads.unembed);
            dx[pos] = self.norm_backward(
                &dn,
                &xhat,
                inv,
                &p.lnf_g,
                &mut grads.lnf_g,
                &mut grads.lnf_b,
            );
        }

        for (offset, cache) in caches.iter().enumerate().rev() {
            let layer = start + offset;
            dx = self.block_backward(layer, cache, dx, &mut grads.blocks[layer - 1]);
        }

        if !frozen_prefix {
            for (pos, (&tok, d)) in pair.tokens.iter().zip(&dx).enumerate() {
                for (g, v) in grads.tok_emb.row_mut(tok).iter_mut().zip(d) {
                    *g += v;
                }
                for (g, v) in grads.pos_emb.row_mut(pos).iter_mut().zip(d) {
                    *g += v;
                }
            }
        }
        loss
    }

    fn norm_cached(&self, x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        match self.config.norm {
            NormKind::LayerNorm => layer_norm(x, g, b),
            NormKind::Identity => (x.to_vec(), Vec::new(), 1.0),
        }
    }

    fn norm_backward(
        &self,
        dy: &[f64],
        xhat: &[f64],
        inv: f64,
        g: &[f64],
        dg: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        match self.config.norm {
            NormKind::Identity => dy.to_vec(),
            NormKind::LayerNorm => {
                let n = dy.len() as f64;
                let mut dxhat = vec![0.0; dy.len()];
                for i in 0..dy.len() {
                    dg[i] += dy[i] * xhat[i];
                    db[i] += dy[i];
                    dxhat[i] = dy[i] * g[i];
                }
                let m1 = dxhat.iter().sum::<f64>() / n;
                let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                dxhat
                    .iter()
                    .zip(xhat)
                    .map(|(d, xh)| inv * (d - m1 - xh * m2))
                    .collect()
            }
        }
    }

    fn block_forward_cached(&self, layer: usize, x: &[Vector]) -> (Vec<Vector>, BlockCache) {
        let blk = &self.params.blocks[layer - 1];
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t = x.len();
        let mut c = BlockCache::default();
        for xi in x {
            let (a, xhat, inv) = self.norm_cached(xi, &blk.ln1_g, &blk.ln1_b);
            c.q.push(affine(&a, &blk.w_q, &blk.b_q));
            c.k.push(affine(&a, &blk.w_k, &blk.b_k));
            c.v.push(affine(&a, &blk.w_v, &blk.b_v));
            c.a.push(a);
            c.ln1.push((xhat, inv));
        }
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let mut concat = vec![0.0; self.hidden_dim()];
            let mut probs_i = Vec::with_capacity(heads);
            for head in 0..heads {
                let r = head * hd..(head + 1) * hd;
                let mut s: Vec<f64> = (0..=i)
                    .map(|j| crate::linalg::dot(&c.q[i][r.clone()], &c.k[j][r.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut s);
                for (j, &w) in s.iter().enumerate() {
                    for (cc, vv) in concat[r.clone()].iter_mut().zip(&c.v[j][r.clone()]) {
                        *cc += w * vv;
                    }
                }
                probs_i.push(s);
            }
            let attn = affine(&concat, &blk.w_o, &blk.b_o);
            let hmid: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let (cn, xhat2, inv2) = self.norm_cached(&hmid, &blk.ln2_g, &blk.ln2_b);
            let fpre = affine(&cn, &blk.w_fc, &blk.b_fc);
            let f: Vec<f64> = fpre.iter().map(|&z| gelu(z)).collect();
            let m = affine(&f, &blk.w_proj, &blk.b_proj);
            out.push(Vector(hmid.iter().zip(&m).map(|(a, b)| a + b).collect()));
            c.probs.push(probs_i);
            c.concat.push(concat);
            c.ln2.push((xhat2, inv2));
            c.cn.push(cn);
            c.fpre.push(fpre);
            c.f.push(f);
        }
        (out, c)
    }

    fn block_backward(
        &self,
        layer: usize,
        c: &BlockCache,
        dout: Vec<Vec<f64>>,
        g: &mut Block,
    ) -> Vec<Vec<f64>> {
        let blk = &self.params.blocks[layer - 1];
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t = dout.len();
        let h = self.hidden_dim();

        let mut dq = vec![vec![0.0; h]; t];
        let mut dk = vec![vec![0.0; h]; t];
        let mut dv = vec![vec![0.0; h]; t];
        let mut dx = vec![vec![0.0; h]; t];

        for i in 0..t {
            let dm = &dout[i];
            add_into(&mut g.b_proj, dm);
            let df = outer_backward(&c.f[i], dm, &blk.w_proj, &mut g.w_proj);
            let dfpre: Vec<f64> = df
                .iter()
                .zip(&c.fpre[i])
                .map(|(d, &z)| d * gelu_grad(z))
                .collect();
            add_into(&mut g.b_fc, &dfpre);
            let dcn = outer_backward(&c.cn[i], &dfpre, &blk.w_fc, &mut g.w_fc);
            let (xhat2, inv2) = &c.ln2[i];
            let mut dhmid =
                self.norm_backward(&dcn, xhat2, *inv2, &blk.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
            add_into(&mut dhmid, dm);

            add_into(&mut dx[i], &dhmid);
            add_into(&mut g.b_o, &dhmid);
            let dconcat = outer_backward(&c.concat[i], &dhmid, &blk.w_o, &mut g.w_o);
            for head in 0..heads {
                let r = head * hd..(head + 1) * hd;
                let probs = &c.probs[i][head];
                let dc = &dconcat[r.clone()];
                let dp: Vec<f64> = (0..=i)
                    .map(|j| crate::linalg::dot(dc, &c.v[j][r.clone()]))
                    .collect();
                let mix: f64 = probs.iter().zip(&dp).map(|(p, d)| p * d).sum();
                for j in 0..=i {
                    let pj = probs[j];
                    for (a, b) in dv[j][r.clone()].iter_mut().zip(dc) {
                        *a += pj * b;
                    }
                    let ds = pj * (dp[j] - mix) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for d in r.clone() {
                        dq[i][d] += ds * c.k[j][d];
                        dk[j][d] += ds * c.q[i][d];
                    }
                }
            }
        }

        for i in 0..t {
            add_into(&mut g.b_q, &dq[i]);
            add_into(&mut g.b_k, &dk[i]);
            add_into(&mut g.b_v, &dv[i]);
            let mut da = outer_backward(&c.a[i], &dq[i], &blk.w_q, &mut g.w_q);
            add_into(
                &mut da,
                &outer_backward(&c.a[i], &dk[i], &blk.w_k, &mut g.w_k),
            );
            add_into(
                &mut da,
                &outer_backward(&c.a[i], &dv[i], &blk.w_v, &mut g.w_v),
            );
            let (xhat1, inv1) = &c.ln1[i];
            let d = self.norm_backward(&da, xhat1, *inv1, &blk.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
            add_into(&mut dx[i], &d);
        }
        dx
    }
}

#[derive(Default)]
struct BlockCache {
    ln1: Vec<(Vec<f64>, f64)>,
    a: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    probs: Vec<Vec<Vec<f64>>>,
    concat: Vec<Vec<f64>>,
    ln2: Vec<(Vec<f64>, f64)>,
    cn: Vec<Vec<f64>>,
    fpre: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// For `y = x W`: accumulates `dW += x^T dy` and returns `dx = dy W^T`.
fn outer_backward(x: &[f64], dy: &[f64], w: &Matrix, dw: &mut Matrix) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (i, &xi) in x.iter().enumerate() {
        let row = w.row(i);
        dx[i] = crate::linalg::dot(row, dy);
        if xi != 0.0 {
            for (g, d) in dw.row_mut(i).iter_mut().zip(dy) {
                *g += xi * d;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(norm: NormKind) -> ToyModel {
        let vocab: Vec<String> = ["\n", "a", "b", "c", "d"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut cfg = ToyConfig::new(vocab, 11);
        cfg.hidden_dim = 6;
        cfg.layers = 2;
        cfg.heads = 2;
        cfg.mlp_dim = 8;
        cfg.max_seq = 8;
        cfg.norm = norm;
        let mut m = ToyModel::new(cfg).unwrap();
        // larger weights so every term contributes to the gradient
        for v in m.params.views_mut() {
            for (i, x) in v.iter_mut().enumerate() {
                *x = *x * 15.0 + 0.05 * ((i % 7) as f64 - 3.0);
            }
        }
        m
    }

    fn loss(m: &ToyModel, pairs: &[TrainingPair]) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for p in pairs {
            let out = m.forward(&p.tokens, &[]).unwrap();
            for pos in p.completion_start - 1..p.tokens.len() - 1 {
                total -= out.probs[pos][p.tokens[pos + 1]].ln();
                n += 1;
            }
        }
        total / n as f64
    }

    fn check_gradients(norm: NormKind) {
        let m = tiny(norm);
        let pairs = vec![
            TrainingPair {
                tokens: vec![1, 2, 3, 4],
                completion_start: 2,
            },
            TrainingPair {
                tokens: vec![2, 0, 1],
                completion_start: 1,
            },
        ];
        let mut grads = Params::zeros(m.config());
        let n = 4.0;
        for p in &pairs {
            m.backprop(p, m.embed(&p.tokens), 1, false, 1.0 / n, &mut grads);
        }
        let eps = 1e-6;
        let names: Vec<String> = grads.named().iter().map(|(n, _, _)| n.clone()).collect();
        let gflat: Vec<Vec<f64>> = grads.named().iter().map(|(_, _, g)| g.to_vec()).collect();
        for (ti, name) in names.iter().enumerate() {
            for idx in (0..gflat[ti].len()).step_by(3) {
                let mut plus = m.clone();
                plus.params.views_mut()[ti][idx] += eps;
                let mut minus = m.clone();
                minus.params.views_mut()[ti][idx] -= eps;
                let fd = (loss(&plus, &pairs) - loss(&minus, &pairs)) / (2.0 * eps);
                let an = gflat[ti][idx];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "{name}[{idx}]: finite difference {fd} vs backprop {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_layer_norm() {
        check_gradients(NormKind::LayerNorm);
    }

    #[test]
    fn gradients_match_finite_differences_identity_norm() {
        check_gradients(NormKind::Identity);
    }

    fn corpus() -> (ToyConfig, Vec<(String, String)>) {
        let vocab: Vec<String> = [
            "\n", "paris", "rome", "tokyo", "lima", "is", "in", "france", "italy", "japan", "peru",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut cfg = ToyConfig::new(vocab, 3);
        cfg.hidden_dim = 16;
        cfg.layers = 2;
        cfg.heads = 2;
        cfg.mlp_dim = 32;
        cfg.max_seq = 8;
        let c = [
            ("paris", "france"),
            ("rome", "italy"),
            ("tokyo", "japan"),
            ("lima", "peru"),
        ]
        .iter()
        .map(|(s, o)| (format!("{s} is in"), o.to_string()))
        .collect();
        (cfg, c)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (cfg, c) = corpus();
        let (m, r) = train_on_corpus(
            cfg.clone(),
            &c,
            &TrainOptions {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m, ToyModel::new(cfg).unwrap());
        assert_eq!(r.initial_loss, r.final_loss);
    }

    #[test]
    fn memorizes_four_pairs_deterministically() {
        let (cfg, c) = corpus();
        let opts = TrainOptions {
            steps: 2000,
            lr: 0.5,
            trainable_from_block: 0,
        };
        let (m, r) = train_on_corpus(cfg.clone(), &c, &opts).unwrap();
        assert!(r.final_loss < r.initial_loss);
        for (p, o) in &c {
            let toks = m.tokenizer().encode(p).unwrap();
            let out = m.generate_greedy(&toks, 1).unwrap();
            assert_eq!(m.tokenizer().decode(&out), *o);
        }
        let (m2, _) = train_on_corpus(cfg, &c, &opts).unwrap();
        assert_eq!(m.params, m2.params);
    }

    #[test]
    fn frozen_prefix_is_untouched() {
        let (cfg, c) = corpus();
        let opts = TrainOptions {
            steps: 20,
            lr: 0.5,
            trainable_from_block: 2,
        };
        let (m, _) = train_on_corpus(cfg.clone(), &c, &opts).unwrap();
        let init = ToyModel::new(cfg).unwrap();
        assert_eq!(m.params.tok_emb, init.params.tok_emb);
        assert_eq!(m.params.blocks[0], init.params.blocks[0]);
        assert_ne!(m.params.blocks[1], init.params.blocks[1]);
        assert_ne!(m.params.unembed, init.params.unembed);
    }

    #[test]
    fn divergence_is_reported() {
        let (cfg, c) = corpus();
        let opts = TrainOptions {
            steps: 50,
            lr: 1e300,
            trainable_from_block: 0,
        };
        assert!(matches!(
            train_on_corpus(cfg, &c, &opts),
            Err(Error::Diverged { .. })
        ));
    }
}
