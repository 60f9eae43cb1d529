//! LRE estimation from per-prompt Jacobians, low-rank inversion and concept
//! construction.
//!
//! `F(s)` is the mean object-layer residual over a prompt's object token
//! positions, viewed as a function of the final-subject-token residual `s` at
//! the subject layer. An LRE is the mean of the per-prompt affine
//! linearizations of `F`; its low-rank pseudo-inverse maps object activations
//! back into subject space, and the normalized mean of those images is the
//! concept direction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PromptInstance;
use crate::error::{Error, Result};
use crate::linalg::{mean_matrices, mean_vectors, norm, pinv_low_rank, Matrix, Vector};
use crate::toymodel::{argmax, ToyModel};

/// Below this norm a concept direction is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Relative step for central finite differences.
pub const FD_STEP: f64 = 1e-3;

/// A model whose subject-to-object map can be probed with substituted
/// subject activations.
pub trait RelationalModel: Sync {
    fn hidden_dim(&self) -> usize;

    /// Highest hook layer.
    fn final_layer(&self) -> usize;

    /// Prepare `F` for one prompt, reading the mean over `object_positions`.
    fn readout<'a>(
        &'a self,
        prompt: &PromptInstance,
        subject_layer: usize,
        object_layer: usize,
        object_positions: &[usize],
    ) -> Result<Box<dyn SubjectReadout + 'a>>;

    /// Natural residual at the final subject token.
    fn subject_activation(&self, prompt: &PromptInstance, layer: usize) -> Result<Vector>;

    /// Natural mean residual over `positions`.
    fn object_activation(
        &self,
        prompt: &PromptInstance,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vector>;
}

/// `F` for one prompt.
pub trait SubjectReadout: Sync {
    /// The natural (unsubstituted) subject activation.
    fn natural(&self) -> &Vector;

    fn eval(&self, substituted: &[f64]) -> Result<Vector>;
}

struct ToyReadout<'a> {
    model: &'a ToyModel,
    prefix: Vec<Vector>,
    subject_index: usize,
    subject_layer: usize,
    object_layer: usize,
    positions: Vec<usize>,
    natural: Vector,
}

impl SubjectReadout for ToyReadout<'_> {
    fn natural(&self) -> &Vector {
        &self.natural
    }

    fn eval(&self, substituted: &[f64]) -> Result<Vector> {
        self.model.substituted_readout_from(
            &self.prefix,
            self.subject_index,
            self.subject_layer,
            self.object_layer,
            &self.positions,
            substituted,
        )
    }
}

impl RelationalModel for ToyModel {
    fn hidden_dim(&self) -> usize {
        ToyModel::hidden_dim(self)
    }

    fn final_layer(&self) -> usize {
        ToyModel::final_layer(self)
    }

    fn readout<'a>(
        &'a self,
        prompt: &PromptInstance,
        subject_layer: usize,
        object_layer: usize,
        object_positions: &[usize],
    ) -> Result<Box<dyn SubjectReadout + 'a>> {
        let prefix = self.residuals_at(&prompt.tokens, subject_layer)?;
        let subject_index = prompt.subject_index();
        let natural = prefix
            .get(subject_index)
            .cloned()
            .ok_or_else(|| Error::Span(format!("subject index {subject_index} outside prompt")))?;
        Ok(Box::new(ToyReadout {
            model: self,
            prefix,
            subject_index,
            subject_layer,
            object_layer,
            positions: object_positions.to_vec(),
            natural,
        }))
    }

    fn subject_activation(&self, prompt: &PromptInstance, layer: usize) -> Result<Vector> {
        let r = self.residuals_at(&prompt.tokens, layer)?;
        r.get(prompt.subject_index())
            .cloned()
            .ok_or_else(|| Error::Span("subject index outside prompt".into()))
    }

    fn object_activation(
        &self,
        prompt: &PromptInstance,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vector> {
        let r = self.residuals_at(&prompt.tokens, layer)?;
        let picked = positions
            .iter()
            .map(|&p| {
                r.get(p)
                    .cloned()
                    .ok_or_else(|| Error::Span("object position outside prompt".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        mean_vectors(&picked)
    }
}

// ---------------------------------------------------------------------------
// Jacobians
// ---------------------------------------------------------------------------

/// Linearization of `F` at one prompt's natural subject activation.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianSample {
    pub prompt_id: String,
    pub weight: Matrix,
    pub bias: Vector,
}

/// Central-difference Jacobian of `F` over all object token positions.
pub fn estimate_jacobian(
    model: &dyn RelationalModel,
    prompt: &PromptInstance,
    subject_layer: usize,
    object_layer: usize,
) -> Result<JacobianSample> {
    jacobian_at(
        model,
        prompt,
        subject_layer,
        object_layer,
        &prompt.object_token_positions,
    )
}

/// As [`estimate_jacobian`] but reading only the first object token position.
pub fn estimate_jacobian_first_token(
    model: &dyn RelationalModel,
    prompt: &PromptInstance,
    subject_layer: usize,
    object_layer: usize,
) -> Result<JacobianSample> {
    let first = prompt
        .object_token_positions
        .first()
        .copied()
        .ok_or_else(|| Error::Jacobian {
            prompt_id: prompt.prompt_id.clone(),
            message: "object has no tokens".into(),
        })?;
    jacobian_at(model, prompt, subject_layer, object_layer, &[first])
}

fn jacobian_at(
    model: &dyn RelationalModel,
    prompt: &PromptInstance,
    subject_layer: usize,
    object_layer: usize,
    positions: &[usize],
) -> Result<JacobianSample> {
    let fail = |message: String| Error::Jacobian {
        prompt_id: prompt.prompt_id.clone(),
        message,
    };
    if positions.is_empty() {
        return Err(fail("object has no tokens".into()));
    }
    let f = model.readout(prompt, subject_layer, object_layer, positions)?;
    let s = f.natural().clone();
    let h = s.dim();
    let eps = FD_STEP * norm(&s).max(1.0);
    let columns = (0..h)
        .into_par_iter()
        .map(|j| {
            let mut plus = s.clone();
            plus[j] += eps;
            let mut minus = s.clone();
            minus[j] -= eps;
            let fp = f.eval(&plus)?;
            let fm = f.eval(&minus)?;
            Ok(fp
                .iter()
                .zip(fm.iter())
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let weight = Matrix::from_columns(&columns)?;
    let f0 = f.eval(&s)?;
    let ws = weight.matvec(&s)?;
    let bias = f0.sub(&ws);
    if !weight.is_finite() || !bias.is_finite() {
        return Err(fail("finite differences produced non-finite values".into()));
    }
    Ok(JacobianSample {
        prompt_id: prompt.prompt_id.clone(),
        weight,
        bias,
    })
}

// ---------------------------------------------------------------------------
// LRE, inversion, concepts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Lre {
    pub relation: String,
    pub weight: Matrix,
    pub bias: Vector,
    pub subject_layer: usize,
    pub object_layer: usize,
    pub n_samples: usize,
    pub trained_on: Vec<String>,
}

impl Lre {
    pub fn apply(&self, s: &[f64]) -> Result<Vector> {
        Ok(self.weight.matvec(s)?.add(&self.bias))
    }
}

/// Mean weight and bias over `samples`, summed in input order.
pub fn train_lre(
    relation: &str,
    subject_layer: usize,
    object_layer: usize,
    samples: &[JacobianSample],
) -> Result<Lre> {
    if samples.is_empty() {
        return Err(Error::Empty("LRE training samples"));
    }
    let weights: Vec<Matrix> = samples.iter().map(|s| s.weight.clone()).collect();
    let biases: Vec<Vector> = samples.iter().map(|s| s.bias.clone()).collect();
    let weight = mean_matrices(&weights)?;
    let bias = mean_vectors(&biases)?;
    if weight.rows() != weight.cols() || bias.dim() != weight.rows() {
        return Err(Error::Shape(format!(
            "LRE weight {}x{} with bias of dim {}",
            weight.rows(),
            weight.cols(),
            bias.dim()
        )));
    }
    Ok(Lre {
        relation: relation.to_string(),
        weight,
        bias,
        subject_layer,
        object_layer,
        n_samples: samples.len(),
        trained_on: samples.iter().map(|s| s.prompt_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedLre {
    pub w_pinv: Matrix,
    pub bias: Vector,
    pub rank: usize,
    pub lre: Lre,
}

impl InvertedLre {
    /// `W^+ (o - b)`.
    pub fn apply(&self, o: &[f64]) -> Result<Vector> {
        self.w_pinv.matvec(&Vector(o.to_vec()).sub(&self.bias))
    }
}

pub fn invert_lre(lre: &Lre, rank: usize) -> Result<InvertedLre> {
    Ok(InvertedLre {
        w_pinv: pinv_low_rank(&lre.weight, rank)?,
        bias: lre.bias.clone(),
        rank,
        lre: lre.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LreInversion,
    Svm,
    Averaging,
}

/// A unit-norm concept direction for one (relation, object) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lrc {
    pub relation: String,
    pub object: String,
    pub vector: Vector,
    pub subject_layer: usize,
    pub provenance: Provenance,
    pub trained_on: Vec<String>,
}

pub(crate) fn unit_or_degenerate(v: Vector, what: &str) -> Result<Vector> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("concept direction for {what}")));
    }
    v.normalized(DEGENERATE_NORM)
        .ok_or_else(|| Error::DegenerateConcept(what.to_string()))
}

/// Normalized mean of `W^+ (o - b)` over the object's activations.
pub fn build_lrc(
    inv: &InvertedLre,
    object: &str,
    object_activations: &[Vector],
    trained_on: Vec<String>,
) -> Result<Lrc> {
    if object_activations.is_empty() {
        return Err(Error::Empty("object activations"));
    }
    let images = object_activations
        .iter()
        .map(|o| {
            if o.dim() != inv.bias.dim() {
                return Err(Error::Shape(format!(
                    "object activation dim {} vs LRE dim {}",
                    o.dim(),
                    inv.bias.dim()
                )));
            }
            inv.apply(o)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_vectors(&images)?;
    let vector = unit_or_degenerate(mean, &format!("{}/{}", inv.lre.relation, object))?;
    Ok(Lrc {
        relation: inv.lre.relation.clone(),
        object: object.to_string(),
        vector,
        subject_layer: inv.lre.subject_layer,
        provenance: Provenance::LreInversion,
        trained_on,
    })
}

/// Fraction of prompts where decoding `R(s)` with the model's head agrees with
/// the model's own first predicted token.
pub fn lre_faithfulness(lre: &Lre, model: &ToyModel, prompts: &[PromptInstance]) -> Result<f64> {
    if lre.object_layer != model.final_layer() {
        return Err(Error::NotFinalLayer {
            object_layer: lre.object_layer,
            final_layer: model.final_layer(),
        });
    }
    if prompts.is_empty() {
        return Err(Error::Empty("faithfulness test prompts"));
    }
    let mut hits = 0usize;
    for p in prompts {
        let out = model.forward(p.prompt_tokens(), &[])?;
        let predicted = argmax(&out.probs[p.prompt_len - 1]);
        let s = out.residuals[lre.subject_layer][p.subject_index()].clone();
        let decoded = argmax(&model.logits_from_residual(&lre.apply(&s)?));
        if decoded == predicted {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn lre_means_and_inversion() {
        let a = JacobianSample {
            prompt_id: "a".into(),
            weight: Matrix::identity(2),
            bias: Vector(vec![0.0, 0.0]),
        };
        let b = JacobianSample {
            prompt_id: "b".into(),
            weight: Matrix::identity(2).scaled(3.0),
            bias: Vector(vec![0.0, 0.0]),
        };
        let lre = train_lre("r", 0, 1, &[a.clone(), b]).unwrap();
        assert_eq!(lre.weight, Matrix::identity(2).scaled(2.0));
        assert_eq!(lre.n_samples, 2);
        let one = train_lre("r", 0, 1, std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.weight, a.weight);
        assert!(train_lre("r", 0, 1, &[]).is_err());

        let inv = invert_lre(&lre, 2).unwrap();
        assert!(
            inv.w_pinv
                .sub(&Matrix::identity(2).scaled(0.5))
                .unwrap()
                .max_abs()
                < 1e-15
        );
        assert!(matches!(
            invert_lre(&lre, 3),
            Err(Error::RankOutOfRange { .. })
        ));
        let lrc = build_lrc(&inv, "x", &[Vector(vec![4.0, 0.0])], vec![]).unwrap();
        assert_eq!(lrc.vector.0, vec![1.0, 0.0]);
        let lrc = build_lrc(
            &inv,
            "x",
            &[Vector(vec![4.0, 0.0]), Vector(vec![8.0, 0.0])],
            vec![],
        )
        .unwrap();
        assert_eq!(lrc.vector.0, vec![1.0, 0.0]);
        assert!(matches!(
            build_lrc(
                &inv,
                "x",
                &[Vector(vec![1.0, 0.0]), Vector(vec![-1.0, 0.0])],
                vec![]
            ),
            Err(Error::DegenerateConcept(_))
        ));
    }

    #[test]
    fn diag_rank_one_inversion() {
        let lre = train_lre(
            "r",
            0,
            1,
            &[JacobianSample {
                prompt_id: "p".into(),
                weight: Matrix::from_diag(&[4.0, 2.0, 0.0]),
                bias: Vector::zeros(3),
            }],
        )
        .unwrap();
        let inv = invert_lre(&lre, 1).unwrap();
        assert!(
            inv.w_pinv
                .sub(&Matrix::from_diag(&[0.25, 0.0, 0.0]))
                .unwrap()
                .max_abs()
                < 1e-15
        );
    }
}
