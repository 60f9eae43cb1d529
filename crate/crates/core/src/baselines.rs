//! Baseline concept learners: class-mean averaging and a zero-bias linear SVM.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{unit_or_degenerate, Lrc, Provenance};
use crate::linalg::{mean_vectors, Vector};
use crate::rng::stream;

/// Subject activations with their object labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledActivations {
    pub relation: String,
    pub subject_layer: usize,
    pub activations: Vec<Vector>,
    pub labels: Vec<String>,
    pub prompt_ids: Vec<String>,
}

impl LabeledActivations {
    fn check(&self) -> Result<()> {
        if self.activations.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} activations but {} labels",
                self.activations.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }

    fn ids_for(&self, object: &str) -> Vec<String> {
        self.labels
            .iter()
            .zip(&self.prompt_ids)
            .filter(|(l, _)| *l == object)
            .map(|(_, id)| id.clone())
            .collect()
    }
}

/// Unit-normalized mean of the object's activations.
pub fn averaging_concept(data: &LabeledActivations, object: &str) -> Result<Lrc> {
    data.check()?;
    let mine: Vec<Vector> = data
        .activations
        .iter()
        .zip(&data.labels)
        .filter(|(_, l)| *l == object)
        .map(|(a, _)| a.clone())
        .collect();
    if mine.is_empty() {
        return Err(Error::UnknownObject(object.to_string()));
    }
    let vector = unit_or_degenerate(mean_vectors(&mine)?, &format!("{}/{object}", data.relation))?;
    Ok(Lrc {
        relation: data.relation.clone(),
        object: object.to_string(),
        vector,
        subject_layer: data.subject_layer,
        provenance: Provenance::Averaging,
        trained_on: data.ids_for(object),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmOptions {
    pub epochs: usize,
    /// Initial step; step `t` (1-based, counted over all updates) uses `lr / t`.
    pub lr: f64,
    pub reg: f64,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions {
            epochs: 200,
            lr: 0.1,
            reg: 1e-3,
            seed: 0,
        }
    }
}

/// Raw (unnormalized) one-vs-rest weights minimizing
/// `reg * |w|^2 + mean(max(0, 1 - y_i w.x_i))` by per-sample subgradient steps.
pub fn svm_weights(data: &LabeledActivations, object: &str, opts: &SvmOptions) -> Result<Vector> {
    data.check()?;
    let n = data.activations.len();
    let pos = data.labels.iter().filter(|l| *l == object).count();
    if pos == 0 || pos == n {
        return Err(Error::InvalidArgument(format!(
            "SVM for {object:?} needs positive and negative examples ({pos} of {n} positive)"
        )));
    }
    let dim = data.activations[0].dim();
    let mut w = vec![0.0; dim];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(opts.seed, &["svm", &data.relation, object]);
    let mut t = 0usize;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = opts.lr / t as f64;
            let x = &data.activations[i];
            let y = if data.labels[i] == object { 1.0 } else { -1.0 };
            let margin = y * crate::linalg::dot(&w, x);
            for (wj, xj) in w.iter_mut().zip(x.iter()) {
                let mut g = 2.0 * opts.reg * *wj;
                if margin < 1.0 {
                    g -= y * xj;
                }
                *wj -= eta * g;
            }
        }
    }
    Ok(Vector(w))
}

pub fn svm_concept(data: &LabeledActivations, object: &str, opts: &SvmOptions) -> Result<Lrc> {
    let w = svm_weights(data, object, opts)?;
    let vector = unit_or_degenerate(w, &format!("{}/{object}", data.relation))?;
    Ok(Lrc {
        relation: data.relation.clone(),
        object: object.to_string(),
        vector,
        subject_layer: data.subject_layer,
        provenance: Provenance::Svm,
        trained_on: data.ids_for(object),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(points: &[(&[f64], &str)]) -> LabeledActivations {
        LabeledActivations {
            relation: "r".into(),
            subject_layer: 0,
            activations: points.iter().map(|(p, _)| Vector(p.to_vec())).collect(),
            labels: points.iter().map(|(_, l)| l.to_string()).collect(),
            prompt_ids: (0..points.len()).map(|i| i.to_string()).collect(),
        }
    }

    #[test]
    fn averaging_examples() {
        let d = data(&[(&[2.0, 0.0], "A"), (&[4.0, 0.0], "A"), (&[0.0, 3.0], "B")]);
        assert_eq!(averaging_concept(&d, "A").unwrap().vector.0, vec![1.0, 0.0]);
        assert_eq!(averaging_concept(&d, "B").unwrap().vector.0, vec![0.0, 1.0]);
        assert!(matches!(
            averaging_concept(&d, "C"),
            Err(Error::UnknownObject(_))
        ));
        let d = data(&[(&[1.0, 0.0], "A"), (&[-1.0, 0.0], "A")]);
        assert!(matches!(
            averaging_concept(&d, "A"),
            Err(Error::DegenerateConcept(_))
        ));
    }

    #[test]
    fn svm_separates_and_is_deterministic() {
        let d = data(&[(&[1.0, 0.1], "P"), (&[1.0, -0.1], "P"), (&[-1.0, 0.0], "N")]);
        let opts = SvmOptions::default();
        let v = svm_concept(&d, "P", &opts).unwrap();
        assert!((v.vector.norm() - 1.0).abs() < 1e-12);
        for (x, l) in d.activations.iter().zip(&d.labels) {
            let s = v.vector.dot(x);
            assert!(if l == "P" { s > 0.0 } else { s < 0.0 });
        }
        assert_eq!(v, svm_concept(&d, "P", &opts).unwrap());
        let one = data(&[(&[1.0, 0.0], "P")]);
        assert!(svm_concept(&one, "P", &opts).is_err());
    }
}
