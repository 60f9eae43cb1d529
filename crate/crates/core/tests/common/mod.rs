//! Stub models with closed-form subject-to-object maps.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcon::dataset::{PromptInstance, PromptMode};
use relcon::estimator::{RelationalModel, SubjectReadout};
use relcon::linalg::{mean_vectors, Matrix, Vector};
use relcon::{Error, Result};

/// `F(s) = mean_p (A_p s + c_p)` over the requested object positions, where
/// `p` counts from the first object position.
pub struct AffineStub {
    pub maps: Vec<(Matrix, Vector)>,
    pub subjects: HashMap<String, Vector>,
}

struct Readout<'a> {
    stub: &'a AffineStub,
    offsets: Vec<usize>,
    natural: Vector,
}

impl SubjectReadout for Readout<'_> {
    fn natural(&self) -> &Vector {
        &self.natural
    }

    fn eval(&self, s: &[f64]) -> Result<Vector> {
        let outs = self
            .offsets
            .iter()
            .map(|&p| {
                let (a, c) = &self.stub.maps[p];
                Ok(a.matvec(s)?.add(c))
            })
            .collect::<Result<Vec<_>>>()?;
        mean_vectors(&outs)
    }
}

impl AffineStub {
    pub fn single(a: Matrix, c: Vector) -> Self {
        AffineStub {
            maps: vec![(a, c)],
            subjects: HashMap::new(),
        }
    }

    pub fn apply(&self, s: &Vector, n_positions: usize) -> Vector {
        let outs: Vec<Vector> = self.maps[..n_positions]
            .iter()
            .map(|(a, c)| a.matvec(s).unwrap().add(c))
            .collect();
        mean_vectors(&outs).unwrap()
    }
}

impl RelationalModel for AffineStub {
    fn hidden_dim(&self) -> usize {
        self.maps[0].1.dim()
    }

    fn final_layer(&self) -> usize {
        1
    }

    fn readout<'a>(
        &'a self,
        prompt: &PromptInstance,
        _subject_layer: usize,
        _object_layer: usize,
        object_positions: &[usize],
    ) -> Result<Box<dyn SubjectReadout + 'a>> {
        let first = prompt.object_token_positions[0];
        Ok(Box::new(Readout {
            stub: self,
            offsets: object_positions.iter().map(|p| p - first).collect(),
            natural: self.subject_activation(prompt, 0)?,
        }))
    }

    fn subject_activation(&self, prompt: &PromptInstance, _layer: usize) -> Result<Vector> {
        self.subjects
            .get(&prompt.prompt_id)
            .cloned()
            .ok_or_else(|| Error::UnknownObject(prompt.prompt_id.clone()))
    }

    fn object_activation(
        &self,
        prompt: &PromptInstance,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vector> {
        let r = self.readout(prompt, layer, 1, positions)?;
        r.eval(r.natural())
    }
}

/// A prompt shell: subject at index 1, `n_object` object positions after a
/// prompt of length 3.
pub fn prompt(id: &str, subject: &str, object: &str, n_object: usize) -> PromptInstance {
    PromptInstance {
        prompt_id: id.to_string(),
        relation: "stub".into(),
        subject: subject.into(),
        object: object.into(),
        mode: PromptMode::ZeroShot,
        full_text: String::new(),
        tokens: vec![0; 3 + n_object - 1],
        prompt_len: 3,
        subject_token_span: 1..2,
        object_tokens: vec![0; n_object],
        object_token_positions: (2..2 + n_object).collect(),
        few_shot_examples: Vec::new(),
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
