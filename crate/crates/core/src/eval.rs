//! Accuracy evaluation: clean accuracy, robust accuracy under an attack
//! battery entry, and recounting from persisted adversarial dumps.
//!
//! Attack jobs fan out across a worker pool; every job owns a private
//! stream derived from `(seed, example index)` and ensemble targets are
//! forked per example, so results are order-stable and independent of the
//! thread count.

use rayon::prelude::*;

use crate::attacks::{run_attack, AttackOutcome, AttackSpec};
use crate::data::Dataset;
use crate::error::Result;
use crate::models::Model;
use crate::tensor::Tensor;

/// Robust-accuracy evaluation of one (model, attack) pair.
#[derive(Debug)]
pub struct AttackEval {
    pub correct: usize,
    pub n: usize,
    pub total_queries: u64,
    pub outcomes: Vec<AttackOutcome>,
}

impl AttackEval {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }

    pub fn mean_queries(&self) -> f64 {
        self.total_queries as f64 / self.n as f64
    }
}

/// Runs `spec` against every example of `data` and counts survivors.
/// An example counts as correct when the attack fails (the deployed
/// prediction still matches the label).
pub fn evaluate_attack(
    model: &Model,
    source: Option<&Model>,
    data: &Dataset,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackEval> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let outcomes: Result<Vec<AttackOutcome>> = indices
        .par_iter()
        .map(|&i| {
            let target = model.fork_for_worker(i as u64);
            let x = data.image(i);
            run_attack(spec, &target, source, &x, data.label(i), seed, i as u64)
        })
        .collect();
    let outcomes = outcomes?;
    let correct = outcomes.iter().filter(|o| !o.success).count();
    let total_queries = outcomes.iter().map(|o| o.queries).sum();
    Ok(AttackEval { correct, n: data.len(), total_queries, outcomes })
}

/// Clean accuracy counts. Plain models evaluate in batches; randomized
/// ensembles answer one drawn member per example, through a dedicated
/// fork of the draw stream so surrounding draws are unaffected.
pub fn clean_accuracy_counts(model: &Model, data: &Dataset) -> Result<(usize, usize)> {
    let n = data.len();
    let mut correct = 0usize;
    match model {
        Model::Ensemble(e) => {
            let fork = e.fork(u64::MAX);
            for i in 0..n {
                let pred = fork.predict_logits(&data.image(i))?.argmax_rows()[0];
                if pred == data.label(i) {
                    correct += 1;
                }
            }
        }
        _ => {
            let indices: Vec<usize> = (0..n).collect();
            for chunk in indices.chunks(64) {
                let (batch, labels) = data.batch(chunk);
                for (p, y) in model.predict(&batch)?.into_iter().zip(labels) {
                    if p == y {
                        correct += 1;
                    }
                }
            }
        }
    }
    Ok((correct, n))
}

/// Recounts an accuracy from stored adversarial examples; the independent
/// verification path for every emitted battery row.
pub fn recount(model: &Model, adversarial: &[Tensor], labels: &[usize]) -> Result<usize> {
    let mut correct = 0usize;
    for (x, &y) in adversarial.iter().zip(labels) {
        if model.predict(x)?[0] == y {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Stores attack outcomes as an ADVB dataset (adversarial image + true
/// label per example) so any report row can be recounted later.
pub fn outcomes_to_dataset(outcomes: &[AttackOutcome], labels: &[u8], data: &Dataset) -> Result<Dataset> {
    let per = data.images().example_len();
    let mut buf = Vec::with_capacity(outcomes.len() * per);
    for o in outcomes {
        buf.extend_from_slice(o.adversarial.data());
    }
    let mut shape = data.images().shape().to_vec();
    shape[0] = outcomes.len();
    Dataset::new(Tensor::new(shape, buf)?, labels.to_vec(), data.split())
}
