//! Zero-shot evaluation and the accuracy-matrix summaries.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::Embedder;
use crate::error::{Error, Result};
use crate::taskgen::{ClassSpec, StreamMode, StreamSpec, TaskSpec};
use crate::tensor::Tensor;

/// Accuracies after each training stage.
///
/// Row 0 holds the initial model; row `i` the model after task `i`.
/// Column `j` (0-based) is the `j+1`-th task of the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct AccuracyMatrix {
    values: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for AccuracyMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<AccuracyMatrix> for Vec<Vec<f64>> {
    fn from(a: AccuracyMatrix) -> Self {
        a.values
    }
}

impl AccuracyMatrix {
    /// An all-zero matrix for `n_tasks` tasks.
    pub fn new(n_tasks: usize) -> Result<Self> {
        Self::from_rows(vec![vec![0.0; n_tasks]; n_tasks + 1])
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len().saturating_sub(1);
        if n < 2 {
            return Err(Error::Contract(format!(
                "accuracy matrix needs at least 2 tasks, got {n}"
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Shape {
                    op: "accuracy_matrix",
                    detail: format!("row {i} has {} entries, expected {n}", r.len()),
                });
            }
            if let Some(v) = r.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract(format!("accuracy {v} in row {i} is outside [0, 1]")));
            }
        }
        Ok(Self { values: rows })
    }

    pub fn n_tasks(&self) -> usize {
        self.values.len() - 1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    pub fn set(&mut self, row: usize, col: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Contract(format!("accuracy {acc} is outside [0, 1]")));
        }
        self.values[row][col] = acc;
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn zero_shot_row(&self) -> &[f64] {
        &self.values[0]
    }

    /// Zero-shot accuracy on each task averaged over the models trained
    /// strictly before it. The first task has no such model and is skipped.
    pub fn transfer(&self) -> f64 {
        let n = self.n_tasks();
        mean((1..n).map(|j| mean((1..=j).map(|i| self.values[i][j]))))
    }

    /// Mean over every trained model and every task.
    pub fn avg(&self) -> f64 {
        mean(self.values[1..].iter().flatten().copied())
    }

    /// Mean accuracy of the final model.
    pub fn last(&self) -> f64 {
        mean(self.values[self.n_tasks()].iter().copied())
    }

    /// Per model, the mean over tasks seen so far; then averaged over models.
    pub fn current_avg(&self) -> f64 {
        let n = self.n_tasks();
        mean((1..=n).map(|i| mean(self.values[i][..i].iter().copied())))
    }

    pub fn summary(&self) -> Summary {
        Summary {
            transfer: self.transfer(),
            avg: self.avg(),
            last: self.last(),
            current_avg: self.current_avg(),
        }
    }
}

/// Mean shifted by the first value, so equal inputs average to exactly
/// that value.
fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut it = xs;
    let Some(x0) = it.next() else { return f64::NAN };
    let (mut n, mut d) = (1usize, 0.0);
    for x in it {
        d += x - x0;
        n += 1;
    }
    x0 + d / n as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub transfer: f64,
    pub avg: f64,
    pub last: f64,
    pub current_avg: f64,
}

impl Summary {
    /// (Transfer + Avg + Last) / 3.
    pub fn composite(&self) -> f64 {
        (self.transfer + self.avg + self.last) / 3.0
    }
}

/// Label space for evaluating task `col` with the model of row `row`.
///
/// Multi-domain tasks are judged in their own label space. In the
/// class-incremental setting the candidates are every class of tasks
/// `1..=max(row, col + 1)`, i.e. what the model has seen plus the task
/// under test.
pub fn candidates(stream: &StreamSpec, row: usize, col: usize) -> Vec<&ClassSpec> {
    match stream.mode() {
        StreamMode::MultiDomain => stream.tasks[col].classes.iter().collect(),
        StreamMode::ClassIncremental => {
            let upto = row.max(col + 1).min(stream.n_tasks());
            stream.tasks[..upto].iter().flat_map(|t| t.classes.iter()).collect()
        }
    }
}

/// Fraction of `task`'s test samples whose most cosine-similar candidate
/// text embedding is their own class. Ties go to the earlier candidate.
pub fn evaluate<E: Embedder>(model: &E, task: &TaskSpec, candidates: &[&ClassSpec]) -> Result<f64> {
    if task.test_samples.is_empty() {
        return Err(Error::Contract(format!("task {} has no test samples", task.task_id)));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("no candidate classes".into()));
    }
    let tokens: Vec<usize> = candidates.iter().map(|c| c.token_id).collect();
    let texts = model.embed_texts(&tokens)?;
    let (x, labels) = task.test_batch()?;
    let feats = model.embed_images(&x)?;
    let pred = argmax_cosine(&feats, &texts);
    let correct = pred
        .iter()
        .zip(&labels)
        .filter(|(&p, &l)| candidates[p].class_id == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn argmax_cosine(feats: &Tensor, texts: &Tensor) -> Vec<usize> {
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
    let tnorms: Vec<f64> = (0..texts.rows()).map(|k| norm(texts.row(k))).collect();
    (0..feats.rows())
        .map(|i| {
            let f = feats.row(i);
            let fnorm = norm(f);
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..texts.rows() {
                let dot: f64 = f.iter().zip(texts.row(k)).map(|(a, b)| a * b).sum();
                let s = dot / (fnorm * tnorms[k]);
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect()
}

/// Evaluates `model` on every task as row `row` of the accuracy matrix.
pub fn evaluate_row<E: Embedder>(model: &E, stream: &StreamSpec, row: usize) -> Result<Vec<f64>> {
    (0..stream.n_tasks())
        .map(|j| evaluate(model, &stream.tasks[j], &candidates(stream, row, j)))
        .collect()
}
