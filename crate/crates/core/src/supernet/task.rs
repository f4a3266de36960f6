use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::Result;

pub const INPUT_DIM: usize = 48;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_SIZE: usize = 10_000;
pub const VAL_SIZE: usize = 2_000;

const TEACHER_HIDDEN: usize = 64;
const MAX_TEACHER_ATTEMPTS: u64 = 16;
const BALANCE_ROUNDS: usize = 200;

/// Synthetic 10-class task standing in for an image dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub val_x: Tensor,
    pub val_y: Vec<usize>,
    pub seed: u64,
    /// Teacher attempts needed to reach class balance (1 unless the fallback fired).
    pub teacher_attempts: u64,
}

#[derive(Serialize, Deserialize)]
struct TaskLine {
    x: Vec<f64>,
    y: usize,
}

impl TaskDataset {
    /// Per-class fractions of the training labels.
    pub fn class_frequencies(&self) -> [f64; NUM_CLASSES] {
        class_frequencies(&self.train_y)
    }

    /// Rows `idx` of the training set as a batch.
    pub fn train_batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        gather(&self.train_x, &self.train_y, idx)
    }

    pub fn val_tensors(&self) -> (Tensor, Tensor) {
        let idx: Vec<usize> = (0..self.val_y.len()).collect();
        gather(&self.val_x, &self.val_y, &idx)
    }

    /// Writes the training split as JSON Lines `{"x": [...], "y": k}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (r, &y) in self.train_y.iter().enumerate() {
            let line = TaskLine {
                x: self.train_x.row(r).to_vec(),
                y,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gather(x: &Tensor, y: &[usize], idx: &[usize]) -> (Tensor, Tensor) {
    let mut xs = Vec::with_capacity(idx.len() * INPUT_DIM);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        xs.extend_from_slice(x.row(i));
        ys.push(y[i] as f64);
    }
    (
        Tensor::from_parts(vec![idx.len(), INPUT_DIM], xs),
        Tensor::vector(ys),
    )
}

fn class_frequencies(labels: &[usize]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for &y in labels {
        counts[y] += 1;
    }
    counts.map(|c| c as f64 / labels.len().max(1) as f64)
}

/// Every class frequency within 20% of uniform.
fn balanced(freq: &[f64; NUM_CLASSES]) -> bool {
    let u = 1.0 / NUM_CLASSES as f64;
    freq.iter().all(|&f| (f - u).abs() <= 0.2 * u)
}

struct Teacher {
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

impl Teacher {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let dims = [INPUT_DIM, TEACHER_HIDDEN, TEACHER_HIDDEN, NUM_CLASSES];
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| std * crate::rng::normal(rng))
                    .collect::<Vec<f64>>();
                (w, vec![0.0; fan_out], fan_in, fan_out)
            })
            .collect();
        Self { layers }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, (w, b, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let mut out = b.clone();
            for i in 0..*fan_in {
                let hi = h[i];
                for (o, wij) in out.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                    *o += hi * wij;
                }
            }
            if li != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn normal_rows(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let v = (0..n * INPUT_DIM).map(|_| crate::rng::normal(rng)).collect();
    Tensor::from_parts(vec![n, INPUT_DIM], v)
}

/// Generates the task deterministically from `seed`.
///
/// Inputs are standard normal; labels are the argmax of a random
/// 48-64-64-10 teacher whose output biases are calibrated until every class
/// holds 10% +/- 20% of the training set. If calibration does not converge
/// the teacher is redrawn from the next teacher stream.
pub fn gen_synthetic_dataset(seed: u64) -> TaskDataset {
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(0);
    let train_x = normal_rows(&mut data_rng, TRAIN_SIZE);
    let val_x = normal_rows(&mut data_rng, VAL_SIZE);

    let mut fallback = None;
    for attempt in 1..=MAX_TEACHER_ATTEMPTS {
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(seed);
        teacher_rng.set_stream(attempt);
        let mut teacher = Teacher::random(&mut teacher_rng);
        let train_logits: Vec<Vec<f64>> = (0..TRAIN_SIZE).map(|r| teacher.logits(train_x.row(r))).collect();

        let mut bias = [0.0; NUM_CLASSES];
        let label = |bias: &[f64; NUM_CLASSES], z: &[f64]| {
            let shifted: Vec<f64> = z.iter().zip(bias).map(|(a, b)| a + b).collect();
            argmax(&shifted)
        };
        let mut train_y: Vec<usize> = train_logits.iter().map(|z| label(&bias, z)).collect();
        for _ in 0..BALANCE_ROUNDS {
            let freq = class_frequencies(&train_y);
            if balanced(&freq) {
                break;
            }
            for (b, f) in bias.iter_mut().zip(freq) {
                *b -= 0.5 * (f.max(1e-3) * NUM_CLASSES as f64).ln();
            }
            train_y = train_logits.iter().map(|z| label(&bias, z)).collect();
        }
        teacher.layers.last_mut().expect("three layers").1.copy_from_slice(&bias);
        let val_y: Vec<usize> = (0..VAL_SIZE).map(|r| argmax(&teacher.logits(val_x.row(r)))).collect();
        let ds = TaskDataset {
            train_x: train_x.clone(),
            train_y,
            val_x: val_x.clone(),
            val_y,
            seed,
            teacher_attempts: attempt,
        };
        if balanced(&ds.class_frequencies()) {
            return ds;
        }
        fallback.get_or_insert(ds);
    }
    fallback.expect("at least one teacher attempt")
}
