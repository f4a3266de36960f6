//! Relaxed architecture search space over a synthetic classification task.
//!
//! Each of the `L` searchable layers mixes six residual blocks
//! `y = x + V relu(U x)` whose hidden width stands in for the capacity of
//! the corresponding MBConv candidate. The mixture weights are the
//! row-wise softmax of the architecture logits.

mod task;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffengine::{log_sum_exp, softmax_in_place, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::hwmodel::CANDIDATES;

pub use task::{gen_synthetic_dataset, TaskDataset, INPUT_DIM, NUM_CLASSES, TRAIN_SIZE, VAL_SIZE};

pub const NUM_CANDIDATES: usize = 6;
pub const DEFAULT_LAYERS: usize = 8;
pub const HIDDEN: usize = 64;

/// Parameter name of the architecture logits.
pub const ALPHA: &str = "alpha";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CandidateOp {
    pub kernel: u32,
    pub expand: u32,
}

impl CandidateOp {
    pub fn from_index(i: usize) -> Self {
        let (kernel, expand) = CANDIDATES[i];
        Self { kernel, expand }
    }

    pub fn all() -> [CandidateOp; NUM_CANDIDATES] {
        std::array::from_fn(Self::from_index)
    }

    pub fn index(&self) -> usize {
        CANDIDATES
            .iter()
            .position(|&c| c == (self.kernel, self.expand))
            .expect("valid candidate")
    }

    /// Hidden width of the stand-in residual block.
    pub fn width(&self) -> usize {
        (4 * self.expand + 2 * (self.kernel - 3)) as usize
    }
}

/// Architecture logits, one row of six per searchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    logits: Tensor,
}

impl ArchParams {
    pub fn zeros(layers: usize) -> Self {
        Self {
            logits: Tensor::zeros(&[layers, NUM_CANDIDATES]),
        }
    }

    pub fn from_tensor(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 2 || logits.cols() != NUM_CANDIDATES {
            return Err(Error::InvalidArgument(format!(
                "architecture logits must be L x {NUM_CANDIDATES}, got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { logits })
    }

    /// Logits that put all mass on `choices` (large margin, not exactly one-hot).
    pub fn from_choices(choices: &[usize], margin: f64) -> Self {
        let mut t = Tensor::zeros(&[choices.len(), NUM_CANDIDATES]);
        for (l, &c) in choices.iter().enumerate() {
            t.values_mut()[l * NUM_CANDIDATES + c] = margin;
        }
        Self { logits: t }
    }

    pub fn layers(&self) -> usize {
        self.logits.rows()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn probabilities(&self) -> Tensor {
        probabilities(&self.logits)
    }

    /// Per-layer argmax; ties go to the lower candidate index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.layers())
            .map(|l| {
                let row = self.logits.row(l);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(ALPHA, self.logits.clone());
        s
    }
}

/// Row-wise softmax of an `L x 6` logit matrix.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    let c = p.cols();
    for row in p.values_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    p
}

/// Row-major flattening of the mixture probabilities.
pub fn arch_encoding(alpha: &ArchParams) -> Vec<f64> {
    alpha.probabilities().into_values()
}

/// 0/1 encoding of a discrete architecture, same layout as [`arch_encoding`].
pub fn one_hot_encoding(choices: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; choices.len() * NUM_CANDIDATES];
    for (l, &c) in choices.iter().enumerate() {
        v[l * NUM_CANDIDATES + c] = 1.0;
    }
    v
}

/// Mean cross-entropy of `logits: n x classes` against `labels`.
pub fn nas_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims();
    if n == 0 || labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} outside 0..{c}")));
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / n as f64)
}

/// Where a supernet graph takes its per-layer mixture weights from.
#[derive(Debug, Clone, PartialEq)]
pub enum MixSource {
    /// Softmax of the `alpha` parameter leaf.
    Alpha,
    /// An `L x 6` input named `probs`, used verbatim.
    Probs,
    /// A single block per layer; the other branches are not built.
    Path(Vec<usize>),
}

/// Compiled supernet graph with its named endpoints.
#[derive(Debug, Clone)]
pub struct SupernetGraph {
    pub graph: Graph,
    pub logits: NodeId,
    pub loss: NodeId,
}

/// Supernet weights `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub layers: usize,
    pub weights: ParamStore,
}

fn block_names(l: usize, b: usize) -> (String, String) {
    (format!("w/l{l}/b{b}/u"), format!("w/l{l}/b{b}/v"))
}

fn he_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let v = (0..fan_in * fan_out).map(|_| std * crate::rng::normal(rng)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], v)
}

impl Supernet {
    /// He-scaled weights for all `6 * layers` blocks, input projection and head.
    pub fn init(layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ParamStore::new();
        w.insert("w/in", he_init(&mut rng, INPUT_DIM, HIDDEN));
        w.insert("w/in_b", Tensor::zeros(&[HIDDEN]));
        for l in 0..layers {
            for (b, op) in CandidateOp::all().iter().enumerate() {
                let (u, v) = block_names(l, b);
                w.insert(u, he_init(&mut rng, HIDDEN, op.width()));
                w.insert(v, he_init(&mut rng, op.width(), HIDDEN));
            }
        }
        w.insert("w/head", he_init(&mut rng, HIDDEN, NUM_CLASSES));
        w.insert("w/head_b", Tensor::zeros(&[NUM_CLASSES]));
        Self { layers, weights: w }
    }

    /// Builds the graph: input projection, `layers` mixed residual layers, head
    /// and mean cross-entropy against the `y` labels input.
    pub fn build_graph(&self, source: &MixSource) -> SupernetGraph {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.labels("y");
        let w_in = g.param("w/in");
        let b_in = g.param("w/in_b");
        let h = g.matmul(x, w_in);
        let h = g.add(h, b_in);
        let mut h = g.relu(h);

        let probs = match source {
            MixSource::Alpha => {
                let a = g.param(ALPHA);
                Some(g.softmax(a))
            }
            MixSource::Probs => Some(g.input("probs")),
            MixSource::Path(_) => None,
        };

        for l in 0..self.layers {
            let branch = |g: &mut Graph, h: NodeId, b: usize| {
                let (u, v) = block_names(l, b);
                let u = g.param(&u);
                let v = g.param(&v);
                let z = g.matmul(h, u);
                let z = g.relu(z);
                g.matmul(z, v)
            };
            let update = match (source, probs) {
                (MixSource::Path(choices), _) => branch(&mut g, h, choices[l]),
                (_, Some(p)) => {
                    let mut acc: Option<NodeId> = None;
                    for b in 0..NUM_CANDIDATES {
                        let out = branch(&mut g, h, b);
                        let pb = g.slice(p, l, 1, b, 1);
                        let term = g.mul(out, pb);
                        acc = Some(match acc {
                            None => term,
                            Some(a) => g.add(a, term),
                        });
                    }
                    acc.expect("six candidates")
                }
                _ => unreachable!("mixture source provides probabilities"),
            };
            h = g.add(h, update);
        }

        let w_out = g.param("w/head");
        let b_out = g.param("w/head_b");
        let z = g.matmul(h, w_out);
        let logits = g.add(z, b_out);
        let loss = g.cross_entropy(logits, y);
        SupernetGraph {
            graph: g,
            logits,
            loss,
        }
    }

    /// Class logits of the mixture network for a batch.
    pub fn forward_mixture(&self, alpha: &ArchParams, x: &Tensor) -> Result<Tensor> {
        if alpha.layers() != self.layers {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} layers, supernet {}",
                alpha.layers(),
                self.layers
            )));
        }
        let sg = self.build_graph(&MixSource::Alpha);
        let labels = Tensor::zeros(&[x.rows()]);
        let a = alpha.to_store();
        let v = sg.graph.forward(&[&self.weights, &a], &[("x", x), ("y", &labels)])?;
        Ok(v.get(sg.logits).clone())
    }

    /// Classification error of a discrete architecture on `(x, labels)`.
    pub fn error_rate(&self, choices: &[usize], x: &Tensor, labels: &[usize]) -> Result<f64> {
        let sg = self.build_graph(&MixSource::Path(choices.to_vec()));
        let y = Tensor::vector(labels.iter().map(|&l| l as f64).collect());
        let v = sg.graph.forward(&[&self.weights], &[("x", x), ("y", &y)])?;
        Ok(misclassified(v.get(sg.logits), labels))
    }

    /// Classification error of the mixture network under `alpha`.
    pub fn mixture_error_rate(&self, alpha: &ArchParams, x: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(misclassified(&self.forward_mixture(alpha, x)?, labels))
    }
}

fn misclassified(logits: &Tensor, labels: &[usize]) -> f64 {
    let wrong = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let pred = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            pred != labels[r]
        })
        .count();
    wrong as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{grad_check, Adam};
    use crate::hwmodel::{expand_indices, LayerShape};
    use proptest::prelude::*;

    #[test]
    fn candidate_widths() {
        let widths: Vec<usize> = CandidateOp::all().iter().map(CandidateOp::width).collect();
        let mut sorted = widths.clone();
        sorted.sort();
        assert_eq!(sorted, vec![12, 16, 20, 24, 28, 32]);
        for a in CandidateOp::all() {
            for b in CandidateOp::all() {
                if a.kernel == b.kernel && a.expand < b.expand {
                    assert!(a.width() < b.width());
                }
                if a.expand == b.expand && a.kernel < b.kernel {
                    assert!(a.width() < b.width());
                }
            }
        }
    }

    #[test]
    fn width_order_matches_mac_order() {
        let macs = |i: usize| -> u64 {
            expand_indices(&[i], LayerShape::default_stem()).unwrap()[1..]
                .iter()
                .map(|l| l.macs())
                .sum()
        };
        for i in 0..6 {
            for j in 0..6 {
                let (wi, wj) = (CandidateOp::from_index(i).width(), CandidateOp::from_index(j).width());
                assert_eq!(wi < wj, macs(i) < macs(j), "candidates {i} vs {j}");
            }
        }
    }

    #[test]
    fn probability_examples() {
        let p = ArchParams::zeros(8).probabilities();
        assert!(p.values().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        let sat = ArchParams::from_choices(&[2], 1000.0).probabilities();
        assert_eq!(sat.values()[2], 1.0);
        assert!(sat.values().iter().enumerate().all(|(i, &v)| i == 2 || v < 1e-300));
        let enc = arch_encoding(&ArchParams::zeros(8));
        assert_eq!(enc.len(), 48);
        let hard = one_hot_encoding(&[0, 1, 2, 3, 4, 5, 0, 1]);
        assert_eq!(hard.iter().filter(|&&v| v == 1.0).count(), 8);
        assert!(hard.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn argmax_ties_go_low() {
        let a = ArchParams::from_tensor(Tensor::matrix(1, 6, vec![0.0, 1.0, 1.0, 0.5, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(a.argmax(), vec![1]);
        assert_eq!(ArchParams::zeros(3).argmax(), vec![0, 0, 0]);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariance(
            vals in prop::collection::vec(-30.0f64..30.0, 48),
            shift in -50.0f64..50.0,
        ) {
            let a = ArchParams::from_tensor(Tensor::matrix(8, 6, vals.clone()).unwrap()).unwrap();
            let p = a.probabilities();
            for r in 0..8 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            let shifted: Vec<f64> = vals.iter().enumerate().map(|(i, v)| if i / 6 == 3 { v + shift } else { *v }).collect();
            let b = ArchParams::from_tensor(Tensor::matrix(8, 6, shifted).unwrap()).unwrap();
            prop_assert_eq!(a.argmax(), b.argmax());
            for (x, y) in p.values().iter().zip(b.probabilities().values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let hard = one_hot_encoding(&a.argmax());
            let l1: f64 = hard.iter().zip(p.values()).map(|(h, s)| (h - s).abs()).sum();
            prop_assert!(l1 <= 16.0);
        }
    }

    fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * INPUT_DIM).map(|_| crate::rng::normal(&mut rng)).collect();
        let y = (0..n).map(|i| (i * 7 + seed as usize) % NUM_CLASSES).collect();
        (Tensor::from_parts(vec![n, INPUT_DIM], x), y)
    }

    #[test]
    fn one_hot_mixture_equals_single_path() {
        let net = Supernet::init(3, 5);
        let (x, y) = batch(16, 1);
        let yt = Tensor::vector(y.iter().map(|&v| v as f64).collect());
        let choices = vec![4, 0, 3];
        let probs = Tensor::matrix(3, 6, one_hot_encoding(&choices)).unwrap();

        let mix = net.build_graph(&MixSource::Probs);
        let vm = mix.graph.forward(&[&net.weights], &[("x", &x), ("y", &yt), ("probs", &probs)]).unwrap();
        let path = net.build_graph(&MixSource::Path(choices));
        let vp = path.graph.forward(&[&net.weights], &[("x", &x), ("y", &yt)]).unwrap();
        assert_eq!(vm.get(mix.logits), vp.get(path.logits));
    }

    #[test]
    fn zero_blocks_reduce_to_projection_and_head() {
        let mut net = Supernet::init(2, 9);
        let names: Vec<String> = net.weights.names().filter(|n| n.contains("/b")).cloned().collect();
        for n in names {
            let shape = net.weights.get(&n).unwrap().shape().to_vec();
            net.weights.insert(n, Tensor::zeros(&shape));
        }
        let (x, _) = batch(4, 2);
        let logits = net.forward_mixture(&ArchParams::zeros(2), &x).unwrap();
        // Plain projection + relu + head.
        let mut g = Graph::new();
        let xi = g.input("x");
        let (w, b) = (g.param("w/in"), g.param("w/in_b"));
        let h = g.matmul(xi, w);
        let h = g.add(h, b);
        let h = g.relu(h);
        let (w, b) = (g.param("w/head"), g.param("w/head_b"));
        let z = g.matmul(h, w);
        let z = g.add(z, b);
        let v = g.forward(&[&net.weights], &[("x", &x)]).unwrap();
        assert_eq!(v.get(z), &logits);
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let net = Supernet::init(2, 3);
        let (x, y) = batch(8, 4);
        let yt = Tensor::vector(y.iter().map(|&v| v as f64).collect());
        let alpha = ArchParams::from_tensor(
            Tensor::matrix(2, 6, (0..12).map(|i| 0.3 * ((i * 5 % 7) as f64 - 3.0)).collect()).unwrap(),
        )
        .unwrap();
        let sg = net.build_graph(&MixSource::Alpha);
        let a = alpha.to_store();
        let report = grad_check(&sg.graph, &[&a, &net.weights], &[("x", &x), ("y", &yt)], sg.loss, 1e-4).unwrap();
        let dev = report.get(ALPHA).unwrap();
        assert!(dev.max_mixed_ratio <= 1.0, "{dev:?}");
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn nas_loss_values() {
        let z = Tensor::zeros(&[3, 10]);
        assert!((nas_loss(&z, &[1, 2, 3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::zeros(&[1, 10]);
        sharp.values_mut()[4] = 20.0;
        let l = nas_loss(&sharp, &[4]).unwrap();
        // ln(1 + 9 e^-20) ~ 1.86e-8
        assert!(l > 0.0 && l < 2e-8, "{l}");
        assert!(nas_loss(&z, &[1]).is_err());
    }

    #[test]
    fn overfits_fixed_batch() {
        let mut net = Supernet::init(2, 1);
        let (x, y) = batch(32, 6);
        let yt = Tensor::vector(y.iter().map(|&v| v as f64).collect());
        let alpha = ArchParams::zeros(2).to_store();
        let sg = net.build_graph(&MixSource::Alpha);
        let mut opt = Adam::new(1e-3);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let v = sg.graph.forward(&[&net.weights, &alpha], &[("x", &x), ("y", &yt)]).unwrap();
            losses.push(v.get(sg.loss).item());
            let mut grads = sg.graph.backward(&v, sg.loss).unwrap();
            grads.remove(ALPHA);
            opt.step(&mut net.weights, &grads);
        }
        assert!(losses[49] < losses[0] * 0.8, "{} -> {}", losses[0], losses[49]);
    }
}
