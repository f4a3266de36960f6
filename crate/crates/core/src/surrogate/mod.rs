//! Learned evaluator: a frozen metric estimator fed by a trainable
//! hardware generator.

mod encoding;
mod mlp;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Adam, Graph, NodeId, ParamEntry, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::hwmodel::{DatasetSummary, Metrics, Record};
use crate::rng::stream;
use crate::supernet::NUM_CANDIDATES;

pub use encoding::{HwEncoding, HW_DIM};
pub use mlp::{ResidualMlp, DEPTH};

pub const EST_PREFIX: &str = "est";
pub const EST_HIDDEN: usize = 256;
pub const GEN_PREFIX: &str = "gen";
pub const GEN_HIDDEN: usize = 128;
pub const MIN_RECORDS: usize = 10_000;
/// Relative error bound used for the holdout fidelity figures.
pub const FIDELITY_TOL: f64 = 0.10;

/// Mean and standard deviation of the log-metrics over the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    fn of(metrics: &[Metrics]) -> Self {
        let n = metrics.len() as f64;
        let mut mean = [0.0; 3];
        let mut var = [0.0; 3];
        for m in metrics {
            for (k, v) in m.to_array().iter().enumerate() {
                mean[k] += v.ln() / n;
            }
        }
        for m in metrics {
            for (k, v) in m.to_array().iter().enumerate() {
                var[k] += (v.ln() - mean[k]).powi(2) / n;
            }
        }
        Self {
            mean,
            std: var.map(|v| v.sqrt().max(1e-6)),
        }
    }

    fn normalize(&self, m: &Metrics) -> [f64; 3] {
        let a = m.to_array();
        [0, 1, 2].map(|k| (a[k].ln() - self.mean[k]) / self.std[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 256,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Holdout quality of a freshly trained estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub train_records: usize,
    pub holdout_records: usize,
    /// Fraction of holdout predictions within [`FIDELITY_TOL`] relative error,
    /// per metric in `[latency, energy, area]` order.
    pub within_tol: [f64; 3],
    /// MSE on normalized log-metrics.
    pub holdout_mse: f64,
    /// Same MSE when always predicting the training mean.
    pub baseline_mse: f64,
    pub final_train_mse: f64,
}

/// Pretrained metric predictor, frozen during search.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel {
    layers: usize,
    norm: Normalization,
    refs: Metrics,
    params: ParamStore,
    pretrained: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    norm: Normalization,
    refs: Metrics,
    layers: usize,
    params: Vec<ParamEntry>,
}

impl EstimatorModel {
    /// Randomly initialized model; [`Self::predict`] refuses it until trained.
    pub fn untrained(layers: usize, seed: u64) -> Self {
        let params = Self::mlp_for(layers).init(&mut stream(seed, 0));
        Self {
            layers,
            norm: Normalization::identity(),
            refs: Metrics::from_array([1.0; 3]),
            params,
            pretrained: false,
        }
    }

    fn mlp_for(layers: usize) -> ResidualMlp {
        ResidualMlp::new(EST_PREFIX, layers * NUM_CANDIDATES + HW_DIM, EST_HIDDEN, 3)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn arch_dim(&self) -> usize {
        self.layers * NUM_CANDIDATES
    }

    pub fn norm(&self) -> &Normalization {
        &self.norm
    }

    /// Dataset-mean metrics used as cost references.
    pub fn refs(&self) -> &Metrics {
        &self.refs
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    fn ensure_pretrained(&self) -> Result<()> {
        if self.pretrained {
            Ok(())
        } else {
            Err(Error::Unpretrained)
        }
    }

    /// Normalized log-metric head on `[n, arch_dim + 6]` inputs.
    fn build_normalized(&self, g: &mut Graph, input: NodeId, frozen: bool) -> NodeId {
        Self::mlp_for(self.layers).build(g, input, frozen)
    }

    /// Appends the frozen estimator to `g`. `arch` is `[n, arch_dim]`, `hw` is
    /// `[n, 6]`; the result holds positive metrics `[n, 3]`.
    pub fn build(&self, g: &mut Graph, arch: NodeId, hw: NodeId) -> NodeId {
        let x = g.concat(&[arch, hw]);
        let y = self.build_normalized(g, x, true);
        let std = g.constant(Tensor::from_parts(vec![1, 3], self.norm.std.to_vec()));
        let mean = g.constant(Tensor::from_parts(vec![1, 3], self.norm.mean.to_vec()));
        let scaled = g.mul(y, std);
        let shifted = g.add(scaled, mean);
        g.exp(shifted)
    }

    /// Batched prediction; rows of `arch` and `hw` pair up.
    pub fn predict_batch(&self, arch: &Tensor, hw: &Tensor) -> Result<Tensor> {
        self.ensure_pretrained()?;
        let mut g = Graph::new();
        let a = g.input("arch");
        let h = g.input("hw");
        let out = self.build(&mut g, a, h);
        let values = g.forward(&[&self.params], &[("arch", arch), ("hw", hw)])?;
        Ok(values.get(out).clone())
    }

    pub fn predict(&self, arch: &[f64], hw: &HwEncoding) -> Result<Metrics> {
        if arch.len() != self.arch_dim() {
            return Err(Error::InvalidArgument(format!(
                "architecture encoding has {} entries, estimator expects {}",
                arch.len(),
                self.arch_dim()
            )));
        }
        let a = Tensor::matrix(1, arch.len(), arch.to_vec())?;
        let h = Tensor::matrix(1, HW_DIM, hw.to_vec())?;
        let out = self.predict_batch(&a, &h)?;
        let v = out.values();
        Ok(Metrics::from_array([v[0], v[1], v[2]]))
    }

    pub fn to_json(&self) -> Result<String> {
        self.ensure_pretrained()?;
        let file = ModelFile {
            norm: self.norm,
            refs: self.refs,
            layers: self.layers,
            params: self.params.to_entries(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.layers == 0 {
            return Err(Error::Config("estimator file declares zero layers".into()));
        }
        if file.norm.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || file.norm.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("estimator normalization must be finite with positive std".into()));
        }
        if file.refs.to_array().iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("estimator references must be finite and positive".into()));
        }
        let params = ParamStore::from_entries(file.params)?;
        let reference = Self::mlp_for(file.layers).init(&mut stream(0, 0));
        params.check_layout(&reference)?;
        Ok(Self {
            layers: file.layers,
            norm: file.norm,
            refs: file.refs,
            params,
            pretrained: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn input_row(r: &Record, out: &mut Vec<f64>) {
    for &c in &r.arch {
        out.extend((0..NUM_CANDIDATES).map(|j| if j == c { 1.0 } else { 0.0 }));
    }
    out.extend(HwEncoding::encode(&r.hw).to_vec());
}

fn batch_tensors(records: &[&Record], norm: &Normalization) -> (Tensor, Tensor) {
    let dim = records[0].arch.len() * NUM_CANDIDATES + HW_DIM;
    let mut x = Vec::with_capacity(records.len() * dim);
    let mut y = Vec::with_capacity(records.len() * 3);
    for r in records {
        input_row(r, &mut x);
        y.extend(norm.normalize(&r.metrics));
    }
    (
        Tensor::from_parts(vec![records.len(), dim], x),
        Tensor::from_parts(vec![records.len(), 3], y),
    )
}

/// Mean squared error graph over normalized targets.
fn mse_graph(model: &EstimatorModel, n: usize) -> (Graph, NodeId, NodeId) {
    let mut g = Graph::new();
    let x = g.input("x");
    let t = g.input("target");
    let y = model.build_normalized(&mut g, x, false);
    let d = g.sub(y, t);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    let loss = g.scale(s, 1.0 / (3 * n) as f64);
    (g, y, loss)
}

/// Trains an estimator with Adam on a seeded 90/10 split of `records`.
pub fn pretrain_estimator(records: &[Record], cfg: &PretrainConfig) -> Result<(EstimatorModel, PretrainReport)> {
    if records.len() < MIN_RECORDS {
        return Err(Error::InvalidArgument(format!(
            "estimator pretraining needs at least {MIN_RECORDS} records, got {}",
            records.len()
        )));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config("epochs, batch and lr must be positive".into()));
    }
    let layers = records[0].arch.len();
    if let Some((i, _)) = records.iter().enumerate().find(|(_, r)| r.arch.len() != layers) {
        return Err(Error::Record {
            line: i + 1,
            detail: format!("expected {layers} layers like the first record"),
        });
    }

    let mut rng = stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = records.len() / 10;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train: Vec<&Record> = train_idx.iter().map(|&i| &records[i]).collect();
    let hold: Vec<&Record> = hold_idx.iter().map(|&i| &records[i]).collect();

    let train_metrics: Vec<Metrics> = train.iter().map(|r| r.metrics).collect();
    let norm = Normalization::of(&train_metrics);
    let refs = DatasetSummary::of(&train.iter().map(|r| (*r).clone()).collect::<Vec<_>>()).mean;

    let mut model = EstimatorModel::untrained(layers, cfg.seed);
    model.norm = norm;
    model.refs = refs;

    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_epoch_mse = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| train[i]).collect();
            let (x, t) = batch_tensors(&batch, &norm);
            let (g, _, loss) = mse_graph(&model, batch.len());
            let values = g.forward(&[&model.params], &[("x", &x), ("target", &t)])?;
            total += values.get(loss).item() * batch.len() as f64;
            let grads = g.backward(&values, loss)?;
            adam.step(&mut model.params, &grads);
        }
        last_epoch_mse = total / train.len() as f64;
    }
    model.pretrained = true;

    let (hx, ht) = batch_tensors(&hold, &norm);
    let (g, y, loss) = mse_graph(&model, hold.len());
    let values = g.forward(&[&model.params], &[("x", &hx), ("target", &ht)])?;
    let holdout_mse = values.get(loss).item();
    let pred = values.get(y);
    let mut within = [0usize; 3];
    for (r, rec) in hold.iter().enumerate() {
        let truth = rec.metrics.to_array();
        for k in 0..3 {
            let p = (norm.std[k] * pred.at(r, k) + norm.mean[k]).exp();
            if ((p - truth[k]) / truth[k]).abs() <= FIDELITY_TOL {
                within[k] += 1;
            }
        }
    }
    // Predicting the training mean gives 0 in normalized space.
    let baseline_mse = ht.values().iter().map(|v| v * v).sum::<f64>() / ht.len() as f64;

    let report = PretrainReport {
        train_records: train.len(),
        holdout_records: hold.len(),
        within_tol: within.map(|w| w as f64 / hold.len() as f64),
        holdout_mse,
        baseline_mse,
        final_train_mse: last_epoch_mse,
    };
    Ok((model, report))
}

/// Maps an architecture encoding to a continuous hardware proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    layers: usize,
    pub params: ParamStore,
}

impl GeneratorModel {
    pub fn init(layers: usize, seed: u64) -> Self {
        Self {
            layers,
            params: Self::mlp_for(layers).init(&mut stream(seed, 2)),
        }
    }

    fn mlp_for(layers: usize) -> ResidualMlp {
        ResidualMlp::new(GEN_PREFIX, layers * NUM_CANDIDATES, GEN_HIDDEN, HW_DIM)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Appends the generator (trainable `gen/...` params) to `g`, producing
    /// `[n, 6]` encodings: three sigmoids then a dataflow softmax.
    pub fn build(&self, g: &mut Graph, arch: NodeId) -> NodeId {
        let raw = Self::mlp_for(self.layers).build(g, arch, false);
        let cont = g.slice_cols(raw, 0, 3);
        let cont = g.sigmoid(cont);
        let df = g.slice_cols(raw, 3, 3);
        let df = g.softmax(df);
        g.concat(&[cont, df])
    }

    pub fn forward(&self, arch: &[f64]) -> Result<HwEncoding> {
        let mut g = Graph::new();
        let a = g.input("arch");
        let out = self.build(&mut g, a);
        let x = Tensor::matrix(1, arch.len(), arch.to_vec())?;
        let values = g.forward(&[&self.params], &[("arch", &x)])?;
        HwEncoding::from_slice(values.get(out).values())
    }
}

/// Convenience wrapper matching the operation name used elsewhere.
pub fn estimator_predict(est: &EstimatorModel, arch: &[f64], hw: &HwEncoding) -> Result<Metrics> {
    est.predict(arch, hw)
}

pub fn generator_forward(gen: &GeneratorModel, arch: &[f64]) -> Result<HwEncoding> {
    gen.forward(arch)
}
