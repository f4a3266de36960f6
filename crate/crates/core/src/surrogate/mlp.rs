use rand_chacha::ChaCha8Rng;

use crate::diffengine::{Graph, NodeId, ParamStore, Tensor};
use crate::rng::normal;

/// Five dense layers; the three middle layers add residual connections
/// between equal-width hidden states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualMlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

pub const DEPTH: usize = 5;

impl ResidualMlp {
    pub fn new(prefix: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            input,
            hidden,
            output,
        }
    }

    fn names(&self, layer: usize) -> (String, String) {
        (
            format!("{}/l{layer}/w", self.prefix),
            format!("{}/l{layer}/b", self.prefix),
        )
    }

    fn dims(&self, layer: usize) -> (usize, usize) {
        match layer {
            0 => (self.input, self.hidden),
            l if l == DEPTH - 1 => (self.hidden, self.output),
            _ => (self.hidden, self.hidden),
        }
    }

    /// He-scaled weights and zero biases. Residual branches start at half
    /// scale so the hidden state does not grow with depth.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for layer in 0..DEPTH {
            let (fan_in, fan_out) = self.dims(layer);
            let mut std = (2.0 / fan_in as f64).sqrt();
            if layer > 0 && layer < DEPTH - 1 {
                std *= 0.5;
            }
            let w = (0..fan_in * fan_out).map(|_| std * normal(rng)).collect();
            let (wn, bn) = self.names(layer);
            store.insert(wn, Tensor::from_parts(vec![fan_in, fan_out], w));
            store.insert(bn, Tensor::zeros(&[fan_out]));
        }
        store
    }

    /// Appends the network to `g`, returning the linear output node.
    pub fn build(&self, g: &mut Graph, input: NodeId, frozen: bool) -> NodeId {
        let leaf = |g: &mut Graph, name: &str| if frozen { g.frozen(name) } else { g.param(name) };
        let dense = |g: &mut Graph, x: NodeId, layer: usize| {
            let (wn, bn) = self.names(layer);
            let w = leaf(g, &wn);
            let b = leaf(g, &bn);
            let z = g.matmul(x, w);
            g.add(z, b)
        };
        let z = dense(g, input, 0);
        let mut h = g.relu(z);
        for layer in 1..DEPTH - 1 {
            let z = dense(g, h, layer);
            let r = g.relu(z);
            h = g.add(h, r);
        }
        dense(g, h, DEPTH - 1)
    }
}
