use super::graph::{Graph, LeafKind, NodeId};
use super::store::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-4;

/// Absolute floor of the mixed tolerance `max(rel * |g|, floor)`.
pub const FD_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafDeviation {
    pub name: String,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest `|analytic - numeric| / max(rel_tol * |numeric|, FD_ABS_FLOOR)`
    /// at the tolerance the check was run with; `<= 1` means within tolerance.
    pub max_mixed_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub leaves: Vec<LeafDeviation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_mixed_ratio <= 1.0)
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&LeafDeviation> {
        self.leaves.iter().find(|l| l.name == name)
    }
}

/// Compares `backward` against central finite differences for every
/// parameter and input leaf feeding the scalar node `output`.
///
/// Frozen leaves, labels and constants are not perturbed and do not appear
/// in the report.
pub fn grad_check(
    graph: &Graph,
    params: &[&ParamStore],
    feed: &[(&str, &Tensor)],
    output: NodeId,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let values = graph.forward(params, feed)?;
    let analytic = graph.backward(&values, output)?;

    // Flatten the lookup chain into one owned store so entries can be perturbed.
    let mut merged = ParamStore::new();
    for store in params.iter().rev() {
        for (name, t) in store.iter() {
            merged.insert(name.clone(), t.clone());
        }
    }
    let mut inputs: Vec<(String, Tensor)> =
        feed.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect();

    // Perturbing one leaf only changes the nodes downstream of it.
    let mut scratch = values;
    let mut eval = |merged: &ParamStore, inputs: &[(String, Tensor)], dirty: &[usize]| -> Result<f64> {
        let feed: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        graph.refresh(&mut scratch, dirty, &[merged], &feed)?;
        Ok(scratch.get(output).item())
    };

    let mut leaves = Vec::new();
    for (name, grad) in &analytic {
        let is_param = graph.leaf_names(LeafKind::Param).contains(name);
        let dirty = graph.downstream_of(name);
        let mut dev = LeafDeviation {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_mixed_ratio: 0.0,
        };
        for j in 0..grad.len() {
            let x0 = leaf_entry(&mut merged, &mut inputs, is_param, name, j);
            let (xp, xm) = (x0 + FD_STEP, x0 - FD_STEP);
            set_leaf_entry(&mut merged, &mut inputs, is_param, name, j, xp);
            let fp = eval(&merged, &inputs, &dirty)?;
            set_leaf_entry(&mut merged, &mut inputs, is_param, name, j, xm);
            let fm = eval(&merged, &inputs, &dirty)?;
            set_leaf_entry(&mut merged, &mut inputs, is_param, name, j, x0);

            // Divide by the representable step actually taken.
            let numeric = (fp - fm) / (xp - xm);
            let a = grad.values()[j];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            let mixed = abs / (tolerance * numeric.abs()).max(FD_ABS_FLOOR);
            dev.max_abs_err = dev.max_abs_err.max(abs);
            dev.max_rel_err = dev.max_rel_err.max(rel);
            dev.max_mixed_ratio = dev.max_mixed_ratio.max(mixed);
        }
        // Back to the unperturbed state before moving to the next leaf.
        eval(&merged, &inputs, &dirty)?;
        leaves.push(dev);
    }
    Ok(GradCheckReport { tolerance, leaves })
}

fn leaf_slot<'a>(
    merged: &'a mut ParamStore,
    inputs: &'a mut [(String, Tensor)],
    is_param: bool,
    name: &str,
) -> &'a mut Tensor {
    if is_param {
        merged.get_mut(name).expect("param present")
    } else {
        &mut inputs.iter_mut().find(|(n, _)| n == name).expect("input fed").1
    }
}

fn leaf_entry(
    merged: &mut ParamStore,
    inputs: &mut [(String, Tensor)],
    is_param: bool,
    name: &str,
    j: usize,
) -> f64 {
    leaf_slot(merged, inputs, is_param, name).values()[j]
}

fn set_leaf_entry(
    merged: &mut ParamStore,
    inputs: &mut [(String, Tensor)],
    is_param: bool,
    name: &str,
    j: usize,
    value: f64,
) {
    leaf_slot(merged, inputs, is_param, name).values_mut()[j] = value;
}
