use super::{cost_hw, evaluate, CostConfig, Dataflow, HwConfig, LayerShape, Metrics, PE_X_RANGE, PE_Y_RANGE, RF_SIZES};
use crate::error::Result;

pub const SPACE_SIZE: usize = 9 * 17 * 5 * 3;

/// Every design point, ordered lexicographically by `(pe_x, pe_y, rf, dataflow)`
/// with dataflows ordered WS, OS, RS.
pub fn enumerate_space() -> impl Iterator<Item = HwConfig> {
    (PE_X_RANGE.0..=PE_X_RANGE.1).flat_map(|pe_x| {
        (PE_Y_RANGE.0..=PE_Y_RANGE.1).flat_map(move |pe_y| {
            RF_SIZES.into_iter().flat_map(move |rf_bytes| {
                Dataflow::ALL.into_iter().map(move |dataflow| HwConfig {
                    pe_x,
                    pe_y,
                    rf_bytes,
                    dataflow,
                })
            })
        })
    })
}

/// Exhaustive search for the design minimizing `objective` among those
/// accepted by `feasible`. Ties resolve to the smallest `HwConfig`, so the
/// result does not depend on visiting order. `None` when nothing is feasible.
pub fn grid_search(
    layers: &[LayerShape],
    objective: impl Fn(&Metrics) -> f64,
    feasible: impl Fn(&Metrics) -> bool,
) -> Result<Option<(HwConfig, Metrics)>> {
    let mut best: Option<(f64, HwConfig, Metrics)> = None;
    for hw in enumerate_space() {
        let m = evaluate(layers, &hw)?;
        if !feasible(&m) {
            continue;
        }
        let score = objective(&m);
        let better = match &best {
            None => true,
            Some((s, h, _)) => score < *s || (score == *s && hw < *h),
        };
        if better {
            best = Some((score, hw, m));
        }
    }
    Ok(best.map(|(_, hw, m)| (hw, m)))
}

/// Grid search on the weighted hardware cost.
pub fn min_cost_design(
    layers: &[LayerShape],
    cost: &CostConfig,
    feasible: impl Fn(&Metrics) -> bool,
) -> Result<Option<(HwConfig, Metrics)>> {
    grid_search(layers, |m| cost_hw(m, cost), feasible)
}
