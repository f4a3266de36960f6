//! Analytic Eyeriss-style accelerator cost oracle.
//!
//! Every reported hardware number in the crate comes from [`evaluate`];
//! learned models only approximate it. Tensors are one byte per element,
//! the clock is 200 MHz and input halos are ignored (stride-1, same padding).

mod cost;
mod dataset;
mod space;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cost::{cost_hw, CostConfig};
pub use dataset::{read_dataset, sample_pairs, write_dataset, DatasetSummary, Record};
pub use space::{enumerate_space, grid_search, min_cost_design, SPACE_SIZE};

pub const CLOCK_CYCLES_PER_MS: f64 = 200e3;
pub const E_MAC_PJ: f64 = 0.2;
pub const E_DRAM_PJ_PER_BYTE: f64 = 100.0;
pub const AREA_PE_MM2: f64 = 0.01;
pub const AREA_RF_MM2_PER_BYTE: f64 = 2.0e-5;

pub const PE_X_RANGE: (u32, u32) = (12, 20);
pub const PE_Y_RANGE: (u32, u32) = (8, 24);
pub const RF_SIZES: [u32; 5] = [16, 32, 64, 128, 256];

/// Kernel sizes and expand ratios of the MBConv candidate set, in candidate-index order.
pub const CANDIDATES: [(u32, u32); 6] = [(3, 3), (3, 6), (5, 3), (5, 6), (7, 3), (7, 6)];

/// Base channel count and spatial size of every MBConv block.
pub const BASE_CHANNELS: u32 = 16;
pub const BASE_SPATIAL: u32 = 16;

/// Register-file access energy per access, pJ.
pub fn e_rf_pj(rf_bytes: u32) -> f64 {
    0.03 * (1.0 + rf_bytes as f64 / 128.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dataflow {
    #[serde(rename = "WS")]
    WeightStationary,
    #[serde(rename = "OS")]
    OutputStationary,
    #[serde(rename = "RS")]
    RowStationary,
}

impl Dataflow {
    pub const ALL: [Dataflow; 3] = [
        Dataflow::WeightStationary,
        Dataflow::OutputStationary,
        Dataflow::RowStationary,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short(self) -> &'static str {
        match self {
            Dataflow::WeightStationary => "WS",
            Dataflow::OutputStationary => "OS",
            Dataflow::RowStationary => "RS",
        }
    }
}

impl fmt::Display for Dataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Dataflow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "WS" => Ok(Dataflow::WeightStationary),
            "OS" => Ok(Dataflow::OutputStationary),
            "RS" => Ok(Dataflow::RowStationary),
            other => Err(Error::InvalidArgument(format!("unknown dataflow `{other}`"))),
        }
    }
}

/// One convolution layer as seen by the accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerShape {
    pub h_out: u32,
    pub w_out: u32,
    pub c_in: u32,
    pub c_out: u32,
    pub kernel: u32,
    pub depthwise: bool,
}

impl LayerShape {
    pub fn new(h_out: u32, w_out: u32, c_in: u32, c_out: u32, kernel: u32, depthwise: bool) -> Result<Self> {
        let layer = Self {
            h_out,
            w_out,
            c_in,
            c_out,
            kernel,
            depthwise,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.h_out, self.w_out, self.c_in, self.c_out].contains(&0) {
            return Err(Error::InvalidArgument(format!("zero dimension in {self:?}")));
        }
        if ![1, 3, 5, 7].contains(&self.kernel) {
            return Err(Error::InvalidArgument(format!("kernel {} not in {{1,3,5,7}}", self.kernel)));
        }
        if self.depthwise && self.c_in != self.c_out {
            return Err(Error::InvalidArgument("depthwise layer needs c_in == c_out".into()));
        }
        Ok(())
    }

    /// Fixed 3-channel stem feeding the first block.
    pub fn default_stem() -> Self {
        Self {
            h_out: BASE_SPATIAL,
            w_out: BASE_SPATIAL,
            c_in: 3,
            c_out: BASE_CHANNELS,
            kernel: 3,
            depthwise: false,
        }
    }

    /// `(c_out, c_in)` as mapped onto the array: depthwise layers use `(C, 1)`.
    fn mapped_channels(&self) -> (u64, u64) {
        if self.depthwise {
            (self.c_out as u64, 1)
        } else {
            (self.c_out as u64, self.c_in as u64)
        }
    }

    pub fn macs(&self) -> u64 {
        let (co, ci) = self.mapped_channels();
        let k = self.kernel as u64;
        self.h_out as u64 * self.w_out as u64 * k * k * co * ci
    }

    pub fn weight_bytes(&self) -> u64 {
        let (co, ci) = self.mapped_channels();
        let k = self.kernel as u64;
        k * k * co * ci
    }

    pub fn input_bytes(&self) -> u64 {
        self.h_out as u64 * self.w_out as u64 * self.c_in as u64
    }

    pub fn output_bytes(&self) -> u64 {
        self.h_out as u64 * self.w_out as u64 * self.c_out as u64
    }
}

/// Discrete accelerator design point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwConfig {
    pub pe_x: u32,
    pub pe_y: u32,
    #[serde(rename = "rf")]
    pub rf_bytes: u32,
    #[serde(rename = "df")]
    pub dataflow: Dataflow,
}

impl HwConfig {
    pub fn new(pe_x: u32, pe_y: u32, rf_bytes: u32, dataflow: Dataflow) -> Result<Self> {
        let hw = Self {
            pe_x,
            pe_y,
            rf_bytes,
            dataflow,
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (PE_X_RANGE.0..=PE_X_RANGE.1).contains(&self.pe_x)
            && (PE_Y_RANGE.0..=PE_Y_RANGE.1).contains(&self.pe_y)
            && RF_SIZES.contains(&self.rf_bytes);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("hardware config out of range: {self:?}")))
        }
    }

    pub fn num_pes(&self) -> u64 {
        self.pe_x as u64 * self.pe_y as u64
    }

    /// Aggregate on-array register-file capacity in bytes.
    pub fn rf_capacity(&self) -> u64 {
        self.num_pes() * self.rf_bytes as u64
    }
}

impl fmt::Display for HwConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} rf={}B {}", self.pe_x, self.pe_y, self.rf_bytes, self.dataflow)
    }
}

/// Hardware metrics of one network/accelerator pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub latency_ms: f64,
    #[serde(rename = "energy_mJ")]
    pub energy_mj: f64,
    pub area_mm2: f64,
}

/// Identifies one of the three metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricId {
    #[serde(rename = "latency_ms")]
    Latency,
    #[serde(rename = "energy_mJ")]
    Energy,
    #[serde(rename = "area_mm2")]
    Area,
}

impl MetricId {
    pub const ALL: [MetricId; 3] = [MetricId::Latency, MetricId::Energy, MetricId::Area];

    /// Column of this metric in `[latency, energy, area]` vectors.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            MetricId::Latency => "latency_ms",
            MetricId::Energy => "energy_mJ",
            MetricId::Area => "area_mm2",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric `{s}`")))
    }
}

impl Metrics {
    pub fn get(&self, id: MetricId) -> f64 {
        match id {
            MetricId::Latency => self.latency_ms,
            MetricId::Energy => self.energy_mj,
            MetricId::Area => self.area_mm2,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.latency_ms, self.energy_mj, self.area_mm2]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            latency_ms: a[0],
            energy_mj: a[1],
            area_mm2: a[2],
        }
    }
}

/// Expands per-block `(kernel, expand)` choices into accelerator layers:
/// the stem, then expand 1x1, depthwise KxK and project 1x1 per block.
pub fn mbconv_expand(choices: &[(u32, u32)], stem: LayerShape) -> Result<Vec<LayerShape>> {
    stem.validate()?;
    let mut layers = Vec::with_capacity(1 + 3 * choices.len());
    layers.push(stem);
    let (c, s) = (BASE_CHANNELS, BASE_SPATIAL);
    for &(k, e) in choices {
        if !CANDIDATES.contains(&(k, e)) {
            return Err(Error::InvalidArgument(format!("invalid MBConv choice (K={k}, e={e})")));
        }
        let mid = c * e;
        layers.push(LayerShape::new(s, s, c, mid, 1, false)?);
        layers.push(LayerShape::new(s, s, mid, mid, k, true)?);
        layers.push(LayerShape::new(s, s, mid, c, 1, false)?);
    }
    Ok(layers)
}

/// Same as [`mbconv_expand`] with candidate indices in `0..6`.
pub fn expand_indices(choices: &[usize], stem: LayerShape) -> Result<Vec<LayerShape>> {
    let pairs = choices
        .iter()
        .map(|&i| {
            CANDIDATES
                .get(i)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("candidate index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    mbconv_expand(&pairs, stem)
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

pub fn layer_cycles(layer: &LayerShape, hw: &HwConfig) -> u64 {
    let (co, ci) = layer.mapped_channels();
    let k = layer.kernel as u64;
    let (h, w) = (layer.h_out as u64, layer.w_out as u64);
    let (a, b, rest) = match hw.dataflow {
        Dataflow::WeightStationary => (co, ci, k * k * h * w),
        Dataflow::OutputStationary => (h, w, k * k * ci * co),
        Dataflow::RowStationary => (k * co, h, k * w * ci),
    };
    div_ceil(a, hw.pe_x as u64) * div_ceil(b, hw.pe_y as u64) * rest
}

pub fn layer_dram_bytes(layer: &LayerShape, hw: &HwConfig) -> u64 {
    let (wb, ib, ob) = (layer.weight_bytes(), layer.input_bytes(), layer.output_bytes());
    let q = hw.rf_capacity();
    match hw.dataflow {
        Dataflow::WeightStationary => wb + div_ceil(wb, q) * (ib + ob),
        Dataflow::OutputStationary => ob + div_ceil(ob, q) * (ib + wb),
        Dataflow::RowStationary => wb + ib + div_ceil(wb + ib, q) * ob,
    }
}

pub fn area_mm2(hw: &HwConfig) -> f64 {
    hw.num_pes() as f64 * (AREA_PE_MM2 + AREA_RF_MM2_PER_BYTE * hw.rf_bytes as f64)
}

/// Energy of one layer in pJ.
pub fn layer_energy_pj(layer: &LayerShape, hw: &HwConfig) -> f64 {
    let macs = layer.macs() as f64;
    macs * E_MAC_PJ + 3.0 * macs * e_rf_pj(hw.rf_bytes) + layer_dram_bytes(layer, hw) as f64 * E_DRAM_PJ_PER_BYTE
}

pub fn evaluate(layers: &[LayerShape], hw: &HwConfig) -> Result<Metrics> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty network".into()));
    }
    let cycles: u64 = layers.iter().map(|l| layer_cycles(l, hw)).sum();
    let energy_pj: f64 = layers.iter().map(|l| layer_energy_pj(l, hw)).sum();
    Ok(Metrics {
        latency_ms: cycles as f64 / CLOCK_CYCLES_PER_MS,
        energy_mj: energy_pj * 1e-9,
        area_mm2: area_mm2(hw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv(h: u32, ci: u32, co: u32, k: u32) -> LayerShape {
        LayerShape::new(h, h, ci, co, k, false).unwrap()
    }

    fn hw(px: u32, py: u32, rf: u32, df: Dataflow) -> HwConfig {
        HwConfig::new(px, py, rf, df).unwrap()
    }

    #[test]
    fn mbconv_expansion_rule() {
        let layers = mbconv_expand(&[(3, 6)], LayerShape::default_stem()).unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!(layers[1], conv(16, 16, 96, 1));
        assert_eq!(layers[2], LayerShape::new(16, 16, 96, 96, 3, true).unwrap());
        assert_eq!(layers[3], conv(16, 96, 16, 1));

        let layers = mbconv_expand(&[(7, 3)], LayerShape::default_stem()).unwrap();
        assert_eq!((layers[2].kernel, layers[2].c_in, layers[2].depthwise), (7, 48, true));

        let layers = mbconv_expand(&[(5, 3); 8], LayerShape::default_stem()).unwrap();
        assert_eq!(layers.len(), 25);

        assert!(mbconv_expand(&[(3, 4)], LayerShape::default_stem()).is_err());
        assert!(mbconv_expand(&[(1, 3)], LayerShape::default_stem()).is_err());
    }

    #[test]
    fn layer_shape_invariants() {
        assert!(LayerShape::new(8, 8, 16, 32, 4, false).is_err());
        assert!(LayerShape::new(8, 8, 16, 32, 3, true).is_err());
    }

    #[test]
    fn cycle_examples() {
        let layer = conv(8, 16, 32, 3);
        assert_eq!(layer_cycles(&layer, &hw(16, 16, 64, Dataflow::WeightStationary)), 1152);
        assert_eq!(layer_cycles(&layer, &hw(16, 16, 64, Dataflow::OutputStationary)), 4608);
        let dw = LayerShape::new(8, 8, 16, 16, 3, true).unwrap();
        let c = layer_cycles(&dw, &hw(16, 16, 64, Dataflow::WeightStationary));
        assert_eq!(c, 576);
        let util = dw.macs() as f64 / (c as f64 * 256.0);
        assert!((util - 9216.0 / (576.0 * 256.0)).abs() < 1e-15);
        assert!(util < 0.07);
    }

    #[test]
    fn dram_examples() {
        let layer = conv(8, 16, 32, 3);
        assert_eq!(layer_dram_bytes(&layer, &hw(16, 16, 64, Dataflow::WeightStationary)), 7680);
        // Largest capacity in the space reads every tensor once for this layer.
        let big = hw(20, 24, 256, Dataflow::WeightStationary);
        let once = layer.weight_bytes() + layer.input_bytes() + layer.output_bytes();
        for df in Dataflow::ALL {
            let h = HwConfig { dataflow: df, ..big };
            assert_eq!(layer_dram_bytes(&layer, &h), once);
        }
    }

    #[test]
    fn area_example() {
        let a = area_mm2(&hw(16, 16, 64, Dataflow::RowStationary));
        // 256 * 0.01128 = 2.88768, i.e. 2.888 to three decimals.
        assert!((a - 2.88768).abs() < 1e-12);
        assert!((a - 2.888).abs() < 5e-4);
    }

    #[test]
    fn single_mac_energy_dominated_by_dram() {
        let l = LayerShape::new(1, 1, 1, 1, 1, false).unwrap();
        let h = hw(12, 8, 16, Dataflow::WeightStationary);
        let total = layer_energy_pj(&l, &h);
        let dram = layer_dram_bytes(&l, &h) as f64 * E_DRAM_PJ_PER_BYTE;
        // 3 bytes of traffic (300 pJ) against 0.2 + 3 * 0.03375 pJ of compute.
        assert_eq!(dram, 300.0);
        assert!(dram / total > 0.99);
    }

    #[test]
    fn evaluate_doubles_with_repeated_layers() {
        let layers = mbconv_expand(&[(5, 6), (3, 3)], LayerShape::default_stem()).unwrap();
        let doubled: Vec<_> = layers.iter().chain(layers.iter()).copied().collect();
        let h = hw(14, 20, 32, Dataflow::OutputStationary);
        let (a, b) = (evaluate(&layers, &h).unwrap(), evaluate(&doubled, &h).unwrap());
        assert!((b.latency_ms - 2.0 * a.latency_ms).abs() < 1e-12);
        assert!((b.energy_mj - 2.0 * a.energy_mj).abs() < 1e-15);
        assert_eq!(a.area_mm2, b.area_mm2);
        assert!(evaluate(&[], &h).is_err());
    }

    #[test]
    fn serde_names() {
        let h = hw(12, 8, 16, Dataflow::RowStationary);
        assert_eq!(
            serde_json::to_string(&h).unwrap(),
            r#"{"pe_x":12,"pe_y":8,"rf":16,"df":"RS"}"#
        );
        let m = Metrics::from_array([1.0, 2.0, 3.0]);
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"latency_ms":1.0,"energy_mJ":2.0,"area_mm2":3.0}"#
        );
    }

    fn any_layer() -> impl Strategy<Value = LayerShape> {
        (1u32..33, 1u32..33, 1u32..200, 1u32..200, prop::sample::select(vec![1u32, 3, 5, 7]), any::<bool>())
            .prop_map(|(h, w, ci, co, k, dw)| LayerShape {
                h_out: h,
                w_out: w,
                c_in: ci,
                c_out: if dw { ci } else { co },
                kernel: k,
                depthwise: dw,
            })
    }

    fn any_hw() -> impl Strategy<Value = HwConfig> {
        (12u32..=20, 8u32..=24, prop::sample::select(RF_SIZES.to_vec()), 0usize..3).prop_map(
            |(x, y, rf, d)| HwConfig {
                pe_x: x,
                pe_y: y,
                rf_bytes: rf,
                dataflow: Dataflow::from_index(d).unwrap(),
            },
        )
    }

    proptest! {
        #[test]
        fn utilization_never_exceeds_one(l in any_layer(), h in any_hw()) {
            prop_assert!(layer_cycles(&l, &h) * h.num_pes() >= l.macs());
        }

        #[test]
        fn cycles_non_increasing_in_array_dims(l in any_layer(), h in any_hw()) {
            let c = layer_cycles(&l, &h);
            if h.pe_x < PE_X_RANGE.1 {
                let wider = HwConfig { pe_x: h.pe_x + 1, ..h };
                prop_assert!(layer_cycles(&l, &wider) <= c);
            }
            if h.pe_y < PE_Y_RANGE.1 {
                let taller = HwConfig { pe_y: h.pe_y + 1, ..h };
                prop_assert!(layer_cycles(&l, &taller) <= c);
            }
        }

        #[test]
        fn dram_bounds_and_rf_monotonicity(l in any_layer(), h in any_hw()) {
            let d = layer_dram_bytes(&l, &h);
            prop_assert!(d >= l.weight_bytes() + l.input_bytes() + l.output_bytes());
            let i = RF_SIZES.iter().position(|&r| r == h.rf_bytes).unwrap();
            if i > 0 {
                let smaller = HwConfig { rf_bytes: RF_SIZES[i - 1], ..h };
                prop_assert!(layer_dram_bytes(&l, &smaller) >= d);
            }
        }

        #[test]
        fn evaluate_additive(a in prop::collection::vec(any_layer(), 1..5),
                             b in prop::collection::vec(any_layer(), 1..5),
                             h in any_hw()) {
            let ab: Vec<_> = a.iter().chain(b.iter()).copied().collect();
            let (ma, mb, mab) = (evaluate(&a, &h).unwrap(), evaluate(&b, &h).unwrap(), evaluate(&ab, &h).unwrap());
            prop_assert!((mab.latency_ms - ma.latency_ms - mb.latency_ms).abs() <= 1e-9 * mab.latency_ms);
            prop_assert!((mab.energy_mj - ma.energy_mj - mb.energy_mj).abs() <= 1e-9 * mab.energy_mj);
            prop_assert!(mab.latency_ms > 0.0 && mab.energy_mj > 0.0 && mab.area_mm2 > 0.0);
        }
    }
}
