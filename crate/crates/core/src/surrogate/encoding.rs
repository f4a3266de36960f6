use crate::error::{Error, Result};
use crate::hwmodel::{Dataflow, HwConfig, PE_X_RANGE, PE_Y_RANGE, RF_SIZES};

pub const HW_DIM: usize = 6;

/// Continuous accelerator encoding: normalized array dims and register
/// file size in `[0, 1]` plus a distribution over dataflows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HwEncoding {
    pub px: f64,
    pub py: f64,
    pub rf: f64,
    /// Weights over `(WS, OS, RS)`.
    pub df: [f64; 3],
}

impl HwEncoding {
    pub fn encode(hw: &HwConfig) -> Self {
        let mut df = [0.0; 3];
        df[hw.dataflow.index()] = 1.0;
        Self {
            px: (hw.pe_x - PE_X_RANGE.0) as f64 / (PE_X_RANGE.1 - PE_X_RANGE.0) as f64,
            py: (hw.pe_y - PE_Y_RANGE.0) as f64 / (PE_Y_RANGE.1 - PE_Y_RANGE.0) as f64,
            rf: (hw.rf_bytes as f64 / RF_SIZES[0] as f64).log2() / 4.0,
            df,
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != HW_DIM {
            return Err(Error::InvalidArgument(format!("hardware encoding needs {HW_DIM} values, got {}", v.len())));
        }
        let enc = Self {
            px: v[0],
            py: v[1],
            rf: v[2],
            df: [v[3], v[4], v[5]],
        };
        enc.validate()?;
        Ok(enc)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let df_sum: f64 = self.df.iter().sum();
        if !(unit(self.px) && unit(self.py) && unit(self.rf)) {
            return Err(Error::InvalidArgument(format!("encoding outside the unit cube: {self:?}")));
        }
        if self.df.iter().any(|&d| d < 0.0 || !d.is_finite()) || (df_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("dataflow weights not a simplex: {:?}", self.df)));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.px, self.py, self.rf, self.df[0], self.df[1], self.df[2]]
    }

    /// Nearest grid design: rounded array dims and log-rounded register file,
    /// dataflow by argmax (ties to the earlier of WS, OS, RS).
    pub fn discretize(&self) -> HwConfig {
        let span = |r: (u32, u32)| (r.1 - r.0) as f64;
        let pe_x = (PE_X_RANGE.0 as f64 + span(PE_X_RANGE) * self.px)
            .round()
            .clamp(PE_X_RANGE.0 as f64, PE_X_RANGE.1 as f64) as u32;
        let pe_y = (PE_Y_RANGE.0 as f64 + span(PE_Y_RANGE) * self.py)
            .round()
            .clamp(PE_Y_RANGE.0 as f64, PE_Y_RANGE.1 as f64) as u32;
        let rf_exp = (4.0 * self.rf).round().clamp(0.0, 4.0) as usize;
        let mut best = 0;
        for i in 1..3 {
            if self.df[i] > self.df[best] {
                best = i;
            }
        }
        HwConfig {
            pe_x,
            pe_y,
            rf_bytes: RF_SIZES[rf_exp],
            dataflow: Dataflow::from_index(best).expect("three dataflows"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwmodel::enumerate_space;
    use proptest::prelude::*;

    #[test]
    fn boundary_encodings() {
        let lo = HwEncoding {
            px: 0.0,
            py: 0.0,
            rf: 0.0,
            df: [1.0, 0.0, 0.0],
        };
        assert_eq!(lo.discretize(), HwConfig::new(12, 8, 16, Dataflow::WeightStationary).unwrap());
        let hi = HwEncoding {
            px: 1.0,
            py: 1.0,
            rf: 1.0,
            df: [0.0, 0.0, 1.0],
        };
        assert_eq!(hi.discretize(), HwConfig::new(20, 24, 256, Dataflow::RowStationary).unwrap());
    }

    #[test]
    fn grid_round_trip() {
        for hw in enumerate_space() {
            let e = HwEncoding::encode(&hw);
            assert!(e.validate().is_ok());
            assert_eq!(e.discretize(), hw);
        }
    }

    #[test]
    fn rejects_invalid() {
        assert!(HwEncoding::from_slice(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(HwEncoding::from_slice(&[1.5, 0.5, 0.5, 1.0, 0.0, 0.0]).is_err());
        assert!(HwEncoding::from_slice(&[0.5; 5]).is_err());
    }

    proptest! {
        #[test]
        fn discretize_is_idempotent(px in 0.0f64..=1.0, py in 0.0f64..=1.0, rf in 0.0f64..=1.0,
                                    a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let s = a + b + c + 1e-12;
            let e = HwEncoding { px, py, rf, df: [a / s, b / s, c / s] };
            let hw = e.discretize();
            prop_assert!(hw.validate().is_ok());
            prop_assert_eq!(HwEncoding::encode(&hw).discretize(), hw);
        }
    }
}
