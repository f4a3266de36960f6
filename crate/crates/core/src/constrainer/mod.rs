//! Hinge constraints and the minimal-norm gradient correction that keeps a
//! step pointed back into the feasible region.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hwmodel::MetricId;

pub const DEFAULT_DELTA0: f64 = 1e-3;
pub const DEFAULT_P: f64 = 1e-2;

pub fn hinge(t: f64, target: f64) -> f64 {
    (t - target).max(0.0)
}

/// Subgradient of [`hinge`] in `t`; zero on the boundary.
pub fn hinge_grad(t: f64, target: f64) -> f64 {
    if t > target {
        1.0
    } else {
        0.0
    }
}

pub fn multi_hinge(ts: &[f64], targets: &[f64]) -> Result<f64> {
    if ts.is_empty() || ts.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "multi_hinge needs equal nonempty lists, got {} and {}",
            ts.len(),
            targets.len()
        )));
    }
    Ok(ts.iter().zip(targets).map(|(&t, &tt)| hinge(t, tt)).sum())
}

/// Upper bound on one metric with its adaptive pull strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSpec {
    pub metric: MetricId,
    pub target: f64,
    pub delta: f64,
    pub delta0: f64,
    pub p: f64,
}

impl ConstraintSpec {
    pub fn new(metric: MetricId, target: f64) -> Result<Self> {
        let spec = Self {
            metric,
            target,
            delta: DEFAULT_DELTA0,
            delta0: DEFAULT_DELTA0,
            p: DEFAULT_P,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_schedule(mut self, delta0: f64, p: f64) -> Result<Self> {
        self.delta0 = delta0;
        self.delta = delta0;
        self.p = p;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.target) {
            return Err(Error::Config(format!("target for {} must be finite and positive", self.metric)));
        }
        if !(pos(self.delta0) && pos(self.p) && self.delta.is_finite() && self.delta >= self.delta0) {
            return Err(Error::Config(format!(
                "delta schedule for {} needs delta >= delta0 > 0 and p > 0",
                self.metric
            )));
        }
        Ok(())
    }

    pub fn satisfied(&self, t: f64) -> bool {
        t <= self.target
    }

    /// Resets the pull on satisfaction, strengthens it by `1 + p` otherwise.
    pub fn delta_step(self, satisfied: bool) -> Self {
        let delta = if satisfied {
            self.delta0
        } else {
            self.delta * (1.0 + self.p)
        };
        Self { delta, ..self }
    }
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<={}", self.metric, self.target)
    }
}

impl FromStr for ConstraintSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (metric, target) = s
            .split_once("<=")
            .ok_or_else(|| Error::Config(format!("constraint `{s}` must look like metric<=value")))?;
        let metric: MetricId = metric.trim().parse().map_err(|_| {
            Error::Config(format!("unknown metric `{}` in constraint `{s}`", metric.trim()))
        })?;
        let target: f64 = target
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad target in constraint `{s}`")))?;
        Self::new(metric, target)
    }
}

/// Serialized in the `metric<=target` form; the δ schedule is not persisted.
impl Serialize for ConstraintSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConstraintSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated list such as `latency_ms<=0.2,area_mm2<=3`.
pub fn parse_constraints(text: &str) -> Result<Vec<ConstraintSpec>> {
    let specs = text
        .split(',')
        .filter(|part| !part.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<ConstraintSpec>>>()?;
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.metric == a.metric) {
            return Err(Error::Config(format!("metric {} constrained twice", a.metric)));
        }
    }
    Ok(specs)
}

/// Outcome of one gradient correction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub g_loss: Vec<f64>,
    pub g_const: Vec<f64>,
    /// `g_loss . g_const` before correction.
    pub dot: f64,
    pub manipulated: bool,
    /// Correction term; all zeros when not manipulated.
    pub m: Vec<f64>,
}

impl GradientBundle {
    /// The direction to descend along: `g_loss + m`.
    pub fn g(&self) -> Vec<f64> {
        self.g_loss.iter().zip(&self.m).map(|(a, b)| a + b).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds the smallest correction `m` with `(g_loss + m) . g_const = delta`
/// when the constraint is violated and the loss gradient disagrees with it.
///
/// A violated constraint with a zero gradient is an error regardless of the
/// agreement test: no direction can restore feasibility.
pub fn manipulate(g_loss: &[f64], g_const: &[f64], violated: bool, delta: f64) -> Result<GradientBundle> {
    if g_loss.len() != g_const.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient lengths differ: {} vs {}",
            g_loss.len(),
            g_const.len()
        )));
    }
    let d = dot(g_loss, g_const);
    let norm_sq = dot(g_const, g_const);
    let mut bundle = GradientBundle {
        g_loss: g_loss.to_vec(),
        g_const: g_const.to_vec(),
        dot: d,
        manipulated: false,
        m: vec![0.0; g_loss.len()],
    };
    if !violated {
        return Ok(bundle);
    }
    if norm_sq == 0.0 || !norm_sq.is_finite() {
        return Err(Error::ZeroConstraintGradient);
    }
    if d >= 0.0 {
        return Ok(bundle);
    }
    let c = (delta - d) / norm_sq;
    bundle.m = g_const.iter().map(|v| c * v).collect();
    bundle.manipulated = true;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hinge_examples() {
        assert!((hinge(40.0, 33.3) - 6.7).abs() < 1e-12);
        assert_eq!(hinge(20.0, 33.3), 0.0);
        assert_eq!(hinge(33.3, 33.3), 0.0);
        assert_eq!(hinge_grad(33.3, 33.3), 0.0);
        assert_eq!(hinge_grad(33.4, 33.3), 1.0);
        assert!((multi_hinge(&[40.0, 10.0], &[33.3, 20.0]).unwrap() - 6.7).abs() < 1e-12);
        assert_eq!(multi_hinge(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(multi_hinge(&[1.0], &[1.0, 2.0]).is_err());
        assert!(multi_hinge(&[], &[]).is_err());
    }

    #[test]
    fn manipulate_examples() {
        let b = manipulate(&[1.0, 0.0], &[-1.0, 0.0], true, 0.1).unwrap();
        assert!(b.manipulated);
        assert!((b.m[0] + 1.1).abs() < 1e-15 && b.m[1] == 0.0);
        let g = b.g();
        assert!((g[0] + 0.1).abs() < 1e-15);
        assert!((dot(&g, &b.g_const) - 0.1).abs() < 1e-15);

        let b = manipulate(&[3.0, -2.0], &[5.0, 7.0], false, 0.1).unwrap();
        assert!(!b.manipulated);
        assert_eq!(b.g(), vec![3.0, -2.0]);

        let b = manipulate(&[1.0, 0.0], &[1.0, 1.0], true, 0.1).unwrap();
        assert!(!b.manipulated);
        assert_eq!(b.g(), vec![1.0, 0.0]);
        assert_eq!(b.dot, 1.0);
    }

    #[test]
    fn zero_constraint_gradient_is_an_error() {
        assert!(matches!(
            manipulate(&[1.0, 2.0], &[0.0, 0.0], true, 0.1),
            Err(Error::ZeroConstraintGradient)
        ));
        assert!(manipulate(&[1.0, 2.0], &[0.0, 0.0], false, 0.1).is_ok());
        assert!(manipulate(&[1.0], &[1.0, 2.0], false, 0.1).is_err());
    }

    #[test]
    fn delta_schedule() {
        let s = ConstraintSpec::new(MetricId::Latency, 1.0).unwrap();
        let v = s.delta_step(false);
        assert!((v.delta - 1.01e-3).abs() < 1e-18);
        assert_eq!(v.delta_step(false).delta_step(true).delta, s.delta0);
        let mut cur = s;
        let mut prev = cur.delta;
        for n in 1..=50 {
            cur = cur.delta_step(false);
            assert!(cur.delta > prev);
            prev = cur.delta;
            let expect = s.delta0 * (1.0 + s.p).powi(n);
            assert!((cur.delta - expect).abs() <= 1e-12 * expect);
        }
        assert_eq!(cur.delta_step(true).delta, s.delta0);
    }

    #[test]
    fn constraint_parsing() {
        let specs = parse_constraints("latency_ms<=16.6, energy_mJ <= 0.5").unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].metric, MetricId::Latency);
        assert_eq!(specs[0].target, 16.6);
        assert_eq!(specs[1].metric, MetricId::Energy);
        assert_eq!(specs[0].to_string(), "latency_ms<=16.6");
        assert!(parse_constraints("latency<=3").is_err());
        assert!(parse_constraints("latency_ms>=3").is_err());
        assert!(parse_constraints("latency_ms<=-1").is_err());
        assert!(parse_constraints("latency_ms<=1,latency_ms<=2").is_err());
        assert!(parse_constraints("area_mm2<=nan").is_err());
        let json = serde_json::to_string(&specs).unwrap();
        assert_eq!(json, r#"["latency_ms<=16.6","energy_mJ<=0.5"]"#);
        let back: Vec<ConstraintSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, specs);
        assert!(serde_json::from_str::<ConstraintSpec>(r#""speed<=1""#).is_err());
    }

    fn disagreeing_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (2usize..=1000)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(-1.0f64..1.0, n),
                    proptest::collection::vec(-1.0f64..1.0, n),
                    1e-4f64..1.0,
                )
            })
            .prop_filter_map("needs a negative dot product", |(gl, mut gc, delta)| {
                if gc.iter().all(|&v| v == 0.0) {
                    return None;
                }
                if dot(&gl, &gc) > 0.0 {
                    gc.iter_mut().for_each(|v| *v = -*v);
                }
                (dot(&gl, &gc) < 0.0).then_some((gl, gc, delta))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn correction_hits_delta_exactly((gl, gc, delta) in disagreeing_case()) {
            let b = manipulate(&gl, &gc, true, delta).unwrap();
            prop_assert!(b.manipulated);
            let got = dot(&b.g(), &gc);
            prop_assert!((got - delta).abs() <= 1e-9 * delta, "got {got}, want {delta}");
        }

        #[test]
        fn correction_is_collinear((gl, gc, delta) in disagreeing_case()) {
            let b = manipulate(&gl, &gc, true, delta).unwrap();
            let c = (delta - b.dot) / dot(&gc, &gc);
            prop_assert!(c > 0.0);
            for (m, g) in b.m.iter().zip(&gc) {
                prop_assert!((m - c * g).abs() <= 1e-12 * (1.0 + (c * g).abs()));
            }
        }

        // The pull is measured in units of g . g_const, so it rescales with g_const.
        #[test]
        fn correction_is_scale_covariant((gl, gc, delta) in disagreeing_case(), s in 1e-3f64..1e3) {
            let a = manipulate(&gl, &gc, true, delta).unwrap().g();
            let scaled: Vec<f64> = gc.iter().map(|v| s * v).collect();
            let b = manipulate(&gl, &scaled, true, s * delta).unwrap().g();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn correction_has_minimal_norm((gl, gc, delta) in disagreeing_case(), seed in any::<u64>()) {
            use rand::Rng;
            let b = manipulate(&gl, &gc, true, delta).unwrap();
            let norm = dot(&b.m, &b.m).sqrt();
            let gc_sq = dot(&gc, &gc);
            let mut rng = crate::rng::stream(seed, 0);
            for _ in 0..100 {
                // Project a random vector onto the null space of g_const.
                let r: Vec<f64> = (0..gc.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let k = dot(&r, &gc) / gc_sq;
                let alt: Vec<f64> = b.m.iter().zip(&r).zip(&gc).map(|((m, r), g)| m + r - k * g).collect();
                let g_alt: Vec<f64> = alt.iter().zip(&gl).map(|(a, l)| a + l).collect();
                prop_assert!((dot(&g_alt, &gc) - delta).abs() <= 1e-9 * (1.0 + delta));
                prop_assert!(norm <= dot(&alt, &alt).sqrt() * (1.0 + 1e-12));
            }
        }
    }
}
