use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, expand_indices, HwConfig, LayerShape, Metrics, CANDIDATES};
use crate::error::{Error, Result};

/// One sampled network/accelerator pair with its oracle metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Candidate index per layer.
    pub arch: Vec<usize>,
    pub hw: HwConfig,
    pub metrics: Metrics,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    arch: Vec<Vec<u8>>,
    hw: HwConfig,
    metrics: Metrics,
}

impl Record {
    pub fn one_hot(&self) -> Vec<Vec<u8>> {
        self.arch
            .iter()
            .map(|&c| (0..CANDIDATES.len()).map(|j| u8::from(j == c)).collect())
            .collect()
    }

    pub fn to_json_line(&self) -> String {
        let line = RecordLine {
            arch: self.one_hot(),
            hw: self.hw,
            metrics: self.metrics,
        };
        serde_json::to_string(&line).expect("record serializes")
    }

    fn from_line(text: &str, line: usize) -> Result<Self> {
        let err = |detail: String| Error::Record { line, detail };
        let raw: RecordLine = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        let arch = raw
            .arch
            .iter()
            .map(|row| {
                let ok = row.len() == CANDIDATES.len()
                    && row.iter().all(|&b| b <= 1)
                    && row.iter().filter(|&&b| b == 1).count() == 1;
                ok.then(|| row.iter().position(|&b| b == 1).unwrap())
                    .ok_or_else(|| err(format!("arch row {row:?} is not one-hot over 6 candidates")))
            })
            .collect::<Result<Vec<_>>>()?;
        if arch.is_empty() {
            return Err(err("empty arch".into()));
        }
        raw.hw.validate().map_err(|e| err(e.to_string()))?;
        let m = raw.metrics.to_array();
        if m.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(err(format!("metrics must be finite and positive: {m:?}")));
        }
        Ok(Self {
            arch,
            hw: raw.hw,
            metrics: raw.metrics,
        })
    }
}

/// Mean metrics of a dataset; these become the cost normalization references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub count: usize,
    pub mean: Metrics,
}

impl DatasetSummary {
    pub fn of(records: &[Record]) -> Self {
        let mut sum = [0.0; 3];
        for r in records {
            for (s, v) in sum.iter_mut().zip(r.metrics.to_array()) {
                *s += v;
            }
        }
        let n = records.len().max(1) as f64;
        Self {
            count: records.len(),
            mean: Metrics::from_array(sum.map(|s| s / n)),
        }
    }
}

/// Draws `n` uniform (architecture, accelerator) pairs and labels them with
/// the oracle. Record `i` uses stream `i` of the seeded generator, so the
/// output does not depend on how the work is split across threads.
pub fn sample_pairs(n: usize, seed: u64, layers: usize, stem: LayerShape) -> Result<Vec<Record>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if layers == 0 {
        return Err(Error::InvalidArgument("network needs at least one block".into()));
    }
    let space: Vec<HwConfig> = super::enumerate_space().collect();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let arch: Vec<usize> = (0..layers).map(|_| rng.random_range(0..CANDIDATES.len())).collect();
            let hw = space[rng.random_range(0..space.len())];
            let metrics = evaluate(&expand_indices(&arch, stem)?, &hw)?;
            Ok(Record { arch, hw, metrics })
        })
        .collect()
}

/// Writes records as JSON Lines. The file appears atomically: nothing is
/// left at `path` if writing fails.
pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    let tmp = path.with_extension("jsonl.partial");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for r in records {
            w.write_all(r.to_json_line().as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Record::from_line(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = sample_pairs(200, 7, 8, LayerShape::default_stem()).unwrap();
        let b = sample_pairs(200, 7, 8, LayerShape::default_stem()).unwrap();
        assert_eq!(a, b);
        let c = sample_pairs(200, 8, 8, LayerShape::default_stem()).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().all(|r| r.arch.len() == 8 && r.hw.validate().is_ok()));
        // A prefix of a larger draw is the smaller draw.
        let longer = sample_pairs(300, 7, 8, LayerShape::default_stem()).unwrap();
        assert_eq!(&longer[..200], &a[..]);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample_pairs(0, 1, 8, LayerShape::default_stem()).is_err());
    }

    #[test]
    fn latency_spread_is_nondegenerate() {
        let recs = sample_pairs(10_000, 3, 8, LayerShape::default_stem()).unwrap();
        let lat = recs.iter().map(|r| r.metrics.latency_ms);
        let (lo, hi) = lat.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        assert!(lo < hi);
        assert!(hi / lo > 5.0);
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = sample_pairs(5, 1, 3, LayerShape::default_stem()).unwrap();
        write_dataset(&path, &recs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"arch":[["#));
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, recs);

        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = r#"{"arch":[[1,1,0,0,0,0]],"hw":{"pe_x":12,"pe_y":8,"rf":16,"df":"WS"},"metrics":{"latency_ms":1,"energy_mJ":1,"area_mm2":1}}"#;
        fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected record error, got {other:?}"),
        }
    }
}
