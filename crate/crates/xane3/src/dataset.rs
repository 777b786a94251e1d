//! JSON Lines dataset records: one record per absorber graph, spectrum on
//! the canonical grid.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XaneError};
use crate::graph::Structure;
use crate::spectra::GRID_N;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub lattice: [[f64; 3]; 3],
    pub pbc: [bool; 3],
    pub positions: Vec<[f64; 3]>,
    pub numbers: Vec<u32>,
    pub absorber: usize,
    pub spectrum: Vec<f64>,
    pub e0: f64,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.numbers.len() {
            return Err(XaneError::InvalidArgument(format!(
                "record: {} positions vs {} numbers",
                self.positions.len(),
                self.numbers.len()
            )));
        }
        if self.absorber >= self.positions.len() {
            return Err(XaneError::InvalidArgument(format!(
                "record: absorber {} out of range ({} atoms)",
                self.absorber,
                self.positions.len()
            )));
        }
        if self.spectrum.len() != GRID_N {
            return Err(XaneError::InvalidArgument(format!(
                "record: spectrum length {} != {}",
                self.spectrum.len(),
                GRID_N
            )));
        }
        if !self.spectrum.iter().all(|v| v.is_finite()) || !self.e0.is_finite() {
            return Err(XaneError::InvalidArgument(
                "record: non-finite spectrum or e0".into(),
            ));
        }
        Ok(())
    }

    pub fn structure(&self) -> Structure {
        Structure {
            lattice: self.lattice,
            pbc: self.pbc,
            positions: self.positions.clone(),
            numbers: self.numbers.clone(),
            absorber_sites: vec![self.absorber],
        }
    }

    /// Grouping key for split assignment: records sharing atomic content
    /// (everything except the absorber index and targets) belong to the same
    /// parent structure and must land in the same split.
    pub fn structure_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for row in &self.lattice {
            for v in row {
                v.to_bits().hash(&mut h);
            }
        }
        self.pbc.hash(&mut h);
        for p in &self.positions {
            for v in p {
                v.to_bits().hash(&mut h);
            }
        }
        self.numbers.hash(&mut h);
        h.finish()
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| {
            XaneError::InvalidArgument(format!("{}:{}: {}", path.display(), lineno + 1, e))
        })?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Mean-spectrum predictor MSE over the dataset, written alongside synthetic
/// datasets so acceptance ratios have a denominator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceBaseline {
    pub mean_spectrum: Vec<f64>,
    pub variance_baseline: f64,
}

pub fn variance_baseline(records: &[DatasetRecord]) -> Result<VarianceBaseline> {
    if records.is_empty() {
        return Err(XaneError::InvalidArgument("empty dataset".into()));
    }
    let n = records[0].spectrum.len();
    let mut mean = vec![0.0; n];
    for r in records {
        for (m, v) in mean.iter_mut().zip(&r.spectrum) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= records.len() as f64;
    }
    let mut mse = 0.0;
    for r in records {
        for (m, v) in mean.iter().zip(&r.spectrum) {
            mse += (v - m) * (v - m);
        }
    }
    mse /= (records.len() * n) as f64;
    Ok(VarianceBaseline {
        mean_spectrum: mean,
        variance_baseline: mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::GRID_N;

    fn record(absorber: usize, fill: f64) -> DatasetRecord {
        DatasetRecord {
            lattice: [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]],
            pbc: [true, true, true],
            positions: vec![[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]],
            numbers: vec![26, 8],
            absorber,
            spectrum: vec![fill; GRID_N],
            e0: 7112.15,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![record(0, 0.5), record(1, 1.5)];
        write_jsonl(&path, &recs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].spectrum, recs[0].spectrum);
        assert_eq!(back[1].absorber, 1);
        // identical write is byte-identical
        let path2 = dir.path().join("d2.jsonl");
        write_jsonl(&path2, &recs).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn validation_rejects_bad_records() {
        let mut r = record(0, 0.0);
        r.spectrum.pop();
        assert!(r.validate().is_err());
        let mut r = record(5, 0.0);
        r.absorber = 5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn structure_hash_ignores_absorber_only() {
        let a = record(0, 0.1);
        let mut b = record(1, 0.9);
        b.e0 = 0.0;
        assert_eq!(a.structure_hash(), b.structure_hash());
        let mut c = record(0, 0.1);
        c.positions[1][0] += 1e-9;
        assert_ne!(a.structure_hash(), c.structure_hash());
    }

    #[test]
    fn baseline_of_constant_dataset_is_zero() {
        let recs = vec![record(0, 0.7), record(1, 0.7)];
        let b = variance_baseline(&recs).unwrap();
        assert_eq!(b.variance_baseline, 0.0);
        let recs = vec![record(0, 0.0), record(0, 1.0)];
        let b = variance_baseline(&recs).unwrap();
        assert!((b.variance_baseline - 0.25).abs() < 1e-15);
    }
}
