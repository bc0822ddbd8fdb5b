//! Synthetic Gaussian-mixture classification data with injected label noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub features: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    /// Probability that a training label is flipped to another class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            features: 32,
            train_size: 2000,
            val_size: 200,
            test_size: 1000,
            separation: 4.0,
            label_noise: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.features == 0 || self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidArgument("sizes must be >= 1".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::InvalidArgument("separation must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidArgument("label noise must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Samples as rows of `x`, with global ids that are unique across splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<usize>,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub corrupted: Vec<bool>,
    pub classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.x.row(i), self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// Rows at the given positions, in that order.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        let d = self.features();
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            data.extend_from_slice(self.x.row(p));
        }
        Dataset {
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            x: Matrix::from_vec(positions.len(), d, data).expect("row lengths match"),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            corrupted: positions.iter().map(|&p| self.corrupted[p]).collect(),
            classes: self.classes,
            seed: self.seed,
        }
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["index".to_string(), "label".into(), "corrupted".into()];
        header.extend((0..self.features()).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.ids[i].to_string(),
                self.labels[i].to_string(),
                self.corrupted[i].to_string(),
            ];
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, classes: usize, seed: u64) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.len() < 4 || &headers[0] != "index" || &headers[1] != "label" || &headers[2] != "corrupted" {
            return Err(Error::format(path, "expected header index,label,corrupted,f0,..."));
        }
        let features = headers.len() - 3;
        let (mut ids, mut labels, mut corrupted, mut data) = (vec![], vec![], vec![], vec![]);
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", line + 1));
            ids.push(rec[0].parse().map_err(|_| bad("index"))?);
            let label: usize = rec[1].parse().map_err(|_| bad("label"))?;
            if label >= classes {
                return Err(Error::format(path, format!("row {}: label {label} >= {classes}", line + 1)));
            }
            labels.push(label);
            corrupted.push(rec[2].parse().map_err(|_| bad("corrupted flag"))?);
            for j in 0..features {
                data.push(rec[3 + j].parse::<f64>().map_err(|_| bad("feature"))?);
            }
        }
        let n = labels.len();
        Ok(Dataset {
            ids,
            x: Matrix::from_vec(n, features, data)?,
            labels,
            corrupted,
            classes,
            seed,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SyntheticSpec,
    seed: u64,
    files: Vec<String>,
}

impl Splits {
    pub fn save(&self, dir: &Path, spec: &SyntheticSpec) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_csv(&dir.join("train.csv"))?;
        self.val.write_csv(&dir.join("val.csv"))?;
        self.test.write_csv(&dir.join("test.csv"))?;
        let sidecar = Sidecar {
            spec: spec.clone(),
            seed: spec.seed,
            files: vec!["train.csv".into(), "val.csv".into(), "test.csv".into()],
        };
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(&sidecar).expect("plain data serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Splits, SyntheticSpec)> {
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let c = sidecar.spec.classes;
        let s = sidecar.seed;
        let splits = Splits {
            train: Dataset::read_csv(&dir.join("train.csv"), c, s)?,
            val: Dataset::read_csv(&dir.join("val.csv"), c, s)?,
            test: Dataset::read_csv(&dir.join("test.csv"), c, s)?,
        };
        Ok((splits, sidecar.spec))
    }
}

/// Draws class means, then train, validation and test samples in that order.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    generate_with_truth(spec).map(|(s, _)| s)
}

/// Like [`generate`], also returning the uncorrupted training labels.
pub(crate) fn generate_with_truth(spec: &SyntheticSpec) -> Result<(Splits, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.features).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            if n > 1e-12 {
                break v.iter().map(|x| spec.separation * x / n).collect();
            }
        })
        .collect();

    let mut next_id = 0usize;
    let mut truth = Vec::new();
    let mut draw = |size: usize, noise: f64, rng: &mut ChaCha8Rng, truth: &mut Vec<usize>| {
        truth.clear();
        let mut data = Vec::with_capacity(size * spec.features);
        let mut labels = Vec::with_capacity(size);
        let mut corrupted = Vec::with_capacity(size);
        for _ in 0..size {
            let class = rng.gen_range(0..spec.classes);
            truth.push(class);
            for &m in &means[class] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + z);
            }
            let flip = noise > 0.0 && rng.gen_bool(noise);
            if flip {
                let offset = rng.gen_range(1..spec.classes);
                labels.push((class + offset) % spec.classes);
            } else {
                labels.push(class);
            }
            corrupted.push(flip);
        }
        let ids = (next_id..next_id + size).collect();
        next_id += size;
        Dataset {
            ids,
            x: Matrix::from_vec(size, spec.features, data).expect("sized buffer"),
            labels,
            corrupted,
            classes: spec.classes,
            seed: spec.seed,
        }
    };
    let train = draw(spec.train_size, spec.label_noise, &mut rng, &mut truth);
    let train_truth = truth.clone();
    let val = draw(spec.val_size, 0.0, &mut rng, &mut truth);
    let test = draw(spec.test_size, 0.0, &mut rng, &mut truth);
    Ok((Splits { train, val, test }, train_truth))
}

/// A seeded permutation of `0..len`.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Uniform draw of `n` samples without replacement.
pub fn sample_probe(train: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > train.len() {
        return Err(Error::InvalidArgument(format!(
            "probe size {n} must be in 1..={}",
            train.len()
        )));
    }
    let mut idx = permutation(train.len(), seed);
    idx.truncate(n);
    Ok(train.subset(&idx))
}

/// Disjoint probe and alignment position sets drawn from one permutation.
pub fn construction_split(
    train_len: usize,
    probe: usize,
    align: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if probe == 0 || probe + align > train_len {
        return Err(Error::InvalidArgument(format!(
            "probe {probe} + align {align} exceeds {train_len} training samples"
        )));
    }
    let idx = permutation(train_len, seed);
    Ok((idx[..probe].to_vec(), idx[probe..probe + align].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small(seed: u64, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            train_size: 1000,
            val_size: 50,
            test_size: 50,
            label_noise: noise,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn no_noise_no_corruption() {
        let s = generate(&small(1, 0.0)).unwrap();
        assert_eq!(s.train.corrupted_count(), 0);
    }

    #[test]
    fn corruption_count_is_binomial_typical() {
        let s = generate(&small(1, 0.2)).unwrap();
        let c = s.train.corrupted_count();
        // mean 200, sd 12.6
        assert!((150..=250).contains(&c), "{c}");
        // Golden value for seed 1.
        assert_eq!(c, GOLDEN_CORRUPTED_SEED1);
        assert_eq!(s.val.corrupted_count() + s.test.corrupted_count(), 0);
    }

    const GOLDEN_CORRUPTED_SEED1: usize = 203;

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(5, 0.2)).unwrap(), generate(&small(5, 0.2)).unwrap());
        assert_ne!(generate(&small(5, 0.2)).unwrap(), generate(&small(6, 0.2)).unwrap());
    }

    #[test]
    fn splits_are_disjoint() {
        let s = generate(&small(2, 0.2)).unwrap();
        let a: BTreeSet<_> = s.train.ids.iter().collect();
        let b: BTreeSet<_> = s.val.ids.iter().collect();
        let c: BTreeSet<_> = s.test.ids.iter().collect();
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(generate(&SyntheticSpec { label_noise: 1.0, ..small(0, 0.0) }).is_err());
        assert!(generate(&SyntheticSpec { train_size: 0, ..small(0, 0.0) }).is_err());
    }

    #[test]
    fn probe_sampling() {
        let s = generate(&small(3, 0.2)).unwrap();
        let all = sample_probe(&s.train, 1000, 4).unwrap();
        let mut ids = all.ids.clone();
        ids.sort();
        assert_eq!(ids, s.train.ids);
        assert_ne!(all.ids, s.train.ids);
        assert_eq!(sample_probe(&s.train, 1, 4).unwrap().len(), 1);
        assert!(sample_probe(&s.train, 1001, 4).is_err());

        let p1: BTreeSet<_> = sample_probe(&s.train, 100, 10).unwrap().ids.into_iter().collect();
        let p2: BTreeSet<_> = sample_probe(&s.train, 100, 11).unwrap().ids.into_iter().collect();
        let overlap = p1.intersection(&p2).count();
        // Hypergeometric mean 10, sd ~2.8.
        assert!(overlap <= 25, "{overlap}");
        assert_eq!(overlap, GOLDEN_OVERLAP_10_11);
    }

    const GOLDEN_OVERLAP_10_11: usize = 11;

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn flipped_labels_come_from_other_classes(seed in 0u64..1000, noise in 0.0f64..0.9, classes in 2usize..10) {
            let spec = SyntheticSpec { classes, train_size: 200, ..small(seed, noise) };
            let (s, truth) = generate_with_truth(&spec).unwrap();
            for i in 0..s.train.len() {
                proptest::prop_assert_eq!(s.train.corrupted[i], s.train.labels[i] != truth[i]);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(4, 0.2);
        let s = generate(&spec).unwrap();
        s.save(dir.path(), &spec).unwrap();
        let (back, spec_back) = Splits::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(spec_back, spec);
    }
}
