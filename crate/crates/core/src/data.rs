//! Datasets: synthetic generators, tabular CSV ingestion, standardization and
//! the test / labeled / unlabeled split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DsclError, Result};
use crate::tensor::Tensor;

/// Fraction of all rows held out for testing.
pub const TEST_FRACTION: f64 = 0.2;
/// Label rates accepted by [`SplitSpec`].
pub const LABEL_RATES: [f64; 5] = [1.0, 0.20, 0.10, 0.05, 0.01];

/// Per-column affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of each column; constant columns keep scale 1.
    pub fn fit(t: &Tensor) -> Self {
        let (r, c) = t.dims2();
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, &v) in mean.iter_mut().zip(t.row(i)) {
                *m += v / r as f64;
            }
        }
        let mut var = vec![0.0; c];
        for i in 0..r {
            for (j, &v) in t.row(i).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]) / r as f64;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let c = t.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % c;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn inverse(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let c = t.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % c;
            *v = *v * self.std[j] + self.mean[j];
        }
        out
    }
}

/// Inputs and multi-target labels, optionally standardized.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Tensor,
    pub input_norm: Option<Standardizer>,
    pub label_norm: Option<Standardizer>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Tensor) -> Result<Self> {
        if features.rows() != labels.rows() {
            return Err(DsclError::Data(format!(
                "{} feature rows but {} label rows",
                features.rows(),
                labels.rows()
            )));
        }
        if !labels.is_finite() {
            return Err(DsclError::Data("labels contain non-finite values".into()));
        }
        Ok(Self {
            features,
            labels,
            input_norm: None,
            label_norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Standardizes inputs and labels in place, remembering the transforms.
    pub fn standardize(mut self) -> Self {
        let xs = Standardizer::fit(&self.features);
        let ys = Standardizer::fit(&self.labels);
        self.features = xs.transform(&self.features);
        self.labels = ys.transform(&self.labels);
        self.input_norm = Some(xs);
        self.label_norm = Some(ys);
        self
    }

    /// Labels in original units.
    pub fn raw_labels(&self, labels: &Tensor) -> Tensor {
        match &self.label_norm {
            Some(s) => s.inverse(labels),
            None => labels.clone(),
        }
    }
}

/// Rows `idx` of a matrix.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// `y = W·x + ε`.
    LinearMix,
    /// `y_m = sin(a_mᵀx) + ε`.
    NonlinearSine,
    /// `y₂ = −y₁ + ε`, with `y₁ = sin(aᵀx)`; a third target, if any, is an
    /// independent sine.
    AntiCorrelated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub num_samples: usize,
    pub input_dim: usize,
    pub num_targets: usize,
    pub generator: Generator,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Standard deviation of the projections `a_mᵀx` feeding the sine targets.
pub const SINE_FREQUENCY: f64 = 2.0;

/// Draws inputs `x ~ N(0, I)` and labels from the configured generator.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<Dataset> {
    if cfg.num_samples == 0 || cfg.input_dim == 0 {
        return Err(DsclError::Config("synthetic task needs samples and inputs".into()));
    }
    if !(2..=3).contains(&cfg.num_targets) {
        return Err(DsclError::Config(format!(
            "synthetic tasks support 2 or 3 targets, got {}",
            cfg.num_targets
        )));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(DsclError::Config("noise_std must be finite and ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d, m) = (cfg.num_samples, cfg.input_dim, cfg.num_targets);
    let scale = match cfg.generator {
        Generator::LinearMix => 1.0,
        _ => SINE_FREQUENCY,
    } / (d as f64).sqrt();
    let proj: Vec<f64> = (0..m * d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            scale * v
        })
        .collect();
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| DsclError::Config(e.to_string()))?;
    let dot = |row: usize, k: usize| -> f64 {
        (0..d).map(|j| proj[k * d + j] * x[row * d + j]).sum()
    };
    let mut y = Vec::with_capacity(n * m);
    for i in 0..n {
        match cfg.generator {
            Generator::LinearMix => {
                for k in 0..m {
                    y.push(dot(i, k));
                }
            }
            Generator::NonlinearSine => {
                for k in 0..m {
                    y.push(dot(i, k).sin());
                }
            }
            Generator::AntiCorrelated => {
                let y1 = dot(i, 0).sin();
                y.push(y1);
                y.push(-y1);
                if m == 3 {
                    y.push(dot(i, 2).sin());
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        for v in &mut y {
            *v += noise.sample(&mut rng);
        }
    }
    Dataset::new(Tensor::matrix(n, d, x)?, Tensor::matrix(n, m, y)?)
}

/// Column names from the header row of a CSV file.
pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

/// Reads named input and target columns from a CSV file with a header row.
pub fn load_tabular(
    path: &Path,
    input_cols: &[String],
    target_cols: &[String],
    normalize: bool,
) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &String| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DsclError::Data(format!("column `{name}` not found in {}", path.display())))
    };
    let xi: Vec<usize> = input_cols.iter().map(find).collect::<Result<_>>()?;
    let yi: Vec<usize> = target_cols.iter().map(find).collect::<Result<_>>()?;
    if xi.is_empty() || yi.is_empty() {
        return Err(DsclError::Config("need at least one input and one target column".into()));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DsclError::Data(format!(
                    "row {} column `{}`: `{raw}` is not a finite number",
                    r + 1,
                    &headers[c]
                ))
            })
        };
        for &c in &xi {
            x.push(cell(c)?);
        }
        for &c in &yi {
            y.push(cell(c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DsclError::Data(format!("{} has no data rows", path.display())));
    }
    let ds = Dataset::new(
        Tensor::matrix(rows, xi.len(), x)?,
        Tensor::matrix(rows, yi.len(), y)?,
    )?;
    Ok(if normalize { ds.standardize() } else { ds })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub label_rate: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(label_rate: f64, seed: u64) -> Result<Self> {
        if !LABEL_RATES.iter().any(|&r| (r - label_rate).abs() < 1e-12) {
            return Err(DsclError::Config(format!(
                "label rate {label_rate} is not one of {LABEL_RATES:?}"
            )));
        }
        Ok(Self { label_rate, seed })
    }
}

/// Row indices of the three disjoint parts of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub test: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Labeled rows with their labels.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Tensor,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows whose labels are withheld.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    pub features: Tensor,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct DataSplit {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
    pub indices: SplitIndices,
}

/// Shuffles row indices, carves 20% for testing and labels `label_rate` of
/// the rest.
pub fn split_indices(rows: usize, spec: &SplitSpec, batch_size: usize) -> Result<SplitIndices> {
    if rows == 0 {
        return Err(DsclError::Data("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_test = (TEST_FRACTION * rows as f64).round() as usize;
    let rest = rows - n_test;
    let n_labeled = (spec.label_rate * rest as f64).round() as usize;
    if n_labeled < 2 * batch_size {
        return Err(DsclError::Config(format!(
            "label rate {} leaves {n_labeled} labeled rows, fewer than two batches of {batch_size}",
            spec.label_rate
        )));
    }
    let test = idx[..n_test].to_vec();
    let labeled = idx[n_test..n_test + n_labeled].to_vec();
    let unlabeled = idx[n_test + n_labeled..].to_vec();
    Ok(SplitIndices {
        test,
        labeled,
        unlabeled,
    })
}

pub fn split(data: &Dataset, spec: &SplitSpec, batch_size: usize) -> Result<DataSplit> {
    let indices = split_indices(data.len(), spec, batch_size)?;
    Ok(DataSplit {
        labeled: LabeledSet {
            features: gather_rows(&data.features, &indices.labeled),
            labels: gather_rows(&data.labels, &indices.labeled),
        },
        unlabeled: UnlabeledSet {
            features: gather_rows(&data.features, &indices.unlabeled),
        },
        test: LabeledSet {
            features: gather_rows(&data.features, &indices.test),
            labels: gather_rows(&data.labels, &indices.test),
        },
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::pearson;

    fn cfg(generator: Generator, noise: f64) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            num_samples: 500,
            input_dim: 8,
            num_targets: 2,
            generator,
            noise_std: noise,
            seed: 11,
        }
    }

    #[test]
    fn noiseless_linear_mix_is_reproducible() {
        let a = generate_synthetic(&cfg(Generator::LinearMix, 0.0)).unwrap();
        let b = generate_synthetic(&cfg(Generator::LinearMix, 0.0)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn anti_correlated_components() {
        let d = generate_synthetic(&cfg(Generator::AntiCorrelated, 0.0)).unwrap();
        let r = pearson(&d.labels.column(0), &d.labels.column(1)).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_round_trip() {
        let d = generate_synthetic(&cfg(Generator::NonlinearSine, 0.1)).unwrap();
        let raw = d.labels.clone();
        let s = d.standardize();
        let back = s.raw_labels(&s.labels);
        assert!(back.max_abs_diff(&raw) < 1e-10);
    }

    #[test]
    fn split_arithmetic_and_partition() {
        let spec = SplitSpec::new(0.10, 4).unwrap();
        let s = split_indices(1000, &spec, 16).unwrap();
        assert_eq!((s.test.len(), s.labeled.len(), s.unlabeled.len()), (200, 80, 720));
        let mut all: Vec<usize> = s.test.iter().chain(&s.labeled).chain(&s.unlabeled).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, split_indices(1000, &spec, 16).unwrap());
    }

    #[test]
    fn split_rejects_too_few_labels() {
        let spec = SplitSpec::new(0.01, 0).unwrap();
        assert!(matches!(split_indices(1000, &spec, 32), Err(DsclError::Config(_))));
        assert!(SplitSpec::new(0.3, 0).is_err());
    }
}
