//! Regression metrics: MAE, RMSE, Pearson and Spearman per target, plus the
//! mean angular error used for gaze directions.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, DsclError, Result};
use crate::tensor::Tensor;

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_target: Vec<TargetMetrics>,
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub angular_error_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_digest: Option<String>,
    /// Targets whose correlation was undefined (zero variance).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub diagnostics: Vec<String>,
}

/// Scores `K×M` predictions against labels in the same (de-normalized) units.
pub fn metric_suite(pred: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    if pred.dims2() != truth.dims2() || pred.shape().len() != 2 {
        return dim_err(format!(
            "predictions {:?} and labels {:?} differ",
            pred.shape(),
            truth.shape()
        ));
    }
    let (k, m) = pred.dims2();
    if k < 2 {
        return Err(DsclError::Contract("metrics need at least two rows".into()));
    }
    let mut per_target = Vec::with_capacity(m);
    let mut diagnostics = Vec::new();
    for j in 0..m {
        let (p, t) = (pred.column(j), truth.column(j));
        let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / k as f64;
        let mse = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k as f64;
        let pr = pearson(&p, &t);
        let sr = spearman(&p, &t);
        if pr.is_none() {
            diagnostics.push(format!("target {j}: zero variance, correlation undefined"));
        }
        per_target.push(TargetMetrics {
            mae,
            rmse: mse.sqrt(),
            pearson: pr,
            spearman: sr,
        });
    }
    let mean = |f: &dyn Fn(&TargetMetrics) -> f64| per_target.iter().map(f).sum::<f64>() / m as f64;
    let mean_opt = |f: &dyn Fn(&TargetMetrics) -> Option<f64>| {
        per_target
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / m as f64)
    };
    Ok(MetricReport {
        mae: mean(&|t| t.mae),
        rmse: mean(&|t| t.rmse),
        pearson: mean_opt(&|t| t.pearson),
        spearman: mean_opt(&|t| t.spearman),
        per_target,
        angular_error_deg: None,
        seed: None,
        config_digest: None,
        diagnostics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngularMode {
    /// Pitch and yaw in radians.
    Euler2,
    /// Unnormalized 3-D direction.
    Vec3,
}

/// Unit gaze vector of a pitch/yaw pair.
pub fn gaze_vector(pitch: f64, yaw: f64) -> [f64; 3] {
    [pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos()]
}

/// Mean angle in degrees between predicted and true directions.
pub fn angular_error(pred: &Tensor, truth: &Tensor, mode: AngularMode) -> Result<f64> {
    if pred.dims2() != truth.dims2() {
        return dim_err("angular error needs equal shapes");
    }
    let (k, m) = pred.dims2();
    let want = match mode {
        AngularMode::Euler2 => 2,
        AngularMode::Vec3 => 3,
    };
    if m != want || k == 0 {
        return dim_err(format!("{mode:?} needs {want} columns, got {m}"));
    }
    let unit = |row: &[f64], i: usize| -> Result<[f64; 3]> {
        match mode {
            AngularMode::Euler2 => Ok(gaze_vector(row[0], row[1])),
            AngularMode::Vec3 => {
                let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
                if n == 0.0 {
                    return Err(DsclError::Data(format!("row {i} has a zero-length direction")));
                }
                Ok([row[0] / n, row[1] / n, row[2] / n])
            }
        }
    };
    let mut total = 0.0;
    for i in 0..k {
        let a = unit(pred.row(i), i)?;
        let b = unit(truth.row(i), i)?;
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        total += dot.acos().to_degrees();
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = Tensor::from_rows(&[[1.0, 0.0], [2.0, 5.0], [3.0, -1.0]]);
        let r = metric_suite(&y, &y).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert!((r.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.spearman.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_predictions_anticorrelate() {
        let y = Tensor::from_rows(&[[1.0], [2.0], [4.0], [3.5]]);
        let r = metric_suite(&y.map(|v| -v), &y).unwrap();
        assert!((r.pearson.unwrap() + 1.0).abs() < 1e-12);
        assert!((r.spearman.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_has_undefined_correlation() {
        let p = Tensor::from_rows(&[[1.0], [1.0], [1.0]]);
        let y = Tensor::from_rows(&[[1.0], [2.0], [3.0]]);
        let r = metric_suite(&p, &y).unwrap();
        assert!(r.pearson.is_none());
        assert_eq!(r.diagnostics.len(), 1);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn angular_examples() {
        let a = Tensor::from_rows(&[[0.0, 0.0]]);
        assert_eq!(angular_error(&a, &a, AngularMode::Euler2).unwrap(), 0.0);
        let b = Tensor::from_rows(&[[0.0, std::f64::consts::FRAC_PI_2]]);
        assert!((angular_error(&a, &b, AngularMode::Euler2).unwrap() - 90.0).abs() < 1e-9);
        let v = Tensor::from_rows(&[[1.0, 2.0, -2.0]]);
        assert!((angular_error(&v, &v.map(|x| -x), AngularMode::Vec3).unwrap() - 180.0).abs() < 1e-9);
        let z = Tensor::from_rows(&[[0.0, 0.0, 0.0]]);
        assert!(angular_error(&z, &v, AngularMode::Vec3).is_err());
    }
}
