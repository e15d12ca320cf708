//! Dataset ingestion, generators and splits.

use std::io::Write;

use dscl::data::{generate_synthetic, load_tabular, split, split_indices, Generator, SplitSpec, SyntheticTaskConfig};
use dscl::eval::pearson;
use dscl::DsclError;

fn csv_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn three_row_file_parses_exactly() {
    let f = csv_file("a,b,t1,t2\n1.5,-2,10,0.25\n0,3e2,11,-1\n7,8,12,4\n");
    let ds = load_tabular(f.path(), &names(&["b", "a"]), &names(&["t2", "t1"]), false).unwrap();
    assert_eq!(ds.features.data(), &[-2.0, 1.5, 300.0, 0.0, 8.0, 7.0]);
    assert_eq!(ds.labels.data(), &[0.25, 10.0, -1.0, 11.0, 4.0, 12.0]);
    assert!(ds.input_norm.is_none());
}

#[test]
fn normalized_columns_are_standard_and_invert() {
    let mut text = String::from("x1,x2,y1,y2\n");
    for i in 0..50 {
        let v = i as f64;
        text += &format!("{},{},{},{}\n", v * 0.3 - 2.0, (v * 1.7).sin() * 40.0, v * v, 1000.0 + v.cos());
    }
    let f = csv_file(&text);
    let raw = load_tabular(f.path(), &names(&["x1", "x2"]), &names(&["y1", "y2"]), false).unwrap();
    let ds = load_tabular(f.path(), &names(&["x1", "x2"]), &names(&["y1", "y2"]), true).unwrap();
    for t in [&ds.features, &ds.labels] {
        for j in 0..2 {
            let c = t.column(j);
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let std = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-10, "std {std}");
        }
    }
    let back = ds.raw_labels(&ds.labels);
    for (a, b) in back.data().iter().zip(raw.labels.data()) {
        assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn missing_column_is_named() {
    let f = csv_file("a,b\n1,2\n");
    let err = load_tabular(f.path(), &names(&["a"]), &names(&["torque"]), false).unwrap_err();
    assert!(matches!(err, DsclError::Data(_)));
    assert!(err.to_string().contains("torque"), "{err}");
}

#[test]
fn non_numeric_cell_reports_row_and_column() {
    let f = csv_file("a,b\n1,2\n3,oops\n");
    let err = load_tabular(f.path(), &names(&["a"]), &names(&["b"]), false).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("row 2") && msg.contains("`b`") && msg.contains("oops"), "{msg}");
}

fn synthetic(generator: Generator, n: usize, noise: f64) -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        num_samples: n,
        input_dim: 8,
        num_targets: 2,
        generator,
        noise_std: noise,
        seed: 21,
    }
}

#[test]
fn noiseless_anti_correlated_targets_are_perfectly_opposed() {
    let ds = generate_synthetic(&synthetic(Generator::AntiCorrelated, 2000, 0.0)).unwrap();
    let r = pearson(&ds.labels.column(0), &ds.labels.column(1)).unwrap();
    assert!((r + 1.0).abs() < 1e-12, "{r}");
}

#[test]
fn sine_labels_stay_within_three_sigma_of_the_unit_band() {
    let sigma = 0.1;
    let ds = generate_synthetic(&synthetic(Generator::NonlinearSine, 100_000, sigma)).unwrap();
    let bound = 1.0 + 3.0 * sigma;
    let inside = ds.labels.data().iter().filter(|v| v.abs() <= bound).count();
    // A Gaussian stays within 3σ 99.73% of the time, and |sin| ≤ 1 only helps.
    assert!(inside as f64 / ds.labels.len() as f64 >= 0.997, "{inside}");
}

#[test]
fn split_counts_partition_and_determinism() {
    let spec = SplitSpec::new(0.10, 4).unwrap();
    let a = split_indices(1000, &spec, 32).unwrap();
    assert_eq!((a.test.len(), a.labeled.len(), a.unlabeled.len()), (200, 80, 720));
    assert_eq!(a, split_indices(1000, &spec, 32).unwrap());
    let mut all: Vec<usize> = a.test.iter().chain(&a.labeled).chain(&a.unlabeled).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert_ne!(a, split_indices(1000, &SplitSpec::new(0.10, 5).unwrap(), 32).unwrap());
}

#[test]
fn split_gathers_matching_rows() {
    let ds = generate_synthetic(&synthetic(Generator::LinearMix, 300, 0.0)).unwrap();
    let s = split(&ds, &SplitSpec::new(0.2, 1).unwrap(), 8).unwrap();
    for (k, &i) in s.indices.labeled.iter().enumerate() {
        assert_eq!(s.labeled.features.row(k), ds.features.row(i));
        assert_eq!(s.labeled.labels.row(k), ds.labels.row(i));
    }
    assert_eq!(s.unlabeled.len(), s.indices.unlabeled.len());
}

#[test]
fn too_few_labels_is_a_configuration_error() {
    let err = split_indices(100, &SplitSpec::new(0.05, 0).unwrap(), 32).unwrap_err();
    assert!(matches!(err, DsclError::Config(_)));
    assert!(SplitSpec::new(0.3, 0).is_err());
}
