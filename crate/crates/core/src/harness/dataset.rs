//! Synthetic Gaussian-mixture data and CSV ingestion/export.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// A train/test pair over the same classes and features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub train_fraction: f64,
    /// Class `c` is centred at `separation * e_c`.
    pub separation: f64,
    pub noise_std: f64,
}

/// Number of a class's samples that go to the training side.
fn train_count(n: usize, fraction: f64) -> usize {
    let k = (n as f64 * fraction).round() as usize;
    if n < 2 {
        n
    } else {
        k.clamp(1, n - 1)
    }
}

/// Draws exactly `samples_per_class` points per class and splits each class
/// into train and test by `train_fraction`.
pub fn synth_dataset(spec: &MixtureSpec, seed: u64) -> Result<SplitDataset> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 {
        return Err(Error::config("num_classes", "synthetic data needs classes and samples"));
    }
    if spec.input_dim < spec.num_classes {
        return Err(Error::config("input_dim", "must be at least num_classes"));
    }
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::config("noise_std", e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let d = spec.input_dim;
    let per_train = train_count(spec.samples_per_class, spec.train_fraction);
    let (mut trf, mut trl, mut tef, mut tel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            let (feats, labels) = if i < per_train {
                (&mut trf, &mut trl)
            } else {
                (&mut tef, &mut tel)
            };
            for j in 0..d {
                let centre = if j == c { spec.separation } else { 0.0 };
                feats.push(centre + noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Ok(SplitDataset {
        train: Dataset::new(d, spec.num_classes, trf, trl)?,
        test: Dataset::new(d, spec.num_classes, tef, tel)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CsvOptions {
    /// Skip the first record.
    pub has_header: bool,
    /// Z-score every feature column (population std; constant columns are only centred).
    pub standardize: bool,
    /// Class count; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

/// Reads rows of `feature_1,...,feature_d,label`.
pub fn read_csv<R: Read>(input: R, origin: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        if rec.len() < 2 {
            return Err(bad(format!("expected features and a label, found {} fields", rec.len())));
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(bad(format!("expected {w} fields, found {}", rec.len())))
            }
            _ => {}
        }
        for (j, field) in rec.iter().take(rec.len() - 1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("column {}: `{field}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(bad(format!("column {}: non-finite value", j + 1)));
            }
            feats.push(v);
        }
        let raw = &rec[rec.len() - 1];
        let label: usize = raw
            .parse()
            .map_err(|_| bad(format!("label `{raw}` is not a non-negative integer")))?;
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        message: "no data rows".into(),
    })?;
    let dim = width - 1;
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let num_classes = match opts.num_classes {
        Some(c) if c <= max_label => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                message: format!("label {max_label} outside {c} classes"),
            })
        }
        Some(c) => c,
        None => max_label + 1,
    };
    if opts.standardize {
        standardize(&mut feats, dim);
    }
    Dataset::new(dim, num_classes, feats, labels)
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), path, opts)
}

fn standardize(feats: &mut [f64], dim: usize) {
    let n = (feats.len() / dim) as f64;
    for j in 0..dim {
        let mean = feats.iter().skip(j).step_by(dim).sum::<f64>() / n;
        let var = feats.iter().skip(j).step_by(dim).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in feats.iter_mut().skip(j).step_by(dim) {
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
}

/// Writes `features...,label` rows without a header. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut rec: Vec<String> = Vec::with_capacity(dataset.input_dim() + 1);
    for i in 0..dataset.len() {
        rec.clear();
        rec.extend(dataset.row(i).iter().map(|v| v.to_string()));
        rec.push(dataset.label(i).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("dataset csv", e))?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

/// Stratified shuffle split; every class with at least two rows lands on both sides.
pub fn split_train_test(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitDataset> {
    let mut rng = rng_from_seed(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut rows in by_class {
        rows.shuffle(&mut rng);
        let k = train_count(rows.len(), train_fraction);
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if test.is_empty() {
        return Err(Error::invalid("test split is empty; need more rows per class"));
    }
    Ok(SplitDataset {
        train: dataset.subset(&train),
        test: dataset.subset(&test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MixtureSpec {
        MixtureSpec {
            num_classes: 3,
            input_dim: 4,
            samples_per_class: 10,
            train_fraction: 0.8,
            separation: 5.0,
            noise_std: 0.1,
        }
    }

    #[test]
    fn synthetic_counts_are_exact() {
        let s = synth_dataset(&spec(), 1).unwrap();
        assert_eq!(s.train.class_counts(), vec![8, 8, 8]);
        assert_eq!(s.test.class_counts(), vec![2, 2, 2]);
        assert_eq!(s, synth_dataset(&spec(), 1).unwrap());
        // class means sit near separation * e_c
        let rows: Vec<&[f64]> = (0..s.train.len()).filter(|&i| s.train.label(i) == 1).map(|i| s.train.row(i)).collect();
        let m1 = rows.iter().map(|r| r[1]).sum::<f64>() / rows.len() as f64;
        assert!((m1 - 5.0).abs() < 0.2);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = synth_dataset(&spec(), 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&s.train, &mut buf).unwrap();
        let back = read_csv(&buf[..], Path::new("mem"), &CsvOptions::default()).unwrap();
        assert_eq!(back, s.train);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "1.0,2.0,0\n1.0,x,1\n";
        match read_csv(text.as_bytes(), Path::new("f.csv"), &CsvOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = "a,b,label\n1.0,2.0,0\n1.0,2.0\n";
        let opts = CsvOptions {
            has_header: true,
            ..Default::default()
        };
        match read_csv(text.as_bytes(), Path::new("f.csv"), &opts) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_csv("1.0,-1\n".as_bytes(), Path::new("f"), &CsvOptions::default()).is_err());
    }

    #[test]
    fn standardize_centres_and_scales() {
        let text = "1,10,0\n3,10,1\n5,10,0\n";
        let opts = CsvOptions {
            standardize: true,
            ..Default::default()
        };
        let d = read_csv(text.as_bytes(), Path::new("f"), &opts).unwrap();
        let col0: Vec<f64> = (0..3).map(|i| d.row(i)[0]).collect();
        let sd = (8.0f64 / 3.0).sqrt();
        assert_eq!(col0, vec![-2.0 / sd, 0.0, 2.0 / sd]);
        assert!((0..3).all(|i| d.row(i)[1] == 0.0));
        assert_eq!(d.num_classes(), 2);
    }

    #[test]
    fn stratified_split() {
        let s = synth_dataset(&spec(), 3).unwrap();
        let all = Dataset::concat([&s.train, &s.test]).unwrap();
        let split = split_train_test(&all, 0.5, 9).unwrap();
        assert_eq!(split.train.class_counts(), vec![5, 5, 5]);
        assert_eq!(split.test.class_counts(), vec![5, 5, 5]);
    }
}
