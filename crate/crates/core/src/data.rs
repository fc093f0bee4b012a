//! Flow-feature ingestion, synthetic data, splitting, scaling and sharding.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::scalar::Scalar;
use crate::seed::rng_from;

pub const NORMAL: usize = 0;
pub const ATTACK: usize = 1;

/// Binary-labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Batch<T>,
    pub feature_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Batch<T>, feature_names: Vec<String>) -> Result<Self> {
        if feature_names.len() != samples.n_features() {
            return Err(Error::Dimension(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                samples.n_features()
            )));
        }
        if samples.labels().iter().any(|&l| l > ATTACK) {
            return Err(Error::invalid("labels must be 0 (normal) or 1 (attack)"));
        }
        if samples.features().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(Dataset {
            samples,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.samples.n_features()
    }

    pub fn labels(&self) -> &[usize] {
        self.samples.labels()
    }

    pub fn attack_count(&self) -> usize {
        self.labels().iter().filter(|&&l| l == ATTACK).count()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset<T> {
        Dataset {
            samples: self.samples.gather(rows),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Column handling for flow CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub drop_columns: Vec<String>,
    /// Label values mapped to class 0; everything else is an attack.
    pub benign_labels: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "Label".to_owned(),
            drop_columns: Vec::new(),
            benign_labels: vec!["BENIGN".to_owned()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    /// Rows discarded for holding a NaN, infinite or empty cell.
    pub rows_dropped: usize,
    pub columns_dropped: Vec<String>,
    /// Requested drop columns absent from the header.
    pub columns_missing: Vec<String>,
}

struct Header {
    names: Vec<String>,
    label: usize,
    keep: Vec<usize>,
}

fn parse_header(path: &Path, record: &csv::ByteRecord, schema: &CsvSchema, report: &mut LoadReport) -> Result<Header> {
    let names: Vec<String> = record
        .iter()
        .map(|h| String::from_utf8_lossy(h).trim().to_owned())
        .collect();
    let label_key = schema.label_column.trim();
    let label = names
        .iter()
        .position(|n| n == label_key)
        .ok_or_else(|| Error::Data {
            path: path.to_owned(),
            message: format!("label column `{label_key}` not found in header"),
        })?;
    let drop: HashSet<&str> = schema.drop_columns.iter().map(|c| c.trim()).collect();
    for name in &drop {
        if names.iter().any(|n| n == name) {
            report.columns_dropped.push((*name).to_owned());
        } else {
            report.columns_missing.push((*name).to_owned());
        }
    }
    report.columns_dropped.sort();
    report.columns_missing.sort();
    let keep = (0..names.len())
        .filter(|&i| i != label && !drop.contains(names[i].as_str()))
        .collect();
    Ok(Header { names, label, keep })
}

/// Reads one flow CSV (header row, comma separated).
///
/// Header names and cells are trimmed. Rows with a NaN, infinite or empty
/// feature cell are dropped and counted; any other non-numeric cell is an
/// error naming the row and column.
pub fn load_csv<T: Scalar>(path: &Path, schema: &CsvSchema) -> Result<(Dataset<T>, LoadReport)> {
    load_csv_files(&[path.to_owned()], schema)
}

/// Concatenates several flow CSVs that share one header.
pub fn load_csv_files<T: Scalar>(paths: &[PathBuf], schema: &CsvSchema) -> Result<(Dataset<T>, LoadReport)> {
    if paths.is_empty() {
        return Err(Error::invalid("no CSV files given"));
    }
    let mut report = LoadReport::default();
    let mut header: Option<Header> = None;
    let mut samples: Option<Batch<T>> = None;
    let benign: HashSet<&str> = schema.benign_labels.iter().map(|s| s.trim()).collect();
    for path in paths {
        let file = File::open(path).map_err(|source| Error::Data {
            path: path.clone(),
            message: format!("cannot open: {source}"),
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_reader(std::io::BufReader::new(file));
        let mut records = reader.byte_records();
        let head = match records.next() {
            Some(r) => r.map_err(|source| Error::Csv { path: path.clone(), source })?,
            None => {
                return Err(Error::Data {
                    path: path.clone(),
                    message: "file is empty".to_owned(),
                })
            }
        };
        let mut file_report = LoadReport::default();
        let parsed = parse_header(path, &head, schema, &mut file_report)?;
        match &header {
            Some(h) if h.names != parsed.names => {
                return Err(Error::Data {
                    path: path.clone(),
                    message: "header differs from the first file".to_owned(),
                })
            }
            Some(_) => {}
            None => {
                report.columns_dropped = file_report.columns_dropped;
                report.columns_missing = file_report.columns_missing;
                samples = Some(Batch::empty(parsed.keep.len().max(1)));
                header = Some(parsed);
            }
        }
        let h = header.as_ref().expect("header set above");
        if h.keep.is_empty() {
            return Err(Error::Data {
                path: path.clone(),
                message: "no feature columns left after dropping".to_owned(),
            });
        }
        let batch = samples.as_mut().expect("batch set with header");
        let mut row = Vec::with_capacity(h.keep.len());
        for (i, record) in records.enumerate() {
            let record = record.map_err(|source| Error::Csv { path: path.clone(), source })?;
            // Header is line 1.
            let line = i + 2;
            report.rows_read += 1;
            row.clear();
            let mut usable = true;
            for &col in &h.keep {
                let raw = record.get(col).unwrap_or_default();
                let cell = String::from_utf8_lossy(raw);
                let cell = cell.trim();
                if cell.is_empty() {
                    usable = false;
                    continue;
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(T::of(v)),
                    Ok(_) => usable = false,
                    Err(_) => {
                        return Err(Error::Data {
                            path: path.clone(),
                            message: format!(
                                "non-numeric value `{cell}` in column `{}` at line {line}",
                                h.names[col]
                            ),
                        })
                    }
                }
            }
            if !usable || row.iter().any(|v| !v.is_finite()) {
                report.rows_dropped += 1;
                continue;
            }
            let label = String::from_utf8_lossy(record.get(h.label).unwrap_or_default());
            let class = if benign.contains(label.trim()) { NORMAL } else { ATTACK };
            batch.push_row(&row, class);
        }
    }
    let header = header.expect("at least one file");
    let samples = samples.expect("batch set with header");
    if samples.is_empty() {
        return Err(Error::Data {
            path: paths[0].clone(),
            message: format!("no usable rows ({} read, {} dropped)", report.rows_read, report.rows_dropped),
        });
    }
    let names = header.keep.iter().map(|&i| header.names[i].clone()).collect();
    Ok((Dataset::new(samples, names)?, report))
}

/// Writes a dataset as CSV with a trailing `Label` column of 0/1.
pub fn write_csv<T: Scalar>(dataset: &Dataset<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "{},Label", dataset.feature_names.join(","))?;
        for i in 0..dataset.len() {
            let row = dataset.samples.row(i);
            for v in row {
                write!(out, "{v},")?;
            }
            writeln!(out, "{}", dataset.labels()[i])?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Seeded shuffle, then the first `floor(train_fraction * N)` rows go to training.
pub fn split<T: Scalar>(dataset: &Dataset<T>, train_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    check_fraction(train_fraction)?;
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "{n} rows cannot be split {train_fraction} / {} with both sides non-empty",
            1.0 - train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let (train, validation) = order.split_at(n_train);
    Ok((dataset.subset(train), dataset.subset(validation)))
}

/// Undersamples the majority class to the minority count, then splits each
/// class separately so both sides hold equal numbers of normal and attack rows.
pub fn split_balanced<T: Scalar>(
    dataset: &Dataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    check_fraction(train_fraction)?;
    let mut rng = rng_from(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let per_class = by_class[0].len().min(by_class[1].len());
    let n_train = (train_fraction * per_class as f64).floor() as usize;
    if n_train == 0 || n_train == per_class {
        return Err(Error::invalid(format!(
            "minority class has {per_class} rows; too few for a balanced split"
        )));
    }
    let mut train = Vec::with_capacity(2 * n_train);
    let mut validation = Vec::with_capacity(2 * (per_class - n_train));
    for rows in by_class.iter_mut() {
        rows.shuffle(&mut rng);
        train.extend_from_slice(&rows[..n_train]);
        validation.extend_from_slice(&rows[n_train..per_class]);
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok((dataset.subset(&train), dataset.subset(&validation)))
}

fn check_fraction(train_fraction: f64) -> Result<()> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    Ok(())
}

/// Per-feature minimum and maximum of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxTable<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
}

impl<T: Scalar> MinMaxTable<T> {
    pub fn fit(train: &Dataset<T>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("cannot fit scaling on an empty training set"));
        }
        let width = train.n_features();
        let mut min = train.samples.row(0).to_vec();
        let mut max = min.clone();
        for row in train.samples.features().chunks_exact(width) {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(MinMaxTable { min, max })
    }

    /// Scales to [0, 1], clamping out-of-range values; constant features become 0.
    pub fn apply(&self, dataset: &mut Dataset<T>) -> Result<()> {
        let width = self.min.len();
        if dataset.n_features() != width {
            return Err(Error::Dimension(format!(
                "scaling table has {width} features, dataset {}",
                dataset.n_features()
            )));
        }
        for row in dataset.samples.features_mut().chunks_exact_mut(width) {
            for (j, v) in row.iter_mut().enumerate() {
                let span = self.max[j] - self.min[j];
                *v = if span > T::zero() {
                    ((*v - self.min[j]) / span).max(T::zero()).min(T::one())
                } else {
                    T::zero()
                };
            }
        }
        Ok(())
    }
}

/// Min-max scaling fitted on `train` alone and applied to `train` and `others`.
pub fn normalize<T: Scalar>(
    train: &Dataset<T>,
    others: &[Dataset<T>],
) -> Result<(Dataset<T>, Vec<Dataset<T>>, MinMaxTable<T>)> {
    let table = MinMaxTable::fit(train)?;
    let mut scaled_train = train.clone();
    table.apply(&mut scaled_train)?;
    let scaled_others = others
        .iter()
        .map(|d| {
            let mut d = d.clone();
            table.apply(&mut d).map(|_| d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scaled_train, scaled_others, table))
}

/// A participant's private slice of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard<T> {
    pub owner_id: usize,
    pub samples: Dataset<T>,
    /// Row indices into the training set this shard was cut from.
    pub source_rows: Vec<usize>,
}

impl<T: Scalar> Shard<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Seeded shuffle cut into `n_participants` equal contiguous slices; the
/// `len % n_participants` leftover rows are discarded.
pub fn shard_dataset<T: Scalar>(train: &Dataset<T>, n_participants: usize, seed: u64) -> Result<Vec<Shard<T>>> {
    if n_participants == 0 {
        return Err(Error::invalid("at least one participant is required"));
    }
    if n_participants > train.len() {
        return Err(Error::invalid(format!(
            "{n_participants} participants but only {} training rows",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let size = train.len() / n_participants;
    Ok(order
        .chunks_exact(size)
        .take(n_participants)
        .enumerate()
        .map(|(owner_id, rows)| Shard {
            owner_id,
            samples: train.subset(rows),
            source_rows: rows.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_features: usize,
    /// Fraction of attack rows.
    pub class_ratio: f64,
    /// Euclidean distance between the two cluster means.
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.class_ratio > 0.0 && self.class_ratio < 1.0) {
            return Err(Error::invalid("class_ratio must lie in (0, 1)"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::invalid("separation must be positive"));
        }
        if self.n_samples < 2 || self.n_features == 0 {
            return Err(Error::invalid("need at least 2 samples and 1 feature"));
        }
        Ok(())
    }

    pub fn attack_count(&self) -> usize {
        (self.class_ratio * self.n_samples as f64).round() as usize
    }
}

/// Two unit-covariance Gaussian clusters: normal traffic around the origin,
/// attacks around a mean at distance `separation` along the all-ones diagonal.
pub fn synth_generate<T: Scalar>(spec: &SynthSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = rng_from(spec.seed);
    let n_attack = spec.attack_count();
    let mut labels: Vec<usize> = (0..spec.n_samples)
        .map(|i| if i < n_attack { ATTACK } else { NORMAL })
        .collect();
    labels.shuffle(&mut rng);
    let offset = spec.separation / (spec.n_features as f64).sqrt();
    let mut features = Vec::with_capacity(spec.n_samples * spec.n_features);
    for &label in &labels {
        let shift = if label == ATTACK { offset } else { 0.0 };
        for _ in 0..spec.n_features {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(T::of(z + shift));
        }
    }
    let names = (0..spec.n_features).map(|j| format!("f{j}")).collect();
    Dataset::new(Batch::new(features, spec.n_features, labels)?, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> Dataset<f64> {
        let features = (0..n).map(|i| i as f64).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::new(Batch::new(features, 1, labels).unwrap(), vec!["x".into()]).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_drops_infinite_rows_and_columns() {
        let f = write_tmp(
            " Source IP, Flow Bytes/s, Fwd Packets, Label\n\
             10.0.0.1,1.5,3,BENIGN\n\
             10.0.0.2,Infinity,4,DDoS\n\
             10.0.0.3,2.5,5,PortScan\n\
             10.0.0.4,0.5,6, BENIGN\n",
        );
        let schema = CsvSchema {
            drop_columns: vec!["Source IP".into()],
            ..CsvSchema::default()
        };
        let (ds, report) = load_csv::<f64>(f.path(), &schema).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(report.rows_read, 4);
        assert_eq!(ds.feature_names, vec!["Flow Bytes/s", "Fwd Packets"]);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.samples.row(1), &[2.5, 5.0]);
    }

    #[test]
    fn csv_errors_name_the_problem() {
        let f = write_tmp("a,b\n1,x\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("`Label`"), "{err}");

        let f = write_tmp("a,Label\n1,BENIGN\nabc,DoS\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`a`") && msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        let f = write_tmp("a,Label\nNaN,BENIGN\n");
        assert!(load_csv::<f64>(f.path(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = small(10);
        let (train, val) = split(&ds, 0.7, 3).unwrap();
        assert_eq!((train.len(), val.len()), (7, 3));
        let mut all: Vec<f64> = train.samples.features().iter().chain(val.samples.features()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(split(&ds, 0.7, 3).unwrap(), (train, val));
        assert!(split(&small(1), 0.7, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn balanced_split_has_equal_classes() {
        let spec = SynthSpec { n_samples: 500, n_features: 3, class_ratio: 0.2, separation: 2.0, seed: 1 };
        let ds: Dataset<f64> = synth_generate(&spec).unwrap();
        let (train, val) = split_balanced(&ds, 0.7, 9).unwrap();
        assert_eq!(train.attack_count() * 2, train.len());
        assert_eq!(val.attack_count() * 2, val.len());
        assert_eq!(train.len() + val.len(), 200);
    }

    #[test]
    fn normalization_rules() {
        let train = Dataset::new(
            Batch::new(vec![2.0, 7.0, 4.0, 7.0, 3.0, 7.0], 2, vec![0, 1, 0]).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let val = Dataset::new(
            Batch::new(vec![5.0, 1.0, 1.0, 7.0], 2, vec![0, 1]).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let (t, others, table) = normalize(&train, &[val]).unwrap();
        assert_eq!(t.samples.row(2), &[0.5, 0.0]);
        assert_eq!(others[0].samples.row(0), &[1.0, 0.0]);
        assert_eq!(others[0].samples.row(1), &[0.0, 0.0]);
        assert_eq!(table, MinMaxTable::fit(&train).unwrap());
    }

    #[test]
    fn sharding_discards_remainder() {
        let shards = shard_dataset(&small(103), 10, 4).unwrap();
        assert_eq!(shards.len(), 10);
        assert!(shards.iter().all(|s| s.len() == 10));
        let mut seen = HashSet::new();
        for s in &shards {
            for &r in &s.source_rows {
                assert!(seen.insert(r));
            }
        }
        assert_eq!(seen.len(), 100);
        assert!(shard_dataset(&small(10), 0, 0).is_err());
        assert!(shard_dataset(&small(3), 4, 0).is_err());
    }

    #[test]
    fn synthetic_ratio_and_determinism() {
        let spec = SynthSpec { n_samples: 1000, n_features: 4, class_ratio: 0.2, separation: 6.0, seed: 5 };
        let a: Dataset<f64> = synth_generate(&spec).unwrap();
        assert_eq!(a.attack_count(), 200);
        assert_eq!(a, synth_generate(&spec).unwrap());
        let bad = SynthSpec { class_ratio: 1.0, ..spec };
        assert!(synth_generate::<f64>(&bad).is_err());
    }
}
