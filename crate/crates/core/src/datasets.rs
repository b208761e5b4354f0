//! Labeled datasets: synthetic Gaussian mixtures, seeded splits and CSV I/O.
//!
//! CSV layout is `id,label,<p>_0,…,<p>_{k-1}` where the column prefix `<p>` is
//! `logit` for precomputed model outputs and `x` for raw input features. Floats
//! are written in shortest round-trip form, so a save/load cycle is bit-exact.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    RawInputs,
    PrecomputedLogits,
}

impl DatasetKind {
    fn column_prefix(self) -> &'static str {
        match self {
            DatasetKind::RawInputs => "x",
            DatasetKind::PrecomputedLogits => "logit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<String>,
    labels: Vec<usize>,
    rows: Vec<Vec<f64>>,
    kind: DatasetKind,
    num_classes: usize,
}

impl LabeledDataset {
    /// For `PrecomputedLogits` the class count is the row width; for raw inputs
    /// it must be given (or is taken as `max label + 1` when `None`).
    pub fn new(
        ids: Vec<String>,
        labels: Vec<usize>,
        rows: Vec<Vec<f64>>,
        kind: DatasetKind,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if ids.len() != labels.len() || labels.len() != rows.len() {
            return Err(Error::Dimension(format!(
                "{} ids, {} labels, {} rows",
                ids.len(),
                labels.len(),
                rows.len()
            )));
        }
        let width = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::Dimension(format!(
                "row {i} has {} values, expected {width}",
                rows[i].len()
            )));
        }
        let num_classes = match kind {
            DatasetKind::PrecomputedLogits => width,
            DatasetKind::RawInputs => {
                num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate id {dup:?}")));
        }
        Ok(Self {
            ids,
            labels,
            rows,
            kind,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature rows (raw inputs or logits depending on [`kind`](Self::kind)).
    pub fn features(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            kind: self.kind,
            num_classes: self.num_classes,
        }
    }

    /// Same ids and labels with new feature rows of the given kind.
    pub fn with_rows(&self, rows: Vec<Vec<f64>>, kind: DatasetKind) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.ids.clone(),
            self.labels.clone(),
            rows,
            kind,
            Some(self.num_classes),
        )
    }

    pub fn metadata(&self, seed: Option<u64>) -> DatasetMetadata {
        DatasetMetadata {
            n: self.len(),
            d_or_c: self.feature_dim(),
            kind: self.kind,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub n: usize,
    pub d_or_c: usize,
    pub kind: DatasetKind,
    pub seed: Option<u64>,
}

/// Class means of a regular simplex with pairwise distance `separation`,
/// embedded in the first `c - 1` coordinates of `R^d` via the Helmert basis.
pub fn simplex_means(d: usize, c: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if c < 2 || d < 2 {
        return Err(Error::Dimension(format!(
            "need c >= 2 and d >= 2, got c={c} d={d}"
        )));
    }
    if d + 1 < c {
        return Err(Error::Dimension(format!(
            "{c} equidistant means need d >= {}, got {d}",
            c - 1
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!("separation {separation}")));
    }
    // Vertices (s/√2)·e_j projected onto the orthonormal basis of 1^⊥:
    // h_k = (1,…,1,−k,0,…)/√(k(k+1)), k = 1..c−1.
    let scale = separation / std::f64::consts::SQRT_2;
    let means = (0..c)
        .map(|j| {
            let mut m = vec![0.0; d];
            for k in 1..c {
                let norm = ((k * (k + 1)) as f64).sqrt();
                let h = if j < k {
                    1.0
                } else if j == k {
                    -(k as f64)
                } else {
                    0.0
                };
                m[k - 1] = scale * h / norm;
            }
            m
        })
        .collect();
    Ok(means)
}

/// `n` i.i.d. rows: label uniform over `c` classes, features `N(μ_label, I_d)`.
pub fn make_gaussian_mixture(
    n: usize,
    d: usize,
    c: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let means = simplex_means(d, c, separation)?;
    let mut rng = rng::substream(seed, "gaussian-mixture");
    let mut labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..c);
        let x: Vec<f64> = means[y]
            .iter()
            .map(|m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        labels.push(y);
        rows.push(x);
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    LabeledDataset::new(ids, labels, rows, DatasetKind::RawInputs, Some(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub cal: f64,
    pub eval: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.cal, self.eval, self.test];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must lie in [0,1], got {fracs:?}"
            )));
        }
        if fracs.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "split fractions sum to more than 1: {fracs:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub cal: LabeledDataset,
    pub eval: LabeledDataset,
    pub test: LabeledDataset,
    /// Rows not assigned to any of the three parts (used for training).
    pub rest: LabeledDataset,
}

/// Index sets of a split: seeded permutation, then contiguous slices of
/// `floor(fraction · n)` rows in the order cal, eval, test, rest.
pub fn split_indices(n: usize, plan: &SplitPlan) -> Result<[Vec<usize>; 4]> {
    plan.validate()?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::substream(plan.seed, "split"));
    let sizes = [plan.cal, plan.eval, plan.test].map(|f| (f * n as f64 + 1e-9).floor() as usize);
    let mut start = 0;
    let mut take = |len: usize| {
        let end = (start + len).min(n);
        let part = perm[start..end].to_vec();
        start = end;
        part
    };
    let cal = take(sizes[0]);
    let eval = take(sizes[1]);
    let test = take(sizes[2]);
    let rest = take(n);
    Ok([cal, eval, test, rest])
}

pub fn split(data: &LabeledDataset, plan: &SplitPlan) -> Result<Split> {
    let [cal, eval, test, rest] = split_indices(data.len(), plan)?;
    Ok(Split {
        cal: data.subset(&cal),
        eval: data.subset(&eval),
        test: data.subset(&test),
        rest: data.subset(&rest),
    })
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parse a dataset CSV from any reader. Errors name the offending line.
pub fn read_csv<R: Read>(reader: R) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(parse_err(1, "empty file: missing header")),
        Some(r) => r.map_err(|e| csv_err(&e))?,
    };
    let header_line = header.position().map_or(1, csv::Position::line);
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(parse_err(
            header_line,
            "header must start with id,label and have at least one value column",
        ));
    }
    let kind = if header[2].starts_with("logit_") {
        DatasetKind::PrecomputedLogits
    } else if header[2].starts_with("x_") {
        DatasetKind::RawInputs
    } else {
        return Err(parse_err(
            header_line,
            format!("unknown value column {:?}", &header[2]),
        ));
    };
    let prefix = kind.column_prefix();
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("{prefix}_{j}") {
            return Err(parse_err(
                header_line,
                format!("column {} should be {prefix}_{j}, found {name:?}", j + 3),
            ));
        }
    }
    let width = header.len() - 2;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        let record = record.map_err(|e| csv_err(&e))?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() != width + 2 {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", width + 2, record.len()),
            ));
        }
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(line, format!("duplicate id {id:?}")));
        }
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label {:?} is not a class index", &record[1])))?;
        let mut row = Vec::with_capacity(width);
        for (j, cell) in record.iter().skip(2).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("column {prefix}_{j}: {cell:?} is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column {prefix}_{j}: non-finite value"),
                ));
            }
            row.push(v);
        }
        if kind == DatasetKind::PrecomputedLogits && label >= width {
            return Err(parse_err(
                line,
                format!("label {label} out of range for {width} classes"),
            ));
        }
        ids.push(id);
        labels.push(label);
        rows.push(row);
    }
    LabeledDataset::new(ids, labels, rows, kind, None)
}

fn csv_err(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, csv::Position::line);
    parse_err(line, e.to_string())
}

pub fn write_csv<W: Write>(data: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let prefix = data.kind.column_prefix();
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..data.feature_dim()).map(|j| format!("{prefix}_{j}")));
    w.write_record(&header).map_err(io_from_csv)?;
    for ((id, label), row) in data.ids.iter().zip(&data.labels).zip(&data.rows) {
        let mut rec = Vec::with_capacity(row.len() + 2);
        rec.push(id.clone());
        rec.push(label.to_string());
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

fn io_from_csv(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn load_logits_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    read_csv(std::fs::File::open(path)?)
}

pub fn save_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(data, std::io::BufWriter::new(std::fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_means_are_equidistant() {
        for (d, c) in [(2, 2), (2, 3), (5, 4), (16, 4)] {
            let m = simplex_means(d, c, 3.0).unwrap();
            for i in 0..c {
                for j in i + 1..c {
                    let dist: f64 = m[i]
                        .iter()
                        .zip(&m[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!((dist - 3.0).abs() < 1e-12, "d={d} c={c} dist={dist}");
                }
            }
        }
        assert!(simplex_means(2, 4, 1.0).is_err());
        assert!(simplex_means(1, 2, 1.0).is_err());
    }

    #[test]
    fn mixture_is_deterministic() {
        let a = make_gaussian_mixture(50, 3, 3, 2.0, 5).unwrap();
        let b = make_gaussian_mixture(50, 3, 3, 2.0, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_gaussian_mixture(50, 3, 3, 2.0, 6).unwrap());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let plan = SplitPlan {
            cal: 0.5,
            eval: 0.25,
            test: 0.25,
            seed: 3,
        };
        let [cal, eval, test, rest] = split_indices(100, &plan).unwrap();
        assert_eq!(
            (cal.len(), eval.len(), test.len(), rest.len()),
            (50, 25, 25, 0)
        );
        let mut all: Vec<usize> = cal.iter().chain(&eval).chain(&test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(split_indices(100, &plan).unwrap()[0], cal);
    }

    #[test]
    fn split_rejects_oversubscription() {
        let plan = SplitPlan {
            cal: 0.6,
            eval: 0.3,
            test: 0.2,
            seed: 0,
        };
        assert!(split_indices(10, &plan).is_err());
        let neg = SplitPlan {
            cal: -0.1,
            eval: 0.3,
            test: 0.2,
            seed: 0,
        };
        assert!(split_indices(10, &neg).is_err());
    }

    #[test]
    fn parse_hand_written_file() {
        let text = "id,label,logit_0,logit_1\na,0,1.5,-2\nb,1,0,0.25\nc,1,-1e-3,3\n";
        let d = read_csv(text.as_bytes()).unwrap();
        assert_eq!(d.kind(), DatasetKind::PrecomputedLogits);
        assert_eq!(d.ids(), &["a", "b", "c"]);
        assert_eq!(d.labels(), &[0, 1, 1]);
        assert_eq!(
            d.features(),
            &[vec![1.5, -2.0], vec![0.0, 0.25], vec![-1e-3, 3.0]]
        );
    }

    #[test]
    fn parse_errors_name_the_line() {
        let missing = "id,label,logit_0,logit_1\na,0,1,2\nb,1,3\n";
        match read_csv(missing.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let nonnum = "id,label,logit_0\na,0,zz\n";
        assert!(matches!(
            read_csv(nonnum.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let header = "id,lbl,logit_0\n";
        assert!(matches!(
            read_csv(header.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let gap = "id,label,logit_0,logit_2\n";
        assert!(matches!(
            read_csv(gap.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let range = "id,label,logit_0,logit_1\na,2,0,0\n";
        assert!(matches!(
            read_csv(range.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let dup = "id,label,x_0\na,0,1\na,1,1\n";
        assert!(matches!(
            read_csv(dup.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(read_csv("".as_bytes()).is_err());
        assert!(read_csv("id,label,logit_0\na,0,NaN\n".as_bytes()).is_err());
    }

    #[test]
    fn raw_inputs_round_trip() {
        let d = make_gaussian_mixture(20, 3, 2, 1.0, 1).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.features(), d.features());
        assert_eq!(back.labels(), d.labels());
        assert_eq!(back.kind(), DatasetKind::RawInputs);
    }
}
