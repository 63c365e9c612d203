//! Datasets: synthetic generators, CSV ingestion, feature selection and splits.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::training::{Target, TrainData};

/// Follow-up times and event indicators (true = event observed).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurvivalRecords {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Option<Vec<usize>>,
    /// Original label strings, indexed by dense id.
    pub class_names: Vec<String>,
    pub labeled_mask: Vec<bool>,
    pub survival: Option<SurvivalRecords>,
    pub feature_names: Option<Vec<String>>,
    pub sample_ids: Option<Vec<String>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn unlabeled(features: Matrix<T>) -> Self {
        let n = features.rows();
        Self {
            features,
            labels: None,
            class_names: Vec::new(),
            labeled_mask: vec![false; n],
            survival: None,
            feature_names: None,
            sample_ids: None,
        }
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn p(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        let from_labels = self
            .labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1);
        from_labels.max(self.class_names.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let mut lens = vec![self.labeled_mask.len()];
        if let Some(l) = &self.labels {
            lens.push(l.len());
        }
        if let Some(s) = &self.survival {
            lens.push(s.time.len());
            lens.push(s.event.len());
        }
        if let Some(f) = &self.sample_ids {
            lens.push(f.len());
        }
        for len in lens {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if let Some(f) = &self.feature_names {
            if f.len() != self.p() {
                return Err(Error::LengthMismatch {
                    left: self.p(),
                    right: f.len(),
                });
            }
        }
        if self.labels.is_none() && self.labeled_mask.iter().any(|&m| m) {
            return Err(Error::InvalidParameter("labeled rows without labels".into()));
        }
        Ok(())
    }

    /// Converts the feature matrix to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            features: self.features.cast(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            labeled_mask: self.labeled_mask.clone(),
            survival: self.survival.clone(),
            feature_names: self.feature_names.clone(),
            sample_ids: self.sample_ids.clone(),
        }
    }

    /// Keeps the given columns in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Dataset<T> {
        let n = self.n();
        let features = Matrix::from_fn(n, cols.len(), |i, j| self.features[(i, cols[j])]);
        Dataset {
            features,
            feature_names: self
                .feature_names
                .as_ref()
                .map(|names| cols.iter().map(|&c| names[c].clone()).collect()),
            ..self.clone()
        }
    }

    /// Standardizes every column to zero mean and unit sample deviation;
    /// constant columns become zero.
    pub fn z_score(&self) -> Dataset<T> {
        let (n, p) = self.features.shape();
        let mut out = self.features.clone();
        for (j, (mean, sd)) in column_moments(&self.features).into_iter().enumerate() {
            for i in 0..n {
                let v = self.features[(i, j)].to_f64_lossy();
                out[(i, j)] = if sd > 0.0 { T::of((v - mean) / sd) } else { T::zero() };
            }
        }
        let _ = p;
        Dataset {
            features: out,
            ..self.clone()
        }
    }

    /// Training inputs for a classification run.
    pub fn classification_data<'a>(
        &'a self,
        train_mask: &'a [bool],
        test_mask: Option<&'a [bool]>,
        given: Option<&'a Matrix<T>>,
    ) -> Result<TrainData<'a, T>> {
        let labels = self
            .labels
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("dataset has no labels".into()))?;
        Ok(TrainData {
            x: &self.features,
            target: Target::Classes(labels),
            train_mask,
            test_mask,
            given,
        })
    }

    /// Training inputs for a survival run.
    pub fn survival_data<'a>(
        &'a self,
        train_mask: &'a [bool],
        test_mask: Option<&'a [bool]>,
        given: Option<&'a Matrix<T>>,
    ) -> Result<TrainData<'a, T>> {
        let s = self
            .survival
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("dataset has no survival records".into()))?;
        Ok(TrainData {
            x: &self.features,
            target: Target::Survival {
                time: &s.time,
                event: &s.event,
            },
            train_mask,
            test_mask,
            given,
        })
    }
}

/// Per-column mean and sample standard deviation (divisor n − 1).
fn column_moments<T: Scalar>(x: &Matrix<T>) -> Vec<(f64, f64)> {
    let (n, p) = x.shape();
    (0..p)
        .map(|j| {
            let mean = (0..n).map(|i| x[(i, j)].to_f64_lossy()).sum::<f64>() / n as f64;
            let ss: f64 = (0..n)
                .map(|i| {
                    let d = x[(i, j)].to_f64_lossy() - mean;
                    d * d
                })
                .sum();
            let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
            (mean, sd)
        })
        .collect()
}

pub const SYNTHETIC_MEANS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 5.0), (5.0, 0.0), (5.0, 5.0)];
pub const SYNTHETIC_SIGNAL_DIMS: usize = 2;
pub const SYNTHETIC_NOISE_DIMS: usize = 40;
const NOISE_MEAN: f64 = 2.5;
const NOISE_VAR: f64 = 10.0;

/// Four 2-D unit-variance Gaussian clusters with 40 appended noise columns
/// drawn from N(2.5, 10). Rows are grouped by cluster; labels are the cluster
/// index. Every row draws 42 normals in column order from one SplitMix64 stream.
pub fn gen_synthetic(n_per_cluster: usize, seed: u64) -> Result<Dataset<f64>> {
    if n_per_cluster == 0 {
        return Err(Error::InvalidParameter("n_per_cluster must be positive".into()));
    }
    let p = SYNTHETIC_SIGNAL_DIMS + SYNTHETIC_NOISE_DIMS;
    let n = 4 * n_per_cluster;
    let mut rng = SplitMix64::new(seed);
    let mut data = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for (c, &(mx, my)) in SYNTHETIC_MEANS.iter().enumerate() {
        for _ in 0..n_per_cluster {
            data.push(mx + rng.normal());
            data.push(my + rng.normal());
            for _ in 0..SYNTHETIC_NOISE_DIMS {
                data.push(NOISE_MEAN + NOISE_VAR.sqrt() * rng.normal());
            }
            labels.push(c);
        }
    }
    let mut names: Vec<String> = (1..=SYNTHETIC_SIGNAL_DIMS).map(|i| format!("signal_{i}")).collect();
    names.extend((1..=SYNTHETIC_NOISE_DIMS).map(|i| format!("noise_{i}")));
    Ok(Dataset {
        features: Matrix::from_vec(n, p, data)?,
        labels: Some(labels),
        class_names: (0..4).map(|c| format!("cluster_{c}")).collect(),
        labeled_mask: vec![true; n],
        survival: None,
        feature_names: Some(names),
        sample_ids: Some((0..n).map(|i| format!("s{i}")).collect()),
    })
}

/// Survival data with the same 2 signal + 40 noise column layout: signal
/// columns ~ N(0, 1), noise ~ N(2.5, 10). Event times are exponential with
/// rate `0.1·exp(x₁ + x₂)`; independent exponential censoring at rate 0.03.
pub fn gen_survival(n: usize, seed: u64) -> Result<Dataset<f64>> {
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two subjects".into()));
    }
    let p = SYNTHETIC_SIGNAL_DIMS + SYNTHETIC_NOISE_DIMS;
    let mut rng = SplitMix64::new(seed);
    let mut data = Vec::with_capacity(n * p);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.normal();
        let b = rng.normal();
        data.push(a);
        data.push(b);
        for _ in 0..SYNTHETIC_NOISE_DIMS {
            data.push(NOISE_MEAN + NOISE_VAR.sqrt() * rng.normal());
        }
        let rate = 0.1 * (a + b).exp();
        let t = -(1.0 - rng.uniform()).ln() / rate;
        let c = -(1.0 - rng.uniform()).ln() / 0.03;
        time.push(t.min(c).max(1e-12));
        event.push(t <= c);
    }
    let mut names: Vec<String> = (1..=SYNTHETIC_SIGNAL_DIMS).map(|i| format!("signal_{i}")).collect();
    names.extend((1..=SYNTHETIC_NOISE_DIMS).map(|i| format!("noise_{i}")));
    Ok(Dataset {
        features: Matrix::from_vec(n, p, data)?,
        labels: None,
        class_names: Vec::new(),
        labeled_mask: vec![false; n],
        survival: Some(SurvivalRecords { time, event }),
        feature_names: Some(names),
        sample_ids: Some((0..n).map(|i| format!("s{i}")).collect()),
    })
}

/// Two Gaussian classes of the given sizes in `dims` dimensions, means
/// separated by `gap` along every axis.
pub fn gen_two_class(sizes: (usize, usize), dims: usize, gap: f64, seed: u64) -> Result<Dataset<f64>> {
    let n = sizes.0 + sizes.1;
    let mut rng = SplitMix64::new(seed);
    let mut labels = Vec::with_capacity(n);
    let data: Vec<f64> = (0..n)
        .flat_map(|i| {
            let c = usize::from(i >= sizes.0);
            labels.push(c);
            (0..dims).map(|_| c as f64 * gap + rng.normal()).collect::<Vec<_>>()
        })
        .collect();
    Ok(Dataset {
        features: Matrix::from_vec(n, dims, data)?,
        labels: Some(labels),
        class_names: vec!["a".into(), "b".into()],
        labeled_mask: vec![true; n],
        survival: None,
        feature_names: None,
        sample_ids: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    SamplesAsRows,
    FeaturesAsRows,
}

fn read_table<R: Read>(input: R) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Ragged {
                line: line + 1,
                expected: w,
                found: record.len(),
            });
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse_cell(s: &str, row: usize, column: &str) -> Result<f64> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric {
            row,
            column: column.to_string(),
            value: s.to_string(),
        }),
    }
}

/// Maps label strings to dense ids in order of first appearance.
fn encode_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut map: HashMap<&str, usize> = HashMap::new();
    let mut names = Vec::new();
    let ids = raw
        .iter()
        .map(|s| {
            *map.entry(s.as_str()).or_insert_with(|| {
                names.push(s.clone());
                names.len() - 1
            })
        })
        .collect();
    (ids, names)
}

/// Parses a comma-separated table with a header row and an id column.
/// `label_column` names the column (or, for features-as-rows, the row)
/// holding class labels.
pub fn parse_csv<R: Read>(input: R, orientation: Orientation, label_column: Option<&str>) -> Result<Dataset<f64>> {
    let table = read_table(input)?;
    if table.len() < 2 || table[0].len() < 2 {
        return Err(Error::EmptyTable);
    }
    // Normalize to samples-as-rows: header = [id, names...], rows = [sample, values...].
    let table = match orientation {
        Orientation::SamplesAsRows => table,
        Orientation::FeaturesAsRows => {
            let (r, c) = (table.len(), table[0].len());
            (0..c).map(|j| (0..r).map(|i| table[i][j].clone()).collect()).collect()
        }
    };
    let header = &table[0];
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .skip(1)
                .position(|h| h == name)
                .map(|p| p + 1)
                .ok_or_else(|| Error::Parse(format!("label column {name:?} not found")))?,
        ),
        None => None,
    };
    let feature_cols: Vec<usize> = (1..header.len()).filter(|&j| Some(j) != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::EmptyTable);
    }
    let rows = &table[1..];
    let mut data = Vec::with_capacity(rows.len() * feature_cols.len());
    let mut raw_labels = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        for &j in &feature_cols {
            data.push(parse_cell(&row[j], i + 1, &header[j])?);
        }
        if let Some(l) = label_idx {
            if row[l].is_empty() {
                return Err(Error::MissingValue {
                    row: i + 1,
                    column: header[l].clone(),
                });
            }
            raw_labels.push(row[l].clone());
        }
    }
    let n = rows.len();
    let (labels, class_names) = if label_idx.is_some() {
        let (ids, names) = encode_labels(&raw_labels);
        (Some(ids), names)
    } else {
        (None, Vec::new())
    };
    let labeled = labels.is_some();
    Ok(Dataset {
        features: Matrix::from_vec(n, feature_cols.len(), data)?,
        labels,
        class_names,
        labeled_mask: vec![labeled; n],
        survival: None,
        feature_names: Some(feature_cols.iter().map(|&j| header[j].clone()).collect()),
        sample_ids: Some(rows.iter().map(|r| r[0].clone()).collect()),
    })
}

pub fn load_csv(path: &Path, orientation: Orientation, label_column: Option<&str>) -> Result<Dataset<f64>> {
    parse_csv(std::fs::File::open(path)?, orientation, label_column)
}

/// Rows of a keyed side file (header skipped), indexed by sample id.
fn keyed_rows<R: Read>(input: R, width: usize) -> Result<HashMap<String, Vec<String>>> {
    let table = read_table(input)?;
    if table.len() < 2 {
        return Err(Error::EmptyTable);
    }
    if table[0].len() != width {
        return Err(Error::Ragged {
            line: 1,
            expected: width,
            found: table[0].len(),
        });
    }
    Ok(table
        .into_iter()
        .skip(1)
        .map(|mut r| {
            let id = r.remove(0);
            (id, r)
        })
        .collect())
}

fn sample_ids<T>(d: &Dataset<T>) -> Result<&[String]> {
    d.sample_ids
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("dataset has no sample ids".into()))
}

impl Dataset<f64> {
    /// Attaches labels from a two-column `(sample_id, label)` file. Every
    /// sample must be listed.
    pub fn attach_labels<R: Read>(mut self, input: R) -> Result<Self> {
        let rows = keyed_rows(input, 2)?;
        let ids = sample_ids(&self)?;
        let raw = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                rows.get(id).map(|r| r[0].clone()).ok_or_else(|| Error::MissingValue {
                    row: i + 1,
                    column: "label".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (labels, names) = encode_labels(&raw);
        self.labels = Some(labels);
        self.class_names = names;
        self.labeled_mask = vec![true; self.n()];
        Ok(self)
    }

    /// Attaches survival records from a `(sample_id, time, event)` file.
    pub fn attach_survival<R: Read>(mut self, input: R) -> Result<Self> {
        let rows = keyed_rows(input, 3)?;
        let ids = sample_ids(&self)?;
        let mut rec = SurvivalRecords::default();
        for (i, id) in ids.iter().enumerate() {
            let r = rows.get(id).ok_or_else(|| Error::MissingValue {
                row: i + 1,
                column: "time".into(),
            })?;
            let t = parse_cell(&r[0], i + 1, "time")?;
            if t <= 0.0 {
                return Err(Error::InvalidParameter(format!("non-positive time for {id}")));
            }
            let e = match r[1].as_str() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::NonNumeric {
                        row: i + 1,
                        column: "event".into(),
                        value: other.into(),
                    })
                }
            };
            rec.time.push(t);
            rec.event.push(e);
        }
        self.survival = Some(rec);
        Ok(self)
    }

    /// Writes samples-as-rows CSV with an `id` column and, when labels are
    /// present, a trailing `label` column. Numbers use shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let names: Vec<String> = self
            .feature_names
            .clone()
            .unwrap_or_else(|| (1..=self.p()).map(|j| format!("f{j}")).collect());
        let mut header = vec!["id".to_string()];
        header.extend(names);
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for i in 0..self.n() {
            let mut rec = vec![self
                .sample_ids
                .as_ref()
                .map_or_else(|| format!("s{i}"), |s| s[i].clone())];
            rec.extend(self.features.row(i).iter().map(|v| format!("{v:?}")));
            if let Some(l) = &self.labels {
                rec.push(self.class_names.get(l[i]).cloned().unwrap_or_else(|| l[i].to_string()));
            }
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Keeps the `m` columns with the largest sample standard deviation, ordered
/// by descending deviation and then original position.
pub fn top_variance_select<T: Scalar>(d: &Dataset<T>, m: usize) -> Result<Dataset<T>> {
    let p = d.p();
    if m == 0 || m > p {
        return Err(Error::MTooLarge { m, p });
    }
    let sd: Vec<f64> = column_moments(&d.features).into_iter().map(|(_, s)| s).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| sd[b].total_cmp(&sd[a]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(d.select_columns(&order))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub train_fraction: f64,
    #[serde(default = "yes")]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// `max(1, round(fraction · size))` capped at `size`; exact halves round up.
fn train_count(fraction: f64, size: usize) -> usize {
    ((fraction * size as f64 + 1e-9).round() as usize).clamp(1, size)
}

/// Train and test masks; disjoint and covering every row.
pub fn split<T: Scalar>(d: &Dataset<T>, plan: &SplitPlan) -> Result<(Vec<bool>, Vec<bool>)> {
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_fraction must lie in (0, 1), got {}",
            plan.train_fraction
        )));
    }
    let n = d.n();
    if n == 0 {
        return Err(Error::EmptyTable);
    }
    let mut train = vec![false; n];
    let groups: Vec<Vec<usize>> = if plan.stratified {
        let labels = d
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("stratified split needs labels".into()))?;
        let mut g = vec![Vec::new(); d.num_classes()];
        for (i, &l) in labels.iter().enumerate() {
            g[l].push(i);
        }
        if let Some(empty) = g.iter().position(Vec::is_empty) {
            return Err(Error::ClassTooSmall(empty));
        }
        g
    } else {
        vec![(0..n).collect()]
    };
    for (c, mut rows) in groups.into_iter().enumerate() {
        let take = train_count(plan.train_fraction, rows.len());
        SplitMix64::stream(plan.seed, c as u64).shuffle(&mut rows);
        for &i in &rows[..take] {
            train[i] = true;
        }
    }
    let test = train.iter().map(|t| !t).collect();
    Ok((train, test))
}

/// Splits rows into train / validation / test with the given fractions.
pub fn split_three(n: usize, train: f64, validation: f64, seed: u64) -> Result<Vec<u8>> {
    if !(train > 0.0 && validation >= 0.0 && train + validation < 1.0) {
        return Err(Error::InvalidParameter("fractions must be positive and sum below 1".into()));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    SplitMix64::stream(seed, 0x3).shuffle(&mut rows);
    let a = train_count(train, n);
    let b = ((validation * n as f64).round() as usize).min(n - a);
    let mut out = vec![2u8; n];
    for &i in &rows[..a] {
        out[i] = 0;
    }
    for &i in &rows[a..a + b] {
        out[i] = 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_shape_and_moments() {
        let d = gen_synthetic(1000, 7).unwrap();
        assert_eq!(d.features.shape(), (4000, 42));
        let labels = d.labels.as_ref().unwrap();
        for c in 0..4 {
            let rows: Vec<usize> = (0..4000).filter(|&i| labels[i] == c).collect();
            assert_eq!(rows.len(), 1000);
            for (dim, target) in [SYNTHETIC_MEANS[c].0, SYNTHETIC_MEANS[c].1].into_iter().enumerate() {
                let mean = rows.iter().map(|&i| d.features[(i, dim)]).sum::<f64>() / 1000.0;
                assert!((mean - target).abs() < 0.15, "cluster {c} dim {dim}: {mean}");
            }
        }
        for j in 2..42 {
            let col: Vec<f64> = (0..4000).map(|i| d.features[(i, j)]).collect();
            let m = col.iter().sum::<f64>() / 4000.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3999.0;
            assert!((v - 10.0).abs() < 1.5, "noise column {j}: {v}");
        }
        assert_eq!(d, gen_synthetic(1000, 7).unwrap());
        assert_ne!(d.features, gen_synthetic(1000, 8).unwrap().features);
    }

    #[test]
    fn csv_examples() {
        let text = "id,a,b\nx,1,2\ny,3,4\nz,5,6\n";
        let d = parse_csv(text.as_bytes(), Orientation::SamplesAsRows, None).unwrap();
        assert_eq!(d.features.shape(), (3, 2));
        assert!(d.labels.is_none());
        assert_eq!(d.features.row(2), &[5.0, 6.0]);

        let text = "id,a,class\nx,1,A\ny,3,B\nz,5,A\n";
        let d = parse_csv(text.as_bytes(), Orientation::SamplesAsRows, Some("class")).unwrap();
        assert_eq!(d.labels.as_deref(), Some(&[0, 1, 0][..]));
        assert_eq!(d.class_names, vec!["A", "B"]);

        let t = "gene,x,y,z\na,1,3,5\nb,2,4,6\n";
        let d2 = parse_csv(t.as_bytes(), Orientation::FeaturesAsRows, None).unwrap();
        assert_eq!(d2.features, Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        assert_eq!(d2.sample_ids.as_ref().unwrap(), &["x", "y", "z"]);

        let err = parse_csv("id,a,b\nx,1,\n".as_bytes(), Orientation::SamplesAsRows, None).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 1, ref column } if column == "b"));
        let err = parse_csv("id,a,b\nx,1,2\ny,3\n".as_bytes(), Orientation::SamplesAsRows, None).unwrap_err();
        assert!(matches!(err, Error::Ragged { line: 3, expected: 3, found: 2 }));
        let err = parse_csv("id,a\nx,hello\n".as_bytes(), Orientation::SamplesAsRows, None).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { .. }));
        assert!(matches!(parse_csv("id,a\n".as_bytes(), Orientation::SamplesAsRows, None), Err(Error::EmptyTable)));
    }

    #[test]
    fn side_files() {
        let d = parse_csv("id,a\nx,1\ny,2\n".as_bytes(), Orientation::SamplesAsRows, None).unwrap();
        let d = d.attach_labels("sample,label\ny,B\nx,A\n".as_bytes()).unwrap();
        assert_eq!(d.labels.as_deref(), Some(&[0, 1][..]));
        let d = d.attach_survival("sample,time,event\nx,2.5,1\ny,4,0\n".as_bytes()).unwrap();
        assert_eq!(d.survival.as_ref().unwrap().event, vec![true, false]);
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_synthetic(3, 1).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), Orientation::SamplesAsRows, Some("label")).unwrap();
        assert_eq!(back.features, d.features);
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.feature_names, d.feature_names);
        assert_eq!(back.sample_ids, d.sample_ids);
    }

    #[test]
    fn variance_selection() {
        let x = Matrix::from_fn(4, 3, |i, j| {
            let spread = [1.0, 3.0, 2.0][j];
            if i % 2 == 0 { spread } else { -spread }
        });
        let d = Dataset::unlabeled(x);
        let top = top_variance_select(&d, 2).unwrap();
        assert_eq!(top.features.column(0), d.features.column(1));
        assert_eq!(top.features.column(1), d.features.column(2));
        let all = top_variance_select(&d, 3).unwrap();
        assert_eq!(all.features.column(2), d.features.column(0));
        assert!(matches!(top_variance_select(&d, 4), Err(Error::MTooLarge { m: 4, p: 3 })));
        assert_eq!(top_variance_select(&top, 2).unwrap(), top);

        let x = Matrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let d = Dataset::unlabeled(x);
        assert_eq!(top_variance_select(&d, 1).unwrap().features.column(0), d.features.column(1));
    }

    fn with_sizes(sizes: &[usize]) -> Dataset<f64> {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat(c).take(s)).collect();
        let n = labels.len();
        Dataset {
            labels: Some(labels),
            labeled_mask: vec![true; n],
            ..Dataset::unlabeled(Matrix::zeros(n, 1))
        }
    }

    fn class_counts(d: &Dataset<f64>, mask: &[bool]) -> Vec<usize> {
        let l = d.labels.as_ref().unwrap();
        (0..d.num_classes()).map(|c| (0..d.n()).filter(|&i| mask[i] && l[i] == c).count()).collect()
    }

    #[test]
    fn stratified_split_counts() {
        let d = with_sizes(&[421, 54]);
        let (train, _) = split(&d, &SplitPlan { train_fraction: 0.01, stratified: true, seed: 3 }).unwrap();
        assert_eq!(class_counts(&d, &train), vec![4, 1]);
        let d = with_sizes(&[65, 316, 273]);
        let (train, test) = split(&d, &SplitPlan { train_fraction: 0.7, stratified: true, seed: 3 }).unwrap();
        assert_eq!(class_counts(&d, &train), vec![46, 221, 191]);
        assert!(train.iter().zip(&test).all(|(a, b)| a ^ b));
        let mut d = with_sizes(&[3, 3]);
        d.class_names = vec!["a".into(), "b".into(), "c".into()];
        assert!(matches!(
            split(&d, &SplitPlan { train_fraction: 0.5, stratified: true, seed: 0 }),
            Err(Error::ClassTooSmall(2))
        ));
    }

    proptest! {
        #[test]
        fn split_is_partition(seed in 0u64..500, frac in 0.01f64..0.99, a in 1usize..40, b in 1usize..40) {
            let d = with_sizes(&[a, b]);
            let plan = SplitPlan { train_fraction: frac, stratified: true, seed };
            let (train, test) = split(&d, &plan).unwrap();
            prop_assert!(train.iter().zip(&test).all(|(x, y)| x ^ y));
            prop_assert!(class_counts(&d, &train).iter().all(|&c| c >= 1));
            prop_assert_eq!(split(&d, &plan).unwrap().0, train);
        }
    }
}
