use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use super::HarnessError;
use crate::models::{GroupedDesign, LabeledDesign};

/// A labelled design with an optional subject grouping.
///
/// Column 0 of the design is the intercept; `feature_names` covers the
/// remaining columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    design: LabeledDesign,
    subjects: Option<Subjects>,
    feature_names: Vec<String>,
    provenance: String,
}

/// Subject index per row (0-based) and the original id of each subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Subjects {
    pub index: Vec<usize>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        design: LabeledDesign,
        subjects: Option<Subjects>,
        feature_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self, HarnessError> {
        let provenance = provenance.into();
        let n = design.n_rows();
        if n < 2 {
            return Err(HarnessError::TooFewRows { file: provenance, n });
        }
        if feature_names.len() + 1 != design.n_cols() {
            return Err(HarnessError::Config(format!(
                "{} feature names for {} covariate columns",
                feature_names.len(),
                design.n_cols() - 1
            )));
        }
        let x = design.x();
        for col in 0..x.ncols() {
            for row in 0..n {
                if !x[(row, col)].is_finite() {
                    return Err(HarnessError::NonFinite { file: provenance, row, column: col });
                }
            }
        }
        if let Some(s) = &subjects {
            if s.index.len() != n {
                return Err(HarnessError::Config(format!("{} subject indices for {n} rows", s.index.len())));
            }
            if let Some(row) = s.index.iter().position(|&i| i >= s.ids.len()) {
                return Err(HarnessError::Config(format!("row {row} refers to subject {} of {}", s.index[row], s.ids.len())));
            }
        }
        Ok(Self { design, subjects, feature_names, provenance })
    }

    pub fn design(&self) -> &LabeledDesign {
        &self.design
    }

    pub fn subjects(&self) -> Option<&Subjects> {
        self.subjects.as_ref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn n_rows(&self) -> usize {
        self.design.n_rows()
    }

    /// Covariates excluding the intercept.
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            design: self.design.select_rows(rows),
            subjects: self.subjects.as_ref().map(|s| Subjects { index: rows.iter().map(|&r| s.index[r]).collect(), ids: s.ids.clone() }),
            feature_names: self.feature_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Grouped view for the random-intercept model.
    pub fn grouped(&self) -> Result<GroupedDesign, HarnessError> {
        let s = self.subjects.as_ref().ok_or_else(|| HarnessError::Config(format!("{} has no subject column", self.provenance)))?;
        Ok(GroupedDesign::new(self.design.clone(), s.index.clone(), s.ids.len())?)
    }

    /// Re-indexes this dataset's subjects against `reference` (e.g. a test set
    /// against its training set). Subjects unknown to `reference` are an error.
    pub fn align_subjects(&self, reference: &Dataset) -> Result<Self, HarnessError> {
        let (Some(mine), Some(theirs)) = (&self.subjects, &reference.subjects) else {
            return Err(HarnessError::Config("subject alignment needs subject columns on both datasets".into()));
        };
        let lookup: HashMap<&str, usize> = theirs.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut index = Vec::with_capacity(mine.index.len());
        for (row, &i) in mine.index.iter().enumerate() {
            let id = &mine.ids[i];
            match lookup.get(id.as_str()) {
                Some(&j) => index.push(j),
                None => return Err(HarnessError::UnknownSubject { file: self.provenance.clone(), row, id: id.clone() }),
            }
        }
        Ok(Self { subjects: Some(Subjects { index, ids: theirs.ids.clone() }), ..self.clone() })
    }
}

impl Dataset {
    /// Writes the covariates, a `label` column (`-1`/`1`) and, when present, a
    /// `subject` column in the layout read by [`load_csv`].
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push("label");
        if self.subjects.is_some() {
            header.push("subject");
        }
        w.write_record(&header)?;
        let x = self.design.x();
        for r in 0..self.n_rows() {
            let mut record: Vec<String> = (1..x.ncols()).map(|c| format!("{:e}", x[(r, c)])).collect();
            record.push(format!("{}", self.design.y()[r]));
            if let Some(s) = &self.subjects {
                record.push(s.ids[s.index[r]].clone());
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
    }
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Maps raw labels to `{-1, +1}`: `{0, 1}` when any label is 0, otherwise the
/// values must already be `-1` or `+1`. `lines` holds the reported line of each label.
fn map_labels(raw: &[f64], lines: &[usize], source: &str) -> Result<DVector<f64>, HarnessError> {
    let zero_one = raw.contains(&0.0);
    let mut y = DVector::zeros(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        y[i] = match (zero_one, v) {
            (true, 0.0) => -1.0,
            (_, 1.0) => 1.0,
            (false, -1.0) => -1.0,
            _ => {
                return Err(HarnessError::BadLabel { file: source.to_string(), line: lines[i], value: v });
            }
        };
    }
    Ok(y)
}

/// Reads a comma-separated file with a header row.
///
/// Every column other than the label (and the optional subject column) is a
/// covariate. Labels may be coded `{0, 1}` or `{-1, +1}`; subject ids are any
/// strings and are numbered in order of first appearance. Reported line
/// numbers are 1-based file lines, so the first data row is line 2.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, subject_column: Option<&str>) -> Result<Dataset, HarnessError> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Err(HarnessError::Empty { path: path.to_path_buf() });
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| HarnessError::MissingColumn { file: source.clone(), column: name.to_string() })
    };
    let label_idx = find(label_column)?;
    let subject_idx = subject_column.map(find).transpose()?;
    let feature_idx: Vec<usize> = (0..header.len()).filter(|&i| i != label_idx && Some(i) != subject_idx).collect();
    let feature_names: Vec<String> = feature_idx.iter().map(|&i| header[i].to_string()).collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut lines = Vec::new();
    let mut subject_ids: Vec<String> = Vec::new();
    let mut subject_lookup: HashMap<String, usize> = HashMap::new();
    let mut subject_index = Vec::new();
    let parse = |record: &csv::StringRecord, col: usize, line: usize| -> Result<f64, HarnessError> {
        let cell = &record[col];
        cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| HarnessError::NonNumeric {
            file: source.clone(),
            line,
            column: header[col].to_string(),
            value: cell.to_string(),
        })
    };
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != header.len() {
            return Err(HarnessError::RaggedRow { file: source.clone(), line, expected: header.len(), found: record.len() });
        }
        labels.push(parse(&record, label_idx, line)?);
        for &col in &feature_idx {
            values.push(parse(&record, col, line)?);
        }
        if let Some(col) = subject_idx {
            let id = record[col].to_string();
            let next = subject_ids.len();
            let k = *subject_lookup.entry(id.clone()).or_insert_with(|| {
                subject_ids.push(id);
                next
            });
            subject_index.push(k);
        }
        lines.push(line);
    }
    let n = labels.len();
    if n < 2 {
        return Err(HarnessError::TooFewRows { file: source, n });
    }
    let y = map_labels(&labels, &lines, &source)?;
    let covariates = DMatrix::from_row_slice(n, feature_idx.len(), &values);
    let design = LabeledDesign::with_intercept(&covariates, y)?;
    let subjects = subject_idx.map(|_| Subjects { index: subject_index, ids: subject_ids });
    Dataset::new(design, subjects, feature_names, source)
}

/// Reads the sparse `label index:value ...` text format with 1-based indices
/// no larger than `dim`. Absent indices are zero; blank lines are skipped and
/// a line holding only a label is an all-zero row.
pub fn load_libsvm(path: impl AsRef<Path>, dim: usize) -> Result<Dataset, HarnessError> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Err(HarnessError::Empty { path: path.to_path_buf() });
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut tokens = raw.split_whitespace();
        let Some(label) = tokens.next() else { continue };
        let malformed = |token: &str| HarnessError::MalformedToken { file: source.clone(), line, token: token.to_string() };
        labels.push(label.parse::<f64>().map_err(|_| malformed(label))?);
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for token in tokens {
            let (idx, val) = token.split_once(':').ok_or_else(|| malformed(token))?;
            let idx: usize = idx.parse().map_err(|_| malformed(token))?;
            let val = val.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| malformed(token))?;
            if idx == 0 || idx > dim {
                return Err(HarnessError::IndexOutOfRange { file: source.clone(), line, index: idx, dim });
            }
            if entries.iter().any(|&(j, _)| j == idx) {
                return Err(HarnessError::DuplicateIndex { file: source.clone(), line, index: idx });
            }
            entries.push((idx, val));
        }
        rows.push(entries);
        lines.push(line);
    }
    let n = rows.len();
    if n < 2 {
        return Err(HarnessError::TooFewRows { file: source, n });
    }
    let y = map_labels(&labels, &lines, &source)?;
    let mut covariates = DMatrix::zeros(n, dim);
    for (r, entries) in rows.iter().enumerate() {
        for &(idx, val) in entries {
            covariates[(r, idx - 1)] = val;
        }
    }
    let design = LabeledDesign::with_intercept(&covariates, y)?;
    let names = (1..=dim).map(|j| format!("x{j}")).collect();
    Dataset::new(design, None, names, source)
}

/// Where a dataset comes from; resolved by [`DataSource::load`].
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv { path: PathBuf, label_column: String, subject_column: Option<String> },
    Libsvm { path: PathBuf, dim: usize },
}

impl DataSource {
    pub fn path(&self) -> &Path {
        match self {
            DataSource::Csv { path, .. } | DataSource::Libsvm { path, .. } => path,
        }
    }

    pub fn load(&self) -> Result<Dataset, HarnessError> {
        match self {
            DataSource::Csv { path, label_column, subject_column } => load_csv(path, label_column, subject_column.as_deref()),
            DataSource::Libsvm { path, dim } => load_libsvm(path, *dim),
        }
    }
}
