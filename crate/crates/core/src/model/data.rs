//! Numeric data tables read from delimited text with a header row.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Column-major numeric table. Empty or non-numeric cells are stored as NaN and
/// rejected when a model references the column.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub name: String,
    columns: Vec<String>,
    data: Vec<Vec<f64>>,
}

pub type Dataset = BTreeMap<String, DataTable>;

impl DataTable {
    pub fn new(name: impl Into<String>, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let name = name.into();
        let rows = columns.first().map_or(0, |c| c.1.len());
        if columns.iter().any(|c| c.1.len() != rows) {
            return Err(Error::Data(format!("table `{name}`: columns have different lengths")));
        }
        let (names, data): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Data(format!("table `{name}`: duplicate column `{d}`")));
        }
        Ok(DataTable { name, columns: names, data })
    }

    pub fn empty_like(&self) -> Self {
        DataTable { name: self.name.clone(), columns: self.columns.clone(), data: vec![vec![]; self.columns.len()] }
    }

    pub fn nrows(&self) -> usize {
        self.data.first().map_or(0, |c| c.len())
    }

    pub fn column_names(&self) -> &[String] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| Error::Data(format!("table `{}` has no column `{name}`", self.name)))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c == name)
    }

    /// Column whose entries must all be finite.
    pub fn finite_column(&self, name: &str) -> Result<&[f64]> {
        let c = self.column(name)?;
        if let Some(r) = c.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("table `{}` column `{name}` row {r}: missing or non-finite value", self.name)));
        }
        Ok(c)
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        DataTable {
            name: self.name.clone(),
            columns: self.columns.clone(),
            data: self.data.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
        }
    }

    /// Replaces (or appends) a column.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if !self.columns.is_empty() && values.len() != self.nrows() {
            return Err(Error::Data(format!("column `{name}` has {} rows, table has {}", values.len(), self.nrows())));
        }
        match self.columns.iter().position(|c| c == name) {
            Some(i) => self.data[i] = values,
            None => {
                self.columns.push(name.to_string());
                self.data.push(values);
            }
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("cannot derive a table name from {}", path.display())))?
            .to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_csv_str(&name, &text)
    }

    pub fn from_csv_str(name: &str, text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Data(format!("table `{name}`: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut data = vec![Vec::new(); headers.len()];
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("table `{name}` row {r}: {e}")))?;
            for (c, field) in rec.iter().enumerate() {
                data[c].push(if field.is_empty() { f64::NAN } else { field.parse().unwrap_or(f64::NAN) });
            }
        }
        Self::new(name, headers.into_iter().zip(data).collect())
    }

    /// Writes with shortest round-trip float formatting, so output is deterministic.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in 0..self.nrows() {
            w.write_record(self.data.iter().map(|c| format_value(c[r]))).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 output")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Reads several CSV files into a dataset keyed by file stem.
pub fn read_dataset<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut out = Dataset::new();
    for p in paths {
        let t = DataTable::read_csv(p.as_ref())?;
        if out.contains_key(&t.name) {
            return Err(Error::Data(format!("two data files share the table name `{}`", t.name)));
        }
        out.insert(t.name.clone(), t);
    }
    Ok(out)
}
