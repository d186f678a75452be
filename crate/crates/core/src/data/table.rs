//! Raw tabular ingestion: typed CSV loading and cleaning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        ColumnSpec {
            name: name.into(),
            kind,
        }
    }
}

/// One table cell. Numeric columns hold finite numbers; categorical and
/// label columns hold text.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Number(f64),
    Text(String),
}

impl Cell {
    /// Equality key that is total (no NaN cells exist after load validation).
    fn key(&self) -> CellKey<'_> {
        match self {
            Cell::Number(v) => CellKey::Number(v.to_bits()),
            Cell::Text(s) => CellKey::Text(s),
        }
    }
}

#[derive(PartialEq, Eq, Hash)]
enum CellKey<'a> {
    Number(u64),
    Text(&'a str),
}

/// A validated raw table: one label column, rectangular rows.
#[derive(Debug, Clone)]
pub struct RawTable {
    columns: Vec<ColumnSpec>,
    rows: Vec<Vec<Cell>>,
    label_index: usize,
}

impl RawTable {
    pub fn new(columns: Vec<ColumnSpec>, rows: Vec<Vec<Cell>>) -> Result<Self> {
        let label_positions: Vec<usize> = columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Label)
            .map(|(i, _)| i)
            .collect();
        if label_positions.len() != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one label column, found {}",
                label_positions.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} values, expected {}",
                    i,
                    row.len(),
                    columns.len()
                )));
            }
        }
        Ok(RawTable {
            label_index: label_positions[0],
            columns,
            rows,
        })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn label_index(&self) -> usize {
        self.label_index
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Loads a CSV file with a header row against a declared schema.
///
/// The header must match the schema names in order. Numeric cells must
/// parse as finite numbers; the error names the offending row and column.
pub fn load_csv(path: impl AsRef<Path>, schema: &[ColumnSpec]) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    if headers.len() != schema.len() {
        return Err(Error::Schema(format!(
            "{}: header has {} columns, schema declares {}",
            path.display(),
            headers.len(),
            schema.len()
        )));
    }
    for (i, spec) in schema.iter().enumerate() {
        if headers.get(i) != Some(spec.name.as_str()) {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                position: i,
                expected: spec.name.clone(),
                found: headers.get(i).unwrap_or("").to_string(),
            });
        }
    }

    let mut rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(schema.len());
        for (col_idx, spec) in schema.iter().enumerate() {
            let raw = record.get(col_idx).unwrap_or("");
            match spec.kind {
                ColumnKind::Numeric => {
                    let parsed: Option<f64> = raw.trim().parse().ok().filter(|v: &f64| v.is_finite());
                    match parsed {
                        Some(v) => row.push(Cell::Number(v)),
                        None => {
                            return Err(Error::BadNumericCell {
                                path: path.to_path_buf(),
                                row: row_idx,
                                column: spec.name.clone(),
                                value: raw.to_string(),
                            })
                        }
                    }
                }
                ColumnKind::Categorical | ColumnKind::Label => {
                    if raw.is_empty() {
                        return Err(Error::Schema(format!(
                            "{}: row {}, column {:?}: missing value",
                            path.display(),
                            row_idx,
                            spec.name
                        )));
                    }
                    row.push(Cell::Text(raw.to_string()));
                }
            }
        }
        rows.push(row);
    }

    RawTable::new(schema.to_vec(), rows)
}

/// Cleaning directives: constant-column and duplicate-row removal plus an
/// explicit drop list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanSpec {
    pub drop_constant: bool,
    pub drop_duplicates: bool,
    pub drop_listed: Vec<String>,
}

/// Removes listed columns, constant columns, and exact duplicate rows.
/// The label column is never dropped.
pub fn clean(table: &RawTable, spec: &CleanSpec) -> Result<RawTable> {
    for name in &spec.drop_listed {
        let idx = table
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        if idx == table.label_index {
            return Err(Error::ProtectedColumn(name.clone()));
        }
    }

    let mut keep = vec![true; table.columns.len()];
    for (i, _) in table.columns.iter().enumerate() {
        if spec.drop_listed.contains(&table.columns[i].name) {
            keep[i] = false;
        }
    }
    if spec.drop_constant && table.n_rows() > 0 {
        for i in 0..table.columns.len() {
            if i == table.label_index || !keep[i] {
                continue;
            }
            let first = table.rows[0][i].key();
            if table.rows.iter().all(|r| r[i].key() == first) {
                keep[i] = false;
            }
        }
    }

    let columns: Vec<ColumnSpec> = table
        .columns
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(c, _)| c.clone())
        .collect();

    let mut rows: Vec<Vec<Cell>> = table
        .rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(c, _)| c.clone())
                .collect()
        })
        .collect();

    if spec.drop_duplicates {
        let mut seen = std::collections::HashSet::new();
        rows.retain(|row| {
            let key: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Number(v) => format!("n{}", v.to_bits()),
                    Cell::Text(s) => format!("t{s}"),
                })
                .collect();
            seen.insert(key.join("\u{1f}"))
        });
    }

    RawTable::new(columns, rows)
}
