//! Standardization, one-hot encoding, and the fitted state that makes the
//! transform reproducible.

use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::data::table::{Cell, ColumnKind, RawTable};
use crate::error::{Error, Result};

/// Retained numeric columns with variance this small count as constant and
/// are dropped at fit time so standardization never divides by ~0.
const ZERO_VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub name: String,
    /// Distinct values in first-seen order; the position is the one-hot index.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureBound {
    pub lo: f64,
    pub hi: f64,
}

/// Everything needed to re-apply the fitted transform: retained columns,
/// standardization statistics, category maps, the label value order, and
/// the per-feature min/max box of the encoded fit data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub dropped_columns: Vec<String>,
    pub numeric_stats: Vec<NumericStat>,
    pub category_maps: Vec<CategoryMap>,
    pub label_values: Vec<String>,
    pub clamp_bounds: Vec<FeatureBound>,
    pub feature_names: Vec<String>,
    /// Column processing order (names), as seen at fit time.
    pub column_order: Vec<String>,
}

impl PreprocessState {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label_values.len()
    }
}

/// Computes means/stds (population convention), first-seen category maps,
/// the label value order, and clamp bounds over the encoded fit table.
pub fn fit_preprocessor(table: &RawTable) -> Result<PreprocessState> {
    if table.n_rows() == 0 {
        return Err(Error::EmptyTable);
    }
    let n = table.n_rows() as f64;

    let mut dropped = Vec::new();
    let mut numeric_stats = Vec::new();
    let mut category_maps = Vec::new();
    let mut label_values: Vec<String> = Vec::new();
    let mut feature_names = Vec::new();
    let mut column_order = Vec::new();

    for (col_idx, spec) in table.columns().iter().enumerate() {
        column_order.push(spec.name.clone());
        match spec.kind {
            ColumnKind::Numeric => {
                let mut sum = 0.0;
                for row in table.rows() {
                    if let Cell::Number(v) = &row[col_idx] {
                        sum += v;
                    }
                }
                let mean = sum / n;
                let mut sq = 0.0;
                for row in table.rows() {
                    if let Cell::Number(v) = &row[col_idx] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let std = (sq / n).sqrt();
                if std < ZERO_VARIANCE_EPS {
                    dropped.push(spec.name.clone());
                } else {
                    feature_names.push(spec.name.clone());
                    numeric_stats.push(NumericStat {
                        name: spec.name.clone(),
                        mean,
                        std,
                    });
                }
            }
            ColumnKind::Categorical => {
                let mut values: Vec<String> = Vec::new();
                for row in table.rows() {
                    if let Cell::Text(s) = &row[col_idx] {
                        if !values.iter().any(|v| v == s) {
                            values.push(s.clone());
                        }
                    }
                }
                for v in &values {
                    feature_names.push(format!("{}={}", spec.name, v));
                }
                category_maps.push(CategoryMap {
                    name: spec.name.clone(),
                    values,
                });
            }
            ColumnKind::Label => {
                for row in table.rows() {
                    if let Cell::Text(s) = &row[col_idx] {
                        if !label_values.iter().any(|v| v == s) {
                            label_values.push(s.clone());
                        }
                    }
                }
            }
        }
    }

    if label_values.is_empty() {
        return Err(Error::Schema("label column has no values".into()));
    }

    let mut state = PreprocessState {
        dropped_columns: dropped,
        numeric_stats,
        category_maps,
        label_values,
        clamp_bounds: Vec::new(),
        feature_names,
        column_order,
    };

    // Clamp bounds = per-feature min/max of the encoded fit table.
    let encoded = apply_preprocessor(&state, table)?;
    let d = encoded.d();
    let mut bounds = vec![
        FeatureBound {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        };
        d
    ];
    for row in encoded.features().rows() {
        for (j, &v) in row.iter().enumerate() {
            bounds[j].lo = bounds[j].lo.min(v);
            bounds[j].hi = bounds[j].hi.max(v);
        }
    }
    state.clamp_bounds = bounds;
    Ok(state)
}

/// Standardizes numeric columns, expands categoricals into one-hot blocks
/// (unseen values encode as all zeros), and maps labels to class indices.
pub fn apply_preprocessor(state: &PreprocessState, table: &RawTable) -> Result<Dataset> {
    let mut numeric_idx = Vec::new();
    for stat in &state.numeric_stats {
        let idx = table
            .column_index(&stat.name)
            .ok_or_else(|| Error::MissingColumn(stat.name.clone()))?;
        numeric_idx.push(idx);
    }
    let mut cat_idx = Vec::new();
    for map in &state.category_maps {
        let idx = table
            .column_index(&map.name)
            .ok_or_else(|| Error::MissingColumn(map.name.clone()))?;
        cat_idx.push(idx);
    }
    let label_idx = table.label_index();

    let d = state.n_features();
    let n = table.n_rows();
    let mut features = ndarray::Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);

    // Feature layout follows fit order: retained columns in the original
    // column order, numeric as one slot, categorical as a one-hot block.
    for (row_i, row) in table.rows().iter().enumerate() {
        let mut out_j = 0usize;
        let mut num_cursor = 0usize;
        let mut cat_cursor = 0usize;
        for name in &state.column_order {
            if state.dropped_columns.contains(name) {
                continue;
            }
            if num_cursor < state.numeric_stats.len()
                && &state.numeric_stats[num_cursor].name == name
            {
                let stat = &state.numeric_stats[num_cursor];
                let v = match &row[numeric_idx[num_cursor]] {
                    Cell::Number(v) => *v,
                    Cell::Text(_) => {
                        return Err(Error::Schema(format!(
                            "column {name:?} is not numeric in the applied table"
                        )))
                    }
                };
                features[(row_i, out_j)] = (v - stat.mean) / stat.std;
                out_j += 1;
                num_cursor += 1;
            } else if cat_cursor < state.category_maps.len()
                && &state.category_maps[cat_cursor].name == name
            {
                let map = &state.category_maps[cat_cursor];
                let value = match &row[cat_idx[cat_cursor]] {
                    Cell::Text(s) => Some(s),
                    Cell::Number(_) => {
                        return Err(Error::Schema(format!(
                            "column {name:?} is not categorical in the applied table"
                        )))
                    }
                };
                if let Some(pos) = value.and_then(|s| map.values.iter().position(|v| v == s)) {
                    features[(row_i, out_j + pos)] = 1.0;
                }
                // unseen value: block stays all zeros
                out_j += map.values.len();
                cat_cursor += 1;
            }
            // label and dropped columns produce no features
        }
        let label_value = match &row[label_idx] {
            Cell::Text(s) => s.clone(),
            Cell::Number(v) => v.to_string(),
        };
        let class = state
            .label_values
            .iter()
            .position(|v| *v == label_value)
            .ok_or_else(|| {
                Error::Schema(format!("unseen label value {label_value:?} at apply time"))
            })?;
        labels.push(class);
    }

    Dataset::new(features, labels, state.n_classes(), state.feature_names.clone())
}
