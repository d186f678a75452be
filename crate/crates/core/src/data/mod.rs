//! Tabular data: ingestion, cleaning, standardization/encoding, splitting,
//! and the synthetic desk-scale generator.

mod dataset;
mod preprocess;
mod synth;
mod table;

pub use dataset::{split, split_indices, Dataset};
pub use preprocess::{
    apply_preprocessor, fit_preprocessor, CategoryMap, FeatureBound, NumericStat, PreprocessState,
};
pub use synth::{synth_generate, SynthSpec};
pub use table::{clean, load_csv, Cell, CleanSpec, ColumnKind, ColumnSpec, RawTable};
