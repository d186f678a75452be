//! Seeded synthetic intrusion-style tables: class-conditional Gaussian
//! clusters for numeric columns and class-skewed categorical columns.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::table::{Cell, ColumnKind, ColumnSpec, RawTable};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_numeric: usize,
    pub n_categorical: usize,
    pub n_classes: usize,
    /// Magnitude of the per-class mean offset on numeric columns; also
    /// controls how strongly categorical draws skew toward a class's
    /// preferred value. Zero makes every column class-blind.
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 4000,
            n_numeric: 10,
            n_categorical: 2,
            n_classes: 2,
            class_separation: 3.0,
            noise_scale: 0.3,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("n_classes must be >= 2".into()));
        }
        if self.n_numeric < 2 {
            return Err(Error::InvalidArgument("n_numeric must be >= 2".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be > 0".into()));
        }
        if self.class_separation < 0.0 {
            return Err(Error::InvalidArgument("class_separation must be >= 0".into()));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::InvalidArgument("noise_scale must be > 0".into()));
        }
        Ok(())
    }
}

fn n_values_for(cat_index: usize) -> usize {
    3 + cat_index % 3
}

/// Gaussian modes per class: traffic of one class is multimodal (think
/// attack variants), so each class draws from several clusters sitting at
/// different distances from the class boundary.
const CLUSTER_LADDER: [f64; 7] = [0.116, 0.116, 0.188, 0.188, 0.259, 0.349, 2.59];
/// Scatter of cluster centers on class-agnostic coordinates, times
/// class_separation.
const CLUSTER_SCATTER: f64 = 0.5;
/// Minimum boundary clearance of every cluster in noise units, so the
/// labels stay noise-free regardless of the noise/separation ratio.
const MIN_CLEARANCE_NOISE_UNITS: f64 = 3.0;

/// Generates a raw table per the spec; deterministic given the seed.
///
/// Each class gets a +-1 base sign vector over the numeric columns. A
/// cluster at ladder position t centers at
/// `class_separation * ladder[t] * base`, so clusters sit at graded
/// distances from the inter-class boundary while classes stay linearly
/// separable. Cluster centers additionally scatter on coordinates where
/// every class shares the same base sign (those carry no class signal).
/// At class_separation = 0 every column is class-blind.
pub fn synth_generate(spec: &SynthSpec) -> Result<RawTable> {
    spec.validate()?;

    let mut setup_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[b"synth-setup"]));
    let clusters_per_class = CLUSTER_LADDER.len();
    let rung: Vec<f64> = CLUSTER_LADDER
        .iter()
        .map(|&lambda| {
            if spec.class_separation > 0.0 {
                lambda.max(MIN_CLEARANCE_NOISE_UNITS * spec.noise_scale / spec.class_separation)
            } else {
                lambda
            }
        })
        .collect();
    let mut bases = vec![vec![0.0f64; spec.n_numeric]; spec.n_classes];
    for base in bases.iter_mut() {
        for b in base.iter_mut() {
            *b = if setup_rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }
    let shared: Vec<bool> = (0..spec.n_numeric)
        .map(|j| bases.iter().all(|b| b[j] == bases[0][j]))
        .collect();
    // scatter is shared by the same ladder position of every class, so a
    // boundary-near cluster pair differs only along the class direction
    let mut scatter = vec![vec![0.0f64; spec.n_numeric]; clusters_per_class];
    for cluster_scatter in scatter.iter_mut() {
        for (j, s) in cluster_scatter.iter_mut().enumerate() {
            if shared[j] {
                let z: f64 = StandardNormal.sample(&mut setup_rng);
                *s = CLUSTER_SCATTER * z;
            }
        }
    }
    let mut centers =
        vec![vec![vec![0.0f64; spec.n_numeric]; clusters_per_class]; spec.n_classes];
    for (c, class_centers) in centers.iter_mut().enumerate() {
        for (t, cluster) in class_centers.iter_mut().enumerate() {
            for (j, center) in cluster.iter_mut().enumerate() {
                *center = spec.class_separation * (rung[t] * bases[c][j] + scatter[t][j]);
            }
        }
    }
    // Per (class, categorical column) preferred value.
    let mut preferred = vec![vec![0usize; spec.n_categorical]; spec.n_classes];
    for class_prefs in preferred.iter_mut() {
        for (k, p) in class_prefs.iter_mut().enumerate() {
            *p = setup_rng.gen_range(0..n_values_for(k));
        }
    }
    let skew = spec.class_separation / (spec.class_separation + 1.0);

    let mut columns = Vec::new();
    for j in 0..spec.n_numeric {
        columns.push(ColumnSpec::new(format!("num_{j:02}"), ColumnKind::Numeric));
    }
    for k in 0..spec.n_categorical {
        columns.push(ColumnSpec::new(format!("cat_{k:02}"), ColumnKind::Categorical));
    }
    columns.push(ColumnSpec::new("label", ColumnKind::Label));

    let mut row_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[b"synth-rows"]));
    let mut rows = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let class = row_rng.gen_range(0..spec.n_classes);
        let cluster = row_rng.gen_range(0..clusters_per_class);
        let mut row = Vec::with_capacity(columns.len());
        for j in 0..spec.n_numeric {
            let noise: f64 = StandardNormal.sample(&mut row_rng);
            row.push(Cell::Number(
                centers[class][cluster][j] + spec.noise_scale * noise,
            ));
        }
        for k in 0..spec.n_categorical {
            let n_values = n_values_for(k);
            // boundary-near clusters also blend into the other class's
            // categorical profile
            let cluster_skew = (skew * rung[cluster]).min(1.0);
            let value = if row_rng.gen::<f64>() < cluster_skew {
                preferred[class][k]
            } else {
                row_rng.gen_range(0..n_values)
            };
            row.push(Cell::Text(format!("v{value}")));
        }
        row.push(Cell::Text(format!("class_{class}")));
        rows.push(row);
    }

    RawTable::new(columns, rows)
}
