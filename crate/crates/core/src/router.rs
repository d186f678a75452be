//! Defense routing: the performance matrix over attack-training cells,
//! per-sample optimal-defense labels, and a from-scratch gradient-boosted
//! decision-tree selector with a softmax objective.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AdversarialGrid;
use crate::data::Dataset;
use crate::defense::{defended_predict, DefendedModel};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::nn::argmax_lowest;
use crate::seeding::derive_seed;

/// Splits grid cells into attack-train (epsilon equals `train_epsilon`,
/// which for DeepFool matches its overshoot knob) and attack-test cells.
/// Returns index partitions into `grid.cells`.
pub fn select_attack_train_cells(
    grid: &AdversarialGrid,
    train_epsilon: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, cell) in grid.cells.iter().enumerate() {
        if cell.epsilon.to_bits() == train_epsilon.to_bits() {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "train_epsilon {train_epsilon} not present in the grid"
        )));
    }
    Ok((train, test))
}

/// Macro-F1 of each defense on each attack-train cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub defense_names: Vec<String>,
    pub cell_ids: Vec<String>,
    pub cell_sizes: Vec<usize>,
    /// Shape (defenses, cells), row-major.
    pub entries: Vec<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn n_defenses(&self) -> usize {
        self.defense_names.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn row_average(&self, defense: usize) -> f64 {
        let row = &self.entries[defense];
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Defense with the highest average attack-train performance; ties
    /// break toward the lowest id.
    pub fn best_static_defense(&self) -> usize {
        argmax_lowest((0..self.n_defenses()).map(|i| self.row_average(i)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.n_defenses() {
            return Err(Error::Invariant("matrix row count != defense count".into()));
        }
        for row in &self.entries {
            if row.len() != self.n_cells() {
                return Err(Error::Invariant("matrix row length != cell count".into()));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invariant("matrix entry outside [0,1]".into()));
            }
        }
        Ok(())
    }

    /// CSV: header `defense,<cell ids...>`, one row per defense.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("defense");
        for id in &self.cell_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (name, row) in self.defense_names.iter().zip(&self.entries) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Computes the full defenses-by-cells macro-F1 matrix.
pub fn build_performance_matrix(
    defenses: &[DefendedModel],
    cells: &[(String, Dataset)],
) -> Result<PerformanceMatrix> {
    if cells.is_empty() || cells.iter().any(|(_, d)| d.n() == 0) {
        return Err(Error::InvalidArgument("performance matrix needs nonempty cells".into()));
    }
    let entries: Result<Vec<Vec<f64>>> = defenses
        .par_iter()
        .map(|dm| {
            cells
                .iter()
                .map(|(_, cell)| {
                    let (preds, _) = defended_predict(dm, cell)?;
                    macro_f1(&preds, cell.labels(), cell.n_classes())
                })
                .collect()
        })
        .collect();
    let matrix = PerformanceMatrix {
        defense_names: defenses.iter().map(|d| d.kind.name().to_string()).collect(),
        cell_ids: cells.iter().map(|(id, _)| id.clone()).collect(),
        cell_sizes: cells.iter().map(|(_, d)| d.n()).collect(),
        entries: entries?,
    };
    matrix.validate()?;
    Ok(matrix)
}

/// Stacked attack-train samples labeled with their optimal defense.
#[derive(Debug, Clone)]
pub struct SelectorTrainingSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Per sample, a bitmask of the defenses tied under the correctness
    /// rule (the correct ones, or all when none was correct).
    pub tie_masks: Vec<u16>,
}

impl SelectorTrainingSet {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Labels every attack-train sample with its optimal defense, ranked by
/// (1) per-sample correctness, (2) matrix row average, (3) lowest id.
pub fn label_optimal(
    defenses: &[DefendedModel],
    cells: &[(String, Dataset)],
    matrix: &PerformanceMatrix,
) -> Result<SelectorTrainingSet> {
    matrix.validate()?;
    if defenses.len() != matrix.n_defenses() {
        return Err(Error::InvalidArgument("defense count != matrix rows".into()));
    }
    if cells.len() != matrix.n_cells() {
        return Err(Error::InvalidArgument("cell count != matrix columns".into()));
    }
    let row_avgs: Vec<f64> = (0..defenses.len()).map(|i| matrix.row_average(i)).collect();

    let total: usize = cells.iter().map(|(_, c)| c.n()).sum();
    let d = cells[0].1.d();
    let mut features = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut tie_masks = Vec::with_capacity(total);

    let mut offset = 0usize;
    for (_, cell) in cells {
        let preds: Result<Vec<Vec<usize>>> = defenses
            .par_iter()
            .map(|dm| defended_predict(dm, cell).map(|(p, _)| p))
            .collect();
        let preds = preds?;
        for s in 0..cell.n() {
            let truth = cell.labels()[s];
            let correct: Vec<usize> = (0..defenses.len())
                .filter(|&i| preds[i][s] == truth)
                .collect();
            let candidates: Vec<usize> = if correct.is_empty() {
                (0..defenses.len()).collect()
            } else {
                correct
            };
            let mut mask = 0u16;
            for &i in &candidates {
                mask |= 1 << i;
            }
            // ascending scan keeps the lowest id on row-average ties
            let mut best = candidates[0];
            for &i in &candidates[1..] {
                if row_avgs[i] > row_avgs[best] {
                    best = i;
                }
            }
            labels.push(best);
            tie_masks.push(mask);
            features.row_mut(offset + s).assign(&cell.features().row(s));
        }
        offset += cell.n();
    }

    Ok(SelectorTrainingSet {
        features,
        labels,
        n_classes: defenses.len(),
        tie_masks,
    })
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees (softmax objective, exact greedy splits)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            rounds: 30,
            learning_rate: 0.2,
            max_depth: 5,
            min_samples_leaf: 5,
            subsample: 0.8,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.max_depth < 1 {
            return Err(Error::InvalidArgument("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidArgument("min_samples_leaf must be >= 1".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidArgument("subsample must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// L2 leaf regularization (fixed, XGBoost-style).
const LAMBDA: f64 = 1.0;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn max_depth(&self) -> usize {
        fn depth(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + depth(nodes, *left).max(depth(nodes, *right))
                }
            }
        }
        depth(&self.nodes, 0)
    }
}

/// One-vs-all softmax boosting: `trees[round][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    pub n_classes: usize,
    pub n_features: usize,
    pub learning_rate: f64,
    pub trees: Vec<Vec<Tree>>,
}

impl SelectorModel {
    pub fn rounds(&self) -> usize {
        self.trees.len()
    }
}

struct TreeBuilder<'a> {
    features: ArrayView2<'a, f64>,
    grad: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    min_samples_leaf: usize,
    learning_rate: f64,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn leaf(&mut self, g: f64, h: f64) -> usize {
        let weight = -self.learning_rate * g / (h + LAMBDA);
        self.nodes.push(TreeNode::Leaf { weight });
        self.nodes.len() - 1
    }

    fn build(&mut self, indices: &mut Vec<usize>, depth: usize) -> usize {
        let g_total: f64 = indices.iter().map(|&i| self.grad[i]).sum();
        let h_total: f64 = indices.iter().map(|&i| self.hess[i]).sum();
        if depth >= self.max_depth || indices.len() < 2 * self.min_samples_leaf {
            return self.leaf(g_total, h_total);
        }

        let parent_score = g_total * g_total / (h_total + LAMBDA);
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(indices.len());
        for feature in 0..self.features.ncols() {
            sorted.clear();
            sorted.extend(indices.iter().map(|&i| (self.features[(i, feature)], i)));
            sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut gl = 0.0;
            let mut hl = 0.0;
            for k in 0..sorted.len() - 1 {
                gl += self.grad[sorted[k].1];
                hl += self.hess[sorted[k].1];
                if sorted[k].0 == sorted[k + 1].0 {
                    continue;
                }
                let left_count = k + 1;
                let right_count = sorted.len() - left_count;
                if left_count < self.min_samples_leaf || right_count < self.min_samples_leaf {
                    continue;
                }
                let gr = g_total - gl;
                let hr = h_total - hl;
                let gain =
                    gl * gl / (hl + LAMBDA) + gr * gr / (hr + LAMBDA) - parent_score;
                // zero-gain splits are admitted: parity-style targets (XOR)
                // have no first-order gain at the root yet split cleanly
                // one level down; uniform nodes still score negative.
                if best.map_or(gain >= 0.0, |(bg, _, _)| gain > bg + MIN_GAIN) {
                    let threshold = 0.5 * (sorted[k].0 + sorted[k + 1].0);
                    best = Some((gain, feature, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(g_total, h_total);
        };

        let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) = indices
            .drain(..)
            .partition(|&i| self.features[(i, feature)] <= threshold);
        let node_pos = self.nodes.len();
        // placeholder; children patched after recursion
        self.nodes.push(TreeNode::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(&mut left_idx, depth + 1);
        let right = self.build(&mut right_idx, depth + 1);
        if let TreeNode::Split {
            left: l, right: r, ..
        } = &mut self.nodes[node_pos]
        {
            *l = left;
            *r = right;
        }
        node_pos
    }
}

fn softmax_scores(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Fits the boosted softmax ensemble: per round, one regression tree per
/// class on the softmax gradient/hessian, with exact greedy split search.
pub fn gbt_train(data: &SelectorTrainingSet, config: &GbtConfig) -> Result<SelectorModel> {
    config.validate()?;
    let m = data.n();
    if m == 0 {
        return Err(Error::InvalidArgument("selector training set is empty".into()));
    }
    let n_classes = data.n_classes;
    let d = data.d();
    let mut scores = Array2::<f64>::zeros((m, n_classes));
    let mut trees: Vec<Vec<Tree>> = Vec::with_capacity(config.rounds);

    let subsample_size = ((config.subsample * m as f64).ceil() as usize).clamp(1, m);

    for round in 0..config.rounds {
        let probs = softmax_scores(&scores);
        let round_indices: Vec<usize> = if subsample_size < m {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &[b"round", &(round as u64).to_le_bytes()],
            ));
            let mut all: Vec<usize> = (0..m).collect();
            all.shuffle(&mut rng);
            let mut take = all[..subsample_size].to_vec();
            take.sort_unstable();
            take
        } else {
            (0..m).collect()
        };

        let class_trees: Vec<Tree> = (0..n_classes)
            .into_par_iter()
            .map(|class| {
                let mut grad = vec![0.0; m];
                let mut hess = vec![0.0; m];
                for i in 0..m {
                    let p = probs[(i, class)];
                    let y = if data.labels[i] == class { 1.0 } else { 0.0 };
                    grad[i] = p - y;
                    hess[i] = p * (1.0 - p);
                }
                let mut builder = TreeBuilder {
                    features: data.features.view(),
                    grad: &grad,
                    hess: &hess,
                    max_depth: config.max_depth,
                    min_samples_leaf: config.min_samples_leaf,
                    learning_rate: config.learning_rate,
                    nodes: Vec::new(),
                };
                let mut idx = round_indices.clone();
                builder.build(&mut idx, 0);
                Tree {
                    nodes: builder.nodes,
                }
            })
            .collect();

        for i in 0..m {
            let row = data.features.row(i);
            for (class, tree) in class_trees.iter().enumerate() {
                scores[(i, class)] += tree.predict(row);
            }
        }
        trees.push(class_trees);
    }

    Ok(SelectorModel {
        n_classes,
        n_features: d,
        learning_rate: config.learning_rate,
        trees,
    })
}

/// Per-class boosted scores for one sample.
pub fn gbt_scores(model: &SelectorModel, x: ArrayView1<f64>) -> Vec<f64> {
    let mut scores = vec![0.0; model.n_classes];
    for round in &model.trees {
        for (class, tree) in round.iter().enumerate() {
            scores[class] += tree.predict(x);
        }
    }
    scores
}

/// Routed defense id: argmax of the class scores, ties to the lowest id.
pub fn gbt_predict(model: &SelectorModel, x: ArrayView1<f64>) -> usize {
    argmax_lowest(gbt_scores(model, x).into_iter())
}

// ---------------------------------------------------------------------------
// Selector serialization
// ---------------------------------------------------------------------------

const SELECTOR_MAGIC: &[u8; 4] = b"DYSL";
const SELECTOR_VERSION: u32 = 1;

pub fn save_selector(model: &SelectorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.write_all(SELECTOR_MAGIC).unwrap();
    out.write_all(&SELECTOR_VERSION.to_le_bytes()).unwrap();
    out.write_all(&(model.n_classes as u32).to_le_bytes()).unwrap();
    out.write_all(&(model.n_features as u32).to_le_bytes()).unwrap();
    out.write_all(&(model.rounds() as u32).to_le_bytes()).unwrap();
    out.write_all(&model.learning_rate.to_bits().to_le_bytes()).unwrap();
    for round in &model.trees {
        for tree in round {
            out.write_all(&(tree.nodes.len() as u32).to_le_bytes()).unwrap();
            for node in &tree.nodes {
                match node {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        out.push(0u8);
                        out.write_all(&(*feature as u32).to_le_bytes()).unwrap();
                        out.write_all(&threshold.to_bits().to_le_bytes()).unwrap();
                        out.write_all(&(*left as u32).to_le_bytes()).unwrap();
                        out.write_all(&(*right as u32).to_le_bytes()).unwrap();
                    }
                    TreeNode::Leaf { weight } => {
                        out.push(1u8);
                        out.write_all(&weight.to_bits().to_le_bytes()).unwrap();
                    }
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_selector(path: impl AsRef<Path>) -> Result<SelectorModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::corrupt(path, "truncated magic"))?;
    if &magic != SELECTOR_MAGIC {
        return Err(Error::corrupt(path, "bad magic; not a selector file"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    cursor
        .read_exact(&mut b4)
        .map_err(|_| Error::corrupt(path, "truncated version"))?;
    let version = u32::from_le_bytes(b4);
    if version != SELECTOR_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: SELECTOR_VERSION,
        });
    }
    let read_u32 = |cursor: &mut std::io::Cursor<&[u8]>| -> Result<u32> {
        let mut b = [0u8; 4];
        cursor
            .read_exact(&mut b)
            .map_err(|_| Error::corrupt(path, "truncated u32"))?;
        Ok(u32::from_le_bytes(b))
    };
    let n_classes = read_u32(&mut cursor)? as usize;
    let n_features = read_u32(&mut cursor)? as usize;
    let rounds = read_u32(&mut cursor)? as usize;
    cursor
        .read_exact(&mut b8)
        .map_err(|_| Error::corrupt(path, "truncated learning rate"))?;
    let learning_rate = f64::from_bits(u64::from_le_bytes(b8));
    let mut trees = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut round = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let n_nodes = read_u32(&mut cursor)? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let mut tag = [0u8; 1];
                cursor
                    .read_exact(&mut tag)
                    .map_err(|_| Error::corrupt(path, "truncated node tag"))?;
                match tag[0] {
                    0 => {
                        let feature = read_u32(&mut cursor)? as usize;
                        cursor
                            .read_exact(&mut b8)
                            .map_err(|_| Error::corrupt(path, "truncated threshold"))?;
                        let threshold = f64::from_bits(u64::from_le_bytes(b8));
                        let left = read_u32(&mut cursor)? as usize;
                        let right = read_u32(&mut cursor)? as usize;
                        nodes.push(TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        });
                    }
                    1 => {
                        cursor
                            .read_exact(&mut b8)
                            .map_err(|_| Error::corrupt(path, "truncated leaf weight"))?;
                        nodes.push(TreeNode::Leaf {
                            weight: f64::from_bits(u64::from_le_bytes(b8)),
                        });
                    }
                    t => {
                        return Err(Error::corrupt(path, format!("unknown node tag {t}")));
                    }
                }
            }
            round.push(Tree { nodes });
        }
        trees.push(round);
    }
    if cursor.position() != bytes.len() as u64 {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok(SelectorModel {
        n_classes,
        n_features,
        learning_rate,
        trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AdvCell, AttackKind, DomainBounds, GridProvenance};
    use crate::defense::{train_defense, DefenseConfig, DefenseKind, InnerAttackConfig};
    use crate::nn::{init_mlp, TrainConfig};
    use ndarray::array;
    use proptest::prelude::*;

    fn toy_grid(kinds: &[AttackKind], epsilons: &[f64]) -> AdversarialGrid {
        let mut cells = Vec::new();
        for &kind in kinds {
            for &eps in epsilons {
                cells.push(AdvCell {
                    kind,
                    epsilon: eps,
                    features: Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.1),
                    labels: vec![0, 1, 0, 1],
                    flags: vec![false; 4],
                    seed: 0,
                });
            }
        }
        AdversarialGrid {
            cells,
            n_classes: 2,
            feature_names: vec!["a".into(), "b".into()],
            provenance: GridProvenance {
                source_fingerprint: "s".into(),
                model_fingerprint: "m".into(),
                master_seed: 0,
            },
        }
    }

    #[test]
    fn select_splits_by_epsilon() {
        let grid = toy_grid(&AttackKind::ALL, &[0.01, 0.1, 0.2, 0.3]);
        let (train, test) = select_attack_train_cells(&grid, 0.1).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 18);
        assert!(train.iter().all(|&i| grid.cells[i].epsilon == 0.1));
        // DeepFool's matching-knob cell lands in the train set
        assert!(train
            .iter()
            .any(|&i| grid.cells[i].kind == AttackKind::DeepFool));
    }

    #[test]
    fn select_single_cell_grid() {
        let grid = toy_grid(&[AttackKind::Fgsm], &[0.1]);
        let (train, test) = select_attack_train_cells(&grid, 0.1).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 0);
    }

    #[test]
    fn select_missing_epsilon_errors() {
        let grid = toy_grid(&AttackKind::ALL, &[0.01, 0.1, 0.2, 0.3]);
        assert!(select_attack_train_cells(&grid, 0.5).is_err());
    }

    fn toy_cells_and_defenses() -> (Vec<(String, Dataset)>, Vec<DefendedModel>) {
        let features = Array2::from_shape_fn((20, 3), |(i, j)| {
            if i % 2 == 0 {
                0.2 + 0.01 * j as f64
            } else {
                0.8 - 0.01 * j as f64
            }
        });
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let cell = Dataset::new(
            features,
            labels,
            2,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let baseline = init_mlp(&[3, 8, 2], 4).unwrap();
        let bounds = DomainBounds::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let config = DefenseConfig {
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..Default::default()
            },
            attack_for_training: InnerAttackConfig {
                epsilon: 0.05,
                steps: 2,
                step_fraction: 0.5,
            },
            seed: 1,
            ..Default::default()
        };
        let defenses: Vec<DefendedModel> = [
            DefenseKind::PgdAt,
            DefenseKind::FeatureSqueezing,
            DefenseKind::GaussianNoise,
        ]
        .iter()
        .map(|&k| train_defense(k, &config, &cell, &baseline, &bounds).unwrap())
        .collect();
        let cells = vec![
            ("c0".to_string(), cell.clone()),
            ("c1".to_string(), cell.subset(&(0..10).collect::<Vec<_>>()).unwrap()),
        ];
        (cells, defenses)
    }

    #[test]
    fn matrix_shape_and_range() {
        let (cells, defenses) = toy_cells_and_defenses();
        let matrix = build_performance_matrix(&defenses, &cells).unwrap();
        assert_eq!(matrix.n_defenses(), 3);
        assert_eq!(matrix.n_cells(), 2);
        for row in &matrix.entries {
            for &v in row {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn identical_defended_models_give_identical_rows() {
        let (cells, defenses) = toy_cells_and_defenses();
        let twice = vec![defenses[1].clone(), defenses[1].clone()];
        let matrix = build_performance_matrix(&twice, &cells).unwrap();
        assert_eq!(matrix.entries[0], matrix.entries[1]);
    }

    #[test]
    fn perfect_defense_scores_one() {
        // a cell every defense classifies perfectly has entry 1.0 for the
        // defense that actually does
        let (cells, defenses) = toy_cells_and_defenses();
        let matrix = build_performance_matrix(&defenses, &cells).unwrap();
        // at least verify best_static picks a valid id deterministically
        let id = matrix.best_static_defense();
        assert!(id < 3);
    }

    #[test]
    fn labels_are_total_and_follow_the_rules() {
        let (cells, defenses) = toy_cells_and_defenses();
        let matrix = build_performance_matrix(&defenses, &cells).unwrap();
        let training = label_optimal(&defenses, &cells, &matrix).unwrap();
        let expected_n: usize = cells.iter().map(|(_, c)| c.n()).sum();
        assert_eq!(training.n(), expected_n);
        assert_eq!(training.tie_masks.len(), expected_n);
        assert!(training.labels.iter().all(|&l| l < defenses.len()));

        // recheck rule order on each sample
        let row_avgs: Vec<f64> = (0..3).map(|i| matrix.row_average(i)).collect();
        let mut cursor = 0;
        for (_, cell) in &cells {
            let preds: Vec<Vec<usize>> = defenses
                .iter()
                .map(|dm| defended_predict(dm, cell).unwrap().0)
                .collect();
            for s in 0..cell.n() {
                let truth = cell.labels()[s];
                let correct: Vec<usize> =
                    (0..3).filter(|&i| preds[i][s] == truth).collect();
                let candidates = if correct.is_empty() {
                    (0..3).collect::<Vec<_>>()
                } else {
                    correct
                };
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if row_avgs[i] > row_avgs[best] {
                        best = i;
                    }
                }
                assert_eq!(training.labels[cursor + s], best);
                for &i in &candidates {
                    assert_ne!(training.tie_masks[cursor + s] & (1 << i), 0);
                }
            }
            cursor += cell.n();
        }
    }

    #[test]
    fn tie_on_row_average_prefers_lowest_id() {
        // two identical defended models: identical rows, so rule 3 decides
        let (cells, defenses) = toy_cells_and_defenses();
        let twice = vec![defenses[1].clone(), defenses[1].clone()];
        let matrix = build_performance_matrix(&twice, &cells).unwrap();
        let training = label_optimal(&twice, &cells, &matrix).unwrap();
        assert!(training.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn matrix_csv_writes_expected_layout() {
        let (cells, defenses) = toy_cells_and_defenses();
        let matrix = build_performance_matrix(&defenses, &cells).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.csv");
        matrix.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "defense,c0,c1");
        assert_eq!(lines.clone().count(), 3);
        assert!(lines.next().unwrap().starts_with("pgd_at,"));
    }

    fn set(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> SelectorTrainingSet {
        let n = labels.len();
        SelectorTrainingSet {
            features,
            labels,
            n_classes,
            tie_masks: vec![0; n],
        }
    }

    #[test]
    fn xor_is_learnable_at_depth_two() {
        let features = array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let labels = vec![0, 1, 1, 0];
        let data = set(features.clone(), labels.clone(), 2);
        let config = GbtConfig {
            rounds: 20,
            learning_rate: 0.2,
            max_depth: 2,
            min_samples_leaf: 1,
            subsample: 1.0,
            seed: 0,
        };
        let model = gbt_train(&data, &config).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            assert_eq!(gbt_predict(&model, features.row(i)), y);
        }
    }

    #[test]
    fn single_class_data_predicts_that_class() {
        let features = array![[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]];
        let data = set(features, vec![3, 3, 3], 9);
        let model = gbt_train(&data, &GbtConfig::default()).unwrap();
        assert_eq!(gbt_predict(&model, array![0.2, 0.9].view()), 3);
        assert_eq!(gbt_predict(&model, array![100.0, -100.0].view()), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng as _;
        let features = Array2::from_shape_fn((60, 4), |_| rng.gen::<f64>());
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let data = set(features, labels, 3);
        let config = GbtConfig {
            rounds: 8,
            seed: 42,
            ..Default::default()
        };
        let a = gbt_train(&data, &config).unwrap();
        let b = gbt_train(&data, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trees_respect_max_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng as _;
        let features = Array2::from_shape_fn((200, 5), |_| rng.gen::<f64>());
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let data = set(features, labels, 4);
        let config = GbtConfig {
            rounds: 3,
            max_depth: 3,
            min_samples_leaf: 2,
            ..Default::default()
        };
        let model = gbt_train(&data, &config).unwrap();
        for round in &model.trees {
            for tree in round {
                assert!(tree.max_depth() <= 3);
            }
        }
    }

    #[test]
    fn resubstitution_beats_majority_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng as _;
        let n = 300;
        let features = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
        // labels correlated with feature 0 thresholds
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                let v = features[(i, 0)];
                if v < 0.33 {
                    0
                } else if v < 0.66 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let data = set(features.clone(), labels.clone(), 3);
        let model = gbt_train(&data, &GbtConfig { rounds: 20, ..Default::default() }).unwrap();
        let correct = (0..n)
            .filter(|&i| gbt_predict(&model, features.row(i)) == labels[i])
            .count();
        let mut counts = [0usize; 3];
        for &y in &labels {
            counts[y] += 1;
        }
        let majority = *counts.iter().max().unwrap();
        assert!(correct >= majority, "{correct} vs majority {majority}");
    }

    #[test]
    fn empty_training_set_errors() {
        let data = set(Array2::zeros((0, 2)), vec![], 9);
        assert!(gbt_train(&data, &GbtConfig::default()).is_err());
    }

    #[test]
    fn predictions_are_valid_ids_for_extreme_inputs() {
        let features = array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let data = set(features, vec![0, 1, 2, 3], 9);
        let model = gbt_train(
            &data,
            &GbtConfig {
                rounds: 5,
                min_samples_leaf: 1,
                subsample: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        for x in [
            array![1e300, -1e300],
            array![f64::MIN_POSITIVE, f64::MAX],
            array![-1e9, 1e9],
        ] {
            let id = gbt_predict(&model, x.view());
            assert!(id < 9);
        }
    }

    proptest! {
        #[test]
        fn predict_always_in_range(
            xs in proptest::collection::vec(-1e6f64..1e6, 2),
        ) {
            let features = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5], [0.5, 2.0]];
            let data = set(features, vec![0, 1, 2, 0], 9);
            let model = gbt_train(
                &data,
                &GbtConfig { rounds: 3, min_samples_leaf: 1, subsample: 1.0, ..Default::default() },
            )
            .unwrap();
            let x = Array2::from_shape_vec((1, 2), xs).unwrap();
            let id = gbt_predict(&model, x.row(0));
            prop_assert!(id < 9);
        }
    }

    #[test]
    fn selector_round_trips() {
        let features = array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let data = set(features, vec![0, 1, 1, 0], 2);
        let config = GbtConfig {
            rounds: 6,
            max_depth: 2,
            min_samples_leaf: 1,
            subsample: 1.0,
            ..Default::default()
        };
        let model = gbt_train(&data, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.bin");
        save_selector(&model, &path).unwrap();
        let loaded = load_selector(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn selector_version_mismatch_errors() {
        let features = array![[0.0], [1.0]];
        let data = set(features, vec![0, 1], 2);
        let model = gbt_train(
            &data,
            &GbtConfig { rounds: 1, min_samples_leaf: 1, subsample: 1.0, ..Default::default() },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.bin");
        save_selector(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_selector(&path),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
