//! Evaluation: macro-F1, the weighted routing score, the four baselines,
//! per-sample timing, and the comparison report.

use std::time::Instant;

use ndarray::Axis;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackKind;
use crate::data::Dataset;
use crate::defense::{defended_predict, DefendedModel};
use crate::error::{Error, Result};
use crate::nn::{argmax_lowest, predict, MlpModel};
use crate::router::{gbt_predict, PerformanceMatrix, SelectorModel};
use crate::seeding::derive_seed;

/// Unweighted mean of per-class F1 over all `n_classes` classes. A class
/// absent from both predictions and labels contributes zero.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("macro_f1 on empty input".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("n_classes must be > 0".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class out of range: pred {p}, label {y}, n_classes {n_classes}"
            )));
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let precision_den = tp[c] + fp[c];
        let recall_den = tp[c] + fn_[c];
        if precision_den == 0 && recall_den == 0 {
            continue; // contributes 0
        }
        let precision = if precision_den == 0 {
            0.0
        } else {
            tp[c] as f64 / precision_den as f64
        };
        let recall = if recall_den == 0 {
            0.0
        } else {
            tp[c] as f64 / recall_den as f64
        };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / n_classes as f64)
}

/// Per-defense share of one cell under a routing assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseShare {
    pub defense: usize,
    pub sample_count: usize,
    /// Macro-F1 of this defense on the samples assigned to it (0 when the
    /// share is empty).
    pub macro_f1: f64,
}

/// The weighted routing score: sum over defenses of
/// (assigned count / total) * macro-F1 on the assigned subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub per_defense: Vec<DefenseShare>,
    pub total_samples: usize,
    pub score: f64,
}

impl ScoreBreakdown {
    pub fn recompute_score(&self) -> f64 {
        self.per_defense
            .iter()
            .map(|s| s.sample_count as f64 / self.total_samples as f64 * s.macro_f1)
            .sum()
    }
}

/// Partitions the cell by assigned defense and scores each partition.
pub fn dynamite_score(
    assignments: &[usize],
    defenses: &[DefendedModel],
    cell: &Dataset,
) -> Result<ScoreBreakdown> {
    if cell.n() == 0 {
        return Err(Error::InvalidArgument("dynamite_score on empty cell".into()));
    }
    if assignments.len() != cell.n() {
        return Err(Error::DimMismatch("assignment count != cell size".into()));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= defenses.len()) {
        return Err(Error::InvalidArgument(format!(
            "assigned defense id {bad} out of range"
        )));
    }
    let mut partitions: Vec<Vec<usize>> = vec![Vec::new(); defenses.len()];
    for (i, &a) in assignments.iter().enumerate() {
        partitions[a].push(i);
    }
    let mut per_defense = Vec::with_capacity(defenses.len());
    let mut score = 0.0;
    for (id, indices) in partitions.iter().enumerate() {
        let f1 = if indices.is_empty() {
            0.0
        } else {
            let subset = cell.subset(indices)?;
            let (preds, _) = defended_predict(&defenses[id], &subset)?;
            macro_f1(&preds, subset.labels(), subset.n_classes())?
        };
        score += indices.len() as f64 / cell.n() as f64 * f1;
        per_defense.push(DefenseShare {
            defense: id,
            sample_count: indices.len(),
            macro_f1: f1,
        });
    }
    Ok(ScoreBreakdown {
        per_defense,
        total_samples: cell.n(),
        score,
    })
}

/// Macro-F1 of each defense applied to the whole cell.
pub fn defense_cell_f1s(defenses: &[DefendedModel], cell: &Dataset) -> Result<Vec<f64>> {
    defenses
        .iter()
        .map(|dm| {
            let (preds, _) = defended_predict(dm, cell)?;
            macro_f1(&preds, cell.labels(), cell.n_classes())
        })
        .collect()
}

pub fn eval_no_defense(baseline: &MlpModel, cells: &[Dataset]) -> Result<Vec<f64>> {
    cells
        .iter()
        .map(|cell| {
            let (preds, _) = predict(baseline, cell)?;
            macro_f1(&preds, cell.labels(), cell.n_classes())
        })
        .collect()
}

/// Mean over seeded trials of the macro-F1 of a uniformly drawn defense
/// applied to the whole cell.
pub fn eval_random(
    defenses: &[DefendedModel],
    cells: &[Dataset],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (j, cell) in cells.iter().enumerate() {
        let f1s = defense_cell_f1s(defenses, cell)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[b"random-cell", &(j as u64).to_le_bytes()],
        ));
        let mean = (0..trials)
            .map(|_| f1s[rng.gen_range(0..f1s.len())])
            .sum::<f64>()
            / trials as f64;
        out.push(mean);
    }
    Ok(out)
}

/// Exact expectation of the random baseline (the mean of the per-defense
/// cell scores).
pub fn analytic_random_mean(defenses: &[DefendedModel], cell: &Dataset) -> Result<f64> {
    let f1s = defense_cell_f1s(defenses, cell)?;
    Ok(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

/// The defense with the best matrix row average, evaluated on every cell.
pub fn eval_best_static(
    matrix: &PerformanceMatrix,
    defenses: &[DefendedModel],
    cells: &[Dataset],
) -> Result<(usize, Vec<f64>)> {
    matrix.validate()?;
    let id = matrix.best_static_defense();
    let scores = cells
        .iter()
        .map(|cell| {
            let (preds, _) = defended_predict(&defenses[id], cell)?;
            macro_f1(&preds, cell.labels(), cell.n_classes())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((id, scores))
}

/// Per-cell best defense over the full pool: the static upper bound.
pub fn eval_oracle(defenses: &[DefendedModel], cells: &[Dataset]) -> Result<Vec<(usize, f64)>> {
    cells
        .iter()
        .map(|cell| {
            let f1s = defense_cell_f1s(defenses, cell)?;
            let best = argmax_lowest(f1s.iter().cloned());
            Ok((best, f1s[best]))
        })
        .collect()
}

/// Routes every sample through the selector and scores the assignment.
pub fn eval_dynamite(
    selector: &SelectorModel,
    defenses: &[DefendedModel],
    cells: &[Dataset],
) -> Result<Vec<ScoreBreakdown>> {
    cells
        .iter()
        .map(|cell| {
            let assignments: Vec<usize> = cell
                .features()
                .rows()
                .into_iter()
                .map(|row| gbt_predict(selector, row))
                .collect();
            dynamite_score(&assignments, defenses, cell)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub dynamite_ms_per_sample: f64,
    pub oracle_ms_per_sample: f64,
    pub best_static_ms_per_sample: f64,
    pub repeats: usize,
    pub cell_size: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Wall-clock medians per sample, streaming style (samples processed one
/// at a time, as at deployment): routed prediction (selector plus the one
/// assigned defense) versus exhaustive evaluation through all defenses
/// versus a single static defense. Single-threaded by construction.
pub fn measure_timing(
    selector: &SelectorModel,
    defenses: &[DefendedModel],
    best_static_id: usize,
    cell: &Dataset,
    repeats: usize,
) -> Result<TimingSummary> {
    if repeats < 3 {
        return Err(Error::InvalidArgument("timing needs repeats >= 3".into()));
    }
    if cell.n() == 0 {
        return Err(Error::InvalidArgument("timing on empty cell".into()));
    }
    let n = cell.n() as f64;
    let mut dynamite = Vec::with_capacity(repeats);
    let mut oracle = Vec::with_capacity(repeats);
    let mut best_static = Vec::with_capacity(repeats);

    use crate::defense::defended_predict_row;

    for _ in 0..repeats {
        let t0 = Instant::now();
        for (i, row) in cell.features().rows().into_iter().enumerate() {
            let id = gbt_predict(selector, row);
            let _ = defended_predict_row(&defenses[id], row, i)?;
        }
        dynamite.push(t0.elapsed().as_secs_f64() * 1e3 / n);

        let t1 = Instant::now();
        let mut preds = vec![Vec::with_capacity(cell.n()); defenses.len()];
        for (i, row) in cell.features().rows().into_iter().enumerate() {
            for (d, dm) in defenses.iter().enumerate() {
                preds[d].push(defended_predict_row(dm, row, i)?);
            }
        }
        let mut f1s = Vec::with_capacity(defenses.len());
        for p in &preds {
            f1s.push(macro_f1(p, cell.labels(), cell.n_classes())?);
        }
        let _ = argmax_lowest(f1s.into_iter());
        oracle.push(t1.elapsed().as_secs_f64() * 1e3 / n);

        let t2 = Instant::now();
        for (i, row) in cell.features().rows().into_iter().enumerate() {
            let _ = defended_predict_row(&defenses[best_static_id], row, i)?;
        }
        best_static.push(t2.elapsed().as_secs_f64() * 1e3 / n);
    }

    Ok(TimingSummary {
        dynamite_ms_per_sample: median(&mut dynamite),
        oracle_ms_per_sample: median(&mut oracle),
        best_static_ms_per_sample: median(&mut best_static),
        repeats,
        cell_size: cell.n(),
    })
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub n: usize,
    pub no_defense: f64,
    pub dynamite: ScoreBreakdown,
    pub oracle_defense: usize,
    pub oracle: f64,
    pub random: f64,
    pub best_static: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub no_defense: f64,
    pub dynamite: f64,
    pub oracle: f64,
    pub random: f64,
    pub best_static: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: AttackKind,
    pub cells: usize,
    pub scores: MethodScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRate {
    pub max_pct: f64,
    pub avg_pct: f64,
}

/// The deterministic evaluation report (timing lives in a separate,
/// volatile artifact so regeneration stays bit-identical).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_fingerprint: String,
    pub master_seed: u64,
    pub best_static_defense: String,
    pub per_attack: Vec<AttackRow>,
    pub averages: MethodScores,
    pub improvement_vs_random: ImprovementRate,
    pub improvement_vs_best_static: ImprovementRate,
    pub oracle_dynamite_gap: f64,
    pub per_cell: Vec<CellResult>,
}

/// Aggregates per-cell results into per-attack rows (sample-weighted means
/// over that attack's cells), the averages row, and improvement rates.
pub fn build_report(
    per_cell: Vec<CellResult>,
    config_fingerprint: String,
    master_seed: u64,
    best_static_defense: String,
) -> Result<EvaluationReport> {
    if per_cell.is_empty() {
        return Err(Error::InvalidArgument("no cell results to report".into()));
    }
    let mut kinds: Vec<AttackKind> = per_cell.iter().map(|c| c.attack).collect();
    kinds.sort();
    kinds.dedup();

    let mut per_attack = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let cells: Vec<&CellResult> = per_cell.iter().filter(|c| c.attack == kind).collect();
        let total: f64 = cells.iter().map(|c| c.n as f64).sum();
        let weighted = |f: &dyn Fn(&CellResult) -> f64| -> f64 {
            cells.iter().map(|c| c.n as f64 * f(c)).sum::<f64>() / total
        };
        per_attack.push(AttackRow {
            attack: kind,
            cells: cells.len(),
            scores: MethodScores {
                no_defense: weighted(&|c| c.no_defense),
                dynamite: weighted(&|c| c.dynamite.score),
                oracle: weighted(&|c| c.oracle),
                random: weighted(&|c| c.random),
                best_static: weighted(&|c| c.best_static),
            },
        });
    }

    let rows = per_attack.len() as f64;
    let averages = MethodScores {
        no_defense: per_attack.iter().map(|r| r.scores.no_defense).sum::<f64>() / rows,
        dynamite: per_attack.iter().map(|r| r.scores.dynamite).sum::<f64>() / rows,
        oracle: per_attack.iter().map(|r| r.scores.oracle).sum::<f64>() / rows,
        random: per_attack.iter().map(|r| r.scores.random).sum::<f64>() / rows,
        best_static: per_attack.iter().map(|r| r.scores.best_static).sum::<f64>() / rows,
    };

    let rate = |other: &dyn Fn(&AttackRow) -> f64| -> ImprovementRate {
        // rows with a vanishing baseline are skipped to keep the ratio finite
        let rates: Vec<f64> = per_attack
            .iter()
            .filter(|r| other(r) > 1e-9)
            .map(|r| (r.scores.dynamite - other(r)) / other(r) * 100.0)
            .collect();
        if rates.is_empty() {
            ImprovementRate {
                max_pct: 0.0,
                avg_pct: 0.0,
            }
        } else {
            ImprovementRate {
                max_pct: rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                avg_pct: rates.iter().sum::<f64>() / rates.len() as f64,
            }
        }
    };

    Ok(EvaluationReport {
        config_fingerprint,
        master_seed,
        best_static_defense,
        improvement_vs_random: rate(&|r| r.scores.random),
        improvement_vs_best_static: rate(&|r| r.scores.best_static),
        oracle_dynamite_gap: averages.oracle - averages.dynamite,
        per_attack,
        averages,
        per_cell,
    })
}

/// Hard consistency checks over a finished report; the evaluate command
/// maps a failure here to a nonzero exit.
pub fn check_report_invariants(
    report: &EvaluationReport,
    per_cell_defense_f1s: &[Vec<f64>],
) -> Result<()> {
    if per_cell_defense_f1s.len() != report.per_cell.len() {
        return Err(Error::Invariant("per-cell defense scores missing".into()));
    }
    for (cell, f1s) in report.per_cell.iter().zip(per_cell_defense_f1s) {
        let max = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if cell.oracle != max {
            return Err(Error::Invariant(format!(
                "oracle {} != max defense F1 {} on {:?} eps {}",
                cell.oracle, max, cell.attack, cell.epsilon
            )));
        }
        if cell.oracle < cell.best_static {
            return Err(Error::Invariant(format!(
                "oracle {} below best-static {} on {:?} eps {}",
                cell.oracle, cell.best_static, cell.attack, cell.epsilon
            )));
        }
        let resum = cell.dynamite.recompute_score();
        if (resum - cell.dynamite.score).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "score breakdown re-sum differs: {} vs {}",
                resum, cell.dynamite.score
            )));
        }
        let count_sum: usize = cell.dynamite.per_defense.iter().map(|s| s.sample_count).sum();
        if count_sum != cell.dynamite.total_samples {
            return Err(Error::Invariant("share counts do not sum to total".into()));
        }
    }
    // averages row equals the column means
    let rows = report.per_attack.len() as f64;
    let check_avg = |label: &str, col: &dyn Fn(&AttackRow) -> f64, avg: f64| -> Result<()> {
        let mean = report.per_attack.iter().map(|r| col(r)).sum::<f64>() / rows;
        if (mean - avg).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "averages row mismatch for {label}: {mean} vs {avg}"
            )));
        }
        Ok(())
    };
    check_avg("no_defense", &|r| r.scores.no_defense, report.averages.no_defense)?;
    check_avg("dynamite", &|r| r.scores.dynamite, report.averages.dynamite)?;
    check_avg("oracle", &|r| r.scores.oracle, report.averages.oracle)?;
    check_avg("random", &|r| r.scores.random, report.averages.random)?;
    check_avg("best_static", &|r| r.scores.best_static, report.averages.best_static)?;
    Ok(())
}

fn attack_label(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Fgsm => "FGSM",
        AttackKind::Bim => "BIM",
        AttackKind::Pgd => "PGD",
        AttackKind::AutoPgd => "AutoPGD",
        AttackKind::DeepFool => "DF",
        AttackKind::Zoo => "ZOO",
    }
}

/// Plain-text tables: performance comparison, improvement rates, and
/// (when measured) processing time per sample.
pub fn render_text_report(report: &EvaluationReport, timing: Option<&TimingSummary>) -> String {
    let mut out = String::new();
    out.push_str("Final Performance (Macro F1-score, %) Comparison\n");
    out.push_str(&format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "Attack", "No Defense", "Dynamite", "Oracle", "Random", "Best-Static"
    ));
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    for row in &report.per_attack {
        out.push_str(&format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            attack_label(row.attack),
            pct(row.scores.no_defense),
            pct(row.scores.dynamite),
            pct(row.scores.oracle),
            pct(row.scores.random),
            pct(row.scores.best_static),
        ));
    }
    out.push_str(&format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "Average",
        pct(report.averages.no_defense),
        pct(report.averages.dynamite),
        pct(report.averages.oracle),
        pct(report.averages.random),
        pct(report.averages.best_static),
    ));
    out.push('\n');

    out.push_str("F1-score Improvement Rate (%)\n");
    out.push_str(&format!(
        "{:<10} {:>12} {:>12}\n",
        "", "Random", "Best-Static"
    ));
    out.push_str(&format!(
        "{:<10} {:>12.1} {:>12.1}\n",
        "Max",
        report.improvement_vs_random.max_pct,
        report.improvement_vs_best_static.max_pct
    ));
    out.push_str(&format!(
        "{:<10} {:>12.1} {:>12.1}\n",
        "Average",
        report.improvement_vs_random.avg_pct,
        report.improvement_vs_best_static.avg_pct
    ));
    out.push('\n');

    if let Some(t) = timing {
        out.push_str("Processing time per sample (ms)\n");
        out.push_str(&format!("{:<12} {:>10.4}\n", "Dynamite", t.dynamite_ms_per_sample));
        out.push_str(&format!("{:<12} {:>10.4}\n", "Oracle", t.oracle_ms_per_sample));
        out.push_str(&format!(
            "{:<12} {:>10.4}\n",
            "Best-static", t.best_static_ms_per_sample
        ));
    }
    out
}

/// Dataset view of one adversarial grid cell (helper shared by the CLI and
/// the evaluation paths).
pub fn cells_as_datasets(
    grid: &crate::attack::AdversarialGrid,
    indices: &[usize],
) -> Result<Vec<Dataset>> {
    indices
        .iter()
        .map(|&i| grid.cell_dataset(&grid.cells[i]))
        .collect()
}

/// Subsamples a dataset's rows deterministically (used for timing cells).
pub fn head_subset(data: &Dataset, n: usize) -> Result<Dataset> {
    let take: Vec<usize> = (0..data.n().min(n)).collect();
    let features = data.features().select(Axis(0), &take);
    let labels = take.iter().map(|&i| data.labels()[i]).collect();
    Dataset::new(
        features,
        labels,
        data.n_classes(),
        data.feature_names().to_vec(),
    )
}
