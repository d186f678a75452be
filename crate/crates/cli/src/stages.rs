//! The six pipeline stages, each reading hash-verified upstream artifacts
//! and writing its own outputs plus a ledger entry.

use std::path::Path;
use std::time::Instant;

use dynamite_core::attack::{
    dataset_fingerprint, generate_grid, load_grid, save_grid, AdversarialGrid, DomainBounds,
};
use dynamite_core::data::{
    apply_preprocessor, clean, fit_preprocessor, load_csv, split, synth_generate, ColumnSpec,
    Dataset, PreprocessState,
};
use dynamite_core::defense::{
    load_defended, save_defended, train_defense, DefendedModel, DefenseKind,
};
use dynamite_core::error::Error as CoreError;
use dynamite_core::eval::{
    analytic_random_mean, build_report, check_report_invariants, defense_cell_f1s, eval_best_static,
    eval_dynamite, eval_no_defense, eval_oracle, eval_random, head_subset, measure_timing,
    render_text_report, CellResult, EvaluationReport, TimingSummary,
};
use dynamite_core::nn::{init_mlp, load_model, predict, save_model, train};
use dynamite_core::router::{
    build_performance_matrix, gbt_train, label_optimal, load_selector, save_selector,
    select_attack_train_cells, PerformanceMatrix,
};
use dynamite_core::seeding::seed_for;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, PipelineConfig};
use crate::manifest::{require_input, Ledger, OutputCollector, StageManifest};
use crate::CliError;

pub const STAGES: [&str; 6] = [
    "preprocess",
    "train-baseline",
    "gen-attacks",
    "train-defenses",
    "build-router",
    "evaluate",
];

const TRAIN_DS: &str = "train.ds";
const TEST_DS: &str = "test.ds";
const PREPROCESSOR: &str = "preprocessor.json";
const BASELINE: &str = "baseline.model";
const HISTORY: &str = "train_history.json";
const ATTACK_DIR: &str = "attacks";
const ATTACK_MANIFEST: &str = "attacks/manifest.json";
const MATRIX_CSV: &str = "matrix.csv";
const MATRIX_META: &str = "matrix_meta.json";
const SELECTOR: &str = "selector.bin";
const ROUTER_LABELS: &str = "router_labels.json";
const REPORT_JSON: &str = "report.json";
const REPORT_TXT: &str = "report.txt";
const TIMING_JSON: &str = "timing.json";
const NORMALIZED_CONFIG: &str = "config.normalized.json";

fn core(e: CoreError) -> CliError {
    CliError::Core(e.to_string())
}

fn write_json<T: Serialize>(out_dir: &Path, rel: &str, value: &T) -> Result<(), CliError> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Artifact(format!("cannot create {}: {e}", parent.display())))?;
    }
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Artifact(format!("serialize {rel}: {e}")))?;
    std::fs::write(&path, json)
        .map_err(|e| CliError::Artifact(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(out_dir: &Path, rel: &str) -> Result<T, CliError> {
    let path = out_dir.join(rel);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Artifact(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Artifact(format!("corrupt {}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    columns: Vec<ColumnSpec>,
}

#[derive(Serialize, Deserialize)]
struct RouterLabelSummary {
    n_samples: usize,
    label_counts: Vec<(String, usize)>,
    rule1_tie_sizes: Vec<usize>,
    train_cells: Vec<String>,
}

pub fn run_stage(
    stage: &str,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<StageManifest, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Artifact(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut ledger = Ledger::load(out_dir)?;
    let started = Instant::now();
    let config_hash = config.fingerprint();

    let (inputs, outputs, seeds) = match stage {
        "preprocess" => stage_preprocess(config, out_dir)?,
        "train-baseline" => stage_train_baseline(config, out_dir, &ledger, &config_hash)?,
        "gen-attacks" => stage_gen_attacks(config, out_dir, &ledger, &config_hash)?,
        "train-defenses" => stage_train_defenses(config, out_dir, &ledger, &config_hash)?,
        "build-router" => stage_build_router(config, out_dir, &ledger, &config_hash)?,
        "evaluate" => stage_evaluate(config, out_dir, &ledger, &config_hash)?,
        other => {
            return Err(CliError::Config(format!(
                "unknown stage {other:?}; expected one of {STAGES:?}"
            )))
        }
    };

    let manifest = StageManifest {
        stage: stage.to_string(),
        config_hash,
        seeds,
        inputs,
        outputs,
        duration_ms: started.elapsed().as_millis(),
    };
    ledger.append_and_save(out_dir, manifest.clone())?;
    Ok(manifest)
}

/// Runs all six stages in order, stopping at the first failure.
pub fn run_all(config: &PipelineConfig, out_dir: &Path) -> Result<Vec<StageManifest>, CliError> {
    let mut manifests = Vec::with_capacity(STAGES.len());
    for stage in STAGES {
        manifests.push(run_stage(stage, config, out_dir)?);
    }
    Ok(manifests)
}

type StageOutput = (
    Vec<crate::manifest::ArtifactRef>,
    Vec<crate::manifest::ArtifactRef>,
    Vec<(String, u64)>,
);

fn stage_preprocess(config: &PipelineConfig, out_dir: &Path) -> Result<StageOutput, CliError> {
    let raw = match &config.source {
        DataSource::Synth(spec) => synth_generate(spec).map_err(core)?,
        DataSource::Csv { path, schema } => {
            let schema_text = std::fs::read_to_string(schema).map_err(|e| {
                CliError::Config(format!("cannot read schema {}: {e}", schema.display()))
            })?;
            let schema_file: SchemaFile = serde_json::from_str(&schema_text)
                .map_err(|e| CliError::Config(format!("schema {}: {e}", schema.display())))?;
            load_csv(path, &schema_file.columns).map_err(core)?
        }
    };
    let cleaned = clean(&raw, &config.clean).map_err(core)?;
    let state = fit_preprocessor(&cleaned).map_err(core)?;
    let data = apply_preprocessor(&state, &cleaned).map_err(core)?;
    let (train_split, test_split) = split(
        &data,
        config.test_fraction,
        seed_for(config.seed, "split"),
        config.stratified,
    )
    .map_err(core)?;

    train_split.save(out_dir.join(TRAIN_DS)).map_err(core)?;
    test_split.save(out_dir.join(TEST_DS)).map_err(core)?;
    write_json(out_dir, PREPROCESSOR, &state)?;
    write_json(out_dir, NORMALIZED_CONFIG, config)?;

    let mut outputs = OutputCollector::new(out_dir);
    outputs.add(TRAIN_DS)?;
    outputs.add(TEST_DS)?;
    outputs.add(PREPROCESSOR)?;
    outputs.add(NORMALIZED_CONFIG)?;
    Ok((
        vec![],
        outputs.finish(),
        vec![("split".into(), seed_for(config.seed, "split"))],
    ))
}

fn stage_train_baseline(
    config: &PipelineConfig,
    out_dir: &Path,
    ledger: &Ledger,
    config_hash: &str,
) -> Result<StageOutput, CliError> {
    let inputs = vec![require_input(ledger, out_dir, TRAIN_DS, "preprocess", config_hash)?];
    let train_ds = Dataset::load(out_dir.join(TRAIN_DS)).map_err(core)?;
    let mut dims = vec![train_ds.d()];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(train_ds.n_classes());
    let init_seed = seed_for(config.seed, "baseline-init");
    let model = init_mlp(&dims, init_seed).map_err(core)?;
    let (model, history) = train(model, &train_ds, &config.train).map_err(core)?;
    save_model(&model, out_dir.join(BASELINE)).map_err(core)?;
    write_json(out_dir, HISTORY, &history)?;

    let mut outputs = OutputCollector::new(out_dir);
    outputs.add(BASELINE)?;
    outputs.add(HISTORY)?;
    Ok((
        inputs,
        outputs.finish(),
        vec![
            ("baseline-init".into(), init_seed),
            ("baseline-train".into(), config.train.seed),
        ],
    ))
}

fn stage_gen_attacks(
    config: &PipelineConfig,
    out_dir: &Path,
    ledger: &Ledger,
    config_hash: &str,
) -> Result<StageOutput, CliError> {
    let inputs = vec![
        require_input(ledger, out_dir, TEST_DS, "preprocess", config_hash)?,
        require_input(ledger, out_dir, PREPROCESSOR, "preprocess", config_hash)?,
        require_input(ledger, out_dir, BASELINE, "train-baseline", config_hash)?,
    ];
    let test_ds = Dataset::load(out_dir.join(TEST_DS)).map_err(core)?;
    let state: PreprocessState = read_json(out_dir, PREPROCESSOR)?;
    let model = load_model(out_dir.join(BASELINE)).map_err(core)?;
    let bounds = DomainBounds::from_state(&state);
    let grid_seed = seed_for(config.seed, "grid");
    let grid = generate_grid(
        &model,
        &test_ds,
        &config.kinds,
        &config.epsilons,
        &bounds,
        grid_seed,
        &config.attack_params,
    )
    .map_err(core)?;
    save_grid(&grid, out_dir.join(ATTACK_DIR)).map_err(core)?;

    let mut outputs = OutputCollector::new(out_dir);
    outputs.add(ATTACK_MANIFEST)?;
    for cell in &grid.cells {
        outputs.add(&format!("{ATTACK_DIR}/{}.csv", cell.id()))?;
    }
    Ok((inputs, outputs.finish(), vec![("grid".into(), grid_seed)]))
}

fn defense_file(kind: DefenseKind) -> String {
    format!("defenses/{}.dfm", kind.name())
}

fn stage_train_defenses(
    config: &PipelineConfig,
    out_dir: &Path,
    ledger: &Ledger,
    config_hash: &str,
) -> Result<StageOutput, CliError> {
    let inputs = vec![
        require_input(ledger, out_dir, TRAIN_DS, "preprocess", config_hash)?,
        require_input(ledger, out_dir, PREPROCESSOR, "preprocess", config_hash)?,
        require_input(ledger, out_dir, BASELINE, "train-baseline", config_hash)?,
    ];
    let train_ds = Dataset::load(out_dir.join(TRAIN_DS)).map_err(core)?;
    let state: PreprocessState = read_json(out_dir, PREPROCESSOR)?;
    let baseline = load_model(out_dir.join(BASELINE)).map_err(core)?;
    let bounds = DomainBounds::from_state(&state);

    std::fs::create_dir_all(out_dir.join("defenses"))
        .map_err(|e| CliError::Artifact(format!("cannot create defenses dir: {e}")))?;

    // trainings are independent given the frozen baseline
    use rayon::prelude::*;
    let trained: Vec<Result<DefendedModel, CliError>> = DefenseKind::ALL
        .par_iter()
        .map(|&kind| {
            train_defense(kind, &config.defense, &train_ds, &baseline, &bounds).map_err(core)
        })
        .collect();

    let mut outputs = OutputCollector::new(out_dir);
    for result in trained {
        let dm = result?;
        let rel = defense_file(dm.kind);
        save_defended(&dm, out_dir.join(&rel)).map_err(core)?;
        outputs.add(&rel)?;
    }
    Ok((
        inputs,
        outputs.finish(),
        vec![("defenses".into(), config.defense.seed)],
    ))
}

fn load_all_defenses(out_dir: &Path) -> Result<Vec<DefendedModel>, CliError> {
    DefenseKind::ALL
        .iter()
        .map(|&kind| load_defended(out_dir.join(defense_file(kind))).map_err(core))
        .collect()
}

fn grid_inputs(
    ledger: &Ledger,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(Vec<crate::manifest::ArtifactRef>, AdversarialGrid), CliError> {
    let mut inputs = vec![require_input(
        ledger,
        out_dir,
        ATTACK_MANIFEST,
        "gen-attacks",
        config_hash,
    )?];
    let grid = load_grid(out_dir.join(ATTACK_DIR)).map_err(core)?;
    for cell in &grid.cells {
        inputs.push(require_input(
            ledger,
            out_dir,
            &format!("{ATTACK_DIR}/{}.csv", cell.id()),
            "gen-attacks",
            config_hash,
        )?);
    }
    Ok((inputs, grid))
}

fn stage_build_router(
    config: &PipelineConfig,
    out_dir: &Path,
    ledger: &Ledger,
    config_hash: &str,
) -> Result<StageOutput, CliError> {
    let (mut inputs, grid) = grid_inputs(ledger, out_dir, config_hash)?;
    for kind in DefenseKind::ALL {
        inputs.push(require_input(
            ledger,
            out_dir,
            &defense_file(kind),
            "train-defenses",
            config_hash,
        )?);
    }
    let defenses = load_all_defenses(out_dir)?;

    let (train_idx, _) = select_attack_train_cells(&grid, config.train_epsilon).map_err(core)?;
    let train_cells: Vec<(String, Dataset)> = train_idx
        .iter()
        .map(|&i| {
            grid.cell_dataset(&grid.cells[i])
                .map(|d| (grid.cells[i].id(), d))
                .map_err(core)
        })
        .collect::<Result<_, _>>()?;

    let matrix = build_performance_matrix(&defenses, &train_cells).map_err(core)?;
    matrix.save_csv(out_dir.join(MATRIX_CSV)).map_err(core)?;
    write_json(out_dir, MATRIX_META, &matrix)?;

    let training = label_optimal(&defenses, &train_cells, &matrix).map_err(core)?;
    let summary = RouterLabelSummary {
        n_samples: training.n(),
        label_counts: DefenseKind::ALL
            .iter()
            .zip(training.label_counts())
            .map(|(k, c)| (k.name().to_string(), c))
            .collect(),
        rule1_tie_sizes: training
            .tie_masks
            .iter()
            .map(|m| m.count_ones() as usize)
            .collect(),
        train_cells: train_cells.iter().map(|(id, _)| id.clone()).collect(),
    };
    write_json(out_dir, ROUTER_LABELS, &summary)?;

    let selector = gbt_train(&training, &config.selector).map_err(core)?;
    save_selector(&selector, out_dir.join(SELECTOR)).map_err(core)?;

    let mut outputs = OutputCollector::new(out_dir);
    outputs.add(MATRIX_CSV)?;
    outputs.add(MATRIX_META)?;
    outputs.add(ROUTER_LABELS)?;
    outputs.add(SELECTOR)?;
    Ok((
        inputs,
        outputs.finish(),
        vec![("selector".into(), config.selector.seed)],
    ))
}

fn stage_evaluate(
    config: &PipelineConfig,
    out_dir: &Path,
    ledger: &Ledger,
    config_hash: &str,
) -> Result<StageOutput, CliError> {
    let (mut inputs, grid) = grid_inputs(ledger, out_dir, config_hash)?;
    for kind in DefenseKind::ALL {
        inputs.push(require_input(
            ledger,
            out_dir,
            &defense_file(kind),
            "train-defenses",
            config_hash,
        )?);
    }
    inputs.push(require_input(ledger, out_dir, BASELINE, "train-baseline", config_hash)?);
    inputs.push(require_input(ledger, out_dir, MATRIX_META, "build-router", config_hash)?);
    inputs.push(require_input(ledger, out_dir, SELECTOR, "build-router", config_hash)?);

    let defenses = load_all_defenses(out_dir)?;
    let baseline = load_model(out_dir.join(BASELINE)).map_err(core)?;
    let matrix: PerformanceMatrix = read_json(out_dir, MATRIX_META)?;
    let selector = load_selector(out_dir.join(SELECTOR)).map_err(core)?;

    let (train_idx, mut test_idx) =
        select_attack_train_cells(&grid, config.train_epsilon).map_err(core)?;
    if test_idx.is_empty() {
        eprintln!(
            "warning: every grid cell has epsilon {}; attack-train and attack-test coincide",
            config.train_epsilon
        );
        test_idx = train_idx;
    }
    let test_cells: Vec<Dataset> = test_idx
        .iter()
        .map(|&i| grid.cell_dataset(&grid.cells[i]).map_err(core))
        .collect::<Result<_, _>>()?;

    let no_defense = eval_no_defense(&baseline, &test_cells).map_err(core)?;
    let random_seed = seed_for(config.seed, "eval-random");
    let random = eval_random(&defenses, &test_cells, config.random_trials, random_seed)
        .map_err(core)?;
    let (best_static_id, best_static) =
        eval_best_static(&matrix, &defenses, &test_cells).map_err(core)?;
    let oracle = eval_oracle(&defenses, &test_cells).map_err(core)?;
    let dynamite = eval_dynamite(&selector, &defenses, &test_cells).map_err(core)?;

    let mut per_cell = Vec::with_capacity(test_cells.len());
    let mut per_cell_f1s = Vec::with_capacity(test_cells.len());
    for (j, &i) in test_idx.iter().enumerate() {
        let cell = &grid.cells[i];
        per_cell_f1s.push(defense_cell_f1s(&defenses, &test_cells[j]).map_err(core)?);
        per_cell.push(CellResult {
            attack: cell.kind,
            epsilon: cell.epsilon,
            n: cell.n(),
            no_defense: no_defense[j],
            dynamite: dynamite[j].clone(),
            oracle_defense: oracle[j].0,
            oracle: oracle[j].1,
            random: random[j],
            best_static: best_static[j],
        });
    }

    let report = build_report(
        per_cell,
        config_hash.to_string(),
        config.seed,
        defenses[best_static_id].kind.name().to_string(),
    )
    .map_err(core)?;

    check_report_invariants(&report, &per_cell_f1s)
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    // the random baseline must track its analytic expectation
    for (j, cell) in test_cells.iter().enumerate() {
        let analytic = analytic_random_mean(&defenses, cell).map_err(core)?;
        let tolerance = 2.0 / (config.random_trials as f64).sqrt();
        if (report.per_cell[j].random - analytic).abs() > tolerance.max(0.005) {
            return Err(CliError::Invariant(format!(
                "random baseline {} drifted from analytic mean {analytic} on cell {}",
                report.per_cell[j].random, report.per_cell[j].epsilon
            )));
        }
    }

    // timing runs single-threaded on a truncated canonical cell
    let timing_cell = head_subset(&test_cells[0], config.timing_max_samples).map_err(core)?;
    let timing: TimingSummary = measure_timing(
        &selector,
        &defenses,
        best_static_id,
        &timing_cell,
        config.timing_repeats,
    )
    .map_err(core)?;

    write_json(out_dir, REPORT_JSON, &report)?;
    write_json(out_dir, TIMING_JSON, &timing)?;
    let text = render_text_report(&report, Some(&timing));
    std::fs::write(out_dir.join(REPORT_TXT), text)
        .map_err(|e| CliError::Artifact(format!("cannot write report.txt: {e}")))?;

    let mut outputs = OutputCollector::new(out_dir);
    outputs.add(REPORT_JSON)?;
    outputs.add_volatile(TIMING_JSON)?;
    outputs.add_volatile(REPORT_TXT)?;
    Ok((
        inputs,
        outputs.finish(),
        vec![("eval-random".into(), random_seed)],
    ))
}

/// Re-renders `report.txt` from the stored report and timing artifacts.
pub fn rerender_report(out_dir: &Path) -> Result<(), CliError> {
    let report: EvaluationReport = read_json(out_dir, REPORT_JSON)?;
    let timing: Option<TimingSummary> = if out_dir.join(TIMING_JSON).exists() {
        Some(read_json(out_dir, TIMING_JSON)?)
    } else {
        None
    };
    let text = render_text_report(&report, timing.as_ref());
    std::fs::write(out_dir.join(REPORT_TXT), text)
        .map_err(|e| CliError::Artifact(format!("cannot write report.txt: {e}")))?;
    println!("{}", std::fs::read_to_string(out_dir.join(REPORT_TXT)).unwrap_or_default());
    Ok(())
}

/// Helper shared with the acceptance suite: the baseline's clean macro-F1
/// on the stored test split.
pub fn baseline_clean_f1(out_dir: &Path) -> Result<f64, CliError> {
    let test_ds = Dataset::load(out_dir.join(TEST_DS)).map_err(core)?;
    let model = load_model(out_dir.join(BASELINE)).map_err(core)?;
    let (preds, _) = predict(&model, &test_ds).map_err(core)?;
    dynamite_core::eval::macro_f1(&preds, test_ds.labels(), test_ds.n_classes()).map_err(core)
}

/// Fingerprint of the stored test split (provenance checks in tests).
pub fn test_split_fingerprint(out_dir: &Path) -> Result<String, CliError> {
    let test_ds = Dataset::load(out_dir.join(TEST_DS)).map_err(core)?;
    Ok(dataset_fingerprint(&test_ds))
}
