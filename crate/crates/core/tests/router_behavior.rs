//! End-to-end router check on the benchmark: on a held-out slice of the
//! attack-training samples, the routed score keeps up with the best
//! static defense.

use dynamite_core::attack::{generate_grid, AttackKind, AttackParams, DomainBounds};
use dynamite_core::data::{
    apply_preprocessor, fit_preprocessor, split, synth_generate, Dataset, SynthSpec,
};
use dynamite_core::defense::{train_defense, DefendedModel, DefenseConfig, DefenseKind};
use dynamite_core::eval::{defense_cell_f1s, dynamite_score};
use dynamite_core::nn::{init_mlp, train, TrainConfig};
use dynamite_core::router::{
    build_performance_matrix, gbt_predict, gbt_train, label_optimal, select_attack_train_cells,
    GbtConfig, SelectorTrainingSet,
};
use dynamite_core::seeding::seed_for;
use ndarray::Axis;
use rayon::prelude::*;

const MASTER: u64 = 7;

#[test]
fn routed_score_keeps_up_with_best_static_on_holdout() {
    let spec = SynthSpec {
        seed: seed_for(MASTER, "synth"),
        ..Default::default()
    };
    let raw = synth_generate(&spec).unwrap();
    let state = fit_preprocessor(&raw).unwrap();
    let data = apply_preprocessor(&state, &raw).unwrap();
    let bounds = DomainBounds::from_state(&state);
    let (train_ds, test_ds) = split(&data, 0.3, seed_for(MASTER, "split"), true).unwrap();
    let dims = vec![train_ds.d(), 128, 64, train_ds.n_classes()];
    let model = init_mlp(&dims, seed_for(MASTER, "init")).unwrap();
    let (model, _) = train(
        model,
        &train_ds,
        &TrainConfig {
            seed: seed_for(MASTER, "train"),
            ..Default::default()
        },
    )
    .unwrap();

    // attack-train cells only: every kind at the training epsilon
    let grid = generate_grid(
        &model,
        &test_ds,
        &AttackKind::ALL,
        &[0.1],
        &bounds,
        seed_for(MASTER, "grid"),
        &AttackParams::default(),
    )
    .unwrap();
    let (train_idx, _) = select_attack_train_cells(&grid, 0.1).unwrap();
    assert_eq!(train_idx.len(), 6);

    let dconfig = DefenseConfig {
        seed: seed_for(MASTER, "defense"),
        ..Default::default()
    };
    let defenses: Vec<DefendedModel> = DefenseKind::ALL
        .par_iter()
        .map(|&k| train_defense(k, &dconfig, &train_ds, &model, &bounds).unwrap())
        .collect();

    let cells: Vec<(String, Dataset)> = train_idx
        .iter()
        .map(|&i| {
            (
                grid.cells[i].id(),
                grid.cell_dataset(&grid.cells[i]).unwrap(),
            )
        })
        .collect();
    let matrix = build_performance_matrix(&defenses, &cells).unwrap();
    let training = label_optimal(&defenses, &cells, &matrix).unwrap();

    // deterministic 80/20 split of the stacked attack-train samples
    let holdout: Vec<usize> = (0..training.n()).filter(|i| i % 5 == 0).collect();
    let keep: Vec<usize> = (0..training.n()).filter(|i| i % 5 != 0).collect();
    let fit_set = SelectorTrainingSet {
        features: training.features.select(Axis(0), &keep),
        labels: keep.iter().map(|&i| training.labels[i]).collect(),
        n_classes: training.n_classes,
        tie_masks: keep.iter().map(|&i| training.tie_masks[i]).collect(),
    };
    let selector = gbt_train(
        &fit_set,
        &GbtConfig {
            seed: seed_for(MASTER, "selector"),
            ..Default::default()
        },
    )
    .unwrap();

    // the held-out slice as one evaluation cell
    let holdout_features = training.features.select(Axis(0), &holdout);
    // labels here are the *class* labels of the original samples: rebuild
    // them by walking the stacked cells in order
    let mut class_labels = Vec::with_capacity(training.n());
    for (_, cell) in &cells {
        class_labels.extend_from_slice(cell.labels());
    }
    let holdout_cell = Dataset::new(
        holdout_features,
        holdout.iter().map(|&i| class_labels[i]).collect(),
        test_ds.n_classes(),
        test_ds.feature_names().to_vec(),
    )
    .unwrap();

    let assignments: Vec<usize> = holdout_cell
        .features()
        .rows()
        .into_iter()
        .map(|row| gbt_predict(&selector, row))
        .collect();
    let routed = dynamite_score(&assignments, &defenses, &holdout_cell).unwrap();

    let best_static = matrix.best_static_defense();
    let static_f1 = defense_cell_f1s(&defenses, &holdout_cell).unwrap()[best_static];

    assert!(
        routed.score >= static_f1 - 0.02,
        "routed {} vs best-static {static_f1}",
        routed.score
    );
}
