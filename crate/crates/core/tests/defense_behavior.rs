//! Pilot-backed defense checks: adversarial training recovers what the
//! undefended baseline loses, and every training-based defense stays a
//! usable classifier on the benchmark.

use dynamite_core::attack::{generate_grid, AttackKind, AttackParams, DomainBounds};
use dynamite_core::data::{
    apply_preprocessor, fit_preprocessor, split, synth_generate, Dataset, SynthSpec,
};
use dynamite_core::defense::{
    defended_predict, train_defense, DefenseConfig, DefenseKind,
};
use dynamite_core::eval::macro_f1;
use dynamite_core::nn::{init_mlp, predict, train, MlpModel, TrainConfig};
use dynamite_core::seeding::seed_for;

const MASTER: u64 = 7;

fn pipeline(
    noise_scale: f64,
    baseline_epochs: usize,
) -> (Dataset, Dataset, DomainBounds, MlpModel) {
    let spec = SynthSpec {
        noise_scale,
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
    let config = TrainConfig {
        epochs: baseline_epochs,
        seed: seed_for(MASTER, "train"),
        ..Default::default()
    };
    let (model, _) = train(model, &train_ds, &config).unwrap();
    (train_ds, test_ds, bounds, model)
}

/// Adversarial training recovers at least ten points of the macro-F1 a
/// briefly trained baseline loses under the matching attack, without
/// giving up clean accuracy. Pilot-frozen configuration: low-noise
/// benchmark data, three baseline epochs.
#[test]
fn pgd_at_recovers_attacked_accuracy() {
    let (train_ds, test_ds, bounds, baseline) = pipeline(0.04, 3);
    let eps = 0.1;
    let grid = generate_grid(
        &baseline,
        &test_ds,
        &[AttackKind::Pgd],
        &[eps],
        &bounds,
        seed_for(MASTER, "grid"),
        &AttackParams::default(),
    )
    .unwrap();
    let attacked = grid.cell_dataset(&grid.cells[0]).unwrap();

    let config = DefenseConfig {
        seed: seed_for(MASTER, "defense"),
        ..Default::default()
    };
    let defended = train_defense(DefenseKind::PgdAt, &config, &train_ds, &baseline, &bounds).unwrap();

    let (clean_preds, _) = defended_predict(&defended, &test_ds).unwrap();
    let clean_f1 = macro_f1(&clean_preds, test_ds.labels(), test_ds.n_classes()).unwrap();
    assert!(clean_f1 >= 0.85, "defended clean macro-F1 {clean_f1}");

    let (base_preds, _) = predict(&baseline, &attacked).unwrap();
    let base_f1 = macro_f1(&base_preds, attacked.labels(), attacked.n_classes()).unwrap();
    let (def_preds, _) = defended_predict(&defended, &attacked).unwrap();
    let def_f1 = macro_f1(&def_preds, attacked.labels(), attacked.n_classes()).unwrap();
    assert!(
        def_f1 >= base_f1 + 0.10,
        "pgd_at {def_f1} vs no-defense {base_f1}"
    );
}

/// Every training-based defense remains a usable classifier on the
/// benchmark: clean macro-F1 at or above 0.70.
#[test]
fn training_based_defenses_keep_clean_accuracy() {
    let (train_ds, test_ds, bounds, baseline) = pipeline(0.3, 30);
    let config = DefenseConfig {
        seed: seed_for(MASTER, "defense"),
        ..Default::default()
    };
    for kind in DefenseKind::ALL {
        if kind.is_transform_based() {
            continue;
        }
        let dm = train_defense(kind, &config, &train_ds, &baseline, &bounds).unwrap();
        let (preds, _) = defended_predict(&dm, &test_ds).unwrap();
        let f1 = macro_f1(&preds, test_ds.labels(), test_ds.n_classes()).unwrap();
        assert!(f1 >= 0.70, "{} clean macro-F1 {f1}", kind.name());
    }
}
