//! Pilot-backed behavioral checks for training and the attack family on
//! the seeded synthetic benchmark.

use dynamite_core::attack::{
    auto_pgd, fgsm, generate_grid, pgd, AttackKind, AttackParams, DomainBounds,
};
use dynamite_core::data::{
    apply_preprocessor, fit_preprocessor, split, synth_generate, Dataset, SynthSpec,
};
use dynamite_core::eval::{eval_no_defense, macro_f1};
use dynamite_core::nn::{forward, init_mlp, per_sample_ce, predict, train, MlpModel, TrainConfig};
use dynamite_core::seeding::seed_for;
use ndarray::Axis;

const MASTER: u64 = 7;

fn benchmark_data() -> (Dataset, Dataset, DomainBounds) {
    let spec = SynthSpec {
        seed: seed_for(MASTER, "synth"),
        ..Default::default()
    };
    let raw = synth_generate(&spec).unwrap();
    let state = fit_preprocessor(&raw).unwrap();
    let data = apply_preprocessor(&state, &raw).unwrap();
    let bounds = DomainBounds::from_state(&state);
    let (train_ds, test_ds) = split(&data, 0.3, seed_for(MASTER, "split"), true).unwrap();
    (train_ds, test_ds, bounds)
}

fn baseline(train_ds: &Dataset, epochs: usize) -> MlpModel {
    let dims = vec![train_ds.d(), 128, 64, train_ds.n_classes()];
    let model = init_mlp(&dims, seed_for(MASTER, "init")).unwrap();
    let config = TrainConfig {
        epochs,
        seed: seed_for(MASTER, "train"),
        ..Default::default()
    };
    train(model, train_ds, &config).unwrap().0
}

#[test]
fn separable_synthetic_trains_to_high_accuracy() {
    let spec = SynthSpec {
        n_samples: 1000,
        class_separation: 4.0,
        noise_scale: 1.0,
        seed: 5,
        ..Default::default()
    };
    let raw = synth_generate(&spec).unwrap();
    let state = fit_preprocessor(&raw).unwrap();
    let data = apply_preprocessor(&state, &raw).unwrap();
    let dims = vec![data.d(), 128, 64, data.n_classes()];
    let model = init_mlp(&dims, 1).unwrap();
    let config = TrainConfig {
        epochs: 20,
        seed: 2,
        ..Default::default()
    };
    let (model, history) = train(model, &data, &config).unwrap();
    assert_eq!(history.len(), 20);
    let (preds, _) = predict(&model, &data).unwrap();
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    let acc = correct as f64 / data.n() as f64;
    assert!(acc >= 0.98, "training accuracy {acc}");
}

/// PGD at least matches the single-step attack on most samples, and
/// AutoPGD at least matches PGD on average with an equal step budget.
#[test]
fn iterative_attacks_dominate_single_step() {
    let (train_ds, test_ds, bounds) = benchmark_data();
    let model = baseline(&train_ds, 10);
    let eps = 0.2;
    let n_pilot = 100;

    let mut pgd_wins = 0usize;
    let mut pgd_losses = Vec::with_capacity(n_pilot);
    let mut apgd_losses = Vec::with_capacity(n_pilot);
    for i in 0..n_pilot {
        let x = test_ds.features().row(i);
        let y = test_ds.labels()[i];
        let x_fgsm = fgsm(&model, x, y, eps, &bounds).unwrap();
        let x_pgd = pgd(&model, x, y, eps, 20, eps / 4.0, &bounds, 1000 + i as u64).unwrap();
        let x_apgd = auto_pgd(&model, x, y, eps, 20, &bounds, 2000 + i as u64).unwrap();
        let loss = |adv: &ndarray::Array1<f64>| {
            let batch = adv.view().insert_axis(Axis(0)).to_owned();
            per_sample_ce(&forward(&model, &batch).unwrap(), &[y])[0]
        };
        let (lf, lp, la) = (loss(&x_fgsm), loss(&x_pgd), loss(&x_apgd));
        if lp >= lf - 1e-6 {
            pgd_wins += 1;
        }
        pgd_losses.push(lp);
        apgd_losses.push(la);
    }
    assert!(
        pgd_wins >= 80,
        "pgd matched fgsm on only {pgd_wins}/{n_pilot} samples"
    );
    let mean_pgd = pgd_losses.iter().sum::<f64>() / n_pilot as f64;
    let mean_apgd = apgd_losses.iter().sum::<f64>() / n_pilot as f64;
    assert!(
        mean_apgd >= mean_pgd - 1e-3,
        "auto_pgd mean loss {mean_apgd} below pgd {mean_pgd}"
    );
}

#[test]
fn attacks_reduce_macro_f1_and_damage_grows_with_epsilon() {
    let (train_ds, test_ds, bounds) = benchmark_data();
    let model = baseline(&train_ds, 30);
    let params = AttackParams::default();
    let epsilons = [0.01, 0.1, 0.2, 0.3];
    let grid = generate_grid(
        &model,
        &test_ds,
        &[AttackKind::Pgd, AttackKind::Bim],
        &epsilons,
        &bounds,
        seed_for(MASTER, "grid"),
        &params,
    )
    .unwrap();

    let (clean_preds, _) = predict(&model, &test_ds).unwrap();
    let clean = macro_f1(&clean_preds, test_ds.labels(), test_ds.n_classes()).unwrap();

    for kind in [AttackKind::Pgd, AttackKind::Bim] {
        let cells: Vec<Dataset> = epsilons
            .iter()
            .map(|&e| grid.cell_dataset(grid.cell(kind, e).unwrap()).unwrap())
            .collect();
        let scores = eval_no_defense(&model, &cells).unwrap();
        // attacks hurt
        for &s in &scores {
            assert!(s <= clean + 1e-9);
        }
        // non-increasing within slack
        for w in scores.windows(2) {
            assert!(
                w[1] <= w[0] + 0.02,
                "{kind:?} damage not monotone: {scores:?}"
            );
        }
    }
}
