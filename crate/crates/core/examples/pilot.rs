// Scratch calibration run for the synthetic benchmark defaults.

use dynamite_core::attack::{generate_grid, AttackKind, AttackParams, DomainBounds};
use dynamite_core::data::{
    apply_preprocessor, clean, fit_preprocessor, split, synth_generate, CleanSpec, SynthSpec,
};
use dynamite_core::defense::{
    defended_predict, train_defense, DefenseConfig, DefenseKind, InnerAttackConfig,
};
use dynamite_core::eval::{defense_cell_f1s, eval_no_defense, macro_f1};
use dynamite_core::nn::{init_mlp, predict, train, TrainConfig};
use dynamite_core::seeding::seed_for;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let master = 7u64;

    let spec = SynthSpec {
        noise_scale: noise,
        seed: seed_for(master, "synth"),
        ..Default::default()
    };
    let raw = synth_generate(&spec).unwrap();
    let cleaned = clean(
        &raw,
        &CleanSpec {
            drop_constant: true,
            drop_duplicates: true,
            drop_listed: vec![],
        },
    )
    .unwrap();
    let state = fit_preprocessor(&cleaned).unwrap();
    let data = apply_preprocessor(&state, &cleaned).unwrap();
    let (train_ds, test_ds) = split(&data, 0.3, seed_for(master, "split"), true).unwrap();
    println!(
        "train {} test {} d {} C {}",
        train_ds.n(),
        test_ds.n(),
        train_ds.d(),
        train_ds.n_classes()
    );

    let dims = vec![train_ds.d(), 128, 64, train_ds.n_classes()];
    let model = init_mlp(&dims, seed_for(master, "init")).unwrap();
    let config = TrainConfig {
        epochs,
        seed: seed_for(master, "train"),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (model, history) = train(model, &train_ds, &config).unwrap();
    println!(
        "baseline trained in {:.1}s, final loss {:.4}",
        t0.elapsed().as_secs_f64(),
        history.last().unwrap()
    );

    let (preds, _) = predict(&model, &test_ds).unwrap();
    let clean_f1 = macro_f1(&preds, test_ds.labels(), test_ds.n_classes()).unwrap();
    let (preds_tr, _) = predict(&model, &train_ds).unwrap();
    let train_f1 = macro_f1(&preds_tr, train_ds.labels(), train_ds.n_classes()).unwrap();
    println!("clean macro-F1: test {clean_f1:.4} train {train_f1:.4}");

    let bounds = DomainBounds::from_state(&state);
    let params = AttackParams::default();
    let epsilons = [0.01, 0.1, 0.2, 0.3];
    let t1 = std::time::Instant::now();
    let fast = std::env::var("PILOT_FAST").is_ok();
    let kinds: Vec<AttackKind> = if fast {
        vec![AttackKind::Fgsm, AttackKind::Pgd]
    } else {
        vec![AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd, AttackKind::AutoPgd, AttackKind::DeepFool, AttackKind::Zoo]
    };
    let grid = generate_grid(
        &model,
        &test_ds,
        &kinds,
        &epsilons,
        &bounds,
        seed_for(master, "grid"),
        &params,
    )
    .unwrap();
    println!("grid generated in {:.1}s", t1.elapsed().as_secs_f64());

    let cells: Vec<_> = grid
        .cells
        .iter()
        .map(|c| grid.cell_dataset(c).unwrap())
        .collect();
    let no_def = eval_no_defense(&model, &cells).unwrap();
    for (cell, f1) in grid.cells.iter().zip(&no_def) {
        println!("no-defense {:>22}: {:.4}", cell.id(), f1);
    }

    // PgdAT pilot
    let at_eps: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let dconfig = DefenseConfig {
        attack_for_training: InnerAttackConfig { epsilon: at_eps, ..Default::default() },
        train: TrainConfig {
            epochs: 15,
            ..Default::default()
        },
        seed: seed_for(master, "defense"),
        ..Default::default()
    };
    let t2 = std::time::Instant::now();
    let pgd_at = train_defense(DefenseKind::PgdAt, &dconfig, &train_ds, &model, &bounds).unwrap();
    println!("pgd_at trained in {:.1}s", t2.elapsed().as_secs_f64());
    let (dp, _) = defended_predict(&pgd_at, &test_ds).unwrap();
    let pgd_at_clean = macro_f1(&dp, test_ds.labels(), test_ds.n_classes()).unwrap();
    println!("pgd_at clean {:.4}", pgd_at_clean);
    for eps in epsilons {
        let cell = grid.cell(AttackKind::Pgd, eps).unwrap();
        let ds = grid.cell_dataset(cell).unwrap();
        let f1s = defense_cell_f1s(std::slice::from_ref(&pgd_at), &ds).unwrap();
        let idx = grid
            .cells
            .iter()
            .position(|c| c.kind == AttackKind::Pgd && c.epsilon == eps)
            .unwrap();
        println!(
            "pgd_at pgd@{eps}: {:.4} vs no-defense {:.4} (delta {:+.4})",
            f1s[0],
            no_def[idx],
            f1s[0] - no_def[idx]
        );
    }

    if std::env::var("PILOT_FULL").is_err() {
        return;
    }

    // full routing pipeline
    use dynamite_core::eval::{
        eval_best_static, eval_dynamite, eval_oracle, eval_random, measure_timing,
    };
    use dynamite_core::router::{
        build_performance_matrix, gbt_train, label_optimal, select_attack_train_cells, GbtConfig,
    };
    use rayon::prelude::*;

    let t3 = std::time::Instant::now();
    let defenses: Vec<_> = DefenseKind::ALL
        .par_iter()
        .map(|&kind| train_defense(kind, &dconfig, &train_ds, &model, &bounds).unwrap())
        .collect();
    println!("9 defenses trained in {:.1}s", t3.elapsed().as_secs_f64());
    for dm in &defenses {
        let (p, _) = defended_predict(dm, &test_ds).unwrap();
        let f1 = macro_f1(&p, test_ds.labels(), test_ds.n_classes()).unwrap();
        println!("defense {:>24} clean F1 {:.4}", dm.kind.name(), f1);
    }

    let (train_cells_idx, test_cells_idx) = select_attack_train_cells(&grid, 0.1).unwrap();
    println!(
        "attack-train cells {} attack-test cells {}",
        train_cells_idx.len(),
        test_cells_idx.len()
    );
    let train_cells: Vec<(String, dynamite_core::data::Dataset)> = train_cells_idx
        .iter()
        .map(|&i| {
            (
                grid.cells[i].id(),
                grid.cell_dataset(&grid.cells[i]).unwrap(),
            )
        })
        .collect();
    let t4 = std::time::Instant::now();
    let matrix = build_performance_matrix(&defenses, &train_cells).unwrap();
    println!("matrix built in {:.1}s", t4.elapsed().as_secs_f64());
    for (i, name) in matrix.defense_names.iter().enumerate() {
        println!(
            "row {:>24}: avg {:.4} | {:?}",
            name,
            matrix.row_average(i),
            matrix.entries[i]
                .iter()
                .map(|v| (v * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        );
    }
    let training = label_optimal(&defenses, &train_cells, &matrix).unwrap();
    println!("selector training set n {} counts {:?}", training.n(), training.label_counts());
    let t5 = std::time::Instant::now();
    let selector = gbt_train(
        &training,
        &GbtConfig {
            seed: seed_for(master, "selector"),
            ..Default::default()
        },
    )
    .unwrap();
    println!("selector trained in {:.1}s", t5.elapsed().as_secs_f64());

    let test_cells: Vec<dynamite_core::data::Dataset> = test_cells_idx
        .iter()
        .map(|&i| grid.cell_dataset(&grid.cells[i]).unwrap())
        .collect();
    let nd = eval_no_defense(&model, &test_cells).unwrap();
    let random = eval_random(&defenses, &test_cells, 100, seed_for(master, "random")).unwrap();
    let (bs_id, best_static) = eval_best_static(&matrix, &defenses, &test_cells).unwrap();
    let oracle = eval_oracle(&defenses, &test_cells).unwrap();
    let dynamite = eval_dynamite(&selector, &defenses, &test_cells).unwrap();
    println!("best-static defense: {}", defenses[bs_id].kind.name());
    let mut sums = [0.0; 5];
    for (j, &i) in test_cells_idx.iter().enumerate() {
        println!(
            "{:>22}: nodef {:.3} dynamite {:.3} oracle {:.3} random {:.3} best-static {:.3}",
            grid.cells[i].id(),
            nd[j],
            dynamite[j].score,
            oracle[j].1,
            random[j],
            best_static[j]
        );
        sums[0] += nd[j];
        sums[1] += dynamite[j].score;
        sums[2] += oracle[j].1;
        sums[3] += random[j];
        sums[4] += best_static[j];
    }
    let n = test_cells.len() as f64;
    println!(
        "MEANS: nodef {:.4} dynamite {:.4} oracle {:.4} random {:.4} best-static {:.4}",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n
    );
    println!(
        "criterion7: dyn-random {:+.4} (need >= +0.05), dyn-beststatic {:+.4} (need >= -0.02)",
        (sums[1] - sums[3]) / n,
        (sums[1] - sums[4]) / n
    );
    for (j, &i) in test_cells_idx.iter().enumerate() {
        let id = grid.cells[i].id();
        if id.contains("fgsm") || id.contains("deepfool_eps0.2") {
            let f1s = defense_cell_f1s(&defenses, &test_cells[j]).unwrap();
            println!(
                "perdef {:>22}: {:?}",
                id,
                f1s.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
    let timing = measure_timing(&selector, &defenses, bs_id, &test_cells[0], 5).unwrap();
    println!(
        "timing ms/sample: dynamite {:.4} oracle {:.4} best-static {:.4} ratio {:.3}",
        timing.dynamite_ms_per_sample,
        timing.oracle_ms_per_sample,
        timing.best_static_ms_per_sample,
        timing.dynamite_ms_per_sample / timing.oracle_ms_per_sample
    );
}
