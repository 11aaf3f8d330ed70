use lorpman::network::{backward, forward, Architecture, Batch, Mode, PamalInit, TaskKind};
use lorpman::numeric::{sample_dirichlet, SeededRng};
use lorpman::problems::{make_synthetic, Dataset, SyntheticSpec};
use lorpman::regularization::{orth_loss_network, OrthConfig};
use lorpman::trainer::{build_model, pamal_similarity_trace, train, train_with_observer, OptimizerSpec, TrainConfig, TrainEvent};
use lorpman::{network::ManifoldModel, Error};
use proptest::prelude::*;

fn data(m: usize, u: usize, rows: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec::regression(m, u, 0.5, rows, seed)).unwrap().data
}

fn quiet(mut config: TrainConfig) -> TrainConfig {
    config.eval.per_epoch_hv = false;
    config
}

fn flat_params(model: &mut ManifoldModel) -> Vec<f64> {
    model.param_slices_mut().into_iter().flat_map(|(_, s)| s.to_vec()).collect()
}

#[test]
fn identical_configs_train_identically() {
    let d = data(3, 5, 200, 4);
    let config = TrainConfig { epochs: 3, freeze_epoch: 3, lambda_p: 0.3, hidden: vec![8, 8], rank_r: 2, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut model = build_model(&d, &config).unwrap();
        let record = train(&mut model, &d, &config).unwrap();
        (record, serde_json::to_string(&model).unwrap())
    };
    let (r1, m1) = run();
    let (r2, m2) = run();
    // Wall time is the one field allowed to differ; it is not serialized.
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert_eq!(m1, m2);
    assert_eq!(r1.epoch_val_hv.len(), 3);
    let bits = |r: &lorpman::trainer::RunRecord| r.epoch_train_loss.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&r1), bits(&r2));
}

#[test]
fn plain_full_batch_step_is_the_preference_weighted_gradient() {
    let d = data(3, 4, 100, 2);
    let lr = 0.05;
    for mode in [Mode::Lorpman, Mode::Pamal] {
        let config = quiet(TrainConfig {
            epochs: 1,
            freeze_epoch: 1,
            window_b: 1,
            batch_q: d.train.len(),
            lambda_p: 0.0,
            lambda_o: 0.0,
            hidden: vec![6],
            rank_r: 2,
            optimizer: OptimizerSpec::Sgd { lr },
            mode,
            seed: 3,
            ..TrainConfig::default()
        });
        let mut model = build_model(&d, &config).unwrap();
        // Give the adapters something to differentiate through.
        let mut rng = SeededRng::new(77);
        for (_, s) in model.param_slices_mut() {
            for v in s.iter_mut() {
                *v += 0.1 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
            }
        }
        model.mark_updated();
        let before = flat_params(&mut model.clone());

        let alpha = sample_dirichlet(&config.dirichlet_params(3), &mut SeededRng::stream(config.seed, "train/preferences")).unwrap();
        let mut expected = vec![0.0; before.len()];
        for t in 0..3 {
            let (_, cache) = forward(&model, &alpha, &d.train).unwrap();
            let mut grads = model.zero_gradients();
            let mut w = vec![0.0; 3];
            w[t] = 1.0;
            backward(&model, &cache, &w, false, &mut grads).unwrap();
            for (e, g) in expected.iter_mut().zip(grads.slices().concat()) {
                *e += alpha.get(t) * g;
            }
        }

        train(&mut model, &d, &config).unwrap();
        let after = flat_params(&mut model);
        for ((b, a), g) in before.iter().zip(&after).zip(&expected) {
            assert!((b - lr * g - a).abs() <= 1e-10, "{mode}: {b} - {lr}·{g} vs {a}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn main_weights_are_constant_after_the_freeze_epoch(seed in 0u64..1000, epochs in 1usize..5, freeze_frac in 0.0f64..=1.0) {
        let freeze_epoch = (freeze_frac * epochs as f64).round() as usize;
        let d = data(3, 4, 80, seed);
        let config = quiet(TrainConfig { epochs, freeze_epoch, batch_q: 16, hidden: vec![6], rank_r: 2, seed, ..TrainConfig::default() });
        let mut model = build_model(&d, &config).unwrap();
        let initial = model.main_checksum();
        let mut frozen = Vec::new();
        train_with_observer(&mut model, &d, &config, |e| {
            if let TrainEvent::Iteration { epoch, model, .. } = e {
                if epoch >= freeze_epoch {
                    frozen.push(model.main_checksum());
                }
            }
        }).unwrap();
        if let Some(first) = frozen.first() {
            prop_assert!(frozen.iter().all(|c| c == first));
        }
        if freeze_epoch == 0 {
            prop_assert_eq!(model.main_checksum(), initial);
        }
    }

    #[test]
    fn task_losses_ignore_row_order_and_batching(seed in 0u64..1000, split in 1usize..19) {
        let d = data(3, 4, 100, seed);
        let config = TrainConfig { hidden: vec![5], rank_r: 2, seed, ..TrainConfig::default() };
        let model = build_model(&d, &config).unwrap();
        let alpha = sample_dirichlet(&[1.0; 3], &mut SeededRng::new(seed)).unwrap();
        let v = &d.validation;
        let (full, _) = forward(&model, &alpha, v).unwrap();

        let reversed: Vec<usize> = (0..v.len()).rev().collect();
        let (rev, _) = forward(&model, &alpha, &v.select(&reversed)).unwrap();
        let first: Vec<usize> = (0..split).collect();
        let rest: Vec<usize> = (split..v.len()).collect();
        let (a, _) = forward(&model, &alpha, &v.select(&first)).unwrap();
        let (b, _) = forward(&model, &alpha, &v.select(&rest)).unwrap();
        for t in 0..3 {
            let pooled = (a[t] * split as f64 + b[t] * (v.len() - split) as f64) / v.len() as f64;
            prop_assert!((full[t] - rev[t]).abs() <= 1e-12 * full[t].max(1.0));
            prop_assert!((full[t] - pooled).abs() <= 1e-12 * full[t].max(1.0));
        }
    }
}

#[test]
fn orthogonality_subsets_follow_the_task_count() {
    let config = OrthConfig { lambda_o: 1.0, ..OrthConfig::default() };
    let mut rng = SeededRng::new(5);
    for m in 2..=6 {
        let arch = Architecture { input_dim: 3, hidden: vec![4, 4], tasks: vec![TaskKind::Regression; m], rank: 2, scale: 1.0 };
        let model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        let (v, cache) = orth_loss_network(&model, &mut rng, &config).unwrap();
        // B starts at zero, so every product is skipped.
        assert_eq!(v, 0.0);
        assert_eq!(cache.layers().len(), 2);
        match cache.subset() {
            None => assert!(m <= 3),
            Some(s) => {
                assert!(m > 3);
                assert_eq!(s.len(), 3);
                assert!(s.windows(2).all(|w| w[0] < w[1]) && s[2] < m);
            }
        }
    }
    let arch = Architecture { input_dim: 3, hidden: vec![4], tasks: vec![TaskKind::Regression; 2], rank: 1, scale: 1.0 };
    let pamal = ManifoldModel::new_pamal(&arch, PamalInit::Independent, &mut rng).unwrap();
    assert!(matches!(orth_loss_network(&pamal, &mut rng, &config), Err(Error::Unsupported(_))));
}

#[test]
fn pamal_similarity_starts_where_the_initialization_says() {
    let d = data(2, 40, 200, 1);
    let base = quiet(TrainConfig { epochs: 0, freeze_epoch: 0, mode: Mode::Pamal, hidden: vec![32], ..TrainConfig::default() });
    let identical = TrainConfig { pamal_init: PamalInit::Identical, ..base.clone() };
    let mut model = build_model(&d, &identical).unwrap();
    let trace = pamal_similarity_trace(&mut model, &d, &identical).unwrap();
    assert!((trace[0][0] - 1.0).abs() < 1e-12);

    let mut model = build_model(&d, &base).unwrap();
    let trace = pamal_similarity_trace(&mut model, &d, &base).unwrap();
    assert!(trace[0][0].abs() < 0.1, "32×40 random layers: {}", trace[0][0]);
}

#[test]
fn pamal_bases_grow_more_similar_with_training() {
    let d = data(2, 16, 600, 3);
    let config = quiet(TrainConfig {
        epochs: 15,
        freeze_epoch: 15,
        mode: Mode::Pamal,
        hidden: vec![32],
        optimizer: OptimizerSpec::adam(3e-3),
        ..TrainConfig::default()
    });
    let mut model = build_model(&d, &config).unwrap();
    let trace = pamal_similarity_trace(&mut model, &d, &config).unwrap();
    assert_eq!(trace.len(), config.epochs + 1);
    let first: Vec<f64> = trace.iter().map(|t| t[0]).collect();
    println!("first-layer similarity by epoch: {first:.3?}");
    assert!(first.last().unwrap() > &first[0]);
}

#[test]
fn batch_rows_must_match_the_model() {
    let d = data(3, 4, 60, 0);
    let model = build_model(&d, &TrainConfig { hidden: vec![4], rank_r: 1, ..TrainConfig::default() }).unwrap();
    let other = data(3, 5, 60, 0);
    let alpha = sample_dirichlet(&[1.0; 3], &mut SeededRng::new(0)).unwrap();
    assert!(forward(&model, &alpha, &other.train).is_err());
    let _: &Batch = &d.train;
}
