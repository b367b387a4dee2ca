use nasforge::arch::{Activation, ArchDescription, Block, CellDescription, CellIndices, Combiner, ConvArch, ConvLayerSpec, SearchSpace};
use nasforge::child::{
    char_toy, char_toy_vocab, constant_label, copy_memory, grid_search, separable_images, synthetic_shapes, train_child,
    ChildModel, Dataset, Evaluator, Grid, Metric, RiggedLandscape, TaskEvaluator, TrainConfig, CHAR_TOY_TEXT,
};
use nasforge::compiler::{ConvOptions, RecurrentCell};

fn one_layer(filters: usize) -> ChildModel {
    ChildModel::Conv {
        arch: ConvArch {
            layers: vec![ConvLayerSpec {
                filter_height: 3,
                filter_width: 3,
                stride_height: 1,
                stride_width: 1,
                num_filters: filters,
                skip_inputs: Default::default(),
            }],
        },
        options: ConvOptions {
            skip_connections: true,
            pool_after: vec![],
            norm_epsilon: 1e-5,
        },
    }
}

fn identity_cell() -> CellDescription {
    CellDescription {
        nodes: vec![Block::new(Combiner::Add, Activation::Identity); 3],
        inject: Block::new(Combiner::Add, Activation::Identity),
        indices: CellIndices { output: 0, target: 0 },
    }
}

#[test]
fn separable_task_is_learned_within_ten_epochs() {
    let task = separable_images(1, [256, 128, 64]).unwrap();
    for filters in [1, 4] {
        let cfg = TrainConfig {
            seed: filters as u64,
            ..TrainConfig::desk_images()
        };
        let r = train_child(&one_layer(filters), &task.view(), &cfg).unwrap();
        assert_eq!(r.history.len(), 10);
        assert!(*r.history.last().unwrap() >= 0.95, "{:?}", r.history);
    }
}

#[test]
fn constant_label_task_reaches_perfect_accuracy() {
    let task = constant_label(2, [128, 128, 32]).unwrap();
    let r = train_child(&one_layer(2), &task.view(), &TrainConfig::desk_images()).unwrap();
    assert_eq!(*r.history.last().unwrap(), 1.0);
    // With no training an untrained classifier is near the class prior.
    let lazy = TrainConfig {
        epochs: 1,
        optimizer: nasforge::numeric::OptimizerConfig::momentum(0.0, 0.0),
        ..TrainConfig::desk_images()
    };
    let mut mean = 0.0;
    for seed in 0..20 {
        let r = train_child(&one_layer(2), &task.view(), &TrainConfig { seed, ..lazy.clone() }).unwrap();
        mean += r.history[0] / 20.0;
    }
    assert!((0.1..0.45).contains(&mean), "{mean}");
}

#[test]
fn history_length_equals_epochs_and_training_is_deterministic() {
    let task = synthetic_shapes(3, [96, 64, 32]).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::desk_images()
    };
    let a = train_child(&one_layer(3), &task.view(), &cfg).unwrap();
    let b = train_child(&one_layer(3), &task.view(), &cfg).unwrap();
    assert_eq!(a.history.len(), 3);
    assert_eq!(a, b);
    let bits = |r: &nasforge::child::EvalResult| r.history.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn divergence_pins_the_metric_to_its_worst_value() {
    let task = copy_memory(0, [64, 32, 32], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        optimizer: nasforge::numeric::OptimizerConfig::momentum(10.0, 0.9),
        clip_norm: None,
        ..TrainConfig::desk_sequences()
    };
    // A linear recurrence with a huge step size blows up.
    let r = train_child(&ChildModel::Recurrent(RecurrentCell::Tree(identity_cell())), &task.view(), &cfg).unwrap();
    assert!(r.diverged);
    assert_eq!(*r.history.last().unwrap(), 1e6);
    assert_eq!(r.history.len(), 4);
}

#[test]
fn synthetic_shapes_generation_is_reproducible() {
    let a = synthetic_shapes(11, [40, 8, 8]).unwrap();
    let b = synthetic_shapes(11, [40, 8, 8]).unwrap();
    let c = synthetic_shapes(12, [40, 8, 8]).unwrap();
    assert_eq!(a.view().train.data(), b.view().train.data());
    assert_eq!(a.test().data(), b.test().data());
    assert_ne!(a.view().train.data(), c.view().train.data());
    let Dataset::Images(s) = a.view().train.data() else { panic!() };
    assert_eq!(s.shape, [8, 8, 3]);
    assert_eq!(s.classes, 4);
    let full = synthetic_shapes(0, [4000, 800, 800]).unwrap();
    assert_eq!((full.view().train.len(), full.view().valid.len(), full.test().len()), (4000, 800, 800));
}

#[test]
fn copy_memory_targets_are_determined_so_a_perfect_model_has_perplexity_one() {
    let task = copy_memory(5, [200, 10, 10], 4).unwrap();
    let Dataset::Sequences(s) = task.view().train.data() else { panic!() };
    assert_eq!((s.vocab, s.length), (8, 30));
    assert_eq!(s.scored, (26..30).collect::<Vec<_>>());
    let mut gaps = std::collections::BTreeSet::new();
    for (x, y) in s.inputs.iter().zip(&s.targets) {
        assert_eq!(x[25], 7);
        // The answer is the data run, fully determined by the input.
        let data: Vec<usize> = x[..25].iter().copied().filter(|&v| v != 0).collect();
        assert_eq!(&y[26..], &data[..]);
        let end = x[..25].iter().rposition(|&v| v != 0).unwrap();
        assert_eq!(x[end + 1 - 4..=end], data[..]);
        gaps.insert(24 - end);
    }
    assert_eq!(gaps, (0..=nasforge::child::COPY_MAX_GAP).collect());
    // Probability 1 on every target gives mean NLL 0.
    let nll: f64 = s.scored.iter().map(|_| -(1.0f64).ln()).sum::<f64>() / s.scored.len() as f64;
    assert_eq!(nll.exp(), 1.0);
}

#[test]
fn char_toy_vocabulary_matches_the_bundled_text() {
    let v = char_toy_vocab();
    let distinct: std::collections::HashSet<char> = CHAR_TOY_TEXT.chars().collect();
    assert_eq!(v.len(), distinct.len());
    assert_eq!(v.len(), 69);
    let task = char_toy(32).unwrap();
    assert_eq!(task.metric, Metric::Perplexity);
    let Dataset::Sequences(s) = task.view().train.data() else { panic!() };
    assert_eq!(s.vocab, 69);
    // 90/5/5 in order.
    let total = CHAR_TOY_TEXT.chars().count();
    assert!((s.len() * 32) as f64 / total as f64 > 0.89);
}

#[test]
fn lstm_beats_the_identity_cell_on_copy_memory() {
    let task = copy_memory(7, [2048, 256, 256], 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::desk_sequences()
    };
    let ev = TaskEvaluator::new(task, SearchSpace::Cell(Default::default()), cfg).unwrap();
    for seed in 0..5 {
        let lstm = ev.train(&ChildModel::Recurrent(RecurrentCell::Lstm), seed).unwrap();
        let id = ev.train(&ChildModel::Recurrent(RecurrentCell::Tree(identity_cell())), seed).unwrap();
        assert!(
            lstm.selection_metric() < id.selection_metric(),
            "seed {seed}: {} vs {}",
            lstm.selection_metric(),
            id.selection_metric()
        );
    }
}

#[test]
fn cell_param_count_follows_the_manifest() {
    let task = copy_memory(1, [32, 32, 32], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::desk_sequences()
    };
    let cell = RecurrentCell::Tree(CellDescription::tanh_rnn(2));
    let r = train_child(&ChildModel::Recurrent(cell.clone()), &task.view(), &cfg).unwrap();
    let h = nasforge::compiler::hidden_for_budget(&cell, 8, cfg.embed_dim, cfg.param_budget);
    assert_eq!(r.param_count, nasforge::compiler::sequence_param_count(&cell, 8, cfg.embed_dim, h));
    assert!(r.param_count <= cfg.param_budget);
    assert_eq!(cell.param_count(cfg.embed_dim, h), 2 * h * (h + cfg.embed_dim));
}

#[test]
fn grid_of_one_equals_train_child_plus_a_test_evaluation() {
    let task = separable_images(4, [128, 64, 64]).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::desk_images()
    };
    let out = grid_search(&one_layer(2), &task, &cfg, &Grid::single(&cfg)).unwrap();
    let direct = train_child(&one_layer(2), &task.view(), &cfg).unwrap();
    assert_eq!(out.trials.len(), 1);
    assert_eq!(out.result.history, direct.history);
    assert!(out.result.test.is_some());
    assert_eq!(out.config, cfg);
}

#[test]
fn zero_learning_rate_never_wins_the_grid() {
    let task = separable_images(5, [128, 64, 64]).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::desk_images()
    };
    let grid = Grid {
        learning_rates: vec![0.0, 0.01, 0.1],
        weight_decays: vec![0.0, 1e-4],
        norm_epsilons: vec![1e-5],
        decay_epochs: vec![None, Some(3)],
    };
    let out = grid_search(&one_layer(2), &task, &cfg, &grid).unwrap();
    assert_eq!(out.trials.len(), 12);
    assert!(out.config.optimizer.learning_rate > 0.0);
    let win = out.result.selection_metric();
    for (i, (p, r)) in out.trials.iter().enumerate() {
        // Selection law: the winner is at least as good as every trial, and
        // strictly better than every earlier one.
        assert!(win >= r.selection_metric());
        if i < out.winner {
            assert!(win > r.selection_metric());
        }
        if p.learning_rate == 0.0 {
            assert!(win > r.selection_metric(), "lr 0 tied the winner");
        }
    }
    assert_eq!(out.trials.iter().filter(|(_, r)| r.test.is_some()).count(), 0);
    assert!(out.result.test.is_some());
}

#[test]
fn test_split_never_reaches_the_reward() {
    let task = synthetic_shapes(8, [64, 32, 32]).unwrap();
    // Replace the test images with NaNs: any leak into training or rewards
    // would change (or break) the results.
    let Dataset::Images(mut poison) = task.test().data().clone() else { panic!() };
    poison.pixels.iter_mut().for_each(|p| *p = f64::NAN);
    poison.labels.iter_mut().for_each(|l| *l = 3);
    let poisoned = task.clone().with_test(Dataset::Images(poison));
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk_images()
    };
    let space = SearchSpace::Conv(Default::default());
    let a = TaskEvaluator::new(task, space.clone(), cfg.clone()).unwrap();
    let b = TaskEvaluator::new(poisoned, space, cfg).unwrap();
    let desc = ArchDescription::Conv(match one_layer(4) {
        ChildModel::Conv { arch, .. } => arch,
        _ => unreachable!(),
    });
    assert_eq!(a.evaluate(&desc, 1).unwrap(), b.evaluate(&desc, 1).unwrap());
}

#[test]
fn rigged_landscape_peaks_at_the_planted_cell() {
    let land = RiggedLandscape::new(3);
    let planted = nasforge::arch::decode(land.space(), land.planted()).unwrap();
    assert_eq!(land.agreement(&planted).unwrap(), 1.0);
    assert!((land.mean_reward(&planted).unwrap() - 0.8).abs() < 1e-12);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut total = 0.0;
    for s in 0..2000u64 {
        let d = nasforge::arch::sample_uniform(land.space(), 0, &mut rng);
        let a = land.agreement(&d).unwrap();
        assert!((0.0..=1.0).contains(&a));
        let o = land.evaluate(&d, s).unwrap();
        assert_eq!(o, land.evaluate(&d, s).unwrap());
        total += o.reward - land.mean_reward(&d).unwrap();
    }
    // Zero-mean noise.
    assert!((total / 2000.0).abs() < 0.005);
}
