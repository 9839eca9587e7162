use super::*;
use crate::attention::MnaConfig;
use crate::synthetic::{random_dataset, triangles_vs_paths};
use crate::tensor::Tensor;

fn small_model(in_dim: usize) -> ModelConfig {
    ModelConfig {
        in_dim,
        num_classes: 2,
        layers: 2,
        ffn_dim: 32,
        mna: MnaConfig { max_hop: 2, heads: 2, dim: 16, head_dim: 8, dropout: 0.1, ..MnaConfig::default() },
        ..ModelConfig::default()
    }
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 5e-3, epochs, batch_size: 16, seeds: vec![7], ..TrainConfig::default() }
}

fn checksum(store: &ParamStore<f32>) -> Vec<u32> {
    store.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn certain_model_scores_full_accuracy() {
    let graphs = triangles_vs_paths(10, 0);
    let zero: Vec<Graph> = graphs.iter().map(|g| Graph::new(3, g.edges(), g.features().clone(), 0).unwrap()).collect();
    let cfg = small_model(1);
    let (params, mut store) = ModelParams::init::<f32, _>(&cfg, &mut stream_rng(0, Stream::Init)).unwrap();
    *store.get_mut(params.head2.weight) = Tensor::zeros(&[16, 2]);
    *store.get_mut(params.head2.bias.unwrap()) = Tensor::from_f64(&[1, 2], &[50.0, -50.0]).unwrap();
    let idx: Vec<usize> = (0..10).collect();
    let stats = evaluate(&store, &params, &cfg, &zero, &idx, 4).unwrap();
    assert_eq!(stats.accuracy, 1.0);
    assert!(stats.loss < 1e-30);
}

#[test]
fn evaluate_leaves_parameters_alone() {
    let graphs = random_dataset(12, 6, 3, 1);
    let trainer = Trainer::new(small_model(3), quick_train(1), 3, 12).unwrap();
    let before = checksum(&trainer.store);
    let idx: Vec<usize> = (0..12).collect();
    trainer.evaluate(&graphs, &idx).unwrap();
    assert_eq!(before, checksum(&trainer.store));
    assert!(trainer.evaluate(&graphs, &[]).is_err());
}

#[test]
fn training_epochs_are_reproducible() {
    let graphs = random_dataset(24, 6, 3, 2);
    let idx: Vec<usize> = (0..24).collect();
    let run = || {
        let mut t = Trainer::new(small_model(3), quick_train(3), 11, 24).unwrap();
        let losses: Vec<f64> = (0..3).map(|_| t.train_epoch(&graphs, &idx).unwrap().loss).collect();
        (losses, checksum(&t.store))
    };
    assert_eq!(run(), run());
    let mut t = Trainer::new(small_model(3), quick_train(3), 11, 24).unwrap();
    assert!(t.train_epoch(&graphs, &[]).is_err());
}

#[test]
fn warmup_defaults_to_a_tenth_of_training() {
    let cfg = TrainConfig { epochs: 10, batch_size: 4, ..TrainConfig::default() };
    assert_eq!(cfg.total_steps(10), 30);
    assert_eq!(cfg.warmup_for(30), 3);
    let fixed = TrainConfig { warmup_steps: Some(0), ..cfg };
    assert_eq!(fixed.warmup_for(30), 0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { seeds: vec![], ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { clip_norm: Some(-1.0), ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn mean_std_convention() {
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = mean_std(&[1.0, 3.0]);
    assert_eq!((m, s), (2.0, 1.0));
}

#[test]
fn experiment_records_and_reruns_exactly() {
    let graphs = random_dataset(30, 6, 3, 4);
    let mut cfg = quick_train(2);
    cfg.seeds = vec![5];
    let run = || {
        let mut records = Vec::new();
        let summary = run_experiment(&graphs, &small_model(3), &cfg, &mut |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        (summary, records)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.std, 0.0);
    assert_eq!(a.mean, a.per_seed[0].test_accuracy);
    assert_eq!(a.mean, b.mean);
    // Two epochs of train + val, then one test record.
    assert_eq!(ra.len(), 5);
    assert_eq!(ra.last().unwrap().split, Split::Test);
    let strip = |r: &[MetricsRecord]| r.iter().map(|m| (m.epoch, m.split, m.loss.to_bits(), m.accuracy.to_bits(), m.lr.to_bits())).collect::<Vec<_>>();
    assert_eq!(strip(&ra), strip(&rb));
}

#[test]
fn separable_task_beats_uniform_loss_quickly() {
    let graphs = triangles_vs_paths(200, 0);
    let idx: Vec<usize> = (0..200).collect();
    let mut model = small_model(1);
    model.mna.dim = 32;
    model.ffn_dim = 64;
    model.mna.dropout = 0.0;
    let train = TrainConfig { lr: 1e-3, batch_size: 4, ..quick_train(5) };
    let mut t = Trainer::new(model, train, 1, 200).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..5 {
        last = t.train_epoch(&graphs, &idx).unwrap().loss;
    }
    assert!(last < 2f64.ln(), "loss after 5 epochs: {last}");
}
