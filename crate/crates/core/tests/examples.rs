use np3m_core::data::{generate_synthetic, split_counts, BoundaryMode, DatasetRecord};
use np3m_core::train::{build_model, evaluate, train, TrainConfig};
use np3m_core::ModelConfig;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 4,
        num_rbf: 4,
        r_short: 3.0,
        r_assign: 3.0,
        ..Default::default()
    }
}

fn one_structure(energy: f64) -> DatasetRecord {
    let mut r = generate_synthetic(1, 6, 7.0, BoundaryMode::Periodic, 3).unwrap().remove(0);
    r.energy = energy;
    r
}

#[test]
fn silver_split_sizes() {
    let (tr, va, te) = split_counts(1159, 950, 50, 0).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (950, 50, 159));
}

#[test]
fn memorizes_a_single_structure() {
    let rec = one_structure(-3.7);
    let model = build_model(&small_model(), &rec.system().unwrap(), false).unwrap();
    let config = TrainConfig {
        epochs: 2000,
        batch_size: 1,
        lr: 1e-2,
        warmup_steps: 0,
        patience: 2000,
        early_stop_patience: 2000,
        standardize: false,
        ..Default::default()
    };
    let out = train(model, config, &[&rec], &[], None).unwrap();
    let mae = evaluate(&out.best, std::slice::from_ref(&rec)).unwrap().energy_mae;
    assert!(mae < 1e-3, "train MAE {mae}");
}

#[test]
fn stalled_validation_decays_the_learning_rate() {
    // fitting +1 on the training copy moves away from −100 on the validation copy
    let train_rec = one_structure(1.0);
    let val_rec = one_structure(-100.0);
    let model = build_model(&small_model(), &train_rec.system().unwrap(), false).unwrap();
    let config = TrainConfig {
        epochs: 5,
        batch_size: 1,
        lr: 1e-2,
        warmup_steps: 0,
        patience: 2,
        decay_factor: 0.5,
        standardize: false,
        ..Default::default()
    };
    let out = train(model, config, &[&train_rec], &[&val_rec], None).unwrap();
    let decayed: Vec<usize> = out.metrics.iter().filter(|m| m.lr_decayed).map(|m| m.epoch).collect();
    assert_eq!(decayed, vec![3, 5]);
    assert_eq!(out.metrics[2].lr, 5e-3);
    assert_eq!(out.state.best_epoch, 1);
}

#[test]
fn early_stopping_ends_a_stalled_run() {
    let train_rec = one_structure(1.0);
    let val_rec = one_structure(-100.0);
    let model = build_model(&small_model(), &train_rec.system().unwrap(), false).unwrap();
    let config = TrainConfig {
        epochs: 50,
        batch_size: 1,
        warmup_steps: 0,
        early_stop_patience: 4,
        standardize: false,
        ..Default::default()
    };
    let out = train(model, config, &[&train_rec], &[&val_rec], None).unwrap();
    assert_eq!(out.metrics.len(), 5);
}
