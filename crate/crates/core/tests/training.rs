use posefuse::harness::{training_scenes, GeometricConfig};
use posefuse::neural::{train, weights_to_json, NeuralError, TrainConfig, TrainingScene};
use posefuse::parallel::Execution;
use posefuse::simulator::{generate_dataset, DatasetTemplate};

fn scenes(count: usize, seed: u64) -> Vec<TrainingScene> {
    let data = generate_dataset(&DatasetTemplate::default(), count, seed, Execution::Sequential).unwrap();
    training_scenes(&data, &GeometricConfig::default(), Execution::available())
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 16,
        layers: 2,
        epochs: 30,
        rng_seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_halves_over_thirty_epochs() {
    let data = scenes(200, 21);
    // Fused loss throughout, so first and last epochs share an objective.
    let cfg = TrainConfig {
        warmup_epochs: 0,
        ..small_config()
    };
    let w = train(&data, &cfg, Execution::available()).unwrap();
    assert_eq!(w.epoch_losses.len(), 30);
    let (first, last) = (w.epoch_losses[0], *w.epoch_losses.last().unwrap());
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = scenes(40, 22);
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        ..small_config()
    };
    let a = train(&data, &cfg, Execution::available()).unwrap();
    let b = train(&data, &cfg, Execution::Sequential).unwrap();
    assert_eq!(weights_to_json(&a), weights_to_json(&b));
    let other = train(&data, &TrainConfig { rng_seed: 4, ..cfg }, Execution::available()).unwrap();
    assert_ne!(weights_to_json(&a), weights_to_json(&other));
}

#[test]
fn empty_dataset_is_rejected() {
    assert_eq!(
        train(&[], &small_config(), Execution::Sequential).unwrap_err(),
        NeuralError::EmptyDataset
    );
}

#[test]
fn invalid_config_is_rejected() {
    let data = scenes(4, 23);
    let cfg = TrainConfig {
        ivar_bounds: [1.0, 0.5],
        ..small_config()
    };
    assert!(matches!(
        train(&data, &cfg, Execution::Sequential),
        Err(NeuralError::InvalidConfig(_))
    ));
}
