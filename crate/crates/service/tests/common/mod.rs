use switchfold::cae::CaeSpec;
use switchfold::config::ExperimentConfig;
use switchfold::pipeline::{build_dataset, train_cae_stage, train_mtrnn_stage, Model};

/// Untrained but fully wired model: tiny CAE and MTRNN, no training epochs.
pub fn tiny_model() -> Model {
    let mut config = ExperimentConfig::default();
    config.cae.spec = CaeSpec {
        input_size: 64,
        channels: vec![3, 2, 2, 2],
        dense: vec![4],
        feature_dim: 10,
        batch_norm: vec![true; 3],
    };
    config.cae.train.epochs = 0;
    config.cae.frame_stride = 40;
    config.cae.holdout_every = 3;
    config.data.train_positions = vec![1];
    config.mtrnn.cf_count = 8;
    config.mtrnn.cs_count = 4;
    config.mtrnn.train.max_epochs = 0;
    let cae = train_cae_stage(&config).unwrap();
    let dataset = build_dataset(&config.data.training_episodes().unwrap(), config.steps, &cae).unwrap();
    let mtrnn = train_mtrnn_stage(&config, &dataset, "dataset.bin", &mut |_, _, _, _| true).unwrap();
    Model::new(mtrnn, cae, &dataset).unwrap()
}
