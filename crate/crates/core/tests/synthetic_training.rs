use cmml_core::backbone::EmbeddingMode;
use cmml_core::context::EncoderVariant;
use cmml_core::data::{generate_synthetic_tasks, FeatureSchema, SyntheticTaskSpec};
use cmml_core::metalearn::{
    train_epoch, EpisodeSource, LossMode, ModelBundle, ModelConfig, TrainConfig,
};
use cmml_core::modulation::ModulationVariant;
use cmml_core::optim::{AdamConfig, AdamState};

#[test]
fn noiseless_training_loss_drops_below_a_tenth() {
    let spec = SyntheticTaskSpec {
        noise_sd: 0.0,
        task_count: 64,
        support_size: 16,
        query_size: 8,
        latent_dim: 4,
        feature_dim: 4,
        task_vector_sd: 0.5,
        seed: 3,
        ..SyntheticTaskSpec::default()
    };
    let data = generate_synthetic_tasks(&spec).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.backbone.schema = FeatureSchema::ids(1, data.n_items(), 0, spec.feature_dim);
    cfg.backbone.embedding_mode = EmbeddingMode::Frozen;
    cfg.backbone.hidden = vec![16, 16];
    cfg.encoder.variant = EncoderVariant::PoolingMean;
    cfg.encoder.mlp_hidden = vec![32];
    cfg.modulation.variant = ModulationVariant::Film;
    cfg.modulation.hyper_hidden = vec![16];
    let mut bundle = ModelBundle::new(cfg, 3).unwrap();
    bundle.set_embeddings(None, &data.item_features).unwrap();
    let mut adam = AdamState::new(&bundle.params, AdamConfig::default());
    let tcfg = TrainConfig {
        batch_size: 16,
        epochs: 200,
        lr: 3e-3,
        loss: LossMode::Mse,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    for epoch in 0..tcfg.epochs {
        losses.push(
            train_epoch(
                &mut bundle,
                &mut adam,
                &data.tasks,
                &tcfg,
                EpisodeSource::Task,
                epoch,
            )
            .unwrap()
            .mean_loss,
        );
    }
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    assert!(
        last < 0.1 * first,
        "epoch 1 loss {first}, epoch 200 loss {last}"
    );
}
