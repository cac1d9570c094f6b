//! Position-probe classification: the label is the class token sitting at a
//! fixed position among shuffled distractors, so bag-of-words features are
//! useless. Compares the CLS-token and re-pooled classification strategies.

use shatter::attention::AttentionVariant;
use shatter::encoder::{ClassifyStrategy, Model, ModelConfig};
use shatter::optim::AdamState;
use shatter::synthetic::{bow_baseline_accuracy, generate, SyntheticConfig, SyntheticTask};
use shatter::train::{classifier_accuracy, train_classifier, FinetuneConfig};

fn main() {
    let syn = SyntheticConfig {
        examples: 1024,
        len: 32,
        vocab: 64,
        classes: 8,
        probe_position: 1,
        period: 8,
        seed: 100,
    };
    let train_set = generate(SyntheticTask::PositionProbe, &syn).unwrap();
    let dev_set = generate(
        SyntheticTask::PositionProbe,
        &SyntheticConfig {
            examples: 256,
            seed: 101,
            ..syn
        },
    )
    .unwrap();
    let bow = bow_baseline_accuracy(&train_set, &dev_set).unwrap();
    println!("bag-of-words baseline dev accuracy: {bow:.3} (chance = 0.125)\n");

    for strategy in [ClassifyStrategy::ClsToken, ClassifyStrategy::Pooled] {
        let cfg = ModelConfig {
            variant: AttentionVariant::Shatter,
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: None,
            vocab: 64,
            max_len: 32,
            positions: false,
            classes: 8,
            classify: strategy,
            rpe_clip: None,
            rab_buckets: None,
            rab_max_distance: None,
            partition_alpha: None,
            partition_beta: None,
            attention_dropout: 0.0,
        };
        let mut model = Model::<f32>::new(cfg, 0).unwrap();
        let mut adam = AdamState::init(&model.params);
        let ft = FinetuneConfig {
            steps: 400,
            batch: 16,
            lr: 2e-3,
            seed: 0,
            deterministic: true,
        };
        train_classifier(&mut model, &mut adam, &train_set, &ft).unwrap();
        let train_acc = classifier_accuracy(&model, &train_set).unwrap();
        let dev_acc = classifier_accuracy(&model, &dev_set).unwrap();
        println!(
            "shatter with {} strategy: train accuracy {train_acc:.3}, dev accuracy {dev_acc:.3}",
            strategy.name()
        );
    }
}
