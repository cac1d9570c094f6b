//! Train on periodic sequences at length 64, then evaluate at length 128.
//! Relative partitioning extends with zero new parameters; absolute
//! position embeddings need fresh random rows and degrade.

use shatter::attention::AttentionVariant;
use shatter::encoder::{ClassifyStrategy, Model, ModelConfig};
use shatter::masking::MaskingConfig;
use shatter::optim::AdamState;
use shatter::synthetic::{generate, SyntheticConfig, SyntheticTask};
use shatter::train::{mlm_eval_loss, train, TrainConfig, TrainData};

fn config(variant: AttentionVariant, positions: bool) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        hidden: 32,
        heads: 4,
        ffn: None,
        vocab: 64,
        max_len: 64,
        positions,
        classes: 2,
        classify: ClassifyStrategy::ClsToken,
        rpe_clip: None,
        rab_buckets: None,
        rab_max_distance: None,
        partition_alpha: None,
        partition_beta: None,
        attention_dropout: 0.0,
    }
}

fn main() {
    let gen_copy = |len: usize, n: usize, seed: u64| {
        generate(
            SyntheticTask::CopyMlm,
            &SyntheticConfig {
                examples: n,
                len,
                vocab: 64,
                period: 8,
                seed,
                ..Default::default()
            },
        )
        .unwrap()
        .sequences
    };
    let data = TrainData {
        train: gen_copy(64, 256, 10),
        valid: gen_copy(64, 64, 11),
        vocab: 64,
    };
    let long = gen_copy(128, 64, 12);
    let cfg = TrainConfig {
        steps: 600,
        batch: 8,
        peak_lr: 3e-3,
        warmup: 60,
        valid_every: 600,
        checkpoint_every: 0,
        deterministic: true,
        seed: 0,
        ..Default::default()
    };
    let masking = MaskingConfig::default();

    println!("periodic-copy MLM, pretrain at l=64, evaluate extended at l=128:\n");
    for (name, variant, positions) in [
        ("shatter", AttentionVariant::Shatter, false),
        ("position-embedding baseline", AttentionVariant::MultiHeadSoftmax, true),
    ] {
        let mut model = Model::<f32>::new(config(variant, positions), 0).unwrap();
        let mut adam = AdamState::init(&model.params);
        train(&mut model, &mut adam, &data, &cfg, None).unwrap();
        let native = mlm_eval_loss(&model, &data.valid, &masking, 64, 4, 8, 99).unwrap();
        let before = model.params.total_values();
        model.extend_max_length(128, 0).unwrap();
        let after = model.params.total_values();
        let extended = mlm_eval_loss(&model, &long, &masking, 64, 4, 8, 99).unwrap();
        println!("{name}:");
        println!("  loss at native length: {native:.4}");
        println!("  loss at doubled length: {extended:.4}  (increase {:+.4})", extended - native);
        println!("  parameters: {before} -> {after} ({:+})\n", after as i64 - before as i64);
    }
}
