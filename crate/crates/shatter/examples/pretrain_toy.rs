//! Desk-scale MLM pretraining on the builtin toy corpus: watch the valid
//! loss fall, then resume from the checkpoint to show bit-exact
//! continuation.

use shatter::checkpoint::load_train_state;
use shatter::commands::{load_corpus, BUILTIN_TOY_CORPUS};
use shatter::encoder::Model;
use shatter::optim::AdamState;
use shatter::train::{train, train_until, TrainConfig, TrainData};

fn main() {
    let full = shatter::commands::preset("shatter_toy").expect("preset");
    let mut model_cfg = full.model;
    model_cfg.vocab = 128;
    model_cfg.max_len = 24;
    model_cfg.hidden = 32;
    model_cfg.heads = 4;

    let (corpus, _) = load_corpus(BUILTIN_TOY_CORPUS, model_cfg.vocab).expect("corpus");
    let mut packed = corpus.pack(model_cfg.max_len).expect("pack");
    let valid = packed.split_off(packed.len() - packed.len() / 10);
    println!(
        "corpus: {} train sequences, {} valid, vocab {}",
        packed.len(),
        valid.len(),
        corpus.vocab_size()
    );
    let data = TrainData {
        train: packed,
        valid,
        vocab: model_cfg.vocab,
    };

    let cfg = TrainConfig {
        steps: 300,
        batch: 8,
        peak_lr: 3e-3,
        warmup: 30,
        valid_every: 50,
        checkpoint_every: 150,
        deterministic: true,
        seed: 1,
        ..Default::default()
    };
    let out = std::env::temp_dir().join("shatter-pretrain-toy");
    std::fs::remove_dir_all(&out).ok();

    let mut model = Model::<f32>::new(model_cfg, cfg.seed).expect("model");
    let mut adam = AdamState::init(&model.params);
    println!("\nstep  train_loss  valid_loss");
    let log = train(&mut model, &mut adam, &data, &cfg, Some(&out)).expect("train");
    for row in &log.rows {
        println!("{:>4}  {:>10.4}  {:>10.4}", row.step, row.train_loss, row.valid_loss);
    }

    // Interrupt-and-resume: a second model stopped at step 150 and reloaded
    // from the checkpoint reaches the identical final loss.
    let mut m2 = Model::<f32>::new(model.config.clone(), cfg.seed).expect("model");
    let mut a2 = AdamState::init(&m2.params);
    let out2 = std::env::temp_dir().join("shatter-pretrain-toy-2");
    std::fs::remove_dir_all(&out2).ok();
    train_until(&mut m2, &mut a2, &data, &cfg, Some(&out2), 150).expect("half");
    let (mut m3, mut a3, manifest) = load_train_state(&out2.join("state.ckpt")).expect("load");
    println!("\nresumed from step {}", manifest.step);
    let log2 = train(&mut m3, &mut a3, &data, &cfg, None).expect("resume");
    let last = log.rows.last().unwrap();
    let last2 = log2.rows.last().unwrap();
    println!(
        "unbroken final valid loss {:.6}, resumed {:.6} (bit-identical: {})",
        last.valid_loss,
        last2.valid_loss,
        last.valid_loss.to_bits() == last2.valid_loss.to_bits()
    );
    std::fs::remove_dir_all(&out).ok();
    std::fs::remove_dir_all(&out2).ok();
}
