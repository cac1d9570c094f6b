//! The seven-variant ablation ladder on shared toy data: one column per
//! variant, valid MLM loss sampled during training.

use shatter::commands::{load_corpus, merge_ablation_csv, run_ablation, FullConfig, BUILTIN_TOY_CORPUS};
use shatter::train::{TrainConfig, TrainData};

fn main() {
    let mut full = shatter::commands::preset("shatter_toy").expect("preset");
    full.model.vocab = 128;
    full.model.max_len = 24;
    full.model.hidden = 32;
    full.model.heads = 4;
    full.train = TrainConfig {
        steps: 200,
        batch: 8,
        peak_lr: 3e-3,
        warmup: 20,
        valid_every: 40,
        checkpoint_every: 0,
        deterministic: true,
        seed: 0,
        ..Default::default()
    };

    let (corpus, _) = load_corpus(BUILTIN_TOY_CORPUS, full.model.vocab).expect("corpus");
    let mut packed = corpus.pack(full.model.max_len).expect("pack");
    let valid = packed.split_off(packed.len() - packed.len() / 10);
    let data = TrainData {
        train: packed,
        valid,
        vocab: full.model.vocab,
    };

    let base = FullConfig {
        model: full.model,
        train: full.train,
    };
    println!("running the ladder ({} steps each, shared seed/data)...", base.train.steps);
    let results = run_ablation(&base, &data).expect("ablation");
    println!("\n{}", merge_ablation_csv(&results));
    println!("(200 steps is a short run; the ordering sharpens with more steps)");
}
