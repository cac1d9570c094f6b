//! Command implementations behind the CLI: pretraining, the ablation
//! ladder, toy finetuning, benchmarking, parameter counting, partition
//! plotting and max-length extension. Every run directory gets exactly one
//! manifest, written atomically, and reruns under the determinism flag are
//! byte-reproducible.

use crate::attention::AttentionVariant;
use crate::benchkit;
use crate::checkpoint::{load_model, save_model};
use crate::corpus::{fnv1a, fnv1a_file, generate_toy_text, Corpus, PackedSequence};
use crate::encoder::{ClassifyStrategy, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::manifest::{write_atomic, RunManifest};
use crate::optim::AdamState;
use crate::partition::{partition_plot_rows, PartitionSpec};
use crate::rng::derive_seed;
use crate::synthetic::{generate, SyntheticConfig, SyntheticTask};
use crate::train::{
    classifier_accuracy, train, train_classifier, FinetuneConfig, MetricsLog, TrainConfig,
    TrainData,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BUILTIN_TOY_CORPUS: &str = "builtin:toy";

/// Flags shared by most subcommands; `None` keeps the config-file value.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FullConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Resolve a config source: a TOML file path, or a named preset.
pub fn load_config(source: &str) -> Result<FullConfig> {
    let path = Path::new(source);
    if path.exists() {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: FullConfig =
            toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    } else {
        preset(source).ok_or_else(|| {
            Error::Config(format!(
                "'{source}' is neither a config file nor a known preset ({})",
                preset_names().join(", ")
            ))
        })
    }
}

fn toy_model(variant: AttentionVariant, positions: bool) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        hidden: 64,
        heads: if matches!(variant, AttentionVariant::Rpe) { 1 } else { 8 },
        ffn: None,
        vocab: 256,
        max_len: 32,
        positions,
        classes: 2,
        classify: ClassifyStrategy::Pooled,
        rpe_clip: matches!(variant, AttentionVariant::Rpe).then_some(32),
        rab_buckets: None,
        rab_max_distance: None,
        partition_alpha: None,
        partition_beta: None,
        attention_dropout: 0.0,
    }
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        steps: 400,
        batch: 8,
        peak_lr: 1e-3,
        warmup: 40,
        valid_every: 25,
        checkpoint_every: 200,
        ..Default::default()
    }
}

fn base_model(variant: AttentionVariant) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 12,
        hidden: 768,
        heads: if matches!(variant, AttentionVariant::Rpe) { 1 } else { 12 },
        ffn: None,
        vocab: 32000,
        max_len: 512,
        positions: matches!(
            variant,
            AttentionVariant::MultiHeadSoftmax | AttentionVariant::Rab
        ),
        classes: 2,
        classify: ClassifyStrategy::Pooled,
        rpe_clip: matches!(variant, AttentionVariant::Rpe).then_some(128),
        rab_buckets: None,
        rab_max_distance: None,
        partition_alpha: None,
        partition_beta: None,
        attention_dropout: 0.0,
    }
}

fn large_model(variant: AttentionVariant) -> ModelConfig {
    let mut cfg = base_model(variant);
    cfg.layers = 24;
    cfg.hidden = 1024;
    cfg.heads = 16;
    cfg
}

pub fn preset_names() -> Vec<&'static str> {
    vec![
        "shatter_toy",
        "bert_toy",
        "no_position_toy",
        "part_mask_toy",
        "onehead_softmax_toy",
        "onehead_sigmoid_toy",
        "part_bias_toy",
        "rpe_toy",
        "rab_toy",
        "bert_base",
        "shatter_base",
        "rpe_base",
        "rab_base",
        "bert_large",
        "shatter_large",
    ]
}

pub fn preset(name: &str) -> Option<FullConfig> {
    let model = match name {
        "shatter_toy" => toy_model(AttentionVariant::Shatter, false),
        "bert_toy" => toy_model(AttentionVariant::MultiHeadSoftmax, true),
        "no_position_toy" => toy_model(AttentionVariant::MultiHeadSoftmax, false),
        "part_mask_toy" => toy_model(AttentionVariant::PartMask, false),
        "onehead_softmax_toy" => toy_model(AttentionVariant::OneHeadSoftmax, false),
        "onehead_sigmoid_toy" => toy_model(AttentionVariant::OneHeadSigmoid, false),
        "part_bias_toy" => toy_model(AttentionVariant::PartBias, false),
        "rpe_toy" => toy_model(AttentionVariant::Rpe, false),
        "rab_toy" => {
            let mut m = toy_model(AttentionVariant::Rab, true);
            m.rab_buckets = Some(16);
            m.rab_max_distance = Some(32);
            m
        }
        "bert_base" => base_model(AttentionVariant::MultiHeadSoftmax),
        "shatter_base" => base_model(AttentionVariant::Shatter),
        "rpe_base" => base_model(AttentionVariant::Rpe),
        "rab_base" => base_model(AttentionVariant::Rab),
        "bert_large" => large_model(AttentionVariant::MultiHeadSoftmax),
        "shatter_large" => large_model(AttentionVariant::Shatter),
        _ => return None,
    };
    let train = if name.ends_with("_toy") || name == "no_position_toy" {
        toy_train()
    } else {
        TrainConfig {
            steps: 1_000_000,
            batch: 256,
            peak_lr: 1e-4,
            warmup: 10_000,
            ..Default::default()
        }
    };
    Some(FullConfig { model, train })
}

/// Load a corpus source: a text file path or `builtin:toy`.
pub fn load_corpus(source: &str, vocab: usize) -> Result<(Corpus, Vec<(String, String)>)> {
    load_corpus_cached(source, vocab, None)
}

/// Like `load_corpus`, optionally backed by the binary token cache: a fresh
/// cache (matching source hash and vocab cap) is loaded instead of
/// re-tokenizing; otherwise the text is tokenized and the cache rewritten.
pub fn load_corpus_cached(
    source: &str,
    vocab: usize,
    token_cache: Option<&Path>,
) -> Result<(Corpus, Vec<(String, String)>)> {
    let raw_hash = if source == BUILTIN_TOY_CORPUS {
        fnv1a(generate_toy_text(1500, 120, 17).as_bytes())
    } else {
        fnv1a_file(Path::new(source))?
    };
    // The cache key covers both the text and the requested cap.
    let cache_key = raw_hash ^ (vocab as u64).wrapping_mul(0x9E3779B97F4A7C15);
    let hashes = vec![(source.to_string(), format!("{raw_hash:016x}"))];
    if let Some(cache) = token_cache {
        if cache.exists() {
            if let Ok((corpus, stored)) = Corpus::read_cache(cache) {
                if stored == cache_key {
                    return Ok((corpus, hashes));
                }
            }
        }
    }
    let corpus = if source == BUILTIN_TOY_CORPUS {
        Corpus::from_lines(generate_toy_text(1500, 120, 17).lines(), vocab)?
    } else {
        Corpus::from_text_file(Path::new(source), vocab)?
    };
    if let Some(cache) = token_cache {
        corpus.write_cache(cache, cache_key)?;
    }
    Ok((corpus, hashes))
}

fn apply_overrides(cfg: &mut FullConfig, opts: &GlobalOpts) {
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = opts.steps {
        cfg.train.steps = steps;
    }
    if opts.deterministic {
        cfg.train.deterministic = true;
    }
}

fn build_manifest(
    command: &str,
    cfg: &FullConfig,
    corpus_name: &str,
    hashes: Vec<(String, String)>,
) -> Result<RunManifest> {
    let spec = cfg.model.partition_spec()?;
    Ok(RunManifest {
        command: command.to_string(),
        command_line: std::env::args().collect(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        corpus: corpus_name.to_string(),
        data_hashes: hashes,
        packing_policy: "greedy_pack".to_string(),
        partition_alpha: spec.as_ref().map(|s| s.alpha.clone()).unwrap_or_default(),
        partition_beta: spec.as_ref().map(|s| s.beta.clone()).unwrap_or_default(),
        degenerate_partition_schedule: spec.map(|s| s.degenerate_schedule).unwrap_or(false),
        rab_boundaries: cfg.model.rab_boundary_values()?.unwrap_or_default(),
        extra: Vec::new(),
    })
}

/// Split packed sequences into train and held-out validation slices.
fn split_valid(mut packed: Vec<PackedSequence>) -> (Vec<PackedSequence>, Vec<PackedSequence>) {
    let held = (packed.len() / 10).max(1).min(packed.len() - 1);
    let valid = packed.split_off(packed.len() - held);
    (packed, valid)
}

pub fn prepare_train_data(
    model: &ModelConfig,
    corpus_src: &str,
    valid_src: Option<&str>,
) -> Result<(TrainData, Vec<(String, String)>)> {
    prepare_train_data_cached(model, corpus_src, valid_src, None)
}

pub fn prepare_train_data_cached(
    model: &ModelConfig,
    corpus_src: &str,
    valid_src: Option<&str>,
    token_cache: Option<&Path>,
) -> Result<(TrainData, Vec<(String, String)>)> {
    let (corpus, mut hashes) = load_corpus_cached(corpus_src, model.vocab, token_cache)?;
    if corpus.vocab_size() > model.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocab {}",
            corpus.vocab_size(),
            model.vocab
        )));
    }
    let packed = corpus.pack(model.max_len)?;
    let (train_seqs, valid_seqs) = match valid_src {
        Some(vs) => {
            let raw = if vs == BUILTIN_TOY_CORPUS {
                generate_toy_text(200, 120, 18)
            } else {
                std::fs::read_to_string(vs)
                    .map_err(|e| Error::Data(format!("cannot read valid corpus {vs}: {e}")))?
            };
            hashes.push((vs.to_string(), format!("{:016x}", fnv1a(raw.as_bytes()))));
            let valid_corpus = corpus.tokenize_with(raw.lines())?;
            (packed, valid_corpus.pack(model.max_len)?)
        }
        None => split_valid(packed),
    };
    Ok((
        TrainData {
            train: train_seqs,
            valid: valid_seqs,
            vocab: model.vocab,
        },
        hashes,
    ))
}

/// `pretrain`: MLM pretraining run with manifest, metrics CSV and
/// checkpoints in the run directory.
pub fn cmd_pretrain(
    config_src: &str,
    corpus_src: &str,
    valid_src: Option<&str>,
    resume: bool,
    opts: &GlobalOpts,
) -> Result<PathBuf> {
    cmd_pretrain_cached(config_src, corpus_src, valid_src, resume, None, opts)
}

pub fn cmd_pretrain_cached(
    config_src: &str,
    corpus_src: &str,
    valid_src: Option<&str>,
    resume: bool,
    token_cache: Option<&Path>,
    opts: &GlobalOpts,
) -> Result<PathBuf> {
    let mut cfg = load_config(config_src)?;
    apply_overrides(&mut cfg, opts);
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{config_src}-seed{}", cfg.train.seed)));
    let (data, hashes) = prepare_train_data_cached(&cfg.model, corpus_src, valid_src, token_cache)?;
    let manifest = build_manifest("pretrain", &cfg, corpus_src, hashes)?;
    std::fs::create_dir_all(&out_dir)?;
    manifest.save(&out_dir.join("manifest.json"))?;

    let (mut model, mut adam) = if resume && out_dir.join("state.ckpt").exists() {
        let (m, a, _) = crate::checkpoint::load_train_state(&out_dir.join("state.ckpt"))?;
        (m, a)
    } else {
        let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
        let adam = AdamState::init(&model.params);
        (model, adam)
    };
    train(&mut model, &mut adam, &data, &cfg.train, Some(&out_dir))?;
    Ok(out_dir)
}

/// Rerun a recorded manifest (the reproducibility path).
pub fn cmd_pretrain_from_manifest(manifest_path: &Path, opts: &GlobalOpts) -> Result<PathBuf> {
    let manifest = RunManifest::load(manifest_path)?;
    let mut cfg = FullConfig {
        model: manifest.model.clone(),
        train: manifest.train.clone(),
    };
    apply_overrides(&mut cfg, opts);
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/rerun-seed{}", cfg.train.seed)));
    let (data, hashes) = prepare_train_data(&cfg.model, &manifest.corpus, None)?;
    for ((name, recorded), (_, now)) in manifest.data_hashes.iter().zip(&hashes) {
        if recorded != now {
            return Err(Error::Data(format!(
                "corpus '{name}' changed since the manifest was written ({recorded} vs {now})"
            )));
        }
    }
    let new_manifest = build_manifest("pretrain", &cfg, &manifest.corpus, hashes)?;
    std::fs::create_dir_all(&out_dir)?;
    new_manifest.save(&out_dir.join("manifest.json"))?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut adam = AdamState::init(&model.params);
    train(&mut model, &mut adam, &data, &cfg.train, Some(&out_dir))?;
    Ok(out_dir)
}

/// The seven-variant ablation ladder names, in output-column order.
pub const ABLATION_LADDER: [(&str, AttentionVariant, bool); 7] = [
    ("No_Position", AttentionVariant::MultiHeadSoftmax, false),
    ("Part_Mask", AttentionVariant::PartMask, false),
    ("1H_Softmax", AttentionVariant::OneHeadSoftmax, false),
    ("1H_Sigmoid", AttentionVariant::OneHeadSigmoid, false),
    ("Part_Bias", AttentionVariant::PartBias, false),
    ("Shatter", AttentionVariant::Shatter, false),
    ("BERT_Base", AttentionVariant::MultiHeadSoftmax, true),
];

/// Run every ladder variant over shared data and a shared seed; returns the
/// merged per-step valid-loss table.
pub fn run_ablation(
    base: &FullConfig,
    data: &TrainData,
) -> Result<Vec<(String, MetricsLog)>> {
    let mut results = Vec::new();
    for (name, variant, positions) in ABLATION_LADDER {
        let mut model_cfg = base.model.clone();
        model_cfg.variant = variant;
        model_cfg.positions = positions;
        if matches!(variant, AttentionVariant::Rpe) {
            model_cfg.heads = 1;
        }
        model_cfg.validate()?;
        let mut model = Model::<f32>::new(model_cfg, base.train.seed)?;
        let mut adam = AdamState::init(&model.params);
        let log = train(&mut model, &mut adam, data, &base.train, None)?;
        results.push((name.to_string(), log));
    }
    Ok(results)
}

pub fn merge_ablation_csv(results: &[(String, MetricsLog)]) -> String {
    let mut header = String::from("step");
    for (name, _) in results {
        header.push(',');
        header.push_str(name);
    }
    let mut out = header;
    out.push('\n');
    let steps: Vec<u64> = results
        .first()
        .map(|(_, log)| log.rows.iter().map(|r| r.step).collect())
        .unwrap_or_default();
    for (i, step) in steps.iter().enumerate() {
        out.push_str(&step.to_string());
        for (_, log) in results {
            out.push(',');
            if let Some(row) = log.rows.get(i) {
                out.push_str(&row.valid_loss.to_string());
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(config_src: &str, corpus_src: &str, opts: &GlobalOpts) -> Result<PathBuf> {
    let mut cfg = load_config(config_src)?;
    apply_overrides(&mut cfg, opts);
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/ablate-seed{}", cfg.train.seed)));
    let (data, hashes) = prepare_train_data(&cfg.model, corpus_src, None)?;
    let manifest = build_manifest("ablate", &cfg, corpus_src, hashes)?;
    std::fs::create_dir_all(&out_dir)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    let results = run_ablation(&cfg, &data)?;
    let csv = merge_ablation_csv(&results);
    write_atomic(&out_dir.join("ablation.csv"), csv.as_bytes())?;
    Ok(out_dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub task: String,
    pub strategy: String,
    pub variant: String,
    pub steps: u64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

pub fn cmd_finetune_toy(
    checkpoint: &Path,
    task_name: &str,
    strategy_name: &str,
    opts: &GlobalOpts,
) -> Result<FinetuneReport> {
    let task = SyntheticTask::from_name(task_name)?;
    let strategy = ClassifyStrategy::from_name(strategy_name)?;
    if matches!(task, SyntheticTask::CopyMlm) {
        return Err(Error::Config(
            "copy_mlm is an MLM corpus, not a classification task; use position_probe or order_pair"
                .into(),
        ));
    }
    let (mut model, _manifest) = load_model(checkpoint)?;
    model.config.classify = strategy;
    let seed = opts.seed.unwrap_or(0);
    let steps = opts.steps.unwrap_or(300);
    let syn = SyntheticConfig {
        examples: 1024,
        len: model.config.max_len.min(32),
        vocab: model.config.vocab.min(64),
        seed: derive_seed(seed, 0x11, 0),
        ..Default::default()
    };
    let train_set = generate(task, &syn)?;
    let dev_set = generate(
        task,
        &SyntheticConfig {
            examples: 512,
            seed: derive_seed(seed, 0x11, 1),
            ..syn
        },
    )?;
    model.reset_classifier(train_set.classes, derive_seed(seed, 0x11, 2))?;
    let mut adam = AdamState::init(&model.params);
    let ft = FinetuneConfig {
        steps,
        batch: 16,
        seed,
        deterministic: opts.deterministic,
        ..Default::default()
    };
    if steps > 0 {
        train_classifier(&mut model, &mut adam, &train_set, &ft)?;
    }
    let report = FinetuneReport {
        task: task.name().into(),
        strategy: strategy.name().into(),
        variant: model.config.variant.config_name().into(),
        steps,
        train_accuracy: classifier_accuracy(&model, &train_set)?,
        dev_accuracy: classifier_accuracy(&model, &dev_set)?,
    };
    if let Some(out) = &opts.out {
        std::fs::create_dir_all(out)?;
        let json = serde_json::to_vec_pretty(&report)
            .map_err(|e| Error::Data(format!("report encode: {e}")))?;
        write_atomic(&out.join("finetune.json"), &json)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub params: benchkit::ParamReport,
    pub xlnet_formula_params: u64,
    pub flops: benchkit::FlopReport,
    pub memory: benchkit::MemoryReport,
    pub memory_half_length: benchkit::MemoryReport,
    pub memory_half_over_full: f64,
    pub timing: Option<benchkit::TimingReport>,
}

pub fn cmd_bench(
    config_src: &str,
    batch: usize,
    len: usize,
    timing_steps: usize,
    opts: &GlobalOpts,
) -> Result<BenchReport> {
    let cfg = load_config(config_src)?;
    let params = benchkit::count_params(&cfg.model)?;
    let flops = benchkit::count_attention_flops(&cfg.model, len)?;
    let memory = benchkit::estimate_activation_memory(&cfg.model, batch, len)?;
    let memory_half = benchkit::estimate_activation_memory(&cfg.model, batch, (len / 2).max(1))?;
    let timing = if timing_steps > 0 {
        Some(benchkit::time_steps(&cfg.model, batch, len, timing_steps, 1)?)
    } else {
        None
    };
    let report = BenchReport {
        xlnet_formula_params: benchkit::xlnet_formula_params(&cfg.model)?,
        memory_half_over_full: memory_half.bytes as f64 / memory.bytes as f64,
        params,
        flops,
        memory,
        memory_half_length: memory_half,
        timing,
    };
    if let Some(out) = &opts.out {
        let json = serde_json::to_vec_pretty(&report)
            .map_err(|e| Error::Data(format!("report encode: {e}")))?;
        write_atomic(out, &json)?;
    }
    Ok(report)
}

pub fn cmd_params(config_src: &str, xlnet_formula: bool) -> Result<String> {
    let cfg = load_config(config_src)?;
    let report = benchkit::count_params(&cfg.model)?;
    let mut lines = vec![
        format!(
            "{} ({} layers): {} trainable weight parameters ({})",
            report.variant, report.layers, report.total, report.millions
        ),
        format!("convention: {}", report.convention),
    ];
    for (name, v) in &report.per_layer_terms {
        lines.push(format!("  per layer {name}: {v}"));
    }
    for f in &report.flags {
        lines.push(format!("note: {f}"));
    }
    if xlnet_formula {
        let xl = benchkit::xlnet_formula_params(&cfg.model)?;
        lines.push(format!(
            "xlnet-style formula (baseline + L x d^2): {} ({})",
            xl,
            benchkit::format_millions(xl)
        ));
    }
    Ok(lines.join("\n"))
}

/// CSV with columns layer,part,x,weight over integer x in [-64, 64].
pub fn cmd_partition_plot(parts: usize, layers: usize, out: Option<&Path>) -> Result<String> {
    let spec = PartitionSpec::new(parts, layers)?;
    let rows = partition_plot_rows(&spec, 64)?;
    let mut csv = String::from("layer,part,x,weight\n");
    for (layer, part, x, w) in rows {
        csv.push_str(&format!("{layer},{part},{x},{w}\n"));
    }
    if let Some(path) = out {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(csv)
}

/// Extend a checkpoint's max length and save the result; returns the
/// parameter-count delta.
pub fn cmd_extend(
    checkpoint: &Path,
    new_len: usize,
    out: &Path,
    seed: u64,
) -> Result<(usize, usize)> {
    let (mut model, manifest) = load_model(checkpoint)?;
    let before = model.params.total_values();
    model.extend_max_length(new_len, seed)?;
    let after = model.params.total_values();
    save_model(out, &model, manifest.seed, manifest.step)?;
    Ok((before, after))
}
