//! Analytic cost reports for the base-size configurations: parameter
//! counts, per-layer attention FLOPs, and activation memory at half vs
//! full length.

use shatter::benchkit::{
    count_attention_flops, count_params, estimate_activation_memory, format_millions,
    xlnet_formula_params,
};
use shatter::commands::preset;

fn main() {
    println!("parameter counts (weights-only convention):");
    for name in ["bert_base", "shatter_base", "rpe_base", "rab_base", "bert_large", "shatter_large"] {
        let cfg = preset(name).unwrap().model;
        let report = count_params(&cfg).unwrap();
        println!(
            "  {name:<14} {:>11}  ({})  {}",
            report.total,
            report.millions,
            report.flags.first().cloned().unwrap_or_default()
        );
    }
    let bert = preset("bert_base").unwrap().model;
    let xl = xlnet_formula_params(&bert).unwrap();
    println!("  xlnet-formula  {xl:>11}  ({})", format_millions(xl));

    println!("\nper-layer attention flops (multiply-add = 2):");
    for l in [128usize, 512] {
        let b = count_attention_flops(&bert, l).unwrap();
        let s = count_attention_flops(&preset("shatter_base").unwrap().model, l).unwrap();
        println!(
            "  l={l:<4} baseline {:>13}  shatter {:>13}  saving from dropped key projection {:>12}",
            b.per_layer, s.per_layer, s.key_projection_saving
        );
    }
    let s = count_attention_flops(&preset("shatter_base").unwrap().model, 512).unwrap();
    println!("  shatter itemization at l=512:");
    for (name, v) in &s.items {
        println!("    {name:<28} {v:>13}");
    }

    println!("\nactivation memory (batch 256):");
    for name in ["bert_base", "shatter_base"] {
        let cfg = preset(name).unwrap().model;
        let half = estimate_activation_memory(&cfg, 256, 256).unwrap();
        let full = estimate_activation_memory(&cfg, 256, 512).unwrap();
        println!(
            "  {name:<14} l=256: {:>6} MB   l=512: {:>6} MB   ratio {:.3}",
            half.bytes / (1 << 20),
            full.bytes / (1 << 20),
            half.bytes as f64 / full.bytes as f64
        );
    }
    println!("\n(the quadratic attention tensors dominate, so halving the length");
    println!(" cuts retained activations to under half)");
}
