//! Sample the partition of unity over relative offsets and print a small
//! text rendering per layer, plus the CSV the `partition-plot` subcommand
//! emits.

use shatter::partition::{eval_parts, PartitionSpec};

fn main() {
    let spec = PartitionSpec::new(8, 4).expect("valid spec");
    println!(
        "{} parts (Bernstein degree {}), {} layers",
        spec.parts,
        spec.degree(),
        spec.layers
    );
    for layer in 0..spec.layers {
        println!(
            "\nlayer {layer}: alpha = {:+.4}, beta = {:+.4}",
            spec.alpha[layer], spec.beta[layer]
        );
        println!("  offset   weights (parts 0..{})", spec.parts - 1);
        for x in [-24i64, -12, -6, -3, -1, 0, 1, 3, 6, 12, 24] {
            let w = eval_parts(x, layer, &spec).expect("in range");
            let cells: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
            let sum: f64 = w.iter().sum();
            println!("  {x:>6}   [{}]  sum={sum:.9}", cells.join(" "));
        }
    }

    println!("\nfirst CSV rows (layer,part,x,weight):");
    let csv = shatter::commands::cmd_partition_plot(8, 4, None).expect("plot");
    for line in csv.lines().take(6) {
        println!("  {line}");
    }
}
