//! Finite-difference verification of every attention variant's analytic
//! gradients (central differences, 64-bit, step 1e-5).

use shatter::attention::{attend, AttentionNodes, AttentionParams, AttnContext, PadMask, ALL_VARIANTS};
use shatter::gradcheck::finite_diff_check;
use shatter::partition::{build_mask, PartitionSpec};
use shatter::rng::Rng;
use shatter::tensor::Tensor;

fn main() {
    let (l, d) = (8usize, 16usize);
    println!("variant             parameters  max relative error");
    for variant in ALL_VARIANTS {
        let heads = if matches!(variant, shatter::attention::AttentionVariant::Rpe) { 1 } else { 4 };
        let clip = 6;
        let mut rng = Rng::new(42 + variant as u64);
        let params = AttentionParams::<f64>::init(variant, d, heads, 2 * clip - 1, 4, &mut rng);
        let x = Tensor::from_fn(&[l, d], |_| rng.normal());
        let pad = PadMask::prefix(l, 7);
        let spec = PartitionSpec::new(heads.max(2), 2).unwrap();
        let mask = variant
            .uses_partition_mask()
            .then(|| build_mask::<f64>(l, 1, &spec).unwrap());
        let boundaries = vec![f64::NEG_INFINITY, -1.0, 0.0, 2.0, f64::INFINITY];

        let mut tensors = vec![params.w_q.clone(), params.b_q.clone()];
        if let Some(w) = &params.w_k {
            tensors.push(w.clone());
            tensors.push(params.b_k.clone().unwrap());
        }
        tensors.push(params.w_v.clone());
        tensors.push(params.b_v.clone());
        tensors.push(params.w_o.clone());
        tensors.push(params.b_o.clone());
        if let Some(r) = &params.part_embed {
            tensors.push(r.clone());
        }
        if let Some(t) = &params.rpe_table {
            tensors.push(t.clone());
        }
        if let Some(w) = &params.rab_weights {
            tensors.push(w.clone());
        }
        let coords: usize = tensors.iter().map(|t| t.numel()).sum();
        let has_wk = params.w_k.is_some();
        let has_r = params.part_embed.is_some();
        let has_table = params.rpe_table.is_some();
        let has_rab = params.rab_weights.is_some();
        let err = finite_diff_check(
            &tensors,
            &|g, ids| {
                let mut idx = 0usize;
                let mut next = || {
                    let id = ids[idx];
                    idx += 1;
                    id
                };
                let nodes = AttentionNodes {
                    w_q: next(),
                    b_q: next(),
                    w_k: has_wk.then(&mut next),
                    b_k: has_wk.then(&mut next),
                    w_v: next(),
                    b_v: next(),
                    w_o: next(),
                    b_o: next(),
                    part_embed: has_r.then(&mut next),
                    rpe_table: has_table.then(&mut next),
                    rab_weights: has_rab.then(&mut next),
                };
                let xi = g.input(x.clone());
                let mut ctx = AttnContext::new(heads);
                ctx.mask = mask.as_ref();
                ctx.rab_boundaries = Some(&boundaries);
                ctx.rpe_clip = Some(clip);
                let out = attend(g, variant, xi, &nodes, &pad, &ctx)?;
                let mut proj = Rng::new(5);
                let weights = Tensor::from_fn(&[l, d], |_| proj.normal());
                let weighted = g.mul_const(out, weights)?;
                Ok(g.sum_all(weighted))
            },
            1e-5,
        )
        .expect("gradcheck");
        println!("{:<19} {:>10}  {err:.3e}", variant.config_name(), coords);
    }
}
