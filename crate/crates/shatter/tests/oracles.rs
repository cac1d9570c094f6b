//! Oracle-equivalence and gradient checks for every attention variant:
//! the graph implementation must match the independent per-pair scalar
//! loops, and its analytic gradients must match central finite differences.

mod common;

use common::*;
use shatter::attention::{
    attend, AttentionParams, AttentionVariant, AttnContext, PadMask, ALL_VARIANTS,
};
use shatter::gradcheck::finite_diff_check;
use shatter::graph::Graph;
use shatter::partition::{build_mask, PartitionMask, PartitionSpec};
use shatter::rng::Rng;
use shatter::tensor::Tensor;

struct Instance {
    x: Mat,
    params: AttentionParams<f64>,
    pad: PadMask,
    heads: usize,
    mask: Option<PartitionMask<f64>>,
    boundaries: Vec<f64>,
    clip: usize,
}

fn make_instance(variant: AttentionVariant, l: usize, d: usize, heads: usize, seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let clip = 4;
    let params = AttentionParams::<f64>::init(variant, d, heads, 2 * clip - 1, 4, &mut rng);
    let x = random_mat(l, d, &mut rng);
    let pad = random_pad(l, 2, &mut rng);
    let mask = variant.uses_partition_mask().then(|| {
        let spec = PartitionSpec::new(heads, 3).unwrap();
        build_mask::<f64>(l, rng.below(3), &spec).unwrap()
    });
    Instance {
        x,
        params,
        pad,
        heads,
        mask,
        boundaries: vec![f64::NEG_INFINITY, -2.0, 0.0, 2.0, f64::INFINITY],
        clip,
    }
}

fn run_graph(instance: &Instance, variant: AttentionVariant) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut sink = Vec::new();
    let nodes = instance.params.bind(&mut g, &mut sink);
    let xi = g.input(mat_to_tensor(&instance.x));
    let mut ctx = AttnContext::new(instance.heads);
    ctx.mask = instance.mask.as_ref();
    ctx.rab_boundaries = Some(&instance.boundaries);
    ctx.rpe_clip = Some(instance.clip);
    let out = attend(&mut g, variant, xi, &nodes, &instance.pad, &ctx).unwrap();
    g.value(out).clone()
}

fn run_oracle(instance: &Instance, variant: AttentionVariant) -> Mat {
    match variant {
        AttentionVariant::MultiHeadSoftmax => oracle_multihead_softmax(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            None,
            None,
        ),
        AttentionVariant::PartMask => oracle_multihead_softmax(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            None,
            Some(instance.mask.as_ref().unwrap().values.as_ref()),
        ),
        AttentionVariant::OneHeadSoftmax => oracle_one_head(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            instance.mask.as_ref().unwrap().values.as_ref(),
            false,
            false,
            false,
        ),
        AttentionVariant::OneHeadSigmoid => oracle_one_head(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            instance.mask.as_ref().unwrap().values.as_ref(),
            true,
            false,
            false,
        ),
        AttentionVariant::PartBias => oracle_one_head(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            instance.mask.as_ref().unwrap().values.as_ref(),
            true,
            true,
            false,
        ),
        AttentionVariant::Shatter => oracle_one_head(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            instance.mask.as_ref().unwrap().values.as_ref(),
            true,
            true,
            true,
        ),
        AttentionVariant::Rpe => oracle_rpe(&instance.x, &instance.params, &instance.pad, instance.clip),
        AttentionVariant::Rab => oracle_rab(
            &instance.x,
            &instance.params,
            &instance.pad,
            instance.heads,
            &instance.boundaries,
        ),
    }
}

fn heads_for(variant: AttentionVariant, rng: &mut Rng) -> usize {
    if matches!(variant, AttentionVariant::Rpe) {
        1
    } else {
        [2, 4][rng.below(2)]
    }
}

#[test]
fn every_variant_matches_its_pair_loop_oracle() {
    for variant in ALL_VARIANTS {
        let mut seed_rng = Rng::new(0x0ac1e + variant as u64);
        for case in 0..20 {
            let heads = heads_for(variant, &mut seed_rng);
            let l = 2 + seed_rng.below(5); // up to 6
            let d = heads * (1 + seed_rng.below(8 / heads.min(4))); // up to 8
            let instance = make_instance(variant, l, d, heads, 1000 + case);
            let got = run_graph(&instance, variant);
            let want = run_oracle(&instance, variant);
            let diff = max_abs_diff(&want, &got);
            assert!(
                diff < 1e-10,
                "{variant:?} case {case} (l={l}, d={d}, n={heads}): max diff {diff}"
            );
        }
    }
}

#[test]
fn every_variant_passes_finite_difference_check() {
    // l=8, d=16, n=4 instances per the verification protocol.
    for variant in ALL_VARIANTS {
        let heads = if matches!(variant, AttentionVariant::Rpe) { 1 } else { 4 };
        let (l, d) = (8usize, 16usize);
        let mut rng = Rng::new(77 + variant as u64);
        let clip = 6;
        let params = AttentionParams::<f64>::init(variant, d, heads, 2 * clip - 1, 4, &mut rng);
        let x = Tensor::from_fn(&[l, d], |_| rng.normal());
        let pad = PadMask::prefix(l, 7);
        let spec = PartitionSpec::new(heads.max(2), 2).unwrap();
        let mask = variant
            .uses_partition_mask()
            .then(|| build_mask::<f64>(l, 1, &spec).unwrap());
        let boundaries = vec![f64::NEG_INFINITY, -1.0, 0.0, 2.0, f64::INFINITY];

        // Flatten present parameters in a fixed order.
        let mut tensors: Vec<Tensor<f64>> = vec![params.w_q.clone(), params.b_q.clone()];
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
                let nodes = shatter::attention::AttentionNodes {
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
                // Fixed random projection keeps the loss sensitive to every
                // output coordinate.
                let mut proj_rng = Rng::new(5);
                let weights = Tensor::from_fn(&[l, d], |_| proj_rng.normal());
                let weighted = g.mul_const(out, weights)?;
                Ok(g.sum_all(weighted))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{variant:?}: finite-difference error {err}");
    }
}

#[test]
fn partition_mask_row_mass_is_one_for_softmax_variants() {
    // With a single softmax sheet broadcast against the mask,
    // sum_h A[h,i,j] = softmax[i,j] pointwise (the mask sums to 1 over h),
    // so the double sum over (h, j) is exactly the softmax row mass of 1.
    let mut rng = Rng::new(404);
    let (l, d, n) = (6usize, 8usize, 4usize);
    let params = AttentionParams::<f64>::init(AttentionVariant::OneHeadSoftmax, d, n, 1, 1, &mut rng);
    let x = random_mat(l, d, &mut rng);
    let pad = random_pad(l, 3, &mut rng);
    let spec = PartitionSpec::new(n, 2).unwrap();
    let mask = build_mask::<f64>(l, 0, &spec).unwrap();

    // Reconstruct the weight tensor with plain loops.
    let q = linear(&x, &params.w_q, &params.b_q);
    for i in 0..l {
        if !pad.is_valid(i) {
            continue;
        }
        let raw: Vec<f64> = (0..l)
            .map(|j| {
                (0..d).map(|c| q[i][c] * x[j][c]).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let max = raw
            .iter()
            .zip(0..l)
            .filter(|&(_, j)| pad.is_valid(j))
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = raw
            .iter()
            .zip(0..l)
            .map(|(v, j)| if pad.is_valid(j) { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        let mut mass = 0.0;
        for h in 0..n {
            for j in 0..l {
                mass += (exps[j] / z) * mask.values.at(&[h, i, j]);
            }
        }
        assert!((mass - 1.0).abs() < 1e-9, "row {i}: mass {mass}");
    }
}

#[test]
fn one_head_variants_have_no_key_projection_allocated() {
    let mut rng = Rng::new(7);
    for variant in [
        AttentionVariant::OneHeadSoftmax,
        AttentionVariant::OneHeadSigmoid,
        AttentionVariant::PartBias,
        AttentionVariant::Shatter,
    ] {
        let p = AttentionParams::<f64>::init(variant, 8, 4, 1, 1, &mut rng);
        assert!(p.w_k.is_none() && p.b_k.is_none(), "{variant:?}");
    }
    for variant in [
        AttentionVariant::MultiHeadSoftmax,
        AttentionVariant::PartMask,
        AttentionVariant::Rpe,
        AttentionVariant::Rab,
    ] {
        let p = AttentionParams::<f64>::init(variant, 8, 4, 7, 4, &mut rng);
        assert!(p.w_k.is_some(), "{variant:?}");
    }
}

#[test]
fn shift_invariance_for_relative_variants() {
    // Same content at offsets 0 and s inside a padded batch: content rows of
    // the output agree for every mask/relative variant; the positionless
    // multi-head baseline trivially agrees too, so it is not checked here.
    let (m, l, d) = (5usize, 12usize, 8usize);
    let mut rng = Rng::new(31);
    let content = random_mat(m, d, &mut rng);
    for variant in ALL_VARIANTS {
        if !variant.shift_invariant() {
            continue;
        }
        let heads = if matches!(variant, AttentionVariant::Rpe) { 1 } else { 4 };
        let clip = 8;
        let mut prng = Rng::new(100 + variant as u64);
        let params = AttentionParams::<f64>::init(variant, d, heads, 2 * clip - 1, 4, &mut prng);
        let spec = PartitionSpec::new(heads.max(2), 1).unwrap();
        let mask = variant
            .uses_partition_mask()
            .then(|| build_mask::<f64>(l, 0, &spec).unwrap());
        let boundaries = vec![f64::NEG_INFINITY, -2.0, 0.0, 2.0, f64::INFINITY];

        let run = |offset: usize| {
            let mut x = vec![vec![0.0; d]; l];
            let mut valid = vec![false; l];
            for r in 0..m {
                x[offset + r] = content[r].clone();
                valid[offset + r] = true;
            }
            let pad = PadMask::from_bools(valid).unwrap();
            let mut g = Graph::new();
            let mut sink = Vec::new();
            let nodes = params.bind(&mut g, &mut sink);
            let xi = g.input(mat_to_tensor(&x));
            let mut ctx = AttnContext::new(heads);
            ctx.mask = mask.as_ref();
            ctx.rab_boundaries = Some(&boundaries);
            ctx.rpe_clip = Some(clip);
            let out = attend(&mut g, variant, xi, &nodes, &pad, &ctx).unwrap();
            g.value(out).clone()
        };
        let at0 = run(0);
        let at4 = run(4);
        let mut worst: f64 = 0.0;
        for r in 0..m {
            for c in 0..d {
                worst = worst.max((at0.at(&[r, c]) - at4.at(&[4 + r, c])).abs());
            }
        }
        assert!(worst < 1e-12, "{variant:?}: shift difference {worst}");
    }
}
