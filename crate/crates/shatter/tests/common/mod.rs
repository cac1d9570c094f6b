#![allow(dead_code)]

//! Shared test machinery: independent per-pair scalar-loop oracles for every
//! attention variant. These never touch the graph ops — plain f64 loops over
//! nested Vecs — so they can falsify the tensor implementation.

use shatter::attention::{AttentionParams, PadMask, ATTENTION_L2_EPS};
use shatter::rng::Rng;
use shatter::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| (0..c).map(|j| t.at(&[i, j])).collect())
        .collect()
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.normal()).collect())
        .collect()
}

pub fn mat_to_tensor(m: &Mat) -> Tensor<f64> {
    let rows = m.len();
    let cols = m[0].len();
    Tensor::new(
        vec![rows, cols],
        m.iter().flatten().copied().collect(),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// x W + b with explicit loops.
pub fn linear(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut s = b.at(&[o]);
                    for i in 0..din {
                        s += row[i] * w.at(&[i, o]);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn softmax_masked(scores: &[f64], valid: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (s, &v) in scores.iter().zip(valid) {
        if v && *s > max {
            max = *s;
        }
    }
    if !max.is_finite() {
        return vec![0.0; scores.len()];
    }
    let exps: Vec<f64> = scores
        .iter()
        .zip(valid)
        .map(|(s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn zero_invalid_rows(mut out: Mat, pad: &PadMask) -> Mat {
    for (i, row) in out.iter_mut().enumerate() {
        if !pad.is_valid(i) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Multi-head softmax attention, one (head, i, j) triple at a time.
pub fn oracle_multihead_softmax(
    x: &Mat,
    params: &AttentionParams<f64>,
    pad: &PadMask,
    heads: usize,
    bias: Option<&dyn Fn(usize, usize, usize) -> f64>,
    mask: Option<&Tensor<f64>>,
) -> Mat {
    let l = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let q = linear(x, &params.w_q, &params.b_q);
    let k = linear(x, params.w_k.as_ref().unwrap(), params.b_k.as_ref().unwrap());
    let v = linear(x, &params.w_v, &params.b_v);
    let valid: Vec<bool> = (0..l).map(|j| pad.is_valid(j)).collect();
    let mut ctx = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    let base = dot(&q[i][cols.clone()], &k[j][cols.clone()])
                        / (d as f64 / heads as f64).sqrt();
                    base + bias.map(|f| f(h, i, j)).unwrap_or(0.0)
                })
                .collect();
            let mut a = softmax_masked(&scores, &valid);
            if let Some(m) = mask {
                for (j, w) in a.iter_mut().enumerate() {
                    *w *= m.at(&[h, i, j]);
                }
            }
            for (j, &w) in a.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] += w * v[j][c];
                }
            }
        }
    }
    zero_invalid_rows(linear(&ctx, &params.w_o, &params.b_o), pad)
}

/// One-head score sheet (sigmoid or softmax), partition mask, rank-3 values,
/// optional partition bias and value contribution.
#[allow(clippy::too_many_arguments)]
pub fn oracle_one_head(
    x: &Mat,
    params: &AttentionParams<f64>,
    pad: &PadMask,
    heads: usize,
    mask: &Tensor<f64>,
    sigmoid_scores: bool,
    with_partition_bias: bool,
    with_partition_value: bool,
) -> Mat {
    let l = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let q = linear(x, &params.w_q, &params.b_q);
    let v = linear(x, &params.w_v, &params.b_v);
    let valid: Vec<bool> = (0..l).map(|j| pad.is_valid(j)).collect();

    // Optional partition bias B[i][j] = sum_h (q R^T)[i][h] N[h][i][j].
    let r = params.part_embed.as_ref();
    let bias: Option<Mat> = with_partition_bias.then(|| {
        let r = r.expect("partition bias needs R");
        let n_parts = r.shape()[0];
        (0..l)
            .map(|i| {
                (0..l)
                    .map(|j| {
                        (0..n_parts)
                            .map(|h| {
                                let qr: f64 = (0..d).map(|c| q[i][c] * r.at(&[h, c])).sum();
                                qr * mask.at(&[h, i, j])
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    });

    // Score sheet per query row.
    let mut sheet = vec![vec![0.0; l]; l];
    for i in 0..l {
        let raw: Vec<f64> = (0..l)
            .map(|j| {
                dot(&q[i], &x[j]) / (d as f64).sqrt()
                    + bias.as_ref().map(|b| b[i][j]).unwrap_or(0.0)
            })
            .collect();
        if sigmoid_scores {
            let mut s: Vec<f64> = raw
                .iter()
                .zip(&valid)
                .map(|(r, &ok)| if ok { 1.0 / (1.0 + (-r).exp()) } else { 0.0 })
                .collect();
            let norm = (s.iter().map(|v| v * v).sum::<f64>()
                + ATTENTION_L2_EPS * ATTENTION_L2_EPS)
                .sqrt();
            s.iter_mut().for_each(|v| *v /= norm);
            sheet[i] = s;
        } else {
            sheet[i] = softmax_masked(&raw, &valid);
        }
    }

    let mut ctx = vec![vec![0.0; d]; l];
    for h in 0..heads {
        for i in 0..l {
            for j in 0..l {
                let w = sheet[i][j] * mask.at(&[h, i, j]);
                for c in 0..dh {
                    ctx[i][h * dh + c] += w * v[j][h * dh + c];
                }
            }
        }
    }

    if with_partition_value {
        let r = r.expect("partition value needs R");
        let n_parts = r.shape()[0];
        // V_part = R W_v (no bias); A_part[i][h] = sum_j sheet[i][j] N[h][i][j].
        for i in 0..l {
            for h in 0..n_parts {
                let a_part: f64 = (0..l).map(|j| sheet[i][j] * mask.at(&[h, i, j])).sum();
                for c in 0..d {
                    let v_part: f64 = (0..d).map(|e| r.at(&[h, e]) * params.w_v.at(&[e, c])).sum();
                    ctx[i][c] += a_part * v_part;
                }
            }
        }
    }
    zero_invalid_rows(linear(&ctx, &params.w_o, &params.b_o), pad)
}

/// Relative position embeddings in the direct pairwise form: key and value
/// for pair (i, j) come from x_j + R[clip(j-i)].
pub fn oracle_rpe(x: &Mat, params: &AttentionParams<f64>, pad: &PadMask, clip: usize) -> Mat {
    let l = x.len();
    let d = x[0].len();
    let table = params.rpe_table.as_ref().unwrap();
    let q = linear(x, &params.w_q, &params.b_q);
    let valid: Vec<bool> = (0..l).map(|j| pad.is_valid(j)).collect();
    let row_for = |i: usize, j: usize| -> Vec<f64> {
        let c = clip as i64 - 1;
        let off = (j as i64 - i as i64).clamp(-c, c) + c;
        (0..d)
            .map(|e| x[j][e] + table.at(&[off as usize, e]))
            .collect()
    };
    let mut ctx = vec![vec![0.0; d]; l];
    for i in 0..l {
        let keys: Vec<Vec<f64>> = (0..l)
            .map(|j| {
                let shifted = vec![row_for(i, j)];
                linear(&shifted, params.w_k.as_ref().unwrap(), params.b_k.as_ref().unwrap())
                    .remove(0)
            })
            .collect();
        let scores: Vec<f64> = (0..l)
            .map(|j| dot(&q[i], &keys[j]) / (d as f64).sqrt())
            .collect();
        let a = softmax_masked(&scores, &valid);
        for (j, &w) in a.iter().enumerate() {
            let shifted = vec![row_for(i, j)];
            let val = linear(&shifted, &params.w_v, &params.b_v).remove(0);
            for c in 0..d {
                ctx[i][c] += w * val[c];
            }
        }
    }
    zero_invalid_rows(linear(&ctx, &params.w_o, &params.b_o), pad)
}

/// Bucketed relative attention bias over multi-head softmax.
pub fn oracle_rab(
    x: &Mat,
    params: &AttentionParams<f64>,
    pad: &PadMask,
    heads: usize,
    boundaries: &[f64],
) -> Mat {
    let weights = params.rab_weights.as_ref().unwrap().clone();
    let bias = move |h: usize, i: usize, j: usize| -> f64 {
        let g = shatter::partition::bucket_index(boundaries, j as f64 - i as f64);
        weights.at(&[g, h])
    };
    oracle_multihead_softmax(x, params, pad, heads, Some(&bias), None)
}

pub fn max_abs_diff(a: &Mat, got: &Tensor<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - got.at(&[i, j])).abs());
        }
    }
    worst
}

/// Random pad mask with at least `min_valid` valid positions; position 0 is
/// always valid.
pub fn random_pad(l: usize, min_valid: usize, rng: &mut Rng) -> PadMask {
    loop {
        let bools: Vec<bool> = (0..l).map(|i| i == 0 || rng.uniform() < 0.8).collect();
        if bools.iter().filter(|&&b| b).count() >= min_valid {
            return PadMask::from_bools(bools).unwrap();
        }
    }
}
