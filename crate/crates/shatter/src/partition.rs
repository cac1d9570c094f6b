//! Soft partition of relative-position space.
//!
//! A degree-D Bernstein basis is a partition of unity on [0, 1]; a monotone
//! u-transform stretches [0, 1] over nonnegative relative distances, and the
//! x-axis is reflected to cover negative offsets. The result is n functions
//! f_h over signed offsets with f_h >= 0 and sum_h f_h(x) = 1 everywhere,
//! baked into a constant n x l x l mask tensor per layer.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

/// Per-layer shape parameters of the partition. `alpha`/`beta` follow the
/// depth schedule unless overridden.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub parts: usize,
    pub layers: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// True when parts == 2 forced the fallback schedule (degree 0 divides
    /// the nominal formula by zero); recorded in run manifests.
    pub degenerate_schedule: bool,
}

impl PartitionSpec {
    /// Build with the depth schedule: alpha_k = -((k+1)/L)·D,
    /// beta_k = -(1/D)·(D/12)^((k+1)/L). Early layers concentrate near
    /// offset 0; the last layer spreads parts at interval ~12.
    pub fn new(parts: usize, layers: usize) -> Result<Self> {
        if parts < 2 || parts % 2 != 0 {
            return Err(Error::Config(format!(
                "partition needs an even part count >= 2, got {parts}"
            )));
        }
        if layers == 0 {
            return Err(Error::Config("partition needs at least one layer".into()));
        }
        let degree = parts / 2 - 1;
        let mut alpha = Vec::with_capacity(layers);
        let mut beta = Vec::with_capacity(layers);
        let degenerate = degree == 0;
        for k in 0..layers {
            let (a, b) = layer_schedule(k, layers, degree);
            alpha.push(a);
            beta.push(b);
        }
        Ok(PartitionSpec {
            parts,
            layers,
            alpha,
            beta,
            degenerate_schedule: degenerate,
        })
    }

    /// Override hook for experimenting with other schedules; both slices are
    /// per-layer and must be negative.
    pub fn with_overrides(parts: usize, alpha: &[f64], beta: &[f64]) -> Result<Self> {
        if parts < 2 || parts % 2 != 0 {
            return Err(Error::Config(format!(
                "partition needs an even part count >= 2, got {parts}"
            )));
        }
        if alpha.len() != beta.len() || alpha.is_empty() {
            return Err(Error::Config(
                "alpha/beta overrides must be nonempty and the same length".into(),
            ));
        }
        for (&a, &b) in alpha.iter().zip(beta) {
            if a >= 0.0 || b >= 0.0 {
                return Err(Error::Config(format!(
                    "alpha and beta must be negative, got alpha={a}, beta={b}"
                )));
            }
        }
        Ok(PartitionSpec {
            parts,
            layers: alpha.len(),
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
            degenerate_schedule: false,
        })
    }

    pub fn degree(&self) -> usize {
        self.parts / 2 - 1
    }

    /// Stable content hash over (parts, layers, alpha bits, beta bits);
    /// keys the mask cache.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        eat(self.parts as u64);
        eat(self.layers as u64);
        for &a in &self.alpha {
            eat(a.to_bits());
        }
        for &b in &self.beta {
            eat(b.to_bits());
        }
        h
    }
}

/// alpha/beta for layer k of L at Bernstein degree D. The nominal formula
/// divides by D, so degree 0 (two parts) substitutes alpha = -(k+1)/L,
/// beta = -1; the basis is constant at degree 0, so only validity matters.
pub fn layer_schedule(k: usize, layers: usize, degree: usize) -> (f64, f64) {
    let frac = (k + 1) as f64 / layers as f64;
    if degree == 0 {
        return (-frac, -1.0);
    }
    let d = degree as f64;
    let alpha = -frac * d;
    let beta = -(1.0 / d) * (d / 12.0).powf(frac);
    (alpha, beta)
}

/// Degree-D Bernstein basis at u: B_v(u) = C(D,v)·u^v·(1-u)^(D-v).
/// Nonnegative, sums to 1 on [0, 1]. Binomials are exact integers.
pub fn bernstein_basis(degree: usize, u: f64) -> Vec<f64> {
    let u = u.clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(degree + 1);
    for v in 0..=degree {
        let c = binomial(degree, v) as f64;
        out.push(c * u.powi(v as i32) * (1.0 - u).powi((degree - v) as i32));
    }
    out
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..k {
        num *= (n - i) as u128;
        den *= (i + 1) as u128;
    }
    num / den
}

/// Map a nonnegative relative distance into [0, 1]:
/// u = ln(e^(beta·x)·(1-e^alpha) + e^alpha) / alpha.
/// Monotone nondecreasing, u(0) = 0, u(inf) = 1. Evaluated through
/// ln_1p/exp_m1 so large beta·x cannot underflow the log argument.
pub fn u_transform(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha >= 0.0 || beta >= 0.0 {
        return Err(Error::Config(format!(
            "u_transform needs alpha < 0 and beta < 0, got alpha={alpha}, beta={beta}"
        )));
    }
    if x < 0.0 {
        return Err(Error::Numeric(format!("u_transform needs x >= 0, got {x}")));
    }
    // e^(bx)(1-e^a) + e^a  ==  1 + (1-e^a)(e^(bx) - 1)
    let one_minus_ea = -alpha.exp_m1();
    let u = (one_minus_ea * (beta * x).exp_m1()).ln_1p() / alpha;
    Ok(u.clamp(0.0, 1.0))
}

/// The n part weights at signed offset x for layer k. Parts 0..=D cover
/// x >= 0 (Bernstein index ascending), parts D+1..n-1 cover x < 0; each
/// half is identically zero outside its own sign.
pub fn eval_parts(x: i64, layer: usize, spec: &PartitionSpec) -> Result<Vec<f64>> {
    if layer >= spec.layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {}-layer partition",
            spec.layers
        )));
    }
    let degree = spec.degree();
    let half = degree + 1;
    let mut out = vec![0.0; spec.parts];
    let (alpha, beta) = (spec.alpha[layer], spec.beta[layer]);
    if x >= 0 {
        let u = u_transform(x as f64, alpha, beta)?;
        out[..half].copy_from_slice(&bernstein_basis(degree, u));
    } else {
        let u = u_transform(-x as f64, alpha, beta)?;
        out[half..].copy_from_slice(&bernstein_basis(degree, u));
    }
    Ok(out)
}

/// The constant mask tensor of one layer: values[h, i, j] = f_h(j - i).
/// No trainable content.
#[derive(Debug, Clone)]
pub struct PartitionMask<T: Scalar> {
    pub values: Arc<Tensor<T>>,
    pub layer: usize,
}

impl<T: Scalar> PartitionMask<T> {
    /// Wrap an arbitrary n x l x l tensor as a mask (tests and ablations;
    /// normal construction goes through `build_mask`).
    pub fn from_values(values: Tensor<T>, layer: usize) -> Result<Self> {
        if values.rank() != 3 || values.shape()[1] != values.shape()[2] {
            return Err(Error::Shape(format!(
                "partition mask wants [n, l, l], got {:?}",
                values.shape()
            )));
        }
        Ok(PartitionMask {
            values: Arc::new(values),
            layer,
        })
    }

    pub fn parts(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Build the n x l x l mask for one layer. Weights depend only on j - i, so
/// each of the 2l-1 diagonals is evaluated once.
pub fn build_mask<T: Scalar>(l: usize, layer: usize, spec: &PartitionSpec) -> Result<PartitionMask<T>> {
    if l == 0 {
        return Err(Error::Config("mask needs sequence length >= 1".into()));
    }
    let n = spec.parts;
    let mut by_offset: Vec<Vec<f64>> = Vec::with_capacity(2 * l - 1);
    for off in -(l as i64 - 1)..=(l as i64 - 1) {
        by_offset.push(eval_parts(off, layer, spec)?);
    }
    let mut values = Tensor::zeros(&[n, l, l]);
    for h in 0..n {
        for i in 0..l {
            for j in 0..l {
                let off = (j as i64 - i as i64 + l as i64 - 1) as usize;
                values.data_mut()[(h * l + i) * l + j] = T::from_f64(by_offset[off][h]);
            }
        }
    }
    Ok(PartitionMask {
        values: Arc::new(values),
        layer,
    })
}

/// Masks are constant per (length, layer, spec); rebuilding them every step
/// would forfeit the speed advantage of a constant mask, so they are cached
/// under the spec's content hash. Concurrent readers share the Arc.
pub struct MaskCache<T: Scalar> {
    masks: RwLock<HashMap<(usize, usize, u64), Arc<Tensor<T>>>>,
}

impl<T: Scalar> Default for MaskCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> MaskCache<T> {
    pub fn new() -> Self {
        MaskCache {
            masks: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, l: usize, layer: usize, spec: &PartitionSpec) -> Result<PartitionMask<T>> {
        let key = (l, layer, spec.content_hash());
        if let Some(found) = self.masks.read().expect("mask cache poisoned").get(&key) {
            return Ok(PartitionMask {
                values: Arc::clone(found),
                layer,
            });
        }
        let built = build_mask::<T>(l, layer, spec)?;
        let mut map = self.masks.write().expect("mask cache poisoned");
        let entry = map.entry(key).or_insert_with(|| Arc::clone(&built.values));
        Ok(PartitionMask {
            values: Arc::clone(entry),
            layer,
        })
    }

    pub fn cached_count(&self) -> usize {
        self.masks.read().expect("mask cache poisoned").len()
    }
}

// ── hard buckets (the discrete special case) ────────────────────────

/// Validate b_0 = -inf < ... < b_m = +inf.
pub fn validate_boundaries(boundaries: &[f64]) -> Result<()> {
    if boundaries.len() < 2 {
        return Err(Error::Config("need at least two boundaries".into()));
    }
    if boundaries[0] != f64::NEG_INFINITY || *boundaries.last().unwrap() != f64::INFINITY {
        return Err(Error::Config(
            "boundaries must start at -inf and end at +inf".into(),
        ));
    }
    if !boundaries.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("boundaries must be strictly increasing".into()));
    }
    Ok(())
}

/// Index g of the half-open interval [b_g, b_{g+1}) containing x.
pub fn bucket_index(boundaries: &[f64], x: f64) -> usize {
    let m = boundaries.len() - 1;
    for g in (0..m).rev() {
        if x >= boundaries[g] {
            return g;
        }
    }
    0
}

/// Indicator weights over m buckets: exactly one entry is 1. This is the
/// discrete partition of unity that the soft masks generalize.
pub fn hard_bucket_parts(boundaries: &[f64], x: f64) -> Result<Vec<f64>> {
    validate_boundaries(boundaries)?;
    let m = boundaries.len() - 1;
    let mut out = vec![0.0; m];
    out[bucket_index(boundaries, x)] = 1.0;
    Ok(out)
}

/// Symmetric T5-style boundaries for m buckets: per side, half the buckets
/// take one offset each, the rest widen log-uniformly out to max_distance.
/// Returns m+1 boundaries from -inf to +inf.
pub fn t5_default_boundaries(m: usize, max_distance: usize) -> Result<Vec<f64>> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::Config(format!(
            "bucket count must be even and >= 2, got {m}"
        )));
    }
    let per_side = m / 2;
    let exact = per_side / 2;
    let mut positive: Vec<f64> = (1..=exact).map(|v| v as f64).collect();
    let log_slots = per_side - 1 - exact;
    let lo = exact.max(1) as f64;
    let hi = max_distance as f64;
    if hi <= lo {
        return Err(Error::Config(format!(
            "max_distance {max_distance} too small for {m} buckets"
        )));
    }
    let mut last = lo;
    for s in 1..=log_slots {
        let t = s as f64 / log_slots as f64;
        let mut b = (lo.ln() + t * (hi.ln() - lo.ln())).exp().round();
        if b <= last {
            b = last + 1.0;
        }
        positive.push(b);
        last = b;
    }
    let mut boundaries = vec![f64::NEG_INFINITY];
    boundaries.extend(positive.iter().rev().map(|b| -b));
    boundaries.push(0.0);
    boundaries.extend(positive.iter());
    boundaries.push(f64::INFINITY);
    validate_boundaries(&boundaries)?;
    if boundaries.len() != m + 1 {
        return Err(Error::Config(format!(
            "internal: built {} boundaries for {m} buckets",
            boundaries.len()
        )));
    }
    Ok(boundaries)
}

/// Rows (layer, part, x, weight) sampling every f_h on integer offsets in
/// [-range, range]; feeds the partition-plot CSV.
pub fn partition_plot_rows(spec: &PartitionSpec, range: i64) -> Result<Vec<(usize, usize, i64, f64)>> {
    let mut rows = Vec::new();
    for layer in 0..spec.layers {
        for part in 0..spec.parts {
            for x in -range..=range {
                let w = eval_parts(x, layer, spec)?[part];
                rows.push((layer, part, x, w));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bernstein_linear_and_symmetric_midpoint() {
        let b = bernstein_basis(1, 0.25);
        assert!((b[0] - 0.75).abs() < 1e-15 && (b[1] - 0.25).abs() < 1e-15);
        let b2 = bernstein_basis(2, 0.5);
        assert!((b2[0] - 0.25).abs() < 1e-15);
        assert!((b2[1] - 0.5).abs() < 1e-15);
        assert!((b2[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bernstein_sums_to_one_up_to_degree_16() {
        for degree in 0..=16usize {
            for step in 0..=20 {
                let u = step as f64 / 20.0;
                let sum: f64 = bernstein_basis(degree, u).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "D={degree} u={u} sum={sum}");
            }
        }
    }

    #[test]
    fn u_transform_endpoints() {
        assert_eq!(u_transform(0.0, -2.0, -1.0).unwrap(), 0.0);
        let far = u_transform(1e6, -2.0, -1.0).unwrap();
        assert!((far - 1.0).abs() < 1e-9, "u(1e6)={far}");
    }

    #[test]
    fn u_transform_matches_direct_closed_form() {
        // Oracle: the closed form evaluated directly in f64 (the
        // implementation goes through ln_1p/exp_m1 instead).
        let (alpha, beta, x) = (-2.0f64, -1.0f64, 1.0f64);
        let direct = ((beta * x).exp() * (1.0 - alpha.exp()) + alpha.exp()).ln() / alpha;
        let got = u_transform(x, alpha, beta).unwrap();
        assert!((got - direct).abs() < 1e-14, "{got} vs {direct}");

        for &(a, b) in &[(-0.5, -0.1), (-5.0, -0.083), (-1.0, -3.0)] {
            for step in 0..30 {
                let x = step as f64 * 0.7;
                let direct = ((b * x).exp() * (1.0 - f64::exp(a)) + f64::exp(a)).ln() / a;
                let got = u_transform(x, a, b).unwrap();
                assert!((got - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn u_transform_rejects_nonnegative_parameters() {
        assert!(u_transform(1.0, 0.0, -1.0).is_err());
        assert!(u_transform(1.0, -1.0, 0.5).is_err());
    }

    #[test]
    fn u_transform_monotone_on_grid() {
        let (alpha, beta) = layer_schedule(3, 12, 5);
        let mut prev = -1.0;
        for step in 0..2000 {
            let x = step as f64 * 0.5;
            let u = u_transform(x, alpha, beta).unwrap();
            assert!(u >= prev - 1e-12, "not monotone at x={x}");
            prev = u;
        }
    }

    #[test]
    fn schedule_last_layer_and_first_layer() {
        let (a, b) = layer_schedule(11, 12, 5);
        assert!((a + 5.0).abs() < 1e-15);
        assert!((b + 1.0 / 12.0).abs() < 1e-15);

        // k=0, L=12, D=5: alpha = -5/12, beta = -(1/5)(5/12)^(1/12).
        let (a0, b0) = layer_schedule(0, 12, 5);
        assert!((a0 + 5.0 / 12.0).abs() < 1e-15);
        let expect_b = -(1.0 / 5.0) * (5.0f64 / 12.0).powf(1.0 / 12.0);
        assert!((b0 - expect_b).abs() < 1e-15);
    }

    #[test]
    fn schedule_alpha_strictly_decreasing_in_depth() {
        for &(layers, degree) in &[(2usize, 1usize), (12, 5), (4, 7)] {
            let mut prev = 0.0;
            for k in 0..layers {
                let (a, b) = layer_schedule(k, layers, degree);
                assert!(a < prev);
                assert!(b < 0.0);
                prev = a;
            }
        }
    }

    #[test]
    fn degenerate_degree_zero_schedule() {
        let spec = PartitionSpec::new(2, 3).unwrap();
        assert!(spec.degenerate_schedule);
        assert_eq!(spec.beta, vec![-1.0, -1.0, -1.0]);
        assert!((spec.alpha[2] + 1.0).abs() < 1e-15);
        // Two parts: right half owns x >= 0 entirely.
        assert_eq!(eval_parts(0, 0, &spec).unwrap(), vec![1.0, 0.0]);
        assert_eq!(eval_parts(-3, 0, &spec).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn eval_parts_at_zero_gives_first_right_part() {
        let spec = PartitionSpec::new(8, 4).unwrap();
        let w = eval_parts(0, 2, &spec).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!(w[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eval_parts_mirror_symmetry() {
        let spec = PartitionSpec::new(12, 6).unwrap();
        let half = spec.degree() + 1;
        for layer in 0..6 {
            for x in 1..40i64 {
                let right = eval_parts(x, layer, &spec).unwrap();
                let left = eval_parts(-x, layer, &spec).unwrap();
                for v in 0..half {
                    assert!((right[v] - left[half + v]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn eval_parts_matches_composed_oracle() {
        // x=5, n=12, last layer: compose schedule, u-transform and the
        // Bernstein formula directly.
        let spec = PartitionSpec::new(12, 12).unwrap();
        let d = 5usize;
        let (alpha, beta) = (-(d as f64), -1.0 / 12.0);
        let u = ((beta * 5.0).exp() * (1.0 - alpha.exp()) + alpha.exp()).ln() / alpha;
        let mut expect = vec![0.0; 12];
        for v in 0..=d {
            let c = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0][v];
            expect[v] = c * u.powi(v as i32) * (1.0 - u).powi((d - v) as i32);
        }
        let got = eval_parts(5, 11, &spec).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_shift_invariance_and_row_sums() {
        let spec = PartitionSpec::new(8, 3).unwrap();
        let mask = build_mask::<f64>(16, 1, &spec).unwrap();
        let v = &mask.values;
        for h in 0..8 {
            for i in 0..15 {
                for j in 0..15 {
                    assert_eq!(v.at(&[h, i, j]), v.at(&[h, i + 1, j + 1]));
                }
            }
        }
        for i in 0..16 {
            for j in 0..16 {
                let sum: f64 = (0..8).map(|h| v.at(&[h, i, j])).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for h in 0..8 {
                    let x = v.at(&[h, i, j]);
                    assert!((0.0..=1.0).contains(&x));
                }
            }
        }
    }

    #[test]
    fn mask_length_one() {
        let spec = PartitionSpec::new(4, 2).unwrap();
        let mask = build_mask::<f64>(1, 0, &spec).unwrap();
        assert_eq!(mask.values.shape(), &[4, 1, 1]);
        assert_eq!(mask.values.at(&[0, 0, 0]), 1.0);
    }

    #[test]
    fn mask_extension_prefix_is_exact() {
        let spec = PartitionSpec::new(8, 2).unwrap();
        let small = build_mask::<f32>(24, 1, &spec).unwrap();
        let large = build_mask::<f32>(48, 1, &spec).unwrap();
        for h in 0..8 {
            for i in 0..24 {
                for j in 0..24 {
                    assert_eq!(small.values.at(&[h, i, j]), large.values.at(&[h, i, j]));
                }
            }
        }
    }

    #[test]
    fn mask_cache_reuses_storage() {
        let spec = PartitionSpec::new(4, 2).unwrap();
        let cache = MaskCache::<f32>::new();
        let a = cache.get(8, 0, &spec).unwrap();
        let b = cache.get(8, 0, &spec).unwrap();
        assert!(Arc::ptr_eq(&a.values, &b.values));
        assert_eq!(cache.cached_count(), 1);
        let _ = cache.get(8, 1, &spec).unwrap();
        assert_eq!(cache.cached_count(), 2);
    }

    #[test]
    fn hard_buckets_follow_half_open_convention() {
        let bounds = [f64::NEG_INFINITY, -2.0, 0.0, 2.0, f64::INFINITY];
        assert_eq!(hard_bucket_parts(&bounds, -3.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(hard_bucket_parts(&bounds, 0.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(hard_bucket_parts(&bounds, 2.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(hard_bucket_parts(&bounds, -2.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn t5_boundaries_are_valid_and_sized() {
        let b = t5_default_boundaries(32, 128).unwrap();
        assert_eq!(b.len(), 33);
        validate_boundaries(&b).unwrap();
        assert_eq!(bucket_index(&b, 0.0), 16);
    }

    #[test]
    fn last_layer_parts_are_single_peaked() {
        // Four parts, last layer: each right-half part rises to one peak and
        // falls (or is monotone), sampled on integer offsets 0..=64.
        let spec = PartitionSpec::new(4, 2).unwrap();
        for part in 0..2 {
            let curve: Vec<f64> = (0..=64)
                .map(|x| eval_parts(x, 1, &spec).unwrap()[part])
                .collect();
            let peak = curve
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for w in curve[..=peak].windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "part {part} must rise to its peak");
            }
            for w in curve[peak..].windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "part {part} must fall after its peak");
            }
        }
    }

    #[test]
    fn plot_rows_cover_grid() {
        let spec = PartitionSpec::new(4, 2).unwrap();
        let rows = partition_plot_rows(&spec, 64).unwrap();
        assert_eq!(rows.len(), 2 * 4 * 129);
        // Per (layer, x): weights sum to 1.
        let mut sums = std::collections::HashMap::new();
        for (layer, _, x, w) in &rows {
            *sums.entry((*layer, *x)).or_insert(0.0) += w;
        }
        for (_, s) in sums {
            assert!((s - 1.0f64).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_property(
            parts_pick in 0usize..5,
            layer_count in 1usize..8,
            x in -512i64..512,
        ) {
            let parts = [2usize, 4, 8, 12, 16][parts_pick];
            let spec = PartitionSpec::new(parts, layer_count).unwrap();
            for layer in 0..layer_count {
                let w = eval_parts(x, layer, &spec).unwrap();
                let sum: f64 = w.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
