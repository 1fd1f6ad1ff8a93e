//! Learnable 2D lookup tables built from cumulative-softmax sub-tables.
//!
//! The feature sub-table `T_f` (length `N_f`) is the prefix sum of
//! `softmax(g)` with a leading zero, so it rises monotonically from 0 to 1.
//! The weight sub-table `T_w` (odd length `N_w`) has a zero centre and two
//! cumulative softmax arms that grow outward to -1 and +1. The 2D table is the
//! outer product `T[i][j] = T_f[i] * T_w[j]`, bounded in `[-1, 1]` and monotone
//! along both axes.
//!
//! Gradient re-scaling multiplies the gradient collected by each sub-table
//! cell by `sqrt(N_avg / N_i)`, where `N_i` is how many lookups hit the cell in
//! the current step.

use serde::{Deserialize, Serialize};

use crate::autodiff::CustomOp;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default table granularity along both axes.
pub const DEFAULT_GRANULARITY: usize = 33;

/// Stable softmax; returns the unnormalized exponentials and their sum so
/// callers can divide prefix sums by the same total.
fn softmax_parts<T: Scalar>(logits: &[T]) -> (Vec<T>, T) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&g| (g - m).exp()).collect();
    let total = e.iter().copied().sum();
    (e, total)
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let (e, total) = softmax_parts(logits);
    e.into_iter().map(|v| v / total).collect()
}

/// Prefix sums of the exponentials divided by their total. Because partial
/// sums of non-negative terms never decrease and never exceed the total, the
/// result is non-decreasing, bounded by 1, and its last entry is exactly 1.
fn cumulative<T: Scalar>(logits: &[T]) -> Vec<T> {
    let (e, total) = softmax_parts(logits);
    let mut acc = T::zero();
    let mut out = Vec::with_capacity(e.len());
    for v in e {
        acc += v;
        out.push(acc / total);
    }
    if let Some(last) = out.last_mut() {
        *last = T::one();
    }
    out
}

fn check_logits<T: Scalar>(logits: &[T], what: &str) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: logits must not be empty")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: logits")));
    }
    Ok(())
}

/// `T_f` from `N_f - 1` logits: `[0, p_1, p_1 + p_2, ..., 1]`.
pub fn build_feature_subtable<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits, "feature sub-table")?;
    let mut out = Vec::with_capacity(logits.len() + 1);
    out.push(T::zero());
    out.extend(cumulative(logits));
    Ok(out)
}

/// `T_w` from two arms of `(N_w - 1) / 2` logits each. Entry `c + m` is the
/// sum of the first `m` positive-arm masses; entry `c - m` is minus the sum of
/// the first `m` negative-arm masses, counting outward from the centre `c`.
pub fn build_weight_subtable<T: Scalar>(neg_logits: &[T], pos_logits: &[T]) -> Result<Vec<T>> {
    check_logits(neg_logits, "weight sub-table (negative arm)")?;
    check_logits(pos_logits, "weight sub-table (positive arm)")?;
    if neg_logits.len() != pos_logits.len() {
        return Err(Error::InvalidArgument(format!(
            "weight sub-table arms differ in length ({} vs {}); N_w must be odd",
            neg_logits.len(),
            pos_logits.len()
        )));
    }
    let half = pos_logits.len();
    let neg = cumulative(neg_logits);
    let pos = cumulative(pos_logits);
    let mut out = vec![T::zero(); 2 * half + 1];
    for m in 1..=half {
        out[half + m] = pos[m - 1];
        out[half - m] = -neg[m - 1];
    }
    Ok(out)
}

/// Arm length for an odd weight granularity.
pub fn weight_arm_len(n_w: usize) -> Result<usize> {
    if n_w < 3 || n_w % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "weight granularity must be odd and at least 3, got {n_w} (centre undefined)"
        )));
    }
    Ok((n_w - 1) / 2)
}

/// Vector-Jacobian product of [`cumulative`] (excluding the pinned final 1).
fn cumulative_vjp<T: Scalar>(logits: &[T], grad_entries: &[T]) -> Vec<T> {
    let p = softmax(logits);
    let k = p.len();
    // d entry_i / d p_m = 1 for m <= i; the last entry is the constant 1.
    let mut gp = vec![T::zero(); k];
    let mut suffix = T::zero();
    for m in (0..k).rev() {
        if m + 1 < k {
            suffix += grad_entries[m];
        }
        gp[m] = suffix;
    }
    let dot: T = p.iter().zip(&gp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(&gp).map(|(&pm, &g)| pm * (g - dot)).collect()
}

/// Logit gradients of the feature sub-table given gradients on its entries.
pub fn feature_logit_grads<T: Scalar>(logits: &[T], grad_entries: &[T]) -> Vec<T> {
    debug_assert_eq!(grad_entries.len(), logits.len() + 1);
    cumulative_vjp(logits, &grad_entries[1..])
}

/// Logit gradients of both weight arms given gradients on the `N_w` entries.
pub fn weight_logit_grads<T: Scalar>(neg_logits: &[T], pos_logits: &[T], grad_entries: &[T]) -> (Vec<T>, Vec<T>) {
    let half = pos_logits.len();
    debug_assert_eq!(grad_entries.len(), 2 * half + 1);
    let pos_g: Vec<T> = (1..=half).map(|m| grad_entries[half + m]).collect();
    let neg_g: Vec<T> = (1..=half).map(|m| -grad_entries[half - m]).collect();
    (cumulative_vjp(neg_logits, &neg_g), cumulative_vjp(pos_logits, &pos_g))
}

/// Per-cell hit counters for one layer and one step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellCounts {
    pub feature: Vec<u64>,
    pub weight: Vec<u64>,
}

impl CellCounts {
    pub fn new(n_f: usize, n_w: usize) -> Self {
        Self { feature: vec![0; n_f], weight: vec![0; n_w] }
    }

    pub fn record(&mut self, i: usize, j: usize) {
        self.feature[i] += 1;
        self.weight[j] += 1;
    }

    /// Adds counts gathered by another worker.
    pub fn merge(&mut self, other: &CellCounts) -> Result<()> {
        if self.feature.len() != other.feature.len() || self.weight.len() != other.weight.len() {
            return Err(Error::Shape("cell counts of different granularity".into()));
        }
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            *a += b;
        }
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.feature.fill(0);
        self.weight.fill(0);
    }
}

/// Mean hits per cell, `total / cells`.
pub fn average_count(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().sum::<u64>() as f64 / counts.len() as f64
}

/// Multiplicative factor `sqrt(N_avg / N_i)` per cell; 1 for cells without hits.
pub fn rescale_factors(counts: &[u64]) -> Vec<f64> {
    let avg = average_count(counts);
    counts
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { (avg / n as f64).sqrt() })
        .collect()
}

/// Scales each cell gradient in place by [`rescale_factors`].
pub fn rescale_gradients<T: Scalar>(grads: &mut [T], counts: &[u64]) {
    debug_assert_eq!(grads.len(), counts.len());
    for (g, f) in grads.iter_mut().zip(rescale_factors(counts)) {
        *g *= T::from_f64_lossy(f);
    }
}

/// How a layer's table is parameterized during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableMode {
    /// Cumulative-softmax construction with frozen uniform logits (a linear ramp).
    Fixed,
    /// Every sub-table entry is a free parameter, drawn from `U(0, 1)`.
    IndependentRandom,
    /// Every sub-table entry is a free parameter, initialized to the linear ramp.
    IndependentStep,
    /// Learnable cumulative-softmax sub-tables.
    Cumulative,
}

impl TableMode {
    pub fn is_cumulative(self) -> bool {
        matches!(self, TableMode::Fixed | TableMode::Cumulative)
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, TableMode::Fixed)
    }
}

/// Materialized sub-tables of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable<T> {
    pub feature: Vec<T>,
    pub weight: Vec<T>,
}

impl<T: Scalar> LookupTable<T> {
    pub fn new(feature: Vec<T>, weight: Vec<T>) -> Result<Self> {
        if feature.len() < 2 {
            return Err(Error::InvalidArgument("feature sub-table needs at least 2 entries".into()));
        }
        weight_arm_len(weight.len())?;
        Ok(Self { feature, weight })
    }

    /// Uniform-logit table: `T_f[i] = i / (N_f - 1)`, `T_w[j] = 2j / (N_w - 1) - 1`
    /// up to rounding.
    pub fn uniform(n_f: usize, n_w: usize) -> Result<Self> {
        let half = weight_arm_len(n_w)?;
        if n_f < 2 {
            return Err(Error::InvalidArgument("feature granularity must be at least 2".into()));
        }
        let feature = build_feature_subtable(&vec![T::zero(); n_f - 1])?;
        let weight = build_weight_subtable(&vec![T::zero(); half], &vec![T::zero(); half])?;
        Self::new(feature, weight)
    }

    /// Exact-product table: `T_f[i] * T_w[j] = (i / (N_f - 1)) * (2j / (N_w - 1) - 1)`.
    pub fn exact_product(n_f: usize, n_w: usize) -> Result<Self> {
        weight_arm_len(n_w)?;
        let feature = (0..n_f).map(|i| T::from_f64_lossy(i as f64 / (n_f - 1) as f64)).collect();
        let weight = (0..n_w)
            .map(|j| T::from_f64_lossy(2.0 * j as f64 / (n_w - 1) as f64 - 1.0))
            .collect();
        Self::new(feature, weight)
    }

    pub fn n_f(&self) -> usize {
        self.feature.len()
    }

    pub fn n_w(&self) -> usize {
        self.weight.len()
    }

    pub fn center(&self) -> usize {
        (self.weight.len() - 1) / 2
    }

    /// `T[i][j] = T_f[i] * T_w[j]`.
    pub fn entry(&self, i: usize, j: usize) -> Result<T> {
        if i >= self.n_f() || j >= self.n_w() {
            return Err(Error::InvalidArgument(format!(
                "table index ({i}, {j}) outside {}x{}",
                self.n_f(),
                self.n_w()
            )));
        }
        Ok(self.feature[i] * self.weight[j])
    }

    /// [`entry`](Self::entry) that also records the hit on both sub-table cells.
    pub fn lookup(&self, i: usize, j: usize, counts: &mut CellCounts) -> Result<T> {
        let v = self.entry(i, j)?;
        counts.record(i, j);
        Ok(v)
    }

    /// Row-major `N_f x N_w` materialization.
    pub fn materialize(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_f() * self.n_w());
        for &f in &self.feature {
            for &w in &self.weight {
                out.push(f * w);
            }
        }
        out
    }
}

/// Graph op: feature logits -> `T_f`.
pub struct FeatureSubTableOp;

impl<T: Scalar> CustomOp<T> for FeatureSubTableOp {
    fn name(&self) -> &str {
        "feature_subtable"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::from_vec(feature_logit_grads(inputs[0].data(), g.data())))])
    }
}

/// Graph op: (negative-arm logits, positive-arm logits) -> `T_w`.
pub struct WeightSubTableOp;

impl<T: Scalar> CustomOp<T> for WeightSubTableOp {
    fn name(&self) -> &str {
        "weight_subtable"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (gn, gp) = weight_logit_grads(inputs[0].data(), inputs[1].data(), g.data());
        Ok(vec![Some(Tensor::from_vec(gn)), Some(Tensor::from_vec(gp))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::gradcheck::{check_gradients, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn uniform_feature_ramp() {
        let t = build_feature_subtable(&[0.3f64; 4]).unwrap();
        assert!(close(&t, &[0.0, 0.25, 0.5, 0.75, 1.0]), "{t:?}");
    }

    #[test]
    fn hand_evaluated_feature_subtable() {
        let t = build_feature_subtable(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(&t, &[0.0, 0.25, 1.0]), "{t:?}");
    }

    #[test]
    fn uniform_weight_ramp() {
        let t = build_weight_subtable(&[0.0f64; 2], &[0.0; 2]).unwrap();
        assert!(close(&t, &[-1.0, -0.5, 0.0, 0.5, 1.0]), "{t:?}");
    }

    #[test]
    fn negative_arm_accumulates_outward() {
        let t = build_weight_subtable(&[3f64.ln(), 1f64.ln()], &[1f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(&t, &[-1.0, -0.75, 0.0, 0.25, 1.0]), "{t:?}");
    }

    #[test]
    fn empty_and_uneven_logits_are_rejected() {
        assert!(build_feature_subtable::<f32>(&[]).is_err());
        assert!(build_weight_subtable::<f32>(&[0.0], &[0.0, 0.0]).is_err());
        assert!(weight_arm_len(4).is_err());
        assert!(LookupTable::<f32>::uniform(5, 6).is_err());
    }

    #[test]
    fn lookup_examples() {
        let t = LookupTable::<f64>::uniform(5, 5).unwrap();
        let mut counts = CellCounts::new(5, 5);
        assert!((t.lookup(3, 4, &mut counts).unwrap() - 0.75).abs() < 1e-12);
        for i in 0..5 {
            assert_eq!(t.lookup(i, t.center(), &mut counts).unwrap(), 0.0);
        }
        assert_eq!(t.lookup(4, 4, &mut counts).unwrap(), 1.0);
        assert_eq!(counts.feature, vec![1, 1, 1, 2, 2]);
        assert_eq!(counts.weight, vec![0, 0, 5, 0, 2]);
        assert!(t.lookup(5, 0, &mut counts).is_err());
    }

    #[test]
    fn subtable_grad_pattern() {
        // r = T_f[2] * T_w[4] = (p1 + p2)(q3 + q4) on a uniform 5x5 table.
        let t = LookupTable::<f64>::uniform(5, 5).unwrap();
        let mut g_entries = vec![0.0; 5];
        g_entries[2] = t.weight[4];
        // d r / d p_m is the suffix sum of entry gradients (before the softmax).
        let mut dp = [0.0; 4];
        for (m, d) in dp.iter_mut().enumerate() {
            *d = g_entries[m + 1..4].iter().sum::<f64>();
        }
        assert_eq!(dp, [1.0, 1.0, 0.0, 0.0]);
        let zero = feature_logit_grads(&[0.0f64; 4], &[0.0; 5]);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let n_f = 9;
            let n_w = 9;
            let fl = Tensor::<f64>::randn(&[n_f - 1], 1.0, &mut rng);
            let nl = Tensor::<f64>::randn(&[(n_w - 1) / 2], 1.0, &mut rng);
            let pl = Tensor::<f64>::randn(&[(n_w - 1) / 2], 1.0, &mut rng);
            let hits: Vec<(usize, usize, f64)> = (0..20)
                .map(|_| (rng.random_range(0..n_f), rng.random_range(0..n_w), rng.random_range(-1.0..1.0)))
                .collect();
            let report = check_gradients(&[fl, nl, pl], GradCheck::default(), |g, v| {
                let tf = build_feature_subtable(g.value(v[0]).data())?;
                let tf = g.custom(Box::new(FeatureSubTableOp), &[v[0]], Tensor::from_vec(tf))?;
                let tw = build_weight_subtable(g.value(v[1]).data(), g.value(v[2]).data())?;
                let tw = g.custom(Box::new(WeightSubTableOp), &[v[1], v[2]], Tensor::from_vec(tw))?;
                hit_loss(g, tf, tw, &hits)
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{report:?}");
        }
    }

    /// `sum_k c_k * T_f[i_k] * T_w[j_k]` with frozen indices.
    fn hit_loss(g: &mut Graph<f64>, tf: crate::autodiff::Var, tw: crate::autodiff::Var, hits: &[(usize, usize, f64)]) -> Result<crate::autodiff::Var> {
        let n_f = g.value(tf).len();
        let n_w = g.value(tw).len();
        let mut sel_f = vec![0.0; n_f * hits.len()];
        let mut sel_w = vec![0.0; n_w * hits.len()];
        let mut coef = vec![0.0; hits.len()];
        for (k, &(i, j, c)) in hits.iter().enumerate() {
            sel_f[k * n_f + i] = 1.0;
            sel_w[k * n_w + j] = 1.0;
            coef[k] = c;
        }
        let sf = g.constant(Tensor::new(vec![hits.len(), n_f], sel_f)?)?;
        let sw = g.constant(Tensor::new(vec![hits.len(), n_w], sel_w)?)?;
        let tf2 = g.reshape(tf, &[1, n_f])?;
        let tw2 = g.reshape(tw, &[1, n_w])?;
        let a = g.linear(tf2, sf, None)?;
        let b = g.linear(tw2, sw, None)?;
        let ab = g.mul(a, b)?;
        let c = g.constant(Tensor::new(vec![1, hits.len()], coef)?)?;
        let abc = g.mul(ab, c)?;
        g.sum(abc)
    }

    #[test]
    fn rescale_factors_examples() {
        assert_eq!(rescale_factors(&[3, 3, 3]), vec![1.0, 1.0, 1.0]);
        let f = rescale_factors(&[1, 4]);
        assert!((f[0] - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((f[1] - 0.625f64.sqrt()).abs() < 1e-12);
        let mut g = vec![0.5f64, -2.0, 3.0];
        rescale_gradients(&mut g, &[0, 2, 4]);
        assert_eq!(g[0], 0.5);
    }

    #[test]
    fn merged_counts_equal_serial_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits: Vec<(usize, usize)> = (0..500).map(|_| (rng.random_range(0..9), rng.random_range(0..5))).collect();
        let mut serial = CellCounts::new(9, 5);
        for &(i, j) in &hits {
            serial.record(i, j);
        }
        let mut shards = [CellCounts::new(9, 5), CellCounts::new(9, 5), CellCounts::new(9, 5)];
        for (k, &(i, j)) in hits.iter().enumerate() {
            shards[k % 3].record(i, j);
        }
        let mut merged = CellCounts::new(9, 5);
        for s in &shards {
            merged.merge(s).unwrap();
        }
        assert_eq!(merged, serial);
        merged.reset();
        assert!(merged.feature.iter().all(|&c| c == 0));
    }

    proptest! {
        #[test]
        fn table_invariants(
            n in prop::sample::select(vec![5usize, 9, 17, 33, 65]),
            seed in any::<u64>(),
            spread in 0.01f64..30.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-spread..spread) as f32).collect::<Vec<_>>();
            let tf = build_feature_subtable(&draw(n - 1)).unwrap();
            let tw = build_weight_subtable(&draw((n - 1) / 2), &draw((n - 1) / 2)).unwrap();
            prop_assert_eq!(tf[0], 0.0);
            prop_assert_eq!(tf[n - 1], 1.0);
            prop_assert_eq!(tw[0], -1.0);
            prop_assert_eq!(tw[(n - 1) / 2], 0.0);
            prop_assert_eq!(tw[n - 1], 1.0);
            prop_assert!(tf.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(tw.windows(2).all(|w| w[0] <= w[1]));
            let table = LookupTable::new(tf, tw).unwrap();
            let dense = table.materialize();
            for i in 0..n {
                for j in 0..n {
                    let v = table.entry(i, j).unwrap();
                    prop_assert!(v.abs() <= 1.0);
                    prop_assert_eq!(v, dense[i * n + j]);
                }
            }
        }

        #[test]
        fn rescale_keeps_sign_and_uniform_is_noop(
            grads in prop::collection::vec(-10.0f64..10.0, 1..20),
            count in 1u64..100,
        ) {
            let counts = vec![count; grads.len()];
            let mut g = grads.clone();
            rescale_gradients(&mut g, &counts);
            prop_assert_eq!(&g, &grads);
            let varied: Vec<u64> = (0..grads.len() as u64).map(|i| i * 3 % 7).collect();
            let mut h = grads.clone();
            rescale_gradients(&mut h, &varied);
            for (a, b) in h.iter().zip(&grads) {
                prop_assert!(a.signum() == b.signum() || *b == 0.0);
            }
        }
    }
}
