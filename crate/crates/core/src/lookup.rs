//! The training-time lookup layer.
//!
//! For every receptive-field tap the layer
//!
//! 1. scales and discretizes the weight and the input feature into table
//!    indices (`idx_w = round((clip(w / s_w, -1, 1) + 1) / 2 * (N_w - 1))`,
//!    `idx_f = round(clip(f / s_f, 0, 1) * (N_f - 1))`),
//! 2. reads the response `r = T_f[idx_f] * T_w[idx_w]`,
//! 3. re-scales it to `s_w * s_f * r`,
//! 4. accumulates the re-scaled responses and adds the bias.
//!
//! Rounding is half-away-from-zero. The forward arithmetic is pinned: the
//! re-scaled table entry is `(s_w * s_f) * (T_f[i] * T_w[j])` and taps are
//! summed from zero in `(c, ky, kx)` order before the bias is added, so the
//! re-parameterized graph reproduces it bit for bit.
//!
//! Backward uses straight-through estimation for the discretization. Inside
//! the clip range `d idx_w / d w = 1 / s_w` and `d idx_w / d s_w = -w / s_w^2`
//! (features analogously on `[0, s_f)`), zero outside. The re-scaling step is
//! differentiated exactly. How `r` responds to an index is set by [`SteRule`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::conv::{col2im, im2col, ConvShape, Geometry};
use crate::error::{Error, Result};
use crate::lut::{rescale_gradients, CellCounts, LookupTable};
use crate::tensor::{matmul_into, Scalar, Tensor, Trans};

/// Which quantity an index is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    /// Signed values mapped onto `[-1, 1]`.
    Weight,
    /// Non-negative values mapped onto `[0, 1]`; negatives clip to 0.
    Feature,
}

#[inline]
pub fn weight_index<T: Scalar>(w: T, s_w: T, n_w: usize) -> usize {
    let u = (w / s_w).max(-T::one()).min(T::one());
    let half = T::from_f64_lossy(0.5);
    let levels = T::from_usize(n_w - 1).unwrap();
    ((u + T::one()) * half * levels).round().to_usize().unwrap_or(0).min(n_w - 1)
}

#[inline]
pub fn feature_index<T: Scalar>(f: T, s_f: T, n_f: usize) -> usize {
    let u = (f / s_f).max(T::zero()).min(T::one());
    let levels = T::from_usize(n_f - 1).unwrap();
    (u * levels).round().to_usize().unwrap_or(0).min(n_f - 1)
}

/// Discretizes `values` with scale `scale` onto `levels` table indices.
pub fn compute_indices<T: Scalar>(values: &[T], scale: T, kind: AxisKind, levels: usize) -> Result<Vec<u16>> {
    if levels < 2 || levels > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("unsupported granularity {levels}")));
    }
    if !(scale.is_finite() && scale > T::zero()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("cannot index {v}")));
            }
            Ok(match kind {
                AxisKind::Weight => weight_index(v, scale, levels),
                AxisKind::Feature => feature_index(v, scale, levels),
            } as u16)
        })
        .collect()
}

/// How scale parameters are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `s = exp(e)`; always positive.
    Exponential,
    /// `s` is the raw parameter and may change sign during training.
    Direct,
}

impl ScaleMode {
    pub fn scale<T: Scalar>(self, raw: T) -> T {
        match self {
            ScaleMode::Exponential => raw.exp(),
            ScaleMode::Direct => raw,
        }
    }

    /// Raw parameter value that yields scale `s`.
    pub fn raw<T: Scalar>(self, s: T) -> T {
        match self {
            ScaleMode::Exponential => s.ln(),
            ScaleMode::Direct => s,
        }
    }

    /// `ds / draw`.
    fn jacobian<T: Scalar>(self, raw: T) -> T {
        match self {
            ScaleMode::Exponential => raw.exp(),
            ScaleMode::Direct => T::one(),
        }
    }
}

/// Per-layer scale parameters `(e_w, e_f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams<T> {
    pub mode: ScaleMode,
    pub e_w: T,
    pub e_f: T,
}

impl<T: Scalar> ScaleParams<T> {
    pub fn s_w(&self) -> T {
        self.mode.scale(self.e_w)
    }

    pub fn s_f(&self) -> T {
        self.mode.scale(self.e_f)
    }
}

fn std_dev<T: Scalar>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    (values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Scale initialization from the layer's weights and the features it sees in
/// the first iteration: `s = 3 * sigma`. A zero deviation falls back to `s = 1`.
pub fn init_scales<T: Scalar>(weights: &[T], features: &[T], mode: ScaleMode) -> ScaleParams<T> {
    let pick = |sigma: f64, what: &str| -> T {
        if sigma > 0.0 && sigma.is_finite() {
            mode.raw(T::from_f64_lossy(3.0 * sigma))
        } else {
            warn!("{what} standard deviation is {sigma}; initializing its scale to 1");
            mode.raw(T::one())
        }
    };
    ScaleParams { mode, e_w: pick(std_dev(weights), "weight"), e_f: pick(std_dev(features), "feature") }
}

/// Response of `r` to an index change under straight-through estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteRule {
    /// `d r / d idx = 1` on both axes.
    Literal,
    /// Each sub-table read is treated as the identity of its (normalized)
    /// index, so `d r / d idx_w = T_f[idx_f]` and `d r / d idx_f = T_w[idx_w]`.
    SubTableIdentity,
}

/// Static configuration of one lookup-layer invocation.
#[derive(Debug, Clone, Copy)]
pub struct LookupConfig {
    pub geom: Geometry,
    pub scale_mode: ScaleMode,
    pub ste: SteRule,
    pub rescale: bool,
}

/// Forward results kept for diagnostics.
#[derive(Debug, Clone)]
pub struct LookupForward<T> {
    pub output: Tensor<T>,
    pub weight_indices: Vec<u16>,
}

fn resolve<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, geom: Geometry) -> Result<ConvShape> {
    let s = ConvShape::resolve(x.shape(), w.shape(), geom)?;
    if b.shape() != [s.out_channels] {
        return Err(Error::Shape(format!(
            "bias length {:?} does not match {} output channels",
            b.shape(),
            s.out_channels
        )));
    }
    Ok(s)
}

/// Lookup-layer forward pass.
pub fn lookup_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    s_w: T,
    s_f: T,
    table: &LookupTable<T>,
    geom: Geometry,
) -> Result<LookupForward<T>> {
    let s = resolve(x, w, b, geom)?;
    x.check_finite("lookup input")?;
    w.check_finite("lookup weights")?;
    let (n_f, n_w) = (table.n_f(), table.n_w());
    let k = s_w * s_f;
    let scaled: Vec<T> = table.materialize().into_iter().map(|t| k * t).collect();
    let idx_w: Vec<u16> = w.data().iter().map(|&v| weight_index(v, s_w, n_w) as u16).collect();
    let idx_f: Vec<u16> = x.data().iter().map(|&v| feature_index(v, s_f, n_f) as u16).collect();

    let (p, ck) = (s.positions(), s.patch_len());
    let mut cols = vec![0u16; p * ck];
    let mut out = vec![T::zero(); s.batch * s.out_channels * p];
    for n in 0..s.batch {
        im2col(&idx_f[n * s.in_plane()..][..s.in_plane()], &s, 0, &mut cols);
        for kc in 0..s.out_channels {
            let wrow = &idx_w[kc * ck..][..ck];
            let bias = b.data()[kc];
            let dst = &mut out[(n * s.out_channels + kc) * p..][..p];
            for (pos, o) in dst.iter_mut().enumerate() {
                let frow = &cols[pos * ck..][..ck];
                let mut acc = T::zero();
                for (&fi, &wj) in frow.iter().zip(wrow) {
                    acc += scaled[fi as usize * n_w + wj as usize];
                }
                *o = acc + bias;
            }
        }
    }
    Ok(LookupForward {
        output: Tensor::new(s.output_shape().to_vec(), out)?,
        weight_indices: idx_w,
    })
}

/// Gradients of one lookup-layer call.
#[derive(Debug, Clone)]
pub struct LookupGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// `dL/ds_w`, `dL/ds_f`.
    pub s_w: T,
    pub s_f: T,
    /// Gradients on the raw scale parameters (chained through the scale mode).
    pub e_w: T,
    pub e_f: T,
    /// Gradients on sub-table entries, re-scaled when enabled.
    pub feature_cells: Vec<T>,
    pub weight_cells: Vec<T>,
    /// Cell gradients before re-scaling.
    pub raw_feature_cells: Vec<T>,
    pub raw_weight_cells: Vec<T>,
    pub counts: CellCounts,
}

/// Lookup-layer backward pass for upstream gradient `grad_out`.
#[allow(clippy::too_many_arguments)]
pub fn lookup_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    scales: ScaleParams<T>,
    table: &LookupTable<T>,
    cfg: LookupConfig,
    grad_out: &Tensor<T>,
) -> Result<LookupGrads<T>> {
    let s = resolve(x, w, b, cfg.geom)?;
    if grad_out.shape() != s.output_shape() {
        return Err(Error::Shape(format!(
            "lookup backward: upstream gradient {:?} vs output {:?}",
            grad_out.shape(),
            s.output_shape()
        )));
    }
    let (s_w, s_f) = (scales.s_w(), scales.s_f());
    let (n_f, n_w) = (table.n_f(), table.n_w());
    let (p, ck, co) = (s.positions(), s.patch_len(), s.out_channels);
    let k = s_w * s_f;
    let literal = cfg.ste == SteRule::Literal;

    let idx_w: Vec<u16> = w.data().iter().map(|&v| weight_index(v, s_w, n_w) as u16).collect();
    let idx_f: Vec<u16> = x.data().iter().map(|&v| feature_index(v, s_f, n_f) as u16).collect();
    let w_vals: Vec<T> = idx_w.iter().map(|&j| table.weight[j as usize]).collect();

    let mut counts = CellCounts::new(n_f, n_w);
    let mut g_tf = vec![T::zero(); n_f];
    let mut d_input = vec![T::zero(); x.len()];
    let mut h = vec![T::zero(); co * ck];
    let mut h_literal = vec![T::zero(); co];
    let mut d_bias = vec![T::zero(); co];
    let mut ds_f_idx = T::zero();

    let mut cols_idx = vec![0u16; p * ck];
    let mut cols_val = vec![T::zero(); p * ck];
    let mut cols_in = vec![T::zero(); p * ck];
    let mut gmat = vec![T::zero(); p * ck];
    let mut dcols = vec![T::zero(); p * ck];
    let nan = T::nan();
    for n in 0..s.batch {
        let delta = &grad_out.data()[n * co * p..][..co * p];
        im2col(&idx_f[n * s.in_plane()..][..s.in_plane()], &s, 0, &mut cols_idx);
        // NaN marks taps that fall in the padding.
        im2col(&x.data()[n * s.in_plane()..][..s.in_plane()], &s, nan, &mut cols_in);
        for (v, &i) in cols_val.iter_mut().zip(&cols_idx) {
            *v = table.feature[i as usize];
        }
        // G = delta^T W_vals: sum_K delta * T_w[idx_w]   (P x CK)
        matmul_into(p, co, ck, delta, Trans::Yes, &w_vals, Trans::No, T::zero(), &mut gmat);
        // H += delta F_vals: sum_p delta * T_f[idx_f]    (C_out x CK)
        matmul_into(co, p, ck, delta, Trans::No, &cols_val, Trans::No, T::one(), &mut h);
        let mut row_sum = vec![T::zero(); p];
        for kc in 0..co {
            let d = &delta[kc * p..][..p];
            let tot: T = d.iter().copied().sum();
            d_bias[kc] += tot;
            h_literal[kc] += tot;
            for (acc, &v) in row_sum.iter_mut().zip(d) {
                *acc += v;
            }
        }
        let cnt = co as u64;
        for pos in 0..p {
            for t in 0..ck {
                let e = pos * ck + t;
                let i = cols_idx[e] as usize;
                counts.feature[i] += cnt;
                g_tf[i] += k * gmat[e];
                let f = cols_in[e];
                let inside = !f.is_nan() && f >= T::zero() && f < s_f;
                let d_r = if literal { row_sum[pos] } else { gmat[e] };
                dcols[e] = if inside { k * d_r / s_f } else { T::zero() };
                if inside {
                    ds_f_idx += k * d_r * (-f / (s_f * s_f));
                }
            }
        }
        col2im(&dcols, &s, &mut d_input[n * s.in_plane()..][..s.in_plane()]);
    }

    let mut g_tw = vec![T::zero(); n_w];
    let mut d_weight = vec![T::zero(); w.len()];
    let mut ds_w_idx = T::zero();
    let mut response = T::zero();
    let hits = (s.batch * p) as u64;
    for kc in 0..co {
        for t in 0..ck {
            let e = kc * ck + t;
            let j = idx_w[e] as usize;
            counts.weight[j] += hits;
            g_tw[j] += k * h[e];
            response += h[e] * w_vals[e];
            let wv = w.data()[e];
            let inside = wv.abs() < s_w;
            let d_r = if literal { h_literal[kc] } else { h[e] };
            if inside {
                d_weight[e] = k * d_r / s_w;
                ds_w_idx += k * d_r * (-wv / (s_w * s_w));
            }
        }
    }
    // d(s_w s_f r)/ds_w = s_f r and d/ds_f = s_w r.
    let ds_w = ds_w_idx + s_f * response;
    let ds_f = ds_f_idx + s_w * response;

    let raw_feature_cells = g_tf.clone();
    let raw_weight_cells = g_tw.clone();
    if cfg.rescale {
        rescale_gradients(&mut g_tf, &counts.feature);
        rescale_gradients(&mut g_tw, &counts.weight);
    }
    Ok(LookupGrads {
        input: Tensor::new(x.shape().to_vec(), d_input)?,
        weight: Tensor::new(w.shape().to_vec(), d_weight)?,
        bias: Tensor::from_vec(d_bias),
        s_w: ds_w,
        s_f: ds_f,
        e_w: ds_w * scales.mode.jacobian(scales.e_w),
        e_f: ds_f * scales.mode.jacobian(scales.e_f),
        feature_cells: g_tf,
        weight_cells: g_tw,
        raw_feature_cells,
        raw_weight_cells,
        counts,
    })
}

/// Graph op wrapping the lookup layer. Inputs, in order:
/// `x, w, b, e_w, e_f, T_f, T_w` (scales as one-element tensors).
pub struct LookupOp {
    pub cfg: LookupConfig,
}

impl<T: Scalar> CustomOp<T> for LookupOp {
    fn name(&self) -> &str {
        "lookup_conv"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let scales = ScaleParams { mode: self.cfg.scale_mode, e_w: inputs[3].item(), e_f: inputs[4].item() };
        let table = LookupTable::new(inputs[5].data().to_vec(), inputs[6].data().to_vec())?;
        let gr = lookup_conv_backward(inputs[0], inputs[1], inputs[2], scales, &table, self.cfg, g)?;
        Ok(vec![
            Some(gr.input),
            Some(gr.weight),
            Some(gr.bias),
            Some(Tensor::from_vec(vec![gr.e_w])),
            Some(Tensor::from_vec(vec![gr.e_f])),
            Some(Tensor::from_vec(gr.feature_cells)),
            Some(Tensor::from_vec(gr.weight_cells)),
        ])
    }
}

/// Graph variables feeding one lookup layer.
#[derive(Debug, Clone, Copy)]
pub struct LookupVars {
    pub weight: Var,
    pub bias: Var,
    pub e_w: Var,
    pub e_f: Var,
    pub t_f: Var,
    pub t_w: Var,
}

/// Records a lookup layer on `g`.
pub fn lookup_conv<T: Scalar>(g: &mut Graph<T>, x: Var, v: LookupVars, cfg: LookupConfig) -> Result<Var> {
    let scales = ScaleParams { mode: cfg.scale_mode, e_w: g.value(v.e_w).item(), e_f: g.value(v.e_f).item() };
    let table = LookupTable::new(g.value(v.t_f).data().to_vec(), g.value(v.t_w).data().to_vec())?;
    let fwd = lookup_conv_forward(
        g.value(x),
        g.value(v.weight),
        g.value(v.bias),
        scales.s_w(),
        scales.s_f(),
        &table,
        cfg.geom,
    )?;
    g.custom(Box::new(LookupOp { cfg }), &[x, v.weight, v.bias, v.e_w, v.e_f, v.t_f, v.t_w], fwd.output)
}

/// Quantize-dequantize of non-negative activations,
/// `s * round(clip(x / s, 0, 1) * (N - 1)) / (N - 1)`, with a straight-through
/// gradient inside `[0, s)`. The scale is treated as a constant.
pub struct FeatureQuantizeOp<T> {
    pub scale: T,
}

impl<T: Scalar> FeatureQuantizeOp<T> {
    pub fn apply(scale: T, levels: usize, x: &Tensor<T>) -> Tensor<T> {
        let step = scale / T::from_usize(levels - 1).unwrap();
        x.map(|v| T::from_usize(feature_index(v, scale, levels)).unwrap() * step)
    }
}

impl<T: Scalar> CustomOp<T> for FeatureQuantizeOp<T> {
    fn name(&self) -> &str {
        "feature_quantize"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.scale;
        Ok(vec![Some(g.zip_map(inputs[0], |d, x| if x >= T::zero() && x < s { d } else { T::zero() })?)])
    }
}
