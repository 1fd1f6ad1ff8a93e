//! Conversion of a trained lookup network into its multiplication-free
//! inference form.
//!
//! Three fusions are applied to every lookup layer:
//!
//! * the re-scaling step is folded into the table (`s_w * s_f * T`),
//! * the following batch norm is folded into a per-output-channel table and
//!   bias (`gamma_K / sigma_K` times the table, `beta_K + gamma_K (b_K - mu_K) / sigma_K`),
//! * the next lookup layer's scaling step is folded in by multiplying by
//!   `(N_f - 1) / s_f`, replacing the ReLU with clip-to-`[0, N_f - 1]` and round.
//!
//! Weights become stored table indices. Between converted layers activations
//! are integers, so the converted segment performs only lookups, additions,
//! comparisons and rounding. The full-precision stem and classifier are kept;
//! an explicit scaling step quantizes the stem output and, where needed, a
//! dequantization step feeds the classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{shortcut_pad, Graph};
use crate::conv::{im2col, ConvShape, Geometry};
use crate::error::{Error, Result};
use crate::lookup::{feature_index, weight_index};
use crate::nn::{lookup_consumer, Layer, LookupLayer, Network, BN_EPS};
use crate::tensor::{Scalar, Tensor};

/// What a converted lookup layer does with its accumulated sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    /// Real-valued output.
    None,
    /// Clip to `[0, max]` and round, producing table indices for the consumer.
    ClipRound { max: usize },
}

/// A lookup layer at some stage of fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLookup<T> {
    pub name: String,
    pub geom: Geometry,
    /// `[C_out, C_in, k, k]`.
    pub weight_shape: [usize; 4],
    pub weight_idx: Vec<u8>,
    pub n_f: usize,
    pub n_w: usize,
    /// One row-major `N_f x N_w` table, or one per output channel when `per_channel`.
    pub tables: Vec<T>,
    pub per_channel: bool,
    pub bias: Vec<T>,
    /// Feature scale while the scaling step is still explicit; `None` once the
    /// input arrives as indices.
    pub input_scale: Option<T>,
    pub activation: Activation,
}

/// Operation counts gathered by the instrumented interpreter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub lookups: u64,
    /// Accumulation of looked-up responses (one per receptive-field tap).
    pub accumulate_adds: u64,
    pub bias_adds: u64,
    pub residual_adds: u64,
    pub muls: u64,
    pub other_adds: u64,
    pub clip_rounds: u64,
    pub compares: u64,
}

impl OpCounts {
    pub fn merge(&mut self, o: &OpCounts) {
        self.lookups += o.lookups;
        self.accumulate_adds += o.accumulate_adds;
        self.bias_adds += o.bias_adds;
        self.residual_adds += o.residual_adds;
        self.muls += o.muls;
        self.other_adds += o.other_adds;
        self.clip_rounds += o.clip_rounds;
        self.compares += o.compares;
    }
}

/// Counts split between the converted segment and the full-precision boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpAudit {
    pub segment: OpCounts,
    pub boundary: OpCounts,
}

impl<T: Scalar> FusedLookup<T> {
    fn table(&self, k: usize) -> &[T] {
        let len = self.n_f * self.n_w;
        if self.per_channel {
            &self.tables[k * len..][..len]
        } else {
            &self.tables[..len]
        }
    }

    fn shape(&self, input: &[usize]) -> Result<ConvShape> {
        let [co, ci, kh, kw] = self.weight_shape;
        let s = ConvShape::resolve(input, &[co, ci, kh, kw], self.geom)?;
        Ok(s)
    }

    /// Forward pass with the explicit scaling step on real-valued input.
    pub fn forward_float(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s_f = self
            .input_scale
            .ok_or_else(|| Error::InvalidArgument(format!("{}: layer reads indices, not features", self.name)))?;
        x.check_finite("lookup input")?;
        let idx: Vec<u8> = x.data().iter().map(|&v| feature_index(v, s_f, self.n_f) as u8).collect();
        let s = self.shape(x.shape())?;
        let mut c = OpCounts::default();
        Tensor::new(s.output_shape().to_vec(), self.accumulate(&idx, &s, &mut c))
    }

    /// Forward pass on index input; the output is either real sums or indices
    /// (stored as integral reals) according to the activation.
    pub fn forward_index(&self, idx: &[u8], input_shape: &[usize], counts: &mut OpCounts) -> Result<(Vec<T>, [usize; 4])> {
        if idx.iter().any(|&i| i as usize >= self.n_f) {
            return Err(Error::InvalidArgument(format!("{}: feature index outside the table", self.name)));
        }
        let s = self.shape(input_shape)?;
        Ok((self.accumulate(idx, &s, counts), s.output_shape()))
    }

    fn accumulate(&self, idx: &[u8], s: &ConvShape, counts: &mut OpCounts) -> Vec<T> {
        let (p, ck, co) = (s.positions(), s.patch_len(), s.out_channels);
        let mut cols = vec![0u8; p * ck];
        let mut out = vec![T::zero(); s.batch * co * p];
        for n in 0..s.batch {
            im2col(&idx[n * s.in_plane()..][..s.in_plane()], s, 0, &mut cols);
            for kc in 0..co {
                let table = self.table(kc);
                let wrow = &self.weight_idx[kc * ck..][..ck];
                let bias = self.bias[kc];
                let dst = &mut out[(n * co + kc) * p..][..p];
                for (pos, o) in dst.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (&fi, &wj) in cols[pos * ck..][..ck].iter().zip(wrow) {
                        acc += table[fi as usize * self.n_w + wj as usize];
                    }
                    *o = match self.activation {
                        Activation::None => acc + bias,
                        Activation::ClipRound { max } => clip_round(acc + bias, max),
                    };
                }
            }
        }
        let taps = (s.batch * co * p * ck) as u64;
        let outs = (s.batch * co * p) as u64;
        counts.lookups += taps;
        counts.accumulate_adds += taps;
        counts.bias_adds += outs;
        if matches!(self.activation, Activation::ClipRound { .. }) {
            counts.clip_rounds += outs;
        }
        out
    }

    /// Bytes of the table(s) at `bytes_per_entry`.
    pub fn table_bytes(&self, bytes_per_entry: usize) -> usize {
        self.tables.len() * bytes_per_entry
    }
}

#[inline]
fn clip_round<T: Scalar>(v: T, max: usize) -> T {
    v.max(T::zero()).min(T::from_usize(max).unwrap()).round()
}

/// Folds the re-scaling step: stores weight indices and the table
/// `(s_w * s_f) * (T_f[i] * T_w[j])`. The feature scaling step stays explicit.
pub fn fuse_rescale<T: Scalar>(net: &Network<T>, layer: &LookupLayer) -> Result<FusedLookup<T>> {
    let (s_w, s_f) = net.scales(layer);
    if !(s_w > T::zero() && s_f > T::zero()) {
        return Err(Error::Conversion { layer: layer.name.clone(), reason: format!("non-positive scales ({s_w}, {s_f})") });
    }
    let table = net.table(layer)?;
    let (n_f, n_w) = (table.n_f(), table.n_w());
    if n_f > 256 || n_w > 256 {
        return Err(Error::Conversion { layer: layer.name.clone(), reason: "granularity above 256".into() });
    }
    let w = &net.params[layer.weight].value;
    let shape: [usize; 4] = w
        .shape()
        .try_into()
        .map_err(|_| Error::Conversion { layer: layer.name.clone(), reason: "weights are not 4-D".into() })?;
    let k = s_w * s_f;
    Ok(FusedLookup {
        name: layer.name.clone(),
        geom: layer.geom,
        weight_shape: shape,
        weight_idx: w.data().iter().map(|&v| weight_index(v, s_w, n_w) as u8).collect(),
        n_f,
        n_w,
        tables: table.materialize().into_iter().map(|t| k * t).collect(),
        per_channel: false,
        bias: net.params[layer.bias].value.data().to_vec(),
        input_scale: Some(s_f),
        activation: Activation::None,
    })
}

/// Folds an eval-mode batch norm into per-output-channel tables and biases.
pub fn fuse_batchnorm<T: Scalar>(
    layer: FusedLookup<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<FusedLookup<T>> {
    let co = layer.weight_shape[0];
    if [gamma.len(), beta.len(), mean.len(), var.len()].iter().any(|&l| l != co) {
        return Err(Error::Conversion { layer: layer.name.clone(), reason: format!("batch norm does not have {co} channels") });
    }
    if layer.activation != Activation::None {
        return Err(Error::Conversion { layer: layer.name.clone(), reason: "batch norm after the activation was fused".into() });
    }
    let len = layer.n_f * layer.n_w;
    let mut tables = Vec::with_capacity(co * len);
    let mut bias = Vec::with_capacity(co);
    for k in 0..co {
        let d = var[k] + eps;
        if !(d > T::zero()) {
            return Err(Error::BatchNorm(format!("{} channel {k}: sigma^2 + eps = {d} is not positive", layer.name)));
        }
        let a = gamma[k] * (T::one() / d.sqrt());
        tables.extend(layer.table(k).iter().map(|&t| a * t));
        bias.push(beta[k] + a * (layer.bias[k] - mean[k]));
    }
    Ok(FusedLookup { tables, bias, per_channel: true, ..layer })
}

/// Folds the consumer's scaling step: multiplies tables and bias by
/// `(N_f - 1) / s_f` and makes the layer emit clipped, rounded indices.
pub fn fuse_scaling<T: Scalar>(layer: FusedLookup<T>, consumer_s_f: T, consumer_n_f: usize) -> Result<FusedLookup<T>> {
    if !(consumer_s_f > T::zero()) || consumer_n_f < 2 || consumer_n_f > 256 {
        return Err(Error::Conversion {
            layer: layer.name.clone(),
            reason: format!("consumer scale {consumer_s_f} / granularity {consumer_n_f} cannot be fused"),
        });
    }
    let m = T::from_usize(consumer_n_f - 1).unwrap() / consumer_s_f;
    Ok(FusedLookup {
        tables: layer.tables.iter().map(|&t| m * t).collect(),
        bias: layer.bias.iter().map(|&b| m * b).collect(),
        activation: Activation::ClipRound { max: consumer_n_f - 1 },
        ..layer
    })
}

/// One step of a converted network.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage<T> {
    Conv { weight: Tensor<T>, bias: Option<Tensor<T>>, geom: Geometry },
    BatchNorm { gamma: Vec<T>, beta: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    /// Scaling step: real features to indices.
    Quantize { scale: T, levels: usize },
    /// Indices back to reals, `q * scale / (levels - 1)`.
    Dequantize { scale: T, levels: usize },
    Lookup(FusedLookup<T>),
    /// Index-domain residual block: `clip_round(body(q) + shortcut(q))`.
    Residual { body: Vec<Stage<T>>, stride: usize, out_channels: usize, max: usize },
}

impl<T> Stage<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Conv { .. } => "conv",
            Stage::BatchNorm { .. } => "batch-norm",
            Stage::Relu => "relu",
            Stage::MaxPool { .. } => "max-pool",
            Stage::GlobalAvgPool => "global-avg-pool",
            Stage::Flatten => "flatten",
            Stage::Linear { .. } => "linear",
            Stage::Quantize { .. } => "quantize",
            Stage::Dequantize { .. } => "dequantize",
            Stage::Lookup(_) => "lookup",
            Stage::Residual { .. } => "residual",
        }
    }
}

/// A converted, multiplication-free network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedNetwork<T> {
    pub arch: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub stages: Vec<Stage<T>>,
}

/// Per-layer entry of a [`ConversionReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub out_channels: usize,
    /// Bytes of the single per-layer table at 4 bytes per entry.
    pub table_bytes: usize,
    /// Bytes of the per-output-channel tables after batch-norm fusion.
    pub fused_table_bytes: usize,
    pub index_bytes: usize,
    pub scaling_fused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub layers: Vec<LayerReport>,
    pub notices: Vec<String>,
}

impl ConversionReport {
    pub fn table_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.table_bytes).sum()
    }

    pub fn fused_table_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.fused_table_bytes).sum()
    }
}

/// A network in either form; conversion is only defined on trained networks.
#[derive(Debug, Clone)]
pub enum Model<T> {
    Trained(Network<T>),
    Converted(ConvertedNetwork<T>),
}

/// Converts a model, refusing one that is already converted.
pub fn convert_model<T: Scalar>(model: &Model<T>) -> Result<(ConvertedNetwork<T>, ConversionReport)> {
    match model {
        Model::Trained(net) => convert_network(net),
        Model::Converted(c) => Err(Error::Conversion { layer: c.arch.clone(), reason: "network is already converted".into() }),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Domain<T> {
    Real,
    Index { scale: T, levels: usize },
}

struct Converter<'n, T: Scalar> {
    net: &'n Network<T>,
    report: ConversionReport,
    levels: usize,
    index_domain: bool,
}

impl<T: Scalar> Converter<'_, T> {
    fn bn_params(&self, layer: &Layer) -> Option<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> {
        match layer {
            Layer::BatchNorm { slot, gamma, beta } => Some((
                self.net.params[*gamma].value.data().to_vec(),
                self.net.params[*beta].value.data().to_vec(),
                self.net.bn[*slot].mean.clone(),
                self.net.bn[*slot].var.clone(),
            )),
            _ => None,
        }
    }

    fn s_f(&self, l: &LookupLayer) -> T {
        self.net.scales(l).1
    }

    /// Rescale + batch-norm fusion of `layers[i]` (a lookup layer), consuming
    /// a directly following batch norm. Returns the fused layer and the index
    /// of the last layer consumed.
    fn fuse_lookup(&mut self, layers: &[Layer], i: usize) -> Result<(FusedLookup<T>, usize)> {
        let Layer::Lookup(l) = &layers[i] else { unreachable!() };
        let mut f = fuse_rescale(self.net, l)?;
        let mut end = i;
        if let Some((g, b, m, v)) = layers.get(i + 1).and_then(|x| self.bn_params(x)) {
            f = fuse_batchnorm(f, &g, &b, &m, &v, T::from_f64_lossy(BN_EPS))?;
            end = i + 1;
        }
        let per_layer = self.net.table(l)?;
        self.report.layers.push(LayerReport {
            name: l.name.clone(),
            out_channels: f.weight_shape[0],
            table_bytes: per_layer.n_f() * per_layer.n_w() * 4,
            fused_table_bytes: f.weight_shape[0] * f.n_f * f.n_w * 4,
            index_bytes: f.weight_idx.len(),
            scaling_fused: false,
        });
        Ok((f, end))
    }

    fn mark_scaling_fused(&mut self) {
        if let Some(r) = self.report.layers.last_mut() {
            r.scaling_fused = true;
        }
    }

    fn enter_index(&self, out: &mut Vec<Stage<T>>, domain: &mut Domain<T>, want: T) -> Result<()> {
        match *domain {
            Domain::Real => {
                out.push(Stage::Quantize { scale: want, levels: self.levels });
                *domain = Domain::Index { scale: want, levels: self.levels };
                Ok(())
            }
            Domain::Index { scale, .. } if scale == want => Ok(()),
            Domain::Index { scale, .. } => Err(Error::Conversion {
                layer: "index domain".into(),
                reason: format!("activations indexed at scale {scale}, consumer expects {want}"),
            }),
        }
    }

    fn leave_index(out: &mut Vec<Stage<T>>, domain: &mut Domain<T>) {
        if let Domain::Index { scale, levels } = *domain {
            out.push(Stage::Dequantize { scale, levels });
            *domain = Domain::Real;
        }
    }

    fn convert(&mut self, layers: &[Layer]) -> Result<Vec<Stage<T>>> {
        let mut out = Vec::new();
        let mut domain = Domain::Real;
        let mut i = 0;
        while i < layers.len() {
            match &layers[i] {
                Layer::Lookup(l) => {
                    let s_in = self.s_f(l);
                    self.enter_index(&mut out, &mut domain, s_in)?;
                    let (mut f, end) = self.fuse_lookup(layers, i)?;
                    f.input_scale = None;
                    i = end;
                    match lookup_consumer(layers, i) {
                        Some(next) => {
                            let s_next = self.s_f(next);
                            f = fuse_scaling(f, s_next, self.levels)?;
                            self.mark_scaling_fused();
                            domain = Domain::Index { scale: s_next, levels: self.levels };
                            if matches!(layers.get(i + 1), Some(Layer::Relu)) {
                                i += 1;
                            }
                        }
                        None => {
                            self.report.notices.push(format!(
                                "{}: output feeds a full-precision layer, scaling step kept",
                                l.name
                            ));
                            domain = Domain::Real;
                        }
                    }
                    out.push(Stage::Lookup(f));
                }
                Layer::Residual(block) => {
                    let name = format!("layers.{i}");
                    let body = &block.body;
                    let shape_ok = body.len() == 5
                        && matches!(body[0], Layer::Lookup(_))
                        && matches!(body[1], Layer::BatchNorm { .. })
                        && matches!(body[2], Layer::Relu)
                        && matches!(body[3], Layer::Lookup(_))
                        && matches!(body[4], Layer::BatchNorm { .. });
                    if !shape_ok {
                        return Err(Error::Conversion {
                            layer: name,
                            reason: "residual body must be lookup, batch norm, relu, lookup, batch norm".into(),
                        });
                    }
                    let (Layer::Lookup(l1), Layer::Lookup(l2)) = (&body[0], &body[3]) else { unreachable!() };
                    let s_l = self.s_f(l1);
                    let s_out = lookup_consumer(layers, i).map_or(s_l, |n| self.s_f(n));
                    let ratio = s_out / s_l;
                    if !self.index_domain && (ratio - T::one()).abs() > T::from_f64_lossy(1e-6) {
                        return Err(Error::Conversion {
                            layer: name,
                            reason: format!(
                                "skip path needs scale factor {ratio} but the network was not trained with index-domain residuals"
                            ),
                        });
                    }
                    self.enter_index(&mut out, &mut domain, s_l)?;
                    let (mut f1, _) = self.fuse_lookup(body, 0)?;
                    f1.input_scale = None;
                    let f1 = fuse_scaling(f1, self.s_f(l2), self.levels)?;
                    self.mark_scaling_fused();
                    let (mut f2, _) = self.fuse_lookup(body, 3)?;
                    f2.input_scale = None;
                    let f2 = fuse_scaling(f2, s_out, self.levels)?;
                    // The clip and round happen after the skip addition.
                    let f2 = FusedLookup { activation: Activation::None, ..f2 };
                    self.mark_scaling_fused();
                    out.push(Stage::Residual {
                        body: vec![Stage::Lookup(f1), Stage::Lookup(f2)],
                        stride: block.stride,
                        out_channels: block.out_channels,
                        max: self.levels - 1,
                    });
                    domain = Domain::Index { scale: s_out, levels: self.levels };
                }
                Layer::MaxPool { size } => out.push(Stage::MaxPool { size: *size }),
                Layer::Relu => {
                    if matches!(domain, Domain::Real) {
                        out.push(Stage::Relu);
                    }
                }
                Layer::Conv { weight, bias, geom } => {
                    Self::leave_index(&mut out, &mut domain);
                    out.push(Stage::Conv {
                        weight: self.net.params[*weight].value.clone(),
                        bias: bias.map(|b| self.net.params[b].value.clone()),
                        geom: *geom,
                    });
                }
                Layer::BatchNorm { .. } => {
                    Self::leave_index(&mut out, &mut domain);
                    let (gamma, beta, mean, var) = self.bn_params(&layers[i]).unwrap();
                    out.push(Stage::BatchNorm { gamma, beta, mean, var });
                }
                Layer::GlobalAvgPool => {
                    Self::leave_index(&mut out, &mut domain);
                    out.push(Stage::GlobalAvgPool);
                }
                Layer::Flatten => {
                    Self::leave_index(&mut out, &mut domain);
                    out.push(Stage::Flatten);
                }
                Layer::Linear { weight, bias } => {
                    Self::leave_index(&mut out, &mut domain);
                    out.push(Stage::Linear {
                        weight: self.net.params[*weight].value.clone(),
                        bias: self.net.params[*bias].value.clone(),
                    });
                }
            }
            i += 1;
        }
        Self::leave_index(&mut out, &mut domain);
        Ok(out)
    }
}

/// Applies the three fusions across the network.
pub fn convert_network<T: Scalar>(net: &Network<T>) -> Result<(ConvertedNetwork<T>, ConversionReport)> {
    let settings = net.settings().ok_or_else(|| Error::Conversion {
        layer: net.spec.name.clone(),
        reason: "network has no lookup layers".into(),
    })?;
    if settings.n_f != settings.n_w && settings.n_f > 256 {
        return Err(Error::Conversion { layer: net.spec.name.clone(), reason: "granularity above 256".into() });
    }
    let mut c = Converter {
        net,
        report: ConversionReport { layers: Vec::new(), notices: Vec::new() },
        levels: settings.n_f,
        index_domain: settings.index_domain_residual,
    };
    let stages = c.convert(&net.layers)?;
    if c.report.layers.is_empty() {
        return Err(Error::Conversion { layer: net.spec.name.clone(), reason: "network has no lookup layers".into() });
    }
    Ok((
        ConvertedNetwork { arch: net.spec.name.clone(), input: net.spec.input, classes: net.spec.classes, stages },
        c.report,
    ))
}

enum Value<T> {
    Real(Tensor<T>),
    Index { shape: Vec<usize>, data: Vec<u8> },
}

fn expect_index<T>(v: Value<T>, stage: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    match v {
        Value::Index { shape, data } => Ok((shape, data)),
        Value::Real(_) => Err(Error::Graph(format!("{stage} expects index input"))),
    }
}

fn expect_real<T>(v: Value<T>, stage: &str) -> Result<Tensor<T>> {
    match v {
        Value::Real(t) => Ok(t),
        Value::Index { .. } => Err(Error::Graph(format!("{stage} expects real input"))),
    }
}

fn to_index<T: Scalar>(vals: &[T]) -> Vec<u8> {
    vals.iter().map(|v| v.to_u8().unwrap_or(0)).collect()
}

fn max_pool_index(shape: &[usize], data: &[u8], k: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    if shape.len() != 4 || k == 0 || shape[2] % k != 0 || shape[3] % k != 0 {
        return Err(Error::Shape(format!("max_pool({k}) needs NCHW divisible by k, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = 0u8;
                for dy in 0..k {
                    for dx in 0..k {
                        best = best.max(data[base + (y * k + dy) * w + x * k + dx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out))
}

fn shortcut_index(shape: &[usize], data: &[u8], stride: usize, out_channels: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if out_channels < c || stride == 0 {
        return Err(Error::Shape(format!("shortcut: input {shape:?}, stride {stride}, {out_channels} channels")));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad = shortcut_pad(c, out_channels);
    let mut out = vec![0u8; n * out_channels * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[((b * out_channels + ch + pad) * oh + y) * ow + x] = data[((b * c + ch) * h + y * stride) * w + x * stride];
                }
            }
        }
    }
    Ok((vec![n, out_channels, oh, ow], out))
}

impl<T: Scalar> ConvertedNetwork<T> {
    /// Runs the converted network, returning the output and the operation audit.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, OpAudit)> {
        let mut audit = OpAudit::default();
        let v = self.run(&self.stages, Value::Real(x.clone()), &mut audit)?;
        Ok((expect_real(v, "network output")?, audit))
    }

    pub fn lookups(&self) -> Vec<&FusedLookup<T>> {
        fn collect<'a, T>(stages: &'a [Stage<T>], out: &mut Vec<&'a FusedLookup<T>>) {
            for s in stages {
                match s {
                    Stage::Lookup(f) => out.push(f),
                    Stage::Residual { body, .. } => collect(body, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(&self.stages, &mut out);
        out
    }

    fn run(&self, stages: &[Stage<T>], mut v: Value<T>, audit: &mut OpAudit) -> Result<Value<T>> {
        for stage in stages {
            v = self.step(stage, v, audit)?;
        }
        Ok(v)
    }

    fn real_op(x: Tensor<T>, f: impl FnOnce(&mut Graph<T>, crate::autodiff::Var) -> Result<crate::autodiff::Var>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let y = f(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    fn step(&self, stage: &Stage<T>, v: Value<T>, audit: &mut OpAudit) -> Result<Value<T>> {
        let name = stage.name();
        Ok(match stage {
            Stage::Conv { weight, bias, geom } => {
                let x = expect_real(v, name)?;
                let s = ConvShape::resolve(x.shape(), weight.shape(), *geom)?;
                let macs = s.macs() * s.batch as u64;
                audit.boundary.muls += macs;
                audit.boundary.other_adds += macs;
                let (w, b, geom) = (weight.clone(), bias.clone(), *geom);
                Value::Real(Self::real_op(x, |g, xv| {
                    let wv = g.constant(w)?;
                    let bv = b.map(|b| g.constant(b)).transpose()?;
                    g.conv2d(xv, wv, bv, geom)
                })?)
            }
            Stage::BatchNorm { gamma, beta, mean, var } => {
                let x = expect_real(v, name)?;
                audit.boundary.muls += 2 * x.len() as u64;
                audit.boundary.other_adds += 2 * x.len() as u64;
                Value::Real(Self::real_op(x, |g, xv| {
                    let gm = g.constant(Tensor::from_vec(gamma.clone()))?;
                    let bt = g.constant(Tensor::from_vec(beta.clone()))?;
                    let mode = crate::autodiff::BnMode::Eval { mean, var };
                    Ok(g.batch_norm(xv, gm, bt, mode, T::from_f64_lossy(BN_EPS))?.0)
                })?)
            }
            Stage::Relu => {
                let x = expect_real(v, name)?;
                audit.segment.compares += x.len() as u64;
                Value::Real(x.map(|a| if a > T::zero() { a } else { T::zero() }))
            }
            Stage::MaxPool { size } => match v {
                Value::Index { shape, data } => {
                    audit.segment.compares += data.len() as u64;
                    let (shape, data) = max_pool_index(&shape, &data, *size)?;
                    Value::Index { shape, data }
                }
                Value::Real(x) => {
                    audit.boundary.compares += x.len() as u64;
                    Value::Real(Self::real_op(x, |g, xv| g.max_pool(xv, *size))?)
                }
            },
            Stage::GlobalAvgPool => {
                let x = expect_real(v, name)?;
                audit.boundary.other_adds += x.len() as u64;
                audit.boundary.muls += (x.shape()[0] * x.shape()[1]) as u64;
                Value::Real(Self::real_op(x, |g, xv| g.global_avg_pool(xv))?)
            }
            Stage::Flatten => {
                let x = expect_real(v, name)?;
                Value::Real(Self::real_op(x, |g, xv| g.flatten(xv))?)
            }
            Stage::Linear { weight, bias } => {
                let x = expect_real(v, name)?;
                let macs = (x.shape()[0] * weight.len()) as u64;
                audit.boundary.muls += macs;
                audit.boundary.other_adds += macs;
                let (w, b) = (weight.clone(), bias.clone());
                Value::Real(Self::real_op(x, |g, xv| {
                    let wv = g.constant(w)?;
                    let bv = g.constant(b)?;
                    let xv = if g.value(xv).rank() == 2 { xv } else { g.flatten(xv)? };
                    g.linear(xv, wv, Some(bv))
                })?)
            }
            Stage::Quantize { scale, levels } => {
                let x = expect_real(v, name)?;
                x.check_finite("quantize input")?;
                audit.boundary.muls += 2 * x.len() as u64;
                audit.boundary.clip_rounds += x.len() as u64;
                let data = x.data().iter().map(|&a| feature_index(a, *scale, *levels) as u8).collect();
                Value::Index { shape: x.shape().to_vec(), data }
            }
            Stage::Dequantize { scale, levels } => {
                let (shape, data) = expect_index(v, name)?;
                audit.boundary.muls += data.len() as u64;
                let step = *scale / T::from_usize(levels - 1).unwrap();
                let vals = data.iter().map(|&q| T::from_u8(q).unwrap() * step).collect();
                Value::Real(Tensor::new(shape, vals)?)
            }
            Stage::Lookup(f) => {
                let (shape, data) = expect_index(v, name)?;
                let (out, oshape) = f.forward_index(&data, &shape, &mut audit.segment)?;
                match f.activation {
                    Activation::ClipRound { .. } => Value::Index { shape: oshape.to_vec(), data: to_index(&out) },
                    Activation::None => Value::Real(Tensor::new(oshape.to_vec(), out)?),
                }
            }
            Stage::Residual { body, stride, out_channels, max } => {
                let (shape, data) = expect_index(v, name)?;
                let (sshape, skip) = if *stride != 1 || shape[1] != *out_channels {
                    shortcut_index(&shape, &data, *stride, *out_channels)?
                } else {
                    (shape.clone(), data.clone())
                };
                let y = expect_real(self.run(body, Value::Index { shape, data }, audit)?, "residual body")?;
                if y.shape() != sshape.as_slice() {
                    return Err(Error::Shape(format!("residual: body {:?} vs shortcut {sshape:?}", y.shape())));
                }
                audit.segment.residual_adds += skip.len() as u64;
                audit.segment.clip_rounds += skip.len() as u64;
                let out = y.data().iter().zip(&skip).map(|(&a, &q)| clip_round(a + T::from_u8(q).unwrap(), *max));
                Value::Index { shape: sshape, data: to_index(&out.collect::<Vec<_>>()) }
            }
        })
    }
}

/// Maximum absolute output difference and prediction agreement between the
/// trained network (eval mode) and its converted form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub max_abs_diff: f64,
    pub argmax_agree: usize,
    pub samples: usize,
}

pub fn compare<T: Scalar>(net: &Network<T>, conv: &ConvertedNetwork<T>, inputs: &Tensor<T>) -> Result<Equivalence> {
    let a = net.predict(inputs)?;
    let (b, _) = conv.forward(inputs)?;
    let diff = a.max_abs_diff(&b)?.as_f64();
    let agree = a.argmax_rows()?.iter().zip(b.argmax_rows()?).filter(|(x, y)| **x == *y).count();
    Ok(Equivalence { max_abs_diff: diff, argmax_agree: agree, samples: a.shape()[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookup::lookup_conv_forward;
    use crate::nn::{ArchSpec, LookupSettings, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn warmed(spec: ArchSpec, seed: u64) -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::<f32>::new(spec, &mut rng).unwrap();
        for p in net.params.iter_mut() {
            if p.name.ends_with("logits") || p.name.ends_with("gamma") || p.name.ends_with("beta") {
                let noise = Tensor::<f32>::randn(p.value.shape(), 0.3, &mut rng);
                p.value.add_assign(&noise).unwrap();
            }
        }
        let [c, h, w] = net.spec.input;
        for _ in 0..3 {
            let x = Tensor::<f32>::rand_uniform(&[16, c, h, w], 0.0, 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let pass = net.forward(&mut g, xv, Mode::Train).unwrap();
            net.commit(pass.updates);
        }
        net
    }

    #[test]
    fn rescale_fusion_is_bit_identical() {
        let net = warmed(ArchSpec::small_cnn(4, 3, Some(LookupSettings::default())), 1);
        let l = net.lookup_layers()[0];
        let f = fuse_rescale(&net, l).unwrap();
        let (s_w, s_f) = net.scales(l);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::rand_uniform(&[2, 4, 6, 6], 0.0, 2.0, &mut rng);
        let table = net.table(l).unwrap();
        let reference = lookup_conv_forward(
            &x,
            &net.params[l.weight].value,
            &net.params[l.bias].value,
            s_w,
            s_f,
            &table,
            l.geom,
        )
        .unwrap();
        assert_eq!(f.forward_float(&x).unwrap(), reference.output);
        let bound = s_w * s_f;
        assert!(f.tables.iter().all(|t| t.abs() <= bound));
    }

    #[test]
    fn identity_batchnorm_leaves_layer_unchanged() {
        let net = warmed(ArchSpec::small_cnn(4, 3, Some(LookupSettings::default())), 3);
        let f = fuse_rescale(&net, net.lookup_layers()[0]).unwrap();
        let c = f.weight_shape[0];
        let fused = fuse_batchnorm(f.clone(), &vec![1.0; c], &vec![0.0; c], &vec![0.0; c], &vec![1.0; c], 0.0).unwrap();
        for k in 0..c {
            assert_eq!(fused.table(k), f.table(0));
        }
        assert_eq!(fused.bias, f.bias);
    }

    #[test]
    fn batchnorm_substitution_example() {
        let net = warmed(ArchSpec::small_cnn(4, 3, Some(LookupSettings::default())), 4);
        let f = fuse_rescale(&net, net.lookup_layers()[0]).unwrap();
        let c = f.weight_shape[0];
        let fused = fuse_batchnorm(f.clone(), &vec![2.0; c], &vec![0.0; c], &f.bias, &vec![1.0; c], 0.0).unwrap();
        assert!(fused.bias.iter().all(|&b| b == 0.0));
        for k in 0..c {
            assert!(fused.table(k).iter().zip(f.table(0)).all(|(a, b)| *a == 2.0 * b));
        }
        assert!(fuse_batchnorm(f, &vec![1.0; c], &vec![0.0; c], &vec![0.0; c], &vec![-1.0; c], 0.0).is_err());
    }

    #[test]
    fn scaling_factor_one_keeps_table() {
        let net = warmed(ArchSpec::small_cnn(4, 3, Some(LookupSettings::default())), 5);
        let f = fuse_rescale(&net, net.lookup_layers()[0]).unwrap();
        let g = fuse_scaling(f.clone(), 32.0, 33).unwrap();
        assert_eq!(g.tables, f.tables);
        assert_eq!(g.activation, Activation::ClipRound { max: 32 });
    }

    #[test]
    fn batchnorm_fusion_matches_unfused() {
        let net = warmed(ArchSpec::small_cnn(4, 3, Some(LookupSettings::default())), 6);
        let l = net.lookup_layers()[1];
        let f = fuse_rescale(&net, l).unwrap();
        let Layer::BatchNorm { slot, gamma, beta } = net.layers[8] else { panic!("layout") };
        let (g, b) = (net.params[gamma].value.data(), net.params[beta].value.data());
        let st = &net.bn[slot];
        let fused = fuse_batchnorm(f.clone(), g, b, &st.mean, &st.var, BN_EPS as f32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = Tensor::<f32>::rand_uniform(&[1, 4, 6, 6], 0.0, 2.0, &mut rng);
            let y = f.forward_float(&x).unwrap();
            let mut gr = Graph::new();
            let yv = gr.constant(y).unwrap();
            let gv = gr.constant(Tensor::from_vec(g.to_vec())).unwrap();
            let bv = gr.constant(Tensor::from_vec(b.to_vec())).unwrap();
            let mode = crate::autodiff::BnMode::Eval { mean: &st.mean, var: &st.var };
            let (z, _) = gr.batch_norm(yv, gv, bv, mode, BN_EPS as f32).unwrap();
            let d = gr.value(z).max_abs_diff(&fused.forward_float(&x).unwrap()).unwrap();
            assert!(d <= 1e-4, "diff {d}");
        }
    }

    #[test]
    fn converted_cnn_matches_and_has_no_multiplications() {
        let net = warmed(ArchSpec::small_cnn(4, 3, Some(LookupSettings::default())), 8);
        let (conv, report) = convert_network(&net).unwrap();
        assert_eq!(report.layers.len(), 3);
        assert!(report.layers[..2].iter().all(|l| l.scaling_fused));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::rand_uniform(&[8, 3, 32, 32], 0.0, 1.0, &mut rng);
        let eq = compare(&net, &conv, &x).unwrap();
        assert!(eq.max_abs_diff <= 1e-4, "{eq:?}");
        let (_, audit) = conv.forward(&x).unwrap();
        assert_eq!(audit.segment.muls, 0);
        let macs: u64 = net.spec.mac_layers().unwrap().iter().filter(|m| m.kind == crate::nn::MacKind::Lookup).map(|m| m.macs).sum();
        assert_eq!(audit.segment.lookups, 8 * macs);
        assert_eq!(audit.segment.accumulate_adds, 8 * macs);
    }

    #[test]
    fn double_conversion_is_rejected() {
        let net = warmed(ArchSpec::toy_mlp(2, 4, 2, Some(LookupSettings::default())), 10);
        let (conv, _) = convert_model(&Model::Trained(net)).unwrap();
        assert!(convert_model(&Model::Converted(conv)).is_err());
    }

    #[test]
    fn baseline_network_cannot_be_converted() {
        let net = warmed(ArchSpec::toy_mlp(2, 4, 2, None), 11);
        assert!(convert_network(&net).is_err());
    }

    #[test]
    fn residual_without_flag_is_refused_when_scales_differ() {
        let st = LookupSettings { index_domain_residual: false, ..LookupSettings::default() };
        let net = warmed(ArchSpec::toy_resnet([3, 8, 8], 4, 2, 3, Some(st)), 12);
        match convert_network(&net) {
            Err(Error::Conversion { reason, .. }) => assert!(reason.contains("index-domain"), "{reason}"),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn residual_without_flag_converts_when_scales_match() {
        let st = LookupSettings { index_domain_residual: false, ..LookupSettings::default() };
        let mut net = warmed(ArchSpec::toy_resnet([3, 8, 8], 4, 2, 3, Some(st)), 13);
        let e_f: Vec<usize> = net.lookup_layers().iter().map(|l| l.e_f).collect();
        for id in e_f {
            net.params[id].value = Tensor::from_vec(vec![0.5]);
        }
        assert!(convert_network(&net).is_ok());
    }

    #[test]
    fn residual_network_converts_with_zero_multiplications() {
        let net = warmed(ArchSpec::toy_resnet([3, 8, 8], 4, 2, 3, Some(LookupSettings::default())), 14);
        let (conv, _) = convert_network(&net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::<f32>::rand_uniform(&[10, 3, 8, 8], 0.0, 1.0, &mut rng);
        let (_, audit) = conv.forward(&x).unwrap();
        assert_eq!(audit.segment.muls, 0);
        assert!(audit.segment.residual_adds > 0);
        let net64 = net.cast::<f64>();
        let (conv64, _) = convert_network(&net64).unwrap();
        let eq = compare(&net64, &conv64, &x.cast()).unwrap();
        assert!(eq.max_abs_diff <= 1e-9, "{eq:?}");
    }
}
