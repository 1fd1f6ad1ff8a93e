//! Network description, parameters, and the training/evaluation forward pass.
//!
//! An [`ArchSpec`] is a serializable description of the topology. A
//! [`Network`] instantiates it: parameters live in a flat registry and layers
//! refer to them by index, so optimizers, checkpoints, and the converter all
//! see the same view.
//!
//! Residual blocks in lookup networks can run with `index_domain_residual`.
//! The skip path then carries the block input quantized with the first body
//! layer's feature scale `s_l`, multiplied by `s_next / s_l` where `s_next` is
//! the feature scale of the layer consuming the block output. After
//! re-parameterization both branches are in the index domain of the consumer,
//! so the skip is a plain integer addition. A block with no lookup consumer
//! quantizes its own output with `s_l` instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::conv::{ConvShape, Geometry};
use crate::error::{Error, Result};
use crate::lookup::{init_scales, lookup_conv, FeatureQuantizeOp, LookupConfig, LookupVars, ScaleMode, SteRule};
use crate::lut::{build_feature_subtable, build_weight_subtable, weight_arm_len, FeatureSubTableOp, TableMode, WeightSubTableOp};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Lookup-layer settings shared by every lookup layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupSettings {
    pub n_f: usize,
    pub n_w: usize,
    pub table: TableMode,
    pub scale_mode: ScaleMode,
    pub ste: SteRule,
    pub rescale: bool,
    pub index_domain_residual: bool,
}

impl Default for LookupSettings {
    fn default() -> Self {
        Self {
            n_f: crate::lut::DEFAULT_GRANULARITY,
            n_w: crate::lut::DEFAULT_GRANULARITY,
            table: TableMode::Cumulative,
            scale_mode: ScaleMode::Exponential,
            ste: SteRule::SubTableIdentity,
            rescale: true,
            index_domain_residual: true,
        }
    }
}

impl LookupSettings {
    pub fn validate(&self) -> Result<()> {
        weight_arm_len(self.n_w)?;
        if self.n_f < 2 || self.n_f > 256 || self.n_w > 256 {
            return Err(Error::InvalidArgument(format!(
                "granularity {}x{} outside the supported 2..=256 range",
                self.n_f, self.n_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, geom: Geometry, bias: bool },
    Lookup { in_channels: usize, out_channels: usize, geom: Geometry },
    BatchNorm { channels: usize },
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    Linear { in_features: usize, out_features: usize },
    /// `relu(body(x) + shortcut(x))` with a parameter-free shortcut
    /// (subsampling plus zero channel padding).
    Residual { body: Vec<LayerSpec>, stride: usize, in_channels: usize, out_channels: usize },
}

/// Serializable network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    /// `[channels, height, width]` of one sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub lookup: Option<LookupSettings>,
}

/// A layer that performs multiply-accumulates, with its resolved workload.
#[derive(Debug, Clone, PartialEq)]
pub struct MacLayer {
    pub name: String,
    pub kind: MacKind,
    pub macs: u64,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacKind {
    Conv,
    Lookup,
    Linear,
}

fn conv(i: usize, o: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv { in_channels: i, out_channels: o, geom: Geometry::new(k, stride, k / 2, 1), bias: false }
}

fn mac_layer(lookup: bool, i: usize, o: usize, k: usize, stride: usize) -> LayerSpec {
    if lookup {
        LayerSpec::Lookup { in_channels: i, out_channels: o, geom: Geometry::new(k, stride, k / 2, 1) }
    } else {
        conv(i, o, k, stride)
    }
}

fn basic_block(lookup: bool, i: usize, o: usize, stride: usize) -> LayerSpec {
    LayerSpec::Residual {
        body: vec![
            mac_layer(lookup, i, o, 3, stride),
            LayerSpec::BatchNorm { channels: o },
            LayerSpec::Relu,
            mac_layer(lookup, o, o, 3, 1),
            LayerSpec::BatchNorm { channels: o },
        ],
        stride,
        in_channels: i,
        out_channels: o,
    }
}

fn settings_for(lookup: bool, settings: &LookupSettings) -> Option<LookupSettings> {
    lookup.then(|| settings.clone())
}

impl ArchSpec {
    /// Two-layer perceptron on `features`-dimensional inputs (fed as
    /// `N x features x 1 x 1`), with one hidden lookup (or 1x1 conv) layer.
    pub fn toy_mlp(features: usize, hidden: usize, classes: usize, lookup: Option<LookupSettings>) -> Self {
        let l = lookup.is_some();
        Self {
            name: if l { "toy-mlp" } else { "toy-mlp-baseline" }.into(),
            input: [features, 1, 1],
            classes,
            layers: vec![
                conv(features, hidden, 1, 1),
                LayerSpec::BatchNorm { channels: hidden },
                LayerSpec::Relu,
                mac_layer(l, hidden, hidden, 1, 1),
                LayerSpec::BatchNorm { channels: hidden },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: hidden, out_features: classes },
            ],
            lookup,
        }
    }

    /// Small VGG-style CNN for 32x32 inputs: a full-precision stem, three
    /// lookup (or conv) stages with max pooling, global pooling and a linear head.
    pub fn small_cnn(width: usize, classes: usize, lookup: Option<LookupSettings>) -> Self {
        let l = lookup.is_some();
        let w = width;
        Self {
            name: if l { "small-cnn" } else { "small-cnn-baseline" }.into(),
            input: [3, 32, 32],
            classes,
            layers: vec![
                conv(3, w, 3, 1),
                LayerSpec::BatchNorm { channels: w },
                LayerSpec::Relu,
                mac_layer(l, w, w, 3, 1),
                LayerSpec::BatchNorm { channels: w },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                mac_layer(l, w, 2 * w, 3, 1),
                LayerSpec::BatchNorm { channels: 2 * w },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                mac_layer(l, 2 * w, 4 * w, 3, 1),
                LayerSpec::BatchNorm { channels: 4 * w },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: 4 * w, out_features: classes },
            ],
            lookup,
        }
    }

    /// Residual net with `blocks` basic blocks; the channel count doubles (with
    /// stride 2) at every block after the first.
    pub fn toy_resnet(input: [usize; 3], width: usize, blocks: usize, classes: usize, lookup: Option<LookupSettings>) -> Self {
        let l = lookup.is_some();
        let mut layers = vec![conv(input[0], width, 3, 1), LayerSpec::BatchNorm { channels: width }, LayerSpec::Relu];
        let mut c = width;
        for b in 0..blocks {
            let (o, s) = if b == 0 { (c, 1) } else { (2 * c, 2) };
            layers.push(basic_block(l, c, o, s));
            c = o;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear { in_features: c, out_features: classes });
        Self { name: if l { "toy-resnet" } else { "toy-resnet-baseline" }.into(), input, classes, layers, lookup }
    }

    /// ResNet-20 for 32x32 inputs: 16-channel stem, three stages of three
    /// basic blocks (16, 32, 64 channels), global pooling and a linear head.
    pub fn resnet20(classes: usize, lookup: Option<LookupSettings>) -> Self {
        let l = lookup.is_some();
        let mut layers = vec![conv(3, 16, 3, 1), LayerSpec::BatchNorm { channels: 16 }, LayerSpec::Relu];
        let mut c = 16;
        for (stage, o) in [16, 32, 64].into_iter().enumerate() {
            for b in 0..3 {
                let s = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(basic_block(l, c, o, s));
                c = o;
            }
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear { in_features: 64, out_features: classes });
        Self { name: if l { "resnet20-lookup" } else { "resnet20-baseline" }.into(), input: [3, 32, 32], classes, layers, lookup }
    }

    /// VGG-Small: six 3x3 layers (128, 128, 256, 256, 512, 512 channels) with
    /// max pooling after every pair, followed by a linear classifier.
    pub fn vgg_small(classes: usize, lookup: Option<LookupSettings>) -> Self {
        let l = lookup.is_some();
        let mut layers = vec![conv(3, 128, 3, 1), LayerSpec::BatchNorm { channels: 128 }, LayerSpec::Relu];
        let plan = [(128, 128, true), (128, 256, false), (256, 256, true), (256, 512, false), (512, 512, true)];
        for (i, o, pool) in plan {
            layers.push(mac_layer(l, i, o, 3, 1));
            layers.push(LayerSpec::BatchNorm { channels: o });
            layers.push(LayerSpec::Relu);
            if pool {
                layers.push(LayerSpec::MaxPool { size: 2 });
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear { in_features: 512 * 4 * 4, out_features: classes });
        Self { name: if l { "vggsmall-lookup" } else { "vggsmall-baseline" }.into(), input: [3, 32, 32], classes, layers, lookup }
    }

    /// Named architecture as used by run configurations.
    pub fn by_name(name: &str, classes: usize, settings: &LookupSettings) -> Result<Self> {
        let s = |l| settings_for(l, settings);
        Ok(match name {
            "toy-mlp" => Self::toy_mlp(2, 16, classes, s(true)),
            "toy-mlp-baseline" => Self::toy_mlp(2, 16, classes, None),
            "small-cnn" => Self::small_cnn(16, classes, s(true)),
            "small-cnn-baseline" => Self::small_cnn(16, classes, None),
            "toy-resnet" => Self::toy_resnet([3, 8, 8], 4, 2, classes, s(true)),
            "toy-resnet-baseline" => Self::toy_resnet([3, 8, 8], 4, 2, classes, None),
            "resnet20-lookup" => Self::resnet20(classes, s(true)),
            "resnet20-baseline" => Self::resnet20(classes, None),
            "vggsmall-lookup" => Self::vgg_small(classes, s(true)),
            "vggsmall-baseline" => Self::vgg_small(classes, None),
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        })
    }

    pub fn has_lookup_layers(&self) -> bool {
        fn any(layers: &[LayerSpec]) -> bool {
            layers.iter().any(|l| match l {
                LayerSpec::Lookup { .. } => true,
                LayerSpec::Residual { body, .. } => any(body),
                _ => false,
            })
        }
        any(&self.layers)
    }

    /// Every multiply-accumulate layer in evaluation order, with its MACs for
    /// one input sample.
    pub fn mac_layers(&self) -> Result<Vec<MacLayer>> {
        let mut out = Vec::new();
        let shape = vec![1, self.input[0], self.input[1], self.input[2]];
        walk_shapes(&self.layers, shape, "layers", &mut out)?;
        Ok(out)
    }
}

fn walk_shapes(layers: &[LayerSpec], mut shape: Vec<usize>, prefix: &str, out: &mut Vec<MacLayer>) -> Result<Vec<usize>> {
    for (i, l) in layers.iter().enumerate() {
        let name = format!("{prefix}.{i}");
        shape = match l {
            LayerSpec::Conv { in_channels, out_channels, geom, .. } | LayerSpec::Lookup { in_channels, out_channels, geom } => {
                let s = ConvShape::resolve(&shape, &[*out_channels, *in_channels, geom.kernel, geom.kernel], *geom)
                    .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
                let kind = if matches!(l, LayerSpec::Lookup { .. }) { MacKind::Lookup } else { MacKind::Conv };
                out.push(MacLayer { name, kind, macs: s.macs(), out_channels: *out_channels });
                s.output_shape().to_vec()
            }
            LayerSpec::BatchNorm { channels } => {
                if shape.get(1) != Some(channels) {
                    return Err(Error::Shape(format!("{name}: batch norm over {channels} channels, input {shape:?}")));
                }
                shape
            }
            LayerSpec::Relu => shape,
            LayerSpec::MaxPool { size } => {
                if shape.len() != 4 || shape[2] % size != 0 || shape[3] % size != 0 {
                    return Err(Error::Shape(format!("{name}: cannot pool {shape:?} by {size}")));
                }
                vec![shape[0], shape[1], shape[2] / size, shape[3] / size]
            }
            LayerSpec::GlobalAvgPool => vec![shape[0], shape[1]],
            LayerSpec::Flatten => vec![shape[0], shape[1..].iter().product()],
            LayerSpec::Linear { in_features, out_features } => {
                let flat: usize = shape[1..].iter().product();
                if flat != *in_features {
                    return Err(Error::Shape(format!("{name}: linear expects {in_features} features, input {shape:?}")));
                }
                out.push(MacLayer {
                    name,
                    kind: MacKind::Linear,
                    macs: (*in_features * *out_features) as u64,
                    out_channels: *out_features,
                });
                vec![shape[0], *out_features]
            }
            LayerSpec::Residual { body, stride, in_channels, out_channels } => {
                if shape.get(1) != Some(in_channels) || out_channels < in_channels {
                    return Err(Error::Shape(format!("{name}: residual block {in_channels}->{out_channels}, input {shape:?}")));
                }
                let o = walk_shapes(body, shape.clone(), &format!("{name}.body"), out)?;
                let skip = vec![shape[0], *out_channels, shape[2].div_ceil(*stride), shape[3].div_ceil(*stride)];
                if o != skip {
                    return Err(Error::Shape(format!("{name}: body output {o:?} does not match shortcut {skip:?}")));
                }
                o
            }
        };
    }
    Ok(shape)
}

/// Role of a parameter, which decides weight decay and re-scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Scale,
    Table,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias | ParamKind::Norm)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Sub-table parameters of one lookup layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableParams {
    Cumulative { feature: usize, neg: usize, pos: usize },
    Independent { feature: usize, weight: usize },
}

#[derive(Debug, Clone)]
pub struct LookupLayer {
    pub name: String,
    pub slot: usize,
    pub weight: usize,
    pub bias: usize,
    pub e_w: usize,
    pub e_f: usize,
    pub table: TableParams,
    pub geom: Geometry,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub body: Vec<Layer>,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv { weight: usize, bias: Option<usize>, geom: Geometry },
    Lookup(LookupLayer),
    BatchNorm { slot: usize, gamma: usize, beta: usize },
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    Linear { weight: usize, bias: usize },
    Residual(ResidualBlock),
}

impl Layer {
    fn first_lookup(&self) -> Option<&LookupLayer> {
        match self {
            Layer::Lookup(l) => Some(l),
            Layer::Residual(b) => b.body.iter().find_map(Layer::first_lookup),
            _ => None,
        }
    }
}

/// The lookup layer that reads the output of `layers[i]`, looking through
/// activation and pooling layers.
pub fn lookup_consumer(layers: &[Layer], i: usize) -> Option<&LookupLayer> {
    for l in &layers[i + 1..] {
        match l {
            Layer::Relu | Layer::MaxPool { .. } => continue,
            Layer::Lookup(_) | Layer::Residual(_) => return l.first_lookup(),
            _ => return None,
        }
    }
    None
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State changes produced by a training-mode forward pass, applied with
/// [`Network::commit`].
#[derive(Debug, Clone, Default)]
pub struct PassUpdates<T> {
    pub scale_inits: Vec<(usize, usize, T, usize, T)>,
    pub bn: Vec<(usize, BatchStats<T>)>,
}

pub struct Pass<T> {
    pub output: Var,
    /// Graph variable of every parameter the pass touched.
    pub param_vars: Vec<Option<Var>>,
    pub updates: PassUpdates<T>,
}

struct Ctx<'g, T: Scalar> {
    g: &'g mut Graph<T>,
    mode: Mode,
    vars: Vec<Option<Var>>,
    overrides: Vec<Option<T>>,
    updates: PassUpdates<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub spec: ArchSpec,
    pub params: Vec<Param<T>>,
    pub layers: Vec<Layer>,
    pub bn: Vec<BnState<T>>,
    /// Whether each lookup layer's scales were initialized from data.
    pub lookup_ready: Vec<bool>,
}

struct Builder<'r, T, R> {
    params: Vec<Param<T>>,
    bn: Vec<BnState<T>>,
    lookups: usize,
    settings: Option<LookupSettings>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn add(&mut self, name: String, kind: ParamKind, value: Tensor<T>, trainable: bool) -> usize {
        self.params.push(Param { name, kind, value, trainable });
        self.params.len() - 1
    }

    fn kaiming(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng)
    }

    fn layers(&mut self, specs: &[LayerSpec], prefix: &str) -> Result<Vec<Layer>> {
        specs.iter().enumerate().map(|(i, s)| self.layer(s, &format!("{prefix}.{i}"))).collect()
    }

    fn layer(&mut self, spec: &LayerSpec, name: &str) -> Result<Layer> {
        Ok(match spec {
            LayerSpec::Conv { in_channels, out_channels, geom, bias } => {
                let w = self.kaiming(&[*out_channels, *in_channels, geom.kernel, geom.kernel]);
                let weight = self.add(format!("{name}.weight"), ParamKind::Weight, w, true);
                let bias = bias.then(|| self.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[*out_channels]), true));
                Layer::Conv { weight, bias, geom: *geom }
            }
            LayerSpec::Lookup { in_channels, out_channels, geom } => {
                let st = self
                    .settings
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument(format!("{name}: lookup layer without lookup settings")))?;
                st.validate()?;
                let w = self.kaiming(&[*out_channels, *in_channels, geom.kernel, geom.kernel]);
                let weight = self.add(format!("{name}.weight"), ParamKind::Weight, w, true);
                let bias = self.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[*out_channels]), true);
                let raw = st.scale_mode.raw(T::one());
                let e_w = self.add(format!("{name}.e_w"), ParamKind::Scale, Tensor::from_vec(vec![raw]), true);
                let e_f = self.add(format!("{name}.e_f"), ParamKind::Scale, Tensor::from_vec(vec![raw]), true);
                let half = (st.n_w - 1) / 2;
                let table = match st.table {
                    TableMode::Fixed | TableMode::Cumulative => {
                        let t = st.table.is_trainable();
                        TableParams::Cumulative {
                            feature: self.add(format!("{name}.table.feature_logits"), ParamKind::Table, Tensor::zeros(&[st.n_f - 1]), t),
                            neg: self.add(format!("{name}.table.weight_neg_logits"), ParamKind::Table, Tensor::zeros(&[half]), t),
                            pos: self.add(format!("{name}.table.weight_pos_logits"), ParamKind::Table, Tensor::zeros(&[half]), t),
                        }
                    }
                    TableMode::IndependentRandom => {
                        let f = Tensor::rand_uniform(&[st.n_f], 0.0, 1.0, self.rng);
                        let w = Tensor::<T>::rand_uniform(&[st.n_w], 0.0, 1.0, self.rng)
                            .map(|u| u + u - T::one());
                        TableParams::Independent {
                            feature: self.add(format!("{name}.table.feature"), ParamKind::Table, f, true),
                            weight: self.add(format!("{name}.table.weight"), ParamKind::Table, w, true),
                        }
                    }
                    TableMode::IndependentStep => {
                        let ramp = crate::lut::LookupTable::<T>::exact_product(st.n_f, st.n_w)?;
                        TableParams::Independent {
                            feature: self.add(format!("{name}.table.feature"), ParamKind::Table, Tensor::from_vec(ramp.feature), true),
                            weight: self.add(format!("{name}.table.weight"), ParamKind::Table, Tensor::from_vec(ramp.weight), true),
                        }
                    }
                };
                self.lookups += 1;
                Layer::Lookup(LookupLayer {
                    name: name.to_string(),
                    slot: self.lookups - 1,
                    weight,
                    bias,
                    e_w,
                    e_f,
                    table,
                    geom: *geom,
                })
            }
            LayerSpec::BatchNorm { channels } => {
                let gamma = self.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::ones(&[*channels]), true);
                let beta = self.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[*channels]), true);
                self.bn.push(BnState { mean: vec![T::zero(); *channels], var: vec![T::one(); *channels] });
                Layer::BatchNorm { slot: self.bn.len() - 1, gamma, beta }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size } => Layer::MaxPool { size: *size },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Linear { in_features, out_features } => {
                let w = Tensor::randn(&[*out_features, *in_features], (1.0 / *in_features as f64).sqrt(), self.rng);
                let weight = self.add(format!("{name}.weight"), ParamKind::Weight, w, true);
                let bias = self.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[*out_features]), true);
                Layer::Linear { weight, bias }
            }
            LayerSpec::Residual { body, stride, out_channels, .. } => Layer::Residual(ResidualBlock {
                body: self.layers(body, &format!("{name}.body"))?,
                stride: *stride,
                out_channels: *out_channels,
            }),
        })
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiates `spec` with freshly initialized parameters.
    pub fn new<R: Rng>(spec: ArchSpec, rng: &mut R) -> Result<Self> {
        spec.mac_layers()?;
        let mut b = Builder { params: Vec::new(), bn: Vec::new(), lookups: 0, settings: spec.lookup.clone(), rng };
        let layers = b.layers(&spec.layers, "layers")?;
        Ok(Self { lookup_ready: vec![false; b.lookups], params: b.params, bn: b.bn, layers, spec })
    }

    pub fn settings(&self) -> Option<&LookupSettings> {
        self.spec.lookup.as_ref()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Lookup layers in evaluation order.
    pub fn lookup_layers(&self) -> Vec<&LookupLayer> {
        fn collect<'a>(layers: &'a [Layer], out: &mut Vec<&'a LookupLayer>) {
            for l in layers {
                match l {
                    Layer::Lookup(x) => out.push(x),
                    Layer::Residual(b) => collect(&b.body, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(&self.layers, &mut out);
        out
    }

    pub fn scalar(&self, id: usize) -> T {
        self.params[id].value.item()
    }

    /// `(s_w, s_f)` of a lookup layer.
    pub fn scales(&self, l: &LookupLayer) -> (T, T) {
        let mode = self.settings().map_or(ScaleMode::Exponential, |s| s.scale_mode);
        (mode.scale(self.scalar(l.e_w)), mode.scale(self.scalar(l.e_f)))
    }

    /// Materialized `(T_f, T_w)` of a lookup layer.
    pub fn table(&self, l: &LookupLayer) -> Result<crate::lut::LookupTable<T>> {
        match l.table {
            TableParams::Cumulative { feature, neg, pos } => crate::lut::LookupTable::new(
                build_feature_subtable(self.params[feature].value.data())?,
                build_weight_subtable(self.params[neg].value.data(), self.params[pos].value.data())?,
            ),
            TableParams::Independent { feature, weight } => crate::lut::LookupTable::new(
                self.params[feature].value.data().to_vec(),
                self.params[weight].value.data().to_vec(),
            ),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        Network {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast(), trainable: p.trainable })
                .collect(),
            layers: self.layers.clone(),
            bn: self.bn.iter().map(|s| BnState { mean: conv(&s.mean), var: conv(&s.var) }).collect(),
            lookup_ready: self.lookup_ready.clone(),
        }
    }

    fn ctx<'g>(&self, g: &'g mut Graph<T>, mode: Mode, bound: &[(usize, Var)]) -> Result<Ctx<'g, T>> {
        let n = self.params.len();
        let mut ctx = Ctx { g, mode, vars: vec![None; n], overrides: vec![None; n], updates: PassUpdates::default() };
        for &(id, v) in bound {
            if id >= n || ctx.g.value(v).shape() != self.params[id].value.shape() {
                return Err(Error::Graph(format!("cannot bind parameter {id}")));
            }
            ctx.vars[id] = Some(v);
        }
        Ok(ctx)
    }

    /// Evaluation-mode output of a single lookup layer for input `x`, with
    /// the listed parameters read from existing graph variables.
    pub fn lookup_forward(&self, g: &mut Graph<T>, l: &LookupLayer, x: Var, bound: &[(usize, Var)]) -> Result<Var> {
        let mut ctx = self.ctx(g, Mode::Eval, bound)?;
        self.lookup(&mut ctx, l, x)
    }

    /// Records a forward pass of input `x` on `g`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Pass<T>> {
        let mut ctx = self.ctx(g, mode, &[])?;
        let out = self.run(&mut ctx, &self.layers, x)?;
        Ok(Pass { output: out, param_vars: ctx.vars, updates: ctx.updates })
    }

    /// Applies the running-statistics and scale-initialization updates of a
    /// training pass.
    pub fn commit(&mut self, updates: PassUpdates<T>) {
        for (slot, e_w, vw, e_f, vf) in updates.scale_inits {
            self.params[e_w].value = Tensor::from_vec(vec![vw]);
            self.params[e_f].value = Tensor::from_vec(vec![vf]);
            self.lookup_ready[slot] = true;
        }
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (slot, st) in updates.bn {
            let unbias = if st.count > 1 {
                T::from_usize(st.count).unwrap() / T::from_usize(st.count - 1).unwrap()
            } else {
                T::one()
            };
            let s = &mut self.bn[slot];
            for c in 0..s.mean.len() {
                s.mean[c] = (T::one() - m) * s.mean[c] + m * st.mean[c];
                s.var[c] = (T::one() - m) * s.var[c] + m * st.var[c] * unbias;
            }
        }
    }

    /// Evaluation-mode output for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let pass = self.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.value(pass.output).clone())
    }

    fn var(&self, ctx: &mut Ctx<'_, T>, id: usize) -> Result<Var> {
        if let Some(v) = ctx.vars[id] {
            return Ok(v);
        }
        let p = &self.params[id];
        let value = match ctx.overrides[id] {
            Some(s) => Tensor::from_vec(vec![s]),
            None => p.value.clone(),
        };
        let v = if p.trainable { ctx.g.param(value)? } else { ctx.g.constant(value)? };
        ctx.vars[id] = Some(v);
        Ok(v)
    }

    fn current(&self, ctx: &Ctx<'_, T>, id: usize) -> T {
        ctx.overrides[id].unwrap_or_else(|| self.scalar(id))
    }

    fn s_f(&self, ctx: &Ctx<'_, T>, l: &LookupLayer) -> T {
        self.settings().map_or(ScaleMode::Exponential, |s| s.scale_mode).scale(self.current(ctx, l.e_f))
    }

    fn ready(&self, ctx: &Ctx<'_, T>, l: &LookupLayer) -> bool {
        self.lookup_ready[l.slot] || ctx.overrides[l.e_f].is_some()
    }

    fn run(&self, ctx: &mut Ctx<'_, T>, layers: &[Layer], mut x: Var) -> Result<Var> {
        for (i, layer) in layers.iter().enumerate() {
            x = match layer {
                Layer::Conv { weight, bias, geom } => {
                    let w = self.var(ctx, *weight)?;
                    let b = bias.map(|b| self.var(ctx, b)).transpose()?;
                    ctx.g.conv2d(x, w, b, *geom)?
                }
                Layer::Lookup(l) => self.lookup(ctx, l, x)?,
                Layer::BatchNorm { slot, gamma, beta } => {
                    let gm = self.var(ctx, *gamma)?;
                    let bt = self.var(ctx, *beta)?;
                    let eps = T::from_f64_lossy(BN_EPS);
                    let st = &self.bn[*slot];
                    let mode = match ctx.mode {
                        Mode::Train => BnMode::Train,
                        Mode::Eval => BnMode::Eval { mean: &st.mean, var: &st.var },
                    };
                    let (y, stats) = ctx.g.batch_norm(x, gm, bt, mode, eps)?;
                    if let Some(s) = stats {
                        ctx.updates.bn.push((*slot, s));
                    }
                    y
                }
                Layer::Relu => ctx.g.relu(x)?,
                Layer::MaxPool { size } => ctx.g.max_pool(x, *size)?,
                Layer::GlobalAvgPool => ctx.g.global_avg_pool(x)?,
                Layer::Flatten => ctx.g.flatten(x)?,
                Layer::Linear { weight, bias } => {
                    let w = self.var(ctx, *weight)?;
                    let b = self.var(ctx, *bias)?;
                    let x = if ctx.g.value(x).rank() == 2 { x } else { ctx.g.flatten(x)? };
                    ctx.g.linear(x, w, Some(b))?
                }
                Layer::Residual(block) => self.residual(ctx, layers, i, block, x)?,
            };
        }
        Ok(x)
    }

    fn residual(&self, ctx: &mut Ctx<'_, T>, layers: &[Layer], i: usize, block: &ResidualBlock, x: Var) -> Result<Var> {
        let body = self.run(ctx, &block.body, x)?;
        let own = block.body.iter().find_map(Layer::first_lookup);
        let index_domain = self.settings().is_some_and(|s| s.index_domain_residual);
        let (skip, out_quant) = match (own, index_domain) {
            (Some(own), true) => {
                let n_f = self.settings().map(|s| s.n_f).unwrap_or(2);
                let s_l = self.s_f(ctx, own);
                let q = FeatureQuantizeOp::apply(s_l, n_f, ctx.g.value(x));
                let q = ctx.g.custom(Box::new(FeatureQuantizeOp { scale: s_l }), &[x], q)?;
                match lookup_consumer(layers, i) {
                    Some(next) => {
                        let c = if self.ready(ctx, own) && self.ready(ctx, next) {
                            self.s_f(ctx, next) / s_l
                        } else {
                            T::one()
                        };
                        (ctx.g.scale(q, c)?, None)
                    }
                    None => (q, Some((s_l, n_f))),
                }
            }
            _ => (x, None),
        };
        let c_in = ctx.g.value(skip).shape()[1];
        let skip = if block.stride != 1 || c_in != block.out_channels {
            ctx.g.shortcut(skip, block.stride, block.out_channels)?
        } else {
            skip
        };
        let sum = ctx.g.add(body, skip)?;
        let y = ctx.g.relu(sum)?;
        match out_quant {
            Some((s, n)) => {
                let q = FeatureQuantizeOp::apply(s, n, ctx.g.value(y));
                ctx.g.custom(Box::new(FeatureQuantizeOp { scale: s }), &[y], q)
            }
            None => Ok(y),
        }
    }

    fn lookup(&self, ctx: &mut Ctx<'_, T>, l: &LookupLayer, x: Var) -> Result<Var> {
        let st = self
            .settings()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: lookup layer without settings", l.name)))?;
        if ctx.mode == Mode::Train && !self.ready(ctx, l) {
            let sp = init_scales(self.params[l.weight].value.data(), ctx.g.value(x).data(), st.scale_mode);
            ctx.overrides[l.e_w] = Some(sp.e_w);
            ctx.overrides[l.e_f] = Some(sp.e_f);
            ctx.updates.scale_inits.push((l.slot, l.e_w, sp.e_w, l.e_f, sp.e_f));
        }
        let (t_f, t_w) = match l.table {
            TableParams::Cumulative { feature, neg, pos } => {
                let fv = self.var(ctx, feature)?;
                let nv = self.var(ctx, neg)?;
                let pv = self.var(ctx, pos)?;
                let tf = build_feature_subtable(ctx.g.value(fv).data())?;
                let tw = build_weight_subtable(ctx.g.value(nv).data(), ctx.g.value(pv).data())?;
                let tf = ctx.g.custom(Box::new(FeatureSubTableOp), &[fv], Tensor::from_vec(tf))?;
                let tw = ctx.g.custom(Box::new(WeightSubTableOp), &[nv, pv], Tensor::from_vec(tw))?;
                (tf, tw)
            }
            TableParams::Independent { feature, weight } => (self.var(ctx, feature)?, self.var(ctx, weight)?),
        };
        let vars = LookupVars {
            weight: self.var(ctx, l.weight)?,
            bias: self.var(ctx, l.bias)?,
            e_w: self.var(ctx, l.e_w)?,
            e_f: self.var(ctx, l.e_f)?,
            t_f,
            t_w,
        };
        let cfg = LookupConfig { geom: l.geom, scale_mode: st.scale_mode, ste: st.ste, rescale: st.rescale };
        lookup_conv(ctx.g, x, vars, cfg)
    }
}
