//! Self-describing model files.
//!
//! Layout: one format-version byte, a little-endian `u32` header length, a
//! JSON header, then the arrays listed in the header back to back (`f32`
//! little-endian or raw `u8`).

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Geometry;
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, BnState, Network};
use crate::reparam::{Activation, ConvertedNetwork, FusedLookup, Model, Stage};
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u8 = 1;
const MAGIC: &str = "lookupnet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl ArrayMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bytes(&self) -> usize {
        self.len() * if self.dtype == Dtype::F32 { 4 } else { 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Stage description of a converted network; arrays live in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageDesc {
    Conv { geom: Geometry, bias: bool },
    BatchNorm,
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    Linear,
    Quantize { scale: f32, levels: usize },
    Dequantize { scale: f32, levels: usize },
    Lookup {
        name: String,
        geom: Geometry,
        weight_shape: [usize; 4],
        n_f: usize,
        n_w: usize,
        per_channel: bool,
        input_scale: Option<f32>,
        activation: Activation,
    },
    Residual { body: Vec<StageDesc>, stride: usize, out_channels: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    Trained { spec: ArchSpec, lookup_ready: Vec<bool> },
    Converted { arch: String, input: [usize; 3], classes: usize, stages: Vec<StageDesc> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub step: u64,
    pub topology: Topology,
    pub arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<ArrayData>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn f32s<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

#[derive(Default)]
struct Writer {
    metas: Vec<ArrayMeta>,
    data: Vec<ArrayData>,
}

impl Writer {
    fn f32<T: Scalar>(&mut self, name: String, shape: &[usize], v: &[T]) {
        self.metas.push(ArrayMeta { name, dtype: Dtype::F32, shape: shape.to_vec() });
        self.data.push(ArrayData::F32(f32s(v)));
    }

    fn u8(&mut self, name: String, shape: &[usize], v: &[u8]) {
        self.metas.push(ArrayMeta { name, dtype: Dtype::U8, shape: shape.to_vec() });
        self.data.push(ArrayData::U8(v.to_vec()));
    }

    fn stages<T: Scalar>(&mut self, stages: &[Stage<T>], prefix: &str) -> Vec<StageDesc> {
        stages.iter().enumerate().map(|(i, s)| self.stage(s, &format!("{prefix}.{i}"))).collect()
    }

    fn stage<T: Scalar>(&mut self, s: &Stage<T>, p: &str) -> StageDesc {
        match s {
            Stage::Conv { weight, bias, geom } => {
                self.f32(format!("{p}.weight"), weight.shape(), weight.data());
                if let Some(b) = bias {
                    self.f32(format!("{p}.bias"), b.shape(), b.data());
                }
                StageDesc::Conv { geom: *geom, bias: bias.is_some() }
            }
            Stage::BatchNorm { gamma, beta, mean, var } => {
                for (n, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
                    self.f32(format!("{p}.{n}"), &[v.len()], v);
                }
                StageDesc::BatchNorm
            }
            Stage::Relu => StageDesc::Relu,
            Stage::MaxPool { size } => StageDesc::MaxPool { size: *size },
            Stage::GlobalAvgPool => StageDesc::GlobalAvgPool,
            Stage::Flatten => StageDesc::Flatten,
            Stage::Linear { weight, bias } => {
                self.f32(format!("{p}.weight"), weight.shape(), weight.data());
                self.f32(format!("{p}.bias"), bias.shape(), bias.data());
                StageDesc::Linear
            }
            Stage::Quantize { scale, levels } => StageDesc::Quantize { scale: scale.as_f64() as f32, levels: *levels },
            Stage::Dequantize { scale, levels } => StageDesc::Dequantize { scale: scale.as_f64() as f32, levels: *levels },
            Stage::Lookup(l) => {
                self.u8(format!("{p}.weight_idx"), &l.weight_shape, &l.weight_idx);
                let tables = if l.per_channel { l.weight_shape[0] } else { 1 };
                self.f32(format!("{p}.tables"), &[tables, l.n_f, l.n_w], &l.tables);
                self.f32(format!("{p}.bias"), &[l.bias.len()], &l.bias);
                StageDesc::Lookup {
                    name: l.name.clone(),
                    geom: l.geom,
                    weight_shape: l.weight_shape,
                    n_f: l.n_f,
                    n_w: l.n_w,
                    per_channel: l.per_channel,
                    input_scale: l.input_scale.map(|s| s.as_f64() as f32),
                    activation: l.activation,
                }
            }
            Stage::Residual { body, stride, out_channels, max } => StageDesc::Residual {
                body: self.stages(body, &format!("{p}.body")),
                stride: *stride,
                out_channels: *out_channels,
                max: *max,
            },
        }
    }
}

/// Sequential reader over the payload arrays, checked against expectations.
struct Reader<'a> {
    metas: &'a [ArrayMeta],
    data: &'a [ArrayData],
    next: usize,
}

impl Reader<'_> {
    fn take(&mut self, name: &str) -> Result<(&ArrayMeta, &ArrayData)> {
        let i = self.next;
        let meta = self.metas.get(i).ok_or_else(|| ck(format!("missing array {name}")))?;
        if meta.name != name {
            return Err(ck(format!("expected array {name}, found {}", meta.name)));
        }
        self.next += 1;
        Ok((meta, &self.data[i]))
    }

    fn f32(&mut self, name: &str) -> Result<Tensor<f32>> {
        match self.take(name)? {
            (m, ArrayData::F32(v)) => Tensor::new(m.shape.clone(), v.clone()),
            _ => Err(ck(format!("array {name} is not f32"))),
        }
    }

    fn vec(&mut self, name: &str) -> Result<Vec<f32>> {
        Ok(self.f32(name)?.into_data())
    }

    fn u8(&mut self, name: &str) -> Result<Vec<u8>> {
        match self.take(name)? {
            (_, ArrayData::U8(v)) => Ok(v.clone()),
            _ => Err(ck(format!("array {name} is not u8"))),
        }
    }

    fn stages(&mut self, descs: &[StageDesc], prefix: &str) -> Result<Vec<Stage<f32>>> {
        descs.iter().enumerate().map(|(i, d)| self.stage(d, &format!("{prefix}.{i}"))).collect()
    }

    fn stage(&mut self, d: &StageDesc, p: &str) -> Result<Stage<f32>> {
        Ok(match d {
            StageDesc::Conv { geom, bias } => {
                let weight = self.f32(&format!("{p}.weight"))?;
                let bias = if *bias { Some(self.f32(&format!("{p}.bias"))?) } else { None };
                Stage::Conv { weight, bias, geom: *geom }
            }
            StageDesc::BatchNorm => Stage::BatchNorm {
                gamma: self.vec(&format!("{p}.gamma"))?,
                beta: self.vec(&format!("{p}.beta"))?,
                mean: self.vec(&format!("{p}.mean"))?,
                var: self.vec(&format!("{p}.var"))?,
            },
            StageDesc::Relu => Stage::Relu,
            StageDesc::MaxPool { size } => Stage::MaxPool { size: *size },
            StageDesc::GlobalAvgPool => Stage::GlobalAvgPool,
            StageDesc::Flatten => Stage::Flatten,
            StageDesc::Linear => Stage::Linear { weight: self.f32(&format!("{p}.weight"))?, bias: self.f32(&format!("{p}.bias"))? },
            StageDesc::Quantize { scale, levels } => Stage::Quantize { scale: *scale, levels: *levels },
            StageDesc::Dequantize { scale, levels } => Stage::Dequantize { scale: *scale, levels: *levels },
            StageDesc::Lookup { name, geom, weight_shape, n_f, n_w, per_channel, input_scale, activation } => {
                let weight_idx = self.u8(&format!("{p}.weight_idx"))?;
                if let Some(&bad) = weight_idx.iter().find(|&&i| i as usize >= *n_w) {
                    return Err(ck(format!("{name}: weight index {bad} outside {n_w} levels")));
                }
                Stage::Lookup(FusedLookup {
                    name: name.clone(),
                    geom: *geom,
                    weight_shape: *weight_shape,
                    weight_idx,
                    n_f: *n_f,
                    n_w: *n_w,
                    tables: self.vec(&format!("{p}.tables"))?,
                    per_channel: *per_channel,
                    bias: self.vec(&format!("{p}.bias"))?,
                    input_scale: *input_scale,
                    activation: *activation,
                })
            }
            StageDesc::Residual { body, stride, out_channels, max } => Stage::Residual {
                body: self.stages(body, &format!("{p}.body"))?,
                stride: *stride,
                out_channels: *out_channels,
                max: *max,
            },
        })
    }
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>, step: u64) -> Self {
        let mut w = Writer::default();
        for p in &net.params {
            w.f32(p.name.clone(), p.value.shape(), p.value.data());
        }
        for (i, s) in net.bn.iter().enumerate() {
            w.f32(format!("running.{i}.mean"), &[s.mean.len()], &s.mean);
            w.f32(format!("running.{i}.var"), &[s.var.len()], &s.var);
        }
        let topology = Topology::Trained { spec: net.spec.clone(), lookup_ready: net.lookup_ready.clone() };
        Self::assemble(topology, step, w)
    }

    pub fn from_converted<T: Scalar>(conv: &ConvertedNetwork<T>, step: u64) -> Self {
        let mut w = Writer::default();
        let stages = w.stages(&conv.stages, "stages");
        let topology = Topology::Converted { arch: conv.arch.clone(), input: conv.input, classes: conv.classes, stages };
        Self::assemble(topology, step, w)
    }

    pub fn from_model<T: Scalar>(model: &Model<T>, step: u64) -> Self {
        match model {
            Model::Trained(n) => Self::from_network(n, step),
            Model::Converted(c) => Self::from_converted(c, step),
        }
    }

    fn assemble(topology: Topology, step: u64, w: Writer) -> Self {
        Self { header: Header { format: MAGIC.into(), step, topology, arrays: w.metas }, arrays: w.data }
    }

    fn reader(&self) -> Reader<'_> {
        Reader { metas: &self.header.arrays, data: &self.arrays, next: 0 }
    }

    fn finish(r: Reader<'_>) -> Result<()> {
        if r.next != r.metas.len() {
            return Err(ck(format!("{} unused arrays", r.metas.len() - r.next)));
        }
        Ok(())
    }

    pub fn into_model(&self) -> Result<Model<f32>> {
        match &self.header.topology {
            Topology::Trained { spec, lookup_ready } => {
                let mut net = Network::<f32>::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
                if lookup_ready.len() != net.lookup_ready.len() {
                    return Err(ck("lookup layer count does not match the topology"));
                }
                net.lookup_ready = lookup_ready.clone();
                let mut r = self.reader();
                for p in &mut net.params {
                    let v = r.f32(&p.name)?;
                    p.value.expect_same_shape(&v).map_err(|e| ck(format!("{}: {e}", p.name)))?;
                    p.value = v;
                }
                for (i, s) in net.bn.iter_mut().enumerate() {
                    let (mean, var) = (r.vec(&format!("running.{i}.mean"))?, r.vec(&format!("running.{i}.var"))?);
                    if mean.len() != s.mean.len() || var.len() != s.var.len() {
                        return Err(ck(format!("running statistics {i} have the wrong length")));
                    }
                    *s = BnState { mean, var };
                }
                Self::finish(r)?;
                Ok(Model::Trained(net))
            }
            Topology::Converted { arch, input, classes, stages } => {
                let mut r = self.reader();
                let stages = r.stages(stages, "stages")?;
                Self::finish(r)?;
                Ok(Model::Converted(ConvertedNetwork { arch: arch.clone(), input: *input, classes: *classes, stages }))
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let len = u32::try_from(header.len()).map_err(|_| ck("header larger than 4 GiB"))?;
        let mut out = Vec::with_capacity(5 + header.len() + self.header.arrays.iter().map(ArrayMeta::bytes).sum::<usize>());
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for (m, a) in self.header.arrays.iter().zip(&self.arrays) {
            match a {
                ArrayData::F32(v) if m.dtype == Dtype::F32 && v.len() == m.len() => {
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
                }
                ArrayData::U8(v) if m.dtype == Dtype::U8 && v.len() == m.len() => out.extend_from_slice(v),
                _ => return Err(ck(format!("array {} does not match its description", m.name))),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (&version, rest) = bytes.split_first().ok_or_else(|| ck("empty file"))?;
        if version != FORMAT_VERSION {
            return Err(ck(format!("unsupported format version {version}")));
        }
        if rest.len() < 4 {
            return Err(ck("truncated header length"));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        let body = &rest[4..];
        if body.len() < len {
            return Err(ck("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.format != MAGIC {
            return Err(ck(format!("not a model file (format `{}`)", header.format)));
        }
        let mut payload = &body[len..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for m in &header.arrays {
            let n = m.bytes();
            if payload.len() < n {
                return Err(ck(format!("payload truncated in array {}", m.name)));
            }
            let (chunk, tail) = payload.split_at(n);
            arrays.push(match m.dtype {
                Dtype::F32 => ArrayData::F32(chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
                Dtype::U8 => ArrayData::U8(chunk.to_vec()),
            });
            payload = tail;
        }
        if !payload.is_empty() {
            return Err(ck(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self { header, arrays })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Atomically replaces `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, LookupSettings, Mode};
    use crate::reparam::convert_network;
    use crate::autodiff::Graph;

    fn trained_toy() -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ArchSpec::toy_resnet([3, 8, 8], 4, 2, 3, Some(LookupSettings::default()));
        let mut net = Network::<f32>::new(spec, &mut rng).unwrap();
        let x = Tensor::<f32>::rand_uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let pass = net.forward(&mut g, xv, Mode::Train).unwrap();
        net.commit(pass.updates);
        net
    }

    #[test]
    fn trained_round_trip_is_byte_identical() {
        let net = trained_toy();
        let bytes = Checkpoint::from_network(&net, 7).to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.header.step, 7);
        let Model::Trained(back) = ck.into_model().unwrap() else { panic!("expected a trained model") };
        assert_eq!(Checkpoint::from_network(&back, 7).to_bytes().unwrap(), bytes);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());
    }

    #[test]
    fn converted_round_trip_matches_in_memory_outputs() {
        let net = trained_toy();
        let (conv, _) = convert_network(&net).unwrap();
        let bytes = Checkpoint::from_converted(&conv, 0).to_bytes().unwrap();
        let Model::Converted(back) = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap() else {
            panic!("expected a converted model")
        };
        assert_eq!(Checkpoint::from_converted(&back, 0).to_bytes().unwrap(), bytes);
        let x = Tensor::<f32>::rand_uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(conv.forward(&x).unwrap().0, back.forward(&x).unwrap().0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::from_network(&trained_toy(), 0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v = bytes;
        v[0] = 9;
        assert!(Checkpoint::from_bytes(&v).unwrap_err().to_string().contains("version 9"));
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn atomic_save_replaces_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lkp");
        std::fs::write(&path, b"old").unwrap();
        let ck = Checkpoint::from_network(&trained_toy(), 1);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
