//! Analytical energy and latency model for embedded processors.
//!
//! Each multiply-accumulate of a layer is charged as a pair of operations
//! whose kinds depend on the network family (a float multiply and add for a
//! conventional network, a lookup and an add for a lookup network, ...).
//! Energy and latency are linear in the MAC count; latency assumes a serial,
//! single-issue pipeline. The first and the last MAC layers are excluded,
//! as is batch norm, which folds into the neighbouring layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, MacKind};

/// Reference MAC counts for reproducing published per-network figures.
pub const RESNET20_REFERENCE_MACS: u64 = 39_000_000;
pub const VGG_SMALL_REFERENCE_MACS: u64 = 576_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Processor {
    #[serde(rename = "a7")]
    CortexA7,
    #[serde(rename = "a15")]
    CortexA15,
}

impl Processor {
    pub fn label(self) -> &'static str {
        match self {
            Processor::CortexA7 => "Cortex-A7",
            Processor::CortexA15 => "Cortex-A15",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    FloatAdd,
    FloatMul,
    Add4Bit,
    Mul4Bit,
    Xnor,
    Shift,
    Lookup,
}

impl OpKind {
    pub const ALL: [OpKind; 7] =
        [OpKind::FloatAdd, OpKind::FloatMul, OpKind::Add4Bit, OpKind::Mul4Bit, OpKind::Xnor, OpKind::Shift, OpKind::Lookup];

    fn index(self) -> usize {
        self as usize
    }
}

/// Cost of one operation. Energy may be unknown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub energy_pj: Option<f64>,
    pub latency_cycles: u64,
}

/// Per-processor, per-operation costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCostTable {
    pub a7: [OpCost; 7],
    pub a15: [OpCost; 7],
}

const fn c(energy: f64, latency: u64) -> OpCost {
    OpCost { energy_pj: Some(energy), latency_cycles: latency }
}

const fn no_energy(latency: u64) -> OpCost {
    OpCost { energy_pj: None, latency_cycles: latency }
}

impl Default for OpCostTable {
    fn default() -> Self {
        Self {
            a7: [c(199.0, 4), c(203.0, 4), c(82.0, 1), c(146.0, 3), c(72.0, 1), no_energy(1), c(150.0, 1)],
            a15: [c(1471.0, 5), c(1714.0, 5), c(432.0, 1), c(846.0, 3), c(394.0, 1), no_energy(1), c(452.0, 1)],
        }
    }
}

impl OpCostTable {
    pub fn get(&self, p: Processor, op: OpKind) -> OpCost {
        match p {
            Processor::CortexA7 => self.a7[op.index()],
            Processor::CortexA15 => self.a15[op.index()],
        }
    }
}

/// How a network family realizes one multiply-accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    /// Float multiply + float add.
    Baseline,
    /// Lookup + float add.
    Lookup,
    /// Lookup + 4-bit add.
    #[serde(rename = "lookup-4bit")]
    Lookup4Bit,
    /// Two float adds (l1 distance).
    Adder,
    /// XNOR + float add.
    Bnn,
    /// Shift + float add.
    Shift,
}

impl NetworkKind {
    pub fn op_pair(self) -> (OpKind, OpKind) {
        match self {
            NetworkKind::Baseline => (OpKind::FloatMul, OpKind::FloatAdd),
            NetworkKind::Lookup => (OpKind::Lookup, OpKind::FloatAdd),
            NetworkKind::Lookup4Bit => (OpKind::Lookup, OpKind::Add4Bit),
            NetworkKind::Adder => (OpKind::FloatAdd, OpKind::FloatAdd),
            NetworkKind::Bnn => (OpKind::Xnor, OpKind::FloatAdd),
            NetworkKind::Shift => (OpKind::Shift, OpKind::FloatAdd),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Self::Baseline,
            "lookup" => Self::Lookup,
            "lookup-4bit" => Self::Lookup4Bit,
            "adder" => Self::Adder,
            "bnn" => Self::Bnn,
            "shift" => Self::Shift,
            other => return Err(Error::InvalidArgument(format!("unknown network kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub included: bool,
}

/// MAC workload of a network for one input sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub layers: Vec<LayerCost>,
}

impl CostProfile {
    /// Single-entry profile with a given MAC count.
    pub fn from_macs(name: &str, macs: u64) -> Self {
        Self { layers: vec![LayerCost { name: name.to_string(), macs, included: true }] }
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().filter(|l| l.included).map(|l| l.macs).sum()
    }

    /// Operation count: every MAC is two operations.
    pub fn ops(&self) -> u64 {
        2 * self.macs()
    }

    /// Operations in units of 2^20.
    pub fn ops_mebi(&self) -> f64 {
        self.ops() as f64 / (1u64 << 20) as f64
    }
}

/// Per-layer MACs of `spec`, with the first and last MAC layers excluded.
pub fn count_ops(spec: &ArchSpec) -> Result<CostProfile> {
    let macs = spec.mac_layers()?;
    let last = macs.len().saturating_sub(1);
    Ok(CostProfile {
        layers: macs
            .into_iter()
            .enumerate()
            .map(|(i, m)| LayerCost { name: m.name, macs: m.macs, included: i != 0 && i != last })
            .collect(),
    })
}

/// Natural network kind of an architecture.
pub fn kind_of(spec: &ArchSpec) -> NetworkKind {
    let lookup = spec.mac_layers().map(|m| m.iter().any(|l| l.kind == MacKind::Lookup)).unwrap_or(false);
    if lookup {
        NetworkKind::Lookup
    } else {
        NetworkKind::Baseline
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// `None` when an operation's energy is unknown.
    pub energy_mj: Option<f64>,
    pub latency_cycles: u64,
}

/// Energy and serial latency of `profile` executed as `kind` on `processor`.
pub fn estimate(profile: &CostProfile, kind: NetworkKind, processor: Processor, table: &OpCostTable) -> Estimate {
    let (a, b) = kind.op_pair();
    let (ca, cb) = (table.get(processor, a), table.get(processor, b));
    let macs = profile.macs();
    let energy = match (ca.energy_pj, cb.energy_pj) {
        (Some(x), Some(y)) => Some(macs as f64 * (x + y) * 1e-9),
        _ => None,
    };
    Estimate { energy_mj: energy, latency_cycles: macs * (ca.latency_cycles + cb.latency_cycles) }
}

/// Bytes of one `n_f x n_w` table.
pub fn table_memory(n_f: usize, n_w: usize, bytes_per_entry: usize) -> usize {
    n_f * n_w * bytes_per_entry
}

/// Table storage of a lookup network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMemory {
    pub layers: usize,
    /// One table per layer.
    pub per_layer_bytes: usize,
    /// One table per output channel after batch-norm fusion.
    pub fused_bytes: usize,
}

pub fn network_table_memory(spec: &ArchSpec, bytes_per_entry: usize) -> Result<TableMemory> {
    let Some(st) = &spec.lookup else {
        return Ok(TableMemory { layers: 0, per_layer_bytes: 0, fused_bytes: 0 });
    };
    let one = table_memory(st.n_f, st.n_w, bytes_per_entry);
    let lookups: Vec<_> = spec.mac_layers()?.into_iter().filter(|m| m.kind == MacKind::Lookup).collect();
    Ok(TableMemory {
        layers: lookups.len(),
        per_layer_bytes: lookups.len() * one,
        fused_bytes: lookups.iter().map(|m| m.out_channels * one).sum(),
    })
}

pub fn kib(bytes: usize) -> f64 {
    bytes as f64 / 1024.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, LookupSettings};
    use crate::conv::Geometry;

    fn mj(e: Estimate) -> f64 {
        (e.energy_mj.unwrap() * 10.0).round() / 10.0
    }

    #[test]
    fn defaults_are_positive_except_missing_energy() {
        let t = OpCostTable::default();
        for p in [Processor::CortexA7, Processor::CortexA15] {
            for op in OpKind::ALL {
                let c = t.get(p, op);
                assert!(c.latency_cycles > 0);
                assert_eq!(c.energy_pj.is_none(), op == OpKind::Shift);
                assert!(c.energy_pj.is_none_or(|e| e > 0.0));
            }
        }
    }

    #[test]
    fn single_conv_counts_sixteen_macs() {
        let spec = ArchSpec {
            name: "one".into(),
            input: [1, 4, 4],
            classes: 1,
            layers: vec![LayerSpec::Conv { in_channels: 1, out_channels: 1, geom: Geometry::new(1, 1, 0, 1), bias: false }],
            lookup: None,
        };
        let macs = spec.mac_layers().unwrap();
        assert_eq!(macs[0].macs, 16);
        let p = CostProfile { layers: vec![LayerCost { name: "c".into(), macs: 16, included: true }] };
        assert_eq!(p.ops(), 32);
        // A lone layer is both first and last.
        assert_eq!(count_ops(&spec).unwrap().ops(), 0);
    }

    #[test]
    fn empty_network_costs_nothing() {
        let spec = ArchSpec { name: "e".into(), input: [1, 1, 1], classes: 1, layers: vec![], lookup: None };
        let p = count_ops(&spec).unwrap();
        let e = estimate(&p, NetworkKind::Lookup, Processor::CortexA7, &OpCostTable::default());
        assert_eq!(e.energy_mj, Some(0.0));
        assert_eq!(e.latency_cycles, 0);
    }

    #[test]
    fn published_estimates() {
        let t = OpCostTable::default();
        let r = CostProfile::from_macs("resnet20", RESNET20_REFERENCE_MACS);
        let e = |k, p| estimate(&r, k, p, &t);
        use NetworkKind::*;
        use Processor::*;
        assert_eq!(mj(e(Baseline, CortexA7)), 15.7);
        assert_eq!(e(Baseline, CortexA7).latency_cycles, 312_000_000);
        assert_eq!(mj(e(Baseline, CortexA15)), 124.2);
        assert_eq!(e(Baseline, CortexA15).latency_cycles, 390_000_000);
        assert_eq!(mj(e(Lookup, CortexA7)), 13.6);
        assert_eq!(e(Lookup, CortexA7).latency_cycles, 195_000_000);
        assert_eq!(mj(e(Lookup, CortexA15)), 75.0);
        assert_eq!(e(Lookup, CortexA15).latency_cycles, 234_000_000);
        assert_eq!(mj(e(Lookup4Bit, CortexA7)), 9.0);
        assert_eq!(mj(e(Lookup4Bit, CortexA15)), 34.5);
        assert_eq!(e(Lookup4Bit, CortexA15).latency_cycles, 78_000_000);
        assert_eq!(mj(e(Adder, CortexA7)), 15.5);
        assert_eq!(mj(e(Adder, CortexA15)), 114.7);
        assert_eq!(mj(e(Bnn, CortexA7)), 10.6);
        assert_eq!(mj(e(Bnn, CortexA15)), 72.7);
        assert_eq!(e(Shift, CortexA7).energy_mj, None);
        assert_eq!(e(Shift, CortexA15).latency_cycles, 234_000_000);
        let v = CostProfile::from_macs("vgg", VGG_SMALL_REFERENCE_MACS);
        assert_eq!(mj(estimate(&v, Baseline, CortexA7, &t)), 231.6);
        assert_eq!(estimate(&v, Baseline, CortexA7, &t).latency_cycles, 4_608_000_000);
        assert_eq!(mj(estimate(&v, Baseline, CortexA15, &t)), 1834.6);
    }

    #[test]
    fn estimate_is_linear_in_macs() {
        let t = OpCostTable::default();
        let a = estimate(&CostProfile::from_macs("a", 1000), NetworkKind::Lookup, Processor::CortexA15, &t);
        let b = estimate(&CostProfile::from_macs("b", 3000), NetworkKind::Lookup, Processor::CortexA15, &t);
        assert!((b.energy_mj.unwrap() - 3.0 * a.energy_mj.unwrap()).abs() < 1e-15);
        assert_eq!(b.latency_cycles, 3 * a.latency_cycles);
    }

    #[test]
    fn architecture_op_counts() {
        let r = count_ops(&ArchSpec::resnet20(10, Some(LookupSettings::default()))).unwrap();
        assert_eq!(r.macs(), 40_108_032);
        assert!((r.ops_mebi() - 78.0).abs() / 78.0 <= 0.02, "{}", r.ops_mebi());
        let v = count_ops(&ArchSpec::vgg_small(10, None)).unwrap();
        assert_eq!(v.ops_mebi(), 1152.0);
    }

    #[test]
    fn table_memory_examples() {
        assert!((kib(table_memory(33, 33, 4)) - 4.2).abs() / 4.2 <= 0.05);
        assert!((kib(table_memory(17, 17, 4)) - 1.1).abs() / 1.1 <= 0.05);
        assert!((kib(table_memory(65, 65, 4)) - 16.5).abs() / 16.5 <= 0.05);
        assert_eq!(table_memory(1, 1, 3), 3);
        let m = network_table_memory(&ArchSpec::resnet20(10, Some(LookupSettings::default())), 2).unwrap();
        assert_eq!(m.layers, 18);
        assert_eq!(m.per_layer_bytes, 18 * 33 * 33 * 2);
        assert_eq!(m.fused_bytes, (6 * 16 + 6 * 32 + 6 * 64) * 33 * 33 * 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn estimates_are_linear_in_macs(a in 0u64..1_000_000_000, b in 0u64..1_000_000_000) {
                let t = OpCostTable::default();
                for kind in [NetworkKind::Baseline, NetworkKind::Lookup, NetworkKind::Lookup4Bit, NetworkKind::Adder, NetworkKind::Bnn] {
                    for p in [Processor::CortexA7, Processor::CortexA15] {
                        let ea = estimate(&CostProfile::from_macs("a", a), kind, p, &t);
                        let eb = estimate(&CostProfile::from_macs("b", b), kind, p, &t);
                        let ab = estimate(&CostProfile::from_macs("ab", a + b), kind, p, &t);
                        prop_assert_eq!(ab.latency_cycles, ea.latency_cycles + eb.latency_cycles);
                        let (x, y, z) = (ea.energy_mj.unwrap(), eb.energy_mj.unwrap(), ab.energy_mj.unwrap());
                        prop_assert!((z - x - y).abs() <= 1e-9 * z.max(1.0));
                    }
                }
            }
        }
    }
}
