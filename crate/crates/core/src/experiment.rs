//! Paired training runs, ablation sweeps and the gradient-balance measurement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, Splits, Variant};
use crate::conv::Geometry;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use crate::lookup::{init_scales, lookup_conv_backward, LookupConfig, ScaleMode, SteRule};
use crate::lut::LookupTable;
use crate::nn::{ArchSpec, Network, ParamKind, TableParams};
use crate::tensor::{Scalar, Tensor};
use crate::train::{train, TrainLog};

/// Seed for parameter initialization; the data order uses the run seed itself.
pub fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub arch: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub log: TrainLog,
}

/// Trains `spec` from scratch on `data` with the recipe of `cfg`.
pub fn run<T: Scalar>(spec: ArchSpec, cfg: &RunConfig, data: &Splits<T>, seed: u64) -> Result<(Network<T>, RunResult)> {
    let mut net = Network::<T>::new(spec, &mut ChaCha8Rng::seed_from_u64(init_seed(seed)))?;
    let log = train(&mut net, &data.train, Some(&data.test), &cfg.train, seed, &mut |_| {})?;
    let result = RunResult {
        arch: net.spec.name.clone(),
        seed,
        test_accuracy: log.final_test_accuracy().unwrap_or(0.0),
        log,
    };
    Ok((net, result))
}

/// Name of the conv baseline that shares a lookup architecture's topology.
pub fn baseline_name(arch: &str) -> String {
    match arch.strip_suffix("-lookup") {
        Some(stem) => format!("{stem}-baseline"),
        None if arch.ends_with("-baseline") => arch.to_string(),
        None => format!("{arch}-baseline"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Parity {
    pub lookup: RunResult,
    pub baseline: RunResult,
}

impl Parity {
    /// Baseline minus lookup test accuracy, in percentage points.
    pub fn gap_points(&self) -> f64 {
        100.0 * (self.baseline.test_accuracy - self.lookup.test_accuracy)
    }
}

/// Lookup network against its conv twin under one seed and recipe.
pub fn parity<T: Scalar>(cfg: &RunConfig, data: &Splits<T>) -> Result<Parity> {
    let lookup_spec = cfg.arch()?;
    let base_spec = ArchSpec::by_name(&baseline_name(&cfg.model.arch), cfg.data.classes, &cfg.strategy.settings())?;
    let (_, lookup) = run(lookup_spec, cfg, data, cfg.seed)?;
    let (_, baseline) = run(base_spec, cfg, data, cfg.seed)?;
    Ok(Parity { lookup, baseline })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub accuracies: Vec<f64>,
    pub median: f64,
    /// Whether every recorded scale stayed positive in every run.
    pub scales_positive: bool,
    /// Runs that aborted on divergence, counted at chance accuracy.
    pub diverged: usize,
}

/// Trains every variant under every seed. A diverged run scores `1 / classes`.
pub fn ablation<T: Scalar>(cfg: &RunConfig, data: &Splits<T>, variants: &[Variant], seeds: &[u64]) -> Result<Vec<VariantResult>> {
    let chance = 1.0 / cfg.data.classes.max(1) as f64;
    variants
        .iter()
        .map(|&v| {
            let c = cfg.with_variant(v);
            let (mut acc, mut positive, mut diverged) = (Vec::new(), true, 0);
            for &seed in seeds {
                match run(c.arch()?, &c, data, seed) {
                    Ok((_, r)) => {
                        positive &= r.log.scales_positive();
                        acc.push(r.test_accuracy);
                    }
                    Err(Error::Diverged(msg)) => {
                        log::warn!("{} seed {seed} diverged: {msg}", v.label());
                        diverged += 1;
                        acc.push(chance);
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(VariantResult { variant: v, median: median(&acc), accuracies: acc, scales_positive: positive, diverged })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Balance {
    /// max/min over hit cells of the mean absolute weight-cell gradient.
    pub raw_ratio: f64,
    pub rescaled_ratio: f64,
    pub hit_cells: usize,
}

impl Balance {
    pub fn reduction(&self) -> f64 {
        self.raw_ratio / self.rescaled_ratio
    }
}

fn spread(sums: &[f64], hit: &[bool]) -> f64 {
    let v: Vec<f64> = sums.iter().zip(hit).filter(|(_, &h)| h).map(|(s, _)| *s).collect();
    let max = v.iter().copied().fold(0.0, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// Per-cell gradient imbalance of one lookup layer fed bell-shaped weights
/// (Gaussian, scale set to three deviations) over `trials` batches.
pub fn gradient_balance(n: usize, trials: usize, seed: u64) -> Result<Balance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::new(3, 1, 1, 1);
    let table = LookupTable::<f64>::uniform(n, n)?;
    let cfg = LookupConfig { geom, scale_mode: ScaleMode::Exponential, ste: SteRule::SubTableIdentity, rescale: true };
    let mut raw = vec![0.0; n];
    let mut scaled = vec![0.0; n];
    let mut hit = vec![false; n];
    for _ in 0..trials {
        let x = Tensor::<f64>::rand_uniform(&[4, 8, 8, 8], 0.0, 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[16, 8, 3, 3], 0.1, &mut rng);
        let b = Tensor::<f64>::zeros(&[16]);
        let scales = init_scales(w.data(), x.data(), ScaleMode::Exponential);
        let g = Tensor::<f64>::ones(&[4, 16, 8, 8]);
        let gr = lookup_conv_backward(&x, &w, &b, scales, &table, cfg, &g)?;
        for j in 0..n {
            raw[j] += gr.raw_weight_cells[j].abs();
            scaled[j] += gr.weight_cells[j].abs();
            hit[j] |= gr.counts.weight[j] > 0 && gr.raw_weight_cells[j] != 0.0;
        }
    }
    Ok(Balance { raw_ratio: spread(&raw, &hit), rescaled_ratio: spread(&scaled, &hit), hit_cells: hit.iter().filter(|&&h| h).count() })
}

/// Finite-difference check of the trainable table parameters of the selected
/// lookup layers (by evaluation order). Each layer runs on its own stored
/// weights and scales, with re-scaling off, over a random in-range input and
/// a fixed random linear loss, so indices stay frozen under perturbation.
pub fn verify_table_gradients(net: &Network<f64>, layers: &[usize], seed: u64) -> Result<GradCheckReport> {
    let mut net = net.clone();
    match net.spec.lookup.as_mut() {
        Some(s) => s.rescale = false,
        None => return Err(Error::InvalidArgument("network has no lookup layers".into())),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lookups = net.lookup_layers();
    let mut total = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for &i in layers {
        let l = lookups.get(i).ok_or_else(|| Error::InvalidArgument(format!("no lookup layer {i}")))?;
        let ids: Vec<usize> = match l.table {
            TableParams::Cumulative { feature, neg, pos } => vec![feature, neg, pos],
            TableParams::Independent { feature, weight } => vec![feature, weight],
        }
        .into_iter()
        .filter(|&id| net.params[id].trainable && net.params[id].kind == ParamKind::Table)
        .collect();
        if ids.is_empty() {
            continue;
        }
        let ci = net.params[l.weight].value.shape()[1];
        let (_, s_f) = net.scales(l);
        let x = Tensor::<f64>::rand_uniform(&[2, ci, 5, 5], 0.0, 1.1 * s_f.abs(), &mut rng);
        let probe = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone())?;
            let y = net.lookup_forward(&mut g, l, xv, &[])?;
            g.value(y).shape().to_vec()
        };
        let r = Tensor::<f64>::randn(&probe, 1.0, &mut rng);
        let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| net.params[id].value.clone()).collect();
        let report = check_gradients(&inputs, GradCheck::default(), |g, vars| {
            let xv = g.constant(x.clone())?;
            let bound: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let y = net.lookup_forward(g, l, xv, &bound)?;
            let rv = g.constant(r.clone())?;
            let prod = g.mul(y, rv)?;
            g.sum(prod)
        })?;
        total.checked += report.checked;
        if report.max_rel_error >= total.max_rel_error {
            total.max_rel_error = report.max_rel_error;
            total.worst = report.worst;
        }
    }
    Ok(total)
}
