use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lookupnet::checkpoint::{write_atomic, Checkpoint};
use lookupnet::config::RunConfig;
use lookupnet::cost::{
    count_ops, estimate, kib, kind_of, network_table_memory, CostProfile, Estimate, OpCostTable, Processor,
    RESNET20_REFERENCE_MACS, VGG_SMALL_REFERENCE_MACS,
};
use lookupnet::experiment::{init_seed, verify_table_gradients};
use lookupnet::lookup::weight_index;
use lookupnet::nn::{ArchSpec, LookupSettings, Network};
use lookupnet::reparam::{compare, convert_model, ConvertedNetwork, Model};
use lookupnet::tensor::Tensor;
use lookupnet::train::{evaluate, train};

const EQUIVALENCE_TOLERANCE: f64 = 1e-4;
const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "lookupnet", version, about = "Train, convert and cost lookup-table networks")]
struct Cli {
    /// Seed override (training) or seed of random probe inputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Verify table gradients against finite differences in 64-bit after training.
        #[arg(long)]
        f64_check: bool,
    },
    /// Accuracy of a trained or converted model on the configured test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a trained model into its multiplication-free form.
    Reparam {
        #[arg(long)]
        model: PathBuf,
        /// Random inputs used for the equivalence check.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Operation count, energy and latency estimate.
    Cost {
        #[arg(long, required_unless_present = "arch", conflicts_with = "arch")]
        model: Option<PathBuf>,
        /// Architecture name instead of a model file.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, value_enum)]
        processor: Option<Proc>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Dump a lookup layer's sub-tables, table and weight-index histogram as CSV.
    InspectTable {
        #[arg(long)]
        model: PathBuf,
        /// Layer name or position among the lookup layers.
        #[arg(long)]
        layer: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Proc {
    A7,
    A15,
}

impl From<Proc> for Processor {
    fn from(p: Proc) -> Self {
        match p {
            Proc::A7 => Processor::CortexA7,
            Proc::A15 => Processor::CortexA15,
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use lookupnet::error::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config(_)) => "config",
        Some(E::Dataset { .. }) => "dataset",
        Some(E::Conversion { .. }) => "conversion",
        Some(E::Checkpoint(_)) => "checkpoint",
        Some(E::Diverged(_)) => "diverged",
        Some(E::Io(_)) => "io",
        Some(_) => "library",
        None => "command",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", json!({ "error": error_kind(&e), "message": message }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match cli.command {
        Command::Train { config, f64_check } => cmd_train(&config, cli.seed, &cli.out, f64_check),
        Command::Eval { model, config } => cmd_eval(&model, &config),
        Command::Reparam { model, samples } => cmd_reparam(&model, samples, cli.seed.unwrap_or(0), &cli.out),
        Command::Cost { model, arch, processor, classes } => cmd_cost(model.as_deref(), arch.as_deref(), processor, classes, &cli.out),
        Command::InspectTable { model, layer } => cmd_inspect(&model, &layer, &cli.out),
    }
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> lookupnet::error::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path, f64_check: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = cfg.arch()?;
    let data = cfg.data.load::<f32>(spec.input, cfg.seed)?;
    let mut net = Network::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(init_seed(cfg.seed)))?;
    let log = train(&mut net, &data.train, Some(&data.test), &cfg.train, cfg.seed, &mut |m| {
        log::info!("epoch {} train {:.4} test {:?}", m.epoch, m.train_accuracy, m.test_accuracy)
    })?;

    let model_path = out.join("model.lkp");
    Checkpoint::from_network(&net, log.steps.len() as u64).save(&model_path)?;
    write_atomic(&out.join("metrics.csv"), &csv_bytes(|b| log.write_csv(b))?)?;
    write_atomic(&out.join("steps.csv"), &csv_bytes(|b| log.write_steps_csv(b))?)?;
    write_atomic(&out.join("run.toml"), cfg.to_toml()?.as_bytes())?;

    let mut summary = json!({
        "model": model_path,
        "epochs": log.epochs.len(),
        "train_accuracy": log.final_train_accuracy(),
        "test_accuracy": log.final_test_accuracy(),
        "scales_positive": log.scales_positive(),
    });
    if f64_check {
        let wide = net.cast::<f64>();
        let n = wide.lookup_layers().len();
        if n > 0 {
            let layers: Vec<usize> = if n == 1 { vec![0] } else { vec![0, n - 1] };
            let r = verify_table_gradients(&wide, &layers, cfg.seed)?;
            summary["f64_check"] = json!({ "checked": r.checked, "max_rel_error": r.max_rel_error });
            if r.max_rel_error > GRADIENT_TOLERANCE {
                bail!("64-bit gradient check failed: max relative error {:.3e} over {} entries", r.max_rel_error, r.checked);
            }
        }
    }
    println!("{summary}");
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.into_model()?)
}

fn converted_accuracy(conv: &ConvertedNetwork<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    let n = labels.len();
    for start in (0..n).step_by(256) {
        let rows: Vec<usize> = (start..n.min(start + 256)).collect();
        let (out, _) = conv.forward(&images.gather_rows(&rows))?;
        correct += out.argmax_rows()?.iter().zip(&labels[start..]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / n.max(1) as f64)
}

fn cmd_eval(model: &Path, config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(model)?;
    let input = match &model {
        Model::Trained(n) => n.spec.input,
        Model::Converted(c) => c.input,
    };
    let data = cfg.data.load::<f32>(input, cfg.seed)?;
    let summary = match &model {
        Model::Trained(net) => {
            let (loss, acc) = evaluate(net, &data.test, 256)?;
            json!({ "form": "trained", "samples": data.test.len(), "loss": loss, "accuracy": acc })
        }
        Model::Converted(conv) => {
            let acc = converted_accuracy(conv, &data.test.images, &data.test.labels)?;
            json!({ "form": "converted", "samples": data.test.len(), "accuracy": acc })
        }
    };
    println!("{summary}");
    Ok(())
}

fn cmd_reparam(model: &Path, samples: usize, seed: u64, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let (conv, report) = convert_model(&model)?;
    let Model::Trained(net) = &model else { unreachable!("conversion accepts trained models only") };
    let [c, h, w] = net.spec.input;
    let inputs = Tensor::<f32>::randn(&[samples.max(1), c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let eq = compare(net, &conv, &inputs)?;
    let (_, audit) = conv.forward(&inputs)?;

    let path = out.join("converted.lkp");
    Checkpoint::from_converted(&conv, 0).save(&path)?;
    let Model::Converted(reloaded) = load_model(&path)? else { bail!("converted file did not reload as converted") };
    let reload_exact = reloaded.forward(&inputs)?.0 == conv.forward(&inputs)?.0;

    let full = json!({
        "arch": conv.arch,
        "layers": report.layers,
        "notices": report.notices,
        "table_bytes": report.table_bytes(),
        "fused_table_bytes": report.fused_table_bytes(),
        "equivalence": {
            "samples": eq.samples,
            "max_abs_diff": eq.max_abs_diff,
            "argmax_agree": eq.argmax_agree,
            "tolerance": EQUIVALENCE_TOLERANCE,
            "pass": eq.max_abs_diff <= EQUIVALENCE_TOLERANCE,
        },
        "ops": audit,
        "reload_exact": reload_exact,
    });
    write_atomic(&out.join("conversion.json"), serde_json::to_string_pretty(&full)?.as_bytes())?;
    println!(
        "{}",
        json!({
            "converted": path,
            "layers": report.layers.len(),
            "fused_table_kib": kib(report.fused_table_bytes()),
            "max_abs_diff": eq.max_abs_diff,
            "equivalent": eq.max_abs_diff <= EQUIVALENCE_TOLERANCE,
            "muls": audit.segment.muls,
            "lookups": audit.segment.lookups,
        })
    );
    Ok(())
}

fn reference_macs(arch: &str) -> Option<u64> {
    if arch.starts_with("resnet20") {
        Some(RESNET20_REFERENCE_MACS)
    } else if arch.starts_with("vggsmall") {
        Some(VGG_SMALL_REFERENCE_MACS)
    } else {
        None
    }
}

fn millions(v: f64) -> String {
    let m = v / 1e6;
    if (m - m.round()).abs() < 1e-9 {
        format!("{m:.0}M")
    } else {
        format!("{m:.1}M")
    }
}

fn energy(e: &Estimate) -> String {
    e.energy_mj.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

fn cmd_cost(model: Option<&Path>, arch: Option<&str>, processor: Option<Proc>, classes: usize, out: &Path) -> Result<()> {
    let spec = match (model, arch) {
        (Some(m), _) => match load_model(m)? {
            Model::Trained(n) => n.spec,
            Model::Converted(c) => ArchSpec::by_name(&c.arch, c.classes, &LookupSettings::default())?,
        },
        (None, Some(a)) => ArchSpec::by_name(a, classes, &LookupSettings::default())?,
        (None, None) => bail!("either --model or --arch is required"),
    };
    let procs: Vec<Processor> = match processor {
        Some(p) => vec![p.into()],
        None => vec![Processor::CortexA7, Processor::CortexA15],
    };
    let table = OpCostTable::default();
    let kind = kind_of(&spec);
    let profile = count_ops(&spec)?;
    let mem = network_table_memory(&spec, 4)?;

    let mut rows: Vec<(&str, CostProfile, String)> = vec![("computed", profile.clone(), format!("{:.1}Mi", profile.ops_mebi()))];
    if let Some(m) = reference_macs(&spec.name) {
        let p = CostProfile::from_macs("reference", m);
        let ops = millions(p.ops() as f64);
        rows.push(("reference", p, ops));
    }
    let mut text = String::new();
    write!(text, "{:<10} {:<20} {:<8} {:>9} {:>11} {:>11}", "workload", "arch", "method", "ops", "tables(KiB)", "fused(KiB)")?;
    for p in &procs {
        write!(text, " {:>16} {:>16}", format!("energy-{}(mJ)", p.label()), format!("latency-{}", p.label()))?;
    }
    text.push('\n');
    let method = format!("{kind:?}").to_lowercase();
    for (label, p, ops) in &rows {
        write!(
            text,
            "{label:<10} {:<20} {method:<8} {ops:>9} {:>11.1} {:>11.1}",
            spec.name,
            kib(mem.per_layer_bytes),
            kib(mem.fused_bytes)
        )?;
        for &pr in &procs {
            let e = estimate(p, kind, pr, &table);
            write!(text, " {:>16} {:>16}", energy(&e), millions(e.latency_cycles as f64))?;
        }
        text.push('\n');
    }
    print!("{text}");

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["layer".to_string(), "macs".into(), "included".into()];
    for p in &procs {
        header.push(format!("energy_mj_{}", p.label()));
        header.push(format!("latency_cycles_{}", p.label()));
    }
    w.write_record(&header)?;
    for l in &profile.layers {
        let mut rec = vec![l.name.clone(), l.macs.to_string(), l.included.to_string()];
        let one = CostProfile::from_macs(&l.name, if l.included { l.macs } else { 0 });
        for &pr in &procs {
            let e = estimate(&one, kind, pr, &table);
            rec.push(e.energy_mj.map_or_else(String::new, |v| v.to_string()));
            rec.push(e.latency_cycles.to_string());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    write_atomic(&out.join("cost_layers.csv"), &bytes)?;
    Ok(())
}

/// Whether counts fall off monotonically on both sides of their mode.
fn unimodal(hist: &[u64]) -> (bool, usize) {
    let mode = (0..hist.len()).max_by_key(|&i| (hist[i], std::cmp::Reverse(i))).unwrap_or(0);
    let left = hist[..=mode].windows(2).all(|w| w[0] <= w[1]);
    let right = hist[mode..].windows(2).all(|w| w[0] >= w[1]);
    (left && right, mode)
}

fn cmd_inspect(model: &Path, layer: &str, out: &Path) -> Result<()> {
    let Model::Trained(net) = load_model(model)? else { bail!("inspect-table needs a trained model") };
    let lookups = net.lookup_layers();
    let l = match layer.parse::<usize>() {
        Ok(i) => lookups.get(i).copied(),
        Err(_) => lookups.iter().find(|l| l.name == layer).copied(),
    }
    .ok_or_else(|| anyhow!("no lookup layer `{layer}` (the network has {} lookup layers)", lookups.len()))?;
    let table = net.table(l)?;
    let (s_w, _) = net.scales(l);
    let n_w = table.n_w();
    let mut hist = vec![0u64; n_w];
    for &w in net.params[l.weight].value.data() {
        hist[weight_index(w, s_w, n_w)] += 1;
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["section", "i", "j", "value"])?;
    for (i, v) in table.feature.iter().enumerate() {
        w.write_record(["t_f", &i.to_string(), "", &v.to_string()])?;
    }
    for (j, v) in table.weight.iter().enumerate() {
        w.write_record(["t_w", "", &j.to_string(), &v.to_string()])?;
    }
    for (k, v) in table.materialize().iter().enumerate() {
        w.write_record(["t", &(k / n_w).to_string(), &(k % n_w).to_string(), &v.to_string()])?;
    }
    for (j, c) in hist.iter().enumerate() {
        w.write_record(["histogram", "", &j.to_string(), &c.to_string()])?;
    }
    let path = out.join(format!("table-{}.csv", l.name));
    write_atomic(&path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;

    let (uni, mode) = unimodal(&hist);
    let centered = mode.abs_diff(table.center()) <= n_w / 4;
    if !(uni && centered) {
        log::warn!("weight-index histogram of {} is not unimodal around the center (mode {mode})", l.name);
    }
    println!(
        "{}",
        json!({
            "csv": path,
            "layer": l.name,
            "weights": hist.iter().sum::<u64>(),
            "mode": mode,
            "center": table.center(),
            "unimodal": uni && centered,
        })
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unimodality() {
        assert_eq!(unimodal(&[0, 1, 5, 2, 0]), (true, 2));
        assert!(!unimodal(&[3, 1, 5, 2, 0]).0);
        assert_eq!(millions(195e6), "195M");
        assert_eq!(millions(200.54e6), "200.5M");
    }
}
