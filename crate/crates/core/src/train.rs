//! Mini-batch SGD training with momentum, weight decay, global gradient-norm
//! clipping and a step learning-rate schedule.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment, batch_order, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Mode, Network, Param};
use crate::tensor::{Scalar, Tensor};

/// Learning rate `initial * factor^k` after the `k`-th milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub factor: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, milestones: Vec::new(), factor: default_decay() }
    }

    /// Rate used during zero-based `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Maximum global L2 norm of the gradient; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub augment: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_clip() -> Option<f64> {
    Some(3.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            schedule: LrSchedule { initial: 0.1, milestones: vec![12, 24], factor: 0.1 },
            momentum: default_momentum(),
            weight_decay: 5e-4,
            clip_norm: default_clip(),
            augment: true,
        }
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `d = g + wd * p`, `v = m * v + d` (`v = d` on the first step), `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::from_f64_lossy(momentum), weight_decay: T::from_f64_lossy(weight_decay), buffers: vec![None; params] }
    }

    pub fn buffer(&self, i: usize) -> Option<&Tensor<T>> {
        self.buffers.get(i).and_then(Option::as_ref)
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<Tensor<T>>], lr: T) -> Result<()> {
        if params.len() != self.buffers.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.buffers.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            p.value.expect_same_shape(g)?;
            let wd = if p.kind.decays() { self.weight_decay } else { T::zero() };
            let d: Vec<T> = g.data().iter().zip(p.value.data()).map(|(&g, &w)| g + wd * w).collect();
            let buf = match self.buffers[i].take() {
                Some(mut b) => {
                    for (v, &d) in b.data_mut().iter_mut().zip(&d) {
                        *v = self.momentum * *v + d;
                    }
                    b
                }
                None => Tensor::new(g.shape().to_vec(), d)?,
            };
            for (w, &v) in p.value.data_mut().iter_mut().zip(buf.data()) {
                *w -= lr * v;
            }
            self.buffers[i] = Some(buf);
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads.iter().flatten().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norms before and after clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> (f64, f64) {
    let pre = global_norm(grads);
    if pre <= max_norm || pre == 0.0 {
        return (pre, pre);
    }
    let k = T::from_f64_lossy(max_norm / pre);
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v *= k;
        }
    }
    (pre, global_norm(grads))
}

/// Per-layer `(s_w, s_f)` of a network's lookup layers.
pub fn layer_scales<T: Scalar>(net: &Network<T>) -> Vec<(f64, f64)> {
    net.lookup_layers()
        .into_iter()
        .map(|l| {
            let (w, f) = net.scales(l);
            (w.as_f64(), f.as_f64())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Scales after the update.
    pub scales: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub scales: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub layer_names: Vec<String>,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }

    /// Whether every recorded scale stayed strictly positive.
    pub fn scales_positive(&self) -> bool {
        self.steps.iter().flat_map(|s| &s.scales).chain(self.epochs.iter().flat_map(|e| &e.scales)).all(|&(w, f)| w > 0.0 && f > 0.0)
    }

    /// Per-epoch metrics as CSV, one `s_w`/`s_f` column pair per lookup layer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["epoch", "lr", "train_loss", "train_accuracy", "test_loss", "test_accuracy"].map(String::from).to_vec();
        for name in &self.layer_names {
            header.push(format!("s_w:{name}"));
            header.push(format!("s_f:{name}"));
        }
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.train_accuracy.to_string(),
                opt(e.test_loss),
                opt(e.test_accuracy),
            ];
            for (sw, sf) in &e.scales {
                row.push(sw.to_string());
                row.push(sf.to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-step loss, gradient norms and scales as CSV.
    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["epoch", "step", "loss", "grad_norm", "clipped_norm"].map(String::from).to_vec();
        for name in &self.layer_names {
            header.push(format!("s_w:{name}"));
            header.push(format!("s_f:{name}"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.steps {
            let mut row =
                vec![s.epoch.to_string(), s.step.to_string(), s.loss.to_string(), s.grad_norm.to_string(), s.clipped_norm.to_string()];
            for (sw, sf) in &s.scales {
                row.push(sw.to_string());
                row.push(sf.to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Mean loss and accuracy of the network in evaluation mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let b = data.select(chunk);
        let mut g = Graph::new();
        let x = g.constant(b.images)?;
        let pass = net.forward(&mut g, x, Mode::Eval)?;
        let l = g.cross_entropy(pass.output, &b.labels)?;
        loss += g.value(l).item().as_f64() * chunk.len() as f64;
        correct += count_correct(g.value(pass.output), &b.labels)?;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    Ok(logits.argmax_rows()?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

fn diverged<T: Scalar>(net: &Network<T>, epoch: usize, step: usize, last_norm: f64, cause: &str) -> Error {
    let scales: Vec<String> = layer_scales(net).iter().map(|(w, f)| format!("({w:.4e},{f:.4e})")).collect();
    Error::Diverged(format!(
        "{cause} at epoch {epoch} step {step}; last gradient norm {last_norm:.4e}; scales (s_w,s_f) [{}]",
        scales.join(" ")
    ))
}

/// Trains `net` in place. `seed` fixes batch order and augmentation; the
/// observer sees every finished epoch.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &Dataset<T>,
    test_set: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainLog> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::<T>::new(net.params.len(), cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog { layer_names: net.lookup_layers().iter().map(|l| l.name.clone()).collect(), ..TrainLog::default() };
    let mut last_norm = 0.0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, rows) in batch_order(train_set.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let batch = train_set.select(&rows);
            let images = if cfg.augment { augment(&batch.images, &mut rng)? } else { batch.images };
            let mut g = Graph::new();
            let x = g.constant(images)?;
            let outcome = (|| {
                let pass = net.forward(&mut g, x, Mode::Train)?;
                let l = g.cross_entropy(pass.output, &batch.labels)?;
                let grads = g.backward(l)?;
                Ok::<_, Error>((pass, l, grads))
            })();
            let (pass, l, mut grads) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => return Err(diverged(net, epoch, step, last_norm, &format!("non-finite {what}"))),
                Err(e) => return Err(e),
            };
            let loss = g.value(l).item().as_f64();
            if !loss.is_finite() {
                return Err(diverged(net, epoch, step, last_norm, &format!("loss is {loss}")));
            }
            let mut param_grads: Vec<Option<Tensor<T>>> =
                pass.param_vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect();
            let (pre, post) = match cfg.clip_norm {
                Some(max) => clip_global_norm(&mut param_grads, max),
                None => {
                    let n = global_norm(&param_grads);
                    (n, n)
                }
            };
            if !pre.is_finite() {
                return Err(diverged(net, epoch, step, last_norm, "non-finite gradient"));
            }
            last_norm = pre;
            correct += count_correct(g.value(pass.output), &batch.labels)?;
            net.commit(pass.updates);
            opt.step(&mut net.params, &param_grads, T::from_f64_lossy(lr))?;
            loss_sum += loss * rows.len() as f64;
            seen += rows.len();
            log.steps.push(StepRecord { epoch, step, loss, grad_norm: pre, clipped_norm: post, scales: layer_scales(net) });
        }
        let (test_loss, test_accuracy) = match test_set {
            Some(t) => {
                let (l, a) = evaluate(net, t, cfg.batch_size.max(256))?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_loss,
            test_accuracy,
            scales: layer_scales(net),
        };
        log::info!(
            "epoch {epoch} lr {lr} loss {:.4} acc {:.4} test {:?}",
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy
        );
        observer(&m);
        log.epochs.push(m);
    }
    Ok(log)
}
