//! Mini-batch optimization of the joint objective with AdamW and a step
//! learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Mode;
use crate::entropy::EntropyConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig, ModelParams, ObjectiveSettings};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub conn_weight: f64,
    pub mi_weight: f64,
    pub tau: f64,
    pub entropy: EntropyConfig,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_decay: 0.5,
            lr_decay_every: 50,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 350,
            conn_weight: 0.001,
            mi_weight: 0.1,
            tau: 1.0,
            entropy: EntropyConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("lr_decay", self.lr_decay), ("tau", self.tau)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("conn_weight", self.conn_weight),
            ("mi_weight", self.mi_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 (the MI term needs two samples)"));
        }
        self.entropy.validate()?;
        self.model.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            conn_weight: self.conn_weight,
            mi_weight: self.mi_weight,
            tau: self.tau,
            entropy: self.entropy,
            sigma_override: None,
        }
    }
}

/// Seeded generator for one purpose; streams never overlap.
pub fn rng_stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Gumbel = 2,
    Dropout = 3,
    Split = 4,
}

pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    pub gumbel: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            shuffle: rng_stream(seed, Stream::Shuffle),
            gumbel: rng_stream(seed, Stream::Gumbel),
            dropout: rng_stream(seed, Stream::Dropout),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams<DMatrix<f64>>) -> Self {
        let zeros: Vec<DMatrix<f64>> = params
            .leaves()
            .into_iter()
            .map(|(_, m, _)| DMatrix::zeros(m.nrows(), m.ncols()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<DMatrix<f64>>, grads: &[DMatrix<f64>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        params.for_each_mut(&mut |_, p, kind| {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if kind.decays() {
                *p *= 1.0 - lr * weight_decay;
            }
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub ce: f64,
    pub con: f64,
    pub mi: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} loss is {v}")))
    }
}

/// Objective value and gradient per parameter (canonical order) for one
/// batch, with fixed noise.
pub fn objective_gradients(
    model: &Model,
    batch: &[&Graph],
    noise: Option<&crate::model::BatchNoise>,
    settings: &ObjectiveSettings,
) -> Result<(StepReport, Vec<DMatrix<f64>>, Vec<[crate::tape::BatchStats; 2]>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let pass = model.forward(&mut tape, &bound, batch, noise, Mode::Train, settings)?;
    let report = StepReport {
        total: finite("total", tape.scalar(pass.total))?,
        ce: finite("cross-entropy", tape.scalar(pass.ce))?,
        con: finite("connectivity", tape.scalar(pass.con))?,
        mi: finite("mutual-information", tape.scalar(pass.mi))?,
    };
    let grads = tape.backward(pass.total);
    let mut out = Vec::new();
    for ((name, var, _), (_, value, _)) in bound.leaves().into_iter().zip(model.params.leaves()) {
        let g = grads.get_or_zeros(var, value.shape());
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        out.push(g);
    }
    Ok((report, out, pass.sub_stats))
}

/// One AdamW update on `batch`. Returns the loss components before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&Graph],
    cfg: &TrainConfig,
    lr: f64,
    rngs: &mut TrainRngs,
) -> Result<StepReport> {
    if batch.len() < 2 {
        return Err(Error::invalid("training batches need at least 2 graphs"));
    }
    let noise = model.draw_noise(batch.len(), &mut rngs.gumbel, &mut rngs.dropout);
    let (report, grads, stats) = objective_gradients(model, batch, Some(&noise), &cfg.objective())?;
    opt.step(&mut model.params, &grads, lr, cfg.weight_decay);
    model.update_running_stats(&stats);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_con: f64,
    pub mi_bits: f64,
    pub acc_train: f64,
    pub acc_val: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss_total,loss_ce,loss_con,mi_bits,acc_train,acc_val,lr";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.loss_total, r.loss_ce, r.loss_con, r.mi_bits, r.acc_train, r.acc_val, r.lr
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters at the best validation accuracy.
    pub model: Model,
    pub log: TrainLog,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
}

/// Splits shuffled indices into batches, folding a trailing singleton into
/// the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

pub fn fit(train: &[&Graph], val: &[&Graph], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training split needs at least 2 graphs"));
    }
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let n_rois = train[0].n_nodes();
    let mut model = Model::init(cfg.model, n_rois, &mut rng_stream(cfg.seed, Stream::Init))?;
    let mut opt = AdamW::new(&model.params);
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rngs.shuffle);
        let mut sums = [0.0; 4];
        for idx in batches(&order, cfg.batch_size) {
            let batch: Vec<&Graph> = idx.iter().map(|&i| train[i]).collect();
            let r = train_step(&mut model, &mut opt, &batch, cfg, lr, &mut rngs)
                .map_err(|e| annotate(e, epoch))?;
            let w = batch.len() as f64 / train.len() as f64;
            sums[0] += w * r.total;
            sums[1] += w * r.ce;
            sums[2] += w * r.con;
            sums[3] += w * r.mi;
        }
        let acc_train = model.accuracy(train)?;
        let acc_val = model.accuracy(val)?;
        log.epochs.push(EpochRecord {
            epoch,
            loss_total: sums[0],
            loss_ce: sums[1],
            loss_con: sums[2],
            mi_bits: sums[3],
            acc_train,
            acc_val,
            lr,
        });
        log::debug!("epoch {epoch}: loss {:.4} val acc {acc_val:.3}", sums[0]);
        if best.as_ref().is_none_or(|(b, _, _)| acc_val > *b) {
            best = Some((acc_val, epoch, model.clone()));
        }
    }

    Ok(match best {
        Some((acc, epoch, best_model)) => FitResult {
            model: best_model,
            log,
            best_epoch: Some(epoch),
            best_val_acc: Some(acc),
        },
        None => FitResult {
            model,
            log,
            best_epoch: None,
            best_val_acc: None,
        },
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at epoch {epoch}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::graph::{generate_synthetic, Dataset, SyntheticConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 3,
            model: ModelConfig {
                encoder: EncoderConfig {
                    hidden: 8,
                    layers: 2,
                    pool_dim: 3,
                    dropout: 0.5,
                },
                gen_hidden: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn data(n_per_class: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_rois: 6,
            n_per_class,
            planted_edges: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_halves_every_fifty_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(49), 0.001);
        assert_eq!(cfg.lr_at(50), 0.0005);
        assert_eq!(cfg.lr_at(100), 0.00025);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { conn_weight: -1.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig {
                entropy: EntropyConfig {
                    renyi_alpha: 1.0,
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn batching_merges_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let ds = data(2);
        let model = Model::init(tiny_config().model, 6, &mut rng_stream(0, Stream::Init)).unwrap();
        let mut params = model.params.clone();
        let grads: Vec<DMatrix<f64>> = params.leaves().into_iter().map(|(_, m, _)| m.map(|_| 2.0)).collect();
        let mut opt = AdamW::new(&params);
        opt.step(&mut params, &grads, 0.01, 0.0);
        let before = model.params.leaves();
        for ((_, a, _), (_, b, _)) in before.iter().zip(params.leaves()) {
            // bias-corrected first step is lr·sign(g) up to eps
            assert!(((a - &b).amax() - 0.01).abs() < 1e-8);
        }
        drop(ds);
    }

    #[test]
    fn weight_decay_skips_norm_and_eps() {
        let model = Model::init(tiny_config().model, 6, &mut rng_stream(0, Stream::Init)).unwrap();
        let mut params = model.params.clone();
        let grads: Vec<DMatrix<f64>> = params.leaves().into_iter().map(|(_, m, _)| m.map(|_| 0.0)).collect();
        let mut opt = AdamW::new(&params);
        opt.step(&mut params, &grads, 0.1, 0.5);
        for ((name, a, kind), (_, b, _)) in model.params.leaves().iter().zip(params.leaves()) {
            if kind.decays() {
                assert!((a * 0.95 - &b).amax() < 1e-15, "{name}");
            } else {
                assert_eq!(*a, b, "{name}");
            }
        }
    }

    #[test]
    fn small_step_decreases_loss_on_fixed_batch() {
        let ds = data(2);
        let batch: Vec<&Graph> = vec![&ds.graphs[0], &ds.graphs[3]];
        let cfg = tiny_config();
        let mut model = Model::init(cfg.model, 6, &mut rng_stream(3, Stream::Init)).unwrap();
        let noise = model.draw_noise(2, &mut rng_stream(3, Stream::Gumbel), &mut rng_stream(3, Stream::Dropout));
        let mut settings = cfg.objective();
        let (r0, grads, _) = objective_gradients(&model, &batch, Some(&noise), &settings).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        settings.sigma_override = Some(model.forward(&mut tape, &bound, &batch, Some(&noise), Mode::Train, &settings).unwrap().sigmas);
        let mut opt = AdamW::new(&model.params);
        opt.step(&mut model.params, &grads, 1e-4, 0.0);
        let (r1, _, _) = objective_gradients(&model, &batch, Some(&noise), &settings).unwrap();
        assert!(r1.total < r0.total, "{} -> {}", r0.total, r1.total);
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let ds = data(8);
        let train: Vec<&Graph> = ds.graphs.iter().step_by(2).collect();
        let val: Vec<&Graph> = ds.graphs.iter().skip(1).step_by(2).collect();
        let cfg = tiny_config();
        let a = fit(&train, &val, &cfg).unwrap();
        let b = fit(&train, &val, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.epochs.len(), 3);
        let csv = a.log.to_csv();
        assert_eq!(csv.lines().next().unwrap(), TRAIN_LOG_HEADER);
        assert_eq!(csv.lines().count(), 4);
        let best = a.best_epoch.unwrap();
        let best_acc = a.log.epochs[best].acc_val;
        assert!(a.log.epochs[..best].iter().all(|r| r.acc_val < best_acc));
        assert!(a.log.epochs.iter().all(|r| r.acc_val <= best_acc));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = data(3);
        let graphs: Vec<&Graph> = ds.graphs.iter().collect();
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let fit = fit(&graphs, &graphs, &cfg).unwrap();
        assert!(fit.log.epochs.is_empty());
        assert!(fit.best_epoch.is_none());
        let init = Model::init(cfg.model, 6, &mut rng_stream(cfg.seed, Stream::Init)).unwrap();
        assert_eq!(fit.model, init);
    }
}
