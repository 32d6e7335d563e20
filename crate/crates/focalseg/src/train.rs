//! SGD training loop with momentum, weight decay and an exponential learning
//! rate schedule; per-epoch CSV logging, best/epoch-1/last checkpointing, and
//! split evaluation. Everything is single-threaded and seed-deterministic:
//! identical (seed, config) reproduce the log byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, augment_sample, draw_augment, Sample};
use crate::error::{Error, Result};
use crate::losses::{one_hot, reg_loss, seg_loss, total_loss, LossWeights, RegForm};
use crate::metrics::{dsc, hd95, mean_std, DscFlag};
use crate::model::{Model, ModelConfig, ParamId};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OptimizerCfg {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg { momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScheduleCfg {
    pub base_lr: f64,
    pub gamma: f64,
}

impl Default for ScheduleCfg {
    fn default() -> Self {
        ScheduleCfg { base_lr: 0.01, gamma: 0.95 }
    }
}

impl ScheduleCfg {
    /// lr_e = base_lr * gamma^e
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    #[serde(default)]
    pub reg_form: RegForm,
    #[serde(default)]
    pub optimizer: OptimizerCfg,
    #[serde(default)]
    pub schedule: ScheduleCfg,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Dataset directory (manifest + split subdirectories).
    pub dataset: PathBuf,
    /// Output directory for checkpoints, logs and config echo.
    pub out: PathBuf,
    /// Random quarter-turn/flip augmentation on training samples.
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            reg_form: RegForm::default(),
            optimizer: OptimizerCfg::default(),
            schedule: ScheduleCfg::default(),
            epochs: 30,
            batch_size: 24,
            seed: 17,
            precision: Precision::default(),
            dataset: PathBuf::from("dataset"),
            out: PathBuf::from("run"),
            augment: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.schedule.base_lr <= 0.0 {
            return Err(Error::Parameter("base_lr must be > 0".into()));
        }
        if !(self.schedule.gamma > 0.0 && self.schedule.gamma <= 1.0) {
            return Err(Error::Parameter("gamma must be in (0, 1]".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if self.optimizer.momentum < 0.0 || self.optimizer.momentum >= 1.0 {
            return Err(Error::Parameter("momentum must be in [0, 1)".into()));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(Error::Parameter("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_dsc,val_hd95";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: f64,
    /// Mean over cases where the distance is defined; None when it never is.
    pub val_hd95: Option<f64>,
}

impl EpochRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.6},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_dsc,
            match self.val_hd95 {
                Some(v) => format!("{v:.6}"),
                None => "nan".to_string(),
            }
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Full contents of the training log that was written to disk.
    pub log: String,
}

pub fn checkpoint_path(out: &Path, tag: &str) -> PathBuf {
    out.join(format!("checkpoint_{tag}.fsa"))
}

/// Momentum SGD with decoupled-from-nothing L2: v <- m*v + g + wd*p,
/// p <- p - lr*v, applied uniformly to every parameter.
fn sgd_step<S: Scalar>(
    store_tensors: &mut [Tensor<S>],
    velocity: &mut [Vec<S>],
    grads: &[Vec<S>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mom, wd) = (S::from_f64(lr), S::from_f64(momentum), S::from_f64(weight_decay));
    for ((t, v), g) in store_tensors.iter_mut().zip(velocity).zip(grads) {
        let data = t.make_mut();
        for ((p, v), &g) in data.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mom * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
}

/// Samples store rasters in f32; widen (or pass through) to the compute type.
fn cast<S: Scalar>(t: &Tensor<f32>) -> Tensor<S> {
    let data: Vec<S> = t.data().iter().map(|&v| S::from_f64(v as f64)).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Forward pass products needed by evaluation: hard mask via per-pixel
/// argmax, class probabilities, optional boundary map.
pub struct Prediction<S: Scalar> {
    pub mask: Vec<u8>,
    pub probs: Tensor<S>,
    pub heatmap: Option<Tensor<S>>,
}

pub fn predict<S: Scalar>(model: &Model<S>, image: &Tensor<S>) -> Result<Prediction<S>> {
    let mut tp = Tape::new();
    let params = model.leaves(&mut tp, false);
    let xv = tp.constant(image.clone());
    let out = model.forward(&mut tp, &params, xv)?;
    let probs = tp.value(out.seg_probs).clone();
    let heatmap = out.heatmap.map(|h| tp.value(h).clone());
    let k = probs.shape()[0];
    let px = probs.numel() / k;
    let d = probs.data();
    let mask = (0..px)
        .map(|i| {
            (0..k)
                .max_by(|&a, &b| d[a * px + i].to_f64().total_cmp(&d[b * px + i].to_f64()))
                .unwrap() as u8
        })
        .collect();
    Ok(Prediction { mask, probs, heatmap })
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub dsc: f64,
    pub flag: DscFlag,
    pub hd95_px: Option<f64>,
}

/// Per-case metrics for a list of samples, ordered as given.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[Sample]) -> Result<Vec<EvalRow>> {
    samples
        .iter()
        .map(|s| {
            let [_, h, w] = *s.image.shape() else {
                return Err(Error::dim("evaluate", format!("{:?}", s.image.shape())));
            };
            let pred = predict(model, &cast::<S>(&s.image))?;
            let (score, flag) = dsc(&pred.mask, &s.mask);
            let hd = hd95(&pred.mask, &s.mask, h, w);
            Ok(EvalRow { id: s.id.clone(), dsc: score, flag, hd95_px: hd })
        })
        .collect()
}

pub fn summarize_eval(rows: &[EvalRow]) -> (f64, f64, Option<(f64, f64)>) {
    let d: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    let (dm, ds) = mean_std(&d);
    let h: Vec<f64> = rows.iter().filter_map(|r| r.hd95_px).collect();
    let hd = if h.is_empty() { None } else { Some(mean_std(&h)) };
    (dm, ds, hd)
}

/// Metrics CSV: one row per case plus a trailing aggregate row.
pub fn eval_csv(rows: &[EvalRow], spacing_mm: f64) -> String {
    let mut out = String::from("case_id,dsc,hd95_px,hd95_mm,flags\n");
    let fmt_hd = |v: Option<f64>, scale: f64| match v {
        Some(x) => format!("{:.6}", x * scale),
        None => "nan".to_string(),
    };
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            r.id,
            r.dsc,
            fmt_hd(r.hd95_px, 1.0),
            fmt_hd(r.hd95_px, spacing_mm),
            r.flag
        ));
    }
    let (dm, ds, hd) = summarize_eval(rows);
    let (hm, hs) = hd.map_or((f64::NAN, f64::NAN), |v| v);
    out.push_str(&format!(
        "aggregate,{:.6}±{:.6},{:.6}±{:.6},{:.6}±{:.6},n={}\n",
        dm,
        ds,
        hm,
        hs,
        hm * spacing_mm,
        hs * spacing_mm,
        rows.len()
    ));
    out
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Loss of one sample on a fresh tape; returns the tape for backward.
fn sample_loss<S: Scalar>(
    model: &Model<S>,
    cfg: &RunConfig,
    s: &Sample,
    use_reg: bool,
) -> Result<(Tape<S>, Vec<crate::tape::Var>, crate::tape::Var)> {
    let mut tp = Tape::new();
    let params = model.leaves(&mut tp, true);
    let xv = tp.constant(cast::<S>(&s.image));
    let out = model.forward(&mut tp, &params, xv)?;
    let [k, h, w] = *tp.value(out.seg_probs).shape() else {
        return Err(Error::dim("train", "seg probs not 3-d".to_string()));
    };
    let onehot = tp.constant(one_hot::<S>(&s.mask, k, h, w)?);
    let seg = seg_loss(&mut tp, out.seg_probs, onehot)?;
    let reg = match (out.heatmap, use_reg) {
        (Some(hv), true) => {
            let target = tp.constant(cast::<S>(&s.heatmap));
            Some(reg_loss(&mut tp, &[(hv, target)], cfg.reg_form)?)
        }
        _ => None,
    };
    let loss = total_loss(&mut tp, seg, reg, cfg.loss)?;
    Ok((tp, params, loss))
}

/// Diagnostic snapshot written next to the checkpoints when a loss goes
/// non-finite, before training aborts.
fn nan_dump<S: Scalar>(
    cfg: &RunConfig,
    model: &Model<S>,
    epoch: usize,
    sample_id: &str,
    loss: S,
) -> Result<()> {
    let dump = serde_json::json!({
        "epoch": epoch,
        "sample": sample_id,
        "loss": format!("{loss}"),
        "param_norms": model
            .store
            .grouped_counts()
            .iter()
            .map(|(g, _)| g.clone())
            .collect::<Vec<_>>(),
    });
    fs::write(
        cfg.out.join("nan_dump.json"),
        serde_json::to_string_pretty(&dump).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    model.store.save(checkpoint_path(&cfg.out, "nan"))?;
    Ok(())
}

/// Precision is a run-config knob: the same loop instantiates in f32 or f64.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// `train` with a per-epoch observer, called after each row is logged.
pub fn train_with(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::Single => train_impl::<f32>(cfg, on_epoch),
        Precision::Double => train_impl::<f64>(cfg, on_epoch),
    }
}

fn train_impl<S: Scalar>(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = data::load_split(&cfg.dataset, "train")?;
    let val_set = data::load_split(&cfg.dataset, "val")?;
    if train_set.is_empty() {
        return Err(Error::Parameter("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Parameter(
            "validation split is empty; per-epoch selection needs at least one case".into(),
        ));
    }
    let mut model = Model::<S>::new(cfg.model.clone(), cfg.seed)?;
    let expect = [cfg.model.in_channels, cfg.model.input[0], cfg.model.input[1]];
    if train_set[0].image.shape() != expect {
        return Err(Error::Parameter(format!(
            "dataset rasters are {:?} but the model expects {:?}",
            train_set[0].image.shape(),
            expect
        )));
    }

    fs::create_dir_all(&cfg.out)?;
    fs::write(
        cfg.out.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    let use_reg = cfg.loss.lambda2 > 0.0 && cfg.model.dual_head;
    let n_params = model.store.len();
    let mut velocity: Vec<Vec<S>> =
        (0..n_params).map(|i| vec![S::ZERO; model.store.get(ParamId(i)).numel()]).collect();

    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<S>> =
                (0..n_params).map(|i| vec![S::ZERO; model.store.get(ParamId(i)).numel()]).collect();
            for &idx in batch {
                let sample;
                let s = if cfg.augment {
                    sample = augment_sample(&train_set[idx], draw_augment(&mut rng));
                    &sample
                } else {
                    &train_set[idx]
                };
                let (mut tp, params, loss) = sample_loss(&model, cfg, s, use_reg)?;
                let lv = tp.value(loss).item();
                if !lv.is_finite() {
                    nan_dump(cfg, &model, epoch, &s.id, lv)?;
                    return Err(Error::Numeric(format!(
                        "non-finite loss {lv} at epoch {epoch} on {}; diagnostics in {}",
                        s.id,
                        cfg.out.display()
                    )));
                }
                loss_sum += lv.to_f64();
                tp.backward(loss)?;
                for (pi, &pv) in params.iter().enumerate() {
                    if let Some(g) = tp.grad(pv) {
                        for (a, &b) in grads[pi].iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let inv = S::from_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                for v in g {
                    *v *= inv;
                }
            }
            let mut tensors: Vec<Tensor<S>> =
                (0..n_params).map(|i| model.store.get(ParamId(i)).clone()).collect();
            sgd_step(
                &mut tensors,
                &mut velocity,
                &grads,
                lr,
                cfg.optimizer.momentum,
                cfg.optimizer.weight_decay,
            );
            for (i, t) in tensors.into_iter().enumerate() {
                model.store.set(ParamId(i), t)?;
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let eval_rows = evaluate(&model, &val_set)?;
        let (val_dsc, _, hd) = summarize_eval(&eval_rows);
        let row = EpochRow { epoch, lr, train_loss, val_dsc, val_hd95: hd.map(|(m, _)| m) };
        on_epoch(&row);
        rows.push(row);

        if epoch == 0 {
            model.store.save(checkpoint_path(&cfg.out, "epoch1"))?;
        }
        if val_dsc > best.1 {
            best = (epoch, val_dsc);
            model.store.save(checkpoint_path(&cfg.out, "best"))?;
        }
    }
    model.store.save(checkpoint_path(&cfg.out, "last"))?;

    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    for r in &rows {
        log.push_str(&r.csv());
        log.push('\n');
    }
    fs::write(cfg.out.join("train_log.csv"), &log)?;

    Ok(TrainOutcome { rows, best_epoch: best.0, best_val_dsc: best.1, log })
}

/// Rebuild a model from a run directory's config echo plus a checkpoint tag.
pub fn load_checkpoint(run_dir: &Path, tag: &str) -> Result<(RunConfig, Model<f32>)> {
    let text = fs::read_to_string(run_dir.join("config.json"))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("config.json: {e}")))?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    model.store.load(checkpoint_path(run_dir, tag))?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_reference_points() {
        let s = ScheduleCfg { base_lr: 0.01, gamma: 0.95 };
        assert_eq!(s.lr(0), 0.01);
        assert!((s.lr(1) - 0.0095).abs() < 1e-15);
        assert!((s.lr(2) - 0.009025).abs() < 1e-15);
    }

    #[test]
    fn sgd_update_matches_hand_computation() {
        let mut t = vec![Tensor::<f32>::new(&[1], vec![1.0]).unwrap()];
        let mut v = vec![vec![0.0f32]];
        let g = vec![vec![0.5f32]];
        sgd_step(&mut t, &mut v, &g, 0.01, 0.9, 1e-4);
        // v = 0.9*0 + 0.5 + 1e-4*1 = 0.5001; p = 1 - 0.01*0.5001
        assert!((v[0][0] - 0.5001).abs() < 1e-7);
        assert!((t[0].data()[0] - 0.994999).abs() < 1e-7);
        sgd_step(&mut t, &mut v, &g, 0.01, 0.9, 1e-4);
        let want_v = 0.9 * 0.5001 + 0.5 + 1e-4 * 0.994999;
        assert!((v[0][0] - want_v).abs() < 1e-6);
    }

    #[test]
    fn config_validation_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        let mut bad = RunConfig::default();
        bad.schedule.gamma = 0.0;
        assert!(bad.validate().is_err());
        bad = RunConfig::default();
        bad.epochs = 0;
        assert!(bad.validate().is_err());
        bad = RunConfig::default();
        bad.schedule.base_lr = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_row_formatting_is_stable() {
        let r = EpochRow { epoch: 3, lr: 0.0095, train_loss: 0.5, val_dsc: 0.25, val_hd95: None };
        assert_eq!(r.csv(), "3,0.00950000,0.500000,0.250000,nan");
        let r2 = EpochRow { val_hd95: Some(1.25), ..r };
        assert!(r2.csv().ends_with("1.250000"));
    }

    #[test]
    fn eval_csv_aggregate_matches_recomputation() {
        let rows = vec![
            EvalRow { id: "a".into(), dsc: 0.8, flag: DscFlag::Defined, hd95_px: Some(2.0) },
            EvalRow { id: "b".into(), dsc: 0.6, flag: DscFlag::Defined, hd95_px: Some(4.0) },
        ];
        let (dm, ds, hd) = summarize_eval(&rows);
        assert!((dm - 0.7).abs() < 1e-12);
        assert!((ds - 0.1).abs() < 1e-12);
        assert_eq!(hd.unwrap().0, 3.0);
        let csv = eval_csv(&rows, 0.5);
        assert!(csv.contains("aggregate,0.700000±0.100000,3.000000±1.000000,1.500000±0.500000"));
        assert!(csv.lines().count() == 4);
    }
}
