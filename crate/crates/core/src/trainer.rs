//! Supervised training: warmup + cosine schedule, label-smoothed
//! cross-entropy, AdamW with decoupled weight decay, and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{stack_images, Dataset, Sample};
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::model::Model;
use crate::tensor::{no_grad, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Peak per-step learning rate.
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub flip: bool,
    /// When set, the best-validation model is checkpointed here.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            base_lr: 5e-4,
            min_lr: 1e-5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            label_smoothing: 0.1,
            batch_size: 32,
            seed: 0,
            flip: true,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return fail(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return fail("base_lr must be > 0; min_lr and weight_decay must be ≥ 0".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    /// Applies the `key=value` pairs it recognizes, removing them from `kv`.
    pub fn apply_kv(&mut self, kv: &mut BTreeMap<String, String>) -> Result<()> {
        fn parse<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{k}={v} is not a valid value")))
        }
        let keys: Vec<String> = kv.keys().cloned().collect();
        for k in keys {
            let v = kv[&k].clone();
            match k.as_str() {
                "epochs" => self.epochs = parse(&k, &v)?,
                "warmup_epochs" => self.warmup_epochs = parse(&k, &v)?,
                "base_lr" => self.base_lr = parse(&k, &v)?,
                "min_lr" => self.min_lr = parse(&k, &v)?,
                "weight_decay" => self.weight_decay = parse(&k, &v)?,
                "beta1" => self.betas.0 = parse(&k, &v)?,
                "beta2" => self.betas.1 = parse(&k, &v)?,
                "eps" => self.eps = parse(&k, &v)?,
                "label_smoothing" => self.label_smoothing = parse(&k, &v)?,
                "batch_size" => self.batch_size = parse(&k, &v)?,
                "seed" => self.seed = parse(&k, &v)?,
                "flip" => self.flip = parse(&k, &v)?,
                _ => continue,
            }
            kv.remove(&k);
        }
        self.validate()
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos())
}

/// Mean cross-entropy against targets smoothed to `1-ε` on the true class
/// and `ε/(n-1)` on each other class. Accepts `[n]` or `[batch, n]` logits.
pub fn label_smoothing_ce<T: Real>(logits: &Tensor<T>, targets: &[usize], eps: f64) -> Result<Tensor<T>> {
    let n = *logits.shape().last().unwrap_or(&0);
    let batch = logits.len() / n.max(1);
    if n < 2 || logits.rank() > 2 || targets.len() != batch {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} targets (need ≥ 2 classes)",
            logits.shape(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Contract(format!("target {t} out of range for {n} classes")));
    }
    let off = eps / (n - 1) as f64;
    let mut q = vec![T::of(off); logits.len()];
    for (row, &t) in targets.iter().enumerate() {
        q[row * n + t] = T::of(1.0 - eps);
    }
    let q = Tensor::new(logits.shape(), q)?;
    Ok(logits.log_softmax().mul(&q)?.sum().scale(-1.0 / batch as f64))
}

/// Plain cross-entropy (no smoothing).
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    label_smoothing_ce(logits, targets, 0.0)
}

/// AdamW moments for each trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T: Real = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update: `p ← p(1 − lr·wd)`, then the bias-corrected Adam step.
/// A parameter without a gradient is treated as having a zero gradient.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - lr * weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.len() {
            return Err(Error::Shape(format!("moment {i} has {} entries, parameter {}", m.len(), p.len())));
        }
        let mut data = p.data().to_vec();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j].to_f64().unwrap_or(0.0));
            let mj = b1 * m[j].to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
            let vj = b2 * v[j].to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let x = data[j].to_f64().unwrap_or(0.0) * decay;
            data[j] = T::of(x - lr * (mj / c1) / ((vj / c2).sqrt() + eps));
        }
        p.assign(data)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Every learning rate used, one per optimizer step.
    pub lrs: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss,val_top1\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6e},{:.6},{:.6},{:.4}", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_top1)
                .expect("string write");
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub mean_ce: f64,
}

/// Classes ordered by descending logit, ties toward the lower index.
fn ranked(row: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Accuracy and mean cross-entropy of precomputed `[batch, n]` logits.
pub fn score_logits(logits: &[f32], n_classes: usize, labels: &[usize], k: usize) -> EvalReport {
    let mut top1 = 0usize;
    let mut topk = 0usize;
    let mut ce = 0.0f64;
    for (row, &y) in logits.chunks_exact(n_classes).zip(labels) {
        let r = ranked(row);
        top1 += (r[0] == y) as usize;
        topk += r[..k.min(n_classes)].contains(&y) as usize;
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        ce += lse - row[y] as f64;
    }
    let n = labels.len().max(1) as f64;
    EvalReport {
        top1: top1 as f64 / n,
        topk: topk as f64 / n,
        k,
        mean_ce: ce / n,
    }
}

const EVAL_BATCH: usize = 128;

/// Top-1, top-k and mean plain cross-entropy over `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], k: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let n = model.config.n_classes;
    let mut logits = Vec::with_capacity(samples.len() * n);
    no_grad(|| -> Result<()> {
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            logits.extend_from_slice(model.forward_batch(&stack_images(&refs, None)?)?.data());
        }
        Ok(())
    })?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(score_logits(&logits, n, &labels, k))
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

/// Trains `model` in place. `on_epoch` sees each row as it is produced.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs nonempty train and validation splits".into()));
    }
    if data.n_classes != model.config.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            data.n_classes, model.config.n_classes
        )));
    }
    let spe = steps_per_epoch(data.train.len(), cfg.batch_size);
    let (total, warmup) = (spe * cfg.epochs, spe * cfg.warmup_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = {
        let params: Vec<&Tensor<f32>> = model.trainable_parameters().into_iter().map(|(_, t)| t).collect();
        OptimizerState::new(&params)
    };
    let mut report = TrainReport {
        best_val_top1: -1.0,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.train[i]).collect();
            let flips: Vec<bool> = samples.iter().map(|_| cfg.flip && rng.random_bool(0.5)).collect();
            let images = stack_images(&samples, Some(&flips))?;
            let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();

            model.zero_grad();
            let loss = label_smoothing_ce(&model.forward_batch(&images)?, &targets, cfg.label_smoothing)?;
            loss.backward()?;
            loss_sum += loss.item() as f64 * batch.len() as f64;
            drop(loss);

            step += 1;
            lr = lr_at(step, total, warmup, cfg.base_lr, cfg.min_lr);
            report.lrs.push(lr);
            let mut params: Vec<&mut Tensor<f32>> = model
                .named_params_mut()
                .into_iter()
                .filter(|(_, t)| t.requires_grad())
                .map(|(_, t)| t)
                .collect();
            adamw_step(&mut params, &mut state, lr, cfg.weight_decay, cfg.betas, cfg.eps)?;
        }
        let eval = evaluate(model, &data.val, 1)?;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            val_loss: eval.mean_ce,
            val_top1: eval.top1,
        };
        if row.val_top1 > report.best_val_top1 {
            report.best_val_top1 = row.val_top1;
            report.best_epoch = epoch;
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(model, dir)?;
            }
        }
        on_epoch(&row);
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_continuity() {
        assert_eq!(lr_at(0, 100, 10, 1e-3, 1e-5), 0.0);
        assert_eq!(lr_at(10, 100, 10, 1e-3, 1e-5), 1e-3);
        assert!((lr_at(100, 100, 10, 1e-3, 1e-5) - 1e-5).abs() < 1e-15);
        // Left limit of the ramp vs. the cosine branch at the boundary.
        let left = 1e-3 * (10.0 - 1e-9) / 10.0;
        assert!((left - lr_at(10, 100, 10, 1e-3, 1e-5)).abs() < 1e-9);
        let mid = lr_at(55, 100, 10, 1e-3, 1e-5);
        assert!((mid - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let l = Tensor::<f64>::zeros(&[4]);
        assert!((cross_entropy(&l, &[2]).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let l2 = Tensor::<f64>::zeros(&[2]);
        assert!((label_smoothing_ce(&l2, &[0], 0.1).unwrap().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_a_positive_floor() {
        let l = Tensor::<f64>::new(&[3], vec![60.0, 0.0, 0.0]).unwrap();
        let smooth = label_smoothing_ce(&l, &[0], 0.1).unwrap().item();
        let plain = cross_entropy(&l, &[0]).unwrap().item();
        assert!(smooth > 1.0 && plain < 1e-20, "{smooth} {plain}");
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        assert!(label_smoothing_ce(&Tensor::<f32>::zeros(&[3]), &[3], 0.1).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::param(&[1], vec![1.0]).unwrap();
        p.mul(&p).unwrap().scale(0.5).sum().backward().unwrap();
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &mut st, 0.1, 0.0, (0.9, 0.999), 1e-8).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_means_pure_decay() {
        let mut p = Tensor::<f64>::param(&[2], vec![2.0, -1.0]).unwrap();
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &mut st, 0.1, 0.0, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(p.data(), &[2.0, -1.0]);
        adamw_step(&mut [&mut p], &mut st, 0.1, 0.5, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(p.data(), &[2.0 * 0.95, -0.95]);
    }

    #[test]
    fn adamw_without_decay_matches_reference_adam() {
        // f(p) = (p - 3)^2, ten steps.
        let mut p = Tensor::<f64>::param(&[1], vec![0.5]).unwrap();
        let mut st = OptimizerState::new(&[&p]);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            p.zero_grad();
            let d = p.sub(&Tensor::full(&[1], 3.0)).unwrap();
            d.mul(&d).unwrap().sum().backward().unwrap();
            adamw_step(&mut [&mut p], &mut st, 0.05, 0.0, (0.9, 0.999), 1e-8).unwrap();
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-7);
    }

    #[test]
    fn scoring_rules() {
        // Perfect, constant (ties → class 0) and top-k = n.
        let perfect = [5.0, 0.0, 0.0, 5.0];
        assert_eq!(score_logits(&perfect, 2, &[0, 1], 1).top1, 1.0);
        let constant = vec![0.0f32; 16];
        let r = score_logits(&constant, 4, &[0, 1, 2, 3], 4);
        assert_eq!((r.top1, r.topk), (0.25, 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.warmup_epochs = 30;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.label_smoothing = 1.0;
        assert!(c.validate().is_err());
        let mut kv: BTreeMap<String, String> = [("epochs".to_string(), "3".to_string()), ("arm".into(), "x".into())].into();
        let mut c = TrainConfig::default();
        c.apply_kv(&mut kv).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(kv.len(), 1);
    }
}
