//! Training engine: AdamW, exponential LR decay, metrics, multi-seed runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{batch_iter, DatasetName, DatasetSplit, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig, Param};
use crate::tensor::Tensor;

/// Rows per forward pass when evaluating; keeps peak memory bounded.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DatasetName,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    /// Run the seeds on separate threads.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_dataset(DatasetName::Mnist)
    }
}

impl TrainConfig {
    pub fn for_dataset(dataset: DatasetName) -> Self {
        Self {
            dataset,
            epochs: dataset.default_epochs(),
            batch_size: 64,
            lr0: 1e-3,
            gamma: 0.8,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            runs: 3,
            seeds: vec![0, 1, 2],
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.seeds.len() != self.runs {
            return Err(Error::Config(format!(
                "{} seeds given for {} runs",
                self.seeds.len(),
                self.runs
            )));
        }
        let finite = [self.lr0, self.gamma, self.weight_decay, self.beta1, self.beta2, self.adam_eps];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("optimizer hyperparameters must be finite and >= 0".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `lr0 * gamma^epoch`; the rate used throughout epoch `epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    /// One moment buffer per entry of `sizes`.
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &Model, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        Self::new(&sizes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. A missing gradient counts as zero.
    ///
    /// Every gradient is checked before any parameter changes, so a
    /// non-finite gradient leaves the model untouched.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<&[f32]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.value.len() {
                    return Err(Error::Length {
                        what: format!("gradient of {}", p.name),
                        expected: p.value.len(),
                        found: g.len(),
                    });
                }
                if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} contains {bad}",
                        p.name
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (c1, c2) = ((1.0 - self.beta1) as f32, (1.0 - self.beta2) as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let theta = p.value.data_mut();
            if p.decay && self.weight_decay != 0.0 {
                let keep = (1.0 - lr * self.weight_decay) as f32;
                theta.iter_mut().for_each(|x| *x *= keep);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let zeros;
            let g = match g {
                Some(g) => *g,
                None => {
                    zeros = vec![0.0; theta.len()];
                    &zeros
                }
            };
            for j in 0..theta.len() {
                m[j] = b1 * m[j] + c1 * g[j];
                v[j] = b2 * v[j] + c2 * g[j] * g[j];
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                theta[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

/// Accuracy and macro F1, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro F1 over `classes` classes. Per-class F1 is 0 when
/// precision and recall are both 0.
pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<Evaluation> {
    if pred.len() != labels.len() {
        return Err(Error::Length {
            what: "predictions".into(),
            expected: labels.len(),
            found: pred.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput { op: "classification_metrics" });
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (i, (&p, &y)) in pred.iter().zip(labels).enumerate() {
        if let Some(label) = [p, y].into_iter().find(|&l| l >= classes) {
            return Err(Error::Label { index: i, label, classes });
        }
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let (tp, fp, fn_) = (tp[c] as f64, fp[c] as f64, fn_[c] as f64);
            let denom = 2.0 * tp + fp + fn_;
            if tp == 0.0 || denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / labels.len() as f64,
        macro_f1: 100.0 * f1_sum / classes as f64,
    })
}

/// Class predictions for every row of `x`, in chunks.
pub fn predict_classes(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + EVAL_CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        out.extend(model.predict(&x.gather_rows(&idx))?.argmax_rows());
        start = end;
    }
    Ok(out)
}

pub fn evaluate(model: &Model, split: &DatasetSplit) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptyInput { op: "evaluate" });
    }
    let pred = predict_classes(model, &split.images)?;
    classification_metrics(&pred, &split.labels, NUM_CLASSES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's mini-batches, in percent.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Train accuracy of the last epoch, or of the untrained model when no
    /// epoch ran.
    pub train_accuracy: f64,
    /// Val accuracy after the last epoch.
    pub val_accuracy: f64,
    pub macro_f1: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    /// Whole run including per-epoch evaluation.
    pub wall_seconds: f64,
}

/// Per-epoch shuffle seed derived from the run seed.
fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1)
}

/// Mean cross-entropy and correct-prediction count for one optimizer step.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    tape: &mut Tape,
    x: Tensor,
    y: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    tape.reset();
    let vars = model.register(tape, true);
    let input = tape.constant(x);
    let logits = model.forward(tape, &vars, input)?;
    let correct = tape
        .value(logits)
        .argmax_rows()
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count();
    let loss = tape.softmax_cross_entropy(logits, y)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss_value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
    opt.step(model.params_mut(), &grads, lr)?;
    Ok((loss_value, correct))
}

/// Progress callback: `(seed, metrics)` after every epoch.
pub type Progress<'a> = &'a (dyn Fn(u64, &EpochMetrics) + Sync);

/// Trains one freshly initialized model with `seed` for both init and
/// shuffling; returns the metrics and the trained model.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &DatasetSplit,
    val: &DatasetSplit,
    seed: u64,
    progress: Option<Progress<'_>>,
) -> Result<(RunMetrics, Model)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput { op: "train_run" });
    }
    let start = Instant::now();
    let mut model = build_model(&model_cfg.clone().with_seed(seed))?;
    let mut opt = AdamW::for_model(&model, cfg);
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_eval = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr0, cfg.gamma);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let batches = batch_iter(train, cfg.batch_size, shuffle_seed(seed, epoch), true)?;
        for (b, (x, y)) in batches.enumerate() {
            let (loss, ok) = train_step(&mut model, &mut opt, &mut tape, x, &y, lr).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}"))
                }
                other => other,
            })?;
            loss_sum += loss * y.len() as f64;
            correct += ok;
        }
        let eval = evaluate(&model, val)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: 100.0 * correct as f64 / train.len() as f64,
            val_accuracy: eval.accuracy,
            val_f1: eval.macro_f1,
        };
        if let Some(cb) = progress {
            cb(seed, &m);
        }
        history.push(m);
        last_eval = Some(eval);
    }
    let (train_accuracy, eval) = match (history.last(), last_eval) {
        (Some(m), Some(eval)) => (m.train_accuracy, eval),
        _ => (evaluate(&model, train)?.accuracy, evaluate(&model, val)?),
    };
    let best = history
        .iter()
        .max_by(|a, b| a.val_accuracy.total_cmp(&b.val_accuracy).then(b.epoch.cmp(&a.epoch)));
    let metrics = RunMetrics {
        seed,
        train_accuracy,
        val_accuracy: eval.accuracy,
        macro_f1: eval.macro_f1,
        best_val_accuracy: best.map_or(eval.accuracy, |m| m.val_accuracy),
        best_epoch: best.map(|m| m.epoch),
        epochs: history,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((metrics, model))
}

/// Runs every configured seed, on threads when `cfg.parallel` is set.
/// Results come back in seed order either way.
pub fn train_runs(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &DatasetSplit,
    val: &DatasetSplit,
    progress: Option<Progress<'_>>,
) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let one = |seed: u64| train_run(model_cfg, cfg, train, val, seed, progress).map(|(m, _)| m);
    if !cfg.parallel {
        return cfg.seeds.iter().map(|&s| one(s)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&s| scope.spawn(move || one(s)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `n - 1` denominator; a single value has std 0.
    pub fn of(values: &[f64]) -> Result<Stat> {
        if values.is_empty() {
            return Err(Error::Contract("cannot aggregate zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub train_accuracy: Stat,
    pub val_accuracy: Stat,
    pub macro_f1: Stat,
    pub wall_seconds: f64,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    if runs.is_empty() {
        return Err(Error::Contract("aggregate_runs needs at least one run".into()));
    }
    let pick = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    Ok(AggregateMetrics {
        runs: runs.len(),
        train_accuracy: Stat::of(&pick(|r| r.train_accuracy))?,
        val_accuracy: Stat::of(&pick(|r| r.val_accuracy))?,
        macro_f1: Stat::of(&pick(|r| r.macro_f1))?,
        wall_seconds: Stat::of(&pick(|r| r.wall_seconds))?.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f32, decay: bool) -> Param {
        Param {
            name: "theta".into(),
            layer: 0,
            value: Tensor::scalar(value),
            decay,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar_param(0.0, true)];
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &[Some(&[1.0])], 1e-3).unwrap();
        let got = p[0].value.data()[0];
        assert!((got + 1e-3).abs() < 1e-9, "{got}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = vec![scalar_param(2.0, true), scalar_param(2.0, false)];
        let mut opt = AdamW::new(&[1, 1], 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut p, &[Some(&[0.0]), None], 0.5).unwrap();
        assert!((p[0].value.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
        assert_eq!(p[1].value.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_param_and_leaves_state() {
        let mut p = vec![scalar_param(1.0, true)];
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, 0.0);
        let err = opt.step(&mut p, &[Some(&[f32::NAN])], 1e-3).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(p[0].value.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 1e-3, 0.8), 1e-3);
        assert!((lr_schedule(1, 1e-3, 0.8) - 8e-4).abs() < 1e-15);
        assert!((lr_schedule(24, 1e-3, 0.8) - 4.722366482869646e-6).abs() < 1e-15);
    }

    #[test]
    fn metrics_examples() {
        let labels: Vec<usize> = (0..10).collect();
        let perfect = classification_metrics(&labels, &labels, 10).unwrap();
        assert_eq!((perfect.accuracy, perfect.macro_f1), (100.0, 100.0));

        let two = classification_metrics(&[0, 0], &[0, 1], 2).unwrap();
        assert!((two.macro_f1 - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(two.accuracy, 50.0);

        let constant = classification_metrics(&[3; 10], &labels, 10).unwrap();
        assert_eq!(constant.accuracy, 10.0);
        assert!(classification_metrics(&[], &[], 10).is_err());
        assert!(classification_metrics(&[10], &[0], 10).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = Stat::of(&[97.0, 97.5, 98.0]).unwrap();
        assert!((s.mean - 97.5).abs() < 1e-12 && (s.std - 0.5).abs() < 1e-12);
        assert_eq!(Stat::of(&[4.0]).unwrap(), Stat { mean: 4.0, std: 0.0 });
        assert!(Stat::of(&[]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::for_dataset(DatasetName::FashionMnist);
        assert_eq!(cfg.epochs, 35);
        cfg.validate().unwrap();
        cfg.runs = 2;
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![0, 1];
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
