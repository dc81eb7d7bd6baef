//! Minibatch SGD training and top-k evaluation of a [`ToyNet`].

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormMode};
use crate::data::{segment_indices, ClipDataset, SampleMode};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::Tensor;
use crate::toynet::{ToyNet, BN_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub segments: usize,
    pub epochs: usize,
    pub lr: f64,
    /// 1-based epochs from which the rate is divided by a further 10.
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Learning-rate multiplier for temporal-module parameters.
    pub module_lr_mult: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            epochs: 30,
            lr: 0.1,
            decay_epochs: vec![26, 29],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            module_lr_mult: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.segments == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("segments, epochs and batch size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.module_lr_mult > 0.0 && self.module_lr_mult.is_finite()) {
            return bad("learning rate and module multiplier must be positive");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing");
        }
        if self.decay_epochs.iter().any(|&d| d == 0 || d >= self.epochs) {
            return bad("decay epochs must lie in 1..epochs");
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr / 10f64.powi(k as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
}

/// Stacks sampled clips of `idx` into an (N, T, C, H, W) batch.
fn gather(data: &ClipDataset, idx: &[usize], segments: usize, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut clips = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let v = &data.videos[i];
        let frames = segment_indices(v.num_frames(), segments, mode, rng)?;
        clips.push(v.frames.select(0, &frames)?);
        labels.push(v.label);
    }
    Ok((Tensor::stack(&clips)?, labels))
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

pub fn train(net: &mut ToyNet<f32>, data: &ClipDataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let opt = Sgd { lr: cfg.lr_at(epoch), momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = gather(data, chunk, cfg.segments, SampleMode::Random, &mut rng)?;
            let g = Graph::new();
            let xv = g.constant(x);
            let out = net.forward_graph(&g, xv, NormMode::Train)?;
            let loss = g.softmax_xent(out.logits, &labels)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at epoch {epoch}")));
            }
            g.backward(loss)?;
            let logits = g.value(out.logits);
            let k = logits.shape()[1];
            for (row, &y) in logits.data().chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            loss_sum += lv * chunk.len() as f64;
            let (mut backbone, mut modules) = net.param_groups_mut();
            for p in backbone.iter_mut().chain(modules.iter_mut()) {
                g.accumulate(p);
            }
            opt.step(&mut backbone);
            Sgd { lr: opt.lr * cfg.module_lr_mult, ..opt }.step(&mut modules);
            net.update_running_stats(&out.stats, BN_MOMENTUM)?;
        }
        history.push(EpochRecord {
            epoch,
            lr: opt.lr,
            loss: loss_sum / data.len() as f64,
            top1: 100.0 * correct as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
}

/// Top-k accuracy over whole clips from eval-mode consensus logits.
pub fn topk(logits: &Tensor<f32>, labels: &[usize], k: usize) -> f64 {
    let c = logits.shape()[1];
    let hits = logits.data().chunks(c).zip(labels).filter(|(row, &y)| row.iter().filter(|&&v| v > row[y]).count() < k).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Center-sampled single-clip evaluation with frozen BN statistics.
pub fn evaluate(net: &ToyNet<f32>, data: &ClipDataset, segments: usize) -> Result<EvalReport> {
    let (logits, labels) = predict(net, data, segments)?;
    let top5 = if net.config.cls <= 5 { 100.0 } else { topk(&logits, &labels, 5) };
    Ok(EvalReport { top1: topk(&logits, &labels, 1), top5 })
}

/// Eval-mode logits (N, CLS) for every video, with labels.
pub fn predict(net: &ToyNet<f32>, data: &ClipDataset, segments: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(32) {
        let (x, l) = gather(data, chunk, segments, SampleMode::Center, &mut rng)?;
        rows.push(net.forward(&x)?);
        labels.extend(l);
    }
    let cls = rows[0].shape()[1];
    let data: Vec<f32> = rows.into_iter().flat_map(|t| t.into_data()).collect();
    Ok((Tensor::new(&[labels.len(), cls], data)?, labels))
}

pub const HISTORY_HEADER: &str = "epoch,lr,loss,top1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.loss, r.top1));
    }
    s
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(history_csv(history).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig { epochs: 10, lr: 0.1, decay_epochs: vec![4, 8], ..TrainConfig::default() };
        c.validate().unwrap();
        assert_eq!(c.lr_at(1), 0.1);
        assert_eq!(c.lr_at(3), 0.1);
        assert!((c.lr_at(4) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        for d in [vec![5, 5], vec![6, 3], vec![10], vec![0]] {
            let c = TrainConfig { epochs: 10, decay_epochs: d, ..TrainConfig::default() };
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn topk_counts_ties_favorably() {
        let l = Tensor::from_f64(&[2, 3], &[0.1, 0.9, 0.0, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(topk(&l, &[1, 2], 1), 50.0);
        assert_eq!(topk(&l, &[1, 2], 2), 100.0);
    }

    #[test]
    fn csv_header() {
        let h = [EpochRecord { epoch: 1, lr: 0.1, loss: 1.5, top1: 25.0 }];
        assert_eq!(history_csv(&h), "epoch,lr,loss,top1\n1,0.1,1.5,25\n");
    }
}
