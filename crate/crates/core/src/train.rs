//! SGD training loops for image and graph networks.
//!
//! One optimizer serves both model families because parameters are
//! addressed by the shared key scheme: heavy-ball momentum buffers live in
//! a `BTreeMap` keyed by parameter, so update order is deterministic and a
//! fixed seed reproduces a run bit for bit. Clip scales are projected back
//! above a small floor after every step, keeping quantizers valid no
//! matter what the gradients do.
//!
//! Quantization-aware runs anneal the bit width with a step schedule
//! (start wide, lose `decrement` bits every `period` epochs, stop at the
//! target) while the learning rate follows a half-cosine. Without a bit
//! schedule and with a zero smoothness penalty the image loop is plain
//! minibatch SGD with momentum.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{GraphDataset, ImageDataset};
use crate::error::{Error, Result};
use crate::graph::GraphNetwork;
use crate::layers::{Network, ParamKey, QuantMode, Slot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clip scales stay strictly above this after every optimizer step.
pub const ALPHA_FLOOR: f64 = 1e-6;

/// Stepwise bit-width annealing: `max(target, start - decrement * floor(epoch / period))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitSchedule {
    pub start: u32,
    pub decrement: u32,
    pub period: usize,
    pub target: u32,
}

impl BitSchedule {
    /// Anneal one bit per `period` epochs, from `start` down to `target`.
    pub fn stepped(start: u32, period: usize, target: u32) -> Self {
        BitSchedule { start, decrement: 1, period, target }
    }

    /// Hold a fixed width for the whole run.
    pub fn constant(bits: u32) -> Self {
        BitSchedule { start: bits, decrement: 0, period: 1, target: bits }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target < 2 {
            return Err(Error::arg("bit schedule", format!("target must be at least 2 bits, got {}", self.target)));
        }
        if self.start < self.target {
            return Err(Error::arg(
                "bit schedule",
                format!("start {} is below target {}", self.start, self.target),
            ));
        }
        if self.period == 0 {
            return Err(Error::arg("bit schedule", "period must be at least 1 epoch"));
        }
        crate::quant::levels(self.start, true)?;
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> u32 {
        let drop = self.decrement as u64 * (epoch / self.period) as u64;
        (self.start as u64).saturating_sub(drop).max(self.target as u64) as u32
    }
}

/// Half-cosine decay from `lr0` at epoch 0 to 0 at `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    /// Minibatch size for image runs; graph runs are always full-batch.
    pub batch: usize,
    pub seed: u64,
    /// `None` trains at full precision throughout.
    pub schedule: Option<BitSchedule>,
    /// Weight of the total-variation penalty on trunk feature maps
    /// (image networks only).
    pub tv_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr0: 0.1,
            momentum: 0.9,
            batch: 32,
            seed: 0,
            schedule: None,
            tv_lambda: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::arg("train config", format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("train config", format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::arg("train config", "batch size must be at least 1"));
        }
        if !self.tv_lambda.is_finite() || self.tv_lambda < 0.0 {
            return Err(Error::arg("train config", format!("tv_lambda must be >= 0, got {}", self.tv_lambda)));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }
}

/// Heavy-ball SGD over key-addressed parameters:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
pub struct Optimizer<T: Scalar> {
    pub momentum: T,
    velocity: BTreeMap<ParamKey, Tensor<T>>,
}

/// Clip scales get the positivity projection; everything else does not.
pub fn is_alpha_key(key: ParamKey) -> bool {
    match key {
        ParamKey::InputAlpha => true,
        ParamKey::Block { slot, .. } => matches!(slot, Slot::AlphaW(_) | Slot::AlphaA(_)),
    }
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(momentum: T) -> Self {
        Optimizer { momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, key: ParamKey, grad: &Tensor<T>, param: &mut Tensor<T>, lr: T) {
        let v = self.velocity.entry(key).or_insert_with(|| Tensor::zeros(grad.shape()));
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = self.momentum * *vi + *gi;
        }
        param.add_scaled(v, -lr);
        if is_alpha_key(key) {
            let floor = T::of(ALPHA_FLOOR);
            for p in param.data_mut() {
                if *p < floor {
                    *p = floor;
                }
            }
        }
    }
}

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub bits: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,bits,lr,train_loss,train_acc,val_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.bits, r.lr, r.train_loss, r.train_acc, r.val_acc
        ));
    }
    out
}

/// Index of the largest entry in each row of an `[n, k]` tensor.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let k = *t.shape().last().expect("non-empty shape");
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fisher–Yates shuffle driven by the training RNG.
pub fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.random_range(0..=i));
    }
}

/// Shuffles `0..n` and holds out every tenth sample (rounded down) for
/// validation. With fewer than ten samples the validation set is empty
/// and callers fall back to training accuracy.
pub fn holdout_split(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, rng);
    let n_val = n / 10;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn bits_label(schedule: &Option<BitSchedule>, epoch: usize) -> u32 {
    match schedule {
        Some(s) => s.at(epoch),
        None => 32,
    }
}

/// Accuracy of the network on the selected samples, evaluated in batches.
pub fn evaluate_image<T: Scalar>(
    net: &mut Network<T>,
    ds: &ImageDataset<T>,
    indices: &[usize],
    batch: usize,
    mode: QuantMode,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::BadData("cannot evaluate on an empty sample set".into()));
    }
    let mut hits = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let (images, labels) = ds.batch(chunk);
        let tape = Tape::new();
        let x = tape.constant(images);
        let pass = net.forward(&tape, x, mode)?;
        let pred = argmax_rows(&*tape.value(pass.output));
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Minibatch SGD on an image network. Returns one metrics row per epoch;
/// with zero epochs the network is untouched and the table is empty.
pub fn train_image<T: Scalar>(
    net: &mut Network<T>,
    ds: &ImageDataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::BadData("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) = holdout_split(ds.len(), &mut rng);
    let mut opt = Optimizer::new(T::of(cfg.momentum));
    let mut rows = Vec::with_capacity(cfg.epochs);
    let lambda = T::of(cfg.tv_lambda);

    for epoch in 0..cfg.epochs {
        if let Some(s) = &cfg.schedule {
            let b = s.at(epoch);
            net.set_bits(b, b)?;
        }
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        shuffle(&mut train_idx, &mut rng);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in train_idx.chunks(cfg.batch) {
            let (images, labels) = ds.batch(chunk);
            let tape = Tape::new();
            let x = tape.constant(images);
            let pass = net.forward(&tape, x, QuantMode::FULL)?;
            let mut loss = tape.cross_entropy(pass.output, Rc::new(labels.clone()))?;
            if cfg.tv_lambda > 0.0 {
                for &tap in &pass.taps {
                    let tv = tape.tv_norm(tap)?;
                    loss = tape.add(loss, tape.scale(tv, lambda))?;
                }
            }
            let lv = tape.value(loss).item()?.as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += lv * chunk.len() as f64;
            let pred = argmax_rows(&*tape.value(pass.output));
            hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();

            let mut grads = tape.backward(loss)?;
            for &(key, var) in &pass.params {
                if let Some(g) = grads.take(var) {
                    if let Some(p) = net.param_mut(key) {
                        opt.step(key, &g, p, T::of(lr));
                    }
                }
            }
        }

        let val_acc = if val_idx.is_empty() {
            evaluate_image(net, ds, &train_idx, cfg.batch, QuantMode::FULL)?
        } else {
            evaluate_image(net, ds, &val_idx, cfg.batch, QuantMode::FULL)?
        };
        rows.push(EpochRow {
            epoch,
            bits: bits_label(&cfg.schedule, epoch),
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: hits as f64 / train_idx.len() as f64,
            val_acc,
        });
    }
    Ok(rows)
}

fn masked_accuracy(pred: &[usize], labels: &[usize], mask: &[bool]) -> f64 {
    let total = mask.iter().filter(|&&m| m).count();
    if total == 0 {
        return 0.0;
    }
    let hits = pred
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|((p, l), &m)| m && p == l)
        .count();
    hits as f64 / total as f64
}

/// Accuracy over the masked nodes of the dataset's graph.
pub fn evaluate_graph<T: Scalar>(
    net: &mut GraphNetwork<T>,
    ds: &GraphDataset<T>,
    mask: &[bool],
    mode: QuantMode,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(ds.graph.features.clone());
    let pass = net.forward(&tape, x, mode)?;
    let pred = argmax_rows(&*tape.value(pass.output));
    Ok(masked_accuracy(&pred, &ds.labels, mask))
}

/// Full-batch SGD on a graph network with masked cross-entropy. The batch
/// size in the config is ignored; the smoothness penalty is an image-model
/// feature and is rejected here.
pub fn train_graph<T: Scalar>(
    net: &mut GraphNetwork<T>,
    ds: &GraphDataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    if cfg.tv_lambda > 0.0 {
        return Err(Error::arg("train", "the smoothness penalty applies to image feature maps, not graphs"));
    }
    let n_train = ds.train_mask.iter().filter(|&&m| m).count();
    if n_train == 0 {
        return Err(Error::BadData("graph dataset has no training nodes".into()));
    }
    let labels = Rc::new(ds.labels.clone());
    let train_mask = Rc::new(ds.train_mask.clone());
    let mut opt = Optimizer::new(T::of(cfg.momentum));
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if let Some(s) = &cfg.schedule {
            let b = s.at(epoch);
            net.set_bits(b, b)?;
        }
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);

        let tape = Tape::new();
        let x = tape.constant(ds.graph.features.clone());
        let pass = net.forward(&tape, x, QuantMode::FULL)?;
        let loss = tape.masked_cross_entropy(pass.output, labels.clone(), train_mask.clone())?;
        let lv = tape.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let pred = argmax_rows(&*tape.value(pass.output));
        let train_acc = masked_accuracy(&pred, &ds.labels, &ds.train_mask);
        let val_acc = masked_accuracy(&pred, &ds.labels, &ds.val_mask);

        let mut grads = tape.backward(loss)?;
        for &(key, var) in &pass.params {
            if let Some(g) = grads.take(var) {
                if let Some(p) = net.param_mut(key) {
                    opt.step(key, &g, p, T::of(lr));
                }
            }
        }

        rows.push(EpochRow {
            epoch,
            bits: bits_label(&cfg.schedule, epoch),
            lr,
            train_loss: lv,
            train_acc,
            val_acc,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_images, generate_sbm, SbmParams};
    use crate::graph::{build_graph_network, GcnKind, GcnSpec};
    use crate::layers::{build_network, BlockKind, BlockSpec};

    #[test]
    fn cosine_schedule_hits_the_landmarks() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1), 0.0);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(30, 100, 0.1) > cosine_lr(31, 100, 0.1));
    }

    #[test]
    fn bit_schedule_steps_down_and_clamps() {
        let s = BitSchedule::stepped(16, 10, 4);
        assert_eq!(s.at(0), 16);
        assert_eq!(s.at(9), 16);
        assert_eq!(s.at(10), 15);
        assert_eq!(s.at(25), 14);
        assert_eq!(s.at(1000), 4);
        assert_eq!(BitSchedule::constant(8).at(500), 8);

        assert!(BitSchedule::stepped(16, 0, 4).validate().is_err());
        assert!(BitSchedule::stepped(16, 10, 1).validate().is_err());
        assert!(BitSchedule::stepped(4, 10, 8).validate().is_err());
        assert!(BitSchedule::stepped(16, 10, 4).validate().is_ok());
    }

    #[test]
    fn sgd_fixtures() {
        // No momentum: one step moves by -lr * g.
        let mut opt = Optimizer::<f64>::new(0.0);
        let key = ParamKey::Block { index: 1, slot: Slot::K0 };
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        opt.step(key, &g, &mut p, 0.1);
        assert_eq!(p.data()[0], -0.1);

        // Heavy ball: after two unit-gradient steps at lr 1, momentum 0.9,
        // the parameter has moved 1 + 1.9 = 2.9.
        let mut opt = Optimizer::<f64>::new(0.9);
        let mut p = Tensor::scalar(0.0);
        opt.step(key, &g, &mut p, 1.0);
        opt.step(key, &g, &mut p, 1.0);
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn alpha_scales_stay_above_the_floor() {
        let key = ParamKey::Block { index: 1, slot: Slot::AlphaW(0) };
        assert!(is_alpha_key(key));
        assert!(is_alpha_key(ParamKey::InputAlpha));
        assert!(!is_alpha_key(ParamKey::Block { index: 1, slot: Slot::K0 }));

        let mut opt = Optimizer::<f64>::new(0.0);
        let mut alpha = Tensor::scalar(0.5);
        let g = Tensor::scalar(100.0);
        opt.step(key, &g, &mut alpha, 1.0); // would land at -99.5
        assert_eq!(alpha.data()[0], ALPHA_FLOOR);

        // Kernels are free to go negative.
        let mut k = Tensor::scalar(0.5);
        opt.step(ParamKey::Block { index: 1, slot: Slot::K0 }, &g, &mut k, 1.0);
        assert!(k.data()[0] < 0.0);
    }

    #[test]
    fn tv_penalty_matches_the_checkerboard_value() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let tv = tape.tv_norm(x).unwrap();
        let loss = tape.scale(tv, 0.5);
        assert_eq!(tape.value(loss).item().unwrap(), 0.5 * 4.0);
    }

    fn tiny_image_net(quant: bool) -> crate::layers::Network<f64> {
        let mut mid = BlockSpec::new(BlockKind::SymRes, 4, 4);
        if quant {
            mid = mid.with_quant(4, 4);
        }
        let specs = vec![
            BlockSpec::new(BlockKind::Opening, 1, 4),
            mid,
            BlockSpec::new(BlockKind::Classifier, 4, 2),
        ];
        build_network(&specs, 40).unwrap()
    }

    #[test]
    fn image_training_learns_the_separable_task() {
        let ds = generate_images::<f64>(60, 1, 2, 0.05, 3).unwrap();
        let mut net = tiny_image_net(false);
        let cfg = TrainConfig { epochs: 12, lr0: 0.05, batch: 16, seed: 1, ..TrainConfig::default() };
        let rows = train_image(&mut net, &ds, &cfg).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.first().unwrap().train_loss > rows.last().unwrap().train_loss);
        assert!(rows.last().unwrap().train_acc > 0.9, "final train acc {}", rows.last().unwrap().train_acc);
        assert_eq!(rows[0].bits, 32);
        assert_eq!(rows[0].lr, 0.05);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = generate_images::<f64>(30, 1, 2, 0.1, 9).unwrap();
        let run = || {
            let mut net = tiny_image_net(true);
            let cfg = TrainConfig {
                epochs: 3,
                lr0: 0.02,
                batch: 8,
                seed: 7,
                schedule: Some(BitSchedule::stepped(8, 2, 4)),
                ..TrainConfig::default()
            };
            let rows = train_image(&mut net, &ds, &cfg).unwrap();
            let mut params = Vec::new();
            net.visit_params(|k, t| params.push((k, t.clone())));
            (rows, params)
        };
        let (rows_a, params_a) = run();
        let (rows_b, params_b) = run();
        assert_eq!(rows_a, rows_b);
        assert_eq!(params_a, params_b);
        // The schedule column reflects the annealing steps.
        assert_eq!(rows_a.iter().map(|r| r.bits).collect::<Vec<_>>(), vec![8, 8, 7]);
    }

    #[test]
    fn zero_epochs_touch_nothing() {
        let ds = generate_images::<f64>(12, 1, 2, 0.0, 0).unwrap();
        let mut net = tiny_image_net(false);
        let mut before = Vec::new();
        net.visit_params(|k, t| before.push((k, t.clone())));
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let rows = train_image(&mut net, &ds, &cfg).unwrap();
        assert!(rows.is_empty());
        let mut after = Vec::new();
        net.visit_params(|k, t| after.push((k, t.clone())));
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_loss_reports_the_epoch() {
        let ds = generate_images::<f64>(12, 1, 2, 0.0, 0).unwrap();
        let mut net = tiny_image_net(false);
        // Poison a logit source; the first batch loss is then NaN.
        let bias = ParamKey::Block { index: 2, slot: Slot::ClsB };
        net.param_mut(bias).unwrap().data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 2, batch: 12, ..TrainConfig::default() };
        match train_image(&mut net, &ds, &cfg) {
            Err(Error::NonFiniteLoss { epoch: 0 }) => {}
            other => panic!("expected non-finite loss at epoch 0, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn one_full_batch_epoch_is_plain_sgd() {
        // With momentum 0, no quantization, and no penalty, the loop must
        // reproduce a hand-rolled gradient step exactly.
        let ds = generate_images::<f64>(15, 1, 2, 0.2, 21).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            lr0: 0.05,
            momentum: 0.0,
            batch: 64, // larger than the train split: one batch per epoch
            seed: 5,
            ..TrainConfig::default()
        };

        let mut trained = tiny_image_net(false);
        train_image(&mut trained, &ds, &cfg).unwrap();

        // Replay the loop's RNG stream: split first, then one shuffle.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut train_idx, _) = holdout_split(ds.len(), &mut rng);
        shuffle(&mut train_idx, &mut rng);

        let mut manual = tiny_image_net(false);
        let (images, labels) = ds.batch(&train_idx);
        let tape = Tape::new();
        let x = tape.constant(images);
        let pass = manual.forward(&tape, x, QuantMode::FULL).unwrap();
        let loss = tape.cross_entropy(pass.output, Rc::new(labels)).unwrap();
        let lr = cosine_lr(0, 1, cfg.lr0);
        let mut grads = tape.backward(loss).unwrap();
        for (key, var) in &pass.params {
            if let Some(g) = grads.take(*var) {
                manual.param_mut(*key).unwrap().add_scaled(&g, -lr);
            }
        }

        let mut got = Vec::new();
        trained.visit_params(|k, t| got.push((k, t.clone())));
        let mut want = Vec::new();
        manual.visit_params(|k, t| want.push((k, t.clone())));
        assert_eq!(got, want);
    }

    #[test]
    fn graph_training_runs_and_improves() {
        let params = SbmParams { nodes: 45, blocks: 3, p_intra: 0.4, p_inter: 0.02, noise: 0.3, ..SbmParams::default() };
        let ds = generate_sbm::<f64>(&params, 4).unwrap();
        let spec = GcnSpec {
            kind: GcnKind::Sym,
            layers: 2,
            features_in: 8,
            width: 8,
            classes: 3,
            h: 0.3,
            quant: None,
        };
        let mut net = build_graph_network(&spec, &ds.graph, 6).unwrap();
        let cfg = TrainConfig { epochs: 40, lr0: 0.3, seed: 2, ..TrainConfig::default() };
        let rows = train_graph(&mut net, &ds, &cfg).unwrap();
        assert_eq!(rows.len(), 40);
        assert!(rows.first().unwrap().train_loss > rows.last().unwrap().train_loss);
        assert!(rows.last().unwrap().train_acc > 0.65, "train acc {}", rows.last().unwrap().train_acc);

        // Penalty weight is rejected for graphs.
        let bad = TrainConfig { tv_lambda: 0.1, ..cfg };
        assert!(train_graph(&mut net, &ds, &bad).is_err());
    }

    #[test]
    fn metrics_table_shape() {
        let rows = vec![EpochRow { epoch: 0, bits: 8, lr: 0.1, train_loss: 0.5, train_acc: 0.75, val_acc: 0.5 }];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,bits,lr,train_loss,train_acc,val_acc"));
        assert_eq!(lines.next(), Some("0,8,0.1,0.5,0.75,0.5"));
        assert_eq!(lines.next(), None);
    }
}
