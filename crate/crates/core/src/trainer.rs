//! Adam training with step learning-rate decay on normalized labels.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nnet::{Mode, NetConfig, Network, ParamStore, Tape, BN_MOMENTUM};
use crate::preprocess::FeatureStack;
use crate::NORMALIZATION;

/// Samples per inference batch during validation and prediction.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_gamma: f64,
    pub lr_step: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_gamma: 0.8,
            lr_step: 8,
            batch_size: 64,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma must be in (0, 1]");
        }
        if self.lr_step == 0 {
            return bad("lr_step must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        Ok(())
    }

    /// Learning rate of a zero-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    /// Inference-mode MSE on the validation split; NaN without one.
    pub val_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_mse,val_mse,lr,seconds";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.train_mse, e.val_mse, e.lr, e.seconds)?;
        }
        Ok(())
    }

    /// Log with the timing column zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainLog {
        let mut out = self.clone();
        out.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        out
    }
}

/// Trains from a fresh seeded initialization on the dataset's training split
/// and returns the parameters of the epoch with the lowest validation MSE.
pub fn train(data: &LabeledDataset, cfg: &TrainConfig, net_cfg: &NetConfig) -> Result<(ParamStore, TrainLog)> {
    train_with_progress(data, cfg, net_cfg, |_| {})
}

pub fn train_with_progress(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    net_cfg: &NetConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamStore, TrainLog)> {
    cfg.validate()?;
    let net = Network::new(net_cfg)?;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    // one model per carrier frequency
    let f0 = data.samples[0].frequency;
    if let Some(s) = data.samples.iter().find(|s| s.frequency != f0) {
        return Err(Error::Config(format!(
            "dataset mixes carrier frequencies {f0} Hz and {} Hz; train one model per frequency",
            s.frequency
        )));
    }
    let target = |i: usize| data.samples[i].pl_db / NORMALIZATION;

    let mut params = net.init_params(cfg.seed);
    let mut adam = Adam::new(params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = Tape::new(params.len());
    tape.set_input_gradients(false);
    let mut order = train_idx.clone();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let stacks: Vec<&FeatureStack> = chunk.iter().map(|&i| &data.samples[i].stack).collect();
            let input = net.batch_input_refs(&stacks)?;
            let trace = net.record(&params, input, Mode::Train, &mut tape)?;
            let pred = &tape.value(trace.output).data;
            let n = chunk.len() as f64;
            let mut upstream = Vec::with_capacity(chunk.len());
            for (p, &i) in pred.iter().zip(chunk) {
                let r = p - target(i);
                sq_sum += r * r;
                upstream.push(2.0 * r / n);
            }
            if !sq_sum.is_finite() {
                return Err(Error::Divergence { epoch, loss: sq_sum });
            }
            let grad = tape.backward(params.values(), &upstream)?;
            adam.step(params.values_mut(), grad, lr);
            params.update_running(tape.batch_stats(), BN_MOMENTUM);
        }
        let train_mse = sq_sum / order.len() as f64;
        if !train_mse.is_finite() || !params.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_mse });
        }
        let val_mse = if val_idx.is_empty() {
            f64::NAN
        } else {
            let pred = predict_normalized(&net, &params, val_idx.iter().map(|&i| &data.samples[i].stack))?;
            pred.iter().zip(&val_idx).map(|(p, &i)| (p - target(i)).powi(2)).sum::<f64>() / val_idx.len() as f64
        };
        let entry = EpochLog {
            epoch,
            train_mse,
            val_mse,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        // without a validation split the last epoch is kept
        if best.as_ref().is_none_or(|(b, _)| val_mse.is_nan() || val_mse < *b) {
            best = Some((val_mse, params.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, params) = best.expect("at least one epoch");
    Ok((params, log))
}

/// Inference-mode outputs in normalized units, evaluated in fixed-size batches.
pub fn predict_normalized<'a>(
    net: &Network,
    params: &ParamStore,
    stacks: impl IntoIterator<Item = &'a FeatureStack>,
) -> Result<Vec<f64>> {
    let all: Vec<&FeatureStack> = stacks.into_iter().collect();
    let mut out = Vec::with_capacity(all.len());
    let mut tape = Tape::new(net.n_params());
    for chunk in all.chunks(EVAL_BATCH) {
        let input = net.batch_input_refs(chunk)?;
        let trace = net.record(params, input, Mode::Inference, &mut tape)?;
        out.extend_from_slice(&tape.value(trace.output).data);
    }
    Ok(out)
}

/// Predicted path loss in dB for one stack.
pub fn predict_pl(params: &ParamStore, net_cfg: &NetConfig, stack: &FeatureStack) -> Result<f64> {
    let net = Network::new(net_cfg)?;
    Ok(denormalize(net.forward(params, std::slice::from_ref(stack))?[0]))
}

/// Predicted path loss in dB for many stacks.
pub fn predict_pl_batch<'a>(
    net: &Network,
    params: &ParamStore,
    stacks: impl IntoIterator<Item = &'a FeatureStack>,
) -> Result<Vec<f64>> {
    Ok(predict_normalized(net, params, stacks)?.into_iter().map(denormalize).collect())
}

#[inline]
pub fn denormalize(v: f64) -> f64 {
    v * NORMALIZATION
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        for e in 0..8 {
            assert_eq!(c.learning_rate(e), 1e-3);
        }
        assert!((c.learning_rate(8) - 8e-4).abs() < 1e-18);
        assert!((c.learning_rate(16) - 6.4e-4).abs() < 1e-18);
    }

    #[test]
    fn one_adam_step_matches_closed_form() {
        // loss (theta - 3)^2 at theta = 1: g = -4
        let mut theta = [1.0];
        let g = 2.0 * (theta[0] - 3.0);
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        adam.step(&mut theta, &[g], 1e-3);
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let expected = 1.0 - 1e-3 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-12);
        assert!((theta[0] - (1.0 + 1e-3 * 4.0 / (4.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn denormalization() {
        assert_eq!(denormalize(0.4), 100.0);
        assert_eq!(denormalize(0.0), 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.lr_gamma = 1.5;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
