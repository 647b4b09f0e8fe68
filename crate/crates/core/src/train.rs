//! Losses, the two-stage objective and the mini-batch Adam training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::IntentionMatrix;
use crate::decoder::GaussianSequence;
use crate::error::{Error, Result};
use crate::intention::IntentionDistribution;
use crate::model::{ForwardVars, Gimtp, Sample};
use crate::params::{AdamConfig, ParamGrads};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to predicted standard deviations inside the NLL, meters.
pub const SIGMA_FLOOR: f64 = 1e-3;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 || a.shape()[1] != 2 {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean over steps of squared Euclidean error between `[F, 2]` tensors.
pub fn mse_loss(mu: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair("mse_loss", mu, y)?;
    let f = mu.shape()[0] as f64;
    Ok(mu.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f)
}

/// Bivariate Gaussian negative log-likelihood summed over steps.
pub fn nll_traj(theta: &GaussianSequence, y: &Tensor) -> Result<f64> {
    check_pair("nll_traj", &theta.means(), y)?;
    let mut total = 0.0;
    for (t, s) in theta.steps.iter().enumerate() {
        if !(s.sigma_x > 0.0 && s.sigma_y > 0.0 && s.rho.abs() < 1.0) {
            return Err(Error::Contract(format!(
                "step {t}: need sigma > 0 and |rho| < 1, got ({}, {}, {})",
                s.sigma_x, s.sigma_y, s.rho
            )));
        }
        let (sx, sy) = (s.sigma_x.max(SIGMA_FLOOR), s.sigma_y.max(SIGMA_FLOOR));
        let dx = s.mu_x - y.get(&[t, 0]);
        let dy = s.mu_y - y.get(&[t, 1]);
        let q = 1.0 - s.rho * s.rho;
        let z = dx * dx / (sx * sx) - 2.0 * s.rho * dx * dy / (sx * sy) + dy * dy / (sy * sy);
        total += (2.0 * PI * sx * sy * q.sqrt()).ln() + z / (2.0 * q);
    }
    Ok(total)
}

/// Cross-entropy of both heads, summed over heads and averaged over steps.
pub fn nll_intention(p: &IntentionDistribution, truth: &IntentionMatrix) -> Result<f64> {
    let f = truth.horizon();
    if p.horizon() != f {
        return Err(Error::dim("nll_intention", &[p.horizon(), 6], &[f, 6]));
    }
    let mut total = 0.0;
    for t in 0..f {
        total -= p.p_lat[t][truth.lat[t].index()].ln() + p.p_lon[t][truth.lon[t].index()].ln();
    }
    Ok(total / f as f64)
}

/// Tape versions of the losses.
pub mod graph {
    use super::*;

    pub fn mse(tape: &mut Tape, mu: Var, y: Var) -> Result<Var> {
        check_pair("mse_loss", tape.value(mu), tape.value(y))?;
        let f = tape.value(mu).shape()[0] as f64;
        let d = tape.sub(mu, y)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / f))
    }

    pub fn nll_traj(tape: &mut Tape, mu: Var, sigma: Var, rho: Var, y: Var) -> Result<Var> {
        check_pair("nll_traj", tape.value(mu), tape.value(y))?;
        let f = tape.value(mu).shape()[0];
        let sigma = tape.clamp_min(sigma, SIGMA_FLOOR);
        let d = tape.sub(mu, y)?;
        let inv_sigma = tape.recip(sigma);
        // standardized residuals [F, 2]
        let z = tape.mul(d, inv_sigma)?;
        let zx = tape.slice(z, 1, 0, 1)?;
        let zy = tape.slice(z, 1, 1, 1)?;
        let zx2 = tape.square(zx);
        let zy2 = tape.square(zy);
        let zxy = tape.mul(zx, zy)?;
        let rzxy = tape.mul(rho, zxy)?;
        let cross = tape.scale(rzxy, -2.0);
        let quad = tape.add(zx2, zy2)?;
        let quad = tape.add(quad, cross)?;
        let rho2 = tape.square(rho);
        let neg = tape.scale(rho2, -1.0);
        let q = tape.add_scalar(neg, 1.0);
        let inv_q = tape.recip(q);
        let maha = tape.mul(quad, inv_q)?;
        let maha = tape.scale(maha, 0.5);
        let log_sigma = tape.ln(sigma);
        let log_sigma = tape.sum(log_sigma);
        let log_q = tape.ln(q);
        let log_q = tape.sum(log_q);
        let half_log_q = tape.scale(log_q, 0.5);
        let maha = tape.sum(maha);
        let a = tape.add(log_sigma, half_log_q)?;
        let b = tape.add(a, maha)?;
        Ok(tape.add_scalar(b, f as f64 * (2.0 * PI).ln()))
    }

    /// `m_true` is `[F, 6]` one-hot.
    pub fn nll_intention(tape: &mut Tape, lat_logits: Var, lon_logits: Var, m_true: &Tensor) -> Result<Var> {
        let f = m_true.shape()[0] as f64;
        let logits = tape.concat(&[lat_logits, lon_logits], 1)?;
        let lat = tape.slice(logits, 1, 0, 3)?;
        let lon = tape.slice(logits, 1, 3, 3)?;
        let ls_lat = tape.log_softmax(lat, 1)?;
        let ls_lon = tape.log_softmax(lon, 1)?;
        let ls = tape.concat(&[ls_lat, ls_lon], 1)?;
        let m = tape.constant(m_true.clone());
        let picked = tape.mul(ls, m)?;
        let s = tape.sum(picked);
        Ok(tape.scale(s, -1.0 / f))
    }

    /// Mean squared error over occupied entries of `[F, N, C]` tensors.
    pub fn masked_mse(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let count = mask.sum();
        if count <= 0.0 {
            return Err(Error::Contract("masked_mse over an empty mask".into()));
        }
        let t = tape.constant(target.clone());
        let mk = tape.constant(mask.clone());
        let d = tape.sub(pred, t)?;
        let d = tape.mul(d, mk)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / count))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub stage1_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    /// Fuse and decode with the ground-truth intentions during training.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            lr_decay: 0.95,
            alpha: 0.2,
            beta: 0.1,
            stage1_epochs: 5,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            clip_norm: None,
            teacher_forcing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32 - 1)
    }

    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch <= self.stage1_epochs {
            Stage::Mse
        } else {
            Stage::Nll
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Mse,
    Nll,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Mse => 1,
            Stage::Nll => 2,
        }
    }
}

/// Loss terms of one sample or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub mse: f64,
    pub nll_traj: f64,
    pub nll_m: f64,
    pub fg_mse: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.loss += o.loss;
        self.mse += o.mse;
        self.nll_traj += o.nll_traj;
        self.nll_m += o.nll_m;
        self.fg_mse += o.fg_mse;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.loss *= k;
        self.mse *= k;
        self.nll_traj *= k;
        self.nll_m *= k;
        self.fg_mse *= k;
        self
    }
}

/// Builds the total loss of one forward pass on the tape.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardVars,
    s: &Sample,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let y = tape.constant(s.y.clone());
    let mse = graph::mse(tape, out.dec.mu, y)?;
    let nll = graph::nll_traj(tape, out.dec.mu, out.dec.sigma, out.dec.rho, y)?;
    let nll_m = graph::nll_intention(tape, out.intent.lat_logits, out.intent.lon_logits, &s.m_true)?;
    let traj = match stage {
        Stage::Mse => mse,
        Stage::Nll => nll,
    };
    let am = tape.scale(nll_m, cfg.alpha);
    let mut loss = tape.add(traj, am)?;
    let mut fg = 0.0;
    if let Some(hf) = out.enc.hf_features {
        let fgv = graph::masked_mse(tape, hf, &s.future_features, &s.future_mask)?;
        fg = tape.value(fgv).item();
        let bf = tape.scale(fgv, cfg.beta);
        loss = tape.add(loss, bf)?;
    }
    let b = LossBreakdown {
        loss: tape.value(loss).item(),
        mse: tape.value(mse).item(),
        nll_traj: tape.value(nll).item(),
        nll_m: tape.value(nll_m).item(),
        fg_mse: fg,
    };
    Ok((loss, b))
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    model: &Gimtp,
    s: &Sample,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<(ParamGrads, LossBreakdown)> {
    let mut tape = Tape::new();
    let m = cfg.teacher_forcing.then_some(&s.m_true);
    let out = model.forward(&mut tape, s, m)?;
    let (loss, b) = total_loss(&mut tape, &out, s, stage, cfg)?;
    if !b.loss.is_finite() {
        return Ok((ParamGrads::empty(model.store.len()), b));
    }
    let grads = tape.backward(loss)?;
    Ok((tape.param_grads(&model.store, &grads), b))
}

/// Loss terms of one sample without gradients.
pub fn sample_loss(model: &Gimtp, s: &Sample, stage: Stage, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let m = cfg.teacher_forcing.then_some(&s.m_true);
    let out = model.forward(&mut tape, s, m)?;
    Ok(total_loss(&mut tape, &out, s, stage, cfg)?.1)
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub nll_traj: f64,
    pub nll_m: f64,
    pub fg_mse: f64,
}

/// Runs epochs `start_epoch + 1 ..= cfg.epochs`, calling
/// `on_epoch` after each epoch.
pub fn train(
    model: &mut Gimtp,
    samples: &[Sample],
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochMetrics, &Gimtp) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let adam = AdamConfig::default();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in start_epoch + 1..=cfg.epochs {
        let stage = cfg.stage(epoch);
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(ParamGrads, LossBreakdown)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(model, &samples[i], stage, cfg))
                .collect();
            let mut total = ParamGrads::empty(model.store.len());
            for r in results {
                let (g, b) = r?;
                if !b.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss in epoch {epoch}, batch {bi}"
                    )));
                }
                total.add_assign(&g);
                sum.add(&b);
            }
            total.scale(1.0 / batch.len() as f64);
            model.store.set_grads(total)?;
            if let Some(c) = cfg.clip_norm {
                model.store.clip_grad_norm(c);
            }
            model.store.adam_step(lr, &adam)?;
        }
        let mean = sum.scaled(1.0 / samples.len() as f64);
        let rec = EpochMetrics {
            epoch,
            stage: stage.number(),
            lr,
            loss: mean.loss,
            mse: mean.mse,
            nll_traj: mean.nll_traj,
            nll_m: mean.nll_m,
            fg_mse: mean.fg_mse,
        };
        on_epoch(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}
