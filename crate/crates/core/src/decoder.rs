//! Intention-specific feature fusion, the recurrent decoder and the
//! bivariate-Gaussian output transform.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LatIntention, LonIntention, NUM_INTENTIONS};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One future step of the output distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStep {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSequence {
    pub steps: Vec<GaussianStep>,
}

impl GaussianSequence {
    /// From `[F, 2]` means, `[F, 2]` std devs and `[F, 1]` correlations.
    pub fn from_tensors(mu: &Tensor, sigma: &Tensor, rho: &Tensor) -> Self {
        let steps = (0..mu.shape()[0])
            .map(|t| GaussianStep {
                mu_x: mu.get(&[t, 0]),
                mu_y: mu.get(&[t, 1]),
                sigma_x: sigma.get(&[t, 0]),
                sigma_y: sigma.get(&[t, 1]),
                rho: rho.get(&[t, 0]),
            })
            .collect();
        GaussianSequence { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `[F, 2]` mean positions.
    pub fn means(&self) -> Tensor {
        let data = self.steps.iter().flat_map(|s| [s.mu_x, s.mu_y]).collect();
        Tensor::new(vec![self.len(), 2], data).expect("F x 2")
    }

    pub fn all_finite(&self) -> bool {
        self.steps.iter().all(|s| {
            [s.mu_x, s.mu_y, s.sigma_x, s.sigma_y, s.rho]
                .iter()
                .all(|v| v.is_finite())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub lat: LatIntention,
    pub lon: LonIntention,
    pub probability: f64,
    pub trajectory: GaussianSequence,
}

/// Checks that both 3-class blocks of every `[F, 6]` row sum to one.
pub fn check_intention_rows(m: &Tensor) -> Result<()> {
    let s = m.shape();
    if s.len() != 2 || s[1] != NUM_INTENTIONS {
        return Err(Error::dim("fuse", s, &[s.first().copied().unwrap_or(0), NUM_INTENTIONS]));
    }
    for (t, row) in m.data().chunks(NUM_INTENTIONS).enumerate() {
        for (head, block) in row.chunks(3).enumerate() {
            let total: f64 = block.iter().sum();
            if (total - 1.0).abs() > 1e-6 || block.iter().any(|&p| p < 0.0) {
                return Err(Error::Contract(format!(
                    "intention weights at step {t} head {head} sum to {total}, expected 1"
                )));
            }
        }
    }
    Ok(())
}

/// `[F, 6]` with the given classes set at every step.
pub fn forced_intentions(horizon: usize, lat: LatIntention, lon: LonIntention) -> Tensor {
    crate::data::IntentionMatrix::uniform(horizon, lat, lon).one_hot()
}

/// How the per-timestep embeddings become per-future-step decoder inputs.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// Intention-weighted softmax over time with stacked `[L, F, 6]` logits.
    Weighted { w_map: ParamId },
    /// Dense map from the time-mean embedding to all F decoder inputs.
    Mean { map: Linear },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub steps_in: usize,
    pub horizon: usize,
    pub width: usize,
    pub fusion: Fusion,
    pub d1: Linear,
    pub gru_x: [Linear; 3],
    pub gru_h: [Linear; 3],
    pub d2: Mlp2,
    pub out_scale: f64,
}

/// Tape handles of one decode.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// `[L, F]` fusion weights, absent for mean fusion.
    pub weights: Option<Var>,
    /// `[F, 2]`
    pub mu: Var,
    /// `[F, 2]`
    pub sigma: Var,
    /// `[F, 1]`
    pub rho: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderWidths {
    pub embed: usize,
    pub d1: usize,
    pub gru: usize,
    pub d2: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        steps_in: usize,
        horizon: usize,
        widths: DecoderWidths,
        mean_fusion: bool,
        out_scale: f64,
    ) -> Result<Self> {
        let dv = widths.embed;
        let fusion = if mean_fusion {
            Fusion::Mean {
                map: Linear::new(store, rng, "fusion.mean", dv, horizon * dv)?,
            }
        } else {
            // fan sizes of one (T+F) x F sheet
            let w_map = store.add_glorot(
                "fusion.w_map",
                &[steps_in, horizon, NUM_INTENTIONS],
                steps_in,
                horizon,
                rng,
            )?;
            Fusion::Weighted { w_map }
        };
        let d1 = Linear::new(store, rng, "mlp_d1", dv + NUM_INTENTIONS, widths.d1)?;
        let gate = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, g: &str| -> Result<(Linear, Linear)> {
            Ok((
                Linear::new(store, rng, &format!("gru.x{g}"), widths.d1, widths.gru)?,
                Linear::new(store, rng, &format!("gru.h{g}"), widths.gru, widths.gru)?,
            ))
        };
        let (xr, hr) = gate(store, rng, "r")?;
        let (xz, hz) = gate(store, rng, "z")?;
        let (xn, hn) = gate(store, rng, "n")?;
        let d2 = Mlp2::new(store, rng, "mlp_d2", widths.gru, widths.d2, 5)?;
        Ok(Decoder {
            steps_in,
            horizon,
            width: dv,
            fusion,
            d1,
            gru_x: [xr, xz, xn],
            gru_h: [hr, hz, hn],
            d2,
            out_scale,
        })
    }

    /// `h_tilde` is `[L, dv]`, `m` a `[F, 6]` constant of intention weights.
    /// Returns `[F, dv]` decoder inputs and the `[L, F]` weights.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h_tilde: Var,
        m: Var,
    ) -> Result<(Var, Option<Var>)> {
        check_intention_rows(tape.value(m))?;
        match &self.fusion {
            Fusion::Weighted { w_map } => {
                let w = tape.param(store, *w_map);
                let prod = tape.mul(w, m)?;
                let logits = tape.sum_axis(prod, 2)?;
                let u = tape.softmax(logits, 0)?;
                let ut = tape.transpose(u)?;
                let h_dec = tape.matmul(ut, h_tilde)?;
                Ok((h_dec, Some(u)))
            }
            Fusion::Mean { map } => {
                let l = tape.value(h_tilde).shape()[0];
                let ones = tape.constant(Tensor::full(&[1, l], 1.0 / l as f64));
                let mean = tape.matmul(ones, h_tilde)?;
                let flat = map.forward(tape, store, mean)?;
                Ok((tape.reshape(flat, &[self.horizon, self.width])?, None))
            }
        }
    }

    /// Runs the recurrent decoder on `[F, dv]` inputs with `[F, 6]` intention
    /// probabilities appended at every step.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h_dec: Var,
        p: Var,
    ) -> Result<(Var, Var, Var)> {
        let cat = tape.concat(&[h_dec, p], 1)?;
        let e = self.d1.forward(tape, store, cat)?;
        let e = tape.relu(e);
        let [xr, xz, xn] = &self.gru_x;
        let [hr, hz, hn] = &self.gru_h;
        let ar = xr.forward(tape, store, e)?;
        let az = xz.forward(tape, store, e)?;
        let an = xn.forward(tape, store, e)?;
        let wr = tape.param(store, hr.w);
        let wz = tape.param(store, hz.w);
        let wn = tape.param(store, hn.w);
        let br = tape.param(store, hr.b);
        let bz = tape.param(store, hz.b);
        let bn = tape.param(store, hn.b);
        let gru = self.gru_h[0].d_out;
        let mut h = tape.constant(Tensor::zeros(&[1, gru]));
        let mut states = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let xr_t = tape.slice(ar, 0, t, 1)?;
            let xz_t = tape.slice(az, 0, t, 1)?;
            let xn_t = tape.slice(an, 0, t, 1)?;
            let r = {
                let hh = tape.matmul(h, wr)?;
                let hh = tape.add(hh, br)?;
                let s = tape.add(xr_t, hh)?;
                tape.sigmoid(s)
            };
            let z = {
                let hh = tape.matmul(h, wz)?;
                let hh = tape.add(hh, bz)?;
                let s = tape.add(xz_t, hh)?;
                tape.sigmoid(s)
            };
            let n = {
                let hh = tape.matmul(h, wn)?;
                let hh = tape.add(hh, bn)?;
                let gated = tape.mul(r, hh)?;
                let s = tape.add(xn_t, gated)?;
                tape.tanh(s)
            };
            // h' = (1 - z) n + z h = n + z (h - n)
            let diff = tape.sub(h, n)?;
            let keep = tape.mul(z, diff)?;
            h = tape.add(n, keep)?;
            states.push(h);
        }
        let hs = tape.concat(&states, 0)?;
        let raw = self.d2.forward(tape, store, hs)?;
        let mu = tape.slice(raw, 1, 0, 2)?;
        let mu = tape.scale(mu, self.out_scale);
        let log_sigma = tape.slice(raw, 1, 2, 2)?;
        let sigma = tape.exp(log_sigma);
        let rho = tape.slice(raw, 1, 4, 1)?;
        let rho = tape.tanh(rho);
        Ok((mu, sigma, rho))
    }

    /// Fuses with `m_fuse` and decodes with `m_prob` appended.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h_tilde: Var,
        m_fuse: Var,
        m_prob: Var,
    ) -> Result<DecodeVars> {
        let (h_dec, weights) = self.fuse(tape, store, h_tilde, m_fuse)?;
        let (mu, sigma, rho) = self.decode(tape, store, h_dec, m_prob)?;
        Ok(DecodeVars {
            weights,
            mu,
            sigma,
            rho,
        })
    }
}

/// Horizon-mean joint probability of each (lat, lon) pair, renormalized.
/// Order is lat-major: (LK,CS), (LK,ACC), ..., (RLC,DEC).
pub fn mode_probabilities(p_lat: &[[f64; 3]], p_lon: &[[f64; 3]]) -> Result<[f64; 9]> {
    let f = p_lat.len();
    if f == 0 || p_lon.len() != f {
        return Err(Error::dim("mode_probabilities", &[f, 3], &[p_lon.len(), 3]));
    }
    let mut out = [0.0; 9];
    for (a, b) in p_lat.iter().zip(p_lon) {
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] += a[i] * b[j] / f as f64;
            }
        }
    }
    let total: f64 = out.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Numeric(format!("mode probabilities sum to {total}")));
    }
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}
