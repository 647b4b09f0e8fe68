//! The assembled network: configuration, parameter construction, forward
//! pass on one window and multimodal prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjacency::{build_adjacency, DynamicAdjacency};
use crate::data::{GroupWindow, LatIntention, LonIntention, NUM_FEATURES, NUM_INTENTIONS, NUM_SLOTS};
use crate::decoder::{
    forced_intentions, mode_probabilities, DecodeVars, Decoder, DecoderWidths, GaussianSequence,
    ModePrediction,
};
use crate::encoder::{repeat_last, Encoder, EncoderVars, GraphFilter};
use crate::error::{Error, Result};
use crate::intention::{IntentionDistribution, IntentionPredictor, IntentionVars};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Component toggles for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Plain symmetric-normalized GCN instead of diffusion convolution.
    pub no_dgcn: bool,
    /// Drop the future-guided encoder branch.
    pub no_fg: bool,
    /// Replace intention-weighted fusion with a dense map of the time-mean.
    pub no_ff: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub history: usize,
    pub horizon: usize,
    /// Chebyshev order K of the diffusion filter.
    pub diffusion_order: usize,
    pub dgcn_width: usize,
    pub mlp_v_width: usize,
    pub mlp_o_width: usize,
    pub lat_width: usize,
    pub lon_width: usize,
    pub d1_width: usize,
    pub gru_width: usize,
    pub d2_width: usize,
    /// Subtracted from (pos_lon, pos_lat, vel_lon, vel_lat) of occupied slots.
    pub input_shift: [f64; 4],
    /// Divides the shifted inputs.
    pub input_scale: [f64; 4],
    /// Decoder means are `out_scale * raw`, meters.
    pub out_scale: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history: 30,
            horizon: 50,
            diffusion_order: 2,
            dgcn_width: 256,
            mlp_v_width: 256,
            mlp_o_width: 256,
            lat_width: 256,
            lon_width: 256,
            d1_width: 128,
            gru_width: 128,
            d2_width: 128,
            input_shift: [0.0, 0.0, 25.0, 0.0],
            input_scale: [30.0, 4.0, 5.0, 1.0],
            out_scale: 1.0,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("history", self.history),
            ("horizon", self.horizon),
            ("dgcn_width", self.dgcn_width),
            ("mlp_v_width", self.mlp_v_width),
            ("mlp_o_width", self.mlp_o_width),
            ("lat_width", self.lat_width),
            ("lon_width", self.lon_width),
            ("d1_width", self.d1_width),
            ("gru_width", self.gru_width),
            ("d2_width", self.d2_width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.history < 2 {
            return Err(Error::Config("history must be at least 2".into()));
        }
        if !(1..=4).contains(&self.diffusion_order) {
            return Err(Error::Config("diffusion_order must be in 1..=4".into()));
        }
        if !self.input_scale.iter().chain([&self.out_scale]).all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Config("input_scale and out_scale must be positive".into()));
        }
        if !self.input_shift.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("input_shift must be finite".into()));
        }
        Ok(())
    }

    pub fn filter(&self) -> GraphFilter {
        if self.ablation.no_dgcn {
            GraphFilter::Simple
        } else {
            GraphFilter::Diffusion {
                order: self.diffusion_order,
            }
        }
    }

    /// Time length of the integrated embedding.
    pub fn fused_steps(&self) -> usize {
        if self.ablation.no_fg {
            self.history
        } else {
            self.history + self.horizon
        }
    }

    /// Standardizes the kinematic features of occupied slots in a
    /// `[S, N, C]` tensor. Empty slots stay all-zero.
    pub fn normalize(&self, feats: &Tensor) -> Tensor {
        let mut out = feats.clone();
        for slot in out.data_mut().chunks_mut(NUM_FEATURES) {
            if slot[4] == 1.0 {
                for k in 0..4 {
                    slot[k] = (slot[k] - self.input_shift[k]) / self.input_scale[k];
                }
            }
        }
        out
    }
}

/// Everything a forward pass needs from one window, precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T, N, C]` normalized history.
    pub x: Tensor,
    pub hist_supports: Vec<Tensor>,
    pub future_supports: Vec<Tensor>,
    /// `[F, 2]` meters.
    pub y: Tensor,
    /// `[F, N, C]` normalized ground-truth future features.
    pub future_features: Tensor,
    /// `[F, N, C]` 1 where the slot is occupied.
    pub future_mask: Tensor,
    /// `[F, 6]` one-hot labels.
    pub m_true: Tensor,
}

/// Tape handles of one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub enc: EncoderVars,
    pub intent: IntentionVars,
    pub dec: DecodeVars,
}

/// Prediction for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub target_id: i64,
    pub frame: i64,
    pub fused: GaussianSequence,
    pub modes: Vec<ModePrediction>,
    pub intentions: IntentionDistribution,
}

#[derive(Clone, Debug)]
pub struct Gimtp {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: Encoder,
    pub predictor: IntentionPredictor,
    pub decoder: Decoder,
}

impl Gimtp {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let c = &config;
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            c.filter(),
            c.history,
            c.horizon,
            NUM_FEATURES,
            c.dgcn_width,
            !c.ablation.no_fg,
        )?;
        let predictor = IntentionPredictor::new(
            &mut store,
            &mut rng,
            c.fused_steps(),
            c.horizon,
            NUM_SLOTS * c.dgcn_width,
            c.mlp_v_width,
            c.mlp_o_width,
            [c.lat_width, c.lon_width],
        )?;
        let widths = DecoderWidths {
            embed: c.mlp_v_width,
            d1: c.d1_width,
            gru: c.gru_width,
            d2: c.d2_width,
        };
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            c.fused_steps(),
            c.horizon,
            widths,
            c.ablation.no_ff,
            c.out_scale,
        )?;
        Ok(Gimtp {
            config,
            store,
            encoder,
            predictor,
            decoder,
        })
    }

    pub fn adjacency(&self, w: &GroupWindow) -> Result<DynamicAdjacency> {
        build_adjacency(w)
    }

    pub fn sample(&self, w: &GroupWindow) -> Result<Sample> {
        let c = &self.config;
        if w.history != c.history || w.horizon != c.horizon {
            return Err(Error::dim(
                "sample",
                &[w.history, w.horizon],
                &[c.history, c.horizon],
            ));
        }
        let adj = build_adjacency(w)?;
        let hist_supports = c.filter().supports(&adj.combined)?;
        let future_supports = if c.ablation.no_fg {
            Vec::new()
        } else {
            repeat_last(&hist_supports, c.horizon)?
        };
        let mut future_mask = Tensor::zeros(&[c.horizon, NUM_SLOTS, NUM_FEATURES]);
        for (t, m) in w.future_mask.iter().enumerate() {
            for (s, &occ) in m.iter().enumerate() {
                if occ {
                    for f in 0..NUM_FEATURES {
                        future_mask.set(&[t, s, f], 1.0);
                    }
                }
            }
        }
        Ok(Sample {
            x: c.normalize(&w.x),
            hist_supports,
            future_supports,
            y: w.y.clone(),
            future_features: c.normalize(&w.future_features),
            future_mask,
            m_true: w.intentions.one_hot(),
        })
    }

    /// Encoder and intention predictor only.
    pub fn encode(&self, tape: &mut Tape, s: &Sample) -> Result<(EncoderVars, IntentionVars)> {
        let x = tape.constant(s.x.clone());
        let hs: Vec<Var> = s.hist_supports.iter().map(|t| tape.constant(t.clone())).collect();
        let fs: Vec<Var> = s.future_supports.iter().map(|t| tape.constant(t.clone())).collect();
        let enc = self.encoder.encode(tape, &self.store, x, &hs, &fs)?;
        let intent = self.predictor.forward(tape, &self.store, enc.h_cat)?;
        Ok((enc, intent))
    }

    /// Full forward pass. With `m` given (`[F, 6]`), fusion and the decoder
    /// input use it; otherwise they use the predicted probabilities.
    pub fn forward(&self, tape: &mut Tape, s: &Sample, m: Option<&Tensor>) -> Result<ForwardVars> {
        let (enc, intent) = self.encode(tape, s)?;
        let mv = match m {
            Some(m) => tape.constant(m.clone()),
            None => tape.concat(&[intent.p_lat, intent.p_lon], 1)?,
        };
        let dec = self.decoder.run(tape, &self.store, intent.h_tilde, mv, mv)?;
        Ok(ForwardVars { enc, intent, dec })
    }

    fn read_sequence(tape: &Tape, d: &DecodeVars) -> Result<GaussianSequence> {
        let g = GaussianSequence::from_tensors(tape.value(d.mu), tape.value(d.sigma), tape.value(d.rho));
        if !g.all_finite() {
            return Err(Error::Numeric("non-finite decoder output".into()));
        }
        Ok(g)
    }

    /// Fused trajectory, all nine forced modes and the intention probabilities.
    pub fn predict(&self, w: &GroupWindow) -> Result<Prediction> {
        self.predict_forced(w, None, None)
    }

    /// Like [`Gimtp::predict`], but the fused trajectory replaces the lateral
    /// and/or longitudinal columns of the intention matrix with one-hots.
    pub fn predict_forced(
        &self,
        w: &GroupWindow,
        lat: Option<LatIntention>,
        lon: Option<LonIntention>,
    ) -> Result<Prediction> {
        let s = self.sample(w)?;
        let mut tape = Tape::new();
        let (_, intent) = self.encode(&mut tape, &s)?;
        let dist = IntentionDistribution::from_tensors(tape.value(intent.p_lat), tape.value(intent.p_lon));
        if dist.p_lat.iter().chain(&dist.p_lon).flatten().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite intention probabilities".into()));
        }
        let h_tilde = tape.value(intent.h_tilde).clone();
        let probs = mode_probabilities(&dist.p_lat, &dist.p_lon)?;

        let mut m_fused = dist.as_matrix();
        for t in 0..self.config.horizon {
            if let Some(l) = lat {
                for k in 0..3 {
                    m_fused.set(&[t, k], if k == l.index() { 1.0 } else { 0.0 });
                }
            }
            if let Some(l) = lon {
                for k in 0..3 {
                    m_fused.set(&[t, 3 + k], if k == l.index() { 1.0 } else { 0.0 });
                }
            }
        }
        let fused = self.decode_with(&h_tilde, &m_fused)?;
        let pairs: Vec<(LatIntention, LonIntention)> = LatIntention::ALL
            .iter()
            .flat_map(|&a| LonIntention::ALL.iter().map(move |&b| (a, b)))
            .collect();
        let modes = pairs
            .par_iter()
            .enumerate()
            .map(|(i, &(lat, lon))| {
                let m = forced_intentions(self.config.horizon, lat, lon);
                Ok(ModePrediction {
                    lat,
                    lon,
                    probability: probs[i],
                    trajectory: self.decode_with(&h_tilde, &m)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction {
            target_id: w.target_id,
            frame: w.frame,
            fused,
            modes,
            intentions: dist,
        })
    }

    /// Decodes from a fixed `[L, dv]` embedding with intention weights `m`.
    pub fn decode_with(&self, h_tilde: &Tensor, m: &Tensor) -> Result<GaussianSequence> {
        if m.shape() != [self.config.horizon, NUM_INTENTIONS] {
            return Err(Error::dim("decode_with", m.shape(), &[self.config.horizon, NUM_INTENTIONS]));
        }
        let mut tape = Tape::new();
        let h = tape.constant(h_tilde.clone());
        let mv = tape.constant(m.clone());
        let d = self.decoder.run(&mut tape, &self.store, h, mv, mv)?;
        Self::read_sequence(&tape, &d)
    }

    /// Fusion weights `[L, F]` for a window under intention weights `m`.
    pub fn fusion_weights(&self, w: &GroupWindow, m: &Tensor) -> Result<Option<Tensor>> {
        let s = self.sample(w)?;
        let mut tape = Tape::new();
        let (_, intent) = self.encode(&mut tape, &s)?;
        let mv = tape.constant(m.clone());
        let (_, u) = self.decoder.fuse(&mut tape, &self.store, intent.h_tilde, mv)?;
        Ok(u.map(|u| tape.value(u).clone()))
    }

    /// Cosine similarity of future-guided node embeddings per future step,
    /// clipped at zero with a zero diagonal and row-normalized, `[F, N, N]`.
    pub fn future_similarity(&self, w: &GroupWindow) -> Result<Option<Tensor>> {
        let s = self.sample(w)?;
        let mut tape = Tape::new();
        let (enc, _) = self.encode(&mut tape, &s)?;
        let Some(h_f) = enc.h_f else { return Ok(None) };
        let h = tape.value(h_f);
        let (f, n, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let mut out = Tensor::zeros(&[f, n, n]);
        for t in 0..f {
            let rows: Vec<&[f64]> = (0..n)
                .map(|i| &h.data()[(t * n + i) * d..(t * n + i + 1) * d])
                .collect();
            let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            for i in 0..n {
                let occupied_i = w.future_mask[t][i];
                let mut row = vec![0.0; n];
                for j in 0..n {
                    if i == j || !occupied_i || !w.future_mask[t][j] || norms[i] == 0.0 || norms[j] == 0.0 {
                        continue;
                    }
                    let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                    row[j] = (dot / (norms[i] * norms[j])).max(0.0);
                }
                let total: f64 = row.iter().sum();
                for (j, v) in row.into_iter().enumerate() {
                    out.set(&[t, i, j], if total > 0.0 { v / total } else { 0.0 });
                }
            }
        }
        Ok(Some(out))
    }
}
