//! Node aggregation, time mapping and the lateral / longitudinal intention heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LatIntention, LonIntention};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-step intention probabilities. Stored step-major: `lat[t'][class]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionDistribution {
    pub p_lat: Vec<[f64; 3]>,
    pub p_lon: Vec<[f64; 3]>,
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

impl IntentionDistribution {
    /// From `[F, 3]` probability tensors.
    pub fn from_tensors(p_lat: &Tensor, p_lon: &Tensor) -> Self {
        IntentionDistribution {
            p_lat: rows3(p_lat),
            p_lon: rows3(p_lon),
        }
    }

    pub fn horizon(&self) -> usize {
        self.p_lat.len()
    }

    /// `[F, 6]` rows ordered LK, LLC, RLC, CS, ACC, DEC.
    pub fn as_matrix(&self) -> Tensor {
        let data = self
            .p_lat
            .iter()
            .zip(&self.p_lon)
            .flat_map(|(a, b)| a.iter().chain(b).copied().collect::<Vec<_>>())
            .collect();
        Tensor::new(vec![self.horizon(), 6], data).expect("F x 6")
    }

    pub fn argmax_lat(&self) -> Vec<LatIntention> {
        self.p_lat.iter().map(|p| LatIntention::ALL[argmax(p)]).collect()
    }

    pub fn argmax_lon(&self) -> Vec<LonIntention> {
        self.p_lon.iter().map(|p| LonIntention::ALL[argmax(p)]).collect()
    }
}

fn argmax(p: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// `MLP_V`, `MLP_O` and the two heads.
#[derive(Clone, Debug)]
pub struct IntentionPredictor {
    pub steps_in: usize,
    pub horizon: usize,
    pub aggregate: Linear,
    pub time_map: ParamId,
    pub mix: Linear,
    pub lat: Mlp2,
    pub lon: Mlp2,
}

/// Tape handles of the predictor outputs.
#[derive(Clone, Copy, Debug)]
pub struct IntentionVars {
    /// `[L, dv]` node-aggregated embedding, shared with fusion.
    pub h_tilde: Var,
    /// `[F, 3]` each.
    pub lat_logits: Var,
    pub lon_logits: Var,
    pub p_lat: Var,
    pub p_lon: Var,
}

impl IntentionPredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        steps_in: usize,
        horizon: usize,
        node_width: usize,
        v_width: usize,
        o_width: usize,
        head_widths: [usize; 2],
    ) -> Result<Self> {
        let aggregate = Linear::new(store, rng, "mlp_v", node_width, v_width)?;
        let time_map =
            store.add_glorot("mlp_o.time_map", &[horizon, steps_in], steps_in, horizon, rng)?;
        let mix = Linear::new(store, rng, "mlp_o", v_width, o_width)?;
        let lat = Mlp2::new(store, rng, "lat_mlp", o_width, head_widths[0], 3)?;
        let lon = Mlp2::new(store, rng, "lon_mlp", o_width, head_widths[1], 3)?;
        Ok(IntentionPredictor {
            steps_in,
            horizon,
            aggregate,
            time_map,
            mix,
            lat,
            lon,
        })
    }

    /// `h_cat` is `[L, N, d]` with `L = steps_in`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, h_cat: Var) -> Result<IntentionVars> {
        let s = tape.value(h_cat).shape().to_vec();
        if s.len() != 3 || s[0] != self.steps_in || s[1] * s[2] != self.aggregate.d_in {
            return Err(Error::dim(
                "predict_intentions",
                &s,
                &[self.steps_in, self.aggregate.d_in],
            ));
        }
        let flat = tape.reshape(h_cat, &[s[0], s[1] * s[2]])?;
        let v = self.aggregate.forward(tape, store, flat)?;
        let h_tilde = tape.relu(v);
        let map = tape.param(store, self.time_map);
        let over_time = tape.matmul(map, h_tilde)?;
        let o = self.mix.forward(tape, store, over_time)?;
        let h_m = tape.relu(o);
        let lat_logits = self.lat.forward(tape, store, h_m)?;
        let lon_logits = self.lon.forward(tape, store, h_m)?;
        let p_lat = tape.softmax(lat_logits, 1)?;
        let p_lon = tape.softmax(lon_logits, 1)?;
        Ok(IntentionVars {
            h_tilde,
            lat_logits,
            lon_logits,
            p_lat,
            p_lon,
        })
    }
}
