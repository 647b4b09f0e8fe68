//! RMSE per horizon and intention accuracy.

use serde::{Deserialize, Serialize};

use crate::data::GroupWindow;
use crate::error::{Error, Result};
use crate::model::{Gimtp, Prediction};
use crate::tensor::Tensor;

/// Reported horizon frames.
pub const HORIZONS: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRmse {
    pub frame: usize,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: Vec<HorizonRmse>,
    pub lat_accuracy: f64,
    pub lon_accuracy: f64,
    pub samples: usize,
}

/// Accumulates squared errors and label hits over samples.
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    /// Squared Euclidean error summed over samples, per step.
    sq: Vec<f64>,
    lat_hits: usize,
    lon_hits: usize,
    steps: usize,
    samples: usize,
}

impl EvalAccumulator {
    /// `pred` and `truth` are `[F, 2]`; the label vectors hold per-step hits.
    pub fn push(&mut self, pred: &Tensor, truth: &Tensor, lat_hits: usize, lon_hits: usize) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::dim("evaluate", pred.shape(), truth.shape()));
        }
        let f = pred.shape()[0];
        if self.sq.is_empty() {
            self.sq = vec![0.0; f];
        } else if self.sq.len() != f {
            return Err(Error::dim("evaluate", &[self.sq.len()], &[f]));
        }
        for t in 0..f {
            let dx = pred.get(&[t, 0]) - truth.get(&[t, 0]);
            let dy = pred.get(&[t, 1]) - truth.get(&[t, 1]);
            self.sq[t] += dx * dx + dy * dy;
        }
        self.lat_hits += lat_hits;
        self.lon_hits += lon_hits;
        self.steps += f;
        self.samples += 1;
        Ok(())
    }

    /// RMSE over all samples and all steps up to each horizon frame `<= F`.
    pub fn report(&self) -> Result<EvalReport> {
        if self.samples == 0 {
            return Err(Error::Usage("evaluation set is empty".into()));
        }
        let f = self.sq.len();
        let rmse = HORIZONS
            .iter()
            .filter(|&&h| h <= f)
            .map(|&h| HorizonRmse {
                frame: h,
                rmse: (self.sq[..h].iter().sum::<f64>() / (self.samples * h) as f64).sqrt(),
            })
            .collect();
        Ok(EvalReport {
            rmse,
            lat_accuracy: self.lat_hits as f64 / self.steps as f64,
            lon_accuracy: self.lon_hits as f64 / self.steps as f64,
            samples: self.samples,
        })
    }
}

/// Scores one prediction against its window.
pub fn accumulate(acc: &mut EvalAccumulator, w: &GroupWindow, p: &Prediction) -> Result<()> {
    let lat = p.intentions.argmax_lat();
    let lon = p.intentions.argmax_lon();
    let lat_hits = lat.iter().zip(&w.intentions.lat).filter(|(a, b)| a == b).count();
    let lon_hits = lon.iter().zip(&w.intentions.lon).filter(|(a, b)| a == b).count();
    acc.push(&p.fused.means(), &w.y, lat_hits, lon_hits)
}

/// Evaluates the fused trajectory and the intention argmax on every window.
/// Windows are scored in canonical (target, frame) order.
pub fn evaluate(model: &Gimtp, windows: &[GroupWindow]) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut order: Vec<&GroupWindow> = windows.iter().collect();
    order.sort_by_key(|w| (w.target_id, w.frame));
    let mut acc = EvalAccumulator::default();
    for w in order {
        let p = model.predict(w)?;
        accumulate(&mut acc, w, &p)?;
    }
    acc.report()
}
