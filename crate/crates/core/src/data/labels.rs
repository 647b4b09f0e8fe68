use serde::{Deserialize, Serialize};

use super::{GroupWindow, LaneOrientation, VehicleState};
use crate::tensor::Tensor;

/// Lateral plus longitudinal classes.
pub const NUM_INTENTIONS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatIntention {
    #[serde(rename = "LK")]
    LaneKeep,
    #[serde(rename = "LLC")]
    LeftChange,
    #[serde(rename = "RLC")]
    RightChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LonIntention {
    #[serde(rename = "CS")]
    ConstantSpeed,
    #[serde(rename = "ACC")]
    Accelerate,
    #[serde(rename = "DEC")]
    Decelerate,
}

impl LatIntention {
    pub const ALL: [LatIntention; 3] = [Self::LaneKeep, Self::LeftChange, Self::RightChange];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        ["LK", "LLC", "RLC"][self.index()]
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.code().eq_ignore_ascii_case(s))
    }
}

impl LonIntention {
    pub const ALL: [LonIntention; 3] = [Self::ConstantSpeed, Self::Accelerate, Self::Decelerate];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        ["CS", "ACC", "DEC"][self.index()]
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.code().eq_ignore_ascii_case(s))
    }
}

/// Ground-truth intention per future step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentionMatrix {
    pub lat: Vec<LatIntention>,
    pub lon: Vec<LonIntention>,
}

impl IntentionMatrix {
    pub fn uniform(horizon: usize, lat: LatIntention, lon: LonIntention) -> Self {
        IntentionMatrix {
            lat: vec![lat; horizon],
            lon: vec![lon; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.lat.len()
    }

    /// `[F, 6]` one-hot rows ordered LK, LLC, RLC, CS, ACC, DEC.
    pub fn one_hot(&self) -> Tensor {
        let f = self.horizon();
        let mut t = Tensor::zeros(&[f, NUM_INTENTIONS]);
        for s in 0..f {
            t.set(&[s, self.lat[s].index()], 1.0);
            t.set(&[s, 3 + self.lon[s].index()], 1.0);
        }
        t
    }

    /// `3 × F` lateral one-hot matrix (columns are future steps).
    pub fn lat_matrix(&self) -> Tensor {
        let mut t = Tensor::zeros(&[3, self.horizon()]);
        for (s, l) in self.lat.iter().enumerate() {
            t.set(&[l.index(), s], 1.0);
        }
        t
    }

    pub fn lon_matrix(&self) -> Tensor {
        let mut t = Tensor::zeros(&[3, self.horizon()]);
        for (s, l) in self.lon.iter().enumerate() {
            t.set(&[l.index(), s], 1.0);
        }
        t
    }

    /// True if any future step carries the given lateral class.
    pub fn has_lat(&self, lat: LatIntention) -> bool {
        self.lat.contains(&lat)
    }
}

/// Thresholds for the rule-based intention labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Minimum lateral speed toward the side of the change, m/s.
    pub v_lat_min: f64,
    /// Minimum lateral displacement from the position at step T, m.
    pub min_lat_displacement: f64,
    /// Longitudinal speed change marking ACC / DEC, m/s.
    pub delta_v: f64,
    pub lane_orientation: LaneOrientation,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            v_lat_min: 0.2,
            min_lat_displacement: 0.5,
            delta_v: 0.5,
            lane_orientation: LaneOrientation::LeftIsLower,
        }
    }
}

/// Labels each future step from the target's state at step T and its future.
pub fn label_states(current: &VehicleState, future: &[VehicleState], cfg: &LabelConfig) -> IntentionMatrix {
    let left = cfg.lane_orientation.left_sign();
    let mut lat = Vec::with_capacity(future.len());
    let mut lon = Vec::with_capacity(future.len());
    for s in future {
        let lane_shift = cfg.lane_orientation.lane_offset(current.lane_id, s.lane_id);
        let disp_left = left * (s.pos_lat - current.pos_lat);
        let vel_left = left * s.vel_lat;
        let moving_left = vel_left > cfg.v_lat_min && disp_left >= cfg.min_lat_displacement;
        let moving_right = -vel_left > cfg.v_lat_min && -disp_left >= cfg.min_lat_displacement;
        lat.push(if lane_shift < 0 || (lane_shift == 0 && moving_left) {
            LatIntention::LeftChange
        } else if lane_shift > 0 || (lane_shift == 0 && moving_right) {
            LatIntention::RightChange
        } else {
            LatIntention::LaneKeep
        });
        let dv = s.vel_lon - current.vel_lon;
        lon.push(if dv > cfg.delta_v {
            LonIntention::Accelerate
        } else if dv < -cfg.delta_v {
            LonIntention::Decelerate
        } else {
            LonIntention::ConstantSpeed
        });
    }
    IntentionMatrix { lat, lon }
}

/// Labels a window from its ground-truth target future.
pub fn label_intentions(window: &GroupWindow, cfg: &LabelConfig) -> IntentionMatrix {
    let t = window.history;
    label_states(&window.target_states[t - 1], &window.target_states[t..], cfg)
}
