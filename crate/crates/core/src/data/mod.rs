//! Trajectory ingestion, vehicle-group assembly, windowing and intention labels.

mod group;
mod io;
mod labels;
pub mod synth;
mod window;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use group::{build_group, slot_grid, GroupConfig, SlotAssignment, NUM_SLOTS, SLOT_NAMES};
pub use io::{load_csv, read_csv, write_csv, CsvSchema, DatasetManifest};
pub use labels::{
    label_intentions, IntentionMatrix, LabelConfig, LatIntention, LonIntention, NUM_INTENTIONS,
};
pub use window::{make_windows, GroupWindow, WindowConfig, NUM_FEATURES};

/// One vehicle at one frame. `x` is longitudinal and `y` lateral throughout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub vehicle_id: i64,
    pub frame: i64,
    pub pos_lon: f64,
    pub pos_lat: f64,
    pub vel_lon: f64,
    pub vel_lat: f64,
    pub lane_id: i64,
    pub mass: f64,
}

/// Which way "left" points relative to lane numbering. The lateral coordinate
/// is assumed to grow in the same direction as lane ids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneOrientation {
    /// Lane 1 is leftmost (NGSIM convention).
    #[default]
    LeftIsLower,
    LeftIsHigher,
}

impl LaneOrientation {
    /// +1 if increasing lateral position / lane id points left, else -1.
    pub fn left_sign(self) -> f64 {
        match self {
            LaneOrientation::LeftIsLower => -1.0,
            LaneOrientation::LeftIsHigher => 1.0,
        }
    }

    /// Lane offset of `lane` relative to `reference`: -1 one lane left, +1 one lane right.
    pub fn lane_offset(self, reference: i64, lane: i64) -> i64 {
        match self {
            LaneOrientation::LeftIsLower => lane - reference,
            LaneOrientation::LeftIsHigher => reference - lane,
        }
    }
}

/// Per-vehicle tracks, each sorted by frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackSet {
    tracks: BTreeMap<i64, Vec<VehicleState>>,
    by_frame: BTreeMap<i64, Vec<VehicleState>>,
    pub frame_rate: f64,
}

impl TrackSet {
    /// Builds a track set, checking per-vehicle frame order and state invariants.
    pub fn from_tracks(tracks: BTreeMap<i64, Vec<VehicleState>>, frame_rate: f64) -> Result<Self> {
        let mut by_frame: BTreeMap<i64, Vec<VehicleState>> = BTreeMap::new();
        for (&id, states) in &tracks {
            for w in states.windows(2) {
                if w[1].frame == w[0].frame {
                    return Err(Error::Data(format!(
                        "vehicle {id}: duplicate frame {}",
                        w[0].frame
                    )));
                }
                if w[1].frame < w[0].frame {
                    return Err(Error::Data(format!(
                        "vehicle {id}: frames not monotone ({} after {})",
                        w[1].frame, w[0].frame
                    )));
                }
            }
            for s in states {
                if s.lane_id < 1 {
                    return Err(Error::Data(format!(
                        "vehicle {id}: lane_id {} < 1 at frame {}",
                        s.lane_id, s.frame
                    )));
                }
                if s.mass <= 0.0 || !s.mass.is_finite() {
                    return Err(Error::Data(format!("vehicle {id}: mass must be positive")));
                }
                by_frame.entry(s.frame).or_default().push(*s);
            }
        }
        Ok(TrackSet {
            tracks,
            by_frame,
            frame_rate,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn vehicle_ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.tracks.keys().copied()
    }

    pub fn track(&self, id: i64) -> Option<&[VehicleState]> {
        self.tracks.get(&id).map(Vec::as_slice)
    }

    pub fn tracks(&self) -> impl Iterator<Item = (i64, &[VehicleState])> {
        self.tracks.iter().map(|(&id, t)| (id, t.as_slice()))
    }

    pub fn state(&self, id: i64, frame: i64) -> Option<&VehicleState> {
        let t = self.tracks.get(&id)?;
        t.binary_search_by_key(&frame, |s| s.frame).ok().map(|i| &t[i])
    }

    /// All vehicles present at `frame`, ordered by vehicle id.
    pub fn at_frame(&self, frame: i64) -> &[VehicleState] {
        self.by_frame.get(&frame).map_or(&[], Vec::as_slice)
    }
}
