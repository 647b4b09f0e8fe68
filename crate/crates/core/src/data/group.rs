//! The 3×3 vehicle-group slot grid around a target vehicle.
//!
//! Slot order in every tensor:
//!
//! | slot | lane  | longitudinal |
//! |------|-------|--------------|
//! | 0    | same  | target       |
//! | 1    | same  | preceding    |
//! | 2    | same  | following    |
//! | 3    | left  | preceding    |
//! | 4    | left  | parallel     |
//! | 5    | left  | following    |
//! | 6    | right | preceding    |
//! | 7    | right | parallel     |
//! | 8    | right | following    |

use serde::{Deserialize, Serialize};

use super::{LaneOrientation, TrackSet, VehicleState};
use crate::error::{Error, Result};

pub const NUM_SLOTS: usize = 9;

pub const SLOT_NAMES: [&str; NUM_SLOTS] = [
    "target",
    "same_preceding",
    "same_following",
    "left_preceding",
    "left_parallel",
    "left_following",
    "right_preceding",
    "right_parallel",
    "right_following",
];

/// (lane offset, longitudinal offset) per slot: lane -1 = left, +1 = right;
/// longitudinal +1 = preceding, 0 = parallel, -1 = following.
const GRID: [(i64, i64); NUM_SLOTS] = [
    (0, 0),
    (0, 1),
    (0, -1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (1, 1),
    (1, 0),
    (1, -1),
];

pub fn slot_grid() -> [(i64, i64); NUM_SLOTS] {
    GRID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    /// Longitudinal search window around the target, meters.
    pub search_range: f64,
    /// Adjacent-lane vehicles within this longitudinal gap count as parallel.
    pub parallel_gap: f64,
    pub lane_orientation: LaneOrientation,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            search_range: 90.0,
            parallel_gap: 5.0,
            lane_orientation: LaneOrientation::LeftIsLower,
        }
    }
}

/// Vehicle states occupying each slot at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotAssignment {
    pub frame: i64,
    pub slots: [Option<VehicleState>; NUM_SLOTS],
}

impl SlotAssignment {
    pub fn occupied(&self, slot: usize) -> bool {
        self.slots[slot].is_some()
    }

    pub fn ids(&self) -> [Option<i64>; NUM_SLOTS] {
        self.slots.map(|s| s.map(|v| v.vehicle_id))
    }
}

fn slot_of(lane_offset: i64, dlon: f64, cfg: &GroupConfig) -> Option<usize> {
    let lon = match lane_offset {
        0 if dlon >= 0.0 => 1,
        0 => -1,
        _ if dlon > cfg.parallel_gap => 1,
        _ if dlon < -cfg.parallel_gap => -1,
        _ => 0,
    };
    GRID.iter().position(|&g| g == (lane_offset, lon))
}

/// Assigns the nearest qualifying vehicle to each of the 8 neighbor slots.
/// Ties in longitudinal distance go to the lower vehicle id.
pub fn build_group(
    tracks: &TrackSet,
    target_id: i64,
    frame: i64,
    cfg: &GroupConfig,
) -> Result<SlotAssignment> {
    let target = *tracks.state(target_id, frame).ok_or_else(|| {
        Error::Lookup(format!("vehicle {target_id} not present at frame {frame}"))
    })?;
    let mut slots: [Option<VehicleState>; NUM_SLOTS] = [None; NUM_SLOTS];
    let mut best = [f64::INFINITY; NUM_SLOTS];
    slots[0] = Some(target);
    for other in tracks.at_frame(frame) {
        if other.vehicle_id == target_id {
            continue;
        }
        let lane_offset = cfg.lane_orientation.lane_offset(target.lane_id, other.lane_id);
        if lane_offset.abs() > 1 {
            continue;
        }
        let dlon = other.pos_lon - target.pos_lon;
        if dlon.abs() > cfg.search_range {
            continue;
        }
        let Some(slot) = slot_of(lane_offset, dlon, cfg) else {
            continue;
        };
        // vehicles arrive in id order, so strict < keeps the lower id on ties
        if dlon.abs() < best[slot] {
            best[slot] = dlon.abs();
            slots[slot] = Some(*other);
        }
    }
    Ok(SlotAssignment { frame, slots })
}
