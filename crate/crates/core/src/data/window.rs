use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::group::{build_group, GroupConfig, NUM_SLOTS};
use super::labels::{label_states, IntentionMatrix, LabelConfig};
use super::{TrackSet, VehicleState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-slot features: pos_lon, pos_lat, vel_lon, vel_lat, occupancy.
pub const NUM_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub group: GroupConfig,
    pub labels: LabelConfig,
    /// Restrict targets to these vehicle ids.
    pub targets: Option<Vec<i64>>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            history: 30,
            horizon: 50,
            stride: 1,
            group: GroupConfig::default(),
            labels: LabelConfig::default(),
            targets: None,
        }
    }
}

/// One training/evaluation sample: the target-centred group over T history
/// steps plus its ground-truth future. All positions are relative to `origin`,
/// the target position at step T.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWindow {
    pub target_id: i64,
    /// Frame index of step T.
    pub frame: i64,
    pub frame_rate: f64,
    pub history: usize,
    pub horizon: usize,
    /// Absolute (lon, lat) of the target at step T.
    pub origin: [f64; 2],
    /// `[T, N, C]` history features.
    pub x: Tensor,
    pub mask: Vec<[bool; NUM_SLOTS]>,
    /// `[T, N]` vehicle mass per slot, zero where unoccupied.
    pub mass: Tensor,
    /// `[F, N, C]` ground-truth future group features.
    pub future_features: Tensor,
    pub future_mask: Vec<[bool; NUM_SLOTS]>,
    /// `[F, 2]` ground-truth target positions (lon, lat).
    pub y: Tensor,
    /// Slot occupants for all T + F steps.
    pub slot_ids: Vec<[Option<i64>; NUM_SLOTS]>,
    /// Absolute target states for all T + F steps.
    pub target_states: Vec<VehicleState>,
    pub intentions: IntentionMatrix,
}

impl GroupWindow {
    /// Absolute (lon, lat) of `slot` at step `t` (0-based over T + F), if occupied.
    pub fn absolute_position(&self, t: usize, slot: usize) -> Option<[f64; 2]> {
        let (feats, mask, tt) = if t < self.history {
            (&self.x, &self.mask, t)
        } else {
            (&self.future_features, &self.future_mask, t - self.history)
        };
        mask[tt][slot].then(|| {
            [
                feats.get(&[tt, slot, 0]) + self.origin[0],
                feats.get(&[tt, slot, 1]) + self.origin[1],
            ]
        })
    }

    /// Checks the window invariants: target present everywhere, target at the
    /// origin at step T, all-zero features in empty slots.
    pub fn validate(&self) -> Result<()> {
        let check = |feats: &Tensor, mask: &[[bool; NUM_SLOTS]], what: &str| -> Result<()> {
            for (t, m) in mask.iter().enumerate() {
                if !m[0] {
                    return Err(Error::Contract(format!("{what}: target missing at step {t}")));
                }
                for (s, &occ) in m.iter().enumerate() {
                    let flag = feats.get(&[t, s, 4]);
                    if occ != (flag == 1.0) {
                        return Err(Error::Contract(format!("{what}: occupancy flag mismatch")));
                    }
                    if !occ && (0..NUM_FEATURES).any(|c| feats.get(&[t, s, c]) != 0.0) {
                        return Err(Error::Contract(format!(
                            "{what}: empty slot {s} has features at step {t}"
                        )));
                    }
                }
            }
            Ok(())
        };
        check(&self.x, &self.mask, "history")?;
        check(&self.future_features, &self.future_mask, "future")?;
        let last = self.history - 1;
        if self.x.get(&[last, 0, 0]) != 0.0 || self.x.get(&[last, 0, 1]) != 0.0 {
            return Err(Error::Contract("target not at origin at step T".into()));
        }
        Ok(())
    }
}

/// Cuts windows for every target and frame with full history and future.
/// Output is sorted by target id, then frame.
pub fn make_windows(tracks: &TrackSet, cfg: &WindowConfig) -> Result<Vec<GroupWindow>> {
    if cfg.history < 2 || cfg.horizon < 1 || cfg.stride < 1 {
        return Err(Error::Config(
            "windows need history >= 2, horizon >= 1, stride >= 1".into(),
        ));
    }
    let (t, f) = (cfg.history, cfg.horizon);
    let mut jobs: Vec<(i64, usize)> = Vec::new();
    for (id, track) in tracks.tracks() {
        if let Some(targets) = &cfg.targets {
            if !targets.contains(&id) {
                continue;
            }
        }
        if track.len() < t + f {
            continue;
        }
        let mut first_valid: Option<i64> = None;
        for end in (t - 1)..(track.len() - f) {
            let span = &track[end + 1 - t..=end + f];
            let contiguous = span.windows(2).all(|w| w[1].frame == w[0].frame + 1);
            if !contiguous {
                continue;
            }
            let frame = track[end].frame;
            let base = *first_valid.get_or_insert(frame);
            if (frame - base) % cfg.stride as i64 == 0 {
                jobs.push((id, end));
            }
        }
    }
    jobs.par_iter()
        .map(|&(id, end)| build_window(tracks, id, end, cfg))
        .collect()
}

fn build_window(tracks: &TrackSet, id: i64, end: usize, cfg: &WindowConfig) -> Result<GroupWindow> {
    let (t, f) = (cfg.history, cfg.horizon);
    let track = tracks.track(id).expect("target track");
    let target_states = track[end + 1 - t..=end + f].to_vec();
    let current = target_states[t - 1];
    let origin = [current.pos_lon, current.pos_lat];

    let mut x = Tensor::zeros(&[t, NUM_SLOTS, NUM_FEATURES]);
    let mut future_features = Tensor::zeros(&[f, NUM_SLOTS, NUM_FEATURES]);
    let mut mass = Tensor::zeros(&[t, NUM_SLOTS]);
    let mut mask = Vec::with_capacity(t);
    let mut future_mask = Vec::with_capacity(f);
    let mut slot_ids = Vec::with_capacity(t + f);
    let mut y = Tensor::zeros(&[f, 2]);

    for (step, st) in target_states.iter().enumerate() {
        let group = build_group(tracks, id, st.frame, &cfg.group)?;
        let (feats, row) = if step < t {
            (&mut x, step)
        } else {
            (&mut future_features, step - t)
        };
        let mut m = [false; NUM_SLOTS];
        for (slot, occupant) in group.slots.iter().enumerate() {
            if let Some(v) = occupant {
                m[slot] = true;
                feats.set(&[row, slot, 0], v.pos_lon - origin[0]);
                feats.set(&[row, slot, 1], v.pos_lat - origin[1]);
                feats.set(&[row, slot, 2], v.vel_lon);
                feats.set(&[row, slot, 3], v.vel_lat);
                feats.set(&[row, slot, 4], 1.0);
                if step < t {
                    mass.set(&[row, slot], v.mass);
                }
            }
        }
        if step < t {
            mask.push(m);
        } else {
            future_mask.push(m);
            y.set(&[row, 0], st.pos_lon - origin[0]);
            y.set(&[row, 1], st.pos_lat - origin[1]);
        }
        slot_ids.push(group.ids());
    }
    let intentions = label_states(&current, &target_states[t..], &cfg.labels);
    Ok(GroupWindow {
        target_id: id,
        frame: current.frame,
        frame_rate: tracks.frame_rate,
        history: t,
        horizon: f,
        origin,
        x,
        mask,
        mass,
        future_features,
        future_mask,
        y,
        slot_ids,
        target_states,
        intentions,
    })
}
