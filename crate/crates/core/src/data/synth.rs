//! Seeded synthetic highway scenarios with scripted maneuvers.
//!
//! Vehicles move at constant speed unless a maneuver applies. Speed ramps use
//! constant acceleration; lane changes follow a half-cosine lateral profile.
//! Positions are the exact integrals of the velocities.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_windows, GroupWindow, LaneOrientation, TrackSet, VehicleState, WindowConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum ManeuverKind {
    LaneChange { side: Side },
    SpeedRamp { delta_v: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Maneuver {
    /// Index of the vehicle in the scenario (0-based).
    pub vehicle: usize,
    pub start_s: f64,
    pub duration_s: f64,
    pub kind: ManeuverKind,
}

/// Fixed initial state for one vehicle; unspecified vehicles are randomized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub lane: i64,
    pub pos_lon: f64,
    pub speed: f64,
    #[serde(default = "one")]
    pub mass: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub lanes: i64,
    pub vehicles: usize,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub lane_width: f64,
    /// Longitudinal extent for random placement, meters.
    pub road_length: f64,
    pub speed_range: [f64; 2],
    pub lane_orientation: LaneOrientation,
    pub initial: Vec<InitialState>,
    pub maneuvers: Vec<Maneuver>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            lanes: 3,
            vehicles: 1,
            duration_s: 8.0,
            frame_rate: 10.0,
            lane_width: 3.7,
            road_length: 200.0,
            speed_range: [25.0, 32.0],
            lane_orientation: LaneOrientation::LeftIsLower,
            initial: Vec::new(),
            maneuvers: Vec::new(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lanes < 1 {
            return Err(Error::Config("scenario needs at least one lane".into()));
        }
        if !(self.duration_s > 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::Config("duration and frame rate must be positive".into()));
        }
        if !(self.lane_width > 0.0) || self.speed_range[0] > self.speed_range[1] {
            return Err(Error::Config("bad lane width or speed range".into()));
        }
        if self.initial.len() > self.vehicles {
            return Err(Error::Config("more initial states than vehicles".into()));
        }
        for init in &self.initial {
            if init.lane < 1 || init.lane > self.lanes || !(init.mass > 0.0) {
                return Err(Error::Config(format!("bad initial state {init:?}")));
            }
        }
        for m in &self.maneuvers {
            if m.vehicle >= self.vehicles || !(m.duration_s > 0.0) {
                return Err(Error::Config(format!("bad maneuver {m:?}")));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    fn lane_center(&self, lane: i64) -> f64 {
        (lane as f64 - 0.5) * self.lane_width
    }
}

struct Plan {
    lane: i64,
    lon0: f64,
    speed: f64,
    mass: f64,
}

/// Longitudinal speed and position offset at time `t` for a ramp of `dv` over
/// `[start, start + dur]`.
fn ramp(t: f64, start: f64, dur: f64, dv: f64) -> (f64, f64) {
    let a = dv / dur;
    let tau = (t - start).clamp(0.0, dur);
    let v = a * tau;
    let mut x = 0.5 * a * tau * tau;
    if t > start + dur {
        x += dv * (t - start - dur);
    }
    (v, x)
}

/// Lateral displacement and velocity of a half-cosine lane change of width `w`.
fn lane_shift(t: f64, start: f64, dur: f64, w: f64) -> (f64, f64) {
    let tau = (t - start).clamp(0.0, dur);
    let d = 0.5 * w * (1.0 - (PI * tau / dur).cos());
    let v = if t > start && t < start + dur {
        0.5 * w * PI / dur * (PI * tau / dur).sin()
    } else {
        0.0
    };
    (d, v)
}

pub fn synth_generate(spec: &ScenarioSpec, seed: u64) -> Result<TrackSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans: Vec<Plan> = spec
        .initial
        .iter()
        .map(|i| Plan {
            lane: i.lane,
            lon0: i.pos_lon,
            speed: i.speed,
            mass: i.mass,
        })
        .collect();
    while plans.len() < spec.vehicles {
        let lane = rng.gen_range(1..=spec.lanes);
        let speed = rng.gen_range(spec.speed_range[0]..=spec.speed_range[1]);
        // rejection keeps same-lane vehicles at least 10 m apart
        let mut lon0 = rng.gen_range(0.0..=spec.road_length);
        for _ in 0..100 {
            if plans
                .iter()
                .all(|p| p.lane != lane || (p.lon0 - lon0).abs() >= 10.0)
            {
                break;
            }
            lon0 = rng.gen_range(0.0..=spec.road_length);
        }
        plans.push(Plan {
            lane,
            lon0,
            speed,
            mass: 1.0,
        });
    }

    let dt = 1.0 / spec.frame_rate;
    let left = spec.lane_orientation.left_sign();
    let mut tracks = BTreeMap::new();
    for (vi, plan) in plans.iter().enumerate() {
        let mut states = Vec::with_capacity(spec.num_frames());
        for k in 0..spec.num_frames() {
            let t = k as f64 * dt;
            let (mut vel_lon, mut pos_lon) = (plan.speed, plan.lon0 + plan.speed * t);
            let (mut vel_lat, mut disp_lat) = (0.0, 0.0);
            for m in spec.maneuvers.iter().filter(|m| m.vehicle == vi) {
                match m.kind {
                    ManeuverKind::SpeedRamp { delta_v } => {
                        let (v, x) = ramp(t, m.start_s, m.duration_s, delta_v);
                        vel_lon += v;
                        pos_lon += x;
                    }
                    ManeuverKind::LaneChange { side } => {
                        let sign = match side {
                            Side::Left => left,
                            Side::Right => -left,
                        };
                        let (d, v) = lane_shift(t, m.start_s, m.duration_s, spec.lane_width);
                        disp_lat += sign * d;
                        vel_lat += sign * v;
                    }
                }
            }
            let pos_lat = spec.lane_center(plan.lane) + disp_lat;
            let lane_id = ((pos_lat / spec.lane_width).floor() as i64 + 1).clamp(1, spec.lanes.max(1));
            states.push(VehicleState {
                vehicle_id: vi as i64,
                frame: k as i64,
                pos_lon,
                pos_lat,
                vel_lon,
                vel_lat,
                lane_id: lane_id.max(1),
                mass: plan.mass,
            });
        }
        tracks.insert(vi as i64, states);
    }
    TrackSet::from_tracks(tracks, spec.frame_rate)
}

/// Target maneuver combination used by [`benchmark_specs`].
pub fn benchmark_mix(i: usize) -> (Option<Side>, f64) {
    let lat = match i % 3 {
        0 => None,
        1 => Some(Side::Left),
        _ => Some(Side::Right),
    };
    let dv = match (i / 3) % 3 {
        0 => 0.0,
        1 => 1.0,
        _ => -1.0,
    };
    (lat, dv)
}

/// A family of `count` three-lane scenarios, each with the target (vehicle 0)
/// in the middle lane surrounded by a few neighbors. Target maneuvers cycle
/// through every lateral × longitudinal combination and start around the end of
/// an 8 s scene's 3 s history, so that one window of T=30, F=50 at 10 Hz covers
/// the whole scene.
pub fn benchmark_specs(count: usize, seed: u64) -> Vec<ScenarioSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (lat, dv_sign) = benchmark_mix(i);
            let speed = rng.gen_range(24.0..=30.0);
            let mut initial = vec![InitialState {
                lane: 2,
                pos_lon: 0.0,
                speed,
                mass: 1.0,
            }];
            let neighbors = rng.gen_range(3..=5);
            let slots = [(2, 1.0), (2, -1.0), (1, 1.0), (1, -1.0), (3, 1.0), (3, -1.0)];
            let mut order: Vec<usize> = (0..slots.len()).collect();
            for k in (1..order.len()).rev() {
                order.swap(k, rng.gen_range(0..=k));
            }
            for &o in order.iter().take(neighbors) {
                let (lane, dir) = slots[o];
                initial.push(InitialState {
                    lane,
                    pos_lon: dir * rng.gen_range(15.0..=45.0),
                    speed: speed + rng.gen_range(-3.0..=3.0),
                    mass: if rng.gen_bool(0.2) { 2.5 } else { 1.0 },
                });
            }
            let mut maneuvers = Vec::new();
            if let Some(side) = lat {
                maneuvers.push(Maneuver {
                    vehicle: 0,
                    start_s: rng.gen_range(2.5..=3.3),
                    duration_s: rng.gen_range(3.0..=4.0),
                    kind: ManeuverKind::LaneChange { side },
                });
            }
            if dv_sign != 0.0 {
                maneuvers.push(Maneuver {
                    vehicle: 0,
                    start_s: rng.gen_range(2.5..=3.3),
                    duration_s: rng.gen_range(2.0..=3.0),
                    kind: ManeuverKind::SpeedRamp {
                        delta_v: dv_sign * rng.gen_range(2.5..=4.0),
                    },
                });
            }
            ScenarioSpec {
                lanes: 3,
                vehicles: initial.len(),
                duration_s: 8.0,
                frame_rate: 10.0,
                initial,
                maneuvers,
                ..Default::default()
            }
        })
        .collect()
}

/// One window per [`benchmark_specs`] scenario, the target being vehicle 0.
pub fn benchmark_windows(count: usize, seed: u64) -> Result<Vec<GroupWindow>> {
    let cfg = WindowConfig {
        targets: Some(vec![0]),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(count);
    for (i, spec) in benchmark_specs(count, seed).iter().enumerate() {
        let tracks = synth_generate(spec, seed.wrapping_add(i as u64))?;
        let mut ws = make_windows(&tracks, &cfg)?;
        if ws.len() != 1 {
            return Err(Error::Contract(format!("scenario {i} produced {} windows", ws.len())));
        }
        out.push(ws.remove(0));
    }
    Ok(out)
}
