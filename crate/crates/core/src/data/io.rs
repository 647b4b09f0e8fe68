use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LaneOrientation, TrackSet, VehicleState};
use crate::error::{Error, Result};

/// Maps canonical column roles to the column names used in a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub frame: String,
    pub vehicle_id: String,
    pub pos_lon: String,
    pub pos_lat: String,
    pub lane_id: String,
    pub vel_lon: String,
    pub vel_lat: String,
    pub mass: String,
    pub class: String,
    /// Mass per vehicle class, used when there is no mass column.
    pub class_mass: BTreeMap<String, f64>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            frame: "frame".into(),
            vehicle_id: "vehicle_id".into(),
            pos_lon: "pos_lon".into(),
            pos_lat: "pos_lat".into(),
            lane_id: "lane_id".into(),
            vel_lon: "vel_lon".into(),
            vel_lat: "vel_lat".into(),
            mass: "mass".into(),
            class: "class".into(),
            class_mass: BTreeMap::from([("car".into(), 1.0), ("truck".into(), 2.5)]),
        }
    }
}

/// Dataset-level settings recorded alongside a CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetManifest {
    /// Rate of the loaded tracks after any downsampling, Hz.
    pub frame_rate: f64,
    /// Rate of the raw file, when it differs from `frame_rate` (HighD: 25 Hz).
    pub source_frame_rate: Option<f64>,
    pub lane_orientation: LaneOrientation,
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            frame_rate: 10.0,
            source_frame_rate: None,
            lane_orientation: LaneOrientation::LeftIsLower,
            history: 30,
            horizon: 50,
            stride: 1,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        if let Some(src) = self.source_frame_rate {
            if !(src > 0.0) {
                return Err(Error::Config("source_frame_rate must be positive".into()));
            }
            if src < self.frame_rate {
                return Err(Error::Config(
                    "source_frame_rate below frame_rate (upsampling unsupported)".into(),
                ));
            }
        }
        if self.history < 2 || self.horizon < 1 || self.stride < 1 {
            return Err(Error::Config(
                "need history >= 2, horizon >= 1, stride >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema, manifest: &DatasetManifest) -> Result<TrackSet> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, manifest)
}

struct Columns {
    frame: usize,
    vehicle_id: usize,
    pos_lon: usize,
    pos_lat: usize,
    lane_id: usize,
    vel_lon: Option<usize>,
    vel_lat: Option<usize>,
    mass: Option<usize>,
    class: Option<usize>,
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, name: &str, line: u64) -> Result<T> {
    let raw = rec.get(col).unwrap_or("").trim();
    raw.parse::<T>()
        .map_err(|_| Error::Data(format!("line {line}: bad value {raw:?} in column {name}")))
}

/// Parses tracks from any reader. Velocity columns, when absent, are derived
/// by central differences (one-sided at track ends) at the source frame rate.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, manifest: &DatasetManifest) -> Result<TrackSet> {
    manifest.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| Error::Schema(format!("missing required column {name:?}")))
    };
    let cols = Columns {
        frame: need(&schema.frame)?,
        vehicle_id: need(&schema.vehicle_id)?,
        pos_lon: need(&schema.pos_lon)?,
        pos_lat: need(&schema.pos_lat)?,
        lane_id: need(&schema.lane_id)?,
        vel_lon: find(&schema.vel_lon),
        vel_lat: find(&schema.vel_lat),
        mass: find(&schema.mass),
        class: find(&schema.class),
    };

    let mut tracks: BTreeMap<i64, Vec<VehicleState>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let vid: i64 = parse(&rec, cols.vehicle_id, &schema.vehicle_id, line)?;
        let frame: i64 = parse(&rec, cols.frame, &schema.frame, line)?;
        let mass = match (cols.mass, cols.class) {
            (Some(c), _) => parse(&rec, c, &schema.mass, line)?,
            (None, Some(c)) => {
                let class = rec.get(c).unwrap_or("").trim().to_lowercase();
                schema.class_mass.get(&class).copied().unwrap_or(1.0)
            }
            (None, None) => 1.0,
        };
        let state = VehicleState {
            vehicle_id: vid,
            frame,
            pos_lon: parse(&rec, cols.pos_lon, &schema.pos_lon, line)?,
            pos_lat: parse(&rec, cols.pos_lat, &schema.pos_lat, line)?,
            vel_lon: match cols.vel_lon {
                Some(c) => parse(&rec, c, &schema.vel_lon, line)?,
                None => f64::NAN,
            },
            vel_lat: match cols.vel_lat {
                Some(c) => parse(&rec, c, &schema.vel_lat, line)?,
                None => f64::NAN,
            },
            lane_id: parse(&rec, cols.lane_id, &schema.lane_id, line)?,
            mass,
        };
        let track = tracks.entry(vid).or_default();
        if let Some(last) = track.last() {
            if frame == last.frame {
                return Err(Error::Data(format!(
                    "vehicle {vid}: duplicate frame {frame}"
                )));
            }
            if frame < last.frame {
                return Err(Error::Data(format!(
                    "vehicle {vid}: frames not monotone ({frame} after {})",
                    last.frame
                )));
            }
        }
        track.push(state);
    }

    let source_rate = manifest.source_frame_rate.unwrap_or(manifest.frame_rate);
    for track in tracks.values_mut() {
        if cols.vel_lon.is_none() {
            derive_velocity(track, source_rate, |s| s.pos_lon, |s, v| s.vel_lon = v);
        }
        if cols.vel_lat.is_none() {
            derive_velocity(track, source_rate, |s| s.pos_lat, |s, v| s.vel_lat = v);
        }
    }

    if source_rate > manifest.frame_rate {
        for track in tracks.values_mut() {
            *track = resample(track, source_rate, manifest.frame_rate);
        }
        tracks.retain(|_, t| !t.is_empty());
    }

    TrackSet::from_tracks(tracks, manifest.frame_rate)
}

/// Resamples a track onto the grid `k / target` seconds by linear
/// interpolation between consecutive source frames. Lane ids come from the
/// nearer source sample; grid times that fall in a gap are dropped.
fn resample(track: &[VehicleState], source: f64, target: f64) -> Vec<VehicleState> {
    let Some((first, last)) = track.first().zip(track.last()) else {
        return Vec::new();
    };
    let t0 = first.frame as f64 / source;
    let t1 = last.frame as f64 / source;
    let k0 = (t0 * target - 1e-9).ceil() as i64;
    let k1 = (t1 * target + 1e-9).floor() as i64;
    let mut out = Vec::new();
    let mut i = 0;
    for k in k0..=k1 {
        // position on the source frame axis
        let f = k as f64 * source / target;
        while i + 1 < track.len() && (track[i + 1].frame as f64) <= f + 1e-9 {
            i += 1;
        }
        let a = &track[i];
        let w = f - a.frame as f64;
        let s = if w.abs() <= 1e-9 {
            *a
        } else {
            match track.get(i + 1) {
                Some(b) if b.frame == a.frame + 1 => {
                    let lerp = |x: f64, y: f64| x + (y - x) * w;
                    VehicleState {
                        pos_lon: lerp(a.pos_lon, b.pos_lon),
                        pos_lat: lerp(a.pos_lat, b.pos_lat),
                        vel_lon: lerp(a.vel_lon, b.vel_lon),
                        vel_lat: lerp(a.vel_lat, b.vel_lat),
                        lane_id: if w < 0.5 { a.lane_id } else { b.lane_id },
                        ..*a
                    }
                }
                _ => continue,
            }
        };
        out.push(VehicleState { frame: k, ..s });
    }
    out
}

fn derive_velocity(
    track: &mut [VehicleState],
    rate: f64,
    pos: impl Fn(&VehicleState) -> f64,
    set: impl Fn(&mut VehicleState, f64),
) {
    let n = track.len();
    if n < 2 {
        for s in track.iter_mut() {
            set(s, 0.0);
        }
        return;
    }
    let time = |s: &VehicleState| s.frame as f64 / rate;
    let vels: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            (pos(&track[b]) - pos(&track[a])) / (time(&track[b]) - time(&track[a]))
        })
        .collect();
    for (s, v) in track.iter_mut().zip(vels) {
        set(s, v);
    }
}

/// Writes tracks with the default schema, one row per (frame, vehicle), ordered
/// by frame and then vehicle id.
pub fn write_csv<W: Write>(tracks: &TrackSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "frame", "vehicle_id", "pos_lon", "pos_lat", "vel_lon", "vel_lat", "lane_id", "mass",
    ])?;
    let mut rows: Vec<&VehicleState> = tracks.tracks().flat_map(|(_, t)| t.iter()).collect();
    rows.sort_by_key(|s| (s.frame, s.vehicle_id));
    for s in rows {
        w.write_record(&[
            s.frame.to_string(),
            s.vehicle_id.to_string(),
            format!("{}", s.pos_lon),
            format!("{}", s.pos_lat),
            format!("{}", s.vel_lon),
            format!("{}", s.vel_lat),
            s.lane_id.to_string(),
            format!("{}", s.mass),
        ])?;
    }
    w.flush()?;
    Ok(())
}
