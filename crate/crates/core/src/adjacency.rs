//! Dynamic weighted adjacency of a vehicle group.
//!
//! Three components are built per timestep and averaged:
//! grid neighborhood (binary), distance decay `exp(-(d/σ)²)`, and potential
//! risk `tanh(F/σ_F)` from the follower-to-leader equivalent force.

use serde::{Deserialize, Serialize};

use crate::data::{slot_grid, GroupWindow, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp on |Δd| in the force denominator, meters.
pub const MIN_GAP: f64 = 0.1;

/// Kinematic state of one occupied slot at one timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotState {
    pub pos_lon: f64,
    pub pos_lat: f64,
    pub vel_lon: f64,
    pub vel_lat: f64,
    pub mass: f64,
}

/// Equivalent force exerted by vehicle i toward vehicle j.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskForce {
    pub lon: f64,
    pub lat: f64,
    pub resultant: f64,
    /// Kinetic-energy risk (force times clamped gap, summed over axes). Not
    /// used in the adjacency.
    pub energy: f64,
}

fn axis_force(mass: f64, s_i: f64, s_j: f64, d_i: f64, d_j: f64) -> f64 {
    let closing = s_i - s_j;
    if closing <= 0.0 {
        return 0.0;
    }
    0.5 * mass * s_i.abs() * closing / (d_i - d_j).abs().max(MIN_GAP)
}

pub fn risk_force(i: &SlotState, j: &SlotState) -> RiskForce {
    let lon = axis_force(i.mass, i.vel_lon, j.vel_lon, i.pos_lon, j.pos_lon);
    let lat = axis_force(i.mass, i.vel_lat, j.vel_lat, i.pos_lat, j.pos_lat);
    let energy = lon * (i.pos_lon - j.pos_lon).abs().max(MIN_GAP)
        + lat * (i.pos_lat - j.pos_lat).abs().max(MIN_GAP);
    RiskForce {
        lon,
        lat,
        resultant: lon.hypot(lat),
        energy,
    }
}

/// Combined adjacency plus its components, each `[T, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicAdjacency {
    pub combined: Tensor,
    pub neigh: Tensor,
    pub dist: Tensor,
    pub risk: Tensor,
    /// Per-timestep distance scale actually used, meters.
    pub sigma_dist: Vec<f64>,
    /// Per-timestep force scale; zero where the risk component was disabled.
    pub sigma_force: Vec<f64>,
}

impl DynamicAdjacency {
    pub fn steps(&self) -> usize {
        self.combined.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.combined.shape()[1]
    }

    /// `[N, N]` combined matrix at step `t`.
    pub fn at(&self, t: usize) -> Tensor {
        self.combined.index0(t)
    }
}

fn king_adjacent(a: (i64, i64), b: (i64, i64)) -> bool {
    a != b && (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1
}

/// 1 iff both slots are occupied and king-move adjacent in the slot grid.
pub fn neighborhood_adjacency(mask: &[Vec<bool>], grid: &[(i64, i64)]) -> Tensor {
    let (t, n) = (mask.len(), grid.len());
    let mut out = Tensor::zeros(&[t, n, n]);
    for (s, m) in mask.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if m[i] && m[j] && king_adjacent(grid[i], grid[j]) {
                    out.set(&[s, i, j], 1.0);
                }
            }
        }
    }
    out
}

/// Population standard deviation; `None` for fewer than two samples.
fn std_dev(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Gaussian distance decay with a per-timestep σ equal to the standard
/// deviation of all occupied pairwise distances (1 m when degenerate).
pub fn distance_adjacency(states: &[Vec<Option<SlotState>>]) -> (Tensor, Vec<f64>) {
    let t = states.len();
    let n = states.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(&[t, n, n]);
    let mut sigmas = Vec::with_capacity(t);
    for (s, row) in states.iter().enumerate() {
        let dist = |i: &SlotState, j: &SlotState| (i.pos_lon - j.pos_lon).hypot(i.pos_lat - j.pos_lat);
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if let (Some(a), Some(b)) = (&row[i], &row[j]) {
                    pairs.push(dist(a, b));
                }
            }
        }
        let sigma = match std_dev(&pairs) {
            Some(sd) if sd > 0.0 => sd,
            _ => 1.0,
        };
        sigmas.push(sigma);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if let (Some(a), Some(b)) = (&row[i], &row[j]) {
                    out.set(&[s, i, j], (-(dist(a, b) / sigma).powi(2)).exp());
                }
            }
        }
    }
    (out, sigmas)
}

/// `tanh(F/σ_F)` over ordered occupied pairs; σ_F is the per-timestep
/// standard deviation of those resultant forces. Directed, so not symmetric.
pub fn risk_adjacency(states: &[Vec<Option<SlotState>>]) -> (Tensor, Vec<f64>) {
    let t = states.len();
    let n = states.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(&[t, n, n]);
    let mut sigmas = Vec::with_capacity(t);
    for (s, row) in states.iter().enumerate() {
        let mut forces = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if let (Some(a), Some(b)) = (&row[i], &row[j]) {
                    forces.push((i, j, risk_force(a, b).resultant));
                }
            }
        }
        let fs: Vec<f64> = forces.iter().map(|f| f.2).collect();
        let sigma = std_dev(&fs).unwrap_or(0.0);
        sigmas.push(sigma);
        if sigma > 0.0 {
            for (i, j, f) in forces {
                out.set(&[s, i, j], (f / sigma).tanh());
            }
        }
    }
    (out, sigmas)
}

/// Averages the three components, mapping into [0, 1].
pub fn combine(neigh: &Tensor, dist: &Tensor, risk: &Tensor) -> Result<Tensor> {
    if neigh.shape() != dist.shape() || neigh.shape() != risk.shape() {
        return Err(Error::dim("combine", neigh.shape(), dist.shape()));
    }
    let data = neigh
        .data()
        .iter()
        .zip(dist.data())
        .zip(risk.data())
        .map(|((a, b), c)| (a + b + c) / 3.0)
        .collect();
    Tensor::new(neigh.shape().to_vec(), data)
}

/// Slot states of a window's history (`[T][N]`).
pub fn window_states(w: &GroupWindow) -> Vec<Vec<Option<SlotState>>> {
    (0..w.history)
        .map(|t| {
            (0..NUM_SLOTS)
                .map(|s| {
                    w.mask[t][s].then(|| SlotState {
                        pos_lon: w.x.get(&[t, s, 0]),
                        pos_lat: w.x.get(&[t, s, 1]),
                        vel_lon: w.x.get(&[t, s, 2]),
                        vel_lat: w.x.get(&[t, s, 3]),
                        mass: w.mass.get(&[t, s]),
                    })
                })
                .collect()
        })
        .collect()
}

/// Builds all components from per-step slot states and a slot grid.
pub fn build_from_states(
    states: &[Vec<Option<SlotState>>],
    grid: &[(i64, i64)],
) -> Result<DynamicAdjacency> {
    let mask: Vec<Vec<bool>> = states
        .iter()
        .map(|row| row.iter().map(Option::is_some).collect())
        .collect();
    let neigh = neighborhood_adjacency(&mask, grid);
    let (dist, sigma_dist) = distance_adjacency(states);
    let (risk, sigma_force) = risk_adjacency(states);
    let combined = combine(&neigh, &dist, &risk)?;
    Ok(DynamicAdjacency {
        combined,
        neigh,
        dist,
        risk,
        sigma_dist,
        sigma_force,
    })
}

/// Dynamic adjacency over a window's history.
pub fn build_adjacency(w: &GroupWindow) -> Result<DynamicAdjacency> {
    build_from_states(&window_states(w), &slot_grid())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(lon: f64, lat: f64, vlon: f64, vlat: f64) -> SlotState {
        SlotState {
            pos_lon: lon,
            pos_lat: lat,
            vel_lon: vlon,
            vel_lat: vlat,
            mass: 1.0,
        }
    }

    fn only(slots: &[(usize, SlotState)]) -> Vec<Vec<Option<SlotState>>> {
        let mut row = vec![None; NUM_SLOTS];
        for &(s, v) in slots {
            row[s] = Some(v);
        }
        vec![row]
    }

    #[test]
    fn lone_target_is_all_zero() {
        let a = build_from_states(&only(&[(0, st(0.0, 0.0, 30.0, 0.0))]), &slot_grid()).unwrap();
        assert_eq!(a.combined.sum(), 0.0);
    }

    #[test]
    fn target_and_preceding_are_neighbors() {
        let mask = vec![vec![true, true, false, false, false, false, false, false, false]];
        let n = neighborhood_adjacency(&mask, &slot_grid());
        assert_eq!(n.get(&[0, 0, 1]), 1.0);
        assert_eq!(n.get(&[0, 1, 0]), 1.0);
        assert_eq!(n.sum(), 2.0);
    }

    #[test]
    fn opposite_corners_not_adjacent() {
        let n = neighborhood_adjacency(&[vec![true; NUM_SLOTS]], &slot_grid());
        // left-preceding (3) vs right-following (8)
        assert_eq!(n.get(&[0, 3, 8]), 0.0);
        // center touches every other slot
        assert_eq!((1..NUM_SLOTS).map(|j| n.get(&[0, 0, j])).sum::<f64>(), 8.0);
        // left-preceding touches target, same-preceding, left-parallel only
        let row: Vec<usize> = (0..NUM_SLOTS).filter(|&j| n.get(&[0, 3, j]) == 1.0).collect();
        assert_eq!(row, vec![0, 1, 4]);
    }

    #[test]
    fn two_vehicles_use_fallback_sigma() {
        let s = only(&[(0, st(0.0, 0.0, 0.0, 0.0)), (1, st(1.0, 0.0, 0.0, 0.0))]);
        let (d, sig) = distance_adjacency(&s);
        assert_eq!(sig[0], 1.0);
        assert!((d.get(&[0, 0, 1]) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn distance_equal_to_sigma_gives_inverse_e() {
        // three collinear vehicles at 0, 1, 3: distances 1, 3, 2 -> σ = sqrt(2/3)
        let s = only(&[
            (0, st(0.0, 0.0, 0.0, 0.0)),
            (1, st(1.0, 0.0, 0.0, 0.0)),
            (3, st(3.0, 0.0, 0.0, 0.0)),
        ]);
        let (d, sig) = distance_adjacency(&s);
        let expected_sigma = (2.0f64 / 3.0).sqrt();
        assert!((sig[0] - expected_sigma).abs() < 1e-12);
        let w = d.get(&[0, 0, 1]);
        assert!((w - (-(1.0 / expected_sigma).powi(2)).exp()).abs() < 1e-12);
    }

    #[test]
    fn force_closed_forms() {
        assert_eq!(risk_force(&st(0.0, 0.0, 20.0, 0.0), &st(10.0, 0.0, 20.0, 0.0)).lon, 0.0);
        let f = risk_force(&st(0.0, 0.0, 22.0, 0.0), &st(10.0, 0.0, 20.0, 0.0));
        assert!((f.lon - 2.2).abs() < 1e-12);
        assert_eq!(f.lat, 0.0);
        // 3-4-5
        let f = RiskForce {
            lon: 3.0,
            lat: 4.0,
            resultant: 3f64.hypot(4.0),
            energy: 0.0,
        };
        assert_eq!(f.resultant, 5.0);
    }

    #[test]
    fn zero_gap_is_clamped() {
        let f = risk_force(&st(5.0, 0.0, 21.0, 0.0), &st(5.0, 0.0, 20.0, 0.0));
        assert!((f.lon - 0.5 * 21.0 / MIN_GAP).abs() < 1e-9);
    }

    #[test]
    fn equal_velocities_have_no_risk() {
        let s = only(&[
            (0, st(0.0, 0.0, 25.0, 0.1)),
            (1, st(20.0, 0.0, 25.0, 0.1)),
            (4, st(2.0, -3.7, 25.0, 0.1)),
        ]);
        let (r, sig) = risk_adjacency(&s);
        assert_eq!(r.sum(), 0.0);
        assert_eq!(sig[0], 0.0);
    }

    #[test]
    fn combine_closed_forms() {
        let one = Tensor::full(&[1], 1.0);
        let z = Tensor::zeros(&[1]);
        assert_eq!(combine(&one, &one, &one).unwrap().item(), 1.0);
        assert_eq!(combine(&z, &z, &z).unwrap().item(), 0.0);
        let e = Tensor::full(&[1], (-1.0f64).exp());
        assert!((combine(&one, &e, &z).unwrap().item() - 0.455_959_813_7).abs() < 1e-9);
    }
}
