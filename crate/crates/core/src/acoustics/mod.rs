//! Shoebox room acoustics: geometry sampling and image-source RIR synthesis.

mod ism;
mod schroeder;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use ism::{simulate_rir, simulate_rir_with, AbsorptionModel, RirSet, SimulationOptions};
pub use schroeder::{energy_decay_curve, schroeder_t60};

/// Speed of sound used throughout, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Vec3 = [f64; 3];

/// A sampled room with one source and a microphone array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length_m: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub t60_s: f64,
    pub source_pos: Vec3,
    pub mic_positions: Vec<Vec3>,
    pub seed: u64,
}

impl RoomSpec {
    pub fn volume(&self) -> f64 {
        self.length_m * self.width_m * self.height_m
    }

    pub fn surface_area(&self) -> f64 {
        let (l, w, h) = (self.length_m, self.width_m, self.height_m);
        2.0 * (l * w + l * h + w * h)
    }

    pub fn dims(&self) -> Vec3 {
        [self.length_m, self.width_m, self.height_m]
    }

    pub fn mic_count(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn source_mic_distance(&self, mic: usize) -> f64 {
        distance(&self.source_pos, &self.mic_positions[mic])
    }

    /// Checks every geometric invariant against `limits`.
    pub fn validate(&self, limits: &RoomConstraints) -> Result<()> {
        let fail = |msg: String| Err(Error::InfeasibleGeometry(msg));
        let eps = 1e-9;
        for (name, side) in [("length", self.length_m), ("width", self.width_m)] {
            if side < limits.side_range_m.0 - eps || side > limits.side_range_m.1 + eps {
                return fail(format!("{name} {side} m outside {:?}", limits.side_range_m));
            }
        }
        let aspect = self.length_m.max(self.width_m) / self.length_m.min(self.width_m);
        if aspect > limits.max_aspect + eps {
            return fail(format!("aspect ratio {aspect:.3} above {}", limits.max_aspect));
        }
        if self.t60_s < limits.t60_range_s.0 - eps || self.t60_s > limits.t60_range_s.1 + eps {
            return fail(format!("T60 {} s outside {:?}", self.t60_s, limits.t60_range_s));
        }
        if self.source_pos[2] != limits.source_height_m {
            return fail(format!("source height {} m", self.source_pos[2]));
        }
        if !self.within_margin(&self.source_pos, limits.wall_margin_m) {
            return fail("source too close to a wall".into());
        }
        let dc = critical_distance(self);
        for (i, mic) in self.mic_positions.iter().enumerate() {
            if mic[2] != limits.mic_height_m {
                return fail(format!("mic {i} height {} m", mic[2]));
            }
            if !self.within_margin(mic, limits.wall_margin_m) {
                return fail(format!("mic {i} too close to a wall"));
            }
            let d = distance(&self.source_pos, mic);
            if d < limits.min_distance_m - eps || d > dc + eps {
                return fail(format!(
                    "mic {i} at {d:.3} m from source, allowed [{}, {dc:.3}]",
                    limits.min_distance_m
                ));
            }
        }
        Ok(())
    }

    fn within_margin(&self, p: &Vec3, margin: f64) -> bool {
        p[0] >= margin && p[0] <= self.length_m - margin && p[1] >= margin && p[1] <= self.width_m - margin
    }
}

pub(crate) fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sampling ranges for rooms, source and array placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomConstraints {
    pub side_range_m: (f64, f64),
    pub height_m: f64,
    pub max_aspect: f64,
    pub t60_range_s: (f64, f64),
    pub source_height_m: f64,
    pub mic_height_m: f64,
    pub wall_margin_m: f64,
    pub min_distance_m: f64,
    /// Spacing of the rigid linear microphone array.
    pub mic_spacing_m: f64,
    pub max_attempts: usize,
}

impl Default for RoomConstraints {
    fn default() -> Self {
        Self {
            side_range_m: (3.0, 8.0),
            height_m: 2.9,
            max_aspect: 1.6,
            t60_range_s: (0.5, 0.85),
            source_height_m: 1.75,
            mic_height_m: 1.6,
            wall_margin_m: 0.5,
            min_distance_m: 0.2,
            mic_spacing_m: 0.05,
            max_attempts: 10_000,
        }
    }
}

/// Samples a room under the default constraints.
pub fn sample_room(seed: u64, mic_count: usize) -> Result<RoomSpec> {
    sample_room_with(seed, mic_count, &RoomConstraints::default())
}

/// Rejection-samples a room, source and linear array until every invariant holds.
pub fn sample_room_with(seed: u64, mic_count: usize, limits: &RoomConstraints) -> Result<RoomSpec> {
    if mic_count == 0 {
        return Err(Error::InvalidArgument("mic_count must be at least 1".into()));
    }
    let mut rng = rng::rng(seed);
    let (lo, hi) = limits.side_range_m;
    let (t_lo, t_hi) = limits.t60_range_s;
    let m = limits.wall_margin_m;
    let dz = limits.source_height_m - limits.mic_height_m;

    for _ in 0..limits.max_attempts {
        let length = rng.random_range(lo..=hi);
        let width = rng.random_range(lo..=hi);
        let t60 = rng.random_range(t_lo..=t_hi);
        if length.max(width) / length.min(width) > limits.max_aspect {
            continue;
        }
        if length <= 2.0 * m || width <= 2.0 * m {
            continue;
        }
        let source = [
            rng.random_range(m..=length - m),
            rng.random_range(m..=width - m),
            limits.source_height_m,
        ];
        let mut room = RoomSpec {
            length_m: length,
            width_m: width,
            height_m: limits.height_m,
            t60_s: t60,
            source_pos: source,
            mic_positions: Vec::new(),
            seed,
        };
        let dc = critical_distance(&room);
        let d_min = limits.min_distance_m.max(dz.abs());
        if dc <= d_min {
            continue;
        }
        let d = rng.random_range(d_min..=dc);
        let r = (d * d - dz * dz).max(0.0).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let centre = [source[0] + r * phi.cos(), source[1] + r * phi.sin()];
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let half = (mic_count as f64 - 1.0) / 2.0;
        room.mic_positions = (0..mic_count)
            .map(|k| {
                let off = (k as f64 - half) * limits.mic_spacing_m;
                [
                    centre[0] + off * theta.cos(),
                    centre[1] + off * theta.sin(),
                    limits.mic_height_m,
                ]
            })
            .collect();
        if room.validate(limits).is_ok() {
            return Ok(room);
        }
    }
    Err(Error::InfeasibleGeometry(format!(
        "no valid placement after {} attempts",
        limits.max_attempts
    )))
}

/// Distance at which direct and reverberant energy are equal, `0.057 * sqrt(V / T60)`.
pub fn critical_distance(room: &RoomSpec) -> f64 {
    0.057 * (room.volume() / room.t60_s).sqrt()
}

const MAX_ABSORPTION: f64 = 0.99;

/// Uniform wall absorption that yields `room.t60_s` under Sabine's formula.
pub fn sabine_absorption(room: &RoomSpec) -> f64 {
    let alpha = 0.161 * room.volume() / (room.surface_area() * room.t60_s);
    if alpha >= 1.0 {
        log::warn!("room too dead for Sabine model (alpha = {alpha:.3}); clamping to {MAX_ABSORPTION}");
    }
    alpha.clamp(f64::MIN_POSITIVE, MAX_ABSORPTION)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shoebox(l: f64, w: f64, h: f64, t60: f64) -> RoomSpec {
        RoomSpec {
            length_m: l,
            width_m: w,
            height_m: h,
            t60_s: t60,
            source_pos: [l / 2.0, w / 2.0, 1.75],
            mic_positions: vec![[l / 2.0 + 0.3, w / 2.0, 1.6]],
            seed: 0,
        }
    }

    #[test]
    fn critical_distance_values() {
        // 0.057 * sqrt(72.5 / 0.5) and 0.057 * sqrt(72.5 / 0.85), evaluated by hand.
        let r = shoebox(5.0, 5.0, 2.9, 0.5);
        assert!((critical_distance(&r) - 0.686_371).abs() < 1e-5);
        let r = shoebox(5.0, 5.0, 2.9, 0.85);
        assert!((critical_distance(&r) - 0.526_425).abs() < 1e-5);
    }

    #[test]
    fn critical_distance_scales_with_sqrt_volume() {
        let a = shoebox(5.0, 5.0, 2.9, 0.6);
        let b = shoebox(10.0, 5.0, 2.9, 0.6);
        let ratio = critical_distance(&b) / critical_distance(&a);
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sabine_values() {
        let r = shoebox(5.0, 5.0, 2.9, 0.5);
        assert_eq!(r.surface_area(), 108.0);
        assert!((sabine_absorption(&r) - 0.161 * 72.5 / 54.0).abs() < 1e-12);
        assert!((sabine_absorption(&r) - 0.2162).abs() < 1e-4);
        let half = shoebox(5.0, 5.0, 2.9, 0.25);
        assert!((sabine_absorption(&half) - 2.0 * sabine_absorption(&r)).abs() < 1e-12);
        let long = shoebox(5.0, 5.0, 2.9, 1e9);
        assert!(sabine_absorption(&long) < 1e-9);
    }

    #[test]
    fn sabine_clamps_dead_rooms() {
        let r = shoebox(5.0, 5.0, 2.9, 0.01);
        assert_eq!(sabine_absorption(&r), MAX_ABSORPTION);
    }

    #[test]
    fn sample_room_seed_7() {
        let a = sample_room(7, 3).unwrap();
        assert_eq!(a.mic_count(), 3);
        a.validate(&RoomConstraints::default()).unwrap();
        let b = sample_room(7, 3).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            assert!(a.source_mic_distance(i) <= critical_distance(&a));
        }
    }

    #[test]
    fn linear_array_spacing() {
        let r = sample_room(11, 3).unwrap();
        let d01 = distance(&r.mic_positions[0], &r.mic_positions[1]);
        let d02 = distance(&r.mic_positions[0], &r.mic_positions[2]);
        assert!((d01 - 0.05).abs() < 1e-12);
        assert!((d02 - 0.10).abs() < 1e-12);
    }

    #[test]
    fn zero_mics_rejected() {
        assert!(matches!(sample_room(1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn impossible_constraints_report_infeasible() {
        let limits = RoomConstraints {
            min_distance_m: 5.0,
            max_attempts: 50,
            ..Default::default()
        };
        assert!(matches!(
            sample_room_with(3, 3, &limits),
            Err(Error::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        let limits = RoomConstraints::default();
        for seed in 0..1000 {
            let r = sample_room(seed, 3).unwrap();
            r.validate(&limits).unwrap();
        }
    }
}
