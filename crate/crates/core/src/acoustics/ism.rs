//! Image-source simulation of a shoebox room with uniform absorption.
//!
//! Early images (the direct path and first reflections) are rendered one by one
//! with an exact fractional-delay windowed sinc. The dense late field is
//! accumulated on a polyphase grid of `late_phases` sub-sample positions and
//! rendered with one windowed-sinc pass per phase, which keeps long tails cheap.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::schroeder::Decay;
use super::{sabine_absorption, RoomSpec, Vec3, SPEED_OF_SOUND};
use crate::error::{Error, Result};

/// Half-width of the 81-tap interpolation kernel.
pub const SINC_HALF_TAPS: i64 = 40;
/// Hann window half-length; the window reaches zero just outside the kernel.
const HANN_HALF: f64 = SINC_HALF_TAPS as f64 + 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationOptions {
    pub sample_rate_hz: u32,
    /// RIR length; `None` means 1.5 x T60.
    pub duration_s: Option<f64>,
    /// Maximum total number of wall reflections per image; `None` is unbounded.
    pub max_order: Option<u32>,
    /// Absorption override; `None` derives it from T60 using `absorption_model`.
    pub absorption: Option<f64>,
    pub absorption_model: AbsorptionModel,
    /// Images arriving before this time get an exact per-image kernel.
    pub exact_window_s: f64,
    pub late_phases: usize,
    /// Cutoff of the DC-blocking high-pass applied to each response.
    pub highpass_hz: Option<f64>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            duration_s: None,
            max_order: None,
            absorption: None,
            absorption_model: AbsorptionModel::Sabine,
            exact_window_s: 0.05,
            late_phases: 64,
            highpass_hz: Some(100.0),
        }
    }
}

/// How the uniform wall absorption is chosen from the target T60.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionModel {
    /// Sabine's formula only.
    Sabine,
    /// Starts from Sabine, then bisects until the image set's Schroeder T20
    /// matches the target.
    Calibrated,
}

/// Multi-channel room impulse responses, one per microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    pub name: String,
    pub sample_rate_hz: u32,
    pub rirs: Vec<Vec<f32>>,
    /// Geometry for simulated sets; `None` for recorded ones.
    pub room: Option<RoomSpec>,
    /// Nominal reverberation time, when known.
    pub t60_s: Option<f64>,
}

impl RirSet {
    pub fn channel_count(&self) -> usize {
        self.rirs.len()
    }

    pub fn len(&self) -> usize {
        self.rirs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nominal T60 if known, otherwise the Schroeder estimate of channel 0.
    pub fn t60_estimate(&self) -> Option<f64> {
        self.t60_s
            .or_else(|| self.rirs.first().and_then(|r| super::schroeder_t60(r, self.sample_rate_hz)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rirs.is_empty() {
            return Err(Error::InvalidArgument(format!("RIR set {} has no channels", self.name)));
        }
        let n = self.rirs[0].len();
        if self.rirs.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "RIR set {} has channels of unequal length",
                self.name
            )));
        }
        Ok(())
    }
}

/// Simulates `room` at `sample_rate_hz` for `duration_s` seconds.
pub fn simulate_rir(room: &RoomSpec, sample_rate_hz: u32, duration_s: f64) -> Result<RirSet> {
    simulate_rir_with(
        room,
        &SimulationOptions {
            sample_rate_hz,
            duration_s: Some(duration_s),
            ..Default::default()
        },
    )
}

pub fn simulate_rir_with(room: &RoomSpec, opts: &SimulationOptions) -> Result<RirSet> {
    let fs = f64::from(opts.sample_rate_hz);
    let duration = opts.duration_s.unwrap_or(1.5 * room.t60_s);
    if opts.sample_rate_hz < 8000 {
        return Err(Error::InvalidArgument(format!(
            "sample rate {} Hz below 8000 Hz",
            opts.sample_rate_hz
        )));
    }
    if duration < 1.2 * room.t60_s {
        return Err(Error::InvalidArgument(format!(
            "duration {duration} s shorter than 1.2 x T60 ({} s)",
            1.2 * room.t60_s
        )));
    }
    if opts.late_phases == 0 {
        return Err(Error::InvalidArgument("late_phases must be positive".into()));
    }
    let dims = room.dims();
    let inside = |p: &Vec3| (0..3).all(|a| p[a] >= 0.0 && p[a] <= dims[a]);
    if !inside(&room.source_pos) {
        return Err(Error::InvalidArgument("source outside room".into()));
    }
    if let Some(i) = room.mic_positions.iter().position(|m| !inside(m)) {
        return Err(Error::InvalidArgument(format!("mic {i} outside room")));
    }
    if room.mic_positions.is_empty() {
        return Err(Error::InvalidArgument("room has no microphones".into()));
    }

    let n_samples = (duration * fs).ceil() as usize;
    let geometry: Vec<ImageField> = room
        .mic_positions
        .iter()
        .map(|mic| ImageField::new(room, mic, fs, n_samples, opts.max_order))
        .collect();
    let alpha = match (opts.absorption, opts.absorption_model) {
        (Some(a), _) => a,
        (None, AbsorptionModel::Sabine) => sabine_absorption(room),
        (None, AbsorptionModel::Calibrated) => calibrate_absorption(room, &geometry, fs, n_samples),
    };
    let beta = (1.0 - alpha).sqrt();
    let rirs = geometry
        .iter()
        .map(|field| field.render(beta, fs, n_samples, opts))
        .collect();
    Ok(RirSet {
        name: format!("sim-{}", room.seed),
        sample_rate_hz: opts.sample_rate_hz,
        rirs,
        room: Some(room.clone()),
        t60_s: Some(room.t60_s),
    })
}

/// Image offsets along one axis: (squared-distance component, reflection count).
fn axis_images(src: f64, mic: f64, side: f64, max_dist: f64, max_order: Option<u32>) -> Vec<(f64, u32)> {
    let n = (max_dist / (2.0 * side)).ceil() as i64 + 1;
    let mut out = Vec::with_capacity((4 * n + 2) as usize);
    for m in -n..=n {
        for q in 0..=1i64 {
            let pos = (1 - 2 * q) as f64 * src + 2.0 * m as f64 * side;
            let d = pos - mic;
            let refl = ((m - q).abs() + m.abs()) as u32;
            if d.abs() > max_dist || max_order.is_some_and(|o| refl > o) {
                continue;
            }
            out.push((d * d, refl));
        }
    }
    // Nearest images first so the pruned inner loops can break early.
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    out
}

/// The image lattice seen from one microphone.
struct ImageField {
    xs: Vec<(f64, u32)>,
    ys: Vec<(f64, u32)>,
    zs: Vec<(f64, u32)>,
    max_d2: f64,
    max_order: Option<u32>,
}

impl ImageField {
    fn new(room: &RoomSpec, mic: &Vec3, fs: f64, n_samples: usize, max_order: Option<u32>) -> Self {
        // Images beyond this radius land past the end of the response.
        let max_dist = (n_samples as f64 + HANN_HALF) * SPEED_OF_SOUND / fs;
        let dims = room.dims();
        let src = room.source_pos;
        Self {
            xs: axis_images(src[0], mic[0], dims[0], max_dist, max_order),
            ys: axis_images(src[1], mic[1], dims[1], max_dist, max_order),
            zs: axis_images(src[2], mic[2], dims[2], max_dist, max_order),
            max_d2: max_dist * max_dist,
            max_order,
        }
    }

    fn max_reflections(&self) -> u32 {
        let top = |v: &[(f64, u32)]| v.iter().map(|e| e.1).max().unwrap_or(0);
        top(&self.xs) + top(&self.ys) + top(&self.zs)
    }

    /// Calls `visit(distance, reflection_count)` for every image in range.
    fn for_each(&self, mut visit: impl FnMut(f64, u32)) {
        for &(dx2, rx) in &self.xs {
            if dx2 > self.max_d2 {
                break;
            }
            for &(dy2, ry) in &self.ys {
                let dxy2 = dx2 + dy2;
                if dxy2 > self.max_d2 {
                    break;
                }
                for &(dz2, rz) in &self.zs {
                    let d2 = dxy2 + dz2;
                    if d2 > self.max_d2 {
                        break;
                    }
                    let refl = rx + ry + rz;
                    if self.max_order.is_some_and(|o| refl > o) {
                        continue;
                    }
                    visit(d2.sqrt().max(1e-3), refl);
                }
            }
        }
    }

    fn render(&self, beta: f64, fs: f64, n_samples: usize, opts: &SimulationOptions) -> Vec<f32> {
        let beta_pow: Vec<f64> = (0..=self.max_reflections()).map(|k| beta.powi(k as i32)).collect();
        let exact_limit = opts.exact_window_s * fs;
        let q = opts.late_phases;
        let mut out = vec![0.0f64; n_samples];
        let mut late = vec![0.0f64; q * (n_samples + 1)];
        let mut any_late = false;
        let norm = 1.0 / (4.0 * PI);

        self.for_each(|d, refl| {
            let gain = beta_pow[refl as usize] * norm / d;
            let delay = d * fs / SPEED_OF_SOUND;
            if delay < exact_limit {
                add_kernel(&mut out, delay, gain);
            } else {
                let mut n0 = delay.floor() as usize;
                let mut phase = ((delay - n0 as f64) * q as f64).round() as usize;
                if phase == q {
                    phase = 0;
                    n0 += 1;
                }
                if n0 <= n_samples {
                    late[phase * (n_samples + 1) + n0] += gain;
                    any_late = true;
                }
            }
        });

        if any_late {
            render_late(&mut out, &late, q);
        }
        if let Some(cutoff) = opts.highpass_hz {
            highpass(&mut out, cutoff, fs);
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

fn render_late(out: &mut [f64], late: &[f64], q: usize) {
    let n_samples = out.len();
    let taps = (2 * SINC_HALF_TAPS + 2) as usize;
    for phase in 0..q {
        let frac = phase as f64 / q as f64;
        // Kernel taps at offsets -40..=41 relative to the integer delay.
        let kernel: Vec<f64> = (0..taps)
            .map(|i| {
                let t = (i as i64 - SINC_HALF_TAPS) as f64 - frac;
                if t.abs() >= HANN_HALF {
                    0.0
                } else {
                    kernel_tap(t)
                }
            })
            .collect();
        let row = &late[phase * (n_samples + 1)..(phase + 1) * (n_samples + 1)];
        for (n0, &g) in row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let start = n0 as i64 - SINC_HALF_TAPS;
            for (i, &kv) in kernel.iter().enumerate() {
                let k = start + i as i64;
                if k >= 0 && (k as usize) < n_samples {
                    out[k as usize] += g * kv;
                }
            }
        }
    }
}

/// Two-pole DC blocker of Allen and Berkley. All image gains are positive, so
/// without it the dense late field piles up at DC and lengthens the decay.
fn highpass(h: &mut [f64], cutoff_hz: f64, fs: f64) {
    let w = 2.0 * PI * cutoff_hz / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y0, mut y1) = (0.0, 0.0);
    for v in h.iter_mut() {
        let y2 = y1;
        y1 = y0;
        y0 = b1 * y1 + b2 * y2 + *v;
        *v = y0 + a1 * y1 + r1 * y2;
    }
}

fn kernel_tap(t: f64) -> f64 {
    let window = 0.5 * (1.0 + (PI * t / HANN_HALF).cos());
    let sinc = if t.abs() < 1e-12 { 1.0 } else { (PI * t).sin() / (PI * t) };
    window * sinc
}

fn add_kernel(out: &mut [f64], center: f64, gain: f64) {
    let n0 = center.floor() as i64;
    let len = out.len() as i64;
    for k in (n0 - SINC_HALF_TAPS)..=(n0 + SINC_HALF_TAPS + 1) {
        if k < 0 || k >= len {
            continue;
        }
        let t = k as f64 - center;
        if t.abs() >= HANN_HALF {
            continue;
        }
        out[k as usize] += gain * kernel_tap(t);
    }
}

const CALIBRATION_BIN_S: f64 = 1e-3;

/// Uniform absorption whose image-set energy decay has a T20 equal to the target T60.
///
/// Image energies (gain squared) are binned per reflection count once; the decay
/// curve for any absorption is then a cheap weighted sum over those histograms.
fn calibrate_absorption(room: &RoomSpec, fields: &[ImageField], fs: f64, n_samples: usize) -> f64 {
    let bins = ((n_samples as f64 / fs) / CALIBRATION_BIN_S).ceil() as usize + 1;
    let orders = fields.iter().map(ImageField::max_reflections).max().unwrap_or(0) as usize + 1;
    let mut hist = vec![0.0f64; orders * bins];
    let norm = 1.0 / (16.0 * PI * PI);
    for field in fields {
        field.for_each(|d, refl| {
            let bin = (d / SPEED_OF_SOUND / CALIBRATION_BIN_S) as usize;
            if bin < bins {
                hist[refl as usize * bins + bin] += norm / (d * d);
            }
        });
    }
    let decay_time = |alpha: f64| {
        let r = 1.0 - alpha;
        let mut energy = vec![0.0f64; bins];
        let mut w = 1.0;
        for order in 0..orders {
            for (e, h) in energy.iter_mut().zip(&hist[order * bins..(order + 1) * bins]) {
                *e += w * h;
            }
            w *= r;
        }
        super::schroeder::fit_t20(&energy, CALIBRATION_BIN_S)
    };

    let target = room.t60_s;
    // No -25 dB crossing inside the response means the decay is slower than any target.
    let too_slow = |alpha: f64| match decay_time(alpha) {
        Decay::Time(t) => t > target,
        Decay::TooSlow => true,
        Decay::TooFast => false,
    };
    // Image-source decay is never faster than Sabine's prediction, so the root lies
    // above half the Sabine value; far below it the truncated tail corrupts the fit.
    let sabine = sabine_absorption(room);
    let (mut lo, mut hi) = (0.5 * sabine, 0.99f64);
    if !too_slow(lo) {
        log::warn!("image-source decay already faster than target T60 {target} s");
        return lo;
    }
    if too_slow(hi) {
        log::warn!("target T60 {target} s unreachable; using maximum absorption");
        return hi;
    }
    // Decay time falls monotonically with absorption; bisect in log space.
    for _ in 0..40 {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        if too_slow(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{distance, sample_room, schroeder_t60};

    fn probe_room(t60: f64) -> RoomSpec {
        RoomSpec {
            length_m: 6.0,
            width_m: 4.5,
            height_m: 2.9,
            t60_s: t60,
            source_pos: [2.0, 2.0, 1.75],
            mic_positions: vec![[3.7, 2.0, 1.75], [3.7, 2.0, 1.75]],
            seed: 1,
        }
    }

    #[test]
    fn direct_path_matches_closed_form() {
        // 1.7 m direct path: delay 16000 * 1.7 / 343 samples, gain 1 / (4 pi 1.7).
        let room = probe_room(0.5);
        let opts = SimulationOptions {
            max_order: Some(0),
            absorption: Some(0.99),
            duration_s: Some(0.6),
            highpass_hz: None,
            ..Default::default()
        };
        let set = simulate_rir_with(&room, &opts).unwrap();
        let h = &set.rirs[0];
        let tau: f64 = 16000.0 * 1.7 / 343.0;
        assert!((tau - 79.3).abs() < 0.01);
        let peak = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(peak, 79);
        let g = 1.0 / (4.0 * PI * 1.7);
        for k in 70..90 {
            let expect = g * kernel_tap(k as f64 - tau);
            assert!((f64::from(h[k]) - expect).abs() < 1e-6 * g, "tap {k}");
        }
    }

    #[test]
    fn coincident_mics_give_identical_responses() {
        let set = simulate_rir(&probe_room(0.5), 16000, 0.75).unwrap();
        assert_eq!(set.rirs[0], set.rirs[1]);
    }

    #[test]
    fn rejects_short_duration_and_outside_mic() {
        let room = probe_room(0.5);
        assert!(simulate_rir(&room, 16000, 0.5).is_err());
        assert!(simulate_rir(&room, 4000, 1.0).is_err());
        let mut bad = room.clone();
        bad.mic_positions[0][0] = 7.0;
        assert!(simulate_rir(&bad, 16000, 1.0).is_err());
    }

    #[test]
    fn causal_before_direct_path() {
        let room = sample_room(3, 3).unwrap();
        let set = simulate_rir(&room, 16000, 1.5 * room.t60_s).unwrap();
        for (i, h) in set.rirs.iter().enumerate() {
            let peak = h.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let arrival = distance(&room.source_pos, &room.mic_positions[i]) * 16000.0 / SPEED_OF_SOUND;
            let first = (arrival - HANN_HALF).floor().max(0.0) as usize;
            assert!(h[..first].iter().all(|v| v.abs() < 1e-6 * peak));
        }
    }

    #[test]
    fn sabine_and_calibrated_hit_target_decay() {
        for model in [AbsorptionModel::Sabine, AbsorptionModel::Calibrated] {
            for t60 in [0.5, 0.85] {
                let room = RoomSpec { t60_s: t60, ..probe_room(t60) };
                let opts = SimulationOptions {
                    absorption_model: model,
                    ..Default::default()
                };
                let set = simulate_rir_with(&room, &opts).unwrap();
                let est = schroeder_t60(&set.rirs[0], 16000).unwrap();
                assert!((est - t60).abs() / t60 < 0.2, "{model:?} {t60}: {est}");
            }
        }
    }

    #[test]
    fn late_grid_agrees_with_exact_rendering() {
        let room = probe_room(0.5);
        let exact = simulate_rir_with(
            &room,
            &SimulationOptions {
                duration_s: Some(0.6),
                exact_window_s: 10.0,
                ..Default::default()
            },
        )
        .unwrap();
        let fast = simulate_rir(&room, 16000, 0.6).unwrap();
        let num: f64 = exact.rirs[0]
            .iter()
            .zip(&fast.rirs[0])
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum();
        let den: f64 = exact.rirs[0].iter().map(|a| f64::from(*a).powi(2)).sum();
        assert!((num / den).sqrt() < 0.02, "relative error {}", (num / den).sqrt());
        let t_exact = schroeder_t60(&exact.rirs[0], 16000).unwrap();
        let t_fast = schroeder_t60(&fast.rirs[0], 16000).unwrap();
        assert!((t_exact - t_fast).abs() / t_exact < 0.01);
    }
}
