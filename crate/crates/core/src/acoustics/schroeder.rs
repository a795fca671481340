//! Schroeder backward integration and decay-time estimation.

/// Energy decay curve in dB relative to total energy; monotone non-increasing.
pub fn energy_decay_curve(rir: &[f32]) -> Vec<f64> {
    let energy: Vec<f64> = rir.iter().map(|&v| f64::from(v) * f64::from(v)).collect();
    edc_db(&energy)
}

fn edc_db(energy: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    let mut edc: Vec<f64> = energy
        .iter()
        .rev()
        .map(|&e| {
            acc += e;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    if total <= 0.0 {
        return vec![f64::NEG_INFINITY; energy.len()];
    }
    edc.iter().map(|e| 10.0 * (e / total).log10()).collect()
}

/// T60 extrapolated from a least-squares line over the -5..-25 dB span (T20).
pub fn schroeder_t60(rir: &[f32], sample_rate_hz: u32) -> Option<f64> {
    let energy: Vec<f64> = rir.iter().map(|&v| f64::from(v) * f64::from(v)).collect();
    decay_time_from_energy(&energy, 1.0 / f64::from(sample_rate_hz))
}

/// T20-based decay time from an energy sequence sampled every `dt` seconds.
pub(crate) fn decay_time_from_energy(energy: &[f64], dt: f64) -> Option<f64> {
    match fit_t20(energy, dt) {
        Decay::Time(t) => Some(t),
        Decay::TooSlow | Decay::TooFast => None,
    }
}

pub(crate) enum Decay {
    Time(f64),
    /// The curve never falls by 25 dB.
    TooSlow,
    /// The -5..-25 dB span is too short to fit.
    TooFast,
}

pub(crate) fn fit_t20(energy: &[f64], dt: f64) -> Decay {
    let edc = edc_db(energy);
    let Some(start) = edc.iter().position(|&e| e <= -5.0) else {
        return Decay::TooSlow;
    };
    let Some(end) = edc.iter().position(|&e| e <= -25.0) else {
        return Decay::TooSlow;
    };
    if end <= start + 1 {
        return Decay::TooFast;
    }
    let n = (end - start) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in edc[start..end].iter().enumerate() {
        let x = (start + i) as f64 * dt;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if slope < 0.0 {
        Decay::Time(-60.0 / slope)
    } else {
        Decay::TooSlow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exponential_decay() {
        // Deterministic noise-like carrier with a 0.6 s energy envelope.
        let fs = 16000u32;
        let t60 = 0.6;
        let n = (1.5 * t60 * f64::from(fs)) as usize;
        let rir: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / f64::from(fs);
                let env = 10f64.powf(-3.0 * t / t60);
                let carrier = if (i * 7919 + 13) % 5 < 2 { 1.0 } else { -1.0 };
                (env * carrier) as f32
            })
            .collect();
        let est = schroeder_t60(&rir, fs).unwrap();
        assert!((est - t60).abs() / t60 < 0.02, "{est}");
    }

    #[test]
    fn curve_is_monotone() {
        let rir: Vec<f32> = (0..500).map(|i| ((i as f32) * 0.37).sin() / (1.0 + i as f32)).collect();
        let edc = energy_decay_curve(&rir);
        assert_eq!(edc[0], 0.0);
        assert!(edc.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn silence_has_no_estimate() {
        assert_eq!(schroeder_t60(&[0.0; 100], 16000), None);
    }
}
