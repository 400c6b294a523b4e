//! Envelope, peak, FWHM, error norms and side-lobe statistics.

use serde::{Deserialize, Serialize};

use crate::das::Trace;
use crate::error::{computation, invalid, Result};
use crate::spectral;
use crate::tidas::TimeWindow;

/// Floor applied to side-lobe levels in dB.
pub const DB_FLOOR: f64 = -120.0;

/// Analytic-signal magnitude of raw samples.
pub fn envelope_samples(samples: &[f64]) -> Vec<f64> {
    spectral::analytic_signal(samples)
        .into_iter()
        .map(|v| v.norm())
        .collect()
}

pub fn envelope(trace: &Trace) -> Result<Trace> {
    if trace.samples.len() < 4 {
        return Err(invalid(format!(
            "envelope needs at least 4 samples, got {}",
            trace.samples.len()
        )));
    }
    Ok(Trace {
        samples: envelope_samples(&trace.samples),
        sampling_frequency: trace.sampling_frequency,
        t0: trace.t0,
    })
}

/// Linear interpolation at fractional index `pos`; 0 outside the samples.
pub fn sample_at(samples: &[f64], pos: f64) -> f64 {
    if !(pos >= 0.0) || samples.is_empty() {
        return 0.0;
    }
    let k = pos.floor() as usize;
    let f = pos - k as f64;
    match (samples.get(k), samples.get(k + 1)) {
        (Some(&a), Some(&b)) => a + (b - a) * f,
        (Some(&a), None) if f == 0.0 => a,
        _ => 0.0,
    }
}

/// Index and value of the largest sample (first one on ties).
pub fn argmax(samples: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in samples.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Time and height of the envelope maximum.
pub fn peak(trace: &Trace) -> Result<(f64, f64)> {
    let env = envelope(trace)?;
    let (k, v) = argmax(&env.samples).ok_or_else(|| computation("empty trace"))?;
    Ok((trace.time(k), v))
}

/// Width between the half-maximum crossings nearest to the maximum, in samples.
pub fn fwhm_samples(env: &[f64]) -> Result<f64> {
    let (k, peak) = argmax(env).ok_or_else(|| computation("empty envelope"))?;
    if !(peak > 0.0) {
        return Err(computation("envelope has no positive maximum"));
    }
    let half = peak / 2.0;
    let mut i = k;
    while env[i] > half {
        if i == 0 {
            return Err(computation("envelope never falls to half maximum before the peak"));
        }
        i -= 1;
    }
    let left = i as f64 + (half - env[i]) / (env[i + 1] - env[i]);
    let mut j = k;
    while env[j] > half {
        j += 1;
        if j == env.len() {
            return Err(computation("envelope never falls to half maximum after the peak"));
        }
    }
    let right = (j - 1) as f64 + (env[j - 1] - half) / (env[j - 1] - env[j]);
    Ok(right - left)
}

/// Full width at half maximum of the envelope, in seconds.
pub fn fwhm(trace: &Trace) -> Result<f64> {
    let env = envelope(trace)?;
    Ok(fwhm_samples(&env.samples)? / trace.sampling_frequency)
}

fn window_energy(trace: &Trace, window: Option<&TimeWindow>, f: impl Fn(usize) -> f64) -> f64 {
    let range = match window {
        Some(w) => trace.sample_range(w),
        None => 0..trace.samples.len(),
    };
    range.map(|i| f(i).powi(2)).sum()
}

fn relative_error(
    reference: &Trace,
    candidate: &Trace,
    window: Option<&TimeWindow>,
) -> Result<f64> {
    if reference.samples.len() != candidate.samples.len()
        || reference.t0 != candidate.t0
        || reference.sampling_frequency != candidate.sampling_frequency
    {
        return Err(invalid("reference and candidate must share a time axis"));
    }
    let norm = window_energy(reference, window, |i| reference.samples[i]);
    if !(norm > 0.0) {
        return Err(computation("reference has no energy inside the error window"));
    }
    let diff = window_energy(reference, window, |i| candidate.samples[i] - reference.samples[i]);
    Ok(diff / norm)
}

/// `‖candidate − reference‖² / ‖reference‖²` over the window.
pub fn local_error(reference: &Trace, candidate: &Trace, window: &TimeWindow) -> Result<f64> {
    relative_error(reference, candidate, Some(window))
}

/// As [`local_error`] over the whole trace.
pub fn global_error(reference: &Trace, candidate: &Trace) -> Result<f64> {
    relative_error(reference, candidate, None)
}

pub fn to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (20.0 * ratio.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Mean side-lobe level of a line and, optionally, its error against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidelobeStats {
    pub mean_sl_db: f64,
    pub mean_sl_linear: f64,
    pub reference_sl_db: Option<f64>,
    /// `|SL_cand − SL_ref| / |SL_ref|` on the dB levels.
    pub relative_sl_error: Option<f64>,
    /// The same ratio on linear mean-to-peak ratios.
    pub relative_sl_error_linear: Option<f64>,
}

/// Main-lobe mask: `±guard` samples around each scatterer's nearest grid index.
pub fn main_lobe_mask(depths: &[f64], scatterer_depths: &[f64], guard: usize) -> Result<Vec<bool>> {
    if depths.is_empty() {
        return Err(invalid("empty depth grid"));
    }
    let (lo, hi) = (depths[0], depths[depths.len() - 1]);
    let mut mask = vec![false; depths.len()];
    for &s in scatterer_depths {
        if s < lo || s > hi {
            return Err(invalid(format!("scatterer depth {s} outside the grid [{lo}, {hi}]")));
        }
        let idx = nearest_index(depths, s);
        let a = idx.saturating_sub(guard);
        let b = (idx + guard).min(depths.len() - 1);
        mask[a..=b].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

pub fn nearest_index(grid: &[f64], value: f64) -> usize {
    let mut best = 0;
    for (i, &g) in grid.iter().enumerate() {
        if (g - value).abs() < (grid[best] - value).abs() {
            best = i;
        }
    }
    best
}

fn mean_to_peak(line: &[f64], mask: &[bool]) -> Result<f64> {
    let main = line
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(0.0_f64, |acc, (&v, _)| acc.max(v.abs()));
    let side: Vec<f64> = line
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v.abs())
        .collect();
    if side.is_empty() {
        return Err(computation("main-lobe regions cover the whole line"));
    }
    if !(main > 0.0) {
        return Ok(0.0);
    }
    Ok(side.iter().sum::<f64>() / side.len() as f64 / main)
}

pub fn sidelobe_stats(
    line: &[f64],
    depths: &[f64],
    scatterer_depths: &[f64],
    guard: usize,
    reference: Option<&[f64]>,
) -> Result<SidelobeStats> {
    if line.len() != depths.len() {
        return Err(invalid("line and depth grid lengths differ"));
    }
    let mask = main_lobe_mask(depths, scatterer_depths, guard)?;
    let ratio = mean_to_peak(line, &mask)?;
    let db = to_db(ratio);
    let mut stats = SidelobeStats {
        mean_sl_db: db,
        mean_sl_linear: ratio,
        reference_sl_db: None,
        relative_sl_error: None,
        relative_sl_error_linear: None,
    };
    if let Some(r) = reference {
        if r.len() != depths.len() {
            return Err(invalid("reference line and depth grid lengths differ"));
        }
        let ref_ratio = mean_to_peak(r, &mask)?;
        let ref_db = to_db(ref_ratio);
        stats.reference_sl_db = Some(ref_db);
        stats.relative_sl_error = Some((db - ref_db).abs() / ref_db.abs());
        stats.relative_sl_error_linear = Some(if ref_ratio > 0.0 {
            (ratio - ref_ratio).abs() / ref_ratio
        } else {
            f64::INFINITY
        });
    }
    Ok(stats)
}

/// Summary of one reconstruction, serialised as one CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub peak_time: f64,
    pub peak_amplitude: f64,
    pub fwhm_time: f64,
    pub fwhm_axial: f64,
    pub local_error: f64,
    pub global_error: f64,
    pub mean_sl_db: f64,
    pub relative_sl_error: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 8] = [
        "peak_time",
        "peak_amplitude",
        "fwhm_time",
        "fwhm_axial",
        "local_error",
        "global_error",
        "mean_sl_db",
        "relative_sl_error",
    ];

    /// Peak and width of `candidate`, errors against `reference`.
    ///
    /// Side-lobe fields are `NaN` here; they only make sense for lines.
    pub fn for_psf(
        reference: &Trace,
        candidate: &Trace,
        window: &TimeWindow,
        sound_speed: f64,
    ) -> Result<Self> {
        let (peak_time, peak_amplitude) = peak(candidate)?;
        let fwhm_time = fwhm(candidate)?;
        Ok(Self {
            peak_time,
            peak_amplitude,
            fwhm_time,
            fwhm_axial: sound_speed * fwhm_time / 2.0,
            local_error: local_error(reference, candidate, window)?,
            global_error: global_error(reference, candidate)?,
            mean_sl_db: f64::NAN,
            relative_sl_error: f64::NAN,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn trace(samples: Vec<f64>) -> Trace {
        Trace {
            samples,
            sampling_frequency: 1.0,
            t0: 0.0,
        }
    }

    #[test]
    fn envelope_of_sinusoid_is_flat() {
        let n = 512;
        let s: Vec<f64> = (0..n).map(|i| 2.5 * (2.0 * PI * 0.1 * i as f64).sin()).collect();
        let env = envelope(&trace(s)).unwrap();
        for &v in &env.samples[64..n - 64] {
            assert!((v - 2.5).abs() < 0.025);
        }
        let zero = envelope(&trace(vec![0.0; 16])).unwrap();
        assert!(zero.samples.iter().all(|&v| v == 0.0));
        assert!(envelope(&trace(vec![1.0; 3])).is_err());
    }

    #[test]
    fn envelope_of_gaussian_burst() {
        let n = 400;
        let sigma = 12.0;
        let g = |i: usize| (-((i as f64 - 200.0) / sigma).powi(2) / 2.0).exp();
        let s: Vec<f64> = (0..n).map(|i| g(i) * (2.0 * PI * 0.15 * i as f64).sin()).collect();
        let env = envelope_samples(&s);
        for i in 150..250 {
            assert!((env[i] - g(i)).abs() < 0.02, "{i}");
        }
    }

    #[test]
    fn fwhm_of_triangle_and_gaussian() {
        let tri: Vec<f64> = (0..101).map(|i| 40.0 - (i as f64 - 50.0).abs()).map(|v| v.max(0.0)).collect();
        assert!((fwhm_samples(&tri).unwrap() - 40.0).abs() < 1e-12);
        let sigma = 7.3;
        let g: Vec<f64> = (0..200)
            .map(|i| (-((i as f64 - 99.4) / sigma).powi(2) / 2.0).exp())
            .collect();
        let expected = 2.0 * (2.0 * 2.0_f64.ln()).sqrt() * sigma;
        assert!((fwhm_samples(&g).unwrap() - expected).abs() < 0.01 * expected);
        assert!(fwhm_samples(&[1.0, 1.0, 0.2]).is_err());
        assert!(fwhm_samples(&[0.0; 8]).is_err());
    }

    #[test]
    fn error_identities() {
        let r = trace((0..64).map(|i| (i as f64 * 0.4).sin()).collect());
        let w = TimeWindow::new(32.0, 10.0).unwrap();
        assert_eq!(local_error(&r, &r, &w).unwrap(), 0.0);
        assert_eq!(global_error(&r, &r).unwrap(), 0.0);
        let scaled = trace(r.samples.iter().map(|v| v * 1.1).collect());
        assert!((local_error(&r, &scaled, &w).unwrap() - 0.01).abs() < 1e-12);
        let zero = trace(vec![0.0; 64]);
        assert!((global_error(&r, &zero).unwrap() - 1.0).abs() < 1e-15);
        assert!(global_error(&zero, &r).is_err());
    }

    #[test]
    fn sidelobe_floor_and_identity() {
        let depths: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let mut line = vec![0.0; 50];
        line[20] = 1.0;
        let s = sidelobe_stats(&line, &depths, &[20.0], 2, Some(&line)).unwrap();
        assert_eq!(s.mean_sl_db, DB_FLOOR);
        let noisy: Vec<f64> = (0..50).map(|i| if i == 20 { 1.0 } else { 0.01 }).collect();
        let s = sidelobe_stats(&noisy, &depths, &[20.0], 2, Some(&noisy)).unwrap();
        assert!((s.mean_sl_db + 40.0).abs() < 1e-9);
        assert_eq!(s.relative_sl_error, Some(0.0));
        assert!(sidelobe_stats(&noisy, &depths, &[20.0], 60, None).is_err());
        assert!(sidelobe_stats(&noisy, &depths, &[60.0], 2, None).is_err());
    }

    #[test]
    fn main_lobe_mask_uses_nearest_index() {
        let depths: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let m = main_lobe_mask(&depths, &[2.2], 1).unwrap();
        assert_eq!(m.iter().filter(|&&v| v).count(), 3);
        assert!(m[3] && m[4] && m[5]);
    }
}
