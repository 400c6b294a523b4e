//! Reference dynamic-focus delay-and-sum beamformer.
//!
//! Every pixel gets its own receive delay profile and dynamic aperture. Pixel
//! values are read from the envelope of the delayed sum at the modelled
//! two-way arrival time `t_tx(z) + z / c`.

use std::ops::Range;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics;
use crate::probe::{rx_aperture, rx_delay_profile_at, tx_aperture, DelayProfile, ProbeConfig};
use crate::sim::{make_pulse, tx_arrival_time, ApertureRules, RfFrame};
use crate::spectral;
use crate::tidas::TimeWindow;

/// Delays closer than this (in samples) to an integer are treated as integer shifts.
const INTEGER_SHIFT_TOLERANCE: f64 = 1e-9;

/// Uniformly sampled signal with a time origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f64>,
    pub sampling_frequency: f64,
    pub t0: f64,
}

impl Trace {
    pub fn new(samples: Vec<f64>, sampling_frequency: f64, t0: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("trace must have at least one sample"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("trace samples must be finite"));
        }
        if !(sampling_frequency > 0.0) {
            return Err(invalid("sampling frequency must be positive"));
        }
        Ok(Self {
            samples,
            sampling_frequency,
            t0,
        })
    }

    pub fn zeros(len: usize, sampling_frequency: f64, t0: f64) -> Self {
        Self {
            samples: vec![0.0; len],
            sampling_frequency,
            t0,
        }
    }

    pub fn time(&self, sample: usize) -> f64 {
        self.t0 + sample as f64 / self.sampling_frequency
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_frequency
    }

    /// Samples whose time lies in `[center − ε, center + ε]`.
    pub fn sample_range(&self, window: &TimeWindow) -> Range<usize> {
        window.sample_range(self.t0, self.sampling_frequency, self.samples.len())
    }

    pub fn scaled(mut self, alpha: f64) -> Self {
        for v in &mut self.samples {
            *v *= alpha;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMethod {
    /// Two-tap linear interpolation.
    #[default]
    Linear,
    /// Phase ramp on the zero-padded spectrum.
    Spectral,
}

/// Integer and fractional parts of a delay for two-tap interpolation.
///
/// `y[i] = (1 − frac)·x[i + shift] + frac·x[i + shift + 1]` realises
/// `y(t) = x(t − delay)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTaps {
    pub shift: isize,
    pub frac: f64,
}

impl LinearTaps {
    pub fn new(delay: f64, sampling_frequency: f64) -> Self {
        let q = -delay * sampling_frequency;
        let r = q.round();
        if (q - r).abs() < INTEGER_SHIFT_TOLERANCE {
            Self {
                shift: r as isize,
                frac: 0.0,
            }
        } else {
            let k = q.floor();
            Self {
                shift: k as isize,
                frac: q - k,
            }
        }
    }
}

pub(crate) fn clip(lo: isize, hi: isize, max: usize) -> Range<usize> {
    let lo = lo.clamp(0, max as isize) as usize;
    let hi = hi.clamp(0, max as isize) as usize;
    lo..hi.max(lo)
}

/// Adds `weight × delayed(x)` to `out`, where `out[j]` is output sample
/// `out_start + j` and only input samples in `support` contribute.
pub(crate) fn accumulate_linear(
    out: &mut [f64],
    out_start: isize,
    x: &[f64],
    taps: LinearTaps,
    support: Range<usize>,
    weight: f64,
) {
    let support = support.start..support.end.min(x.len());
    if support.is_empty() {
        return;
    }
    let k = taps.shift;
    let len = out.len();
    let (lo, hi) = (support.start as isize, support.end as isize);
    let a = weight * (1.0 - taps.frac);
    let mut add = |offset: isize, w: f64| {
        let range = clip(lo - offset - out_start, hi - offset - out_start, len);
        let m0 = (range.start as isize + out_start + offset) as usize;
        for (o, &v) in out[range.clone()].iter_mut().zip(&x[m0..m0 + range.len()]) {
            *o += w * v;
        }
    };
    add(k, a);
    if taps.frac != 0.0 {
        add(k + 1, weight * taps.frac);
    }
}

fn spectral_delay(samples: &[f64], delay: f64, fs: f64) -> Vec<f64> {
    let n = samples.len();
    let len = spectral::next_pow2(2 * n);
    let mut buf = spectral::spectrum_of(samples, len, 0);
    for (v, f) in buf.iter_mut().zip(spectral::delay_factors(len, fs, delay)) {
        *v *= f;
    }
    spectral::inverse(&mut buf);
    buf.truncate(n);
    buf.into_iter().map(|v| v.re).collect()
}

/// Shift a trace by `+delay` in time: `y(t) = x(t − delay)`.
pub fn apply_fractional_delay(trace: &Trace, delay: f64, method: DelayMethod) -> Result<Trace> {
    if !delay.is_finite() || delay.abs() >= trace.duration() {
        return Err(invalid(format!(
            "delay {delay} s exceeds the trace duration {} s",
            trace.duration()
        )));
    }
    let fs = trace.sampling_frequency;
    let taps = LinearTaps::new(delay, fs);
    let n = trace.samples.len();
    let samples = if method == DelayMethod::Linear || taps.frac == 0.0 {
        let mut out = vec![0.0; n];
        accumulate_linear(&mut out, 0, &trace.samples, taps, 0..n, 1.0);
        out
    } else {
        spectral_delay(&trace.samples, delay, fs)
    };
    Ok(Trace {
        samples,
        sampling_frequency: fs,
        t0: trace.t0,
    })
}

/// Modelled two-way arrival time of the echo from `target`.
pub fn expected_arrival_time(
    target: (f64, f64),
    tx_focus_depth: f64,
    config: &ProbeConfig,
    rules: &ApertureRules,
) -> Result<f64> {
    let tx = tx_aperture(tx_focus_depth, rules.tx, config)?;
    Ok(tx_arrival_time(target, tx_focus_depth, tx, config)? + target.1 / config.sound_speed)
}

/// Receive profile for `target` over the dynamic aperture, checked against the frame.
pub fn receive_profile(
    frame: &RfFrame,
    target: (f64, f64),
    config: &ProbeConfig,
    rules: &ApertureRules,
) -> Result<DelayProfile> {
    let aperture = rx_aperture(target.1, rules.rx, config)?;
    if !frame.aperture.contains_range(&aperture) {
        return Err(invalid(format!(
            "receive aperture {aperture:?} is not covered by the frame {:?}",
            frame.aperture
        )));
    }
    rx_delay_profile_at(target, aperture, config)
}

/// Delay-and-sum of `frame` with `profile` on the output samples
/// `[out_start, out_start + out_len)`, restricting inputs to `support`.
pub(crate) fn delay_and_sum_segment(
    frame: &RfFrame,
    profile: &DelayProfile,
    out_start: isize,
    out_len: usize,
    support: Range<usize>,
) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (n, d) in profile.iter() {
        let taps = LinearTaps::new(d, frame.sampling_frequency);
        accumulate_linear(&mut out, out_start, frame.trace(n), taps, support.clone(), 1.0);
    }
    out
}

/// Delay-and-sum over the full frame time axis.
pub fn delay_and_sum(frame: &RfFrame, profile: &DelayProfile, method: DelayMethod) -> Result<Trace> {
    if profile.elements.is_empty() {
        return Err(crate::error::computation("empty receive aperture"));
    }
    if !frame.aperture.contains_range(&profile.elements) {
        return Err(invalid("delay profile covers elements outside the frame"));
    }
    let n = frame.samples_per_trace;
    let fs = frame.sampling_frequency;
    let max_delay = profile.max_abs_delay();
    if max_delay >= frame.duration() {
        return Err(invalid("delay profile exceeds the frame duration"));
    }
    let samples = match method {
        DelayMethod::Linear => delay_and_sum_segment(frame, profile, 0, n, 0..n),
        DelayMethod::Spectral => {
            let len = spectral::next_pow2(2 * n);
            let mut acc = vec![Complex64::new(0.0, 0.0); len];
            for (el, d) in profile.iter() {
                let spec = spectral::spectrum_of(frame.trace(el), len, 0);
                for ((a, s), f) in acc.iter_mut().zip(spec).zip(spectral::delay_factors(len, fs, d)) {
                    *a += s * f;
                }
            }
            spectral::inverse(&mut acc);
            acc.truncate(n);
            acc.into_iter().map(|v| v.re).collect()
        }
    };
    Ok(Trace {
        samples,
        sampling_frequency: fs,
        t0: frame.t0,
    })
}

/// Time-dependent PSF at `target`: the delayed sum over the dynamic aperture.
pub fn das_psf(
    frame: &RfFrame,
    target: (f64, f64),
    config: &ProbeConfig,
    rules: &ApertureRules,
    method: DelayMethod,
) -> Result<Trace> {
    let profile = receive_profile(frame, target, config, rules)?;
    delay_and_sum(frame, &profile, method)
}

/// As [`das_psf`] for a frame that is known to be zero outside `support`.
pub fn das_psf_with_support(
    frame: &RfFrame,
    target: (f64, f64),
    config: &ProbeConfig,
    rules: &ApertureRules,
    support: Range<usize>,
) -> Result<Trace> {
    let profile = receive_profile(frame, target, config, rules)?;
    let n = frame.samples_per_trace;
    Ok(Trace {
        samples: delay_and_sum_segment(frame, &profile, 0, n, support),
        sampling_frequency: frame.sampling_frequency,
        t0: frame.t0,
    })
}

/// Short analysis segment around a time instant used for pixel values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Segment {
    pub start: isize,
    pub len: usize,
    /// Fractional position of the evaluation time inside the segment.
    pub position: f64,
}

impl Segment {
    pub fn around(time: f64, t0: f64, fs: f64, len: usize) -> Self {
        let p = (time - t0) * fs;
        let start = p.floor() as isize - (len / 2) as isize + 1;
        Segment {
            start,
            len,
            position: p - start as f64,
        }
    }

    /// Envelope at `position`, interpolated between the two neighbouring
    /// samples; the analytic signal is only formed at those two.
    pub fn envelope_value(&self, samples: &[f64]) -> f64 {
        let len = samples.len();
        let k = self.position.floor() as usize;
        let f = self.position - k as f64;
        if !(self.position >= 0.0) || len % 2 == 1 || k + 1 >= len {
            return metrics::sample_at(&metrics::envelope_samples(samples), self.position);
        }
        let h = spectral::hilbert_kernel(len);
        let at = |m: usize| {
            // h[(m − n) mod len] for n = 0.. runs backwards from h[m].
            let (head, tail) = h.split_at(m + 1);
            let kernel = head.iter().rev().chain(tail.iter().rev());
            let im: f64 = samples.iter().zip(kernel).map(|(x, w)| x * w).sum();
            samples[m].hypot(im)
        };
        let (a, b) = (at(k), at(k + 1));
        a + (b - a) * f
    }
}

/// Segment length for envelope evaluation: about 1.5 pulse durations.
pub(crate) fn segment_len(config: &ProbeConfig) -> usize {
    let pulse = make_pulse(config);
    let half = (0.75 * pulse.duration * config.sampling_frequency).ceil() as usize;
    spectral::next_pow2(2 * half + 2)
}

/// Envelope of the delayed sum at the expected arrival time, optionally with
/// raw samples restricted to a window of half-width `eps` around that time.
pub(crate) fn pixel_value(
    frame: &RfFrame,
    target: (f64, f64),
    config: &ProbeConfig,
    rules: &ApertureRules,
    method: DelayMethod,
    eps: Option<f64>,
) -> Result<f64> {
    let t = expected_arrival_time(target, frame.tx_focus_depth, config, rules)?;
    let fs = frame.sampling_frequency;
    let profile = receive_profile(frame, target, config, rules)?;
    let n = frame.samples_per_trace;
    let support = match eps {
        Some(e) => TimeWindow::new(t, e)?.sample_range(frame.t0, fs, n),
        None => 0..n,
    };
    let seg = Segment::around(t, frame.t0, fs, segment_len(config));
    let samples = match method {
        DelayMethod::Linear => delay_and_sum_segment(frame, &profile, seg.start, seg.len, support),
        DelayMethod::Spectral => {
            let source = match eps {
                Some(e) => crate::tidas::window_signals(frame, &TimeWindow::new(t, e)?)?,
                None => frame.clone(),
            };
            let full = delay_and_sum(&source, &profile, method)?;
            (0..seg.len)
                .map(|j| {
                    let i = seg.start + j as isize;
                    if i >= 0 && (i as usize) < n {
                        full.samples[i as usize]
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Ok(seg.envelope_value(&samples))
}

/// Pixel value at `target`.
pub fn das_value(
    frame: &RfFrame,
    target: (f64, f64),
    config: &ProbeConfig,
    rules: &ApertureRules,
    method: DelayMethod,
) -> Result<f64> {
    pixel_value(frame, target, config, rules, method, None)
}

/// Pixel value of DAS applied to the frame windowed around the pixel's arrival time.
pub fn das_value_windowed(
    frame: &RfFrame,
    target: (f64, f64),
    config: &ProbeConfig,
    rules: &ApertureRules,
    method: DelayMethod,
    eps: f64,
) -> Result<f64> {
    pixel_value(frame, target, config, rules, method, Some(eps))
}

fn check_grid(depths: &[f64]) -> Result<()> {
    if depths.is_empty() || depths[0] <= 0.0 || depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("depth grid must be positive and strictly increasing"));
    }
    Ok(())
}

/// Dynamic-focus line on the axis: one delay profile per depth.
pub fn das_line(
    frame: &RfFrame,
    depths: &[f64],
    config: &ProbeConfig,
    rules: &ApertureRules,
    method: DelayMethod,
) -> Result<Vec<f64>> {
    check_grid(depths)?;
    depths
        .par_iter()
        .map(|&z| das_value(frame, (0.0, z), config, rules, method))
        .collect()
}

/// As [`das_line`] with each pixel computed from its own windowed frame.
pub fn das_line_windowed(
    frame: &RfFrame,
    depths: &[f64],
    config: &ProbeConfig,
    rules: &ApertureRules,
    method: DelayMethod,
    eps: f64,
) -> Result<Vec<f64>> {
    check_grid(depths)?;
    depths
        .par_iter()
        .map(|&z| das_value_windowed(frame, (0.0, z), config, rules, method, eps))
        .collect()
}
