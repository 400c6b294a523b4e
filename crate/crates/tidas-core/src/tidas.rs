//! Time-invariant delay-and-sum.
//!
//! A fixed receive profile `D_n` (focused at a reference depth) replaces the
//! per-pixel profiles of dynamic focusing. The mismatch is absorbed by a
//! scalar `θ` per pixel: the least-squares weight that maps the fixed-profile
//! sum of the windowed element signals onto the dynamic-profile sum. With
//! `a(f) = Σ_n Ŝ_n(f) e^{−i2πfD_n}` (fixed) and `b(f)` the same with the true
//! delays,
//!
//! ```text
//! θ = Σ_f Re(conj(a) b) / Σ_f |a|²
//! ```
//!
//! Element signals are windowed to `[T − ε, T + ε]` around the pixel's
//! two-way arrival time `T`, where `2ε` is the FWHM of the focal DAS PSF.

use std::f64::consts::PI;
use std::ops::Range;

use log::warn;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::das::{self, LinearTaps, Segment, Trace};
use crate::error::{computation, invalid, Result};
use crate::metrics;
use crate::probe::{rx_aperture, rx_delay_profile, DelayProfile, ElementRange, ProbeConfig};
use crate::sim::{
    make_pulse, synthesize_with_pulse, ApertureRules, Pulse, RfFrame, ScattererSet,
    SimulationOptions,
};
use crate::spectral;

/// Slack, in samples, when deciding whether a sample lies inside a window.
const WINDOW_EDGE_TOLERANCE: f64 = 1e-9;

/// Time interval `[center − ε, center + ε]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub center: f64,
    pub half_width: f64,
}

impl TimeWindow {
    pub fn new(center: f64, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite() && center.is_finite()) {
            return Err(invalid(format!(
                "window needs a finite center and positive half-width, got ({center}, {half_width})"
            )));
        }
        Ok(Self { center, half_width })
    }

    pub fn recentred(&self, center: f64) -> Self {
        Self { center, ..*self }
    }

    pub fn contains(&self, t: f64) -> bool {
        (t - self.center).abs() <= self.half_width
    }

    /// Indices of samples `t0 + m/fs` inside the window, clipped to `[0, len)`.
    pub fn sample_range(&self, t0: f64, fs: f64, len: usize) -> Range<usize> {
        let lo = ((self.center - self.half_width - t0) * fs - WINDOW_EDGE_TOLERANCE).ceil();
        let hi = ((self.center + self.half_width - t0) * fs + WINDOW_EDGE_TOLERANCE).floor() + 1.0;
        let lo = lo.clamp(0.0, len as f64) as usize;
        let hi = hi.clamp(0.0, len as f64) as usize;
        lo..hi.max(lo)
    }
}

/// Window of half-width FWHM/2 of `focal_psf`, centred at `expected_center`.
pub fn fwhm_window(focal_psf: &Trace, expected_center: f64) -> Result<TimeWindow> {
    let width = metrics::fwhm(focal_psf)?;
    let eps = width / 2.0;
    if 2.0 * eps < 1.0 / focal_psf.sampling_frequency {
        return Err(invalid(format!(
            "window width {} s is below one sample period",
            2.0 * eps
        )));
    }
    TimeWindow::new(expected_center, eps)
}

/// Zero every sample outside the window.
pub fn window_signals(frame: &RfFrame, window: &TimeWindow) -> Result<RfFrame> {
    let keep = window.sample_range(frame.t0, frame.sampling_frequency, frame.samples_per_trace);
    if keep.is_empty() {
        return Err(invalid(format!(
            "window {window:?} does not overlap the frame time support"
        )));
    }
    let mut out = frame.clone();
    let len = frame.samples_per_trace;
    for row in out.traces.chunks_mut(len) {
        row[..keep.start].iter_mut().for_each(|v| *v = 0.0);
        row[keep.end..].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaForm {
    /// Least-squares weight of the delayed sums.
    #[default]
    Beamsum,
    /// Sum over elements taken inside numerator and denominator.
    PerElement,
}

/// Spectra of windowed element signals on a common zero-padded grid.
///
/// Channels are either single elements or mirrored element pairs; a pair is
/// only valid with profiles that are symmetric about the axis.
pub struct WindowedSpectra {
    channels: Vec<Vec<i32>>,
    spectra: Vec<Vec<Complex64>>,
    /// Squared magnitudes of each element's own spectrum, per channel.
    element_power: Vec<Vec<f64>>,
    len: usize,
    fs: f64,
    /// Frame sample index of buffer index 0.
    origin: isize,
    frame_len: usize,
}

impl WindowedSpectra {
    /// One channel per element of `elements`.
    pub fn per_element(frame: &RfFrame, elements: ElementRange, max_shift: f64) -> Result<Self> {
        let channels = elements.iter().map(|n| vec![n]).collect();
        Self::build(frame, channels, max_shift)
    }

    /// One channel per mirrored pair `(j, −j−1)` of a symmetric range.
    pub fn paired(frame: &RfFrame, elements: ElementRange, max_shift: f64) -> Result<Self> {
        if !elements.is_symmetric() {
            return Err(invalid(format!("range {elements:?} is not symmetric")));
        }
        let channels = (0..elements.end).map(|j| vec![j, -j - 1]).collect();
        Self::build(frame, channels, max_shift)
    }

    fn build(frame: &RfFrame, channels: Vec<Vec<i32>>, max_shift: f64) -> Result<Self> {
        let fs = frame.sampling_frequency;
        let mut support: Option<(usize, usize)> = None;
        for &n in channels.iter().flatten() {
            if !frame.aperture.contains(n) {
                return Err(invalid(format!("element {n} is not in the frame")));
            }
            let tr = frame.trace(n);
            if let (Some(a), Some(b)) = (
                tr.iter().position(|&v| v != 0.0),
                tr.iter().rposition(|&v| v != 0.0),
            ) {
                support = Some(match support {
                    Some((lo, hi)) => (lo.min(a), hi.max(b + 1)),
                    None => (a, b + 1),
                });
            }
        }
        let (lo, hi) = support.ok_or_else(|| {
            computation("windowed frame is zero on the aperture: the window missed the echo")
        })?;
        let pad = (max_shift * fs).ceil() as usize + 2;
        let span = hi - lo;
        let len = spectral::next_pow2(2 * span + 2 * pad);
        let origin = lo as isize - pad as isize;
        let mut spectra = Vec::with_capacity(channels.len());
        let mut element_power = Vec::with_capacity(channels.len());
        let half = len / 2 + 1;
        for ch in &channels {
            let mut sum = vec![Complex64::new(0.0, 0.0); half];
            let mut power = vec![0.0; half];
            for &n in ch {
                let s = spectral::spectrum_of(&frame.trace(n)[lo..hi], len, pad);
                for k in 0..half {
                    sum[k] += s[k];
                    power[k] += s[k].norm_sqr();
                }
            }
            spectra.push(sum);
            element_power.push(power);
        }
        Ok(Self {
            channels,
            spectra,
            element_power,
            len,
            fs,
            origin,
            frame_len: frame.samples_per_trace,
        })
    }

    pub fn grid_len(&self) -> usize {
        self.len
    }

    /// Bin weights turning one-sided sums into full-grid sums.
    #[inline]
    fn weight(&self, k: usize) -> f64 {
        if k == 0 || 2 * k == self.len {
            1.0
        } else {
            2.0
        }
    }

    fn channel_delays(&self, profile: &DelayProfile) -> Result<Vec<f64>> {
        self.channels
            .iter()
            .map(|ch| {
                let d = profile.delay(ch[0]).ok_or_else(|| {
                    invalid(format!("profile does not cover element {}", ch[0]))
                })?;
                for &n in &ch[1..] {
                    let e = profile
                        .delay(n)
                        .ok_or_else(|| invalid(format!("profile does not cover element {n}")))?;
                    if e != d {
                        return Err(invalid("paired channels need a symmetric profile"));
                    }
                }
                Ok(d)
            })
            .collect()
    }

    /// One-sided spectrum of `Σ_channels Ŝ e^{−i2πfD}`.
    pub fn delayed_sum(&self, profile: &DelayProfile) -> Result<Vec<Complex64>> {
        let delays = self.channel_delays(profile)?;
        let half = self.len / 2 + 1;
        let mut acc = vec![Complex64::new(0.0, 0.0); half];
        for (spec, &d) in self.spectra.iter().zip(&delays) {
            let step = Complex64::from_polar(1.0, -2.0 * PI * d * self.fs / self.len as f64);
            let mut rot = Complex64::new(1.0, 0.0);
            for k in 0..half - 1 {
                acc[k] += spec[k] * rot;
                rot *= step;
            }
            let nyq = (-2.0 * PI * d * self.fs / 2.0).cos();
            acc[half - 1] += spec[half - 1] * nyq;
        }
        Ok(acc)
    }

    /// Full-grid `Σ Re(conj(a) b)`.
    pub fn inner(&self, a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(k, (x, y))| self.weight(k) * (x.conj() * y).re)
            .sum()
    }

    pub fn norm_sqr(&self, a: &[Complex64]) -> f64 {
        a.iter()
            .enumerate()
            .map(|(k, x)| self.weight(k) * x.norm_sqr())
            .sum()
    }

    pub fn theta(
        &self,
        fixed: &DelayProfile,
        truth: &DelayProfile,
        form: ThetaForm,
    ) -> Result<f64> {
        match form {
            ThetaForm::Beamsum => {
                let a = self.delayed_sum(fixed)?;
                let b = self.delayed_sum(truth)?;
                theta_from_sums(self, &a, &b)
            }
            ThetaForm::PerElement => self.theta_per_element(fixed, truth),
        }
    }

    fn theta_per_element(&self, fixed: &DelayProfile, truth: &DelayProfile) -> Result<f64> {
        if self.channels.iter().any(|c| c.len() != 1) {
            return Err(invalid("the per-element form needs per-element channels"));
        }
        let df = self.channel_delays(fixed)?;
        let dt = self.channel_delays(truth)?;
        let half = self.len / 2 + 1;
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..self.channels.len() {
            let power = &self.element_power[c];
            let shift = dt[c] - df[c];
            for (k, &p) in power.iter().enumerate().take(half) {
                let f = spectral::bin_frequency(k, self.len, self.fs).abs();
                let w = self.weight(k) * p;
                num += w * (2.0 * PI * f * shift).cos();
                den += w;
            }
        }
        if !(den > 0.0) {
            return Err(computation("zero windowed energy: the window missed the echo"));
        }
        Ok(num / den)
    }

    /// Time samples of a one-sided spectrum, indexed from `origin`.
    pub fn to_time(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let len = self.len;
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        buf[..spectrum.len()].copy_from_slice(spectrum);
        for k in 1..len - spectrum.len() + 1 {
            buf[len - k] = spectrum[k].conj();
        }
        spectral::inverse(&mut buf);
        buf.into_iter().map(|v| v.re).collect()
    }

    /// Buffer index range holding frame samples in `range`.
    pub fn buffer_range(&self, range: Range<usize>) -> Range<usize> {
        let lo = (range.start as isize - self.origin).clamp(0, self.len as isize) as usize;
        let hi = (range.end as isize - self.origin).clamp(0, self.len as isize) as usize;
        lo..hi.max(lo)
    }

    /// Frame sample index of buffer index 0.
    pub fn origin(&self) -> isize {
        self.origin
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }
}

fn theta_from_sums(spectra: &WindowedSpectra, a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    let den = spectra.norm_sqr(a);
    if !(den > 0.0) {
        return Err(computation(
            "fixed-profile sum has zero energy: the window missed the echo",
        ));
    }
    Ok(spectra.inner(a, b) / den)
}

/// Closed-form θ for one windowed frame and a pair of profiles on the same aperture.
pub fn estimate_theta(
    windowed_frame: &RfFrame,
    fixed_delays: &DelayProfile,
    true_delays: &DelayProfile,
    form: ThetaForm,
) -> Result<f64> {
    if fixed_delays.elements != true_delays.elements {
        return Err(invalid("fixed and true profiles must cover the same aperture"));
    }
    let shift = fixed_delays.max_abs_delay().max(true_delays.max_abs_delay());
    let spectra = WindowedSpectra::per_element(windowed_frame, fixed_delays.elements, shift)?;
    spectra.theta(fixed_delays, true_delays, form)
}

/// Non-zero sample range shared by the rows of a windowed frame.
fn common_support(frame: &RfFrame, elements: ElementRange) -> Range<usize> {
    let mut lo = usize::MAX;
    let mut hi = 0;
    for n in elements.iter() {
        let tr = frame.trace(n);
        if let Some(a) = tr.iter().position(|&v| v != 0.0) {
            lo = lo.min(a);
            hi = hi.max(tr.iter().rposition(|&v| v != 0.0).unwrap_or(a) + 1);
        }
    }
    if lo > hi {
        0..0
    } else {
        lo..hi
    }
}

/// `θ × Σ_n S̃_n ∗ δ_{D_n}` on the frame time axis.
pub fn tidas_psf(
    windowed_frame: &RfFrame,
    fixed_delays: &DelayProfile,
    theta: f64,
    method: das::DelayMethod,
) -> Result<Trace> {
    if !theta.is_finite() {
        return Err(invalid(format!("θ must be finite, got {theta}")));
    }
    match method {
        das::DelayMethod::Linear => {
            let support = common_support(windowed_frame, fixed_delays.elements);
            tidas_psf_with_support(windowed_frame, fixed_delays, theta, support)
        }
        das::DelayMethod::Spectral => {
            Ok(das::delay_and_sum(windowed_frame, fixed_delays, method)?.scaled(theta))
        }
    }
}

/// As [`tidas_psf`] with linear delays, for a frame known to be zero outside `support`.
pub fn tidas_psf_with_support(
    windowed_frame: &RfFrame,
    fixed_delays: &DelayProfile,
    theta: f64,
    support: Range<usize>,
) -> Result<Trace> {
    if !theta.is_finite() {
        return Err(invalid(format!("θ must be finite, got {theta}")));
    }
    if !windowed_frame.aperture.contains_range(&fixed_delays.elements) {
        return Err(invalid("delay profile covers elements outside the frame"));
    }
    let n = windowed_frame.samples_per_trace;
    let samples = das::delay_and_sum_segment(windowed_frame, fixed_delays, 0, n, support);
    Ok(Trace {
        samples,
        sampling_frequency: windowed_frame.sampling_frequency,
        t0: windowed_frame.t0,
    }
    .scaled(theta))
}

/// θ indexed by (reference depth, target depth); `NaN` marks a failed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatrix {
    pub reference_depths: Vec<f64>,
    pub target_depths: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ThetaMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.values[i][j];
        v.is_finite().then_some(v)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.reference_depths.len(), self.target_depths.len())
    }

    /// Row `i` linearly interpolated at `depths`; missing cells stay `NaN`.
    pub fn interpolate_row(&self, i: usize, depths: &[f64]) -> Vec<f64> {
        let grid = &self.target_depths;
        let row = &self.values[i];
        depths
            .iter()
            .map(|&z| {
                if grid.len() == 1 {
                    return row[0];
                }
                let k = grid.partition_point(|&g| g <= z).clamp(1, grid.len() - 1);
                let (z0, z1) = (grid[k - 1], grid[k]);
                let t = ((z - z0) / (z1 - z0)).clamp(0.0, 1.0);
                if t == 0.0 {
                    row[k - 1]
                } else if t == 1.0 {
                    row[k]
                } else {
                    row[k - 1] * (1.0 - t) + row[k] * t
                }
            })
            .collect()
    }

    /// Largest step between adjacent finite cells of row `i` within `cols`.
    pub fn row_roughness(&self, i: usize, cols: Range<usize>) -> f64 {
        let row = &self.values[i][cols];
        row.windows(2)
            .filter(|w| w[0].is_finite() && w[1].is_finite())
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max)
    }
}

/// Fixed ingredients of a single-scatterer sweep configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSetup {
    pub config: ProbeConfig,
    pub rules: ApertureRules,
    pub simulation: SimulationOptions,
    pub tx_focus_depth: f64,
    pub form: ThetaForm,
}

/// Frame, window and arrival time for a single on-axis scatterer.
pub struct SingleScatterer {
    pub frame: RfFrame,
    pub windowed: RfFrame,
    pub arrival: f64,
    pub window: TimeWindow,
    pub aperture: ElementRange,
}

impl SweepSetup {
    pub fn pulse(&self) -> Pulse {
        make_pulse(&self.config)
    }

    pub fn frame(&self, z: f64, pulse: &Pulse) -> Result<RfFrame> {
        synthesize_with_pulse(
            &ScattererSet::single(z),
            self.tx_focus_depth,
            &self.config,
            &self.rules,
            &self.simulation,
            pulse,
        )
    }

    pub fn arrival(&self, z: f64) -> Result<f64> {
        das::expected_arrival_time((0.0, z), self.tx_focus_depth, &self.config, &self.rules)
    }

    /// Correction window from the DAS PSF of a scatterer at the transmit focus.
    pub fn focal_window(&self) -> Result<TimeWindow> {
        let zf = self.tx_focus_depth;
        let frame = self.frame(zf, &self.pulse())?;
        let psf = das::das_psf(
            &frame,
            (0.0, zf),
            &self.config,
            &self.rules,
            das::DelayMethod::Linear,
        )?;
        fwhm_window(&psf, self.arrival(zf)?)
    }

    pub fn single(&self, z: f64, pulse: &Pulse, window: &TimeWindow) -> Result<SingleScatterer> {
        let frame = self.frame(z, pulse)?;
        let arrival = self.arrival(z)?;
        let window = window.recentred(arrival);
        let windowed = window_signals(&frame, &window)?;
        let aperture = rx_aperture(z, self.rules.rx, &self.config)?;
        Ok(SingleScatterer {
            frame,
            windowed,
            arrival,
            window,
            aperture,
        })
    }
}

/// θ and error norms for one (reference, target) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    pub theta: f64,
    pub local_error: f64,
    pub global_error: f64,
}

impl CellResult {
    pub const MISSING: CellResult = CellResult {
        theta: f64::NAN,
        local_error: f64::NAN,
        global_error: f64::NAN,
    };
}

/// Results for every reference depth against one target scatterer.
///
/// Errors compare `θ·a` with `b` in the time domain (local, on the window) and
/// through Parseval on the zero-padded grid (global).
pub fn sweep_column(
    setup: &SweepSetup,
    references: &[f64],
    target: f64,
    pulse: &Pulse,
    window: &TimeWindow,
    with_errors: bool,
) -> Result<Vec<CellResult>> {
    let s = setup.single(target, pulse, window)?;
    let truth = rx_delay_profile(target, s.aperture, &setup.config)?;
    let profiles: Vec<Result<DelayProfile>> = references
        .iter()
        .map(|&r| rx_delay_profile(r, s.aperture, &setup.config))
        .collect();
    let max_shift = profiles
        .iter()
        .flatten()
        .map(|p| p.max_abs_delay())
        .fold(truth.max_abs_delay(), f64::max);
    let spectra = match setup.form {
        ThetaForm::Beamsum => WindowedSpectra::paired(&s.windowed, s.aperture, max_shift)?,
        ThetaForm::PerElement => WindowedSpectra::per_element(&s.windowed, s.aperture, max_shift)?,
    };
    let b = spectra.delayed_sum(&truth)?;
    let b_norm = spectra.norm_sqr(&b);
    let window_range = spectra.buffer_range(s.window.sample_range(
        s.windowed.t0,
        s.windowed.sampling_frequency,
        s.windowed.samples_per_trace,
    ));
    let b_time = with_errors.then(|| spectra.to_time(&b));
    let b_local: f64 = b_time
        .as_ref()
        .map(|bt| bt[window_range.clone()].iter().map(|v| v * v).sum())
        .unwrap_or(0.0);

    let mut out = Vec::with_capacity(references.len());
    for profile in profiles {
        let cell = profile.and_then(|fixed| {
            let a = spectra.delayed_sum(&fixed)?;
            let theta = match setup.form {
                ThetaForm::Beamsum => theta_from_sums(&spectra, &a, &b)?,
                ThetaForm::PerElement => spectra.theta(&fixed, &truth, ThetaForm::PerElement)?,
            };
            if !with_errors {
                return Ok(CellResult {
                    theta,
                    local_error: f64::NAN,
                    global_error: f64::NAN,
                });
            }
            let diff: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * theta - y).collect();
            let global_error = spectra.norm_sqr(&diff) / b_norm;
            let diff_time = spectra.to_time(&diff);
            let local: f64 = diff_time[window_range.clone()].iter().map(|v| v * v).sum();
            if !(b_local > 0.0) {
                return Err(computation("reference PSF has no energy inside the window"));
            }
            Ok(CellResult {
                theta,
                local_error: local / b_local,
                global_error,
            })
        });
        out.push(cell.unwrap_or_else(|e| {
            warn!("cell at target {target} m failed: {e}");
            CellResult::MISSING
        }));
    }
    Ok(out)
}

/// `(reference × target)` grid of cell results, computed column by column.
pub fn sweep_cells(
    setup: &SweepSetup,
    references: &[f64],
    targets: &[f64],
    with_errors: bool,
) -> Result<Vec<Vec<CellResult>>> {
    setup.config.validate()?;
    let pulse = setup.pulse();
    let window = setup.focal_window()?;
    let columns: Vec<Vec<CellResult>> = targets
        .par_iter()
        .map(|&z| {
            sweep_column(setup, references, z, &pulse, &window, with_errors).unwrap_or_else(|e| {
                warn!("column at target {z} m failed: {e}");
                vec![CellResult::MISSING; references.len()]
            })
        })
        .collect();
    Ok((0..references.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect())
}

/// θ for every reference profile on `depth_grid` against a scatterer at every grid depth.
pub fn theta_matrix_sweep(depth_grid: &[f64], setup: &SweepSetup) -> Result<ThetaMatrix> {
    let cells = sweep_cells(setup, depth_grid, depth_grid, false)?;
    Ok(ThetaMatrix {
        reference_depths: depth_grid.to_vec(),
        target_depths: depth_grid.to_vec(),
        values: cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.theta).collect())
            .collect(),
    })
}

/// How the correction window is applied in the line reconstructor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineWindowing {
    /// Each element's raw signal is windowed around the pixel's arrival time
    /// before its fixed delay, as in the θ estimate.
    #[default]
    PerElement,
    /// The delayed sum over the fixed aperture is windowed after summation.
    SummedTrace,
}

/// Line values plus the number of fractional-delay applications performed.
#[derive(Debug, Clone, PartialEq)]
pub struct LineOutput {
    pub values: Vec<f64>,
    pub fractional_delays: usize,
}

/// Inputs of [`tidas_line`] that stay fixed along the line.
#[derive(Debug, Clone, Copy)]
pub struct LineSetup<'a> {
    pub config: &'a ProbeConfig,
    pub rules: &'a ApertureRules,
    pub half_width: f64,
    pub windowing: LineWindowing,
}

/// Pixel positions and dynamic apertures along the line.
struct Pixel {
    arrival: f64,
    half_aperture: usize,
    segment: Segment,
    raw_window: Range<usize>,
}

/// Convolutional line reconstruction with one fixed delay profile.
///
/// Every element is delayed exactly once. Mirrored elements share a delay,
/// so pairs are accumulated into prefix sums ordered by distance from the
/// axis; a pixel then reads the sum over its dynamic aperture, or over the
/// pairs whose delayed raw samples fall inside its window, in O(log N).
pub fn tidas_line(
    frame: &RfFrame,
    fixed_delays: &DelayProfile,
    thetas: &[f64],
    depths: &[f64],
    setup: &LineSetup,
) -> Result<LineOutput> {
    if thetas.len() != depths.len() {
        return Err(invalid(format!(
            "{} thetas for {} depths",
            thetas.len(),
            depths.len()
        )));
    }
    if depths.is_empty() || depths[0] <= 0.0 || depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("depth grid must be positive and strictly increasing"));
    }
    let elements = fixed_delays.elements;
    if !elements.is_symmetric() || !frame.aperture.contains_range(&elements) {
        return Err(invalid(format!(
            "fixed profile range {elements:?} must be symmetric and inside the frame"
        )));
    }
    if !(setup.half_width > 0.0) {
        return Err(invalid("window half-width must be positive"));
    }
    let config = setup.config;
    let fs = frame.sampling_frequency;
    let n_samples = frame.samples_per_trace;
    let seg_len = das::segment_len(config);
    let pairs = elements.half_len();

    let pair_taps: Vec<LinearTaps> = (0..pairs as i32)
        .map(|j| {
            let d = fixed_delays.delay(j).expect("pair inside range");
            if fixed_delays.delay(-j - 1) != Some(d) {
                return Err(invalid("fixed profile must be symmetric about the axis"));
            }
            Ok(LinearTaps::new(d, fs))
        })
        .collect::<Result<_>>()?;

    let pixels: Vec<Pixel> = depths
        .iter()
        .map(|&z| {
            let arrival = das::expected_arrival_time((0.0, z), frame.tx_focus_depth, config, setup.rules)?;
            let half_aperture = (rx_aperture(z, setup.rules.rx, config)?.len() / 2).min(pairs);
            let window = TimeWindow::new(arrival, setup.half_width)?;
            Ok(Pixel {
                arrival,
                half_aperture,
                segment: Segment::around(arrival, frame.t0, fs, seg_len),
                raw_window: window.sample_range(frame.t0, fs, n_samples),
            })
        })
        .collect::<Result<_>>()?;

    let values = match setup.windowing {
        LineWindowing::PerElement => per_element_line(frame, &pair_taps, &pixels),
        LineWindowing::SummedTrace => summed_trace_line(frame, &pair_taps, &pixels, setup.half_width),
    };
    let values = values
        .into_iter()
        .zip(thetas)
        .zip(depths)
        .map(|((v, &theta), &z)| {
            if theta.is_finite() {
                theta * v
            } else {
                warn!("missing θ at depth {z} m; pixel set to zero");
                0.0
            }
        })
        .collect();
    Ok(LineOutput {
        values,
        fractional_delays: 2 * pairs,
    })
}

/// Prefix sums over pairs of the two interpolation taps, trimmed per pair to
/// the columns that pixels reading that pair can touch.
struct PairPrefix {
    /// Output sample index of column 0.
    base: isize,
    /// Value of row `r` at column `col` is at index `origin[r] + col`.
    origin: Vec<isize>,
    /// Prefix rows of the `(1 − f)·x[i + k]` and `f·x[i + k + 1]` parts.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairPrefix {
    fn build(frame: &RfFrame, taps: &[LinearTaps], pixels: &[Pixel]) -> Self {
        let pairs = taps.len();
        let base = pixels.iter().map(|p| p.segment.start).min().unwrap_or(0);
        let end = pixels
            .iter()
            .map(|p| p.segment.start + p.segment.len as isize)
            .max()
            .unwrap_or(base);
        let width = (end - base) as usize;
        // Pair j is read only by pixels whose aperture exceeds j.
        let mut first = vec![width; pairs + 1];
        first[0] = 0;
        for p in pixels {
            let s = (p.segment.start - base) as usize;
            for f in first.iter_mut().skip(1).take(p.half_aperture) {
                *f = (*f).min(s);
            }
        }
        for r in 1..=pairs {
            first[r] = first[r].max(first[r - 1]);
        }
        let total: usize = first.iter().map(|&f| width - f).sum();
        let mut a = Vec::with_capacity(total);
        let mut b = Vec::with_capacity(total);
        let mut origin = Vec::with_capacity(pairs + 1);
        origin.push(0);
        a.resize(width, 0.0);
        b.resize(width, 0.0);
        let n = frame.samples_per_trace as isize;
        for (j, t) in taps.iter().enumerate() {
            let s = first[j + 1];
            let prev = (origin[j] + s as isize) as usize;
            let start = a.len();
            a.extend_from_within(prev..prev + width - s);
            b.extend_from_within(prev..prev + width - s);
            origin.push(start as isize - s as isize);
            let (pos, neg) = (frame.trace(j as i32), frame.trace(-(j as i32) - 1));
            let add = |row: &mut [f64], offset: isize, w: f64| {
                let cols = das::clip(-offset, n - offset, row.len());
                let m0 = (cols.start as isize + offset) as usize;
                let src = pos[m0..].iter().zip(&neg[m0..]);
                for (v, (p, q)) in row[cols].iter_mut().zip(src) {
                    *v += w * (p + q);
                }
            };
            let offset = base + s as isize + t.shift;
            add(&mut a[start..], offset, 1.0 - t.frac);
            if t.frac != 0.0 {
                add(&mut b[start..], offset + 1, t.frac);
            }
        }
        Self { base, origin, a, b }
    }

    #[inline]
    fn index(&self, r: usize, col: usize) -> usize {
        (self.origin[r] + col as isize) as usize
    }
}

fn per_element_line(frame: &RfFrame, taps: &[LinearTaps], pixels: &[Pixel]) -> Vec<f64> {
    let prefix = PairPrefix::build(frame, taps, pixels);
    let shifts: Vec<isize> = taps.iter().map(|t| t.shift).collect();
    pixels
        .par_iter()
        .map(|p| {
            let h = p.half_aperture;
            let ks = &shifts[..h];
            let (lo, hi) = (p.raw_window.start as isize, p.raw_window.end as isize);
            let len = p.segment.len;
            // Pairs whose raw index i + k + e, e ∈ {0, 1}, falls in [lo, hi).
            // Shifts are sorted, so the bounds only move down as i grows and
            // the B-part bounds of column c are the A-part bounds of c + 1.
            let bounds = |edge: isize| {
                let mut out = Vec::with_capacity(len + 1);
                let mut j = ks.partition_point(|&k| k < edge - p.segment.start);
                for c in 0..=len as isize {
                    let t = edge - p.segment.start - c;
                    while j > 0 && ks[j - 1] >= t {
                        j -= 1;
                    }
                    out.push(j);
                }
                out
            };
            let (from, to) = (bounds(lo), bounds(hi));
            let col0 = (p.segment.start - prefix.base) as usize;
            let (a, b) = (&prefix.a, &prefix.b);
            let seg: Vec<f64> = (0..len)
                .map(|c| {
                    let col = col0 + c;
                    let at = |r: usize| prefix.index(r, col);
                    a[at(to[c])] - a[at(from[c])] + b[at(to[c + 1])] - b[at(from[c + 1])]
                })
                .collect();
            p.segment.envelope_value(&seg)
        })
        .collect()
}

fn summed_trace_line(frame: &RfFrame, taps: &[LinearTaps], pixels: &[Pixel], eps: f64) -> Vec<f64> {
    let n = frame.samples_per_trace;
    let mut sum = vec![0.0; n];
    for (j, &t) in taps.iter().enumerate() {
        for el in [j as i32, -(j as i32) - 1] {
            das::accumulate_linear(&mut sum, 0, frame.trace(el), t, 0..n, 1.0);
        }
    }
    let fs = frame.sampling_frequency;
    pixels
        .par_iter()
        .map(|p| {
            let window = TimeWindow {
                center: p.arrival,
                half_width: eps,
            };
            let seg: Vec<f64> = (0..p.segment.len)
                .map(|c| {
                    let i = p.segment.start + c as isize;
                    if i >= 0 && (i as usize) < n && window.contains(frame.t0 + i as f64 / fs) {
                        sum[i as usize]
                    } else {
                        0.0
                    }
                })
                .collect();
            p.segment.envelope_value(&seg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::das::{das_line_windowed, das_psf, DelayMethod};
    use crate::probe::rx_delay_profile;
    use crate::sim::{synthesize_frame, Scatterer};

    fn setup(focus: f64) -> SweepSetup {
        SweepSetup {
            config: ProbeConfig::default(),
            rules: ApertureRules::default(),
            simulation: SimulationOptions::default(),
            tx_focus_depth: focus,
            form: ThetaForm::Beamsum,
        }
    }

    #[test]
    fn window_sample_range_is_inclusive() {
        let w = TimeWindow::new(1.0, 0.25).unwrap();
        assert_eq!(w.sample_range(0.0, 8.0, 100), 6..11);
        assert_eq!(w.sample_range(0.0, 8.0, 9), 6..9);
        assert!(TimeWindow::new(1.0, 0.0).is_err());
    }

    #[test]
    fn fwhm_window_of_rectangle_and_gaussian() {
        let fs = 100.0;
        let sigma = 0.1;
        let samples: Vec<f64> = (0..400)
            .map(|i| {
                let t = i as f64 / fs - 2.0;
                (-t * t / (2.0 * sigma * sigma)).exp() * (2.0 * PI * 20.0 * t).cos()
            })
            .collect();
        let w = fwhm_window(&Trace::new(samples, fs, 0.0).unwrap(), 2.0).unwrap();
        let expected = (2.0 * 2.0_f64.ln()).sqrt() * sigma;
        assert!((w.half_width - expected).abs() < 0.01 * expected);
        let rect: Vec<f64> = (0..400)
            .map(|i| if (100..180).contains(&i) { (2.0 * PI * 20.0 * i as f64 / fs).cos() } else { 0.0 })
            .collect();
        let w = fwhm_window(&Trace::new(rect, fs, 0.0).unwrap(), 0.0).unwrap();
        assert!((w.half_width - 0.4).abs() < 0.02);
        let flat = Trace::new(vec![1.0; 64], fs, 0.0).unwrap();
        assert!(fwhm_window(&flat, 0.0).is_err());
    }

    #[test]
    fn windowing_zeroes_outside() {
        let s = setup(25e-3);
        let f = s.frame(25e-3, &s.pulse()).unwrap();
        let w = TimeWindow::new(s.arrival(25e-3).unwrap(), 0.1e-6).unwrap();
        let wf = window_signals(&f, &w).unwrap();
        let keep = w.sample_range(0.0, f.sampling_frequency, f.samples_per_trace);
        for n in f.aperture.iter() {
            for (m, (&a, &b)) in f.trace(n).iter().zip(wf.trace(n)).enumerate() {
                if keep.contains(&m) {
                    assert_eq!(a, b);
                } else {
                    assert_eq!(b, 0.0);
                }
            }
        }
        let all = TimeWindow::new(f.duration() / 2.0, f.duration()).unwrap();
        assert_eq!(window_signals(&f, &all).unwrap(), f);
        assert!(window_signals(&f, &TimeWindow::new(-1.0, 1e-6).unwrap()).is_err());
    }

    fn windowed_single(s: &SweepSetup, z: f64) -> (SingleScatterer, TimeWindow) {
        let window = s.focal_window().unwrap();
        (s.single(z, &s.pulse(), &window).unwrap(), window)
    }

    #[test]
    fn theta_is_one_for_matched_profiles() {
        let s = setup(25e-3);
        let (one, _) = windowed_single(&s, 21e-3);
        let p = rx_delay_profile(21e-3, one.aperture, &s.config).unwrap();
        for form in [ThetaForm::Beamsum, ThetaForm::PerElement] {
            let t = estimate_theta(&one.windowed, &p, &p, form).unwrap();
            assert!((t - 1.0).abs() < 1e-12, "{form:?} {t}");
        }
    }

    #[test]
    fn theta_is_scale_invariant_and_near_one_close_to_reference() {
        let s = setup(25e-3);
        let (one, _) = windowed_single(&s, 24e-3);
        let truth = rx_delay_profile(24e-3, one.aperture, &s.config).unwrap();
        let fixed = rx_delay_profile(25e-3, one.aperture, &s.config).unwrap();
        let t = estimate_theta(&one.windowed, &fixed, &truth, ThetaForm::Beamsum).unwrap();
        let mut scaled = one.windowed.clone();
        scaled.scale(-3.7);
        let t2 = estimate_theta(&scaled, &fixed, &truth, ThetaForm::Beamsum).unwrap();
        assert!((t - t2).abs() < 1e-12);
        assert!((t - 1.0).abs() < 0.1, "{t}");
        let te = estimate_theta(&one.windowed, &fixed, &truth, ThetaForm::PerElement).unwrap();
        assert!(te <= 1.0 + 1e-12);
    }

    #[test]
    fn theta_rejects_missed_echo() {
        let s = setup(25e-3);
        let f = s.frame(25e-3, &s.pulse()).unwrap();
        let w = TimeWindow::new(5e-6, 0.1e-6).unwrap();
        let wf = window_signals(&f, &w).unwrap();
        let ap = rx_aperture(25e-3, s.rules.rx, &s.config).unwrap();
        let p = rx_delay_profile(25e-3, ap, &s.config).unwrap();
        assert!(estimate_theta(&wf, &p, &p, ThetaForm::Beamsum).is_err());
        let other = rx_delay_profile(25e-3, ElementRange::symmetric(4), &s.config).unwrap();
        assert!(estimate_theta(&wf, &p, &other, ThetaForm::Beamsum).is_err());
    }

    #[test]
    fn tidas_psf_reduces_to_das_on_windowed_frame() {
        let s = setup(25e-3);
        for z in [12e-3, 25e-3, 37e-3] {
            let (one, _) = windowed_single(&s, z);
            let p = rx_delay_profile(z, one.aperture, &s.config).unwrap();
            let ti = tidas_psf(&one.windowed, &p, 1.0, DelayMethod::Linear).unwrap();
            let da = das_psf(&one.windowed, (0.0, z), &s.config, &s.rules, DelayMethod::Linear).unwrap();
            assert_eq!(ti, da);
            let zero = tidas_psf(&one.windowed, &p, 0.0, DelayMethod::Linear).unwrap();
            assert!(zero.samples.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn paired_and_per_element_spectra_agree() {
        let s = setup(25e-3);
        let (one, _) = windowed_single(&s, 30e-3);
        let truth = rx_delay_profile(30e-3, one.aperture, &s.config).unwrap();
        let fixed = rx_delay_profile(26e-3, one.aperture, &s.config).unwrap();
        let shift = fixed.max_abs_delay().max(truth.max_abs_delay());
        let pe = WindowedSpectra::per_element(&one.windowed, one.aperture, shift).unwrap();
        let pa = WindowedSpectra::paired(&one.windowed, one.aperture, shift).unwrap();
        let t1 = pe.theta(&fixed, &truth, ThetaForm::Beamsum).unwrap();
        let t2 = pa.theta(&fixed, &truth, ThetaForm::Beamsum).unwrap();
        assert!((t1 - t2).abs() < 1e-12);
        assert!(pa.theta(&fixed, &truth, ThetaForm::PerElement).is_err());
    }

    #[test]
    fn sweep_diagonal_is_one_with_zero_error() {
        let s = setup(25e-3);
        let grid: Vec<f64> = (0..6).map(|i| 10e-3 + 5e-3 * i as f64).collect();
        let cells = sweep_cells(&s, &grid, &grid, true).unwrap();
        for (i, row) in cells.iter().enumerate() {
            assert!((row[i].theta - 1.0).abs() < 1e-12);
            assert!(row[i].local_error < 1e-20);
            assert!(row[i].global_error < 1e-20);
        }
        let m = theta_matrix_sweep(&grid, &s).unwrap();
        assert_eq!(m.shape(), (6, 6));
        for (i, row) in cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                assert_eq!(m.values[i][j], c.theta);
            }
        }
    }

    #[test]
    fn interpolate_row_is_linear() {
        let m = ThetaMatrix {
            reference_depths: vec![1.0],
            target_depths: vec![1.0, 2.0, 4.0],
            values: vec![vec![1.0, 3.0, f64::NAN]],
        };
        let v = m.interpolate_row(0, &[0.5, 1.0, 1.5, 2.0, 3.0]);
        assert_eq!(&v[..4], &[1.0, 1.0, 2.0, 3.0]);
        assert!(v[4].is_nan());
        assert_eq!(m.get(0, 2), None);
    }

    fn line_fixture() -> (SweepSetup, RfFrame, Vec<f64>, Vec<f64>) {
        let s = setup(25e-3);
        let depths: Vec<f64> = (0..120).map(|i| 2e-3 + 40e-3 * i as f64 / 119.0).collect();
        let sd = [depths[20], depths[50], depths[80], depths[110]];
        let set = ScattererSet::new(sd.iter().map(|&z| Scatterer::on_axis(z, 1.0)).collect());
        let frame = synthesize_frame(&set, 25e-3, &s.config, &s.rules, &s.simulation).unwrap();
        (s, frame, depths, sd.to_vec())
    }

    #[test]
    fn line_with_matched_profile_equals_windowed_das() {
        let (s, frame, depths, _) = line_fixture();
        let eps = s.focal_window().unwrap().half_width;
        let line_setup = LineSetup {
            config: &s.config,
            rules: &s.rules,
            half_width: eps,
            windowing: LineWindowing::PerElement,
        };
        let reference = das_line_windowed(&frame, &depths, &s.config, &s.rules, DelayMethod::Linear, eps).unwrap();
        for (i, &z) in depths.iter().enumerate().step_by(7) {
            let ap = rx_aperture(z, s.rules.rx, &s.config).unwrap();
            let p = rx_delay_profile(z, ap, &s.config).unwrap();
            let out = tidas_line(&frame, &p, &[1.0], &[z], &line_setup).unwrap();
            assert!(
                (out.values[0] - reference[i]).abs() <= 1e-12 * reference[i].abs().max(1e-12),
                "z={z}: {} vs {}",
                out.values[0],
                reference[i]
            );
        }
    }

    #[test]
    fn summed_trace_with_wide_window_equals_das() {
        let (s, frame, depths, _) = line_fixture();
        let line_setup = LineSetup {
            config: &s.config,
            rules: &s.rules,
            half_width: 1.0,
            windowing: LineWindowing::SummedTrace,
        };
        for &z in depths.iter().step_by(11) {
            let ap = rx_aperture(z, s.rules.rx, &s.config).unwrap();
            let p = rx_delay_profile(z, ap, &s.config).unwrap();
            let out = tidas_line(&frame, &p, &[1.0], &[z], &line_setup).unwrap();
            let d = das::das_value(&frame, (0.0, z), &s.config, &s.rules, DelayMethod::Linear).unwrap();
            assert!((out.values[0] - d).abs() <= 1e-12 * d.max(1e-12));
        }
    }

    #[test]
    fn line_delays_each_element_once() {
        let (s, frame, depths, sd) = line_fixture();
        let eps = s.focal_window().unwrap().half_width;
        let ap = rx_aperture(*depths.last().unwrap(), s.rules.rx, &s.config).unwrap();
        let fixed = rx_delay_profile(25e-3, ap, &s.config).unwrap();
        let thetas = vec![1.0; depths.len()];
        for windowing in [LineWindowing::PerElement, LineWindowing::SummedTrace] {
            let line_setup = LineSetup {
                config: &s.config,
                rules: &s.rules,
                half_width: eps,
                windowing,
            };
            let out = tidas_line(&frame, &fixed, &thetas, &depths, &line_setup).unwrap();
            assert_eq!(out.fractional_delays, ap.len());
            let short = tidas_line(&frame, &fixed, &thetas[..10], &depths[..10], &line_setup).unwrap();
            assert_eq!(short.fractional_delays, ap.len());
            for &z in &sd {
                let i = metrics::nearest_index(&depths, z);
                assert!(out.values[i] >= out.values[i - 3] && out.values[i] >= out.values[i + 3]);
            }
        }
    }

    #[test]
    fn missing_theta_renders_zero() {
        let (s, frame, depths, _) = line_fixture();
        let ap = rx_aperture(*depths.last().unwrap(), s.rules.rx, &s.config).unwrap();
        let fixed = rx_delay_profile(25e-3, ap, &s.config).unwrap();
        let mut thetas = vec![1.0; depths.len()];
        thetas[50] = f64::NAN;
        let line_setup = LineSetup {
            config: &s.config,
            rules: &s.rules,
            half_width: 0.1e-6,
            windowing: LineWindowing::PerElement,
        };
        let out = tidas_line(&frame, &fixed, &thetas, &depths, &line_setup).unwrap();
        assert_eq!(out.values[50], 0.0);
        assert!(tidas_line(&frame, &fixed, &thetas[1..], &depths, &line_setup).is_err());
    }
}
