//! Point-scatterer forward model for a focused, unsteered transmit.
//!
//! Each element receives, for every scatterer, a weighted copy of the
//! transmit pulse delayed by the transmit arrival time at the scatterer plus
//! the return path to the element. Scatterers add linearly.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::probe::{position_unchecked, tx_aperture, ApertureRule, ElementRange, ProbeConfig};

/// Truncation of the Gaussian envelope in units of σ, on each side.
pub const PULSE_SUPPORT_SIGMAS: f64 = 4.0;

/// Extra samples appended after the deepest echo.
const TRACE_MARGIN_SAMPLES: usize = 16;

/// Gaussian-modulated sine with a −6 dB bandwidth of `fractional_bandwidth × f0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pulse {
    pub center_frequency: f64,
    pub fractional_bandwidth: f64,
    /// Envelope standard deviation in seconds.
    pub sigma: f64,
    /// Total support, `2 × 4σ`.
    pub duration: f64,
    /// Samples at the configured rate; sample `k` sits at `k / fs - duration / 2`
    /// relative to the pulse center.
    pub samples: Vec<f64>,
    pub sampling_frequency: f64,
}

impl Pulse {
    /// Waveform at time `t` relative to the pulse center.
    #[inline]
    pub fn value_at(&self, t: f64) -> f64 {
        if t.abs() > self.half_duration() {
            return 0.0;
        }
        let g = (-t * t / (2.0 * self.sigma * self.sigma)).exp();
        g * (2.0 * PI * self.center_frequency * t).sin()
    }

    #[inline]
    pub fn envelope_at(&self, t: f64) -> f64 {
        if t.abs() > self.half_duration() {
            return 0.0;
        }
        (-t * t / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn half_duration(&self) -> f64 {
        self.duration / 2.0
    }

    /// FWHM of the Gaussian envelope.
    pub fn envelope_fwhm(&self) -> f64 {
        2.0 * (2.0 * 2.0_f64.ln()).sqrt() * self.sigma
    }
}

pub fn make_pulse(config: &ProbeConfig) -> Pulse {
    let f0 = config.center_frequency;
    let bw = config.fractional_bandwidth;
    // A Gaussian envelope exp(-t²/2σ²) has a spectrum exp(-2π²σ²f²), whose
    // half-amplitude full width is sqrt(2 ln 2) / (π σ).
    let sigma = (2.0 * 2.0_f64.ln()).sqrt() / (PI * bw * f0);
    let duration = 2.0 * PULSE_SUPPORT_SIGMAS * sigma;
    let fs = config.sampling_frequency;
    let count = (duration * fs).floor() as usize + 1;
    let mut pulse = Pulse {
        center_frequency: f0,
        fractional_bandwidth: bw,
        sigma,
        duration,
        samples: Vec::new(),
        sampling_frequency: fs,
    };
    pulse.samples = (0..count)
        .map(|k| pulse.value_at(k as f64 / fs - duration / 2.0))
        .collect();
    pulse
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub z: f64,
    pub amplitude: f64,
}

impl Scatterer {
    pub fn on_axis(z: f64, amplitude: f64) -> Self {
        Self { x: 0.0, z, amplitude }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScattererSet {
    pub scatterers: Vec<Scatterer>,
}

impl ScattererSet {
    pub fn new(scatterers: Vec<Scatterer>) -> Self {
        Self { scatterers }
    }

    pub fn single(z: f64) -> Self {
        Self::new(vec![Scatterer::on_axis(z, 1.0)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.scatterers.is_empty() {
            return Err(invalid("scatterer set is empty"));
        }
        for s in &self.scatterers {
            if !(s.z > 0.0 && s.z.is_finite() && s.x.is_finite() && s.amplitude.is_finite()) {
                return Err(invalid(format!("invalid scatterer {s:?}")));
            }
        }
        Ok(())
    }
}

/// Transmit and receive aperture rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureRules {
    pub tx: ApertureRule,
    pub rx: ApertureRule,
}

impl Default for ApertureRules {
    fn default() -> Self {
        Self {
            tx: ApertureRule::Kossoff(0.6),
            rx: ApertureRule::FNumber(1.0),
        }
    }
}

/// Forward-model switches that are not part of the probe description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationOptions {
    /// Weight echoes by `z / R` instead of 1.
    pub spreading: bool,
    /// Standard deviation of additive Gaussian noise; 0 disables it.
    pub noise_amplitude: f64,
    pub seed: u64,
    /// Deepest admissible scatterer; fixes the trace length.
    pub max_depth: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            spreading: true,
            noise_amplitude: 0.0,
            seed: 0,
            max_depth: 45e-3,
        }
    }
}

/// Per-element RF traces, row-major `[element][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    pub traces: Vec<f64>,
    pub samples_per_trace: usize,
    pub sampling_frequency: f64,
    /// Time of the first sample relative to transmit firing.
    pub t0: f64,
    pub tx_focus_depth: f64,
    /// Elements covered by the rows, in order.
    pub aperture: ElementRange,
}

impl RfFrame {
    pub fn zeros(
        aperture: ElementRange,
        samples_per_trace: usize,
        sampling_frequency: f64,
        t0: f64,
        tx_focus_depth: f64,
    ) -> Self {
        Self {
            traces: vec![0.0; aperture.len() * samples_per_trace],
            samples_per_trace,
            sampling_frequency,
            t0,
            tx_focus_depth,
            aperture,
        }
    }

    pub fn element_count(&self) -> usize {
        self.aperture.len()
    }

    fn row_index(&self, n: i32) -> usize {
        assert!(
            self.aperture.contains(n),
            "element {n} outside frame aperture {:?}",
            self.aperture
        );
        (n - self.aperture.start) as usize
    }

    pub fn trace(&self, n: i32) -> &[f64] {
        let r = self.row_index(n);
        &self.traces[r * self.samples_per_trace..(r + 1) * self.samples_per_trace]
    }

    pub fn trace_mut(&mut self, n: i32) -> &mut [f64] {
        let r = self.row_index(n);
        let len = self.samples_per_trace;
        &mut self.traces[r * len..(r + 1) * len]
    }

    pub fn duration(&self) -> f64 {
        self.samples_per_trace as f64 / self.sampling_frequency
    }

    pub fn time(&self, sample: usize) -> f64 {
        self.t0 + sample as f64 / self.sampling_frequency
    }

    /// Fractional sample position of time `t`.
    pub fn sample_position(&self, t: f64) -> f64 {
        (t - self.t0) * self.sampling_frequency
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.traces {
            *v *= alpha;
        }
    }

    pub fn energy(&self) -> f64 {
        self.traces.iter().map(|v| v * v).sum()
    }
}

/// Arrival time of the focused transmit wavefront at `point = (x, z)`.
///
/// The latest contribution over the transmit aperture is taken, which equals
/// `z_f / c` at the focus where all wavefronts coincide.
pub fn tx_arrival_time(
    point: (f64, f64),
    tx_focus_depth: f64,
    aperture: ElementRange,
    config: &ProbeConfig,
) -> Result<f64> {
    let (x, z) = point;
    if !(z > 0.0) {
        return Err(invalid(format!("point depth must be positive, got {z}")));
    }
    if aperture.is_empty() {
        return Err(invalid("transmit aperture is empty"));
    }
    let zf = tx_focus_depth;
    let best = aperture
        .iter()
        .map(|n| {
            let xn = position_unchecked(n, config.pitch);
            (x - xn).hypot(z) - (xn.hypot(zf) - zf)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best / config.sound_speed)
}

/// Samples per trace for frames covering scatterers down to `max_depth`.
pub fn trace_length(config: &ProbeConfig, max_depth: f64) -> usize {
    let pulse = make_pulse(config);
    let half_width = config.element_count as f64 * config.pitch / 2.0;
    let span = 2.0 * max_depth.hypot(half_width) / config.sound_speed + pulse.duration;
    (span * config.sampling_frequency).ceil() as usize + TRACE_MARGIN_SAMPLES
}

pub fn synthesize_frame(
    scatterers: &ScattererSet,
    tx_focus_depth: f64,
    config: &ProbeConfig,
    rules: &ApertureRules,
    options: &SimulationOptions,
) -> Result<RfFrame> {
    synthesize_with_pulse(scatterers, tx_focus_depth, config, rules, options, &make_pulse(config))
}

/// As [`synthesize_frame`] with an explicit pulse.
pub fn synthesize_with_pulse(
    scatterers: &ScattererSet,
    tx_focus_depth: f64,
    config: &ProbeConfig,
    rules: &ApertureRules,
    options: &SimulationOptions,
    pulse: &Pulse,
) -> Result<RfFrame> {
    config.validate()?;
    scatterers.validate()?;
    if !(tx_focus_depth > 0.0) {
        return Err(invalid(format!("transmit focus must be positive, got {tx_focus_depth}")));
    }
    if let Some(s) = scatterers.scatterers.iter().find(|s| s.z > options.max_depth) {
        return Err(invalid(format!(
            "scatterer at {} m is deeper than the configured max depth {} m",
            s.z, options.max_depth
        )));
    }
    let tx = tx_aperture(tx_focus_depth, rules.tx, config)?;
    let fs = config.sampling_frequency;
    let c = config.sound_speed;
    let len = trace_length(config, options.max_depth);
    let mut frame = RfFrame::zeros(config.full_array(), len, fs, 0.0, tx_focus_depth);
    let half = pulse.half_duration();

    for s in &scatterers.scatterers {
        let t_tx = tx_arrival_time((s.x, s.z), tx_focus_depth, tx, config)?;
        for n in frame.aperture.iter() {
            let xn = position_unchecked(n, config.pitch);
            let r = (s.x - xn).hypot(s.z);
            let weight = if options.spreading { s.z / r } else { 1.0 };
            let tau = t_tx + r / c;
            let first = ((tau - half) * fs).ceil().max(0.0) as usize;
            let last = (((tau + half) * fs).floor() as usize).min(len - 1);
            let trace = frame.trace_mut(n);
            for (m, v) in trace.iter_mut().enumerate().take(last + 1).skip(first) {
                *v += s.amplitude * weight * pulse.value_at(m as f64 / fs - tau);
            }
        }
    }

    if options.noise_amplitude > 0.0 {
        let normal = Normal::new(0.0, options.noise_amplitude)
            .map_err(|e| invalid(format!("noise amplitude: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        for v in &mut frame.traces {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(frame)
}
