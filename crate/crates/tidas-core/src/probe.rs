//! Linear array geometry, aperture selection and the receive delay law.
//!
//! Elements are indexed by `n` in `[-N/2, N/2)` and sit at `x_n = (n + 0.5) * pitch`,
//! so the array is symmetric about the axis with no element on it. The receive
//! delay focusing element `n` on an on-axis point at depth `z` is
//!
//! ```text
//! D_n(z) = (z - sqrt(x_n^2 + z^2)) / c
//! ```
//!
//! which is never positive and flattens towards zero as `z` grows.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tolerance used when converting an aperture width into an element count.
const COUNT_TOLERANCE: f64 = 1e-9;

/// Geometry, acoustics and sampling parameters of the simulated array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub element_count: usize,
    /// Element pitch in metres.
    pub pitch: f64,
    /// Transmit carrier frequency in hertz.
    pub center_frequency: f64,
    /// RF sampling frequency in hertz.
    pub sampling_frequency: f64,
    /// Speed of sound in metres per second.
    pub sound_speed: f64,
    /// Nominal number of carrier cycles. Descriptive only: the pulse shape is
    /// set by `fractional_bandwidth`.
    pub pulse_cycles: f64,
    /// -6 dB bandwidth of the pulse as a fraction of the carrier.
    pub fractional_bandwidth: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            element_count: 192,
            pitch: 0.2e-3,
            center_frequency: 7.0e6,
            sampling_frequency: 50.0e6,
            sound_speed: 1540.0,
            pulse_cycles: 2.0,
            fractional_bandwidth: 0.6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.element_count < 2 || self.element_count % 2 != 0 {
            return Err(invalid(format!(
                "element_count must be even and at least 2, got {}",
                self.element_count
            )));
        }
        let positive = [
            ("pitch", self.pitch),
            ("center_frequency", self.center_frequency),
            ("sampling_frequency", self.sampling_frequency),
            ("sound_speed", self.sound_speed),
            ("fractional_bandwidth", self.fractional_bandwidth),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if !(self.pulse_cycles.is_finite() && self.pulse_cycles >= 0.0) {
            return Err(invalid("pulse_cycles must be non-negative"));
        }
        if self.sampling_frequency < 4.0 * self.center_frequency {
            return Err(invalid(format!(
                "sampling_frequency {} Hz is below 4x the center frequency {} Hz",
                self.sampling_frequency, self.center_frequency
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_frequency
    }

    pub fn half_count(&self) -> i32 {
        (self.element_count / 2) as i32
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / self.sampling_frequency
    }

    pub fn full_array(&self) -> ElementRange {
        ElementRange::symmetric(self.half_count())
    }
}

/// Rule converting a depth into an active aperture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ApertureRule {
    /// Width = depth / f.
    FNumber(f64),
    /// Fixed number of central elements.
    FixedCount(usize),
    /// Width = sqrt(4 λ z / k): the focus sits at fraction `k` of the
    /// near-field transition distance A² / (4 λ).
    Kossoff(f64),
}

impl ApertureRule {
    pub fn validate(&self, config: &ProbeConfig) -> Result<()> {
        match *self {
            ApertureRule::FNumber(f) if !(f.is_finite() && f > 0.0) => {
                Err(invalid(format!("F-number must be positive, got {f}")))
            }
            ApertureRule::FixedCount(n) if n < 1 || n > config.element_count => Err(invalid(
                format!("fixed aperture count {n} outside [1, {}]", config.element_count),
            )),
            ApertureRule::Kossoff(k) if !(k > 0.0 && k <= 1.0) => {
                Err(invalid(format!("Kossoff parameter must lie in (0, 1], got {k}")))
            }
            _ => Ok(()),
        }
    }

    fn width(&self, depth: f64, config: &ProbeConfig) -> Option<f64> {
        match *self {
            ApertureRule::FNumber(f) => Some(depth / f),
            ApertureRule::FixedCount(_) => None,
            ApertureRule::Kossoff(k) => Some((4.0 * config.wavelength() * depth / k).sqrt()),
        }
    }

    /// Even element count in `[2, N]` selected by this rule at `depth`.
    pub fn element_count(&self, depth: f64, config: &ProbeConfig) -> usize {
        let raw = match (self, self.width(depth, config)) {
            (ApertureRule::FixedCount(n), _) => *n,
            (_, Some(width)) => {
                let count = width / config.pitch + COUNT_TOLERANCE;
                if count.is_finite() && count > 0.0 {
                    count.floor().min(config.element_count as f64) as usize
                } else if count.is_finite() {
                    0
                } else {
                    config.element_count
                }
            }
            (_, None) => unreachable!("only FixedCount has no width"),
        };
        let even = raw - raw % 2;
        even.clamp(2, config.element_count)
    }
}

/// Contiguous element index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementRange {
    pub start: i32,
    pub end: i32,
}

impl ElementRange {
    pub fn new(start: i32, end: i32) -> Self {
        assert!(start <= end, "element range start {start} exceeds end {end}");
        Self { start, end }
    }

    /// `[-half, half)`.
    pub fn symmetric(half: i32) -> Self {
        Self::new(-half, half)
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, n: i32) -> bool {
        n >= self.start && n < self.end
    }

    pub fn contains_range(&self, other: &ElementRange) -> bool {
        other.start >= self.start && other.end <= self.end
    }

    pub fn iter(&self) -> std::ops::Range<i32> {
        self.start..self.end
    }

    /// Number of symmetric pairs, assuming the range is symmetric.
    pub fn half_len(&self) -> usize {
        self.end.max(0) as usize
    }

    pub fn is_symmetric(&self) -> bool {
        self.start == -self.end
    }
}

/// Per-element receive delays focusing at a single point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayProfile {
    pub focus_depth: f64,
    pub focus_lateral: f64,
    pub elements: ElementRange,
    /// Delays in seconds, ordered as `elements.iter()`.
    pub delays: Vec<f64>,
}

impl DelayProfile {
    pub fn delay(&self, n: i32) -> Option<f64> {
        self.elements
            .contains(n)
            .then(|| self.delays[(n - self.elements.start) as usize])
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.elements.iter().zip(self.delays.iter().copied())
    }

    /// Largest delay magnitude in seconds.
    pub fn max_abs_delay(&self) -> f64 {
        self.delays.iter().fold(0.0_f64, |m, d| m.max(d.abs()))
    }

    /// Same focus, restricted to a sub-range of elements.
    pub fn restricted(&self, elements: ElementRange) -> Result<DelayProfile> {
        if !self.elements.contains_range(&elements) {
            return Err(invalid(format!(
                "range {elements:?} is not inside the profile range {:?}",
                self.elements
            )));
        }
        let lo = (elements.start - self.elements.start) as usize;
        Ok(DelayProfile {
            focus_depth: self.focus_depth,
            focus_lateral: self.focus_lateral,
            elements,
            delays: self.delays[lo..lo + elements.len()].to_vec(),
        })
    }
}

pub fn element_position(n: i32, config: &ProbeConfig) -> Result<f64> {
    let half = config.half_count();
    if n < -half || n >= half {
        return Err(invalid(format!("element index {n} outside [{}, {half})", -half)));
    }
    Ok(position_unchecked(n, config.pitch))
}

#[inline]
pub(crate) fn position_unchecked(n: i32, pitch: f64) -> f64 {
    (n as f64 + 0.5) * pitch
}

/// Receive delay of an element at `x_n` for a focus at `(x, z)`.
#[inline]
pub fn receive_delay(x_n: f64, x: f64, z: f64, sound_speed: f64) -> f64 {
    (z - (x - x_n).hypot(z)) / sound_speed
}

fn check_aperture(aperture: &ElementRange, config: &ProbeConfig) -> Result<()> {
    if aperture.is_empty() || !config.full_array().contains_range(aperture) {
        return Err(invalid(format!(
            "aperture {aperture:?} is empty or outside the array {:?}",
            config.full_array()
        )));
    }
    Ok(())
}

/// Delay profile focusing on the axis at `focus_depth`.
pub fn rx_delay_profile(
    focus_depth: f64,
    aperture: ElementRange,
    config: &ProbeConfig,
) -> Result<DelayProfile> {
    rx_delay_profile_at((0.0, focus_depth), aperture, config)
}

/// Delay profile focusing on an arbitrary point `(x, z)`.
pub fn rx_delay_profile_at(
    focus: (f64, f64),
    aperture: ElementRange,
    config: &ProbeConfig,
) -> Result<DelayProfile> {
    let (x, z) = focus;
    if !(z.is_finite() && z > 0.0) || !x.is_finite() {
        return Err(invalid(format!("focus ({x}, {z}) must be finite with positive depth")));
    }
    check_aperture(&aperture, config)?;
    let delays = aperture
        .iter()
        .map(|n| receive_delay(position_unchecked(n, config.pitch), x, z, config.sound_speed))
        .collect();
    Ok(DelayProfile {
        focus_depth: z,
        focus_lateral: x,
        elements: aperture,
        delays,
    })
}

/// First-order relative change of `D_n` when the focus moves from `z0` to `z`.
pub fn delay_relative_variation(n: i32, z0: f64, z: f64, config: &ProbeConfig) -> Result<f64> {
    if !(z0 > 0.0) {
        return Err(invalid(format!("reference depth must be positive, got {z0}")));
    }
    let x = element_position(n, config)?;
    Ok(-(z - z0) / x.hypot(z0))
}

pub fn rx_aperture(depth: f64, rule: ApertureRule, config: &ProbeConfig) -> Result<ElementRange> {
    if !(depth > 0.0) {
        return Err(invalid(format!("depth must be positive, got {depth}")));
    }
    rule.validate(config)?;
    let count = rule.element_count(depth, config);
    Ok(ElementRange::symmetric((count / 2) as i32))
}

pub fn tx_aperture(
    focal_depth: f64,
    rule: ApertureRule,
    config: &ProbeConfig,
) -> Result<ElementRange> {
    rx_aperture(focal_depth, rule, config)
}
