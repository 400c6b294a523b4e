//! FFT plumbing shared by the delay, θ and envelope code.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
    static HILBERT: RefCell<HashMap<usize, Arc<[f64]>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                PLANNER.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(len)
                    } else {
                        p.plan_fft_forward(len)
                    }
                })
            })
            .clone()
    })
}

/// Unnormalised forward DFT in place.
pub fn forward(buf: &mut [Complex64]) {
    if !buf.is_empty() {
        plan(buf.len(), false).process(buf);
    }
}

/// Inverse DFT in place, scaled by `1/len` so that `inverse(forward(x)) = x`.
pub fn inverse(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    plan(buf.len(), true).process(buf);
    let scale = 1.0 / buf.len() as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Real samples zero-padded to `len` and transformed.
pub fn spectrum_of(samples: &[f64], len: usize, offset: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (dst, &s) in buf[offset..].iter_mut().zip(samples) {
        dst.re = s;
    }
    forward(&mut buf);
    buf
}

/// Frequency of DFT bin `k` on a grid of `len` bins, negative above Nyquist.
#[inline]
pub fn bin_frequency(k: usize, len: usize, fs: f64) -> f64 {
    let k = k as f64;
    let l = len as f64;
    if 2 * (k as usize) < len {
        k * fs / l
    } else {
        (k - l) * fs / l
    }
}

/// Per-bin multipliers realising the delay `y(t) = x(t - delay)`.
///
/// The Nyquist bin of an even grid gets the real part of the phase factor so
/// that a real input stays real.
pub fn delay_factors(len: usize, fs: f64, delay: f64) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let f = bin_frequency(k, len, fs);
        let phase = -2.0 * PI * f * delay;
        if len % 2 == 0 && 2 * k == len {
            out.push(Complex64::new(phase.cos(), 0.0));
        } else {
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

/// Analytic signal of a real sequence via the one-sided spectrum.
pub fn analytic_signal(samples: &[f64]) -> Vec<Complex64> {
    let n = samples.len();
    let mut buf: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    forward(&mut buf);
    apply_one_sided(&mut buf);
    inverse(&mut buf);
    debug_assert_eq!(buf.len(), n);
    buf
}

/// Circular kernel `h` with `Im z[m] = Σ_n x[n] h[(m − n) mod len]`, where
/// `z` is [`analytic_signal`] of `x` and `len` is even.
pub fn hilbert_kernel(len: usize) -> Arc<[f64]> {
    HILBERT.with(|cache| {
        cache
            .borrow_mut()
            .entry(len)
            .or_insert_with(|| {
                (0..len)
                    .map(|d| {
                        let s: f64 = (1..len / 2)
                            .map(|k| (2.0 * PI * (k * d % len) as f64 / len as f64).sin())
                            .sum();
                        2.0 * s / len as f64
                    })
                    .collect()
            })
            .clone()
    })
}

/// Zero the negative frequencies and double the positive ones.
pub(crate) fn apply_one_sided(buf: &mut [Complex64]) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let half = n / 2;
    if n % 2 == 0 {
        for v in &mut buf[1..half] {
            *v *= 2.0;
        }
        for v in &mut buf[half + 1..] {
            *v = Complex64::new(0.0, 0.0);
        }
    } else {
        for v in &mut buf[1..=half] {
            *v *= 2.0;
        }
        for v in &mut buf[half + 1..] {
            *v = Complex64::new(0.0, 0.0);
        }
    }
}
