//! Experiment families: single-scatterer peak/FWHM sweeps, the
//! (reference × target) θ and error sweep, multi-scatterer lines with
//! side-lobe statistics, and the DAS versus tiDAS timing benchmark.
//!
//! Every family writes CSV files under the configured output directory.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::das::{self, DelayMethod};
use crate::error::{invalid, Result};
use crate::io;
use crate::metrics;
use crate::probe::{rx_aperture, rx_delay_profile, ProbeConfig};
use crate::sim::{synthesize_frame, ApertureRules, Scatterer, ScattererSet, SimulationOptions};
use crate::tidas::{
    self, sweep_cells, CellResult, LineSetup, LineWindowing, SweepSetup, ThetaForm, ThetaMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for DepthGrid {
    fn default() -> Self {
        Self {
            min: 2e-3,
            max: 42e-3,
            count: 600,
        }
    }
}

impl DepthGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.count >= 2) {
            return Err(invalid(format!("invalid depth grid {self:?}")));
        }
        Ok(())
    }

    /// Evenly spaced depths including both ends.
    pub fn depths(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.min + step * i as f64).collect()
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }
}

/// On-axis scatterers evenly spaced over `[min_depth, max_depth]` with a
/// linear amplitude ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub count: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub amplitude_start: f64,
    pub amplitude_end: f64,
}

impl ScenarioSpec {
    fn uniform(name: &str, count: usize, min_depth: f64, max_depth: f64) -> Self {
        Self {
            name: name.into(),
            count,
            min_depth,
            max_depth,
            amplitude_start: 1.0,
            amplitude_end: 1.0,
        }
    }

    /// Scatterers snapped to the nearest depth of `grid`.
    pub fn scatterers(&self, grid: &[f64]) -> Result<ScattererSet> {
        if self.count == 0 || self.max_depth < self.min_depth {
            return Err(invalid(format!("invalid scenario {self:?}")));
        }
        let ramp = |i: usize| {
            if self.count == 1 {
                0.0
            } else {
                i as f64 / (self.count - 1) as f64
            }
        };
        let scatterers = (0..self.count)
            .map(|i| {
                let t = ramp(i);
                let z = self.min_depth + t * (self.max_depth - self.min_depth);
                let z = grid[metrics::nearest_index(grid, z)];
                let a = self.amplitude_start + t * (self.amplitude_end - self.amplitude_start);
                Scatterer::on_axis(z, a)
            })
            .collect();
        Ok(ScattererSet::new(scatterers))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: usize,
    pub warmup: usize,
    /// Grid size of the sweep row; the full grid when `full_scale` is set.
    pub reduced_count: usize,
    pub full_scale: bool,
    pub four_point_depths: Vec<f64>,
    /// Reference depth for the line rows.
    pub line_reference_depth: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            warmup: 2,
            reduced_count: 100,
            full_scale: false,
            four_point_depths: vec![15e-3, 20e-3, 25e-3, 30e-3],
            line_reference_depth: 25e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub probe: ProbeConfig,
    #[serde(rename = "grid")]
    pub depth_grid: DepthGrid,
    pub tx_focus_depths: Vec<f64>,
    pub center_frequencies: Vec<f64>,
    pub reference_depths: Vec<f64>,
    pub scatterer_scenarios: Vec<ScenarioSpec>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub parallel_workers: usize,
    pub rules: ApertureRules,
    /// Forward-model switches; `simulation.seed` is the single seed of a run.
    pub simulation: SimulationOptions,
    pub delay_method: DelayMethod,
    pub theta_form: ThetaForm,
    pub line_windowing: LineWindowing,
    /// Transmit focus of the (reference × target) error sweep.
    pub error_sweep_tx_focus: f64,
    pub error_threshold: f64,
    /// Main-lobe guard in pixels; derived from the focal FWHM when absent.
    pub guard_pixels: Option<usize>,
    /// Scatterer depth for the `simulate` and `psf` commands.
    pub depth: f64,
    /// Reference profile and transmit focus for the `simulate` and `psf` commands.
    pub reference_depth: f64,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            depth_grid: DepthGrid::default(),
            tx_focus_depths: vec![15e-3, 25e-3, 35e-3],
            center_frequencies: vec![5e6, 7e6],
            reference_depths: vec![25e-3, 35e-3],
            scatterer_scenarios: vec![
                ScenarioSpec::uniform("5_uniform", 5, 10e-3, 40e-3),
                ScenarioSpec {
                    amplitude_end: 2.0,
                    ..ScenarioSpec::uniform("5_different", 5, 10e-3, 40e-3)
                },
                ScenarioSpec::uniform("100_uniform", 100, 2.2e-3, 41.8e-3),
            ],
            output_dir: PathBuf::from("tidas_out"),
            parallel_workers: 0,
            rules: ApertureRules::default(),
            simulation: SimulationOptions::default(),
            delay_method: DelayMethod::Linear,
            theta_form: ThetaForm::Beamsum,
            line_windowing: LineWindowing::PerElement,
            error_sweep_tx_focus: 25e-3,
            error_threshold: 0.05,
            guard_pixels: None,
            depth: 25e-3,
            reference_depth: 25e-3,
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.depth_grid.validate()?;
        self.rules.tx.validate(&self.probe)?;
        self.rules.rx.validate(&self.probe)?;
        if self.depth_grid.max > self.simulation.max_depth {
            return Err(invalid("depth grid extends below the simulated max depth"));
        }
        for &f in &self.center_frequencies {
            let mut p = self.probe;
            p.center_frequency = f;
            p.validate()?;
        }
        let depths = self
            .tx_focus_depths
            .iter()
            .chain(&self.reference_depths)
            .chain([&self.error_sweep_tx_focus, &self.depth, &self.reference_depth]);
        for &d in depths {
            if !(d > 0.0 && d <= self.simulation.max_depth) {
                return Err(invalid(format!("depth {d} m outside (0, max_depth]")));
            }
        }
        if self.bench.trials == 0 || self.bench.reduced_count < 2 {
            return Err(invalid("bench needs at least one trial and a grid of 2"));
        }
        Ok(())
    }

    fn setup(&self, probe: ProbeConfig, tx_focus_depth: f64) -> SweepSetup {
        SweepSetup {
            config: probe,
            rules: self.rules,
            simulation: self.simulation,
            tx_focus_depth,
            form: self.theta_form,
        }
    }

    fn probe_at(&self, frequency: f64) -> ProbeConfig {
        ProbeConfig {
            center_frequency: frequency,
            ..self.probe
        }
    }
}

/// Runs `f` on a pool of `workers` threads (0 = all cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let k = pos.floor() as usize;
    let f = pos - k as f64;
    if k + 1 < sorted.len() {
        sorted[k] * (1.0 - f) + sorted[k + 1] * f
    } else {
        sorted[k]
    }
}

// ---------------------------------------------------------------------------
// Peak and FWHM sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFwhmRow {
    pub center_frequency: f64,
    pub focus_depth: f64,
    pub depth: f64,
    pub theta: f64,
    pub das_peak: f64,
    pub das_windowed_peak: f64,
    pub tidas_peak: f64,
    /// Normalised by the DAS peak of a scatterer at the focus.
    pub das_peak_norm: f64,
    /// Normalised by the windowed DAS peak at the focus.
    pub das_windowed_peak_norm: f64,
    pub tidas_peak_norm: f64,
    pub peak_abs_diff: f64,
    pub fwhm_das: f64,
    pub fwhm_das_windowed: f64,
    pub fwhm_tidas: f64,
    /// `|FWHM_tidas − FWHM_das_windowed|`.
    pub fwhm_diff: f64,
    /// `fwhm_diff` over the focal DAS FWHM.
    pub fwhm_diff_rel: f64,
    pub fwhm_axial_das_windowed: f64,
    pub fwhm_axial_tidas: f64,
    pub local_error: f64,
    pub global_error: f64,
}

/// Box-plot statistics of `fwhm_diff_rel` per configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwhmSummary {
    pub center_frequency: f64,
    pub focus_depth: f64,
    pub focal_fwhm: f64,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
    pub max: f64,
    pub median_abs_seconds: f64,
}

impl FwhmSummary {
    fn from_rows(frequency: f64, focus: f64, focal_fwhm: f64, rows: &[PeakFwhmRow]) -> Self {
        let mut rel: Vec<f64> = rows
            .iter()
            .map(|r| r.fwhm_diff_rel)
            .filter(|v| v.is_finite())
            .collect();
        rel.sort_by(|a, b| a.total_cmp(b));
        let mut abs: Vec<f64> = rows.iter().map(|r| r.fwhm_diff).filter(|v| v.is_finite()).collect();
        let (q1, q3) = (quantile(&rel, 0.25), quantile(&rel, 0.75));
        let iqr = q3 - q1;
        let inside: Vec<f64> = rel
            .iter()
            .copied()
            .filter(|&v| v >= q1 - 1.5 * iqr && v <= q3 + 1.5 * iqr)
            .collect();
        Self {
            center_frequency: frequency,
            focus_depth: focus,
            focal_fwhm,
            count: rel.len(),
            median: quantile(&rel, 0.5),
            q1,
            q3,
            whisker_low: inside.first().copied().unwrap_or(f64::NAN),
            whisker_high: inside.last().copied().unwrap_or(f64::NAN),
            outliers: rel.len() - inside.len(),
            max: rel.last().copied().unwrap_or(f64::NAN),
            median_abs_seconds: median(&mut abs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakFwhmOutput {
    pub rows: Vec<PeakFwhmRow>,
    pub summary: Vec<FwhmSummary>,
}

struct PsfSet {
    das: das::Trace,
    das_windowed: das::Trace,
    tidas: das::Trace,
    theta: f64,
    window: tidas::TimeWindow,
}

/// DAS, windowed DAS and tiDAS PSFs of a single scatterer at `z` with the
/// fixed profile focused at `reference`.
fn psf_set(
    setup: &SweepSetup,
    z: f64,
    reference: f64,
    pulse: &crate::sim::Pulse,
    window: &tidas::TimeWindow,
    method: DelayMethod,
) -> Result<PsfSet> {
    let s = setup.single(z, pulse, window)?;
    let truth = rx_delay_profile(z, s.aperture, &setup.config)?;
    let fixed = rx_delay_profile(reference, s.aperture, &setup.config)?;
    let theta = tidas::estimate_theta(&s.windowed, &fixed, &truth, setup.form)?;
    let das = das::das_psf(&s.frame, (0.0, z), &setup.config, &setup.rules, method)?;
    let das_windowed = tidas::tidas_psf(&s.windowed, &truth, 1.0, method)?;
    let tidas = tidas::tidas_psf(&s.windowed, &fixed, theta, method)?;
    Ok(PsfSet {
        das,
        das_windowed,
        tidas,
        theta,
        window: s.window,
    })
}

fn peak_fwhm_configuration(
    cfg: &ExperimentConfig,
    frequency: f64,
    focus: f64,
    depths: &[f64],
) -> Result<(Vec<PeakFwhmRow>, FwhmSummary)> {
    let setup = cfg.setup(cfg.probe_at(frequency), focus);
    let pulse = setup.pulse();
    let window = setup.focal_window()?;
    let focal_fwhm = 2.0 * window.half_width;
    let focal = psf_set(&setup, focus, focus, &pulse, &window, cfg.delay_method)?;
    let das_focal = metrics::peak(&focal.das)?.1;
    let windowed_focal = metrics::peak(&focal.das_windowed)?.1;
    let c = setup.config.sound_speed;
    let rows: Vec<PeakFwhmRow> = depths
        .par_iter()
        .map(|&z| {
            let cell = || -> Result<PeakFwhmRow> {
                let p = psf_set(&setup, z, focus, &pulse, &window, cfg.delay_method)?;
                let das_peak = metrics::peak(&p.das)?.1;
                let das_windowed_peak = metrics::peak(&p.das_windowed)?.1;
                let tidas_peak = metrics::peak(&p.tidas)?.1;
                let fwhm_das = metrics::fwhm(&p.das)?;
                let fwhm_das_windowed = metrics::fwhm(&p.das_windowed)?;
                let fwhm_tidas = metrics::fwhm(&p.tidas)?;
                let fwhm_diff = (fwhm_tidas - fwhm_das_windowed).abs();
                Ok(PeakFwhmRow {
                    center_frequency: frequency,
                    focus_depth: focus,
                    depth: z,
                    theta: p.theta,
                    das_peak,
                    das_windowed_peak,
                    tidas_peak,
                    das_peak_norm: das_peak / das_focal,
                    das_windowed_peak_norm: das_windowed_peak / windowed_focal,
                    tidas_peak_norm: tidas_peak / windowed_focal,
                    peak_abs_diff: (tidas_peak - das_windowed_peak).abs(),
                    fwhm_das,
                    fwhm_das_windowed,
                    fwhm_tidas,
                    fwhm_diff,
                    fwhm_diff_rel: fwhm_diff / focal_fwhm,
                    fwhm_axial_das_windowed: c * fwhm_das_windowed / 2.0,
                    fwhm_axial_tidas: c * fwhm_tidas / 2.0,
                    local_error: metrics::local_error(&p.das_windowed, &p.tidas, &p.window)?,
                    global_error: metrics::global_error(&p.das_windowed, &p.tidas)?,
                })
            };
            cell().unwrap_or_else(|e| {
                warn!("peak/FWHM cell f0={frequency} focus={focus} z={z} failed: {e}");
                PeakFwhmRow::missing(frequency, focus, z)
            })
        })
        .collect();
    let summary = FwhmSummary::from_rows(frequency, focus, focal_fwhm, &rows);
    Ok((rows, summary))
}

impl PeakFwhmRow {
    fn missing(center_frequency: f64, focus_depth: f64, depth: f64) -> Self {
        let n = f64::NAN;
        Self {
            center_frequency,
            focus_depth,
            depth,
            theta: n,
            das_peak: n,
            das_windowed_peak: n,
            tidas_peak: n,
            das_peak_norm: n,
            das_windowed_peak_norm: n,
            tidas_peak_norm: n,
            peak_abs_diff: n,
            fwhm_das: n,
            fwhm_das_windowed: n,
            fwhm_tidas: n,
            fwhm_diff: n,
            fwhm_diff_rel: n,
            fwhm_axial_das_windowed: n,
            fwhm_axial_tidas: n,
            local_error: n,
            global_error: n,
        }
    }
}

/// Peak heights and FWHM for every (frequency, focus, depth) cell.
pub fn peak_fwhm_sweep(cfg: &ExperimentConfig) -> Result<PeakFwhmOutput> {
    cfg.validate()?;
    let depths = cfg.depth_grid.depths();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &f in &cfg.center_frequencies {
        for &focus in &cfg.tx_focus_depths {
            info!("peak/FWHM sweep: f0 = {f} Hz, focus = {focus} m");
            let (r, s) = peak_fwhm_configuration(cfg, f, focus, &depths)?;
            rows.extend(r);
            summary.push(s);
        }
    }
    Ok(PeakFwhmOutput { rows, summary })
}

pub fn run_peak_fwhm_sweep(cfg: &ExperimentConfig) -> Result<PeakFwhmOutput> {
    let out = peak_fwhm_sweep(cfg)?;
    io::write_records(&cfg.output_dir.join("peak_fwhm.csv"), &out.rows)?;
    io::write_records(&cfg.output_dir.join("fwhm_summary.csv"), &out.summary)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// θ and error sweep

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSweepOutput {
    pub theta: ThetaMatrix,
    pub local_error: Vec<Vec<f64>>,
    pub global_error: Vec<Vec<f64>>,
    /// 1 where the local error is below the threshold, 0 otherwise, NaN if missing.
    pub mask: Vec<Vec<f64>>,
}

impl ErrorSweepOutput {
    /// Target indices of row `i` whose local error is below the threshold.
    pub fn below_threshold(&self, i: usize) -> Vec<usize> {
        self.mask[i]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Cells for the given reference and target depths at the configured carrier.
pub fn error_sweep_on(
    cfg: &ExperimentConfig,
    references: &[f64],
    targets: &[f64],
) -> Result<ErrorSweepOutput> {
    cfg.validate()?;
    let setup = cfg.setup(cfg.probe, cfg.error_sweep_tx_focus);
    let cells = sweep_cells(&setup, references, targets, true)?;
    let map = |f: &dyn Fn(&CellResult) -> f64| -> Vec<Vec<f64>> {
        cells.iter().map(|row| row.iter().map(f).collect()).collect()
    };
    let threshold = cfg.error_threshold;
    Ok(ErrorSweepOutput {
        theta: ThetaMatrix {
            reference_depths: references.to_vec(),
            target_depths: targets.to_vec(),
            values: map(&|c| c.theta),
        },
        local_error: map(&|c| c.local_error),
        global_error: map(&|c| c.global_error),
        mask: map(&|c| {
            if c.local_error.is_finite() {
                f64::from(u8::from(c.local_error < threshold))
            } else {
                f64::NAN
            }
        }),
    })
}

pub fn error_sweep(cfg: &ExperimentConfig) -> Result<ErrorSweepOutput> {
    let depths = cfg.depth_grid.depths();
    error_sweep_on(cfg, &depths, &depths)
}

pub fn run_error_sweep(cfg: &ExperimentConfig) -> Result<ErrorSweepOutput> {
    let out = error_sweep(cfg)?;
    let dir = &cfg.output_dir;
    let (r, t) = (&out.theta.reference_depths, &out.theta.target_depths);
    io::write_theta_matrix(&dir.join("theta_matrix.csv"), &out.theta)?;
    io::write_matrix(&dir.join("error_local.csv"), r, t, &out.local_error)?;
    io::write_matrix(&dir.join("error_global.csv"), r, t, &out.global_error)?;
    io::write_matrix(&dir.join("error_mask.csv"), r, t, &out.mask)?;
    Ok(out)
}

/// θ matrix only, written to `theta_matrix.csv`.
pub fn run_theta_sweep(cfg: &ExperimentConfig) -> Result<ThetaMatrix> {
    cfg.validate()?;
    let setup = cfg.setup(cfg.probe, cfg.error_sweep_tx_focus);
    let m = tidas::theta_matrix_sweep(&cfg.depth_grid.depths(), &setup)?;
    io::write_theta_matrix(&cfg.output_dir.join("theta_matrix.csv"), &m)?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Line reconstructions

#[derive(Debug, Clone, PartialEq)]
pub struct LineResult {
    pub scenario: String,
    pub reference_depth: f64,
    pub depths: Vec<f64>,
    pub scatterer_depths: Vec<f64>,
    pub das: Vec<f64>,
    pub das_windowed: Vec<f64>,
    pub tidas: Vec<f64>,
    pub thetas: Vec<f64>,
    pub guard: usize,
    pub fractional_delays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidelobeRow {
    pub scenario: String,
    pub reference_depth: f64,
    pub das_sl_db: f64,
    pub tidas_sl_db: f64,
    /// On dB levels.
    pub relative_sl_error: f64,
    pub relative_sl_error_linear: f64,
    pub das_windowed_sl_db: f64,
    pub relative_sl_error_windowed: f64,
    pub scatterers: usize,
    pub das_detected: usize,
    pub tidas_detected: usize,
    /// Fraction of scatterers where the tiDAS value reaches the DAS value.
    pub peaks_ge_das: f64,
    pub peaks_ge_das_windowed: f64,
}

impl LineResult {
    fn indices(&self) -> Vec<usize> {
        self.scatterer_depths
            .iter()
            .map(|&z| metrics::nearest_index(&self.depths, z))
            .collect()
    }

    /// Scatterers with a local maximum of `line` within the guard.
    pub fn detected(&self, line: &[f64]) -> usize {
        self.indices()
            .into_iter()
            .filter(|&i| {
                let lo = i.saturating_sub(self.guard);
                let hi = (i + self.guard).min(line.len() - 1);
                (lo..=hi).any(|k| {
                    let left = k == 0 || line[k] >= line[k - 1];
                    let right = k + 1 == line.len() || line[k] >= line[k + 1];
                    left && right && line[k] > 0.0
                })
            })
            .count()
    }

    fn fraction_ge(&self, reference: &[f64]) -> f64 {
        let idx = self.indices();
        let hits = idx
            .iter()
            .filter(|&&i| self.tidas[i] >= reference[i] * (1.0 - 1e-9))
            .count();
        hits as f64 / idx.len() as f64
    }

    /// Side-lobe row; level fields are NaN when the main lobes leave no
    /// side-lobe region, as on coarse grids with many scatterers.
    pub fn sidelobes(&self) -> SidelobeRow {
        let stats = |reference: &[f64]| {
            metrics::sidelobe_stats(
                &self.tidas,
                &self.depths,
                &self.scatterer_depths,
                self.guard,
                Some(reference),
            )
            .map_err(|e| warn!("side lobes of {} at {} m: {e}", self.scenario, self.reference_depth))
            .ok()
        };
        let (s, w) = (stats(&self.das), stats(&self.das_windowed));
        let get = |st: &Option<metrics::SidelobeStats>, f: fn(&metrics::SidelobeStats) -> Option<f64>| {
            st.as_ref().and_then(f).unwrap_or(f64::NAN)
        };
        SidelobeRow {
            scenario: self.scenario.clone(),
            reference_depth: self.reference_depth,
            das_sl_db: get(&s, |x| x.reference_sl_db),
            tidas_sl_db: get(&s, |x| Some(x.mean_sl_db)),
            relative_sl_error: get(&s, |x| x.relative_sl_error),
            relative_sl_error_linear: get(&s, |x| x.relative_sl_error_linear),
            das_windowed_sl_db: get(&w, |x| x.reference_sl_db),
            relative_sl_error_windowed: get(&w, |x| x.relative_sl_error),
            scatterers: self.scatterer_depths.len(),
            das_detected: self.detected(&self.das),
            tidas_detected: self.detected(&self.tidas),
            peaks_ge_das: self.fraction_ge(&self.das),
            peaks_ge_das_windowed: self.fraction_ge(&self.das_windowed),
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}_{:.1}mm.csv", self.scenario, self.reference_depth * 1e3)
    }
}

/// Precomputed inputs shared by the line reconstructions of one reference depth.
pub struct LinePlan {
    pub setup: SweepSetup,
    pub depths: Vec<f64>,
    pub thetas: Vec<f64>,
    pub fixed: crate::probe::DelayProfile,
    pub half_width: f64,
    pub guard: usize,
}

impl LinePlan {
    pub fn new(cfg: &ExperimentConfig, reference: f64) -> Result<Self> {
        let setup = cfg.setup(cfg.probe, reference);
        let depths = cfg.depth_grid.depths();
        let window = setup.focal_window()?;
        let theta_row = sweep_cells(&setup, &[reference], &depths, false)?;
        let matrix = ThetaMatrix {
            reference_depths: vec![reference],
            target_depths: depths.clone(),
            values: vec![theta_row[0].iter().map(|c| c.theta).collect()],
        };
        let thetas = matrix.interpolate_row(0, &depths);
        let deepest = rx_aperture(cfg.depth_grid.max, cfg.rules.rx, &cfg.probe)?;
        let fixed = rx_delay_profile(reference, deepest, &cfg.probe)?;
        let axial_fwhm = cfg.probe.sound_speed * 2.0 * window.half_width / 2.0;
        let guard = cfg
            .guard_pixels
            .unwrap_or_else(|| (axial_fwhm / cfg.depth_grid.spacing()).round().max(1.0) as usize);
        Ok(Self {
            setup,
            depths,
            thetas,
            fixed,
            half_width: window.half_width,
            guard,
        })
    }

    pub fn line_setup(&self, windowing: LineWindowing) -> LineSetup<'_> {
        LineSetup {
            config: &self.setup.config,
            rules: &self.setup.rules,
            half_width: self.half_width,
            windowing,
        }
    }
}

pub fn reconstruct_line(
    cfg: &ExperimentConfig,
    plan: &LinePlan,
    scenario: &ScenarioSpec,
) -> Result<LineResult> {
    let set = scenario.scatterers(&plan.depths)?;
    let s = &plan.setup;
    let frame = synthesize_frame(&set, s.tx_focus_depth, &s.config, &s.rules, &s.simulation)?;
    let das = das::das_line(&frame, &plan.depths, &s.config, &s.rules, cfg.delay_method)?;
    let das_windowed = das::das_line_windowed(
        &frame,
        &plan.depths,
        &s.config,
        &s.rules,
        cfg.delay_method,
        plan.half_width,
    )?;
    let out = tidas::tidas_line(
        &frame,
        &plan.fixed,
        &plan.thetas,
        &plan.depths,
        &plan.line_setup(cfg.line_windowing),
    )?;
    Ok(LineResult {
        scenario: scenario.name.clone(),
        reference_depth: s.tx_focus_depth,
        depths: plan.depths.clone(),
        scatterer_depths: set.scatterers.iter().map(|s| s.z).collect(),
        das,
        das_windowed,
        tidas: out.values,
        thetas: plan.thetas.clone(),
        guard: plan.guard,
        fractional_delays: out.fractional_delays,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineExperimentOutput {
    pub lines: Vec<LineResult>,
    pub sidelobes: Vec<SidelobeRow>,
}

pub fn line_experiments(cfg: &ExperimentConfig) -> Result<LineExperimentOutput> {
    cfg.validate()?;
    let mut lines = Vec::new();
    let mut sidelobes = Vec::new();
    for scenario in &cfg.scatterer_scenarios {
        for &reference in &cfg.reference_depths {
            info!("line: {} at reference {reference} m", scenario.name);
            let plan = LinePlan::new(cfg, reference)?;
            let line = reconstruct_line(cfg, &plan, scenario)?;
            sidelobes.push(line.sidelobes());
            lines.push(line);
        }
    }
    Ok(LineExperimentOutput { lines, sidelobes })
}

pub fn run_line_experiments(cfg: &ExperimentConfig) -> Result<LineExperimentOutput> {
    let out = line_experiments(cfg)?;
    let dir = cfg.output_dir.join("lines");
    for line in &out.lines {
        let rows: Vec<Vec<f64>> = (0..line.depths.len())
            .map(|i| {
                vec![
                    line.depths[i],
                    line.das[i],
                    line.das_windowed[i],
                    line.tidas[i],
                    line.thetas[i],
                ]
            })
            .collect();
        io::write_table(
            &dir.join(line.file_name()),
            &["depth", "das", "das_windowed", "tidas", "theta"],
            &rows,
        )?;
    }
    io::write_records(&cfg.output_dir.join("sidelobes.csv"), &out.sidelobes)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Timing benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub experiment: String,
    pub scale: String,
    pub trials: usize,
    pub das_median_s: f64,
    pub tidas_median_s: f64,
    /// DAS time over tiDAS time.
    pub ratio: f64,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn time_median<T>(bench: &BenchConfig, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..bench.warmup {
        std::hint::black_box(f()?);
    }
    let mut samples = Vec::with_capacity(bench.trials);
    for _ in 0..bench.trials {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut samples))
}

fn bench_row(
    experiment: &str,
    scale: String,
    bench: &BenchConfig,
    das_run: impl FnMut() -> Result<f64>,
    tidas_run: impl FnMut() -> Result<f64>,
) -> Result<BenchRow> {
    let das_median_s = time_median(bench, das_run)?;
    let tidas_median_s = time_median(bench, tidas_run)?;
    info!("bench {experiment}: DAS {das_median_s:.6} s, tiDAS {tidas_median_s:.6} s");
    Ok(BenchRow {
        experiment: experiment.into(),
        scale,
        trials: bench.trials,
        das_median_s,
        tidas_median_s,
        ratio: das_median_s / tidas_median_s,
    })
}

fn checksum(t: &das::Trace) -> f64 {
    t.samples.iter().sum()
}

/// DAS beamforms the raw frames; tiDAS sums the windowed signals with the
/// fixed profile. θ is calibration and estimated before timing, as for lines.
fn bench_four_points(cfg: &ExperimentConfig) -> Result<BenchRow> {
    let bench = &cfg.bench;
    let setup = cfg.setup(cfg.probe, bench.line_reference_depth);
    let pulse = setup.pulse();
    let window = setup.focal_window()?;
    let mut cases = Vec::new();
    for &z in &bench.four_point_depths {
        let s = setup.single(z, &pulse, &window)?;
        let truth = rx_delay_profile(z, s.aperture, &setup.config)?;
        let fixed = rx_delay_profile(setup.tx_focus_depth, s.aperture, &setup.config)?;
        let theta = tidas::estimate_theta(&s.windowed, &fixed, &truth, setup.form)?;
        let support = s
            .window
            .sample_range(s.frame.t0, s.frame.sampling_frequency, s.frame.samples_per_trace);
        cases.push((z, s, fixed, theta, support));
    }
    bench_row(
        "four_points_one_configuration",
        format!("{} points", cases.len()),
        bench,
        || {
            let mut acc = 0.0;
            for (z, s, ..) in &cases {
                let psf = das::das_psf(&s.frame, (0.0, *z), &setup.config, &setup.rules, DelayMethod::Linear)?;
                acc += checksum(&psf);
            }
            Ok(acc)
        },
        || {
            let mut acc = 0.0;
            for (_, s, fixed, theta, support) in &cases {
                acc += checksum(&tidas::tidas_psf_with_support(&s.windowed, fixed, *theta, support.clone())?);
            }
            Ok(acc)
        },
    )
}

/// One PSF per (reference, target) cell. DAS beamforms the raw frame of
/// every cell; tiDAS does one windowed fixed-profile sum per cell with θ
/// from a sweep run before timing.
fn bench_sweep(cfg: &ExperimentConfig) -> Result<BenchRow> {
    let bench = &cfg.bench;
    let count = if bench.full_scale {
        cfg.depth_grid.count
    } else {
        bench.reduced_count.min(cfg.depth_grid.count)
    };
    let grid = DepthGrid {
        count,
        ..cfg.depth_grid
    };
    let depths = grid.depths();
    let setup = cfg.setup(cfg.probe, cfg.error_sweep_tx_focus);
    let pulse = setup.pulse();
    let window = setup.focal_window()?;
    let mut columns = Vec::with_capacity(depths.len());
    for &z in &depths {
        let s = setup.single(z, &pulse, &window)?;
        let support = s
            .window
            .sample_range(s.frame.t0, s.frame.sampling_frequency, s.frame.samples_per_trace);
        columns.push((z, s, support));
    }
    let full = rx_aperture(grid.max, cfg.rules.rx, &cfg.probe)?;
    let fixed: Vec<_> = depths
        .iter()
        .map(|&r| rx_delay_profile(r, full, &cfg.probe))
        .collect::<Result<_>>()?;
    let thetas = sweep_cells(&setup, &depths, &depths, false)?;
    bench_row(
        "sweep_points_configurations",
        format!("{count}x{count}"),
        bench,
        || {
            let mut acc = 0.0;
            for _ in &depths {
                for (z, s, _) in &columns {
                    let psf = das::das_psf(&s.frame, (0.0, *z), &setup.config, &setup.rules, DelayMethod::Linear)?;
                    acc += checksum(&psf);
                }
            }
            Ok(acc)
        },
        || {
            let mut acc = 0.0;
            for (i, profile) in fixed.iter().enumerate() {
                for (j, (_, s, support)) in columns.iter().enumerate() {
                    let theta = thetas[i][j].theta;
                    if theta.is_finite() {
                        let p = profile.restricted(s.aperture)?;
                        acc += checksum(&tidas::tidas_psf_with_support(&s.windowed, &p, theta, support.clone())?);
                    }
                }
            }
            Ok(acc)
        },
    )
}

fn bench_line(cfg: &ExperimentConfig, plan: &LinePlan, scenario: &ScenarioSpec) -> Result<BenchRow> {
    let set = scenario.scatterers(&plan.depths)?;
    let s = &plan.setup;
    let frame = synthesize_frame(&set, s.tx_focus_depth, &s.config, &s.rules, &s.simulation)?;
    let line_setup = plan.line_setup(cfg.line_windowing);
    bench_row(
        &format!("line_{}", scenario.name),
        format!("{} pixels", plan.depths.len()),
        &cfg.bench,
        || {
            let v = das::das_line(&frame, &plan.depths, &s.config, &s.rules, DelayMethod::Linear)?;
            Ok(v.iter().sum())
        },
        || {
            let v = tidas::tidas_line(&frame, &plan.fixed, &plan.thetas, &plan.depths, &line_setup)?;
            Ok(v.values.iter().sum())
        },
    )
}

/// Timing of the line rows only.
pub fn bench_lines(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let plan = LinePlan::new(cfg, cfg.bench.line_reference_depth)?;
    cfg.scatterer_scenarios
        .iter()
        .map(|sc| bench_line(cfg, &plan, sc))
        .collect()
}

pub fn bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let resolution = timer_resolution();
    if resolution >= Duration::from_micros(1) {
        return Err(crate::error::computation(format!(
            "timer resolution {resolution:?} is not below 1 µs"
        )));
    }
    let mut rows = vec![bench_four_points(cfg)?, bench_sweep(cfg)?];
    rows.extend(bench_lines(cfg)?);
    Ok(rows)
}

pub fn run_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let rows = bench(cfg)?;
    io::write_records(&cfg.output_dir.join("bench.csv"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Single PSF, simulation and the full run

#[derive(Debug, Clone, PartialEq)]
pub struct PsfOutput {
    pub das: das::Trace,
    pub das_windowed: das::Trace,
    pub tidas: das::Trace,
    pub theta: f64,
    pub report: metrics::MetricsReport,
}

/// DAS and tiDAS PSFs of one scatterer at `cfg.depth` with the reference profile at
/// `cfg.reference_depth`, which is also the transmit focus.
pub fn psf(cfg: &ExperimentConfig) -> Result<PsfOutput> {
    cfg.validate()?;
    let setup = cfg.setup(cfg.probe, cfg.reference_depth);
    let pulse = setup.pulse();
    let window = setup.focal_window()?;
    let p = psf_set(&setup, cfg.depth, cfg.reference_depth, &pulse, &window, cfg.delay_method)?;
    let report = metrics::MetricsReport::for_psf(
        &p.das_windowed,
        &p.tidas,
        &p.window,
        cfg.probe.sound_speed,
    )?;
    Ok(PsfOutput {
        das: p.das,
        das_windowed: p.das_windowed,
        tidas: p.tidas,
        theta: p.theta,
        report,
    })
}

pub fn run_psf(cfg: &ExperimentConfig) -> Result<PsfOutput> {
    let out = psf(cfg)?;
    let rows: Vec<Vec<f64>> = (0..out.das.samples.len())
        .map(|i| {
            vec![
                out.das.time(i),
                out.das.samples[i],
                out.das_windowed.samples[i],
                out.tidas.samples[i],
            ]
        })
        .collect();
    io::write_table(
        &cfg.output_dir.join("psf.csv"),
        &["time", "das", "das_windowed", "tidas"],
        &rows,
    )?;
    io::write_records(&cfg.output_dir.join("psf_metrics.csv"), &[out.report])?;
    Ok(out)
}

/// Frame of one scatterer at `cfg.depth`, written as `frame.json` / `frame.f32`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let frame = synthesize_frame(
        &ScattererSet::single(cfg.depth),
        cfg.reference_depth,
        &cfg.probe,
        &cfg.rules,
        &cfg.simulation,
    )?;
    let base = cfg.output_dir.join("frame");
    std::fs::create_dir_all(&cfg.output_dir)?;
    io::save_frame(&frame, &base)?;
    Ok(base)
}

/// Resolved configuration and provenance of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub package_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

pub fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        package_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.simulation.seed,
        config: cfg.clone(),
    };
    io::write_json(&cfg.output_dir.join("run_manifest.json"), &manifest)
}

/// Every experiment family in order: peak/FWHM, θ and errors, lines, timing.
pub fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    run_peak_fwhm_sweep(cfg)?;
    run_error_sweep(cfg)?;
    run_line_experiments(cfg)?;
    run_bench(cfg)?;
    Ok(())
}

pub fn output_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.output_dir).join(name)
}
