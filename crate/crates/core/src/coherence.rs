//! Random-walk coherence budget and decay fitting of simulated traces.
//!
//! Every dephasing channel adds a random phase δφ per step (an electron dwell
//! time or a noise correlation time). After N steps the phase variance is
//! Nδφ², which reaches 2 at T₂ = 2·step/δφ², and independent channels add
//! their rates.

use std::f64::consts::{PI, SQRT_2};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dynamics::EnsembleResult;
use crate::effective::{concatenated_effective, nv_quadratic_coupling, second_order_effective, third_order_effective};
use crate::error::{Error, Result};
use crate::model::{DriveSpec, SystemSpec};
use crate::noise::NoiseSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelStatus {
    Valid,
    /// δφ ≥ 1 on a channel the drive should suppress; excluded from the total.
    ProtectionBroken,
    /// Unprotected hyperfine phase: each flip fully randomizes the phase, so
    /// δφ is capped at 1 and the channel gives 2·T₁.
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetChannel {
    pub name: String,
    pub step_time: f64,
    pub delta_phi: f64,
    pub t2: f64,
    pub status: ChannelStatus,
    /// Whether δφ was doubled for a three-level electron.
    pub doubled: bool,
}

impl BudgetChannel {
    pub fn new(name: &str, step_time: f64, delta_phi: f64) -> Self {
        let delta_phi = delta_phi.abs();
        let status = if delta_phi >= 1.0 { ChannelStatus::ProtectionBroken } else { ChannelStatus::Valid };
        BudgetChannel { name: name.into(), step_time, delta_phi, t2: random_walk_t2(step_time, delta_phi), status, doubled: false }
    }

    fn doubled(mut self) -> Self {
        self = BudgetChannel::new(&self.name, self.step_time, 2.0 * self.delta_phi);
        self.doubled = true;
        self
    }

    pub fn counts(&self) -> bool {
        self.status != ChannelStatus::ProtectionBroken
    }
}

/// 2·step/δφ²; infinite for a vanishing phase step.
pub fn random_walk_t2(step_time: f64, delta_phi: f64) -> f64 {
    if delta_phi == 0.0 {
        f64::INFINITY
    } else {
        2.0 * step_time / (delta_phi * delta_phi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceBudget {
    pub channels: Vec<BudgetChannel>,
    pub total_t2: f64,
    pub nv_doubling_applied: bool,
}

impl CoherenceBudget {
    pub fn from_channels(channels: Vec<BudgetChannel>, nv_doubling_applied: bool) -> Result<Self> {
        let mut b = CoherenceBudget { channels, total_t2: 0.0, nv_doubling_applied };
        b.total_t2 = combine_t2(&b)?;
        Ok(b)
    }

    pub fn channel(&self, name: &str) -> Option<&BudgetChannel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn broken(&self) -> impl Iterator<Item = &BudgetChannel> {
        self.channels.iter().filter(|c| !c.counts())
    }
}

/// Harmonic combination over the channels that count.
pub fn combine_t2(budget: &CoherenceBudget) -> Result<f64> {
    let valid: Vec<_> = budget.channels.iter().filter(|c| c.counts()).collect();
    if valid.is_empty() {
        return Err(Error::Validation("coherence budget has no valid channel".into()));
    }
    let rate: f64 = valid.iter().map(|c| 1.0 / c.t2).sum();
    Ok(1.0 / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BudgetOptions {
    /// Add the electron AC Stark shift to the second-drive detuning δ₂.
    pub include_ac_stark: bool,
}

/// All dephasing channels for the given parameters. A zero first drive gives
/// the single unprotected channel.
pub fn phase_variance_channels(
    sys: &SystemSpec,
    drive: &DriveSpec,
    noise: &NoiseSpec,
    options: BudgetOptions,
) -> Result<CoherenceBudget> {
    sys.validate()?;
    drive.validate(sys)?;
    let t1 = sys.t1;
    if !drive.is_protected() {
        let g_hf = sys.g_par.hypot(sys.g_perp);
        let raw = g_hf * t1;
        let mut c = BudgetChannel::new("unprotected", t1, raw.min(1.0));
        if raw >= 1.0 {
            c.status = ChannelStatus::Saturated;
        }
        return CoherenceBudget::from_channels(vec![c], false);
    }

    let w = drive.omega1;
    let second = second_order_effective(sys, drive)?;
    let g_eff = second.g_eff;
    let mut deterministic = vec![
        BudgetChannel::new("parallel", t1, sys.g_par / w),
        BudgetChannel::new("perpendicular", t1, sys.g_perp / w),
    ];
    let mut noisy = Vec::new();

    let magnetic = noise.magnetic.map(|s| (s.amplitude.resolve(0.0), s.tau));
    let rabi1 = noise.rabi1.map(|s| (s.amplitude.resolve(w), s.tau));

    if drive.has_second_drive() {
        let w2 = drive.omega2;
        deterministic.push(BudgetChannel::new("omega2", t1, g_eff / w2));
        let mut detuned = *drive;
        if options.include_ac_stark {
            detuned.delta2 += second.ac_electron;
        }
        if detuned.delta2 != 0.0 {
            let g2 = concatenated_effective(sys, &detuned)?.g_eff2;
            deterministic.push(BudgetChannel::new("eff2", t1, g2 * t1));
        }
        deterministic.push(BudgetChannel::new("eff3", t1, third_order_effective(sys, drive)? * t1));
        if let Some((db, tau)) = magnetic {
            noisy.push(BudgetChannel::new("magnetic", tau, sys.g_par * db / (w * w2)));
        }
        if let Some((dw, tau)) = rabi1 {
            noisy.push(BudgetChannel::new("rabi1", tau, g_eff * dw * tau / w2));
        }
    } else {
        deterministic.push(BudgetChannel::new("g_eff", t1, g_eff * t1));
        if let Some((db, tau)) = magnetic {
            noisy.push(BudgetChannel::new("magnetic", tau, sys.g_par * db * tau / w));
        }
    }

    if sys.electron_levels == 3 {
        let q = nv_quadratic_coupling(sys, drive)?;
        if q != 0.0 {
            deterministic.push(BudgetChannel::new("nv_quadratic", t1, q * t1));
        }
        if let Some(src) = noise.rabi_mismatch {
            let d_dw = src.amplitude.resolve(drive.delta_omega);
            if d_dw != 0.0 {
                let slope = 3.0 * sys.g_par / (2.0 * SQRT_2 * w);
                noisy.push(BudgetChannel::new("rabi_mismatch", src.tau, slope * d_dw * src.tau));
            }
        }
    }

    let doubling = sys.electron_levels == 3 && !noisy.is_empty();
    if sys.electron_levels == 3 {
        noisy = noisy.into_iter().map(BudgetChannel::doubled).collect();
    }
    deterministic.extend(noisy);
    CoherenceBudget::from_channels(deterministic, doubling)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecayModel {
    /// offset + amplitude·exp(−t/T₂) fitted to the |+⟩ population.
    PlusPopulation,
    /// The same model fitted to the largest |2⟨I_x⟩| in consecutive windows,
    /// for traces that oscillate inside a decaying envelope.
    CoherenceEnvelope { window: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub t2_fit: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub residual_rms: f64,
    /// Whether the fitted points span at least one decay constant.
    pub covers_decay: bool,
    pub points: usize,
}

const MIN_POINTS: usize = 10;
const SCAN_POINTS: usize = 241;
const GOLDEN_ITERATIONS: usize = 200;

struct Linear {
    offset: f64,
    amplitude: f64,
    ssr: f64,
}

/// Weighted least squares of y on (1, exp(−t/T₂)) at fixed T₂.
fn linear_part(t: &[f64], y: &[f64], w: &[f64], t2: f64) -> Linear {
    let (mut s00, mut s01, mut s11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((ti, yi), wi) in t.iter().zip(y).zip(w) {
        let e = (-ti / t2).exp();
        s00 += wi;
        s01 += wi * e;
        s11 += wi * e * e;
        b0 += wi * yi;
        b1 += wi * e * yi;
    }
    let det = s00 * s11 - s01 * s01;
    let (offset, amplitude) = if det.abs() <= 1e-12 * s00 * s11 {
        (b0 / s00, 0.0)
    } else {
        ((s11 * b0 - s01 * b1) / det, (s00 * b1 - s01 * b0) / det)
    };
    let ssr = t
        .iter()
        .zip(y)
        .zip(w)
        .map(|((ti, yi), wi)| wi * (yi - offset - amplitude * (-ti / t2).exp()).powi(2))
        .sum();
    Linear { offset, amplitude, ssr }
}

/// Least-squares fit of offset + amplitude·exp(−t/T₂). The linear
/// parameters are eliminated exactly and the remaining one-dimensional
/// problem in log T₂ is solved by a scan followed by golden-section search.
pub fn fit_exponential(times: &[f64], values: &[f64], sigmas: Option<&[f64]>) -> Result<DecayFit> {
    let n = times.len();
    if n < MIN_POINTS || values.len() != n {
        return Err(Error::Validation(format!("decay fit needs at least {MIN_POINTS} points with values, got {n}")));
    }
    if times.iter().chain(values).any(|x| !x.is_finite()) {
        return Err(Error::Validation("decay fit input contains non-finite values".into()));
    }
    let weights = fit_weights(sigmas, n)?;
    let span = times[n - 1] - times[0];
    let step = times.windows(2).map(|p| p[1] - p[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    if !(span > 0.0) || !step.is_finite() {
        return Err(Error::Validation("decay fit needs increasing sample times".into()));
    }

    let (lo, hi) = ((step / 10.0).ln(), (span * 1e3).ln());
    let cost = |x: f64| linear_part(times, values, &weights, x.exp()).ssr;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|k| lo + (hi - lo) * k as f64 / (SCAN_POINTS - 1) as f64).collect();
    let costs: Vec<f64> = grid.iter().map(|x| cost(*x)).collect();
    let best = (0..SCAN_POINTS).min_by(|a, b| costs[*a].total_cmp(&costs[*b])).expect("non-empty scan");
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let diagnostics = |t2: f64, amp: f64| format!("T2 = {t2:.4e} s, amplitude = {amp:.3e}, span = {span:.4e} s");
    if best == SCAN_POINTS - 1 {
        let l = linear_part(times, values, &weights, grid[best].exp());
        return Err(Error::Numerical(format!("decay fit found no decay within 1000 spans: {}", diagnostics(grid[best].exp(), l.amplitude))));
    }

    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[best + 1]);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = cost(d);
        }
    }
    let t2 = ((a + b) / 2.0).exp();
    let l = linear_part(times, values, &weights, t2);
    if l.amplitude.abs() <= 1e-9 * scale {
        return Err(Error::Numerical(format!("decay fit found no decay: {}", diagnostics(t2, l.amplitude))));
    }
    let residual_rms = (times
        .iter()
        .zip(values)
        .map(|(t, y)| (y - l.offset - l.amplitude * (-t / t2).exp()).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Ok(DecayFit { t2_fit: t2, amplitude: l.amplitude, offset: l.offset, residual_rms, covers_decay: span >= t2, points: n })
}

/// Inverse-variance weights. Standard errors below a tenth of the median
/// positive one (the t = 0 point has none) are raised to that floor.
fn fit_weights(sigmas: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    let Some(s) = sigmas else {
        return Ok(vec![1.0; n]);
    };
    if s.len() != n {
        return Err(Error::Validation("standard errors and values differ in length".into()));
    }
    let mut positive: Vec<f64> = s.iter().copied().filter(|x| *x > 0.0 && x.is_finite()).collect();
    if positive.is_empty() {
        return Ok(vec![1.0; n]);
    }
    positive.sort_by(f64::total_cmp);
    let floor = positive[positive.len() / 2] / 10.0;
    Ok(s.iter().map(|x| 1.0 / x.max(floor).powi(2)).collect())
}

/// Largest |value| in consecutive windows of the given length, with the
/// sample time and standard error at the maximum. A trailing partial window
/// is dropped.
pub fn windowed_envelope(times: &[f64], values: &[f64], se: &[f64], window: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !(window > 0.0) {
        return Err(Error::Validation(format!("envelope window must be positive, got {window}")));
    }
    let (mut t, mut v, mut s) = (Vec::new(), Vec::new(), Vec::new());
    let start = times.first().copied().unwrap_or(0.0);
    let mut i = 0;
    while i < times.len() {
        let k = ((times[i] - start) / window).floor();
        let mut j = i;
        let mut best = i;
        while j < times.len() && ((times[j] - start) / window).floor() == k {
            if values[j].abs() > values[best].abs() {
                best = j;
            }
            j += 1;
        }
        let complete = start + (k + 1.0) * window <= times[times.len() - 1] * (1.0 + 1e-12);
        if !complete {
            break;
        }
        if j - i < 2 {
            return Err(Error::Validation("envelope window holds fewer than two samples".into()));
        }
        t.push(times[best]);
        v.push(values[best].abs());
        s.push(se[best]);
        i = j;
    }
    Ok((t, v, s))
}

pub fn fit_decay(ensemble: &EnsembleResult, model: DecayModel) -> Result<DecayFit> {
    match model {
        DecayModel::PlusPopulation => {
            fit_exponential(&ensemble.times, &ensemble.mean_pop_plus, Some(&ensemble.se_pop_plus))
        }
        DecayModel::CoherenceEnvelope { window } => {
            let (t, v, s) =
                windowed_envelope(&ensemble.times, &ensemble.mean_coherence_x, &ensemble.se_coherence_x, window)?;
            fit_exponential(&t, &v, Some(&s))
        }
    }
}

/// Angular frequency of the largest Fourier component of a uniformly sampled
/// signal inside [band.0, band.1] (rad/s). The mean is removed and the peak
/// position refined by a parabola through the three largest bins.
pub fn dominant_frequency(times: &[f64], values: &[f64], band: (f64, f64)) -> Result<f64> {
    let n = values.len();
    if n < 4 || times.len() != n {
        return Err(Error::Validation("spectrum needs at least four uniformly spaced samples".into()));
    }
    let dt = times[1] - times[0];
    let uniform = times.windows(2).all(|p| ((p[1] - p[0]) - dt).abs() <= 1e-6 * dt);
    if !(dt > 0.0) || !uniform {
        return Err(Error::Validation("spectrum needs uniformly spaced samples".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let len = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);

    let bin = 2.0 * PI / (len as f64 * dt);
    let lo = ((band.0 / bin).ceil() as usize).max(1);
    let hi = ((band.1 / bin).floor() as usize).min(len / 2 - 1);
    if lo > hi {
        return Err(Error::Validation("frequency band holds no Fourier bin".into()));
    }
    let mag = |k: usize| buf[k].norm();
    let k = (lo..=hi).max_by(|a, b| mag(*a).total_cmp(&mag(*b))).expect("non-empty band");
    let (a, b, c) = (mag(k - 1), mag(k), mag(k + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Ok((k as f64 + shift.clamp(-0.5, 0.5)) * bin)
}
