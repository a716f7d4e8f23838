//! Quantum-jump trajectories with classical noise, the deterministic master
//! equation, nuclear observables and ensemble statistics.
//!
//! Between jumps each step applies exp(−iH(t_mid)dt) for the drive and
//! hyperfine part. Noise acts on the electron alone and is split in
//! symmetrically: half drive step, noise step, half drive step. Because every
//! jump channel has the same rate, Σ c†c is proportional to the identity, the
//! no-jump evolution is unitary, and jump times form a Poisson process that
//! does not depend on the state.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_hamiltonian, jump_channels, jump_rate, DriveSpec, Hamiltonian, SystemSpec};
use crate::noise::{stream_rng, wire_noise, NoiseShape, NoiseSpec, NoiseWiring, OuProcess, STREAM_JUMPS};
use crate::operators::{hermitian_eigen, propagator, re, Operator, StateVector};

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuclearFrame {
    /// Observables of the nuclear state as evolved.
    Lab,
    /// Observables after undoing the bare nuclear precession exp(−iω_n I_z t).
    #[default]
    Rotating,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Electron maximally mixed, nucleus in |+⟩ (the +½ eigenstate of I_x).
    MixedElectron,
    /// Electron in a basis level, nucleus in |+⟩.
    ElectronLevel(usize),
    Pure(StateVector),
    Density(Operator),
}

fn nuclear_plus() -> [C; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [re(s), re(s)]
}

fn product_state(levels: usize, level: usize) -> StateVector {
    let mut v = StateVector::zeros(2 * levels);
    let n = nuclear_plus();
    v[2 * level] = n[0];
    v[2 * level + 1] = n[1];
    v
}

impl InitialState {
    /// Pure components with their probabilities.
    pub fn components(&self, levels: usize) -> Result<Vec<(f64, StateVector)>> {
        let d = 2 * levels;
        match self {
            InitialState::MixedElectron => {
                Ok((0..levels).map(|a| (1.0 / levels as f64, product_state(levels, a))).collect())
            }
            InitialState::ElectronLevel(a) => {
                if *a >= levels {
                    return Err(Error::Validation(format!("electron level {a} out of range")));
                }
                Ok(vec![(1.0, product_state(levels, *a))])
            }
            InitialState::Pure(v) => {
                if v.len() != d {
                    return Err(Error::Validation(format!("initial state has length {}, expected {d}", v.len())));
                }
                let norm = v.norm();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Validation(format!("initial state is not normalized (norm {norm})")));
                }
                Ok(vec![(1.0, v.clone())])
            }
            InitialState::Density(rho) => {
                check_density(rho, d)?;
                let (vals, vecs) = hermitian_eigen(rho)?;
                Ok(vals
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 1e-14)
                    .map(|(j, p)| (*p, vecs.column(j).into_owned()))
                    .collect())
            }
        }
    }

    pub fn density(&self, levels: usize) -> Result<Operator> {
        let d = 2 * levels;
        Ok(self
            .components(levels)?
            .iter()
            .fold(Operator::zeros(d, d), |acc, (p, v)| acc + v * v.adjoint() * re(*p)))
    }
}

fn check_density(rho: &Operator, d: usize) -> Result<()> {
    if rho.nrows() != d || rho.ncols() != d {
        return Err(Error::Validation(format!("density matrix must be {d}x{d}")));
    }
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
        return Err(Error::Validation(format!("density matrix trace is {tr}, expected 1")));
    }
    let (vals, _) = hermitian_eigen(rho)?;
    if vals.iter().any(|v| *v < -1e-10) {
        return Err(Error::Validation("density matrix is not positive semidefinite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuclearObservables {
    pub pop_plus: f64,
    pub pop_minus: f64,
    pub coherence_x: f64,
}

fn observables_from_reduced(r00: f64, r11: f64, r01: C, phase: f64) -> NuclearObservables {
    let tr = r00 + r11;
    let r01 = r01 * C::from_polar(1.0, phase) / tr;
    NuclearObservables {
        pop_plus: 0.5 + r01.re,
        pop_minus: 0.5 - r01.re,
        coherence_x: 2.0 * r01.re,
    }
}

/// Traces out the electron and returns populations of the I_x eigenstates
/// |±⟩ and 2⟨I_x⟩.
pub fn nuclear_observables(rho: &Operator) -> NuclearObservables {
    let d = rho.nrows();
    let (mut r00, mut r11, mut r01) = (0.0, 0.0, ZERO);
    for a in 0..d / 2 {
        r00 += rho[(2 * a, 2 * a)].re;
        r11 += rho[(2 * a + 1, 2 * a + 1)].re;
        r01 += rho[(2 * a, 2 * a + 1)];
    }
    observables_from_reduced(r00, r11, r01, 0.0)
}

pub fn nuclear_observables_pure(v: &[C]) -> NuclearObservables {
    pure_observables(v, 0.0)
}

fn pure_observables(v: &[C], phase: f64) -> NuclearObservables {
    let (mut r00, mut r11, mut r01) = (0.0, 0.0, ZERO);
    for a in 0..v.len() / 2 {
        let (u, w) = (v[2 * a], v[2 * a + 1]);
        r00 += u.norm_sqr();
        r11 += w.norm_sqr();
        r01 += u * w.conj();
    }
    observables_from_reduced(r00, r11, r01, phase)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub times: Vec<f64>,
    pub pop_plus: Vec<f64>,
    pub pop_minus: Vec<f64>,
    pub coherence_x: Vec<f64>,
    pub jump_log: Vec<JumpEvent>,
    /// Largest |‖ψ‖ − 1| seen at a sample point before renormalization.
    pub max_norm_error: f64,
}

impl TrajectoryResult {
    fn with_capacity(n: usize) -> Self {
        TrajectoryResult {
            times: Vec::with_capacity(n),
            pop_plus: Vec::with_capacity(n),
            pop_minus: Vec::with_capacity(n),
            coherence_x: Vec::with_capacity(n),
            jump_log: Vec::new(),
            max_norm_error: 0.0,
        }
    }

    fn record(&mut self, t: f64, o: NuclearObservables) {
        self.times.push(t);
        self.pop_plus.push(o.pop_plus);
        self.pop_minus.push(o.pop_minus);
        self.coherence_x.push(o.coherence_x);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub mean_pop_plus: Vec<f64>,
    pub se_pop_plus: Vec<f64>,
    pub mean_coherence_x: Vec<f64>,
    pub se_coherence_x: Vec<f64>,
    pub n_trajectories: usize,
}

fn mean_and_se(columns: &[&[f64]], i: usize) -> (f64, f64) {
    let n = columns.len() as f64;
    let mean = columns.iter().map(|c| c[i]).sum::<f64>() / n;
    if columns.len() < 2 {
        return (mean, 0.0);
    }
    let var = columns.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pointwise mean and standard error (sample standard deviation over √n).
pub fn ensemble_average(results: &[TrajectoryResult]) -> Result<EnsembleResult> {
    let first = results.first().ok_or_else(|| Error::Validation("no trajectories to average".into()))?;
    for r in results {
        if r.times.len() != first.times.len()
            || r.times.iter().zip(&first.times).any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1e-300))
        {
            return Err(Error::Validation("trajectories do not share a time grid".into()));
        }
    }
    let pops: Vec<&[f64]> = results.iter().map(|r| r.pop_plus.as_slice()).collect();
    let cohs: Vec<&[f64]> = results.iter().map(|r| r.coherence_x.as_slice()).collect();
    let n = first.times.len();
    let mut out = EnsembleResult {
        times: first.times.clone(),
        mean_pop_plus: Vec::with_capacity(n),
        se_pop_plus: Vec::with_capacity(n),
        mean_coherence_x: Vec::with_capacity(n),
        se_coherence_x: Vec::with_capacity(n),
        n_trajectories: results.len(),
    };
    for i in 0..n {
        let (m, s) = mean_and_se(&pops, i);
        out.mean_pop_plus.push(m);
        out.se_pop_plus.push(s);
        let (m, s) = mean_and_se(&cohs, i);
        out.mean_coherence_x.push(m);
        out.se_coherence_x.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub t_final: f64,
    /// `None` picks the largest step allowed by the bound.
    pub dt: Option<f64>,
    /// Approximate number of sample intervals on [0, t_final].
    pub samples: usize,
    pub frame: NuclearFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub dt: f64,
    pub dt_bound: f64,
    pub steps: usize,
    pub sample_stride: usize,
    /// Steps per period of the second drive (1 when there is none).
    pub steps_per_period: usize,
    /// Steps between noise refreshes.
    pub noise_stride: usize,
}

impl StepPlan {
    pub fn sample_times(&self) -> Vec<f64> {
        (0..=self.steps / self.sample_stride)
            .map(|k| (k * self.sample_stride) as f64 * self.dt)
            .collect()
    }
}

/// Fastest angular frequency scale of the Hamiltonian.
pub fn max_frequency(sys: &SystemSpec, drive: &DriveSpec) -> f64 {
    [
        drive.omega1.abs() + drive.delta2.abs(),
        2.0 * drive.omega2.abs(),
        drive.delta_omega.abs(),
        sys.omega_n.abs(),
        sys.delta.abs(),
        sys.g_par.abs(),
        sys.g_perp.abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// min(2π/(20 ω_max), τ_min/50).
pub fn step_bound(sys: &SystemSpec, drive: &DriveSpec, wiring: &NoiseWiring) -> f64 {
    let w = max_frequency(sys, drive);
    let mut bound = if w > 0.0 { 2.0 * PI / (20.0 * w) } else { f64::INFINITY };
    if let Some(tau) = wiring.min_tau() {
        bound = bound.min(tau / 50.0);
    }
    bound
}

pub fn plan_steps(sys: &SystemSpec, drive: &DriveSpec, wiring: &NoiseWiring, settings: &RunSettings) -> Result<StepPlan> {
    if !(settings.t_final > 0.0) || !settings.t_final.is_finite() {
        return Err(Error::Validation(format!("t_final must be positive, got {}", settings.t_final)));
    }
    if settings.samples == 0 {
        return Err(Error::Validation("need at least one sample interval".into()));
    }
    let bound = step_bound(sys, drive, wiring);
    let mut dt = match settings.dt {
        Some(dt) => {
            if !(dt > 0.0) {
                return Err(Error::Validation(format!("dt must be positive, got {dt}")));
            }
            if dt > bound * (1.0 + 1e-12) {
                return Err(Error::StepTooLarge { dt, bound });
            }
            dt
        }
        None if bound.is_finite() => bound,
        None => settings.t_final / settings.samples as f64,
    };
    let mut m = 1;
    if drive.has_second_drive() {
        let period = 2.0 * PI / drive.omega1;
        m = (period / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        dt = period / m as f64;
    }
    let interval = settings.t_final / settings.samples as f64;
    let periods_per_sample = ((interval / (m as f64 * dt)).round() as usize).max(1);
    let stride = periods_per_sample * m;
    let n_samples = ((settings.t_final / (stride as f64 * dt)) - 1e-9).ceil().max(1.0) as usize;
    let noise_stride = match wiring.min_tau() {
        Some(tau) => ((tau / (50.0 * dt)) * (1.0 + 1e-9)).floor().max(1.0) as usize,
        None => 1,
    };
    Ok(StepPlan { dt, dt_bound: bound, steps: n_samples * stride, sample_stride: stride, steps_per_period: m, noise_stride })
}

/// Everything a trajectory needs that does not depend on the seed.
#[derive(Debug, Clone)]
pub struct Engine {
    pub sys: SystemSpec,
    pub drive: DriveSpec,
    pub wiring: NoiseWiring,
    pub plan: StepPlan,
    pub frame: NuclearFrame,
    components: Vec<(f64, Vec<C>)>,
    full: Vec<Vec<C>>,
    half: Vec<Vec<C>>,
    merged: Vec<Vec<C>>,
    period: Vec<C>,
    carrier_phase: Vec<f64>,
}

fn flatten(op: &Operator) -> Vec<C> {
    let d = op.nrows();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(op[(i, j)]);
        }
    }
    out
}

impl Engine {
    pub fn new(
        sys: &SystemSpec,
        drive: &DriveSpec,
        noise: &NoiseSpec,
        init: &InitialState,
        settings: &RunSettings,
    ) -> Result<Self> {
        let wiring = wire_noise(sys, drive, noise)?;
        let plan = plan_steps(sys, drive, &wiring, settings)?;
        let h = build_hamiltonian(sys, drive)?;
        let m = plan.steps_per_period;
        let dt = plan.dt;
        let mids: Vec<Operator> = (0..m).map(|k| h.at((k as f64 + 0.5) * dt)).collect();
        let full_ops = mids.iter().map(|hk| propagator(hk, dt)).collect::<Result<Vec<_>>>()?;
        let half_ops = mids.iter().map(|hk| propagator(hk, dt / 2.0)).collect::<Result<Vec<_>>>()?;
        let merged_ops: Vec<Operator> = (0..m).map(|k| &half_ops[(k + 1) % m] * &half_ops[k]).collect();
        let d = sys.dim();
        let period_op = full_ops.iter().fold(Operator::identity(d, d), |acc, u| u * acc);
        let components = init
            .components(sys.electron_levels)?
            .into_iter()
            .map(|(p, v)| (p, v.iter().copied().collect()))
            .collect();
        let carrier_phase = (0..m).map(|k| 2.0 * (drive.omega1 * (k as f64 + 0.5) * dt).cos()).collect();
        Ok(Engine {
            sys: *sys,
            drive: *drive,
            wiring,
            plan,
            frame: settings.frame,
            components,
            full: full_ops.iter().map(flatten).collect(),
            half: half_ops.iter().map(flatten).collect(),
            merged: merged_ops.iter().map(flatten).collect(),
            period: flatten(&period_op),
            carrier_phase,
        })
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.plan.sample_times()
    }

    /// Trajectory `index` of the ensemble seeded by `seed`. Depends only on
    /// (inputs, seed, index).
    pub fn trajectory(&self, seed: u64, index: u64) -> TrajectoryResult {
        match self.sys.electron_levels {
            2 => self.run::<2, 4>(seed, index),
            _ => self.run::<3, 6>(seed, index),
        }
    }

    fn frame_phase(&self, t: f64) -> f64 {
        match self.frame {
            NuclearFrame::Lab => 0.0,
            NuclearFrame::Rotating => self.sys.omega_n * t,
        }
    }

    fn run<const L: usize, const D: usize>(&self, seed: u64, index: u64) -> TrajectoryResult {
        let plan = &self.plan;
        let dt = plan.dt;
        let m = plan.steps_per_period;
        let mut jump_rng = stream_rng(seed, index, STREAM_JUMPS);

        let mut v = [ZERO; D];
        let pick: f64 = jump_rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1].1;
        for (p, comp) in &self.components {
            acc += p;
            if pick < acc {
                chosen = comp;
                break;
            }
        }
        v.copy_from_slice(chosen);

        let rate = (L as f64 - 1.0) * jump_rate(&self.sys);
        let clock = (rate > 0.0).then(|| Exp::new(rate).expect("positive rate"));
        let mut next_jump = match &clock {
            Some(e) => e.sample(&mut jump_rng),
            None => f64::INFINITY,
        };

        let n_samples = plan.steps / plan.sample_stride + 1;
        let mut out = TrajectoryResult::with_capacity(n_samples);
        out.record(0.0, pure_observables(&v, 0.0));

        let full: Vec<[[C; D]; D]> = self.full.iter().map(|f| to_array::<D>(f)).collect();
        let period = to_array::<D>(&self.period);

        if self.wiring.is_empty() {
            let mut j = 0usize;
            while j < plan.steps {
                let next_sample = (j / plan.sample_stride + 1) * plan.sample_stride;
                if j % m == 0 && j + m <= next_sample && ((j + m) as f64) * dt < next_jump {
                    v = matvec(&period, &v);
                    j += m;
                } else {
                    v = matvec(&full[j % m], &v);
                    j += 1;
                }
                let t = j as f64 * dt;
                while t >= next_jump {
                    apply_jump::<L, D, _>(&mut v, &mut jump_rng, t, &mut out.jump_log);
                    next_jump += clock.as_ref().map_or(f64::INFINITY, |e| e.sample(&mut jump_rng));
                }
                if j % plan.sample_stride == 0 {
                    self.sample(&mut v, t, &mut out);
                }
            }
            return out;
        }

        let half: Vec<[[C; D]; D]> = self.half.iter().map(|f| to_array::<D>(f)).collect();
        let merged: Vec<[[C; D]; D]> = self.merged.iter().map(|f| to_array::<D>(f)).collect();
        let channels = &self.wiring.channels;
        let mut rngs: Vec<_> = channels.iter().map(|c| stream_rng(seed, index, c.stream)).collect();
        let refresh = plan.noise_stride as f64 * dt;
        let mut procs: Vec<OuProcess> = channels
            .iter()
            .zip(rngs.iter_mut())
            .map(|(c, r)| OuProcess::stationary(c.params, refresh, r))
            .collect();
        let static_ops: Vec<(usize, [[C; L]; L])> = channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.shape == NoiseShape::Static)
            .map(|(i, c)| (i, to_array::<L>(&flatten(&c.electron_op))))
            .collect();
        let carrier_ops: Vec<(usize, [[C; L]; L])> = channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.shape == NoiseShape::Carrier)
            .map(|(i, c)| (i, to_array::<L>(&flatten(&c.electron_op))))
            .collect();
        let mut static_noise = [[ZERO; L]; L];

        // w holds A_k ψ, half a drive step ahead of the true state.
        let mut w = matvec(&half[0], &v);
        for j in 0..plan.steps {
            let k = j % m;
            if j % plan.noise_stride == 0 {
                if j > 0 {
                    for (p, r) in procs.iter_mut().zip(rngs.iter_mut()) {
                        p.advance(r);
                    }
                }
                static_noise = [[ZERO; L]; L];
                for (i, op) in &static_ops {
                    add_scaled(&mut static_noise, op, procs[*i].value);
                }
            }
            let mut n = static_noise;
            for (i, op) in &carrier_ops {
                add_scaled(&mut n, op, procs[*i].value * self.carrier_phase[k]);
            }
            let c = cayley::<L>(&n, dt);
            w = apply_electron::<L, D>(&c, &w);
            w = matvec(&merged[k], &w);

            let t = (j + 1) as f64 * dt;
            let sample_due = (j + 1) % plan.sample_stride == 0;
            if t >= next_jump || sample_due {
                let kn = (j + 1) % m;
                v = matvec_adjoint(&half[kn], &w);
                while t >= next_jump {
                    apply_jump::<L, D, _>(&mut v, &mut jump_rng, t, &mut out.jump_log);
                    next_jump += clock.as_ref().map_or(f64::INFINITY, |e| e.sample(&mut jump_rng));
                }
                if sample_due {
                    self.sample(&mut v, t, &mut out);
                }
                w = matvec(&half[kn], &v);
            }
        }
        out
    }

    fn sample<const D: usize>(&self, v: &mut [C; D], t: f64, out: &mut TrajectoryResult) {
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        out.max_norm_error = out.max_norm_error.max((norm - 1.0).abs());
        for z in v.iter_mut() {
            *z /= norm;
        }
        out.record(t, pure_observables(v, self.frame_phase(t)));
    }
}

fn to_array<const D: usize>(flat: &[C]) -> [[C; D]; D] {
    let mut m = [[ZERO; D]; D];
    for i in 0..D {
        for j in 0..D {
            m[i][j] = flat[i * D + j];
        }
    }
    m
}

#[inline(always)]
fn matvec<const D: usize>(m: &[[C; D]; D], v: &[C; D]) -> [C; D] {
    let mut out = [ZERO; D];
    for i in 0..D {
        let mut acc = ZERO;
        for j in 0..D {
            acc += m[i][j] * v[j];
        }
        out[i] = acc;
    }
    out
}

#[inline(always)]
fn matvec_adjoint<const D: usize>(m: &[[C; D]; D], v: &[C; D]) -> [C; D] {
    let mut out = [ZERO; D];
    for i in 0..D {
        let mut acc = ZERO;
        for j in 0..D {
            acc += m[j][i].conj() * v[j];
        }
        out[i] = acc;
    }
    out
}

#[inline(always)]
fn add_scaled<const L: usize>(acc: &mut [[C; L]; L], op: &[[C; L]; L], x: f64) {
    for i in 0..L {
        for j in 0..L {
            acc[i][j] += op[i][j] * x;
        }
    }
}

#[inline(always)]
fn apply_electron<const L: usize, const D: usize>(c: &[[C; L]; L], v: &[C; D]) -> [C; D] {
    let mut out = [ZERO; D];
    for a in 0..L {
        for p in 0..2 {
            let mut acc = ZERO;
            for b in 0..L {
                acc += c[a][b] * v[2 * b + p];
            }
            out[2 * a + p] = acc;
        }
    }
    out
}

/// (1 + iN dt/2)⁻¹(1 − iN dt/2), unitary for Hermitian N.
fn cayley<const L: usize>(n: &[[C; L]; L], dt: f64) -> [[C; L]; L] {
    let h = C::new(0.0, dt / 2.0);
    let mut a = [[ZERO; L]; L];
    let mut b = [[ZERO; L]; L];
    for i in 0..L {
        for j in 0..L {
            let x = n[i][j] * h;
            let id = if i == j { C::new(1.0, 0.0) } else { ZERO };
            a[i][j] = id + x;
            b[i][j] = id - x;
        }
    }
    // Gaussian elimination with partial pivoting on [a | b].
    for col in 0..L {
        let mut piv = col;
        for r in col + 1..L {
            if a[r][col].norm_sqr() > a[piv][col].norm_sqr() {
                piv = r;
            }
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let inv = C::new(1.0, 0.0) / a[col][col];
        for r in 0..L {
            if r == col {
                continue;
            }
            let f = a[r][col] * inv;
            if f == ZERO {
                continue;
            }
            for k in 0..L {
                let (ac, bc) = (a[col][k], b[col][k]);
                a[r][k] -= f * ac;
                b[r][k] -= f * bc;
            }
        }
    }
    for r in 0..L {
        let inv = C::new(1.0, 0.0) / a[r][r];
        for k in 0..L {
            b[r][k] *= inv;
        }
    }
    b
}

fn apply_jump<const L: usize, const D: usize, R: Rng>(v: &mut [C; D], rng: &mut R, t: f64, log: &mut Vec<JumpEvent>) {
    let mut pops = [0.0; L];
    for a in 0..L {
        pops[a] = v[2 * a].norm_sqr() + v[2 * a + 1].norm_sqr();
    }
    let total: f64 = pops.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut from = L - 1;
    let mut acc = 0.0;
    for (a, p) in pops.iter().enumerate() {
        acc += p;
        if u < acc {
            from = a;
            break;
        }
    }
    let mut to = rng.random_range(0..L - 1);
    if to >= from {
        to += 1;
    }
    let (x, y) = (v[2 * from], v[2 * from + 1]);
    let norm = (x.norm_sqr() + y.norm_sqr()).sqrt();
    *v = [ZERO; D];
    v[2 * to] = x / norm;
    v[2 * to + 1] = y / norm;
    log.push(JumpEvent { time: t, from, to });
}

/// Trajectories `0..n` in index order.
pub fn run_trajectories_sequential(engine: &Engine, n: usize, seed: u64) -> Vec<TrajectoryResult> {
    (0..n as u64).map(|i| engine.trajectory(seed, i)).collect()
}

#[cfg(feature = "parallel")]
pub fn run_trajectories_parallel(engine: &Engine, n: usize, seed: u64) -> Vec<TrajectoryResult> {
    use rayon::prelude::*;
    (0..n as u64).into_par_iter().map(|i| engine.trajectory(seed, i)).collect()
}

/// Trajectories `0..n`, in parallel when the `parallel` feature is on. The
/// output is identical either way.
pub fn run_trajectories(engine: &Engine, n: usize, seed: u64) -> Vec<TrajectoryResult> {
    #[cfg(feature = "parallel")]
    {
        run_trajectories_parallel(engine, n, seed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_trajectories_sequential(engine, n, seed)
    }
}

pub fn run_ensemble(engine: &Engine, n: usize, seed: u64) -> Result<EnsembleResult> {
    if n == 0 {
        return Err(Error::Validation("need at least one trajectory".into()));
    }
    ensemble_average(&run_trajectories(engine, n, seed))
}

pub fn evolve_trajectory(
    sys: &SystemSpec,
    drive: &DriveSpec,
    noise: &NoiseSpec,
    init: &InitialState,
    settings: &RunSettings,
    seed: u64,
) -> Result<TrajectoryResult> {
    Ok(Engine::new(sys, drive, noise, init, settings)?.trajectory(seed, 0))
}

/// Deterministic master equation, integrated with classical fourth-order
/// Runge–Kutta. Samples fall on the same grid the trajectory engine uses for
/// the same settings; each engine step is split into RK4 substeps short
/// enough that ‖H‖·h ≤ 0.075.
pub fn evolve_lindblad(
    sys: &SystemSpec,
    drive: &DriveSpec,
    noise: &NoiseSpec,
    init: &InitialState,
    settings: &RunSettings,
) -> Result<TrajectoryResult> {
    Ok(evolve_lindblad_states(sys, drive, noise, init, settings)?.0)
}

/// As [`evolve_lindblad`], also returning the joint density matrix at every
/// sample time.
pub fn evolve_lindblad_states(
    sys: &SystemSpec,
    drive: &DriveSpec,
    noise: &NoiseSpec,
    init: &InitialState,
    settings: &RunSettings,
) -> Result<(TrajectoryResult, Vec<Operator>)> {
    let wiring = wire_noise(sys, drive, noise)?;
    if !wiring.is_empty() {
        return Err(Error::Validation(
            "classical noise needs trajectories; the master equation route is noise-free only".into(),
        ));
    }
    let rho0 = init.density(sys.electron_levels)?;
    let plan = plan_steps(sys, drive, &wiring, settings)?;
    let h = build_hamiltonian(sys, drive)?;
    match sys.electron_levels {
        2 => lindblad_rk4::<4>(sys, &h, &rho0, &plan, settings.frame),
        _ => lindblad_rk4::<6>(sys, &h, &rho0, &plan, settings.frame),
    }
}

type Mat<const D: usize> = [[C; D]; D];

fn mat_from<const D: usize>(op: &Operator) -> Mat<D> {
    to_array::<D>(&flatten(op))
}

fn lindblad_rk4<const D: usize>(
    sys: &SystemSpec,
    h: &Hamiltonian,
    rho0: &Operator,
    plan: &StepPlan,
    frame: NuclearFrame,
) -> Result<(TrajectoryResult, Vec<Operator>)> {
    let norm_bound = h.static_part.row_iter().map(|r| r.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
        + h.modulated.as_ref().map_or(0.0, |m| m.row_iter().map(|r| r.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max));
    let sub = ((norm_bound * plan.dt / 0.075).ceil() as usize).max(1);
    let hstep = plan.dt / sub as f64;

    // Jump channels as (from, to, rate); c = |to⟩⟨from| ⊗ 1.
    let chans = jump_channels(sys);
    let levels = sys.electron_levels;
    let mut out_rate = vec![0.0; levels];
    for c in &chans {
        out_rate[c.from] += c.rate;
    }
    let hs = mat_from::<D>(&h.static_part);
    let hm = h.modulated.as_ref().map(mat_from::<D>);
    let carrier = h.carrier;

    let rhs = |t: f64, rho: &Mat<D>| -> Mat<D> {
        let mut ham = hs;
        if let Some(m) = &hm {
            let c = (carrier * t).cos();
            for i in 0..D {
                for j in 0..D {
                    ham[i][j] += m[i][j] * c;
                }
            }
        }
        let mut out = [[ZERO; D]; D];
        for i in 0..D {
            for j in 0..D {
                let mut acc = ZERO;
                for k in 0..D {
                    acc += ham[i][k] * rho[k][j] - rho[i][k] * ham[k][j];
                }
                out[i][j] = C::new(acc.im, -acc.re); // −i·acc
            }
        }
        for c in &chans {
            for p in 0..2 {
                for q in 0..2 {
                    out[2 * c.to + p][2 * c.to + q] += rho[2 * c.from + p][2 * c.from + q] * c.rate;
                }
            }
        }
        for i in 0..D {
            for j in 0..D {
                out[i][j] -= rho[i][j] * (0.5 * (out_rate[i / 2] + out_rate[j / 2]));
            }
        }
        out
    };
    let axpy = |a: &Mat<D>, b: &Mat<D>, s: f64| -> Mat<D> {
        let mut o = *a;
        for i in 0..D {
            for j in 0..D {
                o[i][j] += b[i][j] * s;
            }
        }
        o
    };

    let mut rho = mat_from::<D>(rho0);
    let mut out = TrajectoryResult::with_capacity(plan.steps / plan.sample_stride + 1);
    let phase = |t: f64| match frame {
        NuclearFrame::Lab => 0.0,
        NuclearFrame::Rotating => sys.omega_n * t,
    };
    let observe = |rho: &Mat<D>, t: f64| {
        let (mut r00, mut r11, mut r01) = (0.0, 0.0, ZERO);
        for a in 0..D / 2 {
            r00 += rho[2 * a][2 * a].re;
            r11 += rho[2 * a + 1][2 * a + 1].re;
            r01 += rho[2 * a][2 * a + 1];
        }
        observables_from_reduced(r00, r11, r01, phase(t))
    };
    let to_op = |rho: &Mat<D>| Operator::from_fn(D, D, |i, j| rho[i][j]);
    let mut states = vec![to_op(&rho)];
    out.record(0.0, observe(&rho, 0.0));
    let mut worst_trace = 0.0f64;
    let mut worst_herm = 0.0f64;
    for j in 0..plan.steps {
        for s in 0..sub {
            let t = j as f64 * plan.dt + s as f64 * hstep;
            let k1 = rhs(t, &rho);
            let k2 = rhs(t + hstep / 2.0, &axpy(&rho, &k1, hstep / 2.0));
            let k3 = rhs(t + hstep / 2.0, &axpy(&rho, &k2, hstep / 2.0));
            let k4 = rhs(t + hstep, &axpy(&rho, &k3, hstep));
            for i in 0..D {
                for l in 0..D {
                    rho[i][l] += (k1[i][l] + (k2[i][l] + k3[i][l]) * 2.0 + k4[i][l]) * (hstep / 6.0);
                }
            }
        }
        if (j + 1) % plan.sample_stride == 0 {
            let t = (j + 1) as f64 * plan.dt;
            let tr: f64 = (0..D).map(|i| rho[i][i].re).sum();
            worst_trace = worst_trace.max((tr - 1.0).abs());
            for i in 0..D {
                for l in 0..D {
                    worst_herm = worst_herm.max((rho[i][l] - rho[l][i].conj()).norm());
                }
            }
            out.record(t, observe(&rho, t));
            states.push(to_op(&rho));
        }
    }
    out.max_norm_error = worst_trace;
    if worst_trace > 1e-8 || worst_herm > 1e-9 {
        return Err(Error::Numerical(format!(
            "master equation drifted: trace error {worst_trace:.2e}, hermiticity error {worst_herm:.2e}"
        )));
    }
    Ok((out, states))
}

/// Convenience for tests and diagnostics: the joint density matrix of a
/// normalized state vector.
pub fn pure_density(v: &StateVector) -> Operator {
    v * v.adjoint()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SecondDriveMethod;
    use crate::noise::{NoiseAmplitude, NoiseSource};
    use crate::operators::{kron, max_abs, nuclear_ops, spin_ops};

    const TP: f64 = 2.0 * PI;

    fn settings(t_final: f64, dt: Option<f64>, samples: usize, frame: NuclearFrame) -> RunSettings {
        RunSettings { t_final, dt, samples, frame }
    }

    // Scaling-and-squaring Taylor series, independent of the eigensolver.
    fn expm_taylor(h: &Operator, t: f64) -> Operator {
        let d = h.nrows();
        let a = h * C::new(0.0, -t);
        let norm = max_abs(&a) * d as f64;
        let squarings = (norm.log2().ceil().max(0.0) as u32) + 4;
        let a = a * re(0.5f64.powi(squarings as i32));
        let mut term = Operator::identity(d, d);
        let mut sum = Operator::identity(d, d);
        for k in 1..30 {
            term = &term * &a * re(1.0 / k as f64);
            sum += &term;
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn observables_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = StateVector::from_vec(vec![re(0.3), re(0.3), C::new(0.0, 0.4 * s * 2f64.sqrt()), C::new(0.0, 0.4 * s * 2f64.sqrt())]);
        let plus = &plus / re(plus.norm());
        let o = nuclear_observables(&pure_density(&plus));
        assert!((o.pop_plus - 1.0).abs() < 1e-12 && o.pop_minus.abs() < 1e-12 && (o.coherence_x - 1.0).abs() < 1e-12);
        let up = StateVector::from_vec(vec![re(1.0), re(0.0), re(0.0), re(0.0)]);
        let o = nuclear_observables(&pure_density(&up));
        assert!((o.pop_plus - 0.5).abs() < 1e-12 && (o.pop_minus - 0.5).abs() < 1e-12 && o.coherence_x.abs() < 1e-12);
        let mixed = Operator::identity(6, 6) * re(1.0 / 6.0);
        let o = nuclear_observables(&mixed);
        assert!((o.pop_plus - 0.5).abs() < 1e-12 && o.coherence_x.abs() < 1e-12);
    }

    fn synthetic(values: Vec<f64>) -> TrajectoryResult {
        TrajectoryResult {
            times: (0..values.len()).map(|i| i as f64).collect(),
            pop_minus: values.iter().map(|v| 1.0 - v).collect(),
            coherence_x: values.iter().map(|v| 2.0 * v - 1.0).collect(),
            pop_plus: values,
            jump_log: vec![],
            max_norm_error: 0.0,
        }
    }

    #[test]
    fn ensemble_average_examples() {
        let a = synthetic(vec![1.0, 0.7, 0.4]);
        let e = ensemble_average(std::slice::from_ref(&a)).unwrap();
        assert_eq!(e.mean_pop_plus, a.pop_plus);
        assert!(e.se_pop_plus.iter().all(|s| *s == 0.0));
        let e = ensemble_average(&[a.clone(), a.clone()]).unwrap();
        assert!(e.se_pop_plus.iter().all(|s| *s == 0.0));
        assert_eq!(e.n_trajectories, 2);

        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::Normal::new(0.5, 0.01).unwrap();
        let trajs: Vec<_> = (0..1000).map(|_| synthetic(vec![normal.sample(&mut rng)])).collect();
        let e = ensemble_average(&trajs).unwrap();
        let expected = 0.01 / 1000f64.sqrt();
        assert!((e.se_pop_plus[0] / expected - 1.0).abs() < 0.2, "{}", e.se_pop_plus[0]);

        let mut b = synthetic(vec![1.0, 0.7, 0.4]);
        b.times[2] = 2.5;
        assert!(ensemble_average(&[a, b]).is_err());
        assert!(ensemble_average(&[]).is_err());
    }

    #[test]
    fn coherent_evolution_matches_exact_diagonalization() {
        let sys = SystemSpec {
            electron_levels: 2,
            omega_n: TP * 100e3,
            g_par: TP * 40e3,
            g_perp: TP * 20e3,
            delta: TP * 100e3,
            t1: f64::INFINITY,
        };
        let drive = DriveSpec::off();
        let init = InitialState::ElectronLevel(0);
        let st = settings(50e-6, None, 100, NuclearFrame::Lab);
        let traj = evolve_trajectory(&sys, &drive, &NoiseSpec::none(), &init, &st, 1).unwrap();
        assert!(traj.jump_log.is_empty());

        let h = crate::model::build_bare_hamiltonian(&sys).unwrap();
        let psi0 = init.components(2).unwrap()[0].1.clone();
        for (i, t) in traj.times.iter().enumerate() {
            let psi = expm_taylor(&h, *t) * &psi0;
            let o = nuclear_observables(&pure_density(&psi));
            assert!((o.pop_plus - traj.pop_plus[i]).abs() < 1e-9, "t={t}");
            assert!((traj.pop_plus[i] + traj.pop_minus[i] - 1.0).abs() < 1e-9);
        }
        // Without the transverse term the populations follow cos² of half the
        // conditional precession angle.
        let sys2 = SystemSpec { g_perp: 0.0, ..sys };
        let traj = evolve_trajectory(&sys2, &drive, &NoiseSpec::none(), &init, &st, 1).unwrap();
        for (i, t) in traj.times.iter().enumerate() {
            let expected = ((sys.omega_n + sys.g_par / 2.0) * t / 2.0).cos().powi(2);
            assert!((traj.pop_plus[i] - expected).abs() < 1e-9);
        }
    }

    fn fig3_protected(levels: usize) -> (SystemSpec, DriveSpec) {
        let sys = SystemSpec {
            electron_levels: levels,
            omega_n: TP * 100e3,
            g_par: TP * 40e3,
            g_perp: TP * 20e3,
            delta: TP * 100e3,
            t1: 1.25e-3,
        };
        let omega1 = TP * 4e6;
        let drive = DriveSpec { omega1, omega2: omega1 / 17.0, method: SecondDriveMethod::ZModulation, delta2: 0.0, delta_omega: 0.0 };
        (sys, drive)
    }

    fn fig3_noise() -> NoiseSpec {
        let rel = |tau| Some(NoiseSource { amplitude: NoiseAmplitude::Relative(0.005), tau });
        NoiseSpec {
            magnetic: Some(NoiseSource { amplitude: NoiseAmplitude::Absolute(TP * 50e3), tau: 25e-6 }),
            rabi1: rel(100e-6),
            rabi2: rel(100e-6),
            rabi_mismatch: rel(100e-6),
            correlated_rabi: true,
        }
    }

    #[test]
    fn protection_suppresses_short_time_dephasing() {
        let (sys, drive) = fig3_protected(2);
        let st = settings(10.0 / drive.omega1 * 20.0, None, 20, NuclearFrame::Rotating);
        let traj = evolve_trajectory(&sys, &drive, &NoiseSpec::none(), &InitialState::MixedElectron, &st, 5).unwrap();
        assert!(traj.jump_log.is_empty());
        assert!(traj.pop_plus.iter().all(|p| *p >= 0.999), "{:?}", traj.pop_plus);
    }

    #[test]
    fn norm_is_preserved_with_noise() {
        for levels in [2, 3] {
            let (sys, mut drive) = fig3_protected(levels);
            if levels == 3 {
                drive.delta_omega = TP * 59.0;
            }
            let st = settings(40e-6, None, 40, NuclearFrame::Rotating);
            let traj = evolve_trajectory(&sys, &drive, &fig3_noise(), &InitialState::MixedElectron, &st, 9).unwrap();
            assert!(traj.max_norm_error < 1e-9, "{}", traj.max_norm_error);
            for (p, m) in traj.pop_plus.iter().zip(&traj.pop_minus) {
                assert!((p + m - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn step_size_is_checked() {
        let (sys, drive) = fig3_protected(2);
        let st = settings(1e-6, Some(2e-8), 10, NuclearFrame::Rotating);
        match evolve_trajectory(&sys, &drive, &NoiseSpec::none(), &InitialState::MixedElectron, &st, 0) {
            Err(Error::StepTooLarge { bound, .. }) => assert!((bound - TP / (20.0 * drive.omega1)).abs() < 1e-20),
            other => panic!("expected step error, got {other:?}"),
        }
        let bad = InitialState::Pure(StateVector::from_element(4, re(1.0)));
        let st = settings(1e-6, None, 10, NuclearFrame::Rotating);
        assert!(matches!(
            evolve_trajectory(&sys, &drive, &NoiseSpec::none(), &bad, &st, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn trajectories_are_deterministic() {
        let (sys, drive) = fig3_protected(3);
        let st = settings(30e-6, None, 30, NuclearFrame::Rotating);
        let mut noise = fig3_noise();
        noise.rabi_mismatch = None;
        let sys = SystemSpec { t1: 5e-6, ..sys };
        let engine = Engine::new(&sys, &drive, &noise, &InitialState::MixedElectron, &st).unwrap();
        let a = run_trajectories_sequential(&engine, 6, 42);
        let b = run_trajectories_sequential(&engine, 6, 42);
        assert_eq!(a, b);
        assert!(a.iter().any(|t| !t.jump_log.is_empty()));
        #[cfg(feature = "parallel")]
        assert_eq!(a, run_trajectories_parallel(&engine, 6, 42));
        let c = run_trajectories_sequential(&engine, 6, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn waiting_times_are_exponential() {
        for levels in [2usize, 3] {
            let sys = SystemSpec { electron_levels: levels, omega_n: 1.0, g_par: 0.5, g_perp: 0.2, delta: 0.0, t1: 1.0 };
            let st = settings(2000.0, Some(0.01), 10, NuclearFrame::Lab);
            let engine = Engine::new(&sys, &DriveSpec::off(), &NoiseSpec::none(), &InitialState::MixedElectron, &st).unwrap();
            let mut waits = Vec::new();
            for i in 0..12 {
                let tr = engine.trajectory(3, i);
                let mut last = 0.0;
                for j in &tr.jump_log {
                    waits.push(j.time - last);
                    last = j.time;
                    assert_ne!(j.from, j.to);
                }
            }
            assert!(waits.len() >= 10_000, "{}", waits.len());
            let rate = (levels as f64 - 1.0) * jump_rate(&sys);
            waits.sort_by(f64::total_cmp);
            let n = waits.len() as f64;
            let ks = waits
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let cdf = 1.0 - (-rate * w).exp();
                    (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
                })
                .fold(0.0, f64::max);
            // 1% critical value of the one-sample KS statistic; the step grid
            // (dt = 0.01 against a mean wait of 2) shifts the CDF by < 0.003.
            assert!(ks < 1.628 / n.sqrt() + 0.003, "levels {levels}: KS {ks}");
            let mean = waits.iter().sum::<f64>() / n;
            assert!((mean * rate - 1.0).abs() < 0.05, "mean wait {mean}");
        }
    }

    #[test]
    fn lindblad_static_without_dynamics() {
        let sys = SystemSpec { electron_levels: 3, omega_n: 0.0, g_par: 0.0, g_perp: 0.0, delta: 0.0, t1: f64::INFINITY };
        let st = settings(1.0, Some(0.01), 10, NuclearFrame::Lab);
        let init = InitialState::ElectronLevel(1);
        let (res, states) = evolve_lindblad_states(&sys, &DriveSpec::off(), &NoiseSpec::none(), &init, &st).unwrap();
        let rho0 = init.density(3).unwrap();
        for s in &states {
            assert!(max_abs(&(s - &rho0)) < 1e-15);
        }
        assert!(res.pop_plus.iter().all(|p| (p - 1.0).abs() < 1e-15));
    }

    #[test]
    fn lindblad_population_relaxation() {
        // Independent oracle: for H = 0 the symmetric two-level telegraph
        // master equation gives ⟨S_z⟩(t) = ½ e^{−2Γt}.
        let sys = SystemSpec { electron_levels: 2, omega_n: 0.0, g_par: 0.0, g_perp: 0.0, delta: 0.0, t1: 0.7 };
        let gamma = jump_rate(&sys);
        let st = settings(2.0, Some(0.01), 20, NuclearFrame::Lab);
        let (_, states) =
            evolve_lindblad_states(&sys, &DriveSpec::off(), &NoiseSpec::none(), &InitialState::ElectronLevel(0), &st).unwrap();
        let sz = kron(&spin_ops(2).unwrap().z, &nuclear_ops().identity);
        for (k, s) in states.iter().enumerate() {
            let t = k as f64 * 0.1;
            let m = (s * &sz).trace().re;
            assert!((m - 0.5 * (-2.0 * gamma * t).exp()).abs() < 1e-9, "t={t}: {m}");
        }
    }

    #[test]
    fn lindblad_rejects_noise() {
        let (sys, drive) = fig3_protected(2);
        let st = settings(1e-6, None, 10, NuclearFrame::Rotating);
        assert!(evolve_lindblad(&sys, &drive, &fig3_noise(), &InitialState::MixedElectron, &st).is_err());
    }

    #[test]
    fn unraveling_matches_master_equation_small() {
        // Dimensionless parameters with a strong drive, so that both the
        // protected dynamics and the decay are resolved in a short run.
        for levels in [2usize, 3] {
            let sys = SystemSpec { electron_levels: levels, omega_n: 1.0, g_par: 0.8, g_perp: 0.5, delta: 0.6, t1: 1.5 };
            let drive = DriveSpec { omega1: 6.0, omega2: 1.0, method: SecondDriveMethod::ZModulation, delta2: 0.1, delta_omega: 0.0 };
            let st = settings(8.0, None, 40, NuclearFrame::Rotating);
            let engine = Engine::new(&sys, &drive, &NoiseSpec::none(), &InitialState::MixedElectron, &st).unwrap();
            let ens = run_ensemble(&engine, 600, 17).unwrap();
            let me = evolve_lindblad(&sys, &drive, &NoiseSpec::none(), &InitialState::MixedElectron, &st).unwrap();
            assert_eq!(ens.times.len(), me.times.len());
            let mut inside = 0;
            for i in 0..ens.times.len() {
                let tol = 3.0 * ens.se_pop_plus[i] + 1e-9;
                if (ens.mean_pop_plus[i] - me.pop_plus[i]).abs() <= tol {
                    inside += 1;
                }
            }
            let frac = inside as f64 / ens.times.len() as f64;
            assert!(frac >= 0.95, "levels {levels}: {frac}");
        }
    }
}
