//! Ornstein–Uhlenbeck noise on the field and on the drive amplitudes, and
//! the map from noise samples to electron operators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{electron_drive_ops, DriveSpec, SystemSpec};
use crate::operators::{kron, re, transition, Operator};

/// dx = −x/τ dt + √C dW. The stationary variance is Cτ/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub tau: f64,
    pub diffusion: f64,
}

impl OuParams {
    pub fn new(tau: f64, diffusion: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Validation(format!("correlation time must be positive, got {tau}")));
        }
        if !(diffusion >= 0.0) || !diffusion.is_finite() {
            return Err(Error::Validation(format!("diffusion constant must be non-negative, got {diffusion}")));
        }
        Ok(OuParams { tau, diffusion })
    }

    /// Parameters whose stationary standard deviation is `amplitude`.
    pub fn from_amplitude(amplitude: f64, tau: f64) -> Result<Self> {
        if tau > 0.0 {
            Self::new(tau, 2.0 * amplitude * amplitude / tau)
        } else {
            Self::new(tau, 0.0)
        }
    }

    pub fn stationary_std(&self) -> f64 {
        (self.diffusion * self.tau / 2.0).sqrt()
    }

    /// (decay, kick) of the exact update over `dt`.
    pub fn step_coefficients(&self, dt: f64) -> (f64, f64) {
        let decay = (-dt / self.tau).exp();
        let kick = (self.diffusion * self.tau / 2.0 * (1.0 - (-2.0 * dt / self.tau).exp())).sqrt();
        (decay, kick)
    }
}

/// Exact one-step update with a standard normal draw `n`.
pub fn ou_step(x: f64, dt: f64, p: &OuParams, n: f64) -> f64 {
    let (decay, kick) = p.step_coefficients(dt);
    x * decay + kick * n
}

/// `steps + 1` samples starting from a stationary draw.
pub fn ou_trajectory<R: Rng + ?Sized>(p: &OuParams, dt: f64, steps: usize, rng: &mut R) -> Vec<f64> {
    let mut proc = OuProcess::stationary(*p, dt, rng);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(proc.value);
    for _ in 0..steps {
        out.push(proc.advance(rng));
    }
    out
}

/// Stateful process with the step coefficients precomputed for a fixed dt.
#[derive(Debug, Clone)]
pub struct OuProcess {
    pub value: f64,
    decay: f64,
    kick: f64,
}

impl OuProcess {
    pub fn stationary<R: Rng + ?Sized>(p: OuParams, dt: f64, rng: &mut R) -> Self {
        let (decay, kick) = p.step_coefficients(dt);
        let n: f64 = rng.sample(StandardNormal);
        OuProcess { value: p.stationary_std() * n, decay, kick }
    }

    #[inline]
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        self.value = self.value * self.decay + self.kick * n;
        self.value
    }
}

/// Independent generator for one (trajectory, channel) pair.
pub fn stream_rng(master_seed: u64, trajectory: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trajectory.wrapping_mul(16).wrapping_add(channel));
    rng
}

pub const STREAM_JUMPS: u64 = 0;
pub const STREAM_MAGNETIC: u64 = 1;
pub const STREAM_RABI1: u64 = 2;
pub const STREAM_RABI2: u64 = 3;
pub const STREAM_MISMATCH: u64 = 4;
pub const STREAM_RABI1_LOWER: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseAmplitude {
    /// Standard deviation in rad/s.
    Absolute(f64),
    /// Fraction of the drive amplitude the noise acts on.
    Relative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub amplitude: NoiseAmplitude,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub magnetic: Option<NoiseSource>,
    pub rabi1: Option<NoiseSource>,
    pub rabi2: Option<NoiseSource>,
    pub rabi_mismatch: Option<NoiseSource>,
    /// Three levels only: whether both transitions see the same Rabi noise.
    pub correlated_rabi: bool,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { correlated_rabi: true, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseShape {
    Static,
    /// Multiplied by 2cos(Ωt), like the second drive.
    Carrier,
}

#[derive(Debug, Clone)]
pub struct NoiseChannel {
    pub name: &'static str,
    pub stream: u64,
    pub params: OuParams,
    /// Electron-only operator multiplying the noise sample.
    pub electron_op: Operator,
    pub shape: NoiseShape,
}

#[derive(Debug, Clone)]
pub struct NoiseWiring {
    pub levels: usize,
    pub carrier: f64,
    pub channels: Vec<NoiseChannel>,
}

impl NoiseWiring {
    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn min_tau(&self) -> Option<f64> {
        self.channels.iter().map(|c| c.params.tau).reduce(f64::min)
    }

    /// Σ_c x_c f_c(t) O_c on the electron alone.
    pub fn electron_perturbation(&self, samples: &[f64], t: f64) -> Operator {
        let mut out = Operator::zeros(self.levels, self.levels);
        for (c, x) in self.channels.iter().zip(samples) {
            let f = match c.shape {
                NoiseShape::Static => 1.0,
                NoiseShape::Carrier => 2.0 * (self.carrier * t).cos(),
            };
            out += &c.electron_op * re(x * f);
        }
        out
    }

    pub fn perturbation(&self, samples: &[f64], t: f64) -> Operator {
        kron(&self.electron_perturbation(samples, t), &Operator::identity(2, 2))
    }
}

impl NoiseAmplitude {
    /// Standard deviation in rad/s given the drive amplitude a relative
    /// amplitude refers to.
    pub fn resolve(self, reference: f64) -> f64 {
        match self {
            NoiseAmplitude::Absolute(a) => a,
            NoiseAmplitude::Relative(r) => r * reference,
        }
    }
}

/// Builds the noise channels acting on the electron. Channels whose resolved
/// amplitude is zero are dropped.
pub fn wire_noise(sys: &SystemSpec, drive: &DriveSpec, noise: &NoiseSpec) -> Result<NoiseWiring> {
    sys.validate()?;
    drive.validate(sys)?;
    let levels = sys.electron_levels;
    let ops = electron_drive_ops(levels, drive.method)?;
    let s = crate::operators::spin_ops(levels)?;
    let mut channels = Vec::new();
    let mut push = |name, stream, src: &NoiseSource, reference: f64, op: Operator, shape| -> Result<()> {
        let amp = src.amplitude.resolve(reference).abs();
        if amp == 0.0 {
            return Ok(());
        }
        channels.push(NoiseChannel {
            name,
            stream,
            params: OuParams::from_amplitude(amp, src.tau)?,
            electron_op: op,
            shape,
        });
        Ok(())
    };

    if let Some(src) = &noise.magnetic {
        if matches!(src.amplitude, NoiseAmplitude::Relative(_)) {
            return Err(Error::Validation("magnetic noise needs an absolute amplitude".into()));
        }
        push("magnetic", STREAM_MAGNETIC, src, 0.0, s.z.clone(), NoiseShape::Static)?;
    }
    if let Some(src) = &noise.rabi1 {
        if levels == 3 && !noise.correlated_rabi {
            if drive.is_protected() {
                return Err(Error::Validation(
                    "uncorrelated Rabi noise on the two transitions of a three-level electron is not refocused by the drive"
                        .into(),
                ));
            }
            let h = std::f64::consts::FRAC_1_SQRT_2;
            let upper = (transition(3, 0, 1) + transition(3, 1, 0)) * re(h);
            let lower = (transition(3, 1, 2) + transition(3, 2, 1)) * re(h);
            push("rabi1_upper", STREAM_RABI1, src, drive.omega1, upper, NoiseShape::Static)?;
            push("rabi1_lower", STREAM_RABI1_LOWER, src, drive.omega1, lower, NoiseShape::Static)?;
        } else {
            push("rabi1", STREAM_RABI1, src, drive.omega1, ops.rabi.clone(), NoiseShape::Static)?;
        }
    }
    if let Some(src) = &noise.rabi2 {
        if drive.method.is_active() {
            push("rabi2", STREAM_RABI2, src, drive.omega2, ops.second.clone(), NoiseShape::Carrier)?;
        }
    }
    if let Some(src) = &noise.rabi_mismatch {
        if levels == 3 {
            push("rabi_mismatch", STREAM_MISMATCH, src, drive.delta_omega, ops.mismatch.clone(), NoiseShape::Static)?;
        }
    }
    Ok(NoiseWiring { levels, carrier: drive.omega1, channels })
}
