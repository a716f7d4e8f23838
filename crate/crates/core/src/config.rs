//! Experiment configuration: TOML sections `system`, `drive`, `noise`, `run`
//! and `budget`, frequencies in Hz and times in seconds. Every field is
//! optional in a file so that a file can be layered over a preset; the
//! resolved configuration has every field filled in.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::coherence::{BudgetOptions, DecayModel};
use crate::dynamics::{NuclearFrame, RunSettings};
use crate::effective::tune_delta_omega;
use crate::error::{Error, Result};
use crate::model::{DriveSpec, SecondDriveMethod, SystemSpec};
use crate::noise::{NoiseAmplitude, NoiseSource, NoiseSpec};

const TP: f64 = 2.0 * PI;

/// Copies every field that `other` sets.
macro_rules! overlay_fields {
    ($self:ident, $other:ident; $($f:ident),*) => {
        $( if $other.$f.is_some() { $self.$f = $other.$f.clone(); } )*
    };
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub electron_levels: Option<usize>,
    pub omega_n_hz: Option<f64>,
    pub g_par_hz: Option<f64>,
    pub g_perp_hz: Option<f64>,
    pub delta_hz: Option<f64>,
    /// Seconds; `inf` disables electron jumps.
    pub t1_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    pub omega1_hz: Option<f64>,
    pub omega2_hz: Option<f64>,
    pub method: Option<SecondDriveMethod>,
    pub delta2_hz: Option<f64>,
    pub delta_omega_hz: Option<f64>,
    /// Replace `delta_omega_hz` by the mismatch that cancels the quadratic
    /// coupling (three levels only).
    pub tune_delta_omega: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSourceConfig {
    /// Standard deviation in Hz.
    pub amplitude_hz: Option<f64>,
    /// Standard deviation as a fraction of the drive it acts on.
    pub relative: Option<f64>,
    pub tau_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub magnetic: Option<NoiseSourceConfig>,
    pub rabi1: Option<NoiseSourceConfig>,
    pub rabi2: Option<NoiseSourceConfig>,
    pub rabi_mismatch: Option<NoiseSourceConfig>,
    pub correlated_rabi: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DtSetting {
    Seconds(f64),
    /// Only "auto" is accepted.
    Keyword(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    PlusPopulation,
    Coherence,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub t_final_s: Option<f64>,
    pub dt_s: Option<DtSetting>,
    pub trajectories: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub frame: Option<NuclearFrame>,
    pub observable: Option<Observable>,
    /// Window for the coherence envelope fit; defaults to 2π/g∥.
    pub envelope_window_s: Option<f64>,
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub include_ac_stark: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub drive: DriveConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub budget: BudgetSection,
}

fn overlay_source(base: &mut Option<NoiseSourceConfig>, top: &Option<NoiseSourceConfig>) {
    let Some(top) = top else { return };
    let b = base.get_or_insert_with(Default::default);
    // Setting one kind of amplitude replaces the other.
    if top.amplitude_hz.is_some() {
        b.relative = None;
    }
    if top.relative.is_some() {
        b.amplitude_hz = None;
    }
    overlay_fields!(b, top; amplitude_hz, relative, tau_s);
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fields set in `top` win.
    pub fn overlay(&mut self, top: &RunConfig) {
        let (s, t) = (&mut self.system, &top.system);
        overlay_fields!(s, t; electron_levels, omega_n_hz, g_par_hz, g_perp_hz, delta_hz, t1_s);
        let (d, t) = (&mut self.drive, &top.drive);
        overlay_fields!(d, t; omega1_hz, omega2_hz, method, delta2_hz, delta_omega_hz, tune_delta_omega);
        overlay_source(&mut self.noise.magnetic, &top.noise.magnetic);
        overlay_source(&mut self.noise.rabi1, &top.noise.rabi1);
        overlay_source(&mut self.noise.rabi2, &top.noise.rabi2);
        overlay_source(&mut self.noise.rabi_mismatch, &top.noise.rabi_mismatch);
        let (n, t) = (&mut self.noise, &top.noise);
        overlay_fields!(n, t; correlated_rabi);
        let (r, t) = (&mut self.run, &top.run);
        overlay_fields!(r, t; t_final_s, dt_s, trajectories, seed, samples, frame, observable, envelope_window_s, out_dir);
        let (b, t) = (&mut self.budget, &top.budget);
        overlay_fields!(b, t; include_ac_stark);
    }

    /// Fills optional fields with their defaults. System parameters have no
    /// default and stay unset.
    pub fn with_defaults(mut self) -> Self {
        let d = &mut self.drive;
        d.omega1_hz.get_or_insert(0.0);
        d.omega2_hz.get_or_insert(0.0);
        d.method.get_or_insert(SecondDriveMethod::None);
        d.delta2_hz.get_or_insert(0.0);
        d.delta_omega_hz.get_or_insert(0.0);
        d.tune_delta_omega.get_or_insert(false);
        self.noise.correlated_rabi.get_or_insert(true);
        let r = &mut self.run;
        r.dt_s.get_or_insert(DtSetting::Keyword("auto".into()));
        r.trajectories.get_or_insert(100);
        r.seed.get_or_insert(0);
        r.samples.get_or_insert(100);
        r.frame.get_or_insert(NuclearFrame::Rotating);
        r.observable.get_or_insert(Observable::PlusPopulation);
        self.budget.include_ac_stark.get_or_insert(false);
        self
    }
}

fn need<T: Copy>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing key {key}")))
}

/// The configuration converted to model types (rad/s internally).
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub sys: SystemSpec,
    pub drive: DriveSpec,
    pub noise: NoiseSpec,
    pub budget: BudgetOptions,
    pub trajectories: usize,
    pub seed: u64,
    pub observable: Observable,
}

fn resolve_source(src: &Option<NoiseSourceConfig>, key: &str) -> Result<Option<NoiseSource>> {
    let Some(s) = src else { return Ok(None) };
    let amplitude = match (s.amplitude_hz, s.relative) {
        (Some(a), None) => NoiseAmplitude::Absolute(TP * a),
        (None, Some(r)) => NoiseAmplitude::Relative(r),
        (None, None) => return Err(Error::Config(format!("noise.{key} needs amplitude_hz or relative"))),
        (Some(_), Some(_)) => {
            return Err(Error::Config(format!("noise.{key} sets both amplitude_hz and relative")))
        }
    };
    let tau = need(s.tau_s, &format!("noise.{key}.tau_s"))?;
    Ok(Some(NoiseSource { amplitude, tau }))
}

impl Resolved {
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.with_defaults();
        let s = &config.system;
        let sys = SystemSpec {
            electron_levels: need(s.electron_levels, "system.electron_levels")?,
            omega_n: TP * need(s.omega_n_hz, "system.omega_n_hz")?,
            g_par: TP * need(s.g_par_hz, "system.g_par_hz")?,
            g_perp: TP * need(s.g_perp_hz, "system.g_perp_hz")?,
            delta: TP * need(s.delta_hz, "system.delta_hz")?,
            t1: need(s.t1_s, "system.t1_s")?,
        };
        sys.validate()?;
        let d = &config.drive;
        let mut drive = DriveSpec {
            omega1: TP * d.omega1_hz.unwrap_or(0.0),
            omega2: TP * d.omega2_hz.unwrap_or(0.0),
            method: d.method.unwrap_or(SecondDriveMethod::None),
            delta2: TP * d.delta2_hz.unwrap_or(0.0),
            delta_omega: TP * d.delta_omega_hz.unwrap_or(0.0),
        };
        if d.tune_delta_omega == Some(true) {
            drive.delta_omega = tune_delta_omega(&sys, &drive)?;
        }
        drive.validate(&sys)?;
        let n = &config.noise;
        let noise = NoiseSpec {
            magnetic: resolve_source(&n.magnetic, "magnetic")?,
            rabi1: resolve_source(&n.rabi1, "rabi1")?,
            rabi2: resolve_source(&n.rabi2, "rabi2")?,
            rabi_mismatch: resolve_source(&n.rabi_mismatch, "rabi_mismatch")?,
            correlated_rabi: n.correlated_rabi.unwrap_or(true),
        };
        let r = &config.run;
        Ok(Resolved {
            sys,
            drive,
            noise,
            budget: BudgetOptions { include_ac_stark: config.budget.include_ac_stark.unwrap_or(false) },
            trajectories: r.trajectories.unwrap_or(100),
            seed: r.seed.unwrap_or(0),
            observable: r.observable.unwrap_or(Observable::PlusPopulation),
            config,
        })
    }

    pub fn settings(&self) -> Result<RunSettings> {
        let r = &self.config.run;
        let dt = match &r.dt_s {
            None => None,
            Some(DtSetting::Seconds(x)) => Some(*x),
            Some(DtSetting::Keyword(k)) if k == "auto" => None,
            Some(DtSetting::Keyword(k)) => {
                return Err(Error::Config(format!("run.dt_s must be a number or \"auto\", got {k:?}")))
            }
        };
        Ok(RunSettings {
            t_final: need(r.t_final_s, "run.t_final_s")?,
            dt,
            samples: r.samples.unwrap_or(100),
            frame: r.frame.unwrap_or_default(),
        })
    }

    pub fn decay_model(&self) -> Result<DecayModel> {
        Ok(match self.observable {
            Observable::PlusPopulation => DecayModel::PlusPopulation,
            Observable::Coherence => {
                let window = match self.config.run.envelope_window_s {
                    Some(w) => w,
                    None if self.sys.g_par != 0.0 => TP / self.sys.g_par.abs(),
                    None => {
                        return Err(Error::Config(
                            "run.envelope_window_s is required for the coherence observable when g∥ = 0".into(),
                        ))
                    }
                };
                DecayModel::CoherenceEnvelope { window }
            }
        })
    }
}

pub const PRESETS: [&str; 8] = [
    "fig3-2level-unprotected",
    "fig3-nv-unprotected",
    "fig3-2level-protected-noiseless",
    "fig3-nv-protected-noiseless",
    "fig3-2level-noisy",
    "fig3-nv-noisy",
    "fig3-scaled",
    "fig3-scaled-nv",
];

/// Frequency multiplier of the desk-scaled presets; times are divided by it.
pub const SCALE: f64 = 20.0;

fn fig3_system(levels: usize, lambda: f64) -> SystemConfig {
    SystemConfig {
        electron_levels: Some(levels),
        omega_n_hz: Some(100e3 * lambda),
        g_par_hz: Some(40e3 * lambda),
        g_perp_hz: Some(20e3 * lambda),
        delta_hz: Some(100e3 * lambda),
        t1_s: Some(1.25e-3 / lambda),
    }
}

fn fig3_drive(levels: usize, lambda: f64) -> DriveConfig {
    DriveConfig {
        omega1_hz: Some(4e6 * lambda),
        omega2_hz: Some(4e6 * lambda / 17.0),
        method: Some(SecondDriveMethod::ZModulation),
        delta2_hz: Some(0.0),
        delta_omega_hz: Some(0.0),
        tune_delta_omega: Some(levels == 3),
    }
}

fn fig3_noise(lambda: f64) -> NoiseConfig {
    let rel = |tau: f64| Some(NoiseSourceConfig { amplitude_hz: None, relative: Some(0.005), tau_s: Some(tau / lambda) });
    NoiseConfig {
        magnetic: Some(NoiseSourceConfig { amplitude_hz: Some(50e3 * lambda), relative: None, tau_s: Some(25e-6 / lambda) }),
        rabi1: rel(100e-6),
        rabi2: rel(100e-6),
        rabi_mismatch: rel(100e-6),
        correlated_rabi: Some(true),
    }
}

fn run_section(t_final: f64, trajectories: usize, samples: usize, frame: NuclearFrame, observable: Observable) -> RunSection {
    RunSection {
        t_final_s: Some(t_final),
        trajectories: Some(trajectories),
        seed: Some(1),
        samples: Some(samples),
        frame: Some(frame),
        observable: Some(observable),
        ..Default::default()
    }
}

/// Built-in parameter sets. Protected runs last about three times the
/// predicted coherence time.
pub fn preset(name: &str) -> Result<RunConfig> {
    let levels = if name.contains("nv") { 3 } else { 2 };
    let protected = |lambda: f64, noisy: bool, t_final: f64, trajectories: usize| RunConfig {
        system: fig3_system(levels, lambda),
        drive: fig3_drive(levels, lambda),
        noise: if noisy { fig3_noise(lambda) } else { NoiseConfig::default() },
        run: run_section(t_final, trajectories, 60, NuclearFrame::Rotating, Observable::PlusPopulation),
        budget: BudgetSection::default(),
    };
    let config = match name {
        "fig3-2level-unprotected" | "fig3-nv-unprotected" => RunConfig {
            system: fig3_system(levels, 1.0),
            drive: DriveConfig::default(),
            noise: NoiseConfig::default(),
            run: run_section(10e-3, 300, 10_000, NuclearFrame::Lab, Observable::Coherence),
            budget: BudgetSection::default(),
        },
        "fig3-2level-protected-noiseless" | "fig3-nv-protected-noiseless" => protected(1.0, false, 0.15, 200),
        "fig3-2level-noisy" => protected(1.0, true, 0.084, 200),
        "fig3-nv-noisy" => protected(1.0, true, 0.038, 200),
        "fig3-scaled" => protected(SCALE, true, 0.084 / SCALE, 500),
        "fig3-scaled-nv" => protected(SCALE, true, 0.038 / SCALE, 500),
        other => {
            return Err(Error::Config(format!("unknown preset {other:?}; available: {}", PRESETS.join(", "))))
        }
    };
    Ok(config.with_defaults())
}
