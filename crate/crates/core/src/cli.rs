//! Batch commands behind the `nuclear-cdd` binary. Each command resolves a
//! configuration, computes, and writes its files once at the end.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coherence::{dominant_frequency, fit_decay, phase_variance_channels, ChannelStatus, CoherenceBudget, DecayFit};
use crate::config::{preset, Observable, Resolved, RunConfig};
use crate::dynamics::{run_ensemble, EnsembleResult, Engine, InitialState, StepPlan};
use crate::effective::{
    concatenated_effective, effective_terms, nv_quadratic_coupling, tune_delta_omega, verify_against_magnus,
    EffectiveTerm,
};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "CDD_OUT_DIR";

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

const TP: f64 = 2.0 * PI;

/// Where the configuration comes from and what overrides it.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config_path: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub trajectories: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Invocation {
    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut config = match &self.preset {
            Some(name) => preset(name)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config_path {
            config.overlay(&RunConfig::load(path)?);
        } else if self.preset.is_none() {
            return Err(Error::Config("give a config file, a preset, or both".into()));
        }
        if let Some(seed) = self.seed {
            config.run.seed = Some(seed);
        }
        if let Some(n) = self.trajectories {
            config.run.trajectories = Some(n);
        }
        Resolved::new(config)
    }

    /// Base name for output files: the config file stem, else the preset.
    pub fn name(&self) -> String {
        self.config_path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .or_else(|| self.preset.clone())
            .unwrap_or_else(|| "run".into())
    }

    /// `--out`, then `run.out_dir`, then the environment variable, then ".".
    pub fn out_dir(&self, resolved: &Resolved) -> PathBuf {
        self.out
            .clone()
            .or_else(|| resolved.config.run.out_dir.as_ref().map(PathBuf::from))
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_s: f64,
    pub mean_pop_plus: f64,
    pub se_pop_plus: f64,
    pub mean_coherence_x: f64,
    pub se_coherence_x: f64,
}

pub fn write_trace(path: &Path, e: &EnsembleResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for i in 0..e.times.len() {
        w.serialize(TraceRow {
            time_s: e.times[i],
            mean_pop_plus: e.mean_pop_plus[i],
            se_pop_plus: e.se_pop_plus[i],
            mean_coherence_x: e.mean_coherence_x[i],
            se_coherence_x: e.se_coherence_x[i],
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<EnsembleResult> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut e = EnsembleResult {
        times: vec![],
        mean_pop_plus: vec![],
        se_pop_plus: vec![],
        mean_coherence_x: vec![],
        se_coherence_x: vec![],
        n_trajectories: 0,
    };
    for row in r.deserialize() {
        let row: TraceRow = row.map_err(|err| Error::Config(format!("{}: {err}", path.display())))?;
        e.times.push(row.time_s);
        e.mean_pop_plus.push(row.mean_pop_plus);
        e.se_pop_plus.push(row.se_pop_plus);
        e.mean_coherence_x.push(row.mean_coherence_x);
        e.se_coherence_x.push(row.se_coherence_x);
    }
    Ok(e)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numerical(format!("csv: {other:?}")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Fields carried by every JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub code_version: String,
    pub config: RunConfig,
}

impl Provenance {
    fn new(resolved: &Resolved) -> Self {
        Provenance { schema_version: SCHEMA_VERSION, code_version: code_version(), config: resolved.config.clone() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRow {
    pub name: String,
    pub delta_phi: f64,
    pub step_time_s: f64,
    pub t2_s: f64,
    pub status: ChannelStatus,
    pub nv_doubled: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub channels: Vec<BudgetRow>,
    pub total_t2_s: f64,
    pub nv_doubling_applied: bool,
}

fn budget_rows(b: &CoherenceBudget) -> Vec<BudgetRow> {
    b.channels
        .iter()
        .map(|c| BudgetRow {
            name: c.name.clone(),
            delta_phi: c.delta_phi,
            step_time_s: c.step_time,
            t2_s: c.t2,
            status: c.status,
            nv_doubled: c.doubled,
        })
        .collect()
}

pub fn compute_budget(r: &Resolved) -> Result<CoherenceBudget> {
    phase_variance_channels(&r.sys, &r.drive, &r.noise, r.budget)
}

pub fn run_budget(inv: &Invocation) -> Result<BudgetReport> {
    let r = inv.resolve()?;
    let b = compute_budget(&r)?;
    let report = BudgetReport {
        provenance: Provenance::new(&r),
        channels: budget_rows(&b),
        total_t2_s: b.total_t2,
        nv_doubling_applied: b.nv_doubling_applied,
    };
    let dir = inv.out_dir(&r);
    std::fs::create_dir_all(&dir)?;
    let name = inv.name();
    let mut w = csv::Writer::from_path(dir.join(format!("{name}_budget.csv"))).map_err(csv_error)?;
    for row in &report.channels {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    write_json(&dir.join(format!("{name}_budget.json")), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectiveRow {
    pub name: String,
    pub analytic_hz: f64,
    pub numeric_hz: Option<f64>,
    pub error: Option<f64>,
    /// True when `error` is absolute (Hz) because the analytic value is 0.
    pub error_is_absolute: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectiveReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub valid: bool,
    pub terms: Vec<EffectiveRow>,
}

pub const EFFECTIVE_NAMES: [&str; 7] =
    ["ac_electron", "ac_nuclear", "g_eff", "g_eff2", "g_eff3", "nv_quadratic", "delta_omega_star"];

/// `requested` empty means every term that applies to the configuration.
pub fn run_effective(inv: &Invocation, requested: &[String]) -> Result<EffectiveReport> {
    let r = inv.resolve()?;
    let (sys, drive) = (&r.sys, &r.drive);
    let terms = effective_terms(sys, drive)?;
    let names: Vec<String> = if requested.is_empty() {
        EFFECTIVE_NAMES
            .iter()
            .filter(|n| match **n {
                "g_eff2" | "g_eff3" => drive.has_second_drive(),
                "nv_quadratic" | "delta_omega_star" => sys.electron_levels == 3,
                _ => true,
            })
            .map(|n| n.to_string())
            .collect()
    } else {
        requested.to_vec()
    };
    let checked = |t: EffectiveTerm| -> Result<EffectiveRow> {
        let c = verify_against_magnus(sys, drive, t)?;
        Ok(EffectiveRow {
            name: t.name().into(),
            analytic_hz: c.analytic / TP,
            numeric_hz: Some(c.numeric / TP),
            error: Some(if c.absolute { c.error / TP } else { c.error }),
            error_is_absolute: c.absolute,
        })
    };
    let plain = |name: &str, value: f64| EffectiveRow {
        name: name.into(),
        analytic_hz: value / TP,
        numeric_hz: None,
        error: None,
        error_is_absolute: false,
    };
    let mut rows = Vec::new();
    for name in &names {
        rows.push(match name.as_str() {
            "ac_electron" => checked(EffectiveTerm::AcElectron)?,
            "ac_nuclear" => checked(EffectiveTerm::AcNuclear)?,
            "g_eff" => checked(EffectiveTerm::GEff)?,
            "g_eff3" => checked(EffectiveTerm::GEff3)?,
            "g_eff2" => plain("g_eff2", concatenated_effective(sys, drive)?.g_eff2),
            "nv_quadratic" => plain("nv_quadratic", nv_quadratic_coupling(sys, drive)?),
            "delta_omega_star" => plain("delta_omega_star", tune_delta_omega(sys, drive)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown effective term {other:?}; available: {}",
                    EFFECTIVE_NAMES.join(", ")
                )))
            }
        });
    }
    let report = EffectiveReport { provenance: Provenance::new(&r), valid: terms.valid, terms: rows };
    let dir = inv.out_dir(&r);
    std::fs::create_dir_all(&dir)?;
    let name = inv.name();
    let mut w = csv::Writer::from_path(dir.join(format!("{name}_effective.csv"))).map_err(csv_error)?;
    for row in &report.terms {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    write_json(&dir.join(format!("{name}_effective.json")), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub plan: Option<StepPlan>,
    pub n_trajectories: usize,
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
    /// Largest Fourier component of (2⟨I_x⟩)² below ω_n, for the coherence
    /// observable.
    pub beat_frequency_hz: Option<f64>,
    pub budget: Option<Vec<BudgetRow>>,
    pub predicted_total_t2_s: Option<f64>,
    pub budget_error: Option<String>,
}

fn fit_report(r: &Resolved, e: &EnsembleResult, plan: Option<StepPlan>) -> Result<FitReport> {
    let model = r.decay_model()?;
    let (fit, fit_error) = match fit_decay(e, model) {
        Ok(f) => (Some(f), None),
        Err(err) => (None, Some(err.to_string())),
    };
    let beat_frequency_hz = match (r.observable, e.times.last()) {
        (Observable::Coherence, Some(t_end)) if r.sys.omega_n > 0.0 => {
            let squared: Vec<f64> = e.mean_coherence_x.iter().map(|c| c * c).collect();
            dominant_frequency(&e.times, &squared, (TP * 20.0 / t_end, 0.9 * r.sys.omega_n)).ok().map(|w| w / TP)
        }
        _ => None,
    };
    let (budget, predicted, budget_error) = match compute_budget(r) {
        Ok(b) => (Some(budget_rows(&b)), Some(b.total_t2), None),
        Err(err) => (None, None, Some(err.to_string())),
    };
    Ok(FitReport {
        provenance: Provenance::new(r),
        plan,
        n_trajectories: e.n_trajectories,
        fit,
        fit_error,
        beat_frequency_hz,
        budget,
        predicted_total_t2_s: predicted,
        budget_error,
    })
}

pub struct SimulateOutput {
    pub ensemble: EnsembleResult,
    pub report: FitReport,
    pub trace_path: PathBuf,
    pub report_path: PathBuf,
}

pub fn run_simulate(inv: &Invocation) -> Result<SimulateOutput> {
    let r = inv.resolve()?;
    let settings = r.settings()?;
    let engine = Engine::new(&r.sys, &r.drive, &r.noise, &InitialState::MixedElectron, &settings)?;
    let ensemble = run_ensemble(&engine, r.trajectories, r.seed)?;
    let report = fit_report(&r, &ensemble, Some(engine.plan))?;
    let dir = inv.out_dir(&r);
    std::fs::create_dir_all(&dir)?;
    let name = inv.name();
    let trace_path = dir.join(format!("{name}_trace.csv"));
    let report_path = dir.join(format!("{name}_fit.json"));
    write_trace(&trace_path, &ensemble)?;
    write_json(&report_path, &report)?;
    Ok(SimulateOutput { ensemble, report, trace_path, report_path })
}

/// Refits a trace written by `simulate`. `trace` defaults to the file
/// `simulate` would have written for the same invocation.
pub fn run_fit(inv: &Invocation, trace: Option<&Path>) -> Result<FitReport> {
    let r = inv.resolve()?;
    let dir = inv.out_dir(&r);
    let name = inv.name();
    let path = trace.map(Path::to_path_buf).unwrap_or_else(|| dir.join(format!("{name}_trace.csv")));
    let mut e = read_trace(&path)?;
    e.n_trajectories = r.trajectories;
    let report = fit_report(&r, &e, None)?;
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join(format!("{name}_refit.json")), &report)?;
    Ok(report)
}
