//! Lab-frame Hamiltonian of the electron–nucleus pair, the electron decay
//! channels, and the decomposition of the dressed interaction picture into
//! rotating components.
//!
//! All frequencies are angular (rad/s), all times in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{
    dressed_frame, kron, nuclear_ops, re, spin_ops, transition, Operator,
};
use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub electron_levels: usize,
    pub omega_n: f64,
    pub g_par: f64,
    pub g_perp: f64,
    pub delta: f64,
    pub t1: f64,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.electron_levels != 2 && self.electron_levels != 3 {
            return Err(Error::Validation(format!(
                "electron must have 2 or 3 levels, got {}",
                self.electron_levels
            )));
        }
        if !(self.t1 > 0.0) {
            return Err(Error::Validation(format!("T1 must be positive, got {}", self.t1)));
        }
        for (name, v) in [
            ("omega_n", self.omega_n),
            ("g_par", self.g_par),
            ("g_perp", self.g_perp),
            ("delta", self.delta),
        ] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        2 * self.electron_levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondDriveMethod {
    None,
    /// Amplitude modulation of the first drive along z.
    ZModulation,
    /// Phase modulation of the first drive; identical Hamiltonian to
    /// `ZModulation` to the order kept here.
    PhaseModulation,
    /// A second tone along y.
    Bichromatic,
}

impl SecondDriveMethod {
    pub fn is_active(self) -> bool {
        self != SecondDriveMethod::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    /// First Rabi frequency; zero switches protection off.
    pub omega1: f64,
    pub omega2: f64,
    pub method: SecondDriveMethod,
    /// Static offset of the first Rabi frequency.
    pub delta2: f64,
    /// Extra Rabi amplitude on the |+1⟩↔|0⟩ transition (three levels only).
    pub delta_omega: f64,
}

impl DriveSpec {
    pub fn off() -> Self {
        DriveSpec { omega1: 0.0, omega2: 0.0, method: SecondDriveMethod::None, delta2: 0.0, delta_omega: 0.0 }
    }

    pub fn is_protected(&self) -> bool {
        self.omega1 > 0.0
    }

    pub fn has_second_drive(&self) -> bool {
        self.method.is_active() && self.omega2 > 0.0
    }

    pub fn validate(&self, sys: &SystemSpec) -> Result<()> {
        for (name, v) in [
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("delta2", self.delta2),
            ("delta_omega", self.delta_omega),
        ] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite")));
            }
        }
        if self.omega1 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::Validation("Rabi frequencies must be non-negative".into()));
        }
        if self.method.is_active() && self.omega1 == 0.0 {
            return Err(Error::Validation("a second drive needs a nonzero first drive".into()));
        }
        if self.method.is_active() && self.omega2 >= self.omega1 {
            return Err(Error::Validation(format!(
                "second Rabi frequency ({:.4e}) must be below the first ({:.4e})",
                self.omega2, self.omega1
            )));
        }
        if !self.method.is_active() && self.omega2 != 0.0 {
            return Err(Error::Validation("omega2 is set but the second-drive method is none".into()));
        }
        if sys.electron_levels == 2 && self.delta_omega != 0.0 {
            return Err(Error::Validation("delta_omega only applies to a three-level electron".into()));
        }
        Ok(())
    }
}

/// Electron-only operators entering the drive.
#[derive(Debug, Clone)]
pub struct ElectronDriveOps {
    /// Operator multiplied by the first Rabi frequency.
    pub rabi: Operator,
    /// Operator multiplied by 2Ω₂cos(Ωt); zero when there is no second drive.
    pub second: Operator,
    /// σ₊₁,₀ + h.c. for three levels, zero otherwise.
    pub mismatch: Operator,
}

pub fn electron_drive_ops(levels: usize, method: SecondDriveMethod) -> Result<ElectronDriveOps> {
    let s = spin_ops(levels)?;
    let second = match method {
        SecondDriveMethod::None => Operator::zeros(levels, levels),
        SecondDriveMethod::ZModulation | SecondDriveMethod::PhaseModulation => s.z.clone(),
        SecondDriveMethod::Bichromatic => s.y.clone(),
    };
    let mismatch = if levels == 3 {
        transition(3, 0, 1) + transition(3, 1, 0)
    } else {
        Operator::zeros(levels, levels)
    };
    Ok(ElectronDriveOps { rabi: s.x, second, mismatch })
}

/// δS_z + ω_n I_z + g∥ S_z I_z + g⊥ S_z I_x on the joint space.
pub fn build_bare_hamiltonian(sys: &SystemSpec) -> Result<Operator> {
    sys.validate()?;
    let s = spin_ops(sys.electron_levels)?;
    let n = nuclear_ops();
    Ok(kron(&s.z, &n.identity) * re(sys.delta)
        + kron(&s.identity, &n.z) * re(sys.omega_n)
        + kron(&s.z, &n.z) * re(sys.g_par)
        + kron(&s.z, &n.x) * re(sys.g_perp))
}

/// H(t) = static + cos(carrier·t)·modulated.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub static_part: Operator,
    pub modulated: Option<Operator>,
    pub carrier: f64,
}

impl Hamiltonian {
    pub fn at(&self, t: f64) -> Operator {
        match &self.modulated {
            Some(m) => &self.static_part + m * re((self.carrier * t).cos()),
            None => self.static_part.clone(),
        }
    }
}

/// Drive contribution alone: (Ω+δ₂)S_x + ΔΩ(σ₊₁,₀ + h.c.) plus the
/// modulated 2Ω₂cos(Ωt)·(S_z or S_y).
pub fn build_drive_terms(sys: &SystemSpec, drive: &DriveSpec) -> Result<Hamiltonian> {
    sys.validate()?;
    drive.validate(sys)?;
    let ops = electron_drive_ops(sys.electron_levels, drive.method)?;
    let id_n = Operator::identity(2, 2);
    let mut electron = Operator::zeros(sys.electron_levels, sys.electron_levels);
    if drive.is_protected() {
        electron += &ops.rabi * re(drive.omega1 + drive.delta2);
    }
    electron += &ops.mismatch * re(drive.delta_omega);
    let modulated = drive
        .has_second_drive()
        .then(|| kron(&(&ops.second * re(2.0 * drive.omega2)), &id_n));
    Ok(Hamiltonian { static_part: kron(&electron, &id_n), modulated, carrier: drive.omega1 })
}

pub fn build_hamiltonian(sys: &SystemSpec, drive: &DriveSpec) -> Result<Hamiltonian> {
    let mut h = build_drive_terms(sys, drive)?;
    h.static_part += build_bare_hamiltonian(sys)?;
    Ok(h)
}

/// Rate of each directed jump σ_{to,from}. The total rate out of any level,
/// (L−1)·rate, is 1/(2T1) for either electron model.
pub fn jump_rate(sys: &SystemSpec) -> f64 {
    1.0 / (2.0 * (sys.electron_levels as f64 - 1.0) * sys.t1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpChannel {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

impl JumpChannel {
    /// σ_{to,from} ⊗ 1 on the joint space.
    pub fn operator(&self, levels: usize) -> Operator {
        kron(&transition(levels, self.to, self.from), &Operator::identity(2, 2))
    }
}

/// One channel per ordered pair of distinct electron levels.
pub fn jump_channels(sys: &SystemSpec) -> Vec<JumpChannel> {
    let l = sys.electron_levels;
    let rate = jump_rate(sys);
    let mut out = Vec::with_capacity(l * (l - 1));
    for from in 0..l {
        for to in 0..l {
            if to != from {
                out.push(JumpChannel { from, to, rate });
            }
        }
    }
    out
}

/// One rotating component A·e^{iωt} of the dressed interaction-picture
/// Hamiltonian.
#[derive(Debug, Clone)]
pub struct InteractionTerm {
    pub operator: Operator,
    pub frequency: f64,
}

pub fn interaction_at(terms: &[InteractionTerm], t: f64) -> Operator {
    let d = terms.first().map_or(0, |x| x.operator.nrows());
    terms.iter().fold(Operator::zeros(d, d), |acc, x| {
        acc + &x.operator * Complex64::from_polar(1.0, x.frequency * t)
    })
}

/// Ω F_z ⊗ 1 + ω_n 1 ⊗ I_z in the dressed basis.
pub fn dressed_reference(sys: &SystemSpec, drive: &DriveSpec) -> Result<Operator> {
    let f = dressed_frame(sys.electron_levels)?;
    let n = nuclear_ops();
    Ok(kron(&f.fz, &n.identity) * re(drive.omega1)
        + kron(&Operator::identity(sys.electron_levels, sys.electron_levels), &n.z) * re(sys.omega_n))
}

/// Moves the lab Hamiltonian into the dressed basis, removes the reference
/// Ω F_z + ω_n I_z, and splits what remains into components rotating at
/// fixed frequencies. Components with equal frequency are merged.
pub fn to_dressed_interaction(sys: &SystemSpec, drive: &DriveSpec) -> Result<Vec<InteractionTerm>> {
    if !drive.is_protected() {
        return Err(Error::Validation("the dressed frame needs a nonzero first drive".into()));
    }
    let h = build_hamiltonian(sys, drive)?;
    let frame = dressed_frame(sys.electron_levels)?;
    let w = frame.joint();
    let to_dressed = |a: &Operator| &w * a * w.adjoint();

    let mut sources = vec![(to_dressed(&h.static_part) - dressed_reference(sys, drive)?, 0.0)];
    if let Some(m) = &h.modulated {
        let half = to_dressed(m) * re(0.5);
        sources.push((half.clone(), h.carrier));
        sources.push((half, -h.carrier));
    }

    let fz_diag: Vec<f64> = frame.fz.diagonal().iter().map(|z| z.re).collect();
    let m_n = [0.5, -0.5];
    let energy = |i: usize| drive.omega1 * fz_diag[i / 2] + sys.omega_n * m_n[i % 2];

    let d = sys.dim();
    let scale = drive.omega1.abs().max(sys.omega_n.abs()).max(1.0);
    let mut terms: Vec<InteractionTerm> = Vec::new();
    for (op, nu) in &sources {
        for i in 0..d {
            for j in 0..d {
                let z = op[(i, j)];
                if z.norm() == 0.0 {
                    continue;
                }
                let freq = energy(i) - energy(j) + nu;
                let slot = terms.iter().position(|t| (t.frequency - freq).abs() <= 1e-9 * scale);
                let idx = match slot {
                    Some(k) => k,
                    None => {
                        terms.push(InteractionTerm { operator: Operator::zeros(d, d), frequency: freq });
                        terms.len() - 1
                    }
                };
                terms[idx].operator[(i, j)] += z;
            }
        }
    }
    let tiny = 1e-12 * terms.iter().map(|t| crate::operators::max_abs(&t.operator)).fold(0.0, f64::max);
    terms.retain(|t| crate::operators::max_abs(&t.operator) > tiny);
    terms.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    Ok(terms)
}

/// The lab Hamiltonian moved into the dressed interaction picture by direct
/// conjugation at time t: U₀†(V H(t) V† − H₀)U₀ with U₀ = exp(−iH₀t).
pub fn dressed_interaction_direct(sys: &SystemSpec, drive: &DriveSpec, t: f64) -> Result<Operator> {
    let h = build_hamiltonian(sys, drive)?;
    let w = dressed_frame(sys.electron_levels)?.joint();
    let h0 = dressed_reference(sys, drive)?;
    let u0 = crate::operators::propagator(&h0, t)?;
    Ok(u0.adjoint() * (&w * h.at(t) * w.adjoint() - h0) * u0)
}
