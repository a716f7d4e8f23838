//! Closed-form effective couplings of the dressed system and a numeric
//! cross-check through the time-independent Magnus expansion.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{interaction_at, to_dressed_interaction, DriveSpec, InteractionTerm, SecondDriveMethod, SystemSpec};
use crate::operators::{
    common_base_frequency, dressed_frame, kron, nuclear_ops, project, time_independent_magnus, MagnusGrid, Operator,
};

/// Ratio Ω must exceed every bare frequency by for the second-order
/// expressions to be flagged valid.
pub const VALIDITY_RATIO: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderTerms {
    /// Coefficient of F_z.
    pub ac_electron: f64,
    /// Coefficient of I_z.
    pub ac_nuclear: f64,
    /// Coefficient of F_z I_z.
    pub g_eff: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DressedAxis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcatenatedTerm {
    pub g_eff2: f64,
    /// Dressed-frame axis F_x or F_y that multiplies I_z in the residual.
    pub axis: DressedAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTerms {
    pub ac_electron: f64,
    pub ac_nuclear: f64,
    pub g_eff: f64,
    pub g_eff2: Option<f64>,
    pub g_eff3: Option<f64>,
    pub nv_quadratic: Option<f64>,
    /// Perturbative validity of the expressions at these parameters.
    pub valid: bool,
}

fn require_drive(drive: &DriveSpec) -> Result<()> {
    if !drive.is_protected() {
        return Err(Error::Validation("effective terms need a nonzero first drive".into()));
    }
    Ok(())
}

/// 1/(Ω−ωₙ) − 1/(Ω+ωₙ) and 1/(Ω−ωₙ) + 1/(Ω+ωₙ).
fn resonance_pair(sys: &SystemSpec, drive: &DriveSpec) -> Result<(f64, f64)> {
    let (w, n) = (drive.omega1, sys.omega_n);
    if (w - n).abs() <= 1e-12 * w.abs().max(n.abs()) || (w + n).abs() <= 1e-12 * w.abs().max(n.abs()) {
        return Err(Error::Validation(format!(
            "Rabi frequency {w:.6e} rad/s is resonant with the nuclear Larmor frequency"
        )));
    }
    Ok((1.0 / (w - n) - 1.0 / (w + n), 1.0 / (w - n) + 1.0 / (w + n)))
}

pub fn second_order_effective(sys: &SystemSpec, drive: &DriveSpec) -> Result<SecondOrderTerms> {
    sys.validate()?;
    require_drive(drive)?;
    let (diff, sum) = resonance_pair(sys, drive)?;
    let w = drive.omega1;
    let gp2 = sys.g_perp * sys.g_perp;
    let g_eff = sys.g_par * sys.delta / w;
    let largest = [sys.omega_n, sys.delta, sys.g_par, sys.g_perp].iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut valid = w.abs() >= VALIDITY_RATIO * largest;
    if drive.has_second_drive() {
        valid &= drive.omega2.abs() >= VALIDITY_RATIO * g_eff.abs();
    }
    Ok(SecondOrderTerms {
        ac_electron: (sys.g_par * sys.g_par + sys.delta * sys.delta) / (2.0 * w) + gp2 / 16.0 * sum,
        ac_nuclear: gp2 / 16.0 * diff,
        g_eff,
        valid,
    })
}

/// Axis along which the second drive acts in the first dressed frame.
pub fn second_drive_axis(method: SecondDriveMethod) -> Option<DressedAxis> {
    match method {
        SecondDriveMethod::None => None,
        SecondDriveMethod::ZModulation | SecondDriveMethod::PhaseModulation => Some(DressedAxis::X),
        SecondDriveMethod::Bichromatic => Some(DressedAxis::Y),
    }
}

/// Residual g_eff·δ₂/Ω₂ left after the second drive.
pub fn concatenated_effective(sys: &SystemSpec, drive: &DriveSpec) -> Result<ConcatenatedTerm> {
    let axis = second_drive_axis(drive.method)
        .ok_or_else(|| Error::Config("concatenated coupling needs a second drive method".into()))?;
    if drive.omega2 == 0.0 {
        return Err(Error::Config("concatenated coupling needs a nonzero second Rabi frequency".into()));
    }
    let g_eff = second_order_effective(sys, drive)?.g_eff;
    Ok(ConcatenatedTerm { g_eff2: g_eff * drive.delta2 / drive.omega2, axis })
}

/// Third-order coupling g∥Ω₂δ/(2Ω²) along the second-drive axis times I_z.
pub fn third_order_effective(sys: &SystemSpec, drive: &DriveSpec) -> Result<f64> {
    sys.validate()?;
    require_drive(drive)?;
    if !drive.has_second_drive() {
        return Err(Error::Config("third-order coupling needs an active second drive".into()));
    }
    Ok(sys.g_par * drive.omega2 * sys.delta / (2.0 * drive.omega1 * drive.omega1))
}

fn require_three_levels(sys: &SystemSpec) -> Result<()> {
    if sys.electron_levels != 3 {
        return Err(Error::Validation("the quadratic F_z² I_z coupling only exists for a three-level electron".into()));
    }
    Ok(())
}

/// Coefficient of F_z² I_z: −[(g⊥²/8)(1/(Ω−ωₙ) − 1/(Ω+ωₙ)) − 3g∥ΔΩ/(2√2 Ω)].
pub fn nv_quadratic_coupling(sys: &SystemSpec, drive: &DriveSpec) -> Result<f64> {
    require_three_levels(sys)?;
    sys.validate()?;
    require_drive(drive)?;
    let (diff, _) = resonance_pair(sys, drive)?;
    let transverse = sys.g_perp * sys.g_perp / 8.0 * diff;
    let mismatch = 3.0 * sys.g_par * drive.delta_omega / (2.0 * SQRT_2 * drive.omega1);
    Ok(-(transverse - mismatch))
}

/// The Rabi mismatch ΔΩ that cancels the quadratic coupling.
pub fn tune_delta_omega(sys: &SystemSpec, drive: &DriveSpec) -> Result<f64> {
    require_three_levels(sys)?;
    sys.validate()?;
    require_drive(drive)?;
    if sys.g_par == 0.0 {
        return Err(Error::Validation("no mismatch cancels the quadratic coupling when g∥ = 0".into()));
    }
    let (diff, _) = resonance_pair(sys, drive)?;
    let transverse = sys.g_perp * sys.g_perp / 8.0 * diff;
    Ok(2.0 * SQRT_2 * drive.omega1 / (3.0 * sys.g_par) * transverse)
}

pub fn effective_terms(sys: &SystemSpec, drive: &DriveSpec) -> Result<EffectiveTerms> {
    let second = second_order_effective(sys, drive)?;
    let (g_eff2, g_eff3) = if drive.has_second_drive() {
        (Some(concatenated_effective(sys, drive)?.g_eff2), Some(third_order_effective(sys, drive)?))
    } else {
        (None, None)
    };
    let nv_quadratic = if sys.electron_levels == 3 { Some(nv_quadratic_coupling(sys, drive)?) } else { None };
    Ok(EffectiveTerms {
        ac_electron: second.ac_electron,
        ac_nuclear: second.ac_nuclear,
        g_eff: second.g_eff,
        g_eff2,
        g_eff3,
        nv_quadratic,
        valid: second.valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectiveTerm {
    AcElectron,
    AcNuclear,
    GEff,
    GEff3,
}

impl EffectiveTerm {
    pub const ALL: [EffectiveTerm; 4] =
        [EffectiveTerm::AcElectron, EffectiveTerm::AcNuclear, EffectiveTerm::GEff, EffectiveTerm::GEff3];

    pub fn name(self) -> &'static str {
        match self {
            EffectiveTerm::AcElectron => "ac_electron",
            EffectiveTerm::AcNuclear => "ac_nuclear",
            EffectiveTerm::GEff => "g_eff",
            EffectiveTerm::GEff3 => "g_eff3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnusCheck {
    pub term: EffectiveTerm,
    pub analytic: f64,
    pub numeric: f64,
    /// |numeric − analytic| / |analytic|, or the absolute difference when the
    /// analytic value is zero.
    pub error: f64,
    pub absolute: bool,
}

/// Samples per period of the fastest rotating component in the Magnus
/// quadrature.
const MAGNUS_OVERSAMPLING: usize = 2;

/// Time-independent second- and third-order Magnus terms of a list of
/// rotating components with commensurate frequencies.
pub fn averaged_magnus(terms: &[InteractionTerm]) -> Result<(Operator, Operator)> {
    let Some(first) = terms.first() else {
        return Err(Error::Validation("no rotating terms to average".into()));
    };
    let d = first.operator.nrows();
    let freqs: Vec<f64> = terms.iter().map(|t| t.frequency).collect();
    let Some((base, kmax)) = common_base_frequency(&freqs) else {
        // Only static terms: nothing rotates, so every commutator averages
        // to zero over any window.
        if freqs.iter().all(|w| *w == 0.0) {
            return Ok((Operator::zeros(d, d), Operator::zeros(d, d)));
        }
        return Err(Error::Numerical("rotating frequencies are not commensurate".into()));
    };
    let window = 2.0 * std::f64::consts::PI / base;
    let max_frequency = freqs.iter().map(|w| w.abs()).fold(0.0, f64::max);
    let mut grid = MagnusGrid { window, steps: 0, max_frequency };
    grid.steps = MAGNUS_OVERSAMPLING * grid.required_steps();
    grid.steps += grid.steps % 2;
    let h = |t: f64| interaction_at(terms, t);
    time_independent_magnus(&h, &grid, 3 * kmax as usize + 1)
}

/// Compares one closed-form term with the coefficient extracted from the
/// numerically averaged dressed Hamiltonian. Second-order terms use the first
/// drive alone; the third-order term uses both drives and leaves out static
/// components, which the second drive frame absorbs exactly.
pub fn verify_against_magnus(sys: &SystemSpec, drive: &DriveSpec, term: EffectiveTerm) -> Result<MagnusCheck> {
    let frame = dressed_frame(sys.electron_levels)?;
    let n = nuclear_ops();
    let id_e = Operator::identity(sys.electron_levels, sys.electron_levels);
    let (analytic, numeric) = match term {
        EffectiveTerm::AcElectron | EffectiveTerm::AcNuclear | EffectiveTerm::GEff => {
            let first_only =
                DriveSpec { omega2: 0.0, method: SecondDriveMethod::None, delta2: 0.0, ..*drive };
            let second = second_order_effective(sys, &first_only)?;
            let terms = to_dressed_interaction(sys, &first_only)?;
            let h2 = if terms.is_empty() {
                Operator::zeros(sys.dim(), sys.dim())
            } else {
                averaged_magnus(&terms)?.0
            };
            let (analytic, basis) = match term {
                EffectiveTerm::AcElectron => (second.ac_electron, kron(&frame.fz, &n.identity)),
                EffectiveTerm::AcNuclear => (second.ac_nuclear, kron(&id_e, &n.z)),
                _ => (second.g_eff, kron(&frame.fz, &n.z)),
            };
            (analytic, project(&h2, &basis).re)
        }
        EffectiveTerm::GEff3 => {
            let analytic = third_order_effective(sys, drive)?;
            let mut terms = to_dressed_interaction(sys, drive)?;
            terms.retain(|t| t.frequency != 0.0);
            let h3 = if terms.is_empty() {
                Operator::zeros(sys.dim(), sys.dim())
            } else {
                averaged_magnus(&terms)?.1
            };
            let axis_op = match second_drive_axis(drive.method) {
                Some(DressedAxis::Y) => &frame.fy,
                _ => &frame.fx,
            };
            (analytic, project(&h3, &kron(axis_op, &n.z)).re)
        }
    };
    let diff = (numeric - analytic).abs();
    let absolute = analytic == 0.0;
    let error = if absolute { diff } else { diff / analytic.abs() };
    Ok(MagnusCheck { term, analytic, numeric, error, absolute })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const TP: f64 = 2.0 * PI;

    fn fig3(levels: usize) -> (SystemSpec, DriveSpec) {
        let sys = SystemSpec {
            electron_levels: levels,
            omega_n: TP * 100e3,
            g_par: TP * 40e3,
            g_perp: TP * 20e3,
            delta: TP * 100e3,
            t1: 1.25e-3,
        };
        let omega1 = TP * 4e6;
        let drive = DriveSpec {
            omega1,
            omega2: omega1 / 17.0,
            method: SecondDriveMethod::ZModulation,
            delta2: 0.0,
            delta_omega: 0.0,
        };
        (sys, drive)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn second_order_examples() {
        let (sys, drive) = fig3(2);
        let s = second_order_effective(&sys, &drive).unwrap();
        assert!(close(s.g_eff, TP * 1e3, 1e-12));
        assert!(s.valid);
        let zero_delta = SystemSpec { delta: 0.0, ..sys };
        assert_eq!(second_order_effective(&zero_delta, &drive).unwrap().g_eff, 0.0);
        let no_perp = SystemSpec { g_perp: 0.0, ..sys };
        assert_eq!(second_order_effective(&no_perp, &drive).unwrap().ac_nuclear, 0.0);
        // (g∥²+δ²)/(2Ω) + (g⊥²/16)·2Ω/(Ω²−ωₙ²), evaluated in Hz.
        let (g, d, p, w, n) = (40e3f64, 100e3f64, 20e3f64, 4e6f64, 100e3f64);
        let expected = (g * g + d * d) / (2.0 * w) + p * p / 16.0 * 2.0 * w / (w * w - n * n);
        assert!(close(s.ac_electron, TP * expected, 1e-12));
        let expected = p * p / 16.0 * 2.0 * n / (w * w - n * n);
        assert!(close(s.ac_nuclear, TP * expected, 1e-12));
    }

    #[test]
    fn validity_gate_and_resonance() {
        let (sys, drive) = fig3(2);
        let slow = DriveSpec { omega1: 4.0 * sys.delta, omega2: sys.delta / 2.0, ..drive };
        let s = second_order_effective(&sys, &slow).unwrap();
        assert!(!s.valid && s.g_eff.is_finite());
        let resonant = DriveSpec { omega1: sys.omega_n, omega2: sys.omega_n / 17.0, ..drive };
        assert!(matches!(second_order_effective(&sys, &resonant), Err(Error::Validation(_))));
    }

    #[test]
    fn concatenated_examples() {
        let (sys, mut drive) = fig3(2);
        assert_eq!(concatenated_effective(&sys, &drive).unwrap().g_eff2, 0.0);
        drive.delta2 = TP * 20e3;
        let c = concatenated_effective(&sys, &drive).unwrap();
        assert!(close(c.g_eff2, TP * 85.0, 1e-3), "{}", c.g_eff2 / TP);
        assert_eq!(c.axis, DressedAxis::X);
        let doubled = DriveSpec { omega2: 2.0 * drive.omega2, ..drive };
        assert!(close(concatenated_effective(&sys, &doubled).unwrap().g_eff2, c.g_eff2 / 2.0, 1e-12));
        let bichromatic = DriveSpec { method: SecondDriveMethod::Bichromatic, ..drive };
        assert_eq!(concatenated_effective(&sys, &bichromatic).unwrap().axis, DressedAxis::Y);
        let no_second = DriveSpec { omega2: 0.0, ..drive };
        assert!(matches!(concatenated_effective(&sys, &no_second), Err(Error::Config(_))));
    }

    #[test]
    fn third_order_examples() {
        let (sys, drive) = fig3(2);
        let g3 = third_order_effective(&sys, &drive).unwrap();
        assert!(close(g3, TP * 29.41, 1e-3), "{}", g3 / TP);
        let zero_delta = SystemSpec { delta: 0.0, ..sys };
        assert_eq!(third_order_effective(&zero_delta, &drive).unwrap(), 0.0);
    }

    #[test]
    fn nv_quadratic_examples() {
        let (sys, drive) = fig3(3);
        let q = nv_quadratic_coupling(&sys, &drive).unwrap();
        assert!(close(q, -TP * 0.6254, 1e-3), "{}", q / TP);
        let plain = SystemSpec { g_perp: 0.0, ..sys };
        assert_eq!(nv_quadratic_coupling(&plain, &drive).unwrap(), 0.0);
        assert_eq!(tune_delta_omega(&plain, &drive).unwrap(), 0.0);
        let star = tune_delta_omega(&sys, &drive).unwrap();
        assert!(close(star, TP * 58.96, 1e-3), "{}", star / TP);
        let tuned = DriveSpec { delta_omega: star, ..drive };
        let residual = nv_quadratic_coupling(&sys, &tuned).unwrap();
        assert!(residual.abs() <= 1e-12 * q.abs(), "{residual}");
        let (two, _) = fig3(2);
        assert!(matches!(nv_quadratic_coupling(&two, &drive), Err(Error::Validation(_))));
        let no_par = SystemSpec { g_par: 0.0, ..sys };
        assert!(tune_delta_omega(&no_par, &drive).is_err());
    }

    #[test]
    fn magnus_reproduces_couplings() {
        let (sys, drive) = fig3(2);
        let g = verify_against_magnus(&sys, &drive, EffectiveTerm::GEff).unwrap();
        assert!(g.error <= 0.05, "{g:?}");
        let g3 = verify_against_magnus(&sys, &drive, EffectiveTerm::GEff3).unwrap();
        assert!(g3.error <= 0.05, "{g3:?}");
        let bichromatic = DriveSpec { method: SecondDriveMethod::Bichromatic, ..drive };
        let b3 = verify_against_magnus(&sys, &bichromatic, EffectiveTerm::GEff3).unwrap();
        assert!(b3.error <= 0.05, "{b3:?}");
    }

    #[test]
    fn magnus_vanishes_without_couplings() {
        let sys = SystemSpec { electron_levels: 2, omega_n: TP * 100e3, g_par: 0.0, g_perp: 0.0, delta: 0.0, t1: 1e-3 };
        let (_, drive) = fig3(2);
        for term in EffectiveTerm::ALL {
            let c = verify_against_magnus(&sys, &drive, term).unwrap();
            assert!(c.absolute);
            assert!(c.numeric.abs() <= 1e-12 * drive.omega1, "{c:?}");
        }
    }

    #[test]
    fn ratio_and_hierarchy() {
        let (sys, mut drive) = fig3(2);
        drive.delta2 = drive.omega2 * 0.3;
        let t = effective_terms(&sys, &drive).unwrap();
        let ratio = t.g_eff3.unwrap() / t.g_eff;
        assert!(close(ratio, drive.omega2 / (2.0 * drive.omega1), 1e-12));
        assert!(t.g_eff2.unwrap().abs() <= t.g_eff.abs());
        assert!(t.nv_quadratic.is_none());
    }

    proptest! {
        #[test]
        fn scaling_covariance(idx in 0usize..3, levels in 2usize..4, d2 in -0.5f64..0.5, dw in -100.0f64..100.0) {
            let lambda = [0.5, 2.0, 10.0][idx];
            let (sys, mut drive) = fig3(levels);
            drive.delta2 = d2 * drive.omega2;
            if levels == 3 {
                drive.delta_omega = TP * dw;
            }
            let a = effective_terms(&sys, &drive).unwrap();
            let sys_s = SystemSpec {
                omega_n: sys.omega_n * lambda,
                g_par: sys.g_par * lambda,
                g_perp: sys.g_perp * lambda,
                delta: sys.delta * lambda,
                t1: sys.t1 / lambda,
                ..sys
            };
            let drive_s = DriveSpec {
                omega1: drive.omega1 * lambda,
                omega2: drive.omega2 * lambda,
                delta2: drive.delta2 * lambda,
                delta_omega: drive.delta_omega * lambda,
                ..drive
            };
            let b = effective_terms(&sys_s, &drive_s).unwrap();
            let pairs = [
                (a.ac_electron, b.ac_electron),
                (a.ac_nuclear, b.ac_nuclear),
                (a.g_eff, b.g_eff),
                (a.g_eff2.unwrap(), b.g_eff2.unwrap()),
                (a.g_eff3.unwrap(), b.g_eff3.unwrap()),
                (a.nv_quadratic.unwrap_or(0.0), b.nv_quadratic.unwrap_or(0.0)),
            ];
            for (x, y) in pairs {
                prop_assert!((y - lambda * x).abs() <= 1e-9 * (lambda * x).abs().max(1e-9));
            }
            prop_assert_eq!(a.valid, b.valid);
        }

        #[test]
        fn hierarchy_holds(r in -1.0f64..1.0, o2 in 0.01f64..0.3) {
            let (sys, mut drive) = fig3(2);
            drive.omega2 = drive.omega1 * o2;
            drive.delta2 = r * drive.omega2;
            let t = effective_terms(&sys, &drive).unwrap();
            prop_assert!(t.g_eff2.unwrap().abs() <= t.g_eff.abs() * (1.0 + 1e-12));
            prop_assert!((t.g_eff3.unwrap() / t.g_eff - o2 / 2.0).abs() <= 1e-12);
        }
    }
}
