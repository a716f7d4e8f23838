//! Spin matrices, tensor products, exact propagators, the dressed-state basis
//! change and numeric Magnus quadrature.
//!
//! Joint operators always put the electron first: `kron(electron, nucleus)`,
//! so the joint index is `2 * electron_level + nuclear_level`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::linalg::SymmetricEigen;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Operator = DMatrix<Complex64>;
pub type StateVector = DVector<Complex64>;

pub const IM: Complex64 = Complex64::new(0.0, 1.0);

#[inline]
pub fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// Cartesian and ladder spin operators for a single spin.
#[derive(Debug, Clone)]
pub struct SpinOps {
    pub x: Operator,
    pub y: Operator,
    pub z: Operator,
    pub plus: Operator,
    pub minus: Operator,
    pub identity: Operator,
}

/// Spin-1/2 operators (σ/2) for `levels == 2`, spin-1 operators in the basis
/// (|+1⟩, |0⟩, |−1⟩) for `levels == 3`.
pub fn spin_ops(levels: usize) -> Result<SpinOps> {
    let (x, y, z) = match levels {
        2 => (
            Operator::from_row_slice(2, 2, &[re(0.0), re(0.5), re(0.5), re(0.0)]),
            Operator::from_row_slice(2, 2, &[re(0.0), -0.5 * IM, 0.5 * IM, re(0.0)]),
            Operator::from_diagonal(&StateVector::from_vec(vec![re(0.5), re(-0.5)])),
        ),
        3 => {
            let s = FRAC_1_SQRT_2;
            let z0 = re(0.0);
            (
                Operator::from_row_slice(3, 3, &[z0, re(s), z0, re(s), z0, re(s), z0, re(s), z0]),
                Operator::from_row_slice(
                    3,
                    3,
                    &[z0, -s * IM, z0, s * IM, z0, -s * IM, z0, s * IM, z0],
                ),
                Operator::from_diagonal(&StateVector::from_vec(vec![re(1.0), re(0.0), re(-1.0)])),
            )
        }
        other => {
            return Err(Error::Validation(format!(
                "electron must have 2 or 3 levels, got {other}"
            )))
        }
    };
    let plus = &x + &y * IM;
    let minus = &x - &y * IM;
    Ok(SpinOps { identity: Operator::identity(levels, levels), x, y, z, plus, minus })
}

pub fn nuclear_ops() -> SpinOps {
    spin_ops(2).expect("two levels are always valid")
}

pub fn kron(a: &Operator, b: &Operator) -> Operator {
    a.kronecker(b)
}

/// |to⟩⟨from| on an `levels`-dimensional space.
pub fn transition(levels: usize, to: usize, from: usize) -> Operator {
    let mut m = Operator::zeros(levels, levels);
    m[(to, from)] = re(1.0);
    m
}

pub fn commutator(a: &Operator, b: &Operator) -> Operator {
    a * b - b * a
}

pub fn max_abs(a: &Operator) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry of |A − A†|.
pub fn hermiticity_error(a: &Operator) -> f64 {
    max_abs(&(a - a.adjoint()))
}

/// Coefficient of `a` along `basis` in the Hilbert–Schmidt inner product.
pub fn project(a: &Operator, basis: &Operator) -> Complex64 {
    let num = (basis.adjoint() * a).trace();
    let den = (basis.adjoint() * basis).trace();
    num / den
}

fn check_hermitian(h: &Operator) -> Result<()> {
    if !h.is_square() {
        return Err(Error::Validation(format!("operator is {}x{}, not square", h.nrows(), h.ncols())));
    }
    let dev = hermiticity_error(h);
    if dev > 1e-9 * (1.0 + max_abs(h)) {
        return Err(Error::NotHermitian(dev));
    }
    Ok(())
}

/// Eigenvalues (ascending order not guaranteed) and eigenvectors (columns)
/// of a Hermitian matrix.
pub fn hermitian_eigen(h: &Operator) -> Result<(Vec<f64>, Operator)> {
    check_hermitian(h)?;
    let sym = (h + h.adjoint()) * re(0.5);
    let eig = SymmetricEigen::new(sym);
    Ok((eig.eigenvalues.iter().copied().collect(), eig.eigenvectors))
}

/// exp(−i H dt) from the eigendecomposition of H.
pub fn propagator(h: &Operator, dt: f64) -> Result<Operator> {
    let (vals, vecs) = hermitian_eigen(h)?;
    let n = vals.len();
    let mut scaled = vecs.clone();
    for (j, lam) in vals.iter().enumerate() {
        let phase = Complex64::from_polar(1.0, -lam * dt);
        for i in 0..n {
            scaled[(i, j)] *= phase;
        }
    }
    Ok(scaled * vecs.adjoint())
}

/// Unitary basis change from the bare electron basis to the eigenbasis of the
/// drive term, together with the dressed spin operators.
///
/// The dressed basis is ordered (|+⟩, |−⟩) for two levels and (|u⟩, |D⟩, |d⟩)
/// for three, so that `fz` is diagonal with descending eigenvalues.
#[derive(Debug, Clone)]
pub struct DressedFrame {
    pub levels: usize,
    /// Rows index dressed states, columns index bare states.
    pub v: Operator,
    pub fx: Operator,
    pub fy: Operator,
    pub fz: Operator,
    pub f_plus: Operator,
    /// √2(|u⟩⟨D| − |D⟩⟨d|); only defined for three levels.
    pub f_tilde_plus: Option<Operator>,
}

pub fn dressed_frame(levels: usize) -> Result<DressedFrame> {
    let f = spin_ops(levels)?;
    let h = 0.5;
    let s = FRAC_1_SQRT_2;
    let (v, f_tilde_plus) = match levels {
        2 => (
            Operator::from_row_slice(2, 2, &[re(s), re(s), re(-s), re(s)]),
            None,
        ),
        _ => {
            let v = Operator::from_row_slice(
                3,
                3,
                &[re(h), re(s), re(h), re(-s), re(0.0), re(s), re(h), re(-s), re(h)],
            );
            let mut ft = Operator::zeros(3, 3);
            ft[(0, 1)] = re(2f64.sqrt());
            ft[(1, 2)] = re(-(2f64.sqrt()));
            (v, Some(ft))
        }
    };
    Ok(DressedFrame {
        levels,
        v,
        fx: f.x,
        fy: f.y,
        fz: f.z,
        f_plus: f.plus,
        f_tilde_plus,
    })
}

impl DressedFrame {
    /// V ⊗ 1 on the joint electron–nucleus space.
    pub fn joint(&self) -> Operator {
        kron(&self.v, &Operator::identity(2, 2))
    }
}

/// Sampling grid for Magnus quadrature over a window of length `window`.
#[derive(Debug, Clone, Copy)]
pub struct MagnusGrid {
    pub window: f64,
    pub steps: usize,
    /// Fastest angular frequency present in H(t); sets the resolution bound.
    pub max_frequency: f64,
}

impl MagnusGrid {
    /// At least 20 samples per period of the fastest component.
    pub fn required_steps(&self) -> usize {
        let periods = self.window * self.max_frequency.abs() / (2.0 * PI);
        ((20.0 * periods).ceil() as usize).max(2)
    }

    fn check(&self) -> Result<()> {
        if !(self.window > 0.0) || !self.window.is_finite() {
            return Err(Error::Validation(format!("Magnus window must be positive, got {}", self.window)));
        }
        let required = self.required_steps();
        if self.steps < required {
            return Err(Error::Resolution { required, given: self.steps });
        }
        Ok(())
    }
}

/// Running integrals ∫₀^{t_k} f at every node of a uniform grid: composite
/// Simpson on even nodes, Simpson plus a closing 3/8 panel on odd nodes.
fn cumulative(f: &[Operator], h: f64) -> Vec<Operator> {
    let n = f.len();
    let zero = Operator::zeros(f[0].nrows(), f[0].ncols());
    let mut c = vec![zero; n];
    if n > 1 {
        c[1] = (&f[0] + &f[1]) * re(h / 2.0);
    }
    for i in 2..n {
        c[i] = if i % 2 == 0 {
            &c[i - 2] + (&f[i - 2] + &f[i - 1] * re(4.0) + &f[i]) * re(h / 3.0)
        } else {
            &c[i - 3]
                + (&f[i - 3] + (&f[i - 2] + &f[i - 1]) * re(3.0) + &f[i]) * re(3.0 * h / 8.0)
        };
    }
    c
}

fn integral(f: &[Operator], h: f64) -> Operator {
    cumulative(f, h).pop().expect("non-empty grid")
}

struct MagnusTerms {
    second: Operator,
    third: Operator,
}

fn magnus_window(h: &dyn Fn(f64) -> Operator, t0: f64, window: f64, steps: usize) -> MagnusTerms {
    let dt = window / steps as f64;
    let hs: Vec<Operator> = (0..=steps).map(|k| h(t0 + k as f64 * dt)).collect();
    let s = cumulative(&hs, dt);
    let g: Vec<Operator> = hs.iter().zip(&s).map(|(hk, sk)| commutator(hk, sk)).collect();
    let y = cumulative(&g, dt);
    let second = y[steps].clone() * (-IM / (2.0 * window));

    // ∫dt1 [H1, ∫dt2 [H2, S2]]
    let a: Vec<Operator> = hs.iter().zip(&y).map(|(hk, yk)| commutator(hk, yk)).collect();
    // ∫dt2 [S2, [H2, S(T) − S2]], the second nested term with the order of
    // integration swapped.
    let s_end = &s[steps];
    let b: Vec<Operator> = hs
        .iter()
        .zip(&s)
        .map(|(hk, sk)| commutator(sk, &commutator(hk, &(s_end - sk))))
        .collect();
    let third = (integral(&a, dt) + integral(&b, dt)) * re(-1.0 / (6.0 * window));
    MagnusTerms { second, third }
}

/// Second-order Magnus term, divided by the window length: −(i/2t)∫∫[H(t1), H(t2)].
pub fn magnus_second_order_numeric(h: &dyn Fn(f64) -> Operator, grid: &MagnusGrid) -> Result<Operator> {
    grid.check()?;
    Ok(magnus_window(h, 0.0, grid.window, grid.steps).second)
}

/// Third-order Magnus term over [0, t], divided by t:
/// −(1/6t)∫∫∫([H1,[H2,H3]] + [H3,[H2,H1]]) on t ≥ t1 ≥ t2 ≥ t3 ≥ 0.
pub fn magnus_third_order_numeric(h: &dyn Fn(f64) -> Operator, grid: &MagnusGrid) -> Result<Operator> {
    grid.check()?;
    Ok(magnus_window(h, 0.0, grid.window, grid.steps).third)
}

/// Second- and third-order terms with the window start averaged over
/// `offsets` equally spaced points of one period. For H(t) periodic in
/// `grid.window`, this keeps exactly the contributions whose total frequency
/// vanishes (the time-independent effective Hamiltonian), provided `offsets`
/// exceeds three times the largest harmonic index present.
pub fn time_independent_magnus(
    h: &dyn Fn(f64) -> Operator,
    grid: &MagnusGrid,
    offsets: usize,
) -> Result<(Operator, Operator)> {
    grid.check()?;
    if offsets == 0 {
        return Err(Error::Validation("need at least one window offset".into()));
    }
    let d = h(0.0).nrows();
    let mut second = Operator::zeros(d, d);
    let mut third = Operator::zeros(d, d);
    for m in 0..offsets {
        let t0 = grid.window * m as f64 / offsets as f64;
        let terms = magnus_window(h, t0, grid.window, grid.steps);
        second += terms.second;
        third += terms.third;
    }
    let w = re(1.0 / offsets as f64);
    Ok((second * w, third * w))
}

/// Smallest ω₀ > 0 such that every frequency is an integer multiple of it,
/// with the largest harmonic index. Returns `None` for incommensurate sets.
pub fn common_base_frequency(freqs: &[f64]) -> Option<(f64, i64)> {
    let nonzero: Vec<f64> = freqs.iter().map(|w| w.abs()).filter(|w| *w > 0.0).collect();
    let wmin = nonzero.iter().copied().fold(f64::INFINITY, f64::min);
    if !wmin.is_finite() {
        return None;
    }
    let mut denom: i64 = 1;
    for w in &nonzero {
        let r = w / wmin;
        let q = (1..=1000i64).find(|q| {
            let x = r * (*q as f64);
            (x - x.round()).abs() < 1e-9 * x.max(1.0)
        })?;
        denom = lcm(denom, q);
        if denom > 1_000_000 {
            return None;
        }
    }
    let base = wmin / denom as f64;
    let kmax = nonzero.iter().map(|w| (w / base).round() as i64).max().unwrap_or(0);
    Some((base, kmax))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: i64, b: i64) -> i64 {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Operator, b: &Operator, tol: f64) -> bool {
        max_abs(&(a - b)) <= tol
    }

    #[test]
    fn spin_commutation_relations() {
        for levels in [2, 3] {
            let s = spin_ops(levels).unwrap();
            assert!(close(&commutator(&s.x, &s.y), &(&s.z * IM), 1e-12));
            assert!(close(&commutator(&s.y, &s.z), &(&s.x * IM), 1e-12));
            assert!(close(&commutator(&s.z, &s.x), &(&s.y * IM), 1e-12));
            let casimir = &s.x * &s.x + &s.y * &s.y + &s.z * &s.z;
            let j = (levels as f64 - 1.0) / 2.0;
            assert!(close(&casimir, &(Operator::identity(levels, levels) * re(j * (j + 1.0))), 1e-12));
        }
        assert!(spin_ops(4).is_err());
    }

    #[test]
    fn propagator_of_sz() {
        let s = spin_ops(2).unwrap();
        let u = propagator(&s.z, PI).unwrap();
        let expected = Operator::from_diagonal(&StateVector::from_vec(vec![-IM, IM]));
        assert!(close(&u, &expected, 1e-12));
    }

    #[test]
    fn propagator_rejects_non_hermitian() {
        let s = spin_ops(2).unwrap();
        assert!(matches!(propagator(&s.plus, 1.0), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn dressed_frame_maps_spin_axes() {
        for levels in [2, 3] {
            let f = dressed_frame(levels).unwrap();
            let s = spin_ops(levels).unwrap();
            let conj = |a: &Operator| &f.v * a * f.v.adjoint();
            assert!(close(&(&f.v * f.v.adjoint()), &Operator::identity(levels, levels), 1e-12));
            assert!(close(&conj(&s.x), &f.fz, 1e-12));
            assert!(close(&conj(&s.z), &(-&f.fx), 1e-12));
            assert!(close(&conj(&s.y), &f.fy, 1e-12));
        }
    }

    #[test]
    fn dressed_frame_state_images() {
        let s = FRAC_1_SQRT_2;
        let f = dressed_frame(3).unwrap();
        // |+1⟩ -> (|u⟩+|d⟩)/2 − |D⟩/√2, |0⟩ -> (|u⟩−|d⟩)/√2
        let col0: Vec<f64> = f.v.column(0).iter().map(|z| z.re).collect();
        let col1: Vec<f64> = f.v.column(1).iter().map(|z| z.re).collect();
        for (a, b) in col0.iter().zip([0.5, -s, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in col1.iter().zip([s, 0.0, -s]) {
            assert!((a - b).abs() < 1e-15);
        }
        let ft = f.f_tilde_plus.unwrap();
        assert!((ft[(0, 1)].re - 2f64.sqrt()).abs() < 1e-15);
        assert!((ft[(1, 2)].re + 2f64.sqrt()).abs() < 1e-15);
        assert!(dressed_frame(2).unwrap().f_tilde_plus.is_none());
    }

    #[test]
    fn magnus_single_operator_vanishes() {
        let s = spin_ops(2).unwrap();
        let a = 2.0 * PI * 1e3;
        let w = 2.0 * PI * 1e5;
        let h = |t: f64| &s.x * re(a * (w * t).cos());
        let grid = MagnusGrid { window: 10.0 * 2.0 * PI / w, steps: 400, max_frequency: w };
        let h3 = magnus_third_order_numeric(&h, &grid).unwrap();
        let h2 = magnus_second_order_numeric(&h, &grid).unwrap();
        assert!(max_abs(&h3) <= 1e-9 * a);
        assert!(max_abs(&h2) <= 1e-9 * a);
    }

    #[test]
    fn magnus_resolution_error() {
        let s = spin_ops(2).unwrap();
        let h = |_t: f64| s.x.clone();
        let grid = MagnusGrid { window: 1.0, steps: 10, max_frequency: 2.0 * PI * 10.0 };
        match magnus_third_order_numeric(&h, &grid) {
            Err(Error::Resolution { required, given }) => {
                assert_eq!(required, 200);
                assert_eq!(given, 10);
            }
            other => panic!("expected resolution error, got {other:?}"),
        }
    }

    // Independent oracle: for H(t) = Σ_k A_k e^{iω_k t} with all ω_k ≠ 0, the
    // time-independent parts are
    //   H2 = −Σ_{ω_a+ω_b=0} [A_a, A_b] / (2 ω_b)
    //   H3 = −Σ_{ω_a+ω_b+ω_c=0} ([A_a,[A_b,A_c]] + [A_c,[A_b,A_a]]) / (6 ω_a ω_c)
    fn secular_oracle(terms: &[(Operator, f64)]) -> (Operator, Operator) {
        let d = terms[0].0.nrows();
        let mut h2 = Operator::zeros(d, d);
        let mut h3 = Operator::zeros(d, d);
        let tol = 1e-6;
        for (a, wa) in terms {
            for (b, wb) in terms {
                if (wa + wb).abs() < tol {
                    h2 -= commutator(a, b) * re(1.0 / (2.0 * wb));
                }
                for (c, wc) in terms {
                    if (wa + wb + wc).abs() < tol {
                        let x = commutator(a, &commutator(b, c)) + commutator(c, &commutator(b, a));
                        h3 -= x * re(1.0 / (6.0 * wa * wc));
                    }
                }
            }
        }
        (h2, h3)
    }

    fn assemble(terms: &[(Operator, f64)], t: f64) -> Operator {
        let d = terms[0].0.nrows();
        terms.iter().fold(Operator::zeros(d, d), |acc, (a, w)| acc + a * Complex64::from_polar(1.0, w * t))
    }

    #[test]
    fn time_independent_magnus_matches_frequency_oracle() {
        let s = spin_ops(2).unwrap();
        let n = nuclear_ops();
        let w = 1.0;
        let a = 0.05;
        let b = kron(&s.plus, &n.z) * re(a);
        let c = kron(&s.plus, &n.plus) * re(0.7 * a);
        let d = kron(&s.plus, &Operator::identity(2, 2)) * re(0.4 * a);
        let terms = vec![
            (b.clone(), 2.0 * w),
            (b.adjoint(), -2.0 * w),
            (c.clone(), 3.0 * w),
            (c.adjoint(), -3.0 * w),
            (d.clone(), 4.0 * w),
            (d.adjoint(), -4.0 * w),
            (kron(&s.plus, &n.minus) * re(0.3 * a), 1.0 * w),
            (kron(&s.minus, &n.plus) * re(0.3 * a), -1.0 * w),
        ];
        let h = |t: f64| assemble(&terms, t);
        let grid = MagnusGrid { window: 2.0 * PI / w, steps: 800, max_frequency: 4.0 * w };
        let (h2, h3) = time_independent_magnus(&h, &grid, 13).unwrap();
        let (o2, o3) = secular_oracle(&terms);
        assert!(max_abs(&o3) > 1e-6);
        assert!(close(&h2, &o2, 1e-7 * max_abs(&o2)), "{h2} vs {o2}");
        assert!(close(&h3, &o3, 1e-3 * max_abs(&o3)), "{h3} vs {o3}");
    }

    #[test]
    fn common_base_frequency_of_harmonics() {
        let (w0, k) = common_base_frequency(&[40.0, -41.0, 39.0, 80.0, 0.0]).unwrap();
        assert!((w0 - 1.0).abs() < 1e-12);
        assert_eq!(k, 80);
        let (w0, k) = common_base_frequency(&[1.5, 2.0]).unwrap();
        assert!((w0 - 0.5).abs() < 1e-12);
        assert_eq!(k, 4);
        assert!(common_base_frequency(&[1.0, 2f64.sqrt()]).is_none());
    }

    fn hermitian_strategy(d: usize) -> impl Strategy<Value = Operator> {
        proptest::collection::vec(-5.0f64..5.0, 2 * d * d).prop_map(move |v| {
            let m = Operator::from_fn(d, d, |i, j| Complex64::new(v[2 * (i * d + j)], v[2 * (i * d + j) + 1]));
            (&m + m.adjoint()) * re(0.5)
        })
    }

    proptest! {
        #[test]
        fn propagator_is_unitary(h in hermitian_strategy(4), dt in 0.0f64..3.0) {
            let u = propagator(&h, dt).unwrap();
            let err = max_abs(&(&u * u.adjoint() - Operator::identity(4, 4)));
            prop_assert!(err <= 1e-12);
        }

        #[test]
        fn propagator_composes(h in hermitian_strategy(6), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let lhs = propagator(&h, t1 + t2).unwrap();
            let rhs = propagator(&h, t1).unwrap() * propagator(&h, t2).unwrap();
            prop_assert!(max_abs(&(lhs - rhs)) <= 1e-10);
        }

        #[test]
        fn magnus_periodic_shift_invariance(ax in -1.0f64..1.0, bz in -1.0f64..1.0, periods in 1usize..4) {
            let s = spin_ops(2).unwrap();
            let w = 2.0 * PI;
            let h = |t: f64| &s.x * re(ax * (w * t).cos()) + &s.z * re(bz * (w * t).sin());
            let shifted = |t: f64| h(t + 1.0);
            let grid = MagnusGrid { window: periods as f64, steps: 200 * periods, max_frequency: w };
            let a = magnus_third_order_numeric(&h, &grid).unwrap();
            let b = magnus_third_order_numeric(&shifted, &grid).unwrap();
            prop_assert!(max_abs(&(a - b)) <= 1e-12);
        }
    }
}
