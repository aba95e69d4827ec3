//! Composite Hilbert space of the dot, cavity, bath and control subsystems,
//! and the operators embedded in it.
//!
//! Basis states are ordered row-major over the subsystem tuple, so the index of
//! `|d, n, m, c⟩` on the default space is `((d * 3 + n) * 3 + m) * 2 + c`.
//! Dot level 0 is the ground state `|G⟩` and level 1 the exciton `|X⟩`;
//! control level 1 means pumping is ON.

use std::ops::{Add, Mul, Sub};

use ndarray::{linalg::kron, Array2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::DensityState;

pub const DOT: usize = 0;
pub const CAVITY: usize = 1;
pub const BATH: usize = 2;
pub const CONTROL: usize = 3;

const CANONICAL_LABELS: [&str; 4] = ["dot", "cavity", "bath", "control"];

/// Ordered subsystem dimensions of a tensor-product space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceDescriptor {
    dims: Vec<usize>,
    labels: Vec<String>,
}

impl SpaceDescriptor {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_subsystems(&self) -> usize {
        self.dims.len()
    }

    pub fn has_control(&self) -> bool {
        self.dims.len() > CONTROL
    }

    /// Dot, cavity and bath with the control switch: 36 states.
    pub fn feedback() -> Self {
        make_space(&[2, 3, 3, 2]).expect("static dims")
    }

    /// Dot, cavity and bath only: 18 states.
    pub fn deterministic() -> Self {
        make_space(&[2, 3, 3]).expect("static dims")
    }

    /// Per-subsystem level of a basis index.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    /// Basis index of a tuple of subsystem levels.
    pub fn index_of(&self, digits: &[usize]) -> Result<usize> {
        if digits.len() != self.dims.len() {
            return Err(invalid(format!(
                "expected {} subsystem levels, got {}",
                self.dims.len(),
                digits.len()
            )));
        }
        let mut idx = 0;
        for (&l, &d) in digits.iter().zip(&self.dims) {
            if l >= d {
                return Err(invalid(format!("level {l} out of range for dimension {d}")));
            }
            idx = idx * d + l;
        }
        Ok(idx)
    }

    fn check_index(&self, subsystem: usize) -> Result<usize> {
        self.dims.get(subsystem).copied().ok_or_else(|| {
            invalid(format!(
                "subsystem index {subsystem} out of range for {} subsystems",
                self.dims.len()
            ))
        })
    }
}

/// Builds a space descriptor; subsystems are labelled in canonical order
/// (dot, cavity, bath, control).
pub fn make_space(dims: &[usize]) -> Result<SpaceDescriptor> {
    if dims.is_empty() {
        return Err(invalid("space needs at least one subsystem"));
    }
    if let Some(&d) = dims.iter().find(|&&d| d == 0) {
        return Err(invalid(format!("subsystem dimension must be positive, got {d}")));
    }
    let labels = (0..dims.len())
        .map(|i| {
            CANONICAL_LABELS
                .get(i)
                .map_or_else(|| format!("subsystem{i}"), |s| s.to_string())
        })
        .collect();
    Ok(SpaceDescriptor { dims: dims.to_vec(), labels })
}

/// Truncated annihilation and creation operators on `dim` levels.
///
/// The creation operator annihilates the top level, so `[a, a†]` picks up a
/// `-dim |top⟩⟨top|` correction.
pub fn ladder(dim: usize) -> Result<(Array2<C64>, Array2<C64>)> {
    if dim < 2 {
        return Err(invalid(format!("ladder operators need dim >= 2, got {dim}")));
    }
    let mut a = Array2::<C64>::zeros((dim, dim));
    for n in 1..dim {
        a[[n - 1, n]] = C64::from((n as f64).sqrt());
    }
    let ad = a.t().mapv(|z| z.conj());
    Ok((a, ad))
}

/// `|level⟩⟨level|` on a single subsystem.
pub fn projector(dim: usize, level: usize) -> Result<Array2<C64>> {
    if level >= dim {
        return Err(invalid(format!("level {level} out of range for dimension {dim}")));
    }
    let mut p = Array2::<C64>::zeros((dim, dim));
    p[[level, level]] = C64::from(1.0);
    Ok(p)
}

/// Square operator on a full composite space.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    matrix: Array2<C64>,
    space: SpaceDescriptor,
}

impl Operator {
    pub fn from_matrix(matrix: Array2<C64>, space: &SpaceDescriptor) -> Result<Self> {
        let n = space.total_dim();
        if matrix.dim() != (n, n) {
            return Err(invalid(format!(
                "operator shape {:?} does not match space dimension {n}",
                matrix.dim()
            )));
        }
        Ok(Self { matrix, space: space.clone() })
    }

    pub fn identity(space: &SpaceDescriptor) -> Self {
        let n = space.total_dim();
        Self { matrix: Array2::eye(n), space: space.clone() }
    }

    pub fn zeros(space: &SpaceDescriptor) -> Self {
        let n = space.total_dim();
        Self { matrix: Array2::zeros((n, n)), space: space.clone() }
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<C64> {
        self.matrix
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn adjoint(&self) -> Self {
        Self { matrix: self.matrix.t().mapv(|z| z.conj()), space: self.space.clone() }
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self { matrix: self.matrix.mapv(|z| z * factor), space: self.space.clone() }
    }

    /// Largest element-wise deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        let m = &self.matrix;
        let n = m.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((m[[i, j]] - m[[j, i]].conj()).norm());
            }
        }
        worst
    }

    pub fn count_nonzero(&self) -> usize {
        self.matrix.iter().filter(|z| z.norm() != 0.0).count()
    }
}

impl Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        debug_assert_eq!(self.space, rhs.space);
        Operator { matrix: self.matrix.dot(&rhs.matrix), space: self.space.clone() }
    }
}

impl Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        debug_assert_eq!(self.space, rhs.space);
        Operator { matrix: &self.matrix + &rhs.matrix, space: self.space.clone() }
    }
}

impl Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        debug_assert_eq!(self.space, rhs.space);
        Operator { matrix: &self.matrix - &rhs.matrix, space: self.space.clone() }
    }
}

/// `I ⊗ … ⊗ local ⊗ … ⊗ I`, with `local` acting on subsystem `subsystem`.
pub fn embed(local: &Array2<C64>, subsystem: usize, space: &SpaceDescriptor) -> Result<Operator> {
    let d = space.check_index(subsystem)?;
    if local.dim() != (d, d) {
        return Err(invalid(format!(
            "local block {:?} does not match dimension {d} of subsystem {subsystem}",
            local.dim()
        )));
    }
    let mut full = Array2::<C64>::eye(1);
    for (i, &di) in space.dims().iter().enumerate() {
        full = if i == subsystem { kron(&full, local) } else { kron(&full, &Array2::eye(di)) };
    }
    Operator::from_matrix(full, space)
}

/// Reduced density matrix of subsystem `keep`.
pub fn partial_trace(rho: &DensityState, keep: usize) -> Result<Array2<C64>> {
    let space = rho.space();
    let dk = space.check_index(keep)?;
    let n = space.total_dim();
    let m = rho.matrix();
    let digits: Vec<Vec<usize>> = (0..n).map(|i| space.digits(i)).collect();
    let mut red = Array2::<C64>::zeros((dk, dk));
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (&digits[i], &digits[j]);
            let spectators_agree = di
                .iter()
                .zip(dj)
                .enumerate()
                .all(|(s, (a, b))| s == keep || a == b);
            if spectators_agree {
                red[[di[keep], dj[keep]]] += m[[i, j]];
            }
        }
    }
    Ok(red)
}

/// Named operators of the dot–cavity–bath(–control) model.
#[derive(Clone, Debug)]
pub struct ModelOperators {
    pub space: SpaceDescriptor,
    /// `σ⁻ = |G⟩⟨X|`
    pub sigma_minus: Operator,
    pub sigma_plus: Operator,
    /// Cavity annihilation `a`.
    pub cavity: Operator,
    /// Bath annihilation `b`.
    pub bath: Operator,
    /// `𝒫_X = |X⟩⟨X|` on the dot.
    pub excited: Operator,
    /// Control annihilation `c`, present when the space has a control switch.
    pub control: Option<Operator>,
    /// `ξ = |1⟩⟨1|` on the control switch.
    pub control_on: Option<Operator>,
}

impl ModelOperators {
    pub fn new(space: &SpaceDescriptor) -> Result<Self> {
        if space.num_subsystems() < 3 {
            return Err(invalid("model space needs dot, cavity and bath subsystems"));
        }
        if space.dims()[DOT] != 2 {
            return Err(invalid("the dot is a two-level system"));
        }
        let (sm, _) = ladder(2)?;
        let sigma_minus = embed(&sm, DOT, space)?;
        let sigma_plus = sigma_minus.adjoint();
        let cavity = embed(&ladder(space.dims()[CAVITY])?.0, CAVITY, space)?;
        let bath = embed(&ladder(space.dims()[BATH])?.0, BATH, space)?;
        let excited = embed(&projector(2, 1)?, DOT, space)?;
        let (control, control_on) = if space.has_control() {
            let dc = space.dims()[CONTROL];
            if dc != 2 {
                return Err(invalid("the control switch is a two-level system"));
            }
            (
                Some(embed(&ladder(dc)?.0, CONTROL, space)?),
                Some(embed(&projector(dc, 1)?, CONTROL, space)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            space: space.clone(),
            sigma_minus,
            sigma_plus,
            cavity,
            bath,
            excited,
            control,
            control_on,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    #[test]
    fn space_dimensions() {
        assert_eq!(make_space(&[2, 3, 3, 2]).unwrap().total_dim(), 36);
        assert_eq!(make_space(&[2, 3, 3]).unwrap().total_dim(), 18);
        assert_eq!(make_space(&[1]).unwrap().total_dim(), 1);
        assert!(make_space(&[2, 0, 3]).is_err());
        assert!(make_space(&[]).is_err());
        let s = SpaceDescriptor::feedback();
        assert_eq!(s.labels(), ["dot", "cavity", "bath", "control"]);
    }

    #[test]
    fn index_round_trip() {
        let s = SpaceDescriptor::feedback();
        for i in 0..s.total_dim() {
            assert_eq!(s.index_of(&s.digits(i)).unwrap(), i);
        }
        assert_eq!(s.index_of(&[0, 0, 0, 1]).unwrap(), 1);
        assert_eq!(s.index_of(&[1, 0, 0, 0]).unwrap(), 18);
        assert!(s.index_of(&[2, 0, 0, 0]).is_err());
    }

    #[test]
    fn ladder_matrix_elements() {
        let (a, ad) = ladder(3).unwrap();
        assert_eq!(a[[0, 1]], c(1.0));
        assert_abs_diff_eq!(a[[1, 2]].re, 2f64.sqrt(), epsilon = 1e-15);
        // creation on the top level vanishes
        assert!(ad.column(2).iter().all(|z| z.norm() == 0.0));
        let (sm, _) = ladder(2).unwrap();
        assert_eq!(sm, ndarray::array![[c(0.0), c(1.0)], [c(0.0), c(0.0)]]);
        assert!(ladder(1).is_err());
    }

    #[test]
    fn truncated_commutator() {
        for dim in 2..6 {
            let (a, ad) = ladder(dim).unwrap();
            let comm = a.dot(&ad) - ad.dot(&a);
            let mut expect = Array2::<C64>::eye(dim);
            expect[[dim - 1, dim - 1]] -= c(dim as f64);
            let err = (&comm - &expect).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(err < 1e-14, "dim {dim}: {err:e}");
        }
    }

    #[test]
    fn embedding_structure() {
        let s = SpaceDescriptor::feedback();
        let id = embed(&Array2::eye(3), BATH, &s).unwrap();
        assert_eq!(id, Operator::identity(&s));

        let (sm, _) = ladder(2).unwrap();
        let sp = embed(&sm.t().to_owned(), DOT, &s).unwrap();
        assert_eq!(sp.count_nonzero(), 18);
        assert!(sp.matrix().iter().all(|z| z.norm() == 0.0 || *z == c(1.0)));

        let p = embed(&projector(2, 1).unwrap(), DOT, &s).unwrap();
        assert_eq!(&p * &p, p);

        assert!(embed(&Array2::eye(2), 4, &s).is_err());
        assert!(embed(&Array2::eye(3), DOT, &s).is_err());
    }

    #[test]
    fn different_subsystems_commute() {
        let ops = ModelOperators::new(&SpaceDescriptor::feedback()).unwrap();
        let all = [
            &ops.sigma_minus,
            &ops.cavity,
            &ops.bath,
            ops.control.as_ref().unwrap(),
        ];
        for (i, x) in all.iter().enumerate() {
            for y in all.iter().skip(i + 1) {
                assert_eq!(&(*x * *y), &(*y * *x));
            }
        }
    }

    #[test]
    fn partial_trace_of_product_state() {
        let s = SpaceDescriptor::feedback();
        let rho = DensityState::basis_state(&s, &[0, 0, 0, 1]).unwrap();
        let bath = partial_trace(&rho, BATH).unwrap();
        let mut expect = Array2::<C64>::zeros((3, 3));
        expect[[0, 0]] = c(1.0);
        assert_eq!(bath, expect);

        let mixed = DensityState::maximally_mixed(&s);
        let bath = partial_trace(&mixed, BATH).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert_abs_diff_eq!(bath[[i, j]].re, want, epsilon = 1e-14);
            }
        }
        assert!(partial_trace(&rho, 7).is_err());
    }

    #[test]
    fn partial_trace_of_local_action_on_product_state() {
        // Tr_rest[(A ⊗ I) ρ_cav ⊗ ρ_rest] = A ρ_cav
        let s = SpaceDescriptor::deterministic();
        let (a, ad) = ladder(3).unwrap();
        let local = &a + &ad.mapv(|z| z * C64::new(0.0, 0.5));
        let mut cav = Array2::<C64>::zeros((3, 3));
        cav[[0, 0]] = c(0.5);
        cav[[1, 1]] = c(0.3);
        cav[[2, 2]] = c(0.2);
        cav[[0, 1]] = C64::new(0.1, 0.05);
        cav[[1, 0]] = C64::new(0.1, -0.05);
        let dot = projector(2, 1).unwrap();
        let bath = projector(3, 2).unwrap();
        let rho = kron(&kron(&dot, &cav), &bath);
        let state = DensityState::from_matrix(rho.clone(), &s, 0.0).unwrap();
        let applied = embed(&local, CAVITY, &s).unwrap().matrix().dot(&rho);
        let lhs = partial_trace(&DensityState::from_matrix_unchecked(applied, &s, 0.0), CAVITY)
            .unwrap();
        let reduced = partial_trace(&state, CAVITY).unwrap();
        let rhs = local.dot(&reduced);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert_abs_diff_eq!((x - y).norm(), 0.0, epsilon = 1e-15);
        }
    }
}
