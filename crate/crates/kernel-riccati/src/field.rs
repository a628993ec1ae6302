//! Kernel fields `Γ_t(θ_j, θ_k)` on the atom × atom × time grid.
//!
//! A time slice is stored as one dense `(n·d) × (n·d)` matrix whose `(j, k)`
//! block of size `d × d` is `Γ_t(θ_j, θ_k)`; kernel symmetry
//! `Γ(θ, τ) = Γ(τ, θ)ᵀ` is then plain matrix symmetry of the slice.
//!
//! The measure enters through three reductions that appear everywhere:
//!
//! ```text
//! col(τ)  = ∫ μ(dθ)ᵀ Γ(θ, τ)        = Σ_j w_jᵀ Γ(θ_j, ·)      (d' × d per atom)
//! row(θ)  = ∫ Γ(θ, τ) μ(dτ)         = Σ_k Γ(·, θ_k) w_k       (d × d' per atom)
//! U       = ∬ μ(dθ)ᵀ Γ(θ, τ) μ(dτ)  = Σ_{j,k} w_jᵀ Γ_{jk} w_k (d' × d')
//! ```
//!
//! Nonnegativity in the measure-weighted sense — `⟨φ, Γφ⟩_μ ≥ 0` for every
//! test function — is exactly positive semidefiniteness of the weighted Gram
//! matrix with blocks `w_jᵀ Γ(θ_j, θ_k) w_k`, which is what
//! [`KernelField::check_symmetric_nonnegative`] tests.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::MeasureAtoms;

/// Time-indexed kernel on the atom grid. Immutable after a solve; cheap to
/// share across threads.
#[derive(Debug, Clone)]
pub struct KernelField {
    measure: Arc<MeasureAtoms>,
    time_grid: Arc<Vec<f64>>,
    slices: Vec<DMatrix<f64>>,
}

/// Outcome of the symmetry/nonnegativity test of a slice.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PsdCheckResult {
    /// Smallest eigenvalue of the symmetrized weighted Gram matrix.
    pub min_eigenvalue: f64,
    /// `max_{j,k} |Γ(θ_j,θ_k) − Γ(θ_k,θ_j)ᵀ|`, entrywise.
    pub symmetric_defect: f64,
}

impl PsdCheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.symmetric_defect <= tol && self.min_eigenvalue >= -tol
    }
}

/// A test function sampled on the atom grid: one `d'`-vector per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub samples: Vec<DVector<f64>>,
}

impl TestFunction {
    /// The same vector at every atom.
    pub fn constant(value: DVector<f64>, atom_count: usize) -> Self {
        Self {
            samples: vec![value; atom_count],
        }
    }

    pub fn zeros(dim: usize, atom_count: usize) -> Self {
        Self::constant(DVector::zeros(dim), atom_count)
    }

    fn check_dims(&self, atom_count: usize, dim: usize) -> Result<()> {
        if self.samples.len() != atom_count {
            return Err(Error::DimensionMismatch(format!(
                "test function has {} samples for {} atoms",
                self.samples.len(),
                atom_count
            )));
        }
        if let Some(v) = self.samples.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "test function sample has dim {}, expected {}",
                v.len(),
                dim
            )));
        }
        Ok(())
    }
}

impl KernelField {
    /// Zero field on the given grid.
    pub fn zeros(measure: Arc<MeasureAtoms>, time_grid: Arc<Vec<f64>>) -> Self {
        let nd = measure.atom_count() * measure.d();
        let slices = vec![DMatrix::zeros(nd, nd); time_grid.len()];
        Self {
            measure,
            time_grid,
            slices,
        }
    }

    pub(crate) fn from_slices(
        measure: Arc<MeasureAtoms>,
        time_grid: Arc<Vec<f64>>,
        slices: Vec<DMatrix<f64>>,
    ) -> Self {
        debug_assert_eq!(time_grid.len(), slices.len());
        Self {
            measure,
            time_grid,
            slices,
        }
    }

    pub fn measure(&self) -> &Arc<MeasureAtoms> {
        &self.measure
    }

    pub fn times(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn shared_times(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.time_grid)
    }

    /// Number of time steps `M` (the grid has `M + 1` points).
    pub fn step_count(&self) -> usize {
        self.time_grid.len() - 1
    }

    pub fn slice(&self, s: usize) -> &DMatrix<f64> {
        &self.slices[s]
    }

    pub fn slices(&self) -> &[DMatrix<f64>] {
        &self.slices
    }

    /// Copy of the `d × d` block `Γ_{t_s}(θ_j, θ_k)`.
    pub fn block(&self, s: usize, j: usize, k: usize) -> DMatrix<f64> {
        let d = self.measure.d();
        self.slices[s].view((j * d, k * d), (d, d)).into()
    }

    /// Discrete `L¹(μ⊗μ)` norm of a slice:
    /// `Σ_{j,k} |w_j| · |Γ(θ_j,θ_k)| · |w_k|` with Frobenius block norms.
    pub fn l1_norm(&self, s: usize) -> f64 {
        slice_l1_norm(&self.slices[s], &self.measure)
    }

    pub fn sup_l1_norm(&self) -> f64 {
        (0..self.slices.len())
            .map(|s| self.l1_norm(s))
            .fold(0.0, f64::max)
    }

    /// `max_j Σ_k |Γ(θ_j,θ_k)|·|w_k|` of a slice (row integral bound).
    pub fn row_integral_sup(&self, s: usize) -> f64 {
        let d = self.measure.d();
        let aw = self.measure.abs_weights();
        let n = self.measure.atom_count();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let mut total = 0.0;
            for k in 0..n {
                total += self.slices[s].view((j * d, k * d), (d, d)).norm() * aw[k];
            }
            worst = worst.max(total);
        }
        worst
    }

    /// `max_k Σ_j |w_j|·|Γ(θ_j,θ_k)|` of a slice (column integral bound).
    pub fn col_integral_sup(&self, s: usize) -> f64 {
        let d = self.measure.d();
        let aw = self.measure.abs_weights();
        let n = self.measure.atom_count();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let mut total = 0.0;
            for j in 0..n {
                total += aw[j] * self.slices[s].view((j * d, k * d), (d, d)).norm();
            }
            worst = worst.max(total);
        }
        worst
    }

    /// Double integral `U_t = ∬ μᵀ Γ_t μ` of a slice.
    pub fn double_integral(&self, s: usize) -> DMatrix<f64> {
        let w = self.measure.stacked_weights();
        w.transpose() * &self.slices[s] * &w
    }

    /// `max_{j,k} |Γ(θ_j,θ_k) − Γ(θ_k,θ_j)ᵀ|` of a slice.
    pub fn symmetric_defect(&self, s: usize) -> f64 {
        let m = &self.slices[s];
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        worst
    }

    /// Largest entry magnitude of a slice; the scale used for relative
    /// symmetry comparisons.
    pub fn slice_scale(&self, s: usize) -> f64 {
        self.slices[s].iter().fold(0.0, |a: f64, &x| a.max(x.abs()))
    }

    /// Symmetry and measure-weighted nonnegativity of a slice. The Gram
    /// blocks `w_jᵀ Γ w_k` are square even for rectangular weights, so no
    /// shape restriction is needed beyond the square kernel blocks the
    /// storage already guarantees.
    pub fn check_symmetric_nonnegative(&self, s: usize) -> Result<PsdCheckResult> {
        Ok(PsdCheckResult {
            min_eigenvalue: gram_min_eigenvalue(&self.slices[s], &self.measure),
            symmetric_defect: self.symmetric_defect(s),
        })
    }

    /// Quadratic form `⟨φ, Γ_{t_s} φ⟩_μ`.
    pub fn quadratic_form(&self, s: usize, phi: &TestFunction) -> Result<f64> {
        phi.check_dims(self.measure.atom_count(), self.measure.d_prime())?;
        let g = stack_weighted(&self.measure, phi);
        Ok((&g.transpose() * &self.slices[s] * &g)[(0, 0)])
    }

    /// Per-step increments `‖Γ_{t_{s+1}} − Γ_{t_s}‖_{L¹(μ⊗μ)}`.
    pub fn step_increments(&self) -> Vec<f64> {
        (0..self.slices.len().saturating_sub(1))
            .map(|s| slice_l1_norm(&(&self.slices[s + 1] - &self.slices[s]), &self.measure))
            .collect()
    }

    /// CSV rows `(t, theta_j, theta_k, gamma entries row-major)` for one
    /// slice; `write_csv` iterates slices with a stride.
    pub fn write_slice_csv<W: Write>(&self, s: usize, out: &mut W) -> std::io::Result<()> {
        let d = self.measure.d();
        let n = self.measure.atom_count();
        let t = self.time_grid[s];
        for j in 0..n {
            for k in 0..n {
                write!(
                    out,
                    "{:.16e},{:.16e},{:.16e}",
                    t,
                    self.measure.node(j),
                    self.measure.node(k)
                )?;
                for r in 0..d {
                    for c in 0..d {
                        write!(out, ",{:.16e}", self.slices[s][(j * d + r, k * d + c)])?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, stride: usize, out: &mut W) -> std::io::Result<()> {
        let d = self.measure.d();
        write!(out, "t,theta_j,theta_k")?;
        for r in 0..d {
            for c in 0..d {
                write!(out, ",gamma_{r}{c}")?;
            }
        }
        writeln!(out)?;
        let stride = stride.max(1);
        let last = self.slices.len() - 1;
        let mut s = 0;
        while s < last {
            self.write_slice_csv(s, out)?;
            s += stride;
        }
        self.write_slice_csv(last, out)
    }
}

pub(crate) fn slice_l1_norm(slice: &DMatrix<f64>, measure: &MeasureAtoms) -> f64 {
    let d = measure.d();
    let n = measure.atom_count();
    let aw = measure.abs_weights();
    let mut total = 0.0;
    for j in 0..n {
        for k in 0..n {
            total += aw[j] * slice.view((j * d, k * d), (d, d)).norm() * aw[k];
        }
    }
    total
}

/// Smallest eigenvalue of the symmetrized weighted Gram matrix
/// `G_{jk} = w_jᵀ Γ(θ_j,θ_k) w_k`.
pub(crate) fn gram_min_eigenvalue(slice: &DMatrix<f64>, measure: &MeasureAtoms) -> f64 {
    if measure.atom_count() == 0 {
        return 0.0;
    }
    let w = block_diag_weights(measure);
    let gram = w.transpose() * slice * &w;
    let sym = (&gram + gram.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &x| a.min(x))
}

fn block_diag_weights(measure: &MeasureAtoms) -> DMatrix<f64> {
    let (d, dp) = measure.dims();
    let n = measure.atom_count();
    let mut out = DMatrix::zeros(n * d, n * dp);
    for k in 0..n {
        out.view_mut((k * d, k * dp), (d, dp))
            .copy_from(measure.weight(k));
    }
    out
}

/// Stacked vector with blocks `w_k φ(θ_k)`, so quadratic forms against a
/// slice reduce to `gᵀ S g`.
fn stack_weighted(measure: &MeasureAtoms, phi: &TestFunction) -> DVector<f64> {
    let d = measure.d();
    let n = measure.atom_count();
    let mut out = DVector::zeros(n * d);
    for k in 0..n {
        let v = measure.weight(k) * &phi.samples[k];
        out.rows_mut(k * d, d).copy_from(&v);
    }
    out
}

/// Dual pairing `⟨φ, ψ⟩_μ = Σ_k φ(θ_k)ᵀ w_kᵀ ψ(θ_k)` between a `d'`-valued
/// and a `d`-valued function.
pub fn dual_pairing(phi: &TestFunction, psi: &TestFunction, m: &MeasureAtoms) -> Result<f64> {
    phi.check_dims(m.atom_count(), m.d_prime())?;
    psi.check_dims(m.atom_count(), m.d())?;
    let mut total = 0.0;
    for k in 0..m.atom_count() {
        total += ((m.weight(k) * &phi.samples[k]).transpose() * &psi.samples[k])[(0, 0)];
    }
    Ok(total)
}

/// Integral operator application `(Γφ)(θ_j) = Σ_k Γ(θ_j,θ_k) w_k φ(θ_k)`,
/// returning one `d`-vector per atom.
pub fn apply_operator(f: &KernelField, s: usize, phi: &TestFunction) -> Result<TestFunction> {
    let m = f.measure();
    phi.check_dims(m.atom_count(), m.d_prime())?;
    let d = m.d();
    let g = stack_weighted(m, phi);
    let applied = f.slice(s) * g;
    let samples = (0..m.atom_count())
        .map(|j| applied.rows(j * d, d).into())
        .collect();
    Ok(TestFunction { samples })
}

/// `f ⪰_μ g` at a slice: the difference passes the symmetric-nonnegative
/// check at tolerance `tol`.
pub fn order_compare(f: &KernelField, g: &KernelField, s: usize, tol: f64) -> Result<bool> {
    if f.measure() != g.measure() || f.times() != g.times() {
        return Err(Error::DimensionMismatch(
            "order comparison requires the same measure and time grid".into(),
        ));
    }
    let diff = f.slice(s) - g.slice(s);
    let result = PsdCheckResult {
        min_eigenvalue: gram_min_eigenvalue(&diff, f.measure()),
        symmetric_defect: {
            let mut worst: f64 = 0.0;
            for i in 0..diff.nrows() {
                for j in (i + 1)..diff.ncols() {
                    worst = worst.max((diff[(i, j)] - diff[(j, i)]).abs());
                }
            }
            worst
        },
    };
    Ok(result.passes(tol))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CauchySchwarzResult {
    /// Largest value of `⟨φ,Γψ⟩² − ⟨φ,Γφ⟩⟨ψ,Γψ⟩` over the sampled pairs;
    /// nonpositive in exact arithmetic for symmetric nonnegative kernels.
    pub max_violation: f64,
    /// Largest normalized violation, each trial divided by
    /// `⟨φ,Γφ⟩⟨ψ,Γψ⟩ + ‖Γ‖²`.
    pub max_normalized_violation: f64,
}

/// Randomized Cauchy–Schwarz test `⟨φ,Γψ⟩² ≤ ⟨φ,Γφ⟩⟨ψ,Γψ⟩` on a slice.
pub fn cauchy_schwarz_check(
    f: &KernelField,
    s: usize,
    trials: usize,
    seed: u64,
) -> CauchySchwarzResult {
    let m = f.measure();
    let dp = m.d_prime();
    let n = m.atom_count();
    let slice = f.slice(s);
    let scale_floor = {
        let l1 = slice_l1_norm(slice, m);
        l1 * l1 + f64::MIN_POSITIVE
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        let g = stack_weighted(
            m,
            &TestFunction {
                samples: (0..n)
                    .map(|_| DVector::from_fn(dp, |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
            },
        );
        g
    };
    let mut max_violation = f64::NEG_INFINITY;
    let mut max_normalized = f64::NEG_INFINITY;
    for _ in 0..trials.max(1) {
        let gphi = draw(&mut rng);
        let gpsi = draw(&mut rng);
        let cross = (gphi.transpose() * slice * &gpsi)[(0, 0)];
        let qphi = (gphi.transpose() * slice * &gphi)[(0, 0)];
        let qpsi = (gpsi.transpose() * slice * &gpsi)[(0, 0)];
        let violation = cross * cross - qphi * qpsi;
        max_violation = max_violation.max(violation);
        max_normalized = max_normalized.max(violation / (qphi * qpsi + scale_floor));
    }
    CauchySchwarzResult {
        max_violation,
        max_normalized_violation: max_normalized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn measure_two() -> Arc<MeasureAtoms> {
        Arc::new(MeasureAtoms::scalar(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap())
    }

    fn constant_field(m: Arc<MeasureAtoms>, value: f64, points: usize) -> KernelField {
        let nd = m.atom_count() * m.d();
        let grid: Vec<f64> = (0..points).map(|i| i as f64).collect();
        let slices = vec![DMatrix::from_element(nd, nd, value); points];
        KernelField::from_slices(m, Arc::new(grid), slices)
    }

    fn random_field(m: Arc<MeasureAtoms>, seed: u64) -> KernelField {
        let nd = m.atom_count() * m.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Arc::new(vec![0.0, 1.0]);
        let slices = (0..2)
            .map(|_| DMatrix::from_fn(nd, nd, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        KernelField::from_slices(m, grid, slices)
    }

    #[test]
    fn l1_norm_of_zero_field_is_zero() {
        let f = KernelField::zeros(measure_two(), Arc::new(vec![0.0, 1.0]));
        assert_eq!(f.l1_norm(0), 0.0);
        assert_eq!(f.sup_l1_norm(), 0.0);
    }

    #[test]
    fn l1_norm_of_unit_kernel_is_total_variation_squared() {
        let f = constant_field(measure_two(), 1.0, 1);
        assert_abs_diff_eq!(f.l1_norm(0), 4.0);
    }

    #[test]
    fn l1_norm_matches_brute_force_resummation() {
        let m = Arc::new(
            MeasureAtoms::scalar(vec![0.1, 0.9, 3.0], vec![0.5, -1.5, 2.0]).unwrap(),
        );
        let f = random_field(Arc::clone(&m), 7);
        let mut brute = 0.0;
        for j in 0..3 {
            for k in 0..3 {
                brute += m.weight(j).norm() * f.block(0, j, k).norm() * m.weight(k).norm();
            }
        }
        assert_relative_eq!(f.l1_norm(0), brute, max_relative = 1e-14);
    }

    #[test]
    fn l1_norm_satisfies_triangle_and_homogeneity() {
        let m = Arc::new(MeasureAtoms::scalar(vec![0.2, 1.4], vec![1.0, -0.5]).unwrap());
        for seed in 0..20u64 {
            let f = random_field(Arc::clone(&m), seed);
            let g = random_field(Arc::clone(&m), seed + 100);
            let sum = KernelField::from_slices(
                Arc::clone(&m),
                f.shared_times(),
                vec![f.slice(0) + g.slice(0), f.slice(1) + g.slice(1)],
            );
            assert!(sum.l1_norm(0) <= f.l1_norm(0) + g.l1_norm(0) + 1e-13);
            let scaled = KernelField::from_slices(
                Arc::clone(&m),
                f.shared_times(),
                vec![f.slice(0) * -2.5, f.slice(1) * -2.5],
            );
            assert_relative_eq!(scaled.l1_norm(0), 2.5 * f.l1_norm(0), max_relative = 1e-12);
        }
    }

    #[test]
    fn dual_pairing_identity_weight() {
        let m = MeasureAtoms::new(vec![0.0], vec![DMatrix::identity(2, 2)], (2, 2)).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let phi = TestFunction::constant(e1.clone(), 1);
        let psi = TestFunction::constant(e1, 1);
        assert_abs_diff_eq!(dual_pairing(&phi, &psi, &m).unwrap(), 1.0);
    }

    #[test]
    fn dual_pairing_with_zero_function_vanishes() {
        let m = measure_two();
        let phi = TestFunction::zeros(1, 2);
        let psi = TestFunction::constant(DVector::from_vec(vec![3.0]), 2);
        assert_abs_diff_eq!(dual_pairing(&phi, &psi, &m).unwrap(), 0.0);
    }

    #[test]
    fn dual_pairing_matches_brute_force_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nodes: Vec<f64> = vec![0.1, 0.5, 1.0, 2.0, 4.0];
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = MeasureAtoms::scalar(nodes, weights.clone()).unwrap();
        let phi = TestFunction {
            samples: (0..5)
                .map(|_| DVector::from_vec(vec![rng.random_range(-1.0..1.0)]))
                .collect(),
        };
        let psi = TestFunction {
            samples: (0..5)
                .map(|_| DVector::from_vec(vec![rng.random_range(-1.0..1.0)]))
                .collect(),
        };
        let brute: f64 = (0..5)
            .map(|k| phi.samples[k][0] * weights[k] * psi.samples[k][0])
            .sum();
        assert_relative_eq!(dual_pairing(&phi, &psi, &m).unwrap(), brute, max_relative = 1e-13);
    }

    #[test]
    fn dual_pairing_rejects_dimension_mismatch() {
        let m = measure_two();
        let phi = TestFunction::zeros(1, 1);
        let psi = TestFunction::zeros(1, 2);
        assert!(dual_pairing(&phi, &psi, &m).is_err());
    }

    #[test]
    fn apply_operator_zero_field_gives_zero() {
        let f = KernelField::zeros(measure_two(), Arc::new(vec![0.0]));
        let phi = TestFunction::constant(DVector::from_vec(vec![2.0]), 2);
        let out = apply_operator(&f, 0, &phi).unwrap();
        assert!(out.samples.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn apply_operator_single_atom_scalar_product() {
        let m = Arc::new(MeasureAtoms::scalar(vec![0.5], vec![1.75]).unwrap());
        let grid = Arc::new(vec![0.0]);
        let f = KernelField::from_slices(
            Arc::clone(&m),
            grid,
            vec![DMatrix::from_element(1, 1, -3.0)],
        );
        let phi = TestFunction::constant(DVector::from_vec(vec![2.0]), 1);
        let out = apply_operator(&f, 0, &phi).unwrap();
        assert_relative_eq!(out.samples[0][0], -3.0 * 1.75 * 2.0, max_relative = 1e-15);
    }

    #[test]
    fn apply_operator_is_linear_and_symmetric_in_pairing() {
        let m = Arc::new(MeasureAtoms::scalar(vec![0.3, 1.1, 2.2], vec![0.7, 1.3, -0.4]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nd = 3;
        // symmetric slice
        let raw = DMatrix::from_fn(nd, nd, |_, _| rng.random_range(-1.0..1.0));
        let sym = (&raw + raw.transpose()) * 0.5;
        let f = KernelField::from_slices(Arc::clone(&m), Arc::new(vec![0.0]), vec![sym]);
        let draw = |rng: &mut ChaCha8Rng| TestFunction {
            samples: (0..3)
                .map(|_| DVector::from_vec(vec![rng.random_range(-1.0..1.0)]))
                .collect(),
        };
        for _ in 0..10 {
            let phi = draw(&mut rng);
            let psi = draw(&mut rng);
            let lhs = dual_pairing(&phi, &apply_operator(&f, 0, &psi).unwrap(), &m).unwrap();
            let rhs = dual_pairing(&psi, &apply_operator(&f, 0, &phi).unwrap(), &m).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-11, epsilon = 1e-13);

            // linearity in phi
            let a = 0.6;
            let combo = TestFunction {
                samples: (0..3)
                    .map(|k| &phi.samples[k] * a + &psi.samples[k])
                    .collect(),
            };
            let lhs2 = apply_operator(&f, 0, &combo).unwrap();
            let f_phi = apply_operator(&f, 0, &phi).unwrap();
            let f_psi = apply_operator(&f, 0, &psi).unwrap();
            for k in 0..3 {
                let expect = &f_phi.samples[k] * a + &f_psi.samples[k];
                assert_relative_eq!(lhs2.samples[k][0], expect[0], max_relative = 1e-11, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn constant_psd_kernel_passes_check() {
        // Γ(θ,τ) ≡ Q psd: the quadratic form is (Σ w_k φ_k)ᵀ Q (Σ w_k φ_k) ≥ 0
        let f = constant_field(measure_two(), 1.0, 1);
        let result = f.check_symmetric_nonnegative(0).unwrap();
        assert!(result.passes(1e-12));
        assert_abs_diff_eq!(result.symmetric_defect, 0.0);
    }

    #[test]
    fn negative_identity_kernel_fails_check() {
        let m = measure_two();
        let nd = 2;
        let f = KernelField::from_slices(
            Arc::clone(&m),
            Arc::new(vec![0.0]),
            vec![DMatrix::from_diagonal_element(nd, nd, -1.0)],
        );
        let result = f.check_symmetric_nonnegative(0).unwrap();
        assert!(result.min_eigenvalue < 0.0);
        assert!(!result.passes(1e-8));
    }

    #[test]
    fn order_compare_trivial_cases() {
        let m = measure_two();
        let f = constant_field(Arc::clone(&m), 1.0, 2);
        assert!(order_compare(&f, &f, 0, 1e-12).unwrap());
        let g = constant_field(Arc::clone(&m), 0.25, 2);
        // f − g is a positive constant psd kernel
        assert!(order_compare(&f, &g, 0, 1e-12).unwrap());
        assert!(!order_compare(&g, &f, 0, 1e-8).unwrap());
    }

    #[test]
    fn cauchy_schwarz_on_psd_constant_kernel() {
        let f = constant_field(measure_two(), 2.0, 1);
        let result = cauchy_schwarz_check(&f, 0, 500, 99);
        assert!(
            result.max_normalized_violation <= 1e-12,
            "violation {result:?}"
        );
    }

    #[test]
    fn cauchy_schwarz_equality_for_identical_functions() {
        let m = measure_two();
        let f = constant_field(Arc::clone(&m), 1.5, 1);
        let phi = TestFunction::constant(DVector::from_vec(vec![0.8]), 2);
        let q = f.quadratic_form(0, &phi).unwrap();
        // with φ = ψ the inequality is an identity
        assert_relative_eq!(q * q, q * q, max_relative = 1e-15);
    }

    #[test]
    fn gram_matrix_symmetrized_before_eigenvalues() {
        // an asymmetric slice still yields a finite min eigenvalue
        let m = measure_two();
        let mut slice = DMatrix::zeros(2, 2);
        slice[(0, 1)] = 1.0;
        let f = KernelField::from_slices(Arc::clone(&m), Arc::new(vec![0.0]), vec![slice]);
        let r = f.check_symmetric_nonnegative(0).unwrap();
        assert!(r.symmetric_defect > 0.0);
        assert!(r.min_eigenvalue.is_finite());
    }

    #[test]
    fn row_and_column_bounds_match_hand_sum() {
        let m = Arc::new(MeasureAtoms::scalar(vec![0.0, 2.0], vec![2.0, 0.5]).unwrap());
        let slice = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let f = KernelField::from_slices(Arc::clone(&m), Arc::new(vec![0.0]), vec![slice]);
        // rows: j=0: 1·2 + 2·0.5 = 3 ; j=1: 3·2 + 4·0.5 = 8
        assert_relative_eq!(f.row_integral_sup(0), 8.0, max_relative = 1e-15);
        // cols: k=0: 2·1 + 0.5·3 = 3.5 ; k=1: 2·2 + 0.5·4 = 6
        assert_relative_eq!(f.col_integral_sup(0), 6.0, max_relative = 1e-15);
    }

    #[test]
    fn empty_measure_yields_degenerate_but_valid_field() {
        let m = Arc::new(MeasureAtoms::empty(1, 1));
        let f = KernelField::zeros(Arc::clone(&m), Arc::new(vec![0.0, 1.0]));
        assert_eq!(f.l1_norm(0), 0.0);
        let r = f.check_symmetric_nonnegative(0).unwrap();
        assert!(r.passes(0.0));
    }

    #[test]
    fn slice_csv_has_expected_shape() {
        let f = constant_field(measure_two(), 1.0, 3);
        let mut buf = Vec::new();
        f.write_csv(1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // header + 3 slices × 4 atom pairs
        assert_eq!(text.lines().count(), 1 + 3 * 4);
        assert!(text.starts_with("t,theta_j,theta_k,gamma_00"));
    }
}
