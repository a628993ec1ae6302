//! Independent dense ground truth for atom systems.
//!
//! For a purely atomic measure the kernel equation is a finite coupled
//! matrix ODE, componentwise
//!
//! ```text
//! Γ̇(θ_j,θ_k) = (θ_j+θ_k) Γ(θ_j,θ_k) − R(Γ)(θ_j,θ_k),      Γ_T = 0,
//! ```
//!
//! which this module integrates backwards with plain explicit RK4 at small
//! steps. Everything is deliberately written as naive loops over atoms —
//! separate code from the production solver — so agreement between the two
//! is a genuine cross-check rather than a tautology. The explicit scheme
//! needs `Δt·max(θ_j+θ_k)` small; a stiffness ratio above 0.1 is flagged.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field::KernelField;
use crate::lyapunov::uniform_grid;
use crate::measure::MeasureAtoms;
use crate::riccati::LqCoefficients;

pub const STIFFNESS_LIMIT: f64 = 0.1;
pub const BLOWUP_NORM: f64 = 1e12;

/// The assembled dense backward system for an atom measure.
#[derive(Debug, Clone)]
pub struct DenseRiccatiSystem {
    measure: MeasureAtoms,
    lq: LqCoefficients,
    dt: f64,
}

/// Build the dense system; `dt` is the target RK4 step (shrunk to divide the
/// sampling grid exactly).
pub fn assemble_dense(
    measure: &MeasureAtoms,
    lq: &LqCoefficients,
    dt: f64,
) -> Result<DenseRiccatiSystem> {
    if measure.dims() != (lq.state_dim(), lq.factor_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "measure weights are {}x{}, problem has d = {}, d' = {}",
            measure.d(),
            measure.d_prime(),
            lq.state_dim(),
            lq.factor_dim()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig("oracle step must be positive".into()));
    }
    Ok(DenseRiccatiSystem {
        measure: measure.clone(),
        lq: lq.clone(),
        dt,
    })
}

impl DenseRiccatiSystem {
    pub fn measure(&self) -> &MeasureAtoms {
        &self.measure
    }

    /// Largest mean-reversion sum `max_{j,k}(θ_j+θ_k)`; the stiffness scale.
    pub fn max_rate(&self) -> f64 {
        let worst = self.measure.nodes().iter().fold(0.0f64, |a, &x| a.max(x));
        2.0 * worst
    }

    /// Right-hand side of the backward ODE, `Γ̇ = (θ+τ)Γ − R(Γ)`, assembled
    /// with explicit atom loops.
    pub fn rhs(&self, slice: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = self.r_naive(slice)?;
        let n = self.measure.atom_count();
        let d = self.measure.d();
        let mut out = DMatrix::zeros(n * d, n * d);
        for j in 0..n {
            for k in 0..n {
                let rate = self.measure.node(j) + self.measure.node(k);
                for r_i in 0..d {
                    for c_i in 0..d {
                        let (row, col) = (j * d + r_i, k * d + c_i);
                        out[(row, col)] = rate * slice[(row, col)] - r[(row, col)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `R(Γ)` by direct summation over atoms; matrix inversion by LU rather
    /// than the solver's Cholesky route.
    fn r_naive(&self, slice: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.measure.atom_count();
        let d = self.measure.d();
        let dp = self.measure.d_prime();
        let lq = &self.lq;
        let block =
            |j: usize, k: usize| -> DMatrix<f64> { slice.view((j * d, k * d), (d, d)).into() };

        // u = Σ_{j,k} w_jᵀ Γ_{jk} w_k ; col_k = Σ_j w_jᵀ Γ_{jk} ; row_j = Σ_k Γ_{jk} w_k
        let mut u = DMatrix::zeros(dp, dp);
        let mut cols = vec![DMatrix::zeros(dp, d); n];
        let mut rows = vec![DMatrix::zeros(d, dp); n];
        for j in 0..n {
            for k in 0..n {
                let g = block(j, k);
                u += self.measure.weight(j).transpose() * &g * self.measure.weight(k);
                cols[k] += self.measure.weight(j).transpose() * &g;
                rows[j] += &g * self.measure.weight(k);
            }
        }
        let nhat = lq.n() + lq.f().transpose() * &u * lq.f();
        let nhat_inv = nhat.clone().try_inverse().ok_or(Error::NhatFloor {
            time: f64::NAN,
            min_eig: f64::NAN,
            floor: 0.0,
        })?;
        let s: Vec<DMatrix<f64>> = (0..n)
            .map(|k| lq.c().transpose() * &cols[k] + lq.f().transpose() * &u * lq.d())
            .collect();

        let mut out = DMatrix::zeros(n * d, n * d);
        let base = lq.q() + lq.d().transpose() * &u * lq.d();
        for j in 0..n {
            for k in 0..n {
                let v = &base + lq.b().transpose() * &cols[k] + &rows[j] * lq.b()
                    - s[j].transpose() * &nhat_inv * &s[k];
                out.view_mut((j * d, k * d), (d, d)).copy_from(&v);
            }
        }
        Ok(out)
    }
}

/// RK4 trajectory sampled on a uniform grid with `sample_steps` intervals.
#[derive(Debug)]
pub struct OracleTrajectory {
    pub field: KernelField,
    /// `dt_effective · max(θ_j+θ_k)`; explicit stepping wants this ≤ 0.1.
    pub stiffness_ratio: f64,
    pub stiffness_ok: bool,
    pub max_norm: f64,
}

/// Integrate backwards from `Γ_T = 0` and sample on the `sample_steps + 1`
/// point grid used by the main solver.
pub fn integrate_rk4(
    sys: &DenseRiccatiSystem,
    horizon: f64,
    sample_steps: usize,
) -> Result<OracleTrajectory> {
    if sample_steps == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidConfig(
            "oracle needs a positive horizon and at least one sample step".into(),
        ));
    }
    let cell = horizon / sample_steps as f64;
    let substeps = (cell / sys.dt).ceil().max(1.0) as usize;
    let h = cell / substeps as f64;
    let stiffness_ratio = h * sys.max_rate();

    let nd = sys.measure.atom_count() * sys.measure.d();
    let mut slices = vec![DMatrix::zeros(nd, nd); sample_steps + 1];
    // integrate in σ = T − t: dX/dσ = −Γ̇(X) = −(θ+τ)X + R(X)
    let mut x = DMatrix::zeros(nd, nd);
    let mut max_norm: f64 = 0.0;
    for cell_idx in 0..sample_steps {
        for _ in 0..substeps {
            let k1 = -sys.rhs(&x)?;
            let k2 = -sys.rhs(&(&x + &k1 * (0.5 * h)))?;
            let k3 = -sys.rhs(&(&x + &k2 * (0.5 * h)))?;
            let k4 = -sys.rhs(&(&x + &k3 * h))?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let norm = x.norm();
            max_norm = max_norm.max(norm);
            if !norm.is_finite() || norm > BLOWUP_NORM {
                return Err(Error::NonFinite(format!(
                    "oracle trajectory blew up (norm {norm:.3e})"
                )));
            }
        }
        // σ after this cell is (cell_idx+1)·cell, i.e. t-index M−(cell_idx+1)
        slices[sample_steps - cell_idx - 1] = x.clone();
    }
    let field = KernelField::from_slices(
        Arc::new(sys.measure.clone()),
        uniform_grid(horizon, sample_steps),
        slices,
    );
    Ok(OracleTrajectory {
        field,
        stiffness_ratio,
        stiffness_ok: stiffness_ratio <= STIFFNESS_LIMIT,
        max_norm,
    })
}
