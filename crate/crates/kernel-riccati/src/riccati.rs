//! Kernel Riccati equation: nonlinear right-hand side, feedback gains, the
//! monotone Lyapunov iteration, and the direct mild solve.
//!
//! With the measure reductions `col`, `row`, `U` of a slice (see
//! [`crate::field`]), the Riccati right-hand side is
//!
//! ```text
//! R(Γ)(θ,τ) = Q + Dᵀ U D + Bᵀ col(τ) + row(θ) B − S(θ)ᵀ N̂⁻¹ S(τ)
//! S(τ)      = Cᵀ col(τ) + Fᵀ U D
//! N̂        = N + Fᵀ U F
//! ```
//!
//! and the feedback gain is `Θ(τ) = −N̂⁻¹ S(τ)`. The iterative solver builds
//! `Γ⁰` from the Lyapunov equation with coefficients `(Q, B, D)` and then
//! repeats: compute `Θⁱ` from `Γⁱ`, solve the Lyapunov equation with
//!
//! ```text
//! Q̃ⁱ(θ,τ) = Q + Θⁱ(θ)ᵀ N Θⁱ(τ),   B̃ⁱ = B + CΘⁱ,   D̃ⁱ = D + FΘⁱ,
//! ```
//!
//! to get `Γ^{i+1}`, until the sup-in-time `L¹(μ⊗μ)` difference of
//! consecutive iterates falls below tolerance. With `Θ` computed from the
//! slice itself the closed-loop right-hand side collapses algebraically to
//! `R`, so the iteration's fixed point solves the same discrete mild
//! equation as the direct stepper; the two solvers cross-validate
//! uniqueness. Along the way the iterates decrease in the kernel order and
//! `N̂` keeps a positivity margin, both of which are monitored.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{gram_min_eigenvalue, slice_l1_norm, KernelField};
use crate::lyapunov::{
    self, backward_mild_solve, replicate_block, replicate_wide, uniform_grid, AssemblyContext,
    LyapunovCoefficients, StepAssembler, StepCoefficients, StepGrid,
};
use crate::measure::MeasureAtoms;

/// Relative tolerance for slice symmetry checks.
pub const SYMMETRY_RTOL: f64 = 1e-10;
/// Gram min-eigenvalue must stay above `-GRAM_RTOL · sup‖Γ‖_{L¹}`.
pub const GRAM_RTOL: f64 = 1e-8;

/// Constant problem data of the linear-quadratic kernel Riccati equation.
#[derive(Debug, Clone)]
pub struct LqCoefficients {
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    c: DMatrix<f64>,
    f: DMatrix<f64>,
    q: DMatrix<f64>,
    n: DMatrix<f64>,
    lambda_margin: f64,
}

impl LqCoefficients {
    /// Validates shapes (`B, D` are `d'×d`, `C, F` are `d'×m`, `Q` is `d×d`
    /// symmetric psd, `N` is `m×m` with `N − λI` psd, `λ > 0`).
    pub fn new(
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        c: DMatrix<f64>,
        f: DMatrix<f64>,
        q: DMatrix<f64>,
        n: DMatrix<f64>,
        lambda_margin: f64,
    ) -> Result<Self> {
        let (dp, dd) = b.shape();
        if d.shape() != (dp, dd) {
            return Err(Error::InvalidCoefficients(
                "B and D must share the d'×d shape".into(),
            ));
        }
        let m = c.ncols();
        if c.nrows() != dp || f.shape() != (dp, m) {
            return Err(Error::InvalidCoefficients(
                "C and F must share the d'×m shape".into(),
            ));
        }
        if q.shape() != (dd, dd) {
            return Err(Error::InvalidCoefficients(format!("Q must be {dd}x{dd}")));
        }
        if n.shape() != (m, m) {
            return Err(Error::InvalidCoefficients(format!("N must be {m}x{m}")));
        }
        if !(lambda_margin > 0.0) {
            return Err(Error::InvalidCoefficients(
                "lambda_margin must be positive".into(),
            ));
        }
        check_symmetric_psd(&q, 0.0, "Q")?;
        check_symmetric_psd(&n, lambda_margin, "N")?;
        Ok(Self {
            b,
            d,
            c,
            f,
            q,
            n,
            lambda_margin,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn factor_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn lambda_margin(&self) -> f64 {
        self.lambda_margin
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> &DMatrix<f64> {
        &self.n
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    fn check_measure(&self, measure: &MeasureAtoms) -> Result<()> {
        if measure.dims() != (self.state_dim(), self.factor_dim()) {
            return Err(Error::DimensionMismatch(format!(
                "measure weights are {}x{} but the problem has d = {}, d' = {}",
                measure.d(),
                measure.d_prime(),
                self.state_dim(),
                self.factor_dim()
            )));
        }
        Ok(())
    }
}

fn check_symmetric_psd(m: &DMatrix<f64>, shift: f64, name: &str) -> Result<()> {
    let scale = 1.0 + m.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let defect = (m - m.transpose())
        .iter()
        .fold(0.0f64, |a, &x| a.max(x.abs()));
    if defect > 1e-10 * scale {
        return Err(Error::InvalidCoefficients(format!(
            "{name} is not symmetric (defect {defect:.3e})"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let min_eig = sym
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &x| a.min(x));
    if min_eig < shift - 1e-10 * scale {
        return Err(Error::InvalidCoefficients(format!(
            "{name} violates its positivity requirement: min eigenvalue {min_eig:.6e} < {shift:.6e}"
        )));
    }
    Ok(())
}

/// Feedback gains `Θ_t(θ_k)` (`m×d` per atom) on the solver grid, stored as
/// one wide `m×(n·d)` matrix per time step.
#[derive(Debug, Clone)]
pub struct FeedbackField {
    time_grid: Arc<Vec<f64>>,
    control_dim: usize,
    state_dim: usize,
    atom_count: usize,
    slices: Vec<DMatrix<f64>>,
}

impl FeedbackField {
    pub fn times(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    pub(crate) fn slice(&self, s: usize) -> &DMatrix<f64> {
        &self.slices[s]
    }

    /// Copy of the gain block `Θ_{t_s}(θ_k)`.
    pub fn theta(&self, s: usize, k: usize) -> DMatrix<f64> {
        self.slices[s]
            .view((0, k * self.state_dim), (self.control_dim, self.state_dim))
            .into()
    }

    /// Largest per-atom gain norm over the grid.
    pub fn sup_norm(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for slice in &self.slices {
            for k in 0..self.atom_count {
                worst = worst.max(
                    slice
                        .view((0, k * self.state_dim), (self.control_dim, self.state_dim))
                        .norm(),
                );
            }
        }
        worst
    }

    fn zeros_like(other: &FeedbackField) -> FeedbackField {
        FeedbackField {
            time_grid: Arc::clone(&other.time_grid),
            control_dim: other.control_dim,
            state_dim: other.state_dim,
            atom_count: other.atom_count,
            slices: vec![
                DMatrix::zeros(other.control_dim, other.atom_count * other.state_dim);
                other.slices.len()
            ],
        }
    }

    /// CSV rows `(t, theta_k, Theta entries row-major)`.
    pub fn write_csv<W: Write>(&self, measure: &MeasureAtoms, out: &mut W) -> std::io::Result<()> {
        write!(out, "t,theta")?;
        for r in 0..self.control_dim {
            for c in 0..self.state_dim {
                write!(out, ",Theta_{r}{c}")?;
            }
        }
        writeln!(out)?;
        for (s, t) in self.time_grid.iter().enumerate() {
            for k in 0..self.atom_count {
                write!(out, "{:.16e},{:.16e}", t, measure.node(k))?;
                for r in 0..self.control_dim {
                    for c in 0..self.state_dim {
                        write!(out, ",{:.16e}", self.slices[s][(r, k * self.state_dim + c)])?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Measure reductions of one slice, shared by the right-hand side and the
/// feedback computation.
struct SliceIntegrals {
    cols: DMatrix<f64>, // d' × (n·d)
    rows: DMatrix<f64>, // (n·d) × d'
    u: DMatrix<f64>,    // d' × d'
}

impl SliceIntegrals {
    fn new(slice: &DMatrix<f64>, wtall: &DMatrix<f64>) -> Self {
        let cols = wtall.transpose() * slice;
        let u = &cols * wtall;
        let rows = slice * wtall;
        Self { cols, rows, u }
    }
}

/// `N̂ = N + Fᵀ U F`, Cholesky-factored; `Err(min_eig)` when the smallest
/// eigenvalue drops below `floor`.
fn nhat_cholesky(
    lq: &LqCoefficients,
    u: &DMatrix<f64>,
    floor: f64,
) -> std::result::Result<(Cholesky<f64, Dyn>, f64), f64> {
    let nhat = &lq.n + lq.f.transpose() * u * &lq.f;
    let sym = (&nhat + nhat.transpose()) * 0.5;
    let min_eig = sym
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &x| a.min(x));
    if min_eig < floor {
        return Err(min_eig);
    }
    match Cholesky::new(sym) {
        Some(chol) => Ok((chol, min_eig)),
        None => Err(min_eig),
    }
}

/// `S` evaluated at every atom as a wide `m×(n·d)` matrix:
/// block `k` is `Cᵀ col(θ_k) + Fᵀ U D`.
fn s_wide(lq: &LqCoefficients, integrals: &SliceIntegrals, atom_count: usize) -> DMatrix<f64> {
    let mut out = lq.c.transpose() * &integrals.cols;
    let base = lq.f.transpose() * &integrals.u * &lq.d; // m × d
    let d = lq.state_dim();
    for k in 0..atom_count {
        let mut block = out.view_mut((0, k * d), (lq.control_dim(), d));
        block += &base;
    }
    out
}

/// Nonlinear right-hand side `R(Γ)` on a slice, as the full `(n·d)×(n·d)`
/// block matrix. `floor` guards the `N̂` inversion.
pub fn riccati_rhs(
    measure: &MeasureAtoms,
    lq: &LqCoefficients,
    slice: &DMatrix<f64>,
    floor: f64,
) -> Result<DMatrix<f64>> {
    lq.check_measure(measure)?;
    let wtall = measure.stacked_weights();
    riccati_rhs_with(lq, slice, &wtall, measure.atom_count(), floor).map_err(|min_eig| {
        Error::NhatFloor {
            time: f64::NAN,
            min_eig,
            floor,
        }
    })
}

fn riccati_rhs_with(
    lq: &LqCoefficients,
    slice: &DMatrix<f64>,
    wtall: &DMatrix<f64>,
    atom_count: usize,
    floor: f64,
) -> std::result::Result<DMatrix<f64>, f64> {
    let integrals = SliceIntegrals::new(slice, wtall);
    let (chol, _) = nhat_cholesky(lq, &integrals.u, floor)?;
    let d = lq.state_dim();
    let base = &lq.q + lq.d.transpose() * &integrals.u * &lq.d;
    let mut out = replicate_block(&base, atom_count);
    let bt_cols = lq.b.transpose() * &integrals.cols; // d × (n·d)
    let rows_b = &integrals.rows * &lq.b; // (n·d) × d
    let nd = atom_count * d;
    for j in 0..atom_count {
        let mut band = out.view_mut((j * d, 0), (d, nd));
        band += &bt_cols;
    }
    for k in 0..atom_count {
        let mut band = out.view_mut((0, k * d), (nd, d));
        band += &rows_b;
    }
    let s = s_wide(lq, &integrals, atom_count);
    let solved = chol.solve(&s); // N̂⁻¹ S, m × (n·d)
    out -= s.transpose() * solved;
    Ok(out)
}

/// Feedback gain slice `Θ(θ_k) = −N̂⁻¹ (Fᵀ U D + Cᵀ col(θ_k))` as a wide
/// `m×(n·d)` matrix.
pub fn theta_feedback(
    measure: &MeasureAtoms,
    lq: &LqCoefficients,
    slice: &DMatrix<f64>,
    floor: f64,
) -> Result<DMatrix<f64>> {
    lq.check_measure(measure)?;
    let wtall = measure.stacked_weights();
    let integrals = SliceIntegrals::new(slice, &wtall);
    let (chol, _) = nhat_cholesky(lq, &integrals.u, floor).map_err(|min_eig| Error::NhatFloor {
        time: f64::NAN,
        min_eig,
        floor,
    })?;
    let s = s_wide(lq, &integrals, measure.atom_count());
    Ok(-chol.solve(&s))
}

/// Feedback gains of a whole solved field, plus the smallest `N̂` eigenvalue
/// seen across the grid.
pub fn feedback_field(
    measure: &MeasureAtoms,
    lq: &LqCoefficients,
    gamma: &KernelField,
    floor: f64,
) -> Result<(FeedbackField, f64)> {
    lq.check_measure(measure)?;
    let wtall = measure.stacked_weights();
    let n = measure.atom_count();
    let mut slices = Vec::with_capacity(gamma.times().len());
    let mut nhat_min = f64::INFINITY;
    for (s, &t) in gamma.times().iter().enumerate() {
        let integrals = SliceIntegrals::new(gamma.slice(s), &wtall);
        let (chol, min_eig) =
            nhat_cholesky(lq, &integrals.u, floor).map_err(|min_eig| Error::NhatFloor {
                time: t,
                min_eig,
                floor,
            })?;
        nhat_min = nhat_min.min(min_eig);
        let s_mat = s_wide(lq, &integrals, n);
        slices.push(-chol.solve(&s_mat));
    }
    Ok((
        FeedbackField {
            time_grid: gamma.shared_times(),
            control_dim: lq.control_dim(),
            state_dim: lq.state_dim(),
            atom_count: n,
            slices,
        },
        nhat_min,
    ))
}

/// Per-step quadratic weight of a feedback-driven Lyapunov source.
enum QuadWeight {
    Constant(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

/// Lyapunov coefficients of the closed-loop form
/// `Q̃_s(θ,τ) = q₀ + G_s(θ)ᵀ W_s G_s(τ)`, `B̃_s = b₀ + C·H_s`,
/// `D̃_s = d₀ + F·H_s`, with `G` the quadratic field (`Θⁱ` in the recursion,
/// `Θ^{i-1}−Θⁱ` in difference equations) and `H` the linear field (`Θⁱ`).
struct FeedbackCoeffs {
    q_base: DMatrix<f64>,
    b_base: DMatrix<f64>,
    d_base: DMatrix<f64>,
    c: DMatrix<f64>,
    f: DMatrix<f64>,
    quad_weight: QuadWeight,
    quad_field: FeedbackField,
    lin_field: FeedbackField,
}

impl StepAssembler for FeedbackCoeffs {
    fn assemble(&self, s: usize, _t: f64, ctx: &AssemblyContext) -> Result<StepCoefficients> {
        if s >= self.quad_field.slices.len() {
            return Err(Error::DimensionMismatch(
                "feedback coefficients queried outside their grid".into(),
            ));
        }
        let g = &self.quad_field.slices[s];
        let h = &self.lin_field.slices[s];
        let w = match &self.quad_weight {
            QuadWeight::Constant(w) => w,
            QuadWeight::PerStep(v) => &v[s],
        };
        let mut q_slice = replicate_block(&self.q_base, ctx.atom_count);
        q_slice += g.transpose() * w * g;
        let b = replicate_wide(&self.b_base, ctx.atom_count) + &self.c * h;
        let d = replicate_wide(&self.d_base, ctx.atom_count) + &self.f * h;
        Ok(StepCoefficients {
            q_slice,
            b1: b.clone(),
            b2: b,
            d1: d.clone(),
            d2: d,
        })
    }

    fn symmetric(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolveOptions {
    pub max_outer_iter: usize,
    /// Stopping tolerance on `sup_t ‖Γ^{i+1}−Γⁱ‖_{L¹}`; `None` picks
    /// `1e-8·(1 + sup_t‖Γ⁰‖_{L¹})`.
    pub outer_tol: Option<f64>,
    pub lyapunov: lyapunov::SolveOptions,
    /// Hard floor for the smallest `N̂` eigenvalue; `None` picks `λ/2`.
    pub nhat_min_eig_floor: Option<f64>,
    /// Time-grid stride of the per-iteration monotonicity check; `None`
    /// picks `max(1, M/64)`.
    pub monotonicity_stride: Option<usize>,
    /// Time-grid stride of the final psd sweep.
    pub final_check_stride: usize,
    /// Solve the difference Lyapunov equation for every consecutive iterate
    /// pair and record the mismatch (doubles the solve cost).
    pub check_delta_residual: bool,
}

impl Default for RiccatiSolveOptions {
    fn default() -> Self {
        Self {
            max_outer_iter: 200,
            outer_tol: None,
            lyapunov: lyapunov::SolveOptions::default(),
            nhat_min_eig_floor: None,
            monotonicity_stride: None,
            final_check_stride: 1,
            check_delta_residual: false,
        }
    }
}

/// Property-check summary of a Riccati solve.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyChecks {
    pub terminal_zero: bool,
    /// Worst slice symmetry defect and the entry scale it is compared to.
    pub symmetry_defect: f64,
    pub symmetry_scale: f64,
    pub symmetry_ok: bool,
    /// Most negative Gram eigenvalue across checked slices; the scale is the
    /// sup `L¹` norm.
    pub gram_min_eig: f64,
    pub gram_scale: f64,
    pub gram_ok: bool,
    /// Most negative Gram eigenvalue of `Γⁱ − Γ^{i+1}` across iterations.
    pub monotonicity_min_eig: f64,
    pub monotonicity_tol: f64,
    pub monotonicity_ok: bool,
    /// Smallest `N̂` eigenvalue seen, and the floor it must respect.
    pub nhat_min_eig: f64,
    pub nhat_floor: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub outer_iterations: usize,
    /// `sup_t ‖Γ^{i+1}−Γⁱ‖_{L¹}` per outer iteration.
    pub iteration_diffs: Vec<f64>,
    /// Sup defect of the discrete mild Riccati recursion at the solution.
    pub mild_residual: f64,
    pub step_error_estimate: f64,
    pub sup_l1_norm: f64,
    /// `max_{t,θ} ∫ |μ|(dτ)|Γ_t(θ,τ)|`.
    pub estimate_m: f64,
    pub checks: PropertyChecks,
    /// Mismatch of each consecutive iterate difference against its own
    /// Lyapunov equation, when enabled.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub delta_residuals: Vec<f64>,
    /// Report of the last inner Lyapunov solve.
    pub lyapunov: lyapunov::SolveReport,
}

/// Row-integral estimate `max_{t,θ} Σ_k |w_k|·|Γ_t(θ,θ_k)|` of a solved
/// field.
pub fn estimate_report(field: &KernelField) -> f64 {
    (0..field.times().len())
        .map(|s| field.row_integral_sup(s))
        .fold(0.0, f64::max)
}

/// Monotone iteration through Lyapunov solves with feedback-updated
/// coefficients. Returns the limit field, its feedback gains and the report.
pub fn solve_riccati_iterative(
    measure: &Arc<MeasureAtoms>,
    lq: &LqCoefficients,
    horizon: f64,
    opts: &RiccatiSolveOptions,
) -> Result<(KernelField, FeedbackField, SolveReport)> {
    lq.check_measure(measure)?;
    let floor = opts.nhat_min_eig_floor.unwrap_or(lq.lambda_margin / 2.0);
    let steps = opts.lyapunov.time_steps;
    let mono_stride = opts
        .monotonicity_stride
        .unwrap_or_else(|| (steps / 64).max(1));

    // Γ⁰: open-loop Lyapunov solve with (Q, B, D)
    let init_coeffs = LyapunovCoefficients::constant(lq.q.clone(), lq.b.clone(), lq.d.clone());
    let (mut prev, mut lyap_report) =
        lyapunov::solve_lyapunov(measure, &init_coeffs, horizon, &opts.lyapunov)?;
    let outer_tol = opts
        .outer_tol
        .unwrap_or_else(|| 1e-8 * (1.0 + prev.sup_l1_norm()));

    let mut prev_theta: Option<FeedbackField> = None;
    let mut diffs = Vec::new();
    let mut delta_residuals = Vec::new();
    let mut nhat_min_seen = f64::INFINITY;
    let mut mono_min_eig = f64::INFINITY;
    let mut mono_tol: f64 = 0.0;
    let mut solution: Option<KernelField> = None;

    for _ in 0..opts.max_outer_iter {
        let (theta, nhat_min) = feedback_field(measure, lq, &prev, floor)?;
        nhat_min_seen = nhat_min_seen.min(nhat_min);
        let coeffs = LyapunovCoefficients::from_assembler(Box::new(FeedbackCoeffs {
            q_base: lq.q.clone(),
            b_base: lq.b.clone(),
            d_base: lq.d.clone(),
            c: lq.c.clone(),
            f: lq.f.clone(),
            quad_weight: QuadWeight::Constant(lq.n.clone()),
            quad_field: theta.clone(),
            lin_field: theta.clone(),
        }));
        let (next, report) = lyapunov::solve_lyapunov(measure, &coeffs, horizon, &opts.lyapunov)?;

        let mut diff: f64 = 0.0;
        for s in 0..=steps {
            diff = diff.max(slice_l1_norm(&(next.slice(s) - prev.slice(s)), measure));
        }
        diffs.push(diff);

        // iterate monotonicity Γⁱ ⪰ Γ^{i+1} up to truncation
        mono_tol = 10.0 * report.step_error_estimate
            + 1e-10 * (1.0 + prev.sup_l1_norm().max(next.sup_l1_norm()));
        let mut s = 0;
        loop {
            let d = prev.slice(s) - next.slice(s);
            mono_min_eig = mono_min_eig.min(gram_min_eigenvalue(&d, measure));
            if s == steps {
                break;
            }
            s = (s + mono_stride).min(steps);
        }

        if opts.check_delta_residual {
            delta_residuals.push(delta_mismatch(
                measure,
                lq,
                &prev,
                &next,
                &theta,
                prev_theta.as_ref(),
                horizon,
                &opts.lyapunov,
            )?);
        }

        lyap_report = report;
        let converged = diff <= outer_tol;
        prev_theta = Some(theta);
        prev = next;
        if converged {
            solution = Some(prev.clone());
            break;
        }
    }

    let gamma = solution.ok_or_else(|| {
        Error::NoConvergence(format!(
            "outer iteration above tolerance {outer_tol:.3e} after {} rounds (last diff {:.3e})",
            opts.max_outer_iter,
            diffs.last().copied().unwrap_or(f64::NAN)
        ))
    })?;
    // gains of the limit field itself, for export and for the report
    let (theta_final, nhat_min) = feedback_field(measure, lq, &gamma, floor)?;
    nhat_min_seen = nhat_min_seen.min(nhat_min);

    // mild-equation residual of the limit
    let wtall = measure.stacked_weights();
    let grid = StepGrid::new(measure, horizon / steps as f64);
    let mut mild_residual: f64 = 0.0;
    let mut rhs_slices: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        rhs_slices.push(
            riccati_rhs_with(lq, gamma.slice(s), &wtall, measure.atom_count(), floor).map_err(
                |min_eig| Error::NhatFloor {
                    time: gamma.times()[s],
                    min_eig,
                    floor,
                },
            )?,
        );
    }
    for s in 0..steps {
        let fhat = (&rhs_slices[s] + &rhs_slices[s + 1]) * 0.5;
        let defect = gamma.slice(s) - grid.step(gamma.slice(s + 1), &fhat);
        mild_residual = mild_residual.max(slice_l1_norm(&defect, measure));
    }

    let checks = final_checks(
        &gamma,
        opts.final_check_stride,
        mono_min_eig,
        mono_tol,
        nhat_min_seen,
        floor,
    );
    let report = SolveReport {
        outer_iterations: diffs.len(),
        iteration_diffs: diffs,
        mild_residual,
        step_error_estimate: lyap_report.step_error_estimate,
        sup_l1_norm: gamma.sup_l1_norm(),
        estimate_m: estimate_report(&gamma),
        checks,
        delta_residuals,
        lyapunov: lyap_report,
    };
    Ok((gamma, theta_final, report))
}

/// Backward exponential-trapezoidal stepping directly on the nonlinear mild
/// equation; the uniqueness cross-check for the iterative solver.
pub fn solve_riccati_direct(
    measure: &Arc<MeasureAtoms>,
    lq: &LqCoefficients,
    horizon: f64,
    opts: &RiccatiSolveOptions,
) -> Result<(KernelField, SolveReport)> {
    lq.check_measure(measure)?;
    let floor = opts.nhat_min_eig_floor.unwrap_or(lq.lambda_margin / 2.0);
    let steps = opts.lyapunov.time_steps;
    let wtall = measure.stacked_weights();
    let n = measure.atom_count();
    let (slices, stats) = backward_mild_solve(
        measure,
        horizon,
        steps,
        opts.lyapunov.inner_rtol,
        opts.lyapunov.inner_max_iter,
        |_, t, slice| {
            riccati_rhs_with(lq, slice, &wtall, n, floor).map_err(|min_eig| Error::NhatFloor {
                time: t,
                min_eig,
                floor,
            })
        },
    )?;
    let gamma = KernelField::from_slices(Arc::clone(measure), uniform_grid(horizon, steps), slices);
    let (_, nhat_min) = feedback_field(measure, lq, &gamma, floor)?;
    let checks = final_checks(
        &gamma,
        opts.final_check_stride,
        f64::INFINITY,
        0.0,
        nhat_min,
        floor,
    );
    let lyap_report = lyapunov::SolveReport {
        method: opts.lyapunov.method,
        steps,
        sup_l1_norm: gamma.sup_l1_norm(),
        row_bound: estimate_report(&gamma),
        col_bound: (0..=steps)
            .map(|s| gamma.col_integral_sup(s))
            .fold(0.0, f64::max),
        iterations: stats.total_inner_iterations,
        residual: stats.residual,
        coefficient_bound: f64::NAN,
        step_error_estimate: stats.step_error_estimate,
        picard: None,
    };
    let report = SolveReport {
        outer_iterations: 1,
        iteration_diffs: Vec::new(),
        mild_residual: stats.residual,
        step_error_estimate: stats.step_error_estimate,
        sup_l1_norm: gamma.sup_l1_norm(),
        estimate_m: estimate_report(&gamma),
        checks,
        delta_residuals: Vec::new(),
        lyapunov: lyap_report,
    };
    Ok((gamma, report))
}

fn final_checks(
    gamma: &KernelField,
    stride: usize,
    mono_min_eig: f64,
    mono_tol: f64,
    nhat_min_eig: f64,
    nhat_floor: f64,
) -> PropertyChecks {
    let steps = gamma.step_count();
    let terminal_zero = gamma.slice(steps).iter().all(|&x| x == 0.0);
    let mut symmetry_defect: f64 = 0.0;
    let mut symmetry_scale: f64 = 0.0;
    for s in 0..=steps {
        symmetry_defect = symmetry_defect.max(gamma.symmetric_defect(s));
        symmetry_scale = symmetry_scale.max(gamma.slice_scale(s));
    }
    let gram_scale = gamma.sup_l1_norm();
    let mut gram_min_eig = f64::INFINITY;
    let stride = stride.max(1);
    let mut s = 0;
    loop {
        gram_min_eig = gram_min_eig.min(gram_min_eigenvalue(gamma.slice(s), gamma.measure()));
        if s == steps {
            break;
        }
        s = (s + stride).min(steps);
    }
    let symmetry_ok = symmetry_defect <= SYMMETRY_RTOL * (1.0 + symmetry_scale);
    let gram_ok = gram_min_eig >= -GRAM_RTOL * gram_scale;
    let monotonicity_ok = mono_min_eig >= -mono_tol;
    let nhat_ok = nhat_min_eig >= nhat_floor;
    PropertyChecks {
        terminal_zero,
        symmetry_defect,
        symmetry_scale,
        symmetry_ok,
        gram_min_eig,
        gram_scale,
        gram_ok,
        monotonicity_min_eig: if mono_min_eig.is_finite() {
            mono_min_eig
        } else {
            0.0
        },
        monotonicity_tol: mono_tol,
        monotonicity_ok,
        nhat_min_eig,
        nhat_floor,
        passed: terminal_zero && symmetry_ok && gram_ok && monotonicity_ok && nhat_ok,
    }
}

/// Difference-equation consistency check. `Δ = Γⁱ − Γ^{i+1}` must solve the
/// Lyapunov equation with source `ρᵀ N̂ⁱ ρ` (`ρ = Θ^{i−1} − Θⁱ`, zero for
/// `i = 0`) and closed-loop coefficients from `Θⁱ`; returns the sup-in-time
/// `L¹` mismatch between that solve and the direct difference.
pub fn delta_residual(
    measure: &Arc<MeasureAtoms>,
    lq: &LqCoefficients,
    gamma_i: &KernelField,
    gamma_next: &KernelField,
    theta_prev: Option<&FeedbackField>,
    horizon: f64,
    lyap_opts: &lyapunov::SolveOptions,
    floor: f64,
) -> Result<f64> {
    let (theta_i, _) = feedback_field(measure, lq, gamma_i, floor)?;
    delta_mismatch(
        measure,
        lq,
        gamma_i,
        gamma_next,
        &theta_i,
        theta_prev,
        horizon,
        lyap_opts,
    )
}

#[allow(clippy::too_many_arguments)]
fn delta_mismatch(
    measure: &Arc<MeasureAtoms>,
    lq: &LqCoefficients,
    gamma_i: &KernelField,
    gamma_next: &KernelField,
    theta_i: &FeedbackField,
    theta_prev: Option<&FeedbackField>,
    horizon: f64,
    lyap_opts: &lyapunov::SolveOptions,
) -> Result<f64> {
    if gamma_i.times() != gamma_next.times() {
        return Err(Error::DimensionMismatch(
            "iterates must share one time grid".into(),
        ));
    }
    let steps = gamma_i.step_count();
    let wtall = measure.stacked_weights();
    // ρ = Θ^{i-1} − Θⁱ and the per-step weight N̂ⁱ from Γⁱ
    let zero_theta;
    let prev = match theta_prev {
        Some(t) => t,
        None => {
            zero_theta = FeedbackField::zeros_like(theta_i);
            &zero_theta
        }
    };
    let mut rho_slices = Vec::with_capacity(steps + 1);
    let mut nhat_slices = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        rho_slices.push(prev.slice(s) - theta_i.slice(s));
        let integrals = SliceIntegrals::new(gamma_i.slice(s), &wtall);
        let nhat = &lq.n + lq.f.transpose() * &integrals.u * &lq.f;
        nhat_slices.push((&nhat + nhat.transpose()) * 0.5);
    }
    let rho = FeedbackField {
        time_grid: gamma_i.shared_times(),
        control_dim: theta_i.control_dim,
        state_dim: theta_i.state_dim,
        atom_count: theta_i.atom_count,
        slices: rho_slices,
    };
    let coeffs = LyapunovCoefficients::from_assembler(Box::new(FeedbackCoeffs {
        q_base: DMatrix::zeros(lq.state_dim(), lq.state_dim()),
        b_base: lq.b.clone(),
        d_base: lq.d.clone(),
        c: lq.c.clone(),
        f: lq.f.clone(),
        quad_weight: QuadWeight::PerStep(nhat_slices),
        quad_field: rho,
        lin_field: theta_i.clone(),
    }));
    let (delta_hat, _) = lyapunov::solve_lyapunov(measure, &coeffs, horizon, lyap_opts)?;
    let mut mismatch: f64 = 0.0;
    for s in 0..=steps {
        let direct = gamma_i.slice(s) - gamma_next.slice(s);
        mismatch = mismatch.max(slice_l1_norm(&(&direct - delta_hat.slice(s)), measure));
    }
    Ok(mismatch)
}
