//! Backward Lyapunov integral equation on the atom grid.
//!
//! The mild equation is
//!
//! ```text
//! Ψ_t(θ,τ) = ∫_t^T exp(-(θ+τ)(s-t)) F(s, Ψ_s)(θ,τ) ds,      Ψ_T = 0,
//! F(s,Ψ)(θ,τ) = Q̃_s(θ,τ) + D̃¹_s(θ)ᵀ U D̃²_s(τ)
//!             + B̃¹_s(θ)ᵀ col(τ) + row(θ) B̃²_s(τ),
//! ```
//!
//! with `U`, `col`, `row` the measure reductions of `Ψ_s` (see [`crate::field`]).
//!
//! Two solvers:
//!
//! - **Exponential integrator** (default). One backward step of size `Δ`
//!   multiplies the later slice by the exact decay `exp(-(θ_j+θ_k)Δ)` and
//!   adds `Δ·φ₁((θ_j+θ_k)Δ)` times the trapezoidal average of `F` over the
//!   step. The decay factors are exact, so stiff quadrature nodes impose no
//!   step restriction; the trapezoidal average makes the step implicit in
//!   `Ψ_{t_s}`, resolved by a short fixed-point loop (the step map contracts
//!   for small `Δ`).
//! - **Picard contraction sweeps** (verification mode). Iterates the mild
//!   operator from `Ψ = 0`, measuring successive differences in the
//!   `λ`-weighted norm `sup_t e^{-λ(T-t)} ‖·‖_{L¹(μ⊗μ)}`; the ratios must
//!   decay geometrically once `λ` is large enough. Both methods share the
//!   per-step quadrature, so they converge to the same discrete solution.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{slice_l1_norm, KernelField};
use crate::measure::MeasureAtoms;
use crate::numeric::phi1;

/// Solution method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExponentialIntegrator,
    PicardContraction,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub method: Method,
    /// Number of uniform backward steps `M`; the grid has `M + 1` points.
    pub time_steps: usize,
    /// Weight of the Picard norm; `None` picks `4κ(1 + ‖K̄‖_{L¹} + ‖K̄‖²_{L²})`.
    pub picard_lambda: Option<f64>,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Relative tolerance of the per-step fixed-point loop.
    pub inner_rtol: f64,
    pub inner_max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: Method::ExponentialIntegrator,
            time_steps: 1000,
            picard_lambda: None,
            picard_tol: 1e-10,
            picard_max_iter: 200,
            inner_rtol: 1e-12,
            inner_max_iter: 100,
        }
    }
}

/// Successive-difference trace of a Picard run.
#[derive(Debug, Clone, Serialize)]
pub struct PicardTrace {
    pub lambda: f64,
    /// `λ`-weighted norms of successive sweep differences.
    pub weighted_diffs: Vec<f64>,
    /// Unweighted `sup_t L¹` norms of the same differences; these drive the
    /// stopping rule, since the weighted norm suppresses early times by
    /// `e^{-λT}`.
    pub unweighted_diffs: Vec<f64>,
    /// Ratios of consecutive weighted differences.
    pub ratios: Vec<f64>,
    /// Set when a ratio reached 1; advisory to increase `λ`.
    pub non_contraction: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub method: Method,
    pub steps: usize,
    pub sup_l1_norm: f64,
    /// `max_{t,θ} ∫ |μ|(dτ) |Ψ_t(θ,τ)|`.
    pub row_bound: f64,
    /// `max_{t,τ} ∫ |μ|(dθ) |Ψ_t(θ,τ)|`.
    pub col_bound: f64,
    /// Inner fixed-point iterations (exponential integrator) or sweeps
    /// (Picard).
    pub iterations: usize,
    /// Largest `L¹(μ⊗μ)` defect of the discrete mild recursion at the
    /// returned slices.
    pub residual: f64,
    /// Sup-norm bound `κ` of the assembled coefficients.
    pub coefficient_bound: f64,
    /// Global truncation estimate `T·max_s‖F_{s+1}-2F_s+F_{s-1}‖_{L¹}/12`
    /// of the trapezoidal average.
    pub step_error_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardTrace>,
}

/// Assembled coefficient data for one time step: the `(n·d)×(n·d)` block
/// matrix of `Q̃` and four wide `d'×(n·d)` coefficient rows.
pub(crate) struct StepCoefficients {
    pub q_slice: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
}

impl StepCoefficients {
    /// Coefficient bound `max|Q̃| + Σ_i (max|B̃ⁱ| + max|D̃ⁱ|^{1/2})` with
    /// Frobenius block norms.
    pub fn kappa(&self, d: usize) -> f64 {
        let n = if d == 0 { 0 } else { self.q_slice.nrows() / d };
        let mut q_max: f64 = 0.0;
        for j in 0..n {
            for k in 0..n {
                q_max = q_max.max(self.q_slice.view((j * d, k * d), (d, d)).norm());
            }
        }
        let wide_max = |m: &DMatrix<f64>| -> f64 {
            let mut worst: f64 = 0.0;
            for k in 0..n {
                worst = worst.max(m.view((0, k * d), (m.nrows(), d)).norm());
            }
            worst
        };
        q_max
            + wide_max(&self.b1)
            + wide_max(&self.b2)
            + wide_max(&self.d1).sqrt()
            + wide_max(&self.d2).sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        let all = self
            .q_slice
            .iter()
            .chain(self.b1.iter())
            .chain(self.b2.iter())
            .chain(self.d1.iter())
            .chain(self.d2.iter())
            .all(|x| x.is_finite());
        if all {
            Ok(())
        } else {
            Err(Error::NonFinite("coefficient evaluation".into()))
        }
    }
}

pub(crate) struct AssemblyContext {
    pub atom_count: usize,
    pub d: usize,
    pub d_prime: usize,
}

impl AssemblyContext {
    pub fn for_measure(measure: &MeasureAtoms) -> Self {
        Self {
            atom_count: measure.atom_count(),
            d: measure.d(),
            d_prime: measure.d_prime(),
        }
    }
}

/// Per-step coefficient source. Implementations assemble the dense step data
/// from whatever representation they hold (constants, closures, feedback
/// fields).
pub(crate) trait StepAssembler: Send + Sync {
    fn assemble(&self, s: usize, t: f64, ctx: &AssemblyContext) -> Result<StepCoefficients>;
    /// Whether the configuration is invariant under transposition and
    /// argument exchange (equal left/right coefficients, symmetric `Q̃`).
    fn symmetric(&self) -> bool;
}

pub(crate) fn replicate_block(block: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(n * r, n * c);
    for j in 0..n {
        for k in 0..n {
            out.view_mut((j * r, k * c), (r, c)).copy_from(block);
        }
    }
    out
}

pub(crate) fn replicate_wide(block: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r, n * c);
    for k in 0..n {
        out.view_mut((0, k * c), (r, c)).copy_from(block);
    }
    out
}

struct ConstantCoeffs {
    q: DMatrix<f64>,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    symmetric: bool,
}

impl StepAssembler for ConstantCoeffs {
    fn assemble(&self, _s: usize, _t: f64, ctx: &AssemblyContext) -> Result<StepCoefficients> {
        let (d, dp) = (ctx.d, ctx.d_prime);
        if self.q.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "qtilde is {}x{}, expected {}x{}",
                self.q.nrows(),
                self.q.ncols(),
                d,
                d
            )));
        }
        for (name, m) in [
            ("btilde1", &self.b1),
            ("btilde2", &self.b2),
            ("dtilde1", &self.d1),
            ("dtilde2", &self.d2),
        ] {
            if m.shape() != (dp, d) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    dp,
                    d
                )));
            }
        }
        Ok(StepCoefficients {
            q_slice: replicate_block(&self.q, ctx.atom_count),
            b1: replicate_wide(&self.b1, ctx.atom_count),
            b2: replicate_wide(&self.b2, ctx.atom_count),
            d1: replicate_wide(&self.d1, ctx.atom_count),
            d2: replicate_wide(&self.d2, ctx.atom_count),
        })
    }

    fn symmetric(&self) -> bool {
        self.symmetric
    }
}

type Coeff2Fn = dyn Fn(f64, usize, usize) -> DMatrix<f64> + Send + Sync;
type Coeff1Fn = dyn Fn(f64, usize) -> DMatrix<f64> + Send + Sync;

struct FnCoeffs {
    qtilde: Box<Coeff2Fn>,
    btilde1: Box<Coeff1Fn>,
    btilde2: Box<Coeff1Fn>,
    dtilde1: Box<Coeff1Fn>,
    dtilde2: Box<Coeff1Fn>,
    symmetric: bool,
}

impl StepAssembler for FnCoeffs {
    fn assemble(&self, _s: usize, t: f64, ctx: &AssemblyContext) -> Result<StepCoefficients> {
        let (n, d, dp) = (ctx.atom_count, ctx.d, ctx.d_prime);
        let mut q_slice = DMatrix::zeros(n * d, n * d);
        for j in 0..n {
            for k in 0..n {
                let block = (self.qtilde)(t, j, k);
                if block.shape() != (d, d) {
                    return Err(Error::DimensionMismatch("qtilde block shape".into()));
                }
                q_slice.view_mut((j * d, k * d), (d, d)).copy_from(&block);
            }
        }
        let wide = |f: &Coeff1Fn| -> Result<DMatrix<f64>> {
            let mut out = DMatrix::zeros(dp, n * d);
            for k in 0..n {
                let block = f(t, k);
                if block.shape() != (dp, d) {
                    return Err(Error::DimensionMismatch("coefficient block shape".into()));
                }
                out.view_mut((0, k * d), (dp, d)).copy_from(&block);
            }
            Ok(out)
        };
        Ok(StepCoefficients {
            q_slice,
            b1: wide(&*self.btilde1)?,
            b2: wide(&*self.btilde2)?,
            d1: wide(&*self.dtilde1)?,
            d2: wide(&*self.dtilde2)?,
        })
    }

    fn symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Coefficients `Q̃, B̃¹, B̃², D̃¹, D̃²` driving a Lyapunov solve.
pub struct LyapunovCoefficients {
    assembler: Box<dyn StepAssembler>,
}

impl LyapunovCoefficients {
    /// Symmetric configuration with constant matrices: `Q̃ ≡ q` (`d×d`),
    /// `B̃¹ = B̃² ≡ b`, `D̃¹ = D̃² ≡ dt` (`d'×d`).
    pub fn constant(q: DMatrix<f64>, b: DMatrix<f64>, dt: DMatrix<f64>) -> Self {
        let symmetric = q == q.transpose();
        Self {
            assembler: Box::new(ConstantCoeffs {
                q,
                b1: b.clone(),
                b2: b,
                d1: dt.clone(),
                d2: dt,
                symmetric,
            }),
        }
    }

    /// Constant matrices with independent left/right coefficients.
    pub fn constant_general(
        q: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        d1: DMatrix<f64>,
        d2: DMatrix<f64>,
    ) -> Self {
        let symmetric = q == q.transpose() && b1 == b2 && d1 == d2;
        Self {
            assembler: Box::new(ConstantCoeffs {
                q,
                b1,
                b2,
                d1,
                d2,
                symmetric,
            }),
        }
    }

    /// Arbitrary time-and-atom dependent coefficients. `qtilde(t, j, k)`
    /// returns the `d×d` block `Q̃_t(θ_j, θ_k)`; the remaining closures
    /// return `d'×d` blocks per atom. Set `symmetric` when the configuration
    /// is transposition-invariant (`B̃¹=B̃²`, `D̃¹=D̃²`, `Q̃(θ,τ)=Q̃(τ,θ)ᵀ`).
    pub fn from_fns(
        qtilde: impl Fn(f64, usize, usize) -> DMatrix<f64> + Send + Sync + 'static,
        btilde1: impl Fn(f64, usize) -> DMatrix<f64> + Send + Sync + 'static,
        btilde2: impl Fn(f64, usize) -> DMatrix<f64> + Send + Sync + 'static,
        dtilde1: impl Fn(f64, usize) -> DMatrix<f64> + Send + Sync + 'static,
        dtilde2: impl Fn(f64, usize) -> DMatrix<f64> + Send + Sync + 'static,
        symmetric: bool,
    ) -> Self {
        Self {
            assembler: Box::new(FnCoeffs {
                qtilde: Box::new(qtilde),
                btilde1: Box::new(btilde1),
                btilde2: Box::new(btilde2),
                dtilde1: Box::new(dtilde1),
                dtilde2: Box::new(dtilde2),
                symmetric,
            }),
        }
    }

    pub(crate) fn from_assembler(assembler: Box<dyn StepAssembler>) -> Self {
        Self { assembler }
    }

    pub fn symmetric(&self) -> bool {
        self.assembler.symmetric()
    }

    pub(crate) fn assemble(
        &self,
        s: usize,
        t: f64,
        ctx: &AssemblyContext,
    ) -> Result<StepCoefficients> {
        let out = self.assembler.assemble(s, t, ctx)?;
        out.check_finite()?;
        Ok(out)
    }

    /// Sup-norm coefficient bound `κ` over the given grid.
    pub fn bound_kappa(
        &self,
        measure: &MeasureAtoms,
        horizon: f64,
        time_steps: usize,
    ) -> Result<f64> {
        let ctx = AssemblyContext::for_measure(measure);
        let dt = horizon / time_steps as f64;
        let mut kappa: f64 = 0.0;
        for s in 0..=time_steps {
            let c = self.assemble(s, s as f64 * dt, &ctx)?;
            kappa = kappa.max(c.kappa(measure.d()));
        }
        Ok(kappa)
    }
}

/// Grid-level constants of the exponential step: per-block decay
/// `exp(-(θ_j+θ_k)Δ)` and quadrature weight `Δ·φ₁((θ_j+θ_k)Δ)`, plus the
/// stacked weight matrix used by the measure reductions.
pub(crate) struct StepGrid {
    pub wtall: DMatrix<f64>,
    pub decay: DMatrix<f64>,
    pub quad_weight: DMatrix<f64>,
}

impl StepGrid {
    pub fn new(measure: &MeasureAtoms, dt: f64) -> Self {
        let n = measure.atom_count();
        let d = measure.d();
        let nd = n * d;
        let mut decay = DMatrix::zeros(nd, nd);
        let mut quad_weight = DMatrix::zeros(nd, nd);
        for j in 0..n {
            for k in 0..n {
                let x = (measure.node(j) + measure.node(k)) * dt;
                decay.view_mut((j * d, k * d), (d, d)).fill((-x).exp());
                quad_weight
                    .view_mut((j * d, k * d), (d, d))
                    .fill(dt * phi1(x));
            }
        }
        Self {
            wtall: measure.stacked_weights(),
            decay,
            quad_weight,
        }
    }

    /// `decay∘next + weight∘fhat`, the exponential-trapezoidal step.
    pub fn step(&self, next: &DMatrix<f64>, fhat: &DMatrix<f64>) -> DMatrix<f64> {
        self.decay.component_mul(next) + self.quad_weight.component_mul(fhat)
    }
}

/// Evaluate the Lyapunov right-hand side `F` on a slice given assembled step
/// coefficients.
pub(crate) fn eval_rhs(
    coeffs: &StepCoefficients,
    slice: &DMatrix<f64>,
    grid: &StepGrid,
) -> DMatrix<f64> {
    let cols = grid.wtall.transpose() * slice; // d' × nd : column integrals
    let u = &cols * &grid.wtall; // d' × d'
    let rows = slice * &grid.wtall; // nd × d' : row integrals
    let mut f = coeffs.q_slice.clone();
    f += coeffs.d1.transpose() * u * &coeffs.d2;
    f += coeffs.b1.transpose() * cols;
    f += rows * &coeffs.b2;
    f
}

pub(crate) struct StepStats {
    pub total_inner_iterations: usize,
    pub residual: f64,
    pub step_error_estimate: f64,
}

/// Backward exponential-trapezoidal solve of a mild equation with right-hand
/// side `rhs(s, t_s, slice)`. Shared by the Lyapunov solver and the direct
/// Riccati stepper.
pub(crate) fn backward_mild_solve<F>(
    measure: &Arc<MeasureAtoms>,
    horizon: f64,
    time_steps: usize,
    inner_rtol: f64,
    inner_max_iter: usize,
    mut rhs: F,
) -> Result<(Vec<DMatrix<f64>>, StepStats)>
where
    F: FnMut(usize, f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    if time_steps == 0 {
        return Err(Error::InvalidConfig("time_steps must be at least 1".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    let nd = measure.atom_count() * measure.d();
    let dt = horizon / time_steps as f64;
    let grid = StepGrid::new(measure, dt);

    let mut slices = vec![DMatrix::zeros(nd, nd); time_steps + 1];
    let mut stats = StepStats {
        total_inner_iterations: 0,
        residual: 0.0,
        step_error_estimate: 0.0,
    };

    // F at the later grid point of the current step, consistent with the
    // stored slices; trailing window for the second-difference estimate
    let mut f_next = rhs(time_steps, horizon, &slices[time_steps])?;
    let mut f_hist: Vec<DMatrix<f64>> = vec![f_next.clone()];
    let mut max_second_diff: f64 = 0.0;

    for s in (0..time_steps).rev() {
        let t = s as f64 * dt;
        // explicit predictor, then trapezoidal corrector iterations
        let mut psi = grid.step(&slices[s + 1], &f_next);
        let mut converged = false;
        for _ in 0..inner_max_iter {
            stats.total_inner_iterations += 1;
            let f_cur = rhs(s, t, &psi)?;
            let fhat = (&f_cur + &f_next) * 0.5;
            let psi_new = grid.step(&slices[s + 1], &fhat);
            let delta = (&psi_new - &psi).norm();
            let scale = 1.0 + psi_new.norm();
            psi = psi_new;
            if delta <= inner_rtol * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence(format!(
                "step fixed-point loop stalled at t = {t:.6}"
            )));
        }
        if !psi.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("slice at t = {t:.6}")));
        }
        let f_final = rhs(s, t, &psi)?;
        let defect = &psi - grid.step(&slices[s + 1], &((&f_final + &f_next) * 0.5));
        stats.residual = stats.residual.max(slice_l1_norm(&defect, measure));
        if f_hist.len() == 2 {
            let dd = &f_final - &f_hist[0] * 2.0 + &f_hist[1];
            max_second_diff = max_second_diff.max(slice_l1_norm(&dd, measure));
            f_hist.pop();
        }
        f_hist.insert(0, f_final.clone());
        f_next = f_final;
        slices[s] = psi;
    }
    stats.step_error_estimate = horizon * max_second_diff / 12.0;
    Ok((slices, stats))
}

pub(crate) fn uniform_grid(horizon: f64, time_steps: usize) -> Arc<Vec<f64>> {
    Arc::new(
        (0..=time_steps)
            .map(|s| s as f64 * horizon / time_steps as f64)
            .collect(),
    )
}

/// Default Picard weight `4κ(1 + ‖K̄‖_{L¹(0,T)} + ‖K̄‖²_{L²(0,T)})`, large
/// enough in practice for the sweep map to contract without computing its
/// norm exactly.
pub fn default_picard_lambda(measure: &MeasureAtoms, horizon: f64, kappa: f64) -> f64 {
    4.0 * kappa * (1.0 + measure.kbar_l1_norm(horizon) + measure.kbar_l2_norm_sq(horizon))
}

/// Solve the Lyapunov equation on a uniform grid with `Ψ_T = 0`.
pub fn solve_lyapunov(
    measure: &Arc<MeasureAtoms>,
    coeffs: &LyapunovCoefficients,
    horizon: f64,
    opts: &SolveOptions,
) -> Result<(KernelField, SolveReport)> {
    if opts.time_steps == 0 {
        return Err(Error::InvalidConfig("time_steps must be at least 1".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    match opts.method {
        Method::ExponentialIntegrator => solve_exponential(measure, coeffs, horizon, opts),
        Method::PicardContraction => picard_iterate(
            measure,
            coeffs,
            horizon,
            opts.picard_lambda,
            opts.picard_tol,
            opts.picard_max_iter,
            opts,
        ),
    }
}

fn solve_exponential(
    measure: &Arc<MeasureAtoms>,
    coeffs: &LyapunovCoefficients,
    horizon: f64,
    opts: &SolveOptions,
) -> Result<(KernelField, SolveReport)> {
    let ctx = AssemblyContext::for_measure(measure);
    let grid = StepGrid::new(measure, horizon / opts.time_steps as f64);
    let mut kappa: f64 = 0.0;
    let mut cache: Option<(usize, StepCoefficients)> = None;
    let (slices, stats) = backward_mild_solve(
        measure,
        horizon,
        opts.time_steps,
        opts.inner_rtol,
        opts.inner_max_iter,
        |s, t, slice| {
            if cache.as_ref().map(|(cs, _)| *cs) != Some(s) {
                let assembled = coeffs.assemble(s, t, &ctx)?;
                kappa = kappa.max(assembled.kappa(ctx.d));
                cache = Some((s, assembled));
            }
            Ok(eval_rhs(&cache.as_ref().unwrap().1, slice, &grid))
        },
    )?;
    let field = KernelField::from_slices(
        Arc::clone(measure),
        uniform_grid(horizon, opts.time_steps),
        slices,
    );
    let report = finish_report(
        &field,
        Method::ExponentialIntegrator,
        opts.time_steps,
        stats.total_inner_iterations,
        stats.residual,
        kappa,
        stats.step_error_estimate,
        None,
    );
    Ok((field, report))
}

/// Picard sweeps of the discrete mild operator from `Ψ = 0`, with the
/// iteration trace in the report. Stops once the `λ`-weighted successive
/// difference drops below `tol·(1 + sup‖Ψ‖)`.
pub fn picard_iterate(
    measure: &Arc<MeasureAtoms>,
    coeffs: &LyapunovCoefficients,
    horizon: f64,
    lambda: Option<f64>,
    tol: f64,
    max_iter: usize,
    opts: &SolveOptions,
) -> Result<(KernelField, SolveReport)> {
    let m = opts.time_steps;
    if m == 0 {
        return Err(Error::InvalidConfig("time_steps must be at least 1".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    let ctx = AssemblyContext::for_measure(measure);
    let nd = measure.atom_count() * measure.d();
    let dt = horizon / m as f64;
    let grid = StepGrid::new(measure, dt);

    // assemble all step coefficients once; this also yields κ for the
    // default λ
    let mut assembled = Vec::with_capacity(m + 1);
    let mut kappa: f64 = 0.0;
    for s in 0..=m {
        let c = coeffs.assemble(s, s as f64 * dt, &ctx)?;
        kappa = kappa.max(c.kappa(ctx.d));
        assembled.push(c);
    }
    let lambda = lambda.unwrap_or_else(|| default_picard_lambda(measure, horizon, kappa));

    let mut prev = vec![DMatrix::zeros(nd, nd); m + 1];
    let mut diffs: Vec<f64> = Vec::new();
    let mut raw_diffs: Vec<f64> = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_iter {
        sweeps += 1;
        let f_prev: Vec<DMatrix<f64>> = (0..=m)
            .map(|s| eval_rhs(&assembled[s], &prev[s], &grid))
            .collect();
        let mut next = vec![DMatrix::zeros(nd, nd); m + 1];
        for s in (0..m).rev() {
            let fhat = (&f_prev[s] + &f_prev[s + 1]) * 0.5;
            next[s] = grid.step(&next[s + 1], &fhat);
        }
        let mut wdiff: f64 = 0.0;
        let mut raw_diff: f64 = 0.0;
        let mut sup_l1: f64 = 0.0;
        for s in 0..=m {
            let t = s as f64 * dt;
            let d = slice_l1_norm(&(&next[s] - &prev[s]), measure);
            wdiff = wdiff.max((-lambda * (horizon - t)).exp() * d);
            raw_diff = raw_diff.max(d);
            sup_l1 = sup_l1.max(slice_l1_norm(&next[s], measure));
        }
        diffs.push(wdiff);
        raw_diffs.push(raw_diff);
        prev = next;
        if raw_diff <= tol * (1.0 + sup_l1) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "Picard iteration did not reach tolerance in {max_iter} sweeps (λ = {lambda:.3}); \
             consider increasing λ"
        )));
    }
    let ratios: Vec<f64> = diffs
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let non_contraction = ratios.iter().any(|&r| r >= 1.0);
    let field = KernelField::from_slices(Arc::clone(measure), uniform_grid(horizon, m), prev);

    let mut residual: f64 = 0.0;
    let mut max_dd: f64 = 0.0;
    let mut f_window: Vec<DMatrix<f64>> = Vec::with_capacity(3);
    let mut f_slices: Vec<DMatrix<f64>> = Vec::with_capacity(m + 1);
    for s in 0..=m {
        f_slices.push(eval_rhs(&assembled[s], field.slice(s), &grid));
    }
    for s in 0..m {
        let defect =
            field.slice(s) - grid.step(field.slice(s + 1), &((&f_slices[s] + &f_slices[s + 1]) * 0.5));
        residual = residual.max(slice_l1_norm(&defect, measure));
    }
    for s in 0..=m {
        f_window.push(f_slices[s].clone());
        if f_window.len() == 3 {
            let dd = &f_window[0] - &f_window[1] * 2.0 + &f_window[2];
            max_dd = max_dd.max(slice_l1_norm(&dd, measure));
            f_window.remove(0);
        }
    }
    let trace = PicardTrace {
        lambda,
        weighted_diffs: diffs,
        unweighted_diffs: raw_diffs,
        ratios,
        non_contraction,
    };
    let report = finish_report(
        &field,
        Method::PicardContraction,
        m,
        sweeps,
        residual,
        kappa,
        horizon * max_dd / 12.0,
        Some(trace),
    );
    Ok((field, report))
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    field: &KernelField,
    method: Method,
    steps: usize,
    iterations: usize,
    residual: f64,
    kappa: f64,
    step_error_estimate: f64,
    picard: Option<PicardTrace>,
) -> SolveReport {
    let mut sup_l1: f64 = 0.0;
    let mut row_bound: f64 = 0.0;
    let mut col_bound: f64 = 0.0;
    for s in 0..=steps {
        sup_l1 = sup_l1.max(field.l1_norm(s));
        row_bound = row_bound.max(field.row_integral_sup(s));
        col_bound = col_bound.max(field.col_integral_sup(s));
    }
    SolveReport {
        method,
        steps,
        sup_l1_norm: sup_l1,
        row_bound,
        col_bound,
        iterations,
        residual,
        coefficient_bound: kappa,
        step_error_estimate,
        picard,
    }
}

/// Per-step `L¹(μ⊗μ)` increments of a solved field; the discrete modulus of
/// continuity in time.
pub fn continuity_modulus(field: &KernelField) -> Vec<f64> {
    field.step_increments()
}
