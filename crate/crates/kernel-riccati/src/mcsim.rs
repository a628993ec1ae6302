//! Monte Carlo verification of the Lyapunov quadratic form.
//!
//! In a symmetric configuration the solution of the Lyapunov equation
//! represents an expected quadratic cost: starting the lifted system
//!
//! ```text
//! dY_s(θ_k) = (−θ_k Y_s(θ_k) + Σ_j B̃_s(θ_j) w_j Y_s(θ_j)) ds
//!           + (Σ_j D̃_s(θ_j) w_j Y_s(θ_j)) dW_s,        Y_t = φ,
//! ```
//!
//! from a test function `φ` gives
//!
//! ```text
//! ⟨φ, Ψ_t φ⟩_μ = E[ ∫_t^T Σ_{j,k} Y_s(θ_j)ᵀ w_jᵀ Q̃_s(θ_j,θ_k) w_k Y_s(θ_k) ds ].
//! ```
//!
//! The simulation uses exponential Euler — the per-atom mean reversion
//! `e^{-θΔ}` is applied exactly, so large quadrature nodes impose no step
//! restriction — with a single scalar Brownian driver. Paths draw from
//! counter-based ChaCha streams keyed by `(seed, path)`, making the path set
//! independent of scheduling; reductions use fixed-topology pairwise sums,
//! so a run is bit-reproducible across worker counts.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{gram_min_eigenvalue, TestFunction};
use crate::lyapunov::{AssemblyContext, LyapunovCoefficients, StepCoefficients};
use crate::measure::MeasureAtoms;
use crate::numeric::{pairwise_sum, phi1};

/// Path state magnitude beyond which a trajectory is written off as blown
/// up and excluded from the estimator.
pub const PATH_BLOWUP: f64 = 1e12;

#[derive(Debug, Clone, Copy)]
pub struct McOptions {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            paths: 100_000,
            steps: 1000,
            seed: 42,
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub paths_used: usize,
    pub excluded_paths: usize,
    /// Sample mean of `sup_s ‖Y_s‖⁴_{L¹(μ)}`, monitoring the moment bound
    /// the representation relies on.
    pub fourth_moment: f64,
    /// Set when an inspected `Q̃` slice failed the psd check; the estimate
    /// is still returned.
    pub qtilde_psd_warning: bool,
}

/// Estimate `⟨φ, Ψ_t φ⟩_μ` by simulating the lifted system from `t` to the
/// horizon. The coefficients must form a symmetric configuration.
pub fn simulate_quadratic_form(
    measure: &MeasureAtoms,
    coeffs: &LyapunovCoefficients,
    phi: &TestFunction,
    t: f64,
    horizon: f64,
    opts: &McOptions,
) -> Result<McEstimate> {
    if !coeffs.symmetric() {
        return Err(Error::InvalidCoefficients(
            "the quadratic-form representation needs a symmetric configuration".into(),
        ));
    }
    if opts.paths == 0 || opts.steps == 0 {
        return Err(Error::InvalidConfig(
            "paths and steps must be positive".into(),
        ));
    }
    if !(t >= 0.0 && t < horizon) {
        return Err(Error::InvalidConfig(format!(
            "start time {t} must lie in [0, horizon)"
        )));
    }
    let n = measure.atom_count();
    let dp = measure.d_prime();
    if phi.samples.len() != n || phi.samples.iter().any(|v| v.len() != dp) {
        return Err(Error::DimensionMismatch(
            "test function must supply one d'-vector per atom".into(),
        ));
    }

    let dt = (horizon - t) / opts.steps as f64;
    let sqrt_dt = dt.sqrt();
    let ctx = AssemblyContext::for_measure(measure);
    // per-step coefficient tables on the simulation grid
    let mut tables: Vec<StepCoefficients> = Vec::with_capacity(opts.steps + 1);
    for i in 0..=opts.steps {
        tables.push(coeffs.assemble(i, t + i as f64 * dt, &ctx)?);
    }
    // psd spot-check of the source on up to 17 slices
    let psd_stride = (opts.steps / 16).max(1);
    let mut qtilde_psd_warning = false;
    let mut i = 0;
    while i <= opts.steps {
        let q = &tables[i].q_slice;
        let scale = q.norm();
        if gram_min_eigenvalue(q, measure) < -1e-8 * (1.0 + scale) {
            qtilde_psd_warning = true;
            break;
        }
        i += psd_stride;
    }

    // exact per-atom mean reversion over one step
    let decay: Vec<f64> = measure.nodes().iter().map(|&x| (-x * dt).exp()).collect();
    let drift_w: Vec<f64> = measure
        .nodes()
        .iter()
        .map(|&x| dt * phi1(x * dt))
        .collect();

    struct PathOutcome {
        integral: f64,
        sup_l1: f64,
        excluded: bool,
    }

    let run_path = |p: usize| -> PathOutcome {
        let (stream, negate) = if opts.antithetic {
            (p as u64 / 2, p % 2 == 1)
        } else {
            (p as u64, false)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(stream);
        let mut y: Vec<DVector<f64>> = phi.samples.clone();
        let mut g = DVector::zeros(n * measure.d());
        let mut sup_l1: f64 = 0.0;
        let mut integral = 0.0;
        let mut prev_quad = 0.0;
        let mut excluded = false;
        for step in 0..=opts.steps {
            // stacked weighted state and the quadratic-form sample
            for k in 0..n {
                let wy = measure.weight(k) * &y[k];
                g.rows_mut(k * measure.d(), measure.d()).copy_from(&wy);
            }
            let quad = (g.transpose() * &tables[step].q_slice * &g)[(0, 0)];
            if step > 0 {
                integral += 0.5 * dt * (prev_quad + quad);
            }
            prev_quad = quad;
            let l1: f64 = measure
                .abs_weights()
                .iter()
                .zip(&y)
                .map(|(aw, v)| aw * v.norm())
                .sum();
            sup_l1 = sup_l1.max(l1);
            if !l1.is_finite() || l1 > PATH_BLOWUP {
                excluded = true;
                break;
            }
            if step == opts.steps {
                break;
            }
            let table = &tables[step];
            let drift_coupling = &table.b1 * &g; // d'
            let diffusion = &table.d1 * &g; // d'
            let z: f64 = StandardNormal.sample(&mut rng);
            let z = if negate { -z } else { z };
            for k in 0..n {
                y[k] *= decay[k];
                y[k] += &drift_coupling * drift_w[k] + &diffusion * (sqrt_dt * z);
            }
        }
        PathOutcome {
            integral,
            sup_l1,
            excluded,
        }
    };

    let outcomes: Vec<PathOutcome> = (0..opts.paths).into_par_iter().map(run_path).collect();
    let kept: Vec<&PathOutcome> = outcomes.iter().filter(|o| !o.excluded).collect();
    let excluded_paths = opts.paths - kept.len();
    if kept.is_empty() {
        return Err(Error::NonFinite("every simulated path blew up".into()));
    }
    let values: Vec<f64> = kept.iter().map(|o| o.integral).collect();
    let squares: Vec<f64> = kept.iter().map(|o| o.integral * o.integral).collect();
    let fourths: Vec<f64> = kept.iter().map(|o| o.sup_l1.powi(4)).collect();
    let count = values.len() as f64;
    let mean = pairwise_sum(&values) / count;
    let var = if values.len() > 1 {
        ((pairwise_sum(&squares) - count * mean * mean) / (count - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / count).sqrt(),
        paths_used: values.len(),
        excluded_paths,
        fourth_moment: pairwise_sum(&fourths) / count,
        qtilde_psd_warning,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    /// Smallest quadratic-form estimate over the sampled test functions.
    pub min_estimate: f64,
    pub max_std_error: f64,
    pub estimates: Vec<f64>,
}

/// Sample random test functions and estimate their quadratic forms; with a
/// psd source every estimate must stay above `-3·max_std_error`.
pub fn positivity_probe(
    measure: &MeasureAtoms,
    coeffs: &LyapunovCoefficients,
    trials: usize,
    t: f64,
    horizon: f64,
    opts: &McOptions,
) -> Result<ProbeReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial".into()));
    }
    let dp = measure.d_prime();
    let n = measure.atom_count();
    // test-function draws live in their own stream namespace
    let mut phi_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    phi_rng.set_stream(u64::MAX);
    let mut min_estimate = f64::INFINITY;
    let mut max_std_error: f64 = 0.0;
    let mut estimates = Vec::with_capacity(trials);
    for trial in 0..trials {
        let phi = TestFunction {
            samples: (0..n)
                .map(|_| DVector::from_fn(dp, |_, _| phi_rng.random_range(-1.0..1.0)))
                .collect(),
        };
        let per_trial = McOptions {
            seed: opts.seed.wrapping_add(trial as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
            ..*opts
        };
        let est = simulate_quadratic_form(measure, coeffs, &phi, t, horizon, &per_trial)?;
        min_estimate = min_estimate.min(est.estimate);
        max_std_error = max_std_error.max(est.std_error);
        estimates.push(est.estimate);
    }
    Ok(ProbeReport {
        min_estimate,
        max_std_error,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{solve_lyapunov, SolveOptions};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::dmatrix;
    use std::sync::Arc;

    fn two_atom_measure() -> Arc<MeasureAtoms> {
        Arc::new(MeasureAtoms::scalar(vec![0.4, 1.5], vec![0.9, 0.6]).unwrap())
    }

    fn constant_phi(measure: &MeasureAtoms, value: f64) -> TestFunction {
        TestFunction::constant(DVector::from_element(measure.d_prime(), value), measure.atom_count())
    }

    #[test]
    fn deterministic_decay_matches_lyapunov_quadratic_form() {
        // B̃ = D̃ = 0: the flow is exact per-atom decay and the estimator has
        // zero variance; agreement is limited only by time quadrature
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![1.2], dmatrix![0.0], dmatrix![0.0]);
        let phi = constant_phi(&m, 0.8);
        let horizon = 1.0;
        let opts = McOptions {
            paths: 8,
            steps: 1000,
            seed: 7,
            antithetic: false,
        };
        let est = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, horizon, &opts).unwrap();
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.excluded_paths, 0);

        let (field, _) =
            solve_lyapunov(&m, &coeffs, horizon, &SolveOptions::default()).unwrap();
        let reference = field.quadratic_form(0, &phi).unwrap();
        assert_abs_diff_eq!(est.estimate, reference, epsilon = 1e-6 * (1.0 + reference.abs()));
    }

    #[test]
    fn zero_source_estimates_zero_with_zero_variance() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![0.0], dmatrix![0.3], dmatrix![0.4]);
        let phi = constant_phi(&m, 1.0);
        let opts = McOptions {
            paths: 64,
            steps: 50,
            seed: 3,
            antithetic: false,
        };
        let est = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn zero_start_function_gives_zero() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![1.0], dmatrix![0.2], dmatrix![0.3]);
        let phi = constant_phi(&m, 0.0);
        let opts = McOptions {
            paths: 32,
            steps: 50,
            seed: 5,
            antithetic: false,
        };
        let est = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap();
        assert_eq!(est.estimate, 0.0);
    }

    #[test]
    fn noisy_configuration_matches_lyapunov_within_three_sigma() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![1.0], dmatrix![0.35], dmatrix![0.5]);
        let phi = constant_phi(&m, 1.0);
        let horizon = 1.0;
        let opts = McOptions {
            paths: 40_000,
            steps: 400,
            seed: 20260809,
            antithetic: false,
        };
        let est = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, horizon, &opts).unwrap();
        let (field, _) = solve_lyapunov(
            &m,
            &coeffs,
            horizon,
            &SolveOptions {
                time_steps: 2000,
                ..Default::default()
            },
        )
        .unwrap();
        let reference = field.quadratic_form(0, &phi).unwrap();
        let z = (est.estimate - reference).abs() / est.std_error;
        assert!(z <= 3.0, "estimate {} vs {} (z = {z})", est.estimate, reference);
        assert!(est.fourth_moment.is_finite());
    }

    #[test]
    fn fixed_seed_is_bit_reproducible_across_pool_sizes() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![0.9], dmatrix![0.3], dmatrix![0.45]);
        let phi = constant_phi(&m, 0.7);
        let opts = McOptions {
            paths: 2000,
            steps: 60,
            seed: 99,
            antithetic: true,
        };
        let a = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap();
        let b = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        // single-threaded pool must reproduce the default pool bit-for-bit
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let c = pool
            .install(|| simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts))
            .unwrap();
        assert_eq!(a.estimate.to_bits(), c.estimate.to_bits());
        assert_eq!(a.std_error.to_bits(), c.std_error.to_bits());
    }

    #[test]
    fn standard_error_halves_at_quadruple_paths() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![1.0], dmatrix![0.3], dmatrix![0.5]);
        let phi = constant_phi(&m, 1.0);
        let se = |paths: usize| {
            let opts = McOptions {
                paths,
                steps: 100,
                seed: 12345,
                antithetic: false,
            };
            simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts)
                .unwrap()
                .std_error
        };
        let ratio = se(4000) / se(16_000);
        assert!((ratio - 2.0).abs() <= 0.5, "SE ratio {ratio}");
    }

    #[test]
    fn halving_the_step_moves_estimate_less_than_two_sigma() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![1.0], dmatrix![0.35], dmatrix![0.5]);
        let phi = constant_phi(&m, 1.0);
        let run = |steps: usize| {
            let opts = McOptions {
                paths: 20_000,
                steps,
                seed: 31337,
                antithetic: false,
            };
            simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap()
        };
        let coarse = run(200);
        let fine = run(400);
        let sigma = coarse.std_error.max(fine.std_error);
        assert!(
            (coarse.estimate - fine.estimate).abs() <= 2.0 * sigma,
            "{} vs {} (σ = {sigma})",
            coarse.estimate,
            fine.estimate
        );
    }

    #[test]
    fn positivity_probe_stays_above_noise_floor() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![0.8], dmatrix![0.3], dmatrix![0.4]);
        let opts = McOptions {
            paths: 4000,
            steps: 80,
            seed: 55,
            antithetic: false,
        };
        let probe = positivity_probe(&m, &coeffs, 12, 0.0, 1.0, &opts).unwrap();
        assert!(
            probe.min_estimate >= -3.0 * probe.max_std_error,
            "{probe:?}"
        );
    }

    #[test]
    fn probe_of_zero_source_is_identically_zero() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![0.0], dmatrix![0.3], dmatrix![0.4]);
        let opts = McOptions {
            paths: 256,
            steps: 30,
            seed: 1,
            antithetic: false,
        };
        let probe = positivity_probe(&m, &coeffs, 5, 0.0, 1.0, &opts).unwrap();
        assert!(probe.estimates.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_psd_source_warns_but_still_estimates() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant(dmatrix![-1.0], dmatrix![0.0], dmatrix![0.0]);
        let phi = constant_phi(&m, 1.0);
        let opts = McOptions {
            paths: 16,
            steps: 40,
            seed: 2,
            antithetic: false,
        };
        let est = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap();
        assert!(est.qtilde_psd_warning);
        assert!(est.estimate < 0.0);
    }

    #[test]
    fn blown_up_paths_are_excluded_and_counted() {
        let m = two_atom_measure();
        // enormous multiplicative noise forces geometric blow-up
        let coeffs =
            LyapunovCoefficients::constant(dmatrix![1.0], dmatrix![0.0], dmatrix![2000.0]);
        let phi = constant_phi(&m, 1.0);
        let opts = McOptions {
            paths: 64,
            steps: 400,
            seed: 11,
            antithetic: false,
        };
        let est = simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &opts).unwrap();
        assert!(est.excluded_paths > 0, "{est:?}");
        assert_relative_eq!(
            est.paths_used as f64 + est.excluded_paths as f64,
            opts.paths as f64
        );
    }

    #[test]
    fn asymmetric_configuration_is_rejected() {
        let m = two_atom_measure();
        let coeffs = LyapunovCoefficients::constant_general(
            dmatrix![1.0],
            dmatrix![0.3],
            dmatrix![0.4],
            dmatrix![0.1],
            dmatrix![0.1],
        );
        let phi = constant_phi(&m, 1.0);
        assert!(
            simulate_quadratic_form(&m, &coeffs, &phi, 0.0, 1.0, &McOptions::default()).is_err()
        );
    }
}
