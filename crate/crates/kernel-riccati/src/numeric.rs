//! Small numerical helpers shared across the solvers.

/// `φ₁(x) = (1 - e^{-x}) / x` with `φ₁(0) = 1`.
///
/// This is the weight in the exponential-integrator step
/// `∫_0^Δ e^{-c u} du = Δ·φ₁(cΔ)`. For small arguments the direct formula
/// loses digits to cancellation, so a truncated series is used below the
/// crossover.
pub fn phi1(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 1e-4 {
        // 1 - x/2 + x²/6 - x³/24 + x⁴/120 - x⁵/720; next term < 2e-28 at x = 1e-4
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..6 {
            term *= -x / (k as f64 + 1.0);
            sum += term;
        }
        sum
    } else {
        // exp_m1 avoids the 1 - e^{-x} cancellation directly
        -(-x).exp_m1() / x
    }
}

/// Deterministic pairwise summation: the reduction tree depends only on the
/// slice length, never on scheduling, so results are bit-stable.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// `points` logarithmically spaced values covering `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && points >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}
