//! Log densities shared by the filter and the controller.

pub(crate) use statrs::function::gamma::ln_gamma;

/// `ln P(n; lambda)` for a Poisson count.
pub(crate) fn ln_poisson(n: u64, lambda: f64) -> f64 {
    if n == 0 {
        return -lambda;
    }
    let n = n as f64;
    n * lambda.ln() - lambda - ln_gamma(n + 1.0)
}

/// `ln G(a; shape, scale)` for the Gamma density.
pub(crate) fn ln_gamma_pdf(a: f64, shape: f64, scale: f64) -> f64 {
    (shape - 1.0) * a.ln() - a / scale - ln_gamma(shape) - shape * scale.ln()
}

/// `ln(sum(exp(xs)))`, `-inf` for an empty or all `-inf` input.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
