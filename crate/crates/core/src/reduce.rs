//! Fixed-tree reductions.
//!
//! Every population average in the crate goes through [`pairwise_sum`], whose
//! split points depend only on the slice length. Results are therefore
//! identical for any thread count or evaluation schedule.

const LEAF: usize = 8;

/// Pairwise (cascade) summation with a fixed split at `len / 2`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise mean; `NaN` for an empty slice.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and unbiased variance (two-pass, both passes pairwise).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = pairwise_mean(xs);
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, pairwise_sum(&sq) / (n - 1) as f64)
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let (m, v) = mean_var(xs);
    (m, (v / xs.len() as f64).sqrt())
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = pairwise_mean(xs);
    let my = pairwise_mean(ys);
    let num: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let den: Vec<f64> = xs.iter().map(|x| (x - mx) * (x - mx)).collect();
    pairwise_sum(&num) / pairwise_sum(&den)
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ols_slope(&lx, &ly)
}
