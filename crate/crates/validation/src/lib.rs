//! Small numeric helpers shared by the acceptance checks.

/// `⌈(num/den)·n⌉` in integer arithmetic.
pub fn ceil_fraction(num: usize, den: usize, n: usize) -> usize {
    (num * n).div_ceil(den)
}

/// Log-log interpolation of `(xs, ys)` at `x`, with `xs` increasing;
/// `None` outside `[xs[0], xs[last]]`.
pub fn loglog_interp(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    let i = xs.windows(2).position(|w| w[0] <= x && x <= w[1])?;
    let t = (x / xs[i]).ln() / (xs[i + 1] / xs[i]).ln();
    Some((ys[i].ln() + t * (ys[i + 1] / ys[i]).ln()).exp())
}

/// Lower median.
pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}
