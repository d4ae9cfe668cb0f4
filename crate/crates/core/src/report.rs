//! Convergence tables: log-log slopes and nearest-rank percentile bands over
//! multi-seed runs.

use std::io::{self, Write};

use crate::adapt::{AdaptHistory, StepRecord};

/// Nearest-rank percentile: `sorted[⌈p/100·n⌉ − 1]`, `p = 0` giving the
/// minimum. NaN for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Which error pair an aggregate summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSource {
    Feinn,
    Nn,
}

impl ErrorSource {
    fn pick(self, s: &StepRecord) -> (f64, f64) {
        match self {
            ErrorSource::Feinn => (s.feinn_l2, s.feinn_h1),
            ErrorSource::Nn => (s.nn_l2, s.nn_h1),
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            ErrorSource::Feinn => "feinn",
            ErrorSource::Nn => "nn",
        }
    }
}

/// Per-step band over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub step: usize,
    pub dofs_median: f64,
    pub l2: [f64; 3],
    pub h1: [f64; 3],
}

/// Median, minimum and 90th percentile of each error per step, over the
/// steps every history reached.
pub fn aggregate(histories: &[AdaptHistory], source: ErrorSource) -> Vec<AggregateRow> {
    let steps = histories.iter().map(|h| h.steps.len()).min().unwrap_or(0);
    (0..steps)
        .map(|i| {
            let dofs: Vec<f64> = histories.iter().map(|h| h.steps[i].dofs as f64).collect();
            let (l2, h1): (Vec<f64>, Vec<f64>) = histories.iter().map(|h| source.pick(&h.steps[i])).unzip();
            let band = |v: &[f64]| [percentile(v, 50.0), percentile(v, 0.0), percentile(v, 90.0)];
            AggregateRow { step: i, dofs_median: percentile(&dofs, 50.0), l2: band(&l2), h1: band(&h1) }
        })
        .collect()
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], source: ErrorSource, mut w: W) -> io::Result<()> {
    let p = source.prefix();
    writeln!(w, "step,dofs_median,{p}_l2_median,{p}_l2_min,{p}_l2_p90,{p}_h1_median,{p}_h1_min,{p}_h1_p90")?;
    for r in rows {
        writeln!(w, "{},{},{:e},{:e},{:e},{:e},{:e},{:e}", r.step, r.dofs_median, r.l2[0], r.l2[1], r.l2[2], r.h1[0], r.h1[1], r.h1[2])?;
    }
    Ok(())
}

/// Slopes of each error column against free DOFs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slopes {
    pub feinn_l2: f64,
    pub feinn_h1: f64,
    pub nn_l2: f64,
    pub nn_h1: f64,
}

pub fn slopes(h: &AdaptHistory) -> Slopes {
    let dofs: Vec<f64> = h.steps.iter().map(|s| s.dofs as f64).collect();
    let col = |f: fn(&StepRecord) -> f64| -> f64 { loglog_slope(&dofs, &h.steps.iter().map(f).collect::<Vec<_>>()) };
    Slopes { feinn_l2: col(|s| s.feinn_l2), feinn_h1: col(|s| s.feinn_h1), nn_l2: col(|s| s.nn_l2), nn_h1: col(|s| s.nn_h1) }
}

/// Error-vs-DOF table followed by a slope line per column.
pub fn write_convergence_table<W: Write>(h: &AdaptHistory, mut w: W) -> io::Result<()> {
    h.write_csv(&mut w)?;
    let s = slopes(h);
    writeln!(w, "# slope vs dofs: feinn_l2={:.4} feinn_h1={:.4} nn_l2={:.4} nn_h1={:.4}", s.feinn_l2, s.feinn_h1, s.nn_l2, s.nn_h1)
}
