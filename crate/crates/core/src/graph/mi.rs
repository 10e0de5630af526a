//! Plug-in mutual information over equal-frequency (quantile) bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 8;

/// Cut points at the sample quantiles `b/B`, `b = 1..B`, deduplicated.
///
/// A value falls in bin `k` when exactly `k` cut points are `<=` it, so tied
/// values always share a bin and at most `B` bins are occupied.
pub fn quantile_cuts(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..bins).map(|b| sorted[b * n / bins]).collect();
    cuts.dedup();
    cuts
}

/// Bin index of every value under [`quantile_cuts`].
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let cuts = quantile_cuts(values, bins);
    values.iter().map(|&v| cuts.partition_point(|&c| c <= v)).collect()
}

fn check_samples(n: usize, bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::contract(format!("mutual information needs at least 2 bins, got {bins}")));
    }
    if n < 2 * bins {
        return Err(Error::contract(format!(
            "mutual information with {bins} bins needs at least {} paired samples, got {n}",
            2 * bins
        )));
    }
    Ok(())
}

/// Plug-in MI (nats) of two already-binned sequences, clamped at 0.
///
/// Terms are summed in sorted order so that swapping the arguments gives a
/// bitwise-identical result.
pub fn mi_from_bins(bx: &[usize], by: &[usize], bins: usize) -> f64 {
    let n = bx.len();
    let mut joint = vec![0u64; bins * bins];
    let mut px = vec![0u64; bins];
    let mut py = vec![0u64; bins];
    for (&x, &y) in bx.iter().zip(by) {
        joint[x * bins + y] += 1;
        px[x] += 1;
        py[y] += 1;
    }
    let nf = n as f64;
    let mut terms: Vec<f64> = Vec::with_capacity(bins * bins);
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c == 0 {
                continue;
            }
            let ratio = (c * n as u64) as f64 / (px[x] * py[y]) as f64;
            terms.push(c as f64 / nf * ratio.ln());
        }
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().max(0.0)
}

/// Plug-in entropy (nats) of a binned sequence.
pub fn entropy_from_bins(b: &[usize], bins: usize) -> f64 {
    let mut counts = vec![0u64; bins];
    for &x in b {
        counts[x] += 1;
    }
    let n = b.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in MI between paired samples `xs[i], ys[i]` on a `bins × bins`
/// equal-frequency grid.
pub fn estimate_mi(xs: &[f64], ys: &[f64], bins: usize) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::contract(format!(
            "mutual information needs paired samples, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    check_samples(xs.len(), bins)?;
    Ok(mi_from_bins(&quantile_bins(xs, bins), &quantile_bins(ys, bins), bins))
}

/// Symmetric pairwise MI between node features over a training population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiTable {
    pub nodes: usize,
    pub bins: usize,
    pub binning: String,
    /// Row-major `nodes × nodes`; the diagonal holds each feature's entropy.
    pub values: Vec<f64>,
}

impl MiTable {
    /// `samples[i]` holds node `i`'s value for every training patient.
    pub fn compute(samples: &[Vec<f64>], bins: usize) -> Result<Self> {
        let m = samples.len();
        let n = samples.first().map_or(0, Vec::len);
        if let Some(bad) = samples.iter().find(|s| s.len() != n) {
            return Err(Error::contract(format!(
                "mutual information needs paired samples, got {n} and {}",
                bad.len()
            )));
        }
        check_samples(n, bins)?;
        let binned: Vec<Vec<usize>> = samples.iter().map(|s| quantile_bins(s, bins)).collect();
        let mut values = vec![0.0; m * m];
        for i in 0..m {
            values[i * m + i] = entropy_from_bins(&binned[i], bins);
            for j in i + 1..m {
                let v = mi_from_bins(&binned[i], &binned[j], bins);
                values[i * m + j] = v;
                values[j * m + i] = v;
            }
        }
        Ok(MiTable {
            nodes: m,
            bins,
            binning: "equal-frequency".into(),
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.nodes + j]
    }

    pub fn entropy(&self, i: usize) -> f64 {
        self.get(i, i)
    }
}
