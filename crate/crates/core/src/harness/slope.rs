//! Log-log power-law fits over sweep rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Responses dropped for being non-positive or non-finite.
    pub excluded: usize,
    /// `(axis value, mean response)` pairs the line was fit to.
    pub points: Vec<(f64, f64)>,
}

/// Mean response per distinct axis value, skipping non-positive and
/// non-finite responses. Returns the means and the skipped count.
pub fn group_means(xs: &[f64], ys: &[f64]) -> Result<(Vec<(f64, f64)>, usize)> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!("{} axis values vs {} responses", xs.len(), ys.len())));
    }
    let mut groups: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for (&x, &y) in xs.iter().zip(ys) {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::invalid(format!("axis value {x} cannot be log-transformed")));
        }
        if !(y > 0.0 && y.is_finite()) {
            excluded += 1;
            continue;
        }
        // positive floats order like their bit patterns
        let e = groups.entry(x.to_bits()).or_insert((x, 0.0, 0));
        e.1 += y;
        e.2 += 1;
    }
    Ok((groups.into_values().map(|(x, sum, c)| (x, sum / c as f64)).collect(), excluded))
}

/// Ordinary least squares of `ln(mean y)` on `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    let (points, excluded) = group_means(xs, ys)?;
    if points.is_empty() {
        return Err(Error::EmptyData(format!("all {excluded} responses are non-positive")));
    }
    if points.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two distinct axis values"));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        excluded,
        points,
    })
}

/// True when `values` never rises between neighbours, except for at most
/// `allowed` rises each within `rel_tol` of the earlier value.
pub fn is_nonincreasing_with_slack(values: &[f64], allowed: usize, rel_tol: f64) -> bool {
    let mut used = 0;
    for w in values.windows(2) {
        if w[1] > w[0] {
            if w[1] - w[0] > rel_tol * w[0].abs() {
                return false;
            }
            used += 1;
        }
    }
    used <= allowed
}
