//! Midranks and rank correlations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Midranks (1-based, tied values share the mean of the ranks they span).
/// With `descending`, the largest value gets rank 1.
pub fn midranks(values: &[f64], descending: bool) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank input".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    Ok(ranks)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "rank correlation needs two equal-length inputs of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Kendall's tau-b over all pairs.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).expect("finite");
            let dy = (y[i] - y[j]).partial_cmp(&0.0).expect("finite");
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    tie_x += 1;
                    tie_y += 1;
                }
                (Equal, _) => tie_x += 1,
                (_, Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - tie_x) as f64) * ((pairs - tie_y) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::invalid("kendall tau undefined: an input is constant"));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Pearson correlation of the midranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let rx = midranks(x, false)?;
    let ry = midranks(y, false)?;
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("spearman rho undefined: an input is constant"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub name: String,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    /// Per-indicator breakdown.
    pub indicators: Vec<Correlation>,
}

pub fn correlation(name: &str, x: &[f64], y: &[f64]) -> Result<Correlation> {
    Ok(Correlation {
        name: name.to_string(),
        kendall_tau: kendall_tau(x, y)?,
        spearman_rho: spearman_rho(x, y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 20.0, 5.0], false).unwrap(), [2.0, 3.5, 3.5, 1.0]);
        assert_eq!(midranks(&[10.0, 20.0, 20.0, 5.0], true).unwrap(), [3.0, 1.5, 1.5, 4.0]);
        assert!(midranks(&[1.0, f64::NAN], false).is_err());
    }

    #[test]
    fn kendall_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(kendall_tau(&x, &rev).unwrap(), -1.0);
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_basics() {
        let x = [0.3, 0.1, 0.9];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&x, &[-0.3, -0.1, -0.9]).unwrap() + 1.0).abs() < 1e-15);
    }
}
