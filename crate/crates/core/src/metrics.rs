//! Ranking metrics: AUC, standardized partial AUC and their harmonic mean.

use crate::error::{arg_err, Result};

/// Default false-positive-rate limit for [`pauc`].
pub const PAUC_MAX_FPR: f64 = 0.1;

fn check(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(arg_err!(
            "auc needs non-empty positive and negative sets ({} / {})",
            pos.len(),
            neg.len()
        ));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(arg_err!("scores contain NaN"));
    }
    Ok(())
}

/// Mann-Whitney AUC: P(pos > neg) + ½·P(pos = neg).
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check(pos, neg)?;
    let mut n = neg.to_vec();
    n.sort_by(f64::total_cmp);
    // twice the U statistic, kept integral
    let mut u2: u64 = 0;
    for &p in pos {
        let below = n.partition_point(|&x| x < p);
        let upto = n.partition_point(|&x| x <= p);
        u2 += 2 * below as u64 + (upto - below) as u64;
    }
    Ok(u2 as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// ROC vertices `(fpr, tpr)` from the highest threshold down; tied scores
/// form one vertex so ties trace a diagonal segment.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<Vec<(f64, f64)>> {
    check(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(pts)
}

/// Trapezoidal area under `roc` for `fpr ∈ [0, max_fpr]`, interpolating
/// linearly at the boundary.
pub fn partial_area(roc: &[(f64, f64)], max_fpr: f64) -> f64 {
    let mut area = 0.0;
    for w in roc.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= max_fpr {
            break;
        }
        if x1 <= max_fpr {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0);
            area += (max_fpr - x0) * (y0 + y) / 2.0;
        }
    }
    area
}

/// Partial AUC over `fpr ∈ [0, max_fpr]`, McClish-standardized so a chance
/// ROC scores 0.5 and a perfect one 1.0.
pub fn pauc(pos: &[f64], neg: &[f64], max_fpr: f64) -> Result<f64> {
    if !(max_fpr > 0.0 && max_fpr <= 1.0) {
        return Err(arg_err!("max_fpr must lie in (0, 1], got {max_fpr}"));
    }
    let a = partial_area(&roc_curve(pos, neg)?, max_fpr);
    let lo = max_fpr * max_fpr / 2.0;
    Ok(0.5 * (1.0 + (a - lo) / (max_fpr - lo)))
}

/// Harmonic mean; 0 if any value is 0. Errors on an empty set or values outside `[0, ∞)`.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(arg_err!("harmonic mean of an empty set"));
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(arg_err!("harmonic mean needs finite non-negative values"));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Metrics for one machine type; `None` marks a value that could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineMetrics {
    pub machine: String,
    pub auc_source: Option<f64>,
    pub auc_target: Option<f64>,
    pub pauc: Option<f64>,
}

impl MachineMetrics {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [self.auc_source, self.auc_target, self.pauc].into_iter().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.auc_source.is_some() && self.auc_target.is_some() && self.pauc.is_some()
    }
}

/// Harmonic mean over every per-machine source AUC, target AUC and pAUC.
/// Absent values are skipped with a warning.
pub fn integrated_score(machines: &[MachineMetrics]) -> Result<f64> {
    let mut vals = Vec::with_capacity(machines.len() * 3);
    for m in machines {
        if !m.is_complete() {
            log::warn!(
                "machine {} has missing metrics; excluded from the harmonic mean",
                m.machine
            );
        }
        vals.extend(m.values());
    }
    if !machines.iter().any(MachineMetrics::is_complete) {
        return Err(arg_err!("no machine has complete metrics"));
    }
    harmonic_mean(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.2]).unwrap(), 0.0);
        assert!(auc(&[], &[0.2]).is_err());
    }

    #[test]
    fn pauc_examples() {
        assert_eq!(pauc(&[0.9, 0.8], &[0.1, 0.2], 0.1).unwrap(), 1.0);
        let s = [0.1, 0.4, 0.4, 0.7];
        assert!((pauc(&s, &s, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert!((pauc(&[0.0], &[1.0], 0.1).unwrap() - 0.5 * (1.0 - 0.005 / 0.095)).abs() < 1e-12);
    }

    #[test]
    fn full_range_pauc_is_auc() {
        let pos = [0.3, 0.9, 0.5, 0.5];
        let neg = [0.1, 0.5, 0.6];
        let a = auc(&pos, &neg).unwrap();
        // McClish with max_fpr = 1 maps area A to A
        assert!((pauc(&pos, &neg, 1.0).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(&[0.7; 5]).unwrap() - 0.7).abs() < 1e-15);
        assert!((harmonic_mean(&[1.0, 1.0 / 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.0, 0.9]).unwrap(), 0.0);
        assert!(harmonic_mean(&[]).is_err());
    }
}
