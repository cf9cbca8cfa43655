//! Small summary statistics used by experiment reports.

use serde::{Deserialize, Serialize};

/// Mean and sample standard deviation of a metric, with the number of
/// values it was computed over. An empty summary reports zeros rather
/// than NaN so it stays JSON-serializable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Summarizes a slice of values. Standard deviation uses the n-1
/// denominator and is zero for fewer than two values.
pub fn summary(values: &[f64]) -> SummaryStats {
    let count = values.len();
    if count == 0 {
        return SummaryStats::default();
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = if count < 2 {
        0.0
    } else {
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        (ss / (count - 1) as f64).sqrt()
    };
    SummaryStats { mean, std, count }
}

/// Ranks with ties assigned the average of the tied positions (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties. Returns `None`
/// when fewer than two points are given or either input has no variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn summary_basics() {
        assert_eq!(summary(&[]), SummaryStats::default());
        let one = summary(&[3.5]);
        assert_eq!((one.mean, one.std, one.count), (3.5, 0.0, 1));
        let s = summary(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_relative_eq!(s.mean, 5.0);
        assert_relative_eq!(s.std, (32.0f64 / 7.0).sqrt());
        assert_eq!(s.count, 8);
    }

    #[test]
    fn spearman_monotone_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(spearman(&x, &[10.0, 20.0, 25.0, 90.0]).unwrap(), 1.0);
        assert_relative_eq!(spearman(&x, &[5.0, 4.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn spearman_handles_ties_and_degenerate_inputs() {
        // y has a tie; hand-computed ranks x=[1,2,3,4], y=[1,2.5,2.5,4].
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 2.0]).unwrap();
        assert_relative_eq!(rho, 0.9486832980505138, max_relative = 1e-12);
        assert!(spearman(&[1.0], &[2.0]).is_none());
        assert!(spearman(&[1.0, 2.0], &[3.0, 3.0]).is_none());
        assert!(spearman(&[1.0, 2.0], &[3.0]).is_none());
    }
}
