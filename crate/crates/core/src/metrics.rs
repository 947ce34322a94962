//! Evaluation and paired statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::losses::{pseudo_label, LossConfig};
use crate::{Error, Result};

/// Confusion counts with rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row-major `n x n` counts.
    pub counts: Vec<u64>,
    pub n: usize,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn column_sum(&self, pred: usize) -> u64 {
        (0..self.n).map(|g| self.get(g, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|k| self.get(k, k)).sum()
    }
}

/// Tallies prediction/ground-truth pairs into a confusion matrix.
pub fn confusion(preds: &[usize], gts: &[usize], n: usize) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::input("predictions and ground truth differ in length"));
    }
    let mut counts = vec![0u64; n * n];
    for (&p, &g) in preds.iter().zip(gts) {
        if p >= n || g >= n {
            return Err(Error::input(format!("class out of range: pred {p}, gt {g}, n {n}")));
        }
        counts[g * n + p] += 1;
    }
    Ok(ConfusionMatrix { counts, n, total: preds.len() as u64 })
}

/// `1 - trace/total`.
pub fn error_rate(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total == 0 {
        return Err(Error::input("confusion matrix is empty"));
    }
    Ok(1.0 - cm.trace() as f64 / cm.total as f64)
}

/// Classes the model has stopped predicting: class `j` is collapsed when its
/// column receives less than `eps` times its uniform share of predictions.
pub fn collapsed_classes(cm: &ConfusionMatrix, eps: f64) -> Vec<usize> {
    if cm.total == 0 {
        return Vec::new();
    }
    (0..cm.n)
        .filter(|&j| (cm.column_sum(j) as f64 / cm.total as f64) < eps / cm.n as f64)
        .collect()
}

/// Coverage, purity and mean weight of pseudo-labels over an unlabeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    /// Fraction of items with positive weight.
    pub coverage: f64,
    /// Fraction of accepted items whose pseudo-class matches ground truth;
    /// undefined (`None`) when nothing is accepted.
    pub purity: Option<f64>,
    /// Mean weight over all items.
    pub mean_weight: f64,
}

/// Pseudo-label quality against ground truth, under a loss configuration.
pub fn pseudo_label_stats(probs_weak: &[Vec<f64>], gts: &[usize], cfg: &LossConfig) -> Result<PseudoLabelStats> {
    if probs_weak.is_empty() {
        return Err(Error::input("no unlabeled predictions given"));
    }
    if probs_weak.len() != gts.len() {
        return Err(Error::input("predictions and ground truth differ in length"));
    }
    let mut accepted = 0usize;
    let mut correct = 0usize;
    let mut weight_sum = 0.0;
    for (probs, &gt) in probs_weak.iter().zip(gts) {
        let pl = pseudo_label(probs, cfg)?;
        weight_sum += pl.weight;
        if pl.accepted() {
            accepted += 1;
            if pl.class == gt {
                correct += 1;
            }
        }
    }
    let n = probs_weak.len() as f64;
    Ok(PseudoLabelStats {
        coverage: accepted as f64 / n,
        purity: if accepted > 0 { Some(correct as f64 / accepted as f64) } else { None },
        mean_weight: weight_sum / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Median of the differences is positive.
    Greater,
    /// Median of the differences is negative.
    Less,
    TwoSided,
}

/// Outcome of the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonOutcome {
    /// Sample size after dropping zero differences.
    pub n_effective: usize,
    /// Sum of the ranks of positive differences (mid-ranks under ties).
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    /// Zero differences dropped before ranking.
    pub tie_count: usize,
    /// True when the p-value comes from full sign enumeration.
    pub exact: bool,
    /// True when every difference was zero; the p-value of 1 is then
    /// uninformative.
    pub degenerate: bool,
}

fn midranks(abs: &[f64]) -> Vec<f64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| abs[i].partial_cmp(&abs[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Exact tail probabilities of the rank-sum under random signs, by dynamic
/// programming over the distribution of `W` (doubled to stay integral with
/// mid-ranks). Returns `(P(W >= w_obs), P(W <= w_obs))`.
fn exact_tails(ranks: &[f64], w_obs: f64) -> (f64, f64) {
    let doubled: Vec<u64> = ranks.iter().map(|&r| (2.0 * r).round() as u64).collect();
    let max_sum: u64 = doubled.iter().sum();
    let mut ways = vec![0.0f64; (max_sum + 1) as usize];
    ways[0] = 1.0;
    let mut reach = 0u64;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            ways[s as usize] += ways[(s - r) as usize];
        }
    }
    let total = 2f64.powi(ranks.len() as i32);
    let w2 = 2.0 * w_obs;
    let mut ge = 0.0;
    let mut le = 0.0;
    for (s, &w) in ways.iter().enumerate() {
        if s as f64 >= w2 - 1e-9 {
            ge += w;
        }
        if s as f64 <= w2 + 1e-9 {
            le += w;
        }
    }
    (ge / total, le / total)
}

/// Approximate tails with tie-corrected variance and continuity correction.
fn normal_tails(ranks: &[f64], w_obs: f64) -> (f64, f64) {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Tie correction: subtract sum(t^3 - t)/48 over groups of equal ranks.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let ge = 1.0 - normal.cdf((w_obs - 0.5 - mean) / sd);
    let le = normal.cdf((w_obs + 0.5 - mean) / sd);
    (ge, le)
}

/// One-sample Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped and reported in `tie_count`; absolute values
/// are ranked with mid-ranks. The p-value is exact (full enumeration of all
/// `2^n` sign assignments) up to `n = 20`, and a tie-corrected normal
/// approximation with continuity correction beyond that.
pub fn wilcoxon_one_sided(diffs: &[f64], alternative: Alternative) -> Result<WilcoxonOutcome> {
    if diffs.is_empty() {
        return Err(Error::input("wilcoxon: need at least one difference"));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::input("wilcoxon: differences must be finite"));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let tie_count = diffs.len() - nonzero.len();
    if nonzero.is_empty() {
        return Ok(WilcoxonOutcome {
            n_effective: 0,
            statistic: 0.0,
            p_value: 1.0,
            alternative,
            tie_count,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_obs: f64 = ranks.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(&r, _)| r).sum();

    let n = nonzero.len();
    let exact = n <= 20;
    let (p_ge, p_le) = if exact { exact_tails(&ranks, w_obs) } else { normal_tails(&ranks, w_obs) };
    let p = match alternative {
        Alternative::Greater => p_ge,
        Alternative::Less => p_le,
        Alternative::TwoSided => (2.0 * p_ge.min(p_le)).min(1.0),
    };
    Ok(WilcoxonOutcome {
        n_effective: n,
        statistic: w_obs,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        alternative,
        tie_count,
        exact,
        degenerate: false,
    })
}

/// Summary of per-fold gains `a - b` (baseline error minus method error).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedGain {
    pub gains: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; undefined for a single fold.
    pub std: Option<f64>,
    pub max: f64,
    pub min: f64,
    pub range: f64,
}

/// Fold-wise paired gains and their summary statistics.
pub fn paired_gain(a: &[f64], b: &[f64]) -> Result<PairedGain> {
    if a.len() != b.len() {
        return Err(Error::input("paired_gain: arrays differ in length"));
    }
    if a.is_empty() {
        return Err(Error::input("paired_gain: empty input"));
    }
    let gains: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = gains.len() as f64;
    let mean = gains.iter().sum::<f64>() / n;
    let std = if gains.len() > 1 {
        Some((gains.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    let max = gains.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(PairedGain { gains: gains.clone(), mean, std, max, min, range: max - min })
}

/// Paired comparison of a method against a baseline across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub fold_labels: Vec<String>,
    pub baseline: Vec<f64>,
    pub method: Vec<f64>,
    pub summary: PairedGain,
    pub wilcoxon: WilcoxonOutcome,
}

impl ComparisonReport {
    pub fn new(fold_labels: Vec<String>, baseline: Vec<f64>, method: Vec<f64>) -> Result<Self> {
        if fold_labels.len() != baseline.len() || baseline.len() != method.len() {
            return Err(Error::input("comparison inputs differ in length"));
        }
        let summary = paired_gain(&baseline, &method)?;
        let wilcoxon = wilcoxon_one_sided(&summary.gains, Alternative::Greater)?;
        Ok(ComparisonReport { fold_labels, baseline, method, summary, wilcoxon })
    }

    /// Fold rows plus a summary row, mirroring a benchmark table layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,baseline,method,gain\n");
        for (((label, b), m), g) in self
            .fold_labels
            .iter()
            .zip(&self.baseline)
            .zip(&self.method)
            .zip(&self.summary.gains)
        {
            out.push_str(&format!("{label},{b},{m},{g}\n"));
        }
        let std = self.summary.std.map_or("NA".to_string(), |s| format!("{s:.6}"));
        out.push_str(&format!(
            "summary,mean_gain={:.6},std={},p_value={:.6}\n",
            self.summary.mean, std, self.wilcoxon.p_value
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossVariant;

    #[test]
    fn confusion_basics() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.trace(), 3);
        assert_eq!(error_rate(&cm).unwrap(), 0.0);

        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.counts, vec![0; 9]);
        assert!(error_rate(&empty).is_err());

        let cm = confusion(&[0, 1], &[1, 1], 2).unwrap();
        assert_eq!(cm.get(1, 0), 1);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(0, 0), 0);

        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn error_rate_values() {
        let cm = ConfusionMatrix { counts: vec![1, 1, 1, 1], n: 2, total: 4 };
        assert_eq!(error_rate(&cm).unwrap(), 0.5);
        let mut counts = vec![0u64; 4];
        counts[0] = 93;
        counts[1] = 7;
        let cm = ConfusionMatrix { counts, n: 2, total: 100 };
        assert!((error_rate(&cm).unwrap() - 0.07).abs() < 1e-12);
    }

    #[test]
    fn collapse_detection() {
        let diag = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert!(collapsed_classes(&diag, 0.2).is_empty());

        // Class 1 never predicted.
        let cm = confusion(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(collapsed_classes(&cm, 0.2), vec![1]);
        assert_eq!(collapsed_classes(&cm, 1e-9), vec![1]);

        // 10 classes, class 7 gets 1% of predictions: 0.01 < 0.2 * 0.1.
        let mut preds = vec![0usize; 99];
        preds.push(7);
        let mut p = Vec::new();
        for k in 0..10 {
            for _ in 0..10 {
                p.push(k);
            }
        }
        let cm = confusion(&preds, &p, 10).unwrap();
        let collapsed = collapsed_classes(&cm, 0.2);
        assert!(collapsed.contains(&7), "collapsed = {collapsed:?}");
        assert!(!collapsed.contains(&0));
    }

    #[test]
    fn pseudo_label_stats_cases() {
        let cfg = LossConfig::new(LossVariant::Pl);
        // All below threshold: coverage 0, purity undefined.
        let s = pseudo_label_stats(&[vec![0.6, 0.4], vec![0.7, 0.3]], &[0, 1], &cfg).unwrap();
        assert_eq!(s.coverage, 0.0);
        assert_eq!(s.purity, None);

        // All above and correct.
        let s = pseudo_label_stats(&[vec![0.97, 0.03], vec![0.02, 0.98]], &[0, 1], &cfg).unwrap();
        assert_eq!(s.coverage, 1.0);
        assert_eq!(s.purity, Some(1.0));

        // sigma = (0.96 correct, 0.97 wrong, 0.90): coverage 2/3, purity 1/2.
        let probs = vec![vec![0.96, 0.04], vec![0.97, 0.03], vec![0.90, 0.10]];
        let s = pseudo_label_stats(&probs, &[0, 1, 0], &cfg).unwrap();
        assert!((s.coverage - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.purity, Some(0.5));

        assert!(pseudo_label_stats(&[], &[], &cfg).is_err());
    }

    #[test]
    fn wilcoxon_paper_values() {
        // 6 strictly positive differences.
        let out = wilcoxon_one_sided(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Alternative::Greater).unwrap();
        assert_eq!(out.p_value, 0.015625);
        assert!(out.exact);

        // Smallest-magnitude difference negative.
        let out = wilcoxon_one_sided(&[-1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Alternative::Greater).unwrap();
        assert_eq!(out.p_value, 0.03125);

        // 3 strictly positive differences.
        let out = wilcoxon_one_sided(&[0.2, 0.4, 0.1], Alternative::Greater).unwrap();
        assert_eq!(out.p_value, 0.125);

        // The negative-rank-5 pattern: p = 10/64.
        let gains = [4.44, 2.30, 2.35, -7.37, 10.53, 2.69];
        let out = wilcoxon_one_sided(&gains, Alternative::Greater).unwrap();
        assert_eq!(out.p_value, 0.15625);

        // All-negative: W+ = 0, so P(W+ >= 0) is the full tail.
        let out = wilcoxon_one_sided(&[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0], Alternative::Greater).unwrap();
        assert!(out.p_value > 0.9);
        assert_eq!(out.p_value, 1.0);
        let less = wilcoxon_one_sided(&[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0], Alternative::Less).unwrap();
        assert_eq!(less.p_value, 0.015625);
    }

    #[test]
    fn wilcoxon_zero_handling() {
        let out = wilcoxon_one_sided(&[0.0, 0.0, 1.0, 2.0], Alternative::Greater).unwrap();
        assert_eq!(out.tie_count, 2);
        assert_eq!(out.n_effective, 2);
        assert_eq!(out.p_value, 0.25);

        let out = wilcoxon_one_sided(&[0.0, 0.0], Alternative::Greater).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.p_value, 1.0);

        assert!(wilcoxon_one_sided(&[], Alternative::Greater).is_err());
        assert!(wilcoxon_one_sided(&[f64::NAN], Alternative::Greater).is_err());
    }

    #[test]
    fn wilcoxon_midranks_on_ties() {
        // |diffs| = (1, 1, 2): ranks (1.5, 1.5, 3).
        let out = wilcoxon_one_sided(&[1.0, -1.0, 2.0], Alternative::Greater).unwrap();
        assert_eq!(out.statistic, 4.5);
    }

    #[test]
    fn wilcoxon_p_depends_on_signs_and_ranks_only() {
        let a = wilcoxon_one_sided(&[1.0, -2.0, 3.0, 4.0], Alternative::Greater).unwrap();
        let b = wilcoxon_one_sided(&[10.0, -20.0, 30.0, 400.0], Alternative::Greater).unwrap();
        assert_eq!(a.p_value, b.p_value);
        assert_eq!(a.statistic, b.statistic);
    }

    #[test]
    fn wilcoxon_normal_approximation_branch() {
        // n = 25 forces the approximation; compare against the exact DP.
        let diffs: Vec<f64> = (1..=25).map(|i| if i % 5 == 0 { -(i as f64) } else { i as f64 }).collect();
        let approx = wilcoxon_one_sided(&diffs, Alternative::Greater).unwrap();
        assert!(!approx.exact);
        let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let w: f64 = ranks.iter().zip(&diffs).filter(|(_, &d)| d > 0.0).map(|(&r, _)| r).sum();
        let (exact_ge, _) = exact_tails(&ranks, w);
        assert!(
            (approx.p_value - exact_ge).abs() < 0.01,
            "approx {} vs exact {}",
            approx.p_value,
            exact_ge
        );
    }

    #[test]
    fn paired_gain_summary() {
        let out = paired_gain(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(out.gains, vec![0.0, 0.0]);
        assert_eq!(out.mean, 0.0);

        let single = paired_gain(&[3.0], &[1.0]).unwrap();
        assert_eq!(single.std, None);
        assert_eq!(single.mean, 2.0);

        assert!(paired_gain(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn comparison_report_csv_layout() {
        let report = ComparisonReport::new(
            vec!["0".into(), "1".into()],
            vec![9.0, 8.0],
            vec![7.0, 6.5],
        )
        .unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fold,baseline,method,gain");
        assert_eq!(lines[1], "0,9,7,2");
        assert!(lines[3].starts_with("summary,mean_gain="));
    }
}
