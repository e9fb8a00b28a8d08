//! Evaluation mathematics: ROC/AUC, PR/AP, accuracy/F1, mean BCE and the
//! exact binomial test.

use crate::error::{Error, Result};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` at each distinct score threshold, highest first.
    pub points: Vec<(f64, f64)>,
    pub average_precision: f64,
}

fn check_pairs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim("labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Cumulative (true positive, false positive) counts after each group of tied
/// scores, visiting scores from highest to lowest.
fn tied_sweep(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (pos, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = idx.get(pos + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((tp, fp));
        }
    }
    out
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut points = vec![(0.0, 0.0)];
    points.extend(
        tied_sweep(scores, labels)
            .into_iter()
            .map(|(tp, fp)| (fp as f64 / neg as f64, tp as f64 / pos as f64)),
    );
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

pub fn pr_ap(scores: &[f64], labels: &[u8]) -> Result<PrCurve> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::invalid(
            "average precision needs at least one positive",
        ));
    }
    let mut points = Vec::new();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in tied_sweep(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(PrCurve {
        points,
        average_precision: ap,
    })
}

/// `(accuracy, f1)`; F1 is 0 when there are no positives and no positive decisions.
pub fn accuracy_f1(decisions: &[bool], labels: &[u8]) -> Result<(f64, f64)> {
    if decisions.len() != labels.len() {
        return Err(Error::dim("labels", decisions.len(), labels.len()));
    }
    if decisions.is_empty() {
        return Err(Error::invalid("no decisions to score"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&d, &y) in decisions.iter().zip(labels) {
        match (d, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / decisions.len() as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    Ok((accuracy, f1))
}

pub fn mean_bce(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::dim("labels", probabilities.len(), labels.len()));
    }
    if probabilities.is_empty() {
        return Err(Error::invalid("no probabilities"));
    }
    let mut sum = 0.0;
    for (&p, &y) in probabilities.iter().zip(labels) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("probability {p} outside (0, 1)")));
        }
        sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(sum / probabilities.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialResult {
    pub successes: u64,
    pub trials: u64,
    pub one_sided_p: f64,
    pub two_sided_p: f64,
    pub one_minus_two_sided_p: f64,
}

fn binomial_coefficients(n: u64) -> Vec<BigUint> {
    let mut row = vec![BigUint::one()];
    for i in 1..=n {
        let prev = row[row.len() - 1].clone();
        row.push(prev * BigUint::from(n - i + 1) / BigUint::from(i));
    }
    row
}

fn big_to_f64_ratio(num: &BigUint, den: &BigUint) -> f64 {
    // Shift both down so the conversion stays in range for large n.
    let bits = den.bits().max(num.bits());
    let shift = bits.saturating_sub(1000);
    let n = (num >> shift).to_f64().unwrap_or(f64::INFINITY);
    let d = (den >> shift).to_f64().unwrap_or(f64::INFINITY);
    n / d
}

/// `P(X ≥ k)` for `X ~ Bin(n, 1/2)` as an exact fraction `(Σ C(n,i), 2^n)`.
pub fn upper_tail_half_exact(k: u64, n: u64) -> Result<(BigUint, BigUint)> {
    if k > n {
        return Err(Error::invalid(format!("successes {k} exceed trials {n}")));
    }
    let coeffs = binomial_coefficients(n);
    let num = coeffs[k as usize..]
        .iter()
        .fold(BigUint::zero(), |a, c| a + c);
    Ok((num, BigUint::one() << n))
}

/// `P(X ≤ k)` for `X ~ Bin(n, 1/2)` as an exact fraction.
pub fn lower_tail_half_exact(k: u64, n: u64) -> Result<(BigUint, BigUint)> {
    if k > n {
        return Err(Error::invalid(format!("successes {k} exceed trials {n}")));
    }
    let coeffs = binomial_coefficients(n);
    let num = coeffs[..=k as usize]
        .iter()
        .fold(BigUint::zero(), |a, c| a + c);
    Ok((num, BigUint::one() << n))
}

/// Exact binomial test of `k` successes in `n` trials against success rate `p0`.
///
/// Coefficients are exact integers; for `p0 = 0.5` the tails are exact
/// fractions until the final division.
pub fn binomial_test(k: u64, n: u64, p0: f64) -> Result<BinomialResult> {
    if k > n {
        return Err(Error::invalid(format!("successes {k} exceed trials {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::invalid("p0 must lie in (0, 1)"));
    }
    let (upper, lower) = if p0 == 0.5 {
        let (u, den) = upper_tail_half_exact(k, n)?;
        let (l, _) = lower_tail_half_exact(k, n)?;
        (big_to_f64_ratio(&u, &den), big_to_f64_ratio(&l, &den))
    } else {
        let coeffs = binomial_coefficients(n);
        let pmf = |i: u64| {
            let c = coeffs[i as usize].to_f64().unwrap_or(f64::INFINITY);
            c * p0.powi(i as i32) * (1.0 - p0).powi((n - i) as i32)
        };
        (
            (k..=n).map(pmf).sum::<f64>().min(1.0),
            (0..=k).map(pmf).sum::<f64>().min(1.0),
        )
    };
    let two_sided = (2.0 * upper.min(lower)).min(1.0);
    Ok(BinomialResult {
        successes: k,
        trials: n,
        one_sided_p: upper,
        two_sided_p: two_sided,
        one_minus_two_sided_p: 1.0 - two_sided,
    })
}

/// Monte-Carlo null band for AUC: quantiles of the AUC over random label
/// permutations of the given scores. Returns `(lower, upper)` at
/// `(1 - level) / 2` and `(1 + level) / 2`.
pub fn auc_null_band(
    scores: &[f64],
    labels: &[u8],
    level: f64,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    roc_auc(scores, labels)?;
    if draws == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("need positive draws and level in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let mut aucs: Vec<f64> = (0..draws)
        .map(|_| {
            perm.shuffle(&mut rng);
            roc_auc(scores, &perm).map(|r| r.auc)
        })
        .collect::<Result<_>>()?;
    aucs.sort_by(f64::total_cmp);
    let q = |p: f64| aucs[((p * (draws - 1) as f64).round() as usize).min(draws - 1)];
    Ok((q((1.0 - level) / 2.0), q((1.0 + level) / 2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Instance,
    Person,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Instance => "instance",
            LabelMode::Person => "person",
        }
    }
}

/// Recordings of participants with another recording in the target training
/// set, and how many the model called members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLabelBlock {
    pub split: String,
    pub total: u64,
    pub predicted_member: u64,
    pub binomial: Option<BinomialResult>,
    /// AUC of these recordings' scores against the split's person-level
    /// non-members, with its permutation null band.
    pub auc_vs_nonmembers: Option<f64>,
    pub null_band: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub recordings: usize,
    pub auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    /// Frame-level BCE of the frame classifier against this label mode.
    pub frame_bce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_mode: LabelMode,
    pub feature_config: String,
    pub threshold: f64,
    /// Test-split curves and metrics.
    pub roc_points: Vec<(f64, f64)>,
    pub auc: f64,
    pub pr_points: Vec<(f64, f64)>,
    pub average_precision: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub mean_bce: f64,
    /// Test-split cross-label significance (`None` when the population is empty).
    pub binomial: Option<BinomialResult>,
    pub splits: Vec<SplitMetrics>,
    pub cross_label: Vec<CrossLabelBlock>,
    pub attack_history: Vec<(usize, f64, f64)>,
    pub attack_best_epoch: usize,
    pub target_train_mse: Option<f64>,
    pub target_heldout_mse: Option<f64>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(text)?;
        Ok(report)
    }

    pub fn roc_csv(&self) -> String {
        curve_csv("fpr,tpr", &self.roc_points)
    }

    pub fn pr_csv(&self) -> String {
        curve_csv("recall,precision", &self.pr_points)
    }
}

fn curve_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (x, y) in points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_worked_example() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-15);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        let flipped = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[1, 1, 0, 0]).unwrap();
        assert!((flipped.auc - 0.25).abs() < 1e-15);
    }

    #[test]
    fn auc_perfect_and_ties() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().auc,
            1.0
        );
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap().auc, 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn ap_worked_examples() {
        let r = pr_ap(&[0.8, 0.4, 0.35, 0.1], &[1, 0, 1, 0]).unwrap();
        assert!((r.average_precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(
            pr_ap(&[0.9, 0.8, 0.1], &[1, 1, 0])
                .unwrap()
                .average_precision,
            1.0
        );
        for n in 1..8usize {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let mut labels = vec![0u8; n];
            labels[n - 1] = 1;
            let ap = pr_ap(&scores, &labels).unwrap().average_precision;
            assert!((ap - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!(pr_ap(&[0.3], &[0]).is_err());
    }

    #[test]
    fn accuracy_and_f1() {
        assert_eq!(accuracy_f1(&[true, false], &[1, 0]).unwrap(), (1.0, 1.0));
        // TP=2, FP=1, FN=1, TN=0
        let (acc, f1) = accuracy_f1(&[true, true, true, false], &[1, 1, 0, 1]).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_f1(&[false], &[0]).unwrap(), (1.0, 0.0));
        assert!(accuracy_f1(&[true], &[1, 0]).is_err());
        assert!(accuracy_f1(&[], &[]).is_err());
    }

    #[test]
    fn bce_values() {
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(mean_bce(&[0.5, 0.5, 0.5], &[0, 1, 1]).unwrap(), ln2);
        let v = mean_bce(&[0.99, 0.01], &[1, 0]).unwrap();
        assert!((v - (-(0.99f64).ln())).abs() < 1e-15);
        assert!((v - 0.01005).abs() < 1e-5);
        let a = mean_bce(&[0.2, 0.7], &[1, 0]).unwrap();
        let b = mean_bce(&[0.8, 0.3], &[0, 1]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(mean_bce(&[1.0], &[1]).is_err());
    }

    #[test]
    fn binomial_values() {
        let r = binomial_test(16, 19, 0.5).unwrap();
        assert_eq!(r.one_sided_p, 1160.0 / 524288.0);
        assert!((r.one_minus_two_sided_p - 0.9956).abs() < 1e-4);
        let r = binomial_test(8, 14, 0.5).unwrap();
        assert_eq!(r.one_sided_p, 6476.0 / 16384.0);
        assert!((r.one_minus_two_sided_p - 0.209).abs() < 1e-3);
        assert_eq!(binomial_test(0, 5, 0.5).unwrap().one_sided_p, 1.0);
        assert!(binomial_test(6, 5, 0.5).is_err());
        let (num, den) = upper_tail_half_exact(16, 19).unwrap();
        assert_eq!(num, BigUint::from(1160u32));
        assert_eq!(den, BigUint::from(524288u32));
    }

    #[test]
    fn binomial_general_p0_matches_half_path() {
        let a = binomial_test(7, 12, 0.5).unwrap();
        let b = binomial_test(7, 12, 0.5 + 1e-15).unwrap();
        assert!((a.one_sided_p - b.one_sided_p).abs() < 1e-12);
        let r = binomial_test(3, 3, 0.9).unwrap();
        assert!((r.one_sided_p - 0.729).abs() < 1e-12);
    }

    #[test]
    fn binomial_large_n_stays_finite() {
        let r = binomial_test(1200, 2000, 0.5).unwrap();
        assert!(r.one_sided_p > 0.0 && r.one_sided_p < 1e-10);
        assert!(r.two_sided_p.is_finite());
    }

    #[test]
    fn null_band_brackets_half() {
        let scores: Vec<f64> = (0..40).map(|i| (i * 37 % 41) as f64).collect();
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let (lo, hi) = auc_null_band(&scores, &labels, 0.95, 2000, 1).unwrap();
        assert!(lo < 0.5 && hi > 0.5);
        // Normal approximation: sd = sqrt((n1+n2+1)/(12 n1 n2)) ≈ 0.093
        assert!((hi - 0.5 - 1.96 * 0.0932).abs() < 0.03, "{hi}");
    }
}
