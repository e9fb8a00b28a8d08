//! Recording-level membership: five order-free statistics of the frame
//! probabilities, a linear SVM, a sigmoid squashing of its margin, and a
//! validation-tuned decision threshold.

use crate::error::{Error, Result};
use crate::nnet::{sigmoid, softplus};
use serde::{Deserialize, Serialize};

pub const N_STATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordingStats {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Mean per-frame binary entropy, in nats.
    pub entropy: f64,
}

impl RecordingStats {
    pub fn to_array(&self) -> [f64; N_STATS] {
        [
            self.mean,
            self.variance,
            self.skewness,
            self.excess_kurtosis,
            self.entropy,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordingSummary {
    pub recording_id: u32,
    pub stats: RecordingStats,
    pub y_instance: u8,
    pub y_person: u8,
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Population moments, excess kurtosis, and mean binary entropy.
/// Skewness and kurtosis are 0 when the variance is below 1e-12.
pub fn summarize_recording(probabilities: &[f64]) -> Result<RecordingStats> {
    if probabilities.is_empty() {
        return Err(Error::invalid("recording has no frame probabilities"));
    }
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("frame probabilities must lie in [0, 1]"));
    }
    let n = probabilities.len() as f64;
    let mean = probabilities.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for p in probabilities {
        let d = p - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, excess_kurtosis) = if m2 < 1e-12 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };
    let entropy = probabilities
        .iter()
        .map(|&p| -(xlnx(p) + xlnx(1.0 - p)))
        .sum::<f64>()
        / n;
    Ok(RecordingStats {
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        entropy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 2000,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: [f64; N_STATS],
    pub bias: f64,
    pub feature_mean: [f64; N_STATS],
    pub feature_scale: [f64; N_STATS],
    /// `probability = sigmoid(platt_a · margin + platt_b)`.
    pub platt_a: f64,
    pub platt_b: f64,
    /// Unset until [`tune_threshold`] or [`LinearSvm::with_threshold`].
    pub threshold: Option<f64>,
}

impl LinearSvm {
    pub fn margin(&self, x: &[f64; N_STATS]) -> f64 {
        let mut m = self.bias;
        for i in 0..N_STATS {
            m += self.weights[i] * (x[i] - self.feature_mean[i]) / self.feature_scale[i];
        }
        m
    }

    pub fn probability(&self, x: &[f64; N_STATS]) -> f64 {
        sigmoid(self.platt_a * self.margin(x) + self.platt_b)
    }

    /// Raw linear decision: member iff the margin is non-negative.
    pub fn predict_label(&self, x: &[f64; N_STATS]) -> bool {
        self.margin(x) >= 0.0
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::invalid("threshold must lie in [0, 1]"));
        }
        self.threshold = Some(threshold);
        Ok(self)
    }
}

fn check_binary(n: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim("labels", n, labels.len()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

fn objective(w: &[f64; N_STATS], b: f64, z: &[[f64; N_STATS]], y: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge = z
        .iter()
        .zip(y)
        .map(|(x, yi)| {
            let f = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            (1.0 - yi * f).max(0.0)
        })
        .sum::<f64>()
        / z.len() as f64;
    reg + hinge
}

/// Linear SVM on standardized statistics, trained by full-batch subgradient
/// descent on `λ/2‖w‖² + mean hinge` with step `lr/√t`; the iterate with the
/// lowest objective is kept. The margin is then squashed with Platt scaling
/// fitted on the training set.
///
/// Full-batch updates make the result independent of `seed`; it is accepted
/// so every pipeline stage takes an explicit seed.
pub fn train_svm(
    features: &[[f64; N_STATS]],
    labels: &[u8],
    params: &SvmParams,
    _seed: u64,
) -> Result<LinearSvm> {
    check_binary(features.len(), labels)?;
    if !(params.lambda > 0.0) || !(params.learning_rate > 0.0) {
        return Err(Error::invalid("lambda and learning rate must be positive"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("summary statistics must be finite"));
    }
    let n = features.len() as f64;
    let mut feature_mean = [0.0; N_STATS];
    let mut feature_scale = [0.0; N_STATS];
    for i in 0..N_STATS {
        feature_mean[i] = features.iter().map(|x| x[i]).sum::<f64>() / n;
        let var = features
            .iter()
            .map(|x| (x[i] - feature_mean[i]).powi(2))
            .sum::<f64>()
            / n;
        feature_scale[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<[f64; N_STATS]> = features
        .iter()
        .map(|x| std::array::from_fn(|i| (x[i] - feature_mean[i]) / feature_scale[i]))
        .collect();
    let y: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 1 { 1.0 } else { -1.0 })
        .collect();

    let mut w = [0.0; N_STATS];
    let mut b = 0.0;
    let mut best = (objective(&w, b, &z, &y, params.lambda), w, b);
    for t in 1..=params.epochs {
        let mut gw: [f64; N_STATS] = std::array::from_fn(|i| params.lambda * w[i]);
        let mut gb = 0.0;
        for (x, &yi) in z.iter().zip(&y) {
            let f = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            if yi * f < 1.0 {
                for i in 0..N_STATS {
                    gw[i] -= yi * x[i] / n;
                }
                gb -= yi / n;
            }
        }
        let step = params.learning_rate / (t as f64).sqrt();
        for i in 0..N_STATS {
            w[i] -= step * gw[i];
        }
        b -= step * gb;
        let obj = objective(&w, b, &z, &y, params.lambda);
        if obj < best.0 {
            best = (obj, w, b);
        }
    }
    let mut svm = LinearSvm {
        weights: best.1,
        bias: best.2,
        feature_mean,
        feature_scale,
        platt_a: 1.0,
        platt_b: 0.0,
        threshold: None,
    };
    let margins: Vec<f64> = features.iter().map(|x| svm.margin(x)).collect();
    let (a, b) = fit_platt(&margins, labels)?;
    svm.platt_a = a;
    svm.platt_b = b;
    Ok(svm)
}

/// Fits `P(y = 1 | margin) = sigmoid(a · margin + b)` by Newton's method on
/// the cross-entropy with Platt's smoothed targets.
pub fn fit_platt(margins: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_binary(margins.len(), labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let t: Vec<f64> = labels
        .iter()
        .map(|&y| if y == 1 { hi } else { lo })
        .collect();
    let nll = |a: f64, b: f64| {
        margins
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = a * f + b;
                softplus(z) - ti * z
            })
            .sum::<f64>()
    };
    let mut a = 0.0;
    let mut b = ((n_pos + 1.0) / (n_neg + 1.0)).ln();
    let mut current = nll(a, b);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for (&f, &ti) in margins.iter().zip(&t) {
            let p = sigmoid(a * f + b);
            let d = p - ti;
            let w = p * (1.0 - p);
            ga += d * f;
            gb += d;
            haa += w * f * f;
            hab += w * f;
            hbb += w;
        }
        if ga.abs() < 1e-12 && gb.abs() < 1e-12 {
            break;
        }
        let det = haa * hbb - hab * hab;
        if !(det > 0.0) {
            break;
        }
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-10 {
            let cand = nll(a + step * da, b + step * db);
            if cand <= current {
                a += step * da;
                b += step * db;
                improved = cand < current;
                current = cand;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numerical {
            layer: 0,
            context: "probability calibration".into(),
        });
    }
    Ok((a, b))
}

/// Picks the threshold maximizing accuracy over 0, 1 and the midpoints of
/// adjacent distinct probabilities. Ties go to the larger threshold.
/// Returns `(threshold, accuracy)`.
pub fn best_threshold(probabilities: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if probabilities.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    if labels.len() != probabilities.len() {
        return Err(Error::dim("labels", probabilities.len(), labels.len()));
    }
    let mut sorted: Vec<f64> = probabilities.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![0.0, 1.0];
    candidates.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.sort_by(f64::total_cmp);
    let mut best = (0.0, f64::NEG_INFINITY);
    for &t in &candidates {
        let acc = threshold_accuracy(probabilities, labels, t);
        if acc >= best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

pub fn threshold_accuracy(probabilities: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let correct = probabilities
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) == (y == 1))
        .count();
    correct as f64 / probabilities.len() as f64
}

/// Sets the SVM's threshold from the validation set and returns it.
pub fn tune_threshold(
    svm: &mut LinearSvm,
    validation: &[[f64; N_STATS]],
    labels: &[u8],
) -> Result<f64> {
    let probs: Vec<f64> = validation.iter().map(|x| svm.probability(x)).collect();
    let (t, _) = best_threshold(&probs, labels)?;
    svm.threshold = Some(t);
    Ok(t)
}

/// `(member, probability)`; member iff probability ≥ threshold.
pub fn infer_membership(svm: &LinearSvm, stats: &[f64; N_STATS]) -> Result<(bool, f64)> {
    let t = svm
        .threshold
        .ok_or_else(|| Error::NotReady("svm threshold has not been set".into()))?;
    let p = svm.probability(stats);
    Ok((p >= t, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct power sums, written independently of `summarize_recording`.
    fn oracle(p: &[f64]) -> [f64; 5] {
        let n = p.len() as f64;
        let s1: f64 = p.iter().sum();
        let m = s1 / n;
        let c = |k: i32| p.iter().map(|x| (x - m).powi(k)).sum::<f64>() / n;
        let (m2, m3, m4) = (c(2), c(3), c(4));
        let h = p
            .iter()
            .map(|&x| {
                let a = if x > 0.0 { -x * x.ln() } else { 0.0 };
                let b = if x < 1.0 {
                    -(1.0 - x) * (1.0 - x).ln()
                } else {
                    0.0
                };
                a + b
            })
            .sum::<f64>()
            / n;
        if m2 < 1e-12 {
            [m, m2, 0.0, 0.0, h]
        } else {
            [m, m2, m3 / m2.powf(1.5), m4 / m2.powi(2) - 3.0, h]
        }
    }

    #[test]
    fn constant_half() {
        let s = summarize_recording(&[0.5; 7]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.excess_kurtosis, 0.0);
        assert!((s.entropy - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn two_point_mass() {
        let s = summarize_recording(&[0.01, 0.99, 0.01, 0.99]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.variance - 0.2401).abs() < 1e-15);
        assert!(s.skewness.abs() < 1e-12);
        assert!((s.excess_kurtosis + 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        assert!(summarize_recording(&[]).is_err());
        assert!(summarize_recording(&[1.2]).is_err());
        assert!(summarize_recording(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn matches_power_sum_oracle(p in prop::collection::vec(0.0001f64..0.9999, 1..80)) {
            let s = summarize_recording(&p).unwrap().to_array();
            let o = oracle(&p);
            for (a, b) in s.iter().zip(&o) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            prop_assert!(s[4] >= 0.0 && s[4] <= std::f64::consts::LN_2 + 1e-15);
        }

        #[test]
        fn permutation_invariant(p in prop::collection::vec(0.001f64..0.999, 2..40), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut q = p.clone();
            q.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = summarize_recording(&p).unwrap().to_array();
            let b = summarize_recording(&q).unwrap().to_array();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn constant_entropy_is_binary_entropy(p in 0.0001f64..0.9999, n in 1usize..20) {
            let s = summarize_recording(&vec![p; n]).unwrap();
            let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            prop_assert!((s.entropy - h).abs() < 1e-12);
        }

        #[test]
        fn tuned_threshold_beats_half(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60)
        ) {
            let (p, y): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            let (t, acc) = best_threshold(&p, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert_eq!(acc, threshold_accuracy(&p, &y, t));
            prop_assert!(acc >= threshold_accuracy(&p, &y, 0.5));
        }
    }

    fn separable() -> (Vec<[f64; 5]>, Vec<u8>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            let v = if i % 2 == 0 { -1.0 } else { 1.0 };
            x.push([v, 0.1 * (i % 3) as f64, 0.0, 0.0, 0.3]);
            y.push((i % 2) as u8);
        }
        (x, y)
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let (x, y) = separable();
        let svm = train_svm(&x, &y, &SvmParams::default(), 0).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(svm.predict_label(xi), yi == 1);
        }
        assert!(svm.platt_a > 0.0);
    }

    fn noisy() -> (Vec<[f64; 5]>, Vec<u8>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40u32 {
            let h = (i.wrapping_mul(2654435761) % 1000) as f64 / 1000.0;
            let label = (i % 2) as u8;
            x.push([
                h + 0.3 * label as f64,
                (h * 7.0).fract(),
                (h * 13.0).fract() - 0.5,
                (h * 3.0).fract(),
                0.4 + 0.1 * h,
            ]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn flipped_labels_flip_decisions() {
        let (x, y) = noisy();
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let a = train_svm(&x, &y, &SvmParams::default(), 0).unwrap();
        let b = train_svm(&x, &flipped, &SvmParams::default(), 0).unwrap();
        for xi in &x {
            assert_ne!(a.margin(xi), 0.0);
            assert_ne!(a.predict_label(xi), b.predict_label(xi));
            assert!((a.probability(xi) + b.probability(xi) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_training_set_gives_same_decisions() {
        let (x, y) = noisy();
        let a = train_svm(&x, &y, &SvmParams::default(), 0).unwrap();
        let x2: Vec<[f64; 5]> = x.iter().chain(&x).copied().collect();
        let y2: Vec<u8> = y.iter().chain(&y).copied().collect();
        let b = train_svm(&x2, &y2, &SvmParams::default(), 0).unwrap();
        for xi in &x {
            assert_eq!(a.predict_label(xi), b.predict_label(xi));
        }
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = separable();
        assert!(matches!(
            train_svm(&x, &[1; 10], &SvmParams::default(), 0),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn margin_scaling_leaves_decisions_unchanged() {
        let (x, y) = noisy();
        let svm = train_svm(&x, &y, &SvmParams::default(), 0).unwrap();
        let margins: Vec<f64> = x.iter().map(|xi| svm.margin(xi)).collect();
        let probs = |m: &[f64], (a, b): (f64, f64)| {
            m.iter().map(|v| sigmoid(a * v + b)).collect::<Vec<_>>()
        };
        let p1 = probs(&margins, fit_platt(&margins, &y).unwrap());
        let t1 = best_threshold(&p1, &y).unwrap().0;
        for c in [0.01, 3.0, 250.0] {
            let scaled: Vec<f64> = margins.iter().map(|m| m * c).collect();
            let p2 = probs(&scaled, fit_platt(&scaled, &y).unwrap());
            let t2 = best_threshold(&p2, &y).unwrap().0;
            for (a, b) in p1.iter().zip(&p2) {
                assert!((a - b).abs() < 1e-8);
            }
            let d1: Vec<bool> = p1.iter().map(|p| *p >= t1).collect();
            let d2: Vec<bool> = p2.iter().map(|p| *p >= t2).collect();
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn threshold_examples() {
        let (t, acc) = best_threshold(&[0.2, 0.4, 0.6, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
        assert_eq!(acc, 1.0);
        let (t, acc) = best_threshold(&[0.2, 0.4, 0.6], &[1, 1, 1]).unwrap();
        assert_eq!((t, acc), (0.0, 1.0));
        let (t, acc) = best_threshold(&[0.2, 0.4, 0.6], &[0, 0, 0]).unwrap();
        assert_eq!((t, acc), (1.0, 1.0));
        assert!(best_threshold(&[], &[]).is_err());
    }

    #[test]
    fn membership_rule() {
        let (x, y) = separable();
        let svm = train_svm(&x, &y, &SvmParams::default(), 0).unwrap();
        assert!(matches!(
            infer_membership(&svm, &x[0]),
            Err(Error::NotReady(_))
        ));
        let p = svm.probability(&x[1]);
        let at = svm.clone().with_threshold(p).unwrap();
        assert_eq!(infer_membership(&at, &x[1]).unwrap(), (true, p));
        let half = svm.with_threshold(0.5).unwrap();
        let mut strong = x[1];
        strong[0] = 50.0;
        let (member, prob) = infer_membership(&half, &strong).unwrap();
        assert!(prob > 0.99 && member);
    }

    #[test]
    fn tune_sets_threshold() {
        let (x, y) = noisy();
        let mut svm = train_svm(&x, &y, &SvmParams::default(), 0).unwrap();
        let t = tune_threshold(&mut svm, &x, &y).unwrap();
        assert_eq!(svm.threshold, Some(t));
        let probs: Vec<f64> = x.iter().map(|xi| svm.probability(xi)).collect();
        assert!(threshold_accuracy(&probs, &y, t) >= threshold_accuracy(&probs, &y, 0.5));
    }
}
