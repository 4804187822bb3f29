//! Evaluation statistics. Every metric follows the anomaly-positive
//! orientation: a smaller score is more anomalous, and a positive
//! prediction means score < threshold.

use crate::error::{Error, Result};

/// Scores paired with ground-truth labels (true = anomalous).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<LabeledScores> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::parameter("no scored samples"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::data("scores contain NaN"));
        }
        Ok(LabeledScores { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(Error::parameter(
                "metric needs at least one anomalous and one normal sample",
            ));
        }
        Ok((p, n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

pub fn confusion_at(data: &LabeledScores, threshold: f64) -> Confusion {
    let mut c = Confusion { true_pos: 0, false_pos: 0, true_neg: 0, false_neg: 0 };
    for (&s, &anomalous) in data.scores.iter().zip(&data.labels) {
        let predicted = s < threshold;
        match (predicted, anomalous) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    c
}

/// Mean of sensitivity and specificity; insensitive to class imbalance.
pub fn balanced_accuracy(data: &LabeledScores, threshold: f64) -> Result<f64> {
    data.require_both_classes()?;
    let c = confusion_at(data, threshold);
    let sens = c.true_pos as f64 / (c.true_pos + c.false_neg) as f64;
    let spec = c.true_neg as f64 / (c.true_neg + c.false_pos) as f64;
    Ok(0.5 * (sens + spec))
}

/// F1 on the anomalous-positive class. Degenerate cases (no predicted
/// or no actual positives) score 0 and raise the flag instead of
/// erroring, so sweeps over extreme thresholds stay total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Score {
    pub value: f64,
    pub degenerate: bool,
}

pub fn f1_score(data: &LabeledScores, threshold: f64) -> F1Score {
    let c = confusion_at(data, threshold);
    let degenerate = c.true_pos + c.false_pos == 0 || c.true_pos + c.false_neg == 0;
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    let value = if denom == 0 { 0.0 } else { 2.0 * c.true_pos as f64 / denom as f64 };
    F1Score { value, degenerate }
}

/// ROC curve: (0,0) plus one point per distinct score, sweeping the
/// threshold upward. The final distinct score always yields (1,1).
pub fn roc_points(data: &LabeledScores) -> Result<Vec<(f64, f64)>> {
    let (p, n) = data.require_both_classes()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    let mut points = vec![(0.0, 0.0)];
    let (mut cum_p, mut cum_n) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = data.scores[order[i]];
        while i < order.len() && data.scores[order[i]] == s {
            if data.labels[order[i]] {
                cum_p += 1;
            } else {
                cum_n += 1;
            }
            i += 1;
        }
        points.push((cum_n as f64 / n as f64, cum_p as f64 / p as f64));
    }
    Ok(points)
}

/// Trapezoidal AUROC in exact integer arithmetic: twice the area in
/// units of 1/(2·P·N), which equals concordant pairs counted once and
/// ties counted half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (p, n) = data.require_both_classes()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    let mut area2: u128 = 0;
    let (mut cum_p, mut cum_n) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = data.scores[order[i]];
        let (prev_p, prev_n) = (cum_p, cum_n);
        while i < order.len() && data.scores[order[i]] == s {
            if data.labels[order[i]] {
                cum_p += 1;
            } else {
                cum_n += 1;
            }
            i += 1;
        }
        area2 += (cum_n - prev_n) * (cum_p + prev_p);
    }
    Ok(area2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Mean and standard error over per-seed metric values.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

pub fn seed_summary(values: &[f64]) -> Result<SeedSummary> {
    if values.len() < 2 {
        return Err(Error::parameter("standard error needs at least 2 seed values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(SeedSummary { values: values.to_vec(), mean, std_error: (var / n).sqrt() })
}

/// Midranks of the combined sample, ties averaged.
fn midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = a.len() + b.len();
    let mut order: Vec<usize> = (0..n).collect();
    let value = |i: usize| if i < a.len() { a[i] } else { b[i - a.len()] };
    order.sort_by(|&x, &y| value(x).total_cmp(&value(y)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && value(order[j]) == value(order[i]) {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = mid;
        }
        i = j;
    }
    let rb = ranks.split_off(a.len());
    (ranks, rb)
}

const EXACT_LIMIT: usize = 20;

/// Two-sided Mann-Whitney test. U is the statistic of the first sample
/// (pairs where a exceeds b, ties half). Exact permutation p-value when
/// the combined size is at most 20, tie-corrected normal approximation
/// with 0.5 continuity correction otherwise.
pub fn mann_whitney_two_sided(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::parameter("both samples must be non-empty"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::data("samples contain NaN"));
    }
    let (ra, rb) = midranks(a, b);
    let na = a.len() as f64;
    let u = ra.iter().sum::<f64>() - na * (na + 1.0) / 2.0;

    let p = if a.len() + b.len() <= EXACT_LIMIT {
        exact_p(&ra, &rb, u)
    } else {
        approx_p(&ra, &rb, u)
    };
    Ok((u, p))
}

/// Exhaustive two-sided permutation p-value: the fraction of size-|a|
/// subsets of the combined midranks whose U deviates from the null
/// center at least as much as the observed one.
fn exact_p(ra: &[f64], rb: &[f64], u_obs: f64) -> f64 {
    let mut ranks: Vec<f64> = ra.iter().chain(rb).copied().collect();
    ranks.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (ra.len(), rb.len());
    let center = na as f64 * nb as f64 / 2.0;
    let dev = (u_obs - center).abs() - 1e-9;
    let offset = na as f64 * (na as f64 + 1.0) / 2.0;

    let mut hits = 0u64;
    let mut total = 0u64;
    // Depth-first over size-na subsets, tracking the rank sum.
    fn walk(
        ranks: &[f64],
        start: usize,
        left: usize,
        sum: f64,
        ctx: &mut (f64, f64, f64, u64, u64),
    ) {
        if left == 0 {
            ctx.4 += 1;
            if (sum - ctx.0 - ctx.1).abs() >= ctx.2 {
                ctx.3 += 1;
            }
            return;
        }
        if ranks.len() - start < left {
            return;
        }
        for i in start..=ranks.len() - left {
            walk(ranks, i + 1, left - 1, sum + ranks[i], ctx);
        }
    }
    let mut ctx = (offset, center, dev, hits, total);
    walk(&ranks, 0, na, 0.0, &mut ctx);
    (hits, total) = (ctx.3, ctx.4);
    hits as f64 / total as f64
}

fn approx_p(ra: &[f64], rb: &[f64], u_obs: f64) -> f64 {
    let (na, nb) = (ra.len() as f64, rb.len() as f64);
    let n = na + nb;
    let center = na * nb / 2.0;

    // Tie correction from run lengths in the combined rank vector.
    let mut ranks: Vec<f64> = ra.iter().chain(rb).copied().collect();
    ranks.sort_by(|x, y| x.total_cmp(y));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranks.len() {
        let mut j = i;
        while j < ranks.len() && ranks[j] == ranks[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u_obs - center).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function, Numerical Recipes rational Chebyshev
/// fit; fractional error below 1.2e-7 everywhere.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}
