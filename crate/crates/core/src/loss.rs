//! Classification objective: summed softmax cross-entropy plus a
//! center loss that pulls features of selected classes toward running
//! class centers. Centers are constants inside a gradient step and
//! move between steps by an exponential average of batch class means.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{self, EncoderModel, ImageTensor};

/// Probabilities are clamped here before the log so degenerate logits
/// cannot produce infinities.
pub const PROB_FLOOR: f64 = 1e-300;

/// In-place stable softmax of one logit row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_row(out.row_mut(r));
    }
    out
}

/// Cross-entropy summed over the batch (not averaged).
pub fn cross_entropy(probs: &Mat, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::parameter(format!("label {y} out of range")));
        }
        sum += -probs.get(i, y).max(PROB_FLOOR).ln();
    }
    Ok(sum)
}

pub(crate) fn half_sq_dist(x: &[f64], a: &[f64]) -> f64 {
    let mut s = 0.0;
    for (xi, ai) in x.iter().zip(a) {
        let dlt = xi - ai;
        s += dlt * dlt;
    }
    0.5 * s
}

/// Running class centers. `subset` lists the classes whose features
/// the loss attracts; the exponential update still tracks every class
/// so switching subsets mid-run would not need a re-estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterState {
    centers: Mat,
    subset: Vec<usize>,
    beta: f64,
}

impl CenterState {
    pub fn new(centers: Mat, mut subset: Vec<usize>, beta: f64) -> Result<CenterState> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::parameter("beta must be in [0, 1]"));
        }
        subset.sort_unstable();
        subset.dedup();
        if subset.is_empty() {
            return Err(Error::parameter("center subset must not be empty"));
        }
        if let Some(&bad) = subset.iter().find(|&&k| k >= centers.rows()) {
            return Err(Error::parameter(format!(
                "center subset class {bad} out of range for {} classes",
                centers.rows()
            )));
        }
        Ok(CenterState { centers, subset, beta })
    }

    pub fn centers(&self) -> &Mat {
        &self.centers
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn center(&self, class: usize) -> &[f64] {
        self.centers.row(class)
    }

    pub fn in_subset(&self, class: usize) -> bool {
        self.subset.binary_search(&class).is_ok()
    }

    pub(crate) fn check_model(&self, class_count: usize, feature_dim: usize) -> Result<()> {
        if self.centers.rows() != class_count || self.centers.cols() != feature_dim {
            return Err(Error::shape(format!(
                "centers are {}x{}, model wants {}x{}",
                self.centers.rows(),
                self.centers.cols(),
                class_count,
                feature_dim
            )));
        }
        Ok(())
    }
}

/// Mean feature vector per class present in the batch.
pub fn batch_class_means(features: &Mat, labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    if features.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; features.cols()], 0));
        for (s, v) in entry.0.iter_mut().zip(features.row(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (mut sum, count))| {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
            (k, sum)
        })
        .collect())
}

/// Center loss: for each subset class, half the summed squared
/// distances of its batch features to its center, normalized by the
/// class's batch count. Absent classes contribute nothing.
pub fn center_loss(features: &Mat, labels: &[usize], state: &CenterState) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::shape("feature rows do not match labels"));
    }
    let n = state.centers.rows();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::parameter(format!("label {y} out of range")));
        }
        counts[y] += 1;
        if state.in_subset(y) {
            sums[y] += half_sq_dist(features.row(i), state.center(y));
        }
    }
    let mut total = 0.0;
    for &k in state.subset() {
        if counts[k] > 0 {
            total += sums[k] / counts[k] as f64;
        }
    }
    Ok(total)
}

/// Gradient of [`center_loss`] at the features: (x_i - a_k) / N_k on
/// subset-class rows, zero elsewhere. Centers are constants.
pub fn center_loss_grad(features: &Mat, labels: &[usize], state: &CenterState) -> Result<Mat> {
    if features.rows() != labels.len() {
        return Err(Error::shape("feature rows do not match labels"));
    }
    let n = state.centers.rows();
    let mut counts = vec![0usize; n];
    for &y in labels {
        if y >= n {
            return Err(Error::parameter(format!("label {y} out of range")));
        }
        counts[y] += 1;
    }
    let mut out = Mat::zeros(features.rows(), features.cols());
    for (i, &y) in labels.iter().enumerate() {
        if state.in_subset(y) {
            let inv = 1.0 / counts[y] as f64;
            let a = state.center(y);
            let row = out.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = (features.get(i, j) - a[j]) * inv;
            }
        }
    }
    Ok(out)
}

/// Exponential update a_k <- (1 - beta) * a_k + beta * mean_k for every
/// class with a batch mean; other centers stay put.
pub fn update_centers(state: &mut CenterState, batch_means: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
    let beta = state.beta;
    for (&k, mean) in batch_means {
        if k >= state.centers.rows() {
            return Err(Error::parameter(format!("class {k} out of range")));
        }
        if mean.len() != state.centers.cols() {
            return Err(Error::shape("batch mean dimension mismatch"));
        }
        let row = state.centers.row_mut(k);
        for (a, m) in row.iter_mut().zip(mean) {
            *a = (1.0 - beta) * *a + beta * m;
        }
    }
    Ok(())
}

/// Builds the initial centers from class means of an initialization
/// sample pushed through the untrained encoder. Every class must be
/// represented.
pub fn init_centers(
    model: &EncoderModel,
    inputs: &[ImageTensor],
    labels: &[usize],
    subset: Vec<usize>,
    beta: f64,
) -> Result<CenterState> {
    let feats = nn::features(model, inputs)?;
    let means = batch_class_means(&feats, labels)?;
    let mut centers = Mat::zeros(model.class_count, model.feature_dim);
    for k in 0..model.class_count {
        match means.get(&k) {
            Some(mean) => centers.row_mut(k).copy_from_slice(mean),
            None => {
                return Err(Error::parameter(format!(
                    "initialization sample has no example of class {k}"
                )))
            }
        }
    }
    CenterState::new(centers, subset, beta)
}
