//! ν one-class SVM with an RBF kernel. Features are z-scored, the
//! dual (minimize ½αᵀQα with 0 ≤ αᵢ ≤ 1/(νm), Σα = 1) is solved by
//! two-coordinate descent on the maximally KKT-violating pair, and a
//! negative decision score flags an anomaly.

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const STD_FLOOR: f64 = 1e-8;
pub const KKT_TOL: f64 = 1e-6;
pub const MAX_PAIR_UPDATES: u64 = 10_000_000;

/// Per-dimension z-scoring statistics, fit on the training features.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizerStats {
    /// Population mean and standard deviation per column, std floored.
    pub fn fit(features: &Mat) -> Result<StandardizerStats> {
        let (m, d) = (features.rows(), features.cols());
        if m == 0 || d == 0 {
            return Err(Error::shape("cannot standardize an empty feature matrix"));
        }
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in mean.iter_mut() {
            *a /= m as f64;
        }
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let std = var.iter().map(|&v| (v / m as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(StandardizerStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature dimension {} does not match standardizer dimension {}",
                x.len(),
                self.dim()
            )));
        }
        for (o, ((&v, &mu), &sd)) in out.iter_mut().zip(x.iter().zip(&self.mean).zip(&self.std)) {
            *o = (v - mu) / sd;
        }
        Ok(())
    }

    pub fn apply(&self, features: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(features.rows(), features.cols());
        for r in 0..features.rows() {
            let mut row = vec![0.0; features.cols()];
            self.apply_row(features.row(r), &mut row)?;
            out.row_mut(r).copy_from_slice(&row);
        }
        Ok(out)
    }
}

pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    let mut d2 = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        d2 += (a - b) * (a - b);
    }
    (-gamma * d2).exp()
}

/// Kernel width choice: derived from the data or pinned in config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaChoice {
    Auto,
    Fixed(f64),
}

/// γ = 1/(d · mean per-dimension variance); on standardized features
/// this evaluates to 1/d, and degenerate variance falls back to 1/d.
pub fn auto_gamma(standardized: &Mat) -> Result<f64> {
    let (m, d) = (standardized.rows(), standardized.cols());
    if m < 2 {
        return Err(Error::parameter("auto kernel width needs at least 2 samples"));
    }
    let mut mean = vec![0.0; d];
    for row in standardized.iter_rows() {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in mean.iter_mut() {
        *a /= m as f64;
    }
    let mut total = 0.0;
    for row in standardized.iter_rows() {
        for (&v, &mu) in row.iter().zip(&mean) {
            total += (v - mu) * (v - mu);
        }
    }
    let pooled = total / (m as f64 * d as f64);
    if pooled <= STD_FLOOR {
        return Ok(1.0 / d as f64);
    }
    Ok(1.0 / (d as f64 * pooled))
}

/// Anomaly verdict for one feature vector: negative score = anomalous,
/// exact zero counts as normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyScore {
    pub score: f64,
    pub is_anomalous: bool,
}

impl AnomalyScore {
    pub fn from_score(score: f64) -> AnomalyScore {
        AnomalyScore { score, is_anomalous: score < 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneClassModel {
    /// Standardized support vectors, one per row.
    pub support_vectors: Mat,
    /// Dual coefficients, each in (0, 1/(νm)], summing to 1.
    pub coefficients: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub standardizer: StandardizerStats,
}

impl OneClassModel {
    pub fn decision(&self, x: &[f64]) -> Result<AnomalyScore> {
        let mut z = vec![0.0; self.standardizer.dim()];
        self.standardizer.apply_row(x, &mut z)?;
        let mut s = 0.0;
        for (row, &a) in self.support_vectors.iter_rows().zip(&self.coefficients) {
            s += a * rbf_kernel(row, &z, self.gamma);
        }
        Ok(AnomalyScore::from_score(s - self.rho))
    }
}

/// Solver diagnostics for logs and ablation records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub pair_updates: u64,
    pub kkt_residual: f64,
    pub support_count: usize,
    pub free_support_count: usize,
}

pub fn fit(features: &Mat, nu: f64, gamma: GammaChoice) -> Result<OneClassModel> {
    Ok(fit_with_report(features, nu, gamma)?.0)
}

pub fn fit_with_report(
    features: &Mat,
    nu: f64,
    gamma: GammaChoice,
) -> Result<(OneClassModel, FitReport)> {
    let (m, d) = (features.rows(), features.cols());
    if m == 0 || d == 0 {
        return Err(Error::shape("cannot fit on an empty feature matrix"));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::parameter(format!("nu must be in (0, 1], got {nu}")));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::data("training features contain non-finite values"));
    }

    let standardizer = StandardizerStats::fit(features)?;
    let z = standardizer.apply(features)?;
    let gamma = match gamma {
        GammaChoice::Fixed(g) if g > 0.0 => g,
        GammaChoice::Fixed(g) => {
            return Err(Error::parameter(format!("kernel width must be positive, got {g}")))
        }
        GammaChoice::Auto if m >= 2 => auto_gamma(&z)?,
        GammaChoice::Auto => 1.0 / d as f64,
    };

    let cap = 1.0 / (nu * m as f64);

    // libsvm-style feasible start: the first ⌊νm⌋ points at the upper
    // bound, the next takes the remainder.
    let mut alpha = vec![0.0; m];
    let full = (nu * m as f64).floor() as usize;
    let mut left = 1.0;
    for a in alpha.iter_mut().take(full.min(m)) {
        *a = cap;
        left -= cap;
    }
    if full < m && left > 0.0 {
        alpha[full] = left;
    }

    // Cache the kernel matrix when it fits comfortably; otherwise
    // recompute the two active rows per update.
    let cache = if m <= 4096 {
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let v = rbf_kernel(z.row(i), z.row(j), gamma);
                k[i * m + j] = v;
                k[j * m + i] = v;
            }
        }
        Some(k)
    } else {
        None
    };
    let mut row_i = vec![0.0; m];
    let mut row_j = vec![0.0; m];
    let fill_row = |buf: &mut [f64], idx: usize| {
        for (jj, slot) in buf.iter_mut().enumerate() {
            *slot = rbf_kernel(z.row(idx), z.row(jj), gamma);
        }
    };

    // Gradient of the dual objective: g = Qα.
    let mut g = vec![0.0; m];
    for (j, &aj) in alpha.iter().enumerate() {
        if aj == 0.0 {
            continue;
        }
        match &cache {
            Some(k) => {
                for (gi, &kij) in g.iter_mut().zip(&k[j * m..(j + 1) * m]) {
                    *gi += aj * kij;
                }
            }
            None => {
                fill_row(&mut row_j, j);
                for (gi, &kij) in g.iter_mut().zip(row_j.iter()) {
                    *gi += aj * kij;
                }
            }
        }
    }

    let mut updates = 0u64;
    let residual = loop {
        // Most violating pair: the largest gradient among points that
        // can give mass and the smallest among points that can take it.
        let mut up: Option<(usize, f64)> = None;
        let mut down: Option<(usize, f64)> = None;
        for i in 0..m {
            if alpha[i] < cap && up.map_or(true, |(_, v)| g[i] < v) {
                up = Some((i, g[i]));
            }
            if alpha[i] > 0.0 && down.map_or(true, |(_, v)| g[i] > v) {
                down = Some((i, g[i]));
            }
        }
        let ((i, gi), (j, gj)) = match (up, down) {
            (Some(a), Some(b)) => (a, b),
            _ => break 0.0,
        };
        let violation = gj - gi;
        if violation <= KKT_TOL || i == j {
            break violation.max(0.0);
        }
        if updates >= MAX_PAIR_UPDATES {
            return Err(Error::convergence(violation, updates));
        }

        let (kii, kjj, kij) = match &cache {
            Some(k) => (k[i * m + i], k[j * m + j], k[i * m + j]),
            None => {
                fill_row(&mut row_i, i);
                fill_row(&mut row_j, j);
                (row_i[i], row_j[j], row_i[j])
            }
        };
        let eta = kii + kjj - 2.0 * kij;
        let step_room = (cap - alpha[i]).min(alpha[j]);
        let delta = if eta > 1e-18 { (violation / eta).min(step_room) } else { step_room };
        alpha[i] += delta;
        alpha[j] -= delta;
        if alpha[i] > cap {
            alpha[i] = cap;
        }
        if alpha[j] < 0.0 {
            alpha[j] = 0.0;
        }
        match &cache {
            Some(k) => {
                let (ri, rj) = (&k[i * m..(i + 1) * m], &k[j * m..(j + 1) * m]);
                for ((gk, &kik), &kjk) in g.iter_mut().zip(ri).zip(rj) {
                    *gk += delta * (kik - kjk);
                }
            }
            None => {
                for ((gk, &kik), &kjk) in g.iter_mut().zip(row_i.iter()).zip(row_j.iter()) {
                    *gk += delta * (kik - kjk);
                }
            }
        }
        updates += 1;
    };

    // ρ: median gradient over free support vectors; midpoint of the
    // bound-side gradients when none are free.
    let bound_slack = cap * 1e-9;
    let mut free: Vec<f64> = (0..m)
        .filter(|&i| alpha[i] > bound_slack && alpha[i] < cap - bound_slack)
        .map(|i| g[i])
        .collect();
    let rho = if free.is_empty() {
        let hi = (0..m)
            .filter(|&i| alpha[i] >= cap - bound_slack)
            .map(|i| g[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = (0..m)
            .filter(|&i| alpha[i] <= bound_slack)
            .map(|i| g[i])
            .fold(f64::INFINITY, f64::min);
        match (hi.is_finite(), lo.is_finite()) {
            (true, true) => 0.5 * (hi + lo),
            (true, false) => hi,
            (false, true) => lo,
            (false, false) => return Err(Error::data("no support vectors after optimization")),
        }
    } else {
        free.sort_by(|a, b| a.total_cmp(b));
        let n = free.len();
        if n % 2 == 1 {
            free[n / 2]
        } else {
            0.5 * (free[n / 2 - 1] + free[n / 2])
        }
    };
    let free_support_count = free.len();

    let kept: Vec<usize> = (0..m).filter(|&i| alpha[i] > 0.0).collect();
    let mut support_vectors = Mat::zeros(kept.len(), d);
    let mut coefficients = Vec::with_capacity(kept.len());
    for (r, &i) in kept.iter().enumerate() {
        support_vectors.row_mut(r).copy_from_slice(z.row(i));
        coefficients.push(alpha[i]);
    }

    let model = OneClassModel { support_vectors, coefficients, rho, gamma, nu, standardizer };
    let report = FitReport {
        pair_updates: updates,
        kkt_residual: residual,
        support_count: kept.len(),
        free_support_count,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_cloud(m: usize, d: usize, seed: u64) -> Mat {
        let mut rng = derive_rng(seed, &[0x0c5]);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut out = Mat::zeros(m, d);
        for v in out.data_mut() {
            *v = n.sample(&mut rng);
        }
        out
    }

    #[test]
    fn kernel_basics() {
        let x = [1.0, 2.0, -3.0];
        let y = [0.5, 2.5, -2.0];
        assert_eq!(rbf_kernel(&x, &x, 0.7), 1.0);
        assert_eq!(rbf_kernel(&x, &y, 0.7), rbf_kernel(&y, &x, 0.7));
        // ‖x−y‖² = 2 at γ = 0.5 → e⁻¹.
        let a = [0.0, 0.0];
        let b = [1.0, 1.0];
        assert!((rbf_kernel(&a, &b, 0.5) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_point_solves_analytically() {
        let x = Mat::from_rows(&[vec![3.0, -1.0, 4.0]]);
        let (model, report) = fit_with_report(&x, 0.1, GammaChoice::Auto).unwrap();
        assert_eq!(model.coefficients, vec![1.0]);
        assert!((model.rho - 1.0).abs() < 1e-12);
        assert_eq!(report.support_count, 1);
        let s = model.decision(&[3.0, -1.0, 4.0]).unwrap();
        assert_eq!(s.score, 0.0);
        assert!(!s.is_anomalous, "an exact zero counts as normal");
    }

    #[test]
    fn nu_property_on_normal_cloud() {
        let m = 500;
        let nu = 0.1;
        let x = normal_cloud(m, 2, 42);
        let (model, report) = fit_with_report(&x, nu, GammaChoice::Auto).unwrap();

        let sum: f64 = model.coefficients.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "coefficient sum {sum}");
        let cap = 1.0 / (nu * m as f64);
        assert!(model.coefficients.iter().all(|&a| a > 0.0 && a <= cap + 1e-15));
        assert!(report.kkt_residual <= KKT_TOL);

        let outliers = (0..m)
            .filter(|&i| model.decision(x.row(i)).unwrap().is_anomalous)
            .count() as f64
            / m as f64;
        assert!(outliers <= nu + 0.02, "outlier fraction {outliers}");
        let sv_frac = report.support_count as f64 / m as f64;
        assert!(sv_frac >= nu - 0.02, "support fraction {sv_frac}");
    }

    #[test]
    fn free_support_vectors_sit_on_the_margin() {
        let m = 300;
        let x = normal_cloud(m, 3, 7);
        let (model, report) = fit_with_report(&x, 0.15, GammaChoice::Auto).unwrap();
        assert!(report.free_support_count > 0);
        let cap = 1.0 / (0.15 * m as f64);
        let mut checked = 0;
        for (i, &a) in model.coefficients.iter().enumerate() {
            if a > cap * 1e-6 && a < cap * (1.0 - 1e-6) {
                // Support vectors are stored standardized; undo before
                // probing through the public interface.
                let raw: Vec<f64> = model
                    .support_vectors
                    .row(i)
                    .iter()
                    .zip(&model.standardizer.mean)
                    .zip(&model.standardizer.std)
                    .map(|((&zv, &mu), &sd)| zv * sd + mu)
                    .collect();
                let s = model.decision(&raw).unwrap();
                assert!(s.score.abs() <= 1e-4, "free SV {i} score {}", s.score);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn duplicated_training_set_keeps_the_decision_function() {
        let m = 120;
        let x = normal_cloud(m, 2, 11);
        let mut rows: Vec<Vec<f64>> = x.iter_rows().map(|r| r.to_vec()).collect();
        rows.extend(x.iter_rows().map(|r| r.to_vec()));
        let doubled = Mat::from_rows(&rows);

        let a = fit(&x, 0.2, GammaChoice::Fixed(0.5)).unwrap();
        let b = fit(&doubled, 0.2, GammaChoice::Fixed(0.5)).unwrap();
        let mut rng = derive_rng(3, &[9]);
        for _ in 0..50 {
            let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let sa = a.decision(&p).unwrap().score;
            let sb = b.decision(&p).unwrap().score;
            assert!((sa - sb).abs() <= 1e-4, "probe {p:?}: {sa} vs {sb}");
        }
    }

    #[test]
    fn far_points_score_negative() {
        let x = normal_cloud(200, 2, 5);
        let model = fit(&x, 0.1, GammaChoice::Auto).unwrap();
        let s = model.decision(&[1e6, -1e6]).unwrap();
        assert!(s.is_anomalous);
        assert!((s.score + model.rho).abs() < 1e-12, "kernel sum should vanish");
        assert!(model.rho > 0.0);
    }

    #[test]
    fn decision_is_lipschitz_in_the_standardized_space() {
        let x = normal_cloud(250, 4, 13);
        let model = fit(&x, 0.1, GammaChoice::Auto).unwrap();
        // ‖∇ of exp(−γ‖z−s‖²)‖ peaks at √(2γ/e); coefficients sum to 1.
        let lip = (2.0 * model.gamma / std::f64::consts::E).sqrt();
        let mut rng = derive_rng(17, &[2]);
        for _ in 0..40 {
            let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut q = p.clone();
            let eps = 1e-3;
            let axis = rng.gen_range(0..4);
            q[axis] += eps * model.standardizer.std[axis];
            let dp = model.decision(&p).unwrap().score;
            let dq = model.decision(&q).unwrap().score;
            assert!((dp - dq).abs() <= lip * eps * 1.0001, "{dp} vs {dq}");
        }
    }

    #[test]
    fn gamma_choices() {
        let x = normal_cloud(300, 32, 21);
        let model = fit(&x, 0.1, GammaChoice::Auto).unwrap();
        assert!((model.gamma - 1.0 / 32.0).abs() < 1e-12, "gamma {}", model.gamma);

        let fixed = fit(&x, 0.1, GammaChoice::Fixed(0.1)).unwrap();
        assert_eq!(fixed.gamma, 0.1);

        let flat = Mat::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0], vec![2.0, 2.0]]);
        let c = fit(&flat, 0.5, GammaChoice::Auto).unwrap();
        assert_eq!(c.gamma, 0.5, "constant features fall back to 1/d");
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = normal_cloud(10, 2, 1);
        assert!(fit(&x, 0.0, GammaChoice::Auto).is_err());
        assert!(fit(&x, 1.5, GammaChoice::Auto).is_err());
        assert!(fit(&x, 0.1, GammaChoice::Fixed(-1.0)).is_err());
        let mut bad = normal_cloud(10, 2, 2);
        bad.set(3, 1, f64::NAN);
        assert!(matches!(fit(&bad, 0.1, GammaChoice::Auto), Err(Error::Data { .. })));
        let model = fit(&x, 0.1, GammaChoice::Auto).unwrap();
        assert!(matches!(model.decision(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn fitting_is_deterministic() {
        let x = normal_cloud(200, 3, 33);
        let a = fit(&x, 0.1, GammaChoice::Auto).unwrap();
        let b = fit(&x, 0.1, GammaChoice::Auto).unwrap();
        assert_eq!(a, b);
    }
}
