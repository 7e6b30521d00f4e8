//! Full-covariance Gaussian mixture fitted by EM, used as a one-class
//! density model over photographic features.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, seeded, sha256_hex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once the relative change of the mean log-likelihood falls below this.
    pub tol: f64,
    /// Diagonal ridge as a fraction of the average data variance.
    pub ridge_factor: f64,
    /// Training-score quantile used as the decision threshold.
    pub rho: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iter: 200,
            tol: 1e-6,
            ridge_factor: 1e-6,
            rho: 0.02,
            seed: 0,
        }
    }
}

/// Per-component Cholesky data used for scoring.
#[derive(Clone, Debug)]
struct Factor {
    /// Inverse of the lower Cholesky factor.
    l_inv: Array2<f64>,
    log_det: f64,
}

#[derive(Clone, Debug)]
pub struct GmmModel {
    pub pi: Vec<f64>,
    pub mu: Array2<f64>,
    pub sigma: Vec<Array2<f64>>,
    pub ridge: f64,
    pub tau: f64,
    pub rho: f64,
    factors: Vec<Factor>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct GmmDoc {
    K: usize,
    pi: Vec<f64>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<Vec<f64>>>,
    ridge: f64,
    tau: f64,
    rho: f64,
    feature_dim: usize,
}

impl GmmModel {
    /// Validates the parameters and factorizes every covariance.
    pub fn new(pi: Vec<f64>, mu: Array2<f64>, sigma: Vec<Array2<f64>>, ridge: f64, tau: f64, rho: f64) -> Result<Self> {
        let k = pi.len();
        let d = mu.ncols();
        if k == 0 || mu.nrows() != k || sigma.len() != k {
            return Err(Error::Shape(format!(
                "{k} weights, {} means and {} covariances",
                mu.nrows(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| s.dim() != (d, d)) {
            return Err(Error::Shape(format!("covariances must be {d}x{d}")));
        }
        let total: f64 = pi.iter().sum();
        if pi.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights must be non-negative and sum to 1 (sum {total})")));
        }
        let factors = sigma
            .iter()
            .enumerate()
            .map(|(i, s)| factorize(s).ok_or(Error::Singular(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pi,
            mu,
            sigma,
            ridge,
            tau,
            rho,
            factors,
        })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.mu.ncols()
    }

    /// `log π_k + log N(x_i; μ_k, Σ_k)` for every row and component.
    pub fn weighted_log_densities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (m, d) = x.dim();
        if d != self.feature_dim() {
            return Err(Error::Shape(format!("features of width {d} for a {}-dim model", self.feature_dim())));
        }
        let mut out = Array2::zeros((m, self.k()));
        let norm = d as f64 * (2.0 * PI).ln();
        for (k, f) in self.factors.iter().enumerate() {
            let centred = &x - &self.mu.row(k);
            // rows of z are L⁻¹(x − μ)
            let z = centred.dot(&f.l_inv.t());
            let log_pi = self.pi[k].ln();
            for (i, row) in z.axis_iter(Axis(0)).enumerate() {
                let maha: f64 = row.iter().map(|v| v * v).sum();
                out[[i, k]] = log_pi - 0.5 * (norm + f.log_det + maha);
            }
        }
        Ok(out)
    }

    /// `½ λ tr(Σ_k⁻¹)` per component: the log-density penalty under which the
    /// ridged covariance update is an exact M-step.
    pub fn ridge_penalties(&self) -> Vec<f64> {
        self.factors
            .iter()
            .map(|f| 0.5 * self.ridge * f.l_inv.iter().map(|v| v * v).sum::<f64>())
            .collect()
    }

    /// Log-likelihood of each row.
    pub fn score_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let lw = self.weighted_log_densities(x)?;
        Ok(lw.axis_iter(Axis(0)).map(|r| log_sum_exp(r.as_slice().expect("row-major"))).collect())
    }

    /// `generated` iff the score is strictly below the threshold.
    pub fn is_generated(&self, score: f64) -> bool {
        score < self.tau
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GmmDoc {
            K: self.k(),
            pi: self.pi.clone(),
            mu: self.mu.outer_iter().map(|r| r.to_vec()).collect(),
            sigma: self
                .sigma
                .iter()
                .map(|s| s.outer_iter().map(|r| r.to_vec()).collect())
                .collect(),
            ridge: self.ridge,
            tau: self.tau,
            rho: self.rho,
            feature_dim: self.feature_dim(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GmmDoc = serde_json::from_str(text)?;
        let d = doc.feature_dim;
        let to_matrix = |rows: &[Vec<f64>], n: usize, what: &str| -> Result<Array2<f64>> {
            if rows.len() != n || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Shape(format!("{what} is not {n}x{d}")));
            }
            Ok(Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]))
        };
        if doc.pi.len() != doc.K {
            return Err(Error::Shape(format!("K = {} but {} weights", doc.K, doc.pi.len())));
        }
        let mu = to_matrix(&doc.mu, doc.K, "mu")?;
        let sigma = doc
            .sigma
            .iter()
            .map(|s| to_matrix(s, d, "sigma"))
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.pi, mu, sigma, doc.ridge, doc.tau, doc.rho)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

/// Cholesky `Σ = L Lᵀ`; `None` unless `Σ` is symmetric positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                v -= ri[k] * rj[k];
            }
            l[[i, j]] = v / ljj;
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        inv[[j, j]] = 1.0 / l[[j, j]];
        for i in j + 1..n {
            let mut v = 0.0;
            for k in j..i {
                v -= l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = v / l[[i, i]];
        }
    }
    inv
}

fn factorize(sigma: &Array2<f64>) -> Option<Factor> {
    let l = cholesky(sigma)?;
    let log_det = 2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>();
    Some(Factor {
        l_inv: lower_inverse(&l),
        log_det,
    })
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Responsibilities `q[i][k]` and per-row log-likelihoods.
pub fn e_step(x: ArrayView2<f64>, model: &GmmModel) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut lw = model.weighted_log_densities(x)?;
    let mut ll = Vec::with_capacity(lw.nrows());
    for mut row in lw.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.as_slice().expect("row-major"));
        ll.push(lse);
        row.mapv_inplace(|v| (v - lse).exp());
        // normalize once more so rows sum to 1 to rounding
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok((lw, ll))
}

/// E-step under the ridge-penalized component densities: responsibilities,
/// plain per-row log-likelihoods and penalized per-row log-likelihoods.
fn penalized_e_step(x: ArrayView2<f64>, model: &GmmModel) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let mut lw = model.weighted_log_densities(x)?;
    let penalties = model.ridge_penalties();
    let mut ll = Vec::with_capacity(lw.nrows());
    let mut penalized = Vec::with_capacity(lw.nrows());
    for mut row in lw.axis_iter_mut(Axis(0)) {
        ll.push(log_sum_exp(row.as_slice().expect("row-major")));
        for (v, p) in row.iter_mut().zip(&penalties) {
            *v -= p;
        }
        let lse = log_sum_exp(row.as_slice().expect("row-major"));
        penalized.push(lse);
        row.mapv_inplace(|v| (v - lse).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok((lw, ll, penalized))
}

/// Weighted sufficient statistics of one component.
pub struct ComponentUpdate {
    pub weight: f64,
    pub mean: Array1<f64>,
    /// Weighted covariance before the ridge.
    pub scatter: Array2<f64>,
}

/// Maximum-likelihood updates; `None` marks a component with no mass.
pub fn m_step(x: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<Vec<Option<ComponentUpdate>>> {
    let (m, d) = x.dim();
    if q.nrows() != m {
        return Err(Error::Shape(format!("{} responsibility rows for {m} points", q.nrows())));
    }
    let mut out = Vec::with_capacity(q.ncols());
    for qk in q.axis_iter(Axis(1)) {
        let mk: f64 = qk.sum();
        if !(mk > 1e-10) {
            out.push(None);
            continue;
        }
        let mean = qk.dot(&x) / mk;
        let centred = &x - &mean;
        let mut weighted = centred.clone();
        for (mut row, &w) in weighted.axis_iter_mut(Axis(0)).zip(qk.iter()) {
            row *= w;
        }
        let mut scatter = centred.t().dot(&weighted) / mk;
        symmetrize(&mut scatter);
        debug_assert_eq!(scatter.dim(), (d, d));
        out.push(Some(ComponentUpdate {
            weight: mk / m as f64,
            mean,
            scatter,
        }));
    }
    Ok(out)
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Empirical `rho`-quantile with linear interpolation between order statistics.
pub fn calibrate_threshold(scores: &[f64], rho: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("cannot calibrate a threshold on no scores"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("quantile level {rho} outside (0, 1)")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = rho * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    /// Mean ridge-penalized log-likelihood after each E-step; the quantity EM
    /// ascends, so it never decreases between iterations without a re-seed.
    #[serde(default)]
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, component)` pairs re-seeded after losing all mass.
    pub reseeded: Vec<(usize, usize)>,
}

/// Tolerated per-iteration drop of the mean log-likelihood.
pub const MONOTONE_TOL: f64 = 1e-8;

fn kmeanspp(x: ArrayView2<f64>, k: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let m = x.nrows();
    let mut centres = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(x.row(i), x.row(centres[0]))).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        centres.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    centres
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Fits a `k`-component mixture to the rows of `x` and sets `τ` at the
/// `rho`-quantile of the training scores.
pub fn fit_gmm(x: ArrayView2<f64>, config: &GmmConfig) -> Result<(GmmModel, FitReport)> {
    let (m, d) = x.dim();
    let k = config.k;
    if k == 0 || m < k {
        return Err(invalid(format!("{m} samples cannot support {k} components")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("features contain non-finite values"));
    }
    let mut rng = seeded(derive_seed(config.seed, &[0x6a77]));
    let global_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let variance_sum: f64 = x.axis_iter(Axis(1)).zip(global_mean.iter()).map(|(c, mu)| c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()).sum::<f64>()
        / m.saturating_sub(1).max(1) as f64;
    let ridge = config.ridge_factor * variance_sum / d as f64;
    let ridge = if ridge > 0.0 { ridge } else { config.ridge_factor.max(f64::MIN_POSITIVE) };

    // hard assignment to k-means++ seeds gives the first responsibilities
    let centres = kmeanspp(x, k, &mut rng);
    let mut q = Array2::<f64>::zeros((m, k));
    for i in 0..m {
        let best = (0..k)
            .min_by(|&a, &b| sq_dist(x.row(i), x.row(centres[a])).total_cmp(&sq_dist(x.row(i), x.row(centres[b]))))
            .expect("k > 0");
        q[[i, best]] = 1.0;
    }

    let mut report = FitReport::default();
    let mut model: Option<GmmModel> = None;
    let mut prev: Option<f64> = None;
    for iter in 0..config.max_iter {
        let updates = m_step(x, q.view())?;
        let mut pi = Vec::with_capacity(k);
        let mut mu = Array2::zeros((k, d));
        let mut sigma = Vec::with_capacity(k);
        let mut reseeded = false;
        for (c, u) in updates.into_iter().enumerate() {
            match u {
                Some(u) => {
                    pi.push(u.weight);
                    mu.row_mut(c).assign(&u.mean);
                    let mut cov = u.scatter;
                    cov.diag_mut().mapv_inplace(|v| v + ridge);
                    sigma.push(cov);
                }
                None => {
                    let r = rng.random_range(0..m);
                    report.reseeded.push((iter, c));
                    reseeded = true;
                    pi.push(1.0 / m as f64);
                    mu.row_mut(c).assign(&x.row(r));
                    sigma.push(Array2::<f64>::eye(d) * (variance_sum / d as f64 + ridge));
                }
            }
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        let next = GmmModel::new(pi, mu, sigma, ridge, 0.0, config.rho)?;
        let (q_next, ll, penalized) = penalized_e_step(x, &next)?;
        let mean_ll = ll.iter().sum::<f64>() / m as f64;
        let objective = penalized.iter().sum::<f64>() / m as f64;
        report.log_likelihood.push(mean_ll);
        report.objective.push(objective);
        report.iterations = iter + 1;
        q = q_next;
        model = Some(next);
        if let Some(p) = prev {
            if !reseeded && objective < p - MONOTONE_TOL * p.abs().max(1.0) {
                return Err(Error::Convergence(format!(
                    "EM objective decreased from {p} to {objective} at iteration {iter}"
                )));
            }
            if !reseeded && (objective - p).abs() <= config.tol * p.abs().max(1e-12) {
                report.converged = true;
                break;
            }
        }
        prev = Some(objective);
    }
    let mut model = model.expect("max_iter >= 1");
    let scores = model.score_batch(x)?;
    model.tau = calibrate_threshold(&scores, config.rho)?;
    Ok((model, report))
}

/// Copies `f32` feature rows into an `f64` matrix.
pub fn feature_matrix(rows: &[Vec<f32>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows of different widths".into()));
    }
    Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| f64::from(rows[i][j])))
}

/// Leading `k×k` block, for tests and diagnostics on large models.
pub fn leading_block(a: &Array2<f64>, k: usize) -> Array2<f64> {
    a.slice(s![..k, ..k]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(m: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((m, d), |_| StandardNormal.sample(&mut rng))
    }

    fn naive_log_density(x: &[f64], mu: &[f64], sigma: &Array2<f64>) -> f64 {
        let d = x.len();
        let s = DMatrix::from_fn(d, d, |i, j| sigma[[i, j]]);
        let diff = DVector::from_iterator(d, x.iter().zip(mu).map(|(a, b)| a - b));
        let inv = s.clone().try_inverse().unwrap();
        let maha = (diff.transpose() * inv * &diff)[(0, 0)];
        let det = s.determinant();
        (-0.5 * maha).exp() / ((2.0 * PI).powi(d as i32) * det).sqrt()
    }

    fn random_spd(d: usize, seed: u64) -> Array2<f64> {
        let a = gauss(d, d, seed);
        a.t().dot(&a) + Array2::<f64>::eye(d) * 0.5
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = random_spd(7, 1);
        let l = cholesky(&a).unwrap();
        let back = l.dot(&l.t());
        assert!((&back - &a).iter().all(|v| v.abs() < 1e-12));
        let li = lower_inverse(&l);
        let id = li.dot(&l);
        assert!((&id - &Array2::<f64>::eye(7)).iter().all(|v| v.abs() < 1e-12));
        let mut bad = a.clone();
        bad[[3, 3]] = -1.0;
        assert!(cholesky(&bad).is_none());
    }

    #[test]
    fn identity_gaussian_at_origin() {
        let d = 528;
        let model = GmmModel::new(vec![1.0], Array2::zeros((1, d)), vec![Array2::eye(d)], 0.0, 0.0, 0.02).unwrap();
        let s = model.score_batch(Array2::zeros((1, d)).view()).unwrap()[0];
        assert!((s + 264.0 * (2.0 * PI).ln()).abs() < 1e-9);
    }

    #[test]
    fn log_sum_exp_matches_naive_density() {
        let d = 3;
        let mu = gauss(2, d, 2);
        let sigma = vec![random_spd(d, 3), random_spd(d, 4)];
        let pi = vec![0.3, 0.7];
        let model = GmmModel::new(pi.clone(), mu.clone(), sigma.clone(), 0.0, 0.0, 0.02).unwrap();
        let x = gauss(5, d, 5) * 2.0;
        let scores = model.score_batch(x.view()).unwrap();
        let (q, _) = e_step(x.view(), &model).unwrap();
        for i in 0..5 {
            let xi = x.row(i).to_vec();
            let dens: Vec<f64> = (0..2).map(|k| pi[k] * naive_log_density(&xi, &mu.row(k).to_vec(), &sigma[k])).collect();
            let total: f64 = dens.iter().sum();
            assert!((scores[i] - total.ln()).abs() < 1e-8);
            for k in 0..2 {
                assert!((q[[i, k]] - dens[k] / total).abs() < 1e-10);
            }
            assert!((q.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_is_all_ones_and_sample_moments() {
        let x = gauss(50, 3, 6);
        let cfg = GmmConfig { k: 1, ..Default::default() };
        let (model, _) = fit_gmm(x.view(), &cfg).unwrap();
        let (q, _) = e_step(x.view(), &model).unwrap();
        assert!(q.iter().all(|&v| v == 1.0));
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!((&model.mu.row(0) - &mean).iter().all(|v| v.abs() < 1e-12));
        let c = &x - &mean;
        let cov = c.t().dot(&c) / 50.0 + Array2::<f64>::eye(3) * model.ridge;
        assert!((&model.sigma[0] - &cov).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_responsibilities_give_global_mean() {
        let x = gauss(40, 4, 7);
        let q = Array2::from_elem((40, 3), 1.0 / 3.0);
        let ups = m_step(x.view(), q.view()).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        for u in ups {
            let u = u.unwrap();
            assert!((&u.mean - &mean).iter().all(|v| v.abs() < 1e-12));
            assert!((u.weight - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut onehot = Array2::zeros((40, 2));
        for i in 0..40 {
            onehot[[i, i % 2]] = 1.0;
        }
        let ups = m_step(x.view(), onehot.view()).unwrap();
        let even: Array1<f64> = x.select(Axis(0), &(0..40).step_by(2).collect::<Vec<_>>()).mean_axis(Axis(0)).unwrap();
        assert!((&ups[0].as_ref().unwrap().mean - &even).iter().all(|v| v.abs() < 1e-12));
        let empty = Array2::from_shape_fn((40, 2), |(_, k)| if k == 0 { 1.0 } else { 0.0 });
        assert!(m_step(x.view(), empty.view()).unwrap()[1].is_none());
    }

    #[test]
    fn dominance_and_ordering() {
        let d = 2;
        let mut mu = Array2::zeros((2, d));
        mu[[1, 0]] = 100.0;
        let model = GmmModel::new(vec![0.5, 0.5], mu, vec![Array2::eye(d), Array2::eye(d)], 0.0, 0.0, 0.02).unwrap();
        let at = Array2::zeros((1, d));
        let (q, _) = e_step(at.view(), &model).unwrap();
        assert!(q[[0, 0]] > 1.0 - 1e-12);
        let far = Array2::from_shape_vec((1, d), vec![0.0, 10.0]).unwrap();
        assert!(model.score_batch(at.view()).unwrap()[0] > model.score_batch(far.view()).unwrap()[0]);
        let big = Array2::from_elem((1, d), 1e6);
        assert!(model.score_batch(big.view()).unwrap()[0].is_finite());
    }

    #[test]
    fn recovers_separated_clusters() {
        let d = 8;
        let mut x = gauss(2000, d, 8);
        for i in 1000..2000 {
            x[[i, 0]] += 10.0;
        }
        let cfg = GmmConfig { k: 2, seed: 3, ..Default::default() };
        let (model, report) = fit_gmm(x.view(), &cfg).unwrap();
        for w in report.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{w:?}");
        }
        let mut truth = [vec![0.0; d], vec![0.0; d]];
        truth[1][0] = 10.0;
        let order = if model.mu[[0, 0]] < model.mu[[1, 0]] { [0, 1] } else { [1, 0] };
        for (t, &k) in truth.iter().zip(&order) {
            for j in 0..d {
                assert!((model.mu[[k, j]] - t[j]).abs() < 0.1, "component {k} dim {j}: {}", model.mu[[k, j]]);
            }
        }
        // symmetric and eigenvalues at least the ridge
        for s in &model.sigma {
            let m = DMatrix::from_fn(d, d, |i, j| s[[i, j]]);
            assert_eq!(m, m.transpose());
            assert!(m.symmetric_eigenvalues().min() >= model.ridge);
        }
        let again = fit_gmm(x.view(), &cfg).unwrap().0;
        assert_eq!(again.digest().unwrap(), model.digest().unwrap());
    }

    #[test]
    fn quantile_interpolates() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((calibrate_threshold(&scores, 0.02).unwrap() - 2.98).abs() < 1e-12);
        assert_eq!(calibrate_threshold(&[4.5], 0.02).unwrap(), 4.5);
        assert!(calibrate_threshold(&[], 0.02).is_err());
        assert!(calibrate_threshold(&scores, 0.0).is_err());
    }

    #[test]
    fn decision_is_strict() {
        let mut model = GmmModel::new(vec![1.0], Array2::zeros((1, 1)), vec![Array2::eye(1)], 0.0, 0.0, 0.02).unwrap();
        model.tau = -3.0;
        assert!(!model.is_generated(-3.0));
        assert!(model.is_generated(-4.0));
    }

    #[test]
    fn json_round_trip() {
        let x = gauss(60, 3, 9);
        let (model, _) = fit_gmm(x.view(), &GmmConfig { k: 2, ..Default::default() }).unwrap();
        let back = GmmModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.pi, model.pi);
        assert_eq!(back.mu, model.mu);
        assert_eq!(back.sigma, model.sigma);
        assert_eq!(back.tau, model.tau);
        let v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
        for key in ["K", "pi", "mu", "sigma", "ridge", "tau", "rho", "feature_dim"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(fit_gmm(x.slice(s![..1, ..]), &GmmConfig { k: 2, ..Default::default() }).is_err());
    }
}
