//! New-class detection
//!
//! Intermediate-layer feature vectors of in-distribution training samples
//! are modeled per class as multivariate Gaussians. A test sample's score
//! is the smallest Mahalanobis distance (squared) to any class mean, under
//! either one pooled covariance (LDA) or per-class covariances (QDA).
//! Degenerate covariance estimates are repaired with Ledoit-Wolf shrinkage
//! toward a scaled identity. A logistic model calibrated on scores with
//! known in/out labels turns the raw score into a new-class probability.

use crate::architectures::FeatureRecord;
use crate::error::{Error, Result};
use crate::metrics::sigmoid;
use crate::tensor::Scalar;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

/// Discriminant-analysis flavor: one pooled covariance (LDA) or one per
/// class (QDA).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaMode {
    Lda,
    Qda,
}

impl fmt::Display for DaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DaMode::Lda => write!(f, "lda"),
            DaMode::Qda => write!(f, "qda"),
        }
    }
}

impl std::str::FromStr for DaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lda" => Ok(DaMode::Lda),
            "qda" => Ok(DaMode::Qda),
            other => Err(Error::Config(format!("unknown discriminant mode '{other}'"))),
        }
    }
}

/// When to replace a sample covariance by its shrunk version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShrinkagePolicy {
    /// Shrink when the Cholesky factorization fails or the sample count
    /// does not exceed the dimension.
    #[default]
    Auto,
    Always,
    Off,
}

impl std::str::FromStr for ShrinkagePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(ShrinkagePolicy::Auto),
            "always" => Ok(ShrinkagePolicy::Always),
            "off" => Ok(ShrinkagePolicy::Off),
            other => Err(Error::Config(format!("unknown shrinkage policy '{other}'"))),
        }
    }
}

/// A covariance with its lower Cholesky factor and, when shrinkage was
/// applied, the (rho1, rho2) coefficients.
#[derive(Debug, Clone)]
pub struct FittedCovariance {
    pub sigma: DMatrix<f64>,
    pub shrinkage: Option<(f64, f64)>,
    chol_l: DMatrix<f64>,
}

impl FittedCovariance {
    /// Squared Mahalanobis norm of `diff` via one triangular solve.
    fn quad_form(&self, diff: &DVector<f64>) -> Result<f64> {
        let y = self
            .chol_l
            .solve_lower_triangular(diff)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        Ok(y.norm_squared())
    }
}

#[derive(Debug, Clone)]
pub enum CovarianceModel {
    Pooled(FittedCovariance),
    PerClass(Vec<FittedCovariance>),
}

/// Per-class Gaussian model over one feature layer.
#[derive(Debug, Clone)]
pub struct GaussianClassModel {
    pub mode: DaMode,
    pub layer: String,
    pub dim: usize,
    pub means: Vec<DVector<f64>>,
    pub covariance: CovarianceModel,
    pub counts: Vec<usize>,
    pub n: usize,
}

/// Ledoit-Wolf shrinkage of a sample covariance toward a scaled identity:
/// `sigma_lw = rho1 * I + rho2 * s`, with the closed-form coefficients of
/// the well-conditioned estimator (the expected squared Frobenius loss is
/// minimized over the two scalars).
///
/// `centered` holds the demeaned observations as rows; `s` is the sample
/// covariance those observations produced. With a single observation the
/// sampling-variance estimate is meaningless and the shrinkage is maximal
/// (`rho2 = 0`).
pub fn ledoit_wolf(s: &DMatrix<f64>, centered: &DMatrix<f64>) -> (f64, f64, DMatrix<f64>) {
    let p = s.nrows();
    let n = centered.nrows();
    let m_hat = s.trace() / p as f64;

    // d^2 = ||S - m I||_F^2
    let mut d2 = 0.0;
    for i in 0..p {
        for j in 0..p {
            let v = s[(i, j)] - if i == j { m_hat } else { 0.0 };
            d2 += v * v;
        }
    }

    let b2 = if n <= 1 {
        d2
    } else {
        // b̄^2 = (1/n^2) Σ_k ||x_k x_k^T - S||_F^2, using
        // ||x x^T - S||_F^2 = (x^T x)^2 - 2 x^T S x + ||S||_F^2.
        let s_norm2: f64 = s.iter().map(|v| v * v).sum();
        let mut sum = 0.0;
        for k in 0..n {
            let x = centered.row(k).transpose();
            let xtx = x.norm_squared();
            let xsx = (s * &x).dot(&x);
            sum += xtx * xtx - 2.0 * xsx + s_norm2;
        }
        (sum / (n * n) as f64).min(d2)
    };
    let a2 = d2 - b2;

    let (rho1, rho2) = if d2 > 0.0 {
        (m_hat * b2 / d2, a2 / d2)
    } else {
        // S is already a multiple of the identity.
        (m_hat, 0.0)
    };

    let mut sigma = s * rho2;
    for i in 0..p {
        sigma[(i, i)] += rho1;
    }
    (rho1, rho2, sigma)
}

/// Factorizes a covariance, applying shrinkage per policy. The returned
/// covariance always admits a Cholesky factorization when the policy
/// allows shrinkage.
fn factorize(
    s: DMatrix<f64>,
    centered: &DMatrix<f64>,
    samples: usize,
    policy: ShrinkagePolicy,
    what: &str,
) -> Result<FittedCovariance> {
    let d = s.nrows();
    let want_direct = match policy {
        ShrinkagePolicy::Always => false,
        ShrinkagePolicy::Auto => samples > d,
        ShrinkagePolicy::Off => true,
    };
    if want_direct {
        if let Some(chol) = nalgebra::Cholesky::new(s.clone()) {
            return Ok(FittedCovariance {
                sigma: s,
                shrinkage: None,
                chol_l: chol.unpack(),
            });
        }
        if policy == ShrinkagePolicy::Off {
            return Err(Error::Numerical(format!(
                "{what} is not positive definite and shrinkage is disabled"
            )));
        }
    }
    let (mut rho1, rho2, mut sigma) = ledoit_wolf(&s, centered);
    // A zero or near-zero rho1 (all-identical samples, say) can still leave
    // the matrix singular; escalate a diagonal jitter until it factors.
    let mut jitter = (sigma.trace() / d as f64).max(1.0) * 1e-12;
    for _ in 0..60 {
        if let Some(chol) = nalgebra::Cholesky::new(sigma.clone()) {
            return Ok(FittedCovariance {
                sigma,
                shrinkage: Some((rho1, rho2)),
                chol_l: chol.unpack(),
            });
        }
        for i in 0..d {
            sigma[(i, i)] += jitter;
        }
        rho1 += jitter;
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "{what} could not be made positive definite"
    )))
}

/// Groups feature records by their (1-based) label, checking layer and
/// dimension consistency.
fn group_by_class(records: &[FeatureRecord]) -> Result<(String, usize, Vec<Vec<&FeatureRecord>>)> {
    if records.is_empty() {
        return Err(Error::Data("no feature records to fit".into()));
    }
    let layer = records[0].layer.clone();
    let dim = records[0].values.len();
    if dim == 0 {
        return Err(Error::Data("zero-dimensional features".into()));
    }
    let mut max_label = 0;
    for r in records {
        if r.layer != layer {
            return Err(Error::Data(format!(
                "mixed layers in feature set: '{}' and '{}'",
                layer, r.layer
            )));
        }
        if r.values.len() != dim {
            return Err(Error::Data(format!(
                "inconsistent feature widths: {} and {}",
                dim,
                r.values.len()
            )));
        }
        let label = r
            .label
            .ok_or_else(|| Error::Data(format!("sample '{}' has no label", r.id)))?;
        if label == 0 {
            return Err(Error::Data(format!("sample '{}' has label 0", r.id)));
        }
        max_label = max_label.max(label);
    }
    let mut groups: Vec<Vec<&FeatureRecord>> = vec![Vec::new(); max_label];
    for r in records {
        groups[r.label.unwrap() - 1].push(r);
    }
    for (j, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::Data(format!(
                "class {} has {} training feature(s); at least 2 are required",
                j + 1,
                g.len()
            )));
        }
    }
    Ok((layer, dim, groups))
}

/// Fits per-class means and the pooled (LDA) or per-class (QDA)
/// covariances from training-set features. The pooled estimate divides the
/// within-class scatter by `n - 1`; per-class estimates divide by
/// `n_j - 1`.
pub fn fit_class_gaussians(
    records: &[FeatureRecord],
    mode: DaMode,
    policy: ShrinkagePolicy,
) -> Result<GaussianClassModel> {
    let (layer, dim, groups) = group_by_class(records)?;
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let counts: Vec<usize> = groups.iter().map(|g| g.len()).collect();

    let mut means = Vec::with_capacity(groups.len());
    let mut centered_per_class: Vec<DMatrix<f64>> = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut mean = DVector::zeros(dim);
        for r in g {
            for (i, &v) in r.values.iter().enumerate() {
                mean[i] += v as f64;
            }
        }
        mean /= g.len() as f64;
        let mut centered = DMatrix::zeros(g.len(), dim);
        for (k, r) in g.iter().enumerate() {
            for (i, &v) in r.values.iter().enumerate() {
                centered[(k, i)] = v as f64 - mean[i];
            }
        }
        means.push(mean);
        centered_per_class.push(centered);
    }

    let covariance = match mode {
        DaMode::Lda => {
            let mut scatter = DMatrix::zeros(dim, dim);
            for centered in &centered_per_class {
                scatter += centered.transpose() * centered;
            }
            let s = scatter / (n as f64 - 1.0);
            let mut all = DMatrix::zeros(n, dim);
            let mut row = 0;
            for centered in &centered_per_class {
                for k in 0..centered.nrows() {
                    all.set_row(row, &centered.row(k));
                    row += 1;
                }
            }
            CovarianceModel::Pooled(factorize(s, &all, n, policy, "pooled covariance")?)
        }
        DaMode::Qda => {
            let mut covs = Vec::with_capacity(groups.len());
            for (j, centered) in centered_per_class.iter().enumerate() {
                let nj = centered.nrows();
                let s = (centered.transpose() * centered) / (nj as f64 - 1.0);
                covs.push(factorize(
                    s,
                    centered,
                    nj,
                    policy,
                    &format!("class {} covariance", j + 1),
                )?);
            }
            CovarianceModel::PerClass(covs)
        }
    };

    Ok(GaussianClassModel {
        mode,
        layer,
        dim,
        means,
        covariance,
        counts,
        n,
    })
}

impl GaussianClassModel {
    /// Builds an LDA model directly from parameters (used by tests and by
    /// model import).
    pub fn from_pooled(
        layer: &str,
        means: Vec<DVector<f64>>,
        sigma: DMatrix<f64>,
        counts: Vec<usize>,
    ) -> Result<Self> {
        let dim = sigma.nrows();
        let n = counts.iter().sum();
        let empty = DMatrix::zeros(0, dim);
        let cov = factorize(sigma, &empty, usize::MAX, ShrinkagePolicy::Off, "covariance")?;
        Ok(GaussianClassModel {
            mode: DaMode::Lda,
            layer: layer.into(),
            dim,
            means,
            covariance: CovarianceModel::Pooled(cov),
            counts,
            n,
        })
    }

    /// Builds a QDA model directly from per-class parameters.
    pub fn from_per_class(
        layer: &str,
        means: Vec<DVector<f64>>,
        sigmas: Vec<DMatrix<f64>>,
        counts: Vec<usize>,
    ) -> Result<Self> {
        let dim = sigmas.first().map(|s| s.nrows()).unwrap_or(0);
        let n = counts.iter().sum();
        let empty = DMatrix::zeros(0, dim);
        let covs = sigmas
            .into_iter()
            .map(|s| factorize(s, &empty, usize::MAX, ShrinkagePolicy::Off, "covariance"))
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianClassModel {
            mode: DaMode::Qda,
            layer: layer.into(),
            dim,
            means,
            covariance: CovarianceModel::PerClass(covs),
            counts,
            n,
        })
    }

    /// Smallest squared Mahalanobis distance from `z` to any class mean.
    pub fn score(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature has dimension {}, model expects {}",
                z.len(),
                self.dim
            )));
        }
        let mut best = f64::INFINITY;
        for (j, mean) in self.means.iter().enumerate() {
            let diff = z - mean;
            let cov = match &self.covariance {
                CovarianceModel::Pooled(c) => c,
                CovarianceModel::PerClass(v) => &v[j],
            };
            let w = cov.quad_form(&diff)?;
            if w < best {
                best = w;
            }
        }
        Ok(best)
    }

    pub fn score_record(&self, record: &FeatureRecord) -> Result<f64> {
        if record.layer != self.layer {
            return Err(Error::Data(format!(
                "record '{}' is from layer '{}', model is for '{}'",
                record.id, record.layer, self.layer
            )));
        }
        let z = DVector::from_iterator(
            record.values.len(),
            record.values.iter().map(|&v| v as f64),
        );
        self.score(&z)
    }

    /// Exports means, covariances and shrinkage coefficients as JSON.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let export = GaussianModelExport::from(self);
        let json = serde_json::to_string_pretty(&export).expect("model serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct CovarianceExport {
    sigma: Vec<Vec<f64>>,
    shrinkage: Option<(f64, f64)>,
}

/// Documented JSON bundle of a fitted Gaussian model.
#[derive(Serialize, Deserialize)]
pub struct GaussianModelExport {
    pub mode: DaMode,
    pub layer: String,
    pub dim: usize,
    pub counts: Vec<usize>,
    means: Vec<Vec<f64>>,
    pooled: Option<CovarianceExport>,
    per_class: Option<Vec<CovarianceExport>>,
}

impl From<&GaussianClassModel> for GaussianModelExport {
    fn from(m: &GaussianClassModel) -> Self {
        let mat = |c: &FittedCovariance| CovarianceExport {
            sigma: c
                .sigma
                .row_iter()
                .map(|r| r.iter().cloned().collect())
                .collect(),
            shrinkage: c.shrinkage,
        };
        let (pooled, per_class) = match &m.covariance {
            CovarianceModel::Pooled(c) => (Some(mat(c)), None),
            CovarianceModel::PerClass(v) => (None, Some(v.iter().map(mat).collect())),
        };
        GaussianModelExport {
            mode: m.mode,
            layer: m.layer.clone(),
            dim: m.dim,
            counts: m.counts.clone(),
            means: m.means.iter().map(|v| v.iter().cloned().collect()).collect(),
            pooled,
            per_class,
        }
    }
}

/// Where a scored sample came from: the in-distribution test set or the
/// held-out (out-of-distribution) set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Test,
    Ood,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Test => write!(f, "T"),
            Origin::Ood => write!(f, "O"),
        }
    }
}

/// One sample's scores: one Mahalanobis score per configured layer.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub id: String,
    pub scores: Vec<f64>,
    pub u: bool,
    pub origin: Origin,
}

/// Scores for the in-distribution test set and the held-out set, with one
/// score column per layer.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub layers: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreSet {
    /// Scores in the given layer column, with their OOD indicators.
    pub fn column(&self, layer: &str) -> Result<(Vec<f64>, Vec<bool>)> {
        let idx = self
            .layers
            .iter()
            .position(|l| l == layer)
            .ok_or_else(|| Error::Config(format!("no score column for layer '{layer}'")))?;
        Ok((
            self.rows.iter().map(|r| r.scores[idx]).collect(),
            self.rows.iter().map(|r| r.u).collect(),
        ))
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.u).collect()
    }

    /// Seeded stratified split into (calibration, evaluation) parts.
    /// Strata are the two values of `u`; `fraction` is the calibration
    /// share of each stratum.
    pub fn split_calibration(&self, fraction: f64, seed: u64) -> (ScoreSet, ScoreSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cal = Vec::new();
        let mut eval = Vec::new();
        for target in [false, true] {
            let mut idx: Vec<usize> = (0..self.rows.len())
                .filter(|&i| self.rows[i].u == target)
                .collect();
            idx.shuffle(&mut rng);
            let n_cal = ((idx.len() as f64) * fraction).round() as usize;
            let n_cal = n_cal.min(idx.len());
            for (pos, &i) in idx.iter().enumerate() {
                if pos < n_cal {
                    cal.push(i);
                } else {
                    eval.push(i);
                }
            }
        }
        cal.sort_unstable();
        eval.sort_unstable();
        let pick = |ids: &[usize]| ScoreSet {
            layers: self.layers.clone(),
            rows: ids.iter().map(|&i| self.rows[i].clone()).collect(),
        };
        (pick(&cal), pick(&eval))
    }

    /// CSV emission: one row per (sample, layer) with columns
    /// `id,layer,w,u,origin`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["id", "layer", "w", "u", "origin"])
            .map_err(|e| Error::csv(path, e))?;
        for row in &self.rows {
            for (layer, score) in self.layers.iter().zip(&row.scores) {
                w.write_record([
                    row.id.as_str(),
                    layer.as_str(),
                    &format!("{score}"),
                    if row.u { "1" } else { "0" },
                    &row.origin.to_string(),
                ])
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores the in-distribution test features and the held-out features
/// under one fitted model per layer.
pub fn score_sets(
    models: &[GaussianClassModel],
    features_t: &[FeatureRecord],
    features_o: &[FeatureRecord],
) -> Result<ScoreSet> {
    if models.is_empty() {
        return Err(Error::Config("no fitted models supplied".into()));
    }
    let layers: Vec<String> = models.iter().map(|m| m.layer.clone()).collect();

    let index = |records: &[FeatureRecord]| -> Result<(Vec<String>, HashMap<(String, String), usize>)> {
        let mut order = Vec::new();
        let mut map = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if !layers.contains(&r.layer) {
                return Err(Error::Data(format!(
                    "record '{}' is from layer '{}' which has no fitted model",
                    r.id, r.layer
                )));
            }
            if r.layer == layers[0] {
                order.push(r.id.clone());
            }
            map.insert((r.id.clone(), r.layer.clone()), i);
        }
        Ok((order, map))
    };

    let mut rows = Vec::new();
    for (records, origin) in [(features_t, Origin::Test), (features_o, Origin::Ood)] {
        let (order, map) = index(records)?;
        for id in order {
            let mut scores = Vec::with_capacity(models.len());
            for model in models {
                let idx = map.get(&(id.clone(), model.layer.clone())).ok_or_else(|| {
                    Error::Data(format!(
                        "sample '{id}' has no features for layer '{}'",
                        model.layer
                    ))
                })?;
                scores.push(model.score_record(&records[*idx])?);
            }
            rows.push(ScoreRow {
                id,
                scores,
                u: origin == Origin::Ood,
                origin,
            });
        }
    }
    Ok(ScoreSet { layers, rows })
}

/// Logistic calibration of scores: `P(new class) = sigmoid(a0 + a . w)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub threshold: f64,
}

impl LogisticModel {
    pub fn predict(&self, scores: &[f64]) -> f64 {
        let mut eta = self.intercept;
        for (c, w) in self.coefficients.iter().zip(scores) {
            eta += c * w;
        }
        sigmoid(eta)
    }

    pub fn predict_set(&self, set: &ScoreSet) -> Result<Vec<f64>> {
        if set.layers.len() != self.coefficients.len() {
            return Err(Error::Shape(format!(
                "model has {} score coefficients, set has {} layers",
                self.coefficients.len(),
                set.layers.len()
            )));
        }
        Ok(set.rows.iter().map(|r| self.predict(&r.scores)).collect())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("model serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Fits the logistic model by iteratively reweighted least squares with an
/// L2 penalty on the score coefficients (the intercept is unpenalized).
/// Converges to tolerance 1e-8 or stops after 100 iterations.
pub fn fit_logistic(set: &ScoreSet, lambda: f64) -> Result<LogisticModel> {
    let n = set.rows.len();
    let n_pos = set.rows.iter().filter(|r| r.u).count();
    if n_pos == 0 {
        return Err(Error::Data(
            "logistic fit requires OOD training samples".into(),
        ));
    }
    if n_pos == n {
        return Err(Error::Data(
            "logistic fit requires in-distribution training samples".into(),
        ));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!(
            "regularization strength must be nonnegative, got {lambda}"
        )));
    }
    let p = set.layers.len() + 1; // intercept + one coefficient per layer
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, row) in set.rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, &w) in row.scores.iter().enumerate() {
            x[(i, j + 1)] = w;
        }
        y[i] = if row.u { 1.0 } else { 0.0 };
    }

    let tol = 1e-8;
    let max_iter = 100;
    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let eta = &x * &beta;
        let xi = eta.map(sigmoid);
        // Gradient of the penalized log-likelihood.
        let mut grad = x.transpose() * (&y - &xi);
        for j in 1..p {
            grad[j] -= lambda * beta[j];
        }
        // Hessian: X^T W X + lambda on the penalized block.
        let mut h = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = (xi[i] * (1.0 - xi[i])).max(1e-10);
            for a in 0..p {
                let xa = x[(i, a)] * w;
                for b in a..p {
                    h[(a, b)] += xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        for j in 1..p {
            h[(j, j)] += lambda;
        }
        let delta = h
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Numerical("singular IRLS system".into()))?;
        beta += &delta;
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("logistic coefficients diverged".into()));
        }
        if delta.amax() < tol {
            converged = true;
            break;
        }
    }

    Ok(LogisticModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).cloned().collect(),
        lambda,
        iterations,
        converged,
        threshold: 0.5,
    })
}

/// New-class decision: flagged when the calibrated probability (or raw
/// score) reaches the threshold. The boundary itself counts as new.
pub fn detect(xi: f64, threshold: f64) -> bool {
    xi >= threshold
}

/// Converts eval-mode feature tensors into f64 vectors for fitting.
pub fn record_vector<F: Scalar>(values: &[F]) -> DVector<f64> {
    DVector::from_iterator(values.len(), values.iter().map(|v| v.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn rec(id: &str, layer: &str, values: Vec<f32>, label: Option<usize>) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            layer: layer.into(),
            values,
            label,
            ood: None,
        }
    }

    fn one_d_fixture() -> Vec<FeatureRecord> {
        vec![
            rec("a", "FC3", vec![0.0], Some(1)),
            rec("b", "FC3", vec![2.0], Some(1)),
            rec("c", "FC3", vec![10.0], Some(2)),
            rec("d", "FC3", vec![12.0], Some(2)),
        ]
    }

    #[test]
    fn pooled_covariance_uses_n_minus_one() {
        let model =
            fit_class_gaussians(&one_d_fixture(), DaMode::Lda, ShrinkagePolicy::Auto).unwrap();
        assert_eq!(model.means[0][0], 1.0);
        assert_eq!(model.means[1][0], 11.0);
        match &model.covariance {
            CovarianceModel::Pooled(c) => {
                assert!((c.sigma[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
                assert!(c.shrinkage.is_none());
            }
            _ => panic!("expected pooled"),
        }
    }

    #[test]
    fn per_class_covariance_uses_nj_minus_one() {
        let model =
            fit_class_gaussians(&one_d_fixture(), DaMode::Qda, ShrinkagePolicy::Auto).unwrap();
        match &model.covariance {
            CovarianceModel::PerClass(covs) => {
                assert!((covs[0].sigma[(0, 0)] - 2.0).abs() < 1e-12);
                assert!((covs[1].sigma[(0, 0)] - 2.0).abs() < 1e-12);
            }
            _ => panic!("expected per-class"),
        }
    }

    #[test]
    fn coincident_points_take_the_shrinkage_path() {
        let records = vec![
            rec("a", "FC3", vec![0.0, 0.0], Some(1)),
            rec("b", "FC3", vec![0.0, 0.0], Some(1)),
            rec("c", "FC3", vec![1.0, 1.0], Some(2)),
            rec("d", "FC3", vec![1.0, 1.0], Some(2)),
        ];
        for mode in [DaMode::Lda, DaMode::Qda] {
            let model = fit_class_gaussians(&records, mode, ShrinkagePolicy::Auto).unwrap();
            assert_eq!(model.means[0].as_slice(), &[0.0, 0.0]);
            assert_eq!(model.means[1].as_slice(), &[1.0, 1.0]);
            let shrunk = match &model.covariance {
                CovarianceModel::Pooled(c) => c.shrinkage.is_some(),
                CovarianceModel::PerClass(v) => v.iter().all(|c| c.shrinkage.is_some()),
            };
            assert!(shrunk, "degenerate scatter must shrink ({mode})");
            // Scoring still works: the factorization succeeded.
            let w = model
                .score(&DVector::from_vec(vec![0.5, 0.5]))
                .unwrap();
            assert!(w.is_finite() && w >= 0.0);
        }
    }

    #[test]
    fn small_classes_and_empty_features_are_rejected() {
        let records = vec![
            rec("a", "FC3", vec![0.0], Some(1)),
            rec("b", "FC3", vec![1.0], Some(2)),
            rec("c", "FC3", vec![2.0], Some(2)),
        ];
        assert!(fit_class_gaussians(&records, DaMode::Lda, ShrinkagePolicy::Auto).is_err());
        let empty = vec![rec("a", "FC3", vec![], Some(1)), rec("b", "FC3", vec![], Some(1))];
        assert!(fit_class_gaussians(&empty, DaMode::Lda, ShrinkagePolicy::Auto).is_err());
    }

    #[test]
    fn ledoit_wolf_is_consistent_for_large_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let n = 20_000;
        let scales: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
        let mut centered = DMatrix::zeros(n, d);
        for k in 0..n {
            for i in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                centered[(k, i)] = z * scales[i].sqrt();
            }
        }
        let s = centered.transpose() * &centered / (n as f64 - 1.0);
        let (rho1, rho2, sigma) = ledoit_wolf(&s, &centered);
       assert!(rho2 > 0.99, "rho2 = {rho2}");
        assert!(rho1.abs() < 0.05, "rho1 = {rho1}");
        let diff = (&sigma - &s).norm() / s.norm();
        assert!(diff < 0.01, "relative deviation {diff}");
    }

    #[test]
    fn single_sample_shrinks_fully() {
        let x = DVector::from_vec(vec![3.0, 0.0, 0.0]);
        let s = &x * x.transpose();
        let centered = DMatrix::from_rows(&[x.transpose()]);
        let (rho1, rho2, sigma) = ledoit_wolf(&s, &centered);
        assert_eq!(rho2, 0.0);
        assert!(rho1 > 0.0);
        for i in 0..3 {
            assert!((sigma[(i, i)] - rho1).abs() < 1e-12);
        }
        assert!(nalgebra::Cholesky::new(sigma).is_some());
    }

    #[test]
    fn monte_carlo_shrinkage_beats_the_sample_covariance() {
        // Known covariance, d = 10, n = 5 draws, 1000 replications: the
        // shrunk estimate must have smaller mean squared Frobenius error
        // than the raw sample covariance, and always factorize.
        let d = 10;
        let n = 5;
        let reps = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut true_sigma = DMatrix::zeros(d, d);
        for i in 0..d {
            true_sigma[(i, i)] = 1.0 + i as f64 * 0.5;
        }
        let sqrt_diag: Vec<f64> = (0..d).map(|i| true_sigma[(i, i)].sqrt()).collect();
        let mut err_lw = 0.0;
        let mut err_s = 0.0;
        for _ in 0..reps {
            let mut rows = DMatrix::zeros(n, d);
            for k in 0..n {
                for i in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    rows[(k, i)] = z * sqrt_diag[i];
                }
            }
            let mut mean = DVector::zeros(d);
            for k in 0..n {
                mean += rows.row(k).transpose();
            }
            mean /= n as f64;
            let mut centered = DMatrix::zeros(n, d);
            for k in 0..n {
                centered.set_row(k, &(rows.row(k) - mean.transpose()));
            }
            let s = centered.transpose() * &centered / (n as f64 - 1.0);
            let (_, _, sigma_lw) = ledoit_wolf(&s, &centered);
            assert!(
                nalgebra::Cholesky::new(sigma_lw.clone()).is_some(),
                "every shrunk covariance must factorize"
            );
            err_lw += (&sigma_lw - &true_sigma).norm_squared();
            err_s += (&s - &true_sigma).norm_squared();
        }
        assert!(
            err_lw < err_s,
            "LW mean error {} must beat sample covariance {}",
            err_lw / reps as f64,
            err_s / reps as f64
        );
    }

    #[test]
    fn mahalanobis_hand_cases() {
        // Distance to own mean is zero.
        let model = GaussianClassModel::from_pooled(
            "FC3",
            vec![
                DVector::from_vec(vec![0.0, 0.0]),
                DVector::from_vec(vec![10.0, 0.0]),
            ],
            DMatrix::identity(2, 2),
            vec![2, 2],
        )
        .unwrap();
        assert_eq!(model.score(&DVector::from_vec(vec![10.0, 0.0])).unwrap(), 0.0);
        // Identity covariance, z between the means but near the first.
        assert!((model.score(&DVector::from_vec(vec![1.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        // Anisotropic covariance: diag(9, 1), z = (3, 0) -> 9/9 = 1.
        let model = GaussianClassModel::from_pooled(
            "FC3",
            vec![DVector::from_vec(vec![0.0, 0.0])],
            DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0])),
            vec![4],
        )
        .unwrap();
        assert!((model.score(&DVector::from_vec(vec![3.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        // Dimension mismatch.
        assert!(model.score(&DVector::from_vec(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn lda_equals_qda_with_equal_covariances() {
        let means = vec![
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![4.0, -2.0]),
        ];
        let mut sigma = DMatrix::identity(2, 2);
        sigma[(0, 0)] = 2.5;
        sigma[(0, 1)] = 0.7;
        sigma[(1, 0)] = 0.7;
        let lda =
            GaussianClassModel::from_pooled("FC3", means.clone(), sigma.clone(), vec![3, 3])
                .unwrap();
        let qda = GaussianClassModel::from_per_class(
            "FC3",
            means,
            vec![sigma.clone(), sigma],
            vec![3, 3],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z = DVector::from_fn(2, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * 5.0
            });
            let a = lda.score(&z).unwrap();
            let b = qda.score(&z).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_are_affine_invariant_without_shrinkage() {
        // Fit on raw features and on an affinely transformed copy; the
        // Mahalanobis scores must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let mut records = Vec::new();
        for label in 1..=2usize {
            for i in 0..40 {
                let mut v = Vec::with_capacity(d);
                for _ in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v.push((z + label as f64 * 2.0) as f32);
                }
                records.push(rec(&format!("{label}-{i}"), "FC3", v, Some(label)));
            }
        }
        let a = nalgebra::DMatrix::from_row_slice(
            3,
            3,
            &[1.5, 0.2, -0.3, 0.0, 0.8, 0.4, 0.1, -0.2, 1.1],
        );
        let b = DVector::from_vec(vec![3.0, -1.0, 0.5]);
        let transformed: Vec<FeatureRecord> = records
            .iter()
            .map(|r| {
                let z = DVector::from_iterator(d, r.values.iter().map(|&v| v as f64));
                let t = &a * z + &b;
                FeatureRecord {
                    values: t.iter().map(|&v| v as f32).collect(),
                    ..r.clone()
                }
            })
            .collect();
        for mode in [DaMode::Lda, DaMode::Qda] {
            let m1 = fit_class_gaussians(&records, mode, ShrinkagePolicy::Off).unwrap();
            let m2 = fit_class_gaussians(&transformed, mode, ShrinkagePolicy::Off).unwrap();
            for (r1, r2) in records.iter().zip(&transformed) {
                let w1 = m1.score_record(r1).unwrap();
                let w2 = m2.score_record(r2).unwrap();
                // f32 feature storage limits the match; well inside 1e-8
                // relative.
                let rel = (w1 - w2).abs() / w1.abs().max(w2.abs()).max(1e-8);
                assert!(rel < 1e-4, "affine invariance violated: {w1} vs {w2}");
            }
        }
    }

    #[test]
    fn synthetic_separation_orders_all_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let mut train = Vec::new();
        for label in 1..=2usize {
            for i in 0..50 {
                let mut v = Vec::new();
                for _ in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v.push((z + if label == 1 { 0.0 } else { 3.0 }) as f32);
                }
                train.push(rec(&format!("s{label}-{i}"), "FC3", v, Some(label)));
            }
        }
        let model = fit_class_gaussians(&train, DaMode::Lda, ShrinkagePolicy::Auto).unwrap();
        let mut t = Vec::new();
        let mut o = Vec::new();
        for i in 0..30 {
            let mut v = Vec::new();
            let mut vo = Vec::new();
            for _ in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                v.push(z as f32);
                let z: f64 = StandardNormal.sample(&mut rng);
                vo.push((z + 10.0) as f32); // 10 sigma away
            }
            t.push(rec(&format!("t{i}"), "FC3", v, None));
            o.push(rec(&format!("o{i}"), "FC3", vo, None));
        }
        let set = score_sets(std::slice::from_ref(&model), &t, &o).unwrap();
        let (scores, labels) = set.column("FC3").unwrap();
        let max_id = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &u)| !u)
            .map(|(s, _)| *s)
            .fold(f64::MIN, f64::max);
        let min_ood = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &u)| u)
            .map(|(s, _)| *s)
            .fold(f64::MAX, f64::min);
        assert!(
            min_ood > max_id,
            "every OOD score ({min_ood}) must exceed every ID score ({max_id})"
        );
        assert!(scores.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn empty_ood_set_scores_only_test_rows() {
        let model = GaussianClassModel::from_pooled(
            "FC3",
            vec![DVector::from_vec(vec![0.0])],
            DMatrix::identity(1, 1),
            vec![2],
        )
        .unwrap();
        let t = vec![rec("a", "FC3", vec![0.5], None)];
        let set = score_sets(std::slice::from_ref(&model), &t, &[]).unwrap();
        assert_eq!(set.rows.len(), 1);
        assert!(!set.rows[0].u);
    }

    #[test]
    fn layer_mismatch_is_an_error() {
        let model = GaussianClassModel::from_pooled(
            "FC3",
            vec![DVector::from_vec(vec![0.0])],
            DMatrix::identity(1, 1),
            vec![2],
        )
        .unwrap();
        let t = vec![rec("a", "FC1", vec![0.5], None)];
        assert!(score_sets(std::slice::from_ref(&model), &t, &[]).is_err());
    }

    #[test]
    fn logistic_no_signal_gives_zero_coefficients() {
        let mut rows = Vec::new();
        // Perfectly balanced u with identical score distributions: every
        // score value appears equally often under u = 0 and u = 1.
        for i in 0..200 {
            let w = (i % 10) as f64;
            let u = (i / 10) % 2 == 0;
            rows.push(ScoreRow {
                id: format!("a{i}"),
                scores: vec![w],
                u,
                origin: if u { Origin::Ood } else { Origin::Test },
            });
        }
        let set = ScoreSet {
            layers: vec!["FC3".into()],
            rows,
        };
        let model = fit_logistic(&set, 1e-4).unwrap();
        assert!(model.converged);
        assert!(model.intercept.abs() < 0.05, "a0 = {}", model.intercept);
        assert!(model.coefficients[0].abs() < 0.05, "a1 = {}", model.coefficients[0]);
    }

    #[test]
    fn separated_scores_stay_finite_and_preserve_ranking() {
        let mut rows = Vec::new();
        for i in 0..40 {
            rows.push(ScoreRow {
                id: format!("t{i}"),
                scores: vec![i as f64 * 0.1],
                u: false,
                origin: Origin::Test,
            });
            rows.push(ScoreRow {
                id: format!("o{i}"),
                scores: vec![100.0 + i as f64],
                u: true,
                origin: Origin::Ood,
            });
        }
        let set = ScoreSet {
            layers: vec!["FC3".into()],
            rows,
        };
        let model = fit_logistic(&set, 1e-4).unwrap();
        assert!(model.intercept.is_finite() && model.coefficients[0].is_finite());
        assert!(model.coefficients[0] > 0.0);
        let xi = model.predict_set(&set).unwrap();
        let (w, u) = set.column("FC3").unwrap();
        let auc_w = crate::metrics::roc_auc(&w, &u).unwrap().auc;
        let auc_xi = crate::metrics::roc_auc(&xi, &u).unwrap().auc;
        assert_eq!(auc_w, 1.0);
        assert_eq!(auc_xi, 1.0);
    }

    #[test]
    fn logistic_recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a0, a1) = (-2.0, 1.0);
        let mut rows = Vec::new();
        for i in 0..10_000 {
            let w: f64 = rand::Rng::random_range(&mut rng, 0.0..6.0);
            let p = sigmoid(a0 + a1 * w);
            let u = rand::Rng::random::<f64>(&mut rng) < p;
            rows.push(ScoreRow {
                id: format!("s{i}"),
                scores: vec![w],
                u,
                origin: if u { Origin::Ood } else { Origin::Test },
            });
        }
        let set = ScoreSet {
            layers: vec!["FC3".into()],
            rows,
        };
        let model = fit_logistic(&set, 1e-4).unwrap();
        assert!(model.converged);
        assert!((model.intercept - a0).abs() < 0.1, "a0 = {}", model.intercept);
        assert!(
            (model.coefficients[0] - a1).abs() < 0.1,
            "a1 = {}",
            model.coefficients[0]
        );
    }

    #[test]
    fn logistic_requires_both_classes() {
        let rows = vec![ScoreRow {
            id: "a".into(),
            scores: vec![1.0],
            u: false,
            origin: Origin::Test,
        }];
        let set = ScoreSet {
            layers: vec!["FC3".into()],
            rows,
        };
        let err = fit_logistic(&set, 1e-4).unwrap_err();
        assert!(err.to_string().contains("OOD training samples"));
    }

    #[test]
    fn detection_threshold_is_inclusive() {
        assert!(detect(0.99, 0.5));
        assert!(detect(0.5, 0.5));
        assert!(!detect(0.49, 0.5));
    }

    #[test]
    fn calibration_split_is_stratified_and_seeded() {
        let mut rows = Vec::new();
        for i in 0..60 {
            rows.push(ScoreRow {
                id: format!("t{i}"),
                scores: vec![i as f64],
                u: i >= 40,
                origin: if i >= 40 { Origin::Ood } else { Origin::Test },
            });
        }
        let set = ScoreSet {
            layers: vec!["FC3".into()],
            rows,
        };
        let (cal, eval) = set.split_calibration(0.5, 7);
        assert_eq!(cal.rows.len(), 30);
        assert_eq!(eval.rows.len(), 30);
        assert_eq!(cal.rows.iter().filter(|r| r.u).count(), 10);
        assert_eq!(eval.rows.iter().filter(|r| r.u).count(), 10);
        let (cal2, _) = set.split_calibration(0.5, 7);
        let ids: Vec<_> = cal.rows.iter().map(|r| r.id.clone()).collect();
        let ids2: Vec<_> = cal2.rows.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, ids2);
    }
}

