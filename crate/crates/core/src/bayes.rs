//! Conjugate Gaussian Bayesian linear regression with likelihood flattening.
//!
//! Every coalition of features gets its own [`GaussianBelief`] over the
//! coefficients of its basis functions. Beliefs are updated one observation
//! at a time; before each update the previous posterior is flattened towards
//! the original prior (`posterior^τ · prior^(1-τ)`), which for Gaussians is a
//! precision-weighted combination.
//!
//! The noise precision `ξ` is a fixed hyperparameter. The frequentist
//! baseline ([`mle_fit`], [`MleState`]) shares the same design matrices.

use chrono::NaiveDateTime;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default prior precision, a proper stand-in for the flat prior.
pub const DEFAULT_PRIOR_PRECISION: f64 = 1e-6;

/// A single basis function evaluated on one row of raw inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    /// Constant 1, always owned by the central agent.
    Dummy,
    /// The raw value of an input column.
    Linear { column: usize },
    /// The squared value of an input column.
    Square { column: usize },
}

impl Basis {
    #[inline]
    pub fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            Basis::Dummy => 1.0,
            Basis::Linear { column } => row[column],
            Basis::Square { column } => row[column] * row[column],
        }
    }

    fn column(&self) -> Option<usize> {
        match *self {
            Basis::Dummy => None,
            Basis::Linear { column } | Basis::Square { column } => Some(column),
        }
    }
}

/// Fixed modelling assumptions shared by every coalition in a transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub basis: Vec<Basis>,
    pub noise_precision: f64,
    pub prior_precision: f64,
    pub forgetting: f64,
}

impl Hypothesis {
    pub fn new(
        basis: Vec<Basis>,
        noise_precision: f64,
        prior_precision: f64,
        forgetting: f64,
    ) -> Result<Self> {
        let h = Self {
            basis,
            noise_precision,
            prior_precision,
            forgetting,
        };
        h.validate()?;
        Ok(h)
    }

    /// Dummy basis followed by one linear basis per input column.
    pub fn linear(n_columns: usize, noise_precision: f64) -> Result<Self> {
        let mut basis = vec![Basis::Dummy];
        basis.extend((0..n_columns).map(|column| Basis::Linear { column }));
        Self::new(basis, noise_precision, DEFAULT_PRIOR_PRECISION, 1.0)
    }

    pub fn with_prior_precision(mut self, gamma: f64) -> Result<Self> {
        self.prior_precision = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn with_forgetting(mut self, tau: f64) -> Result<Self> {
        self.forgetting = tau;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_precision.is_finite() && self.noise_precision > 0.0) {
            return Err(invalid(format!(
                "noise precision must be positive, got {}",
                self.noise_precision
            )));
        }
        if !(self.prior_precision.is_finite() && self.prior_precision > 0.0) {
            return Err(invalid(format!(
                "prior precision must be positive, got {}",
                self.prior_precision
            )));
        }
        if !(0.0..=1.0).contains(&self.forgetting) {
            return Err(invalid(format!(
                "forgetting factor must lie in [0, 1], got {}",
                self.forgetting
            )));
        }
        if self.basis.first() != Some(&Basis::Dummy) {
            return Err(invalid("the first basis function must be the dummy"));
        }
        if self.basis[1..].iter().any(|b| *b == Basis::Dummy) {
            return Err(invalid("only the first basis function may be the dummy"));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    /// Largest input column referenced by the basis, if any.
    pub fn required_columns(&self) -> usize {
        self.basis
            .iter()
            .filter_map(Basis::column)
            .map(|c| c + 1)
            .max()
            .unwrap_or(0)
    }

    /// Writes `ψ(x_C)` for one input row into `out`.
    pub fn basis_row_into(&self, row: &[f64], coalition: &[usize], out: &mut Vec<f64>) {
        out.clear();
        out.extend(coalition.iter().map(|&k| self.basis[k].eval(row)));
    }

    pub fn basis_row(&self, row: &[f64], coalition: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(coalition.len());
        self.basis_row_into(row, coalition, &mut out);
        out
    }

    pub fn check_coalition(&self, coalition: &[usize]) -> Result<()> {
        if coalition.is_empty() {
            return Err(invalid("coalition must not be empty"));
        }
        if coalition.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("coalition indices must be strictly increasing"));
        }
        if let Some(&k) = coalition.iter().find(|&&k| k >= self.basis.len()) {
            return Err(invalid(format!("basis index {k} out of range")));
        }
        Ok(())
    }

    /// Design matrix `Ψ` (rows = observations) for a coalition of basis indices.
    pub fn design_matrix(&self, data: &Dataset, coalition: &[usize]) -> Result<DMatrix<f64>> {
        self.check_coalition(coalition)?;
        if data.n_columns() < self.required_columns() {
            return Err(invalid(format!(
                "dataset has {} columns but the basis needs {}",
                data.n_columns(),
                self.required_columns()
            )));
        }
        Ok(DMatrix::from_fn(data.len(), coalition.len(), |t, j| {
            self.basis[coalition[j]].eval(data.row(t))
        }))
    }
}

/// Time-indexed inputs and targets.
///
/// Inputs are stored row-major: one row of raw feature values per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    n_columns: usize,
    pub targets: Vec<f64>,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    /// Set on rows whose lagged inputs come from a row after a gap in the raw series.
    pub gap_flags: Vec<bool>,
}

impl Dataset {
    pub fn from_rows(rows: Vec<Vec<f64>>, targets: Vec<f64>, columns: Vec<String>) -> Result<Self> {
        let n_columns = columns.len();
        if rows.len() != targets.len() {
            return Err(invalid(format!(
                "{} input rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        let mut inputs = Vec::with_capacity(rows.len() * n_columns);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != n_columns {
                return Err(invalid(format!(
                    "row {t} has {} values, expected {n_columns}",
                    row.len()
                )));
            }
            inputs.extend(row);
        }
        Self::from_flat(inputs, n_columns, targets, columns)
    }

    pub fn from_flat(
        inputs: Vec<f64>,
        n_columns: usize,
        targets: Vec<f64>,
        columns: Vec<String>,
    ) -> Result<Self> {
        if columns.len() != n_columns {
            return Err(invalid("column names do not match the column count"));
        }
        if inputs.len() != targets.len() * n_columns {
            return Err(invalid("input buffer does not match targets x columns"));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(invalid("dataset contains non-finite values"));
        }
        let n = targets.len();
        Ok(Self {
            inputs,
            n_columns,
            targets,
            columns,
            timestamps: None,
            gap_flags: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.n_columns..(t + 1) * self.n_columns]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.row(t)[j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) -> Result<()> {
        if j >= self.n_columns || values.len() != self.len() {
            return Err(invalid("column replacement has the wrong shape"));
        }
        for (t, &v) in values.iter().enumerate() {
            self.inputs[t * self.n_columns + j] = v;
        }
        Ok(())
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            inputs: self.inputs[start * self.n_columns..end * self.n_columns].to_vec(),
            n_columns: self.n_columns,
            targets: self.targets[start..end].to_vec(),
            columns: self.columns.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
            gap_flags: self.gap_flags[start..end].to_vec(),
        }
    }
}

/// Univariate Gaussian predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub precision: f64,
}

impl PredictiveDistribution {
    pub fn new(mean: f64, precision: f64) -> Result<Self> {
        if !mean.is_finite() || !(precision.is_finite() && precision > 0.0) {
            return Err(invalid(format!(
                "invalid predictive: mean {mean}, precision {precision}"
            )));
        }
        Ok(Self { mean, precision })
    }

    pub fn variance(&self) -> f64 {
        1.0 / self.precision
    }
}

/// Gaussian belief over the coefficients of one coalition.
///
/// The precision matrix is kept alongside the covariance so that conjugate
/// updates and flattening are exact additions in precision space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub coalition: Vec<usize>,
    precision: Option<DMatrix<f64>>,
}

impl GaussianBelief {
    /// Builds a belief from its moments. The covariance may be singular
    /// (e.g. a point mass) but such a belief cannot be updated.
    pub fn from_moments(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        coalition: Vec<usize>,
    ) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d || coalition.len() != d {
            return Err(invalid("mean, covariance and coalition dimensions differ"));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("belief moments must be finite"));
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-10 * scale {
            return Err(invalid("covariance is not symmetric"));
        }
        let precision = Cholesky::new(covariance.clone()).map(|c| c.inverse());
        Ok(Self {
            mean,
            covariance,
            coalition,
            precision,
        })
    }

    /// Builds a belief from a precision matrix and the precision-weighted mean `Λm`.
    fn from_natural(
        precision: DMatrix<f64>,
        shift: DVector<f64>,
        coalition: Vec<usize>,
    ) -> Result<Self> {
        let chol = Cholesky::new(precision.clone()).ok_or_else(|| {
            Error::Internal("posterior precision is not positive definite".into())
        })?;
        let mean = chol.solve(&shift);
        let covariance = symmetrize(chol.inverse());
        Ok(Self {
            mean,
            covariance,
            coalition,
            precision: Some(precision),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<&DMatrix<f64>> {
        self.precision
            .as_ref()
            .ok_or_else(|| Error::Internal("belief covariance is singular".into()))
    }

    pub fn with_coalition(mut self, coalition: Vec<usize>) -> Result<Self> {
        if coalition.len() != self.dim() {
            return Err(invalid("coalition size does not match belief dimension"));
        }
        self.coalition = coalition;
        Ok(self)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Zero-mean isotropic prior `N(0, γ⁻¹ I)` of dimension `dim`.
pub fn init_prior(dim: usize, gamma: f64) -> Result<GaussianBelief> {
    prior_for_coalition(&(0..dim).collect::<Vec<_>>(), gamma)
}

pub fn prior_for_coalition(coalition: &[usize], gamma: f64) -> Result<GaussianBelief> {
    let dim = coalition.len();
    if dim == 0 {
        return Err(invalid("prior dimension must be at least 1"));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(invalid(format!("prior precision must be positive, got {gamma}")));
    }
    Ok(GaussianBelief {
        mean: DVector::zeros(dim),
        covariance: DMatrix::identity(dim, dim) * (1.0 / gamma),
        coalition: coalition.to_vec(),
        precision: Some(DMatrix::identity(dim, dim) * gamma),
    })
}

/// Gaussian proportional to `previous^τ · original^(1-τ)`.
pub fn flatten_prior(
    previous_posterior: &GaussianBelief,
    original_prior: &GaussianBelief,
    tau: f64,
) -> Result<GaussianBelief> {
    if previous_posterior.dim() != original_prior.dim() {
        return Err(invalid("flattening beliefs of different dimension"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid(format!("forgetting factor must lie in [0, 1], got {tau}")));
    }
    if tau == 1.0 {
        return Ok(previous_posterior.clone());
    }
    if tau == 0.0 {
        return Ok(original_prior.clone());
    }
    let post = previous_posterior.precision()?;
    let prior = original_prior.precision()?;
    let precision = post * tau + prior * (1.0 - tau);
    let shift = post * &previous_posterior.mean * tau + prior * &original_prior.mean * (1.0 - tau);
    GaussianBelief::from_natural(
        symmetrize(precision),
        shift,
        previous_posterior.coalition.clone(),
    )
}

/// Conjugate update with one observation: `Λ' = Λ + ξψψᵀ`, `Λ'm' = Λm + ξψy`.
pub fn update_posterior(
    prior_t: &GaussianBelief,
    basis_values: &[f64],
    y: f64,
    xi: f64,
) -> Result<GaussianBelief> {
    if basis_values.len() != prior_t.dim() {
        return Err(invalid("basis values do not match belief dimension"));
    }
    if !y.is_finite() || basis_values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite observation"));
    }
    if !(xi.is_finite() && xi > 0.0) {
        return Err(invalid(format!("noise precision must be positive, got {xi}")));
    }
    let lambda = prior_t.precision()?;
    let psi = DVector::from_column_slice(basis_values);
    let shift = lambda * &prior_t.mean + &psi * (xi * y);
    let mut precision = lambda.clone();
    precision.ger(xi, &psi, &psi, 1.0);
    GaussianBelief::from_natural(precision, shift, prior_t.coalition.clone())
}

/// Posterior after absorbing every row of `design` at once (no forgetting).
pub fn batch_posterior(
    prior: &GaussianBelief,
    design: &DMatrix<f64>,
    y: &[f64],
    xi: f64,
) -> Result<GaussianBelief> {
    if design.ncols() != prior.dim() || design.nrows() != y.len() {
        return Err(invalid("design matrix shape does not match prior and targets"));
    }
    let lambda = prior.precision()?;
    let yv = DVector::from_column_slice(y);
    let precision = lambda + design.tr_mul(design) * xi;
    let shift = lambda * &prior.mean + design.tr_mul(&yv) * xi;
    GaussianBelief::from_natural(symmetrize(precision), shift, prior.coalition.clone())
}

/// `N(ψᵀm, 1/(1/ξ + ψᵀSψ))`.
pub fn predictive(
    belief: &GaussianBelief,
    basis_values: &[f64],
    xi: f64,
) -> Result<PredictiveDistribution> {
    if basis_values.len() != belief.dim() {
        return Err(invalid("basis values do not match belief dimension"));
    }
    predictive_from_parts(belief.mean.as_slice(), &belief.covariance, basis_values, xi)
}

/// Same as [`predictive`] but on borrowed moments; used on hot paths.
pub fn predictive_from_parts(
    mean: &[f64],
    covariance: &DMatrix<f64>,
    psi: &[f64],
    xi: f64,
) -> Result<PredictiveDistribution> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(invalid(format!("noise precision must be positive, got {xi}")));
    }
    let d = psi.len();
    let mut mu = 0.0;
    let mut quad = 0.0;
    let mut scale = 0.0;
    for i in 0..d {
        mu += psi[i] * mean[i];
        let mut row = 0.0;
        for j in 0..d {
            row += covariance[(i, j)] * psi[j];
        }
        quad += psi[i] * row;
        scale += (psi[i] * psi[i]) * covariance[(i, i)].abs();
    }
    if quad < 0.0 {
        // Rounding can push a PSD quadratic form a hair below zero.
        if quad < -1e-9 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Internal(format!(
                "covariance is not positive semi-definite (ψᵀSψ = {quad})"
            )));
        }
        quad = 0.0;
    }
    PredictiveDistribution::new(mu, 1.0 / (1.0 / xi + quad))
}

/// Plug-in predictive of a point estimate: `N(ψᵀθ*, 1/ξ)`.
pub fn mle_predictive(
    theta_star: &[f64],
    basis_values: &[f64],
    xi: f64,
) -> Result<PredictiveDistribution> {
    if theta_star.len() != basis_values.len() {
        return Err(invalid("coefficients do not match basis values"));
    }
    let mean = theta_star.iter().zip(basis_values).map(|(a, b)| a * b).sum();
    PredictiveDistribution::new(mean, xi)
}

/// Least-squares coefficients for one coalition.
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub coefficients: DVector<f64>,
    pub rank: usize,
    /// The minimum-norm pseudo-inverse solution was used.
    pub rank_deficient: bool,
}

/// Minimises the in-sample sum of squares over the coalition's basis.
pub fn mle_fit(data: &Dataset, coalition: &[usize], hypothesis: &Hypothesis) -> Result<MleFit> {
    let design = hypothesis.design_matrix(data, coalition)?;
    let y = DVector::from_column_slice(&data.targets);
    Ok(solve_normal_equations(&design.tr_mul(&design), &design.tr_mul(&y)))
}

/// Solves `G θ = b` for a Gram matrix `G`.
///
/// Coefficients whose Gram diagonal is exactly zero (columns that never
/// vary from zero) are pinned to zero. The rest is solved by Cholesky when
/// positive definite, otherwise by the minimum-norm pseudo-inverse.
pub fn solve_normal_equations(gram: &DMatrix<f64>, moment: &DVector<f64>) -> MleFit {
    let d = gram.nrows();
    let active: Vec<usize> = (0..d).filter(|&i| gram[(i, i)] != 0.0).collect();
    let mut coefficients = DVector::zeros(d);
    if active.is_empty() {
        return MleFit {
            coefficients,
            rank: 0,
            rank_deficient: d > 0,
        };
    }
    let k = active.len();
    let sub = DMatrix::from_fn(k, k, |i, j| gram[(active[i], active[j])]);
    let rhs = DVector::from_fn(k, |i, _| moment[active[i]]);
    let full_rank_solution = Cholesky::new(sub.clone())
        .map(|c| c.solve(&rhs))
        .filter(|s| s.iter().all(|v| v.is_finite()) && well_conditioned(&sub));
    let (solution, rank) = match full_rank_solution {
        Some(s) => (s, k),
        None => {
            let svd = sub.clone().svd(true, true);
            let tol = svd.singular_values.max() * (k as f64) * 1e-12;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            let s = svd
                .solve(&rhs, tol)
                .unwrap_or_else(|_| DVector::zeros(k));
            (s, rank)
        }
    };
    for (i, &a) in active.iter().enumerate() {
        coefficients[a] = solution[i];
    }
    MleFit {
        coefficients,
        rank,
        rank_deficient: rank < d,
    }
}

fn well_conditioned(gram: &DMatrix<f64>) -> bool {
    // Reciprocal condition estimate from the diagonal of the Cholesky factor.
    match Cholesky::new(gram.clone()) {
        Some(c) => {
            let diag = c.l_dirty().diagonal();
            let max = diag.max();
            let min = diag.min();
            min > 0.0 && (min / max) > 1e-7
        }
        None => false,
    }
}

/// Online least-squares sufficient statistics with exponential forgetting.
#[derive(Debug, Clone, PartialEq)]
pub struct MleState {
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    forgetting: f64,
}

impl MleState {
    pub fn new(dim: usize, forgetting: f64) -> Self {
        Self {
            gram: DMatrix::zeros(dim, dim),
            moment: DVector::zeros(dim),
            forgetting,
        }
    }

    pub fn update(&mut self, basis_values: &[f64], y: f64) {
        let psi = DVector::from_column_slice(basis_values);
        if self.forgetting != 1.0 {
            self.gram *= self.forgetting;
            self.moment *= self.forgetting;
        }
        self.gram.ger(1.0, &psi, &psi, 1.0);
        self.moment.axpy(y, &psi, 1.0);
    }

    pub fn fit(&self) -> MleFit {
        solve_normal_equations(&self.gram, &self.moment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
        let cols = (0..rows[0].len()).map(|j| format!("x{j}")).collect();
        Dataset::from_rows(rows, y, cols).unwrap()
    }

    #[test]
    fn init_prior_examples() {
        let p = init_prior(2, 1.0).unwrap();
        assert_eq!(p.mean, DVector::zeros(2));
        assert_eq!(p.covariance, DMatrix::identity(2, 2));
        let p = init_prior(1, 1e-6).unwrap();
        assert!((p.covariance[(0, 0)] - 1e6).abs() < 1e-6);
        let p = init_prior(4, 0.5).unwrap();
        assert_eq!(p.covariance, DMatrix::identity(4, 4) * 2.0);
    }

    #[test]
    fn init_prior_rejects_bad_arguments() {
        assert!(matches!(init_prior(0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(init_prior(2, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(init_prior(2, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn flatten_limits_are_exact() {
        let prior = init_prior(2, 0.3).unwrap();
        let post = update_posterior(&prior, &[1.0, 2.0], 0.7, 1.5).unwrap();
        assert_eq!(flatten_prior(&post, &prior, 1.0).unwrap(), post);
        assert_eq!(flatten_prior(&post, &prior, 0.0).unwrap(), prior);
    }

    #[test]
    fn flatten_half_matches_grid_product() {
        // Oracle: pointwise sqrt(N(1,1) * N(0,1)) renormalised on a grid.
        let post = GaussianBelief::from_moments(
            DVector::from_element(1, 1.0),
            DMatrix::identity(1, 1),
            vec![0],
        )
        .unwrap();
        let prior = init_prior(1, 1.0).unwrap();
        let flat = flatten_prior(&post, &prior, 0.5).unwrap();

        let dx = 1e-3;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in -12_000..=12_000 {
            let x = k as f64 * dx;
            let p1 = (-(x - 1.0) * (x - 1.0) / 2.0).exp();
            let p0 = (-x * x / 2.0).exp();
            let w = (p1.powf(0.5) * p0.powf(0.5)) * dx;
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((mean - 0.5).abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
        assert!((flat.mean[0] - mean).abs() < 1e-6);
        assert!((flat.covariance[(0, 0)] - var).abs() < 1e-6);
    }

    #[test]
    fn flatten_rejects_bad_arguments() {
        let a = init_prior(2, 1.0).unwrap();
        let b = init_prior(3, 1.0).unwrap();
        assert!(flatten_prior(&a, &b, 0.5).is_err());
        assert!(flatten_prior(&a, &a, 1.5).is_err());
        assert!(flatten_prior(&a, &a, -0.1).is_err());
    }

    #[test]
    fn scalar_conjugate_update() {
        // Closed form: precision 1 + 1 = 2, mean (0 + 1·2)/2 = 1.
        let prior = init_prior(1, 1.0).unwrap();
        let post = update_posterior(&prior, &[1.0], 2.0, 1.0).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.covariance[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn near_zero_information_keeps_prior_mean() {
        let prior = GaussianBelief::from_moments(
            DVector::from_vec(vec![0.3, -0.2]),
            DMatrix::identity(2, 2),
            vec![0, 1],
        )
        .unwrap();
        let post = update_posterior(&prior, &[1.0, 4.0], 100.0, 1e-12).unwrap();
        assert!((post.mean - prior.mean).amax() < 1e-6);
    }

    #[test]
    fn update_rejects_non_finite() {
        let prior = init_prior(2, 1.0).unwrap();
        assert!(update_posterior(&prior, &[1.0, f64::NAN], 1.0, 1.0).is_err());
        assert!(update_posterior(&prior, &[1.0, 1.0], f64::INFINITY, 1.0).is_err());
        assert!(update_posterior(&prior, &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn predictive_examples() {
        let degenerate = GaussianBelief::from_moments(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::zeros(2, 2),
            vec![0, 1],
        )
        .unwrap();
        let p = predictive(&degenerate, &[1.0, 3.0], 2.5).unwrap();
        assert_eq!(p.mean, 7.0);
        assert_eq!(p.precision, 2.5);

        let unit = GaussianBelief::from_moments(DVector::zeros(2), DMatrix::identity(2, 2), vec![0, 1])
            .unwrap();
        let p = predictive(&unit, &[1.0, 1.0], 1.0).unwrap();
        assert!((p.variance() - 3.0).abs() < 1e-15);
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn predictive_rejects_indefinite_covariance() {
        let bad = GaussianBelief::from_moments(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            vec![0, 1],
        )
        .unwrap();
        assert!(matches!(
            predictive(&bad, &[0.0, 1.0], 1.0),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn mle_predictive_examples() {
        let p = mle_predictive(&[1.0, 2.0], &[1.0, 3.0], 0.8).unwrap();
        let degenerate = GaussianBelief::from_moments(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::zeros(2, 2),
            vec![0, 1],
        )
        .unwrap();
        assert_eq!(p, predictive(&degenerate, &[1.0, 3.0], 0.8).unwrap());

        let z = mle_predictive(&[0.0; 3], &[0.4, -1.0, 2.0], 1.7).unwrap();
        assert_eq!(z.mean, 0.0);
        assert_eq!(z.precision, 1.7);
        assert!(mle_predictive(&[0.0; 2], &[1.0], 1.0).is_err());
    }

    #[test]
    fn mle_interpolates_two_points() {
        let data = ds(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0]);
        let h = Hypothesis::linear(1, 1.0).unwrap();
        let fit = mle_fit(&data, &[0, 1], &h).unwrap();
        assert!((fit.coefficients[0]).abs() < 1e-12);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-12);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn mle_underdetermined_uses_minimum_norm() {
        // One observation, two coefficients: min-norm solution of θ0 + 2θ1 = 5.
        let data = ds(vec![vec![2.0]], vec![5.0]);
        let h = Hypothesis::linear(1, 1.0).unwrap();
        let fit = mle_fit(&data, &[0, 1], &h).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 1);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-9);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_column_is_pinned_to_zero() {
        let data = ds(
            vec![vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 4.0]],
            vec![1.0, 2.0, 3.5],
        );
        let h = Hypothesis::linear(2, 1.0).unwrap();
        let with = mle_fit(&data, &[0, 1, 2], &h).unwrap();
        let without = mle_fit(&data, &[0, 2], &h).unwrap();
        assert_eq!(with.coefficients[1], 0.0);
        assert_eq!(with.coefficients[0], without.coefficients[0]);
        assert_eq!(with.coefficients[2], without.coefficients[1]);
    }

    #[test]
    fn hypothesis_validation() {
        assert!(Hypothesis::new(vec![Basis::Linear { column: 0 }], 1.0, 1.0, 1.0).is_err());
        assert!(Hypothesis::new(vec![Basis::Dummy], 0.0, 1.0, 1.0).is_err());
        assert!(Hypothesis::new(vec![Basis::Dummy], 1.0, 1.0, 1.1).is_err());
        assert!(Hypothesis::new(vec![Basis::Dummy, Basis::Dummy], 1.0, 1.0, 1.0).is_err());
        let h = Hypothesis::new(
            vec![Basis::Dummy, Basis::Square { column: 1 }],
            1.0,
            1.0,
            0.5,
        )
        .unwrap();
        assert_eq!(h.basis_row(&[5.0, -3.0], &[0, 1]), vec![1.0, 9.0]);
        assert_eq!(h.required_columns(), 2);
    }

    #[test]
    fn online_mle_matches_batch_without_forgetting() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|t| vec![(t as f64 * 0.7).sin(), (t as f64 * 1.3).cos()])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| 0.2 + r[0] - 2.0 * r[1] + 0.01 * r[0] * r[1]).collect();
        let data = ds(rows, y);
        let h = Hypothesis::linear(2, 1.0).unwrap();
        let mut state = MleState::new(3, 1.0);
        let mut psi = Vec::new();
        for t in 0..data.len() {
            h.basis_row_into(data.row(t), &[0, 1, 2], &mut psi);
            state.update(&psi, data.targets[t]);
        }
        let online = state.fit();
        let batch = mle_fit(&data, &[0, 1, 2], &h).unwrap();
        assert!((online.coefficients - batch.coefficients).amax() < 1e-12);
    }
}
