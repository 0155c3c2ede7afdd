//! Treatment-effect estimators: pooled OLS, zip-code fixed effects (within
//! transform), and the spatial-lag (SAR) model by concentrated maximum
//! likelihood, plus the four-variant specification ladder.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregate::Panel;
use crate::format::sig6;
use crate::linalg::{self, LinalgError};
use crate::spatial::{LagOperator, SpatialError, SpectralWeights, WeightsMatrix};
use crate::types::{Approach, Comparison, HolcGroup, Outcome, Sample};

/// Name of the treatment regressor in every design.
pub const TREATMENT: &str = "redlined";
pub const INTERCEPT: &str = "const";

#[derive(Debug, thiserror::Error)]
pub enum EconError {
    #[error("design is rank deficient")]
    RankDeficient,
    #[error("clustered standard errors need at least two clusters, got {0}")]
    TooFewClusters(usize),
    #[error("treatment has no variation within fixed-effect groups")]
    NoWithinVariation,
    #[error("lag-parameter search did not converge: {0}")]
    NonConvergence(String),
    #[error("concentrated likelihood has {} local maxima on the ρ grid", .local_maxima)]
    LikelihoodNotConcave {
        local_maxima: usize,
        grid: Vec<(f64, f64)>,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

impl From<LinalgError> for EconError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::RankDeficient(_) => EconError::RankDeficient,
            LinalgError::DimensionMismatch(m) => EconError::DimensionMismatch(m),
        }
    }
}

/// Regressor matrix with column names.
#[derive(Debug, Clone)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
}

impl Design {
    pub fn new(matrix: DMatrix<f64>, names: Vec<String>) -> Self {
        assert_eq!(matrix.ncols(), names.len(), "one name per column");
        Design { matrix, names }
    }

    /// Builds a design from named columns of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Self {
        let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
        let matrix = DMatrix::from_fn(n, columns.len(), |i, j| columns[j].1[i]);
        let names = columns.into_iter().map(|c| c.0).collect();
        Design { matrix, names }
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Requested covariance estimator for least-squares fits.
#[derive(Debug, Clone, Copy)]
pub enum SeRequest<'a> {
    Classical,
    Hc1,
    /// CR1 clustered on the given labels (one per row).
    Cluster(&'a [String]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    Classical,
    Hc1,
    Cluster { clusters: usize },
    /// Inverse information matrix of the lag-model likelihood.
    ModelBased,
}

/// Coefficients, covariance and diagnostics of one fitted specification.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub n: usize,
    /// Residual variance: `e'e/(n-k)` for least squares, `e'e/n` for SAR.
    pub sigma2: f64,
    pub rho: Option<f64>,
    pub rho_se: Option<f64>,
    pub loglik: Option<f64>,
    pub se_kind: SeKind,
    pub spec: Option<ModelSpec>,
}

impl FitResult {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.beta[i])
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vcov[(i, i)].max(0.0).sqrt())
    }

    /// Treatment coefficient δ.
    pub fn delta(&self) -> f64 {
        self.coef(TREATMENT).unwrap_or(f64::NAN)
    }

    pub fn se_delta(&self) -> f64 {
        self.se(TREATMENT).unwrap_or(f64::NAN)
    }
}

fn check_rows(y: &DVector<f64>, x: &Design) -> Result<(), EconError> {
    if y.len() != x.nrows() {
        return Err(EconError::DimensionMismatch(format!(
            "y has {} rows, design has {}",
            y.len(),
            x.nrows()
        )));
    }
    if x.nrows() <= x.ncols() {
        return Err(EconError::InsufficientData(format!(
            "{} observations for {} parameters",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

fn covariance(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    gram_inv: &DMatrix<f64>,
    se: SeRequest<'_>,
    k_df: usize,
) -> Result<(DMatrix<f64>, SeKind), EconError> {
    let n = x.nrows();
    match se {
        SeRequest::Classical => {
            let s2 = resid.norm_squared() / (n - k_df) as f64;
            Ok((gram_inv * s2, SeKind::Classical))
        }
        SeRequest::Hc1 => Ok((linalg::hc1(x, resid, gram_inv, k_df), SeKind::Hc1)),
        SeRequest::Cluster(labels) => {
            if labels.len() != n {
                return Err(EconError::DimensionMismatch(format!(
                    "{} cluster labels for {} rows",
                    labels.len(),
                    n
                )));
            }
            let groups = linalg::cluster_index(labels);
            if groups.len() < 2 {
                return Err(EconError::TooFewClusters(groups.len()));
            }
            let g = groups.len();
            Ok((
                linalg::cr1(x, resid, &groups, gram_inv, k_df),
                SeKind::Cluster { clusters: g },
            ))
        }
    }
}

/// Ordinary least squares `β = (X'X)^{-1} X'y` with the requested covariance.
pub fn fit_ols(y: &DVector<f64>, x: &Design, se: SeRequest<'_>) -> Result<FitResult, EconError> {
    check_rows(y, x)?;
    let gram_inv = linalg::gram_inverse(&x.matrix)?;
    let beta = linalg::project(&x.matrix, &gram_inv, y);
    let residuals = y - &x.matrix * &beta;
    let k = x.ncols();
    let (vcov, se_kind) = covariance(&x.matrix, &residuals, &gram_inv, se, k)?;
    Ok(FitResult {
        names: x.names.clone(),
        sigma2: residuals.norm_squared() / (x.nrows() - k) as f64,
        beta,
        vcov,
        residuals,
        n: x.nrows(),
        rho: None,
        rho_se: None,
        loglik: None,
        se_kind,
        spec: None,
    })
}

/// Subtracts group means from `v` in place.
pub fn demean_by_group(v: &mut [f64], groups: &[Vec<usize>]) {
    for rows in groups {
        let m = rows.iter().map(|&i| v[i]).sum::<f64>() / rows.len() as f64;
        for &i in rows {
            v[i] -= m;
        }
    }
}

/// Fixed-effects regression by the within transform: `y` and every column of
/// `x` are demeaned within `fe_ids` groups. `x` must not contain an
/// intercept. Degrees-of-freedom corrections count the absorbed group means
/// as parameters, so the covariance equals that of the dummy-variable fit.
pub fn fit_fe(
    y: &DVector<f64>,
    x: &Design,
    fe_ids: &[String],
    se: SeRequest<'_>,
) -> Result<FitResult, EconError> {
    check_rows(y, x)?;
    if fe_ids.len() != y.len() {
        return Err(EconError::DimensionMismatch(format!(
            "{} fixed-effect labels for {} rows",
            fe_ids.len(),
            y.len()
        )));
    }
    let groups = linalg::cluster_index(fe_ids);
    let mut yw: Vec<f64> = y.iter().copied().collect();
    demean_by_group(&mut yw, &groups);
    let mut xw = x.matrix.clone();
    for j in 0..xw.ncols() {
        let mut col: Vec<f64> = xw.column(j).iter().copied().collect();
        let scale = col.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        demean_by_group(&mut col, &groups);
        let left = col.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if left <= 1e-12 * scale.max(1.0) {
            return Err(if x.names[j] == TREATMENT {
                EconError::NoWithinVariation
            } else {
                EconError::RankDeficient
            });
        }
        xw.set_column(j, &DVector::from_vec(col));
    }
    let n = y.len();
    let k = x.ncols();
    let k_df = k + groups.len();
    if n <= k_df {
        return Err(EconError::InsufficientData(format!(
            "{n} observations for {k} slopes and {} fixed effects",
            groups.len()
        )));
    }
    let yw = DVector::from_vec(yw);
    let gram_inv = linalg::gram_inverse(&xw)?;
    let beta = linalg::project(&xw, &gram_inv, &yw);
    let residuals = &yw - &xw * &beta;
    let (vcov, se_kind) = covariance(&xw, &residuals, &gram_inv, se, k_df)?;
    Ok(FitResult {
        names: x.names.clone(),
        sigma2: residuals.norm_squared() / (n - k_df) as f64,
        beta,
        vcov,
        residuals,
        n,
        rho: None,
        rho_se: None,
        loglik: None,
        se_kind,
        spec: None,
    })
}

/// Concentrated log-likelihood of the spatial-lag model
/// `y = ρWy + Xβ + ε`, `ε ~ N(0, σ²I)`.
///
/// With `e₀` and `e_L` the OLS residuals of `y` and `Wy` on `X`, the
/// residual at ρ is `e₀ − ρe_L`, so each evaluation costs one log-determinant.
pub struct SarLikelihood<'a> {
    op: &'a dyn LagOperator,
    y: &'a DVector<f64>,
    gram_inv: DMatrix<f64>,
    beta0: DVector<f64>,
    beta_lag: DVector<f64>,
    e0e0: f64,
    e0el: f64,
    elel: f64,
    bounds: (f64, f64),
}

impl<'a> SarLikelihood<'a> {
    pub fn new(
        y: &'a DVector<f64>,
        x: &'a DMatrix<f64>,
        op: &'a dyn LagOperator,
    ) -> Result<Self, EconError> {
        if op.len() != y.len() || x.nrows() != y.len() {
            return Err(EconError::DimensionMismatch(format!(
                "weights {} × y {} × X {}",
                op.len(),
                y.len(),
                x.nrows()
            )));
        }
        let gram_inv = linalg::gram_inverse(x)?;
        let wy = op.lag(y);
        let beta0 = linalg::project(x, &gram_inv, y);
        let beta_lag = linalg::project(x, &gram_inv, &wy);
        let e0 = y - x * &beta0;
        let el = &wy - x * &beta_lag;
        Ok(SarLikelihood {
            op,
            y,
            gram_inv,
            e0e0: e0.dot(&e0),
            e0el: e0.dot(&el),
            elel: el.dot(&el),
            beta0,
            beta_lag,
            bounds: op.rho_bounds()?,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Feasible open interval for ρ.
    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// `σ̂²(ρ) = e(ρ)'e(ρ)/n`.
    pub fn sigma2(&self, rho: f64) -> f64 {
        (self.e0e0 - 2.0 * rho * self.e0el + rho * rho * self.elel) / self.n() as f64
    }

    /// `β̂(ρ) = (X'X)^{-1} X'(I − ρW) y`.
    pub fn beta(&self, rho: f64) -> DVector<f64> {
        &self.beta0 - &self.beta_lag * rho
    }

    pub fn loglik(&self, rho: f64) -> f64 {
        let n = self.n() as f64;
        -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + 1.0) - 0.5 * n * self.sigma2(rho).ln()
            + self.op.log_det(rho)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SarSe<'a> {
    /// Full (β, ρ, σ²) information matrix.
    ModelBased,
    /// CR1 on the spatially filtered regression, conditional on ρ̂.
    Cluster(&'a [String]),
}

#[derive(Debug, Clone, Copy)]
pub struct SarOptions {
    pub grid_points: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SarOptions {
    fn default() -> Self {
        SarOptions {
            grid_points: 200,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Brent's minimizer (golden section with parabolic steps) on `[a, b]`.
pub fn brent_minimize(
    f: impl Fn(f64) -> f64,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64), EconError> {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx));
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(EconError::NonConvergence(format!(
        "brent exceeded {max_iter} iterations"
    )))
}

/// Spatial-lag model by maximum likelihood.
///
/// ρ is searched over `(1/λ_min, 1/λ_max)`: a coarse grid brackets the
/// maximum, Brent's method refines it to `opts.tol`. More than one interior
/// local maximum on the grid is reported as [`EconError::LikelihoodNotConcave`].
pub fn fit_sar(
    y: &DVector<f64>,
    x: &Design,
    op: &dyn LagOperator,
    se: SarSe<'_>,
    opts: SarOptions,
) -> Result<FitResult, EconError> {
    check_rows(y, x)?;
    let lik = SarLikelihood::new(y, &x.matrix, op)?;
    let (lo, hi) = lik.bounds();
    let eps = 1e-7 * (hi - lo);
    let (lo, hi) = (lo + eps, hi - eps);
    let m = opts.grid_points.max(3);
    let grid: Vec<(f64, f64)> = (0..=m)
        .map(|i| {
            let r = lo + (hi - lo) * i as f64 / m as f64;
            (r, lik.loglik(r))
        })
        .collect();
    let local_maxima = (1..m)
        .filter(|&i| grid[i].1 > grid[i - 1].1 && grid[i].1 > grid[i + 1].1)
        .count();
    if local_maxima > 1 {
        return Err(EconError::LikelihoodNotConcave { local_maxima, grid });
    }
    let best = (0..=m)
        .max_by(|&a, &b| grid[a].1.total_cmp(&grid[b].1))
        .expect("grid is non-empty");
    let a = grid[best.saturating_sub(1)].0;
    let b = grid[(best + 1).min(m)].0;
    let (rho, neg_ll) = brent_minimize(|r| -lik.loglik(r), a, b, opts.tol, opts.max_iter)?;
    if !neg_ll.is_finite() {
        return Err(EconError::NonConvergence("log-likelihood is not finite".into()));
    }

    let n = y.len();
    let k = x.ncols();
    let beta = lik.beta(rho);
    let sigma2 = lik.sigma2(rho);
    let residuals = y - op.lag(y) * rho - &x.matrix * &beta;

    let (vcov, rho_se, se_kind) = match se {
        SarSe::ModelBased => {
            let xb = &x.matrix * &beta;
            let wa_xb = op.wa_apply(rho, &xb);
            let tr_wa = op.trace_wa(rho);
            let mut info = DMatrix::<f64>::zeros(k + 2, k + 2);
            let xtx = x.matrix.tr_mul(&x.matrix) / sigma2;
            info.view_mut((0, 0), (k, k)).copy_from(&xtx);
            let cross = x.matrix.tr_mul(&wa_xb) / sigma2;
            for j in 0..k {
                info[(j, k)] = cross[j];
                info[(k, j)] = cross[j];
            }
            info[(k, k)] =
                op.trace_wa_sq(rho) + op.trace_wa_t_wa(rho) + wa_xb.dot(&wa_xb) / sigma2;
            info[(k, k + 1)] = tr_wa / sigma2;
            info[(k + 1, k)] = tr_wa / sigma2;
            info[(k + 1, k + 1)] = n as f64 / (2.0 * sigma2 * sigma2);
            let inv = linalg::symmetrize(linalg::inverse(&info)?);
            let vcov = inv.view((0, 0), (k, k)).into_owned();
            (vcov, Some(inv[(k, k)].max(0.0).sqrt()), SeKind::ModelBased)
        }
        SarSe::Cluster(labels) => {
            let (v, kind) = covariance(
                &x.matrix,
                &residuals,
                &lik.gram_inv,
                SeRequest::Cluster(labels),
                k + 1,
            )?;
            (v, None, kind)
        }
    };

    Ok(FitResult {
        names: x.names.clone(),
        beta,
        vcov,
        residuals,
        n,
        sigma2,
        rho: Some(rho),
        rho_se,
        loglik: Some(-neg_ll),
        se_kind,
        spec: None,
    })
}

/// The four progressively saturated variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unadjusted group difference.
    Baseline,
    Covariates,
    ZipFe,
    Sar,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Covariates, Variant::ZipFe, Variant::Sar];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Covariates => "covariates",
            Variant::ZipFe => "zip_fe",
            Variant::Sar => "sar",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Covariates => "Covariates",
            Variant::ZipFe => "ZIP-code FE",
            Variant::Sar => "Spatial Lag",
        }
    }

    pub fn uses_covariates(&self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: Outcome,
    pub approach: Approach,
    pub comparison: Comparison,
    pub variant: Variant,
    pub covariate_names: Vec<String>,
    pub cluster_var: String,
}

impl ModelSpec {
    /// Every outcome × approach × comparison × variant combination.
    pub fn full_grid(covariates: &[String], variants: &[Variant], comparisons: &[Comparison]) -> Vec<ModelSpec> {
        let mut specs = Vec::new();
        for outcome in Outcome::ALL {
            for &comparison in comparisons {
                for approach in Approach::ALL {
                    for &variant in variants {
                        specs.push(ModelSpec {
                            outcome,
                            approach,
                            comparison,
                            variant,
                            covariate_names: covariates.to_vec(),
                            cluster_var: "zip_code".into(),
                        });
                    }
                }
            }
        }
        specs
    }
}

/// Estimation sample for one specification after listwise deletion.
pub struct SpecData {
    pub ids: Vec<String>,
    pub y: DVector<f64>,
    pub design: Design,
    pub zips: Vec<String>,
}

/// Extracts `y`, the design and cluster labels for `spec` from a panel built
/// over `spec.comparison`.
pub fn spec_data(panel: &Panel, spec: &ModelSpec) -> Result<SpecData, EconError> {
    let mut ids = Vec::new();
    let mut ys = Vec::new();
    let mut zips = Vec::new();
    let mut treat = Vec::new();
    let mut covs: Vec<Vec<f64>> = vec![Vec::new(); spec.covariate_names.len()];
    for row in panel.rows.iter().filter(|r| r.approach == spec.approach) {
        let y = row.outcome_z(spec.outcome);
        let values: Option<Vec<f64>> = if spec.variant.uses_covariates() {
            spec.covariate_names
                .iter()
                .map(|c| row.covariates.get(c).copied().flatten())
                .collect()
        } else {
            Some(Vec::new())
        };
        let Some(values) = values else { continue };
        ids.push(row.cbg_id.clone());
        ys.push(y);
        zips.push(row.zip_code.clone());
        treat.push(if row.holc_group == HolcGroup::Redlined { 1.0 } else { 0.0 });
        for (slot, v) in covs.iter_mut().zip(values) {
            slot.push(v);
        }
    }
    if ids.is_empty() {
        return Err(EconError::InsufficientData("empty estimation sample".into()));
    }
    let mut columns = Vec::new();
    if spec.variant != Variant::ZipFe {
        columns.push((INTERCEPT.to_string(), vec![1.0; ids.len()]));
    }
    columns.push((TREATMENT.to_string(), treat));
    if spec.variant.uses_covariates() {
        for (name, col) in spec.covariate_names.iter().zip(covs) {
            columns.push((name.clone(), col));
        }
    }
    Ok(SpecData {
        ids,
        y: DVector::from_vec(ys),
        design: Design::from_columns(columns),
        zips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SarSeChoice {
    ModelBased,
    Clustered,
}

/// Fits one specification. Clustered fits fall back to HC1 (with a warning)
/// when there are fewer than two clusters or fewer than two treated units.
pub fn fit_spec(
    panel: &Panel,
    spec: &ModelSpec,
    weights: Option<&WeightsMatrix>,
    sar_se: SarSeChoice,
) -> Result<FitResult, EconError> {
    fit_spec_with(panel, spec, weights, None, sar_se)
}

/// As [`fit_spec`], reusing `spectral` when its ids match the estimation sample.
pub fn fit_spec_with(
    panel: &Panel,
    spec: &ModelSpec,
    weights: Option<&WeightsMatrix>,
    spectral: Option<&SpectralWeights>,
    sar_se: SarSeChoice,
) -> Result<FitResult, EconError> {
    let data = spec_data(panel, spec)?;
    let treated = data
        .design
        .position(TREATMENT)
        .map(|j| data.design.matrix.column(j).iter().filter(|&&v| v == 1.0).count())
        .unwrap_or(0);
    let n_clusters = linalg::cluster_index(&data.zips).len();
    let degenerate = n_clusters < 2 || treated < 2;
    if degenerate && spec.variant != Variant::Sar {
        log::warn!(
            "{:?}/{:?}/{:?}/{:?}: {} clusters, {} treated; using HC1 instead of clustered SEs",
            spec.outcome,
            spec.approach,
            spec.comparison,
            spec.variant,
            n_clusters,
            treated
        );
    }
    let se = if degenerate { SeRequest::Hc1 } else { SeRequest::Cluster(&data.zips) };
    let mut fit = match spec.variant {
        Variant::Baseline | Variant::Covariates => fit_ols(&data.y, &data.design, se)?,
        Variant::ZipFe => fit_fe(&data.y, &data.design, &data.zips, se)?,
        Variant::Sar => {
            let w = weights.ok_or_else(|| {
                EconError::InsufficientData("spatial weights required for the lag model".into())
            })?;
            let owned;
            let sw = match spectral {
                Some(sw) if sw.weights().ids() == data.ids.as_slice() => sw,
                _ => {
                    owned = SpectralWeights::new(w.restrict(&data.ids)?);
                    &owned
                }
            };
            let choice = match sar_se {
                SarSeChoice::Clustered if !degenerate => SarSe::Cluster(&data.zips),
                _ => SarSe::ModelBased,
            };
            fit_sar(&data.y, &data.design, sw, choice, SarOptions::default())?
        }
    };
    fit.spec = Some(spec.clone());
    Ok(fit)
}

/// One cell of the ladder table.
#[derive(Debug, Clone)]
pub struct LadderCell {
    pub spec: ModelSpec,
    pub fit: Result<FitResult, String>,
    /// For SAR cells: the alternative (clustered or model-based) SE of δ.
    pub alt_se: Option<f64>,
}

/// Fits every spec; a failing cell is recorded and does not abort the table.
/// `panels` and `weights` are keyed by comparison sample.
pub fn contrast_ladder(
    panels: &BTreeMap<Sample, Panel>,
    specs: &[ModelSpec],
    weights: &BTreeMap<Sample, WeightsMatrix>,
    sar_se: SarSeChoice,
) -> Vec<LadderCell> {
    use rayon::prelude::*;
    let spectral: BTreeMap<Sample, SpectralWeights> = if specs.iter().any(|s| s.variant == Variant::Sar) {
        panels
            .iter()
            .filter_map(|(s, p)| {
                let w = weights.get(s)?.restrict(&p.cbg_ids()).ok()?;
                Some((*s, SpectralWeights::new(w)))
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    specs
        .par_iter()
        .map(|spec| {
            let sample = Sample::from(spec.comparison);
            let Some(panel) = panels.get(&sample) else {
                return LadderCell {
                    spec: spec.clone(),
                    fit: Err(format!("no panel for sample {sample}")),
                    alt_se: None,
                };
            };
            let w = weights.get(&sample);
            let sw = spectral.get(&sample);
            let fit = fit_spec_with(panel, spec, w, sw, sar_se).map_err(|e| e.to_string());
            let alt_se = if spec.variant == Variant::Sar && fit.is_ok() {
                let other = match sar_se {
                    SarSeChoice::ModelBased => SarSeChoice::Clustered,
                    SarSeChoice::Clustered => SarSeChoice::ModelBased,
                };
                fit_spec_with(panel, spec, w, sw, other).ok().map(|f| f.se_delta())
            } else {
                None
            };
            LadderCell {
                spec: spec.clone(),
                fit,
                alt_se,
            }
        })
        .collect()
}

/// Raw mean contrast `E[Y | redlined] − E[Y | reference]` for one approach.
pub fn group_contrast(panel: &Panel, outcome: Outcome, approach: Approach, raw: bool) -> Option<f64> {
    let (mut t, mut c) = (Vec::new(), Vec::new());
    for r in panel.rows.iter().filter(|r| r.approach == approach) {
        let v = if raw {
            r.outcome_raw(outcome)
        } else {
            r.outcome_z(outcome)
        };
        match r.holc_group {
            HolcGroup::Redlined => t.push(v),
            _ => c.push(v),
        }
    }
    if t.is_empty() || c.is_empty() {
        return None;
    }
    Some(crate::stats::mean(&t) - crate::stats::mean(&c))
}

pub const LADDER_HEADER: [&str; 8] = ["outcome", "approach", "comparison", "variant", "delta", "se", "rho", "n"];

pub fn write_ladder_csv(cells: &[LadderCell], path: &std::path::Path) -> std::io::Result<()> {
    let mut out = LADDER_HEADER.join(",");
    out.push('\n');
    for c in cells {
        let s = &c.spec;
        let (delta, se, rho, n) = match &c.fit {
            Ok(f) => (sig6(f.delta()), sig6(f.se_delta()), f.rho.map(sig6).unwrap_or_default(), f.n.to_string()),
            Err(_) => (String::new(), String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.outcome,
            s.approach,
            s.comparison,
            s.variant.as_str(),
            delta,
            se,
            rho,
            n
        );
    }
    std::fs::write(path, out)
}

/// Text table with one block per outcome: rows are approaches within each
/// comparison, columns are variants; SEs in parentheses, `*` marks |z| > 1.96.
pub fn format_ladder_table(cells: &[LadderCell]) -> String {
    let mut out = String::new();
    for outcome in Outcome::ALL {
        let of_outcome: Vec<&LadderCell> = cells.iter().filter(|c| c.spec.outcome == outcome).collect();
        if of_outcome.is_empty() {
            continue;
        }
        let _ = writeln!(out, "Redlining effects on {outcome}");
        let _ = write!(out, "{:<28}", "");
        for v in Variant::ALL {
            let _ = write!(out, "{:>14}", v.label());
        }
        out.push('\n');
        for comparison in Comparison::ALL {
            let rows: Vec<&&LadderCell> = of_outcome.iter().filter(|c| c.spec.comparison == comparison).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "  ref = {comparison}");
            for approach in Approach::ALL {
                let mut est = format!("{:<28}", format!("  redlined ({approach})"));
                let mut ses = format!("{:<28}", "");
                for v in Variant::ALL {
                    let cell = rows.iter().find(|c| c.spec.approach == approach && c.spec.variant == v);
                    match cell.map(|c| &c.fit) {
                        Some(Ok(f)) => {
                            let star = if (f.delta() / f.se_delta()).abs() > 1.96 { "*" } else { "" };
                            let _ = write!(est, "{:>14}", format!("{:.3}{star}", f.delta()));
                            let _ = write!(ses, "{:>14}", format!("({:.3})", f.se_delta()));
                        }
                        Some(Err(_)) => {
                            let _ = write!(est, "{:>14}", "failed");
                            let _ = write!(ses, "{:>14}", "");
                        }
                        None => {
                            let _ = write!(est, "{:>14}", "");
                            let _ = write!(ses, "{:>14}", "");
                        }
                    }
                }
                let _ = writeln!(out, "{}", est.trim_end());
                let _ = writeln!(out, "{}", ses.trim_end());
            }
        }
        out.push('\n');
    }
    out
}
