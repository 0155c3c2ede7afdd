//! Quantile regression by linear programming, the Koenker–Machado
//! pseudo-R², and the OLS R² comparison across measurement approaches.
//!
//! The LP solved is the bounded dual of the check-loss problem,
//!
//! ```text
//!   max  y'a   s.t.  X'a = (1-τ) X'1,   0 ≤ a ≤ 1,
//! ```
//!
//! by a two-phase bounded-variable revised simplex. At an optimal vertex the
//! `k` basic observations are fitted exactly and β solves `X_B β = y_B`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::Panel;
use crate::econ::{Design, INTERCEPT};
use crate::format::exact;
use crate::linalg;
use crate::stats::derive_seed;
use crate::stackinf::{draw_rng, Interval, PairsResampler, Resampler};
use crate::types::{Approach, Outcome};

pub const DEFAULT_TAUS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];
pub const DEFAULT_BOOTSTRAP: usize = 500;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("τ must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("linear program is unbounded or the design is degenerate")]
    Unbounded,
    #[error("simplex did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub pseudo_r2: f64,
    pub check_loss: f64,
    pub null_loss: f64,
    pub n: usize,
}

impl QuantileFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }
}

/// ρ_τ(u) = u(τ − 𝕀[u < 0]).
pub fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn check_loss(y: &[f64], fitted: &[f64], tau: f64) -> f64 {
    y.iter().zip(fitted).map(|(a, b)| rho(a - b, tau)).sum()
}

/// Check loss of the best constant fit. Some order statistic is always a
/// minimiser; the candidates around position ⌈nτ⌉ are compared directly.
pub fn null_loss(y: &[f64], tau: f64) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    let pos = ((n as f64 * tau).ceil() as usize).clamp(1, n) - 1;
    let lo = pos.saturating_sub(1);
    let hi = (pos + 1).min(n - 1);
    (lo..=hi)
        .map(|i| y.iter().map(|v| rho(v - s[i], tau)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// 1 − V̂/Ṽ, snapped to the end points when the ratio is within rounding of
/// them and clamped to [0, 1].
pub fn pseudo_r2(fitted_loss: f64, null: f64) -> f64 {
    if null <= 0.0 {
        return 0.0;
    }
    if fitted_loss <= 1e-12 * null {
        return 1.0;
    }
    if null - fitted_loss <= 1e-12 * null {
        return 0.0;
    }
    (1.0 - fitted_loss / null).clamp(0.0, 1.0)
}

pub fn fit_quantile(y: &DVector<f64>, x: &Design, tau: f64) -> Result<QuantileFit, QuantError> {
    let beta = solve_lp(y, &x.matrix, tau)?;
    let fitted = &x.matrix * DVector::from_vec(beta.clone());
    let v_hat = check_loss(y.as_slice(), fitted.as_slice(), tau);
    let v_null = null_loss(y.as_slice(), tau);
    Ok(QuantileFit {
        tau,
        names: x.names.clone(),
        coefficients: beta,
        pseudo_r2: pseudo_r2(v_hat, v_null),
        check_loss: v_hat,
        null_loss: v_null,
        n: y.len(),
    })
}

const STEP_TOL: f64 = 1e-12;
const PIVOT_TOL: f64 = 1e-9;
const REFRESH_EVERY: usize = 50;
const DEGENERATE_STREAK: usize = 20;

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    One,
    Two,
}

/// Bounded-variable simplex state. Variables `0..n` are the dual
/// multipliers `a_j ∈ [0, 1]`; `n..n+k` are artificials with column `s_i e_i`.
struct Simplex<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    n: usize,
    k: usize,
    b: DVector<f64>,
    sign: Vec<f64>,
    value: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: DMatrix<f64>,
    iterations: usize,
    max_iter: usize,
    cost_tol: f64,
}

impl<'a> Simplex<'a> {
    fn column(&self, v: usize) -> DVector<f64> {
        if v < self.n {
            self.x.row(v).transpose()
        } else {
            let mut c = DVector::zeros(self.k);
            c[v - self.n] = self.sign[v - self.n];
            c
        }
    }

    fn cost(&self, v: usize, phase: Phase) -> f64 {
        match phase {
            Phase::One => {
                if v >= self.n {
                    -1.0
                } else {
                    0.0
                }
            }
            Phase::Two => {
                if v < self.n {
                    self.y[v]
                } else {
                    0.0
                }
            }
        }
    }

    fn upper(&self, v: usize, phase: Phase) -> f64 {
        if v < self.n {
            1.0
        } else if phase == Phase::One {
            f64::INFINITY
        } else {
            0.0
        }
    }

    fn refactor(&mut self) -> Result<(), QuantError> {
        let k = self.k;
        let mut bm = DMatrix::zeros(k, k);
        for (p, &v) in self.basis.iter().enumerate() {
            bm.set_column(p, &self.column(v));
        }
        self.binv = bm.try_inverse().ok_or(QuantError::Unbounded)?;
        Ok(())
    }

    /// Recomputes basic values from the nonbasic ones to shed drift.
    fn refresh_values(&mut self) {
        let mut rhs = self.b.clone();
        for j in 0..self.n {
            if !self.in_basis[j] && self.value[j] != 0.0 {
                rhs -= self.x.row(j).transpose() * self.value[j];
            }
        }
        let xb = &self.binv * rhs;
        for (p, &v) in self.basis.iter().enumerate() {
            self.value[v] = xb[p];
        }
    }

    fn run(&mut self, phase: Phase) -> Result<(), QuantError> {
        let mut streak = 0usize;
        let mut since_refresh = 0usize;
        loop {
            if self.iterations >= self.max_iter {
                return Err(QuantError::NonConvergence(self.iterations));
            }
            self.iterations += 1;

            let cb = DVector::from_iterator(self.k, self.basis.iter().map(|&v| self.cost(v, phase)));
            let pi = self.binv.tr_mul(&cb);
            let bland = streak >= DEGENERATE_STREAK;

            let mut enter: Option<(usize, f64, f64)> = None;
            for j in 0..self.n {
                if self.in_basis[j] {
                    continue;
                }
                let d = self.cost(j, phase) - self.x.row(j).transpose().dot(&pi);
                let dir = if self.value[j] < 0.5 && d > self.cost_tol {
                    1.0
                } else if self.value[j] >= 0.5 && d < -self.cost_tol {
                    -1.0
                } else {
                    continue;
                };
                match enter {
                    None => enter = Some((j, dir, d.abs())),
                    Some((_, _, best)) if !bland && d.abs() > best => enter = Some((j, dir, d.abs())),
                    _ => {}
                }
                if bland {
                    break;
                }
            }
            let Some((j, dir, _)) = enter else {
                return Ok(());
            };

            let w = &self.binv * self.x.row(j).transpose();
            let mut step = 1.0;
            let mut leave: Option<(usize, f64)> = None;
            for p in 0..self.k {
                let v = self.basis[p];
                let delta = -dir * w[p];
                let (lim, bound) = if delta < -PIVOT_TOL {
                    (self.value[v].max(0.0) / -delta, 0.0)
                } else if delta > PIVOT_TOL {
                    let ub = self.upper(v, phase);
                    if ub.is_infinite() {
                        continue;
                    }
                    ((ub - self.value[v]).max(0.0) / delta, ub)
                } else {
                    continue;
                };
                let better = match leave {
                    None => lim < step - STEP_TOL,
                    Some((q, _)) => {
                        lim < step - STEP_TOL || (lim <= step + STEP_TOL && v < self.basis[q])
                    }
                };
                if better {
                    step = lim.min(step);
                    leave = Some((p, bound));
                }
            }

            for p in 0..self.k {
                let v = self.basis[p];
                self.value[v] -= dir * step * w[p];
            }
            match leave {
                None => {
                    self.value[j] = if dir > 0.0 { 1.0 } else { 0.0 };
                }
                Some((p, bound)) => {
                    let out = self.basis[p];
                    self.value[out] = bound;
                    self.in_basis[out] = false;
                    self.value[j] += dir * step;
                    self.basis[p] = j;
                    self.in_basis[j] = true;
                    self.refactor()?;
                }
            }

            if step <= STEP_TOL {
                streak += 1;
            } else {
                streak = 0;
            }
            since_refresh += 1;
            if since_refresh >= REFRESH_EVERY {
                self.refresh_values();
                since_refresh = 0;
            }
        }
    }

    /// Pivots artificials still basic at zero out of the basis. Fails when
    /// no structural column can replace one, i.e. the design lacks rank.
    fn drive_out_artificials(&mut self) -> Result<(), QuantError> {
        for p in 0..self.k {
            let v = self.basis[p];
            if v < self.n {
                continue;
            }
            let row = self.binv.row(p).clone_owned();
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.n {
                if self.in_basis[j] {
                    continue;
                }
                let piv = (row.clone() * self.x.row(j).transpose())[0].abs();
                if piv > PIVOT_TOL && best.is_none_or(|(_, b)| piv > b) {
                    best = Some((j, piv));
                }
            }
            let Some((j, _)) = best else {
                return Err(QuantError::Unbounded);
            };
            self.value[v] = 0.0;
            self.in_basis[v] = false;
            self.basis[p] = j;
            self.in_basis[j] = true;
            self.refactor()?;
        }
        self.refresh_values();
        Ok(())
    }
}

fn solve_lp(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64) -> Result<Vec<f64>, QuantError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QuantError::InvalidTau(tau));
    }
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(QuantError::DimensionMismatch(format!("y has {} rows, X has {n}", y.len())));
    }
    if k == 0 || n < k {
        return Err(QuantError::InsufficientData(format!("n = {n}, k = {k}")));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(QuantError::InsufficientData("non-finite input".into()));
    }
    let gram_inv = linalg::gram_inverse(x).map_err(|_| QuantError::Unbounded)?;

    // Warm start: split observations at the τ-quantile of the OLS residuals.
    let ols = &gram_inv * x.tr_mul(y);
    let resid = y - x * &ols;
    let mut sorted: Vec<f64> = resid.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let q = sorted[((n as f64 * tau).ceil() as usize).clamp(1, n) - 1];

    let ones = DVector::from_element(n, 1.0);
    let b = x.tr_mul(&ones) * (1.0 - tau);
    let mut value = vec![0.0; n + k];
    for j in 0..n {
        if resid[j] > q {
            value[j] = 1.0;
        }
    }
    let mut res = b.clone();
    for j in 0..n {
        if value[j] != 0.0 {
            res -= x.row(j).transpose();
        }
    }
    let sign: Vec<f64> = res.iter().map(|r| if *r >= 0.0 { 1.0 } else { -1.0 }).collect();
    for i in 0..k {
        value[n + i] = res[i].abs();
    }
    let mut in_basis = vec![false; n + k];
    for flag in in_basis.iter_mut().skip(n) {
        *flag = true;
    }
    let scale = 1.0 + y.amax() + x.amax();
    let mut sx = Simplex {
        x,
        y,
        n,
        k,
        b,
        binv: DMatrix::from_diagonal(&DVector::from_vec(sign.clone())),
        sign,
        value,
        basis: (n..n + k).collect(),
        in_basis,
        iterations: 0,
        max_iter: 50 * (n + k) + 1000,
        cost_tol: 1e-10 * scale,
    };

    sx.run(Phase::One)?;
    sx.refresh_values();
    let infeas: f64 = (n..n + k).filter(|&v| sx.in_basis[v]).map(|v| sx.value[v].abs()).sum();
    if infeas > 1e-7 * (1.0 + sx.b.amax()) {
        return Err(QuantError::Unbounded);
    }
    sx.drive_out_artificials()?;
    sx.run(Phase::Two)?;

    let xb = DMatrix::from_fn(k, k, |p, c| x[(sx.basis[p], c)]);
    let yb = DVector::from_iterator(k, sx.basis.iter().map(|&v| y[v]));
    let beta = xb.lu().solve(&yb).ok_or(QuantError::Unbounded)?;
    Ok(beta.iter().copied().collect())
}

/// Column sets compared by explained variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Spec {
    MllmOnly,
    SegmentationOnly,
    Both,
    DemographicsOnly,
    MllmDemographics,
}

impl R2Spec {
    pub const ALL: [R2Spec; 5] = [
        R2Spec::MllmOnly,
        R2Spec::SegmentationOnly,
        R2Spec::Both,
        R2Spec::DemographicsOnly,
        R2Spec::MllmDemographics,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            R2Spec::MllmOnly => "mllm_only",
            R2Spec::SegmentationOnly => "segmentation_only",
            R2Spec::Both => "both",
            R2Spec::DemographicsOnly => "demographics_only",
            R2Spec::MllmDemographics => "mllm_demographics",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            R2Spec::MllmOnly => "MLLM only",
            R2Spec::SegmentationOnly => "Segmentation only",
            R2Spec::Both => "MLLM + segmentation",
            R2Spec::DemographicsOnly => "Demographics only",
            R2Spec::MllmDemographics => "MLLM + demographics",
        }
    }

    fn uses(&self) -> (bool, bool, bool) {
        match self {
            R2Spec::MllmOnly => (true, false, false),
            R2Spec::SegmentationOnly => (false, true, false),
            R2Spec::Both => (true, true, false),
            R2Spec::DemographicsOnly => (false, false, true),
            R2Spec::MllmDemographics => (true, false, true),
        }
    }
}

/// Per-CBG values for one outcome: the authoritative measurement, each
/// method's prediction of it, and the covariates.
#[derive(Debug, Clone)]
pub struct OutcomeData {
    pub outcome: Outcome,
    pub cbg_ids: Vec<String>,
    pub y: Vec<f64>,
    pub mllm: Vec<f64>,
    pub segmentation: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
}

impl OutcomeData {
    /// Collects CBGs present for all three approaches with complete
    /// covariates. Standardized values are used; R² is affine invariant.
    pub fn from_panel(panel: &Panel, outcome: Outcome, covariate_names: &[String]) -> OutcomeData {
        let mut by_cbg: BTreeMap<&str, BTreeMap<Approach, f64>> = BTreeMap::new();
        let mut covs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &panel.rows {
            by_cbg.entry(&r.cbg_id).or_default().insert(r.approach, r.outcome_z(outcome));
            if r.approach == Approach::Authoritative {
                let c: Option<Vec<f64>> = covariate_names
                    .iter()
                    .map(|name| r.covariates.get(name).copied().flatten())
                    .collect();
                if let Some(c) = c {
                    covs.insert(&r.cbg_id, c);
                }
            }
        }
        let mut d = OutcomeData {
            outcome,
            cbg_ids: Vec::new(),
            y: Vec::new(),
            mllm: Vec::new(),
            segmentation: Vec::new(),
            covariates: Vec::new(),
            covariate_names: covariate_names.to_vec(),
        };
        for (id, vals) in by_cbg {
            let (Some(a), Some(m), Some(s), Some(c)) = (
                vals.get(&Approach::Authoritative),
                vals.get(&Approach::Mllm),
                vals.get(&Approach::Segmentation),
                covs.get(id),
            ) else {
                continue;
            };
            if !(a.is_finite() && m.is_finite() && s.is_finite()) {
                continue;
            }
            d.cbg_ids.push(id.to_string());
            d.y.push(*a);
            d.mllm.push(*m);
            d.segmentation.push(*s);
            d.covariates.push(c.clone());
        }
        d
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn prediction(&self, a: Approach) -> &[f64] {
        match a {
            Approach::Mllm => &self.mllm,
            Approach::Segmentation => &self.segmentation,
            Approach::Authoritative => &self.y,
        }
    }

    fn design(&self, spec: R2Spec, rows: &[usize]) -> Design {
        let (m, s, c) = spec.uses();
        let mut cols = vec![(INTERCEPT.to_string(), vec![1.0; rows.len()])];
        if m {
            cols.push(("mllm".into(), rows.iter().map(|&i| self.mllm[i]).collect()));
        }
        if s {
            cols.push(("segmentation".into(), rows.iter().map(|&i| self.segmentation[i]).collect()));
        }
        if c {
            for (k, name) in self.covariate_names.iter().enumerate() {
                cols.push((name.clone(), rows.iter().map(|&i| self.covariates[i][k]).collect()));
            }
        }
        Design::from_columns(cols)
    }
}

/// Plain and adjusted R² of an OLS fit with intercept in `x`.
pub fn ols_r2(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<(f64, f64), QuantError> {
    let (n, k) = x.shape();
    if n <= k {
        return Err(QuantError::InsufficientData(format!("n = {n}, k = {k}")));
    }
    let gi = linalg::gram_inverse(x).map_err(|_| QuantError::Unbounded)?;
    let beta = gi * x.tr_mul(y);
    let e = y - x * beta;
    let ssr = e.norm_squared();
    let m = y.mean();
    let sst: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if sst <= 0.0 {
        return Err(QuantError::InsufficientData("outcome has no variance".into()));
    }
    let r2 = if ssr <= 1e-24 * sst { 1.0 } else { 1.0 - ssr / sst };
    let adj = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - k) as f64;
    Ok((r2, adj))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Cell {
    pub outcome: Outcome,
    pub spec: R2Spec,
    pub r2: f64,
    pub adj_r2: f64,
    pub interval: Option<Interval>,
    pub failed_draws: usize,
    pub n: usize,
}

/// Percentile interval over the successful statistics from `b` resamples.
fn bootstrap_stat<F>(n: usize, b: usize, seed: u64, stat: F) -> (Option<Interval>, usize)
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if b == 0 {
        return (None, 0);
    }
    let draws: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = draw_rng(seed, i);
            let picks = PairsResampler.draw(n, &mut rng);
            stat(&picks)
        })
        .collect();
    let ok: Vec<f64> = draws.iter().flatten().copied().collect();
    let failed = b - ok.len();
    if ok.is_empty() {
        return (None, failed);
    }
    (Some(Interval::from_draws(&ok)), failed)
}

/// Adjusted R² for the five column sets on each outcome, with percentile
/// intervals over `b` CBG resamples.
pub fn r2_ladder(
    panel: &Panel,
    covariate_names: &[String],
    b: usize,
    seed: u64,
) -> Result<Vec<R2Cell>, QuantError> {
    let mut out = Vec::new();
    for outcome in Outcome::ALL {
        let d = OutcomeData::from_panel(panel, outcome, covariate_names);
        out.extend(r2_cells(&d, b, seed)?);
    }
    Ok(out)
}

pub fn r2_cells(d: &OutcomeData, b: usize, seed: u64) -> Result<Vec<R2Cell>, QuantError> {
    if d.is_empty() {
        return Err(QuantError::InsufficientData(format!("no complete CBGs for {}", d.outcome)));
    }
    let all: Vec<usize> = (0..d.len()).collect();
    let mut out = Vec::new();
    for spec in R2Spec::ALL {
        if spec.uses().2 && d.covariate_names.is_empty() {
            continue;
        }
        let y = DVector::from_vec(d.y.clone());
        let (r2, adj_r2) = ols_r2(&y, &d.design(spec, &all).matrix)?;
        let cell_seed = derive_seed(seed, &["r2", d.outcome.as_str(), spec.as_str()]);
        let (interval, failed_draws) = bootstrap_stat(d.len(), b, cell_seed, |picks| {
            let yb = DVector::from_iterator(picks.len(), picks.iter().map(|&i| d.y[i]));
            ols_r2(&yb, &d.design(spec, picks).matrix).ok().map(|r| r.1)
        });
        out.push(R2Cell {
            outcome: d.outcome,
            spec,
            r2,
            adj_r2,
            interval,
            failed_draws,
            n: d.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCell {
    pub outcome: Outcome,
    pub approach: Approach,
    pub fit: QuantileFit,
    pub interval: Option<Interval>,
    pub failed_draws: usize,
}

fn prediction_design(pred: &[f64], rows: &[usize]) -> Design {
    Design::from_columns(vec![
        (INTERCEPT.to_string(), vec![1.0; rows.len()]),
        ("prediction".into(), rows.iter().map(|&i| pred[i]).collect()),
    ])
}

/// Pseudo-R² of the authoritative outcome regressed on each method's
/// prediction at every τ, with percentile intervals over `b` resamples.
pub fn quantile_grid(
    panel: &Panel,
    taus: &[f64],
    b: usize,
    seed: u64,
) -> Result<Vec<QuantileCell>, QuantError> {
    if taus.is_empty() {
        return Err(QuantError::InsufficientData("empty τ list".into()));
    }
    let mut out = Vec::new();
    for outcome in Outcome::ALL {
        let d = OutcomeData::from_panel(panel, outcome, &[]);
        out.extend(quantile_cells(&d, taus, b, seed)?);
    }
    Ok(out)
}

pub fn quantile_cells(
    d: &OutcomeData,
    taus: &[f64],
    b: usize,
    seed: u64,
) -> Result<Vec<QuantileCell>, QuantError> {
    if d.is_empty() {
        return Err(QuantError::InsufficientData(format!("no complete CBGs for {}", d.outcome)));
    }
    let all: Vec<usize> = (0..d.len()).collect();
    let mut out = Vec::new();
    for approach in [Approach::Mllm, Approach::Segmentation] {
        let pred = d.prediction(approach);
        for &tau in taus {
            let y = DVector::from_vec(d.y.clone());
            let fit = fit_quantile(&y, &prediction_design(pred, &all), tau)?;
            let tag = format!("{tau}");
            let cell_seed = derive_seed(seed, &["quantile", d.outcome.as_str(), approach.as_str(), &tag]);
            let (interval, failed_draws) = bootstrap_stat(d.len(), b, cell_seed, |picks| {
                let yb = DVector::from_iterator(picks.len(), picks.iter().map(|&i| d.y[i]));
                fit_quantile(&yb, &prediction_design(pred, picks), tau)
                    .ok()
                    .map(|f| f.pseudo_r2)
            });
            out.push(QuantileCell {
                outcome: d.outcome,
                approach,
                fit,
                interval,
                failed_draws,
            });
        }
    }
    Ok(out)
}

fn interval_fields(i: &Option<Interval>) -> [String; 3] {
    match i {
        Some(i) => [exact(i.mean), exact(i.low), exact(i.high)],
        None => [String::new(), String::new(), String::new()],
    }
}

pub fn write_r2_csv(cells: &[R2Cell], path: &Path) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["outcome", "spec", "r2", "adj_r2", "boot_mean", "ci_low", "ci_high", "failed_draws", "n"])?;
    for c in cells {
        let [m, lo, hi] = interval_fields(&c.interval);
        w.write_record([
            c.outcome.as_str().to_string(),
            c.spec.as_str().to_string(),
            exact(c.r2),
            exact(c.adj_r2),
            m,
            lo,
            hi,
            c.failed_draws.to_string(),
            c.n.to_string(),
        ])?;
    }
    w.flush()
}

pub fn write_quantile_csv(cells: &[QuantileCell], path: &Path) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "outcome",
        "approach",
        "tau",
        "pseudo_r2",
        "boot_mean",
        "ci_low",
        "ci_high",
        "intercept",
        "slope",
        "check_loss",
        "null_loss",
        "failed_draws",
        "n",
    ])?;
    for c in cells {
        let [m, lo, hi] = interval_fields(&c.interval);
        w.write_record([
            c.outcome.as_str().to_string(),
            c.approach.as_str().to_string(),
            exact(c.fit.tau),
            exact(c.fit.pseudo_r2),
            m,
            lo,
            hi,
            exact(c.fit.coefficients[0]),
            exact(c.fit.coefficients[1]),
            exact(c.fit.check_loss),
            exact(c.fit.null_loss),
            c.failed_draws.to_string(),
            c.fit.n.to_string(),
        ])?;
    }
    w.flush()
}

/// Text rendering of the R² comparison, one row per spec and one column
/// per outcome.
pub fn format_r2_table(cells: &[R2Cell]) -> String {
    use crate::format::sig6;
    let mut s = String::new();
    let _ = writeln!(s, "{:<22}{:>34}{:>34}{:>34}", "spec", "poverty", "canopy", "si");
    for spec in R2Spec::ALL {
        let mut line = format!("{:<22}", spec.label());
        let mut any = false;
        for outcome in Outcome::ALL {
            let cell = cells.iter().find(|c| c.spec == spec && c.outcome == outcome);
            let text = match cell {
                Some(c) => {
                    any = true;
                    match &c.interval {
                        Some(i) => format!("{} [{}, {}]", sig6(c.adj_r2), sig6(i.low), sig6(i.high)),
                        None => sig6(c.adj_r2),
                    }
                }
                None => String::new(),
            };
            line.push_str(&format!("{text:>34}"));
        }
        if any {
            let _ = writeln!(s, "{line}");
        }
    }
    s
}

/// Writes rows of any serialisable cells as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_design(x: &[f64]) -> Design {
        Design::from_columns(vec![
            ("const".into(), vec![1.0; x.len()]),
            ("x".into(), x.to_vec()),
        ])
    }

    /// Every pair of observations with distinct x defines a line; the LAD
    /// optimum is attained at one of them.
    fn lad_enumeration(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                if (x[i] - x[j]).abs() < 1e-12 {
                    continue;
                }
                let slope = (y[j] - y[i]) / (x[j] - x[i]);
                let icpt = y[i] - slope * x[i];
                let loss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).abs()).sum();
                if loss < best.0 {
                    best = (loss, icpt, slope);
                }
            }
        }
        best
    }

    #[test]
    fn median_matches_basis_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 1.0 + 0.5 * v + rng.random_range(-1.0..1.0)).collect();
            let fit = fit_quantile(&DVector::from_vec(y.clone()), &line_design(&x), 0.5).unwrap();
            let (loss, a, b) = lad_enumeration(&x, &y);
            assert!((fit.check_loss - 0.5 * loss).abs() < 1e-9);
            assert!((fit.coefficients[0] - a).abs() < 1e-6, "{:?} vs {a}", fit.coefficients);
            assert!((fit.coefficients[1] - b).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_fit_and_intercept_only() {
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for tau in DEFAULT_TAUS {
            let fit = fit_quantile(&DVector::from_vec(y.clone()), &line_design(&x), tau).unwrap();
            assert_eq!(fit.pseudo_r2, 1.0);
            assert!((fit.coefficients[1] - 2.0).abs() < 1e-9);
        }
        let yy: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64).collect();
        let d = Design::from_columns(vec![("const".into(), vec![1.0; 15])]);
        for tau in DEFAULT_TAUS {
            let fit = fit_quantile(&DVector::from_vec(yy.clone()), &d, tau).unwrap();
            assert_eq!(fit.pseudo_r2, 0.0);
        }
    }

    #[test]
    fn intercept_only_returns_sample_quantile() {
        let y = DVector::from_vec(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        let d = Design::from_columns(vec![("const".into(), vec![1.0; 5])]);
        let fit = fit_quantile(&y, &d, 0.5).unwrap();
        assert_eq!(fit.coefficients[0], 3.0);
    }

    #[test]
    fn invalid_inputs() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let d = line_design(&[0.0, 1.0, 2.0]);
        assert_eq!(fit_quantile(&y, &d, 0.0), Err(QuantError::InvalidTau(0.0)));
        assert_eq!(fit_quantile(&y, &d, 1.0), Err(QuantError::InvalidTau(1.0)));
        let collinear = Design::from_columns(vec![
            ("a".into(), vec![1.0, 1.0, 1.0]),
            ("b".into(), vec![2.0, 2.0, 2.0]),
        ]);
        assert_eq!(fit_quantile(&y, &collinear, 0.5), Err(QuantError::Unbounded));
    }

    #[test]
    fn ols_r2_perfect_and_null() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y = DVector::from_vec(x.iter().map(|v| 3.0 * v - 1.0).collect());
        let (r2, _) = ols_r2(&y, &line_design(&x).matrix).unwrap();
        assert_eq!(r2, 1.0);
    }

    #[test]
    fn independent_predictor_has_zero_adjusted_r2_in_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400;
        let d = OutcomeData {
            outcome: Outcome::Poverty,
            cbg_ids: (0..n).map(|i| format!("c{i}")).collect(),
            y: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mllm: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            segmentation: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            covariates: Vec::new(),
            covariate_names: Vec::new(),
        };
        let cells = r2_cells(&d, 500, 3).unwrap();
        assert_eq!(cells.len(), 3);
        for c in &cells {
            let i = c.interval.unwrap();
            assert!(i.low <= 0.0 && 0.0 <= i.high, "{c:?}");
        }
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let mllm: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = OutcomeData {
            outcome: Outcome::Canopy,
            cbg_ids: (0..n).map(|i| format!("c{i}")).collect(),
            y: mllm.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect(),
            segmentation: mllm.iter().map(|v| 0.5 * v + rng.random_range(-1.0..1.0)).collect(),
            mllm,
            covariates: Vec::new(),
            covariate_names: Vec::new(),
        };
        let a = quantile_cells(&d, &[0.5], 50, 9).unwrap();
        let b = quantile_cells(&d, &[0.5], 50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    fn arb_problem() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (8usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(-3.0f64..3.0, n),
                0.05f64..0.95,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subgradient_fraction((x, e, tau) in arb_problem()) {
            let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| 0.3 + a + b).collect();
            let fit = fit_quantile(&DVector::from_vec(y.clone()), &line_design(&x), tau).unwrap();
            let n = y.len() as f64;
            let neg = x.iter().zip(&y)
                .filter(|(a, b)| **b - fit.coefficients[0] - fit.coefficients[1] * **a < -1e-9)
                .count() as f64;
            prop_assert!(neg / n >= tau - 2.0 / n - 1e-12 && neg / n <= tau + 2.0 / n + 1e-12);
        }

        #[test]
        fn optimum_beats_perturbations((x, e, tau) in arb_problem()) {
            let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a * 0.7 + b).collect();
            let fit = fit_quantile(&DVector::from_vec(y.clone()), &line_design(&x), tau).unwrap();
            for (da, db) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3), (0.05, -0.02)] {
                let f: Vec<f64> = x.iter()
                    .map(|v| fit.coefficients[0] + da + (fit.coefficients[1] + db) * v)
                    .collect();
                prop_assert!(check_loss(&y, &f, tau) >= fit.check_loss - 1e-9);
            }
        }

        #[test]
        fn pseudo_r2_affine_invariant((x, e, tau) in arb_problem(), s in 0.1f64..10.0, c in -5.0f64..5.0) {
            let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
            let yv = DVector::from_vec(y);
            let f1 = fit_quantile(&yv, &line_design(&x), tau).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| s * v + c).collect();
            let f2 = fit_quantile(&yv, &line_design(&xs), tau).unwrap();
            prop_assert!((f1.pseudo_r2 - f2.pseudo_r2).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&f1.pseudo_r2));
        }

        #[test]
        fn median_is_half_lad((x, e, _tau) in arb_problem()) {
            let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a - b).collect();
            let fit = fit_quantile(&DVector::from_vec(y.clone()), &line_design(&x), 0.5).unwrap();
            let (lad, _, _) = lad_enumeration(&x, &y);
            prop_assert!((fit.check_loss - 0.5 * lad).abs() < 1e-9 * (1.0 + lad));
        }
    }
}
