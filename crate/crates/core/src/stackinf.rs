//! Stacked regression across measurement approaches, the block-group
//! cluster bootstrap and interaction nullity tests.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::Panel;
use crate::econ::{self, Design, EconError, FitResult, SarOptions, SarSe, SeRequest, INTERCEPT, TREATMENT};
use crate::format::exact;
use crate::spatial::{Layered, SpectralWeights, WeightsMatrix};
use crate::stats;
use crate::types::{Approach, HolcGroup, Outcome};

/// Share of failed draws above which a bootstrap run is abandoned.
pub const MAX_FAILED_SHARE: f64 = 0.05;

pub const EQUIVALENCE_CAVEAT: &str = "The test is an interaction nullity test (H0: theta = 0). \
Rejection indicates the approach's effect differs from the baseline approach; \
non-rejection does not establish equivalence.";

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("block group {0} does not have exactly one row per approach")]
    UnbalancedBlock(String),
    #[error(transparent)]
    Econ(#[from] EconError),
    #[error("spatial weights are required for the lag specification")]
    MissingWeights,
    #[error("block group {0} is not in the weights matrix")]
    NotInWeights(String),
    #[error("{failed} of {total} bootstrap draws failed; first error: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("bootstrap distribution is empty")]
    EmptyDistribution,
    #[error("B must be at least 1")]
    NoDraws,
    #[error(transparent)]
    Spatial(#[from] crate::spatial::SpatialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackSpec {
    ZipFe,
    Sar,
}

impl StackSpec {
    pub fn as_str(&self) -> &'static str {
        match self {
            StackSpec::ZipFe => "zip_fe",
            StackSpec::Sar => "sar",
        }
    }
}

impl std::str::FromStr for StackSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zip_fe" | "zipfe" | "fe" => Ok(StackSpec::ZipFe),
            "sar" => Ok(StackSpec::Sar),
            _ => Err(format!("unknown stacked specification `{s}`")),
        }
    }
}

/// One (block group, approach) observation of the stacked design.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedRow {
    pub cbg_id: String,
    pub approach: Approach,
    pub y: f64,
    pub redlined: bool,
    pub covariates: BTreeMap<String, f64>,
    pub zip_code: String,
}

/// Stacks one outcome of a panel, dropping block groups with a missing
/// covariate from all approaches.
pub fn stack_panel(panel: &Panel, outcome: Outcome, covariate_names: &[String]) -> Vec<StackedRow> {
    let complete: std::collections::BTreeSet<&str> = panel
        .rows
        .iter()
        .filter(|r| covariate_names.iter().all(|c| r.covariates.get(c).copied().flatten().is_some()))
        .map(|r| r.cbg_id.as_str())
        .collect();
    panel
        .rows
        .iter()
        .filter(|r| complete.contains(r.cbg_id.as_str()))
        .map(|r| StackedRow {
            cbg_id: r.cbg_id.clone(),
            approach: r.approach,
            y: r.outcome_z(outcome),
            redlined: r.holc_group == HolcGroup::Redlined,
            covariates: covariate_names
                .iter()
                .map(|c| (c.clone(), r.covariates[c].expect("complete")))
                .collect(),
            zip_code: r.zip_code.clone(),
        })
        .collect()
}

/// Block-group records with one outcome per approach.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub ids: Vec<String>,
    pub zips: Vec<String>,
    pub redlined: Vec<bool>,
    pub covariate_names: Vec<String>,
    /// `covariates[i][j]`: block `i`, covariate `j`.
    pub covariates: Vec<Vec<f64>>,
    /// `y[i][a]` with `a` indexing [`Approach::ALL`].
    pub y: Vec<[f64; 3]>,
}

fn approach_index(a: Approach) -> usize {
    Approach::ALL.iter().position(|&x| x == a).expect("known approach")
}

impl Blocks {
    /// Groups rows into balanced blocks sorted by block-group id.
    pub fn from_rows(rows: &[StackedRow]) -> Result<Blocks, StackError> {
        let mut map: BTreeMap<&str, (&StackedRow, [Option<f64>; 3])> = BTreeMap::new();
        for r in rows {
            let e = map.entry(r.cbg_id.as_str()).or_insert((r, [None; 3]));
            let first = e.0;
            if first.redlined != r.redlined || first.zip_code != r.zip_code || first.covariates.keys().ne(r.covariates.keys()) {
                return Err(StackError::UnbalancedBlock(r.cbg_id.clone()));
            }
            let slot = &mut e.1[approach_index(r.approach)];
            if slot.is_some() {
                return Err(StackError::UnbalancedBlock(r.cbg_id.clone()));
            }
            *slot = Some(r.y);
        }
        let covariate_names: Vec<String> = rows.first().map(|r| r.covariates.keys().cloned().collect()).unwrap_or_default();
        let mut b = Blocks {
            ids: Vec::with_capacity(map.len()),
            zips: Vec::with_capacity(map.len()),
            redlined: Vec::with_capacity(map.len()),
            covariate_names,
            covariates: Vec::with_capacity(map.len()),
            y: Vec::with_capacity(map.len()),
        };
        for (id, (first, ys)) in map {
            let y = match ys {
                [Some(a), Some(m), Some(s)] => [a, m, s],
                _ => return Err(StackError::UnbalancedBlock(id.to_string())),
            };
            if first.covariates.keys().ne(b.covariate_names.iter()) {
                return Err(StackError::UnbalancedBlock(id.to_string()));
            }
            b.ids.push(id.to_string());
            b.zips.push(first.zip_code.clone());
            b.redlined.push(first.redlined);
            b.covariates.push(first.covariates.values().copied().collect());
            b.y.push(y);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Blocks `picks[j]` in order, renamed `<id>#<j>` so repeated draws are
    /// distinct clusters. Zip codes are kept for the fixed effects.
    pub fn resample(&self, picks: &[usize]) -> Blocks {
        Blocks {
            ids: picks.iter().enumerate().map(|(j, &i)| format!("{}#{j}", self.ids[i])).collect(),
            zips: picks.iter().map(|&i| self.zips[i].clone()).collect(),
            redlined: picks.iter().map(|&i| self.redlined[i]).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: picks.iter().map(|&i| self.covariates[i].clone()).collect(),
            y: picks.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Reorders blocks to follow `ids`.
    fn reorder(&self, ids: &[String]) -> Result<Blocks, StackError> {
        let pos: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let picks: Vec<usize> = ids
            .iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| StackError::NotInWeights(id.clone())))
            .collect::<Result<_, _>>()?;
        if picks.len() != self.len() {
            return Err(StackError::Econ(EconError::DimensionMismatch(format!(
                "{} weights ids for {} blocks",
                picks.len(),
                self.len()
            ))));
        }
        let mut out = self.resample(&picks);
        out.ids = ids.to_vec();
        Ok(out)
    }
}

/// Point estimates of the stacked regression.
#[derive(Debug, Clone)]
pub struct StackedFit {
    pub spec: StackSpec,
    pub baseline: Approach,
    /// Treatment effect of the baseline approach.
    pub delta0: f64,
    /// Level shifts of the non-baseline approaches.
    pub eta: BTreeMap<Approach, f64>,
    /// Treatment-effect deviations of the non-baseline approaches.
    pub theta: BTreeMap<Approach, f64>,
    /// `δ0` for the baseline, `δ0 + θ` otherwise.
    pub totals: BTreeMap<Approach, f64>,
    pub fit: FitResult,
}

impl StackedFit {
    pub fn se_delta0(&self) -> f64 {
        self.fit.se(TREATMENT).unwrap_or(f64::NAN)
    }

    pub fn se_theta(&self, a: Approach) -> Option<f64> {
        self.fit.se(&interaction_name(a))
    }
}

pub fn dummy_name(a: Approach) -> String {
    format!("approach:{a}")
}

pub fn interaction_name(a: Approach) -> String {
    format!("{TREATMENT}:{a}")
}

/// Design and outcome in layer-major order (all blocks of approach 0, then 1, 2).
fn stacked_design(blocks: &Blocks, baseline: Approach, intercept: bool) -> (DVector<f64>, Design) {
    let n = blocks.len();
    let others: Vec<Approach> = Approach::ALL.into_iter().filter(|&a| a != baseline).collect();
    let rows = 3 * n;
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    if intercept {
        columns.push((INTERCEPT.to_string(), vec![1.0; rows]));
    }
    let treat: Vec<f64> = (0..rows).map(|r| blocks.redlined[r % n] as u8 as f64).collect();
    columns.push((TREATMENT.to_string(), treat.clone()));
    for &a in &others {
        let l = approach_index(a);
        let d: Vec<f64> = (0..rows).map(|r| (r / n == l) as u8 as f64).collect();
        columns.push((dummy_name(a), d));
    }
    for &a in &others {
        let l = approach_index(a);
        let d: Vec<f64> = (0..rows).map(|r| if r / n == l { treat[r] } else { 0.0 }).collect();
        columns.push((interaction_name(a), d));
    }
    for (j, name) in blocks.covariate_names.iter().enumerate() {
        columns.push((name.clone(), (0..rows).map(|r| blocks.covariates[r % n][j]).collect()));
    }
    let y = DVector::from_fn(rows, |r, _| blocks.y[r % n][r / n]);
    (y, Design::from_columns(columns))
}

/// Fits the stacked model on prepared blocks. For [`StackSpec::Sar`] the
/// blocks must already follow the order of `weights`.
pub fn fit_blocks(
    blocks: &Blocks,
    spec: StackSpec,
    baseline: Approach,
    weights: Option<&SpectralWeights>,
) -> Result<StackedFit, StackError> {
    let fit = match spec {
        StackSpec::ZipFe => {
            let (y, design) = stacked_design(blocks, baseline, false);
            let n = blocks.len();
            let zips: Vec<String> = (0..3 * n).map(|r| blocks.zips[r % n].clone()).collect();
            let clusters: Vec<String> = (0..3 * n).map(|r| blocks.ids[r % n].clone()).collect();
            econ::fit_fe(&y, &design, &zips, SeRequest::Cluster(&clusters))?
        }
        StackSpec::Sar => {
            let w = weights.ok_or(StackError::MissingWeights)?;
            if w.weights().ids() != blocks.ids.as_slice() {
                return Err(StackError::Econ(EconError::DimensionMismatch(
                    "blocks are not in weights order".into(),
                )));
            }
            let (y, design) = stacked_design(blocks, baseline, true);
            let op = Layered::new(w, 3);
            econ::fit_sar(&y, &design, &op, SarSe::ModelBased, SarOptions::default())?
        }
    };
    let delta0 = fit.coef(TREATMENT).expect("treatment column");
    let mut eta = BTreeMap::new();
    let mut theta = BTreeMap::new();
    let mut totals = BTreeMap::new();
    totals.insert(baseline, delta0);
    for a in Approach::ALL.into_iter().filter(|&a| a != baseline) {
        let t = fit.coef(&interaction_name(a)).expect("interaction column");
        eta.insert(a, fit.coef(&dummy_name(a)).expect("dummy column"));
        theta.insert(a, t);
        totals.insert(a, delta0 + t);
    }
    Ok(StackedFit {
        spec,
        baseline,
        delta0,
        eta,
        theta,
        totals,
        fit,
    })
}

/// Prepares blocks for `spec`: sorted by id for fixed effects, in weights
/// order (with eigendecomposition) for the lag model.
pub fn prepare(
    rows: &[StackedRow],
    spec: StackSpec,
    weights: Option<&WeightsMatrix>,
) -> Result<(Blocks, Option<SpectralWeights>), StackError> {
    let blocks = Blocks::from_rows(rows)?;
    match spec {
        StackSpec::ZipFe => Ok((blocks, None)),
        StackSpec::Sar => {
            let w = weights.ok_or(StackError::MissingWeights)?.restrict(&blocks.ids)?;
            let blocks = blocks.reorder(w.ids())?;
            Ok((blocks, Some(SpectralWeights::new(w))))
        }
    }
}

pub fn fit_stacked(
    rows: &[StackedRow],
    spec: StackSpec,
    baseline: Approach,
    weights: Option<&WeightsMatrix>,
) -> Result<StackedFit, StackError> {
    let (blocks, sw) = prepare(rows, spec, weights)?;
    fit_blocks(&blocks, spec, baseline, sw.as_ref())
}

/// Chooses which blocks enter a bootstrap draw.
pub trait Resampler: Sync {
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

/// `n` draws with replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairsResampler;

impl Resampler for PairsResampler {
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Returns the original sample every time.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityResampler;

impl Resampler for IdentityResampler {
    fn draw(&self, n: usize, _: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).collect()
    }
}

/// Generator for draw `b`: a function of `(seed, b)` only.
pub fn draw_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootDraw {
    pub b: usize,
    pub delta0: f64,
    pub theta: BTreeMap<Approach, f64>,
    pub totals: BTreeMap<Approach, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn from_draws(v: &[f64]) -> Interval {
        let (low, high) = stats::percentile_ci95(v);
        Interval {
            mean: stats::mean(v),
            low,
            high,
        }
    }

    pub fn excludes_zero(&self) -> bool {
        self.low > 0.0 || self.high < 0.0
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapDistribution {
    pub spec: StackSpec,
    pub baseline: Approach,
    pub seed: u64,
    pub b_requested: usize,
    /// Successful draws sorted by `b`.
    pub draws: Vec<BootDraw>,
    pub failures: Vec<(usize, String)>,
    pub point: StackedFit,
}

impl BootstrapDistribution {
    pub fn total_draws(&self, a: Approach) -> Vec<f64> {
        self.draws.iter().map(|d| d.totals[&a]).collect()
    }

    pub fn theta_draws(&self, a: Approach) -> Vec<f64> {
        self.draws.iter().filter_map(|d| d.theta.get(&a).copied()).collect()
    }

    pub fn total_interval(&self, a: Approach) -> Interval {
        Interval::from_draws(&self.total_draws(a))
    }

    pub fn theta_interval(&self, a: Approach) -> Option<Interval> {
        let v = self.theta_draws(a);
        (!v.is_empty()).then(|| Interval::from_draws(&v))
    }

    pub fn delta0_interval(&self) -> Interval {
        Interval::from_draws(&self.draws.iter().map(|d| d.delta0).collect::<Vec<_>>())
    }
}

/// Block-group cluster bootstrap of the stacked regression. Draw `b` uses
/// its own generator stream, so results do not depend on scheduling.
pub fn cluster_bootstrap(
    rows: &[StackedRow],
    spec: StackSpec,
    baseline: Approach,
    weights: Option<&WeightsMatrix>,
    b: usize,
    seed: u64,
    resampler: &dyn Resampler,
) -> Result<BootstrapDistribution, StackError> {
    if b == 0 {
        return Err(StackError::NoDraws);
    }
    let (blocks, sw) = prepare(rows, spec, weights)?;
    let point = fit_blocks(&blocks, spec, baseline, sw.as_ref())?;
    let base_w = sw.as_ref().map(|s| s.weights());
    let results: Vec<Result<BootDraw, (usize, String)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = draw_rng(seed, i);
            let picks = resampler.draw(blocks.len(), &mut rng);
            let sample = blocks.resample(&picks);
            let w = base_w.map(|w| SpectralWeights::new(w.resample(&picks, sample.ids.clone())));
            fit_blocks(&sample, spec, baseline, w.as_ref())
                .map(|f| BootDraw {
                    b: i,
                    delta0: f.delta0,
                    theta: f.theta,
                    totals: f.totals,
                })
                .map_err(|e| (i, e.to_string()))
        })
        .collect();
    let mut draws = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(d) => draws.push(d),
            Err(f) => failures.push(f),
        }
    }
    if failures.len() as f64 > MAX_FAILED_SHARE * b as f64 {
        return Err(StackError::TooManyFailures {
            failed: failures.len(),
            total: b,
            first: failures[0].1.clone(),
        });
    }
    if !failures.is_empty() {
        log::warn!("{} of {b} bootstrap draws failed and were excluded", failures.len());
    }
    Ok(BootstrapDistribution {
        spec,
        baseline,
        seed,
        b_requested: b,
        draws,
        failures,
        point,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NotRejected,
    Rejected,
}

/// Rejects `θ_m = 0` when the percentile 95% interval of θ_m excludes zero.
pub fn equivalence_test(dist: &BootstrapDistribution, m: Approach) -> Result<Verdict, StackError> {
    let iv = dist.theta_interval(m).ok_or(StackError::EmptyDistribution)?;
    Ok(if iv.excludes_zero() {
        Verdict::Rejected
    } else {
        Verdict::NotRejected
    })
}

/// A labelled bootstrap run for the output files.
pub struct LabelledDistribution<'a> {
    pub outcome: Outcome,
    pub dist: &'a BootstrapDistribution,
}

pub fn write_draws_csv(runs: &[LabelledDistribution<'_>], path: &Path) -> Result<(), StackError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| StackError::Io(std::io::Error::other(e)))?;
    let mut header = vec!["b".to_string(), "outcome".into(), "spec".into(), "baseline".into(), "delta0".into()];
    header.extend(Approach::ALL.iter().map(|a| format!("theta_{a}")));
    header.extend(Approach::ALL.iter().map(|a| format!("total_{a}")));
    let io = |e: csv::Error| StackError::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for run in runs {
        for d in &run.dist.draws {
            let mut rec = vec![
                d.b.to_string(),
                run.outcome.to_string(),
                run.dist.spec.as_str().to_string(),
                run.dist.baseline.to_string(),
                exact(d.delta0),
            ];
            rec.extend(Approach::ALL.iter().map(|a| d.theta.get(a).map(|v| exact(*v)).unwrap_or_default()));
            rec.extend(Approach::ALL.iter().map(|a| exact(d.totals[a])));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceEntry {
    pub outcome: Outcome,
    pub spec: StackSpec,
    pub approach: Approach,
    pub baseline: Approach,
    pub theta: f64,
    pub theta_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub caveat: String,
    pub b: usize,
    pub seed: u64,
    pub results: Vec<EquivalenceEntry>,
}

pub fn equivalence_report(runs: &[LabelledDistribution<'_>]) -> Result<EquivalenceReport, StackError> {
    let mut results = Vec::new();
    for run in runs {
        let d = run.dist;
        for (&a, &theta) in &d.point.theta {
            let iv = d.theta_interval(a).ok_or(StackError::EmptyDistribution)?;
            results.push(EquivalenceEntry {
                outcome: run.outcome,
                spec: d.spec,
                approach: a,
                baseline: d.baseline,
                theta,
                theta_mean: iv.mean,
                ci_low: iv.low,
                ci_high: iv.high,
                verdict: equivalence_test(d, a)?,
            });
        }
    }
    Ok(EquivalenceReport {
        caveat: EQUIVALENCE_CAVEAT.to_string(),
        b: runs.first().map(|r| r.dist.b_requested).unwrap_or(0),
        seed: runs.first().map(|r| r.dist.seed).unwrap_or(0),
        results,
    })
}

/// Dense `(3n × 3n)` block-diagonal weights, for checks against the layered operator.
pub fn block_diagonal(w: &DMatrix<f64>, layers: usize) -> DMatrix<f64> {
    let n = w.nrows();
    let mut out = DMatrix::zeros(n * layers, n * layers);
    for l in 0..layers {
        out.view_mut((l * n, l * n), (n, n)).copy_from(w);
    }
    out
}
