//! Synthetic lattices with known spatial dependence and treatment effects.
//!
//! Each cell of a `rows × cols` grid of unit squares is a block group. The
//! authoritative outcome follows the lag model
//! `y = (I − ρW)⁻¹(δ·T + Xβ + ε)` and every other approach observes
//! `attenuation·y + shift + noise`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, AggregateError, CbgRecord, Indicators, Panel, PanelOptions};
use crate::ingest::{CbgRaw, PanoramaRecord, SegmentationShares, TileRecord};
use crate::spatial::{self, Geometry, SpatialError, WeightsMatrix, DEFAULT_SNAP_TOLERANCE};
use crate::stackinf::{self, StackError, StackSpec};
use crate::types::{Approach, HolcGroup, Outcome, Sample};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("I − ρW is singular or the lag iteration diverged (ρ = {0})")]
    SingularSystem(f64),
    #[error("calibration did not reach the targets after {0} rounds")]
    Calibration(usize),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Distortion applied by a measurement approach to the authoritative value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproachBias {
    pub attenuation: f64,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Effects {
    pub poverty: f64,
    pub canopy: f64,
}

impl Effects {
    pub fn get(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Poverty => self.poverty,
            Outcome::Canopy => self.canopy,
            Outcome::Si => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub rows: usize,
    pub cols: usize,
    pub rho_true: f64,
    pub delta_true: Effects,
    /// Share of cells graded redlined.
    pub treatment_share: f64,
    /// Share of untreated cells graded ideal; the rest are stable/declining.
    pub ideal_share: f64,
    pub noise_sd: f64,
    pub approach_bias: BTreeMap<Approach, ApproachBias>,
    pub n_covariates: usize,
    pub covariate_beta: f64,
    /// Side length, in cells, of the square zip-code blocks.
    pub zip_block: usize,
    pub images_per_cbg: u32,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        let mut approach_bias = BTreeMap::new();
        approach_bias.insert(
            Approach::Mllm,
            ApproachBias {
                attenuation: 0.9,
                shift: 0.0,
                noise_sd: 0.5,
            },
        );
        approach_bias.insert(
            Approach::Segmentation,
            ApproachBias {
                attenuation: 0.4,
                shift: 0.0,
                noise_sd: 0.8,
            },
        );
        DgpConfig {
            rows: 30,
            cols: 30,
            rho_true: 0.4,
            delta_true: Effects {
                poverty: 0.6,
                canopy: -0.4,
            },
            treatment_share: 0.4,
            ideal_share: 0.5,
            noise_sd: 1.0,
            approach_bias,
            n_covariates: 2,
            covariate_beta: 0.3,
            zip_block: 5,
            images_per_cbg: 40,
            seed: 1,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.rows < 3 || self.cols < 3 {
            return bad("grid must be at least 3×3");
        }
        if !(self.rho_true.abs() < 1.0) {
            return bad("rho_true must satisfy |ρ| < 1");
        }
        if !(self.treatment_share > 0.0 && self.treatment_share < 1.0) {
            return bad("treatment_share must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ideal_share) {
            return bad("ideal_share must lie in [0, 1]");
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be finite and non-negative");
        }
        if self.zip_block == 0 {
            return bad("zip_block must be positive");
        }
        for (a, b) in &self.approach_bias {
            if *a == Approach::Authoritative {
                return bad("approach_bias cannot distort the authoritative approach");
            }
            if !(b.noise_sd >= 0.0) || !b.attenuation.is_finite() || !b.shift.is_finite() {
                return bad("approach_bias entries must be finite with noise_sd ≥ 0");
            }
        }
        Ok(())
    }

    pub fn bias(&self, a: Approach) -> ApproachBias {
        match a {
            Approach::Authoritative => ApproachBias {
                attenuation: 1.0,
                shift: 0.0,
                noise_sd: 0.0,
            },
            _ => self.approach_bias.get(&a).copied().unwrap_or(ApproachBias {
                attenuation: 1.0,
                shift: 0.0,
                noise_sd: 0.0,
            }),
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.n_covariates).map(|i| format!("x{i}")).collect()
    }
}

/// Parameters behind a generated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: DgpConfig,
    pub n: usize,
    pub n_treated: usize,
    /// Raw-scale treatment effect each approach inherits: `attenuation·δ`.
    pub implied_delta: BTreeMap<Outcome, BTreeMap<Approach, f64>>,
    /// Raw-scale deviation from the authoritative effect: `(attenuation − 1)·δ`.
    pub implied_theta: BTreeMap<Outcome, BTreeMap<Approach, f64>>,
    /// Extra treated-cell shifts added by calibration, per outcome and approach.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub calibration_shifts: BTreeMap<Outcome, BTreeMap<Approach, f64>>,
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub records: Vec<CbgRecord>,
    pub geometry: BTreeMap<String, Geometry>,
    pub weights: WeightsMatrix,
    pub truth: Truth,
}

impl SimData {
    /// Panels for every sample that has both a treated and a reference group.
    pub fn panels(&self, options: PanelOptions) -> Result<BTreeMap<Sample, Panel>, SimError> {
        let mut out = BTreeMap::new();
        for sample in [Sample::VsIdeal, Sample::VsStableDeclining, Sample::All] {
            let groups: Vec<HolcGroup> = self
                .records
                .iter()
                .filter(|r| sample.contains(r.holc_group))
                .map(|r| r.holc_group)
                .collect();
            let treated = groups.iter().filter(|g| **g == HolcGroup::Redlined).count();
            if treated == 0 || treated == groups.len() {
                continue;
            }
            out.insert(sample, aggregate::build_panel_from_records(&self.records, sample, options)?);
        }
        Ok(out)
    }

    pub fn value(&self, i: usize, a: Approach, outcome: Outcome) -> f64 {
        let v = self.records[i].values[&a].expect("simulated values are complete");
        match outcome {
            Outcome::Canopy => v.canopy,
            _ => v.poverty,
        }
    }

    fn value_mut(&mut self, i: usize, a: Approach, outcome: Outcome) -> &mut f64 {
        let v = self.records[i]
            .values
            .get_mut(&a)
            .and_then(|v| v.as_mut())
            .expect("simulated values are complete");
        match outcome {
            Outcome::Canopy => &mut v.canopy,
            _ => &mut v.poverty,
        }
    }

    /// Writes `panel.csv`, `weights.json`, `geometry.geojson` and `truth.json`.
    pub fn write_bundle(&self, dir: &Path, options: PanelOptions) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        let panels = self.panels(options)?;
        let refs: Vec<&Panel> = panels.values().collect();
        aggregate::write_panels_csv(&refs, &dir.join("panel.csv"))?;
        self.weights.write_json(&dir.join("weights.json"))?;
        spatial::write_geojson(&dir.join("geometry.geojson"), &self.geometry)?;
        let text = serde_json::to_string_pretty(&self.truth)?;
        std::fs::write(dir.join("truth.json"), text + "\n")?;
        Ok(())
    }
}

/// Solves `(I − ρW) y = rhs` by fixed-point iteration `y ← rhs + ρWy`,
/// which contracts for row-standardized W whenever |ρ| < 1.
pub fn solve_lag(w: &WeightsMatrix, rho: f64, rhs: &[f64]) -> Result<Vec<f64>, SimError> {
    if !(rho.abs() < 1.0) {
        return Err(SimError::SingularSystem(rho));
    }
    let mut y = rhs.to_vec();
    if rho == 0.0 {
        return Ok(y);
    }
    let scale = 1.0 + rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..100_000 {
        let lag = w.lag(&y)?;
        let mut change = 0.0f64;
        for i in 0..y.len() {
            let next = rhs[i] + rho * lag[i];
            change = change.max((next - y[i]).abs());
            y[i] = next;
        }
        if !change.is_finite() {
            break;
        }
        if change <= 1e-15 * scale {
            return Ok(y);
        }
    }
    Err(SimError::SingularSystem(rho))
}

fn zip_for(r: usize, c: usize, block: usize) -> String {
    format!("z{:03}{:03}", r / block, c / block)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate(cfg: &DgpConfig) -> Result<SimData, SimError> {
    cfg.validate()?;
    let geometry = spatial::lattice(cfg.rows, cfg.cols);
    let weights = spatial::queen_weights(&geometry, DEFAULT_SNAP_TOLERANCE)?;
    let ids: Vec<String> = weights.ids().to_vec();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_treated = ((cfg.treatment_share * n as f64).round() as usize).clamp(1, n - 1);
    let mut treated = vec![false; n];
    for i in sample(&mut rng, n, n_treated) {
        treated[i] = true;
    }
    let groups: Vec<HolcGroup> = treated
        .iter()
        .map(|&t| {
            let u: f64 = rng.random();
            if t {
                HolcGroup::Redlined
            } else if u < cfg.ideal_share {
                HolcGroup::Ideal
            } else {
                HolcGroup::StableDeclining
            }
        })
        .collect();
    let covariates: Vec<Vec<f64>> = (0..cfg.n_covariates).map(|_| normals(&mut rng, n, 1.0)).collect();

    let mut latent: BTreeMap<Outcome, Vec<f64>> = BTreeMap::new();
    for outcome in [Outcome::Poverty, Outcome::Canopy] {
        let delta = cfg.delta_true.get(outcome);
        let eps = normals(&mut rng, n, cfg.noise_sd);
        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                let xb: f64 = covariates.iter().map(|c| cfg.covariate_beta * c[i]).sum();
                delta * treated[i] as u8 as f64 + xb + eps[i]
            })
            .collect();
        latent.insert(outcome, solve_lag(&weights, cfg.rho_true, &rhs)?);
    }

    let mut observed: BTreeMap<Approach, [Vec<f64>; 2]> = BTreeMap::new();
    for a in Approach::ALL {
        let b = cfg.bias(a);
        let mut pair: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (slot, outcome) in [Outcome::Poverty, Outcome::Canopy].into_iter().enumerate() {
            let noise = normals(&mut rng, n, b.noise_sd);
            pair[slot] = latent[&outcome]
                .iter()
                .zip(&noise)
                .map(|(y, e)| b.attenuation * y + b.shift + e)
                .collect();
        }
        observed.insert(a, pair);
    }

    let names = cfg.covariate_names();
    let records: Vec<CbgRecord> = (0..n)
        .map(|i| {
            let (r, c) = (i / cfg.cols, i % cfg.cols);
            CbgRecord {
                cbg_id: ids[i].clone(),
                holc_group: groups[i],
                zip_code: zip_for(r, c, cfg.zip_block),
                covariates: names
                    .iter()
                    .zip(&covariates)
                    .map(|(name, col)| (name.clone(), Some(col[i])))
                    .collect(),
                weight_images: cfg.images_per_cbg,
                values: Approach::ALL
                    .into_iter()
                    .map(|a| {
                        let [p, q] = &observed[&a];
                        (
                            a,
                            Some(Indicators {
                                poverty: p[i],
                                canopy: q[i],
                            }),
                        )
                    })
                    .collect(),
            }
        })
        .collect();

    let mut implied_delta = BTreeMap::new();
    let mut implied_theta = BTreeMap::new();
    for outcome in [Outcome::Poverty, Outcome::Canopy] {
        let d = cfg.delta_true.get(outcome);
        implied_delta.insert(
            outcome,
            Approach::ALL.into_iter().map(|a| (a, cfg.bias(a).attenuation * d)).collect(),
        );
        implied_theta.insert(
            outcome,
            Approach::ALL
                .into_iter()
                .filter(|&a| a != Approach::Authoritative)
                .map(|a| (a, (cfg.bias(a).attenuation - 1.0) * d))
                .collect(),
        );
    }

    Ok(SimData {
        records,
        geometry,
        weights,
        truth: Truth {
            config: cfg.clone(),
            n,
            n_treated,
            implied_delta,
            implied_theta,
            calibration_shifts: BTreeMap::new(),
        },
    })
}

/// Stacked-regression coefficients a calibrated data set should reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackTargets {
    pub outcome: Outcome,
    pub sample: Sample,
    pub spec: StackSpec,
    pub delta0: f64,
    pub theta: BTreeMap<Approach, f64>,
}

/// Adjusts the treated cells of each approach by a common shift until the
/// stacked fit (authoritative baseline, no covariates) on the standardized
/// panel reproduces `targets` to within `tol`.
pub fn calibrate(
    data: &mut SimData,
    targets: &StackTargets,
    options: PanelOptions,
    tol: f64,
) -> Result<stackinf::StackedFit, SimError> {
    const ROUNDS: usize = 60;
    let treated: Vec<usize> = (0..data.records.len())
        .filter(|&i| data.records[i].holc_group == HolcGroup::Redlined)
        .collect();
    let mut shifts: BTreeMap<Approach, f64> = Approach::ALL.into_iter().map(|a| (a, 0.0)).collect();
    for _ in 0..ROUNDS {
        let panel = aggregate::build_panel_from_records(&data.records, targets.sample, options)?;
        let rows = stackinf::stack_panel(&panel, targets.outcome, &[]);
        let fit = stackinf::fit_stacked(&rows, targets.spec, Approach::Authoritative, Some(&data.weights))?;
        let mut worst = (fit.delta0 - targets.delta0).abs();
        for (a, t) in &targets.theta {
            worst = worst.max((fit.theta[a] - t).abs());
        }
        if worst <= tol {
            data.truth
                .calibration_shifts
                .insert(targets.outcome, shifts.into_iter().filter(|(_, s)| *s != 0.0).collect());
            return Ok(fit);
        }
        for a in Approach::ALL {
            let want = if a == Approach::Authoritative {
                targets.delta0
            } else {
                targets.delta0 + targets.theta.get(&a).copied().unwrap_or(fit.theta[&a])
            };
            let vals: Vec<f64> = panel
                .rows
                .iter()
                .filter(|r| r.approach == a)
                .map(|r| r.outcome_raw(targets.outcome))
                .collect();
            let sd = crate::stats::sd(&vals, options.divisor.ddof());
            let step = (want - fit.totals[&a]) * sd;
            *shifts.get_mut(&a).expect("every approach") += step;
            for &i in &treated {
                *data.value_mut(i, a, targets.outcome) += step;
            }
        }
    }
    Err(SimError::Calibration(ROUNDS))
}

/// Raw input files equivalent to a simulated lattice, for exercising the
/// ingest → elicit → aggregate path offline.
#[derive(Debug, Clone)]
pub struct RawInputs {
    pub panoramas: Vec<PanoramaRecord>,
    pub authoritative: Vec<CbgRaw>,
    pub segmentation: Vec<SegmentationShares>,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Maps simulated values onto rates and shares: poverty and canopy pass
/// through a logistic link, each cell gets `panos_per_cbg` four-tile
/// panoramas captured in `year`, and every third panorama loses its last tile.
pub fn raw_inputs(data: &SimData, panos_per_cbg: usize, year: i32) -> RawInputs {
    let mut panoramas = Vec::new();
    let mut authoritative = Vec::new();
    let mut segmentation = Vec::new();
    let mut k = 0usize;
    for (i, r) in data.records.iter().enumerate() {
        let auth_p = data.value(i, Approach::Authoritative, Outcome::Poverty);
        let auth_c = data.value(i, Approach::Authoritative, Outcome::Canopy);
        authoritative.push(CbgRaw {
            cbg_id: r.cbg_id.clone(),
            acs_poverty: logistic(-1.5 + 0.8 * auth_p),
            geie_canopy: logistic(-1.0 + 0.8 * auth_c),
            covariates: r.covariates.clone(),
            holc_group: r.holc_group,
            zip_code: r.zip_code.clone(),
            geometry: data.geometry[&r.cbg_id].clone(),
        });
        let seg_p = data.value(i, Approach::Segmentation, Outcome::Poverty);
        let seg_c = data.value(i, Approach::Segmentation, Outcome::Canopy);
        for p in 0..panos_per_cbg {
            let pano_id = format!("{}p{p:02}", r.cbg_id);
            let drop_last = k % 3 == 2;
            k += 1;
            let tiles: Vec<TileRecord> = crate::ingest::HEADINGS
                .iter()
                .map(|&h| TileRecord {
                    heading: h,
                    valid: !(drop_last && h == 270),
                    image_ref: format!("sim/{pano_id}_{h:03}.jpg"),
                })
                .collect();
            let n_valid_tiles = tiles.iter().filter(|t| t.valid).count() as u32;
            panoramas.push(PanoramaRecord {
                pano_id: pano_id.clone(),
                cbg_id: r.cbg_id.clone(),
                capture_year: year,
                tiles,
                n_valid_tiles,
            });
            let canopy_share = 0.8 * logistic(-1.0 + 0.8 * seg_c);
            segmentation.push(SegmentationShares {
                pano_id,
                class_shares: [
                    ("vegetation".to_string(), canopy_share),
                    ("road".to_string(), 0.1),
                    ("sky".to_string(), 0.1),
                ]
                .into_iter()
                .collect(),
                canopy_share,
                poverty_proxy: logistic(-1.5 + 0.8 * seg_p),
            });
        }
    }
    segmentation.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
    RawInputs {
        panoramas,
        authoritative,
        segmentation,
    }
}

/// Writes `manifest.csv`, `acs.csv`, `geometry.geojson` and `segmentation.csv`.
pub fn write_raw_inputs(inputs: &RawInputs, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let io = |e: crate::ingest::IngestError| SimError::Io(std::io::Error::other(e.to_string()));
    crate::ingest::write_manifest(&inputs.panoramas, &dir.join("manifest.csv")).map_err(io)?;
    crate::ingest::write_authoritative(&inputs.authoritative, &dir.join("acs.csv"), &dir.join("geometry.geojson"))
        .map_err(io)?;
    crate::ingest::write_segmentation(&inputs.segmentation, &dir.join("segmentation.csv")).map_err(io)?;
    Ok(())
}

/// Deterministic per-replication seed.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::econ::{self, Design, SeRequest};
    use crate::stackinf::StackedRow;
    use crate::stats;
    use nalgebra::DVector;

    #[test]
    fn independent_noise_has_no_spatial_correlation() {
        let cfg = DgpConfig {
            rho_true: 0.0,
            delta_true: Effects {
                poverty: 0.0,
                canopy: 0.0,
            },
            n_covariates: 0,
            ..DgpConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let y: Vec<f64> = (0..data.records.len())
            .map(|i| data.value(i, Approach::Authoritative, Outcome::Poverty))
            .collect();
        let wy = data.weights.lag(&y).unwrap();
        assert!(stats::correlation(&y, &wy).abs() < 0.1);
    }

    #[test]
    fn noiseless_ols_recovers_delta() {
        let cfg = DgpConfig {
            rho_true: 0.0,
            noise_sd: 0.0,
            rows: 10,
            cols: 10,
            ..DgpConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let n = data.records.len();
        let mut cols = vec![
            ("const".to_string(), vec![1.0; n]),
            (
                econ::TREATMENT.to_string(),
                data.records.iter().map(|r| (r.holc_group == HolcGroup::Redlined) as u8 as f64).collect(),
            ),
        ];
        for name in cfg.covariate_names() {
            cols.push((name.clone(), data.records.iter().map(|r| r.covariates[&name].unwrap()).collect()));
        }
        let y = DVector::from_fn(n, |i, _| data.value(i, Approach::Authoritative, Outcome::Poverty));
        let fit = econ::fit_ols(&y, &Design::from_columns(cols), SeRequest::Classical).unwrap();
        assert!((fit.delta() - cfg.delta_true.poverty).abs() < 1e-10);
    }

    #[test]
    fn lag_solution_satisfies_system() {
        let cfg = DgpConfig {
            rows: 8,
            cols: 8,
            rho_true: 0.9,
            ..DgpConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let rhs: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = solve_lag(&data.weights, 0.9, &rhs).unwrap();
        let wy = data.weights.lag(&y).unwrap();
        for i in 0..64 {
            assert!((y[i] - 0.9 * wy[i] - rhs[i]).abs() < 1e-12);
            assert!(y[i].is_finite());
        }
        assert!(matches!(solve_lag(&data.weights, 1.0, &rhs), Err(SimError::SingularSystem(_))));
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let cfg = DgpConfig {
            rows: 6,
            cols: 6,
            ..DgpConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        let c = generate(&DgpConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn zips_are_contiguous_blocks() {
        let data = generate(&DgpConfig {
            rows: 10,
            cols: 10,
            zip_block: 5,
            ..DgpConfig::default()
        })
        .unwrap();
        let zips: std::collections::BTreeSet<&str> = data.records.iter().map(|r| r.zip_code.as_str()).collect();
        assert_eq!(zips.len(), 4);
        assert_eq!(data.records[0].zip_code, data.records[44].zip_code);
        assert_ne!(data.records[0].zip_code, data.records[5].zip_code);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            DgpConfig { rho_true: 1.0, ..DgpConfig::default() },
            DgpConfig { treatment_share: 0.0, ..DgpConfig::default() },
            DgpConfig { rows: 2, ..DgpConfig::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(SimError::Config(_))));
        }
        let text = r#"{"rows": 5, "cols": 5, "bogus": 1}"#;
        assert!(serde_json::from_str::<DgpConfig>(text).is_err());
    }

    fn raw_rows(data: &SimData, outcome: Outcome) -> Vec<StackedRow> {
        let mut rows = Vec::new();
        for (i, r) in data.records.iter().enumerate() {
            for a in Approach::ALL {
                rows.push(StackedRow {
                    cbg_id: r.cbg_id.clone(),
                    approach: a,
                    y: data.value(i, a, outcome),
                    redlined: r.holc_group == HolcGroup::Redlined,
                    covariates: BTreeMap::new(),
                    zip_code: r.zip_code.clone(),
                });
            }
        }
        rows
    }

    #[test]
    fn attenuated_approach_shows_in_theta() {
        let cfg = DgpConfig {
            rho_true: 0.0,
            n_covariates: 0,
            delta_true: Effects {
                poverty: 1.0,
                canopy: -0.5,
            },
            ..DgpConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let rows = raw_rows(&data, Outcome::Poverty);
        let fit = stackinf::fit_stacked(&rows, StackSpec::ZipFe, Approach::Authoritative, None).unwrap();
        let dist = stackinf::cluster_bootstrap(
            &rows,
            StackSpec::ZipFe,
            Approach::Authoritative,
            None,
            199,
            3,
            &stackinf::PairsResampler,
        )
        .unwrap();
        let draws = dist.theta_draws(Approach::Segmentation);
        let se = stats::sd(&draws, 1);
        let expected = (0.4 - 1.0) * 1.0;
        assert!((fit.theta[&Approach::Segmentation] - expected).abs() < 2.0 * se, "{fit:?}");
    }

    #[test]
    fn calibration_hits_targets() {
        let cfg = DgpConfig {
            rows: 10,
            cols: 10,
            ideal_share: 1.0,
            n_covariates: 0,
            ..DgpConfig::default()
        };
        let mut data = generate(&cfg).unwrap();
        let targets = StackTargets {
            outcome: Outcome::Poverty,
            sample: Sample::VsIdeal,
            spec: StackSpec::ZipFe,
            delta0: 0.5,
            theta: [(Approach::Mllm, -0.1), (Approach::Segmentation, -0.7)].into_iter().collect(),
        };
        let fit = calibrate(&mut data, &targets, PanelOptions::default(), 1e-8).unwrap();
        assert!((fit.delta0 - 0.5).abs() < 1e-8);
        assert!((fit.theta[&Approach::Segmentation] + 0.7).abs() < 1e-8);
        assert!(data.truth.calibration_shifts.contains_key(&Outcome::Poverty));
    }

    #[test]
    fn replication_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..100).map(|r| replication_seed(9, r)).collect();
        assert_eq!(s.len(), 100);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn outcomes_finite_for_feasible_rho(rho in -0.9..=0.9f64, seed in any::<u64>()) {
                let data = generate(&DgpConfig { rows: 6, cols: 6, rho_true: rho, seed, ..DgpConfig::default() }).unwrap();
                for i in 0..data.records.len() {
                    for a in Approach::ALL {
                        for o in [Outcome::Poverty, Outcome::Canopy] {
                            prop_assert!(data.value(i, a, o).is_finite());
                        }
                    }
                }
            }
        }
    }
}
