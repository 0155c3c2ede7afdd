//! Tile → block-group aggregation, standardization and analysis panels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elicit::ElicitationResult;
use crate::format::exact;
use crate::ingest::{CbgRaw, PanoramaRecord, SegmentationShares};
use crate::stats;
use crate::types::{Approach, HolcGroup, Outcome, Sample};

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error("no values to average")]
    EmptyInput,
    #[error("standardization needs at least two values with non-zero spread")]
    DegenerateVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("panel csv line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weighted mean `Σ wᵢvᵢ / Σ wᵢ` over entries with a value and positive weight.
pub fn cbg_mean(values: &[(Option<f64>, u32)]) -> Result<f64, AggregateError> {
    let (num, den) = values
        .iter()
        .filter_map(|(v, w)| v.filter(|_| *w > 0).map(|v| (v * *w as f64, *w as f64)))
        .fold((0.0, 0.0), |(a, b), (x, w)| (a + x, b + w));
    if den == 0.0 {
        return Err(AggregateError::EmptyInput);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdDivisor {
    /// n − 1
    #[default]
    Sample,
    /// n
    Population,
}

impl SdDivisor {
    pub fn ddof(&self) -> usize {
        match self {
            SdDivisor::Sample => 1,
            SdDivisor::Population => 0,
        }
    }
}

/// z-scores `(v − mean)/sd`.
pub fn standardize(values: &[f64], divisor: SdDivisor) -> Result<Vec<f64>, AggregateError> {
    if values.len() < 2 {
        return Err(AggregateError::DegenerateVariance);
    }
    let m = stats::mean(values);
    let sd = stats::sd(values, divisor.ddof());
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(AggregateError::DegenerateVariance);
    }
    Ok(values.iter().map(|v| (v - m) / sd).collect())
}

pub fn sustainability_index(canopy_z: &[f64], poverty_z: &[f64]) -> Result<Vec<f64>, AggregateError> {
    if canopy_z.len() != poverty_z.len() {
        return Err(AggregateError::LengthMismatch(canopy_z.len(), poverty_z.len()));
    }
    Ok(canopy_z.iter().zip(poverty_z).map(|(c, p)| c - p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizationScope {
    /// z-scores over the sample that is actually regressed.
    #[default]
    EstimationSample,
    /// z-scores over every complete block group, then subset.
    FullSample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelOptions {
    #[serde(default)]
    pub scope: StandardizationScope,
    #[serde(default)]
    pub divisor: SdDivisor,
}

/// Poverty and canopy values of one block group under one approach.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Indicators {
    pub poverty: f64,
    pub canopy: f64,
}

/// Everything known about one block group before sample selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CbgRecord {
    pub cbg_id: String,
    pub holc_group: HolcGroup,
    pub zip_code: String,
    pub covariates: BTreeMap<String, Option<f64>>,
    pub weight_images: u32,
    pub values: BTreeMap<Approach, Option<Indicators>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub cbg_id: String,
    pub approach: Approach,
    pub holc_group: HolcGroup,
    pub zip_code: String,
    pub weight_images: u32,
    pub poverty_raw: f64,
    pub canopy_raw: f64,
    pub poverty_z: f64,
    pub canopy_z: f64,
    pub covariates: BTreeMap<String, Option<f64>>,
}

impl PanelRow {
    /// Sustainability index, always recomputed from the two z-scores.
    pub fn si_z(&self) -> f64 {
        self.canopy_z - self.poverty_z
    }

    pub fn outcome_z(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Poverty => self.poverty_z,
            Outcome::Canopy => self.canopy_z,
            Outcome::Si => self.si_z(),
        }
    }

    /// Raw-scale value; SI has no raw scale and returns its z form.
    pub fn outcome_raw(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Poverty => self.poverty_raw,
            Outcome::Canopy => self.canopy_raw,
            Outcome::Si => self.si_z(),
        }
    }
}

/// One row per (block group, approach) in a single analysis sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub sample: Sample,
    pub rows: Vec<PanelRow>,
    /// Block groups dropped by the common-sample rule, with the approach
    /// that lacked a value.
    pub excluded: Vec<(String, Approach)>,
    pub options: PanelOptions,
}

impl Panel {
    pub fn cbg_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.cbg_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn rows_for(&self, approach: Approach) -> impl Iterator<Item = &PanelRow> {
        self.rows.iter().filter(move |r| r.approach == approach)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| r.covariates.keys().cloned().collect())
            .unwrap_or_default()
    }
}

/// Builds the panel for `sample`, applying the common-sample rule (a block
/// group missing any approach is dropped from all of them) and z-scoring each
/// approach's poverty and canopy values.
pub fn build_panel_from_records(
    records: &[CbgRecord],
    sample: Sample,
    options: PanelOptions,
) -> Result<Panel, AggregateError> {
    let mut excluded = Vec::new();
    let complete: Vec<&CbgRecord> = records
        .iter()
        .filter(|r| {
            let missing: Vec<Approach> = Approach::ALL
                .into_iter()
                .filter(|a| r.values.get(a).copied().flatten().is_none())
                .collect();
            for a in &missing {
                excluded.push((r.cbg_id.clone(), *a));
            }
            missing.is_empty()
        })
        .collect();
    if !excluded.is_empty() {
        log::info!(
            "common-sample rule dropped {} block group(s)",
            excluded.iter().map(|e| &e.0).collect::<BTreeSet<_>>().len()
        );
    }
    let mut in_sample: Vec<&CbgRecord> =
        complete.iter().copied().filter(|r| sample.contains(r.holc_group)).collect();
    in_sample.sort_by(|a, b| a.cbg_id.cmp(&b.cbg_id));
    let basis: Vec<&CbgRecord> = match options.scope {
        StandardizationScope::EstimationSample => in_sample.clone(),
        StandardizationScope::FullSample => complete.clone(),
    };

    let mut z: BTreeMap<(Approach, usize), Vec<f64>> = BTreeMap::new();
    for a in Approach::ALL {
        for (slot, pick) in [
            (0usize, (|i: Indicators| i.poverty) as fn(Indicators) -> f64),
            (1, |i: Indicators| i.canopy),
        ] {
            let ref_vals: Vec<f64> = basis.iter().map(|r| pick(r.values[&a].unwrap())).collect();
            if ref_vals.len() < 2 {
                return Err(AggregateError::DegenerateVariance);
            }
            let m = stats::mean(&ref_vals);
            let sd = stats::sd(&ref_vals, options.divisor.ddof());
            if !(sd > 0.0) {
                return Err(AggregateError::DegenerateVariance);
            }
            let zs = in_sample
                .iter()
                .map(|r| (pick(r.values[&a].unwrap()) - m) / sd)
                .collect();
            z.insert((a, slot), zs);
        }
    }

    let mut rows = Vec::with_capacity(in_sample.len() * 3);
    for (i, r) in in_sample.iter().enumerate() {
        for a in Approach::ALL {
            let v = r.values[&a].unwrap();
            rows.push(PanelRow {
                cbg_id: r.cbg_id.clone(),
                approach: a,
                holc_group: r.holc_group,
                zip_code: r.zip_code.clone(),
                weight_images: r.weight_images,
                poverty_raw: v.poverty,
                canopy_raw: v.canopy,
                poverty_z: z[&(a, 0)][i],
                canopy_z: z[&(a, 1)][i],
                covariates: r.covariates.clone(),
            });
        }
    }
    Ok(Panel {
        sample,
        rows,
        excluded,
        options,
    })
}

/// Per-panorama mean of tile consensus values; weight = contributing tiles.
fn panorama_means(
    results: &[ElicitationResult],
    pick: impl Fn(&ElicitationResult) -> Option<f64>,
) -> BTreeMap<String, (f64, u32)> {
    let mut acc: BTreeMap<String, (f64, u32)> = BTreeMap::new();
    for r in results {
        if let Some(v) = pick(r) {
            let e = acc.entry(r.pano_id.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

/// Block-group MLLM indicators from tile-level elicitation results.
pub fn mllm_indicators(
    panos: &[PanoramaRecord],
    results: &[ElicitationResult],
) -> BTreeMap<String, Indicators> {
    let pov = panorama_means(results, |r| r.consensus_poverty);
    let can = panorama_means(results, |r| r.consensus_canopy);
    let mut by_cbg: BTreeMap<&str, (Vec<(Option<f64>, u32)>, Vec<(Option<f64>, u32)>)> = BTreeMap::new();
    for p in panos {
        let e = by_cbg.entry(p.cbg_id.as_str()).or_default();
        if let Some((v, w)) = pov.get(&p.pano_id) {
            e.0.push((Some(*v), *w));
        }
        if let Some((v, w)) = can.get(&p.pano_id) {
            e.1.push((Some(*v), *w));
        }
    }
    by_cbg
        .into_iter()
        .filter_map(|(cbg, (p, c))| {
            Some((
                cbg.to_string(),
                Indicators {
                    poverty: cbg_mean(&p).ok()?,
                    canopy: cbg_mean(&c).ok()?,
                },
            ))
        })
        .collect()
}

/// Block-group segmentation indicators, weighting each panorama by its
/// valid-tile count.
pub fn segmentation_indicators(
    panos: &[PanoramaRecord],
    shares: &[SegmentationShares],
) -> BTreeMap<String, Indicators> {
    let by_pano: BTreeMap<&str, &SegmentationShares> =
        shares.iter().map(|s| (s.pano_id.as_str(), s)).collect();
    let mut by_cbg: BTreeMap<&str, (Vec<(Option<f64>, u32)>, Vec<(Option<f64>, u32)>)> = BTreeMap::new();
    for p in panos {
        if let Some(s) = by_pano.get(p.pano_id.as_str()) {
            let e = by_cbg.entry(p.cbg_id.as_str()).or_default();
            e.0.push((Some(s.poverty_proxy), p.n_valid_tiles));
            e.1.push((Some(s.canopy_share), p.n_valid_tiles));
        }
    }
    by_cbg
        .into_iter()
        .filter_map(|(cbg, (p, c))| {
            Some((
                cbg.to_string(),
                Indicators {
                    poverty: cbg_mean(&p).ok()?,
                    canopy: cbg_mean(&c).ok()?,
                },
            ))
        })
        .collect()
}

/// Inputs for [`build_panel`].
pub struct PanelInputs<'a> {
    pub raw: &'a [CbgRaw],
    pub mllm: &'a BTreeMap<String, Indicators>,
    pub segmentation: &'a BTreeMap<String, Indicators>,
    /// Valid-image counts of the block groups that passed the image filter.
    pub kept: &'a BTreeMap<String, u32>,
}

/// Joins authoritative rows with both street-view approaches for the kept
/// block groups.
pub fn assemble(inputs: &PanelInputs<'_>) -> Vec<CbgRecord> {
    inputs
        .raw
        .iter()
        .filter_map(|r| {
            let images = *inputs.kept.get(&r.cbg_id)?;
            let mut values = BTreeMap::new();
            values.insert(
                Approach::Authoritative,
                Some(Indicators {
                    poverty: r.acs_poverty,
                    canopy: r.geie_canopy,
                }),
            );
            values.insert(Approach::Mllm, inputs.mllm.get(&r.cbg_id).copied());
            values.insert(Approach::Segmentation, inputs.segmentation.get(&r.cbg_id).copied());
            Some(CbgRecord {
                cbg_id: r.cbg_id.clone(),
                holc_group: r.holc_group,
                zip_code: r.zip_code.clone(),
                covariates: r.covariates.clone(),
                weight_images: images,
                values,
            })
        })
        .collect()
}

pub fn build_panel(
    inputs: &PanelInputs<'_>,
    sample: Sample,
    options: PanelOptions,
) -> Result<Panel, AggregateError> {
    build_panel_from_records(&assemble(inputs), sample, options)
}

const PANEL_FIXED: [&str; 11] = [
    "sample",
    "cbg_id",
    "approach",
    "holc_group",
    "zip_code",
    "weight_images",
    "poverty_raw",
    "canopy_raw",
    "poverty_z",
    "canopy_z",
    "si_z",
];

/// Writes one or more panels to a single CSV (one row per sample × cbg × approach).
pub fn write_panels_csv(panels: &[&Panel], path: &Path) -> Result<(), AggregateError> {
    let covs: BTreeSet<String> = panels.iter().flat_map(|p| p.covariate_names()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = PANEL_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(covs.iter().cloned());
    w.write_record(&header)?;
    for p in panels {
        for r in &p.rows {
            let mut rec = vec![
                p.sample.to_string(),
                r.cbg_id.clone(),
                r.approach.to_string(),
                r.holc_group.to_string(),
                r.zip_code.clone(),
                r.weight_images.to_string(),
                exact(r.poverty_raw),
                exact(r.canopy_raw),
                exact(r.poverty_z),
                exact(r.canopy_z),
                exact(r.si_z()),
            ];
            for c in &covs {
                rec.push(r.covariates.get(c).copied().flatten().map(exact).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads panels written by [`write_panels_csv`]. Exclusion lists and options
/// are not part of the CSV; options come back as defaults.
pub fn read_panels_csv(path: &Path) -> Result<BTreeMap<Sample, Panel>, AggregateError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header.len() < PANEL_FIXED.len() || header[..PANEL_FIXED.len()] != PANEL_FIXED {
        return Err(AggregateError::Malformed {
            line: 1,
            reason: "unexpected header".into(),
        });
    }
    let covs = &header[PANEL_FIXED.len()..];
    let mut out: BTreeMap<Sample, Panel> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let bad = |reason: String| AggregateError::Malformed { line, reason };
        let num = |i: usize| -> Result<f64, AggregateError> {
            rec[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", PANEL_FIXED[i])))
        };
        let sample: Sample = rec[0].parse().map_err(|e| bad(format!("{e}")))?;
        let row = PanelRow {
            cbg_id: rec[1].to_string(),
            approach: rec[2].parse().map_err(|e| bad(format!("{e}")))?,
            holc_group: rec[3].parse().map_err(|e| bad(format!("{e}")))?,
            zip_code: rec[4].to_string(),
            weight_images: rec[5].parse().map_err(|e| bad(format!("weight_images: {e}")))?,
            poverty_raw: num(6)?,
            canopy_raw: num(7)?,
            poverty_z: num(8)?,
            canopy_z: num(9)?,
            covariates: covs
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let cell = &rec[PANEL_FIXED.len() + j];
                    let v = if cell.is_empty() {
                        None
                    } else {
                        Some(cell.parse::<f64>().map_err(|e| bad(format!("{name}: {e}")))?)
                    };
                    Ok((name.clone(), v))
                })
                .collect::<Result<_, AggregateError>>()?,
        };
        out.entry(sample)
            .or_insert_with(|| Panel {
                sample,
                rows: Vec::new(),
                excluded: Vec::new(),
                options: PanelOptions::default(),
            })
            .rows
            .push(row);
    }
    Ok(out)
}

/// Contents of `panel_meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelMeta {
    pub standardization_scope: StandardizationScope,
    pub sd_divisor: SdDivisor,
    pub samples: BTreeMap<String, SampleMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub n_cbgs: usize,
    pub n_rows: usize,
    pub by_group: BTreeMap<String, usize>,
    pub excluded: Vec<String>,
}

pub fn panel_meta(panels: &[&Panel], options: PanelOptions) -> PanelMeta {
    let samples = panels
        .iter()
        .map(|p| {
            let mut by_group = BTreeMap::new();
            for r in p.rows_for(Approach::Authoritative) {
                *by_group.entry(r.holc_group.to_string()).or_insert(0) += 1;
            }
            let excluded: BTreeSet<String> = p.excluded.iter().map(|e| format!("{}:{}", e.0, e.1)).collect();
            (
                p.sample.to_string(),
                SampleMeta {
                    n_cbgs: p.cbg_ids().len(),
                    n_rows: p.rows.len(),
                    by_group,
                    excluded: excluded.into_iter().collect(),
                },
            )
        })
        .collect();
    PanelMeta {
        standardization_scope: options.scope,
        sd_divisor: options.divisor,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weighted_mean_examples() {
        let v = cbg_mean(&[(Some(0.2), 4), (Some(0.5), 2)]).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert_eq!(cbg_mean(&[(Some(0.25), 4)]).unwrap(), 0.25);
        assert!((cbg_mean(&[(Some(0.1), 1), (Some(0.3), 1)]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(cbg_mean(&[(None, 3)]), Err(AggregateError::EmptyInput)));
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0, 2.0, 3.0], SdDivisor::Sample).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(matches!(standardize(&[4.0; 5], SdDivisor::Sample), Err(AggregateError::DegenerateVariance)));
        let z = standardize(&[0.3, 1.7, -2.0, 0.9], SdDivisor::Sample).unwrap();
        let zz = standardize(&z, SdDivisor::Sample).unwrap();
        for (a, b) in z.iter().zip(&zz) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn si_examples() {
        assert_eq!(sustainability_index(&[1.0, 0.0, -1.0], &[-1.0, 0.0, 1.0]).unwrap(), vec![2.0, 0.0, -2.0]);
        assert_eq!(sustainability_index(&[0.0; 3], &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(matches!(sustainability_index(&[0.0], &[]), Err(AggregateError::LengthMismatch(1, 0))));
    }

    fn record(id: &str, group: HolcGroup, seed: f64, seg: Option<f64>) -> CbgRecord {
        let mut values = BTreeMap::new();
        values.insert(Approach::Authoritative, Some(Indicators { poverty: seed, canopy: 1.0 - seed * seed }));
        values.insert(Approach::Mllm, Some(Indicators { poverty: seed * 0.5 + 0.1, canopy: seed.sin() }));
        values.insert(Approach::Segmentation, seg.map(|s| Indicators { poverty: s, canopy: s.cos() }));
        CbgRecord {
            cbg_id: id.into(),
            holc_group: group,
            zip_code: "85001".into(),
            covariates: BTreeMap::new(),
            weight_images: 12,
            values,
        }
    }

    #[test]
    fn common_sample_and_filter() {
        let recs = vec![
            record("a", HolcGroup::Redlined, 0.1, Some(0.3)),
            record("b", HolcGroup::Ideal, 0.4, Some(0.2)),
            record("c", HolcGroup::Ideal, 0.7, None),
            record("d", HolcGroup::StableDeclining, 0.2, Some(0.9)),
            record("e", HolcGroup::Ideal, 0.9, Some(0.5)),
        ];
        let p = build_panel_from_records(&recs, Sample::VsIdeal, PanelOptions::default()).unwrap();
        assert_eq!(p.cbg_ids(), vec!["a", "b", "e"]);
        assert_eq!(p.rows.len(), 9);
        assert_eq!(p.excluded, vec![("c".to_string(), Approach::Segmentation)]);
        for a in Approach::ALL {
            let z: Vec<f64> = p.rows_for(a).map(|r| r.poverty_z).collect();
            assert!(stats::mean(&z).abs() < 1e-12);
            assert!((stats::sd(&z, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn panel_csv_roundtrip() {
        let recs: Vec<CbgRecord> = (0..6)
            .map(|i| {
                let mut r = record(&format!("c{i}"), if i % 2 == 0 { HolcGroup::Redlined } else { HolcGroup::Ideal }, 0.1 * i as f64 + 0.05, Some(0.3 + 0.01 * i as f64));
                r.covariates.insert("x".into(), if i == 3 { None } else { Some(i as f64 / 7.0) });
                r
            })
            .collect();
        let p = build_panel_from_records(&recs, Sample::VsIdeal, PanelOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panels_csv(&[&p], &path).unwrap();
        let back = read_panels_csv(&path).unwrap();
        assert_eq!(back[&Sample::VsIdeal].rows, p.rows);
    }

    proptest! {
        #[test]
        fn standardize_location_scale(v in prop::collection::vec(-100.0f64..100.0, 3..30), a in 0.01f64..50.0, b in -10.0f64..10.0) {
            prop_assume!(stats::sd(&v, 1) > 1e-6);
            let z1 = standardize(&v, SdDivisor::Sample).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let z2 = standardize(&moved, SdDivisor::Sample).unwrap();
            for (p, q) in z1.iter().zip(&z2) {
                prop_assert!((p - q).abs() < 1e-8);
            }
        }

        #[test]
        fn weighted_mean_is_bounded(entries in prop::collection::vec((0.0f64..1.0, 1u32..8), 1..20)) {
            let vals: Vec<(Option<f64>, u32)> = entries.iter().map(|(v, w)| (Some(*v), *w)).collect();
            let m = cbg_mean(&vals).unwrap();
            let lo = entries.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
            let hi = entries.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }

        #[test]
        fn si_antisymmetry(c in prop::collection::vec(-3.0f64..3.0, 1..20)) {
            let p: Vec<f64> = c.iter().map(|x| x * 0.5 - 0.2).collect();
            let a = sustainability_index(&c, &p).unwrap();
            let b = sustainability_index(&p, &c).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
