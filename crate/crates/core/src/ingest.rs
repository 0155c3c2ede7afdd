//! Readers and canonical writers for image manifests, authoritative block-group
//! data, segmentation shares and geometry.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use crate::format::exact;
use crate::spatial::{self, Geometry, SpatialError};
use crate::types::HolcGroup;

pub const HEADINGS: [u16; 4] = [0, 90, 180, 270];
pub const DEFAULT_TARGET_YEAR: i32 = 2023;
pub const DEFAULT_MIN_IMAGES: u32 = 10;
const SHARE_SUM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{file} line {line}: {reason}")]
    MalformedRow { file: String, line: usize, reason: String },
    #[error("duplicate tile: panorama {pano_id} heading {heading}")]
    DuplicateTile { pano_id: String, heading: u16 },
    #[error("no geometry for block group {0}")]
    MissingGeometry(String),
    #[error("{field} = {value} is outside [0, 1]")]
    OutOfRangeFraction { field: String, value: f64 },
    #[error("class shares of panorama {pano_id} sum to {sum}")]
    ShareSumExceeded { pano_id: String, sum: f64 },
    #[error("segmentation row for panorama {0} that is not in the manifest")]
    OrphanPanorama(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("no canopy value for block group {0}")]
    MissingCanopy(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub heading: u16,
    pub valid: bool,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanoramaRecord {
    pub pano_id: String,
    pub cbg_id: String,
    pub capture_year: i32,
    /// Sorted by heading.
    pub tiles: Vec<TileRecord>,
    pub n_valid_tiles: u32,
}

impl PanoramaRecord {
    pub fn valid_tiles(&self) -> impl Iterator<Item = &TileRecord> {
        self.tiles.iter().filter(|t| t.valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbgRaw {
    pub cbg_id: String,
    pub acs_poverty: f64,
    pub geie_canopy: f64,
    pub covariates: BTreeMap<String, Option<f64>>,
    pub holc_group: HolcGroup,
    pub zip_code: String,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationShares {
    pub pano_id: String,
    pub class_shares: BTreeMap<String, f64>,
    pub canopy_share: f64,
    pub poverty_proxy: f64,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "t" | "yes" => Some(true),
        "false" | "0" | "f" | "no" => Some(false),
        _ => None,
    }
}

struct Columns {
    file: String,
    index: BTreeMap<String, usize>,
}

impl Columns {
    fn new(file: &str, header: &csv::StringRecord, required: &[&str]) -> Result<Self, IngestError> {
        let index: BTreeMap<String, usize> =
            header.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        for r in required {
            if !index.contains_key(*r) {
                return Err(IngestError::MalformedRow {
                    file: file.into(),
                    line: 1,
                    reason: format!("missing column `{r}`"),
                });
            }
        }
        Ok(Columns { file: file.into(), index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> &'r str {
        self.index.get(name).and_then(|&i| rec.get(i)).unwrap_or("").trim()
    }

    fn bad(&self, line: usize, reason: impl Into<String>) -> IngestError {
        IngestError::MalformedRow {
            file: self.file.clone(),
            line,
            reason: reason.into(),
        }
    }

    fn num(&self, rec: &csv::StringRecord, name: &str, line: usize) -> Result<f64, IngestError> {
        let s = self.get(rec, name);
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.bad(line, format!("{name}: cannot parse `{s}`")))
    }
}

fn line_of(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(fallback)
}

/// Parses a tile manifest, keeping only rows captured in `target_year`
/// (all rows when `None`). Panoramas come back sorted by id.
pub fn parse_manifest<R: Read>(
    reader: R,
    name: &str,
    target_year: Option<i32>,
) -> Result<Vec<PanoramaRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = Columns::new(
        name,
        rdr.headers()?,
        &["pano_id", "cbg_id", "year", "heading", "valid", "image_ref"],
    )?;
    let mut panos: BTreeMap<String, PanoramaRecord> = BTreeMap::new();
    let mut off_year = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| cols.bad(k + 2, e.to_string()))?;
        let line = line_of(&rec, k + 2);
        if rec.len() != cols.index.len() {
            return Err(cols.bad(line, format!("expected {} fields, found {}", cols.index.len(), rec.len())));
        }
        let pano_id = cols.get(&rec, "pano_id");
        let cbg_id = cols.get(&rec, "cbg_id");
        if pano_id.is_empty() || cbg_id.is_empty() {
            return Err(cols.bad(line, "empty pano_id or cbg_id"));
        }
        let year: i32 = cols
            .get(&rec, "year")
            .parse()
            .map_err(|_| cols.bad(line, "year is not an integer"))?;
        let heading: u16 = cols
            .get(&rec, "heading")
            .parse()
            .ok()
            .filter(|h| HEADINGS.contains(h))
            .ok_or_else(|| cols.bad(line, "heading must be one of 0, 90, 180, 270"))?;
        let valid = parse_bool(cols.get(&rec, "valid")).ok_or_else(|| cols.bad(line, "valid is not a boolean"))?;
        if target_year.is_some_and(|t| t != year) {
            off_year += 1;
            continue;
        }
        let entry = panos.entry(pano_id.to_string()).or_insert_with(|| PanoramaRecord {
            pano_id: pano_id.to_string(),
            cbg_id: cbg_id.to_string(),
            capture_year: year,
            tiles: Vec::new(),
            n_valid_tiles: 0,
        });
        if entry.cbg_id != cbg_id || entry.capture_year != year {
            return Err(cols.bad(line, format!("panorama {pano_id} has inconsistent cbg_id or year")));
        }
        if entry.tiles.iter().any(|t| t.heading == heading) {
            return Err(IngestError::DuplicateTile {
                pano_id: pano_id.to_string(),
                heading,
            });
        }
        entry.tiles.push(TileRecord {
            heading,
            valid,
            image_ref: cols.get(&rec, "image_ref").to_string(),
        });
        entry.n_valid_tiles += valid as u32;
    }
    if off_year > 0 {
        log::info!("{name}: dropped {off_year} tile row(s) outside the target year");
    }
    let mut out: Vec<PanoramaRecord> = panos.into_values().collect();
    for p in &mut out {
        p.tiles.sort_by_key(|t| t.heading);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path, target_year: Option<i32>) -> Result<Vec<PanoramaRecord>, IngestError> {
    let f = std::fs::File::open(path)?;
    parse_manifest(f, &path.display().to_string(), target_year)
}

pub fn write_manifest(panos: &[PanoramaRecord], path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pano_id", "cbg_id", "year", "heading", "valid", "image_ref"])?;
    for p in panos {
        for t in &p.tiles {
            w.write_record([
                p.pano_id.as_str(),
                p.cbg_id.as_str(),
                &p.capture_year.to_string(),
                &t.heading.to_string(),
                if t.valid { "true" } else { "false" },
                t.image_ref.as_str(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Valid-tile totals per block group.
pub fn valid_images_by_cbg(panos: &[PanoramaRecord]) -> BTreeMap<String, u32> {
    let mut out = BTreeMap::new();
    for p in panos {
        *out.entry(p.cbg_id.clone()).or_insert(0) += p.n_valid_tiles;
    }
    out
}

/// Splits block groups by whether they have at least `min_images` valid tiles.
pub fn filter_cbgs(panos: &[PanoramaRecord], min_images: u32) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut kept = BTreeSet::new();
    let mut dropped = BTreeSet::new();
    for (cbg, n) in valid_images_by_cbg(panos) {
        if n >= min_images {
            kept.insert(cbg);
        } else {
            dropped.insert(cbg);
        }
    }
    (kept, dropped)
}

fn check_fraction(field: &str, value: f64) -> Result<f64, IngestError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(IngestError::OutOfRangeFraction {
            field: field.into(),
            value,
        })
    }
}

const ACS_FIXED: [&str; 5] = ["cbg_id", "acs_poverty", "geie_canopy", "zip_code", "holc_group"];

/// Reads authoritative block-group data. Poverty, zip, group and covariates
/// come from `acs`; canopy comes from `geie` if given, otherwise from a
/// `geie_canopy` column in `acs`. Every other column is a covariate; empty
/// cells are nulls.
pub fn parse_authoritative<R: Read, G: Read>(
    acs: R,
    geie: Option<G>,
    geometry: &BTreeMap<String, Geometry>,
) -> Result<Vec<CbgRaw>, IngestError> {
    let mut canopy: BTreeMap<String, f64> = BTreeMap::new();
    if let Some(g) = geie {
        let mut rdr = csv::Reader::from_reader(g);
        let cols = Columns::new("geie", rdr.headers()?, &["cbg_id", "geie_canopy"])?;
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| cols.bad(k + 2, e.to_string()))?;
            let line = line_of(&rec, k + 2);
            let id = cols.get(&rec, "cbg_id").to_string();
            let v = check_fraction("geie_canopy", cols.num(&rec, "geie_canopy", line)?)?;
            if canopy.insert(id.clone(), v).is_some() {
                return Err(IngestError::DuplicateKey(id));
            }
        }
    }
    let external_canopy = !canopy.is_empty();

    let mut rdr = csv::Reader::from_reader(acs);
    let cols = Columns::new("acs", rdr.headers()?, &["cbg_id", "acs_poverty", "zip_code", "holc_group"])?;
    let covariate_cols: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .filter(|h| !ACS_FIXED.contains(&h.as_str()))
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| cols.bad(k + 2, e.to_string()))?;
        let line = line_of(&rec, k + 2);
        let cbg_id = cols.get(&rec, "cbg_id").to_string();
        if cbg_id.is_empty() {
            return Err(cols.bad(line, "empty cbg_id"));
        }
        if !seen.insert(cbg_id.clone()) {
            return Err(IngestError::DuplicateKey(cbg_id));
        }
        let acs_poverty = check_fraction("acs_poverty", cols.num(&rec, "acs_poverty", line)?)?;
        let geie_canopy = if external_canopy {
            *canopy.get(&cbg_id).ok_or_else(|| IngestError::MissingCanopy(cbg_id.clone()))?
        } else if cols.index.contains_key("geie_canopy") {
            check_fraction("geie_canopy", cols.num(&rec, "geie_canopy", line)?)?
        } else {
            return Err(IngestError::MissingCanopy(cbg_id));
        };
        let holc_group: HolcGroup = cols
            .get(&rec, "holc_group")
            .parse()
            .map_err(|e| cols.bad(line, format!("{e}")))?;
        let mut covariates = BTreeMap::new();
        for c in &covariate_cols {
            let s = cols.get(&rec, c);
            let v = if s.is_empty() || s.eq_ignore_ascii_case("na") {
                None
            } else {
                Some(cols.num(&rec, c, line)?)
            };
            covariates.insert(c.clone(), v);
        }
        let geometry = geometry
            .get(&cbg_id)
            .cloned()
            .ok_or_else(|| IngestError::MissingGeometry(cbg_id.clone()))?;
        out.push(CbgRaw {
            zip_code: cols.get(&rec, "zip_code").to_string(),
            cbg_id,
            acs_poverty,
            geie_canopy,
            covariates,
            holc_group,
            geometry,
        });
    }
    out.sort_by(|a, b| a.cbg_id.cmp(&b.cbg_id));
    Ok(out)
}

pub fn load_authoritative(acs: &Path, geie: Option<&Path>, geo: &Path) -> Result<Vec<CbgRaw>, IngestError> {
    let geoms = spatial::read_geojson(geo)?;
    let acs_f = std::fs::File::open(acs)?;
    let geie_f = geie.map(std::fs::File::open).transpose()?;
    parse_authoritative(acs_f, geie_f, &geoms)
}

/// Canonical form: one CSV carrying canopy inline plus a GeoJSON sidecar.
pub fn write_authoritative(records: &[CbgRaw], csv_path: &Path, geo_path: &Path) -> Result<(), IngestError> {
    let covs: BTreeSet<&String> = records.iter().flat_map(|r| r.covariates.keys()).collect();
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<&str> = ACS_FIXED.to_vec();
    header.extend(covs.iter().map(|s| s.as_str()));
    w.write_record(&header)?;
    for r in records {
        let mut rec = vec![
            r.cbg_id.clone(),
            exact(r.acs_poverty),
            exact(r.geie_canopy),
            r.zip_code.clone(),
            r.holc_group.to_string(),
        ];
        for c in &covs {
            rec.push(r.covariates.get(*c).copied().flatten().map(exact).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let geoms: BTreeMap<String, Geometry> = records.iter().map(|r| (r.cbg_id.clone(), r.geometry.clone())).collect();
    spatial::write_geojson(geo_path, &geoms)?;
    Ok(())
}

const SEG_FIXED: [&str; 3] = ["pano_id", "canopy_share", "poverty_proxy"];

/// Reads per-panorama segmentation output. Every column beyond the fixed
/// three is a class share. Panoramas absent from `panos` are rejected.
pub fn parse_segmentation<R: Read>(reader: R, panos: &[PanoramaRecord]) -> Result<Vec<SegmentationShares>, IngestError> {
    let known: BTreeSet<&str> = panos.iter().map(|p| p.pano_id.as_str()).collect();
    let mut rdr = csv::Reader::from_reader(reader);
    let cols = Columns::new("segmentation", rdr.headers()?, &SEG_FIXED)?;
    let classes: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .filter(|h| !SEG_FIXED.contains(&h.as_str()))
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| cols.bad(k + 2, e.to_string()))?;
        let line = line_of(&rec, k + 2);
        let pano_id = cols.get(&rec, "pano_id").to_string();
        if !known.contains(pano_id.as_str()) {
            return Err(IngestError::OrphanPanorama(pano_id));
        }
        if !seen.insert(pano_id.clone()) {
            return Err(IngestError::DuplicateKey(pano_id));
        }
        let canopy_share = check_fraction("canopy_share", cols.num(&rec, "canopy_share", line)?)?;
        let poverty_proxy = cols.num(&rec, "poverty_proxy", line)?;
        let mut class_shares = BTreeMap::new();
        for c in &classes {
            if cols.get(&rec, c).is_empty() {
                continue;
            }
            class_shares.insert(c.clone(), check_fraction(c, cols.num(&rec, c, line)?)?);
        }
        let sum: f64 = class_shares.values().sum();
        if sum > 1.0 + SHARE_SUM_TOL {
            return Err(IngestError::ShareSumExceeded { pano_id, sum });
        }
        out.push(SegmentationShares {
            pano_id,
            class_shares,
            canopy_share,
            poverty_proxy,
        });
    }
    out.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
    Ok(out)
}

pub fn load_segmentation(path: &Path, panos: &[PanoramaRecord]) -> Result<Vec<SegmentationShares>, IngestError> {
    parse_segmentation(std::fs::File::open(path)?, panos)
}

pub fn write_segmentation(shares: &[SegmentationShares], path: &Path) -> Result<(), IngestError> {
    let classes: BTreeSet<&String> = shares.iter().flat_map(|s| s.class_shares.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = SEG_FIXED.to_vec();
    header.extend(classes.iter().map(|s| s.as_str()));
    w.write_record(&header)?;
    for s in shares {
        let mut rec = vec![s.pano_id.clone(), exact(s.canopy_share), exact(s.poverty_proxy)];
        for c in &classes {
            rec.push(s.class_shares.get(*c).map(|v| exact(*v)).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
