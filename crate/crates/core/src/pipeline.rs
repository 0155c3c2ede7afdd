//! Staged, resumable pipeline driven by a single JSON [`RunConfig`].
//!
//! Every stage reads its inputs from the output directory (or from the
//! configured raw inputs), writes into a private staging directory and
//! renames the finished files into place. `run_manifest.json` records the
//! configuration hash plus input and output hashes per stage; wall-clock
//! timings go to `audit/timings.log` so the manifest itself is reproducible.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/     normalized inputs, panel.csv, weights.json, truth.json
//! tables/   ladder, stacked, r2_ladder, quantile_grid, descriptives
//! figures/  SVG figures
//! audit/    prompt cache, elicitation failures, timings
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{self, Panel, PanelInputs, PanelOptions};
use crate::econ::{self, ModelSpec, SarSeChoice, Variant};
use crate::elicit::{self, EndpointClient, HttpEndpoint, MockEndpoint, MockProfile, PromptCache, PromptChainConfig};
use crate::format::{exact, sig6};
use crate::ingest;
use crate::plot::{self, DotInterval, ParityPoint};
use crate::quantfit::{self, DEFAULT_BOOTSTRAP, DEFAULT_TAUS};
use crate::simgen::{self, DgpConfig};
use crate::spatial::{self, WeightsMatrix, DEFAULT_SNAP_TOLERANCE};
use crate::stackinf::{self, LabelledDistribution, PairsResampler, StackSpec, Verdict};
use crate::stats;
use crate::types::{Approach, Comparison, HolcGroup, Outcome, Sample};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const PANEL_FILE: &str = "data/panel.csv";
pub const PANEL_META_FILE: &str = "data/panel_meta.json";
pub const WEIGHTS_FILE: &str = "data/weights.json";
pub const GEOMETRY_FILE: &str = "data/geometry.geojson";
pub const MANIFEST_CSV: &str = "data/manifest.csv";
pub const AUTHORITATIVE_FILE: &str = "data/authoritative.csv";
pub const SEGMENTATION_FILE: &str = "data/segmentation.csv";
pub const ELICITATION_FILE: &str = "data/elicitation.jsonl";
pub const TRUTH_FILE: &str = "data/truth.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config field `{0}` is invalid")]
    ConfigInvalid(String),
    #[error("cannot read config: {0}")]
    ConfigParse(String),
    #[error("stage input missing: {0}")]
    StageInputMissing(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) | PipelineError::ConfigParse(_) => 2,
            _ => 3,
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Ingest,
    Elicit,
    Aggregate,
    Weights,
    Fit,
    Stack,
    Quantile,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Simulate,
        Stage::Ingest,
        Stage::Elicit,
        Stage::Aggregate,
        Stage::Weights,
        Stage::Fit,
        Stage::Stack,
        Stage::Quantile,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Elicit => "elicit",
            Stage::Aggregate => "aggregate",
            Stage::Weights => "weights",
            Stage::Fit => "fit",
            Stage::Stack => "stack",
            Stage::Quantile => "quantile",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage may read.
    pub fn depends_on(&self) -> &'static [Stage] {
        match self {
            Stage::Simulate | Stage::Ingest => &[],
            Stage::Elicit => &[Stage::Ingest],
            Stage::Aggregate => &[Stage::Ingest, Stage::Elicit],
            Stage::Weights => &[Stage::Ingest, Stage::Simulate, Stage::Aggregate],
            Stage::Fit | Stage::Stack => &[Stage::Aggregate, Stage::Simulate, Stage::Weights],
            Stage::Quantile => &[Stage::Aggregate, Stage::Simulate],
            Stage::Report => &[Stage::Aggregate, Stage::Simulate, Stage::Fit, Stage::Stack, Stage::Quantile],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Parses a comma-separated stage list into canonical execution order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, String> {
    let set: BTreeSet<Stage> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err("empty stage list".into());
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    /// Panorama/tile manifest CSV.
    pub manifest: Option<PathBuf>,
    /// Authoritative outcomes and covariates per block group.
    pub acs: Option<PathBuf>,
    /// Optional separate canopy file keyed by `cbg_id`.
    pub geie: Option<PathBuf>,
    /// Block-group polygons (GeoJSON, `cbg_id` property).
    pub geometry: Option<PathBuf>,
    /// Per-panorama segmentation shares.
    pub segmentation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub specs: Vec<StackSpec>,
    pub comparison: Comparison,
    pub outcomes: Vec<Outcome>,
    pub baseline: Approach,
    pub use_covariates: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            specs: vec![StackSpec::ZipFe, StackSpec::Sar],
            comparison: Comparison::VsIdeal,
            outcomes: Outcome::ALL.to_vec(),
            baseline: Approach::Authoritative,
            use_covariates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub inputs: InputPaths,
    /// Keep only panoramas captured in this year; `null` keeps all.
    pub target_year: Option<i32>,
    pub min_images: u32,
    pub elicit: PromptChainConfig,
    /// Bootstrap draws for the stacked test, R² and quantile intervals.
    pub bootstrap_b: usize,
    pub seed: u64,
    pub standardization: PanelOptions,
    pub sar_se: SarSeChoice,
    pub variants: Vec<Variant>,
    pub comparisons: Vec<Comparison>,
    /// Covariate columns; `null` uses every covariate in the panel.
    pub covariates: Option<Vec<String>>,
    pub stack: StackConfig,
    pub taus: Vec<f64>,
    /// Worker-pool size; `null` uses the number of cores.
    pub workers: Option<usize>,
    pub simulate: DgpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            inputs: InputPaths::default(),
            target_year: Some(ingest::DEFAULT_TARGET_YEAR),
            min_images: ingest::DEFAULT_MIN_IMAGES,
            elicit: PromptChainConfig::default(),
            bootstrap_b: DEFAULT_BOOTSTRAP,
            seed: 20230101,
            standardization: PanelOptions::default(),
            sar_se: SarSeChoice::ModelBased,
            variants: Variant::ALL.to_vec(),
            comparisons: Comparison::ALL.to_vec(),
            covariates: None,
            stack: StackConfig::default(),
            taus: DEFAULT_TAUS.to_vec(),
            workers: None,
            simulate: DgpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |f: &str| Err(PipelineError::ConfigInvalid(f.to_string()));
        if self.bootstrap_b == 0 {
            return bad("bootstrap_b");
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("taus");
        }
        if self.variants.is_empty() {
            return bad("variants");
        }
        if self.comparisons.is_empty() {
            return bad("comparisons");
        }
        if self.stack.specs.is_empty() {
            return bad("stack.specs");
        }
        if self.stack.outcomes.is_empty() {
            return bad("stack.outcomes");
        }
        if self.workers == Some(0) {
            return bad("workers");
        }
        if let Err(f) = self.elicit.validate() {
            return Err(PipelineError::ConfigInvalid(format!("elicit.{f}")));
        }
        if let Err(e) = self.simulate.validate() {
            return Err(PipelineError::ConfigInvalid(format!("simulate ({e})")));
        }
        Ok(())
    }

    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigParse(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::ConfigParse(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.inputs.manifest,
            &mut self.inputs.acs,
            &mut self.inputs.geie,
            &mut self.inputs.geometry,
            &mut self.inputs.segmentation,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(c) = &mut self.elicit.cache_dir {
            fix(c);
        }
    }

    /// Default stage list: the raw-input path when a manifest is configured,
    /// the simulation path otherwise.
    pub fn default_stages(&self) -> Vec<Stage> {
        if self.inputs.manifest.is_some() {
            vec![
                Stage::Ingest,
                Stage::Elicit,
                Stage::Aggregate,
                Stage::Weights,
                Stage::Fit,
                Stage::Stack,
                Stage::Quantile,
                Stage::Report,
            ]
        } else {
            vec![Stage::Simulate, Stage::Fit, Stage::Stack, Stage::Quantile, Stage::Report]
        }
    }

    /// Path-independent form used for hashing and the manifest.
    fn canonical(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.out_dir = PathBuf::from(".");
        let strip = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                *x = PathBuf::from(x.file_name().unwrap_or_default());
            }
        };
        strip(&mut c.inputs.manifest);
        strip(&mut c.inputs.acs);
        strip(&mut c.inputs.geie);
        strip(&mut c.inputs.geometry);
        strip(&mut c.inputs.segmentation);
        c.elicit.cache_dir = None;
        serde_json::to_value(&c).expect("config serializes")
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub depends_on: Vec<Stage>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub status: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<Stage, StageRecord>,
}

/// Collects a stage's outputs in a staging directory and moves them into
/// place once the stage has succeeded.
struct StageWriter {
    out_dir: PathBuf,
    tmp: PathBuf,
    files: BTreeSet<String>,
}

impl StageWriter {
    fn new(out_dir: &Path, stage: Stage) -> std::io::Result<StageWriter> {
        let tmp = out_dir.join(format!(".staging-{stage}"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        Ok(StageWriter {
            out_dir: out_dir.to_path_buf(),
            tmp,
            files: BTreeSet::new(),
        })
    }

    fn path(&mut self, rel: &str) -> std::io::Result<PathBuf> {
        let p = self.tmp.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.insert(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> std::io::Result<()> {
        let p = self.path(rel)?;
        std::fs::write(p, bytes)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn commit(self) -> std::io::Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for rel in &self.files {
            let from = self.tmp.join(rel);
            if !from.exists() {
                continue;
            }
            let to = self.out_dir.join(rel);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::rename(&from, &to)?;
            hashes.insert(rel.clone(), sha256_file(&to)?);
        }
        std::fs::remove_dir_all(&self.tmp)?;
        Ok(hashes)
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.tmp);
    }
}

/// Result of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Complete,
    /// Finished, but some table cells failed.
    Partial,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub stages: Vec<(Stage, StageStatus)>,
}

impl RunOutcome {
    pub fn partial(&self) -> bool {
        self.stages.iter().any(|s| s.1 == StageStatus::Partial)
    }

    pub fn exit_code(&self) -> i32 {
        if self.partial() {
            4
        } else {
            0
        }
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    inputs: BTreeMap<String, String>,
}

impl Ctx<'_> {
    fn require(&mut self, rel: &str, stage: &str) -> Result<PathBuf, PipelineError> {
        let p = self.out.join(rel);
        if !p.exists() {
            return Err(PipelineError::StageInputMissing(stage.to_string()));
        }
        self.inputs.insert(rel.to_string(), sha256_file(&p)?);
        Ok(p)
    }

    fn external(&mut self, role: &str, p: &Option<PathBuf>, stage: &str) -> Result<Option<PathBuf>, PipelineError> {
        match p {
            None => Ok(None),
            Some(p) if !p.exists() => Err(PipelineError::StageInputMissing(stage.to_string())),
            Some(p) => {
                self.inputs.insert(format!("input:{role}"), sha256_file(p)?);
                Ok(Some(p.clone()))
            }
        }
    }

    fn panels(&mut self) -> Result<BTreeMap<Sample, Panel>, PipelineError> {
        let p = self.require(PANEL_FILE, "aggregate")?;
        aggregate::read_panels_csv(&p).map_err(|e| PipelineError::Stage {
            stage: Stage::Aggregate,
            message: e.to_string(),
        })
    }

    fn weights(&mut self) -> Result<WeightsMatrix, PipelineError> {
        let p = self.require(WEIGHTS_FILE, "spatial")?;
        WeightsMatrix::read_json(&p).map_err(|e| PipelineError::Stage {
            stage: Stage::Weights,
            message: e.to_string(),
        })
    }

    fn covariates(&self, panel: &Panel) -> Vec<String> {
        self.cfg.covariates.clone().unwrap_or_else(|| panel.covariate_names())
    }
}

/// Runs `stages` in canonical order under `cfg`.
pub fn run(cfg: &RunConfig, stages: &[Stage]) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::ConfigInvalid(format!("workers ({e})")))?;
            pool.install(|| run_inner(cfg, stages))
        }
        None => run_inner(cfg, stages),
    }
}

fn run_inner(cfg: &RunConfig, stages: &[Stage]) -> Result<RunOutcome, PipelineError> {
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    let mut order: Vec<Stage> = stages.to_vec();
    order.sort();
    order.dedup();
    let mut outcome = RunOutcome { stages: Vec::new() };
    for stage in order {
        let started = Instant::now();
        let mut ctx = Ctx {
            cfg,
            out,
            inputs: BTreeMap::new(),
        };
        let mut w = StageWriter::new(out, stage)?;
        log::info!("stage {stage}: start");
        let status = match stage {
            Stage::Simulate => stage_simulate(&mut ctx, &mut w),
            Stage::Ingest => stage_ingest(&mut ctx, &mut w),
            Stage::Elicit => stage_elicit(&mut ctx, &mut w),
            Stage::Aggregate => stage_aggregate(&mut ctx, &mut w),
            Stage::Weights => stage_weights(&mut ctx, &mut w),
            Stage::Fit => stage_fit(&mut ctx, &mut w),
            Stage::Stack => stage_stack(&mut ctx, &mut w),
            Stage::Quantile => stage_quantile(&mut ctx, &mut w),
            Stage::Report => stage_report(&mut ctx, &mut w),
        }?;
        let outputs = w.commit()?;
        let record = StageRecord {
            depends_on: stage.depends_on().to_vec(),
            inputs: std::mem::take(&mut ctx.inputs),
            outputs,
            status: match status {
                StageStatus::Complete => "complete".into(),
                StageStatus::Partial => "partial".into(),
            },
        };
        update_manifest(cfg, stage, record)?;
        log_timing(out, stage, started.elapsed())?;
        log::info!("stage {stage}: done in {:.2}s", started.elapsed().as_secs_f64());
        outcome.stages.push((stage, status));
    }
    Ok(outcome)
}

fn update_manifest(cfg: &RunConfig, stage: Stage, record: StageRecord) -> Result<(), PipelineError> {
    let path = cfg.out_dir.join(MANIFEST_FILE);
    let config = cfg.canonical();
    let config_sha256 = hex(&Sha256::digest(serde_json::to_vec(&config).expect("json")));
    let mut manifest: RunManifest = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .filter(|m: &RunManifest| m.config_sha256 == config_sha256)
        .unwrap_or_default();
    manifest.tool = "placelens".into();
    manifest.version = env!("CARGO_PKG_VERSION").into();
    manifest.config_sha256 = config_sha256;
    manifest.config = config;
    manifest.stages.insert(stage, record);
    let tmp = path.with_extension("json.tmp");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(&tmp, text)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn log_timing(out: &Path, stage: Stage, d: Duration) -> std::io::Result<()> {
    let dir = out.join("audit");
    std::fs::create_dir_all(&dir)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("timings.log"))?;
    writeln!(f, "{stage}\t{:.3}", d.as_secs_f64())
}

fn stage_simulate(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Simulate);
    let mut dgp = ctx.cfg.simulate.clone();
    if dgp == DgpConfig::default() {
        dgp.seed = ctx.cfg.seed;
    }
    let data = simgen::generate(&dgp).map_err(|e| err(&e))?;
    let opts = ctx.cfg.standardization;
    let panels = data.panels(opts).map_err(|e| err(&e))?;
    let refs: Vec<&Panel> = panels.values().collect();
    aggregate::write_panels_csv(&refs, &w.path(PANEL_FILE)?).map_err(|e| err(&e))?;
    w.write_json(PANEL_META_FILE, &aggregate::panel_meta(&refs, opts))?;
    data.weights.write_json(&w.path(WEIGHTS_FILE)?).map_err(|e| err(&e))?;
    spatial::write_geojson(&w.path(GEOMETRY_FILE)?, &data.geometry).map_err(|e| err(&e))?;
    w.write_json(TRUTH_FILE, &data.truth)?;
    Ok(StageStatus::Complete)
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    n_panoramas: usize,
    n_tiles: usize,
    n_valid_tiles: usize,
    n_cbgs: usize,
    min_images: u32,
    target_year: Option<i32>,
    kept_cbgs: usize,
    dropped_cbgs: Vec<String>,
    n_segmentation_rows: usize,
}

fn stage_ingest(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Ingest);
    let cfg = ctx.cfg;
    let manifest = ctx
        .external("manifest", &cfg.inputs.manifest, "ingest")?
        .ok_or_else(|| PipelineError::ConfigInvalid("inputs.manifest".into()))?;
    let acs = ctx
        .external("acs", &cfg.inputs.acs, "ingest")?
        .ok_or_else(|| PipelineError::ConfigInvalid("inputs.acs".into()))?;
    let geometry = ctx
        .external("geometry", &cfg.inputs.geometry, "ingest")?
        .ok_or_else(|| PipelineError::ConfigInvalid("inputs.geometry".into()))?;
    let geie = ctx.external("geie", &cfg.inputs.geie, "ingest")?;
    let seg = ctx
        .external("segmentation", &cfg.inputs.segmentation, "ingest")?
        .ok_or_else(|| PipelineError::ConfigInvalid("inputs.segmentation".into()))?;

    let panos = ingest::load_manifest(&manifest, cfg.target_year).map_err(|e| err(&e))?;
    let auth = ingest::load_authoritative(&acs, geie.as_deref(), &geometry).map_err(|e| err(&e))?;
    let shares = ingest::load_segmentation(&seg, &panos).map_err(|e| err(&e))?;
    let (kept, dropped) = ingest::filter_cbgs(&panos, cfg.min_images);

    ingest::write_manifest(&panos, &w.path(MANIFEST_CSV)?).map_err(|e| err(&e))?;
    let csv_path = w.path(AUTHORITATIVE_FILE)?;
    let geo_path = w.path(GEOMETRY_FILE)?;
    ingest::write_authoritative(&auth, &csv_path, &geo_path).map_err(|e| err(&e))?;
    ingest::write_segmentation(&shares, &w.path(SEGMENTATION_FILE)?).map_err(|e| err(&e))?;
    w.write_json(
        "data/ingest_summary.json",
        &IngestSummary {
            n_panoramas: panos.len(),
            n_tiles: panos.iter().map(|p| p.tiles.len()).sum(),
            n_valid_tiles: panos.iter().map(|p| p.n_valid_tiles as usize).sum(),
            n_cbgs: auth.len(),
            min_images: cfg.min_images,
            target_year: cfg.target_year,
            kept_cbgs: kept.len(),
            dropped_cbgs: dropped.into_iter().collect(),
            n_segmentation_rows: shares.len(),
        },
    )?;
    Ok(StageStatus::Complete)
}

/// Builds the endpoint named by `elicit.endpoint`: `mock` or
/// `mock:<profile>` for the offline mock, an `http(s)://` URL otherwise.
pub fn endpoint_from_config(cfg: &RunConfig) -> Result<Box<dyn EndpointClient>, PipelineError> {
    let spec = cfg
        .elicit
        .endpoint
        .as_deref()
        .ok_or_else(|| PipelineError::ConfigInvalid("elicit.endpoint".into()))?;
    if let Some(rest) = spec.strip_prefix("mock") {
        let profile = match rest.strip_prefix(':') {
            Some(p) => p
                .parse::<MockProfile>()
                .map_err(|_| PipelineError::ConfigInvalid("elicit.endpoint".into()))?,
            None if rest.is_empty() => MockProfile::Mixed,
            None => return Err(PipelineError::ConfigInvalid("elicit.endpoint".into())),
        };
        return Ok(Box::new(MockEndpoint::new(cfg.seed, profile)));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Box::new(HttpEndpoint::new(
            spec,
            Duration::from_secs(cfg.elicit.timeout_secs),
            cfg.elicit.credential_env.as_deref(),
            2,
        )));
    }
    Err(PipelineError::ConfigInvalid("elicit.endpoint".into()))
}

fn stage_elicit(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Elicit);
    let cfg = ctx.cfg;
    let endpoint = endpoint_from_config(cfg)?;
    let manifest = ctx.require(MANIFEST_CSV, "ingest")?;
    let panos = ingest::load_manifest(&manifest, None).map_err(|e| err(&e))?;
    let (kept, _) = ingest::filter_cbgs(&panos, cfg.min_images);
    let panos: Vec<_> = panos.into_iter().filter(|p| kept.contains(&p.cbg_id)).collect();
    let cache_dir = cfg.elicit.cache_dir.clone().unwrap_or_else(|| ctx.out.join("audit"));
    std::fs::create_dir_all(&cache_dir)?;
    let cache = PromptCache::open(&cache_dir)?;
    let results = elicit::elicit_tiles(&panos, &cfg.elicit, endpoint.as_ref(), &cache).map_err(|e| err(&e))?;
    elicit::write_results_jsonl(&results, &w.path(ELICITATION_FILE)?)?;
    let mut failures = String::from("pano_id,tile_heading,prompt,round\n");
    for r in &results {
        for (p, round) in &r.failures {
            let _ = writeln!(failures, "{},{},{},{}", r.pano_id, r.tile_heading, *p as u8, round);
        }
    }
    w.write("audit/elicit_failures.csv", failures.as_bytes())?;
    Ok(StageStatus::Complete)
}

fn stage_aggregate(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Aggregate);
    let cfg = ctx.cfg;
    let manifest = ctx.require(MANIFEST_CSV, "ingest")?;
    let auth_csv = ctx.require(AUTHORITATIVE_FILE, "ingest")?;
    let geo = ctx.require(GEOMETRY_FILE, "ingest")?;
    let seg = ctx.require(SEGMENTATION_FILE, "ingest")?;
    let elic = ctx.require(ELICITATION_FILE, "elicit")?;

    let panos = ingest::load_manifest(&manifest, None).map_err(|e| err(&e))?;
    let raw = ingest::load_authoritative(&auth_csv, None, &geo).map_err(|e| err(&e))?;
    let shares = ingest::load_segmentation(&seg, &panos).map_err(|e| err(&e))?;
    let results = elicit::read_results_jsonl(&elic)?;
    let (kept_ids, _) = ingest::filter_cbgs(&panos, cfg.min_images);
    let kept: BTreeMap<String, u32> = ingest::valid_images_by_cbg(&panos)
        .into_iter()
        .filter(|(k, _)| kept_ids.contains(k))
        .collect();
    let mllm = aggregate::mllm_indicators(&panos, &results);
    let segmentation = aggregate::segmentation_indicators(&panos, &shares);
    let inputs = PanelInputs {
        raw: &raw,
        mllm: &mllm,
        segmentation: &segmentation,
        kept: &kept,
    };
    let records = aggregate::assemble(&inputs);
    let mut panels = Vec::new();
    for sample in [Sample::VsIdeal, Sample::VsStableDeclining, Sample::All] {
        match aggregate::build_panel_from_records(&records, sample, cfg.standardization) {
            Ok(p) => panels.push(p),
            Err(e) if sample != Sample::All => log::warn!("sample {sample} skipped: {e}"),
            Err(e) => return Err(err(&e)),
        }
    }
    let refs: Vec<&Panel> = panels.iter().collect();
    aggregate::write_panels_csv(&refs, &w.path(PANEL_FILE)?).map_err(|e| err(&e))?;
    w.write_json(PANEL_META_FILE, &aggregate::panel_meta(&refs, cfg.standardization))?;
    Ok(StageStatus::Complete)
}

fn stage_weights(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Weights);
    let geo = ctx.require(GEOMETRY_FILE, "ingest")?;
    let mut geoms = spatial::read_geojson(&geo).map_err(|e| err(&e))?;
    if ctx.out.join(PANEL_FILE).exists() {
        let panels = ctx.panels()?;
        let ids: BTreeSet<String> = panels.values().flat_map(|p| p.cbg_ids()).collect();
        geoms.retain(|k, _| ids.contains(k));
    }
    let weights = spatial::queen_weights(&geoms, DEFAULT_SNAP_TOLERANCE).map_err(|e| err(&e))?;
    if !weights.islands().is_empty() {
        log::warn!("{} block group(s) have no queen neighbor", weights.islands().len());
    }
    weights.write_json(&w.path(WEIGHTS_FILE)?).map_err(|e| err(&e))?;
    Ok(StageStatus::Complete)
}

#[derive(Debug, Serialize)]
struct LadderMeta {
    sar_se: SarSeChoice,
    covariates: Vec<String>,
    cells: usize,
    failed: Vec<String>,
    /// SAR cells: the other SE convention for δ.
    alternative_sar_se: BTreeMap<String, f64>,
}

fn cell_key(s: &ModelSpec) -> String {
    format!("{}/{}/{}/{}", s.outcome, s.approach, s.comparison, s.variant.as_str())
}

fn stage_fit(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let cfg = ctx.cfg;
    let panels = ctx.panels()?;
    let weights = if cfg.variants.contains(&Variant::Sar) {
        Some(ctx.weights()?)
    } else {
        None
    };
    let first = panels
        .values()
        .next()
        .ok_or_else(|| PipelineError::StageInputMissing("aggregate".into()))?;
    let covs = ctx.covariates(first);
    let comparisons: Vec<Comparison> = cfg
        .comparisons
        .iter()
        .copied()
        .filter(|c| panels.contains_key(&Sample::from(*c)))
        .collect();
    let specs = ModelSpec::full_grid(&covs, &cfg.variants, &comparisons);
    let wmap: BTreeMap<Sample, WeightsMatrix> = match &weights {
        Some(wm) => comparisons.iter().map(|c| (Sample::from(*c), wm.clone())).collect(),
        None => BTreeMap::new(),
    };
    let cells = econ::contrast_ladder(&panels, &specs, &wmap, cfg.sar_se);
    econ::write_ladder_csv(&cells, &w.path("tables/ladder.csv")?)?;
    w.write("tables/ladder.txt", econ::format_ladder_table(&cells).as_bytes())?;
    let failed: Vec<String> = cells
        .iter()
        .filter_map(|c| c.fit.as_ref().err().map(|e| format!("{}: {e}", cell_key(&c.spec))))
        .collect();
    let meta = LadderMeta {
        sar_se: cfg.sar_se,
        covariates: covs,
        cells: cells.len(),
        failed: failed.clone(),
        alternative_sar_se: cells
            .iter()
            .filter_map(|c| c.alt_se.map(|s| (cell_key(&c.spec), s)))
            .collect(),
    };
    w.write_json("tables/ladder_meta.json", &meta)?;
    for outcome in Outcome::ALL {
        let rows: Vec<DotInterval> = cells
            .iter()
            .filter(|c| c.spec.outcome == outcome)
            .filter_map(|c| {
                let f = c.fit.as_ref().ok()?;
                let (d, se) = (f.delta(), f.se_delta());
                Some(DotInterval {
                    label: format!("{} {} {}", c.spec.approach, c.spec.comparison, c.spec.variant.as_str()),
                    estimate: d,
                    low: d - 1.96 * se,
                    high: d + 1.96 * se,
                    group: Approach::ALL.iter().position(|a| *a == c.spec.approach).unwrap_or(0),
                })
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        let svg = plot::dot_interval_svg(&rows, &format!("Redlining effect on {outcome}"), "δ (SD units)");
        w.write(&format!("figures/ladder_{outcome}.svg"), svg.as_bytes())?;
    }
    if failed.is_empty() {
        Ok(StageStatus::Complete)
    } else {
        log::warn!("{} ladder cell(s) failed", failed.len());
        Ok(StageStatus::Partial)
    }
}

fn stage_stack(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Stack);
    let cfg = ctx.cfg;
    let panels = ctx.panels()?;
    let sample = Sample::from(cfg.stack.comparison);
    let panel = panels
        .get(&sample)
        .ok_or_else(|| PipelineError::StageInputMissing(format!("aggregate ({sample} panel)")))?;
    let weights = if cfg.stack.specs.contains(&StackSpec::Sar) {
        Some(ctx.weights()?)
    } else {
        None
    };
    let covs = if cfg.stack.use_covariates {
        ctx.covariates(panel)
    } else {
        Vec::new()
    };

    let mut dists = Vec::new();
    for &outcome in &cfg.stack.outcomes {
        let rows = stackinf::stack_panel(panel, outcome, &covs);
        for &spec in &cfg.stack.specs {
            let seed = stats::derive_seed(cfg.seed, &["stack", outcome.as_str(), spec.as_str()]);
            let dist = stackinf::cluster_bootstrap(
                &rows,
                spec,
                cfg.stack.baseline,
                weights.as_ref(),
                cfg.bootstrap_b,
                seed,
                &PairsResampler,
            )
            .map_err(|e| err(&e))?;
            dists.push((outcome, dist));
        }
    }
    let labelled: Vec<LabelledDistribution<'_>> = dists
        .iter()
        .map(|(o, d)| LabelledDistribution { outcome: *o, dist: d })
        .collect();
    stackinf::write_draws_csv(&labelled, &w.path("tables/bootstrap_draws.csv")?).map_err(|e| err(&e))?;
    let mut report = stackinf::equivalence_report(&labelled).map_err(|e| err(&e))?;
    report.seed = cfg.seed;
    w.write_json("tables/equivalence.json", &report)?;

    let mut csv = String::from("outcome,spec,baseline,term,estimate,se,boot_mean,ci_low,ci_high,verdict\n");
    for (outcome, d) in &dists {
        let p = &d.point;
        let iv = d.delta0_interval();
        let _ = writeln!(
            csv,
            "{outcome},{},{},delta0,{},{},{},{},{},",
            d.spec.as_str(),
            d.baseline,
            exact(p.delta0),
            exact(p.se_delta0()),
            exact(iv.mean),
            exact(iv.low),
            exact(iv.high)
        );
        for (&a, &t) in &p.theta {
            let iv = d.theta_interval(a).expect("draws exist");
            let verdict = match stackinf::equivalence_test(d, a).map_err(|e| err(&e))? {
                Verdict::Rejected => "rejected",
                Verdict::NotRejected => "not_rejected",
            };
            let _ = writeln!(
                csv,
                "{outcome},{},{},theta:{a},{},{},{},{},{},{verdict}",
                d.spec.as_str(),
                d.baseline,
                exact(t),
                exact(p.se_theta(a).unwrap_or(f64::NAN)),
                exact(iv.mean),
                exact(iv.low),
                exact(iv.high)
            );
        }
        for a in Approach::ALL {
            let iv = d.total_interval(a);
            let _ = writeln!(
                csv,
                "{outcome},{},{},total:{a},{},,{},{},{},",
                d.spec.as_str(),
                d.baseline,
                exact(p.totals[&a]),
                exact(iv.mean),
                exact(iv.low),
                exact(iv.high)
            );
        }
        let groups: Vec<(String, Vec<f64>)> =
            Approach::ALL.iter().map(|&a| (a.to_string(), d.total_draws(a))).collect();
        let svg = plot::violin_svg(
            &groups,
            &format!("Bootstrap total effects: {outcome}, {}", d.spec.as_str()),
            "δ (SD units)",
        );
        w.write(&format!("figures/bootstrap_{outcome}_{}.svg", d.spec.as_str()), svg.as_bytes())?;
    }
    w.write("tables/stacked.csv", csv.as_bytes())?;
    Ok(StageStatus::Complete)
}

#[derive(Debug, Serialize)]
struct QuantileMeta {
    bootstrap_b: usize,
    seed: u64,
    taus: Vec<f64>,
    sample: Sample,
    covariates: Vec<String>,
    note: &'static str,
}

fn stage_quantile(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let err = stage_err(Stage::Quantile);
    let cfg = ctx.cfg;
    let panels = ctx.panels()?;
    let panel = panels
        .get(&Sample::All)
        .ok_or_else(|| PipelineError::StageInputMissing("aggregate (all panel)".into()))?;
    let covs = ctx.covariates(panel);
    let r2 = quantfit::r2_ladder(panel, &covs, cfg.bootstrap_b, cfg.seed).map_err(|e| err(&e))?;
    let grid = quantfit::quantile_grid(panel, &cfg.taus, cfg.bootstrap_b, cfg.seed).map_err(|e| err(&e))?;
    quantfit::write_r2_csv(&r2, &w.path("tables/r2_ladder.csv")?)?;
    w.write("tables/r2_ladder.txt", quantfit::format_r2_table(&r2).as_bytes())?;
    quantfit::write_quantile_csv(&grid, &w.path("tables/quantile_grid.csv")?)?;
    w.write_json(
        "tables/quantile_meta.json",
        &QuantileMeta {
            bootstrap_b: cfg.bootstrap_b,
            seed: cfg.seed,
            taus: cfg.taus.clone(),
            sample: Sample::All,
            covariates: covs,
            note: "one bootstrap count is used for every interval; the R² comparison has been reported elsewhere with 1000 draws",
        },
    )?;

    let rows: Vec<DotInterval> = r2
        .iter()
        .map(|c| DotInterval {
            label: format!("{} {}", c.outcome, c.spec.label()),
            estimate: c.adj_r2,
            low: c.interval.map(|i| i.low).unwrap_or(f64::NAN),
            high: c.interval.map(|i| i.high).unwrap_or(f64::NAN),
            group: quantfit::R2Spec::ALL.iter().position(|s| *s == c.spec).unwrap_or(0),
        })
        .collect();
    w.write(
        "figures/r2_ladder.svg",
        plot::dot_interval_svg(&rows, "Explained variance by specification", "adjusted R²").as_bytes(),
    )?;
    let mut points = Vec::new();
    for (k, outcome) in Outcome::ALL.into_iter().enumerate() {
        for &tau in &cfg.taus {
            let find = |a: Approach| {
                grid.iter()
                    .find(|c| c.outcome == outcome && c.approach == a && c.fit.tau == tau)
                    .map(|c| c.fit.pseudo_r2)
            };
            if let (Some(x), Some(y)) = (find(Approach::Mllm), find(Approach::Segmentation)) {
                points.push(ParityPoint {
                    x,
                    y,
                    label: format!("{outcome} τ={}", sig6(tau)),
                    group: k,
                });
            }
        }
    }
    w.write(
        "figures/quantile_parity.svg",
        plot::parity_svg(&points, "Pseudo-R² by quantile", "MLLM", "Segmentation").as_bytes(),
    )?;
    Ok(StageStatus::Complete)
}

fn stage_report(ctx: &mut Ctx<'_>, w: &mut StageWriter) -> Result<StageStatus, PipelineError> {
    let panels = ctx.panels()?;
    let mut csv = String::from("sample,approach,holc_group,outcome,n,mean_raw,sd_raw,mean_z\n");
    for (sample, panel) in &panels {
        for a in Approach::ALL {
            for g in [HolcGroup::Redlined, HolcGroup::Ideal, HolcGroup::StableDeclining] {
                let rows: Vec<_> = panel.rows_for(a).filter(|r| r.holc_group == g).collect();
                if rows.is_empty() {
                    continue;
                }
                for outcome in Outcome::ALL {
                    let raw: Vec<f64> = rows.iter().map(|r| r.outcome_raw(outcome)).collect();
                    let z: Vec<f64> = rows.iter().map(|r| r.outcome_z(outcome)).collect();
                    let sd = if raw.len() > 1 { stats::sd(&raw, 1) } else { f64::NAN };
                    let _ = writeln!(
                        csv,
                        "{sample},{a},{g},{outcome},{},{},{},{}",
                        rows.len(),
                        sig6(stats::mean(&raw)),
                        sig6(sd),
                        sig6(stats::mean(&z))
                    );
                }
            }
        }
    }
    w.write("tables/descriptives.csv", csv.as_bytes())?;

    let mut md = String::from("# placelens report\n\n");
    for (dir, title) in [("tables", "Tables"), ("figures", "Figures"), ("data", "Data")] {
        let mut files: Vec<String> = match std::fs::read_dir(ctx.out.join(dir)) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .map(|e| format!("{dir}/{}", e.file_name().to_string_lossy()))
                .collect(),
            Err(_) => Vec::new(),
        };
        if dir == "tables" {
            files.push("tables/descriptives.csv".into());
        }
        files.sort();
        files.dedup();
        if files.is_empty() {
            continue;
        }
        let _ = writeln!(md, "## {title}\n");
        for f in files {
            let _ = writeln!(md, "- `{f}`");
        }
        md.push('\n');
    }
    if let Ok(text) = std::fs::read_to_string(ctx.out.join("tables/ladder.txt")) {
        let _ = writeln!(md, "## Specification ladder\n\n```text\n{}```\n", text);
    }
    if let Ok(text) = std::fs::read_to_string(ctx.out.join("tables/r2_ladder.txt")) {
        let _ = writeln!(md, "## Adjusted R²\n\n```text\n{}```\n", text);
    }
    if let Ok(text) = std::fs::read_to_string(ctx.out.join("tables/equivalence.json")) {
        if let Ok(rep) = serde_json::from_str::<stackinf::EquivalenceReport>(&text) {
            let _ = writeln!(md, "## Interaction tests (B = {})\n", rep.b);
            let _ = writeln!(md, "| outcome | spec | approach | θ | 95% CI | verdict |");
            let _ = writeln!(md, "|---|---|---|---|---|---|");
            for e in &rep.results {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | [{}, {}] | {:?} |",
                    e.outcome,
                    e.spec.as_str(),
                    e.approach,
                    sig6(e.theta),
                    sig6(e.ci_low),
                    sig6(e.ci_high),
                    e.verdict
                );
            }
            let _ = writeln!(md, "\n{}\n", rep.caveat);
        }
    }
    w.write("report.md", md.as_bytes())?;
    Ok(StageStatus::Complete)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        RunConfig {
            out_dir: dir.to_path_buf(),
            bootstrap_b: 20,
            simulate: DgpConfig {
                rows: 8,
                cols: 8,
                zip_block: 4,
                ..DgpConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn stage_list_parsing() {
        assert_eq!(
            parse_stages("stack, simulate,fit").unwrap(),
            vec![Stage::Simulate, Stage::Fit, Stage::Stack]
        );
        assert!(parse_stages("bogus").is_err());
        assert!(parse_stages("").is_err());
    }

    #[test]
    fn dependencies_point_backwards() {
        for (i, s) in Stage::ALL.iter().enumerate() {
            for d in s.depends_on() {
                let j = Stage::ALL.iter().position(|x| x == d).unwrap();
                assert!(j < i, "{} depends on later stage {}", s.as_str(), d.as_str());
            }
        }
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_values() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bootstrap": 5}"#).is_err());
        let cfg = RunConfig {
            taus: vec![1.0],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PipelineError::ConfigInvalid(f)) if f == "taus"));
        let parsed: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn sar_fit_without_weights_reports_spatial() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        run(&cfg, &[Stage::Simulate]).unwrap();
        std::fs::remove_file(dir.path().join(WEIGHTS_FILE)).unwrap();
        let e = run(&cfg, &[Stage::Fit]).unwrap_err();
        assert!(matches!(&e, PipelineError::StageInputMissing(s) if s == "spatial"), "{e}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn elicit_requires_endpoint() {
        let cfg = RunConfig::default();
        assert!(matches!(endpoint_from_config(&cfg), Err(PipelineError::ConfigInvalid(_))));
        let mut cfg = RunConfig::default();
        cfg.elicit.endpoint = Some("mock:affluent".into());
        assert!(endpoint_from_config(&cfg).is_ok());
        cfg.elicit.endpoint = Some("ftp://x".into());
        assert!(endpoint_from_config(&cfg).is_err());
    }
}
