//! Four-prompt elicitation chain: prompt texts, strict reply validation,
//! endpoint clients, the request cache and per-tile consensus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::ingest::{PanoramaRecord, TileRecord};

pub const PREAMBLE: &str = "You are an urban auditor producing an area-level proxy from a single street-level image. \
Use only visible, non-sensitive street-view features (e.g., structures, lots, roads, vegetation, street furniture, lighting). \
Do not infer characteristics of identifiable people. All numeric outputs must follow the stated ranges and be rounded to two decimals. \
Return only valid JSON matching the prompt's schema. Return only the JSON object described in the Answer block (no extra text).";

pub const PROMPT_1: &str = r#"Task. Identify the primary residential structure type (if any) and facade-level maintenance indicators (non-sensitive, visual cues only).

Allowed structure types (choose one).
"single_family_detached","duplex","mobile_home","apartment",
"townhouse","mixed_use","other","unknown","none_visible"

Answer (JSON).
{
  "structure_type": "<one allowed value>",
  "facade_indicators": ["<zero or more canonical tokens>"],
  "n_facade_indicators": <integer >= 0>,
  "notes": "<<=100 chars, optional>"
}"#;

pub const PROMPT_2: &str = r#"Task. Record neighborhood-scale environmental indicators associated with lower infrastructure quality or maintenance (non-sensitive, visual cues only). Also record whether overhead canopy elements are present.

Canonical environmental indicators (choose zero or more).
"dirt_lot","overgrowth","debris","landscaping_absent",
"vehicle_damaged","vehicle_abandoned","very_old_vehicle",
"driveway_broken","cracked_sidewalk","poor_lighting",
"potholes","window_bars","perimeter_fence","clutter_disrepair"

Canopy indicator tokens (choose zero or more).
"tree","palm","large_shrub"

Answer (JSON).
{
  "env_indicators": ["<zero or more canonical tokens from the list above>"],
  "n_env_indicators": <integer >= 0>,
  "canopy_indicators": ["<zero or more of: tree, palm, large_shrub>"],
  "n_canopy_indicators": <integer >= 0>,
  "notes": "<<=100 chars, optional>"
}"#;

pub const PROMPT_3: &str = r#"Task. Using the provided indicators, estimate the local-scene share of visible area covered by overhead canopy only (mature trees, palms, large shrubs). Exclude grass, small bushes, flowerbeds, and groundcover.

You will be provided with (as variables):
"canopy_indicators": ["tree" | "palm" | "large_shrub", ...],
"n_canopy_indicators": <int>

Calibration anchors (choose one band, then give a numeric).
very_low (0.00-0.20), low (0.20-0.40), moderate (0.40-0.60),
high (0.60-0.80), very_high (0.80-1.00), unknown

Critical numeric rule.
The numeric estimate canopy_share_0_1 must be a continuous value inside the chosen band (e.g., if low, use 0.21-0.39). Do not return band cutpoints (0.20, 0.40, etc.) as placeholders. Use exact 0.00 only if the scene unambiguously shows no canopy ("n_canopy_indicators": 0).

Answer (JSON).
{
  "canopy_band": "very_low" | "low" | "moderate" | "high" | "very_high" | "unknown",
  "canopy_share_0_1": <float in [0.00, 1.00] or null>,
  "notes": "<<=100 chars, optional>"
}

Rounding. Report canopy_share_0_1 to two decimals. If information is insufficient, set "canopy_band":"unknown" and "canopy_share_0_1": null."#;

pub const PROMPT_4: &str = r#"Task. Using the provided structure type and the facade/environmental indicators, produce a local-scene, area-level proxy for the share of households below U.S. federal poverty thresholds (2023). Use only visible built-environment cues; do not infer person-level attributes.

You will be provided with (as variables):
"structure_type": "<one of the allowed types>",
"facade_indicators": ["<tokens>"], "n_facade_indicators": <int>,
"env_indicators": ["<tokens>"], "n_env_indicators": <int>

Calibration anchors (choose one band, then give a numeric).
very_low (0.00-0.20), low (0.20-0.40), moderate (0.40-0.60),
high (0.60-0.80), very_high (0.80-1.00), unknown

Critical numeric rule.
The numeric estimate poverty_proxy_0_1 must be a continuous value inside the chosen band (e.g., if moderate, use 0.41-0.59). Do not return band midpoints or cutpoints as placeholders. Use exact 0.00 only if no facade or environmental indicators of deprivation are present ("n_facade_indicators": 0, "n_env_indicators": 0).

Answer (JSON).
{
  "poverty_band": "very_low" | "low" | "moderate" | "high" | "very_high" | "unknown",
  "poverty_proxy_0_1": <float in [0.00, 1.00] or null>,
  "evidence_counts": {
    "n_facade_indicators": <int>,
    "n_env_indicators": <int>
  },
  "notes": "<<=100 chars, optional>"
}

Rounding. Report poverty_proxy_0_1 to two decimals. If information is insufficient, set "poverty_band":"unknown" and "poverty_proxy_0_1": null."#;

pub const STRUCTURE_TYPES: [&str; 9] = [
    "single_family_detached",
    "duplex",
    "mobile_home",
    "apartment",
    "townhouse",
    "mixed_use",
    "other",
    "unknown",
    "none_visible",
];

pub const ENV_TOKENS: [&str; 14] = [
    "dirt_lot",
    "overgrowth",
    "debris",
    "landscaping_absent",
    "vehicle_damaged",
    "vehicle_abandoned",
    "very_old_vehicle",
    "driveway_broken",
    "cracked_sidewalk",
    "poor_lighting",
    "potholes",
    "window_bars",
    "perimeter_fence",
    "clutter_disrepair",
];

pub const CANOPY_TOKENS: [&str; 3] = ["tree", "palm", "large_shrub"];

/// Facade tokens are free-form but must look canonical.
const FACADE_EXAMPLES: [&str; 8] = [
    "peeling_paint",
    "broken_window",
    "boarded_window",
    "roof_damage",
    "missing_siding",
    "sagging_porch",
    "graffiti",
    "damaged_door",
];

const NOTES_MAX: usize = 100;

/// Which of the four prompts a reply answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PromptId {
    Structure = 1,
    Environment = 2,
    Canopy = 3,
    Poverty = 4,
}

impl PromptId {
    pub const ALL: [PromptId; 4] = [PromptId::Structure, PromptId::Environment, PromptId::Canopy, PromptId::Poverty];

    pub fn text(&self) -> &'static str {
        match self {
            PromptId::Structure => PROMPT_1,
            PromptId::Environment => PROMPT_2,
            PromptId::Canopy => PROMPT_3,
            PromptId::Poverty => PROMPT_4,
        }
    }
}

impl From<PromptId> for u8 {
    fn from(p: PromptId) -> u8 {
        p as u8
    }
}

impl TryFrom<u8> for PromptId {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(PromptId::Structure),
            2 => Ok(PromptId::Environment),
            3 => Ok(PromptId::Canopy),
            4 => Ok(PromptId::Poverty),
            _ => Err(format!("prompt id must be 1..4, got {v}")),
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("reply is not a JSON object: {0}")]
    NotJson(String),
    #[error("schema violation at `{0}`")]
    SchemaViolation(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("`{field}` declares {declared} but lists {actual}")]
    CountMismatch { field: String, declared: u64, actual: u64 },
    #[error("value {0:.2} is not rounded to two decimals")]
    NotRounded(f64),
    #[error("value {0:.2} is a band cutpoint")]
    BandCutpoint(f64),
    #[error("value {0:.2} is a band midpoint")]
    BandMidpoint(f64),
    #[error("value {value:.2} lies outside band {band}")]
    BandValueMismatch { band: Band, value: f64 },
    #[error("0.00 is only allowed without evidence")]
    IllegalZero,
}

impl ValidationError {
    /// Short machine-readable label, used in the cache and corpus files.
    pub fn kind(&self) -> &'static str {
        match self {
            ValidationError::NotJson(_) => "not_json",
            ValidationError::SchemaViolation(_) => "schema_violation",
            ValidationError::UnknownToken(_) => "unknown_token",
            ValidationError::CountMismatch { .. } => "count_mismatch",
            ValidationError::NotRounded(_) => "not_rounded",
            ValidationError::BandCutpoint(_) => "band_cutpoint",
            ValidationError::BandMidpoint(_) => "band_midpoint",
            ValidationError::BandValueMismatch { .. } => "band_value_mismatch",
            ValidationError::IllegalZero => "illegal_zero",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    VeryLow,
    Low,
    Moderate,
    High,
    VeryHigh,
    Unknown,
}

impl Band {
    pub const NAMED: [Band; 5] = [Band::VeryLow, Band::Low, Band::Moderate, Band::High, Band::VeryHigh];

    pub fn as_str(&self) -> &'static str {
        match self {
            Band::VeryLow => "very_low",
            Band::Low => "low",
            Band::Moderate => "moderate",
            Band::High => "high",
            Band::VeryHigh => "very_high",
            Band::Unknown => "unknown",
        }
    }

    fn parse(s: &str) -> Option<Band> {
        [Band::VeryLow, Band::Low, Band::Moderate, Band::High, Band::VeryHigh, Band::Unknown]
            .into_iter()
            .find(|b| b.as_str() == s)
    }

    /// Band limits in cents, `None` for unknown.
    pub fn cents(&self) -> Option<(i64, i64)> {
        let k = match self {
            Band::VeryLow => 0,
            Band::Low => 1,
            Band::Moderate => 2,
            Band::High => 3,
            Band::VeryHigh => 4,
            Band::Unknown => return None,
        };
        Some((20 * k, 20 * k + 20))
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt1Response {
    pub structure_type: String,
    pub facade_indicators: Vec<String>,
    pub n_facade_indicators: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt2Response {
    pub env_indicators: Vec<String>,
    pub n_env_indicators: u64,
    pub canopy_indicators: Vec<String>,
    pub n_canopy_indicators: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandedEstimate {
    pub band: Band,
    pub value: Option<f64>,
    /// Only present for the poverty prompt.
    pub evidence_counts: BTreeMap<String, u64>,
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Validated {
    Structure(Prompt1Response),
    Environment(Prompt2Response),
    Canopy(BandedEstimate),
    Poverty(BandedEstimate),
}

/// Earlier replies of the same round, used for cross-prompt checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChainContext<'a> {
    pub structure: Option<&'a Prompt1Response>,
    pub environment: Option<&'a Prompt2Response>,
}

type VResult<T> = Result<T, ValidationError>;

fn schema(field: &str) -> ValidationError {
    ValidationError::SchemaViolation(field.to_string())
}

fn check_fields(obj: &Map<String, Value>, required: &[&str], optional: &[&str]) -> VResult<()> {
    for k in obj.keys() {
        if !required.contains(&k.as_str()) && !optional.contains(&k.as_str()) {
            return Err(schema(k));
        }
    }
    for r in required {
        if !obj.contains_key(*r) {
            return Err(schema(r));
        }
    }
    Ok(())
}

fn get_count(obj: &Map<String, Value>, field: &str) -> VResult<u64> {
    obj.get(field).and_then(Value::as_u64).ok_or_else(|| schema(field))
}

fn get_notes(obj: &Map<String, Value>) -> VResult<Option<String>> {
    match obj.get("notes") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.chars().count() <= NOTES_MAX => Ok(Some(s.clone())),
        Some(_) => Err(schema("notes")),
    }
}

fn is_token(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn get_tokens(
    obj: &Map<String, Value>,
    field: &str,
    allowed: Option<&[&str]>,
    count_field: &str,
) -> VResult<(Vec<String>, u64)> {
    let arr = obj.get(field).and_then(Value::as_array).ok_or_else(|| schema(field))?;
    let mut out = Vec::with_capacity(arr.len());
    let mut seen = BTreeSet::new();
    for v in arr {
        let s = v.as_str().ok_or_else(|| schema(field))?;
        let known = match allowed {
            Some(list) => list.contains(&s),
            None => is_token(s),
        };
        if !known {
            return Err(ValidationError::UnknownToken(s.to_string()));
        }
        if !seen.insert(s) {
            return Err(schema(field));
        }
        out.push(s.to_string());
    }
    let declared = get_count(obj, count_field)?;
    if declared != out.len() as u64 {
        return Err(ValidationError::CountMismatch {
            field: count_field.to_string(),
            declared,
            actual: out.len() as u64,
        });
    }
    Ok((out, declared))
}

fn parse_object(raw: &str) -> VResult<Map<String, Value>> {
    match serde_json::from_str::<Value>(raw) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ValidationError::NotJson("top level is not an object".into())),
        Err(e) => Err(ValidationError::NotJson(e.to_string())),
    }
}

fn validate_p1(obj: &Map<String, Value>) -> VResult<Prompt1Response> {
    check_fields(obj, &["structure_type", "facade_indicators", "n_facade_indicators"], &["notes"])?;
    let st = obj.get("structure_type").and_then(Value::as_str).ok_or_else(|| schema("structure_type"))?;
    if !STRUCTURE_TYPES.contains(&st) {
        return Err(ValidationError::UnknownToken(st.to_string()));
    }
    let (facade, n) = get_tokens(obj, "facade_indicators", None, "n_facade_indicators")?;
    Ok(Prompt1Response {
        structure_type: st.to_string(),
        facade_indicators: facade,
        n_facade_indicators: n,
        notes: get_notes(obj)?,
    })
}

fn validate_p2(obj: &Map<String, Value>) -> VResult<Prompt2Response> {
    check_fields(
        obj,
        &["env_indicators", "n_env_indicators", "canopy_indicators", "n_canopy_indicators"],
        &["notes"],
    )?;
    let (env, n_env) = get_tokens(obj, "env_indicators", Some(&ENV_TOKENS), "n_env_indicators")?;
    let (canopy, n_canopy) = get_tokens(obj, "canopy_indicators", Some(&CANOPY_TOKENS), "n_canopy_indicators")?;
    Ok(Prompt2Response {
        env_indicators: env,
        n_env_indicators: n_env,
        canopy_indicators: canopy,
        n_canopy_indicators: n_canopy,
        notes: get_notes(obj)?,
    })
}

/// Shared band/value checks. `zero_allowed` is `None` when the zero rule
/// cannot be evaluated (no evidence available).
fn check_banded(
    band: Band,
    value: Option<f64>,
    value_field: &str,
    zero_allowed: Option<bool>,
    reject_midpoints: bool,
) -> VResult<()> {
    let v = match (band, value) {
        (Band::Unknown, None) => return Ok(()),
        (Band::Unknown, Some(_)) | (_, None) => return Err(schema(value_field)),
        (_, Some(v)) => v,
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(schema(value_field));
    }
    let scaled = v * 100.0;
    let cents = scaled.round() as i64;
    if (scaled - cents as f64).abs() > 1e-6 {
        return Err(ValidationError::NotRounded(v));
    }
    if cents > 0 && cents % 20 == 0 {
        return Err(ValidationError::BandCutpoint(v));
    }
    let (lo, hi) = band.cents().expect("named band");
    if cents == 0 {
        if zero_allowed == Some(false) {
            return Err(ValidationError::IllegalZero);
        }
        return if lo == 0 {
            Ok(())
        } else {
            Err(ValidationError::BandValueMismatch { band, value: v })
        };
    }
    if reject_midpoints && cents % 20 == 10 {
        return Err(ValidationError::BandMidpoint(v));
    }
    if cents <= lo || cents >= hi {
        return Err(ValidationError::BandValueMismatch { band, value: v });
    }
    Ok(())
}

fn get_band(obj: &Map<String, Value>, field: &str) -> VResult<Band> {
    let s = obj.get(field).and_then(Value::as_str).ok_or_else(|| schema(field))?;
    Band::parse(s).ok_or_else(|| ValidationError::UnknownToken(s.to_string()))
}

fn get_value(obj: &Map<String, Value>, field: &str) -> VResult<Option<f64>> {
    match obj.get(field) {
        Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n.as_f64().map(Some).ok_or_else(|| schema(field)),
        _ => Err(schema(field)),
    }
}

fn validate_p3(obj: &Map<String, Value>, ctx: &ChainContext<'_>) -> VResult<BandedEstimate> {
    check_fields(obj, &["canopy_band", "canopy_share_0_1"], &["notes"])?;
    let band = get_band(obj, "canopy_band")?;
    let value = get_value(obj, "canopy_share_0_1")?;
    let notes = get_notes(obj)?;
    let zero_allowed = ctx.environment.map(|e| e.n_canopy_indicators == 0);
    check_banded(band, value, "canopy_share_0_1", zero_allowed, false)?;
    Ok(BandedEstimate {
        band,
        value,
        evidence_counts: BTreeMap::new(),
        notes,
    })
}

fn validate_p4(obj: &Map<String, Value>, ctx: &ChainContext<'_>) -> VResult<BandedEstimate> {
    check_fields(obj, &["poverty_band", "poverty_proxy_0_1", "evidence_counts"], &["notes"])?;
    let band = get_band(obj, "poverty_band")?;
    let value = get_value(obj, "poverty_proxy_0_1")?;
    let notes = get_notes(obj)?;
    let ev = obj
        .get("evidence_counts")
        .and_then(Value::as_object)
        .ok_or_else(|| schema("evidence_counts"))?;
    check_fields(ev, &["n_facade_indicators", "n_env_indicators"], &[])
        .map_err(|e| match e {
            ValidationError::SchemaViolation(f) => ValidationError::SchemaViolation(format!("evidence_counts.{f}")),
            other => other,
        })?;
    let n_facade = get_count(ev, "n_facade_indicators").map_err(|_| schema("evidence_counts.n_facade_indicators"))?;
    let n_env = get_count(ev, "n_env_indicators").map_err(|_| schema("evidence_counts.n_env_indicators"))?;
    if let Some(p1) = ctx.structure {
        if p1.n_facade_indicators != n_facade {
            return Err(ValidationError::CountMismatch {
                field: "evidence_counts.n_facade_indicators".into(),
                declared: n_facade,
                actual: p1.n_facade_indicators,
            });
        }
    }
    if let Some(p2) = ctx.environment {
        if p2.n_env_indicators != n_env {
            return Err(ValidationError::CountMismatch {
                field: "evidence_counts.n_env_indicators".into(),
                declared: n_env,
                actual: p2.n_env_indicators,
            });
        }
    }
    check_banded(band, value, "poverty_proxy_0_1", Some(n_facade == 0 && n_env == 0), true)?;
    Ok(BandedEstimate {
        band,
        value,
        evidence_counts: BTreeMap::from([
            ("n_facade_indicators".to_string(), n_facade),
            ("n_env_indicators".to_string(), n_env),
        ]),
        notes,
    })
}

/// Validates a reply on its own. Cross-prompt checks need [`validate_in_chain`].
pub fn validate_response(prompt: PromptId, raw: &str) -> Result<Validated, ValidationError> {
    validate_in_chain(prompt, raw, &ChainContext::default())
}

pub fn validate_in_chain(prompt: PromptId, raw: &str, ctx: &ChainContext<'_>) -> Result<Validated, ValidationError> {
    let obj = parse_object(raw)?;
    match prompt {
        PromptId::Structure => validate_p1(&obj).map(Validated::Structure),
        PromptId::Environment => validate_p2(&obj).map(Validated::Environment),
        PromptId::Canopy => validate_p3(&obj, ctx).map(Validated::Canopy),
        PromptId::Poverty => validate_p4(&obj, ctx).map(Validated::Poverty),
    }
}

/// Full prompt text, with earlier replies injected for the chained prompts.
pub fn render_prompt(prompt: PromptId, ctx: &ChainContext<'_>) -> String {
    let mut out = format!("{PREAMBLE}\n\n{}", prompt.text());
    let vars = match prompt {
        PromptId::Canopy => ctx.environment.map(|e| {
            json!({
                "canopy_indicators": e.canopy_indicators,
                "n_canopy_indicators": e.n_canopy_indicators,
            })
        }),
        PromptId::Poverty => match (ctx.structure, ctx.environment) {
            (Some(s), Some(e)) => Some(json!({
                "structure_type": s.structure_type,
                "facade_indicators": s.facade_indicators,
                "n_facade_indicators": s.n_facade_indicators,
                "env_indicators": e.env_indicators,
                "n_env_indicators": e.n_env_indicators,
            })),
            _ => None,
        },
        _ => None,
    };
    if let Some(v) = vars {
        out.push_str("\n\nVariables:\n");
        out.push_str(&serde_json::to_string(&v).expect("json"));
    }
    out
}

fn corrective(err: &ValidationError) -> String {
    format!("\n\nYour previous reply was rejected ({err}). Return only the JSON object, following every rule above.")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointRequest {
    pub model_name: String,
    pub image_ref: String,
    pub prompt_id: PromptId,
    pub round: u32,
    pub attempt: u32,
    pub prompt: String,
    pub temperature: f64,
}

impl EndpointRequest {
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("json");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EndpointError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
}

/// Anything that turns a request into raw reply text.
pub trait EndpointClient: Send + Sync {
    fn complete(&self, req: &EndpointRequest) -> Result<String, EndpointError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockProfile {
    Affluent,
    Deprived,
    Mixed,
}

impl std::str::FromStr for MockProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "affluent" => Ok(MockProfile::Affluent),
            "deprived" => Ok(MockProfile::Deprived),
            "mixed" => Ok(MockProfile::Mixed),
            _ => Err(format!("unknown mock profile `{s}`")),
        }
    }
}

/// Deterministic stand-in for a vision-language endpoint.
///
/// Replies depend only on `(seed, image_ref, prompt_id, round)`, plus the
/// attempt number when `flaky > 0`.
#[derive(Debug, Clone)]
pub struct MockEndpoint {
    pub seed: u64,
    pub profile: MockProfile,
    /// Probability that an attempt returns prose instead of JSON.
    pub flaky: f64,
}

impl MockEndpoint {
    pub fn new(seed: u64, profile: MockProfile) -> Self {
        MockEndpoint { seed, profile, flaky: 0.0 }
    }

    fn rng(&self, image_ref: &str, tag: &str, round: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image_ref.as_bytes());
        h.update([0]);
        h.update(tag.as_bytes());
        h.update(round.to_le_bytes());
        let d = h.finalize();
        ChaCha8Rng::from_seed(d.into())
    }

    fn deprived(&self, image_ref: &str) -> bool {
        match self.profile {
            MockProfile::Affluent => false,
            MockProfile::Deprived => true,
            MockProfile::Mixed => self.rng(image_ref, "profile", 0).random::<bool>(),
        }
    }

    fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], max: usize) -> Vec<&'a str> {
        let n = rng.random_range(0..=max.min(pool.len()));
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut chosen: Vec<usize> = idx[..n].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| pool[i]).collect()
    }

    fn p1(&self, image_ref: &str, round: u32) -> Prompt1Response {
        let mut rng = self.rng(image_ref, "p1", round);
        let deprived = self.deprived(image_ref);
        let types: &[&str] = if deprived {
            &["mobile_home", "duplex", "apartment", "single_family_detached"]
        } else {
            &["single_family_detached", "townhouse", "single_family_detached"]
        };
        let st = types[rng.random_range(0..types.len())];
        let facade = Self::pick(&mut rng, &FACADE_EXAMPLES, if deprived { 3 } else { 1 });
        Prompt1Response {
            structure_type: st.into(),
            n_facade_indicators: facade.len() as u64,
            facade_indicators: facade.into_iter().map(String::from).collect(),
            notes: None,
        }
    }

    fn p2(&self, image_ref: &str, round: u32) -> Prompt2Response {
        let mut rng = self.rng(image_ref, "p2", round);
        let deprived = self.deprived(image_ref);
        let env = Self::pick(&mut rng, &ENV_TOKENS, if deprived { 4 } else { 1 });
        let canopy = Self::pick(&mut rng, &CANOPY_TOKENS, if deprived { 1 } else { 3 });
        Prompt2Response {
            n_env_indicators: env.len() as u64,
            env_indicators: env.into_iter().map(String::from).collect(),
            n_canopy_indicators: canopy.len() as u64,
            canopy_indicators: canopy.into_iter().map(String::from).collect(),
            notes: None,
        }
    }

    /// A legal value strictly inside `band`, avoiding cutpoints and midpoints.
    fn value_in(rng: &mut ChaCha8Rng, band: Band) -> f64 {
        let (lo, _) = band.cents().expect("named band");
        let mut c = lo + rng.random_range(1..19);
        if c % 20 == 10 {
            c += 1;
        }
        c as f64 / 100.0
    }

    fn banded(&self, image_ref: &str, round: u32, tag: &str, bands: &[Band]) -> (Band, Option<f64>) {
        let mut rng = self.rng(image_ref, tag, round);
        if rng.random::<f64>() < 0.03 {
            return (Band::Unknown, None);
        }
        let band = bands[rng.random_range(0..bands.len())];
        (band, Some(Self::value_in(&mut rng, band)))
    }

    pub fn reply(&self, req: &EndpointRequest) -> String {
        if self.flaky > 0.0 {
            let mut rng = self.rng(&req.image_ref, &format!("flaky{}", req.prompt_id), req.round * 64 + req.attempt);
            if rng.random::<f64>() < self.flaky {
                return "Sure, here is my assessment of the scene.".into();
            }
        }
        let (img, r) = (req.image_ref.as_str(), req.round);
        let deprived = self.deprived(img);
        let v = match req.prompt_id {
            PromptId::Structure => serde_json::to_value(self.p1(img, r)).expect("json"),
            PromptId::Environment => serde_json::to_value(self.p2(img, r)).expect("json"),
            PromptId::Canopy => {
                let bands: &[Band] = if deprived {
                    &[Band::VeryLow, Band::Low]
                } else {
                    &[Band::Low, Band::Moderate, Band::High]
                };
                let (band, value) = self.banded(img, r, "p3", bands);
                json!({ "canopy_band": band.as_str(), "canopy_share_0_1": value })
            }
            PromptId::Poverty => {
                let bands: &[Band] = if deprived {
                    &[Band::Moderate, Band::High]
                } else {
                    &[Band::VeryLow, Band::Low]
                };
                let (band, value) = self.banded(img, r, "p4", bands);
                let p1 = self.p1(img, r);
                let p2 = self.p2(img, r);
                json!({
                    "poverty_band": band.as_str(),
                    "poverty_proxy_0_1": value,
                    "evidence_counts": {
                        "n_facade_indicators": p1.n_facade_indicators,
                        "n_env_indicators": p2.n_env_indicators,
                    }
                })
            }
        };
        serde_json::to_string(&v).expect("json")
    }
}

impl EndpointClient for MockEndpoint {
    fn complete(&self, req: &EndpointRequest) -> Result<String, EndpointError> {
        Ok(self.reply(req))
    }
}

/// JSON-over-HTTP endpoint. The request body carries the model name, image
/// locator, prompt text and temperature; the response body is the raw reply.
pub struct HttpEndpoint {
    url: String,
    agent: ureq::Agent,
    token: Option<String>,
    transport_retries: u32,
}

impl HttpEndpoint {
    /// `credential_env` names the environment variable holding a bearer
    /// token; the token itself never appears in configuration.
    pub fn new(url: &str, timeout: Duration, credential_env: Option<&str>, transport_retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let token = credential_env.and_then(|name| std::env::var(name).ok());
        HttpEndpoint {
            url: url.to_string(),
            agent,
            token,
            transport_retries,
        }
    }

    fn once(&self, req: &EndpointRequest) -> Result<String, String> {
        let body = json!({
            "model_name": req.model_name,
            "image": req.image_ref,
            "prompt": req.prompt,
            "temperature": req.temperature,
        });
        let mut call = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

impl EndpointClient for HttpEndpoint {
    fn complete(&self, req: &EndpointRequest) -> Result<String, EndpointError> {
        let mut last = String::new();
        for k in 0..=self.transport_retries {
            match self.once(req) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("endpoint call failed (try {}): {e}", k + 1);
                    last = e;
                    if k < self.transport_retries {
                        std::thread::sleep(Duration::from_millis(100 << k.min(6)));
                    }
                }
            }
        }
        Err(EndpointError::Unavailable(last))
    }
}

/// One line of the append-only prompt cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub request_hash: String,
    pub image_ref: String,
    pub prompt_id: PromptId,
    pub round: u32,
    pub attempt: u32,
    pub raw_reply: String,
    pub verdict: String,
    pub timestamp: u64,
}

/// Append-only JSONL cache of endpoint replies keyed by request hash.
pub struct PromptCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, CacheRecord>>,
    file: Option<Mutex<File>>,
}

impl PromptCache {
    pub fn in_memory() -> Self {
        PromptCache {
            path: None,
            entries: Mutex::new(BTreeMap::new()),
            file: None,
        }
    }

    /// Opens (or creates) `dir/prompt_cache.jsonl`, loading existing lines.
    /// A torn final line from an interrupted run is skipped.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("prompt_cache.jsonl");
        let mut entries = BTreeMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) => {
                        entries.insert(r.request_hash.clone(), r);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line ({e})", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(PromptCache {
            path: Some(path),
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &str) -> Option<CacheRecord> {
        self.entries.lock().expect("cache lock").get(hash).cloned()
    }

    pub fn insert(&self, rec: CacheRecord) -> std::io::Result<()> {
        if let Some(f) = &self.file {
            let mut line = serde_json::to_string(&rec).map_err(std::io::Error::other)?;
            line.push('\n');
            let mut f = f.lock().expect("cache file lock");
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries.lock().expect("cache lock").insert(rec.request_hash.clone(), rec);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptChainConfig {
    #[serde(default = "defaults::rounds")]
    pub rounds: u32,
    #[serde(default = "defaults::quorum")]
    pub quorum: u32,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "defaults::model_name")]
    pub model_name: String,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "defaults::max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub credential_env: Option<String>,
}

mod defaults {
    pub fn rounds() -> u32 {
        5
    }
    pub fn quorum() -> u32 {
        3
    }
    pub fn model_name() -> String {
        "gpt-4o".into()
    }
    pub fn temperature() -> f64 {
        0.7
    }
    pub fn timeout_secs() -> u64 {
        60
    }
    pub fn max_retries() -> u32 {
        2
    }
    pub fn max_in_flight() -> usize {
        4
    }
}

impl Default for PromptChainConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

impl PromptChainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rounds < 1 {
            return Err("rounds".into());
        }
        if self.quorum < 1 || self.quorum > self.rounds {
            return Err("quorum".into());
        }
        if self.max_in_flight < 1 {
            return Err("max_in_flight".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationResult {
    pub pano_id: String,
    pub tile_heading: u16,
    pub image_ref: String,
    pub round_values_poverty: Vec<Option<f64>>,
    pub round_values_canopy: Vec<Option<f64>>,
    pub consensus_poverty: Option<f64>,
    pub consensus_canopy: Option<f64>,
    pub n_valid_rounds_poverty: u32,
    pub n_valid_rounds_canopy: u32,
    /// `(prompt, round)` pairs whose retries were exhausted.
    pub failures: Vec<(PromptId, u32)>,
}

#[derive(Debug, thiserror::Error)]
pub enum ElicitError {
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("cache write failed: {0}")]
    Cache(#[from] std::io::Error),
    #[error("tile {0} is not valid")]
    InvalidTile(String),
    #[error("config field `{0}` is invalid")]
    Config(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Mean of the non-null values when at least `quorum` exist. Values are
/// two-decimal, so the sum is taken in integer cents and the result does not
/// depend on round order.
pub fn consensus(values: &[Option<f64>], quorum: u32) -> (Option<f64>, u32) {
    let cents: Vec<i64> = values.iter().flatten().map(|v| (v * 100.0).round() as i64).collect();
    let n = cents.len() as u32;
    if n < quorum || n == 0 {
        return (None, n);
    }
    (Some(cents.iter().sum::<i64>() as f64 / (100.0 * n as f64)), n)
}

struct Chain<'a> {
    cfg: &'a PromptChainConfig,
    endpoint: &'a dyn EndpointClient,
    cache: &'a PromptCache,
    calls: &'a AtomicUsize,
}

impl Chain<'_> {
    fn ask(&self, image_ref: &str, prompt: PromptId, round: u32, ctx: &ChainContext<'_>) -> Result<Option<Validated>, ElicitError> {
        let base = render_prompt(prompt, ctx);
        let mut last_err: Option<ValidationError> = None;
        for attempt in 0..=self.cfg.max_retries {
            let text = match &last_err {
                None => base.clone(),
                Some(e) => format!("{base}{}", corrective(e)),
            };
            let req = EndpointRequest {
                model_name: self.cfg.model_name.clone(),
                image_ref: image_ref.to_string(),
                prompt_id: prompt,
                round,
                attempt,
                prompt: text,
                temperature: self.cfg.temperature,
            };
            let hash = req.hash();
            let raw = match self.cache.get(&hash) {
                Some(rec) => rec.raw_reply,
                None => {
                    self.calls.fetch_add(1, Ordering::Relaxed);
                    let raw = self.endpoint.complete(&req)?;
                    let verdict = match validate_in_chain(prompt, &raw, ctx) {
                        Ok(_) => "ok".to_string(),
                        Err(e) => e.kind().to_string(),
                    };
                    self.cache.insert(CacheRecord {
                        request_hash: hash,
                        image_ref: image_ref.to_string(),
                        prompt_id: prompt,
                        round,
                        attempt,
                        raw_reply: raw.clone(),
                        verdict,
                        timestamp: std::time::SystemTime::now()
                            .duration_since(std::time::UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0),
                    })?;
                    raw
                }
            };
            match validate_in_chain(prompt, &raw, ctx) {
                Ok(v) => return Ok(Some(v)),
                Err(e) => {
                    log::debug!("{image_ref} prompt {prompt} round {round} attempt {attempt}: {e}");
                    last_err = Some(e);
                }
            }
        }
        Ok(None)
    }
}

/// Runs the chain for one valid tile and reports how many endpoint calls
/// were made (cache hits are free).
pub fn run_chain_counted(
    pano_id: &str,
    tile: &TileRecord,
    cfg: &PromptChainConfig,
    endpoint: &dyn EndpointClient,
    cache: &PromptCache,
) -> Result<(ElicitationResult, usize), ElicitError> {
    if !tile.valid {
        return Err(ElicitError::InvalidTile(format!("{pano_id}/{}", tile.heading)));
    }
    let calls = AtomicUsize::new(0);
    let chain = Chain {
        cfg,
        endpoint,
        cache,
        calls: &calls,
    };
    let img = tile.image_ref.as_str();
    let mut poverty = Vec::with_capacity(cfg.rounds as usize);
    let mut canopy = Vec::with_capacity(cfg.rounds as usize);
    let mut failures = Vec::new();
    for round in 0..cfg.rounds {
        let mut note = |p: PromptId, ok: bool| {
            if !ok {
                failures.push((p, round));
            }
        };
        let p1 = match chain.ask(img, PromptId::Structure, round, &ChainContext::default())? {
            Some(Validated::Structure(r)) => Some(r),
            _ => None,
        };
        note(PromptId::Structure, p1.is_some());
        let p2 = match chain.ask(img, PromptId::Environment, round, &ChainContext::default())? {
            Some(Validated::Environment(r)) => Some(r),
            _ => None,
        };
        note(PromptId::Environment, p2.is_some());
        let ctx = ChainContext {
            structure: p1.as_ref(),
            environment: p2.as_ref(),
        };
        let c = if p2.is_some() {
            match chain.ask(img, PromptId::Canopy, round, &ctx)? {
                Some(Validated::Canopy(b)) => Some(b.value),
                _ => None,
            }
        } else {
            None
        };
        note(PromptId::Canopy, c.is_some());
        let p = if p1.is_some() && p2.is_some() {
            match chain.ask(img, PromptId::Poverty, round, &ctx)? {
                Some(Validated::Poverty(b)) => Some(b.value),
                _ => None,
            }
        } else {
            None
        };
        note(PromptId::Poverty, p.is_some());
        canopy.push(c.flatten());
        poverty.push(p.flatten());
    }
    let (consensus_poverty, n_p) = consensus(&poverty, cfg.quorum);
    let (consensus_canopy, n_c) = consensus(&canopy, cfg.quorum);
    Ok((
        ElicitationResult {
            pano_id: pano_id.to_string(),
            tile_heading: tile.heading,
            image_ref: tile.image_ref.clone(),
            round_values_poverty: poverty,
            round_values_canopy: canopy,
            consensus_poverty,
            consensus_canopy,
            n_valid_rounds_poverty: n_p,
            n_valid_rounds_canopy: n_c,
            failures,
        },
        calls.into_inner(),
    ))
}

pub fn run_chain(
    pano_id: &str,
    tile: &TileRecord,
    cfg: &PromptChainConfig,
    endpoint: &dyn EndpointClient,
    cache: &PromptCache,
) -> Result<ElicitationResult, ElicitError> {
    run_chain_counted(pano_id, tile, cfg, endpoint, cache).map(|(r, _)| r)
}

/// Elicits every valid tile with at most `cfg.max_in_flight` concurrent
/// chains. Results are ordered by panorama and heading.
pub fn elicit_tiles(
    panos: &[PanoramaRecord],
    cfg: &PromptChainConfig,
    endpoint: &dyn EndpointClient,
    cache: &PromptCache,
) -> Result<Vec<ElicitationResult>, ElicitError> {
    cfg.validate().map_err(ElicitError::Config)?;
    let jobs: Vec<(&str, &TileRecord)> = panos
        .iter()
        .flat_map(|p| p.valid_tiles().map(move |t| (p.pano_id.as_str(), t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| ElicitError::Pool(e.to_string()))?;
    let mut out: Vec<ElicitationResult> = pool.install(|| {
        jobs.par_iter()
            .map(|(pano, tile)| run_chain(pano, tile, cfg, endpoint, cache))
            .collect::<Result<_, _>>()
    })?;
    out.sort_by(|a, b| (a.pano_id.as_str(), a.tile_heading).cmp(&(b.pano_id.as_str(), b.tile_heading)));
    let failed: usize = out.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        log::warn!("{failed} prompt/round pair(s) exhausted their retries");
    }
    Ok(out)
}

pub fn write_results_jsonl(results: &[ElicitationResult], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_results_jsonl(path: &Path) -> std::io::Result<Vec<ElicitationResult>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn kind(p: u8, raw: &str) -> &'static str {
        match validate_response(PromptId::try_from(p).unwrap(), raw) {
            Ok(_) => "ok",
            Err(e) => e.kind(),
        }
    }

    #[test]
    fn canopy_band_rules() {
        assert_eq!(kind(3, r#"{"canopy_band":"low","canopy_share_0_1":0.31}"#), "ok");
        assert_eq!(kind(3, r#"{"canopy_band":"low","canopy_share_0_1":0.20}"#), "band_cutpoint");
        assert_eq!(kind(3, r#"{"canopy_band":"very_high","canopy_share_0_1":1.0}"#), "band_cutpoint");
        assert_eq!(kind(3, r#"{"canopy_band":"low","canopy_share_0_1":0.45}"#), "band_value_mismatch");
        assert_eq!(kind(3, r#"{"canopy_band":"unknown","canopy_share_0_1":null}"#), "ok");
        assert_eq!(kind(3, r#"{"canopy_band":"unknown","canopy_share_0_1":0.3}"#), "schema_violation");
        assert_eq!(kind(3, r#"{"canopy_band":"low","canopy_share_0_1":null}"#), "schema_violation");
        assert_eq!(kind(3, r#"{"canopy_band":"low","canopy_share_0_1":0.315}"#), "not_rounded");
        // canopy midpoints are not forbidden
        assert_eq!(kind(3, r#"{"canopy_band":"moderate","canopy_share_0_1":0.5}"#), "ok");
    }

    #[test]
    fn poverty_zero_rule() {
        let ok = r#"{"poverty_band":"very_low","poverty_proxy_0_1":0.00,"evidence_counts":{"n_facade_indicators":0,"n_env_indicators":0}}"#;
        assert_eq!(kind(4, ok), "ok");
        let bad = r#"{"poverty_band":"very_low","poverty_proxy_0_1":0.00,"evidence_counts":{"n_facade_indicators":0,"n_env_indicators":2}}"#;
        assert_eq!(kind(4, bad), "illegal_zero");
        let mid = r#"{"poverty_band":"moderate","poverty_proxy_0_1":0.50,"evidence_counts":{"n_facade_indicators":1,"n_env_indicators":2}}"#;
        assert_eq!(kind(4, mid), "band_midpoint");
    }

    #[test]
    fn canopy_zero_needs_chain_context() {
        let raw = r#"{"canopy_band":"very_low","canopy_share_0_1":0}"#;
        let p2 = Prompt2Response {
            env_indicators: vec![],
            n_env_indicators: 0,
            canopy_indicators: vec!["palm".into()],
            n_canopy_indicators: 1,
            notes: None,
        };
        let ctx = ChainContext { structure: None, environment: Some(&p2) };
        assert_eq!(validate_in_chain(PromptId::Canopy, raw, &ctx).unwrap_err(), ValidationError::IllegalZero);
        assert!(validate_response(PromptId::Canopy, raw).is_ok());
    }

    #[test]
    fn token_and_count_checks() {
        assert_eq!(kind(1, r#"{"structure_type":"duplex","facade_indicators":["peeling_paint"],"n_facade_indicators":1,"notes":""}"#), "ok");
        assert_eq!(kind(1, r#"{"structure_type":"castle","facade_indicators":[],"n_facade_indicators":0}"#), "unknown_token");
        assert_eq!(kind(1, r#"{"structure_type":"duplex","facade_indicators":["a"],"n_facade_indicators":2}"#), "count_mismatch");
        assert_eq!(kind(2, r#"{"env_indicators":["debirs"],"n_env_indicators":1,"canopy_indicators":[],"n_canopy_indicators":0}"#), "unknown_token");
        assert_eq!(kind(2, r#"{"env_indicators":[],"n_env_indicators":0,"canopy_indicators":["tree"],"n_canopy_indicators":1,"extra":1}"#), "schema_violation");
        assert_eq!(kind(2, "```json\n{}\n```"), "not_json");
        let long = "x".repeat(101);
        assert_eq!(kind(1, &format!(r#"{{"structure_type":"other","facade_indicators":[],"n_facade_indicators":0,"notes":"{long}"}}"#)), "schema_violation");
    }

    #[test]
    fn consensus_examples() {
        let (c, n) = consensus(&[Some(0.21), Some(0.25), Some(0.23), Some(0.27), Some(0.24)], 3);
        assert_eq!((c, n), (Some(0.24), 5));
        assert_eq!(consensus(&[Some(0.3), None, Some(0.3), Some(0.3), None], 3), (Some(0.3), 3));
        assert_eq!(consensus(&[None, None, Some(0.5), None, None], 3), (None, 1));
    }

    fn tile(i: usize) -> TileRecord {
        TileRecord { heading: 90, valid: true, image_ref: format!("img/{i}.jpg") }
    }

    struct Counting<'a>(&'a dyn EndpointClient, AtomicUsize);
    impl EndpointClient for Counting<'_> {
        fn complete(&self, req: &EndpointRequest) -> Result<String, EndpointError> {
            self.1.fetch_add(1, Ordering::Relaxed);
            self.0.complete(req)
        }
    }

    #[test]
    fn mock_is_deterministic_and_valid() {
        let m = MockEndpoint::new(7, MockProfile::Mixed);
        let cfg = PromptChainConfig::default();
        for i in 0..40 {
            let cache = PromptCache::in_memory();
            let r = run_chain("p", &tile(i), &cfg, &m, &cache).unwrap();
            assert!(r.failures.is_empty(), "{:?}", r.failures);
            let r2 = run_chain("p", &tile(i), &cfg, &m, &PromptCache::in_memory()).unwrap();
            assert_eq!(r, r2);
        }
    }

    #[test]
    fn profiles_separate() {
        let cfg = PromptChainConfig::default();
        let mean = |profile| {
            let m = MockEndpoint::new(3, profile);
            let v: Vec<f64> = (0..100)
                .filter_map(|i| run_chain("p", &tile(i), &cfg, &m, &PromptCache::in_memory()).unwrap().consensus_poverty)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(MockProfile::Affluent) < mean(MockProfile::Deprived));
    }

    #[test]
    fn warm_cache_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockEndpoint { seed: 1, profile: MockProfile::Deprived, flaky: 0.3 };
        let cfg = PromptChainConfig::default();
        let first = {
            let cache = PromptCache::open(dir.path()).unwrap();
            let c = Counting(&mock, AtomicUsize::new(0));
            let r = run_chain("p", &tile(0), &cfg, &c, &cache).unwrap();
            assert!(c.1.load(Ordering::Relaxed) > 20);
            r
        };
        let cache = PromptCache::open(dir.path()).unwrap();
        let c = Counting(&mock, AtomicUsize::new(0));
        let (again, calls) = run_chain_counted("p", &tile(0), &cfg, &c, &cache).unwrap();
        assert_eq!(calls, 0);
        assert_eq!(c.1.load(Ordering::Relaxed), 0);
        assert_eq!(again, first);
    }

    #[test]
    fn retries_exhaust_to_null() {
        struct Prose;
        impl EndpointClient for Prose {
            fn complete(&self, _: &EndpointRequest) -> Result<String, EndpointError> {
                Ok("I cannot help with that.".into())
            }
        }
        let cfg = PromptChainConfig { rounds: 2, quorum: 1, ..Default::default() };
        let r = run_chain("p", &tile(0), &cfg, &Prose, &PromptCache::in_memory()).unwrap();
        assert_eq!(r.round_values_poverty, vec![None, None]);
        assert_eq!(r.consensus_canopy, None);
        assert!(r.failures.contains(&(PromptId::Structure, 0)));
    }

    #[test]
    fn http_endpoint_round_trip() {
        use std::io::Read;
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = s.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(h) = text.find("\r\n\r\n") {
                    let len: usize = text[..h]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= h + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"{"canopy_band":"low","canopy_share_0_1":0.33}"#;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            String::from_utf8(buf).unwrap()
        });
        let ep = HttpEndpoint::new(&format!("http://{addr}/v1"), Duration::from_secs(5), None, 0);
        let req = EndpointRequest {
            model_name: "m".into(),
            image_ref: "img/1.jpg".into(),
            prompt_id: PromptId::Canopy,
            round: 0,
            attempt: 0,
            prompt: "p".into(),
            temperature: 0.0,
        };
        let reply = ep.complete(&req).unwrap();
        assert!(validate_response(PromptId::Canopy, &reply).is_ok());
        let seen = server.join().unwrap();
        assert!(seen.contains("img/1.jpg"));
    }

    proptest! {
        #[test]
        fn consensus_order_free(mut v in prop::collection::vec(prop::option::of(0u32..=100), 5), seed in any::<u64>()) {
            let vals: Vec<Option<f64>> = v.iter().map(|c| c.map(|c| c as f64 / 100.0)).collect();
            let base = consensus(&vals, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..v.len()).rev() {
                let j = rng.random_range(0..=i);
                v.swap(i, j);
            }
            let shuffled: Vec<Option<f64>> = v.iter().map(|c| c.map(|c| c as f64 / 100.0)).collect();
            prop_assert_eq!(consensus(&shuffled, 3), base);
        }

        #[test]
        fn accepted_values_sit_inside_band(cents in 0i64..=100, b in 0usize..5) {
            let band = Band::NAMED[b];
            let raw = format!(r#"{{"canopy_band":"{}","canopy_share_0_1":{}}}"#, band, cents as f64 / 100.0);
            if let Ok(Validated::Canopy(est)) = validate_response(PromptId::Canopy, &raw) {
                let v = est.value.unwrap();
                if v > 0.0 {
                    let (lo, hi) = band.cents().unwrap();
                    prop_assert!(lo < cents && cents < hi);
                }
            }
        }
    }
}
