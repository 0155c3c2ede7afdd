//! placelens: street-view neighborhood indicators and place-based policy evaluation.
//!
//! The crate turns structured street-view observations into standardized
//! neighborhood indicators and estimates treatment effects for a
//! place-based intervention across several measurement approaches:
//!
//! - [`ingest`]: manifests, authoritative outcomes, segmentation shares, geometry
//! - [`elicit`]: the four-prompt elicitation chain, reply validation, self-consistency
//! - [`aggregate`]: tile → census block group aggregation, z-scores, analysis panels
//! - [`spatial`]: queen-contiguity weights and spectral services for the lag model
//! - [`econ`]: OLS, fixed effects, spatial-lag ML and the specification ladder
//! - [`stackinf`]: stacked regression, CBG cluster bootstrap, interaction nullity tests
//! - [`quantfit`]: quantile regression by simplex, pseudo-R², R² comparisons
//! - [`simgen`]: synthetic lattices with known effects for validation
//! - [`pipeline`]: the staged, resumable run used by the CLI

pub mod aggregate;
pub mod econ;
pub mod elicit;
pub mod format;
pub mod ingest;
pub mod linalg;
pub mod pipeline;
pub mod plot;
pub mod quantfit;
pub mod simgen;
pub mod spatial;
pub mod stackinf;
pub mod stats;
pub mod types;

pub use aggregate::{Panel, PanelRow};
pub use econ::{FitResult, ModelSpec, Variant};
pub use spatial::{Geometry, SpectralWeights, WeightsMatrix};
pub use stackinf::{BootstrapDistribution, StackSpec, StackedFit, StackedRow};
pub use types::{Approach, Comparison, HolcGroup, Outcome, Sample};
