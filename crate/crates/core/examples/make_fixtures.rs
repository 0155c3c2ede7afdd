//! Regenerates the calibrated stacked-regression fixture under
//! `tests/fixtures/stacked_sar/`.
//!
//! ```text
//! cargo run --release -p placelens-core --example make_fixtures
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use placelens::aggregate::PanelOptions;
use placelens::simgen::{self, ApproachBias, DgpConfig, StackTargets};
use placelens::stackinf::{self, PairsResampler};
use placelens::{Approach, Outcome, Sample, StackSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut approach_bias = BTreeMap::new();
    approach_bias.insert(
        Approach::Mllm,
        ApproachBias {
            attenuation: 0.85,
            shift: 0.0,
            noise_sd: 1.2,
        },
    );
    approach_bias.insert(
        Approach::Segmentation,
        ApproachBias {
            attenuation: 0.25,
            shift: 0.0,
            noise_sd: 0.8,
        },
    );
    let cfg = DgpConfig {
        rows: 20,
        cols: 20,
        rho_true: 0.4,
        ideal_share: 1.0,
        treatment_share: 0.45,
        n_covariates: 0,
        approach_bias,
        seed: 8,
        ..DgpConfig::default()
    };
    let targets = StackTargets {
        outcome: Outcome::Poverty,
        sample: Sample::VsIdeal,
        spec: StackSpec::Sar,
        delta0: 0.58,
        theta: BTreeMap::from([(Approach::Mllm, -0.11), (Approach::Segmentation, -0.79)]),
    };
    let options = PanelOptions::default();
    let mut data = simgen::generate(&cfg)?;
    let fit = simgen::calibrate(&mut data, &targets, options, 1e-5)?;
    println!(
        "delta0 {:.5}  theta_mllm {:.5}  theta_seg {:.5}",
        fit.delta0,
        fit.theta[&Approach::Mllm],
        fit.theta[&Approach::Segmentation]
    );

    let panels = data.panels(options)?;
    let rows = stackinf::stack_panel(&panels[&Sample::VsIdeal], Outcome::Poverty, &[]);
    let dist = stackinf::cluster_bootstrap(
        &rows,
        StackSpec::Sar,
        Approach::Authoritative,
        Some(&data.weights),
        199,
        cfg.seed,
        &PairsResampler,
    )?;
    for a in [Approach::Mllm, Approach::Segmentation] {
        let iv = dist.theta_interval(a).expect("draws");
        println!("theta {a}: [{:.3}, {:.3}]", iv.low, iv.high);
    }

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stacked_sar");
    data.write_bundle(&dir, options)?;
    println!("wrote {}", dir.display());
    Ok(())
}
