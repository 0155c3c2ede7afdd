//! Synthetic inputs shared by the criterion benches.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use placelens::econ::{Design, INTERCEPT, TREATMENT};
use placelens::spatial::{self, DEFAULT_SNAP_TOLERANCE};
use placelens::{Approach, StackedRow, WeightsMatrix};

pub fn lattice_weights(side: usize) -> WeightsMatrix {
    spatial::queen_weights(&spatial::lattice(side, side), DEFAULT_SNAP_TOLERANCE).expect("lattice is valid")
}

/// Lag-model data on `w`: intercept, treatment and one covariate.
pub fn sar_data(w: &WeightsMatrix, rho: f64, seed: u64) -> (DVector<f64>, Design) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = w.len();
    let t: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.4) as u8 as f64).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let rhs: Vec<f64> = (0..n)
        .map(|i| 0.6 * t[i] + 0.3 * x[i] + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y = placelens::simgen::solve_lag(w, rho, &rhs).expect("|rho| < 1");
    let design = Design::from_columns(vec![
        (INTERCEPT.into(), vec![1.0; n]),
        (TREATMENT.into(), t),
        ("x1".into(), x),
    ]);
    (DVector::from_vec(y), design)
}

/// `n` points around a line with heavy-ish noise, intercept plus slope.
pub fn quantile_data(n: usize, seed: u64) -> (DVector<f64>, Design) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * x[i] + rng.sample::<f64, _>(StandardNormal).powi(3));
    (y, Design::from_columns(vec![(INTERCEPT.into(), vec![1.0; n]), ("x".into(), x)]))
}

/// Stacked rows for a `side × side` lattice with nine zip codes.
pub fn stacked_rows(side: usize, seed: u64) -> Vec<StackedRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(3 * side * side);
    for r in 0..side {
        for c in 0..side {
            let treated = rng.random::<f64>() < 0.4;
            let base = 0.5 * treated as u8 as f64 + rng.sample::<f64, _>(StandardNormal);
            let zip = (r * 3 / side) * 3 + c * 3 / side;
            for a in Approach::ALL {
                rows.push(StackedRow {
                    cbg_id: spatial::lattice_id(r, c),
                    approach: a,
                    y: base + 0.5 * rng.sample::<f64, _>(StandardNormal),
                    redlined: treated,
                    covariates: BTreeMap::new(),
                    zip_code: format!("z{zip}"),
                });
            }
        }
    }
    rows
}
