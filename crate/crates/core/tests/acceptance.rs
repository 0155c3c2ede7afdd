//! Acceptance suite. Each test prints one `PASS`/`FAIL` line (written
//! straight to stderr so it shows without `--nocapture`) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use placelens::aggregate::read_panels_csv;
use placelens::econ::{self, Design, SarOptions, SarSe, SeRequest, INTERCEPT, TREATMENT};
use placelens::elicit::{validate_in_chain, ChainContext, PromptId, Prompt1Response, Prompt2Response};
use placelens::pipeline::{self, RunConfig};
use placelens::quantfit::{self, fit_quantile};
use placelens::simgen::{self, DgpConfig};
use placelens::spatial::{self, queen_weights, DEFAULT_SNAP_TOLERANCE};
use placelens::stackinf::{
    self, cluster_bootstrap, equivalence_test, LabelledDistribution, PairsResampler, StackedRow, Verdict,
};
use placelens::{Approach, Outcome, Sample, SpectralWeights, StackSpec, WeightsMatrix};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "\n{tag} criterion {n:>2} {name}: {detail}");
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn lattice_weights(rows: usize, cols: usize) -> WeightsMatrix {
    queen_weights(&spatial::lattice(rows, cols), DEFAULT_SNAP_TOLERANCE).unwrap()
}

/// Intercept, treatment and one covariate, with `y = (I - ρW)^{-1}(Xβ + ε)`.
fn sar_instance(w: &WeightsMatrix, rho: f64, delta: f64, rng: &mut ChaCha8Rng) -> (DVector<f64>, Design) {
    let n = w.len();
    let t: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.4) as u8 as f64).collect();
    let x: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let rhs: Vec<f64> = (0..n).map(|i| 1.0 + delta * t[i] + 0.3 * x[i] + normal(rng)).collect();
    let y = simgen::solve_lag(w, rho, &rhs).unwrap();
    let design = Design::from_columns(vec![
        (INTERCEPT.into(), vec![1.0; n]),
        (TREATMENT.into(), t),
        ("x1".into(), x),
    ]);
    (DVector::from_vec(y), design)
}

/// Concentrated log-likelihood from dense matrices: one LU determinant and
/// one least-squares solve per ρ.
fn dense_concentrated_loglik(y: &DVector<f64>, x: &DMatrix<f64>, w: &DMatrix<f64>, rho: f64) -> f64 {
    let n = y.len();
    let a = DMatrix::<f64>::identity(n, n) - w * rho;
    let det = a.clone().lu().determinant();
    if det <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let ay = &a * y;
    let xtx = x.transpose() * x;
    let beta = xtx.cholesky().unwrap().solve(&(x.transpose() * &ay));
    let e = ay - x * beta;
    -0.5 * n as f64 * (e.dot(&e) / n as f64).ln() + det.ln()
}

#[test]
fn criterion_01_sar_grid_oracle() {
    let w = lattice_weights(7, 7);
    let dense = w.row_standardized();
    let mut worst: f64 = 0.0;
    let mut elapsed = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (y, design) = sar_instance(&w, 0.5, 0.6, &mut rng);
        let start = Instant::now();
        let sw = SpectralWeights::new(w.clone());
        let fit = econ::fit_sar(&y, &design, &sw, SarSe::ModelBased, SarOptions::default()).unwrap();
        elapsed += start.elapsed().as_secs_f64();
        let rho_hat = fit.rho.unwrap();

        let mut best = (f64::NAN, f64::NEG_INFINITY);
        let steps = 19_998;
        for i in 1..=steps {
            let rho = -1.0 + i as f64 * 1e-4;
            let ll = dense_concentrated_loglik(&y, &design.matrix, &dense, rho);
            if ll > best.1 {
                best = (rho, ll);
            }
        }
        worst = worst.max((rho_hat - best.0).abs());
    }
    let pass = worst <= 1e-3 && elapsed < 5.0;
    report(
        1,
        "SAR grid oracle",
        pass,
        &format!("max |rho_hat - rho_grid| = {worst:.2e} over 5 instances (tol 1e-3), fit time {elapsed:.3}s (< 5s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_sar_consistency() {
    let start = Instant::now();
    let w = lattice_weights(30, 30);
    let sw = SpectralWeights::new(w.clone());
    let delta = 0.6;
    let mut lines = Vec::new();
    let mut pass = true;
    for (k, rho) in [0.0, 0.4].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + k as u64);
        let mut sum = 0.0;
        let mut covered = 0;
        for _ in 0..100 {
            let (y, design) = sar_instance(&w, rho, delta, &mut rng);
            let fit = econ::fit_sar(&y, &design, &sw, SarSe::ModelBased, SarOptions::default()).unwrap();
            sum += fit.rho.unwrap();
            let d = fit.coef(TREATMENT).unwrap();
            let se = fit.se(TREATMENT).unwrap();
            if (d - delta).abs() <= 2.0 * se {
                covered += 1;
            }
        }
        let mean = sum / 100.0;
        pass &= (mean - rho).abs() <= 0.05 && covered >= 90;
        lines.push(format!("rho={rho}: mean rho_hat {mean:.4}, coverage {covered}/100"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    report(2, "SAR consistency", pass, &format!("{}; {secs:.1}s (< 120s)", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_03_fe_equals_dummy_ols() {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut done = 0;
    while done < 50 {
        let n = 60;
        let groups: Vec<usize> = (0..n).map(|i| i % 6).collect();
        let t: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect();
        let varies = (0..6).all(|g| {
            let v: Vec<f64> = (0..n).filter(|&i| groups[i] == g).map(|i| t[i]).collect();
            v.iter().any(|&a| a != v[0])
        });
        if !varies {
            continue;
        }
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let alpha: Vec<f64> = (0..6).map(|_| 2.0 * normal(&mut rng)).collect();
        let y = DVector::from_fn(n, |i, _| alpha[groups[i]] + 0.7 * t[i] - 0.4 * x[i] + normal(&mut rng));
        let labels: Vec<String> = groups.iter().map(|g| format!("z{g}")).collect();

        let within = Design::from_columns(vec![(TREATMENT.into(), t.clone()), ("x1".into(), x.clone())]);
        let fe = econ::fit_fe(&y, &within, &labels, SeRequest::Classical).unwrap();

        let mut cols = vec![(TREATMENT.to_string(), t), ("x1".to_string(), x)];
        for g in 0..6 {
            cols.push((format!("d{g}"), groups.iter().map(|&h| (h == g) as u8 as f64).collect()));
        }
        let dummy = econ::fit_ols(&y, &Design::from_columns(cols), SeRequest::Classical).unwrap();
        worst = worst.max((fe.coef(TREATMENT).unwrap() - dummy.coef(TREATMENT).unwrap()).abs());
        done += 1;
    }
    let pass = worst <= 1e-8;
    report(3, "FE equivalence", pass, &format!("max |delta_within - delta_dummy| = {worst:.2e} on 50 instances (tol 1e-8)"));
    assert!(pass);
}

/// `(X'X)^{-1} [Σ_g X_g' e_g e_g' X_g] (X'X)^{-1}` scaled by
/// `G/(G-1) · (n-1)/(n-k)`, accumulated row by row.
fn sandwich_cr1(x: &DMatrix<f64>, e: &DVector<f64>, cluster: &[usize], g: usize) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let bread = (x.transpose() * x).try_inverse().unwrap();
    let mut scores = vec![vec![0.0; k]; g];
    for i in 0..n {
        for j in 0..k {
            scores[cluster[i]][j] += x[(i, j)] * e[i];
        }
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for s in &scores {
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }
    let c = g as f64 / (g - 1) as f64 * (n - 1) as f64 / (n - k) as f64;
    &bread * meat * &bread * c
}

#[test]
fn criterion_04_cr1_sandwich_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 90;
        let g = 12;
        let cluster: Vec<usize> = (0..n).map(|_| rng.random_range(0..g)).collect();
        let used: std::collections::BTreeSet<usize> = cluster.iter().copied().collect();
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let shock: Vec<f64> = (0..g).map(|_| normal(&mut rng)).collect();
        let y = DVector::from_fn(n, |i, _| 0.5 + x[(i, 1)] - 2.0 * x[(i, 2)] + shock[cluster[i]] + normal(&mut rng));
        let labels: Vec<String> = cluster.iter().map(|c| format!("c{c}")).collect();
        let design = Design::new(x.clone(), vec![INTERCEPT.into(), "a".into(), "b".into()]);
        let fit = econ::fit_ols(&y, &design, SeRequest::Cluster(&labels)).unwrap();
        let oracle = sandwich_cr1(&x, &fit.residuals, &cluster, used.len());
        let scale = oracle.amax().max(1.0);
        worst = worst.max((&fit.vcov - &oracle).amax() / scale);
    }
    let pass = worst <= 1e-10;
    report(4, "CR1 sandwich oracle", pass, &format!("max scaled |V - V_oracle| = {worst:.2e} on 20 instances (tol 1e-10)"));
    assert!(pass);
}

/// Three mock approaches sharing one effect: `y_k = δT + zip effect + u + e_k`.
fn equal_effect_rows(rng: &mut ChaCha8Rng, side: usize) -> Vec<StackedRow> {
    let mut rows = Vec::new();
    let zip_fx: Vec<f64> = (0..9).map(|_| normal(rng)).collect();
    for r in 0..side {
        for c in 0..side {
            let zip = (r * 3 / side) * 3 + c * 3 / side;
            let treated = rng.random::<f64>() < 0.4;
            let base = 0.5 * treated as u8 as f64 + zip_fx[zip] + normal(rng);
            for a in Approach::ALL {
                rows.push(StackedRow {
                    cbg_id: spatial::lattice_id(r, c),
                    approach: a,
                    y: base + 0.5 * normal(rng),
                    redlined: treated,
                    covariates: BTreeMap::new(),
                    zip_code: format!("z{zip}"),
                });
            }
        }
    }
    rows
}

#[test]
fn criterion_05_bootstrap_size() {
    let start = Instant::now();
    let reps = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rejections: BTreeMap<Approach, usize> = BTreeMap::new();
    for r in 0..reps {
        let rows = equal_effect_rows(&mut rng, 15);
        let dist = cluster_bootstrap(
            &rows,
            StackSpec::ZipFe,
            Approach::Authoritative,
            None,
            299,
            simgen::replication_seed(5, r),
            &PairsResampler,
        )
        .unwrap();
        for a in [Approach::Mllm, Approach::Segmentation] {
            if equivalence_test(&dist, a).unwrap() == Verdict::Rejected {
                *rejections.entry(a).or_default() += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let rate = |a: Approach| rejections.get(&a).copied().unwrap_or(0) as f64 / reps as f64;
    let (m, s) = (rate(Approach::Mllm), rate(Approach::Segmentation));
    let pass = m <= 0.075 && s <= 0.075 && secs < 600.0;
    report(
        5,
        "bootstrap size",
        pass,
        &format!("rejection rate theta_mllm {:.1}%, theta_segmentation {:.1}% over {reps} reps, B=299 (<= 7.5%); {secs:.1}s (< 600s)", 100.0 * m, 100.0 * s),
    );
    assert!(pass);
}

#[test]
fn criterion_06_addition_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fe_rows = equal_effect_rows(&mut rng, 12);
    let fe = cluster_bootstrap(&fe_rows, StackSpec::ZipFe, Approach::Authoritative, None, 200, 6, &PairsResampler).unwrap();

    let data = simgen::generate(&DgpConfig {
        rows: 8,
        cols: 8,
        n_covariates: 0,
        seed: 6,
        ..DgpConfig::default()
    })
    .unwrap();
    let panels = data.panels(Default::default()).unwrap();
    let sar_rows = stackinf::stack_panel(&panels[&Sample::All], Outcome::Poverty, &[]);
    let sar = cluster_bootstrap(
        &sar_rows,
        StackSpec::Sar,
        Approach::Authoritative,
        Some(&data.weights),
        100,
        6,
        &PairsResampler,
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("draws.csv");
    stackinf::write_draws_csv(
        &[
            LabelledDistribution { outcome: Outcome::Poverty, dist: &fe },
            LabelledDistribution { outcome: Outcome::Poverty, dist: &sar },
        ],
        &path,
    )
    .unwrap();

    let mut checked = 0;
    let mut bad = 0;
    for dist in [&fe, &sar] {
        for d in &dist.draws {
            for a in Approach::ALL {
                let expect = if a == dist.baseline { d.delta0 } else { d.delta0 + d.theta[&a] };
                checked += 1;
                bad += (d.totals[&a].to_bits() != expect.to_bits()) as usize;
            }
        }
    }
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let delta0: f64 = rec[col("delta0")].parse().unwrap();
        let baseline = &rec[col("baseline")];
        for a in Approach::ALL {
            let total: f64 = rec[col(&format!("total_{a}"))].parse().unwrap();
            let expect = if a.to_string() == baseline {
                delta0
            } else {
                delta0 + rec[col(&format!("theta_{a}"))].parse::<f64>().unwrap()
            };
            checked += 1;
            bad += (total.to_bits() != expect.to_bits()) as usize;
        }
    }
    let pass = bad == 0 && checked > 0;
    report(
        6,
        "addition identity",
        pass,
        &format!("{bad} of {checked} in-memory and recorded totals differ from delta0 + theta (0 ulp)"),
    );
    assert!(pass);
}

fn check(y: &[f64], b: &[f64], x: &[f64], tau: f64) -> f64 {
    y.iter()
        .zip(x)
        .map(|(yi, xi)| {
            let u = yi - b[0] - b[1] * xi;
            u * (tau - (u < 0.0) as u8 as f64)
        })
        .sum()
}

/// An optimal LAD line passes through two observations; try every pair.
fn lad_by_enumeration(y: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    let mut best = (vec![f64::NAN; 2], f64::INFINITY);
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            if (x[i] - x[j]).abs() < 1e-12 {
                continue;
            }
            let slope = (y[j] - y[i]) / (x[j] - x[i]);
            let b = vec![y[i] - slope * x[i], slope];
            let loss = check(y, &b, x, 0.5);
            if loss < best.1 {
                best = (b, loss);
            }
        }
    }
    best
}

#[test]
fn criterion_07_quantile_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..9).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v + normal(&mut rng)).collect();
        let design = Design::from_columns(vec![(INTERCEPT.into(), vec![1.0; 9]), ("x".into(), x.clone())]);
        let fit = fit_quantile(&DVector::from_vec(y.clone()), &design, 0.5).unwrap();
        let (b, loss) = lad_by_enumeration(&y, &x);
        worst = worst
            .max((fit.coefficients[0] - b[0]).abs())
            .max((fit.coefficients[1] - b[1]).abs())
            .max((fit.check_loss - loss).abs());
    }

    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
    let line = Design::from_columns(vec![(INTERCEPT.into(), vec![1.0; 12]), ("x".into(), x)]);
    let perfect: Vec<f64> = quantfit::DEFAULT_TAUS
        .iter()
        .map(|&t| fit_quantile(&DVector::from_vec(y.clone()), &line, t).unwrap().pseudo_r2)
        .collect();
    let noisy: Vec<f64> = (0..15).map(|_| normal(&mut rng)).collect();
    let only = Design::from_columns(vec![(INTERCEPT.into(), vec![1.0; 15])]);
    let null: Vec<f64> = quantfit::DEFAULT_TAUS
        .iter()
        .map(|&t| fit_quantile(&DVector::from_vec(noisy.clone()), &only, t).unwrap().pseudo_r2)
        .collect();

    let exact = perfect.iter().all(|&r| r == 1.0) && null.iter().all(|&r| r == 0.0);
    let pass = worst <= 1e-6 && exact;
    report(
        7,
        "quantile oracle",
        pass,
        &format!("max deviation from LAD enumeration {worst:.2e} on 20 instances (tol 1e-6); pseudo-R2 perfect {perfect:?}, intercept-only {null:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_fixture_reproduction() {
    let dir = fixtures().join("stacked_sar");
    let panels = read_panels_csv(&dir.join("panel.csv")).unwrap();
    let weights = WeightsMatrix::read_json(&dir.join("weights.json")).unwrap();
    let rows = stackinf::stack_panel(&panels[&Sample::VsIdeal], Outcome::Poverty, &[]);
    let fit = stackinf::fit_stacked(&rows, StackSpec::Sar, Approach::Authoritative, Some(&weights)).unwrap();
    let (d0, tm, ts) = (fit.delta0, fit.theta[&Approach::Mllm], fit.theta[&Approach::Segmentation]);
    let close = (d0 - 0.58).abs() <= 0.01 && (tm + 0.11).abs() <= 0.01 && (ts + 0.79).abs() <= 0.01;

    let dist = cluster_bootstrap(&rows, StackSpec::Sar, Approach::Authoritative, Some(&weights), 500, 8, &PairsResampler)
        .unwrap();
    let vm = equivalence_test(&dist, Approach::Mllm).unwrap();
    let vs = equivalence_test(&dist, Approach::Segmentation).unwrap();
    let pattern = vm == Verdict::NotRejected && vs == Verdict::Rejected;
    let pass = close && pattern;
    report(
        8,
        "fixture reproduction",
        pass,
        &format!("delta0 {d0:.4}, theta_mllm {tm:.4}, theta_segmentation {ts:.4} (tol 0.01); verdicts mllm {vm:?}, segmentation {vs:?} (B=500)"),
    );
    assert!(pass);
}

#[derive(Deserialize)]
struct CorpusEntry {
    id: String,
    prompt: u8,
    #[serde(default)]
    context: CorpusContext,
    reply: serde_json::Value,
    expected: String,
}

#[derive(Deserialize, Default)]
struct CorpusContext {
    structure: Option<Prompt1Response>,
    environment: Option<Prompt2Response>,
}

#[test]
fn criterion_09_prompt_protocol_corpus() {
    let text = std::fs::read_to_string(fixtures().join("prompt_corpus.jsonl")).unwrap();
    let entries: Vec<CorpusEntry> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut mismatches = Vec::new();
    for e in &entries {
        let prompt = PromptId::ALL[e.prompt as usize - 1];
        let raw = match &e.reply {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        let ctx = ChainContext {
            structure: e.context.structure.as_ref(),
            environment: e.context.environment.as_ref(),
        };
        let got = match validate_in_chain(prompt, &raw, &ctx) {
            Ok(_) => "valid".to_string(),
            Err(err) => err.kind().to_string(),
        };
        if got != e.expected {
            mismatches.push(format!("{} expected {} got {got}", e.id, e.expected));
        }
    }
    let pass = entries.len() >= 40 && mismatches.is_empty();
    report(
        9,
        "prompt-protocol corpus",
        pass,
        &format!(
            "{} of {} replies classified as labelled{}",
            entries.len() - mismatches.len(),
            entries.len(),
            if mismatches.is_empty() { String::new() } else { format!(" ({})", mismatches.join("; ")) }
        ),
    );
    assert!(pass);
}

fn bundle_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "json" | "jsonl")) {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bundles = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig {
            out_dir: tmp.path().join(run),
            bootstrap_b: 20,
            seed: 10,
            simulate: DgpConfig {
                rows: 10,
                cols: 10,
                seed: 10,
                ..DgpConfig::default()
            },
            ..RunConfig::default()
        };
        pipeline::run(&cfg, &cfg.default_stages()).unwrap();
        bundles.push(bundle_files(&cfg.out_dir));
    }
    let differing: Vec<&String> = bundles[0]
        .iter()
        .filter(|(k, v)| bundles[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    let same_set = bundles[0].keys().eq(bundles[1].keys());
    let pass = same_set && differing.is_empty() && bundles[0].len() > 5;
    report(
        10,
        "determinism",
        pass,
        &format!("{} CSV/JSON files compared, {} differ{}", bundles[0].len(), differing.len(), if same_set { "" } else { ", file sets differ" }),
    );
    assert!(pass);
}

#[test]
fn criterion_11_queen_weights() {
    let w = lattice_weights(3, 3);
    let degree = |r: usize, c: usize| {
        let id = spatial::lattice_id(r, c);
        w.degree(w.ids().iter().position(|x| *x == id).unwrap())
    };
    let corners = [(0, 0), (0, 2), (2, 0), (2, 2)].map(|(r, c)| degree(r, c));
    let edges = [(0, 1), (1, 0), (1, 2), (2, 1)].map(|(r, c)| degree(r, c));
    let center = degree(1, 1);
    let dense = w.row_standardized();
    let row_err = dense.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let pass = corners.iter().all(|&d| d == 3) && edges.iter().all(|&d| d == 5) && center == 8 && row_err <= 1e-12;
    report(
        11,
        "queen weights",
        pass,
        &format!("corner {corners:?}, edge {edges:?}, center {center}; max |row sum - 1| = {row_err:.1e} (tol 1e-12)"),
    );
    assert!(pass);
}
