//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! so every criterion prints exactly one PASS/FAIL line; the process exits
//! non-zero if any criterion fails.
//!
//! Criteria 6-8 share one full experiment (n = 2000, 5 seeds, three k values,
//! four variants) whose tables land in `$CARGO_TARGET_TMPDIR/acceptance`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    lt_probe_error, ly_probe_error, lz_probe_error, op_probe_error, sinkhorn_probe_error, OPS,
};
use netcause::balance::{
    exact_transport_oracle, product_sample, sinkhorn_wasserstein, JointSample,
};
use netcause::estimator::{predict_ite, train, Effect, EstimatorConfig, Variant};
use netcause::graph::{partition_three_way, Graph, Split};
use netcause::harness::{
    run_experiment, DataSource, EvalSplit, ExperimentConfig, HsicSetting, ResultsTable,
};
use netcause::propensity::{
    propensity_inputs, train_neighborhood_ps, DiscreteToy, NeighborhoodPSModel, PropensityConfig,
};
use netcause::synth::{generate, GenConfig};
use netcause::tensor::Tensor;
use netcause::theory::audit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBES: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    let mut worst_name = String::new();
    for (i, op) in OPS.iter().enumerate() {
        for seed in 0..PROBES {
            let e = op_probe_error(*op, 1000 * i as u64 + seed);
            if !(e <= worst_op) {
                worst_op = e;
                worst_name = format!("{op:?}");
            }
        }
    }
    let max_over = |f: fn(u64) -> f64| (0..PROBES).map(f).fold(0.0, f64::max);
    let lt = max_over(lt_probe_error);
    let lz = max_over(lz_probe_error);
    let ly = max_over(ly_probe_error);
    let sk = max_over(sinkhorn_probe_error);
    let elapsed = start.elapsed();
    let pass = worst_op <= 1e-4
        && lt <= 1e-4
        && lz <= 1e-4
        && ly <= 1e-3
        && sk <= 1e-3
        && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} ops x {PROBES} probes, worst {worst_op:.2e} ({worst_name}); L_T {lt:.2e}, L_Z {lz:.2e}, L_Y {ly:.2e}, sinkhorn {sk:.2e}; {:.1}s",
            OPS.len(),
            secs(elapsed)
        ),
    )
}

/// Trapezoid rule on a grid containing every knot of the piecewise-linear
/// density, which makes it exact up to rounding.
fn density_integral(model: &NeighborhoodPSModel, row: &Tensor) -> f64 {
    let steps = 100 * model.bins();
    let zs: Vec<f64> = (0..=steps).map(|s| s as f64 / steps as f64).collect();
    let d = model
        .density(&row.select_rows(&vec![0; zs.len()]), &zs)
        .unwrap();
    d.windows(2)
        .map(|w| 0.5 * (w[0] + w[1]) / steps as f64)
        .sum()
}

fn density_validity() -> Outcome {
    let g = Graph::small_world(600, 10, 0.1, 3).unwrap();
    let ds = generate(
        &g,
        &GenConfig {
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let x = propensity_inputs(&ds.features, &ds.graph).unwrap();
    let probes = Tensor::new(PROBES as usize, x.cols(), {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..PROBES as usize * x.cols())
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect()
    })
    .unwrap();
    let untrained = train_neighborhood_ps(
        &x,
        &ds.z,
        &PropensityConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let trained = train_neighborhood_ps(&x, &ds.z, &PropensityConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    for model in [&untrained, &trained] {
        for i in 0..PROBES as usize {
            worst = worst.max((density_integral(model, &probes.select_rows(&[i])) - 1.0).abs());
        }
    }
    outcome(
        worst <= 1e-6,
        format!("{PROBES} inputs before and after training, max |integral - 1| = {worst:.2e}"),
    )
}

/// Reweighted conditional `q(x | t, z)` recomputed from the toy's tables,
/// independently of the library's own helper.
fn reweighted(toy: &DiscreteToy, t: usize, k: usize) -> Vec<f64> {
    let cells: Vec<f64> = (0..toy.p_x.len())
        .map(|i| {
            let pt = if t == 1 { toy.e[i] } else { 1.0 - toy.e[i] };
            let joint = toy.p_x[i] * pt * toy.phi[i][k];
            joint / (pt * toy.phi[i][k])
        })
        .collect();
    let s: f64 = cells.iter().sum();
    cells.into_iter().map(|c| c / s).collect()
}

fn random_toy(seed: u64) -> DiscreteToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = rng.gen_range(2..6);
    let nz = rng.gen_range(2..5);
    let mut pmf = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|a| a / s).collect::<Vec<f64>>()
    };
    let p_x = pmf(nx);
    let phi = (0..nx).map(|_| pmf(nz)).collect();
    DiscreteToy {
        x_values: (0..nx).map(|i| i as f64).collect(),
        p_x,
        e: (0..nx).map(|_| rng.gen_range(0.05..0.95)).collect(),
        z_values: (0..nz).map(|k| k as f64 / (nz - 1) as f64).collect(),
        phi,
    }
}

fn oracle_balancing() -> Outcome {
    let toys: Vec<DiscreteToy> = std::iter::once(DiscreteToy::three_level())
        .chain((0..50).map(random_toy))
        .collect();
    let mut worst: f64 = 0.0;
    for toy in &toys {
        for t in 0..2 {
            for k in 0..toy.z_values.len() {
                for (q, p) in reweighted(toy, t, k).iter().zip(&toy.p_x) {
                    worst = worst.max((q - p).abs());
                }
            }
        }
        worst = worst.max(toy.max_balance_gap());
    }
    outcome(
        worst <= 1e-9,
        format!("{} toys, max per-cell gap {worst:.2e}", toys.len()),
    )
}

fn theory_audit() -> Outcome {
    let start = Instant::now();
    let report = audit(0, 100).unwrap();
    let elapsed = start.elapsed();
    let by_check: Vec<String> = ["lemma1", "theorem1", "theorem2", "theorem3"]
        .iter()
        .map(|c| format!("{c} {}", report.violations_of(c)))
        .collect();
    outcome(
        report.violations == 0 && elapsed < Duration::from_secs(120),
        format!(
            "{} scenarios, {} inequalities, violations: {}; {:.1}s",
            report.scenarios,
            report.entries.len(),
            by_check.join(", "),
            secs(elapsed)
        ),
    )
}

fn random_joint(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> JointSample {
    let r = Tensor::new(
        n,
        dim,
        (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let t = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let z = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    JointSample::uniform(r, t, z).unwrap()
}

fn sinkhorn_vs_exact() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..=64);
        let dim = rng.gen_range(1..5);
        let a = random_joint(n, dim, &mut rng);
        let b = product_sample(&random_joint(n, dim, &mut rng), seed);
        let exact = exact_transport_oracle(&a, &b).unwrap();
        let (approx, _) = sinkhorn_wasserstein(&a, &b, 1e-3, 5000).unwrap();
        let rel = (approx - exact).abs() / exact;
        worst = worst.max(rel);
        failures += usize::from(!(rel <= 0.02));
    }
    outcome(
        failures == 0,
        format!(
            "50 instances, n = m <= 64, max relative error {:.3}%",
            100.0 * worst
        ),
    )
}

fn experiment_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn full_experiment(dir: &Path) -> ResultsTable {
    let cfg = ExperimentConfig {
        output: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    run_experiment(&cfg).unwrap().table
}

fn median_of(table: &ResultsTable, k: f64, setting: HsicSetting) -> f64 {
    table
        .hsic_cell(k, setting)
        .and_then(|c| c.stats.median)
        .unwrap_or(f64::NAN)
}

fn hsic_reduction(table: &ResultsTable) -> Outcome {
    let raw = median_of(table, 1.0, HsicSetting::Raw);
    let rw = median_of(table, 1.0, HsicSetting::Reweighted) / raw;
    let rr = median_of(table, 1.0, HsicSetting::ReweightedRepre) / raw;
    outcome(
        rw <= 0.6 && rr <= 0.4,
        format!("k = 1.0 median HSIC ratio to raw: reweighted {rw:.3} (<= 0.6), reweighted+repre {rr:.3} (<= 0.4)"),
    )
}

fn variant_ordering(table: &ResultsTable) -> Outcome {
    let median = |k, split, v| {
        table
            .pehe_cell(k, split, Effect::Total, v)
            .and_then(|c| c.stats.median)
            .unwrap_or(f64::NAN)
    };
    let mut violating = Vec::new();
    for k in [0.5, 1.0, 1.5] {
        for split in [EvalSplit::Within, EvalSplit::Out] {
            let both = median(k, split, Variant::Both);
            let ok = [Variant::Repre, Variant::Reweight, Variant::None]
                .iter()
                .all(|&v| both <= median(k, split, v));
            if !ok {
                violating.push(format!("k={k} {}", split.name()));
            }
        }
    }
    outcome(
        violating.len() <= 1,
        format!(
            "{} of 6 (k, split) cells violate [{}]",
            violating.len(),
            violating.join("; ")
        ),
    )
}

fn interference_robustness(table: &ResultsTable) -> Outcome {
    let mean = |k, split, v| {
        table
            .rmse_cell(k, split, v)
            .and_then(|c| c.stats.mean)
            .unwrap_or(f64::NAN)
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for split in [EvalSplit::Within, EvalSplit::Out] {
        let rise = |v| mean(1.5, split, v) - mean(0.5, split, v);
        let (both, none) = (rise(Variant::Both), rise(Variant::None));
        pass &= both < none;
        parts.push(format!(
            "{}: both {both:+.3} vs none {none:+.3}",
            split.name()
        ));
    }
    outcome(
        pass,
        format!("RMSE rise from k=0.5 to k=1.5, {}", parts.join("; ")),
    )
}

fn noiseless_sanity() -> Outcome {
    let start = Instant::now();
    let (k, seed) = (0.5, 0);
    let g = Graph::small_world(2000, 10, 0.1, seed).unwrap();
    let ds = generate(
        &g,
        &GenConfig {
            k,
            seed,
            noise_sd: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    let part = partition_three_way(&g, [0.6, 0.2, 0.2], seed).unwrap();
    let (train_ds, _) = ds.subset(&part.units(Split::Train));
    let cfg = EstimatorConfig {
        variant: Variant::None,
        seed,
        ..EstimatorConfig::default()
    };
    let out = train(&train_ds, &cfg).unwrap();
    let bound = out.model.bind(&train_ds).unwrap();
    let mean_effect = |e: Effect| {
        let v = predict_ite(&bound, e.pairs()).unwrap();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let main = mean_effect(Effect::Main);
    let spill = mean_effect(Effect::Spillover);
    let elapsed = start.elapsed();
    let pass = (main - 1.0).abs() <= 0.15
        && (spill - k).abs() <= 0.2
        && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!("k = {k}, seed {seed}: main {main:.3} (1 +- 0.15), spillover {spill:.3} ({k} +- 0.2); {:.1}s", secs(elapsed)),
    )
}

fn small_config(dir: &Path, jobs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        source: DataSource::Generate {
            n_units: 300,
            mean_degree: 8,
            rewire: 0.1,
        },
        k: vec![0.5, 1.5],
        seeds: 2,
        master_seed: 11,
        lambda_grid: vec![0.1, 0.5],
        output: dir.to_path_buf(),
        jobs,
        ..ExperimentConfig::default()
    };
    cfg.estimator.epochs = 30;
    cfg.estimator.diag_stride = 10;
    cfg
}

const TABLES: [&str; 7] = [
    "pehe_table.csv",
    "rmse_table.csv",
    "selected_lambda.csv",
    "fig_rmse.csv",
    "fig_hsic.csv",
    "diagnostics.csv",
    "missing.csv",
];

fn determinism() -> Outcome {
    let root = experiment_dir().join("determinism");
    let (a, b) = (root.join("a"), root.join("b"));
    for (dir, jobs) in [(&a, 1), (&b, 2)] {
        let _ = std::fs::remove_dir_all(dir);
        run_experiment(&small_config(dir, jobs)).unwrap();
    }
    let mut differing = Vec::new();
    for name in TABLES {
        let x = std::fs::read(a.join(name)).unwrap_or_default();
        let y = std::fs::read(b.join(name)).unwrap_or_default();
        if x.is_empty() || x != y {
            differing.push(name);
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{} tables compared across two runs, differing: {:?}",
            TABLES.len(),
            differing
        ),
    )
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    println!(
        "criterion {n:>2} {}: {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() {
    // `cargo test -- --list` and friends probe the binary; nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    all &= report(1, "gradient correctness", &gradient_correctness());
    all &= report(2, "density validity", &density_validity());
    all &= report(3, "oracle balancing", &oracle_balancing());
    all &= report(4, "theory audit", &theory_audit());
    all &= report(5, "sinkhorn vs exact transport", &sinkhorn_vs_exact());
    all &= report(9, "noiseless sanity", &noiseless_sanity());
    all &= report(10, "end-to-end determinism", &determinism());

    let dir = experiment_dir().join("full");
    let start = Instant::now();
    let table = full_experiment(&dir);
    println!(
        "full experiment finished in {:.0}s; tables in {}",
        secs(start.elapsed()),
        dir.display()
    );
    all &= report(6, "HSIC reduction", &hsic_reduction(&table));
    all &= report(7, "variant ordering", &variant_ordering(&table));
    all &= report(
        8,
        "robustness to interference",
        &interference_robustness(&table),
    );

    if !all {
        std::process::exit(1);
    }
}
