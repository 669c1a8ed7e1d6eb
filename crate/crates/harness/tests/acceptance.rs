//! Acceptance run: one PASS/FAIL/SKIP line per criterion. Exits nonzero if
//! any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use autoopt::controller::compute_v_hat;
use autoopt::nn::gradcheck::{finite_difference_errors, layer_cases, per_sample_consistency};
use autoopt::nn::{Architecture, DropoutRates, Mode, Network};
use autoopt::testbed::{Grid, OracleCase};
use autoopt::Rng;
use autoopt_harness::check::{ewma_suite, newton_suite, scale_invariance_suite, vhat_ratio, Measurement};
use autoopt_harness::config::{OracleConfig, Settings};
use autoopt_harness::grid::{mean_std, run_grid};
use autoopt_harness::oracle::{compare_case, gammas_agree};
use autoopt_harness::train::{prepare_data, run_seeds, Prepared};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn from_measurements(ms: Vec<Measurement>) -> Outcome {
    let detail = ms.iter().map(|m| format!("{}={:.3e} (tol {:.0e})", m.name, m.value, m.tolerance)).collect::<Vec<_>>().join(", ");
    verdict(ms.iter().all(|m| m.passed), detail)
}

fn vhat_unbiased() -> Outcome {
    let ratio = vhat_ratio(compute_v_hat::<f64>, 10, 8, 100_000, 2024).unwrap();
    verdict((ratio - 1.0).abs() <= 0.01, format!("mean(V_hat)/1.25 = {ratio:.5}"))
}

fn oracle_equivalence() -> Outcome {
    let cfg = OracleConfig::default();
    let mut worst: f64 = 0.0;
    let mut disagree = Vec::new();
    for k in 0..20 {
        let (row, _) = compare_case(&cfg, 7, k).unwrap();
        worst = worst.max(row.max_cells_apart);
        if !row.agree {
            disagree.push(k);
        }
    }
    let grid = Grid { step: cfg.grid_step, ..Grid::default() };
    let mut pair_fail = Vec::new();
    for p in [2, 5, 10] {
        for k in 0..20 {
            let mut rng = Rng::with_stream(11 + p as u64, k);
            let case = OracleCase::random(p, cfg.batch, (cfg.noise_lo, cfg.noise_hi), &grid, &mut rng).unwrap();
            let a = case.analytic().unwrap().gamma;
            let b = case.brute_force(&grid, cfg.draws, &mut rng).unwrap().gamma;
            if !gammas_agree(a, b, grid.step) {
                pair_fail.push((p, k));
            }
        }
    }
    verdict(
        disagree.is_empty() && pair_fail.is_empty(),
        format!(
            "three-way: 20 cases, p in {:?}, worst gap {worst:.2} cells, disagreeing {disagree:?}; \
             analytic vs brute force: 60 cases, p in [2, 5, 10], disagreeing {pair_fail:?}",
            cfg.dims
        ),
    )
}

fn gradients() -> Outcome {
    let mut rng = Rng::new(4);
    let mut fd: f64 = 0.0;
    let mut mean: f64 = 0.0;
    let mut sumsq: f64 = 0.0;
    for mut case in layer_cases(&mut rng).unwrap() {
        for (_, e) in finite_difference_errors(&mut case.net, &case.input, &case.targets, case.mode, 1e-5).unwrap() {
            fd = fd.max(e);
        }
        let ps = per_sample_consistency(&case.net, &case.input, &case.targets, case.mode, &mut rng).unwrap();
        mean = mean.max(ps.mean_error);
        sumsq = sumsq.max(ps.sumsq_error);
    }
    let net: Network<f64> = Architecture::MnistCnn.build(DropoutRates::default(), &mut rng).unwrap();
    let x = rng.normal_tensor(&[4, 1, 28, 28]);
    let ps = per_sample_consistency(&net, &x, &[3, 1, 4, 1], Mode::Train, &mut rng).unwrap();
    mean = mean.max(ps.mean_error);
    sumsq = sumsq.max(ps.sumsq_error);
    verdict(
        fd <= 1e-5 && mean <= 1e-10 && sumsq <= 1e-9,
        format!("finite-difference rel {fd:.2e}, per-sample mean {mean:.2e}, streamed sums rel {sumsq:.2e}"),
    )
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

fn complexity() -> Outcome {
    let mut rng = Rng::new(5);
    let net: Network<f64> = Architecture::MnistCnn.build(DropoutRates::default(), &mut rng).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [32, 128] {
        let x = rng.normal_tensor(&[n, 1, 28, 28]);
        let targets: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let (_, cache) = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let (mut plain, mut stats) = (Vec::new(), Vec::new());
        for _ in 0..20 {
            let t = Instant::now();
            std::hint::black_box(net.backward(&cache, &targets, false).unwrap());
            plain.push(t.elapsed());
            let t = Instant::now();
            std::hint::black_box(net.backward(&cache, &targets, true).unwrap());
            stats.push(t.elapsed());
        }
        let ratio = median(stats).as_secs_f64() / median(plain).as_secs_f64();
        ok &= ratio <= 2.0;
        parts.push(format!("N={n}: {ratio:.2}x"));
    }
    verdict(ok, format!("median backward with statistics / plain: {}", parts.join(", ")))
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("AUTOOPT_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

fn mnist_settings(dir: &std::path::Path) -> Settings {
    let mut s = Settings::default();
    for (k, v) in [
        ("data.dir", dir.display().to_string()),
        ("data.train_subset", "10000".into()),
        ("data.test_subset", "2000".into()),
        ("seeds", "0,1,2".into()),
        ("eval.train", "false".into()),
    ] {
        s.set(k, v).unwrap();
    }
    s
}

fn load(s: &Settings) -> Prepared {
    prepare_data(&s.build().unwrap().data).unwrap()
}

fn alpha_trend(dir: &std::path::Path) -> Outcome {
    let mut s = mnist_settings(dir);
    s.set("epochs", "1").unwrap();
    let data = load(&s);
    let mut per_n = Vec::new();
    for n in [16, 64, 256] {
        s.set("batch_size", n.to_string()).unwrap();
        let cfg = s.build().unwrap();
        let (report, error) = run_seeds(&cfg, &data).unwrap();
        if let Some(e) = error {
            return Outcome::Fail(format!("N={n}: {e}"));
        }
        let means: Vec<f64> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let a: Vec<f64> = report
                    .trace
                    .iter()
                    .filter(|r| r.seed == seed && r.group == "conv1.weight")
                    .map(|r| r.alpha)
                    .collect();
                a.iter().sum::<f64>() / a.len() as f64
            })
            .collect();
        per_n.push(means);
    }
    let increasing = (0..3).all(|s| per_n[0][s] < per_n[1][s] && per_n[1][s] < per_n[2][s]);
    let detail = ["16", "64", "256"]
        .iter()
        .zip(&per_n)
        .map(|(n, m)| format!("N={n}: {:.3}/{:.3}/{:.3}", m[0], m[1], m[2]))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(increasing, format!("first-epoch mean alpha of conv1.weight per seed, {detail}"))
}

fn desk_scale_errors(dir: &std::path::Path) -> Outcome {
    let mut s = mnist_settings(dir);
    s.set("epochs", "3").unwrap();
    s.set("batch_size", "64").unwrap();
    let data = load(&s);
    let cfg = s.build().unwrap();
    let (report, error) = run_seeds(&cfg, &data).unwrap();
    if let Some(e) = error {
        return Outcome::Fail(format!("auto run failed: {e}"));
    }
    let (auto_mean, auto_std) = mean_std(&report.final_test_errors());
    let grid = run_grid(&cfg, &data).unwrap();
    let best = grid.best().expect("grid has a best cell");
    let gap = auto_mean - best.test_error_mean;
    verdict(
        gap <= 0.015 && auto_mean <= 0.05,
        format!(
            "AutoSGD test error {:.2}% +- {:.2}; best grid cell alpha={} beta={}: {:.2}% +- {:.2}; gap {:+.2} pp",
            100.0 * auto_mean,
            100.0 * auto_std,
            best.alpha,
            best.beta,
            100.0 * best.test_error_mean,
            100.0 * best.test_error_std,
            100.0 * gap
        ),
    )
}

fn main() {
    let mnist = mnist_dir();
    let skip = || Outcome::Skip("MNIST files not found (set AUTOOPT_MNIST_DIR or run scripts/fetch-mnist.sh)".into());
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("V_hat unbiasedness", Box::new(vhat_unbiased)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("Newton exactness", Box::new(|| from_measurements(newton_suite(3).unwrap()))),
        ("gradient correctness", Box::new(gradients)),
        ("statistics overhead", Box::new(complexity)),
        ("alpha grows with batch size", Box::new(|| mnist.as_deref().map_or_else(skip, alpha_trend))),
        ("desk-scale MNIST errors", Box::new(|| mnist.as_deref().map_or_else(skip, desk_scale_errors))),
        ("EWMA contraction", Box::new(|| from_measurements(ewma_suite().unwrap()))),
        ("scale invariance", Box::new(|| from_measurements(scale_invariance_suite(9).unwrap()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{}] {name} ({secs:.1}s): {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
