//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 5`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use sbgc::classify::marginal_loglik;
use sbgc::data::{gen_gmm_dataset, gen_toyimage_dataset, Dataset, GmmSpec, ToyImageSpec};
use sbgc::diff::finite_difference_grad;
use sbgc::experiments::{convexity_score, interp_grid, interpolation_experiment, trace_convergence_experiment};
use sbgc::experiments::interp::pair_probe_seed;
use sbgc::flow::{bits_per_dim, estimate_trace, probe, ProbeLaw};
use sbgc::rng::stream;
use sbgc::robust::{attack_dataset, log_likelihood_fixed, loglik_grad, summarize_attacks};
use sbgc::score::{AnalyticGmmScore, ClassMixture};
use sbgc::{
    classify, evaluate_accuracy, log_likelihood, train, AttackCfg, MlpArch, MlpScoreNet, ScoreModel, SdeKind,
    SdeSpec, SolverCfg, TraceCfg, TrainCfg,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// The toy problem shared by the trained-model criteria.
struct Toy {
    spec: GmmSpec,
    net: MlpScoreNet,
    test: Dataset,
    train_secs: f64,
}

const TOY_STEPS: usize = 20_000;

fn toy() -> Toy {
    let spec = GmmSpec::ring(3, 2, 0.5, 0.25, (-4.0, 4.0));
    let data = gen_gmm_dataset(&spec, 2000, 101).unwrap();
    let test = gen_gmm_dataset(&spec, 200, 202).unwrap();
    let net = MlpScoreNet::new(MlpArch::new(2, 3, vec![128, 128]), SdeSpec::default(), 7).unwrap();
    let t0 = Instant::now();
    let cfg = TrainCfg { steps: TOY_STEPS, seed: 11, ..TrainCfg::default() };
    let out = train(net, &data, &cfg).unwrap();
    Toy {
        spec,
        net: out.ema,
        test,
        train_secs: t0.elapsed().as_secs_f64(),
    }
}

fn gaussian_logpdf(x: &[f64], mu: &[f64], s2: f64) -> f64 {
    let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * d2 / s2 - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    n / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn c1_gaussian_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for kind in [SdeKind::Vp, SdeKind::SubVp] {
        for s2 in [1.0, 4.0] {
            for d in [2, 8] {
                let m = AnalyticGmmScore::gaussian(SdeSpec::with_kind(kind), vec![0.0; d], s2).unwrap();
                let mut r = stream(1, "c1", &[d as u64, s2 as u64, kind as u64]);
                for _ in 0..100 {
                    let x: Vec<f64> = (0..d).map(|_| s2.sqrt() * r.sample::<f64, _>(StandardNormal)).collect();
                    let got = log_likelihood(&m, &x, &SolverCfg::default(), &TraceCfg::exact(), None).unwrap().logp;
                    worst = worst.max((got - gaussian_logpdf(&x, &vec![0.0; d], s2)).abs());
                    n += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-2 && secs < 120.0,
        format!("max |error| {worst:.2e} nats over {n} inputs (tol 1e-2), {secs:.1}s (limit 120s)"),
    )
}

fn c2_gmm_oracle() -> Outcome {
    let means = [vec![1.0, 0.5], vec![-0.8, -0.6]];
    let s2 = 0.3;
    let m = AnalyticGmmScore::new(SdeSpec::default(), vec![ClassMixture::equal_weights(&means, s2)]).unwrap();
    let mut r = stream(2, "c2", &[]);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mu = &means[i % 2];
        let x: Vec<f64> = mu.iter().map(|c| c + s2.sqrt() * r.sample::<f64, _>(StandardNormal)).collect();
        let a = gaussian_logpdf(&x, &means[0], s2);
        let b = gaussian_logpdf(&x, &means[1], s2);
        let exact = a.max(b) + (0.5 * ((a - a.max(b)).exp() + (b - a.max(b)).exp())).ln();
        let got = log_likelihood(&m, &x, &SolverCfg::default(), &TraceCfg::exact(), None).unwrap().logp;
        worst = worst.max((got - exact).abs());
    }
    outcome(worst < 2e-2, format!("max |error| {worst:.2e} nats over 100 inputs (tol 2e-2)"))
}

fn c3_hutchinson(toy: &Toy) -> Outcome {
    let d = 6;
    let a = Array2::from_shape_fn((d, d), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 1.5 } else { 0.0 });
    let exact: f64 = (0..d).map(|i| a[[i, i]]).sum();
    let n = 100_000;
    let cfg = TraceCfg::hutchinson(n, 3);
    let est = estimate_trace(d, &cfg, |p| Ok(p.dot(&a.t()))).unwrap();
    let per: Vec<f64> = (0..n)
        .map(|k| {
            let e = probe(d, ProbeLaw::Rademacher, 3, k);
            (0..d).map(|i| e[i] * (0..d).map(|j| a[[i, j]] * e[j]).sum::<f64>()).sum()
        })
        .collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    let sd = (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    let linear_ok = (est - exact).abs() < 3.0 * se && (est - mean).abs() < 1e-9;

    let cfg = SolverCfg::default();
    let (mut e1, mut e100) = (0.0, 0.0);
    for i in 0..50 {
        let x = toy.test.row(i);
        let y = Some(toy.test.labels[i]);
        let ex = log_likelihood(&toy.net, &x, &cfg, &TraceCfg::exact(), y).unwrap().logp;
        let h = |k| log_likelihood(&toy.net, &x, &cfg, &TraceCfg::hutchinson(k, 1000 + i as u64), y).unwrap().logp;
        e1 += (h(1) - ex).abs() / 50.0;
        e100 += (h(100) - ex).abs() / 50.0;
    }
    outcome(
        linear_ok && e100 < e1,
        format!(
            "linear field: |est - tr| = {:.2e} vs 3 SE = {:.2e}; toy model mean |error| n=1 {e1:.3e}, n=100 {e100:.3e}",
            (est - exact).abs(),
            3.0 * se
        ),
    )
}

fn c4_gradients(toy: &Toy) -> Outcome {
    let analytic = toy.spec.analytic_model(SdeSpec::default()).unwrap();
    let mut worst: f64 = 0.0;
    let mut check = |m: &dyn ScoreModel, x: &[f64], y: usize| {
        let (_, g) = loglik_grad(m, x, Some(y), 64, None).unwrap();
        let fd = finite_difference_grad(|z| log_likelihood_fixed(m, z, Some(y), 64, None).map(|o| o.logp), x, 1e-4)
            .unwrap();
        worst = worst.max(rel_err(&g, &fd));
    };
    for i in 0..10 {
        let x = toy.test.row(i);
        check(&analytic, &x, i % 3);
        check(&toy.net, &x, i % 3);
    }
    outcome(
        worst < 1e-3,
        format!("max relative l2 error {worst:.2e} over 10 analytic + 10 trained cases (tol 1e-3)"),
    )
}

fn c5_bayes_agreement() -> Outcome {
    let spec = GmmSpec {
        modes: vec![vec![vec![0.8, 0.0]], vec![vec![-0.8, 0.3]]],
        scale: 0.6,
        domain: (-6.0, 6.0),
    };
    let m = spec.analytic_model(SdeSpec::default()).unwrap();
    let data = gen_gmm_dataset(&spec, 500, 5).unwrap();
    let agree = (0..data.len())
        .filter(|&i| {
            let x = data.row(i);
            classify(&m, &x, &SolverCfg::default(), &TraceCfg::exact()).predicted == Some(spec.bayes_predict(&x).unwrap())
        })
        .count();
    let frac = agree as f64 / data.len() as f64;
    outcome(frac >= 0.99, format!("agreement {frac:.4} over {} draws (need 0.99)", data.len()))
}

fn c6_training(toy: &Toy) -> Outcome {
    let t0 = Instant::now();
    let rep = evaluate_accuracy(&toy.net, &toy.test, &SolverCfg::default(), &TraceCfg::exact()).unwrap();
    let bayes = (0..toy.test.len())
        .filter(|&i| toy.spec.bayes_predict(&toy.test.row(i)).unwrap() == toy.test.labels[i])
        .count() as f64
        / toy.test.len() as f64;
    let secs = toy.train_secs + t0.elapsed().as_secs_f64();
    outcome(
        rep.accuracy >= 0.95 * bayes && secs < 900.0,
        format!(
            "accuracy {:.4} vs Bayes {bayes:.4} (ratio {:.3}, need 0.95) after {TOY_STEPS} steps; {secs:.0}s (limit 900s)",
            rep.accuracy,
            rep.accuracy / bayes
        ),
    )
}

fn c7_probe_counts(toy: &Toy) -> Outcome {
    let data = toy.test.head(300);
    let rows = trace_convergence_experiment(&toy.net, &data, &[1, 2, 5, 10, 30], &SolverCfg::default(), 17).unwrap();
    let mut ok = true;
    for w in rows[..5].windows(2) {
        let se = (w[0].accuracy_se.powi(2) + w[1].accuracy_se.powi(2)).sqrt();
        ok &= w[1].accuracy >= w[0].accuracy - 2.0 * se;
    }
    let exact = rows[5].accuracy;
    let n10 = rows[3].accuracy;
    ok &= (n10 - exact).abs() <= 0.01 + 1e-12;
    let accs: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{:.3}", r.n_probes.map_or("exact".into(), |n| n.to_string()), r.accuracy))
        .collect();
    let ordered = rows.iter().all(|r| r.mean_logp_true >= r.mean_logp_best_wrong);
    outcome(
        ok,
        format!(
            "accuracy by probe count [{}]; |n=10 - exact| = {:.3} (limit 0.01); true-class logp above best wrong at every n: {ordered}",
            accs.join(" "),
            (n10 - exact).abs()
        ),
    )
}

fn c8_attacks(toy: &Toy) -> Outcome {
    let t0 = Instant::now();
    let data = toy.test.head(200);
    let (lo, hi) = data.model_domain();
    let mut ok = true;
    let mut parts = Vec::new();
    for acfg in [AttackCfg::linf(hi - lo), AttackCfg::l2()] {
        let recs = attack_dataset(&toy.net, &data, &acfg, &SolverCfg::default(), &TraceCfg::exact()).unwrap();
        let s = summarize_attacks(&recs, &acfg);
        let drop = s.clean_accuracy - s.adversarial_accuracy;
        ok &= drop >= 0.30 && s.all_within_budget && s.n_failed == 0;
        parts.push(format!(
            "{:?} eps {:.4}: clean {:.3} -> adversarial {:.3} (drop {:.1} pts), in budget: {}",
            s.norm,
            s.eps,
            s.clean_accuracy,
            s.adversarial_accuracy,
            100.0 * drop,
            s.all_within_budget
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 1800.0;
    outcome(ok, format!("{}; {secs:.0}s (limit 1800s)", parts.join("; ")))
}

fn c9_interpolation(toy: &Toy) -> Outcome {
    let cfg = SolverCfg::default();
    let tcfg = TraceCfg::exact();
    let idx = sbgc::experiments::interp::select_pairs(toy.test.len(), 100, 23).unwrap();
    let pairs: Vec<_> = idx.iter().map(|&(a, b)| (toy.test.row(a), toy.test.row(b))).collect();
    let grid = interp_grid(24).unwrap();
    let res = interpolation_experiment(&toy.net, &pairs, &grid, &cfg, &tcfg).unwrap();
    let mut endpoints_ok = res.curve.n_pairs == 100;
    for (p, c) in res.pairs.iter().enumerate() {
        let local = tcfg.with_seed(pair_probe_seed(tcfg.seed, p));
        for (value, x) in [(c.logp[23], &pairs[p].0), (c.logp[0], &pairs[p].1)] {
            let direct = marginal_loglik(&toy.net, x, &cfg, &local, None).unwrap();
            endpoints_ok &= (value - direct).abs() < 2.0 * (cfg.atol + cfg.rtol * direct.abs());
        }
    }
    let t = grid.clone();
    let curve = |f: fn(f64) -> f64| t.iter().map(|&v| f(v)).collect::<Vec<_>>();
    let sign_ok = convexity_score(&t, &curve(|v| v * v)).unwrap().fraction_nonnegative == 1.0
        && convexity_score(&t, &curve(|v| 0.5 - 3.0 * v)).unwrap().fraction_nonnegative == 1.0
        && convexity_score(&t, &curve(|v| -v * v)).unwrap().fraction_nonnegative == 0.0;
    let trained = res.curve.convexity().unwrap();
    outcome(
        endpoints_ok && sign_ok,
        format!(
            "endpoints match direct likelihoods on {} pairs: {endpoints_ok}; sign convention on t^2/linear/-t^2: {sign_ok}; trained-model convexity fraction {:.3} (mean second difference {:.3})",
            res.curve.n_pairs, trained.fraction_nonnegative, trained.mean_second_difference
        ),
    )
}

fn c10_bits_per_dim() -> Outcome {
    let spec = ToyImageSpec::default();
    let data = gen_toyimage_dataset(&spec, 500, 31).unwrap();
    let test = gen_toyimage_dataset(&spec, 10, 32).unwrap();
    let levels = data.levels.unwrap();
    let uniform = bits_per_dim(0.0, test.dim(), levels).unwrap();
    let net = MlpScoreNet::new(MlpArch::new(test.dim(), 2, vec![128, 128]), SdeSpec::default(), 3).unwrap();
    let out = train(net, &data, &TrainCfg { steps: 3000, batch_size: 128, seed: 4, ..TrainCfg::default() }).unwrap();
    let cfg = SolverCfg::default();
    let mut total = 0.0;
    for i in 0..test.len() {
        let x = test.model_input(i, 9).unwrap();
        let tcfg = TraceCfg::hutchinson(10, sbgc::flow::sample_probe_seed(9, i));
        let lp = marginal_loglik(&out.ema, &x, &cfg, &tcfg, None).unwrap();
        total += bits_per_dim(lp, test.dim(), levels).unwrap();
    }
    let bpd = total / test.len() as f64;
    outcome(
        uniform == 8.0 && bpd < uniform,
        format!("uniform reference {uniform} bits/dim; trained model {bpd:.3} bits/dim on {} images", test.len()),
    )
}

fn run_cli(bin: &str, dir: &Path, cfg: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin)
        .arg("--config")
        .arg(cfg)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn c11_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_sbgc");
    let tmp = tempfile::tempdir().unwrap();
    let gmm = tmp.path().join("gmm.json");
    std::fs::write(
        &gmm,
        r#"{"seed": 5, "data": {"n_train_per_class": 100, "n_test_per_class": 6},
            "train": {"steps": 60, "batch_size": 32}, "model": {"hidden": [16, 16]},
            "trace": {"n_probes": 3},
            "experiments": {"eval_samples": 9, "interp_pairs": 2, "interp_points": 5, "probe_grid": [1, 2], "trace_samples": 6},
            "attack": {"n_samples": 3, "n_steps": 2, "fixed_steps": 8}, "corruption": {"n_samples": 6, "grid": {"severities": [2]}}}"#,
    )
    .unwrap();
    let img = tmp.path().join("img.json");
    std::fs::write(
        &img,
        r#"{"seed": 6, "data": {"kind": "toyimage", "n_train_per_class": 20, "n_test_per_class": 2, "toy_image": {"height": 4, "width": 4}},
            "train": {"steps": 30, "batch_size": 16}, "model": {"hidden": [16]}, "trace": {"n_probes": 2},
            "corruption": {"n_samples": 4, "grid": {"severities": [1]}}}"#,
    )
    .unwrap();
    let gmm_cmds: &[&[&str]] = &[
        &["gen-data"],
        &["train"],
        &["likelihood"],
        &["classify"],
        &["attack"],
        &["corrupt-eval"],
        &["interpolate"],
        &["trace-convergence"],
        &["report"],
    ];
    let img_cmds: &[&[&str]] = &[&["gen-data"], &["train"], &["likelihood"], &["corrupt-eval"], &["report"]];
    let mut differing = Vec::new();
    let mut n_files = 0;
    for (cfg, cmds, name) in [(&gmm, gmm_cmds, "gmm"), (&img, img_cmds, "img")] {
        let a = tmp.path().join(format!("{name}-a"));
        let b = tmp.path().join(format!("{name}-b"));
        for dir in [&a, &b] {
            for args in cmds {
                if let Err(e) = run_cli(bin, dir, cfg, args) {
                    return outcome(false, format!("command failed: {e}"));
                }
            }
        }
        let first = snapshot(&a);
        // rerun in place
        for args in cmds {
            if let Err(e) = run_cli(bin, &a, cfg, args) {
                return outcome(false, format!("command failed: {e}"));
            }
        }
        let again = snapshot(&a);
        let other = snapshot(&b);
        for (k, v) in &first {
            n_files += 1;
            if again.get(k) != Some(v) || other.get(k) != Some(v) {
                differing.push(format!("{name}/{k}"));
            }
        }
        if first.len() != other.len() || first.len() != again.len() {
            differing.push(format!("{name}: file sets differ"));
        }
    }
    outcome(
        differing.is_empty(),
        format!("{n_files} output files compared across reruns; differing: {differing:?}"),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let needs_toy = [3, 4, 6, 7, 8, 9].iter().any(|&i| want(i));
    let toy = needs_toy.then(toy);
    let toy = || toy.as_ref().expect("toy model trained");
    let names = [
        "Gaussian likelihood oracle",
        "GMM likelihood oracle",
        "Hutchinson correctness",
        "Gradient fidelity",
        "Classification oracle",
        "End-to-end training",
        "Accuracy vs probe count",
        "PGD accuracy drop",
        "Interpolation machinery",
        "Bits/dim path",
        "CLI determinism",
    ];
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let k = i + 1;
        if !want(k) {
            continue;
        }
        let t0 = Instant::now();
        let o = match k {
            1 => c1_gaussian_oracle(),
            2 => c2_gmm_oracle(),
            3 => c3_hutchinson(toy()),
            4 => c4_gradients(toy()),
            5 => c5_bayes_agreement(),
            6 => c6_training(toy()),
            7 => c7_probe_counts(toy()),
            8 => c8_attacks(toy()),
            9 => c9_interpolation(toy()),
            10 => c10_bits_per_dim(),
            _ => c11_determinism(),
        };
        println!(
            "criterion {k:>2} [{}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(k);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
