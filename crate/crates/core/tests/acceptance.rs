//! Acceptance gate. Prints one line per criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use advgdro::attack::{pgd_step, run_attack, AttackConfig, Perturbation, PerturbMode};
use advgdro::cli;
use advgdro::convergence::{self, ConvexInstance, GapConfig, InstanceSpec};
use advgdro::data::{generate, GroupedDataset, Split, SpuriousSpec};
use advgdro::dro::GroupWeights;
use advgdro::eval::{evaluate, MetricsReport};
use advgdro::model::{Activation, ModelParams};
use advgdro::rng::RngState;
use advgdro::tensor::Tensor;
use advgdro::trainers::{Method, ModelSpec, TrainConfig, TrainerState};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// ---------------------------------------------------------------- criterion 1

fn mean_loss(p: &ModelParams, x: &Tensor, y: &[usize]) -> f64 {
    p.loss_and_grads(x, y).unwrap().loss.value
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-12, f64::max);
    diff / scale
}

fn gradient_oracle() -> Outcome {
    let mut rng = RngState::new(101);
    let archs: [&[usize]; 3] = [&[], &[5], &[4, 3]];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for arch in archs {
        for _ in 0..20 {
            let d = 2 + rng.index(4);
            let c = 2 + rng.index(3);
            let n = 1 + rng.index(6);
            let base = ModelParams::init(d, arch, c, Activation::Tanh, &mut rng).unwrap();
            let flat: Vec<f64> = base.flatten().iter().map(|v| v + rng.uniform(-0.3, 0.3)).collect();
            let p = base.with_flat(&flat).unwrap();
            let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
            let y: Vec<usize> = (0..n).map(|_| rng.index(c)).collect();
            let g = p.loss_and_grads(&x, &y).unwrap();

            let fd_theta: Vec<f64> = (0..flat.len())
                .map(|k| {
                    let mut a = flat.clone();
                    a[k] += h;
                    let mut b = flat.clone();
                    b[k] -= h;
                    (mean_loss(&p.with_flat(&a).unwrap(), &x, &y) - mean_loss(&p.with_flat(&b).unwrap(), &x, &y)) / (2.0 * h)
                })
                .collect();
            let fd_x: Vec<f64> = (0..n * d)
                .map(|k| {
                    let mut a = x.clone();
                    a.data_mut()[k] += h;
                    let mut b = x.clone();
                    b.data_mut()[k] -= h;
                    (mean_loss(&p, &a, &y) - mean_loss(&p, &b, &y)) / (2.0 * h)
                })
                .collect();
            worst = worst
                .max(rel_err(&g.grad_theta.flatten(), &fd_theta))
                .max(rel_err(g.grad_x.data(), &fd_x));
            pairs += 1;
        }
    }
    outcome(worst < 1e-4, format!("{pairs} pairs, max relative error {worst:.2e} (limit 1e-4)"))
}

// ---------------------------------------------------------------- criterion 2

fn invariants() -> Outcome {
    let cfg = Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new(cfg.clone());
    let pgd = runner.run(
        &(1usize..5, 1usize..5, 0.0f64..0.5, 0.0f64..1.0, 0.0f64..2.0, any::<bool>(), any::<u64>(), any::<bool>()),
        |(d, n, eps, eta, w, group, seed, hidden)| {
            let mut rng = RngState::new(seed);
            let h: &[usize] = if hidden { &[3] } else { &[] };
            let p = ModelParams::init(d, h, 2, Activation::Relu, &mut rng).unwrap();
            let x = rng.sample_gaussian(&[n, d], 1.0).unwrap();
            let y: Vec<usize> = (0..n).map(|_| rng.index(2)).collect();
            let start = Perturbation {
                delta: rng.sample_gaussian(&[n, d], 1.0).unwrap(),
                epsilon: eps,
            };
            let a = AttackConfig {
                epsilon: eps,
                eta_delta: eta,
                steps: 1,
                sigma: 0.0,
                mode: if group { PerturbMode::Group } else { PerturbMode::Batch },
                clamp_domain: false,
                normalize_group_weight: false,
            };
            let next = pgd_step(&p, &x, &y, &start, &a, w).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(next.max_abs() <= eps);
            Ok(())
        },
    );
    let mut runner = TestRunner::new(cfg);
    let eg = runner.run(
        &(1usize..8, 0.0f64..1.0, proptest::collection::vec((0usize..8, 0.0f64..50.0), 1..20)),
        |(m, eta, ups)| {
            let mut w = GroupWeights::init_uniform(m, eta).unwrap();
            for (g, l) in ups {
                w.eg_update(g % m, l).map_err(|e| TestCaseError::fail(e.to_string()))?;
                let sum: f64 = w.q().iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(w.q().iter().all(|&v| v >= 0.0));
            }
            Ok(())
        },
    );
    let detail = format!(
        "10000 pgd cases: {}; 10000 eg cases: {}",
        pgd.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into()),
        eg.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into())
    );
    outcome(pgd.is_ok() && eg.is_ok(), detail)
}

// ---------------------------------------------------------------- criterion 3

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn linear_attack_optimality() -> Outcome {
    let mut rng = RngState::new(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 1 + rng.index(6);
        let n = 1 + rng.index(8);
        let eps = rng.uniform(0.01, 0.3);
        let w: Vec<f64> = (0..d * 2).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let b = vec![rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)];
        let layer = advgdro::model::Layer::new(Tensor::new(vec![d, 2], w.clone()).unwrap(), Tensor::vector(b.clone()).unwrap()).unwrap();
        let p = ModelParams::new(vec![layer], vec![]).unwrap();
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.index(2)).collect();

        // Closed form: margin shrinks by eps * ||w_y - w_other||_1.
        let mut exact = 0.0;
        for i in 0..n {
            let (yy, oo) = (y[i], 1 - y[i]);
            let mut margin = b[yy] - b[oo];
            let mut l1 = 0.0;
            for j in 0..d {
                let v = w[j * 2 + yy] - w[j * 2 + oo];
                margin += v * x.get(i, j);
                l1 += v.abs();
            }
            exact += softplus(-margin + eps * l1);
        }
        exact /= n as f64;

        let a = AttackConfig {
            epsilon: eps,
            eta_delta: eps,
            steps: 5,
            sigma: eps * eps,
            mode: PerturbMode::Batch,
            clamp_domain: false,
            normalize_group_weight: false,
        };
        let (x_adv, _) = run_attack(&p, &x, &y, &a, 1.0, &mut rng).unwrap();
        let got = mean_loss(&p, &x_adv, &y);
        worst = worst.max((got - exact).abs() / exact.abs().max(1e-300));
    }
    outcome(worst < 1e-6, format!("100 instances, max relative error {worst:.2e} (limit 1e-6)"))
}

// ---------------------------------------------------------------- criterion 4

fn reduction_data(groups: usize) -> GroupedDataset {
    let mut rng = RngState::new(404);
    let n = 60;
    let x = rng.sample_gaussian(&[n, 3], 1.0).unwrap();
    let y: Vec<usize> = (0..n).map(|i| (i / 3) % 2).collect();
    let g: Vec<usize> = (0..n).map(|i| i % groups).collect();
    GroupedDataset::new(x, y, g, 2, groups, Split::Train).unwrap()
}

fn base_cfg(method: Method) -> TrainConfig {
    TrainConfig {
        eta_theta: 0.05,
        total_steps: 200,
        batch_size: 10,
        seed: 44,
        model: ModelSpec {
            hidden: vec![6],
            activation: Activation::Tanh,
        },
        attack: method.is_adversarial().then(|| AttackConfig {
            epsilon: 0.1,
            eta_delta: 0.03,
            ..AttackConfig::standard(PerturbMode::Batch)
        }),
        ..TrainConfig::new(method)
    }
}

/// Steps both configurations 200 times and compares every parameter snapshot bitwise.
fn same_trajectory(a: &TrainConfig, b: &TrainConfig, ds: &GroupedDataset, compare_q: bool) -> bool {
    let mut sa = TrainerState::init(a, ds).unwrap();
    let mut sb = TrainerState::init(b, ds).unwrap();
    if sa.params != sb.params {
        return false;
    }
    for _ in 0..200 {
        let ra = sa.advance(ds, a).unwrap();
        let rb = sb.advance(ds, b).unwrap();
        if sa.params != sb.params || ra.group != rb.group || ra.loss.to_bits() != rb.loss.to_bits() {
            return false;
        }
        if compare_q && ra.q != rb.q {
            return false;
        }
    }
    true
}

fn reduction_web() -> Outcome {
    let four = reduction_data(4);
    let one = reduction_data(1);

    let mut adv = base_cfg(Method::AdvGdro);
    adv.attack = Some(AttackConfig {
        epsilon: 0.0,
        sigma: 0.0,
        ..adv.attack.unwrap()
    });
    let eps_zero = same_trajectory(&adv, &base_cfg(Method::Gdro), &four, true);

    let adv_m1 = base_cfg(Method::AdvGdro);
    let single = same_trajectory(&adv_m1, &base_cfg(Method::AdvErm), &one, false);

    let both = same_trajectory(&adv, &base_cfg(Method::Erm), &one, false);

    // Uniform q frozen by eta_q = 0 with four groups: adv_erm on the drawn group at eta_theta / m.
    let mut frozen = base_cfg(Method::AdvGdro);
    frozen.eta_q = Some(0.0);
    let mut st = TrainerState::init(&frozen, &four).unwrap();
    let erm_like = TrainConfig {
        eta_theta: frozen.eta_theta / 4.0,
        ..base_cfg(Method::AdvErm)
    };
    let mut frozen_ok = true;
    for _ in 0..200 {
        let mut probe = st.rng.clone();
        let g = probe.index(4);
        let rows = advgdro::data::sample_rows(&four, &mut probe, frozen.batch_size, Some(g)).unwrap();
        let batch = four.batch(&rows).unwrap();
        let expect = advgdro::trainers::adv_erm_step(&st.params, &batch, &erm_like, &mut probe).unwrap();
        st.advance(&four, &frozen).unwrap();
        frozen_ok &= st.params == expect && st.rng.clone().next_u64() == probe.next_u64();
    }

    outcome(
        eps_zero && single && both && frozen_ok,
        format!("eps=0 vs gdro: {eps_zero}; m=1 vs adv_erm: {single}; both vs erm: {both}; frozen q vs adv_erm at eta/m: {frozen_ok}"),
    )
}

// ---------------------------------------------------------------- criteria 5, 7

static CHECKS: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_STEPS: &str = "2000";
const GDRO_OVER_ERM: f64 = 0.05;
const ADVGDRO_OVER_ADVERM: f64 = 0.05;
const GROUP_OVER_BATCH: f64 = 0.0;

fn shared_keys(seed: u64) -> BTreeMap<String, String> {
    [("seed", seed.to_string()), ("steps", TREND_STEPS.to_string()), ("eval_every", "100".to_string())]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn write_dataset(dir: &Path, seed: u64) -> advgdro::data::Splits {
    let spec = SpuriousSpec::waterbirds_analog(0.1, seed);
    let s = generate(&spec).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        s.get(split).save(&dir.join(format!("{split}.csv")), Some(&spec)).unwrap();
    }
    s
}

fn trend(work: &Path, identities: &mut Vec<String>) -> Outcome {
    let mut rows: Vec<BTreeMap<String, MetricsReport>> = Vec::new();
    for seed in TREND_SEEDS {
        let data = work.join(format!("trend-data-{seed}"));
        fs::create_dir_all(&data).unwrap();
        let splits = write_dataset(&data, seed);
        let cmp = match cli::run_comparison(&data, &shared_keys(seed), &work.join(format!("trend-out-{seed}"))) {
            Ok(c) => c,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let mut by_label = BTreeMap::new();
        for (r, cfg) in cmp.results.iter().zip(&cmp.configs) {
            check_report(&r.test, &format!("seed {seed} {}", r.label), identities);
            // Zero-budget attack must reproduce the clean metrics.
            let params = advgdro::checkpoint::Checkpoint::load(
                &work.join(format!("trend-out-{seed}/runs/{}/best.ckpt", r.label)),
            )
            .unwrap()
            .params;
            let zero = AttackConfig { epsilon: 0.0, sigma: 0.0, ..cfg.eval_attack };
            let rep = evaluate(&params, &splits.test, Some(&zero), &mut RngState::new(seed)).unwrap();
            check_report(&rep, &format!("seed {seed} {} eps=0", r.label), identities);
            if rep.adversarial_acc != rep.average_acc
                || rep.robust_adv_acc != rep.robust_acc
                || rep.per_group_adv_acc != rep.per_group_acc
            {
                identities.push(format!("seed {seed} {}: eps=0 adversarial metrics differ from clean", r.label));
            }
            by_label.insert(r.label.clone(), r.test.clone());
        }
        rows.push(by_label);
    }
    let med = |label: &str, f: fn(&MetricsReport) -> f64| median(&rows.iter().map(|r| f(&r[label])).collect::<Vec<_>>());
    let rob = |r: &MetricsReport| r.robust_acc;
    let rob_adv = |r: &MetricsReport| r.robust_adv_acc;
    let a = med("gdro", rob) - med("erm", rob);
    let b = med("adv_gdro-group", rob_adv) - med("adv_erm-batch", rob_adv);
    let c = med("adv_gdro-group", rob_adv) - med("adv_gdro-batch", rob_adv);
    outcome(
        a >= GDRO_OVER_ERM && b >= ADVGDRO_OVER_ADVERM && c >= GROUP_OVER_BATCH,
        format!(
            "median over 5 seeds: (a) gdro-erm robust {:+.2} pts (>= 5); (b) adv_gdro-adv_erm robust-adv {:+.2} pts (>= 5); (c) group-batch robust-adv {:+.2} pts (>= 0)",
            100.0 * a,
            100.0 * b,
            100.0 * c
        ),
    )
}

fn check_report(r: &MetricsReport, what: &str, failures: &mut Vec<String>) {
    CHECKS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let min = r.per_group_acc.iter().copied().fold(f64::INFINITY, f64::min);
    let min_adv = r.per_group_adv_acc.iter().copied().fold(f64::INFINITY, f64::min);
    if r.robust_acc != min || r.robust_adv_acc != min_adv || r.average_acc < min || r.adversarial_acc < min_adv {
        failures.push(format!("{what}: identity violated"));
    }
}

// ---------------------------------------------------------------- criterion 6

fn proposition_bound() -> Outcome {
    let inst = ConvexInstance::synthetic(&InstanceSpec::default()).unwrap();
    let report = match convergence::run_report(&inst, &GapConfig::default(), &[100, 1000, 10_000], 20) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let bound_ok = convergence::check_bound(&report).iter().all(|&b| b);
    let inv = convergence::inversions(&report.medians());
    let slope = report.slope().unwrap_or(f64::NAN);
    let nonneg = report.estimates.iter().flat_map(|e| &e.gaps).all(|&g| g >= -1e-5);
    let cells: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("T={} mean {:.4} <= {:.4}", r.t, r.epsilon_t_mean, r.bound))
        .collect();
    outcome(
        bound_ok && inv <= 1 && slope <= -0.3 && nonneg && report.oracle_converged,
        format!(
            "{}; median inversions {inv} (<= 1); slope {slope:.3} (<= -0.3); oracle certificate {:.1e}",
            cells.join(", "),
            report.oracle_certificate
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn determinism(work: &Path) -> Outcome {
    let data = work.join("det-data");
    fs::create_dir_all(&data).unwrap();
    write_dataset(&data, 0);
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = work.join(format!("det-out-{k}"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_advgdro"))
            .args(["compare", "--data"])
            .arg(&data)
            .args(["--seed", "0", "--steps", TREND_STEPS, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("compare exited with {:?}", status.status.code()));
        }
        outs.push(out);
    }
    let m0: cli::RunManifest = serde_json::from_slice(&fs::read(outs[0].join(cli::MANIFEST_FILE)).unwrap()).unwrap();
    let m1: cli::RunManifest = serde_json::from_slice(&fs::read(outs[1].join(cli::MANIFEST_FILE)).unwrap()).unwrap();
    let mut mismatched = Vec::new();
    for f in &m0.outputs {
        let a = fs::read(outs[0].join(&f.path)).unwrap();
        let b = fs::read(outs[1].join(&f.path)).unwrap_or_default();
        if a != b {
            mismatched.push(f.path.clone());
        }
    }
    let csvs = m0.outputs.iter().filter(|f| f.path.ends_with(".csv")).count();
    outcome(
        mismatched.is_empty() && m0.outputs == m1.outputs,
        format!(
            "{} output files ({csvs} CSV) compared byte for byte, {} differ",
            m0.outputs.len(),
            mismatched.len()
        ),
    )
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut identities = Vec::new();
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((n, name, o, t.elapsed()));
        let (n, name, o, d) = results.last().unwrap();
        println!(
            "criterion {n} [{}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            d.as_secs_f64()
        );
    };
    timed(1, "gradient oracle", &mut gradient_oracle);
    timed(2, "projection and simplex invariants", &mut invariants);
    timed(3, "linear-attack optimality", &mut linear_attack_optimality);
    timed(4, "reduction web", &mut reduction_web);
    timed(5, "trend reproduction", &mut || trend(work.path(), &mut identities));
    timed(6, "rate bound", &mut proposition_bound);
    timed(7, "metric identities", &mut || {
        outcome(
            identities.is_empty(),
            if identities.is_empty() {
                format!(
                    "{} test reports checked exactly (plus every validation snapshot inside training)",
                    CHECKS.load(std::sync::atomic::Ordering::Relaxed)
                )
            } else {
                identities.join("; ")
            },
        )
    });
    timed(8, "determinism", &mut || determinism(work.path()));
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
