//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test -p hypervae-cli --test acceptance -- 3 8`.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI, SQRT_2};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hypervae::discovery::{bo_maximize, expected_improvement, BoConfig, GpSurrogate};
use hypervae::evaluation::{is_nll, mean_is_nll, roc_auc, roc_auc_pairwise};
use hypervae::mdl::{bits_back_length_with_noise, DEFAULT_EPS};
use hypervae::{
    dense_equivalent_param_count, gradient_suite, matrix_layer_param_count, train_hypervae, HyperArch, HyperVae,
    KlEstimate, RngState, SuiteDims, TaskVae, VaeArch,
};
use hypervae_cli::config::Family;
use hypervae_cli::manifest::sha256_hex;
use hypervae_cli::tasks::load_tasks;
use hypervae_cli::{replay, run_command, Command, ExperimentConfig, Manifest, MANIFEST_FILE};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn fresh_dir(name: &str) -> PathBuf {
    let d = work_dir().join(name);
    let _ = fs::remove_dir_all(&d);
    d
}

fn binary_batch(rng: &mut RngState, n: usize, d: usize, p: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect()).collect()
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines.map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect()).collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

fn c1_gradients() -> Verdict {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..3 {
        for (name, r) in gradient_suite(SuiteDims::default(), 1e-5, seed).unwrap() {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(r.max_relative_error);
        }
    }
    let pass = worst.values().all(|&e| e < 1e-4);
    let detail = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect::<Vec<_>>().join(" ");
    verdict(pass, detail)
}

fn c2_bits_back_identity() -> Verdict {
    let mut worst = 0.0f64;
    let mut rng = RngState::new(20);
    for trial in 0..100 {
        let d = 4 + trial % 7;
        let arch = HyperArch { target: VaeArch::new(d, 3 + trial % 4, 1 + trial % 3), enc_hidden: 4, latent: 2 + trial % 3, dec_hidden: 9 };
        let hv = HyperVae::new(arch);
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let batch = binary_batch(&mut rng, 1 + trial % 9, d, 0.4);
        let mut noise_rng = RngState::new(1000 + trial as u64);
        let noise = hv.draw_noise(batch.len(), 1, &mut noise_rng).unwrap();
        let obj = hv.joint_objective_k1(&g, &batch, &noise, KlEstimate::ClosedForm, None).unwrap().objective;
        let bb = bits_back_length_with_noise(&hv, &g, &batch, std::slice::from_ref(&noise), DEFAULT_EPS).unwrap();
        worst = worst.max((bb.total_nats + obj).abs());
    }
    verdict(worst < 1e-9, format!("max |L_bb + objective| = {worst:.2e} nats over 100 triples"))
}

fn c3_param_counts() -> Verdict {
    let m = matrix_layer_param_count(20, 20, 400, 400);
    let d = dense_equivalent_param_count(20, 20, 400, 400);
    verdict(m == 176_000 && d == 64_160_000, format!("matrix {m}, dense {d}"))
}

fn c4_iw_reduction() -> Verdict {
    let arch = HyperArch { target: VaeArch::new(6, 5, 2), enc_hidden: 4, latent: 3, dec_hidden: 9 };
    let hv = HyperVae::new(arch);
    let mut rng = RngState::new(40);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let batch = binary_batch(&mut rng, 6, 6, 0.4);
        let noise = hv.draw_noise(batch.len(), 1, &mut rng).unwrap();
        let iw = hv.importance_weighted_objective(&g, &batch, &noise, None).unwrap().objective;
        let k1 = hv.joint_objective_k1(&g, &batch, &noise, KlEstimate::DensityRatio, None).unwrap().objective;
        worst = worst.max((iw - k1).abs());
    }
    let g = hv.init_gamma::<f64>(&mut RngState::new(41), None);
    let batch = binary_batch(&mut RngState::new(42), 8, 6, 0.4);
    let stats = |k: usize| {
        let v: Vec<f64> = (0..200u64)
            .map(|seed| {
                let noise = hv.draw_noise(batch.len(), k, &mut RngState::new(seed)).unwrap();
                hv.importance_weighted_objective(&g, &batch, &noise, None).unwrap().objective
            })
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, (var / v.len() as f64).sqrt())
    };
    let (m1, se1) = stats(1);
    let (m4, se4) = stats(4);
    let se = (se1 * se1 + se4 * se4).sqrt();
    verdict(
        worst < 1e-9 && m4 >= m1 - 3.0 * se,
        format!("K=1 max gap {worst:.1e}; K=4 mean {m4:.4} vs K=1 mean {m1:.4} (3·se {:.4})", 3.0 * se),
    )
}

fn density_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 5;
    c.data.family = Family::Bars;
    c.data.classes = 3;
    c.data.samples_per_class = 200;
    c.train.max_iters = 5000;
    c.train.hyper_max_iters = 9000;
    c.eval.is_samples = 1024;
    c
}

fn c5_density() -> Verdict {
    let cfg = density_config();
    let dir = fresh_dir("density");
    run_command(Command::EvalDensity, &cfg, &dir).unwrap();
    let rows = csv_rows(&dir.join("density.csv"));
    let tasks = load_tasks::<f64>(&cfg).unwrap();
    let d = tasks.dim() as f64;
    let per_px = |model: &str, task: &str| {
        num(rows.iter().find(|r| r["model"] == model && r["task_id"] == task).unwrap(), "nll_mean") / d
    };

    let harch = cfg.hyper_arch(tasks.dim());
    let hv = HyperVae::new(harch);
    let vae = TaskVae::new(harch.target);
    let mut all_below = true;
    let mut all_close = true;
    let mut detail = Vec::new();
    for t in &tasks.train {
        let id = t.task_id.to_string();
        let multi = per_px("hypervae", &id);
        let single_gamma = train_hypervae(harch, std::slice::from_ref(t), &cfg.train_config(cfg.train.hyper_max_iters), None)
            .unwrap()
            .params;
        let theta = hv.theta_for_task(&single_gamma, t.items()).unwrap();
        let test = tasks.test_task(t.task_id).unwrap();
        let single = mean_is_nll(&vae, &theta, test, cfg.eval.is_samples, &mut RngState::new(cfg.seed).fork(50)).unwrap() / d;
        let dedicated = per_px("vae", &id);
        all_below &= multi < LN_2;
        all_close &= (single - dedicated).abs() <= 0.15;
        detail.push(format!("task {id}: hyper {multi:.4} single {single:.4} vae {dedicated:.4}"));
    }
    verdict(all_below && all_close, format!("nats/px, ln2 = {LN_2:.4}; {}", detail.join("; ")))
}

// Gauss–Hermite nodes and weights for ∫ e^{−t²} f(t) dt.
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let pim4 = PI.powf(-0.25);
    let mut out = vec![(0.0, 0.0); n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * out[0].0,
            3 => 1.91 * z - 0.91 * out[1].0,
            _ => 2.0 * z - out[i - 2].0,
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j + 1) as f64).sqrt() * p2 - (j as f64 / (j + 1) as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        out[i] = (z, 2.0 / (pp * pp));
        out[n - 1 - i] = (-z, 2.0 / (pp * pp));
    }
    out
}

fn c6_is_nll() -> Verdict {
    // one pixel, one hidden unit, one latent; decoder logit 1.5 z + 0.5 for z > −8
    let vae = TaskVae::new(VaeArch::new(1, 1, 1));
    let theta = vae.wrap(vec![1.0, 0.5, 1.065, -1.159, 0.043, -0.369, 1.0, 8.0, 1.5, -11.5]).unwrap();
    let gh = gauss_hermite(80);
    let marginal = |x: f64| -> f64 {
        gh.iter()
            .map(|&(t, w)| {
                let m = 1.0 / (1.0 + (-(1.5 * SQRT_2 * t + 0.5)).exp());
                w / PI.sqrt() * if x > 0.5 { m } else { 1.0 - m }
            })
            .sum()
    };
    let mut rng = RngState::new(60);
    let mut worst_gap = 0.0f64;
    for x in [0.0, 1.0] {
        let est = is_nll(&vae, &theta, &[x], 100_000, &mut rng).unwrap();
        worst_gap = worst_gap.max((est + marginal(x).ln()).abs());
    }
    let other = TaskVae::new(VaeArch::new(6, 5, 2));
    let other_theta = other.init_theta::<f64>(&mut RngState::new(61), None);
    let mut bound_ok = true;
    let mut cases: Vec<(&TaskVae, &hypervae::ThetaVector<f64>, Vec<f64>)> =
        vec![(&vae, &theta, vec![0.0]), (&vae, &theta, vec![1.0])];
    for x in binary_batch(&mut rng, 4, 6, 0.5) {
        cases.push((&other, &other_theta, x));
    }
    for (v, th, x) in cases {
        let nll = is_nll(v, th, &x, 4096, &mut rng).unwrap();
        let neg: Vec<f64> = (0..4096).map(|_| -v.elbo(th, &x, &mut rng).unwrap().elbo).collect();
        let mean = neg.iter().sum::<f64>() / neg.len() as f64;
        let var = neg.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (neg.len() - 1) as f64;
        bound_ok &= nll <= mean + 3.0 * (var / neg.len() as f64).sqrt();
    }
    verdict(worst_gap < 1e-3 && bound_ok, format!("IS vs quadrature gap {worst_gap:.2e} nats; bound holds: {bound_ok}"))
}

fn outlier_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 7;
    c.data.family = Family::Strokes;
    c.data.classes = 6;
    c.data.samples_per_class = 400;
    c.train.max_iters = 4000;
    c.train.hyper_max_iters = 4000;
    c.outlier.contamination = 0.05;
    c
}

fn c7_outliers() -> Verdict {
    let cfg = outlier_config();
    let dir = fresh_dir("outlier");
    run_command(Command::Outlier, &cfg, &dir).unwrap();
    let rows = csv_rows(&dir.join("outlier.csv"));
    let auc = |task: &str, model: &str| num(rows.iter().find(|r| r["task_id"] == task && r["model"] == model).unwrap(), "auc");
    let tasks: Vec<String> = rows.iter().filter(|r| r["task_id"] != "mean" && r["model"] == "vae").map(|r| r["task_id"].clone()).collect();
    let mut gate = tasks.len() == 6;
    let mut hyper_wins = 0;
    let mut detail = Vec::new();
    for t in &tasks {
        let (v, h) = (auc(t, "vae"), auc(t, "hypervae"));
        gate &= v > 0.8 && h > 0.8;
        hyper_wins += usize::from(h >= v);
        detail.push(format!("{t}: vae {v:.3} hyper {h:.3}"));
    }

    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in csv_rows(&dir.join("outlier_scores.csv")) {
        let g = groups.entry((r["task_id"].clone(), r["model"].clone())).or_default();
        g.0.push(num(&r, "score"));
        g.1.push(r["outlier"] == "1");
    }
    let exact = groups.values().all(|(s, f)| roc_auc(s, f).unwrap() == roc_auc_pairwise(s, f).unwrap());
    verdict(
        gate && exact,
        format!(
            "AUC > 0.8 on all tasks: {gate}; hyper >= vae on {hyper_wins}/{} (directional); AUC == pairwise oracle on {} sets: {exact}; {}",
            tasks.len(),
            groups.len(),
            detail.join(", ")
        ),
    )
}

fn c8_bo() -> Verdict {
    let cfg = BoConfig { max_iters: 50, ..Default::default() };
    let mut hits = 0;
    let mut in_bounds = true;
    let mut ei_ok = true;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = RngState::new(seed);
        let z0 = [rng.uniform_range(-4.0, 4.0), rng.uniform_range(-4.0, 4.0)];
        let r = bo_maximize(|z| -((z[0] - z0[0]).powi(2) + (z[1] - z0[1]).powi(2)), 2, &cfg, &mut rng).unwrap();
        let dist = ((r.best_z[0] - z0[0]).powi(2) + (r.best_z[1] - z0[1]).powi(2)).sqrt();
        worst = worst.max(dist);
        hits += usize::from(dist < 0.1);
        in_bounds &= r.trace.points.iter().flatten().all(|v| (-5.0..=5.0).contains(v));
        ei_ok &= r.trace.acquisition.iter().filter(|a| !a.is_nan()).all(|&a| a >= 0.0);
        // EI of the final surrogate on a dense grid
        let gp = GpSurrogate::fit_grid(r.trace.points.clone(), r.trace.values.clone(), cfg.noise_var).unwrap();
        let best = r.best_value;
        for i in 0..=60 {
            for j in 0..=60 {
                let z = [-5.0 + i as f64 / 6.0, -5.0 + j as f64 / 6.0];
                let (m, v) = gp.predict(&z).unwrap();
                ei_ok &= expected_improvement(m, v, best) >= 0.0;
            }
        }
    }
    verdict(
        hits == 10 && in_bounds && ei_ok,
        format!("{hits}/10 seeds within 0.1 (worst {worst:.3}); in bounds: {in_bounds}; EI >= 0: {ei_ok}"),
    )
}

const DISCOVERY_SEEDS: [u64; 2] = [0, 1];
const DISCOVERY_HELD: [u32; 5] = [0, 1, 2, 3, 4];

fn discovery_config(seed: u64, held: u32) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.data.family = Family::Bars;
    c.data.classes = 6;
    c.data.samples_per_class = 200;
    c.train.max_iters = 6000;
    c.train.hyper_max_iters = 6000;
    c.train.early_stop_window = 0;
    c.discovery.held_out_class = held;
    c.discovery.steps = 5;
    c.discovery.bo_iters = 300;
    c
}

fn nonincreasing(rows: &[BTreeMap<String, String>]) -> bool {
    rows.windows(2).all(|w| w[0]["step"] != w[1]["step"] || num(&w[1], "best_distance") <= num(&w[0], "best_distance"))
}

fn c9_discovery() -> Verdict {
    let mut ordered = 0;
    let mut monotone = true;
    let mut detail = Vec::new();
    let mut runs = 0;
    for seed in DISCOVERY_SEEDS {
        for held in DISCOVERY_HELD {
            let dir = fresh_dir(&format!("discovery_s{seed}_c{held}"));
            run_command(Command::Discover, &discovery_config(seed, held), &dir).unwrap();
            let summary = csv_rows(&dir.join("discovery_summary.csv"));
            let get = |m: &str| num(summary.iter().find(|r| r["method"] == m).unwrap(), "distance");
            let (it, one, base) = (get("hypervae_iterative"), get("hypervae_one_step"), get("vae_bo"));
            ordered += usize::from(it <= one && one <= base);
            monotone &= nonincreasing(&csv_rows(&dir.join("discovery_trace.csv")));
            monotone &= nonincreasing(&csv_rows(&dir.join("discovery_baseline.csv")));
            detail.push(format!("s{seed}c{held} {it:.3}/{one:.3}/{base:.3}"));
            runs += 1;
        }
    }
    verdict(
        ordered >= 7 && monotone,
        format!(
            "iterative <= one-step <= VAE+BO on {ordered}/{runs}; best-so-far nonincreasing: {monotone}; {}",
            detail.join(" ")
        ),
    )
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.data.side = 6;
    c.data.classes = 3;
    c.data.samples_per_class = 30;
    c.data.test_fraction = 0.3;
    c.model.hidden = 8;
    c.model.latent = 2;
    c.model.hyper_enc_hidden = 8;
    c.model.hyper_latent = 2;
    c.model.hyper_dec_hidden = 16;
    c.train.max_iters = 60;
    c.train.hyper_max_iters = 60;
    c.train.batch_size = 5;
    c.eval.is_samples = 16;
    c.eval.max_items = Some(6);
    c.outlier.contamination = 0.2;
    c.discovery.steps = 2;
    c.discovery.bo_iters = 15;
    c.mdl.samples = 2;
    c
}

fn c10_determinism() -> Verdict {
    let mut replayed = 0;
    let mut mismatched = Vec::new();
    let cfg = tiny_config();
    for cmd in Command::ALL {
        let dir = fresh_dir(&format!("replay_{}", cmd.name()));
        let out = run_command(cmd, &cfg, &dir.join("run")).unwrap();
        let m = replay(&out.manifest, &dir.join("rerun")).unwrap();
        mismatched.extend(m.into_iter().map(|mm| format!("{}:{}", cmd.name(), mm.path)));
        replayed += 1;
    }
    // artifacts stored by the larger runs must still match their manifests
    let mut stored = 0;
    if let Ok(entries) = fs::read_dir(work_dir()) {
        for e in entries.flatten() {
            let path = e.path().join(MANIFEST_FILE);
            if e.file_name().to_string_lossy().starts_with("replay_") || !path.exists() {
                continue;
            }
            let m = Manifest::load(&path).unwrap();
            for a in m.csv_artifacts() {
                let bytes = fs::read(e.path().join(&a.path)).unwrap_or_default();
                if sha256_hex(&bytes) != a.sha256 {
                    mismatched.push(format!("{}:{}", e.file_name().to_string_lossy(), a.path));
                }
            }
            stored += 1;
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("{replayed} commands replayed, {stored} stored runs re-hashed; mismatches: {mismatched:?}"),
    )
}

type Criterion = fn() -> Verdict;

fn main() {
    let all: [(usize, Criterion); 10] = [
        (1, c1_gradients),
        (2, c2_bits_back_identity),
        (3, c3_param_counts),
        (4, c4_iw_reduction),
        (5, c5_density),
        (6, c6_is_nll),
        (7, c7_outliers),
        (8, c8_bo),
        (9, c9_discovery),
        (10, c10_determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, f) in all {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {n:>2}: {} ({:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
