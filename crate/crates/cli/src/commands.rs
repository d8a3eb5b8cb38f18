//! One pipeline per subcommand. Every run writes its artifacts and a manifest
//! into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use hypervae::discovery::{design_search, hyper_search, DiscoveryTrace};
use hypervae::evaluation::{
    build_outlier_task, mean_is_nll, operating_threshold, outlier_score, posterior_kl_metric, roc_auc,
    threshold_metrics, MetricsRow, Scorer,
};
use hypervae::mdl::{bits_back_length_with_noise, vae_two_part_length, CodeLengthReport};
use hypervae::{
    gradient_suite, train_hypervae, train_vae, Checkpoint, HyperArch, HyperParams, HyperVae, ModelKind, RngState,
    Scalar, SuiteDims, TaskDataset, TaskVae, ThetaVector, TrainTrace, VaeArch,
};

use crate::config::{ExperimentConfig, Precision};
use crate::manifest::{ArtifactSink, Manifest};
use crate::output::{fmt_f64, pgm_grid, vector_row};
use crate::tasks::{capped, load_tasks, TaskSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainVae,
    TrainHypervae,
    EvalDensity,
    Outlier,
    Discover,
    MdlReport,
    Gradcheck,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::TrainVae,
        Command::TrainHypervae,
        Command::EvalDensity,
        Command::Outlier,
        Command::Discover,
        Command::MdlReport,
        Command::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainVae => "train-vae",
            Command::TrainHypervae => "train-hypervae",
            Command::EvalDensity => "eval-density",
            Command::Outlier => "outlier",
            Command::Discover => "discover",
            Command::MdlReport => "mdl-report",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// False when a check-style command (gradcheck) found a failure.
    pub passed: bool,
}

/// Runs `cmd` with `cfg`, writing into `out_dir`. The manifest is written even
/// when the pipeline fails, marked incomplete.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut sink = ArtifactSink::new(out_dir)?;
    let result = match (cmd, cfg.precision) {
        (Command::Gradcheck, _) => gradcheck(cfg, &mut sink),
        (_, Precision::F64) => dispatch::<f64>(cmd, cfg, &mut sink),
        (_, Precision::F32) => dispatch::<f32>(cmd, cfg, &mut sink),
    };
    let manifest = Manifest {
        command: cmd.name().to_string(),
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.to_toml()?,
        complete: result.is_ok(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        artifacts: sink.into_artifacts(),
    };
    let manifest_path = manifest.write(out_dir)?;
    let passed = result?;
    Ok(RunOutcome { manifest, manifest_path, passed })
}

fn dispatch<T: Scalar>(cmd: Command, cfg: &ExperimentConfig, sink: &mut ArtifactSink) -> Result<bool> {
    let tasks = load_tasks::<T>(cfg)?;
    match cmd {
        Command::TrainVae => train_vae_cmd(cfg, &tasks, sink),
        Command::TrainHypervae => train_hypervae_cmd(cfg, &tasks, sink),
        Command::EvalDensity => eval_density(cfg, &tasks, sink),
        Command::Outlier => outlier(cfg, &tasks, sink),
        Command::Discover => discover(cfg, &tasks, sink),
        Command::MdlReport => mdl_report(cfg, &tasks, sink),
        Command::Gradcheck => unreachable!("handled before dispatch"),
    }?;
    Ok(true)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[hypervae] {}", msg.as_ref());
}

fn fit_vae<T: Scalar>(cfg: &ExperimentConfig, arch: VaeArch, task: &TaskDataset<T>) -> Result<(ThetaVector<T>, TrainTrace)> {
    let out = train_vae(arch, task, &cfg.train_config(cfg.train.max_iters), None)?;
    Ok((out.params, out.trace))
}

fn fit_hyper<T: Scalar>(cfg: &ExperimentConfig, arch: HyperArch, tasks: &[TaskDataset<T>]) -> Result<(HyperParams<T>, TrainTrace)> {
    let out = train_hypervae(arch, tasks, &cfg.train_config(cfg.train.hyper_max_iters), None)?;
    Ok((out.params, out.trace))
}

fn to64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to64()).collect()
}

/// Decoder means at `n` prior draws.
fn prior_samples<T: Scalar>(vae: &TaskVae, theta: &ThetaVector<T>, n: usize, rng: &mut RngState) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| {
            let z: Vec<T> = rng.normal_vec(vae.arch().latent);
            Ok(to64(&vae.decode(theta, &z)?))
        })
        .collect()
}

fn checkpoint_bytes<T: Scalar>(model: ModelKind, values: &[T]) -> Result<Vec<u8>> {
    Ok(Checkpoint::new(model, values)?.encode()?)
}

fn train_vae_cmd<T: Scalar>(cfg: &ExperimentConfig, tasks: &TaskSplit<T>, sink: &mut ArtifactSink) -> Result<()> {
    let arch = cfg.vae_arch(tasks.dim());
    let vae = TaskVae::new(arch);
    let mut grid = Vec::new();
    for t in &tasks.train {
        log(format!("training VAE on task {} ({} items)", t.task_id, t.len()));
        let (theta, trace) = fit_vae(cfg, arch, t)?;
        sink.write(&format!("vae_task{}.ckpt", t.task_id), &checkpoint_bytes(ModelKind::Vae(arch), theta.values())?)?;
        sink.write(&format!("trace_vae_task{}.csv", t.task_id), trace.to_csv().as_bytes())?;
        grid.extend(prior_samples(&vae, &theta, 8, &mut RngState::new(cfg.seed).fork(400 + t.task_id as u64))?);
    }
    sink.write("samples_vae.pgm", &pgm_grid(&grid, tasks.side, 8))?;
    Ok(())
}

fn train_hypervae_cmd<T: Scalar>(cfg: &ExperimentConfig, tasks: &TaskSplit<T>, sink: &mut ArtifactSink) -> Result<()> {
    let arch = cfg.hyper_arch(tasks.dim());
    let hv = HyperVae::new(arch);
    log(format!("training hyper-VAE on {} tasks", tasks.train.len()));
    let (gamma, trace) = fit_hyper(cfg, arch, &tasks.train)?;
    sink.write("hypervae.ckpt", &checkpoint_bytes(ModelKind::Hyper(arch), gamma.values())?)?;
    sink.write("trace_hypervae.csv", trace.to_csv().as_bytes())?;
    let mut grid = Vec::new();
    for t in &tasks.train {
        let theta = hv.theta_for_task(&gamma, t.items())?;
        grid.extend(prior_samples(hv.target(), &theta, 8, &mut RngState::new(cfg.seed).fork(400 + t.task_id as u64))?);
    }
    sink.write("samples_hypervae.pgm", &pgm_grid(&grid, tasks.side, 8))?;
    Ok(())
}

fn mean_row(rows: &[MetricsRow], model: &str, seed: u64) -> MetricsRow {
    let pick: Vec<&MetricsRow> = rows.iter().filter(|r| r.model == model).collect();
    let avg = |f: fn(&MetricsRow) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = pick.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty() && v.len() == pick.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    MetricsRow {
        task_id: "mean".into(),
        model: model.into(),
        auc: avg(|r| r.auc),
        fpr: avg(|r| r.fpr),
        fnr: avg(|r| r.fnr),
        precision: avg(|r| r.precision),
        nll_mean: avg(|r| r.nll_mean),
        kl_mean: avg(|r| r.kl_mean),
        seed,
    }
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn eval_density<T: Scalar>(cfg: &ExperimentConfig, tasks: &TaskSplit<T>, sink: &mut ArtifactSink) -> Result<()> {
    let arch = cfg.vae_arch(tasks.dim());
    let vae = TaskVae::new(arch);
    let harch = cfg.hyper_arch(tasks.dim());
    let hv = HyperVae::new(harch);
    log(format!("training hyper-VAE on {} tasks", tasks.train.len()));
    let (gamma, htrace) = fit_hyper(cfg, harch, &tasks.train)?;
    sink.write("trace_hypervae.csv", htrace.to_csv().as_bytes())?;
    let root = RngState::new(cfg.seed);
    let mut rows = Vec::new();
    for t in &tasks.train {
        let test = tasks.test_task(t.task_id).ok_or_else(|| anyhow!("task {} has no test split", t.task_id))?;
        if test.is_empty() {
            bail!("task {} has an empty test split", t.task_id);
        }
        let test = capped(test, cfg.eval.max_items);
        log(format!("task {}: training VAE, evaluating {} items", t.task_id, test.len()));
        let (theta, trace) = fit_vae(cfg, arch, t)?;
        sink.write(&format!("trace_vae_task{}.csv", t.task_id), trace.to_csv().as_bytes())?;
        let htheta = hv.theta_for_task(&gamma, t.items())?;
        for (name, th, stream) in [("vae", &theta, 500u64), ("hypervae", &htheta, 600)] {
            let mut rng = root.fork(stream + t.task_id as u64);
            let nll = mean_is_nll(&vae, th, &test, cfg.eval.is_samples, &mut rng)?;
            rows.push(MetricsRow {
                task_id: t.task_id.to_string(),
                model: name.into(),
                auc: None,
                fpr: None,
                fnr: None,
                precision: None,
                nll_mean: Some(nll),
                kl_mean: Some(posterior_kl_metric(&vae, th, &test)?),
                seed: cfg.seed,
            });
        }
    }
    for m in ["vae", "hypervae"] {
        rows.push(mean_row(&rows, m, cfg.seed));
    }
    sink.write("density.csv", metrics_csv(&rows).as_bytes())?;
    Ok(())
}

fn outlier<T: Scalar>(cfg: &ExperimentConfig, tasks: &TaskSplit<T>, sink: &mut ArtifactSink) -> Result<()> {
    let train_pool = tasks.pooled_train()?;
    let test_pool = tasks.pooled_test()?;
    let classes = cfg.outlier.normal_classes.clone().unwrap_or_else(|| train_pool.classes());
    let arch = cfg.vae_arch(tasks.dim());
    let vae = TaskVae::new(arch);
    let harch = cfg.hyper_arch(tasks.dim());
    let hv = HyperVae::new(harch);
    let root = RngState::new(cfg.seed);
    let mut rows = Vec::new();
    let mut scores_csv = String::from("task_id,model,index,label,outlier,score\n");
    for &c in &classes {
        let task = build_outlier_task(&train_pool, &test_pool, c, cfg.outlier.contamination, &mut root.fork(700 + u64::from(c)))?;
        log(format!("outlier task {c}: {} normals, {} outliers", task.test.len() - task.outlier_count(), task.outlier_count()));
        let (theta, _) = fit_vae(cfg, arch, &task.train)?;
        let (gamma, _) = fit_hyper(cfg, harch, std::slice::from_ref(&task.train))?;
        let htheta = hv.theta_for_task(&gamma, task.train.items())?;
        let train_eval = capped(&task.train, cfg.eval.max_items);
        for (name, th, stream) in [("vae", &theta, 800u64), ("hypervae", &htheta, 900)] {
            let scorer = Scorer::Vae { vae: &vae, theta: th };
            let mut rng = root.fork(stream + u64::from(c));
            let score = |x: &[T], rng: &mut RngState| outlier_score(&scorer, x, cfg.eval.score_samples, rng);
            let train_scores = train_eval.items().iter().map(|x| score(x, &mut rng)).collect::<hypervae::Result<Vec<f64>>>()?;
            let test_scores = task.test.items().iter().map(|x| score(x, &mut rng)).collect::<hypervae::Result<Vec<f64>>>()?;
            for (i, (s, f)) in test_scores.iter().zip(&task.flags).enumerate() {
                let _ = writeln!(scores_csv, "{c},{name},{i},{},{},{}", task.test.labels()[i], u8::from(*f), fmt_f64(*s));
            }
            let auc = (task.outlier_count() > 0).then(|| roc_auc(&test_scores, &task.flags)).transpose()?;
            let thr = operating_threshold(&train_scores)?;
            let tm = (task.outlier_count() > 0).then(|| threshold_metrics(&test_scores, &task.flags, thr)).transpose()?;
            rows.push(MetricsRow {
                task_id: c.to_string(),
                model: name.into(),
                auc,
                fpr: tm.map(|m| m.fpr),
                fnr: tm.map(|m| m.fnr),
                precision: tm.and_then(|m| m.precision),
                nll_mean: None,
                kl_mean: None,
                seed: cfg.seed,
            });
        }
    }
    for m in ["vae", "hypervae"] {
        rows.push(mean_row(&rows, m, cfg.seed));
    }
    sink.write("outlier.csv", metrics_csv(&rows).as_bytes())?;
    sink.write("outlier_scores.csv", scores_csv.as_bytes())?;
    Ok(())
}

fn discover<T: Scalar>(cfg: &ExperimentConfig, tasks: &TaskSplit<T>, sink: &mut ArtifactSink) -> Result<()> {
    let dc = &cfg.discovery;
    let held = dc.held_out_class as usize;
    let target_task = tasks.test_task(held).filter(|t| !t.is_empty()).ok_or_else(|| anyhow!("no test items for held-out class {held}"))?;
    let target = target_task.item(0).to_vec();
    let train: Vec<TaskDataset<T>> = tasks.train.iter().filter(|t| t.task_id != held).cloned().collect();
    if train.is_empty() {
        bail!("no training classes left after holding out {held}");
    }
    let harch = cfg.hyper_arch(tasks.dim());
    let hv = HyperVae::new(harch);
    log(format!("training hyper-VAE on {} classes (holding out {held})", train.len()));
    let (gamma, _) = fit_hyper(cfg, harch, &train)?;
    let refs: Vec<&TaskDataset<T>> = train.iter().collect();
    let pooled = TaskDataset::concat(usize::MAX, &refs)?;
    log("training pooled VAE baseline");
    let (theta, _) = fit_vae(cfg, harch.target, &pooled)?;

    let root = RngState::new(cfg.seed);
    log(format!("searching: {} steps × {} BO iterations", dc.steps, dc.bo_iters));
    let trace = hyper_search(&hv, &gamma, &target, None, &dc.search(), &root.fork(1000))?;
    let base = design_search(hv.target(), &theta, &target, &dc.bo(), &mut root.fork(1001))?;
    let base_trace = DiscoveryTrace { steps: vec![base.clone()] };
    sink.write("discovery_trace.csv", trace.to_csv().as_bytes())?;
    sink.write("discovery_baseline.csv", base_trace.to_csv().as_bytes())?;

    let mut summary = String::from("method,steps,distance\n");
    let _ = writeln!(summary, "hypervae_iterative,{},{}", dc.steps, fmt_f64(trace.final_distance()));
    let _ = writeln!(summary, "hypervae_last_step,{},{}", dc.steps, fmt_f64(trace.steps[trace.steps.len() - 1].distance));
    let _ = writeln!(summary, "hypervae_one_step,1,{}", fmt_f64(trace.steps[0].distance));
    let _ = writeln!(summary, "vae_bo,1,{}", fmt_f64(base.distance));
    sink.write("discovery_summary.csv", summary.as_bytes())?;

    let mut images = vec![to64(&target)];
    let mut designs = vector_row("target", &to64(&target)) + "\n";
    for st in &trace.steps {
        images.push(st.x_star.clone());
        designs += &(vector_row(&format!("hypervae_step{}", st.step + 1), &st.x_star) + "\n");
    }
    images.push(base.x_star.clone());
    designs += &(vector_row("vae_bo", &base.x_star) + "\n");
    sink.write("designs.csv", designs.as_bytes())?;
    sink.write("designs.pgm", &pgm_grid(&images, tasks.side, images.len()))?;
    Ok(())
}

fn mdl_report<T: Scalar>(cfg: &ExperimentConfig, tasks: &TaskSplit<T>, sink: &mut ArtifactSink) -> Result<()> {
    let arch = cfg.vae_arch(tasks.dim());
    let vae = TaskVae::new(arch);
    let harch = cfg.hyper_arch(tasks.dim());
    let hv = HyperVae::new(harch);
    log(format!("training hyper-VAE on {} tasks", tasks.train.len()));
    let (gamma, _) = fit_hyper(cfg, harch, &tasks.train)?;
    let root = RngState::new(cfg.seed);
    let mut csv = String::from(CodeLengthReport::CSV_HEADER);
    csv.push('\n');
    for t in &tasks.train {
        let data = capped(tasks.test_task(t.task_id).unwrap_or(t), cfg.eval.max_items);
        if data.len() < cfg.mdl.k {
            bail!("task {} has fewer than mdl.k = {} evaluation items", t.task_id, cfg.mdl.k);
        }
        log(format!("task {}: code lengths over {} items", t.task_id, data.len()));
        let (theta, _) = fit_vae(cfg, arch, t)?;
        let mut rng = root.fork(1100 + t.task_id as u64);
        let z_eps: Vec<Vec<T>> = (0..data.len()).map(|_| rng.normal_vec(arch.latent)).collect();
        let two = vae_two_part_length(&vae, &theta, data.items(), &z_eps, cfg.mdl.eps)?;
        csv += &(two.csv_row(&format!("vae_task{}", t.task_id)) + "\n");
        let mut rng = root.fork(1200 + t.task_id as u64);
        let draws = (0..cfg.mdl.samples)
            .map(|_| hv.draw_noise(data.len(), cfg.mdl.k, &mut rng))
            .collect::<hypervae::Result<Vec<_>>>()?;
        let bb = bits_back_length_with_noise(&hv, &gamma, data.items(), &draws, cfg.mdl.eps)?;
        csv += &(bb.csv_row(&format!("hypervae_task{}", t.task_id)) + "\n");
    }
    sink.write("mdl.csv", csv.as_bytes())?;
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, sink: &mut ArtifactSink) -> Result<bool> {
    let g = &cfg.gradcheck;
    let dims = SuiteDims {
        input_dim: g.input_dim,
        hidden: g.hidden,
        latent: g.latent,
        hyper_latent: g.hyper_latent,
        hyper_dec_hidden: g.hyper_dec_hidden,
        batch: g.batch,
    };
    let results = gradient_suite(dims, g.step, cfg.seed)?;
    let mut csv = String::from("component,max_relative_error,worst_index,checked,pass\n");
    let mut all = true;
    for (name, r) in &results {
        let pass = r.max_relative_error < g.tolerance;
        all &= pass;
        println!("{name:<28} max rel err {:.3e}  {}", r.max_relative_error, if pass { "ok" } else { "FAIL" });
        let _ = writeln!(csv, "{name},{},{},{},{}", fmt_f64(r.max_relative_error), r.worst_index, r.checked, pass);
    }
    sink.write("gradcheck.csv", csv.as_bytes())?;
    Ok(all)
}
