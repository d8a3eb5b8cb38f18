//! Adam and the training loops for the task VAE and the hyper-VAE.
//!
//! Both objectives are maximized, so Adam steps *up* the gradient.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::hypernet::{HyperArch, HyperParams, HyperVae, IwGradient, KlEstimate};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::vae::{TaskVae, ThetaVector, VaeArch};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Mixture size `K` for the hyper-VAE.
    pub k: usize,
    /// Record a trace row every `log_every` iterations.
    pub log_every: usize,
    /// Stop once the mean objective of the latest window improves on the
    /// previous window by less than `early_stop_tol`. Zero disables.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    /// KL form for the `K = 1` objective.
    pub kl: KlEstimate,
    /// Gradient route for `K > 1`.
    pub iw_gradient: IwGradient,
    /// Fill the wall-clock column of the trace. Off by default so traces are
    /// reproducible byte for byte.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 3e-4,
            adam_eps: 1e-8,
            batch_size: 30,
            max_iters: 5000,
            seed: 0,
            k: 1,
            log_every: 1,
            early_stop_window: 500,
            early_stop_tol: 1e-4,
            kl: KlEstimate::ClosedForm,
            iw_gradient: IwGradient::Reparameterized,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("Adam betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rate and Adam epsilon must be positive".into());
        }
        if self.batch_size == 0 || self.k == 0 {
            return bad("batch size and K must be >= 1".into());
        }
        if self.k > self.batch_size {
            return bad(format!("K = {} exceeds batch size {}", self.k, self.batch_size));
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    /// Steps rejected because of non-finite gradients or updates.
    pub skipped: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0, skipped: 0 }
    }
}

/// One bias-corrected Adam ascent step. Returns `false` (and leaves params
/// and moments untouched) when the gradient or the resulting step is not finite.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<bool> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let t = state.t + 1;
    let c1 = T::one() - T::of(config.beta1.powi(t as i32));
    let c2 = T::one() - T::of(config.beta2.powi(t as i32));
    let (lr, eps) = (T::of(config.learning_rate), T::of(config.adam_eps));
    let mut m_new = Vec::with_capacity(params.len());
    let mut v_new = Vec::with_capacity(params.len());
    let mut step = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (T::one() - b1) * g;
        let v = b2 * state.v[i] + (T::one() - b2) * g * g;
        let s = lr * (m / c1) / ((v / c2).sqrt() + eps);
        if !(params[i] + s).is_finite() {
            state.skipped += 1;
            return Ok(false);
        }
        m_new.push(m);
        v_new.push(v);
        step.push(s);
    }
    for (p, s) in params.iter_mut().zip(&step) {
        *p += *s;
    }
    state.m = m_new;
    state.v = v_new;
    state.t = t;
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Minibatch objective (nats, to maximize).
    pub objective: f64,
    /// KL over `u`; zero for the VAE baseline.
    pub kl_u: f64,
    /// Summed reconstruction log-likelihood of the minibatch.
    pub recon: f64,
    pub wallclock_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub skipped_steps: u64,
    /// Iteration at which early stopping fired.
    pub stopped_at: Option<usize>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "iter,objective_nats,kl_u_nats,recon_nats,wallclock_s";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:.16e},{:.16e},{:.16e},", r.iter, r.objective, r.kl_u, r.recon);
            if let Some(w) = r.wallclock_s {
                let _ = write!(s, "{w:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    /// Trailing moving average of the objective over `window` rows.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        moving_average(&self.objectives(), window)
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub trace: TrainTrace,
}

struct Loop<'a> {
    config: &'a TrainConfig,
    started: Instant,
    history: Vec<f64>,
    trace: TrainTrace,
}

impl<'a> Loop<'a> {
    fn new(config: &'a TrainConfig) -> Self {
        Self { config, started: Instant::now(), history: Vec::new(), trace: TrainTrace::default() }
    }

    /// Records iteration `iter`; returns `true` when training should stop.
    fn record(&mut self, iter: usize, objective: f64, kl_u: f64, recon: f64) -> Result<bool> {
        if !objective.is_finite() {
            let mut trace = std::mem::take(&mut self.trace);
            trace.rows.push(TraceRow { iter, objective, kl_u, recon, wallclock_s: None });
            return Err(Error::Diverged { iter, trace: Box::new(trace) });
        }
        self.history.push(objective);
        if iter.is_multiple_of(self.config.log_every) || iter + 1 == self.config.max_iters {
            let wallclock_s = self.config.record_wallclock.then(|| self.started.elapsed().as_secs_f64());
            self.trace.rows.push(TraceRow { iter, objective, kl_u, recon, wallclock_s });
        }
        let w = self.config.early_stop_window;
        let n = self.history.len();
        if w > 0 && n >= 2 * w && n.is_multiple_of(w) {
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let latest = mean(&self.history[n - w..]);
            let previous = mean(&self.history[n - 2 * w..n - w]);
            if latest - previous < self.config.early_stop_tol {
                self.trace.stopped_at = Some(iter);
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn finish(mut self, skipped: u64) -> TrainTrace {
        self.trace.skipped_steps = skipped;
        self.trace
    }
}

/// Fits a single task VAE by maximizing the summed minibatch ELBO.
pub fn train_vae<T: Scalar>(
    arch: VaeArch,
    task: &TaskDataset<T>,
    config: &TrainConfig,
    init: Option<ThetaVector<T>>,
) -> Result<TrainOutcome<ThetaVector<T>>> {
    config.validate()?;
    if task.is_empty() {
        return Err(Error::InvalidArgument("training task is empty".into()));
    }
    if task.dim() != arch.input_dim {
        return Err(Error::Shape(format!("task dim {} vs VAE input {}", task.dim(), arch.input_dim)));
    }
    let vae = TaskVae::new(arch);
    let root = RngState::new(config.seed);
    let mut theta = match init {
        Some(t) => t,
        None => vae.init_theta(&mut root.fork(1), Some(&task.pixel_mean())),
    };
    let mut rng = root.fork(2);
    let mut adam = AdamState::new(theta.len());
    let mut grad = vec![T::zero(); theta.len()];
    let mut lp = Loop::new(config);
    for iter in 0..config.max_iters {
        let batch = task.sample_batch(config.batch_size, &mut rng);
        grad.iter_mut().for_each(|g| *g = T::zero());
        let (mut obj, mut recon) = (0.0, 0.0);
        for x in &batch {
            let eps: Vec<T> = rng.normal_vec(arch.latent);
            let e = vae.elbo_grad_into(theta.values(), x, &eps, T::one(), &mut grad);
            obj += e.elbo.to64();
            recon += e.recon_loglik.to64();
        }
        if lp.record(iter, obj, 0.0, recon)? {
            break;
        }
        adam_step(theta.values_mut(), &grad, &mut adam, config)?;
    }
    Ok(TrainOutcome { params: theta, trace: lp.finish(adam.skipped) })
}

/// Trains the hyper-VAE. Each iteration picks one task uniformly, draws a
/// minibatch and noise, and ascends the `K = 1` objective (or the
/// importance-weighted objective when `K > 1`).
pub fn train_hypervae<T: Scalar>(
    arch: HyperArch,
    tasks: &[TaskDataset<T>],
    config: &TrainConfig,
    init: Option<HyperParams<T>>,
) -> Result<TrainOutcome<HyperParams<T>>> {
    config.validate()?;
    if tasks.is_empty() || tasks.iter().any(TaskDataset::is_empty) {
        return Err(Error::InvalidArgument("need at least one nonempty task".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.dim() != arch.target.input_dim) {
        return Err(Error::Shape(format!("task dim {} vs VAE input {}", t.dim(), arch.target.input_dim)));
    }
    if let Some(t) = tasks.iter().find(|t| t.len() < config.k) {
        return Err(Error::InvalidArgument(format!("task {} has fewer than K = {} items", t.task_id, config.k)));
    }
    let hv = HyperVae::new(arch);
    let root = RngState::new(config.seed);
    let mut gamma = match init {
        Some(g) => g,
        None => {
            let refs: Vec<&TaskDataset<T>> = tasks.iter().collect();
            let pooled = TaskDataset::concat(0, &refs)?;
            hv.init_gamma(&mut root.fork(1), Some(&pooled.pixel_mean()))
        }
    };
    let mut rng = root.fork(2);
    let mut adam = AdamState::new(gamma.len());
    let mut grad = vec![T::zero(); gamma.len()];
    let mut lp = Loop::new(config);
    for iter in 0..config.max_iters {
        let task = &tasks[rng.below(tasks.len())];
        let batch = task.sample_batch(config.batch_size, &mut rng);
        let noise = hv.draw_noise(batch.len(), config.k, &mut rng)?;
        grad.iter_mut().for_each(|g| *g = T::zero());
        let (obj, kl_u, recon) = if config.k == 1 {
            let t = hv.joint_objective_k1(&gamma, &batch, &noise, config.kl, Some(&mut grad))?;
            (t.objective.to64(), t.kl_u.to64(), t.recon.to64())
        } else {
            let t = hv.importance_weighted_objective(&gamma, &batch, &noise, Some((&mut grad, config.iw_gradient)))?;
            let w = &t.normalized_weights;
            let kl: f64 = (0..w.len()).map(|j| (w[j] * (t.log_posterior[j] - t.log_prior[j])).to64()).sum();
            let rc: f64 = (0..w.len()).map(|j| (w[j] * t.recon_sums[j]).to64()).sum();
            (t.objective.to64(), kl, rc)
        };
        if lp.record(iter, obj, kl_u, recon)? {
            break;
        }
        adam_step(gamma.values_mut(), &grad, &mut adam, config)?;
    }
    Ok(TrainOutcome { params: gamma, trace: lp.finish(adam.skipped) })
}
