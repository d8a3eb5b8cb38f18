//! Gaussian-process Bayesian optimization over a VAE latent space and the
//! iterative hyper-VAE design search built on it.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hypernet::{HyperParams, HyperVae};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::vae::{TaskVae, ThetaVector};

pub const DEFAULT_NOISE_VAR: f64 = 1e-6;

/// Squared-exponential kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpHyper {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_var * (-0.5 * d2 / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// GP regression with a constant mean equal to the mean observation.
#[derive(Clone, Debug)]
pub struct GpSurrogate {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    hyper: GpHyper,
    prior_mean: f64,
    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`, row-major.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
}

impl GpSurrogate {
    pub fn fit(xs: Vec<Vec<f64>>, ys: Vec<f64>, hyper: GpHyper) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::InvalidArgument("GP needs matching, nonempty inputs and targets".into()));
        }
        let dim = xs[0].len();
        if dim == 0 || xs.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape("GP inputs differ in dimension".into()));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("GP targets".into()));
        }
        let n = xs.len();
        let prior_mean = ys.iter().sum::<f64>() / n as f64;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = hyper.kernel(&xs[i], &xs[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let mut jitter = 0.0;
        let mut extra = 1e-10 * hyper.signal_var.max(1e-12);
        let chol = loop {
            let mut a = k.clone();
            for i in 0..n {
                a[i * n + i] += hyper.noise_var + jitter;
            }
            if let Some(l) = cholesky(&a, n) {
                break l;
            }
            if jitter > 1e-2 * hyper.signal_var.max(1e-12) {
                return Err(Error::Cholesky);
            }
            jitter = extra;
            extra *= 10.0;
        };
        let centred: Vec<f64> = ys.iter().map(|y| y - prior_mean).collect();
        let alpha = chol_solve(&chol, n, &centred);
        Ok(Self { xs, ys, hyper, prior_mean, chol, alpha, jitter })
    }

    /// Fits `ℓ` and `s²` by grid search over the log marginal likelihood.
    pub fn fit_grid(xs: Vec<Vec<f64>>, ys: Vec<f64>, noise_var: f64) -> Result<Self> {
        let n = ys.len().max(1) as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).max(1e-6);
        let mut best: Option<(f64, Self)> = None;
        for &lengthscale in &LENGTHSCALE_GRID {
            for &mult in &SIGNAL_GRID {
                let hyper = GpHyper { lengthscale, signal_var: var * mult, noise_var };
                let Ok(gp) = Self::fit(xs.clone(), ys.clone(), hyper) else { continue };
                let lml = gp.log_marginal_likelihood();
                if lml.is_finite() && best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, gp));
                }
            }
        }
        best.map(|(_, gp)| gp).ok_or(Error::Cholesky)
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    /// Extra diagonal added beyond `σ_n²` to make the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.xs.len();
        let fit: f64 = self.ys.iter().zip(&self.alpha).map(|(y, a)| (y - self.prior_mean) * a).sum();
        let logdet: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    /// Posterior `(mean, variance)` at `z`; variance is floored at zero.
    pub fn predict(&self, z: &[f64]) -> Result<(f64, f64)> {
        if z.len() != self.xs[0].len() {
            return Err(Error::Shape(format!("query has {} dims, GP has {}", z.len(), self.xs[0].len())));
        }
        let n = self.xs.len();
        let ks: Vec<f64> = self.xs.iter().map(|x| self.hyper.kernel(x, z)).collect();
        let mean = self.prior_mean + ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let v = forward_sub(&self.chol, n, &ks);
        let var = self.hyper.signal_var - v.iter().map(|x| x * x).sum::<f64>();
        Ok((mean, var.max(0.0)))
    }
}

const LENGTHSCALE_GRID: [f64; 10] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
const SIGNAL_GRID: [f64; 4] = [0.25, 1.0, 4.0, 16.0];

pub fn gp_posterior(gp: &GpSurrogate, z: &[f64]) -> Result<(f64, f64)> {
    gp.predict(z)
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let y = forward_sub(l, n, b);
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form expected improvement over `best` for maximization.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sd = variance.max(0.0).sqrt();
    let gain = mean - best;
    if sd == 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    (gain * normal_cdf(z) + sd * normal_pdf(z)).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoConfig {
    /// Total objective evaluations, initial design included.
    pub max_iters: usize,
    pub init_points: usize,
    pub candidates: usize,
    pub refine_starts: usize,
    pub lower: f64,
    pub upper: f64,
    /// Grid-search the kernel hyperparameters every this many iterations.
    pub refit_every: usize,
    pub noise_var: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            init_points: 10,
            candidates: 256,
            refine_starts: 8,
            lower: -5.0,
            upper: 5.0,
            refit_every: 25,
            noise_var: DEFAULT_NOISE_VAR,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.init_points == 0 || self.candidates == 0 || self.refit_every == 0 {
            return Err(Error::InvalidArgument("BO counts must be >= 1".into()));
        }
        if !(self.lower < self.upper) {
            return Err(Error::InvalidArgument(format!("bounds [{}, {}] are empty", self.lower, self.upper)));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::InvalidArgument("noise variance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoTrace {
    pub points: Vec<Vec<f64>>,
    /// Objective at each query; `NaN` where the objective was not finite.
    pub values: Vec<f64>,
    /// Best finite value seen so far (−∞ before the first).
    pub best_so_far: Vec<f64>,
    /// Expected improvement of each acquisition-chosen query (`NaN` for the initial design).
    pub acquisition: Vec<f64>,
    pub discarded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoResult {
    pub best_z: Vec<f64>,
    pub best_value: f64,
    pub trace: BoTrace,
}

/// Latin hypercube sample of `n` points in `[lower, upper]^dims`.
pub fn latin_hypercube(n: usize, dims: usize, lower: f64, upper: f64, rng: &mut RngState) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dims]; n];
    let width = (upper - lower) / n as f64;
    for d in 0..dims {
        let mut strata: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut strata);
        for (p, &s) in pts.iter_mut().zip(&strata) {
            p[d] = lower + width * (s as f64 + rng.uniform());
        }
    }
    pts
}

/// Maximizes `objective` over the box with a GP surrogate and expected improvement.
pub fn bo_maximize<F>(mut objective: F, dims: usize, config: &BoConfig, rng: &mut RngState) -> Result<BoResult>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    if dims == 0 {
        return Err(Error::InvalidArgument("dims must be >= 1".into()));
    }
    let (lo, hi) = (config.lower, config.upper);
    let init = latin_hypercube(config.init_points.min(config.max_iters), dims, lo, hi, rng);
    let mut trace = BoTrace::default();
    let mut obs_x: Vec<Vec<f64>> = Vec::new();
    let mut obs_y: Vec<f64> = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut hyper: Option<GpHyper> = None;
    let mut since_refit = 0usize;

    for iter in 0..config.max_iters {
        let (z, acq) = if iter < init.len() || obs_y.is_empty() {
            let z = init.get(iter).cloned().unwrap_or_else(|| (0..dims).map(|_| rng.uniform_range(lo, hi)).collect());
            (z, f64::NAN)
        } else {
            let refit = hyper.is_none() || since_refit >= config.refit_every;
            let gp = match (refit, hyper) {
                (false, Some(h)) => GpSurrogate::fit(obs_x.clone(), obs_y.clone(), h)?,
                _ => {
                    since_refit = 0;
                    GpSurrogate::fit_grid(obs_x.clone(), obs_y.clone(), config.noise_var)?
                }
            };
            hyper = Some(gp.hyper());
            since_refit += 1;
            let incumbent = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
            maximize_ei(&gp, incumbent, dims, config, rng)?
        };
        debug_assert!(z.iter().all(|&v| v >= lo && v <= hi));
        let y = objective(&z);
        trace.points.push(z.clone());
        trace.acquisition.push(acq);
        if y.is_finite() {
            if best.as_ref().is_none_or(|b| y > b.1) {
                best = Some((z.clone(), y));
            }
            obs_x.push(z);
            obs_y.push(y);
            trace.values.push(y);
        } else {
            trace.discarded += 1;
            trace.values.push(f64::NAN);
        }
        trace.best_so_far.push(best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1));
    }
    let (best_z, best_value) = best.ok_or_else(|| Error::NonFinite("every BO objective value".into()))?;
    Ok(BoResult { best_z, best_value, trace })
}

fn maximize_ei(gp: &GpSurrogate, best: f64, dims: usize, config: &BoConfig, rng: &mut RngState) -> Result<(Vec<f64>, f64)> {
    let (lo, hi) = (config.lower, config.upper);
    let ei = |z: &[f64]| -> Result<f64> {
        let (m, v) = gp.predict(z)?;
        Ok(expected_improvement(m, v, best))
    };
    let mut scored = Vec::with_capacity(config.candidates);
    for _ in 0..config.candidates {
        let z: Vec<f64> = (0..dims).map(|_| rng.uniform_range(lo, hi)).collect();
        let a = ei(&z)?;
        scored.push((a, z));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut winner = scored[0].clone();
    for (start_val, start) in scored.into_iter().take(config.refine_starts) {
        let (val, z) = refine(start, start_val, &ei, lo, hi)?;
        if val > winner.0 {
            winner = (val, z);
        }
    }
    Ok((winner.1, winner.0))
}

/// Coordinate ascent with step halving, projected onto the box.
fn refine<E>(mut x: Vec<f64>, mut val: f64, ei: &E, lo: f64, hi: f64) -> Result<(f64, Vec<f64>)>
where
    E: Fn(&[f64]) -> Result<f64>,
{
    let width = hi - lo;
    let mut step = 0.1 * width;
    let mut budget = 40 * x.len();
    while step >= 1e-3 * width && budget > 0 {
        let mut improved = false;
        for d in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut c = x.clone();
                c[d] = (c[d] + sign * step).clamp(lo, hi);
                if c[d] == x[d] {
                    continue;
                }
                let v = ei(&c)?;
                budget = budget.saturating_sub(1);
                if v > val {
                    val = v;
                    x = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((val, x))
}

/// `1 − a·b / (‖a‖ ‖b‖)`, clamped to `[0, 2]`; `1` when either vector is zero.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to64(), y.to64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

/// Outcome of one BO design search in a single VAE's latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryStep {
    pub step: usize,
    /// `u_t`; empty for the plain-VAE baseline.
    pub u: Vec<f64>,
    pub z_star: Vec<f64>,
    /// Decoder means at `z*`.
    pub x_star: Vec<f64>,
    /// Cosine distance of `x*` to the target.
    pub distance: f64,
    /// Distance of every BO query (`NaN` if discarded).
    pub bo_distances: Vec<f64>,
    pub bo_best: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscoveryTrace {
    pub steps: Vec<DiscoveryStep>,
}

impl DiscoveryTrace {
    pub const CSV_HEADER: &'static str = "step,bo_iter,distance,best_distance,u_norm";

    /// Best design distance over all steps so far.
    pub fn final_distance(&self) -> f64 {
        self.steps.iter().map(|s| s.distance).fold(f64::INFINITY, f64::min)
    }

    /// Per-step best distances.
    pub fn step_distances(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.distance).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for st in &self.steps {
            let u_norm = st.u.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (i, (d, b)) in st.bo_distances.iter().zip(&st.bo_best).enumerate() {
                let _ = writeln!(s, "{},{},{:.16e},{:.16e},{:.16e}", st.step, i, d, b, u_norm);
            }
        }
        s
    }
}

/// Searches `z` so the decoder means of `θ` are as close as possible (in
/// cosine distance) to `target`.
pub fn design_search<T: Scalar>(
    vae: &TaskVae,
    theta: &ThetaVector<T>,
    target: &[T],
    bo: &BoConfig,
    rng: &mut RngState,
) -> Result<DiscoveryStep> {
    if target.len() != vae.arch().input_dim {
        return Err(Error::Shape(format!("target has {} values, VAE emits {}", target.len(), vae.arch().input_dim)));
    }
    let mut distances = Vec::new();
    let result = bo_maximize(
        |z| {
            let zt: Vec<T> = z.iter().map(|&v| T::of(v)).collect();
            let d = match vae.decode(theta, &zt) {
                Ok(x) if x.iter().all(|v| v.is_finite()) => cosine_distance(&x, target),
                _ => f64::NAN,
            };
            distances.push(d);
            -d
        },
        vae.arch().latent,
        bo,
        rng,
    )?;
    let zt: Vec<T> = result.best_z.iter().map(|&v| T::of(v)).collect();
    let x_star: Vec<f64> = vae.decode(theta, &zt)?.iter().map(|v| v.to64()).collect();
    Ok(DiscoveryStep {
        step: 0,
        u: Vec::new(),
        distance: -result.best_value,
        z_star: result.best_z,
        x_star,
        bo_distances: distances,
        bo_best: result.trace.best_so_far.iter().map(|b| -b).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub steps: usize,
    pub bo: BoConfig,
    /// Draw `u_t ~ q(u | d_{t−1})` instead of using its mean.
    pub sampled_u: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { steps: 5, bo: BoConfig::default(), sampled_u: false }
    }
}

/// Iterative search: `u_t` from the encoding of the previous design
/// `d_{t−1}` (initially `init`, or the empty image), `θ_t = θ(u_t)`, then BO
/// over `z` for the design closest to `target`, which becomes `d_t`.
///
/// Step `t` draws from `rng.fork(t)`, so a shorter search is a prefix of a
/// longer one with the same seed.
pub fn hyper_search<T: Scalar>(
    hv: &HyperVae,
    gamma: &HyperParams<T>,
    target: &[T],
    init: Option<&[T]>,
    config: &SearchConfig,
    rng: &RngState,
) -> Result<DiscoveryTrace> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let d = hv.arch().target.input_dim;
    let mut design: Vec<T> = match init {
        Some(x) if x.len() == d => x.to_vec(),
        Some(x) => return Err(Error::Shape(format!("initial design has {} values, expected {d}", x.len()))),
        None => vec![T::zero(); d],
    };
    let mut trace = DiscoveryTrace::default();
    for t in 0..config.steps {
        let mut step_rng = rng.fork(t as u64);
        let q = hv.hyper_encode(gamma, &design)?;
        let u = if config.sampled_u { q.sample(&mut step_rng) } else { q.mean.clone() };
        let theta = hv.hyper_decode(gamma, &u)?;
        let mut st = design_search(hv.target(), &theta, target, &config.bo, &mut step_rng)?;
        st.step = t;
        st.u = u.iter().map(|v| v.to64()).collect();
        design = st.x_star.iter().map(|&v| T::of(v)).collect();
        trace.steps.push(st);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ei_closed_form_cases() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 1.0);
        assert!((expected_improvement(0.5, 1.0, 0.5) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!(expected_improvement(-50.0, 1e-4, 0.0) >= 0.0);
    }

    #[test]
    fn cosine_cases() {
        assert!(cosine_distance(&[1.0f64, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0f64, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0f64, -2.0], &[-1.0, 2.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0f64, 0.0], &[1.0, 2.0]), 1.0);
    }

    #[test]
    fn lhs_hits_every_stratum() {
        let pts = latin_hypercube(10, 3, -5.0, 5.0, &mut RngState::new(2));
        for d in 0..3 {
            let mut strata: Vec<usize> = pts.iter().map(|p| ((p[d] + 5.0) as usize).min(9)).collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn gp_reverts_to_prior_far_away() {
        let h = GpHyper { lengthscale: 0.5, signal_var: 2.0, noise_var: 1e-6 };
        let gp = GpSurrogate::fit(vec![vec![0.0], vec![0.3]], vec![1.0, 3.0], h).unwrap();
        let (m, v) = gp.predict(&[10.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-9);
        assert!((v - 2.0).abs() < 0.02);
        let (m0, v0) = gp.predict(&[0.0]).unwrap();
        assert!((m0 - 1.0).abs() < 1e-2);
        assert!(v0 <= 1e-5);
    }

    #[test]
    fn constant_objective_keeps_flat_trace() {
        let cfg = BoConfig { max_iters: 20, ..Default::default() };
        let r = bo_maximize(|_| 3.0, 2, &cfg, &mut RngState::new(1)).unwrap();
        assert!(r.trace.best_so_far.iter().all(|&b| b == 3.0));
        assert!(r.trace.points.iter().flatten().all(|v| (-5.0..=5.0).contains(v)));
    }

    #[test]
    fn non_finite_values_are_discarded() {
        let cfg = BoConfig { max_iters: 15, ..Default::default() };
        let r = bo_maximize(|z| if z[0] > 0.0 { f64::NAN } else { z[0] }, 1, &cfg, &mut RngState::new(4)).unwrap();
        assert!(r.trace.discarded > 0);
        assert!(r.best_value <= 0.0);
    }
}
