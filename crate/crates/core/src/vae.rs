//! Task-level VAE whose weights are read out of an external flat vector θ.
//!
//! Encoder: `dense(D→h, relu)` followed by two parallel linear heads for the
//! mean and log-variance of `q(z|x)`. Decoder: `dense(d_z→h, relu)` then
//! `dense(h→D, sigmoid)` giving Bernoulli means. The same code path evaluates a
//! conventionally trained θ and a θ emitted by the hyper-decoder.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{dense_apply, dense_backward_into, Activation};
use crate::layout::ParamLayout;
use crate::rng::RngState;
use crate::scalar::{ln_two_pi, sigmoid, Scalar};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Bernoulli means are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian with clamped log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<T> {
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> GaussianDiag<T> {
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Self {
        assert_eq!(mean.len(), log_var.len(), "mean/log_var length");
        let (lo, hi) = (T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX));
        let log_var = log_var.into_iter().map(|v| v.max(lo).min(hi)).collect();
        Self { mean, log_var }
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], log_var: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kl_to_standard_normal(&self) -> T {
        kl_to_standard_normal(self)
    }

    pub fn log_density(&self, u: &[T]) -> T {
        let half = T::of(0.5);
        let mut acc = T::zero();
        for ((&x, &m), &lv) in u.iter().zip(&self.mean).zip(&self.log_var) {
            let d = x - m;
            acc += ln_two_pi::<T>() + lv + d * d * (-lv).exp();
        }
        -half * acc
    }

    pub fn reparameterize(&self, eps: &[T]) -> Vec<T> {
        reparameterize(self, eps)
    }

    pub fn sample(&self, rng: &mut RngState) -> Vec<T> {
        let eps = rng.normal_vec(self.dim());
        self.reparameterize(&eps)
    }
}

/// `mean + exp(log_var / 2) ⊙ eps`
pub fn reparameterize<T: Scalar>(g: &GaussianDiag<T>, eps: &[T]) -> Vec<T> {
    let half = T::of(0.5);
    g.mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

/// Closed-form `KL(N(mean, diag(exp(log_var))) ‖ N(0, I))`.
pub fn kl_to_standard_normal<T: Scalar>(g: &GaussianDiag<T>) -> T {
    let half = T::of(0.5);
    g.mean
        .iter()
        .zip(&g.log_var)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum()
}

/// `log N(u; 0, I)`
pub fn standard_normal_log_density<T: Scalar>(u: &[T]) -> T {
    let half = T::of(0.5);
    -half * u.iter().map(|&x| ln_two_pi::<T>() + x * x).sum::<T>()
}

#[inline]
fn clamp_prob<T: Scalar>(m: T) -> T {
    let floor = T::of(PROB_FLOOR);
    m.max(floor).min(T::one() - floor)
}

/// `Σ x log m + (1 - x) log(1 - m)` with means clamped away from 0 and 1.
pub fn bernoulli_log_likelihood<T: Scalar>(x: &[T], means: &[T]) -> T {
    x.iter()
        .zip(means)
        .map(|(&xi, &mi)| {
            let m = clamp_prob(mi);
            xi * m.ln() + (T::one() - xi) * (T::one() - m).ln()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown<T> {
    pub recon_loglik: T,
    pub kl: T,
    pub elbo: T,
}

impl<T: Scalar> ElboBreakdown<T> {
    pub fn new(recon_loglik: T, kl: T) -> Self {
        Self { recon_loglik, kl, elbo: recon_loglik - kl }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl VaeArch {
    pub fn new(input_dim: usize, hidden: usize, latent: usize) -> Self {
        Self { input_dim, hidden, latent }
    }

    /// Canonical θ ordering: encoder layers input→latent, then decoder layers
    /// latent→output; weights before biases.
    pub fn layout(&self) -> ParamLayout {
        let (d, h, z) = (self.input_dim, self.hidden, self.latent);
        let mut l = ParamLayout::new();
        l.push("enc_hidden", "weight", &[h, d]);
        l.push("enc_hidden", "bias", &[h]);
        l.push("enc_mean", "weight", &[z, h]);
        l.push("enc_mean", "bias", &[z]);
        l.push("enc_logvar", "weight", &[z, h]);
        l.push("enc_logvar", "bias", &[z]);
        l.push("dec_hidden", "weight", &[h, z]);
        l.push("dec_hidden", "bias", &[h]);
        l.push("dec_out", "weight", &[d, h]);
        l.push("dec_out", "bias", &[d]);
        l
    }
}

/// Flat VAE parameter vector tied to its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaVector<T> {
    values: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Scalar> ThetaVector<T> {
    pub fn new(values: Vec<T>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch { expected: layout.total_len(), actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

struct Slots {
    enc_w: Range<usize>,
    enc_b: Range<usize>,
    mean_w: Range<usize>,
    mean_b: Range<usize>,
    lv_w: Range<usize>,
    lv_b: Range<usize>,
    dec_w: Range<usize>,
    dec_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

/// Forward intermediates needed by the backward pass.
struct Trace<T> {
    hidden: Vec<T>,
    mean: Vec<T>,
    log_var_raw: Vec<T>,
    posterior: GaussianDiag<T>,
    z: Vec<T>,
    dec_hidden: Vec<T>,
    logits: Vec<T>,
    means: Vec<T>,
}

/// The task-level VAE evaluated against any θ with the matching layout.
pub struct TaskVae {
    arch: VaeArch,
    layout: Arc<ParamLayout>,
    slots: Slots,
}

impl TaskVae {
    pub fn new(arch: VaeArch) -> Self {
        assert!(arch.input_dim > 0 && arch.hidden > 0 && arch.latent > 0, "dims must be >= 1");
        let layout = arch.layout();
        let r = |i: usize| layout.get(i).range();
        let slots = Slots {
            enc_w: r(0),
            enc_b: r(1),
            mean_w: r(2),
            mean_b: r(3),
            lv_w: r(4),
            lv_b: r(5),
            dec_w: r(6),
            dec_b: r(7),
            out_w: r(8),
            out_b: r(9),
        };
        Self { arch, layout: Arc::new(layout), slots }
    }

    pub fn arch(&self) -> VaeArch {
        self.arch
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn theta_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn zero_theta<T: Scalar>(&self) -> ThetaVector<T> {
        ThetaVector { values: vec![T::zero(); self.theta_len()], layout: self.layout.clone() }
    }

    pub fn wrap<T: Scalar>(&self, values: Vec<T>) -> Result<ThetaVector<T>> {
        ThetaVector::new(values, self.layout.clone())
    }

    /// He-normal hidden layers, small log-variance head, zero biases. The
    /// output bias starts at `logit(pixel_mean)` when a data mean is supplied.
    pub fn init_theta<T: Scalar>(
        &self,
        rng: &mut RngState,
        pixel_mean: Option<&[T]>,
    ) -> ThetaVector<T> {
        let mut values = vec![T::zero(); self.theta_len()];
        init_values(&self.arch, &self.layout, rng, pixel_mean, &mut values);
        ThetaVector { values, layout: self.layout.clone() }
    }

    fn check<T: Scalar>(&self, theta: &ThetaVector<T>) -> Result<()> {
        if *theta.layout != *self.layout {
            return Err(Error::LayoutMismatch {
                expected: self.layout.total_len(),
                actual: theta.layout.total_len(),
            });
        }
        Ok(())
    }

    fn check_len<T>(&self, v: &[T], len: usize, what: &str) -> Result<()> {
        if v.len() != len {
            return Err(Error::Shape(format!("{what}: expected {len} values, got {}", v.len())));
        }
        Ok(())
    }

    /// `q(z|x; θ)`
    pub fn encode<T: Scalar>(&self, theta: &ThetaVector<T>, x: &[T]) -> Result<GaussianDiag<T>> {
        self.check(theta)?;
        self.check_len(x, self.arch.input_dim, "vae input")?;
        Ok(self.encode_raw(&theta.values, x))
    }

    /// Bernoulli means of `p(x|z; θ)`, unclamped sigmoid outputs.
    pub fn decode<T: Scalar>(&self, theta: &ThetaVector<T>, z: &[T]) -> Result<Vec<T>> {
        self.check(theta)?;
        self.check_len(z, self.arch.latent, "vae latent")?;
        Ok(self.decode_raw(&theta.values, z))
    }

    /// Single-sample ELBO, drawing the reparameterization noise from `rng`.
    pub fn elbo<T: Scalar>(
        &self,
        theta: &ThetaVector<T>,
        x: &[T],
        rng: &mut RngState,
    ) -> Result<ElboBreakdown<T>> {
        self.check(theta)?;
        self.check_len(x, self.arch.input_dim, "vae input")?;
        let eps = rng.normal_vec(self.arch.latent);
        Ok(self.elbo_with_noise(&theta.values, x, &eps))
    }

    pub(crate) fn encode_raw<T: Scalar>(&self, theta: &[T], x: &[T]) -> GaussianDiag<T> {
        let s = &self.slots;
        let mut hidden = vec![T::zero(); self.arch.hidden];
        dense_apply(&theta[s.enc_w.clone()], &theta[s.enc_b.clone()], x, Activation::Relu, &mut hidden);
        let mut mean = vec![T::zero(); self.arch.latent];
        let mut log_var = vec![T::zero(); self.arch.latent];
        dense_apply(&theta[s.mean_w.clone()], &theta[s.mean_b.clone()], &hidden, Activation::Identity, &mut mean);
        dense_apply(&theta[s.lv_w.clone()], &theta[s.lv_b.clone()], &hidden, Activation::Identity, &mut log_var);
        GaussianDiag::new(mean, log_var)
    }

    pub(crate) fn decode_raw<T: Scalar>(&self, theta: &[T], z: &[T]) -> Vec<T> {
        let s = &self.slots;
        let mut hidden = vec![T::zero(); self.arch.hidden];
        dense_apply(&theta[s.dec_w.clone()], &theta[s.dec_b.clone()], z, Activation::Relu, &mut hidden);
        let mut means = vec![T::zero(); self.arch.input_dim];
        dense_apply(&theta[s.out_w.clone()], &theta[s.out_b.clone()], &hidden, Activation::Sigmoid, &mut means);
        means
    }

    /// `log p(x|z; θ)` for a given latent.
    pub fn reconstruction_loglik<T: Scalar>(&self, theta: &[T], x: &[T], z: &[T]) -> T {
        bernoulli_log_likelihood(x, &self.decode_raw(theta, z))
    }

    fn forward<T: Scalar>(&self, theta: &[T], x: &[T], eps: &[T]) -> Trace<T> {
        let s = &self.slots;
        let (h, dz, d) = (self.arch.hidden, self.arch.latent, self.arch.input_dim);
        let mut hidden = vec![T::zero(); h];
        dense_apply(&theta[s.enc_w.clone()], &theta[s.enc_b.clone()], x, Activation::Relu, &mut hidden);
        let mut mean = vec![T::zero(); dz];
        let mut log_var_raw = vec![T::zero(); dz];
        dense_apply(&theta[s.mean_w.clone()], &theta[s.mean_b.clone()], &hidden, Activation::Identity, &mut mean);
        dense_apply(&theta[s.lv_w.clone()], &theta[s.lv_b.clone()], &hidden, Activation::Identity, &mut log_var_raw);
        let posterior = GaussianDiag::new(mean.clone(), log_var_raw.clone());
        let z = posterior.reparameterize(eps);
        let mut dec_hidden = vec![T::zero(); h];
        dense_apply(&theta[s.dec_w.clone()], &theta[s.dec_b.clone()], &z, Activation::Relu, &mut dec_hidden);
        let mut logits = vec![T::zero(); d];
        dense_apply(&theta[s.out_w.clone()], &theta[s.out_b.clone()], &dec_hidden, Activation::Identity, &mut logits);
        let means = logits.iter().map(|&l| sigmoid(l)).collect();
        Trace { hidden, mean, log_var_raw, posterior, z, dec_hidden, logits, means }
    }

    /// ELBO with frozen reparameterization noise `eps` (length `d_z`).
    pub fn elbo_with_noise<T: Scalar>(&self, theta: &[T], x: &[T], eps: &[T]) -> ElboBreakdown<T> {
        let t = self.forward(theta, x, eps);
        ElboBreakdown::new(bernoulli_log_likelihood(x, &t.means), kl_to_standard_normal(&t.posterior))
    }

    /// ELBO with frozen noise; adds `weight · ∂elbo/∂θ` into `grad`.
    pub fn elbo_grad_into<T: Scalar>(
        &self,
        theta: &[T],
        x: &[T],
        eps: &[T],
        weight: T,
        grad: &mut [T],
    ) -> ElboBreakdown<T> {
        let s = &self.slots;
        let (h, dz, d) = (self.arch.hidden, self.arch.latent, self.arch.input_dim);
        let t = self.forward(theta, x, eps);
        let out = ElboBreakdown::new(
            bernoulli_log_likelihood(x, &t.means),
            kl_to_standard_normal(&t.posterior),
        );

        // reconstruction: d/dlogit = x - m inside the clamp, 0 where clamped
        let floor = T::of(PROB_FLOOR);
        let dlogits: Vec<T> = x
            .iter()
            .zip(&t.means)
            .map(|(&xi, &m)| if m < floor || m > T::one() - floor { T::zero() } else { weight * (xi - m) })
            .collect();
        debug_assert_eq!(dlogits.len(), d);

        let mut d_dec_hidden = vec![T::zero(); h];
        {
            let (dw, db) = split_two(grad, s.out_w.clone(), s.out_b.clone());
            dense_backward_into(&theta[s.out_w.clone()], &t.dec_hidden, &t.logits, &dlogits, Activation::Identity, dw, db, Some(&mut d_dec_hidden));
        }
        let mut dz_vec = vec![T::zero(); dz];
        {
            let (dw, db) = split_two(grad, s.dec_w.clone(), s.dec_b.clone());
            dense_backward_into(&theta[s.dec_w.clone()], &t.z, &t.dec_hidden, &d_dec_hidden, Activation::Relu, dw, db, Some(&mut dz_vec));
        }

        // z = mean + exp(lv/2) eps, minus KL
        let half = T::of(0.5);
        let (lo, hi) = (T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX));
        let mut dmean = vec![T::zero(); dz];
        let mut dlv = vec![T::zero(); dz];
        for i in 0..dz {
            let lv = t.posterior.log_var[i];
            dmean[i] = dz_vec[i] - weight * t.mean[i];
            let raw = t.log_var_raw[i];
            dlv[i] = if raw < lo || raw > hi {
                T::zero()
            } else {
                dz_vec[i] * eps[i] * half * (half * lv).exp() - weight * half * (lv.exp() - T::one())
            };
        }
        let mut dhidden = vec![T::zero(); h];
        {
            let (dw, db) = split_two(grad, s.mean_w.clone(), s.mean_b.clone());
            dense_backward_into(&theta[s.mean_w.clone()], &t.hidden, &t.mean, &dmean, Activation::Identity, dw, db, Some(&mut dhidden));
        }
        {
            let (dw, db) = split_two(grad, s.lv_w.clone(), s.lv_b.clone());
            dense_backward_into(&theta[s.lv_w.clone()], &t.hidden, &t.log_var_raw, &dlv, Activation::Identity, dw, db, Some(&mut dhidden));
        }
        {
            let (dw, db) = split_two(grad, s.enc_w.clone(), s.enc_b.clone());
            dense_backward_into(&theta[s.enc_w.clone()], x, &t.hidden, &dhidden, Activation::Relu, dw, db, None);
        }
        out
    }
}

/// Mutable views of two disjoint ranges where `a` ends where `b` begins.
fn split_two<T>(buf: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(a.end, b.start);
    let (left, right) = buf[a.start..b.end].split_at_mut(a.end - a.start);
    (left, right)
}

pub(crate) fn init_values<T: Scalar>(
    arch: &VaeArch,
    layout: &ParamLayout,
    rng: &mut RngState,
    pixel_mean: Option<&[T]>,
    values: &mut [T],
) {
    for e in layout.entries() {
        let r = e.range();
        if e.param == "bias" {
            if e.layer == "dec_out" {
                if let Some(pm) = pixel_mean {
                    for (v, &p) in values[r].iter_mut().zip(pm) {
                        let p = clamp_prob(p).to64().clamp(1e-3, 1.0 - 1e-3);
                        *v = T::of((p / (1.0 - p)).ln());
                    }
                }
            }
            continue;
        }
        let fan_in = e.cols() as f64;
        let std = match e.layer.as_str() {
            "enc_hidden" | "dec_hidden" => (2.0 / fan_in).sqrt(),
            "enc_logvar" => 0.1 / fan_in.sqrt(),
            _ => (1.0 / fan_in).sqrt(),
        };
        for v in &mut values[r] {
            *v = T::of(std * rng.normal());
        }
    }
    debug_assert_eq!(arch.layout().total_len(), values.len());
}
