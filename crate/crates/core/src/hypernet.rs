//! The hyper-level VAE.
//!
//! A hyper-encoder maps a data vector `x_k` to a Gaussian over the model latent
//! `u`; `K` of those form a uniform mixture `q(u|D)`. The hyper-decoder maps
//! `u` through `dense(d_u→h_u, relu)`, reshapes the hidden vector to an `r×r`
//! matrix `H` (`r² = h_u`) and emits every θ slice with its own identity
//! matrix layer `U H V + B`. Bias vectors are generated as `m×1` matrices.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{
    dense_apply, dense_backward_into, matrix_apply, matrix_backward_into, Activation, MatrixDims,
};
use crate::layout::ParamLayout;
use crate::rng::RngState;
use crate::scalar::{log_mean_exp, log_sum_exp, softmax, Scalar};
use crate::vae::{
    kl_to_standard_normal, standard_normal_log_density, GaussianDiag, TaskVae, ThetaVector,
    VaeArch, LOG_VAR_MAX, LOG_VAR_MIN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HyperArch {
    pub target: VaeArch,
    /// Hidden width of the hyper-encoder.
    pub enc_hidden: usize,
    /// Dimension of the model latent `u`.
    pub latent: usize,
    /// Hidden width of the hyper-decoder; must be a perfect square.
    pub dec_hidden: usize,
}

impl HyperArch {
    /// Side `r` of the square matrix the decoder hidden vector is reshaped to.
    pub fn side(&self) -> usize {
        let r = (self.dec_hidden as f64).sqrt().round() as usize;
        assert_eq!(r * r, self.dec_hidden, "decoder hidden width must be a perfect square");
        r
    }

    pub fn layout(&self) -> ParamLayout {
        let d = self.target.input_dim;
        let (he, du, hu, r) = (self.enc_hidden, self.latent, self.dec_hidden, self.side());
        let mut l = ParamLayout::new();
        l.push("hyper_enc_hidden", "weight", &[he, d]);
        l.push("hyper_enc_hidden", "bias", &[he]);
        l.push("hyper_enc_mean", "weight", &[du, he]);
        l.push("hyper_enc_mean", "bias", &[du]);
        l.push("hyper_enc_logvar", "weight", &[du, he]);
        l.push("hyper_enc_logvar", "bias", &[du]);
        l.push("hyper_dec_hidden", "weight", &[hu, du]);
        l.push("hyper_dec_hidden", "bias", &[hu]);
        for e in self.target.layout().entries() {
            let (m, n) = (e.rows(), e.cols());
            let layer = format!("gen.{}", e.name());
            l.push(&layer, "U", &[m, r]);
            l.push(&layer, "V", &[r, n]);
            l.push(&layer, "B", &[m, n]);
        }
        l
    }
}

/// Hyper-parameters γ as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams<T> {
    values: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Scalar> HyperParams<T> {
    pub fn new(values: Vec<T>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch { expected: layout.total_len(), actual: values.len() });
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
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

/// Uniform-weight mixture of diagonal Gaussians over `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePosterior<T> {
    components: Vec<GaussianDiag<T>>,
}

/// `log q(u)` together with its partial derivatives.
#[derive(Clone, Debug)]
pub struct MixtureLogDensityGrad<T> {
    pub value: T,
    pub d_u: Vec<T>,
    pub d_mean: Vec<Vec<T>>,
    pub d_log_var: Vec<Vec<T>>,
}

impl<T: Scalar> MixturePosterior<T> {
    pub fn new(components: Vec<GaussianDiag<T>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs K >= 1".into()))?;
        if components.iter().any(|c| c.dim() != first.dim()) {
            return Err(Error::Shape("mixture components differ in dimension".into()));
        }
        Ok(Self { components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[GaussianDiag<T>] {
        &self.components
    }

    pub fn weights(&self) -> Vec<T> {
        vec![T::one() / T::of(self.k() as f64); self.k()]
    }

    /// `log Σ_k (1/K) N(u; μ_k, diag σ²_k)` via log-sum-exp.
    pub fn log_density(&self, u: &[T]) -> T {
        let terms: Vec<T> = self.components.iter().map(|c| c.log_density(u)).collect();
        log_mean_exp(&terms)
    }

    pub fn log_density_grad(&self, u: &[T]) -> MixtureLogDensityGrad<T> {
        let half = T::of(0.5);
        let terms: Vec<T> = self.components.iter().map(|c| c.log_density(u)).collect();
        let value = log_mean_exp(&terms);
        let resp = softmax(&terms);
        let d = self.dim();
        let mut d_u = vec![T::zero(); d];
        let mut d_mean = Vec::with_capacity(self.k());
        let mut d_log_var = Vec::with_capacity(self.k());
        for (c, &r) in self.components.iter().zip(&resp) {
            let mut dm = vec![T::zero(); d];
            let mut dl = vec![T::zero(); d];
            for i in 0..d {
                let prec = (-c.log_var[i]).exp();
                let diff = u[i] - c.mean[i];
                d_u[i] -= r * diff * prec;
                dm[i] = r * diff * prec;
                dl[i] = r * half * (diff * diff * prec - T::one());
            }
            d_mean.push(dm);
            d_log_var.push(dl);
        }
        MixtureLogDensityGrad { value, d_u, d_mean, d_log_var }
    }

    /// Draws a component uniformly, then samples within it.
    pub fn sample(&self, rng: &mut RngState) -> Vec<T> {
        let k = rng.below(self.k());
        self.components[k].sample(rng)
    }
}

/// Free-function form of [`MixturePosterior::log_density`].
pub fn mixture_log_density<T: Scalar>(q: &MixturePosterior<T>, u: &[T]) -> T {
    q.log_density(u)
}

/// Frozen randomness for one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveNoise<T> {
    /// Minibatch positions of the `K` members `x_k` that form `q(u|D)`.
    pub members: Vec<usize>,
    /// One standard-normal draw per component for `u_k`.
    pub u_eps: Vec<Vec<T>>,
    /// `z` noise per component and per minibatch item.
    pub z_eps: Vec<Vec<Vec<T>>>,
    /// Component used where a single `u` is needed (ancestral sampling).
    pub chosen: usize,
}

impl<T: Scalar> ObjectiveNoise<T> {
    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// How `KL(q(u|D) ‖ p(u))` enters the K = 1 objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlEstimate {
    #[default]
    ClosedForm,
    /// Single-sample `log q(u) - log p(u)` at the sampled `u`.
    DensityRatio,
}

/// Gradient route for the importance-weighted objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IwGradient {
    /// One reverse pass through the log-mean-exp.
    #[default]
    Reparameterized,
    /// Per-sample gradients of each log-weight, combined with the
    /// self-normalized weights afterwards.
    NormalizedWeights,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTerms<T> {
    /// Objective to maximize.
    pub objective: T,
    /// `Σ_x elbo(θ(u), x)`
    pub elbo_sum: T,
    /// Reconstruction part of `elbo_sum`.
    pub recon: T,
    pub kl_u: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IwTerms<T> {
    pub objective: T,
    pub log_weights: Vec<T>,
    pub normalized_weights: Vec<T>,
    pub elbo_sums: Vec<T>,
    pub recon_sums: Vec<T>,
    pub log_prior: Vec<T>,
    pub log_posterior: Vec<T>,
}

struct EncoderSlots {
    hid_w: Range<usize>,
    hid_b: Range<usize>,
    mean_w: Range<usize>,
    mean_b: Range<usize>,
    lv_w: Range<usize>,
    lv_b: Range<usize>,
}

struct GenSlot {
    dims: MatrixDims,
    theta: Range<usize>,
    u: Range<usize>,
    v: Range<usize>,
    b: Range<usize>,
}

struct EncoderTrace<T> {
    hidden: Vec<T>,
    mean: Vec<T>,
    log_var_raw: Vec<T>,
    posterior: GaussianDiag<T>,
}

struct DecoderTrace<T> {
    hidden: Vec<T>,
    hv: Vec<Vec<T>>,
}

/// Hyper-VAE bound to an architecture; γ is passed in explicitly.
pub struct HyperVae {
    arch: HyperArch,
    target: TaskVae,
    layout: Arc<ParamLayout>,
    enc: EncoderSlots,
    dec_w: Range<usize>,
    dec_b: Range<usize>,
    gens: Vec<GenSlot>,
}

impl HyperVae {
    pub fn new(arch: HyperArch) -> Self {
        let r = arch.side();
        let target = TaskVae::new(arch.target);
        let layout = arch.layout();
        let g = |i: usize| layout.get(i).range();
        let enc = EncoderSlots { hid_w: g(0), hid_b: g(1), mean_w: g(2), mean_b: g(3), lv_w: g(4), lv_b: g(5) };
        let gens = target
            .layout()
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| GenSlot {
                dims: MatrixDims { p: r, q: r, m: e.rows(), n: e.cols() },
                theta: e.range(),
                u: g(8 + 3 * i),
                v: g(9 + 3 * i),
                b: g(10 + 3 * i),
            })
            .collect();
        Self { arch, target, dec_w: g(6), dec_b: g(7), enc, gens, layout: Arc::new(layout) }
    }

    pub fn arch(&self) -> HyperArch {
        self.arch
    }

    pub fn target(&self) -> &TaskVae {
        &self.target
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn gamma_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn wrap<T: Scalar>(&self, values: Vec<T>) -> Result<HyperParams<T>> {
        HyperParams::new(values, self.layout.clone())
    }

    pub fn zero_gamma<T: Scalar>(&self) -> HyperParams<T> {
        HyperParams { values: vec![T::zero(); self.gamma_len()], layout: self.layout.clone() }
    }

    /// Random γ whose generated θ starts near a conventionally initialised VAE:
    /// each `B` gets the VAE initialisation and `U H V` a perturbation about half
    /// its scale.
    pub fn init_gamma<T: Scalar>(
        &self,
        rng: &mut RngState,
        pixel_mean: Option<&[T]>,
    ) -> HyperParams<T> {
        let mut values = vec![T::zero(); self.gamma_len()];
        let fill = |values: &mut [T], range: Range<usize>, std: f64, rng: &mut RngState| {
            for v in &mut values[range] {
                *v = T::of(std * rng.normal());
            }
        };
        let (d, he, du) = (self.arch.target.input_dim as f64, self.arch.enc_hidden as f64, self.arch.latent as f64);
        fill(&mut values, self.enc.hid_w.clone(), (2.0 / d).sqrt(), rng);
        fill(&mut values, self.enc.mean_w.clone(), (1.0 / he).sqrt(), rng);
        fill(&mut values, self.enc.lv_w.clone(), 0.1 / he.sqrt(), rng);
        fill(&mut values, self.dec_w.clone(), (2.0 / du).sqrt(), rng);

        let base = self.target.init_theta::<T>(rng, pixel_mean);
        let r = self.arch.side() as f64;
        for (slot, e) in self.gens.iter().zip(self.target.layout().entries()) {
            let base_std = if e.param == "bias" { 0.1 } else { (1.0 / e.cols() as f64).sqrt() };
            fill(&mut values, slot.u.clone(), (1.0 / r).sqrt(), rng);
            fill(&mut values, slot.v.clone(), 0.5 * base_std / r.sqrt(), rng);
            values[slot.b.clone()].copy_from_slice(&base.values()[slot.theta.clone()]);
        }
        HyperParams { values, layout: self.layout.clone() }
    }

    fn check<T: Scalar>(&self, gamma: &HyperParams<T>) -> Result<()> {
        if *gamma.layout != *self.layout {
            return Err(Error::LayoutMismatch {
                expected: self.layout.total_len(),
                actual: gamma.layout.total_len(),
            });
        }
        Ok(())
    }

    fn check_input<T>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.arch.target.input_dim {
            return Err(Error::Shape(format!(
                "hyper-encoder input: expected {} values, got {}",
                self.arch.target.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    // -- encoder ---------------------------------------------------------

    fn encode_trace<T: Scalar>(&self, gamma: &[T], x: &[T]) -> EncoderTrace<T> {
        let s = &self.enc;
        let mut hidden = vec![T::zero(); self.arch.enc_hidden];
        dense_apply(&gamma[s.hid_w.clone()], &gamma[s.hid_b.clone()], x, Activation::Relu, &mut hidden);
        let mut mean = vec![T::zero(); self.arch.latent];
        let mut log_var_raw = vec![T::zero(); self.arch.latent];
        dense_apply(&gamma[s.mean_w.clone()], &gamma[s.mean_b.clone()], &hidden, Activation::Identity, &mut mean);
        dense_apply(&gamma[s.lv_w.clone()], &gamma[s.lv_b.clone()], &hidden, Activation::Identity, &mut log_var_raw);
        let posterior = GaussianDiag::new(mean.clone(), log_var_raw.clone());
        EncoderTrace { hidden, mean, log_var_raw, posterior }
    }

    /// Accumulates encoder gradients given `d/dmean` and `d/dlog_var` (w.r.t.
    /// the clamped log-variance).
    fn encode_backward<T: Scalar>(
        &self,
        gamma: &[T],
        x: &[T],
        t: &EncoderTrace<T>,
        d_mean: &[T],
        d_log_var: &[T],
        grad: &mut [T],
    ) {
        let s = &self.enc;
        let (lo, hi) = (T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX));
        let d_raw: Vec<T> = d_log_var
            .iter()
            .zip(&t.log_var_raw)
            .map(|(&g, &raw)| if raw < lo || raw > hi { T::zero() } else { g })
            .collect();
        let mut dh = vec![T::zero(); self.arch.enc_hidden];
        {
            let (dw, db) = split_pair(grad, s.mean_w.clone(), s.mean_b.clone());
            dense_backward_into(&gamma[s.mean_w.clone()], &t.hidden, &t.mean, d_mean, Activation::Identity, dw, db, Some(&mut dh));
        }
        {
            let (dw, db) = split_pair(grad, s.lv_w.clone(), s.lv_b.clone());
            dense_backward_into(&gamma[s.lv_w.clone()], &t.hidden, &t.log_var_raw, &d_raw, Activation::Identity, dw, db, Some(&mut dh));
        }
        let (dw, db) = split_pair(grad, s.hid_w.clone(), s.hid_b.clone());
        dense_backward_into(&gamma[s.hid_w.clone()], x, &t.hidden, &dh, Activation::Relu, dw, db, None);
    }

    /// `q_k(u | x_k; γ)`
    pub fn hyper_encode<T: Scalar>(&self, gamma: &HyperParams<T>, x: &[T]) -> Result<GaussianDiag<T>> {
        self.check(gamma)?;
        self.check_input(x)?;
        Ok(self.encode_trace(&gamma.values, x).posterior)
    }

    /// Uniform mixture with one component per sample.
    pub fn build_mixture<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        samples: &[X],
    ) -> Result<MixturePosterior<T>> {
        let comps = samples
            .iter()
            .map(|x| self.hyper_encode(gamma, x.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        MixturePosterior::new(comps)
    }

    /// Draws `k` members uniformly without replacement from the minibatch and
    /// builds their mixture.
    pub fn build_mixture_from_batch<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        minibatch: &[X],
        k: usize,
        rng: &mut RngState,
    ) -> Result<MixturePosterior<T>> {
        check_k(minibatch.len(), k)?;
        let members = rng.sample_indices(minibatch.len(), k);
        let picked: Vec<&[T]> = members.iter().map(|&i| minibatch[i].as_ref()).collect();
        self.build_mixture(gamma, &picked)
    }

    // -- decoder ---------------------------------------------------------

    fn decode_trace<T: Scalar>(&self, gamma: &[T], u: &[T]) -> (Vec<T>, DecoderTrace<T>) {
        let mut hidden = vec![T::zero(); self.arch.dec_hidden];
        dense_apply(&gamma[self.dec_w.clone()], &gamma[self.dec_b.clone()], u, Activation::Relu, &mut hidden);
        let mut theta = vec![T::zero(); self.target.theta_len()];
        let mut hv = Vec::with_capacity(self.gens.len());
        for slot in &self.gens {
            let mut buf = vec![T::zero(); slot.dims.p * slot.dims.n];
            matrix_apply(
                slot.dims,
                &gamma[slot.u.clone()],
                &hidden,
                &gamma[slot.v.clone()],
                &gamma[slot.b.clone()],
                Activation::Identity,
                &mut buf,
                &mut theta[slot.theta.clone()],
            );
            hv.push(buf);
        }
        (theta, DecoderTrace { hidden, hv })
    }

    /// Accumulates decoder gradients for upstream `d_theta`; adds `d/du` into `d_u`.
    fn decode_backward<T: Scalar>(
        &self,
        gamma: &[T],
        u: &[T],
        theta: &[T],
        t: &DecoderTrace<T>,
        d_theta: &[T],
        grad: &mut [T],
        d_u: &mut [T],
    ) {
        let mut dh = vec![T::zero(); self.arch.dec_hidden];
        for (slot, hv) in self.gens.iter().zip(&t.hv) {
            debug_assert!(slot.u.end == slot.v.start && slot.v.end == slot.b.start);
            let region = &mut grad[slot.u.start..slot.b.end];
            let (du, rest) = region.split_at_mut(slot.u.len());
            let (dv, db) = rest.split_at_mut(slot.v.len());
            matrix_backward_into(
                slot.dims,
                &gamma[slot.u.clone()],
                &t.hidden,
                &gamma[slot.v.clone()],
                hv,
                &theta[slot.theta.clone()],
                &d_theta[slot.theta.clone()],
                Activation::Identity,
                du,
                dv,
                db,
                &mut dh,
            );
        }
        let (dw, db) = split_pair(grad, self.dec_w.clone(), self.dec_b.clone());
        dense_backward_into(&gamma[self.dec_w.clone()], u, &t.hidden, &dh, Activation::Relu, dw, db, Some(d_u));
    }

    /// Deterministic `θ(u)`.
    pub fn hyper_decode<T: Scalar>(&self, gamma: &HyperParams<T>, u: &[T]) -> Result<ThetaVector<T>> {
        self.check(gamma)?;
        if u.len() != self.arch.latent {
            return Err(Error::Shape(format!("u: expected {} values, got {}", self.arch.latent, u.len())));
        }
        let (theta, _) = self.decode_trace(&gamma.values, u);
        self.target.wrap(theta)
    }

    /// Ancestral sample `θ ~ q(θ|D)`: members `x_k` drawn from the minibatch, a
    /// component chosen uniformly, `u` reparameterized within it, then `θ(u)`.
    pub fn sample_theta<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        minibatch: &[X],
        k: usize,
        rng: &mut RngState,
    ) -> Result<ThetaVector<T>> {
        if minibatch.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let noise = self.draw_noise(minibatch.len(), k, rng)?;
        self.theta_from_noise(gamma, minibatch, &noise)
    }

    /// `θ(u)` for the `chosen` component of frozen noise.
    pub fn theta_from_noise<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        minibatch: &[X],
        noise: &ObjectiveNoise<T>,
    ) -> Result<ThetaVector<T>> {
        self.check(gamma)?;
        let c = noise.chosen;
        let x = minibatch
            .get(noise.members[c])
            .ok_or_else(|| Error::InvalidArgument("noise member outside minibatch".into()))?;
        self.check_input(x.as_ref())?;
        let q = self.encode_trace(&gamma.values, x.as_ref()).posterior;
        let u = q.reparameterize(&noise.u_eps[c]);
        self.hyper_decode(gamma, &u)
    }

    /// Draws members, component noise, and per-item `z` noise for a minibatch.
    pub fn draw_noise<T: Scalar>(
        &self,
        batch_len: usize,
        k: usize,
        rng: &mut RngState,
    ) -> Result<ObjectiveNoise<T>> {
        check_k(batch_len, k)?;
        let members = rng.sample_indices(batch_len, k);
        let u_eps = (0..k).map(|_| rng.normal_vec(self.arch.latent)).collect();
        let z_eps = (0..k)
            .map(|_| (0..batch_len).map(|_| rng.normal_vec(self.arch.target.latent)).collect())
            .collect();
        let chosen = rng.below(k);
        Ok(ObjectiveNoise { members, u_eps, z_eps, chosen })
    }

    fn check_noise<T: Scalar, X: AsRef<[T]>>(&self, batch: &[X], noise: &ObjectiveNoise<T>) -> Result<()> {
        check_k(batch.len(), noise.k())?;
        if noise.u_eps.len() != noise.k() || noise.z_eps.len() != noise.k() {
            return Err(Error::InvalidArgument("noise component count".into()));
        }
        if noise.members.iter().any(|&m| m >= batch.len())
            || noise.z_eps.iter().any(|z| z.len() != batch.len())
            || noise.chosen >= noise.k()
        {
            return Err(Error::InvalidArgument("noise does not match the minibatch".into()));
        }
        for x in batch {
            self.check_input(x.as_ref())?;
        }
        Ok(())
    }

    /// `Σ_x elbo(θ, x)` with per-item noise; adds `weight · ∂/∂θ` into `d_theta`.
    fn elbo_sum<T: Scalar, X: AsRef<[T]>>(
        &self,
        theta: &[T],
        batch: &[X],
        z_eps: &[Vec<T>],
        grad: Option<(&mut [T], T)>,
    ) -> (T, T) {
        let (mut total, mut recon) = (T::zero(), T::zero());
        match grad {
            Some((d_theta, weight)) => {
                for (x, eps) in batch.iter().zip(z_eps) {
                    let e = self.target.elbo_grad_into(theta, x.as_ref(), eps, weight, d_theta);
                    total += e.elbo;
                    recon += e.recon_loglik;
                }
            }
            None => {
                for (x, eps) in batch.iter().zip(z_eps) {
                    let e = self.target.elbo_with_noise(theta, x.as_ref(), eps);
                    total += e.elbo;
                    recon += e.recon_loglik;
                }
            }
        }
        (total, recon)
    }

    /// K = 1 objective `Σ_x elbo(θ(u), x) − KL(q(u|x_k) ‖ N(0, I))`, one
    /// reparameterized `u`. When `grad` is given, `∂/∂γ` is *added* into it.
    pub fn joint_objective_k1<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        batch: &[X],
        noise: &ObjectiveNoise<T>,
        kl: KlEstimate,
        grad: Option<&mut [T]>,
    ) -> Result<JointTerms<T>> {
        self.check(gamma)?;
        self.check_noise(batch, noise)?;
        if noise.k() != 1 {
            return Err(Error::InvalidArgument(format!("joint_objective_k1 needs K = 1, got {}", noise.k())));
        }
        let g = &gamma.values;
        let xk = batch[noise.members[0]].as_ref();
        let eps_u = &noise.u_eps[0];
        let enc = self.encode_trace(g, xk);
        let q = &enc.posterior;
        let u = q.reparameterize(eps_u);
        let (theta, dec) = self.decode_trace(g, &u);
        let kl_u = match kl {
            KlEstimate::ClosedForm => kl_to_standard_normal(q),
            KlEstimate::DensityRatio => q.log_density(&u) - standard_normal_log_density(&u),
        };

        let Some(grad) = grad else {
            let (elbo_sum, recon) = self.elbo_sum(&theta, batch, &noise.z_eps[0], None);
            return Ok(JointTerms { objective: elbo_sum - kl_u, elbo_sum, recon, kl_u });
        };
        check_grad_len(grad, self.gamma_len())?;
        let mut d_theta = vec![T::zero(); theta.len()];
        let (elbo_sum, recon) = self.elbo_sum(&theta, batch, &noise.z_eps[0], Some((&mut d_theta, T::one())));
        let mut d_u = vec![T::zero(); self.arch.latent];
        self.decode_backward(g, &u, &theta, &dec, &d_theta, grad, &mut d_u);

        let half = T::of(0.5);
        let mut d_mean = vec![T::zero(); self.arch.latent];
        let mut d_lv = vec![T::zero(); self.arch.latent];
        for i in 0..self.arch.latent {
            let lv = q.log_var[i];
            let sigma = (half * lv).exp();
            match kl {
                KlEstimate::ClosedForm => {
                    d_mean[i] = d_u[i] - q.mean[i];
                    d_lv[i] = d_u[i] * eps_u[i] * half * sigma - half * (lv.exp() - T::one());
                }
                KlEstimate::DensityRatio => {
                    // −log q(u) = ½Σ(ln 2π + lv + ε²) and log p(u) = −½Σ(ln 2π + u²)
                    let du_total = d_u[i] - u[i];
                    d_mean[i] = du_total;
                    d_lv[i] = du_total * eps_u[i] * half * sigma + half;
                }
            }
        }
        self.encode_backward(g, xk, &enc, &d_mean, &d_lv, grad);
        Ok(JointTerms { objective: elbo_sum - kl_u, elbo_sum, recon, kl_u })
    }

    /// Importance-weighted objective over the `K` mixture components:
    /// `log (1/K) Σ_k exp(Σ_x elbo(θ(u_k), x) + log p(u_k) − log q(u_k|D))`,
    /// with `u_k` drawn from component `k`.
    pub fn importance_weighted_objective<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        batch: &[X],
        noise: &ObjectiveNoise<T>,
        grad: Option<(&mut [T], IwGradient)>,
    ) -> Result<IwTerms<T>> {
        self.check(gamma)?;
        self.check_noise(batch, noise)?;
        let g = &gamma.values;
        let k = noise.k();
        let encs: Vec<EncoderTrace<T>> =
            noise.members.iter().map(|&m| self.encode_trace(g, batch[m].as_ref())).collect();
        let mixture = MixturePosterior::new(encs.iter().map(|e| e.posterior.clone()).collect())?;
        let us: Vec<Vec<T>> =
            encs.iter().zip(&noise.u_eps).map(|(e, eps)| e.posterior.reparameterize(eps)).collect();

        let mut decoded = Vec::with_capacity(k);
        let (mut elbo_sums, mut recon_sums, mut log_prior, mut log_posterior, mut log_weights) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (j, u) in us.iter().enumerate() {
            let (theta, dec) = self.decode_trace(g, u);
            let (s, r) = self.elbo_sum(&theta, batch, &noise.z_eps[j], None);
            let lp = standard_normal_log_density(u);
            let lq = mixture.log_density(u);
            elbo_sums.push(s);
            recon_sums.push(r);
            log_prior.push(lp);
            log_posterior.push(lq);
            log_weights.push(s + lp - lq);
            decoded.push((theta, dec));
        }
        let objective = log_mean_exp(&log_weights);
        let normalized_weights = softmax(&log_weights);

        if let Some((grad, route)) = grad {
            check_grad_len(grad, self.gamma_len())?;
            match route {
                IwGradient::Reparameterized => {
                    self.iw_backward(g, batch, noise, &encs, &mixture, &us, &decoded, &normalized_weights, grad);
                }
                IwGradient::NormalizedWeights => {
                    for (j, &w) in normalized_weights.iter().enumerate() {
                        let mut per = vec![T::zero(); grad.len()];
                        let mut onehot = vec![T::zero(); k];
                        onehot[j] = T::one();
                        self.iw_backward(g, batch, noise, &encs, &mixture, &us, &decoded, &onehot, &mut per);
                        for (a, b) in grad.iter_mut().zip(&per) {
                            *a += w * *b;
                        }
                    }
                }
            }
        }
        Ok(IwTerms { objective, log_weights, normalized_weights, elbo_sums, recon_sums, log_prior, log_posterior })
    }

    /// Reverse pass with adjoint `adjoint[j]` on each log-weight.
    #[allow(clippy::too_many_arguments)]
    fn iw_backward<T: Scalar, X: AsRef<[T]>>(
        &self,
        g: &[T],
        batch: &[X],
        noise: &ObjectiveNoise<T>,
        encs: &[EncoderTrace<T>],
        mixture: &MixturePosterior<T>,
        us: &[Vec<T>],
        decoded: &[(Vec<T>, DecoderTrace<T>)],
        adjoint: &[T],
        grad: &mut [T],
    ) {
        let k = us.len();
        let du_dim = self.arch.latent;
        let half = T::of(0.5);
        let mut d_mean = vec![vec![T::zero(); du_dim]; k];
        let mut d_lv = vec![vec![T::zero(); du_dim]; k];
        for j in 0..k {
            let a = adjoint[j];
            if a == T::zero() {
                continue;
            }
            let u = &us[j];
            let (theta, dec) = &decoded[j];
            let mut d_theta = vec![T::zero(); theta.len()];
            self.elbo_sum(theta, batch, &noise.z_eps[j], Some((&mut d_theta, a)));
            let mut d_u = vec![T::zero(); du_dim];
            self.decode_backward(g, u, theta, dec, &d_theta, grad, &mut d_u);
            // + log p(u)
            for i in 0..du_dim {
                d_u[i] -= a * u[i];
            }
            // − log q(u)
            let lq = mixture.log_density_grad(u);
            for (d, l) in d_u.iter_mut().zip(&lq.d_u) {
                *d -= a * *l;
            }
            for c in 0..k {
                for i in 0..du_dim {
                    d_mean[c][i] -= a * lq.d_mean[c][i];
                    d_lv[c][i] -= a * lq.d_log_var[c][i];
                }
            }
            // u_j = μ_j + σ_j ε_j
            let q = &encs[j].posterior;
            for i in 0..du_dim {
                d_mean[j][i] += d_u[i];
                d_lv[j][i] += d_u[i] * noise.u_eps[j][i] * half * (half * q.log_var[i]).exp();
            }
        }
        for (c, &m) in noise.members.iter().enumerate() {
            self.encode_backward(g, batch[m].as_ref(), &encs[c], &d_mean[c], &d_lv[c], grad);
        }
    }

    /// Posterior-mean `u` of a single data vector, `μ_γ(x)`.
    pub fn posterior_mean<T: Scalar>(&self, gamma: &HyperParams<T>, x: &[T]) -> Result<Vec<T>> {
        Ok(self.hyper_encode(gamma, x)?.mean)
    }

    /// `θ(μ_γ(x))`: the VAE the hyper-network assigns to a single exemplar.
    pub fn theta_for_exemplar<T: Scalar>(&self, gamma: &HyperParams<T>, x: &[T]) -> Result<ThetaVector<T>> {
        let u = self.posterior_mean(gamma, x)?;
        self.hyper_decode(gamma, &u)
    }

    /// `θ(ū)` where `ū` is the mean of the mixture posterior over `samples`:
    /// the VAE the hyper-network assigns to a whole task.
    pub fn theta_for_task<T: Scalar, X: AsRef<[T]>>(
        &self,
        gamma: &HyperParams<T>,
        samples: &[X],
    ) -> Result<ThetaVector<T>> {
        let q = self.build_mixture(gamma, samples)?;
        let mut u = vec![T::zero(); self.arch.latent];
        for c in q.components() {
            for (a, &m) in u.iter_mut().zip(&c.mean) {
                *a += m;
            }
        }
        let n = T::of(q.k() as f64);
        u.iter_mut().for_each(|a| *a /= n);
        self.hyper_decode(gamma, &u)
    }
}

fn check_k(batch_len: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if batch_len == 0 {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    if k > batch_len {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds minibatch size {batch_len}")));
    }
    Ok(())
}

fn check_grad_len<T>(grad: &[T], len: usize) -> Result<()> {
    if grad.len() != len {
        return Err(Error::LayoutMismatch { expected: len, actual: grad.len() });
    }
    Ok(())
}

fn split_pair<T>(buf: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(a.end, b.start);
    buf[a.start..b.end].split_at_mut(a.end - a.start)
}

/// log-sum-exp of component log densities, exposed for oracles that want the
/// unnormalized sum.
pub fn mixture_log_sum<T: Scalar>(q: &MixturePosterior<T>, u: &[T]) -> T {
    let terms: Vec<T> = q.components().iter().map(|c| c.log_density(u)).collect();
    log_sum_exp(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HyperVae {
        HyperVae::new(HyperArch {
            target: VaeArch::new(6, 4, 2),
            enc_hidden: 5,
            latent: 3,
            dec_hidden: 4,
        })
    }

    fn batch(rng: &mut RngState, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn zero_gamma_encodes_to_standard_normal() {
        let hv = small();
        let g = hv.zero_gamma::<f64>();
        let q = hv.hyper_encode(&g, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(q, GaussianDiag::standard(3));
    }

    #[test]
    fn decoded_length_matches_layout() {
        let hv = small();
        let mut rng = RngState::new(2);
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let theta = hv.hyper_decode(&g, &[0.1, -0.3, 2.0]).unwrap();
        assert_eq!(theta.len(), hv.target().theta_len());
        assert_eq!(theta, hv.hyper_decode(&g, &[0.1, -0.3, 2.0]).unwrap());
    }

    #[test]
    fn decoder_is_continuous() {
        let hv = small();
        let mut rng = RngState::new(3);
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let u = [0.4, -0.2, 0.9];
        let base = hv.hyper_decode(&g, &u).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [1e-1, 1e-3, 1e-5, 1e-7] {
            let shifted = hv.hyper_decode(&g, &[u[0] + delta, u[1], u[2]]).unwrap();
            let diff = base.values().iter().zip(shifted.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= prev);
            prev = diff;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn k_exceeding_batch_is_rejected() {
        let hv = small();
        let mut rng = RngState::new(1);
        assert!(hv.draw_noise::<f64>(3, 4, &mut rng).is_err());
        assert!(hv.draw_noise::<f64>(0, 1, &mut rng).is_err());
        let g = hv.zero_gamma::<f64>();
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(hv.sample_theta(&g, &empty, 1, &mut rng).is_err());
    }

    #[test]
    fn k1_sample_theta_uses_single_component() {
        let hv = small();
        let mut rng = RngState::new(5);
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let b = batch(&mut rng, 4, 6);
        let noise = hv.draw_noise::<f64>(b.len(), 1, &mut RngState::new(9)).unwrap();
        let q = hv.hyper_encode(&g, &b[noise.members[0]]).unwrap();
        let u = q.reparameterize(&noise.u_eps[0]);
        let expect = hv.hyper_decode(&g, &u).unwrap();
        assert_eq!(hv.theta_from_noise(&g, &b, &noise).unwrap(), expect);
        let again = hv.sample_theta(&g, &b, 1, &mut RngState::new(9)).unwrap();
        assert_eq!(again, expect);
    }

    #[test]
    fn standard_component_density_at_origin() {
        let q = MixturePosterior::new(vec![GaussianDiag::<f64>::standard(1)]).unwrap();
        assert!((q.log_density(&[0.0]) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!(q.log_density(&[1e3]).is_finite());
    }

    #[test]
    fn duplicate_components_equal_single() {
        let c = GaussianDiag::<f64>::new(vec![0.3, -1.0], vec![0.2, -0.4]);
        let one = MixturePosterior::new(vec![c.clone()]).unwrap();
        let two = MixturePosterior::new(vec![c.clone(), c]).unwrap();
        let u = [0.1, 0.7];
        assert!((one.log_density(&u) - two.log_density(&u)).abs() < 1e-14);
        assert_eq!(two.weights(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_gamma_objective_anchor() {
        let hv = small();
        let g = hv.zero_gamma::<f64>();
        let mut rng = RngState::new(7);
        let b = batch(&mut rng, 5, 6);
        let noise = hv.draw_noise(b.len(), 1, &mut rng).unwrap();
        let t = hv.joint_objective_k1(&g, &b, &noise, KlEstimate::ClosedForm, None).unwrap();
        assert!((t.objective + 5.0 * 6.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(t.kl_u, 0.0);
    }

    #[test]
    fn iw_weights_normalize() {
        let hv = small();
        let mut rng = RngState::new(8);
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let b = batch(&mut rng, 6, 6);
        let noise = hv.draw_noise(b.len(), 4, &mut rng).unwrap();
        let t = hv.importance_weighted_objective(&g, &b, &noise, None).unwrap();
        assert!((t.normalized_weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(t.log_weights.len(), 4);
    }
}
