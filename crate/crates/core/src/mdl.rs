//! Description-length accounting. Everything is computed in nats; bits are
//! derived on output.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hypernet::{HyperParams, HyperVae, ObjectiveNoise};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::vae::{standard_normal_log_density, TaskVae, ThetaVector};

/// Default discretization step for continuous code lengths.
pub const DEFAULT_EPS: f64 = 0.01;

/// `−ln P` for a probability mass `0 < P ≤ 1`.
pub fn code_length(prob_mass: f64) -> Result<f64> {
    if !(prob_mass > 0.0 && prob_mass <= 1.0) {
        return Err(Error::InvalidArgument(format!("probability mass {prob_mass} outside (0, 1]")));
    }
    Ok(-prob_mass.ln())
}

/// Code length of a continuous value quantized to cells of side `eps` in
/// `dims` dimensions: `−ln p − dims · ln eps`.
pub fn discretized_code_length(density: f64, eps: f64, dims: usize) -> Result<f64> {
    if !(density > 0.0) || !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("density {density} and eps {eps} must be positive")));
    }
    Ok(discretized_from_log_density(density.ln(), eps, dims))
}

/// [`discretized_code_length`] taking `ln p` directly, which avoids underflow
/// for high-dimensional densities.
pub fn discretized_from_log_density(log_density: f64, eps: f64, dims: usize) -> f64 {
    -log_density - dims as f64 * eps.ln()
}

pub fn two_part_length(data_nats: f64, model_nats: f64) -> f64 {
    data_nats + model_nats
}

/// `L(θ)` with every coordinate coded under a standard normal discretized at `eps`.
pub fn theta_code_length<T: Scalar>(theta: &[T], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let log_p = standard_normal_log_density(theta).to64();
    Ok(discretized_from_log_density(log_p, eps, theta.len()))
}

/// KL term as a difference of two discretized code lengths at the same `eps`:
/// `L_p(u) − L_q(u)`. The `dims · ln eps` parts cancel.
pub fn discretized_log_ratio(log_q: f64, log_p: f64, eps: f64, dims: usize) -> f64 {
    discretized_from_log_density(log_p, eps, dims) - discretized_from_log_density(log_q, eps, dims)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeLengthReport {
    /// `L(D|θ)`, here `−Σ_x elbo`.
    pub data_given_model: f64,
    /// `L(θ)` for a two-part code; `None` for bits-back reports.
    pub model_two_part: Option<f64>,
    /// `KL(q(u|D) ‖ p(u))`; zero for two-part reports.
    pub kl_term: f64,
    /// `data + kl` (bits-back) or `data + L(θ)` (two-part).
    pub total_nats: f64,
    pub precision_eps: f64,
}

impl CodeLengthReport {
    pub fn total_bits(&self) -> f64 {
        self.total_nats / LN_2
    }

    pub fn is_finite(&self) -> bool {
        self.data_given_model.is_finite()
            && self.kl_term.is_finite()
            && self.total_nats.is_finite()
            && self.model_two_part.is_none_or(f64::is_finite)
    }

    pub const CSV_HEADER: &'static str = "run_id,data_nats,kl_nats,total_nats,total_bits,eps";

    /// One CSV row (no trailing newline), floats with 17 significant digits.
    pub fn csv_row(&self, run_id: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            run_id,
            self.data_given_model,
            self.kl_term,
            self.total_nats,
            self.total_bits(),
            self.precision_eps
        );
        s
    }
}

/// Crude two-part code for a single VAE: `−Σ_x elbo(θ, x) + L(θ)`, with the
/// ELBO evaluated under the given per-item `z` noise.
pub fn vae_two_part_length<T: Scalar, X: AsRef<[T]>>(
    vae: &TaskVae,
    theta: &ThetaVector<T>,
    data: &[X],
    z_eps: &[Vec<T>],
    eps: f64,
) -> Result<CodeLengthReport> {
    if z_eps.len() != data.len() {
        return Err(Error::InvalidArgument("one z noise vector per item is required".into()));
    }
    let mut data_nats = 0.0;
    for (x, e) in data.iter().zip(z_eps) {
        data_nats -= vae.elbo_with_noise(theta.values(), x.as_ref(), e).elbo.to64();
    }
    let model = theta_code_length(theta.values(), eps)?;
    Ok(CodeLengthReport {
        data_given_model: data_nats,
        model_two_part: Some(model),
        kl_term: 0.0,
        total_nats: two_part_length(data_nats, model),
        precision_eps: eps,
    })
}

/// Bits-back expected code length `E_q[−Σ_x elbo(θ(u), x)] + KL(q(u|D) ‖ p(u))`,
/// averaged over the supplied noise draws.
///
/// With `K = 1` the KL is closed form; otherwise it is the single-sample
/// estimate `log q(u) − log p(u)` at each draw's `u`, computed as a
/// difference of discretized code lengths at `eps` (the `eps` terms cancel).
pub fn bits_back_length_with_noise<T: Scalar, X: AsRef<[T]>>(
    hv: &HyperVae,
    gamma: &HyperParams<T>,
    batch: &[X],
    draws: &[ObjectiveNoise<T>],
    eps: f64,
) -> Result<CodeLengthReport> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("at least one noise draw is required".into()));
    }
    let (mut data_sum, mut kl_sum) = (0.0, 0.0);
    for noise in draws {
        let members: Vec<&[T]> = noise
            .members
            .iter()
            .map(|&m| batch.get(m).map(|x| x.as_ref()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidArgument("noise member outside minibatch".into()))?;
        let q = hv.build_mixture(gamma, &members)?;
        let c = noise.chosen;
        let u = q.components()[c].reparameterize(&noise.u_eps[c]);
        let theta = hv.hyper_decode(gamma, &u)?;
        if noise.z_eps[c].len() != batch.len() {
            return Err(Error::InvalidArgument("noise does not match the minibatch".into()));
        }
        for (x, e) in batch.iter().zip(&noise.z_eps[c]) {
            data_sum -= hv.target().elbo_with_noise(theta.values(), x.as_ref(), e).elbo.to64();
        }
        kl_sum += if q.k() == 1 {
            q.components()[0].kl_to_standard_normal().to64()
        } else {
            let log_q = q.log_density(&u).to64();
            let log_p = standard_normal_log_density(&u).to64();
            discretized_log_ratio(log_q, log_p, eps, u.len())
        };
    }
    let n = draws.len() as f64;
    let (data, kl) = (data_sum / n, kl_sum / n);
    Ok(CodeLengthReport {
        data_given_model: data,
        model_two_part: None,
        kl_term: kl,
        total_nats: data + kl,
        precision_eps: eps,
    })
}

/// [`bits_back_length_with_noise`] with `samples` fresh noise draws.
pub fn bits_back_length<T: Scalar, X: AsRef<[T]>>(
    hv: &HyperVae,
    gamma: &HyperParams<T>,
    batch: &[X],
    k: usize,
    samples: usize,
    rng: &mut RngState,
) -> Result<CodeLengthReport> {
    let draws = (0..samples.max(1))
        .map(|_| hv.draw_noise(batch.len(), k, rng))
        .collect::<Result<Vec<_>>>()?;
    bits_back_length_with_noise(hv, gamma, batch, &draws, DEFAULT_EPS)
}
