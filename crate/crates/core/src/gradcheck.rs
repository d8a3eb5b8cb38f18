//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::hypernet::{HyperArch, HyperVae, IwGradient, KlEstimate};
use crate::layers::{dense_backward, dense_forward, matrix_layer_backward, matrix_layer_forward, Activation};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vae::{TaskVae, VaeArch};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck<T> {
    pub max_relative_error: T,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient of `loss` against central differences.
///
/// `loss(params, grad)` must return the loss value and, when `grad` is given,
/// write (overwrite, not accumulate) the analytic gradient into it. It must be
/// deterministic, so any sampling noise has to be frozen by the caller.
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = 1e-6 · max(1, max_j |a_j|)`. The floor keeps coordinates whose
/// gradient sits far below the rest (and below finite-difference roundoff) from
/// dominating the report.
pub fn grad_check<T, F>(mut loss: F, params: &[T], step: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: FnMut(&[T], Option<&mut [T]>) -> Result<T>,
{
    let mut analytic = vec![T::zero(); params.len()];
    let base = loss(params, Some(&mut analytic))?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    let mut probe = params.to_vec();
    let largest = analytic.iter().fold(T::one(), |m, g| m.max(g.abs()));
    let floor = T::of(1e-6) * largest;
    let two = T::of(2.0);
    let mut report = GradCheck { max_relative_error: T::zero(), worst_index: 0, checked: 0 };
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss(&probe, None)?;
        probe[i] = orig - step;
        let minus = loss(&probe, None)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("gradient-check loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (two * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Small architectures for [`gradient_suite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub hyper_latent: usize,
    /// Must be a perfect square.
    pub hyper_dec_hidden: usize,
    pub batch: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        Self { input_dim: 9, hidden: 5, latent: 2, hyper_latent: 3, hyper_dec_hidden: 9, batch: 4 }
    }
}

/// Gradient checks for a dense layer, a matrix layer, the VAE ELBO, and the
/// hyper-VAE objectives (`K = 1` with both KL forms, importance-weighted with
/// `K = 3`), all in double precision with frozen noise.
pub fn gradient_suite(dims: SuiteDims, step: f64, seed: u64) -> Result<Vec<(String, GradCheck<f64>)>> {
    let mut rng = RngState::new(seed);
    let mut out = Vec::new();

    let (m, n) = (dims.hidden, dims.input_dim);
    let coef: Vec<f64> = rng.normal_vec(m);
    let mut params: Vec<f64> = rng.normal_vec(m * n + m + n);
    params.iter_mut().for_each(|v| *v *= 0.5);
    let dense = |p: &[f64], g: Option<&mut [f64]>| -> Result<f64> {
        let w = Tensor::matrix(m, n, p[..m * n].to_vec())?;
        let b = Tensor::vector(p[m * n..m * n + m].to_vec());
        let x = Tensor::vector(p[m * n + m..].to_vec());
        let y = dense_forward(&x, &w, &b, Activation::Sigmoid)?;
        if let Some(g) = g {
            let lg = dense_backward(&x, &w, &y, &Tensor::vector(coef.clone()), Activation::Sigmoid)?;
            g[..m * n].copy_from_slice(lg.params["weight"].data());
            g[m * n..m * n + m].copy_from_slice(lg.params["bias"].data());
            g[m * n + m..].copy_from_slice(lg.input.data());
        }
        Ok(y.data().iter().zip(&coef).map(|(a, c)| a * c).sum())
    };
    out.push(("dense_layer".to_string(), grad_check(dense, &params, step)?));

    let (p, q, mm, nn) = (3, 4, 5, 2);
    let sizes = [mm * p, q * nn, mm * nn, p * q];
    let total: usize = sizes.iter().sum();
    let coef: Vec<f64> = rng.normal_vec(mm * nn);
    let params: Vec<f64> = rng.normal_vec(total);
    let matrix = |x: &[f64], g: Option<&mut [f64]>| -> Result<f64> {
        let (u, rest) = x.split_at(sizes[0]);
        let (v, rest) = rest.split_at(sizes[1]);
        let (b, h) = rest.split_at(sizes[2]);
        let (u, v, b, h) = (
            Tensor::matrix(mm, p, u.to_vec())?,
            Tensor::matrix(q, nn, v.to_vec())?,
            Tensor::matrix(mm, nn, b.to_vec())?,
            Tensor::matrix(p, q, h.to_vec())?,
        );
        let y = matrix_layer_forward(&h, &u, &v, &b, Activation::Sigmoid)?;
        if let Some(g) = g {
            let up = Tensor::matrix(mm, nn, coef.clone())?;
            let lg = matrix_layer_backward(&h, &u, &v, &b, &y, &up, Activation::Sigmoid)?;
            let mut at = 0;
            for part in [lg.params["U"].data(), lg.params["V"].data(), lg.params["B"].data(), lg.input.data()] {
                g[at..at + part.len()].copy_from_slice(part);
                at += part.len();
            }
        }
        Ok(y.data().iter().zip(&coef).map(|(a, c)| a * c).sum())
    };
    out.push(("matrix_layer".to_string(), grad_check(matrix, &params, step)?));

    let arch = VaeArch::new(dims.input_dim, dims.hidden, dims.latent);
    let vae = TaskVae::new(arch);
    let theta = vae.init_theta::<f64>(&mut rng, None);
    let batch = suite_batch(&mut rng, dims.batch, dims.input_dim);
    let eps: Vec<Vec<f64>> = (0..dims.batch).map(|_| rng.normal_vec(dims.latent)).collect();
    let elbo = |p: &[f64], g: Option<&mut [f64]>| -> Result<f64> {
        let mut total = 0.0;
        match g {
            Some(g) => {
                g.iter_mut().for_each(|v| *v = 0.0);
                for (x, e) in batch.iter().zip(&eps) {
                    total += vae.elbo_grad_into(p, x, e, 1.0, g).elbo;
                }
            }
            None => {
                for (x, e) in batch.iter().zip(&eps) {
                    total += vae.elbo_with_noise(p, x, e).elbo;
                }
            }
        }
        Ok(total)
    };
    out.push(("vae_elbo".to_string(), grad_check(elbo, theta.values(), step)?));

    let harch = HyperArch { target: arch, enc_hidden: dims.hidden, latent: dims.hyper_latent, dec_hidden: dims.hyper_dec_hidden };
    let hv = HyperVae::new(harch);
    let gamma = hv.init_gamma::<f64>(&mut rng, None);
    for (name, kl) in [("hypervae_k1_closed_form", KlEstimate::ClosedForm), ("hypervae_k1_density_ratio", KlEstimate::DensityRatio)] {
        let noise = hv.draw_noise::<f64>(batch.len(), 1, &mut rng)?;
        let loss = |p: &[f64], g: Option<&mut [f64]>| -> Result<f64> {
            let gp = hv.wrap(p.to_vec())?;
            let g = g.map(|g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g
            });
            Ok(hv.joint_objective_k1(&gp, &batch, &noise, kl, g)?.objective)
        };
        out.push((name.to_string(), grad_check(loss, gamma.values(), step)?));
    }
    let k = dims.batch.min(3);
    let noise = hv.draw_noise::<f64>(batch.len(), k, &mut rng)?;
    let iw = |p: &[f64], g: Option<&mut [f64]>| -> Result<f64> {
        let gp = hv.wrap(p.to_vec())?;
        let g = g.map(|g| {
            g.iter_mut().for_each(|v| *v = 0.0);
            (g, IwGradient::Reparameterized)
        });
        Ok(hv.importance_weighted_objective(&gp, &batch, &noise, g)?.objective)
    };
    out.push((format!("hypervae_iw_k{k}"), grad_check(iw, gamma.values(), step)?));
    Ok(out)
}

// Binary rows with at least one set pixel, which keeps zero-bias relu units
// off their kink.
fn suite_batch(rng: &mut RngState, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..d).map(|_| if rng.bernoulli(0.45) { 1.0 } else { 0.0 }).collect();
            if x.iter().all(|&v| v == 0.0) {
                x[rng.below(d)] = 1.0;
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_enough() {
        let coeffs = [1.5, -2.0, 0.25, 4.0];
        let loss = |p: &[f64], g: Option<&mut [f64]>| {
            if let Some(g) = g {
                for i in 0..p.len() {
                    g[i] = 2.0 * coeffs[i] * p[i];
                }
            }
            Ok(p.iter().zip(&coeffs).map(|(x, c)| c * x * x).sum())
        };
        let r = grad_check(loss, &[0.3, -1.1, 2.0, 0.7], 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let loss = |p: &[f64], g: Option<&mut [f64]>| {
            if let Some(g) = g {
                g[0] = p[0]; // should be 2 p
            }
            Ok(p[0] * p[0])
        };
        let r = grad_check(loss, &[1.0], 1e-5).unwrap();
        assert!(r.max_relative_error > 0.4);
    }

    #[test]
    fn non_finite_loss_errors() {
        let loss = |_: &[f64], _: Option<&mut [f64]>| Ok(f64::NAN);
        assert!(matches!(grad_check(loss, &[1.0], 1e-5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn suite_passes_on_defaults() {
        let r = gradient_suite(SuiteDims::default(), 1e-5, 0).unwrap();
        assert_eq!(r.len(), 6);
        for (name, c) in r {
            assert!(c.max_relative_error < 1e-4, "{name}: {c:?}");
        }
    }
}
