//! Density metrics and the outlier-detection pipeline.

use std::fmt::Write as _;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::hypernet::{HyperParams, HyperVae};
use crate::rng::RngState;
use crate::scalar::{log_mean_exp, Scalar};
use crate::vae::{standard_normal_log_density, TaskVae, ThetaVector};

pub const DEFAULT_IS_SAMPLES: usize = 1024;
pub const DEFAULT_SCORE_SAMPLES: usize = 8;

/// Importance-sampling log-weights `log p(x|z_s) + log p(z_s) − log q(z_s|x)`
/// with `z_s ~ q(z|x; θ)`.
pub fn is_log_weights<T: Scalar>(
    vae: &TaskVae,
    theta: &ThetaVector<T>,
    x: &[T],
    num_samples: usize,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be >= 1".into()));
    }
    let q = vae.encode(theta, x)?;
    Ok((0..num_samples)
        .map(|_| {
            let z = q.sample(rng);
            let lw = vae.reconstruction_loglik(theta.values(), x, &z) + standard_normal_log_density(&z)
                - q.log_density(&z);
            lw.to64()
        })
        .collect())
}

/// Importance-sampled negative log-likelihood `−log (1/S) Σ_s w_s`, in nats.
pub fn is_nll<T: Scalar>(
    vae: &TaskVae,
    theta: &ThetaVector<T>,
    x: &[T],
    num_samples: usize,
    rng: &mut RngState,
) -> Result<f64> {
    Ok(-log_mean_exp(&is_log_weights(vae, theta, x, num_samples, rng)?))
}

/// Mean IS-NLL over a dataset.
pub fn mean_is_nll<T: Scalar>(
    vae: &TaskVae,
    theta: &ThetaVector<T>,
    data: &TaskDataset<T>,
    num_samples: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut total = 0.0;
    for x in data.items() {
        total += is_nll(vae, theta, x, num_samples, rng)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean over `x` of `KL(q(z|x; θ) ‖ N(0, I))`.
pub fn posterior_kl_metric<T: Scalar>(vae: &TaskVae, theta: &ThetaVector<T>, data: &TaskDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut total = 0.0;
    for x in data.items() {
        total += vae.encode(theta, x)?.kl_to_standard_normal().to64();
    }
    Ok(total / data.len() as f64)
}

/// Model used to score test points.
pub enum Scorer<'a, T> {
    /// Fixed task VAE.
    Vae { vae: &'a TaskVae, theta: &'a ThetaVector<T> },
    /// Hyper-VAE: each point is scored under `θ(μ_γ(x))`, the VAE decoded
    /// from the posterior mean of its own encoding.
    Hyper { hv: &'a HyperVae, gamma: &'a HyperParams<T> },
}

/// Negative ELBO averaged over `samples` draws of `z`; higher means more anomalous.
pub fn outlier_score<T: Scalar>(scorer: &Scorer<'_, T>, x: &[T], samples: usize, rng: &mut RngState) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    let decoded;
    let (vae, theta) = match scorer {
        Scorer::Vae { vae, theta } => (*vae, *theta),
        Scorer::Hyper { hv, gamma } => {
            decoded = hv.theta_for_exemplar(gamma, x)?;
            (hv.target(), &decoded)
        }
    };
    let mut total = 0.0;
    for _ in 0..samples {
        total -= vae.elbo(theta, x, rng)?.elbo.to64();
    }
    Ok(total / samples as f64)
}

fn check_flags(scores: &[f64], flags: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != flags.len() {
        return Err(Error::InvalidArgument(format!("{} scores but {} flags", scores.len(), flags.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos = flags.iter().filter(|&&f| f).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("both normal and outlier points are required".into()));
    }
    Ok((pos, neg))
}

/// Probability that a random outlier (`flag = true`) outscores a random normal
/// point, ties counted one half. Pairs are counted exactly in integers.
pub fn roc_auc(scores: &[f64], flags: &[bool]) -> Result<f64> {
    let (pos, neg) = check_flags(scores, flags)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann–Whitney count: 2 per win, 1 per tie
    let mut twice: u128 = 0;
    let mut normals_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| flags[k]).count() as u128;
        let group_neg = (j - i) as u128 - group_pos;
        twice += group_pos * (2 * normals_below + group_neg);
        normals_below += group_neg;
        i = j;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Direct `O(n²)` pairwise form of [`roc_auc`].
pub fn roc_auc_pairwise(scores: &[f64], flags: &[bool]) -> Result<f64> {
    let (pos, neg) = check_flags(scores, flags)?;
    let mut twice: u128 = 0;
    for (i, &fi) in flags.iter().enumerate() {
        if !fi {
            continue;
        }
        for (j, &fj) in flags.iter().enumerate() {
            if fj {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub fpr: f64,
    pub fnr: f64,
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
}

/// Confusion-matrix rates with `score > threshold` predicted as outlier.
pub fn threshold_metrics(scores: &[f64], flags: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check_flags(scores, flags)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &f) in scores.iter().zip(flags) {
        match (s > threshold, f) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ThresholdMetrics {
        fpr: fp as f64 / (fp + tn) as f64,
        fnr: fn_ as f64 / (fn_ + tp) as f64,
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
    })
}

/// Linear-interpolation percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument("percentile needs data and q in [0, 100]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Operating threshold: 95th percentile of training-normal scores.
pub fn operating_threshold(train_scores: &[f64]) -> Result<f64> {
    percentile(train_scores, 95.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierTask<T> {
    pub normal_class: u32,
    /// Normal items only.
    pub train: TaskDataset<T>,
    pub test: TaskDataset<T>,
    /// `true` marks an outlier in `test`.
    pub flags: Vec<bool>,
    pub contamination: f64,
}

impl<T> OutlierTask<T> {
    pub fn outlier_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Number of outliers that makes them a `contamination` fraction of the test
/// set when added to `normals` normal items: `round(n · c / (1 − c))`.
pub fn outlier_count_for(normals: usize, contamination: f64) -> usize {
    (normals as f64 * contamination / (1.0 - contamination)).round() as usize
}

/// Hold-one-class-out task: normals of `normal_class` from `train_pool` form
/// the training set; the test set holds the normals of `test_pool` plus
/// uniformly drawn items of the other classes sized to `contamination`.
pub fn build_outlier_task<T: Scalar>(
    train_pool: &TaskDataset<T>,
    test_pool: &TaskDataset<T>,
    normal_class: u32,
    contamination: f64,
    rng: &mut RngState,
) -> Result<OutlierTask<T>> {
    if !(0.0..1.0).contains(&contamination) {
        return Err(Error::InvalidArgument(format!("contamination {contamination} outside [0, 1)")));
    }
    if test_pool.classes().len() < 2 {
        return Err(Error::InvalidArgument("pool needs at least two classes".into()));
    }
    let train = train_pool.filter_class(normal_class);
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!("no training items of class {normal_class}")));
    }
    let normal_idx: Vec<usize> = (0..test_pool.len()).filter(|&i| test_pool.labels()[i] == normal_class).collect();
    let other_idx: Vec<usize> = (0..test_pool.len()).filter(|&i| test_pool.labels()[i] != normal_class).collect();
    if normal_idx.is_empty() {
        return Err(Error::InvalidArgument(format!("no test items of class {normal_class}")));
    }
    let n_out = outlier_count_for(normal_idx.len(), contamination);
    if n_out > other_idx.len() {
        return Err(Error::InvalidArgument(format!(
            "need {n_out} outliers but only {} other-class items",
            other_idx.len()
        )));
    }
    let picked: Vec<usize> = rng.sample_indices(other_idx.len(), n_out).into_iter().map(|i| other_idx[i]).collect();
    let mut idx = normal_idx.clone();
    idx.extend_from_slice(&picked);
    let mut flags = vec![false; normal_idx.len()];
    flags.extend(std::iter::repeat_n(true, picked.len()));
    Ok(OutlierTask {
        normal_class,
        train: train.with_task_id(normal_class as usize),
        test: test_pool.subset(&idx).with_task_id(normal_class as usize),
        flags,
        contamination,
    })
}

/// One row of the per-run metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Task id, or `mean` for an aggregate row.
    pub task_id: String,
    pub model: String,
    pub auc: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub nll_mean: Option<f64>,
    pub kl_mean: Option<f64>,
    pub seed: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "task_id,model,auc,fpr,fnr,precision,nll_mean,kl_mean,seed";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.task_id,
            self.model,
            f(self.auc),
            f(self.fpr),
            f(self.fnr),
            f(self.precision),
            f(self.nll_mean),
            f(self.kl_mean),
            self.seed
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::VaeArch;

    #[test]
    fn auc_hand_cases() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[2.0; 5], &[false, true, false, true, true]).unwrap(), 0.5);
        assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let s = [0.1, 0.2, 0.9, 0.5];
        let f = [false, false, true, true];
        let lo = threshold_metrics(&s, &f, 0.0).unwrap();
        assert_eq!((lo.fpr, lo.fnr, lo.precision), (1.0, 0.0, Some(0.5)));
        let hi = threshold_metrics(&s, &f, 1.0).unwrap();
        assert_eq!((hi.fpr, hi.fnr, hi.precision), (0.0, 1.0, None));
        // 2×2 case: one of each error type
        let m = threshold_metrics(&[0.3, 0.7, 0.2, 0.8], &[false, false, true, true], 0.5).unwrap();
        assert_eq!((m.fpr, m.fnr, m.precision), (0.5, 0.5, Some(0.5)));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0).unwrap(), 9.5);
        assert_eq!(percentile(&v, 0.0).unwrap(), 0.0);
        assert_eq!(percentile(&[3.0], 50.0).unwrap(), 3.0);
    }

    #[test]
    fn outlier_count_ratio() {
        assert_eq!(outlier_count_for(1000, 0.05), 53);
        assert_eq!(outlier_count_for(1000, 0.0), 0);
    }

    #[test]
    fn zero_theta_has_zero_kl() {
        let vae = TaskVae::new(VaeArch::new(3, 2, 2));
        let theta = vae.zero_theta::<f64>();
        let data = TaskDataset::new(0, vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]], vec![0, 0]).unwrap();
        assert_eq!(posterior_kl_metric(&vae, &theta, &data).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_is_one_log_ratio() {
        let vae = TaskVae::new(VaeArch::new(3, 4, 2));
        let theta = vae.init_theta::<f64>(&mut RngState::new(1), None);
        let x = [1.0, 0.0, 1.0];
        let nll = is_nll(&vae, &theta, &x, 1, &mut RngState::new(5)).unwrap();
        let lw = is_log_weights(&vae, &theta, &x, 1, &mut RngState::new(5)).unwrap();
        assert_eq!(nll, -lw[0]);
    }
}
