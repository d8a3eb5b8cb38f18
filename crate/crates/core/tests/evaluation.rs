use hypervae::evaluation::{
    build_outlier_task, is_log_weights, is_nll, operating_threshold, outlier_count_for, percentile, roc_auc,
    roc_auc_pairwise, threshold_metrics,
};
use hypervae::rng::RngState;
use hypervae::{TaskDataset, TaskVae, VaeArch};
use proptest::prelude::*;

// Gauss–Hermite nodes and weights for ∫ e^{−t²} f(t) dt, by Newton iteration
// on the orthonormal Hermite recurrence.
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut out = vec![(0.0, 0.0); n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
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

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// One pixel, one hidden unit, one latent. The decoder logit is 1.5 z + 0.5
// for z > −8, so the marginal is a smooth 1-d integral. The encoder sits near
// the quadrature moments of the true posteriors, which keeps the weight variance small.
fn hand_model() -> (TaskVae, hypervae::ThetaVector<f64>) {
    let vae = TaskVae::new(VaeArch::new(1, 1, 1));
    let theta = vae.wrap(vec![1.0, 0.5, 1.065, -1.159, 0.043, -0.369, 1.0, 8.0, 1.5, -11.5]).unwrap();
    (vae, theta)
}

fn exact_marginal(x: f64) -> f64 {
    let p: f64 = gauss_hermite(80)
        .iter()
        .map(|&(t, w)| {
            let z = std::f64::consts::SQRT_2 * t;
            let m = sigmoid(1.5 * z + 0.5);
            w / std::f64::consts::PI.sqrt() * if x > 0.5 { m } else { 1.0 - m }
        })
        .sum();
    p
}

#[test]
fn gauss_hermite_integrates_moments() {
    let gh = gauss_hermite(80);
    let sqpi = std::f64::consts::PI.sqrt();
    assert!((gh.iter().map(|p| p.1).sum::<f64>() - sqpi).abs() < 1e-12);
    assert!((gh.iter().map(|p| p.1 * p.0 * p.0).sum::<f64>() - sqpi / 2.0).abs() < 1e-12);
}

#[test]
fn is_nll_matches_quadrature_on_one_pixel_model() {
    let (vae, theta) = hand_model();
    let mut rng = RngState::new(5);
    for x in [0.0, 1.0] {
        let exact = -exact_marginal(x).ln();
        let est = is_nll(&vae, &theta, &[x], 100_000, &mut rng).unwrap();
        assert!((est - exact).abs() < 1e-3, "x={x}: IS {est} vs quadrature {exact}");
    }
    assert!((exact_marginal(0.0) + exact_marginal(1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn is_nll_is_below_negative_elbo() {
    let (vae, theta) = hand_model();
    let mut rng = RngState::new(8);
    let arch = VaeArch::new(6, 5, 2);
    let other = TaskVae::new(arch);
    let other_theta = other.init_theta::<f64>(&mut RngState::new(2), None);
    let cases: Vec<(&TaskVae, &hypervae::ThetaVector<f64>, Vec<f64>)> = vec![
        (&vae, &theta, vec![0.0]),
        (&vae, &theta, vec![1.0]),
        (&other, &other_theta, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]),
        (&other, &other_theta, vec![0.0; 6]),
    ];
    for (v, th, x) in cases {
        let nll = is_nll(v, th, &x, 4096, &mut rng).unwrap();
        let neg: Vec<f64> = (0..4096).map(|_| -v.elbo(th, &x, &mut rng).unwrap().elbo).collect();
        let mean = neg.iter().sum::<f64>() / neg.len() as f64;
        let var = neg.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (neg.len() - 1) as f64;
        let se = (var / neg.len() as f64).sqrt();
        assert!(nll <= mean + 3.0 * se, "{nll} > {mean} + 3·{se}");
    }
}

#[test]
fn log_weights_are_finite_and_seeded() {
    let (vae, theta) = hand_model();
    let a = is_log_weights(&vae, &theta, &[1.0], 64, &mut RngState::new(3)).unwrap();
    let b = is_log_weights(&vae, &theta, &[1.0], 64, &mut RngState::new(3)).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|w| w.is_finite()));
}

#[test]
fn threshold_and_percentile_cases() {
    assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
    assert_eq!(percentile(&[0.0, 10.0], 95.0).unwrap(), 9.5);
    let train: Vec<f64> = (0..=100).map(f64::from).collect();
    assert_eq!(operating_threshold(&train).unwrap(), 95.0);
    let m = threshold_metrics(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true], 2.5).unwrap();
    assert_eq!((m.fpr, m.fnr, m.precision), (0.0, 0.0, Some(1.0)));
    let m = threshold_metrics(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true], 10.0).unwrap();
    assert_eq!((m.fpr, m.fnr, m.precision), (0.0, 1.0, None));
}

#[test]
fn outlier_task_has_five_percent_contamination() {
    assert_eq!(outlier_count_for(95, 0.05), 5);
    assert_eq!(outlier_count_for(100, 0.05), 5);
    assert_eq!(outlier_count_for(10, 0.0), 0);
    let items: Vec<Vec<f64>> = (0..300).map(|i| vec![(i % 3) as f64]).collect();
    let labels: Vec<u32> = (0..300).map(|i| i % 3).collect();
    let pool = TaskDataset::new(0, items, labels).unwrap();
    let t = build_outlier_task(&pool, &pool, 1, 0.05, &mut RngState::new(4)).unwrap();
    assert_eq!(t.train.len(), 100);
    assert!(t.train.labels().iter().all(|&l| l == 1));
    assert_eq!(t.outlier_count(), 5);
    assert_eq!(t.test.len(), 105);
    for (l, f) in t.test.labels().iter().zip(&t.flags) {
        assert_eq!(*l != 1, *f);
    }
}

proptest! {
    #[test]
    fn auc_matches_pairwise_oracle(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..200),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) * 0.25).collect();
        let flags: Vec<bool> = data.iter().map(|d| d.1).collect();
        let fast = roc_auc(&scores, &flags);
        let slow = roc_auc_pairwise(&scores, &flags);
        match (fast, slow) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one form errored"),
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(
        data in prop::collection::vec((-50.0f64..50.0, any::<bool>()), 2..100),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let flags: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f));
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp()).collect();
        prop_assert_eq!(roc_auc(&scores, &flags).unwrap(), roc_auc(&mapped, &flags).unwrap());
    }
}
