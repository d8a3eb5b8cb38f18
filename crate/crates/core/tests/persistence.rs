use std::fs;

use hypervae::error::Error;
use hypervae::mdl::{bits_back_length, bits_back_length_with_noise, vae_two_part_length, DEFAULT_EPS};
use hypervae::{
    load_checkpoint, save_checkpoint, HyperArch, HyperVae, KlEstimate, ModelKind, RngState, TaskVae, VaeArch,
};

fn arch() -> HyperArch {
    HyperArch { target: VaeArch::new(8, 5, 2), enc_hidden: 4, latent: 3, dec_hidden: 9 }
}

fn batch(rng: &mut RngState, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..8).map(|_| f64::from(u8::from(rng.bernoulli(0.4)))).collect()).collect()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let hv = HyperVae::new(arch());
    let g = hv.init_gamma::<f64>(&mut RngState::new(1), None);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(ModelKind::Hyper(arch()), g.values(), &a).unwrap();
    let c = load_checkpoint(&a).unwrap();
    let (_, g2) = c.hyper::<f64>().unwrap();
    save_checkpoint(ModelKind::Hyper(arch()), g2.values(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    for (x, y) in g.values().iter().zip(g2.values()) {
        assert_eq!(*y, f64::from(*x as f32));
    }
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vae = TaskVae::new(arch().target);
    let theta = vae.init_theta::<f32>(&mut RngState::new(2), None);
    let p = dir.path().join("v.ckpt");
    save_checkpoint(ModelKind::Vae(arch().target), theta.values(), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checksum)));
    assert!(save_checkpoint(ModelKind::Vae(arch().target), &theta.values()[1..], &p).is_err());
}

#[test]
fn bits_back_is_negative_k1_objective() {
    let hv = HyperVae::new(arch());
    let mut rng = RngState::new(3);
    for trial in 0..20 {
        let g = hv.init_gamma::<f64>(&mut rng, None);
        let b = batch(&mut rng, 5);
        let noise = hv.draw_noise(b.len(), 1, &mut rng).unwrap();
        let obj = hv.joint_objective_k1(&g, &b, &noise, KlEstimate::ClosedForm, None).unwrap();
        let bb = bits_back_length_with_noise(&hv, &g, &b, std::slice::from_ref(&noise), DEFAULT_EPS).unwrap();
        assert!((bb.total_nats + obj.objective).abs() < 1e-9, "trial {trial}");
        assert!(bb.model_two_part.is_none() && bb.kl_term >= 0.0);
    }
}

#[test]
fn reports_are_finite_and_consistent() {
    let hv = HyperVae::new(arch());
    let mut rng = RngState::new(4);
    let g = hv.init_gamma::<f64>(&mut rng, None);
    let b = batch(&mut rng, 6);
    let r = bits_back_length(&hv, &g, &b, 3, 4, &mut rng).unwrap();
    assert!(r.is_finite());
    assert!((r.total_bits() - r.total_nats / std::f64::consts::LN_2).abs() < 1e-12);

    let vae = TaskVae::new(arch().target);
    let theta = vae.init_theta::<f64>(&mut rng, None);
    let eps: Vec<Vec<f64>> = (0..b.len()).map(|_| rng.normal_vec(2)).collect();
    let two = vae_two_part_length(&vae, &theta, &b, &eps, DEFAULT_EPS).unwrap();
    let model = two.model_two_part.unwrap();
    assert!(model > 0.0);
    assert_eq!(two.total_nats, two.data_given_model + model);
}
