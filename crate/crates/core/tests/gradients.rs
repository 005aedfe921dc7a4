//! Finite-difference checks of composite networks.

use smallvae::nn::{grad_check_params, ArchParams, LatentConfig, ParamStore, VaeModel};
use smallvae::rng::SeededRng;
use smallvae::tensor::Tensor;
use smallvae::vae::{elbo_loss, Noise, ReconLikelihood};

fn toy_arch() -> ArchParams {
    ArchParams {
        image_size: 8,
        stem_channels: 4,
        growth_rate: 2,
        block_layers: 2,
        transition_channels: 4,
        ..ArchParams::default()
    }
}

/// Zero biases put dead-ReLU pixels exactly on the kink; move off it.
fn jitter_biases(store: &mut ParamStore<f64>, rng: &mut SeededRng) {
    for (_, p) in store.iter_mut() {
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
    }
}

#[test]
fn toy_vae_elbo_matches_finite_differences() {
    let latent = LatentConfig::new(4, 2);
    let mut model = VaeModel::<f64>::new(latent, toy_arch(), 11).unwrap();
    let mut rng = SeededRng::from_seed(3);
    jitter_biases(&mut model.params, &mut rng);
    let x: Tensor<f64> = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.uniform());
    let eps: Tensor<f64> = rng.normal_tensor(&[2, 4, 2, 2]);
    let report = grad_check_params(&model.params, 1e-5, |_, g, p| {
        let xv = g.constant(x.clone()).unwrap();
        let elbo = elbo_loss(g, &model, p, xv, Noise::Fixed(eps.clone()), ReconLikelihood::Gaussian)?;
        Ok(elbo.total)
    })
    .unwrap();
    println!("{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
