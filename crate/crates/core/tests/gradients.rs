mod common;

use common::relative_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siv_core::augmentation::{differentiable_augment, ImageAugParams, SampleAug};
use siv_core::autograd::Tape;
use siv_core::data::build_image_pyramid;
use siv_core::discriminator::Branches;
use siv_core::generator::{sample_latent_seeded, Generator, GeneratorConfig};
use siv_core::losses::{
    discriminator_adversarial, diversity_regularization, diversity_regularization_var, EnabledParts,
};
use siv_core::nn::{Binder, Module};
use siv_core::{Discriminator, DiscriminatorConfig, Tensor};

const H: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn generator_parameters_match_central_differences() {
    let cfg = GeneratorConfig {
        noise_h: 2,
        noise_w: 2,
        num_blocks: 2,
        channel_schedule: vec![4, 4, 4],
        n_multiscale_outputs: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Generator::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let z = sample_latent_seeded::<f64>(2, 2, &cfg).unwrap();

    let tape = Tape::new();
    let ctx = Binder::trainable(&tape);
    let out = g.forward(&ctx, tape.constant(z.values.clone()));
    let grads = ctx.gradients(&tape.backward(out.final_image.mean()));

    let objective = |g: &Generator<f64>| g.generate(&z).unwrap().final_image.mean_f64();
    let names: Vec<String> = g.params().iter().map(|p| p.name.clone()).collect();
    assert!(!names.is_empty());
    for (pi, name) in names.iter().enumerate() {
        let len = g.params()[pi].value.len();
        let mut numeric = Vec::with_capacity(len);
        for k in 0..len {
            let orig = g.params()[pi].value.data()[k];
            g.params_mut()[pi].value.data_mut()[k] = orig + H;
            let up = objective(&g);
            g.params_mut()[pi].value.data_mut()[k] = orig - H;
            let down = objective(&g);
            g.params_mut()[pi].value.data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let analytic = grads[name].data().to_vec();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn diversity_term_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = [[2, 3, 4, 4], [2, 2, 3, 5], [2, 4, 2, 2]];
    let feats: Vec<Tensor<f64>> = shapes.iter().map(|&s| random_tensor(&mut rng, s)).collect();

    let tape = Tape::new();
    let vars: Vec<_> = feats.iter().map(|f| tape.param(f.clone())).collect();
    let dr = diversity_regularization_var(&vars, &[(0, 1)]);
    let grads = tape.backward(dr);

    let value = |feats: &[Tensor<f64>]| {
        let a: Vec<_> = feats.iter().map(|f| f.select_batch(&[0])).collect();
        let b: Vec<_> = feats.iter().map(|f| f.select_batch(&[1])).collect();
        diversity_regularization(&a, &b).unwrap()
    };
    assert!((dr.item() - value(&feats)).abs() < 1e-12);
    for (l, var) in vars.iter().enumerate() {
        let g = grads.get(*var).unwrap();
        // Derivatives with respect to the first latent's features only.
        let half = feats[l].sample_len();
        let mut numeric = Vec::new();
        for k in 0..half {
            let mut f = feats.clone();
            f[l].data_mut()[k] += H;
            let up = value(&f);
            f[l].data_mut()[k] -= 2.0 * H;
            numeric.push((up - value(&f)) / (2.0 * H));
        }
        let err = relative_error(&g.data()[..half], &numeric);
        assert!(err < 1e-3, "layer {l}: relative error {err:e}");
    }
}

#[test]
fn rotation_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, [1, 2, 9, 11]);
    let params = ImageAugParams {
        reference_size: (9, 11),
        samples: vec![SampleAug {
            rotate_deg: Some(10.0),
            ..Default::default()
        }],
    };
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = differentiable_augment(v, &params).mean();
    let analytic = tape.backward(out).get(v).unwrap().data().to_vec();

    let value = |x: &Tensor<f64>| {
        let t = Tape::new();
        differentiable_augment(t.constant(x.clone()), &params)
            .mean()
            .item()
    };
    let mut numeric = Vec::new();
    for k in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[k] += H;
        let up = value(&p);
        p.data_mut()[k] -= 2.0 * H;
        numeric.push((up - value(&p)) / (2.0 * H));
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err:e}");
    assert!(analytic.iter().any(|&g| g != 0.0));
}

#[test]
fn discriminator_loss_reaches_the_coarsest_generated_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DiscriminatorConfig::new(3, 1.0 / 8.0);
    let d = Discriminator::<f64>::new(cfg, &mut rng).unwrap();
    let real = build_image_pyramid(&random_tensor(&mut rng, [2, 3, 32, 48]), 3).unwrap();
    let fake = build_image_pyramid(&random_tensor(&mut rng, [2, 3, 32, 48]), 3).unwrap();

    let tape = Tape::new();
    let ctx = Binder::frozen(&tape);
    let real_v: Vec<_> = real.iter().map(|t| tape.constant(t.clone())).collect();
    let fake_v: Vec<_> = fake.iter().map(|t| tape.param(t.clone())).collect();
    let r = d.forward(&ctx, &real_v, None, Branches::default());
    let f = d.forward(&ctx, &fake_v, None, Branches::default());
    let loss = discriminator_adversarial(
        &r.decision,
        &f.decision,
        EnabledParts::default(),
        tape.constant(Tensor::scalar(0.0)),
    )
    .unwrap();
    let grads = tape.backward(loss.total);
    for (k, v) in fake_v.iter().enumerate() {
        let g = grads.get(*v).expect("every scale is on the graph");
        assert!(
            g.data().iter().any(|&x| x != 0.0),
            "scale {k} receives no gradient"
        );
    }
}
