#![allow(dead_code)]

use siv_core::augmentation::{FeatureAugConfig, ImageAugConfig};
use siv_core::losses::DrConfig;
use siv_core::{
    DiscriminatorConfig, GeneratorConfig, SourceKind, Tensor, TrainSetup, TrainingConfig,
    TrainingSource,
};

/// Small enough to train a few steps in well under a second.
pub fn tiny_setup() -> TrainSetup {
    let mut generator = GeneratorConfig::new(2, 2, 3, 1.0 / 64.0);
    generator.n_multiscale_outputs = 2;
    let mut discriminator = DiscriminatorConfig::new(2, 1.0 / 16.0);
    discriminator.n_branch = 2;
    discriminator.n_multiscale_inputs = 2;
    TrainSetup {
        generator,
        discriminator,
        training: TrainingConfig {
            iterations: 10,
            batch_size: 4,
            checkpoint_every: 5,
            ..Default::default()
        },
        dr: DrConfig::default(),
        fa: FeatureAugConfig {
            p_fa: 1.0,
            ..Default::default()
        },
        da: ImageAugConfig::default(),
    }
}

/// Gradient background with a bright disc and a dark bar.
pub fn synthetic_image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let disc = (fy - 0.4).powi(2) + (fx - 0.3).powi(2) < 0.04;
        let bar = (0.7..0.8).contains(&fy) && fx > 0.5;
        let base = match c {
            0 => fx,
            1 => fy,
            _ => 0.5 * (fx + fy),
        } * 1.2
            - 0.6;
        if disc {
            0.9 - 0.2 * c as f32
        } else if bar {
            -0.8
        } else {
            base
        }
    })
}

pub fn image_source(h: usize, w: usize) -> TrainingSource {
    TrainingSource::new(SourceKind::SingleImage, vec![synthetic_image(h, w)]).unwrap()
}

/// `|a - b| / max(|a|, |b|)` with Euclidean norms over whole tensors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

use siv_core::{LossBreakdown, Part, TrainState};

pub fn first_step(setup: &TrainSetup, source: &TrainingSource) -> LossBreakdown {
    let mut st = TrainState::new(setup.clone()).unwrap();
    st.train_step(&source.resized(setup.image_size()))
        .unwrap()
        .losses
}

fn same(name: &str, a: f64, b: f64) -> std::result::Result<(), String> {
    if a == b {
        Ok(())
    } else {
        Err(format!("{name} changed: {a} -> {b}"))
    }
}

fn differs(name: &str, a: f64, b: f64) -> std::result::Result<(), String> {
    if a != b {
        Ok(())
    } else {
        Err(format!("{name} did not change ({a})"))
    }
}

/// Compares the first step of every ablation against the full model. Returns one
/// `(flag, outcome)` per flag. The baseline must use `p_fa = 1` so that the
/// feature-augmentation flag has something to remove.
pub fn ablation_isolation(
    base: &TrainSetup,
    source: &TrainingSource,
) -> Vec<(&'static str, std::result::Result<(), String>)> {
    assert_eq!(base.fa.p_fa, 1.0);
    let full = first_step(base, source);
    let run = |f: &dyn Fn(&mut siv_core::Ablations)| {
        let mut s = base.clone();
        f(&mut s.training.ablations);
        first_step(&s, source)
    };
    let (low, content, layout) = (Part::LowLevel, Part::Content, Part::Layout);
    let check = |checks: Vec<std::result::Result<(), String>>| {
        checks
            .into_iter()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(|_| ())
    };

    let mut out = Vec::new();
    let b = run(&|a| a.no_dr = true);
    out.push((
        "no_dr",
        check(vec![
            same("dr", b.dr, 0.0),
            differs("g_total", full.g_total, b.g_total),
            same("g_total", b.g_total, b.g_adv),
            same("g_adv", full.g_adv, b.g_adv),
            same("d_total", full.d_total, b.d_total),
        ]),
    ));
    let b = run(&|a| a.no_low_level_loss = true);
    out.push((
        "no_low_level_loss",
        check(vec![
            same("low-level part", b.part(low), 0.0),
            differs("d_total", full.d_total, b.d_total),
            same("content part", full.part(content), b.part(content)),
            same("layout part", full.part(layout), b.part(layout)),
            same("dr", full.dr, b.dr),
        ]),
    ));
    let b = run(&|a| a.no_content_branch = true);
    out.push((
        "no_content_branch",
        check(vec![
            same("content part", b.part(content), 0.0),
            same("low-level part", full.part(low), b.part(low)),
            same("layout part", full.part(layout), b.part(layout)),
            same("dr", full.dr, b.dr),
        ]),
    ));
    let b = run(&|a| a.no_layout_branch = true);
    out.push((
        "no_layout_branch",
        check(vec![
            same("layout part", b.part(layout), 0.0),
            same("low-level part", full.part(low), b.part(low)),
            same("content part", full.part(content), b.part(content)),
            same("dr", full.dr, b.dr),
        ]),
    ));
    let b = run(&|a| {
        a.no_content_branch = true;
        a.no_layout_branch = true;
    });
    out.push((
        "no branches",
        check(vec![
            same("content part", b.part(content), 0.0),
            same("layout part", b.part(layout), 0.0),
            same("low-level part", full.part(low), b.part(low)),
            same("adv_total", b.adv_total, 2.0 * b.part(low)),
            same("dr", full.dr, b.dr),
        ]),
    ));
    let b = run(&|a| a.no_fa = true);
    out.push((
        "no_fa",
        check(vec![
            differs("content part", full.part(content), b.part(content)),
            differs("layout part", full.part(layout), b.part(layout)),
            same("low-level part", full.part(low), b.part(low)),
            same("dr", full.dr, b.dr),
        ]),
    ));
    out
}
