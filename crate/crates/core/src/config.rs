//! Run configuration file (TOML). Every key has a default; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::augmentation::{FeatureAugConfig, ImageAugConfig};
use crate::data::SourceKind;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{ensure, Error, Result};
use crate::evaluation::EvalConfig;
use crate::generator::{select_noise_shape, GeneratorConfig};
use crate::losses::{DrConfig, DrSpace};
use crate::training::{Ablations, TrainSetup, TrainingConfig};

pub const IMAGE_ITERATIONS: usize = 100_000;
pub const VIDEO_ITERATIONS: usize = 300_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `"auto"` or `"HxW"`.
    pub noise_shape: String,
    /// 0 picks the block count from the source size.
    pub num_blocks: usize,
    /// Scales the generator and discriminator channel schedules.
    pub width_multiplier: f64,
    /// Images emitted by the generator and consumed by the discriminator.
    pub n_multiscale: usize,
    pub n_low_level: usize,
    pub n_branch: usize,
    pub layout_channels: usize,
    pub injection_divisor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DiscriminatorConfig::default();
        Self {
            noise_shape: "auto".into(),
            num_blocks: 0,
            width_multiplier: 1.0,
            n_multiscale: 3,
            n_low_level: d.n_low_level,
            n_branch: d.n_branch,
            layout_channels: d.layout_channels,
            injection_divisor: d.injection_divisor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// 0 means 100k for an image and 300k for a video.
    pub iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub lambda_dr: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            iterations: 0,
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            lambda_dr: DrConfig::default().lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub p_fa: f64,
    pub rect_area: [f64; 2],
    pub rect_aspect: [f64; 2],
    pub mix_fraction: [f64; 2],
    pub drop_fraction: [f64; 2],
    pub p_da: f64,
    pub max_translate: f64,
    pub crop_scale: [f64; 2],
    pub max_rotate_deg: f64,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        let f = FeatureAugConfig::default();
        let d = ImageAugConfig::default();
        let arr = |(a, b): (f64, f64)| [a, b];
        Self {
            p_fa: f.p_fa,
            rect_area: arr(f.rect_area),
            rect_aspect: arr(f.rect_aspect),
            mix_fraction: arr(f.mix_fraction),
            drop_fraction: arr(f.drop_fraction),
            p_da: d.p_da,
            max_translate: d.max_translate,
            crop_scale: arr(d.crop_scale),
            max_rotate_deg: d.max_rotate_deg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_generated: usize,
    pub pool_per_frame: usize,
    pub pool_seed: u64,
    /// `"toy"` or `"files:<weights path>"`.
    pub plugins: String,
    /// Seed of the toy extractor weights.
    pub toy_seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            n_generated: e.n_generated,
            pool_per_frame: e.pool_per_frame,
            pool_seed: e.pool_seed,
            plugins: "toy".into(),
            toy_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    /// `"auto"` (a directory is a video, a file an image), `"single_image"` or
    /// `"single_video"`.
    pub kind: String,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            kind: "auto".into(),
        }
    }
}

fn parse_source_kind(s: &str) -> Result<Option<SourceKind>> {
    match s {
        "auto" => Ok(None),
        "single_image" => Ok(Some(SourceKind::SingleImage)),
        "single_video" => Ok(Some(SourceKind::SingleVideo)),
        other => Err(Error::Config(format!(
            "source.kind must be \"auto\", \"single_image\" or \"single_video\", got {other:?}"
        ))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: SourceSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub ablations: Ablations,
    pub augmentation: AugmentationSection,
    pub evaluation: EvaluationSection,
}

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Published setting of the method.
    Reported,
    /// Chosen for this implementation where the method leaves it open.
    Chosen,
}

impl Origin {
    pub fn label(self) -> &'static str {
        match self {
            Origin::Reported => "reported",
            Origin::Chosen => "chosen",
        }
    }
}

const REPORTED: &[&str] = &[
    "model.n_multiscale",
    "model.n_low_level",
    "model.n_branch",
    "model.layout_channels",
    "training.iterations",
    "training.lr_g",
    "training.lr_d",
    "training.adam_beta1",
    "training.adam_beta2",
    "training.batch_size",
    "training.lambda_dr",
    "augmentation.p_fa",
    "augmentation.p_da",
    "evaluation.n_generated",
];

pub fn key_origin(key: &str) -> Origin {
    if REPORTED.contains(&key) {
        Origin::Reported
    } else {
        Origin::Chosen
    }
}

/// One documented configuration key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyInfo {
    pub key: String,
    pub default: String,
    pub origin: Origin,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<KeyInfo>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(KeyInfo {
            key: prefix.to_string(),
            default: other.to_string(),
            origin: key_origin(prefix),
        }),
    }
}

/// Every key with its default, sorted by key.
pub fn documented_keys() -> Vec<KeyInfo> {
    let v = toml::Value::try_from(RunConfig::default()).expect("default config is serializable");
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    out
}

/// Help text listing each key, its default and its origin label.
pub fn keys_help() -> String {
    let keys = documented_keys();
    let width = keys.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (default, origin):\n");
    for k in keys {
        s.push_str(&format!(
            "  {:width$}  {}  [{}]\n",
            k.key,
            k.default,
            k.origin.label()
        ));
    }
    s
}

fn parse_noise_shape(s: &str) -> Result<Option<(usize, usize)>> {
    if s == "auto" {
        return Ok(None);
    }
    let parsed = s
        .split_once('x')
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some((h, w)) if h >= 1 && w >= 1 => Ok(Some((h, w))),
        _ => Err(Error::Config(format!(
            "model.noise_shape must be \"auto\" or \"HxW\", got {s:?}"
        ))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        parse_noise_shape(&cfg.model.noise_shape)?;
        parse_source_kind(&cfg.source.kind)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML text; parsing it back gives an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Desk-scale preset: noise 2x3, 5 blocks, widths divided by 8, 500 iterations.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.model.noise_shape = "2x3".into();
        c.model.num_blocks = 5;
        c.model.width_multiplier = 0.125;
        c.training.iterations = 500;
        c.training.checkpoint_every = 250;
        c
    }

    fn noise_and_blocks(&self, native: (usize, usize)) -> Result<(usize, usize, usize)> {
        let (th, tw) = native;
        match (
            parse_noise_shape(&self.model.noise_shape)?,
            self.model.num_blocks,
        ) {
            (Some((h, w)), b) if b > 0 => Ok((h, w, b)),
            (None, 0) => {
                let s = select_noise_shape(th, tw)?;
                Ok((s.noise_h, s.noise_w, s.num_blocks))
            }
            (Some((h, w)), _) => {
                let b = (1..=10).rev().find(|&b| h << b <= th).unwrap_or(1);
                Ok((h, w, b))
            }
            (None, b) => {
                let f = (1usize << b) as f64;
                Ok((
                    ((th as f64 / f).round() as usize).max(1),
                    ((tw as f64 / f).round() as usize).max(1),
                    b,
                ))
            }
        }
    }

    /// Full training setup for a source of `native` size.
    pub fn resolve(&self, native: (usize, usize), kind: SourceKind) -> Result<TrainSetup> {
        let m = &self.model;
        ensure!(
            m.width_multiplier > 0.0 && m.width_multiplier.is_finite(),
            Config,
            "model.width_multiplier must be positive"
        );
        let (nh, nw, b) = self.noise_and_blocks(native)?;
        let mut generator = GeneratorConfig::new(nh, nw, b, m.width_multiplier);
        generator.n_multiscale_outputs = m.n_multiscale;
        let mut discriminator = DiscriminatorConfig::new(m.n_low_level, m.width_multiplier);
        discriminator.n_branch = m.n_branch;
        discriminator.layout_channels = m.layout_channels;
        discriminator.injection_divisor = m.injection_divisor;
        discriminator.n_multiscale_inputs = m.n_multiscale;

        let t = &self.training;
        let iterations = match (t.iterations, kind) {
            (0, SourceKind::SingleImage) => IMAGE_ITERATIONS,
            (0, SourceKind::SingleVideo) => VIDEO_ITERATIONS,
            (n, _) => n,
        };
        let training = TrainingConfig {
            iterations,
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            ablations: self.ablations,
        };
        let a = &self.augmentation;
        let tup = |[x, y]: [f64; 2]| (x, y);
        let setup = TrainSetup {
            generator,
            discriminator,
            training,
            dr: DrConfig {
                lambda: t.lambda_dr,
                space: DrSpace::Feature,
            },
            fa: FeatureAugConfig {
                p_fa: a.p_fa,
                rect_area: tup(a.rect_area),
                rect_aspect: tup(a.rect_aspect),
                mix_fraction: tup(a.mix_fraction),
                drop_fraction: tup(a.drop_fraction),
            },
            da: self.image_aug(),
        };
        setup.validate()?;
        Ok(setup)
    }

    pub fn image_aug(&self) -> ImageAugConfig {
        let a = &self.augmentation;
        ImageAugConfig {
            p_da: a.p_da,
            max_translate: a.max_translate,
            crop_scale: (a.crop_scale[0], a.crop_scale[1]),
            max_rotate_deg: a.max_rotate_deg,
        }
    }

    /// Source kind for `path`, honouring an explicit `source.kind`.
    pub fn source_kind(&self, path: &std::path::Path) -> Result<SourceKind> {
        Ok(
            parse_source_kind(&self.source.kind)?.unwrap_or(if path.is_dir() {
                SourceKind::SingleVideo
            } else {
                SourceKind::SingleImage
            }),
        )
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.evaluation;
        EvalConfig {
            n_generated: e.n_generated,
            pool_per_frame: e.pool_per_frame,
            pool_seed: e.pool_seed,
        }
    }
}
