//! Feature augmentation inside the discriminator and differentiable image augmentation.
//!
//! Feature augmentation mixes branch features of two *real* samples: a rectangle of
//! one sample's layout map is pasted onto another's, and content channels are copied
//! across samples or dropped. Image augmentation (translation, crop, rotation,
//! horizontal flip) is applied to real and fake batches alike and is differentiable
//! with respect to the input pixels.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::kernels::AffineCoeffs;
use crate::tensor::{Scalar, Tensor};

/// Axis-aligned rectangle in feature-grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn empty() -> Self {
        Self::new(0, 0, 0, 0)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.top + self.height <= h && self.left + self.width <= w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Sampling ranges for feature augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureAugConfig {
    /// Probability that a discriminator pass on real data is augmented.
    pub p_fa: f64,
    /// Fraction of the layout grid covered by the pasted rectangle.
    pub rect_area: (f64, f64),
    /// Width / height ratio of the pasted rectangle.
    pub rect_aspect: (f64, f64),
    /// Fraction of content channels copied from the partner sample.
    pub mix_fraction: (f64, f64),
    /// Fraction of content channels zeroed.
    pub drop_fraction: (f64, f64),
}

impl Default for FeatureAugConfig {
    fn default() -> Self {
        Self {
            p_fa: 0.4,
            rect_area: (0.1, 0.5),
            rect_aspect: (0.5, 2.0),
            mix_fraction: (0.1, 0.5),
            drop_fraction: (0.05, 0.25),
        }
    }
}

impl FeatureAugConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.p_fa),
            Config,
            "p_fa must lie in [0, 1]"
        );
        for (name, (lo, hi)) in [
            ("rect_area", self.rect_area),
            ("mix_fraction", self.mix_fraction),
            ("drop_fraction", self.drop_fraction),
        ] {
            ensure!(
                0.0 <= lo && lo <= hi && hi <= 1.0,
                Config,
                "{name} must satisfy 0 <= lo <= hi <= 1"
            );
        }
        let (lo, hi) = self.rect_aspect;
        ensure!(
            0.0 < lo && lo <= hi,
            Config,
            "rect_aspect must satisfy 0 < lo <= hi"
        );
        Ok(())
    }
}

/// What happens to one sample of the batch when feature augmentation fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMix {
    /// Sample whose features are mixed in.
    pub partner: usize,
    pub layout_rect: Rect,
    pub mix_channels: Vec<usize>,
    pub drop_channels: Vec<usize>,
}

/// Feature augmentation for one discriminator pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAugPlan {
    pub apply: bool,
    /// One entry per batch sample when `apply` is set; empty otherwise.
    pub samples: Vec<SampleMix>,
}

impl FeatureAugPlan {
    pub fn none() -> Self {
        Self {
            apply: false,
            samples: Vec::new(),
        }
    }
}

fn sample_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &FeatureAugConfig) -> Rect {
    let area = rng.random_range(cfg.rect_area.0..=cfg.rect_area.1) * (h * w) as f64;
    let aspect = rng.random_range(cfg.rect_aspect.0..=cfg.rect_aspect.1);
    let rh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    Rect::new(top, left, rh, rw)
}

fn fraction_count<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64), total: usize) -> usize {
    let f = rng.random_range(range.0..=range.1);
    ((f * total as f64).round() as usize).min(total)
}

/// Draws the gate and, when it fires, per-sample mixing parameters.
///
/// `grid` is `(H, W, C)`: the layout grid size and the content channel count. Each
/// sample `i` is mixed with sample `(i + 1) % batch`.
pub fn sample_feature_aug_plan<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    grid: (usize, usize, usize),
    cfg: &FeatureAugConfig,
) -> Result<FeatureAugPlan> {
    let apply = rng.random_bool(cfg.p_fa.clamp(0.0, 1.0));
    if !apply {
        return Ok(FeatureAugPlan::none());
    }
    ensure!(
        batch >= 2,
        Argument,
        "feature augmentation needs a batch of at least 2, got {batch}"
    );
    let (h, w, c) = grid;
    ensure!(
        h >= 1 && w >= 1 && c >= 1,
        Argument,
        "empty feature grid {grid:?}"
    );
    let samples = (0..batch)
        .map(|i| {
            let layout_rect = sample_rect(rng, h, w, cfg);
            let n_mix = fraction_count(rng, cfg.mix_fraction, c).max(1);
            let mut picked = index::sample(rng, c, c).into_vec();
            let mut mix_channels: Vec<usize> = picked.drain(..n_mix).collect();
            let n_drop = fraction_count(rng, cfg.drop_fraction, c).min(picked.len());
            let mut drop_channels: Vec<usize> = picked.drain(..n_drop).collect();
            mix_channels.sort_unstable();
            drop_channels.sort_unstable();
            SampleMix {
                partner: (i + 1) % batch,
                layout_rect,
                mix_channels,
                drop_channels,
            }
        })
        .collect();
    Ok(FeatureAugPlan {
        apply: true,
        samples,
    })
}

fn rect_mask(shape: [usize; 4], rects: &[Rect]) -> Vec<bool> {
    let [n, c, h, w] = shape;
    let mut mask = Vec::with_capacity(n * c * h * w);
    for rect in rects.iter().take(n) {
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    mask.push(rect.contains(y, x));
                }
            }
        }
    }
    mask
}

fn channel_mask(shape: [usize; 4], sets: &[&[usize]]) -> Vec<bool> {
    let [n, c, h, w] = shape;
    let mut mask = vec![false; n * c * h * w];
    for (b, set) in sets.iter().enumerate().take(n) {
        for &ch in set.iter() {
            let start = (b * c + ch) * h * w;
            mask[start..start + h * w].fill(true);
        }
    }
    mask
}

fn check_channels(channels: &[usize], c: usize) -> Result<()> {
    ensure!(
        channels.iter().all(|&ch| ch < c),
        Argument,
        "channel index out of range for {c} channels: {channels:?}"
    );
    Ok(())
}

/// `f2` inside `rect`, `f1` outside it, for every sample and channel.
pub fn layout_feature_mix<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    rect: Rect,
) -> Result<Tensor<T>> {
    ensure!(
        f1.shape() == f2.shape(),
        Argument,
        "layout maps differ in shape: {:?} vs {:?}",
        f1.shape(),
        f2.shape()
    );
    ensure!(
        rect.fits(f1.height(), f1.width()),
        Argument,
        "rect {rect:?} outside {}x{} grid",
        f1.height(),
        f1.width()
    );
    let mask = rect_mask(f1.shape(), &vec![rect; f1.batch()]);
    Ok(splice(f1, f2, &mask))
}

/// Channels in `channels` taken from `f2`, all others from `f1`.
pub fn content_channel_mix<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    channels: &[usize],
) -> Result<Tensor<T>> {
    ensure!(
        f1.shape() == f2.shape(),
        Argument,
        "content maps differ in shape: {:?} vs {:?}",
        f1.shape(),
        f2.shape()
    );
    check_channels(channels, f1.channels())?;
    let mask = channel_mask(f1.shape(), &vec![channels; f1.batch()]);
    Ok(splice(f1, f2, &mask))
}

/// Listed channels set to zero; surviving channels are not rescaled.
pub fn content_channel_dropout<T: Scalar>(f: &Tensor<T>, channels: &[usize]) -> Result<Tensor<T>> {
    check_channels(channels, f.channels())?;
    let mask = channel_mask(f.shape(), &vec![channels; f.batch()]);
    let mut out = f.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        if m {
            *v = T::zero();
        }
    }
    Ok(out)
}

fn splice<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let mut out = a.clone();
    for ((o, &bv), &m) in out.data_mut().iter_mut().zip(b.data()).zip(mask) {
        if m {
            *o = bv;
        }
    }
    out
}

fn check_plan(plan: &FeatureAugPlan, shape: [usize; 4]) {
    assert_eq!(
        plan.samples.len(),
        shape[0],
        "feature plan sized for a different batch"
    );
}

/// Layout crop-mix of `plan` applied to a layout feature map on the tape.
pub fn apply_layout_aug<'t, T: Scalar>(f: Var<'t, T>, plan: &FeatureAugPlan) -> Var<'t, T> {
    if !plan.apply {
        return f;
    }
    let shape = f.shape();
    check_plan(plan, shape);
    let partners: Vec<usize> = plan.samples.iter().map(|s| s.partner).collect();
    let rects: Vec<Rect> = plan.samples.iter().map(|s| s.layout_rect).collect();
    f.splice(f.select_batch(&partners), rect_mask(shape, &rects))
}

/// Content channel mix and dropout of `plan` applied to a content feature map on the tape.
pub fn apply_content_aug<'t, T: Scalar>(f: Var<'t, T>, plan: &FeatureAugPlan) -> Var<'t, T> {
    if !plan.apply {
        return f;
    }
    let shape = f.shape();
    check_plan(plan, shape);
    let partners: Vec<usize> = plan.samples.iter().map(|s| s.partner).collect();
    let mix: Vec<&[usize]> = plan
        .samples
        .iter()
        .map(|s| s.mix_channels.as_slice())
        .collect();
    let drop: Vec<&[usize]> = plan
        .samples
        .iter()
        .map(|s| s.drop_channels.as_slice())
        .collect();
    let mixed = f.splice(f.select_batch(&partners), channel_mask(shape, &mix));
    mixed.zero_where(channel_mask(shape, &drop))
}

/// Magnitudes and gate probability for differentiable image augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAugConfig {
    /// Per-sample, per-transform probability.
    pub p_da: f64,
    /// Maximum shift as a fraction of the image side.
    pub max_translate: f64,
    /// Range of the crop window side relative to the image.
    pub crop_scale: (f64, f64),
    pub max_rotate_deg: f64,
}

impl Default for ImageAugConfig {
    fn default() -> Self {
        Self {
            p_da: 0.7,
            max_translate: 0.125,
            crop_scale: (0.8, 1.0),
            max_rotate_deg: 15.0,
        }
    }
}

impl ImageAugConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.p_da),
            Config,
            "p_da must lie in [0, 1]"
        );
        ensure!(
            (0.0..=0.5).contains(&self.max_translate),
            Config,
            "max_translate must lie in [0, 0.5]"
        );
        let (lo, hi) = self.crop_scale;
        ensure!(
            0.0 < lo && lo <= hi && hi <= 1.0,
            Config,
            "crop_scale must satisfy 0 < lo <= hi <= 1"
        );
        ensure!(
            (0.0..=180.0).contains(&self.max_rotate_deg),
            Config,
            "max_rotate_deg must lie in [0, 180]"
        );
        Ok(())
    }
}

/// Crop window, resized back to the full frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    /// Window side relative to the image side, in `(0, 1]`.
    pub scale: f64,
    /// Window centre offset from the image centre, in pixels of the reference size.
    pub dx: f64,
    pub dy: f64,
}

/// Transforms for one sample; `None` means the transform is off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleAug {
    /// Shift in pixels of the reference size.
    pub translate: Option<(f64, f64)>,
    pub crop: Option<CropWindow>,
    pub rotate_deg: Option<f64>,
    pub hflip: bool,
}

impl SampleAug {
    fn has_affine(&self) -> bool {
        self.translate.is_some() || self.crop.is_some() || self.rotate_deg.is_some()
    }

    /// Output-pixel to input-pixel map for an `h x w` image; `scale` converts
    /// reference-size pixels to this image's pixels.
    fn affine(&self, h: usize, w: usize, scale: f64) -> AffineCoeffs {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (tx, ty) = self
            .translate
            .map_or((0.0, 0.0), |(x, y)| (x * scale, y * scale));
        let (s, ox, oy) = self
            .crop
            .map_or((1.0, 0.0, 0.0), |c| (c.scale, c.dx * scale, c.dy * scale));
        let theta = self.rotate_deg.unwrap_or(0.0).to_radians();
        let (sin, cos) = theta.sin_cos();
        // input = s * R(-theta) * (p - c - t) + c + o
        let m = [s * cos, s * sin, -s * sin, s * cos];
        [
            m[0],
            m[1],
            -m[0] * (cx + tx) - m[1] * (cy + ty) + cx + ox,
            m[2],
            m[3],
            -m[2] * (cx + tx) - m[3] * (cy + ty) + cy + oy,
        ]
    }
}

/// Per-sample augmentation parameters, defined at a reference resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAugParams {
    pub reference_size: (usize, usize),
    pub samples: Vec<SampleAug>,
}

impl ImageAugParams {
    pub fn identity(batch: usize, reference_size: (usize, usize)) -> Self {
        Self {
            reference_size,
            samples: vec![SampleAug::default(); batch],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.samples.iter().all(|s| !s.has_affine() && !s.hflip)
    }
}

/// Independent draws per sample and per transform, each gated by `p_da`.
pub fn sample_image_aug<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    reference_size: (usize, usize),
    cfg: &ImageAugConfig,
) -> ImageAugParams {
    let (h, w) = (reference_size.0 as f64, reference_size.1 as f64);
    let p = cfg.p_da.clamp(0.0, 1.0);
    let samples = (0..batch)
        .map(|_| {
            let translate = rng.random_bool(p).then(|| {
                let m = cfg.max_translate;
                (rng.random_range(-m..=m) * w, rng.random_range(-m..=m) * h)
            });
            let crop = rng.random_bool(p).then(|| {
                let scale = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
                let (mx, my) = ((1.0 - scale) * w / 2.0, (1.0 - scale) * h / 2.0);
                CropWindow {
                    scale,
                    dx: rng.random_range(-mx..=mx),
                    dy: rng.random_range(-my..=my),
                }
            });
            let rotate_deg = rng
                .random_bool(p)
                .then(|| rng.random_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg));
            let hflip = rng.random_bool(p) && rng.random_bool(0.5);
            SampleAug {
                translate,
                crop,
                rotate_deg,
                hflip,
            }
        })
        .collect();
    ImageAugParams {
        reference_size,
        samples,
    }
}

/// Applies `params` to an image batch on the tape. Transforms that are off for every
/// sample add no operation, so all-off parameters return the input node itself.
pub fn differentiable_augment<'t, T: Scalar>(
    images: Var<'t, T>,
    params: &ImageAugParams,
) -> Var<'t, T> {
    let [n, _, h, w] = images.shape();
    assert_eq!(
        params.samples.len(),
        n,
        "augmentation parameters sized for a different batch"
    );
    let scale = w as f64 / params.reference_size.1 as f64;
    let mut out = images;
    if params.samples.iter().any(SampleAug::has_affine) {
        let coeffs = params
            .samples
            .iter()
            .map(|s| {
                if s.has_affine() {
                    s.affine(h, w, scale)
                } else {
                    [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
                }
            })
            .collect();
        out = out.affine_sample(coeffs);
    }
    if params.samples.iter().any(|s| s.hflip) {
        out = out.flip_width(params.samples.iter().map(|s| s.hflip).collect());
    }
    out
}

/// Same transforms applied consistently to every level of an image pyramid.
pub fn augment_pyramid<'t, T: Scalar>(
    levels: &[Var<'t, T>],
    params: &ImageAugParams,
) -> Vec<Var<'t, T>> {
    levels
        .iter()
        .map(|&l| differentiable_augment(l, params))
        .collect()
}

/// Non-differentiable convenience wrapper around [`differentiable_augment`].
pub fn augment_tensor<T: Scalar>(images: &Tensor<T>, params: &ImageAugParams) -> Tensor<T> {
    let tape = Tape::new();
    let x = tape.constant(images.clone());
    (*differentiable_augment(x, params).value()).clone()
}
