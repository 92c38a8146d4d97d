//! Multi-scale residual generator.
//!
//! Spatial noise `(batch, 64, h0, w0)` goes through `B` residual blocks, each
//! doubling the resolution, so the output is `(h0 * 2^B, w0 * 2^B)`. The last
//! few blocks also emit RGB images that feed the low-level discriminator, and
//! every block exposes a tanh feature map for the diversity regularizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{standard_normal, Binder, Conv2d, Module, LEAKY_SLOPE};
use crate::tensor::{Scalar, Tensor};

/// Channel count of the latent noise tensor.
pub const LATENT_CHANNELS: usize = 64;

/// Full-width channel schedule, widest first. Truncated or extended (by repeating
/// the last entry) to `num_blocks + 1` entries.
pub const DEFAULT_CHANNEL_SCHEDULE: [usize; 7] = [512, 512, 256, 256, 128, 64, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_h: usize,
    pub noise_w: usize,
    pub num_blocks: usize,
    /// Channels entering each block, plus the output width of the last one.
    pub channel_schedule: Vec<usize>,
    pub n_multiscale_outputs: usize,
}

/// Default schedule for `num_blocks`, scaled by `width_mult` (minimum 1 channel).
pub fn scaled_schedule(base: &[usize], num_blocks: usize, width_mult: f64) -> Vec<usize> {
    let last = *base.last().expect("non-empty schedule");
    (0..=num_blocks)
        .map(|i| {
            let c = base.get(i).copied().unwrap_or(last) as f64 * width_mult;
            (c.round() as usize).max(1)
        })
        .collect()
}

impl GeneratorConfig {
    pub fn new(noise_h: usize, noise_w: usize, num_blocks: usize, width_mult: f64) -> Self {
        Self {
            noise_h,
            noise_w,
            num_blocks,
            channel_schedule: scaled_schedule(&DEFAULT_CHANNEL_SCHEDULE, num_blocks, width_mult),
            n_multiscale_outputs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_h >= 1 && self.noise_w >= 1,
            Config,
            "noise shape must be positive"
        );
        ensure!(
            self.num_blocks >= 1,
            Config,
            "generator needs at least one block"
        );
        ensure!(
            self.channel_schedule.len() == self.num_blocks + 1,
            Config,
            "channel_schedule has {} entries, expected num_blocks + 1 = {}",
            self.channel_schedule.len(),
            self.num_blocks + 1
        );
        ensure!(
            self.channel_schedule.iter().all(|&c| c >= 1),
            Config,
            "channel widths must be positive"
        );
        ensure!(
            self.channel_schedule.windows(2).all(|w| w[0] >= w[1]),
            Config,
            "channel_schedule must be non-increasing: {:?}",
            self.channel_schedule
        );
        ensure!(
            self.n_multiscale_outputs >= 1 && self.n_multiscale_outputs <= self.num_blocks,
            Config,
            "n_multiscale_outputs = {} must lie in [1, num_blocks = {}]",
            self.n_multiscale_outputs,
            self.num_blocks
        );
        Ok(())
    }

    /// `(height, width)` of the final image.
    pub fn output_size(&self) -> (usize, usize) {
        (
            self.noise_h << self.num_blocks,
            self.noise_w << self.num_blocks,
        )
    }

    /// Sizes of all emitted images, coarsest first.
    pub fn pyramid_sizes(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.output_size();
        (0..self.n_multiscale_outputs)
            .rev()
            .map(|k| (h >> k, w >> k))
            .collect()
    }
}

/// Noise resolution and block count chosen to fit a target image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseShape {
    pub noise_h: usize,
    pub noise_w: usize,
    pub num_blocks: usize,
}

/// Brute-force search over `h0, w0 in [2, 8]`, `B in [3, 8]` with
/// `h0 * 2^B <= target_h < h0 * 2^(B+1)`.
///
/// Candidates are ranked by relative area error, then aspect-ratio error, then by
/// how far the noise grid is from 4x4.
pub fn select_noise_shape(target_h: usize, target_w: usize) -> Result<NoiseShape> {
    ensure!(
        target_h >= 32 && target_w >= 32,
        Config,
        "target size {target_h}x{target_w} is below the 32x32 minimum"
    );
    let target_area = (target_h * target_w) as f64;
    let target_aspect = (target_w as f64 / target_h as f64).ln();
    let mut best: Option<((f64, f64, f64), NoiseShape)> = None;
    for num_blocks in 3..=8usize {
        for noise_h in 2..=8usize {
            let h = noise_h << num_blocks;
            if h > target_h || target_h >= 2 * h {
                continue;
            }
            for noise_w in 2..=8usize {
                let w = noise_w << num_blocks;
                let area_err = ((h * w) as f64 - target_area).abs() / target_area;
                let aspect_err = ((w as f64 / h as f64).ln() - target_aspect).abs();
                let noise_err = ((noise_h * noise_w) as f64 / 16.0).ln().abs();
                let key = (area_err, aspect_err, noise_err);
                let shape = NoiseShape {
                    noise_h,
                    noise_w,
                    num_blocks,
                };
                let better = match &best {
                    None => true,
                    Some((k, _)) => key.partial_cmp(k) == Some(std::cmp::Ordering::Less),
                };
                if better {
                    best = Some((key, shape));
                }
            }
        }
    }
    match best {
        Some(((area_err, _, _), shape)) if area_err <= 0.25 => Ok(shape),
        _ => Err(Error::Config(format!(
            "no noise shape fits {target_h}x{target_w} within 25% area error; \
             set model.noise_shape and model.num_blocks explicitly"
        ))),
    }
}

/// Batch of spatial latent codes drawn from N(0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T> {
    pub values: Tensor<T>,
    /// Seed of the generator that produced the batch, when known.
    pub seed: Option<u64>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn batch(&self) -> usize {
        self.values.batch()
    }
}

pub fn sample_latent<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    config: &GeneratorConfig,
) -> Result<LatentBatch<T>> {
    ensure!(batch >= 1, Argument, "latent batch must be at least 1");
    let values = Tensor::from_fn(
        [batch, LATENT_CHANNELS, config.noise_h, config.noise_w],
        |_| standard_normal(rng),
    );
    Ok(LatentBatch { values, seed: None })
}

/// Convenience wrapper that seeds its own stream and records the seed.
pub fn sample_latent_seeded<T: Scalar>(
    seed: u64,
    batch: usize,
    config: &GeneratorConfig,
) -> Result<LatentBatch<T>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut z = sample_latent(&mut rng, batch, config)?;
    z.seed = Some(seed);
    Ok(z)
}

/// Images and regularization features produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<V> {
    /// `(batch, 3, h0 * 2^B, w0 * 2^B)`, values in `[-1, 1]`.
    pub final_image: V,
    /// Lower-resolution images, coarsest first; each is half the size of the next,
    /// and the last is half the size of `final_image`.
    pub intermediate_images: Vec<V>,
    /// One tanh feature map per block.
    pub dr_features: Vec<V>,
}

impl<V: Clone> GeneratorOutput<V> {
    /// Intermediate images followed by the final image, coarsest first.
    pub fn pyramid(&self) -> Vec<V> {
        let mut p = self.intermediate_images.clone();
        p.push(self.final_image.clone());
        p
    }
}

impl<T: Scalar> GeneratorOutput<Var<'_, T>> {
    pub fn values(&self) -> GeneratorOutput<Tensor<T>> {
        GeneratorOutput {
            final_image: (*self.final_image.value()).clone(),
            intermediate_images: self
                .intermediate_images
                .iter()
                .map(|v| (*v.value()).clone())
                .collect(),
            dr_features: self
                .dr_features
                .iter()
                .map(|v| (*v.value()).clone())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GenBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Scalar> GenBlock<T> {
    /// Returns `(block output, final-convolution output)`.
    fn forward<'t>(&self, ctx: &Binder<'t, T>, x: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let h = x.leaky_relu(slope).upsample2();
        let h = self.conv1.forward(ctx, h).leaky_relu(slope);
        let h = self.conv2.forward(ctx, h);
        let up = x.upsample2();
        let shortcut = match &self.skip {
            Some(c) => c.forward(ctx, up),
            None => up,
        };
        (h.add(shortcut), h)
    }
}

/// Residual generator without normalization layers; all convolutions are spectrally normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    input: Conv2d<T>,
    blocks: Vec<GenBlock<T>>,
    /// Image heads for the last `n_multiscale_outputs` blocks, in block order.
    heads: Vec<Conv2d<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let sched = &config.channel_schedule;
        let input = Conv2d::new("gen.input", LATENT_CHANNELS, sched[0], 3, true, rng);
        let blocks = (0..config.num_blocks)
            .map(|k| {
                let (cin, cout) = (sched[k], sched[k + 1]);
                GenBlock {
                    conv1: Conv2d::new(&format!("gen.block{k}.conv1"), cin, cout, 3, true, rng),
                    conv2: Conv2d::new(&format!("gen.block{k}.conv2"), cout, cout, 3, true, rng),
                    skip: (cin != cout).then(|| {
                        Conv2d::new(&format!("gen.block{k}.skip"), cin, cout, 1, true, rng)
                    }),
                }
            })
            .collect();
        let first_head = config.num_blocks - config.n_multiscale_outputs;
        let heads = (first_head..config.num_blocks)
            .map(|k| Conv2d::new(&format!("gen.head{k}"), sched[k + 1], 3, 1, true, rng))
            .collect();
        Ok(Self {
            config,
            input,
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Indices of the blocks carrying an image head.
    pub fn head_blocks(&self) -> Vec<usize> {
        let first = self.config.num_blocks - self.config.n_multiscale_outputs;
        (first..self.config.num_blocks).collect()
    }

    pub fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = z.shape();
        ensure!(
            c == LATENT_CHANNELS && h == self.config.noise_h && w == self.config.noise_w,
            Argument,
            "latent shape {:?} does not match (*, {LATENT_CHANNELS}, {}, {})",
            z.shape(),
            self.config.noise_h,
            self.config.noise_w
        );
        Ok(())
    }

    pub fn forward<'t>(&self, ctx: &Binder<'t, T>, z: Var<'t, T>) -> GeneratorOutput<Var<'t, T>> {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let first_head = self.config.num_blocks - self.config.n_multiscale_outputs;
        let mut h = self.input.forward(ctx, z);
        let mut images = Vec::with_capacity(self.heads.len());
        let mut dr_features = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            let (out, last_conv) = block.forward(ctx, h);
            dr_features.push(last_conv.tanh());
            if k >= first_head {
                let head = &self.heads[k - first_head];
                images.push(head.forward(ctx, out.leaky_relu(slope)).tanh());
            }
            h = out;
        }
        let final_image = images.pop().expect("at least one image head");
        GeneratorOutput {
            final_image,
            intermediate_images: images,
            dr_features,
        }
    }

    /// Inference pass on a private tape.
    pub fn generate(&self, z: &LatentBatch<T>) -> Result<GeneratorOutput<Tensor<T>>> {
        self.check_latent(&z.values)?;
        let tape = Tape::new();
        let ctx = Binder::frozen(&tape);
        let zv = tape.constant(z.values.clone());
        Ok(self.forward(&ctx, zv).values())
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v = vec![&self.input];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            v.extend(b.skip.as_ref());
        }
        v.extend(self.heads.iter());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v = vec![&mut self.input];
        for b in &mut self.blocks {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
            v.extend(b.skip.as_mut());
        }
        v.extend(self.heads.iter_mut());
        v
    }
}
