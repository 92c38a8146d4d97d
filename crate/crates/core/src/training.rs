//! One-stage adversarial training.
//!
//! Each iteration performs one discriminator update followed by one generator update.
//! Randomness comes from independent ChaCha streams derived from the run seed, so
//! switching a component off never shifts the random draws of another component.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{
    augment_pyramid, sample_feature_aug_plan, sample_image_aug, FeatureAugConfig, FeatureAugPlan,
    ImageAugConfig,
};
use crate::autograd::{Tape, Var};
use crate::data::{build_image_pyramid, make_batch, save_grid, BatchSpec, TrainingSource};
use crate::discriminator::{Branches, Discriminator, DiscriminatorConfig, Part};
use crate::error::{ensure, Error, Result};
use crate::generator::{
    sample_latent, sample_latent_seeded, Generator, GeneratorConfig, LatentBatch,
};
use crate::losses::{
    discriminator_adversarial, diversity_regularization_var, generator_adversarial, pair_latents,
    DrConfig, DrSpace, EnabledParts, LossBreakdown,
};
use crate::nn::{Binder, Module, Param};
use crate::tensor::Tensor;

/// Components that can be switched off for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_content_branch: bool,
    pub no_layout_branch: bool,
    pub no_fa: bool,
    pub no_dr: bool,
    pub no_low_level_loss: bool,
    pub dr_image_space: bool,
}

impl Ablations {
    pub fn branches(&self) -> Branches {
        Branches {
            content: !self.no_content_branch,
            layout: !self.no_layout_branch,
        }
    }

    pub fn parts(&self) -> EnabledParts {
        EnabledParts {
            low_level: !self.no_low_level_loss,
            content: !self.no_content_branch,
            layout: !self.no_layout_branch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint and sample-grid interval; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub ablations: Ablations,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            lr_g: 2e-4,
            lr_d: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 5,
            seed: 0,
            checkpoint_every: 5_000,
            ablations: Ablations::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.iterations >= 1,
            Config,
            "iterations must be at least 1"
        );
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("adam_eps", self.adam_eps),
        ] {
            ensure!(v.is_finite() && v > 0.0, Config, "{name} must be positive");
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            ensure!((0.0..1.0).contains(&v), Config, "{name} must lie in [0, 1)");
        }
        ensure!(
            self.batch_size >= 2,
            Config,
            "batch_size must be at least 2"
        );
        Ok(())
    }
}

/// Fully resolved configuration of a training run; stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
    pub dr: DrConfig,
    pub fa: FeatureAugConfig,
    pub da: ImageAugConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.training.validate()?;
        self.dr.validate()?;
        self.fa.validate()?;
        self.da.validate()?;
        ensure!(
            self.generator.n_multiscale_outputs == self.discriminator.n_multiscale_inputs,
            Config,
            "generator emits {} images per sample but the discriminator takes {}",
            self.generator.n_multiscale_outputs,
            self.discriminator.n_multiscale_inputs
        );
        let (h, w) = self.image_size();
        let f = 1 << self.discriminator.n_low_level;
        ensure!(
            h % f == 0 && w % f == 0,
            Config,
            "output size {h}x{w} must be divisible by {f} for {} trunk blocks",
            self.discriminator.n_low_level
        );
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.generator.output_size()
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.training.batch_size,
            target_size: self.image_size(),
        }
    }

    /// Diversity weight after ablations.
    pub fn lambda(&self) -> f64 {
        if self.training.ablations.no_dr {
            0.0
        } else {
            self.dr.lambda
        }
    }

    pub fn dr_space(&self) -> DrSpace {
        if self.training.ablations.dr_image_space {
            DrSpace::Image
        } else {
            self.dr.space
        }
    }
}

/// Adam with bias correction, one moment pair per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param<f32>>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.t += 1;
        let t = self.t as i32;
        let step =
            (self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t))) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for p in params {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let shape = p.value.shape();
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(shape));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(shape));
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_LATENT: u64 = 1;
pub const STREAM_DA: u64 = 2;
pub const STREAM_FA: u64 = 3;
pub const STREAM_PAIRS: u64 = 4;
pub const STREAM_BATCH: u64 = 5;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random streams consumed during training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStreams {
    pub latent: ChaCha8Rng,
    pub da: ChaCha8Rng,
    pub fa: ChaCha8Rng,
    pub pairs: ChaCha8Rng,
    pub batch: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            latent: stream(seed, STREAM_LATENT),
            da: stream(seed, STREAM_DA),
            fa: stream(seed, STREAM_FA),
            pairs: stream(seed, STREAM_PAIRS),
            batch: stream(seed, STREAM_BATCH),
        }
    }

    pub fn named(&self) -> [(&'static str, &ChaCha8Rng); 5] {
        [
            ("latent", &self.latent),
            ("da", &self.da),
            ("fa", &self.fa),
            ("pairs", &self.pairs),
            ("batch", &self.batch),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut ChaCha8Rng); 5] {
        [
            ("latent", &mut self.latent),
            ("da", &mut self.da),
            ("fa", &mut self.fa),
            ("pairs", &mut self.pairs),
            ("batch", &mut self.batch),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Real,
    Fake,
}

/// Record of which batches received which augmentation during a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub fa_plan: FeatureAugPlan,
    pub fa_applied: Vec<BatchKind>,
    pub da_applied: Vec<BatchKind>,
    pub real_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub trace: StepTrace,
}

/// What a generator update saw; lets tests re-evaluate the same latent pairs.
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub latent: LatentBatch<f32>,
    pub pairs: Vec<(usize, usize)>,
    pub g_adv: f64,
    pub dr: f64,
    pub g_total: f64,
}

/// Models, optimizers and random state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub setup: TrainSetup,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed iterations.
    pub iteration: usize,
    pub rngs: RngStreams,
}

struct DiscriminatorStep {
    per_block: BTreeMap<Part, Vec<f64>>,
    per_part: BTreeMap<Part, f64>,
    total: f64,
}

fn numeric_error(what: &str, losses: &impl Serialize) -> Error {
    let dump = serde_json::to_string(losses).unwrap_or_else(|_| "<unserializable>".into());
    Error::Numeric(format!("{what} is not finite; loss breakdown: {dump}"))
}

impl TrainState {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.validate()?;
        let mut init = stream(setup.training.seed, STREAM_INIT);
        let generator = Generator::new(setup.generator.clone(), &mut init)?;
        let discriminator = Discriminator::new(setup.discriminator.clone(), &mut init)?;
        let t = &setup.training;
        let opt_g = Adam::new(t.lr_g, t.adam_beta1, t.adam_beta2, t.adam_eps);
        let opt_d = Adam::new(t.lr_d, t.adam_beta1, t.adam_beta2, t.adam_eps);
        let rngs = RngStreams::new(t.seed);
        Ok(Self {
            setup,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iteration: 0,
            rngs,
        })
    }

    fn check_source(&self, source: &TrainingSource) -> Result<()> {
        let (h, w) = self.setup.image_size();
        ensure!(!source.is_empty(), Data, "empty training source");
        ensure!(
            source.images[0].shape() == [1, 3, h, w],
            Data,
            "source frames are {:?}; resize them to {h}x{w} first",
            source.images[0].shape()
        );
        Ok(())
    }

    /// One discriminator update then one generator update. `source` frames must already
    /// have the generator's output size.
    pub fn train_step(&mut self, source: &TrainingSource) -> Result<StepOutput> {
        self.check_source(source)?;
        let mut trace = StepTrace {
            fa_plan: FeatureAugPlan::none(),
            fa_applied: Vec::new(),
            da_applied: Vec::new(),
            real_indices: Vec::new(),
        };
        let d = self.discriminator_step(source, &mut trace)?;
        let g = self.generator_step(true)?;
        trace.da_applied.push(BatchKind::Fake);
        let losses = LossBreakdown {
            per_block: d.per_block,
            per_part: d.per_part,
            adv_total: d.total,
            d_total: d.total,
            g_adv: g.g_adv,
            dr: g.dr,
            g_total: g.g_total,
        };
        if !losses.is_finite() {
            return Err(numeric_error("training loss", &losses));
        }
        self.iteration += 1;
        Ok(StepOutput { losses, trace })
    }

    fn discriminator_step(
        &mut self,
        source: &TrainingSource,
        trace: &mut StepTrace,
    ) -> Result<DiscriminatorStep> {
        let setup = &self.setup;
        let n = setup.training.batch_size;
        let size = setup.image_size();
        let ablations = setup.training.ablations;
        self.discriminator.power_iterate(1);

        let (real, indices) = make_batch(source, &setup.batch_spec(), &mut self.rngs.batch)?;
        trace.real_indices = indices;
        let real_pyramid = build_image_pyramid(&real, setup.discriminator.n_multiscale_inputs)?;
        let z = sample_latent::<f32, _>(&mut self.rngs.latent, n, &setup.generator)?;
        let da_real = sample_image_aug(&mut self.rngs.da, n, size, &setup.da);
        let da_fake = sample_image_aug(&mut self.rngs.da, n, size, &setup.da);
        let fa = if ablations.no_fa {
            FeatureAugPlan::none()
        } else {
            sample_feature_aug_plan(
                &mut self.rngs.fa,
                n,
                setup.discriminator.branch_grid(size),
                &setup.fa,
            )?
        };

        let tape = Tape::new();
        let g_ctx = Binder::frozen(&tape);
        let d_ctx = Binder::trainable(&tape);
        let fake = self.generator.forward(&g_ctx, tape.constant(z.values));
        let real_levels: Vec<Var<'_, f32>> =
            real_pyramid.into_iter().map(|t| tape.constant(t)).collect();
        let real_aug = augment_pyramid(&real_levels, &da_real);
        let fake_aug = augment_pyramid(&fake.pyramid(), &da_fake);
        trace.da_applied.extend([BatchKind::Real, BatchKind::Fake]);

        let branches = ablations.branches();
        let real_pass = self
            .discriminator
            .forward(&d_ctx, &real_aug, Some(&fa), branches);
        if fa.apply {
            trace.fa_applied.push(BatchKind::Real);
        }
        let fake_pass = self
            .discriminator
            .forward(&d_ctx, &fake_aug, None, branches);
        trace.fa_plan = fa;

        let zero = tape.constant(Tensor::scalar(0.0));
        let adv = discriminator_adversarial(
            &real_pass.decision,
            &fake_pass.decision,
            ablations.parts(),
            zero,
        )?;
        if !adv.value.is_finite() {
            return Err(numeric_error("discriminator loss", &adv.per_block));
        }
        let grads = d_ctx.gradients(&tape.backward(adv.total));
        self.opt_d.step(self.discriminator.params_mut(), &grads);
        Ok(DiscriminatorStep {
            per_block: adv.per_block,
            per_part: adv.per_part,
            total: adv.value,
        })
    }

    /// One generator update. With `adversarial` false only the diversity term drives it.
    pub fn generator_step(&mut self, adversarial: bool) -> Result<GeneratorStep> {
        let setup = &self.setup;
        let n = setup.training.batch_size;
        let ablations = setup.training.ablations;
        self.generator.power_iterate(1);

        let z = sample_latent::<f32, _>(&mut self.rngs.latent, n, &setup.generator)?;
        let da_fake = sample_image_aug(&mut self.rngs.da, n, setup.image_size(), &setup.da);
        let pairs = pair_latents(n, &mut self.rngs.pairs)?;

        let tape = Tape::new();
        let g_ctx = Binder::trainable(&tape);
        let d_ctx = Binder::frozen(&tape);
        let out = self
            .generator
            .forward(&g_ctx, tape.constant(z.values.clone()));
        let zero = tape.constant(Tensor::scalar(0.0));

        let (adv_var, g_adv) = if adversarial {
            let aug = augment_pyramid(&out.pyramid(), &da_fake);
            let pass = self
                .discriminator
                .forward(&d_ctx, &aug, None, ablations.branches());
            let adv = generator_adversarial(&pass.decision, ablations.parts(), zero)?;
            (adv.total, adv.value)
        } else {
            (zero, 0.0)
        };
        let lambda = setup.lambda();
        let (dr_var, dr) = if ablations.no_dr {
            (zero, 0.0)
        } else {
            let feats = match setup.dr_space() {
                DrSpace::Feature => out.dr_features.clone(),
                DrSpace::Image => vec![out.final_image],
            };
            let v = diversity_regularization_var(&feats, &pairs);
            (v, v.item() as f64)
        };
        let g_total = g_adv - lambda * dr;
        if !g_total.is_finite() {
            let dump = BTreeMap::from([("g_adv", g_adv), ("dr", dr)]);
            return Err(numeric_error("generator loss", &dump));
        }
        let total = Var::weighted_sum(&[(adv_var, 1.0), (dr_var, -lambda as f32)]);
        let grads = g_ctx.gradients(&tape.backward(total));
        self.opt_g.step(self.generator.params_mut(), &grads);
        Ok(GeneratorStep {
            latent: z,
            pairs,
            g_adv,
            dr,
            g_total,
        })
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub d_total: f64,
    pub g_total: f64,
    pub d_low: f64,
    pub d_content: f64,
    pub d_layout: f64,
    pub dr: f64,
}

pub const LOG_HEADER: &str = "iter,d_total,g_total,d_low,d_content,d_layout,dr";

impl LogRow {
    pub fn new(iter: usize, l: &LossBreakdown) -> Self {
        Self {
            iter,
            d_total: l.d_total,
            g_total: l.g_total,
            d_low: l.part(Part::LowLevel),
            d_content: l.part(Part::Content),
            d_layout: l.part(Part::Layout),
            dr: l.dr,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.d_total,
            self.g_total,
            self.d_low,
            self.d_content,
            self.d_layout,
            self.dr
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        ensure!(
            f.len() == 7,
            Data,
            "loss log row has {} fields: {line}",
            f.len()
        );
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("bad loss value {s:?}: {e}")))
        };
        Ok(Self {
            iter: f[0]
                .parse()
                .map_err(|e| Error::Data(format!("bad iteration {:?}: {e}", f[0])))?,
            d_total: num(f[1])?,
            g_total: num(f[2])?,
            d_low: num(f[3])?,
            d_content: num(f[4])?,
            d_layout: num(f[5])?,
            dr: num(f[6])?,
        })
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    ensure!(
        lines.next().map(str::trim) == Some(LOG_HEADER),
        Data,
        "loss log header must be {LOG_HEADER}"
    );
    lines
        .filter(|l| !l.trim().is_empty())
        .map(LogRow::from_csv)
        .collect()
}

/// Runs steps until `setup.training.iterations` iterations are complete, calling
/// `hook` after each one.
pub fn train(
    state: &mut TrainState,
    source: &TrainingSource,
    mut hook: impl FnMut(&TrainState, &LogRow) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let source = source.resized(state.setup.image_size());
    let mut rows = Vec::new();
    while state.iteration < state.setup.training.iterations {
        let out = state.train_step(&source)?;
        let row = LogRow::new(state.iteration, &out.losses);
        hook(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub const GRID_SEED: u64 = 0x5eed;
pub const GRID_COLS: usize = 4;
pub const GRID_ROWS: usize = 2;

/// Samples a fixed-latent grid from the current generator.
pub fn write_sample_grid(generator: &Generator<f32>, path: &Path) -> Result<()> {
    let z = sample_latent_seeded::<f32>(GRID_SEED, GRID_ROWS * GRID_COLS, generator.config())?;
    let images = generator.generate(&z)?.final_image;
    save_grid(&images, GRID_COLS, path)
}

/// Paths used by [`run_training`] inside an output directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.siv")
    }

    pub fn checkpoint(&self, iter: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("iter_{iter:06}.siv"))
    }

    pub fn grid(&self, iter: usize) -> PathBuf {
        self.root
            .join("samples")
            .join(format!("grid_{iter:06}.png"))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains into `out_dir`: the loss log, periodic checkpoints and sample grids, and a
/// final checkpoint. A resumed state keeps the log rows up to its iteration.
pub fn run_training(
    state: &mut TrainState,
    source: &TrainingSource,
    out_dir: &Path,
) -> Result<Vec<LogRow>> {
    let layout = RunLayout::new(out_dir);
    let mut rows = if state.iteration > 0 && layout.loss_log().exists() {
        let text = std::fs::read_to_string(layout.loss_log())
            .map_err(|e| Error::io(layout.loss_log(), e))?;
        parse_log(&text)?
            .into_iter()
            .filter(|r| r.iter <= state.iteration)
            .collect()
    } else {
        Vec::new()
    };
    write_file(&layout.loss_log(), format_log(&rows).as_bytes())?;
    let every = state.setup.training.checkpoint_every;
    let log_path = layout.loss_log();
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let new_rows = train(state, source, |st, row| {
        use std::io::Write;
        writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && row.iter % every == 0 {
            crate::checkpoint::save(st, &layout.checkpoint(row.iter))?;
            write_sample_grid(&st.generator, &layout.grid(row.iter))?;
        }
        Ok(())
    })?;
    rows.extend(new_rows);
    crate::checkpoint::save(state, &layout.final_checkpoint())?;
    write_sample_grid(&state.generator, &layout.grid(state.iteration))?;
    Ok(rows)
}
