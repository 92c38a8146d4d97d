//! Two-branch discriminator.
//!
//! A low-level trunk of downsampling residual blocks (with lower-resolution images
//! concatenated in at the later blocks) produces a shared map `F`. The content branch
//! judges `F` after global average pooling, the layout branch after a 1x1 projection to
//! very few channels. Every block has its own 1x1 logit head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply_content_aug, apply_layout_aug, FeatureAugPlan};
use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::generator::scaled_schedule;
use crate::nn::{Binder, Conv2d, Module, LEAKY_SLOPE};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TRUNK_SCHEDULE: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub n_low_level: usize,
    pub n_branch: usize,
    pub layout_channels: usize,
    /// Output width of each trunk block.
    pub channel_schedule: Vec<usize>,
    pub n_multiscale_inputs: usize,
    /// Injected images are projected to `incoming width / injection_divisor` channels.
    pub injection_divisor: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::new(3, 1.0)
    }
}

impl DiscriminatorConfig {
    pub fn new(n_low_level: usize, width_mult: f64) -> Self {
        Self {
            n_low_level,
            n_branch: 4,
            layout_channels: 1,
            channel_schedule: scaled_schedule(
                &DEFAULT_TRUNK_SCHEDULE,
                n_low_level.max(1) - 1,
                width_mult,
            ),
            n_multiscale_inputs: n_low_level.min(3),
            injection_divisor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_low_level >= 1,
            Config,
            "n_low_level must be at least 1"
        );
        ensure!(self.n_branch >= 1, Config, "n_branch must be at least 1");
        ensure!(
            self.layout_channels >= 1,
            Config,
            "layout_channels must be at least 1"
        );
        ensure!(
            self.channel_schedule.len() == self.n_low_level,
            Config,
            "discriminator channel schedule needs {} entries, got {}",
            self.n_low_level,
            self.channel_schedule.len()
        );
        ensure!(
            self.channel_schedule.iter().all(|&c| c >= 1),
            Config,
            "channel widths must be positive"
        );
        ensure!(
            (1..=self.n_low_level).contains(&self.n_multiscale_inputs),
            Config,
            "n_multiscale_inputs must lie in 1..={}",
            self.n_low_level
        );
        ensure!(
            self.injection_divisor >= 1,
            Config,
            "injection_divisor must be at least 1"
        );
        Ok(())
    }

    /// Shared-map size `(H, W, C)` for images of `image_size`.
    pub fn branch_grid(&self, image_size: (usize, usize)) -> (usize, usize, usize) {
        let f = 1 << self.n_low_level;
        (
            image_size.0 / f,
            image_size.1 / f,
            *self.channel_schedule.last().expect("validated schedule"),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Shared,
    Content,
    Layout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub role: FeatureRole,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn shared(values: Tensor<T>) -> Self {
        Self {
            values,
            role: FeatureRole::Shared,
        }
    }
}

/// Per-channel spatial mean of a shared map.
pub fn squeeze_content<T: Scalar>(f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    ensure!(
        f.role == FeatureRole::Shared,
        Argument,
        "squeeze_content expects a shared map, got {:?}",
        f.role
    );
    let tape = Tape::new();
    let out = tape.constant(f.values.clone()).global_avg_pool();
    Ok(FeatureMap {
        values: (*out.value()).clone(),
        role: FeatureRole::Content,
    })
}

/// 1x1 projection of a shared map to the layout channels.
pub fn squeeze_layout<T: Scalar>(f: &FeatureMap<T>, proj: &Conv2d<T>) -> Result<FeatureMap<T>> {
    ensure!(
        f.role == FeatureRole::Shared,
        Argument,
        "squeeze_layout expects a shared map, got {:?}",
        f.role
    );
    ensure!(proj.kernel == 1, Argument, "layout projection must be 1x1");
    ensure!(
        proj.in_channels() == f.values.channels(),
        Argument,
        "projection expects {} channels, map has {}",
        proj.in_channels(),
        f.values.channels()
    );
    let tape = Tape::new();
    let ctx = Binder::frozen(&tape);
    let out = proj.forward(&ctx, tape.constant(f.values.clone()));
    Ok(FeatureMap {
        values: (*out.value()).clone(),
        role: FeatureRole::Layout,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    LowLevel,
    Content,
    Layout,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::LowLevel, Part::Content, Part::Layout];

    pub fn name(self) -> &'static str {
        match self {
            Part::LowLevel => "low_level",
            Part::Content => "content",
            Part::Layout => "layout",
        }
    }
}

/// One-channel logit maps of every block, grouped by part.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorDecision<L> {
    pub low_level: Vec<L>,
    pub content: Vec<L>,
    pub layout: Vec<L>,
}

impl<L> DiscriminatorDecision<L> {
    pub fn empty() -> Self {
        Self {
            low_level: Vec::new(),
            content: Vec::new(),
            layout: Vec::new(),
        }
    }

    pub fn part(&self, part: Part) -> &[L] {
        match part {
            Part::LowLevel => &self.low_level,
            Part::Content => &self.content,
            Part::Layout => &self.layout,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.low_level.len() + self.content.len() + self.layout.len()
    }
}

impl<T: Scalar> DiscriminatorDecision<Var<'_, T>> {
    pub fn values(&self) -> DiscriminatorDecision<Tensor<T>> {
        let get = |v: &Vec<Var<'_, T>>| v.iter().map(|x| (*x.value()).clone()).collect();
        DiscriminatorDecision {
            low_level: get(&self.low_level),
            content: get(&self.content),
            layout: get(&self.layout),
        }
    }
}

/// Which branches a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub content: bool,
    pub layout: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            content: true,
            layout: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pooling {
    Always,
    /// Only while both spatial sides are at least 2.
    WhilePossible,
    Never,
}

#[derive(Clone, Debug, PartialEq)]
struct DBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
    pre_activation: bool,
    pooling: Pooling,
}

impl<T: Scalar> DBlock<T> {
    fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        pre_activation: bool,
        pooling: Pooling,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, kernel, true, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, kernel, true, rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, true, rng)),
            pre_activation,
            pooling,
        }
    }

    fn forward<'t>(&self, ctx: &Binder<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let h = if self.pre_activation {
            x.leaky_relu(slope)
        } else {
            x
        };
        let h = self.conv1.forward(ctx, h).leaky_relu(slope);
        let mut h = self.conv2.forward(ctx, h);
        let mut s = match &self.skip {
            Some(c) => c.forward(ctx, x),
            None => x,
        };
        let [_, _, hh, ww] = x.shape();
        let pool = match self.pooling {
            Pooling::Always => true,
            Pooling::WhilePossible => hh >= 2 && ww >= 2,
            Pooling::Never => false,
        };
        if pool {
            h = h.avg_pool2();
            s = s.avg_pool2();
        }
        h.add(s)
    }

    fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v = vec![&self.conv1, &self.conv2];
        v.extend(self.skip.as_ref());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v = vec![&mut self.conv1, &mut self.conv2];
        v.extend(self.skip.as_mut());
        v
    }
}

/// Everything a training step needs from one discriminator pass.
pub struct DiscriminatorPass<'t, T: Scalar> {
    pub decision: DiscriminatorDecision<Var<'t, T>>,
    /// Shared map `F` produced by the trunk.
    pub shared: Var<'t, T>,
    /// Output of the last content block, if the branch ran.
    pub content: Option<Var<'t, T>>,
    /// Output of the last layout block, if the branch ran.
    pub layout: Option<Var<'t, T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    trunk: Vec<DBlock<T>>,
    /// Image projections for trunk blocks `1..n_multiscale_inputs` (0-based).
    injections: Vec<Conv2d<T>>,
    trunk_heads: Vec<Conv2d<T>>,
    content_blocks: Vec<DBlock<T>>,
    content_heads: Vec<Conv2d<T>>,
    layout_proj: Conv2d<T>,
    layout_blocks: Vec<DBlock<T>>,
    layout_heads: Vec<Conv2d<T>>,
}

impl<T: Scalar> Discriminator<T> {
    /// Both branches are always built, so parameter initialization does not depend on
    /// which branches are later enabled.
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let sched = &config.channel_schedule;
        let mut trunk = Vec::new();
        let mut injections = Vec::new();
        let mut trunk_heads = Vec::new();
        let mut cin = 3;
        for (b, &cout) in sched.iter().enumerate() {
            let mut block_in = cin;
            if b > 0 && b < config.n_multiscale_inputs {
                let inj = (cin / config.injection_divisor).max(1);
                injections.push(Conv2d::new(
                    &format!("disc.trunk{b}.inject"),
                    3,
                    inj,
                    1,
                    true,
                    rng,
                ));
                block_in += inj;
            }
            trunk.push(DBlock::new(
                &format!("disc.trunk{b}"),
                block_in,
                cout,
                3,
                b > 0,
                Pooling::Always,
                rng,
            ));
            trunk_heads.push(Conv2d::new(
                &format!("disc.trunk{b}.head"),
                cout,
                1,
                1,
                true,
                rng,
            ));
            cin = cout;
        }
        let c = cin;
        let mut content_blocks = Vec::new();
        let mut content_heads = Vec::new();
        for k in 0..config.n_branch {
            content_blocks.push(DBlock::new(
                &format!("disc.content{k}"),
                c,
                c,
                1,
                true,
                Pooling::Never,
                rng,
            ));
            content_heads.push(Conv2d::new(
                &format!("disc.content{k}.head"),
                c,
                1,
                1,
                true,
                rng,
            ));
        }
        let lc = config.layout_channels;
        let layout_proj = Conv2d::new("disc.layout_proj", c, lc, 1, true, rng);
        let mut layout_blocks = Vec::new();
        let mut layout_heads = Vec::new();
        for k in 0..config.n_branch {
            layout_blocks.push(DBlock::new(
                &format!("disc.layout{k}"),
                lc,
                lc,
                3,
                true,
                Pooling::WhilePossible,
                rng,
            ));
            layout_heads.push(Conv2d::new(
                &format!("disc.layout{k}.head"),
                lc,
                1,
                1,
                true,
                rng,
            ));
        }
        Ok(Self {
            config,
            trunk,
            injections,
            trunk_heads,
            content_blocks,
            content_heads,
            layout_proj,
            layout_blocks,
            layout_heads,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn num_heads(&self) -> usize {
        self.trunk_heads.len() + self.content_heads.len() + self.layout_heads.len()
    }

    pub fn layout_projection(&self) -> &Conv2d<T> {
        &self.layout_proj
    }

    /// Checks that `sizes` (coarsest first) form a x2 chain of the configured length.
    pub fn check_pyramid(&self, sizes: &[[usize; 4]]) -> Result<()> {
        let n = self.config.n_multiscale_inputs;
        ensure!(
            sizes.len() == n,
            Argument,
            "expected a pyramid of {n} images, got {}",
            sizes.len()
        );
        let finest = sizes[n - 1];
        let f = 1 << self.config.n_low_level;
        ensure!(
            finest[1] == 3 && finest[2].is_multiple_of(f) && finest[3].is_multiple_of(f),
            Argument,
            "finest image {finest:?} must have 3 channels and sides divisible by {f}"
        );
        for (i, s) in sizes.iter().enumerate() {
            let d = 1 << (n - 1 - i);
            ensure!(
                *s == [finest[0], 3, finest[2] / d, finest[3] / d],
                Argument,
                "pyramid level {i} has shape {s:?}, expected {:?}",
                [finest[0], 3, finest[2] / d, finest[3] / d]
            );
        }
        Ok(())
    }

    /// Runs the trunk on a pyramid (coarsest first) and returns the shared map and the
    /// trunk logits.
    pub fn trunk<'t>(
        &self,
        ctx: &Binder<'t, T>,
        pyramid: &[Var<'t, T>],
    ) -> (Var<'t, T>, Vec<Var<'t, T>>) {
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let n = pyramid.len();
        let mut h = pyramid[n - 1];
        let mut logits = Vec::with_capacity(self.trunk.len());
        for (b, block) in self.trunk.iter().enumerate() {
            if b > 0 && b < self.config.n_multiscale_inputs {
                let img = pyramid[n - 1 - b];
                h = Var::concat_channels(&[h, self.injections[b - 1].forward(ctx, img)]);
            }
            h = block.forward(ctx, h);
            logits.push(self.trunk_heads[b].forward(ctx, h.leaky_relu(slope)));
        }
        (h, logits)
    }

    /// Content branch from a content map of shape `(batch, C, 1, 1)`; returns logits and
    /// the last block output.
    pub fn content_branch<'t>(
        &self,
        ctx: &Binder<'t, T>,
        f_content: Var<'t, T>,
    ) -> (Vec<Var<'t, T>>, Var<'t, T>) {
        run_branch(ctx, &self.content_blocks, &self.content_heads, f_content)
    }

    /// Layout branch from a layout map of shape `(batch, layout_channels, H, W)`.
    pub fn layout_branch<'t>(
        &self,
        ctx: &Binder<'t, T>,
        f_layout: Var<'t, T>,
    ) -> (Vec<Var<'t, T>>, Var<'t, T>) {
        run_branch(ctx, &self.layout_blocks, &self.layout_heads, f_layout)
    }

    /// Full pass. `fa` is applied to the branch inputs when present and enabled.
    pub fn forward<'t>(
        &self,
        ctx: &Binder<'t, T>,
        pyramid: &[Var<'t, T>],
        fa: Option<&FeatureAugPlan>,
        branches: Branches,
    ) -> DiscriminatorPass<'t, T> {
        let (shared, low_level) = self.trunk(ctx, pyramid);
        let mut decision = DiscriminatorDecision {
            low_level,
            ..DiscriminatorDecision::empty()
        };
        let (mut content, mut layout) = (None, None);
        if branches.content {
            let mut f = shared.global_avg_pool();
            if let Some(plan) = fa {
                f = apply_content_aug(f, plan);
            }
            let (logits, feat) = self.content_branch(ctx, f);
            decision.content = logits;
            content = Some(feat);
        }
        if branches.layout {
            let mut f = self.layout_proj.forward(ctx, shared);
            if let Some(plan) = fa {
                f = apply_layout_aug(f, plan);
            }
            let (logits, feat) = self.layout_branch(ctx, f);
            decision.layout = logits;
            layout = Some(feat);
        }
        DiscriminatorPass {
            decision,
            shared,
            content,
            layout,
        }
    }

    fn forward_tensors(
        &self,
        pyramid: &[Tensor<T>],
    ) -> Result<(DiscriminatorDecision<Tensor<T>>, Tensor<T>, Tensor<T>)> {
        self.check_pyramid(&pyramid.iter().map(Tensor::shape).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let ctx = Binder::frozen(&tape);
        let levels: Vec<_> = pyramid.iter().map(|t| tape.constant(t.clone())).collect();
        let pass = self.forward(&ctx, &levels, None, Branches::default());
        let content = (*pass.content.expect("content branch enabled").value()).clone();
        let layout = (*pass.layout.expect("layout branch enabled").value()).clone();
        Ok((pass.decision.values(), content, layout))
    }

    /// Inference pass with both branches and no feature augmentation.
    pub fn discriminate(&self, pyramid: &[Tensor<T>]) -> Result<DiscriminatorDecision<Tensor<T>>> {
        Ok(self.forward_tensors(pyramid)?.0)
    }

    /// Branch input map followed by every block output of the content or layout branch.
    pub fn branch_features(&self, pyramid: &[Tensor<T>], branch: Part) -> Result<Vec<Tensor<T>>> {
        ensure!(
            branch != Part::LowLevel,
            Argument,
            "branch must be content or layout"
        );
        self.check_pyramid(&pyramid.iter().map(Tensor::shape).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let ctx = Binder::frozen(&tape);
        let levels: Vec<_> = pyramid.iter().map(|t| tape.constant(t.clone())).collect();
        let (shared, _) = self.trunk(&ctx, &levels);
        let (mut h, blocks) = match branch {
            Part::Content => (shared.global_avg_pool(), &self.content_blocks),
            _ => (self.layout_proj.forward(&ctx, shared), &self.layout_blocks),
        };
        let mut out = vec![(*h.value()).clone()];
        for b in blocks {
            h = b.forward(&ctx, h);
            out.push((*h.value()).clone());
        }
        Ok(out)
    }

    /// Euclidean distance between the concatenated branch features of two inputs.
    pub fn branch_embedding_distance(
        &self,
        x1: &[Tensor<T>],
        x2: &[Tensor<T>],
        branch: Part,
    ) -> Result<f64> {
        let (a, b) = (
            self.branch_features(x1, branch)?,
            self.branch_features(x2, branch)?,
        );
        let mut sq = 0.0;
        for (p, q) in a.iter().zip(&b) {
            ensure!(
                p.shape() == q.shape(),
                Argument,
                "inputs give features of different shapes"
            );
            sq += p
                .data()
                .iter()
                .zip(q.data())
                .map(|(&u, &v)| (u.as_f64() - v.as_f64()).powi(2))
                .sum::<f64>();
        }
        Ok(sq.sqrt())
    }
}

fn run_branch<'t, T: Scalar>(
    ctx: &Binder<'t, T>,
    blocks: &[DBlock<T>],
    heads: &[Conv2d<T>],
    x: Var<'t, T>,
) -> (Vec<Var<'t, T>>, Var<'t, T>) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    let mut h = x;
    let mut logits = Vec::with_capacity(blocks.len());
    for (block, head) in blocks.iter().zip(heads) {
        h = block.forward(ctx, h);
        logits.push(head.forward(ctx, h.leaky_relu(slope)));
    }
    (logits, h)
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v = Vec::new();
        for b in &self.trunk {
            v.extend(b.convs());
        }
        v.extend(self.injections.iter());
        v.extend(self.trunk_heads.iter());
        for b in &self.content_blocks {
            v.extend(b.convs());
        }
        v.extend(self.content_heads.iter());
        v.push(&self.layout_proj);
        for b in &self.layout_blocks {
            v.extend(b.convs());
        }
        v.extend(self.layout_heads.iter());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v = Vec::new();
        for b in &mut self.trunk {
            v.extend(b.convs_mut());
        }
        v.extend(self.injections.iter_mut());
        v.extend(self.trunk_heads.iter_mut());
        for b in &mut self.content_blocks {
            v.extend(b.convs_mut());
        }
        v.extend(self.content_heads.iter_mut());
        v.push(&mut self.layout_proj);
        for b in &mut self.layout_blocks {
            v.extend(b.convs_mut());
        }
        v.extend(self.layout_heads.iter_mut());
        v
    }
}
