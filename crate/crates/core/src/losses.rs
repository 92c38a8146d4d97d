//! Adversarial and diversity losses.
//!
//! Each discriminator head gets a BCE loss averaged over batch and positions. Block
//! losses are averaged within each part, and the parts are summed with the low-level
//! part counted twice. Both players use this aggregation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Var};
use crate::discriminator::{DiscriminatorDecision, Part};
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

/// Weight of the low-level part in the adversarial total.
pub const LOW_LEVEL_WEIGHT: f64 = 2.0;

/// Diversity weights explored in the ablation.
pub const LAMBDA_PRESETS: [f64; 4] = [0.0, 0.05, 0.15, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrSpace {
    /// Tanh features of every generator block.
    Feature,
    /// Final images only.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrConfig {
    pub lambda: f64,
    pub space: DrSpace,
}

impl Default for DrConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            space: DrSpace::Feature,
        }
    }
}

impl DrConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda.is_finite() && self.lambda >= 0.0,
            Config,
            "lambda must be finite and >= 0"
        );
        Ok(())
    }
}

/// Parts that contribute to the adversarial total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnabledParts {
    pub low_level: bool,
    pub content: bool,
    pub layout: bool,
}

impl Default for EnabledParts {
    fn default() -> Self {
        Self {
            low_level: true,
            content: true,
            layout: true,
        }
    }
}

impl EnabledParts {
    pub fn contains(&self, part: Part) -> bool {
        match part {
            Part::LowLevel => self.low_level,
            Part::Content => self.content,
            Part::Layout => self.layout,
        }
    }
}

fn part_weight(part: Part) -> f64 {
    if part == Part::LowLevel {
        LOW_LEVEL_WEIGHT
    } else {
        1.0
    }
}

/// Loss values of one training step.
///
/// `per_block`, `per_part` and `adv_total` describe the discriminator update;
/// disabled parts have no blocks and a part loss of 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_block: BTreeMap<Part, Vec<f64>>,
    pub per_part: BTreeMap<Part, f64>,
    pub adv_total: f64,
    pub d_total: f64,
    /// Adversarial term of the generator update.
    pub g_adv: f64,
    pub dr: f64,
    pub g_total: f64,
}

impl LossBreakdown {
    pub fn part(&self, part: Part) -> f64 {
        self.per_part.get(&part).copied().unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv_total,
            self.d_total,
            self.g_adv,
            self.dr,
            self.g_total,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.per_block.values().flatten().all(|v| v.is_finite())
    }
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(t.is_finite(), Numeric, "non-finite values in {what}");
    Ok(())
}

/// Mean BCE of a logit map against an all-real or all-fake target.
pub fn bce_block_loss<T: Scalar>(logits: &Tensor<T>, target_real: bool) -> Result<f64> {
    ensure_finite(logits, "logits")?;
    ensure!(!logits.is_empty(), Argument, "empty logit map");
    let sum: f64 = logits
        .data()
        .iter()
        .map(|&l| {
            let l = l.as_f64();
            if target_real {
                softplus(-l)
            } else {
                softplus(l)
            }
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

pub fn part_loss(block_losses: &[f64]) -> Result<f64> {
    ensure!(
        !block_losses.is_empty(),
        Argument,
        "part loss needs at least one block"
    );
    Ok(block_losses.iter().sum::<f64>() / block_losses.len() as f64)
}

pub fn adversarial_total(content: f64, layout: f64, low_level: f64) -> f64 {
    content + layout + LOW_LEVEL_WEIGHT * low_level
}

/// Builds the per-block / per-part / total view from block losses.
pub fn aggregate(per_block: BTreeMap<Part, Vec<f64>>) -> Result<(BTreeMap<Part, f64>, f64)> {
    let mut per_part = BTreeMap::new();
    for part in Part::ALL {
        let v = match per_block.get(&part) {
            Some(blocks) if !blocks.is_empty() => part_loss(blocks)?,
            _ => 0.0,
        };
        per_part.insert(part, v);
    }
    let total = adversarial_total(
        per_part[&Part::Content],
        per_part[&Part::Layout],
        per_part[&Part::LowLevel],
    );
    Ok((per_part, total))
}

/// Mean over layers of the per-element mean absolute difference.
pub fn diversity_regularization<T: Scalar>(
    feats_1: &[Tensor<T>],
    feats_2: &[Tensor<T>],
) -> Result<f64> {
    ensure!(
        !feats_1.is_empty(),
        Argument,
        "diversity term needs at least one layer"
    );
    ensure!(
        feats_1.len() == feats_2.len(),
        Argument,
        "layer counts differ: {} vs {}",
        feats_1.len(),
        feats_2.len()
    );
    let mut total = 0.0;
    for (a, b) in feats_1.iter().zip(feats_2) {
        ensure!(
            a.shape() == b.shape(),
            Argument,
            "layer shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
            .sum();
        total += s / a.len() as f64;
    }
    Ok(total / feats_1.len() as f64)
}

/// `floor(batch / 2)` disjoint pairs from a random permutation, each ordered `(low, high)`.
pub fn pair_latents<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    ensure!(
        batch >= 2,
        Argument,
        "pairing needs a batch of at least 2, got {batch}"
    );
    let mut idx: Vec<usize> = (0..batch).collect();
    idx.shuffle(rng);
    Ok(idx
        .chunks_exact(2)
        .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
        .collect())
}

fn decision_block_losses<T: Scalar>(
    decision: &DiscriminatorDecision<Tensor<T>>,
    target_real: bool,
    parts: EnabledParts,
) -> Result<BTreeMap<Part, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for part in Part::ALL {
        let blocks = if parts.contains(part) {
            decision
                .part(part)
                .iter()
                .map(|l| bce_block_loss(l, target_real))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        out.insert(part, blocks);
    }
    Ok(out)
}

/// Non-saturating generator loss on fake logits minus `lambda * dr`.
pub fn generator_objective<T: Scalar>(
    decision_fake: &DiscriminatorDecision<Tensor<T>>,
    dr: f64,
    cfg: &DrConfig,
) -> Result<f64> {
    ensure!(
        dr >= 0.0,
        Argument,
        "diversity term must be nonnegative, got {dr}"
    );
    let (_, adv) = aggregate(decision_block_losses(
        decision_fake,
        true,
        EnabledParts::default(),
    )?)?;
    Ok(adv - cfg.lambda * dr)
}

/// Per-block losses of the discriminator: real logits against "real" plus fake logits
/// against "fake".
pub fn discriminator_block_losses<T: Scalar>(
    decision_real: &DiscriminatorDecision<Tensor<T>>,
    decision_fake: &DiscriminatorDecision<Tensor<T>>,
    parts: EnabledParts,
) -> Result<BTreeMap<Part, Vec<f64>>> {
    let real = decision_block_losses(decision_real, true, parts)?;
    let fake = decision_block_losses(decision_fake, false, parts)?;
    let mut out = BTreeMap::new();
    for part in Part::ALL {
        let (r, f) = (&real[&part], &fake[&part]);
        ensure!(
            r.len() == f.len(),
            Argument,
            "{} part has {} real and {} fake blocks",
            part.name(),
            r.len(),
            f.len()
        );
        out.insert(part, r.iter().zip(f).map(|(a, b)| a + b).collect());
    }
    Ok(out)
}

pub fn discriminator_objective<T: Scalar>(
    decision_real: &DiscriminatorDecision<Tensor<T>>,
    decision_fake: &DiscriminatorDecision<Tensor<T>>,
) -> Result<f64> {
    Ok(aggregate(discriminator_block_losses(
        decision_real,
        decision_fake,
        EnabledParts::default(),
    )?)?
    .1)
}

/// Adversarial loss on the tape together with its per-block values.
pub struct AdversarialLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub per_block: BTreeMap<Part, Vec<f64>>,
    pub per_part: BTreeMap<Part, f64>,
    pub value: f64,
}

fn adversarial_from_terms<'t, T: Scalar>(
    terms: BTreeMap<Part, Vec<Var<'t, T>>>,
    zero: Var<'t, T>,
) -> Result<AdversarialLoss<'t, T>> {
    let mut weighted = Vec::new();
    let mut per_block = BTreeMap::new();
    for (part, blocks) in &terms {
        let w = part_weight(*part) / blocks.len().max(1) as f64;
        for b in blocks {
            weighted.push((*b, T::from_f64_lossy(w)));
        }
        per_block.insert(*part, blocks.iter().map(|b| b.item().as_f64()).collect());
    }
    let total = if weighted.is_empty() {
        zero
    } else {
        Var::weighted_sum(&weighted)
    };
    let (per_part, value) = aggregate(per_block.clone())?;
    ensure!(value.is_finite(), Numeric, "adversarial loss is not finite");
    Ok(AdversarialLoss {
        total,
        per_block,
        per_part,
        value,
    })
}

/// Discriminator adversarial loss from decisions on real and fake inputs.
pub fn discriminator_adversarial<'t, T: Scalar>(
    real: &DiscriminatorDecision<Var<'t, T>>,
    fake: &DiscriminatorDecision<Var<'t, T>>,
    parts: EnabledParts,
    zero: Var<'t, T>,
) -> Result<AdversarialLoss<'t, T>> {
    let mut terms = BTreeMap::new();
    for part in Part::ALL {
        let (r, f) = (real.part(part), fake.part(part));
        ensure!(
            r.len() == f.len(),
            Argument,
            "{} part has {} real and {} fake blocks",
            part.name(),
            r.len(),
            f.len()
        );
        let blocks = if parts.contains(part) {
            r.iter()
                .zip(f)
                .map(|(a, b)| a.bce_with_logits(true).add(b.bce_with_logits(false)))
                .collect()
        } else {
            Vec::new()
        };
        terms.insert(part, blocks);
    }
    adversarial_from_terms(terms, zero)
}

/// Non-saturating generator adversarial loss from a decision on fake inputs.
pub fn generator_adversarial<'t, T: Scalar>(
    fake: &DiscriminatorDecision<Var<'t, T>>,
    parts: EnabledParts,
    zero: Var<'t, T>,
) -> Result<AdversarialLoss<'t, T>> {
    let mut terms = BTreeMap::new();
    for part in Part::ALL {
        let blocks = if parts.contains(part) {
            fake.part(part)
                .iter()
                .map(|l| l.bce_with_logits(true))
                .collect()
        } else {
            Vec::new()
        };
        terms.insert(part, blocks);
    }
    adversarial_from_terms(terms, zero)
}

/// Diversity term over latent pairs on the tape. `feats` hold one tensor per layer
/// with the whole batch; pairs index into the batch.
pub fn diversity_regularization_var<'t, T: Scalar>(
    feats: &[Var<'t, T>],
    pairs: &[(usize, usize)],
) -> Var<'t, T> {
    assert!(
        !feats.is_empty() && !pairs.is_empty(),
        "diversity term needs layers and pairs"
    );
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let w = T::from_f64_lossy(1.0 / feats.len() as f64);
    let layers: Vec<(Var<'t, T>, T)> = feats
        .iter()
        .map(|f| {
            (
                f.select_batch(&left)
                    .sub(f.select_batch(&right))
                    .abs()
                    .mean(),
                w,
            )
        })
        .collect();
    Var::weighted_sum(&layers)
}
