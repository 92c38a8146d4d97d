//! Evaluation metrics: single-image Fréchet distance at several feature depths,
//! pairwise perceptual diversity, distance to the nearest augmented training image,
//! and pixel diversity.
//!
//! Feature extractors and perceptual distances are plugins. The built-in
//! [`ConvStackExtractor`] is a fixed convolutional stack whose weights are either drawn
//! from a seed (the toy plugin) or read from a weight archive.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_tensor, sample_image_aug, ImageAugConfig};
use crate::autograd::Tape;
use crate::data::TrainingSource;
use crate::error::{ensure, Error, Result};
use crate::kernels::resize_bilinear;
use crate::nn::{Binder, Conv2d, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Feature depth, named by the spatial stride of the tapped stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    Quarter,
    Eighth,
    Sixteenth,
    Global,
}

impl Depth {
    pub const ALL: [Depth; 4] = [
        Depth::Quarter,
        Depth::Eighth,
        Depth::Sixteenth,
        Depth::Global,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Depth::Quarter => "quarter",
            Depth::Eighth => "eighth",
            Depth::Sixteenth => "sixteenth",
            Depth::Global => "global",
        }
    }
}

/// Features of one image: `locations x channels` per depth.
pub type FeatureSet = BTreeMap<Depth, DMatrix<f64>>;

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn depths(&self) -> Vec<Depth>;
    /// `image` is `(1, 3, H, W)` in `[-1, 1]`.
    fn extract(&self, image: &Tensor<f32>) -> Result<FeatureSet>;
}

/// A distance between images computed from per-image embeddings, so that many pairs
/// can share one embedding pass per image.
pub trait PerceptualDistance {
    fn name(&self) -> &str;
    fn embed(&self, image: &Tensor<f32>) -> Result<Vec<Vec<f64>>>;
    fn embedding_distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64;

    fn dist(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        Ok(self.embedding_distance(&self.embed(a)?, &self.embed(b)?))
    }
}

const SYMMETRY_TOLERANCE: f64 = 1e-8;

fn check_symmetric(c: &DMatrix<f64>, name: &str) -> Result<()> {
    ensure!(c.is_square(), Argument, "{name} is not square");
    let scale = c.amax().max(1.0);
    let asym = (c - c.transpose()).amax();
    ensure!(
        asym <= SYMMETRY_TOLERANCE * scale,
        Argument,
        "{name} is not symmetric (max asymmetry {asym:e})"
    );
    Ok(())
}

fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`, clamped at 0.
///
/// The trace of `(C1 C2)^(1/2)` is taken as the sum of square roots of the eigenvalues
/// of the symmetric matrix `C1^(1/2) C2 C1^(1/2)`, which has the same spectrum.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    ensure!(
        mu2.len() == d,
        Argument,
        "means differ in length: {d} vs {}",
        mu2.len()
    );
    ensure!(
        cov1.shape() == (d, d) && cov2.shape() == (d, d),
        Argument,
        "covariances must be {d}x{d}"
    );
    check_symmetric(cov1, "cov1")?;
    check_symmetric(cov2, "cov2")?;
    let s1 = psd_sqrt(cov1);
    let m = &s1 * cov2 * &s1;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (mu1 - mu2).norm_squared();
    Ok((diff + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Mean and unbiased covariance over rows. Global features (one row) get a zero
/// covariance.
pub fn feature_stats(feats: &DMatrix<f64>, depth: Depth) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, c) = feats.shape();
    ensure!(n >= 1 && c >= 1, Argument, "empty feature array");
    let mu = DVector::from_iterator(c, (0..c).map(|j| feats.column(j).mean()));
    if depth == Depth::Global {
        ensure!(
            n == 1,
            Argument,
            "global features must have one location, got {n}"
        );
        return Ok((mu, DMatrix::zeros(c, c)));
    }
    ensure!(
        n >= 2,
        Argument,
        "{} features need at least 2 locations for a covariance, got {n}",
        depth.name()
    );
    let mut centered = feats.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn stats_per_depth(set: &FeatureSet) -> Result<BTreeMap<Depth, (DVector<f64>, DMatrix<f64>)>> {
    set.iter()
        .map(|(&d, f)| Ok((d, feature_stats(f, d)?)))
        .collect()
}

/// Mean Fréchet distance between the real image's statistics and each generated
/// image's statistics, for every depth the extractor provides.
pub fn sifid_all(
    real_image: &Tensor<f32>,
    generated: &[Tensor<f32>],
    extractor: &dyn FeatureExtractor,
) -> Result<BTreeMap<Depth, f64>> {
    ensure!(
        !generated.is_empty(),
        Argument,
        "sifid needs at least one generated image"
    );
    let real = stats_per_depth(&extractor.extract(real_image)?)?;
    let mut sums: BTreeMap<Depth, f64> = real.keys().map(|&d| (d, 0.0)).collect();
    for img in generated {
        let stats = stats_per_depth(&extractor.extract(img)?)?;
        for (d, (mu_r, cov_r)) in &real {
            let (mu_g, cov_g) = stats
                .get(d)
                .ok_or_else(|| Error::Plugin(format!("extractor gave no {} features", d.name())))?;
            *sums.get_mut(d).expect("same keys") += frechet_distance(mu_r, cov_r, mu_g, cov_g)?;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(d, s)| (d, s / generated.len() as f64))
        .collect())
}

pub fn sifid(
    real_image: &Tensor<f32>,
    generated: &[Tensor<f32>],
    extractor: &dyn FeatureExtractor,
    depth: Depth,
) -> Result<f64> {
    sifid_all(real_image, generated, extractor)?
        .get(&depth)
        .copied()
        .ok_or_else(|| {
            Error::Plugin(format!(
                "extractor {} has no {} depth",
                extractor.name(),
                depth.name()
            ))
        })
}

/// Mean distance over all unordered pairs.
pub fn pairwise_diversity(images: &[Tensor<f32>], metric: &dyn PerceptualDistance) -> Result<f64> {
    ensure!(
        images.len() >= 2,
        Argument,
        "diversity needs at least 2 images, got {}",
        images.len()
    );
    let emb = images
        .iter()
        .map(|i| metric.embed(i))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            total += metric.embedding_distance(&emb[i], &emb[j]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over generated images of the distance to the closest pool image.
pub fn dist_to_train(
    generated: &[Tensor<f32>],
    pool: &[Tensor<f32>],
    metric: &dyn PerceptualDistance,
) -> Result<f64> {
    ensure!(!generated.is_empty(), Argument, "no generated images");
    ensure!(!pool.is_empty(), Argument, "empty training pool");
    let pool_emb = pool
        .iter()
        .map(|i| metric.embed(i))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for g in generated {
        let e = metric.embed(g)?;
        total += pool_emb
            .iter()
            .map(|p| metric.embedding_distance(&e, p))
            .fold(f64::INFINITY, f64::min);
    }
    Ok(total / generated.len() as f64)
}

fn channel_std(image: &Tensor<f32>, c: usize) -> f64 {
    let plane = image.height() * image.width();
    let v = &image.sample(0)[c * plane..(c + 1) * plane];
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
    (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / plane as f64).sqrt()
}

/// Per-pixel, per-channel standard deviation across the generated set, averaged, and
/// divided by the mean per-channel standard deviation of the training image.
pub fn pixel_diversity(generated: &[Tensor<f32>], train_image: &Tensor<f32>) -> Result<f64> {
    ensure!(
        generated.len() >= 2,
        Argument,
        "pixel diversity needs at least 2 images, got {}",
        generated.len()
    );
    let shape = train_image.shape();
    ensure!(
        shape[0] == 1,
        Argument,
        "training image must be a single sample"
    );
    for g in generated {
        ensure!(
            g.shape() == shape,
            Argument,
            "generated image {:?} does not match training image {shape:?}",
            g.shape()
        );
    }
    let train_std = (0..shape[1])
        .map(|c| channel_std(train_image, c))
        .sum::<f64>()
        / shape[1] as f64;
    ensure!(
        train_std > 0.0,
        Argument,
        "training image has zero variance; pixel diversity is undefined"
    );
    let n = generated.len() as f64;
    let len = train_image.len();
    let mut acc = 0.0;
    for i in 0..len {
        let mean = generated.iter().map(|g| g.data()[i] as f64).sum::<f64>() / n;
        let var = generated
            .iter()
            .map(|g| (g.data()[i] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        acc += var.sqrt();
    }
    Ok(acc / len as f64 / train_std)
}

/// Training frames plus `per_frame` augmented copies of each, all at native size.
pub fn augmented_pool(
    source: &TrainingSource,
    per_frame: usize,
    cfg: &ImageAugConfig,
    seed: u64,
) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::new();
    for frame in &source.images {
        pool.push(frame.clone());
        for _ in 0..per_frame {
            let p = sample_image_aug(&mut rng, 1, (frame.height(), frame.width()), cfg);
            pool.push(augment_tensor(frame, &p));
        }
    }
    pool
}

/// Bilinear resize of each generated sample to the training resolution.
pub fn to_native_size(images: &Tensor<f32>, size: (usize, usize)) -> Vec<Tensor<f32>> {
    (0..images.batch())
        .map(|i| {
            let s = images.select_batch(&[i]);
            if (s.height(), s.width()) == size {
                s
            } else {
                resize_bilinear(&s, size.0, size.1)
            }
        })
        .collect()
}

/// Stride-2 convolutional stack used both as feature extractor and perceptual distance.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStackExtractor {
    name: String,
    /// Each stage: 3x3 conv, leaky ReLU, 2x average pool.
    stages: Vec<Conv2d<f64>>,
}

/// Output widths of the four stages; strides 2, 4, 8, 16.
pub const CONV_STACK_WIDTHS: [usize; 4] = [16, 32, 48, 64];

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SIVFEAT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsManifest {
    name: String,
    stages: Vec<([usize; 4], usize)>,
}

impl ConvStackExtractor {
    /// Seeded random-projection stack; deterministic for a given seed.
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = CONV_STACK_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let mut c = Conv2d::new(&format!("stage{i}"), cin, cout, 3, false, &mut rng);
                let std = (1.0 / (cin * 9) as f64).sqrt() * 1.5;
                c.weight.value = Tensor::from_fn(c.weight.value.shape(), |_| {
                    rng.random_range(-1.0..1.0) * std * 3f64.sqrt()
                });
                cin = cout;
                c
            })
            .collect();
        Self {
            name: format!("toy-{seed}"),
            stages,
        }
    }

    fn forward(&self, image: &Tensor<f32>) -> Result<Vec<Tensor<f64>>> {
        let [n, c, h, w] = image.shape();
        ensure!(
            n == 1 && c == 3,
            Plugin,
            "extractor expects one RGB image, got {:?}",
            image.shape()
        );
        ensure!(
            h >= 32 && w >= 32,
            Plugin,
            "extractor needs images of at least 32x32, got {h}x{w}"
        );
        let tape = Tape::new();
        let ctx = Binder::frozen(&tape);
        let mut x = tape.constant(image.cast::<f64>());
        let mut outs = Vec::new();
        for s in &self.stages {
            x = s.forward(&ctx, x).leaky_relu(LEAKY_SLOPE).avg_pool2();
            outs.push((*x.value()).clone());
        }
        Ok(outs)
    }

    /// Serializes weights in the archive format read by [`ConvStackExtractor::load`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = WeightsManifest {
            name: self.name.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| (s.weight.value.shape(), s.bias.value.len()))
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest is serializable");
        let mut bytes = WEIGHTS_MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for s in &self.stages {
            for v in s.weight.value.data().iter().chain(s.bias.value.data()) {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 16 && &bytes[..8] == WEIGHTS_MAGIC,
            Plugin,
            "not a feature-extractor weight archive"
        );
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        ensure!(bytes.len() >= 16 + len, Plugin, "truncated weight manifest");
        let m: WeightsManifest = serde_json::from_slice(&bytes[16..16 + len])
            .map_err(|e| Error::Plugin(format!("weight manifest: {e}")))?;
        ensure!(
            m.stages.len() == CONV_STACK_WIDTHS.len(),
            Plugin,
            "expected {} stages",
            CONV_STACK_WIDTHS.len()
        );
        let mut values = bytes[16 + len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, (shape, nb)) in m.stages.iter().enumerate() {
            ensure!(
                shape[1] == cin && shape[2] == 3 && shape[3] == 3 && *nb == shape[0],
                Plugin,
                "stage {i} has incompatible shape {shape:?}"
            );
            let mut c = Conv2d::<f64>::new(&format!("stage{i}"), cin, shape[0], 3, false, &mut rng);
            let w: Vec<f64> = values.by_ref().take(shape.iter().product()).collect();
            let b: Vec<f64> = values.by_ref().take(*nb).collect();
            ensure!(
                w.len() == shape.iter().product::<usize>() && b.len() == *nb,
                Plugin,
                "weight blob too short"
            );
            c.weight.value = Tensor::from_vec(*shape, w);
            c.bias.value = Tensor::from_vec([*nb, 1, 1, 1], b);
            cin = shape[0];
            stages.push(c);
        }
        ensure!(
            values.next().is_none(),
            Plugin,
            "weight blob has trailing data"
        );
        Ok(Self {
            name: m.name,
            stages,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Plugin(format!(
                "cannot read extractor weights {}: {e}. Provide a weight archive or use the toy plugin",
                path.display()
            ))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn to_locations(t: &Tensor<f64>) -> DMatrix<f64> {
    let [_, c, h, w] = t.shape();
    DMatrix::from_fn(h * w, c, |loc, ch| t.data()[ch * h * w + loc])
}

impl FeatureExtractor for ConvStackExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn depths(&self) -> Vec<Depth> {
        Depth::ALL.to_vec()
    }

    fn extract(&self, image: &Tensor<f32>) -> Result<FeatureSet> {
        let outs = self.forward(image)?;
        let mut set = FeatureSet::new();
        set.insert(Depth::Quarter, to_locations(&outs[1]));
        set.insert(Depth::Eighth, to_locations(&outs[2]));
        set.insert(Depth::Sixteenth, to_locations(&outs[3]));
        let g = to_locations(&outs[3]);
        let mean = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).mean());
        set.insert(Depth::Global, mean);
        Ok(set)
    }
}

impl PerceptualDistance for ConvStackExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    /// Per-location channel vectors of every stage, scaled to unit length.
    fn embed(&self, image: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let outs = self.forward(image)?;
        Ok(outs
            .iter()
            .map(|t| {
                let [_, c, h, w] = t.shape();
                let plane = h * w;
                let mut v = vec![0.0; c * plane];
                for loc in 0..plane {
                    let norm = (0..c)
                        .map(|ch| t.data()[ch * plane + loc].powi(2))
                        .sum::<f64>()
                        .sqrt()
                        + 1e-10;
                    for ch in 0..c {
                        v[loc * c + ch] = t.data()[ch * plane + loc] / norm;
                    }
                }
                v
            })
            .collect())
    }

    /// Sum over stages of the spatial mean of squared differences of unit vectors.
    fn embedding_distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&CONV_STACK_WIDTHS)
            .map(|((x, y), &c)| {
                let locations = (x.len() / c).max(1);
                x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / locations as f64
            })
            .sum()
    }
}

/// Metric values in the order of the report schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sifid: BTreeMap<Depth, f64>,
    pub diversity_lpips: f64,
    pub dist_to_train: f64,
    pub pixel_diversity: f64,
    pub n_generated: usize,
}

impl MetricReport {
    /// Flat `(key, value)` pairs with the report's public key names.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Depth::ALL
            .iter()
            .map(|d| {
                (
                    format!("sifid.{}", d.name()),
                    self.sifid.get(d).copied().unwrap_or(f64::NAN),
                )
            })
            .collect();
        out.push(("diversity_lpips".into(), self.diversity_lpips));
        out.push(("dist_to_train".into(), self.dist_to_train));
        out.push(("pixel_diversity".into(), self.pixel_diversity));
        out.push(("n_generated".into(), self.n_generated as f64));
        out
    }

    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for (k, v) in self.entries() {
            let value = if k == "n_generated" {
                serde_json::json!(self.n_generated)
            } else {
                serde_json::json!(v)
            };
            map.insert(k, value);
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map))
            .expect("report is serializable")
    }

    pub fn to_csv(&self) -> String {
        let e = self.entries();
        let keys: Vec<&str> = e.iter().map(|(k, _)| k.as_str()).collect();
        let vals: Vec<String> = e
            .iter()
            .map(|(k, v)| {
                if k == "n_generated" {
                    self.n_generated.to_string()
                } else {
                    v.to_string()
                }
            })
            .collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }
}

/// Settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_generated: usize,
    /// Augmented copies per training frame in the nearest-neighbour pool.
    pub pool_per_frame: usize,
    pub pool_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_generated: 100,
            pool_per_frame: 16,
            pool_seed: 0,
        }
    }
}

/// Full metric suite for generated images at native resolution. For video sources the
/// SIFID is averaged over frames and pixel diversity uses the middle frame.
pub fn evaluate(
    generated: &[Tensor<f32>],
    source: &TrainingSource,
    extractor: &dyn FeatureExtractor,
    distance: &dyn PerceptualDistance,
    da: &ImageAugConfig,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    ensure!(
        generated.len() >= 2,
        Argument,
        "evaluation needs at least 2 generated images"
    );
    let mut sifid: BTreeMap<Depth, f64> = BTreeMap::new();
    for frame in &source.images {
        for (d, v) in sifid_all(frame, generated, extractor)? {
            *sifid.entry(d).or_insert(0.0) += v / source.len() as f64;
        }
    }
    let pool = augmented_pool(source, cfg.pool_per_frame, da, cfg.pool_seed);
    Ok(MetricReport {
        sifid,
        diversity_lpips: pairwise_diversity(generated, distance)?,
        dist_to_train: dist_to_train(generated, &pool, distance)?,
        pixel_diversity: pixel_diversity(generated, &source.images[source.len() / 2])?,
        n_generated: generated.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceKind;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn equal_covariance_closed_form() {
        let mu1 = DVector::from_vec(vec![0.0, 0.0]);
        let mu2 = DVector::from_vec(vec![1.0, 1.0]);
        let i = DMatrix::identity(2, 2);
        assert!((frechet_distance(&mu1, &i, &mu2, &i).unwrap() - 2.0).abs() < 1e-8);
        assert!(frechet_distance(&mu1, &i, &mu1, &i).unwrap().abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(frechet_distance(&mu1, &bad, &mu2, &i).is_err());
    }

    #[test]
    fn stats_need_two_locations() {
        let one = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!(feature_stats(&one, Depth::Quarter).is_err());
        let (mu, cov) = feature_stats(&one, Depth::Global).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(cov.amax(), 0.0);
        let two = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        assert_eq!(feature_stats(&two, Depth::Eighth).unwrap().1[(0, 0)], 2.0);
    }

    #[test]
    fn sifid_of_real_against_itself_is_zero() {
        let ex = ConvStackExtractor::toy(0);
        let real = image(1, 64, 96);
        let all = sifid_all(&real, &[real.clone(), real.clone()], &ex).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.values().all(|&v| v.abs() < 1e-9), "{all:?}");
        assert!(sifid(&real, &[image(2, 64, 96)], &ex, Depth::Quarter).unwrap() > 0.0);
        assert!(sifid_all(&real, &[], &ex).is_err());
    }

    struct Lookup(BTreeMap<(usize, usize), f64>);

    impl PerceptualDistance for Lookup {
        fn name(&self) -> &str {
            "lookup"
        }
        fn embed(&self, image: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![image.data()[0] as f64]])
        }
        fn embedding_distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
            let (i, j) = (a[0][0] as usize, b[0][0] as usize);
            self.0[&(i.min(j), i.max(j))]
        }
    }

    #[test]
    fn diversity_and_distance_to_train() {
        let table = Lookup(BTreeMap::from([
            ((0, 1), 0.1),
            ((0, 2), 0.2),
            ((1, 2), 0.3),
            ((0, 0), 0.0),
            ((1, 1), 0.0),
            ((2, 2), 0.0),
        ]));
        let imgs: Vec<_> = (0..3)
            .map(|i| Tensor::full([1, 3, 1, 1], i as f32))
            .collect();
        assert!((pairwise_diversity(&imgs, &table).unwrap() - 0.2).abs() < 1e-12);
        assert!(pairwise_diversity(&imgs[..1], &table).is_err());
        assert_eq!(dist_to_train(&imgs[..1], &imgs, &table).unwrap(), 0.0);
        assert!((dist_to_train(&imgs[1..], &imgs[..1], &table).unwrap() - 0.15).abs() < 1e-12);
        assert!(dist_to_train(&imgs, &[], &table).is_err());
    }

    #[test]
    fn toy_distance_is_a_semimetric() {
        let d = ConvStackExtractor::toy(3);
        let (a, b) = (image(1, 32, 48), image(2, 32, 48));
        assert_eq!(d.dist(&a, &a).unwrap(), 0.0);
        let ab = d.dist(&a, &b).unwrap();
        assert!(ab > 0.0 && (ab - d.dist(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pixel_diversity_examples() {
        let train = image(5, 4, 4);
        let s = (0..3).map(|c| channel_std(&train, c)).sum::<f64>() / 3.0;
        let base = image(6, 4, 4);
        assert_eq!(
            pixel_diversity(&[base.clone(), base.clone()], &train).unwrap(),
            0.0
        );
        let a = 0.25f32;
        let pair = [base.map(|v| v + a), base.map(|v| v - a)];
        let v = pixel_diversity(&pair, &train).unwrap();
        assert!((v - a as f64 / s).abs() < 1e-6);
        let shifted: Vec<_> = pair.iter().map(|t| t.map(|v| v + 0.5)).collect();
        assert!((pixel_diversity(&shifted, &train).unwrap() - v).abs() < 1e-6);
        assert!(pixel_diversity(&pair, &Tensor::full([1, 3, 4, 4], 0.3)).is_err());
    }

    #[test]
    fn weight_archive_round_trip() {
        let ex = ConvStackExtractor::toy(11);
        let back = ConvStackExtractor::from_bytes(&ex.to_bytes()).unwrap();
        let img = image(0, 32, 32);
        let a = ex.extract(&img).unwrap();
        let b = back.extract(&img).unwrap();
        for d in Depth::ALL {
            assert!((&a[&d] - &b[&d]).amax() < 1e-5);
        }
        assert!(matches!(
            ConvStackExtractor::load(Path::new("/missing/weights.bin")),
            Err(Error::Plugin(_))
        ));
        assert!(ConvStackExtractor::from_bytes(b"nope").is_err());
    }

    #[test]
    fn report_schema() {
        let r = MetricReport {
            sifid: Depth::ALL.iter().map(|&d| (d, 0.5)).collect(),
            diversity_lpips: 0.1,
            dist_to_train: 0.2,
            pixel_diversity: 0.3,
            n_generated: 4,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        let mut expected = vec![
            "sifid.quarter",
            "sifid.eighth",
            "sifid.sixteenth",
            "sifid.global",
            "diversity_lpips",
            "dist_to_train",
            "pixel_diversity",
            "n_generated",
        ];
        expected.sort();
        assert_eq!(keys, expected);
        assert_eq!(v["n_generated"], 4);
        assert!(r
            .to_csv()
            .starts_with("sifid.quarter,sifid.eighth,sifid.sixteenth,sifid.global,"));
    }

    #[test]
    fn evaluate_training_image_against_itself() {
        let img = image(9, 64, 64);
        let src = TrainingSource::new(SourceKind::SingleImage, vec![img.clone()]).unwrap();
        let ex = ConvStackExtractor::toy(0);
        let cfg = EvalConfig {
            n_generated: 2,
            pool_per_frame: 2,
            pool_seed: 0,
        };
        let r = evaluate(
            &[img.clone(), img],
            &src,
            &ex,
            &ex,
            &ImageAugConfig::default(),
            &cfg,
        )
        .unwrap();
        assert!(r.sifid.values().all(|&v| v.abs() < 1e-9));
        assert_eq!(r.diversity_lpips, 0.0);
        assert_eq!(r.dist_to_train, 0.0);
        assert_eq!(r.pixel_diversity, 0.0);
    }
}
