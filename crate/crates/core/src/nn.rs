//! Parameters, spectrally normalized convolutions, and binding them onto a tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Slope of the leaky ReLU used throughout both networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Power iterations run when a layer is created, before any training step.
pub const INITIAL_POWER_ITERATIONS: usize = 15;

/// A named trainable tensor. Names are canonical dotted paths, e.g. `gen.block0.conv1.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Persistent left/right singular vector estimates of a weight viewed as `(out, rest)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

pub(crate) fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = StandardNormal.sample(rng);
    T::from_f64_lossy(v)
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v
        .iter()
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt()
        .max(T::from_f64_lossy(1e-12));
    for x in v.iter_mut() {
        *x = *x / norm;
    }
}

impl<T: Scalar> SpectralState<T> {
    fn init<R: Rng + ?Sized>(weight: &Tensor<T>, rng: &mut R) -> Self {
        let rows = weight.shape()[0];
        let mut u: Vec<T> = (0..rows).map(|_| standard_normal(rng)).collect();
        normalize(&mut u);
        let mut state = Self { u, v: Vec::new() };
        state.v = state.right_from_left(weight);
        state
    }

    fn right_from_left(&self, weight: &Tensor<T>) -> Vec<T> {
        let rows = weight.shape()[0];
        let cols = weight.len() / rows;
        let mut v = vec![T::zero(); cols];
        for r in 0..rows {
            let row = &weight.data()[r * cols..(r + 1) * cols];
            for (acc, &w) in v.iter_mut().zip(row) {
                *acc = *acc + self.u[r] * w;
            }
        }
        normalize(&mut v);
        v
    }

    /// One step `v <- W^T u / |W^T u|`, `u <- W v / |W v|`.
    pub fn step(&mut self, weight: &Tensor<T>) {
        let rows = weight.shape()[0];
        let cols = weight.len() / rows;
        self.v = self.right_from_left(weight);
        for r in 0..rows {
            let row = &weight.data()[r * cols..(r + 1) * cols];
            self.u[r] = row.iter().zip(&self.v).map(|(&a, &b)| a * b).sum();
        }
        normalize(&mut self.u);
    }

    /// Current estimate `u^T W v` of the largest singular value.
    pub fn sigma(&self, weight: &Tensor<T>) -> T {
        let rows = weight.shape()[0];
        let cols = weight.len() / rows;
        (0..rows)
            .map(|r| {
                let row = &weight.data()[r * cols..(r + 1) * cols];
                self.u[r] * row.iter().zip(&self.v).map(|(&a, &b)| a * b).sum::<T>()
            })
            .sum()
    }
}

/// Stride-1 convolution with bias and optional spectral normalization of the weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub pad: usize,
    pub spectral: Option<SpectralState<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Same-padded `kernel x kernel` convolution (odd kernels only).
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spectral_norm: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Tensor::from_fn([out_channels, in_channels, kernel, kernel], |_| {
            standard_normal::<T, _>(rng) * T::from_f64_lossy(std)
        });
        let spectral = spectral_norm.then(|| {
            let mut s = SpectralState::init(&weight, rng);
            for _ in 0..INITIAL_POWER_ITERATIONS {
                s.step(&weight);
            }
            s
        });
        Self {
            weight: Param {
                name: format!("{name}.weight"),
                value: weight,
            },
            bias: Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros([out_channels, 1, 1, 1]),
            },
            kernel,
            pad: kernel / 2,
            spectral,
        }
    }

    pub fn name(&self) -> &str {
        self.weight
            .name
            .strip_suffix(".weight")
            .unwrap_or(&self.weight.name)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'t>(&self, ctx: &Binder<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.bind(&self.weight);
        let w = match &self.spectral {
            Some(s) => w.spectral_normalize(&s.u, &s.v),
            None => w,
        };
        let b = ctx.bind(&self.bias);
        x.conv2d(w, Some(b), self.pad)
    }

    pub fn power_iterate(&mut self, steps: usize) {
        if let Some(s) = self.spectral.as_mut() {
            for _ in 0..steps {
                s.step(&self.weight.value);
            }
        }
    }

    /// The weight actually applied in the forward pass.
    pub fn effective_weight(&self) -> Tensor<T> {
        match &self.spectral {
            Some(s) => {
                let sigma = s.sigma(&self.weight.value).max(T::from_f64_lossy(1e-12));
                self.weight.value.map(|w| w / sigma)
            }
            None => self.weight.value.clone(),
        }
    }
}

/// Anything built from [`Conv2d`] layers.
pub trait Module<T: Scalar> {
    fn convs(&self) -> Vec<&Conv2d<T>>;
    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        self.convs()
            .into_iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn power_iterate(&mut self, steps: usize) {
        for c in self.convs_mut() {
            c.power_iterate(steps);
        }
    }
}

/// Places parameters on a tape, either as trainable leaves or as constants.
///
/// Each parameter is bound at most once per binder, so repeated forward passes
/// share a leaf and their gradients accumulate.
pub struct Binder<'t, T: Scalar> {
    tape: &'t Tape<T>,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn trainable(tape: &'t Tape<T>) -> Self {
        Self {
            tape,
            trainable: true,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn frozen(tape: &'t Tape<T>) -> Self {
        Self {
            tape,
            trainable: false,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn bind(&self, p: &Param<T>) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow().get(&p.name) {
            return *v;
        }
        let v = if self.trainable {
            self.tape.param(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(p.name.clone(), v);
        v
    }

    /// Gradients of every bound parameter, keyed by name; zeros for unused ones.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_estimate_converges_on_diagonal_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new("c", 3, 3, 1, true, &mut rng);
        conv.weight.value =
            Tensor::from_fn(
                [3, 3, 1, 1],
                |[o, i, _, _]| if o == i { (o + 1) as f64 } else { 0.0 },
            );
        conv.power_iterate(200);
        let s = conv.spectral.as_ref().unwrap().sigma(&conv.weight.value);
        assert!((s - 3.0).abs() < 1e-6, "sigma {s}");
    }

    #[test]
    fn binder_reuses_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new("c", 2, 2, 3, false, &mut rng);
        let tape = Tape::new();
        let ctx = Binder::trainable(&tape);
        let x = tape.constant(Tensor::full([1, 2, 3, 3], 1.0));
        let y = conv.forward(&ctx, x).add(conv.forward(&ctx, x)).mean();
        let grads = ctx.gradients(&tape.backward(y));
        assert_eq!(grads.len(), 2);
        // d mean(2*(b)) / db_c = 2 / channels
        assert!(grads["c.bias"]
            .data()
            .iter()
            .all(|&g| (g - 1.0).abs() < 1e-12));
    }
}
