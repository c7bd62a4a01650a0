//! Small fully-connected embedding network over MFCC matrices.
//!
//! Input frames are optionally mean-pooled, then passed through ReLU hidden
//! layers and a final linear projection. Forward passes return an
//! activation cache; [`Embedder::backward`] consumes it to produce exact
//! parameter gradients.

mod adam;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{pool_loss, train_stage, EpochLog, LossChoice, Stage, Start, TrainOutcome, TrainSchedule};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{dot, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub frames: usize,
    pub coeffs: usize,
    pub mean_pool: bool,
    pub hidden_sizes: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            frames: 98,
            coeffs: 40,
            mean_pool: true,
            hidden_sizes: vec![256, 128],
            embedding_dim: 64,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.coeffs == 0 {
            return Err(Error::InvalidArgument("input shape must be non-empty".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding_dim {} must be at least 2",
                self.embedding_dim
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        if self.mean_pool {
            self.coeffs
        } else {
            self.frames * self.coeffs
        }
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden_sizes);
        dims.push(self.embedding_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Affine layer `W x + b` with `W` stored `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Dense {
            weights: Matrix::zeros(fan_out, fan_in),
            bias: vec![T::zero(); fan_out],
        }
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(row, &b)| dot(row, x) + b)
            .collect()
    }

    fn add_scaled(&mut self, other: &Dense<T>, k: T) {
        for (a, &b) in self.weights.values_mut().iter_mut().zip(other.weights.values()) {
            *a += k * b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += k * b;
        }
    }
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer (the pooled or flattened features first).
    inputs: Vec<Vec<T>>,
    /// Pre-activation output of each layer.
    outputs: Vec<Vec<T>>,
    frames: usize,
    generation: u64,
}

/// Gradients of a scalar objective with respect to every layer and the
/// input feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderGrads<T> {
    pub layers: Vec<Dense<T>>,
    pub input: Matrix<T>,
}

impl<T: Scalar> EmbedderGrads<T> {
    pub fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.values(), l.bias.as_slice()])
            .collect()
    }
}

/// Running sum of parameter gradients over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(config: &EmbedderConfig) -> Self {
        GradAccumulator {
            layers: config
                .layer_shapes()
                .into_iter()
                .map(|(o, i)| Dense::zeros(o, i))
                .collect(),
        }
    }

    pub fn add(&mut self, g: &EmbedderGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&g.layers) {
            a.add_scaled(b, T::one());
        }
    }

    pub fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.values(), l.bias.as_slice()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder<T> {
    config: EmbedderConfig,
    layers: Vec<Dense<T>>,
    generation: u64,
}

impl<T: Scalar> Embedder<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases,
    /// drawn from `config.seed`.
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_out, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_out, fan_in);
                for w in layer.weights.values_mut() {
                    *w = T::of(rng.random_range(-bound..bound));
                }
                for b in &mut layer.bias {
                    *b = T::of(rng.random_range(-bound..bound));
                }
                layer
            })
            .collect();
        Ok(Embedder {
            config,
            layers,
            generation: 0,
        })
    }

    /// Builds an embedder from explicit layers; shapes must match `config`.
    pub fn from_layers(config: EmbedderConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                expected: shapes.len(),
                actual: layers.len(),
            });
        }
        for ((o, i), l) in shapes.iter().zip(&layers) {
            if l.weights.shape() != (*o, *i) || l.bias.len() != *o {
                return Err(Error::DimensionMismatch {
                    expected: o * i,
                    actual: l.weights.values().len(),
                });
            }
        }
        Ok(Embedder {
            config,
            layers,
            generation: 0,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Parameter blocks in declaration order: per layer, weights then bias.
    pub fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.values(), l.bias.as_slice()])
            .collect()
    }

    /// Mutable parameter blocks; invalidates outstanding forward caches.
    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Dense { weights, bias } = l;
                [weights.values_mut(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// SHA-256 over the little-endian `f64` image of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for block in self.blocks() {
            for v in block {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn flatten_input(&self, features: &Matrix<T>) -> Result<Vec<T>> {
        let expected = (self.config.frames, self.config.coeffs);
        if features.shape() != expected {
            return Err(Error::InvalidArgument(format!(
                "feature shape {:?} does not match embedder input {:?}",
                features.shape(),
                expected
            )));
        }
        Ok(if self.config.mean_pool {
            features.mean_rows()
        } else {
            features.values().to_vec()
        })
    }

    pub fn forward(&self, features: &Matrix<T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        let mut x = self.flatten_input(features)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&x);
            inputs.push(x);
            x = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(T::zero())).collect()
            };
            outputs.push(z);
        }
        Ok((
            x,
            ForwardCache {
                inputs,
                outputs,
                frames: features.rows(),
                generation: self.generation,
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn embed(&self, features: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.forward(features)?.0)
    }

    /// Reverse-mode pass for an upstream gradient on the embedding.
    pub fn backward(&self, grad_embedding: &[T], cache: &ForwardCache<T>) -> Result<EmbedderGrads<T>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                params: self.generation,
            });
        }
        if grad_embedding.len() != self.config.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.embedding_dim,
                actual: grad_embedding.len(),
            });
        }
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_embedding.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let mut g = Dense::zeros(layer.weights.rows(), layer.weights.cols());
            for (r, &d) in delta.iter().enumerate() {
                if d != T::zero() {
                    for (gw, &x) in g.weights.row_mut(r).iter_mut().zip(input) {
                        *gw = d * x;
                    }
                }
                g.bias[r] = d;
            }
            let mut prev = vec![T::zero(); layer.weights.cols()];
            for (r, &d) in delta.iter().enumerate() {
                if d != T::zero() {
                    for (p, &w) in prev.iter_mut().zip(layer.weights.row(r)) {
                        *p += d * w;
                    }
                }
            }
            if i > 0 {
                for (p, &z) in prev.iter_mut().zip(&cache.outputs[i - 1]) {
                    if z <= T::zero() {
                        *p = T::zero();
                    }
                }
            }
            grads.push(g);
            delta = prev;
        }
        grads.reverse();

        let input = if self.config.mean_pool {
            let share = T::one() / T::of(cache.frames as f64);
            let row: Vec<T> = delta.iter().map(|&d| d * share).collect();
            let mut m = Matrix::zeros(cache.frames, self.config.coeffs);
            for f in 0..cache.frames {
                m.row_mut(f).copy_from_slice(&row);
            }
            m
        } else {
            Matrix::new(cache.frames, self.config.coeffs, delta)?
        };
        Ok(EmbedderGrads {
            layers: grads,
            input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_config(hidden: Vec<usize>, mean_pool: bool) -> EmbedderConfig {
        EmbedderConfig {
            frames: 3,
            coeffs: 4,
            mean_pool,
            hidden_sizes: hidden,
            embedding_dim: 5,
            activation: Activation::Relu,
            seed: 3,
        }
    }

    fn features(seed: u64, frames: usize, coeffs: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..frames * coeffs).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::new(frames, coeffs, v).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / n(a).max(n(b)).max(1e-6)
    }

    #[test]
    fn default_shapes() {
        let c = EmbedderConfig::default();
        assert_eq!(c.layer_shapes(), vec![(256, 40), (128, 256), (64, 128)]);
        let e: Embedder<f64> = Embedder::new(c).unwrap();
        assert_eq!(e.parameter_count(), 256 * 41 + 128 * 257 + 64 * 129);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(vec![], true);
        c.embedding_dim = 1;
        assert!(Embedder::<f64>::new(c).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_embedding() {
        let mut e: Embedder<f64> = Embedder::new(small_config(vec![6], true)).unwrap();
        let last = e.layers_mut().last_mut().unwrap();
        *last = Dense::zeros(5, 6);
        let out = e.embed(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(out, vec![0.0; 5]);
    }

    #[test]
    fn forward_deterministic_and_shape_checked() {
        let e: Embedder<f64> = Embedder::new(small_config(vec![6], true)).unwrap();
        let x = features(1, 3, 4);
        assert_eq!(e.embed(&x).unwrap(), e.embed(&x).unwrap());
        assert!(e.embed(&features(1, 2, 4)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let e: Embedder<f64> = Embedder::new(small_config(vec![6, 7], false)).unwrap();
        let (_, cache) = e.forward(&features(2, 3, 4)).unwrap();
        let g = e.backward(&[0.0; 5], &cache).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let e: Embedder<f64> = Embedder::new(small_config(vec![], true)).unwrap();
        let x = features(3, 3, 4);
        let pooled = x.mean_rows();
        let (_, cache) = e.forward(&x).unwrap();
        let up = [0.5, -1.0, 2.0, 0.0, 3.0];
        let g = e.backward(&up, &cache).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                assert!((g.layers[0].weights[(r, c)] - up[r] * pooled[c]).abs() < 1e-15);
            }
            assert_eq!(g.layers[0].bias[r], up[r]);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut e: Embedder<f64> = Embedder::new(small_config(vec![4], true)).unwrap();
        let (_, cache) = e.forward(&features(4, 3, 4)).unwrap();
        e.blocks_mut()[0][0] += 0.1;
        assert!(matches!(e.backward(&[1.0; 5], &cache), Err(Error::StaleCache { .. })));
    }

    /// Upstream objective `u . embed(x)` with fixed `u`.
    #[test]
    fn jacobian_products_match_finite_differences() {
        for (seed, (hidden, pool)) in [(vec![6], true), (vec![6, 5], false), (vec![], false)]
            .into_iter()
            .enumerate()
        {
            let e: Embedder<f64> = Embedder::new(small_config(hidden, pool)).unwrap();
            let x = features(10 + seed as u64, 3, 4);
            let u = [0.3, -0.7, 1.1, 0.2, -0.4];
            let objective = |e: &Embedder<f64>, x: &Matrix<f64>| dot(&e.embed(x).unwrap(), &u);
            let (_, cache) = e.forward(&x).unwrap();
            let g = e.backward(&u, &cache).unwrap();
            let h = 1e-4;

            // input
            let mut num = Vec::new();
            for i in 0..12 {
                let mut up = x.clone();
                up.values_mut()[i] += h;
                let mut down = x.clone();
                down.values_mut()[i] -= h;
                num.push((objective(&e, &up) - objective(&e, &down)) / (2.0 * h));
            }
            assert!(rel_err(g.input.values(), &num) < 1e-4);

            // parameters
            let analytic: Vec<f64> = g.blocks().concat();
            let mut num = Vec::new();
            let n_blocks = e.blocks().len();
            for b in 0..n_blocks {
                for i in 0..e.blocks()[b].len() {
                    let mut up = e.clone();
                    up.blocks_mut()[b][i] += h;
                    let mut down = e.clone();
                    down.blocks_mut()[b][i] -= h;
                    num.push((objective(&up, &x) - objective(&down, &x)) / (2.0 * h));
                }
            }
            assert!(rel_err(&analytic, &num) < 1e-4);
        }
    }

    #[test]
    fn checksum_tracks_parameters() {
        let mut e: Embedder<f64> = Embedder::new(small_config(vec![4], true)).unwrap();
        let before = e.checksum();
        assert_eq!(before, e.clone().checksum());
        e.blocks_mut()[1][0] += 1.0;
        assert_ne!(before, e.checksum());
    }

    #[test]
    fn single_precision_forward() {
        let e: Embedder<f32> = Embedder::new(small_config(vec![6], true)).unwrap();
        let x = features(5, 3, 4).cast::<f32>();
        assert_eq!(e.embed(&x).unwrap().len(), 5);
    }
}
